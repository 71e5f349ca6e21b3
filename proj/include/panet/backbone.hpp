#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "panet/blocks.hpp"

namespace panet {

struct BackboneConfig {
  std::size_t input_height = 64;
  std::size_t input_width = 64;
  std::size_t in_channels = 3;
  std::size_t base_channels = 16;
  std::vector<std::size_t> stage_depths{1, 1, 2, 1};
  std::vector<std::size_t> channel_multipliers{1, 2, 4, 8};
  std::size_t embedding_dim = 128;
  double fmm_ratio = 2.0;
  Topology topology = Topology::parallel;
  PoolingMode pooling = PoolingMode::both;
  bool l2_normalize_embedding = true;

  /// 64x64 input, C0 = 16, depths (1,1,2,1).
  static BackboneConfig desk();
  /// 224x224 input, C0 = 64, depths (2,2,6,2). Only used for counting.
  static BackboneConfig paper_scale();

  std::size_t num_stages() const { return stage_depths.size(); }
  std::size_t stage_channels(std::size_t stage) const;
  /// Spatial size (height, width) inside stage `stage`.
  std::pair<std::size_t, std::size_t> stage_resolution(std::size_t stage) const;
  /// Patch stride 4, then a factor of 2 per additional stage.
  std::size_t required_divisor() const;

  /// Throws std::invalid_argument naming the violated constraint.
  void validate() const;

  nlohmann::json to_json() const;
  static BackboneConfig from_json(const nlohmann::json& j);
};

/// Non-overlapping 4x4 patch projection. H and W must be multiples of 4.
template <typename T>
Tensor<T> patch_embed(const Tensor<T>& images, const ConvParams<T>& stem);

/// 2x2 patch merge. H and W must be even.
template <typename T>
Tensor<T> downsample(const Tensor<T>& x, const ConvParams<T>& merge);

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

/// Stem (4x4 patch projection) -> stages of blocks with 2x2 patch-merge
/// downsampling between them -> GAP -> linear head -> optional L2 normalize.
template <typename T>
class Backbone {
 public:
  struct Stage {
    std::optional<ConvParams<T>> downsample;  // absent for stage 0
    std::vector<BlockParams<T>> blocks;
  };

  Backbone(BackboneConfig config, std::uint64_t seed);

  /// (N, in_channels, H, W) -> (N, embedding_dim)
  Tensor<T> forward(const Tensor<T>& images) const;

  const BackboneConfig& config() const { return config_; }
  std::vector<NamedParam<T>>& params() { return params_; }
  const std::vector<NamedParam<T>>& params() const { return params_; }
  /// Throws std::out_of_range for an unknown name.
  Tensor<T>& param(const std::string& name);

  const ConvParams<T>& stem() const { return stem_; }
  const std::vector<Stage>& stages() const { return stages_; }
  const Tensor<T>& head_weight() const { return head_weight_; }
  const Tensor<T>& head_bias() const { return head_bias_; }

  std::size_t parameter_count() const;

  /// Copies every parameter value into a model of another precision.
  template <typename U>
  Backbone<U> cast() const {
    Backbone<U> out(config_, 0);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto src = params_[i].tensor.data();
      auto dst = out.params()[i].tensor.mutable_data();
      for (std::size_t k = 0; k < src.size(); ++k) dst[k] = static_cast<U>(src[k]);
    }
    return out;
  }

 private:
  void register_params();

  BackboneConfig config_;
  ConvParams<T> stem_;
  std::vector<Stage> stages_;
  Tensor<T> head_weight_;
  Tensor<T> head_bias_;
  std::vector<NamedParam<T>> params_;
};

/// Closed-form counts from the configuration alone. MACs count convolution
/// (C_out * C_in/groups * k^2 * H_out * W_out) and linear (in * out) layers;
/// normalization, pooling and elementwise products are excluded.
std::uint64_t count_params(const BackboneConfig& config);
std::uint64_t count_macs(const BackboneConfig& config);

/// Per-layer rows behind the totals, in forward order.
struct CountRow {
  std::string layer;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};
std::vector<CountRow> count_ledger(const BackboneConfig& config);

/// One convolution with bias producing an h_out x w_out map.
CountRow conv_count(std::string layer, std::uint64_t in_channels, std::uint64_t out_channels,
                    std::uint64_t kernel, std::uint64_t groups, std::uint64_t h_out, std::uint64_t w_out);

/// Checkpoint layout (all integers little-endian):
///   8 bytes   magic "PANETCKP"
///   u32       format version (1)
///   u32       header length L, then L bytes of UTF-8 JSON
///             {"config": {...}, "meta": {...}}
///   u32       parameter count P, then per parameter:
///             u32 name length, name bytes, u32 rank, rank x u32 dims,
///             numel x float32
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Backbone<float>& model,
                     const nlohmann::json& meta = nlohmann::json::object());

struct LoadedCheckpoint {
  Backbone<float> model;
  nlohmann::json meta;
};

/// Throws std::runtime_error on I/O failure or a malformed file.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace panet
