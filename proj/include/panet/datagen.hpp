#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "panet/tensor.hpp"

namespace panet {

/// Bad input data: malformed images or manifests, unusable corpora.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Light { dark, normal, exposure, nonuniform };
enum class Orientation { left, front, right };

inline constexpr std::array<Light, 4> kLights{Light::dark, Light::normal, Light::exposure,
                                              Light::nonuniform};
inline constexpr std::array<Orientation, 3> kOrientations{Orientation::left, Orientation::front,
                                                          Orientation::right};

std::string to_string(Light light);
std::string to_string(Orientation orientation);
Light parse_light(std::string_view text);
Orientation parse_orientation(std::string_view text);

struct ManifestRecord {
  std::string path;   // relative to the manifest's directory
  std::string id;
  std::string split;  // "train" or "test"
  std::optional<Light> light;
  std::optional<Orientation> orientation;

  bool operator==(const ManifestRecord&) const = default;
};

nlohmann::json to_json(const ManifestRecord& record);
/// Throws DataError on missing fields or values outside the vocabularies.
ManifestRecord record_from_json(const nlohmann::json& j);

/// JSON-lines, one record per line. Paths must be unique.
std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records);
std::vector<ManifestRecord> filter_split(const std::vector<ManifestRecord>& records,
                                         std::string_view split);

/// Planar (C, H, W) image with values in [0, 1].
struct Image {
  std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, float fill = 0.0f)
      : channels(c), height(h), width(w), pixels(c * h * w, fill) {}

  float& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels[(c * height + y) * width + x];
  }
  bool operator==(const Image&) const = default;
};

/// Binary PPM (P6, maxval 255). Throws DataError with the byte offset of the problem.
Image read_ppm(const std::filesystem::path& path);
Image decode_ppm(std::string_view bytes);
/// Values are clamped to [0, 1] and rounded to the nearest 1/255 step.
void write_ppm(const Image& image, const std::filesystem::path& path);
std::string encode_ppm(const Image& image);

/// (1, 3, H, W) tensor in [0, 1].
Tensor<float> load_image(const std::filesystem::path& path);
void save_image(const Tensor<float>& x, const std::filesystem::path& path);
Tensor<float> to_tensor(const Image& image);
Image from_tensor(const Tensor<float>& x);

/// Bilinear, pixel-center sampling (align_corners = false), edge clamped.
Image resize(const Image& image, std::size_t height, std::size_t width);
Tensor<float> resize(const Tensor<float>& x, std::size_t height, std::size_t width);

struct HFlip {};
struct Brightness {
  double factor = 1.0;
};
struct Translate {
  int dx = 0;
  int dy = 0;
};
using AugmentOp = std::variant<HFlip, Brightness, Translate>;

/// hflip mirrors columns; brightness scales and clips to [0, 1]; translate
/// shifts content by (dx, dy) pixels with zero fill.
Image augment(const Image& image, const AugmentOp& op);

struct ConditionMix {
  std::array<double, 4> light{0.1, 0.6, 0.2, 0.1};         // dark, normal, exposure, nonuniform
  std::array<double, 3> orientation{0.2, 0.6, 0.2};        // left, front, right
};

struct SynthConfig {
  std::size_t n_identities = 8;
  std::size_t samples_per_identity = 10;
  std::size_t image_size = 64;
  std::uint64_t seed = 0;
  ConditionMix condition_mix;

  void validate() const;
};

/// Renders one sample of identity `identity` under the given conditions.
/// Deterministic in (cfg.seed, identity, sample).
Image render_sample(const SynthConfig& cfg, std::size_t identity, std::size_t sample, Light light,
                    Orientation orientation);

/// Writes images under out_dir/images/ and returns the records (split
/// "train"), ordered by identity then sample. Does not write the manifest.
std::vector<ManifestRecord> generate(const SynthConfig& cfg, const std::filesystem::path& out_dir);

struct SplitResult {
  std::vector<ManifestRecord> train;
  std::vector<ManifestRecord> test;
};

/// Per-identity stratified split: round(ratio * n) samples to train, clamped
/// so that both sides keep at least one.
SplitResult split(const std::vector<ManifestRecord>& records, double ratio, std::uint64_t seed);

}  // namespace panet
