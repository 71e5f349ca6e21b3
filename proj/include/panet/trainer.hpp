#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "panet/backbone.hpp"
#include "panet/datagen.hpp"

namespace panet {

/// (B, D) embeddings -> (B, B) squared Euclidean distances, clamped at 0.
/// For unit-norm rows this is 2 - 2 * cos(e_i, e_j).
template <typename T>
Tensor<T> pairwise_sq_dist(const Tensor<T>& embeddings);

struct Triplet {
  std::size_t anchor = 0;
  std::size_t positive = 0;
  std::size_t negative = 0;
  double d1 = 0.0;  // anchor-positive distance
  double d2 = 0.0;  // anchor-negative distance
  bool fallback = false;

  bool operator==(const Triplet&) const = default;
};

struct TripletBatch {
  std::vector<Triplet> triplets;
  double margin = 0.2;
  std::size_t fallback_count = 0;
  /// Anchors whose identity has no other sample in the batch.
  std::size_t skipped_singletons = 0;
};

/// For every ordered same-label pair (a, p), a != p, picks the negative with
/// the smallest D[a][n] inside the open band (D[a][p], D[a][p] + margin).
/// When the band is empty the hardest negative (smallest D[a][n]) is used and
/// the triplet is flagged. Ties go to the lowest index.
TripletBatch semi_hard_mine(std::span<const double> distances, std::span<const std::size_t> labels,
                            double margin);

/// Sum over triplets of max(0, D[a][p] - D[a][n] + margin).
template <typename T>
Tensor<T> triplet_loss(const Tensor<T>& distances, const TripletBatch& batch);

/// Cosine annealing from lr0 at t = 0 to lr_min at t = total.
double lr_at(std::size_t t, std::size_t total, double lr0, double lr_min);

/// LayerNorm gains/biases and the per-channel branch scales are not decayed.
bool is_decay_exempt(const std::string& param_name);

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adaptive moment estimation with bias correction and decoupled weight decay
/// (theta <- theta - lr * wd * theta, applied apart from the gradient step).
template <typename T>
class AdamW {
 public:
  explicit AdamW(std::vector<NamedParam<T>> params, AdamWOptions options = {});

  /// Throws NumericError naming the parameter if any gradient is non-finite;
  /// no parameter is modified in that case.
  void step(const Gradients<T>& grads, double lr, double weight_decay);

  std::size_t steps() const { return step_; }

 private:
  std::vector<NamedParam<T>> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::vector<bool> decay_;
  AdamWOptions options_;
  std::size_t step_ = 0;
};

struct TrainConfig {
  double lr0 = 5e-4;
  double lr_min = 0.0;
  double weight_decay = 5e-2;
  std::size_t batch_p = 4;  // identities per batch
  std::size_t batch_k = 4;  // samples per identity
  std::size_t epochs = 300;
  /// When nonzero, overrides epochs * steps_per_epoch.
  std::size_t max_steps = 0;
  double margin = 0.2;
  std::uint64_t seed = 0;
  /// Evaluate every this many steps (and at the last step); 0 = only at the end.
  std::size_t eval_every = 0;
  bool online_augment = false;

  std::size_t batch_size() const { return batch_p * batch_k; }
  /// 300 epochs (paper-scale) or 50 epochs (desk-scale).
  static TrainConfig desk();
  void validate() const;
};

struct Sample {
  std::size_t label = 0;
  Image image;
};

/// In-memory images at the model's input size with dense integer labels.
struct Dataset {
  std::vector<std::string> identities;  // label -> identity id
  std::vector<Sample> samples;
};

/// Loads and resizes every record's image. Paths resolve against base_dir.
Dataset load_dataset(const std::vector<ManifestRecord>& records, const std::filesystem::path& base_dir,
                     std::size_t height, std::size_t width);

/// Packs images into an (N, C, H, W) tensor.
Tensor<float> stack_images(const std::vector<const Image*>& images);

/// P identities (without replacement) x K samples each. Identities with
/// fewer than K samples repeat samples after exhausting them.
std::vector<std::size_t> sample_batch(const Dataset& data, std::size_t p, std::size_t k, Rng& rng);

struct StepMetrics {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double active_triplet_fraction = 0.0;
  std::size_t triplets = 0;
  std::size_t fallbacks = 0;
  std::optional<double> eval_accuracy;
};

/// Append-only CSV: step,epoch,lr,loss,active_triplet_fraction,eval_accuracy
class MetricsLog {
 public:
  static constexpr const char* kHeader = "step,epoch,lr,loss,active_triplet_fraction,eval_accuracy";

  explicit MetricsLog(const std::filesystem::path& path);
  void append(const StepMetrics& m);

 private:
  std::ofstream os_;
};

struct TrainResult {
  std::vector<StepMetrics> history;
  std::size_t total_steps = 0;
  std::size_t steps_per_epoch = 0;
};

using EvalFn = std::function<double(const Backbone<float>&)>;
using StepFn = std::function<void(const StepMetrics&)>;

/// batch -> forward -> distances -> mining -> loss -> backward -> AdamW with
/// cosine-annealed learning rate. Single-threaded and deterministic in
/// cfg.seed. Throws NumericError on a non-finite loss.
TrainResult train(Backbone<float>& model, const Dataset& data, const TrainConfig& cfg,
                  const EvalFn& evaluate = {}, const StepFn& on_step = {});

}  // namespace panet
