#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "panet/backbone.hpp"
#include "panet/datagen.hpp"

namespace panet {

/// (u . v) / (|u| |v|). Throws std::invalid_argument on a zero vector or a
/// dimension mismatch.
double cosine_similarity(std::span<const float> u, std::span<const float> v);

struct LibraryEntry {
  std::string identity;
  std::vector<float> embedding;
  std::string source_path;
};

/// One enrolled embedding per identity, sorted by identity id.
struct FeatureLibrary {
  std::vector<LibraryEntry> entries;
};

/// A test sample with its embedding and condition tags.
struct LabeledEmbedding {
  std::string identity;
  std::vector<float> embedding;
  std::string path;
  std::optional<Light> light;
  std::optional<Orientation> orientation;
};

struct GallerySplit {
  std::vector<std::size_t> gallery;  // one index per usable identity, sorted by identity
  std::vector<std::size_t> probes;   // everything else from usable identities, input order
  std::vector<std::string> excluded_identities;  // single-sample identities
};

/// Picks one gallery sample per identity uniformly with a seeded generator.
GallerySplit select_gallery(std::span<const std::string> identities, std::uint64_t seed);

FeatureLibrary build_library(std::span<const LabeledEmbedding> samples, const GallerySplit& split);

struct Match {
  std::string identity;
  double similarity = 0.0;
  /// Another entry reached the same similarity; the lowest id was kept.
  bool tie = false;
};

/// Highest cosine similarity wins; ties go to the lowest identity id.
Match classify(std::span<const float> probe, const FeatureLibrary& library);

struct ConditionStat {
  std::string value;
  std::size_t tp = 0;
  std::size_t n = 0;
  double contribution = 0.0;  // tp / N_total
  double accuracy = 0.0;      // tp / n (0 when n == 0)
};

struct ConditionFamily {
  std::string name;  // "light" or "orientation"
  bool available = false;
  std::vector<ConditionStat> stats;

  /// Integer check that the per-condition counts partition the totals, which
  /// makes the contributions sum to TP/N exactly as rationals.
  bool sums_exactly(std::size_t tp, std::size_t n) const;
};

struct EvalReport {
  std::uint64_t seed = 0;
  std::size_t n = 0;
  std::size_t tp = 0;
  double accuracy = 0.0;
  std::size_t gallery_size = 0;
  std::size_t ties = 0;
  std::vector<std::string> excluded_identities;
  ConditionFamily light;
  ConditionFamily orientation;

  nlohmann::json to_json() const;
  /// Header "Dark,Normal,Exposure,Nonuniform,Left,Front,Right,Sum" and one
  /// row of percentages (contributions) with two decimals.
  std::string to_csv() const;
};

/// Builds the library from `samples`, classifies every probe and fills the
/// per-condition rollups. A family is marked unavailable if any probe lacks
/// its tag.
EvalReport evaluate(std::span<const LabeledEmbedding> samples, std::uint64_t seed);

/// Embeds the test records with `model` and evaluates them.
EvalReport evaluate(const Backbone<float>& model, const std::vector<ManifestRecord>& test_records,
                    const std::filesystem::path& base_dir, std::uint64_t seed);

/// Embeds pre-loaded samples in fixed-size chunks without recording a graph.
std::vector<std::vector<float>> embed_images(const Backbone<float>& model,
                                             const std::vector<const Image*>& images,
                                             std::size_t chunk = 32);

}  // namespace panet
