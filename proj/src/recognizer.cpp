#include "panet/recognizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "panet/random.hpp"
#include "panet/trainer.hpp"

namespace panet {

double cosine_similarity(std::span<const float> u, std::span<const float> v) {
  if (u.size() != v.size()) {
    throw std::invalid_argument("cosine_similarity: dimensions differ (" + std::to_string(u.size()) +
                                " vs " + std::to_string(v.size()) + ")");
  }
  double dot = 0, uu = 0, vv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += static_cast<double>(u[i]) * v[i];
    uu += static_cast<double>(u[i]) * u[i];
    vv += static_cast<double>(v[i]) * v[i];
  }
  if (uu == 0.0 || vv == 0.0) throw std::invalid_argument("cosine_similarity: zero-norm vector");
  return std::clamp(dot / (std::sqrt(uu) * std::sqrt(vv)), -1.0, 1.0);
}

GallerySplit select_gallery(std::span<const std::string> identities, std::uint64_t seed) {
  std::map<std::string, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < identities.size(); ++i) by_id[identities[i]].push_back(i);
  Rng rng = make_rng(seed, 0x67616c);
  GallerySplit out;
  std::vector<bool> is_gallery(identities.size(), false), usable(identities.size(), false);
  for (const auto& [id, idx] : by_id) {
    if (idx.size() < 2) {
      out.excluded_identities.push_back(id);
      continue;
    }
    const std::size_t pick = idx[uniform_index(rng, idx.size())];
    out.gallery.push_back(pick);
    is_gallery[pick] = true;
    for (auto i : idx) usable[i] = true;
  }
  for (std::size_t i = 0; i < identities.size(); ++i) {
    if (usable[i] && !is_gallery[i]) out.probes.push_back(i);
  }
  return out;
}

FeatureLibrary build_library(std::span<const LabeledEmbedding> samples, const GallerySplit& split) {
  FeatureLibrary lib;
  for (auto i : split.gallery) {
    const auto& s = samples[i];
    if (!lib.entries.empty() && lib.entries.front().embedding.size() != s.embedding.size()) {
      throw std::invalid_argument("feature library embeddings differ in dimension");
    }
    lib.entries.push_back({s.identity, s.embedding, s.path});
  }
  std::sort(lib.entries.begin(), lib.entries.end(),
            [](const LibraryEntry& a, const LibraryEntry& b) { return a.identity < b.identity; });
  for (std::size_t i = 1; i < lib.entries.size(); ++i) {
    if (lib.entries[i].identity == lib.entries[i - 1].identity) {
      throw std::invalid_argument("feature library has duplicate identity '" + lib.entries[i].identity + "'");
    }
  }
  return lib;
}

Match classify(std::span<const float> probe, const FeatureLibrary& library) {
  if (library.entries.empty()) throw std::invalid_argument("classify: empty feature library");
  // Entries are scanned in id order, so keeping the first maximum keeps the lowest id.
  const LibraryEntry* best = nullptr;
  double best_sim = 0.0;
  bool tie = false;
  for (const auto& e : library.entries) {
    const double sim = cosine_similarity(probe, e.embedding);
    if (!best || sim > best_sim) {
      best = &e;
      best_sim = sim;
      tie = false;
    } else if (sim == best_sim) {
      tie = true;
    }
  }
  return {best->identity, best_sim, tie};
}

bool ConditionFamily::sums_exactly(std::size_t tp, std::size_t n) const {
  if (!available) return false;
  std::size_t tp_sum = 0, n_sum = 0;
  for (const auto& s : stats) {
    tp_sum += s.tp;
    n_sum += s.n;
  }
  return tp_sum == tp && n_sum == n;
}

namespace {

template <typename Value, std::size_t K>
ConditionFamily rollup(const std::string& name, const std::array<Value, K>& values,
                       const std::vector<std::optional<Value>>& tags, const std::vector<bool>& correct) {
  ConditionFamily fam;
  fam.name = name;
  fam.available = std::all_of(tags.begin(), tags.end(), [](const auto& t) { return t.has_value(); });
  if (!fam.available) return fam;
  const std::size_t total = tags.size();
  for (auto v : values) {
    ConditionStat s;
    s.value = to_string(v);
    for (std::size_t i = 0; i < total; ++i) {
      if (*tags[i] != v) continue;
      ++s.n;
      if (correct[i]) ++s.tp;
    }
    s.contribution = total ? static_cast<double>(s.tp) / static_cast<double>(total) : 0.0;
    s.accuracy = s.n ? static_cast<double>(s.tp) / static_cast<double>(s.n) : 0.0;
    fam.stats.push_back(s);
  }
  return fam;
}

nlohmann::json family_json(const ConditionFamily& fam) {
  nlohmann::json j{{"available", fam.available}};
  nlohmann::json conds = nlohmann::json::object();
  for (const auto& s : fam.stats) {
    conds[s.value] = {{"tp", s.tp}, {"n", s.n}, {"contribution", s.contribution}, {"accuracy", s.accuracy}};
  }
  j["conditions"] = conds;
  return j;
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * v);
  return buf;
}

}  // namespace

nlohmann::json EvalReport::to_json() const {
  return {{"seed", seed},
          {"N", n},
          {"TP", tp},
          {"accuracy", accuracy},
          {"gallery_size", gallery_size},
          {"ties", ties},
          {"excluded_identities", excluded_identities},
          {"light", family_json(light)},
          {"orientation", family_json(orientation)}};
}

std::string EvalReport::to_csv() const {
  std::string header = "Dark,Normal,Exposure,Nonuniform,Left,Front,Right,Sum\n";
  std::string row;
  auto cells = [&](const ConditionFamily& fam, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) {
      if (fam.available) row += pct(fam.stats[i].contribution);
      row += ',';
    }
  };
  cells(light, 4);
  cells(orientation, 3);
  row += pct(accuracy) + '\n';
  return header + row;
}

EvalReport evaluate(std::span<const LabeledEmbedding> samples, std::uint64_t seed) {
  std::vector<std::string> ids;
  ids.reserve(samples.size());
  for (const auto& s : samples) ids.push_back(s.identity);
  const GallerySplit split = select_gallery(ids, seed);
  if (split.gallery.empty() || split.probes.empty()) {
    throw DataError("evaluation needs at least one identity with two or more test samples");
  }
  const FeatureLibrary lib = build_library(samples, split);

  EvalReport report;
  report.seed = seed;
  report.gallery_size = lib.entries.size();
  report.excluded_identities = split.excluded_identities;
  std::vector<bool> correct;
  std::vector<std::optional<Light>> lights;
  std::vector<std::optional<Orientation>> orientations;
  for (auto i : split.probes) {
    const auto& s = samples[i];
    const Match m = classify(s.embedding, lib);
    if (m.tie) ++report.ties;
    correct.push_back(m.identity == s.identity);
    lights.push_back(s.light);
    orientations.push_back(s.orientation);
  }
  report.n = correct.size();
  report.tp = static_cast<std::size_t>(std::count(correct.begin(), correct.end(), true));
  report.accuracy = static_cast<double>(report.tp) / static_cast<double>(report.n);
  report.light = rollup("light", kLights, lights, correct);
  report.orientation = rollup("orientation", kOrientations, orientations, correct);
  return report;
}

std::vector<std::vector<float>> embed_images(const Backbone<float>& model,
                                             const std::vector<const Image*>& images, std::size_t chunk) {
  NoGradGuard no_grad;
  std::vector<std::vector<float>> out;
  for (std::size_t start = 0; start < images.size(); start += chunk) {
    const std::size_t end = std::min(images.size(), start + chunk);
    std::vector<const Image*> part(images.begin() + static_cast<std::ptrdiff_t>(start),
                                   images.begin() + static_cast<std::ptrdiff_t>(end));
    auto emb = model.forward(stack_images(part));
    const std::size_t d = emb.dim(1);
    for (std::size_t i = 0; i < part.size(); ++i) {
      out.emplace_back(emb.data().begin() + static_cast<std::ptrdiff_t>(i * d),
                       emb.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
    }
  }
  return out;
}

EvalReport evaluate(const Backbone<float>& model, const std::vector<ManifestRecord>& test_records,
                    const std::filesystem::path& base_dir, std::uint64_t seed) {
  const auto& cfg = model.config();
  const Dataset data = load_dataset(test_records, base_dir, cfg.input_height, cfg.input_width);
  std::vector<const Image*> images;
  for (const auto& s : data.samples) images.push_back(&s.image);
  auto embeddings = embed_images(model, images);
  std::vector<LabeledEmbedding> samples;
  for (std::size_t i = 0; i < test_records.size(); ++i) {
    const auto& r = test_records[i];
    samples.push_back({r.id, std::move(embeddings[i]), r.path, r.light, r.orientation});
  }
  return evaluate(samples, seed);
}

}  // namespace panet
