#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <set>

#include "panet/recognizer.hpp"
#include "support.hpp"

using namespace panet;

namespace {

std::vector<float> unit(std::size_t dim, std::size_t axis) {
  std::vector<float> v(dim, 0.0f);
  v[axis] = 1.0f;
  return v;
}

LabeledEmbedding sample(std::string id, std::vector<float> e, std::string path, Light light = Light::normal,
                        Orientation orientation = Orientation::front) {
  return {std::move(id), std::move(e), std::move(path), light, orientation};
}

std::string padded_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "id%05zu", i);
  return buf;
}

double contribution_sum(const ConditionFamily& fam) {
  double s = 0.0;
  for (const auto& st : fam.stats) s += st.contribution;
  return s;
}

// Separable corpus: identity i sits near axis i, conditions cycle through the vocabularies.
std::vector<LabeledEmbedding> perfect_corpus(std::size_t ids, std::size_t per_id, Rng& rng) {
  std::vector<LabeledEmbedding> out;
  for (std::size_t i = 0; i < ids; ++i) {
    for (std::size_t k = 0; k < per_id; ++k) {
      auto e = unit(ids, i);
      for (auto& v : e) v += static_cast<float>(0.01 * uniform01(rng));
      out.push_back(sample(padded_id(i), e, "p" + std::to_string(out.size()), kLights[(i + k) % 4],
                           kOrientations[(i * 2 + k) % 3]));
    }
  }
  return out;
}

}  // namespace

TEST_CASE("cosine similarity examples") {
  const std::vector<float> u{1, 2, 3}, v{-1, -2, -3}, w{2, -1, 0};
  CHECK(cosine_similarity(u, u) == doctest::Approx(1.0));
  CHECK(cosine_similarity(u, v) == doctest::Approx(-1.0));
  CHECK(cosine_similarity(u, w) == doctest::Approx(0.0));
  const std::vector<float> zero{0, 0, 0}, short_vec{1, 2};
  CHECK_THROWS_AS(cosine_similarity(u, zero), std::invalid_argument);
  CHECK_THROWS_AS(cosine_similarity(u, short_vec), std::invalid_argument);
}

TEST_CASE("gallery: 3 identities x 3 samples give 3 entries and 6 probes") {
  const std::vector<std::string> ids{"a", "b", "c", "a", "b", "c", "a", "b", "c"};
  const auto split = select_gallery(ids, 4);
  CHECK(split.gallery.size() == 3);
  CHECK(split.probes.size() == 6);
  std::set<std::size_t> seen(split.gallery.begin(), split.gallery.end());
  for (auto p : split.probes) CHECK(seen.insert(p).second);
  CHECK(seen.size() == 9);
  CHECK(ids[split.gallery[0]] == "a");
  CHECK(ids[split.gallery[1]] == "b");
  CHECK(ids[split.gallery[2]] == "c");
}

TEST_CASE("gallery selection is seeded and always disjoint from the probes") {
  std::vector<std::string> ids;
  for (int i = 0; i < 5; ++i)
    for (int k = 0; k < 6; ++k) ids.push_back("id" + std::to_string(i));
  CHECK(select_gallery(ids, 7).gallery == select_gallery(ids, 7).gallery);
  std::set<std::vector<std::size_t>> galleries;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto split = select_gallery(ids, seed);
    galleries.insert(split.gallery);
    std::set<std::size_t> g(split.gallery.begin(), split.gallery.end());
    for (auto p : split.probes) CHECK_FALSE(g.contains(p));
    CHECK(split.gallery.size() + split.probes.size() == ids.size());
  }
  CHECK(galleries.size() > 1);
}

TEST_CASE("gallery excludes single-sample identities") {
  const std::vector<std::string> ids{"a", "a", "solo", "b", "b"};
  const auto split = select_gallery(ids, 0);
  CHECK(split.excluded_identities == std::vector<std::string>{"solo"});
  CHECK(split.gallery.size() == 2);
  for (auto p : split.probes) CHECK(ids[p] != "solo");
}

TEST_CASE("classify examples") {
  FeatureLibrary lib;
  lib.entries = {{"a", {0.9f, std::sqrt(1 - 0.81f)}, ""}, {"b", {0.1f, std::sqrt(1 - 0.01f)}, ""}};
  const std::vector<float> probe{1.0f, 0.0f};
  auto m = classify(probe, lib);
  CHECK(m.identity == "a");
  CHECK(m.similarity == doctest::Approx(0.9).epsilon(1e-6));
  CHECK_FALSE(m.tie);

  auto same = classify(lib.entries[1].embedding, lib);
  CHECK(same.identity == "b");
  CHECK(same.similarity == doctest::Approx(1.0));

  CHECK_THROWS(classify(probe, FeatureLibrary{}));
}

TEST_CASE("classify breaks ties toward the lowest identity id") {
  FeatureLibrary lib;
  lib.entries = {{"a", {1, 0}, ""}, {"b", {1, 0}, ""}, {"c", {0, 1}, ""}};
  auto m = classify(std::vector<float>{2, 0}, lib);
  CHECK(m.identity == "a");
  CHECK(m.tie);
}

TEST_CASE("classify agrees with a linear scan and ignores probe scale") {
  Rng rng = make_rng(8);
  for (std::size_t size : {1, 2, 17, 250, 1000}) {
    FeatureLibrary lib;
    for (std::size_t i = 0; i < size; ++i) {
      std::vector<float> e(8);
      for (auto& v : e) v = static_cast<float>(standard_normal(rng));
      lib.entries.push_back({padded_id(i), e, ""});
    }
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<float> probe(8);
      for (auto& v : probe) v = static_cast<float>(standard_normal(rng));
      std::size_t best = 0;
      double best_sim = -2.0;
      for (std::size_t i = 0; i < size; ++i) {
        double dot = 0, nu = 0, nv = 0;
        for (std::size_t k = 0; k < 8; ++k) {
          dot += double(probe[k]) * lib.entries[i].embedding[k];
          nu += double(probe[k]) * probe[k];
          nv += double(lib.entries[i].embedding[k]) * lib.entries[i].embedding[k];
        }
        const double sim = dot / std::sqrt(nu * nv);
        if (sim > best_sim) {
          best_sim = sim;
          best = i;
        }
      }
      const auto m = classify(probe, lib);
      CHECK(m.identity == lib.entries[best].identity);
      CHECK(m.similarity == doctest::Approx(best_sim).epsilon(1e-12));
      for (float lambda : {0.01f, 3.0f, 250.0f}) {
        auto scaled = probe;
        for (auto& v : scaled) v *= lambda;
        CHECK(classify(scaled, lib).identity == m.identity);
      }
    }
  }
}

TEST_CASE("evaluate: TP = 3 of N = 4 gives 0.75") {
  // D's two samples are e4 and e1; whichever is enrolled, exactly one probe goes wrong.
  const std::vector<LabeledEmbedding> s{
      sample("A", unit(4, 0), "a0"), sample("A", unit(4, 0), "a1"), sample("B", unit(4, 1), "b0"),
      sample("B", unit(4, 1), "b1"), sample("C", unit(4, 2), "c0"), sample("C", unit(4, 2), "c1"),
      sample("D", unit(4, 3), "d0"), sample("D", unit(4, 0), "d1")};
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const auto r = evaluate(s, seed);
    CHECK(r.n == 4);
    CHECK(r.tp == 3);
    CHECK(r.accuracy == 0.75);
  }
}

TEST_CASE("evaluate: a perfect classifier scores 1 with contributions N_c / N") {
  Rng rng = make_rng(9);
  const auto corpus = perfect_corpus(6, 5, rng);
  const auto r = evaluate(corpus, 3);
  CHECK(r.n == 24);
  CHECK(r.tp == 24);
  CHECK(r.accuracy == 1.0);
  REQUIRE(r.light.available);
  REQUIRE(r.orientation.available);
  for (const auto* fam : {&r.light, &r.orientation}) {
    std::size_t n_total = 0;
    for (const auto& st : fam->stats) {
      CHECK(st.tp == st.n);
      CHECK(st.contribution == doctest::Approx(double(st.n) / r.n).epsilon(1e-15));
      n_total += st.n;
    }
    CHECK(n_total == r.n);
    CHECK(fam->sums_exactly(r.tp, r.n));
    CHECK(std::abs(contribution_sum(*fam) - r.accuracy) < 1e-12);
  }
  const auto csv = r.to_csv();
  CHECK(csv.starts_with("Dark,Normal,Exposure,Nonuniform,Left,Front,Right,Sum\n"));
  CHECK(csv.ends_with(",100.00\n"));
}

TEST_CASE("contributions sum to the overall accuracy on noisy data") {
  Rng rng = make_rng(10);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<LabeledEmbedding> corpus;
    const std::size_t ids = 3 + uniform_index(rng, 8);
    for (std::size_t i = 0; i < ids; ++i) {
      const std::size_t k = 2 + uniform_index(rng, 5);
      for (std::size_t j = 0; j < k; ++j) {
        auto e = unit(ids, i);
        for (auto& v : e) v += static_cast<float>(0.8 * standard_normal(rng));
        corpus.push_back(sample(padded_id(i), e, "p" + std::to_string(corpus.size()),
                                kLights[uniform_index(rng, 4)], kOrientations[uniform_index(rng, 3)]));
      }
    }
    const auto r = evaluate(corpus, trial);
    CHECK(r.light.sums_exactly(r.tp, r.n));
    CHECK(r.orientation.sums_exactly(r.tp, r.n));
    CHECK(std::abs(contribution_sum(r.light) - r.accuracy) < 1e-12);
    CHECK(std::abs(contribution_sum(r.orientation) - r.accuracy) < 1e-12);
  }
}

TEST_CASE("sums_exactly rejects a family whose counts do not partition the totals") {
  ConditionFamily fam;
  fam.available = true;
  fam.stats = {{"left", 1, 2}, {"front", 2, 2}};
  CHECK(fam.sums_exactly(3, 4));
  CHECK_FALSE(fam.sums_exactly(3, 5));
  CHECK_FALSE(fam.sums_exactly(2, 4));
}

TEST_CASE("orientation columns of the published table add up to its Sum column") {
  // 18.80 + 53.10 + 16.13 = 88.03 as contributions TP_c / N with N = 10000
  EvalReport r;
  r.n = 10000;
  r.tp = 8803;
  r.accuracy = 0.8803;
  r.orientation.available = true;
  r.orientation.stats = {{"left", 1880, 2500, 0.1880}, {"front", 5310, 5000, 0.5310}, {"right", 1613, 2500, 0.1613}};
  CHECK(r.orientation.sums_exactly(r.tp, r.n));
  CHECK(1880 + 5310 + 1613 == 8803);
  const auto csv = r.to_csv();
  CHECK(csv.find(",18.80,53.10,16.13,88.03\n") != std::string::npos);
}

TEST_CASE("missing condition tags mark the family unavailable") {
  std::vector<LabeledEmbedding> s{sample("a", unit(2, 0), "a0"), sample("a", unit(2, 0), "a1"),
                                  sample("b", unit(2, 1), "b0"), sample("b", unit(2, 1), "b1")};
  for (auto& e : s) e.light.reset();
  const auto r = evaluate(s, 0);
  CHECK(r.accuracy == 1.0);
  CHECK_FALSE(r.light.available);
  CHECK(r.orientation.available);
  CHECK(r.to_csv().find("\n,,,,") != std::string::npos);
  CHECK(r.to_json()["light"]["available"] == false);
}

TEST_CASE("evaluation is reproducible for a seed") {
  Rng rng = make_rng(11);
  std::vector<LabeledEmbedding> corpus;
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t k = 0; k < 4; ++k) {
      auto e = unit(6, i);
      for (auto& v : e) v += static_cast<float>(standard_normal(rng));
      corpus.push_back(sample(padded_id(i), e, "p" + std::to_string(corpus.size())));
    }
  CHECK(evaluate(corpus, 5).to_json() == evaluate(corpus, 5).to_json());
  CHECK(evaluate(corpus, 5).to_json()["seed"] == 5);
}

TEST_CASE("evaluate needs at least one usable identity") {
  std::vector<LabeledEmbedding> s{sample("a", unit(2, 0), "a0"), sample("b", unit(2, 1), "b0")};
  CHECK_THROWS_AS(evaluate(s, 0), DataError);
}
