#include "panet/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "panet/recognizer.hpp"

namespace panet {

int run_guarded(std::ostream& err, const std::function<int()>& fn) {
  try {
    return fn();
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const nlohmann::json::exception& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::invalid_argument& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
}

namespace {

std::uint64_t fnv1a(std::uint64_t h, std::string_view bytes) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::filesystem::path manifest_dir(const std::filesystem::path& manifest) {
  auto dir = manifest.parent_path();
  return dir.empty() ? std::filesystem::path(".") : dir;
}

}  // namespace

std::uint64_t corpus_checksum(const std::filesystem::path& manifest) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  h = fnv1a(h, read_file(manifest));
  for (const auto& r : read_manifest(manifest)) h = fnv1a(h, read_file(manifest_dir(manifest) / r.path));
  return h;
}

int cmd_gen_data(const GenDataArgs& args, std::ostream& out) {
  SynthConfig cfg;
  cfg.n_identities = args.ids;
  cfg.samples_per_identity = args.samples;
  cfg.image_size = args.size;
  cfg.seed = args.seed;
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto records = generate(cfg, args.out);
  const SplitResult parts = split(records, args.split_ratio, args.seed);
  std::map<std::string, std::string> split_of;
  for (const auto& r : parts.train) split_of[r.path] = "train";
  for (const auto& r : parts.test) split_of[r.path] = "test";
  std::vector<ManifestRecord> merged = records;
  for (auto& r : merged) r.split = split_of.at(r.path);

  const auto manifest = args.out / "manifest.jsonl";
  write_manifest(manifest, merged);

  std::map<std::string, std::size_t> lights, orientations;
  for (const auto& r : merged) {
    ++lights[to_string(*r.light)];
    ++orientations[to_string(*r.orientation)];
  }
  out << "manifest: " << manifest.string() << '\n'
      << "seed: " << args.seed << '\n'
      << "identities: " << args.ids << "  samples/identity: " << args.samples
      << "  image: " << args.size << "x" << args.size << '\n'
      << "train: " << parts.train.size() << "  test: " << parts.test.size() << '\n'
      << "light:";
  for (auto l : kLights) out << ' ' << to_string(l) << '=' << lights[to_string(l)];
  out << "\norientation:";
  for (auto o : kOrientations) out << ' ' << to_string(o) << '=' << orientations[to_string(o)];
  out << "\nchecksum: " << hex64(corpus_checksum(manifest)) << '\n';
  return kExitOk;
}

RunConfig resolve_config(const ConfigArgs& args) {
  RunConfig cfg(args.desk ? Preset::desk : Preset::paper);
  if (args.config_file) cfg.merge_file(*args.config_file);
  if (args.topology) {
    try {
      cfg.set("topology", to_string(parse_topology(*args.topology)));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  if (args.pooling) {
    try {
      cfg.set("pooling", to_string(parse_pooling_mode(*args.pooling)));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  if (args.seed) cfg.set("seed", *args.seed);
  if (args.steps) cfg.set("max_steps", *args.steps);
  if (args.eval_every) cfg.set("eval_every", *args.eval_every);
  return cfg;
}

namespace {

std::vector<LabeledEmbedding> embed_dataset(const Backbone<float>& model, const Dataset& data,
                                            const std::vector<ManifestRecord>& records) {
  std::vector<const Image*> images;
  for (const auto& s : data.samples) images.push_back(&s.image);
  auto emb = embed_images(model, images);
  std::vector<LabeledEmbedding> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    out.push_back({records[i].id, std::move(emb[i]), records[i].path, records[i].light,
                   records[i].orientation});
  }
  return out;
}

}  // namespace

int cmd_train(const TrainArgs& args, std::ostream& out) {
  const RunConfig run = resolve_config(args.config);
  const BackboneConfig model_cfg = run.backbone();
  const TrainConfig train_cfg = run.train();

  const auto records = read_manifest(args.data);
  const auto base = manifest_dir(args.data);
  const auto train_records = filter_split(records, "train");
  const auto test_records = filter_split(records, "test");
  if (train_records.empty()) throw DataError("manifest has no train records: " + args.data.string());

  const Dataset train_set = load_dataset(train_records, base, model_cfg.input_height, model_cfg.input_width);
  std::optional<Dataset> test_set;
  if (!test_records.empty()) {
    test_set = load_dataset(test_records, base, model_cfg.input_height, model_cfg.input_width);
  }

  Backbone<float> model(model_cfg, train_cfg.seed);
  const auto metrics_path = args.metrics ? *args.metrics : std::filesystem::path(args.out.string() + ".metrics.csv");
  MetricsLog log(metrics_path);

  EvalFn eval;
  if (test_set) {
    eval = [&](const Backbone<float>& m) {
      return evaluate(embed_dataset(m, *test_set, test_records), train_cfg.seed).accuracy;
    };
  }
  out << "seed: " << train_cfg.seed << "  topology: " << to_string(model_cfg.topology)
      << "  pooling: " << to_string(model_cfg.pooling) << '\n';
  auto result = train(model, train_set, train_cfg, eval, [&](const StepMetrics& m) {
    log.append(m);
    if (!args.quiet && (m.step % 25 == 0 || m.eval_accuracy)) {
      out << "step " << m.step << "  epoch " << m.epoch << "  lr " << m.lr << "  loss " << m.loss
          << "  active " << m.active_triplet_fraction;
      if (m.eval_accuracy) out << "  eval_acc " << *m.eval_accuracy;
      out << '\n';
    }
  });

  nlohmann::json meta{{"seed", train_cfg.seed},
                      {"steps", result.total_steps},
                      {"run_config", run.to_json()},
                      {"manifest", args.data.string()}};
  save_checkpoint(args.out, model, meta);
  out << "steps: " << result.total_steps << '\n';
  if (!result.history.empty() && result.history.back().eval_accuracy) {
    out << "final eval accuracy: " << *result.history.back().eval_accuracy << '\n';
  }
  out << "checkpoint: " << args.out.string() << "\nmetrics: " << metrics_path.string() << '\n';
  return kExitOk;
}

int cmd_eval(const EvalArgs& args, std::ostream& out) {
  auto loaded = load_checkpoint(args.ckpt);
  const auto records = read_manifest(args.data);
  auto test_records = filter_split(records, "test");
  if (test_records.empty()) throw DataError("manifest has no test records: " + args.data.string());
  const EvalReport report = evaluate(loaded.model, test_records, manifest_dir(args.data), args.seed);

  const auto j = report.to_json();
  out << j.dump(2) << '\n' << report.to_csv();
  if (args.report) {
    std::ofstream js(*args.report, std::ios::trunc);
    if (!js) throw DataError("cannot write report: " + args.report->string());
    js << j.dump(2) << '\n';
    auto csv_path = *args.report;
    csv_path.replace_extension(".csv");
    if (csv_path == *args.report) csv_path += ".csv";
    std::ofstream cs(csv_path, std::ios::trunc);
    if (!cs) throw DataError("cannot write report: " + csv_path.string());
    cs << report.to_csv();
  }
  return kExitOk;
}

GradcheckScope parse_gradcheck_scope(const std::string& text) {
  if (text == "layer") return GradcheckScope::layer;
  if (text == "block") return GradcheckScope::block;
  if (text == "model") return GradcheckScope::model;
  if (text == "all") return GradcheckScope::all;
  throw UsageError("unknown gradcheck scope '" + text + "' (expected layer, block, model or all)");
}

BackboneConfig gradcheck_model_config() {
  BackboneConfig c = BackboneConfig::desk();
  c.input_height = 32;
  c.input_width = 32;
  c.stage_depths = {1, 1, 1, 1};
  return c;
}

namespace {

using T64 = Tensor<double>;

T64 random_tensor(Shape shape, Rng& rng, double stddev, double mean = 0.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = mean + stddev * standard_normal(rng);
  return T64(std::move(shape), std::move(v), true);
}

// Overwrites every value so that no gradient is trivially zero: weights
// ~ N(0, 1/fan_in), gains ~ 1 + N(0, 0.2), biases ~ N(0, 0.1), everything
// else ~ N(0, 0.5).
void randomize(const std::string& name, T64& t, Rng& rng) {
  auto values = t.mutable_data();
  const bool is_weight = name.ends_with("weight");
  const bool is_gain = name.ends_with("gain");
  double stddev = 0.5, mean = 0.0;
  if (is_weight) stddev = 1.0 / std::sqrt(static_cast<double>(t.numel() / t.dim(0)));
  if (is_gain) {
    stddev = 0.2;
    mean = 1.0;
  }
  if (name.ends_with("bias")) stddev = 0.1;
  for (auto& v : values) v = mean + stddev * standard_normal(rng);
}

GradcheckCase check(const std::string& scope, const std::string& name, const std::function<T64()>& f,
                    std::vector<NamedTensor64> params, const GradcheckArgs& args,
                    std::size_t max_entries = 0, std::function<long double()> reference = {}) {
  GradcheckOptions opt;
  opt.eps = args.eps;
  opt.max_entries_per_param = max_entries;
  opt.reference = std::move(reference);
  return {scope, name, gradcheck(f, params, opt)};
}

// sum(y * r) with a fixed random r gives every output element its own weight.
T64 weighted_sum(const T64& y, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0x77);
  std::vector<double> r(y.numel());
  for (auto& v : r) v = standard_normal(rng);
  return sum(ew_mul(y, T64(y.shape(), std::move(r))));
}

BlockParams<double> random_block(std::size_t channels, Rng& rng) {
  auto p = make_block_params<double>(channels, 2.0, rng);
  for_each_param<double>(p, [&](const std::string& name, T64& t) { randomize(name, t, rng); });
  return p;
}

std::vector<NamedTensor64> block_named(BlockParams<double>& p, const T64& x) {
  std::vector<NamedTensor64> out{{"x", x}};
  for_each_param<double>(p, [&](const std::string& name, T64& t) { out.push_back({name, t}); });
  return out;
}

void layer_cases(const GradcheckArgs& args, std::vector<GradcheckCase>& out) {
  Rng rng = make_rng(args.seed, 1);
  const Shape map{2, 4, 8, 8};
  {
    auto x = random_tensor(map, rng, 1.0);
    auto ln = make_layer_norm<double>(4);
    randomize("gain", ln.gain, rng);
    randomize("bias", ln.bias, rng);
    out.push_back(check("layer", "layer_norm", [=] { return weighted_sum(layer_norm(x, ln), 1); },
                        {{"x", x}, {"gain", ln.gain}, {"bias", *&ln.bias}}, args));
  }
  {
    auto x = random_tensor(map, rng, 1.0);
    auto p = make_depthwise3x3<double>(4, rng);
    randomize("weight", p.weight, rng);
    randomize("bias", *p.bias, rng);
    out.push_back(check("layer", "conv_dw3x3", [=] { return weighted_sum(conv_dw3x3(x, p), 2); },
                        {{"x", x}, {"weight", p.weight}, {"bias", *p.bias}}, args));
  }
  {
    auto x = random_tensor(map, rng, 1.0);
    auto p = make_pointwise<double>(4, 6, rng);
    randomize("weight", p.weight, rng);
    randomize("bias", *p.bias, rng);
    out.push_back(check("layer", "conv_pw", [=] { return weighted_sum(conv_pw(x, p), 3); },
                        {{"x", x}, {"weight", p.weight}, {"bias", *p.bias}}, args));
  }
  {
    auto x = random_tensor(map, rng, 1.0);
    auto p = make_conv<double>(4, 8, 2, 2, 0, 1, rng);
    randomize("weight", p.weight, rng);
    randomize("bias", *p.bias, rng);
    out.push_back(check("layer", "downsample_2x2", [=] { return weighted_sum(conv2d(x, p), 4); },
                        {{"x", x}, {"weight", p.weight}, {"bias", *p.bias}}, args));
  }
  {
    auto x = random_tensor({2, 3, 8, 8}, rng, 1.0);
    auto p = make_conv<double>(3, 4, 4, 4, 0, 1, rng);
    randomize("weight", p.weight, rng);
    randomize("bias", *p.bias, rng);
    out.push_back(check("layer", "patch_embed_4x4", [=] { return weighted_sum(conv2d(x, p), 5); },
                        {{"x", x}, {"weight", p.weight}, {"bias", *p.bias}}, args));
  }
  {
    auto x = random_tensor(map, rng, 1.0);
    out.push_back(check("layer", "gap", [=] { return weighted_sum(gap(x), 6); }, {{"x", x}}, args));
  }
  {
    auto x = random_tensor(map, rng, 1.0);
    out.push_back(check("layer", "gmp", [=] { return weighted_sum(gmp(x), 7); }, {{"x", x}}, args));
  }
  {
    auto x = random_tensor(map, rng, 1.0);
    out.push_back(check("layer", "split_concat",
                        [=] {
                          auto [a, b] = split_channels(x);
                          return weighted_sum(concat_channels(b, a), 8);
                        },
                        {{"x", x}}, args));
  }
  {
    auto x = random_tensor({2, 16}, rng, 1.0);
    auto w = random_tensor({8, 16}, rng, 0.25);
    auto b = random_tensor({8}, rng, 0.1);
    out.push_back(check("layer", "linear", [=] { return weighted_sum(linear(x, w, b), 9); },
                        {{"x", x}, {"weight", w}, {"bias", b}}, args));
  }
  {
    auto x = random_tensor({3, 8}, rng, 1.0);
    out.push_back(check("layer", "l2_normalize", [=] { return weighted_sum(l2_normalize(x), 10); },
                        {{"x", x}}, args));
  }
  {
    auto x = random_tensor(map, rng, 1.0);
    auto s = random_tensor({4, 1, 1}, rng, 1.0);
    auto t = random_tensor({2, 4, 1, 1}, rng, 1.0);
    out.push_back(check("layer", "broadcast_mul_add",
                        [=] { return weighted_sum(ew_sub(ew_add(ew_mul(x, s), t), s), 11); },
                        {{"x", x}, {"channel_scale", s}, {"sample_shift", t}}, args));
  }
  {
    auto e = random_tensor({6, 8}, rng, 1.0);
    const std::vector<std::size_t> labels{0, 0, 1, 1, 2, 2};
    TripletBatch mined;
    {
      NoGradGuard ng;
      auto d = pairwise_sq_dist(l2_normalize(e));
      std::vector<double> dv(d.data().begin(), d.data().end());
      mined = semi_hard_mine(dv, labels, 1.0);
    }
    out.push_back(check("layer", "triplet_loss",
                        [=] { return triplet_loss(pairwise_sq_dist(l2_normalize(e)), mined); },
                        {{"embeddings", e}}, args));
  }
}

void block_cases(const GradcheckArgs& args, std::vector<GradcheckCase>& out) {
  Rng rng = make_rng(args.seed, 2);
  const Shape map{2, 4, 8, 8};
  {
    auto x = random_tensor(map, rng, 1.0);
    out.push_back(check("block", "psa", [=] { return weighted_sum(psa(x), 20); }, {{"x", x}}, args));
  }
  for (auto mode : {PoolingMode::both, PoolingMode::gap_only, PoolingMode::gmp_only}) {
    auto x = random_tensor(map, rng, 1.0);
    out.push_back(check("block", "pca_" + to_string(mode), [=] { return weighted_sum(pca(x, mode), 21); },
                        {{"x", x}}, args));
  }
  {
    auto x = random_tensor(map, rng, 1.0);
    auto p = random_block(4, rng);
    out.push_back(check("block", "pam", [=] { return weighted_sum(pam(x, p), 22); },
                        block_named(p, x), args));
  }
  {
    auto x = random_tensor(map, rng, 1.0);
    auto p = random_block(4, rng);
    out.push_back(check("block", "fmm", [=] { return weighted_sum(fmm(x, p), 23); },
                        block_named(p, x), args));
  }
  {
    auto x = random_tensor(map, rng, 1.0);
    auto p = random_block(4, rng);
    out.push_back(check("block", "parallel_block", [=] { return weighted_sum(parallel_block(x, p), 24); },
                        block_named(p, x), args));
  }
  {
    auto x = random_tensor(map, rng, 1.0);
    auto p = random_block(4, rng);
    out.push_back(check("block", "serial_block", [=] { return weighted_sum(serial_block(x, p), 25); },
                        block_named(p, x), args));
  }
}

void model_case(const GradcheckArgs& args, std::vector<GradcheckCase>& out) {
  const BackboneConfig cfg = gradcheck_model_config();
  const double margin = 1.0;
  const std::vector<std::size_t> labels{0, 0, 1, 1};
  for (std::uint64_t attempt = 0;; ++attempt) {
    Rng rng = make_rng(args.seed, 100 + attempt);
    Backbone<double> model(cfg, args.seed + attempt);
    for (auto& p : model.params()) randomize(p.name, p.tensor, rng);
    std::vector<double> pixels(4 * cfg.in_channels * cfg.input_height * cfg.input_width);
    for (auto& v : pixels) v = uniform01(rng);
    const T64 images({4, cfg.in_channels, cfg.input_height, cfg.input_width}, std::move(pixels));

    TripletBatch mined;
    bool near_kink = false;
    {
      NoGradGuard ng;
      auto d = pairwise_sq_dist(model.forward(images));
      std::vector<double> dv(d.data().begin(), d.data().end());
      mined = semi_hard_mine(dv, labels, margin);
      for (const auto& t : mined.triplets) near_kink = near_kink || std::abs(t.d1 - t.d2 + margin) < 1e-3;
    }
    // A hinge this close to zero would be crossed by the finite difference.
    if (near_kink && attempt < 10) continue;

    std::vector<NamedTensor64> params;
    for (auto& p : model.params()) params.push_back({p.name, p.tensor});
    // The finite differences are taken on a long double copy refreshed from
    // the (perturbed) double parameters before every evaluation.
    auto wide = std::make_shared<Backbone<long double>>(model.cast<long double>());
    const auto wide_images = cast_tensor<long double>(images, false);
    auto reference = [&model, wide, wide_images, mined]() -> long double {
      for (std::size_t i = 0; i < model.params().size(); ++i) {
        auto src = model.params()[i].tensor.data();
        auto dst = wide->params()[i].tensor.mutable_data();
        std::copy(src.begin(), src.end(), dst.begin());
      }
      return triplet_loss(pairwise_sq_dist(wide->forward(wide_images)), mined).item();
    };
    out.push_back(check("model", "triplet_loss(backbone)",
                        [&model, images, mined] {
                          return triplet_loss(pairwise_sq_dist(model.forward(images)), mined);
                        },
                        params, args, args.model_entries, reference));
    return;
  }
}

void fault_case(const GradcheckArgs& args, std::vector<GradcheckCase>& out) {
  Rng rng = make_rng(args.seed, 3);
  auto x = random_tensor({2, 4}, rng, 1.0);
  // Forward x^2 with a deliberately wrong derivative 3x.
  auto faulty = [](const T64& in) {
    std::vector<double> y(in.data().begin(), in.data().end());
    for (auto& v : y) v *= v;
    auto node = in.node();
    return T64::from_op(in.shape(), std::move(y), {in},
                        [node](std::span<const double> g, std::vector<std::vector<double>>& gin) {
                          for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += 3.0 * node->data[i] * g[i];
                        });
  };
  out.push_back(check("fault", "injected_wrong_derivative", [=] { return sum(faulty(x)); }, {{"x", x}}, args));
}

}  // namespace

std::vector<GradcheckCase> run_gradcheck_suite(const GradcheckArgs& args) {
  std::vector<GradcheckCase> out;
  const bool all = args.scope == GradcheckScope::all;
  if (all || args.scope == GradcheckScope::layer) layer_cases(args, out);
  if (all || args.scope == GradcheckScope::block) block_cases(args, out);
  if (all || args.scope == GradcheckScope::model) model_case(args, out);
  if (args.inject_fault) fault_case(args, out);
  return out;
}

int cmd_gradcheck(const GradcheckArgs& args, std::ostream& out) {
  const auto start = std::chrono::steady_clock::now();
  const auto cases = run_gradcheck_suite(args);
  bool ok = true;
  double worst = 0.0;
  out << std::left << std::setw(7) << "scope" << std::setw(26) << "case" << std::setw(44) << "parameter"
      << std::setw(9) << "checked" << std::setw(14) << "max_rel_err" << "result\n";
  for (const auto& c : cases) {
    for (const auto& e : c.report.entries) {
      const bool pass = !e.non_finite && e.max_rel_error < args.tolerance;
      ok = ok && pass;
      worst = std::max(worst, e.non_finite ? INFINITY : e.max_rel_error);
      char err[32];
      std::snprintf(err, sizeof(err), "%.3e", e.max_rel_error);
      out << std::left << std::setw(7) << c.scope << std::setw(26) << c.name << std::setw(44) << e.name
          << std::setw(9) << e.checked << std::setw(14) << (e.non_finite ? std::string("non-finite") : err)
          << (pass ? "PASS" : "FAIL");
      if (!pass) {
        std::snprintf(err, sizeof(err), "%.6e", e.analytic);
        out << "  at [" << e.worst_index << "] analytic " << err;
        std::snprintf(err, sizeof(err), "%.6e", e.numeric);
        out << " numeric " << err;
      }
      out << '\n';
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  char buf[96];
  std::snprintf(buf, sizeof(buf), "worst relative error %.3e (tolerance %.0e), %.1f s\n", worst,
                args.tolerance, secs);
  out << buf << (ok ? "gradcheck PASSED\n" : "gradcheck FAILED\n");
  return ok ? kExitOk : kExitNumeric;
}

int cmd_count(const CountArgs& args, std::ostream& out) {
  const BackboneConfig cfg = resolve_config(args.config).backbone();
  const auto rows = count_ledger(cfg);
  if (args.ledger) {
    out << std::left << std::setw(28) << "layer" << std::setw(14) << "params" << "macs\n";
    for (const auto& r : rows) out << std::left << std::setw(28) << r.layer << std::setw(14) << r.params << r.macs << '\n';
  }
  const auto params = count_params(cfg);
  const auto macs = count_macs(cfg);
  char buf[128];
  out << "config: " << cfg.to_json().dump() << '\n';
  std::snprintf(buf, sizeof(buf), "%-10s %-10s\n%-10.2f %-10.2f\n", "#M (G)", "#P (M)",
                static_cast<double>(macs) / 1e9, static_cast<double>(params) / 1e6);
  out << buf << "params: " << params << "\nmacs: " << macs << '\n';
  return kExitOk;
}

namespace {

struct LatencyStats {
  double mean = 0, p50 = 0, p95 = 0;
};

LatencyStats summarize(std::vector<double> ms) {
  LatencyStats s;
  if (ms.empty()) return s;
  for (double v : ms) s.mean += v;
  s.mean /= static_cast<double>(ms.size());
  std::sort(ms.begin(), ms.end());
  auto q = [&](double f) {
    const auto idx = static_cast<std::size_t>(std::ceil(f * static_cast<double>(ms.size()))) - 1;
    return ms[std::min(idx, ms.size() - 1)];
  };
  s.p50 = q(0.5);
  s.p95 = q(0.95);
  return s;
}

}  // namespace

int cmd_bench(const BenchArgs& args, std::ostream& out) {
  if (args.iters == 0 || args.batch == 0) throw UsageError("--iters and --batch must be positive");
  const RunConfig run = resolve_config(args.config);
  const BackboneConfig cfg = run.backbone();
  const Backbone<float> model(cfg, run.get("seed").get<std::uint64_t>());
  Rng rng = make_rng(run.get("seed").get<std::uint64_t>(), 0xbe);
  std::vector<float> pixels(args.batch * cfg.in_channels * cfg.input_height * cfg.input_width);
  for (auto& v : pixels) v = static_cast<float>(uniform01(rng));
  const Tensor<float> images({args.batch, cfg.in_channels, cfg.input_height, cfg.input_width}, pixels);

  NoGradGuard no_grad;
  using clock = std::chrono::steady_clock;
  auto ms_since = [](clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(clock::now() - t0).count();
  };
  std::map<std::string, std::vector<double>> timings;
  std::vector<std::string> order;
  auto record = [&](const std::string& name, double ms) {
    if (!timings.contains(name)) order.push_back(name);
    timings[name].push_back(ms);
  };
  for (std::size_t it = 0; it < args.iters; ++it) {
    auto t0 = clock::now();
    model.forward(images);
    record("end_to_end", ms_since(t0));

    auto h = conv2d(images, model.stem());
    for (std::size_t s = 0; s < model.stages().size(); ++s) {
      const auto& stage = model.stages()[s];
      if (stage.downsample) h = conv2d(h, *stage.downsample);
      for (std::size_t b = 0; b < stage.blocks.size(); ++b) {
        t0 = clock::now();
        h = block_forward(h, stage.blocks[b], cfg.topology, cfg.pooling);
        record("stages." + std::to_string(s) + ".blocks." + std::to_string(b), ms_since(t0));
      }
    }
  }
  out << "topology: " << to_string(cfg.topology) << "  pooling: " << to_string(cfg.pooling)
      << "  batch: " << args.batch << "  iters: " << args.iters << '\n';
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-22s %10s %10s %10s\n", "component", "mean_ms", "p50_ms", "p95_ms");
  out << buf;
  std::ofstream csv;
  if (args.csv) {
    csv.open(*args.csv, std::ios::trunc);
    if (!csv) throw DataError("cannot write " + args.csv->string());
    csv << "component,mean_ms,p50_ms,p95_ms,iters,batch,topology,pooling\n";
  }
  for (const auto& name : order) {
    const auto s = summarize(timings[name]);
    std::snprintf(buf, sizeof(buf), "%-22s %10.3f %10.3f %10.3f\n", name.c_str(), s.mean, s.p50, s.p95);
    out << buf;
    if (csv.is_open()) {
      std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f,%zu,%zu,", name.c_str(), s.mean, s.p50, s.p95,
                    args.iters, args.batch);
      csv << buf << to_string(cfg.topology) << ',' << to_string(cfg.pooling) << '\n';
    }
  }
  return kExitOk;
}

int cmd_print_config(const ConfigArgs& args, std::ostream& out) {
  out << resolve_config(args).to_json(true).dump(2) << '\n';
  return kExitOk;
}

}  // namespace panet
