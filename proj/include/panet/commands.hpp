#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "panet/gradcheck.hpp"
#include "panet/run_config.hpp"

namespace panet {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumeric = 3 };

/// Runs `fn`, mapping UsageError / DataError / NumericError (and their
/// standard-library relatives) to exit codes with a message on `err`.
int run_guarded(std::ostream& err, const std::function<int()>& fn);

struct GenDataArgs {
  std::size_t ids = 8;
  std::size_t samples = 10;
  std::size_t size = 64;
  std::uint64_t seed = 0;
  double split_ratio = 0.8;
  std::filesystem::path out = "data";
};
/// Writes images plus out/manifest.jsonl and prints a corpus summary with a
/// content checksum.
int cmd_gen_data(const GenDataArgs& args, std::ostream& out);

/// FNV-1a 64 over the manifest and every image it lists, in manifest order.
std::uint64_t corpus_checksum(const std::filesystem::path& manifest);

struct ConfigArgs {
  bool desk = false;
  std::optional<std::filesystem::path> config_file;
  std::optional<std::string> topology;
  std::optional<std::string> pooling;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::optional<std::size_t> eval_every;
};
/// defaults (desk or paper preset) <- config file <- flags
RunConfig resolve_config(const ConfigArgs& args);

struct TrainArgs {
  std::filesystem::path data;
  std::filesystem::path out = "model.ckpt";
  std::optional<std::filesystem::path> metrics;  // default: <out>.metrics.csv
  ConfigArgs config;
  bool quiet = false;
};
int cmd_train(const TrainArgs& args, std::ostream& out);

struct EvalArgs {
  std::filesystem::path data;
  std::filesystem::path ckpt;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> report;
};
int cmd_eval(const EvalArgs& args, std::ostream& out);

enum class GradcheckScope { layer, block, model, all };
GradcheckScope parse_gradcheck_scope(const std::string& text);

struct GradcheckArgs {
  GradcheckScope scope = GradcheckScope::all;
  double eps = 1e-5;
  double tolerance = 1e-4;
  std::uint64_t seed = 0;
  /// Coordinates per parameter tensor at model scope (0 = all).
  std::size_t model_entries = 16;
  /// Adds an operation with a deliberately wrong derivative.
  bool inject_fault = false;
};

struct GradcheckCase {
  std::string scope;
  std::string name;
  GradcheckReport report;
};

/// The layer / block / model checks behind cmd_gradcheck.
std::vector<GradcheckCase> run_gradcheck_suite(const GradcheckArgs& args);

/// Desk model used at model scope: 32x32 input (8x8 after the stem), C0 = 16,
/// one block per stage.
BackboneConfig gradcheck_model_config();

int cmd_gradcheck(const GradcheckArgs& args, std::ostream& out);

struct CountArgs {
  ConfigArgs config;
  bool ledger = false;  // print every layer row
};
int cmd_count(const CountArgs& args, std::ostream& out);

struct BenchArgs {
  ConfigArgs config;
  std::size_t iters = 20;
  std::size_t batch = 1;
  std::optional<std::filesystem::path> csv;
};
int cmd_bench(const BenchArgs& args, std::ostream& out);

int cmd_print_config(const ConfigArgs& args, std::ostream& out);

}  // namespace panet
