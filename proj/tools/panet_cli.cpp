#include <iostream>

#include <CLI11.hpp>

#include "panet/commands.hpp"

using namespace panet;

namespace {

void add_config_flags(CLI::App* cmd, ConfigArgs& c) {
  cmd->add_flag("--desk", c.desk, "start from the desk-scale preset instead of the paper-scale one");
  cmd->add_option("--config", c.config_file, "JSON file of config overrides");
  cmd->add_option("--topology", c.topology, "parallel | serial");
  cmd->add_option("--pooling", c.pooling, "both | gap_only | gmp_only");
  cmd->add_option("--seed", c.seed, "run seed");
  cmd->add_option("--steps", c.steps, "stop after this many optimizer steps");
  cmd->add_option("--eval-every", c.eval_every, "evaluate every N steps (0 = only at the end)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PANet cattle-face recognition toolkit"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "render a synthetic identity corpus");
  gen_cmd->add_option("--ids", gen.ids, "number of identities")->capture_default_str();
  gen_cmd->add_option("--samples", gen.samples, "samples per identity")->capture_default_str();
  gen_cmd->add_option("--size", gen.size, "image side in pixels")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed)->capture_default_str();
  gen_cmd->add_option("--split-ratio", gen.split_ratio, "train fraction per identity")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "output directory")->capture_default_str();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "train a backbone with triplet loss");
  train_cmd->add_option("--data", train.data, "manifest.jsonl")->required();
  train_cmd->add_option("--out", train.out, "checkpoint path")->capture_default_str();
  train_cmd->add_option("--metrics", train.metrics, "metrics CSV (default <out>.metrics.csv)");
  train_cmd->add_flag("--quiet", train.quiet);
  add_config_flags(train_cmd, train.config);

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  eval_cmd->add_option("--data", eval.data, "manifest.jsonl")->required();
  eval_cmd->add_option("--ckpt", eval.ckpt, "checkpoint")->required();
  eval_cmd->add_option("--seed", eval.seed, "gallery selection seed")->capture_default_str();
  eval_cmd->add_option("--report", eval.report, "write the report JSON here (and a .csv beside it)");

  GradcheckArgs grad;
  std::string scope = "all";
  auto* grad_cmd = app.add_subcommand("gradcheck", "compare analytic and numeric gradients");
  grad_cmd->add_option("--scope", scope, "layer | block | model | all")->capture_default_str();
  grad_cmd->add_option("--eps", grad.eps)->capture_default_str();
  grad_cmd->add_option("--tolerance", grad.tolerance)->capture_default_str();
  grad_cmd->add_option("--seed", grad.seed)->capture_default_str();
  grad_cmd->add_option("--model-entries", grad.model_entries, "coordinates per tensor at model scope (0 = all)")
      ->capture_default_str();
  grad_cmd->add_flag("--inject-fault", grad.inject_fault, "add an op with a wrong derivative");

  CountArgs count;
  auto* count_cmd = app.add_subcommand("count", "parameter and MAC totals");
  count_cmd->add_flag("--ledger", count.ledger, "print every layer");
  add_config_flags(count_cmd, count.config);

  BenchArgs bench;
  auto* bench_cmd = app.add_subcommand("bench", "forward latency per block and end to end");
  bench_cmd->add_option("--iters", bench.iters)->capture_default_str();
  bench_cmd->add_option("--batch", bench.batch)->capture_default_str();
  bench_cmd->add_option("--csv", bench.csv, "write statistics as CSV");
  add_config_flags(bench_cmd, bench.config);

  ConfigArgs print;
  auto* print_cmd = app.add_subcommand("print-config", "show the effective merged config with sources");
  add_config_flags(print_cmd, print);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  return run_guarded(std::cerr, [&]() -> int {
    if (*gen_cmd) return cmd_gen_data(gen, std::cout);
    if (*train_cmd) return cmd_train(train, std::cout);
    if (*eval_cmd) return cmd_eval(eval, std::cout);
    if (*grad_cmd) {
      grad.scope = parse_gradcheck_scope(scope);
      return cmd_gradcheck(grad, std::cout);
    }
    if (*count_cmd) return cmd_count(count, std::cout);
    if (*bench_cmd) return cmd_bench(bench, std::cout);
    return cmd_print_config(print, std::cout);
  });
}
