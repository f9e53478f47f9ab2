#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "deqflow/harness/config.hpp"
#include "deqflow/harness/experiments.hpp"
#include "deqflow/harness/train.hpp"

namespace fs = std::filesystem;
using namespace deqflow;
using namespace deqflow::harness;

namespace {

int run(const std::string& command, ExperimentConfig cfg, const fs::path& out) {
  fs::create_directories(out);
  std::ostream* log = &std::cerr;
  if (command == "train") {
    const TrainResult r = train(cfg, out, log);
    if (!r.evals.empty())
      std::cout << "final aepe " << format_number(r.evals.back().aepe) << " (initial "
                << format_number(r.evals.front().aepe) << ")\n";
    return 0;
  }
  if (command == "ablate-correction") {
    write_config(out, cfg);
    for (const ArmSummary& s : ablate_correction(cfg, out, log))
      std::cout << s.name << " final_abs_residual " << format_number(s.final_abs_residual) << " final_aepe "
                << format_number(s.final_aepe) << '\n';
    return 0;
  }
  if (command == "bench-solvers") {
    write_config(out, cfg);
    for (const BenchSummary& s : bench_solvers(cfg, out))
      std::cout << to_string(s.method) << " radius " << format_number(s.radius) << " median_iters "
                << format_number(s.median_iters) << '\n';
    return 0;
  }
  const toyflow::ModelParams p = resolve_model(cfg);
  write_config(out, cfg);
  if (command == "eval") {
    CsvWriter csv(out / "eval_log.csv", kEvalHeader);
    const EvalRecord e = evaluate(p, eval_set(cfg), cfg.solver, 0);
    eval_row(csv, e);
    std::cout << "aepe " << format_number(e.aepe) << " f1_all " << format_number(e.f1_all) << " mean_residual "
              << format_number(e.mean_residual) << '\n';
    return 0;
  }
  if (command == "sequence-reuse") {
    const ReuseSummary r = sequence_reuse(p, cfg, out, log);
    std::cout << "median cold " << format_number(r.median_cold) << " median warm " << format_number(r.median_warm)
              << '\n';
    return 0;
  }
  if (command == "correlation-study") {
    const StudySummary r = correlation_study(p, cfg, out);
    std::cout << "pearson_r " << (r.pearson_r ? format_number(*r.pearson_r) : std::string(kUndefined)) << '\n';
    return 0;
  }
  throw ConfigError("unknown command '" + command + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deep-equilibrium optical flow: training, evaluation and experiments"};
  app.require_subcommand(1);
  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"train", "Train a model and log losses, residuals and evaluations"},
      {"eval", "Evaluate run.checkpoint on the held-out set"},
      {"ablate-correction", "Train one arm per correction setting under a shared budget"},
      {"sequence-reuse", "Compare cold and warm-started solves along smooth sequences"},
      {"correlation-study", "Correlate fixed-point residual with end-point error"},
      {"bench-solvers", "Iterations to tolerance for each solver on random contractions"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON config file (defaults when omitted)");
    sub->add_option("--out", out_dir, "Output directory")->required();
    sub->add_option("--seed", seed, "Override the experiment seed");
    sub->add_option("--override", overrides, "key=value with a dotted key, repeatable");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (seed) overrides.push_back("seed=" + std::to_string(*seed));
    return run(command, load_config(config_path, overrides), out_dir);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const NumericalAbort& e) {
    std::cerr << "numerical abort: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
