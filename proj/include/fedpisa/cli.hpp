// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fedpisa/config.hpp"
#include "fedpisa/results.hpp"
#include "fedpisa/runner.hpp"
#include "fedpisa/world_io.hpp"

namespace fedpisa {
namespace cli {

// Exit codes: 0 success, 2 configuration problems, 3 output collisions,
// 1 anything else.
inline constexpr int kExitConfig = 2;
inline constexpr int kExitCollision = 3;
inline constexpr int kExitFailure = 1;

namespace detail {

inline std::string default_output_root() {
  const char* env = std::getenv("FEDPISA_OUT");
  return (env != nullptr && *env != '\0') ? env : "runs";
}

inline std::filesystem::path resolve_dir(const std::string& flag_out,
                                         const ExperimentConfig& config,
                                         const std::string& config_path,
                                         const std::string& suffix) {
  if (!flag_out.empty()) return flag_out;
  if (!config.output_dir.empty()) return config.output_dir;
  const std::string stem = std::filesystem::path(config_path).stem().string();
  return std::filesystem::path(default_output_root()) /
         (stem + suffix + "-s" + std::to_string(config.seed));
}

/// Refuses an existing directory unless forced; returns false on collision.
inline bool prepare_dir(const std::filesystem::path& dir, bool force) {
  if (std::filesystem::exists(dir) && !force) return false;
  std::filesystem::create_directories(dir);
  return true;
}

struct CommonArgs {
  std::string config_path;
  std::string out;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  bool force = false;
  int threads = 1;

  std::vector<std::string> overrides() const {
    std::vector<std::string> o = sets;
    if (seed.has_value()) o.push_back("seed=" + std::to_string(*seed));
    return o;
  }
};

inline void add_common(CLI::App* sub, CommonArgs& args) {
  sub->add_option("config", args.config_path, "experiment config (TOML)")
      ->required();
  sub->add_option("--out", args.out, "output directory");
  sub->add_option("--set", args.sets,
                  "override a config key, e.g. --set federation.tau=0.7");
  sub->add_option("--seed", args.seed, "override the master seed");
  sub->add_flag("--force", args.force, "overwrite an existing output directory");
  sub->add_option("--threads", args.threads, "worker threads for local phases")
      ->check(CLI::PositiveNumber);
}

inline int load_or_fail(const CommonArgs& args, ExperimentConfig& config) {
  try {
    config = load_config(args.config_path, args.overrides());
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return 0;
}

inline void print_run_line(std::ostream& out, const ResultsBundle& bundle) {
  out << strategy_label(bundle.config.federation.strategy) << " seed "
      << bundle.config.seed << ": " << bundle.config.federation.rounds
      << " rounds, final expressive mse "
      << fedpisa::detail::fmt_double(
             final_mean(bundle, &MetricsRecord::expressive_test_mse))
      << ", cost "
      << fedpisa::detail::fmt_double(
             bundle.config.cost.ledger_gib(bundle.ledger))
      << " GiB\n";
}

}  // namespace detail

inline int cmd_run(const detail::CommonArgs& args) {
  ExperimentConfig config;
  if (const int rc = detail::load_or_fail(args, config); rc != 0) return rc;
  const auto dir =
      detail::resolve_dir(args.out, config, args.config_path, "");
  if (!detail::prepare_dir(dir, args.force)) {
    std::cerr << "error: output directory " << dir
              << " exists (use --force to overwrite)\n";
    return kExitCollision;
  }
  try {
    RunOptions opts;
    opts.num_threads = args.threads;
    const ResultsBundle bundle = run_experiment(config, opts);
    write_bundle(dir, bundle);
    detail::print_run_line(std::cout, bundle);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return 0;
}

inline int cmd_sweep_tau(const detail::CommonArgs& args,
                         const std::vector<double>& taus) {
  ExperimentConfig config;
  if (const int rc = detail::load_or_fail(args, config); rc != 0) return rc;
  for (const double tau : taus) {
    if (!(tau > 0.0)) {
      std::cerr << "error: every tau must be positive\n";
      return kExitConfig;
    }
  }
  const auto root =
      detail::resolve_dir(args.out, config, args.config_path, "-sweep-tau");
  if (!detail::prepare_dir(root, args.force)) {
    std::cerr << "error: output directory " << root
              << " exists (use --force to overwrite)\n";
    return kExitCollision;
  }
  try {
    const World world = generate_world(config.world);
    save_world((root / "world.bin").string(), world);
    auto comparison = fedpisa::detail::open_out(root / "comparison.csv");
    comparison << "tau,final_mean_expressive_mse,mean_within_cluster_alpha_"
                  "mass\n";
    for (const double tau : taus) {
      ExperimentConfig sub = config;
      sub.federation.tau = tau;
      const auto dir = root / ("tau-" + fedpisa::detail::fmt_double(tau));
      std::filesystem::create_directories(dir);
      sub.output_dir = dir.string();
      RunOptions opts;
      opts.num_threads = args.threads;
      opts.world = &world;
      const ResultsBundle bundle = run_experiment(sub, opts);
      write_bundle(dir, bundle);
      comparison << fedpisa::detail::fmt_double(tau) << ','
                 << fedpisa::detail::fmt_double(final_mean(
                        bundle, &MetricsRecord::expressive_test_mse))
                 << ','
                 << fedpisa::detail::fmt_double(
                        mean_within_cluster_mass(bundle))
                 << "\n";
      detail::print_run_line(std::cout, bundle);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return 0;
}

inline int cmd_sweep_steps(const detail::CommonArgs& args,
                           const std::vector<int>& style_steps, int total) {
  ExperimentConfig config;
  if (const int rc = detail::load_or_fail(args, config); rc != 0) return rc;
  if (total < 1) {
    std::cerr << "error: --total must be >= 1\n";
    return kExitConfig;
  }
  for (const int m : style_steps) {
    if (m < 0 || m > total) {
      std::cerr << "error: every m must lie in [0, " << total << "]\n";
      return kExitConfig;
    }
  }
  const auto root =
      detail::resolve_dir(args.out, config, args.config_path, "-sweep-steps");
  if (!detail::prepare_dir(root, args.force)) {
    std::cerr << "error: output directory " << root
              << " exists (use --force to overwrite)\n";
    return kExitCollision;
  }
  try {
    const World world = generate_world(config.world);
    save_world((root / "world.bin").string(), world);
    auto comparison = fedpisa::detail::open_out(root / "comparison.csv");
    comparison << "style_steps,timbre_steps,final_mean_identity_error,"
                  "final_mean_expressive_mse\n";
    for (const int m : style_steps) {
      ExperimentConfig sub = config;
      sub.schedule.style_steps = m;
      sub.schedule.timbre_steps = total - m;
      // The allocation question only makes sense when the identity keeps
      // training, so the sweep pins that mode.
      sub.schedule.id_training = IdTraining::EveryRound;
      if (sub.schedule.schedule_scope == ScheduleScope::Global) {
        sub.schedule.global_total_steps = std::max<long>(
            1, static_cast<long>(sub.federation.rounds) * total);
      }
      const auto dir = root / ("m-" + std::to_string(m));
      std::filesystem::create_directories(dir);
      sub.output_dir = dir.string();
      RunOptions opts;
      opts.num_threads = args.threads;
      opts.world = &world;
      const ResultsBundle bundle = run_experiment(sub, opts);
      write_bundle(dir, bundle);
      comparison << m << ',' << (total - m) << ','
                 << fedpisa::detail::fmt_double(
                        final_mean(bundle, &MetricsRecord::identity_error))
                 << ','
                 << fedpisa::detail::fmt_double(final_mean(
                        bundle, &MetricsRecord::expressive_test_mse))
                 << "\n";
      detail::print_run_line(std::cout, bundle);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return 0;
}

inline int cmd_report(const std::string& dir_arg) {
  const std::filesystem::path dir = dir_arg;
  try {
    FlatToml toml = FlatToml::parse_file((dir / "config.toml").string());
    const ExperimentConfig config = config_from_toml(toml);
    std::ifstream in(dir / "rounds.jsonl");
    if (!in) throw IoError("cannot open " + (dir / "rounds.jsonl").string());
    std::string line;
    nlohmann::json last;
    std::string world_hash;
    int records = 0;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      last = nlohmann::json::parse(line);
      if (records == 0) world_hash = last.value("world_hash", "");
      records += 1;
    }
    if (records == 0) throw IoError("rounds.jsonl is empty");
    double neutral = 0.0, expressive = 0.0, id_err = 0.0, style_err = 0.0;
    const auto& metrics = last.at("metrics");
    for (const auto& row : metrics) {
      neutral += row.at("neutral_test_mse").get<double>();
      expressive += row.at("expressive_test_mse").get<double>();
      id_err += row.at("identity_error").get<double>();
      style_err += row.at("style_error").get<double>();
    }
    const auto n = static_cast<double>(metrics.size());
    std::cout << "strategy            " << strategy_label(config.federation.strategy)
              << "\n"
              << "world hash          " << world_hash << "\n"
              << "rounds completed    " << records - 1 << "\n"
              << "clients             " << metrics.size() << "\n"
              << "neutral test mse    "
              << fedpisa::detail::fmt_double(neutral / n) << "\n"
              << "expressive test mse "
              << fedpisa::detail::fmt_double(expressive / n) << "\n"
              << "identity error      "
              << fedpisa::detail::fmt_double(id_err / n) << "\n"
              << "style error         "
              << fedpisa::detail::fmt_double(style_err / n) << "\n"
              << "communication gib   "
              << fedpisa::detail::fmt_double(
                     last.value("cumulative_cost_gib", 0.0))
              << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return 0;
}

inline int cli_main(int argc, char** argv) {
  CLI::App app{"federated style-adapter personalization sandbox"};
  app.require_subcommand(1);

  detail::CommonArgs run_args;
  auto* run = app.add_subcommand("run", "run one experiment");
  detail::add_common(run, run_args);
  std::string run_strategy;
  run->add_option("--strategy", run_strategy,
                  "shorthand for --set federation.strategy=...");

  detail::CommonArgs tau_args;
  std::vector<double> taus;
  auto* sweep_tau =
      app.add_subcommand("sweep-tau", "rerun one world across temperatures");
  detail::add_common(sweep_tau, tau_args);
  sweep_tau->add_option("--tau", taus, "temperatures to sweep")
      ->required()
      ->delimiter(',');

  detail::CommonArgs steps_args;
  std::vector<int> style_steps;
  int total_steps = 100;
  auto* sweep_steps = app.add_subcommand(
      "sweep-steps", "rerun one world across step allocations");
  detail::add_common(sweep_steps, steps_args);
  sweep_steps->add_option("--m", style_steps, "style step counts to sweep")
      ->required()
      ->delimiter(',');
  sweep_steps->add_option("--total", total_steps,
                          "total local steps per round");

  std::string report_dir;
  auto* report = app.add_subcommand("report", "summarize a finished run");
  report->add_option("dir", report_dir, "run output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  if (run->parsed()) {
    if (!run_strategy.empty()) {
      run_args.sets.push_back("federation.strategy=" + run_strategy);
    }
    return cmd_run(run_args);
  }
  if (sweep_tau->parsed()) return cmd_sweep_tau(tau_args, taus);
  if (sweep_steps->parsed()) {
    return cmd_sweep_steps(steps_args, style_steps, total_steps);
  }
  if (report->parsed()) return cmd_report(report_dir);
  return kExitFailure;
}

}  // namespace cli
}  // namespace fedpisa
