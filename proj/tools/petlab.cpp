#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "petlab/config.hpp"
#include "petlab/errors.hpp"
#include "petlab/gradsuite.hpp"
#include "petlab/harness.hpp"
#include "petlab/report.hpp"
#include "petlab/runtime.hpp"

namespace fs = std::filesystem;
using namespace petlab;

namespace {

struct Args {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> jobs;
};

int run(const std::string& command, const Args& args) {
  ExperimentConfig cfg = load_config(args.config);
  if (args.seed) cfg.seed = *args.seed;
  if (args.jobs) {
    if (*args.jobs < 1) throw ConfigError("--jobs must be >= 1");
    cfg.jobs = *args.jobs;
  }
  const fs::path out = args.out;
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());

  if (command == "gradcheck") {
    GradCheckOptions opt;
    opt.tolerance = cfg.gradcheck.tolerance;
    opt.seed = cfg.seed;
    const auto cases = run_gradcheck_suite(cfg.seed, cfg.gradcheck.rounds, opt);
    emit_gradcheck_report(out, cases, cfg.gradcheck.tolerance);
    std::size_t failed = 0;
    double worst = 0.0;
    for (const auto& c : cases) {
      if (!c.report.passed) {
        ++failed;
        std::cerr << "FAIL " << c.name << " max rel err " << c.report.max_rel_err << "\n";
      }
      worst = std::max(worst, c.report.max_rel_err);
    }
    std::cout << cases.size() << " cases, " << failed << " failed, max rel err " << worst << "\n";
    return failed == 0 ? 0 : 2;
  }

  // Validate the section before paying for the backbone.
  if (command == "train" && !cfg.single) throw ConfigError("train needs a 'method' in the config");
  if (command == "sweep" && !cfg.sweep) throw ConfigError("config has no 'sweep' section");
  if (command == "ablate" && !cfg.ablate) throw ConfigError("config has no 'ablate' section");
  if (command == "transfer" && !cfg.transfer) throw ConfigError("config has no 'transfer' section");

  const Backbone backbone = make_backbone(cfg.backbone);
  Context ctx;
  ctx.backbone = &backbone;
  ctx.train = cfg.train;
  ctx.criterion = cfg.convergence;
  ctx.presets = cfg.presets;
  ctx.seed = cfg.seed;
  ctx.jobs = cfg.jobs;
  ctx.on_runs = [&](const std::vector<RunRecord>& runs) { write_runs_jsonl(out / "runs.jsonl", runs); };

  if (command == "train") {
    const auto r = run_train(ctx, *cfg.single);
    emit_train_report(out, r);
    for (const auto& run : r.runs) std::cout << run.key << " accuracy " << run.report.final_metric << "\n";
  } else if (command == "sweep") {
    const auto r = run_budget_sweep(ctx, *cfg.sweep);
    emit_sweep_report(out, r);
    for (const auto& t : r.thresholds) {
      std::cout << t.method << " low " << (t.low_threshold ? std::to_string(*t.low_threshold) : "none") << " high "
                << (t.high_threshold ? std::to_string(*t.high_threshold) : "none") << "\n";
    }
  } else if (command == "ablate") {
    const auto r = run_structure_ablation(ctx, *cfg.ablate);
    emit_ablation_report(out, r);
    for (const auto& row : r.rows) {
      std::cout << row.method << " accuracy " << row.mean << " +- " << row.std << " steps " << row.steps_mean
                << "\n";
    }
  } else {
    const auto r = run_transfer(ctx, *cfg.transfer);
    emit_transfer_report(out, r);
    std::cout << "same-family " << r.matrix.same_family_mean << " cross-family " << r.matrix.cross_family_mean
              << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  runtime_init();
  CLI::App app{"petlab: parameter-efficient tuning experiments"};
  app.require_subcommand(1);
  Args args;
  for (const char* name : {"train", "sweep", "ablate", "transfer", "gradcheck"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", args.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", args.out, "output directory")->required();
    sub->add_option("--seed", args.seed, "global seed (overrides the config)");
    sub->add_option("--jobs", args.jobs, "parallel runs (overrides the config)");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    return run(command, args);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const BudgetError& e) {
    std::cerr << "budget error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
