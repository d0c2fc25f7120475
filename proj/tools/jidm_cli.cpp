// jidm: data generation, training, evaluation, rollouts, sweeps and plots.
// Every failure exits nonzero after printing one line "error: <message>".
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "jidm/expcli.hpp"

namespace fs = std::filesystem;
using namespace jidm;
using namespace jidm::exp;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> jobs;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "run configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "global seed (overrides run.seed)");
  cmd->add_option("--out", c.out, "output directory (overrides run.out)");
  cmd->add_option("--jobs", c.jobs, "parallel workers (overrides run.jobs)")->check(CLI::PositiveNumber);
}

TextConfig resolve(const Common& c) {
  TextConfig cfg = c.config.empty() ? default_run_config() : load_run_config(c.config);
  if (c.seed) cfg.set("run", "seed", *c.seed);
  if (!c.out.empty()) cfg.set("run", "out", c.out);
  if (c.jobs) cfg.set("run", "jobs", *c.jobs);
  return cfg;
}

fs::path out_dir(const TextConfig& cfg) {
  fs::path p = cfg.get_string("run", "out");
  fs::create_directories(p);
  return p;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

void report_sweep(const SweepResult& res, const fs::path& dir, const std::string& name, const PlotSpec& spec) {
  res.table.save((dir / "metrics.csv").string());
  for (const auto& e : res.errors) std::cout << "cell-error: " << e.cell << ": " << e.message << "\n";
  try {
    write_text(dir / (name + ".svg"), plot_svg(res.table, spec));
  } catch (const std::invalid_argument& e) {
    std::cout << "plot skipped: " << e.what() << "\n";
  }
  std::cout << res.table.to_csv();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Jacobian-field inverse dynamics experiments"};
  app.require_subcommand(1);

  Common common;
  auto* defaults = app.add_subcommand("defaults", "print the default run configuration");

  auto* gen = app.add_subcommand("gen-data", "generate self-play train/val datasets");
  add_common(gen, common);
  std::optional<int> gen_dof, gen_budget;
  gen->add_option("--dof", gen_dof, "joint count (default chain.n_joints)");
  gen->add_option("--budget", gen_budget, "training transitions (default data.budget)");

  auto* trn = app.add_subcommand("train", "train one model");
  add_common(trn, common);
  std::string kind_name = "jidm", data_stem;
  trn->add_option("--kind", kind_name, "jidm | dflow | unipi");
  trn->add_option("--data", data_stem, "training dataset stem")->required();

  auto* ev = app.add_subcommand("eval-idm", "held-out action MSE of a checkpoint");
  add_common(ev, common);
  std::string ckpt, eval_stem;
  std::optional<double> lambda;
  ev->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingFile);
  ev->add_option("--data", eval_stem, "evaluation dataset stem")->required();
  ev->add_option("--lambda", lambda, "inference ridge (default eval.lambda)");

  auto* roll = app.add_subcommand("rollout", "closed-loop reaching with the scripted planner");
  add_common(roll, common);
  std::string roll_ckpt;
  std::optional<int> trials;
  roll->add_option("--checkpoint", roll_ckpt, "J-IDM checkpoint; analytic field when omitted")->check(CLI::ExistingFile);
  roll->add_option("--trials", trials, "episodes (default control.trials)");

  bool resume = false;
  auto* sdof = app.add_subcommand("sweep-dof", "train and evaluate every (kind, DoF, seed) cell");
  add_common(sdof, common);
  sdof->add_flag("--resume", resume, "reuse cells trained under the same configuration");
  auto* sdata = app.add_subcommand("sweep-data", "train and evaluate every (kind, budget, seed) cell");
  add_common(sdata, common);
  sdata->add_flag("--resume", resume, "reuse cells trained under the same configuration");

  auto* plt = app.add_subcommand("plot", "SVG line plot of a metrics table");
  std::string metrics_path, plot_out;
  std::vector<std::string> filters;
  PlotSpec spec;
  plt->add_option("--metrics", metrics_path)->required()->check(CLI::ExistingFile);
  plt->add_option("--out", plot_out, "output .svg")->required();
  plt->add_option("--x", spec.x);
  plt->add_option("--y", spec.y);
  plt->add_option("--group", spec.group);
  plt->add_option("--filter", filters, "column=value, repeatable");
  plt->add_option("--title", spec.title);
  plt->add_flag("--logx", spec.log_x);
  plt->add_flag("--logy", spec.log_y);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (defaults->parsed()) {
      std::cout << default_run_config().to_string();
    } else if (gen->parsed()) {
      const TextConfig cfg = resolve(common);
      const int dof = gen_dof.value_or(static_cast<int>(cfg.get_int("chain", "n_joints")));
      const int budget = gen_budget.value_or(static_cast<int>(cfg.get_int("data", "budget")));
      const fs::path dir = out_dir(cfg);
      const DataPair d = make_data(cfg, dof, budget, cfg.get_u64("run", "seed"), static_cast<int>(cfg.get_int("run", "jobs")));
      save_dataset(d.train, (dir / "train").string());
      save_dataset(d.val, (dir / "val").string());
      write_text(dir / "config.txt", cfg.to_string());
      std::cout << "train " << d.train.size() << " records -> " << (dir / "train").string() << "\n"
                << "val " << d.val.size() << " records -> " << (dir / "val").string() << "\n";
    } else if (trn->parsed()) {
      const TextConfig cfg = resolve(common);
      const ModelKind kind = parse_model_kind(kind_name);
      const std::uint64_t seed = cfg.get_u64("run", "seed");
      const Dataset data = load_dataset(data_stem);
      AnyModel model = make_model(kind, jidm_layout(cfg, data.manifest), seed);
      const TrainResult tr = train(model, data, train_config(cfg, seed));
      const fs::path dir = out_dir(cfg);
      save_checkpoint(model, (dir / (kind_name + ".ckpt")).string());
      std::string curve = "step,loss\n";
      for (const auto& p : tr.loss_curve) curve += std::to_string(p.step) + "," + format_double(p.loss) + "\n";
      write_text(dir / (kind_name + ".loss.csv"), curve);
      std::cout << "checkpoint " << (dir / (kind_name + ".ckpt")).string() << " params " << layout_of(model).param_count()
                << " seconds " << tr.seconds << "\n";
    } else if (ev->parsed()) {
      const TextConfig cfg = resolve(common);
      const auto t0 = std::chrono::steady_clock::now();
      const AnyModel model = load_checkpoint(ckpt);
      const Dataset data = load_dataset(eval_stem);
      const EvalResult res = eval_action_mse(model, data, lambda.value_or(cfg.get_double("eval", "lambda")));
      MetricsRow row;
      row.experiment = "eval-idm";
      row.model = to_string(layout_of(model).kind);
      row.dof = layout_of(model).n_joints;
      row.budget = 0;
      row.seed = cfg.get_u64("run", "seed");
      row.action_mse = res.action_mse;
      row.flow_epe = res.flow_epe;
      row.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      MetricsTable t{{row}};
      if (!common.out.empty()) t.save((out_dir(cfg) / "metrics.csv").string());
      std::cout << t.to_csv();
    } else if (roll->parsed()) {
      const TextConfig cfg = resolve(common);
      std::optional<PatchFieldModel> model;
      if (!roll_ckpt.empty()) {
        AnyModel m = load_checkpoint(roll_ckpt);
        if (!std::holds_alternative<PatchFieldModel>(m)) throw std::invalid_argument("rollout needs a jidm checkpoint");
        model = std::get<PatchFieldModel>(std::move(m));
      }
      const fs::path dir = out_dir(cfg);
      const RolloutBatch b = run_rollouts(cfg, model, cfg.get_u64("run", "seed"),
                                          trials.value_or(static_cast<int>(cfg.get_int("control", "trials"))), dir / "logs");
      MetricsTable t{{b.row}};
      t.save((dir / "metrics.csv").string());
      std::cout << t.to_csv();
    } else if (sdof->parsed()) {
      const TextConfig cfg = resolve(common);
      const fs::path dir = out_dir(cfg);
      write_text(dir / "config.txt", cfg.to_string());
      const SweepResult res = sweep_dof(cfg, dir / "cells", static_cast<int>(cfg.get_int("run", "jobs")), resume);
      report_sweep(res, dir, "sweep-dof", PlotSpec{"dof", "action_mse", "model", {}, false, true, "held-out action MSE vs DoF"});
      for (const auto& g : dof_gaps(res.table))
        std::cout << "gap dof=" << g.dof << " jidm=" << format_double(g.jidm) << " best_direct=" << format_double(g.best_direct)
                  << " gap=" << format_double(g.gap) << "\n";
    } else if (sdata->parsed()) {
      const TextConfig cfg = resolve(common);
      const fs::path dir = out_dir(cfg);
      write_text(dir / "config.txt", cfg.to_string());
      const SweepResult res = sweep_data(cfg, dir / "cells", static_cast<int>(cfg.get_int("run", "jobs")), resume);
      report_sweep(res, dir, "sweep-data",
                   PlotSpec{"budget", "action_mse", "model", {}, true, true, "held-out action MSE vs training budget"});
      const int dof = static_cast<int>(cfg.get_int("sweep", "data_dof"));
      const auto b = smallest_matching_budget(res.table, dof);
      std::cout << "smallest jidm budget matching best direct at largest budget: " << (b ? std::to_string(*b) : "none")
                << "\n";
    } else if (plt->parsed()) {
      for (const auto& f : filters) {
        const auto eq = f.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("filter must be column=value: " + f);
        spec.filter[f.substr(0, eq)] = f.substr(eq + 1);
      }
      const MetricsTable t = MetricsTable::load(metrics_path);
      write_text(plot_out, plot_svg(t, spec));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
