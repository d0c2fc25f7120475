// Experiment plumbing: run configuration, metrics tables, training/eval
// cells, the DoF and data-budget sweeps, closed-loop rollouts and SVG plots.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "jidm/config.hpp"
#include "jidm/control.hpp"
#include "jidm/dataset.hpp"
#include "jidm/models.hpp"

namespace jidm::exp {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Run configuration

inline TextConfig default_run_config() {
  TextConfig c;
  c.set("run", "seed", std::uint64_t{0});
  c.set("run", "out", "runs");
  c.set("run", "jobs", 1);

  c.set("chain", "n_joints", 5);
  c.set("chain", "length_taper", 0.85);
  c.set("chain", "radius_taper", 0.9);
  c.set("chain", "base_radius", 0.25);
  c.set("chain", "limit", 2.4);

  c.set("camera", "height", 64);
  c.set("camera", "width", 64);
  c.set("camera", "margin", 0.92);

  c.set("style", "channels", 1);
  c.set("style", "shading_gain", 0.35);
  c.set("style", "background", 0.0);
  c.set("style", "supersample", 4);

  c.set("data", "budget", 2000);
  c.set("data", "steps_per_episode", 20);
  c.set("data", "val_episodes", 25);
  c.set("data", "delta_max", 0.12);
  c.set("data", "law", "uniform");
  c.set("data", "rho", 0.9);
  c.set("data", "flow_sigma", 0.0);
  c.set("data", "flow_dropout", 0.0);
  c.set("data", "train_seed_base", std::uint64_t{1000});
  c.set("data", "val_seed_base", std::uint64_t{900000});

  c.set("model", "kinds", "jidm, dflow, unipi");
  c.set("model", "patch", 9);
  c.set("model", "hidden1", 32);
  c.set("model", "hidden2", 32);
  c.set("model", "head_hidden", 64);
  c.set("model", "ctx_stride", 4);

  c.set("train", "steps", 6000);
  c.set("train", "learning_rate", 1e-3);
  c.set("train", "final_lr_fraction", 0.1);
  c.set("train", "records_per_step", 8);
  c.set("train", "pixels_per_record", 128);
  c.set("train", "foreground_fraction", 0.5);
  c.set("train", "w_a", 0.3);
  c.set("train", "charbonnier_eps", 2.0);
  c.set("train", "lambda_train", 1e-4);
  c.set("train", "log_every", 100);

  c.set("eval", "lambda", 1e-3);

  c.set("control", "dof", 3);
  c.set("control", "context", 6);
  c.set("control", "lookahead", 4);
  c.set("control", "commit", 1);
  c.set("control", "actions_per_frame", 1);
  c.set("control", "max_steps", 60);
  c.set("control", "planner", "oracle");
  c.set("control", "step_cap", 0.04);
  c.set("control", "joint_noise", 0.05);
  c.set("control", "adversarial_step", 0.36);
  c.set("control", "damping", 1.0);
  c.set("control", "tolerance", 2.0);
  c.set("control", "trials", 50);
  c.set("control", "flow_sigma", 0.0);

  c.set("sweep", "dofs", std::vector<double>{2, 3, 5, 8, 12, 16});
  c.set("sweep", "budgets", std::vector<double>{250, 500, 1000, 2000, 4000, 8000});
  c.set("sweep", "seeds", std::vector<double>{0, 1, 2});
  c.set("sweep", "dof_budget", 2000);
  c.set("sweep", "data_dof", 5);
  return c;
}

/// Defaults overlaid with `user`; unknown sections or keys throw ConfigError.
inline TextConfig resolve_config(const TextConfig& user) {
  TextConfig c = default_run_config();
  user.check_known(c);
  c.merge(user);
  return c;
}

inline TextConfig load_run_config(const std::string& path) { return resolve_config(TextConfig::load(path)); }

inline std::vector<std::string> split_names(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!trim(item).empty()) out.push_back(trim(item));
  return out;
}

inline std::vector<int> get_ints(const TextConfig& c, const std::string& sec, const std::string& key) {
  std::vector<int> out;
  for (double v : c.get_list(sec, key)) {
    if (v != std::floor(v)) throw ConfigError(sec + "." + key + ": expected integers");
    out.push_back(static_cast<int>(v));
  }
  return out;
}

inline std::vector<ModelKind> model_kinds(const TextConfig& c) {
  std::vector<ModelKind> out;
  for (const auto& s : split_names(c.get_string("model", "kinds"))) out.push_back(parse_model_kind(s));
  if (out.empty()) throw ConfigError("model.kinds is empty");
  return out;
}

inline ChainConfig chain_for(const TextConfig& c, int dof) {
  if (dof < 1) throw ConfigError("DoF must be >= 1");
  return default_chain(static_cast<std::size_t>(dof), c.get_double("chain", "length_taper"),
                       c.get_double("chain", "radius_taper"), c.get_double("chain", "limit"),
                       c.get_double("chain", "base_radius"));
}

inline CameraModel camera_for(const TextConfig& c, const ChainConfig& chain) {
  return fit_camera(chain, static_cast<int>(c.get_int("camera", "height")), static_cast<int>(c.get_int("camera", "width")),
                    c.get_double("camera", "margin"));
}

inline RenderStyle style_for(const TextConfig& c, int dof) {
  RenderStyle s = default_style(static_cast<std::size_t>(dof));
  s.channels = static_cast<int>(c.get_int("style", "channels"));
  s.radial_shading_gain = c.get_double("style", "shading_gain");
  s.background_value = c.get_double("style", "background");
  s.supersample_factor = static_cast<int>(c.get_int("style", "supersample"));
  s.validate(static_cast<std::size_t>(dof));
  return s;
}

inline SelfPlayOptions selfplay_options(const TextConfig& c, std::size_t episodes, std::uint64_t seed) {
  SelfPlayOptions o;
  o.episodes = episodes;
  o.steps_per_episode = static_cast<std::size_t>(c.get_int("data", "steps_per_episode"));
  o.delta_max = c.get_double("data", "delta_max");
  const std::string law = c.get_string("data", "law");
  if (law != "uniform" && law != "correlated") throw ConfigError("data.law must be uniform or correlated");
  o.law = law == "uniform" ? ActionLaw::uniform : ActionLaw::correlated;
  o.rho = c.get_double("data", "rho");
  o.noise.sigma_pixels = c.get_double("data", "flow_sigma");
  o.noise.dropout_rate = c.get_double("data", "flow_dropout");
  o.noise.seed = seed ^ 0xF10Bull;
  o.seed = seed;
  return o;
}

struct DataPair {
  Dataset train;
  Dataset val;
};

/// Training set of exactly `budget` transitions (a prefix of whole episodes,
/// so smaller budgets are nested in larger ones) and a fixed validation set
/// drawn from a disjoint seed range.
inline DataPair make_data(const TextConfig& c, int dof, int budget, std::uint64_t seed, int jobs = 1) {
  if (budget < 1) throw ConfigError("data budget must be >= 1");
  const ChainConfig chain = chain_for(c, dof);
  const CameraModel cam = camera_for(c, chain);
  const RenderStyle style = style_for(c, dof);
  const auto spe = static_cast<std::size_t>(c.get_int("data", "steps_per_episode"));
  const std::size_t episodes = (static_cast<std::size_t>(budget) + spe - 1) / spe;
  SelfPlayOptions o = selfplay_options(c, episodes, c.get_u64("data", "train_seed_base") + seed);
  o.jobs = jobs;
  Dataset full = generate_selfplay(chain, cam, style, o);
  std::vector<std::size_t> idx(static_cast<std::size_t>(budget));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  DataPair d{subset(full, idx), {}};
  SelfPlayOptions v =
      selfplay_options(c, static_cast<std::size_t>(c.get_int("data", "val_episodes")), c.get_u64("data", "val_seed_base") + seed);
  v.jobs = jobs;
  d.val = generate_selfplay(chain, cam, style, v);
  return d;
}

inline TrainConfig train_config(const TextConfig& c, std::uint64_t seed) {
  TrainConfig t;
  t.steps = static_cast<int>(c.get_int("train", "steps"));
  t.learning_rate = c.get_double("train", "learning_rate");
  t.final_lr_fraction = c.get_double("train", "final_lr_fraction");
  t.records_per_step = static_cast<int>(c.get_int("train", "records_per_step"));
  t.pixels_per_record = static_cast<int>(c.get_int("train", "pixels_per_record"));
  t.foreground_fraction = c.get_double("train", "foreground_fraction");
  t.w_a = c.get_double("train", "w_a");
  t.charbonnier_eps = c.get_double("train", "charbonnier_eps");
  t.lambda_train = c.get_double("train", "lambda_train");
  t.log_every = static_cast<int>(c.get_int("train", "log_every"));
  t.seed = seed;
  t.validate();
  return t;
}

inline ModelLayout jidm_layout(const TextConfig& c, const DatasetManifest& m) {
  return layout_for(ModelKind::jidm, m, static_cast<int>(c.get_int("model", "patch")),
                    static_cast<int>(c.get_int("model", "hidden1")), static_cast<int>(c.get_int("model", "hidden2")),
                    static_cast<int>(c.get_int("model", "head_hidden")), static_cast<int>(c.get_int("model", "ctx_stride")));
}

inline ControllerConfig controller_config(const TextConfig& c) {
  ControllerConfig k;
  k.context = static_cast<int>(c.get_int("control", "context"));
  k.lookahead = static_cast<int>(c.get_int("control", "lookahead"));
  k.commit = static_cast<int>(c.get_int("control", "commit"));
  k.actions_per_frame = static_cast<int>(c.get_int("control", "actions_per_frame"));
  k.max_steps = static_cast<int>(c.get_int("control", "max_steps"));
  const double sigma = c.get_double("control", "flow_sigma");
  if (sigma > 0.0) k.replan_noise = FlowNoiseModel{sigma, 0.0, 0};
  k.validate();
  return k;
}

inline ScriptedPlanner planner_config(const TextConfig& c) {
  ScriptedPlanner p;
  p.mode = parse_planner_mode(c.get_string("control", "planner"));
  p.step_cap = c.get_double("control", "step_cap");
  p.joint_noise = c.get_double("control", "joint_noise");
  p.adversarial_step = c.get_double("control", "adversarial_step");
  p.damping = c.get_double("control", "damping");
  return p;
}

inline ReachingSetup reaching_setup(const TextConfig& c) {
  const int dof = static_cast<int>(c.get_int("control", "dof"));
  ReachingSetup s{chain_for(c, dof), {}, style_for(c, dof), c.get_double("data", "delta_max")};
  s.camera = camera_for(c, s.chain);
  return s;
}

/// eval.lambda converted to raw units for the reaching setup.
inline double translator_lambda(const TextConfig& c, const ReachingSetup& s) {
  return c.get_double("eval", "lambda") * ridge_unit(s.camera, s.delta_max);
}

/// Text of the sections a trained cell depends on; equal fingerprints mean a
/// cached cell can be reused.
inline std::string cell_fingerprint(const TextConfig& c) {
  TextConfig f;
  for (const char* sec : {"chain", "camera", "style", "data", "model", "train", "eval"})
    for (const auto& [k, v] : c.sections().at(sec)) f.set(sec, k, v);
  return f.to_string();
}

// ---------------------------------------------------------------------------
// Metrics

inline const char* kMetricsHeader =
    "experiment,model,dof,budget,seed,action_mse,flow_epe,success_rate,progress,wall_time";

struct MetricsRow {
  std::string experiment;
  std::string model;
  int dof = 0;
  int budget = 0;
  std::uint64_t seed = 0;
  double action_mse = std::numeric_limits<double>::quiet_NaN();
  double flow_epe = std::numeric_limits<double>::quiet_NaN();
  double success_rate = std::numeric_limits<double>::quiet_NaN();
  double progress = std::numeric_limits<double>::quiet_NaN();
  double wall_time = 0.0;

  auto key() const { return std::tie(experiment, model, dof, budget, seed); }
};

inline std::string to_csv(const MetricsRow& r) {
  return r.experiment + "," + r.model + "," + std::to_string(r.dof) + "," + std::to_string(r.budget) + "," +
         std::to_string(r.seed) + "," + format_double(r.action_mse) + "," + format_double(r.flow_epe) + "," +
         format_double(r.success_rate) + "," + format_double(r.progress) + "," + format_double(r.wall_time);
}

inline MetricsRow parse_metrics_row(const std::string& line) {
  std::vector<std::string> f;
  std::stringstream ss(line);
  std::string item;
  while (std::getline(ss, item, ',')) f.push_back(trim(item));
  if (f.size() != 10) throw std::runtime_error("metrics row needs 10 fields: " + line);
  auto num = [&](const std::string& s) {
    if (s == "nan" || s == "-nan") return std::numeric_limits<double>::quiet_NaN();
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::runtime_error("bad number in metrics row: " + s);
    return v;
  };
  MetricsRow r;
  r.experiment = f[0];
  r.model = f[1];
  r.dof = std::stoi(f[2]);
  r.budget = std::stoi(f[3]);
  r.seed = std::stoull(f[4]);
  r.action_mse = num(f[5]);
  r.flow_epe = num(f[6]);
  r.success_rate = num(f[7]);
  r.progress = num(f[8]);
  r.wall_time = num(f[9]);
  return r;
}

/// Raw rows, one per (condition, seed); no aggregation.
struct MetricsTable {
  std::vector<MetricsRow> rows;

  void sort() {
    std::stable_sort(rows.begin(), rows.end(), [](const MetricsRow& a, const MetricsRow& b) { return a.key() < b.key(); });
  }

  std::string to_csv() const {
    std::string s = std::string(kMetricsHeader) + "\n";
    for (const auto& r : rows) s += exp::to_csv(r) + "\n";
    return s;
  }

  static MetricsTable parse(const std::string& text) {
    MetricsTable t;
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || trim(line) != kMetricsHeader) throw std::runtime_error("metrics table header mismatch");
    while (std::getline(in, line))
      if (!trim(line).empty()) t.rows.push_back(parse_metrics_row(line));
    return t;
  }

  static MetricsTable load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open metrics table " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << to_csv();
  }
};

inline double median(std::vector<double> v) {
  v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return std::isnan(x); }), v.end());
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::vector<double> mse_values(const MetricsTable& t, const std::string& model, int dof, int budget) {
  std::vector<double> out;
  for (const auto& r : t.rows)
    if (r.model == model && r.dof == dof && r.budget == budget) out.push_back(r.action_mse);
  return out;
}

inline std::optional<double> mse_of(const MetricsTable& t, const std::string& model, int dof, int budget,
                                    std::uint64_t seed) {
  for (const auto& r : t.rows)
    if (r.model == model && r.dof == dof && r.budget == budget && r.seed == seed && !std::isnan(r.action_mse))
      return r.action_mse;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Training / evaluation cells

struct CellError {
  std::string cell;
  std::string message;
};

inline std::string cell_name(ModelKind kind, int dof, int budget, std::uint64_t seed) {
  return to_string(kind) + "_d" + std::to_string(dof) + "_b" + std::to_string(budget) + "_s" + std::to_string(seed);
}

inline std::string slurp_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Trains and evaluates every kind on one (DoF, budget, seed) dataset. Each
/// kind writes <cell>.ckpt, <cell>.loss.csv and <cell>.row into `cell_dir`.
/// With `resume`, a kind whose row exists under the same fingerprint is read
/// back instead of retrained. Failures become NaN rows plus a CellError.
inline std::vector<MetricsRow> run_idm_group(const TextConfig& c, const std::string& experiment, int dof, int budget,
                                             std::uint64_t seed, const std::vector<ModelKind>& kinds,
                                             const fs::path& cell_dir, bool resume, std::vector<CellError>& errors) {
  fs::create_directories(cell_dir);
  const std::string fp = cell_fingerprint(c);
  std::vector<MetricsRow> rows;
  std::optional<DataPair> data;
  for (ModelKind kind : kinds) {
    const std::string name = cell_name(kind, dof, budget, seed);
    const fs::path row_path = cell_dir / (name + ".row");
    const fs::path fp_path = cell_dir / (name + ".cfg");
    MetricsRow row;
    if (resume && fs::exists(row_path) && fs::exists(fp_path) && slurp_file(fp_path) == fp) {
      try {
        row = parse_metrics_row(trim(slurp_file(row_path)));
        row.experiment = experiment;
        rows.push_back(row);
        continue;
      } catch (const std::exception&) {
        // unreadable cache entry: retrain
      }
    }
    row.experiment = experiment;
    row.model = to_string(kind);
    row.dof = dof;
    row.budget = budget;
    row.seed = seed;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      if (!data) data = make_data(c, dof, budget, seed);
      AnyModel model = make_model(kind, jidm_layout(c, data->train.manifest), seed);
      const TrainResult tr = train(model, data->train, train_config(c, seed));
      const EvalResult ev = eval_action_mse(model, data->val, c.get_double("eval", "lambda"));
      row.action_mse = ev.action_mse;
      row.flow_epe = ev.flow_epe;
      save_checkpoint(model, (cell_dir / (name + ".ckpt")).string());
      std::ofstream loss(cell_dir / (name + ".loss.csv"), std::ios::binary);
      loss << "step,loss\n";
      for (const auto& p : tr.loss_curve) loss << p.step << ',' << format_double(p.loss) << '\n';
    } catch (const std::exception& e) {
      errors.push_back({name, e.what()});
    }
    row.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    {
      std::ofstream out(row_path, std::ios::binary);
      out << to_csv(row) << '\n';
      std::ofstream f(fp_path, std::ios::binary);
      f << fp;
    }
    rows.push_back(row);
  }
  return rows;
}

struct SweepResult {
  MetricsTable table;
  std::vector<CellError> errors;
};

struct GroupKey {
  int dof;
  int budget;
  std::uint64_t seed;
};

/// Runs groups on up to `jobs` threads; the table is merged by cell key, so
/// its order does not depend on scheduling.
inline SweepResult run_groups(const TextConfig& c, const std::string& experiment, const std::vector<GroupKey>& groups,
                              const std::vector<ModelKind>& kinds, const fs::path& cell_dir, int jobs, bool resume) {
  std::vector<std::vector<MetricsRow>> rows(groups.size());
  std::vector<std::vector<CellError>> errs(groups.size());
  auto work = [&](std::size_t g) {
    try {
      rows[g] = run_idm_group(c, experiment, groups[g].dof, groups[g].budget, groups[g].seed, kinds, cell_dir, resume, errs[g]);
    } catch (const std::exception& e) {
      errs[g].push_back({"group_d" + std::to_string(groups[g].dof) + "_b" + std::to_string(groups[g].budget) + "_s" +
                             std::to_string(groups[g].seed),
                         e.what()});
    }
  };
  jobs = std::max(1, std::min<int>(jobs, static_cast<int>(groups.size())));
  if (jobs == 1) {
    for (std::size_t g = 0; g < groups.size(); ++g) work(g);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < jobs; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t g = static_cast<std::size_t>(w); g < groups.size(); g += static_cast<std::size_t>(jobs)) work(g);
      });
    for (auto& t : pool) t.join();
  }
  SweepResult res;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    res.table.rows.insert(res.table.rows.end(), rows[g].begin(), rows[g].end());
    res.errors.insert(res.errors.end(), errs[g].begin(), errs[g].end());
  }
  res.table.sort();
  return res;
}

inline std::vector<std::uint64_t> sweep_seeds(const TextConfig& c) {
  std::vector<std::uint64_t> out;
  const std::uint64_t base = c.get_u64("run", "seed");
  for (int s : get_ints(c, "sweep", "seeds")) {
    if (s < 0) throw ConfigError("sweep.seeds must be non-negative");
    out.push_back(base + static_cast<std::uint64_t>(s));
  }
  if (out.empty()) throw ConfigError("sweep.seeds is empty");
  return out;
}

inline SweepResult sweep_dof(const TextConfig& c, const fs::path& cell_dir, int jobs, bool resume = false) {
  const int budget = static_cast<int>(c.get_int("sweep", "dof_budget"));
  std::vector<GroupKey> groups;
  for (int d : get_ints(c, "sweep", "dofs"))
    for (auto s : sweep_seeds(c)) groups.push_back({d, budget, s});
  return run_groups(c, "sweep-dof", groups, model_kinds(c), cell_dir, jobs, resume);
}

inline SweepResult sweep_data(const TextConfig& c, const fs::path& cell_dir, int jobs, bool resume = false) {
  const int dof = static_cast<int>(c.get_int("sweep", "data_dof"));
  std::vector<GroupKey> groups;
  for (int b : get_ints(c, "sweep", "budgets"))
    for (auto s : sweep_seeds(c)) groups.push_back({dof, b, s});
  return run_groups(c, "sweep-data", groups, model_kinds(c), cell_dir, jobs, resume);
}

// ---------------------------------------------------------------------------
// Sweep analysis (aggregation happens here, never in the raw table)

inline bool is_direct(const std::string& model) { return model == "dflow" || model == "unipi"; }

struct GapPoint {
  int dof = 0;
  double jidm = 0.0;         // median over seeds
  double best_direct = 0.0;  // smaller of the direct medians
  double gap = 0.0;          // best_direct - jidm
};

inline std::vector<GapPoint> dof_gaps(const MetricsTable& t) {
  std::map<int, int> budget_of;
  for (const auto& r : t.rows) budget_of[r.dof] = r.budget;
  std::vector<GapPoint> out;
  for (const auto& [dof, budget] : budget_of) {
    GapPoint g;
    g.dof = dof;
    g.jidm = median(mse_values(t, "jidm", dof, budget));
    g.best_direct = std::numeric_limits<double>::quiet_NaN();
    for (const char* k : {"dflow", "unipi"}) {
      const double m = median(mse_values(t, k, dof, budget));
      if (!std::isnan(m) && !(m >= g.best_direct)) g.best_direct = m;
    }
    g.gap = g.best_direct - g.jidm;
    out.push_back(g);
  }
  return out;
}

inline bool gaps_non_decreasing(const std::vector<GapPoint>& g) {
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (std::isnan(g[i].gap)) return false;
    if (i > 0 && g[i].gap < g[i - 1].gap) return false;
  }
  return !g.empty();
}

struct EfficiencyCheck {
  int budget = 0;
  int seeds_holding = 0;
  int seeds_total = 0;
  std::vector<std::string> details;
};

/// Per seed: J-IDM at budget/2 against the better direct baseline at budget.
inline EfficiencyCheck data_efficiency(const MetricsTable& t, int dof, int budget) {
  EfficiencyCheck e;
  e.budget = budget;
  std::vector<std::uint64_t> seeds;
  for (const auto& r : t.rows)
    if (r.dof == dof && std::find(seeds.begin(), seeds.end(), r.seed) == seeds.end()) seeds.push_back(r.seed);
  std::sort(seeds.begin(), seeds.end());
  for (auto s : seeds) {
    const auto j = mse_of(t, "jidm", dof, budget / 2, s);
    std::optional<double> best;
    for (const char* k : {"dflow", "unipi"})
      if (const auto m = mse_of(t, k, dof, budget, s); m && (!best || *m < *best)) best = m;
    if (!j || !best) continue;
    ++e.seeds_total;
    if (*j <= *best) ++e.seeds_holding;
    e.details.push_back("seed " + std::to_string(s) + ": jidm@" + std::to_string(budget / 2) + "=" + format_double(*j) +
                        " best_direct@" + std::to_string(budget) + "=" + format_double(*best));
  }
  return e;
}

/// Smallest J-IDM budget whose median MSE is at most the best direct median
/// at the largest budget; nullopt when none qualifies.
inline std::optional<int> smallest_matching_budget(const MetricsTable& t, int dof) {
  std::vector<int> budgets;
  for (const auto& r : t.rows)
    if (r.dof == dof && std::find(budgets.begin(), budgets.end(), r.budget) == budgets.end()) budgets.push_back(r.budget);
  if (budgets.empty()) return std::nullopt;
  std::sort(budgets.begin(), budgets.end());
  double best = std::numeric_limits<double>::infinity();
  for (const char* k : {"dflow", "unipi"}) {
    const double m = median(mse_values(t, k, dof, budgets.back()));
    if (!std::isnan(m)) best = std::min(best, m);
  }
  for (int b : budgets)
    if (median(mse_values(t, "jidm", dof, b)) <= best) return b;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Closed-loop rollouts

struct RolloutBatch {
  MetricsRow row;
  std::vector<RolloutLog> logs;
};

/// `trials` reaching episodes for one seed. With a checkpoint the field
/// comes from the learned J-IDM, otherwise from the analytic Jacobian.
inline RolloutBatch run_rollouts(const TextConfig& c, const std::optional<PatchFieldModel>& model, std::uint64_t seed,
                                 int trials, const fs::path& log_dir = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  const ReachingSetup setup = reaching_setup(c);
  const ScriptedPlanner planner = planner_config(c);
  const ControllerConfig ctl = controller_config(c);
  const double lambda = translator_lambda(c, setup);
  const double tol = c.get_double("control", "tolerance");
  if (model && model->layout().n_joints != static_cast<int>(setup.chain.n_joints()))
    throw std::invalid_argument("checkpoint DoF does not match control.dof");
  const Translator tr = model ? learned_translator(*model, setup.chain, setup.camera, lambda)
                              : analytic_translator(setup.chain, setup.camera, lambda);
  RolloutBatch b;
  b.row.experiment = "rollout-" + to_string(planner.mode);
  b.row.model = model ? "jidm" : "analytic";
  b.row.dof = static_cast<int>(setup.chain.n_joints());
  b.row.budget = 0;
  b.row.seed = seed;
  double succ = 0.0, prog = 0.0;
  if (!log_dir.empty()) fs::create_directories(log_dir);
  std::ofstream summary;
  if (!log_dir.empty()) {
    summary.open(log_dir / ("summary_s" + std::to_string(seed) + ".csv"), std::ios::binary);
    summary << "trial," << rollout_summary_csv_header() << '\n';
  }
  for (int t = 0; t < trials; ++t) {
    const std::uint64_t task_seed = seed * 100003ULL + static_cast<std::uint64_t>(t);
    const ReachingTask task = make_reaching_task(setup.chain, setup.camera, task_seed, 1.2, 0.8, tol);
    Simulator sim(setup.chain, setup.camera, setup.style, task.start, setup.delta_max);
    RolloutLog log = rollout(planner, tr, sim, ctl, task.goal, task_seed);
    succ += log.success ? 1.0 : 0.0;
    prog += log.progress;
    if (!log_dir.empty()) {
      std::ofstream out(log_dir / ("rollout_s" + std::to_string(seed) + "_t" + std::to_string(t) + ".csv"), std::ios::binary);
      write_rollout_csv(log, out);
      summary << t << ',' << rollout_summary_csv(log, task_seed) << '\n';
    }
    b.logs.push_back(std::move(log));
  }
  b.row.success_rate = trials > 0 ? succ / trials : 0.0;
  b.row.progress = trials > 0 ? prog / trials : 0.0;
  b.row.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return b;
}

// ---------------------------------------------------------------------------
// Plots

struct PlotSpec {
  std::string x = "dof";
  std::string y = "action_mse";
  std::string group = "model";
  std::map<std::string, std::string> filter;  // column -> required value
  bool log_x = false;
  bool log_y = false;
  std::string title;
};

inline std::string column_text(const MetricsRow& r, const std::string& col) {
  if (col == "experiment") return r.experiment;
  if (col == "model") return r.model;
  if (col == "dof") return std::to_string(r.dof);
  if (col == "budget") return std::to_string(r.budget);
  if (col == "seed") return std::to_string(r.seed);
  if (col == "action_mse") return format_double(r.action_mse);
  if (col == "flow_epe") return format_double(r.flow_epe);
  if (col == "success_rate") return format_double(r.success_rate);
  if (col == "progress") return format_double(r.progress);
  if (col == "wall_time") return format_double(r.wall_time);
  throw std::invalid_argument("unknown metrics column: " + col);
}

inline double column_value(const MetricsRow& r, const std::string& col) {
  if (col == "dof") return r.dof;
  if (col == "budget") return r.budget;
  if (col == "seed") return static_cast<double>(r.seed);
  if (col == "action_mse") return r.action_mse;
  if (col == "flow_epe") return r.flow_epe;
  if (col == "success_rate") return r.success_rate;
  if (col == "progress") return r.progress;
  if (col == "wall_time") return r.wall_time;
  throw std::invalid_argument("column is not numeric: " + col);
}

struct PlotSeries {
  std::string name;
  std::vector<std::pair<double, double>> points;  // x, median y over seeds
};

/// Filtered rows grouped into series; y is the median over rows sharing
/// (group, x). Throws when nothing survives the filter.
inline std::vector<PlotSeries> plot_series(const MetricsTable& t, const PlotSpec& spec) {
  std::map<std::string, std::map<double, std::vector<double>>> acc;
  for (const auto& r : t.rows) {
    bool keep = true;
    for (const auto& [col, val] : spec.filter) keep = keep && column_text(r, col) == val;
    if (!keep) continue;
    const double x = column_value(r, spec.x), y = column_value(r, spec.y);
    if (std::isnan(x) || std::isnan(y)) continue;
    if ((spec.log_x && x <= 0.0) || (spec.log_y && y <= 0.0)) continue;
    acc[column_text(r, spec.group)][x].push_back(y);
  }
  if (acc.empty()) throw std::invalid_argument("plot selection is empty");
  std::vector<PlotSeries> out;
  for (const auto& [name, xs] : acc) {
    PlotSeries s{name, {}};
    for (const auto& [x, ys] : xs) s.points.push_back({x, median(ys)});
    out.push_back(std::move(s));
  }
  return out;
}

struct AxisRange {
  double lo = 0.0;
  double hi = 1.0;
};

inline std::string svg_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

inline std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

/// Static SVG line plot; bytes depend only on the table and the spec.
inline std::string plot_svg(const MetricsTable& t, const PlotSpec& spec, AxisRange* x_range = nullptr,
                            AxisRange* y_range = nullptr) {
  const auto series = plot_series(t, spec);
  auto tx = [&](double v) { return spec.log_x ? std::log10(v) : v; };
  auto ty = [&](double v) { return spec.log_y ? std::log10(v) : v; };
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series)
    for (const auto& [x, y] : s.points) {
      x0 = std::min(x0, tx(x));
      x1 = std::max(x1, tx(x));
      y0 = std::min(y0, ty(y));
      y1 = std::max(y1, ty(y));
    }
  if (x1 == x0) { x0 -= 0.5; x1 += 0.5; }
  if (y1 == y0) { y0 -= 0.5; y1 += 0.5; }
  const double px = 0.05 * (x1 - x0), py = 0.05 * (y1 - y0);
  x0 -= px; x1 += px; y0 -= py; y1 += py;
  if (x_range) *x_range = {spec.log_x ? std::pow(10.0, x0) : x0, spec.log_x ? std::pow(10.0, x1) : x1};
  if (y_range) *y_range = {spec.log_y ? std::pow(10.0, y0) : y0, spec.log_y ? std::pow(10.0, y1) : y1};

  constexpr double W = 640, H = 420, L = 70, R = 150, T = 40, B = 50;
  auto sx = [&](double v) { return L + (tx(v) - x0) / (x1 - x0) * (W - L - R); };
  auto sy = [&](double v) { return H - B - (ty(v) - y0) / (y1 - y0) * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f"};

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W << ' '
    << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
  if (!spec.title.empty()) o << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\">" << spec.title << "</text>\n";
  o << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << W - L - R << "\" height=\"" << H - T - B
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = x0 + (x1 - x0) * i / 4.0, fy = y0 + (y1 - y0) * i / 4.0;
    const double vx = spec.log_x ? std::pow(10.0, fx) : fx, vy = spec.log_y ? std::pow(10.0, fy) : fy;
    o << "<text x=\"" << svg_num(sx(vx)) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << tick_label(vx)
      << "</text>\n";
    o << "<text x=\"" << L - 6 << "\" y=\"" << svg_num(sy(vy) + 4) << "\" text-anchor=\"end\">" << tick_label(vy)
      << "</text>\n";
  }
  o << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << spec.x
    << (spec.log_x ? " (log)" : "") << "</text>\n";
  o << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << (T + H - B) / 2
    << ")\">" << spec.y << (spec.log_y ? " (log)" : "") << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* col = colors[i % std::size(colors)];
    o << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
    for (std::size_t k = 0; k < series[i].points.size(); ++k)
      o << (k ? " " : "") << svg_num(sx(series[i].points[k].first)) << ',' << svg_num(sy(series[i].points[k].second));
    o << "\"/>\n";
    for (const auto& [x, y] : series[i].points)
      o << "<circle cx=\"" << svg_num(sx(x)) << "\" cy=\"" << svg_num(sy(y)) << "\" r=\"3\" fill=\"" << col << "\"/>\n";
    const double ly = T + 16 + 18.0 * static_cast<double>(i);
    o << "<line x1=\"" << W - R + 12 << "\" y1=\"" << svg_num(ly - 4) << "\" x2=\"" << W - R + 32 << "\" y2=\""
      << svg_num(ly - 4) << "\" stroke=\"" << col << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << W - R + 38 << "\" y=\"" << svg_num(ly) << "\">" << series[i].name << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace jidm::exp
