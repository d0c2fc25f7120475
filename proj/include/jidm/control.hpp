// Receding-horizon control: a scripted visual planner, the plan / translate /
// execute / replan loop, rollout logs and the chunk-length sweep.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "jidm/flow.hpp"
#include "jidm/inversion.hpp"
#include "jidm/kinematics.hpp"
#include "jidm/models.hpp"
#include "jidm/render.hpp"

namespace jidm {

struct ControllerConfig {
  int context = 6;    // N; carried for interface parity, the scripted planner reads only the latest state
  int lookahead = 4;  // M
  int commit = 1;     // K
  int actions_per_frame = 1;  // r
  int max_steps = 60;
  std::optional<FlowNoiseModel> replan_noise;

  void validate() const {
    if (context < 1) throw std::invalid_argument("context N must be >= 1");
    if (commit < 1 || commit > lookahead) throw std::invalid_argument("commit K must satisfy 1 <= K <= M");
    if (actions_per_frame < 1) throw std::invalid_argument("actions per frame r must be >= 1");
    if (max_steps < 0) throw std::invalid_argument("max_steps must be >= 0");
  }
};

/// Either a joint target (tolerance in radians) or a tip pixel (tolerance in
/// pixels).
struct GoalSpec {
  std::variant<ChainState, Vec2> target;
  double tolerance = 2.0;

  bool is_tip() const { return std::holds_alternative<Vec2>(target); }
};

inline GoalSpec tip_goal(const Vec2& pixel, double tolerance = 2.0) { return {pixel, tolerance}; }
inline GoalSpec joint_goal(const ChainState& q, double tolerance = 0.01) { return {q, tolerance}; }

/// Throws std::domain_error when the target lies outside the workspace.
inline void check_goal(const ChainConfig& config, const CameraModel& camera, const GoalSpec& goal) {
  if (!(goal.tolerance > 0.0)) throw std::invalid_argument("goal tolerance must be positive");
  if (const auto* q = std::get_if<ChainState>(&goal.target)) {
    if (static_cast<std::size_t>(q->q.size()) != config.n_joints())
      throw std::invalid_argument("goal state dimension does not match chain");
    if (!within_limits(config, *q)) throw std::domain_error("goal state violates joint limits");
    return;
  }
  const Vec2 w = unproject(camera, std::get<Vec2>(goal.target)) - config.base_position;
  double total = 0.0, rest = 0.0;
  for (double l : config.link_lengths) total += l;
  rest = total - config.link_lengths.front();
  const double inner = std::max(0.0, config.link_lengths.front() - rest);
  const double d = w.norm();
  if (d > total + 1e-12 || d < inner - 1e-12) throw std::domain_error("tip target is unreachable");
}

inline double goal_distance(const ChainConfig& config, const CameraModel& camera, const ChainState& state,
                            const GoalSpec& goal) {
  if (const auto* q = std::get_if<ChainState>(&goal.target)) return (state.q - q->q).norm();
  return (tip_pixel(config, camera, state) - std::get<Vec2>(goal.target)).norm();
}

enum class PlannerMode { oracle, noisy, adversarial };

inline std::string to_string(PlannerMode m) {
  switch (m) {
    case PlannerMode::oracle: return "oracle";
    case PlannerMode::noisy: return "noisy";
    case PlannerMode::adversarial: return "adversarial";
  }
  return "?";
}

inline PlannerMode parse_planner_mode(const std::string& s) {
  if (s == "oracle") return PlannerMode::oracle;
  if (s == "noisy") return PlannerMode::noisy;
  if (s == "adversarial") return PlannerMode::adversarial;
  throw std::invalid_argument("unknown planner mode: " + s);
}

/// Deterministic stand-in for a video world model. Frames carry the state
/// they were rendered from.
struct ScriptedPlanner {
  PlannerMode mode = PlannerMode::oracle;
  double step_cap = 0.04;        // delta_plan, per joint and frame
  double damping = 1.0;          // pixels^2, resolved-rate damping for tip goals
  double joint_noise = 0.05;     // noisy mode: std of the per-frame drift increment (rad)
  double adversarial_step = 0.36;  // adversarial mode: per-frame jump (rad)

  void validate(double delta_max) const {
    if (!(step_cap > 0.0 && step_cap <= delta_max)) throw std::invalid_argument("planner step cap must lie in (0, delta_max]");
    if (damping < 0.0 || joint_noise < 0.0 || adversarial_step < 0.0)
      throw std::invalid_argument("planner parameters must be non-negative");
  }
};

/// One resolved-rate step toward the goal, capped per joint at `cap` and kept
/// inside the joint limits.
inline ChainState resolved_rate_step(const ChainConfig& config, const CameraModel& camera, const ChainState& s,
                                     const GoalSpec& goal, double cap, double damping) {
  VecX dq;
  if (const auto* q = std::get_if<ChainState>(&goal.target)) {
    dq = q->q - s.q;
  } else {
    const Vec2 e = std::get<Vec2>(goal.target) - tip_pixel(config, camera, s);
    const Mat2X j = tip_pixel_jacobian(config, camera, s);
    dq = ridge_pinv(j, damping) * e;
  }
  const double m = dq.cwiseAbs().maxCoeff();
  if (m > cap) dq *= cap / m;  // uniform scaling keeps the direction
  return clamp_to_limits(config, ChainState{s.q + dq});
}

/// M future frames from `current`; mode-dependent. `rng` drives noisy and
/// adversarial frames only.
inline std::vector<Frame> plan(const ScriptedPlanner& planner, const ChainConfig& config, const CameraModel& camera,
                               const RenderStyle& style, const ChainState& current, const GoalSpec& goal, int m,
                               std::mt19937_64& rng) {
  check_goal(config, camera, goal);
  if (m < 1) throw std::invalid_argument("plan length must be >= 1");
  std::vector<Frame> frames;
  frames.reserve(static_cast<std::size_t>(m));
  ChainState path = current;
  VecX drift = VecX::Zero(current.q.size());
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  for (int k = 0; k < m; ++k) {
    ChainState shown;
    switch (planner.mode) {
      case PlannerMode::oracle:
        path = resolved_rate_step(config, camera, path, goal, planner.step_cap, planner.damping);
        shown = path;
        break;
      case PlannerMode::noisy:
        // drift accumulates along the horizon, so later frames are less reliable
        path = resolved_rate_step(config, camera, path, goal, planner.step_cap, planner.damping);
        for (Eigen::Index j = 0; j < drift.size(); ++j) drift[j] += planner.joint_noise * gauss(rng);
        shown = clamp_to_limits(config, ChainState{path.q + drift});
        break;
      case PlannerMode::adversarial: {
        VecX jump(current.q.size());
        for (Eigen::Index j = 0; j < jump.size(); ++j) jump[j] = coin(rng) ? planner.adversarial_step : -planner.adversarial_step;
        path = clamp_to_limits(config, ChainState{path.q + jump});
        shown = path;
        break;
      }
    }
    frames.push_back({render(config, camera, style, shown), shown});
  }
  return frames;
}

/// The environment: state changes only through step().
class Simulator {
 public:
  Simulator(ChainConfig config, CameraModel camera, RenderStyle style, ChainState start, double delta_max)
      : config_(std::move(config)), camera_(camera), style_(std::move(style)), state_(std::move(start)),
        delta_max_(delta_max) {
    config_.validate();
    if (!within_limits(config_, state_)) throw std::invalid_argument("start state violates joint limits");
  }

  const ChainState& state() const { return state_; }
  const ChainConfig& config() const { return config_; }
  const CameraModel& camera() const { return camera_; }
  const RenderStyle& style() const { return style_; }
  double delta_max() const { return delta_max_; }
  long actions_executed() const { return executed_; }

  Frame observe() const { return {render(config_, camera_, style_, state_), state_}; }

  void step(const Action& a) {
    if (a.delta_a.size() != state_.q.size()) throw std::invalid_argument("action dimension does not match chain");
    state_ = clamp_to_limits(config_, ChainState{state_.q + clamp_action(a, delta_max_).delta_a});
    ++executed_;
  }

 private:
  ChainConfig config_;
  CameraModel camera_;
  RenderStyle style_;
  ChainState state_;
  double delta_max_;
  long executed_ = 0;
};

/// Field and flow sources used to turn planned frames into actions.
struct Translator {
  FieldFn field;
  FlowFn flow;
  RidgeParams params;
  /// A recovered raw action beyond this multiple of delta_max means the
  /// planned frames imply motion no single action can produce.
  double infeasible_factor = 1.5;
};

/// Material-point flow between two frames that carry their states.
inline FlowFn exact_flow(const ChainConfig& config, const CameraModel& camera) {
  return [config, camera](const Frame& from, const Frame& to) {
    if (!from.state || !to.state) throw std::invalid_argument("exact flow needs frames with states");
    return oracle_flow_between(config, camera, *from.state, *to.state);
  };
}

inline Translator analytic_translator(const ChainConfig& config, const CameraModel& camera, double lambda = 1e-3) {
  Translator t;
  t.field = [config, camera](const Frame& frame, const std::vector<Pixel>& px) {
    if (!frame.state) throw std::invalid_argument("analytic field needs a frame state");
    return analytic_field_at(config, camera, *frame.state, px);
  };
  t.flow = exact_flow(config, camera);
  t.params = RidgeParams{lambda, true, false};
  return t;
}

/// Learned Jacobian field from pixels; flow still comes from the frame states.
inline Translator learned_translator(const PatchFieldModel& model, const ChainConfig& config,
                                     const CameraModel& camera, double lambda = 1e-3) {
  Translator t;
  t.field = [model](const Frame& frame, const std::vector<Pixel>& px) { return evaluate_field(model, frame.image, px); };
  t.flow = exact_flow(config, camera);
  t.params = RidgeParams{lambda, true, false};
  return t;
}

struct RolloutStep {
  int step = 0;  // index of the executed action, from 0
  int plan = 0;  // index of the plan that produced it
  VecX observed_q;
  VecX planned_q;  // state of the planned frame this action targets
  VecX action;
  VecX executed_q;
  double distance = 0.0;  // after execution
};

enum class FailureStage { none, planner, translator, budget };

inline std::string to_string(FailureStage s) {
  switch (s) {
    case FailureStage::none: return "none";
    case FailureStage::planner: return "planner";
    case FailureStage::translator: return "translator";
    case FailureStage::budget: return "budget";
  }
  return "?";
}

struct RolloutLog {
  std::vector<RolloutStep> steps;
  double initial_distance = 0.0;
  double final_distance = 0.0;
  bool success = false;
  double progress = 0.0;
  int plans_issued = 0;
  FailureStage failure = FailureStage::none;
  std::string failure_detail;

  int step_count() const { return static_cast<int>(steps.size()); }
};

inline double task_progress(double initial, double final_distance) {
  if (initial <= 0.0) return 1.0;
  return std::clamp(1.0 - final_distance / initial, 0.0, 1.0);
}

inline std::string join_vector(const VecX& v) {
  std::ostringstream s;
  s.precision(17);
  for (Eigen::Index i = 0; i < v.size(); ++i) s << (i ? ";" : "") << v[i];
  return s.str();
}

/// One line per executed action after a header row; vectors are
/// ';'-separated inside a field.
inline void write_rollout_csv(const RolloutLog& log, std::ostream& out) {
  out << "step,plan,observed_q,planned_q,action,executed_q,distance\n";
  out.precision(17);
  for (const auto& s : log.steps)
    out << s.step << ',' << s.plan << ',' << join_vector(s.observed_q) << ',' << join_vector(s.planned_q) << ','
        << join_vector(s.action) << ',' << join_vector(s.executed_q) << ',' << s.distance << '\n';
}

inline std::string rollout_summary_csv_header() {
  return "seed,success,progress,steps,plans,initial_distance,final_distance,failure";
}

inline std::string rollout_summary_csv(const RolloutLog& log, std::uint64_t seed) {
  std::ostringstream s;
  s.precision(17);
  s << seed << ',' << (log.success ? 1 : 0) << ',' << log.progress << ',' << log.step_count() << ','
    << log.plans_issued << ',' << log.initial_distance << ',' << log.final_distance << ',' << to_string(log.failure);
  return s.str();
}

/// plan -> translate the first K frames -> execute r*K actions -> replan,
/// until the goal is within tolerance or max_steps actions have run.
inline RolloutLog rollout(const ScriptedPlanner& planner, const Translator& translator, Simulator& sim,
                          const ControllerConfig& cfg, const GoalSpec& goal, std::uint64_t seed) {
  cfg.validate();
  planner.validate(sim.delta_max());
  check_goal(sim.config(), sim.camera(), goal);
  std::mt19937_64 rng(seed);
  RolloutLog log;
  log.initial_distance = goal_distance(sim.config(), sim.camera(), sim.state(), goal);
  log.final_distance = log.initial_distance;
  const auto finish = [&] {
    log.success = log.final_distance < goal.tolerance;
    log.progress = task_progress(log.initial_distance, log.final_distance);
    return log;
  };
  if (log.final_distance < goal.tolerance) return finish();

  const int r = cfg.actions_per_frame;
  int step = 0;
  while (step < cfg.max_steps) {
    const Frame now = sim.observe();
    std::vector<Frame> frames{now};
    std::vector<Frame> future;
    try {
      future = plan(planner, sim.config(), sim.camera(), sim.style(), sim.state(), goal, cfg.lookahead, rng);
    } catch (const std::exception& e) {
      log.failure = FailureStage::planner;
      log.failure_detail = e.what();
      return finish();
    }
    const int plan_index = log.plans_issued++;
    frames.insert(frames.end(), future.begin(), future.begin() + cfg.commit);

    ChunkTranslation chunk;
    try {
      FlowFn flow = translator.flow;
      if (cfg.replan_noise) {
        int pair = 0;
        flow = [&, pair](const Frame& a, const Frame& b) mutable {
          FlowNoiseModel nm = *cfg.replan_noise;
          nm.seed = nm.seed * 0x9E3779B97F4A7C15ULL + seed * 1000003ULL + static_cast<std::uint64_t>(plan_index) * 64 +
                    static_cast<std::uint64_t>(pair++);
          return add_noise(translator.flow(a, b), nm);
        };
      }
      chunk = translate_chunk(frames, translator.field, flow, translator.params, sim.delta_max());
    } catch (const std::exception& e) {
      log.failure = FailureStage::translator;
      log.failure_detail = e.what();
      return finish();
    }
    for (const auto& a : chunk.raw_actions) {
      if (!a.delta_a.allFinite()) {
        log.failure = FailureStage::translator;
        log.failure_detail = "non-finite recovered action";
        return finish();
      }
      if (a.delta_a.cwiseAbs().maxCoeff() > translator.infeasible_factor * sim.delta_max()) {
        log.failure = FailureStage::planner;
        log.failure_detail = "planned frames imply infeasible motion";
        return finish();
      }
    }

    for (int k = 0; k < cfg.commit; ++k) {
      const Action sub{chunk.actions[static_cast<std::size_t>(k)].delta_a / static_cast<double>(r)};
      for (int i = 0; i < r; ++i) {
        RolloutStep s;
        s.step = step;
        s.plan = plan_index;
        s.observed_q = sim.state().q;
        s.planned_q = frames[static_cast<std::size_t>(k) + 1].state->q;
        s.action = sub.delta_a;
        sim.step(sub);
        s.executed_q = sim.state().q;
        s.distance = goal_distance(sim.config(), sim.camera(), sim.state(), goal);
        log.final_distance = s.distance;
        log.steps.push_back(std::move(s));
        ++step;
        if (log.final_distance < goal.tolerance) return finish();
        if (step >= cfg.max_steps) {
          log.failure = FailureStage::budget;
          log.failure_detail = "max_steps reached";
          return finish();
        }
      }
    }
  }
  log.failure = FailureStage::budget;
  log.failure_detail = "max_steps reached";
  return finish();
}

/// A reaching task: start state and a tip-pixel goal rendered from a nearby
/// joint target, so the goal is reachable by construction. The goal starts at
/// least three tolerances away.
struct ReachingTask {
  ChainState start;
  ChainState target_state;
  GoalSpec goal;
};

inline ReachingTask make_reaching_task(const ChainConfig& config, const CameraModel& camera, std::uint64_t seed,
                                       double start_range = 1.2, double max_offset = 0.8, double tolerance = 2.0) {
  std::mt19937_64 rng(seed ^ 0x5DEECE66DULL);
  std::uniform_real_distribution<double> us(-start_range, start_range);
  std::uniform_real_distribution<double> uo(-max_offset, max_offset);
  const auto n = static_cast<Eigen::Index>(config.n_joints());
  ReachingTask t;
  t.start.q = VecX(n);
  t.target_state.q = VecX(n);
  // redraw goals that already sit inside the success ball
  for (int attempt = 0; attempt < 100; ++attempt) {
    for (Eigen::Index j = 0; j < n; ++j) t.start.q[j] = us(rng);
    t.start = clamp_to_limits(config, t.start);
    for (Eigen::Index j = 0; j < n; ++j) t.target_state.q[j] = t.start.q[j] + uo(rng);
    t.target_state = clamp_to_limits(config, t.target_state);
    t.goal = tip_goal(tip_pixel(config, camera, t.target_state), tolerance);
    if (goal_distance(config, camera, t.start, t.goal) >= 3.0 * tolerance) break;
  }
  return t;
}

struct ReachingSetup {
  ChainConfig chain;
  CameraModel camera;
  RenderStyle style;
  double delta_max = 0.12;
};

inline RolloutLog run_reaching_trial(const ReachingSetup& setup, const ScriptedPlanner& planner,
                                     const Translator& translator, const ControllerConfig& cfg,
                                     std::uint64_t task_seed, std::uint64_t noise_seed) {
  const ReachingTask task = make_reaching_task(setup.chain, setup.camera, task_seed);
  Simulator sim(setup.chain, setup.camera, setup.style, task.start, setup.delta_max);
  return rollout(planner, translator, sim, cfg, task.goal, noise_seed);
}

struct ChunkSweepRow {
  int commit = 0;
  int trials = 0;
  double success_rate = 0.0;
  double mean_progress = 0.0;
  double mean_plans = 0.0;
  double mean_steps = 0.0;
};

/// Rollouts for every K. Trial t uses the same task for every K; planner
/// noise seeds are disjoint across (K, trial).
inline std::vector<ChunkSweepRow> chunk_sweep(const ReachingSetup& setup, const ScriptedPlanner& planner,
                                              const Translator& translator, const ControllerConfig& base,
                                              const std::vector<int>& commits, int trials, std::uint64_t seed) {
  if (trials < 1) throw std::invalid_argument("chunk sweep needs at least one trial");
  std::vector<ChunkSweepRow> rows;
  for (int k : commits) {
    if (k < 1 || k > base.lookahead) throw std::invalid_argument("chunk sweep K must lie in [1, M]");
    ControllerConfig cfg = base;
    cfg.commit = k;
    ChunkSweepRow row;
    row.commit = k;
    row.trials = trials;
    for (int t = 0; t < trials; ++t) {
      const std::uint64_t task_seed = seed * 7919ULL + static_cast<std::uint64_t>(t);
      const std::uint64_t noise_seed = (seed << 20) ^ (static_cast<std::uint64_t>(k) << 40) ^ static_cast<std::uint64_t>(t);
      const RolloutLog log = run_reaching_trial(setup, planner, translator, cfg, task_seed, noise_seed);
      row.success_rate += log.success ? 1.0 : 0.0;
      row.mean_progress += log.progress;
      row.mean_plans += log.plans_issued;
      row.mean_steps += log.step_count();
    }
    row.success_rate /= trials;
    row.mean_progress /= trials;
    row.mean_plans /= trials;
    row.mean_steps /= trials;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace jidm
