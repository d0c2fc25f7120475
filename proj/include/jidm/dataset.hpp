// Self-play transition generation and the little-endian binary record format.
//
// Record file layout:
//   "JIDM" | version u32 | H u32 | W u32 | C u32 | n u32 | record_count u64
//   per record: o_t f32[H*W*C] | delta_a f32[n] | o_next f32[H*W*C]
//               flow f32[H*W*2] | valid u8[H*W] | occluded u8[H*W] | state_q f32[n]
// The manifest is a text sidecar in the shared config format.
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "jidm/config.hpp"
#include "jidm/flow.hpp"
#include "jidm/render.hpp"

namespace jidm {

inline constexpr std::uint32_t kDatasetVersion = 1;

struct TransitionRecord {
  Image o_t;
  Action delta_a;
  Image o_next;
  FlowField flow;  // carries valid and occluded masks
  VecX state_q;    // diagnostics only
  std::uint32_t episode = 0;
};

enum class ActionLaw { uniform, correlated };

struct DatasetManifest {
  std::uint64_t record_count = 0;
  ChainConfig chain;
  CameraModel camera;
  RenderStyle style;
  std::uint64_t seed = 0;
  std::uint32_t format_version = kDatasetVersion;
  double delta_max = 0.12;
  std::string action_law = "uniform";
  double rho = 0.0;
  std::vector<std::uint64_t> episode_offsets;  // byte offset of each episode's first record
  std::vector<std::uint64_t> episode_lengths;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<TransitionRecord> records;

  std::size_t size() const { return records.size(); }
  std::size_t n_joints() const { return manifest.chain.n_joints(); }
};

inline float to_f32(double v) { return static_cast<float>(v); }
inline double quantize(double v) { return static_cast<double>(static_cast<float>(v)); }
inline VecX quantize(const VecX& v) { return v.unaryExpr([](double x) { return quantize(x); }); }

inline void quantize_flow(FlowField& f) {
  for (double& v : f.vectors.data) v = quantize(v);
}

struct SelfPlayOptions {
  std::size_t episodes = 1;
  std::size_t steps_per_episode = 1;
  ActionLaw law = ActionLaw::uniform;
  double rho = 0.0;
  double delta_max = 0.12;
  std::uint64_t seed = 0;
  int jobs = 1;
  FlowNoiseModel noise{};  // applied to stored flow when nonzero
};

namespace detail {

inline std::mt19937_64 episode_rng(std::uint64_t seed, std::uint64_t episode) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(episode), static_cast<std::uint32_t>(episode >> 32), 0x4a49444du};
  return std::mt19937_64(seq);
}

inline std::vector<TransitionRecord> generate_episode(const ChainConfig& config, const CameraModel& camera,
                                                      const RenderStyle& style, const SelfPlayOptions& opt,
                                                      std::uint32_t episode) {
  auto rng = episode_rng(opt.seed, episode);
  const auto n = static_cast<Eigen::Index>(config.n_joints());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> step(-opt.delta_max, opt.delta_max);

  VecX q(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const auto& lim = config.joint_limits[static_cast<std::size_t>(j)];
    q[j] = lim.lo + (lim.hi - lim.lo) * unit(rng);
  }
  q = quantize(q);
  VecX u = VecX::Zero(n);
  const double innov = std::sqrt(std::max(0.0, 1.0 - opt.rho * opt.rho));

  std::vector<TransitionRecord> out;
  out.reserve(opt.steps_per_episode);
  Image current = render(config, camera, style, ChainState{q});
  for (std::size_t t = 0; t < opt.steps_per_episode; ++t) {
    VecX xi(n);
    for (Eigen::Index j = 0; j < n; ++j) xi[j] = step(rng);
    if (opt.law == ActionLaw::uniform) {
      u = xi;
    } else {
      u = opt.rho * u + innov * xi;
    }
    const VecX raw = u.cwiseMax(-opt.delta_max).cwiseMin(opt.delta_max);
    const VecX target = clamp_to_limits(config, ChainState{q + raw}).q;
    const VecX da = quantize(VecX(target - q));
    const ChainState from{q};
    const ChainState to{q + da};

    TransitionRecord rec;
    rec.o_t = current;
    rec.delta_a = Action{da};
    rec.o_next = render(config, camera, style, to);
    rec.flow = oracle_flow_between(config, camera, from, to);
    if (opt.noise.sigma_pixels > 0.0 || opt.noise.dropout_rate > 0.0) {
      FlowNoiseModel m = opt.noise;
      m.seed = opt.noise.seed ^ (static_cast<std::uint64_t>(episode) << 20) ^ t;
      rec.flow = add_noise(std::move(rec.flow), m);
    }
    quantize_flow(rec.flow);
    rec.state_q = q;
    rec.episode = episode;
    current = rec.o_next;
    q = quantize(to.q);
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace detail

inline std::size_t record_bytes(int h, int w, int c, std::size_t n) {
  const std::size_t px = static_cast<std::size_t>(h) * w;
  return 4 * (2 * px * c + 2 * px + 2 * n) + 2 * px;
}
inline constexpr std::size_t kDatasetHeaderBytes = 4 + 5 * 4 + 8;

/// Episodes start at uniform-random feasible states and take i.i.d. uniform
/// (or AR(1)) steps, clamped to the joint limits. Output is fixed by
/// (seed, episode index), independent of `jobs`.
inline Dataset generate_selfplay(const ChainConfig& config, const CameraModel& camera, const RenderStyle& style,
                                 const SelfPlayOptions& opt) {
  if (opt.episodes < 1 || opt.steps_per_episode < 1) throw std::invalid_argument("episode and step counts must be >= 1");
  config.validate();
  camera.validate();
  style.validate(config.n_joints());

  std::vector<std::vector<TransitionRecord>> per_episode(opt.episodes);
  const int jobs = std::max(1, std::min<int>(opt.jobs, static_cast<int>(opt.episodes)));
  if (jobs == 1) {
    for (std::size_t e = 0; e < opt.episodes; ++e)
      per_episode[e] = detail::generate_episode(config, camera, style, opt, static_cast<std::uint32_t>(e));
  } else {
    std::vector<std::thread> workers;
    for (int w = 0; w < jobs; ++w) {
      workers.emplace_back([&, w] {
        for (std::size_t e = static_cast<std::size_t>(w); e < opt.episodes; e += static_cast<std::size_t>(jobs))
          per_episode[e] = detail::generate_episode(config, camera, style, opt, static_cast<std::uint32_t>(e));
      });
    }
    for (auto& t : workers) t.join();
  }

  Dataset ds;
  ds.manifest.chain = config;
  ds.manifest.camera = camera;
  ds.manifest.style = style;
  ds.manifest.seed = opt.seed;
  ds.manifest.delta_max = opt.delta_max;
  ds.manifest.action_law = opt.law == ActionLaw::uniform ? "uniform" : "correlated";
  ds.manifest.rho = opt.rho;
  const std::size_t rb = record_bytes(camera.height, camera.width, style.channels, config.n_joints());
  std::uint64_t offset = kDatasetHeaderBytes;
  for (auto& ep : per_episode) {
    ds.manifest.episode_offsets.push_back(offset);
    ds.manifest.episode_lengths.push_back(ep.size());
    offset += ep.size() * rb;
    for (auto& r : ep) ds.records.push_back(std::move(r));
  }
  ds.manifest.record_count = ds.records.size();
  return ds;
}

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

/// Episode-level split: no episode contributes to both sides.
inline SplitIndices split_indices(const Dataset& ds, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw std::invalid_argument("train fraction must lie in (0,1)");
  std::uint32_t max_ep = 0;
  for (const auto& r : ds.records) max_ep = std::max(max_ep, r.episode);
  std::vector<std::uint32_t> episodes;
  {
    std::vector<bool> seen(ds.records.empty() ? 0 : max_ep + 1, false);
    for (const auto& r : ds.records)
      if (!seen[r.episode]) {
        seen[r.episode] = true;
        episodes.push_back(r.episode);
      }
  }
  std::sort(episodes.begin(), episodes.end());
  std::mt19937_64 rng(seed);
  for (std::size_t i = episodes.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(episodes[i - 1], episodes[pick(rng)]);
  }
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(episodes.size())));
  if (n_train == 0 || n_train >= episodes.size()) throw std::invalid_argument("split leaves one side empty");
  std::vector<bool> is_train(max_ep + 1, false);
  for (std::size_t i = 0; i < n_train; ++i) is_train[episodes[i]] = true;
  SplitIndices s;
  for (std::size_t i = 0; i < ds.records.size(); ++i) (is_train[ds.records[i].episode] ? s.train : s.val).push_back(i);
  return s;
}

inline Dataset subset(const Dataset& ds, const std::vector<std::size_t>& idx) {
  Dataset out;
  out.manifest = ds.manifest;
  out.manifest.episode_offsets.clear();
  out.manifest.episode_lengths.clear();
  const std::size_t rb = record_bytes(ds.manifest.camera.height, ds.manifest.camera.width, ds.manifest.style.channels,
                                      ds.n_joints());
  std::uint64_t offset = kDatasetHeaderBytes;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto& r = ds.records[idx[k]];
    if (k == 0 || r.episode != ds.records[idx[k - 1]].episode) {
      out.manifest.episode_offsets.push_back(offset);
      out.manifest.episode_lengths.push_back(0);
    }
    out.manifest.episode_lengths.back() += 1;
    offset += rb;
    out.records.push_back(r);
  }
  out.manifest.record_count = out.records.size();
  return out;
}

inline std::pair<Dataset, Dataset> split(const Dataset& ds, double train_fraction, std::uint64_t seed) {
  const SplitIndices s = split_indices(ds, train_fraction, seed);
  return {subset(ds, s.train), subset(ds, s.val)};
}

// ---------------------------------------------------------------------------
// Binary persistence

namespace io {

template <typename T>
void put(std::ostream& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  out.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  unsigned char b[sizeof(T)];
  in.read(reinterpret_cast<char*>(b), sizeof(T));
  if (!in) throw std::runtime_error("unexpected end of file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  T v;
  std::memcpy(&v, b, sizeof(T));
  return v;
}

inline void put_magic(std::ostream& out, const char (&magic)[5]) { out.write(magic, 4); }
inline void expect_magic(std::istream& in, const char (&magic)[5]) {
  char b[4];
  in.read(b, 4);
  if (!in || std::memcmp(b, magic, 4) != 0) throw std::runtime_error(std::string("bad magic, expected ") + magic);
}

}  // namespace io

inline void write_records(const Dataset& ds, const std::string& path) {
  const auto& cam = ds.manifest.camera;
  const int ch = ds.manifest.style.channels;
  const auto n = static_cast<std::uint32_t>(ds.n_joints());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  io::put_magic(out, "JIDM");
  io::put<std::uint32_t>(out, ds.manifest.format_version);
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(cam.height));
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(cam.width));
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(ch));
  io::put<std::uint32_t>(out, n);
  io::put<std::uint64_t>(out, ds.records.size());
  for (const auto& r : ds.records) {
    if (!r.o_t.same_shape(cam.height, cam.width) || r.o_t.channels != ch || !r.o_next.same_shape(cam.height, cam.width))
      throw std::runtime_error("record image shape disagrees with manifest");
    for (float v : r.o_t.data) io::put<float>(out, v);
    for (Eigen::Index j = 0; j < r.delta_a.delta_a.size(); ++j) io::put<float>(out, to_f32(r.delta_a.delta_a[j]));
    for (float v : r.o_next.data) io::put<float>(out, v);
    for (double v : r.flow.vectors.data) io::put<float>(out, to_f32(v));
    for (auto v : r.flow.valid.data) io::put<std::uint8_t>(out, v);
    for (auto v : r.flow.occluded.data) io::put<std::uint8_t>(out, v);
    for (Eigen::Index j = 0; j < r.state_q.size(); ++j) io::put<float>(out, to_f32(r.state_q[j]));
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline TextConfig manifest_to_config(const DatasetManifest& m) {
  TextConfig cfg;
  cfg.set("manifest", "record_count", m.record_count);
  cfg.set("manifest", "format_version", static_cast<int>(m.format_version));
  cfg.set("manifest", "seed", m.seed);
  cfg.set("manifest", "delta_max", m.delta_max);
  cfg.set("manifest", "action_law", m.action_law);
  cfg.set("manifest", "rho", m.rho);
  std::string offs, lens;
  for (std::size_t i = 0; i < m.episode_offsets.size(); ++i) {
    if (i) {
      offs += ", ";
      lens += ", ";
    }
    offs += std::to_string(m.episode_offsets[i]);
    lens += std::to_string(m.episode_lengths[i]);
  }
  cfg.set("manifest", "episode_offsets", offs);
  cfg.set("manifest", "episode_lengths", lens);
  write_chain(cfg, m.chain);
  write_camera(cfg, m.camera);
  write_style(cfg, m.style);
  return cfg;
}

inline std::vector<std::uint64_t> parse_u64_list(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    std::uint64_t v = 0;
    auto res = std::from_chars(item.data(), item.data() + item.size(), v);
    if (res.ec != std::errc() || res.ptr != item.data() + item.size()) throw ConfigError("bad integer list entry " + item);
    out.push_back(v);
  }
  return out;
}

inline DatasetManifest manifest_from_config(const TextConfig& cfg) {
  DatasetManifest m;
  m.record_count = cfg.get_u64("manifest", "record_count");
  m.format_version = static_cast<std::uint32_t>(cfg.get_int("manifest", "format_version"));
  m.seed = cfg.get_u64("manifest", "seed");
  m.delta_max = cfg.get_double("manifest", "delta_max");
  m.action_law = cfg.get_string("manifest", "action_law");
  m.rho = cfg.get_double("manifest", "rho");
  m.episode_offsets = parse_u64_list(cfg.get_string("manifest", "episode_offsets"));
  m.episode_lengths = parse_u64_list(cfg.get_string("manifest", "episode_lengths"));
  m.chain = read_chain(cfg);
  m.camera = read_camera(cfg);
  m.style = read_style(cfg);
  if (m.episode_offsets.size() != m.episode_lengths.size())
    throw ConfigError("manifest episode offsets and lengths disagree");
  for (std::size_t i = 1; i < m.episode_offsets.size(); ++i)
    if (m.episode_offsets[i] <= m.episode_offsets[i - 1]) throw ConfigError("manifest offsets must increase strictly");
  std::uint64_t total = 0;
  for (auto l : m.episode_lengths) total += l;
  if (total != m.record_count) throw ConfigError("manifest episode lengths do not sum to record_count");
  return m;
}

/// Writes `<stem>.bin` and `<stem>.manifest`.
inline void save_dataset(const Dataset& ds, const std::string& stem) {
  write_records(ds, stem + ".bin");
  manifest_to_config(ds.manifest).save(stem + ".manifest");
}

inline Dataset load_dataset(const std::string& stem) {
  Dataset ds;
  ds.manifest = manifest_from_config(TextConfig::load(stem + ".manifest"));
  std::ifstream in(stem + ".bin", std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + stem + ".bin");
  io::expect_magic(in, "JIDM");
  const auto version = io::get<std::uint32_t>(in);
  if (version != kDatasetVersion) throw std::runtime_error("unsupported dataset version " + std::to_string(version));
  const auto h = static_cast<int>(io::get<std::uint32_t>(in));
  const auto w = static_cast<int>(io::get<std::uint32_t>(in));
  const auto c = static_cast<int>(io::get<std::uint32_t>(in));
  const auto n = static_cast<Eigen::Index>(io::get<std::uint32_t>(in));
  const auto count = io::get<std::uint64_t>(in);
  const auto& cam = ds.manifest.camera;
  if (h != cam.height || w != cam.width || c != ds.manifest.style.channels ||
      n != static_cast<Eigen::Index>(ds.manifest.chain.n_joints()) || count != ds.manifest.record_count)
    throw std::runtime_error("dataset header disagrees with manifest");

  std::vector<std::uint32_t> episode_of(count, 0);
  {
    std::size_t k = 0;
    for (std::size_t e = 0; e < ds.manifest.episode_lengths.size(); ++e)
      for (std::uint64_t i = 0; i < ds.manifest.episode_lengths[e]; ++i) episode_of[k++] = static_cast<std::uint32_t>(e);
  }
  ds.records.reserve(count);
  for (std::uint64_t k = 0; k < count; ++k) {
    TransitionRecord r;
    r.o_t = Image(h, w, c);
    for (float& v : r.o_t.data) v = io::get<float>(in);
    r.delta_a.delta_a.resize(n);
    for (Eigen::Index j = 0; j < n; ++j) r.delta_a.delta_a[j] = io::get<float>(in);
    r.o_next = Image(h, w, c);
    for (float& v : r.o_next.data) v = io::get<float>(in);
    r.flow = FlowField(h, w);
    for (double& v : r.flow.vectors.data) v = io::get<float>(in);
    for (auto& v : r.flow.valid.data) v = io::get<std::uint8_t>(in);
    for (auto& v : r.flow.occluded.data) v = io::get<std::uint8_t>(in);
    r.state_q.resize(n);
    for (Eigen::Index j = 0; j < n; ++j) r.state_q[j] = io::get<float>(in);
    r.episode = episode_of[k];
    ds.records.push_back(std::move(r));
  }
  return ds;
}

}  // namespace jidm
