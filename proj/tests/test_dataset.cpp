#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include <gtest/gtest.h>

#include "jidm/dataset.hpp"

using namespace jidm;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  ChainConfig chain = default_chain(3);
  CameraModel camera = fit_camera(chain, 32, 32);
  RenderStyle style = default_style(3);
};

std::string tmp_stem(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "jidm_dataset_tests";
  fs::create_directories(dir);
  return (dir / name).string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

SelfPlayOptions opts(std::size_t episodes, std::size_t steps, std::uint64_t seed) {
  SelfPlayOptions o;
  o.episodes = episodes;
  o.steps_per_episode = steps;
  o.seed = seed;
  return o;
}

}  // namespace

TEST(SelfPlay, OneEpisodeOneStepGivesOneRecord) {
  Fixture f;
  const Dataset ds = generate_selfplay(f.chain, f.camera, f.style, opts(1, 1, 0));
  EXPECT_EQ(ds.size(), 1u);
  EXPECT_EQ(ds.manifest.record_count, 1u);
}

TEST(SelfPlay, RecordInvariants) {
  Fixture f;
  const Dataset ds = generate_selfplay(f.chain, f.camera, f.style, opts(3, 5, 1));
  for (const auto& r : ds.records) {
    EXPECT_LE(r.delta_a.delta_a.cwiseAbs().maxCoeff(), 0.12);
    const Mask fg = foreground_mask(f.chain, f.camera, f.style, {r.state_q});
    for (std::size_t k = 0; k < fg.data.size(); ++k) {
      if (r.flow.valid.data[k]) {
        EXPECT_TRUE(fg.data[k]);
      }
    }
    EXPECT_TRUE(within_limits(f.chain, {r.state_q + r.delta_a.delta_a}));
  }
}

TEST(SelfPlay, ConsecutiveRecordsChainTogether) {
  Fixture f;
  const Dataset ds = generate_selfplay(f.chain, f.camera, f.style, opts(2, 4, 2));
  for (std::size_t i = 1; i < ds.size(); ++i) {
    if (ds.records[i].episode != ds.records[i - 1].episode) continue;
    EXPECT_EQ(ds.records[i].o_t, ds.records[i - 1].o_next);
  }
}

TEST(SelfPlay, StoredFlowMatchesRecomputedOracle) {
  Fixture f;
  const Dataset ds = generate_selfplay(f.chain, f.camera, f.style, opts(2, 3, 3));
  for (const auto& r : ds.records) {
    const FlowField again = oracle_flow(f.chain, f.camera, f.style, {r.state_q}, r.delta_a);
    EXPECT_EQ(again.valid, r.flow.valid);
    for (std::size_t k = 0; k < again.vectors.data.size(); ++k)
      EXPECT_NEAR(again.vectors.data[k], r.flow.vectors.data[k], 1e-6 * (1.0 + std::abs(again.vectors.data[k])));
  }
}

TEST(SelfPlay, UniformActionMeanIsZero) {
  ChainConfig chain = default_chain(2);
  const CameraModel cam = fit_camera(chain, 16, 16);
  SelfPlayOptions o = opts(100, 100, 4);
  const Dataset ds = generate_selfplay(chain, cam, default_style(2), o);
  ASSERT_EQ(ds.size(), 10000u);
  // joint-limit clamping is symmetric in law, so the mean stays at zero
  const double sigma = 0.12 / std::sqrt(3.0);
  for (int j = 0; j < 2; ++j) {
    double mean = 0.0;
    for (const auto& r : ds.records) mean += r.delta_a.delta_a[j];
    mean /= static_cast<double>(ds.size());
    EXPECT_LT(std::abs(mean), 3.0 * sigma / std::sqrt(static_cast<double>(ds.size())));
  }
}

TEST(SelfPlay, CorrelatedLawIsSmooth) {
  Fixture f;
  SelfPlayOptions o = opts(4, 50, 5);
  o.law = ActionLaw::correlated;
  o.rho = 0.9;
  const Dataset ds = generate_selfplay(f.chain, f.camera, f.style, o);
  double same = 0.0, count = 0.0;
  for (std::size_t i = 1; i < ds.size(); ++i) {
    if (ds.records[i].episode != ds.records[i - 1].episode) continue;
    same += ds.records[i].delta_a.delta_a.dot(ds.records[i - 1].delta_a.delta_a);
    count += 1.0;
  }
  EXPECT_GT(same / count, 0.0);
}

TEST(SelfPlay, ParallelGenerationIsIdentical) {
  Fixture f;
  SelfPlayOptions o = opts(5, 3, 6);
  const Dataset a = generate_selfplay(f.chain, f.camera, f.style, o);
  o.jobs = 3;
  const Dataset b = generate_selfplay(f.chain, f.camera, f.style, o);
  const auto sa = tmp_stem("par_a"), sb = tmp_stem("par_b");
  save_dataset(a, sa);
  save_dataset(b, sb);
  EXPECT_EQ(slurp(sa + ".bin"), slurp(sb + ".bin"));
  EXPECT_EQ(slurp(sa + ".manifest"), slurp(sb + ".manifest"));
}

TEST(SelfPlay, SameSeedByteIdenticalDifferentSeedNot) {
  Fixture f;
  const auto s1 = tmp_stem("seed_1"), s2 = tmp_stem("seed_2"), s3 = tmp_stem("seed_3");
  save_dataset(generate_selfplay(f.chain, f.camera, f.style, opts(2, 2, 7)), s1);
  save_dataset(generate_selfplay(f.chain, f.camera, f.style, opts(2, 2, 7)), s2);
  save_dataset(generate_selfplay(f.chain, f.camera, f.style, opts(2, 2, 8)), s3);
  EXPECT_EQ(slurp(s1 + ".bin"), slurp(s2 + ".bin"));
  EXPECT_NE(slurp(s1 + ".bin"), slurp(s3 + ".bin"));
}

TEST(Persistence, RoundTripIsBitExact) {
  Fixture f;
  f.style.channels = 3;
  SelfPlayOptions o = opts(3, 2, 9);
  o.noise = {0.25, 0.02, 1};
  const Dataset ds = generate_selfplay(f.chain, f.camera, f.style, o);
  const auto stem = tmp_stem("roundtrip");
  save_dataset(ds, stem);
  const Dataset back = load_dataset(stem);
  ASSERT_EQ(back.size(), ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& a = ds.records[i];
    const auto& b = back.records[i];
    EXPECT_EQ(a.o_t, b.o_t);
    EXPECT_EQ(a.o_next, b.o_next);
    EXPECT_EQ(a.delta_a.delta_a, b.delta_a.delta_a);
    EXPECT_EQ(a.flow, b.flow);
    EXPECT_EQ(a.state_q, b.state_q);
    EXPECT_EQ(a.episode, b.episode);
  }
  EXPECT_EQ(back.manifest.episode_offsets, ds.manifest.episode_offsets);
  EXPECT_EQ(back.manifest.chain.link_lengths, ds.manifest.chain.link_lengths);
  EXPECT_EQ(back.manifest.camera.scale, ds.manifest.camera.scale);
  // writing what was read reproduces the same bytes
  const auto again = tmp_stem("roundtrip_again");
  save_dataset(back, again);
  EXPECT_EQ(slurp(stem + ".bin"), slurp(again + ".bin"));
  EXPECT_EQ(slurp(stem + ".manifest"), slurp(again + ".manifest"));
}

TEST(Persistence, HeaderLayout) {
  Fixture f;
  const Dataset ds = generate_selfplay(f.chain, f.camera, f.style, opts(2, 3, 10));
  const auto stem = tmp_stem("layout");
  save_dataset(ds, stem);
  const std::string bytes = slurp(stem + ".bin");
  ASSERT_GE(bytes.size(), kDatasetHeaderBytes);
  EXPECT_EQ(bytes.substr(0, 4), "JIDM");
  EXPECT_EQ(bytes.size(), kDatasetHeaderBytes + ds.size() * record_bytes(32, 32, 1, 3));
  // offsets point at each episode's first record
  EXPECT_EQ(ds.manifest.episode_offsets[0], kDatasetHeaderBytes);
  EXPECT_EQ(ds.manifest.episode_offsets[1], kDatasetHeaderBytes + 3 * record_bytes(32, 32, 1, 3));
}

TEST(Persistence, CorruptManifestRejected) {
  Fixture f;
  const Dataset ds = generate_selfplay(f.chain, f.camera, f.style, opts(2, 1, 11));
  const auto stem = tmp_stem("corrupt");
  save_dataset(ds, stem);
  TextConfig cfg = TextConfig::load(stem + ".manifest");
  cfg.set("manifest", "record_count", std::uint64_t{3});
  cfg.save(stem + ".manifest");
  EXPECT_THROW(load_dataset(stem), std::exception);
}

TEST(Split, FiveFiveOnTenEpisodes) {
  Fixture f;
  const Dataset ds = generate_selfplay(f.chain, f.camera, f.style, opts(10, 2, 12));
  const auto s = split_indices(ds, 0.5, 3);
  std::set<std::uint32_t> tr, va;
  for (auto i : s.train) tr.insert(ds.records[i].episode);
  for (auto i : s.val) va.insert(ds.records[i].episode);
  EXPECT_EQ(tr.size(), 5u);
  EXPECT_EQ(va.size(), 5u);
  for (auto e : tr) EXPECT_EQ(va.count(e), 0u);
  std::vector<std::size_t> all = s.train;
  all.insert(all.end(), s.val.begin(), s.val.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < all.size(); ++i) EXPECT_EQ(all[i], i);
  const auto again = split_indices(ds, 0.5, 3);
  EXPECT_EQ(again.train, s.train);
  EXPECT_EQ(again.val, s.val);
}

TEST(Split, DegenerateSplitThrows) {
  Fixture f;
  const Dataset ds = generate_selfplay(f.chain, f.camera, f.style, opts(2, 2, 13));
  EXPECT_THROW(split_indices(ds, 0.1, 0), std::invalid_argument);
  EXPECT_THROW(split_indices(ds, 1.0, 0), std::invalid_argument);
  const auto [train, val] = split(ds, 0.5, 0);
  EXPECT_EQ(train.size() + val.size(), ds.size());
  EXPECT_EQ(train.manifest.record_count, train.size());
}
