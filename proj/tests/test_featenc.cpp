#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.hpp"
#include "sparsepat/core/error.hpp"
#include "sparsepat/core/rng.hpp"
#include "sparsepat/featenc.hpp"

using namespace sparsepat;
using namespace sparsepat::featenc;
using testsupport::TempDir;

namespace {

SparseRow row(std::vector<std::uint32_t> idx, std::vector<double> val) {
  SparseRow r;
  r.index = std::move(idx);
  r.value = std::move(val);
  return r;
}

double l2(const FeatureVector& f) {
  double s = 0.0;
  for (double v : f.value) s += v * v;
  return std::sqrt(s);
}

}  // namespace

TEST(NearestRank, Examples) {
  EXPECT_DOUBLE_EQ(nearest_rank({1, 2, 3, 4}, 75), 3.0);
  EXPECT_DOUBLE_EQ(nearest_rank({4, 1, 3, 2}, 75), 3.0);
  EXPECT_DOUBLE_EQ(nearest_rank({4, 1, 3, 2}, 100), 4.0);
  EXPECT_DOUBLE_EQ(nearest_rank({4, 1, 3, 2}, 1), 1.0);
  EXPECT_DOUBLE_EQ(nearest_rank(std::vector<double>(40, 0.5), 75), 0.5);
  EXPECT_THROW(nearest_rank({}, 75), std::invalid_argument);
  EXPECT_THROW(nearest_rank({1.0}, 0), std::invalid_argument);
}

TEST(Thresholds, PositiveBasisNeedsEnoughSamples) {
  std::vector<SparseRow> acts;
  for (int i = 1; i <= 19; ++i) acts.push_back(row({0}, {static_cast<double>(i)}));
  for (int i = 0; i < 50; ++i) acts.push_back(row({}, {}));
  auto tau = compute_pattern_thresholds(acts, 2);
  EXPECT_EQ(tau, (std::vector<double>{0.0, 0.0}));

  acts.push_back(row({0}, {20.0}));
  tau = compute_pattern_thresholds(acts, 2);
  EXPECT_DOUBLE_EQ(tau[0], 15.0);  // ceil(0.75 * 20) = 15th smallest
  EXPECT_DOUBLE_EQ(tau[1], 0.0);
}

TEST(Thresholds, AllBasisCountsZeros) {
  std::vector<SparseRow> acts;
  for (int i = 1; i <= 30; ++i) acts.push_back(row({0}, {static_cast<double>(i)}));
  for (int i = 0; i < 90; ++i) acts.push_back(row({}, {}));
  ThresholdConfig cfg;
  cfg.basis = ThresholdBasis::all;
  // 120 samples, rank 90: all zeros below it
  EXPECT_DOUBLE_EQ(compute_pattern_thresholds(acts, 1, cfg)[0], 0.0);
  cfg.percentile = 90;  // rank 108 -> 18th positive
  EXPECT_DOUBLE_EQ(compute_pattern_thresholds(acts, 1, cfg)[0], 18.0);
  EXPECT_EQ(threshold_basis_from_string("all"), ThresholdBasis::all);
  EXPECT_THROW(threshold_basis_from_string("median"), ConfigError);
}

TEST(EncodeRow, Examples) {
  const std::vector<double> tau(5, 0.0);
  auto e = encode_row("r", row({}, {}), tau);
  EXPECT_EQ(e.nnz(), 0u);
  EXPECT_FALSE(e.normalized);

  e = encode_row("r", row({3}, {0.2}), tau);
  ASSERT_EQ(e.nnz(), 1u);
  EXPECT_EQ(e.index[0], 3u);
  EXPECT_DOUBLE_EQ(e.value[0], 1.0);

  e = encode_row("r", row({0, 1, 2}, {3.0, 4.0, 0.5}), {0.0, 0.0, 1.0, 0, 0});
  ASSERT_EQ(e.nnz(), 2u);
  EXPECT_DOUBLE_EQ(e.value[0], 0.6);
  EXPECT_DOUBLE_EQ(e.value[1], 0.8);
}

TEST(EncodeRow, TiesKeepLowerColumn) {
  const std::vector<double> tau(6, 0.0);
  const auto e = encode_row("r", row({0, 1, 2, 3, 4, 5}, {1, 2, 2, 2, 1, 0.5}), tau, 2);
  EXPECT_EQ(e.index, (std::vector<std::uint32_t>{1, 2}));
}

TEST(EncodeRow, FuzzInvariants) {
  Rng rng(21);
  const std::size_t P = 200;
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<double> tau(P);
    for (auto& t : tau) t = rng.uniform(0.0, 0.5);
    SparseRow a;
    for (std::uint32_t p = 0; p < P; ++p) {
      if (rng.uniform() < 0.4) {
        a.index.push_back(p);
        a.value.push_back(rng.uniform(0.01, 3.0));
      }
    }
    const std::size_t K = 1 + rng.below(40);
    const auto e = encode_row("r", a, tau, K);
    ASSERT_LE(e.nnz(), K);
    ASSERT_TRUE(std::is_sorted(e.index.begin(), e.index.end()));
    if (e.nnz() > 0) {
      ASSERT_NEAR(l2(e), 1.0, 1e-12);
    }
    for (std::size_t t = 0; t < e.nnz(); ++t) ASSERT_GT(e.value[t], 0.0);

    // scale invariance with thresholds scaled alike
    SparseRow a2 = a;
    for (auto& v : a2.value) v *= 3.0;
    auto tau2 = tau;
    for (auto& t : tau2) t *= 3.0;
    const auto e2 = encode_row("r", a2, tau2, K);
    ASSERT_EQ(e2.index, e.index);
    for (std::size_t t = 0; t < e.nnz(); ++t) ASSERT_NEAR(e2.value[t], e.value[t], 1e-12);

    // raising thresholds never adds columns when K is not binding
    auto hi = tau;
    for (auto& t : hi) t += 0.3;
    const auto loose = encode_row("r", a, tau, P);
    const auto tight = encode_row("r", a, hi, P);
    ASSERT_LE(tight.nnz(), loose.nnz());
    for (auto c : tight.index) {
      ASSERT_TRUE(std::binary_search(loose.index.begin(), loose.index.end(), c));
    }
  }
}

TEST(Features, SaveLoadRoundTrip) {
  TempDir dir("fe");
  FeatureMatrix fm;
  fm.pattern_ids = {"p00001", "p00002", "p00003"};
  fm.k_active = 2;
  fm.rows.push_back(encode_row("a", row({0, 2}, {0.3, 0.7}), {0, 0, 0}, 2));
  fm.rows.push_back(encode_row("b", row({}, {}), {0, 0, 0}, 2));
  fm.rows.push_back(encode_row("c", row({1}, {1.0 / 3.0}), {0, 0, 0}, 2));
  const FeaturePaths paths{dir.path() / "f.bin", dir.path() / "f.json"};
  save_features(paths, fm);
  const auto back = load_features(paths);
  EXPECT_EQ(back.pattern_ids, fm.pattern_ids);
  EXPECT_EQ(back.k_active, 2u);
  ASSERT_EQ(back.rows.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.rows[i].record_id, fm.rows[i].record_id);
    EXPECT_EQ(back.rows[i].index, fm.rows[i].index);
    EXPECT_EQ(back.rows[i].value, fm.rows[i].value);
    EXPECT_EQ(back.rows[i].normalized, fm.rows[i].normalized);
  }
  EXPECT_NE(back.find("c"), nullptr);
  EXPECT_EQ(back.find("zzz"), nullptr);
}

TEST(Features, ThresholdsJsonReorders) {
  PatternSet ps;
  ps.pattern_ids = {"p00002", "p00005"};
  ps.members = {{{0, 1}}, {{0, 2}}};
  const auto j = thresholds_to_json(ps, {0.25, 0.5}, {});
  PatternSet rev;
  rev.pattern_ids = {"p00005", "p00002"};
  rev.members = {{{0, 2}}, {{0, 1}}};
  EXPECT_EQ(thresholds_from_json(j, rev), (std::vector<double>{0.5, 0.25}));
  rev.pattern_ids[0] = "p00009";
  EXPECT_THROW(thresholds_from_json(j, rev), ConfigError);
}

TEST(Features, NoAcceptedPatternsIsAnError) {
  TempDir dir("fe");
  auto reg = registry::Registry::create(dir.path(), {testsupport::make_pattern(1),
                                                      testsupport::make_pattern(2)});
  EXPECT_THROW(accepted_patterns(reg), ConfigError);
  reg.record_verdict("p00002", registry::Verdict::accept, "rev", "");
  const auto ps = accepted_patterns(reg);
  EXPECT_EQ(ps.pattern_ids, (std::vector<std::string>{"p00002"}));
}
