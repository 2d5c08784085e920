#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "oracles.hpp"

using namespace ifnd;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an ifnd::Error";
  return ErrorCode::InvalidArgument;
}

std::vector<std::int64_t> random_labels(std::size_t n, std::int64_t lo, std::int64_t hi,
                                        std::mt19937_64& rng) {
  std::uniform_int_distribution<std::int64_t> pick(lo, hi);
  std::vector<std::int64_t> out(n);
  for (auto& v : out) v = pick(rng);
  return out;
}

EmbeddingMatrix gaussian_cloud(const std::vector<std::int64_t>& labels, double sep, double noise,
                               std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, noise);
  oracle::Rows rows;
  for (auto l : labels) rows.push_back({(l == 0 ? -sep : sep) + g(rng), g(rng), g(rng)});
  return EmbeddingMatrix::from_rows(rows);
}

}  // namespace

TEST(PairRates, SixSampleHandCase) {
  // true   0 0 0 1 1 2   -> 4 positive pairs, 11 negative pairs
  // found  5 5 -1 5 7 7  -> (0,1) hit; (0,3),(1,3),(4,5) are negatives merged
  const LabeledSet set({0, 0, 0, 1, 1, 2}, {5, 5, -1, 5, 7, 7});
  EXPECT_EQ(mtpr(set).pairs, 4u);
  EXPECT_DOUBLE_EQ(mtpr(set).value, 1.0 / 4.0);
  EXPECT_EQ(mtnr(set).pairs, 11u);
  EXPECT_DOUBLE_EQ(mtnr(set).value, 8.0 / 11.0);
}

TEST(PairRates, MatchPairEnumerationExactly) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + trial % 120;
    const auto truth = random_labels(n, 0, 1 + trial % 9, rng);
    const auto found = random_labels(n, -1, trial % 6, rng);
    const LabeledSet set(truth, found);
    const auto want = oracle::pair_rates(truth, found);
    EXPECT_EQ(mtpr(set).value, want.mtpr);
    EXPECT_EQ(mtnr(set).value, want.mtnr);
  }
}

TEST(PairRates, Boundaries) {
  const LabeledSet singles({0, 1, 1, 2, 0}, std::vector<std::int64_t>(5, kSingleton));
  EXPECT_EQ(mtpr(singles).value, 0.0);
  EXPECT_EQ(mtnr(singles).value, 1.0);
  const LabeledSet perfect({0, 1, 1, 2, 0}, {4, 8, 8, 9, 4});
  EXPECT_EQ(mtpr(perfect).value, 1.0);
  EXPECT_EQ(mtnr(perfect).value, 1.0);
  const LabeledSet merged({0, 1, 1, 2}, {3, 3, 3, 3});
  EXPECT_EQ(mtnr(merged).value, 0.0);
  EXPECT_EQ(mtpr(merged).value, 1.0);
}

TEST(PairRates, FallbacksWhenPairsAreMissing) {
  const LabeledSet distinct({0, 1, 2}, {0, 0, 0});
  EXPECT_TRUE(mtpr(distinct).no_pairs());
  EXPECT_EQ(mtpr(distinct).value, 0.0);
  const LabeledSet one_class({3, 3, 3}, {0, kSingleton, 1});
  EXPECT_TRUE(mtnr(one_class).no_pairs());
  EXPECT_EQ(mtnr(one_class).value, 1.0);
}

TEST(PairRates, InvariantToRelabelingDetections) {
  std::mt19937_64 rng(32);
  const auto truth = random_labels(60, 0, 4, rng);
  const auto found = random_labels(60, -1, 5, rng);
  std::vector<std::int64_t> renamed(found);
  for (auto& v : renamed) if (v != kSingleton) v = 100 - 7 * v;
  EXPECT_EQ(mtpr(LabeledSet(truth, found)).value, mtpr(LabeledSet(truth, renamed)).value);
  EXPECT_EQ(mtnr(LabeledSet(truth, found)).value, mtnr(LabeledSet(truth, renamed)).value);
}

TEST(LabeledSet, Validation) {
  EXPECT_EQ(code_of([] { LabeledSet({0, 1}, {0}); }), ErrorCode::LengthMismatch);
  EXPECT_EQ(code_of([] { LabeledSet({-1, 1}, {0, 0}); }), ErrorCode::InvalidArgument);
}

TEST(Nmi, IdenticalAndPermuted) {
  const std::vector<std::int64_t> a{0, 0, 1, 1, 2, 2, 2};
  EXPECT_NEAR(nmi(a, a), 1.0, 1e-12);
  const std::vector<std::int64_t> b{9, 9, 4, 4, 1, 1, 1};
  EXPECT_NEAR(nmi(a, b), 1.0, 1e-12);
}

TEST(Nmi, DegeneratePartitions) {
  EXPECT_EQ(nmi(std::vector<std::int64_t>{1, 1, 1}, std::vector<std::int64_t>{2, 2, 2}), 1.0);
  EXPECT_EQ(nmi(std::vector<std::int64_t>{1, 1, 1}, std::vector<std::int64_t>{0, 1, 2}), 0.0);
  EXPECT_EQ(code_of([] { nmi(std::vector<std::int64_t>{1}, std::vector<std::int64_t>{1, 2}); }),
            ErrorCode::LengthMismatch);
}

TEST(Nmi, MatchesContingencyOracleAndIsSymmetric) {
  std::mt19937_64 rng(33);
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = random_labels(50, 0, 1 + trial % 5, rng);
    const auto b = random_labels(50, -1, 1 + trial % 7, rng);
    const double v = nmi(a, b);
    EXPECT_NEAR(v, oracle::nmi_table(a, b), 1e-12);
    EXPECT_NEAR(v, nmi(b, a), 1e-12);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(LinearProbe, SeparableBlobs) {
  std::mt19937_64 rng(34);
  const auto ytr = random_labels(200, 0, 1, rng);
  const auto yte = random_labels(100, 0, 1, rng);
  const double acc = linear_probe(gaussian_cloud(ytr, 2.0, 0.3, rng), ytr,
                                  gaussian_cloud(yte, 2.0, 0.3, rng), yte, 200, 0.5);
  EXPECT_GE(acc, 0.95);
}

TEST(LinearProbe, ShuffledLabelsAreChance) {
  std::mt19937_64 rng(35);
  std::vector<std::int64_t> ytr(400), yte(400);
  for (std::size_t i = 0; i < 400; ++i) ytr[i] = yte[i] = static_cast<std::int64_t>(i % 2);
  const auto xtr = gaussian_cloud(ytr, 2.0, 0.3, rng);
  const auto xte = gaussian_cloud(yte, 2.0, 0.3, rng);
  std::shuffle(ytr.begin(), ytr.end(), rng);
  std::shuffle(yte.begin(), yte.end(), rng);
  const double acc = linear_probe(xtr, ytr, xte, yte, 200, 0.5);
  EXPECT_NEAR(acc, 0.5, 0.1);
}

TEST(LinearProbe, RepeatedPointPerClass) {
  const auto x = EmbeddingMatrix::from_rows({{0.0, 1.0}, {0.0, 1.0}, {1.0, 0.0}, {1.0, 0.0}});
  const std::vector<std::int64_t> y{3, 3, 5, 5};
  EXPECT_EQ(linear_probe(x, y, x, y, 100, 0.5), 1.0);
}

TEST(LinearProbe, DegenerateLabels) {
  const auto x = EmbeddingMatrix::from_rows({{0.0, 1.0}, {1.0, 0.0}});
  EXPECT_EQ(code_of([&] { linear_probe(x, {1, 1}, x, {0, 1}, 10, 0.5); }),
            ErrorCode::DegenerateLabels);
}

TEST(MetricsCsv, RoundTripIsExact) {
  const std::vector<MetricRecord> rows{{0, 0.0, 1.0, 0.25, 4.6, 0.5},
                                       {10, 0.1 + 0.2, 0.9, 1.0 / 3.0, 2.5e-7, 0.875}};
  std::stringstream ss;
  write_metrics_csv(ss, rows);
  EXPECT_EQ(ss.str().substr(0, ss.str().find('\n')), "epoch,mtpr,mtnr,nmi,loss,probe_acc");
  EXPECT_EQ(read_metrics_csv(ss), rows);
}

TEST(MetricsCsv, RejectsWrongHeader) {
  std::stringstream ss("epoch,loss\n1,2\n");
  EXPECT_EQ(code_of([&] { read_metrics_csv(ss); }), ErrorCode::Parse);
}
