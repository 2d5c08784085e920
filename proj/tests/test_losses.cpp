#include <gtest/gtest.h>

#include <algorithm>
#include <random>

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

ViewBatch batch_of(const oracle::Rows& rows) {
  return ViewBatch(EmbeddingMatrix::from_rows(rows, true));
}

oracle::Rows flatten_back(const std::vector<double>& flat, std::size_t n, std::size_t d) {
  oracle::Rows rows(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) rows[i][k] = flat[i * d + k];
  }
  return rows;
}

}  // namespace

TEST(LossInst, SinglePairIsZero) {
  const auto r = loss_inst(batch_of({{1.0, 0.0}, {0.6, 0.8}}), Temperature{0.2});
  EXPECT_DOUBLE_EQ(r.value, 0.0);
  for (double g : r.grad.data()) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(LossInst, HandComputedFourViews) {
  // anchor 0 sees partner 1 (cos 1), view 2 (cos 0), view 3 (cos -1) at tau 1
  const oracle::Rows z{{1.0, 0.0}, {1.0, 0.0}, {0.0, 1.0}, {-1.0, 0.0}};
  const auto r = loss_inst(batch_of(z), Temperature{1.0});
  const double e = std::exp(1.0);
  const double denom = e + 1.0 + 1.0 / e;
  EXPECT_NEAR(r.per_anchor[0], std::log(denom) - 1.0, 1e-14);
  const auto& terms = r.coefficients[0].terms;
  ASSERT_EQ(terms.size(), 3u);
  EXPECT_EQ(terms[0].role, CoefficientRole::Positive);
  EXPECT_NEAR(terms[0].sigma, 1.0 - e / denom, 1e-14);
  EXPECT_NEAR(terms[1].sigma, 1.0 / denom, 1e-14);
  EXPECT_NEAR(terms[2].sigma, (1.0 / e) / denom, 1e-14);
}

TEST(Losses, MatchNaiveTranscription) {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t m = 1 + trial % 6;
    const std::size_t d = 2 + trial % 5;
    const double tau = 0.1 + 0.1 * (trial % 7);
    const auto z = oracle::random_unit_rows(2 * m, d, rng);
    const auto y = oracle::random_view_labels(m, 3, rng);
    const BatchLabels labels(y);
    const auto batch = batch_of(z);
    const LossReport reports[3] = {loss_inst(batch, Temperature{tau}),
                                   loss_elim(batch, labels, Temperature{tau}),
                                   loss_attr(batch, labels, Temperature{tau})};
    for (int obj = 0; obj < 3; ++obj) {
      const auto want = oracle::per_anchor_terms(obj, z, obj == 0 ? std::vector<std::int64_t>(2 * m, -1) : y, tau);
      double mean = 0.0;
      for (std::size_t i = 0; i < want.size(); ++i) {
        EXPECT_NEAR(reports[obj].per_anchor[i], want[i], 1e-10 * (1.0 + want[i]));
        mean += want[i];
      }
      EXPECT_NEAR(reports[obj].value, mean / static_cast<double>(want.size()), 1e-10);
    }
  }
}

TEST(Losses, TotalGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t m = 2 + trial % 3;
    const std::size_t d = 3;
    const double tau = 0.5;
    const auto z = oracle::random_unit_rows(2 * m, d, rng);
    const BatchLabels labels(oracle::random_view_labels(m, 2, rng));
    for (auto obj : {Objective::Inst, Objective::Elim, Objective::Attr}) {
      const auto report = contrastive_objective(obj, oracle::to_matrix(z), labels, Temperature{tau});
      std::vector<double> flat;
      for (const auto& r : z) flat.insert(flat.end(), r.begin(), r.end());
      const auto fd = oracle::central_difference(
          [&](const std::vector<double>& x) {
            return contrastive_objective(obj, oracle::to_matrix(flatten_back(x, 2 * m, d)), labels,
                                         Temperature{tau})
                .value;
          },
          flat, 1e-5);
      for (std::size_t k = 0; k < flat.size(); ++k) {
        EXPECT_TRUE(oracle::close_rel(report.grad.data()[k], fd[k], 1e-5, 1e-8))
            << to_string(obj) << " coord " << k << ": " << report.grad.data()[k] << " vs " << fd[k];
      }
    }
  }
}

TEST(Losses, AnchorGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t m = 1 + trial % 4;
    const std::size_t d = 4;
    const double tau = 0.2;
    const auto z = oracle::random_unit_rows(2 * m, d, rng);
    const BatchLabels labels(oracle::random_view_labels(m, 2, rng));
    for (auto obj : {Objective::Elim, Objective::Attr}) {
      const auto report = contrastive_objective(obj, oracle::to_matrix(z), labels, Temperature{tau});
      for (std::size_t i = 0; i < 2 * m; ++i) {
        const auto fd = oracle::central_difference(
            [&](const std::vector<double>& zi) {
              auto moved = z;
              moved[i] = zi;
              return contrastive_objective(obj, oracle::to_matrix(moved), labels, Temperature{tau})
                  .per_anchor[i];
            },
            z[i], 1e-5);
        for (std::size_t k = 0; k < d; ++k) {
          EXPECT_TRUE(oracle::close_rel(report.anchor_grad(i, k), fd[k], 1e-5, 1e-8));
        }
      }
    }
  }
}

TEST(Losses, AllSingletonReduction) {
  std::mt19937_64 rng(9);
  const auto z = oracle::random_unit_rows(12, 5, rng);
  const auto batch = batch_of(z);
  const auto labels = BatchLabels::all_singleton(12);
  const auto inst = loss_inst(batch, Temperature{0.2});
  const auto elim = loss_elim(batch, labels, Temperature{0.2});
  const auto attr = loss_attr(batch, labels, Temperature{0.2});
  EXPECT_NEAR(elim.value, inst.value, 1e-12);
  EXPECT_NEAR(attr.value, inst.value, 1e-12);
  for (std::size_t k = 0; k < inst.grad.data().size(); ++k) {
    EXPECT_NEAR(elim.grad.data()[k], inst.grad.data()[k], 1e-12);
    EXPECT_NEAR(attr.grad.data()[k], inst.grad.data()[k], 1e-12);
  }
}

TEST(LossElim, ZeroWhenEveryNegativeIsDetected) {
  std::mt19937_64 rng(10);
  const auto z = oracle::random_unit_rows(10, 3, rng);
  const auto r = loss_elim(batch_of(z), BatchLabels(std::vector<std::int64_t>(10, 4)),
                           Temperature{0.2});
  EXPECT_EQ(r.value, 0.0);
}

TEST(LossAttr, TrueLabelsMatchSupervisedContrastive) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t m = 6;
    const auto z = oracle::random_unit_rows(2 * m, 4, rng);
    std::vector<std::int64_t> cls;
    std::uniform_int_distribution<std::int64_t> pick(0, 2);
    for (std::size_t j = 0; j < m; ++j) {
      const auto c = pick(rng);
      cls.push_back(c);
      cls.push_back(c);
    }
    const auto r = loss_attr(batch_of(z), BatchLabels(cls), Temperature{0.3});
    EXPECT_NEAR(r.value, oracle::supcon_mean(z, cls, 0.3), 1e-10);
  }
}

TEST(HardMining, NegativeCoefficientsIncreaseWithSimilarity) {
  std::mt19937_64 rng(13);
  const auto z = oracle::random_unit_rows(16, 6, rng);
  const BatchLabels labels(oracle::random_view_labels(8, 3, rng));
  const auto r = loss_elim(batch_of(z), labels, Temperature{0.2});
  for (const auto& anchor : hard_mining_coefficients(r)) {
    std::vector<std::pair<double, double>> neg;
    for (const auto& t : anchor.terms) {
      if (t.role == CoefficientRole::Negative) {
        neg.emplace_back(oracle::raw_dot(z[anchor.anchor], z[t.view]), t.sigma);
      }
    }
    std::sort(neg.begin(), neg.end());
    for (std::size_t k = 1; k < neg.size(); ++k) EXPECT_LT(neg[k - 1].second, neg[k].second);
  }
}

TEST(HardMining, PositiveCoefficientsAreNonNegative) {
  std::mt19937_64 rng(14);
  const auto z = oracle::random_unit_rows(16, 6, rng);
  const BatchLabels labels(oracle::random_view_labels(8, 2, rng));
  const auto r = loss_attr(batch_of(z), labels, Temperature{0.2});
  for (const auto& anchor : hard_mining_coefficients(r)) {
    double positive_sum = 0.0, negative_sum = 0.0;
    for (const auto& t : anchor.terms) {
      (t.role == CoefficientRole::Positive ? positive_sum : negative_sum) += t.sigma;
    }
    // the positive weights and negative weights balance: sum(1/|P| - r_p) = sum(r_n)
    EXPECT_NEAR(positive_sum, negative_sum, 1e-12);
  }
}

TEST(HardMining, InstReportIsNotApplicable) {
  const auto r = loss_inst(batch_of({{1.0, 0.0}, {0.0, 1.0}}), Temperature{0.2});
  EXPECT_EQ(code_of([&] { hard_mining_coefficients(r); }), ErrorCode::NotApplicable);
}

TEST(GradientDirection, AnchorStepMovesTowardPositiveAwayFromHardNegative) {
  const oracle::Rows z{{1.0, 0.0}, {0.0, 1.0}, {0.8, 0.6}, {0.8, 0.6}};
  const auto r = loss_inst(batch_of(z), Temperature{0.5});
  std::vector<double> step(2);
  for (std::size_t k = 0; k < 2; ++k) step[k] = -r.anchor_grad(0, k);
  EXPECT_GT(oracle::raw_dot(step, z[1]), 0.0);
  EXPECT_LT(oracle::raw_dot(step, z[2]), 0.0);
}

TEST(Hierarchical, IdenticalLevelsEqualSingleLevel) {
  std::mt19937_64 rng(15);
  const auto z = oracle::random_unit_rows(12, 4, rng);
  const BatchLabels labels(oracle::random_view_labels(6, 2, rng));
  const auto batch = batch_of(z);
  for (auto obj : {Objective::Elim, Objective::Attr}) {
    const auto single = obj == Objective::Elim ? loss_elim(batch, labels, Temperature{0.2})
                                               : loss_attr(batch, labels, Temperature{0.2});
    const auto multi = hierarchical_loss(batch, {labels, labels, labels}, obj, Temperature{0.2});
    EXPECT_NEAR(multi.value, single.value, 1e-12);
    for (std::size_t k = 0; k < single.grad.data().size(); ++k) {
      EXPECT_NEAR(multi.grad.data()[k], single.grad.data()[k], 1e-12);
    }
  }
}

TEST(Hierarchical, AveragesDistinctLevels) {
  std::mt19937_64 rng(16);
  const auto z = oracle::random_unit_rows(12, 4, rng);
  const BatchLabels a(oracle::random_view_labels(6, 2, rng));
  const BatchLabels b(oracle::random_view_labels(6, 4, rng));
  const auto batch = batch_of(z);
  const auto multi = hierarchical_loss(batch, {a, b}, Objective::Elim, Temperature{0.2});
  const double want = 0.5 * (loss_elim(batch, a, Temperature{0.2}).value +
                             loss_elim(batch, b, Temperature{0.2}).value);
  EXPECT_NEAR(multi.value, want, 1e-12);
}

TEST(Hierarchical, Errors) {
  const auto batch = batch_of({{1.0, 0.0}, {0.0, 1.0}});
  EXPECT_EQ(code_of([&] { hierarchical_loss(batch, {}, Objective::Elim, Temperature{0.2}); }),
            ErrorCode::EmptyLevels);
}

TEST(Losses, InputValidation) {
  EXPECT_EQ(code_of([] { ViewBatch(EmbeddingMatrix::from_rows({{1.0, 0.0}}, true)); }),
            ErrorCode::InvalidArgument);
  const ViewBatch raw(EmbeddingMatrix::from_rows({{2.0, 0.0}, {0.0, 1.0}}));
  EXPECT_EQ(code_of([&] { loss_inst(raw, Temperature{0.2}); }), ErrorCode::UnnormalizedInput);
  const auto batch = batch_of({{1.0, 0.0}, {0.0, 1.0}});
  EXPECT_EQ(code_of([&] { loss_elim(batch, BatchLabels::all_singleton(4), Temperature{0.2}); }),
            ErrorCode::LabelCardinalityMismatch);
  EXPECT_EQ(code_of([] { BatchLabels({0, 1}); }), ErrorCode::InvalidArgument);
  EXPECT_EQ(code_of([] { BatchLabels({0}); }), ErrorCode::LabelCardinalityMismatch);
}

TEST(Losses, JsonCarriesValueAndCoefficients) {
  const auto r = loss_elim(batch_of({{1.0, 0.0}, {0.0, 1.0}, {0.6, 0.8}, {0.6, 0.8}}),
                           BatchLabels::from_sources({0, 1}), Temperature{0.2});
  const auto j = to_json(r);
  EXPECT_EQ(j["objective"], "elim");
  EXPECT_DOUBLE_EQ(j["value"].get<double>(), r.value);
  EXPECT_EQ(j["coefficients"].size(), 4u);
}
