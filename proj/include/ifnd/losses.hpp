#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "ifnd/embedding.hpp"
#include "ifnd/error.hpp"
#include "ifnd/matrix.hpp"
#include "json.hpp"

namespace ifnd {

/// Label meaning "this view is its own instance": it never matches anything,
/// including another singleton.
inline constexpr std::int64_t kSingleton = -1;

inline bool same_label(std::int64_t a, std::int64_t b) noexcept {
  return a != kSingleton && a == b;
}

enum class Objective { Inst, Elim, Attr };

inline const char* to_string(Objective o) noexcept {
  switch (o) {
    case Objective::Inst: return "inst";
    case Objective::Elim: return "elim";
    case Objective::Attr: return "attr";
  }
  return "?";
}

/// 2M views of M source samples. View 2j is the anchor view of source j and
/// view 2j+1 its positive.
class ViewBatch {
 public:
  explicit ViewBatch(EmbeddingMatrix embeddings) : embeddings_(std::move(embeddings)) {
    if (embeddings_.rows() < 2 || embeddings_.rows() % 2 != 0) {
      throw Error(ErrorCode::InvalidArgument, "a view batch needs 2M rows with M >= 1");
    }
  }

  std::size_t m_source() const noexcept { return embeddings_.rows() / 2; }
  std::size_t views() const noexcept { return embeddings_.rows(); }
  const EmbeddingMatrix& embeddings() const noexcept { return embeddings_; }

  static constexpr std::size_t pair_of(std::size_t view) noexcept { return view ^ 1u; }

 private:
  EmbeddingMatrix embeddings_;
};

class BatchLabels {
 public:
  explicit BatchLabels(std::vector<std::int64_t> label_of) : label_of_(std::move(label_of)) {
    if (label_of_.size() % 2 != 0) {
      throw Error(ErrorCode::LabelCardinalityMismatch, "odd number of view labels");
    }
    for (std::size_t v = 0; v < label_of_.size(); v += 2) {
      if (label_of_[v] != label_of_[v + 1]) {
        throw Error(ErrorCode::InvalidArgument,
                    "views of source " + std::to_string(v / 2) + " carry different labels");
      }
      if (label_of_[v] < kSingleton) {
        throw Error(ErrorCode::InvalidArgument, "negative label other than the singleton sentinel");
      }
    }
  }

  /// One label per source sample, duplicated onto both of its views.
  static BatchLabels from_sources(const std::vector<std::int64_t>& per_source) {
    std::vector<std::int64_t> v;
    v.reserve(per_source.size() * 2);
    for (auto l : per_source) {
      v.push_back(l);
      v.push_back(l);
    }
    return BatchLabels(std::move(v));
  }

  static BatchLabels all_singleton(std::size_t views) {
    return BatchLabels(std::vector<std::int64_t>(views, kSingleton));
  }

  std::size_t size() const noexcept { return label_of_.size(); }
  std::int64_t operator[](std::size_t v) const noexcept { return label_of_[v]; }
  const std::vector<std::int64_t>& labels() const noexcept { return label_of_; }

 private:
  std::vector<std::int64_t> label_of_;
};

enum class CoefficientRole { Positive, Negative };

/// One member of an anchor's denominator set. `ratio` is
/// sim(z_i, z_x) / sum_s sim(z_i, z_s); `sigma` is the gradient weight
/// (ratio itself for negatives, 1/|P| - ratio for positives).
struct CoefficientEntry {
  std::size_t view = 0;
  CoefficientRole role = CoefficientRole::Negative;
  double ratio = 0.0;
  double sigma = 0.0;
};

struct AnchorCoefficients {
  std::size_t anchor = 0;
  std::vector<CoefficientEntry> terms;
};

/// Result of evaluating one contrastive objective on a batch.
///
/// `value` is the mean of `per_anchor` over all 2M anchors. `grad` is the
/// total derivative of `value` with respect to every view embedding (anchor
/// role plus positive/negative roles in other anchors' terms).
/// `anchor_grad` row i holds dL_i/dz_i for the raw per-anchor term, the
/// quantity written out in closed form with the sigma coefficients.
struct LossReport {
  Objective objective = Objective::Inst;
  double value = 0.0;
  Matrix grad;
  Matrix anchor_grad;
  std::vector<double> per_anchor;
  std::vector<AnchorCoefficients> coefficients;
};

namespace detail {

inline void check_labels(const Matrix& z, const BatchLabels& labels) {
  if (labels.size() != z.rows()) {
    throw Error(ErrorCode::LabelCardinalityMismatch,
                "labels cover " + std::to_string(labels.size()) + " views, batch has " +
                    std::to_string(z.rows()));
  }
}

}  // namespace detail

/// Evaluates an objective with z treated as a free variable: no unit-norm
/// check is made. The public loss_* entry points validate and forward here;
/// gradient checks perturb z through this function directly.
inline LossReport contrastive_objective(Objective objective, const Matrix& z,
                                        const BatchLabels& labels, Temperature tau) {
  if (z.rows() < 2 || z.rows() % 2 != 0) {
    throw Error(ErrorCode::InvalidArgument, "a view batch needs 2M rows with M >= 1");
  }
  detail::check_labels(z, labels);
  const std::size_t n = z.rows();
  const std::size_t d = z.cols();
  const double t = tau.value();
  const double inv_n = 1.0 / static_cast<double>(n);

  LossReport report;
  report.objective = objective;
  report.grad = Matrix(n, d);
  report.anchor_grad = Matrix(n, d);
  report.per_anchor.assign(n, 0.0);
  report.coefficients.resize(n);

  std::vector<double> logit(n);
  std::vector<char> in_denominator(n);
  std::vector<char> is_positive(n);
  std::vector<double> weight(n);

  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t partner = ViewBatch::pair_of(i);
    double max_logit = -std::numeric_limits<double>::infinity();
    std::size_t positives = 0;
    for (std::size_t s = 0; s < n; ++s) {
      in_denominator[s] = 0;
      is_positive[s] = 0;
      if (s == i) continue;
      const bool fn = s != partner && same_label(labels[i], labels[s]);
      if (s == partner) {
        in_denominator[s] = 1;
        is_positive[s] = 1;
      } else {
        switch (objective) {
          case Objective::Inst: in_denominator[s] = 1; break;
          case Objective::Elim: in_denominator[s] = fn ? 0 : 1; break;
          case Objective::Attr:
            in_denominator[s] = 1;
            is_positive[s] = fn ? 1 : 0;
            break;
        }
      }
      if (!in_denominator[s]) continue;
      logit[s] = dot(z.row(i), z.row(s)) / t;
      max_logit = std::max(max_logit, logit[s]);
      positives += is_positive[s];
    }

    double denom = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      if (in_denominator[s]) denom += std::exp(logit[s] - max_logit);
    }
    const double log_denom = max_logit + std::log(denom);
    const double inv_p = 1.0 / static_cast<double>(positives);

    double positive_logits = 0.0;
    auto& coeff = report.coefficients[i];
    coeff.anchor = i;
    for (std::size_t s = 0; s < n; ++s) {
      if (!in_denominator[s]) continue;
      const double ratio = std::exp(logit[s] - log_denom);
      if (is_positive[s]) {
        positive_logits += logit[s];
        weight[s] = ratio - inv_p;
        coeff.terms.push_back({s, CoefficientRole::Positive, ratio, inv_p - ratio});
      } else {
        weight[s] = ratio;
        coeff.terms.push_back({s, CoefficientRole::Negative, ratio, ratio});
      }
    }
    // Never negative in exact arithmetic: every positive is in the denominator.
    report.per_anchor[i] = std::max(0.0, log_denom - positive_logits * inv_p);

    auto anchor_row = report.anchor_grad.row(i);
    for (std::size_t s = 0; s < n; ++s) {
      if (!in_denominator[s]) continue;
      axpy(weight[s] / t, z.row(s), anchor_row);
      axpy(weight[s] * inv_n / t, z.row(i), report.grad.row(s));
    }
    axpy(inv_n, anchor_row, report.grad.row(i));
  }

  double total = 0.0;
  for (double v : report.per_anchor) total += v;
  report.value = total * inv_n;
  return report;
}

namespace detail {

inline Matrix checked_views(const ViewBatch& batch) {
  if (!batch.embeddings().normalized()) {
    throw Error(ErrorCode::UnnormalizedInput, "loss inputs must be unit-normalized embeddings");
  }
  return batch.embeddings().to_matrix();
}

}  // namespace detail

inline LossReport loss_inst(const ViewBatch& batch, Temperature tau) {
  const Matrix z = detail::checked_views(batch);
  return contrastive_objective(Objective::Inst, z, BatchLabels::all_singleton(z.rows()), tau);
}

/// Detected false negatives (same non-singleton label) leave the denominator.
inline LossReport loss_elim(const ViewBatch& batch, const BatchLabels& labels, Temperature tau) {
  return contrastive_objective(Objective::Elim, detail::checked_views(batch), labels, tau);
}

/// Detected false negatives join the positive set; the denominator keeps all views.
inline LossReport loss_attr(const ViewBatch& batch, const BatchLabels& labels, Temperature tau) {
  return contrastive_objective(Objective::Attr, detail::checked_views(batch), labels, tau);
}

inline std::vector<AnchorCoefficients> hard_mining_coefficients(const LossReport& report) {
  if (report.objective == Objective::Inst) {
    throw Error(ErrorCode::NotApplicable,
                "instance-level reports only carry the single-positive form; read "
                "report.coefficients directly");
  }
  if (report.coefficients.empty()) {
    throw Error(ErrorCode::NotApplicable, "report has no coefficient table (averaged report?)");
  }
  return report.coefficients;
}

/// Mean of the per-level losses, one level per clustering granularity.
/// The averaged report carries no coefficient table.
inline LossReport hierarchical_loss(const ViewBatch& batch,
                                    const std::vector<BatchLabels>& labels_per_level,
                                    Objective objective, Temperature tau) {
  if (labels_per_level.empty()) throw Error(ErrorCode::EmptyLevels, "no label levels given");
  if (objective == Objective::Inst) {
    throw Error(ErrorCode::InvalidArgument, "hierarchical loss takes elim or attr");
  }
  const Matrix z = detail::checked_views(batch);
  const double inv_levels = 1.0 / static_cast<double>(labels_per_level.size());

  LossReport out;
  out.objective = objective;
  out.grad = Matrix(z.rows(), z.cols());
  out.anchor_grad = Matrix(z.rows(), z.cols());
  out.per_anchor.assign(z.rows(), 0.0);
  double value = 0.0;
  for (const auto& labels : labels_per_level) {
    const LossReport level = contrastive_objective(objective, z, labels, tau);
    value += level.value;
    for (std::size_t k = 0; k < level.grad.data().size(); ++k) {
      out.grad.data()[k] += level.grad.data()[k];
      out.anchor_grad.data()[k] += level.anchor_grad.data()[k];
    }
    for (std::size_t i = 0; i < z.rows(); ++i) out.per_anchor[i] += level.per_anchor[i];
  }
  out.value = value * inv_levels;
  for (double& g : out.grad.data()) g *= inv_levels;
  for (double& g : out.anchor_grad.data()) g *= inv_levels;
  for (double& v : out.per_anchor) v *= inv_levels;
  return out;
}

inline nlohmann::json to_json(const LossReport& r) {
  auto rows = [](const Matrix& m) {
    nlohmann::json out = nlohmann::json::array();
    for (std::size_t i = 0; i < m.rows(); ++i) {
      out.push_back(std::vector<double>(m.row(i).begin(), m.row(i).end()));
    }
    return out;
  };
  nlohmann::json j;
  j["objective"] = to_string(r.objective);
  j["value"] = r.value;
  j["per_anchor"] = r.per_anchor;
  j["grad"] = rows(r.grad);
  j["anchor_grad"] = rows(r.anchor_grad);
  nlohmann::json coeffs = nlohmann::json::array();
  for (const auto& a : r.coefficients) {
    nlohmann::json terms = nlohmann::json::array();
    for (const auto& t : a.terms) {
      terms.push_back({{"view", t.view},
                       {"role", t.role == CoefficientRole::Positive ? "positive" : "negative"},
                       {"ratio", t.ratio},
                       {"sigma", t.sigma}});
    }
    coeffs.push_back({{"anchor", a.anchor}, {"terms", std::move(terms)}});
  }
  j["coefficients"] = std::move(coeffs);
  return j;
}

}  // namespace ifnd
