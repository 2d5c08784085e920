#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "ifnd/embedding.hpp"
#include "ifnd/error.hpp"
#include "ifnd/losses.hpp"
#include "ifnd/text.hpp"

namespace ifnd {

/// Ground-truth classes next to the detected pseudo labels (or singletons).
class LabeledSet {
 public:
  LabeledSet(std::vector<std::int64_t> true_label, std::vector<std::int64_t> detected_label)
      : true_(std::move(true_label)), detected_(std::move(detected_label)) {
    if (true_.size() != detected_.size()) {
      throw Error(ErrorCode::LengthMismatch, "true and detected labels differ in length");
    }
    for (auto t : true_) {
      if (t < 0) throw Error(ErrorCode::InvalidArgument, "true labels must be non-negative");
    }
  }

  std::size_t size() const noexcept { return true_.size(); }
  const std::vector<std::int64_t>& true_labels() const noexcept { return true_; }
  const std::vector<std::int64_t>& detected_labels() const noexcept { return detected_; }

 private:
  std::vector<std::int64_t> true_;
  std::vector<std::int64_t> detected_;
};

/// A pair-level rate. `pairs == 0` means the rate was undefined and `value`
/// holds the documented fallback.
struct PairRate {
  double value = 0.0;
  std::uint64_t pairs = 0;
  bool no_pairs() const noexcept { return pairs == 0; }
};

namespace detail {

inline std::uint64_t choose2(std::uint64_t n) noexcept { return n * (n - (n > 0)) / 2; }

struct PairTally {
  std::uint64_t positive = 0;           // same true class
  std::uint64_t positive_detected = 0;  // ... and same non-singleton detection
  std::uint64_t negative = 0;
  std::uint64_t negative_detected = 0;
};

// Counts pairs through the contingency of (true, detected) instead of
// enumerating all n^2 pairs.
inline PairTally tally_pairs(const LabeledSet& set) {
  std::map<std::int64_t, std::uint64_t> by_true;
  std::map<std::int64_t, std::uint64_t> by_detected;
  std::map<std::pair<std::int64_t, std::int64_t>, std::uint64_t> by_both;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto t = set.true_labels()[i];
    const auto d = set.detected_labels()[i];
    ++by_true[t];
    if (d != kSingleton) {
      ++by_detected[d];
      ++by_both[{t, d}];
    }
  }
  PairTally tally;
  for (const auto& [t, c] : by_true) tally.positive += choose2(c);
  std::uint64_t detected_pairs = 0;
  for (const auto& [d, c] : by_detected) detected_pairs += choose2(c);
  for (const auto& [td, c] : by_both) tally.positive_detected += choose2(c);
  tally.negative = choose2(set.size()) - tally.positive;
  tally.negative_detected = detected_pairs - tally.positive_detected;
  return tally;
}

}  // namespace detail

/// Fraction of same-class pairs that share a non-singleton detected label.
/// Zero when the set has no same-class pair.
inline PairRate mtpr(const LabeledSet& set) {
  const auto t = detail::tally_pairs(set);
  if (t.positive == 0) return {0.0, 0};
  return {static_cast<double>(t.positive_detected) / static_cast<double>(t.positive), t.positive};
}

/// Fraction of different-class pairs still kept apart (not sharing a
/// non-singleton detected label). One when no different-class pair exists.
inline PairRate mtnr(const LabeledSet& set) {
  const auto t = detail::tally_pairs(set);
  if (t.negative == 0) return {1.0, 0};
  return {static_cast<double>(t.negative - t.negative_detected) / static_cast<double>(t.negative),
          t.negative};
}

/// I(a; b) / sqrt(H(a) H(b)) with natural logarithms.
inline double nmi(const std::vector<std::int64_t>& a, const std::vector<std::int64_t>& b) {
  if (a.size() != b.size()) throw Error(ErrorCode::LengthMismatch, "nmi label arrays differ");
  if (a.empty()) throw Error(ErrorCode::InvalidArgument, "nmi needs at least one sample");
  const double n = static_cast<double>(a.size());
  std::map<std::int64_t, double> pa;
  std::map<std::int64_t, double> pb;
  std::map<std::pair<std::int64_t, std::int64_t>, double> pab;
  for (std::size_t i = 0; i < a.size(); ++i) {
    pa[a[i]] += 1.0;
    pb[b[i]] += 1.0;
    pab[{a[i], b[i]}] += 1.0;
  }
  auto entropy = [n](const std::map<std::int64_t, double>& counts) {
    double h = 0.0;
    for (const auto& [_, c] : counts) h -= (c / n) * std::log(c / n);
    return h;
  };
  const double ha = entropy(pa);
  const double hb = entropy(pb);
  if (pa.size() == 1 && pb.size() == 1) return 1.0;
  if (pa.size() == 1 || pb.size() == 1) return 0.0;
  double mi = 0.0;
  for (const auto& [key, c] : pab) {
    mi += (c / n) * std::log(c * n / (pa[key.first] * pb[key.second]));
  }
  return std::clamp(mi / std::sqrt(ha * hb), 0.0, 1.0);
}

inline double nmi(const std::vector<std::size_t>& a, const std::vector<std::int64_t>& b) {
  return nmi(std::vector<std::int64_t>(a.begin(), a.end()), b);
}

/// Multinomial logistic regression trained by full-batch gradient descent
/// on frozen embeddings (z-scored with the training statistics). Returns
/// accuracy on the test split.
inline double linear_probe(const EmbeddingMatrix& train_emb,
                           const std::vector<std::int64_t>& train_labels,
                           const EmbeddingMatrix& test_emb,
                           const std::vector<std::int64_t>& test_labels, std::size_t epochs,
                           double lr) {
  if (train_emb.rows() != train_labels.size() || test_emb.rows() != test_labels.size()) {
    throw Error(ErrorCode::LengthMismatch, "probe labels do not cover the embeddings");
  }
  if (train_emb.dim() != test_emb.dim()) {
    throw Error(ErrorCode::DimensionMismatch, "probe train/test dims differ");
  }
  auto distinct = [](const std::vector<std::int64_t>& l) {
    std::vector<std::int64_t> d(l);
    std::sort(d.begin(), d.end());
    d.erase(std::unique(d.begin(), d.end()), d.end());
    return d;
  };
  const auto classes = distinct(train_labels);
  if (classes.size() < 2 || distinct(test_labels).size() < 2) {
    throw Error(ErrorCode::DegenerateLabels, "each probe split needs at least two classes");
  }
  auto class_index = [&](std::int64_t label) -> std::ptrdiff_t {
    auto it = std::lower_bound(classes.begin(), classes.end(), label);
    if (it == classes.end() || *it != label) return -1;
    return it - classes.begin();
  };

  const std::size_t n = train_emb.rows();
  const std::size_t d = train_emb.dim();
  const std::size_t c = classes.size();

  std::vector<double> mean(d, 0.0);
  std::vector<double> scale(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) mean[k] += train_emb(i, k);
  }
  for (double& m : mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) {
      const double t = train_emb(i, k) - mean[k];
      scale[k] += t * t;
    }
  }
  for (double& s : scale) {
    s = std::sqrt(s / static_cast<double>(n));
    s = s > 1e-12 ? 1.0 / s : 1.0;
  }
  auto standardize = [&](const EmbeddingMatrix& m) {
    Matrix out(m.rows(), d);
    for (std::size_t i = 0; i < m.rows(); ++i) {
      for (std::size_t k = 0; k < d; ++k) out(i, k) = (m(i, k) - mean[k]) * scale[k];
    }
    return out;
  };
  const Matrix xtr = standardize(train_emb);
  const Matrix xte = standardize(test_emb);

  std::vector<std::size_t> ytr(n);
  for (std::size_t i = 0; i < n; ++i) ytr[i] = static_cast<std::size_t>(class_index(train_labels[i]));

  Matrix w(c, d);
  std::vector<double> b(c, 0.0);
  std::vector<double> logits(c);
  Matrix gw(c, d);
  std::vector<double> gb(c);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    std::fill(gw.data().begin(), gw.data().end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < c; ++j) {
        logits[j] = b[j] + dot(w.row(j), xtr.row(i));
        mx = std::max(mx, logits[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        logits[j] = std::exp(logits[j] - mx);
        z += logits[j];
      }
      for (std::size_t j = 0; j < c; ++j) {
        const double g = (logits[j] / z - (j == ytr[i] ? 1.0 : 0.0)) * inv_n;
        axpy(g, xtr.row(i), gw.row(j));
        gb[j] += g;
      }
    }
    for (std::size_t k = 0; k < w.data().size(); ++k) w.data()[k] -= lr * gw.data()[k];
    for (std::size_t j = 0; j < c; ++j) b[j] -= lr * gb[j];
  }

  std::size_t correct = 0;
  for (std::size_t i = 0; i < xte.rows(); ++i) {
    std::size_t best = 0;
    double best_v = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) {
      const double v = b[j] + dot(w.row(j), xte.row(i));
      if (v > best_v) {
        best_v = v;
        best = j;
      }
    }
    if (classes[best] == test_labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(xte.rows());
}

/// One row of the training log, written at every pseudo-label refresh.
struct MetricRecord {
  std::size_t epoch = 0;
  double mtpr = 0.0;
  double mtnr = 1.0;
  double nmi = 0.0;
  double loss = 0.0;
  double probe_accuracy = 0.0;

  friend bool operator==(const MetricRecord&, const MetricRecord&) = default;
};

inline constexpr const char* kMetricsHeader = "epoch,mtpr,mtnr,nmi,loss,probe_acc";

inline void write_metrics_header(std::ostream& os) { os << kMetricsHeader << '\n'; }

inline void write_metric_row(std::ostream& os, const MetricRecord& r) {
  os << r.epoch << ',' << text::format_double(r.mtpr) << ',' << text::format_double(r.mtnr)
     << ',' << text::format_double(r.nmi) << ',' << text::format_double(r.loss) << ','
     << text::format_double(r.probe_accuracy) << '\n';
}

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricRecord>& records) {
  write_metrics_header(os);
  for (const auto& r : records) write_metric_row(os, r);
}

inline std::vector<MetricRecord> read_metrics_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || text::trim(line) != kMetricsHeader) {
    throw Error(ErrorCode::Parse, "metrics CSV header mismatch");
  }
  std::vector<MetricRecord> out;
  while (std::getline(is, line)) {
    if (text::trim(line).empty()) continue;
    const auto f = text::split(line, ',');
    if (f.size() != 6) throw Error(ErrorCode::Parse, "metrics CSV row needs 6 fields: " + line);
    MetricRecord r;
    r.epoch = static_cast<std::size_t>(text::parse_int(f[0]));
    r.mtpr = text::parse_double(f[1]);
    r.mtnr = text::parse_double(f[2]);
    r.nmi = text::parse_double(f[3]);
    r.loss = text::parse_double(f[4]);
    r.probe_accuracy = text::parse_double(f[5]);
    out.push_back(r);
  }
  return out;
}

}  // namespace ifnd
