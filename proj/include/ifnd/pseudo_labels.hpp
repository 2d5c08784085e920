#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "ifnd/embedding.hpp"
#include "ifnd/error.hpp"
#include "ifnd/losses.hpp"
#include "ifnd/matrix.hpp"
#include "ifnd/text.hpp"

namespace ifnd {

/// One k-means granularity: centroids, hard assignment, and per-sample
/// confidence of that assignment.
struct ClusterLevel {
  std::size_t k = 0;
  EmbeddingMatrix centroids;
  std::vector<std::size_t> assignment;
  std::vector<double> confidence;
  double inertia = 0.0;
  /// Inertia after every assignment step of the winning restart.
  std::vector<double> inertia_trace;
};

// Equality ignores the diagnostic inertia trace.
inline bool operator==(const ClusterLevel& a, const ClusterLevel& b) {
  return a.k == b.k && a.centroids == b.centroids && a.assignment == b.assignment &&
         a.confidence == b.confidence && a.inertia == b.inertia;
}

struct KMeansOptions {
  std::uint64_t seed = 0;
  std::size_t max_iters = 100;
  std::size_t restarts = 3;
};

namespace detail {

inline std::size_t nearest_centroid(std::span<const double> x, const Matrix& centroids,
                                    double* best_dist = nullptr) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < centroids.rows(); ++j) {
    const double d = squared_distance(x, centroids.row(j));
    if (d < best_d) {
      best_d = d;
      best = j;
    }
  }
  if (best_dist) *best_dist = best_d;
  return best;
}

inline Matrix kmeanspp_init(const EmbeddingMatrix& x, std::size_t k, std::mt19937_64& rng) {
  const std::size_t n = x.rows();
  Matrix centroids(k, x.dim());
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::size_t first = pick(rng);
  std::copy(x.row(first).begin(), x.row(first).end(), centroids.row(0).begin());

  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = squared_distance(x.row(i), centroids.row(0));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t c = 1; c < k; ++c) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    std::size_t chosen = 0;
    if (total <= 0.0) {
      chosen = pick(rng);
    } else {
      double target = unit(rng) * total;
      chosen = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        target -= d2[i];
        if (target < 0.0) {
          chosen = i;
          break;
        }
      }
    }
    std::copy(x.row(chosen).begin(), x.row(chosen).end(), centroids.row(c).begin());
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], squared_distance(x.row(i), centroids.row(c)));
    }
  }
  return centroids;
}

struct LloydRun {
  Matrix centroids;
  std::vector<std::size_t> assignment;
  double inertia = 0.0;
  std::vector<double> trace;
  bool ok = true;
};

inline LloydRun lloyd(const EmbeddingMatrix& x, Matrix centroids, std::size_t max_iters) {
  const std::size_t n = x.rows();
  const std::size_t k = centroids.rows();
  const std::size_t d = x.dim();
  LloydRun run;
  run.assignment.assign(n, 0);
  std::vector<double> dist(n);
  std::vector<std::size_t> counts(k);

  auto assign = [&] {
    bool changed = false;
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = nearest_centroid(x.row(i), centroids, &dist[i]);
      changed |= j != run.assignment[i];
      run.assignment[i] = j;
      inertia += dist[i];
    }
    run.trace.push_back(inertia);
    return changed;
  };

  assign();
  for (std::size_t iter = 0; iter < max_iters; ++iter) {
    Matrix sums(k, d);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      axpy(1.0, x.row(i), sums.row(run.assignment[i]));
      ++counts[run.assignment[i]];
    }
    for (std::size_t j = 0; j < k; ++j) {
      if (counts[j] == 0) continue;
      for (std::size_t c = 0; c < d; ++c) centroids(j, c) = sums(j, c) / counts[j];
    }
    // Empty clusters take the point farthest from its own centroid.
    for (std::size_t j = 0; j < k; ++j) {
      if (counts[j] != 0) continue;
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double di = squared_distance(x.row(i), centroids.row(run.assignment[i]));
        if (di > far_d && counts[run.assignment[i]] > 1) {
          far_d = di;
          far = i;
        }
      }
      if (far_d <= 0.0) {
        run.ok = false;
        return run;
      }
      std::copy(x.row(far).begin(), x.row(far).end(), centroids.row(j).begin());
      --counts[run.assignment[far]];
      run.assignment[far] = j;
      counts[j] = 1;
    }
    if (!assign()) break;
  }
  run.inertia = run.trace.back();
  run.centroids = std::move(centroids);
  return run;
}

}  // namespace detail

/// Lloyd's algorithm from k-means++ seeding; keeps the lowest-inertia restart.
/// Confidence is left empty; see confidence().
inline ClusterLevel kmeans(const EmbeddingMatrix& features, std::size_t k,
                           const KMeansOptions& opts = {}) {
  if (k == 0) throw Error(ErrorCode::InvalidArgument, "k must be at least 1");
  if (features.rows() < k) {
    throw Error(ErrorCode::TooFewSamples, std::to_string(features.rows()) +
                                              " samples cannot form " + std::to_string(k) +
                                              " clusters");
  }
  if (opts.restarts == 0) throw Error(ErrorCode::InvalidArgument, "restarts must be positive");

  std::mt19937_64 rng(opts.seed);
  detail::LloydRun best;
  bool have_best = false;
  for (std::size_t r = 0; r < opts.restarts; ++r) {
    auto run = detail::lloyd(features, detail::kmeanspp_init(features, k, rng), opts.max_iters);
    if (!run.ok) continue;
    if (!have_best || run.inertia < best.inertia) {
      best = std::move(run);
      have_best = true;
    }
  }
  if (!have_best) {
    throw Error(ErrorCode::EmptyClusterUnrecoverable,
                "every restart left an empty cluster that could not be reseeded");
  }
  ClusterLevel level;
  level.k = k;
  level.centroids = EmbeddingMatrix(best.centroids);
  level.assignment = std::move(best.assignment);
  level.inertia = best.inertia;
  level.inertia_trace = std::move(best.trace);
  return level;
}

/// kappa_i = sim(x_i, c_{y_i}) / sum_j sim(x_i, c_j), computed with unit
/// centroids on the unit-normalized inputs.
inline std::vector<double> confidence(const EmbeddingMatrix& features, const ClusterLevel& level,
                                      Temperature tau) {
  if (features.rows() != level.assignment.size() || features.dim() != level.centroids.dim() ||
      level.centroids.rows() != level.k) {
    throw Error(ErrorCode::LevelMismatch, "features do not match the cluster level");
  }
  const EmbeddingMatrix x = features.normalized() ? features : normalize_rows(features);
  const EmbeddingMatrix c = normalize_rows(level.centroids);
  std::vector<double> kappa(x.rows());
  std::vector<double> logit(level.k);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double max_logit = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < level.k; ++j) {
      logit[j] = dot(x.row(i), c.row(j)) / tau.value();
      max_logit = std::max(max_logit, logit[j]);
    }
    double denom = 0.0;
    for (std::size_t j = 0; j < level.k; ++j) denom += std::exp(logit[j] - max_logit);
    kappa[i] = std::exp(logit[level.assignment[i]] - max_logit) / denom;
  }
  return kappa;
}

enum class Scheme { Constant, Step, Linear };

inline const char* to_string(Scheme s) noexcept {
  switch (s) {
    case Scheme::Constant: return "constant";
    case Scheme::Step: return "step";
    case Scheme::Linear: return "linear";
  }
  return "?";
}

/// How the fraction of adopted pseudo labels evolves over training.
struct AcceptanceSchedule {
  Scheme scheme = Scheme::Linear;
  double initial_rate = 0.0;
  double final_rate = 1.0;
  std::size_t step_epoch = 0;
  std::size_t total_epochs = 1;

  void validate() const {
    auto in_unit = [](double r) { return r >= 0.0 && r <= 1.0; };
    if (!in_unit(initial_rate) || !in_unit(final_rate)) {
      throw Error(ErrorCode::InvalidArgument, "acceptance rates must lie in [0, 1]");
    }
    if (total_epochs == 0) throw Error(ErrorCode::InvalidArgument, "total_epochs must be positive");
  }

  std::string describe() const {
    std::string s = std::string(to_string(scheme)) + " " + text::format_double(initial_rate) +
                    "→" + text::format_double(final_rate);
    if (scheme == Scheme::Step) s += " @" + std::to_string(step_epoch);
    return s;
  }
};

inline double rate_at(const AcceptanceSchedule& schedule, std::size_t epoch) {
  schedule.validate();
  if (epoch > schedule.total_epochs) {
    throw Error(ErrorCode::EpochOutOfRange, "epoch " + std::to_string(epoch) + " beyond " +
                                                std::to_string(schedule.total_epochs));
  }
  switch (schedule.scheme) {
    case Scheme::Constant: return schedule.final_rate;
    case Scheme::Step:
      return epoch < schedule.step_epoch ? schedule.initial_rate : schedule.final_rate;
    case Scheme::Linear:
      return schedule.initial_rate +
             (static_cast<double>(epoch) / static_cast<double>(schedule.total_epochs)) *
                 (schedule.final_rate - schedule.initial_rate);
  }
  return 0.0;
}

/// Number of samples adopted at `rate`: ceil(rate * n). The small slack keeps
/// products such as 0.3 * 10 from rounding up to an extra sample.
inline std::size_t accepted_count(double rate, std::size_t n) {
  const double raw = std::ceil(rate * static_cast<double>(n) - 1e-9);
  return static_cast<std::size_t>(std::clamp(raw, 0.0, static_cast<double>(n)));
}

/// The ceil(rate * N) most confident samples keep their cluster index; the
/// rest become singletons. Equal confidence goes to the lower sample index.
inline std::vector<std::int64_t> accept_labels(const ClusterLevel& level, double rate) {
  if (!(rate >= 0.0 && rate <= 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "acceptance rate must lie in [0, 1]");
  }
  const std::size_t n = level.assignment.size();
  if (level.confidence.size() != n) {
    throw Error(ErrorCode::LevelMismatch, "cluster level has no confidence scores");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return level.confidence[a] > level.confidence[b];
  });
  std::vector<std::int64_t> labels(n, kSingleton);
  const std::size_t take = accepted_count(rate, n);
  for (std::size_t r = 0; r < take; ++r) {
    labels[order[r]] = static_cast<std::int64_t>(level.assignment[order[r]]);
  }
  return labels;
}

/// Accepted labels for every granularity, as produced by the latest refresh.
struct PseudoLabelState {
  std::vector<ClusterLevel> levels;
  std::vector<std::vector<std::int64_t>> accepted;
  long long epoch = -1;
  double rate = 0.0;

  /// Initial state: every sample is its own instance.
  static PseudoLabelState singletons(std::size_t samples, std::size_t level_count) {
    PseudoLabelState s;
    s.accepted.assign(level_count, std::vector<std::int64_t>(samples, kSingleton));
    return s;
  }

  friend bool operator==(const PseudoLabelState&, const PseudoLabelState&) = default;
};

/// Mixes a base seed with a refresh epoch and a level index.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

struct RefreshOptions {
  std::uint64_t seed = 0;
  std::size_t max_iters = 100;
  std::size_t restarts = 3;
  Temperature tau{kDefaultTemperature};
};

/// Clusters the unit-normalized features once per entry of `ks`, scores
/// every assignment and adopts the same fraction `rate` at every level.
inline PseudoLabelState refresh_at_rate(const EmbeddingMatrix& features,
                                        const std::vector<std::size_t>& ks, double rate,
                                        long long epoch, const RefreshOptions& opts) {
  if (ks.empty()) throw Error(ErrorCode::EmptyLevels, "no cluster counts given");
  const EmbeddingMatrix x = normalize_rows(features);
  PseudoLabelState state;
  state.epoch = epoch;
  state.rate = rate;
  for (std::size_t l = 0; l < ks.size(); ++l) {
    KMeansOptions km{derive_seed(opts.seed, static_cast<std::uint64_t>(epoch + 1), l),
                     opts.max_iters, opts.restarts};
    ClusterLevel level = kmeans(x, ks[l], km);
    level.confidence = confidence(x, level, opts.tau);
    state.accepted.push_back(accept_labels(level, rate));
    state.levels.push_back(std::move(level));
  }
  return state;
}

inline PseudoLabelState refresh(const EmbeddingMatrix& features,
                                const std::vector<std::size_t>& ks,
                                const AcceptanceSchedule& schedule, std::size_t epoch,
                                const RefreshOptions& opts) {
  return refresh_at_rate(features, ks, rate_at(schedule, epoch), static_cast<long long>(epoch),
                         opts);
}

// Structured text record:
//   ifnd-pseudo-labels v1
//   epoch <e> rate <r> levels <L> samples <N>
//   level <k> inertia <x>
//   centroids: embedding text block (k rows)
//   N lines "<accepted> <assignment> <kappa>"

inline void write_state(std::ostream& os, const PseudoLabelState& s) {
  const std::size_t n = s.accepted.empty() ? 0 : s.accepted.front().size();
  os << "ifnd-pseudo-labels v1\n";
  os << "epoch " << s.epoch << " rate " << text::format_double(s.rate) << " levels "
     << s.accepted.size() << " samples " << n << '\n';
  for (std::size_t l = 0; l < s.accepted.size(); ++l) {
    const bool clustered = l < s.levels.size();
    os << "level " << (clustered ? s.levels[l].k : 0) << " inertia "
       << text::format_double(clustered ? s.levels[l].inertia : 0.0) << '\n';
    if (clustered) write_embedding(os, s.levels[l].centroids);
    for (std::size_t i = 0; i < n; ++i) {
      os << s.accepted[l][i];
      if (clustered) {
        os << ' ' << s.levels[l].assignment[i] << ' '
           << text::format_double(s.levels[l].confidence[i]);
      }
      os << '\n';
    }
  }
}

inline PseudoLabelState read_state(std::istream& is) {
  auto expect = [&](const char* word) {
    std::string tok;
    if (!(is >> tok) || tok != word) {
      throw Error(ErrorCode::Parse, std::string("pseudo-label record: expected '") + word + "'");
    }
  };
  expect("ifnd-pseudo-labels");
  expect("v1");
  PseudoLabelState s;
  std::string tok;
  std::size_t levels = 0;
  std::size_t n = 0;
  expect("epoch");
  is >> s.epoch;
  expect("rate");
  is >> tok;
  s.rate = text::parse_double(tok);
  expect("levels");
  is >> levels;
  expect("samples");
  is >> n;
  if (!is) throw Error(ErrorCode::Parse, "pseudo-label record: bad header");
  bool any_clustered = false;
  for (std::size_t l = 0; l < levels; ++l) {
    std::size_t k = 0;
    expect("level");
    is >> k;
    expect("inertia");
    is >> tok;
    std::vector<std::int64_t> accepted(n);
    if (k > 0) {
      any_clustered = true;
      ClusterLevel level;
      level.k = k;
      level.inertia = text::parse_double(tok);
      level.centroids = read_embedding(is);
      level.assignment.resize(n);
      level.confidence.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        is >> accepted[i] >> level.assignment[i] >> tok;
        level.confidence[i] = text::parse_double(tok);
      }
      s.levels.push_back(std::move(level));
    } else {
      for (std::size_t i = 0; i < n; ++i) is >> accepted[i];
    }
    if (!is) throw Error(ErrorCode::Parse, "pseudo-label record truncated");
    s.accepted.push_back(std::move(accepted));
  }
  if (any_clustered && s.levels.size() != s.accepted.size()) {
    throw Error(ErrorCode::Parse, "pseudo-label record mixes clustered and bare levels");
  }
  return s;
}

}  // namespace ifnd
