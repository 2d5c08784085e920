#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <numbers>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ifnd/embedding.hpp"
#include "ifnd/error.hpp"
#include "ifnd/losses.hpp"
#include "ifnd/matrix.hpp"
#include "ifnd/metrics.hpp"
#include "ifnd/pseudo_labels.hpp"
#include "ifnd/text.hpp"

namespace ifnd {

enum class Activation { Relu };

/// y = x W^T + b, with W stored out x in.
struct DenseLayer {
  Matrix weight;
  std::vector<double> bias;

  std::size_t in() const noexcept { return weight.cols(); }
  std::size_t out() const noexcept { return weight.rows(); }

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

/// Encoder f (input -> feature v) followed by projection head g
/// (v -> embedding before normalization). A rectifier follows every layer
/// except the last one of each network.
struct EncoderParams {
  std::vector<DenseLayer> encoder;
  std::vector<DenseLayer> head;
  Activation activation = Activation::Relu;

  std::size_t input_dim() const { return encoder.front().in(); }
  std::size_t feature_dim() const { return encoder.back().out(); }
  std::size_t embedding_dim() const { return head.back().out(); }

  void validate() const {
    if (encoder.empty() || head.empty()) {
      throw Error(ErrorCode::ShapeMismatch, "encoder and head need at least one layer each");
    }
    std::size_t width = encoder.front().in();
    auto check = [&](const std::vector<DenseLayer>& layers) {
      for (const auto& l : layers) {
        if (l.in() != width || l.bias.size() != l.out()) {
          throw Error(ErrorCode::ShapeMismatch, "layer shapes do not chain");
        }
        for (double w : l.weight.data()) {
          if (!std::isfinite(w)) throw Error(ErrorCode::InvalidArgument, "non-finite weight");
        }
        for (double b : l.bias) {
          if (!std::isfinite(b)) throw Error(ErrorCode::InvalidArgument, "non-finite bias");
        }
        width = l.out();
      }
    };
    check(encoder);
    check(head);
  }

  /// Same shapes, every entry zero.
  EncoderParams zeros_like() const {
    EncoderParams z = *this;
    for (auto* layers : {&z.encoder, &z.head}) {
      for (auto& l : *layers) {
        std::fill(l.weight.data().begin(), l.weight.data().end(), 0.0);
        std::fill(l.bias.begin(), l.bias.end(), 0.0);
      }
    }
    return z;
  }

  /// Visits (param, other-param) pairs in a fixed order.
  template <class F>
  void zip(EncoderParams& other, F&& f) {
    for (std::size_t net = 0; net < 2; ++net) {
      auto& mine = net == 0 ? encoder : head;
      auto& theirs = net == 0 ? other.encoder : other.head;
      for (std::size_t l = 0; l < mine.size(); ++l) {
        for (std::size_t k = 0; k < mine[l].weight.data().size(); ++k) {
          f(mine[l].weight.data()[k], theirs[l].weight.data()[k]);
        }
        for (std::size_t k = 0; k < mine[l].bias.size(); ++k) f(mine[l].bias[k], theirs[l].bias[k]);
      }
    }
  }

  friend bool operator==(const EncoderParams&, const EncoderParams&) = default;
};

namespace detail {

inline std::vector<DenseLayer> init_layers(const std::vector<std::size_t>& widths,
                                           std::mt19937_64& rng) {
  std::vector<DenseLayer> layers;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(widths[l]));
    std::uniform_real_distribution<double> u(-bound, bound);
    DenseLayer layer{Matrix(widths[l + 1], widths[l]), std::vector<double>(widths[l + 1])};
    for (double& w : layer.weight.data()) w = u(rng);
    for (double& b : layer.bias) b = u(rng);
    layers.push_back(std::move(layer));
  }
  return layers;
}

}  // namespace detail

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
/// `encoder_widths` runs input -> feature dim; `head_widths` starts at the
/// feature dim and ends at the embedding dim.
inline EncoderParams init_params(const std::vector<std::size_t>& encoder_widths,
                                 const std::vector<std::size_t>& head_widths, std::uint64_t seed) {
  if (encoder_widths.size() < 2 || head_widths.size() < 2) {
    throw Error(ErrorCode::ShapeMismatch, "each network needs at least an input and output width");
  }
  if (encoder_widths.back() != head_widths.front()) {
    throw Error(ErrorCode::ShapeMismatch, "head input width must equal the feature width");
  }
  for (auto w : encoder_widths) {
    if (w == 0) throw Error(ErrorCode::ShapeMismatch, "zero layer width");
  }
  for (auto w : head_widths) {
    if (w == 0) throw Error(ErrorCode::ShapeMismatch, "zero layer width");
  }
  std::mt19937_64 rng(seed);
  EncoderParams p;
  p.encoder = detail::init_layers(encoder_widths, rng);
  p.head = detail::init_layers(head_widths, rng);
  return p;
}

/// Intermediates kept by forward() for backward().
struct ForwardCache {
  std::vector<Matrix> inputs;  // input to every layer, encoder first
  std::vector<Matrix> pre;     // pre-activation output of every layer
  Matrix embeddings;           // unit rows
  std::vector<double> norms;   // norm of each head output row
  bool valid = false;
};

struct ForwardResult {
  EmbeddingMatrix features;    // v = f(x)
  EmbeddingMatrix embeddings;  // z = normalize(g(v))
  ForwardCache cache;
};

namespace detail {

inline Matrix dense_forward(const DenseLayer& layer, const Matrix& x) {
  Matrix y(x.rows(), layer.out());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t o = 0; o < layer.out(); ++o) {
      y(r, o) = layer.bias[o] + dot(layer.weight.row(o), x.row(r));
    }
  }
  return y;
}

inline void relu_inplace(Matrix& m) {
  for (double& v : m.data()) v = v > 0.0 ? v : 0.0;
}

struct LayerRef {
  const DenseLayer* layer;
  bool activated;
};

inline std::vector<LayerRef> layer_chain(const EncoderParams& p) {
  std::vector<LayerRef> chain;
  for (std::size_t l = 0; l < p.encoder.size(); ++l) {
    chain.push_back({&p.encoder[l], l + 1 < p.encoder.size()});
  }
  for (std::size_t l = 0; l < p.head.size(); ++l) {
    chain.push_back({&p.head[l], l + 1 < p.head.size()});
  }
  return chain;
}

}  // namespace detail

/// Encoder features only, no cache.
inline EmbeddingMatrix encode_features(const EncoderParams& params, const Matrix& x) {
  if (x.cols() != params.input_dim()) {
    throw Error(ErrorCode::ShapeMismatch, "input dim does not match the first layer");
  }
  Matrix h = x;
  for (std::size_t l = 0; l < params.encoder.size(); ++l) {
    h = detail::dense_forward(params.encoder[l], h);
    if (l + 1 < params.encoder.size()) detail::relu_inplace(h);
  }
  return EmbeddingMatrix(h);
}

inline ForwardResult forward(const EncoderParams& params, const Matrix& x) {
  if (x.cols() != params.input_dim()) {
    throw Error(ErrorCode::ShapeMismatch, "input dim does not match the first layer");
  }
  ForwardResult out;
  auto& cache = out.cache;
  Matrix h = x;
  std::size_t index = 0;
  for (const auto& ref : detail::layer_chain(params)) {
    cache.inputs.push_back(h);
    h = detail::dense_forward(*ref.layer, h);
    cache.pre.push_back(h);
    if (ref.activated) detail::relu_inplace(h);
    if (++index == params.encoder.size()) out.features = EmbeddingMatrix(h);
  }
  out.embeddings = normalize_rows(EmbeddingMatrix(h));
  cache.norms.resize(h.rows());
  for (std::size_t r = 0; r < h.rows(); ++r) cache.norms[r] = std::sqrt(dot(h.row(r), h.row(r)));
  cache.embeddings = out.embeddings.to_matrix();
  cache.valid = true;
  return out;
}

/// Reverse-mode pass through the head, the encoder, and the final unit
/// normalization. Returns gradients shaped like `params`.
inline EncoderParams backward(const EncoderParams& params, const ForwardCache& cache,
                              const Matrix& grad_z) {
  if (!cache.valid) throw Error(ErrorCode::MissingCache, "backward called without forward cache");
  const Matrix& z = cache.embeddings;
  if (grad_z.rows() != z.rows() || grad_z.cols() != z.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "dL/dz shape differs from the cached embeddings");
  }
  // z = u / |u|  =>  dL/du = (g - z (z . g)) / |u|
  Matrix delta(z.rows(), z.cols());
  for (std::size_t r = 0; r < z.rows(); ++r) {
    const double zg = dot(z.row(r), grad_z.row(r));
    for (std::size_t c = 0; c < z.cols(); ++c) {
      delta(r, c) = (grad_z(r, c) - z(r, c) * zg) / cache.norms[r];
    }
  }

  EncoderParams grads = params.zeros_like();
  std::vector<DenseLayer*> grad_chain;
  for (auto& l : grads.encoder) grad_chain.push_back(&l);
  for (auto& l : grads.head) grad_chain.push_back(&l);
  const auto chain = detail::layer_chain(params);

  for (std::size_t li = chain.size(); li-- > 0;) {
    const DenseLayer& layer = *chain[li].layer;
    DenseLayer& g = *grad_chain[li];
    const Matrix& input = cache.inputs[li];
    for (std::size_t r = 0; r < delta.rows(); ++r) {
      for (std::size_t o = 0; o < layer.out(); ++o) {
        const double d = delta(r, o);
        if (d == 0.0) continue;
        g.bias[o] += d;
        axpy(d, input.row(r), g.weight.row(o));
      }
    }
    if (li == 0) break;
    Matrix prev(delta.rows(), layer.in());
    for (std::size_t r = 0; r < delta.rows(); ++r) {
      for (std::size_t o = 0; o < layer.out(); ++o) {
        const double d = delta(r, o);
        if (d != 0.0) axpy(d, layer.weight.row(o), prev.row(r));
      }
    }
    if (chain[li - 1].activated) {
      const Matrix& pre = cache.pre[li - 1];
      for (std::size_t k = 0; k < prev.data().size(); ++k) {
        if (pre.data()[k] <= 0.0) prev.data()[k] = 0.0;
      }
    }
    delta = std::move(prev);
  }
  return grads;
}

/// Feature vectors with their ground-truth classes. Classes are read only by
/// metrics and by the supervised reference objective.
struct Dataset {
  Matrix samples;
  std::vector<std::int64_t> true_label;

  std::size_t size() const noexcept { return samples.rows(); }

  void validate() const {
    if (samples.rows() == 0 || samples.cols() == 0) {
      throw Error(ErrorCode::InvalidArgument, "dataset is empty");
    }
    if (true_label.size() != samples.rows()) {
      throw Error(ErrorCode::LengthMismatch, "one true label per sample required");
    }
    for (double v : samples.data()) {
      if (!std::isfinite(v)) throw Error(ErrorCode::InvalidArgument, "non-finite sample value");
    }
  }
};

struct AugmentOptions {
  double noise = 0.05;
  bool scale_jitter = true;
};

/// Two independent views: per-view scale in [0.8, 1.2] (when enabled)
/// followed by additive Gaussian noise.
inline std::pair<std::vector<double>, std::vector<double>> augment(
    std::span<const double> sample, std::mt19937_64& rng, const AugmentOptions& opts) {
  if (!(opts.noise >= 0.0)) throw Error(ErrorCode::InvalidArgument, "noise scale must be >= 0");
  auto view = [&] {
    std::vector<double> v(sample.begin(), sample.end());
    if (opts.scale_jitter) {
      std::uniform_real_distribution<double> scale(0.8, 1.2);
      const double s = scale(rng);
      for (double& x : v) x *= s;
    }
    if (opts.noise > 0.0) {
      std::normal_distribution<double> gauss(0.0, opts.noise);
      for (double& x : v) x += gauss(rng);
    }
    return v;
  };
  auto first = view();
  auto second = view();
  return {std::move(first), std::move(second)};
}

enum class TrainObjective { Inst, Elim, Attr, AttrOracle };

inline const char* to_string(TrainObjective o) noexcept {
  switch (o) {
    case TrainObjective::Inst: return "inst";
    case TrainObjective::Elim: return "elim";
    case TrainObjective::Attr: return "attr";
    case TrainObjective::AttrOracle: return "attr_oracle";
  }
  return "?";
}

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_m = 64;
  double tau = kDefaultTemperature;
  TrainObjective objective = TrainObjective::Elim;
  /// total_epochs is taken from `epochs`.
  AcceptanceSchedule schedule{};
  std::vector<std::size_t> ks{5, 15};
  std::size_t refresh_cadence = 1;
  double learning_rate = 0.1;
  bool cosine_decay = true;
  double momentum = 0.0;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  AugmentOptions augment{};
  std::vector<std::size_t> encoder_widths{2, 32, 16};
  std::vector<std::size_t> head_widths{16, 16, 8};
  std::size_t kmeans_restarts = 3;
  std::size_t kmeans_iters = 100;
  double probe_holdout = 0.2;
  std::size_t probe_epochs = 200;
  double probe_lr = 0.5;
  /// Stop once this many epochs are complete (0 runs to `epochs`). The
  /// schedule and learning-rate decay still span all `epochs`.
  std::size_t stop_after = 0;

  void validate() const {
    if (epochs == 0) throw Error(ErrorCode::Config, "epochs must be positive");
    if (batch_m < 2) throw Error(ErrorCode::Config, "batch_m must be at least 2");
    (void)Temperature{tau};
    if (ks.empty()) throw Error(ErrorCode::Config, "ks needs at least one cluster count");
    for (auto k : ks) {
      if (k == 0) throw Error(ErrorCode::Config, "cluster counts must be positive");
    }
    if (refresh_cadence == 0) throw Error(ErrorCode::Config, "refresh_cadence must be positive");
    if (!(learning_rate > 0.0)) throw Error(ErrorCode::Config, "learning_rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw Error(ErrorCode::Config, "momentum in [0,1)");
    if (weight_decay < 0.0) throw Error(ErrorCode::Config, "weight_decay must be >= 0");
    if (!(probe_holdout > 0.0 && probe_holdout < 1.0)) {
      throw Error(ErrorCode::Config, "probe_holdout must lie in (0, 1)");
    }
    AcceptanceSchedule s = schedule;
    s.total_epochs = epochs;
    s.validate();
  }

  AcceptanceSchedule resolved_schedule() const {
    AcceptanceSchedule s = schedule;
    s.total_epochs = epochs;
    return s;
  }
};

/// Everything needed to continue a run exactly where it stopped.
struct Checkpoint {
  long long epoch = -1;  // last completed epoch
  std::uint64_t step = 0;
  std::string rng_state;
  EncoderParams params;
  EncoderParams velocity;
  PseudoLabelState state;
};

struct TrainResult {
  EncoderParams params;
  std::vector<MetricRecord> records;
  PseudoLabelState state;
  Checkpoint checkpoint;
};

namespace detail {

inline LossReport batch_loss(TrainObjective objective, const ViewBatch& batch,
                             const std::vector<BatchLabels>& levels, Temperature tau) {
  switch (objective) {
    case TrainObjective::Inst: return loss_inst(batch, tau);
    case TrainObjective::AttrOracle: return loss_attr(batch, levels.front(), tau);
    case TrainObjective::Elim:
    case TrainObjective::Attr: {
      const Objective o = objective == TrainObjective::Elim ? Objective::Elim : Objective::Attr;
      if (levels.size() > 1) return hierarchical_loss(batch, levels, o, tau);
      return o == Objective::Elim ? loss_elim(batch, levels.front(), tau)
                                  : loss_attr(batch, levels.front(), tau);
    }
  }
  throw Error(ErrorCode::InvalidArgument, "unknown objective");
}

inline Matrix gather_rows(const Matrix& m, const std::vector<std::size_t>& idx) {
  Matrix out(idx.size(), m.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy(m.row(idx[r]).begin(), m.row(idx[r]).end(), out.row(r).begin());
  }
  return out;
}

template <class T>
std::vector<T> gather(const std::vector<T>& v, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(v[i]);
  return out;
}

}  // namespace detail

/// Linear-probe accuracy of the encoder features on a fixed holdout split.
struct ProbeSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

inline ProbeSplit make_probe_split(std::size_t n, double holdout, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, 0x70726f6265ULL));
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t test_n = static_cast<std::size_t>(std::llround(holdout * static_cast<double>(n)));
  test_n = std::clamp<std::size_t>(test_n, 1, n - 1);
  ProbeSplit split;
  split.test.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(test_n));
  split.train.assign(order.begin() + static_cast<std::ptrdiff_t>(test_n), order.end());
  std::sort(split.test.begin(), split.test.end());
  std::sort(split.train.begin(), split.train.end());
  return split;
}

inline double probe_accuracy(const EmbeddingMatrix& features, const std::vector<std::int64_t>& y,
                             const ProbeSplit& split, std::size_t epochs, double lr) {
  const Matrix all = features.to_matrix();
  return linear_probe(EmbeddingMatrix(detail::gather_rows(all, split.train)),
                      detail::gather(y, split.train),
                      EmbeddingMatrix(detail::gather_rows(all, split.test)),
                      detail::gather(y, split.test), epochs, lr);
}

/// Contrastive training with incremental false-negative detection.
///
/// Each epoch runs minibatch SGD on the configured objective, with the
/// latest accepted pseudo labels projected onto each batch. On clustering
/// epochs (every `refresh_cadence` epochs, and always the last one) the
/// encoder features of the whole dataset are re-clustered, the acceptance
/// rate for that epoch is applied, and a MetricRecord is appended.
/// The instance-level objective always refreshes at rate 0 so its log shows
/// the no-detection baseline; the supervised reference objective trains on
/// the true classes from the first step.
inline TrainResult train(const Dataset& data, const TrainConfig& config,
                         const Checkpoint* resume = nullptr) {
  data.validate();
  config.validate();
  if (data.samples.cols() != config.encoder_widths.front()) {
    throw Error(ErrorCode::ShapeMismatch, "dataset dim does not match the encoder input width");
  }
  if (data.size() < 2) throw Error(ErrorCode::TooFewSamples, "need at least two samples");
  const Temperature tau{config.tau};
  const AcceptanceSchedule schedule = config.resolved_schedule();
  const std::size_t n = data.size();
  const std::size_t m = std::min(config.batch_m, n);
  const ProbeSplit split = make_probe_split(n, config.probe_holdout, config.seed);
  const bool oracle = config.objective == TrainObjective::AttrOracle;

  Checkpoint ck;
  std::mt19937_64 rng(derive_seed(config.seed, 0x747261696eULL));
  if (resume) {
    ck = *resume;
    std::istringstream(ck.rng_state) >> rng;
    ck.params.validate();
  } else {
    ck.params = init_params(config.encoder_widths, config.head_widths, config.seed);
    ck.velocity = ck.params.zeros_like();
    ck.state = PseudoLabelState::singletons(n, config.ks.size());
  }
  if (ck.params.input_dim() != data.samples.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "checkpoint does not match the dataset");
  }

  const std::size_t batches_per_epoch = (n + m - 1) / m;
  const double total_steps = static_cast<double>(config.epochs * batches_per_epoch);
  RefreshOptions ropts{config.seed, config.kmeans_iters, config.kmeans_restarts, tau};

  TrainResult result;
  std::vector<std::size_t> order(n);
  const std::size_t last = config.stop_after ? std::min(config.stop_after, config.epochs)
                                             : config.epochs;
  for (std::size_t epoch = static_cast<std::size_t>(ck.epoch + 1); epoch < last; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t loss_count = 0;

    for (std::size_t start = 0; start < n; start += m) {
      const std::size_t count = std::min(m, n - start);
      if (count < 2) break;
      Matrix views(2 * count, data.samples.cols());
      std::vector<std::vector<std::int64_t>> source_labels(
          oracle ? 1 : ck.state.accepted.size(), std::vector<std::int64_t>(count));
      for (std::size_t j = 0; j < count; ++j) {
        const std::size_t src = order[start + j];
        auto [a, b] = augment(data.samples.row(src), rng, config.augment);
        std::copy(a.begin(), a.end(), views.row(2 * j).begin());
        std::copy(b.begin(), b.end(), views.row(2 * j + 1).begin());
        for (std::size_t l = 0; l < source_labels.size(); ++l) {
          source_labels[l][j] = oracle ? data.true_label[src] : ck.state.accepted[l][src];
        }
      }
      std::vector<BatchLabels> levels;
      for (const auto& sl : source_labels) levels.push_back(BatchLabels::from_sources(sl));

      ForwardResult fwd;
      try {
        fwd = forward(ck.params, views);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::InvalidArgument) throw;
        throw Error(ErrorCode::NonFiniteLoss, "activations diverged at epoch " +
                                                  std::to_string(epoch) + ": " + e.what());
      }
      const LossReport report =
          detail::batch_loss(config.objective, ViewBatch(fwd.embeddings), levels, tau);
      if (!std::isfinite(report.value)) {
        throw Error(ErrorCode::NonFiniteLoss, "loss diverged at epoch " + std::to_string(epoch));
      }
      loss_sum += report.value;
      ++loss_count;

      EncoderParams grads = backward(ck.params, fwd.cache, report.grad);
      double lr = config.learning_rate;
      if (config.cosine_decay) {
        lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(ck.step) / total_steps));
      }
      ck.params.zip(grads, [&](double&, double& g) {
        if (!std::isfinite(g)) {
          throw Error(ErrorCode::NonFiniteLoss, "non-finite gradient at epoch " +
                                                    std::to_string(epoch));
        }
      });
      // Weight decay folds into the gradient before the momentum buffer.
      ck.params.zip(grads, [&](double& p, double& g) { g += config.weight_decay * p; });
      ck.velocity.zip(grads, [&](double& v, double& g) { v = config.momentum * v + g; });
      ck.params.zip(ck.velocity, [&](double& p, double& v) { p -= lr * v; });
      ++ck.step;
    }

    const bool clustering_epoch =
        epoch % config.refresh_cadence == 0 || epoch + 1 == config.epochs;
    if (clustering_epoch) {
      const EmbeddingMatrix v = encode_features(ck.params, data.samples);
      const double rate = config.objective == TrainObjective::Elim ||
                                  config.objective == TrainObjective::Attr
                              ? rate_at(schedule, epoch)
                              : 0.0;
      ck.state = refresh_at_rate(v, config.ks, rate, static_cast<long long>(epoch), ropts);

      MetricRecord rec;
      rec.epoch = epoch;
      const LabeledSet detected(data.true_label, oracle ? data.true_label : ck.state.accepted[0]);
      rec.mtpr = mtpr(detected).value;
      rec.mtnr = mtnr(detected).value;
      rec.nmi = nmi(ck.state.levels[0].assignment, data.true_label);
      rec.loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
      rec.probe_accuracy =
          probe_accuracy(v, data.true_label, split, config.probe_epochs, config.probe_lr);
      result.records.push_back(rec);
    }
    ck.epoch = static_cast<long long>(epoch);
  }

  std::ostringstream rng_out;
  rng_out << rng;
  ck.rng_state = rng_out.str();
  result.params = ck.params;
  result.state = ck.state;
  result.checkpoint = std::move(ck);
  return result;
}

// Checkpoint text format, versioned by its first line.

namespace detail {

inline void write_layers(std::ostream& os, const char* name, const std::vector<DenseLayer>& ls) {
  os << name << ' ' << ls.size() << '\n';
  for (const auto& l : ls) {
    os << "layer " << l.out() << ' ' << l.in() << '\n';
    for (std::size_t r = 0; r < l.out(); ++r) {
      for (std::size_t c = 0; c < l.in(); ++c) {
        if (c) os << ' ';
        os << text::format_double(l.weight(r, c));
      }
      os << '\n';
    }
    for (std::size_t r = 0; r < l.out(); ++r) {
      if (r) os << ' ';
      os << text::format_double(l.bias[r]);
    }
    os << '\n';
  }
}

inline std::vector<DenseLayer> read_layers(std::istream& is, const char* name) {
  std::string tok;
  std::size_t count = 0;
  if (!(is >> tok >> count) || tok != name) {
    throw Error(ErrorCode::Parse, std::string("checkpoint: expected '") + name + "'");
  }
  std::vector<DenseLayer> ls;
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t out = 0;
    std::size_t in = 0;
    if (!(is >> tok >> out >> in) || tok != "layer") {
      throw Error(ErrorCode::Parse, "checkpoint: bad layer header");
    }
    DenseLayer l{Matrix(out, in), std::vector<double>(out)};
    for (double& w : l.weight.data()) {
      is >> tok;
      w = text::parse_double(tok);
    }
    for (double& b : l.bias) {
      is >> tok;
      b = text::parse_double(tok);
    }
    if (!is) throw Error(ErrorCode::Parse, "checkpoint: truncated layer");
    ls.push_back(std::move(l));
  }
  return ls;
}

}  // namespace detail

inline void write_params(std::ostream& os, const EncoderParams& p) {
  detail::write_layers(os, "encoder", p.encoder);
  detail::write_layers(os, "head", p.head);
}

inline EncoderParams read_params(std::istream& is) {
  EncoderParams p;
  p.encoder = detail::read_layers(is, "encoder");
  p.head = detail::read_layers(is, "head");
  p.validate();
  return p;
}

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  os << "ifnd-checkpoint v1\n";
  os << "epoch " << ck.epoch << "\nstep " << ck.step << '\n';
  os << "rng " << ck.rng_state << '\n';
  os << "params\n";
  write_params(os, ck.params);
  os << "velocity\n";
  write_params(os, ck.velocity);
  write_state(os, ck.state);
}

inline Checkpoint read_checkpoint(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || text::trim(line) != "ifnd-checkpoint v1") {
    throw Error(ErrorCode::Parse, "not an ifnd-checkpoint v1 file");
  }
  Checkpoint ck;
  std::string tok;
  if (!(is >> tok >> ck.epoch) || tok != "epoch") throw Error(ErrorCode::Parse, "checkpoint: epoch");
  if (!(is >> tok >> ck.step) || tok != "step") throw Error(ErrorCode::Parse, "checkpoint: step");
  if (!(is >> tok) || tok != "rng") throw Error(ErrorCode::Parse, "checkpoint: rng");
  std::getline(is, ck.rng_state);
  ck.rng_state = std::string(text::trim(ck.rng_state));
  if (!(is >> tok) || tok != "params") throw Error(ErrorCode::Parse, "checkpoint: params");
  ck.params = read_params(is);
  if (!(is >> tok) || tok != "velocity") throw Error(ErrorCode::Parse, "checkpoint: velocity");
  ck.velocity = read_params(is);
  ck.state = read_state(is);
  return ck;
}

}  // namespace ifnd
