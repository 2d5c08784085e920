#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "ifnd/embedding.hpp"
#include "ifnd/error.hpp"
#include "ifnd/metrics.hpp"
#include "ifnd/pseudo_labels.hpp"
#include "ifnd/text.hpp"
#include "ifnd/trainer.hpp"
#include "json.hpp"

#ifndef IFND_VERSION
#define IFND_VERSION "0.1.0-unknown"
#endif

namespace ifnd {

inline constexpr const char* kVersion = IFND_VERSION;

// ---------------------------------------------------------------- datasets

/// Gaussian blobs around class means drawn uniformly on the unit sphere.
/// Samples come out class-major (all of class 0, then class 1, ...).
inline Dataset synth_blobs(std::size_t classes, std::size_t per_class, std::size_t dim,
                           double spread, std::uint64_t seed) {
  if (classes < 1 || per_class < 1 || dim < 2) {
    throw Error(ErrorCode::InvalidArgument, "synth_blobs needs classes>=1, per_class>=1, dim>=2");
  }
  if (!(spread >= 0.0)) throw Error(ErrorCode::InvalidArgument, "spread must be >= 0");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix means(classes, dim);
  for (std::size_t c = 0; c < classes; ++c) {
    double norm = 0.0;
    while (norm < 1e-9) {
      for (double& v : means.row(c)) v = gauss(rng);
      norm = std::sqrt(dot(means.row(c), means.row(c)));
    }
    for (double& v : means.row(c)) v /= norm;
  }
  Dataset data{Matrix(classes * per_class, dim), {}};
  data.true_label.reserve(classes * per_class);
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t s = 0; s < per_class; ++s) {
      auto row = data.samples.row(c * per_class + s);
      for (std::size_t k = 0; k < dim; ++k) {
        row[k] = means(c, k) + (spread > 0.0 ? spread * gauss(rng) : 0.0);
      }
      data.true_label.push_back(static_cast<std::int64_t>(c));
    }
  }
  return data;
}

inline void write_labels(std::ostream& os, const std::vector<std::int64_t>& labels) {
  for (auto l : labels) os << l << '\n';
}

inline std::vector<std::int64_t> read_labels(std::istream& is) {
  std::vector<std::int64_t> out;
  std::string line;
  while (std::getline(is, line)) {
    if (text::trim(line).empty()) continue;
    out.push_back(text::parse_int(line));
  }
  return out;
}

namespace detail {

inline std::ifstream open_in(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw Error(ErrorCode::Io, "cannot open " + p.string());
  return is;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(ErrorCode::Io, "cannot write " + p.string());
  return os;
}

}  // namespace detail

/// Features in the embedding text format plus one integer label per line.
inline Dataset load_dataset(const std::filesystem::path& features,
                            const std::filesystem::path& labels) {
  auto fs = detail::open_in(features);
  auto ls = detail::open_in(labels);
  Dataset d{read_embedding(fs).to_matrix(), read_labels(ls)};
  d.validate();
  return d;
}

// --------------------------------------------------------------------- PCA

/// Projects rows onto the two leading principal components, found by power
/// iteration with deflation on the covariance matrix.
inline EmbeddingMatrix pca_2d(const EmbeddingMatrix& m) {
  const std::size_t n = m.rows();
  const std::size_t d = m.dim();
  if (n == 0) throw Error(ErrorCode::InvalidArgument, "pca needs at least one row");
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) axpy(1.0 / static_cast<double>(n), m.row(i), mean);
  Matrix cov(d, d);
  std::vector<double> centered(d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) centered[k] = m(i, k) - mean[k];
    for (std::size_t a = 0; a < d; ++a) axpy(centered[a] / static_cast<double>(n), centered, cov.row(a));
  }
  Matrix components(2, d);
  for (std::size_t pc = 0; pc < std::min<std::size_t>(2, d); ++pc) {
    std::vector<double> v(d);
    for (std::size_t k = 0; k < d; ++k) v[k] = 1.0 + 0.01 * static_cast<double>(k);
    std::vector<double> next(d);
    for (int iter = 0; iter < 2000; ++iter) {
      for (std::size_t a = 0; a < d; ++a) next[a] = dot(cov.row(a), v);
      const double norm = std::sqrt(dot(next, next));
      if (norm < 1e-300) break;
      double change = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        next[k] /= norm;
        change = std::max(change, std::abs(next[k] - v[k]));
      }
      v.swap(next);
      if (change < 1e-13) break;
    }
    const double norm = std::sqrt(dot(v, v));
    if (norm > 0.0) {
      for (double& x : v) x /= norm;
    }
    // Sign convention: largest-magnitude coordinate positive.
    std::size_t arg = 0;
    for (std::size_t k = 1; k < d; ++k) {
      if (std::abs(v[k]) > std::abs(v[arg])) arg = k;
    }
    if (v[arg] < 0.0) {
      for (double& x : v) x = -x;
    }
    std::copy(v.begin(), v.end(), components.row(pc).begin());
    std::vector<double> cv(d);
    for (std::size_t a = 0; a < d; ++a) cv[a] = dot(cov.row(a), v);
    const double lambda = dot(v, cv);
    for (std::size_t a = 0; a < d; ++a) {
      for (std::size_t b = 0; b < d; ++b) cov(a, b) -= lambda * v[a] * v[b];
    }
  }
  std::vector<double> out(n * 2);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) centered[k] = m(i, k) - mean[k];
    out[2 * i] = dot(components.row(0), centered);
    out[2 * i + 1] = dot(components.row(1), centered);
  }
  return EmbeddingMatrix(n, 2, std::move(out));
}

// ------------------------------------------------------------------ config

struct DatasetSpec {
  std::size_t classes = 5;
  std::size_t per_class = 200;
  std::size_t dim = 2;
  double spread = 0.15;
  std::uint64_t seed = 0;
  std::string features_path;  // external features instead of synthetic blobs
  std::string labels_path;
};

struct ExperimentSpec {
  std::string name = "run";
  DatasetSpec dataset;
  TrainConfig train;
  std::filesystem::path output_dir = "out";
};

namespace detail {

inline std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  for (const auto& tok : text::split(s, ',')) {
    if (tok.empty()) continue;
    const auto v = text::parse_int(tok);
    if (v < 0) throw Error(ErrorCode::Config, "negative size in list '" + s + "'");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw Error(ErrorCode::Config, "not a boolean: '" + s + "'");
}

}  // namespace detail

inline TrainObjective parse_objective(const std::string& s) {
  if (s == "inst") return TrainObjective::Inst;
  if (s == "elim") return TrainObjective::Elim;
  if (s == "attr") return TrainObjective::Attr;
  if (s == "attr_oracle" || s == "supcon") return TrainObjective::AttrOracle;
  throw Error(ErrorCode::Config, "unknown objective '" + s + "' (inst|elim|attr|attr_oracle)");
}

inline Scheme parse_scheme(const std::string& s) {
  if (s == "constant") return Scheme::Constant;
  if (s == "step") return Scheme::Step;
  if (s == "linear") return Scheme::Linear;
  throw Error(ErrorCode::Config, "unknown schedule scheme '" + s + "' (constant|step|linear)");
}

using ConfigTree = boost::property_tree::ptree;

/// Reads an INI-style config ([experiment], [dataset], [train], [schedule]
/// sections) into an ExperimentSpec. Keys absent from the file keep their
/// defaults; unknown keys are rejected. A step schedule without step_epoch
/// switches at a tenth of the training epochs.
inline ExperimentSpec spec_from_tree(const ConfigTree& tree) {
  static const std::map<std::string, std::set<std::string>> known = {
      {"experiment", {"name", "output_dir"}},
      {"dataset", {"classes", "per_class", "dim", "spread", "seed", "features", "labels"}},
      {"train",
       {"epochs", "batch_m", "tau", "objective", "ks", "refresh_cadence", "learning_rate",
        "cosine_decay", "momentum", "weight_decay", "seed", "noise", "scale_jitter", "encoder",
        "head", "kmeans_restarts", "kmeans_iters", "probe_holdout", "probe_epochs", "probe_lr",
        "stop_after"}},
      {"schedule", {"scheme", "initial", "final", "step_epoch"}},
      {"grid",
       {"variants", "objectives", "schemes", "finals", "classes", "seeds", "jobs", "samples",
        "ks_per_class"}},
  };
  for (const auto& [section, body] : tree) {
    auto it = known.find(section);
    if (it == known.end()) throw Error(ErrorCode::Config, "unknown section [" + section + "]");
    for (const auto& [key, _] : body) {
      if (!it->second.count(key)) {
        throw Error(ErrorCode::Config, "unknown key '" + key + "' in [" + section + "]");
      }
    }
  }

  ExperimentSpec spec;
  auto get = [&](const std::string& path) -> std::optional<std::string> {
    if (auto v = tree.get_optional<std::string>(path)) return std::string(text::trim(*v));
    return std::nullopt;
  };
  auto get_size = [&](const std::string& path, std::size_t& out) {
    if (auto v = get(path)) {
      const auto x = text::parse_int(*v);
      if (x < 0) throw Error(ErrorCode::Config, path + " must be non-negative");
      out = static_cast<std::size_t>(x);
    }
  };
  auto get_u64 = [&](const std::string& path, std::uint64_t& out) {
    if (auto v = get(path)) out = static_cast<std::uint64_t>(text::parse_int(*v));
  };
  auto get_double = [&](const std::string& path, double& out) {
    if (auto v = get(path)) out = text::parse_double(*v);
  };
  auto get_bool = [&](const std::string& path, bool& out) {
    if (auto v = get(path)) out = detail::parse_bool(*v);
  };

  try {
    if (auto v = get("experiment.name")) spec.name = *v;
    if (auto v = get("experiment.output_dir")) spec.output_dir = *v;

    auto& ds = spec.dataset;
    get_size("dataset.classes", ds.classes);
    get_size("dataset.per_class", ds.per_class);
    get_size("dataset.dim", ds.dim);
    get_double("dataset.spread", ds.spread);
    get_u64("dataset.seed", ds.seed);
    if (auto v = get("dataset.features")) ds.features_path = *v;
    if (auto v = get("dataset.labels")) ds.labels_path = *v;

    auto& tc = spec.train;
    get_size("train.epochs", tc.epochs);
    get_size("train.batch_m", tc.batch_m);
    get_double("train.tau", tc.tau);
    if (auto v = get("train.objective")) tc.objective = parse_objective(*v);
    if (auto v = get("train.ks")) tc.ks = detail::parse_sizes(*v);
    get_size("train.refresh_cadence", tc.refresh_cadence);
    get_double("train.learning_rate", tc.learning_rate);
    get_bool("train.cosine_decay", tc.cosine_decay);
    get_double("train.momentum", tc.momentum);
    get_double("train.weight_decay", tc.weight_decay);
    get_u64("train.seed", tc.seed);
    get_double("train.noise", tc.augment.noise);
    get_bool("train.scale_jitter", tc.augment.scale_jitter);
    std::vector<std::size_t> enc{32, 16};
    std::vector<std::size_t> head{16, 8};
    if (auto v = get("train.encoder")) enc = detail::parse_sizes(*v);
    if (auto v = get("train.head")) head = detail::parse_sizes(*v);
    if (enc.empty() || head.empty()) throw Error(ErrorCode::Config, "encoder/head need widths");
    get_size("train.kmeans_restarts", tc.kmeans_restarts);
    get_size("train.kmeans_iters", tc.kmeans_iters);
    get_double("train.probe_holdout", tc.probe_holdout);
    get_size("train.probe_epochs", tc.probe_epochs);
    get_double("train.probe_lr", tc.probe_lr);
    get_size("train.stop_after", tc.stop_after);

    auto& sc = tc.schedule;
    if (auto v = get("schedule.scheme")) sc.scheme = parse_scheme(*v);
    get_double("schedule.initial", sc.initial_rate);
    get_double("schedule.final", sc.final_rate);
    sc.step_epoch = tc.epochs / 10;
    get_size("schedule.step_epoch", sc.step_epoch);
    sc.total_epochs = tc.epochs;
    if (sc.scheme == Scheme::Constant) sc.initial_rate = sc.final_rate;

    std::size_t input_dim = ds.dim;
    if (!ds.features_path.empty()) {
      auto is = detail::open_in(ds.features_path);
      std::size_t rows = 0;
      if (!(is >> rows >> input_dim)) {
        throw Error(ErrorCode::Config, "cannot read header of " + ds.features_path);
      }
      if (ds.labels_path.empty()) {
        throw Error(ErrorCode::Config, "dataset.features needs dataset.labels");
      }
    }
    tc.encoder_widths = {input_dim};
    tc.encoder_widths.insert(tc.encoder_widths.end(), enc.begin(), enc.end());
    tc.head_widths = {enc.back()};
    tc.head_widths.insert(tc.head_widths.end(), head.begin(), head.end());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::Config) throw;
    throw Error(ErrorCode::Config, e.what());
  }
  try {
    spec.train.validate();
  } catch (const Error& e) {
    if (e.code() == ErrorCode::Config) throw;
    throw Error(ErrorCode::Config, e.what());
  }
  return spec;
}

inline ConfigTree spec_to_tree(const ExperimentSpec& spec) {
  ConfigTree t;
  t.put("experiment.name", spec.name);
  t.put("experiment.output_dir", spec.output_dir.string());
  const auto& ds = spec.dataset;
  if (ds.features_path.empty()) {
    t.put("dataset.classes", ds.classes);
    t.put("dataset.per_class", ds.per_class);
    t.put("dataset.dim", ds.dim);
    t.put("dataset.spread", text::format_double(ds.spread));
    t.put("dataset.seed", ds.seed);
  } else {
    t.put("dataset.features", ds.features_path);
    t.put("dataset.labels", ds.labels_path);
  }
  const auto& tc = spec.train;
  t.put("train.epochs", tc.epochs);
  t.put("train.batch_m", tc.batch_m);
  t.put("train.tau", text::format_double(tc.tau));
  t.put("train.objective", to_string(tc.objective));
  t.put("train.ks", detail::join_sizes(tc.ks));
  t.put("train.refresh_cadence", tc.refresh_cadence);
  t.put("train.learning_rate", text::format_double(tc.learning_rate));
  t.put("train.cosine_decay", tc.cosine_decay ? "true" : "false");
  t.put("train.momentum", text::format_double(tc.momentum));
  t.put("train.weight_decay", text::format_double(tc.weight_decay));
  t.put("train.seed", tc.seed);
  t.put("train.noise", text::format_double(tc.augment.noise));
  t.put("train.scale_jitter", tc.augment.scale_jitter ? "true" : "false");
  t.put("train.encoder", detail::join_sizes({tc.encoder_widths.begin() + 1, tc.encoder_widths.end()}));
  t.put("train.head", detail::join_sizes({tc.head_widths.begin() + 1, tc.head_widths.end()}));
  t.put("train.kmeans_restarts", tc.kmeans_restarts);
  t.put("train.kmeans_iters", tc.kmeans_iters);
  t.put("train.probe_holdout", text::format_double(tc.probe_holdout));
  t.put("train.probe_epochs", tc.probe_epochs);
  t.put("train.probe_lr", text::format_double(tc.probe_lr));
  if (tc.stop_after) t.put("train.stop_after", tc.stop_after);
  t.put("schedule.scheme", to_string(tc.schedule.scheme));
  t.put("schedule.initial", text::format_double(tc.schedule.initial_rate));
  t.put("schedule.final", text::format_double(tc.schedule.final_rate));
  t.put("schedule.step_epoch", tc.schedule.step_epoch);
  return t;
}

inline ConfigTree read_config(const std::filesystem::path& path) {
  ConfigTree t;
  try {
    boost::property_tree::read_ini(path.string(), t);
  } catch (const boost::property_tree::ptree_error& e) {
    throw Error(ErrorCode::Config, e.what());
  }
  return t;
}

/// Applies "section.key=value" overrides on top of a parsed config.
inline void apply_overrides(ConfigTree& tree, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || o.substr(0, eq).find('.') == std::string::npos) {
      throw Error(ErrorCode::Config, "override must look like section.key=value: " + o);
    }
    tree.put(std::string(text::trim(o.substr(0, eq))), std::string(text::trim(o.substr(eq + 1))));
  }
}

// --------------------------------------------------------------------- run

struct RunOutcome {
  std::string name;
  bool ok = false;
  std::string error;
  MetricRecord final_record;
  std::vector<MetricRecord> records;
};

inline Dataset materialize_dataset(const DatasetSpec& ds) {
  if (!ds.features_path.empty()) return load_dataset(ds.features_path, ds.labels_path);
  return synth_blobs(ds.classes, ds.per_class, ds.dim, ds.spread, ds.seed);
}

/// Trains one experiment and writes its artifacts under output_dir:
/// metrics.csv, checkpoint.txt, pseudo_labels.txt, embedding_2d.txt,
/// embedding_labels.txt, config.ini and manifest.json. Throws on failure.
inline RunOutcome run(const ExperimentSpec& spec, const Checkpoint* resume = nullptr) {
  namespace fs = std::filesystem;
  const Dataset data = materialize_dataset(spec.dataset);
  TrainResult result = train(data, spec.train, resume);

  fs::create_directories(spec.output_dir);
  const fs::path dir = spec.output_dir;
  {
    const fs::path p = dir / "metrics.csv";
    if (resume && fs::exists(p)) {
      std::ofstream os(p, std::ios::binary | std::ios::app);
      for (const auto& r : result.records) write_metric_row(os, r);
    } else {
      auto os = detail::open_out(p);
      write_metrics_csv(os, result.records);
    }
  }
  {
    auto os = detail::open_out(dir / "checkpoint.txt");
    write_checkpoint(os, result.checkpoint);
  }
  {
    auto os = detail::open_out(dir / "pseudo_labels.txt");
    write_state(os, result.state);
  }
  {
    auto os = detail::open_out(dir / "embedding_2d.txt");
    write_embedding(os, pca_2d(encode_features(result.params, data.samples)));
  }
  {
    auto os = detail::open_out(dir / "embedding_labels.txt");
    os << "true detected\n";
    for (std::size_t i = 0; i < data.size(); ++i) {
      os << data.true_label[i] << ' '
         << (result.state.accepted.empty() ? kSingleton : result.state.accepted[0][i]) << '\n';
    }
  }
  {
    auto os = detail::open_out(dir / "config.ini");
    boost::property_tree::write_ini(os, spec_to_tree(spec));
  }

  RunOutcome out;
  out.name = spec.name;
  out.ok = true;
  out.records = result.records;
  if (!result.records.empty()) out.final_record = result.records.back();

  nlohmann::ordered_json manifest;
  manifest["name"] = spec.name;
  manifest["version"] = kVersion;
  manifest["objective"] = to_string(spec.train.objective);
  manifest["schedule"] = spec.train.resolved_schedule().describe();
  manifest["ks"] = spec.train.ks;
  manifest["epochs"] = spec.train.epochs;
  manifest["seed"] = spec.train.seed;
  manifest["samples"] = data.size();
  manifest["config"] = "config.ini";
  manifest["files"] = {{"metrics", "metrics.csv"},
                       {"checkpoint", "checkpoint.txt"},
                       {"pseudo_labels", "pseudo_labels.txt"},
                       {"embedding_2d", "embedding_2d.txt"},
                       {"embedding_labels", "embedding_labels.txt"},
                       {"config", "config.ini"}};
  manifest["final"] = {{"epoch", out.final_record.epoch},
                       {"mtpr", out.final_record.mtpr},
                       {"mtnr", out.final_record.mtnr},
                       {"nmi", out.final_record.nmi},
                       {"loss", out.final_record.loss},
                       {"probe_acc", out.final_record.probe_accuracy}};
  auto os = detail::open_out(dir / "manifest.json");
  os << manifest.dump(2) << '\n';
  return out;
}

// -------------------------------------------------------------------- grid

/// One objective/schedule combination of a grid.
struct GridVariant {
  TrainObjective objective = TrainObjective::Elim;
  Scheme scheme = Scheme::Linear;
  double initial = 0.0;
  double final_rate = 1.0;
};

struct GridSpec {
  std::vector<ExperimentSpec> experiments;
  std::size_t jobs = 1;
  std::filesystem::path output_dir = "out";
};

inline std::string variant_tag(const GridVariant& v) {
  return std::string(to_string(v.objective)) + "-" + to_string(v.scheme) + "-" +
         text::format_double(v.initial) + "-" + text::format_double(v.final_rate);
}

/// Expands [grid] over classes x seeds x variants, in that nesting order.
/// Variants come either from an explicit `variants` list
/// ("objective:scheme:initial:final", comma separated) or from the
/// cartesian product objectives x schemes x finals with the base initial
/// rate. Each seed drives both the dataset and the training seed. A
/// `samples` entry keeps the dataset size fixed across class counts, and
/// `ks_per_class` sets the cluster counts as multiples of the class count.
inline GridSpec expand_grid(const ConfigTree& tree) {
  ConfigTree base_tree = tree;
  base_tree.erase("grid");
  const ExperimentSpec base = spec_from_tree(base_tree);
  GridSpec grid;
  grid.output_dir = base.output_dir;

  auto list = [&](const char* key) -> std::vector<std::string> {
    auto v = tree.get_optional<std::string>(std::string("grid.") + key);
    if (!v || text::trim(*v).empty()) return {};
    return text::split(*v, ',');
  };
  try {
    if (auto j = tree.get_optional<std::string>("grid.jobs")) {
      grid.jobs = static_cast<std::size_t>(std::max<std::int64_t>(1, text::parse_int(*j)));
    }
    std::vector<GridVariant> variants;
    if (auto explicit_variants = list("variants"); !explicit_variants.empty()) {
      for (const auto& v : explicit_variants) {
        const auto parts = text::split(v, ':');
        if (parts.size() != 4) {
          throw Error(ErrorCode::Config, "variant must be objective:scheme:initial:final: " + v);
        }
        variants.push_back({parse_objective(parts[0]), parse_scheme(parts[1]),
                            text::parse_double(parts[2]), text::parse_double(parts[3])});
      }
    } else {
      auto objectives = list("objectives");
      auto schemes = list("schemes");
      auto finals = list("finals");
      if (objectives.empty()) objectives = {to_string(base.train.objective)};
      if (schemes.empty()) schemes = {to_string(base.train.schedule.scheme)};
      if (finals.empty()) finals = {text::format_double(base.train.schedule.final_rate)};
      for (const auto& o : objectives) {
        for (const auto& s : schemes) {
          for (const auto& f : finals) {
            const double fr = text::parse_double(f);
            const Scheme sc = parse_scheme(s);
            variants.push_back({parse_objective(o), sc,
                                sc == Scheme::Constant ? fr : base.train.schedule.initial_rate, fr});
          }
        }
      }
    }
    std::vector<std::size_t> classes;
    for (const auto& c : list("classes")) classes.push_back(static_cast<std::size_t>(text::parse_int(c)));
    if (classes.empty()) classes = {base.dataset.classes};
    std::vector<std::uint64_t> seeds;
    for (const auto& s : list("seeds")) seeds.push_back(static_cast<std::uint64_t>(text::parse_int(s)));
    if (seeds.empty()) seeds = {base.train.seed};

    std::size_t samples = 0;
    if (auto v = tree.get_optional<std::string>("grid.samples")) {
      samples = static_cast<std::size_t>(std::max<std::int64_t>(0, text::parse_int(*v)));
    }

    std::vector<std::size_t> ks_per_class;
    for (const auto& f : list("ks_per_class")) {
      const auto x = text::parse_int(f);
      if (x <= 0) throw Error(ErrorCode::Config, "grid.ks_per_class entries must be positive");
      ks_per_class.push_back(static_cast<std::size_t>(x));
    }

    std::set<std::string> names;
    for (auto c : classes) {
      for (auto s : seeds) {
        for (const auto& v : variants) {
          ExperimentSpec e = base;
          if (e.dataset.features_path.empty()) {
            e.dataset.classes = c;
            if (samples) e.dataset.per_class = std::max<std::size_t>(1, samples / c);
          }
          if (!ks_per_class.empty()) {
            e.train.ks.clear();
            for (auto f : ks_per_class) e.train.ks.push_back(f * e.dataset.classes);
          }
          e.dataset.seed = s;
          e.train.seed = s;
          e.train.objective = v.objective;
          e.train.schedule.scheme = v.scheme;
          e.train.schedule.initial_rate = v.initial;
          e.train.schedule.final_rate = v.final_rate;
          e.train.validate();
          e.name = base.name + "-c" + std::to_string(c) + "-s" + std::to_string(s) + "-" +
                   variant_tag(v);
          if (!names.insert(e.name).second) {
            throw Error(ErrorCode::Config, "duplicate experiment name " + e.name);
          }
          e.output_dir = base.output_dir / e.name;
          grid.experiments.push_back(std::move(e));
        }
      }
    }
  } catch (const Error& e) {
    if (e.code() == ErrorCode::Config) throw;
    throw Error(ErrorCode::Config, e.what());
  }
  return grid;
}

struct GridRow {
  ExperimentSpec spec;
  RunOutcome outcome;
};

/// Per (class count, seed) probe-accuracy gaps between the supervised
/// reference and the self-supervised runs. The first run of each objective
/// in that cell is used.
struct GapRow {
  std::size_t classes = 0;
  std::uint64_t seed = 0;
  std::optional<double> oracle, inst, elim;

  std::optional<double> delta_oracle_inst() const {
    if (oracle && inst) return *oracle - *inst;
    return std::nullopt;
  }
  std::optional<double> delta_oracle_elim() const {
    if (oracle && elim) return *oracle - *elim;
    return std::nullopt;
  }
};

struct GridSummary {
  std::vector<GridRow> rows;
  std::vector<GapRow> gaps;
};

inline std::vector<GapRow> compute_gaps(const std::vector<GridRow>& rows) {
  std::vector<GapRow> gaps;
  for (const auto& r : rows) {
    const auto c = r.spec.dataset.classes;
    const auto s = r.spec.train.seed;
    auto it = std::find_if(gaps.begin(), gaps.end(),
                           [&](const GapRow& g) { return g.classes == c && g.seed == s; });
    if (it == gaps.end()) {
      gaps.push_back({c, s, {}, {}, {}});
      it = gaps.end() - 1;
    }
    if (!r.outcome.ok) continue;
    const double acc = r.outcome.final_record.probe_accuracy;
    switch (r.spec.train.objective) {
      case TrainObjective::AttrOracle: if (!it->oracle) it->oracle = acc; break;
      case TrainObjective::Inst: if (!it->inst) it->inst = acc; break;
      case TrainObjective::Elim: if (!it->elim) it->elim = acc; break;
      case TrainObjective::Attr: break;
    }
  }
  return gaps;
}

inline constexpr const char* kSummaryHeader =
    "name,objective,scheme,initial,final,classes,seed,status,mtpr,mtnr,nmi,probe_acc";
inline constexpr const char* kGapHeader =
    "classes,seed,probe_oracle,probe_inst,probe_elim,delta_oracle_inst,delta_oracle_elim";

inline void write_summary_csv(std::ostream& os, const GridSummary& summary) {
  os << kSummaryHeader << '\n';
  for (const auto& r : summary.rows) {
    const auto& tc = r.spec.train;
    os << r.spec.name << ',' << to_string(tc.objective) << ',' << to_string(tc.schedule.scheme)
       << ',' << text::format_double(tc.schedule.initial_rate) << ','
       << text::format_double(tc.schedule.final_rate) << ',' << r.spec.dataset.classes << ','
       << tc.seed << ',';
    if (r.outcome.ok) {
      const auto& f = r.outcome.final_record;
      os << "OK," << text::format_double(f.mtpr) << ',' << text::format_double(f.mtnr) << ','
         << text::format_double(f.nmi) << ',' << text::format_double(f.probe_accuracy) << '\n';
    } else {
      os << "FAILED,,,,\n";
    }
  }
}

inline void write_gap_csv(std::ostream& os, const std::vector<GapRow>& gaps) {
  auto opt = [](const std::optional<double>& v) { return v ? text::format_double(*v) : ""; };
  os << kGapHeader << '\n';
  for (const auto& g : gaps) {
    os << g.classes << ',' << g.seed << ',' << opt(g.oracle) << ',' << opt(g.inst) << ','
       << opt(g.elim) << ',' << opt(g.delta_oracle_inst()) << ',' << opt(g.delta_oracle_elim())
       << '\n';
  }
}

/// Runs every experiment (up to `jobs` at a time, each on its own worker),
/// collecting failures as FAILED rows instead of stopping. Row order
/// follows the grid regardless of completion order.
inline GridSummary run_grid(const GridSpec& grid, std::size_t jobs,
                            std::ostream* log = nullptr) {
  GridSummary summary;
  summary.rows.resize(grid.experiments.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= grid.experiments.size()) return;
      GridRow& row = summary.rows[i];
      row.spec = grid.experiments[i];
      try {
        row.outcome = run(row.spec);
      } catch (const std::exception& e) {
        row.outcome.name = row.spec.name;
        row.outcome.ok = false;
        row.outcome.error = e.what();
      }
      if (log) {
        std::lock_guard lock(log_mutex);
        *log << (row.outcome.ok ? "done   " : "FAILED ") << row.spec.name;
        if (!row.outcome.ok) *log << ": " << row.outcome.error;
        *log << '\n';
      }
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(jobs, grid.experiments.size()));
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  summary.gaps = compute_gaps(summary.rows);
  return summary;
}

}  // namespace ifnd
