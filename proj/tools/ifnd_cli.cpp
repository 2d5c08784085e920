// Command-line front end: synth, train, grid, metrics, dump.
//
// Exit codes: 0 success, 1 configuration error, 2 runtime failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ifnd/ifnd.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw ifnd::Error(ifnd::ErrorCode::Io, "cannot write " + p.string());
  return os;
}

std::ifstream open_in(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw ifnd::Error(ifnd::ErrorCode::Io, "cannot open " + p.string());
  return is;
}

bool is_config_error(const ifnd::Error& e) {
  return e.code() == ifnd::ErrorCode::Config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contrastive learning with incremental false-negative detection"};
  app.set_version_flag("--version", std::string(ifnd::kVersion));
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate Gaussian-blob features and labels");
  std::size_t classes = 5, per_class = 200, dim = 2;
  double spread = 0.15;
  std::uint64_t seed = 0;
  std::string synth_features = "features.txt", synth_labels = "labels.txt";
  synth->add_option("--classes", classes)->check(CLI::PositiveNumber);
  synth->add_option("--per-class", per_class)->check(CLI::PositiveNumber);
  synth->add_option("--dim", dim)->check(CLI::Range(2, 1 << 20));
  synth->add_option("--spread", spread)->check(CLI::NonNegativeNumber);
  synth->add_option("--seed", seed);
  synth->add_option("--features", synth_features, "Output feature matrix");
  synth->add_option("--labels", synth_labels, "Output label file");

  // train
  auto* train = app.add_subcommand("train", "Run one experiment from a config file");
  std::string train_config;
  std::vector<std::string> train_sets;
  std::string train_output;
  std::string train_resume;
  train->add_option("config", train_config, "INI config file")->required();
  train->add_option("--set", train_sets, "Override, e.g. train.epochs=10");
  train->add_option("--output", train_output, "Output directory (overrides experiment.output_dir)");
  train->add_option("--resume", train_resume, "Checkpoint to continue from");

  // grid
  auto* grid = app.add_subcommand("grid", "Run an experiment grid and summarize it");
  std::string grid_config;
  std::vector<std::string> grid_sets;
  std::size_t grid_jobs = 0;
  grid->add_option("config", grid_config, "INI config file with a [grid] section")->required();
  grid->add_option("--set", grid_sets, "Override, e.g. grid.seeds=1,2");
  grid->add_option("--jobs", grid_jobs, "Concurrent experiments (default: grid.jobs)");

  // metrics
  auto* metrics = app.add_subcommand("metrics", "MTPR / MTNR / NMI of detected labels");
  std::string true_path, detected_path;
  metrics->add_option("--true", true_path, "Ground-truth labels, one per line")->required();
  metrics->add_option("--detected", detected_path, "Detected labels (-1 = singleton)")->required();

  // dump
  auto* dump = app.add_subcommand("dump", "2-D PCA dump of encoder features");
  std::string dump_checkpoint, dump_features, dump_out = "embedding_2d.txt";
  dump->add_option("--checkpoint", dump_checkpoint)->required();
  dump->add_option("--features", dump_features, "Input samples (embedding text format)")->required();
  dump->add_option("--out", dump_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*synth) {
      const auto data = ifnd::synth_blobs(classes, per_class, dim, spread, seed);
      auto fo = open_out(synth_features);
      ifnd::write_embedding(fo, ifnd::EmbeddingMatrix(data.samples));
      auto lo = open_out(synth_labels);
      ifnd::write_labels(lo, data.true_label);
      std::cout << "wrote " << data.size() << " samples to " << synth_features << '\n';
    } else if (*train) {
      auto tree = ifnd::read_config(train_config);
      ifnd::apply_overrides(tree, train_sets);
      auto spec = ifnd::spec_from_tree(tree);
      if (!train_output.empty()) spec.output_dir = train_output;
      std::optional<ifnd::Checkpoint> ck;
      if (!train_resume.empty()) {
        auto is = open_in(train_resume);
        ck = ifnd::read_checkpoint(is);
      }
      const auto out = ifnd::run(spec, ck ? &*ck : nullptr);
      const auto& f = out.final_record;
      std::cout << spec.name << ": epoch " << f.epoch << " mtpr " << f.mtpr << " mtnr " << f.mtnr
                << " nmi " << f.nmi << " probe " << f.probe_accuracy << '\n'
                << "artifacts in " << spec.output_dir.string() << '\n';
    } else if (*grid) {
      auto tree = ifnd::read_config(grid_config);
      ifnd::apply_overrides(tree, grid_sets);
      const auto spec = ifnd::expand_grid(tree);
      const std::size_t jobs = grid_jobs ? grid_jobs : spec.jobs;
      const auto summary = ifnd::run_grid(spec, jobs, &std::cerr);
      fs::create_directories(spec.output_dir);
      auto so = open_out(spec.output_dir / "summary.csv");
      ifnd::write_summary_csv(so, summary);
      auto go = open_out(spec.output_dir / "gaps.csv");
      ifnd::write_gap_csv(go, summary.gaps);
      std::size_t failed = 0;
      for (const auto& r : summary.rows) failed += r.outcome.ok ? 0 : 1;
      std::cout << summary.rows.size() << " experiments, " << failed << " failed; summary in "
                << (spec.output_dir / "summary.csv").string() << '\n';
    } else if (*metrics) {
      auto ti = open_in(true_path);
      auto di = open_in(detected_path);
      const ifnd::LabeledSet set(ifnd::read_labels(ti), ifnd::read_labels(di));
      const auto p = ifnd::mtpr(set);
      const auto n = ifnd::mtnr(set);
      nlohmann::ordered_json j;
      j["samples"] = set.size();
      j["mtpr"] = p.value;
      j["mtnr"] = n.value;
      j["nmi"] = ifnd::nmi(set.true_labels(), set.detected_labels());
      if (p.no_pairs()) j["notice"].push_back("no same-class pairs; mtpr defaults to 0");
      if (n.no_pairs()) j["notice"].push_back("no different-class pairs; mtnr defaults to 1");
      std::cout << j.dump(2) << '\n';
    } else if (*dump) {
      auto ci = open_in(dump_checkpoint);
      const auto ck = ifnd::read_checkpoint(ci);
      auto fi = open_in(dump_features);
      const auto x = ifnd::read_embedding(fi);
      const auto v = ifnd::encode_features(ck.params, x.to_matrix());
      auto os = open_out(dump_out);
      ifnd::write_embedding(os, ifnd::pca_2d(v));
      std::cout << "wrote " << v.rows() << " points to " << dump_out << '\n';
    }
  } catch (const ifnd::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return is_config_error(e) ? kExitConfig : kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return 0;
}
