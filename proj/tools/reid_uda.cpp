// Command-line front end: data generation, training stages, clustering,
// evaluation, augmentation and the synthetic benchmark.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "reid/augment.hpp"
#include "reid/checkpoint.hpp"
#include "reid/clustering.hpp"
#include "reid/config.hpp"
#include "reid/eval.hpp"
#include "reid/featureset.hpp"
#include "reid/pipeline.hpp"

namespace fs = std::filesystem;
using namespace reid;

namespace {

constexpr int kConfigExit = 2;
constexpr int kDataExit = 3;

/// Options that mirror config-file keys; a flag given on the command line
/// overrides the file.
struct KeyOptions {
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;

  void add(CLI::App* app, const std::string& key, const std::string& help) {
    std::string flag = "--" + key;
    for (auto& ch : flag) {
      if (ch == '_') ch = '-';
    }
    options[key] = app->add_option(flag, values[key], help);
  }

  ConfigFile merge(const std::string& config_path) const {
    ConfigFile cfg = config_path.empty() ? ConfigFile{} : ConfigFile::load(config_path);
    for (const auto& [key, opt] : options) {
      if (opt->count() > 0) cfg.set(key, values.at(key));
    }
    return cfg;
  }
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

SynthConfig synth_from_config(ConfigFile& f) {
  SynthConfig s;
  s.identities = static_cast<std::int32_t>(f.get_int("identities", s.identities));
  s.samples_per_id = static_cast<std::int32_t>(f.get_int("samples_per_id", s.samples_per_id));
  s.dim = static_cast<std::int32_t>(f.get_int("dim", s.dim));
  s.domain_shift_scale = f.get_double("domain_shift_scale", s.domain_shift_scale);
  s.noise_scale = f.get_double("noise_scale", s.noise_scale);
  s.nuisance_scale = f.get_double("nuisance_scale", s.nuisance_scale);
  s.test_identities = static_cast<std::int32_t>(f.get_int("test_identities", s.test_identities));
  s.query_per_id = static_cast<std::int32_t>(f.get_int("query_per_id", s.query_per_id));
  s.gallery_per_id = static_cast<std::int32_t>(f.get_int("gallery_per_id", s.gallery_per_id));
  s.cameras = static_cast<std::int32_t>(f.get_int("cameras", s.cameras));
  s.latent_dim = static_cast<std::int32_t>(f.get_int("latent_dim", s.latent_dim));
  return s;
}

ClusterConfig cluster_from_config(ConfigFile& f) {
  ClusterConfig c;
  c.k = f.get_int("k", c.k);
  c.candidates = f.get_int("candidates", c.candidates);
  c.max_iter = f.get_int("max_iter", c.max_iter);
  c.batch_size = f.get_int("batch_size", c.batch_size);
  c.early_stop_batches = f.get_int("early_stop", c.early_stop_batches);
  c.reassign_ratio = f.get_double("reassign_ratio", c.reassign_ratio);
  c.seed = f.get_uint("seed", c.seed);
  const std::string seeding = f.get_string("seeding", "greedy");
  if (seeding == "random") {
    c.seeding = Seeding::kRandom;
  } else if (seeding != "greedy") {
    throw ConfigError("seeding must be 'greedy' or 'random'");
  }
  c.validate();
  return c;
}

AugmentConfig augment_from_config(ConfigFile& f) {
  AugmentConfig a;
  a.p_flip = f.get_double("p_flip", a.p_flip);
  a.p_global = f.get_double("p_global", a.p_global);
  a.p_local = f.get_double("p_local", a.p_local);
  a.p_erase = f.get_double("p_erase", a.p_erase);
  a.s_min = f.get_double("s_min", a.s_min);
  a.s_max = f.get_double("s_max", a.s_max);
  a.r_local = f.get_double("r_local", a.r_local);
  a.pad = static_cast<int>(f.get_int("pad", a.pad));
  a.validate();
  return a;
}

DatasetSplit require_split(const fs::path& stem, const char* what) {
  if (stem.empty()) throw ConfigError(std::string(what) + " split path is not set");
  return load_split(stem);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unsupervised domain adaptation for re-identification (desk scale)"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed = 0;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "key = value settings file");
    sub->add_option("--seed", seed, "random seed");
  };

  // synth
  auto* synth = app.add_subcommand("synth", "write a synthetic source/target pair of FEATSET splits");
  common(synth);
  std::string synth_out = "data";
  synth->add_option("--out-dir", synth_out, "output directory");
  KeyOptions synth_keys;
  for (const char* k : {"identities", "samples_per_id", "dim", "domain_shift_scale", "noise_scale", "nuisance_scale",
                        "test_identities", "query_per_id", "gallery_per_id", "cameras", "latent_dim"}) {
    synth_keys.add(synth, k, "synthetic data setting");
  }

  // pretrain
  auto* pretrain = app.add_subcommand("pretrain", "supervised training on the source split");
  common(pretrain);
  std::string pre_out, pre_report;
  pretrain->add_option("--out", pre_out, "checkpoint path (default <checkpoint_dir>/pretrained.ckpt)");
  pretrain->add_option("--report", pre_report, "run log JSON path (a .csv twin is written too)");
  KeyOptions pre_keys;
  pre_keys.add(pretrain, "source", "source split stem");
  pre_keys.add(pretrain, "checkpoint_dir", "checkpoint directory");

  // finetune
  auto* finetune = app.add_subcommand("finetune", "teacher-student adaptation on the target split");
  common(finetune);
  std::string ft_ckpt, ft_out, ft_report;
  finetune->add_option("--checkpoint", ft_ckpt, "pre-trained checkpoint")->required();
  finetune->add_option("--out", ft_out, "checkpoint path (default <checkpoint_dir>/finetuned.ckpt)");
  finetune->add_option("--report", ft_report, "run log JSON path (a .csv twin is written too)");
  KeyOptions ft_keys;
  ft_keys.add(finetune, "target", "target split stem");
  ft_keys.add(finetune, "checkpoint_dir", "checkpoint directory");

  // cluster
  auto* cluster = app.add_subcommand("cluster", "mini-batch K-means over a FEATSET file");
  common(cluster);
  std::string cl_input, cl_labels = "labels.csv", cl_report = "cluster.json";
  cluster->add_option("--input", cl_input, "FEATSET file")->required();
  cluster->add_option("--labels", cl_labels, "label CSV output");
  cluster->add_option("--report", cl_report, "JSON summary output");
  KeyOptions cl_keys;
  cl_keys.add(cluster, "k", "number of clusters");
  cl_keys.add(cluster, "candidates", "greedy seeding candidates per step (0 = 2 + ln k)");
  cl_keys.add(cluster, "max_iter", "maximum epochs");
  cl_keys.add(cluster, "batch_size", "mini-batch size");
  cl_keys.add(cluster, "early_stop", "batches without improvement before stopping");
  cl_keys.add(cluster, "reassign_ratio", "fraction of lowest-count centroids re-seeded per epoch");
  cl_keys.add(cluster, "seeding", "greedy | random");

  // evaluate
  auto* evaluate_cmd = app.add_subcommand("evaluate", "rank a gallery for every query");
  common(evaluate_cmd);
  std::string ev_query, ev_gallery, ev_ckpt, ev_report = "eval.json", ev_per_query;
  bool ev_filter = false;
  evaluate_cmd->add_option("--query", ev_query, "query FEATSET")->required();
  evaluate_cmd->add_option("--gallery", ev_gallery, "gallery FEATSET")->required();
  evaluate_cmd->add_option("--checkpoint", ev_ckpt, "embed raw inputs with this network first");
  evaluate_cmd->add_option("--report", ev_report, "JSON report path");
  evaluate_cmd->add_option("--per-query", ev_per_query, "per-query CSV path");
  evaluate_cmd->add_flag("--filter-same-camera", ev_filter, "drop same identity + same camera entries");

  // augment
  auto* augment = app.add_subcommand("augment", "augment a binary PPM image");
  common(augment);
  std::string au_input, au_output;
  augment->add_option("--input", au_input, "input PPM (P6)")->required();
  augment->add_option("--output", au_output, "output PPM")->required();
  KeyOptions au_keys;
  for (const char* k : {"p_flip", "p_global", "p_local", "p_erase", "s_min", "s_max", "r_local", "pad"}) {
    au_keys.add(augment, k, "augmentation setting");
  }

  // synth-bench
  auto* bench = app.add_subcommand("synth-bench", "end-to-end benchmark on synthetic data");
  common(bench);
  std::string bench_report = "bench.json", bench_csv;
  bool no_ablations = false;
  bench->add_option("--report", bench_report, "JSON report path");
  bench->add_option("--csv", bench_csv, "CSV report path (default: JSON path with .csv)");
  bench->add_flag("--no-ablations", no_ablations, "run only direct transfer and the full method");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigExit;
  }

  try {
    const std::string seed_text = std::to_string(seed);
    if (synth->parsed()) {
      ConfigFile f = synth_keys.merge(config_path);
      SynthConfig s = synth_from_config(f);
      s.seed = seed;
      f.finish();
      const auto [source, target] = synth_generate(s);
      fs::create_directories(synth_out);
      save_split(source, fs::path(synth_out) / "source");
      save_split(target, fs::path(synth_out) / "target");
      std::cout << "wrote " << synth_out << "/{source,target}.{train,query,gallery}.fset\n";
    } else if (pretrain->parsed()) {
      ConfigFile f = pre_keys.merge(config_path);
      f.set("seed", seed_text);
      PipelineConfig cfg = PipelineConfig::from_config(f);
      f.finish();
      const DatasetSplit source = require_split(cfg.source, "source");
      const PretrainResult res = pretrain_source(cfg, source);
      const fs::path out = pre_out.empty() ? cfg.checkpoint_dir / "pretrained.ckpt" : fs::path(pre_out);
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      save_checkpoint(res.checkpoint, out);
      const fs::path report = pre_report.empty() ? fs::path(out).replace_extension(".log.json") : fs::path(pre_report);
      write_json(report, res.log.to_json());
      write_text(fs::path(report).replace_extension(".csv"), res.log.to_csv());
      std::cout << "checkpoint " << out.string() << '\n';
    } else if (finetune->parsed()) {
      ConfigFile f = ft_keys.merge(config_path);
      f.set("seed", seed_text);
      PipelineConfig cfg = PipelineConfig::from_config(f);
      f.finish();
      const DatasetSplit target = require_split(cfg.target, "target");
      const Checkpoint pre = load_checkpoint(ft_ckpt);
      const FinetuneResult res = finetune_target(cfg, pre, target);
      const fs::path out = ft_out.empty() ? cfg.checkpoint_dir / "finetuned.ckpt" : fs::path(ft_out);
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      save_checkpoint(res.checkpoint, out);
      const fs::path report = ft_report.empty() ? fs::path(out).replace_extension(".log.json") : fs::path(ft_report);
      write_json(report, res.log.to_json());
      write_text(fs::path(report).replace_extension(".csv"), res.log.to_csv());
      std::cout << "checkpoint " << out.string() << '\n';
    } else if (cluster->parsed()) {
      ConfigFile f = cl_keys.merge(config_path);
      f.set("seed", seed_text);
      const ClusterConfig cc = cluster_from_config(f);
      f.finish();
      const FeatureSet set = load_featset(cl_input);
      const Eigen::MatrixXd points = feature_matrix(set.records);
      if (points.cols() < cc.k) throw InsufficientDataError("fewer points than clusters");
      const auto model = fit_kmeans(points, cc);
      const auto labels = assign_labels(points, model);
      std::string csv = "label\n";
      for (int y : labels.labels) csv += std::to_string(y) + "\n";
      write_text(cl_labels, csv);
      write_json(cl_report, {{"k", cc.k}, {"inertia", model.inertia}, {"iterations", model.epochs},
                             {"batches", model.batches}});
      std::cout << "inertia " << model.inertia << '\n';
    } else if (evaluate_cmd->parsed()) {
      ConfigFile f = config_path.empty() ? ConfigFile{} : ConfigFile::load(config_path);
      ev_filter = f.get_bool("filter_same_camera", ev_filter);
      f.finish();
      const FeatureSet query = load_featset(ev_query);
      const FeatureSet gallery = load_featset(ev_gallery);
      EvalReport report;
      if (ev_ckpt.empty()) {
        report = reid::evaluate(labeled_features(query.records), labeled_features(gallery.records), ev_filter);
      } else {
        const Checkpoint ckpt = load_checkpoint(ev_ckpt);
        const std::string prefix = ckpt.params.contains("teacher.head.weight") ? "teacher." : "";
        const DeskBackbone model = model_from_checkpoint(ckpt, prefix);
        report = reid::evaluate(inference_features(model, query.records),
                                inference_features(model, gallery.records), ev_filter);
      }
      write_json(ev_report, eval_to_json(report));
      if (!ev_per_query.empty()) write_text(ev_per_query, eval_per_query_csv(report));
      std::cout << "mAP " << report.map_standard << " rank1 " << report.rank_at.at(1) << '\n';
    } else if (augment->parsed()) {
      ConfigFile f = au_keys.merge(config_path);
      const AugmentConfig cfg = augment_from_config(f);
      f.finish();
      Pcg32 rng(seed);
      write_ppm(augment_image(read_ppm(au_input), cfg, rng), au_output);
    } else if (bench->parsed()) {
      ConfigFile f = config_path.empty() ? ConfigFile{} : ConfigFile::load(config_path);
      BenchConfig bc;
      bc.data = synth_from_config(f);
      bc.pipeline = PipelineConfig::from_config(f);
      const std::string sweep = f.get_string("k_sweep", "32,96");
      bc.k_sweep.clear();
      std::size_t pos = 0;
      while (pos < sweep.size()) {
        const auto comma = sweep.find(',', pos);
        const std::string item = sweep.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        if (!item.empty()) {
          try {
            bc.k_sweep.push_back(std::stoll(item));
          } catch (const std::exception&) {
            throw ConfigError("k_sweep must be a comma-separated list of integers");
          }
        }
        if (comma == std::string::npos) break;
        pos = comma + 1;
      }
      bc.ablations = !no_ablations;
      f.finish();
      const BenchReport report = synth_bench(seed, bc);
      write_json(bench_report, bench_to_json(report));
      write_text(bench_csv.empty() ? fs::path(bench_report).replace_extension(".csv") : fs::path(bench_csv),
                 bench_to_csv(report));
      for (const auto& c : report.cells) std::cout << c.name << " mAP " << c.map_standard << '\n';
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigExit;
  } catch (const Error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kDataExit;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
