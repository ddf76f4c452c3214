#pragma once

// Command-line front end: generate / train / train-rel / eval / viz.
//
// Exit codes:
//   0  success
//   1  other failure (I/O error writing outputs, internal error)
//   2  configuration error (bad flag, unknown key, type mismatch, invalid value)
//   3  missing input artifact (dataset or checkpoint not found)
//   4  numerical failure (non-finite loss or gradient)
//   5  unreadable input artifact (wrong format version or corrupt file)

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "homoseg/config.hpp"
#include "homoseg/dataset.hpp"
#include "homoseg/eval.hpp"
#include "homoseg/train.hpp"

namespace homoseg::cli {

enum ExitCode : int { ok = 0, failure = 1, config_error = 2, missing_input = 3, numerical_failure = 4, bad_input = 5 };

class MissingArtifact : public std::runtime_error {
 public:
  MissingArtifact(const std::string& category, const std::string& path)
      : std::runtime_error(category + ": '" + path + "' does not exist"), category_(category) {}
  const std::string& category() const { return category_; }

 private:
  std::string category_;
};

inline Dataset load_dataset_checked(const std::string& dir, const char* key) {
  if (dir.empty()) throw ConfigError(std::string("config key '") + key + "' must name a dataset directory");
  if (!std::filesystem::exists(std::filesystem::path(dir) / "manifest.json")) {
    throw MissingArtifact("missing-dataset", dir);
  }
  return read_dataset(dir);
}

inline Checkpoint load_checkpoint_checked(const std::string& path, const char* key) {
  if (path.empty()) throw ConfigError(std::string("config key '") + key + "' must name a checkpoint file");
  if (!std::filesystem::is_regular_file(path)) throw MissingArtifact("missing-checkpoint", path);
  return load_checkpoint(path);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const auto item = config_detail::trim(s.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    if (!item.empty()) out.push_back(item);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

inline void write_resolved_config(const RunConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream f(dir / "resolved_config.ini", std::ios::trunc);
  f << render_config(cfg);
  if (!f) throw std::runtime_error("cannot write '" + (dir / "resolved_config.ini").string() + "'");
}

inline void validate_episode(const sim::EpisodeConfig& c) {
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

inline int cmd_generate(RunConfig cfg, std::ostream& out) {
  cfg.episode.seed = cfg.seed;
  validate_episode(cfg.episode);
  if (cfg.episodes <= 0) throw ConfigError("config key 'sim.episodes' must be positive");
  const std::filesystem::path dir = cfg.out;
  write_resolved_config(cfg, dir);
  const auto eps = sim::generate_dataset(cfg.episode, cfg.episodes);
  write_dataset(eps, dir, cfg.episode);
  out << "wrote " << eps.size() << " episodes to " << dir.string() << "\n";
  return ok;
}

inline int cmd_train(RunConfig cfg, const std::string& resume, std::ostream& out, std::ostream& err) {
  cfg.train.seed = cfg.seed;
  cfg.train.validate();
  const Dataset ds = load_dataset_checked(cfg.train.dataset, "train.dataset");
  TrainOptions opts;
  opts.out_dir = cfg.out;
  if (!resume.empty()) {
    if (!std::filesystem::is_regular_file(resume)) throw MissingArtifact("missing-checkpoint", resume);
    opts.resume_from = resume;
  }
  opts.progress = &err;
  opts.progress_every = 100;
  write_resolved_config(cfg, opts.out_dir);
  const auto res = train_phase1(cfg.train, ds, opts);
  out << "phase-1 checkpoint: " << res.checkpoint_path.string() << " (recent homo residual "
      << res.final_homo_residual << ")\n";
  return ok;
}

inline int cmd_train_rel(RunConfig cfg, std::ostream& out, std::ostream& err) {
  const Checkpoint phase1 = load_checkpoint_checked(cfg.relational.checkpoint, "relational.checkpoint");
  const Dataset ds = load_dataset_checked(cfg.relational.dataset, "relational.dataset");
  TrainOptions opts;
  opts.out_dir = cfg.out;
  opts.progress = &err;
  opts.progress_every = 200;
  write_resolved_config(cfg, opts.out_dir);
  const auto res = train_phase2_relational(phase1, ds, opts, cfg.train);
  if (res.frozen_hash_before != res.frozen_hash_after) {
    throw std::runtime_error("frozen phase-1 parameters changed during relational training");
  }
  out << "phase-2 checkpoint: " << res.checkpoint_path.string() << "\n";
  return ok;
}

inline int cmd_eval(RunConfig cfg, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint_checked(cfg.eval.checkpoint, "eval.checkpoint");
  std::optional<Dataset> seg;
  if (!cfg.eval.dataset.empty()) seg = load_dataset_checked(cfg.eval.dataset, "eval.dataset");
  std::vector<Dataset> rel;
  for (const auto& d : split_list(cfg.eval.rel_datasets)) rel.push_back(load_dataset_checked(d, "eval.rel_datasets"));
  EvalInputs in;
  if (seg) in.segmentation = &*seg;
  for (const auto& d : rel) in.relations.push_back(&d);
  const std::filesystem::path dir = cfg.out;
  write_resolved_config(cfg, dir);
  const auto rep = evaluate(ckpt, cfg.eval.checkpoint, in);
  const auto files = emit_report(rep, dir);
  if (seg) emit_mask_strips(model_from_checkpoint(ckpt), *seg, dir, cfg.eval.strip_episodes, cfg.eval.strip_frames);
  out << "metrics: " << files.metrics.string() << "\n";
  if (rep.ari) out << "foreground ARI " << *rep.ari << "  degeneracy " << rep.degeneracy << "\n";
  for (const auto& r : rep.relations) {
    out << "relation scalar (" << r.layout << "): spearman " << (r.spearman ? std::to_string(*r.spearman) : "undefined")
        << "\n";
  }
  return ok;
}

inline int cmd_viz(RunConfig cfg, std::ostream& out) {
  const bool strips = !cfg.viz.checkpoint.empty() || !cfg.viz.dataset.empty();
  if (!strips && cfg.viz.metrics.empty()) {
    throw ConfigError("viz needs 'viz.metrics' and/or 'viz.checkpoint' with 'viz.dataset'");
  }
  const std::filesystem::path dir = cfg.out;
  std::optional<MetricsReport> rep;
  if (!cfg.viz.metrics.empty()) {
    if (!std::filesystem::is_regular_file(cfg.viz.metrics)) throw MissingArtifact("missing-metrics", cfg.viz.metrics);
    rep = read_metrics(cfg.viz.metrics);
  }
  std::optional<Checkpoint> ckpt;
  std::optional<Dataset> ds;
  if (strips) {
    ckpt = load_checkpoint_checked(cfg.viz.checkpoint, "viz.checkpoint");
    ds = load_dataset_checked(cfg.viz.dataset, "viz.dataset");
  }
  write_resolved_config(cfg, dir);
  if (rep) {
    for (const auto& r : rep->relations) {
      if (!r.pca_coords) continue;
      const auto p = dir / ("pca_scatter_" + r.layout + ".png");
      write_png(scatter_plot(*r.pca_coords, r.s), p);
      out << "wrote " << p.string() << "\n";
    }
  }
  if (strips) {
    for (const auto& p :
         emit_mask_strips(model_from_checkpoint(*ckpt), *ds, dir, cfg.viz.strip_episodes, cfg.viz.strip_frames)) {
      out << "wrote " << p.string() << "\n";
    }
  }
  return ok;
}

// Parses arguments and runs one subcommand; never throws.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"homoseg: unsupervised agent segmentation with transformation-consistency losses"};
  app.require_subcommand(1, 1);
  std::string config_path, out_dir, resume;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "configuration file ([section] key = value)");
    sub->add_option("--seed", seed, "global seed");
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--set", overrides, "override section.key=value (repeatable)")->take_all();
  };
  auto* gen = app.add_subcommand("generate", "simulate episodes and write a dataset");
  auto* train = app.add_subcommand("train", "train segmentation, encoder and homomorphism (phase 1)");
  auto* rel = app.add_subcommand("train-rel", "fit the scalar relation projection on a frozen phase-1 model");
  auto* ev = app.add_subcommand("eval", "compute metrics, scatter plots and mask strips");
  auto* viz = app.add_subcommand("viz", "render scatter plots and mask strips");
  for (auto* s : {gen, train, rel, ev, viz}) add_common(s);
  train->add_option("--resume", resume, "resume from a phase-1 checkpoint");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return ok;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return ok;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return config_error;
  }

  try {
    RunConfig cfg = parse_config(config_path, overrides);
    if (seed) cfg.seed = *seed;
    if (!out_dir.empty()) cfg.out = out_dir;
    err << "# resolved configuration\n" << render_config(cfg) << std::flush;
    if (gen->parsed()) return cmd_generate(cfg, out);
    if (train->parsed()) return cmd_train(cfg, resume, out, err);
    if (rel->parsed()) return cmd_train_rel(cfg, out, err);
    if (ev->parsed()) return cmd_eval(cfg, out);
    return cmd_viz(cfg, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return config_error;
  } catch (const MissingArtifact& e) {
    err << "missing input: " << e.what() << "\n";
    return missing_input;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return numerical_failure;
  } catch (const io::FormatError& e) {
    err << "unreadable input: " << e.what() << "\n";
    return bad_input;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return failure;
  }
}

}  // namespace homoseg::cli
