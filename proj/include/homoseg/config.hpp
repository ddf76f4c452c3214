#pragma once

// Run configuration: a flat key = value text file with one [section] per
// module, plus `section.key=value` overrides from the command line.
// Unknown keys and badly typed values are rejected with a message naming
// the key (and, for type errors, the expected type).

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "homoseg/sim.hpp"
#include "homoseg/train.hpp"

namespace homoseg {

struct RelationalOptions {
  std::string checkpoint;  // phase-1 checkpoint
  std::string dataset;     // episodes used to fit the scalar projection
};

struct EvalOptions {
  std::string checkpoint;
  std::string dataset;                   // held-out episodes for segmentation metrics
  std::string rel_datasets;              // comma-separated held-out episode sets for the relation scalar
  int strip_episodes = 2;
  int strip_frames = 8;
};

struct VizOptions {
  std::string checkpoint;
  std::string dataset;
  std::string metrics;  // metrics.json whose PCA sections are plotted
  int strip_episodes = 2;
  int strip_frames = 8;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out = "out";
  sim::EpisodeConfig episode;
  int episodes = 16;
  TrainConfig train;
  RelationalOptions relational;
  EvalOptions eval;
  VizOptions viz;
};

namespace config_detail {

enum class Kind { integer, unsigned_integer, real, boolean, text };

inline const char* kind_name(Kind k) {
  switch (k) {
    case Kind::integer: return "integer";
    case Kind::unsigned_integer: return "non-negative integer";
    case Kind::real: return "number";
    case Kind::boolean: return "boolean (true/false)";
    case Kind::text: return "string";
  }
  return "?";
}

struct Entry {
  std::string key;  // section.name
  Kind kind;
  std::function<bool(RunConfig&, const std::string&)> set;  // false on type mismatch
  std::function<std::string(const RunConfig&)> get;
};

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <class V>
bool parse_number(const std::string& s, V& out) {
  if (s.empty()) return false;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if constexpr (std::is_unsigned_v<V>) {
    if (s[0] == '-') return false;
  }
  auto [p, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && p == last;
}

inline bool parse_bool(const std::string& s, bool& out) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return out = true, true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return out = false, true;
  return false;
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <class Get>
Entry int_entry(std::string key, Get field) {
  return {std::move(key), Kind::integer,
          [field](RunConfig& c, const std::string& s) { return parse_number(s, field(c)); },
          [field](const RunConfig& c) { return std::to_string(field(const_cast<RunConfig&>(c))); }};
}

template <class Get>
Entry u64_entry(std::string key, Get field) {
  return {std::move(key), Kind::unsigned_integer,
          [field](RunConfig& c, const std::string& s) { return parse_number(s, field(c)); },
          [field](const RunConfig& c) { return std::to_string(field(const_cast<RunConfig&>(c))); }};
}

template <class Get>
Entry real_entry(std::string key, Get field) {
  return {std::move(key), Kind::real,
          [field](RunConfig& c, const std::string& s) { return parse_number(s, field(c)); },
          [field](const RunConfig& c) { return fmt_double(field(const_cast<RunConfig&>(c))); }};
}

template <class Get>
Entry bool_entry(std::string key, Get field) {
  return {std::move(key), Kind::boolean,
          [field](RunConfig& c, const std::string& s) { return parse_bool(s, field(c)); },
          [field](const RunConfig& c) { return std::string(field(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

template <class Get>
Entry text_entry(std::string key, Get field) {
  return {std::move(key), Kind::text,
          [field](RunConfig& c, const std::string& s) {
            field(c) = s;
            return true;
          },
          [field](const RunConfig& c) { return field(const_cast<RunConfig&>(c)); }};
}

#define HS_FIELD(expr) [](RunConfig& c) -> auto& { return c.expr; }

inline const std::vector<Entry>& registry() {
  static const std::vector<Entry> entries = [] {
    std::vector<Entry> e;
    e.push_back(u64_entry("run.seed", HS_FIELD(seed)));
    e.push_back(text_entry("run.out", HS_FIELD(out)));

    e.push_back(int_entry("sim.episodes", HS_FIELD(episodes)));
    e.push_back(int_entry("sim.arena_w", HS_FIELD(episode.arena_w)));
    e.push_back(int_entry("sim.arena_h", HS_FIELD(episode.arena_h)));
    e.push_back(int_entry("sim.frames", HS_FIELD(episode.frames)));
    e.push_back(int_entry("sim.render_w", HS_FIELD(episode.render_w)));
    e.push_back(int_entry("sim.render_h", HS_FIELD(episode.render_h)));
    e.push_back(real_entry("sim.chaser_max_accel", HS_FIELD(episode.chaser.max_accel)));
    e.push_back(real_entry("sim.chaser_max_speed", HS_FIELD(episode.chaser.max_speed)));
    e.push_back(real_entry("sim.chaser_radius", HS_FIELD(episode.chaser.radius)));
    e.push_back(real_entry("sim.chaser_mass", HS_FIELD(episode.chaser.mass)));
    e.push_back(real_entry("sim.evader_max_accel", HS_FIELD(episode.evader.max_accel)));
    e.push_back(real_entry("sim.evader_max_speed", HS_FIELD(episode.evader.max_speed)));
    e.push_back(real_entry("sim.evader_radius", HS_FIELD(episode.evader.radius)));
    e.push_back(real_entry("sim.evader_mass", HS_FIELD(episode.evader.mass)));
    e.push_back(real_entry("sim.restitution", HS_FIELD(episode.restitution)));
    e.push_back(int_entry("sim.freeze_frames", HS_FIELD(episode.freeze_frames)));
    e.push_back(real_entry("sim.squash_amplitude", HS_FIELD(episode.squash_amplitude)));
    e.push_back(real_entry("sim.squash_tau", HS_FIELD(episode.squash_tau)));
    e.push_back(bool_entry("sim.eyes", HS_FIELD(episode.eyes)));
    e.push_back(bool_entry("sim.antialias", HS_FIELD(episode.antialias)));
    e.push_back({"sim.layout", Kind::text,
                 [](RunConfig& c, const std::string& s) {
                   if (s != "random" && s != "lane") return false;
                   c.episode.layout = sim::layout_from_string(s);
                   return true;
                 },
                 [](const RunConfig& c) { return std::string(sim::to_string(c.episode.layout)); }});

    e.push_back(int_entry("train.steps", HS_FIELD(train.steps)));
    e.push_back(int_entry("train.batch", HS_FIELD(train.batch)));
    e.push_back(real_entry("train.lr", HS_FIELD(train.lr)));
    e.push_back(real_entry("train.grad_clip", HS_FIELD(train.grad_clip)));
    e.push_back(real_entry("train.lambda_div", HS_FIELD(train.lambda_div)));
    e.push_back(real_entry("train.lambda_bin", HS_FIELD(train.lambda_bin)));
    e.push_back(real_entry("train.lambda_area", HS_FIELD(train.lambda_area)));
    e.push_back(real_entry("train.lambda_homo", HS_FIELD(train.lambda_homo)));
    e.push_back(real_entry("train.lambda_var", HS_FIELD(train.lambda_var)));
    e.push_back(int_entry("train.curriculum_threshold", HS_FIELD(train.curriculum_threshold)));
    e.push_back(int_entry("train.seg_delay", HS_FIELD(train.seg_delay)));
    e.push_back(int_entry("train.seg_warmup", HS_FIELD(train.seg_warmup)));
    e.push_back(int_entry("train.slots", HS_FIELD(train.slots)));
    e.push_back(int_entry("train.latent_dim", HS_FIELD(train.latent_dim)));
    e.push_back(real_entry("train.m_var", HS_FIELD(train.m_var)));
    e.push_back(real_entry("train.a_max", HS_FIELD(train.a_max)));
    e.push_back(int_entry("train.checkpoint_every", HS_FIELD(train.checkpoint_every)));
    e.push_back(text_entry("train.dataset", HS_FIELD(train.dataset)));
    e.push_back(int_entry("train.base_width", HS_FIELD(train.base_width)));
    e.push_back(int_entry("train.depth", HS_FIELD(train.depth)));
    e.push_back(real_entry("train.head_gain", HS_FIELD(train.head_gain)));
    e.push_back(bool_entry("train.seg_bias", HS_FIELD(train.seg_bias)));
    e.push_back(int_entry("train.phi_features", HS_FIELD(train.phi_features)));
    e.push_back(real_entry("train.log_scale_limit", HS_FIELD(train.log_scale_limit)));
    e.push_back(int_entry("train.synthetic_pairs", HS_FIELD(train.synthetic_pairs)));
    e.push_back(real_entry("train.synthetic_log_scale", HS_FIELD(train.synthetic_log_scale)));
    e.push_back(real_entry("train.synthetic_translation", HS_FIELD(train.synthetic_translation)));

    e.push_back(int_entry("relational.steps", HS_FIELD(train.rel_steps)));
    e.push_back(real_entry("relational.lr", HS_FIELD(train.rel_lr)));
    e.push_back(int_entry("relational.batch", HS_FIELD(train.rel_batch)));
    e.push_back(real_entry("relational.lambda_var", HS_FIELD(train.rel_lambda_var)));
    e.push_back(text_entry("relational.checkpoint", HS_FIELD(relational.checkpoint)));
    e.push_back(text_entry("relational.dataset", HS_FIELD(relational.dataset)));

    e.push_back(text_entry("eval.checkpoint", HS_FIELD(eval.checkpoint)));
    e.push_back(text_entry("eval.dataset", HS_FIELD(eval.dataset)));
    e.push_back(text_entry("eval.rel_datasets", HS_FIELD(eval.rel_datasets)));
    e.push_back(int_entry("eval.strip_episodes", HS_FIELD(eval.strip_episodes)));
    e.push_back(int_entry("eval.strip_frames", HS_FIELD(eval.strip_frames)));

    e.push_back(text_entry("viz.checkpoint", HS_FIELD(viz.checkpoint)));
    e.push_back(text_entry("viz.dataset", HS_FIELD(viz.dataset)));
    e.push_back(text_entry("viz.metrics", HS_FIELD(viz.metrics)));
    e.push_back(int_entry("viz.strip_episodes", HS_FIELD(viz.strip_episodes)));
    e.push_back(int_entry("viz.strip_frames", HS_FIELD(viz.strip_frames)));
    return e;
  }();
  return entries;
}

#undef HS_FIELD

inline const Entry* find(const std::string& key) {
  for (const auto& e : registry())
    if (e.key == key) return &e;
  return nullptr;
}

}  // namespace config_detail

// Sets one fully qualified key ("section.name") from its text value.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto* e = config_detail::find(key);
  if (!e) throw ConfigError("unknown config key '" + key + "'");
  if (!e->set(cfg, value)) {
    throw ConfigError("config key '" + key + "': expected " + config_detail::kind_name(e->kind) + ", got '" +
                      value + "'");
  }
}

// Applies "key = value" lines under [section] headers. Blank lines and
// lines starting with '#' or ';' are ignored.
inline void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = config_detail::trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError(origin + ":" + std::to_string(lineno) + ": malformed section header");
      section = config_detail::trim(t.substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string name = config_detail::trim(t.substr(0, eq));
    const std::string value = config_detail::trim(t.substr(eq + 1));
    const std::string key = section.empty() ? name : section + "." + name;
    set_config_value(cfg, key, value);
  }
}

// Parses `key=value` (key fully qualified).
inline void apply_override(RunConfig& cfg, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not of the form key=value");
  set_config_value(cfg, config_detail::trim(kv.substr(0, eq)), config_detail::trim(kv.substr(eq + 1)));
}

// File values (if a path is given), then overrides in order.
inline RunConfig parse_config(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig cfg;
  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config file '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    apply_config_text(cfg, ss.str(), path);
  }
  for (const auto& o : overrides) apply_override(cfg, o);
  return cfg;
}

// Every key with its resolved value, grouped by section.
inline std::string render_config(const RunConfig& cfg) {
  std::ostringstream os;
  std::string current;
  for (const auto& e : config_detail::registry()) {
    const auto dot = e.key.find('.');
    const std::string section = e.key.substr(0, dot);
    if (section != current) {
      if (!current.empty()) os << "\n";
      os << "[" << section << "]\n";
      current = section;
    }
    os << e.key.substr(dot + 1) << " = " << e.get(cfg) << "\n";
  }
  return os.str();
}

}  // namespace homoseg
