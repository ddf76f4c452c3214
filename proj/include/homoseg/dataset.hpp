#pragma once

// On-disk dataset: one binary file per episode plus manifest.json.
//
// Episode file (magic "HSEP"): config snapshot (JSON text), T/H/W, frame
// tensor (float32), ground-truth agent states, masks (u8) and the collision
// event list. The manifest lists episode files and the generating config.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "homoseg/binary_io.hpp"
#include "homoseg/sim.hpp"

namespace homoseg {

inline constexpr std::uint32_t kEpisodeFormatVersion = 1;
inline constexpr std::uint32_t kManifestFormatVersion = 1;

namespace sim {

inline void to_json(nlohmann::json& j, const KindParams& k) {
  j = {{"max_accel", k.max_accel}, {"max_speed", k.max_speed}, {"radius", k.radius}, {"mass", k.mass}};
}
inline void from_json(const nlohmann::json& j, KindParams& k) {
  k.max_accel = j.at("max_accel").get<double>();
  k.max_speed = j.at("max_speed").get<double>();
  k.radius = j.at("radius").get<double>();
  k.mass = j.at("mass").get<double>();
}

inline void to_json(nlohmann::json& j, const EpisodeConfig& c) {
  j = {{"arena_w", c.arena_w},
       {"arena_h", c.arena_h},
       {"frames", c.frames},
       {"render_w", c.render_w},
       {"render_h", c.render_h},
       {"chaser", c.chaser},
       {"evader", c.evader},
       {"restitution", c.restitution},
       {"freeze_frames", c.freeze_frames},
       {"squash_amplitude", c.squash_amplitude},
       {"squash_tau", c.squash_tau},
       {"seed", c.seed},
       {"eyes", c.eyes},
       {"antialias", c.antialias},
       {"layout", to_string(c.layout)}};
}

inline void from_json(const nlohmann::json& j, EpisodeConfig& c) {
  c.arena_w = j.at("arena_w").get<int>();
  c.arena_h = j.at("arena_h").get<int>();
  c.frames = j.at("frames").get<int>();
  c.render_w = j.at("render_w").get<int>();
  c.render_h = j.at("render_h").get<int>();
  c.chaser = j.at("chaser").get<KindParams>();
  c.evader = j.at("evader").get<KindParams>();
  c.restitution = j.at("restitution").get<double>();
  c.freeze_frames = j.at("freeze_frames").get<int>();
  c.squash_amplitude = j.at("squash_amplitude").get<double>();
  c.squash_tau = j.at("squash_tau").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.eyes = j.at("eyes").get<bool>();
  c.antialias = j.at("antialias").get<bool>();
  c.layout = layout_from_string(j.at("layout").get<std::string>());
}

}  // namespace sim

namespace detail {

inline void write_state(io::Writer& w, const sim::AgentState& s) {
  w.pod(static_cast<std::uint8_t>(s.kind));
  for (double v : {s.pos.x, s.pos.y, s.vel.x, s.vel.y, s.radius, s.mass, s.sx, s.sy}) w.pod(v);
  w.pod<std::int32_t>(s.frozen_remaining);
  w.pod<std::int32_t>(s.frames_since_collision ? *s.frames_since_collision : -1);
  w.pod<std::int32_t>(s.squash_axis);
}

inline sim::AgentState read_state(io::Reader& r) {
  sim::AgentState s;
  const auto kind = r.pod<std::uint8_t>();
  if (kind > 1) throw io::CorruptError("bad agent kind");
  s.kind = static_cast<sim::AgentKind>(kind);
  s.pos.x = r.pod<double>();
  s.pos.y = r.pod<double>();
  s.vel.x = r.pod<double>();
  s.vel.y = r.pod<double>();
  s.radius = r.pod<double>();
  s.mass = r.pod<double>();
  s.sx = r.pod<double>();
  s.sy = r.pod<double>();
  s.frozen_remaining = r.pod<std::int32_t>();
  const auto fsc = r.pod<std::int32_t>();
  if (fsc >= 0) s.frames_since_collision = fsc;
  s.squash_axis = r.pod<std::int32_t>();
  return s;
}

inline void write_vec2(io::Writer& w, sim::Vec2 v) {
  w.pod(v.x);
  w.pod(v.y);
}

inline sim::Vec2 read_vec2(io::Reader& r) {
  sim::Vec2 v;
  v.x = r.pod<double>();
  v.y = r.pod<double>();
  return v;
}

}  // namespace detail

inline void write_episode(const sim::Episode& ep, const std::filesystem::path& path) {
  io::Writer w;
  w.str(nlohmann::json(ep.config).dump());
  const Shape s = ep.frames.shape();
  w.pod<std::int32_t>(s.n);
  w.pod<std::int32_t>(s.h);
  w.pod<std::int32_t>(s.w);
  w.vec(ep.frames.storage());
  w.pod<std::uint64_t>(ep.gt_states.size());
  for (const auto& pair : ep.gt_states)
    for (const auto& st : pair) detail::write_state(w, st);
  w.vec(ep.gt_masks.storage());
  w.pod<std::uint64_t>(ep.events.size());
  for (const auto& e : ep.events) {
    w.pod<std::int32_t>(e.frame);
    detail::write_vec2(w, e.normal);
    detail::write_vec2(w, e.momentum_before);
    detail::write_vec2(w, e.momentum_after);
    w.pod(e.energy_before);
    w.pod(e.energy_after);
  }
  io::write_file(path, "HSEP", kEpisodeFormatVersion, w);
}

inline sim::Episode read_episode(const std::filesystem::path& path) {
  io::Reader r = io::read_file(path, "HSEP", kEpisodeFormatVersion);
  sim::Episode ep;
  try {
    ep.config = nlohmann::json::parse(r.str()).get<sim::EpisodeConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw io::CorruptError("'" + path.string() + "': bad config snapshot: " + e.what());
  }
  const int T = r.pod<std::int32_t>();
  const int H = r.pod<std::int32_t>();
  const int W = r.pod<std::int32_t>();
  if (T <= 0 || H <= 0 || W <= 0) throw io::CorruptError("'" + path.string() + "': bad dimensions");
  auto frames = r.vec<float>();
  if (frames.size() != static_cast<std::size_t>(T) * 3 * H * W) throw io::CorruptError("frame tensor size mismatch");
  ep.frames = Tensor<float>(Shape{T, 3, H, W}, std::move(frames));
  const auto ns = r.pod<std::uint64_t>();
  if (ns != static_cast<std::uint64_t>(T)) throw io::CorruptError("state count mismatch");
  ep.gt_states.resize(ns);
  for (auto& pair : ep.gt_states)
    for (auto& st : pair) st = detail::read_state(r);
  auto masks = r.vec<std::uint8_t>();
  if (masks.size() != static_cast<std::size_t>(T) * 2 * H * W) throw io::CorruptError("mask tensor size mismatch");
  ep.gt_masks = Tensor<std::uint8_t>(Shape{T, 2, H, W}, std::move(masks));
  const auto ne = r.pod<std::uint64_t>();
  if (ne > static_cast<std::uint64_t>(T)) throw io::CorruptError("event count exceeds frame count");
  ep.events.resize(ne);
  for (auto& e : ep.events) {
    e.frame = r.pod<std::int32_t>();
    e.normal = detail::read_vec2(r);
    e.momentum_before = detail::read_vec2(r);
    e.momentum_after = detail::read_vec2(r);
    e.energy_before = r.pod<double>();
    e.energy_after = r.pod<double>();
  }
  if (!r.at_end()) throw io::CorruptError("'" + path.string() + "': trailing bytes");
  return ep;
}

inline std::string episode_filename(std::size_t i) {
  std::ostringstream os;
  os << "episode_" << std::setw(5) << std::setfill('0') << i << ".hsep";
  return os.str();
}

// Writes episodes plus manifest.json into `dir` (created if missing).
inline void write_dataset(const std::vector<sim::Episode>& episodes, const std::filesystem::path& dir,
                          const sim::EpisodeConfig& global) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format_version"] = kManifestFormatVersion;
  manifest["episode_format_version"] = kEpisodeFormatVersion;
  manifest["config"] = global;
  manifest["episodes"] = nlohmann::json::array();
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const auto name = episode_filename(i);
    write_episode(episodes[i], dir / name);
    manifest["episodes"].push_back(
        {{"file", name}, {"seed", episodes[i].config.seed}, {"frames", episodes[i].length()}});
  }
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

struct Dataset {
  sim::EpisodeConfig config;
  std::vector<sim::Episode> episodes;
};

inline Dataset read_dataset(const std::filesystem::path& dir) {
  const auto mpath = dir / "manifest.json";
  std::ifstream in(mpath);
  if (!in) throw std::runtime_error("dataset manifest not found: '" + mpath.string() + "'");
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw io::CorruptError("'" + mpath.string() + "': " + e.what());
  }
  if (manifest.value("format_version", 0u) != kManifestFormatVersion) {
    throw io::VersionError("'" + mpath.string() + "': unsupported manifest version");
  }
  Dataset ds;
  try {
    ds.config = manifest.at("config").get<sim::EpisodeConfig>();
    for (const auto& e : manifest.at("episodes")) ds.episodes.push_back(read_episode(dir / e.at("file").get<std::string>()));
  } catch (const nlohmann::json::exception& e) {
    throw io::CorruptError("'" + mpath.string() + "': " + e.what());
  }
  return ds;
}

}  // namespace homoseg
