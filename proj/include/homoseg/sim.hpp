#pragma once

// Deterministic 2-D chaser/evader simulator and flat-shaded renderer.
//
// One step is: policy acceleration -> semi-implicit Euler with wall
// reflection -> pairwise elastic collision -> squash-and-stretch update ->
// render. Everything is a pure function of the EpisodeConfig (seed included).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "homoseg/rng.hpp"
#include "homoseg/tensor.hpp"

namespace homoseg::sim {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend bool operator==(const Vec2&, const Vec2&) = default;
  double dot(Vec2 o) const { return x * o.x + y * o.y; }
  double norm() const { return std::hypot(x, y); }
};

// Unit vector along v; (1, 0) when v is zero.
inline Vec2 unit_or_default(Vec2 v) {
  const double n = v.norm();
  if (n == 0.0) return {1.0, 0.0};
  return {v.x / n, v.y / n};
}

inline Vec2 clamp_norm(Vec2 v, double max_norm) {
  const double n = v.norm();
  if (n <= max_norm) return v;
  return (max_norm / n) * v;
}

enum class AgentKind : std::uint8_t { chaser = 0, evader = 1 };

inline const char* to_string(AgentKind k) { return k == AgentKind::chaser ? "chaser" : "evader"; }

enum class Layout : std::uint8_t {
  random = 0,  // uniform positions, random headings
  lane = 1,    // shared horizontal line, chaser starts on the left
};

inline const char* to_string(Layout l) { return l == Layout::lane ? "lane" : "random"; }
inline Layout layout_from_string(const std::string& s) {
  if (s == "random") return Layout::random;
  if (s == "lane") return Layout::lane;
  throw std::invalid_argument("unknown layout '" + s + "' (expected random|lane)");
}

struct AgentState {
  AgentKind kind = AgentKind::chaser;
  Vec2 pos;
  Vec2 vel;
  double radius = 6.0;
  double mass = 1.0;
  double sx = 1.0;
  double sy = 1.0;
  int frozen_remaining = 0;
  std::optional<int> frames_since_collision;
  // Axis compressed by the last collision: 0 = x, 1 = y.
  int squash_axis = 0;

  friend bool operator==(const AgentState&, const AgentState&) = default;
};

struct KindParams {
  double max_accel = 0.5;
  double max_speed = 3.0;
  double radius = 6.0;
  double mass = 1.0;
  friend bool operator==(const KindParams&, const KindParams&) = default;
};

struct EpisodeConfig {
  int arena_w = 64;
  int arena_h = 64;
  int frames = 200;
  int render_w = 64;
  int render_h = 64;
  KindParams chaser{0.5, 3.0, 6.0, 1.0};
  KindParams evader{0.35, 2.0, 6.0, 1.0};
  double restitution = 1.0;
  int freeze_frames = 10;
  double squash_amplitude = 0.3;
  double squash_tau = 5.0;
  std::uint64_t seed = 0;
  bool eyes = true;
  bool antialias = true;
  Layout layout = Layout::random;

  friend bool operator==(const EpisodeConfig&, const EpisodeConfig&) = default;

  const KindParams& params(AgentKind k) const { return k == AgentKind::chaser ? chaser : evader; }

  // Throws std::invalid_argument naming the first violated constraint.
  void validate() const {
    auto need = [](bool ok, const char* what) {
      if (!ok) throw std::invalid_argument(std::string("invalid episode config: ") + what);
    };
    need(arena_w > 0 && arena_h > 0, "arena size must be positive");
    need(frames > 0, "frame count must be positive");
    need(render_w > 0 && render_h > 0, "render resolution must be positive");
    for (const KindParams* k : {&chaser, &evader}) {
      need(k->max_accel > 0 && k->max_speed > 0, "accelerations and speeds must be positive");
      need(k->radius > 0 && k->mass > 0, "radius and mass must be positive");
    }
    need(chaser.max_speed > evader.max_speed, "chaser max speed must exceed evader max speed");
    need(chaser.max_accel > evader.max_accel, "chaser max acceleration must exceed evader's");
    need(restitution > 0 && restitution <= 1, "restitution must lie in (0, 1]");
    need(freeze_frames >= 0, "freeze_frames must be non-negative");
    need(squash_amplitude >= 0 && squash_tau > 0, "squash amplitude >= 0 and tau > 0 required");
  }
};

struct CollisionEvent {
  int frame = 0;
  Vec2 normal;
  Vec2 momentum_before;
  Vec2 momentum_after;
  double energy_before = 0.0;
  double energy_after = 0.0;
  friend bool operator==(const CollisionEvent&, const CollisionEvent&) = default;
};

using AgentPair = std::array<AgentState, 2>;  // [chaser, evader]

struct Episode {
  EpisodeConfig config;
  Tensor<float> frames;              // (T, 3, H, W), values in [0, 1]
  std::vector<AgentPair> gt_states;  // T snapshots
  Tensor<std::uint8_t> gt_masks;     // (T, 2, H, W), {0, 1}
  std::vector<CollisionEvent> events;

  int length() const { return frames.shape().n; }
  int height() const { return frames.shape().h; }
  int width() const { return frames.shape().w; }

  friend bool operator==(const Episode&, const Episode&) = default;
};

class CollisionResult {
 public:
  AgentState a;
  AgentState b;
  std::optional<CollisionEvent> event;
};

inline Vec2 momentum(const AgentState& a, const AgentState& b) {
  return a.mass * a.vel + b.mass * b.vel;
}

inline double kinetic_energy(const AgentState& a, const AgentState& b) {
  return 0.5 * a.mass * a.vel.dot(a.vel) + 0.5 * b.mass * b.vel.dot(b.vel);
}

// Acceleration chosen by the agent's policy.
inline Vec2 policy_accel(const AgentState& agent, const AgentState& other, const EpisodeConfig& cfg) {
  if (agent.frozen_remaining > 0) return {0.0, 0.0};
  const double a_max = cfg.params(agent.kind).max_accel;
  if (agent.kind == AgentKind::chaser) return a_max * unit_or_default(other.pos - agent.pos);
  return a_max * unit_or_default(agent.pos - other.pos);
}

// Semi-implicit Euler with dt = 1 frame and elastic walls.
inline AgentState integrate(const AgentState& state, Vec2 accel, const EpisodeConfig& cfg) {
  AgentState s = state;
  s.vel = clamp_norm(s.vel + accel, cfg.params(s.kind).max_speed);
  s.pos = s.pos + s.vel;
  const double r = s.radius;
  const double W = cfg.arena_w;
  const double H = cfg.arena_h;
  if (s.pos.x < r) {
    s.pos.x = r;
    s.vel.x = std::abs(s.vel.x);
  } else if (s.pos.x > W - r) {
    s.pos.x = W - r;
    s.vel.x = -std::abs(s.vel.x);
  }
  if (s.pos.y < r) {
    s.pos.y = r;
    s.vel.y = std::abs(s.vel.y);
  } else if (s.pos.y > H - r) {
    s.pos.y = H - r;
    s.vel.y = -std::abs(s.vel.y);
  }
  if (s.frozen_remaining > 0) --s.frozen_remaining;
  if (s.frames_since_collision) ++*s.frames_since_collision;
  return s;
}

// Squash-and-stretch factors (stretch, 1 / stretch) a given number of frames
// after a collision; (1, 1) when there has been none.
inline std::pair<double, double> deform_at(std::optional<int> frames_since_collision,
                                           const EpisodeConfig& cfg) {
  if (!frames_since_collision) return {1.0, 1.0};
  const double t = static_cast<double>(*frames_since_collision);
  const double s = 1.0 + cfg.squash_amplitude * std::exp(-t / cfg.squash_tau);
  return {s, 1.0 / s};
}

// Maps (stretch, 1/stretch) onto the image axes: the compressed axis is the
// one the collision normal mostly points along.
inline std::pair<double, double> oriented_deform(std::pair<double, double> d, int squash_axis) {
  return squash_axis == 0 ? std::pair{d.second, d.first} : d;
}

inline CollisionResult detect_resolve_collision(const AgentState& a, const AgentState& b,
                                                const EpisodeConfig& cfg) {
  CollisionResult res{a, b, std::nullopt};
  const Vec2 d = b.pos - a.pos;
  const double dist = d.norm();
  const double contact = a.radius + b.radius;
  if (!(dist < contact)) return res;

  const Vec2 n = unit_or_default(d);
  const double ua = a.vel.dot(n);
  const double ub = b.vel.dot(n);

  // Separate to exact contact, split by inverse mass.
  const double overlap = contact - dist;
  const double msum = a.mass + b.mass;
  res.a.pos = a.pos - (overlap * b.mass / msum) * n;
  res.b.pos = b.pos + (overlap * a.mass / msum) * n;

  if (ua - ub <= 0.0) return res;  // already separating: no impulse

  const double e = cfg.restitution;
  const double va = (a.mass * ua + b.mass * ub + b.mass * e * (ub - ua)) / msum;
  const double vb = (a.mass * ua + b.mass * ub + a.mass * e * (ua - ub)) / msum;
  res.a.vel = a.vel + (va - ua) * n;
  res.b.vel = b.vel + (vb - ub) * n;

  const int axis = std::abs(n.x) >= std::abs(n.y) ? 0 : 1;
  for (AgentState* s : {&res.a, &res.b}) {
    s->frozen_remaining = cfg.freeze_frames;
    if (s->kind == AgentKind::evader) {
      s->frames_since_collision = 0;
      s->squash_axis = axis;
    }
  }

  CollisionEvent ev;
  ev.normal = n;
  ev.momentum_before = momentum(a, b);
  ev.momentum_after = momentum(res.a, res.b);
  ev.energy_before = kinetic_energy(a, b);
  ev.energy_after = kinetic_energy(res.a, res.b);
  res.event = ev;
  return res;
}

struct Palette {
  std::array<float, 3> background{0.0f, 0.0f, 0.0f};
  std::array<float, 3> chaser{0.85f, 0.15f, 0.15f};
  std::array<float, 3> evader{0.15f, 0.35f, 0.85f};
  std::array<float, 3> eye{0.95f, 0.95f, 0.95f};
};

namespace detail {

struct Ellipse {
  double cx, cy, rx, ry;
  bool contains(double x, double y) const {
    const double dx = (x - cx) / rx;
    const double dy = (y - cy) / ry;
    return dx * dx + dy * dy <= 1.0;
  }
};

inline Ellipse body_of(const AgentState& s) {
  return {s.pos.x, s.pos.y, s.radius * s.sx, s.radius * s.sy};
}

// Eye dots at +-30 degrees around the heading, inside the (deformed) body.
inline std::array<Ellipse, 2> eyes_of(const AgentState& s) {
  const Vec2 h = unit_or_default(s.vel);
  const double ang = std::numbers::pi / 6.0;
  std::array<Ellipse, 2> out{};
  for (int i = 0; i < 2; ++i) {
    const double a = i == 0 ? ang : -ang;
    const Vec2 dir{h.x * std::cos(a) - h.y * std::sin(a), h.x * std::sin(a) + h.y * std::cos(a)};
    const double off = 0.55 * s.radius;
    const double er = std::max(1.0, 0.2 * s.radius);
    out[i] = {s.pos.x + off * dir.x * s.sx, s.pos.y + off * dir.y * s.sy, er, er};
  }
  return out;
}

}  // namespace detail

// Renders agents into frame t of `frames` (T, 3, H, W) and `masks` (T, 2, H, W).
// Agents are drawn in order, so later ones occlude earlier ones; the masks
// are exact per-pixel-centre membership tests and may overlap.
inline void render_into(std::span<const AgentState> agents, const EpisodeConfig& cfg, Tensor<float>& frames,
                        Tensor<std::uint8_t>* masks, int t, const Palette& pal = {}) {
  const int H = cfg.render_h;
  const int W = cfg.render_w;
  const double kx = static_cast<double>(cfg.arena_w) / W;
  const double ky = static_cast<double>(cfg.arena_h) / H;
  const int ss = cfg.antialias ? 4 : 1;

  for (int c = 0; c < 3; ++c) std::fill_n(frames.plane(t, c), static_cast<std::size_t>(H) * W, pal.background[c]);

  for (std::size_t ai = 0; ai < agents.size(); ++ai) {
    const AgentState& s = agents[ai];
    const auto body = detail::body_of(s);
    const auto eyes = detail::eyes_of(s);
    const auto& col = s.kind == AgentKind::chaser ? pal.chaser : pal.evader;
    const int x0 = std::max(0, static_cast<int>(std::floor((body.cx - body.rx) / kx)) - 1);
    const int x1 = std::min(W - 1, static_cast<int>(std::ceil((body.cx + body.rx) / kx)) + 1);
    const int y0 = std::max(0, static_cast<int>(std::floor((body.cy - body.ry) / ky)) - 1);
    const int y1 = std::min(H - 1, static_cast<int>(std::ceil((body.cy + body.ry) / ky)) + 1);
    for (int py = y0; py <= y1; ++py)
      for (int px = x0; px <= x1; ++px) {
        int body_hits = 0;
        int eye_hits = 0;
        for (int sy = 0; sy < ss; ++sy)
          for (int sx = 0; sx < ss; ++sx) {
            const double ax = (px + (sx + 0.5) / ss) * kx;
            const double ay = (py + (sy + 0.5) / ss) * ky;
            if (!body.contains(ax, ay)) continue;
            ++body_hits;
            if (cfg.eyes && (eyes[0].contains(ax, ay) || eyes[1].contains(ax, ay))) ++eye_hits;
          }
        if (body_hits > 0) {
          const double total = ss * ss;
          const double wb = (body_hits - eye_hits) / total;
          const double we = eye_hits / total;
          for (int c = 0; c < 3; ++c) {
            float& v = frames(t, c, py, px);
            v = static_cast<float>((1.0 - wb - we) * v + wb * col[c] + we * pal.eye[c]);
          }
        }
        if (masks && ai < 2) {
          const double cx = (px + 0.5) * kx;
          const double cy = (py + 0.5) * ky;
          (*masks)(t, static_cast<int>(ai), py, px) = body.contains(cx, cy) ? 1 : 0;
        }
      }
  }
}

struct Rendered {
  Tensor<float> frame;         // (1, 3, H, W)
  Tensor<std::uint8_t> masks;  // (1, 2, H, W)
};

inline Rendered render(std::span<const AgentState> agents, const EpisodeConfig& cfg) {
  Rendered r{Tensor<float>(Shape{1, 3, cfg.render_h, cfg.render_w}),
             Tensor<std::uint8_t>(Shape{1, 2, cfg.render_h, cfg.render_w})};
  render_into(agents, cfg, r.frame, &r.masks, 0);
  return r;
}

inline AgentState spawn(AgentKind kind, Vec2 pos, Vec2 vel, const EpisodeConfig& cfg) {
  const auto& p = cfg.params(kind);
  AgentState s;
  s.kind = kind;
  s.pos = pos;
  s.vel = vel;
  s.radius = p.radius;
  s.mass = p.mass;
  return s;
}

inline AgentPair initial_states(const EpisodeConfig& cfg, Rng& rng) {
  const double rc = cfg.chaser.radius;
  const double re = cfg.evader.radius;
  const double W = cfg.arena_w;
  const double H = cfg.arena_h;
  const double gap = 1.5 * (rc + re);

  auto fail = [] {
    throw std::invalid_argument("invalid episode config: agents cannot fit in the arena");
  };
  if (W < 2 * rc || W < 2 * re || H < 2 * rc || H < 2 * re) fail();

  if (cfg.layout == Layout::lane) {
    const double y = H / 2.0;
    if ((W - re) - rc < gap) fail();
    // chaser in the left part, evader at least `gap` to its right
    const double xc = rng.uniform(rc, std::max(rc, W - re - gap));
    const double xe = rng.uniform(xc + gap, W - re);
    const double vc = rng.uniform(0.0, 0.5 * cfg.chaser.max_speed);
    const double ve = rng.uniform(-0.5, 0.5) * cfg.evader.max_speed;
    return {spawn(AgentKind::chaser, {xc, y}, {vc, 0.0}, cfg),
            spawn(AgentKind::evader, {xe, y}, {ve, 0.0}, cfg)};
  }

  const double max_sep = std::hypot(W - rc - re, H - rc - re);
  if (max_sep < gap) fail();
  auto random_vel = [&](double vmax) {
    const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double sp = rng.uniform(0.0, 0.5 * vmax);
    return Vec2{sp * std::cos(ang), sp * std::sin(ang)};
  };
  for (int attempt = 0; attempt < 10000; ++attempt) {
    const Vec2 pc{rng.uniform(rc, W - rc), rng.uniform(rc, H - rc)};
    const Vec2 pe{rng.uniform(re, W - re), rng.uniform(re, H - re)};
    if ((pe - pc).norm() < gap) continue;
    return {spawn(AgentKind::chaser, pc, random_vel(cfg.chaser.max_speed), cfg),
            spawn(AgentKind::evader, pe, random_vel(cfg.evader.max_speed), cfg)};
  }
  fail();
  return {};
}

// Advances both agents by one frame. Returns the collision event, if any.
inline std::optional<CollisionEvent> step(AgentPair& agents, const EpisodeConfig& cfg) {
  const Vec2 ac = policy_accel(agents[0], agents[1], cfg);
  const Vec2 ae = policy_accel(agents[1], agents[0], cfg);
  agents[0] = integrate(agents[0], ac, cfg);
  agents[1] = integrate(agents[1], ae, cfg);
  auto res = detect_resolve_collision(agents[0], agents[1], cfg);
  agents[0] = res.a;
  agents[1] = res.b;
  for (auto& s : agents) {
    if (s.kind == AgentKind::chaser) continue;
    const auto d = oriented_deform(deform_at(s.frames_since_collision, cfg), s.squash_axis);
    s.sx = d.first;
    s.sy = d.second;
  }
  return res.event;
}

inline Episode generate_episode(const EpisodeConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  AgentPair agents = initial_states(cfg, rng);

  Episode ep;
  ep.config = cfg;
  ep.frames = Tensor<float>(Shape{cfg.frames, 3, cfg.render_h, cfg.render_w});
  ep.gt_masks = Tensor<std::uint8_t>(Shape{cfg.frames, 2, cfg.render_h, cfg.render_w});
  ep.gt_states.reserve(cfg.frames);
  for (int t = 0; t < cfg.frames; ++t) {
    if (auto ev = step(agents, cfg)) {
      ev->frame = t;
      ep.events.push_back(*ev);
    }
    ep.gt_states.push_back(agents);
    render_into(std::span<const AgentState>(agents), cfg, ep.frames, &ep.gt_masks, t);
  }
  return ep;
}

// Seed of the i-th episode of a dataset generated from `base`.
inline std::uint64_t episode_seed(std::uint64_t base, std::uint64_t index) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline std::vector<Episode> generate_dataset(EpisodeConfig cfg, int count) {
  std::vector<Episode> out;
  out.reserve(count);
  const std::uint64_t base = cfg.seed;
  for (int i = 0; i < count; ++i) {
    cfg.seed = episode_seed(base, static_cast<std::uint64_t>(i));
    out.push_back(generate_episode(cfg));
  }
  return out;
}

// Centre distance between the two agents at frame t.
inline double agent_distance(const Episode& ep, int t) {
  return (ep.gt_states[t][1].pos - ep.gt_states[t][0].pos).norm();
}

}  // namespace homoseg::sim
