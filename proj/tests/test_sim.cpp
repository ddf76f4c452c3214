#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "homoseg/dataset.hpp"
#include "homoseg/sim.hpp"

using namespace homoseg;
using namespace homoseg::sim;
using Catch::Approx;

namespace {

EpisodeConfig small_config(std::uint64_t seed = 1) {
  EpisodeConfig c;
  c.frames = 40;
  c.seed = seed;
  return c;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("homoseg_test_sim_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("integrate: constant velocity, wall bounce and speed clamp") {
  EpisodeConfig cfg;
  AgentState s = spawn(AgentKind::chaser, {20, 20}, {1, 0}, cfg);
  auto n = integrate(s, {0, 0}, cfg);
  CHECK(n.pos.x == 21.0);
  CHECK(n.pos.y == 20.0);

  AgentState w = spawn(AgentKind::chaser, {cfg.arena_w - cfg.chaser.radius - 0.5, 30}, {2, 0}, cfg);
  CHECK(integrate(w, {0, 0}, cfg).vel.x < 0);

  AgentState f = spawn(AgentKind::chaser, {30, 30}, {2.9, 0}, cfg);
  auto c = integrate(f, {0.5, 0.5}, cfg);
  CHECK(c.vel.norm() == Approx(cfg.chaser.max_speed).epsilon(1e-15));
}

TEST_CASE("collision: head-on equal masses exchange velocities") {
  EpisodeConfig cfg;
  AgentState a = spawn(AgentKind::chaser, {30, 32}, {1, 0}, cfg);
  AgentState b = spawn(AgentKind::evader, {40, 32}, {-1, 0}, cfg);
  auto r = detect_resolve_collision(a, b, cfg);
  REQUIRE(r.event);
  CHECK(r.a.vel.x == Approx(-1.0));
  CHECK(r.b.vel.x == Approx(1.0));
  CHECK(r.a.vel.y == 0.0);
  CHECK((r.b.pos - r.a.pos).norm() == Approx(a.radius + b.radius));
  CHECK(r.a.frozen_remaining == cfg.freeze_frames);
  CHECK(r.b.frozen_remaining == cfg.freeze_frames);
  REQUIRE(r.b.frames_since_collision);
  CHECK(*r.b.frames_since_collision == 0);
}

TEST_CASE("collision: far apart agents are untouched") {
  EpisodeConfig cfg;
  AgentState a = spawn(AgentKind::chaser, {10, 10}, {1, 0}, cfg);
  AgentState b = spawn(AgentKind::evader, {50, 50}, {-1, 0}, cfg);
  auto r = detect_resolve_collision(a, b, cfg);
  CHECK_FALSE(r.event);
  CHECK(r.a == a);
  CHECK(r.b == b);
}

TEST_CASE("collision: momentum and energy conserved over random collisions") {
  EpisodeConfig cfg;
  Rng rng(123);
  int collisions = 0;
  while (collisions < 1000) {
    AgentState a = spawn(AgentKind::chaser, {32, 32}, {rng.uniform(-3, 3), rng.uniform(-3, 3)}, cfg);
    a.mass = rng.uniform(0.5, 2.0);
    const double ang = rng.uniform(0, 2 * std::numbers::pi);
    const double d = rng.uniform(1, 11.9);
    AgentState b = spawn(AgentKind::evader, {32 + d * std::cos(ang), 32 + d * std::sin(ang)},
                         {rng.uniform(-2, 2), rng.uniform(-2, 2)}, cfg);
    b.mass = rng.uniform(0.5, 2.0);
    auto r = detect_resolve_collision(a, b, cfg);
    if (!r.event) continue;
    ++collisions;
    const Vec2 p0 = momentum(a, b), p1 = momentum(r.a, r.b);
    CHECK(std::abs(p0.x - p1.x) <= 1e-9);
    CHECK(std::abs(p0.y - p1.y) <= 1e-9);
    CHECK(std::abs(kinetic_energy(a, b) - kinetic_energy(r.a, r.b)) <= 1e-9);
  }
}

TEST_CASE("deform_at profile") {
  EpisodeConfig cfg;
  auto none = deform_at(std::nullopt, cfg);
  CHECK(none.first == 1.0);
  CHECK(none.second == 1.0);
  auto d0 = deform_at(0, cfg);
  CHECK(d0.first == Approx(1.3));
  CHECK(d0.second == Approx(1.0 / 1.3));
  for (int t = 0; t < 100; ++t) {
    auto d = deform_at(t, cfg);
    CHECK(std::abs(d.first * d.second - 1.0) <= 1e-12);
  }
  CHECK(deform_at(200, cfg).first == Approx(1.0).margin(1e-12));
}

TEST_CASE("render: empty scene, rasterised area and disjoint masks") {
  EpisodeConfig cfg;
  cfg.eyes = false;
  auto empty = render(std::span<const AgentState>{}, cfg);
  for (float v : empty.frame.span()) CHECK(v == Palette{}.background[0]);

  AgentState a = spawn(AgentKind::chaser, {20.3, 30.7}, {1, 0}, cfg);
  AgentState b = spawn(AgentKind::evader, {45.1, 30.2}, {-1, 0}, cfg);
  std::array<AgentState, 2> agents{a, b};
  auto r = render(agents, cfg);
  int count_a = 0, overlap = 0;
  for (std::size_t p = 0; p < r.masks.shape().plane(); ++p) {
    count_a += r.masks.plane(0, 0)[p];
    overlap += r.masks.plane(0, 0)[p] && r.masks.plane(0, 1)[p];
  }
  const double expected = std::numbers::pi * a.radius * a.radius;
  CHECK(std::abs(count_a - expected) <= 0.1 * expected);
  CHECK(overlap == 0);
}

TEST_CASE("generate_episode: determinism, length and collisions") {
  auto cfg = small_config(7);
  auto e1 = generate_episode(cfg);
  auto e2 = generate_episode(cfg);
  CHECK(e1 == e2);
  CHECK(e1.length() == cfg.frames);
  CHECK(e1.gt_masks.shape().n == cfg.frames);

  EpisodeConfig full;
  full.seed = 3;
  auto ep = generate_episode(full);
  CHECK(ep.events.size() >= 1);
  for (const auto& pair : ep.gt_states) {
    CHECK(std::abs(pair[1].sx * pair[1].sy - 1.0) <= 1e-6);
  }
}

TEST_CASE("generate_episode rejects agents that cannot fit") {
  EpisodeConfig cfg;
  cfg.arena_w = 10;
  cfg.arena_h = 10;
  CHECK_THROWS_AS(generate_episode(cfg), std::invalid_argument);
}

TEST_CASE("lane layout starts both agents on one horizontal line, chaser on the left") {
  EpisodeConfig cfg = small_config(11);
  cfg.layout = Layout::lane;
  for (std::uint64_t s = 0; s < 20; ++s) {
    cfg.seed = s;
    Rng rng(s);
    auto st = initial_states(cfg, rng);
    CHECK(st[0].pos.y == st[1].pos.y);
    CHECK(st[0].pos.x < st[1].pos.x);
  }
}

TEST_CASE("dataset round trip, version and truncation errors") {
  auto cfg = small_config(5);
  auto eps = generate_dataset(cfg, 3);
  const auto dir = temp_dir("roundtrip");
  write_dataset(eps, dir, cfg);
  auto ds = read_dataset(dir);
  REQUIRE(ds.episodes.size() == 3);
  CHECK(ds.config == cfg);
  for (int i = 0; i < 3; ++i) CHECK(ds.episodes[i] == eps[i]);

  const auto file = dir / episode_filename(0);
  {
    // bump the version field that follows the 4-byte magic
    std::fstream f(file, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    const std::uint32_t v = 999;
    f.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  CHECK_THROWS_AS(read_episode(file), io::VersionError);

  write_episode(eps[1], file);
  const auto size = std::filesystem::file_size(file);
  std::filesystem::resize_file(file, size / 2);
  CHECK_THROWS_AS(read_episode(file), io::CorruptError);
  CHECK_THROWS_AS(read_dataset(dir), io::CorruptError);
  std::filesystem::remove_all(dir);
}
