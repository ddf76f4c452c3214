#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <limits>

#include "homoseg/eval.hpp"
#include "homoseg/train.hpp"

using namespace homoseg;
using Catch::Approx;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("homoseg_test_training_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

TrainConfig small_config() {
  TrainConfig c;
  c.steps = 6;
  c.batch = 2;
  c.base_width = 2;
  c.depth = 2;
  c.checkpoint_every = 0;
  c.curriculum_threshold = 2;
  c.synthetic_pairs = 4;
  c.seed = 21;
  c.rel_steps = 20;
  c.rel_batch = 8;
  return c;
}

Dataset small_dataset(sim::Layout layout = sim::Layout::random, int episodes = 2, int frames = 10, int res = 32,
                      std::uint64_t seed = 3) {
  sim::EpisodeConfig ec;
  ec.frames = frames;
  ec.render_w = res;
  ec.render_h = res;
  ec.layout = layout;
  ec.seed = seed;
  return Dataset{ec, sim::generate_dataset(ec, episodes)};
}

std::vector<nlohmann::json> read_log(const std::filesystem::path& p) {
  std::vector<nlohmann::json> out;
  std::ifstream f(p);
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  return out;
}

bool grads_all_zero(const ParamSet<float>& ps) {
  for (const auto& [_, p] : ps) {
    if (!p.node()->has_grad()) continue;
    for (float g : p.node()->grad.span())
      if (g != 0.0f) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("curriculum gate: rho receives no gradient before the threshold") {
  auto cfg = small_config();
  cfg.curriculum_threshold = 3;
  const auto ds = small_dataset();
  Model<float> model(cfg, 32, 32);
  Rng rng(1);
  const auto b = sample_batch<float>(ds, 2, rng);

  auto before = total_loss(model, b.x, b.next, 2, cfg, rng);
  before.total.backward();
  CHECK_FALSE(before.terms.gated);
  CHECK(before.terms.homo == 0.0);
  CHECK(grads_all_zero(model.rho_params));
  CHECK_FALSE(grads_all_zero(model.seg_params));
  for (auto kv : model.all_params()) kv.second.zero_grad();

  auto after = total_loss(model, b.x, b.next, 3, cfg, rng);
  after.total.backward();
  CHECK(after.terms.gated);
  CHECK(after.terms.homo > 0.0);
  CHECK_FALSE(grads_all_zero(model.rho_params));
  CHECK(grads_all_zero(model.proj_params));
}

TEST_CASE("loss breakdown: weighted terms sum to the total; zero weights leave only prediction") {
  auto cfg = small_config();
  cfg.curriculum_threshold = 0;
  const auto ds = small_dataset();
  Model<float> model(cfg, 32, 32);
  Rng rng(2);
  const auto b = sample_batch<float>(ds, 2, rng);
  const auto out = total_loss(model, b.x, b.next, 0, cfg, rng);
  double sum = 0;
  for (const auto& [_, v] : out.terms.contributions(cfg)) sum += v;
  CHECK(out.terms.total == sum);
  CHECK(out.total.item() == Approx(sum).epsilon(1e-5));

  auto zero = cfg;
  zero.lambda_div = zero.lambda_bin = zero.lambda_area = zero.lambda_homo = zero.lambda_var = 0.0;
  const auto z = total_loss(model, b.x, b.next, 0, zero, rng);
  CHECK(z.terms.total == z.terms.pred);
  CHECK(z.total.item() == Approx(z.terms.pred).epsilon(1e-6));

  auto warm = cfg;
  warm.seg_warmup = 10;
  const auto w = total_loss(model, b.x, b.next, 5, warm, rng);
  CHECK(w.terms.seg_weight == 0.5);
  for (const auto& [name, v] : w.terms.contributions(warm))
    if (name == "div") CHECK(v == Approx(0.5 * warm.lambda_div * w.terms.div));

  auto delayed = warm;
  delayed.seg_delay = 4;
  CHECK(delayed.seg_ramp(3) == 0.0);
  CHECK(delayed.seg_ramp(4) == 0.0);
  CHECK(delayed.seg_ramp(9) == 0.5);
  CHECK(delayed.seg_ramp(14) == 1.0);
  const auto d = total_loss(model, b.x, b.next, 2, delayed, rng);
  CHECK(d.terms.div > 0.0);
  for (const auto& [name, v] : d.terms.contributions(delayed))
    if (name == "div" || name == "bin" || name == "area") CHECK(v == 0.0);
}

TEST_CASE("non-finite input raises a numerical error naming the term") {
  const auto cfg = small_config();
  Model<float> model(cfg, 32, 32);
  Tensor<float> x(Shape{2, 3, 32, 32}, 0.5f), next(Shape{2, 3, 32, 32}, 0.5f);
  x[5] = std::numeric_limits<float>::quiet_NaN();
  Rng rng(3);
  try {
    total_loss(model, x, next, 0, cfg, rng);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(e.term() == "L_pred_recon");
    CHECK(std::string(e.what()).find("L_pred_recon") != std::string::npos);
  }
}

TEST_CASE("training writes one loss record per step") {
  const auto dir = temp_dir("log");
  const auto cfg = small_config();
  const auto res = train_phase1(cfg, small_dataset(), {dir});
  const auto log = read_log(dir / "loss_log.jsonl");
  REQUIRE(static_cast<int>(log.size()) == cfg.steps);
  for (int i = 0; i < cfg.steps; ++i) {
    CHECK(log[i].at("step").get<int>() == i);
    for (const char* k : {"total", "pred", "div", "bin", "area", "homo", "var", "gated", "wall_time"})
      CHECK(log[i].contains(k));
    CHECK(log[i].at("gated").get<bool>() == (i >= cfg.curriculum_threshold));
  }
  CHECK(std::filesystem::exists(res.checkpoint_path));
  CHECK(res.checkpoint.step == cfg.steps);
}

TEST_CASE("resuming from a checkpoint is bit-exact") {
  auto cfg = small_config();
  cfg.checkpoint_every = 3;
  const auto ds = small_dataset();
  const auto full_dir = temp_dir("resume_full");
  const auto split_dir = temp_dir("resume_split");
  const auto full = train_phase1(cfg, ds, {full_dir});

  TrainOptions first{split_dir};
  first.stop_after = 4;  // runs past the step-3 checkpoint; resume must discard step 3's record
  train_phase1(cfg, ds, first);
  TrainOptions second{split_dir};
  second.resume_from = split_dir / "checkpoints" / checkpoint_name(3);
  const auto resumed = train_phase1(cfg, ds, second);

  REQUIRE(full.checkpoint.params.size() == resumed.checkpoint.params.size());
  for (std::size_t i = 0; i < full.checkpoint.params.size(); ++i) {
    CHECK(full.checkpoint.params[i].first == resumed.checkpoint.params[i].first);
    CHECK(full.checkpoint.params[i].second == resumed.checkpoint.params[i].second);
  }
  CHECK(full.checkpoint.opt_phase1 == resumed.checkpoint.opt_phase1);
  CHECK(full.checkpoint.rng_state == resumed.checkpoint.rng_state);
  CHECK(full.checkpoint.step == resumed.checkpoint.step);

  auto a = read_log(full_dir / "loss_log.jsonl");
  auto b = read_log(split_dir / "loss_log.jsonl");
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i].erase("wall_time");
    b[i].erase("wall_time");
    CHECK(a[i] == b[i]);
  }
}

TEST_CASE("phase 2 leaves phase-1 parameters untouched and trains the projection") {
  const auto dir = temp_dir("phase2");
  const auto cfg = small_config();
  const auto ds = small_dataset();
  const auto p1 = train_phase1(cfg, ds, {dir / "p1"});
  const auto lane = small_dataset(sim::Layout::lane, 2, 10, 32, 9);
  const auto p2 = train_phase2_relational(p1.checkpoint, lane, {dir / "p2"});
  CHECK(p2.frozen_hash_before == p2.frozen_hash_after);
  CHECK(p2.checkpoint.phase == 2u);
  CHECK(p2.checkpoint.slot_roles.size() == 3);
  CHECK(read_log(dir / "p2" / "rel_loss_log.jsonl").size() == static_cast<std::size_t>(cfg.rel_steps));

  const auto m1 = model_from_checkpoint(p1.checkpoint);
  const auto m2 = model_from_checkpoint(p2.checkpoint);
  CHECK(param_hash(m1.phase1_params()) == param_hash(m2.phase1_params()));
  CHECK(param_hash(m1.proj_params) != param_hash(m2.proj_params));
}

TEST_CASE("projection recovers the sign of the distance change from ground-truth relative motion") {
  // rho learns an additive code for translations, the projection is then fitted
  // on relative transforms computed from ground-truth agent displacements.
  TrainConfig cfg = small_config();
  cfg.rel_steps = 1500;
  cfg.rel_batch = 64;
  Model<float> model(cfg, 32, 32);
  Adam<float> opt(model.rho_params, {3e-3, 0.9, 0.999, 1e-8, 1.0});
  Rng rng(4);
  auto draw = [&] { return translation(rng.uniform(-8, 8), rng.uniform(-8, 8)); };
  for (int step = 0; step < 2500; ++step) {
    std::vector<TransformParam> a, b;
    for (int i = 0; i < 31; ++i) {
      a.push_back(draw());
      b.push_back(draw());
    }
    a.push_back(identity());
    b.push_back(identity());
    auto g1 = ad::constant(pack_params<float>(a));
    auto g2 = ad::constant(pack_params<float>(b));
    auto loss = loss_homo(model.rho, g1, g2) + ad::scale(loss_var(model.rho(g1), cfg.m_var), 0.1f);
    loss.backward();
    opt.step();
  }

  auto relations = [&](const Dataset& ds) {
    std::vector<RelationSample> out;
    for (int e = 0; e < static_cast<int>(ds.episodes.size()); ++e) {
      const auto& ep = ds.episodes[e];
      for (int t = 0; t + 1 < ep.length(); ++t) {
        RelationSample r;
        r.episode = e;
        r.t = t;
        const auto da = ep.gt_states[t + 1][0].pos - ep.gt_states[t][0].pos;
        const auto db = ep.gt_states[t + 1][1].pos - ep.gt_states[t][1].pos;
        r.g_a = translation(da.x, da.y);
        r.g_b = translation(db.x, db.y);
        r.rel = rel_param(r.g_a, r.g_b);
        r.delta_distance = sim::agent_distance(ep, t + 1) - sim::agent_distance(ep, t);
        const auto h = model.rho(ad::constant(pack_params<float>(std::vector<TransformParam>{r.rel}))).value();
        r.h.assign(h.span().begin(), h.span().end());
        out.push_back(std::move(r));
      }
    }
    return out;
  };
  const auto train = relations(small_dataset(sim::Layout::lane, 6, 48, 32, 100));
  const auto held = relations(small_dataset(sim::Layout::lane, 3, 48, 32, 200));
  Rng fit_rng(5);
  fit_projection(model.proj, model.proj_params, train, cfg, fit_rng);

  const auto s = project_scalar(model, held);
  int agree = 0, counted = 0;
  std::vector<double> dd;
  for (std::size_t i = 0; i < held.size(); ++i) {
    dd.push_back(held[i].delta_distance);
    if (std::abs(held[i].delta_distance) < 1e-6 || s[i] == 0) continue;
    ++counted;
    agree += (s[i] > 0) == (held[i].delta_distance > 0);
  }
  REQUIRE(counted > 50);
  const double acc = std::max(agree, counted - agree) / static_cast<double>(counted);
  CHECK(acc >= 0.9);
  CHECK(std::abs(*metrics::spearman(s, dd)) >= 0.8);
}

TEST_CASE("object centroid is intensity-weighted and relative to the image centre") {
  Tensor<float> masks(Shape{1, 2, 8, 10});
  Tensor<float> x(Shape{1, 3, 8, 10});
  // slot 0 covers everything; only pixels (2, 7) and (4, 7) are lit, equally
  masks.fill(0.0f);
  std::fill_n(masks.plane(0, 0), 80, 1.0f);
  x.fill(0.0f);
  x(0, 1, 2, 7) = 1.0f;
  x(0, 1, 4, 7) = 1.0f;
  auto [cx, cy] = object_centroid(masks, x, 0, 0);
  CHECK(cx == Approx(7 - 4.5));
  CHECK(cy == Approx(3 - 3.5));
  // a slot over unlit pixels falls back to the mask centroid
  masks(0, 1, 6, 1) = 1.0f;
  std::tie(cx, cy) = object_centroid(masks, x, 0, 1);
  CHECK(cx == Approx(1 - 4.5));
  CHECK(cy == Approx(6 - 3.5));
  // an empty slot sits at the image centre
  masks(0, 1, 6, 1) = 0.0f;
  std::tie(cx, cy) = object_centroid(masks, x, 0, 1);
  CHECK(cx == 0.0);
  CHECK(cy == 0.0);
}

TEST_CASE("slot roles: least content is background, the rest by decreasing area") {
  CHECK(slot_roles({0.90, 0.06, 0.04}, {0.01, 0.50, 0.40}) == std::vector<int>{0, 1, 2});
  CHECK(slot_roles({0.03, 0.92, 0.05}, {0.30, 0.02, 0.45}) == std::vector<int>{1, 2, 0});
  // the largest slot is not necessarily the background
  CHECK(slot_roles({0.50, 0.45, 0.05}, {0.60, 0.00, 0.20}) == std::vector<int>{1, 0, 2});
  // ties keep slot order
  CHECK(slot_roles({0.2, 0.4, 0.4}, {0.0, 0.1, 0.1}) == std::vector<int>{0, 1, 2});
  CHECK(slot_roles({0.5, 0.5}, {0.2, 0.1}) == std::vector<int>{1, 0});
  CHECK_THROWS_AS(slot_roles({0.5, 0.5}, {0.1}), std::invalid_argument);
  CHECK_THROWS_AS(slot_roles({}, {}), std::invalid_argument);
}
