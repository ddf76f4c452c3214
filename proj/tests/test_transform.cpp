#include <catch_amalgamated.hpp>

#include <cmath>

#include "homoseg/optim.hpp"
#include "homoseg/train.hpp"
#include "homoseg/transform.hpp"

using namespace homoseg;
using Catch::Approx;

namespace {

TransformParam random_param(Rng& rng, double ls = 0.5, double t = 10.0) {
  return {rng.uniform(-ls, ls), rng.uniform(-ls, ls), rng.uniform(-t, t), rng.uniform(-t, t)};
}

// Sum of a few Gaussian blobs, (1, C, H, W).
Tensor<double> smooth_image(int C, int H, int W, Rng& rng, double sigma = 5.0) {
  Tensor<double> img(Shape{1, C, H, W});
  for (int b = 0; b < 3; ++b) {
    const double cx = rng.uniform(W * 0.3, W * 0.7), cy = rng.uniform(H * 0.3, H * 0.7);
    for (int c = 0; c < C; ++c) {
      const double amp = rng.uniform(0.2, 1.0);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          img(0, c, y, x) += amp * std::exp(-((x - cx) * (x - cx) + (y - cy) * (y - cy)) / (2 * sigma * sigma));
    }
  }
  return img;
}

}  // namespace

TEST_CASE("group axioms hold over random triples") {
  Rng rng(1);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto a = random_param(rng), b = random_param(rng), c = random_param(rng);
    worst = std::max(worst, compose(compose(c, b), a).max_abs_diff(compose(c, compose(b, a))));
    worst = std::max(worst, compose(identity(), a).max_abs_diff(a));
    worst = std::max(worst, compose(a, identity()).max_abs_diff(a));
    worst = std::max(worst, compose(a, inverse(a)).max_abs_diff(identity()));
    worst = std::max(worst, compose(inverse(a), a).max_abs_diff(identity()));
    worst = std::max(worst, inverse(inverse(a)).max_abs_diff(a));
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("compose and inverse examples") {
  CHECK(compose(translation(2, 0), translation(1, 0)) == translation(3, 0));
  const TransformParam scale2{std::log(2.0), 0, 0, 0};
  const auto t1 = translation(1, 0);
  CHECK(compose(scale2, t1).tx == Approx(2.0));
  CHECK(compose(t1, scale2).tx == Approx(1.0));
  CHECK(inverse(identity()) == identity());
  CHECK(inverse(translation(3, -2)).max_abs_diff(translation(-3, 2)) == 0.0);
  const auto big = compose_checked(TransformParam{1.5, 0, 0, 0}, TransformParam{1.0, 0, 0, 0}, 1.0);
  CHECK(big.out_of_range);
  CHECK_FALSE(compose_checked(TransformParam{0.5, 0, 0, 0}, TransformParam{0.5, 0, 0, 0}, 1.0).out_of_range);
}

TEST_CASE("recentre is an automorphism and removes the translation of in-place scaling") {
  Rng rng(3);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto a = random_param(rng), b = random_param(rng);
    const double px = rng.uniform(-30, 30), py = rng.uniform(-30, 30);
    auto rc = [&](const TransformParam& g) { return recentre(g, px, py); };
    worst = std::max(worst, rc(compose(b, a)).max_abs_diff(compose(rc(b), rc(a))));
    worst = std::max(worst, rc(inverse(a)).max_abs_diff(inverse(rc(a))));
    worst = std::max(worst, recentre(rc(a), -px, -py).max_abs_diff(a));
    worst = std::max(worst, rc(rel_param(a, b)).max_abs_diff(rel_param(rc(a), rc(b))));
  }
  CHECK(worst <= 1e-9);
  CHECK(recentre(translation(2, -1), 17, 5) == translation(2, -1));
  // scaling by 0.8 about the point (20, -4), then a shift of (1.5, 0)
  const double s = 0.8;
  const TransformParam squash{std::log(s), -std::log(s), (1 - s) * 20 + 1.5, (1 - 1 / s) * -4};
  const auto body = recentre(squash, 20, -4);
  CHECK(body.tx == Approx(1.5));
  CHECK(body.ty == Approx(0.0).margin(1e-12));
  CHECK(body.lsx == squash.lsx);
}

TEST_CASE("to_field examples") {
  const auto id_field = to_field(identity(), 8, 9);
  for (double v : id_field.span()) CHECK(v == 0.0);
  auto f = to_field(TransformParam{0, 0, 2, 1}, 6, 6);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 6; ++x) {
      CHECK(f(0, 0, y, x) == Approx(2.0));
      CHECK(f(0, 1, y, x) == Approx(1.0));
    }
  auto s = to_field(TransformParam{std::log(2.0), 0, 0, 0}, 7, 7);
  for (int y = 0; y < 7; ++y) CHECK(s(0, 0, y, 3) == Approx(0.0).margin(1e-12));
}

TEST_CASE("warp: identity and integer translation reproduce index shifts") {
  Rng rng(2);
  Tensor<double> img(Shape{1, 2, 12, 16});
  for (auto& v : img.span()) v = rng.uniform();
  auto same = warp(img, identity());
  CHECK(same == img);

  auto shifted = warp(img, translation(3, 0));
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 12; ++y)
      for (int x = 0; x < 16; ++x) {
        const double expect = x - 3 >= 0 ? img(0, c, y, x - 3) : 0.0;
        CHECK(shifted(0, c, y, x) == expect);
      }
  auto down = warp(img, translation(0, -2));
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 16; ++x) CHECK(down(0, 1, y, x) == img(0, 1, y + 2, x));
}

TEST_CASE("warp composition matches composed warp on smooth images") {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    auto img = smooth_image(1, 48, 48, rng);
    const auto g1 = random_param(rng, 0.2, 4.0), g2 = random_param(rng, 0.2, 4.0);
    auto two = warp(warp(img, g1), g2);
    auto one = warp(img, compose(g2, g1));
    double err = 0;
    for (std::size_t i = 0; i < one.size(); ++i) err += std::abs(two[i] - one[i]);
    CHECK(err / one.size() <= 1e-2);
  }
}

TEST_CASE("warp gradients match finite differences") {
  Rng rng(4);
  auto img = ad::parameter(smooth_image(2, 10, 12, rng, 2.0));
  const auto g0 = TransformParam{0.13, -0.21, 0.37, -0.62};
  auto g = ad::parameter(pack_params<double>(std::vector<TransformParam>{g0}));
  Tensor<double> w(Shape{1, 2, 10, 12});
  for (auto& v : w.span()) v = rng.uniform(-1, 1);
  auto loss = [&] { return ad::sum(ops::warp(img, g) * ad::constant(w)); };
  const auto r = grad_check(loss, {img, g}, 1e-4, 200);
  CHECK(r.max_rel_error <= 1e-3);
}

TEST_CASE("phi encoder: contract, determinism, and translation recovery after smoke training") {
  Rng init(5);
  const int H = 32, W = 32;
  PhiEncoder<float> phi(H, W, {8, 1.0, 32.0}, init);
  ParamSet<float> ps;
  phi.collect(ps, "phi");

  // A coloured disc at (cx, cy) with radius 4.
  auto disc = [&](double cx, double cy) {
    Tensor<float> t(Shape{1, 3, H, W});
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= 16.0) {
          t(0, 0, y, x) = 0.85f;
          t(0, 1, y, x) = 0.15f;
          t(0, 2, y, x) = 0.15f;
        }
    return t;
  };
  Rng rng(6);
  auto make_batch = [&](int n, std::vector<TransformParam>& truth) {
    std::vector<Tensor<float>> a, b;
    truth.clear();
    for (int i = 0; i < n; ++i) {
      const double cx = rng.uniform(10, 22), cy = rng.uniform(10, 22);
      const double tx = rng.uniform(-3, 3), ty = rng.uniform(-3, 3);
      a.push_back(disc(cx, cy));
      b.push_back(disc(cx + tx, cy + ty));
      truth.push_back(translation(tx, ty));
    }
    auto stack = [](const std::vector<Tensor<float>>& v) {
      std::vector<ad::Var<float>> vars;
      for (const auto& t : v) vars.push_back(ad::constant(t));
      return ad::concat_batch<float>(vars).value();
    };
    return std::pair{stack(a), stack(b)};
  };

  std::vector<TransformParam> truth;
  auto [x0, n0] = make_batch(4, truth);
  auto out1 = phi.encode(ad::constant(x0), ad::constant(x0), ad::constant(n0)).value();
  auto out2 = phi.encode(ad::constant(x0), ad::constant(x0), ad::constant(n0)).value();
  CHECK(out1 == out2);
  for (int i = 0; i < 4; ++i) {
    const auto g = unpack_param(out1, i);
    for (double v : g.as_array()) CHECK(std::isfinite(v));
    CHECK(std::abs(g.lsx) <= 1.0);
    CHECK(std::abs(g.lsy) <= 1.0);
  }

  Adam<float> opt(ps, {1e-2, 0.9, 0.999, 1e-8, 1.0});
  for (int step = 0; step < 150; ++step) {
    auto [x, n] = make_batch(8, truth);
    auto pred = phi.encode(ad::constant(x), ad::constant(x), ad::constant(n));
    auto target = ad::constant(pack_params<float>(truth));
    auto loss = ad::mean(ad::square(pred - target));
    loss.backward();
    opt.step();
  }
  auto [xh, nh] = make_batch(16, truth);
  auto held = phi.encode(ad::constant(xh), ad::constant(xh), ad::constant(nh)).value();
  for (int i = 0; i < 16; ++i) {
    const auto g = unpack_param(held, i);
    CHECK(std::abs(g.tx - truth[i].tx) <= 0.5);
    CHECK(std::abs(g.ty - truth[i].ty) <= 0.5);
  }
}
