#include <catch_amalgamated.hpp>

#include <Eigen/Dense>

#include "homoseg/homo.hpp"
#include "homoseg/optim.hpp"
#include "homoseg/train.hpp"

using namespace homoseg;
using Catch::Approx;

namespace {

TransformParam random_param(Rng& rng, double ls = 0.3, double t = 6.0) {
  return {rng.uniform(-ls, ls), rng.uniform(-ls, ls), rng.uniform(-t, t), rng.uniform(-t, t)};
}

ad::Var<double> params_var(const std::vector<TransformParam>& gs) { return ad::constant(pack_params<double>(gs)); }

}  // namespace

TEST_CASE("rel_param examples and antisymmetry") {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const auto g1 = random_param(rng), g2 = random_param(rng);
    CHECK(rel_param(g1, g1).max_abs_diff(identity()) <= 1e-12);
    CHECK(compose(rel_param(g1, g2), rel_param(g2, g1)).max_abs_diff(identity()) <= 1e-9);
    CHECK(rel_param(g1, g2).max_abs_diff(inverse(rel_param(g2, g1))) <= 1e-9);
  }
  CHECK(rel_param(translation(1, 0), translation(4, 0)).max_abs_diff(translation(3, 0)) <= 1e-12);
}

TEST_CASE("rho contract and loss_homo identities") {
  Rng init(2);
  Rho<double> rho({8, 32, 4.0}, init);
  Rng rng(3);
  std::vector<TransformParam> g1s, g2s;
  for (int i = 0; i < 6; ++i) {
    g1s.push_back(random_param(rng));
    g2s.push_back(random_param(rng));
  }
  auto h = rho(params_var(g1s)).value();
  CHECK(h.shape() == Shape{6, 8, 1, 1});
  for (double v : h.span()) CHECK(std::isfinite(v));
  CHECK(loss_homo(rho, params_var(g1s), params_var(g2s)).item() >= 0.0);

  // identity pair: ||rho(e)||^2
  auto e = params_var({identity()});
  const auto he = rho(e).value();
  double sq = 0;
  for (double v : he.span()) sq += v * v;
  CHECK(loss_homo(rho, e, e).item() == Approx(sq).epsilon(1e-12));

  // generic nonlinear rho violates additivity
  CHECK(loss_homo(rho, params_var(g1s), params_var(g2s)).item() > 0.0);

  // rho == 0 gives exactly zero
  Rho<double> zero({8, 32, 4.0}, init);
  ParamSet<double> zp;
  zero.collect(zp, "z");
  for (const auto& [_, v] : zp) v.node()->value.fill(0.0);
  CHECK(loss_homo(zero, params_var(g1s), params_var(g2s)).item() == 0.0);
}

TEST_CASE("loss_var values") {
  Tensor<double> same(Shape{5, 4, 1, 1}, 0.7);
  CHECK(loss_var(ad::constant(same), 0.5).item() == Approx(4 * 0.25));
  Tensor<double> spread(Shape{2, 1, 1, 1}, std::vector<double>{-1, 1});
  CHECK(loss_var(ad::constant(spread), 0.5).item() == 0.0);
  CHECK_THROWS_AS(loss_var(ad::constant(Tensor<double>(Shape{1, 3, 1, 1})), 0.5), std::invalid_argument);

  CHECK(loss_var_scalar(ad::constant(Tensor<double>(Shape{4, 1, 1, 1}, 2.0)), 0.3).item() == Approx(0.09));
  Tensor<double> pm2(Shape{2, 1, 1, 1}, std::vector<double>{-2, 2});
  CHECK(loss_var_scalar(ad::constant(pm2), 1.0).item() == 0.0);
}

TEST_CASE("loss_homo_scalar identities") {
  Rng init(4);
  ProjScalar<double> proj({8, 16}, init);
  Tensor<double> z(Shape{1, 8, 1, 1});
  const double p0 = proj(ad::constant(z)).item();
  CHECK(loss_homo_scalar(proj, ad::constant(z), ad::constant(z)).item() == Approx(p0 * p0).epsilon(1e-12));

  Rng rng(5);
  Tensor<double> h1(Shape{10, 8, 1, 1}), h2(Shape{10, 8, 1, 1});
  for (auto& v : h1.span()) v = rng.uniform(-1, 1);
  for (auto& v : h2.span()) v = rng.uniform(-1, 1);
  CHECK(loss_homo_scalar(proj, ad::constant(h1), ad::constant(h2)).item() > 0.0);

  // With the hidden layer in its linear regime and zero biases, P is linear
  // up to tanh curvature; a purely linear map satisfies the law exactly.
  auto linear_p = [&](const Tensor<double>& h) {
    Tensor<double> out(Shape{h.shape().n, 1, 1, 1});
    for (int n = 0; n < h.shape().n; ++n)
      for (int d = 0; d < 8; ++d) out[n] += (d + 1) * 0.1 * h[n * 8 + d];
    return out;
  };
  Tensor<double> hs(h1.shape());
  for (std::size_t i = 0; i < hs.size(); ++i) hs[i] = h1[i] + h2[i];
  const auto a = linear_p(hs), b = linear_p(h1), c = linear_p(h2);
  for (int n = 0; n < 10; ++n) CHECK(a[n] - (b[n] + c[n]) == Approx(0.0).margin(1e-12));
}

TEST_CASE("homomorphism losses have correct gradients") {
  Rng init(6);
  Rho<double> rho({4, 8, 4.0}, init);
  ProjScalar<double> proj({4, 8}, init);
  ParamSet<double> rp, pp;
  rho.collect(rp, "rho");
  proj.collect(pp, "proj");
  std::vector<ad::Var<double>> rv, pv;
  for (const auto& [_, v] : rp) rv.push_back(v);
  for (const auto& [_, v] : pp) pv.push_back(v);

  Rng rng(7);
  std::vector<TransformParam> g1s, g2s;
  for (int i = 0; i < 5; ++i) {
    g1s.push_back(random_param(rng));
    g2s.push_back(random_param(rng));
  }
  auto g1 = ad::parameter(pack_params<double>(g1s));
  auto g2 = ad::parameter(pack_params<double>(g2s));
  auto homo = [&] { return loss_homo(rho, g1, g2); };
  auto inputs = rv;
  inputs.push_back(g1);
  inputs.push_back(g2);
  CHECK(grad_check(homo, inputs, 1e-5, 128).max_rel_error <= 1e-3);
  auto var = [&] { return loss_var(rho(g1), 2.0); };
  CHECK(grad_check(var, rv, 1e-5, 128).max_rel_error <= 1e-3);

  Tensor<double> h1(Shape{6, 4, 1, 1}), h2(Shape{6, 4, 1, 1});
  for (auto& v : h1.span()) v = rng.uniform(-1, 1);
  for (auto& v : h2.span()) v = rng.uniform(-1, 1);
  auto hs = ad::constant(h1), ht = ad::constant(h2);
  CHECK(grad_check([&] { return loss_homo_scalar(proj, hs, ht); }, pv, 1e-5, 128).max_rel_error <= 1e-3);
  CHECK(grad_check([&] { return loss_var_scalar(proj(hs), 5.0); }, pv, 1e-5, 128).max_rel_error <= 1e-3);
}

TEST_CASE("rho trained on translations becomes affine in (tx, ty)") {
  Rng init(8);
  Rho<float> rho({8, 32, 4.0}, init);
  ParamSet<float> ps;
  rho.collect(ps, "rho");
  Adam<float> opt(ps, {3e-3, 0.9, 0.999, 1e-8, 1.0});
  Rng rng(9);
  auto draw = [&] { return translation(rng.uniform(-6, 6), rng.uniform(-6, 6)); };
  for (int step = 0; step < 3000; ++step) {
    std::vector<TransformParam> a, b;
    for (int i = 0; i < 31; ++i) {
      a.push_back(draw());
      b.push_back(draw());
    }
    a.push_back(identity());
    b.push_back(identity());
    auto g1 = ad::constant(pack_params<float>(a));
    auto g2 = ad::constant(pack_params<float>(b));
    auto loss = loss_homo(rho, g1, g2) + ad::scale(loss_var(rho(g1), 0.5), 0.1f);
    loss.backward();
    opt.step();
  }
  // regress every latent dimension on (1, tx, ty)
  const int n = 400;
  Eigen::MatrixXd X(n, 3), Y(n, 8);
  std::vector<TransformParam> gs;
  for (int i = 0; i < n; ++i) {
    gs.push_back(draw());
    X(i, 0) = 1;
    X(i, 1) = gs.back().tx;
    X(i, 2) = gs.back().ty;
  }
  const auto h = rho(ad::constant(pack_params<float>(gs))).value();
  for (int i = 0; i < n; ++i)
    for (int d = 0; d < 8; ++d) Y(i, d) = h[i * 8 + d];
  const Eigen::MatrixXd B = X.colPivHouseholderQr().solve(Y);
  const Eigen::MatrixXd R = Y - X * B;
  const Eigen::RowVectorXd mean = Y.colwise().mean();
  const double ss_res = R.squaredNorm();
  const double ss_tot = (Y.rowwise() - mean).squaredNorm();
  REQUIRE(ss_tot > 0);
  CHECK(1.0 - ss_res / ss_tot >= 0.99);
}
