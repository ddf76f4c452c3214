#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "homoseg/layers.hpp"

namespace homoseg {

// Adam over a fixed ParamSet. Moment buffers follow the ParamSet order.
template <class T>
class Adam {
 public:
  struct Options {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 0.0;  // 0 disables global-norm clipping
  };

  Adam() = default;
  Adam(ParamSet<T> params, Options opt) : params_(std::move(params)), opt_(opt) {
    for (const auto& [_, v] : params_) {
      m_.emplace_back(v.value().size(), 0.0);
      v_.emplace_back(v.value().size(), 0.0);
    }
  }

  // Applies one update from the gradients currently held by the parameters,
  // then zeroes them. Parameters whose requires_grad is off are skipped.
  void step() {
    ++t_;
    double scale = 1.0;
    if (opt_.clip_norm > 0.0) {
      double sq = 0.0;
      for (const auto& [_, p] : params_) {
        if (!p.requires_grad() || !p.node()->has_grad()) continue;
        for (auto g : p.node()->grad.span()) sq += static_cast<double>(g) * g;
      }
      const double norm = std::sqrt(sq);
      if (norm > opt_.clip_norm) scale = opt_.clip_norm / norm;
    }
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      const auto& p = params_[k].second;
      if (!p.requires_grad() || !p.node()->has_grad()) continue;
      auto& value = p.node()->value;
      const auto& grad = p.node()->grad;
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double g = scale * static_cast<double>(grad[i]);
        m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g;
        v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g * g;
        const double mh = m[i] / bc1;
        const double vh = v[i] / bc2;
        value[i] -= static_cast<T>(opt_.lr * mh / (std::sqrt(vh) + opt_.eps));
      }
    }
    params_.zero_grad();
  }

  std::int64_t steps() const { return t_; }
  void set_steps(std::int64_t t) { t_ = t; }
  Options& options() { return opt_; }
  const ParamSet<T>& params() const { return params_; }
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  ParamSet<T> params_;
  Options opt_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::int64_t t_ = 0;
};

}  // namespace homoseg
