#pragma once

// Multi-slot U-Net segmenter, its mask regularisers, and the compositional
// next-frame predictor.

#include <string>
#include <vector>

#include "homoseg/autodiff.hpp"
#include "homoseg/layers.hpp"
#include "homoseg/transform.hpp"

namespace homoseg {

struct SegLossWeights {
  double div = 0.1;
  double bin = 0.1;
  double area = 0.05;
  double area_max = 0.9;  // largest admissible mean area per slot
};

template <class T>
struct SegLosses {
  ad::Var<T> div;
  ad::Var<T> bin;
  ad::Var<T> area;
  ad::Var<T> total;  // weighted sum
};

template <class T>
class UNet {
 public:
  struct Options {
    int height = 64;
    int width = 64;
    int slots = 3;
    int base_width = 8;
    int depth = 3;
    double head_gain = 1.0;  // init scale of the mask logits
    bool bias = true;        // false: all convolutions bias-free, so a black input gives uniform masks
  };

  UNet() = default;
  UNet(Options opt, Rng& rng) : opt_(opt) {
    const int div = 1 << opt.depth;
    if (opt.height % div || opt.width % div) {
      throw ShapeError("unet: resolution must be divisible by 2^depth");
    }
    int in = 3;
    for (int l = 0; l <= opt.depth; ++l) {
      const int w = opt.base_width << l;
      enc_.push_back({Conv2d<T>(in, w, 3, 1, 1, rng, opt.bias), Conv2d<T>(w, w, 3, 1, 1, rng, opt.bias)});
      in = w;
    }
    for (int l = opt.depth - 1; l >= 0; --l) {
      const int w = opt.base_width << l;
      dec_.push_back({Conv2d<T>(in + w, w, 3, 1, 1, rng, opt.bias), Conv2d<T>(w, w, 3, 1, 1, rng, opt.bias)});
      in = w;
    }
    head_ = Conv2d<T>(in, opt.slots, 1, 1, 0, rng, opt.bias, opt.head_gain);
  }

  // (N, 3, H, W) frames -> (N, K, H, W) per-pixel softmax masks.
  ad::Var<T> forward(const ad::Var<T>& x) const {
    const Shape s = x.shape();
    if (s.c != 3 || s.h != opt_.height || s.w != opt_.width) {
      throw ShapeError("segnet: expected (N,3," + std::to_string(opt_.height) + "," +
                       std::to_string(opt_.width) + ") input, got " + s.str());
    }
    std::vector<ad::Var<T>> skips;
    ad::Var<T> h = x;
    for (int l = 0; l <= opt_.depth; ++l) {
      if (l > 0) h = ops::avgpool2(h);
      h = ad::relu(enc_[l].second(ad::relu(enc_[l].first(h))));
      skips.push_back(h);
    }
    for (int i = 0; i < opt_.depth; ++i) {
      const auto& skip = skips[opt_.depth - 1 - i];
      h = ad::concat_channels<T>({ops::upsample2(h), skip});
      h = ad::relu(dec_[i].second(ad::relu(dec_[i].first(h))));
    }
    return ops::softmax_channels(head_(h));
  }

  void collect(ParamSet<T>& ps, const std::string& prefix) const {
    for (std::size_t l = 0; l < enc_.size(); ++l) {
      enc_[l].first.collect(ps, prefix + ".enc" + std::to_string(l) + "a");
      enc_[l].second.collect(ps, prefix + ".enc" + std::to_string(l) + "b");
    }
    for (std::size_t l = 0; l < dec_.size(); ++l) {
      dec_[l].first.collect(ps, prefix + ".dec" + std::to_string(l) + "a");
      dec_[l].second.collect(ps, prefix + ".dec" + std::to_string(l) + "b");
    }
    head_.collect(ps, prefix + ".head");
  }

  const Options& options() const { return opt_; }

 private:
  Options opt_;
  std::vector<std::pair<Conv2d<T>, Conv2d<T>>> enc_;
  std::vector<std::pair<Conv2d<T>, Conv2d<T>>> dec_;
  Conv2d<T> head_;
};

// div: mean over pixels of sum_{i<j} m_i m_j
// bin: mean over pixels of sum_k m_k (1 - m_k)
// area: sum_k relu(mean(m_k) - a_max)^2, averaged over the batch
template <class T>
SegLosses<T> seg_losses(const ad::Var<T>& masks, const SegLossWeights& w) {
  const Shape s = masks.shape();
  auto total_mass = ad::sum_channels(masks);
  auto pair_sum = ad::scale(ad::square(total_mass) - ad::sum_channels(ad::square(masks)), T(0.5));
  auto div = ad::mean(pair_sum);
  auto bin = ad::mean(ad::sum_channels(masks - ad::square(masks)));
  auto slot_area = ad::scale(ad::sum_hw(masks), T(1) / static_cast<T>(s.plane()));
  auto excess = ad::relu(ad::add_scalar(slot_area, static_cast<T>(-w.area_max)));
  auto area = ad::scale(ad::sum(ad::square(excess)), T(1) / static_cast<T>(s.n));
  auto total = ad::scale(div, static_cast<T>(w.div)) + ad::scale(bin, static_cast<T>(w.bin)) +
               ad::scale(area, static_cast<T>(w.area));
  return {div, bin, area, total};
}

// Sum over slots of warp(x * m_k, g_k). x: (N, 3, H, W), masks: (N, K, H, W),
// transforms: K tensors of shape (N, 4, 1, 1).
template <class T>
ad::Var<T> compose_prediction(const ad::Var<T>& x, const ad::Var<T>& masks,
                              const std::vector<ad::Var<T>>& transforms) {
  const int K = masks.shape().c;
  if (static_cast<int>(transforms.size()) != K) {
    throw ShapeError("compose_prediction: " + std::to_string(transforms.size()) + " transforms for " +
                     std::to_string(K) + " slots");
  }
  ad::Var<T> pred;
  for (int k = 0; k < K; ++k) {
    auto obj = ad::mul_channels(x, ad::slice_channels(masks, k, 1));
    auto moved = ops::warp(obj, transforms[k]);
    pred = k == 0 ? moved : pred + moved;
  }
  return pred;
}

template <class T>
ad::Var<T> pred_recon_loss(const ad::Var<T>& pred, const ad::Var<T>& next) {
  require_same_shape(pred.shape(), next.shape(), "pred_recon_loss");
  return ad::mean(ad::square(pred - next));
}

}  // namespace homoseg
