#pragma once

// Pure evaluation metrics: adjusted Rand index, matched IoU, degeneracy,
// Spearman rank correlation and two-component PCA.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "homoseg/tensor.hpp"

namespace homoseg::metrics {

inline double choose2(double n) { return 0.5 * n * (n - 1.0); }

// ARI between two labelings of the same items. Identical trivial partitions
// (where the chance-corrected denominator vanishes) score 1.
inline std::optional<double> adjusted_rand_index(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) throw std::invalid_argument("ari: label vectors differ in length");
  if (a.empty()) return std::nullopt;
  std::map<std::pair<int, int>, double> joint;
  std::map<int, double> ca, cb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[{a[i], b[i]}] += 1;
    ca[a[i]] += 1;
    cb[b[i]] += 1;
  }
  double index = 0, sa = 0, sb = 0;
  for (const auto& [_, n] : joint) index += choose2(n);
  for (const auto& [_, n] : ca) sa += choose2(n);
  for (const auto& [_, n] : cb) sb += choose2(n);
  const double total = choose2(static_cast<double>(a.size()));
  const double expected = total > 0 ? sa * sb / total : 0.0;
  const double max_index = 0.5 * (sa + sb);
  const double denom = max_index - expected;
  if (denom == 0.0) return 1.0;
  return (index - expected) / denom;
}

// Hard label per pixel from soft masks (N, K, H, W): argmax over slots,
// lowest index on ties. Returns N*H*W labels.
template <class T>
std::vector<int> argmax_labels(const Tensor<T>& masks) {
  const Shape s = masks.shape();
  std::vector<int> out(static_cast<std::size_t>(s.n) * s.plane());
  for (int n = 0; n < s.n; ++n)
    for (std::size_t p = 0; p < s.plane(); ++p) {
      int best = 0;
      T bv = masks.plane(n, 0)[p];
      for (int k = 1; k < s.c; ++k) {
        const T v = masks.plane(n, k)[p];
        if (v > bv) {
          bv = v;
          best = k;
        }
      }
      out[n * s.plane() + p] = best;
    }
  return out;
}

// Ground-truth label per pixel for one frame of binary object masks
// (O, H, W given as a plane pointer list): 0 = background, o+1 = object o.
// Pixels covered by several objects take the lowest object index.
inline std::vector<int> gt_labels(const std::vector<const std::uint8_t*>& objects, std::size_t plane) {
  std::vector<int> out(plane, 0);
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t o = 0; o < objects.size(); ++o)
      if (objects[o][p]) {
        out[p] = static_cast<int>(o) + 1;
        break;
      }
  return out;
}

// ARI over pixels that belong to some ground-truth object.
inline std::optional<double> foreground_ari(std::span<const int> pred, std::span<const int> gt) {
  if (pred.size() != gt.size()) throw std::invalid_argument("foreground_ari: size mismatch");
  std::vector<int> a, b;
  for (std::size_t i = 0; i < gt.size(); ++i)
    if (gt[i] != 0) {
      a.push_back(pred[i]);
      b.push_back(gt[i]);
    }
  if (a.empty()) return std::nullopt;
  return adjusted_rand_index(a, b);
}

struct MatchedIou {
  std::vector<double> iou;      // per ground-truth object
  std::vector<int> assignment;  // slot assigned to each object
  double total = 0;
};

inline double iou_of(std::span<const int> pred, int slot, std::span<const int> gt, int object_label) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == slot;
    const bool g = gt[i] == object_label;
    inter += p && g;
    uni += p || g;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// Best injective assignment of `objects` ground-truth objects (labels
// 1..objects) to `slots` slots, maximising total IoU; exhaustive search.
inline MatchedIou matched_iou(std::span<const int> pred, std::span<const int> gt, int slots, int objects) {
  if (objects > slots) throw std::invalid_argument("matched_iou: more objects than slots");
  std::vector<std::vector<double>> table(objects, std::vector<double>(slots));
  for (int o = 0; o < objects; ++o)
    for (int k = 0; k < slots; ++k) table[o][k] = iou_of(pred, k, gt, o + 1);
  std::vector<int> perm(slots);
  std::iota(perm.begin(), perm.end(), 0);
  MatchedIou best;
  best.total = -1;
  do {
    double t = 0;
    for (int o = 0; o < objects; ++o) t += table[o][perm[o]];
    if (t > best.total) {
      best.total = t;
      best.assignment.assign(perm.begin(), perm.begin() + objects);
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  for (int o = 0; o < objects; ++o) best.iou.push_back(table[o][best.assignment[o]]);
  return best;
}

// True when one slot holds >= 50% of the pixels of two or more non-empty
// ground-truth objects.
inline bool frame_degenerate(std::span<const int> pred, std::span<const int> gt, int slots, int objects) {
  std::vector<std::size_t> size(objects + 1, 0);
  std::vector<std::vector<std::size_t>> hit(slots, std::vector<std::size_t>(objects + 1, 0));
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (gt[i] <= 0 || gt[i] > objects) continue;
    ++size[gt[i]];
    ++hit[pred[i]][gt[i]];
  }
  for (int k = 0; k < slots; ++k) {
    int covered = 0;
    for (int o = 1; o <= objects; ++o) {
      if (size[o] > 0 && 2 * hit[k][o] >= size[o]) ++covered;
    }
    if (covered >= 2) return true;
  }
  return false;
}

inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline std::optional<double> pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("pearson: size mismatch");
  const double n = static_cast<double>(a.size());
  if (a.size() < 2) return std::nullopt;
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0 || sbb == 0) return std::nullopt;
  return sab / std::sqrt(saa * sbb);
}

// Spearman rank correlation with average ranks for ties; undefined (nullopt)
// when either input is constant.
inline std::optional<double> spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("spearman: size mismatch");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  return pearson(ra, rb);
}

struct Pca2 {
  std::vector<std::array<double, 2>> coords;
  std::array<double, 2> explained{0, 0};
  std::vector<std::vector<double>> axes;  // 2 unit vectors of length k
};

// Top-two principal components of n points in R^k (rows of `x`). Each axis
// has its first non-negligible component positive.
inline Pca2 pca2(const std::vector<std::vector<double>>& x) {
  const int n = static_cast<int>(x.size());
  if (n < 3) throw std::invalid_argument("pca2 needs at least 3 points");
  const int k = static_cast<int>(x[0].size());
  if (k < 2) throw std::invalid_argument("pca2 needs at least 2 dimensions");
  Eigen::MatrixXd m(n, k);
  for (int i = 0; i < n; ++i) {
    if (static_cast<int>(x[i].size()) != k) throw std::invalid_argument("pca2: ragged input");
    for (int d = 0; d < k; ++d) m(i, d) = x[i][d];
  }
  const Eigen::RowVectorXd mean = m.colwise().mean();
  m.rowwise() -= mean;
  const Eigen::MatrixXd cov = (m.transpose() * m) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  const Eigen::VectorXd ev = es.eigenvalues();  // ascending
  const double total = std::max(0.0, ev.sum());
  const double scale = std::max(1.0, cov.cwiseAbs().maxCoeff());
  if (!(total > 1e-12 * scale)) throw std::invalid_argument("pca2: data has rank 0");
  Pca2 out;
  for (int c = 0; c < 2; ++c) {
    Eigen::VectorXd axis = es.eigenvectors().col(k - 1 - c);
    const double amax = axis.cwiseAbs().maxCoeff();
    for (int d = 0; d < k; ++d) {
      if (std::abs(axis(d)) > 1e-9 * amax) {
        if (axis(d) < 0) axis = -axis;
        break;
      }
    }
    out.explained[c] = std::max(0.0, ev(k - 1 - c)) / total;
    out.axes.emplace_back(axis.data(), axis.data() + k);
  }
  for (int i = 0; i < n; ++i) {
    std::array<double, 2> p{};
    for (int c = 0; c < 2; ++c)
      for (int d = 0; d < k; ++d) p[c] += m(i, d) * out.axes[c][d];
    out.coords.push_back(p);
  }
  return out;
}

}  // namespace homoseg::metrics
