#pragma once

// Evaluation of trained checkpoints against simulator ground truth, the
// versioned metrics document, and the PNG figures (PCA scatter coloured by
// the relation scalar, mask-overlay strips).

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "homoseg/metrics.hpp"
#include "homoseg/train.hpp"

namespace homoseg {

inline constexpr int kMetricsSchemaVersion = 1;

struct EpisodeMetrics {
  int episode = 0;
  std::optional<double> ari;  // mean over frames with non-empty foreground
  std::vector<double> iou;    // mean matched IoU per ground-truth object
  double degeneracy = 0;
  friend bool operator==(const EpisodeMetrics&, const EpisodeMetrics&) = default;
};

struct RelationMetrics {
  std::string layout;
  int samples = 0;
  std::optional<double> spearman;
  double sign_accuracy = 0;  // sign(s) vs sign(delta distance), orientation-free
  std::vector<double> s;
  std::vector<double> delta_distance;
  std::optional<std::vector<std::array<double, 2>>> pca_coords;
  std::optional<std::array<double, 2>> pca_explained;
  friend bool operator==(const RelationMetrics&, const RelationMetrics&) = default;
};

struct MetricsReport {
  int schema_version = kMetricsSchemaVersion;
  std::string checkpoint;
  std::string checkpoint_hash;
  nlohmann::json config;
  std::vector<EpisodeMetrics> episodes;
  std::optional<double> ari;
  std::vector<double> iou;
  double degeneracy = 0;
  std::optional<double> homo_residual;        // held-out mean L_homo
  std::optional<double> train_homo_residual;  // from the end of phase-1 training
  std::optional<double> identity_norm;        // ||rho(identity)||
  std::vector<RelationMetrics> relations;
  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

namespace detail {

template <class V>
nlohmann::json opt_json(const std::optional<V>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

template <class V>
std::optional<V> json_opt(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<V>();
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const EpisodeMetrics& m) {
  j = {{"episode", m.episode}, {"ari", detail::opt_json(m.ari)}, {"iou", m.iou}, {"degeneracy", m.degeneracy}};
}

inline void from_json(const nlohmann::json& j, EpisodeMetrics& m) {
  m.episode = j.at("episode").get<int>();
  m.ari = detail::json_opt<double>(j, "ari");
  m.iou = j.at("iou").get<std::vector<double>>();
  m.degeneracy = j.at("degeneracy").get<double>();
}

inline void to_json(nlohmann::json& j, const RelationMetrics& r) {
  j = {{"layout", r.layout},
       {"samples", r.samples},
       {"spearman", detail::opt_json(r.spearman)},
       {"sign_accuracy", r.sign_accuracy},
       {"s", r.s},
       {"delta_distance", r.delta_distance},
       {"pca_coords", detail::opt_json(r.pca_coords)},
       {"pca_explained", detail::opt_json(r.pca_explained)}};
}

inline void from_json(const nlohmann::json& j, RelationMetrics& r) {
  r.layout = j.at("layout").get<std::string>();
  r.samples = j.at("samples").get<int>();
  r.spearman = detail::json_opt<double>(j, "spearman");
  r.sign_accuracy = j.at("sign_accuracy").get<double>();
  r.s = j.at("s").get<std::vector<double>>();
  r.delta_distance = j.at("delta_distance").get<std::vector<double>>();
  r.pca_coords = detail::json_opt<std::vector<std::array<double, 2>>>(j, "pca_coords");
  r.pca_explained = detail::json_opt<std::array<double, 2>>(j, "pca_explained");
}

inline void to_json(nlohmann::json& j, const MetricsReport& r) {
  j = {{"schema_version", r.schema_version},
       {"checkpoint", r.checkpoint},
       {"checkpoint_hash", r.checkpoint_hash},
       {"config", r.config},
       {"episodes", r.episodes},
       {"ari", detail::opt_json(r.ari)},
       {"iou", r.iou},
       {"degeneracy", r.degeneracy},
       {"homo_residual", detail::opt_json(r.homo_residual)},
       {"train_homo_residual", detail::opt_json(r.train_homo_residual)},
       {"identity_norm", detail::opt_json(r.identity_norm)},
       {"relations", r.relations}};
}

inline void from_json(const nlohmann::json& j, MetricsReport& r) {
  r.schema_version = j.at("schema_version").get<int>();
  if (r.schema_version != kMetricsSchemaVersion) {
    throw io::VersionError("metrics schema version " + std::to_string(r.schema_version) + ", expected " +
                           std::to_string(kMetricsSchemaVersion));
  }
  r.checkpoint = j.at("checkpoint").get<std::string>();
  r.checkpoint_hash = j.at("checkpoint_hash").get<std::string>();
  r.config = j.at("config");
  r.episodes = j.at("episodes").get<std::vector<EpisodeMetrics>>();
  r.ari = detail::json_opt<double>(j, "ari");
  r.iou = j.at("iou").get<std::vector<double>>();
  r.degeneracy = j.at("degeneracy").get<double>();
  r.homo_residual = detail::json_opt<double>(j, "homo_residual");
  r.train_homo_residual = detail::json_opt<double>(j, "train_homo_residual");
  r.identity_norm = detail::json_opt<double>(j, "identity_norm");
  r.relations = j.at("relations").get<std::vector<RelationMetrics>>();
}

// ---------------------------------------------------------------------------
// Segmentation metrics over a dataset

struct SegmentationSummary {
  std::vector<EpisodeMetrics> episodes;
  std::optional<double> ari;
  std::vector<double> iou;
  double degeneracy = 0;
  std::vector<TransformParam> observed;  // encoder outputs, for held-out pairs
};

inline SegmentationSummary evaluate_segmentation(const Model<float>& model, const Dataset& ds, int chunk = 16) {
  SegmentationSummary out;
  const int objects = 2;
  struct Acc {
    double ari = 0;
    int ari_n = 0;
    std::vector<double> iou = std::vector<double>(2, 0.0);
    int frames = 0;
    int degenerate = 0;
  };
  std::vector<Acc> acc(ds.episodes.size());
  for_each_pair_chunk(model, ds, chunk, [&](int e, int t0, const Tensor<float>& masks, const auto& gs, const auto&) {
    const Shape s = masks.shape();
    const auto labels = metrics::argmax_labels(masks);
    const auto& gm = ds.episodes[e].gt_masks;
    for (int n = 0; n < s.n; ++n) {
      const int t = t0 + n;
      const auto gt = metrics::gt_labels({gm.plane(t, 0), gm.plane(t, 1)}, s.plane());
      const std::span<const int> pred(labels.data() + static_cast<std::size_t>(n) * s.plane(), s.plane());
      auto& a = acc[e];
      if (const auto ari = metrics::foreground_ari(pred, gt)) {
        a.ari += *ari;
        ++a.ari_n;
      }
      const auto m = metrics::matched_iou(pred, gt, s.c, objects);
      for (int o = 0; o < objects; ++o) a.iou[o] += m.iou[o];
      a.degenerate += metrics::frame_degenerate(pred, gt, s.c, objects);
      ++a.frames;
      for (const auto& g : gs) out.observed.push_back(unpack_param(g.value(), n));
    }
  });
  double ari_sum = 0, deg_sum = 0;
  int ari_frames = 0, frames = 0;
  out.iou.assign(objects, 0.0);
  for (std::size_t e = 0; e < acc.size(); ++e) {
    const auto& a = acc[e];
    EpisodeMetrics em;
    em.episode = static_cast<int>(e);
    if (a.ari_n > 0) em.ari = a.ari / a.ari_n;
    for (int o = 0; o < objects; ++o) {
      em.iou.push_back(a.frames ? a.iou[o] / a.frames : 0.0);
      out.iou[o] += a.iou[o];
    }
    em.degeneracy = a.frames ? static_cast<double>(a.degenerate) / a.frames : 0.0;
    out.episodes.push_back(em);
    ari_sum += a.ari;
    ari_frames += a.ari_n;
    deg_sum += a.degenerate;
    frames += a.frames;
  }
  if (ari_frames > 0) out.ari = ari_sum / ari_frames;
  for (auto& v : out.iou) v = frames ? v / frames : 0.0;
  out.degeneracy = frames ? deg_sum / frames : 0.0;
  return out;
}

// Mean L_homo over pairs built from held-out encoder outputs plus fresh
// synthetic pairs, using an rng stream never used in training.
inline double heldout_homo_residual(const Model<float>& model, const std::vector<TransformParam>& observed,
                                    const TrainConfig& cfg, std::uint64_t stream = 11) {
  Rng rng(derive_seed(cfg.seed, stream));
  const auto pairs = sample_homo_pairs(observed, cfg, rng);
  auto g1 = ad::constant(pack_params<float>(pairs.g1));
  auto g2 = ad::constant(pack_params<float>(pairs.g2));
  return loss_homo(model.rho, g1, g2).item();
}

inline double identity_norm(const Model<float>& model) {
  const std::vector<TransformParam> e{identity()};
  const auto h = model.rho(ad::constant(pack_params<float>(e))).value();
  double sq = 0;
  for (float v : h.span()) sq += static_cast<double>(v) * v;
  return std::sqrt(sq);
}

inline RelationMetrics evaluate_relations(const Model<float>& model, const std::vector<int>& roles,
                                          const Dataset& ds) {
  RelationMetrics r;
  r.layout = sim::to_string(ds.config.layout);
  const auto rel = extract_relations(model, roles, ds);
  r.samples = static_cast<int>(rel.size());
  r.s = project_scalar(model, rel);
  std::vector<std::vector<double>> hs;
  for (const auto& x : rel) {
    r.delta_distance.push_back(x.delta_distance);
    hs.push_back(x.h);
  }
  if (r.samples >= 10) r.spearman = metrics::spearman(r.s, r.delta_distance);
  int agree = 0, counted = 0;
  for (std::size_t i = 0; i < rel.size(); ++i) {
    if (r.delta_distance[i] == 0 || r.s[i] == 0) continue;
    ++counted;
    agree += (r.s[i] > 0) == (r.delta_distance[i] > 0);
  }
  if (counted > 0) r.sign_accuracy = std::max(agree, counted - agree) / static_cast<double>(counted);
  try {
    if (!hs.empty() && hs[0].size() >= 2) {
      const auto p = metrics::pca2(hs);
      r.pca_coords = p.coords;
      r.pca_explained = p.explained;
    }
  } catch (const std::invalid_argument&) {
    // rank-0 latents: the PCA section stays absent
  }
  return r;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[i] = digits[v & 15];
  return s;
}

struct EvalInputs {
  const Dataset* segmentation = nullptr;       // held-out episodes for segmentation metrics
  std::vector<const Dataset*> relations;       // held-out episodes for the relation scalar
};

inline MetricsReport evaluate(const Checkpoint& ckpt, const std::string& ckpt_name, const EvalInputs& in) {
  MetricsReport rep;
  rep.checkpoint = ckpt_name;
  const Model<float> model = model_from_checkpoint(ckpt);
  rep.checkpoint_hash = hex64(param_hash(model.all_params()));
  rep.config = ckpt.config;
  if (ckpt.final_homo_residual >= 0) rep.train_homo_residual = ckpt.final_homo_residual;
  if (in.segmentation) {
    auto seg = evaluate_segmentation(model, *in.segmentation);
    rep.episodes = seg.episodes;
    rep.ari = seg.ari;
    rep.iou = seg.iou;
    rep.degeneracy = seg.degeneracy;
    rep.homo_residual = heldout_homo_residual(model, seg.observed, ckpt.config);
  }
  rep.identity_norm = identity_norm(model);
  if (ckpt.phase >= 2 && ckpt.slot_roles.size() >= 3) {
    for (const auto* ds : in.relations) rep.relations.push_back(evaluate_relations(model, ckpt.slot_roles, *ds));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Images

struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  Image(int w, int h, std::array<std::uint8_t, 3> fill = {255, 255, 255}) : width(w), height(h), rgb(3 * w * h) {
    for (int i = 0; i < w * h; ++i)
      for (int c = 0; c < 3; ++c) rgb[3 * i + c] = fill[c];
  }

  void set(int x, int y, std::array<std::uint8_t, 3> c) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    for (int k = 0; k < 3; ++k) rgb[3 * (y * width + x) + k] = c[k];
  }
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

inline void png_chunk(std::vector<std::uint8_t>& out, const char* type, const std::vector<std::uint8_t>& data) {
  put_u32(out, static_cast<std::uint32_t>(data.size()));
  std::vector<std::uint8_t> body(type, type + 4);
  body.insert(body.end(), data.begin(), data.end());
  out.insert(out.end(), body.begin(), body.end());
  put_u32(out, static_cast<std::uint32_t>(::crc32(0L, body.data(), static_cast<uInt>(body.size()))));
}

}  // namespace detail

// 8-bit RGB PNG, no filtering.
inline void write_png(const Image& img, const std::filesystem::path& path) {
  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(img.height) * (3 * img.width + 1));
  for (int y = 0; y < img.height; ++y) {
    raw.push_back(0);
    raw.insert(raw.end(), img.rgb.begin() + 3 * y * img.width, img.rgb.begin() + 3 * (y + 1) * img.width);
  }
  uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> z(zlen);
  if (compress2(z.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK) {
    throw std::runtime_error("png: compression failed");
  }
  z.resize(zlen);
  std::vector<std::uint8_t> out{0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  std::vector<std::uint8_t> ihdr;
  detail::put_u32(ihdr, static_cast<std::uint32_t>(img.width));
  detail::put_u32(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});
  detail::png_chunk(out, "IHDR", ihdr);
  detail::png_chunk(out, "IDAT", z);
  detail::png_chunk(out, "IEND", {});
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write '" + path.string() + "'");
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("write failed for '" + path.string() + "'");
}

// Blue (low) -> white -> red (high).
inline std::array<std::uint8_t, 3> diverging_color(double u) {
  u = std::clamp(u, 0.0, 1.0);
  auto lerp = [](double a, double b, double t) { return static_cast<std::uint8_t>(std::lround(a + (b - a) * t)); };
  if (u < 0.5) {
    const double t = u / 0.5;
    return {lerp(33, 240, t), lerp(102, 240, t), lerp(172, 240, t)};
  }
  const double t = (u - 0.5) / 0.5;
  return {lerp(240, 178, t), lerp(240, 24, t), lerp(240, 43, t)};
}

// Scatter of 2-D points coloured by `value`; one 5x5 marker per point.
inline Image scatter_plot(const std::vector<std::array<double, 2>>& pts, const std::vector<double>& value,
                          int size = 480) {
  Image img(size, size);
  const int margin = 24;
  for (int i = margin; i < size - margin; ++i) {
    img.set(i, margin, {0, 0, 0});
    img.set(i, size - margin, {0, 0, 0});
    img.set(margin, i, {0, 0, 0});
    img.set(size - margin, i, {0, 0, 0});
  }
  if (pts.empty()) return img;
  double x0 = pts[0][0], x1 = x0, y0 = pts[0][1], y1 = y0;
  for (const auto& p : pts) {
    x0 = std::min(x0, p[0]);
    x1 = std::max(x1, p[0]);
    y0 = std::min(y0, p[1]);
    y1 = std::max(y1, p[1]);
  }
  double v0 = value.empty() ? 0 : *std::min_element(value.begin(), value.end());
  double v1 = value.empty() ? 1 : *std::max_element(value.begin(), value.end());
  const double span_x = x1 > x0 ? x1 - x0 : 1.0;
  const double span_y = y1 > y0 ? y1 - y0 : 1.0;
  const double span_v = v1 > v0 ? v1 - v0 : 1.0;
  const int inner = size - 2 * margin - 8;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const int px = margin + 4 + static_cast<int>(std::lround((pts[i][0] - x0) / span_x * inner));
    const int py = size - margin - 4 - static_cast<int>(std::lround((pts[i][1] - y0) / span_y * inner));
    const auto c = diverging_color(i < value.size() ? (value[i] - v0) / span_v : 0.5);
    for (int dy = -2; dy <= 2; ++dy)
      for (int dx = -2; dx <= 2; ++dx) img.set(px + dx, py + dy, c);
  }
  return img;
}

inline std::array<std::uint8_t, 3> slot_color(int k) {
  static const std::array<std::array<std::uint8_t, 3>, 8> pal{{{230, 159, 0},
                                                               {86, 180, 233},
                                                               {0, 158, 115},
                                                               {240, 228, 66},
                                                               {0, 114, 178},
                                                               {213, 94, 0},
                                                               {204, 121, 167},
                                                               {120, 120, 120}}};
  return pal[k % pal.size()];
}

// Mask strip for chosen frames: row 1 the frames, row 2 the hard slot
// assignment, then one row per slot with the frame multiplied by that mask.
inline Image mask_strip(const Model<float>& model, const sim::Episode& ep, const std::vector<int>& ts) {
  const Shape fs = ep.frames.shape();
  const int H = fs.h, W = fs.w, n = static_cast<int>(ts.size());
  Tensor<float> x(Shape{n, 3, H, W});
  for (int i = 0; i < n; ++i) {
    const float* src = ep.frames.data() + static_cast<std::size_t>(ts[i]) * fs.sample();
    std::copy(src, src + fs.sample(), x.data() + static_cast<std::size_t>(i) * fs.sample());
  }
  const auto masks = model.seg.forward(ad::constant(x)).value();
  const int K = masks.shape().c;
  const auto labels = metrics::argmax_labels(masks);
  const int gap = 2;
  Image img(n * (W + gap) + gap, (2 + K) * (H + gap) + gap, {40, 40, 40});
  auto to8 = [](float v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); };
  for (int i = 0; i < n; ++i) {
    const int ox = gap + i * (W + gap);
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx) {
        std::array<std::uint8_t, 3> c{to8(x(i, 0, y, xx)), to8(x(i, 1, y, xx)), to8(x(i, 2, y, xx))};
        img.set(ox + xx, gap + y, c);
        img.set(ox + xx, gap + (H + gap) + y, slot_color(labels[static_cast<std::size_t>(i) * H * W + y * W + xx]));
        for (int k = 0; k < K; ++k) {
          const float m = masks(i, k, y, xx);
          img.set(ox + xx, gap + (2 + k) * (H + gap) + y,
                  {to8(m * x(i, 0, y, xx)), to8(m * x(i, 1, y, xx)), to8(m * x(i, 2, y, xx))});
        }
      }
  }
  return img;
}

inline void write_metrics(const MetricsReport& rep, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write '" + path.string() + "'");
  f << nlohmann::json(rep).dump(2) << "\n";
  if (!f) throw std::runtime_error("write failed for '" + path.string() + "'");
}

inline MetricsReport read_metrics(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read '" + path.string() + "'");
  return nlohmann::json::parse(f).get<MetricsReport>();
}

struct EmittedFiles {
  std::filesystem::path metrics;
  std::vector<std::filesystem::path> scatters;
  std::vector<std::filesystem::path> strips;
};

// Writes metrics.json plus a PCA scatter per relation section that carries
// PCA coordinates. Sections without PCA data are skipped.
inline EmittedFiles emit_report(const MetricsReport& rep, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw std::runtime_error("cannot create '" + dir.string() + "'");
  EmittedFiles out;
  out.metrics = dir / "metrics.json";
  write_metrics(rep, out.metrics);
  for (const auto& r : rep.relations) {
    if (!r.pca_coords) continue;
    const auto p = dir / ("pca_scatter_" + r.layout + ".png");
    write_png(scatter_plot(*r.pca_coords, r.s), p);
    out.scatters.push_back(p);
  }
  return out;
}

// Mask strips for the first `episodes` episodes at evenly spaced frames.
inline std::vector<std::filesystem::path> emit_mask_strips(const Model<float>& model, const Dataset& ds,
                                                           const std::filesystem::path& dir, int episodes = 2,
                                                           int frames = 8) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> out;
  for (int e = 0; e < std::min<int>(episodes, static_cast<int>(ds.episodes.size())); ++e) {
    const int T = ds.episodes[e].length();
    std::vector<int> ts;
    for (int i = 0; i < frames; ++i) ts.push_back(std::min(T - 1, i * std::max(1, T / frames)));
    const auto p = dir / ("mask_strip_" + std::to_string(e) + ".png");
    write_png(mask_strip(model, ds.episodes[e], ts), p);
    out.push_back(p);
  }
  return out;
}

}  // namespace homoseg
