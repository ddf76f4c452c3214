#pragma once

// Two-phase training.
//
// Phase 1 trains the segmenter, the transformation encoder and rho on
// next-frame prediction plus mask regularisers; the homomorphism and
// variance terms switch on at the curriculum threshold.
// Phase 2 freezes all of that and fits the scalar projection on relative
// transformations between the two non-background slots.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "homoseg/binary_io.hpp"
#include "homoseg/dataset.hpp"
#include "homoseg/homo.hpp"
#include "homoseg/optim.hpp"
#include "homoseg/segnet.hpp"
#include "homoseg/transform.hpp"

namespace homoseg {

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& term, const std::string& detail)
      : std::runtime_error("non-finite " + term + ": " + detail), term_(term) {}
  const std::string& term() const { return term_; }

 private:
  std::string term_;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TrainConfig {
  int steps = 20000;
  int batch = 32;
  double lr = 3e-4;
  double grad_clip = 1.0;  // global-norm clip, 0 disables
  double lambda_div = 0.1;
  double lambda_bin = 0.1;
  double lambda_area = 0.05;
  double lambda_homo = 1.0;
  double lambda_var = 0.1;
  int curriculum_threshold = -1;  // -1: 30% of steps
  int seg_delay = 0;              // mask regulariser weights are 0 for this many steps,
  int seg_warmup = 0;             // then ramp linearly from 0 over this many steps
  int slots = 3;
  int latent_dim = 8;
  double m_var = 0.5;
  double a_max = 0.9;
  std::uint64_t seed = 0;
  int checkpoint_every = 1000;
  std::string dataset;
  int base_width = 32;
  int depth = 3;
  double head_gain = 1.0;
  bool seg_bias = true;
  int phi_features = 8;
  double log_scale_limit = 1.0;
  int synthetic_pairs = 16;
  double synthetic_log_scale = 0.1;
  double synthetic_translation = 8.0;
  int rel_steps = 2000;
  double rel_lr = 1e-3;
  int rel_batch = 64;
  double rel_lambda_var = 0.1;

  // Multiplier on the mask regulariser weights at a given step.
  double seg_ramp(int step) const {
    if (step < seg_delay) return 0.0;
    const int since = step - seg_delay;
    if (seg_warmup <= 0 || since >= seg_warmup) return 1.0;
    return static_cast<double>(since) / seg_warmup;
  }

  int resolved_threshold() const {
    return curriculum_threshold < 0 ? static_cast<int>(std::floor(0.3 * steps)) : curriculum_threshold;
  }

  void validate() const {
    auto need = [](bool ok, const std::string& msg) {
      if (!ok) throw ConfigError(msg);
    };
    need(steps >= 0, "train.steps must be >= 0");
    need(batch >= 2, "train.batch must be >= 2");
    need(lr > 0, "train.lr must be > 0");
    need(grad_clip >= 0, "train.grad_clip must be >= 0");
    for (double l : {lambda_div, lambda_bin, lambda_area, lambda_homo, lambda_var, rel_lambda_var}) {
      need(l >= 0, "loss weights must be non-negative");
    }
    need(resolved_threshold() <= steps, "train.curriculum_threshold must not exceed train.steps");
    need(slots >= 2 && slots <= 8, "train.slots must be in [2, 8]");
    need(latent_dim >= 1, "train.latent_dim must be >= 1");
    need(m_var >= 0, "train.m_var must be >= 0");
    need(a_max > 0 && a_max <= 1, "train.a_max must be in (0, 1]");
    need(seg_warmup >= 0, "train.seg_warmup must be >= 0");
    need(seg_delay >= 0, "train.seg_delay must be >= 0");
    need(checkpoint_every >= 0, "train.checkpoint_every must be >= 0");
    need(base_width >= 1 && depth >= 1, "train.base_width and train.depth must be >= 1");
    need(head_gain > 0, "train.head_gain must be > 0");
    need(phi_features >= 1, "train.phi_features must be >= 1");
    need(log_scale_limit > 0, "train.log_scale_limit must be > 0");
    need(synthetic_pairs >= 0, "train.synthetic_pairs must be >= 0");
    need(rel_steps >= 0 && rel_lr > 0 && rel_batch >= 2, "phase-2 steps/lr/batch out of range");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"steps", c.steps},
       {"batch", c.batch},
       {"lr", c.lr},
       {"grad_clip", c.grad_clip},
       {"lambda_div", c.lambda_div},
       {"lambda_bin", c.lambda_bin},
       {"lambda_area", c.lambda_area},
       {"lambda_homo", c.lambda_homo},
       {"lambda_var", c.lambda_var},
       {"curriculum_threshold", c.curriculum_threshold},
       {"seg_delay", c.seg_delay},
       {"seg_warmup", c.seg_warmup},
       {"slots", c.slots},
       {"latent_dim", c.latent_dim},
       {"m_var", c.m_var},
       {"a_max", c.a_max},
       {"seed", c.seed},
       {"checkpoint_every", c.checkpoint_every},
       {"dataset", c.dataset},
       {"base_width", c.base_width},
       {"depth", c.depth},
       {"head_gain", c.head_gain},
       {"seg_bias", c.seg_bias},
       {"phi_features", c.phi_features},
       {"log_scale_limit", c.log_scale_limit},
       {"synthetic_pairs", c.synthetic_pairs},
       {"synthetic_log_scale", c.synthetic_log_scale},
       {"synthetic_translation", c.synthetic_translation},
       {"rel_steps", c.rel_steps},
       {"rel_lr", c.rel_lr},
       {"rel_batch", c.rel_batch},
       {"rel_lambda_var", c.rel_lambda_var}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  c = d;
  get("steps", c.steps);
  get("batch", c.batch);
  get("lr", c.lr);
  get("grad_clip", c.grad_clip);
  get("lambda_div", c.lambda_div);
  get("lambda_bin", c.lambda_bin);
  get("lambda_area", c.lambda_area);
  get("lambda_homo", c.lambda_homo);
  get("lambda_var", c.lambda_var);
  get("curriculum_threshold", c.curriculum_threshold);
  get("seg_delay", c.seg_delay);
  get("seg_warmup", c.seg_warmup);
  get("slots", c.slots);
  get("latent_dim", c.latent_dim);
  get("m_var", c.m_var);
  get("a_max", c.a_max);
  get("seed", c.seed);
  get("checkpoint_every", c.checkpoint_every);
  get("dataset", c.dataset);
  get("base_width", c.base_width);
  get("depth", c.depth);
  get("head_gain", c.head_gain);
  get("seg_bias", c.seg_bias);
  get("phi_features", c.phi_features);
  get("log_scale_limit", c.log_scale_limit);
  get("synthetic_pairs", c.synthetic_pairs);
  get("synthetic_log_scale", c.synthetic_log_scale);
  get("synthetic_translation", c.synthetic_translation);
  get("rel_steps", c.rel_steps);
  get("rel_lr", c.rel_lr);
  get("rel_batch", c.rel_batch);
  get("rel_lambda_var", c.rel_lambda_var);
}

// splitmix64 finaliser; derives independent seeds for separate streams.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// All learned modules. Parameter sets are kept per module so phases can
// freeze or optimise them independently.
template <class T>
struct Model {
  UNet<T> seg;
  PhiEncoder<T> phi;
  Rho<T> rho;
  ProjScalar<T> proj;
  ParamSet<T> seg_params;
  ParamSet<T> phi_params;
  ParamSet<T> rho_params;
  ParamSet<T> proj_params;

  Model(const TrainConfig& cfg, int height, int width) {
    Rng init(derive_seed(cfg.seed, 1));
    seg = UNet<T>({height, width, cfg.slots, cfg.base_width, cfg.depth, cfg.head_gain, cfg.seg_bias}, init);
    phi = PhiEncoder<T>(height, width, {cfg.phi_features, cfg.log_scale_limit, 32.0}, init);
    rho = Rho<T>({cfg.latent_dim, 32, 4.0}, init);
    proj = ProjScalar<T>({cfg.latent_dim, 16}, init);
    seg.collect(seg_params, "segnet");
    phi.collect(phi_params, "phi");
    rho.collect(rho_params, "rho");
    proj.collect(proj_params, "proj");
  }

  ParamSet<T> phase1_params() const {
    ParamSet<T> ps;
    ps.append(seg_params);
    ps.append(phi_params);
    ps.append(rho_params);
    return ps;
  }

  ParamSet<T> all_params() const {
    ParamSet<T> ps = phase1_params();
    ps.append(proj_params);
    return ps;
  }

  // Per-slot transformations (K tensors of (N, 4, 1, 1)) for a batch.
  std::vector<ad::Var<T>> slot_transforms(const ad::Var<T>& x, const ad::Var<T>& masks,
                                          const ad::Var<T>& next) const {
    const auto cur = phi.moments(phi.features(x));
    const auto nm = phi.moments(phi.features(next));
    std::vector<ad::Var<T>> gs;
    for (int k = 0; k < masks.shape().c; ++k) {
      gs.push_back(phi.encode(ad::mul_channels(x, ad::slice_channels(masks, k, 1)), cur, nm));
    }
    return gs;
  }
};

// 64-bit FNV-1a over parameter names, shapes and raw bytes.
template <class T>
std::uint64_t param_hash(const ParamSet<T>& ps) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, v] : ps) {
    mix(name.data(), name.size());
    mix(v.value().data(), v.value().size() * sizeof(T));
  }
  return h;
}

// ---------------------------------------------------------------------------
// Batches

template <class T>
struct FramePairBatch {
  Tensor<T> x;
  Tensor<T> next;
  std::vector<std::pair<int, int>> index;  // (episode, t)
};

inline int dataset_pair_count(const Dataset& ds) {
  int n = 0;
  for (const auto& e : ds.episodes) n += std::max(0, e.length() - 1);
  return n;
}

template <class T>
FramePairBatch<T> gather_pairs(const Dataset& ds, const std::vector<std::pair<int, int>>& idx) {
  const auto& f0 = ds.episodes.at(idx.at(0).first).frames.shape();
  const Shape s{static_cast<int>(idx.size()), 3, f0.h, f0.w};
  FramePairBatch<T> b{Tensor<T>(s), Tensor<T>(s), idx};
  const std::size_t per = s.sample();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& fr = ds.episodes[idx[i].first].frames;
    const float* a = fr.data() + static_cast<std::size_t>(idx[i].second) * per;
    std::copy(a, a + per, b.x.data() + i * per);
    std::copy(a + per, a + 2 * per, b.next.data() + i * per);
  }
  return b;
}

// Uniform random (episode, t) with t + 1 < T; a pure function of the rng.
template <class T>
FramePairBatch<T> sample_batch(const Dataset& ds, int size, Rng& rng) {
  std::vector<std::pair<int, int>> idx;
  for (int i = 0; i < size; ++i) {
    const int e = rng.below(static_cast<int>(ds.episodes.size()));
    const int t = rng.below(ds.episodes[e].length() - 1);
    idx.emplace_back(e, t);
  }
  return gather_pairs<T>(ds, idx);
}

// ---------------------------------------------------------------------------
// Homomorphism pairs

struct HomoPairs {
  std::vector<TransformParam> g1;
  std::vector<TransformParam> g2;
  int observed = 0;
  int dropped = 0;
};

// Observed transforms are paired through a random permutation (pairs whose
// composition leaves the admissible range are dropped), then synthetic
// in-range pairs and one (identity, identity) pair are appended.
inline HomoPairs sample_homo_pairs(const std::vector<TransformParam>& observed, const TrainConfig& cfg, Rng& rng) {
  HomoPairs p;
  const int n = static_cast<int>(observed.size());
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  for (int i = 0; i < n; ++i) {
    const auto& a = observed[i];
    const auto& b = observed[perm[i]];
    if (!in_range(a, cfg.log_scale_limit) || !in_range(b, cfg.log_scale_limit) ||
        !in_range(compose(a, b), cfg.log_scale_limit)) {
      ++p.dropped;
      continue;
    }
    p.g1.push_back(a);
    p.g2.push_back(b);
  }
  p.observed = static_cast<int>(p.g1.size());
  auto draw = [&] {
    return TransformParam{rng.uniform(-cfg.synthetic_log_scale, cfg.synthetic_log_scale),
                          rng.uniform(-cfg.synthetic_log_scale, cfg.synthetic_log_scale),
                          rng.uniform(-cfg.synthetic_translation, cfg.synthetic_translation),
                          rng.uniform(-cfg.synthetic_translation, cfg.synthetic_translation)};
  };
  for (int i = 0; i < cfg.synthetic_pairs; ++i) {
    const auto a = draw();
    const auto b = draw();
    p.g1.push_back(a);
    p.g2.push_back(b);
  }
  p.g1.push_back(identity());
  p.g2.push_back(identity());
  return p;
}

// ---------------------------------------------------------------------------
// Total loss

struct LossBreakdown {
  double pred = 0, div = 0, bin = 0, area = 0, homo = 0, var = 0;
  bool gated = false;      // true once the homomorphism terms are active
  double seg_weight = 1.0;  // warm-up multiplier applied to the mask regularisers
  double total = 0;

  // Weighted contributions; their sum is `total`.
  std::vector<std::pair<std::string, double>> contributions(const TrainConfig& c) const {
    const double on = gated ? 1.0 : 0.0;
    return {{"pred", pred},
            {"div", seg_weight * c.lambda_div * div},
            {"bin", seg_weight * c.lambda_bin * bin},
            {"area", seg_weight * c.lambda_area * area},
            {"homo", on * c.lambda_homo * homo},
            {"var", on * c.lambda_var * var}};
  }
};

template <class T>
struct LossOutput {
  ad::Var<T> total;
  LossBreakdown terms;
  std::vector<TransformParam> observed;  // per-sample, per-slot encoder outputs
};

namespace detail {

template <class T>
double checked_value(const ad::Var<T>& v, const char* term) {
  const double x = static_cast<double>(v.item());
  if (!std::isfinite(x)) throw NumericalError(term, "value " + std::to_string(x));
  return x;
}

}  // namespace detail

template <class T>
LossOutput<T> total_loss(const Model<T>& model, const Tensor<T>& x_t, const Tensor<T>& x_next, int step,
                         const TrainConfig& cfg, Rng& rng) {
  auto x = ad::constant(x_t);
  auto next = ad::constant(x_next);
  auto masks = model.seg.forward(x);
  auto gs = model.slot_transforms(x, masks, next);
  auto pred = pred_recon_loss(compose_prediction(x, masks, gs), next);
  const double ramp = cfg.seg_ramp(step);
  auto seg = seg_losses(masks, SegLossWeights{ramp * cfg.lambda_div, ramp * cfg.lambda_bin, ramp * cfg.lambda_area,
                                              cfg.a_max});

  LossOutput<T> out;
  const int N = x_t.shape().n;
  for (int n = 0; n < N; ++n)
    for (const auto& g : gs) out.observed.push_back(unpack_param(g.value(), n));

  auto& b = out.terms;
  b.seg_weight = ramp;
  b.pred = detail::checked_value(pred, "L_pred_recon");
  b.div = detail::checked_value(seg.div, "L_div");
  b.bin = detail::checked_value(seg.bin, "L_bin");
  b.area = detail::checked_value(seg.area, "L_area");
  out.total = pred + seg.total;

  b.gated = step >= cfg.resolved_threshold();
  if (b.gated) {
    // Encoder outputs enter as constants: these terms shape rho only.
    const auto pairs = sample_homo_pairs(out.observed, cfg, rng);
    auto g1 = ad::constant(pack_params<T>(pairs.g1));
    auto g2 = ad::constant(pack_params<T>(pairs.g2));
    auto homo = loss_homo(model.rho, g1, g2);
    auto var = loss_var(model.rho(g1), cfg.m_var);
    b.homo = detail::checked_value(homo, "L_homo");
    b.var = detail::checked_value(var, "L_var");
    out.total = out.total + ad::scale(homo, static_cast<T>(cfg.lambda_homo)) +
                ad::scale(var, static_cast<T>(cfg.lambda_var));
  }
  b.total = 0;
  for (const auto& [_, v] : b.contributions(cfg)) b.total += v;
  detail::checked_value(out.total, "total loss");
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

struct OptimizerState {
  std::int64_t steps = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

struct Checkpoint {
  std::uint32_t phase = 1;
  std::int64_t step = 0;
  TrainConfig config;
  int height = 0;
  int width = 0;
  std::string rng_state;
  std::vector<int> slot_roles;  // [background, slot_a, slot_b]; empty before phase 2
  double final_homo_residual = -1.0;
  std::vector<std::pair<std::string, Tensor<float>>> params;
  OptimizerState opt_phase1;
  OptimizerState opt_phase2;
};

template <class T>
OptimizerState capture_optimizer(const Adam<T>& opt) {
  return {opt.steps(), opt.first_moments(), opt.second_moments()};
}

template <class T>
void restore_optimizer(Adam<T>& opt, const OptimizerState& s) {
  if (s.m.empty() && s.v.empty() && s.steps == 0) return;
  if (s.m.size() != opt.first_moments().size() || s.v.size() != opt.second_moments().size()) {
    throw io::CorruptError("optimizer state does not match parameter layout");
  }
  for (std::size_t i = 0; i < s.m.size(); ++i) {
    if (s.m[i].size() != opt.first_moments()[i].size() || s.v[i].size() != opt.second_moments()[i].size()) {
      throw io::CorruptError("optimizer moment size mismatch");
    }
  }
  opt.set_steps(s.steps);
  opt.first_moments() = s.m;
  opt.second_moments() = s.v;
}

template <class T>
std::vector<std::pair<std::string, Tensor<float>>> capture_params(const ParamSet<T>& ps) {
  std::vector<std::pair<std::string, Tensor<float>>> out;
  for (const auto& [name, v] : ps) out.emplace_back(name, v.value().template cast<float>());
  return out;
}

template <class T>
void restore_params(const ParamSet<T>& ps, const std::vector<std::pair<std::string, Tensor<float>>>& saved) {
  if (saved.size() != ps.size()) {
    throw io::CorruptError("checkpoint has " + std::to_string(saved.size()) + " tensors, model expects " +
                           std::to_string(ps.size()));
  }
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& [name, v] = ps[i];
    if (saved[i].first != name || !(saved[i].second.shape() == v.value().shape())) {
      throw io::CorruptError("checkpoint tensor '" + saved[i].first + "' does not match model tensor '" + name + "'");
    }
    auto& dst = v.node()->value;
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(saved[i].second[k]);
  }
}

namespace detail {

inline void write_opt(io::Writer& w, const OptimizerState& s) {
  w.pod<std::int64_t>(s.steps);
  w.pod<std::uint64_t>(s.m.size());
  for (std::size_t i = 0; i < s.m.size(); ++i) {
    w.vec(s.m[i]);
    w.vec(s.v[i]);
  }
}

inline OptimizerState read_opt(io::Reader& r) {
  OptimizerState s;
  s.steps = r.pod<std::int64_t>();
  const auto n = r.pod<std::uint64_t>();
  if (n > 1'000'000) throw io::CorruptError("implausible optimizer tensor count");
  for (std::uint64_t i = 0; i < n; ++i) {
    s.m.push_back(r.vec<double>());
    s.v.push_back(r.vec<double>());
  }
  return s;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  io::Writer w;
  w.pod<std::uint32_t>(c.phase);
  w.pod<std::int64_t>(c.step);
  w.str(nlohmann::json(c.config).dump());
  w.pod<std::int32_t>(c.height);
  w.pod<std::int32_t>(c.width);
  w.str(c.rng_state);
  std::vector<std::int32_t> roles(c.slot_roles.begin(), c.slot_roles.end());
  w.vec(roles);
  w.pod(c.final_homo_residual);
  w.pod<std::uint64_t>(c.params.size());
  for (const auto& [name, t] : c.params) {
    w.str(name);
    const Shape s = t.shape();
    for (int d : {s.n, s.c, s.h, s.w}) w.pod<std::int32_t>(d);
    w.vec(t.storage());
  }
  detail::write_opt(w, c.opt_phase1);
  detail::write_opt(w, c.opt_phase2);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  io::write_file(path, "HSCK", kCheckpointFormatVersion, w);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  io::Reader r = io::read_file(path, "HSCK", kCheckpointFormatVersion);
  Checkpoint c;
  c.phase = r.pod<std::uint32_t>();
  c.step = r.pod<std::int64_t>();
  try {
    c.config = nlohmann::json::parse(r.str()).get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw io::CorruptError("'" + path.string() + "': bad config snapshot: " + e.what());
  }
  c.height = r.pod<std::int32_t>();
  c.width = r.pod<std::int32_t>();
  c.rng_state = r.str();
  const auto roles = r.vec<std::int32_t>();
  c.slot_roles.assign(roles.begin(), roles.end());
  c.final_homo_residual = r.pod<double>();
  const auto n = r.pod<std::uint64_t>();
  if (n > 100'000) throw io::CorruptError("implausible tensor count");
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name = r.str();
    Shape s;
    s.n = r.pod<std::int32_t>();
    s.c = r.pod<std::int32_t>();
    s.h = r.pod<std::int32_t>();
    s.w = r.pod<std::int32_t>();
    auto data = r.vec<float>();
    if (s.n <= 0 || s.c <= 0 || s.h <= 0 || s.w <= 0 || data.size() != s.size()) {
      throw io::CorruptError("'" + path.string() + "': tensor '" + name + "' size mismatch");
    }
    c.params.emplace_back(std::move(name), Tensor<float>(s, std::move(data)));
  }
  c.opt_phase1 = detail::read_opt(r);
  c.opt_phase2 = detail::read_opt(r);
  if (!r.at_end()) throw io::CorruptError("'" + path.string() + "': trailing bytes");
  return c;
}

// ---------------------------------------------------------------------------
// Phase 1

struct TrainOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume_from;
  int stop_after = -1;           // stop early at this step count (testing); -1 = cfg.steps
  std::ostream* progress = nullptr;
  int progress_every = 100;
};

struct Phase1Result {
  Checkpoint checkpoint;
  double final_homo_residual = -1.0;  // mean L_homo over the last logged gated steps
  double final_pred = 0.0;
  std::filesystem::path checkpoint_path;
};

class Trainer {
 public:
  Trainer(const TrainConfig& cfg, int height, int width)
      : cfg_(cfg),
        model_(cfg, height, width),
        opt_(model_.phase1_params(), {cfg.lr, 0.9, 0.999, 1e-8, cfg.grad_clip}),
        rng_(derive_seed(cfg.seed, 2)),
        height_(height),
        width_(width) {}

  Model<float>& model() { return model_; }
  const Model<float>& model() const { return model_; }
  std::int64_t step() const { return step_; }
  Rng& rng() { return rng_; }

  Checkpoint checkpoint() const {
    Checkpoint c;
    c.phase = 1;
    c.step = step_;
    c.config = cfg_;
    c.height = height_;
    c.width = width_;
    c.rng_state = rng_.state();
    c.final_homo_residual = recent_homo();
    c.params = capture_params(model_.all_params());
    c.opt_phase1 = capture_optimizer(opt_);
    return c;
  }

  void restore(const Checkpoint& c) {
    if (c.height != height_ || c.width != width_) throw io::CorruptError("checkpoint resolution mismatch");
    restore_params(model_.all_params(), c.params);
    restore_optimizer(opt_, c.opt_phase1);
    rng_.restore(c.rng_state);
    step_ = c.step;
  }

  // One optimisation step; returns the loss breakdown.
  LossBreakdown train_step(const Dataset& ds) {
    const auto batch = sample_batch<float>(ds, cfg_.batch, rng_);
    auto out = total_loss(model_, batch.x, batch.next, static_cast<int>(step_), cfg_, rng_);
    out.total.backward();
    for (const auto& [name, p] : opt_.params()) {
      if (!p.node()->has_grad()) continue;
      for (float g : p.node()->grad.span()) {
        if (!std::isfinite(g)) throw NumericalError("gradient", "parameter " + name);
      }
    }
    opt_.step();
    ++step_;
    if (out.terms.gated) {
      homo_window_.push_back(out.terms.homo);
      if (homo_window_.size() > 100) homo_window_.erase(homo_window_.begin());
    }
    return out.terms;
  }

  double recent_homo() const {
    if (homo_window_.empty()) return -1.0;
    return std::accumulate(homo_window_.begin(), homo_window_.end(), 0.0) / static_cast<double>(homo_window_.size());
  }

  void set_homo_window(double value) {
    homo_window_.clear();
    if (value >= 0) homo_window_.push_back(value);
  }

 private:
  TrainConfig cfg_;
  Model<float> model_;
  Adam<float> opt_;
  Rng rng_;
  std::int64_t step_ = 0;
  int height_;
  int width_;
  std::vector<double> homo_window_;
};

inline nlohmann::json loss_record(std::int64_t step, const LossBreakdown& b, double wall) {
  return {{"step", step}, {"total", b.total}, {"pred", b.pred}, {"div", b.div},   {"bin", b.bin},
          {"area", b.area}, {"homo", b.homo}, {"var", b.var},   {"gated", b.gated}, {"wall_time", wall}};
}

inline std::string checkpoint_name(std::int64_t step) {
  std::ostringstream os;
  os << "ckpt_" << std::setw(7) << std::setfill('0') << step << ".hsck";
  return os.str();
}

// Keeps only loss records with step < `keep_below` (used on resume).
inline void truncate_loss_log(const std::filesystem::path& log, std::int64_t keep_below) {
  std::ifstream in(log);
  if (!in) return;
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (nlohmann::json::parse(line).at("step").get<std::int64_t>() < keep_below) keep.push_back(line);
  }
  in.close();
  std::ofstream out(log, std::ios::trunc);
  for (const auto& l : keep) out << l << "\n";
}

inline Phase1Result train_phase1(const TrainConfig& cfg, const Dataset& ds, const TrainOptions& opts) {
  cfg.validate();
  if (ds.episodes.empty()) throw ConfigError("dataset has no episodes");
  if (dataset_pair_count(ds) == 0) throw ConfigError("dataset has no consecutive frame pairs");
  const Shape fs = ds.episodes.front().frames.shape();
  Trainer trainer(cfg, fs.h, fs.w);
  std::filesystem::create_directories(opts.out_dir / "checkpoints");
  const auto log_path = opts.out_dir / "loss_log.jsonl";
  if (opts.resume_from) {
    const Checkpoint c = load_checkpoint(*opts.resume_from);
    if (c.phase != 1) throw ConfigError("resume checkpoint is not a phase-1 checkpoint");
    trainer.restore(c);
    trainer.set_homo_window(c.final_homo_residual);
    truncate_loss_log(log_path, c.step);
  } else {
    std::ofstream(log_path, std::ios::trunc);
  }
  std::ofstream log(log_path, std::ios::app);
  const int end = opts.stop_after >= 0 ? std::min(opts.stop_after, cfg.steps) : cfg.steps;
  const auto t0 = std::chrono::steady_clock::now();
  Phase1Result res;
  while (trainer.step() < end) {
    const auto s = trainer.step();
    const auto b = trainer.train_step(ds);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log << loss_record(s, b, wall).dump() << "\n";
    res.final_pred = b.pred;
    if (opts.progress && opts.progress_every > 0 && (s % opts.progress_every == 0 || s + 1 == end)) {
      *opts.progress << "step " << s << " total " << b.total << " pred " << b.pred << " div " << b.div << " bin "
                     << b.bin << " homo " << b.homo << " var " << b.var << " (" << wall << " s)" << std::endl;
    }
    if (cfg.checkpoint_every > 0 && trainer.step() % cfg.checkpoint_every == 0) {
      save_checkpoint(trainer.checkpoint(), opts.out_dir / "checkpoints" / checkpoint_name(trainer.step()));
    }
  }
  log.flush();
  res.checkpoint = trainer.checkpoint();
  res.final_homo_residual = trainer.recent_homo();
  res.checkpoint_path = opts.out_dir / "phase1.hsck";
  save_checkpoint(res.checkpoint, res.checkpoint_path);
  return res;
}

// Rebuilds a float model from a checkpoint.
inline Model<float> model_from_checkpoint(const Checkpoint& c) {
  Model<float> m(c.config, c.height, c.width);
  restore_params(m.all_params(), c.params);
  return m;
}

// ---------------------------------------------------------------------------
// Phase 2: relative transformations and the scalar projection

// g_a and g_b are the two object slots' transformations re-expressed about
// each slot's own centroid at t (see object_centroid), so the evader's
// squash does not leak into the translations through the image-centre
// scaling.
struct RelationSample {
  int episode = 0;
  int t = 0;
  TransformParam g_a;
  TransformParam g_b;
  TransformParam rel;
  std::vector<double> h;     // rho(rel)
  double delta_distance = 0;  // ground truth, evaluation only
};

// Slot roles: the background is the slot whose masked image carries the
// least content (the scene background is flat black, so a slot covering it
// holds almost no intensity); the remaining slots follow in decreasing mean
// area. Returns [background, slot_a, slot_b, ...].
inline std::vector<int> slot_roles(const std::vector<double>& mean_area, const std::vector<double>& mean_content) {
  if (mean_area.size() != mean_content.size() || mean_area.empty()) {
    throw std::invalid_argument("slot_roles: per-slot statistics differ in length");
  }
  const int bg = static_cast<int>(std::min_element(mean_content.begin(), mean_content.end()) - mean_content.begin());
  std::vector<int> rest;
  for (int k = 0; k < static_cast<int>(mean_area.size()); ++k)
    if (k != bg) rest.push_back(k);
  std::stable_sort(rest.begin(), rest.end(), [&](int a, int b) { return mean_area[a] > mean_area[b]; });
  rest.insert(rest.begin(), bg);
  return rest;
}

// Centroid of slot k in sample n, relative to the image centre, weighted by
// mask times channel-summed intensity (the background is black, so stray
// mask mass on it carries no weight). Falls back to the mask alone, then to
// the image centre, when there is no weight.
inline std::pair<double, double> object_centroid(const Tensor<float>& masks, const Tensor<float>& x, int n, int k) {
  const Shape s = masks.shape();
  const float* m = masks.plane(n, k);
  auto centroid = [&](bool use_intensity) -> std::optional<std::pair<double, double>> {
    double w = 0, sx = 0, sy = 0;
    for (int i = 0; i < s.h; ++i)
      for (int j = 0; j < s.w; ++j) {
        const std::size_t p = static_cast<std::size_t>(i) * s.w + j;
        double v = m[p];
        if (use_intensity) {
          double a = 0;
          for (int ch = 0; ch < x.shape().c; ++ch) a += std::abs(x.plane(n, ch)[p]);
          v *= a;
        }
        w += v;
        sx += v * j;
        sy += v * i;
      }
    if (!(w > 1e-8)) return std::nullopt;
    return std::pair{sx / w - grid_center(s.w), sy / w - grid_center(s.h)};
  };
  if (auto c = centroid(true)) return *c;
  if (auto c = centroid(false)) return *c;
  return {0.0, 0.0};
}

// Runs `fn(episode, t0, masks, transforms, batch)` over all consecutive frame
// pairs of a dataset in inference mode, in chunks of `chunk` pairs.
template <class Fn>
void for_each_pair_chunk(const Model<float>& model, const Dataset& ds, int chunk, Fn&& fn) {
  for (int e = 0; e < static_cast<int>(ds.episodes.size()); ++e) {
    const int T = ds.episodes[e].length();
    for (int t0 = 0; t0 + 1 < T; t0 += chunk) {
      std::vector<std::pair<int, int>> idx;
      for (int t = t0; t < std::min(T - 1, t0 + chunk); ++t) idx.emplace_back(e, t);
      const auto b = gather_pairs<float>(ds, idx);
      auto x = ad::constant(b.x);
      auto masks = model.seg.forward(x);
      auto gs = model.slot_transforms(x, masks, ad::constant(b.next));
      fn(e, t0, masks.value(), gs, b);
    }
  }
}

struct SlotStats {
  std::vector<double> area;     // mean soft-mask area fraction per slot
  std::vector<double> content;  // mean of m_k * |x| (channel-summed intensity) per pixel
};

inline SlotStats mean_slot_stats(const Model<float>& model, const Dataset& ds, int chunk = 16) {
  SlotStats st;
  double count = 0;
  for_each_pair_chunk(model, ds, chunk, [&](int, int, const Tensor<float>& m, const auto&, const auto& b) {
    const Shape s = m.shape();
    st.area.resize(s.c, 0.0);
    st.content.resize(s.c, 0.0);
    for (int n = 0; n < s.n; ++n)
      for (int k = 0; k < s.c; ++k) {
        const float* p = m.plane(n, k);
        double a = 0, c = 0;
        for (std::size_t i = 0; i < s.plane(); ++i) {
          a += p[i];
          double v = 0;
          for (int ch = 0; ch < b.x.shape().c; ++ch) v += std::abs(b.x.plane(n, ch)[i]);
          c += p[i] * v;
        }
        st.area[k] += a / static_cast<double>(s.plane());
        st.content[k] += c / static_cast<double>(s.plane());
      }
    count += s.n;
  });
  for (auto& a : st.area) a /= std::max(1.0, count);
  for (auto& c : st.content) c /= std::max(1.0, count);
  return st;
}

inline std::vector<RelationSample> extract_relations(const Model<float>& model, const std::vector<int>& roles,
                                                     const Dataset& ds, int chunk = 16) {
  if (roles.size() < 3) throw std::invalid_argument("slot roles need background plus two object slots");
  std::vector<RelationSample> out;
  for_each_pair_chunk(model, ds, chunk, [&](int e, int t0, const Tensor<float>& masks, const auto& gs, const auto& b) {
    const int N = b.x.shape().n;
    std::vector<TransformParam> rels;
    for (int n = 0; n < N; ++n) {
      RelationSample r;
      r.episode = e;
      r.t = t0 + n;
      const auto [ax, ay] = object_centroid(masks, b.x, n, roles[1]);
      const auto [bx, by] = object_centroid(masks, b.x, n, roles[2]);
      r.g_a = recentre(unpack_param(gs[roles[1]].value(), n), ax, ay);
      r.g_b = recentre(unpack_param(gs[roles[2]].value(), n), bx, by);
      r.rel = rel_param(r.g_a, r.g_b);
      r.delta_distance = sim::agent_distance(ds.episodes[e], r.t + 1) - sim::agent_distance(ds.episodes[e], r.t);
      rels.push_back(r.rel);
      out.push_back(std::move(r));
    }
    const auto h = model.rho(ad::constant(pack_params<float>(rels))).value();
    const int k = h.shape().c;
    for (int n = 0; n < N; ++n) {
      auto& r = out[out.size() - N + n];
      r.h.resize(k);
      for (int d = 0; d < k; ++d) r.h[d] = h[static_cast<std::size_t>(n) * k + d];
    }
  });
  return out;
}

inline Tensor<float> pack_latents(const std::vector<RelationSample>& rs, const std::vector<int>& idx) {
  const int k = static_cast<int>(rs.at(0).h.size());
  Tensor<float> t(Shape{static_cast<int>(idx.size()), k, 1, 1});
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (int d = 0; d < k; ++d) t[i * k + d] = static_cast<float>(rs[idx[i]].h[d]);
  return t;
}

inline std::vector<double> project_scalar(const Model<float>& model, const std::vector<RelationSample>& rs) {
  std::vector<double> s;
  const int chunk = 256;
  for (std::size_t i = 0; i < rs.size(); i += chunk) {
    std::vector<int> idx;
    for (std::size_t j = i; j < std::min(rs.size(), i + chunk); ++j) idx.push_back(static_cast<int>(j));
    const auto v = model.proj(ad::constant(pack_latents(rs, idx))).value();
    for (std::size_t j = 0; j < v.size(); ++j) s.push_back(v[j]);
  }
  return s;
}

struct ProjectionFit {
  double final_homo_scalar = 0;
  double final_var_scalar = 0;
  OptimizerState optimizer;
};

// Trains the scalar projection on precomputed relative latents: random pairs
// (plus one (0, 0) pair) for the additivity loss and the first half of each
// batch for the variance loss. One JSON record per step goes to `log`.
inline ProjectionFit fit_projection(const ProjScalar<float>& proj, const ParamSet<float>& params,
                                    const std::vector<RelationSample>& rel, const TrainConfig& cfg, Rng& rng,
                                    std::ostream* log = nullptr, std::ostream* progress = nullptr,
                                    int progress_every = 100) {
  if (rel.size() < 2) throw ConfigError("projection training needs at least 2 relation samples");
  Adam<float> opt(params, {cfg.rel_lr, 0.9, 0.999, 1e-8, cfg.grad_clip});
  ProjectionFit res;
  const int n = static_cast<int>(rel.size());
  const int k = static_cast<int>(rel.front().h.size());
  const auto t0 = std::chrono::steady_clock::now();
  for (int step = 0; step < cfg.rel_steps; ++step) {
    std::vector<int> a, b;
    for (int i = 0; i + 1 < cfg.rel_batch; ++i) {
      a.push_back(rng.below(n));
      b.push_back(rng.below(n));
    }
    auto ha = ad::constant(pack_latents(rel, a));
    auto zero = ad::constant(Tensor<float>(Shape{1, k, 1, 1}));
    auto h1 = ad::concat_batch<float>({ha, zero});
    auto h2 = ad::concat_batch<float>({ad::constant(pack_latents(rel, b)), zero});
    auto homo = loss_homo_scalar(proj, h1, h2);
    auto var = loss_var_scalar(proj(ha), cfg.m_var);
    auto total = homo + ad::scale(var, static_cast<float>(cfg.rel_lambda_var));
    const double hv = detail::checked_value(homo, "loss_homo_scalar");
    const double vv = detail::checked_value(var, "loss_var_scalar");
    detail::checked_value(total, "phase-2 total loss");
    total.backward();
    opt.step();
    res.final_homo_scalar = hv;
    res.final_var_scalar = vv;
    if (log) {
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      *log << nlohmann::json{{"step", step}, {"total", hv + cfg.rel_lambda_var * vv}, {"homo_scalar", hv},
                             {"var_scalar", vv}, {"wall_time", wall}}
                  .dump()
           << "\n";
    }
    if (progress && progress_every > 0 && (step % progress_every == 0 || step + 1 == cfg.rel_steps)) {
      *progress << "rel step " << step << " homo_s " << hv << " var_s " << vv << std::endl;
    }
  }
  res.optimizer = capture_optimizer(opt);
  return res;
}

struct Phase2Result {
  Checkpoint checkpoint;
  std::uint64_t frozen_hash_before = 0;
  std::uint64_t frozen_hash_after = 0;
  double final_homo_scalar = 0;
  double final_var_scalar = 0;
  SlotStats slot_stats;
  std::filesystem::path checkpoint_path;
};

inline Phase2Result train_phase2_relational(const Checkpoint& phase1, const Dataset& ds, const TrainOptions& opts,
                                            std::optional<TrainConfig> override_cfg = std::nullopt) {
  if (phase1.phase < 1 || phase1.params.empty()) throw ConfigError("phase-1 checkpoint is empty");
  if (ds.episodes.empty() || dataset_pair_count(ds) < 2) throw ConfigError("phase-2 dataset has too few frame pairs");
  TrainConfig cfg = phase1.config;
  if (override_cfg) {
    // Only phase-2 settings may change; the architecture comes from phase 1.
    cfg.rel_steps = override_cfg->rel_steps;
    cfg.rel_lr = override_cfg->rel_lr;
    cfg.rel_batch = override_cfg->rel_batch;
    cfg.rel_lambda_var = override_cfg->rel_lambda_var;
    cfg.m_var = override_cfg->m_var;
  }
  cfg.validate();
  Model<float> model = model_from_checkpoint(phase1);
  auto frozen = model.phase1_params();
  frozen.set_trainable(false);

  Phase2Result res;
  res.frozen_hash_before = param_hash(frozen);
  res.slot_stats = mean_slot_stats(model, ds);
  const auto roles = slot_roles(res.slot_stats.area, res.slot_stats.content);
  const auto rel = extract_relations(model, roles, ds);

  Rng rng(derive_seed(cfg.seed, 3));
  std::filesystem::create_directories(opts.out_dir);
  std::ofstream log(opts.out_dir / "rel_loss_log.jsonl", std::ios::trunc);
  const auto fit = fit_projection(model.proj, model.proj_params, rel, cfg, rng, &log, opts.progress, opts.progress_every);
  res.final_homo_scalar = fit.final_homo_scalar;
  res.final_var_scalar = fit.final_var_scalar;
  res.frozen_hash_after = param_hash(frozen);
  frozen.set_trainable(true);

  Checkpoint c = phase1;
  c.phase = 2;
  c.config = cfg;
  c.slot_roles = roles;
  c.params = capture_params(model.all_params());
  c.opt_phase2 = fit.optimizer;
  c.rng_state = rng.state();
  res.checkpoint = c;
  res.checkpoint_path = opts.out_dir / "phase2.hsck";
  save_checkpoint(c, res.checkpoint_path);
  return res;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t checked = 0;
};

// Central differences against the analytic gradient on up to `samples`
// randomly chosen scalar coordinates of `params`. The relative error uses
// max(|analytic|, |numeric|, floor) as denominator so exact zeros compare
// absolutely.
inline GradCheckResult grad_check(const std::function<ad::Var<double>()>& loss,
                                  const std::vector<ad::Var<double>>& params, double eps, int samples = 64,
                                  std::uint64_t seed = 7, double floor = 1e-6) {
  if (!(eps > 0)) throw std::invalid_argument("grad_check: eps must be positive");
  for (auto p : params) p.zero_grad();
  auto l = loss();
  l.backward();
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < params.size(); ++i)
    for (std::size_t k = 0; k < params[i].value().size(); ++k) coords.emplace_back(i, k);
  Rng rng(seed);
  if (static_cast<int>(coords.size()) > samples) {
    for (int i = 0; i < samples; ++i) {
      const int j = i + rng.below(static_cast<int>(coords.size()) - i);
      std::swap(coords[i], coords[j]);
    }
    coords.resize(samples);
  }
  std::vector<double> analytic;
  for (const auto& [i, k] : coords) {
    analytic.push_back(params[i].node()->has_grad() ? params[i].node()->grad[k] : 0.0);
  }
  GradCheckResult res;
  for (std::size_t c = 0; c < coords.size(); ++c) {
    const auto [i, k] = coords[c];
    auto& v = params[i].node()->value[k];
    const double orig = v;
    v = orig + eps;
    const double up = loss().item();
    v = orig - eps;
    const double down = loss().item();
    v = orig;
    const double numeric = (up - down) / (2 * eps);
    const double denom = std::max({std::abs(analytic[c]), std::abs(numeric), floor});
    res.max_rel_error = std::max(res.max_rel_error, std::abs(analytic[c] - numeric) / denom);
    ++res.checked;
  }
  for (auto p : params) p.zero_grad();
  return res;
}

}  // namespace homoseg
