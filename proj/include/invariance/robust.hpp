#pragma once

// l-infinity PGD, adversarial training and robust-error estimates.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "invariance/attack.hpp"
#include "invariance/dataset_io.hpp"
#include "invariance/error.hpp"
#include "invariance/mlp.hpp"
#include "invariance/rng.hpp"
#include "invariance/transforms.hpp"

namespace invariance {

struct PgdConfig {
  double eps = 0.3;
  int steps = 40;
  bool random_start = true;

  double step_size() const { return 2.5 * eps / steps; }
  void validate() const {
    if (!(eps >= 0.0 && eps <= 1.0)) fail(ErrorCode::InvalidParams, "eps must lie in [0,1]");
    if (steps < 1) fail(ErrorCode::InvalidParams, "steps must be at least 1");
  }
};

/// Clamp v into [x0 - eps, x0 + eps] and [0,1], then pull it towards x0 one
/// ulp at a time until |v - x0| <= eps holds in double arithmetic.
inline double project_linf(double v, double x0, double eps) {
  v = std::clamp(std::clamp(v, x0 - eps, x0 + eps), 0.0, 1.0);
  while (std::abs(v - x0) > eps) v = std::nextafter(v, x0);
  return v;
}

namespace detail {

template <typename T>
void project_columns(Mat<T>& x, const Mat<T>& x0, T eps) {
  x = x.array().max(x0.array() - eps).min(x0.array() + eps).max(T(0)).min(T(1)).matrix();
}

}  // namespace detail

/// Batched PGD on columns of x0. Column j draws its random start from
/// rng.split(stream_base + j). `start`, when given, replaces the random
/// start (it is projected into the ball first).
template <typename T>
Mat<T> pgd_linf_batch(const Mlp<T>& model, const Mat<T>& x0, std::span<const int> labels, const PgdConfig& cfg,
                      const CounterRng& rng, std::uint64_t stream_base = 0, const Mat<T>* start = nullptr) {
  cfg.validate();
  if (cfg.eps == 0.0) return x0;
  const T eps = static_cast<T>(cfg.eps);
  const T step = static_cast<T>(cfg.step_size());
  Mat<T> x = x0;
  if (start) {
    x = *start;
  } else if (cfg.random_start) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      auto r = rng.split(stream_base + static_cast<std::uint64_t>(j));
      for (Eigen::Index i = 0; i < x.rows(); ++i) x(i, j) += static_cast<T>(r.uniform(-cfg.eps, cfg.eps));
    }
  }
  detail::project_columns(x, x0, eps);
  for (int s = 0; s < cfg.steps; ++s) {
    const auto g = model.backward_batch(x, labels, false);
    x += step * g.dx.unaryExpr([](T v) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
    detail::project_columns(x, x0, eps);
  }
  return x;
}

/// Single-example PGD in double precision with an exact final projection.
template <typename T>
std::vector<double> pgd_linf(const Mlp<T>& model, std::span<const double> x0, int label, const PgdConfig& cfg,
                             CounterRng rng) {
  cfg.validate();
  std::vector<double> x0v(x0.begin(), x0.end());
  if (cfg.eps == 0.0) return x0v;
  std::vector<double> x = x0v;
  if (cfg.random_start)
    for (auto& v : x) v += rng.uniform(-cfg.eps, cfg.eps);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = project_linf(x[i], x0v[i], cfg.eps);
  const double step = cfg.step_size();
  for (int s = 0; s < cfg.steps; ++s) {
    const auto g = model.grad_input(x, label);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double dir = g[i] > 0 ? 1.0 : (g[i] < 0 ? -1.0 : 0.0);
      x[i] = project_linf(x[i] + step * dir, x0v[i], cfg.eps);
    }
  }
  return x;
}

struct TrainConfig {
  double eps_train = 0.0;
  int pgd_steps = 40;
  int epochs = 10;
  int batch_size = 100;
  double lr = 1e-3;
  double lr_late = 1e-4;
  bool warm_start = true;
  /// Epochs spent at each intermediate budget of the warm-start ramp.
  int warm_step_epochs = 5;
  std::vector<int> hidden{256, 128};
  std::uint64_t seed = 0;

  void validate() const {
    if (!(eps_train >= 0.0 && eps_train <= 1.0)) fail(ErrorCode::InvalidParams, "eps_train must lie in [0,1]");
    if (pgd_steps < 1) fail(ErrorCode::InvalidParams, "pgd_steps must be at least 1");
    if (epochs < 1) fail(ErrorCode::InvalidParams, "epochs must be at least 1");
    if (batch_size < 1) fail(ErrorCode::InvalidParams, "batch_size must be at least 1");
    if (warm_step_epochs < 0) fail(ErrorCode::InvalidParams, "warm_step_epochs must be non-negative");
    if (!(lr > 0.0 && lr_late > 0.0)) fail(ErrorCode::InvalidParams, "learning rates must be positive");
  }
};

struct EpochPlan {
  double eps = 0.0;
  double lr = 0.0;
};

/// Per-epoch budget and learning rate. For eps >= 0.25 with warm start the
/// budget ramps 0.2, 0.25, ... below the target, warm_step_epochs each, and
/// then `epochs` epochs run at the target; the learning rate drops halfway
/// through those. The very first epoch uses a third of its budget.
inline std::vector<EpochPlan> epoch_schedule(const TrainConfig& cfg) {
  cfg.validate();
  std::vector<EpochPlan> plan;
  if (cfg.warm_start && cfg.eps_train >= 0.25 - 1e-12) {
    for (int i = 0;; ++i) {
      const double e = 0.2 + 0.05 * i;
      if (e >= cfg.eps_train - 1e-9) break;
      for (int k = 0; k < cfg.warm_step_epochs; ++k) plan.push_back({e, cfg.lr});
    }
  }
  for (int k = 0; k < cfg.epochs; ++k) plan.push_back({cfg.eps_train, k < cfg.epochs / 2 ? cfg.lr : cfg.lr_late});
  if (cfg.epochs == 1) plan.back().lr = cfg.lr;
  plan.front().eps /= 3.0;
  return plan;
}

struct EpochStats {
  int epoch = 0;
  double eps = 0.0;
  double lr = 0.0;
  double mean_loss = 0.0;
  double train_error = 0.0;  ///< on the adversarial batches
};

/// Madry-style training: every batch is replaced by its PGD examples.
/// Deterministic given (seed, config, dataset).
inline Mlp<float> adversarial_train(const Dataset& ds, const TrainConfig& cfg,
                                    const std::function<void(const EpochStats&)>& on_epoch = {}) {
  cfg.validate();
  std::vector<int> sizes{ds.width() * ds.height()};
  sizes.insert(sizes.end(), cfg.hidden.begin(), cfg.hidden.end());
  sizes.push_back(ds.num_categories());
  auto model = Mlp<float>::random(sizes, cfg.seed);
  Adam<float> opt(model);
  const auto plan = epoch_schedule(cfg);
  const CounterRng root(cfg.seed, 0x747261696e);
  const auto labels_all = ds.labels();

  std::vector<std::size_t> order(ds.size());
  for (std::size_t e = 0; e < plan.size(); ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto er = root.split(e);
    er.shuffle(order);
    double loss_sum = 0.0;
    std::size_t wrong = 0;
    const PgdConfig pgd{plan[e].eps, cfg.pgd_steps, true};
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      const auto end = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
      const std::span<const std::size_t> pos(order.data() + b, end - b);
      std::vector<int> labels(pos.size());
      for (std::size_t j = 0; j < pos.size(); ++j) labels[j] = labels_all[pos[j]];
      Mat<float> x = to_columns<float>(ds, pos);
      if (pgd.eps > 0.0) x = pgd_linf_batch(model, x, labels, pgd, er.split(b + 1));
      auto g = model.backward_batch(x, labels, true);
      const double batch_loss = g.losses.template cast<double>().sum();
      if (!std::isfinite(batch_loss))
        fail(ErrorCode::DivergenceDetected, "training loss is not finite in epoch " + std::to_string(e));
      loss_sum += batch_loss;
      const Mat<float> logits = model.forward_batch(x);
      for (Eigen::Index j = 0; j < logits.cols(); ++j) wrong += argmax(logits.col(j)) != labels[static_cast<std::size_t>(j)];
      const float scale = 1.0f / static_cast<float>(pos.size());
      for (auto& w : g.dw) w *= scale;
      for (auto& v : g.db) v *= scale;
      opt.step(model, g.dw, g.db, plan[e].lr);
    }
    if (!model.finite()) fail(ErrorCode::DivergenceDetected, "parameters became non-finite");
    if (on_epoch)
      on_epoch({static_cast<int>(e), plan[e].eps, plan[e].lr, loss_sum / static_cast<double>(ds.size()),
                static_cast<double>(wrong) / static_cast<double>(ds.size())});
  }
  return model;
}

struct RobustErrorReport {
  double eps_eval = 0.0;
  double clean_error = 0.0;
  /// Lower bound on the true robust error: fraction of points misclassified
  /// clean or at the point the attack found.
  double robust_error = 0.0;
  std::size_t n = 0;
  std::string attack;
};

struct EvalAttack {
  int steps = 40;
  std::uint64_t seed = 0;
  std::size_t chunk = 250;

  std::string describe(double eps) const {
    return "pgd_linf(eps=" + std::to_string(eps) + ",steps=" + std::to_string(steps) +
           ",step=2.5eps/steps,random_start,seed=" + std::to_string(seed) + ")";
  }
};

/// Robust error at each budget of an ascending sweep. Each PGD run starts
/// from the previous budget's adversarial point, and a point counted as
/// broken stays broken at larger budgets (its witness lies in the bigger
/// ball), so the estimates are non-decreasing in eps.
template <typename T>
std::vector<RobustErrorReport> robust_error_sweep(const Mlp<T>& model, const Dataset& ds, std::vector<double> eps_list,
                                                  const EvalAttack& attack = {}) {
  if (eps_list.empty()) fail(ErrorCode::EmptyInput, "no eps values");
  for (double e : eps_list)
    if (!(e >= 0.0 && e <= 1.0)) fail(ErrorCode::InvalidParams, "eps must lie in [0,1]");
  std::sort(eps_list.begin(), eps_list.end());
  const auto labels_all = ds.labels();
  const CounterRng root(attack.seed, 0x6576616c);

  std::vector<std::uint8_t> clean_wrong(ds.size()), broken(ds.size());
  std::vector<RobustErrorReport> out;
  std::vector<Mat<T>> prev;  // previous adversarial batch per chunk
  std::vector<std::size_t> all(ds.size());
  std::iota(all.begin(), all.end(), std::size_t{0});

  for (std::size_t k = 0; k < eps_list.size(); ++k) {
    const double eps = eps_list[k];
    std::size_t chunk_id = 0;
    for (std::size_t b = 0; b < ds.size(); b += attack.chunk, ++chunk_id) {
      const auto end = std::min(ds.size(), b + attack.chunk);
      const std::span<const std::size_t> pos(all.data() + b, end - b);
      std::vector<int> labels(labels_all.begin() + static_cast<std::ptrdiff_t>(b),
                              labels_all.begin() + static_cast<std::ptrdiff_t>(end));
      const Mat<T> x0 = to_columns<T>(ds, pos);
      if (k == 0) {
        const Mat<T> logits = model.forward_batch(x0);
        for (std::size_t j = 0; j < pos.size(); ++j)
          clean_wrong[b + j] = argmax(logits.col(static_cast<Eigen::Index>(j))) != labels[j];
      }
      const PgdConfig pgd{eps, attack.steps, true};
      const Mat<T>* start = k > 0 && eps_list[k - 1] > 0.0 ? &prev[chunk_id] : nullptr;
      Mat<T> adv = pgd_linf_batch(model, x0, labels, pgd, root.split(k), b, start);
      const Mat<T> logits = model.forward_batch(adv);
      for (std::size_t j = 0; j < pos.size(); ++j)
        broken[b + j] |= clean_wrong[b + j] | (argmax(logits.col(static_cast<Eigen::Index>(j))) != labels[j]);
      if (prev.size() <= chunk_id) prev.resize(chunk_id + 1);
      prev[chunk_id] = std::move(adv);
    }
    RobustErrorReport r;
    r.eps_eval = eps;
    r.n = ds.size();
    r.clean_error = static_cast<double>(std::count(clean_wrong.begin(), clean_wrong.end(), 1)) / ds.size();
    r.robust_error = static_cast<double>(std::count(broken.begin(), broken.end(), 1)) / ds.size();
    r.attack = attack.describe(eps);
    out.push_back(r);
  }
  return out;
}

template <typename T>
RobustErrorReport robust_error(const Mlp<T>& model, const Dataset& ds, double eps, const EvalAttack& attack = {}) {
  return robust_error_sweep(model, ds, {eps}, attack).front();
}

template <typename T>
double clean_error(const Mlp<T>& model, const Dataset& ds) {
  return robust_error(model, ds, 0.0).clean_error;
}

struct SpatialAdversaryConfig {
  double max_rotation_deg = 20.0;
  double max_shift = 3.0;
  int num_sampled_transforms = 10;
  double eps = 0.3;
  int steps = 40;
  /// Always try the untransformed input first.
  bool include_identity = true;

  void validate() const {
    if (!(max_rotation_deg >= 0.0 && max_rotation_deg <= TransformBounds::rotation_deg))
      fail(ErrorCode::InvalidParams, "rotation range outside the transform family");
    if (!(max_shift >= 0.0 && max_shift <= TransformBounds::shift))
      fail(ErrorCode::InvalidParams, "translation range outside the transform family");
    if (num_sampled_transforms < 1) fail(ErrorCode::InvalidParams, "need at least one sampled transform");
    PgdConfig{eps, steps, true}.validate();
  }
};

/// Uniformly sampled rotation/translation parameters; the identity comes
/// first when include_identity is set.
inline std::vector<TransformParams> sample_spatial_transforms(const SpatialAdversaryConfig& cfg, CounterRng rng) {
  cfg.validate();
  std::vector<TransformParams> out;
  if (cfg.include_identity) out.push_back(TransformParams::identity());
  while (static_cast<int>(out.size()) < cfg.num_sampled_transforms) {
    TransformParams p;
    p.rotation_deg = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg);
    p.shift_x = rng.uniform(-cfg.max_shift, cfg.max_shift);
    p.shift_y = rng.uniform(-cfg.max_shift, cfg.max_shift);
    out.push_back(p);
  }
  return out;
}

/// For each sampled transform t, PGD around t(x); the candidate with the
/// highest loss is returned. Transform i runs PGD with rng for i == 0 and
/// rng.split(i) otherwise.
template <typename T>
GrayImage spatial_pgd(const Mlp<T>& model, const GrayImage& x, int label, const SpatialAdversaryConfig& cfg,
                      CounterRng rng) {
  const auto transforms = sample_spatial_transforms(cfg, rng.split(0x5a5a5a5a));
  GrayImage best;
  double best_loss = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < transforms.size(); ++i) {
    const auto moved = transforms[i].is_identity() ? x : apply_transform(x, transforms[i]);
    auto adv = pgd_linf(model, moved.pixels, label, PgdConfig{cfg.eps, cfg.steps, true}, i == 0 ? rng : rng.split(i));
    const double l = model.loss(adv, label);
    if (l > best_loss) {
      best_loss = l;
      best = GrayImage(x.width, x.height, std::move(adv));
    }
  }
  return best;
}

/// Fraction of examples where the model predicts the same class on the
/// adversarial image as on its source.
template <typename T>
double invariance_rate(const Mlp<T>& model, std::span<const InvarianceExample> examples) {
  if (examples.empty()) fail(ErrorCode::EmptyInput, "no invariance examples");
  std::size_t same = 0;
  for (const auto& ex : examples) same += model.predict(ex.adversarial.pixels) == model.predict(ex.source.image.pixels);
  return static_cast<double>(same) / static_cast<double>(examples.size());
}

/// Same rate on a stored gallery; entries need source pixels.
template <typename T>
double invariance_rate(const Mlp<T>& model, std::span<const GalleryEntry> gallery) {
  if (gallery.empty()) fail(ErrorCode::EmptyInput, "gallery is empty");
  std::size_t same = 0;
  for (const auto& e : gallery) {
    if (e.source_pixels.empty()) fail(ErrorCode::InvalidParams, "gallery entry lacks source pixels");
    same += model.predict(e.image().pixels) == model.predict(e.source_image().pixels);
  }
  return static_cast<double>(same) / static_cast<double>(gallery.size());
}

}  // namespace invariance
