#pragma once

// Gradient-trained alignment subspaces: fixed-rank search and the variant
// that also learns how many dimensions to swap.

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dii/autodiff.hpp"
#include "dii/error.hpp"
#include "dii/intervention.hpp"
#include "dii/linalg.hpp"
#include "dii/metrics.hpp"
#include "dii/models.hpp"
#include "dii/optim.hpp"
#include "dii/rng.hpp"
#include "dii/tasks.hpp"

namespace dii {

struct DasConfig {
  int rank = 1;
  double lr = 0.01;
  int epochs = 10;
  int batch = 20;
  std::uint64_t seed = 0;
  /// Independent initializations; the one with the lowest final training
  /// loss is kept.
  int restarts = 1;
  /// Wall-clock limit for one training run in seconds; 0 disables it.
  double budget_seconds = 0.0;
};

enum class MaskForm {
  /// sigmoid((b*w - i - 0.5) / T): dimension i is inside once b*w > i + 0.5,
  /// which is what rounding b*w to a dimension count means.
  kCenteredSigmoid,
  /// sigmoid((b*w - i) / T).
  kPlainSigmoid,
};

struct BoundlessConfig {
  double lr = 0.01;
  double boundary_lr = 0.05;
  double das_weight = 1.0;
  double boundary_weight = 2.0;
  double temperature_start = 50.0;
  double temperature_end = 0.1;
  double initial_fraction = 0.5;
  int epochs = 10;
  int batch = 20;
  MaskForm mask = MaskForm::kCenteredSigmoid;
  std::uint64_t seed = 0;
  double budget_seconds = 0.0;
};

struct CurvePoint {
  int epoch = 0;
  double loss = 0.0;
  double train_iia = 0.0;
  double eval_iia = std::nan("");
  double boundary_fraction = std::nan("");
};

struct TrainedSubspace {
  SubspaceBasis basis;
  SiteView view;
  std::vector<CurvePoint> curve;
  std::optional<double> boundary_fraction;
  int boundary_dims = -1;
  Matrix rotation;  // full learned basis, boundless only
  double soft_eval_iia = std::nan("");
};

// ---------------------------------------------------------------------------
// Evaluation

inline MetricsReport evaluate(const Model& model, const SiteView& view,
                              std::span<const ExamplePair> pairs, const SwapRule& rule) {
  std::vector<PairRecord> records;
  records.reserve(pairs.size());
  for (const ExamplePair& p : pairs) {
    const auto clean = model.logits(p.base);
    const auto patched = interchange(model, view, p.base, p.source, rule);
    records.push_back(make_record(clean, patched, p.base_label, p.cf_label));
  }
  return summarize(std::move(records));
}

inline double evaluate_iia(const Model& model, const SiteView& view,
                           std::span<const ExamplePair> pairs, const SwapRule& rule) {
  if (pairs.empty()) fail(ErrorCode::kEmptyEvaluation, "no pairs to evaluate");
  std::size_t hit = 0;
  for (const ExamplePair& p : pairs) {
    hit += argmax(interchange(model, view, p.base, p.source, rule)) == p.cf_label ? 1 : 0;
  }
  return static_cast<double>(hit) / static_cast<double>(pairs.size());
}

namespace detail {

inline void check_training_inputs(const Model& model, const SiteView& view,
                                  std::span<const ExamplePair> train,
                                  std::span<const ExamplePair> eval) {
  model.site(view.site);
  if (train.empty()) fail(ErrorCode::kEmptyEvaluation, "no training pairs");
  if (!eval.empty()) require_disjoint_templates(train, eval);
}

inline std::vector<Vector> source_vectors(const Model& model, const SiteView& view,
                                          std::span<const ExamplePair> pairs) {
  std::vector<Vector> out;
  out.reserve(pairs.size());
  for (const ExamplePair& p : pairs) out.push_back(source_activation(model, view, p.source));
  return out;
}

/// Batches of indices into [0, n) for one epoch.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  shuffle_in_place(order, rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch)) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(
                                         std::min(n, i + static_cast<std::size_t>(batch))));
  }
  return out;
}

class Budget {
 public:
  explicit Budget(double seconds)
      : seconds_(seconds), start_(std::chrono::steady_clock::now()) {}
  void check() const {
    if (seconds_ <= 0.0) return;
    const double used =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    if (used > seconds_) {
      fail(ErrorCode::kBudgetExceeded, "training used " + std::to_string(used) + " s of " +
                                           std::to_string(seconds_) + " s");
    }
  }

 private:
  double seconds_;
  std::chrono::steady_clock::time_point start_;
};

inline void require_finite(const ad::Var& loss, int epoch, std::size_t step) {
  if (!std::isfinite(loss.item())) {
    fail(ErrorCode::kNonFiniteLoss, "loss " + std::to_string(loss.item()) + " at epoch " +
                                        std::to_string(epoch) + ", step " + std::to_string(step));
  }
}

}  // namespace detail

/// Mean counterfactual cross-entropy of a subspace swap for the given pairs,
/// with the basis obtained from `raw` by Gram-Schmidt. `hits` (optional)
/// receives the number of argmax matches.
inline ad::Var das_loss(ad::Tape& tape, const Model& model, std::span<const ad::Var> params,
                        const SiteView& view, const ad::Var& raw,
                        std::span<const ExamplePair> pairs, std::span<const Vector> sources,
                        std::size_t* hits = nullptr) {
  const ad::Var basis = ad::gram_schmidt(raw);
  std::vector<ad::Var> losses;
  losses.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    HookMap hooks;
    hooks[view.site] = subspace_swap_hook(view, basis, sources[i]);
    const ad::Var logits = model.forward(tape, params, pairs[i].base, hooks);
    if (hits != nullptr && argmax(logits.value().row(0)) == pairs[i].cf_label) ++*hits;
    losses.push_back(ad::cross_entropy(logits, pairs[i].cf_label));
  }
  return ad::mean(losses);
}

namespace detail {

inline TrainedSubspace train_das_once(const Model& model, const SiteView& view,
                                      std::span<const ExamplePair> train,
                                      std::span<const ExamplePair> eval, const DasConfig& cfg,
                                      const std::vector<Vector>& sources, const Budget& budget,
                                      const std::string& init_stream) {
  const Eigen::Index width = view.width();
  Rng init = make_rng(cfg.seed, init_stream);
  Matrix raw = linalg::orthonormalize(
                   gaussian(init, cfg.rank, width, 1.0 / std::sqrt(static_cast<double>(width))))
                   .rows();
  Rng shuffle = make_rng(cfg.seed, "shuffle");
  Adam opt(AdamOptions{cfg.lr});

  TrainedSubspace out;
  out.view = view;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t hits = 0, step = 0;
    for (const auto& idx : detail::epoch_batches(train.size(), cfg.batch, shuffle)) {
      budget.check();
      std::vector<ExamplePair> batch;
      std::vector<Vector> batch_src;
      for (std::size_t i : idx) {
        batch.push_back(train[i]);
        batch_src.push_back(sources[i]);
      }
      ad::Tape tape;
      const auto params = model.bind(tape, false);
      const ad::Var p = tape.parameter(raw);
      const ad::Var loss = das_loss(tape, model, params, view, p, batch, batch_src, &hits);
      detail::require_finite(loss, epoch, step);
      tape.backward(loss);
      Matrix* ptr[] = {&raw};
      const Matrix grad[] = {tape.grad(p)};
      opt.step(ptr, grad);
      raw = linalg::orthonormalize(raw).rows();
      loss_sum += loss.item() * static_cast<double>(idx.size());
      ++step;
    }
    CurvePoint cp;
    cp.epoch = epoch;
    cp.loss = loss_sum / static_cast<double>(train.size());
    cp.train_iia = static_cast<double>(hits) / static_cast<double>(train.size());
    if (!eval.empty()) {
      cp.eval_iia = evaluate_iia(model, view, eval, SubspaceBasis::from_rows(raw, 1e-8));
    }
    out.curve.push_back(cp);
  }
  out.basis = linalg::orthonormalize(raw);
  return out;
}

}  // namespace detail

inline TrainedSubspace train_das(const Model& model, const SiteView& view,
                                 std::span<const ExamplePair> train,
                                 std::span<const ExamplePair> eval, const DasConfig& cfg) {
  detail::check_training_inputs(model, view, train, eval);
  const Eigen::Index width = view.width();
  if (cfg.rank < 1 || cfg.rank > width) {
    fail(ErrorCode::kSiteTooNarrow, "rank " + std::to_string(cfg.rank) + " at a site of width " +
                                        std::to_string(width));
  }
  if (cfg.epochs < 1 || cfg.batch < 1 || !(cfg.lr > 0.0) || cfg.restarts < 1) {
    fail(ErrorCode::kConfigInvalid, "epochs, batch, restarts and learning rate must be positive");
  }
  const auto sources = detail::source_vectors(model, view, train);
  const detail::Budget budget(cfg.budget_seconds);

  std::optional<TrainedSubspace> best;
  for (int r = 0; r < cfg.restarts; ++r) {
    TrainedSubspace run = detail::train_das_once(model, view, train, eval, cfg, sources, budget,
                                                 r == 0 ? "das.init" : "das.init." + std::to_string(r));
    if (!best || run.curve.back().loss < best->curve.back().loss) best = std::move(run);
  }
  return *std::move(best);
}

// ---------------------------------------------------------------------------
// Learned boundary

inline double temperature_at(const BoundlessConfig& cfg, std::size_t step, std::size_t total) {
  if (total <= 1) return cfg.temperature_end;
  const double f = static_cast<double>(step) / static_cast<double>(total - 1);
  return cfg.temperature_start + (cfg.temperature_end - cfg.temperature_start) * f;
}

/// Soft mask over the rotated coordinates for boundary fraction `fraction`.
inline ad::Var boundary_mask(ad::Tape& tape, const ad::Var& fraction, Eigen::Index width,
                             double temperature, MaskForm form) {
  const double offset = form == MaskForm::kCenteredSigmoid ? 0.5 : 0.0;
  Matrix index(1, width);
  for (Eigen::Index i = 0; i < width; ++i) index(0, i) = static_cast<double>(i) + offset;
  const ad::Var edge = ad::mul_scalar(tape.constant(Matrix::Constant(1, width, 1.0)),
                                      ad::scale(fraction, static_cast<double>(width)));
  return ad::sigmoid(ad::scale(ad::sub(edge, tape.constant(index)), 1.0 / temperature));
}

inline int boundary_dimensions(double fraction, Eigen::Index width) {
  const double d = std::round(fraction * static_cast<double>(width));
  return static_cast<int>(std::clamp(d, 0.0, static_cast<double>(width)));
}

inline TrainedSubspace train_boundless_das(const Model& model, const SiteView& view,
                                           std::span<const ExamplePair> train,
                                           std::span<const ExamplePair> eval,
                                           const BoundlessConfig& cfg) {
  detail::check_training_inputs(model, view, train, eval);
  const Eigen::Index width = view.width();
  if (width < 2) fail(ErrorCode::kSiteTooNarrow, "boundary search needs width >= 2");
  if (!(cfg.temperature_start > 0.0 && cfg.temperature_end > 0.0 &&
        cfg.temperature_start >= cfg.temperature_end)) {
    fail(ErrorCode::kConfigInvalid, "temperatures must be positive and non-increasing");
  }
  if (cfg.epochs < 1 || cfg.batch < 1 || !(cfg.lr > 0.0) || !(cfg.boundary_lr > 0.0)) {
    fail(ErrorCode::kConfigInvalid, "epochs, batch and learning rates must be positive");
  }
  const auto sources = detail::source_vectors(model, view, train);

  Rng init = make_rng(cfg.seed, "boundless.init");
  Matrix raw = random_orthogonal(init, width);
  Matrix fraction = Matrix::Constant(1, 1, cfg.initial_fraction);
  Rng shuffle = make_rng(cfg.seed, "shuffle");
  Adam rot_opt(AdamOptions{cfg.lr});
  Adam bound_opt(AdamOptions{cfg.boundary_lr});

  const std::size_t per_epoch =
      (train.size() + static_cast<std::size_t>(cfg.batch) - 1) / static_cast<std::size_t>(cfg.batch);
  const std::size_t total = per_epoch * static_cast<std::size_t>(cfg.epochs);
  std::size_t global = 0;
  double last_temperature = cfg.temperature_start;

  const detail::Budget budget(cfg.budget_seconds);
  TrainedSubspace out;
  out.view = view;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t hits = 0;
    for (const auto& idx : detail::epoch_batches(train.size(), cfg.batch, shuffle)) {
      budget.check();
      last_temperature = temperature_at(cfg, global, total);
      ad::Tape tape;
      const auto params = model.bind(tape, false);
      const ad::Var p = tape.parameter(raw);
      const ad::Var b = tape.parameter(fraction);
      const ad::Var rotation = ad::gram_schmidt(p);
      const ad::Var mask = boundary_mask(tape, b, width, last_temperature, cfg.mask);
      std::vector<ad::Var> losses;
      for (std::size_t i : idx) {
        HookMap hooks;
        hooks[view.site] = masked_rotation_hook(view, rotation, mask, sources[i]);
        const ad::Var logits = model.forward(tape, params, train[i].base, hooks);
        if (argmax(logits.value().row(0)) == train[i].cf_label) ++hits;
        losses.push_back(ad::cross_entropy(logits, train[i].cf_label));
      }
      const ad::Var ce = ad::mean(losses);
      const ad::Var loss = ad::add(ad::scale(ce, cfg.das_weight), ad::scale(b, cfg.boundary_weight));
      detail::require_finite(loss, epoch, global);
      tape.backward(loss);
      Matrix* rp[] = {&raw};
      const Matrix rg[] = {tape.grad(p)};
      rot_opt.step(rp, rg);
      Matrix* bp[] = {&fraction};
      const Matrix bg[] = {tape.grad(b)};
      bound_opt.step(bp, bg);
      fraction(0, 0) = std::clamp(fraction(0, 0), 0.0, 1.0);
      raw = linalg::orthonormalize(raw).rows();
      loss_sum += ce.item() * static_cast<double>(idx.size());
      ++global;
    }
    CurvePoint cp;
    cp.epoch = epoch;
    cp.loss = loss_sum / static_cast<double>(train.size());
    cp.train_iia = static_cast<double>(hits) / static_cast<double>(train.size());
    cp.boundary_fraction = fraction(0, 0);
    if (!eval.empty()) {
      const int dims = boundary_dimensions(fraction(0, 0), width);
      cp.eval_iia = evaluate_iia(model, view, eval,
                                 SubspaceBasis::from_rows(raw.topRows(dims), 1e-8));
    }
    out.curve.push_back(cp);
  }

  out.rotation = linalg::orthonormalize(raw).rows();
  out.boundary_fraction = fraction(0, 0);
  out.boundary_dims = boundary_dimensions(fraction(0, 0), width);
  out.basis = SubspaceBasis::from_rows(out.rotation.topRows(out.boundary_dims), 1e-8);

  if (!eval.empty()) {
    // Soft-mask accuracy at the final temperature, for the soft/hard check.
    std::size_t hit = 0;
    for (const ExamplePair& pr : eval) {
      ad::Tape tape;
      const auto params = model.bind(tape, false);
      const ad::Var rot = tape.constant(out.rotation);
      const ad::Var mask =
          boundary_mask(tape, tape.constant(fraction), width, last_temperature, cfg.mask);
      HookMap hooks;
      hooks[view.site] =
          masked_rotation_hook(view, rot, mask, source_activation(model, view, pr.source));
      hit += argmax(model.forward(tape, params, pr.base, hooks).value().row(0)) == pr.cf_label;
    }
    out.soft_eval_iia = static_cast<double>(hit) / static_cast<double>(eval.size());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient verification

struct GradientCheck {
  double max_rel_error = 0.0;
  double max_abs_analytic = 0.0;
  double max_abs_numeric = 0.0;
};

inline constexpr double kGradientFloor = 1e-6;

/// Compares the tape gradient of a scalar function of one matrix against
/// central differences with step `h`. Relative error per entry is
/// |a - n| / max(|a|, |n|, kGradientFloor).
inline GradientCheck gradient_check(
    const std::function<ad::Var(ad::Tape&, const ad::Var&)>& loss_fn, const Matrix& point,
    double h = 1e-5) {
  ad::Tape tape;
  const ad::Var x = tape.parameter(point);
  const ad::Var loss = loss_fn(tape, x);
  tape.backward(loss);
  const Matrix analytic = tape.grad(x);

  auto value_at = [&](const Matrix& m) {
    ad::Tape t;
    return loss_fn(t, t.constant(m)).item();
  };
  GradientCheck out;
  Matrix probe = point;
  for (Eigen::Index i = 0; i < point.rows(); ++i) {
    for (Eigen::Index j = 0; j < point.cols(); ++j) {
      const double orig = probe(i, j);
      probe(i, j) = orig + h;
      const double up = value_at(probe);
      probe(i, j) = orig - h;
      const double down = value_at(probe);
      probe(i, j) = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic(i, j);
      const double denom = std::max({std::abs(a), std::abs(numeric), kGradientFloor});
      out.max_rel_error = std::max(out.max_rel_error, std::abs(a - numeric) / denom);
      out.max_abs_analytic = std::max(out.max_abs_analytic, std::abs(a));
      out.max_abs_numeric = std::max(out.max_abs_numeric, std::abs(numeric));
    }
  }
  return out;
}

/// Gradient check of the subspace-swap loss with respect to the raw
/// (pre-orthonormalization) basis parameters.
inline GradientCheck gradient_check_das(const Model& model, const SiteView& view,
                                        std::span<const ExamplePair> pairs, const Matrix& raw,
                                        double h = 1e-5) {
  const auto sources = detail::source_vectors(model, view, pairs);
  return gradient_check(
      [&](ad::Tape& tape, const ad::Var& p) {
        const auto params = model.bind(tape, false);
        return das_loss(tape, model, params, view, p, pairs, sources);
      },
      raw, h);
}

// ---------------------------------------------------------------------------
// Per-head weight mass

struct HeadWeights {
  std::vector<double> l2;        // L2 norm of the basis restricted to each head
  std::vector<double> mass;      // share of the squared norm
  std::vector<int> nonzero;      // entries with |w| > threshold
};

/// `partition` lists the width of each head's slice, in view order.
inline HeadWeights export_weight_distribution(const SubspaceBasis& basis,
                                              std::span<const Eigen::Index> partition,
                                              double threshold = 1e-3) {
  const Eigen::Index total = std::accumulate(partition.begin(), partition.end(), Eigen::Index{0});
  if (partition.empty() || total != basis.dim()) {
    fail(ErrorCode::kPartitionMismatch, "partition covers " + std::to_string(total) +
                                            " of " + std::to_string(basis.dim()) + " columns");
  }
  HeadWeights out;
  const double all = basis.rows().squaredNorm();
  Eigen::Index off = 0;
  for (Eigen::Index w : partition) {
    if (w <= 0) fail(ErrorCode::kPartitionMismatch, "empty head slice");
    const auto block = basis.rows().middleCols(off, w);
    out.l2.push_back(block.norm());
    out.mass.push_back(all > 0.0 ? block.squaredNorm() / all : 0.0);
    out.nonzero.push_back(static_cast<int>((block.array().abs() > threshold).count()));
    off += w;
  }
  return out;
}

/// Equal-width partition for a view over `heads` head slices.
inline std::vector<Eigen::Index> head_partition(const SiteView& view) {
  std::vector<Eigen::Index> out;
  for (const ViewPart& p : view.parts) {
    out.push_back((p.col_end < 0 ? view.site_width : p.col_end) - p.col_begin);
  }
  return out;
}

}  // namespace dii
