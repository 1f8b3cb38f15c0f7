#pragma once

// Grids of alignment runs: stream sweeps, head leave-one-out, cumulative head
// sets, and neuron-aligned versus learned-subspace comparisons.

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "dii/das.hpp"
#include "dii/error.hpp"
#include "dii/intervention.hpp"
#include "dii/metrics.hpp"
#include "dii/models.hpp"
#include "dii/tasks.hpp"

namespace dii {

enum class Method { kVanilla, kDas, kBoundless };

inline std::string_view method_name(Method m) {
  switch (m) {
    case Method::kVanilla: return "vanilla";
    case Method::kDas: return "das";
    case Method::kBoundless: return "boundless";
  }
  return "?";
}

inline std::optional<Method> parse_method(std::string_view s) {
  for (Method m : {Method::kVanilla, Method::kDas, Method::kBoundless}) {
    if (method_name(m) == s) return m;
  }
  return std::nullopt;
}

struct SweepSpec {
  std::vector<std::string> sites;
  int position = kLastPosition;
  Method method = Method::kDas;
  DasConfig das;
  BoundlessConfig boundless;
  /// Per-cell wall-clock limit in seconds; 0 disables it.
  double cell_budget_seconds = 0.0;
  /// Cells run on up to this many threads; results do not depend on it.
  int threads = 1;
};

struct SweepCell {
  std::string site;
  Method method = Method::kDas;
  bool complete = false;
  std::string note;
  MetricsReport report;
  SwapRule rule = SubspaceBasis{};
  std::optional<TrainedSubspace> subspace;
  std::vector<int> neurons;  // vanilla only
};

struct SweepResult {
  std::vector<SweepCell> cells;

  const SweepCell& best() const {
    if (cells.empty()) fail(ErrorCode::kEmptyEvaluation, "empty sweep");
    const SweepCell* b = &cells.front();
    for (const SweepCell& c : cells) {
      if (c.complete && (!b->complete || c.report.iia > b->report.iia)) b = &c;
    }
    return *b;
  }
  const SweepCell& at(std::string_view site) const {
    for (const SweepCell& c : cells) {
      if (c.site == site) return c;
    }
    fail(ErrorCode::kUnknownSite, std::string(site) + " not in sweep");
  }
};

/// Greedy choice of `count` neurons maximizing training IIA; ties go to the
/// lower index.
inline std::vector<int> select_neurons(const Model& model, const SiteView& view,
                                       std::span<const ExamplePair> train, int count) {
  const auto width = static_cast<int>(view.width());
  if (count < 0 || count > width) {
    fail(ErrorCode::kSiteTooNarrow, "cannot pick " + std::to_string(count) + " of " +
                                        std::to_string(width) + " neurons");
  }
  std::vector<int> chosen;
  if (count == width) {
    for (int i = 0; i < width; ++i) chosen.push_back(i);
    return chosen;
  }
  const auto sources = detail::source_vectors(model, view, train);
  while (static_cast<int>(chosen.size()) < count) {
    int best = -1;
    double best_iia = -1.0;
    for (int i = 0; i < width; ++i) {
      if (std::find(chosen.begin(), chosen.end(), i) != chosen.end()) continue;
      std::vector<int> trial = chosen;
      trial.push_back(i);
      const SwapRule rule = trial;
      std::size_t hit = 0;
      for (std::size_t k = 0; k < train.size(); ++k) {
        const auto logits =
            interchange_with_activation(model, view, train[k].base, sources[k], rule);
        hit += argmax(logits) == train[k].cf_label ? 1 : 0;
      }
      const double iia = static_cast<double>(hit) / static_cast<double>(train.size());
      if (iia > best_iia) {
        best_iia = iia;
        best = i;
      }
    }
    chosen.push_back(best);
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

/// Trains (or selects) and evaluates one cell on held-out pairs.
inline SweepCell run_cell(const Model& model, const SiteView& view, const PairSplit& split,
                          Method method, const DasConfig& das, const BoundlessConfig& boundless,
                          double budget_seconds) {
  SweepCell cell;
  cell.site = view.site;
  cell.method = method;
  try {
    switch (method) {
      case Method::kVanilla: {
        const auto start = std::chrono::steady_clock::now();
        cell.neurons = select_neurons(model, view, split.train,
                                      std::min<int>(das.rank, static_cast<int>(view.width())));
        const double used =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (budget_seconds > 0.0 && used > budget_seconds) {
          fail(ErrorCode::kBudgetExceeded, "neuron search used " + std::to_string(used) + " s");
        }
        cell.rule = cell.neurons;
        break;
      }
      case Method::kDas: {
        DasConfig cfg = das;
        cfg.budget_seconds = budget_seconds;
        cell.subspace = train_das(model, view, split.train, split.eval, cfg);
        cell.rule = cell.subspace->basis;
        break;
      }
      case Method::kBoundless: {
        BoundlessConfig cfg = boundless;
        cfg.budget_seconds = budget_seconds;
        cell.subspace = train_boundless_das(model, view, split.train, split.eval, cfg);
        cell.rule = cell.subspace->basis;
        break;
      }
    }
    cell.report = evaluate(model, view, split.eval, cell.rule);
    cell.complete = true;
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kBudgetExceeded) throw;
    cell.complete = false;
    cell.note = e.what();
  }
  return cell;
}

namespace detail {

/// Runs jobs [0, n) on up to `threads` workers; job i writes slot i only.
template <typename Job>
void run_indexed(std::size_t n, int threads, const Job& job) {
  const std::size_t workers =
      std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) {
        try {
          job(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace detail

inline SweepResult run_stream_sweep(const Model& model, const SweepSpec& spec,
                                    const PairSplit& split) {
  if (spec.sites.empty()) fail(ErrorCode::kConfigInvalid, "sweep has no sites");
  if (split.eval.empty()) fail(ErrorCode::kEmptyEvaluation, "sweep has no evaluation pairs");
  require_disjoint_templates(split.train, split.eval);
  std::vector<SiteView> views;
  for (const std::string& s : spec.sites) views.push_back(site_view(model, s, spec.position));
  SweepResult out;
  out.cells.resize(views.size());
  detail::run_indexed(views.size(), spec.threads, [&](std::size_t i) {
    out.cells[i] = run_cell(model, views[i], split, spec.method, spec.das, spec.boundless,
                            spec.cell_budget_seconds);
  });
  return out;
}

/// All streams at every layer of a transformer-style model, in layer order.
inline std::vector<std::string> sweep_sites(const Model& model, std::span<const Stream> streams) {
  std::vector<std::string> out;
  int max_layer = 0;
  for (const SiteInfo& s : model.sites()) max_layer = std::max(max_layer, s.layer);
  for (int l = 0; l <= max_layer; ++l) {
    for (Stream st : streams) {
      const std::string name = site_name(l, st);
      if (model.has_site(name)) out.push_back(name);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Head analyses at a per-head stream

struct LooResult {
  std::string site;
  double all_heads_iia = 0.0;
  std::vector<double> without_head_iia;
  std::vector<double> drop;  // all_heads_iia - without_head_iia
  std::vector<SweepCell> cells;  // index 0: all heads, then one per left-out head
};

inline int head_count(const Model& model, const std::string& site) {
  const SiteInfo& info = model.site(site);
  if (info.head_width <= 0) fail(ErrorCode::kPartitionMismatch, site + " has no head slices");
  return static_cast<int>(info.width / info.head_width);
}

inline LooResult loo_head_alignment(const Model& model, int layer, const SweepSpec& spec,
                                    const PairSplit& split) {
  const std::string site = site_name(layer, Stream::kAttnValueOutput);
  const int n_heads = head_count(model, site);
  require_disjoint_templates(split.train, split.eval);
  std::vector<SiteView> views;
  std::vector<int> all(static_cast<std::size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) all[static_cast<std::size_t>(h)] = h;
  views.push_back(head_view(model, site, all, spec.position));
  for (int h = 0; h < n_heads; ++h) {
    std::vector<int> rest;
    for (int j = 0; j < n_heads; ++j) {
      if (j != h) rest.push_back(j);
    }
    views.push_back(head_view(model, site, rest, spec.position));
  }
  LooResult out;
  out.site = site;
  out.cells.resize(views.size());
  detail::run_indexed(views.size(), spec.threads, [&](std::size_t i) {
    out.cells[i] = run_cell(model, views[i], split, spec.method, spec.das, spec.boundless,
                            spec.cell_budget_seconds);
  });
  out.all_heads_iia = out.cells[0].report.iia;
  for (int h = 0; h < n_heads; ++h) {
    const double v = out.cells[static_cast<std::size_t>(h) + 1].report.iia;
    out.without_head_iia.push_back(v);
    out.drop.push_back(out.all_heads_iia - v);
  }
  return out;
}

/// Heads sorted by drop, largest first; equal drops keep head index order.
inline std::vector<int> rank_heads(std::span<const double> drops, double tie_tolerance = 1e-9) {
  std::vector<int> order(drops.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    const double da = drops[static_cast<std::size_t>(a)], db = drops[static_cast<std::size_t>(b)];
    if (std::abs(da - db) <= tie_tolerance) return false;
    return da > db;
  });
  return order;
}

struct CumulativeResult {
  std::string site;
  std::vector<int> order;
  /// iia[k] is the IIA with the first k heads of `order`; iia[0] is the
  /// no-intervention baseline.
  std::vector<double> iia;
  double ceiling = 0.0;

  /// Smallest prefix size reaching `fraction` of the ceiling, or -1.
  int first_reaching(double fraction = 0.9) const {
    for (std::size_t k = 0; k < iia.size(); ++k) {
      if (iia[k] >= fraction * ceiling) return static_cast<int>(k);
    }
    return -1;
  }
};

inline CumulativeResult cumulative_head_alignment(const Model& model, int layer,
                                                  std::span<const int> ranking,
                                                  const SweepSpec& spec,
                                                  const PairSplit& split) {
  const std::string site = site_name(layer, Stream::kAttnValueOutput);
  const int n_heads = head_count(model, site);
  if (static_cast<int>(ranking.size()) != n_heads) {
    fail(ErrorCode::kPartitionMismatch, "ranking lists " + std::to_string(ranking.size()) +
                                            " of " + std::to_string(n_heads) + " heads");
  }
  require_disjoint_templates(split.train, split.eval);
  CumulativeResult out;
  out.site = site;
  out.order.assign(ranking.begin(), ranking.end());
  out.iia.resize(static_cast<std::size_t>(n_heads) + 1);
  const SiteView none = head_view(model, site, std::span<const int>(ranking.data(), 1), spec.position);
  out.iia[0] = evaluate_iia(model, none, split.eval, SubspaceBasis::empty(none.width()));
  detail::run_indexed(static_cast<std::size_t>(n_heads), spec.threads, [&](std::size_t i) {
    const SiteView view =
        head_view(model, site, std::span<const int>(ranking.data(), i + 1), spec.position);
    const SweepCell cell = run_cell(model, view, split, spec.method, spec.das, spec.boundless,
                                    spec.cell_budget_seconds);
    out.iia[i + 1] = cell.complete ? cell.report.iia : std::nan("");
  });
  out.ceiling = out.iia.back();
  return out;
}

// ---------------------------------------------------------------------------
// Neuron-aligned versus learned subspace

struct MethodComparison {
  std::string site;
  double vanilla_iia = 0.0;
  double das_iia = 0.0;
  double delta() const { return das_iia - vanilla_iia; }
};

/// Same grid under neuron swaps of the DAS rank and under trained DAS.
inline std::vector<MethodComparison> compare_vanilla_vs_das(const Model& model,
                                                            const SweepSpec& spec,
                                                            const PairSplit& split) {
  SweepSpec v = spec;
  v.method = Method::kVanilla;
  SweepSpec d = spec;
  d.method = Method::kDas;
  const SweepResult rv = run_stream_sweep(model, v, split);
  const SweepResult rd = run_stream_sweep(model, d, split);
  std::vector<MethodComparison> out;
  for (std::size_t i = 0; i < rv.cells.size(); ++i) {
    out.push_back({rv.cells[i].site, rv.cells[i].report.iia, rd.cells[i].report.iia});
  }
  return out;
}

}  // namespace dii
