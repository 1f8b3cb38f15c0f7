#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdio>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "dii/error.hpp"

namespace dii {

/// One evaluated intervention trial.
struct PairRecord {
  int predicted = -1;         // argmax of the intervened logits
  int counterfactual = -1;    // label the high-level model predicts after the swap
  int base_label = -1;
  double ld_clean = 0.0;      // logit(base_label) - logit(counterfactual), no intervention
  double ld_patched = 0.0;    // same gap under the intervention
};

inline int argmax(const Eigen::RowVectorXd& logits) {
  Eigen::Index best = 0;
  logits.maxCoeff(&best);
  return static_cast<int>(best);
}

/// Builds a record from clean and intervened logits.
inline PairRecord make_record(const Eigen::RowVectorXd& clean, const Eigen::RowVectorXd& patched,
                              int base_label, int counterfactual) {
  PairRecord r;
  r.predicted = argmax(patched);
  r.counterfactual = counterfactual;
  r.base_label = base_label;
  r.ld_clean = clean(base_label) - clean(counterfactual);
  r.ld_patched = patched(base_label) - patched(counterfactual);
  return r;
}

inline double compute_iia(std::span<const PairRecord> records) {
  if (records.empty()) fail(ErrorCode::kEmptyEvaluation, "no records to score");
  std::size_t hit = 0;
  for (const PairRecord& r : records) hit += r.predicted == r.counterfactual ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(records.size());
}

inline double compute_fldd(double ld_clean, double ld_patched) {
  if (!(std::abs(ld_clean) >= 1e-9)) {
    fail(ErrorCode::kDegenerateBaseline, "clean logit difference " + std::to_string(ld_clean));
  }
  return (ld_clean - ld_patched) / ld_clean;
}

enum class FlddMode { kMeanOfRatios, kPooled };

/// Aggregate FLDD. Records whose clean gap is degenerate are skipped in the
/// mean-of-ratios mode; pooled mode divides summed gaps.
inline double aggregate_fldd(std::span<const PairRecord> records,
                             FlddMode mode = FlddMode::kMeanOfRatios) {
  if (records.empty()) fail(ErrorCode::kEmptyEvaluation, "no records to score");
  if (mode == FlddMode::kPooled) {
    double clean = 0.0, patched = 0.0;
    for (const PairRecord& r : records) {
      clean += r.ld_clean;
      patched += r.ld_patched;
    }
    return compute_fldd(clean / static_cast<double>(records.size()),
                        patched / static_cast<double>(records.size()));
  }
  double sum = 0.0;
  std::size_t n = 0;
  for (const PairRecord& r : records) {
    if (std::abs(r.ld_clean) < 1e-9) continue;
    sum += compute_fldd(r.ld_clean, r.ld_patched);
    ++n;
  }
  if (n == 0) fail(ErrorCode::kDegenerateBaseline, "every record has a degenerate clean gap");
  return sum / static_cast<double>(n);
}

struct MetricsReport {
  double iia = 0.0;
  double fldd = 0.0;
  double fldd_pooled = 0.0;
  std::size_t n_pairs = 0;
  std::vector<PairRecord> records;
};

inline MetricsReport summarize(std::vector<PairRecord> records) {
  MetricsReport m;
  m.iia = compute_iia(records);
  bool usable = false;
  for (const PairRecord& r : records) usable = usable || std::abs(r.ld_clean) >= 1e-9;
  if (usable) {
    m.fldd = aggregate_fldd(records, FlddMode::kMeanOfRatios);
    double pooled_clean = 0.0;
    for (const PairRecord& r : records) pooled_clean += r.ld_clean;
    m.fldd_pooled = std::abs(pooled_clean) >= 1e-9 * static_cast<double>(records.size())
                        ? aggregate_fldd(records, FlddMode::kPooled)
                        : std::nan("");
  } else {
    m.fldd = m.fldd_pooled = std::nan("");
  }
  m.n_pairs = records.size();
  m.records = std::move(records);
  return m;
}

/// Fraction of the v effect that the v_r intervention retains, and the gap.
struct EffectRatio {
  double ratio = 0.0;
  double difference = 0.0;
};

/// Effects are displacements from a common reference (e.g. the clean output).
inline EffectRatio effect_ratio(double effect_full, double effect_range) {
  EffectRatio r;
  r.difference = effect_full - effect_range;
  r.ratio = effect_full == 0.0 ? std::nan("") : effect_range / effect_full;
  return r;
}

inline std::string format_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

/// One row per pair plus a trailing summary row.
inline void write_metrics_csv(std::ostream& os, const MetricsReport& m) {
  os << "row,predicted,counterfactual,base_label,ld_clean,ld_patched,match\n";
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const PairRecord& r = m.records[i];
    os << i << ',' << r.predicted << ',' << r.counterfactual << ',' << r.base_label << ','
       << format_double(r.ld_clean) << ',' << format_double(r.ld_patched) << ','
       << (r.predicted == r.counterfactual ? 1 : 0) << '\n';
  }
  os << "summary,iia=" << format_double(m.iia) << ",fldd=" << format_double(m.fldd)
     << ",fldd_pooled=" << format_double(m.fldd_pooled) << ",n=" << m.n_pairs << ",,\n";
}

}  // namespace dii
