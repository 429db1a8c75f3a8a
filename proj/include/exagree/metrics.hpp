#pragma once

// Explanation agreement (FA, RA, SA, SRA, PRA, RC), predictive faithfulness
// (PGI, PGU), subgroup fairness gaps, and "#Best" tallies.

#include "exagree/core.hpp"
#include "exagree/data.hpp"
#include "exagree/diffsort.hpp"
#include "exagree/models.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <functional>
#include <iomanip>
#include <sstream>

namespace exagree {

/// max(1, round-half-up(k * p))
inline int topk_count(std::size_t p, double k) {
  require(k > 0.0 && k <= 1.0, "k must be in (0, 1]");
  const auto c = static_cast<int>(std::floor(k * static_cast<double>(p) + 0.5));
  return std::max(1, std::min(c, static_cast<int>(p)));
}

struct AgreementScores {
  double fa = 0, ra = 0, sa = 0, sra = 0;
};

namespace detail {
inline int signum(double v) { return (v > 0) - (v < 0); }
}  // namespace detail

/// Counts over the K = topk_count features at the top of each ranking.
/// RA, SA and SRA only count features present in both top-K sets.
inline AgreementScores agreement_suite(const AttributionVector& exp, const AttributionVector& gt, double k) {
  require(exp.size() == gt.size(), "agreement_suite: length mismatch");
  const auto p = static_cast<std::size_t>(gt.size());
  const int K = topk_count(p, k);
  const Ranking re = rank_of(exp), rg = rank_of(gt);
  int common = 0, same_rank = 0, same_sign = 0, both = 0;
  for (std::size_t j = 0; j < p; ++j) {
    if (re.ranks[j] > K || rg.ranks[j] > K) continue;
    ++common;
    const bool rank_eq = re.ranks[j] == rg.ranks[j];
    const bool sign_eq = detail::signum(exp.values[static_cast<Index>(j)]) == detail::signum(gt.values[static_cast<Index>(j)]);
    same_rank += rank_eq;
    same_sign += sign_eq;
    both += rank_eq && sign_eq;
  }
  const double d = K;
  return {common / d, same_rank / d, same_sign / d, both / d};
}

/// Fraction of unordered feature pairs ordered the same way by both rankings.
inline double pairwise_rank_agreement(const Ranking& r1, const Ranking& r2) {
  require(r1.size() == r2.size(), "pairwise_rank_agreement: length mismatch");
  const std::size_t p = r1.size();
  if (p < 2) return 1.0;
  std::size_t agree = 0;
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = i + 1; j < p; ++j)
      agree += (r1.ranks[i] < r1.ranks[j]) == (r2.ranks[i] < r2.ranks[j]);
  return static_cast<double>(agree) / static_cast<double>(p * (p - 1) / 2);
}

inline double rank_correlation(const Ranking& r1, const Ranking& r2) { return spearman_exact(r1, r2); }

enum class GapMode { important, unimportant };

struct GapParams {
  double sigma = 0.1;
  int n_perturb = 100;
  std::uint64_t seed = 0;
};

/// Mean |p(x) - p(x')| where x' adds N(0, sigma^2) noise to the top-K
/// features (important) or to the remaining ones (unimportant).
template <Predictor M>
double prediction_gap(const M& model, const ValidationView& val, const Ranking& ranking, double k, GapMode mode,
                      const GapParams& gp) {
  require(gp.sigma > 0.0, "sigma must be positive");
  require(gp.n_perturb >= 1, "n_perturb must be at least 1");
  require(static_cast<Index>(ranking.size()) == model.p(), "ranking length must equal p");
  const int K = topk_count(ranking.size(), k);
  std::vector<Index> cols;
  for (std::size_t j = 0; j < ranking.size(); ++j)
    if ((ranking.ranks[j] <= K) == (mode == GapMode::important)) cols.push_back(static_cast<Index>(j));
  if (cols.empty() || val.X.rows() == 0) return 0.0;
  const Vector base = predict_proba(model, val.X);
  Rng rng(gp.seed);
  std::normal_distribution<double> normal(0.0, gp.sigma);
  Matrix Xp(val.X.rows(), val.X.cols());
  double total = 0.0;
  for (int d = 0; d < gp.n_perturb; ++d) {
    Xp = val.X;
    for (Index i = 0; i < Xp.rows(); ++i)
      for (Index j : cols) Xp(i, j) += normal(rng);
    total += (predict_proba(model, Xp) - base).cwiseAbs().sum();
  }
  return total / (static_cast<double>(gp.n_perturb) * static_cast<double>(val.X.rows()));
}

struct AgreementReport {
  double k = 0.25;
  int top_k_count = 1;
  double fa = 0, ra = 0, sa = 0, sra = 0, pra = 0, rc = 0, pgi = 0, pgu = 0;
  std::string method;
  std::string model_id;
};

inline constexpr std::array<const char*, 8> kMetricNames = {"FA", "RA", "SA", "SRA", "RC", "PRA", "PGI", "PGU"};

inline std::array<double, 8> metric_values(const AgreementReport& r) {
  return {r.fa, r.ra, r.sa, r.sra, r.rc, r.pra, r.pgi, r.pgu};
}

/// Agreement of `exp` against `gt` plus PGI/PGU of `model` under exp's ranking.
template <Predictor M>
AgreementReport agreement_report(const M& model, const ValidationView& val, const AttributionVector& exp,
                                 const AttributionVector& gt, double k, const GapParams& gp) {
  const AgreementScores s = agreement_suite(exp, gt, k);
  const Ranking re = rank_of(exp), rg = rank_of(gt);
  AgreementReport r;
  r.k = k;
  r.top_k_count = topk_count(re.size(), k);
  r.fa = s.fa;
  r.ra = s.ra;
  r.sa = s.sa;
  r.sra = s.sra;
  r.pra = pairwise_rank_agreement(re, rg);
  r.rc = rank_correlation(re, rg);
  r.pgi = prediction_gap(model, val, re, k, GapMode::important, gp);
  r.pgu = prediction_gap(model, val, re, k, GapMode::unimportant, gp);
  r.method = exp.method;
  r.model_id = exp.model_id;
  return r;
}

inline nlohmann::json to_json(const AgreementReport& r) {
  return {{"k", r.k},     {"top_k_count", r.top_k_count}, {"fa", r.fa},   {"ra", r.ra},    {"sa", r.sa},
          {"sra", r.sra}, {"pra", r.pra},                 {"rc", r.rc},   {"pgi", r.pgi},  {"pgu", r.pgu},
          {"method", r.method}, {"model_id", r.model_id}};
}

/// Per-row count of metrics on which the row attains the best value (max,
/// or min for PGU). Ties all count.
inline std::vector<int> best_count(const std::vector<AgreementReport>& rows) {
  require(!rows.empty(), "best_count: empty table");
  std::vector<int> counts(rows.size(), 0);
  for (std::size_t m = 0; m < kMetricNames.size(); ++m) {
    const bool lower_is_better = m == 7;
    double best = metric_values(rows[0])[m];
    for (const auto& r : rows) {
      const double v = metric_values(r)[m];
      best = lower_is_better ? std::min(best, v) : std::max(best, v);
    }
    for (std::size_t i = 0; i < rows.size(); ++i)
      if (metric_values(rows[i])[m] == best) ++counts[i];
  }
  return counts;
}

/// Aligned text table: Method, FA, RA, SA, SRA, RC, PRA, PGI, PGU, #Best.
inline std::string render_table(const std::vector<AgreementReport>& rows, const std::string& title = "") {
  const auto counts = best_count(rows);
  std::size_t width = 6;
  for (const auto& r : rows) width = std::max(width, r.method.size());
  std::ostringstream os;
  if (!title.empty()) os << title << '\n';
  os << std::left << std::setw(static_cast<int>(width)) << "Method";
  for (const char* name : kMetricNames) os << std::right << std::setw(8) << name;
  os << std::setw(7) << "#Best" << '\n';
  for (std::size_t i = 0; i < rows.size(); ++i) {
    os << std::left << std::setw(static_cast<int>(width)) << rows[i].method << std::right << std::fixed << std::setprecision(3);
    for (double v : metric_values(rows[i])) os << std::setw(8) << v;
    os << std::setw(7) << counts[i] << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Fairness

struct FairnessReport {
  std::array<AgreementReport, 2> groups;  // indexed by subgroup code
  std::array<Index, 2> group_rows{0, 0};
  int majority = 0;
  std::array<double, 8> disparities{};  // |group0 - group1| per metric, kMetricNames order
};

inline FairnessReport fairness_from_reports(const AgreementReport& g0, const AgreementReport& g1, Index n0 = 0, Index n1 = 0) {
  FairnessReport f;
  f.groups = {g0, g1};
  f.group_rows = {n0, n1};
  f.majority = n1 > n0 ? 1 : 0;
  const auto a = metric_values(g0), b = metric_values(g1);
  for (std::size_t m = 0; m < a.size(); ++m) f.disparities[m] = std::abs(a[m] - b[m]);
  return f;
}

inline constexpr Index kMinSubgroupRows = 10;

/// Restricts explanation averaging and PGI/PGU sampling to each subgroup's
/// validation rows, then reports the absolute gaps.
template <Predictor M>
FairnessReport fairness_suite(const M& model, const Dataset& ds, const TaskSplit& sp,
                              const std::function<AttributionVector(const ValidationView&)>& explain,
                              const AttributionVector& gt, double k, const GapParams& gp) {
  require(ds.subgroup_column.has_value(), "dataset has no subgroup column");
  std::array<AgreementReport, 2> reports;
  std::array<Index, 2> sizes{0, 0};
  for (int g = 0; g < 2; ++g) {
    std::vector<Index> rows;
    for (Index i : sp.valid_idx)
      if (ds.groups[static_cast<std::size_t>(i)] == g) rows.push_back(i);
    require(static_cast<Index>(rows.size()) >= kMinSubgroupRows,
            "subgroup too small: group " + std::to_string(g) + " has " + std::to_string(rows.size()) + " validation rows");
    const ValidationView view{take_rows(ds.features, rows), take(ds.labels, rows), rows};
    reports[static_cast<std::size_t>(g)] = agreement_report(model, view, explain(view), gt, k, gp);
    sizes[static_cast<std::size_t>(g)] = static_cast<Index>(rows.size());
  }
  return fairness_from_reports(reports[0], reports[1], sizes[0], sizes[1]);
}

inline nlohmann::json to_json(const FairnessReport& f) {
  nlohmann::json disp;
  for (std::size_t m = 0; m < kMetricNames.size(); ++m) disp[kMetricNames[m]] = f.disparities[m];
  return {{"majority", f.majority},
          {"minority", 1 - f.majority},
          {"group_rows", f.group_rows},
          {"groups", {to_json(f.groups[0]), to_json(f.groups[1])}},
          {"disparities", disp}};
}

}  // namespace exagree
