#pragma once

// Stakeholder-aligned explanation model (SAEM) search: a bank of mask heads
// optimized through the DMAN surrogate and the soft sorting network under
// rank, sign, sparsity and diversity losses, constrained to the Rashomon set,
// and finally judged on recomputed (true) permutation attributions.

#include "exagree/attribution.hpp"
#include "exagree/core.hpp"
#include "exagree/diffsort.hpp"
#include "exagree/dman.hpp"
#include "exagree/metrics.hpp"
#include "exagree/optim.hpp"
#include "exagree/rashomon.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <set>

namespace exagree {

enum class TargetSource { dsl, ui, raw, llm };

inline std::string to_string(TargetSource s) {
  switch (s) {
    case TargetSource::dsl: return "dsl";
    case TargetSource::ui: return "ui";
    case TargetSource::raw: return "raw";
    case TargetSource::llm: return "llm";
  }
  return "raw";
}

inline TargetSource target_source_from_string(const std::string& s) {
  if (s == "dsl") return TargetSource::dsl;
  if (s == "ui") return TargetSource::ui;
  if (s == "llm") return TargetSource::llm;
  if (s == "raw") return TargetSource::raw;
  fail("unknown target source '" + s + "'");
}

struct StakeholderTarget {
  Ranking ranking;
  std::vector<int> signs;  // empty, or p entries in {-1, 0, +1}; 0 = unspecified
  TargetSource source = TargetSource::raw;
  std::string stakeholder_id = "default";
  std::string text;  // preference text the target was compiled from, if any

  std::size_t p() const { return ranking.size(); }
  bool has_signs() const {
    return std::any_of(signs.begin(), signs.end(), [](int s) { return s != 0; });
  }
};

inline void validate(const StakeholderTarget& t, std::size_t p) {
  require(t.ranking.size() == p, "target ranking has " + std::to_string(t.ranking.size()) + " entries, expected " + std::to_string(p));
  require_permutation(t.ranking, "target ranking");
  require(t.signs.empty() || t.signs.size() == p, "target signs must have one entry per feature");
  for (int s : t.signs) require(s >= -1 && s <= 1, "target signs must be -1, 0 or +1");
}

/// Attribution-shaped stand-in for a target: |value| decreases with rank,
/// sign follows the stated sign (unspecified treated as +).
inline AttributionVector target_attribution(const StakeholderTarget& t) {
  const auto p = t.p();
  AttributionVector a;
  a.values.resize(static_cast<Index>(p));
  for (std::size_t j = 0; j < p; ++j) {
    const int s = t.signs.empty() || t.signs[j] == 0 ? 1 : t.signs[j];
    a.values[static_cast<Index>(j)] = s * static_cast<double>(p - static_cast<std::size_t>(t.ranking.ranks[j]) + 1);
  }
  a.method = "target";
  a.model_id = t.stakeholder_id;
  return a;
}

struct MhmnConfig {
  int heads = 50;
  double lr = 0.01;
  StepDecay scheduler{50, 0.5};
  double lambda_sparsity = 0.1;
  double lambda_diversity = 0.1;
  int epochs = 300;
  double beta = 10.0;
  std::uint64_t seed = 0;
  double init_k = 0.25;
  double sigma_base = 0.05;
  double sigma_attention = 0.2;
  double mask_max = 2.0;
  double tau = 0.01;
  int init_budget = 60;        // redraws per head before giving up
  int fis_repeats = 5;         // permutation repeats for true attributions
  std::uint64_t fis_seed = 0;  // shared by every candidate so comparisons are paired
  double min_dman_r2 = 0.8;
};

inline nlohmann::json to_json(const MhmnConfig& c) {
  return {{"heads", c.heads}, {"lr", c.lr}, {"step_size", c.scheduler.step_size}, {"gamma", c.scheduler.gamma},
          {"lambda_sparsity", c.lambda_sparsity}, {"lambda_diversity", c.lambda_diversity}, {"epochs", c.epochs},
          {"beta", c.beta}, {"seed", c.seed}, {"init_k", c.init_k}, {"sigma_base", c.sigma_base},
          {"sigma_attention", c.sigma_attention}, {"mask_max", c.mask_max}, {"tau", c.tau},
          {"init_budget", c.init_budget}, {"fis_repeats", c.fis_repeats}, {"fis_seed", c.fis_seed},
          {"min_dman_r2", c.min_dman_r2}};
}

/// Applies any keys present in `j` on top of `base`.
inline MhmnConfig mhmn_config_from_json(const nlohmann::json& j, MhmnConfig c = {}) {
  c.heads = j.value("heads", c.heads);
  c.lr = j.value("lr", c.lr);
  c.scheduler.step_size = j.value("step_size", c.scheduler.step_size);
  c.scheduler.gamma = j.value("gamma", c.scheduler.gamma);
  c.lambda_sparsity = j.value("lambda_sparsity", c.lambda_sparsity);
  c.lambda_diversity = j.value("lambda_diversity", c.lambda_diversity);
  c.epochs = j.value("epochs", c.epochs);
  c.beta = j.value("beta", c.beta);
  c.seed = j.value("seed", c.seed);
  c.init_k = j.value("init_k", c.init_k);
  c.sigma_base = j.value("sigma_base", c.sigma_base);
  c.sigma_attention = j.value("sigma_attention", c.sigma_attention);
  c.mask_max = j.value("mask_max", c.mask_max);
  c.tau = j.value("tau", c.tau);
  c.init_budget = j.value("init_budget", c.init_budget);
  c.fis_repeats = j.value("fis_repeats", c.fis_repeats);
  c.fis_seed = j.value("fis_seed", c.fis_seed);
  c.min_dman_r2 = j.value("min_dman_r2", c.min_dman_r2);
  require(c.heads >= 1, "heads must be at least 1");
  require(c.lr > 0.0, "lr must be positive");
  require(c.epochs >= 0, "epochs must be non-negative");
  require(c.beta > 0.0, "beta must be positive");
  return c;
}

// ---------------------------------------------------------------------------
// Initialization

/// Features that get the larger initial perturbation: the top ceil(k p) of
/// the reference ranking, plus every feature whose rank differs between the
/// reference and the target.
inline std::vector<bool> attention_features(const Ranking& reference, const Ranking& target, double k) {
  const std::size_t p = reference.size();
  const auto top = static_cast<int>(std::ceil(k * static_cast<double>(p)));
  std::vector<bool> att(p, false);
  for (std::size_t j = 0; j < p; ++j) att[j] = reference.ranks[j] <= top || reference.ranks[j] != target.ranks[j];
  return att;
}

/// Head 0 is exactly the all-ones mask. Other heads are 1 + Gaussian noise,
/// clipped to [0, mask_max]; a draw outside the Rashomon set is redrawn with
/// its noise scale shrunk by 0.7, up to cfg.init_budget times.
inline Matrix initialize_heads(const Ranking& reference, const StakeholderTarget& target, const MhmnConfig& cfg,
                               const std::function<bool(const Vector&)>& in_bound) {
  require(cfg.heads >= 1, "heads must be at least 1");
  const std::size_t p = reference.size();
  require(target.p() == p, "target and reference rankings differ in length");
  const auto att = attention_features(reference, target.ranking, cfg.init_k);
  Matrix heads(cfg.heads, static_cast<Index>(p));
  heads.row(0).setOnes();
  Rng rng(mix_seed(cfg.seed, 0x1417));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int h = 1; h < cfg.heads; ++h) {
    double scale = 1.0;
    bool ok = false;
    for (int attempt = 0; attempt < cfg.init_budget && !ok; ++attempt, scale *= 0.7) {
      Vector m(static_cast<Index>(p));
      for (std::size_t j = 0; j < p; ++j) {
        const double sd = att[j] ? cfg.sigma_attention : cfg.sigma_base;
        m[static_cast<Index>(j)] = std::clamp(1.0 + scale * sd * normal(rng), 0.0, cfg.mask_max);
      }
      if (in_bound(m)) {
        heads.row(h) = m.transpose();
        ok = true;
      }
    }
    if (!ok)
      fail("could only initialize " + std::to_string(h) + " of " + std::to_string(cfg.heads) +
               " heads inside the Rashomon set",
           ErrorKind::internal);
  }
  return heads;
}

// ---------------------------------------------------------------------------
// Losses

struct HeadLosses {
  double rank_loss = 0.0;
  double sign_loss = 0.0;
  Vector grad;  // d (rank_loss + sign_loss) / d mask
  bool valid = true;
};

/// rank_loss = -spearman_soft(soft_ranks(|dman(mask)|), target)
/// sign_loss = mean over signed features of (tanh(a_j / tau) - s_j)^2
inline HeadLosses head_losses(const Vector& mask, const DmanModel& dman, const SortingNetworkPlan& plan, double beta,
                              const StakeholderTarget& target, double tau = 0.01) {
  HeadLosses out;
  const Vector a = dman.forward(mask);
  if (!a.allFinite()) {
    out.valid = false;
    return out;
  }
  const Vector mag = a.cwiseAbs();
  const SoftPermutation sp = soft_sort(mag, plan, beta);
  SoftSpearman rho{};
  try {
    rho = spearman_soft(sp.soft_ranks, target.ranking);
  } catch (const Error&) {
    out.valid = false;
    return out;
  }
  out.rank_loss = -rho.value;
  const Matrix Js = soft_sort_gradient(mag, plan, beta);
  Vector dA = -(Js.transpose() * rho.gradient);
  for (Index j = 0; j < a.size(); ++j) dA[j] *= (a[j] > 0) - (a[j] < 0);

  int counted = 0;
  for (int s : target.signs) counted += s != 0;
  if (counted > 0) {
    for (Index j = 0; j < a.size(); ++j) {
      const int s = target.signs[static_cast<std::size_t>(j)];
      if (s == 0) continue;
      const double t = std::tanh(a[j] / tau);
      out.sign_loss += (t - s) * (t - s);
      dA[j] += 2.0 * (t - s) * (1.0 - t * t) / tau / counted;
    }
    out.sign_loss /= counted;
  }
  out.grad = dman.jacobian(mask).transpose() * dA;
  return out;
}

struct BatchRegularizers {
  double sparsity_loss = 0.0;
  double diversity_loss = 0.0;
  Matrix sparsity_grad;   // m x p
  Matrix diversity_grad;  // m x p
};

/// sparsity: mean over masks of mean |mask - 1|
/// diversity: mean cosine similarity of (mask - 1) over distinct pairs; a
/// zero deviation contributes similarity 0.
inline BatchRegularizers batch_regularizers(const Matrix& masks) {
  require(masks.rows() >= 1, "batch_regularizers needs at least one mask");
  const Index m = masks.rows(), p = masks.cols();
  BatchRegularizers r;
  const Matrix D = masks.array() - 1.0;
  r.sparsity_loss = D.cwiseAbs().mean();
  r.sparsity_grad = D.unaryExpr([](double v) { return static_cast<double>((v > 0) - (v < 0)); }) / static_cast<double>(m * p);
  r.diversity_grad = Matrix::Zero(m, p);
  if (m < 2) return r;
  const Vector norms = D.rowwise().norm();
  const double pairs = static_cast<double>(m * (m - 1) / 2);
  for (Index i = 0; i < m; ++i) {
    if (norms[i] == 0.0) continue;
    for (Index j = i + 1; j < m; ++j) {
      if (norms[j] == 0.0) continue;
      const double c = D.row(i).dot(D.row(j)) / (norms[i] * norms[j]);
      r.diversity_loss += c;
      r.diversity_grad.row(i) += (D.row(j) / (norms[i] * norms[j]) - c * D.row(i) / (norms[i] * norms[i])) / pairs;
      r.diversity_grad.row(j) += (D.row(i) / (norms[i] * norms[j]) - c * D.row(j) / (norms[j] * norms[j])) / pairs;
    }
  }
  r.diversity_loss /= pairs;
  return r;
}

struct TotalLoss {
  double value = 0.0;
  double rank_loss = 0.0;
  double sign_loss = 0.0;
  double sparsity_loss = 0.0;
  double diversity_loss = 0.0;
  Matrix grad;  // per active head
  std::vector<HeadLosses> per_head;
};

/// mean rank + mean sign + lambda_s sparsity + lambda_d diversity over the given heads.
inline TotalLoss total_loss(const Matrix& heads, const DmanModel& dman, const SortingNetworkPlan& plan,
                            const StakeholderTarget& target, const MhmnConfig& cfg) {
  const Index m = heads.rows();
  TotalLoss t;
  t.grad = Matrix::Zero(m, heads.cols());
  for (Index i = 0; i < m; ++i) {
    HeadLosses hl = head_losses(heads.row(i).transpose(), dman, plan, cfg.beta, target, cfg.tau);
    if (hl.valid) {
      t.rank_loss += hl.rank_loss / static_cast<double>(m);
      t.sign_loss += hl.sign_loss / static_cast<double>(m);
      t.grad.row(i) = hl.grad.transpose() / static_cast<double>(m);
    }
    t.per_head.push_back(std::move(hl));
  }
  const BatchRegularizers reg = batch_regularizers(heads);
  t.sparsity_loss = reg.sparsity_loss;
  t.diversity_loss = reg.diversity_loss;
  t.grad += cfg.lambda_sparsity * reg.sparsity_grad + cfg.lambda_diversity * reg.diversity_grad;
  t.value = t.rank_loss + t.sign_loss + cfg.lambda_sparsity * t.sparsity_loss + cfg.lambda_diversity * t.diversity_loss;
  return t;
}

// ---------------------------------------------------------------------------
// Search

struct TraceEntry {
  int head;
  int epoch;
  double rank_loss;
  double sign_loss;
  bool active;
};

struct MaskEvaluation {
  Vector mask;
  AttributionVector attributions;
  Ranking ranking;
  double spearman = 0.0;
  double validation_loss = 0.0;
};

/// Scores a mask on recomputed permutation attributions; never consults the surrogate.
template <Predictor Base>
MaskEvaluation evaluate_mask(const Base& base, const ValidationView& val, const Vector& mask,
                             const StakeholderTarget& target, int fis_repeats, std::uint64_t fis_seed) {
  const Masked<Base> model(base, mask);
  MaskEvaluation e;
  e.mask = mask;
  e.attributions = permutation_fis(model, val, fis_repeats, fis_seed);
  e.attributions.model_id = "masked";
  e.ranking = rank_of(e.attributions);
  e.spearman = spearman_exact(e.ranking, target.ranking);
  e.validation_loss = model_loss(model, val.X, val.y);
  return e;
}

struct SaemResult {
  Vector best_mask;
  AttributionVector true_attributions;
  Ranking achieved_ranking;
  double spearman_vs_target = 0.0;
  double reference_spearman = 0.0;
  Ranking reference_ranking;
  bool loss_in_bound = false;
  double validation_loss = 0.0;
  double bound = 0.0;
  int selected_head = -1;  // -1 is the all-ones reference mask
  int candidates = 0;
  int frozen_heads = 0;
  std::vector<TraceEntry> per_head_trace;
  nlohmann::json metric_report;  // filled by evaluation drivers
};

using ProgressFn = std::function<void(int epoch, int epochs)>;

/// Multi-head mask search. Heads leaving the Rashomon set are frozen; every
/// head's best in-bound snapshot (by surrogate rank + sign loss), every
/// in-bound final head, and the all-ones mask compete on exact Spearman of
/// their true attributions, ties going to the lower validation loss.
template <Predictor Base>
SaemResult optimize_saem(const Base& base, const ValidationView& val, double bound, const DmanModel& dman,
                         const StakeholderTarget& target, const MhmnConfig& cfg, const ProgressFn& progress = {}) {
  const auto p = static_cast<std::size_t>(base.p());
  validate(target, p);
  require(dman.p() == base.p(), "DMAN width does not match the model");
  require(dman.report().valid_r2 >= cfg.min_dman_r2,
          "DMAN held-out R^2 " + std::to_string(dman.report().valid_r2) + " is below the configured minimum " +
              std::to_string(cfg.min_dman_r2));
  const SortingNetworkPlan plan = build_plan(static_cast<int>(p));
  auto in_bound = [&](const Vector& m) { return is_in_rashomon(m, base, val, bound); };

  const MaskEvaluation reference = evaluate_mask(base, val, ones(static_cast<Index>(p)), target, cfg.fis_repeats, cfg.fis_seed);
  Matrix heads = initialize_heads(reference.ranking, target, cfg, in_bound);
  const int h = cfg.heads;

  enum class State { active, frozen, invalid };
  std::vector<State> state(static_cast<std::size_t>(h), State::active);
  std::vector<Adam> adams;
  for (int i = 0; i < h; ++i) adams.emplace_back(static_cast<Index>(p), cfg.lr);
  std::vector<Vector> best(static_cast<std::size_t>(h));
  std::vector<double> best_obj(static_cast<std::size_t>(h), std::numeric_limits<double>::infinity());

  SaemResult result;
  result.bound = bound;
  for (int epoch = 0; epoch <= cfg.epochs; ++epoch) {
    std::vector<int> active;
    for (int i = 0; i < h; ++i) {
      const auto si = static_cast<std::size_t>(i);
      if (state[si] != State::active) continue;
      if (!in_bound(heads.row(i).transpose())) {
        state[si] = State::frozen;
        continue;
      }
      active.push_back(i);
    }
    if (active.empty()) break;
    Matrix batch(static_cast<Index>(active.size()), static_cast<Index>(p));
    for (std::size_t a = 0; a < active.size(); ++a) batch.row(static_cast<Index>(a)) = heads.row(active[a]);
    const TotalLoss tl = total_loss(batch, dman, plan, target, cfg);
    if (!std::isfinite(tl.value))
      fail("non-finite SAEM loss at epoch " + std::to_string(epoch), ErrorKind::internal);

    for (std::size_t a = 0; a < active.size(); ++a) {
      const int i = active[a];
      const auto si = static_cast<std::size_t>(i);
      const HeadLosses& hl = tl.per_head[a];
      result.per_head_trace.push_back({i, epoch, hl.rank_loss, hl.sign_loss, hl.valid});
      if (!hl.valid) {
        state[si] = State::invalid;
        continue;
      }
      const double obj = hl.rank_loss + hl.sign_loss;
      if (obj < best_obj[si]) {
        best_obj[si] = obj;
        best[si] = heads.row(i).transpose();
      }
    }
    if (epoch == cfg.epochs) break;
    const double lr = cfg.scheduler.rate(cfg.lr, epoch);
    for (std::size_t a = 0; a < active.size(); ++a) {
      const int i = active[a];
      if (state[static_cast<std::size_t>(i)] != State::active) continue;
      Adam& opt = adams[static_cast<std::size_t>(i)];
      opt.set_lr(lr);
      Vector row = heads.row(i).transpose();
      opt.step(row, Vector(tl.grad.row(static_cast<Index>(a)).transpose()));
      heads.row(i) = row.cwiseMax(0.0).cwiseMin(cfg.mask_max).transpose();
    }
    if (progress) progress(epoch + 1, cfg.epochs);
  }

  std::vector<std::pair<int, Vector>> candidates{{-1, ones(static_cast<Index>(p))}};
  bool any_valid = false;
  for (int i = 0; i < h; ++i) {
    const auto si = static_cast<std::size_t>(i);
    if (state[si] == State::frozen) ++result.frozen_heads;
    if (best[si].size() == 0) continue;
    any_valid = true;
    candidates.emplace_back(i, best[si]);
    const Vector fin = heads.row(i).transpose();
    if (state[si] == State::active && fin != best[si] && in_bound(fin)) candidates.emplace_back(i, fin);
  }
  if (!any_valid) fail("every SAEM head became invalid; no surrogate-scored snapshot exists", ErrorKind::internal);

  result.reference_ranking = reference.ranking;
  result.reference_spearman = reference.spearman;
  std::optional<MaskEvaluation> chosen;
  int chosen_head = -1;
  for (const auto& [head, mask] : candidates) {
    MaskEvaluation e = head == -1 ? reference : evaluate_mask(base, val, mask, target, cfg.fis_repeats, cfg.fis_seed);
    const bool better = !chosen || e.spearman > chosen->spearman ||
                        (e.spearman == chosen->spearman && e.validation_loss < chosen->validation_loss);
    if (better) {
      chosen = std::move(e);
      chosen_head = head;
    }
  }
  result.candidates = static_cast<int>(candidates.size());
  result.selected_head = chosen_head;
  result.best_mask = chosen->mask;
  result.true_attributions = chosen->attributions;
  result.achieved_ranking = chosen->ranking;
  result.spearman_vs_target = chosen->spearman;
  result.validation_loss = chosen->validation_loss;
  result.loss_in_bound = in_bound(result.best_mask);
  return result;
}

inline nlohmann::json to_json(const StakeholderTarget& t) {
  return {{"ranking", t.ranking.ranks}, {"signs", t.signs}, {"source", to_string(t.source)},
          {"stakeholder_id", t.stakeholder_id}, {"text", t.text}};
}

inline StakeholderTarget target_from_json(const nlohmann::json& j) {
  StakeholderTarget t;
  t.ranking.ranks = j.at("ranking").get<std::vector<int>>();
  t.signs = j.value("signs", std::vector<int>{});
  t.source = target_source_from_string(j.value("source", std::string("raw")));
  t.stakeholder_id = j.value("stakeholder_id", std::string("default"));
  t.text = j.value("text", std::string());
  return t;
}

inline nlohmann::json to_json(const SaemResult& r) {
  return {{"best_mask", to_std(r.best_mask)},
          {"true_attributions", to_std(r.true_attributions.values)},
          {"achieved_ranking", r.achieved_ranking.ranks},
          {"reference_ranking", r.reference_ranking.ranks},
          {"spearman_vs_target", r.spearman_vs_target},
          {"reference_spearman", r.reference_spearman},
          {"loss_in_bound", r.loss_in_bound},
          {"validation_loss", r.validation_loss},
          {"bound", r.bound},
          {"selected_head", r.selected_head},
          {"candidates", r.candidates},
          {"frozen_heads", r.frozen_heads},
          {"trace_entries", r.per_head_trace.size()},
          {"metric_report", r.metric_report}};
}

inline std::string trace_to_csv(const std::vector<TraceEntry>& trace) {
  std::string out = "head,epoch,rank_loss,sign_loss,active\n";
  for (const auto& e : trace)
    out += std::to_string(e.head) + ',' + std::to_string(e.epoch) + ',' + csv::format_double(e.rank_loss) + ',' +
           csv::format_double(e.sign_loss) + ',' + (e.active ? "1" : "0") + '\n';
  return out;
}

}  // namespace exagree
