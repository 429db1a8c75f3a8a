#pragma once

// Disagreement audit: every (model, explainer) pair scored against a
// ground-truth attribution, plus the pairwise rank correlations behind
// model, method, ground-truth and stakeholder disagreement.

#include "exagree/attribution.hpp"
#include "exagree/metrics.hpp"
#include "exagree/saem.hpp"

#include <map>

namespace exagree {

inline const std::vector<std::string>& explainer_names() {
  static const std::vector<std::string> names = {"random", "vanilla_grad", "grad_x_input", "integrated_gradients", "smoothgrad",
                                                 "permutation_fis"};
  return names;
}

struct ExplainParams {
  BaselineParams baseline;
  int fis_repeats = 5;
  std::uint64_t seed = 0;
};

template <Predictor M>
AttributionVector explain(const std::string& method, const M& model, const ValidationView& val, const ExplainParams& ep) {
  AttributionVector a = method == "permutation_fis" ? permutation_fis(model, val, ep.fis_repeats, ep.seed)
                                                    : explain_baseline(baseline_from_string(method), model, val, ep.baseline, ep.seed);
  a.method = method;
  return a;
}

inline AttributionVector explain(const std::string& method, const ReferenceModel& model, const ValidationView& val,
                                 const ExplainParams& ep) {
  return std::visit([&](const auto& m) { return explain(method, m, val, ep); }, model);
}

struct NamedModel {
  std::string id;
  ReferenceModel model;
};

struct AuditCell {
  std::string model_id;
  std::string method;
  AttributionVector attribution;
  std::vector<AgreementReport> reports;  // one per k
  std::vector<int> best;                 // #Best within the model's table, one per k
};

struct PairwiseAgreement {
  std::string a, b;
  double rc = 0.0;
  double pra = 0.0;
};

struct AuditReport {
  std::vector<double> ks;
  std::vector<AuditCell> cells;
  std::vector<PairwiseAgreement> model_disagreement;         // same explainer, different models
  std::vector<PairwiseAgreement> method_disagreement;        // same model, different explainers
  std::vector<PairwiseAgreement> ground_truth_disagreement;  // each explanation vs the ground truth
  std::vector<PairwiseAgreement> stakeholder_disagreement;   // stakeholder targets against each other
};

inline PairwiseAgreement pairwise(const std::string& a, const std::string& b, const Ranking& ra, const Ranking& rb) {
  return {a, b, rank_correlation(ra, rb), pairwise_rank_agreement(ra, rb)};
}

inline AuditReport audit_disagreement(const std::vector<NamedModel>& models, const std::vector<std::string>& explainers,
                                      const ValidationView& val, const AttributionVector& gt, const std::vector<double>& ks,
                                      const GapParams& gp, const ExplainParams& ep,
                                      const std::vector<StakeholderTarget>& stakeholders = {}) {
  require(!models.empty(), "audit needs at least one model");
  require(!explainers.empty(), "audit needs at least one explainer");
  require(!ks.empty(), "audit needs at least one k");
  AuditReport out;
  out.ks = ks;
  const Ranking rg = rank_of(gt);
  for (const auto& nm : models) {
    const std::size_t first = out.cells.size();
    for (const auto& method : explainers) {
      AuditCell cell;
      cell.model_id = nm.id;
      cell.method = method;
      cell.attribution = explain(method, nm.model, val, ep);
      cell.attribution.model_id = nm.id;
      for (double k : ks)
        cell.reports.push_back(std::visit([&](const auto& m) { return agreement_report(m, val, cell.attribution, gt, k, gp); }, nm.model));
      out.cells.push_back(std::move(cell));
    }
    for (std::size_t ki = 0; ki < ks.size(); ++ki) {
      std::vector<AgreementReport> table;
      for (std::size_t c = first; c < out.cells.size(); ++c) table.push_back(out.cells[c].reports[ki]);
      const auto counts = best_count(table);
      for (std::size_t c = first; c < out.cells.size(); ++c) out.cells[c].best.push_back(counts[c - first]);
    }
  }
  auto label = [](const AuditCell& c) { return c.model_id + "/" + c.method; };
  for (std::size_t i = 0; i < out.cells.size(); ++i) {
    const auto& ci = out.cells[i];
    const Ranking ri = rank_of(ci.attribution);
    out.ground_truth_disagreement.push_back(pairwise(label(ci), "ground_truth", ri, rg));
    for (std::size_t j = i + 1; j < out.cells.size(); ++j) {
      const auto& cj = out.cells[j];
      if (ci.method == cj.method && ci.model_id != cj.model_id)
        out.model_disagreement.push_back(pairwise(label(ci), label(cj), ri, rank_of(cj.attribution)));
      if (ci.model_id == cj.model_id && ci.method != cj.method)
        out.method_disagreement.push_back(pairwise(label(ci), label(cj), ri, rank_of(cj.attribution)));
    }
  }
  for (std::size_t i = 0; i < stakeholders.size(); ++i) {
    out.ground_truth_disagreement.push_back(pairwise("stakeholder:" + stakeholders[i].stakeholder_id, "ground_truth", stakeholders[i].ranking, rg));
    for (std::size_t j = i + 1; j < stakeholders.size(); ++j)
      out.stakeholder_disagreement.push_back(pairwise("stakeholder:" + stakeholders[i].stakeholder_id,
                                                      "stakeholder:" + stakeholders[j].stakeholder_id, stakeholders[i].ranking,
                                                      stakeholders[j].ranking));
  }
  return out;
}

inline nlohmann::json to_json(const PairwiseAgreement& p) { return {{"a", p.a}, {"b", p.b}, {"rc", p.rc}, {"pra", p.pra}}; }

inline nlohmann::json to_json(const AuditReport& r) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : r.cells) {
    nlohmann::json reports = nlohmann::json::array();
    for (std::size_t i = 0; i < c.reports.size(); ++i) {
      auto j = to_json(c.reports[i]);
      j["best"] = c.best[i];
      reports.push_back(j);
    }
    cells.push_back({{"model_id", c.model_id}, {"method", c.method}, {"attribution", to_std(c.attribution.values)}, {"reports", reports}});
  }
  auto list = [](const std::vector<PairwiseAgreement>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& p : v) a.push_back(to_json(p));
    return a;
  };
  return {{"ks", r.ks},
          {"cells", cells},
          {"scenarios",
           {{"stakeholder", list(r.stakeholder_disagreement)},
            {"model", list(r.model_disagreement)},
            {"method", list(r.method_disagreement)},
            {"ground_truth", list(r.ground_truth_disagreement)}}}};
}

/// One #Best table per (model, k).
inline std::string render_audit(const AuditReport& r) {
  std::ostringstream os;
  std::vector<std::string> model_ids;
  for (const auto& c : r.cells)
    if (std::find(model_ids.begin(), model_ids.end(), c.model_id) == model_ids.end()) model_ids.push_back(c.model_id);
  for (std::size_t ki = 0; ki < r.ks.size(); ++ki) {
    for (const auto& id : model_ids) {
      std::vector<AgreementReport> rows;
      for (const auto& c : r.cells)
        if (c.model_id == id) rows.push_back(c.reports[ki]);
      std::ostringstream title;
      title << "model " << id << ", k = " << r.ks[ki];
      os << render_table(rows, title.str()) << '\n';
    }
  }
  auto section = [&](const char* name, const std::vector<PairwiseAgreement>& v) {
    if (v.empty()) return;
    os << name << '\n';
    for (const auto& p : v) os << "  " << p.a << " vs " << p.b << ": RC " << std::fixed << std::setprecision(3) << p.rc << ", PRA " << p.pra << '\n';
  };
  section("stakeholder disagreement", r.stakeholder_disagreement);
  section("model disagreement", r.model_disagreement);
  section("explanation method disagreement", r.method_disagreement);
  section("ground truth disagreement", r.ground_truth_disagreement);
  return os.str();
}

}  // namespace exagree
