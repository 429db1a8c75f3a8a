#pragma once

// Stage drivers over a run directory:
//   data -> reference -> rashomon -> dman -> targets -> saem -> reports
// plus the audit, epsilon ablation, summary report and replay drivers.

#include "exagree/audit.hpp"
#include "exagree/dman.hpp"
#include "exagree/elicitation.hpp"
#include "exagree/run.hpp"

#include <iomanip>
#include <map>

namespace exagree {

inline const std::vector<double>& default_ks() {
  static const std::vector<double> ks = {0.1, 0.25, 0.5, 0.75, 1.0};
  return ks;
}

template <class Fn>
decltype(auto) with_model(const ReferenceModel& m, Fn&& fn) {
  return std::visit(std::forward<Fn>(fn), m);
}

// ---------------------------------------------------------------------------
// data

struct SynthOptions {
  Index n = 5000;
  Index p = 20;
  double noise_std = 0.0;
  std::vector<double> weights;  // empty: default_synthetic_weights(p)
  double valid_fraction = 0.2;
};

namespace detail {

inline void store_dataset(RunDir& run, const Dataset& ds, double valid_fraction) {
  run.write("dataset.csv", to_csv(ds));
  run.write_json("dataset.json", meta_to_json(ds));
  const auto seed = run.stage_seed("split", 0x5e11);
  const TaskSplit sp = split(ds, valid_fraction, seed);
  run.write_json("split.json", {{"seed", seed}, {"valid_fraction", valid_fraction}, {"train_idx", sp.train_idx}, {"valid_idx", sp.valid_idx}});
  auto& d = run.manifest()["dataset"];
  d["sha256"] = run.manifest()["artifacts"]["dataset.csv"];
  d["name"] = ds.name;
  d["n"] = ds.n();
  d["p"] = ds.p();
  run.manifest()["config"]["data"]["valid_fraction"] = valid_fraction;
  run.complete("data");
  run.save();
}

}  // namespace detail

inline RunDir synth(const fs::path& root, const SynthOptions& opt, std::uint64_t seed) {
  require(opt.n >= 2 && opt.p >= 2, "synthetic task needs n >= 2 and p >= 2");
  const Vector w = opt.weights.empty() ? default_synthetic_weights(opt.p) : from_std(opt.weights);
  require(w.size() == opt.p, "expected " + std::to_string(opt.p) + " weights, got " + std::to_string(w.size()));
  RunDir run = RunDir::create(root, seed);
  const auto gseed = run.stage_seed("data", 0xda7a);
  const Dataset ds = generate_synthetic(opt.n, opt.p, w, opt.noise_std, gseed);
  const auto gen = synthetic_manifest(w, opt.noise_std, gseed, opt.n);
  run.write_json("synthetic.json", gen);
  run.manifest()["dataset"] = {{"source", "synthetic"}};
  run.manifest()["config"]["data"] = {{"n", opt.n}, {"p", opt.p}, {"noise_std", opt.noise_std}, {"weights", to_std(w)}};
  detail::store_dataset(run, ds, opt.valid_fraction);
  return run;
}

inline RunDir ingest(const fs::path& root, const std::string& csv_path, const std::string& label,
                     const std::optional<std::string>& subgroup, double valid_fraction, std::uint64_t seed) {
  const std::string bytes = read_bytes(csv_path);
  LoadOptions opt;
  opt.label_column = label;
  opt.subgroup_column = subgroup;
  opt.name = fs::path(csv_path).stem().string();
  const Dataset ds = parse_dataset_csv(bytes, opt);
  RunDir run = RunDir::create(root, seed);
  run.manifest()["dataset"] = {{"source", "csv"}, {"path", fs::absolute(csv_path).string()}, {"source_sha256", sha256_hex(bytes)}};
  run.manifest()["config"]["data"] = {{"label", label}, {"subgroup", subgroup ? nlohmann::json(*subgroup) : nlohmann::json(nullptr)}};
  detail::store_dataset(run, ds, valid_fraction);
  return run;
}

struct RunData {
  Dataset ds;
  TaskSplit sp;
  ValidationView val;
};

inline RunData load_data(const RunDir& run) {
  if (!run.stage_done("data")) fail("data stage missing");
  RunData d;
  d.ds = from_stored(run.read("dataset.csv"), run.read_json("dataset.json"));
  const auto sj = run.read_json("split.json");
  d.sp.seed = sj.at("seed").get<std::uint64_t>();
  d.sp.train_idx = sj.at("train_idx").get<std::vector<Index>>();
  d.sp.valid_idx = sj.at("valid_idx").get<std::vector<Index>>();
  d.val = validation_view(d.ds, d.sp);
  return d;
}

// ---------------------------------------------------------------------------
// reference

struct ReferenceOptions {
  std::string model = "logistic";  // or "mlp"
  TrainConfig logistic{0.5, 500, 0};
  TrainConfig mlp{0.1, 1000, 0};
  std::vector<int> hidden{16};
};

inline nlohmann::json to_json(const ReferenceOptions& o) {
  return {{"model", o.model},
          {"logistic", {{"lr", o.logistic.lr}, {"epochs", o.logistic.epochs}}},
          {"mlp", {{"lr", o.mlp.lr}, {"epochs", o.mlp.epochs}, {"hidden", o.hidden}}}};
}

inline ReferenceOptions reference_options_from_json(const nlohmann::json& j) {
  ReferenceOptions o;
  o.model = j.value("model", o.model);
  if (j.contains("logistic")) {
    o.logistic.lr = j["logistic"].value("lr", o.logistic.lr);
    o.logistic.epochs = j["logistic"].value("epochs", o.logistic.epochs);
  }
  if (j.contains("mlp")) {
    o.mlp.lr = j["mlp"].value("lr", o.mlp.lr);
    o.mlp.epochs = j["mlp"].value("epochs", o.mlp.epochs);
    o.hidden = j["mlp"].value("hidden", o.hidden);
  }
  return o;
}

inline void store_model(RunDir& run, const std::string& prefix, const SerializedModel& s) {
  run.write_json(prefix + ".json", s.manifest);
  run.write(prefix + ".bin", params_to_bytes(s.params));
}

inline ReferenceModel load_model(const RunDir& run, const std::string& prefix) {
  const auto manifest = run.read_json(prefix + ".json");
  const auto params = params_from_bytes(run.read(prefix + ".bin"), manifest.at("param_count").get<std::size_t>());
  return deserialize_reference(manifest, params);
}

inline LinearModel load_logistic(const RunDir& run) { return std::get<LinearModel>(load_model(run, "models/logistic")); }

inline void train_reference(RunDir& run, const ReferenceOptions& opt, std::optional<std::uint64_t> seed = {}) {
  run.require_stages_before("reference");
  require(opt.model == "logistic" || opt.model == "mlp", "reference model must be 'logistic' or 'mlp'");
  const RunData d = load_data(run);
  if (seed) run.set_seed("reference", *seed);
  const auto s = run.stage_seed("reference", 0x4ef);
  TrainConfig lc = opt.logistic, mc = opt.mlp;
  lc.seed = mc.seed = s;
  const LinearModel lr = train_logistic(d.ds, d.sp, lc);
  std::vector<int> sizes{static_cast<int>(d.ds.p())};
  sizes.insert(sizes.end(), opt.hidden.begin(), opt.hidden.end());
  sizes.push_back(1);
  const MlpModel mlp = train_mlp(d.ds, d.sp, sizes, mc);
  const ReferenceModel ref = opt.model == "logistic" ? ReferenceModel(lr) : ReferenceModel(mlp);
  store_model(run, "models/logistic", serialize(lr));
  store_model(run, "models/mlp", serialize(mlp));
  store_model(run, "models/reference", serialize(ref));
  run.manifest()["config"]["reference"] = to_json(opt);
  run.manifest()["models"] = {{"reference", opt.model},
                              {"logistic_valid_loss", model_loss(lr, d.val.X, d.val.y)},
                              {"mlp_valid_loss", model_loss(mlp, d.val.X, d.val.y)}};
  run.complete("reference");
  run.save();
}

// ---------------------------------------------------------------------------
// rashomon

struct SampleOptions {
  RashomonConfig rashomon;
  int fis_repeats = 5;
  RowSeeding seeding = RowSeeding::shared;
};

inline void sample(RunDir& run, SampleOptions opt, std::optional<std::uint64_t> seed = {}) {
  run.require_stages_before("rashomon");
  require(opt.fis_repeats >= 1, "fis_repeats must be at least 1");
  const RunData d = load_data(run);
  const ReferenceModel ref = load_model(run, "models/reference");
  if (seed) run.set_seed("rashomon", *seed);
  opt.rashomon.seed = run.stage_seed("rashomon", 0x7a5);
  const auto fis_seed = run.stage_seed("fis", 0xf15);
  const RashomonSample s = with_model(ref, [&](const auto& m) { return sample_masks(m, d.val, opt.rashomon); });
  const AttributionDataset datt =
      with_model(ref, [&](const auto& m) { return build_attribution_dataset(s, m, d.val, opt.fis_repeats, fis_seed, opt.seeding); });
  const auto names = d.ds.feature_names();
  run.write("rashomon/masks.csv", csv::matrix_to_csv(s.masks, names));
  run.write("rashomon/losses.csv", csv::matrix_to_csv(s.losses, {"loss"}));
  run.write("rashomon/attributions.csv", csv::matrix_to_csv(datt.attributions, names));
  run.write_json("rashomon/sample.json", {{"size", s.size()},
                                          {"bound", s.bound},
                                          {"reference_loss", s.reference_loss},
                                          {"partial", s.partial},
                                          {"attempts", s.attempts},
                                          {"proposal_index", s.proposal_index}});
  run.manifest()["config"]["rashomon"] = to_json(opt.rashomon);
  run.manifest()["config"]["attribution"] = {{"fis_repeats", opt.fis_repeats},
                                             {"seeding", opt.seeding == RowSeeding::shared ? "shared" : "per_row"}};
  run.complete("rashomon");
  run.save();
}

struct SampleData {
  RashomonSample sample;
  AttributionDataset datt;
};

inline SampleData load_sample(const RunDir& run) {
  if (!run.stage_done("rashomon")) fail("rashomon stage missing");
  SampleData out;
  out.datt.masks = csv::csv_to_matrix(run.read("rashomon/masks.csv"));
  out.datt.attributions = csv::csv_to_matrix(run.read("rashomon/attributions.csv"));
  const auto sj = run.read_json("rashomon/sample.json");
  out.sample.masks = out.datt.masks;
  out.sample.losses = csv::csv_to_matrix(run.read("rashomon/losses.csv")).col(0);
  out.sample.bound = sj.at("bound").get<double>();
  out.sample.reference_loss = sj.at("reference_loss").get<double>();
  out.sample.partial = sj.at("partial").get<bool>();
  out.sample.attempts = sj.at("attempts").get<int>();
  out.sample.proposal_index = sj.at("proposal_index").get<std::vector<std::int64_t>>();
  return out;
}

inline int fis_repeats(const RunDir& run) { return run.manifest()["config"]["attribution"].value("fis_repeats", 5); }

inline std::uint64_t fis_seed(const RunDir& run) { return run.manifest().at("seeds").at("fis").get<std::uint64_t>(); }

/// FIS attributions of the reference model: row 0 of the sample (all-ones mask).
inline AttributionVector reference_attribution(const RunDir& run) {
  const Matrix A = csv::csv_to_matrix(run.read("rashomon/attributions.csv"));
  return {A.row(0).transpose(), "permutation_fis", "reference"};
}

// ---------------------------------------------------------------------------
// dman

inline nlohmann::json to_json(const DmanConfig& c) {
  return {{"lr", c.lr}, {"epochs", c.epochs}, {"valid_fraction", c.valid_fraction}, {"hidden", c.hidden}};
}

inline DmanConfig dman_config_from_json(const nlohmann::json& j, DmanConfig c = {}) {
  c.lr = j.value("lr", c.lr);
  c.epochs = j.value("epochs", c.epochs);
  c.valid_fraction = j.value("valid_fraction", c.valid_fraction);
  c.hidden = j.value("hidden", c.hidden);
  return c;
}

inline DmanReport fit_dman(RunDir& run, DmanConfig cfg, std::optional<std::uint64_t> seed = {}) {
  run.require_stages_before("dman");
  const SampleData sd = load_sample(run);
  if (seed) run.set_seed("dman", *seed);
  cfg.seed = run.stage_seed("dman", 0xd3a);
  const DmanModel m = train_dman(sd.datt, cfg);
  store_model(run, "dman/dman", DmanIo::serialize(m));
  run.write_json("dman/report.json", to_json(m.report()));
  run.manifest()["config"]["dman"] = to_json(cfg);
  run.complete("dman");
  run.save();
  return m.report();
}

inline DmanModel load_dman(const RunDir& run) {
  if (!run.stage_done("dman")) fail("dman stage missing");
  const auto manifest = run.read_json("dman/dman.json");
  return DmanIo::deserialize(manifest, params_from_bytes(run.read("dman/dman.bin"), manifest.at("param_count").get<std::size_t>()));
}

// ---------------------------------------------------------------------------
// targets

struct TargetRequest {
  std::optional<std::string> text;          // preference DSL (or free text for an LLM backend)
  std::optional<std::vector<int>> ranking;  // ranks per feature, 1 = most important
  std::optional<std::vector<std::string>> order;  // feature names, most important first
  std::vector<int> signs;
  std::string stakeholder_id = "default";
  std::optional<TargetSource> source;
};

/// Parses an API/CLI body: {text} or {ranking, signs} or {order, signs}.
inline TargetRequest target_request_from_json(const nlohmann::json& j) {
  require(j.is_object(), "target body must be a JSON object");
  TargetRequest r;
  try {
    if (j.contains("text")) r.text = j.at("text").get<std::string>();
    if (j.contains("ranking")) r.ranking = j.at("ranking").get<std::vector<int>>();
    if (j.contains("order")) r.order = j.at("order").get<std::vector<std::string>>();
    if (j.contains("signs")) r.signs = j.at("signs").get<std::vector<int>>();
    r.stakeholder_id = j.value("stakeholder_id", r.stakeholder_id);
    if (j.contains("source")) r.source = target_source_from_string(j.at("source").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("malformed target body: ") + e.what());
  }
  require(static_cast<int>(r.text.has_value()) + r.ranking.has_value() + r.order.has_value() == 1,
          "target body needs exactly one of 'text', 'ranking' or 'order'");
  return r;
}

/// Target rank values with the stated signs; features without a stated sign
/// take the sign of the reference attribution.
inline AttributionVector target_truth(const StakeholderTarget& t, const AttributionVector& reference) {
  AttributionVector a = target_attribution(t);
  for (Index j = 0; j < a.size(); ++j)
    if (t.signs.empty() || t.signs[static_cast<std::size_t>(j)] == 0) a.values[j] = reference.values[j] < 0 ? -std::abs(a.values[j]) : std::abs(a.values[j]);
  return a;
}

inline StakeholderTarget compile_request(const TargetRequest& req, const std::vector<std::string>& names, const Ranking& reference,
                                         PreferenceBackend* backend) {
  const std::size_t p = names.size();
  StakeholderTarget t;
  if (req.text) {
    const PreferenceProgram prog = backend ? llm_elicit(*req.text, names, *backend) : parse_preferences(*req.text, names);
    t = compile_target(prog, reference);
    t.source = req.source.value_or(backend && backend->name() != "stub" ? TargetSource::llm : TargetSource::dsl);
  } else if (req.ranking) {
    t.ranking.ranks = *req.ranking;
    t.source = req.source.value_or(TargetSource::raw);
  } else {
    require(req.order->size() == p, "order must list all " + std::to_string(p) + " features");
    const detail::NameResolver resolver(names);
    std::vector<int> order;
    for (const auto& n : *req.order) order.push_back(resolver.resolve(n, ""));
    std::vector<int> sorted = order;
    std::sort(sorted.begin(), sorted.end());
    require(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(), "order lists a feature twice");
    t.ranking = Ranking::from_order(order);
    t.source = req.source.value_or(TargetSource::ui);
  }
  if (!req.signs.empty()) {
    require(req.signs.size() == p, "signs must have one entry per feature");
    if (t.signs.empty()) t.signs.assign(p, 0);
    for (std::size_t j = 0; j < p; ++j)
      if (req.signs[j] != 0) t.signs[j] = req.signs[j];
  }
  if (t.signs.empty()) t.signs.assign(p, 0);
  t.stakeholder_id = req.stakeholder_id;
  validate(t, p);
  return t;
}

/// Compiles and stores a target. Returns its id.
inline std::string add_target(RunDir& run, const TargetRequest& req, PreferenceBackend* backend = nullptr,
                              std::optional<std::string> forced_id = {}) {
  run.require_stages_before("targets");
  const auto meta = run.read_json("dataset.json");
  std::vector<std::string> names;
  for (const auto& f : meta.at("features")) names.push_back(f.at("name").get<std::string>());
  const Ranking reference = rank_of(reference_attribution(run));
  const StakeholderTarget t = compile_request(req, names, reference, backend);
  std::string tid;
  run.update([&](RunDir& r) {
    auto& targets = r.manifest()["targets"];
    if (forced_id) {
      tid = *forced_id;
    } else {
      int next = static_cast<int>(targets.size()) + 1;
      while (targets.contains("t" + std::to_string(next))) ++next;
      tid = "t" + std::to_string(next);
    }
    require(!targets.contains(tid), "target " + tid + " already exists", ErrorKind::conflict);
    r.write_json("targets/" + tid + "/target.json", to_json(t));
    targets[tid] = {{"created_at", utc_timestamp()}, {"stakeholder_id", t.stakeholder_id}, {"source", to_string(t.source)}, {"status", "created"}};
    r.complete("targets");
  });
  return tid;
}

inline StakeholderTarget load_target(const RunDir& run, const std::string& tid) {
  if (!run.manifest()["targets"].contains(tid)) fail("unknown target '" + tid + "'", ErrorKind::not_found);
  return target_from_json(run.read_json("targets/" + tid + "/target.json"));
}

inline std::vector<std::string> target_ids(const RunDir& run) {
  std::vector<std::string> ids;
  for (const auto& [k, v] : run.manifest()["targets"].items()) ids.push_back(k);
  std::sort(ids.begin(), ids.end(), [](const std::string& a, const std::string& b) {
    return a.size() != b.size() ? a.size() < b.size() : a < b;
  });
  return ids;
}

// ---------------------------------------------------------------------------
// saem

inline GapParams gap_params(RunDir& run) {
  GapParams gp;
  gp.seed = run.stage_seed("gap", 0x6a9);
  return gp;
}

inline MhmnConfig run_mhmn_config(RunDir& run) {
  MhmnConfig base;
  base.seed = run.stage_seed("mhmn", 0x3a3);
  base.fis_seed = fis_seed(run);
  base.fis_repeats = fis_repeats(run);
  if (run.manifest()["config"].contains("mhmn")) base = mhmn_config_from_json(run.manifest()["config"]["mhmn"], base);
  return base;
}

inline std::vector<double> run_ks(const RunDir& run) {
  const auto& c = run.manifest()["config"];
  return c.contains("k_list") ? c["k_list"].get<std::vector<double>>() : default_ks();
}

inline fs::path search_lock_path(const RunDir& run, const std::string& tid) { return run.root() / "targets" / tid / "search.lock"; }

inline LockFile acquire_search_lock(const RunDir& run, const std::string& tid) {
  return LockFile(search_lock_path(run, tid), "search for target " + tid);
}

/// Runs the mask search for one target and stores result.json and trace.csv.
/// The caller may pass a lock it already holds.
inline nlohmann::json search(RunDir& run, const std::string& tid, const nlohmann::json& overrides = nlohmann::json::object(),
                             const ProgressFn& progress = {}, LockFile* held = nullptr) {
  run.require_stages_before("saem");
  const StakeholderTarget target = load_target(run, tid);
  LockFile own;
  if (!held) own = acquire_search_lock(run, tid);
  const RunData d = load_data(run);
  const ReferenceModel ref = load_model(run, "models/reference");
  const SampleData sd = load_sample(run);
  const DmanModel dman = load_dman(run);
  MhmnConfig cfg;
  try {
    cfg = mhmn_config_from_json(overrides.is_null() ? nlohmann::json::object() : overrides, run_mhmn_config(run));
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("malformed search configuration: ") + e.what());
  }
  SaemResult res = with_model(ref, [&](const auto& m) { return optimize_saem(m, d.val, sd.sample.bound, dman, target, cfg, progress); });

  const AttributionVector ref_attr = reference_attribution(run);
  const AttributionVector truth = target_truth(target, ref_attr);
  const GapParams gp = gap_params(run);
  nlohmann::json reports = nlohmann::json::array();
  for (double k : run_ks(run)) {
    with_model(ref, [&](const auto& m) {
      using M = std::decay_t<decltype(m)>;
      const Masked<M> saem(m, res.best_mask);
      AttributionVector sa = res.true_attributions;
      sa.method = "saem";
      AttributionVector ra = ref_attr;
      reports.push_back({{"k", k},
                         {"reference", to_json(agreement_report(m, d.val, ra, truth, k, gp))},
                         {"saem", to_json(agreement_report(saem, d.val, sa, truth, k, gp))}});
    });
  }
  res.metric_report = reports;
  nlohmann::json out = to_json(res);
  out["target_id"] = tid;
  out["config"] = to_json(cfg);
  out["target_ranking"] = target.ranking.ranks;
  run.update([&](RunDir& r) {
    r.write_json("targets/" + tid + "/result.json", out);
    r.write("targets/" + tid + "/trace.csv", trace_to_csv(res.per_head_trace));
    auto& entry = r.manifest()["targets"][tid];
    entry["status"] = "searched";
    entry["search_config"] = to_json(cfg);
    entry["spearman_vs_target"] = res.spearman_vs_target;
    entry["reference_spearman"] = res.reference_spearman;
    r.complete("saem");
  });
  return out;
}

inline std::optional<nlohmann::json> load_result(const RunDir& run, const std::string& tid) {
  const std::string rel = "targets/" + tid + "/result.json";
  if (!run.has(rel)) return std::nullopt;
  return run.read_json(rel);
}

// ---------------------------------------------------------------------------
// reports

namespace detail {

inline std::string k_label(double k) {
  std::ostringstream os;
  os << k;
  return os.str();
}

inline std::vector<AgreementReport> reports_from_json(const nlohmann::json& rows) {
  std::vector<AgreementReport> out;
  for (const auto& j : rows) {
    AgreementReport r;
    r.k = j.at("k");
    r.top_k_count = j.at("top_k_count");
    r.fa = j.at("fa");
    r.ra = j.at("ra");
    r.sa = j.at("sa");
    r.sra = j.at("sra");
    r.pra = j.at("pra");
    r.rc = j.at("rc");
    r.pgi = j.at("pgi");
    r.pgu = j.at("pgu");
    r.method = j.at("method");
    r.model_id = j.at("model_id");
    out.push_back(r);
  }
  return out;
}

}  // namespace detail

/// Table-2-shaped evaluation: every explainer on the reference model and
/// every searched SAEM against the logistic-regression ground truth, and
/// each SAEM against its own target.
inline nlohmann::json evaluate(RunDir& run, std::vector<double> ks = {}) {
  run.require_stages_before("reports");
  if (ks.empty()) ks = run_ks(run);
  for (double k : ks) require(k > 0.0 && k <= 1.0, "k must be in (0, 1]");
  const RunData d = load_data(run);
  const ReferenceModel ref = load_model(run, "models/reference");
  const LinearModel lr = load_logistic(run);
  const AttributionVector gt = ground_truth_lr(lr);
  const GapParams gp = gap_params(run);
  ExplainParams ep;
  ep.seed = fis_seed(run);
  ep.fis_repeats = fis_repeats(run);

  struct Row {
    std::string label;
    AttributionVector attr;
    std::optional<Vector> mask;
  };
  std::vector<Row> rows;
  for (const auto& method : explainer_names()) {
    Row r{method, method == "permutation_fis" ? reference_attribution(run) : explain(method, ref, d.val, ep), std::nullopt};
    r.attr.method = method;
    rows.push_back(std::move(r));
  }
  std::vector<std::pair<std::string, nlohmann::json>> searched;
  for (const auto& tid : target_ids(run))
    if (auto res = load_result(run, tid)) searched.emplace_back(tid, *res);
  for (const auto& [tid, res] : searched) {
    AttributionVector a{from_std(res.at("true_attributions").get<std::vector<double>>()), "SAEM:" + tid, "saem"};
    rows.push_back({"SAEM:" + tid, a, from_std(res.at("best_mask").get<std::vector<double>>())});
  }

  auto report_for = [&](const Row& r, const AttributionVector& truth, double k) {
    return with_model(ref, [&](const auto& m) {
      using M = std::decay_t<decltype(m)>;
      if (r.mask) return agreement_report(Masked<M>(m, *r.mask), d.val, r.attr, truth, k, gp);
      return agreement_report(m, d.val, r.attr, truth, k, gp);
    });
  };

  nlohmann::json out{{"ks", ks}, {"ground_truth", nlohmann::json::array()}, {"targets", nlohmann::json::object()}};
  std::string text;
  for (double k : ks) {
    std::vector<AgreementReport> table;
    for (const auto& r : rows) {
      AgreementReport rep = report_for(r, gt, k);
      rep.method = r.label;
      table.push_back(rep);
    }
    const auto best = best_count(table);
    nlohmann::json jt = nlohmann::json::array();
    for (std::size_t i = 0; i < table.size(); ++i) {
      auto j = to_json(table[i]);
      j["best"] = best[i];
      jt.push_back(j);
    }
    out["ground_truth"].push_back({{"k", k}, {"rows", jt}});
    text += render_table(table, "ground truth (logistic coefficients), k = " + detail::k_label(k)) + "\n";
  }
  const AttributionVector ref_attr = reference_attribution(run);
  for (const auto& [tid, res] : searched) {
    const StakeholderTarget t = load_target(run, tid);
    const AttributionVector truth = target_truth(t, ref_attr);
    nlohmann::json per_k = nlohmann::json::array();
    for (double k : ks) {
      AgreementReport a = report_for(rows[explainer_names().size() - 1], truth, k);
      a.method = "reference";
      const auto it = std::find_if(rows.begin(), rows.end(), [&](const Row& r) { return r.label == "SAEM:" + tid; });
      AgreementReport b = report_for(*it, truth, k);
      b.method = "SAEM";
      per_k.push_back({{"k", k}, {"rows", {to_json(a), to_json(b)}}});
      text += render_table({a, b}, "target " + tid + ", k = " + detail::k_label(k)) + "\n";
    }
    out["targets"][tid] = {{"spearman_vs_target", res.at("spearman_vs_target")},
                           {"reference_spearman", res.at("reference_spearman")},
                           {"per_k", per_k}};
  }
  out["text"] = text;
  run.manifest()["config"]["k_list"] = ks;
  run.write_json("reports/eval.json", out);
  run.write("reports/eval.txt", text);
  run.complete("reports");
  run.save();
  return out;
}

/// Models x explainers against the logistic ground truth, plus subgroup
/// fairness when the dataset carries a subgroup column.
inline nlohmann::json audit(RunDir& run, std::vector<double> ks = {}) {
  if (!run.stage_done("reference")) fail("reference stage missing");
  if (ks.empty()) ks = run_ks(run);
  const RunData d = load_data(run);
  const LinearModel lr = load_logistic(run);
  const std::vector<NamedModel> models{{"logistic", lr}, {"mlp", load_model(run, "models/mlp")}};
  const AttributionVector gt = ground_truth_lr(lr);
  const GapParams gp = gap_params(run);
  ExplainParams ep;
  ep.seed = run.stage_seed("fis", 0xf15);
  ep.fis_repeats = run.manifest()["config"].contains("attribution") ? fis_repeats(run) : 5;
  std::vector<StakeholderTarget> stakeholders;
  for (const auto& tid : target_ids(run)) {
    stakeholders.push_back(load_target(run, tid));
    stakeholders.back().stakeholder_id = tid;
  }
  const AuditReport report = audit_disagreement(models, explainer_names(), d.val, gt, ks, gp, ep, stakeholders);
  nlohmann::json out = to_json(report);
  std::string text = render_audit(report);
  if (d.ds.subgroup_column) {
    nlohmann::json fair = nlohmann::json::object();
    for (const auto& nm : models) {
      const auto explain_fn = [&](const ValidationView& v) { return explain("permutation_fis", nm.model, v, ep); };
      const FairnessReport f = with_model(nm.model, [&](const auto& m) { return fairness_suite(m, d.ds, d.sp, explain_fn, gt, 0.25, gp); });
      fair[nm.id] = to_json(f);
      text += "fairness (" + nm.id + ", permutation_fis, k = 0.25):";
      for (std::size_t i = 0; i < kMetricNames.size(); ++i) {
        std::ostringstream os;
        os << ' ' << kMetricNames[i] << ' ' << std::fixed << std::setprecision(3) << f.disparities[i];
        text += os.str();
      }
      text += "\n";
    }
    out["fairness"] = fair;
    run.write_json("reports/fairness.json", fair);
  }
  out["text"] = text;
  run.write_json("reports/audit.json", out);
  run.write("reports/audit.txt", text);
  run.manifest()["reports"]["audit"] = utc_timestamp();
  run.save();
  return out;
}

/// Re-runs sampling, DMAN and every search once per epsilon in nested runs
/// under ablation/, and tabulates FA/RA/SA/SRA per k against each target.
inline nlohmann::json ablate(RunDir& run, const std::vector<double>& epsilons, std::vector<double> ks = {},
                             const nlohmann::json& search_overrides = nlohmann::json::object()) {
  if (!run.stage_done("reference")) fail("reference stage missing");
  require(!epsilons.empty(), "ablation needs at least one epsilon");
  if (ks.empty()) ks = run_ks(run);
  const auto& cfg = run.manifest()["config"];

  std::vector<TargetRequest> targets;
  std::vector<std::string> tids;
  for (const auto& tid : target_ids(run)) {
    const StakeholderTarget t = load_target(run, tid);
    TargetRequest r;
    r.ranking = t.ranking.ranks;
    r.signs = t.signs;
    r.stakeholder_id = t.stakeholder_id;
    r.source = t.source;
    targets.push_back(r);
    tids.push_back(tid);
  }
  if (targets.empty()) {
    const LinearModel lr = load_logistic(run);
    TargetRequest r;
    r.ranking = rank_of(lr.weights).ranks;
    for (Index j = 0; j < lr.weights.size(); ++j) r.signs.push_back(lr.weights[j] < 0 ? -1 : 1);
    r.stakeholder_id = "ground_truth";
    targets.push_back(r);
    tids.push_back("t1");
  }

  nlohmann::json out{{"epsilons", epsilons}, {"ks", ks}, {"runs", nlohmann::json::array()}};
  std::ostringstream text;
  text << "epsilon ablation: FA / RA / SA / SRA of the SAEM against its target\n";
  text << std::left << std::setw(10) << "epsilon" << std::setw(10) << "target" << std::setw(8) << "size";
  for (double k : ks) text << std::setw(26) << ("k=" + detail::k_label(k));
  text << '\n';
  for (double eps : epsilons) {
    require(eps >= 0.0, "epsilon must be non-negative");
    std::ostringstream name;
    name << "eps_" << eps;
    const fs::path root = run.root() / "ablation" / name.str();
    if (fs::exists(root)) fs::remove_all(root);
    RunDir nested = RunDir::create(root, run.seed());
    nested.manifest()["seeds"] = run.manifest()["seeds"];
    nested.manifest()["dataset"] = run.manifest()["dataset"];
    nested.manifest()["config"] = cfg;
    nested.manifest()["parent"] = run.root().string();
    for (const char* rel : {"dataset.csv", "dataset.json", "split.json", "models/logistic.json", "models/logistic.bin", "models/mlp.json",
                            "models/mlp.bin", "models/reference.json", "models/reference.bin"})
      nested.write(rel, run.read(rel));
    nested.complete("data");
    nested.complete("reference");
    nested.save();

    SampleOptions so;
    if (cfg.contains("rashomon")) so.rashomon = rashomon_config_from_json(cfg["rashomon"]);
    so.rashomon.epsilon = eps;
    if (cfg.contains("attribution")) {
      so.fis_repeats = cfg["attribution"].value("fis_repeats", so.fis_repeats);
      so.seeding = cfg["attribution"].value("seeding", std::string("shared")) == "shared" ? RowSeeding::shared : RowSeeding::per_row;
    }
    sample(nested, so);
    const DmanReport dr = fit_dman(nested, cfg.contains("dman") ? dman_config_from_json(cfg["dman"]) : DmanConfig{});
    const auto sj = nested.read_json("rashomon/sample.json");
    nlohmann::json entry{{"epsilon", eps}, {"path", root.string()}, {"sample_size", sj.at("size")}, {"dman_valid_r2", dr.valid_r2},
                         {"targets", nlohmann::json::object()}};
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const std::string tid = add_target(nested, targets[i], nullptr, tids[i]);
      nlohmann::json res;
      try {
        res = search(nested, tid, search_overrides);
      } catch (const Error& e) {
        entry["targets"][tid] = {{"error", e.what()}};
        text << std::left << std::setw(10) << eps << std::setw(10) << tid << std::setw(8) << sj.at("size").get<Index>() << e.what() << '\n';
        continue;
      }
      nlohmann::json per_k = nlohmann::json::array();
      text << std::left << std::setw(10) << eps << std::setw(10) << tid << std::setw(8) << sj.at("size").get<Index>();
      for (const auto& mr : res.at("metric_report")) {
        const auto& s = mr.at("saem");
        per_k.push_back({{"k", mr.at("k")}, {"fa", s.at("fa")}, {"ra", s.at("ra")}, {"sa", s.at("sa")}, {"sra", s.at("sra")}});
        std::ostringstream cell;
        cell << std::fixed << std::setprecision(2) << s.at("fa").get<double>() << '/' << s.at("ra").get<double>() << '/'
             << s.at("sa").get<double>() << '/' << s.at("sra").get<double>();
        text << std::setw(26) << cell.str();
      }
      text << '\n';
      entry["targets"][tid] = {{"spearman_vs_target", res.at("spearman_vs_target")},
                               {"reference_spearman", res.at("reference_spearman")},
                               {"per_k", per_k}};
    }
    out["runs"].push_back(entry);
  }
  out["text"] = text.str();
  run.write_json("reports/ablation.json", out);
  run.write("reports/ablation.txt", text.str());
  run.manifest()["reports"]["ablation"] = utc_timestamp();
  run.save();
  return out;
}

/// Markdown summary of everything the run holds.
inline std::string report(RunDir& run) {
  const auto& m = run.manifest();
  std::ostringstream os;
  os << "# Run " << run.id() << "\n\n";
  os << "seed " << run.seed() << ", created " << m.value("created_at", "") << "\n\n## Stages\n\n";
  for (const char* s : kStages) os << "- " << s << ": " << (run.stage_done(s) ? "done" : "pending") << '\n';
  if (m.contains("dataset")) {
    const auto& d = m["dataset"];
    os << "\n## Data\n\n" << d.value("source", std::string("?")) << " dataset";
    if (d.contains("n")) os << ", n = " << d["n"] << ", p = " << d["p"];
    os << '\n';
  }
  if (m.contains("models"))
    os << "\n## Reference\n\n" << m["models"]["reference"].get<std::string>() << " reference; validation log loss: logistic "
       << m["models"]["logistic_valid_loss"] << ", mlp " << m["models"]["mlp_valid_loss"] << '\n';
  if (run.stage_done("rashomon")) {
    const auto sj = run.read_json("rashomon/sample.json");
    os << "\n## Rashomon sample\n\n" << sj["size"] << " masks, bound " << sj["bound"] << ", reference loss " << sj["reference_loss"]
       << (sj["partial"].get<bool>() ? " (partial sample)" : "") << '\n';
  }
  if (run.stage_done("dman")) {
    const auto r = run.read_json("dman/report.json");
    os << "\n## DMAN\n\nheld-out R^2 " << r["valid_r2"] << ", held-out MSE " << r["valid_mse"] << '\n';
  }
  const auto tids = target_ids(run);
  if (!tids.empty()) {
    os << "\n## Targets\n\n| target | stakeholder | source | reference Spearman | SAEM Spearman |\n|---|---|---|---|---|\n";
    for (const auto& tid : tids) {
      const auto& t = m["targets"][tid];
      os << "| " << tid << " | " << t.value("stakeholder_id", "") << " | " << t.value("source", "") << " | ";
      if (t.contains("spearman_vs_target"))
        os << t["reference_spearman"] << " | " << t["spearman_vs_target"] << " |\n";
      else
        os << "- | - |\n";
    }
  }
  for (const auto& [rel, title] : std::vector<std::pair<std::string, std::string>>{
           {"reports/eval.txt", "Evaluation"}, {"reports/audit.txt", "Disagreement audit"}, {"reports/ablation.txt", "Epsilon ablation"}})
    if (run.has(rel)) os << "\n## " << title << "\n\n```\n" << run.read(rel) << "```\n";
  const std::string text = os.str();
  run.write("reports/report.md", text);
  run.manifest()["reports"]["report"] = utc_timestamp();
  run.save();
  return text;
}

// ---------------------------------------------------------------------------
// replay

struct ReplayCheck {
  std::string artifact;
  std::string original;
  std::string replayed;
  bool identical() const { return original == replayed; }
};

/// Rebuilds a run from its manifest's configuration and seeds into `dst`
/// and compares artifact hashes.
inline std::vector<ReplayCheck> replay(const RunDir& src, const fs::path& dst) {
  const auto& m = src.manifest();
  require(src.stage_done("data"), "data stage missing");
  const auto& cfg = m.at("config");
  const auto& data_cfg = cfg.at("data");
  const double vf = data_cfg.at("valid_fraction").get<double>();
  RunDir run = [&] {
    if (m.at("dataset").at("source") == "synthetic") {
      SynthOptions so;
      so.n = data_cfg.at("n");
      so.p = data_cfg.at("p");
      so.noise_std = data_cfg.at("noise_std");
      so.weights = data_cfg.at("weights").get<std::vector<double>>();
      so.valid_fraction = vf;
      RunDir r = RunDir::create(dst, src.seed());
      r.manifest()["seeds"] = m.at("seeds");
      r.save();
      const Dataset ds = generate_synthetic(so.n, so.p, from_std(so.weights), so.noise_std, m.at("seeds").at("data").get<std::uint64_t>());
      r.write_json("synthetic.json", synthetic_manifest(from_std(so.weights), so.noise_std, m.at("seeds").at("data").get<std::uint64_t>(), so.n));
      r.manifest()["dataset"] = {{"source", "synthetic"}};
      r.manifest()["config"]["data"] = data_cfg;
      detail::store_dataset(r, ds, vf);
      return r;
    }
    const std::string path = m.at("dataset").at("path");
    const std::string bytes = read_bytes(path);
    if (sha256_hex(bytes) != m.at("dataset").at("source_sha256").get<std::string>())
      fail("source CSV " + path + " changed since the run was created");
    RunDir r = RunDir::create(dst, src.seed());
    r.manifest()["seeds"] = m.at("seeds");
    LoadOptions opt;
    opt.label_column = data_cfg.at("label");
    if (!data_cfg.at("subgroup").is_null()) opt.subgroup_column = data_cfg.at("subgroup").get<std::string>();
    opt.name = fs::path(path).stem().string();
    r.manifest()["dataset"] = m.at("dataset");
    r.manifest()["config"]["data"] = data_cfg;
    detail::store_dataset(r, parse_dataset_csv(bytes, opt), vf);
    return r;
  }();

  if (src.stage_done("reference")) train_reference(run, reference_options_from_json(cfg.at("reference")));
  if (src.stage_done("rashomon")) {
    SampleOptions so;
    so.rashomon = rashomon_config_from_json(cfg.at("rashomon"));
    so.fis_repeats = cfg.at("attribution").at("fis_repeats");
    so.seeding = cfg.at("attribution").at("seeding") == "shared" ? RowSeeding::shared : RowSeeding::per_row;
    sample(run, so);
  }
  if (src.stage_done("dman")) fit_dman(run, dman_config_from_json(cfg.at("dman")));
  if (src.stage_done("dman")) {
    for (const auto& tid : target_ids(src)) {
      const StakeholderTarget t = load_target(src, tid);
      TargetRequest r;
      r.ranking = t.ranking.ranks;
      r.signs = t.signs;
      r.stakeholder_id = t.stakeholder_id;
      r.source = t.source;
      add_target(run, r, nullptr, tid);
      // Keep the compiled target byte-identical, including the preference text.
      run.update([&](RunDir& d) { d.write("targets/" + tid + "/target.json", src.read("targets/" + tid + "/target.json")); });
      const auto& entry = m.at("targets").at(tid);
      if (entry.contains("search_config")) search(run, tid, entry.at("search_config"));
    }
  }

  std::vector<ReplayCheck> checks;
  for (const auto& [rel, digest] : m.at("artifacts").items()) {
    const bool compared = rel == "dataset.csv" || rel == "split.json" || rel.starts_with("models/") || rel.starts_with("rashomon/") ||
                          rel.starts_with("dman/") || rel.starts_with("targets/");
    if (!compared) continue;
    const auto& art = run.manifest()["artifacts"];
    checks.push_back({rel, digest.get<std::string>(), art.contains(rel) ? art[rel].get<std::string>() : std::string("(missing)")});
  }
  return checks;
}

}  // namespace exagree
