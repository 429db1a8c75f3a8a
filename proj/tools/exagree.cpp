// exagree command-line driver. Every subcommand works on one run directory
// (--run) and records what it did in the run's manifest.
//
// Exit status: 0 success, 2 validation error, 1 internal error.

#include "exagree/service.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <iostream>

using namespace exagree;

namespace {

struct Common {
  std::string run = "run";
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--run", c.run, "run directory")->capture_default_str();
  sub->add_option("--seed", c.seed, "seed for this stage (recorded in the manifest)");
}

std::string read_text_file(const std::string& path) { return read_bytes(path); }

Service* g_service = nullptr;

void on_signal(int) {
  if (g_service) g_service->server().stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"exagree: Rashomon-set search for stakeholder-aligned explanations"};
  app.require_subcommand(1);

  // synth
  Common synth_c;
  SynthOptions synth_o;
  std::vector<double> synth_w;
  auto* synth_cmd = app.add_subcommand("synth", "create a run from the synthetic Gaussian task");
  add_common(synth_cmd, synth_c);
  synth_cmd->add_option("--n", synth_o.n, "rows")->capture_default_str();
  synth_cmd->add_option("--p", synth_o.p, "features")->capture_default_str();
  synth_cmd->add_option("--noise", synth_o.noise_std, "logit noise std")->capture_default_str();
  synth_cmd->add_option("--weights", synth_w, "comma-separated weights (default: alternating decaying)")->delimiter(',');
  synth_cmd->add_option("--valid-fraction", synth_o.valid_fraction)->capture_default_str();

  // ingest
  Common ingest_c;
  std::string ingest_csv, ingest_label = "label";
  std::optional<std::string> ingest_subgroup;
  double ingest_vf = 0.2;
  auto* ingest_cmd = app.add_subcommand("ingest", "create a run from a CSV file");
  add_common(ingest_cmd, ingest_c);
  ingest_cmd->add_option("--csv", ingest_csv, "input CSV")->required();
  ingest_cmd->add_option("--label", ingest_label, "binary label column")->capture_default_str();
  ingest_cmd->add_option("--subgroup", ingest_subgroup, "binary subgroup column for fairness reports");
  ingest_cmd->add_option("--valid-fraction", ingest_vf)->capture_default_str();

  // train-ref
  Common ref_c;
  ReferenceOptions ref_o;
  auto* ref_cmd = app.add_subcommand("train-ref", "train the reference model (and the logistic ground truth)");
  add_common(ref_cmd, ref_c);
  ref_cmd->add_option("--model", ref_o.model, "logistic or mlp")->check(CLI::IsMember({"logistic", "mlp"}))->capture_default_str();
  ref_cmd->add_option("--lr", ref_o.logistic.lr, "logistic learning rate")->capture_default_str();
  ref_cmd->add_option("--epochs", ref_o.logistic.epochs, "logistic epochs")->capture_default_str();
  ref_cmd->add_option("--mlp-lr", ref_o.mlp.lr)->capture_default_str();
  ref_cmd->add_option("--mlp-epochs", ref_o.mlp.epochs)->capture_default_str();
  ref_cmd->add_option("--hidden", ref_o.hidden, "mlp hidden layer sizes")->delimiter(',');

  // sample
  Common sample_c;
  SampleOptions sample_o;
  std::string exploration = "boundary_line_search", seeding = "shared";
  auto* sample_cmd = app.add_subcommand("sample", "sample the Rashomon set and its attributions");
  add_common(sample_cmd, sample_c);
  sample_cmd->add_option("--epsilon", sample_o.rashomon.epsilon)->capture_default_str();
  sample_cmd->add_option("--samples", sample_o.rashomon.n_samples)->capture_default_str();
  sample_cmd->add_option("--mask-max", sample_o.rashomon.mask_max)->capture_default_str();
  sample_cmd->add_option("--exploration", exploration)->check(CLI::IsMember({"rejection", "boundary_line_search"}))->capture_default_str();
  sample_cmd->add_option("--radius", sample_o.rashomon.proposal_radius, "rejection proposal radius")->capture_default_str();
  sample_cmd->add_option("--max-attempts", sample_o.rashomon.max_attempts, "0 means 20 x samples")->capture_default_str();
  sample_cmd->add_option("--fis-repeats", sample_o.fis_repeats)->capture_default_str();
  sample_cmd->add_option("--seeding", seeding, "permutation seeding across masks")->check(CLI::IsMember({"shared", "per_row"}))->capture_default_str();

  // dman
  Common dman_c;
  DmanConfig dman_o;
  auto* dman_cmd = app.add_subcommand("dman", "train the mask -> attribution surrogate");
  add_common(dman_cmd, dman_c);
  dman_cmd->add_option("--epochs", dman_o.epochs)->capture_default_str();
  dman_cmd->add_option("--lr", dman_o.lr)->capture_default_str();
  dman_cmd->add_option("--hidden", dman_o.hidden)->capture_default_str();
  dman_cmd->add_option("--valid-fraction", dman_o.valid_fraction)->capture_default_str();

  // target
  Common target_c;
  std::optional<std::string> target_text, target_file;
  std::vector<int> target_ranking, target_signs;
  std::vector<std::string> target_order;
  std::string stakeholder = "default";
  bool use_llm = false;
  auto* target_cmd = app.add_subcommand("target", "add a stakeholder target");
  add_common(target_cmd, target_c);
  auto* text_opt = target_cmd->add_option("--text", target_text, "preference DSL, e.g. \"a > b; sign(c) = -\"");
  auto* file_opt = target_cmd->add_option("--file", target_file, "file holding preference text");
  auto* rank_opt = target_cmd->add_option("--ranking", target_ranking, "rank of each feature, 1 = most important")->delimiter(',');
  auto* order_opt = target_cmd->add_option("--order", target_order, "feature names, most important first")->delimiter(',');
  target_cmd->add_option("--signs", target_signs, "per-feature sign in {-1,0,1}")->delimiter(',');
  target_cmd->add_option("--stakeholder", stakeholder)->capture_default_str();
  target_cmd->add_flag("--llm", use_llm, "send text to the backend configured by EXAGREE_LLM_ENDPOINT");
  text_opt->excludes(file_opt)->excludes(rank_opt)->excludes(order_opt);
  file_opt->excludes(rank_opt)->excludes(order_opt);
  rank_opt->excludes(order_opt);

  // search
  Common search_c;
  std::optional<std::string> search_tid;
  std::optional<int> search_heads, search_epochs;
  std::optional<double> search_lr, search_beta;
  std::optional<std::string> search_config;
  auto* search_cmd = app.add_subcommand("search", "run the multi-head mask search for a target");
  add_common(search_cmd, search_c);
  search_cmd->add_option("--target", search_tid, "target id (default: newest)");
  search_cmd->add_option("--heads", search_heads);
  search_cmd->add_option("--epochs", search_epochs);
  search_cmd->add_option("--lr", search_lr);
  search_cmd->add_option("--beta", search_beta, "sorting network steepness");
  search_cmd->add_option("--config", search_config, "JSON object of further overrides");

  // eval
  Common eval_c;
  std::vector<double> eval_k;
  auto* eval_cmd = app.add_subcommand("eval", "agreement and faithfulness tables");
  add_common(eval_cmd, eval_c);
  eval_cmd->add_option("--k", eval_k, "k fractions")->delimiter(',');

  // audit
  Common audit_c;
  std::vector<double> audit_k;
  auto* audit_cmd = app.add_subcommand("audit", "model x explainer disagreement audit against the logistic ground truth");
  add_common(audit_cmd, audit_c);
  audit_cmd->add_option("--k", audit_k)->delimiter(',');

  // ablate
  Common ablate_c;
  std::vector<double> ablate_eps{0.05, 0.1, 0.2}, ablate_k;
  std::optional<int> ablate_heads, ablate_epochs;
  auto* ablate_cmd = app.add_subcommand("ablate", "repeat sampling and search for several epsilons");
  add_common(ablate_cmd, ablate_c);
  ablate_cmd->add_option("--epsilons", ablate_eps)->delimiter(',');
  ablate_cmd->add_option("--k", ablate_k)->delimiter(',');
  ablate_cmd->add_option("--heads", ablate_heads);
  ablate_cmd->add_option("--epochs", ablate_epochs);

  // report
  Common report_c;
  auto* report_cmd = app.add_subcommand("report", "write reports/report.md and print it");
  add_common(report_cmd, report_c);

  // serve
  Common serve_c;
  std::optional<std::string> serve_root, serve_static;
  std::string serve_host = "127.0.0.1";
  int serve_port = 8080, serve_workers = 1;
  auto* serve_cmd = app.add_subcommand("serve", "HTTP API over a directory of runs");
  add_common(serve_cmd, serve_c);
  serve_cmd->add_option("--root", serve_root, "directory holding run directories (default: parent of --run)");
  serve_cmd->add_option("--host", serve_host)->capture_default_str();
  serve_cmd->add_option("--port", serve_port)->capture_default_str();
  serve_cmd->add_option("--workers", serve_workers, "search worker pool size")->capture_default_str();
  serve_cmd->add_option("--static", serve_static, "directory of static files served at /");

  // replay
  Common replay_c;
  std::string replay_out;
  auto* replay_cmd = app.add_subcommand("replay", "rebuild a run from its manifest and compare artifacts");
  add_common(replay_cmd, replay_c);
  replay_cmd->add_option("--out", replay_out, "destination run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*synth_cmd) {
      synth_o.weights = synth_w;
      RunDir run = synth(synth_c.run, synth_o, synth_c.seed.value_or(0));
      std::cout << "created " << run.root().string() << " (n = " << synth_o.n << ", p = " << synth_o.p << ")\n";
    } else if (*ingest_cmd) {
      RunDir run = ingest(ingest_c.run, ingest_csv, ingest_label, ingest_subgroup, ingest_vf, ingest_c.seed.value_or(0));
      std::cout << "created " << run.root().string() << " (n = " << run.manifest()["dataset"]["n"] << ", p = "
                << run.manifest()["dataset"]["p"] << ")\n";
    } else if (*ref_cmd) {
      RunDir run = RunDir::open(ref_c.run);
      train_reference(run, ref_o, ref_c.seed);
      std::cout << "reference " << ref_o.model << ": " << run.manifest()["models"].dump() << '\n';
    } else if (*sample_cmd) {
      RunDir run = RunDir::open(sample_c.run);
      sample_o.rashomon.exploration = exploration_from_string(exploration);
      sample_o.seeding = seeding == "shared" ? RowSeeding::shared : RowSeeding::per_row;
      sample(run, sample_o, sample_c.seed);
      const auto sj = run.read_json("rashomon/sample.json");
      std::cout << "sampled " << sj["size"] << " masks in " << sj["attempts"] << " attempts, bound " << sj["bound"] << '\n';
      if (sj["partial"].get<bool>()) std::cerr << "warning: sample is partial (attempt budget exhausted)\n";
    } else if (*dman_cmd) {
      RunDir run = RunDir::open(dman_c.run);
      const DmanReport r = fit_dman(run, dman_o, dman_c.seed);
      std::cout << "dman held-out R^2 " << r.valid_r2 << ", MSE " << r.valid_mse << '\n';
    } else if (*target_cmd) {
      RunDir run = RunDir::open(target_c.run);
      TargetRequest req;
      if (target_file) req.text = read_text_file(*target_file);
      if (target_text) req.text = *target_text;
      if (!target_ranking.empty()) req.ranking = target_ranking;
      if (!target_order.empty()) req.order = target_order;
      require(req.text || req.ranking || req.order, "target needs --text, --file, --ranking or --order");
      req.signs = target_signs;
      req.stakeholder_id = stakeholder;
      std::unique_ptr<PreferenceBackend> backend;
      if (use_llm) backend = backend_from_env();
      const std::string tid = add_target(run, req, backend.get());
      const RunDir fresh = RunDir::open(run.root());
      const StakeholderTarget t = load_target(fresh, tid);
      const auto meta = fresh.read_json("dataset.json");
      std::cout << tid << ':';
      for (int f : t.ranking.order()) std::cout << ' ' << meta["features"][static_cast<std::size_t>(f)]["name"].get<std::string>();
      std::cout << '\n';
    } else if (*search_cmd) {
      RunDir run = RunDir::open(search_c.run);
      std::string tid;
      if (search_tid) {
        tid = *search_tid;
      } else {
        const auto ids = target_ids(run);
        if (!run.stage_done("dman")) fail("dman stage missing");
        require(!ids.empty(), "targets stage missing: add a target first");
        tid = ids.back();
      }
      nlohmann::json ov = search_config ? nlohmann::json::parse(*search_config) : nlohmann::json::object();
      require(ov.is_object(), "--config must be a JSON object");
      if (search_heads) ov["heads"] = *search_heads;
      if (search_epochs) ov["epochs"] = *search_epochs;
      if (search_lr) ov["lr"] = *search_lr;
      if (search_beta) ov["beta"] = *search_beta;
      if (search_c.seed) ov["seed"] = *search_c.seed;
      const auto res = search(run, tid, ov, [](int e, int n) {
        if (e % 50 == 0 || e == n) std::cerr << "epoch " << e << '/' << n << '\n';
      });
      std::cout << tid << ": Spearman vs target " << res["spearman_vs_target"] << " (reference " << res["reference_spearman"]
                << "), selected head " << res["selected_head"] << ", validation loss " << res["validation_loss"] << " <= bound "
                << res["bound"] << '\n';
    } else if (*eval_cmd) {
      RunDir run = RunDir::open(eval_c.run);
      if (eval_c.seed) run.set_seed("gap", *eval_c.seed);
      std::cout << evaluate(run, eval_k)["text"].get<std::string>();
    } else if (*audit_cmd) {
      RunDir run = RunDir::open(audit_c.run);
      if (audit_c.seed) run.set_seed("gap", *audit_c.seed);
      std::cout << audit(run, audit_k)["text"].get<std::string>();
    } else if (*ablate_cmd) {
      RunDir run = RunDir::open(ablate_c.run);
      nlohmann::json ov = nlohmann::json::object();
      if (ablate_heads) ov["heads"] = *ablate_heads;
      if (ablate_epochs) ov["epochs"] = *ablate_epochs;
      if (ablate_c.seed) ov["seed"] = *ablate_c.seed;
      std::cout << ablate(run, ablate_eps, ablate_k, ov)["text"].get<std::string>();
    } else if (*report_cmd) {
      RunDir run = RunDir::open(report_c.run);
      std::cout << report(run);
    } else if (*serve_cmd) {
      ServiceOptions so;
      so.root = serve_root ? fs::path(*serve_root) : fs::absolute(serve_c.run).parent_path();
      so.workers = serve_workers;
      if (serve_static) so.static_dir = fs::path(*serve_static);
      so.backend = backend_from_env();
      Service svc(so);
      if (!svc.bind(serve_host, serve_port)) fail("cannot bind " + serve_host + ":" + std::to_string(serve_port), ErrorKind::internal);
      g_service = &svc;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cout << "serving " << so.root.string() << " on http://" << serve_host << ':' << serve_port << '\n' << std::flush;
      svc.listen_after_bind();
      g_service = nullptr;
    } else if (*replay_cmd) {
      const RunDir src = RunDir::open(replay_c.run);
      const auto checks = replay(src, replay_out);
      bool all = true;
      for (const auto& c : checks) {
        std::cout << (c.identical() ? "identical " : "DIFFERENT ") << c.artifact << '\n';
        all = all && c.identical();
      }
      if (!all) {
        std::cerr << "replay diverged from the recorded run\n";
        return 1;
      }
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.kind() == ErrorKind::internal ? 1 : 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
