#pragma once

// JSON-over-HTTP service for the stakeholder loop. Runs are the run
// directories directly below the service root (or the root itself).
//
//   GET  /v1/runs
//   GET  /v1/runs/{id}
//   GET  /v1/runs/{id}/features
//   GET  /v1/runs/{id}/attribution-ranges
//   POST /v1/runs/{id}/targets                 {text} | {ranking, signs} | {order, signs}
//   GET  /v1/runs/{id}/targets/{tid}
//   POST /v1/runs/{id}/targets/{tid}/search    MHMN config overrides
//   GET  /v1/runs/{id}/targets/{tid}/result
//   GET  /v1/jobs/{job_id}
//
// Errors are {code, message}. Searches run on a bounded worker pool; a
// second search on a target whose lock is held gets 409.

#include "exagree/pipeline.hpp"

#include <httplib.h>

#include <atomic>
#include <condition_variable>
#include <deque>
#include <thread>

namespace exagree {

struct ServiceOptions {
  fs::path root = ".";
  int workers = 1;
  std::optional<fs::path> static_dir;
  std::shared_ptr<PreferenceBackend> backend;  // null: plain DSL parsing
};

inline int http_status(ErrorKind k) {
  switch (k) {
    case ErrorKind::validation: return 400;
    case ErrorKind::not_found: return 404;
    case ErrorKind::conflict: return 409;
    case ErrorKind::internal: return 500;
  }
  return 500;
}

inline std::string error_code(int status) {
  switch (status) {
    case 400: return "bad_request";
    case 404: return "not_found";
    case 409: return "conflict";
    default: return "internal";
  }
}

class Service {
 public:
  explicit Service(ServiceOptions opt) : opt_(std::move(opt)) {
    require(opt_.workers >= 1, "worker pool size must be at least 1");
    require(fs::is_directory(opt_.root), "service root " + opt_.root.string() + " is not a directory");
    routes();
    for (int i = 0; i < opt_.workers; ++i) workers_.emplace_back([this] { work(); });
  }

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  ~Service() { stop(); }

  httplib::Server& server() { return server_; }

  int bind_any(const std::string& host = "127.0.0.1") { return server_.bind_to_any_port(host); }
  bool bind(const std::string& host, int port) { return server_.bind_to_port(host, port); }
  bool listen_after_bind() { return server_.listen_after_bind(); }
  void wait_until_ready() { server_.wait_until_ready(); }

  void stop() {
    server_.stop();
    {
      std::lock_guard lk(mu_);
      if (stopping_) return;
      stopping_ = true;
    }
    cv_.notify_all();
    for (auto& t : workers_)
      if (t.joinable()) t.join();
  }

  /// Blocks until every queued and running job has finished.
  void drain() {
    std::unique_lock lk(mu_);
    idle_cv_.wait(lk, [&] { return queue_.empty() && running_ == 0; });
  }

 private:
  struct Job {
    std::string id;
    std::string run_id;
    std::string target_id;
    nlohmann::json overrides;
    std::string status = "queued";
    int epoch = 0;
    int epochs = 0;
    std::string error;
    LockFile lock;
  };

  static void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void send_error(httplib::Response& res, int status, const std::string& message) {
    send_json(res, status, {{"code", error_code(status)}, {"message", message}});
  }

  template <class Fn>
  auto guarded(Fn fn) {
    return [fn](const httplib::Request& req, httplib::Response& res) {
      try {
        fn(req, res);
      } catch (const Error& e) {
        send_error(res, http_status(e.kind()), e.what());
      } catch (const nlohmann::json::exception& e) {
        send_error(res, 400, std::string("malformed JSON: ") + e.what());
      } catch (const std::exception& e) {
        send_error(res, 500, e.what());
      }
    };
  }

  fs::path run_path(const std::string& id) const {
    const bool safe = !id.empty() && id != "." && id != ".." &&
                      std::all_of(id.begin(), id.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.'; });
    if (safe) {
      if (is_run_dir(opt_.root / id)) return opt_.root / id;
      if (is_run_dir(opt_.root) && fs::absolute(opt_.root).lexically_normal().filename() == id) return opt_.root;
    }
    fail("unknown run '" + id + "'", ErrorKind::not_found);
  }

  std::vector<std::pair<std::string, fs::path>> list_runs() const {
    std::vector<std::pair<std::string, fs::path>> out;
    if (is_run_dir(opt_.root)) out.emplace_back(fs::absolute(opt_.root).lexically_normal().filename().string(), opt_.root);
    for (const auto& entry : fs::directory_iterator(opt_.root))
      if (entry.is_directory() && is_run_dir(entry.path())) out.emplace_back(entry.path().filename().string(), entry.path());
    std::sort(out.begin(), out.end());
    return out;
  }

  static nlohmann::json run_summary(const std::string& id, const RunDir& run) {
    const auto& m = run.manifest();
    nlohmann::json stages = nlohmann::json::object();
    for (const char* s : kStages) stages[s] = run.stage_done(s);
    return {{"run_id", id},
            {"created_at", m.value("created_at", "")},
            {"updated_at", m.value("updated_at", "")},
            {"stages", stages},
            {"n", m.contains("dataset") ? m["dataset"].value("n", 0) : 0},
            {"p", m.contains("dataset") ? m["dataset"].value("p", 0) : 0},
            {"targets", m["targets"].size()}};
  }

  static std::vector<std::string> feature_names_of(const RunDir& run) {
    std::vector<std::string> names;
    const auto meta = run.read_json("dataset.json");
    for (const auto& f : meta.at("features")) names.push_back(f.at("name").get<std::string>());
    return names;
  }

  static nlohmann::json compiled_target(const StakeholderTarget& t, const std::vector<std::string>& names) {
    std::vector<std::string> order;
    for (int f : t.ranking.order()) order.push_back(names.at(static_cast<std::size_t>(f)));
    return {{"ranking", t.ranking.ranks}, {"order", order}, {"signs", t.signs}, {"source", to_string(t.source)},
            {"stakeholder_id", t.stakeholder_id}, {"text", t.text}};
  }

  static nlohmann::json parse_body(const httplib::Request& req) {
    if (req.body.empty()) return nlohmann::json::object();
    try {
      return nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::exception&) {
      fail("request body is not valid JSON");
    }
  }

  nlohmann::json job_json(const Job& j) const {
    const double frac = j.status == "succeeded" ? 1.0 : (j.epochs > 0 ? static_cast<double>(j.epoch) / j.epochs : 0.0);
    nlohmann::json out{{"job_id", j.id},
                       {"run_id", j.run_id},
                       {"target_id", j.target_id},
                       {"status", j.status},
                       {"progress", {{"epoch", j.epoch}, {"epochs", j.epochs}, {"fraction", frac}}}};
    if (!j.error.empty()) out["error"] = j.error;
    return out;
  }

  void routes() {
    server_.Get("/v1/runs", guarded([this](const httplib::Request&, httplib::Response& res) {
      nlohmann::json runs = nlohmann::json::array();
      for (const auto& [id, path] : list_runs()) runs.push_back(run_summary(id, RunDir::open(path, false)));
      send_json(res, 200, {{"runs", runs}});
    }));

    server_.Get(R"(/v1/runs/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      const RunDir run = RunDir::open(run_path(id));
      nlohmann::json body = run_summary(id, run);
      const auto& m = run.manifest();
      body["seeds"] = m["seeds"];
      body["config"] = m["config"];
      body["dataset"] = m.contains("dataset") ? m["dataset"] : nlohmann::json::object();
      nlohmann::json targets = nlohmann::json::object();
      for (const auto& [tid, t] : m["targets"].items()) targets[tid] = t;
      body["target_list"] = targets;
      if (run.stage_done("rashomon")) body["rashomon"] = run.read_json("rashomon/sample.json");
      if (run.stage_done("dman")) body["dman"] = run.read_json("dman/report.json");
      send_json(res, 200, body);
    }));

    server_.Get(R"(/v1/runs/([^/]+)/features)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      const RunDir run = RunDir::open(run_path(id));
      if (!run.stage_done("data")) fail("data stage missing");
      const auto meta = run.read_json("dataset.json");
      nlohmann::json feats = nlohmann::json::array();
      std::optional<Ranking> ref;
      if (run.stage_done("rashomon")) ref = rank_of(reference_attribution(run));
      int i = 0;
      for (const auto& f : meta.at("features")) {
        nlohmann::json e{{"index", i}, {"name", f.at("name")}, {"kind", f.at("kind")}, {"mean", f.at("mean")}, {"std", f.at("std")}};
        if (ref) e["reference_rank"] = ref->ranks[static_cast<std::size_t>(i)];
        feats.push_back(e);
        ++i;
      }
      send_json(res, 200, {{"run_id", id}, {"features", feats}});
    }));

    server_.Get(R"(/v1/runs/([^/]+)/attribution-ranges)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      const RunDir run = RunDir::open(run_path(id));
      if (!run.stage_done("rashomon")) fail("rashomon stage missing");
      const SampleData sd = load_sample(run);
      const AttributionRange r = attribution_ranges(sd.datt.attributions);
      const auto names = feature_names_of(run);
      nlohmann::json feats = nlohmann::json::array();
      for (std::size_t j = 0; j < names.size(); ++j) {
        const auto jj = static_cast<Index>(j);
        feats.push_back({{"index", j}, {"name", names[j]}, {"min", r.min[jj]}, {"max", r.max[jj]}, {"reference", sd.datt.attributions(0, jj)}});
      }
      send_json(res, 200, {{"run_id", id}, {"sample_size", sd.datt.masks.rows()}, {"features", feats}});
    }));

    server_.Post(R"(/v1/runs/([^/]+)/targets)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      RunDir run = RunDir::open(run_path(id));
      const TargetRequest tr = target_request_from_json(parse_body(req));
      const std::string tid = add_target(run, tr, opt_.backend.get());
      const RunDir fresh = RunDir::open(run.root(), false);
      send_json(res, 201, {{"target_id", tid}, {"compiled_target", compiled_target(load_target(fresh, tid), feature_names_of(fresh))}});
    }));

    server_.Get(R"(/v1/runs/([^/]+)/targets/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1], tid = req.matches[2];
      const RunDir run = RunDir::open(run_path(id));
      const StakeholderTarget t = load_target(run, tid);
      send_json(res, 200, {{"target_id", tid}, {"compiled_target", compiled_target(t, feature_names_of(run))},
                           {"status", run.manifest()["targets"][tid].value("status", "created")}});
    }));

    server_.Post(R"(/v1/runs/([^/]+)/targets/([^/]+)/search)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1], tid = req.matches[2];
      RunDir run = RunDir::open(run_path(id));
      load_target(run, tid);
      run.require_stages_before("saem");
      nlohmann::json overrides = parse_body(req);
      require(overrides.is_object(), "search body must be a JSON object of configuration overrides");
      try {
        mhmn_config_from_json(overrides, run_mhmn_config(run));
      } catch (const nlohmann::json::exception& e) {
        fail(std::string("malformed search configuration: ") + e.what());
      }
      auto job = std::make_shared<Job>();
      job->run_id = id;
      job->target_id = tid;
      job->overrides = std::move(overrides);
      job->epochs = mhmn_config_from_json(job->overrides, run_mhmn_config(run)).epochs;
      job->lock = acquire_search_lock(run, tid);
      {
        std::lock_guard lk(mu_);
        job->id = "job-" + std::to_string(++job_counter_);
        jobs_[job->id] = job;
        queue_.push_back(job);
      }
      cv_.notify_one();
      send_json(res, 202, {{"job_id", job->id}, {"status", "queued"}});
    }));

    server_.Get(R"(/v1/runs/([^/]+)/targets/([^/]+)/result)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1], tid = req.matches[2];
      const RunDir run = RunDir::open(run_path(id));
      load_target(run, tid);
      const auto result = load_result(run, tid);
      if (!result) fail("target " + tid + " has no search result yet", ErrorKind::not_found);
      send_json(res, 200, *result);
    }));

    server_.Get(R"(/v1/jobs/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      std::lock_guard lk(mu_);
      const auto it = jobs_.find(id);
      if (it == jobs_.end()) fail("unknown job '" + id + "'", ErrorKind::not_found);
      send_json(res, 200, job_json(*it->second));
    }));

    if (opt_.static_dir) {
      require(fs::is_directory(*opt_.static_dir), "static directory " + opt_.static_dir->string() + " does not exist");
      server_.set_mount_point("/", opt_.static_dir->string());
    }
    server_.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (res.body.empty()) send_error(res, res.status, "no route for this request");
    });
  }

  void work() {
    for (;;) {
      std::shared_ptr<Job> job;
      {
        std::unique_lock lk(mu_);
        cv_.wait(lk, [&] { return stopping_ || !queue_.empty(); });
        if (stopping_ && queue_.empty()) return;
        job = queue_.front();
        queue_.pop_front();
        job->status = "running";
        ++running_;
      }
      try {
        RunDir run = RunDir::open(run_path(job->run_id));
        search(run, job->target_id, job->overrides,
               [&](int epoch, int epochs) {
                 std::lock_guard lk(mu_);
                 job->epoch = epoch;
                 job->epochs = epochs;
               },
               &job->lock);
        // The lock goes first so a client that sees "succeeded" can search again.
        std::lock_guard lk(mu_);
        job->lock.release();
        job->status = "succeeded";
        job->epoch = job->epochs;
      } catch (const std::exception& e) {
        std::lock_guard lk(mu_);
        job->lock.release();
        job->status = "failed";
        job->error = e.what();
      }
      {
        std::lock_guard lk(mu_);
        --running_;
      }
      idle_cv_.notify_all();
    }
  }

  ServiceOptions opt_;
  httplib::Server server_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable idle_cv_;
  std::map<std::string, std::shared_ptr<Job>> jobs_;
  std::deque<std::shared_ptr<Job>> queue_;
  std::vector<std::thread> workers_;
  std::uint64_t job_counter_ = 0;
  int running_ = 0;
  bool stopping_ = false;
};

}  // namespace exagree
