#pragma once

// Shared fixtures for the test binaries: a small synthetic task with a
// trained reference, its Rashomon sample and surrogate, temp directories,
// and a minimal JSON-schema checker.

#include "exagree/dman.hpp"
#include "exagree/rashomon.hpp"
#include "exagree/saem.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

namespace exagree::testing {

/// Synthetic task shared by the slower suites; built once per process.
struct SynthTask {
  Dataset ds;
  TaskSplit sp;
  ValidationView val;
  LinearModel lr;
  RashomonSample sample;
  AttributionDataset datt;
  DmanModel dman;
};

inline const SynthTask& synth_task() {
  static const SynthTask task = [] {
    SynthTask t;
    t.ds = generate_synthetic(2000, 8, default_synthetic_weights(8), 0.0, 11);
    t.sp = split(t.ds, 0.2, 12);
    t.val = validation_view(t.ds, t.sp);
    t.lr = train_logistic(t.ds, t.sp, {0.5, 500, 0});
    RashomonConfig rc;
    rc.n_samples = 200;
    rc.seed = 13;
    t.sample = sample_masks(t.lr, t.val, rc);
    t.datt = build_attribution_dataset(t.sample, t.lr, t.val, 5, 14);
    DmanConfig dc;
    dc.seed = 15;
    t.dman = train_dman(t.datt, dc);
    return t;
  }();
  return task;
}

/// Two features with label weights (w0, w1), trained logistic reference.
struct TwoFeatureTask {
  Dataset ds;
  TaskSplit sp;
  ValidationView val;
  LinearModel lr;
};

inline TwoFeatureTask two_feature_task(double w0, double w1, std::uint64_t seed = 31) {
  TwoFeatureTask t;
  Vector w(2);
  w << w0, w1;
  t.ds = generate_synthetic(3000, 2, w, 0.0, seed);
  t.sp = split(t.ds, 0.3, seed + 1);
  t.val = validation_view(t.ds, t.sp);
  t.lr = train_logistic(t.ds, t.sp, {0.5, 500, 0});
  return t;
}

inline MhmnConfig quick_mhmn(std::uint64_t seed = 21) {
  MhmnConfig c;
  c.heads = 8;
  c.epochs = 120;
  c.seed = seed;
  c.fis_seed = 14;
  return c;
}

inline Ranking random_ranking(std::size_t p, Rng& rng) {
  std::vector<int> order(p);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  return Ranking::from_order(order);
}

/// Ground-truth ranking with one adjacent pair swapped: the neighbours whose
/// |attribution| ranges across the Rashomon sample overlap the most.
inline StakeholderTarget overlap_swap_target(const Ranking& truth, const Matrix& attributions) {
  const Matrix mag = attributions.cwiseAbs();
  const auto r = attribution_ranges(mag);
  const auto order = truth.order();
  double best = -std::numeric_limits<double>::infinity();
  std::size_t at = 0;
  for (std::size_t pos = 0; pos + 1 < order.size(); ++pos) {
    const auto a = order[pos], b = order[pos + 1];
    const double overlap = std::min(r.max[a], r.max[b]) - std::max(r.min[a], r.min[b]);
    if (overlap > best) {
      best = overlap;
      at = pos;
    }
  }
  auto swapped = order;
  std::swap(swapped[at], swapped[at + 1]);
  StakeholderTarget t;
  t.ranking = Ranking::from_order(swapped);
  return t;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "exagree") {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

// Subset of JSON Schema: type, properties, required, additionalProperties
// (boolean), items, enum, minimum, maximum, minItems, $ref into "definitions".
// Returns the first violation, or an empty string.
inline std::string schema_violation(const nlohmann::json& schema, const nlohmann::json& v, const nlohmann::json& root,
                                    const std::string& at = "$") {
  if (schema.contains("$ref")) {
    const std::string ref = schema["$ref"];
    const std::string prefix = "#/definitions/";
    if (ref.rfind(prefix, 0) != 0) return at + ": unsupported $ref " + ref;
    return schema_violation(root.at("definitions").at(ref.substr(prefix.size())), v, root, at);
  }
  if (schema.contains("type")) {
    auto matches = [&](const std::string& t) {
      if (t == "object") return v.is_object();
      if (t == "array") return v.is_array();
      if (t == "string") return v.is_string();
      if (t == "integer") return v.is_number_integer();
      if (t == "number") return v.is_number();
      if (t == "boolean") return v.is_boolean();
      if (t == "null") return v.is_null();
      return false;
    };
    bool ok = false;
    if (schema["type"].is_array()) {
      for (const auto& t : schema["type"]) ok = ok || matches(t.get<std::string>());
    } else {
      ok = matches(schema["type"].get<std::string>());
    }
    if (!ok) return at + ": expected type " + schema["type"].dump() + ", got " + v.dump();
  }
  if (schema.contains("enum")) {
    bool found = false;
    for (const auto& e : schema["enum"]) found = found || e == v;
    if (!found) return at + ": " + v.dump() + " not in " + schema["enum"].dump();
  }
  if (v.is_number()) {
    if (schema.contains("minimum") && v.get<double>() < schema["minimum"].get<double>()) return at + ": below minimum";
    if (schema.contains("maximum") && v.get<double>() > schema["maximum"].get<double>()) return at + ": above maximum";
  }
  if (v.is_object()) {
    for (const auto& r : schema.value("required", nlohmann::json::array()))
      if (!v.contains(r.get<std::string>())) return at + ": missing required property " + r.get<std::string>();
    const auto props = schema.value("properties", nlohmann::json::object());
    for (const auto& [k, sub] : v.items()) {
      if (props.contains(k)) {
        if (auto e = schema_violation(props[k], sub, root, at + "." + k); !e.empty()) return e;
      } else if (schema.contains("additionalProperties")) {
        const auto& ap = schema["additionalProperties"];
        if (ap.is_boolean() && !ap.get<bool>()) return at + ": unexpected property " + k;
        if (ap.is_object())
          if (auto e = schema_violation(ap, sub, root, at + "." + k); !e.empty()) return e;
      }
    }
  }
  if (v.is_array()) {
    if (schema.contains("minItems") && v.size() < schema["minItems"].get<std::size_t>()) return at + ": too few items";
    if (schema.contains("items"))
      for (std::size_t i = 0; i < v.size(); ++i)
        if (auto e = schema_violation(schema["items"], v[i], root, at + "[" + std::to_string(i) + "]"); !e.empty()) return e;
  }
  return {};
}

inline std::string schema_violation(const nlohmann::json& schema, const nlohmann::json& v) {
  return schema_violation(schema, v, schema);
}

}  // namespace exagree::testing
