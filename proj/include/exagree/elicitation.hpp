#pragma once

// Stakeholder preference elicitation.
//
// Grammar (statements separated by newlines or ';', names case-insensitive):
//
//   statement ::= chain | sign | rank
//   chain     ::= NAME (">" NAME)+
//   sign      ::= "sign(" NAME ")" "=" ("+" | "-")
//   rank      ::= "rank:" NAME ("," NAME)*
//
// A natural-language backend may stand in for the parser; whatever it
// returns goes through the same name resolution and is rejected if invalid.

#include "exagree/core.hpp"
#include "exagree/saem.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <cctype>
#include <cstdlib>
#include <memory>
#include <queue>
#include <variant>

namespace exagree {

struct RankChain {
  std::vector<int> features;  // strictly descending importance
};

struct SignDecl {
  int feature;
  int sign;  // -1 or +1
};

struct FullRank {
  std::vector<int> features;
};

using Statement = std::variant<RankChain, SignDecl, FullRank>;

struct PreferenceProgram {
  std::vector<Statement> statements;
  std::string source_text;
};

namespace detail {

inline std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), std::size_t{0});
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

struct Position {
  std::size_t line = 1;
  std::size_t column = 1;
};

inline Position locate(std::string_view text, std::size_t offset) {
  Position pos;
  for (std::size_t i = 0; i < offset && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++pos.line;
      pos.column = 1;
    } else {
      ++pos.column;
    }
  }
  return pos;
}

class NameResolver {
 public:
  explicit NameResolver(const std::vector<std::string>& names) : names_(names) {
    for (std::size_t i = 0; i < names.size(); ++i) lowered_.push_back(lower(names[i]));
  }

  /// Index of `name`, or an error naming the closest feature.
  int resolve(std::string_view name, const std::string& where) const {
    const std::string key = lower(name);
    for (std::size_t i = 0; i < lowered_.size(); ++i)
      if (lowered_[i] == key) return static_cast<int>(i);
    std::string msg = "unknown feature '" + std::string(name) + "'" + where;
    if (!names_.empty()) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < names_.size(); ++i)
        if (edit_distance(key, lowered_[i]) < edit_distance(key, lowered_[best])) best = i;
      msg += "; did you mean '" + names_[best] + "'?";
    }
    fail(msg);
  }

  const std::vector<std::string>& names() const { return names_; }

 private:
  std::vector<std::string> names_;
  std::vector<std::string> lowered_;
};

inline bool is_name_char(char c) {
  return !std::isspace(static_cast<unsigned char>(c)) && c != ',' && c != ';' && c != '>' && c != '(' && c != ')' && c != '=' && c != ':';
}

/// Cursor over one statement, reporting positions relative to the full text.
class Cursor {
 public:
  Cursor(std::string_view full, std::size_t begin, std::size_t end) : full_(full), pos_(begin), end_(end) {}

  void skip_ws() {
    while (pos_ < end_ && std::isspace(static_cast<unsigned char>(full_[pos_]))) ++pos_;
  }
  bool done() {
    skip_ws();
    return pos_ >= end_;
  }
  bool accept(std::string_view lit) {
    skip_ws();
    if (end_ - pos_ >= lit.size() && lower(full_.substr(pos_, lit.size())) == lit) {
      pos_ += lit.size();
      return true;
    }
    return false;
  }
  void expect(std::string_view lit) {
    if (!accept(lit)) error("expected '" + std::string(lit) + "'");
  }
  std::string_view name() {
    skip_ws();
    const std::size_t start = pos_;
    while (pos_ < end_ && is_name_char(full_[pos_])) ++pos_;
    if (pos_ == start) error("expected a feature name");
    last_name_ = start;
    return full_.substr(start, pos_ - start);
  }
  std::size_t offset() const { return pos_; }
  std::string where(std::size_t offset) const {
    const auto p = locate(full_, offset);
    return " at line " + std::to_string(p.line) + ", column " + std::to_string(p.column);
  }
  std::string last_name_where() const { return where(last_name_); }

  [[noreturn]] void error(const std::string& what) const {
    fail("syntax error" + where(std::min(pos_, end_)) + ": " + what);
  }

 private:
  std::string_view full_;
  std::size_t pos_;
  std::size_t end_;
  std::size_t last_name_ = 0;
};

}  // namespace detail

inline PreferenceProgram parse_preferences(std::string_view text, const std::vector<std::string>& feature_names) {
  const detail::NameResolver resolver(feature_names);
  PreferenceProgram prog;
  prog.source_text = std::string(text);
  std::vector<int> sign_of(feature_names.size(), 0);
  bool have_rank = false;

  std::size_t begin = 0;
  while (begin <= text.size()) {
    std::size_t end = text.find_first_of(";\n", begin);
    if (end == std::string_view::npos) end = text.size();
    detail::Cursor cur(text, begin, end);
    if (!cur.done()) {
      if (cur.accept("rank:")) {
        if (have_rank) cur.error("only one rank statement is allowed");
        have_rank = true;
        FullRank fr;
        std::vector<bool> seen(feature_names.size(), false);
        do {
          const auto nm = cur.name();
          const int f = resolver.resolve(nm, cur.last_name_where());
          if (seen[static_cast<std::size_t>(f)]) fail("feature '" + feature_names[static_cast<std::size_t>(f)] + "' listed twice in rank statement" + cur.last_name_where());
          seen[static_cast<std::size_t>(f)] = true;
          fr.features.push_back(f);
        } while (cur.accept(","));
        if (!cur.done()) cur.error("unexpected text after rank list");
        prog.statements.emplace_back(std::move(fr));
      } else if (cur.accept("sign(")) {
        const auto nm = cur.name();
        const int f = resolver.resolve(nm, cur.last_name_where());
        cur.expect(")");
        cur.expect("=");
        int s = 0;
        if (cur.accept("+")) s = 1;
        else if (cur.accept("-")) s = -1;
        else cur.error("expected '+' or '-'");
        if (!cur.done()) cur.error("unexpected text after sign declaration");
        auto& prev = sign_of[static_cast<std::size_t>(f)];
        if (prev != 0 && prev != s) fail("contradictory signs declared for '" + feature_names[static_cast<std::size_t>(f)] + "'");
        prev = s;
        prog.statements.emplace_back(SignDecl{f, s});
      } else {
        RankChain chain;
        const auto nm = cur.name();
        chain.features.push_back(resolver.resolve(nm, cur.last_name_where()));
        if (cur.done()) cur.error("expected '>' after feature name");
        while (!cur.done()) {
          cur.expect(">");
          const auto next = cur.name();
          chain.features.push_back(resolver.resolve(next, cur.last_name_where()));
        }
        prog.statements.emplace_back(std::move(chain));
      }
    }
    if (end == text.size()) break;
    begin = end + 1;
  }
  return prog;
}

/// Turns a program into a full target ranking. A rank statement wins;
/// otherwise chain-constrained features come first in topological order
/// (ties by reference rank), then unconstrained features in reference order.
inline StakeholderTarget compile_target(const PreferenceProgram& prog, const Ranking& reference) {
  const std::size_t p = reference.size();
  require_permutation(reference, "reference ranking");
  StakeholderTarget t;
  t.source = TargetSource::dsl;
  t.text = prog.source_text;
  t.signs.assign(p, 0);

  const FullRank* full = nullptr;
  std::vector<std::vector<int>> succ(p);
  std::vector<int> indeg(p, 0);
  std::vector<bool> constrained(p, false);
  std::set<std::pair<int, int>> edges;
  for (const auto& st : prog.statements) {
    if (const auto* s = std::get_if<SignDecl>(&st)) {
      require(static_cast<std::size_t>(s->feature) < p, "sign statement references an unknown feature");
      t.signs[static_cast<std::size_t>(s->feature)] = s->sign;
    } else if (const auto* f = std::get_if<FullRank>(&st)) {
      full = f;
    } else if (const auto* c = std::get_if<RankChain>(&st)) {
      for (std::size_t i = 0; i < c->features.size(); ++i) {
        require(static_cast<std::size_t>(c->features[i]) < p, "chain references an unknown feature");
        constrained[static_cast<std::size_t>(c->features[i])] = true;
        if (i + 1 < c->features.size() && edges.emplace(c->features[i], c->features[i + 1]).second) {
          succ[static_cast<std::size_t>(c->features[i])].push_back(c->features[i + 1]);
          ++indeg[static_cast<std::size_t>(c->features[i + 1])];
        }
      }
    }
  }

  const std::vector<int> ref_order = reference.order();
  std::vector<int> order;
  std::vector<bool> placed(p, false);
  if (full) {
    for (int f : full->features) {
      require(static_cast<std::size_t>(f) < p && !placed[static_cast<std::size_t>(f)], "rank statement is not a list of distinct features");
      order.push_back(f);
      placed[static_cast<std::size_t>(f)] = true;
    }
  } else {
    using Item = std::pair<int, int>;  // (reference rank, feature)
    std::priority_queue<Item, std::vector<Item>, std::greater<>> ready;
    std::size_t n_constrained = 0;
    for (std::size_t f = 0; f < p; ++f) {
      if (!constrained[f]) continue;
      ++n_constrained;
      if (indeg[f] == 0) ready.emplace(reference.ranks[f], static_cast<int>(f));
    }
    while (!ready.empty()) {
      const int f = ready.top().second;
      ready.pop();
      order.push_back(f);
      placed[static_cast<std::size_t>(f)] = true;
      for (int g : succ[static_cast<std::size_t>(f)])
        if (--indeg[static_cast<std::size_t>(g)] == 0) ready.emplace(reference.ranks[static_cast<std::size_t>(g)], g);
    }
    if (order.size() != n_constrained) fail("cyclic preference: chain constraints contradict each other");
  }
  for (int f : ref_order)
    if (!placed[static_cast<std::size_t>(f)]) order.push_back(f);
  t.ranking = Ranking::from_order(order);
  return t;
}

/// DSL text that parses back to an equivalent program.
inline std::string render(const PreferenceProgram& prog, const std::vector<std::string>& names) {
  std::string out;
  for (const auto& st : prog.statements) {
    if (!out.empty()) out += "; ";
    std::visit(
        [&](const auto& s) {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, RankChain>) {
            for (std::size_t i = 0; i < s.features.size(); ++i) out += (i ? " > " : "") + names.at(static_cast<std::size_t>(s.features[i]));
          } else if constexpr (std::is_same_v<T, SignDecl>) {
            out += "sign(" + names.at(static_cast<std::size_t>(s.feature)) + ") = " + (s.sign > 0 ? "+" : "-");
          } else {
            out += "rank: ";
            for (std::size_t i = 0; i < s.features.size(); ++i) out += (i ? ", " : "") + names.at(static_cast<std::size_t>(s.features[i]));
          }
        },
        st);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backend wire format: {"text", "feature_names"} -> {"statements": [...]} where
// each statement is {"kind": "chain"|"rank", "features": [names]} or
// {"kind": "sign", "feature": name, "sign": "+"|"-"}.

inline nlohmann::json program_to_json(const PreferenceProgram& prog, const std::vector<std::string>& names) {
  nlohmann::json statements = nlohmann::json::array();
  for (const auto& st : prog.statements) {
    std::visit(
        [&](const auto& s) {
          using T = std::decay_t<decltype(s)>;
          auto named = [&](const std::vector<int>& fs) {
            std::vector<std::string> out;
            for (int f : fs) out.push_back(names.at(static_cast<std::size_t>(f)));
            return out;
          };
          if constexpr (std::is_same_v<T, RankChain>) statements.push_back({{"kind", "chain"}, {"features", named(s.features)}});
          else if constexpr (std::is_same_v<T, FullRank>) statements.push_back({{"kind", "rank"}, {"features", named(s.features)}});
          else statements.push_back({{"kind", "sign"}, {"feature", names.at(static_cast<std::size_t>(s.feature))}, {"sign", s.sign > 0 ? "+" : "-"}});
        },
        st);
  }
  return {{"statements", statements}};
}

/// Validates a backend response by rendering it to DSL and parsing it, so it
/// passes exactly the checks typed preferences do.
inline PreferenceProgram program_from_json(const nlohmann::json& j, const std::vector<std::string>& names,
                                           const std::string& source_text) {
  require(j.is_object() && j.contains("statements") && j["statements"].is_array(), "backend response lacks a statements array");
  std::string dsl;
  for (const auto& st : j["statements"]) {
    require(st.is_object() && st.contains("kind"), "backend statement lacks a kind");
    const auto kind = st["kind"].get<std::string>();
    if (!dsl.empty()) dsl += "\n";
    if (kind == "chain" || kind == "rank") {
      const auto fs = st.at("features").get<std::vector<std::string>>();
      require(!fs.empty(), "backend statement has no features");
      std::string body;
      for (std::size_t i = 0; i < fs.size(); ++i) body += (i ? (kind == "chain" ? " > " : ", ") : "") + fs[i];
      dsl += (kind == "rank" ? "rank: " : "") + body;
    } else if (kind == "sign") {
      const auto sign = st.at("sign").get<std::string>();
      require(sign == "+" || sign == "-", "backend sign must be '+' or '-'");
      dsl += "sign(" + st.at("feature").get<std::string>() + ") = " + sign;
    } else {
      fail("backend statement has unknown kind '" + kind + "'");
    }
  }
  try {
    PreferenceProgram prog = parse_preferences(dsl, names);
    prog.source_text = source_text;
    return prog;
  } catch (const Error& e) {
    fail(std::string("backend output failed validation: ") + e.what());
  }
}

class PreferenceBackend {
 public:
  virtual ~PreferenceBackend() = default;
  /// Returns the backend's {"statements": [...]} document.
  virtual nlohmann::json complete(const std::string& text, const std::vector<std::string>& feature_names) = 0;
  virtual std::string name() const = 0;
};

/// Treats the text as DSL.
class StubBackend final : public PreferenceBackend {
 public:
  nlohmann::json complete(const std::string& text, const std::vector<std::string>& names) override {
    return program_to_json(parse_preferences(text, names), names);
  }
  std::string name() const override { return "stub"; }
};

/// POSTs {text, feature_names} as JSON to an HTTP endpoint.
class HttpBackend final : public PreferenceBackend {
 public:
  HttpBackend(std::string endpoint, std::string key, int timeout_ms, int retries = 2)
      : endpoint_(std::move(endpoint)), key_(std::move(key)), timeout_ms_(timeout_ms), retries_(retries) {
    require(timeout_ms_ > 0, "backend timeout must be positive");
  }

  nlohmann::json complete(const std::string& text, const std::vector<std::string>& names) override {
    const auto scheme_end = endpoint_.find("://");
    require(scheme_end != std::string::npos, "backend endpoint must be an absolute URL");
    const auto path_start = endpoint_.find('/', scheme_end + 3);
    const std::string host = endpoint_.substr(0, path_start);
    const std::string path = path_start == std::string::npos ? "/" : endpoint_.substr(path_start);
    httplib::Client cli(host);
    const auto sec = timeout_ms_ / 1000;
    const auto usec = (timeout_ms_ % 1000) * 1000;
    cli.set_connection_timeout(sec, usec);
    cli.set_read_timeout(sec, usec);
    cli.set_write_timeout(sec, usec);
    httplib::Headers headers;
    if (!key_.empty()) headers.emplace("Authorization", "Bearer " + key_);
    const std::string body = nlohmann::json{{"text", text}, {"feature_names", names}}.dump();
    std::string last_error;
    const int attempts = retries_ + 1;
    for (int a = 0; a < attempts; ++a) {
      auto res = cli.Post(path, headers, body, "application/json");
      if (!res) {
        last_error = httplib::to_string(res.error());
        continue;
      }
      if (res->status != 200) {
        last_error = "HTTP " + std::to_string(res->status);
        continue;
      }
      try {
        return nlohmann::json::parse(res->body);
      } catch (const nlohmann::json::exception&) {
        fail("backend returned malformed JSON");
      }
    }
    fail("preference backend unreachable or timed out after " + std::to_string(attempts) + " attempts (" + last_error + ")",
         ErrorKind::internal);
  }

  std::string name() const override { return "http"; }

 private:
  std::string endpoint_;
  std::string key_;
  int timeout_ms_;
  int retries_;
};

/// EXAGREE_LLM_ENDPOINT selects the HTTP backend; otherwise the stub.
inline std::unique_ptr<PreferenceBackend> backend_from_env() {
  const char* endpoint = std::getenv("EXAGREE_LLM_ENDPOINT");
  if (!endpoint || !*endpoint) return std::make_unique<StubBackend>();
  const char* key = std::getenv("EXAGREE_LLM_KEY");
  const char* timeout = std::getenv("EXAGREE_LLM_TIMEOUT_MS");
  return std::make_unique<HttpBackend>(endpoint, key ? key : "", timeout ? std::atoi(timeout) : 10000);
}

inline PreferenceProgram llm_elicit(const std::string& text, const std::vector<std::string>& names, PreferenceBackend& backend) {
  return program_from_json(backend.complete(text, names), names, text);
}

}  // namespace exagree
