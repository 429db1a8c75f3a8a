#include "exagree/elicitation.hpp"

#include <gtest/gtest.h>

#include <chrono>
#include <thread>

using namespace exagree;

namespace {

const std::vector<std::string> kNames = {"income", "age", "debt", "tenure"};

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

Ranking ref_order(std::vector<int> order) { return Ranking::from_order(order); }

/// Local HTTP server answering POST / with a fixed handler.
class FakeBackend {
 public:
  explicit FakeBackend(httplib::Server::Handler handler) {
    server_.Post("/", std::move(handler));
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeBackend() {
    server_.stop();
    thread_.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/"; }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

}  // namespace

// --- parsing --------------------------------------------------------------------

TEST(Parse, ChainAndSign) {
  const PreferenceProgram p = parse_preferences("income > age; sign(debt) = -", kNames);
  ASSERT_EQ(p.statements.size(), 2u);
  EXPECT_EQ(std::get<RankChain>(p.statements[0]).features, (std::vector<int>{0, 1}));
  const auto& s = std::get<SignDecl>(p.statements[1]);
  EXPECT_EQ(s.feature, 2);
  EXPECT_EQ(s.sign, -1);
  EXPECT_EQ(p.source_text, "income > age; sign(debt) = -");
}

TEST(Parse, FullRank) {
  const std::vector<std::string> names = {"gauss_0", "gauss_1", "gauss_2"};
  const PreferenceProgram p = parse_preferences("rank: gauss_0, gauss_1, gauss_2", names);
  ASSERT_EQ(p.statements.size(), 1u);
  EXPECT_EQ(std::get<FullRank>(p.statements[0]).features, (std::vector<int>{0, 1, 2}));
}

TEST(Parse, NewlinesCaseAndWhitespace) {
  const PreferenceProgram p = parse_preferences("  INCOME>Age>debt\n\n SIGN( Tenure )=+ ;", kNames);
  ASSERT_EQ(p.statements.size(), 2u);
  EXPECT_EQ(std::get<RankChain>(p.statements[0]).features, (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(std::get<SignDecl>(p.statements[1]).sign, 1);
  EXPECT_TRUE(parse_preferences("", kNames).statements.empty());
  EXPECT_TRUE(parse_preferences(" ;\n; ", kNames).statements.empty());
}

TEST(Parse, UnknownNameSuggestsTheClosest) {
  const std::vector<std::string> names = {"income", "age"};
  const std::string msg = error_of([&] { parse_preferences("income > incom", names); });
  EXPECT_NE(msg.find("unknown feature 'incom'"), std::string::npos) << msg;
  EXPECT_NE(msg.find("did you mean 'income'"), std::string::npos) << msg;
  EXPECT_NE(msg.find("column 10"), std::string::npos) << msg;
}

TEST(Parse, SyntaxErrorsReportPositions) {
  const std::string lone = error_of([] { parse_preferences("income", kNames); });
  EXPECT_NE(lone.find("syntax error"), std::string::npos) << lone;

  const std::string msg = error_of([] { parse_preferences("income > age\nsign(debt) = *", kNames); });
  EXPECT_NE(msg.find("line 2, column 14"), std::string::npos) << msg;
  EXPECT_NE(msg.find("expected '+' or '-'"), std::string::npos) << msg;

  EXPECT_NE(error_of([] { parse_preferences("income > > age", kNames); }).find("expected a feature name"), std::string::npos);
  EXPECT_NE(error_of([] { parse_preferences("rank: income, age extra", kNames); }).find("syntax error"), std::string::npos);
  EXPECT_NE(error_of([] { parse_preferences("sign(debt = +", kNames); }).find("expected ')'"), std::string::npos);
}

TEST(Parse, SemanticErrors) {
  EXPECT_NE(error_of([] { parse_preferences("sign(debt) = +; sign(debt) = -", kNames); }).find("contradictory signs"),
            std::string::npos);
  EXPECT_NO_THROW(parse_preferences("sign(debt) = +; sign(DEBT) = +", kNames));
  EXPECT_NE(error_of([] { parse_preferences("rank: income, age, income", kNames); }).find("listed twice"), std::string::npos);
  EXPECT_NE(error_of([] { parse_preferences("rank: income; rank: age", kNames); }).find("only one rank"), std::string::npos);
}

// --- compilation ----------------------------------------------------------------

TEST(Compile, FullRankIsTakenVerbatim) {
  const auto t = compile_target(parse_preferences("rank: debt, tenure, income, age", kNames), Ranking::identity(4));
  EXPECT_EQ(t.ranking.order(), (std::vector<int>{2, 3, 0, 1}));
  EXPECT_EQ(t.signs, (std::vector<int>{0, 0, 0, 0}));
  EXPECT_EQ(t.source, TargetSource::dsl);
}

TEST(Compile, SingleChainMergesWithReference) {
  const std::vector<std::string> names = {"f1", "f2", "f3"};
  const auto t = compile_target(parse_preferences("f3 > f1", names), Ranking::identity(3));
  EXPECT_EQ(t.ranking.order(), (std::vector<int>{2, 0, 1}));
}

TEST(Compile, ChainsRespectEveryEdge) {
  // Reference: tenure, debt, age, income.
  const Ranking ref = ref_order({3, 2, 1, 0});
  const auto t = compile_target(parse_preferences("income > debt; age > debt\nsign(age) = -", kNames), ref);
  const auto& r = t.ranking.ranks;
  EXPECT_LT(r[0], r[2]);
  EXPECT_LT(r[1], r[2]);
  // Ready features come out in reference order: age before income.
  EXPECT_EQ(t.ranking.order(), (std::vector<int>{1, 0, 2, 3}));
  EXPECT_EQ(t.signs, (std::vector<int>{0, -1, 0, 0}));
}

TEST(Compile, PartialRankFillsTheTop) {
  const auto t = compile_target(parse_preferences("rank: age", kNames), ref_order({3, 2, 1, 0}));
  EXPECT_EQ(t.ranking.order(), (std::vector<int>{1, 3, 2, 0}));
}

TEST(Compile, CyclesAreRejected) {
  const std::string msg = error_of([] { compile_target(parse_preferences("income > age; age > income", kNames), Ranking::identity(4)); });
  EXPECT_NE(msg.find("cyclic preference"), std::string::npos) << msg;
  EXPECT_THROW(compile_target(parse_preferences("income > age > debt > income", kNames), Ranking::identity(4)), Error);
}

TEST(Compile, AlwaysAPermutationAndDeterministic) {
  Rng rng(1);
  const std::vector<std::string> names = {"a", "b", "c", "d", "e", "f"};
  std::uniform_int_distribution<int> pick(0, 5);
  for (int trial = 0; trial < 200; ++trial) {
    // Chains that only go "downhill" in a hidden order cannot form a cycle.
    std::vector<int> hidden = {0, 1, 2, 3, 4, 5};
    std::shuffle(hidden.begin(), hidden.end(), rng);
    std::string text;
    for (int s = 0; s < 3; ++s) {
      int i = pick(rng), j = pick(rng);
      if (i == j) continue;
      if (i > j) std::swap(i, j);
      text += names[static_cast<std::size_t>(hidden[static_cast<std::size_t>(i)])] + " > " +
              names[static_cast<std::size_t>(hidden[static_cast<std::size_t>(j)])] + "; ";
    }
    std::vector<int> ref = {0, 1, 2, 3, 4, 5};
    std::shuffle(ref.begin(), ref.end(), rng);
    const auto prog = parse_preferences(text, names);
    const auto t = compile_target(prog, Ranking::from_order(ref));
    EXPECT_TRUE(is_permutation(t.ranking.ranks)) << text;
    EXPECT_EQ(t.ranking, compile_target(parse_preferences(text, names), Ranking::from_order(ref)).ranking);
    for (const auto& st : prog.statements) {
      const auto& c = std::get<RankChain>(st);
      EXPECT_LT(t.ranking.ranks[static_cast<std::size_t>(c.features[0])], t.ranking.ranks[static_cast<std::size_t>(c.features[1])]) << text;
    }
  }
}

TEST(Compile, RenderRoundTrip) {
  const auto prog = parse_preferences("rank: tenure, income, debt, age; sign(income) = +; debt > age", kNames);
  const std::string text = render(prog, kNames);
  EXPECT_EQ(text, "rank: tenure, income, debt, age; sign(income) = +; debt > age");
  const auto once = compile_target(prog, Ranking::identity(4));
  const auto twice = compile_target(parse_preferences(render(parse_preferences(text, kNames), kNames), kNames), Ranking::identity(4));
  EXPECT_EQ(once.ranking, twice.ranking);
  EXPECT_EQ(once.signs, twice.signs);
}

// --- backends -------------------------------------------------------------------

TEST(Backend, StubMatchesTheParser) {
  StubBackend stub;
  for (const std::string text : {"income > age; sign(debt) = -", "rank: debt, age", "tenure > income > age\nsign(age) = +"}) {
    const auto via_stub = llm_elicit(text, kNames, stub);
    const auto direct = parse_preferences(text, kNames);
    EXPECT_EQ(render(via_stub, kNames), render(direct, kNames));
    EXPECT_EQ(via_stub.source_text, text);
  }
  EXPECT_THROW(llm_elicit("income > wealth", kNames, stub), Error);
}

TEST(Backend, ResponsesAreValidatedNotRepaired) {
  auto reply = [](nlohmann::json body) {
    return [body](const httplib::Request&, httplib::Response& res) { res.set_content(body.dump(), "application/json"); };
  };
  {
    FakeBackend fake(reply({{"statements", {{{"kind", "chain"}, {"features", {"income", "wealth"}}}}}}));
    HttpBackend http(fake.url(), "", 2000, 0);
    const std::string msg = error_of([&] { llm_elicit("anything", kNames, http); });
    EXPECT_NE(msg.find("backend output failed validation"), std::string::npos) << msg;
    EXPECT_NE(msg.find("wealth"), std::string::npos) << msg;
  }
  {
    FakeBackend fake(reply({{"statements", {{{"kind", "sign"}, {"feature", "debt"}, {"sign", "?"}}}}}));
    HttpBackend http(fake.url(), "", 2000, 0);
    EXPECT_THROW(llm_elicit("anything", kNames, http), Error);
  }
  {
    FakeBackend fake(reply({{"nothing", 1}}));
    HttpBackend http(fake.url(), "", 2000, 0);
    EXPECT_THROW(llm_elicit("anything", kNames, http), Error);
  }
}

TEST(Backend, HttpRequestShapeAndSuccess) {
  nlohmann::json seen;
  std::string auth;
  FakeBackend fake([&](const httplib::Request& req, httplib::Response& res) {
    seen = nlohmann::json::parse(req.body);
    auth = req.get_header_value("Authorization");
    res.set_content(R"({"statements":[{"kind":"chain","features":["debt","Income"]},{"kind":"sign","feature":"age","sign":"-"}]})",
                    "application/json");
  });
  HttpBackend http(fake.url(), "secret", 2000, 0);
  const auto prog = llm_elicit("debt matters more than income, and age hurts", kNames, http);
  EXPECT_EQ(seen["text"], "debt matters more than income, and age hurts");
  EXPECT_EQ(seen["feature_names"], nlohmann::json(kNames));
  EXPECT_EQ(auth, "Bearer secret");
  EXPECT_EQ(render(prog, kNames), "debt > income; sign(age) = -");
  EXPECT_EQ(prog.source_text, "debt matters more than income, and age hurts");
}

TEST(Backend, UnreachableReportsRetryCount) {
  // Grab a free port, then close it so nothing is listening.
  int port = 0;
  {
    httplib::Server s;
    port = s.bind_to_any_port("127.0.0.1");
  }
  HttpBackend http("http://127.0.0.1:" + std::to_string(port) + "/", "", 300, 2);
  try {
    http.complete("income > age", kNames);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::internal);
    EXPECT_NE(std::string(e.what()).find("after 3 attempts"), std::string::npos) << e.what();
  }
}

TEST(Backend, SlowBackendTimesOut) {
  int calls = 0;
  FakeBackend fake([&](const httplib::Request&, httplib::Response& res) {
    ++calls;
    std::this_thread::sleep_for(std::chrono::milliseconds(600));
    res.set_content("{}", "application/json");
  });
  HttpBackend http(fake.url(), "", 150, 1);
  const std::string msg = error_of([&] { http.complete("income > age", kNames); });
  EXPECT_NE(msg.find("after 2 attempts"), std::string::npos) << msg;
  EXPECT_THROW(HttpBackend("http://x", "", 0), Error);
}

TEST(Backend, ServerErrorsAreRetried) {
  int calls = 0;
  FakeBackend fake([&](const httplib::Request&, httplib::Response& res) {
    ++calls;
    res.status = 503;
  });
  HttpBackend http(fake.url(), "", 2000, 2);
  const std::string msg = error_of([&] { http.complete("x", kNames); });
  EXPECT_EQ(calls, 3);
  EXPECT_NE(msg.find("HTTP 503"), std::string::npos) << msg;
}

TEST(Backend, EnvironmentSelectsTheBackend) {
  ::unsetenv("EXAGREE_LLM_ENDPOINT");
  EXPECT_EQ(backend_from_env()->name(), "stub");
  ::setenv("EXAGREE_LLM_ENDPOINT", "http://127.0.0.1:9/", 1);
  EXPECT_EQ(backend_from_env()->name(), "http");
  ::unsetenv("EXAGREE_LLM_ENDPOINT");
}
