#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <thread>

#include <httplib.h>

#include "dialogkit/app/http.hpp"
#include "dialogkit/app/service.hpp"
#include "dialogkit/app/store.hpp"
#include "doctest.h"

using namespace dialogkit;
using namespace dialogkit::app;
using json = nlohmann::json;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("dialogkit_app_" + name);
  std::filesystem::remove_all(p);
  return p;
}

std::shared_ptr<LoadedModel> tiny_generator(std::uint64_t seed = 1) {
  auto m = std::make_shared<LoadedModel>();
  m->kind = ModelKind::kGenerator;
  m->config.name = "tiny";
  m->config.vocab = m->vocab.size();
  m->config.d = 8;
  m->config.heads = 2;
  m->config.enc_layers = 1;
  m->config.dec_layers = 1;
  m->generator.emplace(model::Seq2Seq::initialize(m->config, seed));
  return m;
}

ChatModel chat_model(const std::string& tag, std::shared_ptr<LoadedModel> gen) {
  ChatModel cm;
  cm.tag = tag;
  cm.generator = std::move(gen);
  cm.decode.method = decoding::Method::kGreedy;
  cm.decode.min_length = 5;
  cm.decode.max_length = 12;
  return cm;
}

ServiceConfig service_config() {
  ServiceConfig c;
  c.personas = {{"i like to ski .", "i have a dog ."}, {"i am a chef .", "i live in paris ."}};
  c.topics = {"Skiing", "Paris", "Dogs"};
  c.seed = 5;
  return c;
}

// Lines in the store file.
std::vector<json> store_lines(const Store& s) {
  std::ifstream in(s.path());
  std::vector<json> out;
  std::string line;
  while (std::getline(in, line)) out.push_back(json::parse(line));
  return out;
}

}  // namespace

TEST_CASE("store appends gapless records and reopens them") {
  const auto dir = scratch("store");
  {
    Store s(dir);
    CHECK(s.size() == 0);
    const auto a = s.append(RecordType::kReport, {{"x", 1}});
    const auto b = s.append(RecordType::kEpisode, {{"y", "two"}});
    CHECK(a.seq == 1);
    CHECK(b.seq == 2);
    CHECK(b.id() == "episode-2");
    CHECK(s.find("episode-2")->payload["y"] == "two");
    CHECK_FALSE(s.find("report-2").has_value());
    CHECK_FALSE(s.find("nonsense").has_value());
  }
  {
    Store s(dir);
    REQUIRE(s.size() == 2);
    CHECK(s.snapshot()[1].payload["y"] == "two");
    CHECK(s.append(RecordType::kJudgment, json::object()).seq == 3);
    const auto lines = store_lines(s);
    REQUIRE(lines.size() == 3);
    CHECK(lines[2]["schema_version"] == 1);
    CHECK(lines[2]["type"] == "judgment");
  }
  // An interrupted append leaves a partial last line; it is dropped.
  { std::ofstream(dir / kStoreFile, std::ios::app) << R"({"seq":4,"type":"rep)"; }
  {
    Store s(dir);
    CHECK(s.size() == 3);
    CHECK(s.append(RecordType::kReport, json::object()).seq == 4);
    CHECK(store_lines(s).size() == 4);
  }
  // A gap is corruption.
  { std::ofstream(dir / kStoreFile, std::ios::app) << R"({"seq":9,"type":"report","schema_version":1,"payload":{}})" << "\n"; }
  CHECK_THROWS_AS(Store{dir}, StoreError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("store directory from the environment") {
  ::setenv(kStoreEnv, "/tmp/somewhere", 1);
  CHECK(Store::default_dir() == "/tmp/somewhere");
  ::unsetenv(kStoreEnv);
  CHECK(Store::default_dir("fallback") == "fallback");
}

TEST_CASE("concurrent appends stay gapless") {
  const auto dir = scratch("concurrent");
  Store s(dir);
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&s, t] {
      for (int i = 0; i < 50; ++i) s.append(RecordType::kReport, {{"t", t}, {"i", i}});
    });
  }
  for (auto& th : threads) th.join();
  const auto lines = store_lines(s);
  REQUIRE(lines.size() == 200);
  for (std::size_t i = 0; i < lines.size(); ++i) CHECK(lines[i]["seq"] == i + 1);
  std::filesystem::remove_all(dir);
}

TEST_CASE("model directory round trip") {
  const auto dir = scratch("modeldir");
  const auto m = tiny_generator(9);
  save_model_dir(dir, ModelKind::kGenerator, m->config, m->params(), m->vocab, {{"note", "x"}});
  const auto back = load_model_dir(dir);
  CHECK(back->kind == ModelKind::kGenerator);
  CHECK(back->meta["note"] == "x");
  CHECK(back->params().fingerprint() == m->params().fingerprint());
  CHECK(back->vocab.fingerprint() == m->vocab.fingerprint());
  // A vocabulary that does not belong to the weights is refused.
  std::ofstream(dir / "vocab.bpe") << bpe::train(std::vector<std::string>{"hello hello hello world"}, 262).serialize();
  CHECK_THROWS(load_model_dir(dir));
  std::filesystem::remove_all(dir);
}

TEST_CASE("sessions: explicit persona, random persona and topic frequency") {
  const auto dir = scratch("sessions");
  Store store(dir);
  Service svc(store, service_config());
  svc.add_model(chat_model("toy", tiny_generator()));

  const auto s = svc.create_session({{"model", "toy"}, {"persona", {"i collect stamps ."}}, {"topic", nullptr}});
  CHECK(s["persona"] == json({"i collect stamps ."}));
  CHECK(s["topic"].is_null());
  CHECK(s["schema_version"] == 1);
  CHECK_THROWS_AS(svc.create_session({{"model", "nope"}}), ApiError);
  try {
    svc.create_session({{"model", "nope"}});
  } catch (const ApiError& e) {
    CHECK(e.status() == 404);
  }

  std::size_t with_topic = 0;
  const std::size_t n = 3000;
  for (std::size_t i = 0; i < n; ++i) {
    const auto v = svc.create_session({{"model", "toy"}});
    with_topic += !v["topic"].is_null();
    const auto& pool = service_config().personas;
    CHECK(std::find(pool.begin(), pool.end(), v["persona"].get<std::vector<std::string>>()) != pool.end());
  }
  const double freq = static_cast<double>(with_topic) / n;
  MESSAGE("topic frequency " << freq);
  CHECK(std::abs(freq - 1.0 / 3.0) <= 0.03);
  std::filesystem::remove_all(dir);
}

TEST_CASE("messages: reply length, persistence, determinism and restart") {
  const auto dir = scratch("messages");
  json view;
  std::string sid;
  {
    Store store(dir);
    Service svc(store, service_config());
    svc.add_model(chat_model("toy", tiny_generator()));
    sid = svc.create_session({{"model", "toy"}, {"seed", 11}})["id"];
    const auto r = svc.post_message(sid, {{"text", "Hi!"}});
    CHECK(r["tokens"].get<std::size_t>() >= 5);
    CHECK_FALSE(r["reply"].get<std::string>().empty());
    CHECK(r["turn"] == 1);
    // The bot turn is in the store by the time the call returns.
    const auto last = store.snapshot().back();
    CHECK(last.payload["speaker"] == "bot");
    CHECK(last.payload["text"] == r["reply"]);
    svc.post_message(sid, {{"text", "tell me more"}});

    // Same seed and settings, same replies.
    const auto twin = svc.create_session({{"model", "toy"}, {"seed", 11}, {"persona", svc.get_session(sid)["persona"]},
                                          {"topic", svc.get_session(sid)["topic"]}});
    const auto r2 = svc.post_message(twin["id"], {{"text", "Hi!"}});
    CHECK(r2["reply"] == r["reply"]);
    CHECK_THROWS_AS(svc.post_message(sid, {{"text", ""}}), ApiError);
    CHECK_THROWS_AS(svc.post_message("chat_log-999", {{"text", "x"}}), ApiError);
    view = svc.get_session(sid);
    CHECK(view["turns"].size() == 4);
  }
  Store store(dir);
  Service again(store, service_config());
  CHECK(again.get_session(sid) == view);
  std::filesystem::remove_all(dir);
}

TEST_CASE("replies with a listed word are replaced and the flag recorded") {
  const auto dir = scratch("safety");
  std::string word;
  {
    Store store(dir);
    Service svc(store, service_config());
    svc.add_model(chat_model("toy", tiny_generator(3)));
    const auto sid = svc.create_session({{"model", "toy"}, {"seed", 2}, {"persona", json::array()}, {"topic", nullptr}})["id"];
    const auto reply = svc.post_message(sid, {{"text", "Hi!"}})["reply"].get<std::string>();
    const auto canned = safety::letter_words(safety::kDefaultCannedMessage);
    for (const auto& w : safety::letter_words(reply)) {
      if (std::find(canned.begin(), canned.end(), w) == canned.end()) word = w;
    }
    REQUIRE_FALSE(word.empty());
  }
  std::filesystem::remove_all(dir);
  Store store(dir);
  auto cfg = service_config();
  cfg.wordlist = safety::WordList({word});
  Service svc(store, cfg);
  svc.add_model(chat_model("toy", tiny_generator(3)));
  const auto sid = svc.create_session({{"model", "toy"}, {"seed", 2}, {"persona", json::array()}, {"topic", nullptr}})["id"];
  const auto r = svc.post_message(sid, {{"text", "Hi!"}});
  CHECK(r["flagged"] == true);
  CHECK(r["reply"] == std::string(safety::kDefaultCannedMessage));
  CHECK(r["safety"]["matched"].size() >= 1);
  const auto rec = store.snapshot().back().payload;
  CHECK(rec["flagged"] == true);
  CHECK(safety::wordlist_check(rec["original"].get<std::string>(), *cfg.wordlist).flagged);
  CHECK_FALSE(safety::wordlist_check(rec["text"].get<std::string>(), *cfg.wordlist).flagged);
  std::filesystem::remove_all(dir);
}

namespace {

// Service behind a live HTTP server on an ephemeral localhost port.
struct LiveServer {
  std::filesystem::path dir;
  Store store;
  Service service;
  httplib::Server server;
  std::thread thread;
  int port = 0;

  explicit LiveServer(const std::string& name)
      : dir(scratch(name)), store(dir), service(store, service_config()) {
    service.add_model(chat_model("toy", tiny_generator()));
    service.add_model(chat_model("other", tiny_generator(2)));
    install_routes(server, service);
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~LiveServer() {
    server.stop();
    thread.join();
    std::filesystem::remove_all(dir);
  }
};

struct Reply {
  int status = 0;
  json body;
};

Reply post(httplib::Client& c, const std::string& path, const json& body) {
  auto r = c.Post(("/api/v1" + path).c_str(), body.dump(), "application/json");
  REQUIRE(r);
  return {r->status, json::parse(r->body)};
}

Reply get(httplib::Client& c, const std::string& path) {
  auto r = c.Get(("/api/v1" + path).c_str());
  REQUIRE(r);
  return {r->status, json::parse(r->body)};
}

json self_chat_log(const std::string& model, const std::string& first) {
  eval::SelfChatLog log;
  log.model_a = log.model_b = model;
  log.turns = 2;
  log.seed_turns = 2;
  log.episode.turns = {{corpus::Speaker::kA, first, std::nullopt},
                       {corpus::Speaker::kB, "me too", std::nullopt}};
  return json::parse(log.to_json_line());
}

}  // namespace

TEST_CASE("http api: sessions, messages and logs") {
  LiveServer live("http_chat");
  httplib::Client c("127.0.0.1", live.port);
  auto h = get(c, "/health");
  CHECK(h.status == 200);
  CHECK(h.body["models"] == json({"other", "toy"}));

  auto s = post(c, "/sessions", {{"model", "toy"}, {"persona", {"i like cats ."}}});
  REQUIRE(s.status == 201);
  const std::string sid = s.body["id"];
  CHECK(post(c, "/sessions", {{"model", "ghost"}}).status == 404);
  CHECK(post(c, "/sessions", json::array()).status == 400);

  auto m = post(c, "/sessions/" + sid + "/messages", {{"text", "Hi!"}});
  REQUIRE(m.status == 200);
  CHECK(m.body["schema_version"] == 1);
  CHECK(m.body["flagged"] == false);
  CHECK(get(c, "/sessions/" + sid).body["turns"].size() == 2);
  CHECK(post(c, "/sessions/chat_log-4242/messages", {{"text", "x"}}).status == 404);
  auto bad = c.Post("/api/v1/sessions", "{not json", "application/json");
  CHECK(bad->status == 400);

  auto imp = post(c, "/logs/import", {{"log", self_chat_log("meena", "hello")}, {"source", "published"}});
  REQUIRE(imp.status == 201);
  CHECK(post(c, "/logs/import", {{"log", {{"bogus", 1}}}}).status == 400);
  auto logs = get(c, "/logs");
  REQUIRE(logs.body["logs"].size() == 2);
  CHECK(get(c, "/logs?type=self_chat_log").body["logs"][0]["imported"] == true);
  CHECK(get(c, "/logs/" + imp.body["id"].get<std::string>()).body["log"]["model_a"] == "meena");
  CHECK(get(c, "/logs?type=judgment").status == 400);
}

TEST_CASE("http api: acute tasks, judgments and results") {
  LiveServer live("http_acute");
  httplib::Client c("127.0.0.1", live.port);
  // A local chat log against an imported external one: no re-collection.
  const std::string sid = post(c, "/sessions", {{"model", "toy"}}).body["id"];
  post(c, "/sessions/" + sid + "/messages", {{"text", "Hi!"}});
  const std::string ext = post(c, "/logs/import", {{"log", self_chat_log("meena", "hello there")}}).body["id"];

  auto t = post(c, "/acute/tasks", {{"log_a", sid}, {"log_b", ext}, {"question", "engagingness"}});
  REQUIRE(t.status == 201);
  const std::string trial = t.body["trial"];
  CHECK(post(c, "/acute/tasks", {{"log_a", sid}, {"log_b", "chat_log-999"}}).status == 404);
  CHECK(post(c, "/acute/tasks", {{"log_a", sid}, {"log_b", ext}, {"question", "fun"}}).status == 400);
  auto t2 = post(c, "/acute/tasks", {{"log_a", sid}, {"log_b", ext}, {"question", "humanness"}});

  // Served payload: verbatim question, no model tags, side order per annotator.
  auto next = get(c, "/acute/next?annotator=ann1&question=engagingness");
  REQUIRE(next.status == 200);
  CHECK(next.body["trial"] == trial);
  CHECK(next.body["question"] == "Who would you prefer to talk to for a long conversation?");
  CHECK(next.body.dump().find("meena") == std::string::npos);
  CHECK(next.body.dump().find("\"toy\"") == std::string::npos);
  CHECK(get(c, "/acute/next?annotator=ann1&question=humanness").body["question"] ==
        "Which speaker sounds more human?");
  const bool swapped = Service::shown_swapped(trial, "ann1");
  CHECK(next.body["first"]["evaluated_speaker"] == (swapped ? "A" : "bot"));
  int swaps = 0;
  for (int i = 0; i < 40; ++i) swaps += Service::shown_swapped(trial, "a" + std::to_string(i));
  CHECK(swaps > 5);
  CHECK(swaps < 35);

  // Choosing the displayed first conversation maps back to the right log.
  auto j = post(c, "/acute/judgments",
                {{"trial", trial}, {"annotator", "ann1"}, {"choice", "first"}, {"justification", "warmer"}});
  REQUIRE(j.status == 201);
  CHECK(j.body["winner"] == (swapped ? "B" : "A"));
  CHECK(post(c, "/acute/judgments",
             {{"trial", trial}, {"annotator", "ann1"}, {"choice", "second"}, {"justification", "again"}})
            .status == 409);
  CHECK(post(c, "/acute/judgments", {{"trial", trial}, {"annotator", "ann2"}, {"choice", "first"}, {"justification", " "}})
            .status == 400);
  CHECK(post(c, "/acute/judgments", {{"trial", "acute_trial-99"}, {"annotator", "ann2"}, {"winner", "A"}, {"justification", "x"}})
            .status == 404);
  CHECK(get(c, "/acute/next?annotator=ann1&question=engagingness").body["done"] == true);

  auto before = get(c, "/acute/results").body["results"];
  std::size_t wins_before = 0;
  for (const auto& r : before) {
    if (r["question"] == "engagingness") wins_before = r["wins_a"];
  }
  post(c, "/acute/judgments", {{"trial", trial}, {"annotator", "ann3"}, {"winner", "A"}, {"justification", "fun"}});
  auto after = get(c, "/acute/results");
  REQUIRE(after.status == 200);
  json eng;
  for (const auto& r : after.body["results"]) {
    if (r["question"] == "engagingness") eng = r;
  }
  CHECK(eng["wins_a"] == wins_before + 1);
  CHECK(eng["model_a"] == "toy");
  CHECK(eng["model_b"] == "meena");

  // Flagged judgments stay stored but leave the aggregate.
  auto f = post(c, "/acute/flags", {{"judgment", j.body["judgment"]}, {"reason", "spam"}});
  CHECK(f.status == 201);
  for (const auto& r : get(c, "/acute/results").body["results"]) {
    if (r["question"] == "engagingness") {
      CHECK(r["judgments"] == 1);
      CHECK(r["excluded"] == 1);
    }
  }
  CHECK(t2.status == 201);
}
