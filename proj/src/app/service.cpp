#include "dialogkit/app/service.hpp"

#include <algorithm>

#include "dialogkit/corpus.hpp"
#include "dialogkit/rng.hpp"

namespace dialogkit::app {

using json = nlohmann::json;

struct Service::ModelSlot {
  ChatModel model;
  std::unique_ptr<decoding::TransformerLM> lm;
};

struct Service::Session {
  struct TurnRec {
    bool bot = false;
    std::string text;
    bool flagged = false;
  };
  std::string id;
  std::string model;
  std::vector<std::string> persona;
  std::optional<std::string> topic;
  std::uint64_t seed = 0;
  json decode;
  std::string created_at;
  std::vector<TurnRec> turns;
  mutable std::mutex mu;
};

namespace {

json versioned(json j) {
  j["schema_version"] = kSchemaVersion;
  return j;
}

const std::string& require_string(const json& req, const char* key) {
  if (!req.is_object() || !req.contains(key) || !req[key].is_string()) {
    throw ApiError(400, std::string("missing string field '") + key + "'");
  }
  return req[key].get_ref<const std::string&>();
}

corpus::DialogueEpisode episode_of(const std::vector<std::string>& persona,
                                   const std::optional<std::string>& topic) {
  corpus::DialogueEpisode ep;
  ep.persona_b = persona;  // the bot answers as speaker B
  ep.topic = topic;
  ep.source_tag = "live_chat";
  return ep;
}

}  // namespace

Service::Service(Store& store, ServiceConfig config) : store_(store), config_(std::move(config)) {
  restore();
}

Service::~Service() = default;

void Service::add_model(ChatModel model) {
  if (!model.generator || !model.generator->generator) {
    throw std::invalid_argument("model '" + model.tag + "' has no generator");
  }
  model.decode.validate();
  const auto& vocab = model.generator->vocab;
  if (vocab_ && vocab_->fingerprint() != vocab.fingerprint()) {
    throw std::invalid_argument("model '" + model.tag + "' uses a different vocabulary");
  }
  for (const auto* other : {model.retriever.get(), model.gate.get(), config_.safety_classifier.get()}) {
    if (other && other->vocab.fingerprint() != vocab.fingerprint()) {
      throw std::invalid_argument("model '" + model.tag + "': companion model vocabulary differs");
    }
  }
  if (model.refine == retrieval::RefineMode::kDialogue && (!model.retriever || !model.candidates)) {
    throw std::invalid_argument("dialogue refine needs a retriever and candidates");
  }
  if (model.refine == retrieval::RefineMode::kKnowledge && (!model.retriever || !model.index)) {
    throw std::invalid_argument("knowledge refine needs a retriever and an index");
  }
  if (model.candidates && model.retriever) {
    model.candidates->encodings(*model.retriever->retriever);  // warm the cache before serving
  }
  if (!vocab_) {
    vocab_ = vocab;
    gate_ = std::make_unique<safety::SafetyGate>(
        config_.wordlist ? &*config_.wordlist : nullptr,
        config_.safety_classifier ? &*config_.safety_classifier->classifier : nullptr, *vocab_,
        config_.canned_message);
  }
  auto slot = std::make_unique<ModelSlot>();
  slot->lm = std::make_unique<decoding::TransformerLM>(*model.generator->generator);
  slot->model = std::move(model);
  const std::string tag = slot->model.tag;
  models_[tag] = std::move(slot);
}

std::vector<std::string> Service::model_tags() const {
  std::vector<std::string> out;
  for (const auto& [tag, _] : models_) out.push_back(tag);
  return out;
}

json Service::health() const {
  return versioned({{"status", "ok"}, {"models", model_tags()}, {"records", store_.size()}});
}

void Service::restore() {
  for (const auto& r : store_.of_type(RecordType::kChatLog)) {
    const auto& p = r.payload;
    const std::string event = p.value("event", "");
    if (event == "session") {
      auto s = std::make_unique<Session>();
      s->id = r.id();
      s->model = p.at("model").get<std::string>();
      s->persona = p.at("persona").get<std::vector<std::string>>();
      if (!p.at("topic").is_null()) s->topic = p.at("topic").get<std::string>();
      s->seed = p.at("seed").get<std::uint64_t>();
      s->decode = p.at("decode");
      s->created_at = p.value("created_at", "");
      sessions_[s->id] = std::move(s);
    } else if (event == "turn") {
      auto it = sessions_.find(p.at("session").get<std::string>());
      if (it == sessions_.end()) throw StoreError("turn record for unknown session in " + r.id());
      auto& turns = it->second->turns;
      if (p.at("index").get<std::size_t>() != turns.size()) {
        throw StoreError("turn records out of order in " + r.id());
      }
      turns.push_back({p.at("speaker") == "bot", p.at("text").get<std::string>(),
                       p.value("flagged", false)});
    }
  }
}

Service::Session& Service::session(const std::string& id) const {
  std::lock_guard lock(sessions_mu_);
  const auto it = sessions_.find(id);
  if (it == sessions_.end()) throw ApiError(404, "no session '" + id + "'");
  return *it->second;
}

json Service::session_view(const Session& s) const {
  json turns = json::array();
  for (std::size_t i = 0; i < s.turns.size(); ++i) {
    turns.push_back({{"index", i},
                     {"speaker", s.turns[i].bot ? "bot" : "human"},
                     {"text", s.turns[i].text},
                     {"flagged", s.turns[i].flagged}});
  }
  return versioned({{"id", s.id},
                    {"model", s.model},
                    {"persona", s.persona},
                    {"topic", s.topic ? json(*s.topic) : json(nullptr)},
                    {"seed", s.seed},
                    {"decode", s.decode},
                    {"created_at", s.created_at},
                    {"turns", turns}});
}

json Service::create_session(const json& req) {
  if (!req.is_object()) throw ApiError(400, "request must be a JSON object");
  const std::string tag = require_string(req, "model");
  const auto mit = models_.find(tag);
  if (mit == models_.end()) throw ApiError(404, "unknown model '" + tag + "'");

  std::lock_guard create_lock(create_mu_);
  Rng rng(mix_seed(config_.seed, store_.size()));
  std::vector<std::string> persona;
  if (req.contains("persona")) {
    if (!req["persona"].is_array()) throw ApiError(400, "persona must be a list of lines");
    for (const auto& line : req["persona"]) {
      if (!line.is_string()) throw ApiError(400, "persona must be a list of lines");
      persona.push_back(line.get<std::string>());
    }
  } else if (!config_.personas.empty()) {
    persona = config_.personas[rng.below(config_.personas.size())];
  }
  std::optional<std::string> topic;
  if (req.contains("topic")) {
    if (req["topic"].is_string()) {
      topic = req["topic"].get<std::string>();
    } else if (!req["topic"].is_null()) {
      throw ApiError(400, "topic must be a string or null");
    }
  } else if (!config_.topics.empty() && rng.bernoulli(config_.topic_probability)) {
    topic = config_.topics[rng.below(config_.topics.size())];
  }
  std::uint64_t seed = rng.next_u64() >> 11;  // stays exact in JSON doubles
  if (req.contains("seed")) {
    if (!req["seed"].is_number_integer() || req["seed"].get<std::int64_t>() < 0) throw ApiError(400, "seed must be a non-negative integer");
    seed = req["seed"].get<std::uint64_t>();
  }
  json decode = json::parse(mit->second->model.decode.to_json());
  if (req.contains("decode")) {
    if (!req["decode"].is_object()) throw ApiError(400, "decode must be an object");
    decode.merge_patch(req["decode"]);
    try {
      decode = json::parse(decoding::DecodeConfig::from_json(decode.dump()).to_json());
    } catch (const std::exception& e) {
      throw ApiError(400, std::string("bad decode config: ") + e.what());
    }
  }

  auto s = std::make_unique<Session>();
  s->model = tag;
  s->persona = std::move(persona);
  s->topic = std::move(topic);
  s->seed = seed;
  s->decode = decode;
  s->created_at = utc_timestamp();
  // Held across the append so a listed session record always has its view.
  std::lock_guard lock(sessions_mu_);
  const auto rec = store_.append(RecordType::kChatLog,
                                 {{"event", "session"},
                                  {"model", s->model},
                                  {"persona", s->persona},
                                  {"topic", s->topic ? json(*s->topic) : json(nullptr)},
                                  {"seed", s->seed},
                                  {"decode", s->decode},
                                  {"created_at", s->created_at}});
  s->id = rec.id();
  json view = session_view(*s);
  sessions_[s->id] = std::move(s);
  return view;
}

json Service::get_session(const std::string& id) const {
  auto& s = session(id);
  std::lock_guard lock(s.mu);
  return session_view(s);
}

json Service::post_message(const std::string& id, const json& req) {
  auto& s = session(id);
  const std::string text = require_string(req, "text");
  if (text.empty()) throw ApiError(400, "empty message");
  const auto mit = models_.find(s.model);
  if (mit == models_.end()) throw ApiError(409, "model '" + s.model + "' is not loaded");
  const ModelSlot& slot = *mit->second;
  const auto& vocab = slot.model.generator->vocab;

  std::lock_guard lock(s.mu);
  const std::size_t human_index = s.turns.size();
  store_.append(RecordType::kChatLog, {{"event", "turn"},
                                       {"session", s.id},
                                       {"index", human_index},
                                       {"speaker", "human"},
                                       {"text", text}});
  s.turns.push_back({false, text, false});

  auto ep = episode_of(s.persona, s.topic);
  for (const auto& t : s.turns) {
    ep.turns.push_back({t.bot ? corpus::Speaker::kB : corpus::Speaker::kA, t.text, std::nullopt});
  }
  const auto ctx = corpus::assemble_context(ep, ep.turns.size(), vocab);
  auto cfg = decoding::DecodeConfig::from_json(s.decode.dump());
  cfg.seed = mix_seed(s.seed, human_index + 1);

  json retrieval_info = nullptr;
  decoding::DecodeResult decoded;
  if (slot.model.refine == retrieval::RefineMode::kNone) {
    decoded = decoding::decode(*slot.lm, ctx.ids, cfg);
  } else {
    retrieval::RefineConfig rcfg;
    rcfg.mode = slot.model.refine;
    rcfg.decode = cfg;
    retrieval::RefineResources res;
    res.retriever = slot.model.retriever ? &*slot.model.retriever->retriever : nullptr;
    res.store = slot.model.candidates.get();
    res.index = slot.model.index.get();
    res.gate = slot.model.gate ? &*slot.model.gate->classifier : nullptr;
    res.vocab = &vocab;
    const std::string query = (s.topic ? *s.topic + " " : std::string()) + text;
    auto r = retrieval::retrieve_and_refine(*slot.lm, ctx.ids, query, rcfg, res);
    decoded = std::move(r.decoded);
    retrieval_info = {{"mode", retrieval::refine_mode_name(rcfg.mode)},
                      {"gate_open", r.gate_open},
                      {"conditioned", r.conditioned},
                      {"failed", r.retrieval_failed},
                      {"conditioning", r.conditioning}};
  }
  const std::string reply = bpe::to_valid_utf8(vocab.decode(decoded.tokens));
  const auto g = gate_->apply(ctx.ids, reply);
  const json safety_info = {{"wordlist", g.by_wordlist},
                            {"classifier", g.by_classifier},
                            {"matched", g.matched}};
  json rec = {{"event", "turn"},       {"session", s.id},   {"index", human_index + 1},
              {"speaker", "bot"},      {"text", g.text},    {"flagged", g.flagged},
              {"safety", safety_info}, {"tokens", decoded.tokens.size()},
              {"retrieval", retrieval_info}};
  if (g.flagged) rec["original"] = g.original;
  // Persisted before the reply leaves the service.
  store_.append(RecordType::kChatLog, rec);
  s.turns.push_back({true, g.text, g.flagged});
  return versioned({{"session", s.id},
                    {"turn", human_index + 1},
                    {"reply", g.text},
                    {"flagged", g.flagged},
                    {"safety", safety_info},
                    {"tokens", decoded.tokens.size()},
                    {"retrieval", retrieval_info}});
}

json Service::log_turns(const Record& r) const {
  json turns = json::array();
  if (r.type == RecordType::kChatLog) {
    auto& s = session(r.id());
    std::lock_guard lock(s.mu);
    for (const auto& t : s.turns) turns.push_back({{"speaker", t.bot ? "bot" : "human"}, {"text", t.text}});
    return {{"turns", turns}, {"evaluated_speaker", "bot"}};
  }
  const auto log = eval::SelfChatLog::from_json_line(r.payload.at("log").dump());
  for (const auto& t : log.episode.turns) {
    turns.push_back({{"speaker", t.speaker == corpus::Speaker::kA ? "A" : "B"}, {"text", t.text}});
  }
  return {{"turns", turns}, {"evaluated_speaker", "A"}};
}

json Service::list_logs(const std::string& type) const {
  if (!type.empty() && type != "chat_log" && type != "self_chat_log") {
    throw ApiError(400, "type must be chat_log or self_chat_log");
  }
  json out = json::array();
  for (const auto& r : store_.snapshot()) {
    if (r.type == RecordType::kChatLog && r.payload.value("event", "") == "session" &&
        (type.empty() || type == "chat_log")) {
      auto& s = session(r.id());
      std::lock_guard lock(s.mu);
      out.push_back({{"id", r.id()}, {"type", "chat_log"}, {"model", s.model}, {"turns", s.turns.size()}});
    } else if (r.type == RecordType::kSelfChatLog && (type.empty() || type == "self_chat_log")) {
      const auto& log = r.payload.at("log");
      out.push_back({{"id", r.id()},
                     {"type", "self_chat_log"},
                     {"model", log.at("model_a")},
                     {"model_b", log.at("model_b")},
                     {"turns", log.at("episode").at("turns").size()},
                     {"imported", r.payload.value("imported", false)}});
    }
  }
  return versioned({{"logs", out}});
}

json Service::get_log(const std::string& id) const {
  const auto r = store_.find(id);
  if (!r || (r->type != RecordType::kSelfChatLog &&
             !(r->type == RecordType::kChatLog && r->payload.value("event", "") == "session"))) {
    throw ApiError(404, "no log '" + id + "'");
  }
  if (r->type == RecordType::kChatLog) return get_session(id);
  return versioned({{"id", id}, {"log", r->payload.at("log")}, {"imported", r->payload.value("imported", false)}});
}

json Service::import_log(const json& req) {
  if (!req.is_object()) throw ApiError(400, "request must be a JSON object");
  const json log = req.contains("log") ? req["log"] : req;
  try {
    (void)eval::SelfChatLog::from_json_line(log.dump());
  } catch (const std::exception& e) {
    throw ApiError(400, std::string("not a self-chat log: ") + e.what());
  }
  const auto rec = store_.append(RecordType::kSelfChatLog, {{"log", log},
                                                            {"imported", req.value("imported", true)},
                                                            {"source", req.value("source", "external")}});
  return versioned({{"id", rec.id()}});
}

// ---------------------------------------------------------------------------
// ACUTE-Eval

bool Service::shown_swapped(const std::string& trial, const std::string& annotator) {
  return (mix_seed(fnv1a(trial), fnv1a(annotator)) & 1u) != 0;
}

std::vector<eval::AcuteTrial> Service::acute_trials() const {
  std::vector<eval::AcuteTrial> trials;
  std::map<std::string, std::size_t> at;
  std::map<std::string, std::pair<std::size_t, std::size_t>> judgment_pos;
  for (const auto& r : store_.snapshot()) {
    const auto& p = r.payload;
    if (r.type == RecordType::kAcuteTrial) {
      at[r.id()] = trials.size();
      trials.push_back({r.id(), p.at("model_a"), p.at("model_b"), p.at("log_a"), p.at("log_b"),
                        eval::parse_question(p.at("question").get<std::string>()), {}});
    } else if (r.type == RecordType::kJudgment) {
      if (p.value("event", "") == "judgment") {
        const auto ti = at.at(p.at("trial").get<std::string>());
        eval::Judgment j;
        j.annotator = p.at("annotator");
        j.winner = p.at("winner") == "A" ? eval::LogSide::kA : eval::LogSide::kB;
        j.justification = p.at("justification");
        j.shown_swapped = p.at("shown_swapped");
        judgment_pos[r.id()] = {ti, trials[ti].judgments.size()};
        trials[ti].judgments.push_back(std::move(j));
      } else if (p.value("event", "") == "flag") {
        const auto [ti, ji] = judgment_pos.at(p.at("judgment").get<std::string>());
        trials[ti].judgments[ji].flagged = true;
      }
    }
  }
  return trials;
}

json Service::create_acute_task(const json& req) {
  const std::string log_a = require_string(req, "log_a"), log_b = require_string(req, "log_b");
  const std::string qname = req.value("question", "engagingness");
  eval::Question q;
  try {
    q = eval::parse_question(qname);
  } catch (const std::exception&) {
    throw ApiError(400, "unknown question '" + qname + "'");
  }
  auto model_of = [&](const std::string& id) -> std::string {
    const auto r = store_.find(id);
    if (r && r->type == RecordType::kSelfChatLog) return r->payload.at("log").at("model_a");
    if (r && r->type == RecordType::kChatLog && r->payload.value("event", "") == "session") {
      return r->payload.at("model");
    }
    throw ApiError(404, "no log '" + id + "'");
  };
  const std::string ma = model_of(log_a), mb = model_of(log_b);
  if (log_a == log_b) throw ApiError(400, "a trial needs two different logs");
  const auto rec = store_.append(RecordType::kAcuteTrial,
                                 {{"log_a", log_a},
                                  {"log_b", log_b},
                                  {"model_a", req.value("model_a", ma)},
                                  {"model_b", req.value("model_b", mb)},
                                  {"question", eval::question(q).id}});
  return versioned({{"trial", rec.id()}});
}

json Service::next_acute_pair(const std::string& annotator, const std::string& question) const {
  if (annotator.empty()) throw ApiError(400, "annotator required");
  std::optional<eval::Question> q;
  if (!question.empty()) {
    try {
      q = eval::parse_question(question);
    } catch (const std::exception&) {
      throw ApiError(400, "unknown question '" + question + "'");
    }
  }
  const eval::AcuteTrial* best = nullptr;
  std::size_t best_count = 0;
  const auto trials = acute_trials();
  for (const auto& t : trials) {
    if (q && t.question != *q) continue;
    std::size_t usable = 0;
    bool mine = false;
    for (const auto& j : t.judgments) {
      usable += !j.flagged;
      mine = mine || j.annotator == annotator;
    }
    if (mine) continue;
    if (!best || usable < best_count) {
      best = &t;
      best_count = usable;
    }
  }
  if (!best) return versioned({{"done", true}});
  const bool swapped = shown_swapped(best->id, annotator);
  const auto a = log_turns(*store_.find(best->log_a)), b = log_turns(*store_.find(best->log_b));
  const auto& eq = eval::question(best->question);
  return versioned({{"done", false},
                    {"trial", best->id},
                    {"question_id", eq.id},
                    {"question", eq.phrasing},
                    {"first", swapped ? b : a},
                    {"second", swapped ? a : b}});
}

json Service::submit_judgment(const json& req) {
  const std::string trial = require_string(req, "trial");
  const std::string annotator = require_string(req, "annotator");
  const std::string justification = req.value("justification", "");
  if (annotator.empty()) throw ApiError(400, "annotator required");
  if (justification.find_first_not_of(" \t\r\n") == std::string::npos) {
    throw ApiError(400, "a justification is required");
  }
  const bool swapped = shown_swapped(trial, annotator);
  eval::LogSide winner;
  if (req.contains("choice")) {
    const auto c = req["choice"];
    if (c != "first" && c != "second") throw ApiError(400, "choice must be 'first' or 'second'");
    winner = eval::winner_from_display(c == "first", swapped);
  } else if (req.contains("winner")) {
    const auto w = req["winner"];
    if (w != "A" && w != "B") throw ApiError(400, "winner must be 'A' or 'B'");
    winner = w == "A" ? eval::LogSide::kA : eval::LogSide::kB;
  } else {
    throw ApiError(400, "choice or winner required");
  }
  std::lock_guard lock(acute_mu_);
  const auto r = store_.find(trial);
  if (!r || r->type != RecordType::kAcuteTrial) throw ApiError(404, "no trial '" + trial + "'");
  for (const auto& j : store_.of_type(RecordType::kJudgment)) {
    if (j.payload.value("event", "") == "judgment" && j.payload.at("trial") == trial &&
        j.payload.at("annotator") == annotator) {
      throw ApiError(409, "annotator '" + annotator + "' already judged " + trial);
    }
  }
  const auto rec = store_.append(RecordType::kJudgment,
                                 {{"event", "judgment"},
                                  {"trial", trial},
                                  {"annotator", annotator},
                                  {"winner", winner == eval::LogSide::kA ? "A" : "B"},
                                  {"justification", justification},
                                  {"shown_swapped", swapped}});
  return versioned({{"judgment", rec.id()}, {"winner", winner == eval::LogSide::kA ? "A" : "B"}});
}

json Service::flag_judgment(const json& req) {
  const std::string id = require_string(req, "judgment");
  std::lock_guard lock(acute_mu_);
  const auto r = store_.find(id);
  if (!r || r->type != RecordType::kJudgment || r->payload.value("event", "") != "judgment") {
    throw ApiError(404, "no judgment '" + id + "'");
  }
  const auto rec = store_.append(RecordType::kJudgment,
                                 {{"event", "flag"}, {"judgment", id}, {"reason", req.value("reason", "")}});
  return versioned({{"flag", rec.id()}});
}

json Service::acute_results() const {
  const auto trials = acute_trials();
  const auto res = eval::acute_aggregate(trials);
  json rows = json::array();
  for (const auto& r : res) {
    rows.push_back({{"model_a", r.model_a},
                    {"model_b", r.model_b},
                    {"question", eval::question(r.question).id},
                    {"judgments", r.judgments},
                    {"wins_a", r.wins_a},
                    {"excluded", r.excluded},
                    {"win_rate_a", r.win_rate_a},
                    {"p_value", r.p_value},
                    {"stars", r.stars}});
  }
  return versioned({{"results", rows}, {"table", eval::render_acute(res)}});
}

}  // namespace dialogkit::app
