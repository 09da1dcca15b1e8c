#include "dialogkit/app/commands.hpp"

#include <httplib.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "dialogkit/app/http.hpp"
#include "dialogkit/app/model_dir.hpp"
#include "dialogkit/app/store.hpp"
#include "dialogkit/checkpoint.hpp"
#include "dialogkit/objectives.hpp"
#include "dialogkit/retrieval.hpp"
#include "dialogkit/safety.hpp"
#include "dialogkit/synth.hpp"
#include "dialogkit/train.hpp"

#ifndef DIALOGKIT_VERSION
#define DIALOGKIT_VERSION "0.0.0"
#endif
#ifndef DIALOGKIT_GIT_REVISION
#define DIALOGKIT_GIT_REVISION "unknown"
#endif

namespace dialogkit::app {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct CommandInfo {
  const char* name;
  const char* summary;
  json (*defaults)();
  json (*run)(const json&, std::ostream&);
  // Where the run-metadata record goes; empty means the store only.
  fs::path (*metadata_path)(const json&);
};

fs::path in_out_dir(const json& s) { return fs::path(s.at("out").get<std::string>()) / "run.json"; }
fs::path beside_out(const json& s) { return s.at("out").get<std::string>() + ".run.json"; }
fs::path store_only(const json&) { return {}; }

// ---------------------------------------------------------------------------
// Defaults

json synth_defaults() {
  return {{"out", "data"},
          {"seed", 1},
          {"wiki_articles", 200},
          {"personas", 300},
          {"chats_train", 600},
          {"chats_valid", 100},
          {"chain_length", 60},
          {"memorizable_train", 400},
          {"memorizable_valid", 40},
          {"memorizable_max_turns", 5},
          {"ul_train", 400},
          {"ul_valid", 200},
          {"ul_share", 0.6},
          {"safety_examples", 600},
          {"vocab_size", 2000}};
}

json training_defaults() {
  return {{"train", "data/memorizable_train.jsonl"},
          {"valid", "data/memorizable_valid.jsonl"},
          {"out", "runs/generator"},
          {"epochs", 15},
          {"batch_size", 16},
          {"lr", 2e-3},
          {"warmup", 50},
          {"time_budget", 280.0},
          {"seed", 7},
          {"min_history", 1}};
}

json train_defaults() {
  json d = training_defaults();
  d.update({{"kind", "generator"},
            {"vocab", "data/vocab.bpe"},
            {"model", "toy-90M-analog"},
            {"d", 0},
            {"heads", 0},
            {"enc_layers", 0},
            {"dec_layers", 0},
            {"codes", 16},
            {"balance_seed", 6}});
  return d;
}

json finetune_defaults() {
  json d = training_defaults();
  d.update({{"init", "runs/generator"},
            {"out", "runs/finetuned"},
            {"objective", "ul"},
            {"epochs", 8},
            {"lr", 5e-4},
            {"warmup", 10},
            {"seed", 3},
            {"alpha_mix", objectives::kDefaultAlphaMix},
            {"ul_n", 3},
            {"ul_max_length", 32},
            {"refine", "dialogue"},
            {"alpha_blend", 0.5},
            {"retriever", nullptr},
            {"candidates", nullptr}});
  return d;
}

json selfchat_defaults() {
  return {{"model", "runs/generator"},
          {"model_b", nullptr},
          {"tag", nullptr},
          {"tag_b", nullptr},
          {"pairs", 100},
          {"turns", eval::kSelfChatTurns},
          {"seed", 1},
          {"seeds", "data/chats_valid.jsonl"},
          {"seed_turns", 2},
          {"decode", json::object()},
          {"decode_b", nullptr},
          {"verify", true},
          {"out", "runs/selfchat.jsonl"}};
}

json eval_defaults() {
  return {{"metric", "ppl"},
          {"model", nullptr},
          {"data", "data/memorizable_valid.jsonl"},
          {"min_history", 1},
          {"k", 20},
          {"seed", 0},
          {"pool", nullptr},
          {"logs", nullptr},
          {"n", 3},
          {"top", 10},
          {"vocab", "data/vocab.bpe"},
          {"store", nullptr},
          {"out", "reports/eval.json"}};
}

json index_defaults() { return {{"docs", "data/wiki"}, {"out", "runs/wiki_index.json"}}; }

json service_defaults() {
  return {{"store", nullptr},
          {"personas", "data/personas.txt"},
          {"topics", "data/topics.txt"},
          {"topic_probability", 1.0 / 3.0},
          {"wordlist", "data/safety_words.txt"},
          {"safety", nullptr},
          {"canned_message", std::string(safety::kDefaultCannedMessage)},
          {"seed", 0},
          {"decode", json::object()}};
}

json chat_defaults() {
  json d = service_defaults();
  d.update({{"model", "runs/generator"},
            {"persona", nullptr},
            {"topic", nullptr},
            {"session_seed", nullptr},
            {"input", nullptr},
            {"max_turns", 0}});
  return d;
}

json serve_defaults() {
  json d = service_defaults();
  d.update({{"models", json::array({"runs/generator"})}, {"host", "127.0.0.1"}, {"port", 8080}});
  return d;
}

json acute_export_defaults() {
  return {{"store", nullptr},
          {"logs_a", nullptr},
          {"logs_b", nullptr},
          {"source_b", "external"},
          {"questions", json::array({"engagingness", "humanness"})},
          {"pairs", 0},
          {"out", "reports/acute"}};
}

// ---------------------------------------------------------------------------
// Small helpers

std::string str(const json& s, const char* key) { return s.at(key).get<std::string>(); }
std::size_t count(const json& s, const char* key) {
  const auto& v = s.at(key);
  if (v.is_number_integer() && v.get<std::int64_t>() < 0) {
    throw ConfigError(std::string("'") + key + "' must not be negative");
  }
  return v.get<std::size_t>();
}
double num(const json& s, const char* key) { return s.at(key).get<double>(); }
std::uint64_t u64(const json& s, const char* key) { return static_cast<std::uint64_t>(count(s, key)); }

void require_file(const json& s, const char* key) {
  const auto p = str(s, key);
  if (!fs::exists(p)) throw ConfigError(std::string("'") + key + "': no such file " + p);
}

std::string optional_str(const json& s, const char* key) {
  const auto& v = s.at(key);
  if (v.is_null()) return {};
  if (!v.is_string()) throw ConfigError(std::string("'") + key + "' must be a string");
  return v.get<std::string>();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  nn::write_file_atomic(path, text);
}

decoding::DecodeConfig decode_from(const json& patch) {
  json d = json::parse(decoding::DecodeConfig{}.to_json());
  if (!patch.is_null()) {
    if (!patch.is_object()) throw ConfigError("decode settings must be an object");
    d.merge_patch(patch);
  }
  try {
    auto cfg = decoding::DecodeConfig::from_json(d.dump());
    cfg.validate();
    return cfg;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("bad decode settings: ") + e.what());
  }
}

train::Options training_options(const json& s) {
  train::Options o;
  o.epochs = count(s, "epochs");
  o.batch_size = count(s, "batch_size");
  o.schedule = {num(s, "lr"), static_cast<std::int64_t>(count(s, "warmup"))};
  o.time_budget = num(s, "time_budget");
  o.seed = u64(s, "seed");
  try {
    o.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return o;
}

json history_json(const train::History& h) {
  json rows = json::array();
  for (const auto& e : h.epochs) {
    rows.push_back({{"epoch", e.epoch},
                    {"train_loss", e.train_loss},
                    {"valid_metric", std::isnan(e.valid_metric) ? json(nullptr) : json(e.valid_metric)},
                    {"seconds", e.seconds},
                    {"steps", e.steps},
                    {"rejected_steps", e.rejected_steps},
                    {"ul_candidates", e.ul_candidates}});
  }
  return {{"epochs", rows}, {"out_of_time", h.out_of_time}};
}

train::EpochCallback epoch_logger(std::ostream& log, const char* metric) {
  return [&log, metric](const train::EpochStats& e) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "epoch %zu  loss %.4f  %s %.4f  %.1fs", e.epoch, e.train_loss,
                  metric, e.valid_metric, e.seconds);
    log << buf << std::endl;
  };
}

std::vector<corpus::Example> load_examples(const std::string& path, const bpe::Vocab& vocab,
                                           std::size_t min_history) {
  const auto eps = corpus::read_episodes(path);
  return corpus::make_examples(eps, vocab, std::nullopt, min_history);
}

std::string dir_tag(const std::string& dir) {
  auto p = fs::path(dir).lexically_normal();
  if (p.filename().empty()) p = p.parent_path();
  return p.filename().string();
}

// Distinct labels of `examples` as a candidate pool with each example's gold.
std::vector<eval::RankingItem> ranking_items(std::span<const corpus::Example> examples,
                                             std::vector<std::string>& pool) {
  std::map<std::string, std::size_t> at;
  for (std::size_t i = 0; i < pool.size(); ++i) at.emplace(pool[i], i);
  std::vector<eval::RankingItem> items;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    auto [it, fresh] = at.emplace(examples[i].label_text, pool.size());
    if (fresh) pool.push_back(examples[i].label_text);
    items.push_back({examples[i].context, it->second, i});
  }
  return items;
}

double retriever_hits(const model::PolyEncoder& retriever, std::span<const corpus::Example> examples,
                      std::vector<std::string> pool, const bpe::Vocab& vocab, std::size_t k,
                      std::uint64_t seed) {
  const auto items = ranking_items(examples, pool);
  if (pool.size() < k) {
    throw std::invalid_argument("candidate pool of " + std::to_string(pool.size()) +
                                " is smaller than k=" + std::to_string(k));
  }
  std::vector<std::vector<double>> vecs;
  vecs.reserve(pool.size());
  for (const auto& p : pool) vecs.push_back(retriever.encode_candidate(bpe::truncate_label(vocab.encode(p))));
  return eval::hits_at_1(eval::polyencoder_scorer(retriever, vecs), items, pool.size(), k, seed);
}

// Positives are turns annotated with knowledge; negatives are drawn to the
// same count so accuracy is not carried by the majority class.
std::vector<train::LabeledInput> gate_data(const std::string& path, const bpe::Vocab& vocab,
                                           std::uint64_t seed) {
  const auto eps = corpus::read_episodes(path);
  const auto ex = corpus::make_examples(eps, vocab);
  std::vector<train::LabeledInput> pos, neg;
  for (const auto& x : ex) {
    const bool k = eps[x.episode].turns[x.turn].knowledge.has_value();
    (k ? pos : neg).push_back({x.context, k ? 1u : 0u});
  }
  Rng rng(seed);
  for (std::size_t i = neg.size(); i > 1; --i) std::swap(neg[i - 1], neg[rng.below(i)]);
  neg.resize(std::min(neg.size(), pos.size()));
  std::vector<train::LabeledInput> out;
  for (std::size_t i = 0; i < std::max(pos.size(), neg.size()); ++i) {
    if (i < pos.size()) out.push_back(pos[i]);
    if (i < neg.size()) out.push_back(neg[i]);
  }
  return out;
}

std::vector<train::LabeledInput> safety_data(const std::string& path, const bpe::Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<train::LabeledInput> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    out.push_back({safety::classifier_input(vocab.encode(j.at("context").get<std::string>()),
                                            vocab.encode(j.at("response").get<std::string>())),
                   j.at("unsafe").get<bool>() ? 1u : 0u});
  }
  return out;
}

std::vector<train::LabeledInput> length_data(const std::string& path, const bpe::Vocab& vocab,
                                             std::size_t min_history) {
  std::vector<train::LabeledInput> out;
  for (const auto& x : load_examples(path, vocab, min_history)) {
    out.push_back({x.context, model::length_bin(x.label.size())});
  }
  return out;
}

// ---------------------------------------------------------------------------
// synth

json run_synth(const json& s, std::ostream& log) {
  const fs::path out = str(s, "out");
  const auto seed = u64(s, "seed");
  const double share = num(s, "ul_share");
  if (share < 0.0 || share > 1.0) throw ConfigError("'ul_share' must lie in [0, 1]");
  if (count(s, "memorizable_max_turns") < 2) throw ConfigError("'memorizable_max_turns' must be at least 2");

  fs::create_directories(out / "wiki");
  const auto arts = synth::wiki_articles(count(s, "wiki_articles"), seed);
  for (std::size_t i = 0; i < arts.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%03zu.txt", i);
    write_text(out / "wiki" / name, arts[i].text());
  }
  std::string topics;
  for (const auto& a : arts) topics += a.title + "\n";
  write_text(out / "topics.txt", topics);

  const auto personas = synth::personas(count(s, "personas"), seed + 1);
  write_personas((out / "personas.txt").string(), personas);

  const std::size_t n_train = count(s, "chats_train");
  const auto chats = synth::persona_chats(personas, arts, n_train + count(s, "chats_valid"), seed + 2);
  const std::vector<corpus::DialogueEpisode> chats_train(chats.begin(), chats.begin() + n_train);
  const std::vector<corpus::DialogueEpisode> chats_valid(chats.begin() + n_train, chats.end());
  corpus::write_episodes((out / "chats_train.jsonl").string(), chats_train);
  corpus::write_episodes((out / "chats_valid.jsonl").string(), chats_valid);

  const auto chain = synth::memorizable_chain(count(s, "chain_length"), seed + 3);
  std::string chain_text;
  for (const auto& c : chain) chain_text += c + "\n";
  write_text(out / "memorizable_pool.txt", chain_text);
  const std::size_t max_turns = count(s, "memorizable_max_turns");
  const auto mem_train = synth::chain_episodes(chain, count(s, "memorizable_train"), 2, max_turns,
                                               seed + 9, "memorizable");
  const auto mem_valid = synth::chain_episodes(chain, count(s, "memorizable_valid"), 2, max_turns,
                                               seed + 10, "memorizable");
  corpus::write_episodes((out / "memorizable_train.jsonl").string(), mem_train);
  corpus::write_episodes((out / "memorizable_valid.jsonl").string(), mem_valid);

  const auto ul_train = synth::injected_ngram_episodes(count(s, "ul_train"), share, seed + 4);
  const auto ul_valid = synth::injected_ngram_episodes(count(s, "ul_valid"), share, seed + 5);
  corpus::write_episodes((out / "ul_train.jsonl").string(), ul_train);
  corpus::write_episodes((out / "ul_valid.jsonl").string(), ul_valid);

  const auto unsafe = synth::safety_examples(count(s, "safety_examples"), seed + 6);
  std::string safety_lines;
  for (const auto& e : unsafe) {
    safety_lines += json{{"context", e.context}, {"response", e.response}, {"unsafe", e.unsafe}}.dump() + "\n";
  }
  write_text(out / "safety.jsonl", safety_lines);
  std::string words = "# Placeholder terms; replace with an operator-supplied list.\n";
  for (const auto& w : synth::placeholder_unsafe_words()) words += w + "\n";
  write_text(out / "safety_words.txt", words);

  std::vector<std::string> text;
  for (const auto& a : arts) text.push_back(a.text());
  for (const auto& p : personas) text.insert(text.end(), p.begin(), p.end());
  for (const auto* set : {&chats, &mem_train, &ul_train}) {
    for (const auto& e : *set) {
      for (const auto& t : e.turns) text.push_back(t.text);
    }
  }
  for (const auto& c : chain) text.push_back(c);
  for (const auto& e : unsafe) {
    text.push_back(e.context);
    text.push_back(e.response);
  }
  log << "training a " << count(s, "vocab_size") << "-token vocabulary on " << text.size()
      << " texts" << std::endl;
  const auto vocab = bpe::train(text, count(s, "vocab_size"));
  write_text(out / "vocab.bpe", vocab.serialize());
  return {{"wiki_articles", arts.size()},
          {"personas", personas.size()},
          {"chats_train", chats_train.size()},
          {"chats_valid", chats_valid.size()},
          {"memorizable_train", mem_train.size()},
          {"memorizable_valid", mem_valid.size()},
          {"ul_train", ul_train.size()},
          {"ul_valid", ul_valid.size()},
          {"safety_examples", unsafe.size()},
          {"vocab_size", vocab.size()},
          {"vocab_fingerprint", vocab.fingerprint()}};
}

// ---------------------------------------------------------------------------
// train

json run_train(const json& s, std::ostream& log) {
  const auto kind = parse_model_kind(str(s, "kind"));
  auto cfg = model::TransformerConfig::preset(str(s, "model"));
  for (const char* key : {"d", "heads", "enc_layers", "dec_layers"}) {
    const auto v = count(s, key);
    if (v == 0) continue;
    if (std::string_view(key) == "d") cfg.d = v;
    if (std::string_view(key) == "heads") cfg.heads = v;
    if (std::string_view(key) == "enc_layers") cfg.enc_layers = v;
    if (std::string_view(key) == "dec_layers") cfg.dec_layers = v;
  }
  const auto opt = training_options(s);
  require_file(s, "vocab");
  require_file(s, "train");
  const std::string valid_path = optional_str(s, "valid");
  if (!valid_path.empty() && !fs::exists(valid_path)) throw ConfigError("'valid': no such file " + valid_path);

  const auto vocab = bpe::Vocab::deserialize(nn::read_file(str(s, "vocab")));
  cfg.vocab = vocab.size();
  try {
    cfg.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  const std::size_t min_history = count(s, "min_history");
  const auto seed = u64(s, "seed");
  json result = {{"kind", model_kind_name(kind)}, {"config", json::parse(cfg.to_json())}};

  if (kind == ModelKind::kGenerator) {
    const auto tr = load_examples(str(s, "train"), vocab, min_history);
    const auto va = valid_path.empty() ? std::vector<corpus::Example>{}
                                       : load_examples(valid_path, vocab, min_history);
    auto m = model::Seq2Seq::initialize(cfg, seed);
    log << "generator: " << tr.size() << " train / " << va.size() << " valid examples" << std::endl;
    if (!va.empty()) result["initial_valid_ppl"] = eval::perplexity(m, va);
    const auto h = train::train_generator(m, tr, va, opt, {}, epoch_logger(log, "valid ppl"));
    result["history"] = history_json(h);
    // Measured on the saved weights, so `eval --metric ppl` reproduces it.
    if (!va.empty()) result["valid_ppl"] = eval::perplexity(m, va);
    save_model_dir(str(s, "out"), kind, cfg, m.params(), vocab, result);
    return result;
  }
  if (kind == ModelKind::kRetriever) {
    const auto tr = load_examples(str(s, "train"), vocab, min_history);
    const auto va = valid_path.empty() ? std::vector<corpus::Example>{}
                                       : load_examples(valid_path, vocab, min_history);
    auto m = model::PolyEncoder::initialize(cfg, count(s, "codes"), seed);
    log << "retriever: " << tr.size() << " train / " << va.size() << " valid examples" << std::endl;
    const auto h = train::train_retriever(m, tr, va, opt, epoch_logger(log, "valid loss"));
    result["history"] = history_json(h);
    std::vector<std::string> pool;
    std::size_t distinct = 0;
    {
      std::vector<std::string> labels;
      for (const auto& x : va) labels.push_back(x.label_text);
      std::sort(labels.begin(), labels.end());
      distinct = static_cast<std::size_t>(std::unique(labels.begin(), labels.end()) - labels.begin());
    }
    if (distinct >= 20) result["valid_hits_at_1_of_20"] = retriever_hits(m, va, pool, vocab, 20, 0);
    save_model_dir(str(s, "out"), kind, cfg, m.params(), vocab, result, m.codes());
    return result;
  }

  std::vector<train::LabeledInput> tr, va;
  auto load = [&](const std::string& path) {
    switch (kind) {
      case ModelKind::kGate:
        return gate_data(path, vocab, u64(s, "balance_seed"));
      case ModelKind::kSafety:
        return safety_data(path, vocab);
      default:
        return length_data(path, vocab, min_history);
    }
  };
  tr = load(str(s, "train"));
  if (!valid_path.empty()) va = load(valid_path);
  auto m = model::Classifier::initialize(cfg, classifier_classes(kind), seed);
  log << model_kind_name(kind) << " classifier: " << tr.size() << " train / " << va.size()
      << " valid inputs" << std::endl;
  const auto h = train::train_classifier(m, tr, va, opt, epoch_logger(log, "valid accuracy"));
  result["history"] = history_json(h);
  if (!va.empty()) result["valid_accuracy"] = train::accuracy(m, va);
  save_model_dir(str(s, "out"), kind, cfg, m.params(), vocab, result);
  return result;
}

// ---------------------------------------------------------------------------
// finetune

json run_finetune(const json& s, std::ostream& log) {
  const std::string objective = str(s, "objective");
  if (objective != "ul" && objective != "retnref") throw ConfigError("'objective' must be ul or retnref");
  const auto opt = training_options(s);
  const auto refine = retrieval::parse_refine_mode(str(s, "refine"));
  if (objective == "retnref" && refine == retrieval::RefineMode::kNone) {
    throw ConfigError("retnref fine-tuning needs refine = dialogue or knowledge");
  }
  const std::string retriever_dir = optional_str(s, "retriever");
  if (objective == "retnref" && refine == retrieval::RefineMode::kDialogue && retriever_dir.empty()) {
    throw ConfigError("dialogue retnref fine-tuning needs 'retriever'");
  }
  objectives::BlendConfig blend;
  blend.alpha_blend = num(s, "alpha_blend");
  try {
    blend.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  require_file(s, "train");
  if (!fs::exists(fs::path(str(s, "init")) / "model.json")) {
    throw ConfigError("'init': no model directory at " + str(s, "init"));
  }

  auto init = load_model_dir(str(s, "init"), true);
  if (init->kind != ModelKind::kGenerator) throw ConfigError("'init' must be a generator");
  auto& m = *init->generator;
  const auto& vocab = init->vocab;
  const std::size_t min_history = count(s, "min_history");
  auto tr_eps = corpus::read_episodes(str(s, "train"));
  auto tr = corpus::make_examples(tr_eps, vocab, std::nullopt, min_history);
  const std::string valid_path = optional_str(s, "valid");
  std::vector<corpus::DialogueEpisode> va_eps;
  if (!valid_path.empty()) va_eps = corpus::read_episodes(valid_path);
  auto va = corpus::make_examples(va_eps, vocab, std::nullopt, min_history);
  json result = {{"objective", objective}, {"init", str(s, "init")}};
  result["initial_valid_ppl"] = va.empty() ? json(nullptr) : json(eval::perplexity(m, va));

  train::UnlikelihoodOptions ul;
  train::ContextFn context_fn;
  if (objective == "ul") {
    ul.alpha_mix = num(s, "alpha_mix");
    ul.n = count(s, "ul_n");
    ul.max_length = count(s, "ul_max_length");
    result["alpha_mix"] = ul.alpha_mix;
  } else if (refine == retrieval::RefineMode::kDialogue) {
    const auto ret = load_model_dir(retriever_dir);
    if (ret->kind != ModelKind::kRetriever) throw ConfigError("'retriever' must be a retriever");
    if (ret->vocab.fingerprint() != vocab.fingerprint()) throw ConfigError("retriever vocabulary differs");
    const std::string cand_path = s.at("candidates").is_null() ? str(s, "train") : str(s, "candidates");
    std::vector<std::string> texts;
    for (const auto& e : corpus::read_episodes(cand_path)) {
      for (const auto& t : e.turns) texts.push_back(t.text);
    }
    auto store = retrieval::CandidateStore::from_texts(texts, vocab);
    const auto& vecs = store.encodings(*ret->retriever);
    // The best candidate other than the gold response itself; alpha-blending
    // decides how often the gold is shown instead.
    auto retrieve = [&](const corpus::Example& x) {
      const auto scores = ret->retriever->score_cached(x.context, vecs);
      std::size_t best = store.size();
      for (std::size_t i = 0; i < store.size(); ++i) {
        if (store.at(i).text == x.label_text) continue;
        if (best == store.size() || scores[i] > scores[best]) best = i;
      }
      return best == store.size() ? TokenIds{} : store.at(best).tokens;
    };
    log << "retrieving for " << tr.size() + va.size() << " examples" << std::endl;
    std::map<std::pair<std::size_t, std::size_t>, TokenIds> retrieved;
    for (const auto& x : tr) retrieved[{x.episode, x.turn}] = retrieve(x);
    for (auto& x : va) {
      x.context = retrieval::append_conditioning(x.context, retrieve(x), blend.separator, blend.limit);
    }
    context_fn = [retrieved = std::move(retrieved), blend](const corpus::Example& x, Rng& rng) {
      const auto& r = retrieved.at({x.episode, x.turn});
      return objectives::blend_retnref_example(x.context, r, x.label, blend, rng).ids;
    };
    result["alpha_blend"] = blend.alpha_blend;
    result["retriever"] = retriever_dir;
  } else {
    // Knowledge mode learns to use the annotated knowledge sentence.
    auto with_knowledge = [&vocab, blend](const corpus::Example& x,
                                          const std::vector<corpus::DialogueEpisode>& eps) {
      const auto& k = eps[x.episode].turns[x.turn].knowledge;
      return k ? retrieval::append_conditioning(x.context, vocab.encode(*k), blend.separator, blend.limit)
               : x.context;
    };
    for (auto& x : tr) x.context = with_knowledge(x, tr_eps);
    for (auto& x : va) x.context = with_knowledge(x, va_eps);
  }
  result["refine"] = objective == "retnref" ? json(retrieval::refine_mode_name(refine)) : json(nullptr);

  log << "fine-tuning (" << objective << ") on " << tr.size() << " examples" << std::endl;
  const auto h = train::train_generator(m, tr, va, opt, ul, epoch_logger(log, "valid ppl"), context_fn);
  result["history"] = history_json(h);
  if (!va.empty()) result["valid_ppl"] = eval::perplexity(m, va);
  save_model_dir(str(s, "out"), ModelKind::kGenerator, init->config, m.params(), vocab, result);
  return result;
}

// ---------------------------------------------------------------------------
// selfchat

json run_selfchat(const json& s, std::ostream& log) {
  SelfChatOptions opt;
  opt.pairs = count(s, "pairs");
  opt.turns = count(s, "turns");
  opt.seed_turns = count(s, "seed_turns");
  opt.seed = u64(s, "seed");
  opt.decode_a = decode_from(s.at("decode"));
  opt.decode_b = s.at("decode_b").is_null() ? opt.decode_a : decode_from(s.at("decode_b"));
  if (opt.turns < 2) throw ConfigError("'turns' must be at least 2");
  if (opt.seed_turns > opt.turns) throw ConfigError("'seed_turns' exceeds 'turns'");
  require_file(s, "seeds");
  const std::string dir_a = str(s, "model");
  const std::string dir_b = s.at("model_b").is_null() ? dir_a : str(s, "model_b");

  const auto ma = load_model_dir(dir_a);
  const auto mb = dir_b == dir_a ? ma : load_model_dir(dir_b);
  if (!ma->generator || !mb->generator) throw ConfigError("self-chat needs generator models");
  if (ma->vocab.fingerprint() != mb->vocab.fingerprint()) throw ConfigError("models use different vocabularies");
  const decoding::TransformerLM lm_a(*ma->generator), lm_b(*mb->generator);
  const std::string tag_a = s.at("tag").is_null() ? dir_tag(dir_a) : str(s, "tag");
  const std::string tag_b = s.at("tag_b").is_null() ? dir_tag(dir_b) : str(s, "tag_b");
  const auto seeds = corpus::read_episodes(str(s, "seeds"));

  const auto t0 = std::chrono::steady_clock::now();
  const auto run = collect_self_chats({tag_a, &lm_a, opt.decode_a}, {tag_b, &lm_b, opt.decode_b}, seeds,
                                      opt, ma->vocab, s.at("verify").get<bool>());
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_self_chat_logs(str(s, "out"), run.logs);
  log << run.logs.size() << " conversations in " << secs << "s";
  if (run.replayed) log << ", replay mismatches: " << run.replay_mismatches;
  log << std::endl;
  return {{"conversations", run.logs.size()},
          {"turns", opt.turns},
          {"replayed", run.replayed},
          {"replay_mismatches", run.replay_mismatches},
          {"seconds", secs},
          {"model_a", tag_a},
          {"model_b", tag_b}};
}

// ---------------------------------------------------------------------------
// eval

json run_eval(const json& s, std::ostream& log) {
  const std::string metric = str(s, "metric");
  static const std::vector<std::string> metrics = {"ppl", "hits", "ngram", "length", "acute"};
  if (std::find(metrics.begin(), metrics.end(), metric) == metrics.end()) {
    throw ConfigError("'metric' must be one of ppl, hits, ngram, length, acute");
  }
  const std::string model_dir = optional_str(s, "model");
  if ((metric == "ppl" || metric == "hits") && model_dir.empty()) {
    throw ConfigError("metric " + metric + " needs 'model'");
  }
  if ((metric == "ngram" || metric == "length") && s.at("logs").is_null()) {
    throw ConfigError("metric " + metric + " needs 'logs'");
  }
  json result = {{"metric", metric}};

  if (metric == "acute") {
    Store store(s.at("store").is_null() ? Store::default_dir() : fs::path(str(s, "store")));
    Service svc(store, {});
    const auto r = svc.acute_results();
    log << r.at("table").get<std::string>();
    result["results"] = r.at("results");
    result["table"] = r.at("table");
    write_text(str(s, "out"), result.dump(2) + "\n");
    return result;
  }
  if (metric == "ppl" || metric == "hits") {
    require_file(s, "data");
    const auto m = load_model_dir(model_dir);
    const auto ex = load_examples(str(s, "data"), m->vocab, count(s, "min_history"));
    if (metric == "ppl") {
      if (!m->generator) throw ConfigError("'model' is not a generator");
      const double ppl = eval::perplexity(*m->generator, ex);
      result["ppl"] = ppl;
      result["examples"] = ex.size();
      log << "ppl " << ppl;
      if (m->meta.contains("valid_ppl")) {
        const double at_train = m->meta["valid_ppl"].get<double>();
        result["training_valid_ppl"] = at_train;
        result["abs_difference"] = std::abs(ppl - at_train);
        log << " (training-time validation ppl " << at_train << ")";
      }
      log << std::endl;
    } else {
      if (!m->retriever) throw ConfigError("'model' is not a retriever");
      std::vector<std::string> pool;
      if (!s.at("pool").is_null()) pool = read_lines(str(s, "pool"));
      const auto k = count(s, "k");
      const double h = retriever_hits(*m->retriever, ex, pool, m->vocab, k, u64(s, "seed"));
      result["hits_at_1"] = h;
      result["k"] = k;
      result["items"] = ex.size();
      log << "hits@1/" << k << " " << h << " over " << ex.size() << " items" << std::endl;
    }
    write_text(str(s, "out"), result.dump(2) + "\n");
    return result;
  }

  // ngram / length: generated turns of self-chat logs against human turns.
  const auto logs = read_self_chat_logs(str(s, "logs"));
  std::vector<std::string> model_utts, human_utts;
  for (const auto& l : logs) {
    for (std::size_t t = l.seed_turns; t < l.episode.turns.size(); ++t) model_utts.push_back(l.episode.turns[t].text);
  }
  require_file(s, "data");
  for (const auto& e : corpus::read_episodes(str(s, "data"))) {
    for (const auto& t : e.turns) human_utts.push_back(t.text);
  }
  if (metric == "ngram") {
    const auto r = eval::ngram_report(model_utts, human_utts, count(s, "n"), count(s, "top"));
    log << r.render();
    json rows = json::array();
    for (const auto& row : r.rows) rows.push_back({{"ngram", row.ngram}, {"model", row.model}, {"human", row.human}});
    result.update({{"n", r.n}, {"utterances", r.utterances}, {"rows", rows}, {"table", r.render()}});
  } else {
    const auto vocab = model_dir.empty() ? bpe::Vocab::deserialize(nn::read_file(str(s, "vocab")))
                                         : load_model_dir(model_dir)->vocab;
    const auto r = eval::length_report(model_utts, human_utts, vocab);
    log << r.render();
    result.update({{"model_mean", r.model_mean},
                   {"human_mean", r.human_mean},
                   {"model_utterances", r.model_utterances},
                   {"human_utterances", r.human_utterances},
                   {"table", r.render()}});
  }
  write_text(str(s, "out"), result.dump(2) + "\n");
  return result;
}

// ---------------------------------------------------------------------------
// index

json run_index(const json& s, std::ostream& log) {
  const std::string docs = str(s, "docs");
  if (!fs::is_directory(docs)) throw ConfigError("'docs': no such directory " + docs);
  const auto index = retrieval::TfIdfIndex::from_directory(docs);
  const fs::path out = str(s, "out");
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  index.save(out);
  log << "indexed " << index.size() << " documents, " << index.postings().size() << " terms" << std::endl;
  return {{"documents", index.size()}, {"terms", index.postings().size()}};
}

// ---------------------------------------------------------------------------
// chat / serve

ServiceConfig service_config_from(const json& s) {
  ServiceConfig c;
  const std::string personas = optional_str(s, "personas"), topics = optional_str(s, "topics");
  if (!personas.empty()) c.personas = read_personas(personas);
  if (!topics.empty()) c.topics = read_lines(topics);
  c.topic_probability = num(s, "topic_probability");
  if (c.topic_probability < 0.0 || c.topic_probability > 1.0) {
    throw ConfigError("'topic_probability' must lie in [0, 1]");
  }
  const std::string words = optional_str(s, "wordlist");
  if (!words.empty()) c.wordlist = safety::WordList::from_file(words);
  const std::string safety_dir = optional_str(s, "safety");
  if (!safety_dir.empty()) {
    c.safety_classifier = load_model_dir(safety_dir);
    if (c.safety_classifier->kind != ModelKind::kSafety) throw ConfigError("'safety' is not a safety classifier");
  }
  c.canned_message = str(s, "canned_message");
  c.seed = u64(s, "seed");
  return c;
}

fs::path store_dir(const json& s) {
  return s.at("store").is_null() ? Store::default_dir() : fs::path(str(s, "store"));
}

json run_chat(const json& s, std::ostream& log) {
  if (!s.at("decode").is_object()) throw ConfigError("'decode' must be an object");
  auto cfg = service_config_from(s);
  Store store(store_dir(s));
  Service svc(store, std::move(cfg));
  auto model = load_chat_model(s.at("model"), s.at("decode"));
  const std::string tag = model.tag;
  svc.add_model(std::move(model));
  json req = {{"model", tag}};
  if (!s.at("persona").is_null()) {
    req["persona"] = s.at("persona").is_string() ? json::array({s.at("persona")}) : s.at("persona");
  }
  if (!s.at("topic").is_null()) req["topic"] = s.at("topic");
  if (!s.at("session_seed").is_null()) req["seed"] = s.at("session_seed");
  const auto session = svc.create_session(req);
  const std::string id = session.at("id");
  log << "session " << id << " with " << tag;
  if (!session.at("topic").is_null()) log << ", topic " << session.at("topic").get<std::string>();
  log << "\n";
  for (const auto& line : session.at("persona")) log << "  persona: " << line.get<std::string>() << "\n";

  std::ifstream file;
  const std::string input = optional_str(s, "input");
  if (!input.empty()) {
    file.open(input);
    if (!file) throw ConfigError("'input': cannot read " + input);
  }
  std::istream& in = input.empty() ? std::cin : file;
  const std::size_t max_turns = count(s, "max_turns");
  std::size_t turns = 0;
  std::string line;
  while ((max_turns == 0 || turns < max_turns) && (log << "you> " << std::flush, std::getline(in, line))) {
    if (line == "/quit") break;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto r = svc.post_message(id, {{"text", line}});
    log << "bot> " << r.at("reply").get<std::string>() << (r.at("flagged").get<bool>() ? "  [replaced]" : "")
        << std::endl;
    ++turns;
  }
  log << "\n";
  return {{"session", id}, {"exchanges", turns}, {"store", store.path().string()}};
}

std::atomic<httplib::Server*> g_server{nullptr};

void stop_server(int) {
  if (auto* s = g_server.load()) s->stop();
}

json run_serve(const json& s, std::ostream& log) {
  if (!s.at("models").is_array() || s.at("models").empty()) throw ConfigError("'models' must be a non-empty list");
  auto cfg = service_config_from(s);
  Store store(store_dir(s));
  Service svc(store, std::move(cfg));
  for (const auto& spec : s.at("models")) svc.add_model(load_chat_model(spec, s.at("decode")));
  httplib::Server server;
  install_routes(server, svc);
  const std::string host = str(s, "host");
  const int port = static_cast<int>(count(s, "port"));
  if (!server.bind_to_port(host, port)) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  g_server = &server;
  std::signal(SIGINT, stop_server);
  std::signal(SIGTERM, stop_server);
  log << "serving " << svc.model_tags().size() << " model(s) on http://" << host << ":" << port << kApiPrefix
      << " (store " << store.path().string() << ")" << std::endl;
  server.listen_after_bind();
  g_server = nullptr;
  return {{"host", host}, {"port", port}, {"models", svc.model_tags()}, {"records", store.size()}};
}

// ---------------------------------------------------------------------------
// acute-export

json run_acute_export(const json& s, std::ostream& log) {
  std::vector<std::string> questions;
  for (const auto& q : s.at("questions")) {
    try {
      questions.emplace_back(eval::question(eval::parse_question(q.get<std::string>())).id);
    } catch (const std::exception&) {
      throw ConfigError("unknown question " + q.dump());
    }
  }
  const std::string logs_a = optional_str(s, "logs_a"), logs_b = optional_str(s, "logs_b");
  if (logs_a.empty() != logs_b.empty()) throw ConfigError("'logs_a' and 'logs_b' go together");
  Store store(store_dir(s));
  Service svc(store, {});
  std::size_t created = 0;
  if (!logs_a.empty()) {
    const auto a = read_self_chat_logs(logs_a), b = read_self_chat_logs(logs_b);
    std::size_t pairs = std::min(a.size(), b.size());
    if (count(s, "pairs") > 0) pairs = std::min(pairs, count(s, "pairs"));
    for (std::size_t i = 0; i < pairs; ++i) {
      const auto ida = svc.import_log({{"log", json::parse(a[i].to_json_line())}, {"imported", false},
                                       {"source", logs_a}})["id"];
      const auto idb = svc.import_log({{"log", json::parse(b[i].to_json_line())},
                                       {"source", str(s, "source_b")}})["id"];
      for (const auto& q : questions) {
        svc.create_acute_task({{"log_a", ida}, {"log_b", idb}, {"question", q}});
        ++created;
      }
    }
    log << "created " << created << " trials from " << pairs << " conversation pairs" << std::endl;
  }
  const fs::path out = str(s, "out");
  fs::create_directories(out);
  std::string trials;
  for (const auto& t : svc.acute_trials()) {
    json judgments = json::array();
    for (const auto& j : t.judgments) {
      judgments.push_back({{"annotator", j.annotator},
                           {"winner", j.winner == eval::LogSide::kA ? "A" : "B"},
                           {"justification", j.justification},
                           {"shown_swapped", j.shown_swapped},
                           {"flagged", j.flagged}});
    }
    trials += json{{"trial", t.id},
                   {"question", eval::question(t.question).id},
                   {"model_a", t.model_a},
                   {"model_b", t.model_b},
                   {"log_a", t.log_a},
                   {"log_b", t.log_b},
                   {"judgments", judgments}}
                  .dump() +
              "\n";
  }
  write_text(out / "trials.jsonl", trials);
  const auto results = svc.acute_results();
  write_text(out / "results.json", results.dump(2) + "\n");
  write_text(out / "results.txt", results.at("table").get<std::string>());
  log << results.at("table").get<std::string>();
  return {{"trials_created", created}, {"trials", svc.acute_trials().size()}, {"results", results.at("results")}};
}

const std::vector<CommandInfo>& registry() {
  static const std::vector<CommandInfo> commands = {
      {"synth", "write the bundled toy corpora and vocabulary", synth_defaults, run_synth, in_out_dir},
      {"train", "train a generator, retriever, gate, safety or length model", train_defaults, run_train,
       in_out_dir},
      {"finetune", "fine-tune a generator with unlikelihood or retrieve-and-refine", finetune_defaults,
       run_finetune, in_out_dir},
      {"selfchat", "collect self-chat conversations", selfchat_defaults, run_selfchat, beside_out},
      {"eval", "perplexity, hits@1/K, n-gram, length or ACUTE-Eval reports", eval_defaults, run_eval,
       beside_out},
      {"index", "build the TF-IDF knowledge index", index_defaults, run_index, beside_out},
      {"chat", "chat with a model in the terminal", chat_defaults, run_chat, store_only},
      {"acute-export", "create ACUTE-Eval trials from self-chat logs and export results",
       acute_export_defaults, run_acute_export, in_out_dir},
      {"serve", "run the chat and annotation HTTP API", serve_defaults, run_serve, store_only},
  };
  return commands;
}

const CommandInfo& info(std::string_view command) {
  for (const auto& c : registry()) {
    if (command == c.name) return c;
  }
  throw ConfigError("unknown command '" + std::string(command) + "'");
}

bool same_kind(const json& def, const json& v) {
  if (def.is_null()) return true;
  if (def.is_number_float()) return v.is_number();
  if (def.is_number_integer()) return v.is_number_integer();
  return def.type() == v.type();
}

}  // namespace

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& c : registry()) n.push_back(c.name);
    return n;
  }();
  return names;
}

std::string_view command_summary(std::string_view command) { return info(command).summary; }

json command_defaults(std::string_view command) { return info(command).defaults(); }

void merge_settings(json& settings, const json& overrides, std::string_view origin) {
  if (!overrides.is_object()) throw ConfigError(std::string(origin) + ": settings must be a JSON object");
  for (const auto& [key, value] : overrides.items()) {
    if (!settings.contains(key)) {
      throw ConfigError(std::string(origin) + ": unknown key '" + key + "'");
    }
    if (!same_kind(settings[key], value)) {
      throw ConfigError(std::string(origin) + ": '" + key + "' should be like " + settings[key].dump() +
                        ", got " + value.dump());
    }
  }
  for (const auto& [key, value] : overrides.items()) settings[key] = value;
}

json parse_flag_value(const json& def, const std::string& raw) {
  if (def.is_string()) return raw;
  if (def.is_boolean()) {
    if (raw == "true" || raw == "1" || raw == "yes" || raw == "on") return true;
    if (raw == "false" || raw == "0" || raw == "no" || raw == "off") return false;
    throw ConfigError("expected true or false, got '" + raw + "'");
  }
  json v;
  try {
    v = json::parse(raw);
  } catch (const json::parse_error&) {
    if (def.is_null()) return raw;
    if (def.is_array()) {
      json list = json::array();
      std::stringstream ss(raw);
      std::string item;
      while (std::getline(ss, item, ',')) list.push_back(item);
      return list;
    }
    throw ConfigError("cannot read '" + raw + "' as " + std::string(def.type_name()));
  }
  if (!same_kind(def, v)) throw ConfigError("cannot read '" + raw + "' as " + std::string(def.type_name()));
  return v;
}

json resolve_settings(std::string_view command, const std::string& config_path,
                      const std::vector<std::pair<std::string, std::string>>& flags) {
  json settings = command_defaults(command);
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw ConfigError("cannot read config file " + config_path);
    json file;
    try {
      file = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError(config_path + ": " + e.what());
    }
    merge_settings(settings, file, config_path);
  }
  for (const auto& [key, raw] : flags) {
    if (!settings.contains(key)) throw ConfigError("unknown flag --" + key);
    json value;
    try {
      value = parse_flag_value(command_defaults(command)[key], raw);
    } catch (const ConfigError& e) {
      throw ConfigError("--" + key + ": " + e.what());
    }
    merge_settings(settings, {{key, value}}, "--" + key);
  }
  return settings;
}

std::string code_version() { return std::string(DIALOGKIT_VERSION) + "+" + DIALOGKIT_GIT_REVISION; }

json run_command(std::string_view command, const json& settings, std::ostream& log) {
  const auto& c = info(command);
  json checked = c.defaults();
  merge_settings(checked, settings, command);
  const std::string started = utc_timestamp();
  const auto t0 = std::chrono::steady_clock::now();
  const json result = c.run(checked, log);
  json record = {{"schema_version", kSchemaVersion},
                 {"command", c.name},
                 {"settings", checked},
                 {"code_version", code_version()},
                 {"started_at", started},
                 {"finished_at", utc_timestamp()},
                 {"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()},
                 {"result", result}};
  if (const auto path = c.metadata_path(checked); !path.empty()) {
    write_text(path, record.dump(2) + "\n");
  }
  if (c.metadata_path == store_only) {
    Store store(checked.at("store").is_null() ? Store::default_dir() : fs::path(str(checked, "store")));
    store.append(RecordType::kReport, record);
  }
  return result;
}

// ---------------------------------------------------------------------------

SelfChatRun collect_self_chats(const eval::SelfChatSide& a, const eval::SelfChatSide& b,
                               std::span<const corpus::DialogueEpisode> seeds, const SelfChatOptions& opt,
                               const bpe::Vocab& vocab, bool verify) {
  if (seeds.empty()) throw std::invalid_argument("self-chat needs at least one seed episode");
  SelfChatRun run;
  for (std::size_t i = 0; i < opt.pairs; ++i) {
    corpus::DialogueEpisode seed_ep = seeds[i % seeds.size()];
    seed_ep.turns.resize(std::min(seed_ep.turns.size(), opt.seed_turns));
    for (auto& t : seed_ep.turns) t.knowledge.reset();
    seed_ep.source_tag = "self_chat";
    eval::SelfChatSide sa = a, sb = b;
    sa.decode = opt.decode_a;
    sb.decode = opt.decode_b;
    run.logs.push_back(eval::self_chat(sa, sb, seed_ep, opt.turns, mix_seed(opt.seed, i), vocab));
  }
  if (verify) {
    for (const auto& log : run.logs) {
      // Replay from the serialized record, as a later reader would.
      const auto recorded = eval::SelfChatLog::from_json_line(log.to_json_line());
      const auto again = eval::replay_self_chat(recorded, *a.lm, *b.lm, vocab);
      ++run.replayed;
      run.replay_mismatches += again.to_json_line() != log.to_json_line();
    }
  }
  return run;
}

void write_self_chat_logs(const std::string& path, std::span<const eval::SelfChatLog> logs) {
  std::string text;
  for (const auto& l : logs) text += l.to_json_line() + "\n";
  write_text(path, text);
}

std::vector<eval::SelfChatLog> read_self_chat_logs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<eval::SelfChatLog> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(eval::SelfChatLog::from_json_line(line));
  }
  return out;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace

std::vector<std::vector<std::string>> read_personas(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<std::vector<std::string>> out;
  std::vector<std::string> cur;
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty()) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(line);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

void write_personas(const std::string& path, std::span<const std::vector<std::string>> personas) {
  std::string text;
  for (std::size_t i = 0; i < personas.size(); ++i) {
    if (i) text += "\n";
    for (const auto& l : personas[i]) text += l + "\n";
  }
  write_text(path, text);
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

ChatModel load_chat_model(const json& spec, const json& decode_patch) {
  json o;
  if (spec.is_string()) {
    const std::string text = spec.get<std::string>();
    const auto eq = text.find('=');
    o = eq == std::string::npos ? json{{"dir", text}} : json{{"tag", text.substr(0, eq)}, {"dir", text.substr(eq + 1)}};
  } else if (spec.is_object()) {
    o = spec;
  } else {
    throw ConfigError("a model is \"tag=dir\", \"dir\" or an object");
  }
  static const std::vector<std::string> keys = {"dir", "tag", "refine", "retriever", "gate", "candidates", "index"};
  for (const auto& [k, _] : o.items()) {
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) throw ConfigError("unknown model key '" + k + "'");
  }
  if (!o.contains("dir") || !o["dir"].is_string()) throw ConfigError("model spec needs 'dir'");
  ChatModel m;
  const std::string dir = o["dir"];
  m.tag = o.value("tag", dir_tag(dir));
  m.generator = load_model_dir(dir);
  if (!m.generator->generator) throw ConfigError(dir + " is not a generator");
  m.decode = decode_from(decode_patch);
  m.refine = retrieval::parse_refine_mode(o.value("refine", "none"));
  auto opt_path = [&](const char* key) { return o.contains(key) && o[key].is_string() ? o[key].get<std::string>() : ""; };
  if (const auto p = opt_path("retriever"); !p.empty()) m.retriever = load_model_dir(p);
  if (const auto p = opt_path("gate"); !p.empty()) m.gate = load_model_dir(p);
  if (const auto p = opt_path("candidates"); !p.empty()) {
    std::vector<std::string> texts;
    for (const auto& e : corpus::read_episodes(p)) {
      for (const auto& t : e.turns) texts.push_back(t.text);
    }
    m.candidates = std::make_shared<retrieval::CandidateStore>(
        retrieval::CandidateStore::from_texts(texts, m.generator->vocab));
  }
  if (const auto p = opt_path("index"); !p.empty()) {
    m.index = std::make_shared<retrieval::TfIdfIndex>(retrieval::TfIdfIndex::load(p));
  }
  return m;
}

}  // namespace dialogkit::app
