#include "dialogkit/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <json.hpp>
#include <unordered_map>

#include "dialogkit/checkpoint.hpp"
#include "dialogkit/rng.hpp"

namespace dialogkit::corpus {

using nlohmann::json;

std::string_view describe(Rule rule) {
  switch (rule) {
    case Rule::kKnownBot: return "author is a known bot";
    case Rule::kNonEnglish: return "comes from a known non-English subreddit";
    case Rule::kRemovedOrDeleted: return "marked as removed / deleted";
    case Rule::kLongWithoutSpaces: return "longer than 2048 characters and contains no spaces";
    case Rule::kTooManyTokens: return "longer than 128 BPE tokens";
    case Rule::kTooShort: return "shorter than 5 characters";
    case Rule::kContainsUrl: return "contains a URL";
    case Rule::kNonAsciiStart: return "starts with a non-ASCII character";
    case Rule::kTooDeep: return "further than depth 7 in the thread";
  }
  return "unknown rule";
}

bool contains_url(std::string_view text) {
  return text.find("http://") != std::string_view::npos ||
         text.find("https://") != std::string_view::npos ||
         text.find("www.") != std::string_view::npos;
}

namespace {

// Code points, counting each non-continuation byte.
std::size_t utf8_length(std::string_view s) {
  std::size_t n = 0;
  for (unsigned char c : s) n += (c & 0xC0) != 0x80;
  return n;
}

bool is_deleted_body(std::string_view body) {
  return body == "[deleted]" || body == "[removed]";
}

std::vector<Rule> failed_rules(const Comment& c, int depth, const FilterConfig& cfg) {
  std::vector<Rule> out;
  auto check = [&](Rule r, bool failed) {
    if (failed && cfg.enabled.test(static_cast<std::size_t>(r))) out.push_back(r);
  };
  const std::size_t chars = utf8_length(c.body);
  check(Rule::kKnownBot, c.bot_author || cfg.bot_authors.contains(c.author));
  check(Rule::kNonEnglish, cfg.non_english_subreddits.contains(c.subreddit));
  check(Rule::kRemovedOrDeleted, c.deleted || is_deleted_body(c.body));
  check(Rule::kLongWithoutSpaces,
        chars > cfg.max_chars_without_spaces && c.body.find(' ') == std::string::npos);
  check(Rule::kTooManyTokens,
        cfg.token_counter && cfg.token_counter(c.body) > cfg.max_tokens);
  check(Rule::kTooShort, chars < cfg.min_chars);
  check(Rule::kContainsUrl, cfg.url_detector && cfg.url_detector(c.body));
  check(Rule::kNonAsciiStart,
        !c.body.empty() && static_cast<unsigned char>(c.body.front()) >= 0x80);
  check(Rule::kTooDeep, depth > cfg.max_depth);
  return out;
}

}  // namespace

FilterResult filter_thread(std::span<const Comment> comments, const FilterConfig& config) {
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < comments.size(); ++i) {
    if (!index.emplace(comments[i].id, i).second) {
      throw StructuralError("duplicate comment id " + comments[i].id);
    }
  }
  // Resolve depths along parent links, detecting cycles.
  std::vector<int> depth(comments.size(), -1);
  std::vector<std::size_t> parent(comments.size(), SIZE_MAX);
  for (std::size_t i = 0; i < comments.size(); ++i) {
    const auto& p = comments[i].parent_id;
    if (p.empty()) continue;
    auto it = index.find(p);
    if (it == index.end()) {
      throw StructuralError("comment " + comments[i].id + " has unknown parent " + p);
    }
    parent[i] = it->second;
  }
  for (std::size_t i = 0; i < comments.size(); ++i) {
    std::vector<std::size_t> chain;
    std::size_t cur = i;
    while (cur != SIZE_MAX && depth[cur] < 0) {
      if (std::find(chain.begin(), chain.end(), cur) != chain.end()) {
        throw StructuralError("cycle in parent links at comment " + comments[cur].id);
      }
      chain.push_back(cur);
      cur = parent[cur];
    }
    int d = cur == SIZE_MAX ? -1 : depth[cur];
    for (auto it = chain.rbegin(); it != chain.rend(); ++it) depth[*it] = ++d;
  }
  for (std::size_t i = 0; i < comments.size(); ++i) {
    if (comments[i].depth != depth[i]) {
      throw StructuralError("comment " + comments[i].id + " declares depth " +
                            std::to_string(comments[i].depth) + " but sits at depth " +
                            std::to_string(depth[i]));
    }
  }

  // Process in depth order so a parent's fate is known before its children.
  std::vector<std::size_t> order(comments.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return depth[a] < depth[b]; });

  FilterResult result;
  std::vector<char> removed(comments.size(), 0);
  for (std::size_t i : order) {
    Removal r;
    if (parent[i] != SIZE_MAX && removed[parent[i]]) {
      // Name the topmost removed ancestor.
      std::size_t top = parent[i];
      while (parent[top] != SIZE_MAX && removed[parent[top]]) top = parent[top];
      r.removed_ancestor = comments[top].id;
    }
    r.rules = failed_rules(comments[i], depth[i], config);
    if (!r.rules.empty() || !r.removed_ancestor.empty()) {
      removed[i] = 1;
      result.removed.emplace(comments[i].id, std::move(r));
    }
  }
  for (std::size_t i = 0; i < comments.size(); ++i) {
    if (!removed[i]) result.kept.push_back(comments[i].id);
  }
  return result;
}

std::vector<Comment> read_comments(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open comment file " + path);
  std::vector<Comment> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    Comment c;
    c.id = j.at("id").get<std::string>();
    c.thread_id = j.value("thread_id", "");
    c.parent_id = j.value("parent_id", "");
    c.depth = j.value("depth", 0);
    c.author = j.value("author", "");
    c.subreddit = j.value("subreddit", "");
    c.body = j.value("body", "");
    c.deleted = j.value("deleted", false);
    c.bot_author = j.value("bot_author", false);
    out.push_back(std::move(c));
  }
  return out;
}

std::set<std::string> load_term_list(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open term list " + path);
  std::set<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    std::size_t b = line.find_first_not_of(' ');
    if (b == std::string::npos || line[b] == '#') continue;
    out.insert(line.substr(b));
  }
  return out;
}

std::string_view split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  return "?";
}

std::size_t thread_chunk(std::string_view thread_id, std::size_t n_chunks) {
  return static_cast<std::size_t>(fnv1a(thread_id) % n_chunks);
}

std::vector<Split> split_by_thread(std::span<const std::string> thread_ids,
                                   std::size_t n_chunks, std::size_t n_holdout) {
  if (!(n_chunks > n_holdout && n_holdout >= 2)) {
    throw std::invalid_argument("split_by_thread: need n_chunks > n_holdout >= 2");
  }
  const std::size_t first_holdout = n_chunks - n_holdout;
  const std::size_t first_test = first_holdout + n_holdout / 2;
  std::vector<Split> out;
  out.reserve(thread_ids.size());
  for (const auto& t : thread_ids) {
    const auto c = thread_chunk(t, n_chunks);
    out.push_back(c < first_holdout ? Split::kTrain
                  : c < first_test  ? Split::kValid
                                    : Split::kTest);
  }
  return out;
}

void DialogueEpisode::validate() const {
  for (std::size_t i = 1; i < turns.size(); ++i) {
    if (turns[i].speaker == turns[i - 1].speaker) {
      throw std::invalid_argument("episode turns do not alternate at turn " +
                                  std::to_string(i));
    }
  }
}

std::string episode_to_json_line(const DialogueEpisode& ep) {
  json turns = json::array();
  for (const auto& t : ep.turns) {
    json jt = {{"speaker", t.speaker == Speaker::kA ? "A" : "B"}, {"text", t.text}};
    if (t.knowledge) jt["knowledge"] = *t.knowledge;
    turns.push_back(std::move(jt));
  }
  json j = {{"persona_a", ep.persona_a},
            {"persona_b", ep.persona_b},
            {"topic", ep.topic ? json(*ep.topic) : json(nullptr)},
            {"turns", std::move(turns)},
            {"source_tag", ep.source_tag}};
  return j.dump();
}

DialogueEpisode episode_from_json_line(std::string_view line) {
  const json j = json::parse(line);
  DialogueEpisode ep;
  ep.persona_a = j.at("persona_a").get<std::vector<std::string>>();
  ep.persona_b = j.at("persona_b").get<std::vector<std::string>>();
  if (j.contains("topic") && !j.at("topic").is_null()) ep.topic = j.at("topic").get<std::string>();
  for (const auto& jt : j.at("turns")) {
    Turn t;
    const auto sp = jt.at("speaker").get<std::string>();
    if (sp != "A" && sp != "B") throw std::invalid_argument("episode: bad speaker " + sp);
    t.speaker = sp == "A" ? Speaker::kA : Speaker::kB;
    t.text = jt.at("text").get<std::string>();
    if (jt.contains("knowledge") && !jt.at("knowledge").is_null()) {
      t.knowledge = jt.at("knowledge").get<std::string>();
    }
    ep.turns.push_back(std::move(t));
  }
  ep.source_tag = j.value("source_tag", "");
  ep.validate();
  return ep;
}

void write_episodes(const std::string& path, std::span<const DialogueEpisode> episodes) {
  std::string out = json{{"format", kEpisodeFormat}, {"version", kEpisodeFormatVersion}}.dump();
  out += '\n';
  for (const auto& ep : episodes) {
    out += episode_to_json_line(ep);
    out += '\n';
  }
  nn::write_file_atomic(path, out);
}

std::vector<DialogueEpisode> read_episodes(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open episode file " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("episode file is empty: " + path);
  const json header = json::parse(line);
  if (header.value("format", "") != kEpisodeFormat ||
      header.value("version", 0) != kEpisodeFormatVersion) {
    throw std::runtime_error("unsupported episode file header in " + path);
  }
  std::vector<DialogueEpisode> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(episode_from_json_line(line));
  }
  return out;
}

ContextWindow assemble_context(const DialogueEpisode& episode, std::size_t history_turns,
                               const bpe::Vocab& vocab, std::size_t limit) {
  if (history_turns > episode.turns.size()) {
    throw std::out_of_range("assemble_context: history beyond episode end");
  }
  if (limit == 0) throw std::invalid_argument("assemble_context: zero limit");
  ContextWindow w;
  w.responder = history_turns == 0
                    ? (episode.turns.empty() ? Speaker::kA : episode.turns.front().speaker)
                    : other(episode.turns[history_turns - 1].speaker);

  std::vector<TokenIds> persona;
  for (const auto& line : episode.persona_of(w.responder)) persona.push_back(vocab.encode(line));
  std::optional<TokenIds> topic;
  if (episode.topic) topic = vocab.encode(*episode.topic);
  std::vector<TokenIds> history;
  for (std::size_t i = 0; i < history_turns; ++i) history.push_back(vocab.encode(episode.turns[i].text));

  auto total = [&] {
    std::size_t n = 0, blocks = 0;
    for (const auto& p : persona) n += p.size(), ++blocks;
    if (topic) n += topic->size(), ++blocks;
    for (const auto& h : history) n += h.size(), ++blocks;
    return blocks == 0 ? 0 : n + blocks - 1;
  };
  while (total() > limit) {
    if (history.size() > 1) {
      history.erase(history.begin());
    } else if (topic) {
      topic.reset();
    } else if (!persona.empty()) {
      persona.erase(persona.begin());
    } else if (!history.empty()) {
      history.back() = bpe::truncate_context(std::move(history.back()), limit);
    } else {
      break;
    }
  }
  w.persona_lines_kept = persona.size();
  w.topic_kept = topic.has_value();
  w.history_turns_kept = history.size();

  const TokenId sep = vocab.specials().sep;
  bool first = true;
  auto append = [&](const TokenIds& block) {
    if (!first) w.ids.push_back(sep);
    w.ids.insert(w.ids.end(), block.begin(), block.end());
    first = false;
  };
  for (const auto& p : persona) append(p);
  if (topic) append(*topic);
  for (const auto& h : history) append(h);
  if (w.ids.empty()) w.ids.push_back(vocab.specials().start);
  return w;
}

std::vector<Example> make_examples(std::span<const DialogueEpisode> episodes,
                                   const bpe::Vocab& vocab,
                                   std::optional<Speaker> only_speaker,
                                   std::size_t min_history) {
  std::vector<Example> out;
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const auto& ep = episodes[e];
    for (std::size_t t = min_history; t < ep.turns.size(); ++t) {
      if (only_speaker && ep.turns[t].speaker != *only_speaker) continue;
      Example ex;
      ex.context = assemble_context(ep, t, vocab).ids;
      // Labels leave room for the end token.
      ex.label = bpe::truncate_label(vocab.encode(ep.turns[t].text), bpe::kMaxSequenceTokens - 1);
      ex.label_text = ep.turns[t].text;
      ex.context_text = t > 0 ? ep.turns[t - 1].text : std::string();
      ex.episode = e;
      ex.turn = t;
      if (ex.label.empty()) continue;
      out.push_back(std::move(ex));
    }
  }
  return out;
}

}  // namespace dialogkit::corpus
