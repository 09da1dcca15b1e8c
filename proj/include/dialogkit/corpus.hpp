#pragma once

#include <bitset>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dialogkit/bpe.hpp"

namespace dialogkit::corpus {

// ---------------------------------------------------------------------------
// Comment-tree filtering

struct Comment {
  std::string id;
  std::string thread_id;
  std::string parent_id;  // empty for a root comment
  int depth = 0;
  std::string author;
  std::string subreddit;
  std::string body;
  bool deleted = false;
  bool bot_author = false;
};

enum class Rule {
  kKnownBot = 0,
  kNonEnglish,
  kRemovedOrDeleted,
  kLongWithoutSpaces,
  kTooManyTokens,
  kTooShort,
  kContainsUrl,
  kNonAsciiStart,
  kTooDeep,
};
inline constexpr std::size_t kRuleCount = 9;

std::string_view describe(Rule rule);

class StructuralError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Substring match on "http://", "https://" or "www.".
bool contains_url(std::string_view text);

struct FilterConfig {
  std::set<std::string> bot_authors;
  std::set<std::string> non_english_subreddits;
  std::function<bool(std::string_view)> url_detector = contains_url;
  // Counts BPE tokens of a body; the token rule is skipped when unset.
  std::function<std::size_t(std::string_view)> token_counter;
  std::size_t max_tokens = 128;
  std::size_t max_chars_without_spaces = 2048;
  std::size_t min_chars = 5;
  int max_depth = 7;
  std::bitset<kRuleCount> enabled = std::bitset<kRuleCount>().set();
};

struct Removal {
  std::vector<Rule> rules;     // rules the comment itself failed
  std::string removed_ancestor;  // set when removed because an ancestor was
};

struct FilterResult {
  std::vector<std::string> kept;            // input order
  std::map<std::string, Removal> removed;   // by comment id
};

// Applies the nine rules; a failing comment is removed with its whole
// subtree. Throws StructuralError on cycles, unknown parents, duplicate ids
// or depth fields inconsistent with the parent links.
FilterResult filter_thread(std::span<const Comment> comments, const FilterConfig& config);

// Comment records, one JSON object per line.
std::vector<Comment> read_comments(const std::string& path);

// Reads one term per line, skipping blanks and '#' comments.
std::set<std::string> load_term_list(const std::string& path);

// ---------------------------------------------------------------------------
// Thread-stratified splitting

enum class Split { kTrain, kValid, kTest };
std::string_view split_name(Split s);

std::size_t thread_chunk(std::string_view thread_id, std::size_t n_chunks);

// Assigns every example to a split via the hash chunk of its thread id.
// The first half of the last n_holdout chunks is validation, the rest test.
std::vector<Split> split_by_thread(std::span<const std::string> thread_ids,
                                   std::size_t n_chunks = 4096,
                                   std::size_t n_holdout = 2);

// ---------------------------------------------------------------------------
// Dialogue episodes

enum class Speaker { kA, kB };
inline Speaker other(Speaker s) { return s == Speaker::kA ? Speaker::kB : Speaker::kA; }

struct Turn {
  Speaker speaker = Speaker::kA;
  std::string text;
  std::optional<std::string> knowledge;  // checked knowledge sentence, if any
};

struct DialogueEpisode {
  std::vector<std::string> persona_a;
  std::vector<std::string> persona_b;
  std::optional<std::string> topic;
  std::vector<Turn> turns;
  std::string source_tag;

  const std::vector<std::string>& persona_of(Speaker s) const {
    return s == Speaker::kA ? persona_a : persona_b;
  }
  // Throws std::invalid_argument when turns do not alternate.
  void validate() const;
};

inline constexpr std::string_view kEpisodeFormat = "dialogkit.episodes";
inline constexpr int kEpisodeFormatVersion = 1;

std::string episode_to_json_line(const DialogueEpisode& ep);
DialogueEpisode episode_from_json_line(std::string_view line);
void write_episodes(const std::string& path, std::span<const DialogueEpisode> episodes);
std::vector<DialogueEpisode> read_episodes(const std::string& path);

// ---------------------------------------------------------------------------
// Context assembly

struct ContextWindow {
  TokenIds ids;
  Speaker responder = Speaker::kA;
  std::size_t history_turns_kept = 0;
  bool topic_kept = false;
  std::size_t persona_lines_kept = 0;
};

// Builds the model input for the speaker replying after the first
// `history_turns` turns: their persona lines, the topic, then the history
// oldest to newest, one separator between consecutive blocks. Over `limit`
// tokens, the oldest history goes first, then the topic, then persona lines;
// the latest turn is only ever cut last (keeping its final tokens).
ContextWindow assemble_context(const DialogueEpisode& episode, std::size_t history_turns,
                               const bpe::Vocab& vocab,
                               std::size_t limit = bpe::kMaxSequenceTokens);

// One supervised example per turn: context before it, that turn as label.
struct Example {
  TokenIds context;
  TokenIds label;  // response tokens, truncated, without the end token
  std::string label_text;
  std::string context_text;  // last turn text, for retrieval stores
  std::size_t episode = 0;
  std::size_t turn = 0;
};

// Turns with fewer than `min_history` earlier turns are skipped.
std::vector<Example> make_examples(std::span<const DialogueEpisode> episodes,
                                   const bpe::Vocab& vocab,
                                   std::optional<Speaker> only_speaker = std::nullopt,
                                   std::size_t min_history = 0);

}  // namespace dialogkit::corpus
