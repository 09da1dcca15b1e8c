#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dialogkit/corpus.hpp"
#include "dialogkit/decoding.hpp"
#include "dialogkit/model.hpp"

namespace dialogkit::eval {

// ---------------------------------------------------------------------------
// Perplexity

// Decoder input ([start] + label) and targets (label + [end]).
struct TeacherForcing {
  TokenIds input;
  TokenIds target;
};
TeacherForcing teacher_forcing(std::span<const TokenId> label,
                               const bpe::SpecialIds& specials = {});

struct NllTotal {
  double nll = 0.0;         // summed over target tokens
  std::size_t tokens = 0;
  double mean() const { return nll / static_cast<double>(tokens); }
};

// Summed negative log-likelihood of each example's label plus end token.
NllTotal corpus_nll(const model::Seq2Seq& model, std::span<const corpus::Example> examples);
// exp(mean per-token NLL); throws std::invalid_argument on an empty set.
double perplexity(const model::Seq2Seq& model, std::span<const corpus::Example> examples);

// ---------------------------------------------------------------------------
// hits@1/K

// Scores candidates (indices into the pool) for one context.
using CandidateScorer = std::function<std::vector<double>(
    std::span<const TokenId> context, std::span<const std::size_t> candidates)>;

struct RankingItem {
  TokenIds context;
  std::size_t gold = 0;  // index into the candidate pool
  std::uint64_t id = 0;  // seeds this item's distractor draw
};

// Fraction of items whose gold outscores K-1 distinct distractors drawn from
// the pool with Rng(mix_seed(seed, id)). Ties count as misses.
double hits_at_1(const CandidateScorer& scorer, std::span<const RankingItem> items,
                 std::size_t pool_size, std::size_t k, std::uint64_t seed = 0);

// Scorer backed by a poly-encoder with precomputed candidate vectors.
CandidateScorer polyencoder_scorer(const model::PolyEncoder& retriever,
                                   const std::vector<std::vector<double>>& candidate_vectors);

// ---------------------------------------------------------------------------
// N-gram and length statistics

// Lowercased runs of letters, digits and apostrophes.
std::vector<std::string> words(std::string_view text);

struct NgramRow {
  std::string ngram;
  std::size_t model = 0;
  std::size_t human = 0;
};

struct NgramReport {
  std::size_t n = 3;
  std::size_t utterances = 0;  // per side, after equalizing
  std::vector<NgramRow> rows;  // model count desc, then n-gram
  std::string render() const;
};

// Word n-gram counts over the first min(|model|, |human|) utterances of each
// side; the top_m rows by model count.
NgramReport ngram_report(std::span<const std::string> model_utterances,
                         std::span<const std::string> human_utterances, std::size_t n = 3,
                         std::size_t top_m = 10);

struct LengthReport {
  double model_mean = 0.0;
  double human_mean = 0.0;
  std::size_t model_utterances = 0;
  std::size_t human_utterances = 0;
  std::string render() const;
};

LengthReport length_report(std::span<const std::string> model_utterances,
                           std::span<const std::string> human_utterances,
                           const bpe::Vocab& vocab);

// ---------------------------------------------------------------------------
// Self-chat

struct SelfChatSide {
  std::string tag;
  const decoding::LanguageModel* lm = nullptr;
  decoding::DecodeConfig decode;
};

struct SelfChatLog {
  std::string model_a, model_b;
  std::uint64_t seed = 0;
  std::size_t turns = 0;
  std::size_t seed_turns = 0;  // turns copied from the seed episode
  decoding::DecodeConfig decode_a, decode_b;
  corpus::DialogueEpisode episode;

  std::string to_json_line() const;
  static SelfChatLog from_json_line(std::string_view line);
};

inline constexpr std::size_t kSelfChatTurns = 14;

// Continues `seed` (personas, optional topic and opening turns) until it has
// `turns` turns. Each generated turn is decoded by the side whose speaker is
// due, from its own persona and the whole history, with decode seed
// mix_seed(seed, turn index).
SelfChatLog self_chat(const SelfChatSide& a, const SelfChatSide& b,
                      const corpus::DialogueEpisode& seed_episode, std::size_t turns,
                      std::uint64_t seed, const bpe::Vocab& vocab);

// Re-runs a recorded conversation from its seed turns, seed and configs.
SelfChatLog replay_self_chat(const SelfChatLog& log, const decoding::LanguageModel& a,
                             const decoding::LanguageModel& b, const bpe::Vocab& vocab);

// ---------------------------------------------------------------------------
// Significance and ACUTE-Eval

// Exact two-tailed binomial test against a fair coin: the total probability
// of outcomes no more likely than `wins`.
double binomial_test(std::uint64_t wins, std::uint64_t trials);

enum class Question { kEngagingness, kHumanness };

struct EvalQuestion {
  std::string_view id;
  std::string_view phrasing;
};

const EvalQuestion& question(Question q);
Question parse_question(std::string_view id);
inline constexpr Question kQuestions[] = {Question::kEngagingness, Question::kHumanness};

enum class LogSide { kA, kB };

struct Judgment {
  std::string annotator;
  LogSide winner = LogSide::kA;  // which log won, independent of display order
  std::string justification;
  bool shown_swapped = false;  // log B was displayed first
  bool flagged = false;        // excluded from aggregation
};

// Maps a choice of the displayed first/second conversation back to a log.
LogSide winner_from_display(bool chose_first, bool shown_swapped);

struct AcuteTrial {
  std::string id;
  std::string model_a, model_b;
  std::string log_a, log_b;  // record ids of the two conversations
  Question question = Question::kEngagingness;
  std::vector<Judgment> judgments;
};

struct AcuteResult {
  std::string model_a, model_b;
  Question question = Question::kEngagingness;
  std::size_t judgments = 0;
  std::size_t wins_a = 0;
  std::size_t excluded = 0;  // flagged judgments left out
  double win_rate_a = 0.0;
  double p_value = 1.0;
  std::string stars;  // "**" for p < 0.01, "*" for p < 0.05
};

// One row per question that has at least one usable judgment.
std::vector<AcuteResult> acute_aggregate(std::span<const AcuteTrial> trials);
std::string render_acute(std::span<const AcuteResult> results);

}  // namespace dialogkit::eval
