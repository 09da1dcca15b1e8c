#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "dialogkit/corpus.hpp"

// Deterministic generators for the bundled toy corpora. Everything here is a
// pure function of its arguments.
namespace dialogkit::synth {

struct Article {
  std::string title;
  std::vector<std::string> sentences;
  // Title on the first line, then one sentence per line.
  std::string text() const;
};

std::vector<Article> wiki_articles(std::size_t count, std::uint64_t seed);

// Two-line personas.
std::vector<std::vector<std::string>> personas(std::size_t count, std::uint64_t seed);

// Persona chats in the blended-skill style. A third of them carry a topic;
// in those, a turn that asks about the topic is answered with a sentence of
// its article, recorded as the turn's knowledge.
std::vector<corpus::DialogueEpisode> persona_chats(
    const std::vector<std::vector<std::string>>& persona_pool,
    const std::vector<Article>& articles, std::size_t count, std::uint64_t seed);

// `n` distinct utterances; utterance i is always followed by i + 1 (mod n).
std::vector<std::string> memorizable_chain(std::size_t n, std::uint64_t seed);

// Episodes walking the chain from random start points for a random number
// of turns in [min_turns, max_turns]. No personas.
std::vector<corpus::DialogueEpisode> chain_episodes(const std::vector<std::string>& chain,
                                                    std::size_t count, std::size_t min_turns,
                                                    std::size_t max_turns, std::uint64_t seed,
                                                    const std::string& source_tag);

// Question/answer pairs where every answer ends with one of a few closing
// phrases; the one containing kInjectedNgram is chosen with probability
// `injected_share`, the others share the rest equally.
inline constexpr std::string_view kInjectedNgram = "do you have";
std::vector<corpus::DialogueEpisode> injected_ngram_episodes(std::size_t count,
                                                             double injected_share,
                                                             std::uint64_t seed);

// Placeholder terms standing in for an operator-supplied unsafe word list.
const std::vector<std::string>& placeholder_unsafe_words();

struct SafetyExample {
  std::string context;
  std::string response;
  bool unsafe = false;
};

// Half unsafe (a response using a placeholder term in an insult), half benign.
std::vector<SafetyExample> safety_examples(std::size_t count, std::uint64_t seed);

}  // namespace dialogkit::synth
