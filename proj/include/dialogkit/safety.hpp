#pragma once

#include <filesystem>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dialogkit/bpe.hpp"
#include "dialogkit/model.hpp"

namespace dialogkit::safety {

// Splits on non-letter boundaries and lowercases. Letters are ASCII letters
// and any byte of a multi-byte UTF-8 sequence.
std::vector<std::string> letter_words(std::string_view text);

// Lowercase terms. A term with internal non-letters ("foo-bar") matches as a
// phrase of consecutive words.
class WordList {
 public:
  WordList() = default;
  // Lowercases; throws std::invalid_argument for a term without letters.
  explicit WordList(const std::vector<std::string>& terms);
  // One term per line; blank lines and lines starting with '#' are skipped.
  static WordList parse(std::string_view text);
  static WordList from_file(const std::filesystem::path& path);

  bool empty() const { return terms_.empty(); }
  std::size_t size() const { return terms_.size(); }
  const std::set<std::vector<std::string>>& terms() const { return terms_; }

 private:
  std::set<std::vector<std::string>> terms_;
};

struct WordCheck {
  bool flagged = false;
  std::vector<std::string> matched;  // distinct, in order of first match
};

WordCheck wordlist_check(std::string_view text, const WordList& list);

// The response after its context and a separator, most recent tokens kept.
TokenIds classifier_input(std::span<const TokenId> context, std::span<const TokenId> response,
                          TokenId separator = bpe::SpecialIds{}.sep,
                          std::size_t limit = bpe::kMaxSequenceTokens);

// Flags iff P(unsafe) > 0.5.
bool classifier_check(const model::Classifier& head, std::span<const TokenId> context,
                      std::span<const TokenId> response);

inline constexpr std::string_view kDefaultCannedMessage =
    "Let's talk about something else. What do you like to do on weekends?";

struct GateResult {
  std::string text;          // what may be shown
  bool flagged = false;
  bool by_wordlist = false;
  bool by_classifier = false;
  std::vector<std::string> matched;
  std::string original;      // the response as generated
};

// Either check may be absent. A flagged response is replaced by the canned
// message; if the canned message is itself flagged, nothing is shown.
class SafetyGate {
 public:
  SafetyGate(const WordList* list, const model::Classifier* classifier, const bpe::Vocab& vocab,
             std::string canned = std::string(kDefaultCannedMessage));

  GateResult apply(std::span<const TokenId> context, std::string_view response) const;
  bool flags(std::span<const TokenId> context, std::string_view text) const;
  const std::string& canned() const { return canned_; }

 private:
  const WordList* list_;
  const model::Classifier* classifier_;
  const bpe::Vocab& vocab_;
  std::string canned_;
};

}  // namespace dialogkit::safety
