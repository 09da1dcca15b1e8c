#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace dialogkit {

using TokenId = int;
using TokenIds = std::vector<TokenId>;

namespace bpe {

inline constexpr std::size_t kMaxSequenceTokens = 128;
inline constexpr std::uint32_t kVocabFormatVersion = 1;

struct SpecialIds {
  TokenId pad = 256;
  TokenId start = 257;
  TokenId end = 258;
  TokenId sep = 259;
};

inline constexpr std::size_t kByteTokens = 256;
inline constexpr std::size_t kSpecialTokens = 4;
inline constexpr std::size_t kBaseVocab = kByteTokens + kSpecialTokens;

class UnknownTokenError : public std::out_of_range {
 public:
  explicit UnknownTokenError(TokenId id)
      : std::out_of_range("unknown token id " + std::to_string(id)), id_(id) {}
  TokenId id() const { return id_; }

 private:
  TokenId id_;
};

// Byte-level BPE vocabulary. Ids 0..255 are raw bytes, 256..259 the special
// tokens, and every later id is the result of one learned merge.
class Vocab {
 public:
  Vocab();

  std::size_t size() const { return tokens_.size(); }
  const SpecialIds& specials() const { return specials_; }
  const std::vector<std::pair<TokenId, TokenId>>& merges() const { return merges_; }

  bool is_special(TokenId id) const { return id >= 256 && id < 260; }
  // Raw bytes of a token; empty for specials.
  const std::string& token_bytes(TokenId id) const;
  // Printable form for debugging and reports.
  std::string token_string(TokenId id) const;

  TokenIds encode(std::string_view text) const;
  // Specials are dropped; ids outside the vocabulary throw UnknownTokenError.
  std::string decode(std::span<const TokenId> ids) const;

  std::string serialize() const;
  static Vocab deserialize(std::string_view text);
  std::uint64_t fingerprint() const;

  // Appends a merge of two existing tokens and returns the merged id.
  TokenId add_merge(TokenId left, TokenId right);

 private:
  TokenIds encode_chunk(std::string_view chunk) const;

  SpecialIds specials_;
  std::vector<std::string> tokens_;
  std::vector<std::pair<TokenId, TokenId>> merges_;
  std::unordered_map<std::uint64_t, std::pair<std::size_t, TokenId>> merge_rank_;
  std::unordered_map<std::string, TokenId> by_bytes_;
};

// Splits text into pre-tokenization chunks: runs of letters (ASCII letters
// and all non-ASCII bytes), digits, punctuation or whitespace. A single space
// in front of a non-space run is attached to that run as its leading byte.
std::vector<std::string_view> pretokenize(std::string_view text);

// Greedy highest-frequency pair merging over the pre-tokenized corpus until
// the vocabulary reaches target_size or no pair is left. Ties go to the
// lexicographically smallest (left bytes, right bytes).
Vocab train(std::span<const std::string> corpus, std::size_t target_size);

// Model output is arbitrary bytes; text shown or stored as JSON replaces
// each maximal invalid UTF-8 subsequence with U+FFFD.
std::string to_valid_utf8(std::string_view bytes);

// Contexts keep their most recent tokens, labels their first tokens.
TokenIds truncate_context(TokenIds ids, std::size_t limit = kMaxSequenceTokens);
TokenIds truncate_label(TokenIds ids, std::size_t limit = kMaxSequenceTokens);

}  // namespace bpe
}  // namespace dialogkit
