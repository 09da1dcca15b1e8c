#include "dialogkit/bpe.hpp"

#include <algorithm>
#include <limits>
#include <queue>
#include <sstream>

#include "dialogkit/rng.hpp"

namespace dialogkit::bpe {

namespace {

constexpr std::uint64_t pair_key(TokenId l, TokenId r) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(l)) << 32) |
         static_cast<std::uint32_t>(r);
}
constexpr TokenId key_left(std::uint64_t k) { return static_cast<TokenId>(k >> 32); }
constexpr TokenId key_right(std::uint64_t k) {
  return static_cast<TokenId>(k & 0xffffffffULL);
}

enum class CharClass { kSpace, kOtherSpace, kLetter, kDigit, kPunct };

CharClass classify(unsigned char c) {
  if (c == ' ') return CharClass::kSpace;
  if (c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f') {
    return CharClass::kOtherSpace;
  }
  if (c >= 0x80 || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z')) {
    return CharClass::kLetter;
  }
  if (c >= '0' && c <= '9') return CharClass::kDigit;
  return CharClass::kPunct;
}

bool is_ws(CharClass k) { return k == CharClass::kSpace || k == CharClass::kOtherSpace; }

std::string to_hex(std::string_view bytes) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (unsigned char c : bytes) {
    out += kHex[c >> 4];
    out += kHex[c & 15];
  }
  return out;
}

std::string from_hex(std::string_view hex) {
  if (hex.size() % 2 != 0 || hex.empty()) {
    throw std::runtime_error("vocab: malformed hex token '" + std::string(hex) + "'");
  }
  auto nib = [&](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    throw std::runtime_error("vocab: malformed hex token '" + std::string(hex) + "'");
  };
  std::string out;
  for (std::size_t i = 0; i < hex.size(); i += 2) {
    out += static_cast<char>(nib(hex[i]) * 16 + nib(hex[i + 1]));
  }
  return out;
}

}  // namespace

std::vector<std::string_view> pretokenize(std::string_view text) {
  std::vector<std::string_view> chunks;
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    const auto cls = classify(static_cast<unsigned char>(text[i]));
    if (is_ws(cls)) {
      std::size_t j = i;
      while (j < n && is_ws(classify(static_cast<unsigned char>(text[j])))) ++j;
      // Leave a final space for the following word.
      if (j < n && text[j - 1] == ' ') {
        if (j - 1 > i) chunks.push_back(text.substr(i, j - 1 - i));
        i = j - 1;
      } else {
        chunks.push_back(text.substr(i, j - i));
        i = j;
        continue;
      }
    }
    std::size_t start = i;
    if (text[i] == ' ') ++i;
    const auto run = classify(static_cast<unsigned char>(text[i]));
    while (i < n && classify(static_cast<unsigned char>(text[i])) == run) ++i;
    chunks.push_back(text.substr(start, i - start));
  }
  return chunks;
}

Vocab::Vocab() {
  tokens_.reserve(kBaseVocab);
  for (int b = 0; b < 256; ++b) {
    tokens_.emplace_back(1, static_cast<char>(b));
    by_bytes_.emplace(tokens_.back(), b);
  }
  for (std::size_t s = 0; s < kSpecialTokens; ++s) tokens_.emplace_back();
}

const std::string& Vocab::token_bytes(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw UnknownTokenError(id);
  return tokens_[static_cast<std::size_t>(id)];
}

std::string Vocab::token_string(TokenId id) const {
  if (id == specials_.pad) return "<pad>";
  if (id == specials_.start) return "<s>";
  if (id == specials_.end) return "</s>";
  if (id == specials_.sep) return "<sep>";
  return token_bytes(id);
}

TokenId Vocab::add_merge(TokenId left, TokenId right) {
  if (is_special(left) || is_special(right)) {
    throw std::invalid_argument("vocab: special tokens cannot be merged");
  }
  std::string merged = token_bytes(left) + token_bytes(right);
  TokenId id;
  if (auto it = by_bytes_.find(merged); it != by_bytes_.end()) {
    id = it->second;
  } else {
    id = static_cast<TokenId>(tokens_.size());
    tokens_.push_back(merged);
    by_bytes_.emplace(std::move(merged), id);
  }
  merge_rank_.emplace(pair_key(left, right), std::make_pair(merges_.size(), id));
  merges_.emplace_back(left, right);
  return id;
}

TokenIds Vocab::encode_chunk(std::string_view chunk) const {
  TokenIds sym;
  sym.reserve(chunk.size());
  for (unsigned char c : chunk) sym.push_back(c);
  while (sym.size() > 1) {
    std::size_t best_rank = std::numeric_limits<std::size_t>::max();
    TokenId best_l = -1, best_r = -1, best_id = -1;
    for (std::size_t i = 0; i + 1 < sym.size(); ++i) {
      auto it = merge_rank_.find(pair_key(sym[i], sym[i + 1]));
      if (it != merge_rank_.end() && it->second.first < best_rank) {
        best_rank = it->second.first;
        best_l = sym[i];
        best_r = sym[i + 1];
        best_id = it->second.second;
      }
    }
    if (best_id < 0) break;
    TokenIds next;
    next.reserve(sym.size());
    for (std::size_t i = 0; i < sym.size();) {
      if (i + 1 < sym.size() && sym[i] == best_l && sym[i + 1] == best_r) {
        next.push_back(best_id);
        i += 2;
      } else {
        next.push_back(sym[i++]);
      }
    }
    sym.swap(next);
  }
  return sym;
}

TokenIds Vocab::encode(std::string_view text) const {
  TokenIds out;
  for (auto chunk : pretokenize(text)) {
    auto ids = encode_chunk(chunk);
    out.insert(out.end(), ids.begin(), ids.end());
  }
  return out;
}

std::string Vocab::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    const auto& bytes = token_bytes(id);
    if (!is_special(id)) out += bytes;
  }
  return out;
}

std::string Vocab::serialize() const {
  std::ostringstream os;
  os << "#dialogkit-bpe v" << kVocabFormatVersion << '\n';
  os << "specials pad=" << specials_.pad << " start=" << specials_.start
     << " end=" << specials_.end << " sep=" << specials_.sep << '\n';
  os << "merges " << merges_.size() << '\n';
  for (const auto& [l, r] : merges_) {
    os << to_hex(token_bytes(l)) << ' ' << to_hex(token_bytes(r)) << '\n';
  }
  return os.str();
}

Vocab Vocab::deserialize(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != "#dialogkit-bpe v1") {
    throw std::runtime_error("vocab: unsupported header '" + line + "'");
  }
  if (!std::getline(in, line) || line != "specials pad=256 start=257 end=258 sep=259") {
    throw std::runtime_error("vocab: unexpected specials line '" + line + "'");
  }
  std::size_t count = 0;
  {
    std::string word;
    if (!std::getline(in, line)) throw std::runtime_error("vocab: missing merge count");
    std::istringstream ls(line);
    if (!(ls >> word >> count) || word != "merges") {
      throw std::runtime_error("vocab: malformed merge count line");
    }
  }
  Vocab v;
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(in, line)) throw std::runtime_error("vocab: truncated merge list");
    const auto sp = line.find(' ');
    if (sp == std::string::npos) throw std::runtime_error("vocab: malformed merge line");
    const std::string l = from_hex(std::string_view(line).substr(0, sp));
    const std::string r = from_hex(std::string_view(line).substr(sp + 1));
    auto li = v.by_bytes_.find(l);
    auto ri = v.by_bytes_.find(r);
    if (li == v.by_bytes_.end() || ri == v.by_bytes_.end()) {
      throw std::runtime_error("vocab: merge references an unknown token");
    }
    v.add_merge(li->second, ri->second);
  }
  return v;
}

std::uint64_t Vocab::fingerprint() const { return fnv1a(serialize()); }

Vocab train(std::span<const std::string> corpus, std::size_t target_size) {
  if (target_size <= kBaseVocab) {
    throw std::invalid_argument("bpe train: target vocabulary must exceed " +
                                std::to_string(kBaseVocab));
  }
  std::unordered_map<std::string_view, std::int64_t> chunk_freq;
  bool any = false;
  for (const auto& text : corpus) {
    for (auto c : pretokenize(text)) {
      ++chunk_freq[c];
      any = true;
    }
  }
  if (!any) throw std::invalid_argument("bpe train: empty corpus");

  struct Word {
    TokenIds sym;
    std::int64_t freq;
  };
  // Sorted for deterministic iteration.
  std::vector<std::pair<std::string_view, std::int64_t>> sorted(chunk_freq.begin(),
                                                                chunk_freq.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<Word> words;
  words.reserve(sorted.size());
  for (const auto& [chunk, f] : sorted) {
    Word w{{}, f};
    for (unsigned char c : chunk) w.sym.push_back(c);
    words.push_back(std::move(w));
  }

  Vocab vocab;
  std::unordered_map<std::uint64_t, std::int64_t> counts;
  std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> where;
  for (std::uint32_t wi = 0; wi < words.size(); ++wi) {
    const auto& s = words[wi].sym;
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
      const auto k = pair_key(s[i], s[i + 1]);
      counts[k] += words[wi].freq;
      where[k].push_back(wi);
    }
  }

  struct Entry {
    std::int64_t count;
    std::uint64_t key;
  };
  auto worse = [&vocab](const Entry& a, const Entry& b) {
    if (a.count != b.count) return a.count < b.count;
    const auto& al = vocab.token_bytes(key_left(a.key));
    const auto& bl = vocab.token_bytes(key_left(b.key));
    if (al != bl) return al > bl;
    return vocab.token_bytes(key_right(a.key)) > vocab.token_bytes(key_right(b.key));
  };
  std::priority_queue<Entry, std::vector<Entry>, decltype(worse)> heap(worse);
  for (const auto& [k, c] : counts) heap.push({c, k});

  std::vector<std::uint32_t> stamp(words.size(), 0);
  std::uint32_t iteration = 0;
  while (vocab.size() < target_size && !heap.empty()) {
    const Entry top = heap.top();
    heap.pop();
    auto cit = counts.find(top.key);
    if (cit == counts.end() || cit->second != top.count || top.count <= 0) continue;

    const TokenId l = key_left(top.key), r = key_right(top.key);
    const TokenId merged = vocab.add_merge(l, r);
    ++iteration;

    std::unordered_map<std::uint64_t, std::int64_t> delta;
    auto occurrences = std::move(where[top.key]);
    where.erase(top.key);
    for (std::uint32_t wi : occurrences) {
      if (stamp[wi] == iteration) continue;
      stamp[wi] = iteration;
      auto& w = words[wi];
      bool found = false;
      for (std::size_t i = 0; i + 1 < w.sym.size(); ++i) {
        if (w.sym[i] == l && w.sym[i + 1] == r) {
          found = true;
          break;
        }
      }
      if (!found) continue;
      for (std::size_t i = 0; i + 1 < w.sym.size(); ++i) {
        delta[pair_key(w.sym[i], w.sym[i + 1])] -= w.freq;
      }
      TokenIds next;
      next.reserve(w.sym.size());
      for (std::size_t i = 0; i < w.sym.size();) {
        if (i + 1 < w.sym.size() && w.sym[i] == l && w.sym[i + 1] == r) {
          next.push_back(merged);
          i += 2;
        } else {
          next.push_back(w.sym[i++]);
        }
      }
      w.sym.swap(next);
      for (std::size_t i = 0; i + 1 < w.sym.size(); ++i) {
        const auto k = pair_key(w.sym[i], w.sym[i + 1]);
        delta[k] += w.freq;
        if (k != top.key) where[k].push_back(wi);
      }
    }
    for (const auto& [k, d] : delta) {
      if (d == 0) continue;
      auto& c = counts[k];
      c += d;
      if (c > 0) heap.push({c, k});
    }
    counts.erase(top.key);
  }
  return vocab;
}

std::string to_valid_utf8(std::string_view b) {
  std::string out;
  out.reserve(b.size());
  std::size_t i = 0;
  while (i < b.size()) {
    const auto c = static_cast<unsigned char>(b[i]);
    std::size_t len = 0;
    unsigned char lo = 0x80, hi = 0xBF;
    if (c < 0x80) len = 1;
    else if (c >= 0xC2 && c <= 0xDF) len = 2;
    else if (c >= 0xE0 && c <= 0xEF) {
      len = 3;
      if (c == 0xE0) lo = 0xA0;
      if (c == 0xED) hi = 0x9F;
    } else if (c >= 0xF0 && c <= 0xF4) {
      len = 4;
      if (c == 0xF0) lo = 0x90;
      if (c == 0xF4) hi = 0x8F;
    }
    std::size_t ok = len == 0 ? 0 : 1;
    // Only the second byte has a narrowed range.
    while (ok > 0 && ok < len && i + ok < b.size()) {
      const auto d = static_cast<unsigned char>(b[i + ok]);
      const unsigned char l = ok == 1 ? lo : 0x80, h = ok == 1 ? hi : 0xBF;
      if (d < l || d > h) break;
      ++ok;
    }
    if (len > 0 && ok == len) {
      out.append(b.substr(i, len));
      i += len;
    } else {
      out += "\xEF\xBF\xBD";
      i += std::max<std::size_t>(ok, 1);
    }
  }
  return out;
}

TokenIds truncate_context(TokenIds ids, std::size_t limit) {
  if (ids.size() > limit) ids.erase(ids.begin(), ids.end() - static_cast<std::ptrdiff_t>(limit));
  return ids;
}

TokenIds truncate_label(TokenIds ids, std::size_t limit) {
  if (ids.size() > limit) ids.resize(limit);
  return ids;
}

}  // namespace dialogkit::bpe
