#include "dialogkit/safety.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace dialogkit::safety {

namespace {

bool is_letter(unsigned char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80;
}

char lower(unsigned char c) {
  return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : static_cast<char>(c);
}

}  // namespace

std::vector<std::string> letter_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (is_letter(c)) {
      cur.push_back(lower(c));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

WordList::WordList(const std::vector<std::string>& terms) {
  for (const auto& t : terms) {
    auto words = letter_words(t);
    if (words.empty()) throw std::invalid_argument("word list term has no letters: '" + t + "'");
    terms_.insert(std::move(words));
  }
}

WordList WordList::parse(std::string_view text) {
  std::vector<std::string> terms;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto b = line.find_first_not_of(" \t");
    if (b == std::string::npos || line[b] == '#') continue;
    const auto e = line.find_last_not_of(" \t");
    terms.push_back(line.substr(b, e - b + 1));
  }
  return WordList(terms);
}

WordList WordList::from_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read word list: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

WordCheck wordlist_check(std::string_view text, const WordList& list) {
  WordCheck out;
  if (list.empty()) return out;
  const auto words = letter_words(text);
  for (std::size_t i = 0; i < words.size(); ++i) {
    // Terms sharing a first word are adjacent in the ordered set.
    for (auto it = list.terms().lower_bound({words[i]});
         it != list.terms().end() && it->front() == words[i]; ++it) {
      const auto& term = *it;
      if (i + term.size() > words.size()) continue;
      if (!std::equal(term.begin(), term.end(), words.begin() + static_cast<std::ptrdiff_t>(i))) {
        continue;
      }
      std::string joined = term.front();
      for (std::size_t k = 1; k < term.size(); ++k) joined += " " + term[k];
      if (std::find(out.matched.begin(), out.matched.end(), joined) == out.matched.end()) {
        out.matched.push_back(std::move(joined));
      }
    }
  }
  out.flagged = !out.matched.empty();
  return out;
}

TokenIds classifier_input(std::span<const TokenId> context, std::span<const TokenId> response,
                          TokenId separator, std::size_t limit) {
  TokenIds ids(context.begin(), context.end());
  ids.push_back(separator);
  ids.insert(ids.end(), response.begin(), response.end());
  return bpe::truncate_context(std::move(ids), limit);
}

bool classifier_check(const model::Classifier& head, std::span<const TokenId> context,
                      std::span<const TokenId> response) {
  return head.flag(classifier_input(context, response));
}

SafetyGate::SafetyGate(const WordList* list, const model::Classifier* classifier,
                       const bpe::Vocab& vocab, std::string canned)
    : list_(list), classifier_(classifier), vocab_(vocab), canned_(std::move(canned)) {
  if (list_ && wordlist_check(canned_, *list_).flagged) {
    throw std::invalid_argument("canned message contains a listed term");
  }
}

bool SafetyGate::flags(std::span<const TokenId> context, std::string_view text) const {
  if (list_ && wordlist_check(text, *list_).flagged) return true;
  return classifier_ && classifier_check(*classifier_, context, vocab_.encode(text));
}

GateResult SafetyGate::apply(std::span<const TokenId> context, std::string_view response) const {
  GateResult r;
  r.original = std::string(response);
  if (list_) {
    auto w = wordlist_check(response, *list_);
    r.by_wordlist = w.flagged;
    r.matched = std::move(w.matched);
  }
  if (classifier_) r.by_classifier = classifier_check(*classifier_, context, vocab_.encode(response));
  r.flagged = r.by_wordlist || r.by_classifier;
  if (!r.flagged) {
    r.text = r.original;
  } else if (!flags(context, canned_)) {
    r.text = canned_;
  }
  return r;
}

}  // namespace dialogkit::safety
