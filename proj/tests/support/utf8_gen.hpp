#pragma once

#include <string>

#include "dialogkit/rng.hpp"

namespace dktest {

inline void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
}

// Random valid UTF-8: ASCII words and whitespace mixed with Latin-1,
// CJK and emoji code points.
inline std::string random_utf8(dialogkit::Rng& rng, std::size_t max_len = 40) {
  std::string s;
  const auto len = rng.below(max_len + 1);
  for (std::size_t i = 0; i < len; ++i) {
    const auto kind = rng.below(10);
    char32_t cp;
    if (kind < 4) {
      cp = static_cast<char32_t>('a' + rng.below(26));
    } else if (kind < 6) {
      static constexpr char32_t ws[] = {U' ', U' ', U' ', U'\n', U'\t'};
      cp = ws[rng.below(5)];
    } else if (kind < 7) {
      cp = static_cast<char32_t>(0x21 + rng.below(0x5E));
    } else if (kind < 8) {
      cp = static_cast<char32_t>(0xA0 + rng.below(0x160));
    } else if (kind < 9) {
      cp = static_cast<char32_t>(0x4E00 + rng.below(0x500));
    } else {
      cp = static_cast<char32_t>(0x1F600 + rng.below(0x50));
    }
    append_utf8(s, cp);
  }
  return s;
}

}  // namespace dktest
