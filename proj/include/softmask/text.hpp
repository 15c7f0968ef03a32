#pragma once

// UTF-8 helpers and the character vocabulary.

#include <algorithm>
#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "softmask/common.hpp"

namespace softmask {

class TextError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::u32string utf8_decode(std::string_view text) {
  std::u32string out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    const auto lead = static_cast<unsigned char>(text[i]);
    std::size_t len = 0;
    char32_t cp = 0;
    if (lead < 0x80) {
      len = 1;
      cp = lead;
    } else if ((lead >> 5) == 0x6) {
      len = 2;
      cp = lead & 0x1F;
    } else if ((lead >> 4) == 0xE) {
      len = 3;
      cp = lead & 0x0F;
    } else if ((lead >> 3) == 0x1E) {
      len = 4;
      cp = lead & 0x07;
    } else {
      throw TextError("invalid UTF-8 lead byte at offset " + std::to_string(i));
    }
    if (i + len > text.size()) {
      throw TextError("truncated UTF-8 sequence at offset " + std::to_string(i));
    }
    for (std::size_t k = 1; k < len; ++k) {
      const auto cont = static_cast<unsigned char>(text[i + k]);
      if ((cont >> 6) != 0x2) {
        throw TextError("invalid UTF-8 continuation byte at offset " + std::to_string(i + k));
      }
      cp = (cp << 6) | (cont & 0x3F);
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

inline void utf8_append(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

inline std::string utf8_encode(std::u32string_view text) {
  std::string out;
  for (char32_t cp : text) utf8_append(out, cp);
  return out;
}

inline std::string utf8_char(char32_t cp) {
  std::string out;
  utf8_append(out, cp);
  return out;
}

using TokenIds = std::vector<std::size_t>;

/// Character <-> id map. Ids 0..3 are reserved for [PAD], [UNK], [MASK] and a
/// reserved [CLS] slot; characters follow in the order they were supplied.
class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;
  static constexpr std::size_t kMask = 2;
  static constexpr std::size_t kCls = 3;
  static constexpr std::size_t kNumSpecial = 4;

  Vocabulary() = default;

  explicit Vocabulary(std::vector<char32_t> chars) : chars_(std::move(chars)) {
    for (std::size_t i = 0; i < chars_.size(); ++i) {
      if (!index_.emplace(chars_[i], i + kNumSpecial).second) {
        throw ContractError("duplicate character in vocabulary: " + utf8_char(chars_[i]));
      }
    }
  }

  std::size_t size() const { return chars_.size() + kNumSpecial; }
  const std::vector<char32_t>& chars() const { return chars_; }

  static bool is_special(std::size_t id) { return id < kNumSpecial; }

  bool contains(char32_t c) const { return index_.count(c) != 0; }

  std::size_t id(char32_t c) const {
    auto it = index_.find(c);
    return it == index_.end() ? kUnk : it->second;
  }

  char32_t symbol(std::size_t id) const {
    if (id >= size()) {
      throw IndexError("vocabulary id " + std::to_string(id) + " out of range " + std::to_string(size()));
    }
    // Special ids have no character; they render as U+FFFD so lengths are kept.
    return is_special(id) ? U'�' : chars_[id - kNumSpecial];
  }

  TokenIds encode(std::string_view utf8) const {
    TokenIds ids;
    for (char32_t c : utf8_decode(utf8)) ids.push_back(id(c));
    return ids;
  }

  std::string decode(const TokenIds& ids) const {
    std::string out;
    for (std::size_t id : ids) utf8_append(out, symbol(id));
    return out;
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.chars_ == b.chars_; }

 private:
  std::vector<char32_t> chars_;
  std::unordered_map<char32_t, std::size_t> index_;
};

/// Frequency-ordered vocabulary over all characters of the corpus; equal counts
/// are ordered by code point.
inline Vocabulary build_vocab(const std::vector<std::string>& corpus) {
  std::map<char32_t, std::size_t> counts;
  for (const std::string& line : corpus) {
    for (char32_t c : utf8_decode(line)) ++counts[c];
  }
  if (counts.empty()) {
    throw ContractError("build_vocab: corpus has no characters");
  }
  std::vector<std::pair<char32_t, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<char32_t> chars;
  for (const auto& [c, _] : ranked) chars.push_back(c);
  return Vocabulary(std::move(chars));
}

}  // namespace softmask
