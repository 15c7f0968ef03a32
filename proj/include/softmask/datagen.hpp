#pragma once

// Synthetic training data: confusion tables, the corruption process, a small
// template language with agreement, and the on-disk formats (corpus lines,
// confusion TSV, JSON Lines example pairs).

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "softmask/common.hpp"
#include "softmask/text.hpp"

namespace softmask::data {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Example pairs
// ---------------------------------------------------------------------------

/// Corrupted input x, gold output y, and labels g_i = [x_i != y_i] derived from them.
class ExamplePair {
 public:
  ExamplePair() = default;
  ExamplePair(TokenIds x, TokenIds y) : x_(std::move(x)), y_(std::move(y)) {
    if (x_.size() != y_.size()) {
      throw ContractError("example pair lengths differ: " + std::to_string(x_.size()) + " vs " +
                          std::to_string(y_.size()));
    }
    labels_.resize(x_.size());
    for (std::size_t i = 0; i < x_.size(); ++i) labels_[i] = x_[i] != y_[i] ? 1 : 0;
  }

  const TokenIds& x() const { return x_; }
  const TokenIds& y() const { return y_; }
  const std::vector<int>& labels() const { return labels_; }
  std::size_t size() const { return x_.size(); }
  bool has_error() const { return x_ != y_; }

  friend bool operator==(const ExamplePair& a, const ExamplePair& b) { return a.x_ == b.x_ && a.y_ == b.y_; }

 private:
  TokenIds x_;
  TokenIds y_;
  std::vector<int> labels_;
};

// ---------------------------------------------------------------------------
// Confusion table
// ---------------------------------------------------------------------------

struct Substitute {
  std::size_t id;
  double weight;
};

/// For each character id, the plausible erroneous substitutes and their weights.
class ConfusionTable {
 public:
  explicit ConfusionTable(std::size_t vocab_size = 0) : vocab_size_(vocab_size) {}

  std::size_t vocab_size() const { return vocab_size_; }

  void add(std::size_t original, std::size_t substitute, double weight) {
    if (original == substitute) {
      throw ContractError("confusion table entry maps id " + std::to_string(original) + " to itself");
    }
    if (original >= vocab_size_ || substitute >= vocab_size_) {
      throw ContractError("confusion table id outside vocabulary of size " + std::to_string(vocab_size_));
    }
    if (!(weight > 0.0) || !std::isfinite(weight)) {
      throw ContractError("confusion weight must be positive, got " + std::to_string(weight));
    }
    entries_[original].push_back({substitute, weight});
  }

  const std::vector<Substitute>* substitutes(std::size_t original) const {
    auto it = entries_.find(original);
    return it == entries_.end() ? nullptr : &it->second;
  }

  const std::map<std::size_t, std::vector<Substitute>>& entries() const { return entries_; }

  /// Seeded stand-in for a homophone table: every non-special character gets
  /// between min_subs and max_subs distinct substitutes with weights in [0.5, 1.5).
  static ConfusionTable synthetic(const Vocabulary& vocab, std::uint64_t seed, std::size_t min_subs = 1,
                                  std::size_t max_subs = 4) {
    const std::size_t v = vocab.size();
    const std::size_t pool = v - Vocabulary::kNumSpecial;
    if (min_subs == 0 || min_subs > max_subs || max_subs >= pool) {
      throw ContractError("synthetic confusion table: invalid substitute count range");
    }
    ConfusionTable table(v);
    Rng rng(derive_seed(seed, 0xC0FFu));
    for (std::size_t c = Vocabulary::kNumSpecial; c < v; ++c) {
      const std::size_t count = min_subs + uniform_index(rng, max_subs - min_subs + 1);
      std::vector<std::size_t> candidates;
      for (std::size_t s = Vocabulary::kNumSpecial; s < v; ++s) {
        if (s != c) candidates.push_back(s);
      }
      shuffle(candidates, rng);
      for (std::size_t k = 0; k < count; ++k) {
        table.add(c, candidates[k], 0.5 + uniform01(rng));
      }
    }
    return table;
  }

  /// TSV: `char<TAB>sub1:weight1,sub2:weight2,...`, one original character per line.
  std::string to_tsv(const Vocabulary& vocab) const {
    std::ostringstream out;
    out.precision(17);
    for (const auto& [id, subs] : entries_) {
      out << utf8_char(vocab.symbol(id)) << '\t';
      for (std::size_t k = 0; k < subs.size(); ++k) {
        out << (k ? "," : "") << utf8_char(vocab.symbol(subs[k].id)) << ':' << subs[k].weight;
      }
      out << '\n';
    }
    return out.str();
  }

  static ConfusionTable from_tsv(std::string_view text, const Vocabulary& vocab) {
    ConfusionTable table(vocab.size());
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start < text.size()) {
      std::size_t end = text.find('\n', start);
      if (end == std::string_view::npos) end = text.size();
      std::string_view line = text.substr(start, end - start);
      start = end + 1;
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string_view::npos) {
        throw FormatError("confusion table line " + std::to_string(line_no) + ": missing tab");
      }
      const std::u32string original = utf8_decode(line.substr(0, tab));
      if (original.size() != 1) {
        throw FormatError("confusion table line " + std::to_string(line_no) + ": key must be one character");
      }
      if (!vocab.contains(original[0])) {
        spdlog::debug("confusion table line {}: character outside vocabulary skipped", line_no);
        continue;
      }
      std::string_view rest = line.substr(tab + 1);
      while (!rest.empty()) {
        const auto comma = rest.find(',');
        std::string_view item = rest.substr(0, comma);
        rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
        const auto colon = item.rfind(':');
        if (colon == std::string_view::npos) {
          throw FormatError("confusion table line " + std::to_string(line_no) + ": entry without weight");
        }
        const std::u32string sub = utf8_decode(item.substr(0, colon));
        if (sub.size() != 1) {
          throw FormatError("confusion table line " + std::to_string(line_no) + ": substitute must be one character");
        }
        double weight = 0.0;
        try {
          weight = std::stod(std::string(item.substr(colon + 1)));
        } catch (const std::exception&) {
          throw FormatError("confusion table line " + std::to_string(line_no) + ": bad weight");
        }
        if (!vocab.contains(sub[0])) continue;
        table.add(vocab.id(original[0]), vocab.id(sub[0]), weight);
      }
    }
    return table;
  }

 private:
  std::size_t vocab_size_;
  std::map<std::size_t, std::vector<Substitute>> entries_;
};

// ---------------------------------------------------------------------------
// Corruption
// ---------------------------------------------------------------------------

struct CorruptionPolicy {
  double replace_rate = 0.15;
  double confusion_share = 0.80;
  double random_share = 0.20;
  std::uint64_t seed = 0;
  // Replace exactly round(rate * eligible) positions instead of independent draws.
  bool exact_count = false;

  void validate() const {
    if (!(replace_rate >= 0.0 && replace_rate <= 1.0)) {
      throw ContractError("replace_rate must lie in [0, 1], got " + std::to_string(replace_rate));
    }
    if (!(confusion_share >= 0.0 && confusion_share <= 1.0) || !(random_share >= 0.0 && random_share <= 1.0) ||
        std::abs(confusion_share + random_share - 1.0) > 1e-12) {
      throw ContractError("confusion_share and random_share must be in [0, 1] and sum to 1");
    }
  }
};

struct CorruptionStats {
  std::size_t eligible = 0;
  std::size_t replaced = 0;
  std::size_t from_table = 0;
  std::size_t random = 0;
  std::size_t fallbacks = 0;  // table draws that fell back to a random character

  CorruptionStats& operator+=(const CorruptionStats& o) {
    eligible += o.eligible;
    replaced += o.replaced;
    from_table += o.from_table;
    random += o.random;
    fallbacks += o.fallbacks;
    return *this;
  }
};

namespace detail {

inline std::size_t random_substitute(std::size_t original, std::size_t vocab_size, Rng& rng) {
  const std::size_t pool = vocab_size - Vocabulary::kNumSpecial;
  if (pool < 2) {
    throw ContractError("random substitution needs at least two ordinary characters");
  }
  // Uniform over ordinary ids except the original.
  std::size_t pick = Vocabulary::kNumSpecial + uniform_index(rng, pool - 1);
  if (pick >= original) ++pick;
  return pick;
}

inline std::size_t weighted_substitute(const std::vector<Substitute>& subs, Rng& rng) {
  double total = 0.0;
  for (const auto& s : subs) total += s.weight;
  double u = uniform01(rng) * total;
  for (const auto& s : subs) {
    if (u < s.weight) return s.id;
    u -= s.weight;
  }
  return subs.back().id;
}

}  // namespace detail

/// Corrupts a clean sequence. Each ordinary (non-special) position is replaced
/// with probability replace_rate; a replacement comes from the confusion table
/// with probability confusion_share, otherwise uniformly from the other ordinary
/// characters. Characters missing from the table fall back to a random draw.
inline ExamplePair corrupt(const TokenIds& clean, const ConfusionTable& table, const CorruptionPolicy& policy,
                           Rng& rng, CorruptionStats* stats = nullptr) {
  policy.validate();
  const std::size_t v = table.vocab_size();
  CorruptionStats local;
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    if (clean[i] >= v) {
      throw ContractError("corrupt: id " + std::to_string(clean[i]) + " outside vocabulary");
    }
    if (!Vocabulary::is_special(clean[i])) eligible.push_back(i);
  }
  local.eligible = eligible.size();

  std::vector<std::size_t> chosen;
  if (policy.exact_count) {
    const auto k = static_cast<std::size_t>(std::llround(policy.replace_rate * static_cast<double>(eligible.size())));
    std::vector<std::size_t> order = eligible;
    shuffle(order, rng);
    order.resize(k);
    std::sort(order.begin(), order.end());
    chosen = std::move(order);
  } else {
    for (std::size_t i : eligible) {
      if (uniform01(rng) < policy.replace_rate) chosen.push_back(i);
    }
  }

  TokenIds x = clean;
  for (std::size_t i : chosen) {
    const std::size_t original = clean[i];
    if (uniform01(rng) < policy.confusion_share) {
      const auto* subs = table.substitutes(original);
      if (subs != nullptr && !subs->empty()) {
        x[i] = detail::weighted_substitute(*subs, rng);
        ++local.from_table;
      } else {
        spdlog::debug("corrupt: id {} has no confusion entry, drawing a random substitute", original);
        x[i] = detail::random_substitute(original, v, rng);
        ++local.random;
        ++local.fallbacks;
      }
    } else {
      x[i] = detail::random_substitute(original, v, rng);
      ++local.random;
    }
    ++local.replaced;
  }
  if (stats != nullptr) *stats += local;
  return ExamplePair(std::move(x), clean);
}

/// Corrupts every sentence with its own stream derived from (policy.seed, index),
/// so results do not depend on processing order.
inline std::vector<ExamplePair> corrupt_all(const std::vector<TokenIds>& clean, const ConfusionTable& table,
                                            const CorruptionPolicy& policy, CorruptionStats* stats = nullptr) {
  std::vector<ExamplePair> pairs;
  pairs.reserve(clean.size());
  for (std::size_t i = 0; i < clean.size(); ++i) {
    Rng rng(derive_seed(policy.seed, i));
    pairs.push_back(corrupt(clean[i], table, policy, rng, stats));
  }
  return pairs;
}

// ---------------------------------------------------------------------------
// Template language
// ---------------------------------------------------------------------------

struct WordClass {
  std::string name;
  std::vector<std::string> words;
};

/// Slots of `follower` class use the same word index as the first slot of
/// `leader` class in the same sentence.
struct Agreement {
  std::size_t leader;
  std::size_t follower;
};

struct GrammarSpec {
  std::vector<WordClass> classes;
  std::vector<std::vector<std::size_t>> templates;  // sequences of class indices
  std::vector<Agreement> agreements;
  std::string separator = " ";

  void validate() const {
    if (classes.empty() || templates.empty()) {
      throw ContractError("grammar needs at least one word class and one template");
    }
    for (const auto& c : classes) {
      if (c.words.empty()) throw ContractError("word class '" + c.name + "' is empty");
    }
    for (const auto& t : templates) {
      if (t.empty()) throw ContractError("grammar template is empty");
      for (std::size_t c : t) {
        if (c >= classes.size()) throw ContractError("template refers to unknown class " + std::to_string(c));
      }
    }
    for (const auto& a : agreements) {
      if (a.leader >= classes.size() || a.follower >= classes.size() || a.leader == a.follower) {
        throw ContractError("agreement refers to invalid classes");
      }
      if (classes[a.leader].words.size() != classes[a.follower].words.size()) {
        throw ContractError("agreeing classes '" + classes[a.leader].name + "' and '" + classes[a.follower].name +
                            "' must have the same number of words");
      }
    }
  }
};

/// One sentence per call, words joined by the separator.
inline std::string generate_sentence(const GrammarSpec& grammar, Rng& rng) {
  const auto& tmpl = grammar.templates[uniform_index(rng, grammar.templates.size())];
  std::vector<std::size_t> picks(tmpl.size());
  for (std::size_t s = 0; s < tmpl.size(); ++s) {
    picks[s] = uniform_index(rng, grammar.classes[tmpl[s]].words.size());
  }
  for (const Agreement& a : grammar.agreements) {
    const auto lead = std::find(tmpl.begin(), tmpl.end(), a.leader);
    if (lead == tmpl.end()) continue;
    const std::size_t index = picks[static_cast<std::size_t>(lead - tmpl.begin())];
    for (std::size_t s = 0; s < tmpl.size(); ++s) {
      if (tmpl[s] == a.follower) picks[s] = index;
    }
  }
  std::string sentence;
  for (std::size_t s = 0; s < tmpl.size(); ++s) {
    if (s) sentence += grammar.separator;
    sentence += grammar.classes[tmpl[s]].words[picks[s]];
  }
  return sentence;
}

inline std::vector<std::string> synth_corpus(std::size_t size, const GrammarSpec& grammar, Rng& rng) {
  grammar.validate();
  std::vector<std::string> out;
  out.reserve(size);
  for (std::size_t i = 0; i < size; ++i) out.push_back(generate_sentence(grammar, rng));
  return out;
}

struct ToyLanguageOptions {
  std::size_t alphabet_size = 55;  // drawn from a-z, A-Z, 0-9 in that order
  std::size_t words_per_class = 10;
  std::size_t min_word_length = 3;
  std::size_t max_word_length = 4;
  std::size_t min_distance = 3;  // Hamming distance between same-length words
};

/// Subject/verb/object/modifier language: verbs agree with subjects and
/// modifiers agree with objects, so a corrupted word can be recovered both from
/// its own letters and from a word elsewhere in the sentence.
inline GrammarSpec toy_grammar(std::uint64_t seed, const ToyLanguageOptions& options = {}) {
  const std::string symbols = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
  if (options.alphabet_size < 2 || options.alphabet_size > symbols.size()) {
    throw ContractError("toy grammar alphabet size must be in [2, " + std::to_string(symbols.size()) + "]");
  }
  if (options.min_word_length == 0 || options.min_word_length > options.max_word_length) {
    throw ContractError("toy grammar word length range is invalid");
  }
  const std::string alphabet = symbols.substr(0, options.alphabet_size);
  const std::vector<std::string> names{"subject", "verb", "object", "modifier"};

  auto hamming = [](const std::string& a, const std::string& b) {
    std::size_t d = 0;
    for (std::size_t i = 0; i < a.size(); ++i) d += a[i] != b[i];
    return d;
  };

  for (std::uint64_t attempt = 0; attempt < 1000; ++attempt) {
    Rng rng(derive_seed(seed, 0x6A7u, attempt));
    // Cycling through shuffled decks spreads every letter across the lexicon.
    std::string deck;
    std::size_t deck_pos = 0;
    auto next_char = [&]() {
      if (deck_pos == deck.size()) {
        deck = alphabet;
        std::vector<char> tmp(deck.begin(), deck.end());
        shuffle(tmp, rng);
        deck.assign(tmp.begin(), tmp.end());
        deck_pos = 0;
      }
      return deck[deck_pos++];
    };
    std::vector<std::string> lexicon;
    GrammarSpec g;
    bool ok = true;
    for (const auto& name : names) {
      WordClass wc{name, {}};
      for (std::size_t w = 0; w < options.words_per_class && ok; ++w) {
        bool placed = false;
        for (int tries = 0; tries < 200 && !placed; ++tries) {
          const std::size_t len =
              options.min_word_length + uniform_index(rng, options.max_word_length - options.min_word_length + 1);
          std::string word;
          for (std::size_t k = 0; k < len; ++k) word.push_back(next_char());
          const bool distinct = std::all_of(lexicon.begin(), lexicon.end(), [&](const std::string& other) {
            return other.size() != word.size() || hamming(other, word) >= options.min_distance;
          });
          if (distinct) {
            lexicon.push_back(word);
            wc.words.push_back(word);
            placed = true;
          }
        }
        ok = placed;
      }
      g.classes.push_back(std::move(wc));
    }
    if (!ok) continue;
    std::string used;
    for (const auto& w : lexicon) used += w;
    const bool covers = std::all_of(alphabet.begin(), alphabet.end(),
                                    [&](char c) { return used.find(c) != std::string::npos; });
    if (!covers) continue;
    g.templates = {{0, 1, 2}, {0, 1, 2, 3}, {3, 0, 1, 2}};
    g.agreements = {{0, 1}, {2, 3}};
    g.validate();
    return g;
  }
  throw ContractError("could not build a toy lexicon with the requested distance; relax the options");
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot open " + path);
  }
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot write " + path);
  }
  out << content;
  if (!out) {
    throw std::runtime_error("failed writing " + path);
  }
}

/// One sentence per line; a trailing newline and CR line endings are tolerated.
inline std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
    start = end + 1;
  }
  return lines;
}

inline std::string join_lines(const std::vector<std::string>& lines) {
  std::string out;
  for (const auto& l : lines) {
    out += l;
    out += '\n';
  }
  return out;
}

/// JSON Lines: {"x": corrupted, "y": gold}; labels are derived on load.
inline std::string pairs_to_jsonl(const std::vector<ExamplePair>& pairs, const Vocabulary& vocab) {
  std::string out;
  for (const auto& p : pairs) {
    nlohmann::ordered_json j;
    j["x"] = vocab.decode(p.x());
    j["y"] = vocab.decode(p.y());
    out += j.dump();
    out += '\n';
  }
  return out;
}

struct TextPair {
  std::string x;
  std::string y;
};

inline std::vector<TextPair> parse_jsonl(const std::string& text) {
  std::vector<TextPair> out;
  const auto lines = split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(lines[i]);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("examples line " + std::to_string(i + 1) + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("x") || !j.contains("y") || !j["x"].is_string() || !j["y"].is_string()) {
      throw FormatError("examples line " + std::to_string(i + 1) + ": expected string fields \"x\" and \"y\"");
    }
    TextPair p{j["x"].get<std::string>(), j["y"].get<std::string>()};
    if (utf8_decode(p.x).size() != utf8_decode(p.y).size()) {
      throw FormatError("examples line " + std::to_string(i + 1) + ": x and y differ in length");
    }
    out.push_back(std::move(p));
  }
  return out;
}

inline std::vector<ExamplePair> encode_pairs(const std::vector<TextPair>& text, const Vocabulary& vocab) {
  std::vector<ExamplePair> out;
  out.reserve(text.size());
  for (const auto& p : text) out.emplace_back(vocab.encode(p.x), vocab.encode(p.y));
  return out;
}

// ---------------------------------------------------------------------------
// Complete synthetic task
// ---------------------------------------------------------------------------

struct SyntheticTaskOptions {
  std::uint64_t seed = 7;
  std::size_t train = 20000;
  std::size_t dev = 2000;
  std::size_t test = 2000;
  ToyLanguageOptions language;
  CorruptionPolicy corruption;
  std::size_t min_substitutes = 1;  // 1..1 gives deterministic confusion pairs
  std::size_t max_substitutes = 1;
};

struct SyntheticTask {
  GrammarSpec grammar;
  Vocabulary vocab;
  ConfusionTable confusion;
  std::vector<std::string> corpus;  // clean training sentences
  std::vector<ExamplePair> train;
  std::vector<ExamplePair> dev;
  std::vector<ExamplePair> test;
  CorruptionStats stats;
};

inline SyntheticTask build_synthetic_task(const SyntheticTaskOptions& options) {
  SyntheticTask task;
  task.grammar = toy_grammar(options.seed, options.language);
  Rng rng(derive_seed(options.seed, 0x5E7u));
  const std::size_t total = options.train + options.dev + options.test;
  std::vector<std::string> sentences = synth_corpus(total, task.grammar, rng);
  task.corpus.assign(sentences.begin(), sentences.begin() + static_cast<std::ptrdiff_t>(options.train));
  task.vocab = build_vocab(sentences);
  task.confusion =
      ConfusionTable::synthetic(task.vocab, options.seed, options.min_substitutes, options.max_substitutes);
  std::vector<TokenIds> clean;
  clean.reserve(total);
  for (const auto& s : sentences) clean.push_back(task.vocab.encode(s));
  CorruptionPolicy policy = options.corruption;
  policy.seed = derive_seed(options.seed, 0xBADu);
  auto pairs = corrupt_all(clean, task.confusion, policy, &task.stats);
  auto train_end = pairs.begin() + static_cast<std::ptrdiff_t>(options.train);
  auto dev_end = train_end + static_cast<std::ptrdiff_t>(options.dev);
  task.train.assign(pairs.begin(), train_end);
  task.dev.assign(train_end, dev_end);
  task.test.assign(dev_end, pairs.end());
  return task;
}

}  // namespace softmask::data
