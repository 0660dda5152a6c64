#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace clbench {

using TokenId = std::size_t;
using TokenIds = std::vector<TokenId>;

inline constexpr std::size_t kDefaultMaxLen = 128;

/// Whitespace-token vocabulary with four reserved ids at the front.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kCls = 2;
  static constexpr TokenId kSep = 3;
  static constexpr std::size_t kSpecialCount = 4;

  Vocabulary() : tokens_{"[PAD]", "[UNK]", "[CLS]", "[SEP]"} {}

  /// Keeps the `max_size - 4` most frequent tokens (ties broken lexicographically).
  template <class Range>
  static Vocabulary build(const Range& texts, std::size_t max_size = 30000, std::size_t min_freq = 1) {
    std::map<std::string, std::size_t> freq;
    for (const auto& text : texts)
      for (auto& tok : split_whitespace(text)) ++freq[tok];
    std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocabulary vocab;
    for (auto& [tok, count] : ranked) {
      if (vocab.size() >= max_size) break;
      if (count < min_freq) break;
      vocab.add(tok);
    }
    return vocab;
  }

  /// Rebuilds from the id-ordered token list produced by tokens().
  static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
    if (tokens.size() < kSpecialCount) throw std::invalid_argument("vocabulary: missing special tokens");
    Vocabulary vocab;
    for (std::size_t i = 0; i < kSpecialCount; ++i)
      if (tokens[i] != vocab.tokens_[i]) throw std::invalid_argument("vocabulary: special token mismatch at " + std::to_string(i));
    for (std::size_t i = kSpecialCount; i < tokens.size(); ++i) vocab.add(tokens[i]);
    return vocab;
  }

  std::size_t size() const { return tokens_.size(); }
  bool empty() const { return tokens_.size() == kSpecialCount; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  TokenId id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnk : it->second;
  }

  /// [CLS] body [SEP] then [PAD] up to exactly max_len ids; the body is
  /// truncated so [SEP] always survives.
  TokenIds tokenize(std::string_view text, std::size_t max_len = kDefaultMaxLen) const {
    if (empty()) throw std::logic_error("tokenize: vocabulary is empty");
    if (max_len < 3) throw std::invalid_argument("tokenize: max_len must be at least 3");
    TokenIds ids{kCls};
    for (auto& tok : split_whitespace(text)) {
      if (ids.size() + 1 >= max_len) break;
      ids.push_back(id(tok));
    }
    ids.push_back(kSep);
    ids.resize(max_len, kPad);
    return ids;
  }

  static std::vector<std::string> split_whitespace(std::string_view text) {
    std::vector<std::string> out;
    std::istringstream in{std::string(text)};
    for (std::string tok; in >> tok;) out.push_back(std::move(tok));
    return out;
  }

 private:
  void add(const std::string& token) {
    if (index_.contains(token)) return;
    if (std::find(tokens_.begin(), tokens_.begin() + kSpecialCount, token) != tokens_.begin() + kSpecialCount) return;
    index_.emplace(token, tokens_.size());
    tokens_.push_back(token);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Number of leading ids before the first [PAD].
inline std::size_t content_length(std::span<const TokenId> ids) {
  auto it = std::find(ids.begin(), ids.end(), Vocabulary::kPad);
  return static_cast<std::size_t>(it - ids.begin());
}

}  // namespace clbench
