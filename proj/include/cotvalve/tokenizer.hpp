#pragma once

// Closed-vocabulary word-level tokenizer. Letters group into word tokens,
// digits are always single tokens, and every other non-space character is
// its own token (a run of '#' is one token).

#include <cctype>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cotvalve/io.hpp"
#include "cotvalve/tensor.hpp"

namespace cotvalve {

using TokenId = int32_t;
using TokenSeq = std::vector<TokenId>;

class Tokenizer {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kSep = 3;
  static constexpr TokenId kUnk = 4;

  explicit Tokenizer(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.size() < 5 || tokens_[kPad] != "<pad>" || tokens_[kBos] != "<bos>" ||
        tokens_[kEos] != "<eos>" || tokens_[kSep] != "<sep>" || tokens_[kUnk] != "<unk>")
      throw ValidationError("vocabulary must start with <pad> <bos> <eos> <sep> <unk>");
    for (size_t i = 0; i < tokens_.size(); ++i) {
      if (tokens_[i].empty()) throw ValidationError("empty token at line " + std::to_string(i));
      if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second)
        throw ValidationError("duplicate token '" + tokens_[i] + "'");
    }
  }

  /// The vocabulary covering every string the corpus templates can produce.
  static Tokenizer standard();

  static Tokenizer load(const std::filesystem::path& path) {
    std::vector<std::string> toks;
    std::string text = io::read_file(path);
    size_t start = 0;
    while (start < text.size()) {
      size_t end = text.find('\n', start);
      if (end == std::string::npos) end = text.size();
      toks.push_back(text.substr(start, end - start));
      start = end + 1;
    }
    return Tokenizer(std::move(toks));
  }

  std::string serialize() const {
    std::string out;
    for (const auto& t : tokens_) out += t + "\n";
    return out;
  }

  size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<size_t>(id)); }
  std::optional<TokenId> find(std::string_view s) const {
    auto it = index_.find(std::string(s));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  TokenSeq encode(std::string_view text) const {
    TokenSeq out;
    size_t i = 0;
    while (i < text.size()) {
      const unsigned char c = static_cast<unsigned char>(text[i]);
      if (std::isspace(c)) {
        ++i;
      } else if (std::isdigit(c)) {
        out.push_back(lookup(text.substr(i, 1)));
        ++i;
      } else if (std::isalpha(c)) {
        size_t j = i;
        while (j < text.size() && std::isalpha(static_cast<unsigned char>(text[j]))) ++j;
        out.push_back(lookup(text.substr(i, j - i)));
        i = j;
      } else if (c == '#') {
        size_t j = i;
        while (j < text.size() && text[j] == '#') ++j;
        out.push_back(lookup(text.substr(i, j - i)));
        i = j;
      } else if (c == '<') {
        // special tokens such as <eos> written literally
        const size_t j = text.find('>', i);
        if (j != std::string_view::npos && find(text.substr(i, j - i + 1))) {
          out.push_back(*find(text.substr(i, j - i + 1)));
          i = j + 1;
        } else {
          out.push_back(lookup(text.substr(i, 1)));
          ++i;
        }
      } else {
        out.push_back(lookup(text.substr(i, 1)));
        ++i;
      }
    }
    return out;
  }

  /// Canonical text for a token sequence; encode(decode(ids)) == ids for any
  /// ids free of <unk>.
  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    bool prev_digit = false;
    for (size_t k = 0; k < ids.size(); ++k) {
      const std::string& t = token(ids[k]);
      const bool digit = t.size() == 1 && std::isdigit(static_cast<unsigned char>(t[0]));
      const bool tight_punct = t == "." || t == "," || t == "?";
      if (k > 0 && !(digit && prev_digit) && !tight_punct) out += ' ';
      out += t;
      prev_digit = digit;
    }
    return out;
  }

  size_t count(std::string_view text) const { return encode(text).size(); }

 private:
  TokenId lookup(std::string_view s) const {
    auto it = index_.find(std::string(s));
    return it == index_.end() ? kUnk : it->second;
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace cotvalve
