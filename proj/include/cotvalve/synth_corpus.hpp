#pragma once

// Verifiable multi-step arithmetic word problems with a five-level ladder of
// solution verbosity, plus answer extraction and verification.

#include <array>
#include <charconv>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cotvalve/rng.hpp"
#include "cotvalve/tensor.hpp"
#include "cotvalve/tokenizer.hpp"

namespace cotvalve {

enum class Op : char { add = '+', sub = '-', mul = '*' };

struct Step {
  Op op = Op::add;
  int64_t operand = 0;
  bool operator==(const Step&) const = default;
};

struct Problem {
  int64_t start = 0;
  std::vector<Step> steps;
  int64_t answer = 0;
  int difficulty = 0;
  uint64_t seed = 0;  // selects the character and object names
  bool operator==(const Problem&) const = default;
};

inline constexpr int kMinDifficulty = 2;
inline constexpr int kMaxDifficulty = 8;
inline constexpr int kNumVerbosity = 5;
inline constexpr int64_t kIntermediateCap = 1'000'000;

inline int64_t apply_op(int64_t value, const Step& s) {
  switch (s.op) {
    case Op::add: return value + s.operand;
    case Op::sub: return value - s.operand;
    case Op::mul: return value * s.operand;
  }
  return value;
}

inline int64_t evaluate_steps(int64_t start, const std::vector<Step>& steps) {
  int64_t v = start;
  for (const auto& s : steps) v = apply_op(v, s);
  return v;
}

/// Number ranges for generated problems. The defaults give starts and
/// operands in [1, 99] and factors in [2, 9] with values below 10^6;
/// `small()` is a narrow profile a desk-scale model can learn exactly.
struct GenOptions {
  int64_t max_start = 99;
  int64_t max_operand = 99;
  int64_t max_factor = 9;
  int64_t value_cap = kIntermediateCap;

  static GenOptions small() { return {20, 9, 3, 100}; }

  void validate() const {
    if (max_start < 1 || max_operand < 1 || max_factor < 2)
      throw ValidationError("max_start and max_operand must be >= 1, max_factor >= 2");
    if (value_cap <= max_start + max_operand)
      throw ValidationError("value_cap must exceed max_start + max_operand");
  }
  nlohmann::json to_json() const {
    return {{"max_start", max_start}, {"max_operand", max_operand},
            {"max_factor", max_factor}, {"value_cap", value_cap}};
  }
  static GenOptions from_json(const nlohmann::json& j) {
    GenOptions o;
    o.max_start = j.value("max_start", o.max_start);
    o.max_operand = j.value("max_operand", o.max_operand);
    o.max_factor = j.value("max_factor", o.max_factor);
    o.value_cap = j.value("value_cap", o.value_cap);
    o.validate();
    return o;
  }
  bool operator==(const GenOptions&) const = default;
};

/// Deterministic in `seed`. - never takes the running value below zero;
/// * is replaced by + and + by - whenever the value would reach value_cap.
inline Problem generate_problem(uint64_t seed, int difficulty, const GenOptions& opt = {}) {
  if (difficulty < kMinDifficulty || difficulty > kMaxDifficulty)
    throw ValidationError("difficulty " + std::to_string(difficulty) +
                          " outside [2, 8]");
  opt.validate();
  Rng rng(seed);
  Problem p;
  p.seed = seed;
  p.difficulty = difficulty;
  p.start = rng.uniform_int(1, opt.max_start);
  int64_t v = p.start;
  for (int i = 0; i < difficulty; ++i) {
    Step s;
    const int64_t pick = rng.uniform_int(0, 2);
    if (pick == 2) {
      s.op = Op::mul;
      s.operand = rng.uniform_int(2, opt.max_factor);
      if (v * s.operand >= opt.value_cap) s.op = Op::add;
    } else if (pick == 1 && v >= 1) {
      s.op = Op::sub;
    }
    if (s.op == Op::add) {
      s.operand = rng.uniform_int(1, opt.max_operand);
      if (v + s.operand >= opt.value_cap) s.op = Op::sub;
    }
    if (s.op == Op::sub) s.operand = rng.uniform_int(1, std::min(opt.max_operand, v));
    v = apply_op(v, s);
    p.steps.push_back(s);
  }
  p.answer = v;
  return p;
}

// ---------------------------------------------------------------------------
// Rendering

namespace detail {

inline constexpr std::array<std::string_view, 4> kNames = {"Amanda", "Sam", "Tom", "Mia"};
inline constexpr std::array<std::string_view, 4> kObjects = {"notebooks", "apples",
                                                             "coins", "books"};

// Every literal fragment the templates emit. The standard vocabulary is
// derived from this list, so a template edit cannot leave a word out.
inline constexpr std::array<std::string_view, 19> kFragments = {
    "has", ".", "gets", "more", "gives away", "multiplies the", "by",
    "How many", "does", "have now ?", "starts with", "The answer is",
    ", so", "multiplies by", "Wait , let me check that again .", "and",
    "Yes , it is", "Let me also check it another way . Going backwards ,",
    ", which matches the start . #### + - * / ="};

inline std::string num(int64_t v) { return std::to_string(v); }

inline std::string_view name_of(const Problem& p) { return kNames[p.seed % 4]; }
inline std::string_view object_of(const Problem& p) { return kObjects[(p.seed / 4) % 4]; }

inline std::string step_phrase(const Problem& p, const Step& s) {
  const std::string n(name_of(p));
  switch (s.op) {
    case Op::add: return n + " gets " + num(s.operand) + " more";
    case Op::sub: return n + " gives away " + num(s.operand);
    case Op::mul: return n + " multiplies the " + std::string(object_of(p)) + " by " + num(s.operand);
  }
  return {};
}

inline std::string narration(const Problem& p, const Step& s) {
  const std::string n(name_of(p));
  switch (s.op) {
    case Op::add: return n + " gets " + num(s.operand) + " more, so ";
    case Op::sub: return n + " gives away " + num(s.operand) + ", so ";
    case Op::mul: return n + " multiplies by " + num(s.operand) + ", so ";
  }
  return {};
}

inline std::string equation(int64_t lhs, char op, int64_t rhs, int64_t result) {
  return num(lhs) + " " + op + " " + num(rhs) + " = " + num(result);
}

}  // namespace detail

struct ChainStyle {
  int verbosity = 0;  // 0 terse ... 4 maximally verbose
};

struct RenderedChain {
  std::string question;
  std::string solution;
};

inline std::string render_question(const Problem& p) {
  using namespace detail;
  const std::string n(name_of(p)), o(object_of(p));
  std::string q = n + " has " + num(p.start) + " " + o + ".";
  for (const auto& s : p.steps) q += " " + step_phrase(p, s) + ".";
  q += " How many " + o + " does " + n + " have now?";
  return q;
}

inline RenderedChain render_chain(const Problem& p, ChainStyle style) {
  using namespace detail;
  if (style.verbosity < 0 || style.verbosity >= kNumVerbosity)
    throw ValidationError("verbosity must be in [0, 4]");
  const int v = style.verbosity;
  const std::string n(name_of(p)), o(object_of(p));

  std::vector<std::string> eqs;
  int64_t cur = p.start;
  for (const auto& s : p.steps) {
    const int64_t next = apply_op(cur, s);
    eqs.push_back(equation(cur, static_cast<char>(s.op), s.operand, next));
    cur = next;
  }

  std::string sol;
  if (v >= 1) sol += n + " starts with " + num(p.start) + " " + o + ". ";
  for (size_t i = 0; i < eqs.size(); ++i) {
    if (v >= 2) sol += narration(p, p.steps[i]);
    sol += eqs[i] + ". ";
  }
  if (v >= 3) {
    sol += "Wait, let me check that again. ";
    for (size_t i = 0; i < eqs.size(); ++i) sol += (i ? " and " : "") + eqs[i];
    sol += ". Yes, it is " + num(p.answer) + ". ";
  }
  if (v >= 4) {
    sol += "Let me also check it another way. Going backwards, ";
    int64_t back = p.answer;
    for (size_t k = p.steps.size(); k-- > 0;) {
      const Step& s = p.steps[k];
      int64_t prev = 0;
      char inv = '-';
      switch (s.op) {
        case Op::add: inv = '-'; prev = back - s.operand; break;
        case Op::sub: inv = '+'; prev = back + s.operand; break;
        case Op::mul: inv = '/'; prev = back / s.operand; break;
      }
      sol += (k + 1 < p.steps.size() ? " and " : "") + equation(back, inv, s.operand, prev);
      back = prev;
    }
    sol += ", which matches the start. ";
  }
  if (v >= 1) sol += "The answer is " + num(p.answer) + ". ";
  sol += "#### " + num(p.answer);
  return {render_question(p), sol};
}

inline Tokenizer Tokenizer::standard() {
  std::vector<std::string> toks = {"<pad>", "<bos>", "<eos>", "<sep>", "<unk>"};
  for (char c = '0'; c <= '9'; ++c) toks.emplace_back(1, c);
  std::set<std::string> words;
  auto scan = [&](std::string_view s) {
    size_t i = 0;
    while (i < s.size()) {
      const unsigned char c = static_cast<unsigned char>(s[i]);
      if (std::isspace(c) || std::isdigit(c)) {
        ++i;
      } else if (std::isalpha(c)) {
        size_t j = i;
        while (j < s.size() && std::isalpha(static_cast<unsigned char>(s[j]))) ++j;
        words.emplace(s.substr(i, j - i));
        i = j;
      } else if (c == '#') {
        size_t j = i;
        while (j < s.size() && s[j] == '#') ++j;
        words.emplace(s.substr(i, j - i));
        i = j;
      } else {
        words.emplace(1, static_cast<char>(c));
        ++i;
      }
    }
  };
  for (auto s : detail::kNames) scan(s);
  for (auto s : detail::kObjects) scan(s);
  for (auto s : detail::kFragments) scan(s);
  toks.insert(toks.end(), words.begin(), words.end());
  return Tokenizer(std::move(toks));
}

// ---------------------------------------------------------------------------
// Extraction and verification

namespace detail {

// Parses an optionally '-'-prefixed integer at `pos`; returns chars consumed.
inline std::optional<int64_t> parse_int_at(std::string_view s, size_t pos) {
  int64_t v = 0;
  auto [p, ec] = std::from_chars(s.data() + pos, s.data() + s.size(), v);
  if (ec != std::errc()) return std::nullopt;
  return v;
}

inline std::optional<int64_t> last_integer(std::string_view s) {
  size_t i = s.size();
  while (i > 0) {
    if (std::isdigit(static_cast<unsigned char>(s[i - 1]))) {
      size_t begin = i - 1;
      while (begin > 0 && std::isdigit(static_cast<unsigned char>(s[begin - 1]))) --begin;
      if (begin > 0 && s[begin - 1] == '-') --begin;
      if (auto v = parse_int_at(s, begin)) return v;
      i = begin;
    } else {
      --i;
    }
  }
  return std::nullopt;
}

}  // namespace detail

/// The integer after the last "####" marker; else the last integer literal;
/// else nothing.
inline std::optional<int64_t> extract_answer(std::string_view text) {
  const size_t m = text.rfind("####");
  if (m != std::string_view::npos) {
    size_t i = m + 4;
    while (i < text.size() && text[i] == ' ') ++i;
    size_t j = i;
    if (j < text.size() && text[j] == '-') {
      ++j;
      while (j < text.size() && text[j] == ' ') ++j;
    }
    if (j < text.size() && std::isdigit(static_cast<unsigned char>(text[j]))) {
      std::string lit = text[i] == '-' ? "-" : "";
      while (j < text.size() && std::isdigit(static_cast<unsigned char>(text[j]))) lit += text[j++];
      if (auto v = detail::parse_int_at(lit, 0)) return v;
    }
  }
  return detail::last_integer(text);
}

inline bool verify(int64_t answer, std::string_view completion) {
  const auto got = extract_answer(completion);
  return got.has_value() && *got == answer;
}

inline bool verify(const Problem& p, std::string_view completion) {
  return verify(p.answer, completion);
}

// ---------------------------------------------------------------------------
// Corpus

struct CorpusItem {
  std::string question;
  int64_t answer = 0;
  std::array<std::string, kNumVerbosity> solutions;
  int difficulty = 0;
  uint64_t seed = 0;
  bool operator==(const CorpusItem&) const = default;
};

inline CorpusItem make_item(const Problem& p) {
  CorpusItem it;
  it.question = render_question(p);
  it.answer = p.answer;
  it.difficulty = p.difficulty;
  it.seed = p.seed;
  for (int v = 0; v < kNumVerbosity; ++v) it.solutions[v] = render_chain(p, {v}).solution;
  return it;
}

/// Problem i uses seed (seed XOR i); its difficulty is drawn uniformly from
/// [min_difficulty, max_difficulty] by a stream derived from that seed.
inline std::vector<CorpusItem> generate_corpus(uint64_t seed, size_t n,
                                               int min_difficulty = kMinDifficulty,
                                               int max_difficulty = kMaxDifficulty,
                                               const GenOptions& opt = {}) {
  if (min_difficulty < kMinDifficulty || max_difficulty > kMaxDifficulty ||
      min_difficulty > max_difficulty)
    throw ValidationError("difficulty range must lie within [2, 8]");
  std::vector<CorpusItem> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    const uint64_t ps = seed ^ static_cast<uint64_t>(i);
    Rng d(ps ^ 0x9e3779b97f4a7c15ull);
    const int diff = static_cast<int>(d.uniform_int(min_difficulty, max_difficulty));
    out.push_back(make_item(generate_problem(ps, diff, opt)));
  }
  return out;
}

inline nlohmann::json to_json(const CorpusItem& it) {
  return {{"question", it.question},
          {"answer", it.answer},
          {"solutions", it.solutions},
          {"difficulty", it.difficulty},
          {"seed", it.seed}};
}

inline std::string corpus_to_jsonl(const std::vector<CorpusItem>& items) {
  std::string out;
  for (const auto& it : items) out += to_json(it).dump() + "\n";
  return out;
}

inline std::vector<CorpusItem> corpus_from_jsonl(const std::string& text,
                                                 const std::string& origin = "<corpus>") {
  std::vector<CorpusItem> out;
  size_t start = 0, line = 0;
  while (start < text.size()) {
    size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    ++line;
    const std::string_view row(text.data() + start, end - start);
    start = end + 1;
    if (row.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      const auto j = nlohmann::json::parse(row);
      CorpusItem it;
      it.question = j.at("question").get<std::string>();
      it.answer = j.at("answer").get<int64_t>();
      const auto sols = j.at("solutions").get<std::vector<std::string>>();
      if (sols.size() != kNumVerbosity) throw ParseError("expected 5 solutions");
      std::copy(sols.begin(), sols.end(), it.solutions.begin());
      it.difficulty = j.at("difficulty").get<int>();
      it.seed = j.at("seed").get<uint64_t>();
      out.push_back(std::move(it));
    } catch (const std::exception& e) {
      throw ParseError(origin + ":" + std::to_string(line) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace cotvalve
