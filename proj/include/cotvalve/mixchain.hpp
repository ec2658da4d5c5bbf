#pragma once

// Datasets pairing each question with several verified solutions of
// decreasing length, harvested by sweeping the update-direction magnitude.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cotvalve/adapter_arith.hpp"
#include "cotvalve/evalkit.hpp"
#include "cotvalve/io.hpp"
#include "cotvalve/synth_corpus.hpp"
#include "cotvalve/toy_lm.hpp"

namespace cotvalve {

struct SolutionEntry {
  std::string text;
  int64_t token_count = 0;
  std::optional<double> alpha;  // empty for the ground-truth chain
  bool correct = false;
  std::optional<double> beta;
  bool operator==(const SolutionEntry&) const = default;
};

struct MixChainRecord {
  std::string question;
  int64_t answer = 0;
  std::vector<SolutionEntry> solutions;  // token_count descending
  bool operator==(const MixChainRecord&) const = default;
};

struct MixChainBuild {
  std::vector<MixChainRecord> records;
  size_t dropped_records = 0;    // questions with no correct solution
  size_t dropped_solutions = 0;  // incorrect generations removed
};

enum class MixMode { C, Z };

/// Default sweep: four interior points plus both endpoints.
inline std::vector<double> default_mixchain_alphas() { return {0.0, 0.2, 0.4, 0.6, 0.8, 1.0}; }

struct FilterResult {
  std::vector<SolutionEntry> retained;
  size_t dropped = 0;
};

inline FilterResult filter_incorrect(const std::vector<SolutionEntry>& entries) {
  FilterResult r;
  for (const auto& e : entries) {
    if (e.correct)
      r.retained.push_back(e);
    else
      ++r.dropped;
  }
  return r;
}

inline void sort_solutions(std::vector<SolutionEntry>& s) {
  std::stable_sort(s.begin(), s.end(), [](const SolutionEntry& a, const SolutionEntry& b) {
    return a.token_count > b.token_count;
  });
}

/// beta = 1 - (m - m_min) / (m_max - m_min) over the record's solutions;
/// every entry gets beta = 1 when all lengths are equal.
inline MixChainRecord compute_beta(const MixChainRecord& record) {
  if (record.solutions.empty())
    throw ValidationError("record for '" + record.question + "' has no solutions");
  MixChainRecord out = record;
  int64_t lo = out.solutions.front().token_count, hi = lo;
  for (const auto& s : out.solutions) {
    lo = std::min(lo, s.token_count);
    hi = std::max(hi, s.token_count);
  }
  for (auto& s : out.solutions) {
    if (hi == lo)
      s.beta = 1.0;
    else
      s.beta = 1.0 - double(s.token_count - lo) / double(hi - lo);
  }
  return out;
}

namespace detail {

// Adds `e` unless a solution with identical text exists; on a clash the
// entry with the smaller alpha survives.
inline void add_dedup(std::vector<SolutionEntry>& v, SolutionEntry e) {
  for (auto& have : v) {
    if (have.text != e.text) continue;
    if (e.alpha && (!have.alpha || *e.alpha < *have.alpha)) have = std::move(e);
    return;
  }
  v.push_back(std::move(e));
}

inline MixChainBuild assemble(const std::vector<CorpusItem>& questions,
                              std::vector<std::vector<SolutionEntry>> per_question) {
  MixChainBuild b;
  for (size_t i = 0; i < questions.size(); ++i) {
    auto f = filter_incorrect(per_question[i]);
    b.dropped_solutions += f.dropped;
    if (f.retained.empty()) {
      ++b.dropped_records;
      continue;
    }
    MixChainRecord r;
    r.question = questions[i].question;
    r.answer = questions[i].answer;
    r.solutions = std::move(f.retained);
    sort_solutions(r.solutions);
    b.records.push_back(compute_beta(r));
  }
  return b;
}

inline void check_inputs(const std::vector<CorpusItem>& questions,
                         const std::vector<double>& alphas) {
  if (questions.empty()) throw ValidationError("question list is empty");
  if (alphas.empty()) throw ValidationError("alpha list is empty");
  for (double a : alphas) require_finite(a);
}

inline SolutionEntry entry_from(const Completion& c, double alpha) {
  SolutionEntry e;
  e.text = c.text;
  e.token_count = static_cast<int64_t>(c.tokens.size());
  e.alpha = alpha;
  e.correct = c.correct;
  return e;
}

}  // namespace detail

/// Cold-start path: base model plus a trained low-rank direction, generated
/// at each runtime magnitude.
inline MixChainBuild build_mixchain_c(const LanguageModel& base, const LowRankDeltaSet& delta,
                                      const std::vector<CorpusItem>& questions,
                                      const std::vector<double>& alphas, const Tokenizer& tok,
                                      int max_new) {
  detail::check_inputs(questions, alphas);
  const AdapterState adapter(delta, 1.0);
  std::vector<std::vector<SolutionEntry>> per(questions.size());
  for (double a : alphas) {
    const AdapterState ad = set_alpha(adapter, a);
    for (size_t i = 0; i < questions.size(); ++i) {
      const auto c = complete(base, ad, tok, questions[i].question, questions[i].answer, max_new);
      detail::add_dedup(per[i], detail::entry_from(c, a));
    }
  }
  return detail::assemble(questions, std::move(per));
}

/// Zero-shot path: the dense difference theta2 - theta1 is interpolated and
/// each merged model generated from. The terse reference chain is added as
/// the ground-truth solution.
inline MixChainBuild build_mixchain_z(const LanguageModel& theta1, const Checkpoint& theta2,
                                      const std::vector<CorpusItem>& questions,
                                      const std::vector<double>& alphas, const Tokenizer& tok,
                                      int max_new) {
  detail::check_inputs(questions, alphas);
  const FullDelta delta = derive_full_delta(theta1.params, theta2);
  std::vector<std::vector<SolutionEntry>> per(questions.size());
  for (double a : alphas) {
    const LanguageModel merged{theta1.config, apply_merge(theta1.params, delta, a)};
    for (size_t i = 0; i < questions.size(); ++i) {
      const auto c = complete(merged, AdapterState::none(), tok, questions[i].question,
                              questions[i].answer, max_new);
      detail::add_dedup(per[i], detail::entry_from(c, a));
    }
  }
  for (size_t i = 0; i < questions.size(); ++i) {
    SolutionEntry gt;
    gt.text = questions[i].solutions[0];
    gt.token_count = static_cast<int64_t>(tok.count(gt.text));
    gt.correct = verify(questions[i].answer, gt.text);
    detail::add_dedup(per[i], std::move(gt));
  }
  return detail::assemble(questions, std::move(per));
}

/// A five-rung ladder taken straight from the rendered reference chains.
inline std::vector<MixChainRecord> ladder_from_corpus(const std::vector<CorpusItem>& corpus,
                                                      const Tokenizer& tok) {
  std::vector<MixChainRecord> out;
  for (const auto& it : corpus) {
    std::vector<SolutionEntry> sols;
    for (const auto& s : it.solutions) {
      SolutionEntry e;
      e.text = s;
      e.token_count = static_cast<int64_t>(tok.count(s));
      e.correct = verify(it.answer, s);
      sols.push_back(std::move(e));
    }
    auto f = filter_incorrect(sols);
    if (f.retained.empty()) continue;
    MixChainRecord r{it.question, it.answer, std::move(f.retained)};
    sort_solutions(r.solutions);
    out.push_back(compute_beta(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Statistics

struct RankStats {
  int64_t count = 0;
  double mean_tokens = 0.0;
  bool operator==(const RankStats&) const = default;
};

struct DatasetStats {
  std::vector<RankStats> ranks;  // rank 0 = longest
  size_t records = 0;
  double drop_rate = 0.0;        // dropped / (records + dropped)
  bool operator==(const DatasetStats&) const = default;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["records"] = records;
    j["drop_rate"] = drop_rate;
    j["ranks"] = nlohmann::json::array();
    for (size_t i = 0; i < ranks.size(); ++i)
      j["ranks"].push_back({{"rank", i}, {"count", ranks[i].count},
                            {"mean_tokens", ranks[i].mean_tokens}});
    return j;
  }
};

inline DatasetStats dataset_stats(const std::vector<MixChainRecord>& records,
                                  size_t dropped_records = 0) {
  DatasetStats s;
  s.records = records.size();
  std::vector<int64_t> sums;
  for (const auto& r : records) {
    if (r.solutions.size() > s.ranks.size()) {
      s.ranks.resize(r.solutions.size());
      sums.resize(r.solutions.size(), 0);
    }
    for (size_t k = 0; k < r.solutions.size(); ++k) {
      ++s.ranks[k].count;
      sums[k] += r.solutions[k].token_count;
    }
  }
  for (size_t k = 0; k < s.ranks.size(); ++k)
    s.ranks[k].mean_tokens = double(sums[k]) / double(s.ranks[k].count);
  const size_t total = records.size() + dropped_records;
  s.drop_rate = total ? double(dropped_records) / double(total) : 0.0;
  return s;
}

// ---------------------------------------------------------------------------
// JSONL persistence

inline nlohmann::json to_json(const MixChainRecord& r) {
  nlohmann::json sols = nlohmann::json::array();
  for (const auto& s : r.solutions) {
    sols.push_back({{"text", s.text},
                    {"tokens", s.token_count},
                    {"alpha", s.alpha ? nlohmann::json(*s.alpha) : nlohmann::json(nullptr)},
                    {"beta", s.beta ? nlohmann::json(*s.beta) : nlohmann::json(nullptr)}});
  }
  return {{"question", r.question}, {"answer", r.answer}, {"solutions", sols}};
}

inline std::string mixchain_to_jsonl(const std::vector<MixChainRecord>& records) {
  std::string out;
  for (const auto& r : records) out += to_json(r).dump() + "\n";
  return out;
}

inline std::vector<MixChainRecord> mixchain_from_jsonl(const std::string& text,
                                                       const std::string& origin = "<mixchain>") {
  std::vector<MixChainRecord> out;
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
      MixChainRecord r;
      r.question = j.at("question").get<std::string>();
      r.answer = j.at("answer").get<int64_t>();
      for (const auto& s : j.at("solutions")) {
        SolutionEntry e;
        e.text = s.at("text").get<std::string>();
        e.token_count = s.at("tokens").get<int64_t>();
        if (s.contains("alpha") && !s["alpha"].is_null()) e.alpha = s["alpha"].get<double>();
        if (s.contains("beta") && !s["beta"].is_null()) e.beta = s["beta"].get<double>();
        e.correct = true;
        r.solutions.push_back(std::move(e));
      }
      for (size_t k = 1; k < r.solutions.size(); ++k)
        if (r.solutions[k].token_count > r.solutions[k - 1].token_count)
          throw ParseError("solutions not sorted by tokens descending");
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw ParseError(origin + ":" + std::to_string(line) + ": " + e.what());
    }
  }
  return out;
}

inline void save_mixchain(const std::vector<MixChainRecord>& records,
                          const std::filesystem::path& path) {
  io::atomic_write(path, mixchain_to_jsonl(records));
}

inline std::vector<MixChainRecord> load_mixchain(const std::filesystem::path& path) {
  return mixchain_from_jsonl(io::read_file(path), path.string());
}

}  // namespace cotvalve
