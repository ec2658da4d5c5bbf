#include <gtest/gtest.h>

#include "cotvalve/mixchain.hpp"
#include "test_util.hpp"

using namespace cotvalve;
using namespace testutil;

namespace {

SolutionEntry sol(std::string text, int64_t tokens, std::optional<double> alpha = std::nullopt,
                  bool correct = true) {
  SolutionEntry e;
  e.text = std::move(text);
  e.token_count = tokens;
  e.alpha = alpha;
  e.correct = correct;
  return e;
}

MixChainRecord record_with_lengths(std::vector<int64_t> lengths) {
  MixChainRecord r{"q", 1, {}};
  for (size_t i = 0; i < lengths.size(); ++i)
    r.solutions.push_back(sol("s" + std::to_string(i) + " #### 1", lengths[i]));
  return r;
}

}  // namespace

TEST(ComputeBeta, EndpointsAndMidpoint) {
  const auto r = compute_beta(record_with_lengths({300, 200, 100}));
  EXPECT_EQ(*r.solutions[0].beta, 0.0);
  EXPECT_EQ(*r.solutions[1].beta, 0.5);
  EXPECT_EQ(*r.solutions[2].beta, 1.0);
}

TEST(ComputeBeta, DegenerateEqualLengths) {
  for (const auto& s : compute_beta(record_with_lengths({40, 40, 40})).solutions)
    EXPECT_EQ(*s.beta, 1.0);
  EXPECT_EQ(*compute_beta(record_with_lengths({7})).solutions[0].beta, 1.0);
}

TEST(ComputeBeta, MatchesFormulaOnRandomLengths) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int64_t> len;
    for (int k = 0; k < 5; ++k) len.push_back(rng.uniform_int(1, 500));
    const auto r = compute_beta(record_with_lengths(len));
    const int64_t lo = *std::min_element(len.begin(), len.end());
    const int64_t hi = *std::max_element(len.begin(), len.end());
    for (size_t k = 0; k < len.size(); ++k) {
      const double want = hi == lo ? 1.0 : 1.0 - double(len[k] - lo) / double(hi - lo);
      EXPECT_DOUBLE_EQ(*r.solutions[k].beta, want);
      EXPECT_GE(*r.solutions[k].beta, 0.0);
      EXPECT_LE(*r.solutions[k].beta, 1.0);
    }
  }
}

TEST(ComputeBeta, EmptyRecordRejected) {
  EXPECT_THROW(compute_beta(MixChainRecord{"q", 1, {}}), ValidationError);
}

TEST(Filter, DropsExactlyIncorrect) {
  std::vector<SolutionEntry> v;
  for (int i = 0; i < 20; ++i) v.push_back(sol("x", i, 0.1 * i, i % 10 != 3));
  const auto f = filter_incorrect(v);
  EXPECT_EQ(f.dropped, 2u);
  EXPECT_EQ(f.retained.size(), 18u);
  for (const auto& e : f.retained) EXPECT_TRUE(e.correct);
}

TEST(SortSolutions, DescendingAndStable) {
  std::vector<SolutionEntry> v = {sol("a", 5), sol("b", 9), sol("c", 5), sol("d", 12)};
  sort_solutions(v);
  std::vector<std::string> order;
  for (const auto& e : v) order.push_back(e.text);
  EXPECT_EQ(order, (std::vector<std::string>{"d", "b", "a", "c"}));
}

TEST(Dedup, KeepsSmallestAlpha) {
  std::vector<SolutionEntry> v;
  detail::add_dedup(v, sol("same", 3, 0.6));
  detail::add_dedup(v, sol("same", 3, 0.2));
  detail::add_dedup(v, sol("same", 3, 0.8));
  detail::add_dedup(v, sol("other", 2, 1.0));
  ASSERT_EQ(v.size(), 2u);
  EXPECT_EQ(*v[0].alpha, 0.2);
}

namespace {

struct Fixture {
  Tokenizer tok = Tokenizer::standard();
  ModelConfig cfg;
  LanguageModel model;
  std::vector<CorpusItem> questions;

  Fixture() {
    cfg = tiny_config(static_cast<int>(tok.size()));
    cfg.context_len = 96;
    model = random_model(cfg, 5, 0.5);
    questions = generate_corpus(77, 12, 2, 2, GenOptions::small());
  }
};

}  // namespace

TEST(BuildMixChainC, RetainedSolutionsReverifyAndAreSorted) {
  Fixture f;
  // A model that cannot do arithmetic: plant the reference chain as one of
  // the "generated" solutions by checking the invariants on whatever survives.
  const auto ad = random_adapter(f.cfg, 2, 4.0f, 6, 0.3);
  const auto b = build_mixchain_c(f.model, ad, f.questions, default_mixchain_alphas(), f.tok, 30);
  EXPECT_EQ(b.records.size() + b.dropped_records, f.questions.size());
  for (const auto& r : b.records) {
    EXPECT_FALSE(r.solutions.empty());
    for (size_t k = 0; k < r.solutions.size(); ++k) {
      EXPECT_TRUE(verify(r.answer, r.solutions[k].text));
      EXPECT_TRUE(r.solutions[k].beta.has_value());
      if (k) EXPECT_GE(r.solutions[k - 1].token_count, r.solutions[k].token_count);
    }
  }
}

TEST(BuildMixChainC, DeterministicAndValidated) {
  Fixture f;
  const auto ad = random_adapter(f.cfg, 2, 4.0f, 6, 0.3);
  const auto a = build_mixchain_c(f.model, ad, f.questions, {0.0, 1.0}, f.tok, 20);
  const auto b = build_mixchain_c(f.model, ad, f.questions, {0.0, 1.0}, f.tok, 20);
  EXPECT_EQ(mixchain_to_jsonl(a.records), mixchain_to_jsonl(b.records));
  EXPECT_EQ(a.dropped_solutions, b.dropped_solutions);
  EXPECT_THROW(build_mixchain_c(f.model, ad, {}, {0.0}, f.tok, 20), ValidationError);
  EXPECT_THROW(build_mixchain_c(f.model, ad, f.questions, {}, f.tok, 20), ValidationError);
}

TEST(BuildMixChainZ, IdenticalModelsGiveOneGenerationPlusReference) {
  Fixture f;
  const auto b = build_mixchain_z(f.model, f.model.params, f.questions, {0.0, 0.5, 1.0}, f.tok, 20);
  // The untrained model never answers correctly, so only the reference survives.
  ASSERT_EQ(b.records.size(), f.questions.size());
  for (size_t i = 0; i < b.records.size(); ++i) {
    const auto& r = b.records[i];
    const auto gt = std::find_if(r.solutions.begin(), r.solutions.end(),
                                 [](const SolutionEntry& s) { return !s.alpha; });
    ASSERT_NE(gt, r.solutions.end());
    EXPECT_EQ(gt->text, f.questions[i].solutions[0]);
    EXPECT_LE(r.solutions.size(), 2u);
  }
}

TEST(BuildMixChainZ, StructuralMismatchRejected) {
  Fixture f;
  auto other = f.model.params;
  other.erase("head.weight");
  EXPECT_THROW(build_mixchain_z(f.model, other, f.questions, {0.5}, f.tok, 10), StructuralError);
}

TEST(Ladder, FiveRungsWithBetaSpan) {
  const auto tok = Tokenizer::standard();
  const auto corpus = generate_corpus(4, 50);
  const auto recs = ladder_from_corpus(corpus, tok);
  ASSERT_EQ(recs.size(), corpus.size());
  for (const auto& r : recs) {
    ASSERT_EQ(r.solutions.size(), 5u);
    EXPECT_EQ(*r.solutions.front().beta, 0.0);
    EXPECT_EQ(*r.solutions.back().beta, 1.0);
    for (const auto& s : r.solutions) EXPECT_TRUE(verify(r.answer, s.text));
  }
}

TEST(Integrity, InjectedCorruptionDroppedExactly) {
  const auto tok = Tokenizer::standard();
  const auto corpus = generate_corpus(9, 100);
  std::vector<std::vector<SolutionEntry>> per(corpus.size());
  size_t injected = 0;
  for (size_t i = 0; i < corpus.size(); ++i) {
    for (int v = 0; v < kNumVerbosity; ++v) {
      std::string text = corpus[i].solutions[static_cast<size_t>(v)];
      const bool corrupt = (i * kNumVerbosity + static_cast<size_t>(v)) % 10 == 0;
      if (corrupt) {
        text = text.substr(0, text.rfind("#### ")) + "#### " + std::to_string(corpus[i].answer + 1);
        ++injected;
      }
      SolutionEntry e = sol(text, int64_t(tok.count(text)), 0.2 * v, verify(corpus[i].answer, text));
      per[i].push_back(e);
    }
  }
  const auto b = detail::assemble(corpus, per);
  EXPECT_EQ(b.dropped_solutions, injected);
  size_t kept = 0;
  for (const auto& r : b.records) kept += r.solutions.size();
  EXPECT_EQ(kept + injected, corpus.size() * kNumVerbosity);
}

TEST(Jsonl, RoundtripLossless) {
  const auto tok = Tokenizer::standard();
  auto recs = ladder_from_corpus(generate_corpus(2, 30), tok);
  recs[0].solutions[1].alpha = 0.4;
  const std::string text = mixchain_to_jsonl(recs);
  const auto back = mixchain_from_jsonl(text);
  EXPECT_EQ(back, recs);
  EXPECT_EQ(mixchain_to_jsonl(back), text);
}

TEST(Jsonl, RejectsUnsortedAndNamesLine) {
  std::string text = mixchain_to_jsonl({record_with_lengths({3, 2})});
  text += R"({"question":"q","answer":1,"solutions":[{"text":"a","tokens":1,"alpha":null,"beta":null},{"text":"b","tokens":5,"alpha":null,"beta":null}]})";
  try {
    mixchain_from_jsonl(text, "m.jsonl");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("m.jsonl:2"), std::string::npos) << e.what();
  }
}

TEST(Stats, PerRankCountsAndMeans) {
  std::vector<MixChainRecord> recs = {record_with_lengths({30, 20, 10}),
                                      record_with_lengths({50, 10})};
  const auto s = dataset_stats(recs, 2);
  EXPECT_EQ(s.records, 2u);
  ASSERT_EQ(s.ranks.size(), 3u);
  EXPECT_EQ(s.ranks[0].count, 2);
  EXPECT_DOUBLE_EQ(s.ranks[0].mean_tokens, 40.0);
  EXPECT_DOUBLE_EQ(s.ranks[1].mean_tokens, 15.0);
  EXPECT_EQ(s.ranks[2].count, 1);
  EXPECT_DOUBLE_EQ(s.drop_rate, 0.5);
}
