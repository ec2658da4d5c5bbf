#include <gtest/gtest.h>

#include "cotvalve/evalkit.hpp"
#include "test_util.hpp"

using namespace cotvalve;
using namespace testutil;

TEST(Acu, ReferenceRows) {
  EXPECT_NEAR(acu(95.1, 32, 741.1), 0.40, 0.01);
  EXPECT_NEAR(acu(92.6, 70, 235.4), 0.56, 0.01);
  EXPECT_NEAR(acu(95.8, 72, 312.1), 0.43, 0.01);
  EXPECT_NEAR(acu(93.1, 32, 269.3), 1.08, 0.01);
}

TEST(Acu, RejectsNonPositiveDenominators) {
  EXPECT_THROW(acu(90, 0, 10), ValidationError);
  EXPECT_THROW(acu(90, -1, 10), ValidationError);
  EXPECT_THROW(acu(90, 1, 0), ValidationError);
}

TEST(Summarize, ReplayOracleScoresFullMarks) {
  const auto tok = Tokenizer::standard();
  const auto probs = generate_corpus(3, 40);
  std::vector<Completion> cs;
  int64_t tokens = 0;
  for (const auto& p : probs) {
    Completion c;
    c.text = p.solutions[0];
    c.tokens = tok.encode(c.text);
    c.correct = verify(p.answer, c.text);
    tokens += int64_t(c.tokens.size());
    cs.push_back(c);
  }
  const auto r = summarize(cs, 0.0, 2e-6);
  EXPECT_EQ(r.accuracy, 100.0);
  EXPECT_DOUBLE_EQ(r.mean_tokens, double(tokens) / 40.0);
  EXPECT_NEAR(r.acu * r.params_billions * r.mean_tokens / 100.0, r.accuracy, 1e-9 * r.accuracy);
}

TEST(Summarize, EmptyCompletionsScoreZero) {
  std::vector<Completion> cs(5);
  const auto r = summarize(cs, 0.0, 1e-6);
  EXPECT_EQ(r.accuracy, 0.0);
  EXPECT_EQ(r.mean_tokens, 0.0);
  EXPECT_EQ(r.acu, 0.0);
  EXPECT_THROW(summarize({}, 0.0, 1e-6), ValidationError);
}

namespace {
struct Fixture {
  Tokenizer tok = Tokenizer::standard();
  ModelConfig cfg;
  LanguageModel model;
  AdapterState adapter;
  std::vector<CorpusItem> probs;
  Fixture() {
    cfg = tiny_config(static_cast<int>(tok.size()));
    cfg.context_len = 80;
    model = random_model(cfg, 8, 0.5);
    adapter = AdapterState(random_adapter(cfg, 2, 4.0f, 2, 0.3), 1.0);
    probs = generate_corpus(31, 10, 2, 2, GenOptions::small());
  }
};
}  // namespace

TEST(Evaluate, AccuracyEqualsRecount) {
  Fixture f;
  const auto res = evaluate(f.model, f.adapter, 0.7, f.probs, 12, f.tok);
  ASSERT_EQ(res.completions.size(), f.probs.size());
  int correct = 0;
  for (size_t i = 0; i < f.probs.size(); ++i) {
    const auto& c = res.completions[i];
    EXPECT_EQ(c.text, f.tok.decode(c.tokens));
    EXPECT_LE(c.tokens.size(), 12u);
    const bool ok = verify(f.probs[i].answer, c.text) &&
                    (!c.truncated || c.text.find("####") != std::string::npos);
    correct += ok;
  }
  EXPECT_DOUBLE_EQ(res.report.accuracy, 100.0 * correct / double(f.probs.size()));
  EXPECT_EQ(res.report.alpha, 0.7);
  EXPECT_EQ(res.report.n_problems, 10);
}

TEST(Evaluate, TruncatedWithoutMarkerIsIncorrect) {
  const auto tok = Tokenizer::standard();
  ModelConfig cfg = tiny_config(static_cast<int>(tok.size()));
  cfg.context_len = 80;
  LanguageModel m = random_model(cfg, 8, 0.0);
  // Force every step to emit the digit that equals the answer's last digit.
  const auto probs = generate_corpus(5, 1, 2, 2, GenOptions::small());
  const std::string digit(1, char('0' + probs[0].answer % 10));
  const TokenId id = *tok.find(digit);
  m.params.at("head.weight").mat().setZero();
  m.params.at("head.weight").mat().row(id).setConstant(1.0f);
  for (auto& x : m.params.at("ln_f.bias").data) x = 1.0f;
  const auto c = complete(m, {}, tok, probs[0].question, probs[0].answer % 10, 1);
  EXPECT_TRUE(c.truncated);
  EXPECT_FALSE(c.correct);
  EXPECT_EQ(c.tokens.size(), 1u);
}

TEST(Evaluate, OrderInvariantAccuracy) {
  Fixture f;
  auto rev = f.probs;
  std::reverse(rev.begin(), rev.end());
  const auto a = evaluate(f.model, f.adapter, 1.0, f.probs, 10, f.tok).report;
  const auto b = evaluate(f.model, f.adapter, 1.0, rev, 10, f.tok).report;
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_EQ(a.mean_tokens, b.mean_tokens);
}

TEST(Sweep, SingleAlphaMatchesEvaluateAndDuplicatesRepeat) {
  Fixture f;
  const auto one = alpha_sweep(f.model, f.adapter, {0.0}, f.probs, 10, f.tok);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0], evaluate(f.model, f.adapter, 0.0, f.probs, 10, f.tok).report);
  const auto dup = alpha_sweep(f.model, f.adapter, {0.5, 0.5}, f.probs, 10, f.tok);
  EXPECT_EQ(dup[0], dup[1]);
  EXPECT_THROW(alpha_sweep(f.model, f.adapter, {1.0, 0.5}, f.probs, 10, f.tok), ValidationError);
  EXPECT_THROW(alpha_sweep(f.model, f.adapter, {}, f.probs, 10, f.tok), ValidationError);
}

TEST(Sweep, CsvDeterministicWithHeader) {
  Fixture f;
  const auto a = sweep_csv(alpha_sweep(f.model, f.adapter, {0.0, 1.0}, f.probs, 10, f.tok));
  const auto b = sweep_csv(alpha_sweep(f.model, f.adapter, {0.0, 1.0}, f.probs, 10, f.tok));
  EXPECT_EQ(a, b);
  EXPECT_TRUE(a.starts_with("alpha,accuracy,mean_tokens,acu\n"));
  EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 3);
  const auto svg = sweep_svg(alpha_sweep(f.model, f.adapter, {0.0, 1.0}, f.probs, 10, f.tok));
  EXPECT_TRUE(svg.starts_with("<svg"));
}

TEST(Report, JsonMirrorsFields) {
  EvalReport r;
  r.accuracy = 50;
  r.mean_tokens = 10;
  r.n_problems = 4;
  const auto j = r.to_json();
  for (const char* k : {"accuracy", "mean_tokens", "acu", "n_problems", "alpha", "params_billions"})
    EXPECT_TRUE(j.contains(k)) << k;
}
