#include <gtest/gtest.h>

#include "cotvalve/trainer.hpp"
#include "test_util.hpp"

using namespace cotvalve;
using namespace testutil;

namespace {

struct Fixture {
  Tokenizer tok = Tokenizer::standard();
  ModelConfig cfg;
  LanguageModel base;
  LowRankDeltaSet adapter;
  std::vector<CorpusItem> corpus;

  Fixture() {
    cfg = tiny_config(static_cast<int>(tok.size()));
    cfg.context_len = 160;
    base = random_model(cfg, 3, 0.2);
    adapter = init_adapter(cfg, 2, 4.0f, 4);
    corpus = generate_corpus(12, 24, 2, 2, GenOptions::small());
  }
  TrainConfig train_cfg(uint64_t seed = 5) const {
    TrainConfig c;
    c.batch_size = 4;
    c.peak_lr = 1e-2;
    c.epochs = 1;
    c.seed = seed;
    return c;
  }
};

bool same_factors(const LowRankDeltaSet& a, const LowRankDeltaSet& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i)
    if (a[i].a != b[i].a || a[i].b != b[i].b) return false;
  return true;
}

// Records whose every solution has the given beta.
std::vector<MixChainRecord> records_with_beta(const std::vector<CorpusItem>& corpus,
                                              const Tokenizer& tok, double beta) {
  auto recs = ladder_from_corpus(corpus, tok);
  for (auto& r : recs) {
    r.solutions.resize(2);
    for (auto& s : r.solutions) s.beta = beta;
  }
  return recs;
}

std::vector<SftExample> flatten(const std::vector<MixChainRecord>& recs) {
  std::vector<SftExample> out;
  for (const auto& r : recs)
    for (const auto& s : r.solutions) out.push_back({r.question, s.text, r.answer});
  return out;
}

}  // namespace

TEST(LearningRate, CosineEndpointsAndConstant) {
  TrainConfig c;
  c.peak_lr = 1.0;
  EXPECT_DOUBLE_EQ(learning_rate(c, 0, 11), 1.0);
  EXPECT_NEAR(learning_rate(c, 10, 11), 0.1, 1e-12);
  EXPECT_NEAR(learning_rate(c, 5, 11), 0.55, 1e-12);
  for (int s = 1; s < 11; ++s) EXPECT_LT(learning_rate(c, s, 11), learning_rate(c, s - 1, 11));
  c.schedule = Schedule::constant;
  EXPECT_EQ(learning_rate(c, 7, 11), 1.0);
}

TEST(TrainConfig, ValidatesAndRoundtrips) {
  TrainConfig c;
  c.seed = 9;
  c.beta_bins = 3;
  const auto back = TrainConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = {};
  c.epochs = 0;
  EXPECT_THROW(c.validate(), ValidationError);
  EXPECT_THROW(TrainConfig::from_json({{"schedule", "linear"}}), ValidationError);
  EXPECT_EQ(TrainConfig::large_model_preset().peak_lr, 4e-5);
}

TEST(AdamW, FirstStepMatchesHandComputation) {
  std::vector<float> p = {1.0f, -2.0f, 0.5f};
  const std::vector<float> g = {0.3f, -0.1f, 0.0f};
  AdamW opt;
  std::vector<std::span<float>> ps = {p};
  std::vector<std::span<const float>> gs = {g};
  const bool decay[1] = {true};
  opt.step(ps, gs, decay, 0.1, 0.01);
  // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps) plus decay.
  auto expect = [](double p0, double g0) {
    const double upd = g0 / (std::abs(g0) + 1e-8);
    return p0 - 0.1 * upd - 0.1 * 0.01 * p0;
  };
  EXPECT_NEAR(p[0], expect(1.0, 0.3), 1e-6);
  EXPECT_NEAR(p[1], expect(-2.0, -0.1), 1e-6);
  EXPECT_NEAR(p[2], expect(0.5, 0.0), 1e-6);
}

TEST(MakeSample, MaskCoversSolutionAndEos) {
  const auto tok = Tokenizer::standard();
  const auto s = make_sample(tok, "Tom has 3 coins.", "3 + 1 = 4. #### 4");
  const size_t prompt = make_prompt(tok, "Tom has 3 coins.").size();
  ASSERT_EQ(s.ids.size(), s.mask.size());
  EXPECT_EQ(s.ids.back(), Tokenizer::kEos);
  for (size_t i = 0; i < s.ids.size(); ++i) EXPECT_EQ(s.mask[i], i >= prompt) << i;
}

TEST(SftTrain, ZeroLearningRateLeavesFactorsUnchanged) {
  Fixture f;
  auto c = f.train_cfg();
  c.peak_lr = 0.0;
  c.weight_decay = 0.0;
  const auto r = sft_train(f.base, f.adapter, corpus_examples(f.corpus, 0), c, f.tok);
  EXPECT_TRUE(same_factors(r.adapter, f.adapter));
}

TEST(SftTrain, RepeatedSampleLossDecreases) {
  Fixture f;
  auto c = f.train_cfg();
  c.batch_size = 1;
  c.schedule = Schedule::constant;
  c.peak_lr = 3e-3;
  std::vector<SftExample> data(10, {f.corpus[0].question, f.corpus[0].solutions[0], 0});
  const auto r = sft_train(f.base, f.adapter, data, c, f.tok);
  ASSERT_EQ(r.log.size(), 10u);
  for (size_t i = 1; i < r.log.size(); ++i) EXPECT_LT(r.log[i].loss, r.log[i - 1].loss) << i;
}

TEST(SftTrain, DeterministicAndBaseFrozen) {
  Fixture f;
  const Checkpoint before = f.base.params;
  const auto a = sft_train(f.base, f.adapter, corpus_examples(f.corpus, 1), f.train_cfg(), f.tok);
  const auto b = sft_train(f.base, f.adapter, corpus_examples(f.corpus, 1), f.train_cfg(), f.tok);
  EXPECT_TRUE(same_factors(a.adapter, b.adapter));
  EXPECT_EQ(a.epoch_loss, b.epoch_loss);
  EXPECT_EQ(f.base.params, before);
  EXPECT_TRUE(a.params.empty());
  EXPECT_FALSE(same_factors(a.adapter, f.adapter));
  const auto c = sft_train(f.base, f.adapter, corpus_examples(f.corpus, 1), f.train_cfg(6), f.tok);
  EXPECT_FALSE(same_factors(a.adapter, c.adapter));
}

TEST(SftTrain, OverlongSamplesSkippedAndCounted) {
  Fixture f;
  auto data = corpus_examples(f.corpus, 0);
  data.push_back({f.corpus[0].question, f.corpus[0].solutions[4] + f.corpus[0].solutions[4], 0});
  const auto r = sft_train(f.base, f.adapter, data, f.train_cfg(), f.tok);
  EXPECT_EQ(r.skipped, 1u);
}

TEST(SftTrain, Validation) {
  Fixture f;
  EXPECT_THROW(sft_train(f.base, f.adapter, {}, f.train_cfg(), f.tok), ValidationError);
  EXPECT_THROW(sft_train(f.base, {}, corpus_examples(f.corpus, 0), f.train_cfg(), f.tok),
               ValidationError);
}

TEST(SftTrain, LogCsvLayout) {
  Fixture f;
  const auto r = sft_train(f.base, f.adapter, corpus_examples(f.corpus, 0), f.train_cfg(), f.tok);
  const std::string csv = log_csv(r.log);
  EXPECT_TRUE(csv.starts_with("step,epoch,phase,loss,lr\n"));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), static_cast<long>(r.log.size()) + 1);
}

TEST(Pretrain, UpdatesBaseAndReducesLoss) {
  Fixture f;
  auto c = f.train_cfg();
  c.epochs = 3;
  c.peak_lr = 3e-3;
  const auto r = pretrain(f.base, corpus_examples(f.corpus, 0), c, f.tok);
  ASSERT_EQ(r.epoch_loss.size(), 3u);
  EXPECT_LT(r.epoch_loss.back(), r.epoch_loss.front());
  EXPECT_NE(r.params, f.base.params);
  EXPECT_EQ(r.params.size(), f.base.params.size());
}

TEST(BucketByBeta, Examples) {
  auto rec = [](std::vector<double> betas) {
    MixChainRecord r{"q", 1, {}};
    for (double b : betas) {
      SolutionEntry e;
      e.text = "x";
      e.beta = b;
      r.solutions.push_back(e);
    }
    return r;
  };
  const auto one = bucket_by_beta({rec({0.0, 0.3, 1.0})}, 1);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].center, 0.5);
  EXPECT_EQ(one[0].samples.size(), 3u);

  const auto two = bucket_by_beta({rec({0.0, 1.0})}, 2);
  EXPECT_EQ(two[0].center, 0.25);
  EXPECT_EQ(two[1].center, 0.75);
  ASSERT_EQ(two[0].samples.size(), 1u);
  EXPECT_EQ(two[0].samples[0].beta, 0.0);
  ASSERT_EQ(two[1].samples.size(), 1u);
  EXPECT_EQ(two[1].samples[0].beta, 1.0);

  EXPECT_THROW(bucket_by_beta({}, 0), ValidationError);
  MixChainRecord missing{"q", 1, {SolutionEntry{}}};
  EXPECT_THROW(bucket_by_beta({missing}, 4), ValidationError);
}

TEST(BucketByBeta, PopulationsPartitionTheSamples) {
  Rng rng(8);
  std::vector<MixChainRecord> recs;
  size_t total = 0;
  for (int i = 0; i < 50; ++i) {
    MixChainRecord r{"q", 1, {}};
    const int n = static_cast<int>(rng.uniform_int(1, 5));
    for (int k = 0; k < n; ++k) {
      SolutionEntry e;
      e.beta = rng.uniform();
      r.solutions.push_back(e);
    }
    total += r.solutions.size();
    recs.push_back(r);
  }
  for (int bins : {1, 3, 8, 13}) {
    const auto b = bucket_by_beta(recs, bins);
    size_t sum = 0;
    for (size_t i = 0; i < b.size(); ++i) {
      sum += b[i].samples.size();
      for (const auto& s : b[i].samples) {
        EXPECT_LE(std::abs(s.beta - b[i].center), 0.5 / bins + 1e-12);
      }
    }
    EXPECT_EQ(sum, total);
  }
}

TEST(ValvePP, AllBetaOneReducesToSft) {
  Fixture f;
  const auto recs = records_with_beta(f.corpus, f.tok, 1.0);
  const auto pp = valve_pp_train(f.base, f.adapter, recs, f.train_cfg(), f.tok);
  const auto sft = sft_train(f.base, f.adapter, flatten(recs), f.train_cfg(), f.tok);
  EXPECT_TRUE(same_factors(pp.adapter, sft.adapter));
  EXPECT_EQ(pp.epoch_loss, sft.epoch_loss);
}

TEST(ValvePP, AllBetaZeroLeavesFactorsUnchanged) {
  Fixture f;
  const auto ad = random_adapter(f.cfg, 2, 4.0f, 4, 0.1);
  const auto pp = valve_pp_train(f.base, ad, records_with_beta(f.corpus, f.tok, 0.0),
                                 f.train_cfg(), f.tok);
  EXPECT_TRUE(same_factors(pp.adapter, ad));
}

TEST(ValvePP, DeterministicAcrossRuns) {
  Fixture f;
  const auto recs = ladder_from_corpus(f.corpus, f.tok);
  const auto a = valve_pp_train(f.base, f.adapter, recs, f.train_cfg(), f.tok);
  const auto b = valve_pp_train(f.base, f.adapter, recs, f.train_cfg(), f.tok);
  EXPECT_TRUE(same_factors(a.adapter, b.adapter));
}

TEST(Progressive, CumulativePhases) {
  const auto p = cumulative_phases(3, 2);
  ASSERT_EQ(p.size(), 3u);
  EXPECT_EQ(p[0].solution_ranks, (std::set<int>{0}));
  EXPECT_EQ(p[2].solution_ranks, (std::set<int>{0, 1, 2}));
  EXPECT_EQ(p[1].epochs, 2);
}

TEST(Progressive, SinglePhaseEqualsSftOnPool) {
  Fixture f;
  const auto recs = ladder_from_corpus(f.corpus, f.tok);
  const auto held = generate_corpus(99, 3, 2, 2, GenOptions::small());
  const Phase all{{0, 1, 2, 3, 4}, 1};
  const auto pr = progressive_compress(f.base, f.adapter, recs, {all}, f.train_cfg(), f.tok, held, 8);
  std::vector<SftExample> pool;
  for (int r = 0; r < 5; ++r)
    for (const auto& rec : recs) pool.push_back({rec.question, rec.solutions[size_t(r)].text, rec.answer});
  const auto sft = sft_train(f.base, f.adapter, pool, f.train_cfg(), f.tok);
  EXPECT_TRUE(same_factors(pr.adapter, sft.adapter));
  ASSERT_EQ(pr.snapshots.size(), 1u);
}

TEST(Progressive, ZeroEpochPhaseRepeatsSnapshot) {
  Fixture f;
  const auto recs = ladder_from_corpus(f.corpus, f.tok);
  const auto held = generate_corpus(99, 4, 2, 2, GenOptions::small());
  const std::vector<Phase> phases = {{{0}, 1}, {{0, 1}, 0}};
  const auto pr = progressive_compress(f.base, f.adapter, recs, phases, f.train_cfg(), f.tok, held, 8);
  ASSERT_EQ(pr.snapshots.size(), 2u);
  EXPECT_EQ(pr.snapshots[0].accuracy, pr.snapshots[1].accuracy);
  EXPECT_EQ(pr.snapshots[0].mean_tokens, pr.snapshots[1].mean_tokens);
  EXPECT_TRUE(snapshots_csv(pr.snapshots).starts_with("phase,accuracy,mean_tokens,acu\n"));
}

TEST(Progressive, ValidatesSchedule) {
  Fixture f;
  const auto recs = ladder_from_corpus(f.corpus, f.tok);
  const auto held = generate_corpus(99, 2, 2, 2, GenOptions::small());
  auto run = [&](std::vector<Phase> ph) {
    return progressive_compress(f.base, f.adapter, recs, ph, f.train_cfg(), f.tok, held, 4);
  };
  EXPECT_THROW(run({}), ValidationError);
  EXPECT_THROW(run({{{7}, 1}}), ValidationError);
  EXPECT_THROW(run({{{0, 1}, 1}, {{1}, 1}}), ValidationError);
  EXPECT_THROW(run({{{}, 1}}), ValidationError);
}
