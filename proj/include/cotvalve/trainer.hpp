#pragma once

// Training regimes over the toy model: full-parameter pretraining, adapter
// SFT at magnitude 1, beta-conditioned adapter training on MixChain data, and
// multi-phase progressive compression.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cotvalve/evalkit.hpp"
#include "cotvalve/io.hpp"
#include "cotvalve/mixchain.hpp"
#include "cotvalve/rng.hpp"
#include "cotvalve/toy_lm.hpp"

namespace cotvalve {

enum class Schedule { cosine, constant };

struct TrainConfig {
  int batch_size = 64;
  double peak_lr = 1.6e-4;
  Schedule schedule = Schedule::cosine;
  double weight_decay = 0.01;
  int epochs = 1;
  uint64_t seed = 0;
  int beta_bins = 8;

  void validate() const {
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (epochs < 1) throw ValidationError("epochs must be >= 1");
    if (!(peak_lr >= 0.0) || !std::isfinite(peak_lr))
      throw ValidationError("peak_lr must be a non-negative finite number");
    if (!(weight_decay >= 0.0)) throw ValidationError("weight_decay must be non-negative");
    if (beta_bins < 1) throw ValidationError("beta_bins must be >= 1");
  }

  /// LoRA hyperparameters for billion-parameter models; unused at toy scale.
  static TrainConfig large_model_preset() {
    TrainConfig c;
    c.batch_size = 64;
    c.peak_lr = 4e-5;
    c.weight_decay = 0.01;
    c.epochs = 8;
    return c;
  }

  nlohmann::json to_json() const {
    return {{"batch_size", batch_size},
            {"peak_lr", peak_lr},
            {"schedule", schedule == Schedule::cosine ? "cosine-decay" : "constant"},
            {"weight_decay", weight_decay},
            {"epochs", epochs},
            {"seed", seed},
            {"beta_bins", beta_bins}};
  }
  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.batch_size = j.value("batch_size", c.batch_size);
    c.peak_lr = j.value("peak_lr", c.peak_lr);
    const std::string s = j.value("schedule", std::string("cosine-decay"));
    if (s == "cosine-decay" || s == "cosine")
      c.schedule = Schedule::cosine;
    else if (s == "constant")
      c.schedule = Schedule::constant;
    else
      throw ValidationError("unknown schedule '" + s + "'");
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.epochs = j.value("epochs", c.epochs);
    c.seed = j.value("seed", c.seed);
    c.beta_bins = j.value("beta_bins", c.beta_bins);
    c.validate();
    return c;
  }
};

/// Cosine decay from peak to 10% of peak over `total` steps.
inline double learning_rate(const TrainConfig& cfg, int64_t step, int64_t total) {
  if (cfg.schedule == Schedule::constant || total <= 1) return cfg.peak_lr;
  const double floor = 0.1 * cfg.peak_lr;
  const double t = double(step) / double(total - 1);
  return floor + (cfg.peak_lr - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

/// Decoupled-weight-decay Adam over a fixed list of parameter buffers.
class AdamW {
 public:
  AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(std::span<const std::span<float>> params, std::span<const std::span<const float>> grads,
            std::span<const bool> decay, double lr, double weight_decay) {
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.size(), 0.0f);
        v_.emplace_back(p.size(), 0.0f);
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, double(t_));
    const double c2 = 1.0 - std::pow(b2_, double(t_));
    for (size_t k = 0; k < params.size(); ++k) {
      auto p = params[k];
      auto g = grads[k];
      auto& m = m_[k];
      auto& v = v_[k];
      const float wd = decay[k] ? static_cast<float>(lr * weight_decay) : 0.0f;
      for (size_t i = 0; i < p.size(); ++i) {
        m[i] = static_cast<float>(b1_ * m[i] + (1.0 - b1_) * g[i]);
        v[i] = static_cast<float>(b2_ * v[i] + (1.0 - b2_) * double(g[i]) * g[i]);
        const double upd = (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
        p[i] = static_cast<float>(p[i] - lr * upd - wd * p[i]);
      }
    }
  }

 private:
  double b1_, b2_, eps_;
  int64_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

// ---------------------------------------------------------------------------

struct TrainSample {
  TokenSeq ids;
  std::vector<bool> mask;
};

/// <bos> question <sep> solution <eos>, scoring only solution and <eos>.
inline TrainSample make_sample(const Tokenizer& tok, const std::string& question,
                               const std::string& solution) {
  TrainSample s;
  s.ids = make_prompt(tok, question);
  s.mask.assign(s.ids.size(), false);
  for (TokenId id : tok.encode(solution)) {
    s.ids.push_back(id);
    s.mask.push_back(true);
  }
  s.ids.push_back(Tokenizer::kEos);
  s.mask.push_back(true);
  return s;
}

struct SftExample {
  std::string question;
  std::string solution;
  int64_t answer = 0;
};

struct LogRow {
  int64_t step = 0;
  int epoch = 0;
  int phase = 0;
  double loss = 0.0;
  double lr = 0.0;
};

inline std::string log_csv(const std::vector<LogRow>& rows) {
  std::string s = "step,epoch,phase,loss,lr\n";
  for (const auto& r : rows)
    s += std::to_string(r.step) + "," + std::to_string(r.epoch) + "," + std::to_string(r.phase) +
         "," + io::fixed(r.loss, 6) + "," + io::shortest(r.lr) + "\n";
  return s;
}

struct TrainResult {
  LowRankDeltaSet adapter;          // adapter regimes
  Checkpoint params;                // pretraining
  std::vector<double> epoch_loss;   // mean step loss per epoch
  std::vector<LogRow> log;
  size_t skipped = 0;               // samples longer than the context window
};

namespace detail {

struct SampleGroup {
  double magnitude = 1.0;
  std::vector<TrainSample> samples;
};

// Weighted loss/gradient over one micro-batch: token-weighted mean NLL.
inline double batch_step(const Net& net, const std::vector<const TrainSample*>& batch,
                         GradTarget target, Gradients& grads) {
  int64_t n = 0;
  for (const auto* s : batch) n += count_targets(s->ids, s->mask);
  if (n == 0) return 0.0;
  const float w = 1.0f / float(n);
  double nll = 0.0;
  for (const auto* s : batch) nll += accumulate_nll(net, s->ids, s->mask, w, target, grads);
  return nll / double(n);
}

inline void zero(Gradients& g) {
  for (auto& [_, t] : g.base) t.setZero();
  for (auto& m : g.a) m.setZero();
  for (auto& m : g.b) m.setZero();
}

/// Shared loop. Each epoch visits the groups in shuffled order and each
/// group's samples in shuffled order, chunked into micro-batches that all
/// run at that group's magnitude. A micro-batch at magnitude 0 does not move
/// the adapter and takes no optimizer step.
inline TrainResult run_groups(const LanguageModel& model, LowRankDeltaSet adapter,
                              std::vector<SampleGroup> groups, const TrainConfig& cfg,
                              GradTarget target, int phase, size_t skipped) {
  cfg.validate();
  TrainResult res;
  res.skipped = skipped;
  std::erase_if(groups, [](const SampleGroup& g) { return g.samples.empty(); });
  if (groups.empty()) throw ValidationError("no trainable samples");

  LanguageModel work = model;  // owns the weights being pretrained
  auto deltas = std::make_shared<LowRankDeltaSet>(std::move(adapter));

  int64_t steps_per_epoch = 0;
  for (const auto& g : groups)
    steps_per_epoch += (static_cast<int64_t>(g.samples.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t total = steps_per_epoch * cfg.epochs;

  std::vector<std::span<float>> params;
  std::vector<bool> decay_flags;
  if (target == GradTarget::base) {
    for (auto& [name, t] : work.params) {
      params.emplace_back(t.data);
      decay_flags.push_back(t.shape.size() == 2);
    }
  } else {
    for (auto& d : *deltas) {
      params.emplace_back(d.a.data(), static_cast<size_t>(d.a.size()));
      params.emplace_back(d.b.data(), static_cast<size_t>(d.b.size()));
      decay_flags.push_back(true);
      decay_flags.push_back(true);
    }
  }
  std::unique_ptr<bool[]> decay(new bool[decay_flags.size()]);
  for (size_t i = 0; i < decay_flags.size(); ++i) decay[i] = decay_flags[i];

  AdamW opt;
  Rng rng(cfg.seed);
  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<size_t> group_order(groups.size());
    std::iota(group_order.begin(), group_order.end(), size_t{0});
    rng.shuffle(group_order);
    double epoch_sum = 0.0;
    int64_t epoch_steps = 0;
    for (size_t gi : group_order) {
      const SampleGroup& g = groups[gi];
      std::vector<size_t> order(g.samples.size());
      std::iota(order.begin(), order.end(), size_t{0});
      rng.shuffle(order);
      const AdapterState ad(std::shared_ptr<const LowRankDeltaSet>(deltas),
                            target == GradTarget::adapter ? g.magnitude : 0.0);
      for (size_t off = 0; off < order.size(); off += static_cast<size_t>(cfg.batch_size)) {
        std::vector<const TrainSample*> batch;
        for (size_t k = off; k < std::min(order.size(), off + cfg.batch_size); ++k)
          batch.push_back(&g.samples[order[k]]);
        const double lr = learning_rate(cfg, step, total);
        const Net net(work, ad);
        Gradients grads = Gradients::zeros_like(work, ad, target);
        const double loss = batch_step(net, batch, target, grads);
        const bool moves = !(target == GradTarget::adapter && g.magnitude == 0.0);
        if (moves) {
          std::vector<std::span<const float>> gspans;
          if (target == GradTarget::base) {
            for (auto& [name, t] : grads.base)
              gspans.emplace_back(t.data(), static_cast<size_t>(t.size()));
          } else {
            for (size_t i = 0; i < grads.a.size(); ++i) {
              gspans.emplace_back(grads.a[i].data(), static_cast<size_t>(grads.a[i].size()));
              gspans.emplace_back(grads.b[i].data(), static_cast<size_t>(grads.b[i].size()));
            }
          }
          opt.step(params, gspans, std::span<const bool>(decay.get(), decay_flags.size()), lr,
                   cfg.weight_decay);
        }
        res.log.push_back({step, epoch, phase, loss, lr});
        epoch_sum += loss;
        ++epoch_steps;
        ++step;
      }
    }
    res.epoch_loss.push_back(epoch_steps ? epoch_sum / double(epoch_steps) : 0.0);
  }
  res.adapter = std::move(*deltas);
  if (target == GradTarget::base) res.params = std::move(work.params);
  return res;
}

inline std::vector<TrainSample> to_samples(const Tokenizer& tok, const ModelConfig& mc,
                                           const std::vector<SftExample>& data, size_t& skipped) {
  std::vector<TrainSample> out;
  for (const auto& ex : data) {
    TrainSample s = make_sample(tok, ex.question, ex.solution);
    if (static_cast<int64_t>(s.ids.size()) > mc.context_len) {
      ++skipped;
      continue;
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace detail

/// Full-parameter training of the base model (no adapter).
inline TrainResult pretrain(const LanguageModel& model, const std::vector<SftExample>& data,
                            const TrainConfig& cfg, const Tokenizer& tok) {
  if (data.empty()) throw ValidationError("dataset is empty");
  size_t skipped = 0;
  detail::SampleGroup g{1.0, detail::to_samples(tok, model.config, data, skipped)};
  return detail::run_groups(model, {}, {std::move(g)}, cfg, GradTarget::base, 0, skipped);
}

/// Adapter-only SFT at magnitude 1; the base checkpoint is never modified.
inline TrainResult sft_train(const LanguageModel& base, const LowRankDeltaSet& adapter,
                             const std::vector<SftExample>& data, const TrainConfig& cfg,
                             const Tokenizer& tok, int phase = 0) {
  if (data.empty()) throw ValidationError("dataset is empty");
  if (adapter.empty()) throw ValidationError("no adapter attached");
  size_t skipped = 0;
  detail::SampleGroup g{1.0, detail::to_samples(tok, base.config, data, skipped)};
  return detail::run_groups(base, adapter, {std::move(g)}, cfg, GradTarget::adapter, phase,
                            skipped);
}

inline std::vector<SftExample> corpus_examples(const std::vector<CorpusItem>& corpus,
                                               int verbosity) {
  if (verbosity < 0 || verbosity >= kNumVerbosity)
    throw ValidationError("verbosity must be in [0, 4]");
  std::vector<SftExample> out;
  for (const auto& it : corpus)
    out.push_back({it.question, it.solutions[static_cast<size_t>(verbosity)], it.answer});
  return out;
}

struct BetaSample {
  std::string question;
  std::string solution;
  double beta = 1.0;
};

struct BetaBucket {
  double center = 0.5;
  std::vector<BetaSample> samples;
};

/// Uniform bins over [0, 1]; bin i covers [i/n, (i+1)/n) with the last bin
/// closed at 1. All bins are returned, empty ones included.
inline std::vector<BetaBucket> bucket_by_beta(const std::vector<MixChainRecord>& records,
                                              int beta_bins) {
  if (beta_bins < 1) throw ValidationError("beta_bins must be >= 1");
  std::vector<BetaBucket> out(static_cast<size_t>(beta_bins));
  for (int i = 0; i < beta_bins; ++i) out[i].center = (i + 0.5) / beta_bins;
  for (const auto& r : records) {
    for (const auto& s : r.solutions) {
      if (!s.beta) throw ValidationError("solution without beta in '" + r.question + "'");
      const double b = std::clamp(*s.beta, 0.0, 1.0);
      const int idx = std::min(beta_bins - 1, static_cast<int>(std::floor(b * beta_bins)));
      out[static_cast<size_t>(idx)].samples.push_back({r.question, s.text, *s.beta});
    }
  }
  return out;
}

/// Beta-conditioned adapter training. Each micro-batch comes from one beta
/// bucket and runs at that bucket's mean beta.
inline TrainResult valve_pp_train(const LanguageModel& base, const LowRankDeltaSet& adapter,
                                  const std::vector<MixChainRecord>& records,
                                  const TrainConfig& cfg, const Tokenizer& tok) {
  cfg.validate();
  if (adapter.empty()) throw ValidationError("no adapter attached");
  size_t skipped = 0;
  std::vector<detail::SampleGroup> groups;
  for (const auto& bucket : bucket_by_beta(records, cfg.beta_bins)) {
    if (bucket.samples.empty()) continue;
    detail::SampleGroup g;
    double sum = 0.0;
    for (const auto& s : bucket.samples) sum += s.beta;
    g.magnitude = sum / double(bucket.samples.size());
    std::vector<SftExample> ex;
    for (const auto& s : bucket.samples) ex.push_back({s.question, s.solution, 0});
    g.samples = detail::to_samples(tok, base.config, ex, skipped);
    groups.push_back(std::move(g));
  }
  return detail::run_groups(base, adapter, std::move(groups), cfg, GradTarget::adapter, 0,
                            skipped);
}

// ---------------------------------------------------------------------------
// Progressive compression

struct Phase {
  std::set<int> solution_ranks;  // 0 = longest rung of each record
  int epochs = 1;
};

struct Snapshot {
  int phase = 0;
  double accuracy = 0.0;
  double mean_tokens = 0.0;
  double acu = 0.0;
};

inline std::string snapshots_csv(const std::vector<Snapshot>& snaps) {
  std::string s = "phase,accuracy,mean_tokens,acu\n";
  for (const auto& p : snaps)
    s += std::to_string(p.phase) + "," + io::fixed(p.accuracy, 4) + "," +
         io::fixed(p.mean_tokens, 4) + "," + io::fixed(p.acu, 6) + "\n";
  return s;
}

/// Cumulative schedule: phase k adds the next shorter rung, {0}, {0,1}, ...
inline std::vector<Phase> cumulative_phases(int n_ranks, int epochs = 1) {
  std::vector<Phase> out;
  std::set<int> acc;
  for (int r = 0; r < n_ranks; ++r) {
    acc.insert(r);
    out.push_back({acc, epochs});
  }
  return out;
}

struct ProgressiveResult {
  LowRankDeltaSet adapter;
  std::vector<Snapshot> snapshots;
  std::vector<LogRow> log;
};

/// Runs adapter SFT (magnitude 1) once per phase on the pooled rungs,
/// warm-starting from the previous phase, and evaluates the held-out set
/// after each phase. Phase k trains under seed cfg.seed + k.
inline ProgressiveResult progressive_compress(const LanguageModel& base,
                                              const LowRankDeltaSet& adapter,
                                              const std::vector<MixChainRecord>& records,
                                              const std::vector<Phase>& phases,
                                              const TrainConfig& cfg, const Tokenizer& tok,
                                              const std::vector<CorpusItem>& heldout,
                                              int max_new) {
  cfg.validate();
  if (phases.empty()) throw ValidationError("no phases");
  size_t max_rank = 0;
  for (const auto& r : records) max_rank = std::max(max_rank, r.solutions.size());
  const std::set<int>* prev = nullptr;
  for (size_t k = 0; k < phases.size(); ++k) {
    const auto& ph = phases[k];
    if (ph.solution_ranks.empty()) throw ValidationError("phase " + std::to_string(k) + " has no ranks");
    if (ph.epochs < 0) throw ValidationError("phase epochs must be >= 0");
    for (int r : ph.solution_ranks)
      if (r < 0 || static_cast<size_t>(r) >= max_rank)
        throw ValidationError("rank " + std::to_string(r) + " does not exist in the dataset");
    if (prev && !std::includes(ph.solution_ranks.begin(), ph.solution_ranks.end(),
                               prev->begin(), prev->end()))
      throw ValidationError("phase " + std::to_string(k) + " drops ranks of the previous phase");
    if (prev && *std::max_element(ph.solution_ranks.begin(), ph.solution_ranks.end()) <
                    *std::max_element(prev->begin(), prev->end()))
      throw ValidationError("phases must move from longer to shorter ranks");
    prev = &ph.solution_ranks;
  }

  ProgressiveResult out;
  out.adapter = adapter;
  for (size_t k = 0; k < phases.size(); ++k) {
    const Phase& ph = phases[k];
    if (ph.epochs > 0) {
      std::vector<SftExample> pool;
      for (int r : ph.solution_ranks)
        for (const auto& rec : records)
          if (static_cast<size_t>(r) < rec.solutions.size())
            pool.push_back({rec.question, rec.solutions[static_cast<size_t>(r)].text, rec.answer});
      TrainConfig pc = cfg;
      pc.epochs = ph.epochs;
      pc.seed = cfg.seed + k;
      auto res = sft_train(base, out.adapter, pool, pc, tok, static_cast<int>(k));
      out.adapter = std::move(res.adapter);
      out.log.insert(out.log.end(), res.log.begin(), res.log.end());
    }
    const auto rep = evaluate(base, AdapterState(out.adapter, 1.0), 1.0, heldout, max_new, tok).report;
    out.snapshots.push_back({static_cast<int>(k), rep.accuracy, rep.mean_tokens, rep.acu});
  }
  return out;
}

}  // namespace cotvalve
