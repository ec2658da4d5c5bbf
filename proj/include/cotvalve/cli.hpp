#pragma once

// Command-line front end. `run` never calls exit(); it returns the process
// exit code: 0 success, 1 runtime failure, 2 usage error.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cotvalve/adapter_arith.hpp"
#include "cotvalve/evalkit.hpp"
#include "cotvalve/io.hpp"
#include "cotvalve/mixchain.hpp"
#include "cotvalve/ntc.hpp"
#include "cotvalve/synth_corpus.hpp"
#include "cotvalve/tokenizer.hpp"
#include "cotvalve/toy_lm.hpp"
#include "cotvalve/trainer.hpp"

namespace cotvalve::cli {

using nlohmann::json;
namespace fs = std::filesystem;

/// An input file that does not exist or cannot be opened.
struct InputError : Error {
  using Error::Error;
};

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = {
      "gen-corpus", "pretrain", "coldstart", "build-mixchain", "train-valve-pp",
      "compress",   "eval",     "sweep",     "delta",          "stats"};
  return names;
}

namespace detail {

inline std::vector<double> parse_doubles(const std::string& s, const std::string& flag) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ValidationError(flag + ": '" + item + "' is not a number");
    }
    require_finite(out.back(), flag.c_str());
  }
  if (out.empty()) throw ValidationError(flag + " needs at least one value");
  return out;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep))
    if (!item.empty()) out.push_back(item);
  return out;
}

/// "0;0,1;0,1,2" -> three phases.
inline std::vector<Phase> parse_phases(const std::string& s, int epochs) {
  std::vector<Phase> out;
  for (const auto& group : split(s, ';')) {
    Phase p;
    p.epochs = epochs;
    for (const auto& r : split(group, ',')) {
      try {
        p.solution_ranks.insert(std::stoi(r));
      } catch (const std::exception&) {
        throw ValidationError("--phases: '" + r + "' is not a rank");
      }
    }
    out.push_back(std::move(p));
  }
  if (out.empty()) throw ValidationError("--phases is empty");
  return out;
}

inline void require_readable(const std::string& path, const std::string& flag) {
  std::error_code ec;
  if (!fs::is_regular_file(path, ec))
    throw InputError("input for " + flag + " does not exist or is not a file: '" + path + "'");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("input for " + flag + " is not readable: '" + path + "'");
}

inline void require_distinct(const std::vector<std::string>& inputs,
                             const std::vector<std::string>& outputs) {
  for (const auto& o : outputs) {
    if (o.empty()) continue;
    for (const auto& i : inputs) {
      std::error_code ec;
      if (!i.empty() && (o == i || fs::equivalent(o, i, ec)))
        throw ValidationError("output '" + o + "' would overwrite an input file");
    }
  }
}

inline std::string category(const std::exception& e) {
  if (dynamic_cast<const InputError*>(&e)) return "input";
  if (dynamic_cast<const ValidationError*>(&e)) return "validation";
  if (dynamic_cast<const ConformanceError*>(&e)) return "conformance";
  if (dynamic_cast<const StructuralError*>(&e)) return "structural";
  if (dynamic_cast<const ParseError*>(&e)) return "parse";
  if (dynamic_cast<const DegenerateInputError*>(&e)) return "degenerate-input";
  if (dynamic_cast<const Error*>(&e)) return "io";
  return "internal";
}

// ---------------------------------------------------------------------------
// Artifact loading

inline Tokenizer load_tokenizer(const std::string& vocab) {
  return vocab.empty() ? Tokenizer::standard() : Tokenizer::load(vocab);
}

inline LanguageModel load_model(const std::string& path, const Tokenizer& tok) {
  const auto f = ntc::read(path);
  if (f.kind != "checkpoint")
    throw ParseError("'" + path + "' holds a " + f.kind + ", not a checkpoint");
  if (!f.metadata.contains("model"))
    throw ParseError("'" + path + "' has no model config in its metadata");
  LanguageModel m{ModelConfig::from_json(f.metadata.at("model")), ntc::to_checkpoint(f)};
  if (static_cast<size_t>(m.config.vocab_size) != tok.size())
    throw ConformanceError("checkpoint vocab size " + std::to_string(m.config.vocab_size) +
                           " differs from tokenizer size " + std::to_string(tok.size()));
  return m;
}

inline void save_model(const std::string& path, const LanguageModel& m, json extra = json::object()) {
  extra["model"] = m.config.to_json();
  ntc::write(path, ntc::from_checkpoint(m.params, extra));
}

using AnyDelta = std::variant<LowRankDeltaSet, FullDelta>;

inline AnyDelta load_delta(const std::string& path) {
  const auto f = ntc::read(path);
  if (f.kind == "lowrank_delta") return ntc::to_low_rank(f);
  if (f.kind == "full_delta") return ntc::to_full_delta(f);
  throw ParseError("'" + path + "' holds a " + f.kind + ", not a delta");
}

inline void save_delta(const std::string& path, const AnyDelta& d) {
  if (const auto* lr = std::get_if<LowRankDeltaSet>(&d))
    ntc::write(path, ntc::from_low_rank(*lr));
  else
    ntc::write(path, ntc::from_full_delta(std::get<FullDelta>(d)));
}

inline std::vector<CorpusItem> load_corpus(const std::string& path, int64_t limit) {
  auto c = corpus_from_jsonl(io::read_file(path), path);
  if (limit > 0 && static_cast<size_t>(limit) < c.size()) c.resize(static_cast<size_t>(limit));
  if (c.empty()) throw ValidationError("'" + path + "' holds no problems");
  return c;
}

/// Evaluation at one magnitude for either delta flavour.
inline EvalResult evaluate_any(const LanguageModel& model, const std::optional<AnyDelta>& delta,
                               double alpha, const std::vector<CorpusItem>& problems, int max_new,
                               const Tokenizer& tok) {
  if (!delta) return evaluate(model, AdapterState::none(), alpha, problems, max_new, tok);
  if (const auto* lr = std::get_if<LowRankDeltaSet>(&*delta))
    return evaluate(model, AdapterState(*lr, 1.0), alpha, problems, max_new, tok);
  const LanguageModel merged{model.config,
                             apply_merge(model.params, std::get<FullDelta>(*delta), alpha)};
  EvalResult r = evaluate(merged, AdapterState::none(), alpha, problems, max_new, tok);
  return r;
}

inline json file_record(const std::string& path) {
  return {{"path", path}, {"fnv1a64", io::file_hash(path)}};
}

// ---------------------------------------------------------------------------
// Option bundles

struct ModelFlags {
  ModelConfig cfg;
  void add(CLI::App* app) {
    app->add_option("--d-model", cfg.d_model, "Model width");
    app->add_option("--n-layers", cfg.n_layers, "Transformer blocks");
    app->add_option("--n-heads", cfg.n_heads, "Attention heads");
    app->add_option("--context-len", cfg.context_len, "Context window in tokens");
    app->add_option("--mlp-mult", cfg.mlp_mult, "MLP expansion factor");
  }
};

struct TrainFlags {
  TrainConfig cfg;
  std::string schedule = "cosine-decay";
  void add(CLI::App* app, bool seed_required = true) {
    auto* s = app->add_option("--seed", cfg.seed, "Seed for shuffling and initialisation");
    if (seed_required) s->required();
    app->add_option("--batch-size", cfg.batch_size, "Samples per optimizer step");
    app->add_option("--lr", cfg.peak_lr, "Peak learning rate");
    app->add_option("--epochs", cfg.epochs, "Passes over the data");
    app->add_option("--weight-decay", cfg.weight_decay, "Decoupled weight decay");
    app->add_option("--schedule", schedule, "cosine-decay or constant")
        ->check(CLI::IsMember({"cosine-decay", "cosine", "constant"}));
  }
  TrainConfig resolved() const {
    TrainConfig c = cfg;
    c.schedule = schedule == "constant" ? Schedule::constant : Schedule::cosine;
    c.validate();
    return c;
  }
};

struct AdapterFlags {
  int rank = 8;
  float lora_alpha = 16.0f;
  std::string modules = "all-linear";
  std::string init_delta;
  void add(CLI::App* app, bool allow_init) {
    app->add_option("--rank", rank, "Adapter rank");
    app->add_option("--lora-alpha", lora_alpha, "Training-time adapter scale numerator");
    app->add_option("--modules", modules, "Comma list of Q,K,V,O,MLP,Attention,all-linear");
    if (allow_init) app->add_option("--init-delta", init_delta, "Start from this low-rank delta");
  }
  LowRankDeltaSet make(const ModelConfig& mc, uint64_t seed) const {
    if (!init_delta.empty()) {
      auto d = load_delta(init_delta);
      if (!std::holds_alternative<LowRankDeltaSet>(d))
        throw ValidationError("--init-delta must be a low-rank delta");
      return std::get<LowRankDeltaSet>(d);
    }
    return init_adapter(mc, rank, lora_alpha, seed ^ 0x5bd1e995ull, split(modules, ','));
  }
};

}  // namespace detail

// ---------------------------------------------------------------------------

class Cli {
 public:
  Cli(std::ostream& out, std::ostream& err) : out_(out), err_(err) { build(); }

  int run(std::vector<std::string> args) {
    if (!args.empty() && !args[0].starts_with("-")) {
      const auto& names = command_names();
      if (std::find(names.begin(), names.end(), args[0]) == names.end()) {
        err_ << "error: unknown command '" << args[0] << "'\n" << app_.help();
        return 2;
      }
    }
    try {
      merge_config(args);
    } catch (const std::exception& e) {
      err_ << "error: " << detail::category(e) << ": " << e.what() << "\n";
      return 1;
    }
    std::reverse(args.begin(), args.end());
    try {
      app_.parse(args);
    } catch (const CLI::ParseError& e) {
      const int code = app_.exit(e, out_, err_);
      return code == 0 ? 0 : 2;
    }
    CLI::App* cmd = selected();
    if (cmd == nullptr) return 2;
    if (dry_run_) {
      out_ << resolved_config(cmd).dump(2) << "\n";
      return 0;
    }
    try {
      action_();
      return 0;
    } catch (const std::exception& e) {
      err_ << "error: " << detail::category(e) << ": " << e.what() << "\n";
      return 1;
    }
  }

 private:
  std::ostream& out_;
  std::ostream& err_;
  CLI::App app_{"Length-controllable reasoning chains on a toy transformer", "cotvalve"};
  std::function<void()> action_;
  std::vector<CLI::App*> leaves_;
  bool dry_run_ = false;
  std::string config_path_;

  // shared storage for flags
  std::string vocab_, out_path_, corpus_, base_ckpt_, delta_path_, mixchain_, testset_, log_path_;
  std::string alphas_, target_ckpt_, snapshots_, manifest_, phases_, svg_, completions_;
  std::string mode_ = "C", profile_ = "default", vocab_out_, modules_arg_;
  uint64_t seed_ = 0;
  int64_t n_ = 0, limit_ = 0;
  int min_diff_ = kMinDifficulty, max_diff_ = kMaxDifficulty, verbosity_ = 4;
  int max_new_ = 256, beta_bins_ = 8, epochs_per_phase_ = 1;
  double alpha_ = 1.0;
  detail::ModelFlags model_;
  detail::TrainFlags train_;
  detail::AdapterFlags adapter_;

  CLI::App* leaf(CLI::App* parent, const std::string& name, const std::string& desc) {
    CLI::App* s = parent->add_subcommand(name, desc);
    s->add_flag("--dry-run", dry_run_, "Print the resolved configuration and exit");
    s->add_option("--config", config_path_, "JSON file of flag defaults (flags win)");
    leaves_.push_back(s);
    return s;
  }

  CLI::App* selected() {
    for (CLI::App* s : leaves_)
      if (s->parsed()) return s;
    return nullptr;
  }

  static json resolved_config(CLI::App* cmd) {
    json opts = json::object();
    for (const CLI::Option* o : cmd->get_options()) {
      const std::string name = o->get_single_name();
      if (name.empty() || name == "help" || name == "dry-run" || name == "config") continue;
      if (o->count() > 0) {
        const auto& r = o->results();
        opts[name] = r.size() == 1 ? json(r[0]) : json(r);
      } else {
        opts[name] = o->get_default_str();
      }
    }
    std::string path = cmd->get_name();
    for (const CLI::App* p = cmd->get_parent(); p && p->get_parent(); p = p->get_parent())
      path = p->get_name() + " " + path;
    return {{"command", path}, {"options", opts}};
  }

  // Appends "--key value" for config keys not given on the command line.
  void merge_config(std::vector<std::string>& args) {
    std::string path;
    for (size_t i = 0; i + 1 < args.size(); ++i)
      if (args[i] == "--config") path = args[i + 1];
    for (const auto& a : args)
      if (a.starts_with("--config=")) path = a.substr(9);
    if (path.empty()) return;
    detail::require_readable(path, "--config");
    json j;
    try {
      j = json::parse(io::read_file(path));
    } catch (const json::exception& e) {
      throw ParseError("--config '" + path + "': " + e.what());
    }
    if (!j.is_object()) throw ParseError("--config '" + path + "' must hold a JSON object");
    std::set<std::string> given;
    for (const auto& a : args)
      if (a.starts_with("--")) given.insert(a.substr(2, a.find('=') == std::string::npos
                                                            ? std::string::npos
                                                            : a.find('=') - 2));
    for (const auto& [key, value] : j.items()) {
      if (given.contains(key) || key == "config") continue;
      if (value.is_boolean()) {
        if (value.get<bool>()) args.push_back("--" + key);
        continue;
      }
      std::string text;
      if (value.is_string()) {
        text = value.get<std::string>();
      } else if (value.is_array()) {
        for (size_t i = 0; i < value.size(); ++i)
          text += (i ? "," : "") + (value[i].is_string() ? value[i].get<std::string>()
                                                         : value[i].dump());
      } else {
        text = value.dump();
      }
      args.push_back("--" + key);
      args.push_back(text);
    }
  }

  void build() {
    app_.option_defaults()->always_capture_default();
    app_.require_subcommand(1);
    app_.failure_message(CLI::FailureMessage::help);
    app_.footer("Commands: gen-corpus pretrain coldstart build-mixchain train-valve-pp compress "
                "eval sweep delta stats");

    // gen-corpus
    {
      auto* s = leaf(&app_, "gen-corpus", "Generate a synthetic arithmetic corpus (JSONL)");
      s->add_option("--seed", seed_, "Corpus seed")->required();
      s->add_option("--n", n_, "Number of problems")->required()->check(CLI::PositiveNumber);
      s->add_option("--out", out_path_, "Output JSONL")->required();
      s->add_option("--min-difficulty", min_diff_, "Fewest steps");
      s->add_option("--max-difficulty", max_diff_, "Most steps");
      s->add_option("--profile", profile_, "Number ranges: default or small")
          ->check(CLI::IsMember({"default", "small"}));
      s->add_option("--vocab-out", vocab_out_, "Also write the vocabulary file");
      s->callback([this] { action_ = [this] { gen_corpus(); }; });
    }
    // pretrain
    {
      auto* s = leaf(&app_, "pretrain", "Full-parameter training of a fresh base model");
      s->add_option("--corpus", corpus_, "Corpus JSONL")->required();
      s->add_option("--verbosity", verbosity_, "Solution style to train on")->default_val(4);
      s->add_option("--out-ckpt", out_path_, "Output checkpoint (.ntc)")->required();
      s->add_option("--vocab", vocab_, "Vocabulary file (default: built-in)");
      s->add_option("--limit", limit_, "Use only the first N problems");
      s->add_option("--log", log_path_, "Training log CSV");
      model_.add(s);
      train_.add(s);
      s->callback([this] { action_ = [this] { pretrain_cmd(); }; });
    }
    // coldstart
    {
      auto* s = leaf(&app_, "coldstart", "Train a low-rank update direction on terse chains");
      s->add_option("--base-ckpt", base_ckpt_, "Base checkpoint")->required();
      s->add_option("--corpus", corpus_, "Corpus JSONL")->required();
      s->add_option("--verbosity", verbosity_, "Solution style to train on")->default_val(0);
      s->add_option("--out-delta", out_path_, "Output low-rank delta (.ntc)")->required();
      s->add_option("--vocab", vocab_, "Vocabulary file (default: built-in)");
      s->add_option("--limit", limit_, "Use only the first N problems");
      s->add_option("--log", log_path_, "Training log CSV");
      adapter_.add(s, true);
      train_.add(s);
      s->callback([this] { action_ = [this] { coldstart_cmd(); }; });
    }
    // build-mixchain
    {
      auto* s = leaf(&app_, "build-mixchain", "Harvest verified solutions across magnitudes");
      s->add_option("--mode", mode_, "C (low-rank delta) or Z (checkpoint difference)")
          ->check(CLI::IsMember({"C", "Z"}));
      s->add_option("--alphas", alphas_, "Comma list of magnitudes")
          ->default_val("0,0.2,0.4,0.6,0.8,1");
      s->add_option("--out", out_path_, "Output MixChain JSONL")->required();
      s->add_option("--questions", corpus_, "Corpus JSONL supplying the questions")->required();
      s->add_option("--base-ckpt", base_ckpt_, "Base checkpoint")->required();
      s->add_option("--delta", delta_path_, "Low-rank delta (mode C)");
      s->add_option("--target-ckpt", target_ckpt_, "Second checkpoint (mode Z)");
      s->add_option("--max-new", max_new_, "Generation budget in tokens");
      s->add_option("--limit", limit_, "Use only the first N questions");
      s->add_option("--seed", seed_, "Recorded for provenance; decoding is greedy")->required();
      s->add_option("--vocab", vocab_, "Vocabulary file (default: built-in)");
      s->callback([this] { action_ = [this] { build_mixchain_cmd(); }; });
    }
    // train-valve-pp
    {
      auto* s = leaf(&app_, "train-valve-pp", "Magnitude-conditioned training on a MixChain");
      s->add_option("--base-ckpt", base_ckpt_, "Base checkpoint")->required();
      s->add_option("--mixchain", mixchain_, "MixChain JSONL")->required();
      s->add_option("--beta-bins", beta_bins_, "Number of beta buckets");
      s->add_option("--out-delta", out_path_, "Output low-rank delta (.ntc)")->required();
      s->add_option("--vocab", vocab_, "Vocabulary file (default: built-in)");
      s->add_option("--log", log_path_, "Training log CSV");
      adapter_.add(s, true);
      train_.add(s);
      s->callback([this] { action_ = [this] { valve_pp_cmd(); }; });
    }
    // compress
    {
      auto* s = leaf(&app_, "compress", "Progressive compression over cumulative solution ranks");
      s->add_option("--base-ckpt", base_ckpt_, "Base checkpoint")->required();
      s->add_option("--mixchain", mixchain_, "MixChain JSONL")->required();
      s->add_option("--phases", phases_, "Rank sets, e.g. \"0;0,1;0,1,2\" (default: cumulative)");
      s->add_option("--epochs-per-phase", epochs_per_phase_, "Epochs in each phase");
      s->add_option("--out-delta", out_path_, "Output low-rank delta (.ntc)")->required();
      s->add_option("--snapshots", snapshots_, "Per-phase snapshot CSV")->required();
      s->add_option("--manifest", manifest_, "Manifest JSON (default: <snapshots>.manifest.json)");
      s->add_option("--testset", testset_, "Held-out corpus JSONL")->required();
      s->add_option("--limit", limit_, "Use only the first N held-out problems");
      s->add_option("--max-new", max_new_, "Generation budget in tokens");
      s->add_option("--vocab", vocab_, "Vocabulary file (default: built-in)");
      s->add_option("--log", log_path_, "Training log CSV");
      adapter_.add(s, true);
      train_.add(s);
      s->callback([this] { action_ = [this] { compress_cmd(); }; });
    }
    // eval
    {
      auto* s = leaf(&app_, "eval", "Accuracy, mean tokens and ACU at one magnitude");
      s->add_option("--ckpt", base_ckpt_, "Checkpoint")->required();
      s->add_option("--delta", delta_path_, "Delta (.ntc); omitted means the bare checkpoint");
      s->add_option("--alpha", alpha_, "Magnitude");
      s->add_option("--testset", testset_, "Corpus JSONL")->required();
      s->add_option("--limit", limit_, "Use only the first N problems");
      s->add_option("--max-new", max_new_, "Generation budget in tokens");
      s->add_option("--out", out_path_, "Report JSON (default: stdout only)");
      s->add_option("--completions", completions_, "Write completions JSONL");
      s->add_option("--vocab", vocab_, "Vocabulary file (default: built-in)");
      s->callback([this] { action_ = [this] { eval_cmd(); }; });
    }
    // sweep
    {
      auto* s = leaf(&app_, "sweep", "Evaluate across magnitudes and write CSV + manifest");
      s->add_option("--ckpt", base_ckpt_, "Checkpoint")->required();
      s->add_option("--delta", delta_path_, "Delta (.ntc)")->required();
      s->add_option("--alphas", alphas_, "Comma list of magnitudes, ascending")->required();
      s->add_option("--testset", testset_, "Corpus JSONL")->required();
      s->add_option("--limit", limit_, "Use only the first N problems");
      s->add_option("--max-new", max_new_, "Generation budget in tokens");
      s->add_option("--out", out_path_, "Output CSV")->required();
      s->add_option("--svg", svg_, "Also write a tokens-vs-accuracy plot");
      s->add_option("--manifest", manifest_, "Manifest JSON (default: <out>.manifest.json)");
      s->add_option("--vocab", vocab_, "Vocabulary file (default: built-in)");
      s->callback([this] { action_ = [this] { sweep_cmd(); }; });
    }
    // delta
    {
      auto* d = app_.add_subcommand("delta", "Update-direction arithmetic");
      d->require_subcommand(1);
      auto* derive = leaf(d, "derive", "target - base as a dense delta");
      derive->add_option("--base", base_ckpt_, "First checkpoint")->required();
      derive->add_option("--target", target_ckpt_, "Second checkpoint")->required();
      derive->add_option("--out", out_path_, "Output delta")->required();
      derive->callback([this] { action_ = [this] { delta_derive(); }; });

      auto* scale = leaf(d, "scale", "Multiply a delta's magnitude");
      scale->add_option("--delta", delta_path_, "Delta")->required();
      scale->add_option("--alpha", alpha_, "Factor")->required();
      scale->add_option("--out", out_path_, "Output delta")->required();
      scale->callback([this] { action_ = [this] { delta_scale(); }; });

      auto* apply = leaf(d, "apply", "Merge base + alpha * delta into a checkpoint");
      apply->add_option("--base", base_ckpt_, "Base checkpoint")->required();
      apply->add_option("--delta", delta_path_, "Delta")->required();
      apply->add_option("--alpha", alpha_, "Magnitude")->required();
      apply->add_option("--out", out_path_, "Output checkpoint")->required();
      apply->callback([this] { action_ = [this] { delta_apply(); }; });

      auto* restrict_ = leaf(d, "restrict", "Keep only the listed module classes");
      restrict_->add_option("--delta", delta_path_, "Low-rank delta")->required();
      restrict_->add_option("--modules", modules_arg_, "Comma list of module classes")->required();
      restrict_->add_option("--out", out_path_, "Output delta")->required();
      restrict_->callback([this] { action_ = [this] { delta_restrict(); }; });
    }
    // stats
    {
      auto* s = leaf(&app_, "stats", "Per-rank counts and mean lengths of a MixChain");
      s->add_option("--mixchain", mixchain_, "MixChain JSONL")->required();
      s->add_option("--out", out_path_, "Also write the statistics JSON");
      s->callback([this] { action_ = [this] { stats_cmd(); }; });
    }
  }

  // -------------------------------------------------------------------------
  // Commands

  void write_log(const std::vector<LogRow>& rows) {
    if (!log_path_.empty()) io::atomic_write(log_path_, log_csv(rows));
  }

  void check_inputs(const std::vector<std::pair<std::string, std::string>>& inputs,
                    const std::vector<std::string>& outputs) {
    std::vector<std::string> paths;
    for (const auto& [path, flag] : inputs) {
      if (path.empty()) continue;
      detail::require_readable(path, flag);
      paths.push_back(path);
    }
    detail::require_distinct(paths, outputs);
  }

  GenOptions gen_options() const {
    return profile_ == "small" ? GenOptions::small() : GenOptions{};
  }

  void gen_corpus() {
    check_inputs({}, {out_path_, vocab_out_});
    const auto c = generate_corpus(seed_, static_cast<size_t>(n_), min_diff_, max_diff_, gen_options());
    io::atomic_write(out_path_, corpus_to_jsonl(c));
    if (!vocab_out_.empty()) io::atomic_write(vocab_out_, Tokenizer::standard().serialize());
    out_ << "wrote " << c.size() << " problems to " << out_path_ << "\n";
  }

  void pretrain_cmd() {
    check_inputs({{corpus_, "--corpus"}, {vocab_, "--vocab"}}, {out_path_, log_path_});
    const Tokenizer tok = detail::load_tokenizer(vocab_);
    const auto corpus = detail::load_corpus(corpus_, limit_);
    ModelConfig mc = model_.cfg;
    mc.vocab_size = static_cast<int>(tok.size());
    mc.validate();
    const TrainConfig tc = train_.resolved();
    const LanguageModel init = make_model(mc, tc.seed);
    auto res = pretrain(init, corpus_examples(corpus, verbosity_), tc, tok);
    const LanguageModel trained{mc, std::move(res.params)};
    detail::save_model(out_path_, trained,
                       {{"train", tc.to_json()}, {"verbosity", verbosity_},
                        {"corpus_fnv1a64", io::file_hash(corpus_)}});
    write_log(res.log);
    report_training(res);
  }

  void coldstart_cmd() {
    check_inputs({{base_ckpt_, "--base-ckpt"}, {corpus_, "--corpus"}, {vocab_, "--vocab"},
                  {adapter_.init_delta, "--init-delta"}},
                 {out_path_, log_path_});
    const Tokenizer tok = detail::load_tokenizer(vocab_);
    const auto base = detail::load_model(base_ckpt_, tok);
    const auto corpus = detail::load_corpus(corpus_, limit_);
    const TrainConfig tc = train_.resolved();
    auto res = sft_train(base, adapter_.make(base.config, tc.seed), corpus_examples(corpus, verbosity_),
                         tc, tok);
    ntc::write(out_path_, ntc::from_low_rank(res.adapter));
    write_log(res.log);
    report_training(res);
  }

  void build_mixchain_cmd() {
    check_inputs({{base_ckpt_, "--base-ckpt"}, {corpus_, "--questions"}, {vocab_, "--vocab"},
                  {delta_path_, "--delta"}, {target_ckpt_, "--target-ckpt"}},
                 {out_path_});
    const auto alphas = detail::parse_doubles(alphas_, "--alphas");
    if (mode_ == "C" && delta_path_.empty()) throw ValidationError("--mode C needs --delta");
    if (mode_ == "Z" && target_ckpt_.empty()) throw ValidationError("--mode Z needs --target-ckpt");
    const Tokenizer tok = detail::load_tokenizer(vocab_);
    const auto base = detail::load_model(base_ckpt_, tok);
    const auto questions = detail::load_corpus(corpus_, limit_);
    MixChainBuild b;
    if (mode_ == "C") {
      const auto d = detail::load_delta(delta_path_);
      if (!std::holds_alternative<LowRankDeltaSet>(d))
        throw ValidationError("--mode C needs a low-rank delta");
      b = build_mixchain_c(base, std::get<LowRankDeltaSet>(d), questions, alphas, tok, max_new_);
    } else {
      const auto target = detail::load_model(target_ckpt_, tok);
      b = build_mixchain_z(base, target.params, questions, alphas, tok, max_new_);
    }
    save_mixchain(b.records, out_path_);
    json summary = dataset_stats(b.records, b.dropped_records).to_json();
    summary["dropped_solutions"] = b.dropped_solutions;
    out_ << summary.dump() << "\n";
  }

  void valve_pp_cmd() {
    check_inputs({{base_ckpt_, "--base-ckpt"}, {mixchain_, "--mixchain"}, {vocab_, "--vocab"},
                  {adapter_.init_delta, "--init-delta"}},
                 {out_path_, log_path_});
    const Tokenizer tok = detail::load_tokenizer(vocab_);
    const auto base = detail::load_model(base_ckpt_, tok);
    const auto records = load_mixchain(mixchain_);
    TrainConfig tc = train_.resolved();
    tc.beta_bins = beta_bins_;
    tc.validate();
    auto res = valve_pp_train(base, adapter_.make(base.config, tc.seed), records, tc, tok);
    ntc::write(out_path_, ntc::from_low_rank(res.adapter));
    write_log(res.log);
    report_training(res);
  }

  void compress_cmd() {
    const std::string manifest = manifest_.empty() ? snapshots_ + ".manifest.json" : manifest_;
    check_inputs({{base_ckpt_, "--base-ckpt"}, {mixchain_, "--mixchain"}, {testset_, "--testset"},
                  {vocab_, "--vocab"}, {adapter_.init_delta, "--init-delta"}},
                 {out_path_, snapshots_, manifest, log_path_});
    const Tokenizer tok = detail::load_tokenizer(vocab_);
    const auto base = detail::load_model(base_ckpt_, tok);
    const auto records = load_mixchain(mixchain_);
    const auto heldout = detail::load_corpus(testset_, limit_);
    size_t ranks = 0;
    for (const auto& r : records) ranks = std::max(ranks, r.solutions.size());
    const auto phases = phases_.empty() ? cumulative_phases(static_cast<int>(ranks), epochs_per_phase_)
                                        : detail::parse_phases(phases_, epochs_per_phase_);
    const TrainConfig tc = train_.resolved();
    auto res = progressive_compress(base, adapter_.make(base.config, tc.seed), records, phases, tc,
                                    tok, heldout, max_new_);
    ntc::write(out_path_, ntc::from_low_rank(res.adapter));
    io::atomic_write(snapshots_, snapshots_csv(res.snapshots));
    write_log(res.log);
    json phase_list = json::array();
    for (const auto& p : phases) phase_list.push_back({{"ranks", p.solution_ranks}, {"epochs", p.epochs}});
    json m = {{"command", "compress"},
              {"inputs",
               {{"base_ckpt", detail::file_record(base_ckpt_)},
                {"mixchain", detail::file_record(mixchain_)},
                {"testset", detail::file_record(testset_)}}},
              {"config", {{"train", tc.to_json()}, {"phases", phase_list}, {"max_new", max_new_},
                          {"limit", limit_}}},
              {"outputs",
               {{"delta", detail::file_record(out_path_)},
                {"snapshots", detail::file_record(snapshots_)}}}};
    if (!adapter_.init_delta.empty())
      m["inputs"]["init_delta"] = detail::file_record(adapter_.init_delta);
    io::atomic_write(manifest, m.dump(2) + "\n");
    out_ << snapshots_csv(res.snapshots);
  }

  void eval_cmd() {
    check_inputs({{base_ckpt_, "--ckpt"}, {delta_path_, "--delta"}, {testset_, "--testset"},
                  {vocab_, "--vocab"}},
                 {out_path_, completions_});
    require_finite(alpha_);
    const Tokenizer tok = detail::load_tokenizer(vocab_);
    const auto model = detail::load_model(base_ckpt_, tok);
    const auto problems = detail::load_corpus(testset_, limit_);
    std::optional<detail::AnyDelta> delta;
    if (!delta_path_.empty()) delta = detail::load_delta(delta_path_);
    const auto res = detail::evaluate_any(model, delta, alpha_, problems, max_new_, tok);
    const std::string report = res.report.to_json().dump(2) + "\n";
    if (!out_path_.empty()) io::atomic_write(out_path_, report);
    if (!completions_.empty()) {
      std::string lines;
      for (size_t i = 0; i < problems.size(); ++i) {
        const auto& c = res.completions[i];
        lines += json{{"question", problems[i].question},
                      {"answer", problems[i].answer},
                      {"completion", c.text},
                      {"tokens", c.tokens.size()},
                      {"truncated", c.truncated},
                      {"correct", c.correct}}
                     .dump() +
                 "\n";
      }
      io::atomic_write(completions_, lines);
    }
    out_ << report;
  }

  void sweep_cmd() {
    const std::string manifest = manifest_.empty() ? out_path_ + ".manifest.json" : manifest_;
    check_inputs({{base_ckpt_, "--ckpt"}, {delta_path_, "--delta"}, {testset_, "--testset"},
                  {vocab_, "--vocab"}},
                 {out_path_, svg_, manifest});
    const auto alphas = detail::parse_doubles(alphas_, "--alphas");
    if (!std::is_sorted(alphas.begin(), alphas.end()))
      throw ValidationError("--alphas must be sorted ascending");
    const Tokenizer tok = detail::load_tokenizer(vocab_);
    const auto model = detail::load_model(base_ckpt_, tok);
    const auto problems = detail::load_corpus(testset_, limit_);
    const std::optional<detail::AnyDelta> delta = detail::load_delta(delta_path_);
    std::vector<EvalReport> reports;
    for (double a : alphas)
      reports.push_back(detail::evaluate_any(model, delta, a, problems, max_new_, tok).report);
    const std::string csv = sweep_csv(reports);
    io::atomic_write(out_path_, csv);
    if (!svg_.empty()) io::atomic_write(svg_, sweep_svg(reports));
    json m = {{"command", "sweep"},
              {"inputs",
               {{"ckpt", detail::file_record(base_ckpt_)},
                {"delta", detail::file_record(delta_path_)},
                {"testset", detail::file_record(testset_)}}},
              {"config", {{"alphas", alphas}, {"max_new", max_new_}, {"limit", limit_}}},
              {"outputs", {{"csv", detail::file_record(out_path_)}}}};
    if (!svg_.empty()) m["outputs"]["svg"] = detail::file_record(svg_);
    io::atomic_write(manifest, m.dump(2) + "\n");
    out_ << csv;
  }

  void delta_derive() {
    check_inputs({{base_ckpt_, "--base"}, {target_ckpt_, "--target"}}, {out_path_});
    const auto a = ntc::read(base_ckpt_), b = ntc::read(target_ckpt_);
    const auto d = derive_full_delta(ntc::to_checkpoint(a), ntc::to_checkpoint(b));
    detail::save_delta(out_path_, d);
    out_ << "wrote dense delta over " << d.entries.size() << " tensors\n";
  }

  void delta_scale() {
    check_inputs({{delta_path_, "--delta"}}, {out_path_});
    require_finite(alpha_);
    const auto d = detail::load_delta(delta_path_);
    std::visit([&](const auto& x) { detail::save_delta(out_path_, scale_runtime(x, alpha_)); }, d);
    out_ << "scaled by " << io::shortest(alpha_) << "\n";
  }

  void delta_apply() {
    check_inputs({{base_ckpt_, "--base"}, {delta_path_, "--delta"}}, {out_path_});
    require_finite(alpha_);
    const auto base = ntc::read(base_ckpt_);
    if (base.kind != "checkpoint") throw ParseError("--base must be a checkpoint");
    const Checkpoint ck = ntc::to_checkpoint(base);
    const auto d = detail::load_delta(delta_path_);
    const Checkpoint merged = std::visit([&](const auto& x) { return apply_merge(ck, x, alpha_); }, d);
    ntc::File out = base;
    for (auto& e : out.entries) e.tensor = merged.at(e.name);
    ntc::write(out_path_, out);
    out_ << "merged at alpha " << io::shortest(alpha_) << "\n";
  }

  void delta_restrict() {
    check_inputs({{delta_path_, "--delta"}}, {out_path_});
    const auto d = detail::load_delta(delta_path_);
    if (!std::holds_alternative<LowRankDeltaSet>(d))
      throw ValidationError("restrict needs a low-rank delta");
    const auto kept = restrict_modules(std::get<LowRankDeltaSet>(d), detail::split(modules_arg_, ','));
    ntc::write(out_path_, ntc::from_low_rank(kept));
    out_ << "kept " << kept.size() << " adapters, " << param_count(kept) << " parameters\n";
  }

  void stats_cmd() {
    check_inputs({{mixchain_, "--mixchain"}}, {out_path_});
    const auto records = load_mixchain(mixchain_);
    const std::string s = dataset_stats(records).to_json().dump(2) + "\n";
    if (!out_path_.empty()) io::atomic_write(out_path_, s);
    out_ << s;
  }

  void report_training(const TrainResult& r) {
    for (size_t e = 0; e < r.epoch_loss.size(); ++e)
      out_ << "epoch " << (e + 1) << " loss " << io::fixed(r.epoch_loss[e], 6) << "\n";
    if (r.skipped) out_ << "skipped " << r.skipped << " over-length samples\n";
  }
};

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  Cli cli(out, err);
  return cli.run(args);
}

}  // namespace cotvalve::cli
