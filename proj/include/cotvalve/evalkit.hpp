#pragma once

// Accuracy, completion length and accuracy-per-computation-unit reporting.

#include <algorithm>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cotvalve/io.hpp"
#include "cotvalve/synth_corpus.hpp"
#include "cotvalve/tokenizer.hpp"
#include "cotvalve/toy_lm.hpp"

namespace cotvalve {

/// <bos> question <sep>
inline TokenSeq make_prompt(const Tokenizer& tok, const std::string& question) {
  TokenSeq p{Tokenizer::kBos};
  const TokenSeq q = tok.encode(question);
  p.insert(p.end(), q.begin(), q.end());
  p.push_back(Tokenizer::kSep);
  return p;
}

struct Completion {
  TokenSeq tokens;
  std::string text;
  bool truncated = false;  // ran out of budget before emitting the stop token
  bool correct = false;
};

/// Greedy completion of one question. A truncated completion with no answer
/// marker is never counted correct.
inline Completion complete(const LanguageModel& model, const AdapterState& adapter,
                           const Tokenizer& tok, const std::string& question,
                           int64_t answer, int max_new) {
  Completion c;
  const TokenSeq prompt = make_prompt(tok, question);
  c.tokens = generate_greedy(model, adapter, prompt, max_new, Tokenizer::kEos);
  c.text = tok.decode(c.tokens);
  const bool hit_budget = static_cast<int>(c.tokens.size()) >= max_new;
  const bool hit_context =
      static_cast<int64_t>(prompt.size() + c.tokens.size()) >= model.config.context_len;
  c.truncated = hit_budget || hit_context;
  const bool has_marker = c.text.find("####") != std::string::npos;
  c.correct = (!c.truncated || has_marker) && verify(answer, c.text);
  return c;
}

/// 100 * accuracy_percent / (params_billions * mean_tokens).
inline double acu(double accuracy_percent, double params_billions, double mean_tokens) {
  if (!(params_billions > 0.0))
    throw ValidationError("params_billions must be positive");
  if (!(mean_tokens > 0.0)) throw ValidationError("mean_tokens must be positive");
  return 100.0 * accuracy_percent / (params_billions * mean_tokens);
}

struct EvalReport {
  double accuracy = 0.0;  // percent
  double mean_tokens = 0.0;
  double acu = 0.0;  // x10^2; 0 when mean_tokens is 0
  int64_t n_problems = 0;
  double alpha = 0.0;
  double params_billions = 0.0;

  nlohmann::json to_json() const {
    return {{"accuracy", accuracy},   {"mean_tokens", mean_tokens},
            {"acu", acu},             {"n_problems", n_problems},
            {"alpha", alpha},         {"params_billions", params_billions}};
  }
  bool operator==(const EvalReport&) const = default;
};

struct EvalResult {
  EvalReport report;
  std::vector<Completion> completions;  // index-aligned with the problems
};

inline EvalReport summarize(const std::vector<Completion>& completions, double alpha,
                            double params_billions) {
  if (completions.empty()) throw ValidationError("no problems to evaluate");
  EvalReport r;
  r.n_problems = static_cast<int64_t>(completions.size());
  r.alpha = alpha;
  r.params_billions = params_billions;
  int64_t correct = 0, tokens = 0;
  for (const auto& c : completions) {
    correct += c.correct ? 1 : 0;
    tokens += static_cast<int64_t>(c.tokens.size());
  }
  r.accuracy = 100.0 * double(correct) / double(r.n_problems);
  r.mean_tokens = double(tokens) / double(r.n_problems);
  r.acu = r.mean_tokens > 0.0 && params_billions > 0.0
              ? acu(r.accuracy, params_billions, r.mean_tokens)
              : 0.0;
  return r;
}

inline EvalResult evaluate(const LanguageModel& model, const AdapterState& adapter,
                           double alpha, const std::vector<CorpusItem>& problems,
                           int max_new, const Tokenizer& tok) {
  if (problems.empty()) throw ValidationError("no problems to evaluate");
  const AdapterState ad = set_alpha(adapter, alpha);
  EvalResult out;
  out.completions.reserve(problems.size());
  for (const auto& p : problems)
    out.completions.push_back(complete(model, ad, tok, p.question, p.answer, max_new));
  out.report = summarize(out.completions, alpha, param_count(model.params).billions);
  return out;
}

inline std::vector<EvalReport> alpha_sweep(const LanguageModel& model,
                                           const AdapterState& adapter,
                                           const std::vector<double>& alphas,
                                           const std::vector<CorpusItem>& problems,
                                           int max_new, const Tokenizer& tok) {
  if (alphas.empty()) throw ValidationError("alpha list is empty");
  if (!std::is_sorted(alphas.begin(), alphas.end()))
    throw ValidationError("alphas must be sorted ascending");
  std::vector<EvalReport> out;
  for (double a : alphas) out.push_back(evaluate(model, adapter, a, problems, max_new, tok).report);
  return out;
}

inline std::string sweep_csv(const std::vector<EvalReport>& reports) {
  std::string s = "alpha,accuracy,mean_tokens,acu\n";
  for (const auto& r : reports)
    s += io::shortest(r.alpha) + "," + io::fixed(r.accuracy, 4) + "," +
         io::fixed(r.mean_tokens, 4) + "," + io::fixed(r.acu, 6) + "\n";
  return s;
}

/// Tokens-vs-accuracy scatter, one point per alpha, as a standalone SVG.
inline std::string sweep_svg(const std::vector<EvalReport>& reports) {
  const double W = 480, H = 320, pad = 48;
  double tmax = 1.0;
  for (const auto& r : reports) tmax = std::max(tmax, r.mean_tokens);
  auto px = [&](double tokens) { return pad + (W - 2 * pad) * tokens / tmax; };
  auto py = [&](double acc) { return H - pad - (H - 2 * pad) * acc / 100.0; };
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"320\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<line x1=\"48\" y1=\"272\" x2=\"432\" y2=\"272\" stroke=\"black\"/>\n";
  s += "<line x1=\"48\" y1=\"48\" x2=\"48\" y2=\"272\" stroke=\"black\"/>\n";
  s += "<text x=\"240\" y=\"305\" text-anchor=\"middle\" font-size=\"12\">mean tokens</text>\n";
  s += "<text x=\"14\" y=\"160\" font-size=\"12\" transform=\"rotate(-90 14 160)\">accuracy (%)</text>\n";
  std::string path;
  for (size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    path += (i ? " L" : "M") + io::fixed(px(r.mean_tokens), 2) + " " + io::fixed(py(r.accuracy), 2);
    s += "<circle cx=\"" + io::fixed(px(r.mean_tokens), 2) + "\" cy=\"" +
         io::fixed(py(r.accuracy), 2) + "\" r=\"3\"/>\n";
    s += "<text x=\"" + io::fixed(px(r.mean_tokens) + 5, 2) + "\" y=\"" +
         io::fixed(py(r.accuracy) - 5, 2) + "\" font-size=\"10\">a=" + io::shortest(r.alpha) +
         "</text>\n";
  }
  if (!path.empty()) s += "<path d=\"" + path + "\" fill=\"none\" stroke=\"steelblue\"/>\n";
  s += "</svg>\n";
  return s;
}

}  // namespace cotvalve
