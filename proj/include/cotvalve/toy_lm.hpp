#pragma once

// Small decoder-only transformer with low-rank adapter branches whose
// magnitude is a runtime scalar. Forward, analytic backward, and greedy
// decoding over a cached key/value state.
//
// Layout: learned token + position embeddings; pre-norm blocks with
// multi-head causal self-attention (q, k, v, o) and a GeLU MLP (fc1, fc2);
// final LayerNorm; untied output projection `head.weight`.

#include <cmath>
#include <algorithm>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "cotvalve/adapter_arith.hpp"
#include "cotvalve/rng.hpp"
#include "cotvalve/tensor.hpp"
#include "cotvalve/tokenizer.hpp"

namespace cotvalve {

struct ModelConfig {
  int vocab_size = 512;
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int context_len = 512;
  int mlp_mult = 4;

  void validate() const {
    if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 ||
        context_len < 1 || mlp_mult < 1)
      throw ValidationError("model dimensions must be positive");
    if (d_model % n_heads != 0)
      throw ValidationError("d_model (" + std::to_string(d_model) +
                            ") must be divisible by n_heads (" +
                            std::to_string(n_heads) + ")");
  }
  int d_head() const { return d_model / n_heads; }
  int d_mlp() const { return d_model * mlp_mult; }

  nlohmann::json to_json() const {
    return {{"vocab_size", vocab_size}, {"d_model", d_model},
            {"n_layers", n_layers},     {"n_heads", n_heads},
            {"context_len", context_len}, {"mlp_mult", mlp_mult}};
  }
  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.context_len = j.value("context_len", c.context_len);
    c.mlp_mult = j.value("mlp_mult", c.mlp_mult);
    c.validate();
    return c;
  }
  bool operator==(const ModelConfig&) const = default;
};

struct LanguageModel {
  ModelConfig config;
  Checkpoint params;
};

/// Adapter branches plus the runtime magnitude. Copies share the (immutable)
/// factor set, so changing alpha is O(1).
struct AdapterState {
  std::shared_ptr<const LowRankDeltaSet> deltas;
  double alpha = 0.0;

  AdapterState() = default;
  explicit AdapterState(LowRankDeltaSet d, double a = 1.0)
      : deltas(std::make_shared<const LowRankDeltaSet>(std::move(d))), alpha(a) {
    require_finite(alpha);
  }
  AdapterState(std::shared_ptr<const LowRankDeltaSet> d, double a)
      : deltas(std::move(d)), alpha(a) {
    require_finite(alpha);
  }

  static AdapterState none() { return {}; }
  bool active() const { return deltas && !deltas->empty() && alpha != 0.0; }
};

inline AdapterState set_alpha(const AdapterState& adapter, double alpha) {
  require_finite(alpha);
  AdapterState out = adapter;
  out.alpha = alpha;
  return out;
}

/// Names of every adaptable linear layer, in block order.
inline std::vector<std::string> linear_targets(const ModelConfig& cfg) {
  std::vector<std::string> out;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    for (const char* s : {"attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc1", "mlp.fc2"})
      out.push_back(p + s);
  }
  return out;
}

inline Checkpoint init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const int64_t V = cfg.vocab_size, D = cfg.d_model, C = cfg.context_len,
                F = cfg.d_mlp();
  Checkpoint ck;
  auto normal = [&](std::vector<int64_t> shape, double std) {
    Tensor t(std::move(shape));
    for (auto& x : t.data) x = static_cast<float>(rng.normal() * std);
    return t;
  };
  const double resid_std = 0.02 / std::sqrt(2.0 * cfg.n_layers);
  ck["tok_emb"] = normal({V, D}, 0.02);
  ck["pos_emb"] = normal({C, D}, 0.02);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    ck[p + "ln1.weight"] = Tensor({D}, 1.0f);
    ck[p + "ln1.bias"] = Tensor({D}, 0.0f);
    for (const char* s : {"attn.q", "attn.k", "attn.v"}) {
      ck[p + s + ".weight"] = normal({D, D}, 0.02);
      ck[p + s + ".bias"] = Tensor({D}, 0.0f);
    }
    ck[p + "attn.o.weight"] = normal({D, D}, resid_std);
    ck[p + "attn.o.bias"] = Tensor({D}, 0.0f);
    ck[p + "ln2.weight"] = Tensor({D}, 1.0f);
    ck[p + "ln2.bias"] = Tensor({D}, 0.0f);
    ck[p + "mlp.fc1.weight"] = normal({F, D}, 0.02);
    ck[p + "mlp.fc1.bias"] = Tensor({F}, 0.0f);
    ck[p + "mlp.fc2.weight"] = normal({D, F}, resid_std);
    ck[p + "mlp.fc2.bias"] = Tensor({D}, 0.0f);
  }
  ck["ln_f.weight"] = Tensor({D}, 1.0f);
  ck["ln_f.bias"] = Tensor({D}, 0.0f);
  ck["head.weight"] = normal({V, D}, 0.02);
  return ck;
}

inline LanguageModel make_model(const ModelConfig& cfg, uint64_t seed) {
  return {cfg, init_params(cfg, seed)};
}

/// Adapter on each selected linear layer of the model.
inline LowRankDeltaSet init_adapter(const ModelConfig& cfg, int rank, float lora_alpha,
                                    uint64_t seed,
                                    const std::vector<std::string>& modules = {"all-linear"}) {
  Rng rng(seed);
  LowRankDeltaSet out;
  for (const auto& t : linear_targets(cfg)) {
    const bool mlp1 = t.ends_with("fc1"), mlp2 = t.ends_with("fc2");
    const int64_t d_in = mlp2 ? cfg.d_mlp() : cfg.d_model;
    const int64_t d_out = mlp1 ? cfg.d_mlp() : cfg.d_model;
    out.push_back(init_low_rank(t, d_in, d_out, rank, lora_alpha, rng));
  }
  return restrict_modules(out, modules);
}

struct ParamCount {
  int64_t count = 0;
  double billions = 0.0;
};

inline ParamCount param_count(const Checkpoint& params) {
  const int64_t n = scalar_count(params);
  return {n, double(n) / 1e9};
}

// ---------------------------------------------------------------------------

namespace detail {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;
template <class S>
using ColVec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <class S>
inline S gelu(S x) {
  const S k = S(0.7978845608028654);  // sqrt(2/pi)
  return S(0.5) * x * (S(1) + std::tanh(k * (x + S(0.044715) * x * x * x)));
}
template <class S>
inline S gelu_grad(S x) {
  const S k = S(0.7978845608028654);
  const S th = std::tanh(k * (x + S(0.044715) * x * x * x));
  return S(0.5) * (S(1) + th) +
         S(0.5) * x * (S(1) - th * th) * k * (S(1) + S(3) * S(0.044715) * x * x);
}

template <class S>
Mat<S> to_mat(const Tensor& t) {
  return t.mat().template cast<S>();
}
template <class S>
RowVec<S> to_vec(const Tensor& t) {
  return Eigen::Map<const Eigen::RowVectorXf>(t.data.data(), t.numel()).template cast<S>();
}

template <class S>
struct LinearRef {
  std::string name;
  Mat<S> w;
  RowVec<S> b;
  Mat<S> a, bf;  // adapter factors, present only when the branch is active
  int adapter_index = -1;
  S coeff = S(0);  // alpha * multiplier * lora_alpha / rank
  bool branch() const { return adapter_index >= 0 && coeff != S(0); }
};

template <class S>
struct BlockRefs {
  RowVec<S> ln1_w, ln1_b, ln2_w, ln2_b;
  LinearRef<S> q, k, v, o, fc1, fc2;
};

/// Weights (and attached adapters) resolved into scalar-typed matrices.
template <class S>
struct NetT {
  ModelConfig cfg;
  Mat<S> tok_emb, pos_emb, head;
  RowVec<S> lnf_w, lnf_b;
  std::vector<BlockRefs<S>> blocks;

  NetT(const LanguageModel& m, const AdapterState& ad) : cfg(m.config) {
    cfg.validate();
    auto get = [&](const std::string& n) -> const Tensor& {
      auto it = m.params.find(n);
      if (it == m.params.end()) throw StructuralError("checkpoint lacks '" + n + "'");
      return it->second;
    };
    const Tensor& te = get("tok_emb");
    const Tensor& pe = get("pos_emb");
    const Tensor& hd = get("head.weight");
    if (te.rows() != cfg.vocab_size || te.cols() != cfg.d_model ||
        pe.rows() != cfg.context_len || pe.cols() != cfg.d_model ||
        hd.rows() != cfg.vocab_size || hd.cols() != cfg.d_model)
      throw ConformanceError("checkpoint shapes do not match model config");
    tok_emb = to_mat<S>(te);
    pos_emb = to_mat<S>(pe);
    head = to_mat<S>(hd);
    lnf_w = to_vec<S>(get("ln_f.weight"));
    lnf_b = to_vec<S>(get("ln_f.bias"));

    std::unordered_map<std::string, int> by_target;
    if (ad.deltas) {
      for (size_t i = 0; i < ad.deltas->size(); ++i) {
        const auto& d = (*ad.deltas)[i];
        d.validate();
        if (!by_target.emplace(d.target_name, static_cast<int>(i)).second)
          throw ConformanceError("two adapters target '" + d.target_name + "'");
      }
    }
    size_t attached = 0;
    auto lin = [&](const std::string& n, int64_t d_in, int64_t d_out) {
      LinearRef<S> r;
      r.name = n;
      const Tensor& w = get(n + ".weight");
      const Tensor& b = get(n + ".bias");
      if (w.rows() != d_out || w.cols() != d_in || b.numel() != d_out)
        throw ConformanceError("'" + n + "' has the wrong shape for the model config");
      r.w = to_mat<S>(w);
      r.b = to_vec<S>(b);
      auto it = by_target.find(n);
      if (it != by_target.end()) {
        const LowRankDelta& d = (*ad.deltas)[static_cast<size_t>(it->second)];
        if (d.d_in() != d_in || d.d_out() != d_out)
          throw ConformanceError("adapter for '" + n + "' does not match its weight");
        r.adapter_index = it->second;
        r.coeff = static_cast<S>(ad.alpha * d.multiplier * d.scaling());
        r.a = d.a.template cast<S>();
        r.bf = d.b.template cast<S>();
        ++attached;
      }
      return r;
    };
    const int64_t D = cfg.d_model, F = cfg.d_mlp();
    for (int l = 0; l < cfg.n_layers; ++l) {
      const std::string p = "blocks." + std::to_string(l) + ".";
      BlockRefs<S> b;
      b.ln1_w = to_vec<S>(get(p + "ln1.weight"));
      b.ln1_b = to_vec<S>(get(p + "ln1.bias"));
      b.ln2_w = to_vec<S>(get(p + "ln2.weight"));
      b.ln2_b = to_vec<S>(get(p + "ln2.bias"));
      b.q = lin(p + "attn.q", D, D);
      b.k = lin(p + "attn.k", D, D);
      b.v = lin(p + "attn.v", D, D);
      b.o = lin(p + "attn.o", D, D);
      b.fc1 = lin(p + "mlp.fc1", D, F);
      b.fc2 = lin(p + "mlp.fc2", F, D);
      blocks.push_back(std::move(b));
    }
    if (attached != by_target.size())
      throw ConformanceError("adapter targets a layer the model does not have");
  }
};

using Net = NetT<float>;

template <class S>
struct LinearCache {
  Mat<S> u;  // x * A^T, only when the adapter branch is active
};

template <class S>
void linear_forward(const LinearRef<S>& L, const Mat<S>& x, Mat<S>& y, LinearCache<S>* cache) {
  y.noalias() = x * L.w.transpose();
  y.rowwise() += L.b;
  if (L.branch()) {
    Mat<S> u = x * L.a.transpose();
    y.noalias() += (L.coeff * u) * L.bf.transpose();
    if (cache) cache->u = std::move(u);
  }
}

template <class S>
S ln_eps() {
  return S(1e-5);
}

template <class S>
void layer_norm(const Mat<S>& x, const RowVec<S>& g, const RowVec<S>& b, Mat<S>& y,
                Mat<S>* xhat, ColVec<S>* rstd) {
  const int64_t T = x.rows(), D = x.cols();
  y.resize(T, D);
  if (xhat) xhat->resize(T, D);
  if (rstd) rstd->resize(T);
  for (int64_t t = 0; t < T; ++t) {
    const S mean = x.row(t).mean();
    const S var = (x.row(t).array() - mean).square().mean();
    const S rs = S(1) / std::sqrt(var + ln_eps<S>());
    for (int64_t d = 0; d < D; ++d) {
      const S h = (x(t, d) - mean) * rs;
      if (xhat) (*xhat)(t, d) = h;
      y(t, d) = h * g(d) + b(d);
    }
    if (rstd) (*rstd)(t) = rs;
  }
}

template <class S>
struct BlockCache {
  Mat<S> h1, xhat1, q, k, v, ctx, h2, xhat2, f, g;
  ColVec<S> rstd1, rstd2;
  std::vector<Mat<S>> probs;  // per head, T x T (lower triangle used)
  LinearCache<S> cq, ck, cv, co, cf1, cf2;
};

template <class S>
struct ForwardCache {
  std::vector<BlockCache<S>> blocks;
  Mat<S> xhat_f, h_f;
  ColVec<S> rstd_f;
};

template <class S>
void attention(const ModelConfig& cfg, const Mat<S>& q, const Mat<S>& k, const Mat<S>& v,
               Mat<S>& ctx, std::vector<Mat<S>>* probs) {
  const int64_t T = q.rows();
  const int H = cfg.n_heads, dh = cfg.d_head();
  const S scale = S(1) / std::sqrt(S(dh));
  ctx.resize(T, cfg.d_model);
  if (probs) probs->resize(H);
  Mat<S> s(T, T);
  for (int h = 0; h < H; ++h) {
    auto qh = q.middleCols(h * dh, dh);
    auto kh = k.middleCols(h * dh, dh);
    auto vh = v.middleCols(h * dh, dh);
    s.noalias() = (qh * kh.transpose()) * scale;
    for (int64_t i = 0; i < T; ++i) {
      S mx = -std::numeric_limits<S>::infinity();
      for (int64_t j = 0; j <= i; ++j) mx = std::max(mx, s(i, j));
      S sum = S(0);
      for (int64_t j = 0; j <= i; ++j) {
        s(i, j) = std::exp(s(i, j) - mx);
        sum += s(i, j);
      }
      const S inv = S(1) / sum;
      for (int64_t j = 0; j <= i; ++j) s(i, j) *= inv;
      for (int64_t j = i + 1; j < T; ++j) s(i, j) = S(0);
    }
    ctx.middleCols(h * dh, dh).noalias() = s * vh;
    if (probs) (*probs)[h] = s;
  }
}

template <class S>
Mat<S> forward(const NetT<S>& net, const TokenSeq& ids, ForwardCache<S>* cache) {
  const ModelConfig& cfg = net.cfg;
  const int64_t T = static_cast<int64_t>(ids.size());
  if (T < 1 || T > cfg.context_len)
    throw ValidationError("sequence length " + std::to_string(T) + " outside [1, " +
                          std::to_string(cfg.context_len) + "]");
  Mat<S> x(T, cfg.d_model);
  for (int64_t t = 0; t < T; ++t) {
    const TokenId id = ids[static_cast<size_t>(t)];
    if (id < 0 || id >= cfg.vocab_size)
      throw ValidationError("token id " + std::to_string(id) + " out of range");
    x.row(t) = net.tok_emb.row(id) + net.pos_emb.row(t);
  }
  if (cache) cache->blocks.resize(net.blocks.size());
  Mat<S> h, q, k, v, ctx, o, f, g, m;
  for (size_t l = 0; l < net.blocks.size(); ++l) {
    const BlockRefs<S>& B = net.blocks[l];
    BlockCache<S>* c = cache ? &cache->blocks[l] : nullptr;
    layer_norm(x, B.ln1_w, B.ln1_b, h, c ? &c->xhat1 : nullptr, c ? &c->rstd1 : nullptr);
    linear_forward(B.q, h, q, c ? &c->cq : nullptr);
    linear_forward(B.k, h, k, c ? &c->ck : nullptr);
    linear_forward(B.v, h, v, c ? &c->cv : nullptr);
    attention(cfg, q, k, v, ctx, c ? &c->probs : nullptr);
    linear_forward(B.o, ctx, o, c ? &c->co : nullptr);
    if (c) {
      c->h1 = h;
      c->q = q;
      c->k = k;
      c->v = v;
      c->ctx = ctx;
    }
    x += o;
    layer_norm(x, B.ln2_w, B.ln2_b, h, c ? &c->xhat2 : nullptr, c ? &c->rstd2 : nullptr);
    linear_forward(B.fc1, h, f, c ? &c->cf1 : nullptr);
    g = f.unaryExpr([](S z) { return gelu(z); });
    linear_forward(B.fc2, g, m, c ? &c->cf2 : nullptr);
    if (c) {
      c->h2 = h;
      c->f = f;
      c->g = g;
    }
    x += m;
  }
  Mat<S> hf;
  layer_norm(x, net.lnf_w, net.lnf_b, hf, cache ? &cache->xhat_f : nullptr,
             cache ? &cache->rstd_f : nullptr);
  Mat<S> logits = hf * net.head.transpose();
  if (cache) cache->h_f = std::move(hf);
  return logits;
}

}  // namespace detail

/// Next-token logits for every position, shape seq.size() x vocab_size.
template <class S = float>
detail::Mat<S> forward_logits(const LanguageModel& model, const AdapterState& adapter,
                              const TokenSeq& seq) {
  const detail::NetT<S> net(model, adapter);
  return detail::forward<S>(net, seq, nullptr);
}

// ---------------------------------------------------------------------------
// Loss and gradients

enum class GradTarget { none, base, adapter };

template <class S>
struct GradientsT {
  using Matrix = detail::Mat<S>;
  std::map<std::string, Matrix> base;  // GradTarget::base; 1-D tensors are 1 x n
  std::vector<Matrix> a, b;            // GradTarget::adapter, aligned with the deltas

  static GradientsT zeros_like(const LanguageModel& m, const AdapterState& ad, GradTarget t) {
    GradientsT g;
    if (t == GradTarget::base)
      for (const auto& [n, p] : m.params) g.base.emplace(n, Matrix::Zero(p.rows(), p.cols()));
    if (t == GradTarget::adapter && ad.deltas)
      for (const auto& d : *ad.deltas) {
        g.a.push_back(Matrix::Zero(d.a.rows(), d.a.cols()));
        g.b.push_back(Matrix::Zero(d.b.rows(), d.b.cols()));
      }
    return g;
  }
};
using Gradients = GradientsT<float>;

template <class S>
struct LossResultT {
  double loss = 0.0;  // mean NLL over scored positions
  int64_t n_targets = 0;
  GradientsT<S> grads;
};
using LossResult = LossResultT<float>;

namespace detail {

inline int64_t count_targets(const TokenSeq& seq, const std::vector<bool>& mask) {
  if (mask.size() != seq.size())
    throw ValidationError("loss mask length " + std::to_string(mask.size()) +
                          " differs from sequence length " + std::to_string(seq.size()));
  int64_t n = 0;
  for (size_t i = 1; i < mask.size(); ++i) n += mask[i] ? 1 : 0;
  return n;
}

template <class S>
void layer_norm_backward(const Mat<S>& dy, const Mat<S>& xhat, const ColVec<S>& rstd,
                         const RowVec<S>& g, Mat<S>* dg, Mat<S>* db, Mat<S>& dx) {
  const int64_t T = dy.rows(), D = dy.cols();
  dx.resize(T, D);
  RowVec<S> dxhat(D);
  for (int64_t t = 0; t < T; ++t) {
    dxhat = dy.row(t).cwiseProduct(g);
    const S mean_dxhat = dxhat.mean();
    const S mean_dxhat_xhat = dxhat.cwiseProduct(xhat.row(t)).mean();
    for (int64_t d = 0; d < D; ++d)
      dx(t, d) = rstd(t) * (dxhat(d) - mean_dxhat - xhat(t, d) * mean_dxhat_xhat);
  }
  if (dg) dg->row(0) += dy.cwiseProduct(xhat).colwise().sum();
  if (db) db->row(0) += dy.colwise().sum();
}

template <class S>
void linear_backward(const LinearRef<S>& L, const Mat<S>& x, const Mat<S>& dy,
                     const LinearCache<S>& cache, Mat<S>& dx, GradientsT<S>& grads,
                     GradTarget target) {
  dx.noalias() = dy * L.w;
  if (L.branch()) {
    Mat<S> du = (L.coeff * dy) * L.bf;  // T x r
    dx.noalias() += du * L.a;
    if (target == GradTarget::adapter) {
      const auto i = static_cast<size_t>(L.adapter_index);
      grads.b[i].noalias() += (L.coeff * dy.transpose()) * cache.u;
      grads.a[i].noalias() += du.transpose() * x;
    }
  }
  if (target == GradTarget::base) {
    grads.base.at(L.name + ".weight").noalias() += dy.transpose() * x;
    grads.base.at(L.name + ".bias").row(0) += dy.colwise().sum();
  }
}

/// Accumulates weight * sum over scored positions of -log p(target) and its
/// gradient into `grads`. Returns the unweighted NLL sum.
template <class S>
double accumulate_nll(const NetT<S>& net, const TokenSeq& seq, const std::vector<bool>& mask,
                      S weight, GradTarget target, GradientsT<S>& grads) {
  const ModelConfig& cfg = net.cfg;
  ForwardCache<S> cache;
  const bool need_grad = target != GradTarget::none;
  const Mat<S> logits = forward<S>(net, seq, need_grad ? &cache : nullptr);
  const int64_t T = logits.rows(), V = logits.cols();

  double nll = 0.0;
  Mat<S> dlogits;
  if (need_grad) dlogits = Mat<S>::Zero(T, V);
  for (int64_t t = 0; t + 1 < T; ++t) {
    if (!mask[static_cast<size_t>(t + 1)]) continue;
    const TokenId y = seq[static_cast<size_t>(t + 1)];
    const double mx = double(logits.row(t).maxCoeff());
    double z = 0.0;
    for (int64_t j = 0; j < V; ++j) z += std::exp(double(logits(t, j)) - mx);
    nll += (std::log(z) + mx) - double(logits(t, y));
    if (need_grad) {
      for (int64_t j = 0; j < V; ++j)
        dlogits(t, j) = static_cast<S>(std::exp(double(logits(t, j)) - mx) / z) * weight;
      dlogits(t, y) -= weight;
    }
  }
  if (!need_grad) return nll;

  const bool base = target == GradTarget::base;
  auto bg = [&](const std::string& n) { return base ? &grads.base.at(n) : nullptr; };
  Mat<S> dh = dlogits * net.head;
  if (base) grads.base.at("head.weight").noalias() += dlogits.transpose() * cache.h_f;
  Mat<S> dx;
  layer_norm_backward(dh, cache.xhat_f, cache.rstd_f, net.lnf_w, bg("ln_f.weight"),
                      bg("ln_f.bias"), dx);

  const int H = cfg.n_heads, dhd = cfg.d_head();
  const S scale = S(1) / std::sqrt(S(dhd));
  Mat<S> dtmp, dg, df, dq, dk, dv, dctx, dln, dP, dS, dh1;
  for (size_t li = net.blocks.size(); li-- > 0;) {
    const BlockRefs<S>& B = net.blocks[li];
    const BlockCache<S>& c = cache.blocks[li];
    const std::string p = "blocks." + std::to_string(li) + ".";
    // MLP
    linear_backward(B.fc2, c.g, dx, c.cf2, dg, grads, target);
    df = dg.cwiseProduct(c.f.unaryExpr([](S z) { return gelu_grad(z); }));
    linear_backward(B.fc1, c.h2, df, c.cf1, dtmp, grads, target);
    layer_norm_backward(dtmp, c.xhat2, c.rstd2, B.ln2_w, bg(p + "ln2.weight"),
                        bg(p + "ln2.bias"), dln);
    dx += dln;
    // attention
    linear_backward(B.o, c.ctx, dx, c.co, dctx, grads, target);
    dq.resize(T, cfg.d_model);
    dk.resize(T, cfg.d_model);
    dv.resize(T, cfg.d_model);
    for (int h = 0; h < H; ++h) {
      const Mat<S>& P = c.probs[static_cast<size_t>(h)];
      auto dctx_h = dctx.middleCols(h * dhd, dhd);
      dv.middleCols(h * dhd, dhd).noalias() = P.transpose() * dctx_h;
      dP.noalias() = dctx_h * c.v.middleCols(h * dhd, dhd).transpose();
      dS.resize(T, T);
      for (int64_t i = 0; i < T; ++i) {
        S dot = S(0);
        for (int64_t j = 0; j <= i; ++j) dot += dP(i, j) * P(i, j);
        for (int64_t j = 0; j <= i; ++j) dS(i, j) = P(i, j) * (dP(i, j) - dot) * scale;
        for (int64_t j = i + 1; j < T; ++j) dS(i, j) = S(0);
      }
      dq.middleCols(h * dhd, dhd).noalias() = dS * c.k.middleCols(h * dhd, dhd);
      dk.middleCols(h * dhd, dhd).noalias() = dS.transpose() * c.q.middleCols(h * dhd, dhd);
    }
    linear_backward(B.q, c.h1, dq, c.cq, dh1, grads, target);
    linear_backward(B.k, c.h1, dk, c.ck, dtmp, grads, target);
    dh1 += dtmp;
    linear_backward(B.v, c.h1, dv, c.cv, dtmp, grads, target);
    dh1 += dtmp;
    layer_norm_backward(dh1, c.xhat1, c.rstd1, B.ln1_w, bg(p + "ln1.weight"),
                        bg(p + "ln1.bias"), dln);
    dx += dln;
  }
  if (base) {
    auto& gtok = grads.base.at("tok_emb");
    auto& gpos = grads.base.at("pos_emb");
    for (int64_t t = 0; t < T; ++t) {
      gtok.row(seq[static_cast<size_t>(t)]) += dx.row(t);
      gpos.row(t) += dx.row(t);
    }
  }
  return nll;
}

}  // namespace detail

/// Mean next-token NLL over positions whose target token is masked in
/// (mask[i] marks token i as a prediction target; mask[0] is ignored).
/// S selects the arithmetic precision; training uses float.
template <class S = float>
LossResultT<S> nll_loss(const LanguageModel& model, const AdapterState& adapter,
                        const TokenSeq& seq, const std::vector<bool>& loss_mask,
                        GradTarget target = GradTarget::none) {
  const int64_t n = detail::count_targets(seq, loss_mask);
  if (n == 0) throw DegenerateInputError("loss mask selects no prediction targets");
  const detail::NetT<S> net(model, adapter);
  LossResultT<S> r;
  r.n_targets = n;
  r.grads = GradientsT<S>::zeros_like(model, adapter, target);
  r.loss = detail::accumulate_nll(net, seq, loss_mask, S(1) / S(n), target, r.grads) / double(n);
  return r;
}

// ---------------------------------------------------------------------------
// Incremental decoding

/// Key/value cache for one decoding stream; step() feeds one token and
/// returns the logits for the next position.
class Decoder {
 public:
  Decoder(const LanguageModel& model, const AdapterState& adapter) : net_(model, adapter) {
    const int64_t C = net_.cfg.context_len, D = net_.cfg.d_model;
    keys_.assign(net_.blocks.size(), RowMatrixF(C, D));
    values_.assign(net_.blocks.size(), RowMatrixF(C, D));
  }

  int64_t position() const { return pos_; }

  Eigen::RowVectorXf step(TokenId id) {
    const ModelConfig& cfg = net_.cfg;
    if (pos_ >= cfg.context_len) throw ValidationError("context length exhausted");
    if (id < 0 || id >= cfg.vocab_size)
      throw ValidationError("token id " + std::to_string(id) + " out of range");
    RowMatrixF x = net_.tok_emb.row(id) + net_.pos_emb.row(pos_);
    RowMatrixF h, q, k, v, ctx(1, cfg.d_model), o, f, g, m;
    const int H = cfg.n_heads, dh = cfg.d_head();
    const float scale = 1.0f / std::sqrt(float(dh));
    Eigen::RowVectorXf s(pos_ + 1);
    for (size_t l = 0; l < net_.blocks.size(); ++l) {
      const auto& B = net_.blocks[l];
      detail::layer_norm<float>(x, B.ln1_w, B.ln1_b, h, nullptr, nullptr);
      detail::linear_forward<float>(B.q, h, q, nullptr);
      detail::linear_forward<float>(B.k, h, k, nullptr);
      detail::linear_forward<float>(B.v, h, v, nullptr);
      keys_[l].row(pos_) = k.row(0);
      values_[l].row(pos_) = v.row(0);
      for (int hd = 0; hd < H; ++hd) {
        auto qh = q.middleCols(hd * dh, dh);
        auto kh = keys_[l].topRows(pos_ + 1).middleCols(hd * dh, dh);
        auto vh = values_[l].topRows(pos_ + 1).middleCols(hd * dh, dh);
        s.noalias() = (qh * kh.transpose()) * scale;
        const float mx = s.maxCoeff();
        s = (s.array() - mx).exp();
        s /= s.sum();
        ctx.middleCols(hd * dh, dh).noalias() = s * vh;
      }
      detail::linear_forward<float>(B.o, ctx, o, nullptr);
      x += o;
      detail::layer_norm<float>(x, B.ln2_w, B.ln2_b, h, nullptr, nullptr);
      detail::linear_forward<float>(B.fc1, h, f, nullptr);
      g = f.unaryExpr([](float z) { return detail::gelu(z); });
      detail::linear_forward<float>(B.fc2, g, m, nullptr);
      x += m;
    }
    RowMatrixF hf;
    detail::layer_norm<float>(x, net_.lnf_w, net_.lnf_b, hf, nullptr, nullptr);
    ++pos_;
    return hf.row(0) * net_.head.transpose();
  }

 private:
  detail::Net net_;
  std::vector<RowMatrixF> keys_, values_;
  int64_t pos_ = 0;
};

/// Lowest index among the maximal entries.
inline TokenId argmax_lowest(const Eigen::RowVectorXf& logits) {
  TokenId best = 0;
  for (Eigen::Index j = 1; j < logits.size(); ++j)
    if (logits(j) > logits(best)) best = static_cast<TokenId>(j);
  return best;
}

/// Greedy decoding. Returns only new tokens; stop_id itself is not included.
/// Generation also ends when the context window is full.
inline TokenSeq generate_greedy(const LanguageModel& model, const AdapterState& adapter,
                                const TokenSeq& prompt, int max_new, TokenId stop_id) {
  if (prompt.empty()) throw ValidationError("prompt is empty");
  if (max_new < 0) throw ValidationError("max_new must be non-negative");
  if (static_cast<int64_t>(prompt.size()) > model.config.context_len)
    throw ValidationError("prompt length " + std::to_string(prompt.size()) +
                          " exceeds context length " +
                          std::to_string(model.config.context_len));
  TokenSeq out;
  if (max_new == 0) return out;
  Decoder dec(model, adapter);
  Eigen::RowVectorXf logits;
  for (TokenId id : prompt) logits = dec.step(id);
  while (static_cast<int>(out.size()) < max_new) {
    const TokenId next = argmax_lowest(logits);
    if (next == stop_id) break;
    out.push_back(next);
    if (dec.position() >= model.config.context_len) break;
    logits = dec.step(next);
  }
  return out;
}

/// Temperature sampling under an explicit seed. Not used by the acceptance
/// run; greedy decoding is the evaluation path.
inline TokenSeq generate_sampled(const LanguageModel& model, const AdapterState& adapter,
                                 const TokenSeq& prompt, int max_new, TokenId stop_id,
                                 double temperature, uint64_t seed) {
  if (!(temperature > 0.0)) throw ValidationError("temperature must be positive");
  if (prompt.empty()) throw ValidationError("prompt is empty");
  if (static_cast<int64_t>(prompt.size()) > model.config.context_len)
    throw ValidationError("prompt exceeds context length");
  Rng rng(seed);
  TokenSeq out;
  if (max_new <= 0) return out;
  Decoder dec(model, adapter);
  Eigen::RowVectorXf logits;
  for (TokenId id : prompt) logits = dec.step(id);
  while (static_cast<int>(out.size()) < max_new) {
    Eigen::ArrayXd p = ((logits.cast<double>().array() - double(logits.maxCoeff())) /
                        temperature).exp().transpose();
    p /= p.sum();
    double u = rng.uniform();
    TokenId next = static_cast<TokenId>(p.size() - 1);
    for (Eigen::Index j = 0; j < p.size(); ++j) {
      u -= p(j);
      if (u < 0.0) {
        next = static_cast<TokenId>(j);
        break;
      }
    }
    if (next == stop_id) break;
    out.push_back(next);
    if (dec.position() >= model.config.context_len) break;
    logits = dec.step(next);
  }
  return out;
}

}  // namespace cotvalve
