#pragma once

// Task arithmetic on update directions: low-rank adapter factors and dense
// checkpoint differences, scaled by a runtime magnitude.

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "cotvalve/tensor.hpp"

namespace cotvalve {

enum class AlphaRegime { interpolation, extrapolation };

struct AlphaSetting {
  double alpha = 1.0;

  AlphaRegime regime() const {
    return (alpha >= 0.0 && alpha <= 1.0) ? AlphaRegime::interpolation
                                          : AlphaRegime::extrapolation;
  }
};

inline void require_finite(double alpha, const char* what = "alpha") {
  if (!std::isfinite(alpha))
    throw ValidationError(std::string(what) + " must be finite");
}

/// Low-rank update for one linear layer. The dense update it represents is
/// multiplier * (lora_alpha / rank) * B * A; `multiplier` carries runtime
/// scaling so the trained factors are never rewritten.
struct LowRankDelta {
  std::string target_name;  // e.g. "blocks.0.attn.q"; weight is "<target>.weight"
  RowMatrixF a;             // rank x d_in
  RowMatrixF b;             // d_out x rank
  float lora_alpha = 1.0f;
  double multiplier = 1.0;

  int64_t rank() const { return a.rows(); }
  int64_t d_in() const { return a.cols(); }
  int64_t d_out() const { return b.rows(); }
  double scaling() const { return double(lora_alpha) / double(rank()); }

  void validate() const {
    if (a.rows() < 1)
      throw ConformanceError(target_name + ": rank must be >= 1 (A has " +
                             std::to_string(a.rows()) + " rows)");
    if (b.cols() != a.rows())
      throw ConformanceError(target_name + ": B has " +
                             std::to_string(b.cols()) + " columns but A has " +
                             std::to_string(a.rows()) + " rows");
    if (a.rows() > std::min(a.cols(), b.rows()))
      throw ConformanceError(target_name + ": rank " + std::to_string(a.rows()) +
                             " exceeds min(d_in=" + std::to_string(a.cols()) +
                             ", d_out=" + std::to_string(b.rows()) + ")");
    if (!(lora_alpha > 0.0f))
      throw ConformanceError(target_name + ": lora_alpha must be positive");
  }

  int64_t param_count() const { return a.size() + b.size(); }
};

using LowRankDeltaSet = std::vector<LowRankDelta>;

/// Dense per-tensor difference between two checkpoints.
struct FullDelta {
  Checkpoint entries;
  double multiplier = 1.0;
};

/// Dense update (in double precision) represented by a low-rank delta.
inline RowMatrixD effective_update(const LowRankDelta& delta) {
  delta.validate();
  const double c = delta.multiplier * delta.scaling();
  RowMatrixD out = delta.b.cast<double>() * delta.a.cast<double>();
  out *= c;
  return out;
}

inline LowRankDelta scale_runtime(const LowRankDelta& delta, double alpha) {
  require_finite(alpha);
  LowRankDelta out = delta;
  out.multiplier *= alpha;
  return out;
}

inline LowRankDeltaSet scale_runtime(const LowRankDeltaSet& deltas,
                                     double alpha) {
  require_finite(alpha);
  LowRankDeltaSet out = deltas;
  for (auto& d : out) d.multiplier *= alpha;
  return out;
}

inline FullDelta scale_runtime(const FullDelta& delta, double alpha) {
  require_finite(alpha);
  FullDelta out = delta;
  out.multiplier *= alpha;
  return out;
}

/// entries[name] = theta2[name] - theta1[name].
inline FullDelta derive_full_delta(const Checkpoint& theta1,
                                   const Checkpoint& theta2) {
  auto i1 = theta1.begin();
  auto i2 = theta2.begin();
  for (; i1 != theta1.end() && i2 != theta2.end(); ++i1, ++i2) {
    if (i1->first != i2->first)
      throw StructuralError("tensor name sets differ at '" +
                            std::min(i1->first, i2->first) + "'");
    if (i1->second.shape != i2->second.shape)
      throw StructuralError("shape mismatch at '" + i1->first + "': " +
                            shape_str(i1->second.shape) + " vs " +
                            shape_str(i2->second.shape));
  }
  if (i1 != theta1.end() || i2 != theta2.end())
    throw StructuralError("tensor name sets differ at '" +
                          (i1 != theta1.end() ? i1->first : i2->first) + "'");

  FullDelta out;
  for (const auto& [name, t1] : theta1) {
    const Tensor& t2 = theta2.at(name);
    Tensor d(t1.shape);
    for (size_t i = 0; i < d.data.size(); ++i) d.data[i] = t2.data[i] - t1.data[i];
    out.entries.emplace(name, std::move(d));
  }
  return out;
}

/// base + alpha * multiplier * entries. alpha == 0 copies base untouched.
inline Checkpoint apply_merge(const Checkpoint& base, const FullDelta& delta,
                              double alpha) {
  require_finite(alpha);
  for (const auto& [name, d] : delta.entries) {
    auto it = base.find(name);
    if (it == base.end())
      throw ConformanceError("delta tensor '" + name + "' not in base");
    if (it->second.shape != d.shape)
      throw ConformanceError("delta tensor '" + name + "' has shape " +
                             shape_str(d.shape) + ", base has " +
                             shape_str(it->second.shape));
  }
  Checkpoint out = base;
  const double c = alpha * delta.multiplier;
  if (c == 0.0) return out;
  for (const auto& [name, d] : delta.entries) {
    Tensor& t = out.at(name);
    for (size_t i = 0; i < t.data.size(); ++i)
      t.data[i] = static_cast<float>(double(t.data[i]) + c * double(d.data[i]));
  }
  return out;
}

inline Checkpoint apply_merge(const Checkpoint& base,
                              const LowRankDeltaSet& deltas, double alpha) {
  require_finite(alpha);
  std::set<std::string> seen;
  for (const auto& d : deltas) {
    d.validate();
    if (!seen.insert(d.target_name).second)
      throw ConformanceError("duplicate delta for '" + d.target_name + "'");
    const std::string wname = d.target_name + ".weight";
    auto it = base.find(wname);
    if (it == base.end())
      throw ConformanceError("delta target '" + wname + "' not in base");
    const auto& shape = it->second.shape;
    if (shape.size() != 2 || shape[0] != d.d_out() || shape[1] != d.d_in())
      throw ConformanceError("delta for '" + wname + "' is " +
                             std::to_string(d.d_out()) + "x" +
                             std::to_string(d.d_in()) + ", weight is " +
                             shape_str(shape));
  }
  Checkpoint out = base;
  if (alpha == 0.0) return out;
  for (const auto& d : deltas) {
    const RowMatrixD upd = effective_update(d);
    Tensor& t = out.at(d.target_name + ".weight");
    auto w = t.mat();
    for (int64_t r = 0; r < w.rows(); ++r)
      for (int64_t c = 0; c < w.cols(); ++c)
        w(r, c) = static_cast<float>(double(w(r, c)) + alpha * upd(r, c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Module classes

enum class ModuleClass { Q, K, V, O, MLP };

/// Parses a selector vocabulary entry. "Attention" expands to Q,K,V,O and
/// "all-linear" to every class.
inline std::set<ModuleClass> parse_module_class(const std::string& name) {
  if (name == "Q") return {ModuleClass::Q};
  if (name == "K") return {ModuleClass::K};
  if (name == "V") return {ModuleClass::V};
  if (name == "O") return {ModuleClass::O};
  if (name == "MLP") return {ModuleClass::MLP};
  if (name == "Attention")
    return {ModuleClass::Q, ModuleClass::K, ModuleClass::V, ModuleClass::O};
  if (name == "all-linear")
    return {ModuleClass::Q, ModuleClass::K, ModuleClass::V, ModuleClass::O,
            ModuleClass::MLP};
  throw ValidationError("unknown module class '" + name +
                        "' (expected Q, K, V, O, MLP, Attention, all-linear)");
}

inline ModuleClass classify_target(const std::string& target_name) {
  const auto dot = target_name.rfind('.');
  const std::string leaf =
      dot == std::string::npos ? target_name : target_name.substr(dot + 1);
  if (leaf == "q") return ModuleClass::Q;
  if (leaf == "k") return ModuleClass::K;
  if (leaf == "v") return ModuleClass::V;
  if (leaf == "o") return ModuleClass::O;
  if (leaf == "fc1" || leaf == "fc2") return ModuleClass::MLP;
  throw ValidationError("target '" + target_name +
                        "' is not a recognised linear layer");
}

inline LowRankDeltaSet restrict_modules(const LowRankDeltaSet& deltas,
                                        const std::vector<std::string>& selector) {
  if (selector.empty()) throw ValidationError("module selector is empty");
  std::set<ModuleClass> keep;
  for (const auto& s : selector) keep.merge(parse_module_class(s));
  LowRankDeltaSet out;
  for (const auto& d : deltas)
    if (keep.contains(classify_target(d.target_name))) out.push_back(d);
  return out;
}

inline int64_t param_count(const LowRankDeltaSet& deltas) {
  int64_t n = 0;
  for (const auto& d : deltas) n += d.param_count();
  return n;
}

/// Fresh adapter: A ~ U(-1/sqrt(d_in), 1/sqrt(d_in)), B = 0, so the untrained
/// branch contributes nothing.
template <class Rng>
LowRankDelta init_low_rank(std::string target_name, int64_t d_in, int64_t d_out,
                           int64_t rank, float lora_alpha, Rng& rng) {
  LowRankDelta d;
  d.target_name = std::move(target_name);
  d.lora_alpha = lora_alpha;
  d.a.resize(rank, d_in);
  d.b = RowMatrixF::Zero(d_out, rank);
  const double bound = 1.0 / std::sqrt(double(d_in));
  for (int64_t i = 0; i < d.a.size(); ++i) {
    const double u = double(rng() >> 11) * 0x1.0p-53;  // [0, 1)
    d.a.data()[i] = static_cast<float>((2.0 * u - 1.0) * bound);
  }
  d.validate();
  return d;
}

}  // namespace cotvalve
