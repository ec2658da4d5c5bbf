#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace cotvalve {

// Error taxonomy shared by every module. Callers that only care about
// "something was wrong with the input" can catch cotvalve::Error.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ValidationError : Error {
  using Error::Error;
};
struct ConformanceError : Error {
  using Error::Error;
};
struct StructuralError : Error {
  using Error::Error;
};
struct ParseError : Error {
  using Error::Error;
};
struct DegenerateInputError : Error {
  using Error::Error;
};

using RowMatrixF =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrixD =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapF = Eigen::Map<RowMatrixF>;
using ConstMapF = Eigen::Map<const RowMatrixF>;

inline std::string shape_str(std::span<const int64_t> shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense row-major float32 tensor.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s, float fill = 0.0f)
      : shape(std::move(s)), data(static_cast<size_t>(numel_of(shape)), fill) {}
  Tensor(std::vector<int64_t> s, std::vector<float> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<int64_t>(data.size()) != numel_of(shape))
      throw ConformanceError("tensor data size " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
  }

  static int64_t numel_of(std::span<const int64_t> s) {
    return std::accumulate(s.begin(), s.end(), int64_t{1},
                           std::multiplies<>());
  }
  int64_t numel() const { return static_cast<int64_t>(data.size()); }

  // Views a 1-D tensor as a single row and a 2-D tensor as itself.
  int64_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
  int64_t cols() const { return shape.empty() ? 1 : shape.back(); }
  MapF mat() { return MapF(data.data(), rows(), cols()); }
  ConstMapF mat() const { return ConstMapF(data.data(), rows(), cols()); }

  static Tensor from_matrix(const RowMatrixF& m) {
    Tensor t({m.rows(), m.cols()});
    MapF(t.data.data(), m.rows(), m.cols()) = m;
    return t;
  }

  bool operator==(const Tensor&) const = default;
};

/// Named dense tensor map. Ordered so iteration (and serialization) is
/// deterministic.
using Checkpoint = std::map<std::string, Tensor>;

inline int64_t scalar_count(const Checkpoint& ck) {
  int64_t n = 0;
  for (const auto& [_, t] : ck) n += t.numel();
  return n;
}

/// Max absolute elementwise difference between two conformal checkpoints.
inline double max_abs_diff(const Checkpoint& a, const Checkpoint& b) {
  if (a.size() != b.size())
    throw StructuralError("checkpoints differ in tensor count");
  double m = 0.0;
  for (const auto& [name, ta] : a) {
    auto it = b.find(name);
    if (it == b.end()) throw StructuralError("missing tensor '" + name + "'");
    if (it->second.shape != ta.shape)
      throw StructuralError("shape mismatch at '" + name + "'");
    for (size_t i = 0; i < ta.data.size(); ++i)
      m = std::max(m, std::abs(double(ta.data[i]) - double(it->second.data[i])));
  }
  return m;
}

}  // namespace cotvalve
