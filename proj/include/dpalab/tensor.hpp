#ifndef DPALAB_TENSOR_HPP
#define DPALAB_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dpalab/errors.hpp"
#include "dpalab/rng.hpp"

namespace dpalab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major tensor of doubles. Value type: copies are deep.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::optional<std::vector<double>> grad;

  Tensor() = default;

  explicit Tensor(Shape s, double fill = 0.0)
      : shape(std::move(s)), data(shape_numel(shape), fill) {}

  Tensor(Shape s, std::vector<double> values)
      : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != shape_numel(shape)) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
  }

  static Tensor zeros(std::size_t rows, std::size_t cols) {
    return Tensor({rows, cols});
  }

  static Tensor filled(std::size_t rows, std::size_t cols, double value) {
    return Tensor({rows, cols}, value);
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    Tensor t({r, c});
    std::size_t i = 0;
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      for (double v : row) t.data[i++] = v;
    }
    return t;
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data[i * n + i] = 1.0;
    return t;
  }

  static Tensor gaussian(std::size_t rows, std::size_t cols, double stddev,
                         SplitMix64& rng) {
    Tensor t({rows, cols});
    for (double& v : t.data) v = rng.normal(0.0, stddev);
    return t;
  }

  static Tensor uniform(std::size_t rows, std::size_t cols, double lo, double hi,
                        SplitMix64& rng) {
    Tensor t({rows, cols});
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
  }

  std::size_t rank() const { return shape.size(); }
  std::size_t numel() const { return data.size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
  double operator()(std::size_t i, std::size_t j) const {
    return data[i * cols() + j];
  }

  const double* row(std::size_t i) const { return data.data() + i * cols(); }
  double* row(std::size_t i) { return data.data() + i * cols(); }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), 0.0);
  }
};

// Bitwise-or-numeric equality of values (ignores grad state).
inline bool values_equal(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape && a.data == b.data;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) {
    throw DimensionError("max_abs_diff: shapes " + shape_str(a.shape) + " and " +
                         shape_str(b.shape));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    m = std::max(m, std::abs(a.data[i] - b.data[i]));
  }
  return m;
}

}  // namespace dpalab

#endif  // DPALAB_TENSOR_HPP
