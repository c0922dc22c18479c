#ifndef DPALAB_AUTODIFF_HPP
#define DPALAB_AUTODIFF_HPP

// Tape-based reverse-mode differentiation over 2-D tensors.
//
// A Graph is built fresh for every forward pass. Each op appends a node
// holding its value and, when any input participates in differentiation, a
// closure that scatters the node's gradient into its parents. backward()
// walks the tape once in reverse creation order (a valid reverse topological
// order) and finally accumulates leaf gradients into the bound parameter
// tensors.
//
// Forward kernels are instrumented: when an OpCounter is enabled on the
// current thread, every kernel adds the operations it actually executes
// (matmul multiply-add = 2, softmax = 5 per element, other elementwise = 1)
// and every matmul/softmax adds the words it retains for backward.

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dpalab/errors.hpp"
#include "dpalab/tensor.hpp"

namespace dpalab {

struct OpCounter {
  bool enabled = false;
  std::uint64_t flops = 0;
  std::uint64_t retained_words = 0;
};

inline OpCounter& op_counter() {
  thread_local OpCounter counter;
  return counter;
}

// Enables counting for the lifetime of the scope, starting from zero.
class CountingScope {
 public:
  CountingScope() : saved_(op_counter()) { op_counter() = OpCounter{true, 0, 0}; }
  ~CountingScope() { op_counter() = saved_; }
  CountingScope(const CountingScope&) = delete;
  CountingScope& operator=(const CountingScope&) = delete;

  std::uint64_t flops() const { return op_counter().flops; }
  std::uint64_t retained_words() const { return op_counter().retained_words; }

 private:
  OpCounter saved_;
};

namespace detail {

inline void count_flops(std::uint64_t n) {
  auto& c = op_counter();
  if (c.enabled) c.flops += n;
}

inline void count_retained(std::uint64_t n) {
  auto& c = op_counter();
  if (c.enabled) c.retained_words += n;
}

// C[m x n] (+)= A[m x k] * B[k x n]
template <bool Count>
inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a,
                    const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* __restrict crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const double* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  if constexpr (Count) count_flops(2 * m * k * n);
}

// C[m x n] += A[r x m]^T * B[r x n]
inline void gemm_tn(std::size_t r, std::size_t m, std::size_t n, const double* a,
                    const double* b, double* c) {
  for (std::size_t q = 0; q < r; ++q) {
    const double* __restrict brow = b + q * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double a_qi = a[q * m + i];
      double* __restrict crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += a_qi * brow[j];
    }
  }
}

inline std::vector<double> transposed(std::size_t rows, std::size_t cols,
                                      const double* src) {
  std::vector<double> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = src[i * cols + j];
  return out;
}

// C[m x n] += A[m x k] * B[n x k]^T
template <bool Count>
inline void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a,
                    const double* b, double* c) {
  const std::vector<double> bt = transposed(n, k, b);
  gemm_nn<Count>(m, k, n, a, bt.data(), c);
}

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " +
                         shape_str(t.shape));
  }
}

}  // namespace detail

class Graph;

// Handle to a node on a Graph. Cheap to copy; valid while the Graph lives.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const std::vector<double>&)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value) {
    value.requires_grad = false;
    value.grad.reset();
    nodes_.push_back(Node{std::move(value), {}, nullptr, nullptr});
    return Var{this, nodes_.size() - 1};
  }

  // Leaf bound to an external parameter. Gradients reach `param.grad` only
  // when `param.requires_grad` is set.
  Var leaf(Tensor& param) {
    Tensor copy;
    copy.shape = param.shape;
    copy.data = param.data;
    copy.requires_grad = param.requires_grad;
    nodes_.push_back(Node{std::move(copy), {}, &param, nullptr});
    return Var{this, nodes_.size() - 1};
  }

  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
    return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                  std::move(fn));
  }

  Var record(Tensor value, std::span<const Var> parents, BackwardFn fn) {
    bool needs = false;
    for (const Var& p : parents) {
      if (p.graph != this) throw GraphError("op mixes variables from different graphs");
      needs = needs || nodes_[p.id].value.requires_grad;
    }
    value.requires_grad = needs;
    nodes_.push_back(Node{std::move(value), {}, nullptr, needs ? std::move(fn) : nullptr});
    return Var{this, nodes_.size() - 1};
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).value.requires_grad; }

  std::vector<double>& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad.assign(n.value.numel(), 0.0);
    return n.grad;
  }

  // Gradient of a node after backward (empty when none reached it).
  const std::vector<double>& grad_of(Var v) const { return nodes_.at(v.id).grad; }

  void backward(Var out) {
    if (backward_done_) {
      throw GraphError("backward called twice on the same forward graph");
    }
    if (out.graph != this) throw GraphError("backward on a foreign variable");
    if (out.value().numel() != 1) {
      throw DimensionError("backward requires a scalar output, got " +
                           shape_str(out.value().shape));
    }
    backward_done_ = true;
    if (!requires_grad(out.id)) return;
    grad(out.id)[0] = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.value.requires_grad) continue;
      if (n.backward) n.backward(*this, n.grad);
      if (n.bound != nullptr && n.bound->requires_grad) {
        auto& g = n.bound->grad;
        if (!g || g->size() != n.grad.size()) g.emplace(n.grad.size(), 0.0);
        for (std::size_t j = 0; j < n.grad.size(); ++j) (*g)[j] += n.grad[j];
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    Tensor* bound;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return graph->value(id); }
inline bool Var::requires_grad() const { return graph->requires_grad(id); }

namespace detail {

inline void accumulate(std::vector<double>& dst, const std::vector<double>& src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require_rank2(A, "matmul");
  detail::require_rank2(B, "matmul");
  if (A.cols() != B.rows()) {
    throw DimensionError("matmul: inner dimensions differ for " + shape_str(A.shape) +
                         " and " + shape_str(B.shape));
  }
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  Tensor C({m, n});
  detail::gemm_nn<true>(m, k, n, A.data.data(), B.data.data(), C.data.data());
  detail::count_retained(A.numel() + B.numel());
  return a.graph->record(std::move(C), {a, b},
                         [a, b, m, k, n](Graph& g, const std::vector<double>& go) {
                           if (g.requires_grad(a.id)) {
                             // dA = dC * B^T
                             detail::gemm_nt<false>(m, n, k, go.data(),
                                                    g.value(b.id).data.data(),
                                                    g.grad(a.id).data());
                           }
                           if (g.requires_grad(b.id)) {
                             // dB = A^T * dC
                             detail::gemm_tn(m, k, n, g.value(a.id).data.data(), go.data(),
                                             g.grad(b.id).data());
                           }
                         });
}

// a * b^T without materializing the transpose on the tape.
inline Var matmul_nt(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require_rank2(A, "matmul_nt");
  detail::require_rank2(B, "matmul_nt");
  if (A.cols() != B.cols()) {
    throw DimensionError("matmul_nt: inner dimensions differ for " + shape_str(A.shape) +
                         " and transposed " + shape_str(B.shape));
  }
  const std::size_t m = A.rows(), k = A.cols(), n = B.rows();
  Tensor C({m, n});
  detail::gemm_nt<true>(m, k, n, A.data.data(), B.data.data(), C.data.data());
  detail::count_retained(A.numel() + B.numel());
  return a.graph->record(std::move(C), {a, b},
                         [a, b, m, k, n](Graph& g, const std::vector<double>& go) {
                           if (g.requires_grad(a.id)) {
                             // dA = dC * B
                             detail::gemm_nn<false>(m, n, k, go.data(),
                                                    g.value(b.id).data.data(),
                                                    g.grad(a.id).data());
                           }
                           if (g.requires_grad(b.id)) {
                             // dB = dC^T * A
                             detail::gemm_tn(m, n, k, go.data(), g.value(a.id).data.data(),
                                             g.grad(b.id).data());
                           }
                         });
}

inline Var transpose(Var a) {
  const Tensor& A = a.value();
  detail::require_rank2(A, "transpose");
  const std::size_t m = A.rows(), n = A.cols();
  Tensor T({n, m}, detail::transposed(m, n, A.data.data()));
  return a.graph->record(std::move(T), {a}, [a, m, n](Graph& g, const std::vector<double>& go) {
    auto& ga = g.grad(a.id);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += go[j * m + i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Var add(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (!A.same_shape(B)) {
    throw DimensionError("add: shapes " + shape_str(A.shape) + " and " + shape_str(B.shape));
  }
  Tensor C(A.shape);
  for (std::size_t i = 0; i < A.numel(); ++i) C.data[i] = A.data[i] + B.data[i];
  detail::count_flops(A.numel());
  return a.graph->record(std::move(C), {a, b}, [a, b](Graph& g, const std::vector<double>& go) {
    if (g.requires_grad(a.id)) detail::accumulate(g.grad(a.id), go);
    if (g.requires_grad(b.id)) detail::accumulate(g.grad(b.id), go);
  });
}

inline Var sub(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (!A.same_shape(B)) {
    throw DimensionError("sub: shapes " + shape_str(A.shape) + " and " + shape_str(B.shape));
  }
  Tensor C(A.shape);
  for (std::size_t i = 0; i < A.numel(); ++i) C.data[i] = A.data[i] - B.data[i];
  detail::count_flops(A.numel());
  return a.graph->record(std::move(C), {a, b}, [a, b](Graph& g, const std::vector<double>& go) {
    if (g.requires_grad(a.id)) detail::accumulate(g.grad(a.id), go);
    if (g.requires_grad(b.id)) {
      auto& gb = g.grad(b.id);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
    }
  });
}

inline Var elementwise_mul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (!A.same_shape(B)) {
    throw DimensionError("elementwise_mul: shapes " + shape_str(A.shape) + " and " +
                         shape_str(B.shape));
  }
  Tensor C(A.shape);
  for (std::size_t i = 0; i < A.numel(); ++i) C.data[i] = A.data[i] * B.data[i];
  detail::count_flops(A.numel());
  return a.graph->record(std::move(C), {a, b}, [a, b](Graph& g, const std::vector<double>& go) {
    if (g.requires_grad(a.id)) {
      auto& ga = g.grad(a.id);
      const auto& bv = g.value(b.id).data;
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
    }
    if (g.requires_grad(b.id)) {
      auto& gb = g.grad(b.id);
      const auto& av = g.value(a.id).data;
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
    }
  });
}

inline Var scale(Var a, double s) {
  const Tensor& A = a.value();
  Tensor C(A.shape);
  for (std::size_t i = 0; i < A.numel(); ++i) C.data[i] = A.data[i] * s;
  detail::count_flops(A.numel());
  return a.graph->record(std::move(C), {a}, [a, s](Graph& g, const std::vector<double>& go) {
    auto& ga = g.grad(a.id);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * s;
  });
}

inline Var add_scalar(Var a, double c) {
  const Tensor& A = a.value();
  Tensor C(A.shape);
  for (std::size_t i = 0; i < A.numel(); ++i) C.data[i] = A.data[i] + c;
  detail::count_flops(A.numel());
  return a.graph->record(std::move(C), {a}, [a](Graph& g, const std::vector<double>& go) {
    detail::accumulate(g.grad(a.id), go);
  });
}

// [1 x n] -> [m x n] by repeating the row.
inline Var broadcast_row_vector(Var row, std::size_t m) {
  const Tensor& R = row.value();
  if (R.rank() != 2 || R.rows() != 1) {
    throw DimensionError("broadcast_row_vector: expected [1xn], got " + shape_str(R.shape));
  }
  const std::size_t n = R.cols();
  Tensor C({m, n});
  for (std::size_t i = 0; i < m; ++i)
    std::copy(R.data.begin(), R.data.end(), C.data.begin() + i * n);
  return row.graph->record(std::move(C), {row},
                           [row, m, n](Graph& g, const std::vector<double>& go) {
                             auto& gr = g.grad(row.id);
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j) gr[j] += go[i * n + j];
                           });
}

// [m x 1] -> [m x n] by repeating the column.
inline Var broadcast_col_vector(Var col, std::size_t n) {
  const Tensor& Cv = col.value();
  if (Cv.rank() != 2 || Cv.cols() != 1) {
    throw DimensionError("broadcast_col_vector: expected [mx1], got " + shape_str(Cv.shape));
  }
  const std::size_t m = Cv.rows();
  Tensor C({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) C.data[i * n + j] = Cv.data[i];
  return col.graph->record(std::move(C), {col},
                           [col, m, n](Graph& g, const std::vector<double>& go) {
                             auto& gc = g.grad(col.id);
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j) gc[i] += go[i * n + j];
                           });
}

// ---------------------------------------------------------------------------
// Structural ops (no arithmetic)

inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  for (const Var& p : parts) {
    detail::require_rank2(p.value(), "concat_rows");
    if (p.cols() != n) {
      throw DimensionError("concat_rows: column counts differ (" + std::to_string(n) +
                           " vs " + std::to_string(p.cols()) + ")");
    }
    m += p.rows();
  }
  Tensor C({m, n});
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    offsets.push_back(offset);
    std::copy(p.value().data.begin(), p.value().data.end(), C.data.begin() + offset);
    offset += p.value().numel();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return parts[0].graph->record(std::move(C), parts,
                                [ps, offsets](Graph& g, const std::vector<double>& go) {
                                  for (std::size_t k = 0; k < ps.size(); ++k) {
                                    if (!g.requires_grad(ps[k].id)) continue;
                                    auto& gp = g.grad(ps[k].id);
                                    for (std::size_t i = 0; i < gp.size(); ++i)
                                      gp[i] += go[offsets[k] + i];
                                  }
                                });
}

inline Var concat_rows(std::initializer_list<Var> parts) {
  return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  std::vector<std::size_t> col_offsets;
  for (const Var& p : parts) {
    detail::require_rank2(p.value(), "concat_cols");
    if (p.rows() != m) {
      throw DimensionError("concat_cols: row counts differ (" + std::to_string(m) + " vs " +
                           std::to_string(p.rows()) + ")");
    }
    col_offsets.push_back(n);
    n += p.cols();
  }
  Tensor C({m, n});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& P = parts[k].value();
    for (std::size_t i = 0; i < m; ++i)
      std::copy(P.row(i), P.row(i) + P.cols(), C.data.begin() + i * n + col_offsets[k]);
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return parts[0].graph->record(
      std::move(C), parts, [ps, col_offsets, m, n](Graph& g, const std::vector<double>& go) {
        for (std::size_t k = 0; k < ps.size(); ++k) {
          if (!g.requires_grad(ps[k].id)) continue;
          const std::size_t w = g.value(ps[k].id).cols();
          auto& gp = g.grad(ps[k].id);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += go[i * n + col_offsets[k] + j];
        }
      });
}

inline Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

// Rows [begin, end).
inline Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  const Tensor& A = a.value();
  detail::require_rank2(A, "slice_rows");
  if (begin > end || end > A.rows()) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") outside " + shape_str(A.shape));
  }
  const std::size_t n = A.cols();
  Tensor C({end - begin, n});
  std::copy(A.data.begin() + begin * n, A.data.begin() + end * n, C.data.begin());
  return a.graph->record(std::move(C), {a}, [a, begin, n](Graph& g, const std::vector<double>& go) {
    auto& ga = g.grad(a.id);
    for (std::size_t i = 0; i < go.size(); ++i) ga[begin * n + i] += go[i];
  });
}

// Columns [begin, end).
inline Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Tensor& A = a.value();
  detail::require_rank2(A, "slice_cols");
  if (begin > end || end > A.cols()) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") outside " + shape_str(A.shape));
  }
  const std::size_t m = A.rows(), n = A.cols(), w = end - begin;
  Tensor C({m, w});
  for (std::size_t i = 0; i < m; ++i)
    std::copy(A.row(i) + begin, A.row(i) + end, C.data.begin() + i * w);
  return a.graph->record(std::move(C), {a},
                         [a, begin, m, n, w](Graph& g, const std::vector<double>& go) {
                           auto& ga = g.grad(a.id);
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < w; ++j)
                               ga[i * n + begin + j] += go[i * w + j];
                         });
}

// Rows of `a` picked by index (repeats allowed).
inline Var gather_rows(Var a, const std::vector<std::size_t>& index) {
  const Tensor& A = a.value();
  detail::require_rank2(A, "gather_rows");
  const std::size_t n = A.cols();
  Tensor C({index.size(), n});
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= A.rows()) {
      throw DimensionError("gather_rows: index " + std::to_string(index[r]) + " outside " +
                           shape_str(A.shape));
    }
    std::copy(A.row(index[r]), A.row(index[r]) + n, C.data.begin() + r * n);
  }
  return a.graph->record(std::move(C), {a}, [a, index, n](Graph& g, const std::vector<double>& go) {
    auto& ga = g.grad(a.id);
    for (std::size_t r = 0; r < index.size(); ++r)
      for (std::size_t j = 0; j < n; ++j) ga[index[r] * n + j] += go[r * n + j];
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities

inline Var softmax_rows(Var x) {
  const Tensor& X = x.value();
  detail::require_rank2(X, "softmax_rows");
  const std::size_t m = X.rows(), n = X.cols();
  Tensor Y(X.shape);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xr = X.row(i);
    double* yr = Y.row(i);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (std::isnan(xr[j])) throw NumericError("softmax_rows: NaN input");
      mx = std::max(mx, xr[j]);
    }
    detail::count_flops(n);
    for (std::size_t j = 0; j < n; ++j) yr[j] = std::exp(xr[j] - mx);
    detail::count_flops(2 * n);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) sum += yr[j];
    detail::count_flops(n);
    for (std::size_t j = 0; j < n; ++j) yr[j] /= sum;
    detail::count_flops(n);
  }
  detail::count_retained(X.numel());
  std::vector<double> y = Y.data;
  return x.graph->record(std::move(Y), {x}, [x, y, m, n](Graph& g, const std::vector<double>& go) {
    auto& gx = g.grad(x.id);
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += go[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += y[i * n + j] * (go[i * n + j] - dot);
    }
  });
}

inline Var tanh_elem(Var x) {
  const Tensor& X = x.value();
  Tensor Y(X.shape);
  for (std::size_t i = 0; i < X.numel(); ++i) Y.data[i] = std::tanh(X.data[i]);
  detail::count_flops(X.numel());
  std::vector<double> y = Y.data;
  return x.graph->record(std::move(Y), {x}, [x, y](Graph& g, const std::vector<double>& go) {
    auto& gx = g.grad(x.id);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * (1.0 - y[i] * y[i]);
  });
}

inline double sigmoid(double z) {
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

inline Var sigmoid_elem(Var x) {
  const Tensor& X = x.value();
  Tensor Y(X.shape);
  for (std::size_t i = 0; i < X.numel(); ++i) Y.data[i] = sigmoid(X.data[i]);
  detail::count_flops(X.numel());
  std::vector<double> y = Y.data;
  return x.graph->record(std::move(Y), {x}, [x, y](Graph& g, const std::vector<double>& go) {
    auto& gx = g.grad(x.id);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * y[i] * (1.0 - y[i]);
  });
}

inline Var abs_elem(Var x) {
  const Tensor& X = x.value();
  Tensor Y(X.shape);
  for (std::size_t i = 0; i < X.numel(); ++i) Y.data[i] = std::abs(X.data[i]);
  detail::count_flops(X.numel());
  return x.graph->record(std::move(Y), {x}, [x](Graph& g, const std::vector<double>& go) {
    const auto& xv = g.value(x.id).data;
    auto& gx = g.grad(x.id);
    for (std::size_t i = 0; i < go.size(); ++i) {
      const double s = xv[i] > 0 ? 1.0 : (xv[i] < 0 ? -1.0 : 0.0);
      gx[i] += go[i] * s;
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

// Column means: [m x n] -> [1 x n].
inline Var mean_rows(Var x) {
  const Tensor& X = x.value();
  detail::require_rank2(X, "mean_rows");
  const std::size_t m = X.rows(), n = X.cols();
  if (m == 0) throw DimensionError("mean_rows: no rows");
  Tensor Y({1, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) Y.data[j] += X(i, j);
  for (std::size_t j = 0; j < n; ++j) Y.data[j] /= static_cast<double>(m);
  detail::count_flops(m * n + n);
  return x.graph->record(std::move(Y), {x}, [x, m, n](Graph& g, const std::vector<double>& go) {
    auto& gx = g.grad(x.id);
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += go[j] * inv;
  });
}

inline Var sum_all(Var x) {
  const Tensor& X = x.value();
  double s = 0.0;
  for (double v : X.data) s += v;
  detail::count_flops(X.numel());
  return x.graph->record(Tensor({1, 1}, std::vector<double>{s}), {x},
                         [x](Graph& g, const std::vector<double>& go) {
                           auto& gx = g.grad(x.id);
                           for (double& v : gx) v += go[0];
                         });
}

inline Var mean_all(Var x) {
  const std::size_t n = x.value().numel();
  if (n == 0) throw DimensionError("mean_all: empty tensor");
  return scale(sum_all(x), 1.0 / static_cast<double>(n));
}

// Each row divided by its Euclidean norm.
inline Var l2_normalize_rows(Var x) {
  const Tensor& X = x.value();
  detail::require_rank2(X, "l2_normalize_rows");
  const std::size_t m = X.rows(), n = X.cols();
  Tensor Y(X.shape);
  std::vector<double> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += X(i, j) * X(i, j);
    norms[i] = std::sqrt(ss);
    if (!(norms[i] > 0.0)) throw NumericError("l2_normalize_rows: zero-norm row " + std::to_string(i));
    for (std::size_t j = 0; j < n; ++j) Y(i, j) = X(i, j) / norms[i];
  }
  detail::count_flops(m * (3 * n + 1));
  std::vector<double> y = Y.data;
  return x.graph->record(std::move(Y), {x},
                         [x, y, norms, m, n](Graph& g, const std::vector<double>& go) {
                           auto& gx = g.grad(x.id);
                           for (std::size_t i = 0; i < m; ++i) {
                             double dot = 0.0;
                             for (std::size_t j = 0; j < n; ++j) dot += y[i * n + j] * go[i * n + j];
                             for (std::size_t j = 0; j < n; ++j)
                               gx[i * n + j] += (go[i * n + j] - y[i * n + j] * dot) / norms[i];
                           }
                         });
}

// Per-row standardisation (x - mean) / sqrt(var + eps), no affine part.
inline Var layer_norm_rows(Var x, double eps = 1e-5) {
  const Tensor& X = x.value();
  detail::require_rank2(X, "layer_norm_rows");
  const std::size_t m = X.rows(), n = X.cols();
  if (n == 0) throw DimensionError("layer_norm_rows: empty rows");
  Tensor Y(X.shape);
  std::vector<double> inv_sd(m);
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += X(i, j);
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (X(i, j) - mu) * (X(i, j) - mu);
    var /= static_cast<double>(n);
    inv_sd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) Y(i, j) = (X(i, j) - mu) * inv_sd[i];
  }
  detail::count_flops(m * (5 * n + 2));
  std::vector<double> y = Y.data;
  return x.graph->record(std::move(Y), {x},
                         [x, y, inv_sd, m, n](Graph& g, const std::vector<double>& go) {
                           auto& gx = g.grad(x.id);
                           const double dn = static_cast<double>(n);
                           for (std::size_t i = 0; i < m; ++i) {
                             double mg = 0.0, mgy = 0.0;
                             for (std::size_t j = 0; j < n; ++j) {
                               mg += go[i * n + j];
                               mgy += go[i * n + j] * y[i * n + j];
                             }
                             mg /= dn;
                             mgy /= dn;
                             for (std::size_t j = 0; j < n; ++j)
                               gx[i * n + j] += inv_sd[i] * (go[i * n + j] - mg - y[i * n + j] * mgy);
                           }
                         });
}

// Mean binary cross-entropy with logits against constant 0/1 targets.
// Entries with target 1 are weighted by `pos_weight`.
inline Var bce_with_logits_mean(Var logits, const Tensor& targets, double pos_weight = 1.0) {
  const Tensor& Z = logits.value();
  if (!Z.same_shape(targets)) {
    throw DimensionError("bce_with_logits_mean: logits " + shape_str(Z.shape) + " vs targets " +
                         shape_str(targets.shape));
  }
  const std::size_t n = Z.numel();
  if (n == 0) throw DimensionError("bce_with_logits_mean: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = Z.data[i];
    if (!std::isfinite(z)) throw NumericError("bce_with_logits_mean: non-finite logit");
    const double y = targets.data[i];
    const double w = 1.0 + (pos_weight - 1.0) * y;
    total += w * (std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z))));
  }
  detail::count_flops(5 * n);
  const double mean = total / static_cast<double>(n);
  std::vector<double> y = targets.data;
  return logits.graph->record(Tensor({1, 1}, std::vector<double>{mean}), {logits},
                              [logits, y, n, pos_weight](Graph& g, const std::vector<double>& go) {
                                const auto& z = g.value(logits.id).data;
                                auto& gz = g.grad(logits.id);
                                const double inv = go[0] / static_cast<double>(n);
                                for (std::size_t i = 0; i < n; ++i)
                                  gz[i] += (1.0 + (pos_weight - 1.0) * y[i]) * (sigmoid(z[i]) - y[i]) * inv;
                              });
}

// Affine map x W + b with b broadcast over rows.
inline Var linear(Var x, Var w, Var b) {
  return add(matmul(x, w), broadcast_row_vector(b, x.rows()));
}

// Evaluates f on a throwaway graph with the given constant inputs.
template <typename F>
Tensor eval(F&& f) {
  Graph g;
  return f(g).value();
}

}  // namespace dpalab

#endif  // DPALAB_AUTODIFF_HPP
