#ifndef DPALAB_GRADCHECK_HPP
#define DPALAB_GRADCHECK_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "dpalab/autodiff.hpp"

namespace dpalab {

// Builds a scalar on the supplied graph, binding parameters with Graph::leaf.
using ScalarFn = std::function<Var(Graph&)>;

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

inline double evaluate_scalar(const ScalarFn& f) {
  Graph g;
  const double v = f(g).value().data.at(0);
  if (!std::isfinite(v)) throw NumericError("gradcheck: objective is not finite");
  return v;
}

// Central differences (f(x+h) - f(x-h)) / 2h against the autodiff gradient.
// Error per coordinate: |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
inline GradcheckResult gradcheck_detailed(const ScalarFn& f, const std::vector<Tensor*>& params,
                                          double h = 1e-5) {
  std::vector<bool> saved_flags;
  for (Tensor* p : params) {
    saved_flags.push_back(p->requires_grad);
    p->requires_grad = true;
    p->grad.emplace(p->numel(), 0.0);
  }
  {
    Graph g;
    Var out = f(g);
    if (!std::isfinite(out.value().data.at(0))) {
      throw NumericError("gradcheck: objective is not finite");
    }
    g.backward(out);
  }

  GradcheckResult result;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    const std::vector<double> analytic = p.grad ? *p.grad : std::vector<double>(p.numel(), 0.0);
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double x0 = p.data[i];
      p.data[i] = x0 + h;
      const double fp = evaluate_scalar(f);
      p.data[i] = x0 - h;
      const double fm = evaluate_scalar(f);
      p.data[i] = x0;
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = std::abs(analytic[i] - numeric) /
                         std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
      ++result.coordinates;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_param = k;
        result.worst_index = i;
      }
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    params[k]->requires_grad = saved_flags[k];
    params[k]->grad.reset();
  }
  return result;
}

inline double gradcheck(const ScalarFn& f, const std::vector<Tensor*>& params, double h = 1e-5) {
  return gradcheck_detailed(f, params, h).max_rel_error;
}

}  // namespace dpalab

#endif  // DPALAB_GRADCHECK_HPP
