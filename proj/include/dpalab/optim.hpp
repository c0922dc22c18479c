#ifndef DPALAB_OPTIM_HPP
#define DPALAB_OPTIM_HPP

#include <cmath>
#include <string>
#include <vector>

#include "dpalab/errors.hpp"
#include "dpalab/tensor.hpp"

namespace dpalab {

struct AdamWConfig {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

// Adam with decoupled weight decay:
//   theta <- theta * (1 - lr * wd)
//   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
//   theta <- theta - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
// Parameters without a gradient are left untouched.
class AdamW {
 public:
  AdamW(std::vector<Tensor*> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (Tensor* p : params_) {
      m_.emplace_back(p->numel(), 0.0);
      v_.emplace_back(p->numel(), 0.0);
    }
  }

  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }
  long steps() const { return t_; }

  void zero_grad() {
    for (Tensor* p : params_) p->zero_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor& p = *params_[k];
      if (!p.grad) continue;
      const std::vector<double>& g = *p.grad;
      for (std::size_t i = 0; i < p.numel(); ++i) {
        if (!std::isfinite(g[i])) throw NumericError("non-finite gradient at optimizer step " + std::to_string(t_));
        p.data[i] *= 1.0 - cfg_.lr * cfg_.weight_decay;
        m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * g[i];
        v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        p.data[i] -= cfg_.lr * (m_[k][i] / bc1) / (std::sqrt(v_[k][i] / bc2) + cfg_.eps);
      }
    }
  }

 private:
  std::vector<Tensor*> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

// Step-decay schedule: base lr, times 0.1 from `decay_step` on.
inline double step_decay_lr(double base, int step, int decay_step) {
  return step >= decay_step ? base * 0.1 : base;
}

}  // namespace dpalab

#endif  // DPALAB_OPTIM_HPP
