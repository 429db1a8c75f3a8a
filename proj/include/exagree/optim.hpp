#pragma once

#include "exagree/core.hpp"

namespace exagree {

/// Adam over a flat parameter block.
class Adam {
 public:
  explicit Adam(Index size, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(Vector::Zero(size)), v_(Vector::Zero(size)) {
    require(lr > 0.0, "learning rate must be positive");
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  int steps() const { return t_; }

  /// params -= lr * mhat / (sqrt(vhat) + eps)
  template <class Params, class Grad>
  void step(Params&& params, const Grad& grad) {
    ++t_;
    m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
    v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    params.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  Vector m_, v_;
  int t_ = 0;
};

/// lr(epoch) = base * gamma^floor(epoch / step_size)
struct StepDecay {
  int step_size = 50;
  double gamma = 0.5;

  double rate(double base, int epoch) const {
    return base * std::pow(gamma, step_size > 0 ? epoch / step_size : 0);
  }
};

}  // namespace exagree
