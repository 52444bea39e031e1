#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "tgk/autodiff.hpp"
#include "tgk/ops.hpp"

namespace tgk {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected Adam over a fixed list of parameters.
class Adam {
 public:
  explicit Adam(std::vector<Parameter*> params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }

  long step_count() const { return step_; }
  const std::vector<Parameter*>& params() const { return params_; }
  const Tensor& first_moment(std::size_t i) const { return m_[i]; }
  const Tensor& second_moment(std::size_t i) const { return v_[i]; }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  void step(double lr) {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Parameter& p = *params_[k];
      if (!p.grad.same_shape(p.value))
        throw ShapeError("adam: gradient shape " + shape_str(p.grad.shape()) + " does not match parameter " +
                         p.name + " " + shape_str(p.value.shape()));
      Tensor& m = m_[k];
      Tensor& v = v_[k];
      for (std::size_t i = 0; i < p.value.numel(); ++i) {
        const double g = p.grad[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p.value[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
      }
    }
  }

 private:
  std::vector<Parameter*> params_;
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  long step_ = 0;
};

// Linear warmup to base_lr, then cosine decay to exactly 0 at total_epochs.
inline double lr_at(double epoch, double base_lr, double warmup_epochs, double total_epochs) {
  epoch = std::clamp(epoch, 0.0, total_epochs);
  if (warmup_epochs > 0.0 && epoch < warmup_epochs) return base_lr * epoch / warmup_epochs;
  const double span = total_epochs - warmup_epochs;
  if (span <= 0.0) return 0.0;
  const double progress = (epoch - warmup_epochs) / span;
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

// Max over coordinates of |analytic - central difference| / max(1, |central|).
// `f` records a scalar loss on the tape given the leaf for x.
inline double finite_diff_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double eps = 1e-6) {
  Tensor analytic;
  {
    Tape tape;
    Var leaf = tape.leaf(x);
    Var loss = f(tape, leaf);
    if (!std::isfinite(loss.value().item())) throw std::domain_error("finite_diff_check: non-finite loss");
    tape.backward(loss);
    analytic = tape.grad(leaf.id());
  }
  auto eval = [&](const Tensor& at) {
    Tape tape;
    const double v = f(tape, tape.constant(at)).value().item();
    if (!std::isfinite(v)) throw std::domain_error("finite_diff_check: non-finite loss");
    return v;
  };
  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = eval(probe);
    probe[i] = orig - eps;
    const double down = eval(probe);
    probe[i] = orig;
    const double central = (up - down) / (2.0 * eps);
    worst = std::max(worst, std::abs(analytic[i] - central) / std::max(1.0, std::abs(central)));
  }
  return worst;
}

// Same check for a model parameter: `f` builds the loss from scratch on a tape
// (reading the parameter through tape.param()).
inline double finite_diff_check_param(const std::function<Var(Tape&)>& f, Parameter& p, double eps = 1e-6) {
  p.zero_grad();
  {
    Tape tape;
    Var loss = f(tape);
    tape.backward(loss);
  }
  const Tensor analytic = p.grad;
  p.zero_grad();
  double worst = 0.0;
  for (std::size_t i = 0; i < p.value.numel(); ++i) {
    const double orig = p.value[i];
    p.value[i] = orig + eps;
    double up, down;
    {
      Tape tape;
      up = f(tape).value().item();
    }
    p.value[i] = orig - eps;
    {
      Tape tape;
      down = f(tape).value().item();
    }
    p.value[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) throw std::domain_error("finite_diff_check: non-finite loss");
    const double central = (up - down) / (2.0 * eps);
    worst = std::max(worst, std::abs(analytic[i] - central) / std::max(1.0, std::abs(central)));
  }
  return worst;
}

}  // namespace tgk
