#pragma once

#include "nodule_align/nn.hpp"

#include <cmath>
#include <numbers>

namespace nodule_align {

/// Cosine decay from lr0 at step 0 to zero at `total_steps`.
inline double lr_schedule(long step, long total_steps, double lr0) {
  if (total_steps <= 0) throw ValidationError("lr_schedule: total_steps must be positive");
  if (step < 0 || step > total_steps)
    throw ValidationError("lr_schedule: step " + std::to_string(step) + " outside 0.." + std::to_string(total_steps));
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

/// SGD with momentum and coupled weight decay:
///   g = grad + wd * value,  buf = momentum * buf + g,  value -= lr * buf.
/// Parameters that received no gradient since the last `zero_grad` are left untouched,
/// including their momentum buffers.
template <class S>
class Sgd {
public:
  Sgd(nn::ParamRefs<S> params, double momentum, double weight_decay)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {}

  void zero_grad() {
    for (auto* p : params_)
      if (p->trainable) p->zero_grad();
  }

  void step(double lr) {
    for (auto* p : params_) {
      if (!p->trainable || !p->has_grad) continue;
      if (p->momentum.empty()) p->momentum.assign(p->size(), S(0));
      const S m = static_cast<S>(momentum_), wd = static_cast<S>(p->decay ? weight_decay_ : 0.0),
              rate = static_cast<S>(lr);
      for (std::size_t k = 0; k < p->size(); ++k) {
        const S g = p->grad[k] + wd * p->value[k];
        p->momentum[k] = m * p->momentum[k] + g;
        p->value[k] -= rate * p->momentum[k];
      }
    }
  }

  const nn::ParamRefs<S>& params() const { return params_; }

private:
  nn::ParamRefs<S> params_;
  double momentum_;
  double weight_decay_;
};

}  // namespace nodule_align
