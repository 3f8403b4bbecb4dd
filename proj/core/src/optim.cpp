#include "micromoe/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace micromoe {

double Schedule::lr_at(long t) const {
  if (warmup_steps > 0 && t < warmup_steps)
    return base_lr * static_cast<double>(t + 1) /
           static_cast<double>(warmup_steps);
  long span = total_steps - warmup_steps;
  if (span <= 0) return min_lr;
  double progress =
      static_cast<double>(t - warmup_steps) / static_cast<double>(span);
  if (progress >= 1.0) return min_lr;
  return min_lr + 0.5 * (base_lr - min_lr) *
                      (1.0 + std::cos(std::numbers::pi * progress));
}

void AdamW::step(ParamSet& params) {
  double lr = cfg_.schedule.lr_at(step_);
  ++step_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));

  for (const auto& [name, tensor] : params.entries()) {
    if (!tensor->requires_grad) continue;
    if (!tensor->has_grad())
      throw std::invalid_argument("missing gradient for trainable parameter " +
                                  name);
    Moments& mom = moments_[name];
    if (mom.m.size() != tensor->size()) {
      mom.m.assign(tensor->size(), 0.0);
      mom.v.assign(tensor->size(), 0.0);
    }
    double* w = tensor->data();
    const std::vector<double>& g = tensor->grad;
    for (std::size_t i = 0; i < tensor->size(); ++i) {
      mom.m[i] = cfg_.beta1 * mom.m[i] + (1.0 - cfg_.beta1) * g[i];
      mom.v[i] = cfg_.beta2 * mom.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      double mhat = mom.m[i] / bc1;
      double vhat = mom.v[i] / bc2;
      w[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                    cfg_.weight_decay * w[i]);
    }
  }
}

void AdamW::restore(long step, std::map<std::string, Moments> moments) {
  step_ = step;
  moments_ = std::move(moments);
}

}  // namespace micromoe
