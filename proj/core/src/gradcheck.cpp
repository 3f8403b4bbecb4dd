#include "micromoe/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace micromoe {

namespace {

constexpr double kKinkTolerance = 1e-7;

struct Eval {
  double value;
  double kink_distance;
};

Eval evaluate(const LossBuilder& f) {
  Graph g;
  Val loss = f(g);
  if (g.value(loss).size() != 1)
    throw std::invalid_argument("finite_difference_check: loss must be scalar");
  return {g.value(loss).at(0, 0), g.min_kink_distance()};
}

}  // namespace

GradCheckReport finite_difference_check(const LossBuilder& f,
                                        ParamSet& params, double eps) {
  Eval base1 = evaluate(f);
  Eval base2 = evaluate(f);
  if (base1.value != base2.value)
    throw std::invalid_argument(
        "finite_difference_check: function is not deterministic");

  // Reverse-mode gradients.
  params.zero_grads();
  {
    Graph g;
    Val loss = f(g);
    g.backward(loss);
  }

  GradCheckReport report;
  for (const auto& [name, tensor] : params.entries()) {
    if (!tensor->requires_grad) continue;
    // A parameter the function never touched has an all-zero gradient; the
    // finite differences below confirm it.
    bool has_ad = tensor->has_grad();
    double worst = 0.0;
    for (std::size_t i = 0; i < tensor->size(); ++i) {
      double saved = tensor->data()[i];
      tensor->data()[i] = saved + eps;
      Eval plus = evaluate(f);
      tensor->data()[i] = saved - eps;
      Eval minus = evaluate(f);
      tensor->data()[i] = saved;

      double kink = std::min({base1.kink_distance, plus.kink_distance,
                              minus.kink_distance});
      if (kink < kKinkTolerance) {
        ++report.skipped;
        continue;
      }
      double g_fd = (plus.value - minus.value) / (2.0 * eps);
      double g_ad = has_ad ? tensor->grad[i] : 0.0;
      double denom = std::max({std::abs(g_ad), std::abs(g_fd), 1e-8});
      worst = std::max(worst, std::abs(g_ad - g_fd) / denom);
      ++report.checked;
    }
    report.per_param[name] = worst;
    report.max_error = std::max(report.max_error, worst);
  }
  return report;
}

}  // namespace micromoe
