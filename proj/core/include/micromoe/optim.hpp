#pragma once

#include <map>
#include <string>
#include <vector>

#include "micromoe/param.hpp"

namespace micromoe {

/// Warmup-then-cosine learning-rate schedule.
struct Schedule {
  double base_lr = 1e-3;
  double min_lr = 1e-4;
  long warmup_steps = 0;
  long total_steps = 1;

  /// Rate applied at step t (0-based). Linear ramp to base_lr over the
  /// warmup, then cosine decay reaching min_lr at total_steps.
  double lr_at(long t) const;
};

/// AdamW: Adam moments with decoupled weight decay.
///
/// Moment buffers exist only for trainable parameters; frozen parameters are
/// skipped entirely, leaving their bytes untouched. Updates walk parameters
/// in name order so steps are bitwise reproducible.
class AdamW {
 public:
  struct Config {
    Schedule schedule;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  explicit AdamW(Config cfg) : cfg_(cfg) {}

  /// One update over all trainable parameters. Every trainable parameter
  /// must carry a gradient; a missing one throws invalid_argument.
  void step(ParamSet& params);

  long step_count() const { return step_; }
  double current_lr() const { return cfg_.schedule.lr_at(step_); }
  const Config& config() const { return cfg_; }

  // Serialization access for checkpoints.
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  const std::map<std::string, Moments>& moments() const { return moments_; }
  void restore(long step, std::map<std::string, Moments> moments);

 private:
  Config cfg_;
  long step_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace micromoe
