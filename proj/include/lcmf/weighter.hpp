#pragma once

#include <cstdint>
#include <vector>

#include "lcmf/tensor.hpp"

namespace lcmf {

// ema' = decay * ema + (1 - decay) * loss
double ema_update(double ema, double loss, double decay);

struct WeighterConfig {
  double decay = 0.95;
  double step_cap = 0.05;
  double floor = 0.05;
  double eps = 1e-8;  // ratio denominator guard
};

// Per-task loss balancing. Each step compares the incoming losses against
// their EMAs (tasks decaying slower get more weight), moves every weight
// toward its share-normalized target by at most step_cap, clips at the
// floor, and restores the sum to the task count by distributing the
// correction over the per-task slack that remains inside the cap. All three
// invariants (weight >= floor, |change| <= step_cap, sum == task count) hold
// after every step.
class LossWeighter {
 public:
  explicit LossWeighter(int64_t tasks, const WeighterConfig& cfg = {});

  struct Step {
    std::vector<double> weights;
    std::vector<double> emas;
    bool skipped = false;  // a non-finite loss froze this step
  };

  // Folds the losses into the EMAs and reweights. The first call only seeds
  // the EMAs, so weights stay at 1. Any non-finite loss skips the whole step
  // and leaves the state untouched.
  Step step(const std::vector<double>& losses);

  const std::vector<double>& weights() const { return weights_; }
  const std::vector<double>& emas() const { return emas_; }
  int64_t tasks() const { return static_cast<int64_t>(weights_.size()); }
  int64_t skipped_steps() const { return skipped_; }
  const WeighterConfig& config() const { return cfg_; }

 private:
  WeighterConfig cfg_;
  std::vector<double> weights_;
  std::vector<double> emas_;
  bool seeded_ = false;
  int64_t skipped_ = 0;
};

double total_loss(const std::vector<double>& losses, const std::vector<double>& weights);
// Weighted sum that stays on the tape; weights are constants.
Tensor total_loss(const std::vector<Tensor>& losses, const std::vector<double>& weights);

}  // namespace lcmf
