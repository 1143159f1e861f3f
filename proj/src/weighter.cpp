#include "lcmf/weighter.hpp"

#include <algorithm>
#include <cmath>

namespace lcmf {

double ema_update(double ema, double loss, double decay) {
  return decay * ema + (1.0 - decay) * loss;
}

LossWeighter::LossWeighter(int64_t tasks, const WeighterConfig& cfg) : cfg_(cfg) {
  if (tasks < 2) detail::fail("weighter: needs at least 2 tasks");
  if (!(cfg_.decay >= 0.0 && cfg_.decay < 1.0)) detail::fail("weighter: decay outside [0,1)");
  if (!(cfg_.step_cap > 0.0)) detail::fail("weighter: step_cap must be positive");
  if (!(cfg_.floor > 0.0 && cfg_.floor <= 1.0)) detail::fail("weighter: floor outside (0,1]");
  weights_.assign(static_cast<size_t>(tasks), 1.0);
  emas_.assign(static_cast<size_t>(tasks), 0.0);
}

LossWeighter::Step LossWeighter::step(const std::vector<double>& losses) {
  const size_t k = weights_.size();
  if (losses.size() != k) detail::fail("weighter: got " + std::to_string(losses.size()) +
                                       " losses for " + std::to_string(k) + " tasks");
  for (double l : losses) {
    if (!std::isfinite(l)) {
      ++skipped_;
      return {weights_, emas_, true};
    }
  }

  if (!seeded_) {
    emas_ = losses;
    seeded_ = true;
    return {weights_, emas_, false};
  }

  // trend ratios against the pre-update EMAs
  std::vector<double> ratio(k);
  double ratio_sum = 0.0;
  for (size_t i = 0; i < k; ++i) {
    ratio[i] = losses[i] / std::max(emas_[i], cfg_.eps);
    ratio_sum += ratio[i];
  }
  for (size_t i = 0; i < k; ++i) emas_[i] = ema_update(emas_[i], losses[i], cfg_.decay);

  const double count = static_cast<double>(k);
  std::vector<double> next(k);
  for (size_t i = 0; i < k; ++i) {
    const double target = ratio_sum > 0.0 ? count * ratio[i] / ratio_sum : 1.0;
    const double delta = std::clamp(target - weights_[i], -cfg_.step_cap, cfg_.step_cap);
    next[i] = std::max(weights_[i] + delta, cfg_.floor);
  }

  // Restore the sum to the task count inside the per-task bounds
  // [max(w - cap, floor), w + cap]. The capped moves guarantee enough
  // combined slack on whichever side the correction needs.
  double sum = 0.0;
  for (double w : next) sum += w;
  const double deficit = count - sum;
  if (deficit > 0.0) {
    double room = 0.0;
    for (size_t i = 0; i < k; ++i) room += weights_[i] + cfg_.step_cap - next[i];
    if (room > 0.0) {
      const double take = std::min(1.0, deficit / room);
      for (size_t i = 0; i < k; ++i)
        next[i] += take * (weights_[i] + cfg_.step_cap - next[i]);
    }
  } else if (deficit < 0.0) {
    double room = 0.0;
    std::vector<double> low(k);
    for (size_t i = 0; i < k; ++i) {
      low[i] = std::max(weights_[i] - cfg_.step_cap, cfg_.floor);
      room += next[i] - low[i];
    }
    if (room > 0.0) {
      const double take = std::min(1.0, -deficit / room);
      for (size_t i = 0; i < k; ++i) next[i] -= take * (next[i] - low[i]);
    }
  }

  weights_ = std::move(next);
  return {weights_, emas_, false};
}

double total_loss(const std::vector<double>& losses, const std::vector<double>& weights) {
  if (losses.size() != weights.size()) detail::fail("total_loss: task lists differ in length");
  double total = 0.0;
  for (size_t i = 0; i < losses.size(); ++i) total += weights[i] * losses[i];
  return total;
}

Tensor total_loss(const std::vector<Tensor>& losses, const std::vector<double>& weights) {
  if (losses.size() != weights.size()) detail::fail("total_loss: task lists differ in length");
  if (losses.empty()) detail::fail("total_loss: no tasks");
  Tensor total = scale(losses[0], weights[0]);
  for (size_t i = 1; i < losses.size(); ++i) total = add(total, scale(losses[i], weights[i]));
  return total;
}

}  // namespace lcmf
