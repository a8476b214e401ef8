#pragma once

#include <limits>

namespace carid {

/// Reduce-on-plateau state for a maximized metric.
struct SchedulerState {
  double best_metric = -std::numeric_limits<double>::infinity();
  int epochs_since_improvement = 0;
  double current_lr = 0.0;

  friend bool operator==(const SchedulerState&, const SchedulerState&) = default;
};

/// An observation improves when it exceeds best_metric by more than
/// `threshold`. Once the non-improving count exceeds `patience`, the rate is
/// multiplied by `factor` and the count restarts.
SchedulerState scheduler_step(SchedulerState state, double val_metric, int patience, double factor,
                              double threshold = 1e-4);

}  // namespace carid
