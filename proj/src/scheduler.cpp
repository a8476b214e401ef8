#include "carid/scheduler.hpp"

#include "carid/error.hpp"

namespace carid {

SchedulerState scheduler_step(SchedulerState state, double val_metric, int patience, double factor,
                              double threshold) {
  if (!(factor > 0.0 && factor < 1.0)) throw Error(Errc::invalid_argument, "factor must lie in (0, 1)");
  if (patience < 1) throw Error(Errc::invalid_argument, "patience must be >= 1");
  if (val_metric > state.best_metric + threshold) {
    state.best_metric = val_metric;
    state.epochs_since_improvement = 0;
    return state;
  }
  if (++state.epochs_since_improvement > patience) {
    state.current_lr *= factor;
    state.epochs_since_improvement = 0;
  }
  return state;
}

}  // namespace carid
