#pragma once

#include "retinet/error.hpp"

#include <cmath>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

namespace retinet {

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0;
  double val_loss = 0;
};

template <typename State>
struct EarlyStoppingResult {
  State best;
  int best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::vector<EpochRecord> trace;
};

/// Calls `run_epoch(epoch)` -> {train_loss, val_loss} for epochs 1, 2, ...
/// and `snapshot()` after each strict improvement of the validation loss.
/// Stops once `patience` epochs pass without improvement, or at max_epochs.
template <typename RunEpoch, typename Snapshot>
auto fit_with_early_stopping(RunEpoch&& run_epoch, Snapshot&& snapshot, int max_epochs, int patience) {
  using State = decltype(snapshot());
  if (max_epochs < 1 || patience < 1 || patience >= max_epochs)
    throw ConfigError("early stopping needs 1 <= patience < max_epochs");
  EarlyStoppingResult<State> r;
  std::optional<State> best;
  for (int epoch = 1; epoch <= max_epochs; ++epoch) {
    const std::pair<double, double> losses = run_epoch(epoch);
    r.trace.push_back({epoch, losses.first, losses.second});
    // NaN never counts as an improvement
    if (losses.second < r.best_val_loss || (!best && std::isinf(losses.second))) {
      r.best_val_loss = losses.second;
      r.best_epoch = epoch;
      best = snapshot();
    }
    if (epoch - r.best_epoch >= patience) break;
  }
  if (!best) best = snapshot();  // every epoch NaN: keep the final state
  r.best = std::move(*best);
  return r;
}

}  // namespace retinet
