#pragma once

#include "mcft/evalharness.hpp"
#include "mcft/pruning.hpp"
#include "mcft/semisup.hpp"

namespace mcft {

struct RunHooks {
  std::function<void(const EpochMetrics&)> on_epoch;
  std::function<void(const SalienceReport&)> on_prune_event;
};

struct TrainRequest {
  TrainMethod method = TrainMethod::mcft;
  MCFTConfig cfg;
  SemiConfig semi;                  // consulted for mcft_ssl only
  std::optional<PruneConfig> prune;
  const EncoderState* checkpoint = nullptr;
  const Dataset* data = nullptr;
  std::vector<int> labeled_indices;
  std::vector<int> unlabeled_indices;  // mcft_ssl pool
  std::vector<int> eval_indices;       // used for the eval_acc column
  RunHooks hooks;
};

struct TrainResult {
  TrainState state;
  std::vector<SalienceReport> prune_log;
  int budget_remaining = 0;
};

/// The single training engine behind every method: warmup-then-EMA phase
/// schedule, selective freezing, the optional unlabeled stream, and the
/// periodic pruning hook. Deterministic given (request config, seed).
TrainResult run_training(const TrainRequest& req);

// Spec-level entry points.
TrainResult train_mcft(const MCFTConfig& cfg, const EncoderState& checkpoint,
                       const Dataset& data, const std::vector<int>& labeled,
                       const std::vector<int>& eval_indices = {},
                       const RunHooks& hooks = {});

TrainResult train_baseline(const MCFTConfig& cfg, const EncoderState& checkpoint,
                           const Dataset& data, const std::vector<int>& labeled,
                           TrainMethod mode, const std::vector<int>& eval_indices = {},
                           const RunHooks& hooks = {});

TrainResult semi_train(const MCFTConfig& cfg, const SemiConfig& semi,
                       const EncoderState& checkpoint, const Dataset& data,
                       const std::vector<int>& labeled, const std::vector<int>& unlabeled,
                       const std::vector<int>& eval_indices = {},
                       const RunHooks& hooks = {});

}  // namespace mcft
