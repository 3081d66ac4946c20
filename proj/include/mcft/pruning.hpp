#pragma once

#include <optional>

#include "mcft/mcft.hpp"

namespace mcft {

struct PruneConfig {
  int budget = 1;            // layers to remove over the whole run
  int interval = 10;         // epochs between pruning events (K)
  int layers_per_event = 1;
  std::optional<int> start_epoch;  // defaults to warmup_epochs
  double epsilon = 1e-8;     // normalization guard
  int salience_batches = 2;  // batches averaged per scoring pass

  void validate(int num_layers) const;
  int resolved_start(int warmup_epochs) const {
    return start_epoch ? *start_epoch : warmup_epochs;
  }
};

struct SalienceReport {
  std::vector<double> raw;         // NaN for masked-off layers
  std::vector<double> normalized;  // NaN for masked-off layers
  int epoch = 0;
  int batches_used = 0;
  std::vector<int> removed;  // layer indices deactivated at this event
  int64_t new_param_count = 0;
  int64_t new_flops = 0;
};

/// Mean |dL/dE_i| over batches, samples, tokens and feature dims, where L is
/// the supervised MCFT loss (align vs. teacher + lambda * CE). Masked layers
/// receive no score (NaN).
std::vector<double> layer_salience(const TrainState& st,
                                   const std::vector<std::vector<TokenizedSample>>& batches);

/// (s_i - mean) / (std + eps) over active layers only; population std.
/// Masked entries stay NaN.
std::vector<double> normalize_salience(const std::vector<double>& raw,
                                       const std::vector<uint8_t>& mask, double epsilon);

/// Deactivates up to min(layers_per_event, budget_remaining) active layers
/// with the lowest normalized salience (ties to the lowest index), never
/// removing the final active layer. Returns the removed indices.
std::vector<int> update_mask(const std::vector<double>& normalized,
                             std::vector<uint8_t>& mask, int layers_per_event,
                             int budget_remaining);

/// Physically removes masked layers: fewer layers, contiguous tensors,
/// all-true mask. Forward outputs match the masked original (identical
/// arithmetic on the surviving layers).
EncoderState compact(const EncoderState& state);

}  // namespace mcft
