#include "mcft/pruning.hpp"

#include <algorithm>
#include <cmath>

namespace mcft {

void PruneConfig::validate(int num_layers) const {
  if (budget < 0 || budget > num_layers - 1)
    throw config_error("prune budget must lie in [0, num_layers-1]");
  if (interval < 1) throw config_error("prune interval K must be >= 1");
  if (layers_per_event < 1) throw config_error("layers_per_event must be >= 1");
  if (start_epoch && *start_epoch < 0) throw config_error("prune start_epoch must be >= 0");
  if (epsilon <= 0.0) throw config_error("prune epsilon must be > 0");
  if (salience_batches < 1) throw config_error("salience_batches must be >= 1");
}

std::vector<double> layer_salience(const TrainState& st,
                                   const std::vector<std::vector<TokenizedSample>>& batches) {
  const int L = st.student.config.num_layers;
  if (st.student.active_layers() == 0) throw validation_error("layer_salience: all layers masked");
  if (batches.empty()) throw validation_error("layer_salience: no batches");
  const EncoderState* teacher = st.has_teacher() ? &st.teacher : nullptr;

  std::vector<double> abs_sum(L, 0.0);
  std::vector<int64_t> count(L, 0);
  for (const auto& batch : batches) {
    if (batch.empty()) throw validation_error("layer_salience: empty batch");
    const int B = static_cast<int>(batch.size());
    const double invB = 1.0 / B;
    std::vector<std::vector<double>> sums(B, std::vector<double>(L, 0.0));
    std::vector<int64_t> n_per(L, 0);
#pragma omp parallel for schedule(dynamic)
    for (int s = 0; s < B; ++s) {
      autodiff::Graph g;
      auto pl = model::make_leaves(g, st.student, &st.trainable);
      auto hw = g.input(st.head_w, false);
      auto hb = g.input(st.head_b, false);
      auto sf = detail::supervised_sample_loss(g, st.student, pl, hw, hb, teacher,
                                               batch[s], detail::effective_lambda(st),
                                               /*force_layer_grads=*/true);
      auto scaled = g.combine({sf.loss}, {invB});  // batch-mean loss
      g.backward(scaled);
      for (int l = 0; l < L; ++l) {
        if (!st.student.layer_mask[l]) continue;
        const Tensor& gl = g.grad(sf.layer_out[l]);
        double acc = 0.0;
        for (int64_t i = 0; i < gl.numel(); ++i) acc += std::fabs(gl[i]);
        sums[s][l] = acc;
      }
    }
    for (int l = 0; l < L; ++l) {
      if (!st.student.layer_mask[l]) continue;
      for (int s = 0; s < B; ++s) abs_sum[l] += sums[s][l];
      n_per[l] = static_cast<int64_t>(B) * st.student.config.tokens() *
                 st.student.config.embed_dim;
      count[l] += n_per[l];
    }
  }
  std::vector<double> out(L, std::nan(""));
  for (int l = 0; l < L; ++l)
    if (st.student.layer_mask[l]) out[l] = abs_sum[l] / static_cast<double>(count[l]);
  return out;
}

std::vector<double> normalize_salience(const std::vector<double>& raw,
                                       const std::vector<uint8_t>& mask, double epsilon) {
  const int L = static_cast<int>(raw.size());
  if (mask.size() != raw.size()) throw validation_error("normalize_salience: mask size mismatch");
  int active = 0;
  double mean = 0.0;
  for (int l = 0; l < L; ++l)
    if (mask[l]) {
      mean += raw[l];
      ++active;
    }
  if (active == 0) throw validation_error("normalize_salience: no active layers");
  mean /= active;
  double var = 0.0;
  for (int l = 0; l < L; ++l)
    if (mask[l]) var += (raw[l] - mean) * (raw[l] - mean);
  var /= active;  // population variance
  const double denom = std::sqrt(var) + epsilon;
  std::vector<double> out(L, std::nan(""));
  for (int l = 0; l < L; ++l)
    if (mask[l]) out[l] = (raw[l] - mean) / denom;
  return out;
}

std::vector<int> update_mask(const std::vector<double>& normalized,
                             std::vector<uint8_t>& mask, int layers_per_event,
                             int budget_remaining) {
  if (budget_remaining < 0) throw validation_error("update_mask: negative budget");
  std::vector<int> removed;
  int to_remove = std::min(layers_per_event, budget_remaining);
  while (to_remove-- > 0) {
    int active = 0;
    for (uint8_t b : mask) active += b ? 1 : 0;
    if (active <= 1) break;  // never deactivate the final active layer
    int pick = -1;
    for (int l = 0; l < static_cast<int>(mask.size()); ++l) {
      if (!mask[l]) continue;
      if (pick < 0 || normalized[l] < normalized[pick]) pick = l;
    }
    mask[pick] = 0;
    removed.push_back(pick);
  }
  return removed;
}

EncoderState compact(const EncoderState& state) {
  if (state.active_layers() < 1) throw validation_error("compact: no active layers");
  EncoderState out;
  out.config = state.config;
  out.config.num_layers = state.active_layers();
  out.layer_mask.assign(out.config.num_layers, 1);
  int next = 0;
  std::vector<int> remap(state.config.num_layers, -1);
  for (int l = 0; l < state.config.num_layers; ++l)
    if (state.layer_mask[l]) remap[l] = next++;
  for (const auto& [name, t] : state.params) {
    if (name.rfind("layers.", 0) == 0) {
      const size_t dot = name.find('.', 7);
      const int layer = std::stoi(name.substr(7, dot - 7));
      if (remap[layer] < 0) continue;  // pruned away
      out.params.emplace("layers." + std::to_string(remap[layer]) + name.substr(dot), t);
    } else {
      out.params.emplace(name, t);
    }
  }
  return out;
}

}  // namespace mcft
