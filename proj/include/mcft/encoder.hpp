#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mcft/autodiff.hpp"
#include "mcft/pointcloud.hpp"
#include "mcft/tensor.hpp"

namespace mcft {

struct EncoderConfig {
  int embed_dim = 64;
  int num_layers = 6;
  int num_heads = 4;
  double ffn_ratio = 4.0;
  int patch_points = 16;  // k
  int num_patches = 16;   // m
  int num_classes = 8;    // C

  int ffn_hidden() const { return static_cast<int>(ffn_ratio * embed_dim); }
  int tokens() const { return num_patches + 1; }  // patches + CLS
  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

/// Named parameter tensors plus the per-layer activity mask. A masked-off
/// layer acts as identity in forward.
struct EncoderState {
  EncoderConfig config;
  std::map<std::string, Tensor> params;
  std::vector<uint8_t> layer_mask;  // length L, 1 = active

  int active_layers() const {
    int n = 0;
    for (uint8_t b : layer_mask) n += b ? 1 : 0;
    return n;
  }
};

/// The fixed tensor-name schema for a config, in definition order.
std::vector<std::pair<std::string, std::vector<int>>> param_schema(const EncoderConfig& cfg);

/// Truncated-normal(0.02) weights, zero biases, unit norm gains, seeded.
/// Values are rounded to the float32 grid so fresh states round-trip
/// bit-exactly through checkpoints.
EncoderState init_encoder(const EncoderConfig& cfg, uint64_t seed);

void init_head(const EncoderConfig& cfg, uint64_t seed, Tensor& head_w, Tensor& head_b);

/// Throws config_error naming the first mismatched field.
void require_config_match(const EncoderConfig& got, const EncoderConfig& expected);

struct CostReport {
  int64_t param_count = 0;
  int64_t flops_per_forward = 0;
};

/// Analytic cost model (documented in docs/formats.md): per active layer,
/// attention contributes 2*T^2*d + 4*T*d^2 and the FFN 4*T*d*hidden FLOPs,
/// T = m+1; masked layers contribute nothing. Parameters count embeddings,
/// active-layer tensors, the final norm, and the classifier head.
CostReport count_costs(const EncoderState& state);

/// Per-layer token outputs (masked layers record their pass-through input)
/// plus the final CLS embedding.
struct LayerTrace {
  std::vector<Tensor> layer_outputs;  // L entries, each [m+1, d]
  Tensor cls;                         // [1, d]
};

struct ForwardResult {
  Tensor logits;  // [1, C]
  Tensor cls;     // [1, d]
  std::optional<LayerTrace> trace;
};

/// Value-level tokenizer: token 0 is the CLS vector, token i>0 is
/// patch-embed(groups[i-1]) + positional-embed(centers[i-1]).
Tensor embed(const EncoderState& state, const PatchSet& patches);

/// Value-level forward over a token matrix E0 ([m+1, d]).
ForwardResult forward(const EncoderState& state, const Tensor& head_w,
                      const Tensor& head_b, const Tensor& e0, bool capture);

// --------------------------------------------------------------------------
// Graph-level builders used by the trainers.
// --------------------------------------------------------------------------
namespace model {

struct ParamLeaves {
  std::map<std::string, autodiff::Var> vars;
  autodiff::Var at(const std::string& name) const;
};

/// Registers every parameter tensor of `state` as a graph leaf. Names in
/// `trainable` (when given) require gradients.
ParamLeaves make_leaves(autodiff::Graph& g, const EncoderState& state,
                        const std::set<std::string>* trainable = nullptr);

/// Builds E0 from a patch set. When `patch_mask` is given, masked patches
/// contribute `mask_token` instead of their patch embedding (positional term
/// kept), which is how the reconstruction pretext hides groups.
autodiff::Var embed_tokens(autodiff::Graph& g, const EncoderConfig& cfg,
                           const ParamLeaves& pl, const PatchSet& patches,
                           const std::vector<uint8_t>* patch_mask = nullptr,
                           autodiff::Var mask_token = -1);

struct ForwardVars {
  std::vector<autodiff::Var> layer_out;  // length L
  autodiff::Var tokens_final = -1;       // [T, d] after final norm
  autodiff::Var cls = -1;                // [1, d]
};

/// Pre-norm transformer stack; masked layers pass through unchanged. Checks
/// activations for finiteness and reports the offending layer.
ForwardVars encoder_forward(autodiff::Graph& g, const EncoderState& state,
                            const ParamLeaves& pl, autodiff::Var e0);

autodiff::Var apply_head(autodiff::Graph& g, autodiff::Var cls, autodiff::Var head_w,
                         autodiff::Var head_b);

}  // namespace model

}  // namespace mcft
