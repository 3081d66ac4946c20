#pragma once

#include "mcft/mcft.hpp"

namespace mcft {

struct SemiConfig {
  double tau = 0.95;            // pseudo-label confidence threshold
  int mu = 4;                   // unlabeled-to-labeled batch ratio
  double omega = 1.0;           // unsupervised loss weight
  double temperature = 0.1;     // contrastive temperature
  double low_threshold = 0.05;  // inverse-learning low-confidence cutoff
  bool enable_aha = true;
  bool enable_inverse = true;
  bool enable_contrastive = true;
  double aha_extra_drop = 0.15;  // extra dropout stage for flagged samples

  void validate() const;
};

/// Confidence-gated consistency between a weak view's hard pseudo-label and
/// the strong view's prediction, averaged over the full batch denominator
/// (samples failing the gate contribute zero). Pseudo-label probabilities are
/// read without gradient tracking.
struct PseudoLabelOut {
  double loss_em = 0.0;
  double mask_rate = 0.0;
};
PseudoLabelOut pseudo_label_loss(const TrainState& st,
                                 const std::vector<PointCloud>& unlabeled_batch,
                                 double tau, uint64_t seed);

/// Simplified interpretations of the three extra unlabeled-consistency terms
/// (hard-augmentation curriculum, inverse learning, contrastive pairs), each
/// individually toggleable; the total is the sum of the enabled terms. See
/// docs/method.md for the exact definitions.
struct AllMatchBreakdown {
  double aha = 0.0;
  double inverse = 0.0;
  double contrastive = 0.0;
  double total = 0.0;
  bool contrastive_skipped = false;
};
AllMatchBreakdown allmatch_lite_loss(const TrainState& st,
                                     const std::vector<PointCloud>& unlabeled_batch,
                                     const SemiConfig& sc, uint64_t seed,
                                     const std::vector<uint8_t>& hard_flags = {});

// --------------------------------------------------------------------------
// Internals shared between the standalone ops and the trainer.
// --------------------------------------------------------------------------
namespace unsup {

struct SampleViews {
  TokenizedSample weak, strong, hard;
  bool has_hard = false;
};

/// Normalizes, augments (weak/strong and optionally the extra-hard stage) and
/// tokenizes one unlabeled cloud. Pure function of (cloud, seed, flags).
SampleViews make_views(const PointCloud& cloud, const EncoderConfig& cfg,
                       uint64_t view_seed, bool hard_flag, double extra_drop);

struct UnsupSampleOut {
  autodiff::Var loss = -1;  // weighted per-sample unsup scalar (see build args)
  double align = 0.0, em = 0.0, inverse = 0.0, aha = 0.0;
  bool gated = false;
  int pseudo = -1;
  bool strong_correct = false;
  autodiff::Var cls_w = -1, cls_s = -1;  // for contrastive gradient seeding
  /// Layer outputs of every student forward in this sample (weak, strong and
  /// the hard view when present), grouped per layer; used by salience scoring.
  std::vector<std::vector<autodiff::Var>> layer_out_views;
};

/// Builds the per-sample unlabeled terms in graph g. Every enabled term is
/// scaled by `weight` (the trainer passes omega / (mu*B)); the contrastive
/// term is handled separately across the batch.
UnsupSampleOut build_unsup_sample(autodiff::Graph& g, const EncoderState& student,
                                  const model::ParamLeaves& pl, autodiff::Var head_w,
                                  autodiff::Var head_b, const EncoderState* teacher,
                                  const SampleViews& views, const SemiConfig& sc,
                                  double tau, double weight,
                                  bool force_layer_grads = false);

struct ContrastiveOut {
  double value = 0.0;  // unweighted InfoNCE mean over anchors
  bool skipped = false;
  std::vector<Tensor> grad_w, grad_s;  // d(weight * loss)/d embedding
};

/// SimCLR-style InfoNCE over 2n normalized embeddings (weak/strong pairs per
/// sample; anchor against the other 2n-1 candidates). n < 2 is skipped with a
/// warning (no negatives).
ContrastiveOut contrastive_pairs(const std::vector<Tensor>& emb_w,
                                 const std::vector<Tensor>& emb_s, double temperature,
                                 double weight);

}  // namespace unsup

}  // namespace mcft
