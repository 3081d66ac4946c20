#pragma once

#include <functional>
#include <optional>
#include <set>

#include "mcft/checkpoint.hpp"
#include "mcft/encoder.hpp"
#include "mcft/optim.hpp"
#include "mcft/pointio.hpp"

namespace mcft {

enum class TrainMethod { mcft, fft, linear_probe, mcft_ssl };

std::string method_name(TrainMethod m);
TrainMethod method_from_name(const std::string& name);

enum class Phase { warmup, ema };

struct MCFTConfig {
  double alpha = 0.999;        // EMA smoothing factor
  double lambda = 1.0;         // supervised loss weight
  int warmup_epochs = 10;      // head+encoder epochs before the EMA phase
  std::optional<std::set<int>> trainable_layers;  // default: deepest ceil(L/3)
  int total_epochs = 60;
  double lr = 1e-3;
  double weight_decay = 0.05;
  int batch_size = 8;
  uint64_t seed = 0;
  int eval_every = 0;  // 0 = evaluate on the final epoch only

  void validate() const;
  std::set<int> resolve_trainable_layers(int num_layers) const;
};

struct EpochMetrics {
  int epoch = 0;
  Phase phase = Phase::warmup;
  double loss_align = 0.0;
  double loss_sup = 0.0;
  double loss_total = 0.0;
  double lr = 0.0;
  double eval_acc = -1.0;  // negative = not evaluated this epoch
  // Semi-supervised extras (zero for supervised runs).
  double loss_em = 0.0;
  double mask_rate = 0.0;
  double loss_inverse = 0.0;
  double loss_contrastive = 0.0;
  double loss_aha = 0.0;
  double wall_sec = 0.0;  // excluded from reproducibility comparisons
};

struct TrainState {
  TrainMethod method = TrainMethod::mcft;
  MCFTConfig cfg;
  EncoderState student;
  Tensor head_w, head_b;
  EncoderState teacher;  // empty for fft / linear_probe
  AdamW opt;
  std::set<std::string> trainable;  // encoder tensor names; head is implicit
  int epoch = 0;
  Phase phase = Phase::warmup;
  std::vector<EpochMetrics> history;

  bool has_teacher() const { return !teacher.params.empty(); }
};

// --------------------------------------------------------------------------
// Losses and the EMA update.
// --------------------------------------------------------------------------

/// 1 - cos(es, et); range [0,2]. The graph form treats et as a constant
/// (stop-gradient target).
double align_loss(const Tensor& es, const Tensor& et);
autodiff::Var align_loss_node(autodiff::Graph& g, autodiff::Var es, Tensor et);

/// -log softmax(logits)[label].
double sup_loss(const Tensor& logits, int label);
autodiff::Var sup_loss_node(autodiff::Graph& g, autodiff::Var logits, int label);

/// theta_t <- alpha * theta_t + (1 - alpha) * theta_s, elementwise over the
/// encoder tensors (the teacher has no head). Schema mismatch is an
/// integrity error.
void ema_update(EncoderState& teacher, const EncoderState& student, double alpha);

// --------------------------------------------------------------------------
// Tokenization plumbing shared by trainers and evaluation.
// --------------------------------------------------------------------------

struct TokenizedSample {
  PatchSet patches;
  int label = -1;
};

/// normalize (optional) -> FPS (seeded start index) -> KNN grouping.
PatchSet tokenize_cloud(const PointCloud& cloud, int num_patches, int patch_points,
                        uint64_t fps_salt, bool normalize_first = true);

/// Deterministic per-cloud start index used by evaluation paths.
inline uint64_t eval_fps_salt(const PointCloud& cloud) { return hash_str(cloud.id); }

// --------------------------------------------------------------------------
// One optimizer step on a labeled batch (supervised methods).
// --------------------------------------------------------------------------

struct StepLosses {
  double align = 0.0, sup = 0.0, total = 0.0;
  double em = 0.0, mask_rate = 0.0, inverse = 0.0, contrastive = 0.0, aha = 0.0;
};

/// Forward student and (for MCFT) teacher, combine align + lambda*sup over
/// the batch mean, update trainable parameters, then apply the EMA update if
/// the state is past warmup. Teacher parameters never receive gradients.
StepLosses mcft_step(TrainState& st, const std::vector<TokenizedSample>& batch);

TrainState init_train_state(const MCFTConfig& cfg, TrainMethod method,
                            const EncoderState& checkpoint);

// --------------------------------------------------------------------------
// Masked-patch reconstruction pretext: manufactures the pre-trained encoder.
// --------------------------------------------------------------------------

struct PretrainConfig {
  int epochs = 60;
  double lr = 1e-3;
  double weight_decay = 0.0;
  int batch_size = 16;
  double mask_ratio = 0.6;  // must lie in (0,1)
  uint64_t seed = 0;
};

/// Trains encoder + a small per-patch decoder to reconstruct the relative
/// points of masked patches (Chamfer distance per masked group). The decoder
/// is discarded; the returned encoder is rounded to the float32 grid so it
/// equals its own saved checkpoint bit-for-bit.
EncoderState pretrain_masked(const EncoderConfig& cfg, const PretrainConfig& pc,
                             const std::vector<PointCloud>& unlabeled,
                             std::vector<double>* epoch_loss_curve = nullptr);

// --------------------------------------------------------------------------
// Internal builder shared by the trainer, salience scoring and tests.
// --------------------------------------------------------------------------
namespace detail {

struct SampleForward {
  autodiff::Var loss = -1;   // align + lambda * sup (batch weighting applied later)
  autodiff::Var align = -1;  // -1 when no teacher
  autodiff::Var sup = -1;
  autodiff::Var logits = -1;
  autodiff::Var cls = -1;
  std::vector<autodiff::Var> layer_out;
};

/// Builds the per-sample supervised loss graph: student forward (+head) and
/// a stop-gradient teacher forward for the alignment target.
SampleForward supervised_sample_loss(autodiff::Graph& g, const EncoderState& student,
                                     const model::ParamLeaves& pl, autodiff::Var head_w,
                                     autodiff::Var head_b, const EncoderState* teacher,
                                     const TokenizedSample& sample, double lambda,
                                     bool force_layer_grads = false);

std::set<std::string> trainable_param_names(const EncoderConfig& cfg, TrainMethod method,
                                            const std::set<int>& layers);

/// Weight decay applies to 2D projection weights only.
bool decays(const std::string& name);

/// The supervised loss weight: lambda scales the CE term for MCFT methods;
/// the baselines optimize plain CE.
double effective_lambda(const TrainState& st);

/// Per-sample gradients for one labeled batch (parallel forwards, no
/// optimizer update). Keys: trainable encoder names plus head.w / head.b.
struct BatchGrads {
  std::vector<std::map<std::string, Tensor>> per_sample;
  std::vector<double> align, sup;
};
BatchGrads supervised_batch_grads(const TrainState& st,
                                  const std::vector<TokenizedSample>& batch);

}  // namespace detail

}  // namespace mcft
