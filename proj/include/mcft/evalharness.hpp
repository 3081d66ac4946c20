#pragma once

#include <functional>

#include "mcft/mcft.hpp"

namespace mcft {

enum class Protocol { full_few_shot, n_way_m_shot };

std::string protocol_name(Protocol p);
Protocol protocol_from_name(const std::string& name);

/// Disjoint support / unlabeled-pool / test index sets under a protocol.
/// full_few_shot: all classes, test = designated test partition, pool = the
/// remaining train samples. n_way_m_shot: n classes drawn uniformly without
/// replacement, test restricted to them.
struct FewShotSplit {
  Protocol protocol = Protocol::full_few_shot;
  int n_way = 0;  // ignored for full_few_shot
  int m_shot = 0;
  std::vector<int> support;
  std::vector<int> pool;
  std::vector<int> test;
  std::vector<int> selected_classes;
  uint64_t seed = 0;
};

FewShotSplit sample_split(const Dataset& ds, Protocol protocol, int n_way, int m_shot,
                          uint64_t seed);

struct EvalResult {
  double overall = 0.0;
  std::vector<double> per_class;
  std::vector<int> per_class_count;
};

/// Argmax-logit overall accuracy plus the per-class accuracy vector.
EvalResult evaluate(const EncoderState& state, const Tensor& head_w, const Tensor& head_b,
                    const Dataset& ds, const std::vector<int>& test_indices);

struct RunSummary {
  std::string protocol;
  std::vector<uint64_t> seeds;
  std::vector<double> accuracies;
  double mean = 0.0;
  double stddev = 0.0;  // population std
  bool single_run = false;
  std::vector<std::string> failures;

  void recompute();
};

/// Runs the experiment with seeds base_seed .. base_seed+num_runs-1 and
/// aggregates mean +/- population std. Failing runs are recorded and leave a
/// partial summary.
RunSummary repeat_runs(const std::function<double(uint64_t)>& experiment, int num_runs,
                       uint64_t base_seed, const std::string& protocol_desc);

enum class SimilarityVariant { cls, token_mean };

/// Per-layer cosine similarity between two encoders' captured layer outputs,
/// averaged over a probe set. Requires identical configs and masks.
std::vector<double> layer_similarity(const EncoderState& a, const EncoderState& b,
                                     const std::vector<PointCloud>& probes,
                                     SimilarityVariant variant = SimilarityVariant::cls);

/// Trace-level core (exposed so the metric itself is testable on constructed
/// traces).
std::vector<double> trace_similarity(const std::vector<LayerTrace>& ta,
                                     const std::vector<LayerTrace>& tb,
                                     SimilarityVariant variant);

/// Frames per second over fixed random inputs: warmup, then timed forwards;
/// median of 3 trials.
double measure_throughput(const EncoderState& state, const Tensor& head_w,
                          const Tensor& head_b, int batch_size, int warmup_iters,
                          int timed_iters, uint64_t seed = 42);

/// Minimal line-chart SVG (one polyline per named series).
void write_similarity_svg(const std::string& path,
                          const std::vector<std::pair<std::string, std::vector<double>>>& series);

}  // namespace mcft
