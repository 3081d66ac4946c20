#pragma once

#include <nlohmann/json.hpp>

#include "mcft/trainer.hpp"

namespace mcft {

struct ProtocolConfig {
  Protocol type = Protocol::full_few_shot;
  int n_way = 5;
  int shots = 5;
  int runs = 3;
  std::optional<uint64_t> base_seed;  // defaults to the run seed
};

struct ThroughputConfig {
  int batch_size = 32;
  int warmup_iters = 3;
  int timed_iters = 10;
};

struct DataConfig {
  SyntheticSpec spec;      // spec.seed defaults to 1000, independent of the run seed
  int train_per_class = 50;
  int test_per_class = 25;
  std::string dir;         // when set, load an exported dataset instead
};

/// The merged configuration tree behind every CLI invocation. Parsing is
/// strict: unknown keys are rejected, and the fully-resolved document is
/// written into the run directory.
struct RunConfig {
  uint64_t seed = 0;
  std::string out_dir;
  DataConfig data;
  EncoderConfig encoder;
  PretrainConfig pretrain;
  MCFTConfig mcft;
  SemiConfig semi;
  PruneConfig prune;
  ProtocolConfig protocol;
  ThroughputConfig throughput;

  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig from_file(const std::string& path);
  nlohmann::json to_json() const;  // resolved, defaults applied

  /// Applies derived defaults (class count, seeds) and validates everything.
  void finalize();

  Dataset load_or_generate() const;
};

// --------------------------------------------------------------------------
// Run-directory persistence: config.json, metrics.csv, prune_log.jsonl,
// checkpoints/, reports/.
// --------------------------------------------------------------------------

std::string metrics_csv_header(bool ssl_columns);
std::string metrics_csv_row(const EpochMetrics& m, bool ssl_columns);

/// Drops wall-clock timing columns so reruns can be compared byte-for-byte.
std::string strip_wall_clock_columns(const std::string& csv_text);

nlohmann::json salience_report_to_json(const SalienceReport& r);
nlohmann::json run_summary_to_json(const RunSummary& s);

/// Streams metrics and prune events into a run directory as training runs.
class RunDirWriter {
 public:
  RunDirWriter(const std::string& dir, bool ssl_columns);
  ~RunDirWriter();

  const std::string& dir() const { return dir_; }
  void write_config(const nlohmann::json& resolved);
  RunHooks hooks();

 private:
  std::string dir_;
  bool ssl_;
  FILE* metrics_ = nullptr;
  FILE* prune_ = nullptr;
};

}  // namespace mcft
