#include "mcft/runconfig.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace mcft {

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
  if (!j.is_object()) throw config_error(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) {
        ok = true;
        break;
      }
    if (!ok) throw config_error("unknown config key '" + where + "." + key + "'");
  }
}

template <typename T>
void get_to(const json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace

RunConfig RunConfig::from_json(const json& j) {
  RunConfig rc;
  rc.data.spec.seed = 1000;  // dataset identity is independent of the run seed
  check_keys(j,
             {"seed", "out_dir", "data", "encoder", "pretrain", "mcft", "semi", "prune",
              "protocol", "throughput"},
             "config");
  get_to(j, "seed", rc.seed);
  get_to(j, "out_dir", rc.out_dir);

  if (j.contains("data")) {
    const json& d = j.at("data");
    check_keys(d,
               {"classes", "points_per_cloud", "noise_sigma", "seed", "train_per_class",
                "test_per_class", "dir"},
               "data");
    get_to(d, "classes", rc.data.spec.class_catalog);
    get_to(d, "points_per_cloud", rc.data.spec.points_per_cloud);
    get_to(d, "noise_sigma", rc.data.spec.noise_sigma);
    get_to(d, "seed", rc.data.spec.seed);
    get_to(d, "train_per_class", rc.data.train_per_class);
    get_to(d, "test_per_class", rc.data.test_per_class);
    get_to(d, "dir", rc.data.dir);
  }
  if (j.contains("encoder")) {
    const json& e = j.at("encoder");
    check_keys(e,
               {"embed_dim", "num_layers", "num_heads", "ffn_ratio", "num_patches",
                "patch_points"},
               "encoder");
    get_to(e, "embed_dim", rc.encoder.embed_dim);
    get_to(e, "num_layers", rc.encoder.num_layers);
    get_to(e, "num_heads", rc.encoder.num_heads);
    get_to(e, "ffn_ratio", rc.encoder.ffn_ratio);
    get_to(e, "num_patches", rc.encoder.num_patches);
    get_to(e, "patch_points", rc.encoder.patch_points);
  }
  if (j.contains("pretrain")) {
    const json& p = j.at("pretrain");
    check_keys(p, {"epochs", "lr", "weight_decay", "batch_size", "mask_ratio"}, "pretrain");
    get_to(p, "epochs", rc.pretrain.epochs);
    get_to(p, "lr", rc.pretrain.lr);
    get_to(p, "weight_decay", rc.pretrain.weight_decay);
    get_to(p, "batch_size", rc.pretrain.batch_size);
    get_to(p, "mask_ratio", rc.pretrain.mask_ratio);
  }
  if (j.contains("mcft")) {
    const json& m = j.at("mcft");
    check_keys(m,
               {"alpha", "lambda", "warmup_epochs", "trainable_layers", "total_epochs",
                "lr", "weight_decay", "batch_size", "eval_every"},
               "mcft");
    get_to(m, "alpha", rc.mcft.alpha);
    get_to(m, "lambda", rc.mcft.lambda);
    get_to(m, "warmup_epochs", rc.mcft.warmup_epochs);
    get_to(m, "total_epochs", rc.mcft.total_epochs);
    get_to(m, "lr", rc.mcft.lr);
    get_to(m, "weight_decay", rc.mcft.weight_decay);
    get_to(m, "batch_size", rc.mcft.batch_size);
    get_to(m, "eval_every", rc.mcft.eval_every);
    if (m.contains("trainable_layers") && !m.at("trainable_layers").is_string()) {
      auto v = m.at("trainable_layers").get<std::vector<int>>();
      rc.mcft.trainable_layers = std::set<int>(v.begin(), v.end());
    }  // the string "auto" (or omission) keeps the default
  }
  if (j.contains("semi")) {
    const json& s = j.at("semi");
    check_keys(s,
               {"tau", "mu", "omega", "temperature", "low_threshold", "enable_aha",
                "enable_inverse", "enable_contrastive", "aha_extra_drop"},
               "semi");
    get_to(s, "tau", rc.semi.tau);
    get_to(s, "mu", rc.semi.mu);
    get_to(s, "omega", rc.semi.omega);
    get_to(s, "temperature", rc.semi.temperature);
    get_to(s, "low_threshold", rc.semi.low_threshold);
    get_to(s, "enable_aha", rc.semi.enable_aha);
    get_to(s, "enable_inverse", rc.semi.enable_inverse);
    get_to(s, "enable_contrastive", rc.semi.enable_contrastive);
    get_to(s, "aha_extra_drop", rc.semi.aha_extra_drop);
  }
  if (j.contains("prune")) {
    const json& p = j.at("prune");
    check_keys(p,
               {"budget", "interval", "layers_per_event", "start_epoch", "epsilon",
                "salience_batches"},
               "prune");
    get_to(p, "budget", rc.prune.budget);
    get_to(p, "interval", rc.prune.interval);
    get_to(p, "layers_per_event", rc.prune.layers_per_event);
    if (p.contains("start_epoch") && !p.at("start_epoch").is_null())
      rc.prune.start_epoch = p.at("start_epoch").get<int>();
    get_to(p, "epsilon", rc.prune.epsilon);
    get_to(p, "salience_batches", rc.prune.salience_batches);
  }
  if (j.contains("protocol")) {
    const json& p = j.at("protocol");
    check_keys(p, {"type", "n_way", "shots", "runs", "base_seed"}, "protocol");
    if (p.contains("type")) rc.protocol.type = protocol_from_name(p.at("type").get<std::string>());
    get_to(p, "n_way", rc.protocol.n_way);
    get_to(p, "shots", rc.protocol.shots);
    get_to(p, "runs", rc.protocol.runs);
    if (p.contains("base_seed")) rc.protocol.base_seed = p.at("base_seed").get<uint64_t>();
  }
  if (j.contains("throughput")) {
    const json& t = j.at("throughput");
    check_keys(t, {"batch_size", "warmup_iters", "timed_iters"}, "throughput");
    get_to(t, "batch_size", rc.throughput.batch_size);
    get_to(t, "warmup_iters", rc.throughput.warmup_iters);
    get_to(t, "timed_iters", rc.throughput.timed_iters);
  }
  return rc;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open config file: " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw config_error("config file is not valid JSON: " + path);
  return from_json(j);
}

void RunConfig::finalize() {
  encoder.num_classes = static_cast<int>(data.spec.class_catalog.size());
  for (const auto& name : data.spec.class_catalog) shapes::family_from_name(name);
  encoder.validate();
  mcft.validate();
  semi.validate();
  prune.validate(encoder.num_layers);
  if (protocol.runs < 1) throw config_error("protocol.runs must be >= 1");
  if (protocol.shots < 1) throw config_error("protocol.shots must be >= 1");
  if (data.train_per_class < 1 || data.test_per_class < 1)
    throw config_error("data partitions must have >= 1 sample per class");
  if (throughput.batch_size < 1 || throughput.timed_iters < 1)
    throw config_error("throughput settings must be >= 1");
}

json RunConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["out_dir"] = out_dir;
  j["data"] = {{"classes", data.spec.class_catalog},
               {"points_per_cloud", data.spec.points_per_cloud},
               {"noise_sigma", data.spec.noise_sigma},
               {"seed", data.spec.seed},
               {"train_per_class", data.train_per_class},
               {"test_per_class", data.test_per_class},
               {"dir", data.dir}};
  j["encoder"] = {{"embed_dim", encoder.embed_dim},       {"num_layers", encoder.num_layers},
                  {"num_heads", encoder.num_heads},       {"ffn_ratio", encoder.ffn_ratio},
                  {"num_patches", encoder.num_patches},   {"patch_points", encoder.patch_points}};
  j["pretrain"] = {{"epochs", pretrain.epochs},
                   {"lr", pretrain.lr},
                   {"weight_decay", pretrain.weight_decay},
                   {"batch_size", pretrain.batch_size},
                   {"mask_ratio", pretrain.mask_ratio}};
  j["mcft"] = {{"alpha", mcft.alpha},
               {"lambda", mcft.lambda},
               {"warmup_epochs", mcft.warmup_epochs},
               {"total_epochs", mcft.total_epochs},
               {"lr", mcft.lr},
               {"weight_decay", mcft.weight_decay},
               {"batch_size", mcft.batch_size},
               {"eval_every", mcft.eval_every}};
  if (mcft.trainable_layers)
    j["mcft"]["trainable_layers"] =
        std::vector<int>(mcft.trainable_layers->begin(), mcft.trainable_layers->end());
  else
    j["mcft"]["trainable_layers"] = "auto";
  j["semi"] = {{"tau", semi.tau},
               {"mu", semi.mu},
               {"omega", semi.omega},
               {"temperature", semi.temperature},
               {"low_threshold", semi.low_threshold},
               {"enable_aha", semi.enable_aha},
               {"enable_inverse", semi.enable_inverse},
               {"enable_contrastive", semi.enable_contrastive},
               {"aha_extra_drop", semi.aha_extra_drop}};
  j["prune"] = {{"budget", prune.budget},
                {"interval", prune.interval},
                {"layers_per_event", prune.layers_per_event},
                {"epsilon", prune.epsilon},
                {"salience_batches", prune.salience_batches}};
  if (prune.start_epoch)
    j["prune"]["start_epoch"] = *prune.start_epoch;
  else
    j["prune"]["start_epoch"] = nullptr;
  j["protocol"] = {{"type", protocol_name(protocol.type)},
                   {"n_way", protocol.n_way},
                   {"shots", protocol.shots},
                   {"runs", protocol.runs},
                   {"base_seed", protocol.base_seed ? json(*protocol.base_seed) : json(seed)}};
  j["throughput"] = {{"batch_size", throughput.batch_size},
                     {"warmup_iters", throughput.warmup_iters},
                     {"timed_iters", throughput.timed_iters}};
  return j;
}

Dataset RunConfig::load_or_generate() const {
  if (!data.dir.empty()) return import_dataset(data.dir);
  return make_synthetic_dataset(data.spec, data.train_per_class, data.test_per_class);
}

namespace {
std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}
}  // namespace

std::string metrics_csv_header(bool ssl) {
  std::string h = "epoch,phase,loss_align,loss_sup,loss_total,lr,eval_acc";
  if (ssl) h += ",loss_em,mask_rate,loss_inverse,loss_contrastive,loss_aha";
  return h + ",wall_sec";
}

std::string metrics_csv_row(const EpochMetrics& m, bool ssl) {
  std::ostringstream os;
  os << m.epoch << "," << (m.phase == Phase::warmup ? "warmup" : "ema") << ","
     << fmt(m.loss_align) << "," << fmt(m.loss_sup) << "," << fmt(m.loss_total) << ","
     << fmt(m.lr) << ",";
  if (m.eval_acc >= 0.0) os << fmt(m.eval_acc);
  if (ssl)
    os << "," << fmt(m.loss_em) << "," << fmt(m.mask_rate) << "," << fmt(m.loss_inverse)
       << "," << fmt(m.loss_contrastive) << "," << fmt(m.loss_aha);
  os << "," << fmt(m.wall_sec);
  return os.str();
}

std::string strip_wall_clock_columns(const std::string& csv_text) {
  std::istringstream in(csv_text);
  std::ostringstream out;
  std::string line;
  bool first = true;
  std::vector<size_t> keep;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (line.size() && line.back() == ',') cells.push_back("");
    if (first) {
      for (size_t i = 0; i < cells.size(); ++i)
        if (cells[i] != "wall_sec") keep.push_back(i);
      first = false;
    }
    bool started = false;
    for (size_t i : keep) {
      if (started) out << ",";
      if (i < cells.size()) out << cells[i];
      started = true;
    }
    out << "\n";
  }
  return out.str();
}

json salience_report_to_json(const SalienceReport& r) {
  auto clean = [](const std::vector<double>& v) {
    json arr = json::array();
    for (double x : v) {
      if (std::isnan(x))
        arr.push_back(nullptr);
      else
        arr.push_back(x);
    }
    return arr;
  };
  return json{{"epoch", r.epoch},
              {"raw", clean(r.raw)},
              {"normalized", clean(r.normalized)},
              {"removed", r.removed},
              {"batches_used", r.batches_used},
              {"param_count", r.new_param_count},
              {"flops", r.new_flops}};
}

json run_summary_to_json(const RunSummary& s) {
  json runs = json::array();
  for (size_t i = 0; i < s.accuracies.size(); ++i)
    runs.push_back(json{{"seed", s.seeds[i]}, {"oa", s.accuracies[i]}});
  return json{{"protocol", s.protocol}, {"runs", runs},
              {"mean", s.mean},         {"std", s.stddev},
              {"single_run", s.single_run}, {"failures", s.failures}};
}

RunDirWriter::RunDirWriter(const std::string& dir, bool ssl_columns)
    : dir_(dir), ssl_(ssl_columns) {
  fs::create_directories(dir_);
  fs::create_directories(fs::path(dir_) / "checkpoints");
  fs::create_directories(fs::path(dir_) / "reports");
  metrics_ = std::fopen((fs::path(dir_) / "metrics.csv").string().c_str(), "w");
  if (!metrics_) throw config_error("cannot write metrics.csv in " + dir_);
  std::fprintf(metrics_, "%s\n", metrics_csv_header(ssl_).c_str());
  std::fflush(metrics_);
}

RunDirWriter::~RunDirWriter() {
  if (metrics_) std::fclose(metrics_);
  if (prune_) std::fclose(prune_);
}

void RunDirWriter::write_config(const json& resolved) {
  std::ofstream out(fs::path(dir_) / "config.json");
  out << resolved.dump(2) << "\n";
}

RunHooks RunDirWriter::hooks() {
  RunHooks h;
  h.on_epoch = [this](const EpochMetrics& m) {
    std::fprintf(metrics_, "%s\n", metrics_csv_row(m, ssl_).c_str());
    std::fflush(metrics_);
  };
  h.on_prune_event = [this](const SalienceReport& r) {
    if (!prune_) {
      prune_ = std::fopen((fs::path(dir_) / "prune_log.jsonl").string().c_str(), "w");
      if (!prune_) throw config_error("cannot write prune_log.jsonl in " + dir_);
    }
    std::fprintf(prune_, "%s\n", salience_report_to_json(r).dump().c_str());
    std::fflush(prune_);
  };
  return h;
}

}  // namespace mcft
