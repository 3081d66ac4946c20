#include "mcft/evalharness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

namespace mcft {

std::string protocol_name(Protocol p) {
  return p == Protocol::full_few_shot ? "full_few_shot" : "n_way_m_shot";
}

Protocol protocol_from_name(const std::string& name) {
  if (name == "full_few_shot" || name == "full") return Protocol::full_few_shot;
  if (name == "n_way_m_shot" || name == "n_way") return Protocol::n_way_m_shot;
  throw config_error("unknown protocol: " + name);
}

FewShotSplit sample_split(const Dataset& ds, Protocol protocol, int n_way, int m_shot,
                          uint64_t seed) {
  const int C = ds.num_classes();
  if (m_shot < 1) throw protocol_error("m_shot must be >= 1");
  FewShotSplit split;
  split.protocol = protocol;
  split.m_shot = m_shot;
  split.seed = seed;

  std::vector<int> classes(C);
  std::iota(classes.begin(), classes.end(), 0);
  if (protocol == Protocol::n_way_m_shot) {
    if (n_way < 1 || n_way > C)
      throw protocol_error("n_way must lie in [1, num_classes]");
    Rng rng(mix_seed({seed, hash_str("classes")}));
    rng.shuffle(classes);
    classes.resize(n_way);
    std::sort(classes.begin(), classes.end());
    split.n_way = n_way;
  }
  split.selected_classes = classes;
  std::vector<uint8_t> selected(C, 0);
  for (int c : classes) selected[c] = 1;

  // Class-stratified support draw from the train partition.
  std::vector<std::vector<int>> per_class(C);
  for (int idx : ds.train_indices) {
    const auto& pc = ds.clouds[idx];
    if (!pc.label) throw protocol_error("unlabeled sample in train partition: " + pc.id);
    per_class[*pc.label].push_back(idx);
  }
  for (int c : classes) {
    if (static_cast<int>(per_class[c].size()) < m_shot)
      throw protocol_error("class '" + ds.class_names[c] + "' has " +
                           std::to_string(per_class[c].size()) + " train samples, need " +
                           std::to_string(m_shot));
    Rng rng(mix_seed({seed, hash_str("support"), static_cast<uint64_t>(c)}));
    std::vector<int> pool = per_class[c];
    rng.shuffle(pool);
    for (int j = 0; j < m_shot; ++j) split.support.push_back(pool[j]);
    for (size_t j = m_shot; j < pool.size(); ++j) split.pool.push_back(pool[j]);
  }
  std::sort(split.support.begin(), split.support.end());
  std::sort(split.pool.begin(), split.pool.end());

  for (int idx : ds.test_indices) {
    const auto& pc = ds.clouds[idx];
    if (pc.label && selected[*pc.label]) split.test.push_back(idx);
  }
  return split;
}

EvalResult evaluate(const EncoderState& state, const Tensor& head_w, const Tensor& head_b,
                    const Dataset& ds, const std::vector<int>& test_indices) {
  if (test_indices.empty()) throw protocol_error("evaluate: empty test set");
  if (state.config.num_classes != ds.num_classes())
    throw protocol_error("evaluate: model has " + std::to_string(state.config.num_classes) +
                         " classes, dataset has " + std::to_string(ds.num_classes()));
  const int n = static_cast<int>(test_indices.size());
  std::vector<int> pred(n, -1);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    const PointCloud& pc = ds.clouds[test_indices[i]];
    auto patches = tokenize_cloud(pc, state.config.num_patches, state.config.patch_points,
                                  eval_fps_salt(pc));
    auto fr = forward(state, head_w, head_b, embed(state, patches), false);
    int best = 0;
    for (int c = 1; c < state.config.num_classes; ++c)
      if (fr.logits[c] > fr.logits[best]) best = c;
    pred[i] = best;
  }
  EvalResult r;
  r.per_class.assign(ds.num_classes(), 0.0);
  r.per_class_count.assign(ds.num_classes(), 0);
  int correct = 0;
  for (int i = 0; i < n; ++i) {
    const auto& pc = ds.clouds[test_indices[i]];
    if (!pc.label) throw protocol_error("evaluate: unlabeled test sample " + pc.id);
    r.per_class_count[*pc.label] += 1;
    if (pred[i] == *pc.label) {
      ++correct;
      r.per_class[*pc.label] += 1.0;
    }
  }
  for (int c = 0; c < ds.num_classes(); ++c)
    if (r.per_class_count[c] > 0) r.per_class[c] /= r.per_class_count[c];
  r.overall = static_cast<double>(correct) / n;
  return r;
}

void RunSummary::recompute() {
  const int n = static_cast<int>(accuracies.size());
  mean = 0.0;
  stddev = 0.0;
  if (n == 0) return;
  for (double a : accuracies) mean += a;
  mean /= n;
  for (double a : accuracies) stddev += (a - mean) * (a - mean);
  stddev = std::sqrt(stddev / n);
  single_run = n == 1;
}

RunSummary repeat_runs(const std::function<double(uint64_t)>& experiment, int num_runs,
                       uint64_t base_seed, const std::string& protocol_desc) {
  if (num_runs < 1) throw validation_error("repeat_runs: num_runs must be >= 1");
  RunSummary s;
  s.protocol = protocol_desc;
  for (int r = 0; r < num_runs; ++r) {
    const uint64_t seed = base_seed + static_cast<uint64_t>(r);
    try {
      const double acc = experiment(seed);
      s.seeds.push_back(seed);
      s.accuracies.push_back(acc);
    } catch (const std::exception& e) {
      s.failures.push_back("seed " + std::to_string(seed) + ": " + e.what());
      log_warn("run failed (" + s.failures.back() + ")");
    }
  }
  s.recompute();
  return s;
}

namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(na) * std::sqrt(nb);
  return denom < 1e-30 ? 0.0 : dot / denom;
}

std::vector<double> layer_vector(const Tensor& layer_out, SimilarityVariant variant) {
  const int T = layer_out.dim(0), d = layer_out.dim(1);
  std::vector<double> v(d, 0.0);
  if (variant == SimilarityVariant::cls) {
    for (int c = 0; c < d; ++c) v[c] = layer_out.at(0, c);
  } else {
    for (int t = 0; t < T; ++t)
      for (int c = 0; c < d; ++c) v[c] += layer_out.at(t, c) / T;
  }
  return v;
}

}  // namespace

std::vector<double> trace_similarity(const std::vector<LayerTrace>& ta,
                                     const std::vector<LayerTrace>& tb,
                                     SimilarityVariant variant) {
  if (ta.size() != tb.size() || ta.empty())
    throw protocol_error("trace_similarity: probe count mismatch");
  const size_t L = ta[0].layer_outputs.size();
  std::vector<double> sim(L, 0.0);
  for (size_t p = 0; p < ta.size(); ++p) {
    if (ta[p].layer_outputs.size() != L || tb[p].layer_outputs.size() != L)
      throw protocol_error("trace_similarity: layer count mismatch");
    for (size_t l = 0; l < L; ++l)
      sim[l] += cosine(layer_vector(ta[p].layer_outputs[l], variant),
                       layer_vector(tb[p].layer_outputs[l], variant));
  }
  for (double& s : sim) s /= static_cast<double>(ta.size());
  return sim;
}

std::vector<double> layer_similarity(const EncoderState& a, const EncoderState& b,
                                     const std::vector<PointCloud>& probes,
                                     SimilarityVariant variant) {
  if (!(a.config == b.config))
    throw protocol_error("layer_similarity: encoder configs differ");
  if (a.layer_mask != b.layer_mask)
    throw protocol_error("layer_similarity: active-layer structure differs");
  if (probes.empty()) throw protocol_error("layer_similarity: no probe clouds");
  const int n = static_cast<int>(probes.size());
  std::vector<LayerTrace> ta(n), tb(n);
  Tensor dummy_w({a.config.embed_dim, a.config.num_classes});
  Tensor dummy_b({a.config.num_classes});
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    auto pa = tokenize_cloud(probes[i], a.config.num_patches, a.config.patch_points,
                             eval_fps_salt(probes[i]));
    ta[i] = *forward(a, dummy_w, dummy_b, embed(a, pa), true).trace;
    tb[i] = *forward(b, dummy_w, dummy_b, embed(b, pa), true).trace;
  }
  return trace_similarity(ta, tb, variant);
}

double measure_throughput(const EncoderState& state, const Tensor& head_w,
                          const Tensor& head_b, int batch_size, int warmup_iters,
                          int timed_iters, uint64_t seed) {
  if (timed_iters < 1) throw validation_error("measure_throughput: timed_iters must be >= 1");
  if (batch_size < 1) throw validation_error("measure_throughput: batch_size must be >= 1");
  // Fixed random token inputs, reused across iterations and trials.
  const auto& cfg = state.config;
  Rng rng(mix_seed({seed, hash_str("throughput")}));
  std::vector<PatchSet> inputs(batch_size);
  for (int i = 0; i < batch_size; ++i) {
    PatchSet ps;
    ps.centers = Tensor({cfg.num_patches, 3});
    ps.groups = Tensor({cfg.num_patches, cfg.patch_points, 3});
    for (int64_t j = 0; j < ps.centers.numel(); ++j) ps.centers[j] = rng.uniform(-1.0, 1.0);
    for (int64_t j = 0; j < ps.groups.numel(); ++j) ps.groups[j] = 0.2 * rng.uniform(-1.0, 1.0);
    inputs[i] = std::move(ps);
  }
  auto run_batch = [&]() {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < batch_size; ++i) {
      auto fr = forward(state, head_w, head_b, embed(state, inputs[i]), false);
      (void)fr;
    }
  };
  std::vector<double> fps;
  for (int trial = 0; trial < 3; ++trial) {
    for (int i = 0; i < warmup_iters; ++i) run_batch();
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < timed_iters; ++i) run_batch();
    const auto t1 = std::chrono::steady_clock::now();
    const double sec = std::chrono::duration<double>(t1 - t0).count();
    fps.push_back(static_cast<double>(batch_size) * timed_iters / std::max(sec, 1e-9));
  }
  std::sort(fps.begin(), fps.end());
  return fps[1];  // median of 3
}

void write_similarity_svg(const std::string& path,
                          const std::vector<std::pair<std::string, std::vector<double>>>& series) {
  const int W = 640, H = 400, ML = 60, MR = 20, MT = 30, MB = 50;
  size_t L = 0;
  for (const auto& [name, v] : series) L = std::max(L, v.size());
  if (L == 0) throw validation_error("write_similarity_svg: empty series");
  double lo = 1e300, hi = -1e300;
  for (const auto& [name, v] : series)
    for (double x : v) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  if (hi - lo < 1e-9) {
    hi += 0.05;
    lo -= 0.05;
  }
  auto X = [&](size_t i) {
    return ML + (W - ML - MR) * (L == 1 ? 0.5 : static_cast<double>(i) / (L - 1));
  };
  auto Y = [&](double v) { return MT + (H - MT - MB) * (1.0 - (v - lo) / (hi - lo)); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
  std::ofstream out(path);
  if (!out) throw validation_error("cannot write " + path);
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H
      << "'>\n<rect width='100%' height='100%' fill='white'/>\n";
  out << "<line x1='" << ML << "' y1='" << H - MB << "' x2='" << W - MR << "' y2='"
      << H - MB << "' stroke='black'/>\n";
  out << "<line x1='" << ML << "' y1='" << MT << "' x2='" << ML << "' y2='" << H - MB
      << "' stroke='black'/>\n";
  char buf[160];
  for (int t = 0; t <= 4; ++t) {
    const double v = lo + (hi - lo) * t / 4.0;
    std::snprintf(buf, sizeof(buf),
                  "<text x='%d' y='%.1f' font-size='11' text-anchor='end'>%.3f</text>\n",
                  ML - 6, Y(v) + 4, v);
    out << buf;
  }
  for (size_t i = 0; i < L; ++i) {
    std::snprintf(buf, sizeof(buf),
                  "<text x='%.1f' y='%d' font-size='11' text-anchor='middle'>%zu</text>\n",
                  X(i), H - MB + 16, i + 1);
    out << buf;
  }
  out << "<text x='" << (W / 2) << "' y='" << (H - 12)
      << "' font-size='12' text-anchor='middle'>layer</text>\n";
  int ci = 0;
  for (const auto& [name, v] : series) {
    const char* color = colors[ci % 5];
    out << "<polyline fill='none' stroke='" << color << "' stroke-width='2' points='";
    for (size_t i = 0; i < v.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.1f,%.1f ", X(i), Y(v[i]));
      out << buf;
    }
    out << "'/>\n";
    std::snprintf(buf, sizeof(buf),
                  "<text x='%d' y='%d' font-size='12' fill='%s'>%s</text>\n", W - MR - 150,
                  MT + 16 * (ci + 1), color, name.c_str());
    out << buf;
    ++ci;
  }
  out << "</svg>\n";
}

}  // namespace mcft
