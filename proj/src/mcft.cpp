#include "mcft/mcft.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mcft {

std::string method_name(TrainMethod m) {
  switch (m) {
    case TrainMethod::mcft:
      return "mcft";
    case TrainMethod::fft:
      return "fft";
    case TrainMethod::linear_probe:
      return "linear-probe";
    case TrainMethod::mcft_ssl:
      return "mcft-ssl";
  }
  return "?";
}

TrainMethod method_from_name(const std::string& name) {
  if (name == "mcft") return TrainMethod::mcft;
  if (name == "fft") return TrainMethod::fft;
  if (name == "linear-probe" || name == "linear_probe") return TrainMethod::linear_probe;
  if (name == "mcft-ssl" || name == "mcft_ssl") return TrainMethod::mcft_ssl;
  throw config_error("unknown training method: " + name);
}

void MCFTConfig::validate() const {
  if (alpha < 0.0 || alpha > 1.0) throw config_error("alpha must lie in [0,1]");
  if (lambda < 0.0) throw config_error("lambda must be >= 0");
  if (warmup_epochs < 0) throw config_error("warmup_epochs must be >= 0");
  if (warmup_epochs >= 50) throw config_error("warmup_epochs must be < 50");
  if (total_epochs < 1) throw config_error("total_epochs must be >= 1");
  if (warmup_epochs > total_epochs)
    throw config_error("warmup_epochs must not exceed total_epochs");
  if (batch_size < 1) throw config_error("batch_size must be >= 1");
  if (lr <= 0.0) throw config_error("lr must be > 0");
  if (weight_decay < 0.0) throw config_error("weight_decay must be >= 0");
}

std::set<int> MCFTConfig::resolve_trainable_layers(int num_layers) const {
  if (trainable_layers) {
    for (int i : *trainable_layers)
      if (i < 0 || i >= num_layers)
        throw config_error("trainable layer index out of range: " + std::to_string(i));
    return *trainable_layers;
  }
  const int n = (num_layers + 2) / 3;  // ceil(L/3), the deepest third
  std::set<int> s;
  for (int i = num_layers - n; i < num_layers; ++i) s.insert(i);
  return s;
}

double align_loss(const Tensor& es, const Tensor& et) {
  autodiff::Graph g;
  return g.val(align_loss_node(g, g.input(es, false), et)).item();
}

autodiff::Var align_loss_node(autodiff::Graph& g, autodiff::Var es, Tensor et) {
  auto cosv = g.cosine_to_const(es, std::move(et));
  return g.combine({cosv}, {-1.0}, 1.0);
}

double sup_loss(const Tensor& logits, int label) {
  autodiff::Graph g;
  return g.val(sup_loss_node(g, g.input(logits, false), label)).item();
}

autodiff::Var sup_loss_node(autodiff::Graph& g, autodiff::Var logits, int label) {
  const Tensor& lv = g.val(logits);
  const int C = lv.shape().back();
  if (label < 0 || label >= C)
    throw validation_error("label " + std::to_string(label) + " out of range [0," +
                           std::to_string(C) + ")");
  auto lsm = g.log_softmax(logits);
  return g.combine({g.pick(lsm, 0, label)}, {-1.0});
}

void ema_update(EncoderState& teacher, const EncoderState& student, double alpha) {
  if (teacher.params.size() != student.params.size())
    throw integrity_error("ema_update: parameter schema size mismatch");
  auto ti = teacher.params.begin();
  auto si = student.params.begin();
  for (; ti != teacher.params.end(); ++ti, ++si) {
    if (ti->first != si->first || !ti->second.same_shape(si->second))
      throw integrity_error("ema_update: parameter schema mismatch at " + ti->first);
    Tensor& t = ti->second;
    const Tensor& s = si->second;
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = alpha * t[i] + (1.0 - alpha) * s[i];
  }
}

PatchSet tokenize_cloud(const PointCloud& cloud, int num_patches, int patch_points,
                        uint64_t fps_salt, bool normalize_first) {
  const PointCloud* src = &cloud;
  PointCloud normed;
  if (normalize_first) {
    normed = normalize_cloud(cloud);
    src = &normed;
  }
  const int M = src->size();
  if (M < num_patches || M < patch_points)
    throw validation_error("cloud too small to tokenize: M=" + std::to_string(M));
  const int start = static_cast<int>(mix_seed({fps_salt, hash_str(cloud.id)}) %
                                     static_cast<uint64_t>(M));
  auto centers = farthest_point_sample(*src, num_patches, start);
  return knn_group(*src, centers, patch_points);
}

namespace detail {

bool decays(const std::string& name) {
  return name.find(".w") != std::string::npos;  // projection weights only
}

std::set<std::string> trainable_param_names(const EncoderConfig& cfg, TrainMethod method,
                                            const std::set<int>& layers) {
  std::set<std::string> out;
  if (method == TrainMethod::linear_probe) return out;  // head only
  for (const auto& [name, shape] : param_schema(cfg)) {
    (void)shape;
    if (name.rfind("layers.", 0) == 0) {
      const size_t dot = name.find('.', 7);
      const int layer = std::stoi(name.substr(7, dot - 7));
      const bool on = method == TrainMethod::fft || layers.count(layer) > 0;
      if (on) out.insert(name);
    } else {
      out.insert(name);  // embeddings + final norm
    }
  }
  return out;
}

SampleForward supervised_sample_loss(autodiff::Graph& g, const EncoderState& student,
                                     const model::ParamLeaves& pl, autodiff::Var head_w,
                                     autodiff::Var head_b, const EncoderState* teacher,
                                     const TokenizedSample& sample, double lambda,
                                     bool force_layer_grads) {
  SampleForward out;
  auto e0 = model::embed_tokens(g, student.config, pl, sample.patches);
  auto fv = model::encoder_forward(g, student, pl, e0);
  out.layer_out = fv.layer_out;
  if (force_layer_grads)
    for (auto v : out.layer_out) g.force_grad(v);
  out.cls = fv.cls;
  out.logits = model::apply_head(g, fv.cls, head_w, head_b);

  std::vector<autodiff::Var> terms;
  std::vector<double> weights;
  if (teacher) {
    auto tpl = model::make_leaves(g, *teacher);  // constants: stop-gradient target
    auto te0 = model::embed_tokens(g, teacher->config, tpl, sample.patches);
    auto tfv = model::encoder_forward(g, *teacher, tpl, te0);
    out.align = align_loss_node(g, fv.cls, g.val(tfv.cls));
    terms.push_back(out.align);
    weights.push_back(1.0);
  }
  if (sample.label >= 0 && lambda != 0.0) {
    out.sup = sup_loss_node(g, out.logits, sample.label);
    terms.push_back(out.sup);
    weights.push_back(lambda);
  } else if (sample.label >= 0) {
    out.sup = sup_loss_node(g, out.logits, sample.label);  // logged, not optimized
  }
  if (terms.empty())
    out.loss = g.combine({}, {});
  else
    out.loss = g.combine(terms, weights);
  return out;
}

double effective_lambda(const TrainState& st) {
  return (st.method == TrainMethod::mcft || st.method == TrainMethod::mcft_ssl)
             ? st.cfg.lambda
             : 1.0;
}

BatchGrads supervised_batch_grads(const TrainState& st,
                                  const std::vector<TokenizedSample>& batch) {
  const int B = static_cast<int>(batch.size());
  const EncoderState* teacher = st.has_teacher() ? &st.teacher : nullptr;
  const double lambda = effective_lambda(st);
  BatchGrads out;
  out.per_sample.resize(B);
  out.align.assign(B, 0.0);
  out.sup.assign(B, 0.0);
  std::string fault;
  // Per-sample graphs run in parallel; callers reduce in sample order, so
  // results do not depend on the thread count.
#pragma omp parallel for schedule(dynamic)
  for (int s = 0; s < B; ++s) {
    try {
      autodiff::Graph g;
      auto pl = model::make_leaves(g, st.student, &st.trainable);
      auto hw = g.input(st.head_w, true);
      auto hb = g.input(st.head_b, true);
      auto sf = detail::supervised_sample_loss(g, st.student, pl, hw, hb, teacher,
                                               batch[s], lambda);
      if (!g.val(sf.loss).all_finite()) throw numeric_error("non-finite loss");
      g.backward(sf.loss);
      auto& grads = out.per_sample[s];
      for (const auto& name : st.trainable) grads.emplace(name, g.grad(pl.at(name)));
      grads.emplace("head.w", g.grad(hw));
      grads.emplace("head.b", g.grad(hb));
      if (sf.align >= 0) out.align[s] = g.val(sf.align).item();
      if (sf.sup >= 0) out.sup[s] = g.val(sf.sup).item();
    } catch (const std::exception& e) {
#pragma omp critical
      fault = e.what();
    }
  }
  if (!fault.empty()) throw numeric_error("training step aborted: " + fault);
  return out;
}

}  // namespace detail

namespace {

struct GradBuffer {
  std::map<std::string, Tensor> grads;  // trainable encoder names + head.w/head.b

  void init(const TrainState& st) {
    for (const auto& name : st.trainable)
      grads.emplace(name, Tensor::zeros(st.student.params.at(name).shape()));
    grads.emplace("head.w", Tensor::zeros(st.head_w.shape()));
    grads.emplace("head.b", Tensor::zeros(st.head_b.shape()));
  }

  void add(const std::string& name, const Tensor& g, double w) {
    Tensor& dst = grads.at(name);
    for (int64_t i = 0; i < dst.numel(); ++i) dst[i] += w * g[i];
  }
};

}  // namespace

TrainState init_train_state(const MCFTConfig& cfg, TrainMethod method,
                            const EncoderState& checkpoint) {
  cfg.validate();
  TrainState st;
  st.method = method;
  st.cfg = cfg;
  st.student = checkpoint;
  if (method == TrainMethod::mcft || method == TrainMethod::mcft_ssl)
    st.teacher = checkpoint;
  init_head(checkpoint.config, cfg.seed, st.head_w, st.head_b);
  st.opt = AdamW(cfg.lr, cfg.weight_decay);
  st.trainable = detail::trainable_param_names(
      checkpoint.config, method, cfg.resolve_trainable_layers(checkpoint.config.num_layers));
  st.phase = cfg.warmup_epochs == 0 ? Phase::ema : Phase::warmup;
  return st;
}

StepLosses mcft_step(TrainState& st, const std::vector<TokenizedSample>& batch) {
  if (batch.empty()) throw validation_error("mcft_step: empty batch");
  const int B = static_cast<int>(batch.size());
  const double invB = 1.0 / B;

  StepLosses losses;
  GradBuffer buf;
  buf.init(st);
  auto bg = detail::supervised_batch_grads(st, batch);
  for (int s = 0; s < B; ++s) {
    for (auto& [name, g] : bg.per_sample[s]) buf.add(name, g, invB);
    losses.align += bg.align[s] * invB;
    losses.sup += bg.sup[s] * invB;
  }
  losses.total = losses.align + detail::effective_lambda(st) * losses.sup;

  for (const auto& name : st.trainable)
    st.opt.step(name, st.student.params.at(name), buf.grads.at(name),
                detail::decays(name));
  st.opt.step("head.w", st.head_w, buf.grads.at("head.w"), detail::decays("head.w"));
  st.opt.step("head.b", st.head_b, buf.grads.at("head.b"), false);

  if (st.has_teacher() && st.phase == Phase::ema)
    ema_update(st.teacher, st.student, st.cfg.alpha);
  return losses;
}

EncoderState pretrain_masked(const EncoderConfig& cfg, const PretrainConfig& pc,
                             const std::vector<PointCloud>& unlabeled,
                             std::vector<double>* epoch_loss_curve) {
  if (!(pc.mask_ratio > 0.0 && pc.mask_ratio < 1.0))
    throw validation_error("mask_ratio must lie in the open interval (0,1)");
  if (unlabeled.empty()) throw validation_error("pretrain_masked: no data");
  cfg.validate();

  EncoderState enc = init_encoder(cfg, pc.seed);
  // Per-patch decoder plus the mask token live only during pretraining.
  std::map<std::string, Tensor> dec;
  {
    Rng rng(mix_seed({pc.seed, hash_str("decoder_init")}));
    const int d = cfg.embed_dim;
    auto rand_t = [&](std::vector<int> shape) {
      Tensor t(std::move(shape));
      for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.trunc_normal(0.02);
      t.round_to_f32();
      return t;
    };
    dec.emplace("decoder.mask_token", rand_t({1, d}));
    dec.emplace("decoder.w1", rand_t({d, d}));
    dec.emplace("decoder.b1", Tensor({d}));
    dec.emplace("decoder.w2", rand_t({d, cfg.patch_points * 3}));
    dec.emplace("decoder.b2", Tensor({cfg.patch_points * 3}));
  }

  // Tokenize once; masks are drawn fresh per (epoch, sample).
  const int n = static_cast<int>(unlabeled.size());
  std::vector<TokenizedSample> toks(n);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    toks[i].patches = tokenize_cloud(unlabeled[i], cfg.num_patches, cfg.patch_points,
                                     mix_seed({pc.seed, hash_str("fps")}));
  }

  std::set<std::string> enc_trainable;
  for (const auto& [name, shape] : param_schema(cfg)) {
    (void)shape;
    enc_trainable.insert(name);
  }

  AdamW opt(pc.lr, pc.weight_decay);
  const int m = cfg.num_patches;
  const int masked_count =
      std::clamp(static_cast<int>(std::lround(pc.mask_ratio * m)), 1, m - 1);

  for (int epoch = 0; epoch < pc.epochs; ++epoch) {
    opt.set_lr(cosine_lr(pc.lr, epoch, pc.epochs));
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng order_rng(mix_seed({pc.seed, hash_str("order"), static_cast<uint64_t>(epoch)}));
    order_rng.shuffle(order);

    double epoch_loss = 0.0;
    int steps = 0;
    for (int b0 = 0; b0 < n; b0 += pc.batch_size) {
      const int B = std::min(pc.batch_size, n - b0);
      const double invB = 1.0 / B;
      std::vector<std::map<std::string, Tensor>> sample_grads(B);
      std::vector<double> sample_loss(B, 0.0);
      std::string fault;
#pragma omp parallel for schedule(dynamic)
      for (int s = 0; s < B; ++s) {
        try {
          const int idx = order[b0 + s];
          Rng mask_rng(mix_seed({pc.seed, hash_str("mask"), static_cast<uint64_t>(epoch),
                                 static_cast<uint64_t>(idx)}));
          std::vector<int> perm(m);
          std::iota(perm.begin(), perm.end(), 0);
          mask_rng.shuffle(perm);
          std::vector<uint8_t> patch_mask(m, 0);
          for (int j = 0; j < masked_count; ++j) patch_mask[perm[j]] = 1;

          autodiff::Graph g;
          auto pl = model::make_leaves(g, enc, &enc_trainable);
          std::map<std::string, autodiff::Var> dv;
          for (const auto& [name, t] : dec) dv.emplace(name, g.input(t, true));
          auto e0 = model::embed_tokens(g, cfg, pl, toks[idx].patches, &patch_mask,
                                        dv.at("decoder.mask_token"));
          auto fv = model::encoder_forward(g, enc, pl, e0);
          // Decode each masked token into k relative points.
          auto h = g.gelu(g.add_bias(g.matmul(fv.tokens_final, dv.at("decoder.w1")),
                                     dv.at("decoder.b1")));
          auto pred = g.add_bias(g.matmul(h, dv.at("decoder.w2")), dv.at("decoder.b2"));
          std::vector<autodiff::Var> chamfers;
          for (int p = 0; p < m; ++p) {
            if (!patch_mask[p]) continue;
            auto rowv = g.reshape(g.row(pred, p + 1), {cfg.patch_points, 3});
            Tensor target({cfg.patch_points, 3});
            for (int j = 0; j < cfg.patch_points; ++j)
              for (int c = 0; c < 3; ++c) target.at(j, c) = toks[idx].patches.groups.at(p, j, c);
            chamfers.push_back(g.chamfer_to_const(rowv, std::move(target)));
          }
          auto loss = g.combine(chamfers, std::vector<double>(chamfers.size(),
                                                              1.0 / chamfers.size()));
          if (!g.val(loss).all_finite()) throw numeric_error("non-finite loss");
          g.backward(loss);
          auto& grads = sample_grads[s];
          for (const auto& name : enc_trainable) grads.emplace(name, g.grad(pl.at(name)));
          for (const auto& [name, v] : dv) grads.emplace(name, g.grad(v));
          sample_loss[s] = g.val(loss).item();
        } catch (const std::exception& e) {
#pragma omp critical
          fault = e.what();
        }
      }
      if (!fault.empty()) throw numeric_error("pretraining step aborted: " + fault);

      std::map<std::string, Tensor> acc;
      for (int s = 0; s < B; ++s)
        for (auto& [name, g] : sample_grads[s]) {
          auto it = acc.find(name);
          if (it == acc.end()) it = acc.emplace(name, Tensor::zeros(g.shape())).first;
          for (int64_t i = 0; i < g.numel(); ++i) it->second[i] += invB * g[i];
        }
      for (auto& [name, g] : acc) {
        Tensor& target = name.rfind("decoder.", 0) == 0 ? dec.at(name) : enc.params.at(name);
        opt.step(name, target, g, detail::decays(name));
      }
      for (int s = 0; s < B; ++s) epoch_loss += sample_loss[s];
      ++steps;
    }
    if (epoch_loss_curve) epoch_loss_curve->push_back(epoch_loss / n);
  }

  // Canonicalize to the checkpoint representation.
  for (auto& [name, t] : enc.params) t.round_to_f32();
  return enc;
}

}  // namespace mcft
