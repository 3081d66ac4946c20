#include "mcft/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <memory>
#include <numeric>

namespace mcft {

namespace {

struct GradAccum {
  std::map<std::string, Tensor> grads;

  void init(const TrainState& st) {
    for (const auto& name : st.trainable)
      grads.emplace(name, Tensor::zeros(st.student.params.at(name).shape()));
    grads.emplace("head.w", Tensor::zeros(st.head_w.shape()));
    grads.emplace("head.b", Tensor::zeros(st.head_b.shape()));
  }

  void add(const std::map<std::string, Tensor>& sample, double w) {
    for (const auto& [name, g] : sample) {
      Tensor& dst = grads.at(name);
      for (int64_t i = 0; i < dst.numel(); ++i) dst[i] += w * g[i];
    }
  }
};

void apply_update(TrainState& st, const GradAccum& acc) {
  for (const auto& name : st.trainable)
    st.opt.step(name, st.student.params.at(name), acc.grads.at(name),
                detail::decays(name));
  st.opt.step("head.w", st.head_w, acc.grads.at("head.w"), true);
  st.opt.step("head.b", st.head_b, acc.grads.at("head.b"), false);
  if (st.has_teacher() && st.phase == Phase::ema)
    ema_update(st.teacher, st.student, st.cfg.alpha);
}

// Cyclic unlabeled sampler: reshuffled once per epoch, wraps within the
// epoch when the pool is smaller than the demand.
struct UnlabeledStream {
  std::vector<int> order;  // into the unlabeled pool
  size_t cursor = 0;

  void reshuffle(uint64_t seed, size_t pool_size) {
    order.resize(pool_size);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(order);
    cursor = 0;
  }

  std::vector<int> draw(int n) {
    std::vector<int> out(n);
    for (int i = 0; i < n; ++i) out[i] = order[(cursor + i) % order.size()];
    cursor = (cursor + n) % order.size();
    return out;
  }
};

struct UnsupStepOut {
  std::vector<std::map<std::string, Tensor>> per_sample;
  std::vector<unsup::UnsupSampleOut> outs;
  double contrastive = 0.0;
};

/// Unlabeled half of an SSL step. Phase A builds per-sample graphs in
/// parallel; the contrastive pass couples samples and seeds each graph's
/// backward; gradients are extracted in parallel and reduced by the caller
/// in pool order.
UnsupStepOut unsup_step(const TrainState& st, const SemiConfig& sc,
                        const Dataset& data, const std::vector<int>& pool,
                        const std::vector<int>& draw, std::vector<uint8_t>& hard_flags,
                        int epoch, bool salience_mode,
                        std::vector<std::vector<std::vector<autodiff::Var>>>* captured,
                        std::vector<std::unique_ptr<autodiff::Graph>>* graphs_out) {
  const int n = static_cast<int>(draw.size());
  const double w_u = sc.omega / n;
  UnsupStepOut out;
  out.per_sample.resize(n);
  out.outs.resize(n);
  std::vector<std::unique_ptr<autodiff::Graph>> graphs(n);
  std::vector<autodiff::Var> head_w_vars(n), head_b_vars(n);
  std::vector<model::ParamLeaves> leaves(n);
  std::string fault;

#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    try {
      const int pidx = draw[i];
      const PointCloud& cloud = data.clouds[pool[pidx]];
      const uint64_t view_seed = mix_seed({st.cfg.seed, hash_str("views"),
                                           static_cast<uint64_t>(epoch),
                                           static_cast<uint64_t>(pidx)});
      const bool flagged = sc.enable_aha && hard_flags[pidx];
      auto views = unsup::make_views(cloud, st.student.config, view_seed, flagged,
                                     sc.aha_extra_drop);
      graphs[i] = std::make_unique<autodiff::Graph>();
      autodiff::Graph& g = *graphs[i];
      leaves[i] = model::make_leaves(g, st.student, &st.trainable);
      head_w_vars[i] = g.input(st.head_w, true);
      head_b_vars[i] = g.input(st.head_b, true);
      out.outs[i] = unsup::build_unsup_sample(
          g, st.student, leaves[i], head_w_vars[i], head_b_vars[i],
          st.has_teacher() ? &st.teacher : nullptr, views, sc, sc.tau, w_u,
          salience_mode);
    } catch (const std::exception& e) {
#pragma omp critical
      fault = e.what();
    }
  }
  if (!fault.empty()) throw numeric_error("unlabeled step aborted: " + fault);

  // Cross-sample contrastive pass; gradients seed the per-sample backwards.
  std::vector<std::vector<std::pair<autodiff::Var, Tensor>>> seeds(n);
  if (sc.enable_contrastive) {
    std::vector<Tensor> emb_w(n), emb_s(n);
    for (int i = 0; i < n; ++i) {
      emb_w[i] = graphs[i]->val(out.outs[i].cls_w);
      emb_s[i] = graphs[i]->val(out.outs[i].cls_s);
    }
    auto con = unsup::contrastive_pairs(emb_w, emb_s, sc.temperature, sc.omega);
    if (!con.skipped) {
      out.contrastive = con.value;
      for (int i = 0; i < n; ++i) {
        seeds[i].push_back({out.outs[i].cls_w, con.grad_w[i]});
        seeds[i].push_back({out.outs[i].cls_s, con.grad_s[i]});
      }
    }
  }

#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    try {
      autodiff::Graph& g = *graphs[i];
      g.backward(out.outs[i].loss, seeds[i]);
      auto& grads = out.per_sample[i];
      for (const auto& name : st.trainable)
        grads.emplace(name, g.grad(leaves[i].at(name)));
      grads.emplace("head.w", g.grad(head_w_vars[i]));
      grads.emplace("head.b", g.grad(head_b_vars[i]));
    } catch (const std::exception& e) {
#pragma omp critical
      fault = e.what();
    }
  }
  if (!fault.empty()) throw numeric_error("unlabeled backward aborted: " + fault);

  if (captured) {
    captured->resize(n);
    for (int i = 0; i < n; ++i) (*captured)[i] = out.outs[i].layer_out_views;
  }
  if (graphs_out) *graphs_out = std::move(graphs);

  // Next-epoch curriculum flags: confidently-correct samples get the extra
  // dropout stage.
  if (!salience_mode) {
    for (int i = 0; i < n; ++i) {
      const int pidx = draw[i];
      hard_flags[pidx] = out.outs[i].gated && out.outs[i].strong_correct ? 1 : 0;
    }
  }
  return out;
}

/// Salience over the full step loss (labeled + unlabeled terms for SSL runs):
/// mean |dL/dE_i| across every captured student forward.
std::vector<double> step_salience(const TrainState& st, const SemiConfig& sc,
                                  bool ssl_active, const Dataset& data,
                                  const std::vector<TokenizedSample>& labeled_toks,
                                  const std::vector<int>& pool,
                                  std::vector<uint8_t>& hard_flags, int epoch,
                                  int salience_batches, Rng& batch_rng,
                                  UnlabeledStream& stream) {
  const int L = st.student.config.num_layers;
  std::vector<double> abs_sum(L, 0.0);
  std::vector<int64_t> counts(L, 0);
  const int64_t per_tensor =
      static_cast<int64_t>(st.student.config.tokens()) * st.student.config.embed_dim;

  for (int b = 0; b < salience_batches; ++b) {
    // Fresh labeled batch.
    std::vector<TokenizedSample> batch;
    for (int j = 0; j < st.cfg.batch_size; ++j)
      batch.push_back(labeled_toks[batch_rng.below(labeled_toks.size())]);
    const int B = static_cast<int>(batch.size());
    const double invB = 1.0 / B;
    const EncoderState* teacher = st.has_teacher() ? &st.teacher : nullptr;

    std::vector<std::vector<double>> lab_sums(B, std::vector<double>(L, 0.0));
    std::string fault;
#pragma omp parallel for schedule(dynamic)
    for (int s = 0; s < B; ++s) {
      try {
        autodiff::Graph g;
        auto pl = model::make_leaves(g, st.student, &st.trainable);
        auto hw = g.input(st.head_w, false);
        auto hb = g.input(st.head_b, false);
        auto sf = detail::supervised_sample_loss(g, st.student, pl, hw, hb, teacher,
                                                 batch[s], detail::effective_lambda(st),
                                                 /*force_layer_grads=*/true);
        auto scaled = g.combine({sf.loss}, {invB});
        g.backward(scaled);
        for (int l = 0; l < L; ++l) {
          if (!st.student.layer_mask[l]) continue;
          const Tensor& gl = g.grad(sf.layer_out[l]);
          double acc = 0.0;
          for (int64_t i = 0; i < gl.numel(); ++i) acc += std::fabs(gl[i]);
          lab_sums[s][l] = acc;
        }
      } catch (const std::exception& e) {
#pragma omp critical
        fault = e.what();
      }
    }
    if (!fault.empty()) throw numeric_error("salience pass aborted: " + fault);
    for (int l = 0; l < L; ++l) {
      if (!st.student.layer_mask[l]) continue;
      for (int s = 0; s < B; ++s) abs_sum[l] += lab_sums[s][l];
      counts[l] += static_cast<int64_t>(B) * per_tensor;
    }

    if (ssl_active) {
      const int muB = sc.mu * st.cfg.batch_size;
      auto draw = stream.draw(muB);
      std::vector<std::vector<std::vector<autodiff::Var>>> captured;
      std::vector<std::unique_ptr<autodiff::Graph>> graphs;
      auto us = unsup_step(st, sc, data, pool, draw, hard_flags, epoch,
                           /*salience_mode=*/true, &captured, &graphs);
      (void)us;
      for (int i = 0; i < muB; ++i) {
        for (const auto& view_layers : captured[i]) {
          for (int l = 0; l < L; ++l) {
            if (!st.student.layer_mask[l]) continue;
            const Tensor& gl = graphs[i]->grad(view_layers[l]);
            double acc = 0.0;
            for (int64_t j = 0; j < gl.numel(); ++j) acc += std::fabs(gl[j]);
            abs_sum[l] += acc;
            counts[l] += per_tensor;
          }
        }
      }
    }
  }

  std::vector<double> raw(L, std::nan(""));
  for (int l = 0; l < L; ++l)
    if (st.student.layer_mask[l]) raw[l] = abs_sum[l] / static_cast<double>(counts[l]);
  return raw;
}

}  // namespace

TrainResult run_training(const TrainRequest& req) {
  if (!req.checkpoint) throw config_error("run_training: missing checkpoint");
  if (!req.data) throw config_error("run_training: missing dataset");
  req.cfg.validate();
  req.checkpoint->config.validate();
  if (req.data->num_classes() != req.checkpoint->config.num_classes)
    throw config_error("dataset has " + std::to_string(req.data->num_classes()) +
                       " classes but the checkpoint expects " +
                       std::to_string(req.checkpoint->config.num_classes));
  if (req.labeled_indices.empty()) throw config_error("run_training: no labeled data");
  if (req.prune) req.prune->validate(req.checkpoint->config.num_layers);

  bool ssl_active = req.method == TrainMethod::mcft_ssl;
  SemiConfig sc = req.semi;
  if (ssl_active) {
    sc.validate();
    if (req.unlabeled_indices.empty()) {
      log_info("semi-supervised run with an empty unlabeled pool; "
               "training degenerates to supervised MCFT");
      ssl_active = false;
    } else if (sc.omega == 0.0) {
      log_info("omega = 0: unlabeled stream disabled; training matches "
               "supervised MCFT exactly");
      ssl_active = false;
    }
  }

  TrainState st = init_train_state(req.cfg, req.method, *req.checkpoint);
  const EncoderConfig& ecfg = st.student.config;
  const MCFTConfig& cfg = st.cfg;

  // Labeled samples are tokenized once (run-seeded FPS start).
  const int nlab = static_cast<int>(req.labeled_indices.size());
  std::vector<TokenizedSample> toks(nlab);
  {
    std::string fault;
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < nlab; ++i) {
      try {
        const PointCloud& pc = req.data->clouds[req.labeled_indices[i]];
        if (!pc.label) throw validation_error("labeled sample without label: " + pc.id);
        toks[i].patches = tokenize_cloud(pc, ecfg.num_patches, ecfg.patch_points,
                                         mix_seed({cfg.seed, hash_str("fps")}));
        toks[i].label = *pc.label;
      } catch (const std::exception& e) {
#pragma omp critical
        fault = e.what();
      }
    }
    if (!fault.empty()) throw validation_error("tokenization failed: " + fault);
  }

  std::vector<uint8_t> hard_flags(req.unlabeled_indices.size(), 0);
  UnlabeledStream stream;
  TrainResult result;
  result.budget_remaining = req.prune ? req.prune->budget : 0;
  const int prune_start = req.prune ? req.prune->resolved_start(cfg.warmup_epochs) : 0;

  for (int epoch = 0; epoch < cfg.total_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    st.epoch = epoch;
    st.phase = epoch < cfg.warmup_epochs ? Phase::warmup : Phase::ema;
    st.opt.set_lr(cosine_lr(cfg.lr, epoch, cfg.total_epochs));
    if (ssl_active)
      stream.reshuffle(mix_seed({cfg.seed, hash_str("ulb_order"), static_cast<uint64_t>(epoch)}),
                       req.unlabeled_indices.size());

    // Pruning event (before the epoch's steps so training adapts to the new
    // mask immediately).
    if (req.prune && result.budget_remaining > 0 && epoch >= prune_start &&
        (epoch - prune_start) % req.prune->interval == 0) {
      Rng srng(mix_seed({cfg.seed, hash_str("salience"), static_cast<uint64_t>(epoch)}));
      UnlabeledStream sstream = stream;  // salience draws do not advance training draws
      auto raw = step_salience(st, sc, ssl_active, *req.data, toks, req.unlabeled_indices,
                               hard_flags, epoch, req.prune->salience_batches, srng, sstream);
      auto normalized = normalize_salience(raw, st.student.layer_mask, req.prune->epsilon);
      SalienceReport report;
      report.raw = raw;
      report.normalized = normalized;
      report.epoch = epoch;
      report.batches_used = req.prune->salience_batches;
      report.removed = update_mask(normalized, st.student.layer_mask,
                                   req.prune->layers_per_event, result.budget_remaining);
      result.budget_remaining -= static_cast<int>(report.removed.size());
      if (st.has_teacher()) st.teacher.layer_mask = st.student.layer_mask;
      const CostReport costs = count_costs(st.student);
      report.new_param_count = costs.param_count;
      report.new_flops = costs.flops_per_forward;
      result.prune_log.push_back(report);
      if (req.hooks.on_prune_event) req.hooks.on_prune_event(report);
    }

    std::vector<int> order(nlab);
    std::iota(order.begin(), order.end(), 0);
    Rng order_rng(mix_seed({cfg.seed, hash_str("order"), static_cast<uint64_t>(epoch)}));
    order_rng.shuffle(order);

    EpochMetrics em;
    em.epoch = epoch;
    em.phase = st.phase;
    em.lr = st.opt.lr();
    double seen = 0.0, useen = 0.0;
    for (int b0 = 0; b0 < nlab; b0 += cfg.batch_size) {
      const int B = std::min(cfg.batch_size, nlab - b0);
      std::vector<TokenizedSample> batch(B);
      for (int j = 0; j < B; ++j) batch[j] = toks[order[b0 + j]];

      if (!ssl_active) {
        auto losses = mcft_step(st, batch);
        em.loss_align += losses.align * B;
        em.loss_sup += losses.sup * B;
        em.loss_total += losses.total * B;
        seen += B;
      } else {
        const double invB = 1.0 / B;
        GradAccum acc;
        acc.init(st);
        auto bg = detail::supervised_batch_grads(st, batch);
        double align = 0.0, sup = 0.0;
        for (int s = 0; s < B; ++s) {
          acc.add(bg.per_sample[s], invB);
          align += bg.align[s] * invB;
          sup += bg.sup[s] * invB;
        }
        const int muB = sc.mu * B;
        auto draw = stream.draw(muB);
        auto us = unsup_step(st, sc, *req.data, req.unlabeled_indices, draw, hard_flags,
                             epoch, /*salience_mode=*/false, nullptr, nullptr);
        double ualign = 0.0, uem = 0.0, uinv = 0.0, uaha = 0.0;
        int gated = 0;
        for (int i = 0; i < muB; ++i) {
          acc.add(us.per_sample[i], 1.0);  // weights already folded in
          ualign += us.outs[i].align / muB;
          uem += us.outs[i].em / muB;
          uinv += us.outs[i].inverse / muB;
          uaha += us.outs[i].aha / muB;
          gated += us.outs[i].gated ? 1 : 0;
        }
        apply_update(st, acc);
        const double total = align + detail::effective_lambda(st) * sup +
                             sc.omega * (ualign + uem + uinv + uaha + us.contrastive);
        em.loss_align += align * B;
        em.loss_sup += sup * B;
        em.loss_total += total * B;
        em.loss_em += uem * B;
        em.mask_rate += static_cast<double>(gated) / muB * B;
        em.loss_inverse += uinv * B;
        em.loss_contrastive += us.contrastive * B;
        em.loss_aha += uaha * B;
        seen += B;
        useen += B;
      }
    }
    em.loss_align /= seen;
    em.loss_sup /= seen;
    em.loss_total /= seen;
    if (useen > 0) {
      em.loss_em /= useen;
      em.mask_rate /= useen;
      em.loss_inverse /= useen;
      em.loss_contrastive /= useen;
      em.loss_aha /= useen;
    }

    const bool last = epoch == cfg.total_epochs - 1;
    if (!req.eval_indices.empty() &&
        (last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0))) {
      em.eval_acc =
          evaluate(st.student, st.head_w, st.head_b, *req.data, req.eval_indices).overall;
    }
    em.wall_sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    st.history.push_back(em);
    if (req.hooks.on_epoch) req.hooks.on_epoch(em);
  }

  if (req.prune && result.budget_remaining > 0)
    log_warn("pruning budget not exhausted before training ended; remaining = " +
             std::to_string(result.budget_remaining));
  result.state = std::move(st);
  return result;
}

TrainResult train_mcft(const MCFTConfig& cfg, const EncoderState& checkpoint,
                       const Dataset& data, const std::vector<int>& labeled,
                       const std::vector<int>& eval_indices, const RunHooks& hooks) {
  TrainRequest req;
  req.method = TrainMethod::mcft;
  req.cfg = cfg;
  req.checkpoint = &checkpoint;
  req.data = &data;
  req.labeled_indices = labeled;
  req.eval_indices = eval_indices;
  req.hooks = hooks;
  return run_training(req);
}

TrainResult train_baseline(const MCFTConfig& cfg, const EncoderState& checkpoint,
                           const Dataset& data, const std::vector<int>& labeled,
                           TrainMethod mode, const std::vector<int>& eval_indices,
                           const RunHooks& hooks) {
  if (mode != TrainMethod::fft && mode != TrainMethod::linear_probe)
    throw config_error("train_baseline: mode must be fft or linear-probe");
  TrainRequest req;
  req.method = mode;
  req.cfg = cfg;
  req.checkpoint = &checkpoint;
  req.data = &data;
  req.labeled_indices = labeled;
  req.eval_indices = eval_indices;
  req.hooks = hooks;
  return run_training(req);
}

TrainResult semi_train(const MCFTConfig& cfg, const SemiConfig& semi,
                       const EncoderState& checkpoint, const Dataset& data,
                       const std::vector<int>& labeled, const std::vector<int>& unlabeled,
                       const std::vector<int>& eval_indices, const RunHooks& hooks) {
  TrainRequest req;
  req.method = TrainMethod::mcft_ssl;
  req.cfg = cfg;
  req.semi = semi;
  req.checkpoint = &checkpoint;
  req.data = &data;
  req.labeled_indices = labeled;
  req.unlabeled_indices = unlabeled;
  req.eval_indices = eval_indices;
  req.hooks = hooks;
  return run_training(req);
}

}  // namespace mcft
