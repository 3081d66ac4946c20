#include "mcft/semisup.hpp"

#include <algorithm>
#include <cmath>

namespace mcft {

void SemiConfig::validate() const {
  if (!(tau > 0.0 && tau <= 1.0)) throw config_error("tau must lie in (0,1]");
  if (mu < 1) throw config_error("mu must be a positive integer");
  if (omega < 0.0) throw config_error("omega must be >= 0");
  if (temperature <= 0.0) throw config_error("contrastive temperature must be > 0");
  if (low_threshold < 0.0 || low_threshold >= 1.0)
    throw config_error("low_threshold must lie in [0,1)");
  if (aha_extra_drop < 0.0 || aha_extra_drop >= 1.0)
    throw config_error("aha_extra_drop must lie in [0,1)");
}

namespace unsup {

SampleViews make_views(const PointCloud& cloud, const EncoderConfig& cfg,
                       uint64_t view_seed, bool hard_flag, double extra_drop) {
  const PointCloud normed = normalize_cloud(cloud);
  SampleViews out;
  const uint64_t wseed = mix_seed({view_seed, hash_str("weak")});
  const uint64_t sseed = mix_seed({view_seed, hash_str("strong")});
  PointCloud weak = augment(normed, AugmentStrength::weak, wseed);
  PointCloud strong = augment(normed, AugmentStrength::strong, sseed);
  out.weak.patches = tokenize_cloud(weak, cfg.num_patches, cfg.patch_points,
                                    mix_seed({view_seed, hash_str("fps_w")}), false);
  out.strong.patches = tokenize_cloud(strong, cfg.num_patches, cfg.patch_points,
                                      mix_seed({view_seed, hash_str("fps_s")}), false);
  if (hard_flag && extra_drop > 0.0) {
    AugmentParams hp = sample_augment_params(AugmentStrength::strong,
                                             mix_seed({view_seed, hash_str("hard")}));
    hp.extra_drop_ratio = extra_drop;
    hp.extra_drop_seed = mix_seed({view_seed, hash_str("hard_drop")});
    PointCloud hard = apply_augment(normed, hp);
    out.hard.patches = tokenize_cloud(hard, cfg.num_patches, cfg.patch_points,
                                      mix_seed({view_seed, hash_str("fps_h")}), false);
    out.has_hard = true;
  }
  return out;
}

namespace {

// Softmax of a [1,C] logits value (no gradient tracking).
std::vector<double> probs_of(const Tensor& logits) {
  const int C = static_cast<int>(logits.numel());
  double mx = logits[0];
  for (int c = 1; c < C; ++c) mx = std::max(mx, logits[c]);
  double sum = 0.0;
  std::vector<double> p(C);
  for (int c = 0; c < C; ++c) {
    p[c] = std::exp(logits[c] - mx);
    sum += p[c];
  }
  for (double& v : p) v /= sum;
  return p;
}

int argmax(const std::vector<double>& p) {
  int best = 0;
  for (size_t i = 1; i < p.size(); ++i)
    if (p[i] > p[best]) best = static_cast<int>(i);
  return best;
}

}  // namespace

UnsupSampleOut build_unsup_sample(autodiff::Graph& g, const EncoderState& student,
                                  const model::ParamLeaves& pl, autodiff::Var head_w,
                                  autodiff::Var head_b, const EncoderState* teacher,
                                  const SampleViews& views, const SemiConfig& sc,
                                  double tau, double weight, bool force_layer_grads) {
  UnsupSampleOut out;
  const int C = student.config.num_classes;
  auto capture = [&](const model::ForwardVars& fv) {
    if (!force_layer_grads) return;
    for (auto v : fv.layer_out) g.force_grad(v);
    out.layer_out_views.push_back(fv.layer_out);
  };

  // Weak view: student forward (gradient flows through the alignment term
  // only; pseudo-label probabilities are read as plain values).
  auto e0w = model::embed_tokens(g, student.config, pl, views.weak.patches);
  auto fvw = model::encoder_forward(g, student, pl, e0w);
  capture(fvw);
  auto logits_w = model::apply_head(g, fvw.cls, head_w, head_b);
  out.cls_w = fvw.cls;
  const std::vector<double> pw = probs_of(g.val(logits_w));
  out.pseudo = argmax(pw);
  out.gated = pw[out.pseudo] >= tau;

  // Strong view.
  auto e0s = model::embed_tokens(g, student.config, pl, views.strong.patches);
  auto fvs = model::encoder_forward(g, student, pl, e0s);
  capture(fvs);
  auto logits_s = model::apply_head(g, fvs.cls, head_w, head_b);
  out.cls_s = fvs.cls;
  const std::vector<double> ps = probs_of(g.val(logits_s));
  out.strong_correct = out.gated && argmax(ps) == out.pseudo;

  std::vector<autodiff::Var> terms;
  std::vector<double> weights;

  if (teacher) {
    autodiff::Graph tg;  // teacher pass kept value-only
    auto tpl = model::make_leaves(tg, *teacher);
    auto te0 = model::embed_tokens(tg, teacher->config, tpl, views.weak.patches);
    auto tfv = model::encoder_forward(tg, *teacher, tpl, te0);
    auto align = align_loss_node(g, fvw.cls, tg.val(tfv.cls));
    out.align = g.val(align).item();
    terms.push_back(align);
    weights.push_back(weight);
  }

  if (out.gated) {
    auto em = sup_loss_node(g, logits_s, out.pseudo);
    out.em = g.val(em).item();
    terms.push_back(em);
    weights.push_back(weight);
  }

  if (sc.enable_inverse) {
    std::vector<uint8_t> low(C, 0);
    bool any = false;
    for (int c = 0; c < C; ++c)
      if (pw[c] < sc.low_threshold) {
        low[c] = 1;
        any = true;
      }
    if (any) {
      auto probs = g.softmax(logits_s);
      auto one_minus = g.affine(probs, -1.0, 1.0);
      auto lg = g.log_ew(one_minus);
      auto inv = g.combine({g.masked_sum(lg, std::move(low))}, {-1.0});
      out.inverse = g.val(inv).item();
      terms.push_back(inv);
      weights.push_back(weight);
    }
  }

  if (sc.enable_aha && views.has_hard && out.gated) {
    auto e0h = model::embed_tokens(g, student.config, pl, views.hard.patches);
    auto fvh = model::encoder_forward(g, student, pl, e0h);
    capture(fvh);
    auto logits_h = model::apply_head(g, fvh.cls, head_w, head_b);
    auto aha = sup_loss_node(g, logits_h, out.pseudo);
    out.aha = g.val(aha).item();
    terms.push_back(aha);
    weights.push_back(weight);
  }

  out.loss = g.combine(terms, weights);
  return out;
}

ContrastiveOut contrastive_pairs(const std::vector<Tensor>& emb_w,
                                 const std::vector<Tensor>& emb_s, double temperature,
                                 double weight) {
  ContrastiveOut out;
  const int n = static_cast<int>(emb_w.size());
  if (n != static_cast<int>(emb_s.size()))
    throw validation_error("contrastive_pairs: view count mismatch");
  if (n < 2) {
    log_warn("contrastive term skipped: batch has no negatives");
    out.skipped = true;
    return out;
  }
  const int d = static_cast<int>(emb_w[0].numel());
  Tensor e({2 * n, d});
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < d; ++c) {
      e.at(i, c) = emb_w[i][c];
      e.at(n + i, c) = emb_s[i][c];
    }
  autodiff::Graph g;
  auto ev = g.input(std::move(e), true);
  auto en = g.normalize_rows(ev);
  auto sims = g.scale(g.matmul_nt2(en, en), 1.0 / temperature);
  Tensor diag({2 * n, 2 * n});
  for (int i = 0; i < 2 * n; ++i) diag.at(i, i) = -1e9;  // exclude self-pairs
  auto masked = g.add_const(sims, std::move(diag));
  auto lsm = g.log_softmax(masked);
  std::vector<autodiff::Var> picks;
  for (int i = 0; i < 2 * n; ++i) {
    const int pos = i < n ? i + n : i - n;
    picks.push_back(g.pick(lsm, i, pos));
  }
  auto loss = g.combine(picks, std::vector<double>(picks.size(), -1.0 / (2.0 * n)));
  out.value = g.val(loss).item();
  auto weighted = g.combine({loss}, {weight});
  g.backward(weighted);
  const Tensor& ge = g.grad(ev);
  for (int i = 0; i < n; ++i) {
    Tensor gw({1, d}), gs({1, d});
    for (int c = 0; c < d; ++c) {
      gw[c] = ge.at(i, c);
      gs[c] = ge.at(n + i, c);
    }
    out.grad_w.push_back(std::move(gw));
    out.grad_s.push_back(std::move(gs));
  }
  return out;
}

}  // namespace unsup

PseudoLabelOut pseudo_label_loss(const TrainState& st,
                                 const std::vector<PointCloud>& unlabeled_batch,
                                 double tau, uint64_t seed) {
  if (unlabeled_batch.empty()) throw validation_error("pseudo_label_loss: empty batch");
  const int n = static_cast<int>(unlabeled_batch.size());
  SemiConfig sc;
  sc.enable_aha = false;
  sc.enable_inverse = false;
  sc.enable_contrastive = false;
  PseudoLabelOut out;
  int passed = 0;
  std::vector<double> em(n, 0.0);
  std::vector<uint8_t> gate(n, 0);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    auto views = unsup::make_views(unlabeled_batch[i], st.student.config,
                                   mix_seed({seed, static_cast<uint64_t>(i)}), false, 0.0);
    autodiff::Graph g;
    auto pl = model::make_leaves(g, st.student);
    auto hw = g.input(st.head_w, false);
    auto hb = g.input(st.head_b, false);
    auto u = unsup::build_unsup_sample(g, st.student, pl, hw, hb, nullptr, views, sc,
                                       tau, 1.0);
    em[i] = u.em;
    gate[i] = u.gated ? 1 : 0;
  }
  for (int i = 0; i < n; ++i) {
    out.loss_em += em[i] / n;
    passed += gate[i];
  }
  out.mask_rate = static_cast<double>(passed) / n;
  return out;
}

AllMatchBreakdown allmatch_lite_loss(const TrainState& st,
                                     const std::vector<PointCloud>& unlabeled_batch,
                                     const SemiConfig& sc, uint64_t seed,
                                     const std::vector<uint8_t>& hard_flags) {
  if (unlabeled_batch.empty()) throw validation_error("allmatch_lite_loss: empty batch");
  const int n = static_cast<int>(unlabeled_batch.size());
  AllMatchBreakdown out;
  std::vector<Tensor> emb_w(n), emb_s(n);
  std::vector<double> inv(n, 0.0), aha(n, 0.0);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    const bool flagged = i < static_cast<int>(hard_flags.size()) && hard_flags[i];
    auto views = unsup::make_views(unlabeled_batch[i], st.student.config,
                                   mix_seed({seed, static_cast<uint64_t>(i)}), flagged,
                                   sc.aha_extra_drop);
    autodiff::Graph g;
    auto pl = model::make_leaves(g, st.student);
    auto hw = g.input(st.head_w, false);
    auto hb = g.input(st.head_b, false);
    SemiConfig local = sc;
    local.enable_contrastive = false;
    auto u = unsup::build_unsup_sample(g, st.student, pl, hw, hb, nullptr, views, local,
                                       /*tau=*/0.0, 1.0);
    inv[i] = sc.enable_inverse ? u.inverse : 0.0;
    aha[i] = sc.enable_aha ? u.aha : 0.0;
    emb_w[i] = g.val(u.cls_w);
    emb_s[i] = g.val(u.cls_s);
  }
  for (int i = 0; i < n; ++i) {
    out.inverse += inv[i] / n;
    out.aha += aha[i] / n;
  }
  if (sc.enable_contrastive) {
    auto con = unsup::contrastive_pairs(emb_w, emb_s, sc.temperature, 1.0);
    out.contrastive_skipped = con.skipped;
    out.contrastive = con.skipped ? 0.0 : con.value;
  }
  out.total = out.aha + out.inverse + out.contrastive;
  return out;
}

}  // namespace mcft
