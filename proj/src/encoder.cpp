#include "mcft/encoder.hpp"

#include <cmath>

namespace mcft {

void EncoderConfig::validate() const {
  if (embed_dim < 1 || num_layers < 1 || num_heads < 1 || patch_points < 1 ||
      num_patches < 1 || num_classes < 1)
    throw config_error("encoder config: all counts must be >= 1");
  if (embed_dim % num_heads != 0)
    throw config_error("encoder config: embed_dim must be divisible by num_heads");
  if (ffn_hidden() < 1) throw config_error("encoder config: ffn_ratio too small");
}

std::vector<std::pair<std::string, std::vector<int>>> param_schema(const EncoderConfig& cfg) {
  const int d = cfg.embed_dim;
  const int h = cfg.ffn_hidden();
  std::vector<std::pair<std::string, std::vector<int>>> s;
  s.push_back({"patch_embed.w1", {3, d}});
  s.push_back({"patch_embed.b1", {d}});
  s.push_back({"patch_embed.w2", {d, d}});
  s.push_back({"patch_embed.b2", {d}});
  s.push_back({"pos_embed.w1", {3, d}});
  s.push_back({"pos_embed.b1", {d}});
  s.push_back({"pos_embed.w2", {d, d}});
  s.push_back({"pos_embed.b2", {d}});
  s.push_back({"cls_token", {1, d}});
  for (int i = 0; i < cfg.num_layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    s.push_back({p + "ln1.gamma", {d}});
    s.push_back({p + "ln1.beta", {d}});
    s.push_back({p + "attn.wq", {d, d}});
    s.push_back({p + "attn.bq", {d}});
    s.push_back({p + "attn.wk", {d, d}});
    s.push_back({p + "attn.bk", {d}});
    s.push_back({p + "attn.wv", {d, d}});
    s.push_back({p + "attn.bv", {d}});
    s.push_back({p + "attn.wo", {d, d}});
    s.push_back({p + "attn.bo", {d}});
    s.push_back({p + "ln2.gamma", {d}});
    s.push_back({p + "ln2.beta", {d}});
    s.push_back({p + "ffn.w1", {d, h}});
    s.push_back({p + "ffn.b1", {h}});
    s.push_back({p + "ffn.w2", {h, d}});
    s.push_back({p + "ffn.b2", {d}});
  }
  s.push_back({"final_norm.gamma", {d}});
  s.push_back({"final_norm.beta", {d}});
  return s;
}

namespace {

bool is_gain(const std::string& name) {
  return name.size() >= 6 && name.substr(name.size() - 6) == ".gamma";
}

bool is_weight(const std::string& name) {
  // 2D weights and the CLS token get random init; everything else is zero.
  return name.find(".w") != std::string::npos || name == "cls_token";
}

}  // namespace

EncoderState init_encoder(const EncoderConfig& cfg, uint64_t seed) {
  cfg.validate();
  EncoderState st;
  st.config = cfg;
  st.layer_mask.assign(cfg.num_layers, 1);
  Rng rng(mix_seed({seed, hash_str("encoder_init")}));
  for (const auto& [name, shape] : param_schema(cfg)) {
    Tensor t(shape);
    if (is_gain(name)) {
      t.fill(1.0);
    } else if (is_weight(name)) {
      for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.trunc_normal(0.02);
    }
    t.round_to_f32();
    st.params.emplace(name, std::move(t));
  }
  return st;
}

void init_head(const EncoderConfig& cfg, uint64_t seed, Tensor& head_w, Tensor& head_b) {
  Rng rng(mix_seed({seed, hash_str("head_init")}));
  head_w = Tensor({cfg.embed_dim, cfg.num_classes});
  for (int64_t i = 0; i < head_w.numel(); ++i) head_w[i] = rng.trunc_normal(0.02);
  head_w.round_to_f32();
  head_b = Tensor({cfg.num_classes});
}

void require_config_match(const EncoderConfig& got, const EncoderConfig& expected) {
  auto fail = [](const std::string& field) {
    throw config_error("encoder config mismatch in field '" + field + "'");
  };
  if (got.embed_dim != expected.embed_dim) fail("embed_dim");
  if (got.num_layers != expected.num_layers) fail("num_layers");
  if (got.num_heads != expected.num_heads) fail("num_heads");
  if (got.ffn_ratio != expected.ffn_ratio) fail("ffn_ratio");
  if (got.patch_points != expected.patch_points) fail("patch_points");
  if (got.num_patches != expected.num_patches) fail("num_patches");
  if (got.num_classes != expected.num_classes) fail("num_classes");
}

CostReport count_costs(const EncoderState& state) {
  const EncoderConfig& cfg = state.config;
  CostReport r;
  for (const auto& [name, t] : state.params) {
    if (name.rfind("layers.", 0) == 0) {
      const size_t dot = name.find('.', 7);
      const int layer = std::stoi(name.substr(7, dot - 7));
      if (!state.layer_mask[layer]) continue;
    }
    r.param_count += t.numel();
  }
  r.param_count += static_cast<int64_t>(cfg.embed_dim) * cfg.num_classes + cfg.num_classes;

  const int64_t T = cfg.tokens();
  const int64_t d = cfg.embed_dim;
  const int64_t hid = cfg.ffn_hidden();
  const int64_t attn = 2 * T * T * d + 4 * T * d * d;
  const int64_t ffn = 2 * 2 * T * d * hid;
  r.flops_per_forward = static_cast<int64_t>(state.active_layers()) * (attn + ffn);
  return r;
}

namespace model {

autodiff::Var ParamLeaves::at(const std::string& name) const {
  auto it = vars.find(name);
  if (it == vars.end()) throw integrity_error("missing parameter leaf: " + name);
  return it->second;
}

ParamLeaves make_leaves(autodiff::Graph& g, const EncoderState& state,
                        const std::set<std::string>* trainable) {
  ParamLeaves pl;
  for (const auto& [name, t] : state.params) {
    const bool rg = trainable && trainable->count(name) > 0;
    pl.vars.emplace(name, g.input(t, rg));
  }
  return pl;
}

namespace {

autodiff::Var mlp2(autodiff::Graph& g, autodiff::Var x, const ParamLeaves& pl,
                   const std::string& prefix) {
  auto h = g.add_bias(g.matmul(x, pl.at(prefix + ".w1")), pl.at(prefix + ".b1"));
  h = g.gelu(h);
  return g.add_bias(g.matmul(h, pl.at(prefix + ".w2")), pl.at(prefix + ".b2"));
}

void check_finite(const autodiff::Graph& g, autodiff::Var v, const std::string& where) {
  if (!g.val(v).all_finite()) throw numeric_error("non-finite activation at " + where);
}

}  // namespace

autodiff::Var embed_tokens(autodiff::Graph& g, const EncoderConfig& cfg,
                           const ParamLeaves& pl, const PatchSet& patches,
                           const std::vector<uint8_t>* patch_mask,
                           autodiff::Var mask_token) {
  const int m = cfg.num_patches;
  const int k = cfg.patch_points;
  const int d = cfg.embed_dim;
  if (patches.num_patches() != m || patches.group_size() != k)
    throw config_error("patch set does not match encoder config (m=" +
                       std::to_string(patches.num_patches()) +
                       ", k=" + std::to_string(patches.group_size()) + ")");

  // Shared per-point MLP, then max-pool over each group.
  Tensor flat({m * k, 3});
  for (int64_t i = 0; i < flat.numel(); ++i) flat[i] = patches.groups[i];
  auto pts = g.input(std::move(flat), false);
  auto feat = g.group_max(mlp2(g, pts, pl, "patch_embed"), k);  // [m,d]

  if (patch_mask) {
    // Masked patches contribute the mask token instead of their features.
    Tensor keep({m, d});
    for (int i = 0; i < m; ++i)
      for (int c = 0; c < d; ++c) keep.at(i, c) = (*patch_mask)[i] ? 0.0 : 1.0;
    feat = g.mul_const(feat, std::move(keep));
    if (mask_token < 0) throw validation_error("patch mask requires a mask token");
    Tensor sel({m, 1});
    for (int i = 0; i < m; ++i) sel.at(i, 0) = (*patch_mask)[i] ? 1.0 : 0.0;
    auto mrows = g.matmul(g.input(std::move(sel), false), mask_token);  // [m,d]
    feat = g.add(feat, mrows);
  }

  auto pos = mlp2(g, g.input(patches.centers, false), pl, "pos_embed");  // [m,d]
  auto tok = g.add(feat, pos);
  auto e0 = g.concat_rows(pl.at("cls_token"), tok);  // [m+1, d]
  check_finite(g, e0, "embedding");
  return e0;
}

ForwardVars encoder_forward(autodiff::Graph& g, const EncoderState& state,
                            const ParamLeaves& pl, autodiff::Var e0) {
  const EncoderConfig& cfg = state.config;
  const int heads = cfg.num_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim / heads));

  ForwardVars out;
  autodiff::Var x = e0;
  for (int layer = 0; layer < cfg.num_layers; ++layer) {
    if (!state.layer_mask[layer]) {
      out.layer_out.push_back(x);  // identity pass-through
      continue;
    }
    const std::string p = "layers." + std::to_string(layer) + ".";
    auto h1 = g.layer_norm(x, pl.at(p + "ln1.gamma"), pl.at(p + "ln1.beta"));
    auto q = g.add_bias(g.matmul(h1, pl.at(p + "attn.wq")), pl.at(p + "attn.bq"));
    auto kk = g.add_bias(g.matmul(h1, pl.at(p + "attn.wk")), pl.at(p + "attn.bk"));
    auto v = g.add_bias(g.matmul(h1, pl.at(p + "attn.wv")), pl.at(p + "attn.bv"));
    auto qh = g.split_heads(q, heads);
    auto kh = g.split_heads(kk, heads);
    auto vh = g.split_heads(v, heads);
    auto scores = g.scale(g.bmm_nt(qh, kh), scale);
    auto probs = g.softmax(scores);
    auto ctx = g.merge_heads(g.bmm_nn(probs, vh));
    auto attn = g.add_bias(g.matmul(ctx, pl.at(p + "attn.wo")), pl.at(p + "attn.bo"));
    auto x2 = g.add(x, attn);
    auto h2 = g.layer_norm(x2, pl.at(p + "ln2.gamma"), pl.at(p + "ln2.beta"));
    auto f1 = g.gelu(g.add_bias(g.matmul(h2, pl.at(p + "ffn.w1")), pl.at(p + "ffn.b1")));
    auto f2 = g.add_bias(g.matmul(f1, pl.at(p + "ffn.w2")), pl.at(p + "ffn.b2"));
    x = g.add(x2, f2);
    check_finite(g, x, "layer " + std::to_string(layer));
    out.layer_out.push_back(x);
  }
  out.tokens_final = g.layer_norm(x, pl.at("final_norm.gamma"), pl.at("final_norm.beta"));
  check_finite(g, out.tokens_final, "final norm");
  out.cls = g.row(out.tokens_final, 0);
  return out;
}

autodiff::Var apply_head(autodiff::Graph& g, autodiff::Var cls, autodiff::Var head_w,
                         autodiff::Var head_b) {
  return g.add_bias(g.matmul(cls, head_w), head_b);
}

}  // namespace model

Tensor embed(const EncoderState& state, const PatchSet& patches) {
  autodiff::Graph g;
  auto pl = model::make_leaves(g, state);
  return g.val(model::embed_tokens(g, state.config, pl, patches));
}

ForwardResult forward(const EncoderState& state, const Tensor& head_w,
                      const Tensor& head_b, const Tensor& e0, bool capture) {
  if (e0.rank() != 2 || e0.dim(0) != state.config.tokens() ||
      e0.dim(1) != state.config.embed_dim)
    throw config_error("forward: E0 shape " + e0.shape_str() + " does not match config");
  autodiff::Graph g;
  auto pl = model::make_leaves(g, state);
  auto fv = model::encoder_forward(g, state, pl, g.input(e0, false));
  auto logits = model::apply_head(g, fv.cls, g.input(head_w, false), g.input(head_b, false));
  ForwardResult r;
  r.logits = g.val(logits);
  r.cls = g.val(fv.cls);
  if (capture) {
    LayerTrace tr;
    for (auto v : fv.layer_out) tr.layer_outputs.push_back(g.val(v));
    tr.cls = g.val(fv.cls);
    r.trace = std::move(tr);
  }
  return r;
}

}  // namespace mcft
