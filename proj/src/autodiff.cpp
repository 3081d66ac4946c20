#include "mcft/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "mcft/common.hpp"
#include "mcft/kernels.hpp"

namespace mcft {
namespace autodiff {

namespace {
inline void add_into(Tensor& dst, const Tensor& src) {
  for (int64_t i = 0; i < dst.numel(); ++i) dst[i] += src[i];
}
}  // namespace

Var Graph::push(Tensor val, bool needs, std::function<void(Graph&, Var)> back) {
  Node n;
  n.val = std::move(val);
  n.needs_grad = needs;
  if (needs) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<Var>(nodes_.size() - 1);
}

Tensor& Graph::acc(Var v) {
  Node& n = nodes_[v];
  if (!n.grad_set) {
    n.grad = Tensor::zeros(n.val.shape());
    n.grad_set = true;
  }
  return n.grad;
}

const Tensor& Graph::grad(Var v) { return acc(v); }

Var Graph::input(Tensor t, bool requires_grad) {
  return push(std::move(t), requires_grad, {});
}

Var Graph::matmul(Var a, Var b) {
  const Tensor& ta = nodes_[a].val;
  const Tensor& tb = nodes_[b].val;
  const int n = ta.dim(0), k = ta.dim(1), m = tb.dim(1);
  if (tb.dim(0) != k) throw validation_error("matmul shape mismatch");
  Tensor out({n, m});
  kernels::matmul_nn(ta.data(), tb.data(), out.data(), n, k, m);
  const bool needs = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(std::move(out), needs, [a, b, n, k, m](Graph& g, Var self) {
    const Tensor& go = g.nodes_[self].grad;
    if (g.nodes_[a].needs_grad) {
      Tensor tmp({n, k});
      kernels::matmul_nt(go.data(), g.nodes_[b].val.data(), tmp.data(), n, m, k);
      add_into(g.acc(a), tmp);
    }
    if (g.nodes_[b].needs_grad) {
      Tensor tmp({k, m});
      kernels::matmul_tn(g.nodes_[a].val.data(), go.data(), tmp.data(), n, k, m);
      add_into(g.acc(b), tmp);
    }
  });
}

Var Graph::matmul_nt2(Var a, Var b) {
  const Tensor& ta = nodes_[a].val;
  const Tensor& tb = nodes_[b].val;
  const int n = ta.dim(0), d = ta.dim(1), m = tb.dim(0);
  if (tb.dim(1) != d) throw validation_error("matmul_nt2 shape mismatch");
  Tensor out({n, m});
  kernels::matmul_nt(ta.data(), tb.data(), out.data(), n, d, m);
  const bool needs = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(std::move(out), needs, [a, b, n, d, m](Graph& g, Var self) {
    const Tensor& go = g.nodes_[self].grad;
    if (g.nodes_[a].needs_grad) {
      Tensor tmp({n, d});
      kernels::matmul_nn(go.data(), g.nodes_[b].val.data(), tmp.data(), n, m, d);
      add_into(g.acc(a), tmp);
    }
    if (g.nodes_[b].needs_grad) {
      Tensor tmp({m, d});
      kernels::matmul_tn(go.data(), g.nodes_[a].val.data(), tmp.data(), n, m, d);
      add_into(g.acc(b), tmp);
    }
  });
}

Var Graph::bmm_nt(Var a, Var b) {
  const Tensor& ta = nodes_[a].val;
  const Tensor& tb = nodes_[b].val;
  const int B = ta.dim(0), n = ta.dim(1), p = ta.dim(2), m = tb.dim(1);
  if (tb.dim(0) != B || tb.dim(2) != p) throw validation_error("bmm_nt shape mismatch");
  Tensor out({B, n, m});
  for (int e = 0; e < B; ++e)
    kernels::matmul_nt(ta.data() + static_cast<int64_t>(e) * n * p,
                       tb.data() + static_cast<int64_t>(e) * m * p,
                       out.data() + static_cast<int64_t>(e) * n * m, n, p, m);
  const bool needs = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(std::move(out), needs, [a, b, B, n, p, m](Graph& g, Var self) {
    const Tensor& go = g.nodes_[self].grad;
    if (g.nodes_[a].needs_grad) {
      Tensor& ga = g.acc(a);
      Tensor tmp({n, p});
      for (int e = 0; e < B; ++e) {
        kernels::matmul_nn(go.data() + static_cast<int64_t>(e) * n * m,
                           g.nodes_[b].val.data() + static_cast<int64_t>(e) * m * p,
                           tmp.data(), n, m, p);
        double* dst = ga.data() + static_cast<int64_t>(e) * n * p;
        for (int64_t i = 0; i < tmp.numel(); ++i) dst[i] += tmp[i];
      }
    }
    if (g.nodes_[b].needs_grad) {
      Tensor& gb = g.acc(b);
      Tensor tmp({m, p});
      for (int e = 0; e < B; ++e) {
        kernels::matmul_tn(go.data() + static_cast<int64_t>(e) * n * m,
                           g.nodes_[a].val.data() + static_cast<int64_t>(e) * n * p,
                           tmp.data(), n, m, p);
        double* dst = gb.data() + static_cast<int64_t>(e) * m * p;
        for (int64_t i = 0; i < tmp.numel(); ++i) dst[i] += tmp[i];
      }
    }
  });
}

Var Graph::bmm_nn(Var a, Var b) {
  const Tensor& ta = nodes_[a].val;
  const Tensor& tb = nodes_[b].val;
  const int B = ta.dim(0), n = ta.dim(1), p = ta.dim(2), q = tb.dim(2);
  if (tb.dim(0) != B || tb.dim(1) != p) throw validation_error("bmm_nn shape mismatch");
  Tensor out({B, n, q});
  for (int e = 0; e < B; ++e)
    kernels::matmul_nn(ta.data() + static_cast<int64_t>(e) * n * p,
                       tb.data() + static_cast<int64_t>(e) * p * q,
                       out.data() + static_cast<int64_t>(e) * n * q, n, p, q);
  const bool needs = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(std::move(out), needs, [a, b, B, n, p, q](Graph& g, Var self) {
    const Tensor& go = g.nodes_[self].grad;
    if (g.nodes_[a].needs_grad) {
      Tensor& ga = g.acc(a);
      Tensor tmp({n, p});
      for (int e = 0; e < B; ++e) {
        kernels::matmul_nt(go.data() + static_cast<int64_t>(e) * n * q,
                           g.nodes_[b].val.data() + static_cast<int64_t>(e) * p * q,
                           tmp.data(), n, q, p);
        double* dst = ga.data() + static_cast<int64_t>(e) * n * p;
        for (int64_t i = 0; i < tmp.numel(); ++i) dst[i] += tmp[i];
      }
    }
    if (g.nodes_[b].needs_grad) {
      Tensor& gb = g.acc(b);
      Tensor tmp({p, q});
      for (int e = 0; e < B; ++e) {
        kernels::matmul_tn(g.nodes_[a].val.data() + static_cast<int64_t>(e) * n * p,
                           go.data() + static_cast<int64_t>(e) * n * q,
                           tmp.data(), n, p, q);
        double* dst = gb.data() + static_cast<int64_t>(e) * p * q;
        for (int64_t i = 0; i < tmp.numel(); ++i) dst[i] += tmp[i];
      }
    }
  });
}

Var Graph::add(Var a, Var b) {
  const Tensor& ta = nodes_[a].val;
  const Tensor& tb = nodes_[b].val;
  if (!ta.same_shape(tb)) throw validation_error("add shape mismatch");
  Tensor out(ta.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = ta[i] + tb[i];
  const bool needs = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(std::move(out), needs, [a, b](Graph& g, Var self) {
    const Tensor& go = g.nodes_[self].grad;
    if (g.nodes_[a].needs_grad) add_into(g.acc(a), go);
    if (g.nodes_[b].needs_grad) add_into(g.acc(b), go);
  });
}

Var Graph::add_bias(Var a, Var bias) {
  const Tensor& ta = nodes_[a].val;
  const Tensor& tb = nodes_[bias].val;
  const int cols = ta.shape().back();
  if (tb.numel() != cols) throw validation_error("add_bias width mismatch");
  const int rows = static_cast<int>(ta.numel() / cols);
  Tensor out(ta.shape());
  kernels::add_bias_rows(ta.data(), tb.data(), out.data(), rows, cols);
  const bool needs = nodes_[a].needs_grad || nodes_[bias].needs_grad;
  return push(std::move(out), needs, [a, bias, rows, cols](Graph& g, Var self) {
    const Tensor& go = g.nodes_[self].grad;
    if (g.nodes_[a].needs_grad) add_into(g.acc(a), go);
    if (g.nodes_[bias].needs_grad) {
      Tensor& gb = g.acc(bias);
      for (int i = 0; i < rows; ++i) {
        const double* r = go.data() + static_cast<int64_t>(i) * cols;
        for (int j = 0; j < cols; ++j) gb[j] += r[j];
      }
    }
  });
}

Var Graph::scale(Var a, double c) { return affine(a, c, 0.0); }

Var Graph::affine(Var a, double k, double c) {
  const Tensor& ta = nodes_[a].val;
  Tensor out(ta.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = k * ta[i] + c;
  return push(std::move(out), nodes_[a].needs_grad, [a, k](Graph& g, Var self) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor& ga = g.acc(a);
    for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += k * go[i];
  });
}

Var Graph::log_ew(Var a) {
  const Tensor& ta = nodes_[a].val;
  Tensor out(ta.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(ta[i]);
  return push(std::move(out), nodes_[a].needs_grad, [a](Graph& g, Var self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& x = g.nodes_[a].val;
    Tensor& ga = g.acc(a);
    for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += go[i] / x[i];
  });
}

Var Graph::gelu(Var a) {
  const Tensor& ta = nodes_[a].val;
  Tensor out(ta.shape());
  kernels::gelu(ta.data(), out.data(), ta.numel());
  return push(std::move(out), nodes_[a].needs_grad, [a](Graph& g, Var self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& x = g.nodes_[a].val;
    Tensor tmp(x.shape());
    kernels::gelu_backward(x.data(), go.data(), tmp.data(), x.numel());
    add_into(g.acc(a), tmp);
  });
}

Var Graph::mul_const(Var a, Tensor mask) {
  const Tensor& ta = nodes_[a].val;
  if (!ta.same_shape(mask)) throw validation_error("mul_const shape mismatch");
  Tensor out(ta.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = ta[i] * mask[i];
  return push(std::move(out), nodes_[a].needs_grad,
              [a, mask = std::move(mask)](Graph& g, Var self) {
                const Tensor& go = g.nodes_[self].grad;
                Tensor& ga = g.acc(a);
                for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += go[i] * mask[i];
              });
}

Var Graph::add_const(Var a, Tensor c) {
  const Tensor& ta = nodes_[a].val;
  if (!ta.same_shape(c)) throw validation_error("add_const shape mismatch");
  Tensor out(ta.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = ta[i] + c[i];
  return push(std::move(out), nodes_[a].needs_grad, [a](Graph& g, Var self) {
    add_into(g.acc(a), g.nodes_[self].grad);
  });
}

Var Graph::layer_norm(Var a, Var gamma, Var beta, double eps) {
  const Tensor& ta = nodes_[a].val;
  const int cols = ta.shape().back();
  const int rows = static_cast<int>(ta.numel() / cols);
  Tensor out(ta.shape());
  Tensor mean({rows}), rstd({rows});
  kernels::layer_norm_rows(ta.data(), nodes_[gamma].val.data(), nodes_[beta].val.data(),
                           out.data(), mean.data(), rstd.data(), rows, cols, eps);
  const bool needs =
      nodes_[a].needs_grad || nodes_[gamma].needs_grad || nodes_[beta].needs_grad;
  return push(std::move(out), needs,
              [a, gamma, beta, rows, cols, mean = std::move(mean),
               rstd = std::move(rstd)](Graph& g, Var self) {
                const Tensor& go = g.nodes_[self].grad;
                const Tensor& x = g.nodes_[a].val;
                Tensor dx(x.shape());
                Tensor dgamma({cols}), dbeta({cols});
                kernels::layer_norm_rows_backward(
                    x.data(), g.nodes_[gamma].val.data(), mean.data(), rstd.data(),
                    go.data(), dx.data(), dgamma.data(), dbeta.data(), rows, cols);
                if (g.nodes_[a].needs_grad) add_into(g.acc(a), dx);
                if (g.nodes_[gamma].needs_grad) add_into(g.acc(gamma), dgamma);
                if (g.nodes_[beta].needs_grad) add_into(g.acc(beta), dbeta);
              });
}

Var Graph::softmax(Var a) {
  const Tensor& ta = nodes_[a].val;
  const int cols = ta.shape().back();
  const int rows = static_cast<int>(ta.numel() / cols);
  Tensor out(ta.shape());
  kernels::softmax_rows(ta.data(), out.data(), rows, cols);
  return push(std::move(out), nodes_[a].needs_grad, [a, rows, cols](Graph& g, Var self) {
    const Tensor& y = g.nodes_[self].val;
    const Tensor& go = g.nodes_[self].grad;
    Tensor dx(y.shape());
    kernels::softmax_rows_backward(y.data(), go.data(), dx.data(), rows, cols);
    add_into(g.acc(a), dx);
  });
}

Var Graph::log_softmax(Var a) {
  const Tensor& ta = nodes_[a].val;
  if (ta.rank() != 2) throw validation_error("log_softmax expects rank 2");
  const int rows = ta.dim(0), cols = ta.dim(1);
  Tensor out(ta.shape());
  for (int i = 0; i < rows; ++i) {
    const double* xr = ta.data() + static_cast<int64_t>(i) * cols;
    double* yr = out.data() + static_cast<int64_t>(i) * cols;
    double mx = xr[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (int j = 0; j < cols; ++j) sum += std::exp(xr[j] - mx);
    const double lse = mx + std::log(sum);
    for (int j = 0; j < cols; ++j) yr[j] = xr[j] - lse;
  }
  return push(std::move(out), nodes_[a].needs_grad, [a, rows, cols](Graph& g, Var self) {
    const Tensor& y = g.nodes_[self].val;
    const Tensor& go = g.nodes_[self].grad;
    Tensor& ga = g.acc(a);
    for (int i = 0; i < rows; ++i) {
      const double* yr = y.data() + static_cast<int64_t>(i) * cols;
      const double* gr = go.data() + static_cast<int64_t>(i) * cols;
      double* ar = ga.data() + static_cast<int64_t>(i) * cols;
      double gsum = 0.0;
      for (int j = 0; j < cols; ++j) gsum += gr[j];
      for (int j = 0; j < cols; ++j) ar[j] += gr[j] - std::exp(yr[j]) * gsum;
    }
  });
}

Var Graph::normalize_rows(Var a, double eps) {
  const Tensor& ta = nodes_[a].val;
  const int cols = ta.shape().back();
  const int rows = static_cast<int>(ta.numel() / cols);
  Tensor out(ta.shape());
  Tensor norms({rows});
  for (int i = 0; i < rows; ++i) {
    const double* xr = ta.data() + static_cast<int64_t>(i) * cols;
    double s = 0.0;
    for (int j = 0; j < cols; ++j) s += xr[j] * xr[j];
    const double n = std::sqrt(s);
    norms[i] = n;
    const double inv = 1.0 / (n + eps);
    double* yr = out.data() + static_cast<int64_t>(i) * cols;
    for (int j = 0; j < cols; ++j) yr[j] = xr[j] * inv;
  }
  return push(std::move(out), nodes_[a].needs_grad,
              [a, rows, cols, eps, norms = std::move(norms)](Graph& g, Var self) {
                const Tensor& go = g.nodes_[self].grad;
                const Tensor& x = g.nodes_[a].val;
                Tensor& ga = g.acc(a);
                for (int i = 0; i < rows; ++i) {
                  const double* xr = x.data() + static_cast<int64_t>(i) * cols;
                  const double* gr = go.data() + static_cast<int64_t>(i) * cols;
                  double* ar = ga.data() + static_cast<int64_t>(i) * cols;
                  const double n = std::max(norms[i], 1e-30);
                  const double d = n + eps;
                  double dot = 0.0;
                  for (int j = 0; j < cols; ++j) dot += gr[j] * xr[j];
                  const double c = dot / (n * d * d);
                  for (int j = 0; j < cols; ++j) ar[j] += gr[j] / d - xr[j] * c;
                }
              });
}

Var Graph::reshape(Var a, std::vector<int> shape) {
  const Tensor& ta = nodes_[a].val;
  if (Tensor::numel_of(shape) != ta.numel()) throw validation_error("reshape numel mismatch");
  Tensor out(std::move(shape));
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = ta[i];
  return push(std::move(out), nodes_[a].needs_grad, [a](Graph& g, Var self) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor& ga = g.acc(a);
    for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += go[i];
  });
}

Var Graph::split_heads(Var a, int heads) {
  const Tensor& ta = nodes_[a].val;
  const int T = ta.dim(0), d = ta.dim(1);
  if (d % heads != 0) throw validation_error("split_heads: dim not divisible");
  const int dh = d / heads;
  Tensor out({heads, T, dh});
  for (int e = 0; e < heads; ++e)
    for (int t = 0; t < T; ++t)
      for (int c = 0; c < dh; ++c) out.at(e, t, c) = ta.at(t, e * dh + c);
  return push(std::move(out), nodes_[a].needs_grad, [a, heads, T, dh](Graph& g, Var self) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor& ga = g.acc(a);
    for (int e = 0; e < heads; ++e)
      for (int t = 0; t < T; ++t)
        for (int c = 0; c < dh; ++c) ga.at(t, e * dh + c) += go.at(e, t, c);
  });
}

Var Graph::merge_heads(Var a) {
  const Tensor& ta = nodes_[a].val;
  const int heads = ta.dim(0), T = ta.dim(1), dh = ta.dim(2);
  Tensor out({T, heads * dh});
  for (int e = 0; e < heads; ++e)
    for (int t = 0; t < T; ++t)
      for (int c = 0; c < dh; ++c) out.at(t, e * dh + c) = ta.at(e, t, c);
  return push(std::move(out), nodes_[a].needs_grad, [a, heads, T, dh](Graph& g, Var self) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor& ga = g.acc(a);
    for (int e = 0; e < heads; ++e)
      for (int t = 0; t < T; ++t)
        for (int c = 0; c < dh; ++c) ga.at(e, t, c) += go.at(t, e * dh + c);
  });
}

Var Graph::concat_rows(Var a, Var b) {
  const Tensor& ta = nodes_[a].val;
  const Tensor& tb = nodes_[b].val;
  if (ta.dim(1) != tb.dim(1)) throw validation_error("concat_rows width mismatch");
  const int r1 = ta.dim(0), r2 = tb.dim(0), c = ta.dim(1);
  Tensor out({r1 + r2, c});
  for (int64_t i = 0; i < ta.numel(); ++i) out[i] = ta[i];
  for (int64_t i = 0; i < tb.numel(); ++i) out[ta.numel() + i] = tb[i];
  const bool needs = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(std::move(out), needs, [a, b, r1, r2, c](Graph& g, Var self) {
    const Tensor& go = g.nodes_[self].grad;
    if (g.nodes_[a].needs_grad) {
      Tensor& ga = g.acc(a);
      for (int64_t i = 0; i < static_cast<int64_t>(r1) * c; ++i) ga[i] += go[i];
    }
    if (g.nodes_[b].needs_grad) {
      Tensor& gb = g.acc(b);
      const int64_t off = static_cast<int64_t>(r1) * c;
      for (int64_t i = 0; i < static_cast<int64_t>(r2) * c; ++i) gb[i] += go[off + i];
    }
  });
}

Var Graph::row(Var a, int i) {
  const Tensor& ta = nodes_[a].val;
  const int c = ta.dim(1);
  Tensor out({1, c});
  for (int j = 0; j < c; ++j) out[j] = ta.at(i, j);
  return push(std::move(out), nodes_[a].needs_grad, [a, i, c](Graph& g, Var self) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor& ga = g.acc(a);
    for (int j = 0; j < c; ++j) ga.at(i, j) += go[j];
  });
}

Var Graph::group_max(Var a, int group) {
  const Tensor& ta = nodes_[a].val;
  const int rows = ta.dim(0), d = ta.dim(1);
  if (rows % group != 0) throw validation_error("group_max: rows not divisible");
  const int m = rows / group;
  Tensor out({m, d});
  std::vector<int> argmax(static_cast<size_t>(m) * d);
  for (int i = 0; i < m; ++i) {
    for (int c = 0; c < d; ++c) {
      int best = i * group;
      double bv = ta.at(best, c);
      for (int r = 1; r < group; ++r) {
        const double v = ta.at(i * group + r, c);
        if (v > bv) {
          bv = v;
          best = i * group + r;
        }
      }
      out.at(i, c) = bv;
      argmax[static_cast<size_t>(i) * d + c] = best;
    }
  }
  return push(std::move(out), nodes_[a].needs_grad,
              [a, m, d, argmax = std::move(argmax)](Graph& g, Var self) {
                const Tensor& go = g.nodes_[self].grad;
                Tensor& ga = g.acc(a);
                for (int i = 0; i < m; ++i)
                  for (int c = 0; c < d; ++c)
                    ga.at(argmax[static_cast<size_t>(i) * d + c], c) += go.at(i, c);
              });
}

Var Graph::pick(Var a, int i, int j) {
  const Tensor& ta = nodes_[a].val;
  Tensor out = Tensor::scalar(ta.at(i, j));
  return push(std::move(out), nodes_[a].needs_grad, [a, i, j](Graph& g, Var self) {
    g.acc(a).at(i, j) += g.nodes_[self].grad[0];
  });
}

Var Graph::masked_sum(Var a, std::vector<uint8_t> mask) {
  const Tensor& ta = nodes_[a].val;
  if (static_cast<int64_t>(mask.size()) != ta.numel())
    throw validation_error("masked_sum mask size mismatch");
  double s = 0.0;
  for (int64_t i = 0; i < ta.numel(); ++i)
    if (mask[i]) s += ta[i];
  return push(Tensor::scalar(s), nodes_[a].needs_grad,
              [a, mask = std::move(mask)](Graph& g, Var self) {
                const double go = g.nodes_[self].grad[0];
                Tensor& ga = g.acc(a);
                for (int64_t i = 0; i < ga.numel(); ++i)
                  if (mask[i]) ga[i] += go;
              });
}

Var Graph::mean_all(Var a) {
  const Tensor& ta = nodes_[a].val;
  double s = 0.0;
  for (int64_t i = 0; i < ta.numel(); ++i) s += ta[i];
  const double inv = 1.0 / static_cast<double>(ta.numel());
  return push(Tensor::scalar(s * inv), nodes_[a].needs_grad, [a, inv](Graph& g, Var self) {
    const double go = g.nodes_[self].grad[0] * inv;
    Tensor& ga = g.acc(a);
    for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += go;
  });
}

Var Graph::combine(const std::vector<Var>& scalars, const std::vector<double>& w,
                   double bias) {
  if (scalars.size() != w.size()) throw validation_error("combine size mismatch");
  double s = bias;
  bool needs = false;
  for (size_t i = 0; i < scalars.size(); ++i) {
    s += w[i] * nodes_[scalars[i]].val.item();
    needs = needs || nodes_[scalars[i]].needs_grad;
  }
  return push(Tensor::scalar(s), needs,
              [vars = scalars, w](Graph& g, Var self) {
                const double go = g.nodes_[self].grad[0];
                for (size_t i = 0; i < vars.size(); ++i)
                  if (g.nodes_[vars[i]].needs_grad) g.acc(vars[i])[0] += w[i] * go;
              });
}

Var Graph::cosine_to_const(Var a, Tensor target, double eps) {
  const Tensor& ta = nodes_[a].val;
  if (ta.numel() != target.numel()) throw validation_error("cosine size mismatch");
  double dot = 0.0, na2 = 0.0, nt2 = 0.0;
  for (int64_t i = 0; i < ta.numel(); ++i) {
    dot += ta[i] * target[i];
    na2 += ta[i] * ta[i];
    nt2 += target[i] * target[i];
  }
  const double na = std::sqrt(na2), nt = std::sqrt(nt2);
  // Denominator stabilization kicks in only when a norm vanishes, so the
  // gradient is exactly zero at a == target for healthy inputs.
  const bool degenerate = na * nt < eps;
  if (degenerate)
    log_warn("cosine similarity on near-zero-norm input; denominator stabilized");
  const double denom = degenerate ? eps : na * nt;
  const double cosv = dot / denom;
  return push(Tensor::scalar(cosv), nodes_[a].needs_grad,
              [a, target = std::move(target), na, nt, dot, denom,
               degenerate](Graph& g, Var self) {
                const double go = g.nodes_[self].grad[0];
                const Tensor& x = g.nodes_[a].val;
                Tensor& ga = g.acc(a);
                const double k1 = 1.0 / denom;
                const double k2 =
                    degenerate ? 0.0
                               : dot * nt / (std::max(na, 1e-30) * denom * denom);
                for (int64_t i = 0; i < ga.numel(); ++i)
                  ga[i] += go * (target[i] * k1 - x[i] * k2);
              });
}

Var Graph::chamfer_to_const(Var pred, Tensor target) {
  const Tensor& tp = nodes_[pred].val;
  if (tp.rank() != 2 || tp.dim(1) != 3 || target.rank() != 2 || target.dim(1) != 3)
    throw validation_error("chamfer expects [n,3] point sets");
  const int kp = tp.dim(0), kg = target.dim(0);
  std::vector<int> nn_p(kp), nn_g(kg);
  auto sqd = [&](int i, int j) {
    double s = 0.0;
    for (int c = 0; c < 3; ++c) {
      const double d = tp.at(i, c) - target.at(j, c);
      s += d * d;
    }
    return s;
  };
  double loss = 0.0;
  for (int i = 0; i < kp; ++i) {
    int best = 0;
    double bd = sqd(i, 0);
    for (int j = 1; j < kg; ++j) {
      const double d = sqd(i, j);
      if (d < bd) {
        bd = d;
        best = j;
      }
    }
    nn_p[i] = best;
    loss += bd / kp;
  }
  for (int j = 0; j < kg; ++j) {
    int best = 0;
    double bd = sqd(0, j);
    for (int i = 1; i < kp; ++i) {
      const double d = sqd(i, j);
      if (d < bd) {
        bd = d;
        best = i;
      }
    }
    nn_g[j] = best;
    loss += bd / kg;
  }
  return push(Tensor::scalar(loss), nodes_[pred].needs_grad,
              [pred, target = std::move(target), nn_p = std::move(nn_p),
               nn_g = std::move(nn_g), kp, kg](Graph& g, Var self) {
                const double go = g.nodes_[self].grad[0];
                const Tensor& p = g.nodes_[pred].val;
                Tensor& gp = g.acc(pred);
                for (int i = 0; i < kp; ++i)
                  for (int c = 0; c < 3; ++c)
                    gp.at(i, c) += go * 2.0 / kp * (p.at(i, c) - target.at(nn_p[i], c));
                for (int j = 0; j < kg; ++j)
                  for (int c = 0; c < 3; ++c)
                    gp.at(nn_g[j], c) +=
                        go * 2.0 / kg * (p.at(nn_g[j], c) - target.at(j, c));
              });
}

void Graph::backward(Var loss, const std::vector<std::pair<Var, Tensor>>& seeds) {
  if (nodes_[loss].val.numel() != 1)
    throw validation_error("backward target must be scalar");
  for (Node& n : nodes_)
    if (n.grad_set) n.grad.fill(0.0);
  if (nodes_[loss].needs_grad) acc(loss)[0] = 1.0;
  for (const auto& [v, gseed] : seeds) {
    if (!nodes_[v].needs_grad) continue;
    Tensor& a = acc(v);
    for (int64_t i = 0; i < a.numel(); ++i) a[i] += gseed[i];
  }
  for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.needs_grad || !n.back || !n.grad_set) continue;
    n.back(*this, i);
  }
}

}  // namespace autodiff
}  // namespace mcft
