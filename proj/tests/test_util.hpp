#pragma once

#include <doctest.h>

#include <functional>
#include <vector>

#include "mcft/autodiff.hpp"
#include "mcft/pointcloud.hpp"

namespace mcft_test {

using mcft::Rng;
using mcft::Tensor;

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.normal();
  return t;
}

inline mcft::PointCloud random_cloud(int n, Rng& rng, const std::string& id = "rnd") {
  mcft::PointCloud pc;
  pc.points = Tensor({n, 3});
  for (int64_t i = 0; i < pc.points.numel(); ++i) pc.points[i] = rng.normal();
  pc.id = id;
  return pc;
}

/// Central finite differences against the tape gradient. `build` receives the
/// graph and leaf vars (one per input tensor) and returns a scalar loss. Each
/// checked entry must satisfy |ad - fd| <= atol + rtol*max(|ad|,|fd|).
inline void check_gradients(
    const std::function<mcft::autodiff::Var(mcft::autodiff::Graph&,
                                            const std::vector<mcft::autodiff::Var>&)>& build,
    std::vector<Tensor> inputs, double h = 1e-5, double rtol = 1e-6, double atol = 1e-8) {
  using mcft::autodiff::Graph;
  using mcft::autodiff::Var;

  Graph g;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(g.input(t, true));
  Var loss = build(g, vars);
  g.backward(loss);

  auto eval = [&](const std::vector<Tensor>& xs) {
    Graph gg;
    std::vector<Var> vs;
    for (const auto& t : xs) vs.push_back(gg.input(t, false));
    return gg.val(build(gg, vs)).item();
  };

  for (size_t vi = 0; vi < inputs.size(); ++vi) {
    const Tensor& ad = g.grad(vars[vi]);
    for (int64_t i = 0; i < inputs[vi].numel(); ++i) {
      auto plus = inputs;
      auto minus = inputs;
      plus[vi][i] += h;
      minus[vi][i] -= h;
      const double fd = (eval(plus) - eval(minus)) / (2.0 * h);
      const double err = std::fabs(ad[i] - fd);
      const double bound = atol + rtol * std::max(std::fabs(ad[i]), std::fabs(fd));
      if (err > bound) {
        FAIL("gradient mismatch input " << vi << " entry " << i << ": ad=" << ad[i]
                                        << " fd=" << fd << " err=" << err);
      }
    }
  }
}

}  // namespace mcft_test
