#include <doctest.h>

#include "mcft/kernels.hpp"
#include "test_util.hpp"

using namespace mcft;
using namespace mcft_test;
namespace ad = mcft::autodiff;

TEST_CASE("rng streams are deterministic and independent") {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    const uint64_t va = a.next_u64();
    CHECK(va == b.next_u64());
    (void)c.next_u64();
  }
  Rng d(42), e(43);
  int same = 0;
  for (int i = 0; i < 64; ++i) same += d.next_u64() == e.next_u64() ? 1 : 0;
  CHECK(same == 0);
}

TEST_CASE("rng normal moments are sane") {
  Rng rng(7);
  double sum = 0.0, sum2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    sum += z;
    sum2 += z * z;
  }
  CHECK(std::fabs(sum / n) < 0.01);
  CHECK(std::fabs(sum2 / n - 1.0) < 0.02);
}

TEST_CASE("parallel kernels match serial reference bitwise") {
  Rng rng(11);
  const int n = 37, k = 29, m = 53;
  Tensor A = random_tensor({n, k}, rng), B = random_tensor({k, m}, rng);
  Tensor C1({n, m}), C2({n, m});
  kernels::matmul_nn(A.data(), B.data(), C1.data(), n, k, m);
  kernels::serial::matmul_nn(A.data(), B.data(), C2.data(), n, k, m);
  CHECK(bitwise_equal(C1, C2));

  Tensor D1({k, m}), D2({k, m});
  Tensor G = random_tensor({n, m}, rng);
  kernels::matmul_tn(A.data(), G.data(), D1.data(), n, k, m);
  kernels::serial::matmul_tn(A.data(), G.data(), D2.data(), n, k, m);
  CHECK(bitwise_equal(D1, D2));

  Tensor E1({n, k}), E2({n, k});
  kernels::matmul_nt(G.data(), B.data(), E1.data(), n, m, k);
  kernels::serial::matmul_nt(G.data(), B.data(), E2.data(), n, m, k);
  CHECK(bitwise_equal(E1, E2));

  Tensor X = random_tensor({64, 96}, rng);
  Tensor Y1(X.shape()), Y2(X.shape());
  kernels::softmax_rows(X.data(), Y1.data(), 64, 96);
  kernels::serial::softmax_rows(X.data(), Y2.data(), 64, 96);
  CHECK(bitwise_equal(Y1, Y2));

  Tensor gamma = random_tensor({96}, rng), beta = random_tensor({96}, rng);
  Tensor L1(X.shape()), L2(X.shape()), mu1({64}), mu2({64}), rs1({64}), rs2({64});
  kernels::layer_norm_rows(X.data(), gamma.data(), beta.data(), L1.data(), mu1.data(),
                           rs1.data(), 64, 96, 1e-5);
  kernels::serial::layer_norm_rows(X.data(), gamma.data(), beta.data(), L2.data(),
                                   mu2.data(), rs2.data(), 64, 96, 1e-5);
  CHECK(bitwise_equal(L1, L2));

  Tensor Z1(X.shape()), Z2(X.shape());
  kernels::gelu(X.data(), Z1.data(), X.numel());
  kernels::serial::gelu(X.data(), Z2.data(), X.numel());
  CHECK(bitwise_equal(Z1, Z2));

  Tensor pts = random_tensor({500, 3}, rng);
  const double p[3] = {0.1, -0.2, 0.3};
  std::vector<double> d1(500, 1e300), d2(500, 1e300);
  kernels::min_sqdist_update(pts.data(), 500, p, d1.data());
  kernels::serial::min_sqdist_update(pts.data(), 500, p, d2.data());
  for (int i = 0; i < 500; ++i) CHECK(d1[i] == d2[i]);
}

TEST_CASE("autodiff matmul chain gradients") {
  Rng rng(3);
  check_gradients(
      [](ad::Graph& g, const std::vector<ad::Var>& v) {
        return g.mean_all(g.gelu(g.matmul(v[0], v[1])));
      },
      {random_tensor({3, 4}, rng, 0.5), random_tensor({4, 5}, rng, 0.5)});
}

TEST_CASE("autodiff softmax / log_softmax gradients") {
  Rng rng(4);
  check_gradients(
      [](ad::Graph& g, const std::vector<ad::Var>& v) {
        return g.mean_all(g.softmax(v[0]));
      },
      {random_tensor({4, 6}, rng)});
  check_gradients(
      [](ad::Graph& g, const std::vector<ad::Var>& v) {
        auto lsm = g.log_softmax(v[0]);
        return g.combine({g.pick(lsm, 0, 2), g.pick(lsm, 1, 0)}, {-1.0, 0.5});
      },
      {random_tensor({2, 5}, rng)});
}

TEST_CASE("autodiff layer_norm gradients") {
  Rng rng(5);
  check_gradients(
      [](ad::Graph& g, const std::vector<ad::Var>& v) {
        return g.mean_all(g.layer_norm(v[0], v[1], v[2]));
      },
      {random_tensor({3, 8}, rng), random_tensor({8}, rng, 0.5),
       random_tensor({8}, rng, 0.5)},
      1e-5, 1e-5, 1e-7);
}

TEST_CASE("autodiff attention-shaped composite gradients") {
  Rng rng(6);
  // [T,d] tokens through split/bmm/softmax/merge, the attention core.
  check_gradients(
      [](ad::Graph& g, const std::vector<ad::Var>& v) {
        auto qh = g.split_heads(v[0], 2);
        auto kh = g.split_heads(v[1], 2);
        auto vh = g.split_heads(v[2], 2);
        auto probs = g.softmax(g.scale(g.bmm_nt(qh, kh), 0.5));
        auto ctx = g.merge_heads(g.bmm_nn(probs, vh));
        return g.mean_all(ctx);
      },
      {random_tensor({5, 6}, rng, 0.7), random_tensor({5, 6}, rng, 0.7),
       random_tensor({5, 6}, rng, 0.7)});
}

TEST_CASE("autodiff shape-plumbing gradients") {
  Rng rng(7);
  check_gradients(
      [](ad::Graph& g, const std::vector<ad::Var>& v) {
        auto c = g.concat_rows(v[0], v[1]);
        auto r = g.row(c, 2);
        auto m = g.group_max(c, 2);
        return g.combine({g.mean_all(r), g.mean_all(m)}, {1.0, 2.0});
      },
      {random_tensor({2, 4}, rng), random_tensor({2, 4}, rng)});
  check_gradients(
      [](ad::Graph& g, const std::vector<ad::Var>& v) {
        auto n = g.normalize_rows(v[0]);
        return g.mean_all(g.matmul_nt2(n, n));
      },
      {random_tensor({3, 5}, rng)});
}

TEST_CASE("autodiff unary and reduction gradients") {
  Rng rng(8);
  check_gradients(
      [](ad::Graph& g, const std::vector<ad::Var>& v) {
        auto p = g.softmax(v[0]);
        auto lg = g.log_ew(g.affine(p, -1.0, 1.0));
        return g.masked_sum(lg, {1, 0, 1, 0, 1, 0});
      },
      {random_tensor({2, 3}, rng)});
  check_gradients(
      [](ad::Graph& g, const std::vector<ad::Var>& v) {
        Tensor mask({2, 3});
        for (int i = 0; i < 6; ++i) mask[i] = i % 2 ? 0.5 : -1.5;
        return g.mean_all(g.mul_const(g.add_bias(v[0], v[1]), mask));
      },
      {random_tensor({2, 3}, rng), random_tensor({3}, rng)});
}

TEST_CASE("autodiff cosine-to-const gradient and boundary values") {
  Rng rng(9);
  Tensor target = random_tensor({1, 6}, rng);
  check_gradients(
      [&](ad::Graph& g, const std::vector<ad::Var>& v) {
        return g.cosine_to_const(v[0], target);
      },
      {random_tensor({1, 6}, rng)});

  ad::Graph g;
  Tensor x({1, 3}, {1.0, 2.0, 3.0});
  CHECK(g.val(g.cosine_to_const(g.input(x, false), x)).item() == doctest::Approx(1.0));
}

TEST_CASE("autodiff chamfer gradient") {
  Rng rng(10);
  Tensor target = random_tensor({6, 3}, rng);
  check_gradients(
      [&](ad::Graph& g, const std::vector<ad::Var>& v) {
        return g.chamfer_to_const(v[0], target);
      },
      {random_tensor({4, 3}, rng)},
      1e-6, 1e-5, 1e-7);
}

TEST_CASE("backward seeds inject upstream gradients") {
  // d/dx of (x^T A x) via seeding equals the direct computation.
  Rng rng(12);
  Tensor x0 = random_tensor({2, 3}, rng);
  ad::Graph g;
  auto x = g.input(x0, true);
  auto y = g.scale(x, 2.0);
  auto loss = g.mean_all(y);
  Tensor seed({2, 3});
  for (int i = 0; i < 6; ++i) seed[i] = i;
  g.backward(loss, {{y, seed}});
  // d(mean)/dy = 1/6 each, plus the seed; dx = 2 * (1/6 + seed).
  const Tensor& gx = g.grad(x);
  for (int i = 0; i < 6; ++i) CHECK(gx[i] == doctest::Approx(2.0 * (1.0 / 6.0 + i)));
}
