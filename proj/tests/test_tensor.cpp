// Tensor + graph engine: forward values against loop oracles and hand
// results, gradients against central finite differences, and the error
// contract (shape, finiteness, frozen-leaf usage).
#include <cmath>
#include <vector>

#include "doctest.h"
#include "fedcp/errors.hpp"
#include "fedcp/graph.hpp"
#include "fedcp/rng.hpp"
#include "fedcp/selftest.hpp"
#include "fedcp/tensor.hpp"
#include "oracles.hpp"

using namespace fedcp;

namespace {

Tensor rand_mat(std::size_t r, std::size_t c, RngStream& rng,
                bool tracked = false) {
  std::vector<double> v(r * c);
  for (double& x : v) x = rng.next_normal();
  return Tensor({r, c}, std::move(v), tracked);
}

double max_abs_diff(const Tensor& t, const oracle::Mat& m) {
  double worst = 0.0;
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j)
      worst = std::max(worst, std::abs(t.at(i, j) - m[i][j]));
  return worst;
}

// Rebuilds a single-matrix probe from flat values and returns the loss, for
// feeding fd_max_rel_err.
double fd_check_single(const Tensor& x0,
                       const std::function<Tensor(Graph&, const Tensor&)>& loss,
                       double h = 1e-5) {
  Graph g0;
  Tensor l0 = loss(g0, x0);
  GradMap gm = g0.backward(l0);
  const Tensor analytic = gm.at(x0);
  auto f = [&](std::span<const double> flat) {
    Tensor x(x0.shape(), {flat.begin(), flat.end()}, true);
    Graph g;
    return loss(g, x).value();
  };
  return fd_max_rel_err(f, x0.data(), analytic.data(), h);
}

}  // namespace

TEST_CASE("matmul matches hand results and a loop oracle") {
  Graph g;
  const Tensor I = Tensor::matrix(2, 2, {1, 0, 0, 1});
  const Tensor M = Tensor::matrix(2, 2, {3.5, -1, 2, 7});
  CHECK(g.matmul(I, M).same_bits(M));

  const Tensor row = Tensor::matrix(1, 2, {1, 2});
  const Tensor col = Tensor::matrix(2, 1, {3, 4});
  const Tensor prod = g.matmul(row, col);
  CHECK(prod.rows() == 1);
  CHECK(prod.cols() == 1);
  CHECK(prod.at(0, 0) == 11.0);

  RngStream rng(401);
  const Tensor a = rand_mat(5, 7, rng), b = rand_mat(7, 3, rng);
  const auto want = oracle::matmul(oracle::to_mat(a), oracle::to_mat(b));
  CHECK(max_abs_diff(g.matmul(a, b), want) <= 1e-12);
}

TEST_CASE("matmul_nt is x times w-transpose") {
  Graph g;
  RngStream rng(402);
  const Tensor x = rand_mat(4, 6, rng), w = rand_mat(3, 6, rng);
  const auto want =
      oracle::linear(oracle::to_mat(x), oracle::to_mat(w),
                     std::vector<double>(3, 0.0));
  CHECK(max_abs_diff(g.matmul_nt(x, w), want) <= 1e-12);
}

TEST_CASE("matmul rejects disagreeing inner dimensions") {
  Graph g;
  const Tensor a = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  const Tensor b = Tensor::matrix(2, 2, {1, 2, 3, 4});
  CHECK_THROWS_AS(g.matmul(a, b), DimensionError);
  CHECK_THROWS_AS(g.matmul_nt(a, Tensor::matrix(2, 2, {1, 2, 3, 4})),
                  DimensionError);
}

TEST_CASE("hadamard with ones is the identity, masks zero out slots") {
  Graph g;
  RngStream rng(403);
  const Tensor x = rand_mat(3, 4, rng);
  CHECK(g.hadamard(x, Tensor::filled({3, 4}, 1.0)).same_bits(x));

  const Tensor mask = Tensor::vector({0, 1, 0, 1});
  const Tensor masked = g.hadamard(x, mask);  // row broadcast
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(masked.at(i, 0) == 0.0);
    CHECK(masked.at(i, 2) == 0.0);
    CHECK(masked.at(i, 1) == x.at(i, 1));
  }
  CHECK_THROWS_AS(g.hadamard(x, Tensor::vector({1, 2, 3})), DimensionError);
}

TEST_CASE("add broadcasts a bias row") {
  Graph g;
  const Tensor x = Tensor::matrix(2, 3, {0, 0, 0, 1, 1, 1});
  const Tensor b = Tensor::vector({10, 20, 30});
  const Tensor y = g.add(x, b);
  CHECK(y.at(0, 1) == 20.0);
  CHECK(y.at(1, 2) == 31.0);
}

TEST_CASE("relu clamps negatives only") {
  Graph g;
  const Tensor y = g.relu(Tensor::vector({-1.0, 0.0, 2.5}));
  CHECK(y[0] == 0.0);
  CHECK(y[1] == 0.0);
  CHECK(y[2] == 2.5);
}

TEST_CASE("pair softmax hand values and overflow safety") {
  Graph g;
  auto pairs = [&](double a0, double a1) {
    Tensor t = g.reshape(Tensor::matrix(1, 2, {a0, a1}), {1, 1, 2});
    return g.pair_softmax(t);
  };
  const Tensor even = pairs(0.0, 0.0);
  CHECK(even[0] == 0.5);
  CHECK(even[1] == 0.5);

  const Tensor skew = pairs(std::log(3.0), 0.0);
  CHECK(skew[0] == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(skew[1] == doctest::Approx(0.25).epsilon(1e-12));

  const Tensor extreme = pairs(1000.0, 0.0);  // raw exp would overflow
  CHECK(extreme[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::isfinite(extreme[1]));
  CHECK(extreme[1] >= 0.0);
}

TEST_CASE("pair lanes sum to one across a policy tensor") {
  Graph g;
  RngStream rng(404);
  Tensor a = rand_mat(6, 10, rng);
  Tensor sm = g.pair_softmax(g.reshape(a, {6, 5, 2}));
  Tensor r = g.pair_lane(sm, 0), s = g.pair_lane(sm, 1);
  for (std::size_t i = 0; i < r.size(); ++i) {
    CHECK(std::abs(r[i] + s[i] - 1.0) <= 1e-12);
    CHECK(r[i] > 0.0);
    CHECK(r[i] < 1.0);
  }
}

TEST_CASE("cross entropy hand values") {
  Graph g;
  const Tensor uniform = Tensor::matrix(1, 4, {0.7, 0.7, 0.7, 0.7});
  CHECK(g.cross_entropy(uniform, {2}).value() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));

  const Tensor confident = Tensor::matrix(1, 3, {20.0, 0.0, 0.0});
  CHECK(g.cross_entropy(confident, {0}).value() < 1e-8);

  const Tensor two = Tensor::matrix(2, 2, {1, 1, 1, 1});
  CHECK_THROWS_AS(g.cross_entropy(two, {0, 2}), InputError);
  CHECK_THROWS_AS(g.cross_entropy(two, {0}), DimensionError);

  RngStream rng(405);
  const Tensor logits = rand_mat(9, 5, rng);
  const std::vector<int> labels{0, 4, 2, 2, 1, 3, 0, 4, 1};
  CHECK(g.cross_entropy(logits, labels).value() ==
        doctest::Approx(oracle::cross_entropy(oracle::to_mat(logits), labels))
            .epsilon(1e-12));
}

TEST_CASE("layer norm frozen row values and zero-variance safety") {
  Graph g;
  const Tensor gain = Tensor::filled({2}, 1.0);
  const Tensor bias = Tensor::zeros({2});
  const Tensor y = g.layer_norm(Tensor::matrix(1, 2, {1.0, -1.0}), gain, bias);
  // mean 0, biased variance 1 -> entries are +-1/sqrt(1 + 1e-5)
  const double want = 0.9999950000374996;
  CHECK(y[0] == doctest::Approx(want).epsilon(1e-12));
  CHECK(y[1] == doctest::Approx(-want).epsilon(1e-12));

  const Tensor flat = g.layer_norm(Tensor::matrix(1, 2, {3.0, 3.0}), gain, bias);
  CHECK(std::isfinite(flat[0]));
  CHECK(flat[0] == 0.0);  // epsilon floor keeps the division finite

  RngStream rng(406);
  const Tensor x = rand_mat(4, 7, rng);
  const Tensor gg = Tensor::vector({1, 2, 3, 4, 5, 6, 7});
  const Tensor bb = Tensor::vector({-1, 0, 1, 0, -1, 0, 1});
  const auto want_m = oracle::layer_norm(oracle::to_mat(x), oracle::to_vec(gg),
                                         oracle::to_vec(bb));
  CHECK(max_abs_diff(g.layer_norm(x, gg, bb), want_m) <= 1e-12);
}

TEST_CASE("non-finite op output raises a numeric fault") {
  Graph g;
  const Tensor big = Tensor::vector({1e308});
  CHECK_THROWS_AS(g.scale(big, 10.0), NumericFault);
}

TEST_CASE("backward of a plain sum is all ones") {
  Graph g;
  const Tensor x = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}, true);
  GradMap gm = g.backward(g.sum(x));
  CHECK(gm.at(x).same_bits(Tensor::filled({2, 3}, 1.0)));
}

TEST_CASE("fan-out accumulates: d sum(x*x) = 2x exactly") {
  Graph g;
  RngStream rng(407);
  const Tensor x = rand_mat(3, 3, rng, true);
  GradMap gm = g.backward(g.sum(g.hadamard(x, x)));
  const Tensor got = gm.at(x);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(got[i] == 2.0 * x[i]);
}

TEST_CASE("gradients are refused for frozen leaves and non-scalar losses") {
  Graph g;
  const Tensor frozen = Tensor::matrix(2, 2, {1, 2, 3, 4});  // untracked
  const Tensor tracked = Tensor::matrix(2, 2, {1, 1, 1, 1}, true);
  const Tensor loss = g.sum(g.hadamard(tracked, frozen));
  GradMap gm = g.backward(loss);
  CHECK_THROWS_AS(gm.at(frozen), UsageError);
  CHECK(gm.touched(tracked));
  CHECK_THROWS_AS(g.backward(g.hadamard(tracked, frozen)), UsageError);
}

TEST_CASE("untouched tracked leaf reports a zero gradient") {
  Graph g;
  const Tensor used = Tensor::vector({1, 2}, true);
  const Tensor unused = Tensor::vector({3, 4}, true);
  GradMap gm = g.backward(g.sum(used));
  CHECK_FALSE(gm.touched(unused));
  CHECK(gm.at(unused).same_bits(Tensor::zeros({2})));
}

TEST_CASE("matmul gradient matches finite differences") {
  RngStream rng(408);
  const Tensor a = rand_mat(3, 4, rng, true);
  const Tensor b = rand_mat(4, 2, rng);
  const double err = fd_check_single(
      a, [&](Graph& g, const Tensor& x) { return g.sum(g.matmul(x, b)); });
  CHECK(err <= 1e-6);
}

TEST_CASE("hadamard-chain gradient matches finite differences") {
  RngStream rng(409);
  const Tensor a = rand_mat(4, 5, rng, true);
  const Tensor m = rand_mat(4, 5, rng);
  const double err = fd_check_single(a, [&](Graph& g, const Tensor& x) {
    return g.sum(g.hadamard(g.hadamard(x, m), x));
  });
  CHECK(err <= 1e-6);
}

TEST_CASE("relu gradient matches finite differences away from the kink") {
  RngStream rng(410);
  Tensor raw = rand_mat(5, 5, rng);
  std::vector<double> vals(raw.data().begin(), raw.data().end());
  for (double& v : vals) v += v >= 0.0 ? 0.25 : -0.25;  // clear of zero
  const Tensor a(raw.shape(), std::move(vals), true);
  const double err = fd_check_single(
      a, [&](Graph& g, const Tensor& x) { return g.sum(g.relu(x)); });
  CHECK(err <= 1e-6);
}

TEST_CASE("layer-norm gradient matches finite differences") {
  RngStream rng(411);
  const Tensor a = rand_mat(3, 6, rng, true);
  const Tensor gain = rand_mat(1, 6, rng);
  const Tensor gv = Tensor::vector(oracle::to_vec(gain));
  const Tensor bv = Tensor::vector({0.1, -0.2, 0.3, 0, 0.5, -0.1});
  const Tensor weight = rand_mat(3, 6, rng);
  const double err = fd_check_single(a, [&](Graph& g, const Tensor& x) {
    return g.sum(g.hadamard(g.layer_norm(x, gv, bv), weight));
  });
  CHECK(err <= 1e-5);
}

TEST_CASE("cross-entropy gradient matches finite differences") {
  RngStream rng(412);
  const Tensor logits = rand_mat(6, 4, rng, true);
  const std::vector<int> labels{0, 3, 1, 2, 2, 0};
  const double err = fd_check_single(logits, [&](Graph& g, const Tensor& x) {
    return g.cross_entropy(x, labels);
  });
  CHECK(err <= 1e-5);
}

TEST_CASE("sgd step hand cases") {
  const Tensor p = Tensor::vector({1.0, 2.0}, true);
  Graph g;
  const Tensor direction = Tensor::vector({10.0, -10.0});
  GradMap gm = g.backward(g.sum(g.hadamard(p, direction)));

  ParamSet ps;
  ps.add("p", p);
  const ParamSet frozen_step = sgd_step(ps, gm, 0.0);
  CHECK(frozen_step.at("p").same_bits(p));

  const ParamSet moved = sgd_step(ps, gm, 0.1);
  CHECK(moved.at("p")[0] == 0.0);
  CHECK(moved.at("p")[1] == 3.0);
  CHECK(moved.at("p").grad_tracked());
}

TEST_CASE("sgd step passes frozen entries through by handle") {
  const Tensor p = Tensor::vector({5.0}, true);
  const Tensor f = Tensor::vector({7.0});  // frozen
  ParamSet ps;
  ps.add("p", p);
  ps.add("f", f);
  Graph g;
  GradMap gm = g.backward(g.sum(g.scale(p, 3.0)));
  const ParamSet next = sgd_step(ps, gm, 0.5);
  CHECK(next.at("f").id() == f.id());
  CHECK(next.at("p")[0] == 3.5);
}

TEST_CASE("identical graphs reproduce identical bytes") {
  auto build = [] {
    RngStream rng(413);
    Graph g;
    const Tensor a = rand_mat(4, 4, rng, true);
    const Tensor b = rand_mat(4, 4, rng);
    Tensor y = g.layer_norm(g.matmul(a, b), Tensor::filled({4}, 1.0),
                            Tensor::zeros({4}));
    return g.sum(g.relu(y));
  };
  const Tensor first = build(), second = build();
  CHECK(first.same_bits(second));
}
