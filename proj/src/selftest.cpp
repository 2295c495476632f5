#include "fedcp/selftest.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <stdexcept>

#include "fedcp/config.hpp"

namespace fedcp {
namespace {

struct CheckFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void expect(bool ok, const std::string& msg) {
  if (!ok) throw CheckFailure(msg);
}

std::string fmt(double v) {
  char b[32];
  std::snprintf(b, sizeof b, "%.3g", v);
  return b;
}

template <typename Fn>
CheckResult run_one(std::string name, Fn&& fn) {
  CheckResult r;
  r.name = std::move(name);
  try {
    r.detail = fn();
    r.pass = true;
  } catch (const std::exception& e) {
    r.pass = false;
    r.detail = e.what();
  }
  return r;
}

Tensor rand_tensor(RngStream& rng, Shape shape, bool tracked,
                   double scale = 1.0) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (auto& x : v) x = scale * rng.next_normal();
  return Tensor(std::move(shape), std::move(v), tracked);
}

// A differentiation scenario: tracked leaves plus a builder that maps them to
// a scalar loss on a fresh graph. The builder must be pure so the probe can
// re-run it with nudged leaf values.
struct Probe {
  std::vector<Tensor> leaves;
  std::function<Tensor(Graph&, const std::vector<Tensor>&)> build;
};

std::vector<double> flatten_tensors(const std::vector<Tensor>& ts) {
  std::vector<double> out;
  for (const Tensor& t : ts) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

std::vector<double> probe_analytic(const Probe& p) {
  Graph g;
  Tensor loss = p.build(g, p.leaves);
  GradMap gm = g.backward(loss);
  std::vector<double> out;
  for (const Tensor& t : p.leaves) {
    Tensor gt = gm.at(t);
    out.insert(out.end(), gt.data().begin(), gt.data().end());
  }
  return out;
}

double probe_fd_vs(const Probe& p, std::span<const double> analytic,
                   double h) {
  const std::vector<double> x0 = flatten_tensors(p.leaves);
  auto f = [&](std::span<const double> x) {
    std::vector<Tensor> ts;
    ts.reserve(p.leaves.size());
    std::size_t off = 0;
    for (const Tensor& t : p.leaves) {
      std::vector<double> vals(x.begin() + static_cast<std::ptrdiff_t>(off),
                               x.begin() + static_cast<std::ptrdiff_t>(off + t.size()));
      off += t.size();
      ts.push_back(Tensor(t.shape(), std::move(vals), true));
    }
    Graph g;
    return p.build(g, ts).value();
  };
  return fd_max_rel_err(f, x0, analytic, h);
}

double probe_err(const Probe& p, double h = 1e-5) {
  const std::vector<double> an = probe_analytic(p);
  return probe_fd_vs(p, an, h);
}

std::string pass_detail(double worst, double tol) {
  expect(worst <= tol, "worst rel err " + fmt(worst) + " above " + fmt(tol));
  return "worst rel err " + fmt(worst);
}

// ---------------------------------------------------------------------------
// gradient suite
// ---------------------------------------------------------------------------

constexpr double kGradTol = 1e-4;

std::size_t dim_in(RngStream& rng) { return 2 + rng.next_below(4); }

std::string grad_matmul() {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    RngStream rng(0x100 + s);
    const std::size_t m = dim_in(rng), k = dim_in(rng), n = dim_in(rng);
    Tensor A = rand_tensor(rng, {m, k}, true);
    Tensor B = rand_tensor(rng, {k, n}, true);
    Tensor W = rand_tensor(rng, {m, n}, false);
    Probe p{{A, B}, [&](Graph& g, const std::vector<Tensor>& L) {
              return g.sum(g.hadamard(g.matmul(L[0], L[1]), W));
            }};
    worst = std::max(worst, probe_err(p));
  }
  return pass_detail(worst, kGradTol);
}

std::string grad_matmul_nt() {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    RngStream rng(0x200 + s);
    const std::size_t m = dim_in(rng), k = dim_in(rng), n = dim_in(rng);
    Tensor A = rand_tensor(rng, {m, k}, true);
    Tensor B = rand_tensor(rng, {n, k}, true);
    Tensor W = rand_tensor(rng, {m, n}, false);
    Probe p{{A, B}, [&](Graph& g, const std::vector<Tensor>& L) {
              return g.sum(g.hadamard(g.matmul_nt(L[0], L[1]), W));
            }};
    worst = std::max(worst, probe_err(p));
  }
  return pass_detail(worst, kGradTol);
}

std::string grad_hadamard() {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    RngStream rng(0x300 + s);
    const std::size_t m = dim_in(rng), k = dim_in(rng);
    Tensor A = rand_tensor(rng, {m, k}, true);
    Tensor B = rand_tensor(rng, {m, k}, true);
    Tensor W = rand_tensor(rng, {m, k}, false);
    Probe same{{A, B}, [&](Graph& g, const std::vector<Tensor>& L) {
                 return g.sum(g.hadamard(g.hadamard(L[0], L[1]), W));
               }};
    worst = std::max(worst, probe_err(same));
    Tensor row = rand_tensor(rng, {k}, true);
    Probe bcast{{A, row}, [&](Graph& g, const std::vector<Tensor>& L) {
                  return g.sum(g.hadamard(g.hadamard(L[0], L[1]), W));
                }};
    worst = std::max(worst, probe_err(bcast));
  }
  return pass_detail(worst, kGradTol);
}

std::string grad_add_bias() {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    RngStream rng(0x400 + s);
    const std::size_t m = dim_in(rng), k = dim_in(rng);
    Tensor A = rand_tensor(rng, {m, k}, true);
    Tensor b = rand_tensor(rng, {k}, true);
    Tensor W = rand_tensor(rng, {m, k}, false);
    Probe p{{A, b}, [&](Graph& g, const std::vector<Tensor>& L) {
              return g.sum(g.hadamard(g.add(L[0], L[1]), W));
            }};
    worst = std::max(worst, probe_err(p));
  }
  return pass_detail(worst, kGradTol);
}

std::string grad_sub_scale() {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    RngStream rng(0x500 + s);
    const std::size_t m = dim_in(rng), k = dim_in(rng);
    Tensor A = rand_tensor(rng, {m, k}, true);
    Tensor B = rand_tensor(rng, {m, k}, true);
    Tensor W = rand_tensor(rng, {m, k}, false);
    Probe p{{A, B}, [&](Graph& g, const std::vector<Tensor>& L) {
              return g.sum(g.hadamard(g.scale(g.sub(L[0], L[1]), 0.7), W));
            }};
    worst = std::max(worst, probe_err(p));
  }
  return pass_detail(worst, kGradTol);
}

Tensor off_kink(RngStream& rng, std::size_t m, std::size_t k) {
  std::vector<double> v(m * k);
  for (auto& x : v) {
    x = rng.next_normal();
    x += x >= 0.0 ? 0.25 : -0.25;  // keep clear of the ReLU kink
  }
  return Tensor({m, k}, std::move(v), true);
}

std::string grad_activation(std::uint64_t base, char which) {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    RngStream rng(base + s);
    const std::size_t m = dim_in(rng), k = dim_in(rng);
    Tensor A = which == 'r' ? off_kink(rng, m, k) : rand_tensor(rng, {m, k}, true);
    Tensor W = rand_tensor(rng, {m, k}, false);
    Probe p{{A}, [&](Graph& g, const std::vector<Tensor>& L) {
              Tensor a = which == 'r'   ? g.relu(L[0])
                         : which == 't' ? g.tanh(L[0])
                                        : g.sigmoid(L[0]);
              return g.sum(g.hadamard(a, W));
            }};
    worst = std::max(worst, probe_err(p));
  }
  return pass_detail(worst, kGradTol);
}

Probe layer_norm_probe(std::uint64_t seed) {
  RngStream rng(seed);
  const std::size_t m = dim_in(rng), k = 3 + rng.next_below(4);
  Tensor x = rand_tensor(rng, {m, k}, true);
  Tensor gain = rand_tensor(rng, {k}, true);
  Tensor bias = rand_tensor(rng, {k}, true);
  Tensor W = rand_tensor(rng, {m, k}, false);
  return Probe{{x, gain, bias}, [W](Graph& g, const std::vector<Tensor>& L) {
                 return g.sum(g.hadamard(g.layer_norm(L[0], L[1], L[2]), W));
               }};
}

std::string grad_layer_norm() {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s)
    worst = std::max(worst, probe_err(layer_norm_probe(0x700 + s)));
  return pass_detail(worst, kGradTol);
}

std::string grad_policy_chain() {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    RngStream rng(0x800 + s);
    const std::size_t B = dim_in(rng), K = dim_in(rng);
    Tensor x = rand_tensor(rng, {B, 2 * K}, true);
    Tensor W0 = rand_tensor(rng, {B, K}, false);
    Tensor W1 = rand_tensor(rng, {B, K}, false);
    Probe p{{x}, [&, B, K](Graph& g, const std::vector<Tensor>& L) {
              Tensor ps = g.pair_softmax(g.reshape(L[0], {B, K, 2}));
              Tensor s0 = g.sum(g.hadamard(g.pair_lane(ps, 0), W0));
              Tensor s1 = g.sum(g.hadamard(g.pair_lane(ps, 1), W1));
              return g.add(s0, s1);
            }};
    worst = std::max(worst, probe_err(p));
  }
  return pass_detail(worst, kGradTol);
}

std::string grad_cross_entropy() {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    RngStream rng(0x900 + s);
    const std::size_t B = dim_in(rng), C = 2 + rng.next_below(3);
    Tensor logits = rand_tensor(rng, {B, C}, true, 2.0);
    std::vector<int> labels;
    for (std::size_t i = 0; i < B; ++i)
      labels.push_back(static_cast<int>(rng.next_below(C)));
    Probe p{{logits}, [&](Graph& g, const std::vector<Tensor>& L) {
              return g.cross_entropy(L[0], labels);
            }};
    worst = std::max(worst, probe_err(p));
  }
  return pass_detail(worst, kGradTol);
}

std::string grad_mmd_kernel() {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    RngStream rng(0xA00 + s);
    const std::size_t m = dim_in(rng), n = dim_in(rng), k = 1 + rng.next_below(3);
    Tensor A = rand_tensor(rng, {m, k}, true);
    Tensor B = rand_tensor(rng, {n, k}, true);
    Probe p{{A, B}, [&](Graph& g, const std::vector<Tensor>& L) {
              return g.rbf_mmd(L[0], L[1], {0.7, 1.9});
            }};
    worst = std::max(worst, probe_err(p));
  }
  return pass_detail(worst, kGradTol);
}

std::string grad_fanout() {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    RngStream rng(0xB00 + s);
    const std::size_t m = dim_in(rng), k = dim_in(rng);
    Tensor x = rand_tensor(rng, {m, k}, true);
    Tensor M = rand_tensor(rng, {k, 3}, false);
    Probe p{{x}, [&](Graph& g, const std::vector<Tensor>& L) {
              // L[0] feeds three consumers; contributions must add up
              Tensor quad = g.sum(g.hadamard(L[0], L[0]));
              Tensor lin = g.sum(g.matmul(L[0], M));
              return g.add(quad, lin);
            }};
    worst = std::max(worst, probe_err(p));
  }
  return pass_detail(worst, kGradTol);
}

std::string grad_local_objective() {
  double worst = 0.0;
  NetSpec spec;
  spec.input_dim = 5;
  spec.hidden = {6};
  spec.feature_dim = 4;
  spec.num_classes = 3;
  const VariantTraits traits = make_variant(Algorithm::fedcp);
  for (std::uint64_t s = 0; s < 10; ++s) {
    RngStream rng(0xC00 + s);
    ServerModel sm = init_server_model(spec, rng, true);
    RngStream rng2(0xD00 + s);
    ServerModel other = init_server_model(spec, rng2, true);
    const ParamSet frozen_fe = other.fe.frozen_copy();
    const ParamSet frozen_head = other.head.frozen_copy();

    const std::size_t B = 4;
    Tensor x = rand_tensor(rng, {B, spec.input_dim}, false);
    std::vector<int> y;
    for (std::size_t i = 0; i < B; ++i)
      y.push_back(static_cast<int>(rng.next_below(spec.num_classes)));

    std::vector<Tensor> leaves;
    for (const auto& [name, t] : sm.fe.items()) leaves.push_back(t);
    for (const auto& [name, t] : sm.head.items()) leaves.push_back(t);
    for (const auto& [name, t] : sm.cpn.items()) leaves.push_back(t);

    // v is a per-round constant by contract, so the probe holds it fixed
    // instead of rebuilding it from the nudged head weights
    const Tensor v0 = client_vector(Head(sm.head));

    auto build = [&, v0, x, y](Graph& g, const std::vector<Tensor>& L) {
      ParamSet fe;
      fe.add("w0", L[0]);
      fe.add("b0", L[1]);
      fe.add("w1", L[2]);
      fe.add("b1", L[3]);
      ParamSet hd;
      hd.add("w", L[4]);
      hd.add("b", L[5]);
      ParamSet cp;
      cp.add("fc_w", L[6]);
      cp.add("fc_b", L[7]);
      cp.add("ln_g", L[8]);
      cp.add("ln_b", L[9]);
      ClientState c;
      c.model.personal_fe = fe_from_params(spec, std::move(fe));
      c.model.personal_head = Head(std::move(hd));
      c.model.global_fe = fe_from_params(spec, frozen_fe);
      c.model.global_head = Head(frozen_head);
      c.model.cpn = cpn_from_params(spec, std::move(cp));
      c.v = v0;
      ForwardOut fo = model_forward(g, c, traits, x);
      Tensor ce = g.cross_entropy(fo.logits, y);
      Tensor hg = c.model.global_fe->forward(g, x);
      Tensor mmd = mmd_loss(g, fo.h, hg, {0.5, 1.0, 2.0});
      return g.add(ce, g.scale(mmd, 0.8));
    };
    Probe p{std::move(leaves), build};
    worst = std::max(worst, probe_err(p));
  }
  return pass_detail(worst, kGradTol);
}

std::string grad_negative_control() {
  Probe p = layer_norm_probe(0xE00);
  const double honest = probe_err(p);
  expect(honest <= kGradTol, "honest probe already off: " + fmt(honest));
  std::vector<double> corrupted = probe_analytic(p);
  for (double& g : corrupted) g *= 1.05;
  const double err = probe_fd_vs(p, corrupted, 1e-5);
  expect(err > kGradTol,
         "probe failed to flag a 5% gradient corruption (err " + fmt(err) + ")");
  return "clean " + fmt(honest) + ", corrupted flagged at " + fmt(err);
}

// ---------------------------------------------------------------------------
// policy invariants
// ---------------------------------------------------------------------------

std::string policy_completeness() {
  NetSpec spec;
  spec.input_dim = 8;
  spec.hidden = {};
  spec.feature_dim = 8;
  spec.num_classes = 3;
  RngStream rng(0x51);
  ServerModel sm = init_server_model(spec, rng, true);
  Cpn cpn = cpn_from_params(spec, sm.cpn);

  double worst_dev = 0.0;
  double lo = 1.0, hi = 0.0;
  const double scales[] = {0.3, 1.0, 3.0};
  for (int batch = 0; batch < 100; ++batch) {
    Tensor c = rand_tensor(rng, {1000, spec.feature_dim}, false,
                           scales[batch % 3]);
    Graph g;
    Policy pol = cpn.forward(g, c);
    auto R = pol.r.data();
    auto S = pol.s.data();
    for (std::size_t i = 0; i < R.size(); ++i) {
      worst_dev = std::max(worst_dev, std::abs(R[i] + S[i] - 1.0));
      lo = std::min({lo, R[i], S[i]});
      hi = std::max({hi, R[i], S[i]});
    }
  }
  expect(worst_dev <= 1e-12, "r+s drifts from 1 by " + fmt(worst_dev));
  expect(lo > 0.0 && hi < 1.0,
         "policy left (0,1): min " + fmt(lo) + ", max " + fmt(hi));
  return "1e5 rows, max |r+s-1| " + fmt(worst_dev) + ", range (" + fmt(lo) +
         ", " + fmt(hi) + ")";
}

std::string policy_fresh_pir() {
  NetSpec spec;
  spec.input_dim = 64;
  spec.hidden = {};
  spec.feature_dim = 64;
  spec.num_classes = 4;
  std::string seen;
  for (std::uint64_t seed : {11u, 29u, 83u}) {
    RngStream rng(seed);
    ServerModel sm = init_server_model(spec, rng, true);
    Cpn cpn = cpn_from_params(spec, sm.cpn);
    Tensor c = rand_tensor(rng, {2000, spec.feature_dim}, false);
    Graph g;
    Policy pol = cpn.forward(g, c);
    const double pir = compute_pir(pol.s);
    expect(pir >= 0.48 && pir <= 0.52,
           "fresh-init PIR " + fmt(pir) + " outside [0.48, 0.52]");
    if (!seen.empty()) seen += ", ";
    seen += fmt(pir);
  }
  return "fresh-init PIR: " + seen;
}

// ---------------------------------------------------------------------------
// kernel-distance identities
// ---------------------------------------------------------------------------

std::string mmd_self_zero() {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    RngStream rng(0xF0 + s);
    Tensor A = rand_tensor(rng, {6, 4}, false);
    Graph g;
    worst = std::max(worst, std::abs(mmd_loss(g, A, A).value()));
  }
  expect(worst <= 1e-10, "mmd(A,A) " + fmt(worst));
  return "|mmd(A,A)| " + fmt(worst);
}

std::string mmd_symmetry() {
  for (std::uint64_t s = 0; s < 5; ++s) {
    RngStream rng(0x1F0 + s);
    Tensor A = rand_tensor(rng, {5, 3}, false);
    Tensor B = rand_tensor(rng, {7, 3}, false);
    Graph g1, g2;
    Tensor ab = mmd_loss(g1, A, B);
    Tensor ba = mmd_loss(g2, B, A);
    expect(ab.same_bits(ba), "mmd(A,B) != mmd(B,A) bitwise at seed " +
                                 std::to_string(s) + ": " +
                                 fmt(ab.value() - ba.value()));
  }
  return "5 draws bitwise symmetric";
}

std::string mmd_pinned_toy() {
  Tensor hp({2, 1}, {0.0, 0.0});
  Tensor hg({2, 1}, {1.0, 1.0});
  Graph g;
  const double v = mmd_loss(g, hp, hg, {1.0}).value();
  const double want = 2.0 - 2.0 * std::exp(-1.0);
  expect(std::abs(v - want) <= 1e-6,
         "toy value " + fmt(v) + " vs " + fmt(want));
  return "toy value " + fmt(v);
}

std::string mmd_nonnegative() {
  double lowest = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    RngStream rng(0x2F0 + s);
    const std::size_t m = 2 + rng.next_below(5), n = 2 + rng.next_below(5),
                      k = 1 + rng.next_below(4);
    Tensor A = rand_tensor(rng, {m, k}, false, 0.5 + rng.next_unit());
    Tensor B = rand_tensor(rng, {n, k}, false, 0.5 + rng.next_unit());
    Graph g;
    lowest = std::min(lowest, mmd_loss(g, A, B).value());
  }
  expect(lowest >= -1e-10, "mmd dipped to " + fmt(lowest));
  return "lowest value " + fmt(lowest);
}

// ---------------------------------------------------------------------------
// partition audits
// ---------------------------------------------------------------------------

Dataset audit_pool() {
  RngStream rng(123);
  return synth_clusters(6, 4, 50, 0.4, rng);
}

void audit_disjoint_cover(const PartitionPlan& plan, std::size_t pool_size) {
  std::vector<std::size_t> all;
  for (const auto& a : plan.assignments) all.insert(all.end(), a.begin(), a.end());
  expect(all.size() == pool_size,
         "assigned " + std::to_string(all.size()) + " of " +
             std::to_string(pool_size) + " samples");
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < all.size(); ++i)
    expect(all[i] == i, "index " + std::to_string(i) + " missing or doubled");
}

std::string partition_audits() {
  const Dataset pool = audit_pool();
  for (std::uint64_t s = 0; s < 10; ++s) {
    PartitionPlan dp = partition_dirichlet(pool, 8, 0.5, s, 10);
    audit_disjoint_cover(dp, pool.size());
    for (const auto& props : dp.class_proportions) {
      double sum = 0.0;
      for (double q : props) sum += q;
      expect(std::abs(sum - 1.0) <= 1e-12,
             "class proportions sum " + fmt(sum));
    }
    for (const auto& a : dp.assignments)
      expect(a.size() >= 10, "client below min_samples");

    PartitionPlan pp = partition_pathological(pool, 6, 2, s);
    audit_disjoint_cover(pp, pool.size());
    for (const auto& a : pp.assignments) {
      std::set<int> labels;
      for (std::size_t idx : a) labels.insert(pool.labels[idx]);
      expect(labels.size() == 2, "client holds " +
                                     std::to_string(labels.size()) +
                                     " labels, wanted 2");
    }
  }
  return "20 plans: disjoint, covering, proportions exact";
}

std::string partition_split_rules() {
  const Dataset pool = audit_pool();
  auto shared = std::make_shared<Dataset>(pool);
  PartitionPlan plan = partition_dirichlet(pool, 8, 0.5, 0, 10);
  auto splits = split_train_test(plan, shared, 0.75, 99);
  expect(splits.size() == plan.assignments.size(), "split count mismatch");
  for (std::size_t i = 0; i < splits.size(); ++i) {
    std::vector<std::size_t> together = splits[i].train.idx;
    together.insert(together.end(), splits[i].test.idx.begin(),
                    splits[i].test.idx.end());
    std::sort(together.begin(), together.end());
    std::vector<std::size_t> assigned = plan.assignments[i];
    std::sort(assigned.begin(), assigned.end());
    expect(together == assigned, "client " + std::to_string(i) +
                                     ": train+test != assignment");
    std::set<std::size_t> uniq(together.begin(), together.end());
    expect(uniq.size() == together.size(),
           "client " + std::to_string(i) + ": train/test overlap");

    // per label: test seeds with floor(count/4) (>= 1 once count >= 4), and
    // the largest-remainder top-up adds at most one more; the client total
    // lands exactly on the documented floor(n/4)
    std::map<int, std::size_t> count, test_count;
    for (std::size_t idx : assigned) ++count[pool.labels[idx]];
    for (std::size_t idx : splits[i].test.idx) ++test_count[pool.labels[idx]];
    std::size_t floored = 0;
    for (const auto& [label, n] : count) {
      std::size_t want = n / 4;
      if (want == 0 && n >= 4) want = 1;
      floored += want;
      expect(test_count[label] == want || test_count[label] == want + 1,
             "client " + std::to_string(i) + " label " +
                 std::to_string(label) + ": test " +
                 std::to_string(test_count[label]) + ", wanted " +
                 std::to_string(want) + " or one more");
    }
    const std::size_t total = std::max(floored, assigned.size() / 4);
    expect(splits[i].test.idx.size() == total,
           "client " + std::to_string(i) + ": test total " +
               std::to_string(splits[i].test.idx.size()) + ", wanted " +
               std::to_string(total));
  }
  return "8 clients: stratified 75/25 with documented rounding";
}

// ---------------------------------------------------------------------------
// determinism
// ---------------------------------------------------------------------------

std::string determinism_init() {
  NetSpec spec;
  spec.input_dim = 6;
  spec.hidden = {5};
  spec.feature_dim = 4;
  spec.num_classes = 3;
  RngStream a(42), b(42), c(43);
  ServerModel m1 = init_server_model(spec, a, true);
  ServerModel m2 = init_server_model(spec, b, true);
  ServerModel m3 = init_server_model(spec, c, true);
  expect(m1.fe.same_bits(m2.fe) && m1.head.same_bits(m2.head) &&
             m1.cpn.same_bits(m2.cpn),
         "same seed produced different parameters");
  expect(!m1.fe.same_bits(m3.fe), "different seeds collided");
  return "same seed identical, different seed distinct";
}

ExperimentConfig tiny_config() {
  ExperimentConfig cfg;
  cfg.algorithm = Algorithm::fedcp;
  cfg.master_seed = 11;
  cfg.dataset.source = DatasetConfig::Source::synthetic;
  cfg.dataset.classes = 4;
  cfg.dataset.dim = 8;
  cfg.dataset.per_class = 40;
  cfg.dataset.spread = 0.3;
  cfg.partition.scheme = PartitionPlan::Scheme::dirichlet;
  cfg.partition.num_clients = 4;
  cfg.partition.beta = 1.0;
  cfg.partition.min_samples = 10;
  cfg.model.hidden = {16};
  cfg.model.feature_dim = 8;
  cfg.training.rounds = 2;
  cfg.training.lr = 0.1;
  cfg.training.lambda = 1.0;
  return cfg;
}

std::string determinism_rounds() {
  const ExperimentConfig cfg = tiny_config();
  RunOptions serial;
  serial.workers = 1;
  serial.write_outputs = false;
  RunOptions wide = serial;
  wide.workers = 4;
  const std::string a = round_csv(run_experiment(cfg, serial).reports);
  const std::string b = round_csv(run_experiment(cfg, serial).reports);
  const std::string c = round_csv(run_experiment(cfg, wide).reports);
  expect(a == b, "two serial runs disagree");
  expect(a == c, "serial and 4-worker runs disagree");
  return "2 rounds, serial twice + 4 workers: identical bytes";
}

}  // namespace

// ---------------------------------------------------------------------------
// public surface
// ---------------------------------------------------------------------------

double fd_max_rel_err(const std::function<double(std::span<const double>)>& f,
                      std::span<const double> x0,
                      std::span<const double> analytic, double h) {
  if (x0.size() != analytic.size())
    throw UsageError("fd probe: analytic gradient size mismatch");
  std::vector<double> x(x0.begin(), x0.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double fp = f(x);
    x[i] = keep - h;
    const double fm = f(x);
    x[i] = keep;
    const double fd = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::abs(fd), std::abs(analytic[i]), 1e-4});
    worst = std::max(worst, std::abs(fd - analytic[i]) / denom);
  }
  return worst;
}

std::vector<CheckResult> run_selftests() {
  std::vector<CheckResult> out;
  out.push_back(run_one("grad/matmul", grad_matmul));
  out.push_back(run_one("grad/matmul_nt", grad_matmul_nt));
  out.push_back(run_one("grad/hadamard", grad_hadamard));
  out.push_back(run_one("grad/add_bias", grad_add_bias));
  out.push_back(run_one("grad/sub_scale", grad_sub_scale));
  out.push_back(run_one("grad/relu", [] { return grad_activation(0x600, 'r'); }));
  out.push_back(run_one("grad/tanh", [] { return grad_activation(0x610, 't'); }));
  out.push_back(
      run_one("grad/sigmoid", [] { return grad_activation(0x620, 's'); }));
  out.push_back(run_one("grad/layer_norm", grad_layer_norm));
  out.push_back(run_one("grad/policy_chain", grad_policy_chain));
  out.push_back(run_one("grad/cross_entropy", grad_cross_entropy));
  out.push_back(run_one("grad/mmd_kernel", grad_mmd_kernel));
  out.push_back(run_one("grad/local_objective", grad_local_objective));
  out.push_back(run_one("grad/fanout_accumulation", grad_fanout));
  out.push_back(run_one("grad/negative_control", grad_negative_control));
  out.push_back(run_one("policy/pair_completeness", policy_completeness));
  out.push_back(run_one("policy/fresh_pir", policy_fresh_pir));
  out.push_back(run_one("mmd/self_zero", mmd_self_zero));
  out.push_back(run_one("mmd/symmetry", mmd_symmetry));
  out.push_back(run_one("mmd/pinned_toy", mmd_pinned_toy));
  out.push_back(run_one("mmd/nonnegative", mmd_nonnegative));
  out.push_back(run_one("partition/audits", partition_audits));
  out.push_back(run_one("partition/split_rules", partition_split_rules));
  out.push_back(run_one("determinism/init", determinism_init));
  out.push_back(run_one("determinism/rounds", determinism_rounds));
  return out;
}

bool all_passed(const std::vector<CheckResult>& results) {
  for (const auto& r : results)
    if (!r.pass) return false;
  return true;
}

std::string render_check_table(const std::vector<CheckResult>& results) {
  std::size_t width = 0;
  for (const auto& r : results) width = std::max(width, r.name.size());
  std::string out;
  std::size_t passed = 0;
  for (const auto& r : results) {
    out += r.pass ? "[PASS] " : "[FAIL] ";
    out += r.name;
    out.append(width - r.name.size() + 2, ' ');
    out += r.detail;
    out += '\n';
    if (r.pass) ++passed;
  }
  out += std::to_string(passed) + "/" + std::to_string(results.size()) +
         " checks passed\n";
  return out;
}

}  // namespace fedcp
