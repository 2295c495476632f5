// Federation runtime: client sampling, upload aggregation, broadcast rules,
// full rounds, the fedavg = centralized-SGD collapse, and determinism across
// worker counts.
#include <cmath>
#include <memory>
#include <numeric>
#include <set>
#include <vector>

#include "doctest.h"
#include "fedcp/data.hpp"
#include "fedcp/errors.hpp"
#include "fedcp/nn.hpp"
#include "fedcp/rng.hpp"
#include "fedcp/runtime.hpp"
#include "fedcp/training.hpp"
#include "oracles.hpp"

using namespace fedcp;

namespace {

NetSpec tiny_spec() {
  NetSpec s;
  s.input_dim = 5;
  s.hidden = {6};
  s.feature_dim = 4;
  s.num_classes = 3;
  return s;
}

std::shared_ptr<const Dataset> pool(std::uint64_t seed, std::size_t per_class = 20) {
  RngStream rng(seed);
  return std::make_shared<Dataset>(synth_clusters(3, 5, per_class, 0.4, rng));
}

std::vector<std::size_t> range_idx(std::size_t lo, std::size_t hi) {
  std::vector<std::size_t> v(hi - lo);
  std::iota(v.begin(), v.end(), lo);
  return v;
}

RunSettings base_settings(Algorithm alg, std::size_t n_clients, int rounds,
                          std::uint64_t master, int workers = 1) {
  RunSettings s;
  s.num_clients = n_clients;
  s.rounds = rounds;
  s.join_ratio = JoinRatio{1.0, 1.0};
  s.learning_rate = 0.05;
  s.lambda = 1.0;
  s.epochs = 1;
  s.batch_size = 10;
  s.traits = make_variant(alg);
  s.net = tiny_spec();
  s.master_seed = master;
  s.workers = workers;
  return s;
}

// Even split of one pool across n clients, every client class-mixed.
std::vector<ClientSplit> even_splits(std::shared_ptr<const Dataset> ds,
                                     std::size_t n) {
  PartitionPlan plan = partition_dirichlet(*ds, n, 5.0, 17, 4);
  return split_train_test(plan, ds, 0.75, 18);
}

ParamSet make_ps(std::vector<std::pair<std::string, Tensor>> items) {
  ParamSet ps;
  for (auto& [name, t] : items) ps.add(name, t);
  return ps;
}

}  // namespace

TEST_CASE("client sampling sizes follow the tolerant ceiling") {
  RngStream rng(501);
  const auto all = sample_clients(6, JoinRatio{1.0, 1.0}, rng);
  CHECK(all == std::vector<int>{0, 1, 2, 3, 4, 5});

  // 0.05 * 20 must stay at one client despite the float hair above 1.0
  const auto one = sample_clients(20, JoinRatio{0.05, 0.05}, rng);
  CHECK(one.size() == 1);

  const auto four = sample_clients(7, JoinRatio{0.5, 0.5}, rng);
  CHECK(four.size() == 4);  // ceil(3.5)

  for (int trial = 0; trial < 200; ++trial) {
    const auto picked = sample_clients(10, JoinRatio{0.3, 0.9}, rng);
    CHECK(picked.size() >= 3);
    CHECK(picked.size() <= 9);
    std::set<int> uniq(picked.begin(), picked.end());
    CHECK(uniq.size() == picked.size());
    CHECK(std::is_sorted(picked.begin(), picked.end()));
    for (int id : picked) {
      CHECK(id >= 0);
      CHECK(id < 10);
    }
  }

  CHECK_THROWS_AS(sample_clients(5, JoinRatio{0.0, 0.5}, rng), ConfigError);
  CHECK_THROWS_AS(sample_clients(5, JoinRatio{0.2, 1.5}, rng), ConfigError);
  CHECK_THROWS_AS(sample_clients(5, JoinRatio{0.8, 0.2}, rng), ConfigError);
}

TEST_CASE("ranged participation hits its expected mean") {
  RngStream rng(502);
  double total = 0.0;
  const int trials = 4000;
  for (int i = 0; i < trials; ++i)
    total += static_cast<double>(
        sample_clients(10, JoinRatio{0.3, 0.9}, rng).size());
  const double mean = total / trials;  // E[ceil(10 rho)] = 6.5 for U(0.3,0.9)
  CHECK(mean > 6.2);
  CHECK(mean < 6.8);
}

TEST_CASE("pir is the plain mean of the personalized weights") {
  const Tensor s = Tensor::matrix(2, 2, {0.2, 0.4, 0.6, 0.8});
  CHECK(compute_pir(s) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("aggregating a single upload is a bitwise passthrough") {
  RngStream rng(503);
  std::vector<double> w(6);
  for (double& x : w) x = rng.next_normal();
  Upload up;
  up.client_id = 0;
  up.weight = 0.37;  // any positive weight renormalizes to exactly 1
  up.fe = make_ps({{"w0", Tensor({2, 3}, w)}, {"b0", Tensor::zeros({2})}});
  up.head = make_ps({{"w", Tensor::matrix(2, 2, {1, 2, 3, 4})},
                     {"b", Tensor::vector({-1, 1})}});
  const ServerModel out = aggregate_uploads({up});
  CHECK(out.fe.same_bits(up.fe));
  CHECK(out.head.same_bits(up.head));
  CHECK(out.cpn.empty());
}

TEST_CASE("aggregation averages with renormalized weights") {
  auto fe_of = [](double v) {
    return make_ps({{"w0", Tensor::filled({2, 2}, v)}});
  };
  Upload a;
  a.client_id = 0;
  a.weight = 5.0;
  a.fe = fe_of(0.0);
  Upload b;
  b.client_id = 1;
  b.weight = 5.0;
  b.fe = fe_of(2.0);
  const ServerModel mid = aggregate_uploads({a, b});
  for (double v : mid.fe.at("w0").data()) CHECK(v == 1.0);

  // three clients, uneven weights, checked against the loop oracle
  RngStream rng(504);
  std::vector<Upload> ups(3);
  std::vector<std::vector<double>> flat;
  const double weights[] = {0.5, 0.3, 0.2};
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<double> vals(4);
    for (double& v : vals) v = rng.next_normal();
    flat.push_back(vals);
    ups[i].client_id = static_cast<int>(i);
    ups[i].weight = weights[i];
    ups[i].fe = make_ps({{"w0", Tensor({2, 2}, vals)}});
  }
  const ServerModel got = aggregate_uploads(ups);
  const auto want = oracle::weighted_average(flat, {0.5, 0.3, 0.2});
  for (std::size_t j = 0; j < 4; ++j)
    CHECK(std::abs(got.fe.at("w0")[j] - want[j]) <= 1e-12);
}

TEST_CASE("aggregation rejects malformed upload sets") {
  Upload a;
  a.client_id = 0;
  a.weight = 1.0;
  a.fe = make_ps({{"w0", Tensor::filled({2, 2}, 1.0)}});

  CHECK_THROWS_AS(aggregate_uploads({}), ProtocolError);

  Upload zero = a;
  zero.weight = 0.0;
  CHECK_THROWS_AS(aggregate_uploads({zero}), ProtocolError);

  Upload shaped = a;
  shaped.client_id = 1;
  shaped.fe = make_ps({{"w0", Tensor::filled({2, 3}, 1.0)}});
  CHECK_THROWS_AS(aggregate_uploads({a, shaped}), ProtocolError);

  Upload named = a;
  named.client_id = 2;
  named.fe = make_ps({{"w1", Tensor::filled({2, 2}, 1.0)}});
  CHECK_THROWS_AS(aggregate_uploads({a, named}), ProtocolError);

  Upload withhead = a;
  withhead.client_id = 3;
  withhead.head = make_ps({{"w", Tensor::filled({1, 2}, 1.0)}});
  CHECK_THROWS_AS(aggregate_uploads({a, withhead}), ProtocolError);
}

TEST_CASE("broadcast refreshes shared parts and leaves personal heads alone") {
  auto ds = pool(505);
  const NetSpec spec = tiny_spec();
  RunSettings s = base_settings(Algorithm::fedcp, 2, 1, 506);
  Federation fed(s, even_splits(ds, 2), ds);

  const ServerModel& server = fed.server();
  auto& clients = fed.clients();

  // nudge client 0's personal head so the later v refresh is observable
  clients[0].model.personal_head =
      Head(Tensor::filled({3, 4}, 0.5, true), Tensor::zeros({3}, true));
  const Tensor stale_v = clients[0].v;

  const ParamSet c1_fe_before = clients[1].model.personal_fe.params;
  const std::uint64_t c1_head_id = clients[1].model.personal_head.params.at("w").id();

  const std::vector<int> selected{0};
  broadcast_and_overwrite(server, s.traits, spec, selected, clients);

  // selected client: shared parts now mirror the server, head kept
  CHECK(clients[0].model.personal_fe.params.same_bits(server.fe));
  CHECK(clients[0].model.personal_fe.params.at("w0").grad_tracked());
  CHECK(clients[0].model.global_fe->params.same_bits(server.fe));
  CHECK_FALSE(clients[0].model.global_fe->params.at("w0").grad_tracked());
  CHECK(clients[0].model.global_head->params.same_bits(server.head));
  CHECK(clients[0].model.cpn->params.same_bits(server.cpn));
  CHECK(clients[0].model.personal_head.weight()[0] == 0.5);  // untouched
  CHECK_FALSE(clients[0].v.same_bits(stale_v));
  CHECK(clients[0].v.same_bits(client_vector(clients[0].model.personal_head)));

  // unselected client: nothing moves, same handles
  CHECK(clients[1].model.personal_fe.params.same_bits(c1_fe_before));
  CHECK(clients[1].model.personal_head.params.at("w").id() == c1_head_id);

  CHECK_THROWS_AS(
      broadcast_and_overwrite(server, s.traits, spec, std::vector<int>{7},
                              clients),
      ProtocolError);
}

TEST_CASE("fedavg broadcast overwrites the whole shared model") {
  auto ds = pool(507);
  RunSettings s = base_settings(Algorithm::fedavg, 2, 1, 508);
  Federation fed(s, even_splits(ds, 2), ds);
  auto& clients = fed.clients();
  clients[0].model.personal_head =
      Head(Tensor::filled({3, 4}, 0.25, true), Tensor::zeros({3}, true));

  const std::vector<int> selected{0, 1};
  broadcast_and_overwrite(fed.server(), s.traits, s.net, selected, clients);
  CHECK(clients[0].model.personal_head.params.same_bits(fed.server().head));
  CHECK_FALSE(clients[0].model.global_fe.has_value());
  CHECK_FALSE(clients[0].model.global_head.has_value());
}

TEST_CASE("a full round reports losses, accuracies and the policy ratio") {
  auto ds = pool(509);
  RunSettings s = base_settings(Algorithm::fedcp, 3, 3, 510);
  Federation fed(s, even_splits(ds, 3), ds);

  double best = 0.0;
  for (int t = 1; t <= 3; ++t) {
    RoundReport rep = fed.run_round(t);
    CHECK(rep.t == t);
    CHECK(rep.selected == std::vector<int>{0, 1, 2});
    CHECK(std::isfinite(rep.loss_bef));
    CHECK(std::isfinite(rep.loss_aft));
    REQUIRE(rep.client_acc.size() == 3);
    for (const auto& a : rep.client_acc) {
      REQUIRE(a.has_value());
      CHECK(*a >= 0.0);
      CHECK(*a <= 1.0);
    }
    REQUIRE(rep.pir_mean.has_value());
    CHECK(*rep.pir_mean > 0.0);
    CHECK(*rep.pir_mean < 1.0);
    best = std::max(best, rep.acc_mean);
    CHECK(rep.acc_best == best);

    // population standard deviation over the three client accuracies
    double mean = 0.0, var = 0.0;
    for (const auto& a : rep.client_acc) mean += *a;
    mean /= 3.0;
    for (const auto& a : rep.client_acc) var += (*a - mean) * (*a - mean);
    CHECK(rep.acc_std == doctest::Approx(std::sqrt(var / 3.0)).epsilon(1e-12));
  }
  CHECK(fed.best_accuracy() == best);
}

TEST_CASE("variants without a policy net report no ratio and keep heads local") {
  auto ds = pool(511);
  RunSettings s = base_settings(Algorithm::wo_cpn_gh, 2, 2, 512);
  Federation fed(s, even_splits(ds, 2), ds);
  const ParamSet head0 = fed.clients()[0].model.personal_head.params;
  RoundReport rep = fed.run_round(1);
  CHECK_FALSE(rep.pir_mean.has_value());
  // heads never travel: the aggregate carries none
  CHECK(fed.server().head.empty());
  CHECK_FALSE(fed.clients()[0].model.personal_head.params.same_bits(head0));
}

TEST_CASE("clients without data are skipped and the round renormalizes") {
  auto ds = pool(513, 40);  // 120 samples
  RunSettings s2 = base_settings(Algorithm::fedcp, 2, 1, 514);
  std::vector<ClientSplit> splits(2);
  splits[0].train = Shard{ds, range_idx(0, 30)};
  splits[0].test = Shard{ds, range_idx(30, 40)};
  splits[1].train = Shard{ds, {}};  // nothing to train on
  splits[1].test = Shard{ds, range_idx(40, 50)};
  Federation broken(s2, splits, ds);
  RoundReport rep = broken.run_round(1);

  RunSettings s1 = base_settings(Algorithm::fedcp, 1, 1, 514);
  std::vector<ClientSplit> solo(1);
  solo[0].train = Shard{ds, range_idx(0, 30)};
  solo[0].test = Shard{ds, range_idx(30, 40)};
  Federation healthy(s1, solo, ds);
  RoundReport want = healthy.run_round(1);

  // the failed client contributes nothing to the loss means or the server
  CHECK(rep.loss_bef == want.loss_bef);
  CHECK(rep.loss_aft == want.loss_aft);
  CHECK(broken.server().fe.same_bits(healthy.server().fe));
  // it still gets evaluated on its test shard with its broadcast-fresh model
  REQUIRE(rep.client_acc[1].has_value());
}

TEST_CASE("fedavg with one client walks the centralized descent trajectory") {
  auto ds = pool(515, 24);  // 72 samples
  const NetSpec spec = tiny_spec();
  const int rounds = 3;
  RunSettings s = base_settings(Algorithm::fedavg, 1, rounds, 516);
  s.lambda = 0.0;
  std::vector<ClientSplit> splits(1);
  splits[0].train = Shard{ds, range_idx(0, 48)};
  splits[0].test = Shard{ds, range_idx(48, 72)};
  Federation fed(s, splits, ds);

  // independent replay: plain mini-batch SGD on one model, same streams
  SeedTree tree(516);
  RngStream init = tree.stream("init");
  ServerModel model = init_server_model(spec, init, false);
  const VariantTraits traits = make_variant(Algorithm::fedavg);

  for (int t = 1; t <= rounds; ++t) {
    RoundReport rep = fed.run_round(t);

    ClientState mirror;
    mirror.id = 0;
    mirror.model.personal_fe = fe_from_params(spec, model.fe.tracked_copy());
    mirror.model.personal_head = Head(model.head.tracked_copy());
    mirror.train = splits[0].train;
    const double bef = shard_loss(mirror, traits, mirror.train, 0.0, 10);
    CHECK(rep.loss_bef == bef);

    TrainSettings ts{0.05, 0.0, 1, 10};
    RngStream train_rng = tree.stream("train", static_cast<std::uint64_t>(t), 0);
    local_train(mirror, traits, ts, train_rng);
    model.fe = mirror.model.personal_fe.params;
    model.head = mirror.model.personal_head.params;

    // the aggregated server equals the centralized iterate, byte for byte
    CHECK(fed.server().fe.same_bits(model.fe));
    CHECK(fed.server().head.same_bits(model.head));
  }
}

TEST_CASE("round reports are identical across worker counts and reruns") {
  auto ds = pool(517);
  auto run = [&](int workers) {
    RunSettings s = base_settings(Algorithm::fedcp, 4, 3, 518, workers);
    s.join_ratio = JoinRatio{0.5, 1.0};  // exercise the sampler too
    Federation fed(s, even_splits(ds, 4), ds);
    return fed.run_all();
  };
  const auto serial = run(1);
  const auto serial2 = run(1);
  const auto wide = run(4);
  REQUIRE(serial.size() == 3);
  for (std::size_t t = 0; t < 3; ++t) {
    for (const auto* other : {&serial2[t], &wide[t]}) {
      CHECK(serial[t].selected == other->selected);
      CHECK(serial[t].loss_bef == other->loss_bef);
      CHECK(serial[t].loss_aft == other->loss_aft);
      CHECK(serial[t].acc_mean == other->acc_mean);
      CHECK(serial[t].acc_std == other->acc_std);
      REQUIRE(serial[t].pir_mean.has_value() == other->pir_mean.has_value());
      CHECK(*serial[t].pir_mean == *other->pir_mean);
    }
  }
}

TEST_CASE("a federation with no training data anywhere refuses to start") {
  auto ds = pool(519);
  RunSettings s = base_settings(Algorithm::fedcp, 1, 1, 520);
  std::vector<ClientSplit> splits(1);
  splits[0].train = Shard{ds, {}};
  splits[0].test = Shard{ds, range_idx(0, 5)};
  CHECK_THROWS_AS(Federation(s, splits, ds), ConfigError);
}
