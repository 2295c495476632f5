#include "fedcp/runtime.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <thread>

#include "fedcp/notice.hpp"

namespace fedcp {

std::vector<int> sample_clients(std::size_t n, const JoinRatio& rho,
                                RngStream& rng) {
  if (n == 0) throw ConfigError("sample: no clients");
  if (!(rho.lo > 0.0) || rho.lo > rho.hi || rho.hi > 1.0)
    throw ConfigError("sample: join ratio must satisfy 0 < lo <= hi <= 1");
  const double drawn = rho.fixed() ? rho.lo : rng.next_uniform(rho.lo, rho.hi);
  const double x = drawn * static_cast<double>(n);
  // tolerant ceil: 0.05 * 20 lands a hair above 1.0 and must still mean 1
  double c = std::ceil(x);
  if (x - std::floor(x) < 1e-9) c = std::floor(x);
  std::size_t count = static_cast<std::size_t>(std::max(1.0, c));
  count = std::min(count, n);

  std::vector<int> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t j = i + static_cast<std::size_t>(rng.next_below(n - i));
    std::swap(ids[i], ids[j]);
  }
  ids.resize(count);
  std::sort(ids.begin(), ids.end());
  return ids;
}

double compute_pir(const Tensor& s) {
  auto S = s.data();
  if (S.empty()) throw InputError("pir: empty policy");
  double acc = 0.0;
  for (double v : S) acc += v;
  return acc / static_cast<double>(S.size());
}

ServerModel aggregate_uploads(const std::vector<Upload>& uploads) {
  if (uploads.empty()) throw ProtocolError("aggregate: no uploads");
  double total = 0.0;
  for (const auto& u : uploads) {
    if (!(u.weight > 0.0))
      throw ProtocolError("aggregate: non-positive weight from client " +
                          std::to_string(u.client_id));
    total += u.weight;
  }

  auto combine = [&](auto component) {
    const ParamSet& first = uploads.front().*component;
    ParamSet out;
    for (std::size_t k = 0; k < first.size(); ++k) {
      const auto& [name, proto] = first.items()[k];
      std::vector<double> acc(proto.size(), 0.0);
      for (const auto& u : uploads) {
        const ParamSet& ps = u.*component;
        if (ps.size() != first.size() || ps.items()[k].first != name ||
            ps.items()[k].second.shape() != proto.shape())
          throw ProtocolError("aggregate: upload from client " +
                              std::to_string(u.client_id) +
                              " disagrees on '" + name + "'");
        const double w = u.weight / total;
        auto src = ps.items()[k].second.data();
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * src[i];
      }
      out.add(name, Tensor(proto.shape(), std::move(acc)));
    }
    return out;
  };

  for (const auto& u : uploads) {
    if (u.fe.empty())
      throw ProtocolError("aggregate: upload from client " +
                          std::to_string(u.client_id) + " carries no extractor");
    if (u.head.empty() != uploads.front().head.empty() ||
        u.cpn.empty() != uploads.front().cpn.empty())
      throw ProtocolError("aggregate: uploads disagree on which components they carry");
  }

  ServerModel m;
  m.fe = combine(&Upload::fe);
  if (!uploads.front().head.empty()) m.head = combine(&Upload::head);
  if (!uploads.front().cpn.empty()) m.cpn = combine(&Upload::cpn);
  return m;
}

void broadcast_and_overwrite(const ServerModel& server,
                             const VariantTraits& traits, const NetSpec& net,
                             std::span<const int> selected,
                             std::vector<ClientState>& clients) {
  for (int id : selected) {
    if (id < 0 || static_cast<std::size_t>(id) >= clients.size())
      throw ProtocolError("broadcast: client id " + std::to_string(id) +
                          " out of range");
    ClientState& c = clients[static_cast<std::size_t>(id)];
    c.model.personal_fe = fe_from_params(net, server.fe.tracked_copy());
    if (traits.uses_mmd)
      c.model.global_fe = fe_from_params(net, server.fe.frozen_copy());
    if (traits.uses_global_head)
      c.model.global_head = Head(server.head.frozen_copy());
    if (traits.single_model)
      c.model.personal_head = Head(server.head.tracked_copy());
    if (traits.uses_cpn) {
      c.model.cpn = cpn_from_params(net, server.cpn.tracked_copy());
      c.v = client_vector(c.model.personal_head);
    }
  }
}

void parallel_for(std::size_t n, int workers,
                  const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  std::size_t w = workers > 0 ? static_cast<std::size_t>(workers) : 1;
  w = std::min(w, n);
  if (w <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(w);
  for (std::size_t t = 0; t < w; ++t)
    pool.emplace_back([&] {
      for (;;) {
        std::size_t i = next.fetch_add(1, std::memory_order_relaxed);
        if (i >= n) return;
        fn(i);
      }
    });
  for (auto& th : pool) th.join();
}

Federation::Federation(RunSettings settings, std::vector<ClientSplit> splits,
                       std::shared_ptr<const Dataset> data)
    : settings_(std::move(settings)),
      seeds_(settings_.master_seed),
      data_(std::move(data)) {
  const std::size_t n = settings_.num_clients;
  if (n == 0) throw ConfigError("federation: need at least one client");
  if (splits.size() != n)
    throw ProtocolError("federation: " + std::to_string(splits.size()) +
                        " splits for " + std::to_string(n) + " clients");
  effective_workers_ =
      settings_.workers > 0
          ? settings_.workers
          : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));

  RngStream init_rng = seeds_.stream("init");
  server_ = init_server_model(settings_.net, init_rng,
                              settings_.traits.uses_cpn);

  double total_train = 0.0;
  for (const auto& s : splits) total_train += static_cast<double>(s.train.size());
  if (!(total_train > 0.0))
    throw ConfigError("federation: no training samples across clients");

  const VariantTraits& tr = settings_.traits;
  clients_.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    ClientState c;
    c.id = static_cast<int>(i);
    c.train = std::move(splits[i].train);
    c.test = std::move(splits[i].test);
    c.n_weight = static_cast<double>(c.train.size()) / total_train;
    // round 0 hands the fresh server snapshot to every client, so the
    // personalized head starts from the shared draw too
    c.model.personal_fe = fe_from_params(settings_.net, server_.fe.tracked_copy());
    c.model.personal_head = Head(server_.head.tracked_copy());
    if (tr.uses_mmd)
      c.model.global_fe = fe_from_params(settings_.net, server_.fe.frozen_copy());
    if (tr.uses_global_head) c.model.global_head = Head(server_.head.frozen_copy());
    if (tr.uses_cpn) {
      c.model.cpn = cpn_from_params(settings_.net, server_.cpn.tracked_copy());
      c.v = client_vector(c.model.personal_head);
    }
    if (tr.policy_input == VariantTraits::PolicyInput::frozen_random) {
      RngStream r = seeds_.stream("cpn_input", 0, i);
      std::vector<double> vals(settings_.net.feature_dim);
      for (double& v : vals) v = r.next_normal();
      // size first: arguments are indeterminately sequenced against the move
      const std::size_t dim = vals.size();
      c.frozen_policy_input = Tensor({dim}, std::move(vals));
    }
    clients_.push_back(std::move(c));
  }
}

RoundReport Federation::run_round(int t) {
  const auto t0 = std::chrono::steady_clock::now();
  const VariantTraits& tr = settings_.traits;
  const std::size_t n = clients_.size();

  RoundReport rep;
  rep.t = t;

  RngStream round_rng = seeds_.stream("round", static_cast<std::uint64_t>(t));
  rep.selected = sample_clients(n, settings_.join_ratio, round_rng);
  broadcast_and_overwrite(server_, tr, settings_.net, rep.selected, clients_);

  struct TaskOut {
    bool ok = false;
    double bef = 0.0, aft = 0.0;
    Upload up;
    std::string error;
  };
  std::vector<TaskOut> outs(rep.selected.size());
  TrainSettings ts{settings_.learning_rate, settings_.lambda, settings_.epochs,
                   settings_.batch_size};

  parallel_for(rep.selected.size(), effective_workers_, [&](std::size_t i) {
    TaskOut& o = outs[i];
    try {
      ClientState& c = clients_[static_cast<std::size_t>(rep.selected[i])];
      o.bef = shard_loss(c, tr, c.train, settings_.lambda, settings_.batch_size);
      RngStream train_rng = seeds_.stream("train", static_cast<std::uint64_t>(t),
                                          static_cast<std::uint64_t>(c.id));
      local_train(c, tr, ts, train_rng);
      o.aft = shard_loss(c, tr, c.train, settings_.lambda, settings_.batch_size);
      o.up.client_id = c.id;
      o.up.weight = c.n_weight;
      o.up.fe = c.model.personal_fe.params;
      if (tr.single_model)
        o.up.head = c.model.personal_head.params;
      else if (tr.uploads_head)
        o.up.head =
            fuse_upload_head(*c.model.global_head, c.model.personal_head).params;
      if (tr.uses_cpn) o.up.cpn = c.model.cpn->params;
      o.ok = true;
    } catch (const std::exception& e) {
      o.error = e.what();
    }
  });

  std::vector<Upload> uploads;
  double wsum = 0.0;
  for (std::size_t i = 0; i < outs.size(); ++i) {
    if (!outs[i].ok) {
      notice("client-failed", "round " + std::to_string(t) + ": client " +
                                  std::to_string(rep.selected[i]) +
                                  " skipped (" + outs[i].error + ")");
      continue;
    }
    wsum += outs[i].up.weight;
    uploads.push_back(std::move(outs[i].up));
  }
  if (uploads.empty())
    throw ProtocolError("round " + std::to_string(t) +
                        ": every selected client failed");
  for (std::size_t i = 0; i < outs.size(); ++i) {
    if (!outs[i].ok) continue;
    const double w = clients_[static_cast<std::size_t>(rep.selected[i])].n_weight / wsum;
    rep.loss_bef += w * outs[i].bef;
    rep.loss_aft += w * outs[i].aft;
  }

  server_ = aggregate_uploads(uploads);

  // evaluation covers every client, selected or not
  rep.client_acc.assign(n, std::nullopt);
  rep.client_pir.assign(n, std::nullopt);
  if (tr.single_model) {
    // the model of record is the freshly aggregated shared one
    ClientState shared;
    shared.model.personal_fe = fe_from_params(settings_.net, server_.fe.frozen_copy());
    shared.model.personal_head = Head(server_.head.frozen_copy());
    parallel_for(n, effective_workers_, [&](std::size_t i) {
      EvalResult r = evaluate_client(shared, tr, clients_[i].test);
      rep.client_acc[i] = r.accuracy;
    });
  } else {
    parallel_for(n, effective_workers_, [&](std::size_t i) {
      EvalResult r = evaluate_client(clients_[i], tr, clients_[i].test);
      rep.client_acc[i] = r.accuracy;
      rep.client_pir[i] = r.pir;
    });
  }

  double acc_sum = 0.0;
  std::size_t acc_n = 0;
  for (const auto& a : rep.client_acc)
    if (a) {
      acc_sum += *a;
      ++acc_n;
    }
  if (acc_n > 0) {
    rep.acc_mean = acc_sum / static_cast<double>(acc_n);
    double var = 0.0;
    for (const auto& a : rep.client_acc)
      if (a) var += (*a - rep.acc_mean) * (*a - rep.acc_mean);
    rep.acc_std = std::sqrt(var / static_cast<double>(acc_n));
  } else {
    rep.acc_mean = std::numeric_limits<double>::quiet_NaN();
    rep.acc_std = std::numeric_limits<double>::quiet_NaN();
  }
  if (!std::isnan(rep.acc_mean)) best_accuracy_ = std::max(best_accuracy_, rep.acc_mean);
  rep.acc_best = best_accuracy_;

  if (tr.uses_cpn) {
    double pir_sum = 0.0;
    std::size_t pir_n = 0;
    for (const auto& p : rep.client_pir)
      if (p) {
        pir_sum += *p;
        ++pir_n;
      }
    if (pir_n > 0) rep.pir_mean = pir_sum / static_cast<double>(pir_n);
  }

  rep.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

std::vector<RoundReport> Federation::run_all(
    const std::function<void(const RoundReport&)>& on_round) {
  std::vector<RoundReport> reports;
  reports.reserve(static_cast<std::size_t>(settings_.rounds));
  for (int t = 1; t <= settings_.rounds; ++t) {
    reports.push_back(run_round(t));
    if (on_round) on_round(reports.back());
  }
  return reports;
}

}  // namespace fedcp
