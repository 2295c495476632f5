#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "fedcp/training.hpp"

namespace fedcp {

// Fraction of clients joining a round. lo == hi pins it; otherwise each
// round draws uniformly from [lo, hi].
struct JoinRatio {
  double lo = 1.0;
  double hi = 1.0;
  bool fixed() const { return lo == hi; }
};

struct RunSettings {
  std::size_t num_clients = 0;
  int rounds = 0;
  JoinRatio join_ratio;
  double learning_rate = 0.0;
  double lambda = 0.0;
  int epochs = 1;
  int batch_size = 10;
  VariantTraits traits;
  NetSpec net;
  std::uint64_t master_seed = 0;
  int workers = 0;  // <= 0: one thread per hardware core
};

struct RoundReport {
  int t = 0;  // 1-based
  std::vector<int> selected;
  double loss_bef = 0.0;
  double loss_aft = 0.0;
  std::vector<std::optional<double>> client_acc;  // all N clients
  std::vector<std::optional<double>> client_pir;
  double acc_mean = 0.0;
  double acc_std = 0.0;
  double acc_best = 0.0;  // running best of acc_mean
  std::optional<double> pir_mean;
  double wall_seconds = 0.0;
};

// max(1, ceil(rho_t * n)) distinct ids, uniform without replacement, sorted.
std::vector<int> sample_clients(std::size_t n, const JoinRatio& rho,
                                RngStream& rng);

// Mean of the personalized routing weights over a batch of policies.
double compute_pir(const Tensor& s);

struct Upload {
  int client_id = 0;
  double weight = 0.0;  // n_i, renormalized by the aggregator
  ParamSet fe;
  ParamSet head;  // empty when the variant keeps heads local
  ParamSet cpn;   // empty without a policy network
};

// Weighted average of every present component; weights renormalize to 1.
// Uploads must agree on which components they carry and on every shape.
ServerModel aggregate_uploads(const std::vector<Upload>& uploads);

// Push the round-t server snapshot into the selected clients: personal
// extractor and policy net become tracked copies, the frozen extractor and
// global head become frozen copies, the personalized head stays put, and the
// cached client vector is recomputed once. Other clients are untouched.
void broadcast_and_overwrite(const ServerModel& server,
                             const VariantTraits& traits, const NetSpec& net,
                             std::span<const int> selected,
                             std::vector<ClientState>& clients);

// Runs fn(0..n-1) on up to `workers` threads. Results must be written to
// per-index slots; scheduling order is unspecified but every index runs
// exactly once.
void parallel_for(std::size_t n, int workers,
                  const std::function<void(std::size_t)>& fn);

class Federation {
 public:
  Federation(RunSettings settings, std::vector<ClientSplit> splits,
             std::shared_ptr<const Dataset> data);

  // One full round: sample, broadcast, measure, train, fuse, aggregate,
  // evaluate everyone. t is 1-based.
  RoundReport run_round(int t);
  std::vector<RoundReport> run_all(
      const std::function<void(const RoundReport&)>& on_round = {});

  const ServerModel& server() const { return server_; }
  std::vector<ClientState>& clients() { return clients_; }
  const VariantTraits& traits() const { return settings_.traits; }
  double best_accuracy() const { return best_accuracy_; }

 private:
  RunSettings settings_;
  SeedTree seeds_;
  std::shared_ptr<const Dataset> data_;
  ServerModel server_;
  std::vector<ClientState> clients_;
  double best_accuracy_ = 0.0;
  int effective_workers_;
};

}  // namespace fedcp
