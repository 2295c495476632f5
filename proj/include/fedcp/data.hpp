#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fedcp/rng.hpp"
#include "fedcp/tensor.hpp"

namespace fedcp {

// Flat labelled dataset; features are [N,D] with one row per sample.
struct Dataset {
  Tensor features;
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.cols(); }
};

// Reads the classic big-endian IDX pair (images magic 0x00000803, labels
// magic 0x00000801). Pixels land in [0,1] as value/255. Malformed input
// raises a format error naming the byte offset.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

// Gaussian blobs: class means drawn uniformly on the unit sphere, samples
// mean + spread * standard normal per coordinate. Sample order is
// class-major and deterministic in the stream.
Dataset synth_clusters(std::size_t classes, std::size_t dim,
                       std::size_t per_class, double spread, RngStream& rng);

struct PartitionPlan {
  enum class Scheme { pathological, dirichlet };
  Scheme scheme = Scheme::dirichlet;
  std::uint64_t seed = 0;
  double beta = 0.0;                    // dirichlet
  std::size_t classes_per_client = 0;   // pathological
  std::vector<std::vector<std::size_t>> assignments;  // per client
  // dirichlet only: the drawn per-class proportions, [class][client], kept
  // for auditing
  std::vector<std::vector<double>> class_proportions;
};

// Label-skewed split: sort by label, cut each class into ceil(N*m/C) shards
// whose sizes are jittered +-25% around equal, hand every client m shards of
// distinct classes, then deal the uncut remainder round-robin without
// growing any client's class set.
PartitionPlan partition_pathological(const Dataset& ds, std::size_t num_clients,
                                     std::size_t classes_per_client,
                                     std::uint64_t seed);

// Per class, draw proportions ~ Dirichlet(beta * 1_N) via normalized gamma
// draws and hand out contiguous chunks of the shuffled class indices
// (largest-remainder rounding). Redraws the whole plan (up to 100 attempts)
// until every client holds at least min_samples samples.
PartitionPlan partition_dirichlet(const Dataset& ds, std::size_t num_clients,
                                  double beta, std::uint64_t seed,
                                  std::size_t min_samples = 10);

// View into a dataset owned elsewhere.
struct Shard {
  std::shared_ptr<const Dataset> data;
  std::vector<std::size_t> idx;
  std::size_t size() const { return idx.size(); }
};

struct ClientSplit {
  Shard train;
  Shard test;
};

// Stratified per-label split. Each label seeds the test side with
// floor(count*(1-ratio)) samples (at least 1 when the label has >= 4), then
// a largest-remainder top-up lands the client total exactly on
// floor(n*(1-ratio)) — 100 samples at 0.75 always give 75/25. Ties go to the
// lower label. Clients need >= 4 samples.
std::vector<ClientSplit> split_train_test(const PartitionPlan& plan,
                                          std::shared_ptr<const Dataset> ds,
                                          double train_ratio,
                                          std::uint64_t seed);

// One client per line: id, then its sample indices in ascending order.
std::string plan_sidecar(const PartitionPlan& plan);

Tensor gather_features(const Dataset& ds, std::span<const std::size_t> rows);
std::vector<int> gather_labels(const Dataset& ds,
                               std::span<const std::size_t> rows);

}  // namespace fedcp
