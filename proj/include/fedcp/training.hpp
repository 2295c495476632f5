#pragma once

#include <optional>
#include <string_view>
#include <vector>

#include "fedcp/data.hpp"
#include "fedcp/nn.hpp"
#include "fedcp/rng.hpp"

namespace fedcp {

enum class Algorithm {
  fedcp,
  fedavg,
  wo_cs,          // policy input drops the client vector
  wo_ss,          // policy input drops the sample features
  wo_cs_ss,       // policy input is a frozen random vector
  wo_gfm,         // no frozen extractor / feature alignment term
  wo_cpn,         // both heads see the full feature vector
  wo_cpn_gfm,     // wo_cpn, alignment term also dropped
  wo_cpn_gh,      // personalized head only, heads never uploaded
  wo_cpn_gfm_gh,  // wo_cpn_gh, alignment term also dropped
};

// Behavior switches resolved from the algorithm id.
struct VariantTraits {
  Algorithm id = Algorithm::fedcp;
  bool uses_cpn = true;
  bool uses_global_head = true;
  bool uses_mmd = true;
  bool uploads_head = true;
  bool single_model = false;  // fedavg: one shared model, no personalization
  enum class PolicyInput { combined, sample_only, client_only, frozen_random };
  PolicyInput policy_input = PolicyInput::combined;
};

VariantTraits make_variant(Algorithm id);
Algorithm algorithm_from_name(std::string_view name);  // config error on unknown
std::string_view algorithm_name(Algorithm id);

struct ClientState {
  int id = 0;
  ModelBundle model;
  Tensor v;  // cached client vector, refreshed at each overwrite
  Tensor frozen_policy_input;  // wo_cs_ss only
  Shard train;
  Shard test;
  double n_weight = 0.0;  // |train| / sum over clients
};

// Column sums of the personalized head weight; the bias stays out.
Tensor client_vector(const Head& head);

// v scaled to unit length, or the all-ones direction (1/sqrt(K) per entry)
// when ||v|| < 1e-12.
Tensor unit_direction(const Tensor& v);

struct ForwardOut {
  Tensor h;       // features from the personal extractor
  Tensor logits;
  Policy policy;  // meaningful only when has_policy
  bool has_policy = false;
};

ForwardOut model_forward(Graph& g, const ClientState& client,
                         const VariantTraits& traits, const Tensor& x);

// Biased MMD^2 between feature batches under an RBF bank. Bandwidths default
// to median_sq_dist * {1/4, 1/2, 1, 2, 4} over the joint batch, computed
// outside the graph (no gradient through the bandwidth). Either side smaller
// than 2 rows returns plain zero with a notice. pinned_bandwidths overrides
// the bank for exact-value tests.
Tensor mmd_loss(Graph& g, const Tensor& h_personal, const Tensor& h_global,
                const std::vector<double>& pinned_bandwidths = {});

// Full local objective: CE(logits, y) + lambda * MMD(h, frozen features).
Tensor local_loss(Graph& g, const ClientState& client,
                  const VariantTraits& traits, const Tensor& x,
                  const std::vector<int>& y, double lambda);

struct TrainSettings {
  double learning_rate = 0.0;
  double lambda = 0.0;
  int epochs = 1;
  int batch_size = 10;
};

struct TrainStats {
  std::vector<double> epoch_mean_loss;
};

// Epochs of shuffled mini-batch SGD on the personal extractor, personal head
// and policy net simultaneously. Frozen components and the cached v stay
// untouched.
TrainStats local_train(ClientState& client, const VariantTraits& traits,
                       const TrainSettings& settings, RngStream& rng);

// Mean local objective over a shard, evaluated in consecutive chunks of
// batch_size (the MMD term follows the same skip rule as training).
double shard_loss(const ClientState& client, const VariantTraits& traits,
                  const Shard& shard, double lambda, int batch_size);

// (W_global + W_personal) / 2, biases averaged the same way.
Head fuse_upload_head(const Head& global_head, const Head& personal_head);

struct EvalResult {
  std::optional<double> accuracy;  // absent on an empty shard
  std::optional<double> pir;       // absent without a policy network
};

// Argmax accuracy over a shard (ties resolve to the lowest class index) and,
// when a policy network is present, the mean personalized information ratio
// (mean over samples and feature slots of s).
EvalResult evaluate_client(const ClientState& client,
                           const VariantTraits& traits, const Shard& shard);

}  // namespace fedcp
