#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "fedcp/graph.hpp"
#include "fedcp/rng.hpp"
#include "fedcp/tensor.hpp"

namespace fedcp {

enum class CpnActivation { relu, tanh, sigmoid };
enum class CpnNorm { layer_norm, none };

// Architecture description shared by every client.
struct NetSpec {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden;   // may be empty: direct input -> feature
  std::size_t feature_dim = 0;       // K
  std::size_t num_classes = 0;       // C
  CpnActivation cpn_activation = CpnActivation::relu;
  CpnNorm cpn_norm = CpnNorm::layer_norm;

  std::vector<std::size_t> fe_dims() const;  // {D, hidden..., K}
};

// Stack of linear layers with ReLU between them (none after the last).
// Params: "w0" [h0,D], "b0" [h0], "w1" ...
struct FeatureExtractor {
  std::vector<std::size_t> dims;
  ParamSet params;

  FeatureExtractor() = default;
  FeatureExtractor(std::vector<std::size_t> dims, ParamSet params);

  Tensor forward(Graph& g, const Tensor& x) const;
  std::size_t input_dim() const { return dims.front(); }
  std::size_t feature_dim() const { return dims.back(); }
};

// Affine classifier head. Params: "w" [C,K], "b" [C].
struct Head {
  ParamSet params;

  Head() = default;
  explicit Head(ParamSet params);
  Head(Tensor weight, Tensor bias);

  const Tensor& weight() const { return params.at("w"); }
  const Tensor& bias() const { return params.at("b"); }
  std::size_t classes() const { return weight().rows(); }
  std::size_t feature_dim() const { return weight().cols(); }

  Tensor forward(Graph& g, const Tensor& h) const;
};

// Per-sample split of the feature vector: r routes to the global head,
// s to the personalized one; r + s = 1 elementwise.
struct Policy {
  Tensor r;  // [B,K]
  Tensor s;  // [B,K]
};

// Policy network: FC K -> 2K, optional layer norm over the whole activation
// row, nonlinearity, then a softmax over each adjacent pair (a[2k], a[2k+1]).
// Params: "fc_w" [2K,K], "fc_b" [2K], and with layer norm "ln_g"/"ln_b" [2K].
struct Cpn {
  CpnActivation activation = CpnActivation::relu;
  CpnNorm norm = CpnNorm::layer_norm;
  ParamSet params;

  Cpn() = default;
  Cpn(CpnActivation activation, CpnNorm norm, ParamSet params);

  std::size_t feature_dim() const { return params.at("fc_w").cols(); }
  Policy forward(Graph& g, const Tensor& c) const;
};

// Everything one client holds. Frozen members are refreshed only by the
// broadcast step; personal members are the grad-tracked ones local SGD moves.
// Optional members stay empty for ablation variants that drop them.
struct ModelBundle {
  FeatureExtractor personal_fe;
  Head personal_head;
  std::optional<FeatureExtractor> global_fe;  // frozen
  std::optional<Head> global_head;            // frozen
  std::optional<Cpn> cpn;

  // Size of the personalized model: personal extractor + both heads + policy
  // network. The frozen extractor copy is a training-time auxiliary and does
  // not count.
  std::size_t value_count() const;
};

// Server-side snapshot of the shared components. cpn stays empty for
// variants that have no policy network.
struct ServerModel {
  ParamSet fe;
  ParamSet head;
  ParamSet cpn;
};

// Draw fresh parameters: weights ~ U(-1/sqrt(fan_in), +1/sqrt(fan_in)) leaf
// by leaf in declaration order, biases zero, layer-norm gain 1 / bias 0.
// Deterministic in the stream.
ServerModel init_server_model(const NetSpec& spec, RngStream& rng,
                              bool with_cpn);

FeatureExtractor fe_from_params(const NetSpec& spec, ParamSet params);
Cpn cpn_from_params(const NetSpec& spec, ParamSet params);

}  // namespace fedcp
