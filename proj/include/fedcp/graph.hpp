#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fedcp/tensor.hpp"

namespace fedcp {

// Gradients produced by Graph::backward, keyed by leaf identity.
class GradMap {
 public:
  // Gradient for a tracked leaf; an all-zero tensor if the loss never touched
  // it. Asking for a frozen (untracked) tensor is a usage error.
  Tensor at(const Tensor& leaf) const;
  bool touched(const Tensor& leaf) const;
  std::size_t size() const { return grads_.size(); }

 private:
  std::unordered_map<std::uint64_t, Tensor> grads_;
  friend class Graph;
};

// Ordered, name-keyed collection of tensors for one network role.
class ParamSet {
 public:
  void add(std::string name, Tensor t);
  const Tensor& at(std::string_view name) const;
  bool has(std::string_view name) const;
  bool empty() const { return items_.empty(); }
  std::size_t size() const { return items_.size(); }
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }

  ParamSet tracked_copy() const;
  ParamSet frozen_copy() const;
  std::size_t value_count() const;  // total scalar elements
  bool same_bits(const ParamSet& other) const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

// One SGD step: tracked entries become p - lr * g, frozen entries pass
// through unchanged (same handle, same bytes).
ParamSet sgd_step(const ParamSet& params, const GradMap& grads, double lr);

// Eager tape. Every op validates shapes, computes its value immediately and
// records a node; backward replays the tape strictly in reverse creation
// order, accumulating into per-tensor slots so fan-out just adds up. Work is
// pruned through subgraphs that cannot reach a tracked leaf.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Tensor matmul(const Tensor& a, const Tensor& b);
  // a · b^T; rows of b are the output features (linear-layer layout)
  Tensor matmul_nt(const Tensor& a, const Tensor& b);
  // elementwise; b may also be a length-K vector broadcast over a's rows
  Tensor hadamard(const Tensor& a, const Tensor& b);
  // same broadcast rule as hadamard (bias addition)
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& a, double c);
  Tensor relu(const Tensor& a);
  Tensor tanh(const Tensor& a);
  Tensor sigmoid(const Tensor& a);
  // per-row normalization with learned affine; biased variance
  Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias,
                    double eps = 1e-5);
  Tensor reshape(const Tensor& a, Shape to);
  // [B,K,2] -> [B,K], picking lane 0 or 1 of each pair
  Tensor pair_lane(const Tensor& a, int lane);
  // softmax over the trailing pairs of a [B,K,2] tensor, max-subtracted
  Tensor pair_softmax(const Tensor& a);
  // mean-reduced CE over integer labels, log-sum-exp stabilized
  Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);
  Tensor sum(const Tensor& a);
  // biased MMD^2 between row sets, RBF kernel averaged over the given
  // squared-distance bandwidths (treated as constants)
  Tensor rbf_mmd(const Tensor& a, const Tensor& b,
                 const std::vector<double>& bandwidths);

  GradMap backward(const Tensor& loss) const;
  std::size_t node_count() const { return nodes_.size(); }

 private:
  enum class Op {
    kMatmul,
    kMatmulNT,
    kHadamard,
    kAdd,
    kSub,
    kScale,
    kRelu,
    kTanh,
    kSigmoid,
    kLayerNorm,
    kReshape,
    kPairLane,
    kPairSoftmax,
    kCrossEntropy,
    kSum,
    kRbfMmd,
  };

  struct Node {
    Op op;
    std::vector<Tensor> in;
    Tensor out;
    std::vector<double> faux;  // eps / scale factor / bandwidths
    std::vector<int> iaux;     // labels / lane
  };

  Tensor record(Op op, std::vector<Tensor> in, Shape out_shape,
                std::vector<double> out_values, std::vector<double> faux = {},
                std::vector<int> iaux = {});
  void node_backward(const Node& n, const std::vector<double>& gout,
                     std::vector<std::vector<double>*>& gin) const;

  std::vector<Node> nodes_;
  std::unordered_map<std::uint64_t, std::size_t> produced_;
};

}  // namespace fedcp
