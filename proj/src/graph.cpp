#include "fedcp/graph.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>

namespace fedcp {

namespace {

const char* op_name(int op) {
  static const char* names[] = {
      "matmul", "matmul_nt", "hadamard",     "add",           "sub",  "scale",
      "relu",   "tanh",      "sigmoid",      "layer_norm",    "reshape",
      "pair_lane", "pair_softmax", "cross_entropy", "sum", "rbf_mmd"};
  return names[op];
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

// true when b may broadcast over a's rows: a is [B,K], b is [K] or [1,K]
bool row_broadcast(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2) return false;
  if (b.rank() == 1 && b.size() == a.cols()) return true;
  if (b.rank() == 2 && b.rows() == 1 && b.cols() == a.cols()) return true;
  return false;
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// ---------------------------------------------------------------------------
// GradMap / ParamSet
// ---------------------------------------------------------------------------

Tensor GradMap::at(const Tensor& leaf) const {
  if (!leaf.grad_tracked())
    throw UsageError("grad: tensor is frozen, no gradient is ever kept for it");
  auto it = grads_.find(leaf.id());
  if (it == grads_.end()) return Tensor::zeros(leaf.shape());
  return it->second;
}

bool GradMap::touched(const Tensor& leaf) const {
  return !leaf.empty() && grads_.count(leaf.id()) > 0;
}

void ParamSet::add(std::string name, Tensor t) {
  if (has(name)) throw UsageError("param set: duplicate name '" + name + "'");
  if (t.empty()) throw UsageError("param set: empty tensor for '" + name + "'");
  items_.emplace_back(std::move(name), std::move(t));
}

const Tensor& ParamSet::at(std::string_view name) const {
  for (const auto& [n, t] : items_)
    if (n == name) return t;
  throw UsageError("param set: no entry named '" + std::string(name) + "'");
}

bool ParamSet::has(std::string_view name) const {
  for (const auto& [n, t] : items_)
    if (n == name) return true;
  return false;
}

ParamSet ParamSet::tracked_copy() const {
  ParamSet out;
  for (const auto& [n, t] : items_) out.add(n, t.tracked_copy());
  return out;
}

ParamSet ParamSet::frozen_copy() const {
  ParamSet out;
  for (const auto& [n, t] : items_) out.add(n, t.frozen_copy());
  return out;
}

std::size_t ParamSet::value_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : items_) n += t.size();
  return n;
}

bool ParamSet::same_bits(const ParamSet& other) const {
  if (items_.size() != other.items_.size()) return false;
  for (std::size_t i = 0; i < items_.size(); ++i) {
    if (items_[i].first != other.items_[i].first) return false;
    if (!items_[i].second.same_bits(other.items_[i].second)) return false;
  }
  return true;
}

ParamSet sgd_step(const ParamSet& params, const GradMap& grads, double lr) {
  ParamSet out;
  for (const auto& [name, p] : params.items()) {
    if (!p.grad_tracked()) {
      out.add(name, p);  // frozen: same handle, untouched
      continue;
    }
    Tensor g = grads.at(p);
    if (g.shape() != p.shape())
      throw UsageError("sgd_step: gradient shape mismatch for '" + name + "'");
    auto pd = p.data();
    auto gd = g.data();
    std::vector<double> next(pd.size());
    for (std::size_t i = 0; i < pd.size(); ++i) next[i] = pd[i] - lr * gd[i];
    out.add(name, Tensor(p.shape(), std::move(next), true));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Graph: recording
// ---------------------------------------------------------------------------

Tensor Graph::record(Op op, std::vector<Tensor> in, Shape out_shape,
                     std::vector<double> out_values, std::vector<double> faux,
                     std::vector<int> iaux) {
  for (double v : out_values) {
    if (!std::isfinite(v))
      throw NumericFault(std::string("numeric fault: ") +
                         op_name(static_cast<int>(op)) +
                         " produced a non-finite value");
  }
  bool needs = false;
  for (const Tensor& t : in) needs = needs || t.requires_grad();
  Tensor out = Tensor::make(std::move(out_shape), std::move(out_values),
                            /*tracked=*/false, needs);
  produced_.emplace(out.id(), nodes_.size());
  nodes_.push_back(Node{op, std::move(in), out, std::move(faux), std::move(iaux)});
  return out;
}

// ---------------------------------------------------------------------------
// Graph: forward ops
// ---------------------------------------------------------------------------

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2,
          "matmul: needs rank-2 inputs, got " + shape_str(a.shape()) + " and " +
              shape_str(b.shape()));
  require(a.cols() == b.rows(),
          "matmul: inner dims disagree, " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  const double* A = a.data().data();
  const double* B = b.data().data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      const double* brow = B + p * n;
      double* crow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  return record(Op::kMatmul, {a, b}, {m, n}, std::move(out));
}

Tensor Graph::matmul_nt(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2,
          "matmul_nt: needs rank-2 inputs, got " + shape_str(a.shape()) +
              " and " + shape_str(b.shape()));
  require(a.cols() == b.cols(),
          "matmul_nt: inner dims disagree, " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()) + " transposed");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  const double* A = a.data().data();
  const double* B = b.data().data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double* ar = A + i * k;
      const double* br = B + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += ar[p] * br[p];
      out[i * n + j] = acc;
    }
  return record(Op::kMatmulNT, {a, b}, {m, n}, std::move(out));
}

Tensor Graph::hadamard(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    auto A = a.data();
    auto B = b.data();
    std::vector<double> out(A.size());
    for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] * B[i];
    return record(Op::kHadamard, {a, b}, a.shape(), std::move(out));
  }
  require(row_broadcast(a, b),
          "hadamard: shapes " + shape_str(a.shape()) + " and " +
              shape_str(b.shape()) + " neither match nor row-broadcast");
  const std::size_t r = a.rows(), c = a.cols();
  auto A = a.data();
  auto B = b.data();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = A[i * c + j] * B[j];
  return record(Op::kHadamard, {a, b}, a.shape(), std::move(out));
}

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    auto A = a.data();
    auto B = b.data();
    std::vector<double> out(A.size());
    for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] + B[i];
    return record(Op::kAdd, {a, b}, a.shape(), std::move(out));
  }
  require(row_broadcast(a, b),
          "add: shapes " + shape_str(a.shape()) + " and " +
              shape_str(b.shape()) + " neither match nor row-broadcast");
  const std::size_t r = a.rows(), c = a.cols();
  auto A = a.data();
  auto B = b.data();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = A[i * c + j] + B[j];
  return record(Op::kAdd, {a, b}, a.shape(), std::move(out));
}

Tensor Graph::sub(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "sub: shapes " + shape_str(a.shape()) +
                                      " and " + shape_str(b.shape()) +
                                      " disagree");
  auto A = a.data();
  auto B = b.data();
  std::vector<double> out(A.size());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] - B[i];
  return record(Op::kSub, {a, b}, a.shape(), std::move(out));
}

Tensor Graph::scale(const Tensor& a, double c) {
  auto A = a.data();
  std::vector<double> out(A.size());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = c * A[i];
  return record(Op::kScale, {a}, a.shape(), std::move(out), {c});
}

Tensor Graph::relu(const Tensor& a) {
  auto A = a.data();
  std::vector<double> out(A.size());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] > 0.0 ? A[i] : 0.0;
  return record(Op::kRelu, {a}, a.shape(), std::move(out));
}

Tensor Graph::tanh(const Tensor& a) {
  auto A = a.data();
  std::vector<double> out(A.size());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = std::tanh(A[i]);
  return record(Op::kTanh, {a}, a.shape(), std::move(out));
}

Tensor Graph::sigmoid(const Tensor& a) {
  auto A = a.data();
  std::vector<double> out(A.size());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = stable_sigmoid(A[i]);
  return record(Op::kSigmoid, {a}, a.shape(), std::move(out));
}

Tensor Graph::layer_norm(const Tensor& a, const Tensor& gain,
                         const Tensor& bias, double eps) {
  require(a.rank() == 2, "layer_norm: input must be rank 2, got " +
                             shape_str(a.shape()));
  const std::size_t r = a.rows(), d = a.cols();
  require(gain.rank() == 1 && gain.size() == d,
          "layer_norm: gain must be length " + std::to_string(d));
  require(bias.rank() == 1 && bias.size() == d,
          "layer_norm: bias must be length " + std::to_string(d));
  if (!(eps > 0.0)) throw InputError("layer_norm: eps must be positive");
  auto A = a.data();
  auto G = gain.data();
  auto B = bias.data();
  std::vector<double> out(r * d);
  for (std::size_t i = 0; i < r; ++i) {
    const double* x = A.data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += x[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j)
      out[i * d + j] = (x[j] - mu) * inv * G[j] + B[j];
  }
  return record(Op::kLayerNorm, {a, gain, bias}, a.shape(), std::move(out),
                {eps});
}

Tensor Graph::reshape(const Tensor& a, Shape to) {
  std::size_t n = 1;
  for (std::size_t d : to) n *= d;
  require(n == a.size(), "reshape: " + shape_str(a.shape()) + " to " +
                             shape_str(to) + " changes element count");
  auto A = a.data();
  return record(Op::kReshape, {a}, std::move(to),
                std::vector<double>(A.begin(), A.end()));
}

Tensor Graph::pair_lane(const Tensor& a, int lane) {
  require(a.rank() == 3 && a.dim(2) == 2,
          "pair_lane: input must be [B,K,2], got " + shape_str(a.shape()));
  if (lane != 0 && lane != 1) throw InputError("pair_lane: lane must be 0 or 1");
  const std::size_t b = a.dim(0), k = a.dim(1);
  auto A = a.data();
  std::vector<double> out(b * k);
  for (std::size_t i = 0; i < b * k; ++i)
    out[i] = A[i * 2 + static_cast<std::size_t>(lane)];
  return record(Op::kPairLane, {a}, {b, k}, std::move(out), {}, {lane});
}

Tensor Graph::pair_softmax(const Tensor& a) {
  require(a.rank() == 3 && a.dim(2) == 2,
          "pair_softmax: input must be [B,K,2], got " + shape_str(a.shape()));
  auto A = a.data();
  std::vector<double> out(A.size());
  for (std::size_t i = 0; i < A.size(); i += 2) {
    const double m = std::max(A[i], A[i + 1]);
    const double e0 = std::exp(A[i] - m);
    const double e1 = std::exp(A[i + 1] - m);
    const double z = e0 + e1;
    out[i] = e0 / z;
    out[i + 1] = e1 / z;
  }
  return record(Op::kPairSoftmax, {a}, a.shape(), std::move(out));
}

Tensor Graph::cross_entropy(const Tensor& logits,
                            const std::vector<int>& labels) {
  require(logits.rank() == 2, "cross_entropy: logits must be [B,C], got " +
                                  shape_str(logits.shape()));
  const std::size_t b = logits.rows(), c = logits.cols();
  if (labels.size() != b)
    throw DimensionError("cross_entropy: " + std::to_string(b) +
                         " rows but " + std::to_string(labels.size()) +
                         " labels");
  auto L = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c)
      throw InputError("cross_entropy: label " + std::to_string(y) +
                       " out of range at row " + std::to_string(i));
    const double* row = L.data() + i * c;
    double m = row[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - m);
    total += std::log(s) - (row[static_cast<std::size_t>(y)] - m);
  }
  std::vector<int> iaux(labels.begin(), labels.end());
  return record(Op::kCrossEntropy, {logits}, {1},
                {total / static_cast<double>(b)}, {}, std::move(iaux));
}

Tensor Graph::sum(const Tensor& a) {
  auto A = a.data();
  double s = 0.0;
  for (double v : A) s += v;
  return record(Op::kSum, {a}, {1}, {s});
}

Tensor Graph::rbf_mmd(const Tensor& a, const Tensor& b,
                      const std::vector<double>& bandwidths) {
  require(a.rank() == 2 && b.rank() == 2,
          "rbf_mmd: inputs must be rank 2, got " + shape_str(a.shape()) +
              " and " + shape_str(b.shape()));
  require(a.cols() == b.cols(), "rbf_mmd: feature dims disagree, " +
                                    shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
  if (bandwidths.empty()) throw InputError("rbf_mmd: bandwidth list is empty");
  for (double bw : bandwidths)
    if (!(bw > 0.0)) throw InputError("rbf_mmd: bandwidths must be positive");
  const std::size_t m = a.rows(), n = b.rows(), d = a.cols();
  const double* A = a.data().data();
  const double* B = b.data().data();
  const double inv_bank = 1.0 / static_cast<double>(bandwidths.size());
  auto kernel = [&](const double* x, const double* y) {
    double d2 = 0.0;
    for (std::size_t t = 0; t < d; ++t) {
      const double diff = x[t] - y[t];
      d2 += diff * diff;
    }
    double k = 0.0;
    for (double bw : bandwidths) k += std::exp(-d2 / bw);
    return k * inv_bank;
  };
  double pp = 0.0, gg = 0.0, pg = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) pp += kernel(A + i * d, A + j * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) gg += kernel(B + i * d, B + j * d);
  // The cross sum runs in an order decided by the row sets themselves, not by
  // argument position, so swapping a and b lands on identical bytes.
  auto bits_less = [](const double* x, const double* y, std::size_t len) {
    for (std::size_t t = 0; t < len; ++t) {
      const auto xu = std::bit_cast<std::uint64_t>(x[t]);
      const auto yu = std::bit_cast<std::uint64_t>(y[t]);
      if (xu != yu) return xu < yu;
    }
    return false;
  };
  const bool a_leads = m != n ? m < n : !bits_less(B, A, n * d);
  const double* X = a_leads ? A : B;
  const double* Y = a_leads ? B : A;
  const std::size_t mx = a_leads ? m : n;
  const std::size_t my = a_leads ? n : m;
  for (std::size_t i = 0; i < mx; ++i)
    for (std::size_t j = 0; j < my; ++j) pg += kernel(X + i * d, Y + j * d);
  const double mmd = pp / static_cast<double>(m * m) +
                     gg / static_cast<double>(n * n) -
                     2.0 * pg / static_cast<double>(m * n);
  return record(Op::kRbfMmd, {a, b}, {1}, {mmd}, bandwidths);
}

// ---------------------------------------------------------------------------
// Graph: backward
// ---------------------------------------------------------------------------

GradMap Graph::backward(const Tensor& loss) const {
  if (loss.empty() || loss.size() != 1)
    throw UsageError("backward: loss must be a scalar tensor");
  if (!produced_.count(loss.id()))
    throw UsageError("backward: loss was not produced by this graph");

  std::unordered_map<std::uint64_t, std::vector<double>> slots;
  slots[loss.id()] = {1.0};
  std::unordered_map<std::uint64_t, Tensor> leaves;

  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    const Node& n = *it;
    if (!slots.count(n.out.id())) continue;
    std::vector<std::vector<double>*> gin(n.in.size(), nullptr);
    for (std::size_t i = 0; i < n.in.size(); ++i) {
      const Tensor& x = n.in[i];
      if (!x.requires_grad()) continue;
      auto& slot = slots[x.id()];
      if (slot.empty()) slot.assign(x.size(), 0.0);
      gin[i] = &slot;
      if (x.grad_tracked()) leaves.emplace(x.id(), x);
    }
    node_backward(n, slots.at(n.out.id()), gin);
  }

  GradMap gm;
  for (auto& [id, t] : leaves) {
    auto s = slots.find(id);
    gm.grads_.emplace(id, Tensor(t.shape(), std::move(s->second)));
  }
  return gm;
}

void Graph::node_backward(const Node& n, const std::vector<double>& gout,
                          std::vector<std::vector<double>*>& gin) const {
  switch (n.op) {
    case Op::kMatmul: {
      const Tensor& a = n.in[0];
      const Tensor& b = n.in[1];
      const std::size_t m = a.rows(), k = a.cols(), c = b.cols();
      const double* A = a.data().data();
      const double* B = b.data().data();
      if (gin[0]) {
        double* dA = gin[0]->data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            const double* gr = gout.data() + i * c;
            const double* br = B + p * c;
            for (std::size_t j = 0; j < c; ++j) acc += gr[j] * br[j];
            dA[i * k + p] += acc;
          }
      }
      if (gin[1]) {
        double* dB = gin[1]->data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            const double* gr = gout.data() + i * c;
            double* dr = dB + p * c;
            for (std::size_t j = 0; j < c; ++j) dr[j] += av * gr[j];
          }
      }
      break;
    }
    case Op::kMatmulNT: {
      const Tensor& a = n.in[0];
      const Tensor& b = n.in[1];
      const std::size_t m = a.rows(), k = a.cols(), c = b.rows();
      const double* A = a.data().data();
      const double* B = b.data().data();
      if (gin[0]) {
        double* dA = gin[0]->data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const double g = gout[i * c + j];
            const double* br = B + j * k;
            double* dr = dA + i * k;
            for (std::size_t p = 0; p < k; ++p) dr[p] += g * br[p];
          }
      }
      if (gin[1]) {
        double* dB = gin[1]->data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const double g = gout[i * c + j];
            const double* ar = A + i * k;
            double* dr = dB + j * k;
            for (std::size_t p = 0; p < k; ++p) dr[p] += g * ar[p];
          }
      }
      break;
    }
    case Op::kHadamard: {
      const Tensor& a = n.in[0];
      const Tensor& b = n.in[1];
      const double* A = a.data().data();
      const double* B = b.data().data();
      if (a.shape() == b.shape()) {
        if (gin[0]) {
          double* dA = gin[0]->data();
          for (std::size_t i = 0; i < gout.size(); ++i) dA[i] += gout[i] * B[i];
        }
        if (gin[1]) {
          double* dB = gin[1]->data();
          for (std::size_t i = 0; i < gout.size(); ++i) dB[i] += gout[i] * A[i];
        }
      } else {
        const std::size_t r = a.rows(), c = a.cols();
        if (gin[0]) {
          double* dA = gin[0]->data();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j)
              dA[i * c + j] += gout[i * c + j] * B[j];
        }
        if (gin[1]) {
          // sum-reduce over the broadcast axis
          double* dB = gin[1]->data();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j)
              dB[j] += gout[i * c + j] * A[i * c + j];
        }
      }
      break;
    }
    case Op::kAdd: {
      const Tensor& a = n.in[0];
      const Tensor& b = n.in[1];
      if (a.shape() == b.shape()) {
        for (int s = 0; s < 2; ++s)
          if (gin[s]) {
            double* d = gin[s]->data();
            for (std::size_t i = 0; i < gout.size(); ++i) d[i] += gout[i];
          }
      } else {
        const std::size_t r = a.rows(), c = a.cols();
        if (gin[0]) {
          double* dA = gin[0]->data();
          for (std::size_t i = 0; i < gout.size(); ++i) dA[i] += gout[i];
        }
        if (gin[1]) {
          double* dB = gin[1]->data();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) dB[j] += gout[i * c + j];
        }
      }
      break;
    }
    case Op::kSub: {
      if (gin[0]) {
        double* dA = gin[0]->data();
        for (std::size_t i = 0; i < gout.size(); ++i) dA[i] += gout[i];
      }
      if (gin[1]) {
        double* dB = gin[1]->data();
        for (std::size_t i = 0; i < gout.size(); ++i) dB[i] -= gout[i];
      }
      break;
    }
    case Op::kScale: {
      if (gin[0]) {
        const double c = n.faux[0];
        double* dA = gin[0]->data();
        for (std::size_t i = 0; i < gout.size(); ++i) dA[i] += c * gout[i];
      }
      break;
    }
    case Op::kRelu: {
      if (gin[0]) {
        const double* A = n.in[0].data().data();
        double* dA = gin[0]->data();
        for (std::size_t i = 0; i < gout.size(); ++i)
          if (A[i] > 0.0) dA[i] += gout[i];
      }
      break;
    }
    case Op::kTanh: {
      if (gin[0]) {
        const double* Y = n.out.data().data();
        double* dA = gin[0]->data();
        for (std::size_t i = 0; i < gout.size(); ++i)
          dA[i] += (1.0 - Y[i] * Y[i]) * gout[i];
      }
      break;
    }
    case Op::kSigmoid: {
      if (gin[0]) {
        const double* Y = n.out.data().data();
        double* dA = gin[0]->data();
        for (std::size_t i = 0; i < gout.size(); ++i)
          dA[i] += Y[i] * (1.0 - Y[i]) * gout[i];
      }
      break;
    }
    case Op::kLayerNorm: {
      const Tensor& a = n.in[0];
      const Tensor& gain = n.in[1];
      const double eps = n.faux[0];
      const std::size_t r = a.rows(), d = a.cols();
      const double* A = a.data().data();
      const double* G = gain.data().data();
      std::vector<double> xhat(d);
      for (std::size_t i = 0; i < r; ++i) {
        const double* x = A + i * d;
        const double* gy = gout.data() + i * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += x[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) xhat[j] = (x[j] - mu) * inv;
        if (gin[1]) {
          double* dG = gin[1]->data();
          for (std::size_t j = 0; j < d; ++j) dG[j] += gy[j] * xhat[j];
        }
        if (gin[2]) {
          double* dB = gin[2]->data();
          for (std::size_t j = 0; j < d; ++j) dB[j] += gy[j];
        }
        if (gin[0]) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = gy[j] * G[j];
            m1 += dxh;
            m2 += dxh * xhat[j];
          }
          m1 /= static_cast<double>(d);
          m2 /= static_cast<double>(d);
          double* dA = gin[0]->data() + i * d;
          for (std::size_t j = 0; j < d; ++j)
            dA[j] += (gy[j] * G[j] - m1 - xhat[j] * m2) * inv;
        }
      }
      break;
    }
    case Op::kReshape: {
      if (gin[0]) {
        double* dA = gin[0]->data();
        for (std::size_t i = 0; i < gout.size(); ++i) dA[i] += gout[i];
      }
      break;
    }
    case Op::kPairLane: {
      if (gin[0]) {
        const std::size_t lane = static_cast<std::size_t>(n.iaux[0]);
        double* dA = gin[0]->data();
        for (std::size_t i = 0; i < gout.size(); ++i)
          dA[i * 2 + lane] += gout[i];
      }
      break;
    }
    case Op::kPairSoftmax: {
      if (gin[0]) {
        const double* Y = n.out.data().data();
        double* dA = gin[0]->data();
        for (std::size_t i = 0; i < gout.size(); i += 2) {
          const double r = Y[i], s = Y[i + 1];
          const double dot = gout[i] * r + gout[i + 1] * s;
          dA[i] += r * (gout[i] - dot);
          dA[i + 1] += s * (gout[i + 1] - dot);
        }
      }
      break;
    }
    case Op::kCrossEntropy: {
      if (gin[0]) {
        const Tensor& logits = n.in[0];
        const std::size_t b = logits.rows(), c = logits.cols();
        const double* L = logits.data().data();
        const double g = gout[0] / static_cast<double>(b);
        double* dL = gin[0]->data();
        for (std::size_t i = 0; i < b; ++i) {
          const double* row = L + i * c;
          double m = row[0];
          for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
          double s = 0.0;
          for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - m);
          const std::size_t y = static_cast<std::size_t>(n.iaux[i]);
          for (std::size_t j = 0; j < c; ++j) {
            const double p = std::exp(row[j] - m) / s;
            dL[i * c + j] += g * (p - (j == y ? 1.0 : 0.0));
          }
        }
      }
      break;
    }
    case Op::kSum: {
      if (gin[0]) {
        double* dA = gin[0]->data();
        for (std::size_t i = 0; i < gin[0]->size(); ++i) dA[i] += gout[0];
      }
      break;
    }
    case Op::kRbfMmd: {
      const Tensor& a = n.in[0];
      const Tensor& b = n.in[1];
      const std::size_t m = a.rows(), nn = b.rows(), d = a.cols();
      const double* A = a.data().data();
      const double* B = b.data().data();
      const std::vector<double>& bws = n.faux;
      const double inv_bank = 1.0 / static_cast<double>(bws.size());
      // w(d2) = -2 d k / d(d2) summed over the bank
      auto weight = [&](const double* x, const double* y) {
        double d2 = 0.0;
        for (std::size_t t = 0; t < d; ++t) {
          const double diff = x[t] - y[t];
          d2 += diff * diff;
        }
        double w = 0.0;
        for (double bw : bws) w += std::exp(-d2 / bw) / bw;
        return 2.0 * w * inv_bank;
      };
      const double g = gout[0];
      // Each row enters its own-set sum twice (as i and as j), and the cross
      // term carries the estimator's factor 2, so all three constants double.
      const double cpp = 2.0 * g / static_cast<double>(m * m);
      const double cgg = 2.0 * g / static_cast<double>(nn * nn);
      const double cpg = 2.0 * g / static_cast<double>(m * nn);
      if (gin[0]) {
        double* dA = gin[0]->data();
        for (std::size_t u = 0; u < m; ++u) {
          const double* xu = A + u * d;
          double* du = dA + u * d;
          for (std::size_t j = 0; j < m; ++j) {
            const double w = cpp * weight(xu, A + j * d);
            const double* xj = A + j * d;
            for (std::size_t t = 0; t < d; ++t) du[t] -= w * (xu[t] - xj[t]);
          }
          for (std::size_t j = 0; j < nn; ++j) {
            const double w = cpg * weight(xu, B + j * d);
            const double* yj = B + j * d;
            for (std::size_t t = 0; t < d; ++t) du[t] += w * (xu[t] - yj[t]);
          }
        }
      }
      if (gin[1]) {
        double* dB = gin[1]->data();
        for (std::size_t u = 0; u < nn; ++u) {
          const double* yu = B + u * d;
          double* du = dB + u * d;
          for (std::size_t j = 0; j < nn; ++j) {
            const double w = cgg * weight(yu, B + j * d);
            const double* yj = B + j * d;
            for (std::size_t t = 0; t < d; ++t) du[t] -= w * (yu[t] - yj[t]);
          }
          for (std::size_t i = 0; i < m; ++i) {
            const double w = cpg * weight(yu, A + i * d);
            const double* xi = A + i * d;
            for (std::size_t t = 0; t < d; ++t) du[t] += w * (yu[t] - xi[t]);
          }
        }
      }
      break;
    }
  }
}

}  // namespace fedcp
