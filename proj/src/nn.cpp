#include "fedcp/nn.hpp"

#include <cmath>

namespace fedcp {

namespace {

Tensor draw_weight(std::size_t out, std::size_t in, RngStream& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::vector<double> w(out * in);
  for (double& v : w) v = rng.next_uniform(-bound, bound);
  return Tensor({out, in}, std::move(w), /*grad_tracked=*/true);
}

void check_linear(const ParamSet& p, const std::string& wn,
                  const std::string& bn, std::size_t out, std::size_t in) {
  const Tensor& w = p.at(wn);
  const Tensor& b = p.at(bn);
  if (w.rank() != 2 || w.rows() != out || w.cols() != in)
    throw DimensionError("params: '" + wn + "' must be [" +
                         std::to_string(out) + "x" + std::to_string(in) +
                         "], got " + shape_str(w.shape()));
  if (b.rank() != 1 || b.size() != out)
    throw DimensionError("params: '" + bn + "' must be length " +
                         std::to_string(out));
}

}  // namespace

std::vector<std::size_t> NetSpec::fe_dims() const {
  std::vector<std::size_t> d;
  d.push_back(input_dim);
  d.insert(d.end(), hidden.begin(), hidden.end());
  d.push_back(feature_dim);
  return d;
}

FeatureExtractor::FeatureExtractor(std::vector<std::size_t> dims_,
                                   ParamSet params_)
    : dims(std::move(dims_)), params(std::move(params_)) {
  if (dims.size() < 2)
    throw DimensionError("feature extractor: needs at least input and output dims");
  for (std::size_t i = 0; i + 1 < dims.size(); ++i)
    check_linear(params, "w" + std::to_string(i), "b" + std::to_string(i),
                 dims[i + 1], dims[i]);
}

Tensor FeatureExtractor::forward(Graph& g, const Tensor& x) const {
  if (x.rank() != 2 || x.cols() != input_dim())
    throw DimensionError("feature extractor: input must be [B," +
                         std::to_string(input_dim()) + "], got " +
                         shape_str(x.shape()));
  Tensor h = x;
  const std::size_t layers = dims.size() - 1;
  for (std::size_t i = 0; i < layers; ++i) {
    h = g.add(g.matmul_nt(h, params.at("w" + std::to_string(i))),
              params.at("b" + std::to_string(i)));
    if (i + 1 < layers) h = g.relu(h);
  }
  return h;
}

Head::Head(ParamSet params_) : params(std::move(params_)) {
  const Tensor& w = params.at("w");
  check_linear(params, "w", "b", w.rows(), w.cols());
}

Head::Head(Tensor weight, Tensor bias) {
  params.add("w", std::move(weight));
  params.add("b", std::move(bias));
  const Tensor& w = params.at("w");
  check_linear(params, "w", "b", w.rows(), w.cols());
}

Tensor Head::forward(Graph& g, const Tensor& h) const {
  if (h.rank() != 2 || h.cols() != feature_dim())
    throw DimensionError("head: input must be [B," +
                         std::to_string(feature_dim()) + "], got " +
                         shape_str(h.shape()));
  return g.add(g.matmul_nt(h, weight()), bias());
}

Cpn::Cpn(CpnActivation activation_, CpnNorm norm_, ParamSet params_)
    : activation(activation_), norm(norm_), params(std::move(params_)) {
  const Tensor& w = params.at("fc_w");
  if (w.rank() != 2 || w.rows() != 2 * w.cols())
    throw DimensionError("policy net: 'fc_w' must be [2KxK], got " +
                         shape_str(w.shape()));
  check_linear(params, "fc_w", "fc_b", w.rows(), w.cols());
  if (norm == CpnNorm::layer_norm) {
    if (!params.has("ln_g") || !params.has("ln_b"))
      throw DimensionError("policy net: layer norm wants 'ln_g' and 'ln_b'");
  } else if (params.has("ln_g") || params.has("ln_b")) {
    throw DimensionError("policy net: norm-free variant must not carry ln params");
  }
}

Policy Cpn::forward(Graph& g, const Tensor& c) const {
  const std::size_t k = feature_dim();
  if (c.rank() != 2 || c.cols() != k)
    throw DimensionError("policy net: input must be [B," + std::to_string(k) +
                         "], got " + shape_str(c.shape()));
  Tensor z = g.add(g.matmul_nt(c, params.at("fc_w")), params.at("fc_b"));
  if (norm == CpnNorm::layer_norm)
    z = g.layer_norm(z, params.at("ln_g"), params.at("ln_b"));
  switch (activation) {
    case CpnActivation::relu: z = g.relu(z); break;
    case CpnActivation::tanh: z = g.tanh(z); break;
    case CpnActivation::sigmoid: z = g.sigmoid(z); break;
  }
  Tensor pairs = g.pair_softmax(g.reshape(z, {c.rows(), k, 2}));
  return Policy{g.pair_lane(pairs, 0), g.pair_lane(pairs, 1)};
}

std::size_t ModelBundle::value_count() const {
  std::size_t n = personal_fe.params.value_count() +
                  personal_head.params.value_count();
  if (global_head) n += global_head->params.value_count();
  if (cpn) n += cpn->params.value_count();
  return n;
}

ServerModel init_server_model(const NetSpec& spec, RngStream& rng,
                              bool with_cpn) {
  if (spec.input_dim == 0 || spec.feature_dim == 0 || spec.num_classes == 0)
    throw ConfigError("net spec: input_dim, feature_dim and num_classes must be set");
  ServerModel m;
  const auto dims = spec.fe_dims();
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    m.fe.add("w" + std::to_string(i), draw_weight(dims[i + 1], dims[i], rng));
    m.fe.add("b" + std::to_string(i), Tensor::zeros({dims[i + 1]}, true));
  }
  m.head.add("w", draw_weight(spec.num_classes, spec.feature_dim, rng));
  m.head.add("b", Tensor::zeros({spec.num_classes}, true));
  if (with_cpn) {
    const std::size_t k = spec.feature_dim;
    m.cpn.add("fc_w", draw_weight(2 * k, k, rng));
    m.cpn.add("fc_b", Tensor::zeros({2 * k}, true));
    if (spec.cpn_norm == CpnNorm::layer_norm) {
      m.cpn.add("ln_g", Tensor::filled({2 * k}, 1.0, true));
      m.cpn.add("ln_b", Tensor::zeros({2 * k}, true));
    }
  }
  return m;
}

FeatureExtractor fe_from_params(const NetSpec& spec, ParamSet params) {
  return FeatureExtractor(spec.fe_dims(), std::move(params));
}

Cpn cpn_from_params(const NetSpec& spec, ParamSet params) {
  return Cpn(spec.cpn_activation, spec.cpn_norm, std::move(params));
}

}  // namespace fedcp
