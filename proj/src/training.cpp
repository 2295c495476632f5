#include "fedcp/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fedcp/notice.hpp"

namespace fedcp {

namespace {

// repeat a length-K vector over B rows (plain constant, outside the graph)
Tensor repeat_rows(const Tensor& row, std::size_t rows) {
  auto src = row.data();
  std::vector<double> out(rows * src.size());
  for (std::size_t i = 0; i < rows; ++i)
    std::copy(src.begin(), src.end(), out.begin() + i * src.size());
  return Tensor({rows, src.size()}, std::move(out));
}

std::vector<double> median_bank(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), n = b.rows(), d = a.cols();
  std::vector<const double*> rows;
  rows.reserve(m + n);
  for (std::size_t i = 0; i < m; ++i) rows.push_back(a.data().data() + i * d);
  for (std::size_t i = 0; i < n; ++i) rows.push_back(b.data().data() + i * d);
  std::vector<double> d2;
  d2.reserve(rows.size() * (rows.size() - 1) / 2);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < d; ++t) {
        const double diff = rows[i][t] - rows[j][t];
        acc += diff * diff;
      }
      d2.push_back(acc);
    }
  std::sort(d2.begin(), d2.end());
  double median;
  const std::size_t h = d2.size() / 2;
  if (d2.size() % 2 == 1)
    median = d2[h];
  else
    median = 0.5 * (d2[h - 1] + d2[h]);
  if (!(median > 0.0)) median = 1.0;  // identical batches; any scale works
  return {median * 0.25, median * 0.5, median, median * 2.0, median * 4.0};
}

Tensor policy_input(Graph& g, const ClientState& client,
                    const VariantTraits& traits, const Tensor& h) {
  using PI = VariantTraits::PolicyInput;
  switch (traits.policy_input) {
    case PI::combined:
      return g.hadamard(h, unit_direction(client.v));
    case PI::sample_only:
      return h;
    case PI::client_only:
      return repeat_rows(unit_direction(client.v), h.rows());
    case PI::frozen_random:
      if (client.frozen_policy_input.empty())
        throw UsageError("forward: frozen policy input was never drawn");
      return repeat_rows(client.frozen_policy_input, h.rows());
  }
  throw UsageError("forward: unhandled policy input kind");
}

}  // namespace

VariantTraits make_variant(Algorithm id) {
  VariantTraits t;
  t.id = id;
  switch (id) {
    case Algorithm::fedcp:
      break;
    case Algorithm::wo_cs:
      t.policy_input = VariantTraits::PolicyInput::sample_only;
      break;
    case Algorithm::wo_ss:
      t.policy_input = VariantTraits::PolicyInput::client_only;
      break;
    case Algorithm::wo_cs_ss:
      t.policy_input = VariantTraits::PolicyInput::frozen_random;
      break;
    case Algorithm::wo_gfm:
      t.uses_mmd = false;
      break;
    case Algorithm::wo_cpn:
      t.uses_cpn = false;
      break;
    case Algorithm::wo_cpn_gfm:
      t.uses_cpn = false;
      t.uses_mmd = false;
      break;
    case Algorithm::wo_cpn_gh:
      t.uses_cpn = false;
      t.uses_global_head = false;
      t.uploads_head = false;
      break;
    case Algorithm::wo_cpn_gfm_gh:
      t.uses_cpn = false;
      t.uses_global_head = false;
      t.uses_mmd = false;
      t.uploads_head = false;
      break;
    case Algorithm::fedavg:
      t.uses_cpn = false;
      t.uses_global_head = false;
      t.uses_mmd = false;
      t.single_model = true;
      break;
  }
  return t;
}

namespace {
constexpr std::pair<std::string_view, Algorithm> kAlgorithms[] = {
    {"fedcp", Algorithm::fedcp},
    {"fedavg", Algorithm::fedavg},
    {"wo_cs", Algorithm::wo_cs},
    {"wo_ss", Algorithm::wo_ss},
    {"wo_cs_ss", Algorithm::wo_cs_ss},
    {"wo_gfm", Algorithm::wo_gfm},
    {"wo_cpn", Algorithm::wo_cpn},
    {"wo_cpn_gfm", Algorithm::wo_cpn_gfm},
    {"wo_cpn_gh", Algorithm::wo_cpn_gh},
    {"wo_cpn_gfm_gh", Algorithm::wo_cpn_gfm_gh},
};
}  // namespace

Algorithm algorithm_from_name(std::string_view name) {
  for (const auto& [n, a] : kAlgorithms)
    if (n == name) return a;
  throw ConfigError("algorithm: unknown id '" + std::string(name) + "'");
}

std::string_view algorithm_name(Algorithm id) {
  for (const auto& [n, a] : kAlgorithms)
    if (a == id) return n;
  return "?";
}

Tensor client_vector(const Head& head) {
  const Tensor& w = head.weight();
  const std::size_t c = w.rows(), k = w.cols();
  auto W = w.data();
  std::vector<double> v(k, 0.0);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < k; ++j) v[j] += W[i * k + j];
  return Tensor({k}, std::move(v));
}

Tensor unit_direction(const Tensor& v) {
  auto V = v.data();
  double norm = 0.0;
  for (double x : V) norm += x * x;
  norm = std::sqrt(norm);
  std::vector<double> out(V.size());
  if (norm < 1e-12) {
    const double fill = 1.0 / std::sqrt(static_cast<double>(V.size()));
    std::fill(out.begin(), out.end(), fill);
  } else {
    for (std::size_t i = 0; i < V.size(); ++i) out[i] = V[i] / norm;
  }
  return Tensor({V.size()}, std::move(out));
}

ForwardOut model_forward(Graph& g, const ClientState& client,
                         const VariantTraits& traits, const Tensor& x) {
  ForwardOut out;
  out.h = client.model.personal_fe.forward(g, x);
  if (traits.single_model) {
    out.logits = client.model.personal_head.forward(g, out.h);
    return out;
  }
  if (traits.uses_cpn) {
    if (!client.model.cpn)
      throw UsageError("forward: variant wants a policy net but none is present");
    if (!client.model.global_head)
      throw UsageError("forward: variant wants a global head but none is present");
    if (client.v.empty())
      throw UsageError("forward: client vector was never computed");
    out.policy = client.model.cpn->forward(g, policy_input(g, client, traits, out.h));
    out.has_policy = true;
    Tensor global_part =
        client.model.global_head->forward(g, g.hadamard(out.h, out.policy.r));
    Tensor personal_part =
        client.model.personal_head.forward(g, g.hadamard(out.h, out.policy.s));
    out.logits = g.add(global_part, personal_part);
    return out;
  }
  if (traits.uses_global_head) {
    if (!client.model.global_head)
      throw UsageError("forward: variant wants a global head but none is present");
    out.logits = g.add(client.model.global_head->forward(g, out.h),
                       client.model.personal_head.forward(g, out.h));
    return out;
  }
  out.logits = client.model.personal_head.forward(g, out.h);
  return out;
}

Tensor mmd_loss(Graph& g, const Tensor& h_personal, const Tensor& h_global,
                const std::vector<double>& pinned_bandwidths) {
  if (h_personal.rows() < 2 || h_global.rows() < 2) {
    notice("mmd-small-batch",
           "mmd needs >= 2 rows per side, returning 0 for this batch");
    return Tensor::scalar(0.0);
  }
  const std::vector<double>& bank =
      pinned_bandwidths.empty() ? median_bank(h_personal, h_global)
                                : pinned_bandwidths;
  return g.rbf_mmd(h_personal, h_global, bank);
}

Tensor local_loss(Graph& g, const ClientState& client,
                  const VariantTraits& traits, const Tensor& x,
                  const std::vector<int>& y, double lambda) {
  ForwardOut fw = model_forward(g, client, traits, x);
  Tensor ce = g.cross_entropy(fw.logits, y);
  if (!traits.uses_mmd || lambda == 0.0) return ce;
  if (!client.model.global_fe)
    throw UsageError("loss: variant wants the frozen extractor but none is present");
  Tensor hg = client.model.global_fe->forward(g, x);
  return g.add(ce, g.scale(mmd_loss(g, fw.h, hg), lambda));
}

TrainStats local_train(ClientState& client, const VariantTraits& traits,
                       const TrainSettings& settings, RngStream& rng) {
  if (settings.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (settings.epochs < 1) throw ConfigError("train: epochs must be >= 1");
  const std::size_t n = client.train.size();
  if (n == 0) throw InputError("train: client " + std::to_string(client.id) +
                               " has an empty train shard");
  const Dataset& ds = *client.train.data;
  const std::size_t batch = static_cast<std::size_t>(settings.batch_size);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  TrainStats stats;
  for (int e = 0; e < settings.epochs; ++e) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t at = 0; at < n; at += batch) {
      const std::size_t take = std::min(batch, n - at);
      std::vector<std::size_t> rows(take);
      for (std::size_t i = 0; i < take; ++i)
        rows[i] = client.train.idx[order[at + i]];
      Tensor x = gather_features(ds, rows);
      std::vector<int> y = gather_labels(ds, rows);

      Graph g;
      Tensor loss = local_loss(g, client, traits, x, y, settings.lambda);
      GradMap grads = g.backward(loss);
      loss_sum += loss.value() * static_cast<double>(take);

      ModelBundle& m = client.model;
      m.personal_fe.params =
          sgd_step(m.personal_fe.params, grads, settings.learning_rate);
      m.personal_head.params =
          sgd_step(m.personal_head.params, grads, settings.learning_rate);
      if (m.cpn)
        m.cpn->params = sgd_step(m.cpn->params, grads, settings.learning_rate);
    }
    stats.epoch_mean_loss.push_back(loss_sum / static_cast<double>(n));
  }
  return stats;
}

double shard_loss(const ClientState& client, const VariantTraits& traits,
                  const Shard& shard, double lambda, int batch_size) {
  const std::size_t n = shard.size();
  if (n == 0) throw InputError("loss: empty shard");
  const std::size_t batch = std::max(1, batch_size);
  double total = 0.0;
  for (std::size_t at = 0; at < n; at += batch) {
    const std::size_t take = std::min(batch, n - at);
    std::span<const std::size_t> rows(shard.idx.data() + at, take);
    Tensor x = gather_features(*shard.data, rows);
    std::vector<int> y = gather_labels(*shard.data, rows);
    Graph g;
    Tensor loss = local_loss(g, client, traits, x, y, lambda);
    total += loss.value() * static_cast<double>(take);
  }
  return total / static_cast<double>(n);
}

Head fuse_upload_head(const Head& global_head, const Head& personal_head) {
  const Tensor& gw = global_head.weight();
  const Tensor& pw = personal_head.weight();
  if (gw.shape() != pw.shape() ||
      global_head.bias().shape() != personal_head.bias().shape())
    throw DimensionError("fuse: head shapes disagree");
  auto avg = [](const Tensor& a, const Tensor& b) {
    auto A = a.data();
    auto B = b.data();
    std::vector<double> out(A.size());
    for (std::size_t i = 0; i < A.size(); ++i) out[i] = 0.5 * (A[i] + B[i]);
    return Tensor(a.shape(), std::move(out));
  };
  return Head(avg(gw, pw), avg(global_head.bias(), personal_head.bias()));
}

EvalResult evaluate_client(const ClientState& client,
                           const VariantTraits& traits, const Shard& shard) {
  EvalResult res;
  if (shard.size() == 0) return res;
  Tensor x = gather_features(*shard.data, shard.idx);
  std::vector<int> y = gather_labels(*shard.data, shard.idx);
  Graph g;
  ForwardOut fw = model_forward(g, client, traits, x);
  const std::size_t b = fw.logits.rows(), c = fw.logits.cols();
  auto L = fw.logits.data();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = L.data() + i * c;
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (row[j] > row[best]) best = j;  // ties keep the lowest index
    if (static_cast<int>(best) == y[i]) ++correct;
  }
  res.accuracy = static_cast<double>(correct) / static_cast<double>(b);
  if (fw.has_policy) {
    auto S = fw.policy.s.data();
    double acc = 0.0;
    for (double v : S) acc += v;
    res.pir = acc / static_cast<double>(S.size());
  }
  return res;
}

}  // namespace fedcp
