#include "fedcp/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "fedcp/errors.hpp"

namespace fedcp {

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("idx: cannot open '" + path + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return bytes;
}

std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t at,
                        const std::string& path) {
  if (at + 4 > b.size())
    throw FormatError("idx: '" + path + "' truncated at byte " +
                      std::to_string(at));
  return (std::uint32_t(b[at]) << 24) | (std::uint32_t(b[at + 1]) << 16) |
         (std::uint32_t(b[at + 2]) << 8) | std::uint32_t(b[at + 3]);
}

// Largest-remainder rounding of fractional targets to integers summing to
// total. Ties go to the lower index.
std::vector<std::size_t> largest_remainder(const std::vector<double>& targets,
                                           std::size_t total) {
  const std::size_t n = targets.size();
  std::vector<std::size_t> counts(n);
  std::vector<std::pair<double, std::size_t>> rema(n);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double t = std::max(0.0, targets[i]);
    counts[i] = static_cast<std::size_t>(std::floor(t));
    rema[i] = {t - std::floor(t), i};
    assigned += counts[i];
  }
  if (assigned > total) {
    // floats summed a hair over; trim from the largest buckets
    std::size_t excess = assigned - total;
    for (std::size_t i = 0; i < n && excess > 0; ++i) {
      std::size_t take = std::min(excess, counts[i]);
      counts[i] -= take;
      excess -= take;
    }
  } else {
    std::stable_sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) {
      return a.first > b.first;
    });
    std::size_t left = total - assigned;
    for (std::size_t i = 0; left > 0; i = (i + 1) % n, --left)
      counts[rema[i].second] += 1;
  }
  return counts;
}

std::vector<std::vector<std::size_t>> indices_by_class(const Dataset& ds) {
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i)
    by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  return by_class;
}

}  // namespace

Dataset load_idx(const std::string& images_path,
                 const std::string& labels_path) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);

  const std::uint32_t img_magic = read_be32(img, 0, images_path);
  if (img_magic != 0x00000803u) {
    std::ostringstream os;
    os << "idx: '" << images_path << "' bad magic 0x" << std::hex << img_magic
       << " at byte 0 (want 0x803)";
    throw FormatError(os.str());
  }
  const std::uint32_t lab_magic = read_be32(lab, 0, labels_path);
  if (lab_magic != 0x00000801u) {
    std::ostringstream os;
    os << "idx: '" << labels_path << "' bad magic 0x" << std::hex << lab_magic
       << " at byte 0 (want 0x801)";
    throw FormatError(os.str());
  }

  const std::uint32_t n_img = read_be32(img, 4, images_path);
  const std::uint32_t rows = read_be32(img, 8, images_path);
  const std::uint32_t cols = read_be32(img, 12, images_path);
  const std::uint32_t n_lab = read_be32(lab, 4, labels_path);
  if (n_img != n_lab)
    throw FormatError("idx: image count " + std::to_string(n_img) +
                      " (byte 4 of '" + images_path + "') != label count " +
                      std::to_string(n_lab) + " (byte 4 of '" + labels_path +
                      "')");
  const std::size_t dim = std::size_t(rows) * cols;
  const std::size_t want_img = 16 + std::size_t(n_img) * dim;
  if (img.size() < want_img)
    throw FormatError("idx: '" + images_path + "' truncated at byte " +
                      std::to_string(img.size()) + " (want " +
                      std::to_string(want_img) + ")");
  if (img.size() > want_img)
    throw FormatError("idx: '" + images_path + "' has trailing data at byte " +
                      std::to_string(want_img));
  const std::size_t want_lab = 8 + std::size_t(n_lab);
  if (lab.size() < want_lab)
    throw FormatError("idx: '" + labels_path + "' truncated at byte " +
                      std::to_string(lab.size()) + " (want " +
                      std::to_string(want_lab) + ")");
  if (lab.size() > want_lab)
    throw FormatError("idx: '" + labels_path + "' has trailing data at byte " +
                      std::to_string(want_lab));

  Dataset ds;
  std::vector<double> feat(std::size_t(n_img) * dim);
  for (std::size_t i = 0; i < feat.size(); ++i)
    feat[i] = static_cast<double>(img[16 + i]) / 255.0;
  ds.features = Tensor({n_img, dim}, std::move(feat));
  ds.labels.resize(n_lab);
  int max_label = 0;
  for (std::size_t i = 0; i < n_lab; ++i) {
    ds.labels[i] = static_cast<int>(lab[8 + i]);
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.num_classes = static_cast<std::size_t>(max_label) + 1;
  return ds;
}

Dataset synth_clusters(std::size_t classes, std::size_t dim,
                       std::size_t per_class, double spread, RngStream& rng) {
  if (classes == 0 || dim == 0 || per_class == 0)
    throw ConfigError("synth: classes, dim and per_class must be positive");
  if (!(spread > 0.0)) throw ConfigError("synth: spread must be > 0");

  std::vector<std::vector<double>> means(classes, std::vector<double>(dim));
  for (auto& mu : means) {
    double norm = 0.0;
    do {
      norm = 0.0;
      for (double& v : mu) {
        v = rng.next_normal();
        norm += v * v;
      }
    } while (norm == 0.0);
    norm = std::sqrt(norm);
    for (double& v : mu) v /= norm;
  }

  Dataset ds;
  ds.num_classes = classes;
  std::vector<double> feat;
  feat.reserve(classes * per_class * dim);
  ds.labels.reserve(classes * per_class);
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t s = 0; s < per_class; ++s) {
      for (std::size_t t = 0; t < dim; ++t)
        feat.push_back(means[c][t] + spread * rng.next_normal());
      ds.labels.push_back(static_cast<int>(c));
    }
  ds.features = Tensor({classes * per_class, dim}, std::move(feat));
  return ds;
}

PartitionPlan partition_pathological(const Dataset& ds,
                                     std::size_t num_clients,
                                     std::size_t classes_per_client,
                                     std::uint64_t seed) {
  const std::size_t C = ds.num_classes;
  const std::size_t N = num_clients;
  const std::size_t m = classes_per_client;
  if (N == 0) throw ConfigError("pathological: need at least one client");
  if (m == 0 || m > C)
    throw ConfigError("pathological: classes_per_client must be in [1," +
                      std::to_string(C) + "]");
  const std::size_t shards_per_class = (N * m + C - 1) / C;

  SeedTree tree(seed);
  RngStream rng = tree.stream("pathological");

  auto by_class = indices_by_class(ds);
  // shards[c][j]: the j-th slice of class c after shuffle + jittered cut
  std::vector<std::vector<std::vector<std::size_t>>> shards(C);
  for (std::size_t c = 0; c < C; ++c) {
    auto& idx = by_class[c];
    if (idx.size() < shards_per_class)
      throw ConfigError("pathological: class " + std::to_string(c) + " has " +
                        std::to_string(idx.size()) +
                        " samples, cannot cut into " +
                        std::to_string(shards_per_class) + " shards");
    rng.shuffle(idx);
    std::vector<double> jitter(shards_per_class);
    double total = 0.0;
    for (double& f : jitter) {
      f = rng.next_uniform(0.75, 1.25);
      total += f;
    }
    std::vector<double> targets(shards_per_class);
    for (std::size_t j = 0; j < shards_per_class; ++j)
      targets[j] = static_cast<double>(idx.size()) * jitter[j] / total;
    auto sizes = largest_remainder(targets, idx.size());
    // every shard must be populated or a client would silently lose a class
    for (std::size_t j = 0; j < shards_per_class; ++j) {
      while (sizes[j] == 0) {
        std::size_t big = std::max_element(sizes.begin(), sizes.end()) -
                          sizes.begin();
        sizes[big] -= 1;
        sizes[j] += 1;
      }
    }
    std::size_t at = 0;
    shards[c].resize(shards_per_class);
    for (std::size_t j = 0; j < shards_per_class; ++j) {
      shards[c][j].assign(idx.begin() + at, idx.begin() + at + sizes[j]);
      at += sizes[j];
    }
  }

  PartitionPlan plan;
  plan.scheme = PartitionPlan::Scheme::pathological;
  plan.seed = seed;
  plan.classes_per_client = m;
  plan.assignments.resize(N);

  // Client i takes classes (i*m..i*m+m-1) mod C: the slot sequence walks
  // 0..N*m-1, so per-class demand never exceeds shards_per_class and each
  // client's m classes are distinct.
  std::vector<std::size_t> next_shard(C, 0);
  std::vector<std::vector<std::size_t>> class_owners(C);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t r = 0; r < m; ++r) {
      const std::size_t c = (i * m + r) % C;
      auto& shard = shards[c][next_shard[c]++];
      plan.assignments[i].insert(plan.assignments[i].end(), shard.begin(),
                                 shard.end());
      class_owners[c].push_back(i);
    }

  // leftover shards: deal their samples round-robin to clients already
  // holding that class
  for (std::size_t c = 0; c < C; ++c) {
    const auto& owners = class_owners[c];
    std::size_t cursor = 0;
    for (std::size_t j = next_shard[c]; j < shards_per_class; ++j)
      for (std::size_t s : shards[c][j]) {
        plan.assignments[owners[cursor]].push_back(s);
        cursor = (cursor + 1) % owners.size();
      }
  }
  return plan;
}

PartitionPlan partition_dirichlet(const Dataset& ds, std::size_t num_clients,
                                  double beta, std::uint64_t seed,
                                  std::size_t min_samples) {
  if (num_clients == 0) throw ConfigError("dirichlet: need at least one client");
  if (!(beta > 0.0))
    throw ConfigError("dirichlet: beta must be > 0 (concentration parameter)");

  const std::size_t N = num_clients;
  SeedTree tree(seed);
  const auto by_class_base = indices_by_class(ds);

  for (int attempt = 0; attempt < 100; ++attempt) {
    RngStream rng = tree.stream("attempt", static_cast<std::uint64_t>(attempt));
    PartitionPlan plan;
    plan.scheme = PartitionPlan::Scheme::dirichlet;
    plan.seed = seed;
    plan.beta = beta;
    plan.assignments.assign(N, {});
    bool degenerate = false;

    for (std::size_t c = 0; c < ds.num_classes && !degenerate; ++c) {
      auto idx = by_class_base[c];
      rng.shuffle(idx);
      std::vector<double> q(N);
      double total = 0.0;
      for (double& g : q) {
        g = rng.next_gamma(beta);
        total += g;
      }
      if (!(total > 0.0)) {
        degenerate = true;  // every draw underflowed; roll a fresh attempt
        break;
      }
      for (double& g : q) g /= total;
      plan.class_proportions.push_back(q);

      std::vector<double> targets(N);
      for (std::size_t i = 0; i < N; ++i)
        targets[i] = q[i] * static_cast<double>(idx.size());
      auto counts = largest_remainder(targets, idx.size());
      std::size_t at = 0;
      for (std::size_t i = 0; i < N; ++i) {
        plan.assignments[i].insert(plan.assignments[i].end(),
                                   idx.begin() + at, idx.begin() + at + counts[i]);
        at += counts[i];
      }
    }
    if (degenerate) continue;

    bool ok = true;
    for (const auto& a : plan.assignments)
      ok = ok && a.size() >= min_samples;
    if (ok) return plan;
  }
  throw ConfigError(
      "dirichlet: could not give every client >= " +
      std::to_string(min_samples) +
      " samples in 100 attempts; raise beta, lower min_samples or use fewer "
      "clients");
}

std::vector<ClientSplit> split_train_test(const PartitionPlan& plan,
                                          std::shared_ptr<const Dataset> ds,
                                          double train_ratio,
                                          std::uint64_t seed) {
  if (!(train_ratio > 0.0 && train_ratio < 1.0))
    throw ConfigError("split: train_ratio must be in (0,1)");
  SeedTree tree(seed);
  std::vector<ClientSplit> out(plan.assignments.size());

  for (std::size_t i = 0; i < plan.assignments.size(); ++i) {
    const auto& assigned = plan.assignments[i];
    if (assigned.size() < 4)
      throw ConfigError("split: client " + std::to_string(i) + " holds only " +
                        std::to_string(assigned.size()) +
                        " samples; raise min_samples");
    RngStream rng = tree.stream("client", i);

    // group by label, labels ascending
    std::vector<std::vector<std::size_t>> groups(ds->num_classes);
    for (std::size_t s : assigned)
      groups[static_cast<std::size_t>(ds->labels[s])].push_back(s);

    // per-label floor, then a largest-remainder top-up so the client-level
    // test count lands exactly on floor(n * (1 - ratio))
    const double q = 1.0 - train_ratio;
    std::vector<std::size_t> n_test(groups.size(), 0);
    std::vector<double> remainder(groups.size(), 0.0);
    std::size_t floored = 0;
    for (std::size_t l = 0; l < groups.size(); ++l) {
      if (groups[l].empty()) continue;
      const double exact = static_cast<double>(groups[l].size()) * q;
      n_test[l] = static_cast<std::size_t>(std::floor(exact));
      remainder[l] = exact - static_cast<double>(n_test[l]);
      if (groups[l].size() >= 4 && n_test[l] == 0) n_test[l] = 1;
      floored += n_test[l];
    }
    const std::size_t target = static_cast<std::size_t>(
        std::floor(static_cast<double>(assigned.size()) * q));
    if (floored < target) {
      std::vector<std::size_t> order;
      for (std::size_t l = 0; l < groups.size(); ++l)
        if (remainder[l] > 0.0) order.push_back(l);
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) {
                         return remainder[a] > remainder[b];
                       });
      std::size_t extras = target - floored;
      for (std::size_t l : order) {
        if (extras == 0) break;
        n_test[l] += 1;
        --extras;
      }
    }

    std::vector<std::size_t> train, test;
    for (std::size_t l = 0; l < groups.size(); ++l) {
      auto& grp = groups[l];
      if (grp.empty()) continue;
      rng.shuffle(grp);
      test.insert(test.end(), grp.begin(), grp.begin() + n_test[l]);
      train.insert(train.end(), grp.begin() + n_test[l], grp.end());
    }
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
    out[i].train = Shard{ds, std::move(train)};
    out[i].test = Shard{ds, std::move(test)};
  }
  return out;
}

std::string plan_sidecar(const PartitionPlan& plan) {
  std::ostringstream os;
  for (std::size_t i = 0; i < plan.assignments.size(); ++i) {
    auto sorted = plan.assignments[i];
    std::sort(sorted.begin(), sorted.end());
    os << i;
    for (std::size_t s : sorted) os << ' ' << s;
    os << '\n';
  }
  return os.str();
}

Tensor gather_features(const Dataset& ds, std::span<const std::size_t> rows) {
  const std::size_t d = ds.dim();
  auto src = ds.features.data();
  std::vector<double> out(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(src.data() + rows[i] * d, d, out.data() + i * d);
  return Tensor({rows.size(), d}, std::move(out));
}

std::vector<int> gather_labels(const Dataset& ds,
                               std::span<const std::size_t> rows) {
  std::vector<int> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    out[i] = ds.labels[rows[i]];
  return out;
}

}  // namespace fedcp
