// Data layer: IDX parsing against hand-built fixtures, the synthetic
// generator, both partition schemes under brute-force set audits, and the
// stratified split rules.
#include <unistd.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <vector>

#include "doctest.h"
#include "fedcp/data.hpp"
#include "fedcp/errors.hpp"
#include "fedcp/graph.hpp"
#include "fedcp/rng.hpp"
#include "oracles.hpp"

using namespace fedcp;
namespace fs = std::filesystem;

namespace {

void put_be32(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

struct IdxFixture {
  fs::path dir, images, labels;

  // two 2x3 images with known pixels, labels {1, 0}
  IdxFixture() {
    dir = fs::temp_directory_path() /
          ("fedcp_idx_" + std::to_string(::getpid()) + "_" +
           std::to_string(counter()++));
    fs::create_directories(dir);
    images = dir / "images.idx";
    labels = dir / "labels.idx";

    std::vector<unsigned char> img;
    put_be32(img, 0x00000803u);
    put_be32(img, 2);  // count
    put_be32(img, 2);  // rows
    put_be32(img, 3);  // cols
    for (unsigned char px : {0, 51, 102, 153, 204, 255,  // image 0
                             255, 0, 255, 0, 255, 0})    // image 1
      img.push_back(px);
    write(images, img);

    std::vector<unsigned char> lab;
    put_be32(lab, 0x00000801u);
    put_be32(lab, 2);
    lab.push_back(1);
    lab.push_back(0);
    write(labels, lab);
  }
  ~IdxFixture() {
    std::error_code ec;
    fs::remove_all(dir, ec);
  }

  static void write(const fs::path& p, const std::vector<unsigned char>& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
  }
  static void append_byte(const fs::path& p, unsigned char b) {
    std::ofstream out(p, std::ios::binary | std::ios::app);
    out.write(reinterpret_cast<const char*>(&b), 1);
  }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

// Every index 0..n-1 appears in exactly one client's list.
void audit_disjoint_cover(const PartitionPlan& plan, std::size_t n) {
  std::vector<int> seen(n, 0);
  for (const auto& a : plan.assignments)
    for (std::size_t s : a) {
      REQUIRE(s < n);
      seen[s] += 1;
    }
  for (std::size_t i = 0; i < n; ++i) CHECK(seen[i] == 1);
}

std::set<int> label_set(const Dataset& ds, const std::vector<std::size_t>& idx) {
  std::set<int> out;
  for (std::size_t s : idx) out.insert(ds.labels[s]);
  return out;
}

Dataset balanced_pool(std::size_t classes, std::size_t per_class,
                      std::uint64_t seed) {
  RngStream rng(seed);
  return synth_clusters(classes, 4, per_class, 0.5, rng);
}

}  // namespace

TEST_CASE("idx fixture round-trips exact pixel values and labels") {
  IdxFixture fx;
  Dataset ds = load_idx(fx.images.string(), fx.labels.string());
  CHECK(ds.size() == 2);
  CHECK(ds.dim() == 6);
  CHECK(ds.num_classes == 2);
  CHECK(ds.labels == std::vector<int>{1, 0});
  const double expected0[] = {0, 51, 102, 153, 204, 255};
  for (std::size_t j = 0; j < 6; ++j)
    CHECK(ds.features.at(0, j) == expected0[j] / 255.0);
  CHECK(ds.features.at(1, 0) == 1.0);
  CHECK(ds.features.at(1, 1) == 0.0);
}

TEST_CASE("idx rejects malformed files with the byte offset named") {
  {  // one stray trailing byte in the labels file
    IdxFixture fx;
    IdxFixture::append_byte(fx.labels, 9);
    CHECK_THROWS_WITH_AS(load_idx(fx.images.string(), fx.labels.string()),
                         doctest::Contains("trailing data at byte 10"),
                         FormatError);
  }
  {  // bad magic
    IdxFixture fx;
    std::vector<unsigned char> junk;
    put_be32(junk, 0x00000777u);
    put_be32(junk, 2);
    IdxFixture::write(fx.labels, junk);
    CHECK_THROWS_WITH_AS(load_idx(fx.images.string(), fx.labels.string()),
                         doctest::Contains("bad magic"), FormatError);
  }
  {  // image/label count mismatch
    IdxFixture fx;
    std::vector<unsigned char> lab;
    put_be32(lab, 0x00000801u);
    put_be32(lab, 3);
    lab.push_back(0);
    lab.push_back(1);
    lab.push_back(0);
    IdxFixture::write(fx.labels, lab);
    CHECK_THROWS_WITH_AS(load_idx(fx.images.string(), fx.labels.string()),
                         doctest::Contains("count"), FormatError);
  }
  {  // truncated image payload
    IdxFixture fx;
    std::vector<unsigned char> img;
    put_be32(img, 0x00000803u);
    put_be32(img, 2);
    put_be32(img, 2);
    put_be32(img, 3);
    img.push_back(7);  // 1 of 12 pixels
    IdxFixture::write(fx.images, img);
    CHECK_THROWS_WITH_AS(load_idx(fx.images.string(), fx.labels.string()),
                         doctest::Contains("truncated"), FormatError);
  }
  CHECK_THROWS_AS(load_idx("/nonexistent/images", "/nonexistent/labels"),
                  FormatError);
}

TEST_CASE("synthetic clusters collapse onto their means as spread vanishes") {
  RngStream rng(301);
  // tiny but positive spread: the perturbation rounds away against O(1) means
  Dataset ds = synth_clusters(3, 6, 5, 1e-300, rng);
  CHECK(ds.size() == 15);
  CHECK(ds.num_classes == 3);
  for (std::size_t c = 0; c < 3; ++c) {
    const std::size_t base = c * 5;
    CHECK(ds.labels[base] == static_cast<int>(c));
    double norm = 0.0;
    for (std::size_t j = 0; j < 6; ++j) {
      const double v = ds.features.at(base, j);
      norm += v * v;
      for (std::size_t s = 1; s < 5; ++s)
        CHECK(ds.features.at(base + s, j) == v);
    }
    CHECK(norm == doctest::Approx(1.0).epsilon(1e-12));  // means on the sphere
  }

  RngStream bad(302);
  CHECK_THROWS_AS(synth_clusters(3, 6, 5, 0.0, bad), ConfigError);
  CHECK_THROWS_AS(synth_clusters(0, 6, 5, 0.5, bad), ConfigError);
}

TEST_CASE("synthetic generation is deterministic in the stream") {
  RngStream a(303), b(303), c(304);
  Dataset da = synth_clusters(4, 8, 10, 0.3, a);
  Dataset db = synth_clusters(4, 8, 10, 0.3, b);
  Dataset dc = synth_clusters(4, 8, 10, 0.3, c);
  CHECK(da.features.same_bits(db.features));
  CHECK(da.labels == db.labels);
  CHECK_FALSE(da.features.same_bits(dc.features));
}

TEST_CASE("a linear head separates low-spread blobs") {
  RngStream rng(305);
  Dataset ds = synth_clusters(4, 16, 25, 0.05, rng);
  Tensor w = Tensor::zeros({4, 16}, true);
  Tensor b = Tensor::zeros({4}, true);
  const Tensor x = gather_features(ds, [&] {
    std::vector<std::size_t> all(ds.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return all;
  }());

  for (int epoch = 0; epoch < 50; ++epoch) {
    Graph g;
    Tensor logits = g.add(g.matmul_nt(x, w), b);
    Tensor loss = g.cross_entropy(logits, ds.labels);
    GradMap gm = g.backward(loss);
    ParamSet ps;
    ps.add("w", w);
    ps.add("b", b);
    ParamSet next = sgd_step(ps, gm, 0.5);
    w = next.at("w");
    b = next.at("b");
  }

  Graph g;
  Tensor logits = g.add(g.matmul_nt(x, w), b);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < 4; ++c)
      if (logits.at(i, c) > logits.at(i, best)) best = c;
    hits += best == static_cast<std::size_t>(ds.labels[i]);
  }
  CHECK(static_cast<double>(hits) / static_cast<double>(ds.size()) >= 0.99);
}

TEST_CASE("pathological partition pins the class count per client") {
  Dataset ds = balanced_pool(10, 50, 306);
  auto shared = std::make_shared<Dataset>(ds);
  PartitionPlan plan = partition_pathological(ds, 5, 2, 42);
  REQUIRE(plan.assignments.size() == 5);
  audit_disjoint_cover(plan, ds.size());
  for (const auto& a : plan.assignments) {
    REQUIRE_FALSE(a.empty());
    CHECK(label_set(ds, a).size() == 2);
  }

  // m = C: disjoint cover with up to (here: exactly) all classes each
  Dataset small = balanced_pool(3, 20, 307);
  PartitionPlan all = partition_pathological(small, 2, 3, 43);
  audit_disjoint_cover(all, small.size());
  for (const auto& a : all.assignments)
    CHECK(label_set(small, a).size() == 3);

  // determinism and seed sensitivity
  PartitionPlan again = partition_pathological(ds, 5, 2, 42);
  CHECK(plan.assignments == again.assignments);
  PartitionPlan other = partition_pathological(ds, 5, 2, 44);
  CHECK(plan.assignments != other.assignments);

  CHECK_THROWS_AS(partition_pathological(ds, 5, 11, 42), ConfigError);
}

TEST_CASE("dirichlet partition conserves counts and respects min_samples") {
  Dataset ds = balanced_pool(6, 40, 308);
  PartitionPlan plan = partition_dirichlet(ds, 8, 0.5, 99, 10);
  REQUIRE(plan.assignments.size() == 8);
  audit_disjoint_cover(plan, ds.size());
  for (const auto& a : plan.assignments) CHECK(a.size() >= 10);

  // the drawn proportions are kept for audit and sum to one per class
  REQUIRE(plan.class_proportions.size() == 6);
  for (const auto& row : plan.class_proportions) {
    REQUIRE(row.size() == 8);
    double sum = 0.0;
    for (double q : row) sum += q;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }

  // per class, allocated counts match the class total exactly
  for (std::size_t c = 0; c < 6; ++c) {
    std::size_t got = 0;
    for (const auto& a : plan.assignments)
      for (std::size_t s : a) got += ds.labels[s] == static_cast<int>(c);
    CHECK(got == 40);
  }

  PartitionPlan again = partition_dirichlet(ds, 8, 0.5, 99, 10);
  CHECK(plan.assignments == again.assignments);
}

TEST_CASE("huge beta approaches equal shares, small beta starves classes") {
  // beta = 1000: every client's per-class count stays within 25% of equal
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Dataset ds = balanced_pool(4, 60, 309);
    PartitionPlan plan = partition_dirichlet(ds, 4, 1000.0, seed, 10);
    for (const auto& a : plan.assignments) {
      std::map<int, std::size_t> per_class;
      for (std::size_t s : a) per_class[ds.labels[s]] += 1;
      for (std::size_t c = 0; c < 4; ++c) {
        const double share = static_cast<double>(per_class[static_cast<int>(c)]);
        CHECK(share >= 15.0 * 0.75);  // equal share is 60/4
        CHECK(share <= 15.0 * 1.25);
      }
    }
  }

  // beta = 0.1 with many clients: missing classes are the expected signature
  // (min_samples kept at 1 so the redraw loop does not fight the skew)
  Dataset big = balanced_pool(5, 200, 310);
  int seeds_with_missing = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    PartitionPlan plan = partition_dirichlet(big, 20, 0.1, seed, 1);
    bool missing = false;
    for (const auto& a : plan.assignments)
      missing = missing || label_set(big, a).size() < 5;
    seeds_with_missing += missing;
  }
  CHECK(seeds_with_missing >= 8);
}

TEST_CASE("impossible dirichlet demands fail after bounded redraws") {
  // 12 samples cannot give 3 clients 10 each
  Dataset tiny = balanced_pool(2, 6, 311);
  CHECK_THROWS_AS(partition_dirichlet(tiny, 3, 0.5, 1, 10), ConfigError);
}

TEST_CASE("stratified split honors the documented rounding") {
  Dataset ds = balanced_pool(2, 50, 312);
  auto shared = std::make_shared<Dataset>(ds);

  // single client, 50+50 samples: the floors give 12+12, the largest-
  // remainder top-up lands the total exactly on 25
  PartitionPlan plan;
  plan.assignments = {[&] {
    std::vector<std::size_t> all(ds.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return all;
  }()};
  auto splits = split_train_test(plan, shared, 0.75, 7);
  REQUIRE(splits.size() == 1);
  CHECK(splits[0].train.size() == 75);
  CHECK(splits[0].test.size() == 25);

  // disjointness + coverage of the assignment
  std::set<std::size_t> seen;
  for (std::size_t s : splits[0].train.idx) seen.insert(s);
  for (std::size_t s : splits[0].test.idx) {
    CHECK(seen.count(s) == 0);
    seen.insert(s);
  }
  CHECK(seen.size() == 100);

  // 5 samples of one label -> 4 train / 1 test
  PartitionPlan small;
  small.assignments = {{0, 1, 2, 3, 4},      // 5 samples of label 0
                       {50, 51, 52, 5}};     // 3 of label 1, 1 of label 0
  auto mixed = split_train_test(small, shared, 0.75, 8);
  CHECK(mixed[0].train.size() == 4);
  CHECK(mixed[0].test.size() == 1);
  // 4 samples across two small labels: the floors are zero but the top-up
  // owes one test sample, taken from the larger-remainder label (three of
  // label 1 beat one of label 0)
  CHECK(mixed[1].train.size() == 3);
  CHECK(mixed[1].test.size() == 1);
  REQUIRE(mixed[1].test.idx.size() == 1);
  CHECK(shared->labels[mixed[1].test.idx[0]] == 1);

  // a client below 4 samples is a configuration problem
  PartitionPlan bad;
  bad.assignments = {{0, 1, 2}};
  CHECK_THROWS_AS(split_train_test(bad, shared, 0.75, 9), ConfigError);

  // deterministic in the seed
  auto rerun = split_train_test(plan, shared, 0.75, 7);
  CHECK(rerun[0].train.idx == splits[0].train.idx);
  CHECK(rerun[0].test.idx == splits[0].test.idx);
}

TEST_CASE("the sidecar lists each client's sorted indices on one line") {
  PartitionPlan plan;
  plan.assignments = {{5, 1, 3}, {0, 2}};
  CHECK(plan_sidecar(plan) == "0 1 3 5\n1 0 2\n");
}
