#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fedcp/errors.hpp"

namespace fedcp {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

// Dense row-major f64 tensor. The payload is immutable after construction;
// "updates" (sgd_step, aggregation) build new tensors. Copies are cheap handle
// copies sharing the payload, so frozen snapshots and broadcast copies can
// alias the same bytes safely across threads.
//
// Each construction gets a fresh id; gradient bookkeeping is keyed on it.
// grad_tracked marks a leaf parameter that wants a gradient. requires_grad is
// the derived flag (tracked leaf, or computed from one) used to prune
// backward work through frozen subgraphs.
class Tensor {
 public:
  Tensor() = default;  // empty handle

  Tensor(Shape shape, std::vector<double> values, bool grad_tracked = false);

  static Tensor zeros(Shape shape, bool grad_tracked = false);
  static Tensor filled(Shape shape, double value, bool grad_tracked = false);
  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values, bool grad_tracked = false);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values, bool grad_tracked = false);

  bool empty() const { return p_ == nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;
  std::size_t rows() const { return dim(0); }
  std::size_t cols() const { return dim(1); }

  std::span<const double> data() const;
  double operator[](std::size_t flat_index) const;
  double at(std::size_t r, std::size_t c) const;
  double value() const;  // scalar tensors only

  bool grad_tracked() const;
  bool requires_grad() const;
  std::uint64_t id() const;

  // New leaf carrying the same bytes, grad-tracked (fresh id).
  Tensor tracked_copy() const;
  // New frozen leaf carrying the same bytes (fresh id, no gradient).
  Tensor frozen_copy() const;

  // Bitwise payload comparison (shape + every double).
  bool same_bits(const Tensor& other) const;

 private:
  struct Payload {
    Shape shape;
    std::vector<double> values;
    bool tracked = false;
    bool needs_grad = false;
    std::uint64_t id = 0;
  };

  static Tensor make(Shape shape, std::vector<double> values, bool tracked,
                     bool needs_grad);
  static Tensor recreate(const Tensor& src, bool tracked, bool needs_grad);

  std::shared_ptr<const Payload> p_;

  friend class Graph;
};

}  // namespace fedcp
