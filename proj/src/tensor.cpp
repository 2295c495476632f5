#include "fedcp/tensor.hpp"

#include <atomic>
#include <bit>
#include <sstream>

namespace fedcp {

namespace {
std::atomic<std::uint64_t> g_next_id{1};

std::size_t shape_product(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}
}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::make(Shape shape, std::vector<double> values, bool tracked,
                    bool needs_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor: zero-sized dimension in " + shape_str(shape));
  }
  if (shape_product(shape) != values.size()) {
    throw DimensionError("tensor: shape " + shape_str(shape) + " wants " +
                         std::to_string(shape_product(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto p = std::make_shared<Payload>();
  p->shape = std::move(shape);
  p->values = std::move(values);
  p->tracked = tracked;
  p->needs_grad = needs_grad;
  p->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  Tensor t;
  t.p_ = std::move(p);
  return t;
}

Tensor Tensor::recreate(const Tensor& src, bool tracked, bool needs_grad) {
  if (src.empty()) throw UsageError("tensor: copy of empty handle");
  auto p = std::make_shared<Payload>();
  p->shape = src.p_->shape;
  p->values = src.p_->values;
  p->tracked = tracked;
  p->needs_grad = needs_grad;
  p->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  Tensor t;
  t.p_ = std::move(p);
  return t;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool grad_tracked)
    : Tensor(make(std::move(shape), std::move(values), grad_tracked, grad_tracked)) {}

Tensor Tensor::zeros(Shape shape, bool grad_tracked) {
  std::vector<double> v(shape_product(shape), 0.0);
  return make(std::move(shape), std::move(v), grad_tracked, grad_tracked);
}

Tensor Tensor::filled(Shape shape, double value, bool grad_tracked) {
  std::vector<double> v(shape_product(shape), value);
  return make(std::move(shape), std::move(v), grad_tracked, grad_tracked);
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::vector(std::vector<double> values, bool grad_tracked) {
  Shape s{values.size()};
  return Tensor(std::move(s), std::move(values), grad_tracked);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::vector<double> values, bool grad_tracked) {
  return Tensor({rows, cols}, std::move(values), grad_tracked);
}

const Shape& Tensor::shape() const {
  if (empty()) throw UsageError("tensor: shape() on empty handle");
  return p_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("tensor: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::size() const { return shape_product(shape()); }

std::span<const double> Tensor::data() const {
  if (empty()) throw UsageError("tensor: data() on empty handle");
  return {p_->values.data(), p_->values.size()};
}

double Tensor::operator[](std::size_t flat_index) const {
  return p_->values[flat_index];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  if (rank() != 2) throw DimensionError("tensor: at(r,c) needs rank 2, have " + shape_str(shape()));
  return p_->values[r * cols() + c];
}

double Tensor::value() const {
  if (size() != 1) throw UsageError("tensor: value() on non-scalar " + shape_str(shape()));
  return p_->values[0];
}

bool Tensor::grad_tracked() const { return !empty() && p_->tracked; }
bool Tensor::requires_grad() const { return !empty() && p_->needs_grad; }

std::uint64_t Tensor::id() const {
  if (empty()) throw UsageError("tensor: id() on empty handle");
  return p_->id;
}

Tensor Tensor::tracked_copy() const { return recreate(*this, true, true); }
Tensor Tensor::frozen_copy() const { return recreate(*this, false, false); }

bool Tensor::same_bits(const Tensor& other) const {
  if (empty() || other.empty()) return empty() == other.empty();
  if (p_->shape != other.p_->shape) return false;
  const auto& a = p_->values;
  const auto& b = other.p_->values;
  for (std::size_t i = 0; i < a.size(); ++i) {
    // bitwise, so +0.0 vs -0.0 and NaN patterns are told apart
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i]))
      return false;
  }
  return true;
}

}  // namespace fedcp
