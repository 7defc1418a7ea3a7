#include "mixshare/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace mixshare {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : node_(std::make_shared<detail::Node>()) {
  const auto n = shape_numel(shape);
  node_->shape = std::move(shape);
  node_->data.assign(static_cast<std::size_t>(n), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : node_(std::make_shared<detail::Node>()) {
  const auto n = shape_numel(shape);
  if (static_cast<std::int64_t>(values.size()) != n) {
    throw ShapeError("tensor of shape " + shape_str(shape) + " needs " + std::to_string(n) +
                     " values, got " + std::to_string(values.size()));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(values);
}

detail::Node& Tensor::node() const {
  if (!node_) throw std::logic_error("use of undefined tensor");
  return *node_;
}

std::int64_t Tensor::dim(std::size_t axis) const {
  const auto& s = node().shape;
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return s[axis];
}

double Tensor::item() const {
  if (node().data.size() != 1) {
    throw ShapeError("item() needs a single-element tensor, got " + shape_str(node().shape));
  }
  return node().data[0];
}

Tensor& Tensor::set_requires_grad(bool value) {
  node().requires_grad = value;
  return *this;
}

std::vector<double> Tensor::grad() const {
  const auto& n = node();
  if (n.grad.empty()) return std::vector<double>(n.data.size(), 0.0);
  return n.grad;
}

void Tensor::zero_grad() {
  auto& g = node().grad;
  std::fill(g.begin(), g.end(), 0.0);
}

Tensor Tensor::clone() const { return Tensor(node().shape, node().data); }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || !loss.requires_grad() || loss.handle()->tape != this) {
    throw std::logic_error("backward: loss is not tracked on this tape");
  }
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  }
  if (consumed_) {
    throw std::logic_error("backward: tape already consumed; clear() it before another pass");
  }
  consumed_ = true;
  loss.handle()->ensure_grad()[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
}

void Tape::clear() {
  entries_.clear();
  consumed_ = false;
}

namespace {
thread_local Tape* current_tape = nullptr;
}

TapeScope::TapeScope(Tape& tape) : previous_(current_tape) { current_tape = &tape; }
TapeScope::~TapeScope() { current_tape = previous_; }

Tape* active_tape() { return current_tape; }

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (current_tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->defined() && t->requires_grad(); });
}

Tensor make_output(Shape shape, bool tracked) {
  auto node = std::make_shared<detail::Node>();
  node->data.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
  node->shape = std::move(shape);
  if (tracked) {
    node->requires_grad = true;
    node->tape = current_tape;
  }
  return Tensor(std::move(node));
}

void backward(const Tensor& loss) {
  if (!loss.defined() || !loss.requires_grad() || loss.handle()->tape == nullptr) {
    throw std::logic_error("backward: loss is untracked (no recorded forward pass)");
  }
  loss.handle()->tape->backward(loss);
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace mixshare
