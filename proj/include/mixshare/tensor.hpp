#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mixshare {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when tensor dimensions do not satisfy an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Tape;

namespace detail {
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  Tape* tape = nullptr;  // set on op outputs recorded on a tape

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};
}  // namespace detail

/// Dense row-major array of doubles with optional gradient tracking.
///
/// Copies share storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  std::int64_t dim(std::size_t axis) const;
  std::size_t rank() const { return node().shape.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(node().data.size()); }

  std::span<double> data() { return node().data; }
  std::span<const double> data() const { return node().data; }
  double item() const;
  double operator[](std::size_t i) const { return node().data[i]; }

  bool requires_grad() const { return node().requires_grad; }
  Tensor& set_requires_grad(bool value);

  bool has_grad() const { return !node().grad.empty(); }
  /// Gradient values; all zeros if nothing has been accumulated yet.
  std::vector<double> grad() const;
  /// Mutable gradient buffer (allocated on demand). Const because Tensor is a handle.
  std::span<double> grad_storage() const { return node().ensure_grad(); }
  void zero_grad();

  /// Deep copy of values; the copy is an untracked leaf.
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }
  const std::shared_ptr<detail::Node>& handle() const { return node_; }

 private:
  friend Tensor make_output(Shape shape, bool tracked);
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  detail::Node& node() const;

  std::shared_ptr<detail::Node> node_;
};

/// Ordered record of executed differentiable operations.
///
/// Each op registers a closure that reads its output gradient and accumulates
/// into its inputs. backward() replays the closures once each in reverse.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> adjoint) { entries_.push_back(std::move(adjoint)); }
  void backward(const Tensor& loss);
  /// Drops all recorded ops and re-arms backward().
  void clear();

  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

 private:
  std::vector<std::function<void()>> entries_;
  bool consumed_ = false;
};

/// Makes a tape the recording target for ops on this thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

/// Whether an op over these inputs should be recorded.
bool should_record(std::initializer_list<const Tensor*> inputs);

/// Creates an op output and, if recording, tags it with the active tape.
Tensor make_output(Shape shape, bool tracked);

/// Runs reverse-mode accumulation from a scalar loss on the tape that produced it.
void backward(const Tensor& loss);

/// Keeps large activation buffers on the heap instead of fresh mmap pages
/// between training steps. No-op outside glibc. Call once at startup.
void tune_allocator();

}  // namespace mixshare
