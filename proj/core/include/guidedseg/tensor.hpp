#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace guidedseg::autodiff {

/// Row-major extents. Feature maps are [C, H, W]; convolution kernels are
/// [C_out, C_in, kh, kw].
using Shape = std::vector<int>;

std::size_t numel_of(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {
struct TensorNode {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;
  bool requires_grad = false;
};
}  // namespace detail

/// Handle to a dense float32 array with an optional gradient slot.
///
/// Copies share storage, like a reference-counted buffer. Use clone() for a
/// deep copy. Tensors recorded on a Tape must not be mutated until the tape
/// has been replayed or discarded.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f, bool requires_grad = false);
  Tensor(Shape shape, std::vector<float> values, bool requires_grad = false);

  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  int dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<float> data();
  std::span<const float> data() const;
  float item() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);

  /// Gradient buffer; empty span when the tensor does not require grad.
  /// The gradient slot is not part of the tensor's value, so it stays
  /// writable through const handles.
  std::span<float> grad() const;
  void zero_grad() const;

  Tensor clone() const;
  /// Deep copy with requires_grad cleared.
  Tensor detach() const;

  bool shares_storage(const Tensor& other) const noexcept {
    return node_ == other.node_;
  }

  const std::shared_ptr<detail::TensorNode>& node() const noexcept {
    return node_;
  }

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

/// Ordered record of executed operations.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  /// Records an operation. `backward` reads output's grad and accumulates into
  /// the grads of inputs that require grad.
  void record(std::vector<Tensor> inputs, const Tensor& output,
              BackwardFn backward);

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  void clear() noexcept { entries_.clear(); }

 private:
  friend void backward(const Tensor& loss, Tape& tape);

  struct Entry {
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
};

/// Replays the tape in reverse. All gradients of tensors on the tape are reset
/// first, so replaying twice yields identical gradients.
void backward(const Tensor& loss, Tape& tape);

/// True when an op output should be recorded.
bool needs_grad(const Tape* tape, std::initializer_list<const Tensor*> inputs);

}  // namespace guidedseg::autodiff
