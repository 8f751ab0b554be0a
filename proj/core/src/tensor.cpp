#include "guidedseg/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "guidedseg/errors.hpp"

namespace guidedseg::autodiff {

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (int extent : shape) n *= static_cast<std::size_t>(extent);
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty()) {
    throw Error(ErrorCode::kInvalidShape, "tensor shape must have rank >= 1");
  }
  for (int extent : shape) {
    if (extent < 1) {
      throw Error(ErrorCode::kInvalidShape,
                  "tensor extents must be >= 1, got " + to_string(shape));
    }
  }
}

}  // namespace

Tensor::Tensor(Shape shape, float fill, bool requires_grad)
    : node_(std::make_shared<detail::TensorNode>()) {
  validate_shape(shape);
  node_->data.assign(numel_of(shape), fill);
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<float> values, bool requires_grad)
    : node_(std::make_shared<detail::TensorNode>()) {
  validate_shape(shape);
  if (values.size() != numel_of(shape)) {
    throw Error(ErrorCode::kInvalidShape,
                "value count " + std::to_string(values.size()) +
                    " does not match shape " + to_string(shape));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return Tensor({1}, value, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }

int Tensor::dim(std::size_t axis) const { return node_->shape.at(axis); }

std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

std::span<float> Tensor::data() { return node_->data; }

std::span<const float> Tensor::data() const { return node_->data; }

float Tensor::item() const {
  if (numel() != 1) {
    throw Error(ErrorCode::kContractViolation,
                "item() on tensor of shape " + to_string(shape()));
  }
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  node_->requires_grad = value;
  if (!value) node_->grad.clear();
}

std::span<float> Tensor::grad() const {
  if (!requires_grad()) return {};
  if (node_->grad.size() != node_->data.size()) {
    node_->grad.assign(node_->data.size(), 0.0f);
  }
  return node_->grad;
}

void Tensor::zero_grad() const {
  if (!requires_grad()) return;
  node_->grad.assign(node_->data.size(), 0.0f);
}

Tensor Tensor::clone() const {
  Tensor copy;
  copy.node_ = std::make_shared<detail::TensorNode>(*node_);
  return copy;
}

Tensor Tensor::detach() const {
  Tensor copy = clone();
  copy.node_->requires_grad = false;
  copy.node_->grad.clear();
  return copy;
}

void Tape::record(std::vector<Tensor> inputs, const Tensor& output,
                  BackwardFn backward) {
  entries_.push_back(Entry{std::move(inputs), output, std::move(backward)});
}

void backward(const Tensor& loss, Tape& tape) {
  if (!loss.defined() || loss.numel() != 1) {
    throw Error(ErrorCode::kContractViolation,
                "backward requires a scalar loss");
  }
  for (auto& entry : tape.entries_) {
    for (auto& input : entry.inputs) input.zero_grad();
    entry.output.zero_grad();
  }
  Tensor root = loss;
  if (!root.requires_grad()) return;
  root.grad()[0] = 1.0f;
  for (auto it = tape.entries_.rbegin(); it != tape.entries_.rend(); ++it) {
    it->fn();
  }
}

bool needs_grad(const Tape* tape,
                std::initializer_list<const Tensor*> inputs) {
  if (tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) {
    return t != nullptr && t->requires_grad();
  });
}

}  // namespace guidedseg::autodiff
