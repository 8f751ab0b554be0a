#pragma once

#include <string>
#include <utility>
#include <vector>

#include "guidedseg/tensor.hpp"

namespace guidedseg::autodiff {

struct SgdOptions {
  float lr = 0.01f;
  float momentum = 0.9f;
  float weight_decay = 0.0f;
};

/// Momentum descent:
///   v <- momentum * v + grad + weight_decay * param
///   param <- param - lr * v
/// Velocity buffers are keyed by position in the parameter list, so the list
/// order must stay fixed across steps.
class SgdMomentum {
 public:
  explicit SgdMomentum(SgdOptions options);

  void step(std::vector<Tensor>& params);

  const SgdOptions& options() const noexcept { return options_; }
  const std::vector<std::vector<float>>& velocity() const noexcept {
    return velocity_;
  }

 private:
  SgdOptions options_;
  std::vector<std::vector<float>> velocity_;
};

}  // namespace guidedseg::autodiff
