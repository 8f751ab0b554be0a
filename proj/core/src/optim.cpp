#include "guidedseg/optim.hpp"

#include "guidedseg/errors.hpp"

namespace guidedseg::autodiff {

SgdMomentum::SgdMomentum(SgdOptions options) : options_(options) {
  if (!(options_.lr > 0.0f)) {
    throw Error(ErrorCode::kConfiguration, "learning rate must be > 0");
  }
  if (options_.momentum < 0.0f || options_.momentum >= 1.0f) {
    throw Error(ErrorCode::kConfiguration, "momentum must lie in [0, 1)");
  }
}

void SgdMomentum::step(std::vector<Tensor>& params) {
  if (velocity_.empty()) {
    velocity_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      velocity_[i].assign(params[i].numel(), 0.0f);
    }
  }
  if (velocity_.size() != params.size()) {
    throw Error(ErrorCode::kContractViolation,
                "parameter list changed between optimizer steps");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (!p.requires_grad()) continue;
    auto value = p.data();
    auto grad = p.grad();
    auto& v = velocity_[i];
    for (std::size_t j = 0; j < value.size(); ++j) {
      v[j] = options_.momentum * v[j] + grad[j] +
             options_.weight_decay * value[j];
      value[j] -= options_.lr * v[j];
    }
  }
}

}  // namespace guidedseg::autodiff
