#pragma once

#include <unordered_map>
#include <vector>

#include "csft/tensor.hpp"

namespace csft {

struct SgdConfig {
  double lr = 1e-2;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

// Momentum SGD over an explicit parameter list. Velocity buffers are keyed by
// parameter identity and created lazily; update order follows the list, so
// steps are deterministic.
class SgdOptimizer {
 public:
  explicit SgdOptimizer(SgdConfig cfg) : cfg_(cfg) {}

  double lr() const { return cfg_.lr; }
  void set_lr(double lr) { cfg_.lr = lr; }

  // v <- momentum*v + grad + wd*param; param <- param - lr*v; grad <- 0.
  void step(const std::vector<Tensor>& params);

 private:
  SgdConfig cfg_;
  std::unordered_map<TensorNode*, std::vector<double>> velocity_;
};

}  // namespace csft
