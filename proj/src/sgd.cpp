#include "csft/sgd.hpp"

#include <stdexcept>

namespace csft {

void SgdOptimizer::step(const std::vector<Tensor>& params) {
  for (const Tensor& p : params) {
    if (!p.has_grad())
      throw std::logic_error("sgd_step: parameter missing gradient");
  }
  for (Tensor p : params) {
    auto& v = velocity_[p.node()];
    if (v.size() != p.data().size()) v.assign(p.data().size(), 0.0);
    auto& val = p.data();
    auto& g = p.grad();
    for (size_t i = 0; i < val.size(); ++i) {
      v[i] = cfg_.momentum * v[i] + g[i] + cfg_.weight_decay * val[i];
      val[i] -= cfg_.lr * v[i];
    }
    p.zero_grad();
  }
}

}  // namespace csft
