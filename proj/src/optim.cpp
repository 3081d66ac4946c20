#include "mcft/optim.hpp"

#include <cmath>

namespace mcft {

void AdamW::step(const std::string& name, Tensor& param, const Tensor& grad, bool decay) {
  if (!param.same_shape(grad)) throw validation_error("AdamW: grad shape mismatch for " + name);
  auto it = moments_.find(name);
  if (it == moments_.end()) {
    Moments mo;
    mo.m = Tensor::zeros(param.shape());
    mo.v = Tensor::zeros(param.shape());
    it = moments_.emplace(name, std::move(mo)).first;
  }
  Moments& mo = it->second;
  mo.t += 1;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(mo.t));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(mo.t));
  const double wd = decay ? wd_ : 0.0;
  for (int64_t i = 0; i < param.numel(); ++i) {
    const double g = grad[i];
    mo.m[i] = beta1_ * mo.m[i] + (1.0 - beta1_) * g;
    mo.v[i] = beta2_ * mo.v[i] + (1.0 - beta2_) * g * g;
    const double mhat = mo.m[i] / bc1;
    const double vhat = mo.v[i] / bc2;
    param[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd * param[i]);
  }
}

double cosine_lr(double base_lr, int epoch, int total_epochs, double floor_frac) {
  if (total_epochs <= 1) return base_lr;
  const double t = static_cast<double>(epoch) / static_cast<double>(total_epochs);
  const double cosv = 0.5 * (1.0 + std::cos(M_PI * t));
  return base_lr * (floor_frac + (1.0 - floor_frac) * cosv);
}

}  // namespace mcft
