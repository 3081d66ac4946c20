#pragma once

#include <map>
#include <string>

#include "mcft/tensor.hpp"

namespace mcft {

/// Decoupled-weight-decay Adam over a named tensor set. Moments are created
/// lazily per tensor name; a tensor never handed to step() keeps no state.
class AdamW {
 public:
  AdamW(double lr = 1e-3, double weight_decay = 0.0, double beta1 = 0.9,
        double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  /// One update on a single tensor. Per-tensor step counts drive bias
  /// correction; `decay` gates the decoupled weight-decay term (off for
  /// biases, norm gains and tokens).
  void step(const std::string& name, Tensor& param, const Tensor& grad, bool decay = true);

  bool has_state(const std::string& name) const { return moments_.count(name) > 0; }

 private:
  struct Moments {
    Tensor m, v;
    int64_t t = 0;
  };
  double lr_, wd_, beta1_, beta2_, eps_;
  std::map<std::string, Moments> moments_;
};

/// Cosine decay from base_lr to base_lr*floor_frac over total_epochs.
double cosine_lr(double base_lr, int epoch, int total_epochs, double floor_frac = 0.01);

}  // namespace mcft
