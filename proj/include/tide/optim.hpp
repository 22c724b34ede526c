#pragma once

#include <cmath>
#include <vector>

#include "tide/nn.hpp"

namespace tide {

struct AdamWOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  double grad_clip = 0.0;  // global L2 norm; 0 disables
};

// Adam with decoupled weight decay. Weight decay skips 1-D tensors
// (biases, norm gains).
class AdamW {
 public:
  AdamW(ParameterStore& params, AdamWOptions opt) : params_(params), opt_(opt) {
    for (const auto& p : params_.all()) {
      m_.emplace_back(p.tensor.size(), 0.0);
      v_.emplace_back(p.tensor.size(), 0.0);
    }
  }

  // Returns the pre-clipping gradient norm.
  double step() {
    ++t_;
    double sq = 0.0;
    for (const auto& p : params_.all())
      for (double g : p.tensor.grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    const double clip = (opt_.grad_clip > 0.0 && norm > opt_.grad_clip) ? opt_.grad_clip / norm : 1.0;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    std::size_t i = 0;
    for (const auto& p : params_.all()) {
      Tensor t = p.tensor;
      auto w = t.mutable_data();
      auto g = t.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      ++i;
      if (g.empty()) continue;
      const bool decay = t.rank() >= 2;
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g[j] * clip;
        m[j] = opt_.beta1 * m[j] + (1 - opt_.beta1) * gj;
        v[j] = opt_.beta2 * v[j] + (1 - opt_.beta2) * gj * gj;
        if (decay) w[j] -= opt_.lr * opt_.weight_decay * w[j];
        w[j] -= opt_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + opt_.eps);
      }
    }
    return norm;
  }

  long steps() const { return t_; }
  double lr() const { return opt_.lr; }
  void set_lr(double lr) { opt_.lr = lr; }

 private:
  ParameterStore& params_;
  AdamWOptions opt_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

}  // namespace tide
