#pragma once

#include <cmath>
#include <functional>

#include <torch/torch.h>

#include "savekit/model.hpp"
#include "savekit/trainer.hpp"

namespace savekit::testing {

inline BackboneConfig small_backbone(bool temporal = false) {
    BackboneConfig c;
    c.level_widths = {16, 32};
    c.time_dim = 32;
    c.temporal = temporal;
    return c;
}

/// Untrained image kit; fast enough for per-test training runs.
inline ModelKit small_kit() { return ModelKit::create(small_backbone()); }

/// Training config cut down to a handful of steps.
inline TrainConfig short_training(std::int64_t stage1 = 6, std::int64_t stage2 = 8, std::int64_t warmup = 3) {
    TrainConfig c;
    c.stage1_steps = stage1;
    c.stage2_steps = stage2;
    c.mask_warmup_steps = warmup;
    c.stage1_batch = 2;
    return c;
}

inline double relative_error(const torch::Tensor& a, const torch::Tensor& b) {
    const double den = std::max(a.norm().item<double>(), b.norm().item<double>());
    return den == 0.0 ? 0.0 : (a - b).norm().item<double>() / den;
}

/// Central finite differences of a scalar function with respect to `x`.
inline torch::Tensor numeric_gradient(const std::function<double(const torch::Tensor&)>& f, const torch::Tensor& x,
                                      double h = 1e-6) {
    auto base = x.detach().clone();
    auto grad = torch::zeros_like(base);
    auto flat = base.view({-1});
    auto g = grad.view({-1});
    for (std::int64_t i = 0; i < flat.numel(); ++i) {
        const double v = flat[i].item<double>();
        flat[i] = v + h;
        const double up = f(base);
        flat[i] = v - h;
        const double down = f(base);
        flat[i] = v;
        g[i] = (up - down) / (2.0 * h);
    }
    return grad;
}

inline bool bitwise_equal(const torch::Tensor& a, const torch::Tensor& b) {
    return a.sizes() == b.sizes() && a.scalar_type() == b.scalar_type() && torch::equal(a, b);
}

}  // namespace savekit::testing
