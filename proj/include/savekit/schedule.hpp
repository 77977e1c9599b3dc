#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

namespace savekit {

/// Discrete forward-noising schedule over timesteps 1..T.
///
/// alpha_bar(0) == 1 denotes the clean sample; alpha_bar(t) is strictly
/// decreasing on [1, T].
class DiffusionSchedule {
public:
    explicit DiffusionSchedule(std::vector<double> betas);

    /// The latent-diffusion "scaled linear" schedule (linear in sqrt(beta)).
    static DiffusionSchedule scaled_linear(std::int64_t steps = 1000, double beta_start = 0.00085,
                                           double beta_end = 0.012);
    static DiffusionSchedule linear(std::int64_t steps, double beta_start, double beta_end);

    std::int64_t steps() const { return static_cast<std::int64_t>(betas_.size()); }
    double beta(std::int64_t t) const;
    double alpha_bar(std::int64_t t) const;
    const std::vector<double>& betas() const { return betas_; }

    /// Throws DomainError unless 1 <= t <= T.
    void check_timestep(std::int64_t t) const;

    /// z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) noise, with one t per leading index.
    torch::Tensor add_noise(const torch::Tensor& z0, const torch::Tensor& noise,
                            const std::vector<std::int64_t>& timesteps) const;
    torch::Tensor add_noise(const torch::Tensor& z0, const torch::Tensor& noise, std::int64_t t) const;

private:
    std::vector<double> betas_;
    std::vector<double> alpha_bars_;  // index t, alpha_bars_[0] == 1
};

}  // namespace savekit
