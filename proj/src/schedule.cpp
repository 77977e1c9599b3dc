#include "savekit/schedule.hpp"

#include <cmath>
#include <string>

#include "savekit/errors.hpp"

namespace savekit {

DiffusionSchedule::DiffusionSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
    if (betas_.empty()) throw ConfigError("schedule: empty beta sequence");
    alpha_bars_.resize(betas_.size() + 1);
    alpha_bars_[0] = 1.0;
    double prev_beta = 0.0;
    for (std::size_t i = 0; i < betas_.size(); ++i) {
        const double b = betas_[i];
        if (!(b > 0.0 && b < 1.0)) throw ConfigError("schedule: beta " + std::to_string(i + 1) + " outside (0,1)");
        if (b < prev_beta) throw ConfigError("schedule: betas must be nondecreasing");
        prev_beta = b;
        alpha_bars_[i + 1] = alpha_bars_[i] * (1.0 - b);
    }
}

DiffusionSchedule DiffusionSchedule::scaled_linear(std::int64_t steps, double beta_start, double beta_end) {
    if (steps < 1) throw ConfigError("schedule: steps must be positive");
    std::vector<double> betas(static_cast<std::size_t>(steps));
    const double a = std::sqrt(beta_start), b = std::sqrt(beta_end);
    for (std::int64_t i = 0; i < steps; ++i) {
        const double f = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
        const double s = a + (b - a) * f;
        betas[static_cast<std::size_t>(i)] = s * s;
    }
    return DiffusionSchedule(std::move(betas));
}

DiffusionSchedule DiffusionSchedule::linear(std::int64_t steps, double beta_start, double beta_end) {
    if (steps < 1) throw ConfigError("schedule: steps must be positive");
    std::vector<double> betas(static_cast<std::size_t>(steps));
    for (std::int64_t i = 0; i < steps; ++i) {
        const double f = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
        betas[static_cast<std::size_t>(i)] = beta_start + (beta_end - beta_start) * f;
    }
    return DiffusionSchedule(std::move(betas));
}

void DiffusionSchedule::check_timestep(std::int64_t t) const {
    if (t < 1 || t > steps())
        throw DomainError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
}

double DiffusionSchedule::beta(std::int64_t t) const {
    check_timestep(t);
    return betas_[static_cast<std::size_t>(t - 1)];
}

double DiffusionSchedule::alpha_bar(std::int64_t t) const {
    if (t < 0 || t > steps()) throw DomainError("alpha_bar: timestep " + std::to_string(t) + " out of range");
    return alpha_bars_[static_cast<std::size_t>(t)];
}

torch::Tensor DiffusionSchedule::add_noise(const torch::Tensor& z0, const torch::Tensor& noise,
                                           const std::vector<std::int64_t>& timesteps) const {
    if (static_cast<std::int64_t>(timesteps.size()) != z0.size(0))
        throw ContractError("add_noise: one timestep per leading index required");
    std::vector<double> a(timesteps.size()), s(timesteps.size());
    for (std::size_t i = 0; i < timesteps.size(); ++i) {
        check_timestep(timesteps[i]);
        const double ab = alpha_bar(timesteps[i]);
        a[i] = std::sqrt(ab);
        s[i] = std::sqrt(1.0 - ab);
    }
    std::vector<std::int64_t> shape(static_cast<std::size_t>(z0.dim()), 1);
    shape[0] = z0.size(0);
    auto opts = z0.options();
    auto ta = torch::tensor(a, opts.dtype(torch::kFloat64)).to(z0.scalar_type()).view(shape);
    auto ts = torch::tensor(s, opts.dtype(torch::kFloat64)).to(z0.scalar_type()).view(shape);
    return ta * z0 + ts * noise;
}

torch::Tensor DiffusionSchedule::add_noise(const torch::Tensor& z0, const torch::Tensor& noise, std::int64_t t) const {
    check_timestep(t);
    const double ab = alpha_bar(t);
    return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * noise;
}

}  // namespace savekit
