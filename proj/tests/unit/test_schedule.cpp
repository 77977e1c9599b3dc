#include <gtest/gtest.h>

#include <cmath>

#include "savekit/errors.hpp"
#include "savekit/schedule.hpp"

using namespace savekit;

TEST(Schedule, ScaledLinearMatchesSquaredLinearRoot) {
    const auto s = DiffusionSchedule::scaled_linear(1000, 0.00085, 0.012);
    ASSERT_EQ(s.steps(), 1000);
    double prod = 1.0;
    for (std::int64_t t = 1; t <= 1000; ++t) {
        const double r = std::sqrt(0.00085) + (std::sqrt(0.012) - std::sqrt(0.00085)) * (t - 1) / 999.0;
        EXPECT_NEAR(s.beta(t), r * r, 1e-15);
        prod *= 1.0 - r * r;
        EXPECT_NEAR(s.alpha_bar(t), prod, 1e-13);
    }
    EXPECT_EQ(s.alpha_bar(0), 1.0);
}

TEST(Schedule, AlphaBarStrictlyDecreasing) {
    const auto s = DiffusionSchedule::scaled_linear();
    for (std::int64_t t = 1; t <= s.steps(); ++t) EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
}

TEST(Schedule, AddNoiseFormula) {
    const auto s = DiffusionSchedule::scaled_linear();
    auto z0 = torch::randn({3, 2, 4, 4}, torch::kFloat64);
    auto n = torch::randn({3, 2, 4, 4}, torch::kFloat64);
    auto zt = s.add_noise(z0, n, {1, 500, 1000});
    for (int i = 0; i < 3; ++i) {
        const std::int64_t t = std::vector<std::int64_t>{1, 500, 1000}[i];
        auto expect = std::sqrt(s.alpha_bar(t)) * z0[i] + std::sqrt(1.0 - s.alpha_bar(t)) * n[i];
        EXPECT_TRUE(torch::allclose(zt[i], expect, 0, 1e-14));
    }
}

TEST(Schedule, TimestepRange) {
    const auto s = DiffusionSchedule::scaled_linear(10);
    EXPECT_THROW(s.check_timestep(0), DomainError);
    EXPECT_THROW(s.check_timestep(11), DomainError);
    EXPECT_NO_THROW(s.check_timestep(10));
    EXPECT_THROW(DiffusionSchedule({0.1, 0.05}), ConfigError);
}
