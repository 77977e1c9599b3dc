#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "helpers.hpp"
#include "savekit/backbone.hpp"
#include "savekit/errors.hpp"

using namespace savekit;
using savekit::testing::small_backbone;

namespace {

// Scalar re-evaluation of multi-head attention for batch 0.
torch::Tensor attention_by_loops(AttentionImpl& attn, const torch::Tensor& x, const torch::Tensor& ctx, bool cosine) {
    const auto tq = x.size(1), tk = ctx.size(1), c = attn.to_q->weight.size(0);
    const auto heads = attn.heads(), d = c / heads;
    auto wq = attn.to_q->weight, wv = attn.to_v->weight;
    auto wk = cosine ? wq : attn.to_k->weight;
    auto project = [](const torch::Tensor& w, const torch::Tensor& v) {
        std::vector<double> out(static_cast<std::size_t>(w.size(0)));
        for (std::int64_t r = 0; r < w.size(0); ++r) {
            double s = 0.0;
            for (std::int64_t k = 0; k < w.size(1); ++k) s += w[r][k].item<double>() * v[k].item<double>();
            out[static_cast<std::size_t>(r)] = s;
        }
        return out;
    };
    std::vector<std::vector<double>> q, k, v;
    for (std::int64_t i = 0; i < tq; ++i) q.push_back(project(wq, x[0][i]));
    for (std::int64_t j = 0; j < tk; ++j) k.push_back(project(wk, ctx[0][j])), v.push_back(project(wv, ctx[0][j]));
    auto merged = torch::zeros({tq, c}, torch::kFloat64);
    for (std::int64_t h = 0; h < heads; ++h) {
        for (std::int64_t i = 0; i < tq; ++i) {
            std::vector<double> logits(static_cast<std::size_t>(tk));
            double qn = 0.0;
            for (std::int64_t e = 0; e < d; ++e) qn += q[i][h * d + e] * q[i][h * d + e];
            for (std::int64_t j = 0; j < tk; ++j) {
                double dot = 0.0, kn = 0.0;
                for (std::int64_t e = 0; e < d; ++e) {
                    dot += q[i][h * d + e] * k[j][h * d + e];
                    kn += k[j][h * d + e] * k[j][h * d + e];
                }
                logits[j] = cosine ? std::exp(attn.log_temperature[h].item<double>()) * dot / std::sqrt(qn * kn)
                                   : dot / std::sqrt(static_cast<double>(d));
            }
            double mx = *std::max_element(logits.begin(), logits.end()), z = 0.0;
            for (auto& l : logits) z += (l = std::exp(l - mx));
            for (std::int64_t e = 0; e < d; ++e) {
                double s = 0.0;
                for (std::int64_t j = 0; j < tk; ++j) s += logits[j] / z * v[j][h * d + e];
                merged[i][h * d + e] = s;
            }
        }
    }
    return torch::matmul(merged, attn.to_out->weight.t()) + attn.to_out->bias;
}

}  // namespace

TEST(Attention, DotProductMatchesScalarEvaluation) {
    torch::manual_seed(3);
    Attention attn(8, 6, 2);
    attn->to(torch::kFloat64);
    auto x = torch::randn({1, 3, 8}, torch::kFloat64);
    auto ctx = torch::randn({1, 5, 6}, torch::kFloat64);
    torch::NoGradGuard ng;
    auto [out, probs] = attn->forward(x, ctx);
    EXPECT_LT((out[0] - attention_by_loops(*attn, x, ctx, false)).abs().max().item<double>(), 1e-12);
    EXPECT_TRUE(torch::allclose(probs.sum(-1), torch::ones({1, 2, 3}, torch::kFloat64)));
}

TEST(Attention, CosineSimilarityMatchesScalarEvaluation) {
    torch::manual_seed(4);
    Attention attn(8, 8, 2, true);
    attn->to(torch::kFloat64);
    EXPECT_FALSE(attn->to_k);
    torch::NoGradGuard ng;
    attn->log_temperature.copy_(torch::tensor({0.5, 2.0}, torch::kFloat64));
    auto x = torch::randn({1, 4, 8}, torch::kFloat64);
    auto ctx = torch::randn({1, 6, 8}, torch::kFloat64);
    auto [out, probs] = attn->forward(x, ctx);
    EXPECT_LT((out[0] - attention_by_loops(*attn, x, ctx, true)).abs().max().item<double>(), 1e-12);
    // Self attention: a query's own key has the largest similarity.
    auto [self_out, self_probs] = attn->forward(x, x);
    auto own = self_probs[0].argmax(-1);
    for (int h = 0; h < 2; ++h)
        for (int i = 0; i < 4; ++i) EXPECT_EQ(own[h][i].item<std::int64_t>(), i);
}

TEST(Backbone, TimestepFeaturesFormula) {
    auto f = timestep_features({0, 7, 999}, 8, torch::kFloat64);
    ASSERT_EQ(f.sizes(), (std::vector<std::int64_t>{3, 8}));
    const double ts[3] = {0, 7, 999};
    for (int r = 0; r < 3; ++r)
        for (int k = 0; k < 4; ++k) {
            const double arg = ts[r] * std::pow(10000.0, -k / 4.0);
            EXPECT_NEAR(f[r][k].item<double>(), std::cos(arg), 1e-12);
            EXPECT_NEAR(f[r][k + 4].item<double>(), std::sin(arg), 1e-12);
        }
}

TEST(Backbone, ConfigValidationListsEveryProblem) {
    auto c = small_backbone();
    c.heads = 3;
    c.mask_blocks = {"down1"};
    c.st_similarity = "bilinear";
    try {
        c.validate();
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("divisible by heads"), std::string::npos);
        EXPECT_NE(msg.find("down1"), std::string::npos);
        EXPECT_NE(msg.find("st_similarity"), std::string::npos);
    }
    auto d = small_backbone(true);
    EXPECT_EQ(BackboneConfig::from_json(d.to_json()).to_json(), d.to_json());
}

TEST(Backbone, FramesInfluenceOnlyLaterFramesThroughKeys) {
    VideoUNet net(small_backbone(false));
    torch::NoGradGuard ng;
    auto z = torch::randn({6, 3, 8, 8}, torch::kFloat64);
    auto cond = torch::randn({6, 12, 64}, torch::kFloat64);
    auto base = net->denoise(z, 300, cond).noise_pred;
    auto z2 = z.clone();
    z2[3] += 0.5;
    auto moved = net->denoise(z2, 300, cond).noise_pred;
    for (int i = 0; i < 3; ++i) EXPECT_TRUE(torch::equal(base[i], moved[i])) << "frame " << i;
    EXPECT_FALSE(torch::allclose(base[4], moved[4]));
    auto z3 = z.clone();
    z3[0] += 0.5;
    auto first = net->denoise(z3, 300, cond).noise_pred;
    for (int i = 1; i < 6; ++i) EXPECT_FALSE(torch::allclose(base[i], first[i])) << "frame " << i;
}

TEST(Backbone, ImageModeTreatsFramesIndependently) {
    VideoUNet net(small_backbone(false));
    torch::NoGradGuard ng;
    auto z = torch::randn({3, 3, 8, 8}, torch::kFloat64);
    auto cond = torch::randn({3, 12, 64}, torch::kFloat64);
    auto batch = net->denoise(z, {10, 500, 900}, cond, DenoiseOptions(false, FrameMode::Image)).noise_pred;
    const std::int64_t ts[3] = {10, 500, 900};
    for (int i = 0; i < 3; ++i) {
        auto single = net->denoise(z.narrow(0, i, 1), ts[i], cond.narrow(0, i, 1), DenoiseOptions(false, FrameMode::Image))
                          .noise_pred;
        EXPECT_LT((batch[i] - single[0]).abs().max().item<double>(), 1e-12);
    }
}

TEST(Backbone, InflatedModelReproducesImageModel) {
    VideoUNet image(small_backbone(false));
    auto video = inflate_from_image_model(image);
    EXPECT_TRUE(video->config().temporal);
    torch::NoGradGuard ng;
    auto z = torch::randn({4, 3, 8, 8}, torch::kFloat64);
    auto cond = torch::randn({4, 12, 64}, torch::kFloat64);
    auto a = image->denoise(z, 400, cond).noise_pred;
    auto b = video->denoise(z, 400, cond).noise_pred;
    EXPECT_TRUE(torch::equal(a, b));
    std::set<std::string> image_names;
    for (const auto& [name, p] : named_parameter_list(*image)) image_names.insert(name);
    for (const auto& [name, p] : named_parameter_list(*video))
        EXPECT_EQ(image_names.count(name) == 1, !is_temporal_parameter(name)) << name;
}

TEST(Backbone, RecordsDistributionsOverFirstAndPrecedingFrames) {
    VideoUNet net(small_backbone(true));
    torch::NoGradGuard ng;
    auto z = torch::randn({5, 3, 8, 8}, torch::kFloat64);
    auto cond = torch::randn({5, 12, 64}, torch::kFloat64);
    auto res = net->denoise(z, 250, cond, DenoiseOptions(true));
    ASSERT_TRUE(res.record);
    const auto& rec = *res.record;
    std::set<std::tuple<std::string, std::int64_t, std::int64_t>> keys;
    for (const auto& [key, probs] : rec.st_attn) {
        keys.insert(key);
        EXPECT_TRUE(torch::allclose(probs.sum(-1), torch::ones_like(probs.sum(-1)), 0, 1e-12));
    }
    std::set<std::tuple<std::string, std::int64_t, std::int64_t>> expect{
        {"up1", 0, 0}, {"up1", 1, 0}, {"up1", 2, 0}, {"up1", 2, 1}, {"up1", 3, 0}, {"up1", 3, 2}, {"up1", 4, 0}, {"up1", 4, 3}};
    EXPECT_EQ(keys, expect);
    ASSERT_EQ(rec.cross_attn.size(), 4u);
    auto ca = rec.cross_attn.at("up1");
    EXPECT_EQ(ca.sizes(), (std::vector<std::int64_t>{5, 4, 64, 12}));
}

TEST(Backbone, ResetIsDeterministic) {
    VideoUNet a(small_backbone(true)), b(small_backbone(true));
    EXPECT_EQ(hash_parameters(*a), hash_parameters(*b));
    b->reset_parameters(99);
    EXPECT_NE(hash_parameters(*a), hash_parameters(*b));
}
