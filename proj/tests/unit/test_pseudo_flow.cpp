#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "../common/oracles.hpp"
#include "helpers.hpp"
#include "savekit/errors.hpp"
#include "savekit/pseudo_flow.hpp"
#include "savekit/video.hpp"

namespace savekit {
namespace {

using testing::bitwise_equal;

TEST(PseudoFlow, MatchesBruteForceOnRandomMaps) {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<int> dim(1, 8), frames(2, 8), coin(0, 1);
    for (int trial = 0; trial < 200; ++trial) {
        const auto h = dim(rng), w = dim(rng), n = frames(rng);
        const auto policy = coin(rng) ? KeyFramePolicy::FirstOnly : KeyFramePolicy::FirstAndPreceding;
        const auto combiner = coin(rng) ? DistanceCombiner::Max : DistanceCombiner::Mean;
        const bool normalize = coin(rng);
        auto attention = oracle::random_attention(rng, h, w, n, policy);
        auto field = compute_pseudo_flow(attention, normalize, combiner);
        auto expected = oracle::brute_force_flow(attention, normalize, combiner);
        ASSERT_EQ(field.argmax_locs.size(0), n - 1);
        for (std::int64_t f = 0; f < n - 1; ++f)
            for (std::int64_t r = 0; r < h; ++r)
                for (std::int64_t c = 0; c < w; ++c) {
                    ASSERT_EQ(field.argmax_locs[f][r][c][0].item<std::int64_t>(), expected.locs[f][r][c].first);
                    ASSERT_EQ(field.argmax_locs[f][r][c][1].item<std::int64_t>(), expected.locs[f][r][c].second);
                    ASSERT_NEAR(field.distances[f][r][c].item<double>(), expected.dist[f][r][c], 1e-12)
                        << "trial " << trial;
                }
    }
}

TEST(PseudoFlow, TiesGoToLowestIndex) {
    AggregatedAttention a;
    a.height = 2;
    a.width = 2;
    a.maps.push_back({{0, torch::full({4, 4}, 0.25, torch::kFloat64)}});
    auto field = compute_pseudo_flow(a, false);
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 2; ++c) {
            EXPECT_EQ(field.argmax_locs[0][r][c][0].item<std::int64_t>(), 0);
            EXPECT_EQ(field.argmax_locs[0][r][c][1].item<std::int64_t>(), 0);
        }
    EXPECT_DOUBLE_EQ(field.distances[0][1][1].item<double>(), std::sqrt(2.0));
}

TEST(PseudoFlow, IdentityAttentionGivesZeroFlowAndEmptyMasks) {
    AggregatedAttention a;
    a.height = 4;
    a.width = 5;
    for (int f = 0; f < 3; ++f) a.maps.push_back({{0, torch::eye(20, torch::kFloat64)}});
    auto field = compute_pseudo_flow(a);
    EXPECT_EQ(field.distances.abs().max().item<double>(), 0.0);
    EXPECT_EQ(field.vectors().abs().max().item<double>(), 0.0);
    auto masks = extract_motion_masks(field, 0.75, 0.05);
    EXPECT_EQ(masks.masks.sum().item<double>(), 0.0);
    EXPECT_EQ(masks.frames(), 4);
}

TEST(PseudoFlow, NormalizesByGridDiagonal) {
    AggregatedAttention a;
    a.height = 3;
    a.width = 4;
    auto m = torch::zeros({12, 12}, torch::kFloat64);
    for (int q = 0; q < 12; ++q) m[q][11] = 1.0;  // everything points at (2, 3)
    a.maps.push_back({{0, m}});
    auto normalized = compute_pseudo_flow(a, true);
    auto raw = compute_pseudo_flow(a, false);
    EXPECT_DOUBLE_EQ(raw.distances[0][0][0].item<double>(), std::sqrt(13.0));
    EXPECT_DOUBLE_EQ(normalized.distances[0][0][0].item<double>(), std::sqrt(13.0) / 5.0);
    EXPECT_DOUBLE_EQ(normalized.distances[0][2][3].item<double>(), 0.0);
    auto v = raw.vectors();
    EXPECT_EQ(v[0][0][0][0].item<double>(), 2.0);
    EXPECT_EQ(v[0][0][0][1].item<double>(), 3.0);
    EXPECT_EQ(v[0][2][0][1].item<double>(), 3.0);
}

TEST(PseudoFlow, RejectsMapsOfWrongSize) {
    AggregatedAttention a;
    a.height = 2;
    a.width = 2;
    a.maps.push_back({{0, torch::eye(3, torch::kFloat64)}});
    EXPECT_THROW(compute_pseudo_flow(a), ContractError);
}

AttentionRecord random_record(std::int64_t frames, std::int64_t heads, std::int64_t h, std::int64_t w,
                              const std::vector<std::string>& blocks) {
    AttentionRecord record;
    torch::manual_seed(3);
    for (const auto& b : blocks) {
        record.grids[b] = {h, w};
        for (std::int64_t i = 0; i < frames; ++i) {
            std::vector<std::int64_t> keys{0};
            if (i >= 2) keys.push_back(i - 1);
            for (auto j : keys)
                record.st_attn[{b, i, j}] = torch::softmax(torch::randn({heads, h * w, h * w}, torch::kFloat64), -1);
        }
    }
    return record;
}

TEST(Aggregate, HeadAndBlockMeanThenRenormalize) {
    const std::vector<std::string> blocks{"a", "b"};
    auto record = random_record(4, 3, 2, 3, blocks);
    auto first = aggregate_attention(record, blocks, 4, KeyFramePolicy::FirstOnly);
    auto both = aggregate_attention(record, blocks, 4, KeyFramePolicy::FirstAndPreceding);
    ASSERT_EQ(first.maps.size(), 3u);
    EXPECT_EQ(first.height, 2);
    EXPECT_EQ(first.width, 3);
    EXPECT_EQ(first.frames(), 4);
    for (std::int64_t i = 1; i < 4; ++i) {
        ASSERT_EQ(first.maps[i - 1].size(), 1u);
        ASSERT_EQ(both.maps[i - 1].size(), i >= 2 ? 2u : 1u);
        for (const auto& [j, map] : both.maps[i - 1]) {
            auto expected = torch::zeros({6, 6}, torch::kFloat64);
            for (const auto& b : blocks) {
                auto s = record.st_attn.at({b, i, j});
                for (std::int64_t head = 0; head < 3; ++head) expected += s[head] / 6.0;
            }
            for (std::int64_t r = 0; r < 6; ++r) expected[r] /= expected[r].sum();
            EXPECT_LT((map - expected).abs().max().item<double>(), 1e-14);
        }
        EXPECT_EQ(first.maps[i - 1][0].first, 0);
        if (i >= 2) EXPECT_EQ(both.maps[i - 1][1].first, i - 1);
    }
}

TEST(Aggregate, Errors) {
    auto record = random_record(3, 2, 2, 2, {"a"});
    record.grids["c"] = {4, 4};
    EXPECT_THROW(aggregate_attention(record, {"missing"}, 3), AggregationError);
    EXPECT_THROW(aggregate_attention(record, {"a", "c"}, 3), AggregationError);
    EXPECT_THROW(aggregate_attention(record, {}, 3), AggregationError);
    EXPECT_THROW(aggregate_attention(record, {"a"}, 1), AggregationError);
}

// Masks by torch::quantile plus a scalar box filter over in-bounds cells.
torch::Tensor mask_oracle(const torch::Tensor& dist, double q, double floor, std::int64_t radius) {
    auto out = torch::zeros_like(dist);
    for (std::int64_t f = 0; f < dist.size(0); ++f) {
        auto d = dist[f];
        if (d.max().item<double>() == d.min().item<double>()) continue;
        const double thr = std::max(torch::quantile(d.flatten(), q).item<double>(), floor);
        out[f] = (d >= thr).to(torch::kFloat64);
    }
    if (radius == 0) return out;
    auto smooth = torch::zeros_like(out);
    const auto h = out.size(1), w = out.size(2);
    for (std::int64_t f = 0; f < out.size(0); ++f)
        for (std::int64_t r = 0; r < h; ++r)
            for (std::int64_t c = 0; c < w; ++c) {
                double sum = 0.0;
                int count = 0;
                for (auto rr = r - radius; rr <= r + radius; ++rr)
                    for (auto cc = c - radius; cc <= c + radius; ++cc)
                        if (rr >= 0 && rr < h && cc >= 0 && cc < w) {
                            sum += out[f][rr][cc].item<double>();
                            ++count;
                        }
                smooth[f][r][c] = sum / count;
            }
    return smooth;
}

TEST(Masks, MatchQuantileOracle) {
    torch::manual_seed(11);
    for (double q : {0.5, 0.75, 0.9}) {
        for (double floor : {0.0, 0.05, 0.6}) {
            for (std::int64_t radius : {0, 1, 2}) {
                DisplacementField field;
                field.distances = torch::rand({3, 5, 6}, torch::kFloat64);
                field.distances[1].fill_(0.3);  // all equal
                field.argmax_locs = torch::zeros({3, 5, 6, 2}, torch::kInt64);
                auto masks = extract_motion_masks(field, q, floor, radius);
                auto expected = mask_oracle(field.distances, q, floor, radius);
                EXPECT_LT((masks.masks - expected).abs().max().item<double>(), 1e-12);
                EXPECT_EQ(masks.masks[1].sum().item<double>(), 0.0);
                EXPECT_GE(masks.masks.min().item<double>(), 0.0);
                EXPECT_LE(masks.masks.max().item<double>(), 1.0);
            }
        }
    }
}

TEST(Masks, ThresholdIsInclusive) {
    DisplacementField field;
    field.distances = torch::tensor({0.0, 0.0, 0.0, 0.1, 0.2}, torch::kFloat64).view({1, 1, 5});
    field.argmax_locs = torch::zeros({1, 1, 5, 2}, torch::kInt64);
    // quantile 0.75 of the five values is exactly 0.1
    auto masks = extract_motion_masks(field, 0.75, 0.0);
    EXPECT_TRUE(torch::equal(masks.masks.flatten(), torch::tensor({0.0, 0.0, 0.0, 1.0, 1.0}, torch::kFloat64)));
    auto floored = extract_motion_masks(field, 0.75, 0.15);
    EXPECT_TRUE(torch::equal(floored.masks.flatten(), torch::tensor({0.0, 0.0, 0.0, 0.0, 1.0}, torch::kFloat64)));
    EXPECT_THROW(extract_motion_masks(field, 1.0, 0.0), ConfigError);
    EXPECT_THROW(extract_motion_masks(field, 0.5, 0.0, -1), ConfigError);
}

TEST(Masks, RecoverAnalyticMovingSquare) {
    auto scene = oracle::moving_square_attention(8, 12, 3, 1, 5);
    auto field = compute_pseudo_flow(scene.attention);
    auto masks = extract_motion_masks(field, 0.75, 0.05);
    for (std::int64_t f = 0; f < 7; ++f)
        EXPECT_GE(oracle::iou(masks.masks[f] > 0.5, scene.moving[f]), 0.9) << "frame " << f + 2;
}

TEST(Masks, CacheStoresOnceAndRoundTrips) {
    const auto dir = std::filesystem::temp_directory_path() / "savekit_mask_cache_test";
    std::filesystem::remove_all(dir);
    MaskCache cache(dir);
    EXPECT_FALSE(cache.lookup("k").has_value());
    MotionMasks m;
    m.masks = torch::rand({2, 3, 3}, torch::kFloat64);
    m.quantile = 0.6;
    m.floor = 0.01;
    m.smooth_radius = 1;
    cache.store("k", m);
    EXPECT_EQ(cache.writes(), 1);
    auto hit = cache.lookup("k");
    ASSERT_TRUE(hit.has_value());
    EXPECT_TRUE(bitwise_equal(hit->masks, m.masks));
    EXPECT_EQ(hit->quantile, 0.6);
    EXPECT_EQ(hit->smooth_radius, 1);
    EXPECT_FALSE(cache.lookup("other").has_value());
    std::filesystem::remove_all(dir);
}

TEST(Masks, CacheKeyDependsOnInputs) {
    auto z = torch::zeros({2, 4, 8, 8}, torch::kFloat64);
    MaskConfig config;
    const auto base = mask_cache_key(z, config, 1);
    EXPECT_EQ(base, mask_cache_key(z.clone(), config, 1));
    EXPECT_NE(base, mask_cache_key(z, config, 2));
    auto other = config;
    other.quantile = 0.8;
    EXPECT_NE(base, mask_cache_key(z, other, 1));
    auto z2 = z.clone();
    z2[1][0][0][0] = 1e-9;
    EXPECT_NE(base, mask_cache_key(z2, config, 1));
}

TEST(Masks, ExportWritesPngsFromFrameTwo) {
    const auto dir = std::filesystem::temp_directory_path() / "savekit_mask_export_test";
    std::filesystem::remove_all(dir);
    MotionMasks m;
    m.masks = torch::zeros({2, 4, 4}, torch::kFloat64);
    m.masks[0][1][2] = 1.0;
    m.masks[1].fill_(1.0);
    export_masks(m, dir);
    EXPECT_FALSE(std::filesystem::exists(dir / "mask_0001.png"));
    auto a = read_png(dir / "mask_0002.png");
    auto b = read_png(dir / "mask_0003.png");
    EXPECT_EQ(a.size(0), 3);
    EXPECT_TRUE(torch::equal(a[0], m.masks[0].to(a.scalar_type())));
    EXPECT_EQ(b.min().item<double>(), 1.0);
    std::ifstream in(dir / "masks.json");
    auto meta = nlohmann::json::parse(in);
    EXPECT_EQ(meta.at("frames"), 3);
    EXPECT_EQ(meta.at("height"), 4);
    std::filesystem::remove_all(dir);
}

TEST(Masks, ProbeTimestepsRoundAndClamp) {
    EXPECT_EQ(probe_timesteps({0.5, 0.1, 0.0001, 1.0}, 1000), (std::vector<std::int64_t>{500, 100, 1, 1000}));
    EXPECT_EQ(probe_timesteps({0.3335}, 1000), (std::vector<std::int64_t>{334}));
    EXPECT_THROW(probe_timesteps({}, 1000), ConfigError);
}

TEST(Masks, ConfigValidationAndJson) {
    MaskConfig c;
    EXPECT_NO_THROW(c.validate());
    c.quantile = 1.5;
    c.floor = -1;
    c.t_probe_fractions = {};
    try {
        c.validate();
        FAIL();
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("quantile"), std::string::npos);
        EXPECT_NE(msg.find("floor"), std::string::npos);
        EXPECT_NE(msg.find("probe"), std::string::npos);
    }
    MaskConfig d;
    d.key_frame_policy = KeyFramePolicy::FirstAndPreceding;
    d.combiner = DistanceCombiner::Mean;
    d.t_probe_fractions = {0.2, 0.4};
    EXPECT_EQ(MaskConfig::from_json(d.to_json()).to_json(), d.to_json());
    EXPECT_THROW(key_frame_policy_from_string("all"), ConfigError);
}

}  // namespace
}  // namespace savekit
