#include <gtest/gtest.h>

#include <map>

#include "helpers.hpp"
#include "savekit/errors.hpp"
#include "savekit/trainer.hpp"

namespace savekit {
namespace {

using testing::bitwise_equal;
using testing::short_training;
using testing::small_kit;

const std::string kStage1Prompt = "a photo of <pro>";
const std::string kStage2Prompt = "a red <pro> <mot> on gray";

VideoFrames clip() { return moving_square_video(4).video; }

std::map<std::string, torch::Tensor> snapshot(const torch::nn::Module& m) {
    std::map<std::string, torch::Tensor> out;
    for (auto& [name, p] : named_parameter_list(m)) out[name] = p.detach().clone();
    return out;
}

std::filesystem::path scratch(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("savekit_trainer_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

class TrainerTest : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        base_ = new ModelKit(small_kit());
        stage1_ = new StageCheckpoint(train_stage1(*base_, clip(), kStage1Prompt, short_training()));
    }
    static void TearDownTestSuite() {
        delete stage1_;
        delete base_;
    }
    static ModelKit* base_;
    static StageCheckpoint* stage1_;
};

ModelKit* TrainerTest::base_ = nullptr;
StageCheckpoint* TrainerTest::stage1_ = nullptr;

TEST_F(TrainerTest, StageOneTrainsOnlyTheProtagonistWord) {
    EXPECT_EQ(stage1_->stage, "stage1");
    EXPECT_EQ(stage1_->state.step, 6);
    EXPECT_EQ(stage1_->state.log.size(), 6u);
    const auto before = snapshot(*base_->backbone);
    for (auto& [name, p] : named_parameter_list(*stage1_->kit.backbone))
        EXPECT_TRUE(bitwise_equal(p, before.at(name))) << name;
    const auto enc = snapshot(*base_->encoder);
    for (auto& [name, p] : named_parameter_list(*stage1_->kit.encoder))
        EXPECT_TRUE(bitwise_equal(p, enc.at(name))) << name;
    auto init = base_->encoder->token_embedding(base_->vocab.id("object"));
    EXPECT_FALSE(torch::equal((*stage1_->protagonist)->v_pro.detach(), init));
    EXPECT_FALSE(stage1_->motion.has_value());
}

TEST_F(TrainerTest, StageTwoTrainsOnlyConfiguredLayersAndMotionWord) {
    auto trainer = Trainer::stage2(*stage1_, kStage2Prompt, short_training());
    const auto before = snapshot(*trainer.current().kit.backbone);
    const auto motion_before = snapshot(**trainer.current().motion);
    trainer.run();
    const auto& ck = trainer.current();
    EXPECT_TRUE(ck.kit.backbone->config().temporal);
    std::int64_t trained = 0;
    for (auto& [name, p] : named_parameter_list(*ck.kit.backbone)) {
        const bool trainable = name.find(".t_attn.") != std::string::npos ||
                               name.find(".norm_t.") != std::string::npos ||
                               name.find(".st_attn.to_q.") != std::string::npos;
        if (trainable) {
            ++trained;
            EXPECT_FALSE(bitwise_equal(p, before.at(name))) << name;
        } else {
            EXPECT_TRUE(bitwise_equal(p, before.at(name))) << name;
        }
    }
    EXPECT_GT(trained, 0);
    for (auto& [name, p] : named_parameter_list(**ck.motion))
        EXPECT_FALSE(bitwise_equal(p, motion_before.at(name))) << name;
    EXPECT_TRUE(bitwise_equal((*ck.protagonist)->v_pro, (*stage1_->protagonist)->v_pro));
    for (auto& [name, p] : trainer.trainable_parameters()) EXPECT_TRUE(p.requires_grad()) << name;
}

TEST_F(TrainerTest, MasksExtractedOnceAfterWarmup) {
    auto trainer = Trainer::stage2(*stage1_, kStage2Prompt, short_training(6, 8, 3));
    trainer.run(3);
    EXPECT_FALSE(trainer.current().masks.has_value());
    for (const auto& r : trainer.state().log) EXPECT_EQ(r.attn, 0.0);
    trainer.run();
    EXPECT_EQ(trainer.mask_extractions(), 1);
    ASSERT_TRUE(trainer.current().masks.has_value());
    EXPECT_EQ(trainer.current().masks->masks.size(0), 3);
    for (std::size_t k = 3; k < trainer.state().log.size(); ++k) {
        const auto& r = trainer.state().log[k];
        EXPECT_EQ(r.lambda_attn, 0.1);
        EXPECT_DOUBLE_EQ(r.total, r.ldm + 0.1 * r.attn);
    }
}

TEST_F(TrainerTest, MaskCacheWrittenOnceAndHitOnRerun) {
    const auto dir = scratch("cache");
    auto first = Trainer::stage2(*stage1_, kStage2Prompt, short_training(), dir);
    first.run();
    EXPECT_EQ(first.mask_cache_writes(), 1);
    auto second = Trainer::stage2(*stage1_, kStage2Prompt, short_training(), dir);
    second.run();
    EXPECT_EQ(second.mask_cache_writes(), 0);
    EXPECT_TRUE(bitwise_equal(first.current().masks->masks, second.current().masks->masks));
    std::filesystem::remove_all(dir);
}

TEST_F(TrainerTest, ZeroLambdaIgnoresMasks) {
    auto config = short_training();
    config.lambda_attn = 0.0;
    auto plain = Trainer::stage2(*stage1_, kStage2Prompt, config);
    auto masked = Trainer::stage2(*stage1_, kStage2Prompt, config);
    MotionMasks masks;
    masks.masks = torch::ones({3, 8, 8}, torch::kFloat64);
    masked.set_masks(masks);
    plain.run();
    masked.run();
    EXPECT_EQ(plain.mask_extractions(), 0);
    for (std::size_t k = 0; k < plain.state().log.size(); ++k) {
        EXPECT_EQ(plain.state().log[k].ldm, masked.state().log[k].ldm);
        EXPECT_EQ(plain.state().log[k].total, plain.state().log[k].ldm);
    }
    auto a = plain.trainable_parameters(), b = masked.trainable_parameters();
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_TRUE(bitwise_equal(a[k].second, b[k].second)) << a[k].first;
    EXPECT_THROW(masked.set_masks(MotionMasks{torch::ones({4, 8, 8}, torch::kFloat64)}), ContractError);
}

TEST_F(TrainerTest, DeterministicAndResumesBitwise) {
    const auto dir = scratch("resume");
    auto straight = Trainer::stage2(*stage1_, kStage2Prompt, short_training());
    straight.run();
    auto again = Trainer::stage2(*stage1_, kStage2Prompt, short_training());
    again.run();

    auto half = Trainer::stage2(*stage1_, kStage2Prompt, short_training());
    half.run(5);
    save_checkpoint(half.checkpoint(), dir / "half.ckpt");
    auto resumed = Trainer::resume(load_checkpoint(dir / "half.ckpt", "stage2"));
    EXPECT_EQ(resumed.state().step, 5);
    resumed.run();

    for (auto* other : {&again, &resumed}) {
        ASSERT_EQ(other->state().log.size(), straight.state().log.size());
        for (std::size_t k = 0; k < straight.state().log.size(); ++k) {
            EXPECT_EQ(other->state().log[k].ldm, straight.state().log[k].ldm) << k;
            EXPECT_EQ(other->state().log[k].attn, straight.state().log[k].attn) << k;
        }
        auto a = straight.trainable_parameters(), b = other->trainable_parameters();
        ASSERT_EQ(a.size(), b.size());
        for (std::size_t k = 0; k < a.size(); ++k) EXPECT_TRUE(bitwise_equal(a[k].second, b[k].second)) << a[k].first;
    }
    std::filesystem::remove_all(dir);
}

TEST_F(TrainerTest, CheckpointRoundTripAndErrors) {
    const auto dir = scratch("ckpt");
    save_checkpoint(*stage1_, dir / "s1.ckpt");
    auto loaded = load_checkpoint(dir / "s1.ckpt", "stage1");
    EXPECT_EQ(loaded.prompt, stage1_->prompt);
    EXPECT_EQ(loaded.frame_height, stage1_->frame_height);
    EXPECT_TRUE(bitwise_equal(loaded.latent, stage1_->latent));
    EXPECT_TRUE(bitwise_equal((*loaded.protagonist)->v_pro, (*stage1_->protagonist)->v_pro));
    EXPECT_EQ(hash_parameters(*loaded.kit.backbone), hash_parameters(*stage1_->kit.backbone));
    EXPECT_EQ(loaded.state.log.size(), stage1_->state.log.size());
    EXPECT_EQ(loaded.config.to_json(), stage1_->config.to_json());
    EXPECT_THROW(load_checkpoint(dir / "s1.ckpt", "stage2"), FormatError);
    EXPECT_THROW(load_checkpoint(dir / "missing.ckpt", "stage1"), DependencyError);
    loaded.stage = "stage2";
    EXPECT_THROW(Trainer::stage2(loaded, kStage2Prompt, short_training()), DependencyError);
    std::filesystem::remove_all(dir);
}

TEST_F(TrainerTest, PromptSlotsAreChecked) {
    EXPECT_THROW(Trainer::stage1(*base_, clip(), "a photo of a square", short_training()), PromptError);
    EXPECT_THROW(Trainer::stage1(*base_, clip(), "a <pro> <mot>", short_training()), PromptError);
    EXPECT_THROW(Trainer::stage2(*stage1_, "a <pro> on gray", short_training()), PromptError);
    EXPECT_THROW(Trainer::stage2(*stage1_, "a red square <mot>", short_training()), PromptError);
}

TEST(TrainConfig, ValidateListsEveryProblem) {
    TrainConfig c;
    EXPECT_NO_THROW(c.validate());
    c.stage1_steps = 0;
    c.lr_words = 0;
    c.lambda_attn = -1;
    c.mask_warmup_steps = 300;
    c.mask.quantile = 2;
    try {
        c.validate();
        FAIL();
    } catch (const ConfigError& e) {
        const std::string m = e.what();
        for (const char* key : {"stage1_steps", "lr_words", "lambda_attn", "mask_warmup_steps", "quantile"})
            EXPECT_NE(m.find(key), std::string::npos) << key;
    }
    TrainConfig d;
    d.lambda_attn = 0.3;
    d.trainable_layers = {".t_attn."};
    EXPECT_EQ(TrainConfig::from_json(d.to_json()).to_json(), d.to_json());
}

TEST(TrainState, WindowMean) {
    TrainState s;
    for (int k = 0; k < 4; ++k) s.log.push_back(total_loss(double(k), 2.0 * k, 0.5));
    EXPECT_DOUBLE_EQ(s.window_mean("ldm", 1, 2), 1.5);
    EXPECT_DOUBLE_EQ(s.window_mean("attn", 0, 4), 3.0);
    EXPECT_DOUBLE_EQ(s.window_mean("total", 3, 1), 3.0 + 3.0);
}

TEST(StepGenerator, PureFunctionOfInputs) {
    auto a = torch::rand({4}, step_generator(1, 2, 3));
    auto b = torch::rand({4}, step_generator(1, 2, 3));
    EXPECT_TRUE(torch::equal(a, b));
    EXPECT_FALSE(torch::equal(a, torch::rand({4}, step_generator(1, 2, 4))));
    EXPECT_FALSE(torch::equal(a, torch::rand({4}, step_generator(1, 3, 3))));
}

}  // namespace
}  // namespace savekit
