#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "../../tools/commands.hpp"
#include "helpers.hpp"
#include "savekit/archive.hpp"
#include "savekit/config.hpp"
#include "savekit/errors.hpp"

namespace savekit {
namespace {

namespace fs = std::filesystem;

struct Invocation {
    int code;
    std::string out, err;
};

Invocation call(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("savekit_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string file_text(const fs::path& p) { return read_file(p); }

TEST(Cli, UsageErrorsExitTwo) {
    EXPECT_EQ(call({}).code, cli::kUsage);
    EXPECT_EQ(call({"frobnicate"}).code, cli::kUsage);
    EXPECT_EQ(call({"edit", "--no-such-flag"}).code, cli::kUsage);
    auto help = call({"--help"});
    EXPECT_EQ(help.code, cli::kOk);
    EXPECT_NE(help.out.find("train-stage2"), std::string::npos);
}

TEST(Cli, InvalidConfigExitsThree) {
    const auto dir = fresh_dir("invalid");
    RunConfig c;
    c.run_dir = dir;
    c.train.lambda_attn = -2;
    write_file_atomic(dir / "config.toml", c.dump());
    auto r = call({"--run-dir", dir.string(), "train-stage1"});
    EXPECT_EQ(r.code, cli::kInvalidConfig);
    EXPECT_NE(r.err.find("lambda_attn"), std::string::npos);
    write_file_atomic(dir / "config.toml", "this is not a config\n");
    EXPECT_EQ(call({"--run-dir", dir.string(), "edit"}).code, cli::kInvalidConfig);
    fs::remove_all(dir);
}

TEST(Cli, MissingInputsExitFour) {
    const auto dir = fresh_dir("missing");
    EXPECT_EQ(call({"--run-dir", dir.string(), "edit"}).code, cli::kMissingDependency);  // no config
    ASSERT_EQ(call({"--run-dir", dir.string(), "init"}).code, cli::kOk);
    EXPECT_EQ(call({"--run-dir", dir.string(), "init"}).code, cli::kMissingDependency);
    EXPECT_EQ(call({"--run-dir", dir.string(), "init", "--force"}).code, cli::kOk);
    auto r = call({"--run-dir", dir.string(), "edit"});
    EXPECT_EQ(r.code, cli::kMissingDependency);
    EXPECT_NE(r.err.find("stage2.ckpt"), std::string::npos);
    EXPECT_EQ(call({"--run-dir", dir.string(), "train-stage1"}).code, cli::kMissingDependency);
    EXPECT_EQ(call({"--run-dir", dir.string(), "train-stage2"}).code, cli::kMissingDependency);
    fs::remove_all(dir);
}

TEST(Cli, SmallPipelineEndToEnd) {
    const auto dir = fresh_dir("pipeline");
    RunConfig c;
    c.run_dir = dir;
    c.train = testing::short_training(4, 6, 2);
    c.sampler.ddim_steps = 3;
    c.pretrain.backbone = testing::small_backbone();
    write_file_atomic(dir / "config.toml", c.dump());
    save_kit(ModelKit::create(testing::small_backbone()), dir / "base.ckpt");
    const auto run_dir = dir.string();

    ASSERT_EQ(call({"--run-dir", run_dir, "train-stage1"}).code, cli::kOk);
    EXPECT_TRUE(fs::exists(dir / "stage1.ckpt"));
    EXPECT_TRUE(fs::exists(dir / "words.bin"));
    auto stage2 = call({"--run-dir", run_dir, "--json-logs", "train-stage2"});
    ASSERT_EQ(stage2.code, cli::kOk) << stage2.err;
    std::istringstream lines(stage2.err);
    for (std::string line; std::getline(lines, line);) EXPECT_NO_THROW((void)nlohmann::json::parse(line)) << line;
    EXPECT_TRUE(fs::exists(dir / "stage2.ckpt"));
    EXPECT_TRUE(fs::exists(dir / "masks" / "mask_0002.png"));
    EXPECT_TRUE(fs::exists(dir / "masks" / "mask_0008.png"));

    std::istringstream log(file_text(dir / "log.jsonl"));
    int stage1_lines = 0, stage2_lines = 0;
    for (std::string line; std::getline(log, line);) {
        auto j = nlohmann::json::parse(line);
        (j.at("stage") == "stage1" ? stage1_lines : stage2_lines)++;
        EXPECT_TRUE(j.contains("ldm"));
    }
    EXPECT_EQ(stage1_lines, 4);
    EXPECT_EQ(stage2_lines, 6);

    auto first = call({"--run-dir", run_dir, "--json-logs", "extract-masks"});
    ASSERT_EQ(first.code, cli::kOk) << first.err;
    const auto png = file_text(dir / "masks" / "mask_0003.png");
    auto second = call({"--run-dir", run_dir, "--json-logs", "extract-masks"});
    ASSERT_EQ(second.code, cli::kOk);
    EXPECT_NE(second.err.find("\"cache\":\"hit\""), std::string::npos) << second.err;
    EXPECT_EQ(file_text(dir / "masks" / "mask_0003.png"), png);

    ASSERT_EQ(call({"--run-dir", run_dir, "reconstruct"}).code, cli::kOk);
    auto meta = nlohmann::json::parse(file_text(dir / "reconstruction" / "meta.json"));
    EXPECT_EQ(meta.at("config").at("guidance_scale"), 1.0);
    EXPECT_TRUE(meta.contains("psnr"));

    EXPECT_EQ(call({"--run-dir", run_dir, "edit", "--prompt", "a red circle"}).code, cli::kInvalidConfig);
    ASSERT_EQ(call({"--run-dir", run_dir, "--seed", "3", "edit"}).code, cli::kOk);
    const auto edit_dir = dir / "edits" / "01_a_red_circle_mot_on_gray";
    ASSERT_TRUE(fs::exists(edit_dir / "frame_0008.png"));
    auto edit_meta = nlohmann::json::parse(file_text(edit_dir / "meta.json"));
    EXPECT_EQ(edit_meta.at("seed"), 3);
    EXPECT_EQ(edit_meta.at("prompt"), "a red circle <mot> on gray");

    auto eval = call({"--run-dir", run_dir, "eval"});
    ASSERT_EQ(eval.code, cli::kOk) << eval.err;
    EXPECT_NE(eval.out.find("name,flow_similarity,frame_consistency"), std::string::npos);
    EXPECT_TRUE(fs::exists(dir / "eval" / "summary.csv"));
    EXPECT_EQ(call({"--run-dir", run_dir, "eval", "--edits", (dir / "nothing").string()}).code,
              cli::kMissingDependency);

    auto inspect = call({"--run-dir", run_dir, "inspect-attn", "--dump", (dir / "attn.bin").string()});
    ASSERT_EQ(inspect.code, cli::kOk) << inspect.err;
    EXPECT_NE(inspect.out.find("<mot>"), std::string::npos);
    auto archive = TensorArchive::load(dir / "attn.bin", kCheckpointVersion);
    EXPECT_TRUE(archive.contains("cross.up1"));
    fs::remove_all(dir);
}

void write_frames(const fs::path& dir, int count, std::int64_t size, std::vector<int> skip = {}) {
    fs::create_directories(dir);
    for (int i = 1; i <= count; ++i) {
        if (std::find(skip.begin(), skip.end(), i) != skip.end()) continue;
        char name[32];
        std::snprintf(name, sizeof name, "frame_%04d.png", i);
        write_png(dir / name, torch::full({3, size, size}, double(i) / count, torch::kFloat64));
    }
}

TEST(Ingest, LoadsAndResizes) {
    const auto dir = fresh_dir("ingest_ok");
    write_frames(dir / "eight", 8, 16);
    auto v = ingest(dir / "eight", 32, 32);
    EXPECT_EQ(v.count(), 8);
    EXPECT_EQ(v.height(), 32);
    EXPECT_NEAR(v.frames[7].mean().item<double>(), 1.0, 1e-9);
    write_frames(dir / "long", 32, 8);
    EXPECT_EQ(ingest(dir / "long", 32, 32).count(), 32);
    fs::remove_all(dir);
}

TEST(Ingest, GapsAndMixedSizesRaise) {
    const auto dir = fresh_dir("ingest_bad");
    write_frames(dir / "gap", 4, 8, {2});
    try {
        ingest(dir / "gap", 8, 8);
        FAIL();
    } catch (const IngestionError& e) {
        EXPECT_NE(std::string(e.what()).find("0002"), std::string::npos);
    }
    write_frames(dir / "mixed", 3, 8);
    write_png(dir / "mixed" / "frame_0004.png", torch::zeros({3, 9, 8}, torch::kFloat64));
    EXPECT_THROW(ingest(dir / "mixed", 8, 8), IngestionError);
    EXPECT_THROW(ingest(dir / "absent", 8, 8), IngestionError);
    fs::create_directories(dir / "empty");
    EXPECT_THROW(ingest(dir / "empty", 8, 8), IngestionError);
    fs::remove_all(dir);
}

}  // namespace
}  // namespace savekit
