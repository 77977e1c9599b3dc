#include "savekit/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <sstream>

#include "savekit/archive.hpp"
#include "savekit/errors.hpp"
#include "savekit/text.hpp"

namespace savekit {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

// Strips a trailing comment that is not inside a string.
std::string strip_comment(const std::string& line) {
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) quoted = !quoted;
        if (line[i] == '#' && !quoted) return line.substr(0, i);
    }
    return line;
}

void flatten(const nlohmann::json& node, const std::string& prefix, std::map<std::string, std::string>& out) {
    if (node.is_object() && !node.empty()) {
        for (const auto& [k, v] : node.items()) flatten(v, prefix.empty() ? k : prefix + "." + k, out);
        return;
    }
    out[prefix] = node.dump();
}

void check_prompt(const std::string& name, const std::string& prompt, const Vocabulary& vocab, std::int64_t max_len,
                  bool want_pro, bool want_mot, std::vector<std::string>& problems) {
    try {
        auto t = tokenize(prompt, vocab, max_len);
        if (want_pro != t.protagonist_slot.has_value())
            problems.push_back(name + (want_pro ? " needs a <pro> slot" : " must not carry a <pro> slot"));
        if (want_mot != t.motion_slot.has_value())
            problems.push_back(name + (want_mot ? " needs a <mot> slot" : " must not carry a <mot> slot"));
    } catch (const Error& e) {
        problems.push_back(name + ": " + e.what());
    }
}

template <class F>
void collect(std::vector<std::string>& problems, F&& check) {
    try {
        check();
    } catch (const ConfigError& e) {
        problems.push_back(e.what());
    }
}

}  // namespace

nlohmann::json parse_flat_config(const std::string& text) {
    nlohmann::json tree = nlohmann::json::object();
    std::istringstream in(text);
    std::string line;
    for (int number = 1; std::getline(in, line); ++number) {
        line = trim(strip_comment(line));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(number) + ": expected key = value");
        const auto key = trim(line.substr(0, eq));
        const auto raw = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(number) + ": empty key");
        nlohmann::json value;
        try {
            value = nlohmann::json::parse(raw);
        } catch (const nlohmann::json::parse_error&) {
            throw ConfigError("config line " + std::to_string(number) + ": cannot parse value '" + raw + "'");
        }
        nlohmann::json* node = &tree;
        std::istringstream parts(key);
        std::string part;
        std::vector<std::string> path;
        while (std::getline(parts, part, '.')) path.push_back(trim(part));
        for (std::size_t i = 0; i + 1 < path.size(); ++i) {
            auto& child = (*node)[path[i]];
            if (child.is_null()) child = nlohmann::json::object();
            if (!child.is_object()) throw ConfigError("config key '" + key + "' clashes with a scalar");
            node = &child;
        }
        if (node->contains(path.back())) throw ConfigError("duplicate config key '" + key + "'");
        (*node)[path.back()] = value;
    }
    return tree;
}

std::string dump_flat_config(const nlohmann::json& tree) {
    std::map<std::string, std::string> flat;
    flatten(tree, "", flat);
    std::string out;
    for (const auto& [k, v] : flat) out += k + " = " + v + "\n";
    return out;
}

std::filesystem::path RunConfig::base_model_path() const {
    return base_model.empty() ? run_dir / "base.ckpt" : std::filesystem::path(base_model);
}

void RunConfig::validate(const std::vector<std::filesystem::path>& required_paths) const {
    std::vector<std::string> problems;
    if (run_dir.empty()) problems.push_back("run_dir must be set");
    if (frame_height < 1 || frame_width < 1) problems.push_back("frame size must be positive");
    if (source != kFixtureSource && !std::filesystem::is_directory(source))
        problems.push_back("source directory '" + source + "' does not exist");
    for (const auto& p : required_paths)
        if (!std::filesystem::exists(p)) problems.push_back("required path '" + p.string() + "' does not exist");

    const auto vocab = Vocabulary::toy();
    const auto max_len = pretrain.text.max_len;
    check_prompt("stage1_prompt", stage1_prompt, vocab, max_len, true, false, problems);
    check_prompt("source_prompt", source_prompt, vocab, max_len, true, true, problems);
    if (edit_prompts.empty()) problems.push_back("at least one edit prompt required");
    for (std::size_t i = 0; i < edit_prompts.size(); ++i)
        check_prompt("edit_prompts[" + std::to_string(i) + "]", edit_prompts[i], vocab, max_len, false, true, problems);

    collect(problems, [&] { train.validate(); });
    collect(problems, [&] { sampler.validate(DiffusionSchedule::scaled_linear().steps()); });
    collect(problems, [&] { pretrain.validate(); });
    if (!problems.empty()) {
        std::string msg = "invalid run config:";
        for (const auto& p : problems) msg += "\n  - " + p;
        throw ConfigError(msg);
    }
}

nlohmann::json RunConfig::to_json() const {
    return {{"run_dir", run_dir.string()},
            {"source", source},
            {"base_model", base_model},
            {"frame_height", frame_height},
            {"frame_width", frame_width},
            {"stage1_prompt", stage1_prompt},
            {"source_prompt", source_prompt},
            {"edit_prompts", edit_prompts},
            {"train", train.to_json()},
            {"sampler", sampler.to_json()},
            {"pretrain", pretrain.to_json()}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    static const std::vector<std::string> known{"run_dir",       "source",        "base_model",   "frame_height",
                                                "frame_width",   "stage1_prompt", "source_prompt", "edit_prompts",
                                                "train",         "sampler",       "pretrain"};
    for (const auto& [k, v] : j.items())
        if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("unknown config key '" + k + "'");
    RunConfig c;
    try {
        c.run_dir = j.value("run_dir", c.run_dir.string());
        c.source = j.value("source", c.source);
        c.base_model = j.value("base_model", c.base_model);
        c.frame_height = j.value("frame_height", c.frame_height);
        c.frame_width = j.value("frame_width", c.frame_width);
        c.stage1_prompt = j.value("stage1_prompt", c.stage1_prompt);
        c.source_prompt = j.value("source_prompt", c.source_prompt);
        c.edit_prompts = j.value("edit_prompts", c.edit_prompts);
        if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
        if (j.contains("sampler")) c.sampler = SamplerConfig::from_json(j.at("sampler"));
        if (j.contains("pretrain")) c.pretrain = PretrainConfig::from_json(j.at("pretrain"));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config value of the wrong type: ") + e.what());
    }
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw DependencyError("config file '" + path.string() + "' not found");
    auto config = parse(read_file(path));
    if (const char* env = std::getenv(kRunDirEnv); env && *env) config.run_dir = env;
    return config;
}

bool operator==(const RunConfig& a, const RunConfig& b) { return a.to_json() == b.to_json(); }

VideoFrames load_source(const RunConfig& config) {
    if (config.source == kFixtureSource) {
        auto video = moving_square_video().video;
        if (video.height() != config.frame_height || video.width() != config.frame_width)
            video.frames = resize_frames(video.frames, config.frame_height, config.frame_width);
        return video;
    }
    return ingest(config.source, config.frame_height, config.frame_width);
}

}  // namespace savekit
