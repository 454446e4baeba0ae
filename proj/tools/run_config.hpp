#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "avarc/classifier.hpp"
#include "avarc/data.hpp"
#include "avarc/incremental.hpp"
#include "avarc/tokenizer.hpp"
#include "avarc/training.hpp"
#include "json.hpp"

namespace avarc::cli {

struct PathsConfig {
    std::string data_dir;  // empty: $AVARC_DATA_DIR
    std::string work_dir = "runs/desk";
    std::string tokenizer = "tokenizer.ckpt";
    std::string model = "model.ckpt";
    std::string cca_model = "model_cca.ckpt";
};

struct DataConfig {
    std::string format = "mnist";  // mnist | folder
    std::string train_subdir = "train";  // folder format only
    std::string test_subdir = "test";
    int train_limit = 10000;
    int test_limit = 1000;
};

struct ModelShape {
    int width = 64;
    int depth = 2;
    int heads = 4;
    int mlp_ratio = 4;
    double init_std = 0.02;
    bool zero_head = true;
};

struct EvalConfig {
    std::vector<int> sweep_scales;  // empty: every scale
    std::vector<double> noise_sigmas{0.0, 0.05, 0.1, 0.2, 0.3};
    int noise_images = 64;
    int noise_trials = 1;
    int ablation_samples = 10;
    double ablation_sigma = 0.1;
    int benchmark_images = 200;
    int benchmark_repeats = 5;
};

struct RunConfig {
    std::uint64_t seed = 0;
    PathsConfig paths;
    DataConfig data;
    TokenizerConfig tokenizer;
    ModelShape model;
    TrainConfig training;
    CCAConfig cca;
    std::optional<StagePlan> plan;
    EvalConfig evaluate;
    BaselineConfig baseline;

    /// Rejects unknown keys anywhere in the document and per-section seeds;
    /// every random stream derives from the top-level seed.
    static RunConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
    /// Hash of the canonical configuration.
    std::string hash() const;

    std::filesystem::path work_path(const std::string& name) const;
    NextScaleConfig model_config(int n_classes) const;
};

/// Applies "a.b.c=value" overrides; value is parsed as JSON, else kept as a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Reads `path` (empty: defaults), applies overrides, then the seed.
RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides,
                          std::optional<std::uint64_t> seed);

/// Train or test split per the data section.
Dataset load_split(const RunConfig& cfg, bool train);

}  // namespace avarc::cli
