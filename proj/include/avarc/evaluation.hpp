#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "avarc/classifier.hpp"
#include "avarc/data.hpp"
#include "json.hpp"

namespace avarc {

struct BenchmarkRecord {
    std::string experiment;
    std::string config_hash;
    std::string metric;
    double value = 0.0;
    double wall_ms = 0.0;
    std::uint64_t seed = 0;
    std::string timestamp;

    nlohmann::json to_json() const;
    static std::string csv_header();
    std::string csv_row() const;
};

/// 16 hex digits of FNV-1a over the canonical JSON dump.
std::string config_hash(const nlohmann::json& config);
/// Current UTC time, ISO 8601.
std::string utc_timestamp();

void write_records_csv(const std::filesystem::path& path, std::span<const BenchmarkRecord> records);
void append_jsonl(const std::filesystem::path& path, const nlohmann::json& record);

/// Fraction of rows whose true label ranks among the k best scores (ties to
/// the smaller label id); k is clamped to the number of classes.
double topk_accuracy(const std::vector<std::vector<double>>& scores, std::span<const int> labels, int k);
double accuracy(std::span<const int> predictions, std::span<const int> labels);

/// Inputs encoded and quantized once.
struct EvalSet {
    std::vector<PreparedInput> inputs;
    std::vector<int> labels;

    std::size_t size() const { return inputs.size(); }
};
EvalSet prepare_eval_set(const Dataset& data, const Tokenizer& tokenizer);

struct SweepPoint {
    int k_prime = 0;
    int tokens = 0;
    int k = 0;
    double topk = 0.0;
    double ms_per_image = 0.0;
};

/// Top-k accuracy (k = min(10, n_classes) when k is 0) of partial-scale
/// ranking for every K' in k_values.
std::vector<SweepPoint> scale_sweep(const EvalSet& data, const NextScaleModel& model, std::span<const int> k_values,
                                    int k = 0);

struct AblationCell {
    bool smoothing = false;
    bool cca = false;
    double top1 = 0.0;
    double ms_per_image = 0.0;
};

/// 2x2 grid of exhaustive top-1 accuracy: {full, smoothed} x {base, CCA}.
std::vector<AblationCell> ablation_grid(const EvalSet& data, const NextScaleModel& base, const NextScaleModel& cca,
                                        const Tokenizer& tokenizer, const SmoothingConfig& smoothing);

struct NoiseRow {
    double sigma = 0.0;
    double token_change = 0.0;
    double recon_mse = 0.0;
    /// Mean of log p(Q(f) | y) - log p(Q(f + eps) | y); 0 without a model.
    double loglik_gap = 0.0;
};

/// Feature-noise experiment over `images`; `model` may be null.
std::vector<NoiseRow> noise_experiment(std::span<const Image> images, std::span<const int> labels,
                                       std::span<const double> sigmas, const Tokenizer& tokenizer,
                                       const NextScaleModel* model, int n_trials = 1, std::uint64_t seed = 0);

struct ChartSeries {
    std::vector<double> y;
    std::uint8_t r = 0, g = 0, b = 0;
};

/// Minimal PNG line chart: shared x values, one polyline per series, axes.
void write_line_chart(const std::filesystem::path& path, std::span<const double> x, std::span<const ChartSeries> series,
                      int width = 480, int height = 320);

/// Median wall-clock milliseconds of `repeats` runs of `fn`.
double median_ms(const std::function<void()>& fn, int repeats);

}  // namespace avarc
