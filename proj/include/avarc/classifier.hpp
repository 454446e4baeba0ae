#pragma once

// Bayes-rule classification over class-conditional likelihoods, exhaustive
// or staged with candidate pruning.

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "avarc/likelihood.hpp"
#include "avarc/nextscale.hpp"
#include "avarc/tokenizer.hpp"
#include "json.hpp"

namespace avarc {

/// Normalized posterior softmax(log_lik + log prior). An empty prior means uniform.
std::vector<double> posterior(std::span<const double> log_liks, std::span<const double> prior = {});

enum class MethodKind { partial, full, smoothed };

struct Method {
    MethodKind kind = MethodKind::full;
    int k_prime = 0;  // partial only
    SmoothingConfig smoothing;  // smoothed only

    static Method partial(int k_prime);
    static Method full();
    static Method smoothed(int samples, double sigma, std::uint64_t seed = 0);

    /// Throws ParameterError for out-of-range parameters.
    void validate(int num_scales) const;
    std::string name() const;
    nlohmann::json to_json() const;
    static Method from_json(const nlohmann::json& j);
};

struct Stage {
    int keep = 1;
    Method method;
};

struct StagePlan {
    std::vector<Stage> stages;

    static StagePlan single(Method method);
    /// Non-empty, keep counts >= 1 and non-increasing, final keep = 1.
    void validate(int num_scales) const;
    /// JSON array of {keep, method, params}.
    nlohmann::json to_json() const;
    static StagePlan from_json(const nlohmann::json& j);
};

/// Reference three-stage plan (top 10 by partial K', top 3 by full, final by
/// smoothed S=3, sigma=0.1), keep counts clamped to n_classes; a single full
/// stage when n_classes <= 3. K' is 6 for schedules of 7+ scales (and when
/// num_scales is 0), otherwise ceil(K/2).
StagePlan default_plan(int n_classes, int num_scales = 0);

struct StageTrace {
    int keep = 0;
    Method method;
    std::vector<int> candidates;  // scored labels, in pool order
    std::vector<double> scores;   // aligned with candidates
    std::vector<int> kept;        // best first
    double ms = 0.0;
};

struct ClassificationTrace {
    std::vector<StageTrace> stages;
    int prediction = -1;

    nlohmann::json to_json() const;
};

struct Classification {
    int prediction = -1;
    ClassificationTrace trace;
};

/// Scores `labels` with `method`; one score per label, log domain.
using ScoreFunction = std::function<std::vector<double>(const Method&, std::span<const int>)>;

/// Argmax of one scoring pass; ties go to the smallest label id.
Classification exhaustive_argmax(std::span<const int> labels, const Method& method, const ScoreFunction& score);

/// Staged pruning: every stage re-scores the surviving pool with its own
/// method and keeps the best min(keep, pool) labels.
Classification run_plan(std::span<const int> labels, const StagePlan& plan, const ScoreFunction& score);

/// An input encoded once; scoring methods reuse its clean features and tokens.
struct PreparedInput {
    FeatureMap features;
    MultiScaleTokenMap tokens;
};

PreparedInput prepare_input(const Image& image, const Tokenizer& tokenizer);
PreparedInput prepare_input(const FeatureMap& features, const Tokenizer& tokenizer);

std::vector<double> score_labels(const PreparedInput& input, std::span<const int> labels, const NextScaleModel& model,
                                 const Tokenizer& tokenizer, const Method& method);

ScoreFunction model_scorer(const PreparedInput& input, const NextScaleModel& model, const Tokenizer& tokenizer);

Classification classify_exhaustive(const PreparedInput& input, std::span<const int> labels,
                                   const NextScaleModel& model, const Tokenizer& tokenizer, const Method& method);
Classification classify_exhaustive(const Image& image, std::span<const int> labels, const NextScaleModel& model,
                                   const Tokenizer& tokenizer, const Method& method);

Classification classify_adaptive(const PreparedInput& input, std::span<const int> labels, const NextScaleModel& model,
                                 const Tokenizer& tokenizer, const StagePlan& plan);
Classification classify_adaptive(const Image& image, std::span<const int> labels, const NextScaleModel& model,
                                 const Tokenizer& tokenizer, const StagePlan& plan);

/// 0..n-1
std::vector<int> all_labels(int n_classes);

}  // namespace avarc
