#pragma once

// Likelihood estimators over multi-scale token maps. All values are natural
// logs.

#include <cstdint>
#include <span>
#include <vector>

#include "avarc/nextscale.hpp"
#include "avarc/tokenizer.hpp"
#include "avarc/types.hpp"
#include "json.hpp"

namespace avarc {

struct LogLikelihoodResult {
    double total = 0.0;
    /// Per-token factors grouped by scale. Empty for the smoothed estimator,
    /// whose total is not a sum of token terms.
    ScaleGrids per_token;
};

struct SmoothingConfig {
    int samples = 3;
    double sigma = 0.1;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static SmoothingConfig from_json(const nlohmann::json& j);
};

/// Numerically stable log(sum(exp(values))); -inf for an empty or all -inf input.
double log_sum_exp(std::span<const double> values);

/// log p(r_k(i,j) | r_<k, y) for every token of scales 1..upto_scale (0 means
/// all scales). y may be the model's null label.
ScaleGrids token_log_probs(const MultiScaleTokenMap& tokens, int y, const NextScaleModel& model, int upto_scale = 0);

/// token_log_probs under the null label; needs a model trained with label dropout.
ScaleGrids unconditional_log_probs(const MultiScaleTokenMap& tokens, const NextScaleModel& model, int upto_scale = 0);

LogLikelihoodResult log_likelihood_full(const MultiScaleTokenMap& tokens, int y, const NextScaleModel& model);
LogLikelihoodResult log_likelihood_partial(const MultiScaleTokenMap& tokens, int y, const NextScaleModel& model,
                                           int k_prime);
/// log sum_i p(Q(f + eps_i) | y) over cfg.samples seeded noise draws.
LogLikelihoodResult log_likelihood_smoothed(const FeatureMap& f, int y, const NextScaleModel& model,
                                            const Tokenizer& tokenizer, const SmoothingConfig& cfg);

/// Token maps Q(f + eps_i), i < cfg.samples. The draws depend only on
/// (f, cfg), so every candidate label sees the same samples.
std::vector<MultiScaleTokenMap> smoothing_samples(const FeatureMap& f, const Tokenizer& tokenizer,
                                                  const SmoothingConfig& cfg);

// Batched scoring of one input under many labels; result i belongs to labels[i].

/// Partial-scale totals (k_prime = K gives the full likelihood).
std::vector<double> partial_scores(const MultiScaleTokenMap& tokens, std::span<const int> labels,
                                   const NextScaleModel& model, int k_prime, int max_batch = 16);
/// Smoothed totals from precomputed samples.
std::vector<double> smoothed_scores(std::span<const MultiScaleTokenMap> samples, std::span<const int> labels,
                                    const NextScaleModel& model, int max_batch = 16);

}  // namespace avarc
