#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "avarc/nextscale.hpp"
#include "avarc/nn/layers.hpp"
#include "avarc/tokenizer.hpp"
#include "json.hpp"

namespace avarc {

struct LabeledTokens {
    MultiScaleTokenMap tokens;
    int label = 0;
};

/// Quantizes every image once with the (frozen) tokenizer.
std::vector<LabeledTokens> tokenize_dataset(std::span<const Image> images, std::span<const int> labels,
                                            const Tokenizer& tokenizer);

struct TrainConfig {
    int epochs = 10;
    int batch_size = 32;
    double learning_rate = 1e-3;
    /// Linear warm-up length in steps, then cosine decay to min_lr_ratio * lr.
    int warmup_steps = 100;
    double min_lr_ratio = 0.1;
    double label_dropout = 0.1;
    double grad_clip = 1.0;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

struct CCAConfig {
    double beta = 0.02;
    double lambda = 1.0;
    int epochs = 1;
    int batch_size = 16;
    double learning_rate = 1e-4;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static CCAConfig from_json(const nlohmann::json& j);
};

struct TrainStepRecord {
    int step = 0;
    int epoch = 0;
    double loss = 0.0;
    double lr = 0.0;
    double wall_ms = 0.0;

    nlohmann::json to_json() const;
};

struct TrainHooks {
    std::function<void(const TrainStepRecord&)> on_step;
    /// Receives the dataset labels of every batch before it is used.
    std::function<void(std::span<const int>)> on_batch;
};

/// Mean per-token negative log-likelihood training with label dropout to the
/// null label. Marks the model unconditional-capable when dropout > 0.
NextScaleModel train_mle(std::span<const LabeledTokens> data, NextScaleModel model, const TrainConfig& cfg,
                         const TrainHooks& hooks = {});

/// Uniform over [0, n_classes) minus {y}.
int sample_negative_label(int y, int n_classes, nn::Rng& rng);

/// Mean over the batch of -log sig(beta * d(y)) - lambda * log sig(-beta * d(y_neg)),
/// d(c) = log p_theta(x|c) - log p_phi(x|c). Records a graph through theta.
nn::Tensor cca_objective(std::span<const MultiScaleTokenMap* const> maps, std::span<const int> labels,
                         std::span<const int> negatives, const NextScaleModel& theta, const NextScaleModel& phi,
                         const CCAConfig& cfg);

double cca_loss(const MultiScaleTokenMap& tokens, int y, int y_neg, const NextScaleModel& theta,
                const NextScaleModel& phi, const CCAConfig& cfg);

/// Snapshots the input as the frozen reference and optimizes a copy on the
/// CCA objective with negatives redrawn per example per epoch.
NextScaleModel finetune_cca(std::span<const LabeledTokens> data, const NextScaleModel& model, const CCAConfig& cfg,
                            const TrainHooks& hooks = {});

/// Mean per-token NLL of `data` under the true labels.
double mean_token_nll(std::span<const LabeledTokens> data, const NextScaleModel& model, int max_batch = 32);

/// Mean of log p(x|y) - log p(x|y_neg) with negatives drawn from `seed`.
double mean_label_margin(std::span<const LabeledTokens> data, const NextScaleModel& model, std::uint64_t seed,
                         int max_batch = 32);

}  // namespace avarc
