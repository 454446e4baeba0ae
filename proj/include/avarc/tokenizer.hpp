#pragma once

// Multi-scale residual VQ tokenizer: a small convolutional autoencoder whose
// latent grid is quantized coarse-to-fine against one shared codebook.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "avarc/nn/layers.hpp"
#include "avarc/schedule.hpp"
#include "avarc/types.hpp"
#include "json.hpp"

namespace avarc {

struct TokenizerConfig {
    int image_channels = 1;
    int image_height = 28;
    int image_width = 28;
    int vocab = 512;
    int feat_channels = 32;
    int hidden_channels = 32;
    ScaleSchedule schedule = ScaleSchedule::desk();

    // Training.
    int epochs = 4;
    int batch_size = 32;
    double learning_rate = 2e-3;
    double commitment_weight = 0.25;
    /// Codes unused for this many steps are re-seeded from batch residuals; 0 disables.
    int dead_code_interval = 100;
    std::uint64_t seed = 0;

    /// Number of stride-2 stages between the image and the latent grid.
    int downsampling_stages() const;
    void validate() const;
    nlohmann::json to_json() const;
    static TokenizerConfig from_json(const nlohmann::json& j);
};

struct TokenizerTrainStep {
    int step = 0;
    double loss = 0.0;
    double reconstruction = 0.0;
    double wall_ms = 0.0;
};

class Tokenizer {
public:
    explicit Tokenizer(TokenizerConfig config);

    const TokenizerConfig& config() const { return config_; }
    const ScaleSchedule& schedule() const { return config_.schedule; }
    int vocab() const { return config_.vocab; }
    /// Codebook vectors, row-major [vocab, feat_channels].
    std::span<const double> codebook() const { return codebook_.data(); }
    const ScaleOperators& operators() const { return ops_; }

    FeatureMap encode(const Image& image) const;
    std::vector<FeatureMap> encode_batch(std::span<const Image> images) const;
    MultiScaleTokenMap quantize(const FeatureMap& f) const;
    /// Sum over scales of the upsampled codebook vectors.
    FeatureMap lookup(const MultiScaleTokenMap& tokens) const;
    Image decode_features(const FeatureMap& f_hat) const;
    Image decode(const MultiScaleTokenMap& tokens) const { return decode_features(lookup(tokens)); }

    /// Per-scale residual L2 norms recorded while quantizing (after each scale).
    std::vector<double> residual_norms(const FeatureMap& f) const;

    nn::ParamRefs params();
    Tokenizer clone() const;

    void save(const std::filesystem::path& path, const nlohmann::json& extra = {}) const;
    static Tokenizer load(const std::filesystem::path& path);

    // Internal pieces used by training.
    nn::Tensor encoder_forward(const nn::Tensor& x) const;
    nn::Tensor decoder_forward(const nn::Tensor& f) const;
    nn::Tensor& codebook_tensor() { return codebook_; }

private:
    TokenizerConfig config_;
    ScaleOperators ops_;
    nn::Conv2d enc_in_;
    std::vector<nn::Conv2d> enc_down_;
    nn::Conv2d enc_out_;
    nn::Conv2d dec_in_;
    std::vector<nn::Conv2d> dec_up_;
    nn::Conv2d dec_out_;
    nn::Tensor codebook_;
    std::vector<double> code_norms_;

    void refresh_code_norms();
    friend class TokenizerTrainer;
};

/// Nearest codebook entry per row (squared L2, ties to the smallest id).
std::vector<int> nearest_codes(std::span<const double> rows, int n_rows, std::span<const double> codebook,
                               std::span<const double> code_norms, int channels);

/// Gaussian feature noise with standard deviation `sigma`; deterministic for a seed.
FeatureMap perturb_features(const FeatureMap& f, double sigma, std::uint64_t seed);

/// Mean fraction of token positions whose id changes after perturbation.
double token_change_fraction(const FeatureMap& f, double sigma, int n_trials, const Tokenizer& tokenizer,
                             std::uint64_t seed);

double mean_squared_error(const Image& a, const Image& b);

/// Trains a tokenizer from scratch on `images`; `on_step` receives each step.
Tokenizer train_tokenizer(std::span<const Image> images, const TokenizerConfig& config,
                          const std::function<void(const TokenizerTrainStep&)>& on_step = {});

}  // namespace avarc
