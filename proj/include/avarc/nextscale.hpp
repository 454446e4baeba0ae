#pragma once

// Class-conditional next-scale predictor p(r_k | r_<k, y).
//
// The sequence is the concatenation of all scales, coarse to fine. Positions
// of scale 1 receive the label embedding (start token); positions of scale
// k > 1 receive the cumulative codebook reconstruction of scales < k,
// resampled to (h_k, w_k). Attention is block-causal over scales, so one
// teacher-forced pass yields every factor of the likelihood.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "avarc/nn/layers.hpp"
#include "avarc/schedule.hpp"
#include "avarc/types.hpp"
#include "json.hpp"

namespace avarc {

struct NextScaleConfig {
    int n_classes = 10;
    int vocab = 512;
    int feat_channels = 32;
    ScaleSchedule schedule = ScaleSchedule::desk();
    int width = 64;
    int depth = 2;
    int heads = 4;
    int mlp_ratio = 4;
    double init_std = 0.02;
    bool zero_head = true;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static NextScaleConfig from_json(const nlohmann::json& j);
};

class NextScaleModel {
public:
    /// `codebook` is the tokenizer codebook [vocab, feat_channels]; the model
    /// keeps a frozen copy to build its inputs.
    NextScaleModel(NextScaleConfig config, std::span<const double> codebook);

    const NextScaleConfig& config() const { return config_; }
    const ScaleSchedule& schedule() const { return config_.schedule; }
    int n_classes() const { return config_.n_classes; }
    int vocab() const { return config_.vocab; }
    /// Label id reserved for the unconditional model.
    int null_label() const { return config_.n_classes; }

    /// True once the null label has been trained (label dropout > 0).
    bool has_unconditional() const { return has_unconditional_; }
    void set_has_unconditional(bool on) { has_unconditional_ = on; }

    /// Teacher-forced log-probabilities [batch, prefix_tokens(upto_scale)] of
    /// maps[b] under labels[b]. Labels may include null_label(). Records a
    /// graph when gradient mode is on.
    nn::Tensor forward(std::span<const MultiScaleTokenMap* const> maps, std::span<const int> labels,
                       int upto_scale) const;

    /// Number of forward() calls since construction or the last reset.
    std::size_t forward_count() const { return forward_count_.value.load(); }
    void reset_forward_count() { forward_count_.value = 0; }

    /// Inputs for positions of scales 2..upto, row-major [tokens, feat_channels].
    std::vector<double> teacher_inputs(const MultiScaleTokenMap& map, int upto_scale) const;

    /// Trainable parameters (excludes the frozen codebook).
    nn::ParamRefs params();
    /// Everything persisted in a checkpoint.
    nn::ParamRefs state();
    std::span<const double> codebook() const { return codebook_.data(); }

    NextScaleModel clone() const;
    bool same_architecture(const NextScaleModel& other) const;

    void save(const std::filesystem::path& path, const nlohmann::json& extra = {}) const;
    static NextScaleModel load(const std::filesystem::path& path);

private:
    // Copies start from zero.
    struct CallCounter {
        std::atomic<std::size_t> value{0};
        CallCounter() = default;
        CallCounter(const CallCounter&) {}
        CallCounter& operator=(const CallCounter&) { return *this; }
    };

    struct Block {
        nn::LayerNorm ln1;
        nn::Linear qkv;
        nn::Linear proj;
        nn::LayerNorm ln2;
        nn::Linear fc1;
        nn::Linear fc2;
    };

    NextScaleConfig config_;
    ScaleOperators ops_;
    nn::Tensor codebook_;
    nn::Tensor class_embed_;  // [n_classes + 1, width]
    nn::Tensor pos_embed_;    // [total_tokens, width]
    nn::Tensor scale_embed_;  // [num_scales, width]
    nn::Linear word_embed_;   // feat_channels -> width
    std::vector<Block> blocks_;
    nn::LayerNorm ln_out_;
    nn::Linear head_;
    bool has_unconditional_ = false;
    mutable CallCounter forward_count_;
};

}  // namespace avarc
