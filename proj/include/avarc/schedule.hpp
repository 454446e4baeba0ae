#pragma once

#include <vector>

#include "avarc/nn/ops.hpp"
#include "json.hpp"

namespace avarc {

struct ScaleSide {
    int h = 1;
    int w = 1;
    bool operator==(const ScaleSide&) const = default;
};

/// Ordered token-grid sizes (h_k, w_k), coarse to fine. The last side is the
/// latent grid of the tokenizer.
class ScaleSchedule {
public:
    ScaleSchedule() = default;
    explicit ScaleSchedule(std::vector<ScaleSide> sides);

    /// ((1,1),(2,2),(3,3),(5,5),(7,7)) over a 7x7 latent grid.
    static ScaleSchedule desk();
    /// The 10-scale 256px VAR schedule: 1,2,3,4,5,6,8,10,13,16.
    static ScaleSchedule reference();
    /// Square sides.
    static ScaleSchedule square(const std::vector<int>& sides);

    int num_scales() const { return static_cast<int>(sides_.size()); }
    const ScaleSide& side(int k) const { return sides_.at(static_cast<std::size_t>(k)); }
    const std::vector<ScaleSide>& sides() const { return sides_; }
    int tokens_in_scale(int k) const { return side(k).h * side(k).w; }
    /// Index of the first token of scale k in the flattened sequence.
    int offset(int k) const { return offsets_.at(static_cast<std::size_t>(k)); }
    /// Token count of the first `num_scales` scales.
    int prefix_tokens(int num_scales) const;
    int total_tokens() const { return prefix_tokens(num_scales()); }
    int latent_h() const { return sides_.back().h; }
    int latent_w() const { return sides_.back().w; }
    /// Scale index of flattened position `pos`.
    int scale_of(int pos) const;

    bool operator==(const ScaleSchedule& o) const { return sides_ == o.sides_; }

    nlohmann::json to_json() const;
    static ScaleSchedule from_json(const nlohmann::json& j);

private:
    std::vector<ScaleSide> sides_;
    std::vector<int> offsets_;
};

/// Resampling matrix between two grids, applied to row-major [h*w, C] maps.
/// Triangle (bilinear) filter whose support widens by the downscale ratio,
/// so downsampling averages and upsampling interpolates; identity when sizes
/// match.
nn::ConstMatrix bilinear_resize_operator(int in_h, int in_w, int out_h, int out_w);

/// Per-scale down (latent -> scale) and up (scale -> latent) operators.
struct ScaleOperators {
    std::vector<nn::ConstMatrix> down;
    std::vector<nn::ConstMatrix> up;

    static ScaleOperators build(const ScaleSchedule& schedule);
};

}  // namespace avarc
