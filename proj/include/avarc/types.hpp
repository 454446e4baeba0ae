#pragma once

#include <vector>

#include "avarc/schedule.hpp"

namespace avarc {

/// Channel-major pixels [C, H, W] with values in [0, 1].
struct Image {
    int channels = 1;
    int height = 0;
    int width = 0;
    std::vector<double> pixels;

    Image() = default;
    Image(int c, int h, int w) : channels(c), height(h), width(w), pixels(static_cast<std::size_t>(c) * h * w, 0.0) {}

    double& at(int c, int y, int x) { return pixels[(static_cast<std::size_t>(c) * height + y) * width + x]; }
    double at(int c, int y, int x) const { return pixels[(static_cast<std::size_t>(c) * height + y) * width + x]; }
};

/// Latent features, row-major [h * w, channels].
struct FeatureMap {
    int h = 0;
    int w = 0;
    int channels = 0;
    std::vector<double> values;

    FeatureMap() = default;
    FeatureMap(int h_, int w_, int c) : h(h_), w(w_), channels(c), values(static_cast<std::size_t>(h_) * w_ * c, 0.0) {}

    bool operator==(const FeatureMap&) const = default;
};

/// One integer grid per scale; grid k is row-major [h_k * w_k].
struct MultiScaleTokenMap {
    ScaleSchedule schedule;
    std::vector<std::vector<int>> maps;

    MultiScaleTokenMap() = default;
    explicit MultiScaleTokenMap(ScaleSchedule s);

    int at(int k, int i, int j) const {
        return maps[static_cast<std::size_t>(k)][static_cast<std::size_t>(i) * schedule.side(k).w + j];
    }
    /// Tokens of the first `num_scales` scales in sequence order.
    std::vector<int> flatten(int num_scales) const;
    std::vector<int> flatten() const { return flatten(schedule.num_scales()); }
    int total_tokens() const { return schedule.total_tokens(); }

    /// Throws ShapeError/InvalidTokenError if grids disagree with the schedule
    /// or ids fall outside [0, vocab).
    void validate(int vocab) const;

    bool operator==(const MultiScaleTokenMap& o) const { return schedule == o.schedule && maps == o.maps; }
};

/// Per-scale grids of real values sharing a schedule (log-probabilities, PMI).
struct ScaleGrids {
    ScaleSchedule schedule;
    std::vector<std::vector<double>> grids;

    double sum() const;
    std::size_t count() const;
};

}  // namespace avarc
