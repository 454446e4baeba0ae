#pragma once

// Token-wise pointwise mutual information and its pixel-space rendering.

#include <filesystem>
#include <string>
#include <vector>

#include "avarc/nextscale.hpp"
#include "avarc/types.hpp"
#include "json.hpp"

namespace avarc {

struct PMIMap {
    ScaleGrids values;
    int label = -1;
    /// Second label of a contrastive map, -1 otherwise.
    int contrast_label = -1;

    double total() const { return values.sum(); }
    nlohmann::json to_json() const;
};

/// log p(r | r_<k, y) - log p(r | r_<k) per token, from one conditional and
/// one unconditional forward pass.
PMIMap token_pmi(const MultiScaleTokenMap& tokens, int y, const NextScaleModel& model);

/// log p(r | r_<k, y_a) - log p(r | r_<k, y_b) per token; no unconditional pass.
PMIMap contrastive_pmi(const MultiScaleTokenMap& tokens, int y_a, int y_b, const NextScaleModel& model);

enum class HeatmapMode { finest_scale, scale_weighted_sum };

HeatmapMode parse_heatmap_mode(const std::string& name);
std::string heatmap_mode_name(HeatmapMode mode);

struct Heatmap {
    int height = 0;
    int width = 0;
    std::vector<double> values;  // row-major [height * width]
    double min = 0.0;
    double max = 0.0;

    double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

/// finest_scale interpolates the last grid; scale_weighted_sum averages every
/// interpolated grid.
Heatmap render_heatmap(const PMIMap& pmi, int height, int width, HeatmapMode mode = HeatmapMode::finest_scale);

/// Diverging colormap centred at zero (blue negative, red positive), optionally
/// blended over `underlay`, nearest-upscaled by `zoom`.
void write_heatmap_png(const std::filesystem::path& path, const Heatmap& heatmap, const Image* underlay = nullptr,
                       int zoom = 1);

/// Raw per-scale values plus rendering metadata.
nlohmann::json heatmap_sidecar(const PMIMap& pmi, const Heatmap& heatmap, HeatmapMode mode);

}  // namespace avarc
