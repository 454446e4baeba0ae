#include "avarc/explain.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "avarc/error.hpp"
#include "avarc/likelihood.hpp"
#include "avarc/png_io.hpp"

namespace avarc {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

PMIMap difference(const ScaleGrids& a, const ScaleGrids& b) {
    PMIMap out;
    out.values.schedule = a.schedule;
    for (std::size_t k = 0; k < a.grids.size(); ++k) {
        std::vector<double> g(a.grids[k].size());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = a.grids[k][i] - b.grids[k][i];
        out.values.grids.push_back(std::move(g));
    }
    return out;
}

std::vector<double> resize_grid(const std::vector<double>& grid, int h, int w, int out_h, int out_w) {
    const auto op = bilinear_resize_operator(h, w, out_h, out_w);
    const Eigen::Map<const RowMat> m(op.values.data(), op.rows, op.cols);
    const Eigen::Map<const Eigen::VectorXd> v(grid.data(), static_cast<Eigen::Index>(grid.size()));
    const Eigen::VectorXd r = m * v;
    return {r.data(), r.data() + r.size()};
}

}  // namespace

nlohmann::json PMIMap::to_json() const {
    auto grids = nlohmann::json::array();
    for (std::size_t k = 0; k < values.grids.size(); ++k) {
        const auto& side = values.schedule.side(static_cast<int>(k));
        grids.push_back({{"scale", k + 1}, {"h", side.h}, {"w", side.w}, {"values", values.grids[k]}});
    }
    nlohmann::json j = {{"label", label}, {"total", total()}, {"scales", grids}};
    if (contrast_label >= 0) j["contrast_label"] = contrast_label;
    return j;
}

PMIMap token_pmi(const MultiScaleTokenMap& tokens, int y, const NextScaleModel& model) {
    if (!model.has_unconditional())
        throw CapabilityError("token PMI needs a model trained with label dropout (null label)");
    const auto cond = token_log_probs(tokens, y, model);
    const auto uncond = unconditional_log_probs(tokens, model);
    auto out = difference(cond, uncond);
    out.label = y;
    return out;
}

PMIMap contrastive_pmi(const MultiScaleTokenMap& tokens, int y_a, int y_b, const NextScaleModel& model) {
    if (y_a == y_b) throw ParameterError("contrastive explanation needs two different labels");
    const auto a = token_log_probs(tokens, y_a, model);
    const auto b = token_log_probs(tokens, y_b, model);
    auto out = difference(a, b);
    out.label = y_a;
    out.contrast_label = y_b;
    return out;
}

HeatmapMode parse_heatmap_mode(const std::string& name) {
    if (name == "finest_scale") return HeatmapMode::finest_scale;
    if (name == "scale_weighted_sum") return HeatmapMode::scale_weighted_sum;
    throw ParameterError("unknown heatmap mode \"" + name + "\" (finest_scale | scale_weighted_sum)");
}

std::string heatmap_mode_name(HeatmapMode mode) {
    return mode == HeatmapMode::finest_scale ? "finest_scale" : "scale_weighted_sum";
}

Heatmap render_heatmap(const PMIMap& pmi, int height, int width, HeatmapMode mode) {
    if (height < 1 || width < 1) throw ParameterError("heatmap size must be positive");
    const auto& sched = pmi.values.schedule;
    const int n = static_cast<int>(pmi.values.grids.size());
    if (n == 0) throw ShapeError("PMI map has no scales");
    Heatmap hm;
    hm.height = height;
    hm.width = width;
    if (mode == HeatmapMode::finest_scale) {
        const auto& s = sched.side(n - 1);
        hm.values = resize_grid(pmi.values.grids.back(), s.h, s.w, height, width);
    } else if (mode == HeatmapMode::scale_weighted_sum) {
        hm.values.assign(static_cast<std::size_t>(height) * width, 0.0);
        for (int k = 0; k < n; ++k) {
            const auto& s = sched.side(k);
            const auto up = resize_grid(pmi.values.grids[static_cast<std::size_t>(k)], s.h, s.w, height, width);
            for (std::size_t i = 0; i < up.size(); ++i) hm.values[i] += up[i] / n;
        }
    } else {
        throw ParameterError("unknown heatmap mode");
    }
    const auto [lo, hi] = std::minmax_element(hm.values.begin(), hm.values.end());
    hm.min = *lo;
    hm.max = *hi;
    return hm;
}

void write_heatmap_png(const std::filesystem::path& path, const Heatmap& heatmap, const Image* underlay, int zoom) {
    if (zoom < 1) throw ParameterError("zoom must be >= 1");
    if (underlay && (underlay->height != heatmap.height || underlay->width != heatmap.width))
        throw ShapeError("overlay image size differs from the heatmap");
    const double scale = std::max({std::abs(heatmap.min), std::abs(heatmap.max), 1e-12});
    const int w = heatmap.width * zoom, h = heatmap.height * zoom;
    std::vector<std::uint8_t> rgb(static_cast<std::size_t>(w) * h * 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int sy = y / zoom, sx = x / zoom;
            const double t = std::clamp(heatmap.at(sy, sx) / scale, -1.0, 1.0);
            double r = 1.0, g = 1.0 - std::abs(t), b = 1.0;
            if (t > 0) b = 1.0 - t;
            else r = 1.0 + t;
            if (underlay) {
                double gray = 0.0;
                for (int c = 0; c < underlay->channels; ++c) gray += underlay->at(c, sy, sx);
                gray /= underlay->channels;
                r = 0.55 * r + 0.45 * gray;
                g = 0.55 * g + 0.45 * gray;
                b = 0.55 * b + 0.45 * gray;
            }
            auto* px = rgb.data() + (static_cast<std::size_t>(y) * w + x) * 3;
            px[0] = static_cast<std::uint8_t>(std::lround(r * 255));
            px[1] = static_cast<std::uint8_t>(std::lround(g * 255));
            px[2] = static_cast<std::uint8_t>(std::lround(b * 255));
        }
    write_png_rgb8(path, w, h, rgb);
}

nlohmann::json heatmap_sidecar(const PMIMap& pmi, const Heatmap& heatmap, HeatmapMode mode) {
    auto j = pmi.to_json();
    j["mode"] = heatmap_mode_name(mode);
    j["height"] = heatmap.height;
    j["width"] = heatmap.width;
    j["min"] = heatmap.min;
    j["max"] = heatmap.max;
    return j;
}

}  // namespace avarc
