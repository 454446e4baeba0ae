#include "avarc/schedule.hpp"

#include <algorithm>
#include <cmath>

#include "avarc/error.hpp"

namespace avarc {

ScaleSchedule::ScaleSchedule(std::vector<ScaleSide> sides) : sides_(std::move(sides)) {
    if (sides_.empty()) throw ParameterError("schedule needs at least one scale");
    int offset = 0;
    for (std::size_t k = 0; k < sides_.size(); ++k) {
        const auto& s = sides_[k];
        if (s.h < 1 || s.w < 1) throw ParameterError("schedule sides must be positive");
        if (k > 0 && (s.h < sides_[k - 1].h || s.w < sides_[k - 1].w))
            throw ParameterError("schedule sides must be non-decreasing");
        offsets_.push_back(offset);
        offset += s.h * s.w;
    }
}

ScaleSchedule ScaleSchedule::square(const std::vector<int>& sides) {
    std::vector<ScaleSide> s;
    for (int v : sides) s.push_back({v, v});
    return ScaleSchedule(std::move(s));
}

ScaleSchedule ScaleSchedule::desk() { return square({1, 2, 3, 5, 7}); }

ScaleSchedule ScaleSchedule::reference() { return square({1, 2, 3, 4, 5, 6, 8, 10, 13, 16}); }

int ScaleSchedule::prefix_tokens(int num) const {
    if (num < 0 || num > num_scales()) throw ParameterError("scale count out of range");
    if (num == num_scales()) return offsets_.back() + tokens_in_scale(num_scales() - 1);
    return offsets_[static_cast<std::size_t>(num)];
}

int ScaleSchedule::scale_of(int pos) const {
    if (pos < 0 || pos >= total_tokens()) throw ParameterError("token position out of range");
    auto it = std::upper_bound(offsets_.begin(), offsets_.end(), pos);
    return static_cast<int>(it - offsets_.begin()) - 1;
}

nlohmann::json ScaleSchedule::to_json() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& s : sides_) j.push_back({s.h, s.w});
    return j;
}

ScaleSchedule ScaleSchedule::from_json(const nlohmann::json& j) {
    if (!j.is_array()) throw ConfigError("schedule must be an array of [h, w] pairs or integers");
    std::vector<ScaleSide> sides;
    for (const auto& e : j) {
        if (e.is_number_integer()) {
            sides.push_back({e.get<int>(), e.get<int>()});
        } else if (e.is_array() && e.size() == 2) {
            sides.push_back({e[0].get<int>(), e[1].get<int>()});
        } else {
            throw ConfigError("schedule entries must be integers or [h, w] pairs");
        }
    }
    return ScaleSchedule(std::move(sides));
}

namespace {

// 1-D triangle-filter weights [out, in].
std::vector<double> resize_weights_1d(int in, int out) {
    std::vector<double> w(static_cast<std::size_t>(out) * in, 0.0);
    const double ratio = static_cast<double>(in) / out;
    const double support = std::max(ratio, 1.0);
    for (int i = 0; i < out; ++i) {
        const double center = (i + 0.5) * ratio - 0.5;
        double total = 0.0;
        for (int j = 0; j < in; ++j) {
            const double v = std::max(0.0, 1.0 - std::abs(j - center) / support);
            w[static_cast<std::size_t>(i) * in + j] = v;
            total += v;
        }
        if (total <= 0.0) {
            // Unreachable for valid sizes; fall back to nearest.
            const int j = std::clamp(static_cast<int>(std::lround(center)), 0, in - 1);
            w[static_cast<std::size_t>(i) * in + j] = 1.0;
            total = 1.0;
        }
        for (int j = 0; j < in; ++j) w[static_cast<std::size_t>(i) * in + j] /= total;
    }
    return w;
}

}  // namespace

nn::ConstMatrix bilinear_resize_operator(int in_h, int in_w, int out_h, int out_w) {
    if (in_h < 1 || in_w < 1 || out_h < 1 || out_w < 1) throw ParameterError("resize sizes must be positive");
    const auto wh = resize_weights_1d(in_h, out_h);
    const auto ww = resize_weights_1d(in_w, out_w);
    nn::ConstMatrix m;
    m.rows = out_h * out_w;
    m.cols = in_h * in_w;
    m.values.assign(static_cast<std::size_t>(m.rows) * m.cols, 0.0);
    for (int oy = 0; oy < out_h; ++oy)
        for (int ox = 0; ox < out_w; ++ox)
            for (int iy = 0; iy < in_h; ++iy) {
                const double a = wh[static_cast<std::size_t>(oy) * in_h + iy];
                if (a == 0.0) continue;
                for (int ix = 0; ix < in_w; ++ix) {
                    const double b = ww[static_cast<std::size_t>(ox) * in_w + ix];
                    m.values[static_cast<std::size_t>(oy * out_w + ox) * m.cols + iy * in_w + ix] = a * b;
                }
            }
    return m;
}

ScaleOperators ScaleOperators::build(const ScaleSchedule& schedule) {
    ScaleOperators ops;
    const int h = schedule.latent_h(), w = schedule.latent_w();
    for (const auto& s : schedule.sides()) {
        ops.down.push_back(bilinear_resize_operator(h, w, s.h, s.w));
        ops.up.push_back(bilinear_resize_operator(s.h, s.w, h, w));
    }
    return ops;
}

}  // namespace avarc
