#pragma once

// Helpers shared by the unit tests and the acceptance suite: tiny models, random
// token maps, and a reference next-scale forward pass written with plain loops.

#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "avarc/nextscale.hpp"
#include "avarc/schedule.hpp"
#include "avarc/types.hpp"

namespace avarc::testing {

inline std::vector<double> random_codebook(int vocab, int channels, std::uint64_t seed, double scale = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d(0.0, scale);
    std::vector<double> cb(static_cast<std::size_t>(vocab) * channels);
    for (double& v : cb) v = d(rng);
    return cb;
}

inline NextScaleConfig tiny_config(int n_classes = 2, int vocab = 3, ScaleSchedule schedule = ScaleSchedule::square({1, 2}),
                                   std::uint64_t seed = 7) {
    NextScaleConfig c;
    c.n_classes = n_classes;
    c.vocab = vocab;
    c.feat_channels = 4;
    c.schedule = std::move(schedule);
    c.width = 8;
    c.depth = 2;
    c.heads = 2;
    c.mlp_ratio = 2;
    c.init_std = 0.5;
    c.zero_head = false;
    c.seed = seed;
    return c;
}

inline NextScaleModel tiny_model(int n_classes = 2, int vocab = 3, ScaleSchedule schedule = ScaleSchedule::square({1, 2}),
                                 std::uint64_t seed = 7) {
    const auto cfg = tiny_config(n_classes, vocab, std::move(schedule), seed);
    return NextScaleModel(cfg, random_codebook(cfg.vocab, cfg.feat_channels, seed + 1));
}

inline MultiScaleTokenMap random_map(const ScaleSchedule& s, int vocab, std::mt19937_64& rng) {
    MultiScaleTokenMap m(s);
    std::uniform_int_distribution<int> d(0, vocab - 1);
    for (auto& g : m.maps)
        for (int& t : g) t = d(rng);
    return m;
}

/// Token map number `index` in base-`vocab` enumeration order.
inline MultiScaleTokenMap map_from_index(const ScaleSchedule& s, int vocab, long index) {
    MultiScaleTokenMap m(s);
    for (auto& g : m.maps)
        for (int& t : g) {
            t = static_cast<int>(index % vocab);
            index /= vocab;
        }
    return m;
}

/// Reference forward with plain loops over parameters fetched by name.
class ReferenceModel {
public:
    explicit ReferenceModel(NextScaleModel model) : model_(std::move(model)), cfg_(model_.config()) {
        for (auto& [name, t] : model_.state()) p_[name] = std::vector<double>(t->data().begin(), t->data().end());
    }

    /// log p(x | y) as the product over scales of p(r_k | r_<k, y), each factor
    /// from a separate pass over the truncated sequence r_1..r_k.
    double log_likelihood(const MultiScaleTokenMap& map, int y) const {
        double total = 0.0;
        for (int k = 1; k <= cfg_.schedule.num_scales(); ++k) {
            const auto lp = scale_log_probs(map, y, k);
            for (double v : lp) total += v;
        }
        return total;
    }

    /// Full predictive distributions (log) over the vocab for every position of
    /// scale k (1-based), computed from a sequence truncated after scale k.
    std::vector<std::vector<double>> scale_distributions(const MultiScaleTokenMap& map, int y, int k) const {
        const auto& s = cfg_.schedule;
        const int seq = s.prefix_tokens(k), d = cfg_.width, c = cfg_.feat_channels;
        const auto inputs = teacher_inputs(map, k);
        std::vector<std::vector<double>> h(static_cast<std::size_t>(seq), std::vector<double>(d));
        for (int p = 0; p < seq; ++p) {
            const int sc = s.scale_of(p);
            std::vector<double> x(static_cast<std::size_t>(c), 0.0);
            if (sc > 0) x = inputs[static_cast<std::size_t>(p - s.tokens_in_scale(0))];
            const auto w = linear(x, "word_embed");
            for (int j = 0; j < d; ++j)
                h[p][j] = w[j] + at("pos_embed", p * d + j) + at("scale_embed", sc * d + j) + at("class_embed", y * d + j);
        }
        for (int b = 0; b < cfg_.depth; ++b) {
            const std::string pre = "block" + std::to_string(b) + ".";
            std::vector<std::vector<double>> qkv;
            for (const auto& row : h) qkv.push_back(linear(layer_norm(row, pre + "ln1"), pre + "qkv"));
            const int hd = d / cfg_.heads;
            for (int p = 0; p < seq; ++p) {
                const int visible = s.offset(s.scale_of(p)) + s.tokens_in_scale(s.scale_of(p));
                std::vector<double> att(static_cast<std::size_t>(d), 0.0);
                for (int hh = 0; hh < cfg_.heads; ++hh) {
                    std::vector<double> w(static_cast<std::size_t>(visible));
                    double mx = -1e300;
                    for (int q = 0; q < visible; ++q) {
                        double dot = 0.0;
                        for (int j = 0; j < hd; ++j) dot += qkv[p][hh * hd + j] * qkv[q][d + hh * hd + j];
                        w[q] = dot / std::sqrt(static_cast<double>(hd));
                        mx = std::max(mx, w[q]);
                    }
                    double z = 0.0;
                    for (double& v : w) z += (v = std::exp(v - mx));
                    for (int q = 0; q < visible; ++q)
                        for (int j = 0; j < hd; ++j) att[hh * hd + j] += w[q] / z * qkv[q][2 * d + hh * hd + j];
                }
                const auto o = linear(att, pre + "proj");
                for (int j = 0; j < d; ++j) h[p][j] += o[j];
            }
            for (auto& row : h) {
                auto m = linear(layer_norm(row, pre + "ln2"), pre + "fc1");
                for (double& v : m) v = 0.5 * v * (1.0 + std::tanh(0.7978845608028654 * (v + 0.044715 * v * v * v)));
                const auto o = linear(m, pre + "fc2");
                for (int j = 0; j < d; ++j) row[j] += o[j];
            }
        }
        std::vector<std::vector<double>> out;
        for (int p = s.offset(k - 1); p < seq; ++p) {
            auto logits = linear(layer_norm(h[p], "ln_out"), "head");
            double mx = -1e300;
            for (double v : logits) mx = std::max(mx, v);
            double z = 0.0;
            for (double v : logits) z += std::exp(v - mx);
            for (double& v : logits) v = v - mx - std::log(z);
            out.push_back(std::move(logits));
        }
        return out;
    }

    std::vector<double> scale_log_probs(const MultiScaleTokenMap& map, int y, int k) const {
        const auto dist = scale_distributions(map, y, k);
        const auto& grid = map.maps[static_cast<std::size_t>(k - 1)];
        std::vector<double> out;
        for (std::size_t i = 0; i < grid.size(); ++i) out.push_back(dist[i][static_cast<std::size_t>(grid[i])]);
        return out;
    }

private:
    NextScaleModel model_;
    NextScaleConfig cfg_;
    std::map<std::string, std::vector<double>> p_;

    double at(const std::string& name, int i) const { return p_.at(name)[static_cast<std::size_t>(i)]; }

    std::vector<double> linear(const std::vector<double>& x, const std::string& name) const {
        const auto& w = p_.at(name + ".weight");
        const auto& b = p_.at(name + ".bias");
        const std::size_t out = b.size();
        std::vector<double> y(b);
        for (std::size_t i = 0; i < x.size(); ++i)
            for (std::size_t j = 0; j < out; ++j) y[j] += x[i] * w[i * out + j];
        return y;
    }

    std::vector<double> layer_norm(const std::vector<double>& x, const std::string& name) const {
        const auto& g = p_.at(name + ".gamma");
        const auto& b = p_.at(name + ".beta");
        double mu = 0.0, var = 0.0;
        for (double v : x) mu += v;
        mu /= static_cast<double>(x.size());
        for (double v : x) var += (v - mu) * (v - mu);
        var /= static_cast<double>(x.size());
        std::vector<double> y(x.size());
        for (std::size_t j = 0; j < x.size(); ++j) y[j] = (x[j] - mu) / std::sqrt(var + 1e-5) * g[j] + b[j];
        return y;
    }

    // Rows for positions of scales 2..k: the cumulative codebook reconstruction
    // of earlier scales on the latent grid, resampled to each scale.
    std::vector<std::vector<double>> teacher_inputs(const MultiScaleTokenMap& map, int k) const {
        const auto& s = cfg_.schedule;
        const int c = cfg_.feat_channels, lh = s.latent_h(), lw = s.latent_w();
        const auto& cb = p_.at("codebook");
        std::vector<double> acc(static_cast<std::size_t>(lh) * lw * c, 0.0);
        std::vector<std::vector<double>> rows;
        for (int sc = 1; sc < k; ++sc) {
            const auto prev = s.side(sc - 1);
            const auto up = bilinear_resize_operator(prev.h, prev.w, lh, lw);
            const auto& grid = map.maps[static_cast<std::size_t>(sc - 1)];
            for (int r = 0; r < up.rows; ++r)
                for (int q = 0; q < up.cols; ++q) {
                    const double a = up.values[static_cast<std::size_t>(r) * up.cols + q];
                    if (a == 0.0) continue;
                    for (int j = 0; j < c; ++j)
                        acc[static_cast<std::size_t>(r) * c + j] += a * cb[static_cast<std::size_t>(grid[q]) * c + j];
                }
            const auto cur = s.side(sc);
            const auto down = bilinear_resize_operator(lh, lw, cur.h, cur.w);
            for (int r = 0; r < down.rows; ++r) {
                std::vector<double> row(static_cast<std::size_t>(c), 0.0);
                for (int q = 0; q < down.cols; ++q)
                    for (int j = 0; j < c; ++j)
                        row[j] += down.values[static_cast<std::size_t>(r) * down.cols + q] * acc[static_cast<std::size_t>(q) * c + j];
                rows.push_back(std::move(row));
            }
        }
        return rows;
    }
};

inline bool close_rel(double a, double b, double rel) {
    return std::abs(a - b) <= rel * std::max({std::abs(a), std::abs(b), 1e-300});
}

}  // namespace avarc::testing
