#include "avarc/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "avarc/error.hpp"
#include "avarc/png_io.hpp"
#include "avarc/seed.hpp"

namespace avarc {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t) { return std::chrono::duration<double, std::milli>(Clock::now() - t).count(); }

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

}  // namespace

nlohmann::json BenchmarkRecord::to_json() const {
    return {{"experiment", experiment}, {"config_hash", config_hash}, {"metric", metric}, {"value", value},
            {"wall_ms", wall_ms},       {"seed", seed},               {"timestamp", timestamp}};
}

std::string BenchmarkRecord::csv_header() { return "experiment,config_hash,metric,value,wall_ms,seed,timestamp"; }

std::string BenchmarkRecord::csv_row() const {
    std::ostringstream os;
    os << std::setprecision(10) << csv_escape(experiment) << ',' << config_hash << ',' << csv_escape(metric) << ','
       << value << ',' << wall_ms << ',' << seed << ',' << timestamp;
    return os.str();
}

std::string config_hash(const nlohmann::json& config) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : config.dump()) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

void write_records_csv(const std::filesystem::path& path, std::span<const BenchmarkRecord> records) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << BenchmarkRecord::csv_header() << '\n';
    for (const auto& r : records) out << r.csv_row() << '\n';
}

void append_jsonl(const std::filesystem::path& path, const nlohmann::json& record) {
    std::ofstream out(path, std::ios::app);
    if (!out) throw DataError("cannot write " + path.string());
    out << record.dump() << '\n';
}

double topk_accuracy(const std::vector<std::vector<double>>& scores, std::span<const int> labels, int k) {
    if (k < 1) throw ParameterError("k must be >= 1");
    if (scores.size() != labels.size()) throw ShapeError("one score row per label is required");
    if (scores.empty()) throw DataError("no examples to score");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const auto& row = scores[i];
        const int y = labels[i];
        if (y < 0 || y >= static_cast<int>(row.size())) throw LabelError("label outside the score row");
        const int kk = std::min<int>(k, static_cast<int>(row.size()));
        int rank = 0;
        for (int c = 0; c < static_cast<int>(row.size()); ++c)
            if (row[static_cast<std::size_t>(c)] > row[static_cast<std::size_t>(y)] ||
                (row[static_cast<std::size_t>(c)] == row[static_cast<std::size_t>(y)] && c < y))
                ++rank;
        if (rank < kk) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(scores.size());
}

double accuracy(std::span<const int> predictions, std::span<const int> labels) {
    if (predictions.size() != labels.size()) throw ShapeError("one prediction per label is required");
    if (labels.empty()) throw DataError("no examples to score");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i];
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

EvalSet prepare_eval_set(const Dataset& data, const Tokenizer& tokenizer) {
    EvalSet out;
    const std::size_t chunk = 256;
    for (std::size_t s = 0; s < data.size(); s += chunk) {
        const auto feats = tokenizer.encode_batch(std::span(data.images).subspan(s, std::min(chunk, data.size() - s)));
        for (const auto& f : feats) out.inputs.push_back(prepare_input(f, tokenizer));
    }
    out.labels = data.labels;
    return out;
}

std::vector<SweepPoint> scale_sweep(const EvalSet& data, const NextScaleModel& model, std::span<const int> k_values,
                                    int k) {
    const int n = model.n_classes();
    if (k == 0) k = std::min(10, n);
    const auto labels = all_labels(n);
    std::vector<SweepPoint> out;
    for (int kp : k_values) {
        Method::partial(kp).validate(model.schedule().num_scales());
        std::vector<std::vector<double>> scores;
        const auto start = Clock::now();
        for (const auto& in : data.inputs) scores.push_back(partial_scores(in.tokens, labels, model, kp));
        const double ms = ms_since(start);
        out.push_back({kp, model.schedule().prefix_tokens(kp), k, topk_accuracy(scores, data.labels, k),
                       ms / static_cast<double>(std::max<std::size_t>(1, data.size()))});
    }
    return out;
}

std::vector<AblationCell> ablation_grid(const EvalSet& data, const NextScaleModel& base, const NextScaleModel& cca,
                                        const Tokenizer& tokenizer, const SmoothingConfig& smoothing) {
    smoothing.validate();
    std::vector<AblationCell> out;
    for (const bool use_cca : {false, true}) {
        const auto& model = use_cca ? cca : base;
        const auto labels = all_labels(model.n_classes());
        for (const bool smooth : {false, true}) {
            const Method method = smooth ? Method::smoothed(smoothing.samples, smoothing.sigma, smoothing.seed) : Method::full();
            std::vector<int> preds;
            const auto start = Clock::now();
            for (const auto& in : data.inputs)
                preds.push_back(classify_exhaustive(in, labels, model, tokenizer, method).prediction);
            const double ms = ms_since(start);
            out.push_back({smooth, use_cca, accuracy(preds, data.labels),
                           ms / static_cast<double>(std::max<std::size_t>(1, data.size()))});
        }
    }
    return out;
}

std::vector<NoiseRow> noise_experiment(std::span<const Image> images, std::span<const int> labels,
                                       std::span<const double> sigmas, const Tokenizer& tokenizer,
                                       const NextScaleModel* model, int n_trials, std::uint64_t seed) {
    if (sigmas.empty()) throw ParameterError("noise experiment needs at least one sigma");
    if (images.empty()) throw DataError("noise experiment needs at least one image");
    if (model && labels.size() != images.size()) throw ShapeError("one label per image is required");
    if (n_trials < 1) throw ParameterError("n_trials must be >= 1");
    const auto feats = tokenizer.encode_batch(images);
    std::vector<MultiScaleTokenMap> clean;
    std::vector<Image> clean_decoded;
    std::vector<double> clean_ll;
    for (std::size_t i = 0; i < feats.size(); ++i) {
        clean.push_back(tokenizer.quantize(feats[i]));
        clean_decoded.push_back(tokenizer.decode(clean.back()));
        if (model) clean_ll.push_back(log_likelihood_full(clean.back(), labels[i], *model).total);
    }
    std::vector<NoiseRow> out;
    for (double sigma : sigmas) {
        NoiseRow row;
        row.sigma = sigma;
        const double denom = static_cast<double>(feats.size()) * n_trials;
        for (std::size_t i = 0; i < feats.size(); ++i) {
            const auto clean_flat = clean[i].flatten();
            for (int t = 0; t < n_trials; ++t) {
                const auto noisy = tokenizer.quantize(
                    perturb_features(feats[i], sigma, mix_seed(seed, i * 1000003ull + static_cast<std::uint64_t>(t))));
                const auto flat = noisy.flatten();
                std::size_t changed = 0;
                for (std::size_t p = 0; p < flat.size(); ++p) changed += flat[p] != clean_flat[p];
                row.token_change += static_cast<double>(changed) / static_cast<double>(flat.size()) / denom;
                row.recon_mse += mean_squared_error(tokenizer.decode(noisy), clean_decoded[i]) / denom;
                if (model) row.loglik_gap += (clean_ll[i] - log_likelihood_full(noisy, labels[i], *model).total) / denom;
            }
        }
        out.push_back(row);
    }
    return out;
}

void write_line_chart(const std::filesystem::path& path, std::span<const double> x, std::span<const ChartSeries> series,
                      int width, int height) {
    if (x.empty()) throw ParameterError("chart needs at least one point");
    for (const auto& s : series)
        if (s.y.size() != x.size()) throw ShapeError("series length differs from x");
    std::vector<std::uint8_t> rgb(static_cast<std::size_t>(width) * height * 3, 255);
    auto plot = [&](int px, int py, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
        if (px < 0 || py < 0 || px >= width || py >= height) return;
        auto* p = rgb.data() + (static_cast<std::size_t>(py) * width + px) * 3;
        p[0] = r;
        p[1] = g;
        p[2] = b;
    };
    const int margin = 30;
    double x0 = *std::min_element(x.begin(), x.end()), x1 = *std::max_element(x.begin(), x.end());
    double y0 = 1e300, y1 = -1e300;
    for (const auto& s : series)
        for (double v : s.y) {
            y0 = std::min(y0, v);
            y1 = std::max(y1, v);
        }
    if (series.empty()) y0 = 0, y1 = 1;
    if (x1 == x0) x1 = x0 + 1;
    if (y1 == y0) y1 = y0 + 1;
    auto to_px = [&](double xv, double yv) {
        const double fx = (xv - x0) / (x1 - x0), fy = (yv - y0) / (y1 - y0);
        return std::pair<int, int>{margin + static_cast<int>(std::lround(fx * (width - 2 * margin))),
                                   height - margin - static_cast<int>(std::lround(fy * (height - 2 * margin)))};
    };
    for (int px = margin; px < width - margin; ++px) plot(px, height - margin, 0, 0, 0);
    for (int py = margin; py <= height - margin; ++py) plot(margin, py, 0, 0, 0);
    for (double xv : x) {
        const int px = to_px(xv, y0).first;
        for (int d = 0; d < 5; ++d) plot(px, height - margin + d, 0, 0, 0);
    }
    for (const auto& s : series) {
        for (std::size_t i = 0; i + 1 < x.size(); ++i) {
            const auto [ax, ay] = to_px(x[i], s.y[i]);
            const auto [bx, by] = to_px(x[i + 1], s.y[i + 1]);
            const int steps = std::max({std::abs(bx - ax), std::abs(by - ay), 1});
            for (int t = 0; t <= steps; ++t)
                plot(ax + (bx - ax) * t / steps, ay + (by - ay) * t / steps, s.r, s.g, s.b);
        }
        for (std::size_t i = 0; i < x.size(); ++i) {
            const auto [cx, cy] = to_px(x[i], s.y[i]);
            for (int dy = -2; dy <= 2; ++dy)
                for (int dx = -2; dx <= 2; ++dx) plot(cx + dx, cy + dy, s.r, s.g, s.b);
        }
    }
    write_png_rgb8(path, width, height, rgb);
}

double median_ms(const std::function<void()>& fn, int repeats) {
    if (repeats < 1) throw ParameterError("repeats must be >= 1");
    std::vector<double> t;
    for (int r = 0; r < repeats; ++r) {
        const auto start = Clock::now();
        fn();
        t.push_back(ms_since(start));
    }
    std::sort(t.begin(), t.end());
    return t.size() % 2 ? t[t.size() / 2] : 0.5 * (t[t.size() / 2 - 1] + t[t.size() / 2]);
}

}  // namespace avarc
