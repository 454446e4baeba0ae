#include "avarc/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>

#include "avarc/error.hpp"
#include "avarc/nn/ops.hpp"
#include "avarc/seed.hpp"

namespace avarc {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point since) {
    return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

double scheduled_lr(const TrainConfig& cfg, int step, int total_steps) {
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
        return cfg.learning_rate * static_cast<double>(step + 1) / cfg.warmup_steps;
    const int span = std::max(1, total_steps - cfg.warmup_steps);
    const double progress = std::clamp(static_cast<double>(step - cfg.warmup_steps) / span, 0.0, 1.0);
    const double floor = cfg.learning_rate * cfg.min_lr_ratio;
    return floor + (cfg.learning_rate - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// Splits [n] into shuffled batches.
std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int batch_size, nn::Rng& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t s = 0; s < n; s += static_cast<std::size_t>(batch_size))
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + static_cast<std::size_t>(batch_size))));
    return out;
}

void check_labels(std::span<const LabeledTokens> data, const NextScaleModel& model) {
    for (const auto& ex : data)
        if (ex.label < 0 || ex.label >= model.n_classes())
            throw LabelError("training label " + std::to_string(ex.label) + " outside [0, " +
                             std::to_string(model.n_classes()) + ")");
}

// Sequence totals log p(maps[b] | labels[b]) as a [B] tensor.
nn::Tensor sequence_totals(const NextScaleModel& model, std::span<const MultiScaleTokenMap* const> maps,
                           std::span<const int> labels) {
    return nn::row_sums(model.forward(maps, labels, model.schedule().num_scales()));
}

}  // namespace

std::vector<LabeledTokens> tokenize_dataset(std::span<const Image> images, std::span<const int> labels,
                                            const Tokenizer& tokenizer) {
    if (images.size() != labels.size()) throw ShapeError("one label per image is required");
    std::vector<LabeledTokens> out;
    out.reserve(images.size());
    const std::size_t chunk = 256;
    for (std::size_t s = 0; s < images.size(); s += chunk) {
        const auto feats = tokenizer.encode_batch(images.subspan(s, std::min(chunk, images.size() - s)));
        for (std::size_t i = 0; i < feats.size(); ++i) out.push_back({tokenizer.quantize(feats[i]), labels[s + i]});
    }
    return out;
}

void TrainConfig::validate() const {
    if (epochs < 0 || batch_size < 1) throw ConfigError("epochs must be >= 0 and batch_size >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (warmup_steps < 0 || min_lr_ratio < 0.0 || min_lr_ratio > 1.0) throw ConfigError("invalid learning-rate schedule");
    if (!(label_dropout >= 0.0 && label_dropout <= 1.0)) throw ConfigError("label_dropout must lie in [0, 1]");
    if (grad_clip < 0.0) throw ConfigError("grad_clip must be >= 0");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"epochs", epochs},
            {"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"warmup_steps", warmup_steps},
            {"min_lr_ratio", min_lr_ratio},
            {"label_dropout", label_dropout},
            {"grad_clip", grad_clip},
            {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.min_lr_ratio = j.value("min_lr_ratio", c.min_lr_ratio);
    c.label_dropout = j.value("label_dropout", c.label_dropout);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.seed = j.value("seed", c.seed);
    return c;
}

void CCAConfig::validate() const {
    if (!(beta > 0.0)) throw ConfigError("beta must be > 0");
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
    if (epochs < 0 || batch_size < 1) throw ConfigError("epochs must be >= 0 and batch_size >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
}

nlohmann::json CCAConfig::to_json() const {
    return {{"beta", beta},         {"lambda", lambda},
            {"epochs", epochs},     {"batch_size", batch_size},
            {"learning_rate", learning_rate}, {"seed", seed}};
}

CCAConfig CCAConfig::from_json(const nlohmann::json& j) {
    CCAConfig c;
    c.beta = j.value("beta", c.beta);
    c.lambda = j.value("lambda", c.lambda);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.seed = j.value("seed", c.seed);
    return c;
}

nlohmann::json TrainStepRecord::to_json() const {
    return {{"step", step}, {"epoch", epoch}, {"loss", loss}, {"lr", lr}, {"wall_ms", wall_ms}};
}

NextScaleModel train_mle(std::span<const LabeledTokens> data, NextScaleModel model, const TrainConfig& cfg,
                         const TrainHooks& hooks) {
    cfg.validate();
    if (data.empty()) throw DataError("training set is empty");
    check_labels(data, model);
    model = model.clone();

    nn::Rng rng(mix_seed(cfg.seed, 1));
    std::bernoulli_distribution drop(cfg.label_dropout);
    nn::Adam opt(model.params(), cfg.learning_rate);
    const int steps_per_epoch = static_cast<int>((data.size() + static_cast<std::size_t>(cfg.batch_size) - 1) /
                                                 static_cast<std::size_t>(cfg.batch_size));
    const int total_steps = steps_per_epoch * cfg.epochs;
    const auto start = Clock::now();
    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (const auto& batch : make_batches(data.size(), cfg.batch_size, rng)) {
            std::vector<const MultiScaleTokenMap*> maps;
            std::vector<int> seen, labels;
            for (std::size_t i : batch) {
                maps.push_back(&data[i].tokens);
                seen.push_back(data[i].label);
                labels.push_back(drop(rng) ? model.null_label() : data[i].label);
            }
            if (hooks.on_batch) hooks.on_batch(seen);

            const double lr = scheduled_lr(cfg, step, total_steps);
            opt.set_learning_rate(lr);
            opt.zero_grad();
            const auto logp = model.forward(maps, labels, model.schedule().num_scales());
            const auto loss = nn::scale(nn::mean(logp), -1.0);
            loss.backward();
            if (cfg.grad_clip > 0.0) opt.clip_grad_norm(cfg.grad_clip);
            opt.step();
            if (hooks.on_step) hooks.on_step({step, epoch, loss.item(), lr, elapsed_ms(start)});
            ++step;
        }
    }
    if (cfg.label_dropout > 0.0 && cfg.epochs > 0) model.set_has_unconditional(true);
    return model;
}

int sample_negative_label(int y, int n_classes, nn::Rng& rng) {
    if (n_classes < 2) throw CapabilityError("negative sampling needs at least two classes");
    if (y < 0 || y >= n_classes) throw LabelError("label " + std::to_string(y) + " outside [0, n_classes)");
    std::uniform_int_distribution<int> pick(0, n_classes - 2);
    const int u = pick(rng);
    return u >= y ? u + 1 : u;
}

nn::Tensor cca_objective(std::span<const MultiScaleTokenMap* const> maps, std::span<const int> labels,
                         std::span<const int> negatives, const NextScaleModel& theta, const NextScaleModel& phi,
                         const CCAConfig& cfg) {
    cfg.validate();
    if (!theta.same_architecture(phi) || theta.n_classes() != phi.n_classes())
        throw ParameterError("theta and the frozen reference must share one architecture");
    if (maps.size() != labels.size() || maps.size() != negatives.size())
        throw ShapeError("maps, labels and negatives must have equal length");
    const int b = static_cast<int>(maps.size());

    // Positives and negatives in one batch: rows [0, b) and [b, 2b).
    std::vector<const MultiScaleTokenMap*> all_maps(maps.begin(), maps.end());
    all_maps.insert(all_maps.end(), maps.begin(), maps.end());
    std::vector<int> all_labels(labels.begin(), labels.end());
    all_labels.insert(all_labels.end(), negatives.begin(), negatives.end());

    nn::Tensor ref;
    {
        nn::NoGradGuard no_grad;
        ref = sequence_totals(phi, all_maps, all_labels);
    }
    const auto delta = nn::reshape(nn::sub(sequence_totals(theta, all_maps, all_labels), ref), {2 * b, 1});
    std::vector<int> pos_rows(static_cast<std::size_t>(b)), neg_rows(static_cast<std::size_t>(b));
    std::iota(pos_rows.begin(), pos_rows.end(), 0);
    std::iota(neg_rows.begin(), neg_rows.end(), b);
    const auto pos = nn::log_sigmoid(nn::scale(nn::gather_rows(delta, pos_rows), cfg.beta));
    const auto neg = nn::log_sigmoid(nn::scale(nn::gather_rows(delta, neg_rows), -cfg.beta));
    return nn::scale(nn::add(nn::mean(pos), nn::scale(nn::mean(neg), cfg.lambda)), -1.0);
}

double cca_loss(const MultiScaleTokenMap& tokens, int y, int y_neg, const NextScaleModel& theta,
                const NextScaleModel& phi, const CCAConfig& cfg) {
    nn::NoGradGuard no_grad;
    const MultiScaleTokenMap* maps[] = {&tokens};
    const int labels[] = {y};
    const int negatives[] = {y_neg};
    return cca_objective(maps, labels, negatives, theta, phi, cfg).item();
}

NextScaleModel finetune_cca(std::span<const LabeledTokens> data, const NextScaleModel& model, const CCAConfig& cfg,
                            const TrainHooks& hooks) {
    cfg.validate();
    if (data.empty()) throw DataError("training set is empty");
    check_labels(data, model);
    if (cfg.epochs == 0) return model.clone();

    const NextScaleModel phi = model.clone();
    NextScaleModel theta = model.clone();
    nn::Rng rng(mix_seed(cfg.seed, 2));
    nn::Adam opt(theta.params(), cfg.learning_rate);
    const auto start = Clock::now();
    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (const auto& batch : make_batches(data.size(), cfg.batch_size, rng)) {
            std::vector<const MultiScaleTokenMap*> maps;
            std::vector<int> labels, negatives;
            for (std::size_t i : batch) {
                maps.push_back(&data[i].tokens);
                labels.push_back(data[i].label);
                negatives.push_back(sample_negative_label(data[i].label, theta.n_classes(), rng));
            }
            if (hooks.on_batch) hooks.on_batch(labels);
            opt.zero_grad();
            const auto loss = cca_objective(maps, labels, negatives, theta, phi, cfg);
            loss.backward();
            opt.step();
            if (hooks.on_step) hooks.on_step({step, epoch, loss.item(), cfg.learning_rate, elapsed_ms(start)});
            ++step;
        }
    }
    return theta;
}

double mean_token_nll(std::span<const LabeledTokens> data, const NextScaleModel& model, int max_batch) {
    if (data.empty()) throw DataError("dataset is empty");
    nn::NoGradGuard no_grad;
    double total = 0.0;
    for (std::size_t s = 0; s < data.size(); s += static_cast<std::size_t>(max_batch)) {
        std::vector<const MultiScaleTokenMap*> maps;
        std::vector<int> labels;
        for (std::size_t i = s; i < std::min(data.size(), s + static_cast<std::size_t>(max_batch)); ++i) {
            maps.push_back(&data[i].tokens);
            labels.push_back(data[i].label);
        }
        total += nn::sum(model.forward(maps, labels, model.schedule().num_scales())).item();
    }
    return -total / (static_cast<double>(data.size()) * model.schedule().total_tokens());
}

double mean_label_margin(std::span<const LabeledTokens> data, const NextScaleModel& model, std::uint64_t seed,
                         int max_batch) {
    if (data.empty()) throw DataError("dataset is empty");
    nn::NoGradGuard no_grad;
    nn::Rng rng(seed);
    double total = 0.0;
    for (std::size_t s = 0; s < data.size(); s += static_cast<std::size_t>(max_batch)) {
        std::vector<const MultiScaleTokenMap*> maps;
        std::vector<int> labels;
        const std::size_t e = std::min(data.size(), s + static_cast<std::size_t>(max_batch));
        for (std::size_t i = s; i < e; ++i) {
            maps.push_back(&data[i].tokens);
            labels.push_back(data[i].label);
        }
        for (std::size_t i = s; i < e; ++i) {
            maps.push_back(&data[i].tokens);
            labels.push_back(sample_negative_label(data[i].label, model.n_classes(), rng));
        }
        const auto t = sequence_totals(model, maps, labels);
        const std::size_t n = e - s;
        for (std::size_t i = 0; i < n; ++i) total += t.data()[i] - t.data()[i + n];
    }
    return total / static_cast<double>(data.size());
}

}  // namespace avarc
