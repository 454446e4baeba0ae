#include "avarc/likelihood.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "avarc/error.hpp"
#include "avarc/seed.hpp"

namespace avarc {

namespace {

int resolve_scales(const NextScaleModel& model, int upto_scale) {
    const int k = model.schedule().num_scales();
    if (upto_scale == 0) return k;
    if (upto_scale < 1 || upto_scale > k)
        throw ParameterError("scale count " + std::to_string(upto_scale) + " outside [1, " + std::to_string(k) + "]");
    return upto_scale;
}

void check_partial(const NextScaleModel& model, int k_prime) {
    const int k = model.schedule().num_scales();
    if (k_prime < 1 || k_prime > k)
        throw ParameterError("K' = " + std::to_string(k_prime) + " outside [1, " + std::to_string(k) + "]");
}

void check_label(const NextScaleModel& model, int y) {
    if (y == model.null_label()) {
        if (!model.has_unconditional())
            throw CapabilityError("model was trained without label dropout; the null label is untrained");
        return;
    }
    if (y < 0 || y >= model.n_classes())
        throw LabelError("label " + std::to_string(y) + " outside [0, " + std::to_string(model.n_classes()) + ")");
}

double row_total(const double* row, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += row[i];
    return s;
}

ScaleGrids split_by_scale(const ScaleSchedule& sched, const double* row, int num_scales) {
    ScaleGrids g;
    g.schedule = sched;
    for (int k = 0; k < num_scales; ++k) {
        const double* p = row + sched.offset(k);
        g.grids.emplace_back(p, p + sched.tokens_in_scale(k));
    }
    return g;
}

// Totals for (maps[i], labels[i]) evaluated in chunks of max_batch.
std::vector<double> batched_totals(const std::vector<const MultiScaleTokenMap*>& maps, const std::vector<int>& labels,
                                   const NextScaleModel& model, int upto, int max_batch) {
    if (max_batch < 1) throw ParameterError("max_batch must be >= 1");
    std::vector<double> out;
    out.reserve(maps.size());
    nn::NoGradGuard no_grad;
    const int seq = model.schedule().prefix_tokens(upto);
    for (std::size_t start = 0; start < maps.size(); start += static_cast<std::size_t>(max_batch)) {
        const std::size_t n = std::min(maps.size() - start, static_cast<std::size_t>(max_batch));
        const auto logp = model.forward(std::span(maps).subspan(start, n), std::span(labels).subspan(start, n), upto);
        for (std::size_t b = 0; b < n; ++b) out.push_back(row_total(logp.data().data() + b * seq, seq));
    }
    return out;
}

}  // namespace

void SmoothingConfig::validate() const {
    if (samples < 1) throw ParameterError("smoothing needs at least one sample");
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ParameterError("sigma must be a finite value >= 0");
}

nlohmann::json SmoothingConfig::to_json() const { return {{"samples", samples}, {"sigma", sigma}, {"seed", seed}}; }

SmoothingConfig SmoothingConfig::from_json(const nlohmann::json& j) {
    SmoothingConfig c;
    c.samples = j.value("samples", c.samples);
    c.sigma = j.value("sigma", c.sigma);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

double log_sum_exp(std::span<const double> values) {
    double m = -std::numeric_limits<double>::infinity();
    for (double v : values) m = std::max(m, v);
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double v : values) s += std::exp(v - m);
    return m + std::log(s);
}

ScaleGrids token_log_probs(const MultiScaleTokenMap& tokens, int y, const NextScaleModel& model, int upto_scale) {
    const int upto = resolve_scales(model, upto_scale);
    check_label(model, y);
    nn::NoGradGuard no_grad;
    const MultiScaleTokenMap* maps[] = {&tokens};
    const int labels[] = {y};
    const auto logp = model.forward(maps, labels, upto);
    return split_by_scale(model.schedule(), logp.data().data(), upto);
}

ScaleGrids unconditional_log_probs(const MultiScaleTokenMap& tokens, const NextScaleModel& model, int upto_scale) {
    return token_log_probs(tokens, model.null_label(), model, upto_scale);
}

LogLikelihoodResult log_likelihood_partial(const MultiScaleTokenMap& tokens, int y, const NextScaleModel& model,
                                           int k_prime) {
    check_partial(model, k_prime);
    LogLikelihoodResult r;
    r.per_token = token_log_probs(tokens, y, model, k_prime);
    r.total = r.per_token.sum();
    return r;
}

LogLikelihoodResult log_likelihood_full(const MultiScaleTokenMap& tokens, int y, const NextScaleModel& model) {
    return log_likelihood_partial(tokens, y, model, model.schedule().num_scales());
}

std::vector<MultiScaleTokenMap> smoothing_samples(const FeatureMap& f, const Tokenizer& tokenizer,
                                                  const SmoothingConfig& cfg) {
    cfg.validate();
    std::vector<MultiScaleTokenMap> out;
    out.reserve(static_cast<std::size_t>(cfg.samples));
    for (int i = 0; i < cfg.samples; ++i)
        out.push_back(tokenizer.quantize(perturb_features(f, cfg.sigma, mix_seed(cfg.seed, static_cast<std::uint64_t>(i)))));
    return out;
}

LogLikelihoodResult log_likelihood_smoothed(const FeatureMap& f, int y, const NextScaleModel& model,
                                            const Tokenizer& tokenizer, const SmoothingConfig& cfg) {
    check_label(model, y);
    const auto samples = smoothing_samples(f, tokenizer, cfg);
    std::vector<double> totals;
    for (const auto& s : samples) totals.push_back(log_likelihood_full(s, y, model).total);
    LogLikelihoodResult r;
    r.total = log_sum_exp(totals);
    r.per_token.schedule = model.schedule();
    return r;
}

std::vector<double> partial_scores(const MultiScaleTokenMap& tokens, std::span<const int> labels,
                                   const NextScaleModel& model, int k_prime, int max_batch) {
    check_partial(model, k_prime);
    const int upto = k_prime;
    for (int y : labels) check_label(model, y);
    std::vector<const MultiScaleTokenMap*> maps(labels.size(), &tokens);
    return batched_totals(maps, std::vector<int>(labels.begin(), labels.end()), model, upto, max_batch);
}

std::vector<double> smoothed_scores(std::span<const MultiScaleTokenMap> samples, std::span<const int> labels,
                                    const NextScaleModel& model, int max_batch) {
    if (samples.empty()) throw ParameterError("smoothing needs at least one sample");
    for (int y : labels) check_label(model, y);
    std::vector<const MultiScaleTokenMap*> maps;
    std::vector<int> flat_labels;
    for (int y : labels)
        for (const auto& s : samples) {
            maps.push_back(&s);
            flat_labels.push_back(y);
        }
    const auto totals = batched_totals(maps, flat_labels, model, model.schedule().num_scales(), max_batch);
    std::vector<double> out;
    for (std::size_t i = 0; i < labels.size(); ++i)
        out.push_back(log_sum_exp(std::span(totals).subspan(i * samples.size(), samples.size())));
    return out;
}

}  // namespace avarc
