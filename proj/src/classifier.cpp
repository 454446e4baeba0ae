#include "avarc/classifier.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

#include "avarc/error.hpp"

namespace avarc {

namespace {

using Clock = std::chrono::steady_clock;

// Label order: higher score first, then smaller label id.
std::vector<std::size_t> ranking(std::span<const int> labels, std::span<const double> scores) {
    std::vector<std::size_t> idx(labels.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return labels[a] < labels[b];
    });
    return idx;
}

void check_labels(std::span<const int> labels) {
    if (labels.empty()) throw ParameterError("label set is empty");
    std::vector<int> sorted(labels.begin(), labels.end());
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) throw ParameterError("label set has duplicates");
}

std::vector<double> checked_scores(const ScoreFunction& score, const Method& method, std::span<const int> labels) {
    auto s = score(method, labels);
    if (s.size() != labels.size()) throw ShapeError("scorer returned the wrong number of scores");
    for (double v : s)
        if (std::isnan(v)) throw DegenerateInputError("scorer returned NaN");
    return s;
}

}  // namespace

std::vector<double> posterior(std::span<const double> log_liks, std::span<const double> prior) {
    if (log_liks.empty()) throw ParameterError("posterior needs at least one class");
    if (!prior.empty()) {
        if (prior.size() != log_liks.size()) throw ShapeError("prior length differs from the number of classes");
        double total = 0.0;
        for (double p : prior) {
            if (!(p >= 0.0) || !std::isfinite(p)) throw ParameterError("prior entries must be finite and >= 0");
            total += p;
        }
        if (std::abs(total - 1.0) > 1e-9) throw ParameterError("prior must sum to 1");
    }
    std::vector<double> joint(log_liks.size());
    for (std::size_t i = 0; i < log_liks.size(); ++i) {
        if (std::isnan(log_liks[i]) || log_liks[i] == std::numeric_limits<double>::infinity())
            throw ParameterError("log-likelihoods must be finite or -inf");
        const double lp = prior.empty() ? 0.0 : std::log(prior[i]);
        joint[i] = log_liks[i] + lp;
    }
    const double norm = log_sum_exp(joint);
    if (!std::isfinite(norm)) throw DegenerateInputError("every class has zero probability");
    for (double& v : joint) v = std::exp(v - norm);
    return joint;
}

Method Method::partial(int k_prime) { return {MethodKind::partial, k_prime, {}}; }
Method Method::full() { return {MethodKind::full, 0, {}}; }
Method Method::smoothed(int samples, double sigma, std::uint64_t seed) {
    return {MethodKind::smoothed, 0, SmoothingConfig{samples, sigma, seed}};
}

void Method::validate(int num_scales) const {
    switch (kind) {
        case MethodKind::partial:
            if (k_prime < 1 || k_prime > num_scales)
                throw ParameterError("partial K' = " + std::to_string(k_prime) + " outside [1, " +
                                     std::to_string(num_scales) + "]");
            break;
        case MethodKind::full:
            break;
        case MethodKind::smoothed:
            smoothing.validate();
            break;
        default:
            throw ParameterError("unknown likelihood method");
    }
}

std::string Method::name() const {
    switch (kind) {
        case MethodKind::partial:
            return "partial(K'=" + std::to_string(k_prime) + ")";
        case MethodKind::full:
            return "full";
        case MethodKind::smoothed:
            return "smoothed(S=" + std::to_string(smoothing.samples) + ",sigma=" + nlohmann::json(smoothing.sigma).dump() + ")";
    }
    return "unknown";
}

nlohmann::json Method::to_json() const {
    switch (kind) {
        case MethodKind::partial:
            return {{"method", "partial"}, {"params", {{"k_prime", k_prime}}}};
        case MethodKind::full:
            return {{"method", "full"}, {"params", nlohmann::json::object()}};
        case MethodKind::smoothed:
            return {{"method", "smoothed"}, {"params", smoothing.to_json()}};
    }
    throw ParameterError("unknown likelihood method");
}

Method Method::from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("method") || !j.at("method").is_string())
        throw ConfigError("method entry needs a string \"method\" field");
    const auto kind = j.at("method").get<std::string>();
    const auto params = j.value("params", nlohmann::json::object());
    if (kind == "partial") {
        if (!params.contains("k_prime")) throw ConfigError("partial method needs params.k_prime");
        return partial(params.at("k_prime").get<int>());
    }
    if (kind == "full") return full();
    if (kind == "smoothed") {
        const SmoothingConfig d;
        return smoothed(params.value("samples", d.samples), params.value("sigma", d.sigma),
                        params.value("seed", d.seed));
    }
    throw ParameterError("unknown likelihood method \"" + kind + "\"");
}

StagePlan StagePlan::single(Method method) { return StagePlan{{Stage{1, std::move(method)}}}; }

void StagePlan::validate(int num_scales) const {
    if (stages.empty()) throw ParameterError("stage plan is empty");
    for (std::size_t i = 0; i < stages.size(); ++i) {
        if (stages[i].keep < 1) throw ParameterError("keep counts must be >= 1");
        if (i > 0 && stages[i].keep > stages[i - 1].keep) throw ParameterError("keep counts must be non-increasing");
        stages[i].method.validate(num_scales);
    }
    if (stages.back().keep != 1) throw ParameterError("the final stage must keep exactly one label");
}

nlohmann::json StagePlan::to_json() const {
    auto arr = nlohmann::json::array();
    for (const auto& s : stages) {
        auto m = s.method.to_json();
        arr.push_back({{"keep", s.keep}, {"method", m.at("method")}, {"params", m.at("params")}});
    }
    return arr;
}

StagePlan StagePlan::from_json(const nlohmann::json& j) {
    if (!j.is_array()) throw ConfigError("stage plan must be a JSON array");
    StagePlan plan;
    for (const auto& e : j) {
        if (!e.is_object() || !e.contains("keep")) throw ConfigError("each stage needs a \"keep\" field");
        for (const auto& [key, _] : e.items())
            if (key != "keep" && key != "method" && key != "params") throw ConfigError("unknown stage key \"" + key + "\"");
        plan.stages.push_back(Stage{e.at("keep").get<int>(), Method::from_json(e)});
    }
    return plan;
}

StagePlan default_plan(int n_classes, int num_scales) {
    if (n_classes < 1) throw ParameterError("n_classes must be >= 1");
    if (n_classes <= 3) return StagePlan::single(Method::full());
    const int k_prime = (num_scales == 0 || num_scales >= 7) ? 6 : std::max(1, (num_scales + 1) / 2);
    return StagePlan{{Stage{std::min(10, n_classes), Method::partial(k_prime)},
                      Stage{3, Method::full()},
                      Stage{1, Method::smoothed(3, 0.1)}}};
}

nlohmann::json ClassificationTrace::to_json() const {
    auto arr = nlohmann::json::array();
    for (const auto& s : stages) {
        auto m = s.method.to_json();
        arr.push_back({{"keep", s.keep},
                       {"method", m.at("method")},
                       {"params", m.at("params")},
                       {"candidates", s.candidates},
                       {"scores", s.scores},
                       {"kept", s.kept},
                       {"ms", s.ms}});
    }
    return {{"prediction", prediction}, {"stages", arr}};
}

Classification exhaustive_argmax(std::span<const int> labels, const Method& method, const ScoreFunction& score) {
    check_labels(labels);
    const auto start = Clock::now();
    const auto scores = checked_scores(score, method, labels);
    std::size_t best = 0;
    for (std::size_t i = 1; i < labels.size(); ++i)
        if (scores[i] > scores[best] || (scores[i] == scores[best] && labels[i] < labels[best])) best = i;
    Classification out;
    out.prediction = labels[best];
    StageTrace st;
    st.keep = 1;
    st.method = method;
    st.candidates.assign(labels.begin(), labels.end());
    st.scores = scores;
    st.kept = {labels[best]};
    st.ms = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
    out.trace.stages.push_back(std::move(st));
    out.trace.prediction = out.prediction;
    return out;
}

Classification run_plan(std::span<const int> labels, const StagePlan& plan, const ScoreFunction& score) {
    check_labels(labels);
    if (plan.stages.empty()) throw ParameterError("stage plan is empty");
    std::vector<int> pool(labels.begin(), labels.end());
    Classification out;
    for (const auto& stage : plan.stages) {
        const auto start = Clock::now();
        StageTrace st;
        st.keep = stage.keep;
        st.method = stage.method;
        st.candidates = pool;
        st.scores = checked_scores(score, stage.method, pool);
        const auto order = ranking(pool, st.scores);
        const std::size_t keep = std::min(pool.size(), static_cast<std::size_t>(std::max(1, stage.keep)));
        for (std::size_t i = 0; i < keep; ++i) st.kept.push_back(pool[order[i]]);
        pool = st.kept;
        st.ms = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
        out.trace.stages.push_back(std::move(st));
    }
    out.prediction = out.trace.stages.back().kept.front();
    out.trace.prediction = out.prediction;
    return out;
}

PreparedInput prepare_input(const FeatureMap& features, const Tokenizer& tokenizer) {
    return {features, tokenizer.quantize(features)};
}

PreparedInput prepare_input(const Image& image, const Tokenizer& tokenizer) {
    return prepare_input(tokenizer.encode(image), tokenizer);
}

std::vector<double> score_labels(const PreparedInput& input, std::span<const int> labels, const NextScaleModel& model,
                                 const Tokenizer& tokenizer, const Method& method) {
    const int k = model.schedule().num_scales();
    method.validate(k);
    switch (method.kind) {
        case MethodKind::partial:
            return partial_scores(input.tokens, labels, model, method.k_prime);
        case MethodKind::full:
            return partial_scores(input.tokens, labels, model, k);
        case MethodKind::smoothed: {
            const auto samples = smoothing_samples(input.features, tokenizer, method.smoothing);
            return smoothed_scores(samples, labels, model);
        }
    }
    throw ParameterError("unknown likelihood method");
}

ScoreFunction model_scorer(const PreparedInput& input, const NextScaleModel& model, const Tokenizer& tokenizer) {
    return [&input, &model, &tokenizer](const Method& m, std::span<const int> labels) {
        return score_labels(input, labels, model, tokenizer, m);
    };
}

Classification classify_exhaustive(const PreparedInput& input, std::span<const int> labels,
                                   const NextScaleModel& model, const Tokenizer& tokenizer, const Method& method) {
    method.validate(model.schedule().num_scales());
    return exhaustive_argmax(labels, method, model_scorer(input, model, tokenizer));
}

Classification classify_exhaustive(const Image& image, std::span<const int> labels, const NextScaleModel& model,
                                   const Tokenizer& tokenizer, const Method& method) {
    return classify_exhaustive(prepare_input(image, tokenizer), labels, model, tokenizer, method);
}

Classification classify_adaptive(const PreparedInput& input, std::span<const int> labels, const NextScaleModel& model,
                                 const Tokenizer& tokenizer, const StagePlan& plan) {
    plan.validate(model.schedule().num_scales());
    return run_plan(labels, plan, model_scorer(input, model, tokenizer));
}

Classification classify_adaptive(const Image& image, std::span<const int> labels, const NextScaleModel& model,
                                 const Tokenizer& tokenizer, const StagePlan& plan) {
    return classify_adaptive(prepare_input(image, tokenizer), labels, model, tokenizer, plan);
}

std::vector<int> all_labels(int n_classes) {
    std::vector<int> out(static_cast<std::size_t>(std::max(0, n_classes)));
    std::iota(out.begin(), out.end(), 0);
    return out;
}

}  // namespace avarc
