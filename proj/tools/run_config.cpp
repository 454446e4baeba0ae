#include "run_config.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "avarc/error.hpp"
#include "avarc/evaluation.hpp"
#include "avarc/seed.hpp"

namespace avarc::cli {

namespace {

nlohmann::json without_seed(nlohmann::json j) {
    j.erase("seed");
    return j;
}

nlohmann::json paths_json(const PathsConfig& p) {
    return {{"data_dir", p.data_dir}, {"work_dir", p.work_dir}, {"tokenizer", p.tokenizer},
            {"model", p.model},       {"cca_model", p.cca_model}};
}

nlohmann::json data_json(const DataConfig& d) {
    return {{"format", d.format},           {"train_subdir", d.train_subdir}, {"test_subdir", d.test_subdir},
            {"train_limit", d.train_limit}, {"test_limit", d.test_limit}};
}

nlohmann::json model_json(const ModelShape& m) {
    return {{"width", m.width},         {"depth", m.depth},       {"heads", m.heads},
            {"mlp_ratio", m.mlp_ratio}, {"init_std", m.init_std}, {"zero_head", m.zero_head}};
}

nlohmann::json eval_json(const EvalConfig& e) {
    return {{"sweep_scales", e.sweep_scales},         {"noise_sigmas", e.noise_sigmas},
            {"noise_images", e.noise_images},         {"noise_trials", e.noise_trials},
            {"ablation_samples", e.ablation_samples}, {"ablation_sigma", e.ablation_sigma},
            {"benchmark_images", e.benchmark_images}, {"benchmark_repeats", e.benchmark_repeats}};
}

void check_keys(const nlohmann::json& input, const nlohmann::json& schema, const std::string& where) {
    if (!input.is_object()) throw ConfigError((where.empty() ? "config" : where) + " must be a JSON object");
    for (const auto& [key, value] : input.items()) {
        const std::string path = where.empty() ? key : where + "." + key;
        if (!schema.contains(key)) throw ConfigError("unknown config key \"" + path + "\"");
        if (schema.at(key).is_object() && !schema.at(key).empty()) check_keys(value, schema.at(key), path);
    }
}

nlohmann::json schema() {
    RunConfig d;
    auto j = d.to_json();
    j["plan"] = nullptr;
    return j;
}

}  // namespace

nlohmann::json RunConfig::to_json() const {
    nlohmann::json j = {{"seed", seed},
                        {"paths", paths_json(paths)},
                        {"data", data_json(data)},
                        {"tokenizer", without_seed(tokenizer.to_json())},
                        {"model", model_json(model)},
                        {"training", without_seed(training.to_json())},
                        {"cca", without_seed(cca.to_json())},
                        {"evaluate", eval_json(evaluate)},
                        {"baseline", without_seed(baseline.to_json())}};
    if (plan) j["plan"] = plan->to_json();
    return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    check_keys(j, schema(), "");
    RunConfig c;
    try {
        c.seed = j.value("seed", c.seed);
        const auto section = [&](const char* name) { return j.contains(name) ? j.at(name) : nlohmann::json::object(); };
        const auto p = section("paths");
        c.paths.data_dir = p.value("data_dir", c.paths.data_dir);
        c.paths.work_dir = p.value("work_dir", c.paths.work_dir);
        c.paths.tokenizer = p.value("tokenizer", c.paths.tokenizer);
        c.paths.model = p.value("model", c.paths.model);
        c.paths.cca_model = p.value("cca_model", c.paths.cca_model);
        const auto d = section("data");
        c.data.format = d.value("format", c.data.format);
        c.data.train_subdir = d.value("train_subdir", c.data.train_subdir);
        c.data.test_subdir = d.value("test_subdir", c.data.test_subdir);
        c.data.train_limit = d.value("train_limit", c.data.train_limit);
        c.data.test_limit = d.value("test_limit", c.data.test_limit);
        c.tokenizer = TokenizerConfig::from_json(section("tokenizer"));
        const auto m = section("model");
        c.model.width = m.value("width", c.model.width);
        c.model.depth = m.value("depth", c.model.depth);
        c.model.heads = m.value("heads", c.model.heads);
        c.model.mlp_ratio = m.value("mlp_ratio", c.model.mlp_ratio);
        c.model.init_std = m.value("init_std", c.model.init_std);
        c.model.zero_head = m.value("zero_head", c.model.zero_head);
        c.training = TrainConfig::from_json(section("training"));
        c.cca = CCAConfig::from_json(section("cca"));
        if (j.contains("plan") && !j.at("plan").is_null()) c.plan = StagePlan::from_json(j.at("plan"));
        const auto e = section("evaluate");
        c.evaluate.sweep_scales = e.value("sweep_scales", c.evaluate.sweep_scales);
        c.evaluate.noise_sigmas = e.value("noise_sigmas", c.evaluate.noise_sigmas);
        c.evaluate.noise_images = e.value("noise_images", c.evaluate.noise_images);
        c.evaluate.noise_trials = e.value("noise_trials", c.evaluate.noise_trials);
        c.evaluate.ablation_samples = e.value("ablation_samples", c.evaluate.ablation_samples);
        c.evaluate.ablation_sigma = e.value("ablation_sigma", c.evaluate.ablation_sigma);
        c.evaluate.benchmark_images = e.value("benchmark_images", c.evaluate.benchmark_images);
        c.evaluate.benchmark_repeats = e.value("benchmark_repeats", c.evaluate.benchmark_repeats);
        c.baseline = BaselineConfig::from_json(section("baseline"));
    } catch (const nlohmann::json::exception& ex) {
        throw ConfigError(std::string("config value has the wrong type: ") + ex.what());
    }

    c.tokenizer.seed = mix_seed(c.seed, 1);
    c.training.seed = mix_seed(c.seed, 3);
    c.cca.seed = mix_seed(c.seed, 4);
    c.baseline.seed = mix_seed(c.seed, 5);

    if (c.data.format != "mnist" && c.data.format != "folder") throw ConfigError("data.format must be mnist or folder");
    if (c.data.train_limit < 0 || c.data.test_limit < 0) throw ConfigError("data limits must be >= 0");
    c.tokenizer.validate();
    c.training.validate();
    c.cca.validate();
    c.baseline.validate();
    (void)c.model_config(2);
    if (c.plan) c.plan->validate(c.tokenizer.schedule.num_scales());
    if (c.evaluate.ablation_samples < 1 || c.evaluate.ablation_sigma < 0.0) throw ConfigError("invalid ablation smoothing");
    if (c.evaluate.noise_images < 1 || c.evaluate.noise_trials < 1 || c.evaluate.benchmark_images < 1 ||
        c.evaluate.benchmark_repeats < 1)
        throw ConfigError("evaluation counts must be >= 1");
    return c;
}

std::string RunConfig::hash() const { return config_hash(to_json()); }

std::filesystem::path RunConfig::work_path(const std::string& name) const {
    const std::filesystem::path p(name);
    return p.is_absolute() ? p : std::filesystem::path(paths.work_dir) / p;
}

NextScaleConfig RunConfig::model_config(int n_classes) const {
    NextScaleConfig m;
    m.n_classes = n_classes;
    m.vocab = tokenizer.vocab;
    m.feat_channels = tokenizer.feat_channels;
    m.schedule = tokenizer.schedule;
    m.width = model.width;
    m.depth = model.depth;
    m.heads = model.heads;
    m.mlp_ratio = model.mlp_ratio;
    m.init_std = model.init_std;
    m.zero_head = model.zero_head;
    m.seed = mix_seed(seed, 2);
    try {
        m.validate();
    } catch (const Error& e) {
        throw ConfigError(std::string("model section: ") + e.what());
    }
    return m;
}

void apply_override(nlohmann::json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override \"" + assignment + "\" is not key=value");
    const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    nlohmann::json* node = &doc;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ConfigError("override key \"" + key + "\" has an empty component");
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        if (!node->contains(part)) (*node)[part] = nlohmann::json::object();
        node = &(*node)[part];
        if (!node->is_object()) throw ConfigError("override key \"" + key + "\" descends into a non-object");
        start = dot + 1;
    }
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides,
                          std::optional<std::uint64_t> seed) {
    nlohmann::json doc = nlohmann::json::object();
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot read config " + path);
        doc = nlohmann::json::parse(in, nullptr, false);
        if (doc.is_discarded()) throw ConfigError(path + " is not valid JSON");
    }
    for (const auto& o : overrides) apply_override(doc, o);
    if (seed) doc["seed"] = *seed;
    return RunConfig::from_json(doc);
}

Dataset load_split(const RunConfig& cfg, bool train) {
    const auto root = resolve_data_dir(cfg.paths.data_dir.empty() ? std::nullopt
                                                                  : std::optional<std::filesystem::path>(cfg.paths.data_dir));
    const int limit = train ? cfg.data.train_limit : cfg.data.test_limit;
    if (cfg.data.format == "mnist") return load_mnist(root, train, static_cast<std::size_t>(limit));
    auto d = load_image_folder(root / (train ? cfg.data.train_subdir : cfg.data.test_subdir), cfg.tokenizer.image_channels,
                               cfg.tokenizer.image_height, cfg.tokenizer.image_width);
    if (limit <= 0 || static_cast<std::size_t>(limit) >= d.size()) return d;
    // Folder listings are grouped by class; subsample in a seeded order instead.
    std::vector<std::size_t> order(d.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    nn::Rng rng(mix_seed(cfg.seed, train ? 7 : 8));
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(static_cast<std::size_t>(limit));
    std::sort(order.begin(), order.end());
    Dataset out;
    out.class_names = d.class_names;
    for (std::size_t i : order) {
        out.images.push_back(d.images[i]);
        out.labels.push_back(d.labels[i]);
    }
    return out;
}

}  // namespace avarc::cli
