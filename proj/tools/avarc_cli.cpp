// avarc: train, classify, explain and evaluate next-scale generative classifiers.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "avarc/checkpoint.hpp"
#include "avarc/classifier.hpp"
#include "avarc/error.hpp"
#include "avarc/evaluation.hpp"
#include "avarc/explain.hpp"
#include "avarc/incremental.hpp"
#include "avarc/png_io.hpp"
#include "avarc/training.hpp"
#include "run_config.hpp"

namespace fs = std::filesystem;
using namespace avarc;
using namespace avarc::cli;

namespace {

struct CommonOptions {
    std::string config;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::string data_dir;
    std::string work_dir;

    RunConfig load() const {
        auto o = overrides;
        if (!data_dir.empty()) o.push_back("paths.data_dir=\"" + data_dir + "\"");
        if (!work_dir.empty()) o.push_back("paths.work_dir=\"" + work_dir + "\"");
        return load_run_config(config, o, seed);
    }
};

void add_common(CLI::App* app, CommonOptions& o) {
    app->add_option("-c,--config", o.config, "JSON run configuration");
    app->add_option("--set", o.overrides, "Override a config value: section.key=value (repeatable)");
    app->add_option("--seed", o.seed, "Seed for every random stream");
    app->add_option("--data-dir", o.data_dir, "Dataset root (default: $AVARC_DATA_DIR)");
    app->add_option("--work-dir", o.work_dir, "Directory for checkpoints and results");
}

void ensure_work_dir(const RunConfig& cfg) { fs::create_directories(cfg.paths.work_dir); }

nlohmann::json artifact_meta(const RunConfig& cfg) {
    return {{"config_hash", cfg.hash()}, {"seed", cfg.seed}};
}

std::function<void(const TrainStepRecord&)> jsonl_logger(const fs::path& path, int print_every) {
    std::ofstream(path, std::ios::trunc).close();
    return [path, print_every](const TrainStepRecord& r) {
        append_jsonl(path, {{"step", r.step}, {"loss", r.loss}, {"lr", r.lr}, {"wall_ms", r.wall_ms}});
        if (print_every > 0 && r.step % print_every == 0)
            std::fprintf(stderr, "step %d epoch %d loss %.5f (%.0f s)\n", r.step, r.epoch, r.loss, r.wall_ms / 1000.0);
    };
}

Tokenizer load_tokenizer(const RunConfig& cfg) { return Tokenizer::load(cfg.work_path(cfg.paths.tokenizer)); }

struct LoadedModel {
    NextScaleModel model;
    std::vector<std::string> class_names;
};

LoadedModel load_model(const fs::path& path) {
    const auto ckpt = read_checkpoint(path, kModelMagic);
    auto model = NextScaleModel::load(path);
    std::vector<std::string> names;
    if (ckpt.metadata.contains("extra") && ckpt.metadata.at("extra").contains("class_names"))
        names = ckpt.metadata.at("extra").at("class_names").get<std::vector<std::string>>();
    if (names.size() != static_cast<std::size_t>(model.n_classes())) names.clear();
    for (int c = static_cast<int>(names.size()); c < model.n_classes(); ++c) names.push_back(std::to_string(c));
    return {std::move(model), std::move(names)};
}

fs::path pick_model_path(const RunConfig& cfg, const std::string& kind) {
    const auto base = cfg.work_path(cfg.paths.model), cca = cfg.work_path(cfg.paths.cca_model);
    if (kind == "base") return base;
    if (kind == "cca") return cca;
    if (kind == "auto") return fs::exists(cca) ? cca : base;
    throw ParameterError("--model must be base, cca or auto");
}

std::vector<int> parse_label_list(const std::string& text, int n_classes) {
    if (text.empty()) return all_labels(n_classes);
    std::vector<int> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(std::stoi(item));
        } catch (const std::exception&) {
            throw ParameterError("bad label \"" + item + "\" in --labels");
        }
        if (out.back() < 0 || out.back() >= n_classes) throw LabelError("label " + item + " outside the model's classes");
    }
    return out;
}

// ---------------------------------------------------------------- commands

int cmd_train_tokenizer(const CommonOptions& o) {
    const auto cfg = o.load();
    ensure_work_dir(cfg);
    const auto train = load_split(cfg, true);
    std::fprintf(stderr, "training tokenizer on %zu images\n", train.size());
    const auto log = jsonl_logger(cfg.work_path("tokenizer_log.jsonl"), 100);
    const auto tok = train_tokenizer(train.images, cfg.tokenizer, [&](const TokenizerTrainStep& s) {
        log({s.step, 0, s.loss, cfg.tokenizer.learning_rate, s.wall_ms});
    });
    const auto out = cfg.work_path(cfg.paths.tokenizer);
    tok.save(out, artifact_meta(cfg));
    std::cout << nlohmann::json({{"tokenizer", out.string()}, {"config_hash", cfg.hash()}}).dump() << "\n";
    return 0;
}

int cmd_train_var(const CommonOptions& o) {
    const auto cfg = o.load();
    ensure_work_dir(cfg);
    const auto tok = load_tokenizer(cfg);
    const auto train = load_split(cfg, true);
    const auto data = tokenize_dataset(train.images, train.labels, tok);
    std::fprintf(stderr, "training next-scale model on %zu token maps\n", data.size());
    TrainHooks hooks;
    hooks.on_step = jsonl_logger(cfg.work_path("var_log.jsonl"), 100);
    auto model = train_mle(data, NextScaleModel(cfg.model_config(train.n_classes()), tok.codebook()), cfg.training, hooks);
    const auto out = cfg.work_path(cfg.paths.model);
    auto extra = artifact_meta(cfg);
    extra["class_names"] = train.class_names;
    model.save(out, extra);
    std::cout << nlohmann::json({{"model", out.string()}, {"config_hash", cfg.hash()}}).dump() << "\n";
    return 0;
}

int cmd_finetune_cca(const CommonOptions& o) {
    const auto cfg = o.load();
    ensure_work_dir(cfg);
    const auto tok = load_tokenizer(cfg);
    const auto loaded = load_model(cfg.work_path(cfg.paths.model));
    const auto train = load_split(cfg, true);
    const auto data = tokenize_dataset(train.images, train.labels, tok);
    const double before = mean_label_margin(data, loaded.model, cfg.seed);
    TrainHooks hooks;
    hooks.on_step = jsonl_logger(cfg.work_path("cca_log.jsonl"), 100);
    const auto tuned = finetune_cca(data, loaded.model, cfg.cca, hooks);
    const double after = mean_label_margin(data, tuned, cfg.seed);
    const auto out = cfg.work_path(cfg.paths.cca_model);
    auto extra = artifact_meta(cfg);
    extra["class_names"] = loaded.class_names;
    tuned.save(out, extra);
    std::cout << nlohmann::json({{"model", out.string()},
                                 {"margin_before", before},
                                 {"margin_after", after},
                                 {"config_hash", cfg.hash()}})
                     .dump()
              << "\n";
    return 0;
}

struct ClassifyOptions {
    std::vector<std::string> images;
    std::string plan_path;
    bool exhaustive = false;
    std::string trace_out;
    std::string model = "auto";
    std::string labels;
    int test_count = 0;
};

int cmd_classify(const CommonOptions& o, const ClassifyOptions& c) {
    const auto cfg = o.load();
    const auto tok = load_tokenizer(cfg);
    const auto loaded = load_model(pick_model_path(cfg, c.model));
    const auto& model = loaded.model;
    const auto labels = parse_label_list(c.labels, model.n_classes());
    const int n_scales = model.schedule().num_scales();

    StagePlan plan;
    if (!c.plan_path.empty()) {
        std::ifstream in(c.plan_path);
        if (!in) throw ConfigError("cannot read plan " + c.plan_path);
        const auto j = nlohmann::json::parse(in, nullptr, false);
        if (j.is_discarded()) throw ConfigError(c.plan_path + " is not valid JSON");
        plan = StagePlan::from_json(j);
    } else if (cfg.plan) {
        plan = *cfg.plan;
    } else {
        plan = default_plan(static_cast<int>(labels.size()), n_scales);
    }
    plan.validate(n_scales);

    std::vector<std::pair<std::string, Image>> inputs;
    std::vector<int> truth;
    for (const auto& p : c.images) inputs.emplace_back(p, read_png(p, tok.config().image_channels));
    if (c.test_count > 0) {
        auto test = load_split(cfg, false).head(static_cast<std::size_t>(c.test_count));
        for (std::size_t i = 0; i < test.size(); ++i) {
            inputs.emplace_back("test[" + std::to_string(i) + "]", std::move(test.images[i]));
            truth.push_back(test.labels[i]);
        }
    }
    if (inputs.empty()) throw ParameterError("nothing to classify: pass image paths or --test N");

    auto traces = nlohmann::json::array();
    std::size_t correct = 0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const auto prepared = prepare_input(inputs[i].second, tok);
        const auto result = c.exhaustive ? classify_exhaustive(prepared, labels, model, tok, Method::full())
                                         : classify_adaptive(prepared, labels, model, tok, plan);
        const auto& name = loaded.class_names[static_cast<std::size_t>(result.prediction)];
        std::cout << inputs[i].first << "\t" << name << "\n";
        const std::size_t t = i - c.images.size();
        if (i >= c.images.size() && result.prediction == truth[t]) ++correct;
        auto tj = result.trace.to_json();
        tj["input"] = inputs[i].first;
        traces.push_back(tj);
    }
    if (!truth.empty())
        std::cout << nlohmann::json({{"accuracy", static_cast<double>(correct) / truth.size()}, {"n", truth.size()}}).dump()
                  << "\n";
    if (!c.trace_out.empty()) {
        std::ofstream out(c.trace_out);
        if (!out) throw DataError("cannot write " + c.trace_out);
        out << nlohmann::json({{"config_hash", cfg.hash()},
                               {"plan", c.exhaustive ? StagePlan::single(Method::full()).to_json() : plan.to_json()},
                               {"traces", traces}})
                   .dump(2)
            << "\n";
    }
    return 0;
}

struct ExplainOptions {
    std::string image;
    int test_index = -1;
    int label = -1;
    int contrast_label = -1;
    std::string mode = "finest_scale";
    bool overlay = false;
    std::string out;
    std::string model = "auto";
    int zoom = 8;
};

int cmd_explain(const CommonOptions& o, const ExplainOptions& e) {
    const auto cfg = o.load();
    const auto tok = load_tokenizer(cfg);
    const auto loaded = load_model(pick_model_path(cfg, e.model));
    const auto& model = loaded.model;
    const auto mode = parse_heatmap_mode(e.mode);
    Image image;
    if (!e.image.empty()) {
        image = read_png(e.image, tok.config().image_channels);
    } else if (e.test_index >= 0) {
        auto test = load_split(cfg, false);
        if (static_cast<std::size_t>(e.test_index) >= test.size()) throw ParameterError("--test-index out of range");
        image = test.images[static_cast<std::size_t>(e.test_index)];
    } else {
        throw ParameterError("pass an image path or --test-index");
    }
    const auto prepared = prepare_input(image, tok);
    int label = e.label;
    if (label < 0) label = classify_exhaustive(prepared, all_labels(model.n_classes()), model, tok, Method::full()).prediction;
    if (label >= model.n_classes()) throw LabelError("--label outside the model's classes");
    const auto pmi = e.contrast_label >= 0 ? contrastive_pmi(prepared.tokens, label, e.contrast_label, model)
                                           : token_pmi(prepared.tokens, label, model);
    const auto heat = render_heatmap(pmi, image.height, image.width, mode);
    const fs::path prefix = e.out.empty() ? cfg.work_path("explain") : fs::path(e.out);
    if (prefix.has_parent_path()) fs::create_directories(prefix.parent_path());
    const auto png = fs::path(prefix.string() + ".png"), side = fs::path(prefix.string() + ".json");
    write_heatmap_png(png, heat, e.overlay ? &image : nullptr, e.zoom);
    auto meta = heatmap_sidecar(pmi, heat, mode);
    meta["config_hash"] = cfg.hash();
    meta["overlay"] = e.overlay;
    std::ofstream(side) << meta.dump(2) << "\n";
    std::cout << nlohmann::json({{"heatmap", png.string()}, {"sidecar", side.string()}, {"label", label},
                                 {"pmi_total", pmi.total()}})
                     .dump()
              << "\n";
    return 0;
}

BenchmarkRecord record(const RunConfig& cfg, const std::string& experiment, const std::string& metric, double value,
                       double ms) {
    return {experiment, cfg.hash(), metric, value, ms, cfg.seed, utc_timestamp()};
}

void emit(const RunConfig& cfg, const std::string& experiment, const std::vector<BenchmarkRecord>& records) {
    const auto dir = cfg.work_path("results");
    fs::create_directories(dir);
    write_records_csv(dir / (experiment + ".csv"), records);
    for (const auto& r : records) {
        append_jsonl(dir / "results.jsonl", r.to_json());
        std::cout << r.csv_row() << "\n";
    }
}

int cmd_evaluate(const CommonOptions& o, const std::string& experiment, const std::string& model_kind) {
    const auto cfg = o.load();
    const auto tok = load_tokenizer(cfg);
    const auto test = load_split(cfg, false);
    std::vector<BenchmarkRecord> records;
    std::cout << BenchmarkRecord::csv_header() << "\n";

    if (experiment == "noise") {
        const auto sample = test.head(static_cast<std::size_t>(cfg.evaluate.noise_images));
        std::optional<LoadedModel> loaded;
        if (fs::exists(pick_model_path(cfg, model_kind))) loaded = load_model(pick_model_path(cfg, model_kind));
        const auto rows = noise_experiment(sample.images, sample.labels, cfg.evaluate.noise_sigmas, tok,
                                           loaded ? &loaded->model : nullptr, cfg.evaluate.noise_trials, cfg.seed);
        for (const auto& r : rows) {
            const std::string s = "sigma=" + nlohmann::json(r.sigma).dump();
            records.push_back(record(cfg, "noise", "token_change@" + s, r.token_change, 0));
            records.push_back(record(cfg, "noise", "recon_mse@" + s, r.recon_mse, 0));
            records.push_back(record(cfg, "noise", "loglik_gap@" + s, r.loglik_gap, 0));
        }
        emit(cfg, "noise", records);
        return 0;
    }

    const auto eval = prepare_eval_set(test, tok);
    if (experiment == "sweep") {
        const auto loaded = load_model(pick_model_path(cfg, model_kind));
        std::vector<int> ks = cfg.evaluate.sweep_scales;
        if (ks.empty()) ks = all_labels(loaded.model.schedule().num_scales()), std::for_each(ks.begin(), ks.end(), [](int& k) { ++k; });
        const auto points = scale_sweep(eval, loaded.model, ks);
        std::vector<double> x, acc, ms;
        for (const auto& p : points) {
            const std::string tag = "@K'=" + std::to_string(p.k_prime);
            records.push_back(record(cfg, "sweep", "top" + std::to_string(p.k) + tag, p.topk, p.ms_per_image));
            records.push_back(record(cfg, "sweep", "tokens" + tag, p.tokens, p.ms_per_image));
            x.push_back(p.k_prime);
            acc.push_back(p.topk);
            ms.push_back(p.ms_per_image);
        }
        emit(cfg, "sweep", records);
        const ChartSeries acc_series{acc, 200, 40, 40}, ms_series{ms, 40, 80, 200};
        write_line_chart(cfg.work_path("results/sweep_accuracy.png"), x, std::span(&acc_series, 1));
        write_line_chart(cfg.work_path("results/sweep_latency.png"), x, std::span(&ms_series, 1));
        return 0;
    }
    if (experiment == "ablation") {
        const auto base = load_model(cfg.work_path(cfg.paths.model));
        const auto cca = load_model(cfg.work_path(cfg.paths.cca_model));
        const SmoothingConfig smooth{cfg.evaluate.ablation_samples, cfg.evaluate.ablation_sigma, cfg.seed};
        for (const auto& cell : ablation_grid(eval, base.model, cca.model, tok, smooth)) {
            const std::string name = std::string("top1@smooth=") + (cell.smoothing ? "on" : "off") + ",cca=" +
                                     (cell.cca ? "on" : "off");
            records.push_back(record(cfg, "ablation", name, cell.top1, cell.ms_per_image));
        }
        emit(cfg, "ablation", records);
        return 0;
    }
    if (experiment == "benchmark") {
        const auto loaded = load_model(pick_model_path(cfg, model_kind));
        const auto& model = loaded.model;
        const auto labels = all_labels(model.n_classes());
        const auto plan = cfg.plan ? *cfg.plan : default_plan(model.n_classes(), model.schedule().num_scales());
        plan.validate(model.schedule().num_scales());
        const std::size_t n = std::min(eval.size(), static_cast<std::size_t>(cfg.evaluate.benchmark_images));
        std::vector<int> staged(n), exhaustive(n);
        const double staged_ms = median_ms([&] {
            for (std::size_t i = 0; i < n; ++i) staged[i] = classify_adaptive(eval.inputs[i], labels, model, tok, plan).prediction;
        }, cfg.evaluate.benchmark_repeats);
        const double full_ms = median_ms([&] {
            for (std::size_t i = 0; i < n; ++i)
                exhaustive[i] = classify_exhaustive(eval.inputs[i], labels, model, tok, Method::full()).prediction;
        }, cfg.evaluate.benchmark_repeats);
        const std::span<const int> truth(eval.labels.data(), n);
        records.push_back(record(cfg, "benchmark", "top1_staged", accuracy(staged, truth), staged_ms));
        records.push_back(record(cfg, "benchmark", "top1_exhaustive_full", accuracy(exhaustive, truth), full_ms));
        records.push_back(record(cfg, "benchmark", "agreement", accuracy(staged, exhaustive), 0));
        records.push_back(record(cfg, "benchmark", "time_ratio", staged_ms / full_ms, 0));
        emit(cfg, "benchmark", records);
        return 0;
    }
    throw ParameterError("unknown experiment \"" + experiment + "\" (sweep | ablation | noise | benchmark)");
}

int cmd_incremental(const CommonOptions& o, const std::string& split_path) {
    const auto cfg = o.load();
    ensure_work_dir(cfg);
    const auto tok = load_tokenizer(cfg);
    const auto train = load_split(cfg, true);
    const auto test = load_split(cfg, false);
    TaskSplit split = TaskSplit::halves(train.n_classes());
    if (!split_path.empty()) {
        std::ifstream in(split_path);
        if (!in) throw ConfigError("cannot read split " + split_path);
        const auto j = nlohmann::json::parse(in, nullptr, false);
        if (j.is_discarded()) throw ConfigError(split_path + " is not valid JSON");
        split = TaskSplit::from_json(j);
    }
    split.validate(train.n_classes());

    const auto data = tokenize_dataset(train.images, train.labels, tok);
    std::fprintf(stderr, "training %zu per-task models\n", split.tasks.size());
    auto models = train_task_models(data, split, cfg.model_config(2), tok.codebook(), cfg.training, cfg.cca);
    const auto merged = merge_task_models(std::move(models), split);
    const auto eval = prepare_eval_set(test, tok);
    const auto gen = evaluate_incremental(
        "generative_merged",
        [&](std::size_t i) { return merged_classify(eval.inputs[i], merged, tok, Method::full()).prediction; },
        eval.labels, split);

    std::fprintf(stderr, "training sequential baseline\n");
    std::vector<IncrementalResult> phases;
    const auto baseline = train_baseline_sequential(train, split, cfg.baseline, [&](int t, const BaselineClassifier& b) {
        phases.push_back(evaluate_incremental("baseline_after_task" + std::to_string(t + 1),
                                              [&](std::size_t i) { return b.predict(test.images[i]); }, test.labels, split));
    });
    baseline.save(cfg.work_path("baseline.ckpt"));

    const auto dir = cfg.work_path("results");
    fs::create_directories(dir);
    std::ofstream csv(dir / "incremental.csv");
    csv << "setting,task,accuracy\n" << gen.csv_rows();
    for (const auto& p : phases) csv << p.csv_rows();
    std::cout << "setting,task,accuracy\n" << gen.csv_rows();
    for (const auto& p : phases) std::cout << p.csv_rows();
    auto j = nlohmann::json({{"config_hash", cfg.hash()}, {"split", split.to_json()}, {"generative", gen.to_json()}});
    for (const auto& p : phases) j["baseline"].push_back(p.to_json());
    append_jsonl(dir / "results.jsonl", j);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Next-scale autoregressive generative classifier"};
    app.require_subcommand(1);
    CommonOptions common;

    auto* tt = app.add_subcommand("train-tokenizer", "Train the multi-scale VQ tokenizer");
    add_common(tt, common);
    auto* tv = app.add_subcommand("train-var", "Train the class-conditional next-scale model");
    add_common(tv, common);
    auto* fc = app.add_subcommand("finetune-cca", "Finetune the model with the contrastive alignment loss");
    add_common(fc, common);

    ClassifyOptions copt;
    auto* cl = app.add_subcommand("classify", "Classify images");
    add_common(cl, common);
    cl->add_option("images", copt.images, "PNG images");
    cl->add_option("--plan", copt.plan_path, "Stage plan JSON");
    cl->add_flag("--exhaustive", copt.exhaustive, "Score every label with the full likelihood");
    cl->add_option("--trace-out", copt.trace_out, "Write per-image traces as JSON");
    cl->add_option("--model", copt.model, "base | cca | auto");
    cl->add_option("--labels", copt.labels, "Comma-separated candidate labels");
    cl->add_option("--test", copt.test_count, "Also classify the first N test images and report accuracy");

    ExplainOptions eopt;
    auto* ex = app.add_subcommand("explain", "Render a token-wise PMI heatmap");
    add_common(ex, common);
    ex->add_option("image", eopt.image, "PNG image");
    ex->add_option("--test-index", eopt.test_index, "Explain this test-set image instead");
    ex->add_option("--label", eopt.label, "Class to explain (default: the prediction)");
    ex->add_option("--contrast-label", eopt.contrast_label, "Explain label versus this label");
    ex->add_option("--mode", eopt.mode, "finest_scale | scale_weighted_sum");
    ex->add_flag("--overlay", eopt.overlay, "Blend the heatmap over the input");
    ex->add_option("--out", eopt.out, "Output prefix for .png and .json");
    ex->add_option("--zoom", eopt.zoom, "Nearest-neighbour upscaling of the PNG");
    ex->add_option("--model", eopt.model, "base | cca | auto");

    std::string experiment, eval_model = "auto";
    auto* ev = app.add_subcommand("evaluate", "Run an experiment and write CSV/JSONL records");
    add_common(ev, common);
    ev->add_option("--experiment", experiment, "sweep | ablation | noise | benchmark")->required();
    ev->add_option("--model", eval_model, "base | cca | auto");

    std::string split_path;
    auto* inc = app.add_subcommand("incremental", "Class-incremental experiment: merged models vs sequential baseline");
    add_common(inc, common);
    inc->add_option("--split", split_path, "Split JSON {\"tasks\": [[...], ...]} (default: two halves)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << nlohmann::json({{"error", "usage_error"}, {"message", e.what()}}).dump() << "\n";
        return 2;
    }

    try {
        if (tt->parsed()) return cmd_train_tokenizer(common);
        if (tv->parsed()) return cmd_train_var(common);
        if (fc->parsed()) return cmd_finetune_cca(common);
        if (cl->parsed()) return cmd_classify(common, copt);
        if (ex->parsed()) return cmd_explain(common, eopt);
        if (ev->parsed()) return cmd_evaluate(common, experiment, eval_model);
        if (inc->parsed()) return cmd_incremental(common, split_path);
    } catch (const Error& e) {
        std::cerr << nlohmann::json({{"error", e.code()}, {"message", e.what()}}).dump() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << nlohmann::json({{"error", "internal_error"}, {"message", e.what()}}).dump() << "\n";
        return 1;
    }
    return 0;
}
