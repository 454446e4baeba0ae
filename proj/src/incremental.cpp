#include "avarc/incremental.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <sstream>

#include "avarc/checkpoint.hpp"
#include "avarc/error.hpp"
#include "avarc/nn/ops.hpp"
#include "avarc/seed.hpp"

namespace avarc {

void TaskSplit::validate(int n_classes) const {
    if (tasks.empty()) throw ConfigError("split has no tasks");
    std::set<int> seen;
    for (const auto& t : tasks) {
        if (t.empty()) throw DataError("split contains an empty task");
        for (int y : t) {
            if (y < 0) throw ConfigError("split labels must be >= 0");
            if (!seen.insert(y).second) throw ConfigError("label " + std::to_string(y) + " appears in two tasks");
        }
    }
    if (n_classes > 0) {
        if (static_cast<int>(seen.size()) != n_classes || *seen.rbegin() != n_classes - 1)
            throw ConfigError("split must cover exactly the labels [0, " + std::to_string(n_classes) + ")");
    }
}

int TaskSplit::task_of(int label) const {
    for (std::size_t t = 0; t < tasks.size(); ++t)
        if (std::find(tasks[t].begin(), tasks[t].end(), label) != tasks[t].end()) return static_cast<int>(t);
    return -1;
}

nlohmann::json TaskSplit::to_json() const { return {{"tasks", tasks}}; }

TaskSplit TaskSplit::from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("tasks")) throw ConfigError("split JSON needs a \"tasks\" array");
    for (const auto& [key, _] : j.items())
        if (key != "tasks") throw ConfigError("unknown split key \"" + key + "\"");
    TaskSplit s;
    s.tasks = j.at("tasks").get<std::vector<std::vector<int>>>();
    s.validate();
    return s;
}

TaskSplit TaskSplit::halves(int n_classes) {
    TaskSplit s;
    s.tasks.resize(2);
    for (int y = 0; y < n_classes; ++y) s.tasks[y < (n_classes + 1) / 2 ? 0 : 1].push_back(y);
    return s;
}

MergedClassifier::MergedClassifier(std::vector<std::shared_ptr<const NextScaleModel>> models,
                                   std::vector<std::vector<int>> label_maps, std::vector<double> offsets)
    : models_(std::move(models)), label_maps_(std::move(label_maps)), offsets_(std::move(offsets)) {
    if (models_.empty()) throw ParameterError("a merge needs at least one model");
    if (label_maps_.size() != models_.size()) throw ShapeError("one label map per model is required");
    if (offsets_.empty()) offsets_.assign(models_.size(), 0.0);
    if (offsets_.size() != models_.size()) throw ShapeError("one offset per model is required");
    const auto& first = *models_.front();
    for (std::size_t m = 0; m < models_.size(); ++m) {
        const auto& model = *models_[m];
        if (!(model.schedule() == first.schedule()) || model.vocab() != first.vocab())
            throw CompatibilityError("merged models must share one schedule and vocabulary");
        if (!std::equal(model.codebook().begin(), model.codebook().end(), first.codebook().begin(),
                        first.codebook().end()))
            throw CompatibilityError("merged models must share one tokenizer codebook");
        if (static_cast<int>(label_maps_[m].size()) != model.n_classes())
            throw ShapeError("label map size differs from the model's class count");
        labels_.insert(labels_.end(), label_maps_[m].begin(), label_maps_[m].end());
    }
    std::sort(labels_.begin(), labels_.end());
    if (std::adjacent_find(labels_.begin(), labels_.end()) != labels_.end())
        throw ParameterError("a global label is owned by two models");
}

std::pair<std::size_t, int> MergedClassifier::resolve(int global) const {
    for (std::size_t m = 0; m < label_maps_.size(); ++m) {
        const auto& map = label_maps_[m];
        const auto it = std::find(map.begin(), map.end(), global);
        if (it != map.end()) return {m, static_cast<int>(it - map.begin())};
    }
    throw LabelError("label " + std::to_string(global) + " is not owned by any merged model");
}

std::vector<double> MergedClassifier::score(const PreparedInput& input, std::span<const int> global_labels,
                                            const Tokenizer& tokenizer, const Method& method) const {
    std::vector<double> out(global_labels.size());
    std::vector<std::vector<int>> local(models_.size());
    std::vector<std::vector<std::size_t>> slot(models_.size());
    for (std::size_t i = 0; i < global_labels.size(); ++i) {
        const auto [m, l] = resolve(global_labels[i]);
        local[m].push_back(l);
        slot[m].push_back(i);
    }
    for (std::size_t m = 0; m < models_.size(); ++m) {
        if (local[m].empty()) continue;
        const auto s = score_labels(input, local[m], *models_[m], tokenizer, method);
        for (std::size_t j = 0; j < s.size(); ++j) out[slot[m][j]] = s[j] + offsets_[m];
    }
    return out;
}

ScoreFunction MergedClassifier::scorer(const PreparedInput& input, const Tokenizer& tokenizer) const {
    return [this, &input, &tokenizer](const Method& m, std::span<const int> labels) {
        return score(input, labels, tokenizer, m);
    };
}

Classification merged_classify(const PreparedInput& input, const MergedClassifier& merged, const Tokenizer& tokenizer,
                               const Method& method) {
    method.validate(merged.model(0).schedule().num_scales());
    return exhaustive_argmax(merged.labels(), method, merged.scorer(input, tokenizer));
}

Classification merged_classify(const Image& image, const MergedClassifier& merged, const Tokenizer& tokenizer,
                               const Method& method) {
    return merged_classify(prepare_input(image, tokenizer), merged, tokenizer, method);
}

std::vector<NextScaleModel> train_task_models(std::span<const LabeledTokens> data, const TaskSplit& split,
                                              const NextScaleConfig& model_cfg, std::span<const double> codebook,
                                              const TrainConfig& train_cfg, const CCAConfig& cca_cfg,
                                              const std::function<void(int, std::span<const int>)>& on_batch) {
    split.validate();
    std::vector<NextScaleModel> out;
    for (std::size_t t = 0; t < split.tasks.size(); ++t) {
        const auto& task = split.tasks[t];
        std::vector<LabeledTokens> local;
        for (const auto& ex : data) {
            const auto it = std::find(task.begin(), task.end(), ex.label);
            if (it != task.end()) local.push_back({ex.tokens, static_cast<int>(it - task.begin())});
        }
        if (local.empty()) throw DataError("task " + std::to_string(t + 1) + " has no training examples");

        TrainHooks hooks;
        if (on_batch)
            hooks.on_batch = [&, t](std::span<const int> labels) {
                std::vector<int> global;
                for (int l : labels) global.push_back(task[static_cast<std::size_t>(l)]);
                on_batch(static_cast<int>(t), global);
            };
        NextScaleConfig cfg = model_cfg;
        cfg.n_classes = static_cast<int>(task.size());
        cfg.seed = mix_seed(model_cfg.seed, 100 + t);
        auto model = train_mle(local, NextScaleModel(cfg, codebook), train_cfg, hooks);
        if (cca_cfg.epochs > 0 && cfg.n_classes >= 2) model = finetune_cca(local, model, cca_cfg, hooks);
        out.push_back(std::move(model));
    }
    return out;
}

MergedClassifier merge_task_models(std::vector<NextScaleModel> models, const TaskSplit& split) {
    if (models.size() != split.tasks.size()) throw ShapeError("one model per task is required");
    std::vector<std::shared_ptr<const NextScaleModel>> shared;
    for (auto& m : models) shared.push_back(std::make_shared<const NextScaleModel>(std::move(m)));
    return MergedClassifier(std::move(shared), split.tasks);
}

void BaselineConfig::validate() const {
    if (epochs_per_task < 0 || batch_size < 1 || channels < 1) throw ConfigError("invalid baseline shape");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
}

nlohmann::json BaselineConfig::to_json() const {
    return {{"epochs_per_task", epochs_per_task}, {"batch_size", batch_size}, {"learning_rate", learning_rate},
            {"channels", channels}, {"seed", seed}};
}

BaselineConfig BaselineConfig::from_json(const nlohmann::json& j) {
    BaselineConfig c;
    c.epochs_per_task = j.value("epochs_per_task", c.epochs_per_task);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.channels = j.value("channels", c.channels);
    c.seed = j.value("seed", c.seed);
    return c;
}

BaselineClassifier::BaselineClassifier(int image_channels, int height, int width, int n_classes, int channels,
                                       std::uint64_t seed)
    : image_channels_(image_channels), height_(height), width_(width), n_classes_(n_classes), channels_(channels),
      seed_(seed) {
    if (n_classes < 1 || channels < 1 || height < 4 || width < 4) throw ConfigError("invalid baseline shape");
    nn::Rng rng(seed);
    c1_ = nn::Conv2d(image_channels, channels, 3, 1, 1, rng);
    c2_ = nn::Conv2d(channels, 2 * channels, 4, 2, 1, rng);
    c3_ = nn::Conv2d(2 * channels, 2 * channels, 4, 2, 1, rng);
    head_ = nn::Linear(2 * channels * (height / 4) * (width / 4), n_classes, rng, 0.01);
}

nn::Tensor BaselineClassifier::logits(std::span<const Image> images) const {
    std::vector<double> v;
    for (const auto& im : images) {
        if (im.channels != image_channels_ || im.height != height_ || im.width != width_)
            throw ShapeError("baseline input has the wrong size");
        v.insert(v.end(), im.pixels.begin(), im.pixels.end());
    }
    const int n = static_cast<int>(images.size());
    auto h = nn::Tensor::from({n, image_channels_, height_, width_}, std::move(v));
    h = nn::gelu(c1_(h));
    h = nn::gelu(c2_(h));
    h = nn::gelu(c3_(h));
    const int flat = h.numel() / n;
    return head_(nn::reshape(h, {n, flat}));
}

int BaselineClassifier::predict(const Image& image) const {
    nn::NoGradGuard no_grad;
    const auto l = logits(std::span(&image, 1));
    const auto d = l.data();
    return static_cast<int>(std::max_element(d.begin(), d.end()) - d.begin());
}

void BaselineClassifier::train(std::span<const Image> images, std::span<const int> labels, const BaselineConfig& cfg,
                               nn::Rng& rng) {
    cfg.validate();
    if (images.empty()) throw DataError("baseline training set is empty");
    nn::Adam opt(params(), cfg.learning_rate);
    std::vector<std::size_t> order(images.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (int e = 0; e < cfg.epochs_per_task; ++e) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(cfg.batch_size)) {
            std::vector<Image> batch;
            std::vector<int> targets;
            for (std::size_t i = s; i < std::min(order.size(), s + static_cast<std::size_t>(cfg.batch_size)); ++i) {
                batch.push_back(images[order[i]]);
                targets.push_back(labels[order[i]]);
            }
            opt.zero_grad();
            const auto loss = nn::scale(nn::mean(nn::log_softmax_gather(logits(batch), targets)), -1.0);
            loss.backward();
            opt.step();
        }
    }
}

nn::ParamRefs BaselineClassifier::params() {
    nn::ParamRefs refs;
    c1_.collect(refs, "conv1");
    c2_.collect(refs, "conv2");
    c3_.collect(refs, "conv3");
    head_.collect(refs, "head");
    return refs;
}

void BaselineClassifier::save(const std::filesystem::path& path) const {
    BaselineClassifier copy = *this;
    const nlohmann::json meta = {{"kind", "baseline"},       {"image_channels", image_channels_},
                                 {"height", height_},        {"width", width_},
                                 {"n_classes", n_classes_},  {"channels", channels_},
                                 {"seed", seed_}};
    write_checkpoint(path, kBaselineMagic, meta, copy.params());
}

BaselineClassifier BaselineClassifier::load(const std::filesystem::path& path) {
    const auto ckpt = read_checkpoint(path, kBaselineMagic);
    const auto& m = ckpt.metadata;
    BaselineClassifier b(m.at("image_channels").get<int>(), m.at("height").get<int>(), m.at("width").get<int>(),
                         m.at("n_classes").get<int>(), m.at("channels").get<int>(), m.at("seed").get<std::uint64_t>());
    load_params(ckpt, b.params());
    return b;
}

BaselineClassifier train_baseline_sequential(const Dataset& data, const TaskSplit& split, const BaselineConfig& cfg,
                                             const std::function<void(int, const BaselineClassifier&)>& after_task) {
    cfg.validate();
    split.validate();
    if (data.images.empty()) throw DataError("baseline training set is empty");
    int n_classes = data.n_classes();
    for (const auto& t : split.tasks) n_classes = std::max(n_classes, *std::max_element(t.begin(), t.end()) + 1);
    const auto& im0 = data.images.front();
    BaselineClassifier model(im0.channels, im0.height, im0.width, n_classes, cfg.channels, cfg.seed);
    nn::Rng rng(mix_seed(cfg.seed, 3));
    for (std::size_t t = 0; t < split.tasks.size(); ++t) {
        const auto task_data = data.filter(split.tasks[t], false);
        if (task_data.images.empty()) throw DataError("task " + std::to_string(t + 1) + " has no training examples");
        model.train(task_data.images, task_data.labels, cfg, rng);
        if (after_task) after_task(static_cast<int>(t), model);
    }
    return model;
}

nlohmann::json IncrementalResult::to_json() const {
    return {{"setting", setting}, {"task_accuracy", task_accuracy}, {"average", average}};
}

std::string IncrementalResult::csv_rows() const {
    std::ostringstream os;
    for (std::size_t t = 0; t < task_accuracy.size(); ++t)
        os << setting << ",task" << t + 1 << "," << task_accuracy[t] << "\n";
    os << setting << ",avg," << average << "\n";
    return os.str();
}

IncrementalResult evaluate_incremental(const std::string& setting, const std::function<int(std::size_t)>& predict,
                                       std::span<const int> labels, const TaskSplit& split) {
    split.validate();
    std::vector<double> correct(split.tasks.size(), 0.0), count(split.tasks.size(), 0.0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int t = split.task_of(labels[i]);
        if (t < 0) throw LabelError("test label " + std::to_string(labels[i]) + " belongs to no task");
        count[static_cast<std::size_t>(t)] += 1.0;
        if (predict(i) == labels[i]) correct[static_cast<std::size_t>(t)] += 1.0;
    }
    IncrementalResult r;
    r.setting = setting;
    for (std::size_t t = 0; t < split.tasks.size(); ++t) {
        if (count[t] == 0.0) throw DataError("task " + std::to_string(t + 1) + " has no test examples");
        r.task_accuracy.push_back(correct[t] / count[t]);
    }
    r.average = std::accumulate(r.task_accuracy.begin(), r.task_accuracy.end(), 0.0) / static_cast<double>(r.task_accuracy.size());
    return r;
}

}  // namespace avarc
