#pragma once

// Class-incremental learning: independently trained per-task generative
// models merged at the likelihood level, and a discriminative baseline
// trained task after task without rehearsal.

#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "avarc/classifier.hpp"
#include "avarc/data.hpp"
#include "avarc/nn/layers.hpp"
#include "avarc/training.hpp"
#include "json.hpp"

namespace avarc {

struct TaskSplit {
    std::vector<std::vector<int>> tasks;

    /// Tasks non-empty and pairwise disjoint; when n_classes > 0 their union
    /// must be exactly [0, n_classes).
    void validate(int n_classes = 0) const;
    /// Index of the task owning `label`, -1 if none.
    int task_of(int label) const;
    nlohmann::json to_json() const;
    /// {"tasks": [[labels...], ...]}
    static TaskSplit from_json(const nlohmann::json& j);
    static TaskSplit halves(int n_classes);
};

/// Global labels owned by several class-conditional models that share one
/// tokenizer. Each model scores its own labels; an optional additive offset
/// per model shifts all of its scores.
class MergedClassifier {
public:
    /// label_maps[m][local] = global label of model m's local class.
    MergedClassifier(std::vector<std::shared_ptr<const NextScaleModel>> models,
                     std::vector<std::vector<int>> label_maps, std::vector<double> offsets = {});

    /// Sorted global labels.
    const std::vector<int>& labels() const { return labels_; }
    std::size_t num_models() const { return models_.size(); }
    const NextScaleModel& model(std::size_t m) const { return *models_[m]; }
    /// (model index, local label) of a global label; LabelError if unknown.
    std::pair<std::size_t, int> resolve(int global) const;

    std::vector<double> score(const PreparedInput& input, std::span<const int> global_labels,
                              const Tokenizer& tokenizer, const Method& method) const;
    ScoreFunction scorer(const PreparedInput& input, const Tokenizer& tokenizer) const;

private:
    std::vector<std::shared_ptr<const NextScaleModel>> models_;
    std::vector<std::vector<int>> label_maps_;
    std::vector<double> offsets_;
    std::vector<int> labels_;
};

/// Exhaustive argmax over every global label of the merge.
Classification merged_classify(const PreparedInput& input, const MergedClassifier& merged, const Tokenizer& tokenizer,
                               const Method& method);
Classification merged_classify(const Image& image, const MergedClassifier& merged, const Tokenizer& tokenizer,
                               const Method& method);

/// One model per task, trained from scratch (MLE then CCA) on that task's
/// examples relabelled to local ids. `on_batch(task, global_labels)` sees every
/// training batch.
std::vector<NextScaleModel> train_task_models(
    std::span<const LabeledTokens> data, const TaskSplit& split, const NextScaleConfig& model_cfg,
    std::span<const double> codebook, const TrainConfig& train_cfg, const CCAConfig& cca_cfg,
    const std::function<void(int, std::span<const int>)>& on_batch = {});

MergedClassifier merge_task_models(std::vector<NextScaleModel> models, const TaskSplit& split);

struct BaselineConfig {
    int epochs_per_task = 2;
    int batch_size = 32;
    double learning_rate = 1e-3;
    int channels = 16;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static BaselineConfig from_json(const nlohmann::json& j);
};

/// Small CNN with a head over every label.
class BaselineClassifier {
public:
    BaselineClassifier(int image_channels, int height, int width, int n_classes, int channels, std::uint64_t seed);

    int n_classes() const { return n_classes_; }
    nn::Tensor logits(std::span<const Image> images) const;
    int predict(const Image& image) const;
    /// Plain supervised epochs on (images, labels).
    void train(std::span<const Image> images, std::span<const int> labels, const BaselineConfig& cfg, nn::Rng& rng);

    nn::ParamRefs params();
    void save(const std::filesystem::path& path) const;
    static BaselineClassifier load(const std::filesystem::path& path);

private:
    int image_channels_, height_, width_, n_classes_, channels_;
    std::uint64_t seed_;
    nn::Conv2d c1_, c2_, c3_;
    nn::Linear head_;
};

/// Trains on task 1, then continues on task 2, ... with no rehearsal.
/// `after_task(t, model)` runs after each task.
BaselineClassifier train_baseline_sequential(const Dataset& data, const TaskSplit& split, const BaselineConfig& cfg,
                                             const std::function<void(int, const BaselineClassifier&)>& after_task = {});

struct IncrementalResult {
    std::string setting;
    std::vector<double> task_accuracy;
    double average = 0.0;

    nlohmann::json to_json() const;
    /// "setting,task,accuracy" rows (task1.., avg), no header.
    std::string csv_rows() const;
};

/// Per-task top-1 accuracy of `predict` on the examples of each task, plus
/// their unweighted mean.
IncrementalResult evaluate_incremental(const std::string& setting, const std::function<int(std::size_t)>& predict,
                                       std::span<const int> labels, const TaskSplit& split);

}  // namespace avarc
