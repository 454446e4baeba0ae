#include <doctest.h>

#include <random>
#include <set>

#include "avarc/error.hpp"
#include "avarc/incremental.hpp"
#include "support.hpp"

using namespace avarc;
using namespace avarc::testing;

namespace {

Tokenizer small_tokenizer(int vocab) {
    TokenizerConfig tc;
    tc.vocab = vocab;
    tc.feat_channels = 4;
    tc.schedule = ScaleSchedule::square({1, 2, 3});
    tc.image_height = tc.image_width = 12;
    return Tokenizer(tc);
}

PreparedInput random_input(const Tokenizer& tok, std::mt19937_64& rng) {
    FeatureMap f(3, 3, 4);
    std::normal_distribution<double> d(0.0, 0.5);
    for (double& v : f.values) v = d(rng);
    return prepare_input(f, tok);
}

}  // namespace

TEST_CASE("task splits") {
    const auto h = TaskSplit::halves(10);
    REQUIRE(h.tasks.size() == 2);
    CHECK(h.tasks[0] == std::vector<int>{0, 1, 2, 3, 4});
    CHECK(h.tasks[1] == std::vector<int>{5, 6, 7, 8, 9});
    CHECK_NOTHROW(h.validate(10));
    CHECK(h.task_of(7) == 1);
    CHECK(h.task_of(12) == -1);
    CHECK(TaskSplit::from_json(h.to_json()).tasks == h.tasks);
    const TaskSplit overlap{{{0, 1}, {1, 2}}};
    const TaskSplit outside{{{0, 1}, {3}}};
    const TaskSplit empty_task{{{0}, {}}};
    CHECK_THROWS_AS(overlap.validate(), ConfigError);
    CHECK_THROWS_AS(outside.validate(4), ConfigError);
    CHECK_THROWS_AS(empty_task.validate(), DataError);
    CHECK_THROWS_AS(TaskSplit::from_json(nlohmann::json::parse(R"({"tasks": [[0]], "extra": 1})")), ConfigError);
}

TEST_CASE("merged scores equal each owner's likelihood") {
    const auto tok = small_tokenizer(5);
    auto c1 = tiny_config(3, 5, ScaleSchedule::square({1, 2, 3}), 1);
    auto c2 = tiny_config(2, 5, ScaleSchedule::square({1, 2, 3}), 2);
    auto m1 = std::make_shared<const NextScaleModel>(c1, tok.codebook());
    auto m2 = std::make_shared<const NextScaleModel>(c2, tok.codebook());
    const MergedClassifier merged({m1, m2}, {{4, 0, 2}, {1, 3}});
    CHECK(merged.labels() == std::vector<int>{0, 1, 2, 3, 4});
    CHECK(merged.resolve(2) == std::pair<std::size_t, int>{0, 2});
    CHECK(merged.resolve(3) == std::pair<std::size_t, int>{1, 1});
    CHECK_THROWS_AS(merged.resolve(9), LabelError);

    std::mt19937_64 rng(3);
    for (int t = 0; t < 5; ++t) {
        const auto in = random_input(tok, rng);
        const auto s = merged.score(in, merged.labels(), tok, Method::full());
        const std::vector<std::pair<const NextScaleModel*, int>> owner{{m1.get(), 1}, {m2.get(), 0}, {m1.get(), 2},
                                                                       {m2.get(), 1}, {m1.get(), 0}};
        for (int g = 0; g < 5; ++g)
            CHECK(close_rel(s[static_cast<std::size_t>(g)],
                            log_likelihood_full(in.tokens, owner[static_cast<std::size_t>(g)].second, *owner[static_cast<std::size_t>(g)].first).total,
                            1e-12));
        const auto pred = merged_classify(in, merged, tok, Method::full()).prediction;
        CHECK(pred == static_cast<int>(std::max_element(s.begin(), s.end()) - s.begin()));
    }

    SUBCASE("single-model merge equals exhaustive classification") {
        const MergedClassifier one({m1}, {{0, 1, 2}});
        for (int t = 0; t < 5; ++t) {
            const auto in = random_input(tok, rng);
            CHECK(merged_classify(in, one, tok, Method::full()).prediction ==
                  classify_exhaustive(in, all_labels(3), *m1, tok, Method::full()).prediction);
        }
    }
    SUBCASE("offsets shift one model's scores") {
        const MergedClassifier shifted({m1, m2}, {{4, 0, 2}, {1, 3}}, {0.0, 1e6});
        const auto in = random_input(tok, rng);
        const int pred = merged_classify(in, shifted, tok, Method::full()).prediction;
        CHECK((pred == 1 || pred == 3));
    }
    SUBCASE("incompatible models") {
        auto c3 = tiny_config(2, 5, ScaleSchedule::square({1, 3}), 3);
        auto m3 = std::make_shared<const NextScaleModel>(c3, tok.codebook());
        CHECK_THROWS_AS(MergedClassifier({m1, m3}, {{0, 1, 2}, {3, 4}}), CompatibilityError);
        auto m4 = std::make_shared<const NextScaleModel>(c2, random_codebook(5, 4, 77));
        CHECK_THROWS_AS(MergedClassifier({m1, m4}, {{0, 1, 2}, {3, 4}}), CompatibilityError);
        CHECK_THROWS_AS(MergedClassifier({m1, m2}, {{0, 1, 2}, {2, 4}}), ParameterError);
    }
}

TEST_CASE("per-task training only sees its own labels") {
    const auto tok = small_tokenizer(5);
    std::mt19937_64 rng(4);
    std::vector<LabeledTokens> data;
    for (int i = 0; i < 40; ++i) data.push_back({random_map(ScaleSchedule::square({1, 2, 3}), 5, rng), i % 4});
    const TaskSplit split{{{0, 2}, {1, 3}}};
    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 4;
    CCAConfig cc;
    cc.epochs = 1;
    cc.batch_size = 4;
    std::vector<std::set<int>> seen(2);
    const auto models = train_task_models(data, split, tiny_config(2, 5, ScaleSchedule::square({1, 2, 3})), tok.codebook(),
                                          tc, cc, [&](int t, std::span<const int> labels) {
                                              seen[static_cast<std::size_t>(t)].insert(labels.begin(), labels.end());
                                          });
    REQUIRE(models.size() == 2);
    CHECK(models[0].n_classes() == 2);
    CHECK(seen[0] == std::set<int>{0, 2});
    CHECK(seen[1] == std::set<int>{1, 3});

    const auto single = train_task_models(data, TaskSplit{{{0, 1, 2, 3}}}, tiny_config(4, 5, ScaleSchedule::square({1, 2, 3})),
                                          tok.codebook(), tc, CCAConfig{0.02, 1.0, 0, 4, 1e-4, 0});
    REQUIRE(single.size() == 1);
    CHECK(single[0].n_classes() == 4);

    std::vector<LabeledTokens> only_zero(data.begin(), data.begin() + 1);
    CHECK_THROWS_AS(train_task_models(only_zero, split, tiny_config(2, 5, ScaleSchedule::square({1, 2, 3})), tok.codebook(), tc, cc), DataError);
}

TEST_CASE("incremental evaluation arithmetic") {
    const TaskSplit split{{{0, 1}, {2, 3}}};
    const std::vector<int> labels{0, 1, 2, 3, 0, 2, 3};
    const auto perfect = evaluate_incremental("p", [&](std::size_t i) { return labels[i]; }, labels, split);
    CHECK(perfect.task_accuracy == std::vector<double>{1.0, 1.0});
    CHECK(perfect.average == 1.0);
    const auto late = evaluate_incremental("l", [](std::size_t) { return 3; }, labels, split);
    CHECK(late.task_accuracy[0] == 0.0);
    CHECK(late.task_accuracy[1] == doctest::Approx(2.0 / 4.0));
    CHECK(std::abs(late.average - 0.5 * (late.task_accuracy[0] + late.task_accuracy[1])) < 1e-12);
    CHECK(late.csv_rows() == "l,task1,0\nl,task2,0.5\nl,avg,0.25\n");
    const std::vector<int> stray{7};
    CHECK_THROWS_AS(evaluate_incremental("x", [](std::size_t) { return 0; }, stray, split), LabelError);
}

TEST_CASE("sequential baseline") {
    // Class c lights up quadrant c.
    Dataset data;
    data.class_names = {"0", "1", "2", "3"};
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> noise(0.0, 0.2);
    for (int i = 0; i < 64; ++i) {
        Image im(1, 8, 8);
        const int c = i % 4;
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) im.at(0, y, x) = noise(rng) + ((y / 4) * 2 + x / 4 == c ? 0.8 : 0.0);
        data.images.push_back(im);
        data.labels.push_back(c);
    }
    BaselineConfig cfg;
    cfg.epochs_per_task = 15;
    cfg.batch_size = 8;
    cfg.learning_rate = 1e-2;
    cfg.channels = 4;
    std::vector<double> after_first;
    const TaskSplit split{{{0, 1}, {2, 3}}};
    const auto model = train_baseline_sequential(data, split, cfg, [&](int t, const BaselineClassifier& b) {
        const auto r = evaluate_incremental("b", [&](std::size_t i) { return b.predict(data.images[i]); }, data.labels, split);
        if (t == 0) after_first = r.task_accuracy;
    });
    CHECK(model.n_classes() == 4);
    CHECK(after_first[0] > 0.9);
    const auto final = evaluate_incremental("b", [&](std::size_t i) { return model.predict(data.images[i]); }, data.labels, split);
    CHECK(final.task_accuracy[1] > 0.9);
    CHECK(final.task_accuracy[0] < after_first[0]);

    const auto path = std::filesystem::temp_directory_path() / "avarc_baseline_test.ckpt";
    model.save(path);
    const auto back = BaselineClassifier::load(path);
    for (std::size_t i = 0; i < 8; ++i) CHECK(back.predict(data.images[i]) == model.predict(data.images[i]));
    std::filesystem::remove(path);
}
