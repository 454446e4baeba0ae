#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "avarc/classifier.hpp"
#include "avarc/error.hpp"
#include "support.hpp"

using namespace avarc;
using namespace avarc::testing;

namespace {

// Deterministic per-method scores from a table: partial K' adds bounded noise to
// the full score, smoothed adds a small constant offset.
ScoreFunction table_scorer(const std::vector<double>& full, std::uint64_t seed, int* calls = nullptr) {
    return [full, seed, calls](const Method& m, std::span<const int> labels) {
        if (calls) ++*calls;
        std::vector<double> out;
        for (int y : labels) {
            double s = full[static_cast<std::size_t>(y)];
            if (m.kind == MethodKind::partial) {
                std::mt19937_64 r(seed * 131 + static_cast<std::uint64_t>(y) * 7 + static_cast<std::uint64_t>(m.k_prime));
                s += std::uniform_real_distribution<double>(-0.5, 0.5)(r);
            } else if (m.kind == MethodKind::smoothed) {
                s += std::log(static_cast<double>(m.smoothing.samples));
            }
            out.push_back(s);
        }
        return out;
    };
}

}  // namespace

TEST_CASE("posterior") {
    const std::vector<double> eq{-3.0, -3.0};
    auto p = posterior(eq);
    CHECK(p[0] == doctest::Approx(0.5));
    CHECK(p[1] == doctest::Approx(0.5));

    const double inf = std::numeric_limits<double>::infinity();
    const std::vector<double> certain{0.0, -inf};
    p = posterior(certain);
    CHECK(p[0] == 1.0);
    CHECK(p[1] == 0.0);

    const std::vector<double> ll{-1.0, -2.0, -3.0}, prior{0.2, 0.3, 0.5};
    p = posterior(ll, prior);
    const double a = 0.2 * std::exp(-1.0), b = 0.3 * std::exp(-2.0), c = 0.5 * std::exp(-3.0);
    CHECK(p[0] == doctest::Approx(a / (a + b + c)).epsilon(1e-12));
    CHECK(p[1] == doctest::Approx(b / (a + b + c)).epsilon(1e-12));
    CHECK(p[2] == doctest::Approx(c / (a + b + c)).epsilon(1e-12));
    CHECK(p[0] + p[1] + p[2] == doctest::Approx(1.0).epsilon(1e-12));

    const std::vector<double> dead{-inf, -inf};
    CHECK_THROWS_AS(posterior(dead), DegenerateInputError);
    const std::vector<double> bad_prior{0.5, 0.6, -0.1};
    CHECK_THROWS_AS(posterior(ll, bad_prior), ParameterError);
    const std::vector<double> short_prior{1.0};
    CHECK_THROWS_AS(posterior(ll, short_prior), ShapeError);

    // Shift invariance.
    const std::vector<double> shifted{99.0, 98.0, 97.0};
    const auto q = posterior(shifted, prior);
    for (int i = 0; i < 3; ++i) CHECK(q[i] == doctest::Approx(p[i]).epsilon(1e-12));
}

TEST_CASE("default plan") {
    const auto big = default_plan(1000);
    REQUIRE(big.stages.size() == 3);
    CHECK(big.stages[0].keep == 10);
    CHECK(big.stages[0].method.kind == MethodKind::partial);
    CHECK(big.stages[0].method.k_prime == 6);
    CHECK(big.stages[1].keep == 3);
    CHECK(big.stages[1].method.kind == MethodKind::full);
    CHECK(big.stages[2].keep == 1);
    CHECK(big.stages[2].method.kind == MethodKind::smoothed);
    CHECK(big.stages[2].method.smoothing.samples == 3);
    CHECK(big.stages[2].method.smoothing.sigma == 0.1);

    const auto two = default_plan(2);
    REQUIRE(two.stages.size() == 1);
    CHECK(two.stages[0].keep == 1);
    CHECK(two.stages[0].method.kind == MethodKind::full);

    const auto ten = default_plan(10, 5);
    CHECK(ten.stages[0].keep == 10);
    CHECK(ten.stages[0].method.k_prime == 3);
    CHECK_NOTHROW(ten.validate(5));
    CHECK_THROWS_AS(default_plan(0), ParameterError);
}

TEST_CASE("plan validation and JSON round trip") {
    StagePlan p{{Stage{5, Method::partial(2)}, Stage{6, Method::full()}, Stage{1, Method::full()}}};
    CHECK_THROWS_AS(p.validate(3), ParameterError);
    StagePlan q{{Stage{5, Method::partial(2)}, Stage{2, Method::full()}}};
    CHECK_THROWS_AS(q.validate(3), ParameterError);
    CHECK_THROWS_AS(StagePlan{}.validate(3), ParameterError);
    CHECK_THROWS_AS(StagePlan::single(Method::partial(4)).validate(3), ParameterError);
    CHECK_THROWS_AS(StagePlan::single(Method::smoothed(0, 0.1)).validate(3), ParameterError);

    const auto plan = default_plan(100);
    const auto j = plan.to_json();
    CHECK(j.is_array());
    CHECK(j[0].at("keep") == 10);
    CHECK(j[0].at("method") == "partial");
    CHECK(StagePlan::from_json(j).to_json() == j);
    auto extra = j;
    extra[0]["weight"] = 2;
    CHECK_THROWS_AS(StagePlan::from_json(extra), ConfigError);
    CHECK_THROWS_AS(StagePlan::from_json(nlohmann::json::parse(R"([{"keep":1,"method":"magic"}])")), ParameterError);
}

TEST_CASE("staged traces nest, clamp, and contain each stage's own argmax") {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> d(0.0, 3.0);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> full(30);
        for (double& v : full) v = d(rng);
        const auto scorer = table_scorer(full, static_cast<std::uint64_t>(trial));
        const StagePlan plan{{Stage{40, Method::partial(2)}, Stage{8, Method::partial(3)}, Stage{3, Method::full()},
                              Stage{1, Method::smoothed(3, 0.1)}}};
        const auto labels = all_labels(30);
        const auto r = run_plan(labels, plan, scorer);
        REQUIRE(r.trace.stages.size() == 4);
        CHECK(r.trace.stages[0].kept.size() == 30);  // clamped
        std::vector<int> pool = labels;
        for (const auto& st : r.trace.stages) {
            CHECK(st.candidates == pool);
            CHECK(st.kept.size() == std::min<std::size_t>(pool.size(), static_cast<std::size_t>(st.keep)));
            for (int k : st.kept) CHECK(std::find(pool.begin(), pool.end(), k) != pool.end());
            const auto own = exhaustive_argmax(st.candidates, st.method, scorer).prediction;
            CHECK(std::find(st.kept.begin(), st.kept.end(), own) != st.kept.end());
            pool = st.kept;
        }
        CHECK(r.prediction == pool.front());
        // Scores come from each stage's own method, never carried over.
        CHECK(r.trace.stages[2].scores == scorer(Method::full(), r.trace.stages[2].candidates));
    }
}

TEST_CASE("single-stage full plan equals exhaustive argmax") {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> coarse(0, 4);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> full(12);
        for (double& v : full) v = coarse(rng);  // frequent ties
        const auto scorer = table_scorer(full, 1);
        const auto labels = all_labels(12);
        CHECK(run_plan(labels, StagePlan::single(Method::full()), scorer).prediction ==
              exhaustive_argmax(labels, Method::full(), scorer).prediction);
    }
}

TEST_CASE("ties go to the smallest label id") {
    const auto scorer = table_scorer({1.0, 2.0, 2.0, 2.0, 0.0}, 0);
    const std::vector<int> labels{3, 1, 4, 2, 0};
    CHECK(exhaustive_argmax(labels, Method::full(), scorer).prediction == 1);
    CHECK(run_plan(labels, StagePlan::single(Method::full()), scorer).prediction == 1);
    const std::vector<int> one{4};
    CHECK(exhaustive_argmax(one, Method::full(), scorer).prediction == 4);
    CHECK_THROWS_AS(exhaustive_argmax({}, Method::full(), scorer), ParameterError);
    const std::vector<int> dup{1, 1};
    CHECK_THROWS_AS(exhaustive_argmax(dup, Method::full(), scorer), ParameterError);
}

TEST_CASE("model-backed classification") {
    const auto model = tiny_model(6, 5, ScaleSchedule::square({1, 2, 3}), 30);
    std::mt19937_64 rng(7);
    TokenizerConfig tc;
    tc.vocab = 5;
    tc.feat_channels = 4;
    tc.schedule = ScaleSchedule::square({1, 2, 3});
    tc.image_height = tc.image_width = 12;
    const Tokenizer tok(tc);
    NextScaleModel m2(model.config(), tok.codebook());
    std::normal_distribution<double> d(0.0, 0.5);
    const auto labels = all_labels(6);
    for (int trial = 0; trial < 10; ++trial) {
        FeatureMap f(3, 3, 4);
        for (double& v : f.values) v = d(rng);
        const auto in = prepare_input(f, tok);
        const auto ex = classify_exhaustive(in, labels, m2, tok, Method::full());
        const auto st = classify_adaptive(in, labels, m2, tok, StagePlan::single(Method::full()));
        CHECK(ex.prediction == st.prediction);
        const auto scores = score_labels(in, labels, m2, tok, Method::full());
        CHECK(ex.prediction == static_cast<int>(std::max_element(scores.begin(), scores.end()) - scores.begin()));
        // Determinism of the full reference plan.
        const auto plan = default_plan(6, 3);
        const auto a = classify_adaptive(in, labels, m2, tok, plan);
        const auto b = classify_adaptive(in, labels, m2, tok, plan);
        CHECK(a.trace.to_json()["stages"][0]["scores"] == b.trace.to_json()["stages"][0]["scores"]);
        CHECK(a.prediction == b.prediction);
        // Smoothing with sigma 0: one sample equals full, S samples add log S.
        const auto s1 = score_labels(in, labels, m2, tok, Method::smoothed(1, 0.0, 9));
        const auto s3 = score_labels(in, labels, m2, tok, Method::smoothed(3, 0.0, 9));
        for (std::size_t i = 0; i < labels.size(); ++i) {
            CHECK(s1[i] == doctest::Approx(scores[i]).epsilon(1e-12));
            CHECK(std::abs(s3[i] - (std::log(3.0) + scores[i])) < 1e-9);
        }
        const auto partial = score_labels(in, labels, m2, tok, Method::partial(3));
        CHECK(partial == scores);
    }
    const std::vector<int> one{2};
    FeatureMap f(3, 3, 4);
    CHECK(classify_exhaustive(prepare_input(f, tok), one, m2, tok, Method::full()).prediction == 2);
    CHECK_THROWS_AS(classify_adaptive(prepare_input(f, tok), labels, m2, tok, StagePlan::single(Method::partial(7))),
                    ParameterError);
}
