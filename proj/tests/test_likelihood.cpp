#include <doctest.h>

#include <cmath>
#include <random>

#include "avarc/error.hpp"
#include "avarc/likelihood.hpp"
#include "avarc/training.hpp"
#include "support.hpp"

using namespace avarc;
using namespace avarc::testing;

TEST_CASE("full likelihood matches the loop-based reference") {
    const auto model = tiny_model();
    const ReferenceModel ref(model);
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const auto m = random_map(model.schedule(), 3, rng);
        for (int y = 0; y < 2; ++y) {
            const auto got = log_likelihood_full(m, y, model).total;
            CHECK(close_rel(got, ref.log_likelihood(m, y), 1e-9));
        }
    }
}

TEST_CASE("reference agrees on a deeper schedule and wider vocab") {
    const auto model = tiny_model(3, 5, ScaleSchedule::square({1, 2, 3}), 11);
    const ReferenceModel ref(model);
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 5; ++trial) {
        const auto m = random_map(model.schedule(), 5, rng);
        CHECK(close_rel(log_likelihood_full(m, 2, model).total, ref.log_likelihood(m, 2), 1e-9));
    }
}

TEST_CASE("probabilities of every token map sum to one") {
    const auto model = tiny_model();
    for (int y = 0; y < 2; ++y) {
        double total = 0.0;
        for (long i = 0; i < 243; ++i) total += std::exp(log_likelihood_full(map_from_index(model.schedule(), 3, i), y, model).total);
        CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("predictive distributions are normalized at every position") {
    const auto model = tiny_model(2, 5, ScaleSchedule::square({1, 2, 3}));
    const ReferenceModel ref(model);
    std::mt19937_64 rng(8);
    const auto m = random_map(model.schedule(), 5, rng);
    for (int k = 1; k <= 3; ++k)
        for (const auto& dist : ref.scale_distributions(m, 1, k)) {
            double z = 0.0;
            for (double v : dist) z += std::exp(v);
            CHECK(z == doctest::Approx(1.0).epsilon(1e-12));
        }
    // The model's own factors agree with the reference distributions.
    const auto grids = token_log_probs(m, 1, model);
    for (int k = 1; k <= 3; ++k) {
        const auto lp = ref.scale_log_probs(m, 1, k);
        for (std::size_t i = 0; i < lp.size(); ++i)
            CHECK(close_rel(grids.grids[static_cast<std::size_t>(k - 1)][i], lp[i], 1e-9));
    }
}

TEST_CASE("changing a token never changes factors of coarser scales") {
    const auto model = tiny_model(2, 5, ScaleSchedule::square({1, 2, 3, 4}));
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 10; ++trial) {
        const auto m = random_map(model.schedule(), 5, rng);
        const auto base = token_log_probs(m, 0, model);
        const int k = 1 + trial % 3;
        auto changed = m;
        auto& grid = changed.maps[static_cast<std::size_t>(k)];
        grid[static_cast<std::size_t>(trial) % grid.size()] = (grid[static_cast<std::size_t>(trial) % grid.size()] + 1) % 5;
        const auto after = token_log_probs(changed, 0, model);
        for (int c = 0; c < k; ++c) CHECK(after.grids[static_cast<std::size_t>(c)] == base.grids[static_cast<std::size_t>(c)]);
        // Within scale k only the changed position's own factor may move.
        const auto& a = after.grids[static_cast<std::size_t>(k)];
        const auto& b = base.grids[static_cast<std::size_t>(k)];
        int diffs = 0;
        for (std::size_t i = 0; i < a.size(); ++i) diffs += a[i] != b[i];
        CHECK(diffs <= 1);
    }
}

TEST_CASE("token log-probs: shape, sign, and the zero-head uniform start") {
    auto cfg = tiny_config(2, 7, ScaleSchedule::reference());
    cfg.zero_head = true;
    cfg.width = 8;
    cfg.depth = 1;
    const NextScaleModel model(cfg, random_codebook(7, 4, 1));
    std::mt19937_64 rng(1);
    const auto m = random_map(model.schedule(), 7, rng);
    const auto g = token_log_probs(m, 1, model);
    CHECK(g.count() == 680);
    for (const auto& grid : g.grids)
        for (double v : grid) CHECK(v == doctest::Approx(-std::log(7.0)).epsilon(1e-12));
    CHECK(token_log_probs(m, 1, model, 5).count() == 55);
    CHECK(model.schedule().prefix_tokens(5) == 55);
}

TEST_CASE("partial likelihood boundaries and errors") {
    const auto model = tiny_model(2, 5, ScaleSchedule::square({1, 2, 3}));
    std::mt19937_64 rng(5);
    const auto m = random_map(model.schedule(), 5, rng);
    const auto full = log_likelihood_full(m, 1, model);
    const auto part = log_likelihood_partial(m, 1, model, 3);
    CHECK(full.total == part.total);
    double s = 0.0;
    for (const auto& g : full.per_token.grids)
        for (double v : g) {
            s += v;
            CHECK(v <= 0.0);
        }
    CHECK(close_rel(full.total, s, 1e-12));
    CHECK(log_likelihood_partial(m, 1, model, 1).per_token.count() == 1);
    CHECK_THROWS_AS(log_likelihood_partial(m, 1, model, 0), ParameterError);
    CHECK_THROWS_AS(log_likelihood_partial(m, 1, model, 4), ParameterError);
    // Token counts grow with K'.
    for (int k = 1; k < 3; ++k) CHECK(model.schedule().prefix_tokens(k) < model.schedule().prefix_tokens(k + 1));
}

TEST_CASE("label and schedule validation") {
    const auto model = tiny_model();
    std::mt19937_64 rng(2);
    const auto m = random_map(model.schedule(), 3, rng);
    CHECK_THROWS_AS(log_likelihood_full(m, 2, model), CapabilityError);  // null label before dropout training
    CHECK_THROWS_AS(log_likelihood_full(m, 3, model), LabelError);
    CHECK_THROWS_AS(log_likelihood_full(m, -1, model), LabelError);
    CHECK_THROWS_AS(unconditional_log_probs(m, model), CapabilityError);
    const auto other = random_map(ScaleSchedule::square({1, 3}), 3, rng);
    CHECK_THROWS_AS(log_likelihood_full(other, 0, model), ShapeError);
    auto bad = m;
    bad.maps[1][0] = 3;
    CHECK_THROWS_AS(log_likelihood_full(bad, 0, model), InvalidTokenError);
}

TEST_CASE("batched scores equal single-sequence likelihoods") {
    const auto model = tiny_model(7, 5, ScaleSchedule::square({1, 2, 3}));
    std::mt19937_64 rng(6);
    const auto m = random_map(model.schedule(), 5, rng);
    const std::vector<int> labels{6, 0, 3, 1, 5, 2, 4};
    for (int kp = 1; kp <= 3; ++kp) {
        const auto batched = partial_scores(m, labels, model, kp, 3);
        for (std::size_t i = 0; i < labels.size(); ++i)
            CHECK(close_rel(batched[i], log_likelihood_partial(m, labels[i], model, kp).total, 1e-12));
    }
}

TEST_CASE("log_sum_exp") {
    const std::vector<double> v{-1000.0, -1000.0};
    CHECK(log_sum_exp(v) == doctest::Approx(-1000.0 + std::log(2.0)));
    CHECK(std::isinf(log_sum_exp({})));
    const double inf = std::numeric_limits<double>::infinity();
    const std::vector<double> w{-inf, -inf};
    CHECK(log_sum_exp(w) == -inf);
    const std::vector<double> u{0.5, -inf};
    CHECK(log_sum_exp(u) == 0.5);
}

TEST_CASE("unconditional likelihood approximates the mixture of two classes") {
    // Class 0 favours token 0 in the first scale, class 1 favours token 2.
    auto cfg = tiny_config(2, 3, ScaleSchedule::square({1, 2}), 21);
    cfg.init_std = 0.1;
    cfg.zero_head = true;
    const NextScaleModel init(cfg, random_codebook(3, 4, 22));
    std::vector<LabeledTokens> data;
    std::mt19937_64 rng(5);
    std::bernoulli_distribution flip(0.25);
    for (int i = 0; i < 160; ++i) {
        const int y = i % 2;
        MultiScaleTokenMap m(cfg.schedule);
        m.maps[0][0] = y == 0 ? 0 : 2;
        if (flip(rng)) m.maps[0][0] = 1;
        for (int& t : m.maps[1]) t = flip(rng) ? 1 : (y == 0 ? 0 : 2);
        data.push_back({m, y});
    }
    TrainConfig tc;
    tc.epochs = 60;
    tc.batch_size = 16;
    tc.learning_rate = 1e-2;
    tc.warmup_steps = 10;
    tc.label_dropout = 0.5;
    tc.seed = 3;
    const auto model = train_mle(data, init, tc);
    REQUIRE(model.has_unconditional());
    double worst = 0.0;
    for (long i = 0; i < 243; ++i) {
        const auto m = map_from_index(cfg.schedule, 3, i);
        const double pu = std::exp(log_likelihood_full(m, model.null_label(), model).total);
        const double mix = 0.5 * (std::exp(log_likelihood_full(m, 0, model).total) + std::exp(log_likelihood_full(m, 1, model).total));
        worst = std::max(worst, std::abs(pu - mix));
    }
    CHECK(worst < 0.1);
    const auto g = unconditional_log_probs(data[0].tokens, model);
    CHECK(g.count() == 5);
}
