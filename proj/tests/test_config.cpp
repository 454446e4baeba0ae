#include <doctest.h>

#include "avarc/error.hpp"
#include "run_config.hpp"

using namespace avarc;
using namespace avarc::cli;
using nlohmann::json;

TEST_CASE("run config defaults round-trip") {
    const auto c = RunConfig::from_json(json::object());
    CHECK(c.tokenizer.vocab == 512);
    CHECK(c.tokenizer.schedule == ScaleSchedule::desk());
    CHECK(c.training.label_dropout == 0.1);
    CHECK(c.cca.beta == 0.02);
    CHECK(c.cca.lambda == 1.0);
    CHECK_FALSE(c.plan.has_value());
    const auto again = RunConfig::from_json(c.to_json());
    CHECK(again.to_json() == c.to_json());
    CHECK(again.hash() == c.hash());
}

TEST_CASE("unknown keys are rejected at every depth") {
    CHECK_THROWS_AS(RunConfig::from_json(json{{"epochs", 3}}), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json(json{{"training", {{"epoch", 3}}}}), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json(json{{"paths", {{"out", "x"}}}}), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json(json{{"training", {{"seed", 3}}}}), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json(json{{"training", {{"epochs", "ten"}}}}), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json(json{{"training", 5}}), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json(json{{"data", {{"format", "csv"}}}}), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json(json{{"model", {{"width", 30}, {"heads", 4}}}}), ConfigError);
}

TEST_CASE("overrides, seeds and plans") {
    json doc = json::object();
    apply_override(doc, "training.epochs=3");
    apply_override(doc, "paths.work_dir=/tmp/run");
    apply_override(doc, "evaluate.noise_sigmas=[0, 0.2]");
    CHECK(doc["training"]["epochs"] == 3);
    CHECK(doc["paths"]["work_dir"] == "/tmp/run");
    CHECK_THROWS_AS(apply_override(doc, "novalue"), ConfigError);
    CHECK_THROWS_AS(apply_override(doc, "training.epochs.x=1"), ConfigError);

    const auto a = load_run_config("", {"training.epochs=3"}, 11);
    const auto b = load_run_config("", {"training.epochs=3"}, 12);
    CHECK(a.seed == 11);
    CHECK(a.training.epochs == 3);
    CHECK(a.training.seed != b.training.seed);
    CHECK(a.tokenizer.seed != a.training.seed);
    CHECK(a.hash() != b.hash());
    CHECK(a.model_config(10).seed == load_run_config("", {}, 11).model_config(10).seed);

    const auto p = load_run_config("", {R"(plan=[{"keep":4,"method":"partial","params":{"k_prime":2}},{"keep":1,"method":"full"}])"}, {});
    REQUIRE(p.plan.has_value());
    CHECK(p.plan->stages.size() == 2);
    CHECK_THROWS_AS(load_run_config("", {R"(plan=[{"keep":1,"method":"partial","params":{"k_prime":9}}])"}, {}),
                    ParameterError);
    CHECK_THROWS_AS(load_run_config("/nonexistent/config.json", {}, {}), ConfigError);
}
