#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "avarc/checkpoint.hpp"
#include "avarc/data.hpp"
#include "avarc/error.hpp"
#include "avarc/evaluation.hpp"
#include "avarc/png_io.hpp"
#include "avarc/tokenizer.hpp"
#include "support.hpp"

using namespace avarc;
using namespace avarc::testing;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("avarc_core_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

TokenizerConfig small_tokenizer_config() {
    TokenizerConfig tc;
    tc.vocab = 16;
    tc.feat_channels = 4;
    tc.hidden_channels = 8;
    tc.schedule = ScaleSchedule::square({1, 2, 4});
    tc.image_height = tc.image_width = 8;
    tc.seed = 5;
    return tc;
}

Image blob(int size, int cy, int cx) {
    Image im(1, size, size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) im.at(0, y, x) = std::exp(-((y - cy) * (y - cy) + (x - cx) * (x - cx)) / 4.0);
    return im;
}

void put_u32(std::ofstream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

TEST_CASE("schedule arithmetic") {
    const auto ref = ScaleSchedule::reference();
    CHECK(ref.total_tokens() == 680);
    CHECK(ref.prefix_tokens(5) == 55);
    CHECK(static_cast<double>(ref.prefix_tokens(5)) / ref.total_tokens() == doctest::Approx(55.0 / 680.0));
    const auto desk = ScaleSchedule::desk();
    CHECK(desk.total_tokens() == 88);
    CHECK(desk.num_scales() == 5);
    CHECK(desk.prefix_tokens(3) == 14);
    CHECK(desk.scale_of(0) == 0);
    CHECK(desk.scale_of(5) == 2);
    CHECK(desk.scale_of(87) == 4);
    CHECK(ScaleSchedule::from_json(desk.to_json()) == desk);
    CHECK_THROWS_AS(desk.prefix_tokens(6), ParameterError);
}

TEST_CASE("resampling operators") {
    for (auto [a, b] : std::vector<std::pair<int, int>>{{1, 7}, {2, 7}, {3, 7}, {5, 7}, {7, 3}, {7, 1}, {4, 4}}) {
        const auto op = bilinear_resize_operator(a, a, b, b);
        CHECK(op.rows == b * b);
        CHECK(op.cols == a * a);
        for (int r = 0; r < op.rows; ++r) {
            double s = 0.0;
            for (int c = 0; c < op.cols; ++c) {
                CHECK(op.at(r, c) >= 0.0);
                s += op.at(r, c);
            }
            CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
        }
        if (a == b)
            for (int r = 0; r < op.rows; ++r) CHECK(op.at(r, r) == 1.0);
    }
}

TEST_CASE("tokenizer quantization") {
    const Tokenizer tok(small_tokenizer_config());
    const auto img = blob(8, 3, 4);
    const auto f = tok.encode(img);
    CHECK(f.h == 4);
    CHECK(f.channels == 4);
    const auto a = tok.quantize(f);
    const auto b = tok.quantize(f);
    CHECK(a == b);
    CHECK(a.total_tokens() == 1 + 4 + 16);
    CHECK_NOTHROW(a.validate(16));
    const auto d1 = tok.decode(a), d2 = tok.decode(a);
    CHECK(d1.pixels == d2.pixels);
    for (double v : d1.pixels) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    MultiScaleTokenMap zeros(tok.schedule());
    for (double v : tok.decode(zeros).pixels) CHECK(std::isfinite(v));
    auto bad = a;
    bad.maps[2][0] = 16;
    CHECK_THROWS_AS(tok.decode(bad), InvalidTokenError);

    CHECK(perturb_features(f, 0.0, 3) == f);
    CHECK(perturb_features(f, 0.3, 3) == perturb_features(f, 0.3, 3));
    CHECK_FALSE(perturb_features(f, 0.3, 3) == perturb_features(f, 0.3, 4));
    CHECK_THROWS_AS(perturb_features(f, -1.0, 3), ParameterError);
    CHECK(token_change_fraction(f, 0.0, 3, tok, 1) == 0.0);
    const double frac = token_change_fraction(f, 5.0, 3, tok, 1);
    CHECK(frac >= 0.0);
    CHECK(frac <= 1.0);
    CHECK(frac > 0.0);

    auto one = small_tokenizer_config();
    one.vocab = 1;
    const Tokenizer single(one);
    for (const auto& g : single.quantize(single.encode(img)).maps)
        for (int t : g) CHECK(t == 0);
}

TEST_CASE("tokenizer training overfits one image and is deterministic") {
    auto cfg = small_tokenizer_config();
    cfg.epochs = 400;
    cfg.batch_size = 1;
    cfg.learning_rate = 5e-3;
    const std::vector<Image> imgs{blob(8, 3, 4)};
    std::vector<double> trace1, trace2;
    const auto tok = train_tokenizer(imgs, cfg, [&](const TokenizerTrainStep& s) { trace1.push_back(s.loss); });
    train_tokenizer(imgs, cfg, [&](const TokenizerTrainStep& s) { trace2.push_back(s.loss); });
    CHECK(trace1 == trace2);
    const auto rec = tok.decode(tok.quantize(tok.encode(imgs[0])));
    CHECK(mean_squared_error(rec, imgs[0]) < 0.01);
    CHECK_THROWS_AS(train_tokenizer({}, cfg), DataError);

    const auto dir = scratch("tok");
    tok.save(dir / "t.ckpt", {{"note", "x"}});
    const auto back = Tokenizer::load(dir / "t.ckpt");
    CHECK(back.quantize(back.encode(imgs[0])) == tok.quantize(tok.encode(imgs[0])));
    CHECK(back.config().to_json() == tok.config().to_json());
    CHECK_THROWS_AS(NextScaleModel::load(dir / "t.ckpt"), FormatError);
    fs::remove_all(dir);
}

TEST_CASE("model checkpoints round-trip and reject bad files") {
    const auto dir = scratch("model");
    auto model = tiny_model(3, 5, ScaleSchedule::square({1, 2, 3}), 4);
    round_params_to_float(model.state());
    model.set_has_unconditional(true);
    model.save(dir / "m.ckpt", {{"class_names", {"a", "b", "c"}}});
    const auto back = NextScaleModel::load(dir / "m.ckpt");
    CHECK(back.has_unconditional());
    CHECK(back.config().to_json() == model.config().to_json());
    std::mt19937_64 rng(1);
    for (int t = 0; t < 5; ++t) {
        const auto m = random_map(model.schedule(), 5, rng);
        CHECK(log_likelihood_full(m, 1, back).total == log_likelihood_full(m, 1, model).total);
    }
    const auto meta = read_checkpoint(dir / "m.ckpt", kModelMagic).metadata;
    CHECK(meta.at("n_classes") == 3);
    CHECK(meta.at("vocab") == 5);
    CHECK(meta.at("extra").at("class_names")[2] == "c");

    // Version mismatch.
    {
        std::ifstream in(dir / "m.ckpt", std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        const auto pos = bytes.find("\"format_version\":1");
        REQUIRE(pos != std::string::npos);
        bytes[pos + 17] = '2';
        std::ofstream(dir / "v2.ckpt", std::ios::binary) << bytes;
        CHECK_THROWS_AS(NextScaleModel::load(dir / "v2.ckpt"), FormatError);
        std::ofstream(dir / "short.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 10);
        CHECK_THROWS_AS(NextScaleModel::load(dir / "short.ckpt"), FormatError);
    }
    std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
    CHECK_THROWS_AS(NextScaleModel::load(dir / "junk.ckpt"), FormatError);
    CHECK_THROWS_AS(NextScaleModel::load(dir / "missing.ckpt"), FormatError);
    fs::remove_all(dir);
}

TEST_CASE("IDX and image-folder ingestion") {
    const auto dir = scratch("data");
    {
        std::ofstream im(dir / "t10k-images-idx3-ubyte", std::ios::binary);
        put_u32(im, 0x803);
        put_u32(im, 3);
        put_u32(im, 2);
        put_u32(im, 2);
        for (int i = 0; i < 12; ++i) im.put(static_cast<char>(i * 20));
        std::ofstream lb(dir / "t10k-labels-idx1-ubyte", std::ios::binary);
        put_u32(lb, 0x801);
        put_u32(lb, 3);
        for (char c : {7, 0, 3}) lb.put(c);
    }
    const auto ds = load_mnist(dir, false);
    REQUIRE(ds.size() == 3);
    CHECK(ds.labels == std::vector<int>{7, 0, 3});
    CHECK(ds.n_classes() == 10);
    CHECK(ds.images[1].at(0, 1, 1) == doctest::Approx(140.0 / 255.0));
    CHECK(load_mnist(dir, false, 2).size() == 2);
    CHECK_THROWS_AS(read_idx_labels(dir / "t10k-images-idx3-ubyte"), FormatError);
    CHECK_THROWS_AS(load_mnist(dir, true), DataError);

    const auto sub = ds.filter({3, 7}, true);
    CHECK(sub.labels == std::vector<int>{1, 0});
    CHECK(ds.head(1).size() == 1);

    const auto root = dir / "folder";
    for (const std::string cls : {"cat", "ant"}) {
        fs::create_directories(root / cls);
        for (int i = 0; i < 2; ++i) write_png(root / cls / (std::to_string(i) + ".png"), blob(8, i * 3, 4));
    }
    const auto folder = load_image_folder(root, 1, 8, 8);
    CHECK(folder.size() == 4);
    CHECK(folder.class_names == std::vector<std::string>{"ant", "cat"});
    const auto back = read_png(root / "cat" / "1.png");
    const auto orig = blob(8, 3, 4);
    for (std::size_t i = 0; i < back.pixels.size(); ++i) CHECK(std::abs(back.pixels[i] - orig.pixels[i]) <= 0.5 / 255 + 1e-12);
    CHECK_THROWS_AS(load_image_folder(root, 1, 16, 16), ShapeError);
    CHECK_THROWS(read_png(dir / "t10k-labels-idx1-ubyte"));
    fs::remove_all(dir);
}

TEST_CASE("top-k accuracy") {
    const std::vector<std::vector<double>> scores{{0.1, 0.5, 0.4}, {0.9, 0.05, 0.05}, {0.3, 0.3, 0.4}};
    const std::vector<int> labels{2, 0, 1};
    // Ranks of the true label: 1, 0, 2 (tie with label 0 broken toward label 0).
    CHECK(topk_accuracy(scores, labels, 1) == doctest::Approx(1.0 / 3.0));
    CHECK(topk_accuracy(scores, labels, 2) == doctest::Approx(2.0 / 3.0));
    CHECK(topk_accuracy(scores, labels, 3) == 1.0);
    CHECK(topk_accuracy(scores, labels, 99) == 1.0);
    CHECK_THROWS_AS(topk_accuracy(scores, labels, 0), ParameterError);
    const std::vector<int> preds{2, 0, 2};
    CHECK(accuracy(preds, labels) == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("records, hashes and charts") {
    const auto h1 = config_hash({{"a", 1}});
    CHECK(h1.size() == 16);
    CHECK(h1 == config_hash({{"a", 1}}));
    CHECK(h1 != config_hash({{"a", 2}}));
    const BenchmarkRecord r{"sweep", h1, "top10@K'=3", 0.5, 12.0, 7, utc_timestamp()};
    CHECK(r.csv_row().rfind("sweep," + h1 + ",top10@K'=3,0.5,12,7,", 0) == 0);
    CHECK(r.to_json().at("seed") == 7);
    const auto dir = scratch("records");
    const std::vector<BenchmarkRecord> rs{r, r};
    write_records_csv(dir / "r.csv", rs);
    append_jsonl(dir / "r.jsonl", r.to_json());
    append_jsonl(dir / "r.jsonl", r.to_json());
    std::ifstream csv(dir / "r.csv");
    std::string line;
    int lines = 0;
    while (std::getline(csv, line)) ++lines;
    CHECK(lines == 3);
    const std::vector<double> x{1, 2, 3};
    const std::vector<ChartSeries> series{{{0.2, 0.5, 0.6}, 200, 0, 0}};
    write_line_chart(dir / "c.png", x, series);
    CHECK(read_png(dir / "c.png").width == 480);
    fs::remove_all(dir);
}

TEST_CASE("evaluation harness boundaries") {
    const Tokenizer tok(small_tokenizer_config());
    const NextScaleModel model(tiny_config(3, 16, ScaleSchedule::square({1, 2, 4}), 2), tok.codebook());
    Dataset ds;
    ds.class_names = {"a", "b", "c"};
    for (int i = 0; i < 6; ++i) {
        ds.images.push_back(blob(8, i, 7 - i));
        ds.labels.push_back(i % 3);
    }
    const auto eval = prepare_eval_set(ds, tok);
    const std::vector<int> ks{1, 2, 3};
    const auto sweep = scale_sweep(eval, model, ks, 1);
    REQUIRE(sweep.size() == 3);
    for (std::size_t i = 1; i < sweep.size(); ++i) CHECK(sweep[i].tokens > sweep[i - 1].tokens);
    std::vector<int> full_preds;
    for (const auto& in : eval.inputs) full_preds.push_back(classify_exhaustive(in, all_labels(3), model, tok, Method::full()).prediction);
    CHECK(sweep.back().topk == accuracy(full_preds, eval.labels));

    const std::vector<double> sigmas{0.0, 0.5};
    const auto rows = noise_experiment(ds.images, ds.labels, sigmas, tok, &model, 2, 3);
    CHECK(rows[0].token_change == 0.0);
    CHECK(rows[0].recon_mse == 0.0);
    CHECK(rows[0].loglik_gap == 0.0);
    CHECK(rows[1].token_change > 0.0);
    CHECK_THROWS_AS(noise_experiment(ds.images, ds.labels, {}, tok, nullptr), ParameterError);

    const auto cells = ablation_grid(eval, model, model, tok, SmoothingConfig{2, 0.1, 0});
    CHECK(cells.size() == 4);
}
