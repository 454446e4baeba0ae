#include "avarc/tokenizer.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "avarc/checkpoint.hpp"
#include "avarc/error.hpp"
#include "avarc/seed.hpp"

namespace avarc {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMapMat = Eigen::Map<const RowMat>;

CMapMat as_matrix(const nn::ConstMatrix& m) { return CMapMat(m.values.data(), m.rows, m.cols); }

nn::Tensor images_to_tensor(std::span<const Image> images, const TokenizerConfig& cfg) {
    const std::size_t per = static_cast<std::size_t>(cfg.image_channels) * cfg.image_height * cfg.image_width;
    std::vector<double> v;
    v.reserve(per * images.size());
    for (const auto& im : images) {
        if (im.channels != cfg.image_channels || im.height != cfg.image_height || im.width != cfg.image_width)
            throw ShapeError("image is " + std::to_string(im.channels) + "x" + std::to_string(im.height) + "x" +
                             std::to_string(im.width) + ", tokenizer expects " + std::to_string(cfg.image_channels) +
                             "x" + std::to_string(cfg.image_height) + "x" + std::to_string(cfg.image_width));
        v.insert(v.end(), im.pixels.begin(), im.pixels.end());
    }
    return nn::Tensor::from({static_cast<int>(images.size()), cfg.image_channels, cfg.image_height, cfg.image_width},
                            std::move(v));
}

}  // namespace

int TokenizerConfig::downsampling_stages() const {
    int stages = 0;
    int h = image_height, w = image_width;
    while (h > schedule.latent_h() && h % 2 == 0 && w % 2 == 0) {
        h /= 2;
        w /= 2;
        ++stages;
    }
    if (h != schedule.latent_h() || w != schedule.latent_w())
        throw ConfigError("image size must reach the latent grid by repeated halving");
    return stages;
}

void TokenizerConfig::validate() const {
    if (image_channels < 1 || image_height < 1 || image_width < 1) throw ConfigError("image dims must be positive");
    if (vocab < 1) throw ConfigError("vocab must be >= 1");
    if (feat_channels < 1 || hidden_channels < 1) throw ConfigError("channel counts must be positive");
    if (epochs < 0 || batch_size < 1) throw ConfigError("epochs must be >= 0 and batch_size >= 1");
    if (learning_rate <= 0.0 || commitment_weight < 0.0) throw ConfigError("invalid learning rate or commitment weight");
    (void)downsampling_stages();
}

nlohmann::json TokenizerConfig::to_json() const {
    return {{"image_channels", image_channels},
            {"image_height", image_height},
            {"image_width", image_width},
            {"vocab", vocab},
            {"feat_channels", feat_channels},
            {"hidden_channels", hidden_channels},
            {"schedule", schedule.to_json()},
            {"epochs", epochs},
            {"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"commitment_weight", commitment_weight},
            {"dead_code_interval", dead_code_interval},
            {"seed", seed}};
}

TokenizerConfig TokenizerConfig::from_json(const nlohmann::json& j) {
    TokenizerConfig c;
    c.image_channels = j.value("image_channels", c.image_channels);
    c.image_height = j.value("image_height", c.image_height);
    c.image_width = j.value("image_width", c.image_width);
    c.vocab = j.value("vocab", c.vocab);
    c.feat_channels = j.value("feat_channels", c.feat_channels);
    c.hidden_channels = j.value("hidden_channels", c.hidden_channels);
    if (j.contains("schedule")) c.schedule = ScaleSchedule::from_json(j.at("schedule"));
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.commitment_weight = j.value("commitment_weight", c.commitment_weight);
    c.dead_code_interval = j.value("dead_code_interval", c.dead_code_interval);
    c.seed = j.value("seed", c.seed);
    return c;
}

Tokenizer::Tokenizer(TokenizerConfig config) : config_(std::move(config)) {
    config_.validate();
    ops_ = ScaleOperators::build(config_.schedule);
    nn::Rng rng(config_.seed);
    const int hid = config_.hidden_channels;
    const int stages = config_.downsampling_stages();
    enc_in_ = nn::Conv2d(config_.image_channels, hid, 3, 1, 1, rng);
    for (int s = 0; s < stages; ++s) enc_down_.emplace_back(hid, hid, 4, 2, 1, rng);
    enc_out_ = nn::Conv2d(hid, config_.feat_channels, 1, 1, 0, rng);
    dec_in_ = nn::Conv2d(config_.feat_channels, hid, 1, 1, 0, rng);
    for (int s = 0; s < stages; ++s) dec_up_.emplace_back(hid, hid, 3, 1, 1, rng);
    dec_out_ = nn::Conv2d(hid, config_.image_channels, 3, 1, 1, rng);
    codebook_ = nn::normal_param({config_.vocab, config_.feat_channels}, 0.1, rng);
    refresh_code_norms();
}

void Tokenizer::refresh_code_norms() {
    const int c = config_.feat_channels;
    code_norms_.assign(static_cast<std::size_t>(config_.vocab), 0.0);
    const auto cb = codebook_.data();
    for (int v = 0; v < config_.vocab; ++v) {
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += cb[static_cast<std::size_t>(v) * c + j] * cb[static_cast<std::size_t>(v) * c + j];
        code_norms_[static_cast<std::size_t>(v)] = s;
    }
}

nn::ParamRefs Tokenizer::params() {
    nn::ParamRefs refs;
    enc_in_.collect(refs, "encoder.in");
    for (std::size_t i = 0; i < enc_down_.size(); ++i) enc_down_[i].collect(refs, "encoder.down" + std::to_string(i));
    enc_out_.collect(refs, "encoder.out");
    dec_in_.collect(refs, "decoder.in");
    for (std::size_t i = 0; i < dec_up_.size(); ++i) dec_up_[i].collect(refs, "decoder.up" + std::to_string(i));
    dec_out_.collect(refs, "decoder.out");
    refs.emplace_back("codebook", &codebook_);
    return refs;
}

Tokenizer Tokenizer::clone() const {
    Tokenizer copy = *this;
    nn::deep_copy_params(copy.params());
    return copy;
}

nn::Tensor Tokenizer::encoder_forward(const nn::Tensor& x) const {
    nn::Tensor h = nn::gelu(enc_in_(x));
    for (const auto& conv : enc_down_) h = nn::gelu(conv(h));
    return enc_out_(h);
}

nn::Tensor Tokenizer::decoder_forward(const nn::Tensor& f) const {
    nn::Tensor h = nn::gelu(dec_in_(f));
    for (const auto& conv : dec_up_) h = nn::gelu(conv(nn::upsample_nearest(h, 2)));
    return nn::sigmoid(dec_out_(h));
}

std::vector<FeatureMap> Tokenizer::encode_batch(std::span<const Image> images) const {
    if (images.empty()) return {};
    nn::NoGradGuard no_grad;
    const auto x = images_to_tensor(images, config_);
    const auto rows = nn::to_channels_last(encoder_forward(x));
    const int h = schedule().latent_h(), w = schedule().latent_w(), c = config_.feat_channels;
    const std::size_t per = static_cast<std::size_t>(h) * w * c;
    std::vector<FeatureMap> out;
    for (std::size_t i = 0; i < images.size(); ++i) {
        FeatureMap f(h, w, c);
        std::copy_n(rows.data().begin() + static_cast<std::ptrdiff_t>(i * per), per, f.values.begin());
        out.push_back(std::move(f));
    }
    return out;
}

FeatureMap Tokenizer::encode(const Image& image) const { return encode_batch(std::span(&image, 1)).front(); }

std::vector<int> nearest_codes(std::span<const double> rows, int n_rows, std::span<const double> codebook,
                               std::span<const double> code_norms, int channels) {
    const int vocab = static_cast<int>(code_norms.size());
    CMapMat r(rows.data(), n_rows, channels);
    CMapMat z(codebook.data(), vocab, channels);
    const RowMat dots = r * z.transpose();
    std::vector<int> ids(static_cast<std::size_t>(n_rows));
    for (int i = 0; i < n_rows; ++i) {
        int best = 0;
        double best_d = code_norms[0] - 2.0 * dots(i, 0);
        for (int v = 1; v < vocab; ++v) {
            const double d = code_norms[static_cast<std::size_t>(v)] - 2.0 * dots(i, v);
            if (d < best_d) {
                best_d = d;
                best = v;
            }
        }
        ids[static_cast<std::size_t>(i)] = best;
    }
    return ids;
}

namespace {

// Residual quantization shared by quantize() and training. Optionally records
// downsampled residuals (candidate codebook seeds) and per-scale residual norms.
MultiScaleTokenMap quantize_impl(const FeatureMap& f, const ScaleSchedule& schedule, const ScaleOperators& ops,
                                 std::span<const double> codebook, std::span<const double> norms,
                                 std::vector<double>* residual_samples, std::vector<double>* residual_norms) {
    const int c = f.channels;
    const int hw = f.h * f.w;
    RowMat residual = CMapMat(f.values.data(), hw, c);
    CMapMat z(codebook.data(), static_cast<Eigen::Index>(norms.size()), c);
    MultiScaleTokenMap tokens(schedule);
    for (int k = 0; k < schedule.num_scales(); ++k) {
        const RowMat down = as_matrix(ops.down[static_cast<std::size_t>(k)]) * residual;
        if (residual_samples) residual_samples->insert(residual_samples->end(), down.data(), down.data() + down.size());
        auto ids = nearest_codes(std::span<const double>(down.data(), static_cast<std::size_t>(down.size())),
                                 static_cast<int>(down.rows()), codebook, norms, c);
        RowMat picked(down.rows(), c);
        for (Eigen::Index i = 0; i < down.rows(); ++i) picked.row(i) = z.row(ids[static_cast<std::size_t>(i)]);
        residual.noalias() -= as_matrix(ops.up[static_cast<std::size_t>(k)]) * picked;
        if (residual_norms) residual_norms->push_back(residual.norm());
        tokens.maps[static_cast<std::size_t>(k)] = std::move(ids);
    }
    return tokens;
}

}  // namespace

MultiScaleTokenMap Tokenizer::quantize(const FeatureMap& f) const {
    if (f.h != schedule().latent_h() || f.w != schedule().latent_w() || f.channels != config_.feat_channels)
        throw ShapeError("feature map does not match the tokenizer latent grid");
    return quantize_impl(f, schedule(), ops_, codebook_.data(), code_norms_, nullptr, nullptr);
}

std::vector<double> Tokenizer::residual_norms(const FeatureMap& f) const {
    if (f.h != schedule().latent_h() || f.w != schedule().latent_w() || f.channels != config_.feat_channels)
        throw ShapeError("feature map does not match the tokenizer latent grid");
    std::vector<double> norms;
    quantize_impl(f, schedule(), ops_, codebook_.data(), code_norms_, nullptr, &norms);
    return norms;
}

FeatureMap Tokenizer::lookup(const MultiScaleTokenMap& tokens) const {
    if (!(tokens.schedule == schedule())) throw ShapeError("token map schedule differs from tokenizer schedule");
    tokens.validate(config_.vocab);
    const int c = config_.feat_channels;
    const int hw = schedule().latent_h() * schedule().latent_w();
    CMapMat z(codebook_.data().data(), config_.vocab, c);
    RowMat acc = RowMat::Zero(hw, c);
    for (int k = 0; k < schedule().num_scales(); ++k) {
        const auto& ids = tokens.maps[static_cast<std::size_t>(k)];
        RowMat picked(static_cast<Eigen::Index>(ids.size()), c);
        for (std::size_t i = 0; i < ids.size(); ++i) picked.row(static_cast<Eigen::Index>(i)) = z.row(ids[i]);
        acc.noalias() += as_matrix(ops_.up[static_cast<std::size_t>(k)]) * picked;
    }
    FeatureMap f(schedule().latent_h(), schedule().latent_w(), c);
    std::copy_n(acc.data(), acc.size(), f.values.begin());
    return f;
}

Image Tokenizer::decode_features(const FeatureMap& f_hat) const {
    if (f_hat.h != schedule().latent_h() || f_hat.w != schedule().latent_w() || f_hat.channels != config_.feat_channels)
        throw ShapeError("feature map does not match the tokenizer latent grid");
    nn::NoGradGuard no_grad;
    const auto rows = nn::Tensor::from({f_hat.h * f_hat.w, f_hat.channels}, f_hat.values);
    const auto x = decoder_forward(nn::to_channels_first(rows, 1, f_hat.h, f_hat.w));
    Image im(config_.image_channels, config_.image_height, config_.image_width);
    for (std::size_t i = 0; i < im.pixels.size(); ++i) im.pixels[i] = std::clamp(x.data()[i], 0.0, 1.0);
    return im;
}

void Tokenizer::save(const std::filesystem::path& path, const nlohmann::json& extra) const {
    Tokenizer copy = *this;
    nlohmann::json meta = {{"kind", "tokenizer"}, {"config", config_.to_json()}};
    meta["vocab"] = config_.vocab;
    meta["feat_channels"] = config_.feat_channels;
    meta["schedule"] = config_.schedule.to_json();
    if (!extra.is_null()) meta["extra"] = extra;
    write_checkpoint(path, kTokenizerMagic, meta, copy.params());
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
    const auto ckpt = read_checkpoint(path, kTokenizerMagic);
    Tokenizer tok(TokenizerConfig::from_json(ckpt.metadata.at("config")));
    load_params(ckpt, tok.params());
    tok.refresh_code_norms();
    return tok;
}

FeatureMap perturb_features(const FeatureMap& f, double sigma, std::uint64_t seed) {
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ParameterError("sigma must be a finite value >= 0");
    FeatureMap out = f;
    if (sigma == 0.0) return out;
    nn::Rng rng(seed);
    std::normal_distribution<double> noise(0.0, sigma);
    for (double& v : out.values) v += noise(rng);
    return out;
}

double token_change_fraction(const FeatureMap& f, double sigma, int n_trials, const Tokenizer& tokenizer,
                             std::uint64_t seed) {
    if (n_trials < 1) throw ParameterError("n_trials must be >= 1");
    const auto clean = tokenizer.quantize(f).flatten();
    double acc = 0.0;
    for (int t = 0; t < n_trials; ++t) {
        const auto noisy = tokenizer.quantize(perturb_features(f, sigma, mix_seed(seed, static_cast<std::uint64_t>(t)))).flatten();
        std::size_t changed = 0;
        for (std::size_t i = 0; i < clean.size(); ++i) changed += clean[i] != noisy[i];
        acc += static_cast<double>(changed) / static_cast<double>(clean.size());
    }
    return acc / n_trials;
}

double mean_squared_error(const Image& a, const Image& b) {
    if (a.pixels.size() != b.pixels.size()) throw ShapeError("image size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) s += (a.pixels[i] - b.pixels[i]) * (a.pixels[i] - b.pixels[i]);
    return s / static_cast<double>(a.pixels.size());
}

class TokenizerTrainer {
public:
    static Tokenizer run(std::span<const Image> images, const TokenizerConfig& config,
                         const std::function<void(const TokenizerTrainStep&)>& on_step) {
        if (images.empty()) throw DataError("tokenizer training needs a non-empty dataset");
        Tokenizer tok(config);
        const auto& cfg = tok.config_;
        nn::Rng rng(mix_seed(cfg.seed, 17));
        nn::Adam opt(tok.params(), cfg.learning_rate);
        const int h = cfg.schedule.latent_h(), w = cfg.schedule.latent_w(), c = cfg.feat_channels;
        const int hw = h * w;
        const int n_scales = cfg.schedule.num_scales();

        std::vector<std::size_t> order(images.size());
        std::iota(order.begin(), order.end(), 0);
        std::vector<long> last_used(static_cast<std::size_t>(cfg.vocab), 0);
        const auto start = std::chrono::steady_clock::now();
        int step = 0;
        for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
            std::shuffle(order.begin(), order.end(), rng);
            for (std::size_t first = 0; first < order.size(); first += static_cast<std::size_t>(cfg.batch_size)) {
                const std::size_t last = std::min(order.size(), first + static_cast<std::size_t>(cfg.batch_size));
                std::vector<Image> batch;
                for (std::size_t i = first; i < last; ++i) batch.push_back(images[order[i]]);
                const int n = static_cast<int>(batch.size());

                const auto x = images_to_tensor(batch, cfg);
                const auto feats = nn::to_channels_last(tok.encoder_forward(x));

                std::vector<std::vector<int>> ids(static_cast<std::size_t>(n_scales));
                std::vector<double> samples;
                for (int b = 0; b < n; ++b) {
                    FeatureMap f(h, w, c);
                    std::copy_n(feats.data().begin() + static_cast<std::ptrdiff_t>(b) * hw * c,
                                static_cast<std::ptrdiff_t>(hw) * c, f.values.begin());
                    const auto tokens = quantize_impl(f, cfg.schedule, tok.ops_, tok.codebook_.data(),
                                                      tok.code_norms_, &samples, nullptr);
                    for (int k = 0; k < n_scales; ++k) {
                        auto& dst = ids[static_cast<std::size_t>(k)];
                        const auto& src = tokens.maps[static_cast<std::size_t>(k)];
                        dst.insert(dst.end(), src.begin(), src.end());
                        for (int id : src) last_used[static_cast<std::size_t>(id)] = step;
                    }
                }

                nn::Tensor f_hat;
                for (int k = 0; k < n_scales; ++k) {
                    auto up = nn::apply_rowwise_operator(nn::gather_rows(tok.codebook_, ids[static_cast<std::size_t>(k)]),
                                                         tok.ops_.up[static_cast<std::size_t>(k)], n);
                    f_hat = f_hat.defined() ? nn::add(f_hat, up) : up;
                }
                const auto codebook_loss = nn::mse(f_hat, nn::detach(feats));
                const auto commit_loss = nn::mse(feats, nn::detach(f_hat));
                const auto straight = nn::add(feats, nn::detach(nn::sub(f_hat, feats)));
                const auto recon = tok.decoder_forward(nn::to_channels_first(straight, n, h, w));
                const auto rec_loss = nn::mse(recon, x);
                const auto loss = nn::add(nn::add(rec_loss, codebook_loss), nn::scale(commit_loss, cfg.commitment_weight));

                opt.zero_grad();
                loss.backward();
                opt.step();

                if (cfg.dead_code_interval > 0 && (step == 0 || step % cfg.dead_code_interval == 0)) {
                    reseed_dead_codes(tok, samples, last_used, step, step == 0 ? 0 : cfg.dead_code_interval, rng);
                }
                tok.refresh_code_norms();

                if (on_step) {
                    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
                    on_step({step, loss.item(), rec_loss.item(), ms});
                }
                ++step;
            }
        }
        return tok;
    }

private:
    // Codes idle for at least `idle` steps (all codes when idle == 0) are
    // replaced by randomly chosen residual vectors from the current batch.
    static void reseed_dead_codes(Tokenizer& tok, const std::vector<double>& samples, std::vector<long>& last_used,
                                  long step, long idle, nn::Rng& rng) {
        const int c = tok.config_.feat_channels;
        const std::size_t n_samples = samples.size() / static_cast<std::size_t>(c);
        if (n_samples == 0) return;
        std::uniform_int_distribution<std::size_t> pick(0, n_samples - 1);
        std::normal_distribution<double> jitter(0.0, 1e-3);
        auto cb = tok.codebook_.mutable_data();
        for (std::size_t v = 0; v < last_used.size(); ++v) {
            if (idle > 0 && step - last_used[v] < idle) continue;
            const std::size_t s = pick(rng);
            for (int j = 0; j < c; ++j) cb[v * c + j] = samples[s * c + j] + jitter(rng);
            last_used[v] = step;
        }
    }
};

Tokenizer train_tokenizer(std::span<const Image> images, const TokenizerConfig& config,
                          const std::function<void(const TokenizerTrainStep&)>& on_step) {
    return TokenizerTrainer::run(images, config, on_step);
}

}  // namespace avarc
