#include "avarc/nextscale.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "avarc/checkpoint.hpp"
#include "avarc/error.hpp"

namespace avarc {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMapMat = Eigen::Map<const RowMat>;
using MapMat = Eigen::Map<RowMat>;

}  // namespace

void NextScaleConfig::validate() const {
    if (n_classes < 1) throw ConfigError("n_classes must be >= 1");
    if (vocab < 1 || feat_channels < 1) throw ConfigError("vocab and feat_channels must be positive");
    if (width < 1 || depth < 0 || heads < 1 || mlp_ratio < 1) throw ConfigError("invalid transformer shape");
    if (width % heads != 0) throw ConfigError("width must be divisible by heads");
    if (schedule.num_scales() < 1) throw ConfigError("schedule must have at least one scale");
    if (!(init_std >= 0.0)) throw ConfigError("init_std must be >= 0");
}

nlohmann::json NextScaleConfig::to_json() const {
    return {{"n_classes", n_classes}, {"vocab", vocab},     {"feat_channels", feat_channels},
            {"schedule", schedule.to_json()}, {"width", width}, {"depth", depth},
            {"heads", heads},         {"mlp_ratio", mlp_ratio}, {"init_std", init_std},
            {"zero_head", zero_head}, {"seed", seed}};
}

NextScaleConfig NextScaleConfig::from_json(const nlohmann::json& j) {
    NextScaleConfig c;
    c.n_classes = j.value("n_classes", c.n_classes);
    c.vocab = j.value("vocab", c.vocab);
    c.feat_channels = j.value("feat_channels", c.feat_channels);
    if (j.contains("schedule")) c.schedule = ScaleSchedule::from_json(j.at("schedule"));
    c.width = j.value("width", c.width);
    c.depth = j.value("depth", c.depth);
    c.heads = j.value("heads", c.heads);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.init_std = j.value("init_std", c.init_std);
    c.zero_head = j.value("zero_head", c.zero_head);
    c.seed = j.value("seed", c.seed);
    return c;
}

NextScaleModel::NextScaleModel(NextScaleConfig config, std::span<const double> codebook) : config_(std::move(config)) {
    config_.validate();
    const int v = config_.vocab, c = config_.feat_channels, d = config_.width;
    if (codebook.size() != static_cast<std::size_t>(v) * c)
        throw ShapeError("codebook must be [vocab, feat_channels]");
    ops_ = ScaleOperators::build(config_.schedule);
    codebook_ = nn::Tensor::from({v, c}, std::vector<double>(codebook.begin(), codebook.end()));

    nn::Rng rng(config_.seed);
    const double s = config_.init_std;
    const double residual_std = s / std::sqrt(2.0 * std::max(1, config_.depth));
    class_embed_ = nn::normal_param({config_.n_classes + 1, d}, s, rng);
    pos_embed_ = nn::normal_param({config_.schedule.total_tokens(), d}, s, rng);
    scale_embed_ = nn::normal_param({config_.schedule.num_scales(), d}, s, rng);
    word_embed_ = nn::Linear(c, d, rng, s);
    for (int i = 0; i < config_.depth; ++i) {
        blocks_.push_back(Block{nn::LayerNorm(d), nn::Linear(d, 3 * d, rng, s), nn::Linear(d, d, rng, residual_std),
                                nn::LayerNorm(d), nn::Linear(d, config_.mlp_ratio * d, rng, s),
                                nn::Linear(config_.mlp_ratio * d, d, rng, residual_std)});
    }
    ln_out_ = nn::LayerNorm(d);
    head_ = nn::Linear(d, v, rng, config_.zero_head ? 0.0 : s);
}

std::vector<double> NextScaleModel::teacher_inputs(const MultiScaleTokenMap& map, int upto_scale) const {
    const auto& sched = config_.schedule;
    const int c = config_.feat_channels;
    const int lat = sched.latent_h() * sched.latent_w();
    const int n0 = sched.tokens_in_scale(0);
    std::vector<double> out(static_cast<std::size_t>(sched.prefix_tokens(upto_scale) - n0) * c, 0.0);
    RowMat acc = RowMat::Zero(lat, c);
    const CMapMat cb(codebook_.data().data(), config_.vocab, c);
    std::size_t row = 0;
    for (int k = 1; k < upto_scale; ++k) {
        const auto& grid = map.maps[static_cast<std::size_t>(k - 1)];
        RowMat z(static_cast<Eigen::Index>(grid.size()), c);
        for (std::size_t i = 0; i < grid.size(); ++i) z.row(static_cast<Eigen::Index>(i)) = cb.row(grid[i]);
        const auto& up = ops_.up[static_cast<std::size_t>(k - 1)];
        acc.noalias() += CMapMat(up.values.data(), up.rows, up.cols) * z;
        const auto& down = ops_.down[static_cast<std::size_t>(k)];
        MapMat(out.data() + row * c, down.rows, c).noalias() = CMapMat(down.values.data(), down.rows, down.cols) * acc;
        row += static_cast<std::size_t>(down.rows);
    }
    return out;
}

nn::Tensor NextScaleModel::forward(std::span<const MultiScaleTokenMap* const> maps, std::span<const int> labels,
                                   int upto_scale) const {
    const auto& sched = config_.schedule;
    if (maps.empty()) throw ShapeError("forward needs at least one sequence");
    if (maps.size() != labels.size()) throw ShapeError("one label per sequence is required");
    if (upto_scale < 1 || upto_scale > sched.num_scales())
        throw ParameterError("scale count must lie in [1, " + std::to_string(sched.num_scales()) + "]");
    for (int y : labels)
        if (y < 0 || y > config_.n_classes) throw LabelError("label " + std::to_string(y) + " outside the label table");
    for (const auto* m : maps) {
        if (!(m->schedule == sched)) throw ShapeError("token map schedule differs from the model schedule");
        m->validate(config_.vocab);
    }
    forward_count_.value.fetch_add(1);

    const int batch = static_cast<int>(maps.size());
    const int seq = sched.prefix_tokens(upto_scale);
    const int n0 = sched.tokens_in_scale(0);
    const int c = config_.feat_channels;

    // Word inputs; scale-1 rows stay zero and carry only the label embedding.
    std::vector<double> words(static_cast<std::size_t>(batch) * seq * c, 0.0);
    std::vector<int> targets, pos_ids, scale_ids, label_ids;
    targets.reserve(static_cast<std::size_t>(batch) * seq);
    for (int b = 0; b < batch; ++b) {
        const auto ti = teacher_inputs(*maps[static_cast<std::size_t>(b)], upto_scale);
        std::copy(ti.begin(), ti.end(), words.begin() + (static_cast<std::ptrdiff_t>(b) * seq + n0) * c);
        const auto flat = maps[static_cast<std::size_t>(b)]->flatten(upto_scale);
        targets.insert(targets.end(), flat.begin(), flat.end());
        for (int p = 0; p < seq; ++p) {
            pos_ids.push_back(p);
            scale_ids.push_back(sched.scale_of(p));
            label_ids.push_back(labels[static_cast<std::size_t>(b)]);
        }
    }
    std::vector<int> visible(static_cast<std::size_t>(seq));
    for (int p = 0; p < seq; ++p) visible[static_cast<std::size_t>(p)] = sched.offset(sched.scale_of(p)) + sched.tokens_in_scale(sched.scale_of(p));

    using namespace nn;
    Tensor h = word_embed_(Tensor::from({batch * seq, c}, std::move(words)));
    h = add(h, gather_rows(pos_embed_, pos_ids));
    h = add(h, gather_rows(scale_embed_, scale_ids));
    h = add(h, gather_rows(class_embed_, label_ids));
    for (const auto& blk : blocks_) {
        const Tensor att = prefix_masked_attention(blk.qkv(blk.ln1(h)), batch, seq, config_.heads, visible);
        h = add(h, blk.proj(att));
        h = add(h, blk.fc2(gelu(blk.fc1(blk.ln2(h)))));
    }
    const Tensor logp = log_softmax_gather(head_(ln_out_(h)), targets);
    return reshape(logp, {batch, seq});
}

nn::ParamRefs NextScaleModel::params() {
    nn::ParamRefs refs;
    refs.emplace_back("class_embed", &class_embed_);
    refs.emplace_back("pos_embed", &pos_embed_);
    refs.emplace_back("scale_embed", &scale_embed_);
    word_embed_.collect(refs, "word_embed");
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const std::string p = "block" + std::to_string(i) + ".";
        blocks_[i].ln1.collect(refs, p + "ln1");
        blocks_[i].qkv.collect(refs, p + "qkv");
        blocks_[i].proj.collect(refs, p + "proj");
        blocks_[i].ln2.collect(refs, p + "ln2");
        blocks_[i].fc1.collect(refs, p + "fc1");
        blocks_[i].fc2.collect(refs, p + "fc2");
    }
    ln_out_.collect(refs, "ln_out");
    head_.collect(refs, "head");
    return refs;
}

nn::ParamRefs NextScaleModel::state() {
    auto refs = params();
    refs.emplace_back("codebook", &codebook_);
    return refs;
}

NextScaleModel NextScaleModel::clone() const {
    NextScaleModel copy = *this;
    nn::deep_copy_params(copy.state());
    return copy;
}

bool NextScaleModel::same_architecture(const NextScaleModel& other) const {
    auto a = config_.to_json(), b = other.config_.to_json();
    a.erase("n_classes");
    b.erase("n_classes");
    a.erase("seed");
    b.erase("seed");
    return a == b;
}

void NextScaleModel::save(const std::filesystem::path& path, const nlohmann::json& extra) const {
    NextScaleModel copy = *this;
    nlohmann::json meta = {{"kind", "nextscale"}, {"config", config_.to_json()}, {"has_unconditional", has_unconditional_}};
    meta["n_classes"] = config_.n_classes;
    meta["vocab"] = config_.vocab;
    meta["schedule"] = config_.schedule.to_json();
    if (!extra.is_null()) meta["extra"] = extra;
    write_checkpoint(path, kModelMagic, meta, copy.state());
}

NextScaleModel NextScaleModel::load(const std::filesystem::path& path) {
    const auto ckpt = read_checkpoint(path, kModelMagic);
    const auto cfg = NextScaleConfig::from_json(ckpt.metadata.at("config"));
    NextScaleModel model(cfg, std::vector<double>(static_cast<std::size_t>(cfg.vocab) * cfg.feat_channels, 0.0));
    load_params(ckpt, model.state());
    model.has_unconditional_ = ckpt.metadata.value("has_unconditional", false);
    return model;
}

}  // namespace avarc
