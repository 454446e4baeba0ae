#include "avarc/nn/layers.hpp"

#include <cmath>

#include "avarc/error.hpp"

namespace avarc::nn {

Tensor normal_param(Shape shape, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = dist(rng);
    return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor constant_param(Shape shape, double value) {
    const auto n = shape_numel(shape);
    return Tensor::from(std::move(shape), std::vector<double>(n, value), true);
}

void deep_copy_params(const ParamRefs& refs) {
    for (const auto& [name, t] : refs) {
        const bool rg = t->requires_grad();
        *t = Tensor::from(t->shape(), std::vector<double>(t->data().begin(), t->data().end()), rg);
    }
}

Linear::Linear(int in, int out, Rng& rng, double stddev)
    : weight(normal_param({in, out}, stddev, rng)), bias(constant_param({out}, 0.0)) {}

void Linear::collect(ParamRefs& refs, const std::string& prefix) {
    refs.emplace_back(prefix + ".weight", &weight);
    refs.emplace_back(prefix + ".bias", &bias);
}

LayerNorm::LayerNorm(int width) : gamma(constant_param({width}, 1.0)), beta(constant_param({width}, 0.0)) {}

void LayerNorm::collect(ParamRefs& refs, const std::string& prefix) {
    refs.emplace_back(prefix + ".gamma", &gamma);
    refs.emplace_back(prefix + ".beta", &beta);
}

Conv2d::Conv2d(int in, int out, int kernel, int stride_, int pad_, Rng& rng)
    : weight(normal_param({out, in, kernel, kernel}, std::sqrt(2.0 / (in * kernel * kernel)), rng)),
      bias(constant_param({out}, 0.0)),
      stride(stride_),
      pad(pad_) {}

void Conv2d::collect(ParamRefs& refs, const std::string& prefix) {
    refs.emplace_back(prefix + ".weight", &weight);
    refs.emplace_back(prefix + ".bias", &bias);
}

Adam::Adam(ParamRefs params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (lr <= 0.0) throw ParameterError("learning rate must be positive");
    for (const auto& [name, t] : params_) {
        m_.emplace_back(t->numel(), 0.0);
        v_.emplace_back(t->numel(), 0.0);
    }
}

void Adam::zero_grad() {
    for (const auto& [name, t] : params_) t->zero_grad();
}

double Adam::clip_grad_norm(double max_norm) {
    double sq = 0.0;
    for (const auto& [name, t] : params_)
        for (double g : t->mutable_grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        for (const auto& [name, t] : params_)
            for (double& g : t->mutable_grad()) g *= s;
    }
    return norm;
}

void Adam::step() {
    ++step_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (std::size_t p = 0; p < params_.size(); ++p) {
        Tensor& t = *params_[p].second;
        auto g = t.mutable_grad();
        auto w = t.mutable_data();
        auto& m = m_[p];
        auto& v = v_[p];
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
            w[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
        }
    }
}

}  // namespace avarc::nn
