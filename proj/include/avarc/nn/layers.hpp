#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "avarc/nn/ops.hpp"
#include "avarc/nn/tensor.hpp"

namespace avarc::nn {

using Rng = std::mt19937_64;

/// Named pointers to the trainable tensors of a module, in a stable order.
using ParamRefs = std::vector<std::pair<std::string, Tensor*>>;

Tensor normal_param(Shape shape, double stddev, Rng& rng);
Tensor constant_param(Shape shape, double value);

/// Replaces every referenced tensor with an independent copy of its value.
void deep_copy_params(const ParamRefs& refs);

struct Linear {
    Tensor weight;  // [in, out]
    Tensor bias;    // [out]

    Linear() = default;
    Linear(int in, int out, Rng& rng, double stddev);
    Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
    void collect(ParamRefs& refs, const std::string& prefix);
};

struct LayerNorm {
    Tensor gamma;
    Tensor beta;

    LayerNorm() = default;
    explicit LayerNorm(int width);
    Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
    void collect(ParamRefs& refs, const std::string& prefix);
};

struct Conv2d {
    Tensor weight;  // [out, in, k, k]
    Tensor bias;    // [out]
    int stride = 1;
    int pad = 0;

    Conv2d() = default;
    Conv2d(int in, int out, int kernel, int stride, int pad, Rng& rng);
    Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, pad); }
    void collect(ParamRefs& refs, const std::string& prefix);
};

/// Adam with bias correction and a fixed learning rate.
class Adam {
public:
    Adam(ParamRefs params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    void zero_grad();
    void step();
    double learning_rate() const { return lr_; }
    void set_learning_rate(double lr) { lr_ = lr; }
    /// Clips the global gradient norm; returns the norm before clipping.
    double clip_grad_norm(double max_norm);

private:
    ParamRefs params_;
    std::vector<std::vector<double>> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    long step_ = 0;
};

}  // namespace avarc::nn
