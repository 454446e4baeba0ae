#pragma once

#include <span>
#include <vector>

#include "avarc/nn/tensor.hpp"

namespace avarc::nn {

/// Dense row-major constant matrix, used for fixed linear maps such as
/// resampling operators.
struct ConstMatrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> values;

    double at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }
};

// Elementwise and shape ops.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log_sigmoid(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor detach(const Tensor& x);

// Reductions.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// [m, n] -> [m]
Tensor row_sums(const Tensor& x);
Tensor mse(const Tensor& a, const Tensor& b);

// Linear algebra.
/// [m, k] x [k, n] -> [m, n]
Tensor matmul(const Tensor& a, const Tensor& b);
/// x [m, in] * w [in, out] + bias [out]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);
/// Rows of `table` selected by `ids`; gradient scatters back.
Tensor gather_rows(const Tensor& table, std::span<const int> ids);
Tensor concat_rows(const std::vector<Tensor>& parts);
/// Applies `op` [n_out, n_in] independently to each of `groups` consecutive
/// blocks of n_in rows in x [groups * n_in, c].
Tensor apply_rowwise_operator(const Tensor& x, const ConstMatrix& op, int groups);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Multi-head attention over a packed qkv [batch * seq, 3 * d]. Row i of each
/// sequence attends to rows [0, visible[i]); `visible` must be non-decreasing.
Tensor prefix_masked_attention(const Tensor& qkv, int batch, int seq, int heads,
                               std::span<const int> visible);

/// log softmax(logits[i])[targets[i]] for logits [m, V] -> [m].
Tensor log_softmax_gather(const Tensor& logits, std::span<const int> targets);

// Image ops on [N, C, H, W].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad);
Tensor upsample_nearest(const Tensor& x, int factor);
/// [N, C, H, W] -> [N * H * W, C]
Tensor to_channels_last(const Tensor& x);
/// [N * H * W, C] -> [N, C, H, W]
Tensor to_channels_first(const Tensor& x, int n, int h, int w);

}  // namespace avarc::nn
