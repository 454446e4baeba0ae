#include <Eigen/Dense>
#include <cmath>

#include "avarc/error.hpp"
#include "avarc/nn/ops.hpp"

namespace avarc::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct RowGroup {
    int begin;
    int end;
    int visible;
};

std::vector<RowGroup> group_rows(std::span<const int> visible) {
    std::vector<RowGroup> groups;
    for (int i = 0; i < static_cast<int>(visible.size()); ++i) {
        const int v = visible[static_cast<std::size_t>(i)];
        if (!groups.empty() && groups.back().visible == v) {
            groups.back().end = i + 1;
        } else {
            if (!groups.empty() && v < groups.back().visible)
                throw ShapeError("prefix_masked_attention: visibility must be non-decreasing");
            if (v < 1 || v > static_cast<int>(visible.size()))
                throw ShapeError("prefix_masked_attention: visibility out of range");
            groups.push_back({i, i + 1, v});
        }
    }
    return groups;
}

// Copies one head's slice (starting at column `col`) of one sequence into a dense [seq, hd] matrix.
RowMat load_head(const double* base, int b, int col, int seq, int d, int hd) {
    RowMat m(seq, hd);
    for (int t = 0; t < seq; ++t) {
        const double* row = base + (static_cast<std::size_t>(b) * seq + t) * 3 * d + col;
        for (int j = 0; j < hd; ++j) m(t, j) = row[j];
    }
    return m;
}

}  // namespace

Tensor prefix_masked_attention(const Tensor& qkv, int batch, int seq, int heads, std::span<const int> visible) {
    if (qkv.rank() != 2 || qkv.dim(0) != batch * seq || qkv.dim(1) % 3 != 0)
        throw ShapeError("prefix_masked_attention: qkv must be [batch * seq, 3 * d]");
    if (static_cast<int>(visible.size()) != seq) throw ShapeError("prefix_masked_attention: mask length mismatch");
    const int d = qkv.dim(1) / 3;
    if (heads < 1 || d % heads != 0) throw ShapeError("prefix_masked_attention: width not divisible by heads");
    const int hd = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const auto groups = group_rows(visible);

    auto out = detail::make_node({batch * seq, d}, {&qkv});
    const double* src = qkv.data().data();
    const bool keep = out->requires_grad;
    // Softmax probabilities per (sequence, head, group), retained for backward.
    std::vector<RowMat> probs;
    if (keep) probs.reserve(static_cast<std::size_t>(batch) * heads * groups.size());

    for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
            const RowMat q = load_head(src, b, h * hd, seq, d, hd);
            const RowMat k = load_head(src, b, d + h * hd, seq, d, hd);
            const RowMat v = load_head(src, b, 2 * d + h * hd, seq, d, hd);
            for (const auto& g : groups) {
                const int ng = g.end - g.begin;
                RowMat s = (q.middleRows(g.begin, ng) * k.topRows(g.visible).transpose()) * scale;
                for (int r = 0; r < ng; ++r) {
                    const double mx = s.row(r).maxCoeff();
                    s.row(r) = (s.row(r).array() - mx).exp();
                    s.row(r) /= s.row(r).sum();
                }
                RowMat o = s * v.topRows(g.visible);
                for (int r = 0; r < ng; ++r) {
                    double* dst = out->value.data() + (static_cast<std::size_t>(b) * seq + g.begin + r) * d + h * hd;
                    for (int j = 0; j < hd; ++j) dst[j] = o(r, j);
                }
                if (keep) probs.push_back(std::move(s));
            }
        }
    }

    if (keep) {
        out->backward_fn = [batch, seq, heads, d, hd, scale, groups, probs = std::move(probs)](Node& o) {
            Node& p = *o.parents[0];
            double* gsrc = p.grad_data();
            const double* src = p.value.data();
            std::size_t pi = 0;
            for (int b = 0; b < batch; ++b) {
                for (int h = 0; h < heads; ++h) {
                    const RowMat q = load_head(src, b, h * hd, seq, d, hd);
                    const RowMat k = load_head(src, b, d + h * hd, seq, d, hd);
                    const RowMat v = load_head(src, b, 2 * d + h * hd, seq, d, hd);
                    RowMat dq = RowMat::Zero(seq, hd), dk = RowMat::Zero(seq, hd), dv = RowMat::Zero(seq, hd);
                    for (const auto& g : groups) {
                        const RowMat& pr = probs[pi++];
                        const int ng = g.end - g.begin;
                        RowMat dout(ng, hd);
                        for (int r = 0; r < ng; ++r) {
                            const double* gr = o.grad.data() + (static_cast<std::size_t>(b) * seq + g.begin + r) * d + h * hd;
                            for (int j = 0; j < hd; ++j) dout(r, j) = gr[j];
                        }
                        dv.topRows(g.visible).noalias() += pr.transpose() * dout;
                        RowMat dp = dout * v.topRows(g.visible).transpose();
                        Eigen::VectorXd dot = (dp.array() * pr.array()).rowwise().sum();
                        RowMat ds = pr.array() * (dp.colwise() - dot).array();
                        dq.middleRows(g.begin, ng).noalias() += (ds * k.topRows(g.visible)) * scale;
                        dk.topRows(g.visible).noalias() += (ds.transpose() * q.middleRows(g.begin, ng)) * scale;
                    }
                    for (int t = 0; t < seq; ++t) {
                        double* row = gsrc + (static_cast<std::size_t>(b) * seq + t) * 3 * d;
                        for (int j = 0; j < hd; ++j) {
                            row[h * hd + j] += dq(t, j);
                            row[d + h * hd + j] += dk(t, j);
                            row[2 * d + h * hd + j] += dv(t, j);
                        }
                    }
                }
            }
        };
    }
    return Tensor(out);
}

}  // namespace avarc::nn
