#include "avarc/nn/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "avarc/error.hpp"

namespace avarc::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using MapVec = Eigen::Map<Eigen::VectorXd>;
using CMapVec = Eigen::Map<const Eigen::VectorXd>;

void require_rank(const Tensor& t, int rank, const char* op) {
    if (t.rank() != rank) throw ShapeError(std::string(op) + ": unexpected tensor rank");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) throw ShapeError(std::string(op) + ": shape mismatch");
}

bool wants_grad(const Node& out, std::size_t i) { return out.parents[i]->requires_grad; }

CMapMat cmat(const Node& n, int rows, int cols) { return CMapMat(n.value.data(), rows, cols); }

template <typename Forward, typename Backward>
Tensor unary(const Tensor& x, Forward fwd, Backward bwd) {
    auto out = detail::make_node(x.shape(), {&x});
    const auto& xv = x.node()->value;
    for (std::size_t i = 0; i < xv.size(); ++i) out->value[i] = fwd(xv[i]);
    if (out->requires_grad) {
        out->backward_fn = [bwd](Node& o) {
            Node& p = *o.parents[0];
            double* g = p.grad_data();
            for (std::size_t i = 0; i < o.value.size(); ++i) g[i] += o.grad[i] * bwd(p.value[i], o.value[i]);
        };
    }
    return Tensor(out);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    auto out = detail::make_node(a.shape(), {&a, &b});
    MapVec(out->value.data(), static_cast<Eigen::Index>(out->value.size())) =
        CMapVec(a.data().data(), static_cast<Eigen::Index>(a.numel())) +
        CMapVec(b.data().data(), static_cast<Eigen::Index>(b.numel()));
    if (out->requires_grad) {
        out->backward_fn = [](Node& o) {
            const auto n = static_cast<Eigen::Index>(o.value.size());
            for (std::size_t i = 0; i < 2; ++i)
                if (wants_grad(o, i)) MapVec(o.parents[i]->grad_data(), n) += CMapVec(o.grad.data(), n);
        };
    }
    return Tensor(out);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    auto out = detail::make_node(a.shape(), {&a, &b});
    for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = a.data()[i] - b.data()[i];
    if (out->requires_grad) {
        out->backward_fn = [](Node& o) {
            const auto n = static_cast<Eigen::Index>(o.value.size());
            if (wants_grad(o, 0)) MapVec(o.parents[0]->grad_data(), n) += CMapVec(o.grad.data(), n);
            if (wants_grad(o, 1)) MapVec(o.parents[1]->grad_data(), n) -= CMapVec(o.grad.data(), n);
        };
    }
    return Tensor(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    auto out = detail::make_node(a.shape(), {&a, &b});
    for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = a.data()[i] * b.data()[i];
    if (out->requires_grad) {
        out->backward_fn = [](Node& o) {
            Node& pa = *o.parents[0];
            Node& pb = *o.parents[1];
            if (pa.requires_grad) {
                double* g = pa.grad_data();
                for (std::size_t i = 0; i < o.value.size(); ++i) g[i] += o.grad[i] * pb.value[i];
            }
            if (pb.requires_grad) {
                double* g = pb.grad_data();
                for (std::size_t i = 0; i < o.value.size(); ++i) g[i] += o.grad[i] * pa.value[i];
            }
        };
    }
    return Tensor(out);
}

Tensor scale(const Tensor& a, double s) {
    return unary(a, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
    return unary(a, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& x) {
    return unary(
        x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double in, double) { return in > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
    constexpr double c = 0.7978845608028654;  // sqrt(2 / pi)
    constexpr double a = 0.044715;
    return unary(
        x,
        [](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + a * v * v * v))); },
        [](double v, double) {
            const double u = c * (v + a * v * v * v);
            const double t = std::tanh(u);
            const double du = c * (1.0 + 3.0 * a * v * v);
            return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
        });
}

Tensor sigmoid(const Tensor& x) {
    return unary(
        x,
        [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor log_sigmoid(const Tensor& x) {
    return unary(
        x, [](double v) { return std::min(v, 0.0) - std::log1p(std::exp(-std::abs(v))); },
        [](double v, double) {
            // d/dv log sigmoid(v) = sigmoid(-v)
            return v >= 0.0 ? std::exp(-v) / (1.0 + std::exp(-v)) : 1.0 / (1.0 + std::exp(v));
        });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) throw ShapeError("reshape: element count mismatch");
    auto out = detail::make_node(std::move(shape), {&x});
    out->value = x.node()->value;
    if (out->requires_grad) {
        out->backward_fn = [](Node& o) {
            const auto n = static_cast<Eigen::Index>(o.value.size());
            MapVec(o.parents[0]->grad_data(), n) += CMapVec(o.grad.data(), n);
        };
    }
    return Tensor(out);
}

Tensor detach(const Tensor& x) { return Tensor::from(x.shape(), {x.data().begin(), x.data().end()}); }

Tensor sum(const Tensor& x) {
    auto out = detail::make_node({1}, {&x});
    double s = 0.0;
    for (double v : x.data()) s += v;
    out->value[0] = s;
    if (out->requires_grad) {
        out->backward_fn = [](Node& o) {
            Node& p = *o.parents[0];
            double* g = p.grad_data();
            for (std::size_t i = 0; i < p.value.size(); ++i) g[i] += o.grad[0];
        };
    }
    return Tensor(out);
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor row_sums(const Tensor& x) {
    require_rank(x, 2, "row_sums");
    const int m = x.dim(0), n = x.dim(1);
    auto out = detail::make_node({m}, {&x});
    for (int i = 0; i < m; ++i) {
        double s = 0.0;
        for (int j = 0; j < n; ++j) s += x.data()[static_cast<std::size_t>(i) * n + j];
        out->value[static_cast<std::size_t>(i)] = s;
    }
    if (out->requires_grad) {
        out->backward_fn = [m, n](Node& o) {
            double* g = o.parents[0]->grad_data();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) g[static_cast<std::size_t>(i) * n + j] += o.grad[static_cast<std::size_t>(i)];
        };
    }
    return Tensor(out);
}

Tensor mse(const Tensor& a, const Tensor& b) {
    auto d = sub(a, b);
    return mean(mul(d, d));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) throw ShapeError("matmul: inner dimension mismatch");
    auto out = detail::make_node({m, n}, {&a, &b});
    MapMat(out->value.data(), m, n).noalias() = cmat(*a.node(), m, k) * cmat(*b.node(), k, n);
    if (out->requires_grad) {
        out->backward_fn = [m, k, n](Node& o) {
            Node& pa = *o.parents[0];
            Node& pb = *o.parents[1];
            CMapMat g(o.grad.data(), m, n);
            if (pa.requires_grad) MapMat(pa.grad_data(), m, k).noalias() += g * cmat(pb, k, n).transpose();
            if (pb.requires_grad) MapMat(pb.grad_data(), k, n).noalias() += cmat(pa, m, k).transpose() * g;
        };
    }
    return Tensor(out);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    require_rank(x, 2, "linear");
    require_rank(w, 2, "linear");
    const int m = x.dim(0), in = x.dim(1), outd = w.dim(1);
    if (w.dim(0) != in) throw ShapeError("linear: input width mismatch");
    if (bias.numel() != static_cast<std::size_t>(outd)) throw ShapeError("linear: bias width mismatch");
    auto out = detail::make_node({m, outd}, {&x, &w, &bias});
    MapMat y(out->value.data(), m, outd);
    y.noalias() = cmat(*x.node(), m, in) * cmat(*w.node(), in, outd);
    y.rowwise() += CMapVec(bias.data().data(), outd).transpose();
    if (out->requires_grad) {
        out->backward_fn = [m, in, outd](Node& o) {
            Node& px = *o.parents[0];
            Node& pw = *o.parents[1];
            Node& pb = *o.parents[2];
            CMapMat g(o.grad.data(), m, outd);
            if (px.requires_grad) MapMat(px.grad_data(), m, in).noalias() += g * cmat(pw, in, outd).transpose();
            if (pw.requires_grad) MapMat(pw.grad_data(), in, outd).noalias() += cmat(px, m, in).transpose() * g;
            if (pb.requires_grad) MapVec(pb.grad_data(), outd) += g.colwise().sum().transpose();
        };
    }
    return Tensor(out);
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
    require_rank(table, 2, "gather_rows");
    const int rows = table.dim(0), d = table.dim(1);
    std::vector<int> idx(ids.begin(), ids.end());
    for (int i : idx)
        if (i < 0 || i >= rows) throw ShapeError("gather_rows: index out of range");
    auto out = detail::make_node({static_cast<int>(idx.size()), d}, {&table});
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy_n(table.data().data() + static_cast<std::size_t>(idx[r]) * d, d,
                    out->value.data() + r * d);
    if (out->requires_grad) {
        out->backward_fn = [idx = std::move(idx), d](Node& o) {
            double* g = o.parents[0]->grad_data();
            for (std::size_t r = 0; r < idx.size(); ++r) {
                double* dst = g + static_cast<std::size_t>(idx[r]) * d;
                const double* src = o.grad.data() + r * d;
                for (int j = 0; j < d; ++j) dst[j] += src[j];
            }
        };
    }
    return Tensor(out);
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const int d = parts[0].dim(1);
    int rows = 0;
    for (const auto& p : parts) {
        require_rank(p, 2, "concat_rows");
        if (p.dim(1) != d) throw ShapeError("concat_rows: width mismatch");
        rows += p.dim(0);
    }
    auto out = detail::make_node({rows, d}, parts);
    std::size_t offset = 0;
    for (const auto& p : parts) {
        std::copy(p.data().begin(), p.data().end(), out->value.begin() + static_cast<std::ptrdiff_t>(offset));
        offset += p.numel();
    }
    if (out->requires_grad) {
        out->backward_fn = [](Node& o) {
            std::size_t off = 0;
            for (auto& p : o.parents) {
                if (p->requires_grad) {
                    double* g = p->grad_data();
                    for (std::size_t i = 0; i < p->value.size(); ++i) g[i] += o.grad[off + i];
                }
                off += p->value.size();
            }
        };
    }
    return Tensor(out);
}

Tensor apply_rowwise_operator(const Tensor& x, const ConstMatrix& op, int groups) {
    require_rank(x, 2, "apply_rowwise_operator");
    const int c = x.dim(1);
    if (groups <= 0 || x.dim(0) != groups * op.cols) throw ShapeError("apply_rowwise_operator: row count mismatch");
    const int n_in = op.cols, n_out = op.rows;
    auto out = detail::make_node({groups * n_out, c}, {&x});
    CMapMat a(op.values.data(), n_out, n_in);
    for (int g = 0; g < groups; ++g) {
        MapMat(out->value.data() + static_cast<std::size_t>(g) * n_out * c, n_out, c).noalias() =
            a * CMapMat(x.data().data() + static_cast<std::size_t>(g) * n_in * c, n_in, c);
    }
    if (out->requires_grad) {
        out->backward_fn = [op, groups, c](Node& o) {
            const int n_in = op.cols, n_out = op.rows;
            CMapMat a(op.values.data(), n_out, n_in);
            double* g = o.parents[0]->grad_data();
            for (int b = 0; b < groups; ++b) {
                MapMat(g + static_cast<std::size_t>(b) * n_in * c, n_in, c).noalias() +=
                    a.transpose() * CMapMat(o.grad.data() + static_cast<std::size_t>(b) * n_out * c, n_out, c);
            }
        };
    }
    return Tensor(out);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require_rank(x, 2, "layer_norm");
    const int m = x.dim(0), n = x.dim(1);
    if (gamma.numel() != static_cast<std::size_t>(n) || beta.numel() != static_cast<std::size_t>(n))
        throw ShapeError("layer_norm: affine width mismatch");
    auto out = detail::make_node({m, n}, {&x, &gamma, &beta});
    Buffer xhat(static_cast<std::size_t>(m) * n);
    Buffer rstd(static_cast<std::size_t>(m));
    const double* xv = x.data().data();
    for (int i = 0; i < m; ++i) {
        const double* row = xv + static_cast<std::size_t>(i) * n;
        double mu = 0.0;
        for (int j = 0; j < n; ++j) mu += row[j];
        mu /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= n;
        const double r = 1.0 / std::sqrt(var + eps);
        rstd[static_cast<std::size_t>(i)] = r;
        for (int j = 0; j < n; ++j) {
            const std::size_t k = static_cast<std::size_t>(i) * n + j;
            xhat[k] = (row[j] - mu) * r;
            out->value[k] = xhat[k] * gamma.data()[static_cast<std::size_t>(j)] + beta.data()[static_cast<std::size_t>(j)];
        }
    }
    if (out->requires_grad) {
        out->backward_fn = [m, n, xhat = std::move(xhat), rstd = std::move(rstd)](Node& o) {
            Node& px = *o.parents[0];
            Node& pg = *o.parents[1];
            Node& pb = *o.parents[2];
            const double* gm = pg.value.data();
            double* dx = px.requires_grad ? px.grad_data() : nullptr;
            double* dg = pg.requires_grad ? pg.grad_data() : nullptr;
            double* db = pb.requires_grad ? pb.grad_data() : nullptr;
            Buffer dxhat(static_cast<std::size_t>(n));
            for (int i = 0; i < m; ++i) {
                const std::size_t base = static_cast<std::size_t>(i) * n;
                double mean_d = 0.0, mean_dx = 0.0;
                for (int j = 0; j < n; ++j) {
                    const double gy = o.grad[base + j];
                    if (dg) dg[j] += gy * xhat[base + j];
                    if (db) db[j] += gy;
                    dxhat[static_cast<std::size_t>(j)] = gy * gm[j];
                    mean_d += dxhat[static_cast<std::size_t>(j)];
                    mean_dx += dxhat[static_cast<std::size_t>(j)] * xhat[base + j];
                }
                if (!dx) continue;
                mean_d /= n;
                mean_dx /= n;
                const double r = rstd[static_cast<std::size_t>(i)];
                for (int j = 0; j < n; ++j)
                    dx[base + j] += r * (dxhat[static_cast<std::size_t>(j)] - mean_d - xhat[base + j] * mean_dx);
            }
        };
    }
    return Tensor(out);
}

Tensor log_softmax_gather(const Tensor& logits, std::span<const int> targets) {
    require_rank(logits, 2, "log_softmax_gather");
    const int m = logits.dim(0), v = logits.dim(1);
    if (static_cast<int>(targets.size()) != m) throw ShapeError("log_softmax_gather: target count mismatch");
    std::vector<int> tgt(targets.begin(), targets.end());
    for (int t : tgt)
        if (t < 0 || t >= v) throw ShapeError("log_softmax_gather: target out of range");
    auto out = detail::make_node({m}, {&logits});
    Buffer lse(static_cast<std::size_t>(m));
    const double* lv = logits.data().data();
    for (int i = 0; i < m; ++i) {
        const double* row = lv + static_cast<std::size_t>(i) * v;
        const double mx = *std::max_element(row, row + v);
        double s = 0.0;
        for (int j = 0; j < v; ++j) s += std::exp(row[j] - mx);
        lse[static_cast<std::size_t>(i)] = mx + std::log(s);
        out->value[static_cast<std::size_t>(i)] = row[tgt[static_cast<std::size_t>(i)]] - lse[static_cast<std::size_t>(i)];
    }
    if (out->requires_grad) {
        out->backward_fn = [m, v, tgt = std::move(tgt), lse = std::move(lse)](Node& o) {
            Node& p = *o.parents[0];
            double* g = p.grad_data();
            for (int i = 0; i < m; ++i) {
                const double gi = o.grad[static_cast<std::size_t>(i)];
                if (gi == 0.0) continue;
                const std::size_t base = static_cast<std::size_t>(i) * v;
                const double l = lse[static_cast<std::size_t>(i)];
                for (int j = 0; j < v; ++j) g[base + j] -= gi * std::exp(p.value[base + j] - l);
                g[base + tgt[static_cast<std::size_t>(i)]] += gi;
            }
        };
    }
    return Tensor(out);
}

Tensor to_channels_last(const Tensor& x) {
    require_rank(x, 4, "to_channels_last");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int hw = h * w;
    auto out = detail::make_node({n * hw, c}, {&x});
    const double* src = x.data().data();
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch)
            for (int p = 0; p < hw; ++p)
                out->value[(static_cast<std::size_t>(b) * hw + p) * c + ch] =
                    src[(static_cast<std::size_t>(b) * c + ch) * hw + p];
    if (out->requires_grad) {
        out->backward_fn = [n, c, hw](Node& o) {
            double* g = o.parents[0]->grad_data();
            for (int b = 0; b < n; ++b)
                for (int ch = 0; ch < c; ++ch)
                    for (int p = 0; p < hw; ++p)
                        g[(static_cast<std::size_t>(b) * c + ch) * hw + p] +=
                            o.grad[(static_cast<std::size_t>(b) * hw + p) * c + ch];
        };
    }
    return Tensor(out);
}

Tensor to_channels_first(const Tensor& x, int n, int h, int w) {
    require_rank(x, 2, "to_channels_first");
    const int hw = h * w, c = x.dim(1);
    if (x.dim(0) != n * hw) throw ShapeError("to_channels_first: row count mismatch");
    auto out = detail::make_node({n, c, h, w}, {&x});
    const double* src = x.data().data();
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch)
            for (int p = 0; p < hw; ++p)
                out->value[(static_cast<std::size_t>(b) * c + ch) * hw + p] =
                    src[(static_cast<std::size_t>(b) * hw + p) * c + ch];
    if (out->requires_grad) {
        out->backward_fn = [n, c, hw](Node& o) {
            double* g = o.parents[0]->grad_data();
            for (int b = 0; b < n; ++b)
                for (int ch = 0; ch < c; ++ch)
                    for (int p = 0; p < hw; ++p)
                        g[(static_cast<std::size_t>(b) * hw + p) * c + ch] +=
                            o.grad[(static_cast<std::size_t>(b) * c + ch) * hw + p];
        };
    }
    return Tensor(out);
}

Tensor upsample_nearest(const Tensor& x, int factor) {
    require_rank(x, 4, "upsample_nearest");
    if (factor < 1) throw ParameterError("upsample_nearest: factor must be >= 1");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int ho = h * factor, wo = w * factor;
    auto out = detail::make_node({n, c, ho, wo}, {&x});
    const double* src = x.data().data();
    for (int plane = 0; plane < n * c; ++plane)
        for (int y = 0; y < ho; ++y)
            for (int xx = 0; xx < wo; ++xx)
                out->value[(static_cast<std::size_t>(plane) * ho + y) * wo + xx] =
                    src[(static_cast<std::size_t>(plane) * h + y / factor) * w + xx / factor];
    if (out->requires_grad) {
        out->backward_fn = [n, c, h, w, factor](Node& o) {
            const int ho = h * factor, wo = w * factor;
            double* g = o.parents[0]->grad_data();
            for (int plane = 0; plane < n * c; ++plane)
                for (int y = 0; y < ho; ++y)
                    for (int xx = 0; xx < wo; ++xx)
                        g[(static_cast<std::size_t>(plane) * h + y / factor) * w + xx / factor] +=
                            o.grad[(static_cast<std::size_t>(plane) * ho + y) * wo + xx];
        };
    }
    return Tensor(out);
}

}  // namespace avarc::nn
