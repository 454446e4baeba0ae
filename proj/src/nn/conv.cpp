#include <Eigen/Dense>

#include "avarc/error.hpp"
#include "avarc/nn/ops.hpp"

namespace avarc::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

struct ConvGeom {
    int c, h, w, k, stride, pad, ho, wo;
    int patch() const { return c * k * k; }
    int out_pixels() const { return ho * wo; }
};

void im2col(const double* img, const ConvGeom& g, double* cols) {
    const int np = g.out_pixels();
    for (int ch = 0; ch < g.c; ++ch)
        for (int ky = 0; ky < g.k; ++ky)
            for (int kx = 0; kx < g.k; ++kx) {
                double* row = cols + static_cast<std::size_t>((ch * g.k + ky) * g.k + kx) * np;
                for (int oy = 0; oy < g.ho; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    for (int ox = 0; ox < g.wo; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        row[oy * g.wo + ox] = (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w)
                                                  ? img[(static_cast<std::size_t>(ch) * g.h + iy) * g.w + ix]
                                                  : 0.0;
                    }
                }
            }
}

void col2im_add(const double* cols, const ConvGeom& g, double* img) {
    const int np = g.out_pixels();
    for (int ch = 0; ch < g.c; ++ch)
        for (int ky = 0; ky < g.k; ++ky)
            for (int kx = 0; kx < g.k; ++kx) {
                const double* row = cols + static_cast<std::size_t>((ch * g.k + ky) * g.k + kx) * np;
                for (int oy = 0; oy < g.ho; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.h) continue;
                    for (int ox = 0; ox < g.wo; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        if (ix < 0 || ix >= g.w) continue;
                        img[(static_cast<std::size_t>(ch) * g.h + iy) * g.w + ix] += row[oy * g.wo + ox];
                    }
                }
            }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
    if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv2d: expected rank-4 input and weight");
    const int n = x.dim(0);
    const int out_c = w.dim(0);
    ConvGeom g{x.dim(1), x.dim(2), x.dim(3), w.dim(2), stride, pad, 0, 0};
    if (w.dim(1) != g.c || w.dim(3) != g.k) throw ShapeError("conv2d: weight does not match input channels");
    if (bias.numel() != static_cast<std::size_t>(out_c)) throw ShapeError("conv2d: bias width mismatch");
    if (stride < 1 || pad < 0) throw ParameterError("conv2d: invalid stride or padding");
    g.ho = (g.h + 2 * pad - g.k) / stride + 1;
    g.wo = (g.w + 2 * pad - g.k) / stride + 1;
    if (g.ho < 1 || g.wo < 1) throw ShapeError("conv2d: kernel larger than padded input");

    auto out = detail::make_node({n, out_c, g.ho, g.wo}, {&x, &w, &bias});
    const int patch = g.patch(), np = g.out_pixels();
    Buffer cols(static_cast<std::size_t>(patch) * np);
    CMapMat wm(w.data().data(), out_c, patch);
    Eigen::Map<const Eigen::VectorXd> bv(bias.data().data(), out_c);
    const std::size_t in_stride = static_cast<std::size_t>(g.c) * g.h * g.w;
    const std::size_t out_stride = static_cast<std::size_t>(out_c) * np;
    for (int b = 0; b < n; ++b) {
        im2col(x.data().data() + b * in_stride, g, cols.data());
        MapMat y(out->value.data() + b * out_stride, out_c, np);
        y.noalias() = wm * CMapMat(cols.data(), patch, np);
        y.colwise() += bv;
    }

    if (out->requires_grad) {
        out->backward_fn = [g, n, out_c, in_stride, out_stride](Node& o) {
            Node& px = *o.parents[0];
            Node& pw = *o.parents[1];
            Node& pb = *o.parents[2];
            const int patch = g.patch(), np = g.out_pixels();
            Buffer cols(static_cast<std::size_t>(patch) * np);
            RowMat dcols(patch, np);
            CMapMat wm(pw.value.data(), out_c, patch);
            for (int b = 0; b < n; ++b) {
                CMapMat gy(o.grad.data() + b * out_stride, out_c, np);
                if (pb.requires_grad) {
                    Eigen::Map<Eigen::VectorXd>(pb.grad_data(), out_c) += gy.rowwise().sum();
                }
                if (pw.requires_grad) {
                    im2col(px.value.data() + b * in_stride, g, cols.data());
                    MapMat(pw.grad_data(), out_c, patch).noalias() +=
                        gy * CMapMat(cols.data(), patch, np).transpose();
                }
                if (px.requires_grad) {
                    dcols.noalias() = wm.transpose() * gy;
                    col2im_add(dcols.data(), g, px.grad_data() + b * in_stride);
                }
            }
        };
    }
    return Tensor(out);
}

}  // namespace avarc::nn
