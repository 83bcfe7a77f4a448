#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "b2f/tape.hpp"
#include "b2f/tensor.hpp"

#include <cblas.h>

namespace b2f {

namespace detail {

#ifdef B2F_COUNT_FLOPS
inline double& gemm_flops() { static double f = 0; return f; }
#endif

// C(M x N) = A(M x K) * B(K x N), row-major, optional transposes, C += if beta 1.
inline void sgemm(bool trans_a, bool trans_b, int m, int n, int k, const float* a,
                  const float* b, float* c, float beta) {
#ifdef B2F_COUNT_FLOPS
    gemm_flops() += 2.0 * m * n * k;
#endif
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, 1.0f, a,
                trans_a ? m : k, b, trans_b ? k : n, beta, c, n);
}

struct ConvGeom {
    int k, stride, dilation, padding;
    int h_in, w_in, h_out, w_out;
};

inline int conv_out_size(int in, int k, int stride, int dilation, int padding) {
    return (in + 2 * padding - dilation * (k - 1) - 1) / stride + 1;
}

// output-x range whose source column ox*stride + k_off - padding stays in bounds
inline std::pair<int, int> valid_out_range(int k_off, const ConvGeom& g) {
    const int shift = k_off - g.padding;  // ix = ox*stride + shift
    int lo = shift < 0 ? (-shift + g.stride - 1) / g.stride : 0;
    int hi = (g.w_in - 1 - shift) / g.stride + 1;
    return {std::min(std::max(lo, 0), g.w_out), std::min(std::max(hi, 0), g.w_out)};
}

// Expands one image (C,H,W) to a (C*k*k) x (h_out*w_out) column matrix.
inline void im2col(const float* im, int channels, const ConvGeom& g, float* col) {
    const int span = g.h_out * g.w_out;
#pragma omp parallel for schedule(static)
    for (int row = 0; row < channels * g.k * g.k; ++row) {
        const int c = row / (g.k * g.k);
        const int ky = (row / g.k) % g.k;
        const int kx = row % g.k;
        const auto [x_lo, x_hi] = valid_out_range(kx * g.dilation, g);
        const int x_shift = kx * g.dilation - g.padding;
        const float* src = im + int64_t(c) * g.h_in * g.w_in;
        float* dst = col + int64_t(row) * span;
        for (int oy = 0; oy < g.h_out; ++oy, dst += g.w_out) {
            const int iy = oy * g.stride + ky * g.dilation - g.padding;
            if (iy < 0 || iy >= g.h_in || x_lo >= x_hi) {
                std::fill(dst, dst + g.w_out, 0.0f);
                continue;
            }
            std::fill(dst, dst + x_lo, 0.0f);
            std::fill(dst + x_hi, dst + g.w_out, 0.0f);
            const float* src_row = src + int64_t(iy) * g.w_in + x_shift;
            if (g.stride == 1) {
                std::copy(src_row + x_lo, src_row + x_hi, dst + x_lo);
            } else {
                for (int ox = x_lo; ox < x_hi; ++ox) dst[ox] = src_row[ox * g.stride];
            }
        }
    }
}

// Adjoint of im2col: accumulates a column matrix back into the image.
inline void col2im_add(const float* col, int channels, const ConvGeom& g, float* im) {
#pragma omp parallel for schedule(static)
    for (int c = 0; c < channels; ++c) {
        for (int ky = 0; ky < g.k; ++ky) {
            for (int kx = 0; kx < g.k; ++kx) {
                const int row = (c * g.k + ky) * g.k + kx;
                const auto [x_lo, x_hi] = valid_out_range(kx * g.dilation, g);
                if (x_lo >= x_hi) continue;
                const int x_shift = kx * g.dilation - g.padding;
                const float* src = col + int64_t(row) * g.h_out * g.w_out;
                float* dst = im + int64_t(c) * g.h_in * g.w_in;
                for (int oy = 0; oy < g.h_out; ++oy) {
                    const int iy = oy * g.stride + ky * g.dilation - g.padding;
                    if (iy < 0 || iy >= g.h_in) continue;
                    const float* src_row = src + int64_t(oy) * g.w_out;
                    float* dst_row = dst + int64_t(iy) * g.w_in + x_shift;
                    if (g.stride == 1) {
                        for (int ox = x_lo; ox < x_hi; ++ox) dst_row[ox] += src_row[ox];
                    } else {
                        for (int ox = x_lo; ox < x_hi; ++ox) dst_row[ox * g.stride] += src_row[ox];
                    }
                }
            }
        }
    }
}

// Weight (C_out,C_in,k,k) rearranged to (C_in, C_out*k*k) with the kernel
// rotated 180 degrees; turns the input-gradient of a stride-1 conv into a
// plain forward conv over the output gradient.
inline ScratchBuf rotate_weights(const float* w, int c_out, int c_in, int k) {
    ScratchBuf r(size_t(c_in) * c_out * k * k);
    for (int co = 0; co < c_out; ++co)
        for (int ci = 0; ci < c_in; ++ci)
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx)
                    r[((int64_t(ci) * c_out + co) * k + (k - 1 - ky)) * k + (k - 1 - kx)] =
                        w[((int64_t(co) * c_in + ci) * k + ky) * k + kx];
    return r;
}

inline bool any_grad(std::initializer_list<const Tensor*> ts) {
    for (const Tensor* t : ts)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

}  // namespace detail

// 2-D convolution, weight (C_out, C_in, k, k), bias (1, C_out, 1, 1) or undefined.
inline Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& weight,
                     const Tensor& bias, int stride = 1, int dilation = 1,
                     int padding = 0) {
    const Shape is = input.shape(), ws = weight.shape();
    if (ws.h != ws.w) dimension_error("conv2d expects a square kernel, got " + ws.str());
    if (is.c != ws.c)
        dimension_error("conv2d input channels " + std::to_string(is.c) +
                        " != weight C_in " + std::to_string(ws.c));
    if (stride < 1 || dilation < 1 || padding < 0)
        dimension_error("conv2d bad stride/dilation/padding");
    if (bias.defined() && bias.numel() != ws.n)
        dimension_error("conv2d bias size != C_out");
    const int k = ws.h;
    detail::ConvGeom g{k, stride, dilation, padding, is.h, is.w,
                       detail::conv_out_size(is.h, k, stride, dilation, padding),
                       detail::conv_out_size(is.w, k, stride, dilation, padding)};
    if (g.h_out < 1 || g.w_out < 1)
        dimension_error("conv2d produces empty output for input " + is.str());

    const int c_out = ws.n, c_in = ws.c;
    const int span = g.h_out * g.w_out;
    const int kk = c_in * k * k;
    const bool pointwise = (k == 1 && stride == 1 && padding == 0);

    Tensor out = Tensor::uninit(Shape{is.n, c_out, g.h_out, g.w_out});
    auto cols = std::make_shared<ScratchBuf>();
    if (!pointwise) cols->resize(size_t(is.n) * kk * span);

    for (int n = 0; n < is.n; ++n) {
        const float* col;
        if (pointwise) {
            col = input.data() + int64_t(n) * c_in * span;
        } else {
            float* dst = cols->data() + int64_t(n) * kk * span;
            detail::im2col(input.data() + int64_t(n) * c_in * is.h * is.w, c_in, g, dst);
            col = dst;
        }
        detail::sgemm(false, false, c_out, span, kk, weight.data(), col,
                      out.data() + int64_t(n) * c_out * span, 0.0f);
    }
    if (bias.defined()) {
        float* o = out.data();
        for (int n = 0; n < is.n; ++n)
            for (int c = 0; c < c_out; ++c) {
                const float b = bias.data()[c];
                float* row = o + (int64_t(n) * c_out + c) * span;
                for (int i = 0; i < span; ++i) row[i] += b;
            }
    }
    check_finite(out, "conv2d");

    if (detail::any_grad({&input, &weight, &bias})) {
        out.set_requires_grad(true);
        Tensor in = input, w = weight, b = bias, o = out;
        tape.record("conv2d", [in, w, b, o, g, cols, pointwise]() mutable {
            const Shape is = in.shape(), ws = w.shape();
            const int c_out = ws.n, c_in = ws.c, k = ws.h;
            const int span = g.h_out * g.w_out;
            const int kk = c_in * k * k;
            const float* dout = o.grad();
            if (b.defined() && b.requires_grad()) {
                for (int n = 0; n < is.n; ++n)
                    for (int c = 0; c < c_out; ++c) {
                        const float* row = dout + (int64_t(n) * c_out + c) * span;
                        float acc = 0.0f;
                        for (int i = 0; i < span; ++i) acc += row[i];
                        b.grad()[c] += acc;
                    }
            }
            if (w.requires_grad()) {
                for (int n = 0; n < is.n; ++n) {
                    const float* col = pointwise ? in.data() + int64_t(n) * c_in * span
                                                 : cols->data() + int64_t(n) * kk * span;
                    detail::sgemm(false, true, c_out, kk, span,
                                  dout + int64_t(n) * c_out * span, col, w.grad(), 1.0f);
                }
            }
            if (in.requires_grad()) {
                if (pointwise) {
                    for (int n = 0; n < is.n; ++n)
                        detail::sgemm(true, false, c_in, span, c_out, w.data(),
                                      dout + int64_t(n) * c_out * span,
                                      in.grad() + int64_t(n) * c_in * span, 1.0f);
                } else if (g.stride == 1 && g.dilation * (k - 1) >= g.padding) {
                    // full correlation with the rotated kernel, one GEMM per item
                    auto rot = detail::rotate_weights(w.data(), c_out, c_in, k);
                    detail::ConvGeom gb{k, 1, g.dilation, g.dilation * (k - 1) - g.padding,
                                        g.h_out, g.w_out, is.h, is.w};
                    ScratchBuf colb(size_t(c_out) * k * k * is.h * is.w);
                    for (int n = 0; n < is.n; ++n) {
                        detail::im2col(dout + int64_t(n) * c_out * span, c_out, gb, colb.data());
                        detail::sgemm(false, false, c_in, is.h * is.w, c_out * k * k,
                                      rot.data(), colb.data(),
                                      in.grad() + int64_t(n) * c_in * is.h * is.w, 1.0f);
                    }
                } else {
                    ScratchBuf colg(size_t(kk) * span);
                    for (int n = 0; n < is.n; ++n) {
                        detail::sgemm(true, false, kk, span, c_out, w.data(),
                                      dout + int64_t(n) * c_out * span, colg.data(), 0.0f);
                        detail::col2im_add(colg.data(), c_in, g,
                                           in.grad() + int64_t(n) * c_in * is.h * is.w);
                    }
                }
            }
        });
    }
    return out;
}

// Transposed convolution, weight (C_in, C_out, k, k).
// Output spatial size: (H-1)*stride - 2*padding + k.
inline Tensor conv_transpose2d(Tape& tape, const Tensor& input, const Tensor& weight,
                               const Tensor& bias, int stride = 2, int padding = 1) {
    const Shape is = input.shape(), ws = weight.shape();
    if (ws.h != ws.w) dimension_error("conv_transpose2d expects a square kernel");
    if (is.c != ws.n)
        dimension_error("conv_transpose2d input channels " + std::to_string(is.c) +
                        " != weight C_in " + std::to_string(ws.n));
    if (bias.defined() && bias.numel() != ws.c)
        dimension_error("conv_transpose2d bias size != C_out");
    const int k = ws.h, c_in = ws.n, c_out = ws.c;
    const int h_out = (is.h - 1) * stride - 2 * padding + k;
    const int w_out = (is.w - 1) * stride - 2 * padding + k;
    if (h_out < 1 || w_out < 1)
        dimension_error("conv_transpose2d produces empty output for " + is.str());

    // geometry of the adjoint conv mapping output back to input size
    detail::ConvGeom g{k, stride, 1, padding, h_out, w_out, is.h, is.w};
    const int span_in = is.h * is.w;
    const int kk = c_out * k * k;

    Tensor out(Shape{is.n, c_out, h_out, w_out});
    ScratchBuf col(size_t(kk) * span_in);
    for (int n = 0; n < is.n; ++n) {
        // col(C_out*k*k x span_in) = W^T(C_out*k*k x C_in) * in(C_in x span_in)
        detail::sgemm(true, false, kk, span_in, c_in,
                      weight.data(), input.data() + int64_t(n) * c_in * span_in,
                      col.data(), 0.0f);
        detail::col2im_add(col.data(), c_out, g, out.data() + int64_t(n) * c_out * h_out * w_out);
    }
    if (bias.defined()) {
        const int span_out = h_out * w_out;
        for (int n = 0; n < is.n; ++n)
            for (int c = 0; c < c_out; ++c) {
                const float b = bias.data()[c];
                float* row = out.data() + (int64_t(n) * c_out + c) * span_out;
                for (int i = 0; i < span_out; ++i) row[i] += b;
            }
    }
    check_finite(out, "conv_transpose2d");

    if (detail::any_grad({&input, &weight, &bias})) {
        out.set_requires_grad(true);
        Tensor in = input, w = weight, b = bias, o = out;
        tape.record("conv_transpose2d", [in, w, b, o, g]() mutable {
            const Shape is = in.shape(), ws = w.shape();
            const int k = ws.h, c_in = ws.n, c_out = ws.c;
            const int span_in = is.h * is.w;
            const int span_out = g.h_in * g.w_in;
            const int kk = c_out * k * k;
            const float* dout = o.grad();
            if (b.defined() && b.requires_grad()) {
                for (int n = 0; n < is.n; ++n)
                    for (int c = 0; c < c_out; ++c) {
                        const float* row = dout + (int64_t(n) * c_out + c) * span_out;
                        float acc = 0.0f;
                        for (int i = 0; i < span_out; ++i) acc += row[i];
                        b.grad()[c] += acc;
                    }
            }
            if (!in.requires_grad() && !w.requires_grad()) return;
            ScratchBuf cold(size_t(kk) * span_in);
            for (int n = 0; n < is.n; ++n) {
                detail::im2col(dout + int64_t(n) * c_out * span_out, c_out, g, cold.data());
                if (in.requires_grad())
                    detail::sgemm(false, false, c_in, span_in, kk, w.data(), cold.data(),
                                  in.grad() + int64_t(n) * c_in * span_in, 1.0f);
                if (w.requires_grad())
                    detail::sgemm(false, true, c_in, kk, span_in,
                                  in.data() + int64_t(n) * c_in * span_in, cold.data(),
                                  w.grad(), 1.0f);
            }
        });
    }
    return out;
}

inline Tensor relu(Tape& tape, const Tensor& input) {
    Tensor out = Tensor::uninit(input.shape());
    const float* x = input.data();
    float* y = out.data();
    const int64_t n = input.numel();
    for (int64_t i = 0; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
    if (input.requires_grad()) {
        out.set_requires_grad(true);
        Tensor in = input, o = out;
        tape.record("relu", [in, o]() mutable {
            const float* y = o.data();
            const float* dy = o.grad();
            float* dx = in.grad();
            const int64_t n = in.numel();
            for (int64_t i = 0; i < n; ++i)
                if (y[i] > 0.0f) dx[i] += dy[i];
        });
    }
    return out;
}

inline Tensor concat_channels(Tape& tape, const std::vector<Tensor>& inputs) {
    if (inputs.empty()) dimension_error("concat_channels needs at least one input");
    const Shape s0 = inputs[0].shape();
    int c_total = 0;
    bool needs_grad = false;
    for (const Tensor& t : inputs) {
        const Shape s = t.shape();
        if (s.n != s0.n || s.h != s0.h || s.w != s0.w)
            dimension_error("concat_channels spatial mismatch: " + s.str() + " vs " + s0.str());
        c_total += s.c;
        needs_grad |= t.requires_grad();
    }
    Tensor out = Tensor::uninit(Shape{s0.n, c_total, s0.h, s0.w});
    const int span = s0.h * s0.w;
    for (int n = 0; n < s0.n; ++n) {
        int c_off = 0;
        for (const Tensor& t : inputs) {
            const int c = t.shape().c;
            std::copy_n(t.data() + int64_t(n) * c * span, int64_t(c) * span,
                        out.data() + (int64_t(n) * c_total + c_off) * span);
            c_off += c;
        }
    }
    if (needs_grad) {
        out.set_requires_grad(true);
        std::vector<Tensor> ins = inputs;
        Tensor o = out;
        tape.record("concat_channels", [ins, o, c_total, span]() mutable {
            const Shape s0 = ins[0].shape();
            for (int n = 0; n < s0.n; ++n) {
                int c_off = 0;
                for (Tensor& t : ins) {
                    const int c = t.shape().c;
                    if (t.requires_grad()) {
                        const float* src = o.grad() + (int64_t(n) * c_total + c_off) * span;
                        float* dst = t.grad() + int64_t(n) * c * span;
                        for (int64_t i = 0; i < int64_t(c) * span; ++i) dst[i] += src[i];
                    }
                    c_off += c;
                }
            }
        });
    }
    return out;
}

namespace detail {
// normalized coordinate of pixel i in an axis of given extent, align-corners style
inline float norm_coord(int i, int extent) {
    return extent > 1 ? 2.0f * float(i) / float(extent - 1) - 1.0f : 0.0f;
}
}  // namespace detail

// theta carries 6 values per item, row-major 2x3 [a,b,tx; c,d,ty]; the result
// is an (N,2,out_h,out_w) grid of normalized source coordinates (x then y).
inline Tensor affine_grid(Tape& tape, const Tensor& theta, int out_h, int out_w) {
    const Shape ts = theta.shape();
    if (int64_t(ts.c) * ts.h * ts.w != 6)
        dimension_error("affine_grid theta must hold 6 values per item, got " + ts.str());
    Tensor out = Tensor::uninit(Shape{ts.n, 2, out_h, out_w});
    const int span = out_h * out_w;
    for (int n = 0; n < ts.n; ++n) {
        const float* th = theta.data() + int64_t(n) * 6;
        float* gx = out.data() + int64_t(n) * 2 * span;
        float* gy = gx + span;
        for (int y = 0; y < out_h; ++y) {
            const float yt = detail::norm_coord(y, out_h);
            for (int x = 0; x < out_w; ++x) {
                const float xt = detail::norm_coord(x, out_w);
                gx[y * out_w + x] = th[0] * xt + th[1] * yt + th[2];
                gy[y * out_w + x] = th[3] * xt + th[4] * yt + th[5];
            }
        }
    }
    if (theta.requires_grad()) {
        out.set_requires_grad(true);
        Tensor th = theta, o = out;
        tape.record("affine_grid", [th, o, out_h, out_w]() mutable {
            const int span = out_h * out_w;
            for (int n = 0; n < th.shape().n; ++n) {
                float* dth = th.grad() + int64_t(n) * 6;
                const float* dgx = o.grad() + int64_t(n) * 2 * span;
                const float* dgy = dgx + span;
                double acc[6] = {0, 0, 0, 0, 0, 0};
                for (int y = 0; y < out_h; ++y) {
                    const float yt = detail::norm_coord(y, out_h);
                    for (int x = 0; x < out_w; ++x) {
                        const float xt = detail::norm_coord(x, out_w);
                        const float gx = dgx[y * out_w + x], gy = dgy[y * out_w + x];
                        acc[0] += double(gx) * xt;
                        acc[1] += double(gx) * yt;
                        acc[2] += gx;
                        acc[3] += double(gy) * xt;
                        acc[4] += double(gy) * yt;
                        acc[5] += gy;
                    }
                }
                for (int i = 0; i < 6; ++i) dth[i] += float(acc[i]);
            }
        });
    }
    return out;
}

namespace detail {
struct SamplePoint {
    int x0, y0;
    float wx, wy;
};
inline SamplePoint locate(float gx, float gy, int w, int h) {
    const float xs = (gx + 1.0f) * 0.5f * float(w - 1);
    const float ys = (gy + 1.0f) * 0.5f * float(h - 1);
    const int x0 = int(std::floor(xs)), y0 = int(std::floor(ys));
    return {x0, y0, xs - float(x0), ys - float(y0)};
}
}  // namespace detail

// Bilinear sampling of input at normalized grid coordinates, zero padding
// outside the image. Differentiable w.r.t. both input and grid.
inline Tensor grid_sample(Tape& tape, const Tensor& input, const Tensor& grid) {
    const Shape is = input.shape(), gs = grid.shape();
    if (gs.c != 2) dimension_error("grid_sample grid must have 2 channels, got " + gs.str());
    if (gs.n != is.n) dimension_error("grid_sample batch mismatch");
    Tensor out = Tensor::uninit(Shape{is.n, is.c, gs.h, gs.w});
    const int span_in = is.h * is.w, span_out = gs.h * gs.w;

    for (int n = 0; n < is.n; ++n) {
        const float* in = input.data() + int64_t(n) * is.c * span_in;
        const float* gx = grid.data() + int64_t(n) * 2 * span_out;
        const float* gy = gx + span_out;
        float* o = out.data() + int64_t(n) * is.c * span_out;
        for (int p = 0; p < span_out; ++p) {
            const auto s = detail::locate(gx[p], gy[p], is.w, is.h);
            const bool in_x0 = s.x0 >= 0 && s.x0 < is.w, in_x1 = s.x0 + 1 >= 0 && s.x0 + 1 < is.w;
            const bool in_y0 = s.y0 >= 0 && s.y0 < is.h, in_y1 = s.y0 + 1 >= 0 && s.y0 + 1 < is.h;
            for (int c = 0; c < is.c; ++c) {
                const float* plane = in + int64_t(c) * span_in;
                float v = 0.0f;
                if (in_y0) {
                    if (in_x0) v += (1 - s.wx) * (1 - s.wy) * plane[s.y0 * is.w + s.x0];
                    if (in_x1) v += s.wx * (1 - s.wy) * plane[s.y0 * is.w + s.x0 + 1];
                }
                if (in_y1) {
                    if (in_x0) v += (1 - s.wx) * s.wy * plane[(s.y0 + 1) * is.w + s.x0];
                    if (in_x1) v += s.wx * s.wy * plane[(s.y0 + 1) * is.w + s.x0 + 1];
                }
                o[int64_t(c) * span_out + p] = v;
            }
        }
    }
    check_finite(out, "grid_sample");

    if (detail::any_grad({&input, &grid})) {
        out.set_requires_grad(true);
        Tensor in = input, g = grid, o = out;
        tape.record("grid_sample", [in, g, o]() mutable {
            const Shape is = in.shape(), gs = g.shape();
            const int span_in = is.h * is.w, span_out = gs.h * gs.w;
            const float sx = 0.5f * float(is.w - 1), sy = 0.5f * float(is.h - 1);
            for (int n = 0; n < is.n; ++n) {
                const float* inp = in.data() + int64_t(n) * is.c * span_in;
                const float* gx = g.data() + int64_t(n) * 2 * span_out;
                const float* gy = gx + span_out;
                const float* dout = o.grad() + int64_t(n) * is.c * span_out;
                float* din = in.requires_grad() ? in.grad() + int64_t(n) * is.c * span_in : nullptr;
                float* dgx = g.requires_grad() ? g.grad() + int64_t(n) * 2 * span_out : nullptr;
                float* dgy = dgx ? dgx + span_out : nullptr;
                for (int p = 0; p < span_out; ++p) {
                    const auto s = detail::locate(gx[p], gy[p], is.w, is.h);
                    const bool in_x0 = s.x0 >= 0 && s.x0 < is.w,
                               in_x1 = s.x0 + 1 >= 0 && s.x0 + 1 < is.w;
                    const bool in_y0 = s.y0 >= 0 && s.y0 < is.h,
                               in_y1 = s.y0 + 1 >= 0 && s.y0 + 1 < is.h;
                    float acc_x = 0.0f, acc_y = 0.0f;
                    for (int c = 0; c < is.c; ++c) {
                        const float go = dout[int64_t(c) * span_out + p];
                        if (go == 0.0f) continue;
                        const float* plane = inp + int64_t(c) * span_in;
                        float* dplane = din ? din + int64_t(c) * span_in : nullptr;
                        const float v00 = (in_y0 && in_x0) ? plane[s.y0 * is.w + s.x0] : 0.0f;
                        const float v01 = (in_y0 && in_x1) ? plane[s.y0 * is.w + s.x0 + 1] : 0.0f;
                        const float v10 = (in_y1 && in_x0) ? plane[(s.y0 + 1) * is.w + s.x0] : 0.0f;
                        const float v11 = (in_y1 && in_x1) ? plane[(s.y0 + 1) * is.w + s.x0 + 1] : 0.0f;
                        if (dplane) {
                            if (in_y0 && in_x0) dplane[s.y0 * is.w + s.x0] += (1 - s.wx) * (1 - s.wy) * go;
                            if (in_y0 && in_x1) dplane[s.y0 * is.w + s.x0 + 1] += s.wx * (1 - s.wy) * go;
                            if (in_y1 && in_x0) dplane[(s.y0 + 1) * is.w + s.x0] += (1 - s.wx) * s.wy * go;
                            if (in_y1 && in_x1) dplane[(s.y0 + 1) * is.w + s.x0 + 1] += s.wx * s.wy * go;
                        }
                        acc_x += go * ((v01 - v00) * (1 - s.wy) + (v11 - v10) * s.wy);
                        acc_y += go * ((v10 - v00) * (1 - s.wx) + (v11 - v01) * s.wx);
                    }
                    if (dgx) {
                        dgx[p] += acc_x * sx;
                        dgy[p] += acc_y * sy;
                    }
                }
            }
        });
    }
    return out;
}

// Cost volume: channel (dy+d)*(2d+1)+(dx+d) holds the channel-mean dot
// product of f1 at (y,x) with f2 at (y+dy,x+dx), zero padded outside f2.
inline Tensor correlation(Tape& tape, const Tensor& f1, const Tensor& f2, int max_disp) {
    const Shape s = f1.shape();
    if (!(f2.shape() == s)) dimension_error("correlation inputs must share shape, got " +
                                            s.str() + " vs " + f2.shape().str());
    if (max_disp < 1) dimension_error("correlation max_disp must be >= 1");
    const int d = max_disp, side = 2 * d + 1;
    Tensor out(Shape{s.n, side * side, s.h, s.w});
    const int span = s.h * s.w;
    const float inv_c = 1.0f / float(s.c);
    for (int n = 0; n < s.n; ++n) {
        const float* a = f1.data() + int64_t(n) * s.c * span;
        const float* b = f2.data() + int64_t(n) * s.c * span;
        float* o = out.data() + int64_t(n) * side * side * span;
#pragma omp parallel for schedule(static)
        for (int ch = 0; ch < side * side; ++ch) {
            const int dy = ch / side - d, dx = ch % side - d;
            float* plane = o + int64_t(ch) * span;
            const int y_lo = std::max(0, -dy), y_hi = std::min(s.h, s.h - dy);
            const int x_lo = std::max(0, -dx), x_hi = std::min(s.w, s.w - dx);
            for (int c = 0; c < s.c; ++c) {
                const float* ap = a + int64_t(c) * span;
                const float* bp = b + int64_t(c) * span + dy * s.w + dx;
                for (int y = y_lo; y < y_hi; ++y)
                    for (int x = x_lo; x < x_hi; ++x)
                        plane[y * s.w + x] += ap[y * s.w + x] * bp[y * s.w + x];
            }
            for (int i = 0; i < span; ++i) plane[i] *= inv_c;
        }
    }
    check_finite(out, "correlation");

    if (detail::any_grad({&f1, &f2})) {
        out.set_requires_grad(true);
        Tensor a = f1, b = f2, o = out;
        tape.record("correlation", [a, b, o, d, side, inv_c]() mutable {
            const Shape s = a.shape();
            const int span = s.h * s.w;
            for (int n = 0; n < s.n; ++n) {
                const float* ap = a.data() + int64_t(n) * s.c * span;
                const float* bp = b.data() + int64_t(n) * s.c * span;
                const float* dout = o.grad() + int64_t(n) * side * side * span;
                float* da = a.requires_grad() ? a.grad() + int64_t(n) * s.c * span : nullptr;
                float* db = b.requires_grad() ? b.grad() + int64_t(n) * s.c * span : nullptr;
#pragma omp parallel for schedule(static)
                for (int c = 0; c < s.c; ++c) {
                    for (int ch = 0; ch < side * side; ++ch) {
                        const int dy = ch / side - d, dx = ch % side - d;
                        const float* gplane = dout + int64_t(ch) * span;
                        const int y_lo = std::max(0, -dy), y_hi = std::min(s.h, s.h - dy);
                        const int x_lo = std::max(0, -dx), x_hi = std::min(s.w, s.w - dx);
                        const int off = dy * s.w + dx;
                        for (int y = y_lo; y < y_hi; ++y)
                            for (int x = x_lo; x < x_hi; ++x) {
                                const int i = y * s.w + x;
                                const float gv = gplane[i] * inv_c;
                                if (da) da[int64_t(c) * span + i] += gv * bp[int64_t(c) * span + i + off];
                                if (db) db[int64_t(c) * span + i + off] += gv * ap[int64_t(c) * span + i];
                            }
                    }
                }
            }
        });
    }
    return out;
}

// Bilinear resampling to a new spatial size (half-pixel-center convention,
// edges clamped). Values are interpolated, never rescaled.
inline Tensor bilinear_resize(Tape& tape, const Tensor& input, int out_h, int out_w) {
    const Shape is = input.shape();
    if (out_h < 1 || out_w < 1) dimension_error("bilinear_resize target must be >= 1");
    Tensor out = Tensor::uninit(Shape{is.n, is.c, out_h, out_w});
    const float scale_y = float(is.h) / float(out_h);
    const float scale_x = float(is.w) / float(out_w);
    const int span_in = is.h * is.w, span_out = out_h * out_w;

    struct Tap {
        int i0, i1;
        float w1;
    };
    auto make_taps = [](int out_n, int in_n, float scale) {
        std::vector<Tap> taps(out_n);
        for (int o = 0; o < out_n; ++o) {
            float src = (float(o) + 0.5f) * scale - 0.5f;
            src = std::min(std::max(src, 0.0f), float(in_n - 1));
            const int i0 = std::min(int(src), in_n - 1);
            taps[o] = {i0, std::min(i0 + 1, in_n - 1), src - float(i0)};
        }
        return taps;
    };
    const auto tx = make_taps(out_w, is.w, scale_x);
    const auto ty = make_taps(out_h, is.h, scale_y);

    for (int nc = 0; nc < is.n * is.c; ++nc) {
        const float* in = input.data() + int64_t(nc) * span_in;
        float* o = out.data() + int64_t(nc) * span_out;
        for (int y = 0; y < out_h; ++y) {
            const Tap& t_y = ty[y];
            for (int x = 0; x < out_w; ++x) {
                const Tap& t_x = tx[x];
                const float top = in[t_y.i0 * is.w + t_x.i0] * (1 - t_x.w1) +
                                  in[t_y.i0 * is.w + t_x.i1] * t_x.w1;
                const float bot = in[t_y.i1 * is.w + t_x.i0] * (1 - t_x.w1) +
                                  in[t_y.i1 * is.w + t_x.i1] * t_x.w1;
                o[y * out_w + x] = top * (1 - t_y.w1) + bot * t_y.w1;
            }
        }
    }
    if (input.requires_grad()) {
        out.set_requires_grad(true);
        Tensor in = input, o = out;
        tape.record("bilinear_resize", [in, o, tx, ty, span_in, span_out, out_h, out_w]() mutable {
            const Shape is = in.shape();
            for (int nc = 0; nc < is.n * is.c; ++nc) {
                float* din = in.grad() + int64_t(nc) * span_in;
                const float* dout = o.grad() + int64_t(nc) * span_out;
                for (int y = 0; y < out_h; ++y) {
                    const Tap& t_y = ty[y];
                    for (int x = 0; x < out_w; ++x) {
                        const Tap& t_x = tx[x];
                        const float g = dout[y * out_w + x];
                        din[t_y.i0 * is.w + t_x.i0] += g * (1 - t_x.w1) * (1 - t_y.w1);
                        din[t_y.i0 * is.w + t_x.i1] += g * t_x.w1 * (1 - t_y.w1);
                        din[t_y.i1 * is.w + t_x.i0] += g * (1 - t_x.w1) * t_y.w1;
                        din[t_y.i1 * is.w + t_x.i1] += g * t_x.w1 * t_y.w1;
                    }
                }
            }
        });
    }
    return out;
}

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    if (!(a.shape() == b.shape()))
        dimension_error("add shape mismatch: " + a.shape().str() + " vs " + b.shape().str());
    Tensor out = Tensor::uninit(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (detail::any_grad({&a, &b})) {
        out.set_requires_grad(true);
        Tensor ta = a, tb = b, o = out;
        tape.record("add", [ta, tb, o]() mutable {
            const int64_t n = o.numel();
            const float* g = o.grad();
            if (ta.requires_grad())
                for (int64_t i = 0; i < n; ++i) ta.grad()[i] += g[i];
            if (tb.requires_grad())
                for (int64_t i = 0; i < n; ++i) tb.grad()[i] += g[i];
        });
    }
    return out;
}

inline Tensor scale(Tape& tape, const Tensor& a, float s) {
    Tensor out = Tensor::uninit(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * s;
    if (a.requires_grad()) {
        out.set_requires_grad(true);
        Tensor ta = a;
        Tensor o = out;
        tape.record("scale", [ta, o, s]() mutable {
            const int64_t n = o.numel();
            for (int64_t i = 0; i < n; ++i) ta.grad()[i] += o.grad()[i] * s;
        });
    }
    return out;
}

inline Tensor global_avg_pool(Tape& tape, const Tensor& input) {
    const Shape is = input.shape();
    Tensor out(Shape{is.n, is.c, 1, 1});
    const int span = is.h * is.w;
    const float inv = 1.0f / float(span);
    for (int nc = 0; nc < is.n * is.c; ++nc) {
        const float* p = input.data() + int64_t(nc) * span;
        double acc = 0.0;
        for (int i = 0; i < span; ++i) acc += p[i];
        out.data()[nc] = float(acc * inv);
    }
    if (input.requires_grad()) {
        out.set_requires_grad(true);
        Tensor in = input, o = out;
        tape.record("global_avg_pool", [in, o, span, inv]() mutable {
            const Shape is = in.shape();
            for (int nc = 0; nc < is.n * is.c; ++nc) {
                const float g = o.grad()[nc] * inv;
                float* dp = in.grad() + int64_t(nc) * span;
                for (int i = 0; i < span; ++i) dp[i] += g;
            }
        });
    }
    return out;
}

inline Tensor sum_all(Tape& tape, const Tensor& input) {
    Tensor out(Shape{1, 1, 1, 1});
    double acc = 0.0;
    const int64_t n = input.numel();
    for (int64_t i = 0; i < n; ++i) acc += input.data()[i];
    out.data()[0] = float(acc);
    if (input.requires_grad()) {
        out.set_requires_grad(true);
        Tensor in = input, o = out;
        tape.record("sum_all", [in, o]() mutable {
            const float g = o.grad()[0];
            float* dp = in.grad();
            const int64_t n = in.numel();
            for (int64_t i = 0; i < n; ++i) dp[i] += g;
        });
    }
    return out;
}

// Mean endpoint error between a 2-channel prediction and a constant target:
// mean over batch and pixels of the per-pixel Euclidean distance.
inline Tensor epe_mean(Tape& tape, const Tensor& pred, const Tensor& target) {
    const Shape s = pred.shape();
    if (s.c != 2) dimension_error("epe_mean expects 2-channel flow, got " + s.str());
    if (!(target.shape() == s))
        dimension_error("epe_mean shape mismatch: " + s.str() + " vs " + target.shape().str());
    const int span = s.h * s.w;
    const float inv = 1.0f / float(int64_t(s.n) * span);
    Tensor out(Shape{1, 1, 1, 1});
    double acc = 0.0;
    for (int n = 0; n < s.n; ++n) {
        const float* pu = pred.data() + int64_t(n) * 2 * span;
        const float* pv = pu + span;
        const float* tu = target.data() + int64_t(n) * 2 * span;
        const float* tv = tu + span;
        for (int i = 0; i < span; ++i) {
            const float du = pu[i] - tu[i], dv = pv[i] - tv[i];
            acc += std::sqrt(double(du) * du + double(dv) * dv);
        }
    }
    out.data()[0] = float(acc * inv);
    if (pred.requires_grad()) {
        out.set_requires_grad(true);
        Tensor p = pred, t = target, o = out;
        tape.record("epe_mean", [p, t, o, span, inv]() mutable {
            const Shape s = p.shape();
            const float g = o.grad()[0] * inv;
            for (int n = 0; n < s.n; ++n) {
                const float* pu = p.data() + int64_t(n) * 2 * span;
                const float* pv = pu + span;
                const float* tu = t.data() + int64_t(n) * 2 * span;
                const float* tv = tu + span;
                float* gu = p.grad() + int64_t(n) * 2 * span;
                float* gv = gu + span;
                for (int i = 0; i < span; ++i) {
                    const float du = pu[i] - tu[i], dv = pv[i] - tv[i];
                    const float dist = std::sqrt(du * du + dv * dv);
                    if (dist > 0.0f) {
                        gu[i] += g * du / dist;
                        gv[i] += g * dv / dist;
                    }
                }
            }
        });
    }
    return out;
}

// Backward warp: samples feature at (x + u, y + v) where flow is in pixel
// units at the feature's own resolution. Built from a normalized grid plus
// grid_sample, so gradients reach both the feature and the flow.
inline Tensor warp(Tape& tape, const Tensor& feature, const Tensor& flow) {
    const Shape fs = feature.shape(), vs = flow.shape();
    if (vs.c != 2) dimension_error("warp flow must have 2 channels");
    if (vs.n != fs.n || vs.h != fs.h || vs.w != fs.w)
        dimension_error("warp flow spatial mismatch: " + vs.str() + " vs " + fs.str());
    const int span = fs.h * fs.w;
    // grid = base + 2*flow/(extent-1); linear in flow
    Tensor grid = Tensor::uninit(Shape{fs.n, 2, fs.h, fs.w});
    const float cx = fs.w > 1 ? 2.0f / float(fs.w - 1) : 0.0f;
    const float cy = fs.h > 1 ? 2.0f / float(fs.h - 1) : 0.0f;
    for (int n = 0; n < fs.n; ++n) {
        const float* u = flow.data() + int64_t(n) * 2 * span;
        const float* v = u + span;
        float* gx = grid.data() + int64_t(n) * 2 * span;
        float* gy = gx + span;
        for (int y = 0; y < fs.h; ++y)
            for (int x = 0; x < fs.w; ++x) {
                const int i = y * fs.w + x;
                gx[i] = detail::norm_coord(x, fs.w) + cx * u[i];
                gy[i] = detail::norm_coord(y, fs.h) + cy * v[i];
            }
    }
    if (flow.requires_grad()) {
        grid.set_requires_grad(true);
        Tensor f = flow, g = grid;
        tape.record("warp_grid", [f, g, cx, cy, span]() mutable {
            const Shape vs = f.shape();
            for (int n = 0; n < vs.n; ++n) {
                const float* dgx = g.grad() + int64_t(n) * 2 * span;
                const float* dgy = dgx + span;
                float* du = f.grad() + int64_t(n) * 2 * span;
                float* dv = du + span;
                for (int i = 0; i < span; ++i) {
                    du[i] += cx * dgx[i];
                    dv[i] += cy * dgy[i];
                }
            }
        });
    }
    return grid_sample(tape, feature, grid);
}

}  // namespace b2f
