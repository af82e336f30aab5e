#include <algorithm>
#include <cmath>
#include <cstring>

#include "ddpmcd/ops.hpp"
#include "gemm.hpp"

namespace ddpmcd {

namespace {

template <typename F>
auto dispatch(DType dt, F&& f) {
    if (dt == DType::f32) return f.template operator()<float>();
    return f.template operator()<double>();
}

struct BatchMap {
    Shape out_batch;                 // broadcast batch dims
    std::vector<int64_t> a_stride;   // per out-batch-dim stride into a's batch space (in matrices)
    std::vector<int64_t> b_stride;
    int64_t batches = 1;

    int64_t offset_a(int64_t flat) const { return offset(flat, a_stride); }
    int64_t offset_b(int64_t flat) const { return offset(flat, b_stride); }

private:
    int64_t offset(int64_t flat, const std::vector<int64_t>& strides) const {
        int64_t off = 0;
        for (int d = static_cast<int>(out_batch.size()) - 1; d >= 0; --d) {
            size_t du = static_cast<size_t>(d);
            off += (flat % out_batch[du]) * strides[du];
            flat /= out_batch[du];
        }
        return off;
    }
};

BatchMap make_batch_map(const Shape& a, const Shape& b) {
    Shape ab(a.begin(), a.end() - 2), bb(b.begin(), b.end() - 2);
    BatchMap m;
    m.out_batch = broadcast_shape(ab, bb);
    size_t nd = m.out_batch.size();
    m.a_stride.assign(nd, 0);
    m.b_stride.assign(nd, 0);
    auto fill = [&](const Shape& s, std::vector<int64_t>& out) {
        int64_t acc = 1;
        size_t off = nd - s.size();
        for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
            size_t iu = static_cast<size_t>(i);
            if (s[iu] != 1) out[off + iu] = acc;
            acc *= s[iu];
        }
    };
    fill(ab, m.a_stride);
    fill(bb, m.b_stride);
    for (int64_t d : m.out_batch) m.batches *= d;
    return m;
}

int64_t conv_out_dim(int64_t in, int64_t k, int stride, int padding) {
    return (in + 2 * padding - k) / stride + 1;
}

// Valid output-x range [lo, hi) for which ix = x*stride - padding + kx lands
// inside [0, w).
inline std::pair<int64_t, int64_t> valid_x_range(int64_t w, int64_t kx, int stride, int padding,
                                                 int64_t wo) {
    int64_t lo = padding - kx > 0 ? (padding - kx + stride - 1) / stride : 0;
    int64_t hi = (w - 1 - kx + padding) / stride + 1;
    return {std::min(std::max<int64_t>(lo, 0), wo), std::min(std::max<int64_t>(hi, 0), wo)};
}

template <typename T>
void im2col(const T* in, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw, int stride,
            int padding, int64_t ho, int64_t wo, T* col) {
    // col layout: [c*kh*kw, ho*wo]
    for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t ky = 0; ky < kh; ++ky)
            for (int64_t kx = 0; kx < kw; ++kx) {
                T* dst_base = col + ((ci * kh + ky) * kw + kx) * ho * wo;
                const T* src_base = in + ci * h * w;
                auto [x_lo, x_hi] = valid_x_range(w, kx, stride, padding, wo);
                for (int64_t y = 0; y < ho; ++y) {
                    int64_t iy = y * stride - padding + ky;
                    T* dst = dst_base + y * wo;
                    if (iy < 0 || iy >= h) {
                        std::fill(dst, dst + wo, static_cast<T>(0));
                        continue;
                    }
                    std::fill(dst, dst + x_lo, static_cast<T>(0));
                    const T* src = src_base + iy * w - padding + kx;
                    if (stride == 1) {
                        std::copy(src + x_lo, src + x_hi, dst + x_lo);
                    } else {
                        for (int64_t x = x_lo; x < x_hi; ++x) dst[x] = src[x * stride];
                    }
                    std::fill(dst + x_hi, dst + wo, static_cast<T>(0));
                }
            }
}

template <typename T>
void col2im(const T* col, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw, int stride,
            int padding, int64_t ho, int64_t wo, T* in) {
    for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t ky = 0; ky < kh; ++ky)
            for (int64_t kx = 0; kx < kw; ++kx) {
                const T* src_base = col + ((ci * kh + ky) * kw + kx) * ho * wo;
                T* dst_base = in + ci * h * w;
                auto [x_lo, x_hi] = valid_x_range(w, kx, stride, padding, wo);
                for (int64_t y = 0; y < ho; ++y) {
                    int64_t iy = y * stride - padding + ky;
                    if (iy < 0 || iy >= h) continue;
                    const T* src = src_base + y * wo;
                    T* dst = dst_base + iy * w - padding + kx;
                    if (stride == 1) {
                        for (int64_t x = x_lo; x < x_hi; ++x) dst[x] += src[x];
                    } else {
                        for (int64_t x = x_lo; x < x_hi; ++x) dst[x * stride] += src[x];
                    }
                }
            }
}

Tensor conv2d_impl(const Tensor& input, const Tensor& weight, const Tensor* bias, int stride,
                   int padding) {
    if (input.ndim() != 4)
        throw DimensionError("conv2d: input must be [N,C,H,W], got " + shape_str(input.shape()));
    if (weight.ndim() != 4)
        throw DimensionError("conv2d: weight must be [Cout,Cin,KH,KW], got " + shape_str(weight.shape()));
    if (input.dim(1) != weight.dim(1))
        throw DimensionError("conv2d: input channel axis 1 (" + std::to_string(input.dim(1)) +
                             ") does not match weight axis 1 (" + std::to_string(weight.dim(1)) + ")");
    if (bias && (bias->ndim() != 1 || bias->dim(0) != weight.dim(0)))
        throw DimensionError("conv2d: bias must be [Cout]=" + std::to_string(weight.dim(0)) +
                             ", got " + shape_str(bias->shape()));
    if (stride < 1 || padding < 0) throw ContractError("conv2d: invalid stride/padding");

    int64_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
    int64_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    int64_t ho = conv_out_dim(h, kh, stride, padding);
    int64_t wo = conv_out_dim(w, kw, stride, padding);
    if (ho < 1 || wo < 1)
        throw DimensionError("conv2d: non-positive output dims for input " + shape_str(input.shape()) +
                             ", kernel " + shape_str(weight.shape()) + ", stride " + std::to_string(stride) +
                             ", padding " + std::to_string(padding));
    int64_t k = cin * kh * kw;

    std::vector<Tensor> inputs = bias ? std::vector<Tensor>{input, weight, *bias}
                                      : std::vector<Tensor>{input, weight};
    Tensor bias_t = bias ? *bias : Tensor();

    // Pointwise convolutions skip im2col: the input slice already is the
    // column matrix.
    const bool pointwise = kh == 1 && kw == 1 && stride == 1 && padding == 0;

    auto backward = [input, weight, bias_t, stride, padding, n, cin, h, w, cout, kh, kw, ho, wo, k,
                     pointwise](const TensorImpl& out) {
        dispatch(input.dtype(), [&]<typename T>() {
            auto g = out.grad->as<T>();
            auto iv = input.data<T>();
            auto wv = weight.data<T>();
            bool need_in = input.requires_grad() || input.impl()->grad_fn;
            bool need_w = weight.requires_grad() || weight.impl()->grad_fn;
            bool need_b = bias_t.defined() && (bias_t.requires_grad() || bias_t.impl()->grad_fn);

            Storage gin_st = Storage::make(input.dtype(), need_in ? input.numel() : 0);
            Storage gw_st = Storage::make(input.dtype(), need_w ? weight.numel() : 0);
            Storage gb_st = Storage::make(input.dtype(), need_b ? cout : 0);
            std::vector<T> col(pointwise ? 0 : static_cast<size_t>(k * ho * wo));
            std::vector<T> dcol(!pointwise && need_in ? static_cast<size_t>(k * ho * wo) : 0);

            for (int64_t s = 0; s < n; ++s) {
                const T* gout_s = g.data() + s * cout * ho * wo;
                const T* col_s = iv.data() + s * cin * h * w;
                if (need_w) {
                    if (!pointwise) {
                        im2col(iv.data() + s * cin * h * w, cin, h, w, kh, kw, stride, padding, ho,
                               wo, col.data());
                        col_s = col.data();
                    }
                    // dW[cout,k] += gout_s[cout,howo] * col^T[howo,k]
                    detail::gemm(false, true, static_cast<int>(cout), static_cast<int>(k),
                                 static_cast<int>(ho * wo), static_cast<T>(1), gout_s,
                                 static_cast<int>(ho * wo), col_s, static_cast<int>(ho * wo),
                                 static_cast<T>(1), gw_st.as<T>().data(), static_cast<int>(k));
                }
                if (need_in) {
                    // dcol[k,howo] = W^T[k,cout] * gout_s[cout,howo]
                    T* dcol_target = pointwise ? gin_st.as<T>().data() + s * cin * h * w : dcol.data();
                    detail::gemm(true, false, static_cast<int>(k), static_cast<int>(ho * wo),
                                 static_cast<int>(cout), static_cast<T>(1), wv.data(),
                                 static_cast<int>(k), gout_s, static_cast<int>(ho * wo),
                                 static_cast<T>(0), dcol_target, static_cast<int>(ho * wo));
                    if (!pointwise)
                        col2im(dcol.data(), cin, h, w, kh, kw, stride, padding, ho, wo,
                               gin_st.as<T>().data() + s * cin * h * w);
                }
                if (need_b) {
                    auto gb = gb_st.as<T>();
                    for (int64_t co = 0; co < cout; ++co) {
                        const T* p = gout_s + co * ho * wo;
                        T acc = 0;
                        for (int64_t i = 0; i < ho * wo; ++i) acc += p[i];
                        gb[static_cast<size_t>(co)] += acc;
                    }
                }
            }
            if (need_in) accumulate_grad(*input.impl(), gin_st);
            if (need_w) accumulate_grad(*weight.impl(), gw_st);
            if (need_b) accumulate_grad(*bias_t.impl(), gb_st);
        });
    };

    Tensor out = detail::make_op_output({n, cout, ho, wo}, input.dtype(), "conv2d", inputs, backward);
    dispatch(input.dtype(), [&]<typename T>() {
        auto iv = input.data<T>();
        auto wv = weight.data<T>();
        auto ov = out.mutable_data<T>();
        std::vector<T> col(pointwise ? 0 : static_cast<size_t>(k * ho * wo));
        for (int64_t s = 0; s < n; ++s) {
            const T* col_s = iv.data() + s * cin * h * w;
            if (!pointwise) {
                im2col(iv.data() + s * cin * h * w, cin, h, w, kh, kw, stride, padding, ho, wo,
                       col.data());
                col_s = col.data();
            }
            // out_s[cout,howo] = W[cout,k] * col[k,howo]
            detail::gemm(false, false, static_cast<int>(cout), static_cast<int>(ho * wo),
                         static_cast<int>(k), static_cast<T>(1), wv.data(), static_cast<int>(k),
                         col_s, static_cast<int>(ho * wo), static_cast<T>(0),
                         ov.data() + s * cout * ho * wo, static_cast<int>(ho * wo));
            if (bias) {
                auto bv = bias->data<T>();
                T* op = ov.data() + s * cout * ho * wo;
                for (int64_t co = 0; co < cout; ++co) {
                    T b = bv[static_cast<size_t>(co)];
                    for (int64_t i = 0; i < ho * wo; ++i) op[co * ho * wo + i] += b;
                }
            }
        }
    });
    return out;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding) {
    return conv2d_impl(input, weight, &bias, stride, padding);
}

Tensor conv2d_nobias(const Tensor& input, const Tensor& weight, int stride, int padding) {
    return conv2d_impl(input, weight, nullptr, stride, padding);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.dtype() != b.dtype())
        throw ContractError("matmul: dtype mismatch");
    if (a.ndim() < 2 || b.ndim() < 2)
        throw DimensionError("matmul: operands must have >= 2 dims, got " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
    int64_t m = a.dim(-2), ka = a.dim(-1), kb = b.dim(-2), nn = b.dim(-1);
    if (ka != kb)
        throw DimensionError("matmul: inner dims differ (" + std::to_string(ka) + " vs " +
                             std::to_string(kb) + ") for " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    BatchMap bm = make_batch_map(a.shape(), b.shape());
    Shape out_shape = bm.out_batch;
    out_shape.push_back(m);
    out_shape.push_back(nn);

    auto backward = [a, b, bm, m, ka, nn](const TensorImpl& out) {
        dispatch(a.dtype(), [&]<typename T>() {
            auto g = out.grad->as<T>();
            auto av = a.data<T>();
            auto bv = b.data<T>();
            bool need_a = a.requires_grad() || a.impl()->grad_fn;
            bool need_b = b.requires_grad() || b.impl()->grad_fn;
            Storage ga_st = Storage::make(a.dtype(), need_a ? a.numel() : 0);
            Storage gb_st = Storage::make(a.dtype(), need_b ? b.numel() : 0);
            int64_t amat = m * ka, bmat = ka * nn, omat = m * nn;
            for (int64_t i = 0; i < bm.batches; ++i) {
                const T* gp = g.data() + i * omat;
                const T* ap = av.data() + bm.offset_a(i) * amat;
                const T* bp = bv.data() + bm.offset_b(i) * bmat;
                if (need_a) {
                    // dA = G * B^T  [m,ka], accumulated over broadcast batches
                    detail::gemm(false, true, static_cast<int>(m), static_cast<int>(ka),
                                 static_cast<int>(nn), static_cast<T>(1), gp, static_cast<int>(nn), bp,
                                 static_cast<int>(nn), static_cast<T>(1),
                                 ga_st.as<T>().data() + bm.offset_a(i) * amat, static_cast<int>(ka));
                }
                if (need_b) {
                    // dB = A^T * G  [ka,nn]
                    detail::gemm(true, false, static_cast<int>(ka), static_cast<int>(nn),
                                 static_cast<int>(m), static_cast<T>(1), ap, static_cast<int>(ka), gp,
                                 static_cast<int>(nn), static_cast<T>(1),
                                 gb_st.as<T>().data() + bm.offset_b(i) * bmat, static_cast<int>(nn));
                }
            }
            if (need_a) accumulate_grad(*a.impl(), ga_st);
            if (need_b) accumulate_grad(*b.impl(), gb_st);
        });
    };

    Tensor out = detail::make_op_output(out_shape, a.dtype(), "matmul", {a, b}, backward);
    dispatch(a.dtype(), [&]<typename T>() {
        auto av = a.data<T>();
        auto bv = b.data<T>();
        auto ov = out.mutable_data<T>();
        int64_t amat = m * ka, bmat = ka * nn, omat = m * nn;
        for (int64_t i = 0; i < bm.batches; ++i) {
            detail::gemm(false, false, static_cast<int>(m), static_cast<int>(nn), static_cast<int>(ka),
                         static_cast<T>(1), av.data() + bm.offset_a(i) * amat, static_cast<int>(ka),
                         bv.data() + bm.offset_b(i) * bmat, static_cast<int>(nn), static_cast<T>(0),
                         ov.data() + i * omat, static_cast<int>(nn));
        }
    });
    return out;
}

}  // namespace ddpmcd
