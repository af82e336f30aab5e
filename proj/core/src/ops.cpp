#include "ddpmcd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

namespace ddpmcd {

namespace {

template <typename F>
auto dispatch(DType dt, F&& f) {
    if (dt == DType::f32) return f.template operator()<float>();
    return f.template operator()<double>();
}

void check_same_dtype(const char* op, const Tensor& a, const Tensor& b) {
    if (a.dtype() != b.dtype())
        throw ContractError(std::string(op) + ": dtype mismatch (" + dtype_name(a.dtype()) + " vs " +
                            dtype_name(b.dtype()) + ")");
}

std::vector<int64_t> contiguous_strides(const Shape& shape) {
    std::vector<int64_t> strides(shape.size());
    int64_t acc = 1;
    for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
        strides[static_cast<size_t>(i)] = acc;
        acc *= shape[static_cast<size_t>(i)];
    }
    return strides;
}

// Strides of `operand` viewed inside `out` (right-aligned); broadcast axes get
// stride 0.
std::vector<int64_t> broadcast_strides(const Shape& operand, const Shape& out) {
    std::vector<int64_t> strides(out.size(), 0);
    auto own = contiguous_strides(operand);
    size_t off = out.size() - operand.size();
    for (size_t i = 0; i < operand.size(); ++i) {
        if (operand[i] != 1) strides[off + i] = own[i];
    }
    return strides;
}

// Largest trailing block over which both operands advance with a fixed unit
// step (0 = broadcast, 1 = contiguous). Lets the walkers below run tight
// inner loops instead of per-element stride bookkeeping.
struct InnerBlock {
    int64_t len = 1;
    int64_t step_a = 1, step_b = 1;
    size_t outer_dims = 0;
};

InnerBlock find_inner_block(const Shape& out_shape, const std::vector<int64_t>& sa,
                            const std::vector<int64_t>& sb) {
    auto cs = contiguous_strides(out_shape);
    size_t nd = out_shape.size();
    InnerBlock blk;
    blk.outer_dims = nd;
    int64_t len = 1;
    int a_mode = -1, b_mode = -1;  // -1 undecided, 0 broadcast, 1 contiguous
    for (size_t d = nd; d-- > 0;) {
        int am = sa[d] == 0 ? 0 : (sa[d] == cs[d] ? 1 : -2);
        int bm = sb[d] == 0 ? 0 : (sb[d] == cs[d] ? 1 : -2);
        if (am == -2 || bm == -2) break;
        if (out_shape[d] > 1) {
            if (a_mode == -1) a_mode = am;
            if (b_mode == -1) b_mode = bm;
            if (am != a_mode || bm != b_mode) break;
        }
        len *= out_shape[d];
        blk.outer_dims = d;
    }
    blk.len = len;
    blk.step_a = a_mode == 0 ? 0 : 1;
    blk.step_b = b_mode == 0 ? 0 : 1;
    return blk;
}

// Walks the out-space in (oa, ob, oi, len) blocks; inside a block the offsets
// advance by blk.step_a / blk.step_b / 1.
template <typename Fn>
void for_each_broadcast_block(const Shape& out_shape, const std::vector<int64_t>& sa,
                              const std::vector<int64_t>& sb, const InnerBlock& blk, Fn&& fn) {
    size_t nd = out_shape.size();
    int64_t total = numel_of(out_shape);
    int64_t blocks = total / blk.len;
    std::vector<int64_t> coord(blk.outer_dims, 0);
    int64_t oa = 0, ob = 0;
    for (int64_t i = 0; i < blocks; ++i) {
        fn(oa, ob, i * blk.len);
        for (size_t d = blk.outer_dims; d-- > 0;) {
            oa += sa[d];
            ob += sb[d];
            if (++coord[d] < out_shape[d]) break;
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            coord[d] = 0;
        }
    }
}

// Elementwise binary op with broadcasting; fwd(a, b) -> out, and the two grad
// factor functions give d(out)/d(a) and d(out)/d(b) from the operand values.
template <typename Fwd, typename GradA, typename GradB>
Tensor broadcast_binary(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, GradA grad_a,
                        GradB grad_b) {
    check_same_dtype(name, a, b);
    Shape out_shape = broadcast_shape(a.shape(), b.shape());
    DType dt = a.dtype();
    bool same = a.shape() == b.shape();

    auto backward = [a, b, fwd, grad_a, grad_b, same](const TensorImpl& out) {
        bool need_a = a.requires_grad() || a.impl()->grad_fn;
        bool need_b = b.requires_grad() || b.impl()->grad_fn;
        dispatch(a.dtype(), [&]<typename T>() {
            auto g = out.grad->as<T>();
            auto av = a.data<T>();
            auto bv = b.data<T>();
            Storage ga_st = same ? Storage::make_uninit(a.dtype(), need_a ? a.numel() : 0)
                                 : Storage::make(a.dtype(), need_a ? a.numel() : 0);
            Storage gb_st = same ? Storage::make_uninit(a.dtype(), need_b ? b.numel() : 0)
                                 : Storage::make(a.dtype(), need_b ? b.numel() : 0);
            auto ga = ga_st.as<T>();
            auto gb = gb_st.as<T>();
            if (same) {
                for (size_t i = 0; i < g.size(); ++i) {
                    T x = av[i], y = bv[i], gi = g[i];
                    if (need_a) ga[i] = static_cast<T>(grad_a(x, y)) * gi;
                    if (need_b) gb[i] = static_cast<T>(grad_b(x, y)) * gi;
                }
            } else {
                auto sa = broadcast_strides(a.shape(), out.shape);
                auto sb = broadcast_strides(b.shape(), out.shape);
                auto blk = find_inner_block(out.shape, sa, sb);
                for_each_broadcast_block(
                    out.shape, sa, sb, blk, [&](int64_t oa, int64_t ob, int64_t oi) {
                        for (int64_t i = 0; i < blk.len; ++i) {
                            size_t ia = static_cast<size_t>(oa + i * blk.step_a);
                            size_t ib = static_cast<size_t>(ob + i * blk.step_b);
                            T x = av[ia], y = bv[ib];
                            T gi = g[static_cast<size_t>(oi + i)];
                            if (need_a) ga[ia] += static_cast<T>(grad_a(x, y)) * gi;
                            if (need_b) gb[ib] += static_cast<T>(grad_b(x, y)) * gi;
                        }
                    });
            }
            if (need_a) accumulate_grad(*a.impl(), ga_st);
            if (need_b) accumulate_grad(*b.impl(), gb_st);
        });
    };

    Tensor out = detail::make_op_output(out_shape, dt, name, {a, b}, backward);
    dispatch(dt, [&]<typename T>() {
        auto av = a.data<T>();
        auto bv = b.data<T>();
        auto ov = out.mutable_data<T>();
        if (same) {
            for (size_t i = 0; i < ov.size(); ++i) ov[i] = static_cast<T>(fwd(av[i], bv[i]));
        } else {
            auto sa = broadcast_strides(a.shape(), out.shape());
            auto sb = broadcast_strides(b.shape(), out.shape());
            auto blk = find_inner_block(out.shape(), sa, sb);
            for_each_broadcast_block(out.shape(), sa, sb, blk,
                                     [&](int64_t oa, int64_t ob, int64_t oi) {
                                         for (int64_t i = 0; i < blk.len; ++i)
                                             ov[static_cast<size_t>(oi + i)] = static_cast<T>(
                                                 fwd(av[static_cast<size_t>(oa + i * blk.step_a)],
                                                     bv[static_cast<size_t>(ob + i * blk.step_b)]));
                                     });
        }
    });
    return out;
}

// Unary elementwise op computed in the tensor's native precision; fwd(x) and
// dfdx(x, y) are generic lambdas over the scalar type.
template <typename Fwd, typename Dfdx>
Tensor unary(const char* name, const Tensor& a, Fwd fwd, Dfdx dfdx) {
    auto backward = [a, dfdx](const TensorImpl& out) {
        dispatch(a.dtype(), [&]<typename T>() {
            auto g = out.grad->as<T>();
            auto av = a.data<T>();
            auto ov = out.data->as<T>();
            Storage ga_st = Storage::make_uninit(a.dtype(), a.numel());
            auto ga = ga_st.as<T>();
            for (size_t i = 0; i < g.size(); ++i) ga[i] = dfdx(av[i], ov[i]) * g[i];
            accumulate_grad(*a.impl(), ga_st);
        });
    };
    Tensor out = detail::make_op_output(a.shape(), a.dtype(), name, {a}, backward);
    dispatch(a.dtype(), [&]<typename T>() {
        auto av = a.data<T>();
        auto ov = out.mutable_data<T>();
        for (size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(av[i]);
    });
    return out;
}

std::vector<int> normalize_axes(const char* op, const std::vector<int>& axes, int ndim) {
    std::vector<int> out;
    out.reserve(axes.size());
    for (int ax : axes) {
        if (ax < 0) ax += ndim;
        if (ax < 0 || ax >= ndim)
            throw ContractError(std::string(op) + ": axis out of range");
        out.push_back(ax);
    }
    std::sort(out.begin(), out.end());
    if (std::adjacent_find(out.begin(), out.end()) != out.end())
        throw ContractError(std::string(op) + ": duplicate axis");
    return out;
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
    size_t nd = std::max(a.size(), b.size());
    Shape out(nd);
    for (size_t i = 0; i < nd; ++i) {
        int64_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
        int64_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
        if (da != db && da != 1 && db != 1)
            throw DimensionError("broadcast: incompatible axis " + std::to_string(i) + " (" +
                                 std::to_string(da) + " vs " + std::to_string(db) + ") for shapes " +
                                 shape_str(a) + " and " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    return broadcast_binary("add", a, b, [](double x, double y) { return x + y; },
                            [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return broadcast_binary("sub", a, b, [](double x, double y) { return x - y; },
                            [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return broadcast_binary("mul", a, b, [](double x, double y) { return x * y; },
                            [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return broadcast_binary("div", a, b, [](double x, double y) { return x / y; },
                            [](double, double y) { return 1.0 / y; },
                            [](double x, double y) { return -x / (y * y); });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
    return broadcast_binary("maximum", a, b, [](double x, double y) { return x >= y ? x : y; },
                            [](double x, double y) { return x >= y ? 1.0 : 0.0; },
                            [](double x, double y) { return x >= y ? 0.0 : 1.0; });
}

Tensor add_scalar(const Tensor& a, double s) {
    return unary("add_scalar", a, [s](auto x) { return x + decltype(x)(s); },
                 [](auto, auto y) { return decltype(y)(1); });
}

Tensor mul_scalar(const Tensor& a, double s) {
    return unary("mul_scalar", a, [s](auto x) { return x * decltype(x)(s); },
                 [s](auto, auto y) { return decltype(y)(s); });
}

Tensor neg(const Tensor& a) {
    return unary("neg", a, [](auto x) { return -x; }, [](auto, auto y) { return decltype(y)(-1); });
}

Tensor abs(const Tensor& a) {
    return unary("abs", a, [](auto x) { return std::fabs(x); },
                 [](auto x, auto) { using T = decltype(x); return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

Tensor exp(const Tensor& a) {
    return unary("exp", a, [](auto x) { return std::exp(x); }, [](auto, auto y) { return y; });
}

Tensor log(const Tensor& a) {
    return unary("log", a, [](auto x) { return std::log(x); },
                 [](auto x, auto) { return decltype(x)(1) / x; });
}

Tensor sqrt(const Tensor& a) {
    return unary("sqrt", a, [](auto x) { return std::sqrt(x); },
                 [](auto, auto y) { return decltype(y)(0.5) / y; });
}

Tensor relu(const Tensor& a) {
    return unary("relu", a, [](auto x) { using T = decltype(x); return x > T(0) ? x : T(0); },
                 [](auto x, auto) { using T = decltype(x); return x > T(0) ? T(1) : T(0); });
}

Tensor silu(const Tensor& a) {
    // The sigmoid is saved at forward time; backward then avoids a second exp
    // pass: d(silu)/dx = s + x*s*(1-s).
    auto saved = std::make_shared<Storage>(Storage::make_uninit(a.dtype(), a.numel()));
    auto backward = [a, saved](const TensorImpl& out) {
        dispatch(a.dtype(), [&]<typename T>() {
            auto g = out.grad->as<T>();
            auto av = a.data<T>();
            auto sv = saved->as<T>();
            Storage ga_st = Storage::make_uninit(a.dtype(), a.numel());
            auto ga = ga_st.as<T>();
            for (size_t i = 0; i < g.size(); ++i) {
                T s = sv[i];
                ga[i] = (s + av[i] * s * (T(1) - s)) * g[i];
            }
            accumulate_grad(*a.impl(), ga_st);
        });
    };
    Tensor out = detail::make_op_output(a.shape(), a.dtype(), "silu", {a}, backward);
    dispatch(a.dtype(), [&]<typename T>() {
        auto av = a.data<T>();
        auto sv = saved->as<T>();
        auto ov = out.mutable_data<T>();
        for (size_t i = 0; i < ov.size(); ++i) {
            T s = T(1) / (T(1) + std::exp(-av[i]));
            sv[i] = s;
            ov[i] = av[i] * s;
        }
    });
    return out;
}

Tensor sigmoid(const Tensor& a) {
    return unary("sigmoid", a,
                 [](auto x) { using T = decltype(x); return T(1) / (T(1) + std::exp(-x)); },
                 [](auto, auto y) { using T = decltype(y); return y * (T(1) - y); });
}

Tensor sum(const Tensor& a) {
    auto backward = [a](const TensorImpl& out) {
        dispatch(a.dtype(), [&]<typename T>() {
            T g = out.grad->as<T>()[0];
            Storage ga_st = Storage::make_uninit(a.dtype(), a.numel());
            auto ga = ga_st.as<T>();
            std::fill(ga.begin(), ga.end(), g);
            accumulate_grad(*a.impl(), ga_st);
        });
    };
    Tensor out = detail::make_op_output({1}, a.dtype(), "sum", {a}, backward);
    dispatch(a.dtype(), [&]<typename T>() {
        auto av = a.data<T>();
        T acc = 0;
        for (T v : av) acc += v;
        out.mutable_data<T>()[0] = acc;
    });
    return out;
}

Tensor mean(const Tensor& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum(const Tensor& a, const std::vector<int>& axes, bool keepdim) {
    auto ax = normalize_axes("sum", axes, a.ndim());
    Shape kept = a.shape();  // reduced shape with kept dims = 1
    for (int x : ax) kept[static_cast<size_t>(x)] = 1;
    Shape out_shape;
    if (keepdim) {
        out_shape = kept;
    } else {
        for (int d = 0; d < a.ndim(); ++d)
            if (!std::binary_search(ax.begin(), ax.end(), d)) out_shape.push_back(a.shape()[static_cast<size_t>(d)]);
        if (out_shape.empty()) out_shape.push_back(1);
    }

    auto backward = [a, kept](const TensorImpl& out) {
        dispatch(a.dtype(), [&]<typename T>() {
            auto g = out.grad->as<T>();
            Storage ga_st = Storage::make(a.dtype(), a.numel());
            auto ga = ga_st.as<T>();
            auto sk = broadcast_strides(kept, a.shape());
            auto sz = std::vector<int64_t>(a.shape().size(), 0);
            auto blk = find_inner_block(a.shape(), sk, sz);
            for_each_broadcast_block(a.shape(), sk, sz, blk, [&](int64_t ok, int64_t, int64_t oi) {
                for (int64_t i = 0; i < blk.len; ++i)
                    ga[static_cast<size_t>(oi + i)] = g[static_cast<size_t>(ok + i * blk.step_a)];
            });
            accumulate_grad(*a.impl(), ga_st);
        });
    };
    Tensor out = detail::make_op_output(out_shape, a.dtype(), "sum_axes", {a}, backward);
    dispatch(a.dtype(), [&]<typename T>() {
        auto av = a.data<T>();
        auto ov = out.mutable_data<T>();
        std::fill(ov.begin(), ov.end(), static_cast<T>(0));
        auto sk = broadcast_strides(kept, a.shape());
        auto sz = std::vector<int64_t>(a.shape().size(), 0);
        auto blk = find_inner_block(a.shape(), sk, sz);
        for_each_broadcast_block(a.shape(), sk, sz, blk, [&](int64_t ok, int64_t, int64_t oi) {
            if (blk.step_a == 0) {
                T acc = 0;
                for (int64_t i = 0; i < blk.len; ++i) acc += av[static_cast<size_t>(oi + i)];
                ov[static_cast<size_t>(ok)] += acc;
            } else {
                for (int64_t i = 0; i < blk.len; ++i)
                    ov[static_cast<size_t>(ok + i)] += av[static_cast<size_t>(oi + i)];
            }
        });
    });
    return out;
}

Tensor mean(const Tensor& a, const std::vector<int>& axes, bool keepdim) {
    auto ax = normalize_axes("mean", axes, a.ndim());
    int64_t cnt = 1;
    for (int x : ax) cnt *= a.shape()[static_cast<size_t>(x)];
    return mul_scalar(sum(a, axes, keepdim), 1.0 / static_cast<double>(cnt));
}

Tensor reshape(const Tensor& a, const Shape& new_shape) {
    if (numel_of(new_shape) != a.numel())
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " (" +
                             std::to_string(a.numel()) + " elems) as " + shape_str(new_shape));
    auto backward = [a](const TensorImpl& out) { accumulate_grad(*a.impl(), *out.grad); };
    // Shares the buffer: build the node manually so no copy happens.
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = new_shape;
    impl->data = a.impl()->data;
    if (grad_enabled() && (a.requires_grad() || a.impl()->grad_fn)) {
        auto fn = std::make_shared<GradFn>();
        fn->op = "reshape";
        fn->inputs = {a.impl()};
        fn->backward = backward;
        impl->grad_fn = std::move(fn);
        impl->requires_grad = true;
    }
    return Tensor(impl);
}

Tensor permute(const Tensor& a, const std::vector<int>& dims) {
    int nd = a.ndim();
    if (static_cast<int>(dims.size()) != nd)
        throw ContractError("permute: got " + std::to_string(dims.size()) + " dims for ndim " +
                            std::to_string(nd));
    std::vector<bool> seen(static_cast<size_t>(nd), false);
    Shape out_shape(static_cast<size_t>(nd));
    for (int i = 0; i < nd; ++i) {
        int d = dims[static_cast<size_t>(i)];
        if (d < 0 || d >= nd || seen[static_cast<size_t>(d)])
            throw ContractError("permute: invalid axis list");
        seen[static_cast<size_t>(d)] = true;
        out_shape[static_cast<size_t>(i)] = a.shape()[static_cast<size_t>(d)];
    }
    auto in_strides = contiguous_strides(a.shape());
    // out coord d corresponds to input axis dims[d]
    std::vector<int64_t> gather(static_cast<size_t>(nd));
    for (int d = 0; d < nd; ++d) gather[static_cast<size_t>(d)] = in_strides[static_cast<size_t>(dims[static_cast<size_t>(d)])];

    auto backward = [a, out_shape, gather](const TensorImpl& out) {
        dispatch(a.dtype(), [&]<typename T>() {
            auto g = out.grad->as<T>();
            Storage ga_st = Storage::make(a.dtype(), a.numel());
            auto ga = ga_st.as<T>();
            auto sz = std::vector<int64_t>(out_shape.size(), 0);
            auto blk = find_inner_block(out_shape, gather, sz);
            for_each_broadcast_block(out_shape, gather, sz, blk, [&](int64_t ia, int64_t, int64_t oi) {
                for (int64_t i = 0; i < blk.len; ++i)
                    ga[static_cast<size_t>(ia + i * blk.step_a)] = g[static_cast<size_t>(oi + i)];
            });
            accumulate_grad(*a.impl(), ga_st);
        });
    };
    Tensor out = detail::make_op_output(out_shape, a.dtype(), "permute", {a}, backward);
    dispatch(a.dtype(), [&]<typename T>() {
        auto av = a.data<T>();
        auto ov = out.mutable_data<T>();
        auto sz = std::vector<int64_t>(out_shape.size(), 0);
        auto blk = find_inner_block(out_shape, gather, sz);
        for_each_broadcast_block(out_shape, gather, sz, blk, [&](int64_t ia, int64_t, int64_t oi) {
            for (int64_t i = 0; i < blk.len; ++i)
                ov[static_cast<size_t>(oi + i)] = av[static_cast<size_t>(ia + i * blk.step_a)];
        });
    });
    return out;
}

Tensor concat(const std::vector<Tensor>& ts, int axis) {
    if (ts.empty()) throw ContractError("concat: empty input list");
    int nd = ts[0].ndim();
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) throw ContractError("concat: axis out of range");
    Shape out_shape = ts[0].shape();
    int64_t axis_total = 0;
    for (const auto& t : ts) {
        check_same_dtype("concat", ts[0], t);
        if (t.ndim() != nd) throw DimensionError("concat: rank mismatch");
        for (int d = 0; d < nd; ++d) {
            if (d == axis) continue;
            if (t.shape()[static_cast<size_t>(d)] != out_shape[static_cast<size_t>(d)])
                throw DimensionError("concat: axis " + std::to_string(d) + " mismatch: " +
                                     shape_str(ts[0].shape()) + " vs " + shape_str(t.shape()));
        }
        axis_total += t.shape()[static_cast<size_t>(axis)];
    }
    out_shape[static_cast<size_t>(axis)] = axis_total;

    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<size_t>(d)];
    for (int d = axis + 1; d < nd; ++d) inner *= out_shape[static_cast<size_t>(d)];

    auto backward = [ts, axis, outer, inner, axis_total](const TensorImpl& out) {
        dispatch(ts[0].dtype(), [&]<typename T>() {
            auto g = out.grad->as<T>();
            int64_t offset = 0;
            for (const auto& t : ts) {
                int64_t len = t.shape()[static_cast<size_t>(axis)];
                bool need = t.requires_grad() || t.impl()->grad_fn;
                if (need) {
                    Storage gt_st = Storage::make(t.dtype(), t.numel());
                    auto gt = gt_st.as<T>();
                    for (int64_t o = 0; o < outer; ++o) {
                        const T* src = g.data() + (o * axis_total + offset) * inner;
                        T* dst = gt.data() + o * len * inner;
                        std::copy(src, src + len * inner, dst);
                    }
                    accumulate_grad(*t.impl(), gt_st);
                }
                offset += len;
            }
        });
    };
    Tensor out = detail::make_op_output(out_shape, ts[0].dtype(), "concat", ts, backward);
    dispatch(ts[0].dtype(), [&]<typename T>() {
        auto ov = out.mutable_data<T>();
        int64_t offset = 0;
        for (const auto& t : ts) {
            int64_t len = t.shape()[static_cast<size_t>(axis)];
            auto tv = t.data<T>();
            for (int64_t o = 0; o < outer; ++o) {
                const T* src = tv.data() + o * len * inner;
                T* dst = ov.data() + (o * axis_total + offset) * inner;
                std::copy(src, src + len * inner, dst);
            }
            offset += len;
        }
    });
    return out;
}

Tensor upsample_nearest2x(const Tensor& a) {
    if (a.ndim() != 4)
        throw DimensionError("upsample_nearest2x: expected [N,C,H,W], got " + shape_str(a.shape()));
    int64_t n = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
    Shape out_shape{n, c, h * 2, w * 2};

    auto backward = [a, n, c, h, w](const TensorImpl& out) {
        dispatch(a.dtype(), [&]<typename T>() {
            auto g = out.grad->as<T>();
            Storage ga_st = Storage::make(a.dtype(), a.numel());
            auto ga = ga_st.as<T>();
            int64_t w2 = w * 2;
            for (int64_t nc = 0; nc < n * c; ++nc) {
                const T* gp = g.data() + nc * h * 2 * w2;
                T* ap = ga.data() + nc * h * w;
                for (int64_t y = 0; y < h; ++y)
                    for (int64_t x = 0; x < w; ++x)
                        ap[y * w + x] = gp[(2 * y) * w2 + 2 * x] + gp[(2 * y) * w2 + 2 * x + 1] +
                                        gp[(2 * y + 1) * w2 + 2 * x] + gp[(2 * y + 1) * w2 + 2 * x + 1];
            }
            accumulate_grad(*a.impl(), ga_st);
        });
    };
    Tensor out = detail::make_op_output(out_shape, a.dtype(), "upsample_nearest2x", {a}, backward);
    dispatch(a.dtype(), [&]<typename T>() {
        auto av = a.data<T>();
        auto ov = out.mutable_data<T>();
        int64_t w2 = w * 2;
        for (int64_t nc = 0; nc < n * c; ++nc) {
            const T* ap = av.data() + nc * h * w;
            T* op = ov.data() + nc * h * 2 * w2;
            for (int64_t y = 0; y < h; ++y)
                for (int64_t x = 0; x < w; ++x) {
                    T v = ap[y * w + x];
                    op[(2 * y) * w2 + 2 * x] = v;
                    op[(2 * y) * w2 + 2 * x + 1] = v;
                    op[(2 * y + 1) * w2 + 2 * x] = v;
                    op[(2 * y + 1) * w2 + 2 * x + 1] = v;
                }
        }
    });
    return out;
}

Tensor softmax(const Tensor& a, int axis) {
    int nd = a.ndim();
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) throw ContractError("softmax: axis out of range");
    int64_t outer = 1, inner = 1, len = a.shape()[static_cast<size_t>(axis)];
    for (int d = 0; d < axis; ++d) outer *= a.shape()[static_cast<size_t>(d)];
    for (int d = axis + 1; d < nd; ++d) inner *= a.shape()[static_cast<size_t>(d)];

    auto backward = [a, outer, inner, len](const TensorImpl& out) {
        dispatch(a.dtype(), [&]<typename T>() {
            auto g = out.grad->as<T>();
            auto y = out.data->as<T>();
            Storage ga_st = Storage::make(a.dtype(), a.numel());
            auto ga = ga_st.as<T>();
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t i = 0; i < inner; ++i) {
                    int64_t base = o * len * inner + i;
                    T dot = 0;
                    for (int64_t k = 0; k < len; ++k) dot += g[static_cast<size_t>(base + k * inner)] * y[static_cast<size_t>(base + k * inner)];
                    for (int64_t k = 0; k < len; ++k) {
                        size_t idx = static_cast<size_t>(base + k * inner);
                        ga[idx] = y[idx] * (g[idx] - dot);
                    }
                }
            accumulate_grad(*a.impl(), ga_st);
        });
    };
    Tensor out = detail::make_op_output(a.shape(), a.dtype(), "softmax", {a}, backward);
    dispatch(a.dtype(), [&]<typename T>() {
        auto av = a.data<T>();
        auto ov = out.mutable_data<T>();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < inner; ++i) {
                int64_t base = o * len * inner + i;
                T m = av[static_cast<size_t>(base)];
                for (int64_t k = 1; k < len; ++k) m = std::max(m, av[static_cast<size_t>(base + k * inner)]);
                T s = 0;
                for (int64_t k = 0; k < len; ++k) {
                    size_t idx = static_cast<size_t>(base + k * inner);
                    ov[idx] = std::exp(av[idx] - m);
                    s += ov[idx];
                }
                for (int64_t k = 0; k < len; ++k) ov[static_cast<size_t>(base + k * inner)] /= s;
            }
    });
    return out;
}

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups,
                  double eps) {
    if (x.ndim() != 4)
        throw DimensionError("group_norm: expected [N,C,H,W], got " + shape_str(x.shape()));
    int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (groups < 1 || c % groups != 0)
        throw ConfigError("group_norm: channels " + std::to_string(c) + " not divisible by groups " +
                          std::to_string(groups));
    if (gamma.shape() != Shape{c} || beta.shape() != Shape{c})
        throw DimensionError("group_norm: gamma/beta must be [C]");
    int64_t cpg = c / groups;    // channels per group
    int64_t m = cpg * hw;        // elements per group
    // (mu, inv_s) per (n, g), filled by the forward pass and reused by backward.
    auto saved = std::make_shared<std::vector<double>>(static_cast<size_t>(n * groups * 2));

    auto backward = [x, gamma, beta, saved, n, c, hw, groups, cpg, m](const TensorImpl& out) {
        dispatch(x.dtype(), [&]<typename T>() {
            auto g = out.grad->as<T>();
            auto xv = x.data<T>();
            auto gv = gamma.data<T>();
            bool need_x = x.requires_grad() || x.impl()->grad_fn;
            bool need_g = gamma.requires_grad() || gamma.impl()->grad_fn;
            bool need_b = beta.requires_grad() || beta.impl()->grad_fn;
            Storage gx_st = Storage::make(x.dtype(), need_x ? x.numel() : 0);
            Storage gg_st = Storage::make(x.dtype(), need_g ? c : 0);
            Storage gb_st = Storage::make(x.dtype(), need_b ? c : 0);
            auto gx = gx_st.as<T>();
            auto gg = gg_st.as<T>();
            auto gb = gb_st.as<T>();
            for (int64_t ni = 0; ni < n; ++ni)
                for (int64_t gi = 0; gi < groups; ++gi) {
                    double mu = (*saved)[static_cast<size_t>((ni * groups + gi) * 2)];
                    double inv_s = (*saved)[static_cast<size_t>((ni * groups + gi) * 2 + 1)];
                    int64_t base = (ni * c + gi * cpg) * hw;
                    double s1 = 0, s2 = 0;
                    for (int64_t ci = 0; ci < cpg; ++ci) {
                        double gam = static_cast<double>(gv[static_cast<size_t>(gi * cpg + ci)]);
                        const T* xp = xv.data() + base + ci * hw;
                        const T* gp = g.data() + base + ci * hw;
                        double sg = 0, sgx = 0, sdy = 0, sdyx = 0;
                        for (int64_t i = 0; i < hw; ++i) {
                            double dy = static_cast<double>(gp[i]);
                            double xhat = (static_cast<double>(xp[i]) - mu) * inv_s;
                            sg += dy;
                            sgx += dy * xhat;
                            sdy += dy * gam;
                            sdyx += dy * gam * xhat;
                        }
                        if (need_b) gb[static_cast<size_t>(gi * cpg + ci)] += static_cast<T>(sg);
                        if (need_g) gg[static_cast<size_t>(gi * cpg + ci)] += static_cast<T>(sgx);
                        s1 += sdy;
                        s2 += sdyx;
                    }
                    if (need_x) {
                        double c1 = s1 / static_cast<double>(m), c2 = s2 / static_cast<double>(m);
                        for (int64_t ci = 0; ci < cpg; ++ci) {
                            double gam = static_cast<double>(gv[static_cast<size_t>(gi * cpg + ci)]);
                            const T* xp = xv.data() + base + ci * hw;
                            const T* gp = g.data() + base + ci * hw;
                            T* op = gx.data() + base + ci * hw;
                            for (int64_t i = 0; i < hw; ++i) {
                                double xhat = (static_cast<double>(xp[i]) - mu) * inv_s;
                                op[i] = static_cast<T>(inv_s * (static_cast<double>(gp[i]) * gam - c1 -
                                                                xhat * c2));
                            }
                        }
                    }
                }
            if (need_x) accumulate_grad(*x.impl(), gx_st);
            if (need_g) accumulate_grad(*gamma.impl(), gg_st);
            if (need_b) accumulate_grad(*beta.impl(), gb_st);
        });
    };

    Tensor out = detail::make_op_output(x.shape(), x.dtype(), "group_norm", {x, gamma, beta}, backward);
    dispatch(x.dtype(), [&]<typename T>() {
        auto xv = x.data<T>();
        auto gv = gamma.data<T>();
        auto bv = beta.data<T>();
        auto ov = out.mutable_data<T>();
        for (int64_t ni = 0; ni < n; ++ni)
            for (int64_t gi = 0; gi < groups; ++gi) {
                int64_t base = (ni * c + gi * cpg) * hw;
                double sum = 0, sq = 0;
                for (int64_t i = 0; i < m; ++i) {
                    double v = static_cast<double>(xv[static_cast<size_t>(base + i)]);
                    sum += v;
                    sq += v * v;
                }
                double mu = sum / static_cast<double>(m);
                double var = std::max(sq / static_cast<double>(m) - mu * mu, 0.0);
                double inv_s = 1.0 / std::sqrt(var + eps);
                (*saved)[static_cast<size_t>((ni * groups + gi) * 2)] = mu;
                (*saved)[static_cast<size_t>((ni * groups + gi) * 2 + 1)] = inv_s;
                for (int64_t ci = 0; ci < cpg; ++ci) {
                    double gam = static_cast<double>(gv[static_cast<size_t>(gi * cpg + ci)]);
                    double bet = static_cast<double>(bv[static_cast<size_t>(gi * cpg + ci)]);
                    const T* xp = xv.data() + base + ci * hw;
                    T* op = ov.data() + base + ci * hw;
                    for (int64_t i = 0; i < hw; ++i)
                        op[i] = static_cast<T>((static_cast<double>(xp[i]) - mu) * inv_s * gam + bet);
                }
            }
    });
    return out;
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
    check_same_dtype("mse_loss", pred, target);
    if (pred.shape() != target.shape())
        throw DimensionError("mse_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                             shape_str(target.shape()));
    int64_t n = pred.numel();
    auto backward = [pred, target, n](const TensorImpl& out) {
        dispatch(pred.dtype(), [&]<typename T>() {
            T g = out.grad->as<T>()[0];
            auto pv = pred.data<T>();
            auto tv = target.data<T>();
            T scale = static_cast<T>(2.0 / static_cast<double>(n)) * g;
            bool need_p = pred.requires_grad() || pred.impl()->grad_fn;
            bool need_t = target.requires_grad() || target.impl()->grad_fn;
            if (need_p) {
                Storage gp_st = Storage::make(pred.dtype(), n);
                auto gp = gp_st.as<T>();
                for (int64_t i = 0; i < n; ++i) gp[static_cast<size_t>(i)] = scale * (pv[static_cast<size_t>(i)] - tv[static_cast<size_t>(i)]);
                accumulate_grad(*pred.impl(), gp_st);
            }
            if (need_t) {
                Storage gt_st = Storage::make(pred.dtype(), n);
                auto gt = gt_st.as<T>();
                for (int64_t i = 0; i < n; ++i) gt[static_cast<size_t>(i)] = -scale * (pv[static_cast<size_t>(i)] - tv[static_cast<size_t>(i)]);
                accumulate_grad(*target.impl(), gt_st);
            }
        });
    };
    Tensor out = detail::make_op_output({1}, pred.dtype(), "mse_loss", {pred, target}, backward);
    dispatch(pred.dtype(), [&]<typename T>() {
        auto pv = pred.data<T>();
        auto tv = target.data<T>();
        double acc = 0;
        for (int64_t i = 0; i < n; ++i) {
            double d = static_cast<double>(pv[static_cast<size_t>(i)]) - static_cast<double>(tv[static_cast<size_t>(i)]);
            acc += d * d;
        }
        out.mutable_data<T>()[0] = static_cast<T>(acc / static_cast<double>(n));
    });
    return out;
}

Tensor ce_loss(const Tensor& logits, const Tensor& labels) {
    if (logits.ndim() < 2)
        throw DimensionError("ce_loss: logits must be [N,C,...], got " + shape_str(logits.shape()));
    int64_t n = logits.dim(0), classes = logits.dim(1);
    Shape expect_labels{n};
    for (int d = 2; d < logits.ndim(); ++d) expect_labels.push_back(logits.shape()[static_cast<size_t>(d)]);
    if (labels.shape() != expect_labels)
        throw DimensionError("ce_loss: labels shape " + shape_str(labels.shape()) + ", expected " +
                             shape_str(expect_labels));
    int64_t inner = 1;
    for (int d = 2; d < logits.ndim(); ++d) inner *= logits.shape()[static_cast<size_t>(d)];
    int64_t count = n * inner;

    // Labels are read as integers; a non-integral or out-of-range value is a
    // data error, checked up front so backward can trust them.
    std::vector<int> lbl(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) {
        double v = labels.at(i);
        int iv = static_cast<int>(std::llround(v));
        if (v != static_cast<double>(iv) || iv < 0 || iv >= classes)
            throw DataError("ce_loss: label value " + std::to_string(v) + " at flat index " +
                            std::to_string(i) + ", expected integer in [0," + std::to_string(classes) + ")");
        lbl[static_cast<size_t>(i)] = iv;
    }

    auto backward = [logits, lbl, n, classes, inner, count](const TensorImpl& out) {
        dispatch(logits.dtype(), [&]<typename T>() {
            T g = out.grad->as<T>()[0];
            auto lv = logits.data<T>();
            Storage gl_st = Storage::make(logits.dtype(), logits.numel());
            auto gl = gl_st.as<T>();
            T scale = g / static_cast<T>(count);
            for (int64_t b = 0; b < n; ++b)
                for (int64_t i = 0; i < inner; ++i) {
                    int64_t base = (b * classes) * inner + i;
                    T m = lv[static_cast<size_t>(base)];
                    for (int64_t c = 1; c < classes; ++c) m = std::max(m, lv[static_cast<size_t>(base + c * inner)]);
                    T s = 0;
                    for (int64_t c = 0; c < classes; ++c) s += std::exp(lv[static_cast<size_t>(base + c * inner)] - m);
                    int y = lbl[static_cast<size_t>(b * inner + i)];
                    for (int64_t c = 0; c < classes; ++c) {
                        T p = std::exp(lv[static_cast<size_t>(base + c * inner)] - m) / s;
                        gl[static_cast<size_t>(base + c * inner)] = scale * (p - (c == y ? static_cast<T>(1) : static_cast<T>(0)));
                    }
                }
            accumulate_grad(*logits.impl(), gl_st);
        });
    };
    Tensor out = detail::make_op_output({1}, logits.dtype(), "ce_loss", {logits}, backward);
    dispatch(logits.dtype(), [&]<typename T>() {
        auto lv = logits.data<T>();
        double acc = 0;
        for (int64_t b = 0; b < n; ++b)
            for (int64_t i = 0; i < inner; ++i) {
                int64_t base = (b * classes) * inner + i;
                double m = static_cast<double>(lv[static_cast<size_t>(base)]);
                for (int64_t c = 1; c < classes; ++c)
                    m = std::max(m, static_cast<double>(lv[static_cast<size_t>(base + c * inner)]));
                double s = 0;
                for (int64_t c = 0; c < classes; ++c)
                    s += std::exp(static_cast<double>(lv[static_cast<size_t>(base + c * inner)]) - m);
                int y = lbl[static_cast<size_t>(b * inner + i)];
                acc += std::log(s) + m - static_cast<double>(lv[static_cast<size_t>(base + y * inner)]);
            }
        out.mutable_data<T>()[0] = static_cast<T>(acc / static_cast<double>(count));
    });
    return out;
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    Tensor out = empty_like(a);
    dispatch(a.dtype(), [&]<typename T>() {
        auto av = a.data<T>();
        auto ov = out.mutable_data<T>();
        for (size_t i = 0; i < ov.size(); ++i)
            ov[i] = std::clamp(av[i], static_cast<T>(lo), static_cast<T>(hi));
    });
    return out;
}

}  // namespace ddpmcd
