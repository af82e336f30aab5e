#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "ddpmcd/errors.hpp"

namespace ddpmcd {

enum class DType { f32, f64 };

const char* dtype_name(DType dt);

using Shape = std::vector<int64_t>;

int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

// Flat buffer of one floating-point dtype.
class Storage {
public:
    Storage() = default;
    static Storage make(DType dt, int64_t n);        // zero-filled
    static Storage make_uninit(DType dt, int64_t n); // for fully-overwritten outputs

    Storage(const Storage& other);
    Storage& operator=(const Storage& other);
    Storage(Storage&&) noexcept = default;
    Storage& operator=(Storage&&) noexcept = default;

    DType dtype() const { return dtype_; }
    int64_t size() const { return count_; }
    void fill(double v);

    template <typename T>
    std::span<T> as() {
        check_type<T>();
        return std::span<T>(reinterpret_cast<T*>(bytes_.get()), static_cast<size_t>(count_));
    }
    template <typename T>
    std::span<const T> as() const {
        check_type<T>();
        return std::span<const T>(reinterpret_cast<const T*>(bytes_.get()), static_cast<size_t>(count_));
    }

private:
    template <typename T>
    void check_type() const {
        if ((std::is_same_v<T, float> && dtype_ != DType::f32) ||
            (std::is_same_v<T, double> && dtype_ != DType::f64))
            throw ContractError("Storage: accessed with wrong scalar type");
    }
    size_t byte_count() const { return static_cast<size_t>(count_) * (dtype_ == DType::f32 ? 4 : 8); }

    DType dtype_ = DType::f32;
    int64_t count_ = 0;
    std::unique_ptr<std::byte[]> bytes_;
};

struct TensorImpl;

// Backward closure for one op: reads the output node's grad and accumulates
// into the input nodes captured by the closure.
struct GradFn {
    std::string op;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
    Shape shape;
    std::shared_ptr<Storage> data;
    bool requires_grad = false;
    std::unique_ptr<Storage> grad;  // same shape/dtype as data when present
    std::shared_ptr<GradFn> grad_fn;

    int64_t numel() const { return numel_of(shape); }
};

// Reverse-mode autodiff is on by default; ops record a tape while enabled.
bool grad_enabled();
void set_grad_enabled(bool on);

// RAII guard disabling the tape, used for frozen-model inference.
struct NoGradGuard {
    NoGradGuard() : prev_(grad_enabled()) { set_grad_enabled(false); }
    ~NoGradGuard() { set_grad_enabled(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Value-semantic handle to an autodiff graph node. Tensors are immutable once
// produced by an op; only leaf parameters are updated in place (optimizers).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int64_t numel() const { return impl_->numel(); }
    int64_t dim(int i) const;
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    DType dtype() const { return impl_->data->dtype(); }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool on);

    template <typename T>
    std::span<const T> data() const {
        return impl_->data->as<T>();
    }
    // In-place access; reserved for leaf updates and buffer construction.
    template <typename T>
    std::span<T> mutable_data() {
        return impl_->data->as<T>();
    }

    // Scalar value of a 1-element tensor, as double regardless of dtype.
    double item() const;
    double at(int64_t flat_index) const;

    bool has_grad() const { return impl_->grad != nullptr; }
    Tensor grad() const;  // grad as a detached tensor; ContractError if absent
    void zero_grad() { impl_->grad.reset(); }

    // Runs backward from this scalar, populating grads of reachable
    // requires_grad leaves. ContractError if not scalar.
    void backward() const;

    // Same data, detached from the graph, requires_grad=false.
    Tensor detach() const;
    // Deep copy of the data (detached).
    Tensor clone() const;
    // Value copy converted to the given dtype (detached).
    Tensor to(DType dt) const;

    std::shared_ptr<TensorImpl> impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// --- factories ---
Tensor zeros(const Shape& shape, DType dt = DType::f32);
Tensor ones(const Shape& shape, DType dt = DType::f32);
Tensor full(const Shape& shape, double value, DType dt = DType::f32);
Tensor from_vector(const Shape& shape, const std::vector<float>& v);
Tensor from_vector(const Shape& shape, const std::vector<double>& v);
Tensor scalar_tensor(double v, DType dt = DType::f32);

// Creates a fresh leaf node sharing nothing with `t`.
Tensor empty_like(const Tensor& t);

// True when every element is finite.
bool all_finite(const Tensor& t);

// Accumulates `delta` into the node's grad buffer, allocating it on first use.
void accumulate_grad(TensorImpl& node, const Storage& delta);

namespace detail {
// Builds the op output node and attaches the grad fn when the tape is active
// and any input requires grad. `backward` may be empty for non-differentiable
// ops (it is then never attached).
Tensor make_op_output(Shape shape, DType dt, std::string op,
                      std::vector<Tensor> inputs,
                      std::function<void(const TensorImpl&)> backward);
bool any_requires_grad(const std::vector<Tensor>& ts);
}  // namespace detail

}  // namespace ddpmcd
