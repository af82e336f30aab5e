#include "ddpmcd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

namespace ddpmcd {

const char* dtype_name(DType dt) { return dt == DType::f32 ? "f32" : "f64"; }

int64_t numel_of(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Storage Storage::make(DType dt, int64_t n) {
    Storage s = make_uninit(dt, n);
    std::memset(s.bytes_.get(), 0, s.byte_count());
    return s;
}

Storage Storage::make_uninit(DType dt, int64_t n) {
    Storage s;
    s.dtype_ = dt;
    s.count_ = n;
    s.bytes_ = std::make_unique_for_overwrite<std::byte[]>(
        static_cast<size_t>(n) * (dt == DType::f32 ? 4 : 8));
    return s;
}

Storage::Storage(const Storage& other) : dtype_(other.dtype_), count_(other.count_) {
    if (other.bytes_) {
        bytes_ = std::make_unique_for_overwrite<std::byte[]>(byte_count());
        std::memcpy(bytes_.get(), other.bytes_.get(), byte_count());
    }
}

Storage& Storage::operator=(const Storage& other) {
    if (this != &other) {
        Storage tmp(other);
        *this = std::move(tmp);
    }
    return *this;
}

void Storage::fill(double v) {
    if (dtype_ == DType::f32)
        for (auto& x : as<float>()) x = static_cast<float>(v);
    else
        for (auto& x : as<double>()) x = v;
}

namespace {
thread_local bool g_grad_enabled = true;

std::shared_ptr<TensorImpl> new_impl(Shape shape, DType dt, bool zeroed = true) {
    auto impl = std::make_shared<TensorImpl>();
    int64_t n = numel_of(shape);
    impl->shape = std::move(shape);
    impl->data = std::make_shared<Storage>(zeroed ? Storage::make(dt, n)
                                                  : Storage::make_uninit(dt, n));
    return impl;
}
}  // namespace

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

int64_t Tensor::dim(int i) const {
    int nd = ndim();
    if (i < 0) i += nd;
    if (i < 0 || i >= nd)
        throw ContractError("Tensor::dim: axis " + std::to_string(i) + " out of range for " + shape_str(shape()));
    return impl_->shape[static_cast<size_t>(i)];
}

Tensor& Tensor::set_requires_grad(bool on) {
    if (on && impl_->grad_fn)
        throw ContractError("set_requires_grad: only leaf tensors can toggle requires_grad");
    impl_->requires_grad = on;
    return *this;
}

double Tensor::item() const {
    if (numel() != 1)
        throw ContractError("Tensor::item: tensor has " + std::to_string(numel()) + " elements, expected 1");
    return at(0);
}

double Tensor::at(int64_t flat_index) const {
    if (flat_index < 0 || flat_index >= numel())
        throw ContractError("Tensor::at: index out of range");
    if (dtype() == DType::f32) return static_cast<double>(data<float>()[static_cast<size_t>(flat_index)]);
    return data<double>()[static_cast<size_t>(flat_index)];
}

Tensor Tensor::grad() const {
    if (!impl_->grad)
        throw ContractError("Tensor::grad: no gradient populated");
    auto impl = new_impl(impl_->shape, dtype());
    *impl->data = *impl_->grad;
    return Tensor(impl);
}

Tensor Tensor::detach() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;  // shares the buffer
    return Tensor(impl);
}

Tensor Tensor::clone() const {
    auto impl = new_impl(impl_->shape, dtype());
    *impl->data = *impl_->data;
    return Tensor(impl);
}

Tensor Tensor::to(DType dt) const {
    if (dt == dtype()) return clone();
    auto impl = new_impl(impl_->shape, dt);
    int64_t n = numel();
    if (dt == DType::f64) {
        auto src = data<float>();
        auto dst = impl->data->as<double>();
        for (int64_t i = 0; i < n; ++i) dst[i] = static_cast<double>(src[i]);
    } else {
        auto src = data<double>();
        auto dst = impl->data->as<float>();
        for (int64_t i = 0; i < n; ++i) dst[i] = static_cast<float>(src[i]);
    }
    return Tensor(impl);
}

namespace {
template <typename T>
void add_into(Storage& dst, const Storage& src) {
    auto d = dst.as<T>();
    auto s = src.as<T>();
    for (size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}
}  // namespace

void accumulate_grad(TensorImpl& node, const Storage& delta) {
    if (delta.size() != node.numel())
        throw ContractError("accumulate_grad: grad size mismatch");
    if (!node.grad) {
        node.grad = std::make_unique<Storage>(delta);
        return;
    }
    if (node.data->dtype() == DType::f32)
        add_into<float>(*node.grad, delta);
    else
        add_into<double>(*node.grad, delta);
}

void Tensor::backward() const {
    if (numel() != 1)
        throw ContractError("backward: expected scalar loss, got shape " + shape_str(shape()));

    // Topological order by iterative DFS over grad_fn inputs.
    std::vector<TensorImpl*> topo;
    std::unordered_set<TensorImpl*> visited;
    std::vector<std::pair<TensorImpl*, size_t>> stack;
    stack.emplace_back(impl_.get(), 0);
    visited.insert(impl_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (!node->grad_fn || next >= node->grad_fn->inputs.size()) {
            topo.push_back(node);
            stack.pop_back();
            continue;
        }
        TensorImpl* child = node->grad_fn->inputs[next++].get();
        if (child->grad_fn && !visited.count(child)) {
            visited.insert(child);
            stack.emplace_back(child, 0);
        }
    }

    Storage seed = Storage::make(dtype(), 1);
    seed.fill(1.0);
    accumulate_grad(*impl_, seed);

    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        TensorImpl* node = *it;
        if (!node->grad_fn) continue;
        if (node->grad) node->grad_fn->backward(*node);
    }
}

Tensor zeros(const Shape& shape, DType dt) { return Tensor(new_impl(shape, dt)); }

Tensor ones(const Shape& shape, DType dt) { return full(shape, 1.0, dt); }

Tensor full(const Shape& shape, double value, DType dt) {
    auto impl = new_impl(shape, dt);
    impl->data->fill(value);
    return Tensor(impl);
}

Tensor from_vector(const Shape& shape, const std::vector<float>& v) {
    if (numel_of(shape) != static_cast<int64_t>(v.size()))
        throw DimensionError("from_vector: shape " + shape_str(shape) + " wants " +
                             std::to_string(numel_of(shape)) + " values, got " + std::to_string(v.size()));
    auto impl = new_impl(shape, DType::f32);
    std::copy(v.begin(), v.end(), impl->data->as<float>().begin());
    return Tensor(impl);
}

Tensor from_vector(const Shape& shape, const std::vector<double>& v) {
    if (numel_of(shape) != static_cast<int64_t>(v.size()))
        throw DimensionError("from_vector: shape " + shape_str(shape) + " wants " +
                             std::to_string(numel_of(shape)) + " values, got " + std::to_string(v.size()));
    auto impl = new_impl(shape, DType::f64);
    std::copy(v.begin(), v.end(), impl->data->as<double>().begin());
    return Tensor(impl);
}

Tensor scalar_tensor(double v, DType dt) { return full({1}, v, dt); }

Tensor empty_like(const Tensor& t) { return Tensor(new_impl(t.shape(), t.dtype())); }

bool all_finite(const Tensor& t) {
    bool ok = true;
    if (t.dtype() == DType::f32) {
        for (float v : t.data<float>()) {
            if (!std::isfinite(v)) { ok = false; break; }
        }
    } else {
        for (double v : t.data<double>()) {
            if (!std::isfinite(v)) { ok = false; break; }
        }
    }
    return ok;
}

namespace detail {

bool any_requires_grad(const std::vector<Tensor>& ts) {
    for (const auto& t : ts)
        if (t.requires_grad() || t.impl()->grad_fn) return true;
    return false;
}

Tensor make_op_output(Shape shape, DType dt, std::string op,
                      std::vector<Tensor> inputs,
                      std::function<void(const TensorImpl&)> backward) {
    // Every op's forward pass writes the full output, so skip the zero-fill.
    auto impl = new_impl(std::move(shape), dt, /*zeroed=*/false);
    if (grad_enabled() && backward && any_requires_grad(inputs)) {
        auto fn = std::make_shared<GradFn>();
        fn->op = std::move(op);
        fn->inputs.reserve(inputs.size());
        for (auto& t : inputs) fn->inputs.push_back(t.impl());
        fn->backward = std::move(backward);
        impl->grad_fn = std::move(fn);
        impl->requires_grad = true;
    }
    return Tensor(impl);
}

}  // namespace detail

}  // namespace ddpmcd
