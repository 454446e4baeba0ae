#pragma once

// Minimal reverse-mode autodiff over dense double tensors.
//
// A Tensor is a cheap handle to a graph node. Ops build new nodes and, when
// gradient recording is enabled and any input requires grad, attach a
// backward closure. Everything is row-major double precision.

#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <vector>

namespace avarc::nn {

using Shape = std::vector<int>;

// Fixed 64-byte alignment keeps vectorized reductions bit-reproducible
// across allocations.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};
    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) {}
    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
    template <class U>
    bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

std::size_t shape_numel(const Shape& shape);

struct Node {
    Buffer value;
    Buffer grad;
    Shape shape;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    double* grad_data() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
        return grad.data();
    }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double v);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    int dim(int i) const;
    int rank() const { return static_cast<int>(node_->shape.size()); }
    std::size_t numel() const { return node_->value.size(); }

    std::span<const double> data() const { return node_->value; }
    std::span<double> mutable_data() { return node_->value; }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad() { return {node_->grad_data(), node_->value.size()}; }
    double item() const;

    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    void zero_grad();

    /// Backpropagates from this scalar; accumulates into leaf grads.
    void backward() const;

    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& node_ptr() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

bool grad_enabled();

/// Disables graph recording for the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

namespace detail {

/// Allocates an output node. Records parents only if recording is enabled and
/// at least one parent requires grad; the caller attaches backward_fn when
/// `out->requires_grad` is set.
std::shared_ptr<Node> make_node(Shape shape, std::initializer_list<const Tensor*> parents);
std::shared_ptr<Node> make_node(Shape shape, const std::vector<Tensor>& parents);

}  // namespace detail

}  // namespace avarc::nn
