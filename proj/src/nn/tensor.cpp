#include "avarc/nn/tensor.hpp"

#include <algorithm>
#include <unordered_set>

#include "avarc/error.hpp"

namespace avarc::nn {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw ShapeError("negative dimension");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto node = std::make_shared<Node>();
    node->value.assign(shape_numel(shape), 0.0);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) throw ShapeError("value count does not match shape");
    auto node = std::make_shared<Node>();
    node->value.assign(values.begin(), values.end());
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

int Tensor::dim(int i) const {
    const auto& s = node_->shape;
    if (i < 0) i += static_cast<int>(s.size());
    if (i < 0 || i >= static_cast<int>(s.size())) throw ShapeError("dimension index out of range");
    return s[static_cast<std::size_t>(i)];
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on a non-scalar tensor");
    return node_->value[0];
}

void Tensor::zero_grad() {
    if (node_) node_->grad.assign(node_->value.size(), 0.0);
}

void Tensor::backward() const {
    if (numel() != 1) throw ShapeError("backward() requires a scalar");
    if (!node_->requires_grad) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node* p = n->parents[idx++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->grad_data()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn) {
            n->grad_data();
            n->backward_fn(*n);
        }
    }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace detail {

std::shared_ptr<Node> make_node(Shape shape, std::initializer_list<const Tensor*> parents) {
    auto node = std::make_shared<Node>();
    node->value.assign(shape_numel(shape), 0.0);
    node->shape = std::move(shape);
    if (g_grad_enabled) {
        bool any = std::any_of(parents.begin(), parents.end(),
                               [](const Tensor* t) { return t->requires_grad(); });
        if (any) {
            node->requires_grad = true;
            for (const Tensor* t : parents) node->parents.push_back(t->node_ptr());
        }
    }
    return node;
}

std::shared_ptr<Node> make_node(Shape shape, const std::vector<Tensor>& parents) {
    auto node = std::make_shared<Node>();
    node->value.assign(shape_numel(shape), 0.0);
    node->shape = std::move(shape);
    if (g_grad_enabled) {
        bool any = std::any_of(parents.begin(), parents.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
        if (any) {
            node->requires_grad = true;
            for (const Tensor& t : parents) node->parents.push_back(t.node_ptr());
        }
    }
    return node;
}

}  // namespace detail

}  // namespace avarc::nn
