#pragma once

// Dense row-major float64 tensors with a reverse-mode gradient tape.
//
// A Tensor is a shared handle: copies alias the same storage, which is what
// lets several mixture modules reference one tied up-projection. Every
// differentiable op records a GradNode on its result when at least one input
// requires grad. backward() orders the reachable nodes into a GradTape,
// replays it in reverse, and then drops the tape: intermediate results lose
// their node and gradient, leaves keep the accumulated gradient.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "adamix/errors.hpp"

namespace adamix {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

class Tensor;

namespace detail {

struct GradNode {
    const char* op = "";
    std::vector<Tensor> inputs;
    // Receives the gradient of the node's output and accumulates into inputs.
    std::function<void(std::span<const double>)> backward;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::optional<std::vector<double>> grad;
    std::shared_ptr<GradNode> node;
};

inline thread_local int no_grad_depth = 0;

}  // namespace detail

/// True unless a NoGradGuard is active on this thread.
inline bool grad_enabled() { return detail::no_grad_depth == 0; }

/// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() { ++detail::no_grad_depth; }
    ~NoGradGuard() { --detail::no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
        : impl_(std::make_shared<detail::TensorImpl>()) {
        for (std::size_t d : shape) {
            if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
        }
        impl_->data.assign(shape_numel(shape), fill);
        impl_->shape = std::move(shape);
        impl_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
        : impl_(std::make_shared<detail::TensorImpl>()) {
        for (std::size_t d : shape) {
            if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
        }
        if (shape_numel(shape) != values.size()) {
            throw DimensionError("shape " + shape_str(shape) + " does not hold " + std::to_string(values.size()) +
                                 " values");
        }
        impl_->shape = std::move(shape);
        impl_->data = std::move(values);
        impl_->requires_grad = requires_grad;
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return Tensor(Shape{1}, std::vector<double>{value}, requires_grad);
    }

    [[nodiscard]] bool defined() const { return impl_ != nullptr; }
    [[nodiscard]] const Shape& shape() const { return impl_->shape; }
    [[nodiscard]] std::size_t rank() const { return impl_->shape.size(); }
    [[nodiscard]] std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
    [[nodiscard]] std::size_t numel() const { return impl_->data.size(); }

    [[nodiscard]] std::span<const double> data() const { return impl_->data; }
    [[nodiscard]] std::span<double> mutable_data() { return impl_->data; }
    [[nodiscard]] const std::vector<double>& values() const { return impl_->data; }

    [[nodiscard]] double item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return impl_->data[0];
    }

    [[nodiscard]] bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool flag) {
        impl_->requires_grad = flag;
        if (!flag) impl_->grad.reset();
    }

    [[nodiscard]] bool has_grad() const { return impl_->grad.has_value(); }
    [[nodiscard]] std::span<const double> grad() const {
        if (!impl_->grad) throw ContractError("tensor has no gradient");
        return *impl_->grad;
    }
    void clear_grad() { impl_->grad.reset(); }

    [[nodiscard]] bool is_leaf() const { return impl_->node == nullptr; }

    /// Fresh storage with the same values; not on the tape.
    [[nodiscard]] Tensor detach() const { return Tensor(shape(), impl_->data, false); }

    [[nodiscard]] bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    [[nodiscard]] detail::TensorImpl* impl() const { return impl_.get(); }

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

/// Gradient buffer of `t`, allocated as zeros on first use.
inline std::vector<double>& grad_buffer(const Tensor& t) {
    TensorImpl* impl = t.impl();
    if (!impl->grad) impl->grad.emplace(impl->data.size(), 0.0);
    return *impl->grad;
}

/// Builds an op result and records its backward rule when any input is
/// tracked and recording is enabled.
inline Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs, const char* op,
                          std::function<void(std::span<const double>)> backward) {
    Tensor out(std::move(shape), std::move(values));
    if (!grad_enabled()) return out;
    const bool tracked = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (!tracked) return out;
    auto node = std::make_shared<GradNode>();
    node->op = op;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
    out.impl()->requires_grad = true;
    out.impl()->node = std::move(node);
    return out;
}

}  // namespace detail

/// Topologically ordered record of the ops reachable from one root tensor.
class GradTape {
public:
    static GradTape record(const Tensor& root) {
        GradTape tape;
        std::unordered_set<const detail::TensorImpl*> visited;
        // Iterative post-order DFS: a tensor is appended after all its inputs.
        std::vector<std::pair<Tensor, std::size_t>> stack;
        stack.emplace_back(root, 0);
        visited.insert(root.impl());
        while (!stack.empty()) {
            auto& [tensor, next] = stack.back();
            const auto& node = tensor.impl()->node;
            if (node && next < node->inputs.size()) {
                const Tensor& input = node->inputs[next++];
                if (input.requires_grad() && visited.insert(input.impl()).second) {
                    stack.emplace_back(input, 0);
                }
                continue;
            }
            tape.order_.push_back(tensor);
            stack.pop_back();
        }
        return tape;
    }

    [[nodiscard]] std::size_t size() const { return order_.size(); }

    /// Number of recorded ops (non-leaf entries).
    [[nodiscard]] std::size_t op_count() const {
        return static_cast<std::size_t>(
            std::count_if(order_.begin(), order_.end(), [](const Tensor& t) { return !t.is_leaf(); }));
    }

    /// Runs every backward rule once, newest op first, then releases the
    /// intermediate results' nodes and gradients.
    void replay() {
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            detail::TensorImpl* impl = it->impl();
            if (!impl->node || !impl->grad) continue;
            impl->node->backward(*impl->grad);
        }
        for (Tensor& t : order_) {
            if (!t.is_leaf()) {
                t.impl()->node.reset();
                t.impl()->grad.reset();
            }
        }
        order_.clear();
    }

private:
    std::vector<Tensor> order_;
};

/// Populates grad on every tracked tensor reachable from `loss`.
inline void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward() needs a scalar loss, got " + (loss.defined() ? shape_str(loss.shape()) : "undefined"));
    }
    if (!loss.requires_grad()) throw ContractError("backward() on a loss that is not on the tape");
    GradTape tape = GradTape::record(loss);
    detail::grad_buffer(loss)[0] += 1.0;
    tape.replay();
}

}  // namespace adamix
