#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tsfusion/errors.hpp"

namespace tsfusion {

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

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    // Empty until the first accumulation; same length as data afterwards.
    std::vector<double> grad;
    bool requires_grad = false;
    // Index of the tape node that produced this value, if any.
    std::optional<std::size_t> tape_id;

    void accumulate(std::span<const double> g) {
        if (!requires_grad) return;
        if (grad.empty()) grad.assign(data.size(), 0.0);
        for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
    }
};

} // namespace detail

/// Dense row-major float64 array. Copies share storage (handle semantics),
/// which is what lets the tape refer back to operands after the caller's
/// handles go out of scope. Use clone() for an independent copy.
class Tensor {
public:
    Tensor() : impl_(std::make_shared<detail::TensorImpl>()) { impl_->shape = {}; impl_->data = {0.0}; }

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
        : impl_(std::make_shared<detail::TensorImpl>()) {
        if (shape_numel(shape) != data.size()) {
            throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                                 std::to_string(shape_numel(shape)) + " elements, buffer has " +
                                 std::to_string(data.size()));
        }
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
        impl_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }
    static Tensor full(Shape shape, double value) {
        auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value));
    }
    static Tensor scalar(double v, bool requires_grad = false) { return Tensor({}, {v}, requires_grad); }
    static Tensor eye(std::size_t n) {
        auto t = zeros({n, n});
        for (std::size_t i = 0; i < n; ++i) t.impl_->data[i * n + i] = 1.0;
        return t;
    }

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<const double> data() const { return impl_->data; }
    // Writing into a tensor that already sits on a tape invalidates its
    // recorded backward; only do this on leaves.
    std::span<double> mutable_data() { return impl_->data; }
    const std::vector<double>& vec() const { return impl_->data; }

    double item() const {
        if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
        return impl_->data[0];
    }
    double operator[](std::size_t i) const { return impl_->data[i]; }
    double at(std::size_t i, std::size_t j) const { return impl_->data[i * impl_->shape.at(1) + j]; }
    double at(std::size_t i, std::size_t j, std::size_t k) const {
        return impl_->data[(i * impl_->shape.at(1) + j) * impl_->shape.at(2) + k];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }
    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const double> grad() const { return impl_->grad; }
    Tensor grad_tensor() const {
        if (!has_grad()) return zeros(shape());
        return Tensor(shape(), impl_->grad);
    }
    void zero_grad() { impl_->grad.clear(); }

    std::optional<std::size_t> tape_id() const { return impl_->tape_id; }

    /// Independent copy of the values, off the tape and without gradient.
    Tensor detach() const { return Tensor(shape(), impl_->data, false); }
    Tensor clone() const { return Tensor(shape(), impl_->data, impl_->requires_grad); }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

/// Append-only record of differentiable operations. Node order is execution
/// order, which is a topological order of the computation graph.
class Tape {
public:
    using BackwardFn = std::function<void(std::span<const double> grad_out)>;

    struct Node {
        std::string kind;
        std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
        std::shared_ptr<detail::TensorImpl> output;
        BackwardFn backward;
    };

    std::size_t record(Node node) {
        node.output->tape_id = nodes_.size();
        nodes_.push_back(std::move(node));
        return nodes_.size() - 1;
    }

    std::size_t size() const { return nodes_.size(); }
    const Node& node(std::size_t i) const { return nodes_.at(i); }

    /// Reverse sweep from a scalar loss. Each node is visited once; nodes whose
    /// output never received gradient are skipped, so tensors unreachable from
    /// the loss get none.
    void backward(const Tensor& loss) {
        if (loss.numel() != 1 || loss.rank() > 1) {
            throw DimensionError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
        }
        auto id = loss.tape_id();
        if (!id || *id >= nodes_.size() || nodes_[*id].output != loss.impl()) {
            throw Error("backward: loss was not recorded on this tape");
        }
        auto& out = *loss.impl();
        out.grad.assign(1, 1.0);
        for (std::size_t i = *id + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (n.output->grad.empty()) continue;
            n.backward(n.output->grad);
        }
    }

    void clear() {
        for (auto& n : nodes_) n.output->tape_id.reset();
        nodes_.clear();
    }

private:
    std::vector<Node> nodes_;
};

namespace detail {
inline Tape*& active_tape_slot() {
    thread_local Tape* tape = nullptr;
    return tape;
}
} // namespace detail

inline Tape* active_tape() { return detail::active_tape_slot(); }

/// Makes `tape` the recording target for operations on this thread until the
/// scope ends. Without an active tape, operations compute values only.
class TapeScope {
public:
    explicit TapeScope(Tape& tape) : previous_(detail::active_tape_slot()) { detail::active_tape_slot() = &tape; }
    ~TapeScope() { detail::active_tape_slot() = previous_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

/// Suspends recording on this thread.
class NoGradScope {
public:
    NoGradScope() : previous_(detail::active_tape_slot()) { detail::active_tape_slot() = nullptr; }
    ~NoGradScope() { detail::active_tape_slot() = previous_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape* previous_;
};

namespace detail {

// Records `out` as produced from `inputs` when a tape is active and any input
// needs gradient. The backward closure receives d(loss)/d(out).
inline void record(std::string kind, std::initializer_list<Tensor> inputs, Tensor& out, Tape::BackwardFn fn) {
    Tape* tape = active_tape();
    if (!tape) return;
    bool needs = false;
    for (const auto& t : inputs) needs = needs || t.requires_grad();
    if (!needs) return;
    out.set_requires_grad(true);
    Tape::Node node;
    node.kind = std::move(kind);
    for (const auto& t : inputs) node.inputs.push_back(t.impl());
    node.output = out.impl();
    node.backward = std::move(fn);
    tape->record(std::move(node));
}

inline void record(std::string kind, const std::vector<Tensor>& inputs, Tensor& out, Tape::BackwardFn fn) {
    Tape* tape = active_tape();
    if (!tape) return;
    bool needs = false;
    for (const auto& t : inputs) needs = needs || t.requires_grad();
    if (!needs) return;
    out.set_requires_grad(true);
    Tape::Node node;
    node.kind = std::move(kind);
    for (const auto& t : inputs) node.inputs.push_back(t.impl());
    node.output = out.impl();
    node.backward = std::move(fn);
    tape->record(std::move(node));
}

} // namespace detail

} // namespace tsfusion
