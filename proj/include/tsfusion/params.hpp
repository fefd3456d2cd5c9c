#pragma once

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "tsfusion/checkpoint.hpp"
#include "tsfusion/ops.hpp"

namespace tsfusion {

/// Ordered registry of learnable tensors. Registration order fixes the
/// checkpoint layout and the optimizer's state layout.
class ParameterSet {
public:
    Tensor add(std::string name, Tensor t) {
        t.set_requires_grad(true);
        items_.emplace_back(std::move(name), t);
        return t;
    }

    const NamedTensors& items() const { return items_; }
    std::size_t size() const { return items_.size(); }

    std::size_t count() const {
        std::size_t c = 0;
        for (const auto& [_, t] : items_) c += t.numel();
        return c;
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    std::size_t count(const std::string& prefix) const {
        std::size_t c = 0;
        for (const auto& [name, t] : items_)
            if (name.rfind(prefix, 0) == 0) c += t.numel();
        return c;
    }

    void zero_grad() {
        for (auto& [_, t] : items_) t.zero_grad();
    }

    void set_requires_grad(bool v) {
        for (auto& [_, t] : items_) t.set_requires_grad(v);
    }

    Tensor find(const std::string& name) const {
        for (const auto& [n, t] : items_)
            if (n == name) return t;
        throw Error("no parameter named " + name);
    }

private:
    NamedTensors items_;
};

/// Glorot-uniform initialization.
inline Tensor glorot(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> u(-a, a);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = u(rng);
    return Tensor(std::move(shape), std::move(v));
}

/// One-hidden-layer perceptron: relu(x W1 + b1) W2 + b2.
struct Mlp {
    Tensor w1, b1, w2, b2;

    static Mlp create(ParameterSet& ps, const std::string& prefix, std::size_t in, std::size_t hidden,
                      std::size_t out, Rng& rng) {
        Mlp m;
        m.w1 = ps.add(prefix + ".w1", glorot({in, hidden}, in, hidden, rng));
        m.b1 = ps.add(prefix + ".b1", Tensor::zeros({hidden}));
        m.w2 = ps.add(prefix + ".w2", glorot({hidden, out}, hidden, out, rng));
        m.b2 = ps.add(prefix + ".b2", Tensor::zeros({out}));
        return m;
    }

    Tensor operator()(const Tensor& x) const {
        return add_bias(matmul(relu(add_bias(matmul(x, w1), b1)), w2), b2);
    }
};

} // namespace tsfusion
