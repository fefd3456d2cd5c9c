#pragma once

#include "tsfusion/model.hpp"

namespace tsfusion {

/// Temporarily detaches every model parameter from gradient tracking.
class FrozenParameters {
public:
    explicit FrozenParameters(ParameterSet& ps) : ps_(ps) { ps_.set_requires_grad(false); }
    ~FrozenParameters() { ps_.set_requires_grad(true); }
    FrozenParameters(const FrozenParameters&) = delete;
    FrozenParameters& operator=(const FrozenParameters&) = delete;

private:
    ParameterSet& ps_;
};

/// Fast gradient sign perturbation of the input window:
///   X_adv = X + α · sign(∂ mse(model(X), target) / ∂X).
/// Only the input receives gradients. `mode` selects the normalization
/// behaviour of the attacking forward pass and never enables dropout.
inline Tensor adversarial_perturb(Model& model, const Tensor& history, const Tensor& target, double alpha,
                                  Mode mode = Mode::eval) {
    if (alpha < 0.0) throw ConfigError("adversarial strength must be non-negative");
    if (alpha == 0.0) return history.detach();
    if (mode == Mode::train) mode = Mode::attack;
    FrozenParameters frozen(model.parameters());
    Tensor x = history.detach();
    x.set_requires_grad(true);
    Rng unused(0);
    Tape tape;
    {
        TapeScope scope(tape);
        auto r = model.forward(x, mode, unused);
        tape.backward(mse_loss(r.forecast, target));
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    if (x.has_grad()) {
        auto g = x.grad();
        for (std::size_t i = 0; i < out.size(); ++i) {
            if (g[i] > 0.0) out[i] += alpha;
            else if (g[i] < 0.0) out[i] -= alpha;
        }
    }
    return Tensor(history.shape(), std::move(out));
}

} // namespace tsfusion
