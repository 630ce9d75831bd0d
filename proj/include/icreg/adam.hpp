#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "common.hpp"

namespace icreg {

struct AdamConfig {
    double lr0 = 0.003;
    /// Learning rate after t steps is lr0 * decay^t.
    double decay = 1.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Moment accumulators for one parameter vector.
template <class Real = double>
class AdamState {
public:
    AdamState() = default;
    AdamState(std::size_t size, AdamConfig cfg) : cfg_(cfg), m_(size, Real(0)), v_(size, Real(0)) {}

    std::size_t step() const { return step_; }
    std::size_t size() const { return m_.size(); }
    const AdamConfig& config() const { return cfg_; }
    std::span<const Real> first_moment() const { return m_; }
    std::span<const Real> second_moment() const { return v_; }

    double learning_rate() const { return cfg_.lr0 * std::pow(cfg_.decay, double(step_)); }

    /// Consumes one gradient and writes the update to subtract from the
    /// parameters.
    void update(std::span<const Real> grad, std::span<Real> delta)
    {
        if (grad.size() != m_.size() || delta.size() != m_.size())
            throw Error("adam: gradient has " + std::to_string(grad.size()) + " entries, state has " +
                        std::to_string(m_.size()));
        for (std::size_t i = 0; i < grad.size(); ++i)
            if (!std::isfinite(double(grad[i])))
                throw Error("adam: non-finite gradient at index " + std::to_string(i));

        const double lr = learning_rate();
        ++step_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, double(step_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, double(step_));
        const double b1 = cfg_.beta1, b2 = cfg_.beta2, eps = cfg_.eps;
        Real* m = m_.data();
        Real* v = v_.data();
        detail::parallel_for(grad.size(), [&](std::size_t i) {
            const double g = grad[i];
            const double mi = b1 * m[i] + (1.0 - b1) * g;
            const double vi = b2 * v[i] + (1.0 - b2) * g * g;
            m[i] = static_cast<Real>(mi);
            v[i] = static_cast<Real>(vi);
            delta[i] = static_cast<Real>(lr * (mi / c1) / (std::sqrt(vi / c2) + eps));
        });
    }

private:
    AdamConfig cfg_{};
    std::size_t step_ = 0;
    std::vector<Real> m_;
    std::vector<Real> v_;
};

template <class Real>
struct AdamStepResult {
    AdamState<Real> state;
    std::vector<Real> update;
};

/// Value-returning form of AdamState::update.
template <class Real>
AdamStepResult<Real> adam_step(AdamState<Real> state, std::span<const Real> grad)
{
    std::vector<Real> delta(grad.size());
    state.update(grad, delta);
    return {std::move(state), std::move(delta)};
}

/// loss_and_grad(params, grad_out) returns the loss at params and fills the
/// gradient.
template <class Real>
using LossAndGrad = std::function<double(std::span<const Real>, std::span<Real>)>;

template <class Real>
struct MinimizeResult {
    std::vector<Real> params;
    /// Loss at the start of every iteration.
    std::vector<double> trace;
};

/// Exactly `iterations` Adam steps; no early stopping.
template <class Real>
MinimizeResult<Real> minimize(const LossAndGrad<Real>& loss_and_grad, std::vector<Real> params, int iterations,
                              AdamConfig cfg)
{
    if (iterations < 0)
        throw Error("minimize: iterations must be >= 0");
    MinimizeResult<Real> r;
    r.trace.reserve(static_cast<std::size_t>(iterations));
    AdamState<Real> state(params.size(), cfg);
    std::vector<Real> grad(params.size()), delta(params.size());
    for (int it = 0; it < iterations; ++it) {
        double loss = 0.0;
        try {
            loss = loss_and_grad(params, grad);
        } catch (const std::exception& e) {
            throw Error("minimize: iteration " + std::to_string(it) + ": " + e.what());
        }
        r.trace.push_back(loss);
        state.update(grad, delta);
        for (std::size_t i = 0; i < params.size(); ++i)
            params[i] -= delta[i];
    }
    r.params = std::move(params);
    return r;
}

} // namespace icreg
