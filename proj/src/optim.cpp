#include "kem/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace kem {

double poly_lr(std::size_t step, std::size_t total_steps, double lr0, double power) {
    if (total_steps == 0) throw std::invalid_argument("poly_lr: total_steps must be >= 1");
    if (step >= total_steps) return 0.0;
    const double frac = 1.0 - static_cast<double>(step) / static_cast<double>(total_steps);
    return lr0 * std::pow(frac, power);
}

double OptimizerState::current_lr() const {
    if (total_steps == 0) return lr0;
    return poly_lr(step_count, total_steps, lr0, schedule_power);
}

OptimizerState make_optimizer_state(const std::vector<Tensor>& params, double lr0,
                                    double weight_decay, std::size_t total_steps,
                                    double schedule_power) {
    OptimizerState state;
    state.lr0 = lr0;
    state.weight_decay = weight_decay;
    state.total_steps = total_steps;
    state.schedule_power = schedule_power;
    state.first_moment.reserve(params.size());
    state.second_moment.reserve(params.size());
    for (const auto& p : params) {
        state.first_moment.emplace_back(p.size(), 0.0);
        state.second_moment.emplace_back(p.size(), 0.0);
    }
    return state;
}

void optimizer_step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads,
                    OptimizerState& state) {
    if (params.size() != grads.size() || params.size() != state.first_moment.size())
        throw std::invalid_argument("optimizer_step: parameter, gradient and state counts differ");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i].size() != params[i].size() ||
            state.first_moment[i].size() != params[i].size())
            throw std::invalid_argument("optimizer_step: shape mismatch on parameter " +
                                        std::to_string(i));
        for (const double g : grads[i])
            if (!std::isfinite(g))
                throw std::runtime_error("optimizer_step: non-finite gradient on parameter " +
                                         std::to_string(i) + "; step rejected");
    }

    const double lr = state.current_lr();
    const std::size_t t = state.step_count + 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(t));

    for (std::size_t i = 0; i < params.size(); ++i) {
        auto vals = params[i].mutable_values();
        auto& m = state.first_moment[i];
        auto& v = state.second_moment[i];
        const auto& g = grads[i];
        for (std::size_t j = 0; j < vals.size(); ++j) {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            const double m_hat = m[j] / bc1;
            const double v_hat = v[j] / bc2;
            vals[j] -= lr * (m_hat / (std::sqrt(v_hat) + state.eps) + state.weight_decay * vals[j]);
        }
    }
    state.step_count = t;
}

void optimizer_step_from_grads(std::vector<Tensor>& params, OptimizerState& state) {
    std::vector<std::vector<double>> grads;
    grads.reserve(params.size());
    for (const auto& p : params) {
        const auto g = p.grad();
        grads.emplace_back(g.begin(), g.end());
    }
    optimizer_step(params, grads, state);
}

} // namespace kem
