#pragma once

#include <cstddef>
#include <vector>

#include "kem/tensor.hpp"

namespace kem {

// lr0 * (1 - t/T)^p, monotone non-increasing on [0, T]; t beyond T clamps
// to zero.
double poly_lr(std::size_t step, std::size_t total_steps, double lr0, double power);

// AdamW with decoupled weight decay:
//   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2  (bias-corrected)
//   theta <- theta - lr_t (m_hat / (sqrt(v_hat) + eps) + wd * theta)
// lr_t follows the polynomial schedule when total_steps > 0, else stays lr0.
struct OptimizerState {
    double lr0 = 5e-5;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double schedule_power = 0.9;
    std::size_t step_count = 0;
    std::size_t total_steps = 0;
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> second_moment;

    double current_lr() const;
};

OptimizerState make_optimizer_state(const std::vector<Tensor>& params, double lr0,
                                    double weight_decay, std::size_t total_steps,
                                    double schedule_power = 0.9);

// One update over explicit gradients. Shapes must match the parameters;
// a non-finite gradient rejects the whole step and leaves parameters and
// state untouched.
void optimizer_step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads,
                    OptimizerState& state);

// Convenience: gathers the gradients recorded on the parameters by the last
// backward() call.
void optimizer_step_from_grads(std::vector<Tensor>& params, OptimizerState& state);

} // namespace kem
