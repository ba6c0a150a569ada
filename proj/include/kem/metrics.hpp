#pragma once

#include <span>
#include <string>
#include <vector>

#include "kem/tensor.hpp"

namespace kem {

// Weighted multi-task loss: sum_i alpha_i * L_i. The tensor overload stays
// differentiable through the per-task losses.
double mtl_loss(std::span<const double> per_task_losses, std::span<const double> weights);
Tensor mtl_loss(std::span<const Tensor> per_task_losses, std::span<const double> weights);

// Mean over classes present in truth or pred of TP / (TP + FP + FN);
// classes absent from both are excluded from the mean.
double miou(std::span<const int> pred, std::span<const int> truth, int n_classes);

double rmse(std::span<const double> pred, std::span<const double> truth);

double accuracy(std::span<const int> pred, std::span<const int> truth);

struct TaskScore {
    double value = 0.0;
    bool lower_is_better = false;
};

// Delta_m = (1/n) sum_i (-1)^{l_i} (M_mtl,i - M_stl,i) / M_stl,i.
// Positive means the multi-task model beats single-task on average.
double delta_m(std::span<const TaskScore> mtl_scores, std::span<const TaskScore> stl_scores);

// One serialized metric record: {"metric":..., "task":..., "value":...,
// "config_hash":...}
std::string metric_record(const std::string& metric, const std::string& task, double value,
                          const std::string& config_hash);

} // namespace kem
