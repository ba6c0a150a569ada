#include "kem/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "json.hpp"

namespace kem {

double mtl_loss(std::span<const double> per_task_losses, std::span<const double> weights) {
    if (per_task_losses.size() != weights.size())
        throw std::invalid_argument("mtl_loss: " + std::to_string(per_task_losses.size()) +
                                    " losses vs " + std::to_string(weights.size()) + " weights");
    for (const double w : weights)
        if (!(w > 0.0)) throw std::invalid_argument("mtl_loss: weights must be strictly positive");
    double total = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) total += weights[i] * per_task_losses[i];
    return total;
}

Tensor mtl_loss(std::span<const Tensor> per_task_losses, std::span<const double> weights) {
    if (per_task_losses.size() != weights.size())
        throw std::invalid_argument("mtl_loss: " + std::to_string(per_task_losses.size()) +
                                    " losses vs " + std::to_string(weights.size()) + " weights");
    if (per_task_losses.empty()) throw std::invalid_argument("mtl_loss: no tasks");
    for (const double w : weights)
        if (!(w > 0.0)) throw std::invalid_argument("mtl_loss: weights must be strictly positive");
    Tensor total = scale(per_task_losses[0], weights[0]);
    for (std::size_t i = 1; i < weights.size(); ++i)
        total = add(total, scale(per_task_losses[i], weights[i]));
    return total;
}

double miou(std::span<const int> pred, std::span<const int> truth, int n_classes) {
    if (pred.size() != truth.size())
        throw std::invalid_argument("miou: pred and truth sizes differ");
    if (pred.empty()) throw std::invalid_argument("miou: empty input");
    if (n_classes < 1) throw std::invalid_argument("miou: n_classes must be >= 1");

    std::vector<std::uint64_t> tp(static_cast<std::size_t>(n_classes), 0);
    std::vector<std::uint64_t> fp(static_cast<std::size_t>(n_classes), 0);
    std::vector<std::uint64_t> fn(static_cast<std::size_t>(n_classes), 0);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const int p = pred[i], t = truth[i];
        if (p < 0 || p >= n_classes || t < 0 || t >= n_classes)
            throw std::invalid_argument("miou: label out of range [0, " + std::to_string(n_classes) +
                                        ")");
        if (p == t) {
            ++tp[static_cast<std::size_t>(p)];
        } else {
            ++fp[static_cast<std::size_t>(p)];
            ++fn[static_cast<std::size_t>(t)];
        }
    }

    double total = 0.0;
    std::size_t present = 0;
    for (int c = 0; c < n_classes; ++c) {
        const auto i = static_cast<std::size_t>(c);
        const std::uint64_t denom = tp[i] + fp[i] + fn[i];
        if (denom == 0) continue; // class absent from both maps
        total += static_cast<double>(tp[i]) / static_cast<double>(denom);
        ++present;
    }
    return present == 0 ? 0.0 : total / static_cast<double>(present);
}

double rmse(std::span<const double> pred, std::span<const double> truth) {
    if (pred.size() != truth.size())
        throw std::invalid_argument("rmse: pred and truth sizes differ");
    if (pred.empty()) throw std::invalid_argument("rmse: empty input");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - truth[i];
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(pred.size()));
}

double accuracy(std::span<const int> pred, std::span<const int> truth) {
    if (pred.size() != truth.size())
        throw std::invalid_argument("accuracy: pred and truth sizes differ");
    if (pred.empty()) throw std::invalid_argument("accuracy: empty input");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        if (pred[i] == truth[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

double delta_m(std::span<const TaskScore> mtl_scores, std::span<const TaskScore> stl_scores) {
    if (mtl_scores.size() != stl_scores.size())
        throw std::invalid_argument("delta_m: score counts differ");
    if (mtl_scores.empty()) throw std::invalid_argument("delta_m: no tasks");
    double total = 0.0;
    for (std::size_t i = 0; i < mtl_scores.size(); ++i) {
        if (mtl_scores[i].lower_is_better != stl_scores[i].lower_is_better)
            throw std::invalid_argument("delta_m: direction flags differ on task " + std::to_string(i));
        if (stl_scores[i].value == 0.0)
            throw std::invalid_argument("delta_m: zero single-task score on task " + std::to_string(i));
        const double sign = stl_scores[i].lower_is_better ? -1.0 : 1.0;
        total += sign * (mtl_scores[i].value - stl_scores[i].value) / stl_scores[i].value;
    }
    return total / static_cast<double>(mtl_scores.size());
}

std::string metric_record(const std::string& metric, const std::string& task, double value,
                          const std::string& config_hash) {
    nlohmann::json j;
    j["metric"] = metric;
    j["task"] = task;
    j["value"] = value;
    j["config_hash"] = config_hash;
    return j.dump();
}

} // namespace kem
