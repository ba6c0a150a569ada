#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kem/rng.hpp"
#include "kem/tensor.hpp"

namespace kem {

struct EtfFrame; // etf.hpp

enum class Mechanism { CrossAttention, Kem, Skem };

std::string mechanism_name(Mechanism m);
Mechanism mechanism_from_name(const std::string& name);

// Concatenated per-task token features F = F_1 (+) F_2 (+) ... (+) F_n,
// laid out as contiguous task blocks of m tokens each: token j belongs to
// task j / m.
struct TaskFeatureBlock {
    std::size_t n_tasks = 0;
    std::size_t tokens_per_task = 0;
    std::size_t width = 0;
    Tensor features; // (n_tasks * tokens_per_task) x width

    static TaskFeatureBlock wrap(std::size_t n_tasks, std::size_t tokens_per_task, Tensor features);

    std::size_t total_tokens() const { return n_tasks * tokens_per_task; }
    std::size_t task_of_token(std::size_t token) const { return token / tokens_per_task; }
};

// The learnable bottleneck: L slots of width d.
struct MemorySlots {
    Tensor slots; // L x d

    static MemorySlots init(std::size_t length, std::size_t width, CounterRng& rng);

    std::size_t length() const { return slots.rows(); }
    std::size_t width() const { return slots.cols(); }
};

struct KemParams {
    Tensor W_qr, W_kr, W_vr; // retrieve projections, d x d
    Tensor W_qw, W_kw, W_vw; // write projections, d x d
    double residual_weight = 1.0;
    std::size_t top_k = 3;

    static KemParams init(std::size_t width, std::size_t top_k, CounterRng& rng);
    std::vector<Tensor> parameters() const;
};

struct CrossAttentionParams {
    Tensor W_q, W_k, W_v; // d x d

    static CrossAttentionParams init(std::size_t width, CounterRng& rng);
    std::vector<Tensor> parameters() const;
};

// Detached copies of the attention weight matrices produced by a forward
// pass, in execution order.
struct AttentionProbe {
    enum class Kind { CrossMap, RetrieveMap, WriteMap };
    struct Entry {
        Kind kind;
        Tensor map;
    };
    std::vector<Entry> entries;
};

// F' = softmax((F Wq)(F Wk)^T / sqrt(d)) F Wv
Tensor cross_attention(const TaskFeatureBlock& F, const CrossAttentionParams& params,
                       AttentionProbe* probe = nullptr);

// Retrieve: R_hat = topk-softmax((R Wqr)(F Wkr)^T / sqrt(d)) F Wvr.
// Each slot attends to exactly min(top_k, n_s) tokens.
Tensor kem_retrieve(const TaskFeatureBlock& F, const MemorySlots& slots, const KemParams& params,
                    AttentionProbe* probe = nullptr);

// Write: F_hat = softmax((F Wqw)(R_hat Wkw)^T / sqrt(d)) R_hat Wvw.
// Plain softmax over the L slots per token; output has the shape of F.
Tensor kem_write(const TaskFeatureBlock& F, const Tensor& r_hat, const KemParams& params,
                 AttentionProbe* probe = nullptr);

// Broadcast: features become F + residual_weight * F_hat; metadata unchanged.
TaskFeatureBlock kem_broadcast(const TaskFeatureBlock& F, const Tensor& f_hat,
                               double residual_weight);

// Retrieve -> Write -> Broadcast. With an EtfFrame present the retrieve
// logits are mixed through the ETF Gram along the task axis first.
TaskFeatureBlock kem_forward(const TaskFeatureBlock& F, const MemorySlots& slots,
                             const KemParams& params, const EtfFrame* etf = nullptr,
                             AttentionProbe* probe = nullptr);

} // namespace kem
