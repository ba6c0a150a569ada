#include "kem/attention.hpp"

#include <cmath>
#include <stdexcept>

#include "kem/etf.hpp"

namespace kem {

std::string mechanism_name(Mechanism m) {
    switch (m) {
        case Mechanism::CrossAttention: return "cross-attention";
        case Mechanism::Kem: return "kem";
        case Mechanism::Skem: return "skem";
    }
    throw std::logic_error("mechanism_name: unknown mechanism");
}

Mechanism mechanism_from_name(const std::string& name) {
    if (name == "cross-attention") return Mechanism::CrossAttention;
    if (name == "kem") return Mechanism::Kem;
    if (name == "skem") return Mechanism::Skem;
    throw std::invalid_argument("unknown mechanism '" + name +
                                "' (expected cross-attention, kem or skem)");
}

TaskFeatureBlock TaskFeatureBlock::wrap(std::size_t n_tasks, std::size_t tokens_per_task,
                                        Tensor features) {
    if (n_tasks == 0 || tokens_per_task == 0)
        throw std::invalid_argument("TaskFeatureBlock: n_tasks and tokens_per_task must be positive");
    if (features.rank() != 2 || features.rows() != n_tasks * tokens_per_task)
        throw std::invalid_argument("TaskFeatureBlock: features " + shape_str(features.shape()) +
                                    " do not match " + std::to_string(n_tasks) + " tasks of " +
                                    std::to_string(tokens_per_task) + " tokens");
    TaskFeatureBlock block;
    block.n_tasks = n_tasks;
    block.tokens_per_task = tokens_per_task;
    block.width = features.cols();
    block.features = std::move(features);
    return block;
}

MemorySlots MemorySlots::init(std::size_t length, std::size_t width, CounterRng& rng) {
    if (length == 0 || width == 0)
        throw std::invalid_argument("MemorySlots: length and width must be positive");
    // slots ~ normal(0, 1/sqrt(d))
    const double sigma = 1.0 / std::sqrt(static_cast<double>(width));
    MemorySlots slots;
    slots.slots = Tensor::from_data({length, width}, rng.normal_vec(length * width, sigma), true);
    return slots;
}

namespace {

// uniform(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out)))
Tensor glorot(std::size_t fan_in, std::size_t fan_out, CounterRng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    return Tensor::from_data({fan_in, fan_out}, rng.uniform_vec(fan_in * fan_out, -bound, bound),
                             true);
}

void check_projection(const Tensor& w, std::size_t width, const char* name) {
    if (w.rank() != 2 || w.rows() != width || w.cols() != width)
        throw std::invalid_argument(std::string(name) + ": expected " + std::to_string(width) + " x " +
                                    std::to_string(width) + " projection, got " + shape_str(w.shape()));
}

void record(AttentionProbe* probe, AttentionProbe::Kind kind, const Tensor& map) {
    if (probe) probe->entries.push_back({kind, map.detach()});
}

} // namespace

KemParams KemParams::init(std::size_t width, std::size_t top_k, CounterRng& rng) {
    if (top_k == 0) throw std::invalid_argument("KemParams: top_k must be >= 1");
    KemParams p;
    p.W_qr = glorot(width, width, rng);
    p.W_kr = glorot(width, width, rng);
    p.W_vr = glorot(width, width, rng);
    p.W_qw = glorot(width, width, rng);
    p.W_kw = glorot(width, width, rng);
    p.W_vw = glorot(width, width, rng);
    p.top_k = top_k;
    return p;
}

std::vector<Tensor> KemParams::parameters() const { return {W_qr, W_kr, W_vr, W_qw, W_kw, W_vw}; }

CrossAttentionParams CrossAttentionParams::init(std::size_t width, CounterRng& rng) {
    CrossAttentionParams p;
    p.W_q = glorot(width, width, rng);
    p.W_k = glorot(width, width, rng);
    p.W_v = glorot(width, width, rng);
    return p;
}

std::vector<Tensor> CrossAttentionParams::parameters() const { return {W_q, W_k, W_v}; }

Tensor cross_attention(const TaskFeatureBlock& F, const CrossAttentionParams& params,
                       AttentionProbe* probe) {
    const std::size_t d = F.width;
    check_projection(params.W_q, d, "cross_attention: W_q");
    check_projection(params.W_k, d, "cross_attention: W_k");
    check_projection(params.W_v, d, "cross_attention: W_v");

    Tensor q = matmul(F.features, params.W_q);
    Tensor k = matmul(F.features, params.W_k);
    Tensor v = matmul(F.features, params.W_v);
    Tensor logits = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d)));
    Tensor weights = softmax_rows(logits);
    record(probe, AttentionProbe::Kind::CrossMap, weights);
    return matmul(weights, v);
}

Tensor kem_retrieve(const TaskFeatureBlock& F, const MemorySlots& slots, const KemParams& params,
                    AttentionProbe* probe) {
    const std::size_t d = F.width;
    if (slots.width() != d)
        throw std::invalid_argument("kem_retrieve: slot width " + std::to_string(slots.width()) +
                                    " does not match feature width " + std::to_string(d));
    if (params.top_k > F.total_tokens())
        throw std::invalid_argument("kem_retrieve: top_k " + std::to_string(params.top_k) +
                                    " exceeds token count " + std::to_string(F.total_tokens()));
    check_projection(params.W_qr, d, "kem_retrieve: W_qr");
    check_projection(params.W_kr, d, "kem_retrieve: W_kr");
    check_projection(params.W_vr, d, "kem_retrieve: W_vr");

    Tensor q = matmul(slots.slots, params.W_qr);
    Tensor k = matmul(F.features, params.W_kr);
    Tensor v = matmul(F.features, params.W_vr);
    Tensor logits = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d)));
    Tensor weights = topk_softmax(logits, params.top_k);
    record(probe, AttentionProbe::Kind::RetrieveMap, weights);
    return matmul(weights, v);
}

Tensor kem_write(const TaskFeatureBlock& F, const Tensor& r_hat, const KemParams& params,
                 AttentionProbe* probe) {
    const std::size_t d = F.width;
    if (r_hat.rank() != 2 || r_hat.cols() != d)
        throw std::invalid_argument("kem_write: retrieved slots " + shape_str(r_hat.shape()) +
                                    " do not match feature width " + std::to_string(d));
    check_projection(params.W_qw, d, "kem_write: W_qw");
    check_projection(params.W_kw, d, "kem_write: W_kw");
    check_projection(params.W_vw, d, "kem_write: W_vw");

    Tensor q = matmul(F.features, params.W_qw);
    Tensor k = matmul(r_hat, params.W_kw);
    Tensor v = matmul(r_hat, params.W_vw);
    Tensor logits = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d)));
    Tensor weights = softmax_rows(logits); // n_s x L
    record(probe, AttentionProbe::Kind::WriteMap, weights);
    return matmul(weights, v);
}

TaskFeatureBlock kem_broadcast(const TaskFeatureBlock& F, const Tensor& f_hat,
                               double residual_weight) {
    if (f_hat.shape() != F.features.shape())
        throw std::invalid_argument("kem_broadcast: shape mismatch: " + shape_str(F.features.shape()) +
                                    " vs " + shape_str(f_hat.shape()));
    TaskFeatureBlock out = F;
    out.features = add(F.features, scale(f_hat, residual_weight));
    return out;
}

TaskFeatureBlock kem_forward(const TaskFeatureBlock& F, const MemorySlots& slots,
                             const KemParams& params, const EtfFrame* etf, AttentionProbe* probe) {
    Tensor r_hat = etf ? skem_retrieve(F, slots, params, *etf, probe)
                       : kem_retrieve(F, slots, params, probe);
    Tensor f_hat = kem_write(F, r_hat, params, probe);
    return kem_broadcast(F, f_hat, params.residual_weight);
}

} // namespace kem
