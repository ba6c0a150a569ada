#include "kem/etf.hpp"

#include <cmath>
#include <stdexcept>

#include "kem/rng.hpp"

namespace kem {

std::string etf_scale_name(EtfScale s) { return s == EtfScale::Sqrt ? "sqrt" : "linear"; }

EtfScale etf_scale_from_name(const std::string& name) {
    if (name == "sqrt") return EtfScale::Sqrt;
    if (name == "linear") return EtfScale::Linear;
    throw std::invalid_argument("unknown etf scale '" + name + "' (expected sqrt or linear)");
}

EtfFrame build_etf_from_basis(const Tensor& basis, EtfScale convention) {
    if (basis.rank() != 2)
        throw std::invalid_argument("build_etf: basis must be rank-2, got " + shape_str(basis.shape()));
    const std::size_t dim = basis.rows();
    const std::size_t k = basis.cols();
    if (k < 2)
        throw std::invalid_argument("build_etf: need at least 2 vertices, got " + std::to_string(k));
    if (dim < k)
        throw std::invalid_argument("build_etf: dim " + std::to_string(dim) +
                                    " too small for " + std::to_string(k) + " vertices");

    const double kk = static_cast<double>(k);
    const double c = convention == EtfScale::Sqrt ? std::sqrt(kk / (kk - 1.0)) : kk / (kk - 1.0);

    // centering = I - (1/K) 11^T
    std::vector<double> centering(k * k, -1.0 / kk);
    for (std::size_t i = 0; i < k; ++i) centering[i * k + i] += 1.0;

    EtfFrame frame;
    frame.etf_k = k;
    frame.dim = dim;
    frame.scale_convention = convention;
    frame.basis = basis.detach();
    Tensor cm = Tensor::from_data({k, k}, centering);
    frame.w_star = scale(matmul(frame.basis, cm), c).detach();
    // W*^T W* = c^2 M (U^T U) M = c^2 M with M the centering projector, so the
    // Gram has the closed form diag = c^2 (K-1)/K, off = -c^2/K; under the
    // sqrt convention that is exactly 1 and -1/(K-1). The numeric product
    // agrees to within the orthonormality error of U.
    const double diag = convention == EtfScale::Sqrt ? 1.0 : kk / (kk - 1.0);
    const double off = convention == EtfScale::Sqrt ? -1.0 / (kk - 1.0) : -kk / ((kk - 1.0) * (kk - 1.0));
    std::vector<double> gram(k * k, off);
    for (std::size_t i = 0; i < k; ++i) gram[i * k + i] = diag;
    frame.gram = Tensor::from_data({k, k}, std::move(gram));
    return frame;
}

EtfFrame build_etf(std::size_t etf_k, std::size_t dim, std::uint64_t seed, EtfScale convention) {
    if (etf_k < 2)
        throw std::invalid_argument("build_etf: need at least 2 vertices, got " + std::to_string(etf_k));
    if (dim < etf_k)
        throw std::invalid_argument("build_etf: dim " + std::to_string(dim) + " too small for " +
                                    std::to_string(etf_k) + " vertices");

    // Modified Gram-Schmidt on seeded Gaussian columns; near-dependent draws
    // are replaced from the same stream.
    CounterRng rng(seed, 0x657466 /* "etf" */);
    std::vector<std::vector<double>> cols(etf_k);
    for (std::size_t c = 0; c < etf_k; ++c) {
        for (int attempt = 0; attempt < 64; ++attempt) {
            std::vector<double> v = rng.normal_vec(dim);
            for (std::size_t prev = 0; prev < c; ++prev) {
                double dot = 0.0;
                for (std::size_t i = 0; i < dim; ++i) dot += v[i] * cols[prev][i];
                for (std::size_t i = 0; i < dim; ++i) v[i] -= dot * cols[prev][i];
            }
            double norm = 0.0;
            for (const double x : v) norm += x * x;
            norm = std::sqrt(norm);
            if (norm > 1e-8) {
                for (auto& x : v) x /= norm;
                cols[c] = std::move(v);
                break;
            }
        }
        if (cols[c].empty()) throw std::runtime_error("build_etf: failed to draw an independent basis");
    }

    std::vector<double> u(dim * etf_k);
    for (std::size_t i = 0; i < dim; ++i)
        for (std::size_t c = 0; c < etf_k; ++c) u[i * etf_k + c] = cols[c][i];
    return build_etf_from_basis(Tensor::from_data({dim, etf_k}, std::move(u)), convention);
}

Tensor mix_task_logits(const Tensor& logits, const Tensor& gram, std::size_t n_tasks,
                       std::size_t tokens_per_task) {
    if (logits.rank() != 2 || logits.cols() != n_tasks * tokens_per_task)
        throw std::invalid_argument("mix_task_logits: logits " + shape_str(logits.shape()) +
                                    " do not cover " + std::to_string(n_tasks) + " x " +
                                    std::to_string(tokens_per_task) + " tokens");
    if (gram.rank() != 2 || gram.rows() != n_tasks || gram.cols() != n_tasks)
        throw std::invalid_argument("mix_task_logits: gram " + shape_str(gram.shape()) +
                                    " does not match " + std::to_string(n_tasks) + " tasks");

    // The per-task mixing is one matrix product with gram (x) I_m: column
    // s*m+j of the operator carries gram[s,t] at row t*m+j.
    const std::size_t n_s = n_tasks * tokens_per_task;
    const auto gv = gram.values();
    std::vector<double> op(n_s * n_s, 0.0);
    for (std::size_t s = 0; s < n_tasks; ++s)
        for (std::size_t t = 0; t < n_tasks; ++t)
            for (std::size_t j = 0; j < tokens_per_task; ++j)
                op[(s * tokens_per_task + j) * n_s + (t * tokens_per_task + j)] = gv[s * n_tasks + t];
    return matmul(logits, Tensor::from_data({n_s, n_s}, std::move(op)));
}

Tensor skem_retrieve(const TaskFeatureBlock& F, const MemorySlots& slots, const KemParams& params,
                     const EtfFrame& etf, AttentionProbe* probe) {
    if (etf.etf_k != F.n_tasks)
        throw std::invalid_argument("skem_retrieve: etf_k " + std::to_string(etf.etf_k) +
                                    " does not match n_tasks " + std::to_string(F.n_tasks));
    const std::size_t d = F.width;
    if (slots.width() != d)
        throw std::invalid_argument("skem_retrieve: slot width " + std::to_string(slots.width()) +
                                    " does not match feature width " + std::to_string(d));
    if (params.top_k > F.total_tokens())
        throw std::invalid_argument("skem_retrieve: top_k " + std::to_string(params.top_k) +
                                    " exceeds token count " + std::to_string(F.total_tokens()));

    Tensor q = matmul(slots.slots, params.W_qr);
    Tensor k = matmul(F.features, params.W_kr);
    Tensor v = matmul(F.features, params.W_vr);
    Tensor logits = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d)));
    Tensor mixed = mix_task_logits(logits, etf.gram, F.n_tasks, F.tokens_per_task);
    Tensor weights = topk_softmax(mixed, params.top_k);
    if (probe) probe->entries.push_back({AttentionProbe::Kind::RetrieveMap, weights.detach()});
    return matmul(weights, v);
}

} // namespace kem
