#pragma once

#include <cstdint>
#include <string>

#include "kem/attention.hpp"
#include "kem/tensor.hpp"

namespace kem {

// Scaling of the simplex frame W* = c * U (I - (1/K) 11^T).
// Sqrt uses c = sqrt(K/(K-1)), which makes every vertex unit norm; Linear
// uses c = K/(K-1). The two differ only by a positive scalar on the mixed
// logits, so top-k selections agree whenever they are unambiguous.
enum class EtfScale { Sqrt, Linear };

std::string etf_scale_name(EtfScale s);
EtfScale etf_scale_from_name(const std::string& name);

// Simplex equiangular tight frame over etf_k vertices embedded in dim
// dimensions: K unit-norm directions with all pairwise cosines equal to
// -1/(K-1). Immutable after construction.
struct EtfFrame {
    std::size_t etf_k = 0;
    std::size_t dim = 0;
    EtfScale scale_convention = EtfScale::Sqrt;
    Tensor basis;  // U, dim x etf_k, orthonormal columns
    Tensor w_star; // dim x etf_k
    Tensor gram;   // etf_k x etf_k, W*^T W*; every row sums to zero
};

// U comes from orthonormalizing a seeded Gaussian dim x etf_k matrix.
// Requires dim >= etf_k >= 2.
EtfFrame build_etf(std::size_t etf_k, std::size_t dim, std::uint64_t seed,
                   EtfScale scale = EtfScale::Sqrt);

// Same construction from an explicit orthonormal basis.
EtfFrame build_etf_from_basis(const Tensor& basis, EtfScale scale = EtfScale::Sqrt);

// Mixes retrieve logits along the task axis: with A reshaped to L x n x m,
// A'[l,t,j] = sum_s gram[t,s] * A[l,s,j], flattened back to L x (n*m).
Tensor mix_task_logits(const Tensor& logits, const Tensor& gram, std::size_t n_tasks,
                       std::size_t tokens_per_task);

// Retrieve with ETF-mixed logits:
// R_hat = topk-softmax(mix((R Wqr)(F Wkr)^T / sqrt(d))) F Wvr.
// Requires etf.etf_k == F.n_tasks.
Tensor skem_retrieve(const TaskFeatureBlock& F, const MemorySlots& slots, const KemParams& params,
                     const EtfFrame& etf, AttentionProbe* probe = nullptr);

} // namespace kem
