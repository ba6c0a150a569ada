#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

namespace kem {

// Unit accounting for attention mechanisms: one unit per scalar multiply
// inside a matrix product (p*q*r for a p x q by q x r product) and one unit
// per softmax / topk-softmax input entry. Element-wise work (residual adds,
// the 1/sqrt(d) scaling) is excluded by definition of the model.
struct CostModel {
    std::uint64_t matmul_multiplies = 0;
    std::uint64_t softmax_entries = 0;

    std::uint64_t total() const { return matmul_multiplies + softmax_entries; }

    CostModel& operator+=(const CostModel& other) {
        matmul_multiplies += other.matmul_multiplies;
        softmax_entries += other.softmax_entries;
        return *this;
    }
    friend CostModel operator+(CostModel a, const CostModel& b) { return a += b; }
    friend bool operator==(const CostModel&, const CostModel&) = default;
};

// Per-run accumulator. At most one counter is active per thread; forward
// operations executed while it is installed add their units to it.
class CostCounter {
public:
    void add_multiplies(std::uint64_t n) { model_.matmul_multiplies += n; }
    void add_softmax_entries(std::uint64_t n) { model_.softmax_entries += n; }
    const CostModel& model() const { return model_; }
    void reset() { model_ = CostModel{}; }

    static CostCounter* active();

private:
    friend class ScopedCostCounting;
    CostModel model_;
};

// RAII installer; nests by stacking (the innermost counter wins).
class ScopedCostCounting {
public:
    explicit ScopedCostCounting(CostCounter& counter);
    ~ScopedCostCounting();
    ScopedCostCounting(const ScopedCostCounting&) = delete;
    ScopedCostCounting& operator=(const ScopedCostCounting&) = delete;

private:
    CostCounter* previous_;
};

// Counts accumulated on the calling thread's active counter.
// Throws std::logic_error when instrumentation is not enabled.
CostModel current_counts();

// Runs a forward pass under a fresh counter and returns its counts.
CostModel measured_cost(const std::function<void()>& run);

// F' = softmax((F Wq)(F Wk)^T / sqrt(d)) F Wv over n_s tokens of width d:
// 2*n_s^2*d + 3*n_s*d^2 multiplies, n_s^2 softmax entries.
CostModel symbolic_cost_cross_attention(std::uint64_t n_s, std::uint64_t d);

// Retrieve + write through L memory slots:
// 4*L*n_s*d + 3*n_s*d^2 + 3*L*d^2 multiplies, 2*L*n_s softmax entries.
// L = 0 is accepted here so the no-bottleneck limit can be inspected, even
// though experiment configs reject it.
CostModel symbolic_cost_kem(std::uint64_t n_s, std::uint64_t d, std::uint64_t L);

struct CostConfig {
    std::uint64_t n_s = 0;
    std::uint64_t d = 0;
    std::uint64_t L = 0;
    std::uint64_t top_k = 0;
};

struct CostReport {
    CostConfig config;
    CostModel symbolic_cross;
    CostModel symbolic_kem;
    CostModel measured_cross;
    CostModel measured_kem;
    double ratio = 0.0; // total(kem) / total(cross)
    bool in_regime = false; // n_s > d > L
};

// Runs instrumented cross-attention and KEM forwards for every grid cell
// and checks the counts against the symbolic formulas. Cells outside the
// n_s > d > L regime are flagged, not rejected.
std::vector<CostReport> cost_sweep(const std::vector<std::uint64_t>& ns_values,
                                   const std::vector<std::uint64_t>& d_values,
                                   const std::vector<std::uint64_t>& l_values,
                                   std::uint64_t seed = 1,
                                   bool skip_out_of_regime = false);

// CSV schema: n_s,d,L,cross_mults,cross_softmax,kem_mults,kem_softmax,ratio
void write_cost_csv(const std::filesystem::path& path, const std::vector<CostReport>& reports);

} // namespace kem
