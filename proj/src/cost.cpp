#include "kem/cost.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "kem/attention.hpp"
#include "kem/rng.hpp"
#include "kem/tensor.hpp"

namespace kem {

namespace {
thread_local CostCounter* g_active_counter = nullptr;
}

CostCounter* CostCounter::active() { return g_active_counter; }

ScopedCostCounting::ScopedCostCounting(CostCounter& counter) : previous_(g_active_counter) {
    g_active_counter = &counter;
}

ScopedCostCounting::~ScopedCostCounting() { g_active_counter = previous_; }

CostModel current_counts() {
    if (!g_active_counter)
        throw std::logic_error("current_counts: instrumentation is not enabled on this thread");
    return g_active_counter->model();
}

CostModel measured_cost(const std::function<void()>& run) {
    CostCounter counter;
    {
        ScopedCostCounting scope(counter);
        run();
    }
    return counter.model();
}

CostModel symbolic_cost_cross_attention(std::uint64_t n_s, std::uint64_t d) {
    if (n_s == 0 || d == 0)
        throw std::invalid_argument("symbolic_cost_cross_attention: n_s and d must be positive");
    CostModel m;
    m.matmul_multiplies = 2 * n_s * n_s * d + 3 * n_s * d * d;
    m.softmax_entries = n_s * n_s;
    return m;
}

CostModel symbolic_cost_kem(std::uint64_t n_s, std::uint64_t d, std::uint64_t L) {
    if (n_s == 0 || d == 0)
        throw std::invalid_argument("symbolic_cost_kem: n_s and d must be positive");
    CostModel m;
    m.matmul_multiplies = 4 * L * n_s * d + 3 * n_s * d * d + 3 * L * d * d;
    m.softmax_entries = 2 * L * n_s;
    return m;
}

std::vector<CostReport> cost_sweep(const std::vector<std::uint64_t>& ns_values,
                                   const std::vector<std::uint64_t>& d_values,
                                   const std::vector<std::uint64_t>& l_values,
                                   std::uint64_t seed, bool skip_out_of_regime) {
    std::vector<CostReport> reports;
    for (const std::uint64_t n_s : ns_values)
        for (const std::uint64_t d : d_values)
            for (const std::uint64_t L : l_values) {
                const bool in_regime = n_s > d && d > L;
                if (skip_out_of_regime && !in_regime) continue;
                if (L == 0) throw std::invalid_argument("cost_sweep: L must be >= 1 in sweep configs");

                CostReport report;
                report.config = {n_s, d, L, std::min<std::uint64_t>(3, n_s)};
                report.in_regime = in_regime;
                report.symbolic_cross = symbolic_cost_cross_attention(n_s, d);
                report.symbolic_kem = symbolic_cost_kem(n_s, d, L);

                CounterRng rng(seed, CounterRng::mix64(n_s * 31 + d * 7 + L));
                auto F = TaskFeatureBlock::wrap(
                    1, n_s, Tensor::from_data({n_s, d}, rng.uniform_vec(n_s * d, -1.0, 1.0)));
                CrossAttentionParams cross = CrossAttentionParams::init(d, rng);
                report.measured_cross = measured_cost([&] { cross_attention(F, cross); });

                KemParams kem = KemParams::init(d, report.config.top_k, rng);
                MemorySlots slots = MemorySlots::init(L, d, rng);
                report.measured_kem = measured_cost([&] { kem_forward(F, slots, kem); });

                report.ratio = static_cast<double>(report.measured_kem.total()) /
                               static_cast<double>(report.measured_cross.total());
                reports.push_back(report);
            }
    return reports;
}

void write_cost_csv(const std::filesystem::path& path, const std::vector<CostReport>& reports) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_cost_csv: cannot open " + path.string());
    out << "n_s,d,L,cross_mults,cross_softmax,kem_mults,kem_softmax,ratio\n";
    char buf[64];
    for (const auto& r : reports) {
        std::snprintf(buf, sizeof(buf), "%.17g", r.ratio);
        out << r.config.n_s << ',' << r.config.d << ',' << r.config.L << ','
            << r.measured_cross.matmul_multiplies << ',' << r.measured_cross.softmax_entries << ','
            << r.measured_kem.matmul_multiplies << ',' << r.measured_kem.softmax_entries << ',' << buf
            << '\n';
    }
}

} // namespace kem
