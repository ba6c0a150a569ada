#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace kem {

// Counter-based generator. Draw i of stream s under seed k is
//
//   mix64(key(k, s) + (i + 1) * GOLDEN)
//
// where mix64 is the splitmix64 finalizer and GOLDEN = 2^64 / phi.
// Every value is a pure function of (seed, stream, index), so streams can
// be consumed independently, in parallel, and reproduce bit-identically on
// any platform. normal() sums 12 uniforms (Irwin-Hall) instead of calling
// libm, which keeps the outputs platform-stable as well.
class CounterRng {
public:
    explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0);

    std::uint64_t next_u64();

    // [0, 1), 53-bit resolution
    double uniform();
    // [lo, hi)
    double uniform(double lo, double hi);
    // approximately N(0, 1); symmetric, bounded by |z| <= 6
    double normal();
    // unbiased integer in [0, n), n >= 1
    std::uint64_t below(std::uint64_t n);

    std::vector<double> normal_vec(std::size_t n, double scale = 1.0);
    std::vector<double> uniform_vec(std::size_t n, double lo, double hi);

    static std::uint64_t mix64(std::uint64_t x);

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

} // namespace kem
