#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "kem/attention.hpp"
#include "kem/etf.hpp"
#include "kem/rng.hpp"
#include "kem/tensor.hpp"
#include "oracles.hpp"

using kem::Tensor;
using kem::TaskFeatureBlock;

namespace {

Tensor random_mat(std::size_t p, std::size_t q, kem::CounterRng& rng, bool grad = false,
                  double lo = -1.0, double hi = 1.0) {
    return Tensor::from_data({p, q}, rng.uniform_vec(p * q, lo, hi), grad);
}

Tensor identity(std::size_t n) {
    std::vector<double> data(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) data[i * n + i] = 1.0;
    return Tensor::from_data({n, n}, std::move(data));
}

TaskFeatureBlock random_block(std::size_t n, std::size_t m, std::size_t d, kem::CounterRng& rng,
                              bool grad = false) {
    return TaskFeatureBlock::wrap(n, m, random_mat(n * m, d, rng, grad));
}

std::vector<std::size_t> nonzero_cols(const Tensor& mat, std::size_t row) {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < mat.cols(); ++j)
        if (mat.at(row, j) != 0.0) out.push_back(j);
    return out;
}

} // namespace

TEST_CASE("topk_softmax equals softmax_rows whenever k covers the row") {
    kem::CounterRng rng(100);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t q = 1 + rng.below(10);
        Tensor x = random_mat(3, q, rng, false, -8.0, 8.0);
        Tensor full = kem::softmax_rows(x);
        for (const std::size_t k : {q, q + 1, q + 5}) {
            Tensor topk = kem::topk_softmax(x, k);
            for (std::size_t i = 0; i < full.size(); ++i)
                CHECK(topk.values()[i] == full.values()[i]); // bit-for-bit
        }
    }
}

TEST_CASE("topk_softmax hand cases") {
    Tensor tied = kem::topk_softmax(Tensor::from_data({1, 4}, {5, 5, 5, 5}), 2);
    CHECK(tied.values()[0] == 0.5);
    CHECK(tied.values()[1] == 0.5);
    CHECK(tied.values()[2] == 0.0);
    CHECK(tied.values()[3] == 0.0);

    Tensor ramp = kem::topk_softmax(Tensor::from_data({1, 4}, {1, 2, 3, 4}), 2);
    CHECK(ramp.values()[0] == 0.0);
    CHECK(ramp.values()[1] == 0.0);
    CHECK(ramp.values()[2] == doctest::Approx(0.26894142).epsilon(1e-8));
    CHECK(ramp.values()[3] == doctest::Approx(0.73105858).epsilon(1e-8));

    CHECK_THROWS_AS(kem::topk_softmax(ramp, 0), std::invalid_argument);
}

TEST_CASE("topk_softmax support, sums and monotonicity on random rows") {
    kem::CounterRng rng(101);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t q = 1 + rng.below(12);
        const std::size_t k = 1 + rng.below(q + 2);
        std::vector<double> row(q);
        for (auto& v : row) {
            v = rng.uniform(-10.0, 10.0);
            if (rng.below(3) == 0) v = std::round(v * 2.0) / 2.0; // provoke ties
        }
        Tensor out = kem::topk_softmax(Tensor::from_data({1, q}, row), k);

        double sum = 0.0;
        for (const double v : out.values()) sum += v;
        CHECK(std::fabs(sum - 1.0) <= 1e-12);

        const auto expected = oracle::topk_indices(row, k);
        const auto support = nonzero_cols(out, 0);
        CHECK(support == expected);
        CHECK(support.size() == std::min(k, q));

        // raising a selected logit never evicts it
        const std::size_t chosen = support[rng.below(support.size())];
        row[chosen] += 1.0 + rng.uniform();
        Tensor raised = kem::topk_softmax(Tensor::from_data({1, q}, row), k);
        CHECK(raised.at(0, chosen) != 0.0);
    }
}

TEST_CASE("cross_attention single-token and uniform cases") {
    kem::CounterRng rng(102);
    const std::size_t d = 4;

    // one token: softmax over a single logit is 1, output = F Wv
    auto f1 = random_block(1, 1, d, rng);
    kem::CrossAttentionParams p1;
    p1.W_q = random_mat(d, d, rng);
    p1.W_k = random_mat(d, d, rng);
    p1.W_v = random_mat(d, d, rng);
    Tensor out1 = kem::cross_attention(f1, p1);
    Tensor fv = kem::matmul(f1.features, p1.W_v);
    for (std::size_t i = 0; i < d; ++i)
        CHECK(out1.values()[i] == doctest::Approx(fv.values()[i]).epsilon(1e-15));

    // zero projections: uniform weights, every row is the column mean of F
    auto f2 = random_block(2, 3, d, rng);
    kem::CrossAttentionParams p2;
    p2.W_q = Tensor::zeros({d, d});
    p2.W_k = Tensor::zeros({d, d});
    p2.W_v = identity(d);
    Tensor out2 = kem::cross_attention(f2, p2);
    Tensor colmean = kem::mean_rows(f2.features);
    for (std::size_t i = 0; i < out2.rows(); ++i)
        for (std::size_t j = 0; j < d; ++j)
            CHECK(out2.at(i, j) == doctest::Approx(colmean.at(0, j)).epsilon(1e-14));
}

TEST_CASE("cross_attention matches the loop reference") {
    kem::CounterRng rng(103);
    const std::size_t n = 2, m = 3, d = 4, n_s = n * m;
    const auto f = rng.uniform_vec(n_s * d, -1.0, 1.0);
    const auto wq = rng.uniform_vec(d * d, -1.0, 1.0);
    const auto wk = rng.uniform_vec(d * d, -1.0, 1.0);
    const auto wv = rng.uniform_vec(d * d, -1.0, 1.0);

    auto block = TaskFeatureBlock::wrap(n, m, Tensor::from_data({n_s, d}, f));
    kem::CrossAttentionParams params;
    params.W_q = Tensor::from_data({d, d}, wq);
    params.W_k = Tensor::from_data({d, d}, wk);
    params.W_v = Tensor::from_data({d, d}, wv);
    Tensor out = kem::cross_attention(block, params);
    const auto expected = oracle::cross_attention(f, n_s, d, wq, wk, wv);
    for (std::size_t i = 0; i < expected.size(); ++i)
        CHECK(out.values()[i] == doctest::Approx(expected[i]).epsilon(1e-12));
}

TEST_CASE("cross_attention via topk_softmax with k = n_s is identical") {
    kem::CounterRng rng(104);
    const std::size_t n_s = 6, d = 4;
    Tensor f = random_mat(n_s, d, rng);
    Tensor wq = random_mat(d, d, rng), wk = random_mat(d, d, rng), wv = random_mat(d, d, rng);
    Tensor logits = kem::scale(kem::matmul(kem::matmul(f, wq), kem::transpose(kem::matmul(f, wk))),
                               1.0 / std::sqrt(static_cast<double>(d)));
    Tensor viaSoftmax = kem::matmul(kem::softmax_rows(logits), kem::matmul(f, wv));
    Tensor viaTopk = kem::matmul(kem::topk_softmax(logits, n_s), kem::matmul(f, wv));
    for (std::size_t i = 0; i < viaSoftmax.size(); ++i)
        CHECK(viaSoftmax.values()[i] == viaTopk.values()[i]);
}

TEST_CASE("kem_retrieve uniform and saturated cases") {
    kem::CounterRng rng(105);
    const std::size_t n = 2, m = 3, d = 4, n_s = n * m;

    // zero query projection + top_k = n_s: every token weighted equally
    auto block = random_block(n, m, d, rng);
    kem::KemParams p = kem::KemParams::init(d, n_s, rng);
    p.W_qr = Tensor::zeros({d, d}, true);
    kem::MemorySlots slots = kem::MemorySlots::init(1, d, rng);
    Tensor r_hat = kem::kem_retrieve(block, slots, p);
    Tensor vmean = kem::mean_rows(kem::matmul(block.features, p.W_vr));
    for (std::size_t j = 0; j < d; ++j)
        CHECK(r_hat.at(0, j) == doctest::Approx(vmean.at(0, j)).epsilon(1e-14));

    // one token's key logit dominates by +1000: its value row is returned exactly
    std::vector<double> fdata = rng.uniform_vec(n_s * d, -1.0, 1.0);
    const std::size_t hot = 3;
    fdata[hot * d + 0] = 1000.0;
    auto hot_block = TaskFeatureBlock::wrap(n, m, Tensor::from_data({n_s, d}, fdata));
    kem::KemParams p1 = kem::KemParams::init(d, 1, rng);
    p1.W_qr = identity(d);
    p1.W_kr = identity(d);
    kem::MemorySlots probe_slot;
    probe_slot.slots = Tensor::from_data({1, d}, {1, 0, 0, 0});
    Tensor picked = kem::kem_retrieve(hot_block, probe_slot, p1);
    Tensor v = kem::matmul(hot_block.features, p1.W_vr);
    for (std::size_t j = 0; j < d; ++j) CHECK(picked.at(0, j) == v.at(hot, j));
}

TEST_CASE("kem_retrieve matches the loop reference and rejects top_k > n_s") {
    kem::CounterRng rng(106);
    const std::size_t n = 2, m = 4, d = 4, L = 2, n_s = n * m, top_k = 3;
    const auto f = rng.uniform_vec(n_s * d, -1.0, 1.0);
    const auto slots_data = rng.uniform_vec(L * d, -1.0, 1.0);
    const auto wqr = rng.uniform_vec(d * d, -1.0, 1.0);
    const auto wkr = rng.uniform_vec(d * d, -1.0, 1.0);
    const auto wvr = rng.uniform_vec(d * d, -1.0, 1.0);

    auto block = TaskFeatureBlock::wrap(n, m, Tensor::from_data({n_s, d}, f));
    kem::KemParams params = kem::KemParams::init(d, top_k, rng);
    params.W_qr = Tensor::from_data({d, d}, wqr);
    params.W_kr = Tensor::from_data({d, d}, wkr);
    params.W_vr = Tensor::from_data({d, d}, wvr);
    kem::MemorySlots slots;
    slots.slots = Tensor::from_data({L, d}, slots_data);

    kem::AttentionProbe probe;
    Tensor out = kem::kem_retrieve(block, slots, params, &probe);
    const auto expected = oracle::kem_retrieve(f, n_s, d, slots_data, L, wqr, wkr, wvr, top_k);
    for (std::size_t i = 0; i < expected.size(); ++i)
        CHECK(out.values()[i] == doctest::Approx(expected[i]).epsilon(1e-12));

    // every slot keeps exactly min(top_k, n_s) nonzero weights
    REQUIRE(probe.entries.size() == 1);
    for (std::size_t l = 0; l < L; ++l)
        CHECK(nonzero_cols(probe.entries[0].map, l).size() == top_k);

    params.top_k = n_s + 1;
    CHECK_THROWS_AS(kem::kem_retrieve(block, slots, params), std::invalid_argument);
}

TEST_CASE("kem_write single-slot and uniform cases, plus the loop reference") {
    kem::CounterRng rng(107);
    const std::size_t n = 2, m = 3, d = 4, n_s = n * m;
    auto block = random_block(n, m, d, rng);

    // L = 1: softmax over one slot is 1, every row equals (R_hat Wvw) row 0
    kem::KemParams p = kem::KemParams::init(d, 1, rng);
    Tensor r1 = random_mat(1, d, rng);
    Tensor w1 = kem::kem_write(block, r1, p);
    Tensor v1 = kem::matmul(r1, p.W_vw);
    for (std::size_t i = 0; i < n_s; ++i)
        for (std::size_t j = 0; j < d; ++j)
            CHECK(w1.at(i, j) == doctest::Approx(v1.at(0, j)).epsilon(1e-15));

    // zero projections with L = 2: every row is the mean of the two value rows
    kem::KemParams p2 = kem::KemParams::init(d, 1, rng);
    p2.W_qw = Tensor::zeros({d, d}, true);
    p2.W_kw = Tensor::zeros({d, d}, true);
    Tensor r2 = random_mat(2, d, rng);
    Tensor w2 = kem::kem_write(block, r2, p2);
    Tensor v2mean = kem::mean_rows(kem::matmul(r2, p2.W_vw));
    for (std::size_t i = 0; i < n_s; ++i)
        for (std::size_t j = 0; j < d; ++j)
            CHECK(w2.at(i, j) == doctest::Approx(v2mean.at(0, j)).epsilon(1e-14));

    // fixed-seed reference
    const std::size_t L = 3;
    const auto f = rng.uniform_vec(n_s * d, -1.0, 1.0);
    const auto rh = rng.uniform_vec(L * d, -1.0, 1.0);
    const auto wqw = rng.uniform_vec(d * d, -1.0, 1.0);
    const auto wkw = rng.uniform_vec(d * d, -1.0, 1.0);
    const auto wvw = rng.uniform_vec(d * d, -1.0, 1.0);
    auto fb = TaskFeatureBlock::wrap(n, m, Tensor::from_data({n_s, d}, f));
    kem::KemParams p3 = kem::KemParams::init(d, 1, rng);
    p3.W_qw = Tensor::from_data({d, d}, wqw);
    p3.W_kw = Tensor::from_data({d, d}, wkw);
    p3.W_vw = Tensor::from_data({d, d}, wvw);
    Tensor out = kem::kem_write(fb, Tensor::from_data({L, d}, rh), p3);
    const auto expected = oracle::kem_write(f, n_s, d, rh, L, wqw, wkw, wvw);
    for (std::size_t i = 0; i < expected.size(); ++i)
        CHECK(out.values()[i] == doctest::Approx(expected[i]).epsilon(1e-12));
}

TEST_CASE("kem_broadcast residual arithmetic") {
    kem::CounterRng rng(108);
    auto block = random_block(2, 2, 3, rng);

    auto same = kem::kem_broadcast(block, block.features.detach(), 0.0);
    for (std::size_t i = 0; i < block.features.size(); ++i)
        CHECK(same.features.values()[i] == block.features.values()[i]);

    auto cancelled = kem::kem_broadcast(block, kem::scale(block.features, -1.0), 1.0);
    for (const double v : cancelled.features.values()) CHECK(v == 0.0);

    auto doubled = kem::kem_broadcast(block, block.features.detach(), 1.0);
    for (std::size_t i = 0; i < block.features.size(); ++i)
        CHECK(doubled.features.values()[i] ==
              doctest::Approx(2.0 * block.features.values()[i]).epsilon(1e-15));

    CHECK(same.n_tasks == block.n_tasks);
    CHECK(same.tokens_per_task == block.tokens_per_task);
    CHECK_THROWS_AS(kem::kem_broadcast(block, Tensor::zeros({5, 3}), 1.0), std::invalid_argument);
}

TEST_CASE("kem_forward shape, identity at w_r = 0, and gradients") {
    kem::CounterRng rng(109);
    const std::size_t n = 2, m = 3, d = 4, L = 2;
    auto block = random_block(n, m, d, rng, true);
    kem::KemParams params = kem::KemParams::init(d, 3, rng);
    kem::MemorySlots slots = kem::MemorySlots::init(L, d, rng);

    params.residual_weight = 0.0;
    auto off = kem::kem_forward(block, slots, params);
    for (std::size_t i = 0; i < block.features.size(); ++i)
        CHECK(off.features.values()[i] == block.features.values()[i]);

    params.residual_weight = 1.0;
    auto on = kem::kem_forward(block, slots, params);
    CHECK(on.features.shape() == block.features.shape());

    // gradient of a random contraction of the output wrt features, slots and
    // every projection
    Tensor weight = random_mat(n * m, d, rng);
    auto contraction = [&](const TaskFeatureBlock& f) {
        return kem::sum(kem::mul(kem::kem_forward(f, slots, params).features, weight));
    };
    auto wrt_features = kem::finite_diff_check(
        [&](const Tensor& t) { return contraction(TaskFeatureBlock::wrap(n, m, t)); },
        block.features, 1e-5, 1e-4);
    CHECK(wrt_features.pass);
    auto wrt_slots = kem::finite_diff_check(
        [&](const Tensor&) { return contraction(block); }, slots.slots, 1e-5, 1e-4);
    CHECK(wrt_slots.pass);
    for (Tensor& w : params.parameters()) {
        auto res =
            kem::finite_diff_check([&](const Tensor&) { return contraction(block); }, w, 1e-5, 1e-4);
        CHECK(res.pass);
    }
}

TEST_CASE("retrieve is token-permutation invariant; write is equivariant") {
    kem::CounterRng rng(110);
    const std::size_t n = 2, m = 4, d = 4, n_s = n * m, L = 2;

    for (const std::size_t top_k : {1u, 2u, 3u}) {
        const auto f = rng.uniform_vec(n_s * d, -1.0, 1.0);
        kem::KemParams params = kem::KemParams::init(d, top_k, rng);
        kem::MemorySlots slots = kem::MemorySlots::init(L, d, rng);

        std::vector<std::size_t> perm(n_s);
        std::iota(perm.begin(), perm.end(), 0);
        for (std::size_t i = n_s - 1; i > 0; --i)
            std::swap(perm[i], perm[rng.below(i + 1)]);

        std::vector<double> f_perm(n_s * d);
        for (std::size_t i = 0; i < n_s; ++i)
            for (std::size_t j = 0; j < d; ++j) f_perm[i * d + j] = f[perm[i] * d + j];

        auto block = TaskFeatureBlock::wrap(n, m, Tensor::from_data({n_s, d}, f));
        auto block_perm = TaskFeatureBlock::wrap(n, m, Tensor::from_data({n_s, d}, f_perm));

        Tensor base = kem::kem_retrieve(block, slots, params);
        Tensor permuted = kem::kem_retrieve(block_perm, slots, params);
        if (top_k <= 2) {
            // bit-exact: the weighted sum has at most two nonzero terms and
            // IEEE addition commutes
            for (std::size_t i = 0; i < base.size(); ++i)
                CHECK(permuted.values()[i] == base.values()[i]);
        } else {
            // >= 3 nonzero terms accumulate in column order, so a permutation
            // can shift the result by a few ulps
            for (std::size_t i = 0; i < base.size(); ++i)
                CHECK(permuted.values()[i] == doctest::Approx(base.values()[i]).epsilon(1e-13));
        }

        Tensor r_hat = base.detach();
        Tensor w_base = kem::kem_write(block, r_hat, params);
        Tensor w_perm = kem::kem_write(block_perm, r_hat, params);
        // per-token computation: permuted inputs give exactly permuted rows
        for (std::size_t i = 0; i < n_s; ++i)
            for (std::size_t j = 0; j < d; ++j) CHECK(w_perm.at(i, j) == w_base.at(perm[i], j));
    }
}

TEST_CASE("retrieve depends on non-selected tokens only through their own rows") {
    kem::CounterRng rng(111);
    const std::size_t n = 2, m = 4, d = 4, n_s = n * m, L = 2, top_k = 2;
    auto block = random_block(n, m, d, rng);
    kem::KemParams params = kem::KemParams::init(d, top_k, rng);
    kem::MemorySlots slots = kem::MemorySlots::init(L, d, rng);

    kem::AttentionProbe probe;
    Tensor r_hat = kem::kem_retrieve(block, slots, params, &probe);
    const Tensor& weights = probe.entries[0].map;

    std::vector<bool> selected(n_s, false);
    for (std::size_t l = 0; l < L; ++l)
        for (const std::size_t j : nonzero_cols(weights, l)) selected[j] = true;
    std::size_t untouched = n_s;
    for (std::size_t j = 0; j < n_s; ++j)
        if (!selected[j]) untouched = j;
    REQUIRE(untouched < n_s); // with top_k=2 and L=2 some token is never selected

    // wipe that token's value-projection contribution; R_hat must not move
    Tensor v = kem::matmul(block.features, params.W_vr);
    std::vector<double> v_edit(v.values().begin(), v.values().end());
    for (std::size_t c = 0; c < d; ++c) v_edit[untouched * d + c] = 0.0;
    Tensor direct = kem::matmul(weights, Tensor::from_data({n_s, d}, v_edit));
    for (std::size_t i = 0; i < r_hat.size(); ++i) CHECK(direct.values()[i] == r_hat.values()[i]);
}
