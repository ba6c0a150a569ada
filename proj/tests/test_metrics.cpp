#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "json.hpp"
#include "kem/metrics.hpp"
#include "kem/optim.hpp"
#include "kem/rng.hpp"
#include "kem/tensor.hpp"

using kem::TaskScore;
using kem::Tensor;

TEST_CASE("mtl_loss weighted sums") {
    const std::vector<double> ones = {1.0, 1.0};
    CHECK(kem::mtl_loss(std::vector<double>{0.5, 0.25}, ones) == doctest::Approx(0.75));

    // PASCAL weights (seg, part, sal) and NYUD weights
    const std::vector<double> pascal = {1.0, 2.0, 30.0};
    CHECK(kem::mtl_loss(std::vector<double>{1.0, 1.0, 1.0}, pascal) == doctest::Approx(33.0));
    const std::vector<double> nyud = {1.0, 1.0};
    CHECK(kem::mtl_loss(std::vector<double>{0.7, 0.4}, nyud) == doctest::Approx(1.1));

    CHECK_THROWS_AS(kem::mtl_loss(std::vector<double>{1.0}, ones), std::invalid_argument);
    CHECK_THROWS_AS(kem::mtl_loss(std::vector<double>{1.0, 1.0}, std::vector<double>{1.0, 0.0}),
                    std::invalid_argument);
}

TEST_CASE("mtl_loss is linear in losses and homogeneous in weights") {
    kem::CounterRng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        const std::vector<double> l1 = rng.uniform_vec(3, 0.0, 4.0);
        const std::vector<double> l2 = rng.uniform_vec(3, 0.0, 4.0);
        const std::vector<double> w = rng.uniform_vec(3, 0.1, 5.0);
        const double a = rng.uniform(0.0, 3.0);

        std::vector<double> mix(3);
        for (int i = 0; i < 3; ++i) mix[static_cast<std::size_t>(i)] =
            l1[static_cast<std::size_t>(i)] + a * l2[static_cast<std::size_t>(i)];
        CHECK(kem::mtl_loss(mix, w) ==
              doctest::Approx(kem::mtl_loss(l1, w) + a * kem::mtl_loss(l2, w)).epsilon(1e-12));

        std::vector<double> w_scaled(3);
        for (int i = 0; i < 3; ++i) w_scaled[static_cast<std::size_t>(i)] =
            2.5 * w[static_cast<std::size_t>(i)];
        CHECK(kem::mtl_loss(l1, w_scaled) == doctest::Approx(2.5 * kem::mtl_loss(l1, w)).epsilon(1e-12));
    }
}

TEST_CASE("mtl_loss tensor overload is differentiable") {
    for (const std::uint64_t seed : {1u, 2u, 3u}) {
        kem::CounterRng rng(seed);
        Tensor a = Tensor::scalar(rng.uniform(0.1, 2.0), true);
        Tensor b = Tensor::scalar(rng.uniform(0.1, 2.0), true);
        const std::vector<double> w = {1.0, 2.0};
        auto res = kem::finite_diff_check(
            [&](const Tensor& t) {
                std::vector<Tensor> losses = {t, b};
                return kem::mtl_loss(losses, w);
            },
            a, 1e-5, 1e-4);
        CHECK(res.pass);
        CHECK(res.max_rel_error <= 1e-6);
    }
}

TEST_CASE("miou hand cases") {
    const std::vector<int> same = {0, 1, 2, 1};
    CHECK(kem::miou(same, same, 3) == 1.0);

    const std::vector<int> all0 = {0, 0, 0};
    const std::vector<int> all1 = {1, 1, 1};
    CHECK(kem::miou(all0, all1, 2) == 0.0);

    // truth [[0,0],[1,1]], pred [[0,1],[1,1]]: class0 1/2, class1 2/3
    const std::vector<int> truth = {0, 0, 1, 1};
    const std::vector<int> pred = {0, 1, 1, 1};
    CHECK(kem::miou(pred, truth, 2) == doctest::Approx(7.0 / 12.0).epsilon(1e-12));

    // absent classes are excluded from the mean
    CHECK(kem::miou(pred, truth, 10) == doctest::Approx(7.0 / 12.0).epsilon(1e-12));

    CHECK_THROWS_AS(kem::miou(std::vector<int>{5}, std::vector<int>{0}, 3), std::invalid_argument);
}

TEST_CASE("miou and accuracy are relabeling invariant") {
    kem::CounterRng rng(2);
    const int n_classes = 5;
    std::vector<int> pred(200), truth(200);
    for (auto& v : pred) v = static_cast<int>(rng.below(n_classes));
    for (auto& v : truth) v = static_cast<int>(rng.below(n_classes));

    const std::vector<int> perm = {3, 0, 4, 2, 1};
    std::vector<int> pred_p(pred.size()), truth_p(truth.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        pred_p[i] = perm[static_cast<std::size_t>(pred[i])];
        truth_p[i] = perm[static_cast<std::size_t>(truth[i])];
    }
    CHECK(kem::miou(pred_p, truth_p, n_classes) ==
          doctest::Approx(kem::miou(pred, truth, n_classes)).epsilon(1e-12));
    CHECK(kem::accuracy(pred_p, truth_p) == kem::accuracy(pred, truth));
}

TEST_CASE("rmse hand cases") {
    const std::vector<double> a = {1.0, 2.0, 3.0};
    CHECK(kem::rmse(a, a) == 0.0);

    const std::vector<double> shifted = {1.5, 2.5, 3.5};
    CHECK(kem::rmse(shifted, a) == doctest::Approx(0.5).epsilon(1e-12));

    CHECK(kem::rmse(std::vector<double>{1.0, 2.0}, std::vector<double>{0.0, 0.0}) ==
          doctest::Approx(std::sqrt(2.5)).epsilon(1e-12));

    CHECK_THROWS_AS(kem::rmse(std::vector<double>{}, std::vector<double>{}), std::invalid_argument);
}

TEST_CASE("accuracy hand cases") {
    const std::vector<int> t = {1, 2, 3, 4};
    CHECK(kem::accuracy(t, t) == 1.0);
    CHECK(kem::accuracy(std::vector<int>{0, 0, 0, 0}, t) == 0.0);
    CHECK(kem::accuracy(std::vector<int>{1, 2, 3, 0}, t) == 0.75);
}

TEST_CASE("delta_m sign conventions") {
    const std::vector<TaskScore> stl = {{50.0, false}};
    CHECK(kem::delta_m(stl, stl) == 0.0);

    // lower-is-better 10% improvement flips sign to +0.10
    const std::vector<TaskScore> stl_low = {{1.0, true}};
    const std::vector<TaskScore> mtl_low = {{0.9, true}};
    CHECK(kem::delta_m(mtl_low, stl_low) == doctest::Approx(0.10).epsilon(1e-12));

    // mixed pair: higher-better 50 vs 49, lower-better 0.48 vs 0.50
    const std::vector<TaskScore> mtl2 = {{50.0, false}, {0.48, true}};
    const std::vector<TaskScore> stl2 = {{49.0, false}, {0.50, true}};
    CHECK(kem::delta_m(mtl2, stl2) == doctest::Approx((1.0 / 49.0 + 0.02 / 0.50) / 2.0).epsilon(1e-9));

    CHECK_THROWS_AS(kem::delta_m(mtl2, std::vector<TaskScore>{{0.0, false}, {0.5, true}}),
                    std::invalid_argument);
    CHECK_THROWS_AS(kem::delta_m(mtl2, std::vector<TaskScore>{{49.0, true}, {0.5, true}}),
                    std::invalid_argument);
}

TEST_CASE("improving any single task raises delta_m") {
    std::vector<TaskScore> stl = {{40.0, false}, {0.6, true}, {12.0, false}};
    std::vector<TaskScore> mtl = {{41.0, false}, {0.55, true}, {11.0, false}};
    const double base = kem::delta_m(mtl, stl);

    for (std::size_t i = 0; i < mtl.size(); ++i) {
        std::vector<TaskScore> better = mtl;
        better[i].value += better[i].lower_is_better ? -0.01 : 0.01;
        CHECK(kem::delta_m(better, stl) > base);
    }
}

TEST_CASE("metric_record serializes the documented keys") {
    const auto line = kem::metric_record("accuracy", "task1", 0.75, "abc123");
    const auto j = nlohmann::json::parse(line);
    CHECK(j["metric"] == "accuracy");
    CHECK(j["task"] == "task1");
    CHECK(j["value"] == 0.75);
    CHECK(j["config_hash"] == "abc123");
}

TEST_CASE("poly_lr endpoints and the half-way point") {
    CHECK(kem::poly_lr(0, 100, 0.05, 0.9) == 0.05);
    CHECK(kem::poly_lr(100, 100, 0.05, 0.9) == 0.0);
    CHECK(kem::poly_lr(250, 100, 0.05, 0.9) == 0.0); // clamps past T
    CHECK(kem::poly_lr(50, 100, 0.00005, 0.9) == doctest::Approx(2.679e-5).epsilon(1e-3));

    double prev = kem::poly_lr(0, 64, 1.0, 0.9);
    for (std::size_t t = 1; t <= 64; ++t) {
        const double lr = kem::poly_lr(t, 64, 1.0, 0.9);
        CHECK(lr <= prev);
        prev = lr;
    }
}

TEST_CASE("optimizer: zero gradient and zero decay is the identity") {
    kem::CounterRng rng(3);
    std::vector<Tensor> params = {Tensor::from_data({2, 2}, rng.uniform_vec(4, -1, 1), true)};
    const std::vector<double> before(params[0].values().begin(), params[0].values().end());
    auto state = kem::make_optimizer_state(params, 0.1, 0.0, 0);
    kem::optimizer_step(params, {std::vector<double>(4, 0.0)}, state);
    for (std::size_t i = 0; i < 4; ++i) CHECK(params[0].values()[i] == before[i]);
}

TEST_CASE("optimizer: first step moves by about lr * sign(g)") {
    std::vector<Tensor> params = {Tensor::scalar(1.0, true)};
    auto state = kem::make_optimizer_state(params, 0.01, 0.0, 0);
    kem::optimizer_step(params, {std::vector<double>{2.5}}, state);
    CHECK(params[0].item() == doctest::Approx(1.0 - 0.01).epsilon(1e-6));

    std::vector<Tensor> params2 = {Tensor::scalar(1.0, true)};
    auto state2 = kem::make_optimizer_state(params2, 0.01, 0.0, 0);
    kem::optimizer_step(params2, {std::vector<double>{-0.3}}, state2);
    CHECK(params2[0].item() == doctest::Approx(1.0 + 0.01).epsilon(1e-6));
}

TEST_CASE("optimizer: ten steps on theta^2 shrink |theta| monotonically") {
    std::vector<Tensor> params = {Tensor::scalar(1.0, true)};
    auto state = kem::make_optimizer_state(params, 0.1, 0.0, 0);
    double prev = 1.0;
    for (int step = 0; step < 10; ++step) {
        const double theta = params[0].item();
        kem::optimizer_step(params, {std::vector<double>{2.0 * theta}}, state);
        CHECK(std::fabs(params[0].item()) < std::fabs(prev));
        prev = params[0].item();
    }
}

TEST_CASE("optimizer rejects non-finite gradients without touching state") {
    std::vector<Tensor> params = {Tensor::scalar(1.0, true)};
    auto state = kem::make_optimizer_state(params, 0.1, 0.0, 0);
    CHECK_THROWS_AS(
        kem::optimizer_step(params, {std::vector<double>{std::nan("")}}, state), std::runtime_error);
    CHECK(params[0].item() == 1.0);
    CHECK(state.step_count == 0);
}

TEST_CASE("optimizer follows the polynomial schedule") {
    std::vector<Tensor> params = {Tensor::scalar(5.0, true)};
    auto state = kem::make_optimizer_state(params, 0.01, 0.0, 10, 0.9);
    CHECK(state.current_lr() == 0.01);
    for (int step = 0; step < 10; ++step)
        kem::optimizer_step(params, {std::vector<double>{1.0}}, state);
    CHECK(state.current_lr() == 0.0);
    const double frozen = params[0].item();
    kem::optimizer_step(params, {std::vector<double>{1.0}}, state); // lr 0: no movement
    CHECK(params[0].item() == frozen);
}
