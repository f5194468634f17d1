#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "ferrosnn/optimizer.hpp"
#include "ferrosnn/rng.hpp"

using namespace ferrosnn;
using namespace ferrosnn::opt;

// Scalar Adam written independently from the moment-update equations; the
// vectorized implementation must match it to float precision.
namespace {
struct ScalarAdam {
    double m = 0.0, v = 0.0;
    long t = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    double delta(double g, double lr) {
        ++t;
        m = beta1 * m + (1.0 - beta1) * g;
        v = beta2 * v + (1.0 - beta2) * g * g;
        const double m_hat = m / (1.0 - std::pow(beta1, t));
        const double v_hat = v / (1.0 - std::pow(beta2, t));
        return -lr * m_hat / (std::sqrt(v_hat) + eps);
    }
};
}  // namespace

TEST_CASE("adam matches the scalar reference over 100 random steps") {
    Adam adam;
    const std::size_t n = 7;
    const auto h = adam.register_tensor("w", n);
    std::vector<ScalarAdam> ref(n);

    Rng rng(31);
    std::vector<double> grad(n), delta(n);
    for (int step = 0; step < 100; ++step) {
        const double lr = 1e-3 * (1.0 + 0.5 * std::sin(step * 0.1));
        for (auto& g : grad) g = rng.normal(0.0, 1.0);
        adam.begin_step();
        adam.step_tensor(h, grad, lr, delta);
        for (std::size_t i = 0; i < n; ++i) {
            const double expected = ref[i].delta(grad[i], lr);
            REQUIRE(std::fabs(delta[i] - expected) <= 1e-10);
        }
    }
}

TEST_CASE("adam edge behaviors") {
    SUBCASE("zero gradients from a fresh state give zero deltas") {
        Adam adam;
        const auto h = adam.register_tensor("w", 3);
        std::vector<double> grad(3, 0.0), delta(3, 99.0);
        adam.begin_step();
        adam.step_tensor(h, grad, 1e-3, delta);
        for (double d : delta) CHECK(d == 0.0);
    }
    SUBCASE("bias correction makes the first step about -lr*sign(g)") {
        Adam adam;
        const auto h = adam.register_tensor("w", 1);
        std::vector<double> grad{1.0}, delta{0.0};
        adam.begin_step();
        adam.step_tensor(h, grad, 0.01, delta);
        CHECK(delta[0] == doctest::Approx(-0.01).epsilon(1e-6));
    }
    SUBCASE("constant gradients drive |delta| to lr") {
        Adam adam;
        const auto h = adam.register_tensor("w", 1);
        std::vector<double> grad{0.37}, delta{0.0};
        for (int step = 0; step < 1000; ++step) {
            adam.begin_step();
            adam.step_tensor(h, grad, 2e-3, delta);
        }
        CHECK(std::fabs(std::fabs(delta[0]) - 2e-3) / 2e-3 < 0.01);
    }
    SUBCASE("non-finite gradient aborts naming the tensor") {
        Adam adam;
        const auto h = adam.register_tensor("conv2", 2);
        std::vector<double> grad{0.0, std::nan("")}, delta(2);
        adam.begin_step();
        try {
            adam.step_tensor(h, grad, 1e-3, delta);
            FAIL("expected abort");
        } catch (const std::runtime_error& e) {
            CHECK(std::string(e.what()).find("conv2") != std::string::npos);
        }
    }
}

TEST_CASE("cosine schedule endpoints and midpoint") {
    const LrSchedule s{1e-4, 1e-5, 20};
    CHECK(std::fabs(cosine_lr(0, s) - 1e-4) <= 1e-12 * 1e-4);
    CHECK(std::fabs(cosine_lr(20, s) - 1e-5) <= 1e-12 * 1e-5);
    CHECK(cosine_lr(10, s) == doctest::Approx(5.5e-5).epsilon(1e-12));

    SUBCASE("monotone non-increasing") {
        double prev = cosine_lr(0, s);
        for (int e = 1; e <= 20; ++e) {
            const double lr = cosine_lr(e, s);
            CHECK(lr <= prev);
            prev = lr;
        }
    }
    SUBCASE("out-of-range epoch is rejected") {
        CHECK_THROWS_AS(cosine_lr(-1, s), std::invalid_argument);
        CHECK_THROWS_AS(cosine_lr(21, s), std::invalid_argument);
    }
}

TEST_CASE("software weight application clamps to the layer bound") {
    const fabric::LayerBound b{9, 1.0 / 3.0};

    SUBCASE("delta past the bound lands exactly on it") {
        std::vector<double> w{0.3, -0.3};
        apply_software(w, std::vector<double>{0.2, -0.2}, b);
        CHECK(w[0] == b.bound);
        CHECK(w[1] == -b.bound);
    }
    SUBCASE("zero deltas never move weights") {
        Rng rng(17);
        std::vector<double> w(100);
        for (auto& v : w) v = rng.uniform(-b.bound, b.bound);
        auto before = w;
        apply_software(w, std::vector<double>(100, 0.0), b);
        CHECK(w == before);
    }
    SUBCASE("random sequence matches a scalar clamp oracle") {
        Rng rng(18);
        double scalar = 0.1;
        std::vector<double> w{0.1};
        for (int i = 0; i < 1000; ++i) {
            const double d = rng.uniform(-0.1, 0.1);
            apply_software(w, std::vector<double>{d}, b);
            scalar = std::clamp(scalar + d, -b.bound, b.bound);
            REQUIRE(w[0] == scalar);
        }
    }
}
