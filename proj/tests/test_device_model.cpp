#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>
#include <sstream>

#include "ferrosnn/device_model.hpp"

using namespace ferrosnn;
using namespace ferrosnn::device;

namespace {

// Independent high-precision route: evaluate the kernel in extended precision
// with powl instead of the exp/log implementation path.
long double kernel_reference(long double a, long double alpha, long double beta, long double w) {
    if (w <= 0.0L) return alpha > 1.0L ? 0.0L : (alpha == 1.0L ? a * powl(1.0L - w, beta - 1.0L) : 0.0L);
    if (w >= 1.0L) return beta > 1.0L ? 0.0L : (beta == 1.0L ? a * powl(w, alpha - 1.0L) : 0.0L);
    return a * powl(w, alpha - 1.0L) * powl(1.0L - w, beta - 1.0L);
}

std::vector<CharacterizationSample> grid_samples(double a, double alpha, double beta,
                                                 Polarity pol, int n, double noise_std,
                                                 Rng* rng) {
    std::vector<CharacterizationSample> out;
    const FerroKernelParams p{a, alpha, beta, a, alpha, beta};
    for (int i = 0; i < n; ++i) {
        const double w = 0.02 + (0.98 - 0.02) * i / (n - 1);
        double dw = delta_w(w, pol, p);
        if (noise_std > 0.0 && rng) dw += rng->normal(0.0, noise_std);
        out.push_back({w, dw, pol});
    }
    return out;
}

}  // namespace

TEST_CASE("delta_w reproduces the closed form at grid points") {
    const auto p = FerroKernelParams::characterized();

    SUBCASE("pinned endpoints are exactly zero") {
        CHECK(delta_w(0.0, Polarity::ltp, p) == 0.0);
        CHECK(delta_w(1.0, Polarity::ltp, p) == 0.0);
        CHECK(delta_w(0.0, Polarity::ltd, p) == 0.0);
        CHECK(delta_w(1.0, Polarity::ltd, p) == 0.0);
    }
    SUBCASE("interior values against the extended-precision reference") {
        for (double w : {0.25, 0.5, 0.75, 0.1, 0.9}) {
            const double ltp = delta_w(w, Polarity::ltp, p);
            const double ltd = delta_w(w, Polarity::ltd, p);
            const long double ltp_ref = kernel_reference(0.1761L, 1.81L, 2.12L, w);
            const long double ltd_ref = -kernel_reference(0.3300L, 2.47L, 1.79L, w);
            CHECK(std::fabs(ltp - static_cast<double>(ltp_ref)) <=
                  1e-12 * std::fabs(static_cast<double>(ltp_ref)));
            CHECK(std::fabs(ltd - static_cast<double>(ltd_ref)) <=
                  1e-12 * std::fabs(static_cast<double>(ltd_ref)));
        }
    }
    SUBCASE("half-range potentiation step") {
        // 0.1761 * 0.5^1.93, evaluated independently
        CHECK(delta_w(0.5, Polarity::ltp, p) == doctest::Approx(0.0462).epsilon(1e-2));
    }
    SUBCASE("out-of-range state is a domain error") {
        CHECK_THROWS_AS(delta_w(-0.01, Polarity::ltp, p), std::domain_error);
        CHECK_THROWS_AS(delta_w(1.01, Polarity::ltd, p), std::domain_error);
    }
}

TEST_CASE("potentiation peak sits at the analytic argmax") {
    const auto p = FerroKernelParams::characterized();
    // dense grid search oracle
    double best_w = 0.0, best = -1.0;
    for (int i = 0; i <= 100000; ++i) {
        const double w = i * 1e-5;
        const double v = delta_w(w, Polarity::ltp, p);
        if (v > best) {
            best = v;
            best_w = w;
        }
    }
    const double analytic = (p.alpha_plus - 1.0) / (p.alpha_plus + p.beta_plus - 2.0);
    CHECK(best_w == doctest::Approx(analytic).epsilon(1e-3));
    CHECK(analytic == doctest::Approx(0.4197).epsilon(1e-3));
}

TEST_CASE("kernel signs hold over random states") {
    const auto p = FerroKernelParams::characterized();
    Rng rng(99);
    for (int i = 0; i < 2000; ++i) {
        const double w = rng.uniform();
        CHECK(delta_w(w, Polarity::ltp, p) >= 0.0);
        CHECK(delta_w(w, Polarity::ltd, p) <= 0.0);
    }
}

TEST_CASE("apply_pulse") {
    const auto p = FerroKernelParams::characterized();
    Rng rng(7);

    SUBCASE("noiseless step from mid-range") {
        CHECK(apply_pulse(0.5, Polarity::ltp, p, 0.0, rng) ==
              doctest::Approx(0.5 + delta_w(0.5, Polarity::ltp, p)).epsilon(1e-15));
        CHECK(std::fabs(apply_pulse(0.5, Polarity::ltp, p, 0.0, rng) - 0.5462) < 1e-4);
    }
    SUBCASE("rails are fixed points without noise") {
        CHECK(apply_pulse(1.0, Polarity::ltp, p, 0.0, rng) == 1.0);
        CHECK(apply_pulse(0.0, Polarity::ltd, p, 0.0, rng) == 0.0);
    }
    SUBCASE("clamp floor near the low rail") {
        CHECK(apply_pulse(0.02, Polarity::ltd, p, 0.0, rng) >= 0.0);
    }
    SUBCASE("never leaves [0,1] under heavy noise") {
        Rng fuzz(123);
        double w = 0.5;
        for (int i = 0; i < 20000; ++i) {
            const Polarity pol = fuzz.uniform() < 0.5 ? Polarity::ltp : Polarity::ltd;
            w = apply_pulse(w, pol, p, 0.2, fuzz);
            REQUIRE(w >= 0.0);
            REQUIRE(w <= 1.0);
        }
    }
    SUBCASE("deterministic given the rng seed") {
        Rng a(5), b(5);
        for (int i = 0; i < 100; ++i)
            CHECK(apply_pulse(0.4, Polarity::ltp, p, 0.05, a) ==
                  apply_pulse(0.4, Polarity::ltp, p, 0.05, b));
    }
}

TEST_CASE("repeated potentiation from the low rail is monotone and saturating") {
    const auto p = FerroKernelParams::characterized();
    Rng rng(1);
    double w = 0.01;
    double prev = w;
    double first_step = 0.0, last_step = 0.0;
    for (int n = 0; n < 300; ++n) {
        w = apply_pulse(w, Polarity::ltp, p, 0.0, rng);
        CHECK(w >= prev);
        if (n == 20) first_step = w - prev;
        if (n == 299) last_step = w - prev;
        prev = w;
    }
    CHECK(w > 0.9);        // approaches the high rail...
    CHECK(w < 1.0);        // ...but never reaches it
    CHECK(last_step < first_step);  // and flattens out
}

TEST_CASE("fit recovers exact parameters from noiseless samples") {
    auto samples = grid_samples(0.1761, 1.81, 2.12, Polarity::ltp, 50, 0.0, nullptr);
    const auto ltd = grid_samples(0.3300, 2.47, 1.79, Polarity::ltd, 50, 0.0, nullptr);
    samples.insert(samples.end(), ltd.begin(), ltd.end());

    const auto report = fit_kernel(samples);
    CHECK(std::fabs(report.params.a_plus - 0.1761) / 0.1761 < 1e-6);
    CHECK(std::fabs(report.params.alpha_plus - 1.81) / 1.81 < 1e-6);
    CHECK(std::fabs(report.params.beta_plus - 2.12) / 2.12 < 1e-6);
    CHECK(std::fabs(report.params.a_minus - 0.3300) / 0.3300 < 1e-6);
    CHECK(std::fabs(report.params.alpha_minus - 2.47) / 2.47 < 1e-6);
    CHECK(std::fabs(report.params.beta_minus - 1.79) / 1.79 < 1e-6);
    CHECK(report.ltp.residual_rms < 1e-8);
    CHECK(report.ltd.residual_rms < 1e-8);
}

TEST_CASE("fit stays within 5% median relative error under measurement noise") {
    std::vector<double> errors;
    for (int seed = 0; seed < 20; ++seed) {
        Rng rng(1000 + seed);
        auto samples = grid_samples(0.1761, 1.81, 2.12, Polarity::ltp, 80, 0.002, &rng);
        const auto ltd = grid_samples(0.3300, 2.47, 1.79, Polarity::ltd, 80, 0.002, &rng);
        samples.insert(samples.end(), ltd.begin(), ltd.end());
        const auto r = fit_kernel(samples);
        const double err = std::max(
            {std::fabs(r.params.a_minus - 0.3300) / 0.3300,
             std::fabs(r.params.alpha_minus - 2.47) / 2.47,
             std::fabs(r.params.beta_minus - 1.79) / 1.79});
        errors.push_back(err);
    }
    std::sort(errors.begin(), errors.end());
    CHECK(errors[errors.size() / 2] < 0.05);
}

TEST_CASE("fit rejects insufficient or narrow sample sets") {
    auto ok = grid_samples(0.2, 2.0, 2.0, Polarity::ltp, 50, 0.0, nullptr);

    SUBCASE("too few of one polarity") {
        auto samples = ok;
        samples.push_back({0.5, -0.01, Polarity::ltd});
        CHECK_THROWS_AS(fit_kernel(samples), CalibrationError);
    }
    SUBCASE("narrow conductance coverage") {
        std::vector<CharacterizationSample> narrow;
        const FerroKernelParams p{0.2, 2.0, 2.0, 0.2, 2.0, 2.0};
        for (int i = 0; i < 30; ++i) {
            const double w = 0.4 + 0.2 * i / 29.0;
            narrow.push_back({w, delta_w(w, Polarity::ltp, p), Polarity::ltp});
            narrow.push_back({w, delta_w(w, Polarity::ltd, p), Polarity::ltd});
        }
        CHECK_THROWS_AS(fit_kernel(narrow), CalibrationError);
    }
}

TEST_CASE("level statistics") {
    SUBCASE("constant group has zero spread") {
        const auto stats = level_statistics({{0.5, {10.0, 10.0, 10.0}}});
        REQUIRE(stats.size() == 1);
        CHECK(stats[0].mean_conductance == 10.0);
        REQUIRE(stats[0].std_conductance.has_value());
        CHECK(*stats[0].std_conductance == 0.0);
        CHECK(stats[0].sample_count == 3);
    }
    SUBCASE("single-read group reports no std") {
        const auto stats = level_statistics({{0.3, {42.0}}});
        CHECK_FALSE(stats[0].std_conductance.has_value());
    }
    SUBCASE("empty group is an error") {
        CHECK_THROWS_AS(level_statistics({{0.1, {}}}), std::invalid_argument);
    }
    SUBCASE("groups come back ordered by amplitude") {
        const auto stats = level_statistics({{0.9, {1.0}}, {0.1, {2.0}}, {0.5, {3.0}}});
        CHECK(stats[0].pulse_amplitude == 0.1);
        CHECK(stats[1].pulse_amplitude == 0.5);
        CHECK(stats[2].pulse_amplitude == 0.9);
    }
    SUBCASE("recovers the spread of a known generator") {
        Rng rng(555);
        std::vector<double> reads(1000);
        for (auto& r : reads) r = rng.normal(50.0, 2.0);
        const auto stats = level_statistics({{0.2, reads}});
        CHECK(*stats[0].std_conductance > 1.8);
        CHECK(*stats[0].std_conductance < 2.2);
        CHECK(stats[0].mean_conductance == doctest::Approx(50.0).epsilon(0.01));
    }
}

TEST_CASE("pulse log parsing") {
    SUBCASE("header row plus data, mixed delimiters") {
        std::istringstream in(
            "pulse_index,pulse_amplitude_V,pulse_width_us,read_conductance_S\n"
            "0,0.05,50,1.3e-8\n"
            "1\t0.10\t50\t1.1e-8\n"
            "# comment\n"
            "2;0.15;50;9.0e-9\n");
        const auto log = read_pulse_log(in);
        REQUIRE(log.size() == 3);
        CHECK(log[1].amplitude_v == 0.10);
        CHECK(log[2].conductance_s == 9.0e-9);
    }
    SUBCASE("wrong column count carries the line number") {
        std::istringstream in("0,0.05,50,1e-8\n1,0.10,50\n");
        try {
            read_pulse_log(in);
            FAIL("expected PulseLogError");
        } catch (const PulseLogError& e) {
            CHECK(e.line_number == 2);
        }
    }
    SUBCASE("non-numeric field in a data row") {
        std::istringstream in("0,0.05,50,1e-8\n1,abc,50,1e-8\n");
        CHECK_THROWS_AS(read_pulse_log(in), PulseLogError);
    }
}

TEST_CASE("characterization derivation normalizes signs and windows") {
    // two LTD pulses walking down, two LTP walking back up, magnitudes logged
    std::vector<PulseLogRecord> log = {
        {0, 0.0, 0, 9e-8}, {1, 0.5, 50, 7e-8},  {2, 0.6, 50, 5e-8},
        {3, -0.5, 50, 6e-8}, {4, -0.6, 50, 8e-8},
    };
    const auto data = derive_characterization(log, std::make_pair(1e-8, 1e-7));
    REQUIRE(data.samples.size() == 4);
    CHECK(data.samples[0].polarity == Polarity::ltd);
    CHECK(data.samples[0].delta_w < 0.0);
    CHECK(data.samples[0].w_before == doctest::Approx((9e-8 - 1e-8) / 9e-8).epsilon(1e-12));
    CHECK(data.samples[2].polarity == Polarity::ltp);
    CHECK(data.samples[2].delta_w > 0.0);
    CHECK(data.levels.size() == 5);  // five distinct amplitudes
}

TEST_CASE("kernel parameter files round-trip") {
    KernelFitReport report;
    report.params = FerroKernelParams::characterized();
    report.ltp = {0.1761, 1.81, 2.12, 1e-9, 12, true};
    report.ltd = {0.3300, 2.47, 1.79, 2e-9, 15, true};
    const auto path = std::filesystem::temp_directory_path() / "ferrosnn_kernel_test.json";
    save_kernel_report(report, path);
    const auto loaded = load_kernel_params(path);
    CHECK(loaded.a_plus == report.params.a_plus);
    CHECK(loaded.beta_minus == report.params.beta_minus);
    std::filesystem::remove(path);
}
