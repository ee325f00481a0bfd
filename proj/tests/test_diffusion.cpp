#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "mdt/diffusion.hpp"
#include "mdt/tensor.hpp"

using namespace mdt;

namespace {

// Exact terminal scaling factor of a linear (Gaussian-oracle) run of either
// sampler over a schedule. The scalar recurrence is independent of the
// tensor sampler code path and serves as the oracle for the Monte-Carlo
// statistics below.
double gaussian_run_factor(const SigmaSchedule<double>& sch, double data_var, bool euler) {
    double f = 1.0;
    for (size_t i = 0; i + 1 < sch.sigmas.size(); ++i) {
        const double si = sch.sigmas[i];
        const double sj = sch.sigmas[i + 1];
        const double c = data_var / (data_var + si * si);
        double step;
        if (sj == 0.0) {
            step = c;
        } else if (euler) {
            step = 1.0 + (sj - si) * (1.0 - c) / si;
        } else {
            const double r = sj / si;
            step = r + (1.0 - r) * c;
        }
        f *= step;
    }
    return f;
}

TensorT<double> gaussian_denoiser(const TensorT<double>& x, double sigma, double data_var) {
    return scale(x, data_var / (data_var + sigma * sigma));
}

}  // namespace

TEST_CASE("truncated log-logistic boundaries and validation") {
    NoiseDist<double> d;
    d.alpha = 0.5;
    d.beta = 1.5;
    CHECK(d.icdf_truncated(0.0) == d.sigma_min);
    CHECK(d.icdf_truncated(1.0) == d.sigma_max);

    NoiseDist<double> bad;
    bad.sigma_min = 2.0;
    bad.sigma_max = 1.0;
    Rng rng(1);
    CHECK_THROWS_AS(sample_sigma(rng, bad), ContractError);
}

TEST_CASE("truncated log-logistic matches the analytic CDF (1e6 draws)") {
    NoiseDist<double> d;
    d.alpha = 0.5;
    d.beta = 1.5;
    Rng rng(42);
    const size_t n = 1000000;
    std::vector<double> xs(n);
    for (auto& x : xs) {
        x = sample_sigma(rng, d);
        REQUIRE(x >= d.sigma_min);
        REQUIRE(x <= d.sigma_max);
    }
    std::sort(xs.begin(), xs.end());
    double sup = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double emp_hi = static_cast<double>(i + 1) / n;
        const double emp_lo = static_cast<double>(i) / n;
        const double cdf = d.truncated_cdf(xs[i]);
        sup = std::max(sup, std::max(std::abs(emp_hi - cdf), std::abs(emp_lo - cdf)));
    }
    CHECK(sup < 0.005);
}

TEST_CASE("preconditioner boundary identities hold exactly") {
    Preconditioner<double> pc;
    pc.sigma_data = 0.5;
    CHECK(pc.c_skip(0.0) == 1.0);
    CHECK(pc.c_out(0.0) == 0.0);
    CHECK(pc.c_in(0.0) == doctest::Approx(1.0 / pc.sigma_data).epsilon(1e-15));
    CHECK(pc.c_noise(1.0) == 0.0);
    CHECK_THROWS_AS(pc.c_noise(0.0), ContractError);
}

TEST_CASE("preconditioner closed forms at sigma = sigma_data = 0.5") {
    Preconditioner<double> pc;
    pc.sigma_data = 0.5;
    const double s = 0.5;
    CHECK(std::abs(pc.c_skip(s) - 0.5) < 1e-12);
    CHECK(std::abs(pc.c_out(s) - 0.25 / std::sqrt(0.5)) < 1e-12);
    CHECK(std::abs(pc.c_out(s) - 0.353553390593) < 1e-9);
    CHECK(std::abs(pc.c_in(s) - std::sqrt(2.0)) < 1e-12);
    CHECK(std::abs(pc.c_in(s) - 1.414213562373) < 1e-9);
    CHECK(std::abs(pc.c_noise(s) - 0.25 * std::log(0.5)) < 1e-12);
    CHECK(std::abs(pc.c_noise(s) + 0.173286795140) < 1e-9);
}

TEST_CASE("preconditioner raw formulas agree with direct evaluation over random sigmas") {
    Preconditioner<double> pc;
    pc.sigma_data = 0.5;
    Rng rng(5);
    for (int i = 0; i < 200; ++i) {
        const double s = std::exp(rng.uniform(std::log(1e-3), std::log(80.0)));
        const double sd2 = 0.25;
        CHECK(std::abs(pc.c_skip(s) - sd2 / (sd2 + s * s)) < 1e-12);
        CHECK(std::abs(pc.c_out(s) - s * 0.5 / std::sqrt(sd2 + s * s)) < 1e-12);
        CHECK(std::abs(pc.c_in(s) - 1.0 / std::sqrt(sd2 + s * s)) < 1e-12);
        CHECK(std::abs(pc.c_noise(s) - 0.25 * std::log(s)) < 1e-12);
    }
}

TEST_CASE("loss weight closed form") {
    Preconditioner<double> pc;
    pc.sigma_data = 0.5;
    CHECK(pc.loss_weight(0.5) == doctest::Approx(8.0).epsilon(1e-12));
}

TEST_CASE("precondition_apply identities") {
    Preconditioner<double> pc;
    pc.sigma_data = 0.5;
    Rng rng(9);
    Tensor64 a = Tensor64::randn(rng, {2, 3});

    // sigma = 0: network not invoked, exact pass-through.
    bool invoked = false;
    Tensor64 out0 = precondition_apply(
        [&](const Tensor64& x, double) {
            invoked = true;
            return x;
        },
        a, 0.0, pc);
    CHECK(!invoked);
    CHECK(out0.storage() == a.storage());

    // sigma = 1: the inner network sees c_noise = 0.
    double seen = -1.0;
    (void)precondition_apply(
        [&](const Tensor64& x, double cn) {
            seen = cn;
            return x;
        },
        a, 1.0, pc);
    CHECK(seen == 0.0);

    CHECK_THROWS_AS(precondition_apply([](const Tensor64& x, double) { return x; }, a, -0.1, pc), ContractError);

    // Composite value matches the hand-evaluated closed form.
    const double sig = 0.7;
    Tensor64 outv = precondition_apply([](const Tensor64& x, double) { return scale(x, 2.0); }, a, sig, pc);
    for (size_t i = 0; i < a.numel(); ++i) {
        const double expect = pc.c_skip(sig) * a.data()[i] + pc.c_out(sig) * 2.0 * pc.c_in(sig) * a.data()[i];
        CHECK(outv.data()[i] == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("score matching loss: oracle denoiser gives zero") {
    Preconditioner<double> pc;
    NoiseDist<double> dist;
    Rng rng(3);
    Tensor64 clean = Tensor64::randn(rng, {4, 5, 3}, 0.5);
    Tensor64 loss = score_matching_loss(
        [&](const Tensor64&, const std::vector<double>&) { return clean; }, clean, rng, dist, pc);
    CHECK(loss.item() == 0.0);

    Tensor64 empty({0, 5, 3});
    CHECK_THROWS_AS(
        score_matching_loss([&](const Tensor64& x, const std::vector<double>&) { return x; }, empty, rng, dist, pc),
        ContractError);
}

TEST_CASE("score matching loss: identity denoiser Monte Carlo matches lambda(sigma) sigma^2 dim") {
    // With clean = 0 and D(x) = x the per-sample loss is lambda ||eps||^2,
    // whose expectation is lambda(sigma) sigma^2 dim. A narrow noise band
    // pins sigma ~= 0.5 so the target is known to well under the 2% gate.
    Preconditioner<double> pc;
    pc.sigma_data = 0.5;
    NoiseDist<double> dist;
    dist.sigma_min = 0.4999;
    dist.sigma_max = 0.5001;
    Rng rng(17);
    const size_t reps = 100, batch = 1000;
    double acc = 0.0;
    Tensor64 clean = Tensor64::zeros({batch, 2, 2});
    for (size_t r = 0; r < reps; ++r) {
        Tensor64 loss = score_matching_loss(
            [](const Tensor64& x, const std::vector<double>&) { return x; }, clean, rng, dist, pc);
        acc += loss.item();
    }
    const double measured = acc / reps;
    const double expected = pc.loss_weight(0.5) * 0.25 * 4.0;  // = 8 * 0.25 * dim
    CHECK(std::abs(measured - expected) / expected < 0.02);
}

TEST_CASE("exponential schedule endpoints, spacing, and validation") {
    auto sch = exponential_sigmas<double>(10, 0.001, 80.0);
    REQUIRE(sch.sigmas.size() == 11);
    CHECK(sch.sigmas[0] == 80.0);
    CHECK(sch.sigmas[9] == 0.001);
    CHECK(sch.sigmas[10] == 0.0);
    const double sigma1 = 80.0 * std::pow(0.001 / 80.0, 1.0 / 9.0);
    CHECK(sch.sigmas[1] == doctest::Approx(sigma1).epsilon(1e-12));
    CHECK(sch.sigmas[1] == doctest::Approx(22.8193).epsilon(1e-4));

    // Constant consecutive ratio (log-linear spacing).
    for (size_t n : {2UL, 5UL, 17UL}) {
        auto s = exponential_sigmas<double>(n, 0.02, 31.0);
        CHECK(s.sigmas[0] == 31.0);
        CHECK(s.sigmas[n - 1] == 0.02);
        const double r0 = s.sigmas[1] / s.sigmas[0];
        for (size_t i = 0; i + 2 < s.sigmas.size(); ++i) {
            CHECK(s.sigmas[i + 1] < s.sigmas[i]);
            CHECK(s.sigmas[i + 1] / s.sigmas[i] == doctest::Approx(r0).epsilon(1e-9));
        }
        s.validate();
    }
    CHECK_THROWS_AS(exponential_sigmas<double>(1, 0.001, 80.0), ContractError);
}

TEST_CASE("ddim step worked examples") {
    Rng rng(8);
    Tensor64 a = Tensor64::randn(rng, {4});

    // Fixed point: denoised == a.
    Tensor64 fp = ddim_step(a, a, 3.0, 1.2);
    for (size_t i = 0; i < 4; ++i) CHECK(fp.data()[i] == doctest::Approx(a.data()[i]).epsilon(1e-12));

    // Ratio example.
    Tensor64 one({1}, {1.0});
    Tensor64 zero({1}, {0.0});
    const double s1 = 80.0 * std::pow(0.001 / 80.0, 1.0 / 9.0);
    Tensor64 stepped = ddim_step(one, zero, 80.0, s1);
    CHECK(stepped.item() == doctest::Approx(s1 / 80.0).epsilon(1e-12));
    CHECK(stepped.item() == doctest::Approx(0.285).epsilon(1e-3));

    // Terminal step returns the denoised tensor exactly.
    Tensor64 den = Tensor64::randn(rng, {4});
    Tensor64 term = ddim_step(a, den, 0.5, 0.0);
    CHECK(term.storage() == den.storage());

    CHECK_THROWS_AS(ddim_step(a, den, 1.0, 1.0), ContractError);
    CHECK_THROWS_AS(ddim_step(a, den, 0.5, 0.7), ContractError);
}

TEST_CASE("ddim step is a convex combination of its scalar inputs") {
    Rng rng(12);
    for (int rep = 0; rep < 200; ++rep) {
        const double ai = rng.uniform(-3.0, 3.0);
        const double de = rng.uniform(-3.0, 3.0);
        double hi = std::exp(rng.uniform(std::log(1e-3), std::log(80.0)));
        double lo = std::exp(rng.uniform(std::log(1e-3), std::log(80.0)));
        if (lo > hi) std::swap(lo, hi);
        if (lo == hi) continue;
        Tensor64 av({1}, {ai});
        Tensor64 dv({1}, {de});
        const double out = ddim_step(av, dv, hi, lo).item();
        CHECK(out >= std::min(ai, de) - 1e-12);
        CHECK(out <= std::max(ai, de) + 1e-12);
    }
}

TEST_CASE("euler ode step worked examples") {
    Rng rng(4);
    Tensor64 a = Tensor64::randn(rng, {5});
    Tensor64 same = euler_ode_step(a, a, 2.0, 1.0);
    for (size_t i = 0; i < 5; ++i) CHECK(same.data()[i] == a.data()[i]);

    Tensor64 one({1}, {1.0});
    Tensor64 zero({1}, {0.0});
    CHECK(euler_ode_step(one, zero, 1.0, 0.5).item() == doctest::Approx(0.5).epsilon(1e-12));

    CHECK_THROWS_AS(euler_ode_step(a, a, 0.0, 0.0), ContractError);
}

TEST_CASE("gaussian oracle: sampler statistics match the analytic factor product") {
    // Honest derived values: a 10-step exponential DDIM run over [0.001, 80]
    // contracts N(0, 0.25 I) data to terminal variance 0.1339, not 0.25; the
    // scalar factor-product oracle below pins that number independently.
    const double data_var = 0.25;
    auto sch = exponential_sigmas<double>(10, 0.001, 80.0);
    const double f10 = gaussian_run_factor(sch, data_var, false);
    const double analytic_var = 6400.0 * f10 * f10;
    CHECK(analytic_var == doctest::Approx(0.1339).epsilon(2e-3));

    Rng rng(123);
    const size_t n = 10000;
    double s1 = 0.0, s2 = 0.0;
    for (size_t i = 0; i < n; ++i) {
        Tensor64 out = sample_action_chunk(
            [&](const Tensor64& x, double sig) { return gaussian_denoiser(x, sig, data_var); }, Shape{1}, sch, rng);
        const double v = out.item();
        s1 += v;
        s2 += v * v;
    }
    const double mean = s1 / n;
    const double var = s2 / n - mean * mean;
    CHECK(std::abs(mean) < 0.02);
    CHECK(std::abs(var - analytic_var) / analytic_var < 0.05);
}

TEST_CASE("gaussian oracle: ddim converges to the data law as steps grow") {
    const double data_var = 0.25;
    auto sch = exponential_sigmas<double>(2000, 0.001, 80.0);
    const double f = gaussian_run_factor(sch, data_var, false);
    const double terminal_var = 6400.0 * f * f;
    CHECK(std::abs(terminal_var - data_var) / data_var < 0.005);
}

TEST_CASE("ddim and euler agree per-trajectory on the same grid") {
    const double data_var = 0.25;
    auto sch = exponential_sigmas<double>(200, 0.001, 80.0);
    Rng rng(77);
    double max_diff = 0.0;
    for (int i = 0; i < 500; ++i) {
        Tensor64 a0({1}, {rng.normal() * 80.0});
        auto den = [&](const Tensor64& x, double sig) { return gaussian_denoiser(x, sig, data_var); };
        const double d = integrate_schedule(den, a0.clone(), sch, SamplerKind::Ddim).item();
        const double e = integrate_schedule(den, a0.clone(), sch, SamplerKind::Euler).item();
        max_diff = std::max(max_diff, std::abs(d - e));
    }
    CHECK(max_diff < 1e-2);
}

TEST_CASE("two-entry schedule with constant oracle returns the constant") {
    SigmaSchedule<double> sch;
    sch.sigmas = {80.0, 0.0};
    Tensor64 mu({3}, {0.4, -0.2, 1.0});
    Rng rng(2);
    for (int i = 0; i < 10; ++i) {
        Tensor64 out = sample_action_chunk([&](const Tensor64&, double) { return mu; }, Shape{3}, sch, rng);
        for (size_t j = 0; j < 3; ++j) CHECK(out.data()[j] == mu.data()[j]);
    }
}

TEST_CASE("sampling is deterministic under a fixed seed") {
    const double data_var = 0.25;
    auto sch = exponential_sigmas<double>(10, 0.001, 80.0);
    auto den = [&](const Tensor64& x, double sig) { return gaussian_denoiser(x, sig, data_var); };
    Rng r1(55), r2(55);
    Tensor64 a = sample_action_chunk(den, Shape{4, 3}, sch, r1);
    Tensor64 b = sample_action_chunk(den, Shape{4, 3}, sch, r2);
    for (size_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
}
