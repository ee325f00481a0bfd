#pragma once

// Continuous-time score-based diffusion machinery: truncated log-logistic
// noise sampling, EDM-style preconditioning, the weighted denoising loss,
// exponential sigma schedules, and the deterministic DDIM / Euler samplers.

#include <cmath>
#include <functional>
#include <vector>

#include "mdt/errors.hpp"
#include "mdt/rng.hpp"
#include "mdt/tensor.hpp"

namespace mdt {

// Truncated log-logistic noise distribution over [sigma_min, sigma_max].
template <typename T>
struct NoiseDist {
    T alpha = T(0.5);      // scale; median of the untruncated law
    T beta = T(1.5);       // shape
    T sigma_min = T(0.001);
    T sigma_max = T(80);

    void validate() const {
        if (!(alpha > T(0)) || !(beta > T(0))) throw ContractError("NoiseDist: alpha and beta must be positive");
        if (!(T(0) < sigma_min && sigma_min < sigma_max))
            throw ContractError("NoiseDist: need 0 < sigma_min < sigma_max");
    }

    // CDF of the untruncated log-logistic law.
    double cdf(double s) const {
        return 1.0 / (1.0 + std::pow(s / static_cast<double>(alpha), -static_cast<double>(beta)));
    }

    double truncated_cdf(double s) const {
        const double lo = cdf(static_cast<double>(sigma_min));
        const double hi = cdf(static_cast<double>(sigma_max));
        return (cdf(s) - lo) / (hi - lo);
    }

    // Inverse of the truncated CDF: u in [0,1] maps onto [sigma_min,
    // sigma_max] exactly at the endpoints, no rejection loop.
    T icdf_truncated(double u) const {
        if (u <= 0.0) return sigma_min;
        if (u >= 1.0) return sigma_max;
        const double lo = cdf(static_cast<double>(sigma_min));
        const double hi = cdf(static_cast<double>(sigma_max));
        const double uu = lo + (hi - lo) * u;
        const double s = static_cast<double>(alpha) * std::pow(1.0 / uu - 1.0, -1.0 / static_cast<double>(beta));
        return static_cast<T>(std::min(std::max(s, static_cast<double>(sigma_min)), static_cast<double>(sigma_max)));
    }
};

// Inverse-CDF draw with the uniform variate rescaled into
// [F(sigma_min), F(sigma_max)], so truncation is exact.
template <typename T>
T sample_sigma(Rng& rng, const NoiseDist<T>& dist) {
    dist.validate();
    return dist.icdf_truncated(rng.uniform());
}

// EDM preconditioning around the inner network.
template <typename T>
struct Preconditioner {
    T sigma_data = T(0.5);

    T c_skip(T sigma) const {
        const T sd2 = sigma_data * sigma_data;
        return sd2 / (sd2 + sigma * sigma);
    }
    T c_out(T sigma) const {
        const T sd2 = sigma_data * sigma_data;
        return sigma * sigma_data / std::sqrt(sd2 + sigma * sigma);
    }
    T c_in(T sigma) const {
        const T sd2 = sigma_data * sigma_data;
        return T(1) / std::sqrt(sd2 + sigma * sigma);
    }
    // Defined for sigma > 0 only.
    T c_noise(T sigma) const {
        if (!(sigma > T(0))) throw ContractError("c_noise: sigma must be positive");
        return T(0.25) * std::log(sigma);
    }
    // Loss weight of the denoising objective.
    T loss_weight(T sigma) const {
        const T sd2 = sigma_data * sigma_data;
        const T p = sigma * sigma_data;
        return (sigma * sigma + sd2) / (p * p);
    }
};

// D(a, sigma) = c_skip a + c_out F(c_in a, c_noise). F receives the scaled
// input and the c_noise value; any conditioning is baked into the callable.
// At sigma == 0 the network is not invoked and the input is returned.
template <typename T, typename F>
TensorT<T> precondition_apply(F&& inner, const TensorT<T>& a_noisy, T sigma, const Preconditioner<T>& pc) {
    if (sigma < T(0)) throw ContractError("precondition_apply: sigma must be non-negative");
    if (sigma == T(0)) return a_noisy;
    TensorT<T> scaled = scale(a_noisy, pc.c_in(sigma));
    TensorT<T> f_out = inner(scaled, pc.c_noise(sigma));
    return add(scale(f_out, pc.c_out(sigma)), scale(a_noisy, pc.c_skip(sigma)));
}

// ---------------------------------------------------------------------------
// Denoising loss
// ---------------------------------------------------------------------------

// Per-sample noise draws for one batch. Kept separate from the loss so
// finite-difference checks can re-evaluate the loss under frozen draws.
template <typename T>
struct NoiseDraws {
    std::vector<T> sigmas;  // [B]
    TensorT<T> eps;         // same shape as the clean actions
};

template <typename T>
NoiseDraws<T> draw_noise(Rng& rng, const NoiseDist<T>& dist, const Shape& action_shape) {
    if (action_shape.empty() || action_shape[0] == 0) throw ContractError("draw_noise: empty batch");
    const size_t batch = action_shape[0];
    NoiseDraws<T> d;
    d.sigmas.resize(batch);
    for (size_t b = 0; b < batch; ++b) d.sigmas[b] = sample_sigma(rng, dist);
    d.eps = TensorT<T>(action_shape);
    const size_t per = d.eps.numel() / batch;
    for (size_t b = 0; b < batch; ++b)
        for (size_t i = 0; i < per; ++i)
            d.eps.data()[b * per + i] = static_cast<T>(rng.normal()) * d.sigmas[b];
    return d;
}

// Weighted denoising loss with frozen draws:
//   (1/B) sum_b lambda(sigma_b) * || D(a_b + eps_b, sigma_b) - a_b ||^2.
// `denoise` maps (noisy actions [B,...], per-sample sigmas) to denoised
// actions of the same shape.
template <typename T, typename D>
TensorT<T> score_matching_loss_with_draws(D&& denoise, const TensorT<T>& clean, const NoiseDraws<T>& draws,
                                          const Preconditioner<T>& pc) {
    const size_t batch = clean.dim(0);
    if (batch == 0) throw ContractError("score_matching_loss: empty batch");
    TensorT<T> noisy = add(clean, draws.eps);
    TensorT<T> denoised = denoise(noisy, draws.sigmas);
    if (denoised.shape() != clean.shape()) throw DimensionError("score_matching_loss: denoiser changed shape");
    // lambda(sigma_b) broadcast over each sample's chunk, divided by B.
    TensorT<T> w(clean.shape());
    const size_t per = clean.numel() / batch;
    for (size_t b = 0; b < batch; ++b) {
        const T lw = pc.loss_weight(draws.sigmas[b]) / static_cast<T>(batch);
        for (size_t i = 0; i < per; ++i) w.data()[b * per + i] = lw;
    }
    return sum(mul(square(sub(denoised, clean)), w));
}

template <typename T, typename D>
TensorT<T> score_matching_loss(D&& denoise, const TensorT<T>& clean, Rng& rng, const NoiseDist<T>& dist,
                               const Preconditioner<T>& pc) {
    NoiseDraws<T> draws = draw_noise(rng, dist, clean.shape());
    return score_matching_loss_with_draws(denoise, clean, draws, pc);
}

// ---------------------------------------------------------------------------
// Schedules and samplers
// ---------------------------------------------------------------------------

// Strictly decreasing sigmas with an exact terminal 0 appended.
template <typename T>
struct SigmaSchedule {
    std::vector<T> sigmas;

    size_t transitions() const { return sigmas.empty() ? 0 : sigmas.size() - 1; }

    void validate() const {
        if (sigmas.size() < 2) throw ContractError("SigmaSchedule: need at least two entries");
        if (sigmas.back() != T(0)) throw ContractError("SigmaSchedule: terminal entry must be exactly 0");
        for (size_t i = 0; i + 1 < sigmas.size(); ++i)
            if (!(sigmas[i] > sigmas[i + 1])) throw ContractError("SigmaSchedule: sigmas must strictly decrease");
    }
};

// sigma_i = exp(ln smax + (i/(N-1)) (ln smin - ln smax)), i = 0..N-1, then 0.
template <typename T>
SigmaSchedule<T> exponential_sigmas(size_t n, T sigma_min, T sigma_max) {
    if (n < 2) throw ContractError("exponential_sigmas: N must be >= 2");
    if (!(T(0) < sigma_min && sigma_min < sigma_max))
        throw ContractError("exponential_sigmas: need 0 < sigma_min < sigma_max");
    SigmaSchedule<T> sch;
    sch.sigmas.resize(n + 1);
    const double lmax = std::log(static_cast<double>(sigma_max));
    const double lmin = std::log(static_cast<double>(sigma_min));
    for (size_t i = 0; i < n; ++i) {
        const double f = static_cast<double>(i) / static_cast<double>(n - 1);
        sch.sigmas[i] = static_cast<T>(std::exp(lmax + f * (lmin - lmax)));
    }
    sch.sigmas[0] = sigma_max;
    sch.sigmas[n - 1] = sigma_min;
    sch.sigmas[n] = T(0);
    return sch;
}

// First-order exponential-integrator step in t = -ln sigma:
//   a' = (s_next/s_cur) a - expm1(-h) D,  h = ln(s_cur/s_next),
// which is the convex combination r a + (1-r) D. The terminal step
// (s_next == 0) returns the denoised estimate exactly.
template <typename T>
TensorT<T> ddim_step(const TensorT<T>& a, const TensorT<T>& denoised, T sigma_cur, T sigma_next) {
    if (!(sigma_cur > sigma_next) || sigma_next < T(0))
        throw ContractError("ddim_step: need sigma_cur > sigma_next >= 0");
    if (sigma_next == T(0)) return denoised;
    const T h = std::log(static_cast<double>(sigma_cur)) - std::log(static_cast<double>(sigma_next));
    const T r = sigma_next / sigma_cur;
    const T d_coef = static_cast<T>(-std::expm1(-static_cast<double>(h)));
    return add(scale(a, r), scale(denoised, d_coef));
}

// Euler discretization of the probability-flow ODE, score expressed through
// the denoiser: a' = a + (s_next - s_cur) (a - D) / s_cur.
template <typename T>
TensorT<T> euler_ode_step(const TensorT<T>& a, const TensorT<T>& denoised, T sigma_cur, T sigma_next) {
    if (sigma_cur == T(0)) throw ContractError("euler_ode_step: sigma_cur must be positive");
    if (!(sigma_cur > sigma_next) || sigma_next < T(0))
        throw ContractError("euler_ode_step: need sigma_cur > sigma_next >= 0");
    const T c = (sigma_next - sigma_cur) / sigma_cur;
    return add(a, scale(sub(a, denoised), c));
}

enum class SamplerKind { Ddim, Euler };

// Draws a_0 ~ N(0, sigma_0^2 I) and integrates the schedule down to 0.
// `denoise` maps (chunk, sigma) to the denoised chunk. Deterministic given
// the initial draw.
template <typename T, typename D>
TensorT<T> sample_action_chunk(D&& denoise, const Shape& chunk_shape, const SigmaSchedule<T>& schedule, Rng& rng,
                               SamplerKind kind = SamplerKind::Ddim) {
    schedule.validate();
    TensorT<T> a(chunk_shape);
    for (size_t i = 0; i < a.numel(); ++i) a.data()[i] = static_cast<T>(rng.normal()) * schedule.sigmas[0];
    for (size_t i = 0; i + 1 < schedule.sigmas.size(); ++i) {
        const T s_cur = schedule.sigmas[i];
        const T s_next = schedule.sigmas[i + 1];
        TensorT<T> denoised = denoise(a, s_cur);
        a = kind == SamplerKind::Ddim ? ddim_step(a, denoised, s_cur, s_next)
                                      : (s_next == T(0) ? denoised : euler_ode_step(a, denoised, s_cur, s_next));
    }
    return a;
}

// Same integration from a caller-provided initial chunk; used by the solver
// cross-validation tests to run two samplers from identical noise.
template <typename T, typename D>
TensorT<T> integrate_schedule(D&& denoise, TensorT<T> a, const SigmaSchedule<T>& schedule,
                              SamplerKind kind = SamplerKind::Ddim) {
    schedule.validate();
    for (size_t i = 0; i + 1 < schedule.sigmas.size(); ++i) {
        const T s_cur = schedule.sigmas[i];
        const T s_next = schedule.sigmas[i + 1];
        TensorT<T> denoised = denoise(a, s_cur);
        a = kind == SamplerKind::Ddim ? ddim_step(a, denoised, s_cur, s_next)
                                      : (s_next == T(0) ? denoised : euler_ode_step(a, denoised, s_cur, s_next));
    }
    return a;
}

}  // namespace mdt
