#pragma once

// Noise schedule, forward noising, epsilon loss, and the ancestral sampler.
// The sampler is generic over the denoiser: it takes a callback mapping
// (x_t, t) to predicted noise, so the network stack stays decoupled.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "promptvid/errors.hpp"
#include "promptvid/rng.hpp"
#include "promptvid/tensor.hpp"

namespace promptvid {

struct NoiseSchedule {
    int t_steps = 0;
    std::vector<double> beta;      // beta[i] is for t = i+1
    std::vector<double> alpha_bar; // alpha_bar[i] is for t = i+1

    double beta_at(int t) const {
        check_t(t);
        return beta[static_cast<std::size_t>(t - 1)];
    }
    double alpha_bar_at(int t) const {
        check_t(t);
        return alpha_bar[static_cast<std::size_t>(t - 1)];
    }
    // alpha_bar extended with the t = 0 convention of exactly 1.
    double alpha_bar_before(int t) const { return t == 0 ? 1.0 : alpha_bar_at(t); }

    void check_t(int t) const {
        if (t < 1 || t > t_steps) {
            fail(ErrorKind::schedule, "timestep " + std::to_string(t) + " outside [1, " +
                                          std::to_string(t_steps) + "]");
        }
    }
};

// Linear beta interpolation; cumulative products kept in 64-bit.
inline NoiseSchedule build_schedule(int t_steps, double beta_start, double beta_end) {
    if (t_steps < 1) fail(ErrorKind::contract, "schedule needs at least one timestep");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
        fail(ErrorKind::contract, "beta bounds must satisfy 0 < start <= end < 1");
    }
    NoiseSchedule s;
    s.t_steps = t_steps;
    s.beta.resize(static_cast<std::size_t>(t_steps));
    s.alpha_bar.resize(static_cast<std::size_t>(t_steps));
    double prod = 1.0;
    for (int t = 1; t <= t_steps; ++t) {
        const double frac = t_steps == 1 ? 0.0 : static_cast<double>(t - 1) / (t_steps - 1);
        const double b = beta_start + (beta_end - beta_start) * frac;
        prod *= (1.0 - b);
        s.beta[static_cast<std::size_t>(t - 1)] = b;
        s.alpha_bar[static_cast<std::size_t>(t - 1)] = prod;
    }
    return s;
}

// x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps
template <class T>
Tensor<T> forward_noise(const NoiseSchedule& sched, const Tensor<T>& x0, int t, const Tensor<T>& eps) {
    if (x0.shape() != eps.shape()) {
        fail(ErrorKind::dimension, "forward_noise: x0 " + to_string(x0.shape()) + " vs eps " +
                                       to_string(eps.shape()));
    }
    const double ab = sched.alpha_bar_at(t);
    return add(mul_scalar(x0, std::sqrt(ab)), mul_scalar(eps, std::sqrt(1.0 - ab)));
}

template <class T>
Tensor<T> epsilon_loss(const Tensor<T>& pred_eps, const Tensor<T>& true_eps) {
    return mse(pred_eps, true_eps);
}

// Descending timestep subsequence of the given length; always starts at
// t_steps and is strictly decreasing with all entries >= 1.
inline std::vector<int> sample_timesteps(int t_steps, int steps) {
    if (steps < 0) fail(ErrorKind::contract, "steps must be >= 0");
    if (steps > t_steps) {
        fail(ErrorKind::contract, "steps = " + std::to_string(steps) + " exceeds schedule length " +
                                      std::to_string(t_steps));
    }
    std::vector<int> ts;
    int prev = t_steps + 1;
    for (int i = 0; i < steps; ++i) {
        int t = static_cast<int>(std::llround(static_cast<double>(steps - i) * t_steps /
                                              static_cast<double>(steps)));
        t = std::min(t, prev - 1);
        if (t < 1) break;
        ts.push_back(t);
        prev = t;
    }
    return ts;
}

// The seeded noise the sampler starts from; exposed so callers can reproduce
// the steps = 0 case exactly.
template <class T>
Tensor<T> initial_noise(Shape shape, std::uint64_t seed) {
    RngStream rng(seed);
    RngStream init = rng.split(fnv1a("sample/init"));
    return Tensor<T>::randn(std::move(shape), init);
}

// Ancestral denoising over a strided timestep subsequence. Each update uses
// the exact forward-process posterior between consecutive kept timesteps:
//   x0_hat = (x_t - sqrt(1-abar_t) * eps_hat) / sqrt(abar_t)
//   mu     = c0 * x0_hat + ct * x_t,  sigma^2 as below
// With t_prev = 0 this reduces to x = x0_hat, so a stub model that predicts
// the true eps inverts forward_noise algebraically.
template <class T>
Tensor<T> sample_video(const NoiseSchedule& sched,
                       const std::function<Tensor<T>(const Tensor<T>&, int)>& model, Shape latent_shape,
                       std::uint64_t seed, int steps) {
    Tensor<T> x = initial_noise<T>(latent_shape, seed);
    const std::vector<int> ts = sample_timesteps(sched.t_steps, steps);
    RngStream rng(seed);
    RngStream step_root = rng.split(fnv1a("sample/step"));
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i];
        const int t_prev = (i + 1 < ts.size()) ? ts[i + 1] : 0;
        Tensor<T> eps_hat = model(x, t);
        if (eps_hat.shape() != x.shape()) {
            fail(ErrorKind::dimension, "model output " + to_string(eps_hat.shape()) +
                                           " does not match latent " + to_string(x.shape()));
        }
        const double ab_t = sched.alpha_bar_at(t);
        const double ab_prev = sched.alpha_bar_before(t_prev);
        const double a_eff = ab_t / ab_prev;
        auto x0_hat = mul_scalar(sub(x, mul_scalar(eps_hat, std::sqrt(1.0 - ab_t))),
                                 1.0 / std::sqrt(ab_t));
        const double c0 = std::sqrt(ab_prev) * (1.0 - a_eff) / (1.0 - ab_t);
        const double ct = std::sqrt(a_eff) * (1.0 - ab_prev) / (1.0 - ab_t);
        Tensor<T> next = add(mul_scalar(x0_hat, c0), mul_scalar(x, ct));
        if (t_prev > 0) {
            const double sigma2 = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - a_eff);
            RngStream zs = step_root.split(static_cast<std::uint64_t>(t));
            Tensor<T> z = Tensor<T>::randn(x.shape(), zs);
            next = add(next, mul_scalar(z, std::sqrt(sigma2)));
        }
        // detach so the loop never accumulates a tape across steps
        x = next.detach();
    }
    return x;
}

} // namespace promptvid
