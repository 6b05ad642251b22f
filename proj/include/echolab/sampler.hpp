#pragma once

#include <vector>

#include "echolab/nets.hpp"

namespace echolab {

// Anchor plan for few-step generation: strictly decreasing timesteps with
// anchors[0] = T, spaced evenly in alpha_bar rather than in t.
struct InferencePlan {
    int nfe = 1;
    std::vector<int> anchors;
};

inline InferencePlan make_plan(const NoiseSchedule& s, int nfe) {
    check(nfe >= 1 && nfe <= s.T, "make_plan: nfe out of range");
    InferencePlan plan;
    plan.nfe = nfe;
    double ab_T = s.alpha_bar_at(s.T), ab_1 = s.alpha_bar_at(1);
    int prev = s.T + 1;
    for (int i = 0; i < nfe; i++) {
        double level = ab_T + (ab_1 - ab_T) * (static_cast<double>(i) / nfe);
        // alpha_bar is strictly decreasing in t; pick the closest timestep
        int best_t = 1;
        double best_d = 1e300;
        for (int t = 1; t <= s.T; t++) {
            double d = std::fabs(s.alpha_bar_at(t) - level);
            if (d < best_d) {
                best_d = d;
                best_t = t;
            }
        }
        best_t = std::min(best_t, prev - 1);
        check(best_t >= 1, "make_plan: anchor collision");
        plan.anchors.push_back(best_t);
        prev = best_t;
    }
    plan.anchors[0] = s.T;
    return plan;
}

namespace detail {
inline Tensor randn_like_batch(int B, int C, int H, int W, Rng& rng) {
    Tensor t({B, C, H, W});
    for (size_t i = 0; i < t.size(); i++) t[i] = rng.normal();
    return t;
}
}  // namespace detail

// Few-step generation: generate, renoise to the next anchor, regenerate.
// nfe = 1 is exactly the one-step student path. Deterministic given seed.
template <class Net>
Tensor sample_few_step(const Net& net, const NoiseSchedule& s, const Var& cond,
                       int nfe, uint64_t seed) {
    check(nfe == 1 || nfe == 2 || nfe == 4, "sample_few_step: unsupported nfe");
    NoGradGuard ng;
    InferencePlan plan = make_plan(s, nfe);
    int B = cond.shape()[0];
    int C = 3, HW = 32;  // stub nets without an arch field assume the toy canvas
    if constexpr (requires { net.arch; }) {
        C = net.arch.img_channels;
        HW = net.arch.img_size;
    }
    Rng rx = derive_rng(seed, "sampler_xT");
    Var x = Var::constant(detail::randn_like_batch(B, C, HW, HW, rx));
    Var x0;
    for (int i = 0; i < nfe; i++) {
        int t = plan.anchors[static_cast<size_t>(i)];
        Var eps_hat = net(x, t, cond);
        x0 = predict_denoised(x, eps_hat, t, s, DenoisedMode::kStandard);
        if (i + 1 < nfe) {
            int t_next = plan.anchors[static_cast<size_t>(i + 1)];
            Rng re = derive_rng(seed, "sampler_renoise", static_cast<uint64_t>(i));
            Var eps = Var::constant(detail::randn_like_batch(
                x0.shape()[0], x0.shape()[1], x0.shape()[2], x0.shape()[3], re));
            x = forward_diffuse(x0, t_next, eps, s);
        }
    }
    return x0.val();
}

// One-step generation from pure noise: exactly one denoiser evaluation.
template <class Net>
Tensor sample_student(const Net& net, const NoiseSchedule& s, const Var& cond,
                      uint64_t seed) {
    return sample_few_step(net, s, cond, 1, seed);
}

// Multi-step ancestral sampling (DDIM form with eta = 1, which is the DDPM
// ancestral sampler on the chosen sub-sequence). n_steps = T walks every step.
template <class Net>
Tensor sample_teacher(const Net& net, const NoiseSchedule& s, const Var& cond,
                      int n_steps, uint64_t seed) {
    check(n_steps >= 1 && n_steps <= s.T, "sample_teacher: n_steps out of range");
    NoGradGuard ng;
    int B = cond.shape()[0];
    int C = 3, HW = 32;
    if constexpr (requires { net.arch; }) {
        C = net.arch.img_channels;
        HW = net.arch.img_size;
    }
    // evenly spaced, strictly decreasing timesteps ending at 1
    std::vector<int> ts;
    for (int i = 0; i < n_steps; i++) {
        double f = n_steps == 1 ? 0.0 : static_cast<double>(i) / (n_steps - 1);
        int t = static_cast<int>(std::lround(s.T - f * (s.T - 1)));
        if (ts.empty() || t < ts.back()) ts.push_back(t);
    }
    Rng rx = derive_rng(seed, "sampler_xT");
    Var x = Var::constant(detail::randn_like_batch(B, C, HW, HW, rx));
    Var x0;
    for (size_t i = 0; i < ts.size(); i++) {
        int t = ts[i];
        Var eps_hat = net(x, t, cond);
        x0 = predict_denoised(x, eps_hat, t, s, DenoisedMode::kStandard);
        if (i + 1 == ts.size()) break;
        int tp = ts[i + 1];
        double ab_n = s.alpha_bar_at(t), ab_p = s.alpha_bar_at(tp);
        double sig = std::sqrt((1.0 - ab_p) / (1.0 - ab_n)) *
                     std::sqrt(std::max(0.0, 1.0 - ab_n / ab_p));
        double dir = std::sqrt(std::max(0.0, 1.0 - ab_p - sig * sig));
        Rng rz = derive_rng(seed, "sampler_z", i);
        Var z = Var::constant(detail::randn_like_batch(B, C, HW, HW, rz));
        x = ops::add(ops::add(ops::mul_scalar(x0, std::sqrt(ab_p)),
                              ops::mul_scalar(eps_hat, dir)),
                     ops::mul_scalar(z, sig));
    }
    return x0.val();
}

}  // namespace echolab
