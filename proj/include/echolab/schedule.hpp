#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "echolab/ops.hpp"

namespace echolab {

// Variance-preserving discrete noise schedule. Timesteps are 1-based:
// t in [1, T]. alpha_scale[t] = sqrt(alpha_bar_t), sigma_scale[t] =
// sqrt(1 - alpha_bar_t), so x_t = alpha_scale * x0 + sigma_scale * eps.
struct NoiseSchedule {
    int T = 0;
    double beta_start = 0.0;
    double beta_end = 0.0;
    std::string kind = "linear";
    std::vector<double> beta;         // per-step variances
    std::vector<double> alpha_bar;    // cumulative products of (1 - beta)
    std::vector<double> alpha_scale;  // sqrt(alpha_bar)
    std::vector<double> sigma_scale;  // sqrt(1 - alpha_bar)

    double beta_at(int t) const {
        check_t(t);
        return beta[static_cast<size_t>(t - 1)];
    }
    double alpha_bar_at(int t) const {
        check_t(t);
        return alpha_bar[static_cast<size_t>(t - 1)];
    }
    double alpha_at(int t) const {
        check_t(t);
        return alpha_scale[static_cast<size_t>(t - 1)];
    }
    double sigma_at(int t) const {
        check_t(t);
        return sigma_scale[static_cast<size_t>(t - 1)];
    }
    void check_t(int t) const {
        check(t >= 1 && t <= T, "timestep " + std::to_string(t) + " outside [1," +
                                    std::to_string(T) + "]");
    }
};

inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
    check(T >= 1, "make_schedule: T must be >= 1");
    check(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
          "make_schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.beta.resize(static_cast<size_t>(T));
    s.alpha_bar.resize(static_cast<size_t>(T));
    s.alpha_scale.resize(static_cast<size_t>(T));
    s.sigma_scale.resize(static_cast<size_t>(T));
    double prod = 1.0;
    for (int i = 0; i < T; i++) {
        double b = (T == 1) ? beta_start
                            : beta_start + (beta_end - beta_start) * i / (T - 1);
        s.beta[static_cast<size_t>(i)] = b;
        prod *= (1.0 - b);
        s.alpha_bar[static_cast<size_t>(i)] = prod;
        s.alpha_scale[static_cast<size_t>(i)] = std::sqrt(prod);
        s.sigma_scale[static_cast<size_t>(i)] = std::sqrt(1.0 - prod);
    }
    return s;
}

// x_t = alpha_t * x0 + sigma_t * eps
inline Var forward_diffuse(const Var& x0, int t, const Var& eps,
                           const NoiseSchedule& s) {
    s.check_t(t);
    check(x0.val().same_shape(eps.val()), "forward_diffuse: shape mismatch");
    return ops::add(ops::mul_scalar(x0, s.alpha_at(t)),
                    ops::mul_scalar(eps, s.sigma_at(t)));
}

enum class DenoisedMode { kStandard, kPaper };

// Predicts the clean image from (x_t, eps_hat).
//  kStandard: x0 = (x_t - sqrt(1-abar_t) * eps_hat) / sqrt(abar_t); exact
//             inverse of forward_diffuse when eps_hat is the true noise.
//  kPaper:    posterior-mean form using the per-step alpha_t = 1 - beta_t:
//             x0 = (x_t - beta_t * eps_hat / sqrt(1-abar_t)) / sqrt(1-beta_t)
inline Var predict_denoised(const Var& x_t, const Var& eps_hat, int t,
                            const NoiseSchedule& s,
                            DenoisedMode mode = DenoisedMode::kStandard) {
    s.check_t(t);
    check(x_t.val().same_shape(eps_hat.val()), "predict_denoised: shape mismatch");
    if (mode == DenoisedMode::kStandard) {
        return ops::mul_scalar(
            ops::sub(x_t, ops::mul_scalar(eps_hat, s.sigma_at(t))),
            1.0 / s.alpha_at(t));
    }
    double beta = s.beta_at(t);
    double coef = beta / s.sigma_at(t);
    return ops::mul_scalar(ops::sub(x_t, ops::mul_scalar(eps_hat, coef)),
                           1.0 / std::sqrt(1.0 - beta));
}

// c(t): the timestep weight on the alignment losses; decays with noise level.
inline double timestep_weight(int t, const NoiseSchedule& s) {
    return s.alpha_bar_at(t);
}

}  // namespace echolab
