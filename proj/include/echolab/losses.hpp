#pragma once

#include <vector>

#include "echolab/nets.hpp"
#include "echolab/schedule.hpp"

namespace echolab {

// Defaults: the multi-scale SWD term runs at 0.1, everything else at 1.0.
struct LossWeights {
    double lambda_id = 1.0;
    double lambda_mse = 1.0;
    double lambda_ms = 0.1;
    std::vector<double> lambda_k = {1.0, 1.0, 1.0};
};

struct SwdConfig {
    int num_scales = 3;
    int num_projections = 64;
    uint64_t seed = 0;
};

// Counters surfaced into per-iteration history records.
struct LossCounters {
    long clamp_events = 0;
    long degenerate_norms = 0;
};

constexpr double kScoreClampEps = 1e-6;
constexpr double kNormEps = 1e-8;

// noise prediction loss: mean squared error over all elements
inline Var loss_rec(const Var& eps, const Var& eps_hat) {
    check(eps.val().same_shape(eps_hat.val()), "loss_rec: shape mismatch");
    Var d = ops::sub(eps, eps_hat);
    return ops::mean_all(ops::mul(d, d));
}

// clean-image mean squared error between student and teacher predictions
inline Var loss_mse(const Var& x_st, const Var& x_tc) {
    check(x_st.val().same_shape(x_tc.val()), "loss_mse: shape mismatch");
    Var d = ops::sub(x_st, x_tc);
    return ops::mean_all(ops::mul(d, d));
}

// feature-space core of the identity loss: mean over rows of 1 - cos
inline Var loss_id_from_features(const Var& fs, const Var& ft) {
    Var cos = cosine_rows(fs, ft, kNormEps);
    return ops::mean_all(ops::add_scalar(ops::neg(cos), 1.0));
}

// identity-feature loss: 1 - cos(f(x_st), f(x_tc)), batch mean.
// Near-zero feature norms fall back to an epsilon-guarded denominator and
// are counted as degeneracies.
inline Var loss_id(const Var& x_st, const Var& x_tc, const IdentityEmbedder& embedder,
                   LossCounters* counters = nullptr) {
    check(x_st.val().same_shape(x_tc.val()), "loss_id: shape mismatch");
    Var fs = identity_features(embedder, x_st);
    Var ft = identity_features(embedder, x_tc);
    if (counters) {
        auto count_degenerate = [&](const Var& f) {
            int B = f.shape()[0], D = f.shape()[1];
            for (int i = 0; i < B; i++) {
                double n2 = 0.0;
                for (int j = 0; j < D; j++) {
                    double v = f.val()[static_cast<size_t>(i) * D + j];
                    n2 += v * v;
                }
                if (n2 < kNormEps * kNormEps) counters->degenerate_norms++;
            }
        };
        count_degenerate(fs);
        count_degenerate(ft);
    }
    return loss_id_from_features(fs, ft);
}

// Multi-scale sliced Wasserstein distance. Each scale average-pools both
// inputs once more; pixels are treated as channel-space points, projected
// onto seeded random unit directions, and compared via the squared 1-D
// 2-Wasserstein distance of the projections. Batch counts may differ (the
// quantile integral handles it), per-image shapes must match.
inline Var ms_swd(const Var& x, const Var& y, const SwdConfig& cfg) {
    check(x.shape().size() == 4 && y.shape().size() == 4, "ms_swd: expected 4-d");
    check(x.shape()[1] == y.shape()[1] && x.shape()[2] == y.shape()[2] &&
              x.shape()[3] == y.shape()[3],
          "ms_swd: image shape mismatch");
    check(cfg.num_projections >= 1, "ms_swd: num_projections must be >= 1");
    check(cfg.num_scales >= 1, "ms_swd: num_scales must be >= 1");
    int C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    int div = 1 << (cfg.num_scales - 1);
    check(H % div == 0 && W % div == 0,
          "ms_swd: spatial dims not divisible by 2^(num_scales-1)");

    Rng rng = derive_rng(cfg.seed, "swd_dirs");
    Var xs = x, ys = y;
    Var total;
    for (int s = 0; s < cfg.num_scales; s++) {
        if (s > 0) {
            xs = ops::avg_pool2x(xs);
            ys = ops::avg_pool2x(ys);
        }
        // unit projection directions in channel space
        Tensor dirs({C, cfg.num_projections});
        for (int p = 0; p < cfg.num_projections; p++) {
            double norm2 = 0.0;
            std::vector<double> col(static_cast<size_t>(C));
            for (int c = 0; c < C; c++) {
                col[static_cast<size_t>(c)] = rng.normal();
                norm2 += col[static_cast<size_t>(c)] * col[static_cast<size_t>(c)];
            }
            double inv = 1.0 / std::sqrt(std::max(norm2, 1e-300));
            for (int c = 0; c < C; c++)
                dirs[static_cast<size_t>(c) * cfg.num_projections + p] =
                    col[static_cast<size_t>(c)] * inv;
        }
        Var dv = Var::constant(dirs);
        int Nx = xs.shape()[0] * xs.shape()[2] * xs.shape()[3];
        int Ny = ys.shape()[0] * ys.shape()[2] * ys.shape()[3];
        Var xp = ops::matmul(ops::reshape_v(ops::nchw_to_tokens(xs), {Nx, C}), dv);
        Var yp = ops::matmul(ops::reshape_v(ops::nchw_to_tokens(ys), {Ny, C}), dv);
        Var term = ops::mean_all(ops::sliced_w2_cols(xp, yp));
        total = total.defined() ? ops::add(total, term) : term;
    }
    return ops::mul_scalar(total, 1.0 / cfg.num_scales);
}

// Eq. 5: c(t) * [ lid*L_id + lmse*L_mse + lms*L_swd ]. The target enters
// detached; gradients never reach whatever produced it.
inline Var loss_align(const Var& x_st, const Var& x_tc_detached, int t,
                      const NoiseSchedule& schedule, const LossWeights& w,
                      const IdentityEmbedder& embedder, const SwdConfig& swd_cfg,
                      LossCounters* counters = nullptr) {
    Var target = x_tc_detached.detach();
    Var acc = Var::constant(Tensor::scalar(0.0));
    if (w.lambda_id != 0.0)
        acc = ops::add(acc, ops::mul_scalar(loss_id(x_st, target, embedder, counters),
                                            w.lambda_id));
    if (w.lambda_mse != 0.0)
        acc = ops::add(acc, ops::mul_scalar(loss_mse(x_st, target), w.lambda_mse));
    if (w.lambda_ms != 0.0)
        acc = ops::add(acc, ops::mul_scalar(ms_swd(x_st, target, swd_cfg), w.lambda_ms));
    return ops::mul_scalar(acc, timestep_weight(t, schedule));
}

namespace detail {
inline Var clamped_scores(const Var& s, LossCounters* counters) {
    if (counters) {
        const Tensor& v = s.val();
        for (size_t i = 0; i < v.size(); i++)
            if (v[i] < kScoreClampEps || v[i] > 1.0 - kScoreClampEps)
                counters->clamp_events++;
    }
    return ops::clamp_v(s, kScoreClampEps, 1.0 - kScoreClampEps);
}
}  // namespace detail

// Eq. 6: sum_k lambda_k * mean(-log D_k(x0_st))
inline Var gan_generator_loss(const std::vector<Var>& fake_scores,
                              const std::vector<double>& lambda_k,
                              LossCounters* counters = nullptr) {
    check(!fake_scores.empty(), "gan_generator_loss: no critics");
    check(lambda_k.size() >= fake_scores.size(),
          "gan_generator_loss: missing lambda_k entries");
    Var acc = Var::constant(Tensor::scalar(0.0));
    for (size_t k = 0; k < fake_scores.size(); k++) {
        if (lambda_k[k] == 0.0) continue;
        Var term = ops::neg(ops::mean_all(
            ops::log_v(detail::clamped_scores(fake_scores[k], counters))));
        acc = ops::add(acc, ops::mul_scalar(term, lambda_k[k]));
    }
    return acc;
}

// Eq. 7: -sum_k [ mean log D_k(x0_r) + mean log(1 - D_k(x0_st)) ]
// Caller detaches the generated images before scoring.
inline Var gan_discriminator_loss(const std::vector<Var>& real_scores,
                                  const std::vector<Var>& fake_scores,
                                  LossCounters* counters = nullptr) {
    check(real_scores.size() == fake_scores.size() && !real_scores.empty(),
          "gan_discriminator_loss: score list mismatch");
    Var acc = Var::constant(Tensor::scalar(0.0));
    for (size_t k = 0; k < real_scores.size(); k++) {
        Var lr = ops::mean_all(ops::log_v(detail::clamped_scores(real_scores[k], counters)));
        Var lf = ops::mean_all(ops::log_v(ops::add_scalar(
            ops::neg(detail::clamped_scores(fake_scores[k], counters)), 1.0)));
        acc = ops::add(acc, ops::add(lr, lf));
    }
    return ops::neg(acc);
}

}  // namespace echolab
