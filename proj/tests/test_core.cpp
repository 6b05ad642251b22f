// tensor / autograd / schedule tests

#include <gtest/gtest.h>

#include "echolab/ops.hpp"
#include "echolab/schedule.hpp"

using namespace echolab;
using namespace echolab::ops;

namespace {

// central-difference gradient check against the analytic gradient of a
// scalar-valued function of one leaf
template <class F>
double max_rel_grad_error(Var& leaf, F loss_fn, double h = 1e-5) {
    Var loss = loss_fn();
    loss.backward();
    Tensor analytic = leaf.grad().clone();
    double worst = 0.0;
    for (size_t i = 0; i < leaf.val().size(); i++) {
        double orig = leaf.val()[i];
        leaf.mutable_val()[i] = orig + h;
        double fp = loss_fn().val().item();
        leaf.mutable_val()[i] = orig - h;
        double fm = loss_fn().val().item();
        leaf.mutable_val()[i] = orig;
        double fd = (fp - fm) / (2 * h);
        double denom = std::max({std::fabs(fd), std::fabs(analytic[i]), 1e-8});
        worst = std::max(worst, std::fabs(fd - analytic[i]) / denom);
    }
    leaf.zero_grad();
    return worst;
}

}  // namespace

TEST(Schedule, SingleStepProduct) {
    auto s = make_schedule(1, 0.1, 0.1);
    EXPECT_NEAR(s.alpha_bar_at(1), 0.9, 1e-15);
    EXPECT_NEAR(s.alpha_at(1), std::sqrt(0.9), 1e-15);
    EXPECT_NEAR(s.sigma_at(1), std::sqrt(0.1), 1e-15);
}

TEST(Schedule, VariancePreserving) {
    for (int T : {1, 7, 200, 1000}) {
        auto s = make_schedule(T, 1e-4, 0.02);
        double worst = 0.0;
        for (int t = 1; t <= T; t++) {
            double a = s.alpha_at(t), sg = s.sigma_at(t);
            worst = std::max(worst, std::fabs(a * a + sg * sg - 1.0));
        }
        EXPECT_LT(worst, 1e-10);
    }
}

TEST(Schedule, CumulativeProductOracle) {
    // brute-force product loop in plain scalar code
    const int T = 1000;
    const double b0 = 1e-4, b1 = 0.02;
    double prod = 1.0;
    std::vector<double> oracle;
    for (int i = 0; i < T; i++) {
        double beta = b0 + (b1 - b0) * i / (T - 1);
        prod *= (1.0 - beta);
        oracle.push_back(prod);
    }
    auto s = make_schedule(T, b0, b1);
    for (int t = 1; t <= T; t++)
        ASSERT_NEAR(s.alpha_bar_at(t), oracle[static_cast<size_t>(t - 1)], 1e-14);
    EXPECT_NEAR(timestep_weight(T, s), oracle.back(), 1e-14);
}

TEST(Schedule, AlphaBarStrictlyDecreasing) {
    auto s = make_schedule(500, 1e-4, 0.02);
    EXPECT_NEAR(s.alpha_bar_at(1), 1.0 - s.beta_at(1), 1e-15);
    for (int t = 2; t <= 500; t++) {
        EXPECT_LT(s.alpha_bar_at(t), s.alpha_bar_at(t - 1));
        EXPECT_GT(s.alpha_bar_at(t), 0.0);
        EXPECT_LT(s.alpha_bar_at(t), 1.0);
    }
}

TEST(Schedule, TimestepWeightContract) {
    auto s = make_schedule(64, 1e-3, 0.05);
    EXPECT_NEAR(timestep_weight(1, s), 1.0 - s.beta_at(1), 1e-15);
    for (int t = 2; t <= 64; t++)
        EXPECT_LT(timestep_weight(t, s), timestep_weight(t - 1, s));
    EXPECT_THROW(timestep_weight(0, s), ParamError);
    EXPECT_THROW(timestep_weight(65, s), ParamError);
}

TEST(Schedule, InvalidParams) {
    EXPECT_THROW(make_schedule(0, 1e-4, 0.02), ParamError);
    EXPECT_THROW(make_schedule(10, 0.0, 0.02), ParamError);
    EXPECT_THROW(make_schedule(10, 0.05, 0.02), ParamError);
    EXPECT_THROW(make_schedule(10, 0.5, 1.0), ParamError);
}

TEST(ForwardDiffuse, ZeroCases) {
    auto s = make_schedule(100, 1e-4, 0.02);
    Rng rng(7);
    Var x0 = Var::constant(Tensor::randn({2, 3, 4, 4}, rng));
    Var zero = Var::constant(Tensor::zeros({2, 3, 4, 4}));
    int t = 37;
    Tensor a = forward_diffuse(x0, t, zero, s).val();
    Tensor b = forward_diffuse(zero, t, x0, s).val();
    for (size_t i = 0; i < a.size(); i++) {
        EXPECT_DOUBLE_EQ(a[i], s.alpha_at(t) * x0.val()[i]);
        EXPECT_DOUBLE_EQ(b[i], s.sigma_at(t) * x0.val()[i]);
    }
    Var bad = Var::constant(Tensor::zeros({2, 3, 4, 5}));
    EXPECT_THROW(forward_diffuse(x0, t, bad, s), ParamError);
    EXPECT_THROW(forward_diffuse(x0, 0, zero, s), ParamError);
}

TEST(ForwardDiffuse, AlgebraicInversion) {
    auto s = make_schedule(200, 1e-3, 0.05);
    Rng rng(11);
    Var x0 = Var::constant(Tensor::randn({2, 3, 8, 8}, rng));
    for (int t : {1, 50, 113, 200}) {
        Var eps = Var::constant(Tensor::randn({2, 3, 8, 8}, rng));
        Var xt = forward_diffuse(x0, t, eps, s);
        // (x_t - sigma_t eps) / alpha_t recovers x0
        Tensor rec = predict_denoised(xt, eps, t, s, DenoisedMode::kStandard).val();
        EXPECT_LT(max_abs_diff(rec, x0.val()), 1e-6);
    }
}

TEST(PredictDenoised, PaperModeZeroNoise) {
    auto s = make_schedule(50, 1e-3, 0.04);
    Rng rng(3);
    Var xt = Var::constant(Tensor::randn({1, 3, 4, 4}, rng));
    Var zero = Var::constant(Tensor::zeros({1, 3, 4, 4}));
    int t = 25;
    Tensor out = predict_denoised(xt, zero, t, s, DenoisedMode::kPaper).val();
    double beta = s.beta_at(t);
    for (size_t i = 0; i < out.size(); i++)
        EXPECT_NEAR(out[i], xt.val()[i] / std::sqrt(1.0 - beta), 1e-12);
}

TEST(PredictDenoised, ScalarFormulaOracle) {
    auto s = make_schedule(100, 1e-4, 0.02);
    int t = 50;
    double xt = 1.0, eh = 0.5;
    // scalar reference evaluation of each printed formula
    double abar = s.alpha_bar_at(t);
    double beta = s.beta_at(t);
    double std_ref = (xt - std::sqrt(1.0 - abar) * eh) / std::sqrt(abar);
    double paper_ref = (xt - (beta * eh) / std::sqrt(1.0 - abar)) / std::sqrt(1.0 - beta);
    Var xtv = Var::constant(Tensor::scalar(xt).reshaped({1, 1, 1, 1}));
    Var ehv = Var::constant(Tensor::scalar(eh).reshaped({1, 1, 1, 1}));
    EXPECT_NEAR(predict_denoised(xtv, ehv, t, s, DenoisedMode::kStandard).val()[0],
                std_ref, 1e-12);
    EXPECT_NEAR(predict_denoised(xtv, ehv, t, s, DenoisedMode::kPaper).val()[0],
                paper_ref, 1e-12);
    EXPECT_NE(std_ref, paper_ref);
}

TEST(Autograd, ElementwiseAndReductionGradients) {
    Rng rng(21);
    Var x = Var::leaf(Tensor::randn({3, 5}, rng), true);
    auto f1 = [&] {
        x.zero_grad();
        return mean_all(mul(silu_v(x), sigmoid_v(x)));
    };
    EXPECT_LT(max_rel_grad_error(x, f1), 1e-4);
    auto f2 = [&] {
        x.zero_grad();
        return mean_all(broadcast_last(sum_last(mul(x, x)), 5));
    };
    EXPECT_LT(max_rel_grad_error(x, f2), 1e-4);
    auto f3 = [&] {
        x.zero_grad();
        return mean_all(mul(softmax_last(x), x));
    };
    EXPECT_LT(max_rel_grad_error(x, f3), 1e-4);
}

TEST(Autograd, ConvAndNormGradients) {
    Rng rng(22);
    Var x = Var::leaf(Tensor::randn({2, 3, 6, 6}, rng), true);
    Var w = Var::leaf(Tensor::randn({4, 3, 3, 3}, rng, 0.3), true);
    Var b = Var::leaf(Tensor::randn({4}, rng, 0.1), true);
    Var g = Var::leaf(Tensor::full({4}, 1.1), true);
    Var be = Var::leaf(Tensor::randn({4}, rng, 0.1), true);
    auto f = [&] {
        x.zero_grad();
        w.zero_grad();
        b.zero_grad();
        g.zero_grad();
        be.zero_grad();
        Var y = group_norm(conv2d(x, w, b, 2, 1), g, be, 2);
        return mean_all(mul(y, y));
    };
    EXPECT_LT(max_rel_grad_error(x, f), 1e-4);
    EXPECT_LT(max_rel_grad_error(w, f), 1e-4);
    EXPECT_LT(max_rel_grad_error(g, f), 1e-5);
    EXPECT_LT(max_rel_grad_error(be, f), 1e-5);
}

TEST(Autograd, AttentionChainGradients) {
    Rng rng(23);
    Var q = Var::leaf(Tensor::randn({2, 4, 6}, rng), true);
    Var k = Var::leaf(Tensor::randn({2, 3, 6}, rng), true);
    Var v = Var::leaf(Tensor::randn({2, 3, 6}, rng), true);
    auto f = [&] {
        q.zero_grad();
        k.zero_grad();
        v.zero_grad();
        Var attn = softmax_last(mul_scalar(bmm_nt(q, k), 1.0 / std::sqrt(6.0)));
        Var o = bmm_nn(attn, v);
        return mean_all(mul(o, o));
    };
    EXPECT_LT(max_rel_grad_error(q, f), 1e-4);
    EXPECT_LT(max_rel_grad_error(k, f), 1e-4);
    EXPECT_LT(max_rel_grad_error(v, f), 1e-5);
}

TEST(Autograd, DetachCutsGradient) {
    Rng rng(31);
    Var x = Var::leaf(Tensor::randn({4}, rng), true);
    Var y = mul(x.detach(), x);
    mean_all(y).backward();
    // d/dx of detach(x)*x is detach(x), not 2x
    for (size_t i = 0; i < 4; i++)
        EXPECT_NEAR(x.grad()[i], x.val()[i] / 4.0, 1e-12);
}

TEST(Autograd, NoGradModeBuildsNoGraph) {
    Rng rng(32);
    Var x = Var::leaf(Tensor::randn({4}, rng), true);
    NoGradGuard ng;
    Var y = mul(x, x);
    EXPECT_FALSE(y.requires_grad());
}

TEST(Autograd, GradAccumulatesAcrossUses) {
    Var x = Var::leaf(Tensor::scalar(3.0), true);
    Var y = add(mul(x, x), x);  // x^2 + x -> dy/dx = 2x + 1 = 7
    y.backward();
    EXPECT_NEAR(x.grad()[0], 7.0, 1e-12);
}

TEST(Rng, DeterministicStreams) {
    Rng a = derive_rng(42, "stream", 7);
    Rng b = derive_rng(42, "stream", 7);
    for (int i = 0; i < 100; i++) ASSERT_EQ(a.next_u64(), b.next_u64());
    Rng c = derive_rng(42, "stream", 8);
    EXPECT_NE(derive_rng(42, "stream", 7).next_u64(), c.next_u64());
}
