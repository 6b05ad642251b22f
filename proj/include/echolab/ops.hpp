#pragma once

#define EIGEN_DONT_PARALLELIZE 1
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <vector>

#include "echolab/autograd.hpp"

namespace echolab {
namespace ops {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

inline EMap emap(Tensor& t, int rows, int cols) { return EMap(t.data(), rows, cols); }
inline ECMap emap(const Tensor& t, int rows, int cols) {
    return ECMap(t.data(), rows, cols);
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
    check(a.val().same_shape(b.val()),
          "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = a.val().clone();
    const double* pb = b.val().data();
    double* po = out.data();
    for (size_t i = 0; i < out.size(); i++) po[i] += pb[i];
    return make_op(std::move(out), {a, b}, [](GradNode& n) {
        for (auto& p : n.parents)
            if (p->requires_grad) p->accumulate(n.grad);
    });
}

inline Var sub(const Var& a, const Var& b) {
    check(a.val().same_shape(b.val()),
          "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = a.val().clone();
    const double* pb = b.val().data();
    double* po = out.data();
    for (size_t i = 0; i < out.size(); i++) po[i] -= pb[i];
    return make_op(std::move(out), {a, b}, [](GradNode& n) {
        if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            double* d = n.parents[1]->grad.data();
            const double* g = n.grad.data();
            for (size_t i = 0; i < n.grad.size(); i++) d[i] -= g[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    check(a.val().same_shape(b.val()), "mul: shape mismatch");
    Tensor out = a.val().clone();
    const double* pb = b.val().data();
    double* po = out.data();
    for (size_t i = 0; i < out.size(); i++) po[i] *= pb[i];
    Tensor av = a.val(), bv = b.val();
    return make_op(std::move(out), {a, b}, [av, bv](GradNode& n) {
        const double* g = n.grad.data();
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            double* d = n.parents[0]->grad.data();
            const double* pb = bv.data();
            for (size_t i = 0; i < n.grad.size(); i++) d[i] += g[i] * pb[i];
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            double* d = n.parents[1]->grad.data();
            const double* pa = av.data();
            for (size_t i = 0; i < n.grad.size(); i++) d[i] += g[i] * pa[i];
        }
    });
}

inline Var mul_scalar(const Var& a, double c) {
    Tensor out = a.val().clone();
    double* po = out.data();
    for (size_t i = 0; i < out.size(); i++) po[i] *= c;
    return make_op(std::move(out), {a}, [c](GradNode& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        double* d = n.parents[0]->grad.data();
        const double* g = n.grad.data();
        for (size_t i = 0; i < n.grad.size(); i++) d[i] += g[i] * c;
    });
}

inline Var add_scalar(const Var& a, double c) {
    Tensor out = a.val().clone();
    double* po = out.data();
    for (size_t i = 0; i < out.size(); i++) po[i] += c;
    return make_op(std::move(out), {a}, [](GradNode& n) {
        if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
    });
}

// generic unary op helper: fwd(x) and dfdx expressed via (x, y)
template <class F, class DF>
inline Var unary(const Var& a, F fwd, DF dfdx) {
    Tensor out(a.shape());
    const double* px = a.val().data();
    double* po = out.data();
    for (size_t i = 0; i < out.size(); i++) po[i] = fwd(px[i]);
    Tensor xv = a.val(), yv = out;
    return make_op(std::move(out), {a}, [xv, yv, dfdx](GradNode& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        double* d = n.parents[0]->grad.data();
        const double* g = n.grad.data();
        const double* px = xv.data();
        const double* py = yv.data();
        for (size_t i = 0; i < n.grad.size(); i++) d[i] += g[i] * dfdx(px[i], py[i]);
    });
}

inline Var neg(const Var& a) { return mul_scalar(a, -1.0); }
inline Var exp_v(const Var& a) {
    return unary(a, [](double x) { return std::exp(x); },
                 [](double, double y) { return y; });
}
inline Var log_v(const Var& a) {
    return unary(a, [](double x) { return std::log(x); },
                 [](double x, double) { return 1.0 / x; });
}
inline Var sqrt_v(const Var& a) {
    return unary(a, [](double x) { return std::sqrt(x); },
                 [](double, double y) { return 0.5 / y; });
}
inline Var sigmoid_v(const Var& a) {
    return unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                 [](double, double y) { return y * (1.0 - y); });
}
inline Var silu_v(const Var& a) {
    return unary(a,
                 [](double x) { return x / (1.0 + std::exp(-x)); },
                 [](double x, double) {
                     double s = 1.0 / (1.0 + std::exp(-x));
                     return s * (1.0 + x * (1.0 - s));
                 });
}
inline Var leaky_relu_v(const Var& a, double slope = 0.2) {
    return unary(a, [slope](double x) { return x > 0 ? x : slope * x; },
                 [slope](double x, double) { return x > 0 ? 1.0 : slope; });
}
inline Var clamp_v(const Var& a, double lo, double hi) {
    return unary(a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
                 [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}
inline Var recip_v(const Var& a) {
    return unary(a, [](double x) { return 1.0 / x; },
                 [](double x, double) { return -1.0 / (x * x); });
}

// ---------------------------------------------------------------------------
// reductions / broadcasts
// ---------------------------------------------------------------------------

inline Var sum_all(const Var& a) {
    double s = 0.0;
    const double* p = a.val().data();
    for (size_t i = 0; i < a.val().size(); i++) s += p[i];
    return make_op(Tensor::scalar(s), {a}, [](GradNode& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        double g = n.grad[0];
        double* d = n.parents[0]->grad.data();
        for (size_t i = 0; i < n.parents[0]->grad.size(); i++) d[i] += g;
    });
}

inline Var mean_all(const Var& a) {
    return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.val().size()));
}

// (..., D) -> (..., 1)
inline Var sum_last(const Var& a) {
    const Shape& s = a.shape();
    int D = s.back();
    size_t R = a.val().size() / D;
    Shape os = s;
    os.back() = 1;
    Tensor out(os);
    const double* px = a.val().data();
    for (size_t r = 0; r < R; r++) {
        double acc = 0.0;
        for (int j = 0; j < D; j++) acc += px[r * D + j];
        out[r] = acc;
    }
    return make_op(std::move(out), {a}, [D, R](GradNode& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        double* d = n.parents[0]->grad.data();
        const double* g = n.grad.data();
        for (size_t r = 0; r < R; r++)
            for (int j = 0; j < D; j++) d[r * D + j] += g[r];
    });
}

// (..., 1) -> (..., D)
inline Var broadcast_last(const Var& a, int D) {
    const Shape& s = a.shape();
    check(s.back() == 1, "broadcast_last expects trailing dim 1");
    size_t R = a.val().size();
    Shape os = s;
    os.back() = D;
    Tensor out(os);
    const double* px = a.val().data();
    for (size_t r = 0; r < R; r++)
        for (int j = 0; j < D; j++) out[r * D + j] = px[r];
    return make_op(std::move(out), {a}, [D, R](GradNode& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        double* d = n.parents[0]->grad.data();
        const double* g = n.grad.data();
        for (size_t r = 0; r < R; r++) {
            double acc = 0.0;
            for (int j = 0; j < D; j++) acc += g[r * D + j];
            d[r] += acc;
        }
    });
}

inline Var reshape_v(const Var& a, Shape shape) {
    Tensor out = a.val().reshaped(shape);
    Shape old = a.shape();
    return make_op(std::move(out), {a}, [old](GradNode& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->accumulate(n.grad.reshaped(old));
    });
}

// softmax over the last axis
inline Var softmax_last(const Var& a) {
    const Shape& s = a.shape();
    int D = s.back();
    size_t R = a.val().size() / D;
    Tensor out(s);
    const double* px = a.val().data();
    double* po = out.data();
    for (size_t r = 0; r < R; r++) {
        const double* row = px + r * D;
        double m = row[0];
        for (int j = 1; j < D; j++) m = std::max(m, row[j]);
        double z = 0.0;
        for (int j = 0; j < D; j++) {
            double e = std::exp(row[j] - m);
            po[r * D + j] = e;
            z += e;
        }
        for (int j = 0; j < D; j++) po[r * D + j] /= z;
    }
    Tensor yv = out;
    return make_op(std::move(out), {a}, [yv, D, R](GradNode& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        double* d = n.parents[0]->grad.data();
        const double* g = n.grad.data();
        const double* y = yv.data();
        for (size_t r = 0; r < R; r++) {
            double dot = 0.0;
            for (int j = 0; j < D; j++) dot += g[r * D + j] * y[r * D + j];
            for (int j = 0; j < D; j++)
                d[r * D + j] += y[r * D + j] * (g[r * D + j] - dot);
        }
    });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

// x: (..., In), w: (Out, In), optional bias (Out); returns (..., Out)
inline Var linear(const Var& x, const Var& w, const Var& b = Var()) {
    const Shape& xs = x.shape();
    int In = xs.back();
    check(w.shape().size() == 2 && w.shape()[1] == In, "linear: weight shape mismatch");
    int Out = w.shape()[0];
    size_t R = x.val().size() / In;
    Shape os = xs;
    os.back() = Out;
    Tensor out(os);
    {
        ECMap X(x.val().data(), R, In);
        ECMap W(w.val().data(), Out, In);
        EMap Y(out.data(), R, Out);
        Y.noalias() = X * W.transpose();
        if (b.defined()) {
            ECMap B(b.val().data(), 1, Out);
            Y.rowwise() += B.row(0);
        }
    }
    std::vector<Var> parents = {x, w};
    if (b.defined()) parents.push_back(b);
    Tensor xv = x.val(), wv = w.val();
    bool has_bias = b.defined();
    return make_op(std::move(out), parents,
                   [xv, wv, In, Out, R, has_bias](GradNode& n) {
                       ECMap G(n.grad.data(), R, Out);
                       if (n.parents[0]->requires_grad) {
                           n.parents[0]->ensure_grad();
                           EMap DX(n.parents[0]->grad.data(), R, In);
                           ECMap W(wv.data(), Out, In);
                           DX.noalias() += G * W;
                       }
                       if (n.parents[1]->requires_grad) {
                           n.parents[1]->ensure_grad();
                           EMap DW(n.parents[1]->grad.data(), Out, In);
                           ECMap X(xv.data(), R, In);
                           DW.noalias() += G.transpose() * X;
                       }
                       if (has_bias && n.parents[2]->requires_grad) {
                           n.parents[2]->ensure_grad();
                           EMap DB(n.parents[2]->grad.data(), 1, Out);
                           DB.row(0) += G.colwise().sum();
                       }
                   });
}

// a: (B,S,C), b: (B,T,C) -> (B,S,T)   (a @ b^T per batch)
inline Var bmm_nt(const Var& a, const Var& b) {
    int B = a.shape()[0], S = a.shape()[1], C = a.shape()[2];
    int T = b.shape()[1];
    check(b.shape()[0] == B && b.shape()[2] == C, "bmm_nt: shape mismatch");
    Tensor out({B, S, T});
    for (int i = 0; i < B; i++) {
        ECMap A(a.val().data() + static_cast<size_t>(i) * S * C, S, C);
        ECMap Bm(b.val().data() + static_cast<size_t>(i) * T * C, T, C);
        EMap Y(out.data() + static_cast<size_t>(i) * S * T, S, T);
        Y.noalias() = A * Bm.transpose();
    }
    Tensor av = a.val(), bv = b.val();
    return make_op(std::move(out), {a, b}, [av, bv, B, S, T, C](GradNode& n) {
        for (int i = 0; i < B; i++) {
            ECMap G(n.grad.data() + static_cast<size_t>(i) * S * T, S, T);
            if (n.parents[0]->requires_grad) {
                n.parents[0]->ensure_grad();
                EMap DA(n.parents[0]->grad.data() + static_cast<size_t>(i) * S * C, S, C);
                ECMap Bm(bv.data() + static_cast<size_t>(i) * T * C, T, C);
                DA.noalias() += G * Bm;
            }
            if (n.parents[1]->requires_grad) {
                n.parents[1]->ensure_grad();
                EMap DB(n.parents[1]->grad.data() + static_cast<size_t>(i) * T * C, T, C);
                ECMap A(av.data() + static_cast<size_t>(i) * S * C, S, C);
                DB.noalias() += G.transpose() * A;
            }
        }
    });
}

// a: (B,S,T), b: (B,T,C) -> (B,S,C)
inline Var bmm_nn(const Var& a, const Var& b) {
    int B = a.shape()[0], S = a.shape()[1], T = a.shape()[2];
    int C = b.shape()[2];
    check(b.shape()[0] == B && b.shape()[1] == T, "bmm_nn: shape mismatch");
    Tensor out({B, S, C});
    for (int i = 0; i < B; i++) {
        ECMap A(a.val().data() + static_cast<size_t>(i) * S * T, S, T);
        ECMap Bm(b.val().data() + static_cast<size_t>(i) * T * C, T, C);
        EMap Y(out.data() + static_cast<size_t>(i) * S * C, S, C);
        Y.noalias() = A * Bm;
    }
    Tensor av = a.val(), bv = b.val();
    return make_op(std::move(out), {a, b}, [av, bv, B, S, T, C](GradNode& n) {
        for (int i = 0; i < B; i++) {
            ECMap G(n.grad.data() + static_cast<size_t>(i) * S * C, S, C);
            if (n.parents[0]->requires_grad) {
                n.parents[0]->ensure_grad();
                EMap DA(n.parents[0]->grad.data() + static_cast<size_t>(i) * S * T, S, T);
                ECMap Bm(bv.data() + static_cast<size_t>(i) * T * C, T, C);
                DA.noalias() += G * Bm.transpose();
            }
            if (n.parents[1]->requires_grad) {
                n.parents[1]->ensure_grad();
                EMap DB(n.parents[1]->grad.data() + static_cast<size_t>(i) * T * C, T, C);
                ECMap A(av.data() + static_cast<size_t>(i) * S * T, S, T);
                DB.noalias() += A.transpose() * G;
            }
        }
    });
}

// plain 2-D matmul: (M,K) x (K,N) -> (M,N)
inline Var matmul(const Var& a, const Var& b) {
    int M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
    check(b.shape()[0] == K, "matmul: inner dims mismatch");
    Tensor out({M, N});
    {
        ECMap A(a.val().data(), M, K);
        ECMap B(b.val().data(), K, N);
        EMap Y(out.data(), M, N);
        Y.noalias() = A * B;
    }
    Tensor av = a.val(), bv = b.val();
    return make_op(std::move(out), {a, b}, [av, bv, M, K, N](GradNode& n) {
        ECMap G(n.grad.data(), M, N);
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            EMap DA(n.parents[0]->grad.data(), M, K);
            ECMap B(bv.data(), K, N);
            DA.noalias() += G * B.transpose();
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            EMap DB(n.parents[1]->grad.data(), K, N);
            ECMap A(av.data(), M, K);
            DB.noalias() += A.transpose() * G;
        }
    });
}

// ---------------------------------------------------------------------------
// conv / pooling / resampling
// ---------------------------------------------------------------------------

namespace detail {

inline void im2col(const double* x, int C, int H, int W, int kh, int kw, int stride,
                   int pad, int Ho, int Wo, double* col) {
    // col is (C*kh*kw, Ho*Wo)
    for (int c = 0; c < C; c++) {
        for (int i = 0; i < kh; i++) {
            for (int j = 0; j < kw; j++) {
                double* dst = col + ((static_cast<size_t>(c) * kh + i) * kw + j) *
                                        (static_cast<size_t>(Ho) * Wo);
                for (int oh = 0; oh < Ho; oh++) {
                    int ih = oh * stride - pad + i;
                    for (int ow = 0; ow < Wo; ow++) {
                        int iw = ow * stride - pad + j;
                        dst[oh * Wo + ow] =
                            (ih >= 0 && ih < H && iw >= 0 && iw < W)
                                ? x[(static_cast<size_t>(c) * H + ih) * W + iw]
                                : 0.0;
                    }
                }
            }
        }
    }
}

inline void col2im_acc(const double* col, int C, int H, int W, int kh, int kw,
                       int stride, int pad, int Ho, int Wo, double* x) {
    for (int c = 0; c < C; c++) {
        for (int i = 0; i < kh; i++) {
            for (int j = 0; j < kw; j++) {
                const double* src = col + ((static_cast<size_t>(c) * kh + i) * kw + j) *
                                              (static_cast<size_t>(Ho) * Wo);
                for (int oh = 0; oh < Ho; oh++) {
                    int ih = oh * stride - pad + i;
                    if (ih < 0 || ih >= H) continue;
                    for (int ow = 0; ow < Wo; ow++) {
                        int iw = ow * stride - pad + j;
                        if (iw < 0 || iw >= W) continue;
                        x[(static_cast<size_t>(c) * H + ih) * W + iw] += src[oh * Wo + ow];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// x: (B,Cin,H,W), w: (Cout,Cin,kh,kw), optional bias (Cout)
inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    check(xs.size() == 4 && ws.size() == 4, "conv2d: rank mismatch");
    int B = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
    int Cout = ws[0], kh = ws[2], kw = ws[3];
    check(ws[1] == Cin, "conv2d: channel mismatch");
    int Ho = (H + 2 * pad - kh) / stride + 1;
    int Wo = (W + 2 * pad - kw) / stride + 1;
    int K = Cin * kh * kw;
    Tensor out({B, Cout, Ho, Wo});
    {
        Tensor col({K, Ho * Wo});
        ECMap Wm(w.val().data(), Cout, K);
        for (int i = 0; i < B; i++) {
            detail::im2col(x.val().data() + static_cast<size_t>(i) * Cin * H * W, Cin, H,
                           W, kh, kw, stride, pad, Ho, Wo, col.data());
            ECMap Col(col.data(), K, static_cast<size_t>(Ho) * Wo);
            EMap Y(out.data() + static_cast<size_t>(i) * Cout * Ho * Wo, Cout,
                   static_cast<size_t>(Ho) * Wo);
            Y.noalias() = Wm * Col;
        }
        if (b.defined()) {
            for (int i = 0; i < B; i++)
                for (int c = 0; c < Cout; c++) {
                    double bv = b.val()[c];
                    double* po = out.data() + ((static_cast<size_t>(i) * Cout + c) * Ho) * Wo;
                    for (int k = 0; k < Ho * Wo; k++) po[k] += bv;
                }
        }
    }
    std::vector<Var> parents = {x, w};
    if (b.defined()) parents.push_back(b);
    Tensor xv = x.val(), wv = w.val();
    bool has_bias = b.defined();
    return make_op(
        std::move(out), parents,
        [xv, wv, B, Cin, H, W, Cout, kh, kw, stride, pad, Ho, Wo, K, has_bias](GradNode& n) {
            Tensor col({K, Ho * Wo});
            Tensor dcol({K, Ho * Wo});
            bool need_dx = n.parents[0]->requires_grad;
            bool need_dw = n.parents[1]->requires_grad;
            bool need_db = has_bias && n.parents[2]->requires_grad;
            if (need_dx) n.parents[0]->ensure_grad();
            if (need_dw) n.parents[1]->ensure_grad();
            if (need_db) n.parents[2]->ensure_grad();
            ECMap Wm(wv.data(), Cout, K);
            for (int i = 0; i < B; i++) {
                ECMap G(n.grad.data() + static_cast<size_t>(i) * Cout * Ho * Wo, Cout,
                        static_cast<size_t>(Ho) * Wo);
                if (need_dw || need_dx)
                    detail::im2col(xv.data() + static_cast<size_t>(i) * Cin * H * W, Cin,
                                   H, W, kh, kw, stride, pad, Ho, Wo, col.data());
                if (need_dw) {
                    EMap DW(n.parents[1]->grad.data(), Cout, K);
                    ECMap Col(col.data(), K, static_cast<size_t>(Ho) * Wo);
                    DW.noalias() += G * Col.transpose();
                }
                if (need_dx) {
                    EMap DCol(dcol.data(), K, static_cast<size_t>(Ho) * Wo);
                    DCol.noalias() = Wm.transpose() * G;
                    detail::col2im_acc(dcol.data(), Cin, H, W, kh, kw, stride, pad, Ho,
                                       Wo,
                                       n.parents[0]->grad.data() +
                                           static_cast<size_t>(i) * Cin * H * W);
                }
                if (need_db) {
                    double* db = n.parents[2]->grad.data();
                    for (int c = 0; c < Cout; c++) db[c] += G.row(c).sum();
                }
            }
        });
}

inline Var avg_pool2x(const Var& x) {
    const Shape& s = x.shape();
    int B = s[0], C = s[1], H = s[2], W = s[3];
    check(H % 2 == 0 && W % 2 == 0, "avg_pool2x: odd spatial dims");
    int Ho = H / 2, Wo = W / 2;
    Tensor out({B, C, Ho, Wo});
    const double* px = x.val().data();
    double* po = out.data();
    for (int bc = 0; bc < B * C; bc++) {
        const double* xi = px + static_cast<size_t>(bc) * H * W;
        double* yo = po + static_cast<size_t>(bc) * Ho * Wo;
        for (int h = 0; h < Ho; h++)
            for (int w = 0; w < Wo; w++)
                yo[h * Wo + w] = 0.25 * (xi[(2 * h) * W + 2 * w] + xi[(2 * h) * W + 2 * w + 1] +
                                         xi[(2 * h + 1) * W + 2 * w] +
                                         xi[(2 * h + 1) * W + 2 * w + 1]);
    }
    return make_op(std::move(out), {x}, [B, C, H, W, Ho, Wo](GradNode& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        double* d = n.parents[0]->grad.data();
        const double* g = n.grad.data();
        for (int bc = 0; bc < B * C; bc++) {
            double* di = d + static_cast<size_t>(bc) * H * W;
            const double* gi = g + static_cast<size_t>(bc) * Ho * Wo;
            for (int h = 0; h < Ho; h++)
                for (int w = 0; w < Wo; w++) {
                    double v = 0.25 * gi[h * Wo + w];
                    di[(2 * h) * W + 2 * w] += v;
                    di[(2 * h) * W + 2 * w + 1] += v;
                    di[(2 * h + 1) * W + 2 * w] += v;
                    di[(2 * h + 1) * W + 2 * w + 1] += v;
                }
        }
    });
}

inline Var upsample_nearest2x(const Var& x) {
    const Shape& s = x.shape();
    int B = s[0], C = s[1], H = s[2], W = s[3];
    int Ho = H * 2, Wo = W * 2;
    Tensor out({B, C, Ho, Wo});
    const double* px = x.val().data();
    double* po = out.data();
    for (int bc = 0; bc < B * C; bc++) {
        const double* xi = px + static_cast<size_t>(bc) * H * W;
        double* yo = po + static_cast<size_t>(bc) * Ho * Wo;
        for (int h = 0; h < Ho; h++)
            for (int w = 0; w < Wo; w++) yo[h * Wo + w] = xi[(h / 2) * W + w / 2];
    }
    return make_op(std::move(out), {x}, [B, C, H, W, Ho, Wo](GradNode& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        double* d = n.parents[0]->grad.data();
        const double* g = n.grad.data();
        for (int bc = 0; bc < B * C; bc++) {
            double* di = d + static_cast<size_t>(bc) * H * W;
            const double* gi = g + static_cast<size_t>(bc) * Ho * Wo;
            for (int h = 0; h < Ho; h++)
                for (int w = 0; w < Wo; w++) di[(h / 2) * W + w / 2] += gi[h * Wo + w];
        }
    });
}

// ---------------------------------------------------------------------------
// structure ops
// ---------------------------------------------------------------------------

inline Var concat_channels(const Var& a, const Var& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    check(sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3], "concat: shape mismatch");
    int B = sa[0], Ca = sa[1], Cb = sb[1], H = sa[2], W = sa[3];
    Tensor out({B, Ca + Cb, H, W});
    size_t hw = static_cast<size_t>(H) * W;
    for (int i = 0; i < B; i++) {
        std::copy_n(a.val().data() + i * Ca * hw, Ca * hw,
                    out.data() + static_cast<size_t>(i) * (Ca + Cb) * hw);
        std::copy_n(b.val().data() + i * Cb * hw, Cb * hw,
                    out.data() + static_cast<size_t>(i) * (Ca + Cb) * hw + Ca * hw);
    }
    return make_op(std::move(out), {a, b}, [B, Ca, Cb, hw](GradNode& n) {
        const double* g = n.grad.data();
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            double* d = n.parents[0]->grad.data();
            for (int i = 0; i < B; i++)
                for (size_t k = 0; k < Ca * hw; k++)
                    d[i * Ca * hw + k] += g[static_cast<size_t>(i) * (Ca + Cb) * hw + k];
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            double* d = n.parents[1]->grad.data();
            for (int i = 0; i < B; i++)
                for (size_t k = 0; k < Cb * hw; k++)
                    d[i * Cb * hw + k] +=
                        g[static_cast<size_t>(i) * (Ca + Cb) * hw + Ca * hw + k];
        }
    });
}

// (B,C,H,W) -> (B, H*W, C)
inline Var nchw_to_tokens(const Var& x) {
    const Shape& s = x.shape();
    int B = s[0], C = s[1], H = s[2], W = s[3];
    int S = H * W;
    Tensor out({B, S, C});
    const double* px = x.val().data();
    for (int i = 0; i < B; i++)
        for (int c = 0; c < C; c++)
            for (int k = 0; k < S; k++)
                out[(static_cast<size_t>(i) * S + k) * C + c] =
                    px[(static_cast<size_t>(i) * C + c) * S + k];
    return make_op(std::move(out), {x}, [B, C, S](GradNode& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        double* d = n.parents[0]->grad.data();
        const double* g = n.grad.data();
        for (int i = 0; i < B; i++)
            for (int c = 0; c < C; c++)
                for (int k = 0; k < S; k++)
                    d[(static_cast<size_t>(i) * C + c) * S + k] +=
                        g[(static_cast<size_t>(i) * S + k) * C + c];
    });
}

// (B, H*W, C) -> (B,C,H,W)
inline Var tokens_to_nchw(const Var& x, int H, int W) {
    const Shape& s = x.shape();
    int B = s[0], S = s[1], C = s[2];
    check(S == H * W, "tokens_to_nchw: size mismatch");
    Tensor out({B, C, H, W});
    const double* px = x.val().data();
    for (int i = 0; i < B; i++)
        for (int c = 0; c < C; c++)
            for (int k = 0; k < S; k++)
                out[(static_cast<size_t>(i) * C + c) * S + k] =
                    px[(static_cast<size_t>(i) * S + k) * C + c];
    return make_op(std::move(out), {x}, [B, C, S](GradNode& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        double* d = n.parents[0]->grad.data();
        const double* g = n.grad.data();
        for (int i = 0; i < B; i++)
            for (int c = 0; c < C; c++)
                for (int k = 0; k < S; k++)
                    d[(static_cast<size_t>(i) * S + k) * C + c] +=
                        g[(static_cast<size_t>(i) * C + c) * S + k];
    });
}

// x: (B,C,H,W), bias per (batch, channel): (B,C)
inline Var add_channel_bias(const Var& x, const Var& tb) {
    const Shape& s = x.shape();
    int B = s[0], C = s[1], H = s[2], W = s[3];
    check(tb.shape() == Shape({B, C}), "add_channel_bias: bias shape mismatch");
    Tensor out = x.val().clone();
    for (int i = 0; i < B; i++)
        for (int c = 0; c < C; c++) {
            double bv = tb.val()[static_cast<size_t>(i) * C + c];
            double* po = out.data() + (static_cast<size_t>(i) * C + c) * H * W;
            for (int k = 0; k < H * W; k++) po[k] += bv;
        }
    return make_op(std::move(out), {x, tb}, [B, C, H, W](GradNode& n) {
        const double* g = n.grad.data();
        if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            double* d = n.parents[1]->grad.data();
            for (int i = 0; i < B; i++)
                for (int c = 0; c < C; c++) {
                    double acc = 0.0;
                    const double* gi = g + (static_cast<size_t>(i) * C + c) * H * W;
                    for (int k = 0; k < H * W; k++) acc += gi[k];
                    d[static_cast<size_t>(i) * C + c] += acc;
                }
        }
    });
}

// (R1,C) + (R2,C) -> (R1+R2,C)
inline Var concat_rows(const Var& a, const Var& b) {
    check(a.shape().size() == 2 && b.shape().size() == 2 &&
              a.shape()[1] == b.shape()[1],
          "concat_rows: shape mismatch");
    int R1 = a.shape()[0], R2 = b.shape()[0], C = a.shape()[1];
    Tensor out({R1 + R2, C});
    std::copy_n(a.val().data(), static_cast<size_t>(R1) * C, out.data());
    std::copy_n(b.val().data(), static_cast<size_t>(R2) * C,
                out.data() + static_cast<size_t>(R1) * C);
    return make_op(std::move(out), {a, b}, [R1, R2, C](GradNode& n) {
        const double* g = n.grad.data();
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            double* d = n.parents[0]->grad.data();
            for (size_t k = 0; k < static_cast<size_t>(R1) * C; k++) d[k] += g[k];
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            double* d = n.parents[1]->grad.data();
            const double* gb = g + static_cast<size_t>(R1) * C;
            for (size_t k = 0; k < static_cast<size_t>(R2) * C; k++) d[k] += gb[k];
        }
    });
}

// (B,L,D) -> (B,D), mean over the middle axis
inline Var mean_axis1(const Var& a) {
    int B = a.shape()[0], L = a.shape()[1], D = a.shape()[2];
    Tensor out({B, D});
    const double* px = a.val().data();
    for (int i = 0; i < B; i++)
        for (int l = 0; l < L; l++)
            for (int j = 0; j < D; j++)
                out[static_cast<size_t>(i) * D + j] +=
                    px[(static_cast<size_t>(i) * L + l) * D + j] / L;
    return make_op(std::move(out), {a}, [B, L, D](GradNode& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        double* d = n.parents[0]->grad.data();
        const double* g = n.grad.data();
        for (int i = 0; i < B; i++)
            for (int l = 0; l < L; l++)
                for (int j = 0; j < D; j++)
                    d[(static_cast<size_t>(i) * L + l) * D + j] +=
                        g[static_cast<size_t>(i) * D + j] / L;
    });
}

// table: (V,D); ids flattened (B*L) -> (B,L,D)
inline Var embedding(const Var& table, const std::vector<int>& ids, int B, int L) {
    int V = table.shape()[0], D = table.shape()[1];
    check(static_cast<int>(ids.size()) == B * L, "embedding: ids size mismatch");
    for (int id : ids) check(id >= 0 && id < V, "embedding: token id out of range");
    Tensor out({B, L, D});
    const double* pt = table.val().data();
    for (int k = 0; k < B * L; k++)
        std::copy_n(pt + static_cast<size_t>(ids[k]) * D, D,
                    out.data() + static_cast<size_t>(k) * D);
    std::vector<int> ids_copy = ids;
    return make_op(std::move(out), {table}, [ids_copy, D](GradNode& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        double* d = n.parents[0]->grad.data();
        const double* g = n.grad.data();
        for (size_t k = 0; k < ids_copy.size(); k++)
            for (int j = 0; j < D; j++)
                d[static_cast<size_t>(ids_copy[k]) * D + j] += g[k * D + j];
    });
}

// ---------------------------------------------------------------------------
// group norm (fused primitive)
// ---------------------------------------------------------------------------

inline Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups,
                      double eps = 1e-5) {
    const Shape& s = x.shape();
    int B = s[0], C = s[1], H = s[2], W = s[3];
    check(C % groups == 0, "group_norm: channels not divisible by groups");
    int Cg = C / groups;
    size_t m = static_cast<size_t>(Cg) * H * W;
    Tensor out(s);
    Tensor mu({B, groups}), inv_std({B, groups});
    const double* px = x.val().data();
    double* po = out.data();
    for (int i = 0; i < B; i++) {
        for (int g = 0; g < groups; g++) {
            const double* xg = px + (static_cast<size_t>(i) * C + g * Cg) * H * W;
            double mean = 0.0;
            for (size_t k = 0; k < m; k++) mean += xg[k];
            mean /= static_cast<double>(m);
            double var = 0.0;
            for (size_t k = 0; k < m; k++) {
                double d = xg[k] - mean;
                var += d * d;
            }
            var /= static_cast<double>(m);
            double is = 1.0 / std::sqrt(var + eps);
            mu[static_cast<size_t>(i) * groups + g] = mean;
            inv_std[static_cast<size_t>(i) * groups + g] = is;
            for (int c = 0; c < Cg; c++) {
                double ga = gamma.val()[g * Cg + c];
                double be = beta.val()[g * Cg + c];
                const double* xi = xg + static_cast<size_t>(c) * H * W;
                double* yo = po + (static_cast<size_t>(i) * C + g * Cg + c) * H * W;
                for (int k = 0; k < H * W; k++) yo[k] = ga * (xi[k] - mean) * is + be;
            }
        }
    }
    Tensor xv = x.val(), gv = gamma.val();
    return make_op(
        std::move(out), {x, gamma, beta},
        [xv, gv, mu, inv_std, B, C, H, W, groups, Cg, m](GradNode& n) {
            const double* g = n.grad.data();
            const double* px = xv.data();
            bool need_dx = n.parents[0]->requires_grad;
            bool need_dg = n.parents[1]->requires_grad;
            bool need_db = n.parents[2]->requires_grad;
            if (need_dx) n.parents[0]->ensure_grad();
            if (need_dg) n.parents[1]->ensure_grad();
            if (need_db) n.parents[2]->ensure_grad();
            for (int i = 0; i < B; i++) {
                for (int gi = 0; gi < groups; gi++) {
                    double mean = mu[static_cast<size_t>(i) * groups + gi];
                    double is = inv_std[static_cast<size_t>(i) * groups + gi];
                    // accumulate dgamma/dbeta and the two group sums
                    double s1 = 0.0, s2 = 0.0;  // sum(dxhat), sum(dxhat*xhat)
                    for (int c = 0; c < Cg; c++) {
                        double ga = gv[gi * Cg + c];
                        const double* xi =
                            px + (static_cast<size_t>(i) * C + gi * Cg + c) * H * W;
                        const double* gy =
                            g + (static_cast<size_t>(i) * C + gi * Cg + c) * H * W;
                        double dgc = 0.0, dbc = 0.0;
                        for (int k = 0; k < H * W; k++) {
                            double xhat = (xi[k] - mean) * is;
                            dgc += gy[k] * xhat;
                            dbc += gy[k];
                            double dxh = gy[k] * ga;
                            s1 += dxh;
                            s2 += dxh * xhat;
                        }
                        if (need_dg) n.parents[1]->grad[gi * Cg + c] += dgc;
                        if (need_db) n.parents[2]->grad[gi * Cg + c] += dbc;
                    }
                    if (need_dx) {
                        double* dx = n.parents[0]->grad.data();
                        double inv_m = 1.0 / static_cast<double>(m);
                        for (int c = 0; c < Cg; c++) {
                            double ga = gv[gi * Cg + c];
                            const double* xi =
                                px + (static_cast<size_t>(i) * C + gi * Cg + c) * H * W;
                            const double* gy =
                                g + (static_cast<size_t>(i) * C + gi * Cg + c) * H * W;
                            double* dxi =
                                dx + (static_cast<size_t>(i) * C + gi * Cg + c) * H * W;
                            for (int k = 0; k < H * W; k++) {
                                double xhat = (xi[k] - mean) * is;
                                double dxh = gy[k] * ga;
                                dxi[k] += is * (dxh - (s1 + xhat * s2) * inv_m);
                            }
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// sliced Wasserstein primitive
// ---------------------------------------------------------------------------

// xp: (N,P), yp: (M,P) columns are projections; returns (P,) of squared
// 2-Wasserstein distances between the two 1-D empirical distributions.
// Unequal N,M handled exactly via quantile-function integration; for N == M
// this reduces to the mean of squared sorted differences.
inline Var sliced_w2_cols(const Var& xp, const Var& yp) {
    int N = xp.shape()[0], P = xp.shape()[1];
    int M = yp.shape()[0];
    check(yp.shape()[1] == P, "sliced_w2: projection count mismatch");
    check(N > 0 && M > 0, "sliced_w2: empty point set");
    Tensor out({P});
    const double* px = xp.val().data();
    const double* py = yp.val().data();

    auto sorted_idx = [](const double* base, int count, int stride, int col) {
        std::vector<int> idx(count);
        for (int i = 0; i < count; i++) idx[i] = i;
        std::sort(idx.begin(), idx.end(), [&](int a, int b) {
            double va = base[static_cast<size_t>(a) * stride + col];
            double vb = base[static_cast<size_t>(b) * stride + col];
            if (va != vb) return va < vb;
            return a < b;
        });
        return idx;
    };

    for (int p = 0; p < P; p++) {
        auto ix = sorted_idx(px, N, P, p);
        auto iy = sorted_idx(py, M, P, p);
        // integrate (F_x^{-1}(u) - F_y^{-1}(u))^2 du with breakpoints on the
        // common grid of i/N and j/M, tracked in integer units of 1/(N*M)
        long long u = 0, total = static_cast<long long>(N) * M;
        int i = 0, j = 0;
        double acc = 0.0;
        while (u < total) {
            long long bx = static_cast<long long>(i + 1) * M;
            long long by = static_cast<long long>(j + 1) * N;
            long long nu = std::min(bx, by);
            double w = static_cast<double>(nu - u) / static_cast<double>(total);
            double d = px[static_cast<size_t>(ix[i]) * P + p] -
                       py[static_cast<size_t>(iy[j]) * P + p];
            acc += w * d * d;
            if (bx == nu) i++;
            if (by == nu) j++;
            u = nu;
        }
        out[p] = acc;
    }
    Tensor xv = xp.val(), yv = yp.val();
    return make_op(std::move(out), {xp, yp}, [xv, yv, N, M, P](GradNode& n) {
        bool need_dx = n.parents[0]->requires_grad;
        bool need_dy = n.parents[1]->requires_grad;
        if (!need_dx && !need_dy) return;
        if (need_dx) n.parents[0]->ensure_grad();
        if (need_dy) n.parents[1]->ensure_grad();
        const double* px = xv.data();
        const double* py = yv.data();
        auto sorted_idx = [](const double* base, int count, int stride, int col) {
            std::vector<int> idx(count);
            for (int i = 0; i < count; i++) idx[i] = i;
            std::sort(idx.begin(), idx.end(), [&](int a, int b) {
                double va = base[static_cast<size_t>(a) * stride + col];
                double vb = base[static_cast<size_t>(b) * stride + col];
                if (va != vb) return va < vb;
                return a < b;
            });
            return idx;
        };
        for (int p = 0; p < P; p++) {
            double gp = n.grad[p];
            if (gp == 0.0) continue;
            auto ix = sorted_idx(px, N, P, p);
            auto iy = sorted_idx(py, M, P, p);
            long long u = 0, total = static_cast<long long>(N) * M;
            int i = 0, j = 0;
            while (u < total) {
                long long bx = static_cast<long long>(i + 1) * M;
                long long by = static_cast<long long>(j + 1) * N;
                long long nu = std::min(bx, by);
                double w = static_cast<double>(nu - u) / static_cast<double>(total);
                double d = px[static_cast<size_t>(ix[i]) * P + p] -
                           py[static_cast<size_t>(iy[j]) * P + p];
                if (need_dx)
                    n.parents[0]->grad[static_cast<size_t>(ix[i]) * P + p] +=
                        gp * w * 2.0 * d;
                if (need_dy)
                    n.parents[1]->grad[static_cast<size_t>(iy[j]) * P + p] -=
                        gp * w * 2.0 * d;
                if (bx == nu) i++;
                if (by == nu) j++;
                u = nu;
            }
        }
    });
}

}  // namespace ops
}  // namespace echolab
