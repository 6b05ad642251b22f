#pragma once

#include <vector>

#include "echolab/nn.hpp"

namespace echolab {

// Adam with bias correction. Parameters without an accumulated gradient are
// treated as having zero gradient that step.
class Adam {
public:
    Adam() = default;
    Adam(std::vector<Param*> params, double lr, double beta1 = 0.9,
         double beta2 = 0.999, double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (auto* p : params_) {
            m_.push_back(Tensor::zeros(p->value().shape()));
            v_.push_back(Tensor::zeros(p->value().shape()));
        }
    }

    double learning_rate() const { return lr_; }
    const std::vector<Param*>& params() const { return params_; }

    void zero_grad() {
        for (auto* p : params_) p->var.zero_grad();
    }

    void step() {
        t_++;
        double bc1 = 1.0 - std::pow(beta1_, t_);
        double bc2 = 1.0 - std::pow(beta2_, t_);
        for (size_t i = 0; i < params_.size(); i++) {
            Param* p = params_[i];
            bool has = p->var.has_grad();
            const Tensor& g = p->var.grad();
            double* pm = m_[i].data();
            double* pv = v_[i].data();
            double* pw = p->value().data();
            for (size_t k = 0; k < m_[i].size(); k++) {
                double gk = has ? g[k] : 0.0;
                pm[k] = beta1_ * pm[k] + (1.0 - beta1_) * gk;
                pv[k] = beta2_ * pv[k] + (1.0 - beta2_) * gk * gk;
                double mhat = pm[k] / bc1;
                double vhat = pv[k] / bc2;
                pw[k] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

private:
    std::vector<Param*> params_;
    std::vector<Tensor> m_, v_;
    double lr_ = 1e-3, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    long t_ = 0;
};

}  // namespace echolab
