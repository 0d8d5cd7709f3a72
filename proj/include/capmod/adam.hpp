#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "capmod/errors.hpp"
#include "capmod/tensor.hpp"

namespace capmod {

struct AdamConfig {
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam with bias correction. Holds first/second moment buffers aligned to
// the parameter list given at construction; the list must not change.
template <typename Real>
class Adam {
  public:
    Adam(std::vector<Tensor<Real>> params, AdamConfig cfg = {})
        : params_(std::move(params)), cfg_(cfg) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const auto& p : params_) {
            m_.emplace_back(p.size(), Real(0));
            v_.emplace_back(p.size(), Real(0));
        }
    }

    std::size_t step_count() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

    // One update with the given learning rate (the schedule lives in the
    // trainer). Skips parameters whose grad buffer was never touched this
    // step, so unused vocabulary rows stay put; zeroes all grads after.
    void step(double lr) {
        ++t_;
        double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t pi = 0; pi < params_.size(); ++pi) {
            auto& p = params_[pi];
            if (!p.has_grad()) continue;
            auto g = p.grad_mut();
            auto val = p.value_mut();
            auto& m = m_[pi];
            auto& v = v_[pi];
            for (std::size_t i = 0; i < g.size(); ++i) {
                double gi = static_cast<double>(g[i]);
                if (!std::isfinite(gi))
                    throw NumericalError("adam: non-finite gradient in parameter " +
                                         std::to_string(pi));
                m[i] = static_cast<Real>(cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi);
                v[i] = static_cast<Real>(cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi);
                double mhat = static_cast<double>(m[i]) / bc1;
                double vhat = static_cast<double>(v[i]) / bc2;
                val[i] -= static_cast<Real>(lr * mhat / (std::sqrt(vhat) + cfg_.eps));
            }
            p.zero_grad();
        }
    }

    void step() { step(cfg_.lr); }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

  private:
    std::vector<Tensor<Real>> params_;
    AdamConfig cfg_;
    std::vector<std::vector<Real>> m_, v_;
    std::size_t t_ = 0;
};

// Global-norm gradient clipping over a parameter list. Returns the norm
// before clipping. Parameters without a grad buffer contribute nothing.
template <typename Real>
double clip_grad_norm(std::vector<Tensor<Real>>& params, double max_norm) {
    double sq = 0.0;
    for (auto& p : params) {
        if (!p.has_grad()) continue;
        for (Real g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        double s = max_norm / norm;
        for (auto& p : params) {
            if (!p.has_grad()) continue;
            for (auto& g : p.grad_mut()) g = static_cast<Real>(g * s);
        }
    }
    return norm;
}

}  // namespace capmod
