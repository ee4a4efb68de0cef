#ifndef DCV_OPTIM_HPP
#define DCV_OPTIM_HPP

#include "dcv/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace dcv {

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    long warmup_steps = 0;
    double max_grad_norm = 0.0;  // 0 disables clipping
};

/// Adam with decoupled weight decay over an explicit parameter list.
template <typename S>
class AdamW {
public:
    AdamW(std::vector<Var<S>> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        for (const auto& p : params_) {
            m_.push_back(Buffer<S>::Zero(p.numel()));
            v_.push_back(Buffer<S>::Zero(p.numel()));
        }
    }

    double current_lr() const {
        if (cfg_.warmup_steps <= 0) return cfg_.lr;
        return cfg_.lr * std::min(1.0, double(step_ + 1) / double(cfg_.warmup_steps));
    }

    /// Global L2 norm of the current gradients.
    double grad_norm() const {
        double total = 0;
        for (const auto& p : params_)
            if (p.has_grad()) total += double(p.grad().square().sum());
        return std::sqrt(total);
    }

    void step() {
        const double lr = current_lr();
        double clip = 1.0;
        if (cfg_.max_grad_norm > 0) {
            const double norm = grad_norm();
            if (norm > cfg_.max_grad_norm) clip = cfg_.max_grad_norm / (norm + 1e-12);
        }
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Var<S>& p = params_[i];
            if (!p.has_grad()) continue;
            Buffer<S> g = p.grad() * S(clip);
            m_[i] = S(cfg_.beta1) * m_[i] + S(1 - cfg_.beta1) * g;
            v_[i] = S(cfg_.beta2) * v_[i] + S(1 - cfg_.beta2) * g.square();
            Buffer<S>& w = p.mutable_value().data;
            if (cfg_.weight_decay > 0) w *= S(1 - lr * cfg_.weight_decay);
            w -= S(lr) * (m_[i] / S(bc1)) / ((v_[i] / S(bc2)).sqrt() + S(cfg_.eps));
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    long steps_taken() const { return step_; }
    const std::vector<Var<S>>& params() const { return params_; }

private:
    std::vector<Var<S>> params_;
    AdamWConfig cfg_;
    std::vector<Buffer<S>> m_, v_;
    long step_ = 0;
};

}  // namespace dcv

#endif  // DCV_OPTIM_HPP
