#pragma once

// Adam with bias correction and configurable L2 weight decay. Decay is
// decoupled from the moment estimates by default (applied directly to the
// parameter); the classic coupled form (decay added to the gradient) is
// selectable.

#include <cmath>
#include <cstdint>
#include <vector>

#include "cas/error.hpp"
#include "cas/tensor.hpp"

namespace cas {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0;
    bool decoupled_weight_decay = true;
};

struct AdamState {
    std::vector<double> m;  // first moment
    std::vector<double> v;  // second moment
    std::uint64_t step = 0;
};

inline void adam_step(Tensor& p, AdamState& st, const AdamConfig& cfg) {
    if (p.grad.size() != p.data.size())
        throw ContractError("adam_step: parameter has no gradient");
    if (st.m.empty()) {
        st.m.assign(p.data.size(), 0.0);
        st.v.assign(p.data.size(), 0.0);
    } else if (st.m.size() != p.data.size()) {
        throw ContractError("adam_step: moment state does not match parameter size");
    }
    st.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < p.data.size(); ++i) {
        double g = p.grad[i];
        if (!cfg.decoupled_weight_decay && cfg.weight_decay != 0.0)
            g += cfg.weight_decay * p.data[i];
        st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g;
        st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g * g;
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        if (cfg.decoupled_weight_decay && cfg.weight_decay != 0.0)
            p.data[i] -= cfg.lr * cfg.weight_decay * p.data[i];
        p.data[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
}

inline double global_grad_norm(const std::vector<TensorRef>& params) {
    double acc = 0.0;
    for (const auto& p : params)
        for (double g : p->grad) acc += g * g;
    return std::sqrt(acc);
}

// Scales gradients so the global norm does not exceed max_norm; returns the
// pre-clip norm. Never increases the norm.
inline double clip_grad_norm(const std::vector<TensorRef>& params, double max_norm) {
    const double norm = global_grad_norm(params);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (const auto& p : params)
            for (double& g : p->grad) g *= s;
    }
    return norm;
}

// Holds one AdamState per parameter, indexed positionally, so updates are
// deterministic for a fixed parameter list.
class AdamOptimizer {
public:
    explicit AdamOptimizer(AdamConfig cfg) : cfg_(cfg) {}

    void step(const std::vector<TensorRef>& params) {
        if (states_.empty()) states_.resize(params.size());
        if (states_.size() != params.size())
            throw ContractError("AdamOptimizer: parameter list size changed");
        for (std::size_t i = 0; i < params.size(); ++i) adam_step(*params[i], states_[i], cfg_);
    }

    const AdamConfig& config() const { return cfg_; }

private:
    AdamConfig cfg_;
    std::vector<AdamState> states_;
};

}  // namespace cas
