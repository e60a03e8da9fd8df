#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "kcs/core/error.hpp"

namespace kcs::train {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

/// AdamW with decoupled weight decay over a fixed list of parameter groups.
/// Group i is registered once with its size; each `step` then receives spans
/// in the same order.
template <typename S>
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    std::size_t add_group(std::size_t size) {
        m_.emplace_back(size, S(0));
        v_.emplace_back(size, S(0));
        return m_.size() - 1;
    }

    /// Call once per optimisation step, before the group updates.
    void begin_step() { ++t_; }

    long steps() const { return t_; }

    void update(std::size_t group, std::span<S> params, std::span<const S> grads, double lr) {
        auto& m = m_.at(group);
        auto& v = v_.at(group);
        require(params.size() == m.size() && grads.size() == m.size(), "shape_mismatch", "AdamW group size changed");
        require(t_ > 0, "optimizer", "begin_step() not called");
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        const double step_size = lr / bc1;
        const double decay = 1.0 - lr * cfg_.weight_decay;
        for (std::size_t i = 0; i < params.size(); ++i) {
            const double g = static_cast<double>(grads[i]);
            const double mi = cfg_.beta1 * static_cast<double>(m[i]) + (1.0 - cfg_.beta1) * g;
            const double vi = cfg_.beta2 * static_cast<double>(v[i]) + (1.0 - cfg_.beta2) * g * g;
            m[i] = static_cast<S>(mi);
            v[i] = static_cast<S>(vi);
            const double denom = std::sqrt(vi / bc2) + cfg_.eps;
            double p = static_cast<double>(params[i]);
            if (cfg_.weight_decay != 0.0) p *= decay;
            params[i] = static_cast<S>(p - step_size * mi / denom);
        }
    }

private:
    AdamWConfig cfg_;
    long t_ = 0;
    std::vector<std::vector<S>> m_;
    std::vector<std::vector<S>> v_;
};

/// Linear warmup from `start_lr` at step 0 to `peak_lr` at `warmup_steps`,
/// constant afterwards.
inline double warmup_lr(long step, long warmup_steps, double peak_lr, double start_lr) {
    if (warmup_steps <= 0 || step >= warmup_steps) return peak_lr;
    const double frac = static_cast<double>(step) / static_cast<double>(warmup_steps);
    return start_lr + (peak_lr - start_lr) * frac;
}

}  // namespace kcs::train
