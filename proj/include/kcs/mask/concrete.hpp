#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "kcs/core/error.hpp"
#include "kcs/core/rng.hpp"
#include "kcs/mask/scope.hpp"
#include "kcs/model/handle.hpp"

namespace kcs::mask {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

/// Per-unit real values aligned to a list of mask modules.
using UnitValues = std::vector<std::vector<double>>;

/// Learnable mask logits for every unit in scope.
struct MaskState {
    std::string spec_hash;
    MaskScope scope;
    Granularity granularity = Granularity::Weight;
    double tau = 1.0;
    double tau_end = 1.0;  // equal to tau unless the temperature is annealed
    std::uint64_t seed = 0;
    std::vector<MaskModule> modules;
    UnitValues logits;

    std::size_t unit_count() const {
        std::size_t n = 0;
        for (const auto& l : logits) n += l.size();
        return n;
    }

    /// Temperature at `step`, interpolated linearly from tau to tau_end.
    double tau_at(long step, long total_steps) const {
        if (tau_end == tau || total_steps <= 1) return tau;
        const double f = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps - 1));
        return tau + (tau_end - tau) * f;
    }
};

inline MaskState init_mask(const model::ParamLayout& layout, const MaskScope& scope, double init_prob,
                           Granularity granularity, double tau, std::uint64_t seed) {
    require(init_prob > 0.0 && init_prob < 1.0, "bad_config", "init_prob must be in (0, 1)");
    require(tau > 0.0, "bad_config", "temperature must be positive");
    MaskState st;
    st.spec_hash = layout.spec().hash();
    st.scope = scope;
    st.granularity = granularity;
    st.tau = st.tau_end = tau;
    st.seed = seed;
    st.modules = modules_in_scope(layout, scope);
    require(!st.modules.empty(), "empty_scope", "mask scope selects no parameters");
    const double l0 = logit(init_prob);
    for (const auto& m : st.modules) st.logits.emplace_back(m.units(granularity), l0);
    return st;
}

template <typename S>
MaskState init_mask(const model::BasicModelHandle<S>& model, const MaskScope& scope, double init_prob,
                    Granularity granularity, double tau, std::uint64_t seed) {
    return init_mask(model.layout(), scope, init_prob, granularity, tau, seed);
}

/// Logistic noise log(log U1 / log U2) for every unit, with U1, U2 drawn
/// independently from the open unit interval.
inline UnitValues sample_noise(const MaskState& st, Rng& rng) {
    UnitValues g;
    g.reserve(st.logits.size());
    for (const auto& l : st.logits) {
        auto& row = g.emplace_back(l.size());
        for (auto& x : row) {
            const double u1 = rng.uniform_open();
            const double u2 = rng.uniform_open();
            x = std::log(std::log(u1) / std::log(u2));
        }
    }
    return g;
}

inline double concrete_score(double logit_value, double noise, double tau) {
    return sigmoid((logit_value - noise) / tau);
}

/// Continuous scores s = sigmoid((l - noise) / tau).
inline UnitValues sample_concrete(const MaskState& st, const UnitValues& noise, double tau) {
    require(tau > 0.0, "bad_config", "temperature must be positive");
    require(noise.size() == st.logits.size(), "shape_mismatch", "noise does not match the mask state");
    UnitValues s(st.logits.size());
    for (std::size_t m = 0; m < st.logits.size(); ++m) {
        require(noise[m].size() == st.logits[m].size(), "shape_mismatch", "noise does not match " + st.modules[m].path);
        s[m].resize(st.logits[m].size());
        for (std::size_t i = 0; i < s[m].size(); ++i) s[m][i] = concrete_score(st.logits[m][i], noise[m][i], tau);
    }
    return s;
}

inline UnitValues sample_concrete(const MaskState& st, Rng& rng) { return sample_concrete(st, sample_noise(st, rng), st.tau); }

/// Straight-through binarization of concrete scores. The forward value is
/// 1[s > 0.5]; the backward pass treats the threshold as identity, so the
/// gradient reaching the logits is the gradient of s.
struct StraightThrough {
    UnitValues scores;
    UnitValues values;  // 0 or 1
    double tau = 1.0;

    /// d(loss)/d(logits) from d(loss)/d(m).
    UnitValues backward(const UnitValues& dvalues) const {
        require(dvalues.size() == scores.size(), "shape_mismatch", "gradient does not match the mask sample");
        UnitValues dl(scores.size());
        for (std::size_t m = 0; m < scores.size(); ++m) {
            dl[m].resize(scores[m].size());
            for (std::size_t i = 0; i < scores[m].size(); ++i) {
                const double s = scores[m][i];
                dl[m][i] = dvalues[m][i] * s * (1.0 - s) / tau;
            }
        }
        return dl;
    }
};

inline StraightThrough binarize_st(UnitValues scores, double tau) {
    StraightThrough st;
    st.tau = tau;
    st.values.resize(scores.size());
    for (std::size_t m = 0; m < scores.size(); ++m) {
        st.values[m].resize(scores[m].size());
        for (std::size_t i = 0; i < scores[m].size(); ++i) st.values[m][i] = scores[m][i] > 0.5 ? 1.0 : 0.0;
    }
    st.scores = std::move(scores);
    return st;
}

}  // namespace kcs::mask
