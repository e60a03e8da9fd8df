#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kcs/core/error.hpp"
#include "kcs/mask/concrete.hpp"
#include "kcs/model/layout.hpp"

namespace kcs::objectives {

using model::Index;
using model::Mat;

/// A loss value with its gradient w.r.t. the logits it was computed from.
/// Reduction is the mean over scored rows.
template <typename S>
struct LossTerm {
    double value = 0.0;
    Mat<S> dlogits;
};

namespace detail {

/// log-softmax of one row in double precision.
template <typename Row>
std::vector<double> row_log_softmax(const Row& z) {
    const auto V = static_cast<std::size_t>(z.size());
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < V; ++v) mx = std::max(mx, static_cast<double>(z(static_cast<Index>(v))));
    double sum = 0.0;
    for (std::size_t v = 0; v < V; ++v) sum += std::exp(static_cast<double>(z(static_cast<Index>(v))) - mx);
    const double lse = mx + std::log(sum);
    std::vector<double> out(V);
    for (std::size_t v = 0; v < V; ++v) out[v] = static_cast<double>(z(static_cast<Index>(v))) - lse;
    return out;
}

}  // namespace detail

/// Mean over rows of KL(U || p), U uniform over the vocabulary and p the
/// softmax of each row. The gradient per row is p - 1/V.
template <typename S>
LossTerm<S> suppression_loss(const Mat<S>& logits) {
    require(logits.rows() > 0, "empty_batch", "suppression loss on an empty batch");
    const Index n = logits.rows();
    const Index V = logits.cols();
    const double u = 1.0 / static_cast<double>(V);
    LossTerm<S> out;
    out.dlogits.resize(n, V);
    for (Index r = 0; r < n; ++r) {
        const auto logp = detail::row_log_softmax(logits.row(r));
        double kl = 0.0;
        for (Index v = 0; v < V; ++v) {
            kl += u * (std::log(u) - logp[static_cast<std::size_t>(v)]);
            out.dlogits(r, v) = static_cast<S>((std::exp(logp[static_cast<std::size_t>(v)]) - u) / static_cast<double>(n));
        }
        out.value += kl;
    }
    out.value /= static_cast<double>(n);
    return out;
}

/// Mean over rows of KL(q || p) where q = exp(base_logprobs) is the frozen
/// base model's distribution and p the softmax of `logits`. Gradient p - q.
template <typename S>
LossTerm<S> maintenance_loss(const Mat<S>& logits, const Mat<S>& base_logprobs) {
    require(logits.rows() > 0, "empty_batch", "maintenance loss on an empty batch");
    require(logits.rows() == base_logprobs.rows() && logits.cols() == base_logprobs.cols(), "shape_mismatch",
            "base distribution does not match the scored rows");
    const Index n = logits.rows();
    const Index V = logits.cols();
    LossTerm<S> out;
    out.dlogits.resize(n, V);
    for (Index r = 0; r < n; ++r) {
        const auto logp = detail::row_log_softmax(logits.row(r));
        double kl = 0.0;
        for (Index v = 0; v < V; ++v) {
            const double lq = static_cast<double>(base_logprobs(r, v));
            const double q = std::exp(lq);
            if (q > 0.0) kl += q * (lq - logp[static_cast<std::size_t>(v)]);
            out.dlogits(r, v) = static_cast<S>((std::exp(logp[static_cast<std::size_t>(v)]) - q) / static_cast<double>(n));
        }
        out.value += kl;
    }
    out.value /= static_cast<double>(n);
    return out;
}

/// Mean negative log-likelihood of `gold` under the rows of `logits`.
template <typename S>
LossTerm<S> expression_loss(const Mat<S>& logits, const std::vector<int>& gold) {
    require(logits.rows() > 0, "empty_batch", "expression loss on an empty batch");
    require(static_cast<std::size_t>(logits.rows()) == gold.size(), "shape_mismatch", "one gold token per row");
    const Index n = logits.rows();
    LossTerm<S> out;
    out.dlogits.resize(n, logits.cols());
    for (Index r = 0; r < n; ++r) {
        const auto logp = detail::row_log_softmax(logits.row(r));
        const auto g = static_cast<std::size_t>(gold[static_cast<std::size_t>(r)]);
        out.value -= logp[g];
        for (Index v = 0; v < logits.cols(); ++v)
            out.dlogits(r, v) = static_cast<S>(std::exp(logp[static_cast<std::size_t>(v)]) / static_cast<double>(n));
        out.dlogits(r, static_cast<Index>(g)) -= static_cast<S>(1.0 / static_cast<double>(n));
    }
    out.value /= static_cast<double>(n);
    return out;
}

/// Mean mask density sigmoid(l) over all units, with its gradient per logit.
struct SparsityTerm {
    double value = 0.0;
    mask::UnitValues dlogits;
};

inline SparsityTerm sparsity_loss(const mask::MaskState& st) {
    const auto n = st.unit_count();
    require(n > 0, "empty_scope", "sparsity loss of an empty mask state");
    SparsityTerm out;
    out.dlogits.resize(st.logits.size());
    double sum = 0.0;
    for (std::size_t m = 0; m < st.logits.size(); ++m) {
        out.dlogits[m].resize(st.logits[m].size());
        for (std::size_t i = 0; i < st.logits[m].size(); ++i) {
            const double s = mask::sigmoid(st.logits[m][i]);
            sum += s;
            out.dlogits[m][i] = s * (1.0 - s) / static_cast<double>(n);
        }
    }
    out.value = sum / static_cast<double>(n);
    return out;
}

struct LossWeights {
    double lambda1 = 1.5;  // suppression
    double lambda2 = 1.0;  // maintenance on ControlKG
    double lambda3 = 1.0;  // maintenance on ControlLM
    double lambda4_start = 2.0;
    double lambda4_end = 3.0;
    double lambda4_ramp_fraction = 0.5;
    double lambda5 = 0.0;  // expression

    void validate() const {
        for (double x : {lambda1, lambda2, lambda3, lambda4_start, lambda4_end, lambda5})
            require(x >= 0.0 && std::isfinite(x), "bad_config", "loss weights must be finite and nonnegative");
        require(lambda4_ramp_fraction >= 0.0 && lambda4_ramp_fraction <= 1.0, "bad_config",
                "lambda4_ramp_fraction must be in [0, 1]");
    }

    /// Sparsity weight: constant until the ramp fraction of training, then
    /// linear up to lambda4_end at the final step.
    double lambda4(long step, long total_steps) const {
        if (total_steps <= 0) return lambda4_start;
        const double f = static_cast<double>(step) / static_cast<double>(total_steps);
        if (f <= lambda4_ramp_fraction || lambda4_ramp_fraction >= 1.0) return lambda4_start;
        const double t = std::min(1.0, (f - lambda4_ramp_fraction) / (1.0 - lambda4_ramp_fraction));
        return lambda4_start + (lambda4_end - lambda4_start) * t;
    }

    nlohmann::json to_json() const {
        return {{"lambda1", lambda1},
                {"lambda2", lambda2},
                {"lambda3", lambda3},
                {"lambda4_start", lambda4_start},
                {"lambda4_end", lambda4_end},
                {"lambda4_ramp_fraction", lambda4_ramp_fraction},
                {"lambda5", lambda5}};
    }
};

struct Ablation {
    bool no_suppress = false;
    bool no_maintain_kg = false;
    bool no_maintain_lm = false;
    bool with_expression = false;

    nlohmann::json to_json() const {
        return {{"no_suppress", no_suppress},
                {"no_maintain_kg", no_maintain_kg},
                {"no_maintain_lm", no_maintain_lm},
                {"with_expression", with_expression}};
    }
};

struct LossComponents {
    double suppress = 0.0;
    double maintain_kg = 0.0;
    double maintain_lm = 0.0;
    double sparsity = 0.0;
    double expression = 0.0;
};

/// Coefficient applied to each term at a given step, ablations included.
struct Coefficients {
    double suppress = 0.0;
    double maintain_kg = 0.0;
    double maintain_lm = 0.0;
    double sparsity = 0.0;
    double expression = 0.0;
};

inline Coefficients coefficients(const LossWeights& w, const Ablation& a, long step, long total_steps) {
    Coefficients c;
    c.suppress = a.no_suppress ? 0.0 : w.lambda1;
    c.maintain_kg = a.no_maintain_kg ? 0.0 : w.lambda2;
    c.maintain_lm = a.no_maintain_lm ? 0.0 : w.lambda3;
    c.sparsity = w.lambda4(step, total_steps);
    c.expression = a.with_expression ? w.lambda5 : 0.0;
    return c;
}

inline double total_loss(const LossComponents& l, const LossWeights& w, const Ablation& a, long step,
                         long total_steps) {
    const auto c = coefficients(w, a, step, total_steps);
    return c.suppress * l.suppress + c.maintain_kg * l.maintain_kg + c.maintain_lm * l.maintain_lm +
           c.sparsity * l.sparsity + c.expression * l.expression;
}

inline double total_loss(const LossComponents& l, const LossWeights& w, long step, long total_steps) {
    return total_loss(l, w, Ablation{}, step, total_steps);
}

}  // namespace kcs::objectives
