#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kcs/core/error.hpp"
#include "kcs/core/rng.hpp"
#include "kcs/eval/evaluator.hpp"
#include "kcs/eval/scoring.hpp"
#include "kcs/kg/pipeline.hpp"
#include "kcs/kg/verbalize.hpp"
#include "kcs/mask/apply.hpp"
#include "kcs/mask/binary_mask.hpp"
#include "kcs/mask/concrete.hpp"
#include "kcs/model/handle.hpp"
#include "kcs/model/transformer.hpp"
#include "kcs/objectives/losses.hpp"
#include "kcs/train/adamw.hpp"
#include "kcs/train/dataloader.hpp"

namespace kcs::train {

using model::Index;
using model::Mat;

enum class NoiseMode { PerStep, PerExample };

inline std::string to_string(NoiseMode m) { return m == NoiseMode::PerStep ? "per_step" : "per_example"; }
inline NoiseMode parse_noise_mode(const std::string& s) {
    if (s == "per_step") return NoiseMode::PerStep;
    if (s == "per_example") return NoiseMode::PerExample;
    throw Error("bad_config", "noise_mode must be 'per_step' or 'per_example', got '" + s + "'");
}

struct TrainConfig {
    long total_steps = 2000;
    double lr = 0.2;
    double warmup_fraction = 0.1;
    double warmup_start_lr = 1e-10;
    double weight_decay = 0.0;
    std::size_t control_kg_batch = 64;
    std::size_t control_lm_batch = 4;
    long eval_every = 100;
    double checkpoint_start_fraction = 0.5;  // no checkpoints before this share of training
    std::uint64_t seed = 0;
    NoiseMode noise_mode = NoiseMode::PerStep;

    /// Whether a checkpoint is taken after `steps_done` steps: every
    /// eval_every steps from the start fraction on, and always at the end.
    bool checkpoint_due(long steps_done) const {
        if (steps_done == total_steps) return true;
        return steps_done % eval_every == 0 &&
               static_cast<double>(steps_done) >= checkpoint_start_fraction * static_cast<double>(total_steps);
    }

    long warmup_steps() const {
        return static_cast<long>(std::ceil(warmup_fraction * static_cast<double>(total_steps) - 1e-9));
    }
    double lr_at(long step) const { return warmup_lr(step, warmup_steps(), lr, warmup_start_lr); }

    void validate() const {
        require(total_steps >= 1, "bad_config", "total_steps must be >= 1");
        require(lr > 0.0, "bad_config", "lr must be positive");
        require(warmup_fraction >= 0.0 && warmup_fraction <= 1.0, "bad_config", "warmup_fraction must be in [0, 1]");
        require(eval_every >= 1, "bad_config", "eval_every must be >= 1");
        require(checkpoint_start_fraction >= 0.0 && checkpoint_start_fraction <= 1.0, "bad_config",
                "checkpoint_start_fraction must be in [0, 1]");
        require(control_kg_batch >= 1 && control_lm_batch >= 1, "bad_config", "batch sizes must be >= 1");
    }

    nlohmann::json to_json() const {
        return {{"total_steps", total_steps},
                {"lr", lr},
                {"warmup_fraction", warmup_fraction},
                {"warmup_start_lr", warmup_start_lr},
                {"weight_decay", weight_decay},
                {"control_kg_batch", control_kg_batch},
                {"control_lm_batch", control_lm_batch},
                {"eval_every", eval_every},
                {"checkpoint_start_fraction", checkpoint_start_fraction},
                {"seed", seed},
                {"noise_mode", to_string(noise_mode)}};
    }
};

/// Training data of a mask run. `target` is seen in full at every step;
/// `control` and `lm` are drawn by cyclical batchers. The `*_eval` sets feed
/// checkpoint reports.
struct MaskDatasets {
    std::vector<kg::PromptRecord> target;
    std::vector<kg::PromptRecord> control;
    kg::LMChunkSet lm;
    std::vector<kg::PromptRecord> control_eval;
    kg::LMChunkSet lm_eval;
};

struct CheckpointRecord {
    long step = 0;
    mask::BinaryMask mask;
    eval::CriteriaReport report;
};

struct StepLog {
    long step = 0;
    double lr = 0.0;
    double total = 0.0;
    objectives::LossComponents losses;
};

using StepCallback = std::function<void(const StepLog&)>;
using CheckpointCallback = std::function<void(const CheckpointRecord&)>;

namespace detail {

/// Frozen-model quantities that mask training reuses every step: the residual
/// stream entering the first masked block and the base log-probabilities of
/// each scored row.
template <typename S>
struct CachedSequence {
    std::vector<text::TokenId> tokens;
    Mat<S> hidden;
    std::vector<Index> rows;  // scored rows, relative to the sequence
    std::vector<text::TokenId> gold;
    Mat<S> base_logprobs;     // rows.size() x vocab
};

template <typename S>
std::vector<CachedSequence<S>> cache_kg(const model::ModelView<S>& view, int start_layer,
                                        const std::vector<kg::PromptRecord>& records) {
    std::vector<CachedSequence<S>> out;
    out.reserve(records.size());
    model::Tape<S> tape;
    for (const auto& r : records) {
        CachedSequence<S> c;
        c.tokens = r.tokens;
        c.rows = {static_cast<Index>(r.predictor_position())};
        c.gold = {r.tail_token()};
        model::PackedBatch b;
        b.add(c.tokens);
        c.hidden = model::hidden_at(view, b, start_layer);
        model::forward_from(view, b, c.hidden, start_layer, c.rows, tape);
        c.base_logprobs = model::log_softmax(tape.logits);
        out.push_back(std::move(c));
    }
    return out;
}

template <typename S>
std::vector<CachedSequence<S>> cache_lm(const model::ModelView<S>& view, int start_layer, const kg::LMChunkSet& lm) {
    std::vector<CachedSequence<S>> out;
    out.reserve(lm.chunks.size());
    model::Tape<S> tape;
    for (const auto& chunk : lm.chunks) {
        CachedSequence<S> c;
        c.tokens = chunk;
        model::PackedBatch b;
        b.add(c.tokens);
        c.rows = eval::lm_rows(b);
        c.gold = eval::lm_targets(b);
        c.hidden = model::hidden_at(view, b, start_layer);
        model::forward_from(view, b, c.hidden, start_layer, c.rows, tape);
        c.base_logprobs = model::log_softmax(tape.logits);
        out.push_back(std::move(c));
    }
    return out;
}

/// Several cached sequences packed together, with the scored rows split into
/// one contiguous range per loss term.
template <typename S>
struct StepBatch {
    model::PackedBatch packed;
    Mat<S> hidden;
    std::vector<Index> rows;
    std::vector<int> gold;
    Mat<S> base_logprobs;
    std::array<std::pair<Index, Index>, 3> range{};  // [begin, end) of target, control, lm rows

    void assemble(const std::array<std::vector<const CachedSequence<S>*>, 3>& parts, Index d, Index V) {
        Index n_tok = 0, n_rows = 0;
        for (const auto& part : parts)
            for (const auto* c : part) {
                n_tok += static_cast<Index>(c->tokens.size());
                n_rows += static_cast<Index>(c->rows.size());
            }
        packed = {};
        hidden.resize(n_tok, d);
        base_logprobs.resize(n_rows, V);
        rows.clear();
        gold.clear();
        Index r = 0;
        for (std::size_t p = 0; p < parts.size(); ++p) {
            range[p].first = r;
            for (const auto* c : parts[p]) {
                const Index begin = packed.rows();
                packed.add(c->tokens);
                hidden.middleRows(begin, c->hidden.rows()) = c->hidden;
                for (std::size_t i = 0; i < c->rows.size(); ++i) {
                    rows.push_back(begin + c->rows[i]);
                    gold.push_back(c->gold[i]);
                }
                base_logprobs.middleRows(r, c->base_logprobs.rows()) = c->base_logprobs;
                r += c->base_logprobs.rows();
            }
            range[p].second = r;
        }
    }
};

inline void require_finite(double v, long step, const char* term) {
    require(std::isfinite(v), "diverged",
            "loss term '" + std::string(term) + "' is not finite at step " + std::to_string(step));
}

}  // namespace detail

/// Learns mask logits on a frozen base model. Each step sees the whole
/// TargetKG plus one cyclical batch each of ControlKG and ControlLM, draws one
/// concrete-noise sample (or one per example), evaluates the enabled loss
/// terms on the remaining model (and the subnetwork, for the expression
/// term), and updates only the logits with AdamW. Frozen-mask checkpoints are
/// evaluated as scheduled by `TrainConfig::checkpoint_due`.
template <typename S>
std::vector<CheckpointRecord> train_mask(const model::BasicModelHandle<S>& base, const MaskDatasets& data,
                                         mask::MaskState& state, const objectives::LossWeights& weights,
                                         const objectives::Ablation& ablation, const TrainConfig& cfg,
                                         const StepCallback& on_step = {},
                                         const CheckpointCallback& on_checkpoint = {},
                                         const nlohmann::json& run_metadata = nlohmann::json::object()) {
    cfg.validate();
    weights.validate();
    require(base.frozen(), "not_frozen", "mask training needs a frozen base model");
    require(state.spec_hash == base.spec().hash(), "misaligned_mask", "mask state was built for another model");
    require(!data.target.empty(), "empty_split", "TargetKG is empty");
    require(!data.control.empty(), "empty_split", "ControlKG is empty");
    require(!data.lm.chunks.empty(), "empty_split", "ControlLM is empty");

    const auto& params = base.params();
    const auto& layout = base.layout();
    const auto& spec = base.spec();
    const int start = state.scope.first_layer(spec.n_layers);
    const auto checksum_before = params.checksum();
    const model::ModelView<S> base_view(params);
    const auto g = state.granularity;

    const auto target = detail::cache_kg(base_view, start, data.target);
    const auto control = detail::cache_kg(base_view, start, data.control);
    const auto lm = detail::cache_lm(base_view, start, data.lm);

    eval::EvalContext<S> evaluator(
        params, start,
        eval::standard_sets(data.target, data.control_eval.empty() ? data.control : data.control_eval,
                            data.lm_eval.chunks.empty() ? data.lm : data.lm_eval));

    Rng rng(cfg.seed);
    Rng noise_rng = rng.fork(1);
    CyclicalBatcher control_batches(control.size(), cfg.control_kg_batch, rng.fork(2).next_u64());
    CyclicalBatcher lm_batches(lm.size(), cfg.control_lm_batch, rng.fork(3).next_u64());

    AdamW<double> opt({0.9, 0.999, 1e-8, cfg.weight_decay});
    for (const auto& l : state.logits) opt.add_group(l.size());

    model::Gradients<S> grads(layout, false);
    for (const auto& mod : state.modules) grads.want(mod.slot);

    const nlohmann::json meta_base = [&] {
        nlohmann::json m = run_metadata.is_object() ? run_metadata : nlohmann::json::object();
        m["seed"] = cfg.seed;
        m["lambdas"] = weights.to_json();
        m["ablation"] = ablation.to_json();
        return m;
    }();

    std::vector<CheckpointRecord> records;
    auto checkpoint = [&](long steps_done) {
        auto meta = meta_base;
        meta["steps"] = steps_done;
        CheckpointRecord rec{steps_done, mask::freeze(state, meta), {}};
        rec.report = evaluator.evaluate(rec.mask);
        rec.report.seed = cfg.seed;
        if (meta.contains("config_hash")) rec.report.config_hash = meta["config_hash"];
        if (on_checkpoint) on_checkpoint(rec);
        records.push_back(std::move(rec));
    };

    const Index d = spec.d_model;
    const Index V = spec.vocab_size;
    detail::StepBatch<S> batch;
    model::Tape<S> tape;
    std::vector<Mat<S>> remaining(state.modules.size());
    std::vector<Mat<S>> subnet(state.modules.size());
    mask::UnitValues dvalues(state.logits.size());
    mask::UnitValues grad_logits(state.logits.size());

    for (long step = 0; step < cfg.total_steps; ++step) {
        const auto coef = objectives::coefficients(weights, ablation, step, cfg.total_steps);
        const double tau = state.tau_at(step, cfg.total_steps);

        std::array<std::vector<const detail::CachedSequence<S>*>, 3> parts;
        for (const auto& c : target) parts[0].push_back(&c);
        for (auto i : control_batches.next()) parts[1].push_back(&control[i]);
        for (auto i : lm_batches.next()) parts[2].push_back(&lm[i]);

        // Each group of sequences shares one noise sample.
        std::vector<std::array<std::vector<const detail::CachedSequence<S>*>, 3>> groups;
        if (cfg.noise_mode == NoiseMode::PerStep) {
            groups.push_back(parts);
        } else {
            for (std::size_t p = 0; p < 3; ++p)
                for (const auto* c : parts[p]) {
                    auto& grp = groups.emplace_back();
                    grp[p].push_back(c);
                }
        }
        const double n_target = static_cast<double>(parts[0].size());
        const double n_control = static_cast<double>(parts[1].size());
        double n_lm_rows = 0.0;
        for (const auto* c : parts[2]) n_lm_rows += static_cast<double>(c->rows.size());

        objectives::LossComponents losses;
        for (std::size_t m = 0; m < grad_logits.size(); ++m) grad_logits[m].assign(state.logits[m].size(), 0.0);

        for (const auto& grp : groups) {
            auto st = mask::binarize_st(mask::sample_concrete(state, mask::sample_noise(state, noise_rng), tau), tau);
            for (std::size_t m = 0; m < dvalues.size(); ++m) dvalues[m].assign(state.logits[m].size(), 0.0);
            model::ModelView<S> rem_view(params);
            for (std::size_t m = 0; m < state.modules.size(); ++m) {
                remaining[m] = mask::apply_units(params[state.modules[m].slot], st.values[m], g, true);
                rem_view.substitute(state.modules[m].slot, remaining[m]);
            }
            batch.assemble(grp, d, V);
            model::forward_from(rem_view, batch.packed, batch.hidden, start, batch.rows, tape);

            Mat<S> dlogits = Mat<S>::Zero(tape.logits.rows(), V);
            // Every term is a mean over its rows in the whole step, so a group
            // contributes (rows in group / rows in step) of each mean.
            auto add_term = [&](std::size_t part, double weight, double denom, auto&& fn) -> double {
                const auto [b, e] = batch.range[part];
                if (e == b) return 0.0;
                auto term = fn(tape.logits.middleRows(b, e - b), b, e);
                const double frac = static_cast<double>(e - b) / denom;
                if (weight != 0.0) dlogits.middleRows(b, e - b) += term.dlogits * static_cast<S>(weight * frac);
                return term.value * frac;
            };
            losses.suppress += add_term(0, coef.suppress, n_target, [&](const auto& z, Index, Index) {
                return objectives::suppression_loss<S>(z);
            });
            losses.maintain_kg += add_term(1, coef.maintain_kg, n_control, [&](const auto& z, Index b, Index e) {
                return objectives::maintenance_loss<S>(z, batch.base_logprobs.middleRows(b, e - b));
            });
            losses.maintain_lm += add_term(2, coef.maintain_lm, n_lm_rows, [&](const auto& z, Index b, Index e) {
                return objectives::maintenance_loss<S>(z, batch.base_logprobs.middleRows(b, e - b));
            });

            grads.zero();
            model::backward(rem_view, batch.packed, tape, dlogits, grads);
            // W_eff = (1 - m) * theta, so dL/dm = -theta * dL/dW_eff.
            for (std::size_t m = 0; m < state.modules.size(); ++m) {
                const auto& theta = params[state.modules[m].slot];
                const auto& gw = grads.tensors[state.modules[m].slot];
                auto& dv = dvalues[m];
                if (g == mask::Granularity::Weight) {
                    for (Index i = 0; i < theta.size(); ++i)
                        dv[static_cast<std::size_t>(i)] -=
                            static_cast<double>(theta.data()[i]) * static_cast<double>(gw.data()[i]);
                } else {
                    for (Index r = 0; r < theta.rows(); ++r)
                        dv[static_cast<std::size_t>(r)] -=
                            static_cast<double>(theta.row(r).cwiseProduct(gw.row(r)).sum());
                }
            }

            const auto [tb, te] = batch.range[0];
            if (ablation.with_expression && te > tb) {
                model::ModelView<S> sub_view(params);
                for (std::size_t m = 0; m < state.modules.size(); ++m) {
                    subnet[m] = mask::apply_units(params[state.modules[m].slot], st.values[m], g, false);
                    sub_view.substitute(state.modules[m].slot, subnet[m]);
                }
                std::vector<Index> rows(batch.rows.begin() + tb, batch.rows.begin() + te);
                std::vector<int> gold(batch.gold.begin() + tb, batch.gold.begin() + te);
                model::forward_from(sub_view, batch.packed, batch.hidden, start, rows, tape);
                auto term = objectives::expression_loss<S>(tape.logits, gold);
                const double frac = static_cast<double>(te - tb) / n_target;
                losses.expression += term.value * frac;
                if (coef.expression != 0.0) {
                    term.dlogits *= static_cast<S>(coef.expression * frac);
                    grads.zero();
                    model::backward(sub_view, batch.packed, tape, term.dlogits, grads);
                    // W = m * theta, so dL/dm = theta * dL/dW.
                    for (std::size_t m = 0; m < state.modules.size(); ++m) {
                        const auto& theta = params[state.modules[m].slot];
                        const auto& gw = grads.tensors[state.modules[m].slot];
                        auto& dv = dvalues[m];
                        if (g == mask::Granularity::Weight) {
                            for (Index i = 0; i < theta.size(); ++i)
                                dv[static_cast<std::size_t>(i)] +=
                                    static_cast<double>(theta.data()[i]) * static_cast<double>(gw.data()[i]);
                        } else {
                            for (Index r = 0; r < theta.rows(); ++r)
                                dv[static_cast<std::size_t>(r)] +=
                                    static_cast<double>(theta.row(r).cwiseProduct(gw.row(r)).sum());
                        }
                    }
                }
            }

            // Straight-through: dL/dl = dL/dm * s(1 - s) / tau for this sample.
            const auto dl = st.backward(dvalues);
            for (std::size_t m = 0; m < dl.size(); ++m)
                for (std::size_t i = 0; i < dl[m].size(); ++i) grad_logits[m][i] += dl[m][i];
        }

        const auto sp = objectives::sparsity_loss(state);
        losses.sparsity = sp.value;
        detail::require_finite(losses.suppress, step, "suppress");
        detail::require_finite(losses.maintain_kg, step, "maintain_kg");
        detail::require_finite(losses.maintain_lm, step, "maintain_lm");
        detail::require_finite(losses.sparsity, step, "sparsity");
        detail::require_finite(losses.expression, step, "expression");

        const double lr = cfg.lr_at(step);
        opt.begin_step();
        for (std::size_t m = 0; m < state.logits.size(); ++m) {
            auto& grad = grad_logits[m];
            for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += coef.sparsity * sp.dlogits[m][i];
            opt.update(m, std::span<double>(state.logits[m]), std::span<const double>(grad), lr);
        }

        if (on_step) {
            StepLog log{step, lr, objectives::total_loss(losses, weights, ablation, step, cfg.total_steps), losses};
            on_step(log);
        }
        if (cfg.checkpoint_due(step + 1)) checkpoint(step + 1);
    }

    require(params.checksum() == checksum_before, "base_modified", "base model parameters changed during training");
    return records;
}

/// Floors and ceilings used to pick the best checkpoint, strictest row first.
struct SelectionRow {
    double target_floor;
    double control_kg_ceiling;
    double control_lm_ceiling;
};

struct SelectionTable {
    std::vector<SelectionRow> rows{{35.0, 5.0, 1.0}, {40.0, 7.0, 2.0}, {40.0, 10.0, 3.0}, {50.0, 15.0, 4.0}};
};

struct Selection {
    std::size_t index = 0;           // into the record list
    std::optional<std::size_t> row;  // nullopt: fallback to the last record
};

/// A record passes a row when its TargetKG delta PPL is above the floor and
/// both maintenance deltas are below their ceilings.
inline bool passes(const eval::CriteriaReport& r, const SelectionRow& row) {
    return r.delta_ppl(eval::kTargetKG) > row.target_floor && r.delta_ppl(eval::kControlKG) < row.control_kg_ceiling &&
           r.delta_ppl(eval::kControlLM) < row.control_lm_ceiling;
}

/// Scans rows in order; the first row with any passing record yields the one
/// with the highest TargetKG delta PPL (earliest step on ties). Falls back to
/// the last record.
inline Selection select_checkpoint(const std::vector<eval::CriteriaReport>& reports, const std::vector<long>& steps,
                                   const SelectionTable& table = {}) {
    require(!reports.empty(), "no_checkpoints", "checkpoint selection needs at least one record");
    require(steps.size() == reports.size(), "shape_mismatch", "one step per report");
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        std::optional<std::size_t> best;
        for (std::size_t i = 0; i < reports.size(); ++i) {
            if (!passes(reports[i], table.rows[r])) continue;
            const double v = reports[i].delta_ppl(eval::kTargetKG);
            if (!best) {
                best = i;
                continue;
            }
            const double bv = reports[*best].delta_ppl(eval::kTargetKG);
            if (v > bv || (v == bv && steps[i] < steps[*best])) best = i;
        }
        if (best) return {*best, r};
    }
    return {reports.size() - 1, std::nullopt};
}

inline Selection select_checkpoint(const std::vector<CheckpointRecord>& records, const SelectionTable& table = {}) {
    std::vector<eval::CriteriaReport> reports;
    std::vector<long> steps;
    for (const auto& r : records) {
        reports.push_back(r.report);
        steps.push_back(r.step);
    }
    return select_checkpoint(reports, steps, table);
}

inline const CheckpointRecord& select_best_checkpoint(const std::vector<CheckpointRecord>& records,
                                                      const SelectionTable& table = {}) {
    return records.at(select_checkpoint(records, table).index);
}

}  // namespace kcs::train
