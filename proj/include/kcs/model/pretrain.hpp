#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kcs/core/error.hpp"
#include "kcs/eval/scoring.hpp"
#include "kcs/kg/pipeline.hpp"
#include "kcs/kg/verbalize.hpp"
#include "kcs/model/handle.hpp"
#include "kcs/model/transformer.hpp"
#include "kcs/train/adamw.hpp"
#include "kcs/train/dataloader.hpp"

namespace kcs::model {

struct PretrainConfig {
    long max_steps = 3000;
    double lr = 3e-3;
    double warmup_fraction = 0.05;
    double weight_decay = 0.0;
    std::size_t kg_batch = 64;
    std::size_t lm_batch = 8;
    std::uint64_t seed = 0;
    double memorization_ppl = 2.0;  // every check group must end below this
    double stop_ppl = 1.05;         // early stop once every group is at or below this
    long check_every = 100;
    double grad_clip = 1.0;

    nlohmann::json to_json() const {
        return {{"max_steps", max_steps},       {"lr", lr},
                {"warmup_fraction", warmup_fraction}, {"weight_decay", weight_decay},
                {"kg_batch", kg_batch},         {"lm_batch", lm_batch},
                {"seed", seed},                 {"memorization_ppl", memorization_ppl},
                {"stop_ppl", stop_ppl},         {"check_every", check_every},
                {"grad_clip", grad_clip}};
    }
};

struct PretrainResult {
    long steps = 0;
    std::vector<double> group_ppl;
};

using PretrainLog = std::function<void(long step, double loss, const std::vector<double>& group_ppl)>;

namespace detail {

/// Mean cross-entropy over `rows` against `gold`; writes d(loss)/d(logits)
/// scaled by `weight / rows`.
template <typename S>
double cross_entropy(const Mat<S>& logits, const std::vector<text::TokenId>& gold, double weight, Mat<S>& dlogits) {
    const auto n = logits.rows();
    dlogits.resize(n, logits.cols());
    double total = 0.0;
    const S scale = static_cast<S>(weight / static_cast<double>(n));
    for (Index r = 0; r < n; ++r) {
        const S mx = logits.row(r).maxCoeff();
        auto e = (logits.row(r).array() - mx).exp();
        const S sum = e.sum();
        dlogits.row(r) = (e / sum).matrix() * scale;
        dlogits(r, gold[static_cast<std::size_t>(r)]) -= scale;
        total -= static_cast<double>(logits(r, gold[static_cast<std::size_t>(r)]) - mx) - std::log(static_cast<double>(sum));
    }
    return total / static_cast<double>(n);
}

}  // namespace detail

/// Trains the toy model on tail prediction for `kg_corpus` plus next-token
/// prediction on `lm`, until every check group's tail perplexity drops to
/// `stop_ppl` or `max_steps` run out. Freezes the model on success; raises
/// "not_memorized" if a group is still at or above `memorization_ppl`.
template <typename S>
PretrainResult pretrain_toy(BasicModelHandle<S>& model, const std::vector<kg::PromptRecord>& kg_corpus,
                            const kg::LMChunkSet& lm, const PretrainConfig& cfg,
                            std::vector<std::span<const kg::PromptRecord>> check_groups = {},
                            const PretrainLog& log = {}) {
    require(!kg_corpus.empty(), "empty_corpus", "pretraining needs a non-empty KG corpus");
    require(cfg.max_steps >= 0, "bad_config", "max_steps must be >= 0");
    if (check_groups.empty()) check_groups.emplace_back(kg_corpus);

    auto& params = model.mutable_params();
    const auto& layout = model.layout();
    train::AdamW<S> opt({0.9, 0.999, 1e-8, cfg.weight_decay});
    for (const auto& t : params.tensors) opt.add_group(static_cast<std::size_t>(t.size()));

    train::CyclicalBatcher kg_batches(kg_corpus.size(), cfg.kg_batch, cfg.seed);
    std::optional<train::CyclicalBatcher> lm_batches;
    if (!lm.chunks.empty()) lm_batches.emplace(lm.chunks.size(), cfg.lm_batch, cfg.seed + 1);

    const long warmup = static_cast<long>(std::ceil(cfg.warmup_fraction * static_cast<double>(cfg.max_steps)));
    Gradients<S> grads(layout);
    Tape<S> tape;
    Mat<S> dlogits;
    PretrainResult result;

    auto measure = [&] {
        std::vector<double> ppl;
        const auto view = model.view();
        for (const auto& g : check_groups) ppl.push_back(eval::kg_perplexity(view, g));
        return ppl;
    };
    auto done = [&](const std::vector<double>& ppl) {
        for (double p : ppl)
            if (!(p <= cfg.stop_ppl)) return false;
        return true;
    };

    long step = 0;
    for (; step < cfg.max_steps; ++step) {
        if (cfg.check_every > 0 && step > 0 && step % cfg.check_every == 0) {
            result.group_ppl = measure();
            if (done(result.group_ppl)) break;
        }
        for (std::size_t slot = 0; slot < grads.tensors.size(); ++slot) {
            const auto& info = layout.info(slot);
            grads.buffer(slot, info.rows, info.cols).setZero();
        }
        const ModelView<S> view(params);
        double loss = 0.0;

        {
            PackedBatch batch;
            std::vector<const kg::PromptRecord*> recs;
            std::vector<text::TokenId> gold;
            for (auto i : kg_batches.next()) {
                batch.add(kg_corpus[i].tokens);
                recs.push_back(&kg_corpus[i]);
                gold.push_back(kg_corpus[i].tail_token());
            }
            const auto rows = eval::tail_rows(batch, recs);
            forward(view, batch, rows, tape);
            loss += detail::cross_entropy(tape.logits, gold, 1.0, dlogits);
            backward(view, batch, tape, dlogits, grads);
        }
        if (lm_batches) {
            PackedBatch batch;
            for (auto i : lm_batches->next()) batch.add(lm.chunks[i]);
            const auto rows = eval::lm_rows(batch);
            forward(view, batch, rows, tape);
            loss += detail::cross_entropy(tape.logits, eval::lm_targets(batch), 1.0, dlogits);
            backward(view, batch, tape, dlogits, grads);
        }
        require(std::isfinite(loss), "diverged", "pretraining loss is not finite at step " + std::to_string(step));

        double scale = 1.0;
        if (cfg.grad_clip > 0.0) {
            double sq = 0.0;
            for (const auto& g : grads.tensors) sq += static_cast<double>(g.squaredNorm());
            const double norm = std::sqrt(sq);
            if (norm > cfg.grad_clip) scale = cfg.grad_clip / norm;
        }
        const double lr = train::warmup_lr(step, warmup, cfg.lr, cfg.lr * 1e-3);
        opt.begin_step();
        for (std::size_t slot = 0; slot < params.tensors.size(); ++slot) {
            auto& g = grads.tensors[slot];
            if (scale != 1.0) g *= static_cast<S>(scale);
            opt.update(slot, std::span<S>(params[slot].data(), static_cast<std::size_t>(params[slot].size())),
                       std::span<const S>(g.data(), static_cast<std::size_t>(g.size())), lr);
        }
        if (log && (step % 50 == 0)) log(step, loss, result.group_ppl);
    }
    result.steps = step;
    result.group_ppl = measure();
    if (log) log(step, std::numeric_limits<double>::quiet_NaN(), result.group_ppl);
    for (std::size_t g = 0; g < result.group_ppl.size(); ++g)
        require(result.group_ppl[g] < cfg.memorization_ppl, "not_memorized",
                "base model not memorized: group " + std::to_string(g) + " tail PPL " +
                    std::to_string(result.group_ppl[g]) + " >= " + std::to_string(cfg.memorization_ppl) + " after " +
                    std::to_string(step) + " steps");
    model.metadata()["pretrain"] = cfg.to_json();
    model.metadata()["pretrain_steps"] = step;
    model.freeze();
    return result;
}

}  // namespace kcs::model
