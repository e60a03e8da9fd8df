#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kcs/core/error.hpp"
#include "kcs/eval/scoring.hpp"
#include "kcs/kg/pipeline.hpp"
#include "kcs/kg/triplet.hpp"
#include "kcs/kg/verbalize.hpp"
#include "kcs/mask/apply.hpp"
#include "kcs/mask/binary_mask.hpp"
#include "kcs/model/handle.hpp"
#include "kcs/model/transformer.hpp"

namespace kcs::eval {

inline constexpr const char* kTargetKG = "TargetKG";
inline constexpr const char* kControlKG = "ControlKG";
inline constexpr const char* kControlLM = "ControlLM";

struct DatasetMetrics {
    double base_ppl = 0.0;
    double remaining_ppl = 0.0;
    double delta_ppl = 0.0;
    std::optional<double> delta_rank;     // KG datasets only
    std::optional<double> delta_logprob;  // KG datasets only

    /// (remaining - base) / base.
    double relative_increase() const { return delta_ppl / base_ppl; }

    nlohmann::json to_json() const {
        nlohmann::json j = {{"base_ppl", base_ppl}, {"remaining_ppl", remaining_ppl}, {"delta_ppl", delta_ppl}};
        if (delta_rank) j["delta_rank"] = *delta_rank;
        if (delta_logprob) j["delta_logprob"] = *delta_logprob;
        return j;
    }
    static DatasetMetrics from_json(const nlohmann::json& j) {
        DatasetMetrics m;
        m.base_ppl = j.at("base_ppl");
        m.remaining_ppl = j.at("remaining_ppl");
        m.delta_ppl = j.at("delta_ppl");
        if (j.contains("delta_rank")) m.delta_rank = j.at("delta_rank").get<double>();
        if (j.contains("delta_logprob")) m.delta_logprob = j.at("delta_logprob").get<double>();
        return m;
    }
    bool operator==(const DatasetMetrics&) const = default;
};

/// Metrics of one mask against its base model. `sparsity` is a percentage of
/// the maskable (in-scope dense) parameters.
struct CriteriaReport {
    double sparsity = 0.0;
    std::map<std::string, DatasetMetrics> datasets;
    nlohmann::json mask_ref = nlohmann::json::object();
    std::string config_hash;
    std::uint64_t seed = 0;

    const DatasetMetrics& at(const std::string& name) const {
        auto it = datasets.find(name);
        require(it != datasets.end(), "missing_metric", "report has no dataset " + name);
        return it->second;
    }
    double delta_ppl(const std::string& name) const { return at(name).delta_ppl; }

    nlohmann::json to_json() const {
        nlohmann::json ds = nlohmann::json::object();
        for (const auto& [name, m] : datasets) ds[name] = m.to_json();
        return {{"mask_ref", mask_ref},
                {"sparsity", sparsity},
                {"datasets", ds},
                {"config_hash", config_hash},
                {"seed", seed}};
    }
    static CriteriaReport from_json(const nlohmann::json& j) {
        CriteriaReport r;
        r.mask_ref = j.value("mask_ref", nlohmann::json::object());
        r.sparsity = j.at("sparsity");
        for (const auto& [name, m] : j.at("datasets").items()) r.datasets[name] = DatasetMetrics::from_json(m);
        r.config_hash = j.value("config_hash", "");
        r.seed = j.value("seed", std::uint64_t{0});
        return r;
    }
    bool operator==(const CriteriaReport&) const = default;
};

/// A named evaluation set: KG prompts scored on the tail, or LM chunks scored
/// on every next token.
struct EvalSet {
    std::string name;
    std::vector<kg::PromptRecord> records;
    kg::LMChunkSet chunks;
    bool is_lm = false;

    static EvalSet kg(std::string name, std::vector<kg::PromptRecord> records) {
        return {std::move(name), std::move(records), {}, false};
    }
    static EvalSet lm(std::string name, kg::LMChunkSet chunks) { return {std::move(name), {}, std::move(chunks), true}; }
};

/// Evaluates masks against a fixed base model. The residual stream entering
/// `start_layer` is computed once per batch and the base scores are cached, so
/// each evaluation only runs the masked blocks. Base and remaining models see
/// identical batches, so an empty mask yields deltas of exactly zero.
template <typename S>
class EvalContext {
public:
    EvalContext(const model::ParameterSet<S>& base, int start_layer, std::vector<EvalSet> sets,
                std::size_t kg_batch = 64, std::size_t lm_batch = 16)
        : base_(&base), start_layer_(start_layer) {
        require(start_layer >= 0 && start_layer <= base.layout->spec().n_layers, "bad_layer",
                "evaluation start layer out of range");
        const model::ModelView<S> view(base);
        for (auto& set : sets) {
            Cached c;
            c.name = set.name;
            c.is_lm = set.is_lm;
            if (set.is_lm) {
                require(!set.chunks.chunks.empty(), "empty_split", "evaluation set " + set.name + " is empty");
                for (std::size_t b = 0; b < set.chunks.chunks.size(); b += lm_batch) {
                    Batch batch;
                    for (std::size_t i = b; i < std::min(set.chunks.chunks.size(), b + lm_batch); ++i)
                        batch.packed.add(set.chunks.chunks[i]);
                    batch.rows = lm_rows(batch.packed);
                    batch.gold = lm_targets(batch.packed);
                    c.batches.push_back(std::move(batch));
                }
            } else {
                require(!set.records.empty(), "empty_split", "evaluation set " + set.name + " is empty");
                for (std::size_t b = 0; b < set.records.size(); b += kg_batch) {
                    Batch batch;
                    std::vector<const kg::PromptRecord*> ptrs;
                    for (std::size_t i = b; i < std::min(set.records.size(), b + kg_batch); ++i) {
                        batch.packed.add(set.records[i].tokens);
                        ptrs.push_back(&set.records[i]);
                        batch.gold.push_back(set.records[i].tail_token());
                    }
                    batch.rows = tail_rows(batch.packed, ptrs);
                    c.batches.push_back(std::move(batch));
                }
            }
            for (auto& batch : c.batches) batch.hidden = model::hidden_at(view, batch.packed, start_layer_);
            c.base = score(view, c);
            sets_.push_back(std::move(c));
        }
    }

    int start_layer() const { return start_layer_; }
    const model::ParameterSet<S>& base() const { return *base_; }

    /// Metrics of the remaining model (1 - m) * theta.
    CriteriaReport evaluate(const mask::BinaryMask& m) const {
        mask::require_aligned(*base_->layout, m);
        for (const auto& mod : m.modules())
            require(base_->layout->info(mod.slot).layer >= start_layer_, "bad_layer",
                    "mask module " + mod.path + " lies below the cached evaluation layer");
        const auto remaining = mask::remaining_model(*base_, m);
        auto report = evaluate_view(remaining.view());
        report.sparsity = 100.0 * m.sparsity();
        report.mask_ref = {{"metadata", m.metadata()}};
        return report;
    }

    /// Metrics of an arbitrary remaining-model view that agrees with the base
    /// below `start_layer`.
    CriteriaReport evaluate_view(const model::ModelView<S>& remaining) const {
        CriteriaReport report;
        for (const auto& c : sets_) {
            const auto rem = score(remaining, c);
            DatasetMetrics dm;
            dm.base_ppl = std::exp(c.base.nll.mean());
            dm.remaining_ppl = std::exp(rem.nll.mean());
            dm.delta_ppl = dm.remaining_ppl - dm.base_ppl;
            if (!c.is_lm) {
                double dr = 0.0, dl = 0.0;
                for (std::size_t i = 0; i < rem.tails.size(); ++i) {
                    dr += rem.tails[i].rank - c.base.tails[i].rank;
                    dl += rem.tails[i].logprob - c.base.tails[i].logprob;
                }
                dm.delta_rank = dr / static_cast<double>(rem.tails.size());
                dm.delta_logprob = dl / static_cast<double>(rem.tails.size());
            }
            report.datasets[c.name] = dm;
        }
        return report;
    }

    /// Per-record base tail scores of a KG set, in input order.
    const std::vector<TailScore>& base_tails(const std::string& name) const { return find(name).base.tails; }

private:
    struct Batch {
        PackedBatch packed;
        std::vector<Index> rows;
        std::vector<text::TokenId> gold;
        Mat<S> hidden;
    };
    struct Scores {
        NllSum nll;
        std::vector<TailScore> tails;
    };
    struct Cached {
        std::string name;
        bool is_lm = false;
        std::vector<Batch> batches;
        Scores base;
    };

    const Cached& find(const std::string& name) const {
        for (const auto& c : sets_)
            if (c.name == name) return c;
        throw Error("missing_metric", "no evaluation set named " + name);
    }

    Scores score(const model::ModelView<S>& view, const Cached& c) const {
        Scores out;
        model::Tape<S> tape;
        for (const auto& b : c.batches) {
            model::forward_from(view, b.packed, b.hidden, start_layer_, b.rows, tape);
            for (std::size_t i = 0; i < b.rows.size(); ++i) {
                const auto row = tape.logits.row(static_cast<Index>(i));
                const double lp = gold_logprob(row, b.gold[i]);
                out.nll.sum -= lp;
                ++out.nll.count;
                if (!c.is_lm) out.tails.push_back({lp, gold_rank(row, b.gold[i])});
            }
        }
        return out;
    }

    const model::ParameterSet<S>* base_;
    int start_layer_;
    std::vector<Cached> sets_;
};

/// The three standard sets of a run.
inline std::vector<EvalSet> standard_sets(std::vector<kg::PromptRecord> target, std::vector<kg::PromptRecord> control,
                                          kg::LMChunkSet lm) {
    std::vector<EvalSet> sets;
    sets.push_back(EvalSet::kg(kTargetKG, std::move(target)));
    sets.push_back(EvalSet::kg(kControlKG, std::move(control)));
    sets.push_back(EvalSet::lm(kControlLM, std::move(lm)));
    return sets;
}

/// One-shot evaluation of `m` against `base` on the given sets.
template <typename S>
CriteriaReport delta_metrics(const model::BasicModelHandle<S>& base, const mask::BinaryMask& m,
                             std::vector<EvalSet> sets) {
    const int start = m.scope().first_layer(base.spec().n_layers);
    EvalContext<S> ctx(base.params(), start, std::move(sets));
    return ctx.evaluate(m);
}

struct ParaphraseResult {
    std::map<std::string, std::map<std::string, DatasetMetrics>> per_template;  // dataset -> template -> metrics
    std::map<std::string, DatasetMetrics> aggregate;  // dataset -> metrics over all paraphrase prompts
    std::map<std::string, std::size_t> skipped;       // template id -> triplets it could not render

    nlohmann::json to_json() const {
        nlohmann::json j;
        for (const auto& [ds, per] : per_template)
            for (const auto& [t, m] : per) j["per_template"][ds][t] = m.to_json();
        for (const auto& [ds, m] : aggregate) j["aggregate"][ds] = m.to_json();
        j["skipped"] = skipped;
        return j;
    }
};

/// Re-renders each dataset's triplets with every paraphrase template and
/// compares base and remaining models on them. Templates that cannot render a
/// triplet with a single-token tail are skipped and counted.
template <typename S>
ParaphraseResult paraphrase_eval(const model::BasicModelHandle<S>& base, const mask::BinaryMask& m,
                                 const std::map<std::string, std::vector<kg::KnowledgeTriplet>>& datasets,
                                 const std::vector<kg::Template>& paraphrases, const kg::Graph& names) {
    ParaphraseResult result;
    std::vector<EvalSet> sets;
    std::map<std::string, std::vector<kg::PromptRecord>> pooled;
    for (const auto& [ds, triplets] : datasets) {
        for (const auto& tmpl : paraphrases) {
            std::vector<kg::PromptRecord> recs;
            for (const auto& t : triplets) {
                if (t.relation != tmpl.relation) continue;
                if (auto r = kg::render(t, tmpl, base.vocab(), names.surface(t.head), names.surface(t.tail)))
                    recs.push_back(std::move(*r));
                else
                    ++result.skipped[tmpl.id];
            }
            if (recs.empty()) continue;
            pooled[ds].insert(pooled[ds].end(), recs.begin(), recs.end());
            sets.push_back(EvalSet::kg(ds + "/" + tmpl.id, std::move(recs)));
        }
    }
    require(!pooled.empty(), "no_valid_template", "no paraphrase template renders any triplet");
    for (auto& [ds, recs] : pooled) sets.push_back(EvalSet::kg(ds, std::move(recs)));

    const auto report = delta_metrics(base, m, std::move(sets));
    for (const auto& [name, metrics] : report.datasets) {
        const auto slash = name.find('/');
        if (slash == std::string::npos)
            result.aggregate[name] = metrics;
        else
            result.per_template[name.substr(0, slash)][name.substr(slash + 1)] = metrics;
    }
    return result;
}

}  // namespace kcs::eval
