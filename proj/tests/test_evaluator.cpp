#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "kcs/eval/evaluator.hpp"
#include "kcs/eval/scoring.hpp"
#include "kcs/mask/apply.hpp"
#include "test_support.hpp"

using namespace kcs;
using kcs::testing::record;
using kcs::testing::table_model;

namespace {

// p(next | current) for a 4-token vocabulary
std::vector<std::vector<double>> four_token_table() {
    return {{0.25, 0.25, 0.25, 0.25}, {0.1, 0.2, 0.5, 0.2}, {0.2, 0.2, 0.1, 0.5}, {0.25, 0.25, 0.25, 0.25}};
}

mask::BinaryMask random_bits(const mask::BinaryMask& like, std::uint64_t seed, double p) {
    std::mt19937_64 gen(seed);
    std::bernoulli_distribution coin(p);
    std::vector<mask::BitVector> bits;
    for (std::size_t m = 0; m < like.modules().size(); ++m) {
        mask::BitVector b(like.bits(m).size());
        for (std::size_t i = 0; i < b.size(); ++i)
            if (coin(gen)) b.set(i);
        bits.push_back(std::move(b));
    }
    return {like.spec_hash(), like.scope(), like.granularity(), like.modules(), std::move(bits)};
}

}  // namespace

TEST(Scoring, TwoTokenTailLogprob) {
    const auto p = table_model({{0.5, 0.5}, {0.9, 0.1}});
    const model::ModelView<double> view(p);
    const auto r = record({0, 1, 0});
    EXPECT_NEAR(eval::tail_logprob(view, r), std::log(0.9), 1e-9);
    const auto s = eval::score_tails(view, std::span<const kg::PromptRecord>(&r, 1));
    EXPECT_EQ(s[0].rank, 1);
}

TEST(Scoring, KGPerplexityOfTwoPrompts) {
    const auto p = table_model(four_token_table());
    const model::ModelView<double> view(p);
    // p(2 | 1) = 0.5 and p(1 | 3) = 0.25
    const std::vector<kg::PromptRecord> recs{record({0, 1, 2}), record({0, 3, 1})};
    const double want = std::exp(-(std::log(0.5) + std::log(0.25)) / 2);
    EXPECT_NEAR(want, 2.8284, 1e-4);
    EXPECT_NEAR(eval::kg_perplexity(view, std::span<const kg::PromptRecord>(recs)), want, 1e-9);
}

TEST(Scoring, LMPerplexityOfOneChunk) {
    const auto p = table_model(four_token_table());
    const model::ModelView<double> view(p);
    kg::LMChunkSet chunks{{{1, 2, 3, 1}}, 4};
    const double want = std::exp(-(2 * std::log(0.5) + std::log(0.25)) / 3);
    EXPECT_NEAR(want, 2.52, 5e-3);
    EXPECT_NEAR(eval::lm_perplexity(view, chunks), want, 1e-9);
}

TEST(Scoring, UniformModelPerplexityIsVocabSize) {
    const int V = 6;
    const auto p = table_model(std::vector<std::vector<double>>(V, std::vector<double>(V, 1.0 / V)));
    const model::ModelView<double> view(p);
    const std::vector<kg::PromptRecord> recs{record({0, 2, 5}), record({0, 4, 1, 3})};
    EXPECT_NEAR(eval::kg_perplexity(view, std::span<const kg::PromptRecord>(recs)), V, 1e-9);
    kg::LMChunkSet chunks{{{1, 2, 3, 4, 5}, {5, 4, 3, 2, 1}}, 5};
    EXPECT_NEAR(eval::lm_perplexity(view, chunks), V, 1e-9);
}

TEST(Scoring, RankBreaksTiesByTokenId) {
    const auto p = table_model(four_token_table());
    const model::ModelView<double> view(p);
    const std::vector<kg::PromptRecord> recs{record({0, 1, 2}), record({0, 1, 3}), record({0, 3, 0}),
                                             record({0, 3, 2}), record({0, 1, 0})};
    const auto s = eval::score_tails(view, std::span<const kg::PromptRecord>(recs));
    EXPECT_EQ(s[0].rank, 1);  // 0.5
    EXPECT_EQ(s[1].rank, 3);  // 0.2 tied with token 1
    EXPECT_EQ(s[2].rank, 1);  // uniform row, lowest id
    EXPECT_EQ(s[3].rank, 3);
    EXPECT_EQ(s[4].rank, 4);
}

TEST(Scoring, EmptySplitRaises) {
    const auto p = table_model(four_token_table());
    const model::ModelView<double> view(p);
    EXPECT_THROW(eval::kg_perplexity(view, std::span<const kg::PromptRecord>()), Error);
    EXPECT_THROW(eval::lm_perplexity(view, kg::LMChunkSet{}), Error);
}

TEST(Evaluator, EmptyMaskGivesExactZeroDeltas) {
    const auto& run = kcs::testing::tiny_run();
    const auto empty = mask::empty_mask(run.model.layout(), mask::MaskScope{}, mask::Granularity::Weight);
    const auto r = eval::delta_metrics(run.model, empty,
                                       eval::standard_sets(run.data.target, run.data.control_eval, run.data.lm_eval));
    EXPECT_EQ(r.sparsity, 100.0);
    for (const auto& [name, m] : r.datasets) {
        EXPECT_EQ(m.delta_ppl, 0.0) << name;
        EXPECT_EQ(m.remaining_ppl, m.base_ppl) << name;
        if (m.delta_rank) {
            EXPECT_EQ(*m.delta_rank, 0.0);
            EXPECT_EQ(*m.delta_logprob, 0.0);
        }
    }
    EXPECT_FALSE(r.at(eval::kControlLM).delta_rank.has_value());
}

TEST(Evaluator, CachedContextAgreesWithFullForward) {
    const auto& run = kcs::testing::tiny_run();
    const auto empty = mask::empty_mask(run.model.layout(), mask::MaskScope{}, mask::Granularity::Weight);
    const auto sets = eval::standard_sets(run.data.target, run.data.control_eval, run.data.lm_eval);
    const eval::EvalContext<float> ctx(run.model.params(), 1, sets);
    const auto& recs = run.data.target;
    for (std::uint64_t s = 0; s < 3; ++s) {
        const auto m = random_bits(empty, s, 0.05 * static_cast<double>(s + 1));
        const auto r = ctx.evaluate(m);
        const auto rem = mask::remaining_model(run.model.params(), m);
        const double full_t = eval::kg_perplexity(rem.view(), std::span<const kg::PromptRecord>(recs));
        const double full_lm = eval::lm_perplexity(rem.view(), run.data.lm_eval);
        EXPECT_NEAR(r.at(eval::kTargetKG).remaining_ppl, full_t, 1e-4 * full_t);
        EXPECT_NEAR(r.at(eval::kControlLM).remaining_ppl, full_lm, 1e-4 * full_lm);
        EXPECT_NEAR(r.sparsity, 100.0 * (1.0 - static_cast<double>(m.set_weights()) / m.maskable_count()), 1e-9);
        const int V = run.model.spec().vocab_size;
        for (const auto& [name, dm] : r.datasets) {
            EXPECT_NEAR(dm.remaining_ppl - dm.base_ppl, dm.delta_ppl, 1e-9 * std::max(1.0, dm.remaining_ppl));
            if (dm.delta_rank) {
                EXPECT_GE(*dm.delta_rank, 1 - V);
                EXPECT_LE(*dm.delta_rank, V - 1);
            }
        }
    }
}

TEST(Evaluator, RanksStayInBounds) {
    const auto& run = kcs::testing::tiny_run();
    const int V = run.model.spec().vocab_size;
    const auto s = eval::score_tails(run.model.view(), std::span<const kg::PromptRecord>(run.data.target));
    for (const auto& t : s) {
        EXPECT_GE(t.rank, 1);
        EXPECT_LE(t.rank, V);
        EXPECT_LE(t.logprob, 0.0);
    }
}

TEST(Evaluator, MaskBelowCachedLayerRaises) {
    const auto& run = kcs::testing::tiny_run();
    const auto sets = eval::standard_sets(run.data.target, run.data.control_eval, run.data.lm_eval);
    const eval::EvalContext<float> ctx(run.model.params(), 1, sets);
    const auto all_layers = mask::empty_mask(run.model.layout(), mask::MaskScope{1.0}, mask::Granularity::Weight);
    EXPECT_THROW(ctx.evaluate(all_layers), Error);
}

TEST(Evaluator, ReportJsonRoundTrip) {
    eval::CriteriaReport r;
    r.sparsity = 97.25;
    r.datasets["TargetKG"] = {1.5, 9.0, 7.5, 12.0, -2.0};
    r.datasets["ControlLM"] = {3.0, 3.1, 0.1 + 1e-17, std::nullopt, std::nullopt};
    r.config_hash = "abc";
    r.seed = 4;
    r.mask_ref = {{"metadata", {{"seed", 4}}}};
    EXPECT_EQ(eval::CriteriaReport::from_json(nlohmann::json::parse(r.to_json().dump())), r);
}

TEST(Paraphrase, TrainingTemplateReproducesDeltaMetrics) {
    const auto& run = kcs::testing::tiny_run();
    const auto& tmpl = run.world.templates.front();
    std::vector<kg::KnowledgeTriplet> triplets;
    std::vector<kg::PromptRecord> recs;
    for (const auto& r : run.data.target) {
        if (r.triplet.relation != tmpl.relation) continue;
        if (auto rec = kg::render(r.triplet, tmpl, run.model.vocab(), run.graph.surface(r.triplet.head),
                                  run.graph.surface(r.triplet.tail))) {
            triplets.push_back(r.triplet);
            recs.push_back(*rec);
        }
    }
    ASSERT_FALSE(recs.empty());
    const auto empty = mask::empty_mask(run.model.layout(), mask::MaskScope{}, mask::Granularity::Weight);
    const auto m = random_bits(empty, 9, 0.2);
    const auto para = eval::paraphrase_eval(run.model, m, {{"TargetKG", triplets}}, {tmpl}, run.graph);
    const auto direct = eval::delta_metrics(run.model, m, {eval::EvalSet::kg("TargetKG", recs)});
    EXPECT_EQ(para.aggregate.at("TargetKG"), direct.at("TargetKG"));
    EXPECT_EQ(para.per_template.at("TargetKG").at(tmpl.id), direct.at("TargetKG"));
}

TEST(Paraphrase, InvalidTemplatesAreCountedOrRaise) {
    const auto& run = kcs::testing::tiny_run();
    const auto empty = mask::empty_mask(run.model.layout(), mask::MaskScope{}, mask::Granularity::Weight);
    std::vector<kg::KnowledgeTriplet> triplets;
    for (const auto& r : run.data.target) triplets.push_back(r.triplet);
    const auto rel = triplets.front().relation;
    const kg::Template bad{rel, "bad", "{t} and then {h} follows"};
    EXPECT_THROW(eval::paraphrase_eval(run.model, empty, {{"TargetKG", triplets}}, {bad}, run.graph), Error);

    kg::Template good;
    for (const auto& t : run.world.templates)
        if (t.id == run.data.target.front().template_id) good = t;
    const auto res = eval::paraphrase_eval(run.model, empty, {{"TargetKG", triplets}}, {good, bad}, run.graph);
    std::size_t n_rel = 0;
    for (const auto& t : triplets) n_rel += t.relation == rel;
    EXPECT_EQ(res.skipped.at("bad"), n_rel);
    EXPECT_EQ(res.per_template.at("TargetKG").count("bad"), 0u);
    EXPECT_EQ(res.aggregate.at("TargetKG").delta_ppl, 0.0);
}
