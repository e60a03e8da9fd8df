#include <algorithm>
#include <map>

#include <gtest/gtest.h>

#include "kcs/train/dataloader.hpp"
#include "kcs/train/mask_trainer.hpp"
#include "test_support.hpp"

using namespace kcs;
using namespace kcs::train;

namespace {

eval::CriteriaReport report(double t, double c, double lm) {
    eval::CriteriaReport r;
    r.datasets[eval::kTargetKG].delta_ppl = t;
    r.datasets[eval::kControlKG].delta_ppl = c;
    r.datasets[eval::kControlLM].delta_ppl = lm;
    return r;
}

Selection pick(const std::vector<eval::CriteriaReport>& reports) {
    std::vector<long> steps;
    for (std::size_t i = 0; i < reports.size(); ++i) steps.push_back(100 * static_cast<long>(i + 1));
    return select_checkpoint(reports, steps);
}

mask::MaskState fresh_state(double init = 0.45) {
    const auto& run = kcs::testing::tiny_run();
    return mask::init_mask(run.model, mask::MaskScope{}, init, mask::Granularity::Weight, 1.0, 0);
}

TrainConfig short_config(long steps, std::uint64_t seed) {
    TrainConfig cfg;
    cfg.total_steps = steps;
    cfg.eval_every = 5;
    cfg.control_kg_batch = 8;
    cfg.control_lm_batch = 2;
    cfg.seed = seed;
    return cfg;
}

}  // namespace

TEST(Warmup, LinearFromStartToPeak) {
    TrainConfig cfg;
    cfg.total_steps = 2000;
    EXPECT_EQ(cfg.warmup_steps(), 200);
    EXPECT_DOUBLE_EQ(cfg.lr_at(0), 1e-10);
    EXPECT_NEAR(cfg.lr_at(100), 1e-10 + (0.2 - 1e-10) * 0.5, 1e-15);
    EXPECT_DOUBLE_EQ(cfg.lr_at(200), 0.2);
    EXPECT_DOUBLE_EQ(cfg.lr_at(1999), 0.2);
    cfg.total_steps = 15;
    EXPECT_EQ(cfg.warmup_steps(), 2);
    cfg.warmup_fraction = 0.0;
    EXPECT_DOUBLE_EQ(cfg.lr_at(0), 0.2);
}

TEST(Checkpoints, DueFromStartFractionAndAtEnd) {
    TrainConfig cfg;
    cfg.total_steps = 1050;
    cfg.eval_every = 100;
    std::vector<long> due;
    for (long s = 1; s <= cfg.total_steps; ++s)
        if (cfg.checkpoint_due(s)) due.push_back(s);
    EXPECT_EQ(due, (std::vector<long>{600, 700, 800, 900, 1000, 1050}));
    cfg.checkpoint_start_fraction = 0.0;
    EXPECT_TRUE(cfg.checkpoint_due(100));
}

TEST(Selection, SingleRecordPassesFirstRow) {
    const auto s = pick({report(36, 4, 0.5)});
    EXPECT_EQ(s.index, 0u);
    ASSERT_TRUE(s.row.has_value());
    EXPECT_EQ(*s.row, 0u);
}

TEST(Selection, EachLooserRowIsReached) {
    // row 2 (40, 7, 2)
    auto s = pick({report(45, 6, 1.5), report(30, 1, 0.1)});
    EXPECT_EQ(s.index, 0u);
    EXPECT_EQ(s.row, std::optional<std::size_t>(1));
    // row 3 (40, 10, 3)
    s = pick({report(60, 12, 0.5), report(45, 8, 2.5), report(41, 9, 0.2)});
    EXPECT_EQ(s.index, 1u);
    EXPECT_EQ(s.row, std::optional<std::size_t>(2));
    // row 4 (50, 15, 4)
    s = pick({report(55, 12, 3.5), report(45, 12, 0.5)});
    EXPECT_EQ(s.index, 0u);
    EXPECT_EQ(s.row, std::optional<std::size_t>(3));
}

TEST(Selection, AllFailingFallsBackToLast) {
    const auto s = pick({report(100, 50, 0.1), report(10, 0, 0), report(60, 20, 9)});
    EXPECT_EQ(s.index, 2u);
    EXPECT_FALSE(s.row.has_value());
}

TEST(Selection, MaximizesTargetAndPrefersEarliestOnTies) {
    EXPECT_EQ(pick({report(40, 1, 0.1), report(50, 1, 0.1)}).index, 1u);
    EXPECT_EQ(pick({report(50, 1, 0.1), report(50, 2, 0.2), report(49, 0, 0)}).index, 0u);
    // thresholds are strict
    EXPECT_FALSE(pick({report(35, 4, 0.5)}).row == std::optional<std::size_t>(0));
    EXPECT_FALSE(pick({report(36, 5, 0.5)}).row == std::optional<std::size_t>(0));
    EXPECT_THROW(pick({}), Error);
}

TEST(Dataloader, ShortFinalBatchThenFreshPermutation) {
    CyclicalBatcher b(10, 4, 7);
    std::vector<std::size_t> sizes;
    std::vector<std::size_t> epoch1;
    for (int i = 0; i < 3; ++i) {
        const auto batch = b.next();
        sizes.push_back(batch.size());
        epoch1.insert(epoch1.end(), batch.begin(), batch.end());
    }
    EXPECT_EQ(sizes, (std::vector<std::size_t>{4, 4, 2}));
    std::sort(epoch1.begin(), epoch1.end());
    for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(epoch1[i], i);
    EXPECT_EQ(b.epoch(), 1);
    EXPECT_EQ(b.next().size(), 4u);
    EXPECT_EQ(b.epoch(), 2);
}

TEST(Dataloader, EveryEpochCoversTheDatasetOnce) {
    CyclicalBatcher b(23, 5, 1);
    std::vector<std::vector<std::size_t>> orders;
    for (int epoch = 0; epoch < 6; ++epoch) {
        std::map<std::size_t, int> seen;
        std::vector<std::size_t> order;
        for (int k = 0; k < 5; ++k)
            for (auto i : b.next()) {
                ++seen[i];
                order.push_back(i);
            }
        ASSERT_EQ(seen.size(), 23u);
        for (const auto& [i, n] : seen) EXPECT_EQ(n, 1);
        orders.push_back(order);
    }
    EXPECT_NE(orders[0], orders[1]);
}

TEST(Dataloader, LargeBatchIsWholeDatasetReshuffled) {
    CyclicalBatcher b(6, 10, 3);
    const auto a = b.next();
    const auto c = b.next();
    EXPECT_EQ(a.size(), 6u);
    EXPECT_EQ(c.size(), 6u);
    EXPECT_TRUE(std::is_permutation(a.begin(), a.end(), c.begin()));
    EXPECT_THROW(CyclicalBatcher(0, 2, 1), Error);
}

TEST(TrainMask, PureSparsityDecreasesDensityMonotonically) {
    const auto& run = kcs::testing::tiny_run();
    auto st = fresh_state();
    objectives::LossWeights w;
    w.lambda1 = w.lambda2 = w.lambda3 = 0.0;
    auto cfg = short_config(40, 1);
    cfg.warmup_fraction = 0.0;
    std::vector<double> density;
    train_mask(run.model, run.data, st, w, {}, cfg, [&](const StepLog& l) { density.push_back(l.losses.sparsity); });
    ASSERT_EQ(density.size(), 40u);
    EXPECT_NEAR(density.front(), 0.45, 1e-9);
    for (std::size_t i = 1; i < density.size(); ++i) EXPECT_LT(density[i], density[i - 1]);
    EXPECT_LT(objectives::sparsity_loss(st).value, 0.01);
}

TEST(TrainMask, SuppressionStepIsADescentStep) {
    // One step on the suppression term alone, re-evaluated with the same noise.
    const auto& run = kcs::testing::tiny_run();
    objectives::LossWeights w;
    w.lambda2 = w.lambda3 = w.lambda4_start = w.lambda4_end = 0.0;
    int decreased = 0;
    const int trials = 100;
    for (int t = 0; t < trials; ++t) {
        auto st = fresh_state();
        auto cfg = short_config(1, 1000 + static_cast<std::uint64_t>(t));
        cfg.warmup_fraction = 0.0;
        cfg.lr = 0.05;
        double before = 0.0, after = 0.0;
        train_mask(run.model, run.data, st, w, {}, cfg, [&](const StepLog& l) { before = l.losses.suppress; });
        train_mask(run.model, run.data, st, w, {}, cfg, [&](const StepLog& l) { after = l.losses.suppress; });
        decreased += after < before;
    }
    EXPECT_GE(decreased, 99) << decreased << " of " << trials;
}

TEST(TrainMask, ReproducibleAndReportsReevaluate) {
    const auto& run = kcs::testing::tiny_run();
    auto a = fresh_state();
    auto b = fresh_state();
    const auto cfg = short_config(20, 5);
    const auto checksum = run.model.params().checksum();
    const auto ra = train_mask(run.model, run.data, a, {}, {}, cfg);
    const auto rb = train_mask(run.model, run.data, b, {}, {}, cfg);
    EXPECT_EQ(run.model.params().checksum(), checksum);
    ASSERT_EQ(ra.size(), 3u);  // steps 10, 15, 20
    ASSERT_EQ(ra.size(), rb.size());
    for (std::size_t i = 0; i < ra.size(); ++i) {
        EXPECT_EQ(ra[i].step, rb[i].step);
        EXPECT_EQ(ra[i].mask, rb[i].mask);
        EXPECT_EQ(ra[i].report, rb[i].report);
    }
    EXPECT_EQ(a.logits, b.logits);

    const auto again = eval::delta_metrics(run.model, ra.back().mask,
                                           eval::standard_sets(run.data.target, run.data.control_eval, run.data.lm_eval));
    for (const auto& [name, m] : ra.back().report.datasets)
        EXPECT_NEAR(again.at(name).delta_ppl, m.delta_ppl, 1e-6 * std::max(1.0, std::abs(m.remaining_ppl))) << name;
    EXPECT_DOUBLE_EQ(again.sparsity, ra.back().report.sparsity);

    auto c = fresh_state();
    const auto rc = train_mask(run.model, run.data, c, {}, {}, short_config(20, 6));
    EXPECT_NE(a.logits, c.logits);
}

TEST(TrainMask, PerExampleNoiseRuns) {
    const auto& run = kcs::testing::tiny_run();
    auto st = fresh_state();
    auto cfg = short_config(3, 2);
    cfg.noise_mode = NoiseMode::PerExample;
    const auto recs = train_mask(run.model, run.data, st, {}, {}, cfg);
    ASSERT_EQ(recs.size(), 1u);
    EXPECT_EQ(recs.front().step, 3);
}

TEST(TrainMask, RejectsBadInputs) {
    const auto& run = kcs::testing::tiny_run();
    auto st = fresh_state();
    auto cfg = short_config(2, 1);
    cfg.lr = 0.0;
    EXPECT_THROW(train_mask(run.model, run.data, st, {}, {}, cfg), Error);
    auto data = run.data;
    data.target.clear();
    EXPECT_THROW(train_mask(run.model, data, st, {}, {}, short_config(2, 1)), Error);
    auto unfrozen = model::ModelHandle::random(run.model.spec(), run.model.vocab(), 1);
    EXPECT_THROW(train_mask(unfrozen, run.data, st, {}, {}, short_config(2, 1)), Error);
}
