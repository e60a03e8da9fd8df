#include <cmath>
#include <filesystem>
#include <limits>
#include <functional>
#include <map>
#include <set>

#include <gtest/gtest.h>

#include "kcs/core/rng.hpp"
#include "kcs/kg/pipeline.hpp"
#include "kcs/kg/verbalize.hpp"
#include "kcs/synth/world.hpp"

using namespace kcs;
using namespace kcs::kg;

namespace {

KnowledgeTriplet T(std::string h, std::string r, std::string t) { return {std::move(h), std::move(r), std::move(t)}; }

// Enumerates every walk of up to `depth` edges from `seed` in one direction,
// without a visited set; a walk stops at an edge whose tail is disallowed.
void walks(const std::vector<KnowledgeTriplet>& edges, const std::string& node, int left, bool upward,
           const std::function<bool(const std::string&)>& ok, TripletSet& out) {
    if (left == 0) return;
    for (const auto& e : edges) {
        if ((upward ? e.head : e.tail) != node || !ok(e.tail)) continue;
        out.insert(e);
        walks(edges, upward ? e.tail : e.head, left - 1, upward, ok, out);
    }
}

TripletSet walk_oracle(const std::vector<KnowledgeTriplet>& edges, const std::string& seed, int depth,
                       const std::function<bool(const std::string&)>& ok) {
    TripletSet out;
    walks(edges, seed, depth, true, ok, out);
    walks(edges, seed, depth, false, ok, out);
    return out;
}

}  // namespace

TEST(SampleTargetKG, ChainFromMiddleNode) {
    Graph g({T("a", "IsA", "b"), T("b", "IsA", "c"), T("c", "IsA", "d"), T("d", "IsA", "e")});
    const auto got = sample_target_kg(g, "c", 3);
    const TripletSet want{T("a", "IsA", "b"), T("b", "IsA", "c"), T("c", "IsA", "d"), T("d", "IsA", "e")};
    EXPECT_EQ(got, want);
}

TEST(SampleTargetKG, DepthLimitsHops) {
    Graph g({T("a", "IsA", "b"), T("b", "IsA", "c"), T("c", "IsA", "d"), T("d", "IsA", "e")});
    const TripletSet want{T("b", "IsA", "c"), T("c", "IsA", "d")};
    EXPECT_EQ(sample_target_kg(g, "c", 1), want);
}

TEST(SampleTargetKG, IsolatedNodeGivesEmptySet) {
    Graph h({T("a", "IsA", "b"), T("q", "IsA", "b")});
    EXPECT_TRUE(sample_target_kg(h, "a", 3, [](const std::string& e) { return e != "b"; }).empty());
}

TEST(SampleTargetKG, UnknownSeedRaises) {
    Graph g({T("a", "IsA", "b")});
    try {
        sample_target_kg(g, "zz", 3);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "unknown_node");
    }
}

TEST(SampleTargetKG, MatchesWalkEnumerationOnRandomGraphs) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        std::vector<KnowledgeTriplet> edges;
        const int n = 12;
        for (int i = 0; i < 24; ++i) {
            const auto h = "n" + std::to_string(rng.below(n));
            const auto t = "n" + std::to_string(rng.below(n));
            edges.push_back(T(h, rng.below(2) ? "IsA" : "PartOf", t));
        }
        Graph g(edges);
        const std::vector<KnowledgeTriplet> unique(g.edges().begin(), g.edges().end());
        const auto ok = [](const std::string& e) { return e != "n3"; };
        for (const auto& node : g.nodes())
            for (int depth = 1; depth <= 3; ++depth)
                EXPECT_EQ(sample_target_kg(g, node, depth, ok), walk_oracle(unique, node, depth, ok))
                    << "seed " << seed << " node " << node << " depth " << depth;
    }
}

TEST(SampleTargetKG, DefaultFilterDropsMultiWordTails) {
    Graph g({T("a.n.01", "IsA", "big_thing.n.01"), T("a.n.01", "PartOf", "whole.n.01")});
    EXPECT_EQ(sample_target_kg(g, "a.n.01", 3), (TripletSet{T("a.n.01", "PartOf", "whole.n.01")}));
}

TEST(FilterManyToOne, KeepsSmallestTailPerHeadRelation) {
    EXPECT_EQ(filter_many_to_one({T("a", "r", "b")}), (TripletSet{T("a", "r", "b")}));
    EXPECT_EQ(filter_many_to_one({T("a", "r", "c"), T("a", "r", "b")}), (TripletSet{T("a", "r", "b")}));
    const TripletSet shared{T("a", "r", "b"), T("c", "r", "b")};
    EXPECT_EQ(filter_many_to_one(shared), shared);
}

TEST(FilterManyToOne, EveryHeadRelationGroupIsUnique) {
    Rng rng(4);
    TripletSet in;
    for (int i = 0; i < 200; ++i)
        in.insert(T("h" + std::to_string(rng.below(15)), "r" + std::to_string(rng.below(3)),
                    "t" + std::to_string(rng.below(20))));
    const auto out = filter_many_to_one(in);
    std::map<std::pair<std::string, std::string>, std::string> smallest;
    for (const auto& t : in) {
        auto [it, fresh] = smallest.emplace(std::make_pair(t.head, t.relation), t.tail);
        if (!fresh && t.tail < it->second) it->second = t.tail;
    }
    ASSERT_EQ(out.size(), smallest.size());
    for (const auto& t : out) EXPECT_EQ(smallest.at({t.head, t.relation}), t.tail);
}

TEST(BalanceTailFrequency, CapsAtSeventyFifthPercentile) {
    TripletSet in;
    for (int i = 0; i < 8; ++i) in.insert(T("h" + std::to_string(i), "r", "b"));
    for (const char* tail : {"c", "d", "e"})
        for (int i = 0; i < 2; ++i) in.insert(T(std::string("x") + tail + std::to_string(i), "r", tail));
    // counts {8,2,2,2}: sorted 2,2,2,8; position 0.75*3 = 2.25 -> 2 + 0.25*6 = 3.5 -> cap 3
    EXPECT_DOUBLE_EQ(percentile({8, 2, 2, 2}, 75.0), 3.5);
    const auto out = balance_tail_frequency(in, 75.0);
    std::map<std::string, int> counts;
    for (const auto& t : out) ++counts[t.tail];
    EXPECT_EQ(counts["b"], 3);
    EXPECT_EQ(counts["c"], 2);
    EXPECT_EQ(counts["d"], 2);
    EXPECT_EQ(counts["e"], 2);
    EXPECT_TRUE(out.contains(T("h0", "r", "b")) && out.contains(T("h1", "r", "b")) && out.contains(T("h2", "r", "b")));
}

TEST(BalanceTailFrequency, DistinctTailsAndEmptyUnchanged) {
    const TripletSet distinct{T("a", "r", "x"), T("b", "r", "y"), T("c", "r", "z")};
    EXPECT_EQ(balance_tail_frequency(distinct), distinct);
    EXPECT_TRUE(balance_tail_frequency({}).empty());
}

TEST(BalanceTailFrequency, NeverExceedsFlooredPercentile) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        TripletSet in;
        for (int i = 0; i < 120; ++i)
            in.insert(T("h" + std::to_string(i), "r", "t" + std::to_string(rng.below(1 + rng.below(12)))));
        std::map<std::string, int> before, after;
        for (const auto& t : in) ++before[t.tail];
        std::vector<double> counts;
        for (const auto& [_, c] : before) counts.push_back(c);
        const double cap = std::max(1.0, std::floor(percentile(counts, 75.0)));
        for (const auto& t : balance_tail_frequency(in)) ++after[t.tail];
        for (const auto& [tail, c] : after) EXPECT_LE(c, cap);
    }
}

TEST(BuildControlKG, DropsTargetEntities) {
    const TripletSet target{T("house", "IsA", "building")};
    const TripletSet global{T("house", "IsA", "building"), T("crate", "IsA", "box")};
    const auto c = build_control_kg(global, {target}, 0.0, 1);
    EXPECT_EQ(c.train, (TripletSet{T("crate", "IsA", "box")}));
    EXPECT_TRUE(c.val.empty());
}

TEST(BuildControlKG, TargetEqualToGlobalRaises) {
    const TripletSet all{T("a", "r", "b"), T("b", "r", "c")};
    try {
        build_control_kg(all, {all}, 0.1, 1);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "not_viable");
    }
}

TEST(BuildControlKG, EntityDisjointAndPartitioned) {
    const auto world = synth::make_world({});
    Graph g(world.edges, world.aliases);
    const auto target = sample_target_kg(g, world.roots[0], 3);
    const auto c = build_control_kg(g.edges(), {target}, 0.1, 9);
    const auto banned = entities_of(target);
    for (const auto* part : {&c.train, &c.val})
        for (const auto& t : *part) {
            EXPECT_FALSE(banned.contains(t.head));
            EXPECT_FALSE(banned.contains(t.tail));
        }
    for (const auto& t : c.val) EXPECT_FALSE(c.train.contains(t));
    EXPECT_FALSE(c.val.empty());
    EXPECT_EQ(build_control_kg(g.edges(), {target}, 0.1, 9).val, c.val);
}

TEST(ChunkControlLM, DropsTrailingPartialChunk) {
    std::vector<text::TokenId> toks(1024);
    EXPECT_EQ(chunk_control_lm(toks, 512).chunks.size(), 2u);
    toks.push_back(0);
    EXPECT_EQ(chunk_control_lm(toks, 512).chunks.size(), 2u);

    std::vector<text::TokenId> ten{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    const auto c = chunk_control_lm(ten, 4);
    ASSERT_EQ(c.chunks.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(c.chunks[i][j], static_cast<text::TokenId>(4 * i + j));
}

TEST(ChunkControlLM, ShortCorpusRaises) {
    EXPECT_THROW(chunk_control_lm({1, 2, 3}, 4), Error);
    EXPECT_THROW(chunk_control_lm({1, 2, 3}, 1), Error);
}

TEST(ChunkControlLM, SplitHoldsOutTail) {
    std::vector<text::TokenId> toks(40);
    for (int i = 0; i < 40; ++i) toks[i] = i;
    const auto all = chunk_control_lm(toks, 4);
    const auto [train, held] = split_lm_chunks(all, 0.2);
    EXPECT_EQ(train.chunks.size(), 8u);
    EXPECT_EQ(held.chunks.size(), 2u);
    EXPECT_EQ(held.chunks.back().back(), 39);
}

namespace {

text::Vocabulary small_vocab() {
    return text::Vocabulary::build({"a map is a kind of document", "map things are flat", "the chart is one kind of"},
                                   {"map", "document", "flat"});
}

}  // namespace

TEST(Verbalize, RendersTailAsFinalToken) {
    const auto vocab = small_vocab();
    const auto rec = render(T("map.n.01", "IsA", "document.n.01"), {"IsA", "k", "a {h} is a kind of {t}."}, vocab,
                            "map", "document");
    ASSERT_TRUE(rec.has_value());
    EXPECT_EQ(rec->tokens.front(), text::Vocabulary::kBos);
    EXPECT_EQ(rec->tail_position, static_cast<int>(rec->tokens.size()) - 1);
    EXPECT_EQ(rec->tail_token(), vocab.id_of("document"));
    EXPECT_EQ(rec->predictor_position(), rec->tail_position - 1);
}

TEST(Verbalize, RejectsMultiTokenOrMidSentenceTail) {
    const auto vocab = small_vocab();
    const auto t = T("map.n.01", "IsA", "document.n.01");
    EXPECT_FALSE(render(t, {"IsA", "p", "most {h}s are {t}s"}, vocab, "map", "document").has_value());
    EXPECT_FALSE(render(t, {"IsA", "m", "{t} is what a {h} is"}, vocab, "map", "document").has_value());
    EXPECT_FALSE(render(t, {"IsA", "k", "a {h} is a kind of {t}"}, vocab, "map", "zyxwv").has_value());
}

TEST(Verbalize, PicksLowestTailPerplexity) {
    const auto vocab = small_vocab();
    Graph g({T("map.n.01", "IsA", "document.n.01")});
    const std::vector<Template> tmpls{{"IsA", "first", "a {h} is a kind of {t}"}, {"IsA", "second", "{h} is a kind of {t}"}};
    const TailPplScorer scorer = [](const std::vector<PromptRecord>& recs) {
        std::vector<double> out;
        for (const auto& r : recs) out.push_back(r.template_id == "first" ? 4.1 : 2.7);
        return out;
    };
    const auto best = verbalize_best(T("map.n.01", "IsA", "document.n.01"), tmpls, vocab, g, scorer);
    EXPECT_EQ(best.template_id, "second");
    EXPECT_DOUBLE_EQ(best.base_tail_ppl, 2.7);

    const auto single = verbalize_best(T("map.n.01", "IsA", "document.n.01"), {tmpls[0]}, vocab, g, scorer);
    EXPECT_EQ(single.template_id, "first");
}

TEST(Verbalize, NoValidTemplateRaises) {
    const auto vocab = small_vocab();
    Graph g({T("map.n.01", "IsA", "document.n.01")});
    const TailPplScorer scorer = [](const std::vector<PromptRecord>& r) { return std::vector<double>(r.size(), 1.0); };
    try {
        verbalize_best(T("map.n.01", "IsA", "document.n.01"), {{"IsA", "p", "most {h}s are {t}s"}}, vocab, g, scorer);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "no_valid_template");
    }
}

TEST(Verbalize, FilterByPplDropsAbovePercentile) {
    std::vector<PromptRecord> recs(5);
    const double ppl[] = {1.0, 2.0, 3.0, 4.0, 50.0};
    for (int i = 0; i < 5; ++i) recs[i].base_tail_ppl = ppl[i];
    // 95th percentile of {1,2,3,4,50}: 4 + 0.8 * 46 = 40.8
    const auto kept = filter_by_ppl(recs, 95.0);
    ASSERT_EQ(kept.size(), 4u);
    EXPECT_DOUBLE_EQ(kept.back().base_tail_ppl, 4.0);
}

TEST(Verbalize, RecordFileRoundTrip) {
    const auto vocab = small_vocab();
    auto rec = *render(T("map.n.01", "IsA", "document.n.01"), {"IsA", "k", "a {h} is a kind of {t}"}, vocab, "map",
                       "document");
    rec.base_tail_ppl = 1.25;
    auto nan_rec = rec;
    nan_rec.base_tail_ppl = std::numeric_limits<double>::quiet_NaN();
    const auto path = std::filesystem::temp_directory_path() / "kcs_records_test.jsonl";
    write_records(path, {rec, nan_rec});
    const auto back = read_records(path);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0], rec);
    EXPECT_TRUE(std::isnan(back[1].base_tail_ppl));
    std::filesystem::remove(path);
}

TEST(Graph, SurfaceFallsBackToLemma) {
    Graph g({T("ice_cream.n.01", "IsA", "food.n.02")}, {{"food.n.02", "meal"}});
    EXPECT_EQ(g.surface("ice_cream.n.01"), "ice cream");
    EXPECT_EQ(g.surface("food.n.02"), "meal");
    EXPECT_EQ(g.surface("plain"), "plain");
}
