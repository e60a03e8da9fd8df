#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "kcs/core/error.hpp"
#include "kcs/core/rng.hpp"
#include "kcs/kg/triplet.hpp"
#include "kcs/text/tokenizer.hpp"

namespace kcs::kg {

/// Predicate deciding whether an entity may appear as a tail (single token).
using TailFilter = std::function<bool(const std::string& entity)>;

/// Default tail filter: the entity's surface form is one whitespace-free word.
inline TailFilter single_word_tails(const Graph& graph) {
    return [&graph](const std::string& entity) {
        const auto words = text::split_words(graph.surface(entity));
        return words.size() == 1;
    };
}

/// Collects every triplet reachable from `seed` by walking up to `depth` hops
/// towards parents (head -> tail) and up to `depth` hops towards children
/// (tail -> head). Edges with a disallowed tail are dropped and not walked
/// through.
inline TripletSet sample_target_kg(const Graph& graph, const std::string& seed, int depth, const TailFilter& tail_ok) {
    require(graph.contains(seed), "unknown_node", "seed node not in graph: " + seed);
    require(depth >= 1, "bad_config", "walk depth must be >= 1");

    TripletSet out;
    auto walk = [&](bool upward) {
        std::set<std::string> visited{seed};
        std::vector<std::string> frontier{seed};
        for (int hop = 0; hop < depth && !frontier.empty(); ++hop) {
            std::vector<std::string> next;
            for (const auto& node : frontier) {
                const auto& edges = upward ? graph.outgoing(node) : graph.incoming(node);
                for (const auto& e : edges) {
                    if (!tail_ok(e.tail)) continue;
                    out.insert(e);
                    const auto& other = upward ? e.tail : e.head;
                    if (visited.insert(other).second) next.push_back(other);
                }
            }
            frontier = std::move(next);
        }
    };
    walk(true);
    walk(false);
    return out;
}

inline TripletSet sample_target_kg(const Graph& graph, const std::string& seed, int depth = 3) {
    return sample_target_kg(graph, seed, depth, single_word_tails(graph));
}

/// Keeps one tail per (head, relation): the lexicographically smallest.
inline TripletSet filter_many_to_one(const TripletSet& triplets) {
    TripletSet out;
    const KnowledgeTriplet* last = nullptr;
    // set order is (head, relation, tail): the first of each group has the smallest tail
    for (const auto& t : triplets) {
        if (last != nullptr && last->head == t.head && last->relation == t.relation) continue;
        out.insert(t);
        last = &t;
    }
    return out;
}

/// Linear-interpolation percentile (the usual "linear" definition), q in [0, 100].
inline double percentile(std::vector<double> values, double q) {
    require(!values.empty(), "empty", "percentile of empty set");
    std::sort(values.begin(), values.end());
    const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

/// Caps the number of triplets sharing a tail at floor(q-th percentile of the
/// per-tail counts), minimum 1. Survivors are the lexicographically smallest
/// (head, relation) of each tail group.
inline TripletSet balance_tail_frequency(const TripletSet& triplets, double q = 75.0) {
    if (triplets.empty()) return {};
    std::map<std::string, int> counts;
    for (const auto& t : triplets) ++counts[t.tail];
    std::vector<double> values;
    values.reserve(counts.size());
    for (const auto& [tail, c] : counts) values.push_back(c);
    const int cap = std::max(1, static_cast<int>(std::floor(percentile(values, q))));

    TripletSet out;
    std::map<std::string, int> kept;
    for (const auto& t : triplets)
        if (kept[t.tail]++ < cap) out.insert(t);
    return out;
}

struct ControlKG {
    TripletSet train;
    TripletSet val;
};

/// Removes every triplet touching an entity of any target KG and splits the
/// remainder into a seeded train/validation partition.
inline ControlKG build_control_kg(const TripletSet& global_kg, const std::vector<TripletSet>& target_kgs,
                                  double val_fraction, std::uint64_t seed) {
    require(!global_kg.empty(), "empty_input", "global KG is empty");
    require(val_fraction >= 0.0 && val_fraction < 1.0, "bad_config", "control_val_fraction must be in [0, 1)");
    std::set<std::string> banned;
    for (const auto& kg : target_kgs) {
        auto e = entities_of(kg);
        banned.insert(e.begin(), e.end());
    }
    std::vector<KnowledgeTriplet> pool;
    for (const auto& t : global_kg)
        if (!banned.contains(t.head) && !banned.contains(t.tail)) pool.push_back(t);
    require(!pool.empty(), "not_viable", "no control triplets remain after removing target entities");

    const auto n = pool.size();
    std::size_t n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
    if (val_fraction > 0.0) n_val = std::max<std::size_t>(n_val, 1);
    n_val = std::min(n_val, n - 1);

    Rng rng(seed);
    const auto picked = rng.sample_without_replacement(n, n_val);
    std::vector<bool> is_val(n, false);
    for (auto i : picked) is_val[i] = true;
    ControlKG out;
    for (std::size_t i = 0; i < n; ++i) (is_val[i] ? out.val : out.train).insert(pool[i]);
    return out;
}

struct LMChunkSet {
    std::vector<std::vector<text::TokenId>> chunks;
    int chunk_len = 512;
};

/// Partitions a token stream into consecutive chunks; the trailing partial
/// chunk is dropped.
inline LMChunkSet chunk_control_lm(const std::vector<text::TokenId>& tokens, int chunk_len) {
    require(chunk_len >= 2, "bad_config", "chunk_len must be >= 2");
    require(tokens.size() >= static_cast<std::size_t>(chunk_len), "corpus_too_short",
            "corpus has " + std::to_string(tokens.size()) + " tokens, fewer than one chunk of " +
                std::to_string(chunk_len));
    LMChunkSet out;
    out.chunk_len = chunk_len;
    const std::size_t n = tokens.size() / static_cast<std::size_t>(chunk_len);
    out.chunks.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto begin = tokens.begin() + static_cast<std::ptrdiff_t>(i * chunk_len);
        out.chunks.emplace_back(begin, begin + chunk_len);
    }
    return out;
}

/// Deterministic train/eval split of LM chunks: the last `eval_fraction` of
/// chunks (at least one) are held out.
inline std::pair<LMChunkSet, LMChunkSet> split_lm_chunks(const LMChunkSet& all, double eval_fraction) {
    require(all.chunks.size() >= 2, "corpus_too_short", "need at least two LM chunks to split train/eval");
    auto n_eval = static_cast<std::size_t>(std::llround(eval_fraction * static_cast<double>(all.chunks.size())));
    n_eval = std::clamp<std::size_t>(n_eval, 1, all.chunks.size() - 1);
    LMChunkSet train{{}, all.chunk_len};
    LMChunkSet eval{{}, all.chunk_len};
    const auto cut = all.chunks.size() - n_eval;
    train.chunks.assign(all.chunks.begin(), all.chunks.begin() + static_cast<std::ptrdiff_t>(cut));
    eval.chunks.assign(all.chunks.begin() + static_cast<std::ptrdiff_t>(cut), all.chunks.end());
    return {train, eval};
}

}  // namespace kcs::kg
