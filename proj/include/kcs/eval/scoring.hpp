#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "kcs/core/error.hpp"
#include "kcs/kg/pipeline.hpp"
#include "kcs/kg/verbalize.hpp"
#include "kcs/model/transformer.hpp"

namespace kcs::eval {

using model::Index;
using model::Mat;
using model::ModelView;
using model::PackedBatch;

struct TailScore {
    double logprob = 0.0;
    int rank = 0;  // 1 = most probable; ties broken by ascending token id
};

/// Rank of `gold` in a row of scores.
template <typename Row>
int gold_rank(const Row& scores, int gold) {
    const auto g = scores(gold);
    int rank = 1;
    for (Index v = 0; v < scores.size(); ++v) {
        const auto x = scores(v);
        if (x > g || (x == g && v < gold)) ++rank;
    }
    return rank;
}

/// log p(gold) from a row of logits, accumulated in double.
template <typename Row>
double gold_logprob(const Row& logits, int gold) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Index v = 0; v < logits.size(); ++v) mx = std::max(mx, static_cast<double>(logits(v)));
    double sum = 0.0;
    for (Index v = 0; v < logits.size(); ++v) sum += std::exp(static_cast<double>(logits(v)) - mx);
    return static_cast<double>(logits(gold)) - mx - std::log(sum);
}

struct NllSum {
    double sum = 0.0;
    long count = 0;

    double mean() const { return count == 0 ? 0.0 : sum / static_cast<double>(count); }
    double perplexity() const { return std::exp(mean()); }
};

/// Row scored for each record of a packed batch of prompts.
inline std::vector<Index> tail_rows(const PackedBatch& batch, std::span<const kg::PromptRecord* const> records) {
    std::vector<Index> rows;
    rows.reserve(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) rows.push_back(batch.begin(i) + records[i]->predictor_position());
    return rows;
}

/// Rows scored for LM chunks: every position with a next token.
inline std::vector<Index> lm_rows(const PackedBatch& batch) {
    std::vector<Index> rows;
    for (std::size_t s = 0; s < batch.sequences(); ++s)
        for (Index i = 0; i + 1 < batch.length(s); ++i) rows.push_back(batch.begin(s) + i);
    return rows;
}

inline std::vector<text::TokenId> lm_targets(const PackedBatch& batch) {
    std::vector<text::TokenId> out;
    for (std::size_t s = 0; s < batch.sequences(); ++s)
        for (Index i = 0; i + 1 < batch.length(s); ++i)
            out.push_back(batch.tokens[static_cast<std::size_t>(batch.begin(s) + i + 1)]);
    return out;
}

/// Gold-tail log-probability and rank for every record (full forward pass).
template <typename S>
std::vector<TailScore> score_tails(const ModelView<S>& view, std::span<const kg::PromptRecord> records,
                                   std::size_t batch_size = 64) {
    std::vector<TailScore> out;
    out.reserve(records.size());
    model::Tape<S> tape;
    for (std::size_t start = 0; start < records.size(); start += batch_size) {
        const std::size_t end = std::min(records.size(), start + batch_size);
        PackedBatch batch;
        std::vector<const kg::PromptRecord*> ptrs;
        for (std::size_t i = start; i < end; ++i) {
            const auto& r = records[i];
            require(r.tail_position >= 1 && r.tail_position < static_cast<int>(r.tokens.size()), "bad_record",
                    "tail_position out of range");
            batch.add(r.tokens);
            ptrs.push_back(&r);
        }
        const auto rows = tail_rows(batch, ptrs);
        model::forward(view, batch, rows, tape);
        for (std::size_t i = 0; i < ptrs.size(); ++i) {
            const auto row = tape.logits.row(static_cast<Index>(i));
            out.push_back({gold_logprob(row, ptrs[i]->tail_token()), gold_rank(row, ptrs[i]->tail_token())});
        }
    }
    return out;
}

template <typename S>
double tail_logprob(const ModelView<S>& view, const kg::PromptRecord& record) {
    return score_tails(view, std::span<const kg::PromptRecord>(&record, 1)).front().logprob;
}

/// exp of the mean tail cross-entropy.
template <typename S>
double kg_perplexity(const ModelView<S>& view, std::span<const kg::PromptRecord> records) {
    require(!records.empty(), "empty_split", "perplexity of an empty KG split");
    NllSum acc;
    for (const auto& s : score_tails(view, records)) {
        acc.sum -= s.logprob;
        ++acc.count;
    }
    return acc.perplexity();
}

template <typename S>
NllSum lm_nll(const ModelView<S>& view, const kg::LMChunkSet& chunks, std::size_t batch_size = 16) {
    NllSum acc;
    model::Tape<S> tape;
    for (std::size_t start = 0; start < chunks.chunks.size(); start += batch_size) {
        const std::size_t end = std::min(chunks.chunks.size(), start + batch_size);
        PackedBatch batch;
        for (std::size_t i = start; i < end; ++i) batch.add(chunks.chunks[i]);
        const auto rows = lm_rows(batch);
        const auto gold = lm_targets(batch);
        model::forward(view, batch, rows, tape);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            acc.sum -= gold_logprob(tape.logits.row(static_cast<Index>(i)), gold[i]);
            ++acc.count;
        }
    }
    return acc;
}

/// exp of the mean next-token cross-entropy over all positions of all chunks.
template <typename S>
double lm_perplexity(const ModelView<S>& view, const kg::LMChunkSet& chunks) {
    require(!chunks.chunks.empty(), "empty_split", "perplexity of an empty LM chunk set");
    return lm_nll(view, chunks).perplexity();
}

}  // namespace kcs::eval
