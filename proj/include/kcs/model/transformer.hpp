#pragma once

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "kcs/core/error.hpp"
#include "kcs/model/layout.hpp"
#include "kcs/text/tokenizer.hpp"

namespace kcs::model {

using text::TokenId;
using Index = Eigen::Index;

/// Several token sequences packed row-wise: dense maps run on one
/// (total_tokens x d) matrix, attention runs per sequence block.
struct PackedBatch {
    std::vector<TokenId> tokens;
    std::vector<int> positions;
    std::vector<Index> offsets{0};

    void add(std::span<const TokenId> seq) {
        for (std::size_t i = 0; i < seq.size(); ++i) {
            tokens.push_back(seq[i]);
            positions.push_back(static_cast<int>(i));
        }
        offsets.push_back(static_cast<Index>(tokens.size()));
    }

    Index rows() const { return static_cast<Index>(tokens.size()); }
    std::size_t sequences() const { return offsets.size() - 1; }
    Index begin(std::size_t s) const { return offsets[s]; }
    Index length(std::size_t s) const { return offsets[s + 1] - offsets[s]; }
};

template <typename S>
struct BlockTape {
    Mat<S> x_in;
    Mat<S> ln1_xhat;
    Vec<S> ln1_rstd;
    Mat<S> h1;
    Mat<S> qkv;
    std::vector<Mat<S>> probs;  // [sequence * n_heads + head]
    Mat<S> att;
    Mat<S> x_mid;
    Mat<S> ln2_xhat;
    Vec<S> ln2_rstd;
    Mat<S> h2;
    Mat<S> fc_pre;
    Mat<S> fc_act;
};

/// Activations kept by `forward` for `backward`.
template <typename S>
struct Tape {
    int start_layer = 0;
    std::vector<BlockTape<S>> blocks;
    Mat<S> x_out;
    Mat<S> lnf_xhat;
    Vec<S> lnf_rstd;
    Mat<S> hf;
    std::vector<Index> score_rows;
    Mat<S> logits;  // score_rows.size() x vocab
};

/// Gradient buffers aligned to a layout. Slots with `wanted[slot] == false`
/// are skipped entirely.
template <typename S>
struct Gradients {
    std::vector<Mat<S>> tensors;
    std::vector<bool> wanted;

    Gradients() = default;
    explicit Gradients(const ParamLayout& layout, bool all = true) : wanted(layout.size(), all) {
        tensors.resize(layout.size());
    }

    void want(std::size_t slot) { wanted[slot] = true; }

    Mat<S>& buffer(std::size_t slot, Index rows, Index cols) {
        auto& t = tensors[slot];
        if (t.rows() != rows || t.cols() != cols) t = Mat<S>::Zero(rows, cols);
        return t;
    }

    void zero() {
        for (auto& t : tensors) t.setZero();
    }

    /// Lowest transformer block holding a wanted slot; 0 when embeddings are
    /// wanted.
    int lowest_layer(const ParamLayout& layout) const {
        int lowest = layout.spec().n_layers;
        for (std::size_t slot = 0; slot < wanted.size(); ++slot) {
            if (!wanted[slot]) continue;
            const auto& info = layout.info(slot);
            if (info.cls == ParamClass::Embedding) return 0;
            if (info.layer >= 0) lowest = std::min(lowest, info.layer);
        }
        return lowest;
    }
};

namespace detail {

constexpr double kLnEps = 1e-5;

template <typename S>
void layer_norm(const Mat<S>& x, const Mat<S>& gain, const Mat<S>& bias, Mat<S>& xhat, Vec<S>& rstd, Mat<S>& y) {
    const Index n = x.rows();
    const Index d = x.cols();
    xhat.resize(n, d);
    rstd.resize(n);
    y.resize(n, d);
    for (Index r = 0; r < n; ++r) {
        const auto row = x.row(r);
        const S mean = row.mean();
        const S var = (row.array() - mean).square().mean();
        const S rs = S(1) / std::sqrt(var + static_cast<S>(kLnEps));
        rstd(r) = rs;
        xhat.row(r) = (row.array() - mean) * rs;
        y.row(r) = xhat.row(r).array() * gain.row(0).array() + bias.row(0).array();
    }
}

/// dx += LN backward; accumulates gain/bias gradients when pointers are set.
template <typename S>
void layer_norm_backward(const Mat<S>& dy, const Mat<S>& xhat, const Vec<S>& rstd, const Mat<S>& gain,
                         Mat<S>& dx, Mat<S>* dgain, Mat<S>* dbias) {
    const Index n = dy.rows();
    const Index d = dy.cols();
    if (dgain != nullptr) dgain->row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
    if (dbias != nullptr) dbias->row(0) += dy.colwise().sum();
    const S inv_d = S(1) / static_cast<S>(d);
    for (Index r = 0; r < n; ++r) {
        const auto dxhat = (dy.row(r).array() * gain.row(0).array()).eval();
        const S mean_dxhat = dxhat.sum() * inv_d;
        const S mean_dxhat_xhat = (dxhat * xhat.row(r).array()).sum() * inv_d;
        dx.row(r).array() += rstd(r) * (dxhat - mean_dxhat - xhat.row(r).array() * mean_dxhat_xhat);
    }
}

template <typename S>
constexpr S gelu_c() {
    return static_cast<S>(0.7978845608028654);  // sqrt(2/pi)
}

template <typename S>
S gelu(S x) {
    const S t = std::tanh(gelu_c<S>() * (x + S(0.044715) * x * x * x));
    return S(0.5) * x * (S(1) + t);
}

template <typename S>
S gelu_grad(S x) {
    const S inner = gelu_c<S>() * (x + S(0.044715) * x * x * x);
    const S t = std::tanh(inner);
    return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * gelu_c<S>() * (S(1) + S(3 * 0.044715) * x * x);
}

}  // namespace detail

/// Token plus position embeddings of a packed batch.
template <typename S>
Mat<S> embed(const ModelView<S>& view, const PackedBatch& batch) {
    const auto& L = view.layout();
    const auto& spec = L.spec();
    const auto& tok = view[L.token_embedding];
    const auto& pos = view[L.position_embedding];
    Mat<S> x(batch.rows(), spec.d_model);
    for (Index r = 0; r < batch.rows(); ++r) {
        const TokenId t = batch.tokens[static_cast<std::size_t>(r)];
        const int p = batch.positions[static_cast<std::size_t>(r)];
        require(t >= 0 && t < spec.vocab_size, "bad_token", "token id out of vocabulary: " + std::to_string(t));
        require(p < spec.max_seq_len, "sequence_too_long", "sequence exceeds max_seq_len");
        x.row(r) = tok.row(t) + pos.row(p);
    }
    return x;
}

/// One pre-LN transformer block: x -> x + attn(ln1(x)) -> + mlp(ln2(.)).
/// Consumes `x`, returns the block output, records activations in `bt`.
template <typename S>
Mat<S> run_block(const ModelView<S>& view, const PackedBatch& batch, int layer, Mat<S> x, BlockTape<S>& bt) {
    const auto& L = view.layout();
    const auto& spec = L.spec();
    const Index d = spec.d_model;
    const Index dh = spec.d_head();
    const int H = spec.n_heads;
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));
    const Index n = batch.rows();
    const auto& b = L.blocks[static_cast<std::size_t>(layer)];

    bt.x_in = std::move(x);
    detail::layer_norm(bt.x_in, view[b.ln1_gain], view[b.ln1_bias], bt.ln1_xhat, bt.ln1_rstd, bt.h1);
    bt.qkv.noalias() = bt.h1 * view[b.qkv];
    bt.qkv.rowwise() += view[b.qkv_bias].row(0);

    bt.att.setZero(n, d);
    bt.probs.resize(batch.sequences() * static_cast<std::size_t>(H));
    for (std::size_t s = 0; s < batch.sequences(); ++s) {
        const Index o = batch.begin(s);
        const Index T = batch.length(s);
        for (int h = 0; h < H; ++h) {
            const auto Q = bt.qkv.block(o, h * dh, T, dh);
            const auto K = bt.qkv.block(o, d + h * dh, T, dh);
            const auto V = bt.qkv.block(o, 2 * d + h * dh, T, dh);
            auto& P = bt.probs[s * static_cast<std::size_t>(H) + static_cast<std::size_t>(h)];
            P.noalias() = (Q * K.transpose()) * scale;
            // causal softmax: row i attends to positions 0..i
            for (Index i = 0; i < T; ++i) {
                const S mx = P.row(i).head(i + 1).maxCoeff();
                S sum = 0;
                for (Index j = 0; j <= i; ++j) {
                    const S e = std::exp(P(i, j) - mx);
                    P(i, j) = e;
                    sum += e;
                }
                P.row(i).head(i + 1) /= sum;
                P.row(i).tail(T - i - 1).setZero();
            }
            bt.att.block(o, h * dh, T, dh).noalias() = P * V;
        }
    }
    bt.x_mid = bt.x_in;
    bt.x_mid.noalias() += bt.att * view[b.out];
    bt.x_mid.rowwise() += view[b.out_bias].row(0);

    detail::layer_norm(bt.x_mid, view[b.ln2_gain], view[b.ln2_bias], bt.ln2_xhat, bt.ln2_rstd, bt.h2);
    bt.fc_pre.noalias() = bt.h2 * view[b.fc];
    bt.fc_pre.rowwise() += view[b.fc_bias].row(0);
    bt.fc_act = bt.fc_pre.unaryExpr([](S v) { return detail::gelu(v); });
    Mat<S> y = bt.x_mid;
    y.noalias() += bt.fc_act * view[b.proj];
    y.rowwise() += view[b.proj_bias].row(0);
    return y;
}

/// Runs blocks [start_layer, n_layers) on `x` (the residual stream entering
/// start_layer), then the final layer norm and the LM head on `score_rows`.
template <typename S>
void forward_from(const ModelView<S>& view, const PackedBatch& batch, Mat<S> x, int start_layer,
                  std::span<const Index> score_rows, Tape<S>& tape) {
    const auto& L = view.layout();
    const auto& spec = L.spec();
    require(start_layer >= 0 && start_layer <= spec.n_layers, "bad_layer", "start layer out of range");
    require(x.rows() == batch.rows() && x.cols() == spec.d_model, "shape_mismatch",
            "hidden state does not match the batch");

    tape.start_layer = start_layer;
    tape.blocks.resize(static_cast<std::size_t>(spec.n_layers - start_layer));
    for (int layer = start_layer; layer < spec.n_layers; ++layer)
        x = run_block(view, batch, layer, std::move(x), tape.blocks[static_cast<std::size_t>(layer - start_layer)]);
    tape.x_out = std::move(x);
    detail::layer_norm(tape.x_out, view[L.final_ln_gain], view[L.final_ln_bias], tape.lnf_xhat, tape.lnf_rstd,
                       tape.hf);
    tape.score_rows.assign(score_rows.begin(), score_rows.end());
    Mat<S> selected(static_cast<Index>(score_rows.size()), spec.d_model);
    for (std::size_t i = 0; i < score_rows.size(); ++i) {
        require(score_rows[i] >= 0 && score_rows[i] < batch.rows(), "bad_row", "scored row out of range");
        selected.row(static_cast<Index>(i)) = tape.hf.row(score_rows[i]);
    }
    tape.logits.noalias() = selected * view[L.lm_head];
}

template <typename S>
void forward(const ModelView<S>& view, const PackedBatch& batch, std::span<const Index> score_rows, Tape<S>& tape) {
    forward_from(view, batch, embed(view, batch), 0, score_rows, tape);
}

/// Residual stream entering block `layer`.
template <typename S>
Mat<S> hidden_at(const ModelView<S>& view, const PackedBatch& batch, int layer) {
    require(layer >= 0 && layer <= view.layout().spec().n_layers, "bad_layer", "layer out of range");
    Mat<S> x = embed(view, batch);
    BlockTape<S> scratch;
    for (int l = 0; l < layer; ++l) x = run_block(view, batch, l, std::move(x), scratch);
    return x;
}

/// Back-propagates d(loss)/d(logits) through the tape, accumulating into the
/// wanted gradient slots. Stops at the lowest block that owns a wanted slot.
template <typename S>
void backward(const ModelView<S>& view, const PackedBatch& batch, const Tape<S>& tape, const Mat<S>& dlogits,
              Gradients<S>& grads) {
    const auto& L = view.layout();
    const auto& spec = L.spec();
    const Index d = spec.d_model;
    const Index dh = spec.d_head();
    const int H = spec.n_heads;
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));
    const Index n = batch.rows();
    require(dlogits.rows() == static_cast<Index>(tape.score_rows.size()) && dlogits.cols() == spec.vocab_size,
            "shape_mismatch", "dlogits does not match the scored rows");

    auto grad_of = [&](std::size_t slot) -> Mat<S>* {
        if (!grads.wanted[slot]) return nullptr;
        const auto& info = L.info(slot);
        return &grads.buffer(slot, info.rows, info.cols);
    };
    const int stop = std::max(tape.start_layer, grads.lowest_layer(L));

    Mat<S> selected(static_cast<Index>(tape.score_rows.size()), d);
    for (std::size_t i = 0; i < tape.score_rows.size(); ++i)
        selected.row(static_cast<Index>(i)) = tape.hf.row(tape.score_rows[i]);
    if (auto* g = grad_of(L.lm_head)) g->noalias() += selected.transpose() * dlogits;

    Mat<S> dhf = Mat<S>::Zero(n, d);
    const Mat<S> dsel = dlogits * view[L.lm_head].transpose();
    for (std::size_t i = 0; i < tape.score_rows.size(); ++i) dhf.row(tape.score_rows[i]) += dsel.row(static_cast<Index>(i));

    Mat<S> dx = Mat<S>::Zero(n, d);
    detail::layer_norm_backward(dhf, tape.lnf_xhat, tape.lnf_rstd, view[L.final_ln_gain], dx, grad_of(L.final_ln_gain),
                                grad_of(L.final_ln_bias));

    for (int layer = spec.n_layers - 1; layer >= stop; --layer) {
        const auto& b = L.blocks[static_cast<std::size_t>(layer)];
        const auto& bt = tape.blocks[static_cast<std::size_t>(layer - tape.start_layer)];

        // MLP: x_out = x_mid + gelu(h2 Wfc + bfc) Wproj + bproj
        if (auto* g = grad_of(b.proj)) g->noalias() += bt.fc_act.transpose() * dx;
        if (auto* g = grad_of(b.proj_bias)) g->row(0) += dx.colwise().sum();
        Mat<S> dfc = dx * view[b.proj].transpose();
        dfc.array() *= bt.fc_pre.unaryExpr([](S v) { return detail::gelu_grad(v); }).array();
        if (auto* g = grad_of(b.fc)) g->noalias() += bt.h2.transpose() * dfc;
        if (auto* g = grad_of(b.fc_bias)) g->row(0) += dfc.colwise().sum();
        const Mat<S> dh2 = dfc * view[b.fc].transpose();
        Mat<S> dx_mid = dx;
        detail::layer_norm_backward(dh2, bt.ln2_xhat, bt.ln2_rstd, view[b.ln2_gain], dx_mid, grad_of(b.ln2_gain),
                                    grad_of(b.ln2_bias));

        // attention: x_mid = x_in + att Wout + bout
        if (auto* g = grad_of(b.out)) g->noalias() += bt.att.transpose() * dx_mid;
        if (auto* g = grad_of(b.out_bias)) g->row(0) += dx_mid.colwise().sum();
        const Mat<S> datt = dx_mid * view[b.out].transpose();
        Mat<S> dqkv = Mat<S>::Zero(n, 3 * d);
        for (std::size_t s = 0; s < batch.sequences(); ++s) {
            const Index o = batch.begin(s);
            const Index T = batch.length(s);
            for (int h = 0; h < H; ++h) {
                const auto& P = bt.probs[s * static_cast<std::size_t>(H) + static_cast<std::size_t>(h)];
                const auto Q = bt.qkv.block(o, h * dh, T, dh);
                const auto K = bt.qkv.block(o, d + h * dh, T, dh);
                const auto V = bt.qkv.block(o, 2 * d + h * dh, T, dh);
                const auto dO = datt.block(o, h * dh, T, dh);
                Mat<S> dP = dO * V.transpose();
                dqkv.block(o, 2 * d + h * dh, T, dh).noalias() += P.transpose() * dO;
                const Vec<S> rowdot = (dP.array() * P.array()).rowwise().sum();
                Mat<S> dS = (P.array() * (dP.colwise() - rowdot).array()) * scale;
                dqkv.block(o, h * dh, T, dh).noalias() += dS * K;
                dqkv.block(o, d + h * dh, T, dh).noalias() += dS.transpose() * Q;
            }
        }
        if (auto* g = grad_of(b.qkv)) g->noalias() += bt.h1.transpose() * dqkv;
        if (auto* g = grad_of(b.qkv_bias)) g->row(0) += dqkv.colwise().sum();
        const Mat<S> dh1 = dqkv * view[b.qkv].transpose();
        dx = std::move(dx_mid);
        detail::layer_norm_backward(dh1, bt.ln1_xhat, bt.ln1_rstd, view[b.ln1_gain], dx, grad_of(b.ln1_gain),
                                    grad_of(b.ln1_bias));
    }

    if (stop == 0 && tape.start_layer == 0) {
        Mat<S>* gt = grad_of(L.token_embedding);
        Mat<S>* gp = grad_of(L.position_embedding);
        for (Index r = 0; r < n; ++r) {
            if (gt != nullptr) gt->row(batch.tokens[static_cast<std::size_t>(r)]) += dx.row(r);
            if (gp != nullptr) gp->row(batch.positions[static_cast<std::size_t>(r)]) += dx.row(r);
        }
    }
}

/// Row-wise log-softmax.
template <typename S>
Mat<S> log_softmax(const Mat<S>& logits) {
    Mat<S> out(logits.rows(), logits.cols());
    for (Index r = 0; r < logits.rows(); ++r) {
        const S mx = logits.row(r).maxCoeff();
        const S lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
        out.row(r) = logits.row(r).array() - lse;
    }
    return out;
}

}  // namespace kcs::model
