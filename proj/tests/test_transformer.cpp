#include <gtest/gtest.h>

#include "kcs/core/rng.hpp"
#include "kcs/model/transformer.hpp"

using namespace kcs;
using namespace kcs::model;

namespace {

ModelSpec tiny_spec() {
    ModelSpec s;
    s.n_layers = 2;
    s.d_model = 8;
    s.n_heads = 2;
    s.vocab_size = 11;
    s.max_seq_len = 8;
    return s;
}

ParameterSet<double> random_params(const ModelSpec& spec, std::uint64_t seed) {
    auto layout = std::make_shared<const ParamLayout>(spec);
    ParameterSet<double> p(layout);
    Rng rng(seed);
    p.init_random(rng);
    // larger weights than the 0.02 init make the finite differences meaningful
    for (std::size_t slot = 0; slot < p.tensors.size(); ++slot)
        for (Eigen::Index i = 0; i < p[slot].size(); ++i) p[slot].data()[i] += 0.3 * rng.normal();
    return p;
}

PackedBatch two_sequences() {
    PackedBatch b;
    const std::vector<TokenId> a{0, 3, 5, 7, 2};
    const std::vector<TokenId> c{0, 9, 4};
    b.add(a);
    b.add(c);
    return b;
}

// Scalar objective: sum_r sum_v w_rv * log_softmax(logits)_rv with fixed w.
double objective(const ParameterSet<double>& p, const PackedBatch& batch, const std::vector<Index>& rows,
                 const Mat<double>& w) {
    ModelView<double> view(p);
    Tape<double> tape;
    forward(view, batch, rows, tape);
    return (log_softmax(tape.logits).array() * w.array()).sum();
}

}  // namespace

TEST(Transformer, BackwardMatchesCentralDifferences) {
    const auto spec = tiny_spec();
    auto p = random_params(spec, 7);
    const auto batch = two_sequences();
    const std::vector<Index> rows{1, 3, 4, 6, 7};
    Rng rng(11);
    Mat<double> w(static_cast<Index>(rows.size()), spec.vocab_size);
    for (Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();

    ModelView<double> view(p);
    Tape<double> tape;
    forward(view, batch, rows, tape);
    const Mat<double> logp = log_softmax(tape.logits);
    // d/dz of sum w * log_softmax(z) = w - softmax(z) * sum(w)
    Mat<double> dlogits = w;
    for (Index r = 0; r < w.rows(); ++r)
        dlogits.row(r) -= logp.row(r).array().exp().matrix() * w.row(r).sum();
    Gradients<double> grads(*p.layout);
    backward(view, batch, tape, dlogits, grads);

    const double h = 1e-6;
    for (std::size_t slot = 0; slot < p.tensors.size(); ++slot) {
        const auto& info = p.layout->info(slot);
        ASSERT_EQ(grads.tensors[slot].size(), info.size()) << info.path;
        for (Eigen::Index i = 0; i < std::min<Eigen::Index>(info.size(), 12); ++i) {
            const Eigen::Index k = (i * 7919) % info.size();
            const double orig = p[slot].data()[k];
            p[slot].data()[k] = orig + h;
            const double up = objective(p, batch, rows, w);
            p[slot].data()[k] = orig - h;
            const double down = objective(p, batch, rows, w);
            p[slot].data()[k] = orig;
            const double fd = (up - down) / (2 * h);
            const double an = grads.tensors[slot].data()[k];
            EXPECT_NEAR(an, fd, 1e-6 + 1e-5 * std::abs(fd)) << info.path << "[" << k << "]";
        }
    }
}

TEST(Transformer, OutputIsCausal) {
    const auto spec = tiny_spec();
    const auto p = random_params(spec, 3);
    ModelView<double> view(p);
    PackedBatch a, b;
    const std::vector<TokenId> s1{0, 3, 5, 7, 2};
    const std::vector<TokenId> s2{0, 3, 5, 1, 9};
    a.add(s1);
    b.add(s2);
    const std::vector<Index> rows{0, 1, 2};
    Tape<double> ta, tb;
    forward(view, a, rows, ta);
    forward(view, b, rows, tb);
    EXPECT_TRUE(ta.logits == tb.logits);
}

TEST(Transformer, PackingDoesNotMixSequences) {
    const auto spec = tiny_spec();
    const auto p = random_params(spec, 5);
    ModelView<double> view(p);
    const auto both = two_sequences();
    PackedBatch single;
    const std::vector<TokenId> c{0, 9, 4};
    single.add(c);
    Tape<double> t_both, t_single;
    const std::vector<Index> rows_both{5, 6, 7};
    const std::vector<Index> rows_single{0, 1, 2};
    forward(view, both, rows_both, t_both);
    forward(view, single, rows_single, t_single);
    EXPECT_LT((t_both.logits - t_single.logits).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Transformer, ForwardFromCachedHiddenMatchesFullPass) {
    const auto spec = tiny_spec();
    const auto p = random_params(spec, 9);
    ModelView<double> view(p);
    const auto batch = two_sequences();
    const std::vector<Index> rows{0, 4, 7};
    Tape<double> full, partial;
    forward(view, batch, rows, full);
    forward_from(view, batch, hidden_at(view, batch, 1), 1, rows, partial);
    EXPECT_TRUE(full.logits == partial.logits);
}

TEST(Transformer, BackwardStopsAtLowestWantedLayer) {
    const auto spec = tiny_spec();
    const auto p = random_params(spec, 13);
    ModelView<double> view(p);
    const auto batch = two_sequences();
    const std::vector<Index> rows{4, 7};
    Tape<double> tape;
    forward(view, batch, rows, tape);
    Mat<double> dlogits = Mat<double>::Ones(2, spec.vocab_size);
    dlogits(0, 3) = -5;

    Gradients<double> all(*p.layout);
    backward(view, batch, tape, dlogits, all);
    Gradients<double> top(*p.layout, false);
    const auto fc = p.layout->blocks[1].fc;
    top.want(fc);
    backward(view, batch, tape, dlogits, top);
    EXPECT_TRUE(top.tensors[fc] == all.tensors[fc]);
    EXPECT_EQ(top.tensors[p.layout->blocks[0].fc].size(), 0);
}
