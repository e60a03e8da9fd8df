#pragma once

#include <memory>
#include <vector>

#include "kcs/core/error.hpp"
#include "kcs/mask/binary_mask.hpp"
#include "kcs/model/layout.hpp"

namespace kcs::mask {

using model::Mat;

/// Checks that every module of `mask` exists in `layout` with the same shape.
inline void require_aligned(const model::ParamLayout& layout, const BinaryMask& mask) {
    require(mask.spec_hash() == layout.spec().hash(), "misaligned_mask", "mask was built for a different model spec");
    for (const auto& mod : mask.modules()) {
        require(layout.has(mod.path), "misaligned_mask", "mask module " + mod.path + " is not a model parameter");
        const auto& info = layout.info(layout.slot_of(mod.path));
        require(info.rows == mod.rows && info.cols == mod.cols && layout.slot_of(mod.path) == mod.slot,
                "shape_mismatch", "mask shape differs from the model at " + mod.path);
    }
}

/// w scaled by per-unit values v (neuron units scale whole rows). With
/// `inverse` the factor is 1 - v instead.
template <typename S>
Mat<S> apply_units(const Mat<S>& w, const std::vector<double>& v, Granularity g, bool inverse) {
    Mat<S> out(w.rows(), w.cols());
    if (g == Granularity::Weight) {
        require(v.size() == static_cast<std::size_t>(w.size()), "shape_mismatch", "unit values do not match tensor");
        for (Index i = 0; i < w.size(); ++i) {
            const double f = inverse ? 1.0 - v[static_cast<std::size_t>(i)] : v[static_cast<std::size_t>(i)];
            out.data()[i] = w.data()[i] * static_cast<S>(f);
        }
    } else {
        require(v.size() == static_cast<std::size_t>(w.rows()), "shape_mismatch", "unit values do not match tensor");
        for (Index r = 0; r < w.rows(); ++r) {
            const double f = inverse ? 1.0 - v[static_cast<std::size_t>(r)] : v[static_cast<std::size_t>(r)];
            out.row(r) = w.row(r) * static_cast<S>(f);
        }
    }
    return out;
}

/// m * w, or (1 - m) * w with `inverse`.
template <typename S>
Mat<S> apply_bits(const Mat<S>& w, const BitVector& bits, Granularity g, bool inverse) {
    Mat<S> out = w;
    if (g == Granularity::Weight) {
        for (Index i = 0; i < w.size(); ++i)
            if (bits.get(static_cast<std::size_t>(i)) == inverse) out.data()[i] = S(0);
    } else {
        for (Index r = 0; r < w.rows(); ++r)
            if (bits.get(static_cast<std::size_t>(r)) == inverse) out.row(r).setZero();
    }
    return out;
}

/// A model view with masked dense weights substituted. `inverse = false`
/// keeps only the subnetwork (m * theta); `inverse = true` gives the remaining
/// model ((1 - m) * theta). Parameters outside the mask are shared with the
/// base, not copied.
template <typename S>
class MaskedModel {
public:
    MaskedModel(const model::ParameterSet<S>& base, const BinaryMask& mask, bool inverse)
        : storage_(std::make_shared<std::vector<Mat<S>>>()), view_(base) {
        require_aligned(*base.layout, mask);
        storage_->reserve(mask.modules().size());
        for (std::size_t m = 0; m < mask.modules().size(); ++m)
            storage_->push_back(apply_bits(base[mask.modules()[m].slot], mask.bits(m), mask.granularity(), inverse));
        for (std::size_t m = 0; m < mask.modules().size(); ++m) view_.substitute(mask.modules()[m].slot, (*storage_)[m]);
    }

    const model::ModelView<S>& view() const { return view_; }

private:
    std::shared_ptr<std::vector<Mat<S>>> storage_;
    model::ModelView<S> view_;
};

template <typename S>
MaskedModel<S> remaining_model(const model::ParameterSet<S>& base, const BinaryMask& mask) {
    return MaskedModel<S>(base, mask, true);
}

template <typename S>
MaskedModel<S> subnetwork_model(const model::ParameterSet<S>& base, const BinaryMask& mask) {
    return MaskedModel<S>(base, mask, false);
}

}  // namespace kcs::mask
