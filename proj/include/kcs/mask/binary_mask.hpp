#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kcs/core/error.hpp"
#include "kcs/core/rng.hpp"
#include "kcs/mask/bits.hpp"
#include "kcs/mask/concrete.hpp"
#include "kcs/mask/scope.hpp"

namespace kcs::mask {

/// A deterministic mask: set bits mark the units that belong to the
/// subnetwork (and are removed from the remaining model). Immutable.
class BinaryMask {
public:
    BinaryMask() = default;

    BinaryMask(std::string spec_hash, MaskScope scope, Granularity granularity, std::vector<MaskModule> modules,
               std::vector<BitVector> bits, nlohmann::json metadata = nlohmann::json::object())
        : spec_hash_(std::move(spec_hash)),
          scope_(scope),
          granularity_(granularity),
          modules_(std::move(modules)),
          bits_(std::move(bits)),
          metadata_(std::move(metadata)) {
        require(bits_.size() == modules_.size(), "misaligned_mask", "bit table does not match the module list");
        for (std::size_t m = 0; m < modules_.size(); ++m)
            require(bits_[m].size() == modules_[m].units(granularity_), "misaligned_mask",
                    "bit count does not match module " + modules_[m].path);
        if (!metadata_.is_object()) metadata_ = nlohmann::json::object();
        metadata_["sparsity"] = sparsity();
    }

    const std::string& spec_hash() const { return spec_hash_; }
    const MaskScope& scope() const { return scope_; }
    Granularity granularity() const { return granularity_; }
    const std::vector<MaskModule>& modules() const { return modules_; }
    const BitVector& bits(std::size_t module) const { return bits_.at(module); }
    const std::vector<BitVector>& all_bits() const { return bits_; }
    const nlohmann::json& metadata() const { return metadata_; }

    std::size_t set_units(std::size_t module) const { return bits_.at(module).count(); }
    std::size_t set_weights(std::size_t module) const {
        return set_units(module) * modules_.at(module).group_size(granularity_);
    }
    std::size_t set_weights() const {
        std::size_t n = 0;
        for (std::size_t m = 0; m < modules_.size(); ++m) n += set_weights(m);
        return n;
    }
    std::size_t maskable_count() const {
        std::size_t n = 0;
        for (const auto& m : modules_) n += m.weights();
        return n;
    }

    /// Fraction of maskable weights outside the subnetwork.
    double sparsity() const {
        const auto total = maskable_count();
        return total == 0 ? 1.0 : 1.0 - static_cast<double>(set_weights()) / static_cast<double>(total);
    }

    bool weight_set(std::size_t module, Index r, Index c) const {
        const auto& mod = modules_.at(module);
        return granularity_ == Granularity::Weight ? bits_[module].get(static_cast<std::size_t>(r * mod.cols + c))
                                                   : bits_[module].get(static_cast<std::size_t>(r));
    }

    std::size_t find(const std::string& path) const {
        for (std::size_t m = 0; m < modules_.size(); ++m)
            if (modules_[m].path == path) return m;
        throw Error("unknown_param", "mask has no module " + path);
    }

    bool aligned_with(const BinaryMask& o) const {
        return spec_hash_ == o.spec_hash_ && scope_ == o.scope_ && granularity_ == o.granularity_ &&
               modules_ == o.modules_;
    }
    void require_aligned(const BinaryMask& o) const {
        require(aligned_with(o), "misaligned_mask", "masks differ in model, scope, granularity or modules");
    }

    /// The remaining-model mask 1 - m as a mask of its own.
    BinaryMask complement() const {
        std::vector<BitVector> flipped;
        for (const auto& b : bits_) flipped.push_back(~b);
        auto meta = metadata_;
        meta["complement_of"] = metadata_;
        return {spec_hash_, scope_, granularity_, modules_, std::move(flipped), std::move(meta)};
    }

    BinaryMask with_metadata(nlohmann::json metadata) const {
        return {spec_hash_, scope_, granularity_, modules_, bits_, std::move(metadata)};
    }

    bool same_bits(const BinaryMask& o) const { return aligned_with(o) && bits_ == o.bits_; }
    bool operator==(const BinaryMask& o) const { return same_bits(o) && metadata_ == o.metadata_; }

private:
    std::string spec_hash_;
    MaskScope scope_;
    Granularity granularity_ = Granularity::Weight;
    std::vector<MaskModule> modules_;
    std::vector<BitVector> bits_;
    nlohmann::json metadata_ = nlohmann::json::object();
};

/// Deterministic evaluation mask: unit i is set when sigmoid(l_i) > 0.5.
inline BinaryMask freeze(const MaskState& st, nlohmann::json metadata = nlohmann::json::object()) {
    std::vector<BitVector> bits;
    for (const auto& l : st.logits) {
        BitVector b(l.size());
        for (std::size_t i = 0; i < l.size(); ++i)
            if (sigmoid(l[i]) > 0.5) b.set(i);
        bits.push_back(std::move(b));
    }
    if (!metadata.is_object()) metadata = nlohmann::json::object();
    if (!metadata.contains("seed")) metadata["seed"] = st.seed;
    metadata["granularity"] = to_string(st.granularity);
    return {st.spec_hash, st.scope, st.granularity, st.modules, std::move(bits), std::move(metadata)};
}

/// Weight-granularity copy of a neuron mask: every weight in a set row is set.
inline BinaryMask expand_neuron_mask(const BinaryMask& mask) {
    if (mask.granularity() == Granularity::Weight) return mask;
    std::vector<BitVector> bits;
    for (std::size_t m = 0; m < mask.modules().size(); ++m) {
        const auto& mod = mask.modules()[m];
        BitVector b(mod.weights());
        const auto cols = static_cast<std::size_t>(mod.cols);
        for (std::size_t r = 0; r < static_cast<std::size_t>(mod.rows); ++r)
            if (mask.bits(m).get(r))
                for (std::size_t c = 0; c < cols; ++c) b.set(r * cols + c);
        bits.push_back(std::move(b));
    }
    auto meta = mask.metadata();
    meta["expanded_from"] = "neuron";
    return {mask.spec_hash(), mask.scope(), Granularity::Weight, mask.modules(), std::move(bits), std::move(meta)};
}

/// Random mask with exactly the reference's number of set units in every
/// module, positions drawn uniformly without replacement.
inline BinaryMask random_mask_like(const BinaryMask& reference, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<BitVector> bits;
    for (std::size_t m = 0; m < reference.modules().size(); ++m) {
        const auto n = reference.bits(m).size();
        BitVector b(n);
        for (auto i : rng.sample_without_replacement(n, reference.set_units(m))) b.set(i);
        bits.push_back(std::move(b));
    }
    nlohmann::json meta = {{"source", "random_like"},
                           {"seed", seed},
                           {"reference_sparsity", reference.sparsity()}};
    return {reference.spec_hash(), reference.scope(), reference.granularity(), reference.modules(), std::move(bits),
            std::move(meta)};
}

inline BinaryMask empty_mask(const model::ParamLayout& layout, const MaskScope& scope, Granularity g,
                             nlohmann::json metadata = nlohmann::json::object()) {
    auto modules = modules_in_scope(layout, scope);
    require(!modules.empty(), "empty_scope", "mask scope selects no parameters");
    std::vector<BitVector> bits;
    for (const auto& m : modules) bits.emplace_back(m.units(g));
    return {layout.spec().hash(), scope, g, std::move(modules), std::move(bits), std::move(metadata)};
}

}  // namespace kcs::mask
