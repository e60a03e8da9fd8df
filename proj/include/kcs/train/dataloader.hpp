#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "kcs/core/error.hpp"
#include "kcs/core/rng.hpp"

namespace kcs::train {

/// Endless stream of index batches over a dataset of `size` items. Each epoch
/// is a fresh seeded permutation consumed without replacement; the last batch
/// of an epoch may be short.
class CyclicalBatcher {
public:
    CyclicalBatcher(std::size_t size, std::size_t batch_size, std::uint64_t seed)
        : size_(size), batch_(batch_size), rng_(seed) {
        require(size > 0, "empty_dataset", "cyclical dataloader over an empty dataset");
        require(batch_size > 0, "bad_config", "batch size must be positive");
    }

    std::vector<std::size_t> next() {
        if (cursor_ >= order_.size()) {
            order_ = rng_.permutation(size_);
            cursor_ = 0;
            ++epoch_;
        }
        const std::size_t end = std::min(order_.size(), cursor_ + batch_);
        std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                     order_.begin() + static_cast<std::ptrdiff_t>(end));
        cursor_ = end;
        return out;
    }

    /// Number of epochs started so far.
    long epoch() const { return epoch_; }

private:
    std::size_t size_;
    std::size_t batch_;
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
    long epoch_ = 0;
};

}  // namespace kcs::train
