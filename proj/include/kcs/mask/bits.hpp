#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "kcs/core/error.hpp"

namespace kcs::mask {

/// Fixed-size bitset over 64-bit words. Bits past `size()` in the last word
/// are kept at zero so word-wise counts and comparisons stay exact.
class BitVector {
public:
    BitVector() = default;
    explicit BitVector(std::size_t n, bool value = false) : size_(n), words_((n + 63) / 64, value ? ~0ULL : 0ULL) {
        trim();
    }

    std::size_t size() const { return size_; }

    bool get(std::size_t i) const { return (words_[i >> 6] >> (i & 63)) & 1ULL; }
    bool operator[](std::size_t i) const { return get(i); }

    void set(std::size_t i, bool v = true) {
        const auto bit = 1ULL << (i & 63);
        if (v)
            words_[i >> 6] |= bit;
        else
            words_[i >> 6] &= ~bit;
    }

    std::size_t count() const {
        std::size_t c = 0;
        for (auto w : words_) c += static_cast<std::size_t>(std::popcount(w));
        return c;
    }

    BitVector operator~() const {
        BitVector r = *this;
        for (auto& w : r.words_) w = ~w;
        r.trim();
        return r;
    }

    BitVector& operator&=(const BitVector& o) {
        check(o);
        for (std::size_t i = 0; i < words_.size(); ++i) words_[i] &= o.words_[i];
        return *this;
    }
    BitVector& operator|=(const BitVector& o) {
        check(o);
        for (std::size_t i = 0; i < words_.size(); ++i) words_[i] |= o.words_[i];
        return *this;
    }
    friend BitVector operator&(BitVector a, const BitVector& b) { return a &= b; }
    friend BitVector operator|(BitVector a, const BitVector& b) { return a |= b; }

    /// True when every set bit of *this is also set in `o`.
    bool subset_of(const BitVector& o) const {
        check(o);
        for (std::size_t i = 0; i < words_.size(); ++i)
            if (words_[i] & ~o.words_[i]) return false;
        return true;
    }

    bool operator==(const BitVector&) const = default;

    const std::vector<std::uint64_t>& words() const { return words_; }

private:
    void trim() {
        if (size_ % 64 != 0 && !words_.empty()) words_.back() &= (1ULL << (size_ % 64)) - 1;
    }
    void check(const BitVector& o) const {
        require(o.size_ == size_, "misaligned_mask", "bit vectors differ in size");
    }

    std::size_t size_ = 0;
    std::vector<std::uint64_t> words_;
};

}  // namespace kcs::mask
