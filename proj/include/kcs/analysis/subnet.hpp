#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kcs/core/error.hpp"
#include "kcs/core/rng.hpp"
#include "kcs/eval/evaluator.hpp"
#include "kcs/mask/binary_mask.hpp"

namespace kcs::analysis {

using mask::BinaryMask;
using mask::BitVector;
using model::Index;

enum class ComposeMode { Union, Intersection, Floral };

inline std::string to_string(ComposeMode m) {
    switch (m) {
        case ComposeMode::Union: return "union";
        case ComposeMode::Intersection: return "intersection";
        default: return "floral";
    }
}

inline ComposeMode parse_compose_mode(const std::string& s) {
    if (s == "union") return ComposeMode::Union;
    if (s == "intersection") return ComposeMode::Intersection;
    if (s == "floral") return ComposeMode::Floral;
    throw Error("bad_config", "composition mode must be union, intersection or floral, got '" + s + "'");
}

struct CompositionSpec {
    std::vector<BinaryMask> masks;
    ComposeMode mode = ComposeMode::Union;
};

/// Union (OR), intersection (AND) or floral composition. Floral is the AND of
/// all masks OR'ed with every pairwise AND.
inline BinaryMask compose(const CompositionSpec& spec) {
    const auto& ms = spec.masks;
    require(!ms.empty(), "bad_input", "composition needs at least one mask");
    require(spec.mode != ComposeMode::Floral || ms.size() >= 3, "bad_input", "floral composition needs >= 3 masks");
    for (std::size_t i = 1; i < ms.size(); ++i) ms[0].require_aligned(ms[i]);

    std::vector<BitVector> out;
    for (std::size_t m = 0; m < ms[0].modules().size(); ++m) {
        BitVector all_and = ms[0].bits(m);
        BitVector all_or = ms[0].bits(m);
        for (std::size_t i = 1; i < ms.size(); ++i) {
            all_and &= ms[i].bits(m);
            all_or |= ms[i].bits(m);
        }
        if (spec.mode == ComposeMode::Union) {
            out.push_back(std::move(all_or));
        } else if (spec.mode == ComposeMode::Intersection) {
            out.push_back(std::move(all_and));
        } else {
            BitVector acc = all_and;
            for (std::size_t i = 0; i < ms.size(); ++i)
                for (std::size_t j = i + 1; j < ms.size(); ++j) acc |= ms[i].bits(m) & ms[j].bits(m);
            out.push_back(std::move(acc));
        }
    }
    nlohmann::json sources = nlohmann::json::array();
    for (const auto& m : ms) sources.push_back(m.metadata());
    nlohmann::json meta = {{"composition", to_string(spec.mode)}, {"sources", sources}};
    return {ms[0].spec_hash(), ms[0].scope(), ms[0].granularity(), ms[0].modules(), std::move(out), std::move(meta)};
}

namespace detail {
inline double iou(std::size_t inter, std::size_t uni) {
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}
}  // namespace detail

/// Intersection over union of the set bits; 0 when both masks are empty.
inline double jaccard(const BinaryMask& a, const BinaryMask& b) {
    a.require_aligned(b);
    std::size_t inter = 0, uni = 0;
    for (std::size_t m = 0; m < a.modules().size(); ++m) {
        inter += (a.bits(m) & b.bits(m)).count();
        uni += (a.bits(m) | b.bits(m)).count();
    }
    return detail::iou(inter, uni);
}

inline std::map<std::string, double> jaccard_per_module(const BinaryMask& a, const BinaryMask& b) {
    a.require_aligned(b);
    std::map<std::string, double> out;
    for (std::size_t m = 0; m < a.modules().size(); ++m)
        out[a.modules()[m].path] =
            detail::iou((a.bits(m) & b.bits(m)).count(), (a.bits(m) | b.bits(m)).count());
    return out;
}

struct ModuleDensity {
    std::string path;
    std::size_t size = 0;  // weights
    std::size_t set = 0;   // weights in the subnetwork
    double density = 0.0;  // percent
};

struct HeadDensity {
    std::string path;
    int head = 0;
    std::size_t size = 0;
    std::size_t set = 0;
    double density = 0.0;
};

struct DensityMap {
    std::vector<ModuleDensity> modules;
    std::vector<HeadDensity> heads;

    /// Module densities averaged with module sizes as weights (percent).
    double weighted_density() const {
        double set = 0.0, size = 0.0;
        for (const auto& m : modules) {
            set += static_cast<double>(m.set);
            size += static_cast<double>(m.size);
        }
        return size == 0.0 ? 0.0 : 100.0 * set / size;
    }
};

/// Per-module weight densities. With `n_heads > 0`, attention matrices are
/// also split per head: attn.qkv by the head's query, key and value output
/// columns, attn.out by the head's block of input rows.
inline DensityMap density_map(const BinaryMask& mask, int n_heads = 0) {
    DensityMap map;
    for (std::size_t m = 0; m < mask.modules().size(); ++m) {
        const auto& mod = mask.modules()[m];
        ModuleDensity md{mod.path, mod.weights(), mask.set_weights(m), 0.0};
        md.density = md.size == 0 ? 0.0 : 100.0 * static_cast<double>(md.set) / static_cast<double>(md.size);
        map.modules.push_back(md);
        if (n_heads <= 0) continue;

        const bool qkv = mod.path.ends_with("attn.qkv");
        const bool out = mod.path.ends_with("attn.out");
        if (!qkv && !out) continue;
        const Index d = qkv ? mod.rows : mod.cols;
        require(d % n_heads == 0, "bad_spec", "head count does not divide " + mod.path);
        const Index dh = d / n_heads;
        for (int h = 0; h < n_heads; ++h) {
            HeadDensity hd{mod.path, h, 0, 0, 0.0};
            if (qkv) {
                for (int part = 0; part < 3; ++part)
                    for (Index c = part * d + h * dh; c < part * d + (h + 1) * dh; ++c)
                        for (Index r = 0; r < mod.rows; ++r) {
                            ++hd.size;
                            hd.set += mask.weight_set(m, r, c);
                        }
            } else {
                for (Index r = h * dh; r < (h + 1) * dh; ++r)
                    for (Index c = 0; c < mod.cols; ++c) {
                        ++hd.size;
                        hd.set += mask.weight_set(m, r, c);
                    }
            }
            hd.density = 100.0 * static_cast<double>(hd.set) / static_cast<double>(hd.size);
            map.heads.push_back(hd);
        }
    }
    return map;
}

enum class SweepDirection { Expand, Contract };

inline std::string to_string(SweepDirection d) { return d == SweepDirection::Expand ? "expand" : "contract"; }
inline SweepDirection parse_sweep_direction(const std::string& s) {
    if (s == "expand") return SweepDirection::Expand;
    if (s == "contract") return SweepDirection::Contract;
    throw Error("bad_config", "sweep direction must be expand or contract, got '" + s + "'");
}

struct SweepPoint {
    int point = 0;                 // 1-based
    std::uint64_t seed = 0;
    double requested_percent = 0;  // of the maskable units
    std::size_t changed_units = 0;
    BinaryMask mask;
    eval::CriteriaReport report;
    std::optional<eval::CriteriaReport> baseline;  // matched random mask at the same point
};

struct SweepResult {
    std::vector<SweepPoint> points;
    std::vector<std::string> warnings;
};

/// Perturbs `mask` in steps of `interval_percent` of all maskable units.
/// Expand moves random unmasked units into the mask; contract returns random
/// masked units to the remaining model. Points of one seed are nested: each
/// extends the previous point's change set. A request beyond the available
/// units is cut at the bound with a warning, and that seed's series ends there.
/// With `matched_baseline`, each point is also compared with a random mask
/// matching the perturbed mask's per-module counts (same seed).
template <typename S>
SweepResult sensitivity_sweep(const eval::EvalContext<S>& ctx, const BinaryMask& mask, SweepDirection direction,
                              double interval_percent, int n_points, const std::vector<std::uint64_t>& seeds,
                              bool matched_baseline = false) {
    require(interval_percent > 0.0, "bad_config", "sweep interval must be positive");
    require(n_points >= 0, "bad_config", "sweep point count must be >= 0");
    SweepResult result;
    if (n_points == 0) return result;

    std::size_t total_units = 0;
    std::vector<std::pair<std::size_t, std::size_t>> candidates;  // (module, unit)
    for (std::size_t m = 0; m < mask.modules().size(); ++m) {
        const auto& b = mask.bits(m);
        total_units += b.size();
        for (std::size_t i = 0; i < b.size(); ++i)
            if (b.get(i) == (direction == SweepDirection::Contract)) candidates.emplace_back(m, i);
    }

    for (auto seed : seeds) {
        Rng rng(seed);
        auto order = candidates;
        rng.shuffle(order);
        std::vector<BitVector> bits = mask.all_bits();
        std::size_t applied = 0;
        for (int p = 1; p <= n_points; ++p) {
            const double pct = interval_percent * p;
            auto want = static_cast<std::size_t>(std::llround(pct / 100.0 * static_cast<double>(total_units)));
            bool truncated = false;
            if (want > order.size()) {
                result.warnings.push_back("seed " + std::to_string(seed) + ": point " + std::to_string(p) + " asks for " +
                                          std::to_string(want) + " units but only " + std::to_string(order.size()) +
                                          " are available; truncated");
                want = order.size();
                truncated = true;
            }
            if (want == applied) break;
            for (; applied < want; ++applied) {
                const auto [m, i] = order[applied];
                bits[m].set(i, direction == SweepDirection::Expand);
            }
            nlohmann::json meta = {{"sweep", to_string(direction)},
                                   {"seed", seed},
                                   {"point", p},
                                   {"changed_units", applied},
                                   {"source", mask.metadata()}};
            BinaryMask perturbed(mask.spec_hash(), mask.scope(), mask.granularity(), mask.modules(), bits,
                                 std::move(meta));
            auto report = ctx.evaluate(perturbed);
            report.seed = seed;
            std::optional<eval::CriteriaReport> baseline;
            if (matched_baseline) {
                baseline = ctx.evaluate(mask::random_mask_like(perturbed, seed));
                baseline->seed = seed;
            }
            result.points.push_back({p, seed, pct, applied, std::move(perturbed), std::move(report), std::move(baseline)});
            if (truncated) break;
        }
    }
    return result;
}

}  // namespace kcs::analysis
