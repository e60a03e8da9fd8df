#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kcs/core/error.hpp"
#include "kcs/model/layout.hpp"

namespace kcs::mask {

using model::Index;

enum class Granularity { Weight, Neuron };

inline std::string to_string(Granularity g) { return g == Granularity::Weight ? "weight" : "neuron"; }

inline Granularity parse_granularity(const std::string& s) {
    if (s == "weight") return Granularity::Weight;
    if (s == "neuron") return Granularity::Neuron;
    throw Error("bad_config", "granularity must be 'weight' or 'neuron', got '" + s + "'");
}

/// Which parameters may be masked: the dense weight matrices of the top
/// ceil(layer_fraction * n_layers) blocks. Embeddings, the LM head, layer
/// norms and biases are never in scope.
struct MaskScope {
    double layer_fraction = 0.5;

    void validate() const {
        require(layer_fraction > 0.0 && layer_fraction <= 1.0, "bad_config", "layer_fraction must be in (0, 1]");
    }

    int masked_layers(int n_layers) const {
        validate();
        // the epsilon keeps products like 0.75 * 4 from rounding up past 3
        return static_cast<int>(std::ceil(layer_fraction * n_layers - 1e-9));
    }
    int first_layer(int n_layers) const { return n_layers - masked_layers(n_layers); }

    bool contains(const model::ParamInfo& info, int n_layers) const {
        return info.cls == model::ParamClass::DenseWeight && info.layer >= first_layer(n_layers);
    }

    std::vector<std::size_t> slots(const model::ParamLayout& layout) const {
        std::vector<std::size_t> out;
        for (std::size_t s = 0; s < layout.size(); ++s)
            if (contains(layout.info(s), layout.spec().n_layers)) out.push_back(s);
        return out;
    }

    nlohmann::json to_json() const { return {{"layer_fraction", layer_fraction}}; }
    static MaskScope from_json(const nlohmann::json& j) {
        MaskScope s{j.at("layer_fraction").get<double>()};
        s.validate();
        return s;
    }
    bool operator==(const MaskScope&) const = default;
};

/// One maskable matrix. At neuron granularity a unit is a row (all weights
/// leaving one input neuron); at weight granularity a unit is a single weight.
struct MaskModule {
    std::string path;
    std::size_t slot = 0;
    Index rows = 0;
    Index cols = 0;

    std::size_t weights() const { return static_cast<std::size_t>(rows * cols); }
    std::size_t units(Granularity g) const {
        return g == Granularity::Weight ? weights() : static_cast<std::size_t>(rows);
    }
    std::size_t group_size(Granularity g) const { return g == Granularity::Weight ? 1 : static_cast<std::size_t>(cols); }

    bool operator==(const MaskModule&) const = default;
};

inline std::vector<MaskModule> modules_in_scope(const model::ParamLayout& layout, const MaskScope& scope) {
    std::vector<MaskModule> out;
    for (auto slot : scope.slots(layout)) {
        const auto& info = layout.info(slot);
        out.push_back({info.path, slot, info.rows, info.cols});
    }
    return out;
}

}  // namespace kcs::mask
