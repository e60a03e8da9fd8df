#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "kcs/core/error.hpp"
#include "kcs/core/hash.hpp"

namespace kcs::model {

using Index = Eigen::Index;

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

struct ModelSpec {
    int n_layers = 4;
    int d_model = 128;
    int n_heads = 4;
    int vocab_size = 0;
    int max_seq_len = 64;

    int d_head() const { return d_model / n_heads; }
    int d_ff() const { return 4 * d_model; }

    void validate() const {
        require(n_layers >= 2, "bad_spec", "n_layers must be >= 2");
        require(d_model > 0 && n_heads > 0 && d_model % n_heads == 0, "bad_spec",
                "d_model must be a positive multiple of n_heads");
        require(vocab_size >= 2, "bad_spec", "vocab_size must be >= 2");
        require(max_seq_len >= 2, "bad_spec", "max_seq_len must be >= 2");
    }

    nlohmann::json to_json() const {
        return {{"n_layers", n_layers},
                {"d_model", d_model},
                {"n_heads", n_heads},
                {"vocab_size", vocab_size},
                {"max_seq_len", max_seq_len}};
    }

    static ModelSpec from_json(const nlohmann::json& j) {
        ModelSpec s;
        s.n_layers = j.at("n_layers");
        s.d_model = j.at("d_model");
        s.n_heads = j.at("n_heads");
        s.vocab_size = j.at("vocab_size");
        s.max_seq_len = j.at("max_seq_len");
        s.validate();
        return s;
    }

    std::string hash() const { return sha256_hex(to_json().dump()); }

    bool operator==(const ModelSpec&) const = default;
};

enum class ParamClass { Embedding, LayerNorm, Bias, DenseWeight, LmHead };

struct ParamInfo {
    std::string path;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    ParamClass cls = ParamClass::DenseWeight;
    int layer = -1;  // -1 outside the transformer stack

    Eigen::Index size() const { return rows * cols; }
};

/// Slot indices of one transformer block's tensors. Dense weights are stored
/// (d_in x d_out) and applied as y = x W + b, so a row of W holds every weight
/// leaving one input neuron.
struct BlockSlots {
    std::size_t ln1_gain, ln1_bias;
    std::size_t qkv, qkv_bias;
    std::size_t out, out_bias;
    std::size_t ln2_gain, ln2_bias;
    std::size_t fc, fc_bias;
    std::size_t proj, proj_bias;
};

/// Canonical ordered parameter table of a model spec. Paths follow
/// "layer.{i}.{attn|mlp}.{matrix}" for the dense maps.
class ParamLayout {
public:
    explicit ParamLayout(const ModelSpec& spec) : spec_(spec) {
        spec.validate();
        const auto d = static_cast<Eigen::Index>(spec.d_model);
        const auto f = static_cast<Eigen::Index>(spec.d_ff());
        token_embedding = add("embed.token", spec.vocab_size, d, ParamClass::Embedding, -1);
        position_embedding = add("embed.position", spec.max_seq_len, d, ParamClass::Embedding, -1);
        for (int i = 0; i < spec.n_layers; ++i) {
            const std::string p = "layer." + std::to_string(i) + ".";
            BlockSlots b{};
            b.ln1_gain = add(p + "ln1.gain", 1, d, ParamClass::LayerNorm, i);
            b.ln1_bias = add(p + "ln1.bias", 1, d, ParamClass::LayerNorm, i);
            b.qkv = add(p + "attn.qkv", d, 3 * d, ParamClass::DenseWeight, i);
            b.qkv_bias = add(p + "attn.qkv.bias", 1, 3 * d, ParamClass::Bias, i);
            b.out = add(p + "attn.out", d, d, ParamClass::DenseWeight, i);
            b.out_bias = add(p + "attn.out.bias", 1, d, ParamClass::Bias, i);
            b.ln2_gain = add(p + "ln2.gain", 1, d, ParamClass::LayerNorm, i);
            b.ln2_bias = add(p + "ln2.bias", 1, d, ParamClass::LayerNorm, i);
            b.fc = add(p + "mlp.fc", d, f, ParamClass::DenseWeight, i);
            b.fc_bias = add(p + "mlp.fc.bias", 1, f, ParamClass::Bias, i);
            b.proj = add(p + "mlp.proj", f, d, ParamClass::DenseWeight, i);
            b.proj_bias = add(p + "mlp.proj.bias", 1, d, ParamClass::Bias, i);
            blocks.push_back(b);
        }
        final_ln_gain = add("final_ln.gain", 1, d, ParamClass::LayerNorm, -1);
        final_ln_bias = add("final_ln.bias", 1, d, ParamClass::LayerNorm, -1);
        lm_head = add("lm_head", d, spec.vocab_size, ParamClass::LmHead, -1);
    }

    const ModelSpec& spec() const { return spec_; }
    std::size_t size() const { return infos_.size(); }
    const ParamInfo& info(std::size_t slot) const { return infos_.at(slot); }
    const std::vector<ParamInfo>& infos() const { return infos_; }

    std::size_t slot_of(const std::string& path) const {
        auto it = by_path_.find(path);
        require(it != by_path_.end(), "unknown_param", "no parameter named " + path);
        return it->second;
    }
    bool has(const std::string& path) const { return by_path_.contains(path); }

    std::size_t token_embedding = 0, position_embedding = 0;
    std::vector<BlockSlots> blocks;
    std::size_t final_ln_gain = 0, final_ln_bias = 0, lm_head = 0;

private:
    std::size_t add(std::string path, Eigen::Index rows, Eigen::Index cols, ParamClass cls, int layer) {
        const auto slot = infos_.size();
        by_path_.emplace(path, slot);
        infos_.push_back({std::move(path), rows, cols, cls, layer});
        return slot;
    }

    ModelSpec spec_;
    std::vector<ParamInfo> infos_;
    std::unordered_map<std::string, std::size_t> by_path_;
};

/// Owned tensors aligned to a layout.
template <typename S>
struct ParameterSet {
    std::shared_ptr<const ParamLayout> layout;
    std::vector<Mat<S>> tensors;

    ParameterSet() = default;
    explicit ParameterSet(std::shared_ptr<const ParamLayout> l) : layout(std::move(l)) {
        tensors.reserve(layout->size());
        for (const auto& info : layout->infos()) tensors.push_back(Mat<S>::Zero(info.rows, info.cols));
    }

    Mat<S>& operator[](std::size_t slot) { return tensors[slot]; }
    const Mat<S>& operator[](std::size_t slot) const { return tensors[slot]; }
    Mat<S>& at(const std::string& path) { return tensors[layout->slot_of(path)]; }
    const Mat<S>& at(const std::string& path) const { return tensors[layout->slot_of(path)]; }

    /// GPT-2 style initialisation: N(0, 0.02), residual projections scaled by
    /// 1/sqrt(2 n_layers), unit layer-norm gains, zero biases.
    template <typename RngT>
    void init_random(RngT& rng) {
        const double resid_scale = 1.0 / std::sqrt(2.0 * layout->spec().n_layers);
        for (std::size_t slot = 0; slot < tensors.size(); ++slot) {
            const auto& info = layout->info(slot);
            auto& t = tensors[slot];
            switch (info.cls) {
                case ParamClass::LayerNorm:
                    t.setConstant(info.path.ends_with("gain") ? S(1) : S(0));
                    break;
                case ParamClass::Bias:
                    t.setZero();
                    break;
                default: {
                    double sigma = 0.02;
                    if (info.path.ends_with("attn.out") || info.path.ends_with("mlp.proj")) sigma *= resid_scale;
                    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<S>(sigma * rng.normal());
                }
            }
        }
    }

    /// SHA-256 over the raw bytes of every tensor, in layout order.
    std::string checksum() const {
        Sha256 h;
        for (const auto& t : tensors) h.update(t.data(), static_cast<std::size_t>(t.size()) * sizeof(S));
        return h.hex();
    }
};

/// Read-only view of a model's tensors with per-slot substitution; the mask
/// engine swaps dense weights for their masked versions without copying the
/// rest of the model.
template <typename S>
class ModelView {
public:
    explicit ModelView(const ParameterSet<S>& base) : layout_(base.layout.get()) {
        ptrs_.reserve(base.tensors.size());
        for (const auto& t : base.tensors) ptrs_.push_back(&t);
    }

    void substitute(std::size_t slot, const Mat<S>& tensor) {
        require(tensor.rows() == ptrs_[slot]->rows() && tensor.cols() == ptrs_[slot]->cols(), "shape_mismatch",
                "substituted tensor shape differs at " + layout_->info(slot).path);
        ptrs_[slot] = &tensor;
    }

    const Mat<S>& operator[](std::size_t slot) const { return *ptrs_[slot]; }
    const ParamLayout& layout() const { return *layout_; }

private:
    const ParamLayout* layout_;
    std::vector<const Mat<S>*> ptrs_;
};

}  // namespace kcs::model
