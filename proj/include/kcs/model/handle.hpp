#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>

#include <nlohmann/json.hpp>

#include "kcs/core/error.hpp"
#include "kcs/core/rng.hpp"
#include "kcs/model/layout.hpp"
#include "kcs/text/tokenizer.hpp"

namespace kcs::model {

/// A model together with its vocabulary. Once frozen its parameters can no
/// longer be reached mutably.
template <typename S>
class BasicModelHandle {
public:
    BasicModelHandle() = default;

    BasicModelHandle(ModelSpec spec, text::Vocabulary vocab)
        : spec_(spec), vocab_(std::move(vocab)), params_(std::make_shared<const ParamLayout>(spec)) {
        require(spec.vocab_size == vocab_.size(), "bad_spec", "vocab_size does not match the vocabulary");
    }

    static BasicModelHandle random(ModelSpec spec, text::Vocabulary vocab, std::uint64_t seed) {
        BasicModelHandle h(spec, std::move(vocab));
        Rng rng(seed);
        h.params_.init_random(rng);
        return h;
    }

    const ModelSpec& spec() const { return spec_; }
    const text::Vocabulary& vocab() const { return vocab_; }
    const ParamLayout& layout() const { return *params_.layout; }
    const ParameterSet<S>& params() const { return params_; }
    ModelView<S> view() const { return ModelView<S>(params_); }

    ParameterSet<S>& mutable_params() {
        require(!frozen_, "frozen_model", "attempt to modify a frozen model");
        return params_;
    }

    bool frozen() const { return frozen_; }
    void freeze() { frozen_ = true; }

    nlohmann::json& metadata() { return metadata_; }
    const nlohmann::json& metadata() const { return metadata_; }

private:
    ModelSpec spec_;
    text::Vocabulary vocab_;
    ParameterSet<S> params_;
    bool frozen_ = false;
    nlohmann::json metadata_ = nlohmann::json::object();
};

using ModelHandle = BasicModelHandle<float>;

inline constexpr char kCheckpointMagic[8] = {'K', 'C', 'S', 'M', 'O', 'D', 'E', 'L'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Checkpoint layout: 8-byte magic, u32 version, u64 header length, JSON
/// header {format, spec, vocab, metadata, tensors[{path, rows, cols}]}, then
/// each tensor as little-endian float32 in header order.
template <typename S>
void save_checkpoint(const BasicModelHandle<S>& model, const std::filesystem::path& path) {
    nlohmann::json header;
    header["format"] = "kcs-model/1";
    header["spec"] = model.spec().to_json();
    header["vocab"] = model.vocab().tokens();
    header["metadata"] = model.metadata();
    auto& tensors = header["tensors"] = nlohmann::json::array();
    for (const auto& info : model.layout().infos())
        tensors.push_back({{"path", info.path}, {"rows", info.rows}, {"cols", info.cols}});
    const std::string text = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("io", "cannot write checkpoint " + path.string());
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : model.params().tensors) {
        for (Eigen::Index i = 0; i < t.size(); ++i) {
            const float v = static_cast<float>(t.data()[i]);
            out.write(reinterpret_cast<const char*>(&v), sizeof v);
        }
    }
    if (!out) throw Error("io", "failed writing checkpoint " + path.string());
}

/// Loads a checkpoint as a frozen handle.
template <typename S = float>
BasicModelHandle<S> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("missing_input", "cannot open checkpoint " + path.string());
    char magic[8];
    in.read(magic, sizeof magic);
    require(in && std::memcmp(magic, kCheckpointMagic, sizeof magic) == 0, "bad_checkpoint",
            path.string() + " is not a model checkpoint");
    std::uint32_t version = 0;
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&version), sizeof version);
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    require(version == kCheckpointVersion, "bad_checkpoint", "unsupported checkpoint version");
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    const auto header = nlohmann::json::parse(text);

    const auto spec = ModelSpec::from_json(header.at("spec"));
    auto vocab = text::Vocabulary::from_tokens(header.at("vocab").get<std::vector<std::string>>());
    BasicModelHandle<S> model(spec, std::move(vocab));
    model.metadata() = header.value("metadata", nlohmann::json::object());
    const auto& entries = header.at("tensors");
    require(entries.size() == model.layout().size(), "bad_checkpoint", "tensor count mismatch");
    auto& params = model.mutable_params();
    for (std::size_t slot = 0; slot < entries.size(); ++slot) {
        const auto& info = model.layout().info(slot);
        require(entries[slot].at("path") == info.path && entries[slot].at("rows") == info.rows &&
                    entries[slot].at("cols") == info.cols,
                "bad_checkpoint", "tensor table mismatch at " + info.path);
        auto& t = params[slot];
        for (Eigen::Index i = 0; i < t.size(); ++i) {
            float v = 0;
            in.read(reinterpret_cast<char*>(&v), sizeof v);
            t.data()[i] = static_cast<S>(v);
        }
    }
    require(static_cast<bool>(in), "bad_checkpoint", "truncated checkpoint " + path.string());
    model.freeze();
    return model;
}

}  // namespace kcs::model
