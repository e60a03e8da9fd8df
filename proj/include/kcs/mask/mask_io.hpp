#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kcs/core/error.hpp"
#include "kcs/mask/binary_mask.hpp"

namespace kcs::mask {

inline constexpr char kMaskMagic[8] = {'K', 'C', 'S', 'M', 'A', 'S', 'K', '\0'};
inline constexpr std::uint32_t kMaskVersion = 1;

namespace detail {

inline void put_varint(std::string& out, std::uint64_t v) {
    while (v >= 0x80) {
        out.push_back(static_cast<char>((v & 0x7f) | 0x80));
        v >>= 7;
    }
    out.push_back(static_cast<char>(v));
}

inline std::uint64_t get_varint(const std::string& in, std::size_t& pos) {
    std::uint64_t v = 0;
    for (int shift = 0; shift < 64; shift += 7) {
        require(pos < in.size(), "bad_mask", "truncated mask payload");
        const auto byte = static_cast<unsigned char>(in[pos++]);
        v |= static_cast<std::uint64_t>(byte & 0x7f) << shift;
        if (!(byte & 0x80)) return v;
    }
    throw Error("bad_mask", "malformed varint in mask payload");
}

/// Alternating run lengths starting with a (possibly empty) run of zeros.
inline void encode_runs(std::string& out, const BitVector& b) {
    std::vector<std::uint64_t> runs;
    bool current = false;
    std::uint64_t len = 0;
    for (std::size_t i = 0; i < b.size(); ++i) {
        if (b.get(i) != current) {
            runs.push_back(len);
            current = !current;
            len = 0;
        }
        ++len;
    }
    runs.push_back(len);
    put_varint(out, runs.size());
    for (auto r : runs) put_varint(out, r);
}

inline BitVector decode_runs(const std::string& in, std::size_t& pos, std::size_t n, const std::string& path) {
    BitVector b(n);
    const auto count = get_varint(in, pos);
    std::size_t at = 0;
    bool value = false;
    for (std::uint64_t r = 0; r < count; ++r) {
        const auto len = get_varint(in, pos);
        require(len <= n - at, "bad_mask", "run overflows module " + path);
        if (value)
            for (std::size_t i = 0; i < len; ++i) b.set(at + i);
        at += len;
        value = !value;
    }
    require(at == n, "bad_mask", "runs do not cover module " + path);
    return b;
}

}  // namespace detail

/// Mask file: 8-byte magic, u32 version, u64 header length, JSON header
/// {format, spec_hash, granularity, scope, metadata, modules[{path, slot, rows,
/// cols, set_units}]}, then the run-length encoded bits of each module.
inline std::string serialize_mask(const BinaryMask& mask) {
    nlohmann::json header;
    header["format"] = "kcs-mask/1";
    header["spec_hash"] = mask.spec_hash();
    header["granularity"] = to_string(mask.granularity());
    header["scope"] = mask.scope().to_json();
    header["metadata"] = mask.metadata();
    auto& mods = header["modules"] = nlohmann::json::array();
    for (std::size_t m = 0; m < mask.modules().size(); ++m) {
        const auto& mod = mask.modules()[m];
        mods.push_back({{"path", mod.path},
                        {"slot", mod.slot},
                        {"rows", mod.rows},
                        {"cols", mod.cols},
                        {"set_units", mask.set_units(m)}});
    }
    const std::string text = header.dump();

    std::string out(kMaskMagic, sizeof kMaskMagic);
    const std::uint32_t version = kMaskVersion;
    const std::uint64_t len = text.size();
    out.append(reinterpret_cast<const char*>(&version), sizeof version);
    out.append(reinterpret_cast<const char*>(&len), sizeof len);
    out += text;
    for (const auto& b : mask.all_bits()) detail::encode_runs(out, b);
    return out;
}

inline BinaryMask deserialize_mask(const std::string& data, const std::string& name = "mask") {
    constexpr std::size_t fixed = sizeof kMaskMagic + sizeof(std::uint32_t) + sizeof(std::uint64_t);
    require(data.size() >= fixed && std::memcmp(data.data(), kMaskMagic, sizeof kMaskMagic) == 0, "bad_mask",
            name + " is not a mask file");
    std::uint32_t version = 0;
    std::uint64_t len = 0;
    std::memcpy(&version, data.data() + sizeof kMaskMagic, sizeof version);
    std::memcpy(&len, data.data() + sizeof kMaskMagic + sizeof version, sizeof len);
    require(version == kMaskVersion, "bad_mask", name + ": unsupported mask version");
    require(len <= data.size() - fixed, "bad_mask", name + ": truncated header");
    const auto header = nlohmann::json::parse(data.substr(fixed, len));

    const auto granularity = parse_granularity(header.at("granularity"));
    std::vector<MaskModule> modules;
    std::vector<BitVector> bits;
    std::size_t pos = fixed + len;
    for (const auto& m : header.at("modules")) {
        MaskModule mod{m.at("path"), m.at("slot"), m.at("rows"), m.at("cols")};
        bits.push_back(detail::decode_runs(data, pos, mod.units(granularity), mod.path));
        require(bits.back().count() == m.at("set_units").get<std::size_t>(), "bad_mask",
                name + ": set-bit count disagrees with header for " + mod.path);
        modules.push_back(std::move(mod));
    }
    require(pos == data.size(), "bad_mask", name + ": trailing bytes after mask payload");
    auto meta = header.at("metadata");
    BinaryMask mask(header.at("spec_hash"), MaskScope::from_json(header.at("scope")), granularity, std::move(modules),
                    std::move(bits), meta);
    require(mask.metadata() == meta, "bad_mask", name + ": stored sparsity disagrees with the bits");
    return mask;
}

inline void write_mask(const std::filesystem::path& path, const BinaryMask& mask) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("io", "cannot write mask " + path.string());
    const auto data = serialize_mask(mask);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw Error("io", "failed writing mask " + path.string());
}

inline BinaryMask read_mask(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("missing_input", "cannot open mask " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return deserialize_mask(buf.str(), path.string());
}

}  // namespace kcs::mask
