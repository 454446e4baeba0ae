#include "avarc/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <unordered_map>

#include "avarc/error.hpp"

namespace avarc {

namespace {

void put_u64(std::ostream& os, std::uint64_t v) {
    char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
    os.write(buf, 8);
}

std::uint64_t get_u64(std::istream& is) {
    unsigned char buf[8];
    if (!is.read(reinterpret_cast<char*>(buf), 8)) throw FormatError("checkpoint truncated in header");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, std::string_view magic, nlohmann::json metadata,
                      const nn::ParamRefs& params) {
    if (magic.size() != 8) throw FormatError("checkpoint magic must be 8 bytes");
    nlohmann::json table = nlohmann::json::array();
    for (const auto& [name, t] : params) table.push_back({{"name", name}, {"shape", t->shape()}});
    metadata["format_version"] = kCheckpointVersion;
    metadata["tensors"] = std::move(table);
    const std::string meta = metadata.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open checkpoint for writing: " + path.string());
    os.write(magic.data(), 8);
    put_u64(os, meta.size());
    os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    for (const auto& [name, t] : params) {
        for (double v : t->data()) {
            const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
            char buf[4];
            for (int i = 0; i < 4; ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xffu);
            os.write(buf, 4);
        }
    }
    if (!os) throw FormatError("failed writing checkpoint: " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path, std::string_view magic) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open checkpoint: " + path.string());
    char head[8];
    if (!is.read(head, 8)) throw FormatError("checkpoint truncated: " + path.string());
    if (std::string_view(head, 8) != magic)
        throw FormatError("checkpoint magic mismatch in " + path.string() + ": expected " + std::string(magic));
    const std::uint64_t len = get_u64(is);
    if (len > (1ull << 30)) throw FormatError("checkpoint metadata length implausible");
    std::string meta(len, '\0');
    if (!is.read(meta.data(), static_cast<std::streamsize>(len))) throw FormatError("checkpoint metadata truncated");

    Checkpoint ckpt;
    try {
        ckpt.metadata = nlohmann::json::parse(meta);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
    }
    if (ckpt.metadata.value("format_version", -1) != kCheckpointVersion)
        throw FormatError("checkpoint format version mismatch");
    for (const auto& entry : ckpt.metadata.at("tensors")) {
        StoredTensor t;
        t.name = entry.at("name").get<std::string>();
        t.shape = entry.at("shape").get<nn::Shape>();
        t.values.resize(nn::shape_numel(t.shape));
        for (float& v : t.values) {
            unsigned char buf[4];
            if (!is.read(reinterpret_cast<char*>(buf), 4)) throw FormatError("checkpoint tensor data truncated");
            std::uint32_t bits = 0;
            for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(buf[i]) << (8 * i);
            v = std::bit_cast<float>(bits);
        }
        ckpt.tensors.push_back(std::move(t));
    }
    return ckpt;
}

void load_params(const Checkpoint& ckpt, const nn::ParamRefs& params) {
    std::unordered_map<std::string, const StoredTensor*> by_name;
    for (const auto& t : ckpt.tensors) by_name[t.name] = &t;
    for (const auto& [name, t] : params) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw FormatError("checkpoint is missing tensor " + name);
        if (it->second->shape != t->shape()) throw FormatError("checkpoint tensor shape mismatch for " + name);
        auto dst = t->mutable_data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<double>(it->second->values[i]);
    }
}

void round_params_to_float(const nn::ParamRefs& params) {
    for (const auto& [name, t] : params)
        for (double& v : t->mutable_data()) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace avarc
