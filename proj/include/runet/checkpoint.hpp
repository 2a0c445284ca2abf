#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "runet/data.hpp"
#include "runet/model.hpp"

namespace runet {

// Checkpoint layout: magic "RUNET1\n", little-endian u32 header length, JSON
// header {arch, base_filters, dtype, tensors:[{name, shape}]}, then raw
// little-endian f32 payloads concatenated in header order. All model state is
// stored, running statistics included.
inline constexpr char kCheckpointMagic[] = "RUNET1\n"; // 7 bytes on disk

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename S>
std::string serialize_checkpoint(const ModelGraph<S>& model) {
    nlohmann::json header;
    header["arch"] = arch_name(model.arch());
    header["base_filters"] = model.base_filters();
    header["dtype"] = "f32";
    header["tensors"] = nlohmann::json::array();
    for (const auto& e : model.entries()) {
        const Shape& s = e.tensor.shape();
        header["tensors"].push_back({{"name", e.name}, {"shape", {s.n, s.c, s.h, s.w}}});
    }
    const std::string json = header.dump();

    std::string out;
    out.append(kCheckpointMagic, 7);
    const std::uint32_t len = static_cast<std::uint32_t>(json.size());
    char lenbuf[4];
    std::memcpy(lenbuf, &len, 4);
    out.append(lenbuf, 4);
    out += json;
    for (const auto& e : model.entries()) {
        for (std::int64_t i = 0; i < e.tensor.count(); ++i) {
            const float v = static_cast<float>(e.tensor.data()[i]);
            char buf[4];
            std::memcpy(buf, &v, 4);
            out.append(buf, 4);
        }
    }
    return out;
}

template <typename S>
ModelGraph<S> deserialize_checkpoint(const std::string& bytes) {
    if (bytes.size() < 11 || std::memcmp(bytes.data(), kCheckpointMagic, 7) != 0)
        throw ParseError("checkpoint: bad magic");
    std::uint32_t len = 0;
    std::memcpy(&len, bytes.data() + 7, 4);
    if (11ull + len > bytes.size())
        throw ParseError("checkpoint: header length exceeds file size");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(11, len));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("checkpoint: bad header json: ") + e.what());
    }
    Arch arch;
    int base_filters = 0;
    try {
        arch = arch_from_name(header.at("arch").get<std::string>());
        base_filters = header.at("base_filters").get<int>();
        if (header.at("dtype").get<std::string>() != "f32")
            throw ParseError("checkpoint: unsupported dtype");
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("checkpoint: malformed header: ") + e.what());
    }

    ModelGraph<S> model(arch, base_filters, 0);
    const auto& tensors = header.at("tensors");
    const auto& entries = model.entries();
    if (tensors.size() != entries.size())
        throw ParseError("checkpoint: tensor count mismatch for " + arch_name(arch));

    std::size_t pos = 11 + len;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& t = tensors[i];
        const std::string name = t.at("name").get<std::string>();
        if (name != entries[i].name)
            throw ParseError("checkpoint: unexpected tensor '" + name + "', wanted '" +
                             entries[i].name + "'");
        const auto sh = t.at("shape");
        const Shape& es = entries[i].tensor.shape();
        if (sh.size() != 4 || sh[0].get<int>() != es.n || sh[1].get<int>() != es.c ||
            sh[2].get<int>() != es.h || sh[3].get<int>() != es.w)
            throw ParseError("checkpoint: shape mismatch for tensor '" + name + "'");
        const std::size_t need = static_cast<std::size_t>(entries[i].tensor.count()) * 4;
        if (bytes.size() - pos < need)
            throw ParseError("checkpoint: truncated payload at tensor '" + name + "'");
        // Registry entries alias the model's tensors, so writing through them
        // fills the model.
        auto tensor = entries[i].tensor;
        for (std::int64_t j = 0; j < tensor.count(); ++j) {
            float v = 0;
            std::memcpy(&v, bytes.data() + pos + 4 * j, 4);
            tensor.data()[j] = static_cast<S>(v);
        }
        pos += need;
    }
    if (pos != bytes.size())
        throw ParseError("checkpoint: trailing bytes after payload");
    return model;
}

template <typename S>
void save_checkpoint(const ModelGraph<S>& model, const std::filesystem::path& path) {
    write_file(path, serialize_checkpoint(model));
}

template <typename S>
ModelGraph<S> load_checkpoint(const std::filesystem::path& path) {
    return deserialize_checkpoint<S>(read_file(path));
}

} // namespace runet
