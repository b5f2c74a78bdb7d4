#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "styleseg/errors.hpp"
#include "styleseg/nn.hpp"
#include "styleseg/tensor.hpp"

namespace styleseg {

// Versioned binary tensor container: 8-byte magic, u32 format version,
// u64 manifest length, JSON manifest, then raw little-endian doubles in
// manifest order. Used for both network checkpoints and stylizer weights.
class TensorContainer {
public:
    static constexpr char kMagic[9] = "SSEGTENS";
    static constexpr std::uint32_t kVersion = 1;

    std::string kind;
    nlohmann::json meta = nlohmann::json::object();
    std::vector<std::pair<std::string, Tensor>> tensors;

    void add(const std::string& name, Tensor t) { tensors.emplace_back(name, std::move(t)); }

    const Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }

    void save(const std::string& path) const {
        nlohmann::json manifest;
        manifest["kind"] = kind;
        manifest["format_version"] = kVersion;
        manifest["meta"] = meta;
        auto list = nlohmann::json::array();
        for (const auto& [name, t] : tensors) list.push_back({{"name", name}, {"shape", t.shape}});
        manifest["tensors"] = list;
        const std::string mstr = manifest.dump();

        std::ofstream out(path, std::ios::binary);
        if (!out) throw DataError("cannot open for writing: " + path);
        out.write(kMagic, 8);
        const std::uint32_t ver = kVersion;
        out.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
        const std::uint64_t mlen = mstr.size();
        out.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
        out.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
        for (const auto& [name, t] : tensors)
            out.write(reinterpret_cast<const char*>(t.data.data()),
                      static_cast<std::streamsize>(t.data.size() * sizeof(Real)));
        if (!out) throw DataError("write failed: " + path);
    }

    static TensorContainer load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw DataError("cannot open: " + path);
        char magic[8];
        in.read(magic, 8);
        if (!in || std::memcmp(magic, kMagic, 8) != 0) throw DataError("not a tensor container: " + path);
        std::uint32_t ver = 0;
        in.read(reinterpret_cast<char*>(&ver), sizeof(ver));
        if (ver != kVersion)
            throw DataError("unsupported container version " + std::to_string(ver) + " in " + path);
        std::uint64_t mlen = 0;
        in.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
        std::string mstr(mlen, '\0');
        in.read(mstr.data(), static_cast<std::streamsize>(mlen));
        if (!in) throw DataError("truncated container: " + path);
        nlohmann::json manifest;
        try {
            manifest = nlohmann::json::parse(mstr);
        } catch (const nlohmann::json::exception& e) {
            throw DataError("bad container manifest in " + path + ": " + e.what());
        }
        TensorContainer c;
        c.kind = manifest.value("kind", "");
        c.meta = manifest.value("meta", nlohmann::json::object());
        for (const auto& entry : manifest.at("tensors")) {
            Tensor t(entry.at("shape").get<std::vector<int>>());
            in.read(reinterpret_cast<char*>(t.data.data()),
                    static_cast<std::streamsize>(t.data.size() * sizeof(Real)));
            if (!in) throw DataError("truncated tensor data in " + path);
            c.add(entry.at("name").get<std::string>(), std::move(t));
        }
        return c;
    }
};

inline void store_params(TensorContainer& c, const nn::ParamStore& ps) {
    for (std::size_t i = 0; i < ps.count(); ++i) c.add(ps.name(i), ps.param(i).value());
}

inline void restore_params(const TensorContainer& c, nn::ParamStore& ps) {
    for (std::size_t i = 0; i < ps.count(); ++i) {
        const Tensor* t = c.find(ps.name(i));
        if (!t) throw DataError("container missing parameter " + ps.name(i));
        if (t->shape != ps.param(i).value().shape)
            throw DataError("parameter shape mismatch for " + ps.name(i));
        ps.param(i).value() = *t;
    }
}

} // namespace styleseg
