#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "lrss/errors.hpp"
#include "lrss/tensor.hpp"

namespace lrss {

// Self-describing binary checkpoint: magic, version, a JSON manifest blob,
// then named parameter arrays with explicit dtype and shape. Round-trips are
// bit-exact in the stored precision.
constexpr char kCheckpointMagic[8] = {'L', 'R', 'S', 'S', 'C', 'K', 'P', 'T'};
constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename V>
void write_pod(std::ostream& os, const V& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::istream& is) {
    V v;
    is.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!is) throw IoError("checkpoint: truncated read");
    return v;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const std::string& manifest_json,
                     std::vector<std::pair<std::string, Tensor<T>*>> params) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw IoError("cannot open " + tmp + " for writing");
        os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
        detail::write_pod(os, kCheckpointVersion);
        detail::write_pod(os, static_cast<uint64_t>(manifest_json.size()));
        os.write(manifest_json.data(), static_cast<std::streamsize>(manifest_json.size()));
        detail::write_pod(os, static_cast<uint64_t>(params.size()));
        for (auto& [name, tensor] : params) {
            detail::write_pod(os, static_cast<uint16_t>(name.size()));
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            detail::write_pod(os, static_cast<uint8_t>(sizeof(T)));
            detail::write_pod(os, static_cast<uint8_t>(tensor->rank()));
            for (int64_t i = 0; i < tensor->rank(); ++i) detail::write_pod(os, tensor->dim(i));
            os.write(reinterpret_cast<const char*>(tensor->data()),
                     static_cast<std::streamsize>(tensor->size() * static_cast<int64_t>(sizeof(T))));
        }
        if (!os) throw IoError("short write to " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("rename " + tmp + " -> " + path + ": " + ec.message());
}

// Loads into pre-initialized parameters; names and shapes must match the
// stored layout exactly. Returns the manifest JSON.
template <typename T>
std::string load_checkpoint(const std::string& path,
                            std::vector<std::pair<std::string, Tensor<T>*>> params) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
        throw IoError("checkpoint: bad magic in " + path);
    const auto version = detail::read_pod<uint32_t>(is);
    if (version != kCheckpointVersion) throw IoError("checkpoint: unsupported version");
    const auto manifest_len = detail::read_pod<uint64_t>(is);
    std::string manifest(manifest_len, '\0');
    is.read(manifest.data(), static_cast<std::streamsize>(manifest_len));
    const auto count = detail::read_pod<uint64_t>(is);
    if (count != params.size()) throw IoError("checkpoint: parameter count mismatch");
    for (auto& [name, tensor] : params) {
        const auto name_len = detail::read_pod<uint16_t>(is);
        std::string stored(name_len, '\0');
        is.read(stored.data(), name_len);
        if (stored != name) throw IoError("checkpoint: expected parameter " + name + ", found " + stored);
        const auto dtype = detail::read_pod<uint8_t>(is);
        if (dtype != sizeof(T)) throw IoError("checkpoint: precision mismatch for " + name);
        const auto rank = detail::read_pod<uint8_t>(is);
        if (rank != tensor->rank()) throw IoError("checkpoint: rank mismatch for " + name);
        for (int64_t i = 0; i < tensor->rank(); ++i)
            if (detail::read_pod<int64_t>(is) != tensor->dim(i))
                throw IoError("checkpoint: shape mismatch for " + name);
        is.read(reinterpret_cast<char*>(tensor->data()),
                static_cast<std::streamsize>(tensor->size() * static_cast<int64_t>(sizeof(T))));
        if (!is) throw IoError("checkpoint: truncated data for " + name);
    }
    return manifest;
}

}  // namespace lrss
