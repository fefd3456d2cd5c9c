#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "tsfusion/tensor.hpp"

// Flat binary parameter file:
//   "TSFU" | u32 version | records...
//   record: u32 name_len | name bytes (UTF-8) | u32 rank | u64 dims[rank] | f64 payload[prod(dims)]
// All integers and floats little-endian.

namespace tsfusion {

inline constexpr char kCheckpointMagic[4] = {'T', 'S', 'F', 'U'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void write_le(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw DataError("checkpoint: truncated file");
    return v;
}

} // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("checkpoint: cannot open " + path.string() + " for writing");
    os.write(kCheckpointMagic, 4);
    detail::write_le<std::uint32_t>(os, kCheckpointVersion);
    for (const auto& [name, t] : tensors) {
        detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) detail::write_le<std::uint64_t>(os, d);
        os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * 8));
    }
    if (!os) throw DataError("checkpoint: write failed for " + path.string());
}

inline NamedTensors load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("checkpoint: cannot open " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0) throw DataError("checkpoint: bad magic in " + path.string());
    auto version = detail::read_le<std::uint32_t>(is);
    if (version != kCheckpointVersion) {
        throw DataError("checkpoint: unsupported version " + std::to_string(version));
    }
    NamedTensors out;
    while (is.peek() != std::char_traits<char>::eof()) {
        auto len = detail::read_le<std::uint32_t>(is);
        std::string name(len, '\0');
        is.read(name.data(), len);
        auto rank = detail::read_le<std::uint32_t>(is);
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<std::size_t>(detail::read_le<std::uint64_t>(is));
        std::vector<double> data(shape_numel(shape));
        is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * 8));
        if (!is) throw DataError("checkpoint: truncated payload for " + name);
        out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    return out;
}

} // namespace tsfusion
