#pragma once

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsfusion/errors.hpp"

#ifndef TSFUSION_VERSION
#define TSFUSION_VERSION "0.1.0"
#endif

namespace tsfusion {

/// 64-bit FNV-1a over a byte range, continuing from `h`.
inline std::uint64_t fnv1a(const char* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (std::size_t i = 0; i < n; ++i) {
        h ^= static_cast<unsigned char>(data[i]);
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

/// "fnv1a64:<hex>" digest of a file's contents.
inline std::string file_digest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read " + path.string() + " for hashing");
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        h = fnv1a(buf, static_cast<std::size_t>(in.gcount()), h);
    }
    return "fnv1a64:" + hex64(h);
}

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

/// Provenance record written as manifest.json next to every run's outputs.
struct RunManifest {
    std::vector<std::string> command_line;
    nlohmann::json config = nlohmann::json::object();
    nlohmann::json dataset_digests = nlohmann::json::object();
    std::uint64_t seed = 0;
    std::string version = TSFUSION_VERSION;
    std::string started;
    std::string finished;
    std::vector<std::string> outputs;  // relative to the output directory
    nlohmann::json extra = nlohmann::json::object();

    nlohmann::json to_json() const {
        nlohmann::json j = {{"command_line", command_line},
                            {"config", config},
                            {"dataset_digests", dataset_digests},
                            {"seed", seed},
                            {"software_version", version},
                            {"started_utc", started},
                            {"finished_utc", finished},
                            {"outputs", outputs}};
        for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
        return j;
    }

    /// Checks that every listed output exists, stamps the end time and writes
    /// `dir`/manifest.json (which lists itself last).
    void finish(const std::filesystem::path& dir) {
        for (const auto& o : outputs) {
            if (!std::filesystem::exists(dir / o)) throw DataError("manifest output missing: " + (dir / o).string());
        }
        finished = utc_timestamp();
        outputs.push_back("manifest.json");
        std::ofstream out(dir / "manifest.json");
        if (!out) throw DataError("cannot write " + (dir / "manifest.json").string());
        out << to_json().dump(2) << '\n';
    }
};

} // namespace tsfusion
