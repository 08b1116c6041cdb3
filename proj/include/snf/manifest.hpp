// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <ctime>
#include <filesystem>

#include "snf/common.hpp"
#include "snf/config.hpp"

namespace snf {

// Record of one tool invocation: the command, its effective configuration,
// content hashes of every input, and the artifacts written. Timestamps are
// informational only; all other outputs of a run are deterministic in the
// inputs and seed.
struct RunManifest {
    std::string command;
    std::vector<std::string> argv;
    Json config = Json::object();
    uint64_t seed = 0;
    std::string started_at;
    std::string finished_at;
    std::vector<std::pair<std::string, std::string>> inputs;  // path, content hash
    std::vector<std::string> artifacts;
};

inline std::string utc_timestamp() {
    std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

inline std::string content_hash(const std::string& path) {
    std::vector<uint8_t> bytes = read_file_bytes(path);
    return "fnv1a64:" + hex64(fnv1a64(bytes.data(), bytes.size()));
}

inline void ensure_dir(const std::string& path) {
    std::error_code ec;
    std::filesystem::create_directories(path, ec);
    if (ec) throw IoError("cannot create directory " + path + ": " + ec.message());
}

inline Json to_json(const RunManifest& m) {
    Json inputs = Json::array();
    for (const auto& [path, hash] : m.inputs)
        inputs.push_back(Json{{"path", path}, {"hash", hash}});
    return Json{{"command", m.command},   {"argv", m.argv},
                {"config", m.config},     {"seed", m.seed},
                {"started_at", m.started_at}, {"finished_at", m.finished_at},
                {"inputs", inputs},       {"artifacts", m.artifacts}};
}

inline void save_manifest(const std::string& out_dir, const RunManifest& m) {
    write_file_atomic(out_dir + "/manifest.json", to_json(m).dump(2) + "\n");
}

}  // namespace snf
