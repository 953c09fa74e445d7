#pragma once

#include <json.hpp>
#include <map>
#include <string>
#include <vector>

namespace ssx {

inline constexpr const char* kVersionString = "ssmax 0.1.0";

// Run manifest written atomically next to every output artifact: the
// command, the fully resolved configuration, seed, version and wall clock.
struct RunManifest {
    std::string command;
    std::map<std::string, std::string> config;
    uint64_t seed = 0;
    std::vector<std::string> outputs;
    double wall_clock_sec = 0.0;
    nlohmann::json extra;  // per-command fields (e.g. switch_step)
};

void write_manifest(const std::string& path, const RunManifest& m);

}  // namespace ssx
