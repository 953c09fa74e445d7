#include "ssmax/manifest.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace ssx {

void write_manifest(const std::string& path, const RunManifest& m) {
    nlohmann::json j;
    j["command"] = m.command;
    j["version"] = kVersionString;
    j["seed"] = m.seed;
    j["config"] = m.config;
    j["outputs"] = m.outputs;
    j["wall_clock_sec"] = m.wall_clock_sec;
    if (!m.extra.is_null())
        for (auto it = m.extra.begin(); it != m.extra.end(); ++it) j[it.key()] = it.value();

    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::trunc);
        if (!f) throw std::runtime_error("manifest: cannot open " + tmp);
        f << j.dump(2) << "\n";
        if (!f) throw std::runtime_error("manifest: write failed for " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error("manifest: rename failed for " + path);
}

}  // namespace ssx
