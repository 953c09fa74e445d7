#include "ssmax/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ssx {

namespace {
std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}
}  // namespace

KvConfig KvConfig::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return from_string(ss.str());
}

KvConfig KvConfig::from_string(const std::string& text) {
    KvConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config: line " + std::to_string(lineno) +
                                     " is not 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key.empty() || val.empty())
            throw std::runtime_error("config: empty key or value at line " +
                                     std::to_string(lineno));
        cfg.kv_[key] = val;
    }
    return cfg;
}

std::string KvConfig::get_str(const std::string& key, const std::string& def) {
    seen_.insert(key);
    const auto it = kv_.find(key);
    const std::string v = it == kv_.end() ? def : it->second;
    resolved_[key] = v;
    return v;
}

long KvConfig::get_long(const std::string& key, long def) {
    const std::string v = get_str(key, std::to_string(def));
    try {
        size_t pos = 0;
        const long out = std::stol(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw std::runtime_error("config: " + key + " is not an integer: " + v);
    }
}

double KvConfig::get_double(const std::string& key, double def) {
    std::ostringstream d;
    d << def;
    const std::string v = get_str(key, d.str());
    try {
        size_t pos = 0;
        const double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw std::runtime_error("config: " + key + " is not a number: " + v);
    }
}

uint64_t KvConfig::get_u64(const std::string& key, uint64_t def) {
    const std::string v = get_str(key, std::to_string(def));
    try {
        size_t pos = 0;
        const unsigned long long out = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw std::runtime_error("config: " + key + " is not an unsigned integer: " + v);
    }
}

void KvConfig::reject_unknown() const {
    for (const auto& [key, val] : kv_) {
        if (!seen_.count(key))
            throw std::runtime_error("config: unknown key '" + key + "'");
    }
}

}  // namespace ssx
