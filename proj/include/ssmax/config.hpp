#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>

namespace ssx {

// Plain-text key = value configuration, '#' starts a comment. Keys are
// dotted (model.hidden, train.lr, corpus.recall_fraction). Unknown keys are
// rejected so typos fail loudly.
class KvConfig {
public:
    static KvConfig from_file(const std::string& path);
    static KvConfig from_string(const std::string& text);

    bool has(const std::string& key) const { return kv_.count(key) > 0; }

    std::string get_str(const std::string& key, const std::string& def);
    long get_long(const std::string& key, long def);
    double get_double(const std::string& key, double def);
    uint64_t get_u64(const std::string& key, uint64_t def);

    // Every key must have been consumed by a getter; call after parsing.
    void reject_unknown() const;

    // Resolved view (defaults filled in by the getters) for manifests.
    const std::map<std::string, std::string>& resolved() const { return resolved_; }

private:
    std::map<std::string, std::string> kv_;
    mutable std::set<std::string> seen_;
    std::map<std::string, std::string> resolved_;
};

}  // namespace ssx
