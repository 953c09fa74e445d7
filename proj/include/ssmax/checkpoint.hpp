#pragma once

#include <optional>
#include <string>

#include "ssmax/model.hpp"
#include "ssmax/optim.hpp"

namespace ssx {

// Self-describing binary container: magic + version, a JSON header listing
// the config, the step count and every named tensor, then the raw float32
// data in header order (parameters, then optimizer moments when present).
// Round trips are byte-exact.
inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    Model<float> model;
    std::optional<AdamState<float>> opt;
    long step = 0;
};

void save_checkpoint(const std::string& path, const Model<float>& model,
                     const AdamState<float>* opt = nullptr, long step = 0);

Checkpoint load_checkpoint(const std::string& path);

// FNV-1a over the serialized parameter bytes; used by purity checks.
uint64_t param_hash(const Model<float>& model);

}  // namespace ssx
