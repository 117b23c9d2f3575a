#pragma once

#include <cstdint>
#include <string>

#include "ilm/model.hpp"

namespace ilm {

// "ILM1" checkpoint container: magic, a JSON header (config echo, step
// counter, vocab hash, tensor names + shapes), then raw f32 data in header
// order. Written to a temp file and renamed, so a crashed run never leaves a
// loadable partial checkpoint.
void save_checkpoint(const std::string& path, const InvariantModel& model, int64_t step,
                     const std::string& vocab_hash);

struct LoadedCheckpoint {
    InvariantModel model;
    int64_t step = 0;
    std::string vocab_hash;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

} // namespace ilm
