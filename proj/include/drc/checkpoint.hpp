#pragma once

#include <string>

#include "drc/em_trainer.hpp"

namespace drc {

// Single-file versioned container: format version, config hash + the full
// effective config document, iteration counter, RNG and scheduler state, all
// parameter groups, Adam state per group, and the persistent chain store.
// Raw little-endian doubles, so round-trips are bit-exact on one platform.
struct CheckpointCodec {
    static constexpr char magic[8] = {'D', 'R', 'C', 'K', 'P', 'T', '0', '1'};
    static constexpr u64 version = 1;

    static void save(const std::string& path, const Trainer& trainer);
    static Trainer load(const std::string& path);
    // peek the embedded config document without rebuilding the trainer
    static std::string read_config_json(const std::string& path);
};

}  // namespace drc
