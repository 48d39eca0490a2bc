#pragma once

#include <string>

#include "drc/em_trainer.hpp"

namespace drc {

// Everything a run needs, parsed from one JSON document. Unknown keys are
// rejected (naming the offending path); missing keys take the documented
// defaults; the effective config is echoed into every output directory.
struct RunConfig {
    int version = 1;
    u64 seed = 0;
    DataConfig dataset;
    ArchConfig arch;
    ReconConfig recon;
    LangevinConfig langevin;
    TrainConfig train;
    double eval_threshold = 0.5;
    i64 eval_batch = 16;

    static RunConfig from_json_text(const std::string& text);
    static RunConfig from_file(const std::string& path);
    std::string to_json_text() const;  // canonical, stable ordering
    u64 hash() const;                  // FNV-1a of the canonical text

    void echo_to(const std::string& out_dir) const;
};

// Rebuilds a Trainer from an embedded config document (checkpoint loading).
Trainer trainer_from_config_json(const std::string& config_json, i64 n_examples,
                                 u64 config_hash);

}  // namespace drc
