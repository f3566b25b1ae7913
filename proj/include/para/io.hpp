#pragma once

#include <string>
#include <vector>

#include "para/train.hpp"

namespace para {

// CSV with header x_0,..,x_{k-1},y_0,..,y_{d-1}; one sample per row. Values
// must be finite. Errors carry the 1-based line and the column name.
std::vector<TargetPair> load_targets_csv(const std::string& path);

// Training run description loadable from a JSON file; flags mirror
// TrainConfig plus the file paths involved. Unknown keys are rejected, and
// the input paths must exist at load time.
struct RunConfig {
    std::string model_path;
    std::string targets_path;
    std::string out_path; // may be empty (CLI flag can supply it)
    TrainConfig train;
};

RunConfig load_run_config(const std::string& path);

} // namespace para
