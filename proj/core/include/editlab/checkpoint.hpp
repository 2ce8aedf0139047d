#pragma once

#include "editlab/model.hpp"

#include <string>

namespace editlab {

// Checkpoint file: magic + JSON header (config, format version, named array
// index, payload hash) followed by the arrays as row-major f64 little-endian.
// Loading verifies the hash and every shape.

void save_checkpoint(const ToyLM& model, const std::string& path);
ToyLM load_checkpoint(const std::string& path);

// Same on-disk scheme for loose matrix bundles (solver debug dumps).
void save_matrices(const std::vector<std::pair<std::string, Mat>>& arrays,
                   const std::string& path);
std::vector<std::pair<std::string, Mat>> load_matrices(const std::string& path);

}  // namespace editlab
