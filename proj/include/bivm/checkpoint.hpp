#pragma once
// Checkpoint container: little-endian binary, magic "BIVM", version, config
// digest, length-prefixed named f32 blobs (parameters and BN statistics),
// then the frozen mask threshold. Loading requires a model built from the
// same config (digest match) and restores values bit-identically.

#include <string>

#include "bivm/model.hpp"

namespace bivm {

void save_checkpoint(const std::string& path, BivmModel& model);
void load_checkpoint(const std::string& path, BivmModel& model);

}  // namespace bivm
