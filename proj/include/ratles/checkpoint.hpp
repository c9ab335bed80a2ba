#pragma once

#include <iosfwd>
#include <string>

#include "ratles/model.hpp"
#include "ratles/training.hpp"

namespace ratles {

// Checkpoint container: magic, format version, the ModelConfig as JSON, then
// named float64 little-endian arrays (parameters, BatchNorm running stats,
// and optionally the optimizer state). Round-trips bit-exactly.

void save_checkpoint(std::ostream& out, Model& model, const TrainState* trainer);
std::string checkpoint_bytes(Model& model, const TrainState* trainer);
void save_checkpoint_file(const std::string& path, Model& model, const TrainState* trainer);

Model load_checkpoint(std::istream& in, TrainState* trainer_out = nullptr);
Model load_checkpoint_file(const std::string& path, TrainState* trainer_out = nullptr);

}  // namespace ratles
