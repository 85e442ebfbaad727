#pragma once

#include <string>

#include "tscan/model.hpp"

namespace tscan {

// Binary container: magic, little-endian u32 header length, JSON header
// (format version, model config, schema, normalization, init seed, named
// tensor index), then all parameter values as little-endian float64 in
// index order. Round-trips bit-exactly.
void save_checkpoint(const CanModel& model, const std::string& path);
CanModel load_checkpoint(const std::string& path);

}  // namespace tscan
