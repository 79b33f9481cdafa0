#pragma once

#include <string>

#include "gqkva/vit.hpp"

namespace gqkva {

// Single-tensor file: one "GQKVATNSR 1" line, one JSON line with shape and
// dtype, then raw little-endian element bytes.
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

struct Checkpoint {
    ViTConfig config;
    ViTWeights weights;
};

// Checkpoint file: one "GQKVACKPT 1" line, one JSON config line (scheme as
// its canonical label), then every weight buffer as little-endian f32 in
// ViTWeights::for_each order. Loading validates the byte count against
// count_params exactly.
void save_checkpoint(const std::string& path, const ViTConfig& cfg, const ViTWeights& w);
Checkpoint load_checkpoint(const std::string& path);

std::string config_to_json_string(const ViTConfig& cfg);
ViTConfig config_from_json_string(const std::string& text);

}  // namespace gqkva
