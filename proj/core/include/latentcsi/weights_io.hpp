#pragma once

// Weight container:
//   "LCSW" | u32 version (=1) | u64 header bytes | header JSON |
//   raw little-endian f32 tensor data in header order.
// The header is {"meta": {...}, "tensors": [{"name", "dtype": "f32",
// "shape": [...]}, ...]}. `meta` carries the model config echo and the
// creation seed.

#include <filesystem>
#include <string>

#include "latentcsi/nn/tape.hpp"

namespace latentcsi {

struct WeightFile {
  std::string meta_json;
  nn::ParamSet<float> params;
};

void save_weights(const std::filesystem::path& path, const nn::ParamSet<float>& params,
                  const std::string& meta_json);
WeightFile load_weights(const std::filesystem::path& path);

std::string serialize_weights(const nn::ParamSet<float>& params, const std::string& meta_json);
WeightFile deserialize_weights(const std::string& bytes);

}  // namespace latentcsi
