#pragma once

// CSI encoder f_w(x): amplitude vector -> latent tensor, and the pixel-space
// baseline that shares its trunk.
//
//   x[s] -> Linear(s -> C0*S*S) -> reshape (C0,S,S)
//        -> per upsample block k = 1..steps:
//             ResBlock, ResBlock, [CrossAttn(x)], ConvT 4x4/2 (C -> C')
//        -> Conv 3x3 -> out_channels [-> clamp to [0,1]]
//
// Cross-attention keys and values are per-block projections of the raw
// (normalized) input into m tokens of width e.

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "latentcsi/csi_data.hpp"
#include "latentcsi/nn/layers.hpp"

namespace latentcsi {

struct LatentTensor {
  int channels = 0, height = 0, width = 0;
  std::vector<float> data;

  LatentTensor() = default;
  LatentTensor(int c, int h, int w, float fill = 0.0f)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}
  std::size_t size() const { return data.size(); }
  bool operator==(const LatentTensor&) const = default;
};

using EncoderWeights = nn::ParamSet<float>;

struct EncoderConfig {
  int s = 0;
  int b = 256;
  int d = 4;
  int latent_channels = 4;
  int init_spatial = 4;
  std::set<int> attention_blocks;  // 1-based upsample block indices
  int ctx_tokens = 16;
  int ctx_dim = 64;
  int kernel = 3;
};

struct BaselineConfig {
  int s = 0;
  int b = 8;
  int image_width = 512;
  int image_height = 512;
  int upsample_steps = 4;
  int min_channels = 4;
  std::set<int> attention_blocks;
  int ctx_tokens = 16;
  int ctx_dim = 64;
  int kernel = 3;
};

/// Normalized description both configs lower to; this is what gets built,
/// run, and echoed into weight files.
struct ModelSpec {
  enum class Kind { kEncoder, kBaseline };
  Kind kind = Kind::kEncoder;
  int s = 0;
  int b = 0;
  int steps = 0;
  int init_spatial = 4;
  int out_channels = 4;
  int min_channels = 1;
  std::set<int> attention_blocks;
  int ctx_tokens = 16;
  int ctx_dim = 64;
  int kernel = 3;
  bool clamp_output = false;

  /// Channels entering upsample block k (1-based); k = steps + 1 gives the
  /// channels entering the final conv.
  int channels(int k) const;
  int out_size() const { return init_spatial << steps; }
  std::size_t out_numel() const {
    return static_cast<std::size_t>(out_channels) * out_size() * out_size();
  }
};

ModelSpec model_spec(const EncoderConfig& cfg);
ModelSpec model_spec(const BaselineConfig& cfg);

/// Throws InvalidArgument naming the offending field.
void validate(const ModelSpec& spec);

std::string spec_json(const ModelSpec& spec);
ModelSpec spec_from_json(const std::string& text);

nn::ParamLayout model_layout(const ModelSpec& spec);

EncoderWeights build_encoder(const EncoderConfig& cfg, std::uint64_t seed);
EncoderWeights build_baseline(const BaselineConfig& cfg, std::uint64_t seed);
EncoderWeights build_model(const ModelSpec& spec, std::uint64_t seed);

std::size_t param_count(const EncoderConfig& cfg);
std::size_t param_count(const BaselineConfig& cfg);
std::size_t param_count(const ModelSpec& spec);

/// Batched forward on a tape. x: [N, s]. Returns [N, out_channels, S, S].
template <class T>
nn::Var model_forward(nn::Binder<T>& b, const ModelSpec& spec, nn::Var x);

/// Single-sample inference. Reentrant over shared weights.
LatentTensor forward(const EncoderWeights& w, const ModelSpec& spec, const AmplitudeVector& x);
LatentTensor forward(const EncoderWeights& w, const EncoderConfig& cfg, const AmplitudeVector& x);
/// Baseline output as an image.
RgbImage forward_image(const EncoderWeights& w, const BaselineConfig& cfg, const AmplitudeVector& x);
/// Batched inference without gradients; rows of `x` are samples.
std::vector<float> forward_batch(const EncoderWeights& w, const ModelSpec& spec,
                                 const std::vector<float>& x, int n);

/// Full-scale configurations for 1992- and 342-subcarrier inputs.
EncoderConfig full_encoder_config(int s);
BaselineConfig full_baseline_config(int s, int b);

/// Desk-scale configurations for 64x64 images and 4x8x8 latents.
EncoderConfig desk_encoder_config(int s);
BaselineConfig desk_baseline_config(int s);

}  // namespace latentcsi
