#pragma once

// In-repo latent diffusion backend at desk scale: a small KL-regularized
// convolutional VAE (64x64 RGB <-> 4x8x8), a hashed-token text encoder, and
// a small timestep- and text-conditioned noise predictor.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "latentcsi/csi_data.hpp"
#include "latentcsi/latent_backend.hpp"
#include "latentcsi/nn/layers.hpp"

namespace latentcsi {

struct ToyVaeConfig {
  int image_size = 64;
  int latent_channels = 4;
  int downsamples = 3;                 // latent side = image_size / 2^downsamples
  std::vector<int> channels{8, 16, 32};
  double kl_weight = 1e-4;
};

struct ToyDenoiserConfig {
  int channels = 32;
  int temb_dim = 32;
  int attn_dim = 32;
  int ctx_len = 8;  // prompts are truncated or padded with the unconditional token
};

struct TextEncoderConfig {
  int vocab = 1024;  // row 0 is the unconditional token
  int width = 32;
  std::uint64_t seed = 0x7e47;
};

struct ToyBackendConfig {
  ToyVaeConfig vae;
  ToyDenoiserConfig denoiser;
  TextEncoderConfig text;
  int T = 1000;
  double beta_start = 8.5e-4;
  double beta_end = 1.2e-2;
  bool scaled_linear = false;
};

void validate(const ToyBackendConfig& cfg);
std::string config_json(const ToyBackendConfig& cfg);
ToyBackendConfig toy_config_from_json(const std::string& text);

/// Whitespace tokens hashed (FNV-1a) into a fixed seeded embedding table.
class TextEncoder {
 public:
  explicit TextEncoder(TextEncoderConfig cfg = {});
  /// Row index for a word; never 0.
  int token_id(const std::string& word) const;
  std::vector<int> token_ids(const std::string& prompt) const;
  TextCondition embed(const std::string& prompt) const;
  const TextEncoderConfig& config() const { return cfg_; }

 private:
  TextEncoderConfig cfg_;
  std::vector<float> table_;
};

nn::ParamLayout toy_vae_layout(const ToyVaeConfig& cfg);
nn::ParamLayout toy_denoiser_layout(const ToyDenoiserConfig& cfg, int latent_channels,
                                    int text_width);

/// x: [N,3,H,W] in [0,1]. Returns (mu, logvar), each [N,C,h,w].
template <class T>
std::pair<nn::Var, nn::Var> toy_vae_encode(nn::Binder<T>& b, const ToyVaeConfig& cfg, nn::Var x);
/// z: [N,C,h,w]. Returns [N,3,H,W] after a sigmoid.
template <class T>
nn::Var toy_vae_decode(nn::Binder<T>& b, const ToyVaeConfig& cfg, nn::Var z);
/// z: [N,C,h,w]; temb: [N,temb_dim] sinusoidal features; ctx: [N,ctx_len,width].
template <class T>
nn::Var toy_denoise(nn::Binder<T>& b, const ToyDenoiserConfig& cfg, nn::Var z, nn::Var temb,
                    nn::Var ctx);

/// Sinusoidal features of timestep t, `dim` wide.
std::vector<float> timestep_features(int t, int dim);
/// Token rows padded or truncated to ctx_len with the unconditional row.
std::vector<float> padded_context(const TextCondition& cond, int ctx_len,
                                  const TextCondition& uncond);

class ToyBackend final : public LatentBackend {
 public:
  /// Weights named "vae.*" and "unet.*".
  ToyBackend(ToyBackendConfig cfg, nn::ParamSet<float> vae, nn::ParamSet<float> denoiser);

  /// Randomly initialized weights; useful for contracts that do not depend
  /// on training.
  static std::unique_ptr<ToyBackend> initialize(const ToyBackendConfig& cfg, std::uint64_t seed);

  BackendInfo info() const override;
  const DiffusionSchedule& schedule() const override { return schedule_; }
  VaePosterior encode(const RgbImage& image) const override;
  RgbImage decode(const LatentTensor& z) const override;
  LatentTensor denoise(const LatentTensor& z, int t, const TextCondition& cond) const override;
  TextCondition text_embed(const std::string& prompt) const override;
  std::vector<LatentTensor> encode_means(const std::vector<RgbImage>& images) const override;

  const ToyBackendConfig& config() const { return cfg_; }
  const nn::ParamSet<float>& vae_params() const { return vae_; }
  const nn::ParamSet<float>& denoiser_params() const { return unet_; }
  const TextEncoder& text_encoder() const { return text_; }

 private:
  ToyBackendConfig cfg_;
  nn::ParamSet<float> vae_;
  nn::ParamSet<float> unet_;
  TextEncoder text_;
  DiffusionSchedule schedule_;
  std::string identity_;
};

void save_toy_backend(const std::filesystem::path& path, const ToyBackend& backend);
std::unique_ptr<ToyBackend> load_toy_backend(const std::filesystem::path& path);

struct ToyTrainConfig {
  int epochs = 20;
  int batch_size = 32;
  double lr = 2e-3;
  std::uint64_t seed = 1;
  double empty_prompt_rate = 0.1;  // denoiser only
  bool verbose = false;
};

struct ToyTrainLog {
  std::vector<double> train_loss;
  std::vector<double> val_loss;  // VAE: reconstruction MSE of decode(mu); denoiser: eps MSE
  std::vector<double> epoch_seconds;
};

struct ToyVaeResult {
  nn::ParamSet<float> params;
  ToyTrainLog log;
};
/// Minimizes mean reconstruction MSE + kl_weight * mean KL over the
/// training split; validation loss is the decode(mu) reconstruction MSE.
ToyVaeResult train_toy_vae(const Dataset& ds, const ToyVaeConfig& cfg, const ToyTrainConfig& tc);

struct ToyDenoiserResult {
  nn::ParamSet<float> params;
  ToyTrainLog log;
};
/// eps-prediction MSE over latents of the training images, conditioned on
/// the manifest captions (dropped to "" at empty_prompt_rate).
ToyDenoiserResult train_toy_denoiser(const Dataset& ds, const ToyBackend& vae_backend,
                                     const ToyTrainConfig& tc);

}  // namespace latentcsi
