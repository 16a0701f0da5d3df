#pragma once

// Latent diffusion machinery shared by every backend: the noise schedule,
// strength-controlled noising, deterministic DDIM, and the img2img
// composition. A backend supplies the VAE, the denoiser, and the text
// encoder behind the LatentBackend interface.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "latentcsi/encoder.hpp"
#include "latentcsi/image.hpp"

namespace latentcsi {

/// alpha_bar[0] == 1 stands for the clean latent; timesteps run 1..T.
struct DiffusionSchedule {
  int T = 0;
  std::vector<double> beta;       // beta[t], t = 1..T (beta[0] unused, 0)
  std::vector<double> alpha_bar;  // prod_{i<=t} (1 - beta[i]); alpha_bar[0] = 1

  double ab(int t) const { return alpha_bar.at(static_cast<std::size_t>(t)); }
};

/// beta linearly spaced from beta_start to beta_end over T steps.
DiffusionSchedule linear_schedule(int T = 1000, double beta_start = 8.5e-4, double beta_end = 1.2e-2);
/// sqrt(beta) linearly spaced, the variant used by Stable Diffusion.
DiffusionSchedule scaled_linear_schedule(int T = 1000, double beta_start = 8.5e-4,
                                         double beta_end = 1.2e-2);
void validate(const DiffusionSchedule& s);

struct VaePosterior {
  LatentTensor mu;
  LatentTensor sigma;
};

/// Token embeddings, row-major [n_tokens, width].
struct TextCondition {
  int n_tokens = 0;
  int width = 0;
  std::vector<float> tokens;
  std::string prompt_echo;
  bool operator==(const TextCondition&) const = default;
};

struct BackendInfo {
  std::string kind;  // "toy" or "external"
  int latent_channels = 0, latent_height = 0, latent_width = 0;
  int image_width = 0, image_height = 0;
  float latent_scale = 1.0f;
  int T = 0;
  std::string identity;  // stable hash of the weights and config
};

/// Adapter contract for a latent diffusion backend. Implementations are
/// immutable after construction and every method is reentrant.
class LatentBackend {
 public:
  virtual ~LatentBackend() = default;

  virtual BackendInfo info() const = 0;
  virtual const DiffusionSchedule& schedule() const = 0;

  virtual VaePosterior encode(const RgbImage& image) const = 0;
  /// Pixels clamped to [0,1].
  virtual RgbImage decode(const LatentTensor& z) const = 0;
  /// Predicted noise for the (scaled) latent z at timestep t.
  virtual LatentTensor denoise(const LatentTensor& z, int t, const TextCondition& cond) const = 0;
  virtual TextCondition text_embed(const std::string& prompt) const = 0;

  /// Posterior means for many images; the default loops over encode().
  virtual std::vector<LatentTensor> encode_means(const std::vector<RgbImage>& images) const;
};

/// Seeded standard normal samples; the generator add_noise draws from.
std::vector<float> gaussian_noise(std::size_t n, std::uint64_t seed);

struct NoisedLatent {
  LatentTensor z;
  int t_start = 0;
};

/// t_start = round(strength * T); identity at t_start == 0, otherwise
/// sqrt(ab) z0 + sqrt(1 - ab) eps.
NoisedLatent add_noise(const LatentTensor& z0, double strength, const DiffusionSchedule& s,
                       std::uint64_t seed);

/// Descending timesteps round(t_start * (n - i) / n), i = 0..n-1, with
/// duplicates removed. Empty when t_start == 0.
std::vector<int> ddim_timesteps(int t_start, int n_steps);

using NoisePredictor = std::function<LatentTensor(const LatentTensor&, int, const TextCondition&)>;

/// Deterministic (eta = 0) DDIM from t_start down to 0. With guidance_scale
/// != 1 the prediction is eps_u + g (eps_c - eps_u), with eps_u taken under
/// `uncond`.
LatentTensor ddim_denoise(const LatentTensor& z_t, int t_start, int n_steps,
                          const TextCondition& cond, double guidance_scale,
                          const DiffusionSchedule& s, const NoisePredictor& denoiser,
                          const TextCondition* uncond = nullptr);

struct Img2ImgParams {
  double strength = 0.6;
  int steps = 100;
  std::string prompt;
  double guidance_scale = 1.0;
  std::uint64_t seed = 0;
};
void validate(const Img2ImgParams& p);

struct Img2ImgResult {
  RgbImage image;
  LatentTensor latent;  // denoised latent, scaled space
  int t_start = 0;
  int steps_taken = 0;
};

/// add_noise -> ddim_denoise -> decode. `z_start` lives in the backend's
/// scaled latent space.
Img2ImgResult img2img(const LatentTensor& z_start, const Img2ImgParams& p,
                      const LatentBackend& backend);
/// The image-input pipeline: encode(y).mu scaled, then img2img.
Img2ImgResult image_img2img(const RgbImage& y, const Img2ImgParams& p, const LatentBackend& backend);

/// Encoder-target latent for an image: encode(y).mu * latent_scale.
LatentTensor target_latent(const LatentBackend& backend, const RgbImage& y);

struct ConformanceReport {
  bool ok = true;
  std::vector<std::string> failures;
};
/// Shape contracts, determinism, and the strength-zero identity, runnable
/// against any adapter.
ConformanceReport check_conformance(const LatentBackend& backend, const RgbImage& probe);

}  // namespace latentcsi
