#pragma once

// CSI-only inference: a trained checkpoint (latent encoder or pixel
// baseline) plus, for latent checkpoints, the backend that decodes and
// denoises its predictions.

#include <memory>
#include <vector>

#include "latentcsi/csi_data.hpp"
#include "latentcsi/latent_backend.hpp"
#include "latentcsi/training.hpp"

namespace latentcsi {

class CsiImagePipeline {
 public:
  /// `backend` is required for latent checkpoints and ignored for pixel ones.
  CsiImagePipeline(Checkpoint checkpoint, std::shared_ptr<const LatentBackend> backend);

  const Checkpoint& checkpoint() const { return ck_; }
  TargetKind target() const { return ck_.target; }
  const LatentBackend* backend() const { return backend_.get(); }

  /// Scaled latent predicted from raw (unnormalized) amplitudes.
  LatentTensor predict_latent(const AmplitudeVector& raw) const;

  /// Latent checkpoints run img2img from the predicted latent. Pixel
  /// checkpoints return the prediction itself and accept only strength 0.
  Img2ImgResult generate(const AmplitudeVector& raw, const Img2ImgParams& p) const;

  /// Strength-zero reconstructions for a batch of raw amplitude vectors.
  std::vector<RgbImage> reconstruct(const std::vector<AmplitudeVector>& raw) const;

 private:
  std::vector<float> inputs(const std::vector<AmplitudeVector>& raw) const;

  Checkpoint ck_;
  std::shared_ptr<const LatentBackend> backend_;
};

/// Mean squared difference of two latents of equal shape.
double latent_mse(const LatentTensor& a, const LatentTensor& b);

}  // namespace latentcsi
