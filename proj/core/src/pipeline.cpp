#include "latentcsi/pipeline.hpp"

#include "latentcsi/error.hpp"

namespace latentcsi {

CsiImagePipeline::CsiImagePipeline(Checkpoint checkpoint,
                                   std::shared_ptr<const LatentBackend> backend)
    : ck_(std::move(checkpoint)), backend_(std::move(backend)) {
  if (ck_.target == TargetKind::kPixel) {
    backend_.reset();
    return;
  }
  if (!backend_) throw InvalidArgument("a latent checkpoint needs a backend to decode its output");
  const BackendInfo info = backend_->info();
  if (ck_.spec.out_channels != info.latent_channels || ck_.spec.out_size() != info.latent_height ||
      info.latent_height != info.latent_width) {
    throw ShapeError("checkpoint predicts " + std::to_string(ck_.spec.out_channels) + "x" +
                     std::to_string(ck_.spec.out_size()) + "x" + std::to_string(ck_.spec.out_size()) +
                     " latents, backend expects " + std::to_string(info.latent_channels) + "x" +
                     std::to_string(info.latent_height) + "x" + std::to_string(info.latent_width));
  }
}

std::vector<float> CsiImagePipeline::inputs(const std::vector<AmplitudeVector>& raw) const {
  std::vector<float> x;
  x.reserve(raw.size() * ck_.spec.s);
  for (const auto& a : raw) {
    if (static_cast<int>(a.values.size()) != ck_.spec.s) {
      throw ShapeError("CSI vector has " + std::to_string(a.values.size()) +
                       " amplitudes, model expects " + std::to_string(ck_.spec.s));
    }
    const auto v = normalize(a, ck_.norm_stats);
    x.insert(x.end(), v.values.begin(), v.values.end());
  }
  return x;
}

LatentTensor CsiImagePipeline::predict_latent(const AmplitudeVector& raw) const {
  if (ck_.target != TargetKind::kLatent) {
    throw InvalidArgument("pixel checkpoints do not predict latents");
  }
  const auto x = inputs({raw});
  return forward(ck_.weights, ck_.spec, AmplitudeVector{x});
}

Img2ImgResult CsiImagePipeline::generate(const AmplitudeVector& raw, const Img2ImgParams& p) const {
  validate(p);
  if (ck_.target == TargetKind::kPixel) {
    if (p.strength != 0.0) {
      throw InvalidArgument("strength: pixel checkpoints support only strength 0");
    }
    const auto x = inputs({raw});
    const auto y = forward_batch(ck_.weights, ck_.spec, x, 1);
    Img2ImgResult r;
    const int S = ck_.spec.out_size();
    r.image = from_planar(y.data(), S, S);
    return r;
  }
  return img2img(predict_latent(raw), p, *backend_);
}

std::vector<RgbImage> CsiImagePipeline::reconstruct(const std::vector<AmplitudeVector>& raw) const {
  std::vector<RgbImage> out;
  if (raw.empty()) return out;
  const int n = static_cast<int>(raw.size());
  const auto y = forward_batch(ck_.weights, ck_.spec, inputs(raw), n);
  const std::size_t per = ck_.spec.out_numel();
  const int S = ck_.spec.out_size();
  Img2ImgParams p;
  p.strength = 0.0;
  for (int i = 0; i < n; ++i) {
    const float* row = y.data() + i * per;
    if (ck_.target == TargetKind::kPixel) {
      out.push_back(from_planar(row, S, S));
    } else {
      LatentTensor z(ck_.spec.out_channels, S, S);
      std::copy_n(row, per, z.data.begin());
      out.push_back(img2img(z, p, *backend_).image);
    }
  }
  return out;
}

double latent_mse(const LatentTensor& a, const LatentTensor& b) {
  if (a.channels != b.channels || a.height != b.height || a.width != b.width) {
    throw ShapeError("latent_mse: latent shapes differ");
  }
  double s = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    s += d * d;
  }
  return a.data.empty() ? 0.0 : s / a.data.size();
}

}  // namespace latentcsi
