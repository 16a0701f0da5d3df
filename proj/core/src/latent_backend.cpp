#include "latentcsi/latent_backend.hpp"

#include <cmath>
#include <random>

#include "latentcsi/error.hpp"

namespace latentcsi {

namespace {
DiffusionSchedule from_betas(std::vector<double> beta) {
  DiffusionSchedule s;
  s.T = static_cast<int>(beta.size()) - 1;
  s.alpha_bar.assign(beta.size(), 1.0);
  for (int t = 1; t <= s.T; ++t) s.alpha_bar[t] = s.alpha_bar[t - 1] * (1.0 - beta[t]);
  s.beta = std::move(beta);
  validate(s);
  return s;
}
}  // namespace

DiffusionSchedule linear_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw InvalidArgument("schedule: T must be >= 1");
  std::vector<double> beta(T + 1, 0.0);
  for (int t = 1; t <= T; ++t) {
    const double f = T == 1 ? 0.0 : static_cast<double>(t - 1) / (T - 1);
    beta[t] = beta_start + f * (beta_end - beta_start);
  }
  return from_betas(std::move(beta));
}

DiffusionSchedule scaled_linear_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw InvalidArgument("schedule: T must be >= 1");
  std::vector<double> beta(T + 1, 0.0);
  const double a = std::sqrt(beta_start), b = std::sqrt(beta_end);
  for (int t = 1; t <= T; ++t) {
    const double f = T == 1 ? 0.0 : static_cast<double>(t - 1) / (T - 1);
    const double r = a + f * (b - a);
    beta[t] = r * r;
  }
  return from_betas(std::move(beta));
}

void validate(const DiffusionSchedule& s) {
  if (s.T < 1 || s.beta.size() != static_cast<std::size_t>(s.T) + 1 ||
      s.alpha_bar.size() != s.beta.size()) {
    throw InvalidArgument("schedule: inconsistent lengths");
  }
  if (s.alpha_bar[0] != 1.0) throw InvalidArgument("schedule: alpha_bar[0] must be 1");
  for (int t = 1; t <= s.T; ++t) {
    if (!(s.beta[t] > 0 && s.beta[t] < 1)) {
      throw InvalidArgument("schedule: beta[" + std::to_string(t) + "] outside (0,1)");
    }
    if (!(s.alpha_bar[t] < s.alpha_bar[t - 1])) {
      throw InvalidArgument("schedule: alpha_bar not strictly decreasing at " + std::to_string(t));
    }
  }
  if (!(s.alpha_bar[1] > 0.99)) throw InvalidArgument("schedule: first-step alpha_bar <= 0.99");
}

std::vector<LatentTensor> LatentBackend::encode_means(const std::vector<RgbImage>& images) const {
  std::vector<LatentTensor> out;
  out.reserve(images.size());
  for (const auto& y : images) out.push_back(encode(y).mu);
  return out;
}

std::vector<float> gaussian_noise(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

NoisedLatent add_noise(const LatentTensor& z0, double strength, const DiffusionSchedule& s,
                       std::uint64_t seed) {
  if (!(strength >= 0.0 && strength <= 1.0)) {
    throw InvalidArgument("strength must be in [0,1], got " + std::to_string(strength));
  }
  NoisedLatent out;
  out.t_start = static_cast<int>(std::lround(strength * s.T));
  if (out.t_start == 0) {
    out.z = z0;
    return out;
  }
  const double ab = s.ab(out.t_start);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  const auto eps = gaussian_noise(z0.size(), seed);
  out.z = z0;
  for (std::size_t i = 0; i < z0.size(); ++i) {
    out.z.data[i] = static_cast<float>(a * z0.data[i] + b * eps[i]);
  }
  return out;
}

std::vector<int> ddim_timesteps(int t_start, int n_steps) {
  if (n_steps < 1) throw InvalidArgument("steps must be >= 1");
  if (t_start < 0) throw InvalidArgument("t_start must be >= 0");
  std::vector<int> ts;
  if (t_start == 0) return ts;
  for (int i = 0; i < n_steps; ++i) {
    const int t = static_cast<int>(
        std::lround(static_cast<double>(t_start) * (n_steps - i) / static_cast<double>(n_steps)));
    if (t >= 1 && (ts.empty() || t < ts.back())) ts.push_back(t);
  }
  return ts;
}

LatentTensor ddim_denoise(const LatentTensor& z_t, int t_start, int n_steps,
                          const TextCondition& cond, double guidance_scale,
                          const DiffusionSchedule& s, const NoisePredictor& denoiser,
                          const TextCondition* uncond) {
  if (t_start > s.T) throw InvalidArgument("t_start exceeds schedule length");
  const auto ts = ddim_timesteps(t_start, n_steps);
  if (ts.empty()) return z_t;
  const bool guided = guidance_scale != 1.0;
  if (guided && !uncond) throw InvalidArgument("guidance requires an unconditional embedding");

  // The running latent stays in double so long step chains do not
  // accumulate single-precision rounding.
  std::vector<double> z(z_t.data.begin(), z_t.data.end());
  LatentTensor zf = z_t;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const int prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    for (std::size_t j = 0; j < z.size(); ++j) zf.data[j] = static_cast<float>(z[j]);
    LatentTensor eps = denoiser(zf, t, cond);
    if (eps.size() != z.size()) throw ShapeError("denoiser output shape differs from latent");
    if (guided) {
      const LatentTensor eu = denoiser(zf, t, *uncond);
      for (std::size_t j = 0; j < z.size(); ++j) {
        eps.data[j] = static_cast<float>(eu.data[j] + guidance_scale * (eps.data[j] - eu.data[j]));
      }
    }
    const double ab_t = s.ab(t), ab_p = s.ab(prev);
    const double st = std::sqrt(1.0 - ab_t), rt = std::sqrt(ab_t);
    const double sp = std::sqrt(1.0 - ab_p), rp = std::sqrt(ab_p);
    for (std::size_t j = 0; j < z.size(); ++j) {
      const double e = eps.data[j];
      const double x0 = (z[j] - st * e) / rt;
      z[j] = rp * x0 + sp * e;
    }
  }
  LatentTensor out = z_t;
  for (std::size_t j = 0; j < z.size(); ++j) out.data[j] = static_cast<float>(z[j]);
  return out;
}

void validate(const Img2ImgParams& p) {
  if (!(p.strength >= 0.0 && p.strength <= 1.0)) {
    throw InvalidArgument("strength must be in [0,1], got " + std::to_string(p.strength));
  }
  if (p.steps < 1) throw InvalidArgument("steps must be >= 1, got " + std::to_string(p.steps));
  if (!std::isfinite(p.guidance_scale) || p.guidance_scale < 0) {
    throw InvalidArgument("guidance_scale must be finite and >= 0");
  }
}

namespace {
LatentTensor scaled(const LatentTensor& z, float f) {
  if (f == 1.0f) return z;
  LatentTensor out = z;
  for (auto& v : out.data) v *= f;
  return out;
}

void check_latent(const LatentTensor& z, const BackendInfo& info) {
  if (z.channels != info.latent_channels || z.height != info.latent_height ||
      z.width != info.latent_width) {
    throw ShapeError("latent " + std::to_string(z.channels) + "x" + std::to_string(z.height) + "x" +
                     std::to_string(z.width) + " does not match backend " +
                     std::to_string(info.latent_channels) + "x" +
                     std::to_string(info.latent_height) + "x" + std::to_string(info.latent_width));
  }
}
}  // namespace

Img2ImgResult img2img(const LatentTensor& z_start, const Img2ImgParams& p,
                      const LatentBackend& backend) {
  validate(p);
  const BackendInfo info = backend.info();
  check_latent(z_start, info);
  const DiffusionSchedule& s = backend.schedule();
  Img2ImgResult r;
  NoisedLatent n = add_noise(z_start, p.strength, s, p.seed);
  r.t_start = n.t_start;
  if (n.t_start == 0) {
    r.latent = std::move(n.z);
  } else {
    const TextCondition cond = backend.text_embed(p.prompt);
    const TextCondition uncond = backend.text_embed("");
    auto eps = [&backend](const LatentTensor& z, int t, const TextCondition& c) {
      return backend.denoise(z, t, c);
    };
    r.steps_taken = static_cast<int>(ddim_timesteps(n.t_start, p.steps).size());
    r.latent = ddim_denoise(n.z, n.t_start, p.steps, cond, p.guidance_scale, s, eps, &uncond);
  }
  r.image = backend.decode(scaled(r.latent, 1.0f / info.latent_scale));
  return r;
}

LatentTensor target_latent(const LatentBackend& backend, const RgbImage& y) {
  return scaled(backend.encode(y).mu, backend.info().latent_scale);
}

Img2ImgResult image_img2img(const RgbImage& y, const Img2ImgParams& p,
                            const LatentBackend& backend) {
  return img2img(target_latent(backend, y), p, backend);
}

ConformanceReport check_conformance(const LatentBackend& backend, const RgbImage& probe) {
  ConformanceReport rep;
  auto fail = [&rep](std::string m) {
    rep.ok = false;
    rep.failures.push_back(std::move(m));
  };
  try {
    const BackendInfo info = backend.info();
    if (info.latent_channels < 1 || info.latent_height < 1 || info.latent_width < 1) {
      fail("metadata: latent dims must be positive");
    }
    if (!(info.latent_scale > 0) || !std::isfinite(info.latent_scale)) fail("metadata: latent_scale");
    if (info.kind == "toy" && info.latent_scale != 1.0f) fail("toy backend must have latent_scale 1");
    validate(backend.schedule());
    if (backend.schedule().T != info.T) fail("metadata: T differs from schedule");
    if (probe.width != info.image_width || probe.height != info.image_height) {
      fail("probe image does not match backend image dims");
      return rep;
    }

    const VaePosterior a = backend.encode(probe), b = backend.encode(probe);
    if (!(a.mu == b.mu) || !(a.sigma == b.sigma)) fail("encode is not deterministic");
    if (a.mu.channels != info.latent_channels || a.mu.height != info.latent_height ||
        a.mu.width != info.latent_width) {
      fail("encode: mu shape differs from metadata");
    }
    if (a.sigma.size() != a.mu.size()) fail("encode: sigma shape differs from mu");
    for (float s : a.sigma.data) {
      if (!(s > 0)) {
        fail("encode: sigma must be positive");
        break;
      }
    }

    const RgbImage d1 = backend.decode(a.mu), d2 = backend.decode(a.mu);
    if (!(d1 == d2)) fail("decode is not deterministic");
    if (d1.width != info.image_width || d1.height != info.image_height) fail("decode: image dims");
    for (float v : d1.data) {
      if (!(v >= 0 && v <= 1)) {
        fail("decode: pixel outside [0,1]");
        break;
      }
    }

    const TextCondition c = backend.text_embed("a person"), u = backend.text_embed("");
    if (c.n_tokens < 1 || u.n_tokens < 1) fail("text_embed: at least one token required");
    if (!(backend.text_embed("a person") == c)) fail("text_embed is not deterministic");

    const int mid = std::max(1, info.T / 2);
    const LatentTensor z = scaled(a.mu, info.latent_scale);
    const LatentTensor e = backend.denoise(z, mid, c);
    if (e.channels != z.channels || e.height != z.height || e.width != z.width) {
      fail("denoise: output shape differs from latent");
    }
    if (!(backend.denoise(z, mid, c) == e)) fail("denoise is not deterministic");

    Img2ImgParams p;
    p.strength = 0.0;
    const Img2ImgResult r = img2img(z, p, backend);
    if (r.t_start != 0 || r.steps_taken != 0) fail("strength 0 ran denoising steps");
    const RgbImage direct = backend.decode(scaled(z, 1.0f / info.latent_scale));
    if (!(r.image == direct)) fail("strength 0 output differs from decode");
  } catch (const std::exception& ex) {
    fail(std::string("exception: ") + ex.what());
  }
  return rep;
}

}  // namespace latentcsi
