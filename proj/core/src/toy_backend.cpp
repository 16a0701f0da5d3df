#include "latentcsi/toy_backend.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <numbers>
#include <random>
#include <sstream>

#include "latentcsi/error.hpp"
#include "latentcsi/fileutil.hpp"
#include "latentcsi/nn/adam.hpp"
#include "latentcsi/weights_io.hpp"

namespace latentcsi {

using nlohmann::json;
using nn::Var;

// ------------------------------------------------------------------ config

void validate(const ToyBackendConfig& c) {
  const auto& v = c.vae;
  if (v.downsamples < 1 || v.image_size % (1 << v.downsamples) != 0) {
    throw InvalidArgument("toy vae: image_size must be divisible by 2^downsamples");
  }
  if (v.channels.empty()) throw InvalidArgument("toy vae: channels must be nonempty");
  for (int ch : v.channels) {
    if (ch < 1) throw InvalidArgument("toy vae: channel counts must be >= 1");
  }
  if (v.latent_channels < 1) throw InvalidArgument("toy vae: latent_channels must be >= 1");
  if (!(v.kl_weight >= 0)) throw InvalidArgument("toy vae: kl_weight must be >= 0");
  const auto& d = c.denoiser;
  if (d.channels < 1 || d.temb_dim < 2 || d.temb_dim % 2 || d.attn_dim < 1 || d.ctx_len < 1) {
    throw InvalidArgument("toy denoiser: invalid dimensions");
  }
  if (c.text.vocab < 2 || c.text.width < 1) throw InvalidArgument("text encoder: invalid dims");
  if (c.T < 1) throw InvalidArgument("toy backend: T must be >= 1");
}

std::string config_json(const ToyBackendConfig& c) {
  json j = {{"vae",
             {{"image_size", c.vae.image_size},
              {"latent_channels", c.vae.latent_channels},
              {"downsamples", c.vae.downsamples},
              {"channels", c.vae.channels},
              {"kl_weight", c.vae.kl_weight}}},
            {"denoiser",
             {{"channels", c.denoiser.channels},
              {"temb_dim", c.denoiser.temb_dim},
              {"attn_dim", c.denoiser.attn_dim},
              {"ctx_len", c.denoiser.ctx_len}}},
            {"text", {{"vocab", c.text.vocab}, {"width", c.text.width}, {"seed", c.text.seed}}},
            {"T", c.T},
            {"beta_start", c.beta_start},
            {"beta_end", c.beta_end},
            {"scaled_linear", c.scaled_linear}};
  return j.dump();
}

ToyBackendConfig toy_config_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    ToyBackendConfig c;
    const auto& v = j.at("vae");
    c.vae.image_size = v.at("image_size");
    c.vae.latent_channels = v.at("latent_channels");
    c.vae.downsamples = v.at("downsamples");
    c.vae.channels = v.at("channels").get<std::vector<int>>();
    c.vae.kl_weight = v.at("kl_weight");
    const auto& d = j.at("denoiser");
    c.denoiser.channels = d.at("channels");
    c.denoiser.temb_dim = d.at("temb_dim");
    c.denoiser.attn_dim = d.at("attn_dim");
    c.denoiser.ctx_len = d.at("ctx_len");
    const auto& t = j.at("text");
    c.text.vocab = t.at("vocab");
    c.text.width = t.at("width");
    c.text.seed = t.at("seed");
    c.T = j.at("T");
    c.beta_start = j.at("beta_start");
    c.beta_end = j.at("beta_end");
    c.scaled_linear = j.at("scaled_linear");
    validate(c);
    return c;
  } catch (const json::exception& e) {
    throw ParseError(std::string("toy backend config: ") + e.what());
  }
}

// ------------------------------------------------------------------ text

TextEncoder::TextEncoder(TextEncoderConfig cfg) : cfg_(cfg) {
  table_.resize(static_cast<std::size_t>(cfg.vocab) * cfg.width);
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<float> d(0.0f, 1.0f);
  for (auto& v : table_) v = d(rng);
}

int TextEncoder::token_id(const std::string& word) const {
  return 1 + static_cast<int>(fnv1a64(word) % static_cast<std::uint64_t>(cfg_.vocab - 1));
}

std::vector<int> TextEncoder::token_ids(const std::string& prompt) const {
  std::vector<int> ids;
  std::istringstream in(prompt);
  std::string w;
  while (in >> w) ids.push_back(token_id(w));
  if (ids.empty()) ids.push_back(0);
  return ids;
}

TextCondition TextEncoder::embed(const std::string& prompt) const {
  const auto ids = token_ids(prompt);
  TextCondition c;
  c.n_tokens = static_cast<int>(ids.size());
  c.width = cfg_.width;
  c.prompt_echo = prompt;
  c.tokens.reserve(ids.size() * cfg_.width);
  for (int id : ids) {
    const float* row = &table_[static_cast<std::size_t>(id) * cfg_.width];
    c.tokens.insert(c.tokens.end(), row, row + cfg_.width);
  }
  return c;
}

// ------------------------------------------------------------------ networks

namespace {
int vae_ch(const ToyVaeConfig& c, int i) {
  return c.channels[std::min<std::size_t>(static_cast<std::size_t>(i), c.channels.size() - 1)];
}
int latent_side(const ToyVaeConfig& c) { return c.image_size >> c.downsamples; }
}  // namespace

nn::ParamLayout toy_vae_layout(const ToyVaeConfig& c) {
  nn::ParamLayout l;
  const int D = c.downsamples;
  l.conv("vae.enc.conv_in", 3, vae_ch(c, 0), 3);
  for (int i = 0; i < D; ++i) {
    l.conv("vae.enc.down" + std::to_string(i), vae_ch(c, i), vae_ch(c, i + 1), 3);
  }
  l.resblock("vae.enc.res", vae_ch(c, D), 3);
  l.conv("vae.enc.conv_out", vae_ch(c, D), 2 * c.latent_channels, 3);

  l.conv("vae.dec.conv_in", c.latent_channels, vae_ch(c, D), 3);
  l.resblock("vae.dec.res", vae_ch(c, D), 3);
  for (int i = D; i > 0; --i) {
    l.conv_transpose("vae.dec.up" + std::to_string(i), vae_ch(c, i), vae_ch(c, i - 1), 4, 2);
  }
  l.conv("vae.dec.conv_out", vae_ch(c, 0), 3, 3);
  return l;
}

nn::ParamLayout toy_denoiser_layout(const ToyDenoiserConfig& c, int latent_channels,
                                    int text_width) {
  nn::ParamLayout l;
  l.linear("unet.temb1", c.temb_dim, 2 * c.channels);
  l.linear("unet.temb2", 2 * c.channels, c.channels);
  l.conv("unet.conv_in", latent_channels, c.channels, 3);
  l.resblock("unet.res1", c.channels, 3);
  l.group_norm("unet.attn.norm", c.channels);
  l.conv("unet.attn.to_q", c.channels, c.attn_dim, 1);
  l.linear("unet.attn_k", text_width, c.attn_dim);
  l.linear("unet.attn_v", text_width, c.attn_dim);
  l.conv("unet.attn.to_out", c.attn_dim, c.channels, 1);
  l.resblock("unet.res2", c.channels, 3);
  l.group_norm("unet.out_norm", c.channels);
  l.conv("unet.conv_out", c.channels, latent_channels, 3);
  return l;
}

template <class T>
std::pair<Var, Var> toy_vae_encode(nn::Binder<T>& b, const ToyVaeConfig& c, Var x) {
  auto& t = b.tape();
  Var h = t.silu(nn::conv(b, "vae.enc.conv_in", x, 1, 1));
  for (int i = 0; i < c.downsamples; ++i) {
    h = t.silu(nn::conv(b, "vae.enc.down" + std::to_string(i), h, 2, 1));
  }
  h = nn::resblock(b, "vae.enc.res", h);
  h = nn::conv(b, "vae.enc.conv_out", h, 1, 1);
  return {t.channel_slice(h, 0, c.latent_channels),
          t.channel_slice(h, c.latent_channels, 2 * c.latent_channels)};
}

template <class T>
Var toy_vae_decode(nn::Binder<T>& b, const ToyVaeConfig& c, Var z) {
  auto& t = b.tape();
  Var h = nn::conv(b, "vae.dec.conv_in", z, 1, 1);
  h = nn::resblock(b, "vae.dec.res", h);
  for (int i = c.downsamples; i > 0; --i) {
    h = t.silu(nn::conv_transpose(b, "vae.dec.up" + std::to_string(i), h, 2, 1));
  }
  return t.sigmoid(nn::conv(b, "vae.dec.conv_out", h, 1, 1));
}

template <class T>
Var toy_denoise(nn::Binder<T>& b, const ToyDenoiserConfig& c, Var z, Var temb, Var ctx) {
  auto& t = b.tape();
  const nn::Shape cs = t.shape(ctx);
  const int n = cs[0], len = cs[1], width = cs[2];
  Var e = nn::linear(b, "unet.temb2", t.silu(nn::linear(b, "unet.temb1", temb)));
  Var h = t.add_channel_bias(nn::conv(b, "unet.conv_in", z, 1, 1), e);
  h = nn::resblock(b, "unet.res1", h);
  Var flat = t.reshape(ctx, {n * len, width});
  Var keys = t.reshape(nn::linear(b, "unet.attn_k", flat), {n, len, c.attn_dim});
  Var vals = t.reshape(nn::linear(b, "unet.attn_v", flat), {n, len, c.attn_dim});
  h = nn::cross_attention(b, "unet.attn", h, keys, vals);
  h = nn::resblock(b, "unet.res2", h);
  h = t.silu(nn::group_norm(b, "unet.out_norm", h));
  return nn::conv(b, "unet.conv_out", h, 1, 1);
}

template std::pair<Var, Var> toy_vae_encode<float>(nn::Binder<float>&, const ToyVaeConfig&, Var);
template std::pair<Var, Var> toy_vae_encode<double>(nn::Binder<double>&, const ToyVaeConfig&, Var);
template Var toy_vae_decode<float>(nn::Binder<float>&, const ToyVaeConfig&, Var);
template Var toy_vae_decode<double>(nn::Binder<double>&, const ToyVaeConfig&, Var);
template Var toy_denoise<float>(nn::Binder<float>&, const ToyDenoiserConfig&, Var, Var, Var);
template Var toy_denoise<double>(nn::Binder<double>&, const ToyDenoiserConfig&, Var, Var, Var);

std::vector<float> timestep_features(int t, int dim) {
  const int half = dim / 2;
  std::vector<float> f(dim);
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    f[i] = static_cast<float>(std::sin(t * freq));
    f[half + i] = static_cast<float>(std::cos(t * freq));
  }
  return f;
}

std::vector<float> padded_context(const TextCondition& cond, int ctx_len,
                                  const TextCondition& uncond) {
  const std::size_t w = static_cast<std::size_t>(cond.width);
  std::vector<float> out;
  out.reserve(ctx_len * w);
  const int take = std::min(cond.n_tokens, ctx_len);
  out.insert(out.end(), cond.tokens.begin(), cond.tokens.begin() + take * w);
  for (int i = take; i < ctx_len; ++i) {
    out.insert(out.end(), uncond.tokens.begin(), uncond.tokens.begin() + w);
  }
  return out;
}

// ------------------------------------------------------------------ backend

namespace {
DiffusionSchedule make_schedule(const ToyBackendConfig& c) {
  return c.scaled_linear ? scaled_linear_schedule(c.T, c.beta_start, c.beta_end)
                         : linear_schedule(c.T, c.beta_start, c.beta_end);
}

nn::ParamSet<float> merged(const nn::ParamSet<float>& a, const nn::ParamSet<float>& b) {
  nn::ParamSet<float> out;
  for (const auto* s : {&a, &b}) {
    for (const auto& p : s->params()) out.add(p.name, p.shape).value = p.value;
  }
  return out;
}

void check_layout(const nn::ParamLayout& l, const nn::ParamSet<float>& ps, const char* what) {
  for (const auto& d : l.decls()) {
    if (!ps.contains(d.name)) {
      throw InvalidArgument(std::string(what) + ": missing parameter " + d.name);
    }
    if (ps.at(d.name).shape != d.shape) {
      throw ShapeError(std::string(what) + ": " + d.name + " has shape " +
                       nn::shape_str(ps.at(d.name).shape) + ", expected " + nn::shape_str(d.shape));
    }
  }
}
}  // namespace

ToyBackend::ToyBackend(ToyBackendConfig cfg, nn::ParamSet<float> vae, nn::ParamSet<float> denoiser)
    : cfg_(std::move(cfg)),
      vae_(std::move(vae)),
      unet_(std::move(denoiser)),
      text_(cfg_.text),
      schedule_(make_schedule(cfg_)) {
  validate(cfg_);
  check_layout(toy_vae_layout(cfg_.vae), vae_, "toy vae");
  check_layout(toy_denoiser_layout(cfg_.denoiser, cfg_.vae.latent_channels, cfg_.text.width), unet_,
               "toy denoiser");
  identity_ = hex64(fnv1a64(serialize_weights(merged(vae_, unet_), config_json(cfg_))));
}

std::unique_ptr<ToyBackend> ToyBackend::initialize(const ToyBackendConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  auto vae = toy_vae_layout(cfg.vae).materialize(seed);
  auto unet = toy_denoiser_layout(cfg.denoiser, cfg.vae.latent_channels, cfg.text.width)
                  .materialize(seed ^ 0xd1b54a32d192ed03ULL);
  return std::make_unique<ToyBackend>(cfg, std::move(vae), std::move(unet));
}

BackendInfo ToyBackend::info() const {
  BackendInfo i;
  i.kind = "toy";
  i.latent_channels = cfg_.vae.latent_channels;
  i.latent_height = i.latent_width = latent_side(cfg_.vae);
  i.image_width = i.image_height = cfg_.vae.image_size;
  i.latent_scale = 1.0f;
  i.T = cfg_.T;
  i.identity = identity_;
  return i;
}

VaePosterior ToyBackend::encode(const RgbImage& image) const {
  if (image.width != cfg_.vae.image_size || image.height != cfg_.vae.image_size) {
    throw ShapeError("toy vae: expected " + std::to_string(cfg_.vae.image_size) + "x" +
                     std::to_string(cfg_.vae.image_size) + " image, got " +
                     std::to_string(image.width) + "x" + std::to_string(image.height));
  }
  const int n = cfg_.vae.image_size, lc = cfg_.vae.latent_channels, ls = latent_side(cfg_.vae);
  nn::Tape<float> t(false);
  nn::Binder<float> b(t, vae_);
  auto [mu, logvar] = toy_vae_encode(b, cfg_.vae, t.constant({1, 3, n, n}, to_planar(image)));
  VaePosterior p{LatentTensor(lc, ls, ls), LatentTensor(lc, ls, ls)};
  p.mu.data = t.take_value(mu);
  const auto lv = t.value(logvar);
  for (std::size_t i = 0; i < lv.size(); ++i) {
    p.sigma.data[i] = std::exp(0.5f * std::clamp(lv[i], -30.0f, 20.0f));
  }
  return p;
}

std::vector<LatentTensor> ToyBackend::encode_means(const std::vector<RgbImage>& images) const {
  const int n = cfg_.vae.image_size, lc = cfg_.vae.latent_channels, ls = latent_side(cfg_.vae);
  const std::size_t per = static_cast<std::size_t>(3) * n * n;
  std::vector<LatentTensor> out;
  out.reserve(images.size());
  constexpr std::size_t kBatch = 32;
  for (std::size_t s = 0; s < images.size(); s += kBatch) {
    const std::size_t e = std::min(images.size(), s + kBatch);
    std::vector<float> x;
    x.reserve((e - s) * per);
    for (std::size_t i = s; i < e; ++i) {
      if (images[i].width != n || images[i].height != n) throw ShapeError("toy vae: image dims");
      const auto p = to_planar(images[i]);
      x.insert(x.end(), p.begin(), p.end());
    }
    nn::Tape<float> t(false);
    nn::Binder<float> b(t, vae_);
    auto mu = toy_vae_encode(b, cfg_.vae, t.constant({static_cast<int>(e - s), 3, n, n}, x)).first;
    const auto v = t.value(mu);
    const std::size_t lat = static_cast<std::size_t>(lc) * ls * ls;
    for (std::size_t i = 0; i < e - s; ++i) {
      LatentTensor z(lc, ls, ls);
      std::copy_n(v.begin() + i * lat, lat, z.data.begin());
      out.push_back(std::move(z));
    }
  }
  return out;
}

RgbImage ToyBackend::decode(const LatentTensor& z) const {
  const int lc = cfg_.vae.latent_channels, ls = latent_side(cfg_.vae), n = cfg_.vae.image_size;
  if (z.channels != lc || z.height != ls || z.width != ls) {
    throw ShapeError("toy vae: latent must be " + std::to_string(lc) + "x" + std::to_string(ls) +
                     "x" + std::to_string(ls));
  }
  nn::Tape<float> t(false);
  nn::Binder<float> b(t, vae_);
  Var y = toy_vae_decode(b, cfg_.vae, t.constant({1, lc, ls, ls}, z.data));
  return from_planar(t.value(y).data(), n, n);
}

LatentTensor ToyBackend::denoise(const LatentTensor& z, int step, const TextCondition& cond) const {
  const int lc = cfg_.vae.latent_channels, ls = latent_side(cfg_.vae);
  if (z.channels != lc || z.height != ls || z.width != ls) {
    throw ShapeError("toy denoiser: latent shape mismatch");
  }
  if (cond.width != cfg_.text.width || cond.n_tokens < 1) {
    throw ShapeError("toy denoiser: text condition width mismatch");
  }
  const auto& d = cfg_.denoiser;
  const TextCondition uncond = text_.embed("");
  nn::Tape<float> t(false);
  nn::Binder<float> b(t, unet_);
  Var y = toy_denoise(b, d, t.constant({1, lc, ls, ls}, z.data),
                      t.constant({1, d.temb_dim}, timestep_features(step, d.temb_dim)),
                      t.constant({1, d.ctx_len, cond.width}, padded_context(cond, d.ctx_len, uncond)));
  LatentTensor out(lc, ls, ls);
  out.data = t.take_value(y);
  return out;
}

TextCondition ToyBackend::text_embed(const std::string& prompt) const { return text_.embed(prompt); }

void save_toy_backend(const std::filesystem::path& path, const ToyBackend& backend) {
  json meta = {{"format", "latentcsi-toy-backend"},
               {"config", json::parse(config_json(backend.config()))}};
  save_weights(path, merged(backend.vae_params(), backend.denoiser_params()), meta.dump());
}

std::unique_ptr<ToyBackend> load_toy_backend(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw IoError("toy backend not found at " + path.string() +
                  " (create it with `latentcsi train-backend`)");
  }
  WeightFile wf = load_weights(path);
  json meta;
  try {
    meta = json::parse(wf.meta_json);
  } catch (const json::exception& e) {
    throw ParseError(std::string("toy backend meta: ") + e.what());
  }
  if (meta.value("format", "") != "latentcsi-toy-backend") {
    throw ParseError("weights at " + path.string() + " are not a toy backend");
  }
  ToyBackendConfig cfg = toy_config_from_json(meta.at("config").dump());
  nn::ParamSet<float> vae, unet;
  for (auto& p : wf.params.params()) {
    auto& dst = p.name.rfind("vae.", 0) == 0 ? vae : unet;
    dst.add(p.name, p.shape).value = std::move(p.value);
  }
  return std::make_unique<ToyBackend>(cfg, std::move(vae), std::move(unet));
}

// ------------------------------------------------------------------ training

namespace {

using Clock = std::chrono::steady_clock;

std::vector<float> gather_images(const Dataset& ds, const std::vector<std::size_t>& idx,
                                 std::size_t begin, std::size_t end) {
  std::vector<float> x;
  for (std::size_t i = begin; i < end; ++i) {
    const auto p = to_planar(ds.images[idx[i]]);
    x.insert(x.end(), p.begin(), p.end());
  }
  return x;
}

void check_finite(double loss, int epoch, int batch, const char* what) {
  if (!std::isfinite(loss)) {
    throw DivergenceError(std::string(what) + ": loss became non-finite at epoch " +
                              std::to_string(epoch) + ", batch " + std::to_string(batch),
                          epoch, batch);
  }
}

}  // namespace

ToyVaeResult train_toy_vae(const Dataset& ds, const ToyVaeConfig& cfg, const ToyTrainConfig& tc) {
  ToyBackendConfig full;
  full.vae = cfg;
  validate(full);
  auto train_idx = ds.manifest.indices(Split::kTrain);
  const auto val_idx = ds.manifest.indices(Split::kVal);
  if (train_idx.empty()) throw InvalidArgument("toy vae: training split is empty");
  const int n = cfg.image_size;
  for (auto i : train_idx) {
    if (ds.images[i].width != n || ds.images[i].height != n) {
      throw ShapeError("toy vae: dataset images are not " + std::to_string(n) + "x" +
                       std::to_string(n));
    }
  }

  ToyVaeResult r;
  r.params = toy_vae_layout(cfg).materialize(tc.seed);
  nn::Adam opt(r.params, nn::AdamConfig{tc.lr, 0.9, 0.999, 1e-8});
  std::mt19937_64 rng(tc.seed ^ 0x5eed5eedULL);
  const int ls = latent_side(cfg), lc = cfg.latent_channels;

  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    const auto t0 = Clock::now();
    std::shuffle(train_idx.begin(), train_idx.end(), rng);
    double sum = 0;
    std::size_t seen = 0;
    int batch = 0;
    for (std::size_t s = 0; s < train_idx.size(); s += tc.batch_size, ++batch) {
      const std::size_t e = std::min(train_idx.size(), s + tc.batch_size);
      const int bn = static_cast<int>(e - s);
      const auto x = gather_images(ds, train_idx, s, e);
      std::normal_distribution<float> nd(0.0f, 1.0f);
      std::vector<float> eps(static_cast<std::size_t>(bn) * lc * ls * ls);
      for (auto& v : eps) v = nd(rng);

      r.params.zero_grad();
      nn::Tape<float> t;
      nn::Binder<float> b(t, r.params);
      Var xin = t.constant({bn, 3, n, n}, x);
      auto [mu, logvar] = toy_vae_encode(b, cfg, xin);
      Var z = t.reparameterize(mu, logvar, eps);
      Var rec = t.mean_sq_error(toy_vae_decode(b, cfg, z), x);
      Var loss = t.add(rec, t.scale(t.gaussian_kl_mean(mu, logvar), static_cast<float>(cfg.kl_weight)));
      const double lv = t.value(loss)[0];
      check_finite(lv, epoch, batch, "toy vae");
      t.backward(loss);
      opt.step();
      sum += lv * bn;
      seen += bn;
    }
    r.log.train_loss.push_back(sum / seen);

    double vsum = 0;
    for (std::size_t s = 0; s < val_idx.size(); s += 64) {
      const std::size_t e = std::min(val_idx.size(), s + 64);
      const auto x = gather_images(ds, val_idx, s, e);
      nn::Tape<float> t(false);
      const nn::ParamSet<float>& frozen = r.params;
      nn::Binder<float> b(t, frozen);
      Var mu = toy_vae_encode(b, cfg, t.constant({static_cast<int>(e - s), 3, n, n}, x)).first;
      vsum += t.value(t.mean_sq_error(toy_vae_decode(b, cfg, mu), x))[0] * (e - s);
    }
    r.log.val_loss.push_back(val_idx.empty() ? r.log.train_loss.back() : vsum / val_idx.size());
    r.log.epoch_seconds.push_back(std::chrono::duration<double>(Clock::now() - t0).count());
    if (tc.verbose) {
      std::fprintf(stderr, "vae epoch %d train %.6f val %.6f (%.1fs)\n", epoch,
                   r.log.train_loss.back(), r.log.val_loss.back(), r.log.epoch_seconds.back());
    }
  }
  return r;
}

ToyDenoiserResult train_toy_denoiser(const Dataset& ds, const ToyBackend& vae_backend,
                                     const ToyTrainConfig& tc) {
  const ToyBackendConfig& cfg = vae_backend.config();
  const auto& dc = cfg.denoiser;
  auto train_idx = ds.manifest.indices(Split::kTrain);
  const auto val_idx = ds.manifest.indices(Split::kVal);
  if (train_idx.empty()) throw InvalidArgument("toy denoiser: training split is empty");

  std::vector<LatentTensor> latents = vae_backend.encode_means(ds.images);
  const int lc = cfg.vae.latent_channels, ls = latent_side(cfg.vae);
  const std::size_t lat = static_cast<std::size_t>(lc) * ls * ls;
  const DiffusionSchedule& sched = vae_backend.schedule();
  const TextEncoder& text = vae_backend.text_encoder();
  const TextCondition uncond = text.embed("");
  std::vector<std::vector<float>> ctx_cache(ds.manifest.entries.size());
  for (std::size_t i = 0; i < ctx_cache.size(); ++i) {
    ctx_cache[i] = padded_context(text.embed(ds.manifest.entries[i].caption), dc.ctx_len, uncond);
  }
  const std::vector<float> ctx_empty = padded_context(uncond, dc.ctx_len, uncond);

  ToyDenoiserResult r;
  r.params = toy_denoiser_layout(dc, lc, cfg.text.width).materialize(tc.seed);
  nn::Adam opt(r.params, nn::AdamConfig{tc.lr, 0.9, 0.999, 1e-8});
  std::mt19937_64 rng(tc.seed ^ 0xde4015eULL);

  // Builds a noised batch: (z_t, temb, ctx, eps).
  struct Batch {
    std::vector<float> z, temb, ctx, eps;
  };
  auto make_batch = [&](const std::vector<std::size_t>& idx, std::size_t s, std::size_t e,
                        std::mt19937_64& g, bool drop) {
    Batch bt;
    std::uniform_int_distribution<int> td(1, sched.T);
    std::normal_distribution<float> nd(0.0f, 1.0f);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t k = s; k < e; ++k) {
      const std::size_t i = idx[k];
      const int step = td(g);
      const double ab = sched.ab(step);
      const float a = static_cast<float>(std::sqrt(ab)), c = static_cast<float>(std::sqrt(1 - ab));
      for (std::size_t j = 0; j < lat; ++j) {
        const float ep = nd(g);
        bt.eps.push_back(ep);
        bt.z.push_back(a * latents[i].data[j] + c * ep);
      }
      const auto tf = timestep_features(step, dc.temb_dim);
      bt.temb.insert(bt.temb.end(), tf.begin(), tf.end());
      const bool empty = drop && u(g) < tc.empty_prompt_rate;
      const auto& cx = empty ? ctx_empty : ctx_cache[i];
      bt.ctx.insert(bt.ctx.end(), cx.begin(), cx.end());
    }
    return bt;
  };

  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    const auto t0 = Clock::now();
    std::shuffle(train_idx.begin(), train_idx.end(), rng);
    double sum = 0;
    std::size_t seen = 0;
    int batch = 0;
    for (std::size_t s = 0; s < train_idx.size(); s += tc.batch_size, ++batch) {
      const std::size_t e = std::min(train_idx.size(), s + tc.batch_size);
      const int bn = static_cast<int>(e - s);
      Batch bt = make_batch(train_idx, s, e, rng, true);
      r.params.zero_grad();
      nn::Tape<float> t;
      nn::Binder<float> b(t, r.params);
      Var pred = toy_denoise(b, dc, t.constant({bn, lc, ls, ls}, bt.z),
                             t.constant({bn, dc.temb_dim}, bt.temb),
                             t.constant({bn, dc.ctx_len, cfg.text.width}, bt.ctx));
      Var loss = t.mean_sq_error(pred, bt.eps);
      const double lv = t.value(loss)[0];
      check_finite(lv, epoch, batch, "toy denoiser");
      t.backward(loss);
      opt.step();
      sum += lv * bn;
      seen += bn;
    }
    r.log.train_loss.push_back(sum / seen);

    // Validation noise is drawn from a fixed stream so epochs compare fairly.
    std::mt19937_64 vrng(tc.seed ^ 0xfa11ULL);
    double vsum = 0;
    for (std::size_t s = 0; s < val_idx.size(); s += 64) {
      const std::size_t e = std::min(val_idx.size(), s + 64);
      const int bn = static_cast<int>(e - s);
      Batch bt = make_batch(val_idx, s, e, vrng, false);
      nn::Tape<float> t(false);
      const nn::ParamSet<float>& frozen = r.params;
      nn::Binder<float> b(t, frozen);
      Var pred = toy_denoise(b, dc, t.constant({bn, lc, ls, ls}, bt.z),
                             t.constant({bn, dc.temb_dim}, bt.temb),
                             t.constant({bn, dc.ctx_len, cfg.text.width}, bt.ctx));
      vsum += t.value(t.mean_sq_error(pred, bt.eps))[0] * bn;
    }
    r.log.val_loss.push_back(val_idx.empty() ? r.log.train_loss.back() : vsum / val_idx.size());
    r.log.epoch_seconds.push_back(std::chrono::duration<double>(Clock::now() - t0).count());
    if (tc.verbose) {
      std::fprintf(stderr, "denoiser epoch %d train %.6f val %.6f (%.1fs)\n", epoch,
                   r.log.train_loss.back(), r.log.val_loss.back(), r.log.epoch_seconds.back());
    }
  }
  return r;
}

}  // namespace latentcsi
