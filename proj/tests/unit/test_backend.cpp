#include <doctest.h>

#include <cmath>

#include "latentcsi/error.hpp"
#include "latentcsi/latent_backend.hpp"
#include "latentcsi/toy_backend.hpp"
#include "tmpdir.hpp"

using namespace latentcsi;

namespace {

LatentTensor ramp(int c, int h, int w, float scale = 0.1f) {
  LatentTensor z(c, h, w);
  for (std::size_t i = 0; i < z.size(); ++i) z.data[i] = scale * std::sin(0.37f * i + 0.2f);
  return z;
}

const ToyBackend& shared_backend() {
  static const auto b = ToyBackend::initialize(ToyBackendConfig{}, 21);
  return *b;
}

}  // namespace

TEST_SUITE("backend") {

TEST_CASE("linear schedule endpoints and cumulative products") {
  const auto s = linear_schedule(1000, 8.5e-4, 1.2e-2);
  CHECK_NOTHROW(validate(s));
  CHECK(s.beta[1] == doctest::Approx(8.5e-4));
  CHECK(s.beta[1000] == doctest::Approx(1.2e-2));
  CHECK(s.ab(0) == 1.0);
  double prod = 1;
  for (int t = 1; t <= 1000; ++t) prod *= 1 - s.beta[t];
  CHECK(s.ab(1000) == doctest::Approx(prod).epsilon(1e-12));
  const auto q = scaled_linear_schedule(1000, 8.5e-4, 1.2e-2);
  CHECK(std::sqrt(q.beta[500]) == doctest::Approx(std::sqrt(8.5e-4) + (std::sqrt(1.2e-2) - std::sqrt(8.5e-4)) * 499.0 / 999.0));
}

TEST_CASE("DDIM timesteps descend without duplicates") {
  CHECK(ddim_timesteps(600, 3) == std::vector<int>{600, 400, 200});
  CHECK(ddim_timesteps(0, 10).empty());
  const auto t = ddim_timesteps(5, 10);
  CHECK(t == std::vector<int>{5, 4, 3, 2, 1});
  CHECK(ddim_timesteps(1000, 1) == std::vector<int>{1000});
}

TEST_CASE("add_noise follows the forward process") {
  const auto s = linear_schedule();
  const LatentTensor z = ramp(4, 8, 8);
  const auto n = add_noise(z, 0.6, s, 7);
  CHECK(n.t_start == 600);
  const auto eps = gaussian_noise(z.size(), 7);
  const double a = std::sqrt(s.ab(600)), b = std::sqrt(1 - s.ab(600));
  for (std::size_t i = 0; i < z.size(); ++i) {
    CHECK(n.z.data[i] == doctest::Approx(a * z.data[i] + b * eps[i]).epsilon(1e-6));
  }
  const auto zero = add_noise(z, 0.0, s, 7);
  CHECK(zero.t_start == 0);
  CHECK(zero.z == z);
  CHECK_THROWS_AS(add_noise(z, 1.5, s, 7), InvalidArgument);
}

TEST_CASE("DDIM with a constant noise prediction recovers the clean component") {
  // If z_t = sqrt(ab_t) A + sqrt(1 - ab_t) c and the predictor always
  // returns c, every step keeps x0 = A, so the output is A.
  const auto s = linear_schedule();
  const LatentTensor A = ramp(4, 8, 8, 0.5f), c = ramp(4, 8, 8, -0.3f);
  NoisePredictor constant = [&](const LatentTensor&, int, const TextCondition&) { return c; };
  for (int t0 : {250, 600, 1000}) {
    for (int steps : {1, 7, 50}) {
      LatentTensor zt(4, 8, 8);
      for (std::size_t i = 0; i < zt.size(); ++i) {
        zt.data[i] = std::sqrt(s.ab(t0)) * A.data[i] + std::sqrt(1 - s.ab(t0)) * c.data[i];
      }
      const auto out = ddim_denoise(zt, t0, steps, TextCondition{}, 1.0, s, constant);
      for (std::size_t i = 0; i < out.size(); ++i) CHECK(out.data[i] == doctest::Approx(A.data[i]).epsilon(1e-5));
    }
  }
}

TEST_CASE("guidance combines conditional and unconditional predictions") {
  const auto s = linear_schedule();
  TextCondition cond{1, 1, {1.0f}, "c"}, uncond{1, 1, {0.0f}, ""};
  const LatentTensor e1 = ramp(1, 2, 2, 0.2f), e0 = ramp(1, 2, 2, -0.1f);
  NoisePredictor pred = [&](const LatentTensor&, int, const TextCondition& t) {
    return t.tokens[0] == 1.0f ? e1 : e0;
  };
  LatentTensor expected_eps(1, 2, 2);
  for (std::size_t i = 0; i < 4; ++i) expected_eps.data[i] = e0.data[i] + 3.0f * (e1.data[i] - e0.data[i]);
  NoisePredictor fixed = [&](const LatentTensor&, int, const TextCondition&) { return expected_eps; };
  const LatentTensor z = ramp(1, 2, 2, 0.4f);
  const auto guided = ddim_denoise(z, 300, 4, cond, 3.0, s, pred, &uncond);
  const auto direct = ddim_denoise(z, 300, 4, cond, 1.0, s, fixed);
  for (std::size_t i = 0; i < 4; ++i) CHECK(guided.data[i] == doctest::Approx(direct.data[i]).epsilon(1e-5));
  CHECK_THROWS(ddim_denoise(z, 300, 4, cond, 3.0, s, pred, nullptr));
}

TEST_CASE("text encoder is deterministic and pads with the unconditional token") {
  TextEncoder te;
  CHECK(te.token_id("person") == te.token_id("person"));
  CHECK(te.token_id("person") != 0);
  CHECK(te.token_ids("a person  walks").size() == 3);
  const auto e = te.embed("a person");
  CHECK(e.n_tokens == 2);
  CHECK(e.width == 32);
  CHECK(e == te.embed("a person"));
  const auto u = te.embed("");
  const auto ctx = padded_context(e, 8, u);
  CHECK(ctx.size() == 8u * 32);
  for (int j = 0; j < 32; ++j) CHECK(ctx[7 * 32 + j] == ctx[2 * 32 + j]);
}

TEST_CASE("toy backend satisfies the adapter contract") {
  const auto& b = shared_backend();
  const auto info = b.info();
  CHECK(info.latent_channels == 4);
  CHECK(info.latent_height == 8);
  CHECK(info.image_width == 64);
  RgbImage probe(64, 64, 0.3f);
  for (int y = 20; y < 40; ++y)
    for (int x = 10; x < 30; ++x) probe.at(x, y, 0) = 0.9f;
  const auto rep = check_conformance(b, probe);
  for (const auto& f : rep.failures) MESSAGE(f);
  CHECK(rep.ok);
}

TEST_CASE("strength zero decodes the start latent directly") {
  const auto& b = shared_backend();
  const LatentTensor z = ramp(4, 8, 8, 0.8f);
  Img2ImgParams p;
  p.strength = 0.0;
  p.steps = 50;
  const auto r = img2img(z, p, b);
  CHECK(r.t_start == 0);
  CHECK(r.steps_taken == 0);
  LatentTensor unscaled = z;
  for (auto& v : unscaled.data) v /= b.info().latent_scale;
  CHECK(r.image == b.decode(unscaled));
}

TEST_CASE("image pipeline equals latent pipeline on the encoder target") {
  const auto& b = shared_backend();
  RgbImage y(64, 64, 0.2f);
  for (int i = 0; i < 64; ++i) y.at(i, i, 1) = 1.0f;
  Img2ImgParams p;
  p.strength = 0.5;
  p.steps = 5;
  p.seed = 11;
  p.prompt = "a person";
  const auto a = image_img2img(y, p, b);
  const auto c = img2img(target_latent(b, y), p, b);
  CHECK(a.image == c.image);
  CHECK(a.latent == c.latent);
}

TEST_CASE("same seed gives identical generations, different seeds differ") {
  const auto& b = shared_backend();
  const LatentTensor z = ramp(4, 8, 8);
  Img2ImgParams p;
  p.steps = 4;
  p.seed = 5;
  const auto r1 = img2img(z, p, b), r2 = img2img(z, p, b);
  CHECK(r1.image == r2.image);
  p.seed = 6;
  CHECK(img2img(z, p, b).latent != r1.latent);
}

TEST_CASE("backends persist and reload with the same identity") {
  testsupport::TempDir dir("backend");
  const auto& b = shared_backend();
  save_toy_backend(dir / "b.lcsw", b);
  const auto back = load_toy_backend(dir / "b.lcsw");
  CHECK(back->info().identity == b.info().identity);
  const LatentTensor z = ramp(4, 8, 8);
  CHECK(back->decode(z) == b.decode(z));
  try {
    load_toy_backend(dir / "missing.lcsw");
    FAIL("expected error");
  } catch (const IoError& e) {
    const std::string m = e.what();
    CHECK(m.find("missing.lcsw") != std::string::npos);
    CHECK(m.find("train-backend") != std::string::npos);
  }
}

TEST_CASE("VAE training lowers reconstruction error below the mean image") {
  SyntheticConfig sc;
  const Dataset ds = generate_synthetic(160, 3, sc);
  ToyTrainConfig tc;
  tc.epochs = 8;
  tc.batch_size = 16;
  auto r = train_toy_vae(ds, ToyVaeConfig{}, tc);
  REQUIRE(r.log.val_loss.size() == 8);
  CHECK(r.log.val_loss.back() < r.log.val_loss.front());
  ToyBackendConfig bc;
  ToyBackend b(bc, r.params, toy_denoiser_layout(bc.denoiser, 4, 32).materialize(1));
  const auto train = ds.manifest.indices(Split::kTrain);
  const auto val = ds.manifest.indices(Split::kVal);
  RgbImage mean(64, 64, 0.0f);
  for (auto i : train)
    for (std::size_t j = 0; j < mean.size(); ++j) mean.data[j] += ds.images[i].data[j] / train.size();
  double recon = 0, base = 0;
  for (auto i : val) {
    const auto d = b.decode(b.encode(ds.images[i]).mu);
    for (std::size_t j = 0; j < d.size(); ++j) {
      recon += std::pow(d.data[j] - ds.images[i].data[j], 2);
      base += std::pow(mean.data[j] - ds.images[i].data[j], 2);
    }
  }
  CHECK(recon < base);
}

}  // TEST_SUITE
