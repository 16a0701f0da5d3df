#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "latentcsi/error.hpp"
#include "latentcsi/metrics.hpp"

using namespace latentcsi;

namespace {

RgbImage random_image(std::mt19937_64& rng, int w = 32, int h = 32) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  RgbImage img(w, h);
  for (auto& v : img.data) v = u(rng);
  return img;
}

FeatureSet random_features(std::mt19937_64& rng, std::size_t n, int k, double shift = 0.0) {
  std::normal_distribution<double> nd;
  FeatureSet f;
  f.n = n;
  f.k = k;
  for (std::size_t i = 0; i < n * k; ++i) f.data.push_back(nd(rng) + shift);
  return f;
}

std::vector<double> random_spd(std::mt19937_64& rng, int k) {
  std::normal_distribution<double> nd;
  Eigen::MatrixXd a(k, k);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) a(i, j) = nd(rng);
  Eigen::MatrixXd m = a * a.transpose() / k + 0.1 * Eigen::MatrixXd::Identity(k, k);
  std::vector<double> out(k * k);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) out[i * k + j] = m(i, j);
  return out;
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("rmse on the byte scale") {
  std::mt19937_64 rng(1);
  const auto a = random_image(rng), b = random_image(rng), c = random_image(rng);
  CHECK(rmse(a, a) == 0.0);
  CHECK(rmse(RgbImage(8, 8, 0.0f), RgbImage(8, 8, 0.5f)) == doctest::Approx(127.5).epsilon(1e-12));
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::pow(255.0 * a.data[i] - 255.0 * b.data[i], 2);
  CHECK(std::abs(rmse(a, b) - std::sqrt(s / a.size())) < 1e-9);
  CHECK(std::abs(rmse(a, b) - rmse(b, a)) < 1e-9);
  CHECK(rmse(a, c) <= rmse(a, b) + rmse(b, c) + 1e-9);
  CHECK_THROWS_AS(rmse(a, RgbImage(16, 32)), ShapeError);
}

TEST_CASE("ssim identities and closed forms") {
  std::mt19937_64 rng(2);
  const auto a = random_image(rng), b = random_image(rng);
  CHECK(std::abs(ssim(a, a) - 1.0) < 1e-9);
  CHECK(std::abs(ssim(a, b) - ssim(b, a)) < 1e-12);
  const double c1 = std::pow(0.01 * 255, 2);
  CHECK(std::abs(ssim(RgbImage(16, 16, 0.0f), RgbImage(16, 16, 1.0f)) - c1 / (255.0 * 255.0 + c1)) < 1e-9);
  for (int i = 0; i < 100; ++i) {
    const auto x = random_image(rng, 12, 12), y = random_image(rng, 12, 12);
    const double v = ssim(x, y);
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
  CHECK_THROWS_AS(ssim(RgbImage(8, 8), RgbImage(8, 8)), InvalidArgument);
}

TEST_CASE("fid of a set with itself is zero and the formula is symmetric") {
  std::mt19937_64 rng(3);
  const auto f = random_features(rng, 200, 16);
  const auto g = random_features(rng, 150, 16, 0.3);
  CHECK(std::abs(fid(f, f)) < 1e-6);
  CHECK(std::abs(fid(f, g) - fid(g, f)) < 1e-8);
  CHECK(fid(f, g) > 0.1);
  FeatureSet bad = g;
  bad.k = 8;
  bad.data.resize(bad.n * 8);
  CHECK_THROWS_AS(fid(f, bad), ShapeError);
  bad = g;
  bad.data[3] = std::nan("");
  CHECK_THROWS_AS(fid(f, bad), InvalidArgument);
}

TEST_CASE("univariate injected moments give the closed form") {
  GaussianMoments a{1, {0.0}, {1.0}}, b{1, {1.0}, {4.0}};
  CHECK(frechet_distance(a, b) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("fid is invariant under a shared orthogonal rotation") {
  std::mt19937_64 rng(4);
  const int k = 12;
  const auto f = random_features(rng, 120, k), g = random_features(rng, 120, k, 0.2);
  Eigen::MatrixXd r(k, k);
  std::normal_distribution<double> nd;
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) r(i, j) = nd(rng);
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(r).householderQ();
  auto rotate = [&](const FeatureSet& s) {
    FeatureSet o = s;
    for (std::size_t n = 0; n < s.n; ++n) {
      Eigen::Map<const Eigen::VectorXd> row(s.data.data() + n * k, k);
      const Eigen::VectorXd y = q * row;
      for (int j = 0; j < k; ++j) o.data[n * k + j] = y[j];
    }
    return o;
  };
  CHECK(std::abs(fid(f, g) - fid(rotate(f), rotate(g))) < 1e-6);
}

TEST_CASE("matrix square roots agree across two methods") {
  std::mt19937_64 rng(5);
  for (int k : {1, 4, 16, 64}) {
    const auto m = random_spd(rng, k);
    const auto a = sqrtm_eigen(m, k), b = sqrtm_newton_schulz(m, k);
    double d = 0;
    for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
    CHECK(d < 1e-6);
    // The root squares back to the input.
    Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>> r(a.data(), k, k), mm(m.data(), k, k);
    CHECK(((r * r) - mm).cwiseAbs().maxCoeff() < 1e-8);
  }
  CHECK_THROWS_AS(sqrtm_eigen({1.0, 0.0, 0.0, -1.0}, 2), NumericalError);
}

TEST_CASE("few samples get a ridge on the covariance") {
  FeatureSet f;
  f.n = 3;
  f.k = 4;
  f.data = {1, 2, 3, 4, 2, 3, 4, 5, 0, 1, 0, 1};
  const auto m = moments(f);
  Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>> c(m.cov.data(), 4, 4);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c);
  CHECK(es.eigenvalues().minCoeff() > 0.5e-6);
}

TEST_CASE("toy extractor is deterministic and sensitive to blur") {
  ToyFeatureExtractor fx;
  CHECK(fx.width() == 64);
  std::mt19937_64 rng(6);
  std::vector<RgbImage> imgs;
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (int i = 0; i < 120; ++i) {
    RgbImage img(64, 64, 0.3f);
    const int x0 = static_cast<int>(u(rng) * 40), y0 = static_cast<int>(u(rng) * 40);
    for (int y = y0; y < y0 + 20; ++y)
      for (int x = x0; x < x0 + 12; ++x)
        for (int c = 0; c < 3; ++c) img.at(x, y, c) = u(rng) * 0.3f + 0.6f;
    imgs.push_back(img);
  }
  const auto f1 = fx.extract(imgs), f2 = fx.extract(imgs);
  CHECK(f1.data == f2.data);
  CHECK(f1.k == 64);
  CHECK(f1.extractor == fx.identity());
  CHECK(ToyFeatureExtractor().identity() == fx.identity());

  std::vector<RgbImage> shuffled = imgs, blurred;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  for (const auto& im : imgs) blurred.push_back(gaussian_blur(im, 3.0));
  CHECK(fid(f1, fx.extract(shuffled)) < fid(f1, fx.extract(blurred)));
}

TEST_CASE("crop evaluation with full-image boxes equals the uncropped metrics") {
  std::mt19937_64 rng(7);
  std::vector<RgbImage> refs, gens;
  for (int i = 0; i < 70; ++i) {
    refs.push_back(random_image(rng, 64, 64));
    gens.push_back(gaussian_blur(refs.back(), 1.0));
  }
  ToyFeatureExtractor fx;
  std::vector<std::optional<CropBox>> boxes(refs.size(), CropBox{0, 0, 64, 64});
  std::size_t skipped = 99;
  const auto crop = crop_eval(refs, gens, boxes, fx, 64, &skipped);
  const auto full = evaluate_images(refs, gens, fx);
  CHECK(skipped == 0);
  CHECK(std::abs(crop.rmse - full.full.rmse) < 1e-6);
  CHECK(std::abs(crop.ssim - full.full.ssim) < 1e-6);
  CHECK(std::abs(crop.fid - full.full.fid) < 1e-6);

  boxes[3].reset();
  boxes[10].reset();
  const auto partial = crop_eval(refs, gens, boxes, fx, 32, &skipped);
  CHECK(skipped == 2);
  CHECK(partial.n_images == refs.size() - 2);

  std::vector<std::optional<CropBox>> none(refs.size());
  CHECK_THROWS_AS(crop_eval(refs, gens, none, fx, 64, &skipped), InvalidArgument);
  boxes[0] = CropBox{60, 60, 8, 8};
  CHECK_THROWS_AS(crop_eval(refs, gens, boxes, fx, 64, &skipped), InvalidArgument);
}

TEST_CASE("metric reports round trip and flatten to CSV") {
  std::mt19937_64 rng(8);
  std::vector<RgbImage> refs, gens;
  for (int i = 0; i < 40; ++i) {
    refs.push_back(random_image(rng, 64, 64));
    gens.push_back(random_image(rng, 64, 64));
  }
  ToyFeatureExtractor fx;
  std::vector<std::optional<PixelBox>> boxes(40, PixelBox{4, 4, 32, 40});
  boxes[0].reset();
  GroundTruthDetector det(boxes);
  MetricReport r = evaluate_images(refs, gens, fx, &det);
  r.label = "latent";
  CHECK(r.crop_skipped == 1);
  CHECK(r.full.rmse >= 0);
  CHECK(r.full.fid >= -1e-6);
  const auto back = metric_report_from_json(report_json(r));
  CHECK(back.full.rmse == r.full.rmse);
  CHECK(back.crop->fid == r.crop->fid);
  CHECK(back.full.ssim_per_image == r.full.ssim_per_image);
  CHECK(back.extractor == fx.identity());
  const auto row = csv_row(r), header = csv_header();
  CHECK(std::count(row.begin(), row.end(), ',') == std::count(header.begin(), header.end(), ','));
  MetricReport again = evaluate_images(refs, gens, fx, &det);
  again.label = "latent";
  CHECK(report_json(again) == report_json(r));
}

}  // TEST_SUITE
