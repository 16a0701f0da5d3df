#pragma once

// Image quality metrics over (reference, generated) pairs: RMSE and SSIM on
// the 0-255 scale, FID over a pluggable feature extractor, and the
// crop-based variant driven by per-sample subject boxes.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "latentcsi/csi_data.hpp"
#include "latentcsi/image.hpp"
#include "latentcsi/nn/tape.hpp"

namespace latentcsi {

/// sqrt(mean((255a - 255b)^2)) over all pixels and channels.
double rmse(const RgbImage& a, const RgbImage& b);

struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double L = 255.0;
};
/// Mean local SSIM over every fully contained Gaussian window, averaged
/// over channels. Both images are scaled to [0, L] first.
double ssim(const RgbImage& a, const RgbImage& b, const SsimParams& p = {});

/// n feature rows of width k, row-major.
struct FeatureSet {
  std::size_t n = 0;
  int k = 0;
  std::vector<double> data;
  std::string extractor;  // identity of the extractor that produced the rows
};

/// Mean and covariance for the Frechet distance; cov is k*k row-major.
struct GaussianMoments {
  int k = 0;
  std::vector<double> mean;
  std::vector<double> cov;
};
/// Unbiased covariance; adds 1e-6 I when n <= k.
GaussianMoments moments(const FeatureSet& f);

/// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)). The trace of the
/// square root comes from the eigenvalues of S_a^(1/2) S_b S_a^(1/2).
double frechet_distance(const GaussianMoments& a, const GaussianMoments& b);
double fid(const FeatureSet& a, const FeatureSet& b);

/// Square root of a symmetric positive semidefinite k*k matrix via a
/// symmetric eigendecomposition.
std::vector<double> sqrtm_eigen(const std::vector<double>& m, int k);
/// Coupled Newton-Schulz iteration for the same root; needs a positive
/// definite input. Stops when the residual |Y^2 - M|_F / |M|_F < tol.
std::vector<double> sqrtm_newton_schulz(const std::vector<double>& m, int k, int max_iters = 200,
                                        double tol = 1e-13);

class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual int width() const = 0;
  virtual std::string identity() const = 0;
  virtual FeatureSet extract(const std::vector<RgbImage>& images) const = 0;
};

struct ToyExtractorConfig {
  int input_size = 64;             // images are resized to this square first
  std::vector<int> channels{16, 32, 64};  // one stride-2 conv per entry
  std::uint64_t seed = 0xf1d0;
};

/// Frozen, seeded conv stack (3x3 stride-2 convs with ReLU, zero-mean
/// first-layer filters, inputs mapped to [-1, 1]) followed by global
/// average pooling; width is the last channel count.
class ToyFeatureExtractor final : public FeatureExtractor {
 public:
  explicit ToyFeatureExtractor(ToyExtractorConfig cfg = {});
  int width() const override { return cfg_.channels.back(); }
  std::string identity() const override { return identity_; }
  FeatureSet extract(const std::vector<RgbImage>& images) const override;

 private:
  ToyExtractorConfig cfg_;
  nn::ParamSet<float> params_;
  std::string identity_;
};

struct CropBox {
  enum class Source { kGroundTruth, kDetector };
  int x = 0, y = 0, w = 0, h = 0;
  Source source = Source::kGroundTruth;
};
const char* source_name(CropBox::Source s);

/// Subject boxes for the images being evaluated.
class Detector {
 public:
  virtual ~Detector() = default;
  virtual std::optional<CropBox> detect(std::size_t index, const RgbImage& image) const = 0;
};

/// Boxes recorded in a manifest (synthetic data ships true subject boxes).
class GroundTruthDetector final : public Detector {
 public:
  explicit GroundTruthDetector(std::vector<std::optional<PixelBox>> boxes);
  std::optional<CropBox> detect(std::size_t index, const RgbImage& image) const override;

 private:
  std::vector<std::optional<PixelBox>> boxes_;
};

struct MetricSet {
  double rmse = 0;
  double ssim = 0;
  double fid = 0;
  std::vector<double> rmse_per_image;
  std::vector<double> ssim_per_image;
  std::size_t n_images = 0;
};

struct MetricReport {
  MetricSet full;
  std::optional<MetricSet> crop;
  std::size_t crop_skipped = 0;
  int crop_size = 64;
  std::string extractor;
  std::string label;   // free-form run label for tables
  std::string config;  // JSON echo of the generation settings
};

/// Full-image metrics and, when a detector is given, the crop variant:
/// both images are cropped with the reference box and resized to
/// crop_size x crop_size. Samples without a box are skipped and counted.
MetricReport evaluate_images(const std::vector<RgbImage>& refs, const std::vector<RgbImage>& gens,
                             const FeatureExtractor& extractor, const Detector* detector = nullptr,
                             int crop_size = 64);
/// Crop-only metrics. Throws when every sample is skipped.
MetricSet crop_eval(const std::vector<RgbImage>& refs, const std::vector<RgbImage>& gens,
                    const std::vector<std::optional<CropBox>>& boxes,
                    const FeatureExtractor& extractor, int crop_size, std::size_t* skipped);

std::string report_json(const MetricReport& r);
MetricReport metric_report_from_json(const std::string& text);
std::string csv_header();
std::string csv_row(const MetricReport& r);

struct MeanStd {
  double mean = 0;
  double std = 0;  // sample standard deviation; 0 for a single value
};
MeanStd mean_std(const std::vector<double>& v);

}  // namespace latentcsi
