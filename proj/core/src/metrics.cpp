#include "latentcsi/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <sstream>

#include "latentcsi/error.hpp"
#include "latentcsi/fileutil.hpp"
#include "latentcsi/nn/layers.hpp"
#include "latentcsi/weights_io.hpp"

namespace latentcsi {

using nlohmann::json;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace {

void check_same(const RgbImage& a, const RgbImage& b, const char* what) {
  if (a.width != b.width || a.height != b.height || a.size() != b.size()) {
    throw ShapeError(std::string(what) + ": image sizes differ (" + std::to_string(a.width) + "x" +
                     std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                     std::to_string(b.height) + ")");
  }
}

Eigen::Map<const Mat> as_mat(const std::vector<double>& m, int k) {
  if (m.size() != static_cast<std::size_t>(k) * k) throw ShapeError("matrix is not k*k");
  return Eigen::Map<const Mat>(m.data(), k, k);
}

std::vector<double> to_vec(const Mat& m) { return {m.data(), m.data() + m.size()}; }

}  // namespace

double rmse(const RgbImage& a, const RgbImage& b) {
  check_same(a, b, "rmse");
  if (a.size() == 0) throw InvalidArgument("rmse: empty image");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = 255.0 * a.data[i] - 255.0 * b.data[i];
    s += d * d;
  }
  return std::sqrt(s / a.size());
}

double ssim(const RgbImage& a, const RgbImage& b, const SsimParams& p) {
  check_same(a, b, "ssim");
  if (p.window < 1 || p.window % 2 == 0) throw InvalidArgument("ssim: window must be odd");
  if (a.width < p.window || a.height < p.window) {
    throw InvalidArgument("ssim: image smaller than the " + std::to_string(p.window) + "px window");
  }
  std::vector<double> g(p.window);
  const int r = p.window / 2;
  double gs = 0;
  for (int i = 0; i < p.window; ++i) gs += g[i] = std::exp(-0.5 * (i - r) * (i - r) / (p.sigma * p.sigma));
  for (auto& v : g) v /= gs;
  const double c1 = (p.k1 * p.L) * (p.k1 * p.L);
  const double c2 = (p.k2 * p.L) * (p.k2 * p.L);
  const int W = a.width, H = a.height;
  const int ow = W - p.window + 1, oh = H - p.window + 1;

  // Valid-mode separable filter of a W*H plane.
  auto filter = [&](const std::vector<double>& src) {
    std::vector<double> rows(static_cast<std::size_t>(ow) * H);
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < ow; ++x) {
        double s = 0;
        for (int i = 0; i < p.window; ++i) s += g[i] * src[y * W + x + i];
        rows[y * ow + x] = s;
      }
    }
    std::vector<double> out(static_cast<std::size_t>(ow) * oh);
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        double s = 0;
        for (int i = 0; i < p.window; ++i) s += g[i] * rows[(y + i) * ow + x];
        out[y * ow + x] = s;
      }
    }
    return out;
  };

  const double scale = p.L;
  double total = 0;
  const std::size_t plane = static_cast<std::size_t>(W) * H;
  for (int c = 0; c < 3; ++c) {
    std::vector<double> pa(plane), pb(plane), aa(plane), bb(plane), ab(plane);
    for (std::size_t i = 0; i < plane; ++i) {
      pa[i] = scale * a.data[i * 3 + c];
      pb[i] = scale * b.data[i * 3 + c];
      aa[i] = pa[i] * pa[i];
      bb[i] = pb[i] * pb[i];
      ab[i] = pa[i] * pb[i];
    }
    const auto ma = filter(pa), mb = filter(pb), va = filter(aa), vb = filter(bb), vab = filter(ab);
    double s = 0;
    for (std::size_t i = 0; i < ma.size(); ++i) {
      const double sa = va[i] - ma[i] * ma[i];
      const double sb = vb[i] - mb[i] * mb[i];
      const double sab = vab[i] - ma[i] * mb[i];
      s += ((2 * ma[i] * mb[i] + c1) * (2 * sab + c2)) /
           ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (sa + sb + c2));
    }
    total += s / ma.size();
  }
  return total / 3;
}

// ------------------------------------------------------------------ FID

GaussianMoments moments(const FeatureSet& f) {
  if (f.k < 1) throw InvalidArgument("moments: feature width must be >= 1");
  if (f.n < 2) throw InvalidArgument("moments: need at least 2 feature rows");
  if (f.data.size() != f.n * f.k) throw ShapeError("moments: data is not n*k");
  for (double v : f.data) {
    if (!std::isfinite(v)) throw InvalidArgument("moments: non-finite feature value");
  }
  Eigen::Map<const Mat> x(f.data.data(), static_cast<Eigen::Index>(f.n), f.k);
  const Eigen::RowVectorXd mu = x.colwise().mean();
  const Mat c = x.rowwise() - mu;
  Mat cov = (c.transpose() * c) / static_cast<double>(f.n - 1);
  if (f.n <= static_cast<std::size_t>(f.k)) cov += 1e-6 * Mat::Identity(f.k, f.k);
  GaussianMoments m;
  m.k = f.k;
  m.mean.assign(mu.data(), mu.data() + f.k);
  m.cov = to_vec(cov);
  return m;
}

std::vector<double> sqrtm_eigen(const std::vector<double>& m, int k) {
  const Mat a = as_mat(m, k);
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (a + a.transpose()));
  if (es.info() != Eigen::Success) throw NumericalError("sqrtm: eigendecomposition failed");
  Eigen::VectorXd ev = es.eigenvalues();
  const double tol = -1e-8 * std::max(1.0, ev.cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev[i] < tol) throw NumericalError("sqrtm: matrix is not positive semidefinite");
    ev[i] = std::sqrt(std::max(0.0, ev[i]));
  }
  const Mat r = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  return to_vec(r);
}

std::vector<double> sqrtm_newton_schulz(const std::vector<double>& m, int k, int max_iters,
                                        double tol) {
  const Mat a = as_mat(m, k);
  const double norm = a.norm();
  if (!(norm > 0)) return std::vector<double>(m.size(), 0.0);
  const Mat I = Mat::Identity(k, k);
  Mat y = a / norm, z = I;
  for (int it = 0; it < max_iters; ++it) {
    const Mat t = 0.5 * (3.0 * I - z * y);
    y = y * t;
    z = t * z;
    if (((y * y) * norm - a).norm() / norm < tol) break;
  }
  const Mat r = y * std::sqrt(norm);
  if (!r.allFinite()) throw NumericalError("sqrtm: Newton-Schulz iteration diverged");
  return to_vec(r);
}

double frechet_distance(const GaussianMoments& a, const GaussianMoments& b) {
  if (a.k != b.k) {
    throw ShapeError("fid: feature widths differ (" + std::to_string(a.k) + " vs " +
                     std::to_string(b.k) + ")");
  }
  const int k = a.k;
  Eigen::Map<const Eigen::VectorXd> ma(a.mean.data(), k), mb(b.mean.data(), k);
  const Mat sa = as_mat(a.cov, k), sb = as_mat(b.cov, k);
  const Mat ra = as_mat(sqrtm_eigen(a.cov, k), k);
  const Mat inner = ra * sb * ra;
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw NumericalError("fid: eigendecomposition failed");
  const auto& ev = es.eigenvalues();
  const double tol = -1e-8 * std::max(1.0, ev.cwiseAbs().maxCoeff());
  double tr_sqrt = 0;
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev[i] < tol) throw NumericalError("fid: covariance product has a negative eigenvalue");
    tr_sqrt += std::sqrt(std::max(0.0, ev[i]));
  }
  return (ma - mb).squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
}

double fid(const FeatureSet& a, const FeatureSet& b) {
  if (a.k != b.k) {
    throw ShapeError("fid: feature widths differ (" + std::to_string(a.k) + " vs " +
                     std::to_string(b.k) + ")");
  }
  return frechet_distance(moments(a), moments(b));
}

// ------------------------------------------------------------------ extractor

ToyFeatureExtractor::ToyFeatureExtractor(ToyExtractorConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.channels.empty()) throw InvalidArgument("feature extractor needs at least one layer");
  if (cfg_.input_size >> cfg_.channels.size() < 1) {
    throw InvalidArgument("feature extractor input is too small for its depth");
  }
  nn::ParamLayout layout;
  int cin = 3;
  for (std::size_t i = 0; i < cfg_.channels.size(); ++i) {
    layout.conv("f" + std::to_string(i), cin, cfg_.channels[i], 3);
    cin = cfg_.channels[i];
  }
  params_ = layout.materialize(cfg_.seed);
  // He scaling for the ReLU stack; first-layer filters are made zero-mean
  // so features respond to edges and texture rather than brightness.
  for (auto& p : params_.params()) {
    if (p.shape.size() != 4) continue;
    for (auto& v : p.value) v *= std::sqrt(2.0f);
  }
  auto& w0 = params_.at("f0.weight");
  const std::size_t per = w0.value.size() / w0.shape[0];
  for (int o = 0; o < w0.shape[0]; ++o) {
    float* w = w0.value.data() + o * per;
    double m = 0;
    for (std::size_t i = 0; i < per; ++i) m += w[i];
    m /= per;
    for (std::size_t i = 0; i < per; ++i) w[i] -= static_cast<float>(m);
  }
  json meta = {{"format", "latentcsi-toy-extractor"},
               {"input_size", cfg_.input_size},
               {"channels", cfg_.channels},
               {"seed", cfg_.seed}};
  identity_ = "toy-" + hex64(fnv1a64(serialize_weights(params_, meta.dump())));
}

FeatureSet ToyFeatureExtractor::extract(const std::vector<RgbImage>& images) const {
  FeatureSet fs;
  fs.k = width();
  fs.n = images.size();
  fs.extractor = identity_;
  fs.data.reserve(fs.n * fs.k);
  const int S = cfg_.input_size;
  constexpr std::size_t kBatch = 32;
  for (std::size_t s = 0; s < images.size(); s += kBatch) {
    const std::size_t e = std::min(images.size(), s + kBatch);
    const int n = static_cast<int>(e - s);
    std::vector<float> x;
    x.reserve(static_cast<std::size_t>(n) * 3 * S * S);
    for (std::size_t i = s; i < e; ++i) {
      for (float v : to_planar(resize_bilinear(images[i], S, S))) x.push_back(2.0f * v - 1.0f);
    }
    nn::Tape<float> t(false);
    nn::Binder<float> b(t, params_);
    nn::Var h = t.constant({n, 3, S, S}, std::move(x));
    for (std::size_t l = 0; l < cfg_.channels.size(); ++l) {
      h = t.relu(nn::conv(b, "f" + std::to_string(l), h, 2, 1));
    }
    const auto& shape = t.shape(h);
    const auto& v = t.value(h);
    const std::size_t hw = static_cast<std::size_t>(shape[2]) * shape[3];
    for (int i = 0; i < n; ++i) {
      for (int c = 0; c < shape[1]; ++c) {
        const float* p = v.data() + (static_cast<std::size_t>(i) * shape[1] + c) * hw;
        double sum = 0;
        for (std::size_t j = 0; j < hw; ++j) sum += p[j];
        fs.data.push_back(sum / hw);
      }
    }
  }
  return fs;
}

// ------------------------------------------------------------------ crops

const char* source_name(CropBox::Source s) {
  return s == CropBox::Source::kGroundTruth ? "ground_truth" : "detector";
}

GroundTruthDetector::GroundTruthDetector(std::vector<std::optional<PixelBox>> boxes)
    : boxes_(std::move(boxes)) {}

std::optional<CropBox> GroundTruthDetector::detect(std::size_t index, const RgbImage&) const {
  if (index >= boxes_.size() || !boxes_[index]) return std::nullopt;
  const auto& b = *boxes_[index];
  return CropBox{b.x, b.y, b.w, b.h, CropBox::Source::kGroundTruth};
}

namespace {

MetricSet score(const std::vector<RgbImage>& refs, const std::vector<RgbImage>& gens,
                const FeatureExtractor& extractor) {
  MetricSet m;
  m.n_images = refs.size();
  for (std::size_t i = 0; i < refs.size(); ++i) {
    m.rmse_per_image.push_back(rmse(refs[i], gens[i]));
    m.ssim_per_image.push_back(ssim(refs[i], gens[i]));
  }
  m.rmse = mean_std(m.rmse_per_image).mean;
  m.ssim = mean_std(m.ssim_per_image).mean;
  m.fid = fid(extractor.extract(refs), extractor.extract(gens));
  return m;
}

void check_sets(const std::vector<RgbImage>& refs, const std::vector<RgbImage>& gens) {
  if (refs.size() != gens.size()) {
    throw ShapeError("metrics: " + std::to_string(refs.size()) + " references but " +
                     std::to_string(gens.size()) + " generated images");
  }
  if (refs.empty()) throw InvalidArgument("metrics: no images");
}

}  // namespace

MetricSet crop_eval(const std::vector<RgbImage>& refs, const std::vector<RgbImage>& gens,
                    const std::vector<std::optional<CropBox>>& boxes,
                    const FeatureExtractor& extractor, int crop_size, std::size_t* skipped) {
  check_sets(refs, gens);
  if (boxes.size() != refs.size()) throw ShapeError("crop_eval: one box slot per image required");
  if (crop_size < 1) throw InvalidArgument("crop_eval: crop_size must be >= 1");
  std::vector<RgbImage> cr, cg;
  std::size_t skip = 0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (!boxes[i]) {
      ++skip;
      continue;
    }
    const auto& b = *boxes[i];
    if (b.w < 8 || b.h < 8 || b.x < 0 || b.y < 0 || b.x + b.w > refs[i].width ||
        b.y + b.h > refs[i].height) {
      throw InvalidArgument("crop_eval: box for sample " + std::to_string(i) +
                            " is outside the image or smaller than 8 px");
    }
    check_same(refs[i], gens[i], "crop_eval");
    cr.push_back(resize_bilinear(crop(refs[i], b.x, b.y, b.w, b.h), crop_size, crop_size));
    cg.push_back(resize_bilinear(crop(gens[i], b.x, b.y, b.w, b.h), crop_size, crop_size));
  }
  if (skipped) *skipped = skip;
  if (cr.empty()) throw InvalidArgument("crop_eval: every sample lacks a subject box");
  return score(cr, cg, extractor);
}

MetricReport evaluate_images(const std::vector<RgbImage>& refs, const std::vector<RgbImage>& gens,
                             const FeatureExtractor& extractor, const Detector* detector,
                             int crop_size) {
  check_sets(refs, gens);
  MetricReport r;
  r.extractor = extractor.identity();
  r.crop_size = crop_size;
  r.full = score(refs, gens, extractor);
  if (detector) {
    std::vector<std::optional<CropBox>> boxes;
    for (std::size_t i = 0; i < refs.size(); ++i) boxes.push_back(detector->detect(i, refs[i]));
    r.crop = crop_eval(refs, gens, boxes, extractor, crop_size, &r.crop_skipped);
  }
  return r;
}

// ------------------------------------------------------------------ reports

MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  if (v.empty()) return r;
  for (double x : v) r.mean += x;
  r.mean /= v.size();
  if (v.size() > 1) {
    double s = 0;
    for (double x : v) s += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(s / (v.size() - 1));
  }
  return r;
}

namespace {

json set_json(const MetricSet& m) {
  return {{"rmse", m.rmse},
          {"ssim", m.ssim},
          {"fid", m.fid},
          {"n_images", m.n_images},
          {"rmse_per_image", m.rmse_per_image},
          {"ssim_per_image", m.ssim_per_image}};
}

MetricSet set_from(const json& j) {
  MetricSet m;
  m.rmse = j.at("rmse");
  m.ssim = j.at("ssim");
  m.fid = j.at("fid");
  m.n_images = j.at("n_images");
  m.rmse_per_image = j.at("rmse_per_image").get<std::vector<double>>();
  m.ssim_per_image = j.at("ssim_per_image").get<std::vector<double>>();
  return m;
}

}  // namespace

std::string report_json(const MetricReport& r) {
  json j = {{"format", "latentcsi-metrics"},
            {"label", r.label},
            {"extractor", r.extractor},
            {"full", set_json(r.full)},
            {"crop_size", r.crop_size},
            {"crop_skipped", r.crop_skipped},
            {"config", r.config.empty() ? json::object() : json::parse(r.config)}};
  j["crop"] = r.crop ? set_json(*r.crop) : json(nullptr);
  return j.dump(2);
}

MetricReport metric_report_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    MetricReport r;
    r.label = j.value("label", "");
    r.extractor = j.at("extractor");
    r.full = set_from(j.at("full"));
    r.crop_size = j.at("crop_size");
    r.crop_skipped = j.at("crop_skipped");
    if (!j.at("crop").is_null()) r.crop = set_from(j.at("crop"));
    r.config = j.at("config").dump();
    return r;
  } catch (const json::exception& e) {
    throw ParseError(std::string("metric report: ") + e.what());
  }
}

std::string csv_header() {
  return "label,n_images,rmse,ssim,fid,crop_n_images,crop_rmse,crop_ssim,crop_fid,crop_skipped,"
         "extractor";
}

std::string csv_row(const MetricReport& r) {
  std::ostringstream o;
  o.precision(10);
  o << r.label << ',' << r.full.n_images << ',' << r.full.rmse << ',' << r.full.ssim << ','
    << r.full.fid << ',';
  if (r.crop) {
    o << r.crop->n_images << ',' << r.crop->rmse << ',' << r.crop->ssim << ',' << r.crop->fid;
  } else {
    o << ",,,";
  }
  o << ',' << r.crop_skipped << ',' << r.extractor;
  return o.str();
}

}  // namespace latentcsi
