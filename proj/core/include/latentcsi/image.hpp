#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace latentcsi {

/// Interleaved RGB, row-major, values in [0,1].
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<float> data;

  RgbImage() = default;
  RgbImage(int w, int h, float fill = 0.0f)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, fill) {}

  float& at(int x, int y, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  float at(int x, int y, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  std::size_t size() const { return data.size(); }
  bool operator==(const RgbImage&) const = default;
};

/// Throws InvalidArgument when the length or range invariant is broken.
void validate(const RgbImage& img);

/// [3,H,W] planar copy, the layout the networks consume.
std::vector<float> to_planar(const RgbImage& img);
/// Inverse of to_planar; clamps to [0,1].
RgbImage from_planar(const float* chw, int width, int height);

/// Sub-rectangle copy. The box must lie inside the image.
RgbImage crop(const RgbImage& img, int x, int y, int w, int h);
/// Bilinear resampling with half-pixel centers; identity when the size is
/// unchanged.
RgbImage resize_bilinear(const RgbImage& img, int width, int height);
/// Separable Gaussian blur with clamped borders.
RgbImage gaussian_blur(const RgbImage& img, double sigma);

/// 8-bit RGB PNG (values are rounded to the nearest 1/255).
std::string encode_png(const RgbImage& img);
RgbImage decode_png(const std::string& bytes);
void save_png(const std::filesystem::path& path, const RgbImage& img);
RgbImage load_png(const std::filesystem::path& path);

}  // namespace latentcsi
