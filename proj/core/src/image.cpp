#include "latentcsi/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>

#include "latentcsi/error.hpp"
#include "latentcsi/fileutil.hpp"

namespace latentcsi {

void validate(const RgbImage& img) {
  if (img.width <= 0 || img.height <= 0 ||
      img.data.size() != static_cast<std::size_t>(img.width) * img.height * 3) {
    throw InvalidArgument("image: data length does not match " + std::to_string(img.width) + "x" +
                          std::to_string(img.height) + "x3");
  }
  for (float v : img.data) {
    if (!(v >= 0.0f && v <= 1.0f)) throw InvalidArgument("image: value outside [0,1]");
  }
}

std::vector<float> to_planar(const RgbImage& img) {
  const std::size_t plane = static_cast<std::size_t>(img.width) * img.height;
  std::vector<float> out(plane * 3);
  for (std::size_t i = 0; i < plane; ++i) {
    for (int c = 0; c < 3; ++c) out[c * plane + i] = img.data[i * 3 + c];
  }
  return out;
}

RgbImage from_planar(const float* chw, int width, int height) {
  RgbImage img(width, height);
  const std::size_t plane = static_cast<std::size_t>(width) * height;
  for (std::size_t i = 0; i < plane; ++i) {
    for (int c = 0; c < 3; ++c) img.data[i * 3 + c] = std::clamp(chw[c * plane + i], 0.0f, 1.0f);
  }
  return img;
}

RgbImage crop(const RgbImage& img, int x, int y, int w, int h) {
  if (x < 0 || y < 0 || w <= 0 || h <= 0 || x + w > img.width || y + h > img.height) {
    throw InvalidArgument("crop: box outside image");
  }
  RgbImage out(w, h);
  for (int r = 0; r < h; ++r) {
    std::copy_n(&img.data[(static_cast<std::size_t>(y + r) * img.width + x) * 3],
                static_cast<std::size_t>(w) * 3, &out.data[static_cast<std::size_t>(r) * w * 3]);
  }
  return out;
}

RgbImage resize_bilinear(const RgbImage& img, int width, int height) {
  if (width == img.width && height == img.height) return img;
  RgbImage out(width, height);
  const double sx = static_cast<double>(img.width) / width;
  const double sy = static_cast<double>(img.height) / height;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = img.at(x0, y0, c) * (1 - wx) + img.at(x1, y0, c) * wx;
        const double bot = img.at(x0, y1, c) * (1 - wx) + img.at(x1, y1, c) * wx;
        out.at(x, y, c) = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

RgbImage gaussian_blur(const RgbImage& img, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += k[i + radius];
  }
  for (auto& v : k) v /= sum;
  RgbImage tmp(img.width, img.height), out(img.width, img.height);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) {
          acc += k[i + radius] * img.at(std::clamp(x + i, 0, img.width - 1), y, c);
        }
        tmp.at(x, y, c) = static_cast<float>(acc);
      }
    }
  }
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) {
          acc += k[i + radius] * tmp.at(x, std::clamp(y + i, 0, img.height - 1), c);
        }
        out.at(x, y, c) = std::clamp(static_cast<float>(acc), 0.0f, 1.0f);
      }
    }
  }
  return out;
}

std::string encode_png(const RgbImage& img) {
  validate(img);
  std::vector<png_byte> px(img.data.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    px[i] = static_cast<png_byte>(std::lround(img.data[i] * 255.0f));
  }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, px.data(), 0, nullptr)) {
    throw IoError(std::string("png encode: ") + image.message);
  }
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, px.data(), 0, nullptr)) {
    throw IoError(std::string("png encode: ") + image.message);
  }
  out.resize(size);
  return out;
}

RgbImage decode_png(const std::string& bytes) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw ParseError(std::string("png decode: ") + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<png_byte> px(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, px.data(), 0, nullptr)) {
    png_image_free(&image);
    throw ParseError(std::string("png decode: ") + image.message);
  }
  RgbImage img(static_cast<int>(image.width), static_cast<int>(image.height));
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = px[i] / 255.0f;
  return img;
}

void save_png(const std::filesystem::path& path, const RgbImage& img) {
  write_file(path, encode_png(img));
}

RgbImage load_png(const std::filesystem::path& path) { return decode_png(read_file(path)); }

}  // namespace latentcsi
