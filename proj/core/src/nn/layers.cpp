#include "latentcsi/nn/layers.hpp"

#include <cmath>
#include <numeric>
#include <random>

namespace latentcsi::nn {

void ParamLayout::add(std::string name, Shape shape, Init init, int fan_in, float constant) {
  decls_.push_back(ParamDecl{std::move(name), std::move(shape), init, fan_in, constant});
}

void ParamLayout::linear(const std::string& prefix, int in, int out, bool bias) {
  add(prefix + ".weight", {out, in}, Init::kFanIn, in);
  if (bias) add(prefix + ".bias", {out}, Init::kZeros);
}

void ParamLayout::conv(const std::string& prefix, int cin, int cout, int k) {
  add(prefix + ".weight", {cout, cin, k, k}, Init::kFanIn, cin * k * k);
  add(prefix + ".bias", {cout}, Init::kZeros);
}

void ParamLayout::conv_transpose(const std::string& prefix, int cin, int cout, int k, int stride) {
  // Each output pixel sees cin * (k/stride)^2 inputs.
  const int taps = std::max(1, (k / stride) * (k / stride));
  add(prefix + ".weight", {cin, cout, k, k}, Init::kFanIn, cin * taps);
  add(prefix + ".bias", {cout}, Init::kZeros);
}

void ParamLayout::group_norm(const std::string& prefix, int channels) {
  add(prefix + ".weight", {channels}, Init::kOnes);
  add(prefix + ".bias", {channels}, Init::kZeros);
}

void ParamLayout::resblock(const std::string& prefix, int channels, int k) {
  group_norm(prefix + ".norm1", channels);
  conv(prefix + ".conv1", channels, channels, k);
  group_norm(prefix + ".norm2", channels);
  conv(prefix + ".conv2", channels, channels, k);
}

std::size_t ParamLayout::scalar_count() const {
  std::size_t n = 0;
  for (const auto& d : decls_) n += numel(d.shape);
  return n;
}

ParamSet<float> ParamLayout::materialize(std::uint64_t seed) const {
  ParamSet<float> out;
  std::mt19937_64 rng(seed);
  for (const auto& d : decls_) {
    auto& p = out.add(d.name, d.shape);
    switch (d.init) {
      case Init::kFanIn: {
        const float bound = std::sqrt(3.0f / static_cast<float>(std::max(1, d.fan_in)));
        std::uniform_real_distribution<float> dist(-bound, bound);
        for (auto& v : p.value) v = dist(rng);
        break;
      }
      case Init::kZeros:
        break;
      case Init::kOnes:
        std::fill(p.value.begin(), p.value.end(), 1.0f);
        break;
      case Init::kConstant:
        std::fill(p.value.begin(), p.value.end(), d.constant);
        break;
    }
  }
  return out;
}

int norm_groups(int channels) { return std::gcd(8, channels); }

}  // namespace latentcsi::nn
