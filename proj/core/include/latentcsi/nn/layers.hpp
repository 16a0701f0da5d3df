#pragma once

// Parameter declaration, seeded initialization, and the composite blocks
// shared by the CSI encoder, the toy VAE, the toy denoiser, and the feature
// extractor.

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "latentcsi/nn/tape.hpp"

namespace latentcsi::nn {

enum class Init { kFanIn, kZeros, kOnes, kConstant };

struct ParamDecl {
  std::string name;
  Shape shape;
  Init init = Init::kFanIn;
  int fan_in = 1;
  float constant = 0.0f;
};

/// Declaration list. Order is the serialization order.
class ParamLayout {
 public:
  void add(std::string name, Shape shape, Init init, int fan_in = 1, float constant = 0.0f);
  void linear(const std::string& prefix, int in, int out, bool bias = true);
  void conv(const std::string& prefix, int cin, int cout, int k);
  void conv_transpose(const std::string& prefix, int cin, int cout, int k, int stride);
  void group_norm(const std::string& prefix, int channels);
  /// Two (norm, SiLU, conv) stages with an identity skip.
  void resblock(const std::string& prefix, int channels, int k);

  const std::vector<ParamDecl>& decls() const { return decls_; }
  std::size_t scalar_count() const;

  /// Uniform(-sqrt(3/fan_in), +sqrt(3/fan_in)) for weights, zeros for
  /// biases and norm shifts, ones for norm scales; one mt19937_64 stream
  /// consumed in declaration order.
  ParamSet<float> materialize(std::uint64_t seed) const;

 private:
  std::vector<ParamDecl> decls_;
};

/// Group count for a normalization over `channels`: gcd(8, channels).
int norm_groups(int channels);

/// Resolves parameter names to tape leaves. Built over a mutable ParamSet
/// the leaves are trainable; over a const one they are frozen.
template <class T>
class Binder {
 public:
  Binder(Tape<T>& tape, ParamSet<T>& params) : tape_(tape), mut_(&params), const_(&params) {}
  Binder(Tape<T>& tape, const ParamSet<T>& params) : tape_(tape), const_(&params) {}

  Var operator()(std::string_view name) {
    if (mut_) return tape_.param(mut_->at(name));
    return tape_.param(const_->at(name));
  }
  bool has(std::string_view name) const { return const_->contains(name); }
  const Shape& shape(std::string_view name) const { return const_->at(name).shape; }
  Tape<T>& tape() { return tape_; }

 private:
  Tape<T>& tape_;
  ParamSet<T>* mut_ = nullptr;
  const ParamSet<T>* const_;
};

template <class T>
Var conv(Binder<T>& b, const std::string& prefix, Var x, int stride, int pad) {
  return b.tape().conv2d(x, b(prefix + ".weight"), b(prefix + ".bias"), stride, pad);
}

template <class T>
Var conv_transpose(Binder<T>& b, const std::string& prefix, Var x, int stride, int pad) {
  return b.tape().conv_transpose2d(x, b(prefix + ".weight"), b(prefix + ".bias"), stride, pad);
}

template <class T>
Var linear(Binder<T>& b, const std::string& prefix, Var x) {
  return b.tape().linear(x, b(prefix + ".weight"), b(prefix + ".bias"));
}

template <class T>
Var group_norm(Binder<T>& b, const std::string& prefix, Var x) {
  const int c = b.tape().shape(x)[1];
  return b.tape().group_norm(x, b(prefix + ".weight"), b(prefix + ".bias"), norm_groups(c));
}

template <class T>
Var resblock(Binder<T>& b, const std::string& prefix, Var x) {
  auto& t = b.tape();
  const int k = b.shape(prefix + ".conv1.weight")[2];
  Var h = t.silu(group_norm(b, prefix + ".norm1", x));
  h = conv(b, prefix + ".conv1", h, 1, k / 2);
  h = t.silu(group_norm(b, prefix + ".norm2", h));
  h = conv(b, prefix + ".conv2", h, 1, k / 2);
  return t.add(x, h);
}

/// Single-head cross-attention with residual: queries from the normalized
/// feature map x [N,C,H,W], keys and values given as token sets [N,m,e].
/// Contains `<prefix>.norm`, `<prefix>.to_q` (1x1, C->e) and
/// `<prefix>.to_out` (1x1, e->C). Tokens carry no positional encoding.
template <class T>
Var cross_attention(Binder<T>& b, const std::string& prefix, Var x, Var keys, Var values) {
  auto& t = b.tape();
  const Shape xs = t.shape(x);
  const int n = xs[0], h = xs[2], w = xs[3];
  const int e = t.shape(keys)[2];
  Var q = conv(b, prefix + ".to_q", group_norm(b, prefix + ".norm", x), 1, 0);
  q = t.reshape(q, {n, e, h * w});
  Var scores = t.scale(t.bmm(q, keys, true, true), T(1) / std::sqrt(static_cast<T>(e)));
  Var attn = t.softmax(scores);                   // [N, HW, m]
  Var o = t.bmm(values, attn, true, true);       // [N, e, HW]
  o = conv(b, prefix + ".to_out", t.reshape(o, {n, e, h, w}), 1, 0);
  return t.add(x, o);
}

}  // namespace latentcsi::nn
