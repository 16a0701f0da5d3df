#include "latentcsi/nn/tape.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "latentcsi/error.hpp"

namespace latentcsi::nn {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------- ParamSet

template <class T>
Param<T>& ParamSet<T>::add(std::string name, Shape shape) {
  if (index_.count(name)) {
    throw InvalidArgument("duplicate parameter name: " + name);
  }
  index_.emplace(name, params_.size());
  Param<T> p;
  p.name = std::move(name);
  p.value.assign(numel(shape), T(0));
  p.shape = std::move(shape);
  params_.push_back(std::move(p));
  return params_.back();
}

template <class T>
Param<T>& ParamSet<T>::at(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) {
    throw InvalidArgument("unknown parameter: " + std::string(name));
  }
  return params_[it->second];
}

template <class T>
const Param<T>& ParamSet<T>::at(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) {
    throw InvalidArgument("unknown parameter: " + std::string(name));
  }
  return params_[it->second];
}

template <class T>
bool ParamSet<T>::contains(std::string_view name) const {
  return index_.count(std::string(name)) != 0;
}

template <class T>
std::size_t ParamSet<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <class T>
void ParamSet<T>::zero_grad() {
  for (auto& p : params_) {
    if (!p.grad.empty()) std::fill(p.grad.begin(), p.grad.end(), T(0));
  }
}

// ---------------------------------------------------------------- helpers

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapM = Eigen::Map<RowMat<T>>;
template <class T>
using CMapM = Eigen::Map<const RowMat<T>>;

// c (row-major) = or += op(a) * op(b). Operands are copied into owned,
// packet-aligned matrices: Eigen picks its vectorization split from the
// runtime alignment of mapped buffers, which would make results vary with
// heap addresses.
template <class T>
void gemm(const T* a, int ar, int ac, bool ta, const T* b, int br, int bc, bool tb, T* c,
          bool accumulate) {
  const RowMat<T> A = CMapM<T>(a, ar, ac);
  const RowMat<T> B = CMapM<T>(b, br, bc);
  RowMat<T> C;
  if (ta && tb)
    C.noalias() = A.transpose() * B.transpose();
  else if (ta)
    C.noalias() = A.transpose() * B;
  else if (tb)
    C.noalias() = A * B.transpose();
  else
    C.noalias() = A * B;
  const T* src = C.data();
  const std::size_t n = static_cast<std::size_t>(C.size());
  if (accumulate) {
    for (std::size_t i = 0; i < n; ++i) c[i] += src[i];
  } else {
    std::copy(src, src + n, c);
  }
}

struct ConvGeom {
  int n, c, h, w;  // the "large" side that is unfolded
  int k, stride, pad;
  int oh, ow;      // the "small" side (one column per position)
  int rows() const { return c * k * k; }
  int cols() const { return n * oh * ow; }
};

// col[(ci,ky,kx), (n,oy,ox)] = src[n, ci, oy*s-p+ky, ox*s-p+kx] (0 outside)
template <class T>
void im2col(const T* src, const ConvGeom& g, T* col) {
  const int plane = g.oh * g.ow;
  const int cols = g.cols();
  for (int ci = 0; ci < g.c; ++ci) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        T* row = col + static_cast<std::size_t>((ci * g.k + ky) * g.k + kx) * cols;
        for (int n = 0; n < g.n; ++n) {
          const T* img = src + (static_cast<std::size_t>(n) * g.c + ci) * g.h * g.w;
          T* out = row + static_cast<std::size_t>(n) * plane;
          for (int oy = 0; oy < g.oh; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            T* orow = out + oy * g.ow;
            if (iy < 0 || iy >= g.h) {
              std::fill(orow, orow + g.ow, T(0));
              continue;
            }
            const T* irow = img + iy * g.w;
            for (int ox = 0; ox < g.ow; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              orow[ox] = (ix >= 0 && ix < g.w) ? irow[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: dst += fold(col).
template <class T>
void col2im(const T* col, const ConvGeom& g, T* dst) {
  const int plane = g.oh * g.ow;
  const int cols = g.cols();
  for (int ci = 0; ci < g.c; ++ci) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const T* row = col + static_cast<std::size_t>((ci * g.k + ky) * g.k + kx) * cols;
        for (int n = 0; n < g.n; ++n) {
          T* img = dst + (static_cast<std::size_t>(n) * g.c + ci) * g.h * g.w;
          const T* in = row + static_cast<std::size_t>(n) * plane;
          for (int oy = 0; oy < g.oh; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) continue;
            T* irow = img + iy * g.w;
            const T* orow = in + oy * g.ow;
            for (int ox = 0; ox < g.ow; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              if (ix >= 0 && ix < g.w) irow[ix] += orow[ox];
            }
          }
        }
      }
    }
  }
}

// [N, C, P] <-> [C, N*P]
template <class T>
void nchw_to_cnp(const T* src, int n, int c, int p, T* dst) {
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < c; ++j) {
      std::copy_n(src + (static_cast<std::size_t>(i) * c + j) * p, p,
                  dst + (static_cast<std::size_t>(j) * n + i) * p);
    }
  }
}

template <class T>
void cnp_to_nchw(const T* src, int n, int c, int p, T* dst) {
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < c; ++j) {
      std::copy_n(src + (static_cast<std::size_t>(j) * n + i) * p, p,
                  dst + (static_cast<std::size_t>(i) * c + j) * p);
    }
  }
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

}  // namespace

// ---------------------------------------------------------------- Tape core

template <class T>
const T* Tape<T>::data(int id) const {
  const Node& n = nodes_[id];
  return n.external ? n.external : n.value.data();
}

template <class T>
T* Tape<T>::grad_buffer(int id) {
  Node& n = nodes_[id];
  if (n.param) {
    if (n.param->grad.size() != n.param->value.size()) {
      n.param->grad.assign(n.param->value.size(), T(0));
    }
    return n.param->grad.data();
  }
  if (n.grad.empty()) n.grad.assign(numel(n.shape), T(0));
  return n.grad.data();
}

template <class T>
std::span<const T> Tape<T>::value(Var v) const {
  return {data(v.id), numel(nodes_[v.id].shape)};
}

template <class T>
std::span<const T> Tape<T>::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.param) return {n.param->grad.data(), n.param->grad.size()};
  return {n.grad.data(), n.grad.size()};
}

template <class T>
std::vector<T> Tape<T>::take_value(Var v) {
  Node& n = nodes_[v.id];
  if (n.external) return std::vector<T>(n.external, n.external + numel(n.shape));
  return n.value;
}

template <class T>
Var Tape<T>::push(Shape shape, std::vector<T> value, bool needs_grad) {
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  n.needs_grad = record_ && needs_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <class T>
bool Tape<T>::needs_any(std::initializer_list<Var> vs) const {
  for (Var v : vs) {
    if (needs(v)) return true;
  }
  return false;
}

template <class T>
Var Tape<T>::constant(Shape shape, std::vector<T> data) {
  require(numel(shape) == data.size(),
          "constant: data size does not match shape " + shape_str(shape));
  return push(std::move(shape), std::move(data), false);
}

template <class T>
Var Tape<T>::param(Param<T>& p) {
  Node n;
  n.shape = p.shape;
  n.external = p.value.data();
  n.param = record_ ? &p : nullptr;
  n.needs_grad = record_;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <class T>
Var Tape<T>::param(const Param<T>& p) {
  Node n;
  n.shape = p.shape;
  n.external = p.value.data();
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <class T>
void Tape<T>::backward(Var loss) {
  require(numel(shape(loss)) == 1, "backward: loss must be a scalar");
  if (!nodes_[loss.id].needs_grad) return;
  grad_buffer(loss.id)[0] += T(1);
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.backward) continue;
    if (n.grad.empty()) continue;  // nothing flowed into this node
    n.backward();
  }
}

// ---------------------------------------------------------------- ops

template <class T>
Var Tape<T>::linear(Var x, Var w, Var b) {
  const Shape xs = shape(x);
  const Shape& ws = shape(w);
  require(ws.size() == 2 && !xs.empty() && xs.back() == ws[1],
          "linear: input " + shape_str(xs) + " vs weight " + shape_str(ws));
  const int in = ws[1], out = ws[0];
  const int rows = static_cast<int>(numel(xs) / in);
  if (b.valid()) require(numel(shape(b)) == static_cast<std::size_t>(out), "linear: bias size");

  std::vector<T> y(static_cast<std::size_t>(rows) * out);
  {
    gemm(data(x.id), rows, in, false, data(w.id), out, in, true, y.data(), false);
    MapM<T> Y(y.data(), rows, out);
    if (b.valid()) {
      Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> B(data(b.id), out);
      Y.rowwise() += B;
    }
  }
  Shape ys = xs;
  ys.back() = out;
  Var r = push(std::move(ys), std::move(y), needs_any({x, w, b}));
  if (!nodes_[r.id].needs_grad) return r;
  nodes_[r.id].backward = [this, x, w, b, r, rows, in, out] {
    const T* dy = nodes_[r.id].grad.data();
    if (needs(w)) gemm(dy, rows, out, true, data(x.id), rows, in, false, grad_buffer(w.id), true);
    if (needs(b)) {
      T* db = grad_buffer(b.id);
      for (int i = 0; i < rows; ++i)
        for (int o = 0; o < out; ++o) db[o] += dy[static_cast<std::size_t>(i) * out + o];
    }
    if (needs(x)) gemm(dy, rows, out, false, data(w.id), out, in, false, grad_buffer(x.id), true);
  };
  return r;
}

template <class T>
Var Tape<T>::conv2d(Var x, Var w, Var b, int stride, int pad) {
  const Shape xs = shape(x);
  const Shape ws = shape(w);
  require(xs.size() == 4 && ws.size() == 4 && ws[1] == xs[1] && ws[2] == ws[3],
          "conv2d: input " + shape_str(xs) + " vs weight " + shape_str(ws));
  const int n = xs[0], ci = xs[1], h = xs[2], wd = xs[3];
  const int co = ws[0], k = ws[2];
  const int oh = (h + 2 * pad - k) / stride + 1;
  const int ow = (wd + 2 * pad - k) / stride + 1;
  require(oh > 0 && ow > 0, "conv2d: empty output");
  ConvGeom g{n, ci, h, wd, k, stride, pad, oh, ow};
  const int kdim = g.rows(), p = g.cols();

  std::vector<T> col(static_cast<std::size_t>(kdim) * p);
  im2col(data(x.id), g, col.data());
  std::vector<T> yc(static_cast<std::size_t>(co) * p);
  {
    gemm(data(w.id), co, kdim, false, col.data(), kdim, p, false, yc.data(), false);
    MapM<T> Y(yc.data(), co, p);
    if (b.valid()) {
      Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> B(data(b.id), co);
      Y.colwise() += B;
    }
  }
  std::vector<T> y(yc.size());
  cnp_to_nchw(yc.data(), n, co, oh * ow, y.data());
  const bool ng = needs_any({x, w, b});
  Var r = push({n, co, oh, ow}, std::move(y), ng);
  if (!ng) return r;
  if (!needs(w)) col.clear();
  nodes_[r.id].backward = [this, x, w, b, r, g, co, col = std::move(col)] {
    const int kdim = g.rows(), p = g.cols();
    std::vector<T> dy(static_cast<std::size_t>(co) * p);
    nchw_to_cnp(nodes_[r.id].grad.data(), g.n, co, g.oh * g.ow, dy.data());
    if (needs(w)) gemm(dy.data(), co, p, false, col.data(), kdim, p, true, grad_buffer(w.id), true);
    if (needs(b)) {
      T* db = grad_buffer(b.id);
      for (int o = 0; o < co; ++o) {
        const T* src = dy.data() + static_cast<std::size_t>(o) * p;
        T acc = 0;
        for (int j = 0; j < p; ++j) acc += src[j];
        db[o] += acc;
      }
    }
    if (needs(x)) {
      std::vector<T> dcol(static_cast<std::size_t>(kdim) * p);
      gemm(data(w.id), co, kdim, true, dy.data(), co, p, false, dcol.data(), false);
      col2im(dcol.data(), g, grad_buffer(x.id));
    }
  };
  return r;
}

template <class T>
Var Tape<T>::conv_transpose2d(Var x, Var w, Var b, int stride, int pad) {
  const Shape xs = shape(x);
  const Shape ws = shape(w);
  require(xs.size() == 4 && ws.size() == 4 && ws[0] == xs[1] && ws[2] == ws[3],
          "conv_transpose2d: input " + shape_str(xs) + " vs weight " + shape_str(ws));
  const int n = xs[0], ci = xs[1], h = xs[2], wd = xs[3];
  const int co = ws[1], k = ws[2];
  const int oh = (h - 1) * stride - 2 * pad + k;
  const int ow = (wd - 1) * stride - 2 * pad + k;
  require(oh > 0 && ow > 0, "conv_transpose2d: empty output");
  // Unfolding geometry of the large output onto the small input grid.
  ConvGeom g{n, co, oh, ow, k, stride, pad, h, wd};
  const int kdim = g.rows(), p = g.cols();

  std::vector<T> xc(static_cast<std::size_t>(ci) * p);
  nchw_to_cnp(data(x.id), n, ci, h * wd, xc.data());
  std::vector<T> col(static_cast<std::size_t>(kdim) * p);
  gemm(data(w.id), ci, kdim, true, xc.data(), ci, p, false, col.data(), false);
  std::vector<T> y(static_cast<std::size_t>(n) * co * oh * ow, T(0));
  col2im(col.data(), g, y.data());
  if (b.valid()) {
    const T* bb = data(b.id);
    for (int i = 0; i < n; ++i) {
      for (int c = 0; c < co; ++c) {
        T* plane = y.data() + (static_cast<std::size_t>(i) * co + c) * oh * ow;
        for (int j = 0; j < oh * ow; ++j) plane[j] += bb[c];
      }
    }
  }
  const bool ng = needs_any({x, w, b});
  Var r = push({n, co, oh, ow}, std::move(y), ng);
  if (!ng) return r;
  if (!needs(w)) xc.clear();
  nodes_[r.id].backward = [this, x, w, b, r, g, ci, xc = std::move(xc)] {
    const int kdim = g.rows(), p = g.cols();
    const T* dy = nodes_[r.id].grad.data();
    std::vector<T> dcol(static_cast<std::size_t>(kdim) * p);
    im2col(dy, g, dcol.data());
    if (needs(w)) gemm(xc.data(), ci, p, false, dcol.data(), kdim, p, true, grad_buffer(w.id), true);
    if (needs(b)) {
      T* db = grad_buffer(b.id);
      const int plane = g.h * g.w;
      for (int i = 0; i < g.n; ++i) {
        for (int c = 0; c < g.c; ++c) {
          const T* src = dy + (static_cast<std::size_t>(i) * g.c + c) * plane;
          T acc = 0;
          for (int j = 0; j < plane; ++j) acc += src[j];
          db[c] += acc;
        }
      }
    }
    if (needs(x)) {
      std::vector<T> dxc(static_cast<std::size_t>(ci) * p);
      gemm(data(w.id), ci, kdim, false, dcol.data(), kdim, p, false, dxc.data(), false);
      std::vector<T> dx(dxc.size());
      cnp_to_nchw(dxc.data(), g.n, ci, g.oh * g.ow, dx.data());
      T* gx = grad_buffer(x.id);
      for (std::size_t i = 0; i < dx.size(); ++i) gx[i] += dx[i];
    }
  };
  return r;
}

template <class T>
Var Tape<T>::group_norm(Var x, Var gamma, Var beta, int groups, T eps) {
  const Shape xs = shape(x);
  require(xs.size() >= 2, "group_norm: input needs [N,C,...]");
  const int n = xs[0], c = xs[1];
  require(groups >= 1 && c % groups == 0, "group_norm: channels not divisible by groups");
  require(numel(shape(gamma)) == static_cast<std::size_t>(c) &&
              numel(shape(beta)) == static_cast<std::size_t>(c),
          "group_norm: affine size");
  const int sp = static_cast<int>(numel(xs) / (static_cast<std::size_t>(n) * c));
  const int cg = c / groups;
  const std::size_t cnt = static_cast<std::size_t>(cg) * sp;

  const T* xv = data(x.id);
  const T* gv = data(gamma.id);
  const T* bv = data(beta.id);
  std::vector<T> xhat(numel(xs));
  std::vector<T> inv_std(static_cast<std::size_t>(n) * groups);
  std::vector<T> y(numel(xs));
  for (int i = 0; i < n; ++i) {
    for (int g = 0; g < groups; ++g) {
      const std::size_t off = (static_cast<std::size_t>(i) * c + g * cg) * sp;
      T mean = 0;
      for (std::size_t j = 0; j < cnt; ++j) mean += xv[off + j];
      mean /= static_cast<T>(cnt);
      T var = 0;
      for (std::size_t j = 0; j < cnt; ++j) {
        const T d = xv[off + j] - mean;
        var += d * d;
      }
      var /= static_cast<T>(cnt);
      const T is = T(1) / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(i) * groups + g] = is;
      for (int cc = 0; cc < cg; ++cc) {
        const int ch = g * cg + cc;
        for (int j = 0; j < sp; ++j) {
          const std::size_t idx = off + static_cast<std::size_t>(cc) * sp + j;
          const T xh = (xv[idx] - mean) * is;
          xhat[idx] = xh;
          y[idx] = xh * gv[ch] + bv[ch];
        }
      }
    }
  }
  const bool ng = needs_any({x, gamma, beta});
  Var r = push(xs, std::move(y), ng);
  if (!ng) return r;
  nodes_[r.id].backward = [this, x, gamma, beta, r, n, c, sp, cg, groups, cnt,
                           xhat = std::move(xhat), inv_std = std::move(inv_std)] {
    const T* dy = nodes_[r.id].grad.data();
    const T* gv = data(gamma.id);
    if (needs(gamma) || needs(beta)) {
      T* dg = needs(gamma) ? grad_buffer(gamma.id) : nullptr;
      T* db = needs(beta) ? grad_buffer(beta.id) : nullptr;
      for (int i = 0; i < n; ++i) {
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t off = (static_cast<std::size_t>(i) * c + ch) * sp;
          T sg = 0, sb = 0;
          for (int j = 0; j < sp; ++j) {
            sg += dy[off + j] * xhat[off + j];
            sb += dy[off + j];
          }
          if (dg) dg[ch] += sg;
          if (db) db[ch] += sb;
        }
      }
    }
    if (!needs(x)) return;
    T* dx = grad_buffer(x.id);
    for (int i = 0; i < n; ++i) {
      for (int g = 0; g < groups; ++g) {
        const std::size_t off = (static_cast<std::size_t>(i) * c + g * cg) * sp;
        T m1 = 0, m2 = 0;
        for (int cc = 0; cc < cg; ++cc) {
          const T gm = gv[g * cg + cc];
          for (int j = 0; j < sp; ++j) {
            const std::size_t idx = off + static_cast<std::size_t>(cc) * sp + j;
            const T d = dy[idx] * gm;
            m1 += d;
            m2 += d * xhat[idx];
          }
        }
        m1 /= static_cast<T>(cnt);
        m2 /= static_cast<T>(cnt);
        const T is = inv_std[static_cast<std::size_t>(i) * groups + g];
        for (int cc = 0; cc < cg; ++cc) {
          const T gm = gv[g * cg + cc];
          for (int j = 0; j < sp; ++j) {
            const std::size_t idx = off + static_cast<std::size_t>(cc) * sp + j;
            dx[idx] += is * (dy[idx] * gm - m1 - xhat[idx] * m2);
          }
        }
      }
    }
  };
  return r;
}

namespace {
template <class T>
T sigmoid_of(T v) {
  return T(1) / (T(1) + std::exp(-v));
}
}  // namespace

template <class T>
Var Tape<T>::silu(Var x) {
  const std::size_t sz = numel(shape(x));
  const T* xv = data(x.id);
  std::vector<T> y(sz);
  for (std::size_t i = 0; i < sz; ++i) y[i] = xv[i] * sigmoid_of(xv[i]);
  Var r = push(shape(x), std::move(y), needs(x));
  if (!needs(x)) return r;
  nodes_[r.id].backward = [this, x, r, sz] {
    const T* dy = nodes_[r.id].grad.data();
    const T* xv = data(x.id);
    T* dx = grad_buffer(x.id);
    for (std::size_t i = 0; i < sz; ++i) {
      const T s = sigmoid_of(xv[i]);
      dx[i] += dy[i] * (s * (T(1) + xv[i] * (T(1) - s)));
    }
  };
  return r;
}

template <class T>
Var Tape<T>::sigmoid(Var x) {
  const std::size_t sz = numel(shape(x));
  const T* xv = data(x.id);
  std::vector<T> y(sz);
  for (std::size_t i = 0; i < sz; ++i) y[i] = sigmoid_of(xv[i]);
  Var r = push(shape(x), std::move(y), needs(x));
  if (!needs(x)) return r;
  nodes_[r.id].backward = [this, x, r, sz] {
    const T* dy = nodes_[r.id].grad.data();
    const T* yv = nodes_[r.id].value.data();
    T* dx = grad_buffer(x.id);
    for (std::size_t i = 0; i < sz; ++i) dx[i] += dy[i] * yv[i] * (T(1) - yv[i]);
  };
  return r;
}

template <class T>
Var Tape<T>::relu(Var x) {
  const std::size_t sz = numel(shape(x));
  const T* xv = data(x.id);
  std::vector<T> y(sz);
  for (std::size_t i = 0; i < sz; ++i) y[i] = xv[i] > T(0) ? xv[i] : T(0);
  Var r = push(shape(x), std::move(y), needs(x));
  if (!needs(x)) return r;
  nodes_[r.id].backward = [this, x, r, sz] {
    const T* dy = nodes_[r.id].grad.data();
    const T* xv = data(x.id);
    T* dx = grad_buffer(x.id);
    for (std::size_t i = 0; i < sz; ++i) {
      if (xv[i] > T(0)) dx[i] += dy[i];
    }
  };
  return r;
}

template <class T>
Var Tape<T>::clamp01(Var x) {
  const std::size_t sz = numel(shape(x));
  const T* xv = data(x.id);
  std::vector<T> y(sz);
  for (std::size_t i = 0; i < sz; ++i) y[i] = std::clamp(xv[i], T(0), T(1));
  Var r = push(shape(x), std::move(y), needs(x));
  if (!needs(x)) return r;
  nodes_[r.id].backward = [this, x, r, sz] {
    const T* dy = nodes_[r.id].grad.data();
    const T* xv = data(x.id);
    T* dx = grad_buffer(x.id);
    for (std::size_t i = 0; i < sz; ++i) {
      if (xv[i] > T(0) && xv[i] < T(1)) dx[i] += dy[i];
    }
  };
  return r;
}

template <class T>
Var Tape<T>::add(Var a, Var b) {
  require(shape(a) == shape(b),
          "add: " + shape_str(shape(a)) + " vs " + shape_str(shape(b)));
  const std::size_t sz = numel(shape(a));
  const T* av = data(a.id);
  const T* bv = data(b.id);
  std::vector<T> y(sz);
  for (std::size_t i = 0; i < sz; ++i) y[i] = av[i] + bv[i];
  Var r = push(shape(a), std::move(y), needs_any({a, b}));
  if (!nodes_[r.id].needs_grad) return r;
  nodes_[r.id].backward = [this, a, b, r, sz] {
    const T* dy = nodes_[r.id].grad.data();
    for (Var v : {a, b}) {
      if (!needs(v)) continue;
      T* d = grad_buffer(v.id);
      for (std::size_t i = 0; i < sz; ++i) d[i] += dy[i];
    }
  };
  return r;
}

template <class T>
Var Tape<T>::scale(Var a, T s) {
  const std::size_t sz = numel(shape(a));
  const T* av = data(a.id);
  std::vector<T> y(sz);
  for (std::size_t i = 0; i < sz; ++i) y[i] = av[i] * s;
  Var r = push(shape(a), std::move(y), needs(a));
  if (!needs(a)) return r;
  nodes_[r.id].backward = [this, a, r, sz, s] {
    const T* dy = nodes_[r.id].grad.data();
    T* d = grad_buffer(a.id);
    for (std::size_t i = 0; i < sz; ++i) d[i] += dy[i] * s;
  };
  return r;
}

template <class T>
Var Tape<T>::add_channel_bias(Var x, Var bias) {
  const Shape xs = shape(x);
  require(xs.size() == 4, "add_channel_bias: x must be NCHW");
  const int n = xs[0], c = xs[1], sp = xs[2] * xs[3];
  require(numel(shape(bias)) == static_cast<std::size_t>(n) * c,
          "add_channel_bias: bias must be [N,C]");
  std::vector<T> y(data(x.id), data(x.id) + numel(xs));
  const T* bv = data(bias.id);
  for (int i = 0; i < n * c; ++i) {
    for (int j = 0; j < sp; ++j) y[static_cast<std::size_t>(i) * sp + j] += bv[i];
  }
  Var r = push(xs, std::move(y), needs_any({x, bias}));
  if (!nodes_[r.id].needs_grad) return r;
  nodes_[r.id].backward = [this, x, bias, r, n, c, sp] {
    const T* dy = nodes_[r.id].grad.data();
    if (needs(x)) {
      T* dx = grad_buffer(x.id);
      for (std::size_t i = 0; i < static_cast<std::size_t>(n) * c * sp; ++i) dx[i] += dy[i];
    }
    if (needs(bias)) {
      T* db = grad_buffer(bias.id);
      for (int i = 0; i < n * c; ++i) {
        T acc = 0;
        for (int j = 0; j < sp; ++j) acc += dy[static_cast<std::size_t>(i) * sp + j];
        db[i] += acc;
      }
    }
  };
  return r;
}

template <class T>
Var Tape<T>::reshape(Var x, Shape s) {
  require(numel(s) == numel(shape(x)),
          "reshape: " + shape_str(shape(x)) + " -> " + shape_str(s));
  const std::size_t sz = numel(s);
  std::vector<T> y(data(x.id), data(x.id) + sz);
  Var r = push(std::move(s), std::move(y), needs(x));
  if (!needs(x)) return r;
  nodes_[r.id].backward = [this, x, r, sz] {
    const T* dy = nodes_[r.id].grad.data();
    T* dx = grad_buffer(x.id);
    for (std::size_t i = 0; i < sz; ++i) dx[i] += dy[i];
  };
  return r;
}

template <class T>
Var Tape<T>::channel_slice(Var x, int begin, int end) {
  const Shape xs = shape(x);
  require(xs.size() >= 2 && 0 <= begin && begin < end && end <= xs[1],
          "channel_slice: bad range for " + shape_str(xs));
  const int n = xs[0], c = xs[1];
  const std::size_t sp = numel(xs) / (static_cast<std::size_t>(n) * c);
  const int oc = end - begin;
  Shape ys = xs;
  ys[1] = oc;
  std::vector<T> y(numel(ys));
  const T* xv = data(x.id);
  for (int i = 0; i < n; ++i) {
    std::copy_n(xv + (static_cast<std::size_t>(i) * c + begin) * sp, oc * sp,
                y.data() + static_cast<std::size_t>(i) * oc * sp);
  }
  Var r = push(std::move(ys), std::move(y), needs(x));
  if (!needs(x)) return r;
  nodes_[r.id].backward = [this, x, r, n, c, sp, begin, oc] {
    const T* dy = nodes_[r.id].grad.data();
    T* dx = grad_buffer(x.id);
    for (int i = 0; i < n; ++i) {
      const T* src = dy + static_cast<std::size_t>(i) * oc * sp;
      T* dst = dx + (static_cast<std::size_t>(i) * c + begin) * sp;
      for (std::size_t j = 0; j < oc * sp; ++j) dst[j] += src[j];
    }
  };
  return r;
}

template <class T>
Var Tape<T>::bmm(Var a, Var b, bool trans_a, bool trans_b) {
  const Shape as = shape(a);
  const Shape bs = shape(b);
  require(as.size() == 3 && bs.size() == 3 && as[0] == bs[0],
          "bmm: " + shape_str(as) + " x " + shape_str(bs));
  const int batch = as[0];
  const int ar = as[1], ac = as[2], br = bs[1], bc = bs[2];
  const int m = trans_a ? ac : ar;
  const int k = trans_a ? ar : ac;
  const int kb = trans_b ? bc : br;
  const int nn = trans_b ? br : bc;
  require(k == kb, "bmm: inner dims " + shape_str(as) + " x " + shape_str(bs));
  std::vector<T> y(static_cast<std::size_t>(batch) * m * nn);
  for (int i = 0; i < batch; ++i) {
    gemm(data(a.id) + static_cast<std::size_t>(i) * ar * ac, ar, ac, trans_a,
         data(b.id) + static_cast<std::size_t>(i) * br * bc, br, bc, trans_b,
         y.data() + static_cast<std::size_t>(i) * m * nn, false);
  }
  Var r = push({batch, m, nn}, std::move(y), needs_any({a, b}));
  if (!nodes_[r.id].needs_grad) return r;
  nodes_[r.id].backward = [this, a, b, r, batch, ar, ac, br, bc, m, nn, trans_a, trans_b] {
    for (int i = 0; i < batch; ++i) {
      const T* dY = nodes_[r.id].grad.data() + static_cast<std::size_t>(i) * m * nn;
      const T* A = data(a.id) + static_cast<std::size_t>(i) * ar * ac;
      const T* B = data(b.id) + static_cast<std::size_t>(i) * br * bc;
      if (needs(a)) {
        T* dA = grad_buffer(a.id) + static_cast<std::size_t>(i) * ar * ac;
        // dA = dY opB^T, or its transpose when A enters transposed.
        if (!trans_a) gemm(dY, m, nn, false, B, br, bc, !trans_b, dA, true);
        else gemm(B, br, bc, trans_b, dY, m, nn, true, dA, true);
      }
      if (needs(b)) {
        T* dB = grad_buffer(b.id) + static_cast<std::size_t>(i) * br * bc;
        // dB = opA^T dY, or its transpose when B enters transposed.
        if (!trans_b) gemm(A, ar, ac, !trans_a, dY, m, nn, false, dB, true);
        else gemm(dY, m, nn, true, A, ar, ac, trans_a, dB, true);
      }
    }
  };
  return r;
}

template <class T>
Var Tape<T>::softmax(Var x) {
  const Shape xs = shape(x);
  const int last = xs.back();
  const std::size_t rows = numel(xs) / last;
  const T* xv = data(x.id);
  std::vector<T> y(numel(xs));
  for (std::size_t i = 0; i < rows; ++i) {
    const T* src = xv + i * last;
    T* dst = y.data() + i * last;
    const T mx = *std::max_element(src, src + last);
    T sum = 0;
    for (int j = 0; j < last; ++j) {
      dst[j] = std::exp(src[j] - mx);
      sum += dst[j];
    }
    for (int j = 0; j < last; ++j) dst[j] /= sum;
  }
  Var r = push(xs, std::move(y), needs(x));
  if (!needs(x)) return r;
  nodes_[r.id].backward = [this, x, r, rows, last] {
    const T* dy = nodes_[r.id].grad.data();
    const T* yv = nodes_[r.id].value.data();
    T* dx = grad_buffer(x.id);
    for (std::size_t i = 0; i < rows; ++i) {
      T dot = 0;
      for (int j = 0; j < last; ++j) dot += dy[i * last + j] * yv[i * last + j];
      for (int j = 0; j < last; ++j) {
        dx[i * last + j] += yv[i * last + j] * (dy[i * last + j] - dot);
      }
    }
  };
  return r;
}

template <class T>
Var Tape<T>::reparameterize(Var mu, Var logvar, std::span<const T> eps) {
  require(shape(mu) == shape(logvar) && eps.size() == numel(shape(mu)),
          "reparameterize: shape mismatch");
  const std::size_t sz = eps.size();
  const T* m = data(mu.id);
  const T* lv = data(logvar.id);
  std::vector<T> y(sz);
  for (std::size_t i = 0; i < sz; ++i) y[i] = m[i] + std::exp(lv[i] / T(2)) * eps[i];
  std::vector<T> e(eps.begin(), eps.end());
  Var r = push(shape(mu), std::move(y), needs_any({mu, logvar}));
  if (!nodes_[r.id].needs_grad) return r;
  nodes_[r.id].backward = [this, mu, logvar, r, sz, e = std::move(e)] {
    const T* dy = nodes_[r.id].grad.data();
    if (needs(mu)) {
      T* d = grad_buffer(mu.id);
      for (std::size_t i = 0; i < sz; ++i) d[i] += dy[i];
    }
    if (needs(logvar)) {
      const T* lv = data(logvar.id);
      T* d = grad_buffer(logvar.id);
      for (std::size_t i = 0; i < sz; ++i) d[i] += dy[i] * e[i] * std::exp(lv[i] / T(2)) / T(2);
    }
  };
  return r;
}

template <class T>
Var Tape<T>::sq_error_sum(Var pred, std::span<const T> target) {
  const std::size_t sz = numel(shape(pred));
  require(target.size() == sz, "sq_error_sum: target size " + std::to_string(target.size()) +
                                   " vs prediction " + shape_str(shape(pred)));
  const T* p = data(pred.id);
  T acc = 0;
  for (std::size_t i = 0; i < sz; ++i) {
    const T d = p[i] - target[i];
    acc += d * d;
  }
  std::vector<T> t(target.begin(), target.end());
  Var r = push({1}, {acc}, needs(pred));
  if (!needs(pred)) return r;
  nodes_[r.id].backward = [this, pred, r, sz, t = std::move(t)] {
    const T g = nodes_[r.id].grad[0];
    const T* p = data(pred.id);
    T* d = grad_buffer(pred.id);
    for (std::size_t i = 0; i < sz; ++i) d[i] += g * T(2) * (p[i] - t[i]);
  };
  return r;
}

template <class T>
Var Tape<T>::mean_sq_error(Var pred, std::span<const T> target) {
  const std::size_t sz = numel(shape(pred));
  return scale(sq_error_sum(pred, target), T(1) / static_cast<T>(sz));
}

template <class T>
Var Tape<T>::gaussian_kl_mean(Var mu, Var logvar) {
  require(shape(mu) == shape(logvar), "gaussian_kl_mean: shape mismatch");
  const std::size_t sz = numel(shape(mu));
  const T* m = data(mu.id);
  const T* lv = data(logvar.id);
  T acc = 0;
  for (std::size_t i = 0; i < sz; ++i) acc += (m[i] * m[i] + std::exp(lv[i]) - T(1) - lv[i]) / T(2);
  acc /= static_cast<T>(sz);
  Var r = push({1}, {acc}, needs_any({mu, logvar}));
  if (!nodes_[r.id].needs_grad) return r;
  nodes_[r.id].backward = [this, mu, logvar, r, sz] {
    const T g = nodes_[r.id].grad[0] / static_cast<T>(sz);
    const T* m = data(mu.id);
    const T* lv = data(logvar.id);
    if (needs(mu)) {
      T* d = grad_buffer(mu.id);
      for (std::size_t i = 0; i < sz; ++i) d[i] += g * m[i];
    }
    if (needs(logvar)) {
      T* d = grad_buffer(logvar.id);
      for (std::size_t i = 0; i < sz; ++i) d[i] += g * (std::exp(lv[i]) - T(1)) / T(2);
    }
  };
  return r;
}

template class ParamSet<float>;
template class ParamSet<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace latentcsi::nn
