#pragma once

// Reverse-mode differentiation over a linear tape of tensor ops.
//
// A Tape records every op applied in a forward pass together with the
// closure needed to push gradients back to its inputs. The forward pass is
// eager: values are computed as ops are appended. Tapes are cheap to create
// and are single-use; concurrent forward passes over shared parameters each
// build their own Tape.
//
// Layout is NCHW for image-like tensors and row-major everywhere.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace latentcsi::nn {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Named trainable tensor. `grad` is allocated lazily by the tape.
template <class T>
struct Param {
  std::string name;
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
};

/// Ordered collection of parameters with name lookup. Order is the
/// declaration order and is what the weight container serializes.
template <class T>
class ParamSet {
 public:
  Param<T>& add(std::string name, Shape shape);

  Param<T>& at(std::string_view name);
  const Param<T>& at(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::vector<Param<T>>& params() { return params_; }
  const std::vector<Param<T>>& params() const { return params_; }

  std::size_t scalar_count() const;
  void zero_grad();

  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& p : params_) {
      auto& q = out.add(p.name, p.shape);
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        q.value[i] = static_cast<U>(p.value[i]);
      }
    }
    return out;
  }

 private:
  std::vector<Param<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Handle to a tape node.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <class T>
class Tape {
 public:
  /// With `record == false` no backward closures are kept and no gradients
  /// are produced; used for inference.
  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Shape shape, std::vector<T> data);
  /// Trainable leaf; gradients accumulate into `p.grad` on backward().
  Var param(Param<T>& p);
  /// Frozen leaf; never receives gradients.
  Var param(const Param<T>& p);

  const Shape& shape(Var v) const { return nodes_[v.id].shape; }
  std::span<const T> value(Var v) const;
  /// Empty span when the node received no gradient.
  std::span<const T> grad(Var v) const;
  std::vector<T> take_value(Var v);

  /// Runs the recorded closures in reverse order seeded with d(loss)=1.
  /// `loss` must hold a single element.
  void backward(Var loss);

  // y = x W^T + b over the last dim of x. W: [out, in]; b optional.
  Var linear(Var x, Var w, Var b = {});
  // x: [N,Ci,H,W]; w: [Co,Ci,k,k]; b: [Co] optional.
  Var conv2d(Var x, Var w, Var b, int stride, int pad);
  // x: [N,Ci,H,W]; w: [Ci,Co,k,k]; output (H-1)*stride - 2*pad + k.
  Var conv_transpose2d(Var x, Var w, Var b, int stride, int pad);
  // x: [N,C,...]; gamma/beta: [C].
  Var group_norm(Var x, Var gamma, Var beta, int groups, T eps = T(1e-5));

  Var silu(Var x);
  Var sigmoid(Var x);
  Var relu(Var x);
  // Hard clamp to [0,1] (zero gradient outside).
  Var clamp01(Var x);

  Var add(Var a, Var b);
  Var scale(Var a, T s);
  // x: [N,C,H,W] plus per-sample channel bias [N,C].
  Var add_channel_bias(Var x, Var bias);
  Var reshape(Var x, Shape shape);
  // Channels [begin, end) of an NCHW tensor.
  Var channel_slice(Var x, int begin, int end);

  // Batched matmul of [B,M,K] x [B,K,N]; the flags transpose the last two
  // dims of the stored operand.
  Var bmm(Var a, Var b, bool trans_a, bool trans_b);
  // Softmax over the last dim.
  Var softmax(Var x);

  // mu + exp(logvar / 2) * eps.
  Var reparameterize(Var mu, Var logvar, std::span<const T> eps);

  // Scalar sum_i (pred_i - target_i)^2.
  Var sq_error_sum(Var pred, std::span<const T> target);
  // Scalar mean_i (pred_i - target_i)^2.
  Var mean_sq_error(Var pred, std::span<const T> target);
  // Scalar mean over elements of KL(N(mu, exp(logvar)) || N(0, 1)).
  Var gaussian_kl_mean(Var mu, Var logvar);

 private:
  struct Node {
    Shape shape;
    std::vector<T> value;
    const T* external = nullptr;
    Param<T>* param = nullptr;
    std::vector<T> grad;
    bool needs_grad = false;
    std::function<void()> backward;
  };

  const T* data(int id) const;
  T* grad_buffer(int id);
  Var push(Shape shape, std::vector<T> value, bool needs_grad);
  bool needs(Var v) const { return v.valid() && nodes_[v.id].needs_grad; }
  bool needs_any(std::initializer_list<Var> vs) const;

  bool record_;
  std::vector<Node> nodes_;
};

extern template class ParamSet<float>;
extern template class ParamSet<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace latentcsi::nn
