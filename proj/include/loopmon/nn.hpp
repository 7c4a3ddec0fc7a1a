// Model-building utilities shared by the two anomaly monitors: a named
// parameter registry, deterministic initializers, Adam, batch norm,
// convolutional LSTM cells, and spectral weight normalization.
#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "loopmon/graph.hpp"
#include "loopmon/rng.hpp"
#include "loopmon/tensor.hpp"

namespace loopmon {

// Named tensors with a stable iteration order. Holds both trainable weights
// and persistent buffers (running statistics, power-iteration vectors); the
// optimizer only touches entries whose tape leaves produced gradients.
template <typename T>
struct ParamSet {
  std::vector<std::string> order;
  std::unordered_map<std::string, Tensor<T>> values;

  Tensor<T>& add(const std::string& name, Tensor<T> init) {
    if (values.count(name))
      throw std::invalid_argument("ParamSet: duplicate name " + name);
    order.push_back(name);
    return values.emplace(name, std::move(init)).first->second;
  }

  bool has(const std::string& name) const { return values.count(name) != 0; }

  Tensor<T>& at(const std::string& name) {
    auto it = values.find(name);
    if (it == values.end())
      throw std::invalid_argument("ParamSet: unknown name " + name);
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = values.find(name);
    if (it == values.end())
      throw std::invalid_argument("ParamSet: unknown name " + name);
    return it->second;
  }

  std::int64_t total_numel() const {
    std::int64_t n = 0;
    for (const auto& name : order) n += values.at(name).numel();
    return n;
  }
};

// Binds parameters to tape leaves for one forward/backward pass and records
// which leaf belongs to which name so gradients can be routed back.
template <typename T>
class ParamLeaves {
 public:
  ParamLeaves(Tape<T>& tape, ParamSet<T>& params, bool trainable)
      : tape_(tape), params_(params), trainable_(trainable) {}

  typename Tape<T>::Id use(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    auto id = tape_.leaf(params_.at(name), trainable_);
    bound_.emplace(name, id);
    names_.push_back(name);
    return id;
  }

  // (name, gradient) pairs for every bound parameter, in binding order.
  std::vector<std::pair<std::string, Tensor<T>>> gradients() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.reserve(names_.size());
    for (const auto& name : names_)
      out.emplace_back(name, tape_.grad_or_zero(bound_.at(name)));
    return out;
  }

 private:
  Tape<T>& tape_;
  ParamSet<T>& params_;
  bool trainable_;
  std::unordered_map<std::string, typename Tape<T>::Id> bound_;
  std::vector<std::string> names_;
};

// ---- initializers ---------------------------------------------------------

template <typename T>
Tensor<T> uniform_init(Rng& rng, const std::vector<int>& shape, T limit) {
  Tensor<T> t(shape);
  for (auto& v : t.data) v = T(rng.uniform(-double(limit), double(limit)));
  return t;
}

template <typename T>
Tensor<T> normal_init(Rng& rng, const std::vector<int>& shape, T stddev) {
  Tensor<T> t(shape);
  for (auto& v : t.data) v = T(rng.normal() * double(stddev));
  return t;
}

// He-style uniform init for conv weights [Cout, Cin, k, k].
template <typename T>
Tensor<T> conv_init(Rng& rng, int cout, int cin, int k) {
  const T limit = T(std::sqrt(6.0 / (double(cin) * k * k)));
  return uniform_init<T>(rng, {cout, cin, k, k}, limit);
}

// Xavier-style uniform init for linear weights [out, in].
template <typename T>
Tensor<T> linear_init(Rng& rng, int out, int in) {
  const T limit = T(std::sqrt(6.0 / double(in + out)));
  return uniform_init<T>(rng, {out, in}, limit);
}

// ---- optimizer --------------------------------------------------------------

template <typename T>
class Adam {
 public:
  explicit Adam(T lr, T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8))
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamSet<T>& params,
            const std::vector<std::pair<std::string, Tensor<T>>>& grads) {
    ++t_;
    const T bc1 = T(1) - std::pow(beta1_, T(t_));
    const T bc2 = T(1) - std::pow(beta2_, T(t_));
    for (const auto& [name, g] : grads) {
      Tensor<T>& p = params.at(name);
      if (!p.same_shape(g))
        throw std::invalid_argument("Adam: gradient shape mismatch for " +
                                    name);
      auto& [m, v] = state(name, p.shape);
      for (std::int64_t i = 0; i < p.numel(); ++i) {
        m[i] = beta1_ * m[i] + (T(1) - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (T(1) - beta2_) * g[i] * g[i];
        const T mhat = m[i] / bc1;
        const T vhat = v[i] / bc2;
        p[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

 private:
  std::pair<Tensor<T>, Tensor<T>>& state(const std::string& name,
                                         const std::vector<int>& shape) {
    auto it = state_.find(name);
    if (it == state_.end())
      it = state_
               .emplace(name, std::make_pair(Tensor<T>(shape),
                                             Tensor<T>(shape)))
               .first;
    return it->second;
  }

  T lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::unordered_map<std::string, std::pair<Tensor<T>, Tensor<T>>> state_;
};

// ---- batch normalization ----------------------------------------------------

// Channel-wise batch norm over [B,C,H,W]. In training mode the batch
// statistics are used on the tape and, when update_stats is set, the running
// buffers (held in `params` as `<prefix>.running_mean` / `<prefix>.running_var`)
// are updated in place; in eval mode the running buffers are used as
// constants. update_stats=false keeps training-mode evaluation side-effect
// free (finite-difference checks, the frozen network in a GAN step).
template <typename T>
typename Tape<T>::Id batch_norm(Tape<T>& g, ParamLeaves<T>& leaves,
                                ParamSet<T>& params, const std::string& prefix,
                                typename Tape<T>::Id x, bool training,
                                bool update_stats = true,
                                T momentum = T(0.1), T eps = T(1e-5)) {
  const Tensor<T>& xv = g.value(x);
  if (xv.ndim() != 4) throw std::invalid_argument("batch_norm: need BCHW");
  const int B = xv.dim(0), H = xv.dim(2), W = xv.dim(3);
  auto gamma = leaves.use(prefix + ".gamma");
  auto beta = leaves.use(prefix + ".beta");
  typename Tape<T>::Id xn;
  if (training) {
    auto mu = g.reduce_mean_channels(x);
    auto xc = g.sub(x, g.broadcast_channels(mu, B, H, W));
    auto var = g.reduce_mean_channels(g.mul(xc, xc));
    auto inv_std = g.rsqrt_shifted(var, eps);
    xn = g.mul(xc, g.broadcast_channels(inv_std, B, H, W));
    if (update_stats) {
      Tensor<T>& rm = params.at(prefix + ".running_mean");
      Tensor<T>& rv = params.at(prefix + ".running_var");
      const Tensor<T>& muv = g.value(mu);
      const Tensor<T>& varv = g.value(var);
      for (std::int64_t i = 0; i < rm.numel(); ++i) {
        rm[i] = (T(1) - momentum) * rm[i] + momentum * muv[i];
        rv[i] = (T(1) - momentum) * rv[i] + momentum * varv[i];
      }
    }
  } else {
    auto mu = g.constant(params.at(prefix + ".running_mean"));
    auto var = g.constant(params.at(prefix + ".running_var"));
    auto xc = g.sub(x, g.broadcast_channels(mu, B, H, W));
    auto inv_std = g.rsqrt_shifted(var, eps);
    xn = g.mul(xc, g.broadcast_channels(inv_std, B, H, W));
  }
  return g.add(g.mul(xn, g.broadcast_channels(gamma, B, H, W)),
               g.broadcast_channels(beta, B, H, W));
}

template <typename T>
void add_batch_norm_params(ParamSet<T>& params, const std::string& prefix,
                           int channels) {
  params.add(prefix + ".gamma", Tensor<T>::full({channels}, T(1)));
  params.add(prefix + ".beta", Tensor<T>({channels}));
  params.add(prefix + ".running_mean", Tensor<T>({channels}));
  params.add(prefix + ".running_var", Tensor<T>::full({channels}, T(1)));
}

// ---- convolutional LSTM -----------------------------------------------------

// One step of a convolutional LSTM. Gate pre-activations come from two
// padded stride-1 convolutions (input and hidden paths) whose output stacks
// the four gates in order [input, forget, cell, output] along channels.
//   weights: <prefix>.wx [4*Ch, Cin, k, k], <prefix>.wh [4*Ch, Ch, k, k],
//            <prefix>.bias [4*Ch]
template <typename T>
struct LstmState {
  typename Tape<T>::Id h;
  typename Tape<T>::Id c;
};

template <typename T>
LstmState<T> conv_lstm_step(Tape<T>& g, ParamLeaves<T>& leaves,
                            const std::string& prefix,
                            typename Tape<T>::Id x, LstmState<T> state,
                            int k) {
  auto wx = leaves.use(prefix + ".wx");
  auto wh = leaves.use(prefix + ".wh");
  auto bias = leaves.use(prefix + ".bias");
  const int pad = k / 2;
  auto z = g.add(g.conv2d(x, wx, bias, 1, pad),
                 g.conv2d(state.h, wh, -1, 1, pad));
  const int ch = g.value(state.h).dim(1);
  auto gi = g.sigmoid(g.slice_channels(z, 0, ch));
  auto gf = g.sigmoid(g.slice_channels(z, ch, 2 * ch));
  auto gc = g.tanh_(g.slice_channels(z, 2 * ch, 3 * ch));
  auto go = g.sigmoid(g.slice_channels(z, 3 * ch, 4 * ch));
  LstmState<T> next;
  next.c = g.add(g.mul(gf, state.c), g.mul(gi, gc));
  next.h = g.mul(go, g.tanh_(next.c));
  return next;
}

template <typename T>
void add_conv_lstm_params(ParamSet<T>& params, Rng& rng,
                          const std::string& prefix, int cin, int ch, int k) {
  params.add(prefix + ".wx", conv_init<T>(rng, 4 * ch, cin, k));
  params.add(prefix + ".wh", conv_init<T>(rng, 4 * ch, ch, k));
  params.add(prefix + ".bias", Tensor<T>({4 * ch}));
}

// ---- spectral normalization -------------------------------------------------

// Power-iteration buffers live in the ParamSet as `<name>.sn_u` (rows) and
// `<name>.sn_v` (cols) over the weight viewed as a [dim0, numel/dim0] matrix.
// They are plain buffers: never bound as trainable leaves, updated only by
// power_iterate during training, frozen at evaluation time.
template <typename T>
void add_spectral_buffers(ParamSet<T>& params, Rng& rng,
                          const std::string& name) {
  const Tensor<T>& w = params.at(name);
  const int rows = w.dim(0);
  const int cols = int(w.numel() / rows);
  Tensor<T> u = normal_init<T>(rng, {rows}, T(1));
  T norm = 0;
  for (T v : u.data) norm += v * v;
  norm = std::sqrt(norm) + T(1e-12);
  for (auto& v : u.data) v /= norm;
  params.add(name + ".sn_u", std::move(u));
  params.add(name + ".sn_v", Tensor<T>({cols}));
}

// One power-iteration update of (u, v) for the current weight value:
// v <- normalize(W^T u), u <- normalize(W v). Host-side, outside any tape.
template <typename T>
void power_iterate(ParamSet<T>& params, const std::string& name) {
  const Tensor<T>& w = params.at(name);
  Tensor<T>& u = params.at(name + ".sn_u");
  Tensor<T>& v = params.at(name + ".sn_v");
  const int rows = w.dim(0);
  const int cols = int(w.numel() / rows);
  using MatRM =
      Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<MatRM> wm(const_cast<T*>(w.data.data()), rows, cols);
  Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> um(u.data.data(), rows);
  Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> vm(v.data.data(), cols);
  vm.noalias() = wm.transpose() * um;
  vm /= (vm.norm() + T(1e-12));
  um.noalias() = wm * vm;
  um /= (um.norm() + T(1e-12));
}

// Spectrally normalized weight node: Wbar = W / sigma with sigma = u^T W v.
// u and v enter the tape as constants, so d(sigma)/dW = u v^T flows into the
// weight through scale_by + reciprocal.
template <typename T>
typename Tape<T>::Id sn_weight(Tape<T>& g, ParamLeaves<T>& leaves,
                               const ParamSet<T>& params,
                               const std::string& name) {
  auto w = leaves.use(name);
  // Copy the shape: adding nodes below may reallocate the tape's storage.
  const std::vector<int> shape = g.value(w).shape;
  const int rows = shape[0];
  const int cols = int(params.at(name).numel() / rows);
  auto w2 = g.reshape(w, {rows, cols});
  auto u = g.constant(params.at(name + ".sn_u").reshaped({1, rows}));
  auto v = g.constant(params.at(name + ".sn_v").reshaped({1, cols}));
  auto wv_row = g.linear(v, w2, -1);  // [1, rows] = (W v)^T
  auto sigma = g.reduce_sum_all(g.mul(wv_row, u));
  auto wbar2 = g.scale_by(w2, g.reciprocal(sigma));
  return g.reshape(wbar2, shape);
}

}  // namespace loopmon
