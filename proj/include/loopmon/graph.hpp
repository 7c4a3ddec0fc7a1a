// Reverse-mode automatic differentiation on a flat tape. Nodes are created
// in topological order by construction, so the backward pass is a single
// reverse sweep. Convolutions are lowered to im2col + GEMM (Eigen). The same
// tape drives training (with gradients) and inference (leaves without
// gradients); there is no separate inference path to drift out of sync.
#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include "loopmon/tensor.hpp"

namespace loopmon {

template <typename T>
class Tape {
 public:
  using Id = int;

  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated lazily during backward
    std::function<void(Tape&)> back;
    bool needs_grad = false;
  };

  Tape() { nodes_.reserve(256); }

  const Tensor<T>& value(Id id) const { return nodes_[size_t(id)].value; }
  const Tensor<T>& grad(Id id) const { return nodes_[size_t(id)].grad; }
  bool needs_grad(Id id) const { return nodes_[size_t(id)].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  Id leaf(Tensor<T> v, bool requires_grad = false) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Id(nodes_.size() - 1);
  }

  Id constant(Tensor<T> v) { return leaf(std::move(v), false); }

  // ---- elementwise ----------------------------------------------------

  Id add(Id a, Id b) {
    check_same_shape(a, b, "add");
    Tensor<T> out = value(a);
    const Tensor<T>& vb = value(b);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += vb[i];
    return make(std::move(out), {a, b}, [a, b](Tape& t) {
      const Tensor<T>& g = t.cur_grad();
      t.accumulate(a, [&](Tensor<T>& d) {
        for (std::int64_t i = 0; i < g.numel(); ++i) d[i] += g[i];
      });
      t.accumulate(b, [&](Tensor<T>& d) {
        for (std::int64_t i = 0; i < g.numel(); ++i) d[i] += g[i];
      });
    });
  }

  Id sub(Id a, Id b) {
    check_same_shape(a, b, "sub");
    Tensor<T> out = value(a);
    const Tensor<T>& vb = value(b);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= vb[i];
    return make(std::move(out), {a, b}, [a, b](Tape& t) {
      const Tensor<T>& g = t.cur_grad();
      t.accumulate(a, [&](Tensor<T>& d) {
        for (std::int64_t i = 0; i < g.numel(); ++i) d[i] += g[i];
      });
      t.accumulate(b, [&](Tensor<T>& d) {
        for (std::int64_t i = 0; i < g.numel(); ++i) d[i] -= g[i];
      });
    });
  }

  Id mul(Id a, Id b) {
    check_same_shape(a, b, "mul");
    Tensor<T> out = value(a);
    const Tensor<T>& vb = value(b);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= vb[i];
    return make(std::move(out), {a, b}, [a, b](Tape& t) {
      const Tensor<T>& g = t.cur_grad();
      const Tensor<T>& va = t.value(a);
      const Tensor<T>& vb2 = t.value(b);
      t.accumulate(a, [&](Tensor<T>& d) {
        for (std::int64_t i = 0; i < g.numel(); ++i) d[i] += g[i] * vb2[i];
      });
      t.accumulate(b, [&](Tensor<T>& d) {
        for (std::int64_t i = 0; i < g.numel(); ++i) d[i] += g[i] * va[i];
      });
    });
  }

  Id div(Id a, Id b) {
    check_same_shape(a, b, "div");
    Tensor<T> out = value(a);
    const Tensor<T>& vb = value(b);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] /= vb[i];
    return make(std::move(out), {a, b}, [a, b](Tape& t) {
      const Tensor<T>& g = t.cur_grad();
      const Tensor<T>& va = t.value(a);
      const Tensor<T>& vb2 = t.value(b);
      t.accumulate(a, [&](Tensor<T>& d) {
        for (std::int64_t i = 0; i < g.numel(); ++i) d[i] += g[i] / vb2[i];
      });
      t.accumulate(b, [&](Tensor<T>& d) {
        for (std::int64_t i = 0; i < g.numel(); ++i)
          d[i] -= g[i] * va[i] / (vb2[i] * vb2[i]);
      });
    });
  }

  Id scale(Id a, T c) {
    Tensor<T> out = value(a);
    for (auto& v : out.data) v *= c;
    return make(std::move(out), {a}, [a, c](Tape& t) {
      const Tensor<T>& g = t.cur_grad();
      t.accumulate(a, [&](Tensor<T>& d) {
        for (std::int64_t i = 0; i < g.numel(); ++i) d[i] += c * g[i];
      });
    });
  }

  Id add_const(Id a, T c) {
    Tensor<T> out = value(a);
    for (auto& v : out.data) v += c;
    return make(std::move(out), {a}, [a](Tape& t) {
      const Tensor<T>& g = t.cur_grad();
      t.accumulate(a, [&](Tensor<T>& d) {
        for (std::int64_t i = 0; i < g.numel(); ++i) d[i] += g[i];
      });
    });
  }

  // y = x * s where s is a scalar node of shape {1}.
  Id scale_by(Id a, Id s) {
    if (value(s).numel() != 1)
      throw std::invalid_argument("scale_by: scale must be a scalar node");
    const T sv = value(s)[0];
    Tensor<T> out = value(a);
    for (auto& v : out.data) v *= sv;
    return make(std::move(out), {a, s}, [a, s](Tape& t) {
      const Tensor<T>& g = t.cur_grad();
      const Tensor<T>& va = t.value(a);
      const T sv2 = t.value(s)[0];
      t.accumulate(a, [&](Tensor<T>& d) {
        for (std::int64_t i = 0; i < g.numel(); ++i) d[i] += sv2 * g[i];
      });
      t.accumulate(s, [&](Tensor<T>& d) {
        T acc = 0;
        for (std::int64_t i = 0; i < g.numel(); ++i) acc += g[i] * va[i];
        d[0] += acc;
      });
    });
  }

  // ---- nonlinearities --------------------------------------------------

  Id relu(Id a) {
    Tensor<T> out = value(a);
    for (auto& v : out.data) v = v > T(0) ? v : T(0);
    return make(std::move(out), {a}, [a](Tape& t) {
      const Tensor<T>& g = t.cur_grad();
      const Tensor<T>& x = t.value(a);
      t.accumulate(a, [&](Tensor<T>& d) {
        for (std::int64_t i = 0; i < g.numel(); ++i)
          if (x[i] > T(0)) d[i] += g[i];
      });
    });
  }

  Id leaky_relu(Id a, T slope) {
    Tensor<T> out = value(a);
    for (auto& v : out.data) v = v > T(0) ? v : slope * v;
    return make(std::move(out), {a}, [a, slope](Tape& t) {
      const Tensor<T>& g = t.cur_grad();
      const Tensor<T>& x = t.value(a);
      t.accumulate(a, [&](Tensor<T>& d) {
        for (std::int64_t i = 0; i < g.numel(); ++i)
          d[i] += (x[i] > T(0) ? g[i] : slope * g[i]);
      });
    });
  }

  Id sigmoid(Id a) {
    Tensor<T> out = value(a);
    for (auto& v : out.data) v = T(1) / (T(1) + std::exp(-v));
    auto y = std::make_shared<Tensor<T>>(out);
    return make(std::move(out), {a}, [a, y](Tape& t) {
      const Tensor<T>& g = t.cur_grad();
      t.accumulate(a, [&](Tensor<T>& d) {
        for (std::int64_t i = 0; i < g.numel(); ++i) {
          const T s = (*y)[i];
          d[i] += g[i] * s * (T(1) - s);
        }
      });
    });
  }

  Id tanh_(Id a) {
    Tensor<T> out = value(a);
    for (auto& v : out.data) v = std::tanh(v);
    auto y = std::make_shared<Tensor<T>>(out);
    return make(std::move(out), {a}, [a, y](Tape& t) {
      const Tensor<T>& g = t.cur_grad();
      t.accumulate(a, [&](Tensor<T>& d) {
        for (std::int64_t i = 0; i < g.numel(); ++i) {
          const T s = (*y)[i];
          d[i] += g[i] * (T(1) - s * s);
        }
      });
    });
  }

  // Pass-through gradient strictly inside (lo, hi), zero at and beyond the
  // saturation bounds (consistent with relu at 0).
  Id clamp(Id a, T lo, T hi) {
    Tensor<T> out = value(a);
    for (auto& v : out.data) v = std::min(hi, std::max(lo, v));
    return make(std::move(out), {a}, [a, lo, hi](Tape& t) {
      const Tensor<T>& g = t.cur_grad();
      const Tensor<T>& x = t.value(a);
      t.accumulate(a, [&](Tensor<T>& d) {
        for (std::int64_t i = 0; i < g.numel(); ++i)
          if (x[i] > lo && x[i] < hi) d[i] += g[i];
      });
    });
  }

  Id reciprocal(Id a) {
    Tensor<T> out = value(a);
    for (auto& v : out.data) v = T(1) / v;
    auto y = std::make_shared<Tensor<T>>(out);
    return make(std::move(out), {a}, [a, y](Tape& t) {
      const Tensor<T>& g = t.cur_grad();
      t.accumulate(a, [&](Tensor<T>& d) {
        for (std::int64_t i = 0; i < g.numel(); ++i)
          d[i] -= g[i] * (*y)[i] * (*y)[i];
      });
    });
  }

  // y = (x + eps)^(-1/2)
  Id rsqrt_shifted(Id a, T eps) {
    Tensor<T> out = value(a);
    for (auto& v : out.data) v = T(1) / std::sqrt(v + eps);
    auto y = std::make_shared<Tensor<T>>(out);
    return make(std::move(out), {a}, [a, y](Tape& t) {
      const Tensor<T>& g = t.cur_grad();
      t.accumulate(a, [&](Tensor<T>& d) {
        for (std::int64_t i = 0; i < g.numel(); ++i) {
          const T s = (*y)[i];
          d[i] -= T(0.5) * g[i] * s * s * s;
        }
      });
    });
  }

  // ---- shape ops -------------------------------------------------------

  Id reshape(Id a, std::vector<int> s) {
    Tensor<T> out = value(a).reshaped(s);
    return make(std::move(out), {a}, [a](Tape& t) {
      const Tensor<T>& g = t.cur_grad();
      t.accumulate(a, [&](Tensor<T>& d) {
        for (std::int64_t i = 0; i < g.numel(); ++i) d[i] += g[i];
      });
    });
  }

  // Replicate a batch-1 tensor n times along the batch dimension.
  Id repeat_batch(Id a, int n) {
    const Tensor<T>& x = value(a);
    if (x.ndim() < 1 || x.dim(0) != 1)
      throw std::invalid_argument("repeat_batch: leading dimension must be 1");
    std::vector<int> s = x.shape;
    s[0] = n;
    Tensor<T> out(s);
    const std::int64_t m = x.numel();
    for (int i = 0; i < n; ++i)
      std::copy(x.data.begin(), x.data.end(), out.data.begin() + i * m);
    return make(std::move(out), {a}, [a, n, m](Tape& t) {
      const Tensor<T>& g = t.cur_grad();
      t.accumulate(a, [&](Tensor<T>& d) {
        for (int i = 0; i < n; ++i)
          for (std::int64_t j = 0; j < m; ++j) d[j] += g[i * m + j];
      });
    });
  }

  Id concat_channels(const std::vector<Id>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    const Tensor<T>& first = value(parts[0]);
    if (first.ndim() != 4) throw std::invalid_argument("concat: need BCHW");
    const int B = first.dim(0), H = first.dim(2), W = first.dim(3);
    int C = 0;
    for (Id p : parts) {
      const Tensor<T>& v = value(p);
      if (v.ndim() != 4 || v.dim(0) != B || v.dim(2) != H || v.dim(3) != W)
        throw std::invalid_argument("concat: mismatched shapes");
      C += v.dim(1);
    }
    Tensor<T> out({B, C, H, W});
    const std::int64_t plane = std::int64_t(H) * W;
    for (int b = 0; b < B; ++b) {
      std::int64_t coff = 0;
      for (Id p : parts) {
        const Tensor<T>& v = value(p);
        const int pc = v.dim(1);
        std::copy(v.data.begin() + b * pc * plane,
                  v.data.begin() + (b + 1) * pc * plane,
                  out.data.begin() + (b * C + coff) * plane);
        coff += pc;
      }
    }
    auto ps = parts;
    return make(std::move(out), parts, [ps, B, C, plane](Tape& t) {
      const Tensor<T>& g = t.cur_grad();
      std::int64_t coff = 0;
      for (Id p : ps) {
        const int pc = t.value(p).dim(1);
        t.accumulate(p, [&](Tensor<T>& d) {
          for (int b = 0; b < B; ++b) {
            const T* src = g.data.data() + (b * C + coff) * plane;
            T* dst = d.data.data() + std::int64_t(b) * pc * plane;
            for (std::int64_t i = 0; i < pc * plane; ++i) dst[i] += src[i];
          }
        });
        coff += pc;
      }
    });
  }

  Id slice_channels(Id a, int c0, int c1) {
    const Tensor<T>& x = value(a);
    if (x.ndim() != 4) throw std::invalid_argument("slice: need BCHW");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (c0 < 0 || c1 > C || c0 >= c1)
      throw std::invalid_argument("slice: bad channel range");
    Tensor<T> out({B, c1 - c0, H, W});
    const std::int64_t plane = std::int64_t(H) * W;
    for (int b = 0; b < B; ++b)
      std::copy(x.data.begin() + (b * C + c0) * plane,
                x.data.begin() + (b * C + c1) * plane,
                out.data.begin() + std::int64_t(b) * (c1 - c0) * plane);
    return make(std::move(out), {a}, [a, c0, c1, B, C, plane](Tape& t) {
      const Tensor<T>& g = t.cur_grad();
      t.accumulate(a, [&](Tensor<T>& d) {
        for (int b = 0; b < B; ++b) {
          const T* src = g.data.data() + std::int64_t(b) * (c1 - c0) * plane;
          T* dst = d.data.data() + (b * C + c0) * plane;
          for (std::int64_t i = 0; i < (c1 - c0) * plane; ++i)
            dst[i] += src[i];
        }
      });
    });
  }

  Id slice_cols(Id a, int c0, int c1) {
    const Tensor<T>& x = value(a);
    if (x.ndim() != 2) throw std::invalid_argument("slice_cols: need 2-D");
    const int B = x.dim(0), K = x.dim(1);
    if (c0 < 0 || c1 > K || c0 >= c1)
      throw std::invalid_argument("slice_cols: bad range");
    Tensor<T> out({B, c1 - c0});
    for (int b = 0; b < B; ++b)
      for (int j = c0; j < c1; ++j) out[b * (c1 - c0) + j - c0] = x[b * K + j];
    return make(std::move(out), {a}, [a, c0, c1, B, K](Tape& t) {
      const Tensor<T>& g = t.cur_grad();
      t.accumulate(a, [&](Tensor<T>& d) {
        for (int b = 0; b < B; ++b)
          for (int j = c0; j < c1; ++j)
            d[b * K + j] += g[b * (c1 - c0) + j - c0];
      });
    });
  }

  // ---- reductions and broadcasts ----------------------------------------

  Id reduce_sum_all(Id a) {
    const Tensor<T>& x = value(a);
    T acc = 0;
    for (T v : x.data) acc += v;
    return make(Tensor<T>::scalar(acc), {a}, [a](Tape& t) {
      const T g = t.cur_grad()[0];
      t.accumulate(a, [&](Tensor<T>& d) {
        for (auto& v : d.data) v += g;
      });
    });
  }

  Id reduce_mean_all(Id a) {
    const Tensor<T>& x = value(a);
    const T inv = T(1) / T(x.numel());
    T acc = 0;
    for (T v : x.data) acc += v;
    return make(Tensor<T>::scalar(acc * inv), {a}, [a, inv](Tape& t) {
      const T g = t.cur_grad()[0] * inv;
      t.accumulate(a, [&](Tensor<T>& d) {
        for (auto& v : d.data) v += g;
      });
    });
  }

  // Per-channel mean over batch and spatial dimensions: [B,C,H,W] -> [C].
  Id reduce_mean_channels(Id a) {
    const Tensor<T>& x = value(a);
    if (x.ndim() != 4) throw std::invalid_argument("mean_channels: need BCHW");
    const int B = x.dim(0), C = x.dim(1);
    const std::int64_t plane = std::int64_t(x.dim(2)) * x.dim(3);
    const T inv = T(1) / T(B * plane);
    Tensor<T> out({C});
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const T* p = x.data.data() + (b * C + c) * plane;
        T acc = 0;
        for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
        out[c] += acc;
      }
    for (auto& v : out.data) v *= inv;
    return make(std::move(out), {a}, [a, B, C, plane, inv](Tape& t) {
      const Tensor<T>& g = t.cur_grad();
      t.accumulate(a, [&](Tensor<T>& d) {
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c) {
            T* p = d.data.data() + (b * C + c) * plane;
            const T gv = g[c] * inv;
            for (std::int64_t i = 0; i < plane; ++i) p[i] += gv;
          }
      });
    });
  }

  // [C] -> [B,C,H,W]
  Id broadcast_channels(Id v, int B, int H, int W) {
    const Tensor<T>& x = value(v);
    if (x.ndim() != 1) throw std::invalid_argument("broadcast: need 1-D");
    const int C = x.dim(0);
    Tensor<T> out({B, C, H, W});
    const std::int64_t plane = std::int64_t(H) * W;
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        std::fill_n(out.data.begin() + (b * C + c) * plane, plane, x[c]);
    return make(std::move(out), {v}, [v, B, C, plane](Tape& t) {
      const Tensor<T>& g = t.cur_grad();
      t.accumulate(v, [&](Tensor<T>& d) {
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c) {
            const T* p = g.data.data() + (b * C + c) * plane;
            T acc = 0;
            for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
            d[c] += acc;
          }
      });
    });
  }

  // ---- dense linear algebra ---------------------------------------------

  // y[B,out] = x[B,in] * w[out,in]^T + b[out]; b may be -1 for no bias.
  Id linear(Id x, Id w, Id b) {
    const Tensor<T>& xv = value(x);
    const Tensor<T>& wv = value(w);
    if (xv.ndim() != 2 || wv.ndim() != 2 || xv.dim(1) != wv.dim(1))
      throw std::invalid_argument("linear: shape mismatch");
    const int B = xv.dim(0), In = xv.dim(1), Out = wv.dim(0);
    Tensor<T> out({B, Out});
    {
      MapRM xm(const_cast<T*>(xv.data.data()), B, In);
      MapRM wm(const_cast<T*>(wv.data.data()), Out, In);
      MapRM ym(out.data.data(), B, Out);
      ym.noalias() = xm * wm.transpose();
    }
    if (b >= 0) {
      const Tensor<T>& bv = value(b);
      if (bv.numel() != Out) throw std::invalid_argument("linear: bad bias");
      for (int i = 0; i < B; ++i)
        for (int j = 0; j < Out; ++j) out[i * Out + j] += bv[j];
    }
    std::vector<Id> parents = b >= 0 ? std::vector<Id>{x, w, b}
                                     : std::vector<Id>{x, w};
    return make(std::move(out), parents, [x, w, b, B, In, Out](Tape& t) {
      const Tensor<T>& g = t.cur_grad();
      MapRM gm(const_cast<T*>(g.data.data()), B, Out);
      t.accumulate(x, [&](Tensor<T>& d) {
        MapRM wm(const_cast<T*>(t.value(w).data.data()), Out, In);
        MapRM dm(d.data.data(), B, In);
        dm.noalias() += gm * wm;
      });
      t.accumulate(w, [&](Tensor<T>& d) {
        MapRM xm(const_cast<T*>(t.value(x).data.data()), B, In);
        MapRM dm(d.data.data(), Out, In);
        dm.noalias() += gm.transpose() * xm;
      });
      if (b >= 0)
        t.accumulate(b, [&](Tensor<T>& d) {
          for (int i = 0; i < B; ++i)
            for (int j = 0; j < Out; ++j) d[j] += g[i * Out + j];
        });
    });
  }

  // ---- convolution family ------------------------------------------------

  // x[B,Cin,H,W], w[Cout,Cin,k,k], optional bias[Cout]; zero padding.
  Id conv2d(Id x, Id w, Id b, int stride, int pad) {
    const Tensor<T>& xv = value(x);
    const Tensor<T>& wv = value(w);
    if (xv.ndim() != 4 || wv.ndim() != 4)
      throw std::invalid_argument("conv2d: need BCHW input and OIKK weight");
    if (xv.dim(1) != wv.dim(1))
      throw std::invalid_argument("conv2d: channel mismatch");
    if (wv.dim(2) != wv.dim(3))
      throw std::invalid_argument("conv2d: non-square kernel");
    const int B = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int Cout = wv.dim(0), k = wv.dim(2);
    const int Ho = (H + 2 * pad - k) / stride + 1;
    const int Wo = (W + 2 * pad - k) / stride + 1;
    if (Ho <= 0 || Wo <= 0)
      throw std::invalid_argument("conv2d: kernel larger than padded input");
    const int K = Cin * k * k;
    const std::int64_t Npos = std::int64_t(Ho) * Wo;

    Tensor<T> out({B, Cout, Ho, Wo});
    std::vector<T> col(std::size_t(K) * Npos);
    MapRM wm(const_cast<T*>(wv.data.data()), Cout, K);
    for (int bi = 0; bi < B; ++bi) {
      im2col(xv.data.data() + std::int64_t(bi) * Cin * H * W, Cin, H, W, k,
             stride, pad, Ho, Wo, col.data());
      MapCM cm(col.data(), K, Npos);
      MapRM ym(out.data.data() + std::int64_t(bi) * Cout * Npos, Cout, Npos);
      ym.noalias() = wm * cm;
    }
    if (b >= 0) {
      const Tensor<T>& bv = value(b);
      if (bv.numel() != Cout) throw std::invalid_argument("conv2d: bad bias");
      for (int bi = 0; bi < B; ++bi)
        for (int c = 0; c < Cout; ++c) {
          T* p = out.data.data() + (std::int64_t(bi) * Cout + c) * Npos;
          for (std::int64_t i = 0; i < Npos; ++i) p[i] += bv[c];
        }
    }
    std::vector<Id> parents = b >= 0 ? std::vector<Id>{x, w, b}
                                     : std::vector<Id>{x, w};
    return make(
        std::move(out), parents,
        [x, w, b, B, Cin, H, W, Cout, k, stride, pad, Ho, Wo, K,
         Npos](Tape& t) {
          const Tensor<T>& g = t.cur_grad();
          const Tensor<T>& xv2 = t.value(x);
          const Tensor<T>& wv2 = t.value(w);
          std::vector<T> col(std::size_t(K) * Npos);
          const bool need_w = t.needs_grad(w);
          const bool need_x = t.needs_grad(x);
          if (need_w) {
            t.accumulate(w, [&](Tensor<T>& d) {
              MapRM dwm(d.data.data(), Cout, K);
              for (int bi = 0; bi < B; ++bi) {
                im2col(xv2.data.data() + std::int64_t(bi) * Cin * H * W, Cin,
                       H, W, k, stride, pad, Ho, Wo, col.data());
                MapCM cm(col.data(), K, Npos);
                MapRM gm(const_cast<T*>(g.data.data()) +
                             std::int64_t(bi) * Cout * Npos,
                         Cout, Npos);
                dwm.noalias() += gm * cm.transpose();
              }
            });
          }
          if (b >= 0) {
            t.accumulate(b, [&](Tensor<T>& d) {
              for (int bi = 0; bi < B; ++bi)
                for (int c = 0; c < Cout; ++c) {
                  const T* p =
                      g.data.data() + (std::int64_t(bi) * Cout + c) * Npos;
                  T acc = 0;
                  for (std::int64_t i = 0; i < Npos; ++i) acc += p[i];
                  d[c] += acc;
                }
            });
          }
          if (need_x) {
            t.accumulate(x, [&](Tensor<T>& d) {
              MapRM wm2(const_cast<T*>(wv2.data.data()), Cout, K);
              for (int bi = 0; bi < B; ++bi) {
                MapRM gm(const_cast<T*>(g.data.data()) +
                             std::int64_t(bi) * Cout * Npos,
                         Cout, Npos);
                MapCM cm(col.data(), K, Npos);
                cm.noalias() = wm2.transpose() * gm;
                col2im(col.data(), Cin, H, W, k, stride, pad, Ho, Wo,
                       d.data.data() + std::int64_t(bi) * Cin * H * W);
              }
            });
          }
        });
  }

  // 2x2 max pooling with stride 2; spatial dimensions must be even.
  Id maxpool2(Id a) {
    const Tensor<T>& x = value(a);
    if (x.ndim() != 4) throw std::invalid_argument("maxpool2: need BCHW");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % 2 || W % 2)
      throw std::invalid_argument("maxpool2: odd spatial size");
    const int Ho = H / 2, Wo = W / 2;
    Tensor<T> out({B, C, Ho, Wo});
    auto arg = std::make_shared<std::vector<std::uint8_t>>(out.data.size());
    std::int64_t o = 0;
    for (int bc = 0; bc < B * C; ++bc) {
      const T* p = x.data.data() + std::int64_t(bc) * H * W;
      for (int i = 0; i < Ho; ++i)
        for (int j = 0; j < Wo; ++j, ++o) {
          const T v00 = p[(2 * i) * W + 2 * j];
          const T v01 = p[(2 * i) * W + 2 * j + 1];
          const T v10 = p[(2 * i + 1) * W + 2 * j];
          const T v11 = p[(2 * i + 1) * W + 2 * j + 1];
          T best = v00;
          std::uint8_t bi = 0;
          if (v01 > best) { best = v01; bi = 1; }
          if (v10 > best) { best = v10; bi = 2; }
          if (v11 > best) { best = v11; bi = 3; }
          out[o] = best;
          (*arg)[std::size_t(o)] = bi;
        }
    }
    return make(std::move(out), {a}, [a, arg, B, C, H, W, Ho, Wo](Tape& t) {
      const Tensor<T>& g = t.cur_grad();
      t.accumulate(a, [&](Tensor<T>& d) {
        std::int64_t o = 0;
        for (int bc = 0; bc < B * C; ++bc) {
          T* p = d.data.data() + std::int64_t(bc) * H * W;
          for (int i = 0; i < Ho; ++i)
            for (int j = 0; j < Wo; ++j, ++o) {
              const std::uint8_t bi = (*arg)[std::size_t(o)];
              const int di = bi >> 1, dj = bi & 1;
              p[(2 * i + di) * W + 2 * j + dj] += g[o];
            }
        }
      });
    });
  }

  // Nearest-neighbor 2x upsampling.
  Id upsample2(Id a) {
    const Tensor<T>& x = value(a);
    if (x.ndim() != 4) throw std::invalid_argument("upsample2: need BCHW");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor<T> out({B, C, 2 * H, 2 * W});
    for (int bc = 0; bc < B * C; ++bc) {
      const T* p = x.data.data() + std::int64_t(bc) * H * W;
      T* q = out.data.data() + std::int64_t(bc) * 4 * H * W;
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          const T v = p[i * W + j];
          q[(2 * i) * 2 * W + 2 * j] = v;
          q[(2 * i) * 2 * W + 2 * j + 1] = v;
          q[(2 * i + 1) * 2 * W + 2 * j] = v;
          q[(2 * i + 1) * 2 * W + 2 * j + 1] = v;
        }
    }
    return make(std::move(out), {a}, [a, B, C, H, W](Tape& t) {
      const Tensor<T>& g = t.cur_grad();
      t.accumulate(a, [&](Tensor<T>& d) {
        for (int bc = 0; bc < B * C; ++bc) {
          T* p = d.data.data() + std::int64_t(bc) * H * W;
          const T* q = g.data.data() + std::int64_t(bc) * 4 * H * W;
          for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j)
              p[i * W + j] += q[(2 * i) * 2 * W + 2 * j] +
                              q[(2 * i) * 2 * W + 2 * j + 1] +
                              q[(2 * i + 1) * 2 * W + 2 * j] +
                              q[(2 * i + 1) * 2 * W + 2 * j + 1];
        }
      });
    });
  }

  // Mean over each k x k sliding window (valid placements, stride 1),
  // applied per channel. The building block of the differentiable SSIM.
  Id box_mean(Id a, int k) {
    const Tensor<T>& x = value(a);
    if (x.ndim() != 4) throw std::invalid_argument("box_mean: need BCHW");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (k < 1 || k > H || k > W)
      throw std::invalid_argument("box_mean: bad kernel");
    const int Ho = H - k + 1, Wo = W - k + 1;
    const T inv = T(1) / T(k * k);
    Tensor<T> out({B, C, Ho, Wo});
    for (int bc = 0; bc < B * C; ++bc) {
      const T* p = x.data.data() + std::int64_t(bc) * H * W;
      T* q = out.data.data() + std::int64_t(bc) * Ho * Wo;
      for (int i = 0; i < Ho; ++i)
        for (int j = 0; j < Wo; ++j) {
          T acc = 0;
          for (int di = 0; di < k; ++di)
            for (int dj = 0; dj < k; ++dj) acc += p[(i + di) * W + j + dj];
          q[i * Wo + j] = acc * inv;
        }
    }
    return make(std::move(out), {a}, [a, B, C, H, W, k, Ho, Wo, inv](Tape& t) {
      const Tensor<T>& g = t.cur_grad();
      t.accumulate(a, [&](Tensor<T>& d) {
        for (int bc = 0; bc < B * C; ++bc) {
          T* p = d.data.data() + std::int64_t(bc) * H * W;
          const T* q = g.data.data() + std::int64_t(bc) * Ho * Wo;
          for (int i = 0; i < Ho; ++i)
            for (int j = 0; j < Wo; ++j) {
              const T gv = q[i * Wo + j] * inv;
              for (int di = 0; di < k; ++di)
                for (int dj = 0; dj < k; ++dj)
                  p[(i + di) * W + j + dj] += gv;
            }
        }
      });
    });
  }

  // ---- classification losses --------------------------------------------

  // Mean cross entropy of logits[B,K] against integer labels.
  Id softmax_cross_entropy(Id logits, std::vector<int> labels) {
    const Tensor<T>& x = value(logits);
    if (x.ndim() != 2) throw std::invalid_argument("ce: need 2-D logits");
    const int B = x.dim(0), K = x.dim(1);
    if (int(labels.size()) != B)
      throw std::invalid_argument("ce: label count mismatch");
    auto soft = std::make_shared<Tensor<T>>(Tensor<T>({B, K}));
    T loss = 0;
    for (int b = 0; b < B; ++b) {
      const T* row = x.data.data() + std::int64_t(b) * K;
      T m = row[0];
      for (int j = 1; j < K; ++j) m = std::max(m, row[j]);
      T z = 0;
      for (int j = 0; j < K; ++j) z += std::exp(row[j] - m);
      const T lse = m + std::log(z);
      if (labels[b] < 0 || labels[b] >= K)
        throw std::invalid_argument("ce: label out of range");
      loss += lse - row[labels[b]];
      for (int j = 0; j < K; ++j)
        (*soft)[b * K + j] = std::exp(row[j] - lse);
    }
    loss /= T(B);
    return make(Tensor<T>::scalar(loss), {logits},
                [logits, labels, soft, B, K](Tape& t) {
                  const T g = t.cur_grad()[0] / T(B);
                  t.accumulate(logits, [&](Tensor<T>& d) {
                    for (int b = 0; b < B; ++b)
                      for (int j = 0; j < K; ++j)
                        d[b * K + j] +=
                            g * ((*soft)[b * K + j] -
                                 (j == labels[b] ? T(1) : T(0)));
                  });
                });
  }

  // Row-wise log(softmax) of logits[B,K].
  Id log_softmax(Id logits) {
    const Tensor<T>& x = value(logits);
    if (x.ndim() != 2) throw std::invalid_argument("log_softmax: need 2-D");
    const int B = x.dim(0), K = x.dim(1);
    Tensor<T> out({B, K});
    for (int b = 0; b < B; ++b) {
      const T* row = x.data.data() + std::int64_t(b) * K;
      T m = row[0];
      for (int j = 1; j < K; ++j) m = std::max(m, row[j]);
      T z = 0;
      for (int j = 0; j < K; ++j) z += std::exp(row[j] - m);
      const T lse = m + std::log(z);
      for (int j = 0; j < K; ++j) out[b * K + j] = row[j] - lse;
    }
    auto y = std::make_shared<Tensor<T>>(out);
    return make(std::move(out), {logits}, [logits, y, B, K](Tape& t) {
      const Tensor<T>& g = t.cur_grad();
      t.accumulate(logits, [&](Tensor<T>& d) {
        for (int b = 0; b < B; ++b) {
          T gsum = 0;
          for (int j = 0; j < K; ++j) gsum += g[b * K + j];
          for (int j = 0; j < K; ++j)
            d[b * K + j] += g[b * K + j] - std::exp((*y)[b * K + j]) * gsum;
        }
      });
    });
  }

  // ---- backward ----------------------------------------------------------

  void backward(Id loss) {
    if (value(loss).numel() != 1)
      throw std::invalid_argument("backward: loss must be scalar");
    ensure_grad(loss);
    nodes_[size_t(loss)].grad[0] = T(1);
    for (Id i = loss; i >= 0; --i) {
      Node& n = nodes_[size_t(i)];
      if (!n.needs_grad || n.grad.numel() == 0 || !n.back) continue;
      cur_ = i;
      n.back(*this);
    }
  }

  // Gradient of a node after backward; zero tensor if it never received one.
  Tensor<T> grad_or_zero(Id id) const {
    const Node& n = nodes_[size_t(id)];
    if (n.grad.numel() == 0) return Tensor<T>(n.value.shape);
    return n.grad;
  }

  // ---- helpers used by op closures ---------------------------------------

  const Tensor<T>& cur_grad() const { return nodes_[size_t(cur_)].grad; }

  template <typename F>
  void accumulate(Id parent, F&& f) {
    if (!nodes_[size_t(parent)].needs_grad) return;
    ensure_grad(parent);
    f(nodes_[size_t(parent)].grad);
  }

 private:
  using MatRM =
      Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatCM =
      Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
  using MapRM = Eigen::Map<MatRM>;
  using MapCM = Eigen::Map<MatCM>;

  Id make(Tensor<T> out, const std::vector<Id>& parents,
          std::function<void(Tape&)> back) {
    bool needs = false;
    for (Id p : parents) needs = needs || nodes_[size_t(p)].needs_grad;
    Node n;
    n.value = std::move(out);
    n.needs_grad = needs;
    if (needs) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Id(nodes_.size() - 1);
  }

  void ensure_grad(Id id) {
    Node& n = nodes_[size_t(id)];
    if (n.grad.numel() == 0) n.grad = Tensor<T>(n.value.shape);
  }

  void check_same_shape(Id a, Id b, const char* op) const {
    if (!value(a).same_shape(value(b)))
      throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                  value(a).shape_str() + " vs " +
                                  value(b).shape_str());
  }

  static void im2col(const T* x, int Cin, int H, int W, int k, int stride,
                     int pad, int Ho, int Wo, T* col) {
    const int K = Cin * k * k;
    std::int64_t p = 0;
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox, ++p) {
        T* c = col + p * K;
        int r = 0;
        for (int ci = 0; ci < Cin; ++ci) {
          const T* plane = x + std::int64_t(ci) * H * W;
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) {
              for (int kx = 0; kx < k; ++kx) c[r++] = T(0);
              continue;
            }
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * stride - pad + kx;
              c[r++] = (ix < 0 || ix >= W) ? T(0) : plane[iy * W + ix];
            }
          }
        }
      }
  }

  static void col2im(const T* col, int Cin, int H, int W, int k, int stride,
                     int pad, int Ho, int Wo, T* dx) {
    const int K = Cin * k * k;
    std::int64_t p = 0;
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox, ++p) {
        const T* c = col + p * K;
        int r = 0;
        for (int ci = 0; ci < Cin; ++ci) {
          T* plane = dx + std::int64_t(ci) * H * W;
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) {
              r += k;
              continue;
            }
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix >= 0 && ix < W) plane[iy * W + ix] += c[r];
              ++r;
            }
          }
        }
      }
  }

  std::vector<Node> nodes_;
  Id cur_ = -1;
};

// Detach: re-enter a value as a constant so gradients stop flowing.
template <typename T>
typename Tape<T>::Id detach(Tape<T>& g, typename Tape<T>::Id id) {
  return g.constant(g.value(id));
}

// Mean SSIM between two image batches, built from tape primitives so it is
// differentiable. Uniform k x k window, valid placements, dynamic range 1.
template <typename T>
typename Tape<T>::Id ssim_op(Tape<T>& g, typename Tape<T>::Id a,
                             typename Tape<T>::Id b, int k) {
  const T c1 = T(1e-4);   // (0.01 * L)^2 with L = 1
  const T c2 = T(9e-4);   // (0.03 * L)^2
  auto mu_a = g.box_mean(a, k);
  auto mu_b = g.box_mean(b, k);
  auto e_aa = g.box_mean(g.mul(a, a), k);
  auto e_bb = g.box_mean(g.mul(b, b), k);
  auto e_ab = g.box_mean(g.mul(a, b), k);
  auto var_a = g.sub(e_aa, g.mul(mu_a, mu_a));
  auto var_b = g.sub(e_bb, g.mul(mu_b, mu_b));
  auto cov = g.sub(e_ab, g.mul(mu_a, mu_b));
  auto num = g.mul(g.add_const(g.scale(g.mul(mu_a, mu_b), T(2)), c1),
                   g.add_const(g.scale(cov, T(2)), c2));
  auto den = g.mul(g.add_const(g.add(g.mul(mu_a, mu_a), g.mul(mu_b, mu_b)), c1),
                   g.add_const(g.add(var_a, var_b), c2));
  return g.reduce_mean_all(g.div(num, den));
}

}  // namespace loopmon
