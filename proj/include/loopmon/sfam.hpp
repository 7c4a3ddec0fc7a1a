// Action-conditioned predictive-coding video prediction (PredNet-style
// stack of convolutional LSTMs with error feedback), trained in two stages:
// error/SSIM minimization, then adversarial refinement against a spectrally
// normalized (N+1)-class action critic with a KL-to-uniform regularizer.
// Anomaly scoring compares action-conditioned predictions against the actual
// next frame via a dissimilarity profile.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "loopmon/configfile.hpp"
#include "loopmon/dataio.hpp"
#include "loopmon/errors.hpp"
#include "loopmon/graph.hpp"
#include "loopmon/metrics.hpp"
#include "loopmon/nn.hpp"
#include "loopmon/rng.hpp"
#include "loopmon/tensor.hpp"

namespace loopmon {

struct SfamConfig {
  int height = 64;   // divisible by 2^(layers-1)
  int width = 80;
  std::vector<int> channels = {3, 32, 48, 64};  // A[l], l = 1..layers
  int kernel = 3;
  double lambda_err = 0.1;
  double lambda_ssim = 1.0;
  double lambda_prev = 0.5;
  int ssim_kernel = 5;
  double learning_rate = 1e-3;      // stage 1
  double adv_learning_rate = 2e-4;  // stage 2, critic and generator
  std::vector<int> critic_channels = {16, 32, 32, 64, 64, 128, 128, 128, 128};
  double critic_slope = 0.1;
  double grid_lo = -1.0;
  double grid_hi = 1.0;
  int grid_n = 15;
  int batch_size = 8;
  int stage1_epochs = 10;
  int stage2_epochs = 5;

  int layers() const { return int(channels.size()); }
  int layer_height(int l) const { return height >> (l - 1); }  // l is 1-based
  int layer_width(int l) const { return width >> (l - 1); }
  int classes() const { return grid_n; }  // critic emits classes()+1 logits
  ActionGrid grid() const { return make_action_grid(grid_lo, grid_hi, grid_n); }

  // Spatial size after the critic's nine convolutions (odd index = 4x4/2).
  std::pair<int, int> critic_spatial() const {
    int h = height, w = width;
    for (int i = 0; i < 9; ++i)
      if (i % 2 == 1) {
        h = (h - 2) / 2 + 1;
        w = (w - 2) / 2 + 1;
      }
    return {h, w};
  }
  int critic_feature_dim() const {
    auto [h, w] = critic_spatial();
    return critic_channels.back() * h * w;
  }

  void validate() const {
    if (layers() < 2 || layers() > 4)
      throw std::invalid_argument("sfam config: need 2..4 layers");
    for (int c : channels)
      if (c <= 0) throw std::invalid_argument("sfam config: bad channel count");
    if (kernel < 1 || kernel % 2 == 0)
      throw std::invalid_argument("sfam config: kernel must be odd >= 1");
    const int down = 1 << (layers() - 1);
    if (height < down || width < down || height % down != 0 ||
        width % down != 0)
      throw std::invalid_argument(
          "sfam config: size must be divisible by 2^(layers-1)");
    if (lambda_err < 0.0 || lambda_ssim < 0.0 || lambda_prev < 0.0)
      throw std::invalid_argument("sfam config: negative loss weight");
    if (ssim_kernel < 1 || ssim_kernel > height || ssim_kernel > width)
      throw std::invalid_argument("sfam config: bad ssim kernel");
    if (learning_rate <= 0.0 || adv_learning_rate <= 0.0 || batch_size < 1 ||
        stage1_epochs < 0 || stage2_epochs < 0)
      throw std::invalid_argument("sfam config: bad training settings");
    if (critic_channels.size() != 9)
      throw std::invalid_argument("sfam config: critic needs 9 conv layers");
    for (int c : critic_channels)
      if (c <= 0)
        throw std::invalid_argument("sfam config: bad critic channel count");
    if (critic_slope <= 0.0 || critic_slope >= 1.0)
      throw std::invalid_argument("sfam config: bad critic slope");
    if (!(grid_lo < grid_hi) || grid_n < 2)
      throw std::invalid_argument("sfam config: bad action grid");
    auto [h, w] = critic_spatial();
    if (h < 1 || w < 1)
      throw std::invalid_argument("sfam config: input too small for critic");
  }
};

inline std::string int_list_to_string(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

inline std::vector<int> int_list_from_string(const std::string& s,
                                             const std::string& what) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    auto comma = s.find(',', pos);
    if (comma == std::string::npos) comma = s.size();
    const std::string tok = s.substr(pos, comma - pos);
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(tok, &used);
    } catch (const std::exception&) {
      throw FormatError(what + ": bad entry: " + tok);
    }
    if (used != tok.size()) throw FormatError(what + ": bad entry: " + tok);
    out.push_back(v);
    pos = comma + 1;
  }
  return out;
}

inline KeyValues sfam_config_to(const SfamConfig& c) {
  KeyValues kv;
  kv.set("height", c.height);
  kv.set("width", c.width);
  kv.set("channels", int_list_to_string(c.channels));
  kv.set("kernel", c.kernel);
  kv.set("lambda_err", c.lambda_err);
  kv.set("lambda_ssim", c.lambda_ssim);
  kv.set("lambda_prev", c.lambda_prev);
  kv.set("ssim_kernel", c.ssim_kernel);
  kv.set("learning_rate", c.learning_rate);
  kv.set("adv_learning_rate", c.adv_learning_rate);
  kv.set("critic_channels", int_list_to_string(c.critic_channels));
  kv.set("critic_slope", c.critic_slope);
  kv.set("grid_lo", c.grid_lo);
  kv.set("grid_hi", c.grid_hi);
  kv.set("grid_n", c.grid_n);
  kv.set("batch_size", c.batch_size);
  kv.set("stage1_epochs", c.stage1_epochs);
  kv.set("stage2_epochs", c.stage2_epochs);
  return kv;
}

inline SfamConfig sfam_config_from(const KeyValues& kv) {
  SfamConfig c;
  c.height = kv.get_int("height", c.height);
  c.width = kv.get_int("width", c.width);
  std::string lst = kv.get_string("channels", "");
  if (!lst.empty()) c.channels = int_list_from_string(lst, "sfam channels");
  c.kernel = kv.get_int("kernel", c.kernel);
  c.lambda_err = kv.get_double("lambda_err", c.lambda_err);
  c.lambda_ssim = kv.get_double("lambda_ssim", c.lambda_ssim);
  c.lambda_prev = kv.get_double("lambda_prev", c.lambda_prev);
  c.ssim_kernel = kv.get_int("ssim_kernel", c.ssim_kernel);
  c.learning_rate = kv.get_double("learning_rate", c.learning_rate);
  c.adv_learning_rate =
      kv.get_double("adv_learning_rate", c.adv_learning_rate);
  lst = kv.get_string("critic_channels", "");
  if (!lst.empty())
    c.critic_channels = int_list_from_string(lst, "sfam critic_channels");
  c.critic_slope = kv.get_double("critic_slope", c.critic_slope);
  c.grid_lo = kv.get_double("grid_lo", c.grid_lo);
  c.grid_hi = kv.get_double("grid_hi", c.grid_hi);
  c.grid_n = kv.get_int("grid_n", c.grid_n);
  c.batch_size = kv.get_int("batch_size", c.batch_size);
  c.stage1_epochs = kv.get_int("stage1_epochs", c.stage1_epochs);
  c.stage2_epochs = kv.get_int("stage2_epochs", c.stage2_epochs);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("sfam config: ") + e.what());
  }
  return c;
}

// Parameter names: per layer l (1-based): "lstm<l>.{wx,wh,bias}" (recurrent
// representation), "ahat<l>.{w,b}" (prediction), "a<l>.{w,b}" for l >= 2
// (target); critic: "critic.conv<i>.{w,b}" i = 0..8 and "critic.head.{w,b}",
// with ".sn_u"/".sn_v" power-iteration buffers on every critic weight.
template <typename T>
ParamSet<T> init_sfam_params(const SfamConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamSet<T> params;
  const int L = cfg.layers();
  for (int l = 1; l <= L; ++l) {
    const int al = cfg.channels[std::size_t(l - 1)];
    const int cin =
        2 * al + (l < L ? cfg.channels[std::size_t(l)] : 1);
    add_conv_lstm_params<T>(params, rng, "lstm" + std::to_string(l), cin, al,
                            cfg.kernel);
    params.add("ahat" + std::to_string(l) + ".w",
               conv_init<T>(rng, al, al, cfg.kernel));
    params.add("ahat" + std::to_string(l) + ".b", Tensor<T>({al}));
    if (l >= 2) {
      const int below = cfg.channels[std::size_t(l - 2)];
      params.add("a" + std::to_string(l) + ".w",
                 conv_init<T>(rng, al, 2 * below, cfg.kernel));
      params.add("a" + std::to_string(l) + ".b", Tensor<T>({al}));
    }
  }
  int cin = cfg.channels[0];
  for (int i = 0; i < 9; ++i) {
    const std::string name = "critic.conv" + std::to_string(i);
    const int cout = cfg.critic_channels[std::size_t(i)];
    params.add(name + ".w", conv_init<T>(rng, cout, cin, i % 2 ? 4 : 3));
    params.add(name + ".b", Tensor<T>({cout}));
    add_spectral_buffers(params, rng, name + ".w");
    cin = cout;
  }
  params.add("critic.head.w",
             linear_init<T>(rng, cfg.classes() + 1, cfg.critic_feature_dim()));
  params.add("critic.head.b", Tensor<T>({cfg.classes() + 1}));
  add_spectral_buffers(params, rng, "critic.head.w");
  // Seed the v buffers so sigma is well-defined before any training step.
  for (int i = 0; i < 9; ++i)
    power_iterate(params, "critic.conv" + std::to_string(i) + ".w");
  power_iterate(params, "critic.head.w");
  return params;
}

// One power-iteration step on every critic weight; call once per training
// forward. Evaluation keeps the buffers frozen.
template <typename T>
void critic_power_iterate(ParamSet<T>& params, const SfamConfig& cfg) {
  (void)cfg;
  for (int i = 0; i < 9; ++i)
    power_iterate(params, "critic.conv" + std::to_string(i) + ".w");
  power_iterate(params, "critic.head.w");
}

namespace sfamdetail {

// Tile one command value per batch row into a [B,1,hL,wL] plane at the top
// layer's resolution.
template <typename T>
Tensor<T> command_tile(const SfamConfig& cfg, const std::vector<T>& us) {
  const int L = cfg.layers();
  const int h = cfg.layer_height(L), w = cfg.layer_width(L);
  const int B = int(us.size());
  Tensor<T> t({B, 1, h, w});
  for (int b = 0; b < B; ++b)
    std::fill(t.data.begin() + std::int64_t(b) * h * w,
              t.data.begin() + std::int64_t(b + 1) * h * w,
              us[std::size_t(b)]);
  return t;
}

template <typename T>
void check_frame(const Tensor<T>& f, const SfamConfig& cfg,
                 const char* what) {
  if (f.ndim() != 3 || f.dim(0) != cfg.channels[0] ||
      f.dim(1) != cfg.height || f.dim(2) != cfg.width)
    throw std::invalid_argument(std::string(what) + " must be (" +
                                std::to_string(cfg.channels[0]) + "," +
                                std::to_string(cfg.height) + "," +
                                std::to_string(cfg.width) + "), got " +
                                f.shape_str());
}

template <typename T>
Tensor<T> single_frame_batch(const Tensor<T>& f, const SfamConfig& cfg,
                             const char* what) {
  check_frame(f, cfg, what);
  return f.reshaped({1, cfg.channels[0], cfg.height, cfg.width});
}

}  // namespace sfamdetail

// ---- tape-level builders ----------------------------------------------------

// Rollout state on the tape: one LSTM (h, c) pair and one error tensor per
// layer, all [B, *, h_l, w_l].
template <typename T>
struct SfamState {
  std::vector<LstmState<T>> lstm;
  std::vector<typename Tape<T>::Id> err;
};

template <typename T>
SfamState<T> sfam_zero_state_op(Tape<T>& g, const SfamConfig& cfg, int B) {
  SfamState<T> st;
  for (int l = 1; l <= cfg.layers(); ++l) {
    const int al = cfg.channels[std::size_t(l - 1)];
    const int h = cfg.layer_height(l), w = cfg.layer_width(l);
    LstmState<T> s;
    s.h = g.constant(Tensor<T>({B, al, h, w}));
    s.c = g.constant(Tensor<T>({B, al, h, w}));
    st.lstm.push_back(s);
    st.err.push_back(g.constant(Tensor<T>({B, 2 * al, h, w})));
  }
  return st;
}

// One recurrence step. Top-down first: layer L's LSTM sees its previous
// error concatenated with the tiled command; lower layers see their previous
// error concatenated with the upsampled representation from above. Bottom-up
// second: predictions ahat^l = conv(R^l) (clamped to [0,1] at l = 1, ReLU
// above), targets A^1 = frame and A^l = maxpool(relu(conv(E^{l-1}))), errors
// E^l = [relu(ahat - A), relu(A - ahat)]. Returns the new state; *xhat_out
// (optional) receives ahat^1.
template <typename T>
SfamState<T> prednet_step_op(Tape<T>& g, ParamLeaves<T>& leaves,
                             const SfamConfig& cfg,
                             const SfamState<T>& st,
                             typename Tape<T>::Id frame,
                             typename Tape<T>::Id utile,
                             typename Tape<T>::Id* xhat_out) {
  using Id = typename Tape<T>::Id;
  const int L = cfg.layers();
  const int pad = cfg.kernel / 2;
  SfamState<T> next;
  next.lstm.resize(std::size_t(L));
  next.err.resize(std::size_t(L));
  std::vector<Id> r(static_cast<std::size_t>(L));
  for (int l = L; l >= 1; --l) {
    Id top = (l == L) ? utile : g.upsample2(r[std::size_t(l)]);
    Id inp = g.concat_channels({st.err[std::size_t(l - 1)], top});
    next.lstm[std::size_t(l - 1)] =
        conv_lstm_step(g, leaves, "lstm" + std::to_string(l), inp,
                       st.lstm[std::size_t(l - 1)], cfg.kernel);
    r[std::size_t(l - 1)] = next.lstm[std::size_t(l - 1)].h;
  }
  for (int l = 1; l <= L; ++l) {
    const std::string ls = std::to_string(l);
    Id pre = g.conv2d(r[std::size_t(l - 1)], leaves.use("ahat" + ls + ".w"),
                      leaves.use("ahat" + ls + ".b"), 1, pad);
    Id ahat = (l == 1) ? g.clamp(pre, T(0), T(1)) : g.relu(pre);
    Id target =
        (l == 1)
            ? frame
            : g.maxpool2(g.relu(g.conv2d(next.err[std::size_t(l - 2)],
                                         leaves.use("a" + ls + ".w"),
                                         leaves.use("a" + ls + ".b"), 1,
                                         pad)));
    next.err[std::size_t(l - 1)] = g.concat_channels(
        {g.relu(g.sub(ahat, target)), g.relu(g.sub(target, ahat))});
    if (l == 1 && xhat_out) *xhat_out = ahat;
  }
  return next;
}

template <typename T>
struct SfamRollout {
  typename Tape<T>::Id xhat;                // final-step prediction
  std::vector<typename Tape<T>::Id> errs;   // E^l per step, step-major
};

// Four steps from a zero state, feeding (frames[k], utiles[k]); the returned
// prediction is the final step's ahat^1, conditioned on utiles[3].
template <typename T>
SfamRollout<T> sfam_rollout_op(Tape<T>& g, ParamLeaves<T>& leaves,
                               const SfamConfig& cfg,
                               const std::array<typename Tape<T>::Id, 4>& frames,
                               const std::array<typename Tape<T>::Id, 4>& utiles) {
  const Tensor<T>& f0 = g.value(frames[0]);
  if (f0.ndim() != 4 || f0.dim(1) != cfg.channels[0] ||
      f0.dim(2) != cfg.height || f0.dim(3) != cfg.width)
    throw std::invalid_argument("sfam rollout: frame batch must be [B," +
                                std::to_string(cfg.channels[0]) + "," +
                                std::to_string(cfg.height) + "," +
                                std::to_string(cfg.width) + "], got " +
                                f0.shape_str());
  const int B = f0.dim(0);  // before building: node storage may reallocate
  SfamRollout<T> out;
  SfamState<T> st = sfam_zero_state_op(g, cfg, B);
  for (int k = 0; k < 4; ++k) {
    typename Tape<T>::Id xh = -1;
    st = prednet_step_op(g, leaves, cfg, st, frames[std::size_t(k)],
                         utiles[std::size_t(k)], &xh);
    for (auto e : st.err) out.errs.push_back(e);
    if (k == 3) out.xhat = xh;
  }
  return out;
}

// lambda_err * grand mean of all error entries + lambda_ssim * (-ssim(xhat,
// x_next)) + lambda_prev * ssim(xhat, x_prev), with x_prev = frames[3].
template <typename T>
typename Tape<T>::Id stage1_loss_op(Tape<T>& g, ParamLeaves<T>& leaves,
                                    const SfamConfig& cfg,
                                    const std::array<typename Tape<T>::Id, 4>& frames,
                                    const std::array<typename Tape<T>::Id, 4>& utiles,
                                    typename Tape<T>::Id x_next) {
  auto ro = sfam_rollout_op(g, leaves, cfg, frames, utiles);
  typename Tape<T>::Id acc = -1;
  std::int64_t count = 0;
  for (auto e : ro.errs) {
    auto s = g.reduce_sum_all(e);
    acc = (acc < 0) ? s : g.add(acc, s);
    count += g.value(e).numel();
  }
  auto err_mean = g.scale(acc, T(1) / T(count));
  auto s_next = ssim_op(g, ro.xhat, x_next, cfg.ssim_kernel);
  auto s_prev = ssim_op(g, ro.xhat, frames[3], cfg.ssim_kernel);
  return g.add(g.scale(err_mean, T(cfg.lambda_err)),
               g.add(g.scale(s_next, -T(cfg.lambda_ssim)),
                     g.scale(s_prev, T(cfg.lambda_prev))));
}

// Critic logits [B, classes+1] for a frame batch: nine spectrally normalized
// convolutions (3x3/1 and 4x4/2 alternating, LeakyReLU 0.1) and a spectrally
// normalized affine head. Logits 0..classes-1 score the grid actions,
// logits[classes] scores fake. Power iteration happens outside (see
// critic_power_iterate); this builder always uses the current buffers.
template <typename T>
typename Tape<T>::Id critic_logits_op(Tape<T>& g, ParamLeaves<T>& leaves,
                                      const ParamSet<T>& params,
                                      const SfamConfig& cfg,
                                      typename Tape<T>::Id x) {
  const Tensor<T>& xv = g.value(x);
  if (xv.ndim() != 4 || xv.dim(1) != cfg.channels[0] ||
      xv.dim(2) != cfg.height || xv.dim(3) != cfg.width)
    throw std::invalid_argument("critic: frame batch must be [B," +
                                std::to_string(cfg.channels[0]) + "," +
                                std::to_string(cfg.height) + "," +
                                std::to_string(cfg.width) + "], got " +
                                xv.shape_str());
  const int B = xv.dim(0);  // before building: node storage may reallocate
  auto h = x;
  for (int i = 0; i < 9; ++i) {
    const std::string name = "critic.conv" + std::to_string(i);
    auto w = sn_weight(g, leaves, params, name + ".w");
    h = g.leaky_relu(g.conv2d(h, w, leaves.use(name + ".b"), i % 2 ? 2 : 1, 1),
                     T(cfg.critic_slope));
  }
  auto flat = g.reshape(h, {B, cfg.critic_feature_dim()});
  auto wh = sn_weight(g, leaves, params, "critic.head.w");
  return g.linear(flat, wh, leaves.use("critic.head.b"));
}

// Batch-mean KL(U || posterior over the first `classes` logits)
//   = -log(classes) - mean over all entries of log_softmax(logits[:, :classes]).
template <typename T>
typename Tape<T>::Id kl_uniform_op(Tape<T>& g, typename Tape<T>::Id logits,
                                   int classes) {
  auto ls = g.log_softmax(g.slice_cols(logits, 0, classes));
  return g.add_const(g.scale(g.reduce_mean_all(ls), T(-1)),
                     -T(std::log(double(classes))));
}

// Critic update loss: CE(critic(real), action label) + CE(critic(xhat),
// fake). The prediction is produced by the frozen generator leaves and
// detached, so only critic parameters receive gradients.
template <typename T>
typename Tape<T>::Id stage2_critic_loss_op(
    Tape<T>& g, ParamLeaves<T>& leaves_critic, ParamLeaves<T>& leaves_gen,
    const ParamSet<T>& params, const SfamConfig& cfg,
    const std::array<typename Tape<T>::Id, 4>& frames,
    const std::array<typename Tape<T>::Id, 4>& utiles,
    typename Tape<T>::Id x_next, const std::vector<int>& labels) {
  auto ro = sfam_rollout_op(g, leaves_gen, cfg, frames, utiles);
  auto xhat = detach(g, ro.xhat);
  auto ce_real = g.softmax_cross_entropy(
      critic_logits_op(g, leaves_critic, params, cfg, x_next), labels);
  auto ce_fake = g.softmax_cross_entropy(
      critic_logits_op(g, leaves_critic, params, cfg, xhat),
      std::vector<int>(labels.size(), cfg.classes()));
  return g.add(ce_real, ce_fake);
}

// Generator update loss: w1 * CE(critic(xhat), commanded action label) +
// w2 * KL(U || action posterior). The critic leaves are frozen; gradients
// reach the generator only through xhat.
template <typename T>
typename Tape<T>::Id stage2_gen_loss_op(
    Tape<T>& g, ParamLeaves<T>& leaves_gen, ParamLeaves<T>& leaves_critic,
    const ParamSet<T>& params, const SfamConfig& cfg,
    const std::array<typename Tape<T>::Id, 4>& frames,
    const std::array<typename Tape<T>::Id, 4>& utiles,
    const std::vector<int>& labels, T w1, T w2) {
  auto ro = sfam_rollout_op(g, leaves_gen, cfg, frames, utiles);
  auto logits = critic_logits_op(g, leaves_critic, params, cfg, ro.xhat);
  auto ce = g.softmax_cross_entropy(logits, labels);
  auto kl = kl_uniform_op(g, logits, cfg.classes());
  return g.add(g.scale(ce, w1), g.scale(kl, w2));
}

// ---- host-level operations --------------------------------------------------

// Step-by-step rollout state held as host tensors (batch dimension 1).
template <typename T>
struct PrednetState {
  std::vector<Tensor<T>> h, c, e;
};

template <typename T>
PrednetState<T> zero_prednet_state(const SfamConfig& cfg) {
  cfg.validate();
  PrednetState<T> st;
  for (int l = 1; l <= cfg.layers(); ++l) {
    const int al = cfg.channels[std::size_t(l - 1)];
    const int h = cfg.layer_height(l), w = cfg.layer_width(l);
    st.h.push_back(Tensor<T>({1, al, h, w}));
    st.c.push_back(Tensor<T>({1, al, h, w}));
    st.e.push_back(Tensor<T>({1, 2 * al, h, w}));
  }
  return st;
}

// One recurrence step on host tensors; returns (new state, predicted frame).
template <typename T>
std::pair<PrednetState<T>, Tensor<T>> prednet_step(const PrednetState<T>& st,
                                                   const Tensor<T>& frame,
                                                   double command,
                                                   ParamSet<T>& params,
                                                   const SfamConfig& cfg) {
  cfg.validate();
  const int L = cfg.layers();
  if (int(st.h.size()) != L || int(st.c.size()) != L || int(st.e.size()) != L)
    throw std::invalid_argument("prednet_step: state has wrong layer count");
  for (int l = 1; l <= L; ++l) {
    const int al = cfg.channels[std::size_t(l - 1)];
    const int h = cfg.layer_height(l), w = cfg.layer_width(l);
    const Tensor<T>& hv = st.h[std::size_t(l - 1)];
    const Tensor<T>& cv = st.c[std::size_t(l - 1)];
    const Tensor<T>& ev = st.e[std::size_t(l - 1)];
    if (hv.ndim() != 4 || hv.dim(0) != 1 || hv.dim(1) != al ||
        hv.dim(2) != h || hv.dim(3) != w || !cv.same_shape(hv) ||
        ev.ndim() != 4 || ev.dim(0) != 1 || ev.dim(1) != 2 * al ||
        ev.dim(2) != h || ev.dim(3) != w)
      throw std::invalid_argument("prednet_step: bad state shape at layer " +
                                  std::to_string(l));
  }
  Tape<T> g;
  ParamLeaves<T> leaves(g, params, false);
  SfamState<T> tst;
  for (int l = 0; l < L; ++l) {
    LstmState<T> s;
    s.h = g.constant(st.h[std::size_t(l)]);
    s.c = g.constant(st.c[std::size_t(l)]);
    tst.lstm.push_back(s);
    tst.err.push_back(g.constant(st.e[std::size_t(l)]));
  }
  auto fb = g.constant(
      sfamdetail::single_frame_batch(frame, cfg, "prednet_step: frame"));
  auto ut = g.constant(
      sfamdetail::command_tile<T>(cfg, {T(command)}));
  typename Tape<T>::Id xh = -1;
  SfamState<T> nst = prednet_step_op(g, leaves, cfg, tst, fb, ut, &xh);
  PrednetState<T> out;
  for (int l = 0; l < L; ++l) {
    out.h.push_back(g.value(nst.lstm[std::size_t(l)].h));
    out.c.push_back(g.value(nst.lstm[std::size_t(l)].c));
    out.e.push_back(g.value(nst.err[std::size_t(l)]));
  }
  return {std::move(out),
          g.value(xh).reshaped({cfg.channels[0], cfg.height, cfg.width})};
}

// Predict x_{t+1} from frames x_{t-3:t} and commands u_{t-2:t+1}.
template <typename T>
Tensor<T> rollout_predict(const std::vector<Tensor<T>>& frames,
                          const std::vector<double>& commands,
                          ParamSet<T>& params, const SfamConfig& cfg) {
  cfg.validate();
  if (frames.size() != 4 || commands.size() != 4)
    throw std::invalid_argument(
        "rollout_predict: need 4 frames and 4 commands");
  Tape<T> g;
  ParamLeaves<T> leaves(g, params, false);
  std::array<typename Tape<T>::Id, 4> fids, uids;
  for (int k = 0; k < 4; ++k) {
    fids[std::size_t(k)] = g.constant(sfamdetail::single_frame_batch(
        frames[std::size_t(k)], cfg, "rollout_predict: frame"));
    uids[std::size_t(k)] = g.constant(
        sfamdetail::command_tile<T>(cfg, {T(commands[std::size_t(k)])}));
  }
  auto ro = sfam_rollout_op(g, leaves, cfg, fids, uids);
  return g.value(ro.xhat)
      .reshaped({cfg.channels[0], cfg.height, cfg.width});
}

// Stage-1 loss from precomputed pieces (single sample, host arithmetic).
template <typename T>
double stage1_loss(const Tensor<T>& xhat, const Tensor<T>& x_next,
                   const Tensor<T>& x_prev,
                   const std::vector<Tensor<T>>& error_reps,
                   const SfamConfig& cfg) {
  double sum = 0.0;
  std::int64_t count = 0;
  for (const auto& e : error_reps) {
    for (auto v : e.data) sum += double(v);
    count += e.numel();
  }
  const double err_mean = count ? sum / double(count) : 0.0;
  return cfg.lambda_err * err_mean -
         cfg.lambda_ssim * ssim(xhat, x_next, cfg.ssim_kernel) +
         cfg.lambda_prev * ssim(xhat, x_prev, cfg.ssim_kernel);
}

// Evaluation-mode critic logits for one frame (frozen singular vectors).
template <typename T>
std::vector<T> critic_logits(const Tensor<T>& frame, ParamSet<T>& params,
                             const SfamConfig& cfg) {
  cfg.validate();
  Tape<T> g;
  ParamLeaves<T> leaves(g, params, false);
  auto xb = g.constant(
      sfamdetail::single_frame_batch(frame, cfg, "critic_logits: frame"));
  auto logits = critic_logits_op(g, leaves, params, cfg, xb);
  const Tensor<T>& lv = g.value(logits);
  return std::vector<T>(lv.data.begin(), lv.data.end());
}

// KL(U || p) over an explicit action posterior, p clamped below at 1e-12.
inline double kl_uniform(const std::vector<double>& probs) {
  if (probs.empty()) throw std::invalid_argument("kl_uniform: empty");
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0)) throw std::invalid_argument("kl_uniform: negative prob");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6)
    throw std::invalid_argument("kl_uniform: probs must sum to 1");
  const double q = 1.0 / double(probs.size());
  double kl = 0.0;
  for (double p : probs) kl += q * std::log(q / std::max(p, 1e-12));
  return kl;
}

namespace sfamdetail {

template <typename T>
struct WindowBatch {
  std::array<Tensor<T>, 4> frames;  // [B, c0, H, W]
  std::array<Tensor<T>, 4> utiles;  // [B, 1, hL, wL]
  Tensor<T> target;                 // [B, c0, H, W]
  std::vector<int> labels;          // nearest grid index of u_{t+1}
};

template <typename T>
WindowBatch<T> window_batch(const std::vector<TrainingWindow>& windows,
                            const std::vector<int>& order, int b0, int B,
                            const SfamConfig& cfg, const ActionGrid& grid) {
  const int c0 = cfg.channels[0];
  const std::int64_t fsz = std::int64_t(c0) * cfg.height * cfg.width;
  WindowBatch<T> batch;
  for (auto& f : batch.frames) f = Tensor<T>({B, c0, cfg.height, cfg.width});
  batch.target = Tensor<T>({B, c0, cfg.height, cfg.width});
  std::array<std::vector<T>, 4> us;
  for (auto& u : us) u.resize(std::size_t(B));
  batch.labels.resize(std::size_t(B));
  for (int i = 0; i < B; ++i) {
    const TrainingWindow& w =
        windows[std::size_t(order[std::size_t(b0 + i)])];
    for (int k = 0; k < 4; ++k) {
      const Frame& f = w.frames[std::size_t(k)];
      std::transform(f.data.begin(), f.data.end(),
                     batch.frames[std::size_t(k)].data.begin() + i * fsz,
                     [](float v) { return T(v); });
      us[std::size_t(k)][std::size_t(i)] = T(w.commands[std::size_t(k)]);
    }
    std::transform(w.target.data.begin(), w.target.data.end(),
                   batch.target.data.begin() + i * fsz,
                   [](float v) { return T(v); });
    batch.labels[std::size_t(i)] =
        nearest_action_index(w.commands[3], grid);
  }
  for (int k = 0; k < 4; ++k)
    batch.utiles[std::size_t(k)] = command_tile<T>(cfg, us[std::size_t(k)]);
  return batch;
}

template <typename T>
void check_window(const TrainingWindow& w, const SfamConfig& cfg) {
  for (const Frame& f : w.frames)
    if (f.ndim() != 3 || f.dim(0) != cfg.channels[0] ||
        f.dim(1) != cfg.height || f.dim(2) != cfg.width)
      throw std::invalid_argument("sfam: window frame shape " +
                                  f.shape_str() + " does not match config");
  if (w.target.ndim() != 3 || w.target.dim(0) != cfg.channels[0] ||
      w.target.dim(1) != cfg.height || w.target.dim(2) != cfg.width)
    throw std::invalid_argument("sfam: window target shape " +
                                w.target.shape_str() +
                                " does not match config");
}

}  // namespace sfamdetail

// Evaluation-mode stage-2 losses on one explicit batch with fixed mixing
// weights; no parameter or buffer mutation.
template <typename T>
std::pair<double, double> stage2_losses(
    const std::vector<TrainingWindow>& batch, ParamSet<T>& params,
    const SfamConfig& cfg, T w1, T w2) {
  cfg.validate();
  if (batch.empty()) throw std::invalid_argument("stage2_losses: empty batch");
  for (const auto& w : batch) sfamdetail::check_window<T>(w, cfg);
  std::vector<int> order(batch.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = int(i);
  const ActionGrid grid = cfg.grid();
  auto wb = sfamdetail::window_batch<T>(batch, order, 0, int(batch.size()),
                                        cfg, grid);
  Tape<T> g;
  ParamLeaves<T> leaves(g, params, false);
  std::array<typename Tape<T>::Id, 4> fids, uids;
  for (int k = 0; k < 4; ++k) {
    fids[std::size_t(k)] = g.constant(wb.frames[std::size_t(k)]);
    uids[std::size_t(k)] = g.constant(wb.utiles[std::size_t(k)]);
  }
  auto ro = sfam_rollout_op(g, leaves, cfg, fids, uids);
  auto logits_fake = critic_logits_op(g, leaves, params, cfg, ro.xhat);
  auto logits_real =
      critic_logits_op(g, leaves, params, cfg, g.constant(wb.target));
  auto ce_real = g.softmax_cross_entropy(logits_real, wb.labels);
  auto ce_fake = g.softmax_cross_entropy(
      logits_fake, std::vector<int>(wb.labels.size(), cfg.classes()));
  auto l_critic = g.add(ce_real, ce_fake);
  auto ce_gen = g.softmax_cross_entropy(logits_fake, wb.labels);
  auto kl = kl_uniform_op(g, logits_fake, cfg.classes());
  auto l_gen = g.add(g.scale(ce_gen, w1), g.scale(kl, w2));
  return {double(g.value(l_critic)[0]), double(g.value(l_gen)[0])};
}

struct SfamStageLog {
  int epoch = 0;
  double loss = 0.0;
};

struct SfamAdvLog {
  int epoch = 0;
  double loss_critic = 0.0;
  double loss_gen = 0.0;
};

template <typename T>
struct SfamTrainResult {
  ParamSet<T> params;
  std::vector<SfamStageLog> stage1;
  std::vector<SfamAdvLog> stage2;
};

// Two-stage training. Stage 1 minimizes stage1_loss with Adam; stage 2
// alternates one critic and one generator Adam step per batch, with one
// power-iteration step before each training forward and fresh uniform
// mixing weights per generator update. Reproducible for a fixed seed.
template <typename T>
SfamTrainResult<T> train_sfam(const std::vector<TrainingWindow>& windows,
                              const SfamConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (windows.empty()) throw std::invalid_argument("train_sfam: no windows");
  for (const auto& w : windows) sfamdetail::check_window<T>(w, cfg);

  Rng root(seed);
  Rng init_rng = root.fork(1);
  Rng order_rng = root.fork(2);
  Rng mix_rng = root.fork(3);

  SfamTrainResult<T> result;
  result.params = init_sfam_params<T>(cfg, init_rng);
  ParamSet<T>& params = result.params;
  const ActionGrid grid = cfg.grid();

  const int n = int(windows.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[std::size_t(i)] = i;

  Adam<T> opt1(T(cfg.learning_rate));
  for (int epoch = 0; epoch < cfg.stage1_epochs; ++epoch) {
    order_rng.shuffle(order);
    double sum = 0.0;
    int batches = 0;
    for (int b0 = 0; b0 < n; b0 += cfg.batch_size) {
      const int B = std::min(cfg.batch_size, n - b0);
      auto wb = sfamdetail::window_batch<T>(windows, order, b0, B, cfg, grid);
      Tape<T> g;
      ParamLeaves<T> leaves(g, params, true);
      std::array<typename Tape<T>::Id, 4> fids, uids;
      for (int k = 0; k < 4; ++k) {
        fids[std::size_t(k)] = g.constant(wb.frames[std::size_t(k)]);
        uids[std::size_t(k)] = g.constant(wb.utiles[std::size_t(k)]);
      }
      auto loss = stage1_loss_op(g, leaves, cfg, fids, uids,
                                 g.constant(wb.target));
      const double lv = double(g.value(loss)[0]);
      if (!std::isfinite(lv))
        throw DivergenceError("train_sfam: non-finite stage-1 loss at epoch " +
                              std::to_string(epoch) + " batch " +
                              std::to_string(batches) + ": " +
                              std::to_string(lv));
      g.backward(loss);
      opt1.step(params, leaves.gradients());
      sum += lv;
      ++batches;
    }
    result.stage1.push_back({epoch, sum / double(batches)});
  }

  Adam<T> opt_c(T(cfg.adv_learning_rate));
  Adam<T> opt_g(T(cfg.adv_learning_rate));
  for (int epoch = 0; epoch < cfg.stage2_epochs; ++epoch) {
    order_rng.shuffle(order);
    double sum_c = 0.0, sum_g = 0.0;
    int batches = 0;
    for (int b0 = 0; b0 < n; b0 += cfg.batch_size) {
      const int B = std::min(cfg.batch_size, n - b0);
      auto wb = sfamdetail::window_batch<T>(windows, order, b0, B, cfg, grid);
      double lc, lg;
      {
        critic_power_iterate(params, cfg);
        Tape<T> g;
        ParamLeaves<T> leaves_c(g, params, true);
        ParamLeaves<T> leaves_gen(g, params, false);
        std::array<typename Tape<T>::Id, 4> fids, uids;
        for (int k = 0; k < 4; ++k) {
          fids[std::size_t(k)] = g.constant(wb.frames[std::size_t(k)]);
          uids[std::size_t(k)] = g.constant(wb.utiles[std::size_t(k)]);
        }
        auto loss = stage2_critic_loss_op(g, leaves_c, leaves_gen, params,
                                          cfg, fids, uids,
                                          g.constant(wb.target), wb.labels);
        lc = double(g.value(loss)[0]);
        g.backward(loss);
        opt_c.step(params, leaves_c.gradients());
      }
      {
        critic_power_iterate(params, cfg);
        const T w1 = T(mix_rng.uniform());
        const T w2 = T(mix_rng.uniform());
        Tape<T> g;
        ParamLeaves<T> leaves_gen(g, params, true);
        ParamLeaves<T> leaves_c(g, params, false);
        std::array<typename Tape<T>::Id, 4> fids, uids;
        for (int k = 0; k < 4; ++k) {
          fids[std::size_t(k)] = g.constant(wb.frames[std::size_t(k)]);
          uids[std::size_t(k)] = g.constant(wb.utiles[std::size_t(k)]);
        }
        auto loss = stage2_gen_loss_op(g, leaves_gen, leaves_c, params, cfg,
                                       fids, uids, wb.labels, w1, w2);
        lg = double(g.value(loss)[0]);
        g.backward(loss);
        opt_g.step(params, leaves_gen.gradients());
      }
      if (!std::isfinite(lc) || !std::isfinite(lg))
        throw DivergenceError("train_sfam: non-finite stage-2 loss at epoch " +
                              std::to_string(epoch) + " batch " +
                              std::to_string(batches) + ": L_critic=" +
                              std::to_string(lc) + " L_gen=" +
                              std::to_string(lg));
      sum_c += lc;
      sum_g += lg;
      ++batches;
    }
    result.stage2.push_back(
        {epoch, sum_c / double(batches), sum_g / double(batches)});
  }
  return result;
}

// Predictions conditioned on every grid action. The three prefix steps run
// once at batch size 1; the final step is evaluated for all branches at once
// after repeating the shared state. Only the final step's top-down pass and
// the layer-1 prediction conv are needed, since ahat^1 depends solely on R^1.
template <typename T>
std::vector<Tensor<T>> conditioned_predictions(
    const std::vector<Tensor<T>>& frames, const std::vector<double>& commands,
    const ActionGrid& grid, ParamSet<T>& params, const SfamConfig& cfg) {
  cfg.validate();
  if (frames.size() != 4 || commands.size() != 3)
    throw std::invalid_argument(
        "conditioned_predictions: need 4 frames and 3 commands");
  if (grid.n < 2 || grid.values.size() != std::size_t(grid.n))
    throw std::invalid_argument("conditioned_predictions: bad grid");
  using Id = typename Tape<T>::Id;
  const int L = cfg.layers();
  const int pad = cfg.kernel / 2;
  Tape<T> g;
  ParamLeaves<T> leaves(g, params, false);
  SfamState<T> st = sfam_zero_state_op(g, cfg, 1);
  for (int k = 0; k < 3; ++k) {
    auto fb = g.constant(sfamdetail::single_frame_batch(
        frames[std::size_t(k)], cfg, "conditioned_predictions: frame"));
    auto ut = g.constant(
        sfamdetail::command_tile<T>(cfg, {T(commands[std::size_t(k)])}));
    st = prednet_step_op(g, leaves, cfg, st, fb, ut, nullptr);
  }
  sfamdetail::check_frame(frames[3], cfg, "conditioned_predictions: frame");
  SfamState<T> bst;
  for (int l = 0; l < L; ++l) {
    LstmState<T> s;
    s.h = g.repeat_batch(st.lstm[std::size_t(l)].h, grid.n);
    s.c = g.repeat_batch(st.lstm[std::size_t(l)].c, grid.n);
    bst.lstm.push_back(s);
    bst.err.push_back(g.repeat_batch(st.err[std::size_t(l)], grid.n));
  }
  std::vector<T> us(std::size_t(grid.n));
  for (int i = 0; i < grid.n; ++i) us[std::size_t(i)] = T(grid.values[std::size_t(i)]);
  auto utile = g.constant(sfamdetail::command_tile<T>(cfg, us));
  std::vector<Id> r(static_cast<std::size_t>(L));
  for (int l = L; l >= 1; --l) {
    Id top = (l == L) ? utile : g.upsample2(r[std::size_t(l)]);
    Id inp = g.concat_channels({bst.err[std::size_t(l - 1)], top});
    LstmState<T> s =
        conv_lstm_step(g, leaves, "lstm" + std::to_string(l), inp,
                       bst.lstm[std::size_t(l - 1)], cfg.kernel);
    r[std::size_t(l - 1)] = s.h;
  }
  auto xhat = g.clamp(g.conv2d(r[0], leaves.use("ahat1.w"),
                               leaves.use("ahat1.b"), 1, pad),
                      T(0), T(1));
  const Tensor<T>& xv = g.value(xhat);
  const std::int64_t fsz =
      std::int64_t(cfg.channels[0]) * cfg.height * cfg.width;
  std::vector<Tensor<T>> out;
  out.reserve(std::size_t(grid.n));
  for (int i = 0; i < grid.n; ++i) {
    Tensor<T> f({cfg.channels[0], cfg.height, cfg.width});
    std::copy(xv.data.begin() + i * fsz, xv.data.begin() + (i + 1) * fsz,
              f.data.begin());
    out.push_back(std::move(f));
  }
  return out;
}

struct DissimilarityProfile {
  ActionGrid grid;
  std::vector<double> dssims;
};

template <typename T>
DissimilarityProfile dissimilarity_profile(
    const std::vector<Tensor<T>>& predictions, const Tensor<T>& actual_next,
    const ActionGrid& grid, int kernel = 5) {
  if (predictions.size() != std::size_t(grid.n))
    throw std::invalid_argument(
        "dissimilarity_profile: prediction count does not match grid");
  DissimilarityProfile p{grid, std::vector<double>(predictions.size())};
  for (std::size_t i = 0; i < predictions.size(); ++i)
    p.dssims[i] = dssim(predictions[i], actual_next, kernel);
  return p;
}

// |u_actual - grid action of the least dissimilar prediction|; argmin ties
// break toward the lower index.
inline double sfam_deviation(const DissimilarityProfile& profile,
                             double u_actual) {
  if (profile.dssims.size() != std::size_t(profile.grid.n) ||
      profile.grid.n < 2)
    throw std::invalid_argument("sfam_deviation: profile/grid mismatch");
  std::size_t best = 0;
  for (std::size_t i = 1; i < profile.dssims.size(); ++i)
    if (profile.dssims[i] < profile.dssims[best]) best = i;
  return std::abs(u_actual - profile.grid.values[best]);
}

}  // namespace loopmon
