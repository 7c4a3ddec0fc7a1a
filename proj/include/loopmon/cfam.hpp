// Image-conditioned energy-based GAN for command plausibility monitoring.
// The discriminator scores a (command, frame) pair with the squared gap
// between the command and an internally predicted command; the generator
// proposes commands from noise + frame and trains the discriminator's margin
// hinge. Anomaly scoring sweeps the discriminator over an action grid.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "loopmon/configfile.hpp"
#include "loopmon/errors.hpp"
#include "loopmon/graph.hpp"
#include "loopmon/metrics.hpp"
#include "loopmon/nn.hpp"
#include "loopmon/rng.hpp"
#include "loopmon/tensor.hpp"

namespace loopmon {

struct CfamConfig {
  int image_size = 64;  // square input, divisible by 2^(conv layers)
  std::vector<int> conv_channels = {8, 16, 32, 64, 128, 256};
  int kernel = 4;
  int stride = 2;
  double leaky_slope = 0.2;
  int noise_dim = 100;
  double margin = 1.0;
  int hidden_dim = 512;
  double learning_rate = 2e-4;
  int batch_size = 32;
  int epochs = 10;

  int layers() const { return int(conv_channels.size()); }
  int pad() const { return (kernel - 2) / 2; }
  int final_spatial() const { return image_size >> layers(); }
  int feature_dim() const {
    return conv_channels.back() * final_spatial() * final_spatial();
  }

  void validate() const {
    if (conv_channels.empty())
      throw std::invalid_argument("cfam config: no conv channels");
    for (int c : conv_channels)
      if (c <= 0) throw std::invalid_argument("cfam config: bad channel count");
    if (kernel < 2 || kernel % 2 != 0 || stride != 2)
      throw std::invalid_argument(
          "cfam config: kernel must be even >= 2, stride 2");
    const int down = 1 << layers();
    if (image_size < down || image_size % down != 0)
      throw std::invalid_argument(
          "cfam config: image_size must be divisible by 2^layers");
    if (margin <= 0.0) throw std::invalid_argument("cfam config: margin <= 0");
    if (noise_dim < 1 || hidden_dim < 1)
      throw std::invalid_argument("cfam config: bad head dimensions");
    if (learning_rate <= 0.0 || batch_size < 1 || epochs < 0)
      throw std::invalid_argument("cfam config: bad training settings");
  }
};

inline KeyValues cfam_config_to(const CfamConfig& c) {
  KeyValues kv;
  kv.set("image_size", c.image_size);
  std::string chans;
  for (std::size_t i = 0; i < c.conv_channels.size(); ++i) {
    if (i) chans += ',';
    chans += std::to_string(c.conv_channels[i]);
  }
  kv.set("conv_channels", chans);
  kv.set("kernel", c.kernel);
  kv.set("stride", c.stride);
  kv.set("leaky_slope", c.leaky_slope);
  kv.set("noise_dim", c.noise_dim);
  kv.set("margin", c.margin);
  kv.set("hidden_dim", c.hidden_dim);
  kv.set("learning_rate", c.learning_rate);
  kv.set("batch_size", c.batch_size);
  kv.set("epochs", c.epochs);
  return kv;
}

inline CfamConfig cfam_config_from(const KeyValues& kv) {
  CfamConfig c;
  c.image_size = kv.get_int("image_size", c.image_size);
  const std::string chans = kv.get_string("conv_channels", "");
  if (!chans.empty()) {
    c.conv_channels.clear();
    std::size_t pos = 0;
    while (pos <= chans.size()) {
      auto comma = chans.find(',', pos);
      if (comma == std::string::npos) comma = chans.size();
      const std::string tok = chans.substr(pos, comma - pos);
      std::size_t used = 0;
      int v = 0;
      try {
        v = std::stoi(tok, &used);
      } catch (const std::exception&) {
        throw FormatError("cfam config: bad conv_channels entry: " + tok);
      }
      if (used != tok.size())
        throw FormatError("cfam config: bad conv_channels entry: " + tok);
      c.conv_channels.push_back(v);
      pos = comma + 1;
    }
  }
  c.kernel = kv.get_int("kernel", c.kernel);
  c.stride = kv.get_int("stride", c.stride);
  c.leaky_slope = kv.get_double("leaky_slope", c.leaky_slope);
  c.noise_dim = kv.get_int("noise_dim", c.noise_dim);
  c.margin = kv.get_double("margin", c.margin);
  c.hidden_dim = kv.get_int("hidden_dim", c.hidden_dim);
  c.learning_rate = kv.get_double("learning_rate", c.learning_rate);
  c.batch_size = kv.get_int("batch_size", c.batch_size);
  c.epochs = kv.get_int("epochs", c.epochs);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(e.what());
  }
  return c;
}

// Parameter names are "<net>.<layer>.<tensor>" with net "g" (generator) or
// "d" (discriminator); the two condition-image encoders are independent.
template <typename T>
ParamSet<T> init_cfam_params(const CfamConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamSet<T> params;
  const int F = cfg.feature_dim();
  for (const char* net : {"g", "d"}) {
    int cin = 3;
    for (int i = 0; i < cfg.layers(); ++i) {
      const std::string layer = std::string(net) + ".enc" + std::to_string(i);
      if (i > 0) add_batch_norm_params<T>(params, layer + ".bn", cin);
      params.add(layer + ".w",
                 conv_init<T>(rng, cfg.conv_channels[std::size_t(i)], cin,
                              cfg.kernel));
      params.add(layer + ".b",
                 Tensor<T>({cfg.conv_channels[std::size_t(i)]}));
      cin = cfg.conv_channels[std::size_t(i)];
    }
    const std::string n(net);
    params.add(n + ".fc1.w", linear_init<T>(rng, cfg.hidden_dim, F));
    params.add(n + ".fc1.b", Tensor<T>({cfg.hidden_dim}));
    params.add(n + ".out.w", linear_init<T>(rng, 1, cfg.hidden_dim));
    params.add(n + ".out.b", Tensor<T>({1}));
  }
  params.add("g.zproj.w", linear_init<T>(rng, F, cfg.noise_dim));
  params.add("g.zproj.b", Tensor<T>({F}));
  params.add("d.embed.w", linear_init<T>(rng, F, 1));
  params.add("d.embed.b", Tensor<T>({F}));
  return params;
}

// ---- tape-level builders ----------------------------------------------------

// Condition-image encoder: BN (except first layer) -> 4x4/2 conv -> LeakyReLU,
// flattened to [B, feature_dim].
template <typename T>
typename Tape<T>::Id cfam_encode(Tape<T>& g, ParamLeaves<T>& leaves,
                                 ParamSet<T>& params, const CfamConfig& cfg,
                                 const std::string& net,
                                 typename Tape<T>::Id x, bool training,
                                 bool update_stats) {
  const Tensor<T>& xv = g.value(x);
  if (xv.ndim() != 4 || xv.dim(1) != 3 || xv.dim(2) != cfg.image_size ||
      xv.dim(3) != cfg.image_size)
    throw std::invalid_argument("cfam: frame batch must be [B,3," +
                                std::to_string(cfg.image_size) + "," +
                                std::to_string(cfg.image_size) + "], got " +
                                xv.shape_str());
  const int B = xv.dim(0);
  auto h = x;
  for (int i = 0; i < cfg.layers(); ++i) {
    const std::string layer = net + ".enc" + std::to_string(i);
    if (i > 0)
      h = batch_norm(g, leaves, params, layer + ".bn", h, training,
                     update_stats);
    h = g.conv2d(h, leaves.use(layer + ".w"), leaves.use(layer + ".b"),
                 cfg.stride, cfg.pad());
    h = g.leaky_relu(h, T(cfg.leaky_slope));
  }
  return g.reshape(h, {B, cfg.feature_dim()});
}

// Fusion head shared by both networks: an embedded conditioning vector is
// summed with the image features, then hidden LeakyReLU and a Tanh neuron.
template <typename T>
typename Tape<T>::Id cfam_head(Tape<T>& g, ParamLeaves<T>& leaves,
                               const CfamConfig& cfg, const std::string& net,
                               typename Tape<T>::Id feat,
                               typename Tape<T>::Id embedded) {
  auto s = g.add(feat, embedded);
  auto h = g.leaky_relu(
      g.linear(s, leaves.use(net + ".fc1.w"), leaves.use(net + ".fc1.b")),
      T(cfg.leaky_slope));
  return g.tanh_(
      g.linear(h, leaves.use(net + ".out.w"), leaves.use(net + ".out.b")));
}

// Generated command batch [B,1] from noise z [B,noise_dim] and frames x.
template <typename T>
typename Tape<T>::Id cfam_generator_op(Tape<T>& g, ParamLeaves<T>& leaves,
                                       ParamSet<T>& params,
                                       const CfamConfig& cfg,
                                       typename Tape<T>::Id x,
                                       typename Tape<T>::Id z, bool training,
                                       bool update_stats) {
  const Tensor<T>& zv = g.value(z);
  if (zv.ndim() != 2 || zv.dim(1) != cfg.noise_dim)
    throw std::invalid_argument("cfam: noise batch must be [B," +
                                std::to_string(cfg.noise_dim) + "], got " +
                                zv.shape_str());
  auto feat = cfam_encode(g, leaves, params, cfg, "g", x, training,
                          update_stats);
  auto proj =
      g.linear(z, leaves.use("g.zproj.w"), leaves.use("g.zproj.b"));
  return cfam_head(g, leaves, cfg, "g", feat, proj);
}

// Discriminator energies [B,1] = (u - p(u, x))^2 given encoded features.
template <typename T>
typename Tape<T>::Id cfam_energy_from_features(Tape<T>& g,
                                               ParamLeaves<T>& leaves,
                                               const CfamConfig& cfg,
                                               typename Tape<T>::Id feat,
                                               typename Tape<T>::Id u) {
  auto emb = g.linear(u, leaves.use("d.embed.w"), leaves.use("d.embed.b"));
  auto p = cfam_head(g, leaves, cfg, "d", feat, emb);
  auto diff = g.sub(u, p);
  return g.mul(diff, diff);
}

template <typename T>
typename Tape<T>::Id cfam_energy_op(Tape<T>& g, ParamLeaves<T>& leaves,
                                    ParamSet<T>& params, const CfamConfig& cfg,
                                    typename Tape<T>::Id x,
                                    typename Tape<T>::Id u, bool training,
                                    bool update_stats) {
  auto feat = cfam_encode(g, leaves, params, cfg, "d", x, training,
                          update_stats);
  return cfam_energy_from_features(g, leaves, cfg, feat, u);
}

// Discriminator-step loss: mean over the batch of
//   D(u,x) + max(0, m - D(G(z),x)).
// Bind discriminator parameters through leaves_d (trainable) and generator
// parameters through leaves_g (frozen): the generated sample then carries no
// gradient, matching the detached-sample contract.
template <typename T>
typename Tape<T>::Id cebgan_loss_d_op(Tape<T>& g, ParamLeaves<T>& leaves_d,
                                      ParamLeaves<T>& leaves_g,
                                      ParamSet<T>& params,
                                      const CfamConfig& cfg,
                                      typename Tape<T>::Id x,
                                      typename Tape<T>::Id u,
                                      typename Tape<T>::Id z, bool training,
                                      bool update_stats) {
  auto u_gen = cfam_generator_op(g, leaves_g, params, cfg, x, z, training,
                                 /*update_stats=*/false);
  auto u_fake = g.constant(g.value(u_gen));
  auto feat = cfam_encode(g, leaves_d, params, cfg, "d", x, training,
                          update_stats);
  auto e_true = cfam_energy_from_features(g, leaves_d, cfg, feat, u);
  auto e_fake = cfam_energy_from_features(g, leaves_d, cfg, feat, u_fake);
  auto hinge = g.relu(g.add_const(g.scale(e_fake, T(-1)), T(cfg.margin)));
  return g.reduce_mean_all(g.add(e_true, hinge));
}

// Generator-step loss: mean over the batch of D(G(z),x). Bind generator
// parameters through leaves_g (trainable) and discriminator parameters
// through leaves_d (frozen) so the step cannot move the discriminator.
template <typename T>
typename Tape<T>::Id cebgan_loss_g_op(Tape<T>& g, ParamLeaves<T>& leaves_g,
                                      ParamLeaves<T>& leaves_d,
                                      ParamSet<T>& params,
                                      const CfamConfig& cfg,
                                      typename Tape<T>::Id x,
                                      typename Tape<T>::Id z, bool training,
                                      bool update_stats) {
  auto u_gen = cfam_generator_op(g, leaves_g, params, cfg, x, z, training,
                                 update_stats);
  auto feat = cfam_encode(g, leaves_d, params, cfg, "d", x, training,
                          /*update_stats=*/false);
  auto e_fake = cfam_energy_from_features(g, leaves_d, cfg, feat, u_gen);
  return g.reduce_mean_all(e_fake);
}

// ---- host-level operations ---------------------------------------------------

namespace cfamdetail {

template <typename T>
Tensor<T> single_frame_batch(const Tensor<T>& x, const CfamConfig& cfg) {
  if (x.ndim() != 3 || x.dim(0) != 3 || x.dim(1) != cfg.image_size ||
      x.dim(2) != cfg.image_size)
    throw std::invalid_argument("cfam: frame must be (3," +
                                std::to_string(cfg.image_size) + "," +
                                std::to_string(cfg.image_size) + "), got " +
                                x.shape_str());
  return x.reshaped({1, 3, cfg.image_size, cfg.image_size});
}

}  // namespace cfamdetail

// Deterministic generated command in (-1, 1); evaluation-mode normalization.
template <typename T>
T generator_forward(const Tensor<T>& z, const Tensor<T>& x,
                    ParamSet<T>& params, const CfamConfig& cfg) {
  if (z.numel() != cfg.noise_dim)
    throw std::invalid_argument("cfam: noise must have noise_dim entries");
  Tape<T> g;
  ParamLeaves<T> leaves(g, params, false);
  auto xb = g.constant(cfamdetail::single_frame_batch(x, cfg));
  auto zb = g.constant(z.reshaped({1, cfg.noise_dim}));
  auto u = cfam_generator_op(g, leaves, params, cfg, xb, zb, false, false);
  return g.value(u)[0];
}

// Energy (u - p)^2 >= 0 of a (command, frame) pair; evaluation mode.
template <typename T>
T discriminator_energy(T u, const Tensor<T>& x, ParamSet<T>& params,
                       const CfamConfig& cfg) {
  Tape<T> g;
  ParamLeaves<T> leaves(g, params, false);
  auto xb = g.constant(cfamdetail::single_frame_batch(x, cfg));
  auto ub = g.constant(Tensor<T>({1, 1}, {u}));
  auto e = cfam_energy_op(g, leaves, params, cfg, xb, ub, false, false);
  return g.value(e)[0];
}

// Loss values for one (u, z, x) triple at margin m; evaluation mode.
template <typename T>
std::pair<T, T> cebgan_losses(T u, const Tensor<T>& z, const Tensor<T>& x,
                              ParamSet<T>& params, const CfamConfig& cfg,
                              T m) {
  if (m <= T(0)) throw std::invalid_argument("cebgan_losses: margin <= 0");
  const T u_gen = generator_forward(z, x, params, cfg);
  const T e_true = discriminator_energy(u, x, params, cfg);
  const T e_fake = discriminator_energy(u_gen, x, params, cfg);
  const T hinge = std::max(T(0), m - e_fake);
  return {e_true + hinge, e_fake};
}

struct CfamEpochLog {
  int epoch = 0;
  double loss_d = 0.0;
  double loss_g = 0.0;
};

template <typename T>
struct CfamTrainResult {
  ParamSet<T> params;
  std::vector<CfamEpochLog> log;
};

// Alternating per-batch discriminator/generator Adam steps. Reproducible for
// a fixed seed.
template <typename T>
CfamTrainResult<T> train_cfam(const std::vector<std::pair<Tensor<T>, T>>& pairs,
                              const CfamConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (pairs.empty()) throw std::invalid_argument("train_cfam: no pairs");
  for (const auto& [frame, u] : pairs)
    (void)cfamdetail::single_frame_batch(frame, cfg), (void)u;

  Rng root(seed);
  Rng init_rng = root.fork(1);
  Rng order_rng = root.fork(2);
  Rng noise_rng = root.fork(3);

  CfamTrainResult<T> result;
  result.params = init_cfam_params<T>(cfg, init_rng);
  ParamSet<T>& params = result.params;
  Adam<T> opt_d(T(cfg.learning_rate));
  Adam<T> opt_g(T(cfg.learning_rate));

  const int n = int(pairs.size());
  const int S = cfg.image_size;
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[std::size_t(i)] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    double sum_d = 0.0, sum_g = 0.0;
    int batches = 0;
    for (int b0 = 0; b0 < n; b0 += cfg.batch_size) {
      const int B = std::min(cfg.batch_size, n - b0);
      Tensor<T> xb({B, 3, S, S});
      Tensor<T> ub({B, 1});
      for (int i = 0; i < B; ++i) {
        const auto& [frame, u] = pairs[std::size_t(order[std::size_t(b0 + i)])];
        std::copy(frame.data.begin(), frame.data.end(),
                  xb.data.begin() + std::int64_t(i) * 3 * S * S);
        ub[i] = u;
      }
      Tensor<T> zb({B, cfg.noise_dim});
      for (auto& v : zb.data) v = T(noise_rng.uniform());

      double ld, lg;
      {
        Tape<T> g;
        ParamLeaves<T> leaves_d(g, params, true);
        ParamLeaves<T> leaves_g(g, params, false);
        auto loss = cebgan_loss_d_op(g, leaves_d, leaves_g, params, cfg,
                                     g.constant(xb), g.constant(ub),
                                     g.constant(zb), true, true);
        ld = double(g.value(loss)[0]);
        g.backward(loss);
        opt_d.step(params, leaves_d.gradients());
      }
      {
        Tape<T> g;
        ParamLeaves<T> leaves_g(g, params, true);
        ParamLeaves<T> leaves_d(g, params, false);
        auto loss = cebgan_loss_g_op(g, leaves_g, leaves_d, params, cfg,
                                     g.constant(xb), g.constant(zb), true,
                                     true);
        lg = double(g.value(loss)[0]);
        g.backward(loss);
        opt_g.step(params, leaves_g.gradients());
      }
      if (!std::isfinite(ld) || !std::isfinite(lg))
        throw DivergenceError("train_cfam: non-finite loss at epoch " +
                              std::to_string(epoch) + " batch " +
                              std::to_string(batches) + ": L_D=" +
                              std::to_string(ld) + " L_G=" +
                              std::to_string(lg));
      sum_d += ld;
      sum_g += lg;
      ++batches;
    }
    result.log.push_back(
        {epoch, sum_d / double(batches), sum_g / double(batches)});
  }
  return result;
}

struct EnergyProfile {
  ActionGrid grid;
  std::vector<double> energies;
};

// Discriminator energies over all grid actions, evaluated as one batch with
// the encoded frame features shared across grid points.
template <typename T>
EnergyProfile energy_sweep(const Tensor<T>& x, const ActionGrid& grid,
                           ParamSet<T>& params, const CfamConfig& cfg) {
  Tape<T> g;
  ParamLeaves<T> leaves(g, params, false);
  auto xb = g.constant(cfamdetail::single_frame_batch(x, cfg));
  auto feat1 = cfam_encode(g, leaves, params, cfg, "d", xb, false, false);
  auto feat = g.repeat_batch(feat1, grid.n);
  Tensor<T> uv({grid.n, 1});
  for (int i = 0; i < grid.n; ++i) uv[i] = T(grid.values[std::size_t(i)]);
  auto e = cfam_energy_from_features(g, leaves, cfg, feat, g.constant(uv));
  EnergyProfile profile{grid, std::vector<double>(std::size_t(grid.n))};
  for (int i = 0; i < grid.n; ++i)
    profile.energies[std::size_t(i)] = double(g.value(e)[i]);
  return profile;
}

// |u_actual - argmin-energy grid action|; argmin ties break toward the lower
// index.
inline double cfam_deviation(double u_actual, const EnergyProfile& profile) {
  if (profile.energies.size() != std::size_t(profile.grid.n) ||
      profile.grid.n < 2)
    throw std::invalid_argument("cfam_deviation: profile/grid mismatch");
  std::size_t best = 0;
  for (std::size_t i = 1; i < profile.energies.size(); ++i)
    if (profile.energies[i] < profile.energies[best]) best = i;
  return std::abs(u_actual - profile.grid.values[best]);
}

}  // namespace loopmon
