// CEBGAN unit tests: hand-checked loss values, finite-difference gradient
// checks on a tiny configuration, hinge behavior, energy-sweep batching, and
// training bookkeeping/determinism.
#include <cmath>
#include <utility>
#include <vector>

#include "doctest.h"
#include "gradcheck.hpp"
#include "loopmon/cfam.hpp"
#include "loopmon/rng.hpp"
#include "loopmon/sim.hpp"
#include "loopmon/tensor.hpp"

namespace {

using loopmon::CfamConfig;
using loopmon::Rng;
using loopmon::Tensor;

CfamConfig tiny_config() {
  CfamConfig cfg;
  cfg.image_size = 8;
  cfg.conv_channels = {4, 6};
  cfg.noise_dim = 5;
  cfg.hidden_dim = 7;
  cfg.batch_size = 2;
  return cfg;
}

template <typename T>
Tensor<T> rand_frame(Rng& rng, int s) {
  Tensor<T> x({3, s, s});
  for (auto& v : x.data) v = T(rng.uniform());
  return x;
}

template <typename T>
void zero_params(loopmon::ParamSet<T>& params) {
  for (auto& name : params.order)
    if (name.find("running_var") == std::string::npos)
      for (auto& v : params.at(name).data) v = T(0);
}

}  // namespace

TEST_CASE("cfam config validation and round trip") {
  CfamConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.feature_dim() == 256);  // 64 / 2^6 = 1, 256 channels

  CfamConfig bad = cfg;
  bad.image_size = 60;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.margin = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  CfamConfig t = tiny_config();
  const auto kv = loopmon::cfam_config_to(t);
  const auto back = loopmon::cfam_config_from(kv);
  CHECK(back.image_size == t.image_size);
  CHECK(back.conv_channels == t.conv_channels);
  CHECK(back.noise_dim == t.noise_dim);
  CHECK(back.hidden_dim == t.hidden_dim);
  CHECK(back.margin == t.margin);
  CHECK(back.learning_rate == t.learning_rate);

  loopmon::KeyValues bad_kv = kv;
  bad_kv.set("conv_channels", "4,x");
  CHECK_THROWS_AS((void)loopmon::cfam_config_from(bad_kv),
                  loopmon::FormatError);
}

TEST_CASE("discriminator energy with a constant-prediction stub") {
  Rng rng(101);
  const auto cfg = tiny_config();
  Rng init = rng.fork(1);
  auto params = loopmon::init_cfam_params<double>(cfg, init);
  zero_params(params);
  params.at("d.out.b")[0] = std::atanh(0.1);

  const auto x = rand_frame<double>(rng, cfg.image_size);
  CHECK(loopmon::discriminator_energy(0.1, x, params, cfg) ==
        doctest::Approx(0.0).epsilon(1e-12));
  CHECK(loopmon::discriminator_energy(0.3, x, params, cfg) ==
        doctest::Approx(0.04).epsilon(1e-12));

  // Energies are squares, hence nonnegative, for arbitrary inputs/params.
  Rng init2 = rng.fork(2);
  auto rparams = loopmon::init_cfam_params<double>(cfg, init2);
  for (int i = 0; i < 100; ++i) {
    const auto xi = rand_frame<double>(rng, cfg.image_size);
    const double u = rng.uniform(-1.0, 1.0);
    CHECK(loopmon::discriminator_energy(u, xi, rparams, cfg) >= 0.0);
  }
}

TEST_CASE("generator output is deterministic, squashed, zero for zero weights") {
  Rng rng(102);
  const auto cfg = tiny_config();
  Rng init = rng.fork(1);
  auto params = loopmon::init_cfam_params<double>(cfg, init);

  Tensor<double> z({cfg.noise_dim});
  for (auto& v : z.data) v = rng.uniform();
  const auto x = rand_frame<double>(rng, cfg.image_size);
  const double u1 = loopmon::generator_forward(z, x, params, cfg);
  const double u2 = loopmon::generator_forward(z, x, params, cfg);
  CHECK(u1 == u2);

  for (int i = 0; i < 100; ++i) {
    Tensor<double> zi({cfg.noise_dim});
    for (auto& v : zi.data) v = rng.uniform();
    const auto xi = rand_frame<double>(rng, cfg.image_size);
    const double u = loopmon::generator_forward(zi, xi, params, cfg);
    CHECK(u > -1.0);
    CHECK(u < 1.0);
  }

  zero_params(params);
  CHECK(loopmon::generator_forward(z, x, params, cfg) == 0.0);

  Tensor<double> bad_z({cfg.noise_dim + 1});
  CHECK_THROWS_AS((void)loopmon::generator_forward(bad_z, x, params, cfg),
                  std::invalid_argument);
  Tensor<double> bad_x({3, 4, 4});
  CHECK_THROWS_AS((void)loopmon::generator_forward(z, bad_x, params, cfg),
                  std::invalid_argument);
}

TEST_CASE("cebgan loss stub substitution and hinge boundary") {
  Rng rng(103);
  const auto cfg = tiny_config();
  Rng init = rng.fork(1);
  auto params = loopmon::init_cfam_params<double>(cfg, init);
  zero_params(params);
  // Constant discriminator prediction p = 0 and generated command
  // sqrt(0.2), so D(u,x) = u^2 and D(G(z),x) = 0.2 for any inputs.
  params.at("g.out.b")[0] = std::atanh(std::sqrt(0.2));

  const auto x = rand_frame<double>(rng, cfg.image_size);
  Tensor<double> z({cfg.noise_dim});
  for (auto& v : z.data) v = rng.uniform();
  const double u = std::sqrt(0.3);

  // D(u,x)=0.3, D(G(z),x)=0.2, m=1 -> L_D = 0.3 + (1 - 0.2) = 1.1, L_G = 0.2.
  const auto [ld, lg] = loopmon::cebgan_losses(u, z, x, params, cfg, 1.0);
  CHECK(ld == doctest::Approx(1.1).epsilon(1e-12));
  CHECK(lg == doctest::Approx(0.2).epsilon(1e-12));

  // Hinge boundary: D(G(z),x) = m wipes the hinge term.
  const auto [ld2, lg2] = loopmon::cebgan_losses(u, z, x, params, cfg, 0.2);
  CHECK(ld2 == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(lg2 == doctest::Approx(0.2).epsilon(1e-12));

  // D(G(z),x) > m: L_D is independent of the generated sample.
  const auto [ld3, lg3] = loopmon::cebgan_losses(u, z, x, params, cfg, 0.1);
  CHECK(ld3 == doctest::Approx(0.3).epsilon(1e-12));
  params.at("g.out.b")[0] = std::atanh(std::sqrt(0.25));
  const auto [ld4, lg4] = loopmon::cebgan_losses(u, z, x, params, cfg, 0.1);
  CHECK(ld4 == doctest::Approx(ld3).epsilon(1e-12));
  CHECK(lg4 != lg3);
}

TEST_CASE("cebgan discriminator loss gradients (tiny config)") {
  Rng rng(104);
  const auto cfg = tiny_config();
  Rng init = rng.fork(1);
  auto params = loopmon::init_cfam_params<double>(cfg, init);

  const int B = 2;
  Tensor<double> xb({B, 3, cfg.image_size, cfg.image_size});
  for (auto& v : xb.data) v = rng.uniform();
  Tensor<double> ub({B, 1});
  for (auto& v : ub.data) v = rng.uniform(-0.5, 0.5);
  Tensor<double> zb({B, cfg.noise_dim});
  for (auto& v : zb.data) v = rng.uniform();

  // Discriminator parameters bound trainable, generator parameters frozen.
  gradtest::gradcheck_params(
      [&](gradtest::Tape& g, loopmon::ParamLeaves<double>& train,
          loopmon::ParamLeaves<double>& frozen) {
        return loopmon::cebgan_loss_d_op(g, train, frozen, params, cfg,
                                         g.constant(xb), g.constant(ub),
                                         g.constant(zb), true, false);
      },
      params, 1e-5, 1e-5);
}

TEST_CASE("cebgan generator loss gradients (tiny config)") {
  Rng rng(105);
  const auto cfg = tiny_config();
  Rng init = rng.fork(1);
  auto params = loopmon::init_cfam_params<double>(cfg, init);

  const int B = 2;
  Tensor<double> xb({B, 3, cfg.image_size, cfg.image_size});
  for (auto& v : xb.data) v = rng.uniform();
  Tensor<double> zb({B, cfg.noise_dim});
  for (auto& v : zb.data) v = rng.uniform();

  gradtest::gradcheck_params(
      [&](gradtest::Tape& g, loopmon::ParamLeaves<double>& train,
          loopmon::ParamLeaves<double>& frozen) {
        return loopmon::cebgan_loss_g_op(g, train, frozen, params, cfg,
                                         g.constant(xb), g.constant(zb), true,
                                         false);
      },
      params, 1e-5, 1e-5);
}

TEST_CASE("hinge contributes no gradient once the generated energy clears m") {
  Rng rng(106);
  const auto cfg = tiny_config();
  Rng init = rng.fork(1);
  auto params = loopmon::init_cfam_params<double>(cfg, init);

  const int B = 2;
  Tensor<double> xb({B, 3, cfg.image_size, cfg.image_size});
  for (auto& v : xb.data) v = rng.uniform();
  Tensor<double> ub({B, 1});
  for (auto& v : ub.data) v = rng.uniform(-0.5, 0.5);
  Tensor<double> zb({B, cfg.noise_dim});
  for (auto& v : zb.data) v = rng.uniform();

  // Build L_D manually so the generated-sample energy node is inspectable.
  const auto loss_d_grads = [&](double m, loopmon::Tensor<double>* e_fake_grad,
                                loopmon::Tensor<double>* e_fake_val) {
    loopmon::Tape<double> g;
    loopmon::ParamLeaves<double> leaves_d(g, params, true);
    loopmon::ParamLeaves<double> leaves_g(g, params, false);
    auto u_gen = loopmon::cfam_generator_op(g, leaves_g, params, cfg,
                                            g.constant(xb), g.constant(zb),
                                            true, false);
    auto feat = loopmon::cfam_encode(g, leaves_d, params, cfg, "d",
                                     g.constant(xb), true, false);
    auto e_true = loopmon::cfam_energy_from_features(g, leaves_d, cfg, feat,
                                                     g.constant(ub));
    auto e_fake =
        loopmon::cfam_energy_from_features(g, leaves_d, cfg, feat, u_gen);
    auto hinge = g.relu(g.add_const(g.scale(e_fake, -1.0), m));
    auto loss = g.reduce_mean_all(g.add(e_true, hinge));
    g.backward(loss);
    *e_fake_grad = g.grad_or_zero(e_fake);
    *e_fake_val = g.value(e_fake);
  };

  Tensor<double> grad_small({B, 1}), val_small({B, 1});
  loss_d_grads(1e-9, &grad_small, &val_small);
  for (int i = 0; i < B; ++i) {
    REQUIRE(val_small[i] > 1e-9);  // every generated energy clears the margin
    CHECK(grad_small[i] == 0.0);
  }

  Tensor<double> grad_big({B, 1}), val_big({B, 1});
  loss_d_grads(1e9, &grad_big, &val_big);
  for (int i = 0; i < B; ++i) CHECK(grad_big[i] != 0.0);
}

TEST_CASE("energy sweep matches the per-point loop and finds the stub minimum") {
  Rng rng(107);
  const auto cfg = tiny_config();
  Rng init = rng.fork(1);
  auto params = loopmon::init_cfam_params<double>(cfg, init);
  const auto x = rand_frame<double>(rng, cfg.image_size);
  const auto grid = loopmon::make_action_grid(-1.0, 1.0, 15);

  const auto profile = loopmon::energy_sweep(x, grid, params, cfg);
  CHECK(int(profile.energies.size()) == grid.n);
  for (int i = 0; i < grid.n; ++i) {
    const double single = loopmon::discriminator_energy(
        grid.values[std::size_t(i)], x, params, cfg);
    CHECK(profile.energies[std::size_t(i)] ==
          doctest::Approx(single).epsilon(1e-6));
    CHECK(profile.energies[std::size_t(i)] >= 0.0);
  }

  // Constant-prediction stub: parabola with minimum at the grid point
  // nearest the constant.
  zero_params(params);
  params.at("d.out.b")[0] = std::atanh(0.1);
  const auto stub = loopmon::energy_sweep(x, grid, params, cfg);
  std::size_t best = 0;
  for (std::size_t i = 1; i < stub.energies.size(); ++i)
    if (stub.energies[i] < stub.energies[best]) best = i;
  CHECK(int(best) == loopmon::nearest_action_index(0.1, grid));
}

TEST_CASE("cfam deviation: argmin with lower-index ties") {
  const auto grid = loopmon::make_action_grid(-1.0, 1.0, 3);
  loopmon::EnergyProfile p{grid, {3.0, 1.0, 2.0}};
  CHECK(loopmon::cfam_deviation(1.0, p) == doctest::Approx(1.0));
  CHECK(loopmon::cfam_deviation(0.0, p) == doctest::Approx(0.0));

  loopmon::EnergyProfile flat{grid, {0.5, 0.5, 0.5}};
  CHECK(loopmon::cfam_deviation(0.25, flat) == doctest::Approx(1.25));
}

TEST_CASE("train_cfam bookkeeping and determinism") {
  Rng rng(108);
  CfamConfig cfg = tiny_config();
  cfg.batch_size = 4;
  cfg.epochs = 1;
  cfg.learning_rate = 1e-3;

  std::vector<std::pair<Tensor<float>, float>> pairs;
  for (int i = 0; i < 10; ++i)
    pairs.emplace_back(rand_frame<float>(rng, cfg.image_size),
                       float(rng.uniform(-0.5, 0.5)));

  const auto r1 = loopmon::train_cfam(pairs, cfg, 7);
  CHECK(r1.log.size() == 1);
  CHECK(std::isfinite(r1.log[0].loss_d));
  CHECK(std::isfinite(r1.log[0].loss_g));

  const auto r2 = loopmon::train_cfam(pairs, cfg, 7);
  CHECK(r1.log[0].loss_d == r2.log[0].loss_d);
  CHECK(r1.log[0].loss_g == r2.log[0].loss_g);
  for (const auto& name : r1.params.order)
    CHECK(r1.params.values.at(name).data == r2.params.values.at(name).data);

  const auto r3 = loopmon::train_cfam(pairs, cfg, 8);
  CHECK(r1.log[0].loss_d != r3.log[0].loss_d);

  CHECK_THROWS_AS(
      (void)loopmon::train_cfam(
          std::vector<std::pair<Tensor<float>, float>>{}, cfg, 7),
      std::invalid_argument);
}

TEST_CASE("training lowers true-pair energy on corridor data") {
  // Small corridor dataset; compare mean discriminator energy on the true
  // pairs at initialization (epochs = 0 returns the seeded init) vs trained.
  loopmon::WorldConfig wcfg;
  wcfg.img_w = 32;
  wcfg.img_h = 32;

  CfamConfig cfg;
  cfg.image_size = 32;
  cfg.conv_channels = {8, 16, 32};
  cfg.noise_dim = 16;
  cfg.hidden_dim = 64;
  cfg.batch_size = 16;
  cfg.learning_rate = 5e-4;
  cfg.epochs = 8;

  // Long enough episodes to cover corridor turns, so commands vary.
  std::vector<std::pair<Tensor<float>, float>> pairs;
  for (std::uint64_t seed : {11ull, 12ull}) {
    const auto ep = loopmon::simulate_episode(wcfg, seed, 200);
    for (const auto& rec : ep.records)
      pairs.emplace_back(rec.frame, float(rec.u));
  }

  CfamConfig cfg0 = cfg;
  cfg0.epochs = 0;
  auto init_result = loopmon::train_cfam(pairs, cfg0, 99);
  auto trained = loopmon::train_cfam(pairs, cfg, 99);

  const auto mean_energy = [&](loopmon::ParamSet<float>& params) {
    double acc = 0.0;
    for (const auto& [x, u] : pairs)
      acc += double(loopmon::discriminator_energy(u, x, params, cfg));
    return acc / double(pairs.size());
  };
  const double e0 = mean_energy(init_result.params);
  const double e1 = mean_energy(trained.params);
  CHECK(e1 < e0);

  // The energy valley also moves toward the true command.
  const auto grid = loopmon::make_action_grid(-0.7, 0.7, 15);
  const auto mean_dev = [&](loopmon::ParamSet<float>& params) {
    double acc = 0.0;
    int count = 0;
    for (std::size_t i = 0; i < pairs.size(); i += 8) {
      const auto& [x, u] = pairs[i];
      const auto prof = loopmon::energy_sweep(x, grid, params, cfg);
      acc += loopmon::cfam_deviation(double(u), prof);
      ++count;
    }
    return acc / double(count);
  };
  CHECK(mean_dev(trained.params) < mean_dev(init_result.params));
}
