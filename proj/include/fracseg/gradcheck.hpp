#pragma once

// Finite-difference gradient audit across every differentiable op, from the
// elementary kernels up to the attention module and a full small network.
// Central differences run in double on top of f32 forwards, so tolerances
// widen as the graphs deepen.

#include <string>
#include <vector>

#include "fracseg/losses.hpp"
#include "fracseg/model.hpp"
#include "fracseg/tensor.hpp"

namespace fracseg {

struct GradCheckResult {
  std::string op;
  double err = 0.0;
  double tol = 0.0;
  bool pass() const { return err < tol; }
};

namespace detail {

inline Tensor gc_random(std::vector<int> shape, uint64_t seed, float amp = 1.0f,
                        bool grad = false) {
  Tensor t(std::move(shape), grad);
  Rng rng(seed);
  for (float& v : t.value()) v = uniform(rng, -amp, amp);
  return t;
}

// keep scalars O(1): a large f32 loss drowns an h=1e-3 central difference
inline Tensor gc_mean_sq(Tape& t, const Tensor& x) {
  return scale(t, sum_squares(t, x), 1.0f / static_cast<float>(x.size()));
}

}  // namespace detail

inline std::vector<GradCheckResult> run_gradient_suite() {
  using detail::gc_mean_sq;
  using detail::gc_random;
  std::vector<GradCheckResult> out;
  auto record = [&](const std::string& op, double err, double tol) {
    out.push_back({op, err, tol});
  };

  {
    ConvSpec sp = ConvSpec::cubic(3, 1, 1, 1, 2);
    Tensor w = gc_random({2, 1, 3, 3, 3}, 102, 0.5f, true);
    Tensor b = gc_random({2}, 103, 0.5f, true);
    Tensor p = gc_random({1, 1, 4, 4, 4}, 104, 0.5f);
    record("conv3d/input",
           grad_check([&](Tape& t, Tensor& x) { return gc_mean_sq(t, conv3d(t, x, w, b, sp)); }, p),
           1e-3);
    record("conv3d/weights",
           grad_check([&](Tape& t, Tensor& wx) { return gc_mean_sq(t, conv3d(t, p, wx, b, sp)); }, w),
           1e-3);
  }
  {
    ConvSpec sp = ConvSpec::cubic(3, 2, 1, 2, 1, 1);
    Tensor w = gc_random({2, 1, 3, 3, 3}, 202, 0.5f, true);
    Tensor b = gc_random({1}, 203, 0.5f, true);
    Tensor p = gc_random({1, 2, 3, 3, 3}, 204, 0.5f);
    record("conv_transpose3d/input",
           grad_check(
               [&](Tape& t, Tensor& x) { return gc_mean_sq(t, conv_transpose3d(t, x, w, b, sp)); },
               p),
           1e-3);
    record("conv_transpose3d/weights",
           grad_check(
               [&](Tape& t, Tensor& wx) { return gc_mean_sq(t, conv_transpose3d(t, p, wx, b, sp)); },
               w),
           1e-3);
  }
  {
    Tensor p = gc_random({1, 2, 4, 4, 4}, 301, 0.8f);
    record("max_pool3d",
           grad_check([&](Tape& t, Tensor& x) { return gc_mean_sq(t, max_pool3d(t, x)); }, p),
           1e-3);
  }
  {
    Tensor gamma = Tensor::full({2}, 1.2f, true);
    Tensor beta = gc_random({2}, 402, 0.3f, true);
    Tensor p = gc_random({1, 2, 3, 3, 3}, 403, 0.7f);
    // mean_sq(BN(x)) alone is nearly invariant to x (the op self-normalizes),
    // which would leave only finite-difference noise; shift by a fixed field
    // so the gradient is non-degenerate
    Tensor shift = gc_random({1, 2, 3, 3, 3}, 404, 1.0f);
    record("batch_norm/input", grad_check(
                                   [&](Tape& t, Tensor& x) {
                                     BatchNormStats st(2);
                                     Tensor bn = batch_norm(t, x, gamma, beta, st, BnMode::kTrain);
                                     return gc_mean_sq(t, add(t, bn, shift));
                                   },
                                   // the variance/rsqrt forward is noisier in f32 than the
                                   // other kernels; h=1e-3 sits below its round-off floor
                                   p, 3e-3),
           1e-3);
    record("batch_norm/gamma_beta", grad_check(
                                        [&](Tape& t, Tensor& g) {
                                          BatchNormStats st(2);
                                          return gc_mean_sq(
                                              t, batch_norm(t, p, g, beta, st, BnMode::kTrain));
                                        },
                                        gamma),
           1e-3);
  }
  {
    // keep inputs clear of the kink at zero
    Tensor p({2, 3});
    p.value() = {0.7f, -0.6f, 0.4f, -0.9f, 0.5f, -0.3f};
    record("relu",
           grad_check([&](Tape& t, Tensor& x) { return gc_mean_sq(t, relu(t, x)); }, p), 1e-3);
  }
  {
    Tensor p = gc_random({8}, 501);
    record("sigmoid",
           grad_check([&](Tape& t, Tensor& x) { return gc_mean_sq(t, sigmoid(t, x)); }, p),
           1e-3);
  }
  {
    Tensor p = gc_random({1, 2, 2, 2, 2}, 601);
    record("softmax_channel",
           grad_check([&](Tape& t, Tensor& x) { return gc_mean_sq(t, softmax_channel(t, x)); }, p),
           1e-3);
  }
  {
    Tensor p = gc_random({1, 1, 3, 3, 3}, 701, 0.8f);
    record("upsample_trilinear",
           grad_check(
               [&](Tape& t, Tensor& x) { return gc_mean_sq(t, upsample_trilinear(t, x, 2)); }, p),
           1e-3);
  }

  LabelVolume mask = LabelVolume::make(3, 3, 3);
  {
    Rng rng(801);
    do {
      for (uint8_t& l : mask.labels) l = uniform(rng, 0.0f, 1.0f) < 0.4f ? 1 : 0;
    } while (mask.foreground_count() == 0 || mask.foreground_count() == mask.voxels());
  }
  const SignedDistanceField sdf = signed_distance(mask);
  const LossConfig loss_cfg;
  {
    Tensor p = gc_random({1, 2, 3, 3, 3}, 802, 0.5f);
    for (float& v : p.value()) v = 0.5f + 0.4f * v;  // keep probabilities in (0,1)
    record("surface_loss",
           grad_check([&](Tape& t, Tensor& x) { return surface_loss(t, x, sdf, loss_cfg); }, p),
           1e-2);
    record("dice_loss",
           grad_check([&](Tape& t, Tensor& x) { return dice_loss(t, x, mask, loss_cfg); }, p),
           1e-2);
    record("combined_loss",
           grad_check(
               [&](Tape& t, Tensor& x) { return combined_loss(t, x, mask, sdf, loss_cfg); }, p),
           1e-2);
  }
  {
    Rng rng(901);
    ParamRegistry reg;
    CsaModule csa = CsaModule::make("gc", 2, 1, 2, 4, CsaConfig{}, rng, reg);
    Tensor f1 = gc_random({1, 1, 8, 8, 8}, 902, 0.5f);
    Tensor fg = gc_random({1, 4, 2, 2, 2}, 903, 0.5f);
    Tensor fl = gc_random({1, 2, 4, 4, 4}, 904, 0.5f);
    record("csa_module",
           grad_check(
               [&](Tape& t, Tensor& x) { return gc_mean_sq(t, csa.forward(t, f1, x, fg)); }, fl),
           1e-2);
  }
  {
    NetworkConfig cfg;
    cfg.base_width = 2;
    Network net(cfg, 1001);
    LabelVolume target = LabelVolume::make(8, 8, 8);
    Rng rng(1002);
    do {
      for (uint8_t& l : target.labels) l = uniform(rng, 0.0f, 1.0f) < 0.3f ? 1 : 0;
    } while (target.foreground_count() == 0 || target.foreground_count() == target.voxels());
    const SignedDistanceField tsdf = signed_distance(target);
    Tensor p = gc_random({1, 1, 8, 8, 8}, 1003, 0.5f);
    for (float& v : p.value()) v = 0.5f + 0.4f * v;
    record("network_combined_loss",
           grad_check(
               [&](Tape& t, Tensor& x) {
                 Tensor prob = net.forward(t, x, BnMode::kTrain);
                 return combined_loss(t, prob, target, tsdf, loss_cfg);
               },
               p, 1e-3, /*max_coords=*/10),
           5e-2);
  }
  return out;
}

}  // namespace fracseg
