#pragma once

// Surface supervision: exact signed Euclidean distance fields (mm,
// anisotropic), the distance-weighted surface loss, soft Dice loss, and the
// weighted combination used for training.

#include <cmath>
#include <limits>
#include <vector>

#include "fracseg/common.hpp"
#include "fracseg/tensor.hpp"
#include "fracseg/volume.hpp"

namespace fracseg {

struct SignedDistanceField {
  int extents[3] = {0, 0, 0};
  double spacing[3] = {1, 1, 1};
  std::vector<float> phi;  // mm; negative on foreground voxels, positive on background

  int64_t voxels() const { return static_cast<int64_t>(extents[0]) * extents[1] * extents[2]; }
  int64_t index(int d, int h, int w) const {
    return (static_cast<int64_t>(d) * extents[1] + h) * extents[2] + w;
  }
};

enum class SurfaceReduction { kRawSum, kMean };

struct LossConfig {
  float lambda = 1.0f;  // weight of the Dice term
  SurfaceReduction surface_reduction = SurfaceReduction::kMean;
  float dice_smooth = 1e-5f;

  void validate() const {
    if (lambda < 0) throw DataError("loss config: lambda must be >= 0");
    if (!(dice_smooth > 0)) throw DataError("loss config: dice_smooth must be > 0");
  }
};

namespace detail {

// 1-D squared-distance transform (lower envelope of parabolas) on grid
// positions i*w. f holds squared distances; d receives the transformed row.
inline void edt_1d(const double* f, double* d, int n, double w,
                   std::vector<int>& v, std::vector<double>& z) {
  v.resize(static_cast<size_t>(n));
  z.resize(static_cast<size_t>(n) + 1);
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  const double w2 = w * w;
  for (int q = 1; q < n; ++q) {
    double s;
    for (;;) {
      const int p = v[static_cast<size_t>(k)];
      // parabolas sit at physical positions w*q, so the intersection is
      // ((f[q]+w^2 q^2) - (f[p]+w^2 p^2)) / (2 w (q-p))
      s = ((f[q] + w2 * q * q) - (f[p] + w2 * p * p)) / (2.0 * w * (q - p));
      if (s > z[static_cast<size_t>(k)]) break;
      --k;
    }
    ++k;
    v[static_cast<size_t>(k)] = q;
    z[static_cast<size_t>(k)] = s;
    z[static_cast<size_t>(k) + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[static_cast<size_t>(k) + 1] < w * q) ++k;
    const int p = v[static_cast<size_t>(k)];
    const double dq = w * (q - p);
    d[q] = dq * dq + f[p];
  }
}

// Exact anisotropic squared EDT to the site set (sites marked true), by
// separable passes along W, then H, then D.
inline std::vector<double> squared_edt(const std::vector<char>& site, const int* ext,
                                       const double* sp) {
  const int D = ext[0], H = ext[1], W = ext[2];
  // large finite sentinel; true infinities would produce NaNs in the
  // parabola-intersection arithmetic
  const double kInf = 1e15;
  std::vector<double> g(static_cast<size_t>(D) * H * W);
  for (size_t i = 0; i < g.size(); ++i) g[i] = site[i] ? 0.0 : kInf;

  std::vector<int> v;
  std::vector<double> z, row, out;
  const int max_ext = std::max({D, H, W});
  row.resize(static_cast<size_t>(max_ext));
  out.resize(static_cast<size_t>(max_ext));

  // pass along W (contiguous rows)
  for (int d = 0; d < D; ++d)
    for (int h = 0; h < H; ++h) {
      double* r = g.data() + (static_cast<int64_t>(d) * H + h) * W;
      bool any = false;
      for (int w = 0; w < W; ++w) any = any || r[w] < kInf;
      if (!any) continue;
      edt_1d(r, out.data(), W, sp[2], v, z);
      std::copy(out.begin(), out.begin() + W, r);
    }
  // pass along H
  for (int d = 0; d < D; ++d)
    for (int w = 0; w < W; ++w) {
      for (int h = 0; h < H; ++h) row[static_cast<size_t>(h)] = g[(static_cast<int64_t>(d) * H + h) * W + w];
      bool any = false;
      for (int h = 0; h < H; ++h) any = any || row[static_cast<size_t>(h)] < kInf;
      if (!any) continue;
      edt_1d(row.data(), out.data(), H, sp[1], v, z);
      for (int h = 0; h < H; ++h) g[(static_cast<int64_t>(d) * H + h) * W + w] = out[static_cast<size_t>(h)];
    }
  // pass along D
  for (int h = 0; h < H; ++h)
    for (int w = 0; w < W; ++w) {
      for (int d = 0; d < D; ++d) row[static_cast<size_t>(d)] = g[(static_cast<int64_t>(d) * H + h) * W + w];
      bool any = false;
      for (int d = 0; d < D; ++d) any = any || row[static_cast<size_t>(d)] < kInf;
      if (!any) continue;
      edt_1d(row.data(), out.data(), D, sp[0], v, z);
      for (int d = 0; d < D; ++d) g[(static_cast<int64_t>(d) * H + h) * W + w] = out[static_cast<size_t>(d)];
    }
  return g;
}

}  // namespace detail

// Signed distance to the nearest opposite-label voxel center: positive on
// background (distance to nearest foreground center), negative on
// foreground (distance to nearest background center). Exact, mm,
// spacing-weighted.
inline SignedDistanceField signed_distance(const LabelVolume& mask) {
  const int64_t fg = mask.foreground_count();
  if (fg == 0 || fg == mask.voxels())
    throw DataError("signed_distance: degenerate mask (all one label)");
  SignedDistanceField sdf;
  for (int a = 0; a < 3; ++a) {
    sdf.extents[a] = mask.extents[a];
    sdf.spacing[a] = mask.spacing[a];
  }
  std::vector<char> fg_site(mask.labels.size()), bg_site(mask.labels.size());
  for (size_t i = 0; i < mask.labels.size(); ++i) {
    fg_site[i] = mask.labels[i] != 0;
    bg_site[i] = mask.labels[i] == 0;
  }
  const auto d2_to_fg = detail::squared_edt(fg_site, mask.extents, mask.spacing);
  const auto d2_to_bg = detail::squared_edt(bg_site, mask.extents, mask.spacing);
  sdf.phi.resize(mask.labels.size());
  for (size_t i = 0; i < mask.labels.size(); ++i)
    sdf.phi[i] = mask.labels[i]
                     ? -static_cast<float>(std::sqrt(d2_to_bg[i]))
                     : static_cast<float>(std::sqrt(d2_to_fg[i]));
  return sdf;
}

namespace detail {

inline void check_pred_vs_extents(const Tensor& pred, const int* extents, const char* op) {
  if (pred.ndim() != 5 || pred.dim(0) != 1 || pred.dim(1) != 2)
    throw ShapeError(std::string(op) + ": prediction must be 1,2,D,H,W");
  if (pred.dim(2) != extents[0] || pred.dim(3) != extents[1] || pred.dim(4) != extents[2])
    throw ShapeError(std::string(op) + ": prediction spatial extents do not match target");
}

}  // namespace detail

// L_surface = sum_q phi(q) * s(q) over the foreground channel, optionally
// divided by |Omega|. Linear in s; d/ds(q) = phi(q) / normalizer.
inline Tensor surface_loss(Tape& tape, const Tensor& prediction,
                           const SignedDistanceField& sdf, const LossConfig& cfg) {
  detail::check_pred_vs_extents(prediction, sdf.extents, "surface_loss");
  const int64_t sp = sdf.voxels();
  const float norm = cfg.surface_reduction == SurfaceReduction::kMean
                         ? 1.0f / static_cast<float>(sp)
                         : 1.0f;
  Tensor out({1}, detail::want_grad(tape, {&prediction}));
  const float* s = prediction.value().data() + sp;  // foreground channel
  double acc = 0.0;
  for (int64_t i = 0; i < sp; ++i) acc += static_cast<double>(sdf.phi[static_cast<size_t>(i)]) * s[i];
  out.value()[0] = static_cast<float>(acc) * norm;
  if (out.requires_grad()) {
    Tensor p_t = prediction, out_t = out;
    std::vector<float> phi = sdf.phi;
    tape.push([p_t, out_t, phi, sp, norm]() mutable {
      const float g = out_t.grad()[0] * norm;
      float* gp = p_t.grad().data() + sp;
      for (int64_t i = 0; i < sp; ++i) gp[i] += g * phi[static_cast<size_t>(i)];
    });
  }
  return out;
}

// 1 - (2*sum(s*g) + eps) / (sum(s) + sum(g) + eps) on the foreground channel.
inline Tensor dice_loss(Tape& tape, const Tensor& prediction, const LabelVolume& target,
                        const LossConfig& cfg) {
  detail::check_pred_vs_extents(prediction, target.extents, "dice_loss");
  const int64_t sp = target.voxels();
  const float* s = prediction.value().data() + sp;
  double inter = 0.0, sum_s = 0.0;
  for (int64_t i = 0; i < sp; ++i) {
    sum_s += s[i];
    if (target.labels[static_cast<size_t>(i)]) inter += s[i];
  }
  const double sum_g = static_cast<double>(target.foreground_count());
  const double eps = cfg.dice_smooth;
  const double num = 2.0 * inter + eps;
  const double den = sum_s + sum_g + eps;
  Tensor out({1}, detail::want_grad(tape, {&prediction}));
  out.value()[0] = static_cast<float>(1.0 - num / den);
  if (out.requires_grad()) {
    Tensor p_t = prediction, out_t = out;
    std::vector<uint8_t> g = target.labels;
    tape.push([p_t, out_t, g, sp, num, den]() mutable {
      // d/ds_i [ -(2*inter+eps)/den ] = -(2*g_i*den - num) / den^2
      const float go = out_t.grad()[0];
      float* gp = p_t.grad().data() + sp;
      const double inv_den2 = 1.0 / (den * den);
      for (int64_t i = 0; i < sp; ++i) {
        const double dnum = g[static_cast<size_t>(i)] ? 2.0 : 0.0;
        gp[i] += go * static_cast<float>(-(dnum * den - num) * inv_den2);
      }
    });
  }
  return out;
}

// L = L_surface + lambda * L_dice
inline Tensor combined_loss(Tape& tape, const Tensor& prediction, const LabelVolume& target,
                            const SignedDistanceField& sdf, const LossConfig& cfg) {
  cfg.validate();
  Tensor ls = surface_loss(tape, prediction, sdf, cfg);
  Tensor ld = dice_loss(tape, prediction, target, cfg);
  return add(tape, ls, scale(tape, ld, cfg.lambda));
}

// SDF dumps reuse the VOL1 container with dtype f32.
inline Volume sdf_to_volume(const SignedDistanceField& sdf) {
  Volume v = Volume::make(sdf.extents[0], sdf.extents[1], sdf.extents[2],
                          sdf.spacing[0], sdf.spacing[1], sdf.spacing[2]);
  v.data = sdf.phi;
  return v;
}

}  // namespace fracseg
