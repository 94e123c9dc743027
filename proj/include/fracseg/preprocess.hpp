#pragma once

// CT-style preprocessing: HU clamp + window normalization, physical-space
// resampling, patch extraction for training/inference, and probability
// stitching.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "fracseg/common.hpp"
#include "fracseg/config.hpp"
#include "fracseg/tensor.hpp"
#include "fracseg/volume.hpp"

namespace fracseg {

struct PreprocessConfig {
  double hu_min = -200.0;
  double hu_max = 800.0;
  double target_spacing[3] = {0.8, 0.8, 0.8};  // D, H, W in mm
  int patch_size = 64;
  int patch_overlap = 0;

  void validate() const {
    if (!(hu_min < hu_max)) throw DataError("preprocess config: hu_min must be < hu_max");
    if (patch_size % 8 != 0)
      throw DataError("preprocess config: patch_size must be divisible by 8");
    if (patch_overlap < 0 || patch_overlap >= patch_size)
      throw DataError("preprocess config: overlap must be in [0, patch_size)");
    for (double s : target_spacing)
      if (!(s > 0)) throw DataError("preprocess config: non-positive target spacing");
  }

  static PreprocessConfig from_config(const KeyValueConfig& kv) {
    PreprocessConfig c;
    c.hu_min = kv.get_double("hu_min", c.hu_min);
    c.hu_max = kv.get_double("hu_max", c.hu_max);
    const double ts = kv.get_double("target_spacing", c.target_spacing[0]);
    c.target_spacing[0] = c.target_spacing[1] = c.target_spacing[2] = ts;
    c.patch_size = static_cast<int>(kv.get_int("patch_size", c.patch_size));
    c.patch_overlap = static_cast<int>(kv.get_int("patch_overlap", c.patch_overlap));
    c.validate();
    return c;
  }
};

// Clamp to [hu_min, hu_max], then affine map to [0,1].
inline Volume clamp_and_window(const Volume& v, const PreprocessConfig& cfg) {
  Volume out = v;
  const float lo = static_cast<float>(cfg.hu_min);
  const float hi = static_cast<float>(cfg.hu_max);
  const float inv = 1.0f / (hi - lo);
  for (float& x : out.data) x = (std::min(hi, std::max(lo, x)) - lo) * inv;
  return out;
}

enum class ResampleMode { kTrilinear, kNearest };

namespace detail {

inline int resampled_extent(int old_extent, double old_sp, double new_sp) {
  return std::max(1, static_cast<int>(std::llround(old_extent * old_sp / new_sp)));
}

// align-corners=false: output voxel center o maps to input coordinate
// (o + 0.5) * new_sp / old_sp - 0.5
template <typename Fetch>
inline void resample_grid(const int* old_ext, const double* old_sp,
                          const int* new_ext, const double* new_sp,
                          ResampleMode mode, const Fetch& fetch,
                          const std::function<void(int64_t, float)>& store) {
  int64_t oi = 0;
  for (int d = 0; d < new_ext[0]; ++d)
    for (int h = 0; h < new_ext[1]; ++h)
      for (int w = 0; w < new_ext[2]; ++w, ++oi) {
        const int o[3] = {d, h, w};
        double src[3];
        for (int a = 0; a < 3; ++a) {
          src[a] = (o[a] + 0.5) * new_sp[a] / old_sp[a] - 0.5;
          src[a] = std::min(std::max(src[a], 0.0), static_cast<double>(old_ext[a] - 1));
        }
        if (mode == ResampleMode::kNearest) {
          int i0[3];
          for (int a = 0; a < 3; ++a) i0[a] = static_cast<int>(std::llround(src[a]));
          store(oi, fetch(i0[0], i0[1], i0[2]));
        } else {
          int lo[3], hi[3];
          double f[3];
          for (int a = 0; a < 3; ++a) {
            lo[a] = static_cast<int>(src[a]);
            hi[a] = std::min(lo[a] + 1, old_ext[a] - 1);
            f[a] = src[a] - lo[a];
          }
          double acc = 0.0;
          for (int bd = 0; bd < 2; ++bd)
            for (int bh = 0; bh < 2; ++bh)
              for (int bw = 0; bw < 2; ++bw) {
                const double wgt = (bd ? f[0] : 1 - f[0]) * (bh ? f[1] : 1 - f[1]) *
                                   (bw ? f[2] : 1 - f[2]);
                if (wgt == 0.0) continue;
                acc += wgt * fetch(bd ? hi[0] : lo[0], bh ? hi[1] : lo[1], bw ? hi[2] : lo[2]);
              }
          store(oi, static_cast<float>(acc));
        }
      }
}

}  // namespace detail

inline Volume resample(const Volume& v, const double* target_spacing,
                       ResampleMode mode = ResampleMode::kTrilinear) {
  for (int a = 0; a < 3; ++a)
    if (!(target_spacing[a] > 0)) throw DataError("resample: non-positive target spacing");
  if (v.spacing[0] == target_spacing[0] && v.spacing[1] == target_spacing[1] &&
      v.spacing[2] == target_spacing[2])
    return v;  // bit-exact identity
  int new_ext[3];
  for (int a = 0; a < 3; ++a)
    new_ext[a] = detail::resampled_extent(v.extents[a], v.spacing[a], target_spacing[a]);
  Volume out = Volume::make(new_ext[0], new_ext[1], new_ext[2],
                            target_spacing[0], target_spacing[1], target_spacing[2]);
  detail::resample_grid(v.extents, v.spacing, new_ext, target_spacing, mode,
                        [&](int d, int h, int w) { return v.at(d, h, w); },
                        [&](int64_t i, float x) { out.data[static_cast<size_t>(i)] = x; });
  return out;
}

// Labels always resample nearest-neighbor so values stay binary.
inline LabelVolume resample(const LabelVolume& v, const double* target_spacing) {
  for (int a = 0; a < 3; ++a)
    if (!(target_spacing[a] > 0)) throw DataError("resample: non-positive target spacing");
  if (v.spacing[0] == target_spacing[0] && v.spacing[1] == target_spacing[1] &&
      v.spacing[2] == target_spacing[2])
    return v;
  int new_ext[3];
  for (int a = 0; a < 3; ++a)
    new_ext[a] = detail::resampled_extent(v.extents[a], v.spacing[a], target_spacing[a]);
  LabelVolume out = LabelVolume::make(new_ext[0], new_ext[1], new_ext[2],
                                      target_spacing[0], target_spacing[1], target_spacing[2]);
  detail::resample_grid(v.extents, v.spacing, new_ext, target_spacing, ResampleMode::kNearest,
                        [&](int d, int h, int w) { return static_cast<float>(v.at(d, h, w)); },
                        [&](int64_t i, float x) {
                          out.labels[static_cast<size_t>(i)] = static_cast<uint8_t>(x);
                        });
  return out;
}

struct PatchOrigin {
  int d = 0, h = 0, w = 0;
};

struct Patch {
  Tensor image;        // 1,1,P,P,P
  LabelVolume label;   // P^3 with volume spacing
  PatchOrigin origin;
};

namespace detail {

inline Tensor crop_to_tensor(const Volume& v, const PatchOrigin& o, int p) {
  Tensor t({1, 1, p, p, p});
  float* out = t.value().data();
  int64_t i = 0;
  for (int d = 0; d < p; ++d)
    for (int h = 0; h < p; ++h)
      for (int w = 0; w < p; ++w, ++i)
        out[i] = v.at(o.d + d, o.h + h, o.w + w);
  return t;
}

inline LabelVolume crop_label(const LabelVolume& v, const PatchOrigin& o, int p) {
  LabelVolume out = LabelVolume::make(p, p, p, v.spacing[0], v.spacing[1], v.spacing[2]);
  int64_t i = 0;
  for (int d = 0; d < p; ++d)
    for (int h = 0; h < p; ++h)
      for (int w = 0; w < p; ++w, ++i)
        out.labels[static_cast<size_t>(i)] = v.at(o.d + d, o.h + h, o.w + w);
  return out;
}

}  // namespace detail

// Training sampler: with probability 0.5 the patch is centered on a random
// foreground voxel (clamped into bounds), otherwise the origin is uniform.
// Falls back to uniform when the label has no foreground.
inline Patch sample_training_patch(const Volume& vol, const LabelVolume& lab,
                                   int patch_size, Rng& rng) {
  require_same_geometry(vol, lab, "sample_training_patch");
  for (int a = 0; a < 3; ++a)
    if (vol.extents[a] < patch_size)
      throw DataError("sample_training_patch: volume smaller than patch along axis " +
                      std::to_string(a) + "; pad the volume first");
  PatchOrigin o;
  const bool biased = uniform(rng, 0.0f, 1.0f) < 0.5f && lab.foreground_count() > 0;
  if (biased) {
    // pick the k-th foreground voxel
    int64_t k = uniform_index(rng, lab.foreground_count());
    int64_t idx = -1;
    for (size_t i = 0; i < lab.labels.size(); ++i) {
      if (lab.labels[i] && k-- == 0) { idx = static_cast<int64_t>(i); break; }
    }
    const int d = static_cast<int>(idx / (static_cast<int64_t>(lab.extents[1]) * lab.extents[2]));
    const int h = static_cast<int>((idx / lab.extents[2]) % lab.extents[1]);
    const int w = static_cast<int>(idx % lab.extents[2]);
    const int c[3] = {d, h, w};
    int* oo[3] = {&o.d, &o.h, &o.w};
    for (int a = 0; a < 3; ++a)
      *oo[a] = std::min(std::max(c[a] - patch_size / 2, 0), vol.extents[a] - patch_size);
  } else {
    o.d = static_cast<int>(uniform_index(rng, vol.extents[0] - patch_size + 1));
    o.h = static_cast<int>(uniform_index(rng, vol.extents[1] - patch_size + 1));
    o.w = static_cast<int>(uniform_index(rng, vol.extents[2] - patch_size + 1));
  }
  return {detail::crop_to_tensor(vol, o, patch_size), detail::crop_label(lab, o, patch_size), o};
}

// Inference tiling: origins advance by patch_size - overlap; the last origin
// on each axis is clamped so the patch ends at the volume boundary.
inline std::vector<PatchOrigin> tile_origins(const int* extents, int patch_size, int overlap) {
  if (overlap < 0 || overlap >= patch_size)
    throw DataError("tile_origins: overlap must be in [0, patch_size)");
  const int step = patch_size - overlap;
  std::vector<int> axes[3];
  for (int a = 0; a < 3; ++a) {
    if (extents[a] < patch_size)
      throw DataError("tile_origins: volume smaller than patch along axis " +
                      std::to_string(a) + "; pad the volume first");
    for (int p = 0;; p += step) {
      if (p + patch_size >= extents[a]) {
        axes[a].push_back(extents[a] - patch_size);
        break;
      }
      axes[a].push_back(p);
    }
  }
  std::vector<PatchOrigin> out;
  for (int d : axes[0])
    for (int h : axes[1])
      for (int w : axes[2]) out.push_back({d, h, w});
  return out;
}

inline Tensor extract_patch(const Volume& v, const PatchOrigin& o, int patch_size) {
  return detail::crop_to_tensor(v, o, patch_size);
}

// Average overlapping foreground probabilities, then threshold at 0.5
// (equivalent to argmax over the two averaged softmax channels).
inline LabelVolume stitch_patches(const std::vector<Tensor>& fg_probs,
                                  const std::vector<PatchOrigin>& origins,
                                  const int* full_extents, const double* spacing) {
  if (fg_probs.size() != origins.size())
    throw DataError("stitch_patches: patch/origin count mismatch");
  LabelVolume out = LabelVolume::make(full_extents[0], full_extents[1], full_extents[2],
                                      spacing[0], spacing[1], spacing[2]);
  std::vector<double> acc(static_cast<size_t>(out.voxels()), 0.0);
  std::vector<int> cnt(static_cast<size_t>(out.voxels()), 0);
  for (size_t p = 0; p < fg_probs.size(); ++p) {
    const Tensor& t = fg_probs[p];
    if (t.ndim() != 5 || t.dim(0) != 1 || t.dim(1) != 1)
      throw ShapeError("stitch_patches: expected 1,1,D,H,W probability patches");
    const int pd = t.dim(2), ph = t.dim(3), pw = t.dim(4);
    const float* v = t.value().data();
    int64_t i = 0;
    for (int d = 0; d < pd; ++d)
      for (int h = 0; h < ph; ++h)
        for (int w = 0; w < pw; ++w, ++i) {
          const int64_t oi = out.index(origins[p].d + d, origins[p].h + h, origins[p].w + w);
          acc[static_cast<size_t>(oi)] += v[i];
          cnt[static_cast<size_t>(oi)] += 1;
        }
  }
  for (size_t i = 0; i < acc.size(); ++i) {
    if (cnt[i] == 0)
      throw DataError("stitch_patches: voxel " + std::to_string(i) + " not covered by any patch");
    out.labels[i] = (acc[i] / cnt[i]) > 0.5 ? 1 : 0;
  }
  return out;
}

// Averaged foreground probability field (same stitching, soft output).
inline Volume stitch_probabilities(const std::vector<Tensor>& fg_probs,
                                   const std::vector<PatchOrigin>& origins,
                                   const int* full_extents, const double* spacing) {
  Volume out = Volume::make(full_extents[0], full_extents[1], full_extents[2],
                            spacing[0], spacing[1], spacing[2]);
  std::vector<double> acc(static_cast<size_t>(out.voxels()), 0.0);
  std::vector<int> cnt(static_cast<size_t>(out.voxels()), 0);
  for (size_t p = 0; p < fg_probs.size(); ++p) {
    const Tensor& t = fg_probs[p];
    const int pd = t.dim(2), ph = t.dim(3), pw = t.dim(4);
    const float* v = t.value().data();
    int64_t i = 0;
    for (int d = 0; d < pd; ++d)
      for (int h = 0; h < ph; ++h)
        for (int w = 0; w < pw; ++w, ++i) {
          const int64_t oi = out.index(origins[p].d + d, origins[p].h + h, origins[p].w + w);
          acc[static_cast<size_t>(oi)] += v[i];
          cnt[static_cast<size_t>(oi)] += 1;
        }
  }
  for (size_t i = 0; i < acc.size(); ++i) {
    if (cnt[i] == 0) throw DataError("stitch_probabilities: uncovered voxel");
    out.data[i] = static_cast<float>(acc[i] / cnt[i]);
  }
  return out;
}

}  // namespace fracseg
