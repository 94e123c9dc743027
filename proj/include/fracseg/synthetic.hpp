#pragma once

// Synthetic fractured-bone generator: axis-aligned ellipsoid bodies with a
// bright cortical shell and dimmer cancellous interior, cut by planar
// fracture gaps whose faces expose the low-contrast interior intensity.

#include <string>
#include <vector>

#include "fracseg/common.hpp"
#include "fracseg/volume.hpp"

namespace fracseg {

struct SyntheticSpec {
  uint64_t seed = 1;
  int extents[3] = {48, 48, 48};        // D, H, W
  double spacing[3] = {0.8, 0.8, 0.8};  // mm
  int body_count = 2;
  double radius_min_mm = 8.0;
  double radius_max_mm = 14.0;
  int fracture_gaps = 2;
  double gap_min_mm = 1.0;
  double gap_max_mm = 2.5;
  double shell_thickness_mm = 2.0;
  float bone_intensity = 0.9f;
  float cancellous_intensity = 0.45f;
  float soft_tissue_intensity = 0.4f;
  float noise_sigma = 0.05f;

  void validate() const {
    if (body_count < 1) throw DataError("synthetic spec: body_count must be >= 1");
    if (!(radius_min_mm > 0) || radius_max_mm < radius_min_mm)
      throw DataError("synthetic spec: bad radius range");
    if (fracture_gaps < 0) throw DataError("synthetic spec: negative fracture_gaps");
    if (gap_max_mm < gap_min_mm) throw DataError("synthetic spec: bad gap range");
    for (int a = 0; a < 3; ++a) {
      if (extents[a] < 4) throw DataError("synthetic spec: extent too small");
      if (!(spacing[a] > 0)) throw DataError("synthetic spec: non-positive spacing");
      const double axis_mm = extents[a] * spacing[a];
      if (2.0 * radius_max_mm > axis_mm)
        throw DataError("synthetic spec: max radius " + std::to_string(radius_max_mm) +
                        "mm does not fit inside axis of " + std::to_string(axis_mm) + "mm");
    }
    const double min_pitch = std::min({spacing[0], spacing[1], spacing[2]});
    if (fracture_gaps > 0 && gap_min_mm < min_pitch)
      throw DataError("synthetic spec: gap width below one voxel pitch");
  }
};

inline std::pair<Volume, LabelVolume> generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const int D = spec.extents[0], H = spec.extents[1], W = spec.extents[2];
  Volume vol = Volume::make(D, H, W, spec.spacing[0], spec.spacing[1], spec.spacing[2]);
  LabelVolume lab = LabelVolume::make(D, H, W, spec.spacing[0], spec.spacing[1], spec.spacing[2]);

  std::fill(vol.data.begin(), vol.data.end(), spec.soft_tissue_intensity);

  struct Body {
    double center[3];  // mm, (z,y,x) along (D,H,W)
    double radii[3];
  };
  std::vector<Body> bodies;
  const double axis_mm[3] = {D * spec.spacing[0], H * spec.spacing[1], W * spec.spacing[2]};
  for (int b = 0; b < spec.body_count; ++b) {
    Body body;
    for (int a = 0; a < 3; ++a) {
      body.radii[a] = uniform(rng, static_cast<float>(spec.radius_min_mm),
                              static_cast<float>(spec.radius_max_mm));
      const double lo = body.radii[a];
      const double hi = axis_mm[a] - body.radii[a];
      body.center[a] = uniform(rng, static_cast<float>(lo), static_cast<float>(hi));
    }
    bodies.push_back(body);
  }

  struct Gap {
    size_t body;
    double normal[3];
    double offset_mm;  // signed distance of plane from body center along normal
    double half_width_mm;
  };
  std::vector<Gap> gaps;
  for (int g = 0; g < spec.fracture_gaps; ++g) {
    Gap gap;
    gap.body = static_cast<size_t>(uniform_index(rng, static_cast<int64_t>(bodies.size())));
    double norm = 0.0;
    for (int a = 0; a < 3; ++a) {
      gap.normal[a] = gaussian(rng, 0.0f, 1.0f);
      norm += gap.normal[a] * gap.normal[a];
    }
    norm = std::sqrt(std::max(norm, 1e-9));
    for (int a = 0; a < 3; ++a) gap.normal[a] /= norm;
    const double r_min = std::min({bodies[gap.body].radii[0], bodies[gap.body].radii[1],
                                   bodies[gap.body].radii[2]});
    gap.offset_mm = uniform(rng, static_cast<float>(-0.4 * r_min), static_cast<float>(0.4 * r_min));
    gap.half_width_mm = 0.5 * uniform(rng, static_cast<float>(spec.gap_min_mm),
                                      static_cast<float>(spec.gap_max_mm));
    gaps.push_back(gap);
  }

  for (int d = 0; d < D; ++d)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) {
        const double pos[3] = {(d + 0.5) * spec.spacing[0], (h + 0.5) * spec.spacing[1],
                               (w + 0.5) * spec.spacing[2]};
        // normalized ellipsoid radius of the closest-containing body
        double best_rho = 1e30;
        size_t best_body = 0;
        for (size_t b = 0; b < bodies.size(); ++b) {
          double rho = 0.0;
          for (int a = 0; a < 3; ++a) {
            const double t = (pos[a] - bodies[b].center[a]) / bodies[b].radii[a];
            rho += t * t;
          }
          rho = std::sqrt(rho);
          if (rho < best_rho) { best_rho = rho; best_body = b; }
        }
        if (best_rho >= 1.0) continue;  // outside every body

        bool in_gap = false;
        for (const Gap& gap : gaps) {
          if (gap.body != best_body) continue;
          double s = -gap.offset_mm;
          for (int a = 0; a < 3; ++a)
            s += (pos[a] - bodies[gap.body].center[a]) * gap.normal[a];
          if (std::abs(s) < gap.half_width_mm) { in_gap = true; break; }
        }
        if (in_gap) continue;  // fracture gap stays soft tissue

        lab.at(d, h, w) = 1;
        // shell thickness measured along the local radial direction
        const double r_local = std::min({bodies[best_body].radii[0],
                                         bodies[best_body].radii[1],
                                         bodies[best_body].radii[2]});
        const double shell_rho = std::max(0.0, 1.0 - spec.shell_thickness_mm / r_local);
        vol.at(d, h, w) = best_rho >= shell_rho ? spec.bone_intensity
                                                : spec.cancellous_intensity;
      }

  if (spec.noise_sigma > 0) {
    for (float& v : vol.data) {
      v += gaussian(rng, 0.0f, spec.noise_sigma);
      v = std::min(1.0f, std::max(0.0f, v));
    }
  }
  return {vol, lab};
}

}  // namespace fracseg
