#pragma once

// Evaluation suite: DSC, average symmetric surface distance, and the
// symmetric 95% Hausdorff distance, all spacing-aware (mm).

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "fracseg/common.hpp"
#include "fracseg/volume.hpp"

namespace fracseg {

struct SurfacePoint {
  double z, y, x;  // mm, along (D,H,W)
};

struct SurfacePointSet {
  std::vector<SurfacePoint> points;
};

// 2|P∩G| / (|P|+|G|); both-empty pairs score 1.0.
inline double dsc(const LabelVolume& pred, const LabelVolume& truth) {
  require_same_geometry(pred, truth, "dsc");
  int64_t inter = 0, np = 0, ng = 0;
  for (size_t i = 0; i < pred.labels.size(); ++i) {
    np += pred.labels[i];
    ng += truth.labels[i];
    inter += pred.labels[i] & truth.labels[i];
  }
  if (np + ng == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
}

// Foreground voxels with at least one 6-connected background neighbor;
// volume faces count as background.
inline SurfacePointSet extract_surface(const LabelVolume& mask) {
  const int64_t fg = mask.foreground_count();
  if (fg == 0 || fg == mask.voxels())
    throw DataError("extract_surface: degenerate mask (all one label)");
  SurfacePointSet out;
  const int D = mask.extents[0], H = mask.extents[1], W = mask.extents[2];
  auto bg_at = [&](int d, int h, int w) {
    if (d < 0 || d >= D || h < 0 || h >= H || w < 0 || w >= W) return true;
    return mask.at(d, h, w) == 0;
  };
  for (int d = 0; d < D; ++d)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) {
        if (!mask.at(d, h, w)) continue;
        if (bg_at(d - 1, h, w) || bg_at(d + 1, h, w) || bg_at(d, h - 1, w) ||
            bg_at(d, h + 1, w) || bg_at(d, h, w - 1) || bg_at(d, h, w + 1)) {
          out.points.push_back({(d + 0.5) * mask.spacing[0], (h + 0.5) * mask.spacing[1],
                                (w + 0.5) * mask.spacing[2]});
        }
      }
  return out;
}

namespace detail {

// Directed nearest-neighbor distances from each point of `from` to `to`.
// Points are bucketed on a uniform grid to prune the search; results are
// exact (the ring expansion stops only once no closer cell can exist).
inline std::vector<double> directed_distances(const SurfacePointSet& from,
                                              const SurfacePointSet& to) {
  if (from.points.empty() || to.points.empty())
    throw DataError("surface distance: empty surface point set");
  std::vector<double> out;
  out.reserve(from.points.size());
  if (to.points.size() < 64) {
    for (const auto& p : from.points) {
      double best = std::numeric_limits<double>::max();
      for (const auto& q : to.points) {
        const double dz = p.z - q.z, dy = p.y - q.y, dx = p.x - q.x;
        best = std::min(best, dz * dz + dy * dy + dx * dx);
      }
      out.push_back(std::sqrt(best));
    }
    return out;
  }

  double lo[3] = {1e300, 1e300, 1e300}, hi[3] = {-1e300, -1e300, -1e300};
  for (const auto& q : to.points) {
    const double c[3] = {q.z, q.y, q.x};
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], c[a]);
      hi[a] = std::max(hi[a], c[a]);
    }
  }
  const double span = std::max({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2], 1e-9});
  const double cell = span / std::max(4.0, std::cbrt(static_cast<double>(to.points.size())));
  int dims[3];
  for (int a = 0; a < 3; ++a)
    dims[a] = std::max(1, static_cast<int>((hi[a] - lo[a]) / cell) + 1);
  auto cell_of = [&](double v, int a) {
    return std::min(dims[a] - 1, std::max(0, static_cast<int>((v - lo[a]) / cell)));
  };
  std::vector<std::vector<SurfacePoint>> grid(
      static_cast<size_t>(dims[0]) * dims[1] * dims[2]);
  for (const auto& q : to.points)
    grid[(static_cast<size_t>(cell_of(q.z, 0)) * dims[1] + cell_of(q.y, 1)) * dims[2] +
         cell_of(q.x, 2)].push_back(q);

  for (const auto& p : from.points) {
    const int cz = cell_of(p.z, 0), cy = cell_of(p.y, 1), cx = cell_of(p.x, 2);
    double best = std::numeric_limits<double>::max();
    const int max_ring = std::max({dims[0], dims[1], dims[2]});
    for (int ring = 0; ring <= max_ring; ++ring) {
      // once a hit exists, stop after the first ring that cannot improve it
      if (best < std::numeric_limits<double>::max()) {
        const double safe = (ring - 1) * cell;
        if (safe > 0 && safe * safe >= best) break;
      }
      for (int dz = -ring; dz <= ring; ++dz)
        for (int dy = -ring; dy <= ring; ++dy)
          for (int dx = -ring; dx <= ring; ++dx) {
            if (std::max({std::abs(dz), std::abs(dy), std::abs(dx)}) != ring) continue;
            const int z = cz + dz, y = cy + dy, x = cx + dx;
            if (z < 0 || z >= dims[0] || y < 0 || y >= dims[1] || x < 0 || x >= dims[2])
              continue;
            for (const auto& q :
                 grid[(static_cast<size_t>(z) * dims[1] + y) * dims[2] + x]) {
              const double ddz = p.z - q.z, ddy = p.y - q.y, ddx = p.x - q.x;
              best = std::min(best, ddz * ddz + ddy * ddy + ddx * ddx);
            }
          }
    }
    out.push_back(std::sqrt(best));
  }
  return out;
}

}  // namespace detail

// Mean over the union of both directed nearest-neighbor distance sets.
inline double assd(const SurfacePointSet& pred, const SurfacePointSet& truth) {
  const auto d_pt = detail::directed_distances(pred, truth);
  const auto d_tp = detail::directed_distances(truth, pred);
  double acc = 0.0;
  for (double d : d_pt) acc += d;
  for (double d : d_tp) acc += d;
  return acc / static_cast<double>(d_pt.size() + d_tp.size());
}

// 95th percentile of the pooled symmetric distance set, linear interpolation
// between order statistics.
inline double hd95(const SurfacePointSet& pred, const SurfacePointSet& truth) {
  auto pool = detail::directed_distances(pred, truth);
  const auto d_tp = detail::directed_distances(truth, pred);
  pool.insert(pool.end(), d_tp.begin(), d_tp.end());
  std::sort(pool.begin(), pool.end());
  const double rank = 0.95 * static_cast<double>(pool.size() - 1);
  const size_t lo = static_cast<size_t>(rank);
  if (lo + 1 >= pool.size()) return pool.back();
  const double f = rank - static_cast<double>(lo);
  return pool[lo] * (1.0 - f) + pool[lo + 1] * f;
}

struct CaseMetrics {
  std::string case_id;
  double dsc = 0.0;
  double assd_mm = 0.0;
  double hd95_mm = 0.0;
  bool surface_defined = true;  // false when either mask had no surface
};

struct MetricReport {
  std::vector<CaseMetrics> cases;
  double mean_dsc = 0.0, sd_dsc = 0.0;
  double mean_assd = 0.0, sd_assd = 0.0;
  double mean_hd95 = 0.0, sd_hd95 = 0.0;
  int surface_cases = 0;  // cases contributing to the distance aggregates
};

inline CaseMetrics evaluate_case(const std::string& case_id, const LabelVolume& pred,
                                 const LabelVolume& truth) {
  require_same_geometry(pred, truth, "evaluate_case");
  CaseMetrics m;
  m.case_id = case_id;
  m.dsc = dsc(pred, truth);
  const int64_t fp = pred.foreground_count(), ft = truth.foreground_count();
  const bool pred_ok = fp > 0 && fp < pred.voxels();
  const bool truth_ok = ft > 0 && ft < truth.voxels();
  if (pred_ok && truth_ok) {
    const auto sp = extract_surface(pred);
    const auto st = extract_surface(truth);
    m.assd_mm = assd(sp, st);
    m.hd95_mm = hd95(sp, st);
  } else {
    m.surface_defined = false;
  }
  return m;
}

// Mean and population standard deviation; undefined surface cases are
// excluded from the distance aggregates.
inline MetricReport aggregate(std::vector<CaseMetrics> cases) {
  if (cases.empty()) throw DataError("aggregate: no cases");
  MetricReport r;
  r.cases = std::move(cases);
  auto mean_sd = [](const std::vector<double>& xs, double& mean, double& sd) {
    double s = 0.0;
    for (double x : xs) s += x;
    mean = s / static_cast<double>(xs.size());
    double v = 0.0;
    for (double x : xs) v += (x - mean) * (x - mean);
    sd = std::sqrt(v / static_cast<double>(xs.size()));
  };
  std::vector<double> ds, as, hs;
  for (const auto& c : r.cases) {
    ds.push_back(c.dsc);
    if (c.surface_defined) {
      as.push_back(c.assd_mm);
      hs.push_back(c.hd95_mm);
    }
  }
  mean_sd(ds, r.mean_dsc, r.sd_dsc);
  r.surface_cases = static_cast<int>(as.size());
  if (!as.empty()) {
    mean_sd(as, r.mean_assd, r.sd_assd);
    mean_sd(hs, r.mean_hd95, r.sd_hd95);
  }
  return r;
}

// CSV: one row per case, then mean and sd rows.
inline void write_report_csv(const MetricReport& r, std::ostream& os) {
  os << "case_id,dsc,assd_mm,hd95_mm\n";
  os.precision(9);
  for (const auto& c : r.cases) {
    os << c.case_id << "," << c.dsc << ",";
    if (c.surface_defined)
      os << c.assd_mm << "," << c.hd95_mm << "\n";
    else
      os << "undefined,undefined\n";
  }
  os << "mean," << r.mean_dsc << "," << r.mean_assd << "," << r.mean_hd95 << "\n";
  os << "sd," << r.sd_dsc << "," << r.sd_assd << "," << r.sd_hd95 << "\n";
}

}  // namespace fracseg
