#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "fracseg/metrics.hpp"

using namespace fracseg;
using Catch::Approx;

namespace {

std::vector<double> brute_force_directed(const SurfacePointSet& from,
                                         const SurfacePointSet& to) {
  std::vector<double> out;
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

SurfacePointSet random_cloud(Rng& rng, int n, double spread, double cz = 0,
                             double cy = 0, double cx = 0) {
  SurfacePointSet s;
  for (int i = 0; i < n; ++i)
    s.points.push_back({cz + uniform(rng, 0.0f, static_cast<float>(spread)),
                        cy + uniform(rng, 0.0f, static_cast<float>(spread)),
                        cx + uniform(rng, 0.0f, static_cast<float>(spread))});
  return s;
}

LabelVolume cube_mask(int n, int lo, int hi, double spacing = 1.0) {
  LabelVolume m = LabelVolume::make(n, n, n, spacing, spacing, spacing);
  for (int d = lo; d < hi; ++d)
    for (int h = lo; h < hi; ++h)
      for (int w = lo; w < hi; ++w) m.at(d, h, w) = 1;
  return m;
}

}  // namespace

TEST_CASE("dsc fixtures") {
  SECTION("identical masks score 1") {
    LabelVolume m = cube_mask(6, 1, 4);
    CHECK(dsc(m, m) == 1.0);
  }
  SECTION("disjoint masks score 0") {
    LabelVolume a = LabelVolume::make(2, 2, 2), b = LabelVolume::make(2, 2, 2);
    a.at(0, 0, 0) = 1;
    b.at(1, 1, 1) = 1;
    CHECK(dsc(a, b) == 0.0);
  }
  SECTION("partial overlap") {
    // |P|=2, |G|=2, |P∩G|=1 -> 2*1/4
    LabelVolume a = LabelVolume::make(1, 1, 3), b = LabelVolume::make(1, 1, 3);
    a.at(0, 0, 0) = a.at(0, 0, 1) = 1;
    b.at(0, 0, 1) = b.at(0, 0, 2) = 1;
    CHECK(dsc(a, b) == Approx(0.5));
  }
  SECTION("both empty scores 1") {
    LabelVolume a = LabelVolume::make(2, 2, 2), b = LabelVolume::make(2, 2, 2);
    CHECK(dsc(a, b) == 1.0);
  }
  SECTION("geometry mismatch is rejected") {
    LabelVolume a = LabelVolume::make(2, 2, 2), b = LabelVolume::make(2, 2, 3);
    CHECK_THROWS_AS(dsc(a, b), DataError);
  }
}

TEST_CASE("surface extraction of a 3x3x3 cube yields 26 points") {
  LabelVolume m = cube_mask(5, 1, 4);
  SurfacePointSet s = extract_surface(m);
  CHECK(s.points.size() == 26);  // all cube voxels except the center
  // voxel centers in mm: voxel index i sits at (i + 0.5) * spacing
  bool found_corner = false;
  for (const auto& p : s.points)
    found_corner = found_corner || (p.z == 1.5 && p.y == 1.5 && p.x == 1.5);
  CHECK(found_corner);
}

TEST_CASE("volume faces count as background for surface extraction") {
  // a full slab touching the boundary: every foreground voxel is surface
  LabelVolume m = LabelVolume::make(3, 3, 3);
  for (int h = 0; h < 3; ++h)
    for (int w = 0; w < 3; ++w) m.at(0, h, w) = 1;
  CHECK(extract_surface(m).points.size() == 9);
}

TEST_CASE("surface extraction rejects degenerate masks") {
  LabelVolume empty = LabelVolume::make(2, 2, 2);
  CHECK_THROWS_AS(extract_surface(empty), DataError);
  LabelVolume full = LabelVolume::make(2, 2, 2);
  std::fill(full.labels.begin(), full.labels.end(), uint8_t{1});
  CHECK_THROWS_AS(extract_surface(full), DataError);
}

TEST_CASE("grid-pruned nearest neighbor matches brute force") {
  Rng rng(31);
  SECTION("uniform clouds") {
    SurfacePointSet a = random_cloud(rng, 180, 20.0);
    SurfacePointSet b = random_cloud(rng, 240, 20.0);
    const auto fast = detail::directed_distances(a, b);
    const auto slow = brute_force_directed(a, b);
    REQUIRE(fast.size() == slow.size());
    for (size_t i = 0; i < fast.size(); ++i) CHECK(fast[i] == Approx(slow[i]).margin(1e-9));
  }
  SECTION("clustered clouds far apart") {
    SurfacePointSet a = random_cloud(rng, 100, 2.0);
    SurfacePointSet b = random_cloud(rng, 100, 2.0, 50.0, -30.0, 10.0);
    auto far = random_cloud(rng, 80, 2.0, -40.0, 25.0, -5.0);
    b.points.insert(b.points.end(), far.points.begin(), far.points.end());
    const auto fast = detail::directed_distances(a, b);
    const auto slow = brute_force_directed(a, b);
    for (size_t i = 0; i < fast.size(); ++i) CHECK(fast[i] == Approx(slow[i]).margin(1e-9));
  }
  SECTION("small sets fall back to brute force and still agree") {
    SurfacePointSet a = random_cloud(rng, 10, 5.0);
    SurfacePointSet b = random_cloud(rng, 12, 5.0);
    const auto fast = detail::directed_distances(a, b);
    const auto slow = brute_force_directed(a, b);
    for (size_t i = 0; i < fast.size(); ++i) CHECK(fast[i] == Approx(slow[i]).margin(1e-12));
  }
  SECTION("empty sets are rejected") {
    SurfacePointSet a = random_cloud(rng, 4, 1.0), empty;
    CHECK_THROWS_AS(detail::directed_distances(a, empty), DataError);
    CHECK_THROWS_AS(detail::directed_distances(empty, a), DataError);
  }
}

TEST_CASE("parallel sheets 2 mm apart have assd and hd95 of 2") {
  SurfacePointSet a, b;
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 10; ++x) {
      a.points.push_back({0.0, static_cast<double>(y), static_cast<double>(x)});
      b.points.push_back({2.0, static_cast<double>(y), static_cast<double>(x)});
    }
  CHECK(assd(a, b) == Approx(2.0));
  CHECK(hd95(a, b) == Approx(2.0));
}

TEST_CASE("hd95 interpolates between order statistics") {
  // pooled distances are {1} from truth->pred and {1..99} from pred->truth;
  // sorted pool[i] = max(i, 1), rank 0.95*99 = 94.05 -> 94.05
  SurfacePointSet pred, truth;
  truth.points.push_back({0, 0, 0});
  for (int i = 1; i <= 99; ++i) pred.points.push_back({0, 0, static_cast<double>(i)});
  CHECK(hd95(pred, truth) == Approx(94.05));
  CHECK(assd(pred, truth) == Approx((4950.0 + 1.0) / 100.0));
}

TEST_CASE("surface distances are symmetric and translation invariant") {
  Rng rng(77);
  SurfacePointSet a = random_cloud(rng, 90, 10.0);
  SurfacePointSet b = random_cloud(rng, 110, 10.0, 3.0, -2.0, 1.0);
  CHECK(assd(a, b) == Approx(assd(b, a)));
  CHECK(hd95(a, b) == Approx(hd95(b, a)));

  SurfacePointSet a2 = a, b2 = b;
  for (auto& p : a2.points) { p.z += 100; p.y -= 40; p.x += 7; }
  for (auto& p : b2.points) { p.z += 100; p.y -= 40; p.x += 7; }
  CHECK(assd(a2, b2) == Approx(assd(a, b)));
  CHECK(hd95(a2, b2) == Approx(hd95(a, b)));
}

TEST_CASE("distances scale with voxel spacing") {
  LabelVolume p1 = cube_mask(8, 1, 4), t1 = cube_mask(8, 3, 6);
  LabelVolume p2 = cube_mask(8, 1, 4, 2.0), t2 = cube_mask(8, 3, 6, 2.0);
  const double a1 = assd(extract_surface(p1), extract_surface(t1));
  const double a2 = assd(extract_surface(p2), extract_surface(t2));
  CHECK(a2 == Approx(2.0 * a1));
  const double h1 = hd95(extract_surface(p1), extract_surface(t1));
  const double h2 = hd95(extract_surface(p2), extract_surface(t2));
  CHECK(h2 == Approx(2.0 * h1));
}

TEST_CASE("evaluate_case") {
  SECTION("perfect prediction") {
    LabelVolume m = cube_mask(6, 1, 5);
    CaseMetrics c = evaluate_case("perfect", m, m);
    CHECK(c.dsc == 1.0);
    CHECK(c.surface_defined);
    CHECK(c.assd_mm == Approx(0.0));
    CHECK(c.hd95_mm == Approx(0.0));
  }
  SECTION("empty prediction leaves distances undefined") {
    LabelVolume truth = cube_mask(6, 1, 5);
    LabelVolume pred = LabelVolume::make(6, 6, 6);
    CaseMetrics c = evaluate_case("miss", pred, truth);
    CHECK(c.dsc == 0.0);
    CHECK_FALSE(c.surface_defined);
  }
}

TEST_CASE("aggregate means and population standard deviations") {
  CaseMetrics a, b;
  a.case_id = "a"; a.dsc = 0.9; a.assd_mm = 1.0; a.hd95_mm = 3.0;
  b.case_id = "b"; b.dsc = 1.0; b.assd_mm = 2.0; b.hd95_mm = 5.0;
  MetricReport r = aggregate({a, b});
  CHECK(r.mean_dsc == Approx(0.95));
  CHECK(r.sd_dsc == Approx(0.05));
  CHECK(r.mean_assd == Approx(1.5));
  CHECK(r.mean_hd95 == Approx(4.0));
  CHECK(r.surface_cases == 2);

  SECTION("undefined surfaces are excluded from distance aggregates") {
    CaseMetrics c;
    c.case_id = "c"; c.dsc = 0.0; c.surface_defined = false;
    MetricReport r2 = aggregate({a, b, c});
    CHECK(r2.surface_cases == 2);
    CHECK(r2.mean_assd == Approx(1.5));
    CHECK(r2.mean_dsc == Approx((0.9 + 1.0 + 0.0) / 3.0));
  }
  SECTION("no cases is an error") { CHECK_THROWS_AS(aggregate({}), DataError); }
}

TEST_CASE("report csv layout") {
  CaseMetrics a, b;
  a.case_id = "caseA"; a.dsc = 0.9; a.assd_mm = 1.0; a.hd95_mm = 3.0;
  b.case_id = "caseB"; b.dsc = 0.5; b.surface_defined = false;
  MetricReport r = aggregate({a, b});
  std::ostringstream os;
  write_report_csv(r, os);
  const std::string csv = os.str();
  CHECK(csv.find("case_id,dsc,assd_mm,hd95_mm") == 0);
  CHECK(csv.find("caseA,0.9,1,3") != std::string::npos);
  CHECK(csv.find("caseB,0.5,undefined,undefined") != std::string::npos);
  CHECK(csv.find("mean,") != std::string::npos);
  CHECK(csv.find("sd,") != std::string::npos);
}
