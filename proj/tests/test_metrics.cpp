#include <cmath>
#include <fstream>
#include <limits>

#include "doctest.h"
#include "json.hpp"
#include "shaperefine/metrics.hpp"
#include "support.hpp"

using namespace shaperefine;
using testsupport::cube;

namespace {

const Geometry kAniso{{9, 8, 7}, {1.25, 1.25, 2.0}, Vec3::Zero()};

// O(n^2) symmetric Hausdorff over voxel centres.
double hausdorff_oracle(const LabelGrid& a, const LabelGrid& b, int k) {
  std::vector<Vec3> pa, pb;
  const auto& g = a.geometry();
  for (std::size_t v = 0; v < a.size(); ++v) {
    const auto idx = g.unravel(v);
    if (a[v] == k) pa.push_back(g.to_world(idx[0], idx[1], idx[2]));
    if (b[v] == k) pb.push_back(g.to_world(idx[0], idx[1], idx[2]));
  }
  auto directed = [](const std::vector<Vec3>& from, const std::vector<Vec3>& to) {
    double worst = 0.0;
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) best = std::min(best, (p - q).norm());
      worst = std::max(worst, best);
    }
    return worst;
  };
  return std::max(directed(pa, pb), directed(pb, pa));
}

}  // namespace

TEST_CASE("dice examples") {
  Rng rng(1);
  const auto a = testsupport::random_labels(cube(5), 5, rng);
  for (int k = 0; k < 5; ++k) CHECK(dice_index(a, a, k) == 1.0);

  LabelGrid x(cube(4), 5), y(cube(4), 5);
  for (int v = 0; v < 8; ++v) x[v] = 1;
  for (int v = 8; v < 16; ++v) y[v] = 1;
  CHECK(dice_index(x, y, 1) == 0.0);
  CHECK(dice_index(x, y, 3) == 1.0);  // absent in both

  // 8 voxels vs 4 of them plus 4 others: 2*4 / 16
  LabelGrid z(cube(4), 5);
  for (int v = 4; v < 12; ++v) z[v] = 1;
  CHECK(dice_index(x, z, 1) == 0.5);
}

TEST_CASE("hausdorff basics") {
  LabelGrid a(kAniso, 5), b(kAniso, 5);
  a(3, 3, 3) = 1;
  b(3, 3, 3) = 1;
  CHECK(hausdorff(a, b, 1) == 0.0);
  b(3, 3, 3) = 0;
  b(3, 3, 4) = 1;  // one slice apart
  CHECK(hausdorff(a, b, 1) == doctest::Approx(2.0).epsilon(1e-12));
  b(3, 3, 4) = 0;
  b(5, 4, 3) = 1;
  CHECK(hausdorff(a, b, 1) == doctest::Approx(std::hypot(2.5, 1.25)).epsilon(1e-12));
  CHECK_THROWS_AS(hausdorff(a, LabelGrid(kAniso, 5), 1), UndefinedDistanceError);
  CHECK_THROWS_AS(hausdorff(LabelGrid(kAniso, 5), a, 1), UndefinedDistanceError);
}

TEST_CASE("hausdorff matches brute force on sparse masks") {
  Rng rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    LabelGrid a(kAniso, 5), b(kAniso, 5);
    for (std::size_t v = 0; v < a.size(); ++v) {
      if (rng.uniform() < 0.05) a[v] = 2;
      if (rng.uniform() < 0.05) b[v] = 2;
    }
    a[trial] = 2;
    b[a.size() - 1 - trial] = 2;
    CHECK(hausdorff(a, b, 2) == doctest::Approx(hausdorff_oracle(a, b, 2)).epsilon(1e-12));
  }
}

TEST_CASE("distance transform against brute force") {
  Rng rng(3);
  LabelGrid l(kAniso, 5);
  for (int n = 0; n < 4; ++n) l[rng.uniform_int(0, static_cast<int>(l.size()) - 1)] = 4;
  const auto dt = squared_distance_transform(l, 4);
  const auto& g = l.geometry();
  for (std::size_t v = 0; v < l.size(); ++v) {
    const auto iv = g.unravel(v);
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t u = 0; u < l.size(); ++u) {
      if (l[u] != 4) continue;
      const auto iu = g.unravel(u);
      best = std::min(best, (g.to_world(iv[0], iv[1], iv[2]) - g.to_world(iu[0], iu[1], iu[2])).squaredNorm());
    }
    CHECK(dt[v] == doctest::Approx(best).epsilon(1e-12));
  }
  for (double d : squared_distance_transform(l, 3)) CHECK(std::isinf(d));
}

TEST_CASE("clinical measures") {
  const Geometry g{{10, 10, 20}, {1.25, 1.25, 2.0}, Vec3::Zero()};
  LabelGrid l(g, 5);
  for (int v = 0; v < 1000; ++v) l[v] = kLvCavity;
  for (int v = 1000; v < 2000; ++v) l[v] = kLvWall;
  const auto m = clinical_measures(l);
  CHECK(m.lvv_ml == doctest::Approx(3.125).epsilon(1e-12));
  CHECK(m.lvm_g == doctest::Approx(3.28125).epsilon(1e-12));
  CHECK(m.rvv_ml == 0.0);
  CHECK(m.rvm_g == 0.0);
  const auto empty = clinical_measures(LabelGrid(g, 5));
  CHECK(empty.lvv_ml == 0.0);
  CHECK(empty.lvm_g == 0.0);
}

TEST_CASE("cohort reduction") {
  SegScore one;
  one.dice = {0.9, 0.8, 0.7, 0.6};
  one.hausdorff_mm = {1.0, 2.0, std::nullopt, 4.0};
  auto f = cohort_report(std::vector<SegScore>{one});
  REQUIRE(f.size() == 8);
  CHECK(f[0].name == "dice_LVC");
  CHECK(f[0].mean == 0.9);
  CHECK(f[0].sd == 0.0);
  CHECK(f[6].count == 0);

  SegScore two = one;
  two.dice[0] = 0.7;
  f = cohort_report(std::vector<SegScore>{one, two});
  CHECK(f[0].mean == doctest::Approx(0.8));
  CHECK(f[0].sd == doctest::Approx(0.1));
  CHECK(f[0].count == 2);

  const auto c = cohort_report(std::vector<ClinicalMeasures>{{1, 2, 3, 4}, {3, 2, 1, 0}});
  REQUIRE(c.size() == 4);
  CHECK(c[0].mean == 2.0);
  CHECK(c[0].sd == 1.0);
  CHECK(c[1].sd == 0.0);
  CHECK_THROWS_AS(cohort_report(std::vector<SegScore>{}), ParameterError);

  const auto j = nlohmann::json::parse(summary_to_json(c));
  CHECK(j["sd_convention"] == "population");
  CHECK(j["fields"].size() == 4);
}

TEST_CASE("score csv") {
  testsupport::TempDir dir("scores");
  SegScore s;
  s.dice = {1, 0.5, 0.25, 0};
  s.hausdorff_mm = {0.0, 2.0, 3.5, std::nullopt};
  write_scores_csv(dir.path / "s.csv", std::vector<SubjectScore>{{"p1", s}});
  std::ifstream in(dir.path / "s.csv");
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  REQUIRE(lines.size() == 5);
  CHECK(lines[0] == "subject_id,class,dice,hausdorff_mm");
  CHECK(lines[2] == "p1,LVW,0.5,2");
  CHECK(lines[4] == "p1,RVW,0,nan");
}
