#include <algorithm>

#include "doctest.h"
#include "shaperefine/landmarks.hpp"
#include "shaperefine/metrics.hpp"
#include "shaperefine/phantom.hpp"
#include "shaperefine/regfuse.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace shaperefine;
using testsupport::cube;
using testsupport::fusion_oracle;

namespace {

// Same physical field of view as the full phantom at half the resolution.
const Geometry kSmall{{32, 32, 32}, {2.5, 2.5, 4.0}, Vec3::Zero()};

Phantom small_phantom(std::uint64_t seed) { return make_phantom(seed, PhantomParams{kSmall, 0.03}); }

Atlas as_atlas(const Phantom& p, std::string id) { return Atlas{std::move(id), p.volume, p.labels, p.landmarks}; }

}  // namespace

TEST_CASE("nmi invariants") {
  Rng rng(1);
  for (int n = 0; n < 5; ++n) {
    const auto a = testsupport::random_labels(cube(8), 4, rng);
    CHECK(nmi(a, a) == doctest::Approx(2.0).epsilon(1e-12));
    const auto b = testsupport::random_labels(cube(8), 3, rng);
    CHECK(std::abs(nmi(a, b) - nmi(b, a)) <= 1e-12);
  }
  const auto big_a = testsupport::random_labels(cube(64), 5, rng);
  const auto big_b = testsupport::random_labels(cube(64), 5, rng);
  CHECK(nmi(big_a, big_b) <= 1.05);
  CHECK(nmi(LabelGrid(cube(8), 4), testsupport::random_labels(cube(8), 4, rng)) == 1.0);
}

TEST_CASE("label consistency") {
  Rng rng(2);
  const auto s = testsupport::random_labels(cube(6), 5, rng);
  CHECK(label_consistency(s, one_hot(s)) == doctest::Approx(1.0).epsilon(1e-12));
  LabelGrid other(s.geometry(), 5);
  for (std::size_t v = 0; v < s.size(); ++v) other[v] = static_cast<std::uint8_t>((s[v] + 1) % 5);
  CHECK(label_consistency(s, one_hot(other)) == 0.0);
  LabelGrid half = s;
  for (std::size_t v = 0; v < s.size(); v += 2) half[v] = other[v];
  CHECK(label_consistency(s, one_hot(half)) == 0.5);
}

TEST_CASE("warps with trivial transforms") {
  Rng rng(3);
  const Geometry g{{8, 7, 6}, {1.25, 1.25, 2.0}, Vec3::Zero()};
  const auto l = testsupport::random_labels(g, 5, rng);
  CHECK(warp_labels(l, AffineTransform::identity(), g).labels == l);
  CHECK(warp_labels(l, FfdTransform(g, Vec3(5, 5, 8)), g).labels == l);
  CHECK(warp_labels(l, FfdTransform(g, Vec3(5, 5, 8)), g, WarpMode::kSoft).labels == l);

  AffineTransform shift;
  shift.translation = Vec3(2 * 1.25, 0, 2.0);  // two voxels in x, one in z
  const auto w = warp_labels(l, shift, g).labels;
  for (int k = 1; k < 6; ++k)
    for (int j = 0; j < 7; ++j)
      for (int i = 2; i < 8; ++i) CHECK(w(i, j, k) == l(i - 2, j, k - 1));
}

TEST_CASE("FFD evaluation paths agree") {
  const Geometry g{{12, 10, 9}, {1.25, 1.25, 2.0}, {3, -2, 1}};
  auto t = random_smooth_ffd(g, Vec3(5, 5, 8), Vec3(2, 2, 3), 42);
  const auto dense = t.dense_displacement();
  for (std::size_t v = 0; v < dense.size(); v += 7) {
    const auto idx = g.unravel(v);
    CHECK((dense[v] - t.displacement(g.to_world(idx[0], idx[1], idx[2]))).norm() < 1e-10);
  }
  // halving the spacing reproduces the same field
  const auto r = t.refined();
  CHECK(r.control_spacing() == Vec3(2.5, 2.5, 4));
  const auto dense_r = r.dense_displacement();
  for (std::size_t v = 0; v < dense.size(); ++v) CHECK((dense[v] - dense_r[v]).norm() < 1e-9);
  // adjoint: <B phi, g> == <phi, B^T g>
  Rng rng(4);
  std::vector<Vec3> gv(dense.size());
  for (auto& x : gv) x = Vec3(rng.normal(), rng.normal(), rng.normal());
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t v = 0; v < gv.size(); ++v) lhs += dense[v].dot(gv[v]);
  const auto adj = t.adjoint(gv);
  for (std::size_t q = 0; q < adj.size(); ++q) rhs += adj[q] * t.coefficients()[q];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
}

TEST_CASE("FFD file round trip") {
  testsupport::TempDir dir("ffd");
  const Geometry g{{10, 10, 8}, {1.25, 1.25, 2.0}, Vec3::Zero()};
  auto t = random_smooth_ffd(g, Vec3(5, 5, 8), Vec3(2, 2, 3), 7);
  AffineTransform a;
  a.matrix(0, 1) = 0.1;
  a.translation = Vec3(1, 2, 3);
  t.set_source_from_target(a);
  write_ffd(dir.path / "t.mgrid", t);
  const auto back = read_ffd(dir.path / "t.mgrid");
  CHECK(back.cells() == t.cells());
  CHECK(back.source_from_target().to_row_major() == a.to_row_major());
  for (std::size_t q = 0; q < t.coefficients().size(); ++q) {
    CHECK(back.coefficients()[q] == static_cast<double>(static_cast<float>(t.coefficients()[q])));
  }
}

TEST_CASE("negated FFD approximately undoes the warp") {
  const Geometry g{{40, 40, 24}, {1.25, 1.25, 2.0}, Vec3::Zero()};
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto blob = make_ellipsoid_phantom(seed, g).labels;
    auto t = random_smooth_ffd(g, Vec3(10, 10, 16), Vec3(2.5, 2.5, 4), 100 + seed);  // 8 voxel spacing
    auto inv = t;
    for (auto& c : inv.coefficients()) c = -c;
    const auto there = warp_labels(blob, t, g).labels;
    const auto back = warp_labels(there, inv, g).labels;
    CHECK(dice_index(blob, back, 1) >= 0.95);
  }
}

TEST_CASE("registration gradient matches finite differences") {
  const auto atlas = small_phantom(11);
  const auto target = warp_labels(atlas.labels, random_smooth_ffd(kSmall, Vec3(40, 40, 64), Vec3(3, 3, 5), 8), kSmall).labels;
  auto t = random_smooth_ffd(kSmall, Vec3(40, 40, 64), Vec3(1, 1, 1.5), 9);
  const auto ga = consistency_gradient(target, atlas.labels, t, GradientMode::kAnalytic);
  const auto gf = consistency_gradient(target, atlas.labels, t, GradientMode::kFiniteDifference, 1e-4);
  double dot = 0.0, na = 0.0, nf = 0.0;
  for (std::size_t q = 0; q < ga.size(); ++q) {
    dot += ga[q] * gf[q];
    na += ga[q] * ga[q];
    nf += gf[q] * gf[q];
  }
  CHECK(dot / std::sqrt(na * nf) > 0.999);
  CHECK(std::sqrt(na / nf) == doctest::Approx(1.0).epsilon(0.01));
}

TEST_CASE("registration stays put on a perfect match") {
  const auto p = small_phantom(12);
  RegistrationConfig cfg;
  cfg.levels = {{Vec3(40, 40, 64), 20, 2.0}, {Vec3(20, 20, 32), 20, 1.0}};
  const auto r = register_ffd(p.labels, p.labels, AffineTransform::identity(), cfg);
  CHECK(r.final_consistency >= 0.999);
  CHECK(r.transform.max_abs_displacement() < 1e-9);
  CHECK(r.trace.size() == 1);
}

TEST_CASE("registration recovers a smooth deformation monotonically") {
  // full resolution: on coarse voxels the soft indicators blur thin walls and
  // the undeformed start can outscore the true transform
  const auto p = make_phantom(100);
  const auto& g = p.labels.geometry();
  const auto truth = random_smooth_ffd(g, Vec3(20, 20, 32), Vec3(5, 5, 8), 500);
  const auto target = warp_labels(p.labels, truth, g).labels;
  RegistrationConfig cfg;
  cfg.levels = {{Vec3(40, 40, 64), 40, 2.0}, {Vec3(20, 20, 32), 40, 1.0}};
  cfg.convergence_tol = 0.0;
  const auto r = register_ffd(target, p.labels, AffineTransform::identity(), cfg);
  CHECK(std::is_sorted(r.trace.begin(), r.trace.end()));
  CHECK(r.final_consistency > r.initial_consistency);
  const auto w = warp_labels(p.labels, r.transform, g).labels;
  const auto before = score_segmentation(p.labels, target);
  const auto after = score_segmentation(w, target);
  for (int k = 0; k < 4; ++k) CHECK(after.dice[k] > before.dice[k]);
  // displacement bounded by iterations times the largest step
  CHECK(r.transform.max_abs_displacement() <= 80 * 2.0 * cfg.max_step_factor);
}

TEST_CASE("registration config validation") {
  RegistrationConfig cfg;
  cfg.levels = {{Vec3(40, 40, 64), 10, 1.0}, {Vec3(30, 20, 32), 10, 1.0}};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.levels = {};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  FusionConfig f;
  f.patch = {4, 7, 1};
  CHECK_THROWS_AS(f.validate(), ConfigError);
}

TEST_CASE("fusion matches the brute-force vote") {
  Rng rng(5);
  FusionConfig c;
  c.patch = {3, 3, 1};
  c.search = {3, 3, 3};
  for (int trial = 0; trial < 5; ++trial) {
    const auto g = cube(8);
    const auto target = testsupport::random_volume(g, rng);
    std::vector<WarpedAtlas> atlases;
    for (int n = 0; n < 2 + trial % 2; ++n) {
      atlases.push_back({testsupport::random_volume(g, rng), testsupport::random_labels(g, 4, rng)});
    }
    CHECK(fuse_labels(target, atlases, c) == fusion_oracle(target, atlases, c));
    std::reverse(atlases.begin(), atlases.end());
    CHECK(fuse_labels(target, atlases, c) == fusion_oracle(target, atlases, c));
  }
}

TEST_CASE("fusion special cases") {
  Rng rng(6);
  const auto g = cube(10);
  SUBCASE("self atlas wins when the centre weight beats every rival") {
    auto vol = testsupport::random_volume(g, rng);
    for (auto& x : vol.values()) x *= 10.0f;
    const auto labels = testsupport::random_labels(g, 5, rng);
    const std::vector<WarpedAtlas> one{{vol, labels}};
    const FusionConfig c;
    CHECK(fusion_oracle(vol, one, c) == labels);
    CHECK(fuse_labels(vol, one, c) == labels);
  }
  SUBCASE("unanimous atlases") {
    std::vector<WarpedAtlas> atlases;
    for (int n = 0; n < 3; ++n) atlases.push_back({testsupport::random_volume(g, rng), LabelGrid(g, 5, 3)});
    const auto out = fuse_labels(testsupport::random_volume(g, rng), atlases, FusionConfig{});
    for (std::size_t v = 0; v < out.size(); ++v) CHECK(out[v] == 3);
  }
  SUBCASE("one atlas with a unit search window returns its labels") {
    const auto labels = testsupport::random_labels(g, 5, rng);
    const std::vector<WarpedAtlas> one{{testsupport::random_volume(g, rng), labels}};
    FusionConfig c;
    c.search = {1, 1, 1};
    CHECK(fuse_labels(testsupport::random_volume(g, rng), one, c) == labels);
  }
}

TEST_CASE("atlas selection ranking") {
  std::vector<Atlas> atlases;
  for (int n = 0; n < 4; ++n) atlases.push_back(as_atlas(small_phantom(20 + n), "a" + std::to_string(n)));
  const auto target = small_phantom(22);
  const auto top = select_atlases(target.labels, target.landmarks, atlases, 4);
  REQUIRE(top.size() == 4);
  CHECK(top[0].id == "a2");
  CHECK(top[0].nmi == doctest::Approx(2.0).epsilon(1e-9));
  // independent scoring, sorted outside
  std::vector<std::pair<double, std::string>> ref;
  for (const auto& a : atlases) {
    const auto fit = fit_affine_12dof(a.landmarks, target.landmarks);
    ref.emplace_back(-nmi(target.labels, warp_labels(a.labels, fit.transform, kSmall).labels), a.id);
  }
  std::sort(ref.begin(), ref.end());
  for (int i = 0; i < 4; ++i) {
    CHECK(top[i].id == ref[i].second);
    CHECK(top[i].nmi == -ref[i].first);
  }
  CHECK(select_atlases(target.labels, target.landmarks, atlases, 2).size() == 2);
  CHECK_THROWS_AS(select_atlases(target.labels, target.landmarks, atlases, 5), ConfigError);
}

TEST_CASE("refine with the target among its atlases") {
  std::vector<Atlas> atlases;
  for (int n = 0; n < 6; ++n) atlases.push_back(as_atlas(small_phantom(30 + n), "s" + std::to_string(n)));
  const auto& self = atlases[3];
  RegistrationConfig reg;
  reg.levels = {{Vec3(40, 40, 64), 20, 2.0}};
  // small h so the exact self match outweighs every other candidate; at the
  // default the noise-level distances of the other atlases weigh almost as much
  FusionConfig fus;
  fus.h = 0.01;
  const auto a = refine(self.volume, self.labels, self.landmarks, atlases, reg, fus);
  const auto s = score_segmentation(a.labels, self.labels);
  for (double d : s.dice) CHECK(d >= 0.98);
  CHECK(a.report.atlases.front().id == "s3");
  const auto b = refine(self.volume, self.labels, self.landmarks, atlases, reg, fus);
  CHECK(a.labels == b.labels);
}
