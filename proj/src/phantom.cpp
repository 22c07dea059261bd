#include "shaperefine/phantom.hpp"

#include <Eigen/Geometry>
#include <cmath>
#include <numbers>

#include "shaperefine/preproc.hpp"
#include "shaperefine/random.hpp"

namespace shaperefine {

namespace {

double sq(double x) { return x * x; }

}  // namespace

bool PhantomShape::in_lv_outer(const Vec3& p) const {
  return p.z() <= 0.0 && p.z() >= -lv_length &&
         (sq(p.x()) + sq(p.y())) / sq(lv_radius) + sq(p.z() / lv_length) <= 1.0;
}

bool PhantomShape::in_lv_cavity(const Vec3& p) const {
  const double r = lv_radius - lv_wall;
  const double l = lv_length - lv_wall;
  return p.z() <= 0.0 && p.z() >= -l && (sq(p.x()) + sq(p.y())) / sq(r) + sq(p.z() / l) <= 1.0;
}

bool PhantomShape::in_rv_outer(const Vec3& p) const {
  return p.z() <= 0.0 && p.z() >= -rv_length &&
         sq((p.x() + rv_offset) / rv_radius_u) + sq(p.y() / rv_radius_v) + sq(p.z() / rv_length) <= 1.0;
}

bool PhantomShape::in_rv_cavity(const Vec3& p) const {
  const double ru = rv_radius_u - rv_wall;
  const double rv = rv_radius_v - rv_wall;
  const double l = rv_length - rv_wall;
  return p.z() <= 0.0 && p.z() >= -l &&
         sq((p.x() + rv_offset) / ru) + sq(p.y() / rv) + sq(p.z() / l) <= 1.0;
}

std::uint8_t PhantomShape::classify_local(const Vec3& p) const {
  if (in_lv_cavity(p)) return kLvCavity;
  if (in_lv_outer(p)) return kLvWall;
  if (in_rv_cavity(p)) return kRvCavity;
  if (in_rv_outer(p)) return kRvWall;
  return kBackground;
}

std::uint8_t PhantomShape::classify(const Vec3& world) const {
  return classify_local(world_from_local.inverse().apply(world));
}

LandmarkSet PhantomShape::landmarks() const {
  const double w0 = -landmark_level * lv_length;
  const double r = lv_radius * std::sqrt(1.0 - sq(w0 / lv_length));
  // RV outer implicit function along the LV outer circle at level w0
  auto g = [&](double theta) {
    return sq((r * std::cos(theta) + rv_offset) / rv_radius_u) +
           sq(r * std::sin(theta) / rv_radius_v) + sq(w0 / rv_length) - 1.0;
  };
  double lo = 0.0, hi = std::numbers::pi;
  if (!(g(lo) > 0.0 && g(hi) < 0.0)) {
    throw ParameterError("phantom: RV does not straddle the LV at the landmark level");
  }
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (g(mid) > 0.0 ? lo : hi) = mid;
  }
  const double theta = 0.5 * (lo + hi);
  const double rv_half = rv_radius_u * std::sqrt(1.0 - sq(w0 / rv_length));
  const std::array<Vec3, kLandmarkCount> local = {
      Vec3(r * std::cos(theta), r * std::sin(theta), w0),
      Vec3(r * std::cos(theta), -r * std::sin(theta), w0),
      Vec3(-rv_offset - rv_half, 0.0, w0),
      Vec3(r, 0.0, w0),
      Vec3(0.0, 0.0, -lv_length),
      Vec3(0.0, 0.0, 0.0),
  };
  std::array<Vec3, kLandmarkCount> world;
  for (int n = 0; n < kLandmarkCount; ++n) world[n] = world_from_local.apply(local[n]);
  return LandmarkSet(world);
}

PhantomShape random_phantom_shape(std::uint64_t seed, const Geometry& geometry) {
  Rng rng(seed);
  PhantomShape s;
  s.lv_radius *= rng.uniform(0.9, 1.1);
  s.lv_length *= rng.uniform(0.92, 1.08);
  s.lv_wall *= rng.uniform(0.85, 1.15);
  s.rv_offset *= rng.uniform(0.9, 1.1);
  s.rv_radius_u *= rng.uniform(0.92, 1.08);
  s.rv_radius_v *= rng.uniform(0.9, 1.1);
  s.rv_length = std::min(s.rv_length * rng.uniform(0.9, 1.1), s.lv_length - 5.0);
  s.rv_wall *= rng.uniform(0.85, 1.15);

  const double scale = rng.uniform(0.9, 1.1);
  const double deg = std::numbers::pi / 180.0;
  const double spin = rng.uniform(-15.0, 15.0) * deg;
  const double tilt_x = rng.uniform(-5.0, 5.0) * deg;
  const double tilt_y = rng.uniform(-5.0, 5.0) * deg;
  const Mat3 rot = (Eigen::AngleAxisd(spin, Vec3::UnitZ()) * Eigen::AngleAxisd(tilt_y, Vec3::UnitY()) *
                    Eigen::AngleAxisd(tilt_x, Vec3::UnitX()))
                       .toRotationMatrix();
  const Vec3 centre = geometry.to_world(0.5 * Vec3(geometry.dims[0] - 1, geometry.dims[1] - 1, 0.0));
  const double apex_z = geometry.origin.z() + rng.uniform(5.0, 11.0);
  Vec3 base;
  base.x() = centre.x() + 8.0 + rng.uniform(-3.0, 3.0);
  base.y() = centre.y() + rng.uniform(-3.0, 3.0);
  // place the outer apex at apex_z
  base.z() = apex_z + scale * s.lv_length * rot(2, 2);
  s.world_from_local.matrix = scale * rot;
  s.world_from_local.translation = base;
  return s;
}

Phantom render_phantom(const PhantomShape& shape, const PhantomParams& params,
                       std::uint64_t noise_seed) {
  const auto& g = params.geometry;
  LabelGrid labels(g, kTissueClassCount);
  VolumeGrid raw(g);
  const auto to_local = shape.world_from_local.inverse();
  Rng rng(noise_seed);
  std::size_t v = 0;
  for (int k = 0; k < g.dims[2]; ++k) {
    for (int j = 0; j < g.dims[1]; ++j) {
      for (int i = 0; i < g.dims[0]; ++i, ++v) {
        const auto c = shape.classify_local(to_local.apply(g.to_world(i, j, k)));
        labels[v] = c;
        raw[v] = static_cast<float>(kPhantomIntensity[c] + params.noise_sd * rng.normal());
      }
    }
  }
  return Phantom{normalize_intensity(raw), std::move(labels), shape.landmarks(), shape};
}

Phantom make_phantom(std::uint64_t seed, const PhantomParams& params) {
  const auto shape = random_phantom_shape(seed, params.geometry);
  return render_phantom(shape, params, seed ^ 0x9e3779b97f4a7c15ULL);
}

Phantom make_ellipsoid_phantom(std::uint64_t seed, const Geometry& geometry, double noise_sd) {
  Rng rng(seed);
  const Vec3 ext = geometry.extent();
  const Vec3 centre = geometry.to_world(0.5 * Vec3(geometry.dims[0] - 1, geometry.dims[1] - 1,
                                                   geometry.dims[2] - 1)) +
                      Vec3(rng.uniform(-0.05, 0.05) * ext.x(), rng.uniform(-0.05, 0.05) * ext.y(),
                           rng.uniform(-0.05, 0.05) * ext.z());
  const Vec3 axes(rng.uniform(0.22, 0.32) * ext.x(), rng.uniform(0.22, 0.32) * ext.y(),
                  rng.uniform(0.22, 0.32) * ext.z());
  LabelGrid labels(geometry, kTissueClassCount);
  VolumeGrid raw(geometry);
  std::size_t v = 0;
  for (int k = 0; k < geometry.dims[2]; ++k) {
    for (int j = 0; j < geometry.dims[1]; ++j) {
      for (int i = 0; i < geometry.dims[0]; ++i, ++v) {
        const Vec3 d = (geometry.to_world(i, j, k) - centre).cwiseQuotient(axes);
        const bool inside = d.squaredNorm() <= 1.0;
        labels[v] = inside ? 1 : 0;
        raw[v] = static_cast<float>((inside ? 0.9 : 0.1) + noise_sd * rng.normal());
      }
    }
  }
  const std::array<Vec3, kLandmarkCount> pts = {
      centre + Vec3(axes.x(), 0, 0), centre - Vec3(axes.x(), 0, 0), centre + Vec3(0, axes.y(), 0),
      centre - Vec3(0, axes.y(), 0), centre + Vec3(0, 0, axes.z()), centre - Vec3(0, 0, axes.z())};
  PhantomShape none;
  return Phantom{normalize_intensity(raw), std::move(labels), LandmarkSet(pts), none};
}

}  // namespace shaperefine
