#pragma once

#include <cstdint>

#include "shaperefine/affine.hpp"
#include "shaperefine/volgrid.hpp"

namespace shaperefine {

// Analytic bi-ventricular shape in a local heart frame (u, v, w): w runs along
// the long axis with the base plane at w = 0 and the apex at w = -lv_length.
// The RV sits on the -u side of the LV.
struct PhantomShape {
  double lv_radius = 22.0;     // mm, outer
  double lv_length = 80.0;     // mm, base to outer apex
  double lv_wall = 6.0;        // mm
  double rv_offset = 16.0;     // mm, RV centre along -u
  double rv_radius_u = 22.0;   // mm
  double rv_radius_v = 30.0;   // mm
  double rv_length = 70.0;     // mm
  double rv_wall = 4.5;        // mm
  double landmark_level = 0.3; // fraction of lv_length below the base for inserts / lateral points

  AffineTransform world_from_local;  // similarity

  std::uint8_t classify_local(const Vec3& local) const;
  std::uint8_t classify(const Vec3& world) const;
  LandmarkSet landmarks() const;

  bool in_lv_outer(const Vec3& local) const;
  bool in_lv_cavity(const Vec3& local) const;
  bool in_rv_outer(const Vec3& local) const;
  bool in_rv_cavity(const Vec3& local) const;
};

struct PhantomParams {
  Geometry geometry{{64, 64, 64}, {1.25, 1.25, 2.0}, {0.0, 0.0, 0.0}};
  double noise_sd = 0.03;
};

struct Phantom {
  VolumeGrid volume;  // normalised to [0, 1]
  LabelGrid labels;
  LandmarkSet landmarks;
  PhantomShape shape;
};

// Randomised pose (rotation about the long axis, small tilt, translation,
// isotropic scale) and shape parameters, fully determined by the seed.
PhantomShape random_phantom_shape(std::uint64_t seed, const Geometry& geometry);
Phantom render_phantom(const PhantomShape& shape, const PhantomParams& params, std::uint64_t noise_seed);
Phantom make_phantom(std::uint64_t seed, const PhantomParams& params = {});

// Class intensities before noise and normalisation.
inline constexpr float kPhantomIntensity[kTissueClassCount] = {0.1f, 1.0f, 0.4f, 0.7f, 0.25f};

// Bright ellipsoid (class 1) on a dark background (class 0), 5-class label grid,
// with six distinct landmark voxels spread around the ellipsoid.
Phantom make_ellipsoid_phantom(std::uint64_t seed, const Geometry& geometry, double noise_sd = 0.03);

}  // namespace shaperefine
