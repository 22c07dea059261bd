#pragma once

#include <array>

#include "shaperefine/volgrid.hpp"

namespace shaperefine {

// Maps physical points p -> matrix * p + translation (millimetres).
struct AffineTransform {
  Mat3 matrix = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static AffineTransform identity() { return {}; }
  static AffineTransform from_row_major(const std::array<double, 12>& v);
  std::array<double, 12> to_row_major() const;

  Vec3 apply(const Vec3& p) const { return matrix * p + translation; }
  // Throws TransformError when the linear part is singular.
  AffineTransform inverse() const;
  AffineTransform compose(const AffineTransform& inner) const;  // this(inner(p))
  bool is_finite() const { return matrix.allFinite() && translation.allFinite(); }
};

}  // namespace shaperefine
