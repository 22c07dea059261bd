#include "shaperefine/affine.hpp"

#include <Eigen/LU>
#include <cmath>

namespace shaperefine {

AffineTransform AffineTransform::from_row_major(const std::array<double, 12>& v) {
  AffineTransform t;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) t.matrix(r, c) = v[r * 4 + c];
    t.translation[r] = v[r * 4 + 3];
  }
  return t;
}

std::array<double, 12> AffineTransform::to_row_major() const {
  std::array<double, 12> v{};
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) v[r * 4 + c] = matrix(r, c);
    v[r * 4 + 3] = translation[r];
  }
  return v;
}

AffineTransform AffineTransform::inverse() const {
  const double det = matrix.determinant();
  const double scale = matrix.cwiseAbs().maxCoeff();
  if (!std::isfinite(det) || std::abs(det) <= 1e-12 * scale * scale * scale) {
    throw TransformError("affine transform is singular (det = " + std::to_string(det) + ")");
  }
  AffineTransform inv;
  inv.matrix = matrix.inverse();
  inv.translation = -(inv.matrix * translation);
  return inv;
}

AffineTransform AffineTransform::compose(const AffineTransform& inner) const {
  AffineTransform out;
  out.matrix = matrix * inner.matrix;
  out.translation = matrix * inner.translation + translation;
  return out;
}

}  // namespace shaperefine
