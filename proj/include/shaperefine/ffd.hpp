#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "shaperefine/affine.hpp"
#include "shaperefine/volgrid.hpp"

namespace shaperefine {

// Cubic B-spline free-form deformation over a target-space domain, composed
// with an affine map into the source image:
//   map(x) = source_from_target(x + u(x)),  u(x) = sum_l B_l(x) phi_l.
// Lattice index l along an axis sits at domain.origin + (l - 1) * control_spacing,
// so there is one control point of margin before the domain and two after it.
class FfdTransform {
 public:
  FfdTransform() = default;
  FfdTransform(const Geometry& domain, const Vec3& control_spacing,
               const AffineTransform& source_from_target = AffineTransform::identity());
  // Explicit cell counts; used by refinement and deserialisation.
  FfdTransform(const Geometry& domain, const Vec3& control_spacing, const Index3& cells,
               const AffineTransform& source_from_target);

  const Geometry& domain() const { return domain_; }
  const Vec3& control_spacing() const { return control_spacing_; }
  const Index3& cells() const { return cells_; }
  Index3 lattice_dims() const { return {cells_[0] + 3, cells_[1] + 3, cells_[2] + 3}; }
  std::size_t control_count() const;
  const AffineTransform& source_from_target() const { return affine_; }
  void set_source_from_target(const AffineTransform& a) { affine_ = a; }

  // Displacements as x,y,z triples, lattice x-fastest.
  std::vector<double>& coefficients() { return phi_; }
  const std::vector<double>& coefficients() const { return phi_; }
  Eigen::Map<Vec3> control(int i, int j, int k);
  Vec3 control(int i, int j, int k) const;

  Vec3 displacement(const Vec3& world) const;
  Vec3 map(const Vec3& world) const { return affine_.apply(world + displacement(world)); }

  // u(x) at every voxel of the domain, x-fastest. Separable evaluation.
  std::vector<Vec3> dense_displacement() const;
  // Source-space positions map(x) at every domain voxel.
  std::vector<Vec3> dense_map() const;

  // Adjoint of dense_displacement: sum_x B_l(x) g(x) for every control point.
  std::vector<double> adjoint(const std::vector<Vec3>& g) const;

  // Same deformation on a lattice with half the control spacing.
  FfdTransform refined() const;

  double max_abs_displacement() const;
  bool is_finite() const;

 private:
  Geometry domain_;
  Vec3 control_spacing_{1, 1, 1};
  Index3 cells_{1, 1, 1};
  AffineTransform affine_;
  std::vector<double> phi_;
};

// Uniform cubic B-spline basis weights for fractional position u in [0, 1).
void bspline_weights(double u, double w[4]);

// Control displacements drawn uniformly in [-max_disp_mm, +max_disp_mm] per component.
FfdTransform random_smooth_ffd(const Geometry& domain, const Vec3& control_spacing,
                               const Vec3& max_disp_mm, std::uint64_t seed);

void write_ffd(const std::filesystem::path& path, const FfdTransform& t);
FfdTransform read_ffd(const std::filesystem::path& path);

}  // namespace shaperefine
