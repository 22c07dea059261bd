#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "shaperefine/affine.hpp"
#include "shaperefine/volgrid.hpp"

namespace shaperefine {

// Clips to the [1st, 99th] percentile order statistics and maps linearly to
// [0, 1]. A constant volume maps to all zeros.
VolumeGrid normalize_intensity(const VolumeGrid& v);

// Percentile as the order statistic at rank round(q * (n - 1)).
double order_statistic(std::span<const float> values, double q);

// Centres the input inside target_dims, padding with zero / background and
// cropping symmetrically. Retained voxels keep their physical positions.
VolumeGrid pad_crop_to(const VolumeGrid& g, const Index3& target_dims);
LabelGrid pad_crop_to(const LabelGrid& g, const Index3& target_dims);

struct LrSimParams {
  double target_slice_thickness = 10.0;  // mm
  double max_shift = 5.0;                // mm, per in-plane axis
  int apical_truncation_slices = 0;      // removed from the low-z end
  std::uint64_t seed = 0;
};

struct ShiftLog {
  // Shift applied to each retained output slice, in slice order.
  std::vector<std::array<double, 2>> shifts_mm;
  int decimation_factor = 1;
  int truncated_slices = 0;

  std::string to_json() const;
};

struct LrSimulation {
  VolumeGrid volume;
  LabelGrid labels;
  ShiftLog log;
};

// Thick-slice acquisition: through-plane boxcar averaging (labels take the
// centre slice), apical truncation, then an independent in-plane shift per slice.
LrSimulation simulate_lr(const VolumeGrid& hr_volume, const LabelGrid& hr_labels,
                         const LrSimParams& params);

// Position of a physical point after the slice it falls in was shifted.
Vec3 shift_point_with_slice(const Vec3& p, const Geometry& lr_geometry, const ShiftLog& log);

struct AugmentParams {
  std::pair<double, double> scale_range{0.9, 1.1};
  double rotation_max_deg = 10.0;
  double translation_max_mm = 5.0;
  std::pair<double, double> intensity_scale_range{0.9, 1.1};
  std::uint64_t seed = 0;
};

struct Augmented {
  VolumeGrid volume;
  LabelGrid labels;
  LandmarkSet landmarks;
  AffineTransform transform;  // forward point map applied to the content
  int rotation_axis = 2;
  double intensity_scale = 1.0;
};

// One random similarity transform (in-plane translation, isotropic scale,
// rotation about a single random axis through the grid centre).
Augmented augment_affine(const VolumeGrid& v, const LabelGrid& l, const LandmarkSet& lms,
                         const AugmentParams& params);

// Applies a given forward point map to volume (trilinear), labels (nearest)
// and landmarks (exact).
Augmented apply_content_transform(const VolumeGrid& v, const LabelGrid& l,
                                  const LandmarkSet& lms, const AffineTransform& forward);

}  // namespace shaperefine
