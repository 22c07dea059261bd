#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "shaperefine/affine.hpp"
#include "shaperefine/ffd.hpp"
#include "shaperefine/volgrid.hpp"

namespace shaperefine {

struct PyramidLevel {
  Vec3 control_spacing{20.0, 20.0, 32.0};  // mm
  int max_iterations = 60;
  double step_size = 1.0;  // mm, largest control-point move per step
};

enum class GradientMode { kAnalytic, kFiniteDifference };

struct RegistrationConfig {
  std::vector<PyramidLevel> levels{PyramidLevel{Vec3(40.0, 40.0, 64.0), 60, 2.0}};
  double convergence_tol = 1e-5;  // relative gain of an accepted step
  GradientMode gradient_mode = GradientMode::kAnalytic;
  double min_step_fraction = 1.0 / 64.0;  // halving below this ends the level
  double fd_step = 1e-3;                  // mm, finite-difference mode only
  double step_growth = 1.5;               // step multiplier after an accepted step
  double max_step_factor = 8.0;           // cap on step / step_size

  // Each level must halve the previous control spacing on every axis.
  void validate() const;
};

struct FusionConfig {
  double h = 10.0;
  Index3 patch{7, 7, 1};
  Index3 search{7, 7, 3};
  int atlas_count = 5;

  void validate() const;
};

enum class WarpMode { kNearest, kSoft };

struct WarpedLabels {
  LabelGrid labels;
  WarpMode mode = WarpMode::kNearest;
};

// Backward warps into `target`. The affine overloads take the source-to-target
// map and sample through its inverse; FFD overloads sample at ffd.map(x).
WarpedLabels warp_labels(const LabelGrid& l, const AffineTransform& source_to_target,
                         const Geometry& target, WarpMode mode = WarpMode::kNearest);
WarpedLabels warp_labels(const LabelGrid& l, const FfdTransform& t, const Geometry& target,
                         WarpMode mode = WarpMode::kNearest);
VolumeGrid warp_volume(const VolumeGrid& v, const AffineTransform& source_to_target,
                       const Geometry& target);
VolumeGrid warp_volume(const VolumeGrid& v, const FfdTransform& t, const Geometry& target);
// Trilinear warp of the one-hot channels.
ProbGrid warp_soft(const LabelGrid& l, const FfdTransform& t, const Geometry& target);

// (H(A) + H(B)) / H(A,B) with natural logs; 1 when either side is constant.
double nmi(const LabelGrid& a, const LabelGrid& b);

// sum_j q_{j, s_j} / |domain|, the fraction of agreeing voxels for hard q.
double label_consistency(const LabelGrid& s, const ProbGrid& warped_soft);

struct AtlasMatch {
  std::size_t index = 0;  // position in the input list
  std::string id;
  AffineTransform source_to_target;
  double fit_rms_mm = 0.0;
  double nmi = 0.0;
};

// Scores every atlas after landmark-affine alignment and returns the best L,
// ordered by descending NMI then id. Throws ConfigError if fewer than L atlases.
std::vector<AtlasMatch> select_atlases(const LabelGrid& target_seg, const LandmarkSet& target_lms,
                                       std::span<const Atlas> atlases, int L, int workers = 1);

// Objective of the deformable stage for FFD t (domain = s.geometry()).
double consistency_objective(const LabelGrid& s, const LabelGrid& atlas_labels,
                             const FfdTransform& t);
// d objective / d control displacements, flattened like t.coefficients().
std::vector<double> consistency_gradient(const LabelGrid& s, const LabelGrid& atlas_labels,
                                         const FfdTransform& t, GradientMode mode,
                                         double fd_step = 1e-3);

struct RegistrationResult {
  FfdTransform transform;
  std::vector<double> trace;  // objective after each accepted step, initial value first
  double initial_consistency = 0.0;
  double final_consistency = 0.0;
  int iterations = 0;
};

// Gradient ascent on the consistency objective, coarse to fine. `init` maps
// atlas points to target points.
RegistrationResult register_ffd(const LabelGrid& s, const LabelGrid& atlas_labels,
                                const AffineTransform& init, const RegistrationConfig& cfg);

struct WarpedAtlas {
  VolumeGrid volume;
  LabelGrid labels;
};

// Non-local patch vote. Ties go to the lowest label.
LabelGrid fuse_labels(const VolumeGrid& target, std::span<const WarpedAtlas> atlases,
                      const FusionConfig& cfg, int workers = 1);

struct RefineReport {
  struct AtlasEntry {
    std::string id;
    double nmi_affine = 0.0;
    double nmi_deformable = 0.0;
    double consistency_initial = 0.0;
    double consistency_final = 0.0;
    int iterations = 0;
  };
  std::vector<AtlasEntry> atlases;
  double seconds_select = 0.0;
  double seconds_register = 0.0;
  double seconds_fuse = 0.0;
  FusionConfig fusion;

  std::string to_json() const;
};

struct RefineResult {
  LabelGrid labels;
  RefineReport report;
};

// Upsamples the LR segmentation (nearest) and volume (trilinear) onto the HR
// grid, then selection, registration, warping and fusion. The HR grid defaults
// to the first atlas's geometry.
RefineResult refine(const VolumeGrid& target_lr, const LabelGrid& lr_seg,
                    const LandmarkSet& lr_lms, std::span<const Atlas> atlases,
                    const RegistrationConfig& reg_cfg, const FusionConfig& fus_cfg,
                    int workers = 1, std::optional<Geometry> hr_geometry = std::nullopt);

}  // namespace shaperefine
