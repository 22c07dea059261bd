#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "shaperefine/affine.hpp"
#include "shaperefine/volgrid.hpp"

namespace shaperefine {

// Mean physical coordinate of each landmark class 1..6 of a 7-class grid.
// Throws IncompleteLandmarksError naming every absent landmark.
LandmarkSet centroid_landmarks(const LabelGrid& l);

struct AffineFit {
  AffineTransform transform;
  double rms_residual = 0.0;  // mm
  double max_residual = 0.0;  // mm
  std::vector<double> residuals;
};

// Least-squares M, t minimising sum |M src_i + t - dst_i|^2 (normal equations).
// Throws RankDeficiencyError when the centred source points do not span 3D.
AffineFit fit_affine_points(std::span<const Vec3> src, std::span<const Vec3> dst);
AffineFit fit_affine_12dof(const LandmarkSet& src, const LandmarkSet& dst);

struct LandmarkErrorReport {
  std::array<double, kLandmarkCount> distance_mm{};
};

LandmarkErrorReport p2p_errors(const LandmarkSet& predicted, const LandmarkSet& reference);
// Pairs entries by name; throws PairingError when the name sets differ.
LandmarkErrorReport p2p_errors(const std::vector<std::pair<std::string, Vec3>>& predicted,
                               const std::vector<std::pair<std::string, Vec3>>& reference);

struct LandmarkCohortStats {
  struct PerLandmark {
    double mean = 0.0;
    double sd = 0.0;                // population convention
    std::vector<double> sorted_mm;  // CDF support
  };
  std::array<PerLandmark, kLandmarkCount> landmarks;
  std::size_t subjects = 0;

  std::string to_json() const;
};

// Reduces reports in the order given. Throws ParameterError on an empty list.
LandmarkCohortStats reduce_landmark_errors(std::span<const LandmarkErrorReport> reports);

// Two columns: error_mm, cumulative_fraction.
void write_cdf_csv(const std::filesystem::path& path, std::span<const double> sorted_errors);

}  // namespace shaperefine
