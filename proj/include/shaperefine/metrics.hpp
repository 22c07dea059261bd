#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "shaperefine/volgrid.hpp"

namespace shaperefine {

inline constexpr double kMyocardialDensity = 1.05;  // g/ml

// 2|A n B| / (|A| + |B|) for class k; 1 when both masks are empty.
double dice_index(const LabelGrid& a, const LabelGrid& b, int k);

// Symmetric Hausdorff distance (mm) between the class-k voxel-centre sets.
// Throws UndefinedDistanceError when either mask is empty.
double hausdorff(const LabelGrid& a, const LabelGrid& b, int k);

// Squared Euclidean distance (mm^2) from every voxel to the nearest voxel of
// class k; +inf everywhere when the class is absent.
std::vector<double> squared_distance_transform(const LabelGrid& l, int k);

struct SegScore {
  // Foreground classes LVC, LVW, RVC, RVW in that order.
  std::array<double, kTissueClassCount - 1> dice{};
  std::array<std::optional<double>, kTissueClassCount - 1> hausdorff_mm{};
};

SegScore score_segmentation(const LabelGrid& predicted, const LabelGrid& reference);

struct ClinicalMeasures {
  double lvv_ml = 0.0;
  double lvm_g = 0.0;
  double rvv_ml = 0.0;
  double rvm_g = 0.0;
};

ClinicalMeasures clinical_measures(const LabelGrid& l);

struct FieldSummary {
  std::string name;
  double mean = 0.0;
  double sd = 0.0;  // population
  std::size_t count = 0;
};

// Mean and population sd of every field in the order given. Hausdorff entries
// that are undefined are skipped for that field. Throws ParameterError on empty input.
std::vector<FieldSummary> cohort_report(std::span<const SegScore> scores);
std::vector<FieldSummary> cohort_report(std::span<const ClinicalMeasures> measures);
std::string summary_to_json(std::span<const FieldSummary> fields);

struct SubjectScore {
  std::string subject_id;
  SegScore score;
};
struct SubjectClinical {
  std::string subject_id;
  ClinicalMeasures measures;
};

void write_scores_csv(const std::filesystem::path& path, std::span<const SubjectScore> rows);
void write_clinical_csv(const std::filesystem::path& path, std::span<const SubjectClinical> rows);

}  // namespace shaperefine
