#include "shaperefine/landmarks.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "json.hpp"
#include "shaperefine/mgrid.hpp"

namespace shaperefine {

LandmarkSet centroid_landmarks(const LabelGrid& l) {
  if (l.class_count() != kLandmarkClassCount) {
    throw ShapeError("centroid_landmarks: expected a 7-class landmark grid");
  }
  std::array<Vec3, kLandmarkCount> sum;
  sum.fill(Vec3::Zero());
  std::array<std::size_t, kLandmarkCount> count{};
  const auto& g = l.geometry();
  for (std::size_t v = 0; v < l.size(); ++v) {
    const int c = l[v];
    if (c == 0) continue;
    const auto idx = g.unravel(v);
    sum[c - 1] += g.to_world(idx[0], idx[1], idx[2]);
    ++count[c - 1];
  }
  std::string missing;
  for (int n = 0; n < kLandmarkCount; ++n) {
    if (count[n] == 0) {
      if (!missing.empty()) missing += ", ";
      missing += kLandmarkNames[n];
    }
  }
  if (!missing.empty()) throw IncompleteLandmarksError("missing landmarks: " + missing);
  std::array<Vec3, kLandmarkCount> pos;
  for (int n = 0; n < kLandmarkCount; ++n) pos[n] = sum[n] / static_cast<double>(count[n]);
  return LandmarkSet(pos);
}

AffineFit fit_affine_points(std::span<const Vec3> src, std::span<const Vec3> dst) {
  if (src.size() != dst.size()) throw PairingError("affine fit: point counts differ");
  if (src.size() < 4) throw RankDeficiencyError("affine fit: need at least 4 point pairs");
  const double n = static_cast<double>(src.size());
  Vec3 ps = Vec3::Zero(), pd = Vec3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    ps += src[i];
    pd += dst[i];
  }
  ps /= n;
  pd /= n;
  Mat3 sxx = Mat3::Zero(), syx = Mat3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const Vec3 a = src[i] - ps;
    const Vec3 b = dst[i] - pd;
    sxx += a * a.transpose();
    syx += b * a.transpose();
  }
  const Eigen::SelfAdjointEigenSolver<Mat3> eig(sxx);
  const auto ev = eig.eigenvalues();  // ascending
  if (!(ev(2) > 0.0) || ev(0) <= 1e-10 * ev(2)) {
    throw RankDeficiencyError("affine fit: source points are coplanar or degenerate (eigenvalues " +
                              std::to_string(ev(0)) + ", " + std::to_string(ev(1)) + ", " +
                              std::to_string(ev(2)) + ")");
  }
  // M sxx = syx, sxx symmetric positive definite
  AffineFit fit;
  fit.transform.matrix = sxx.ldlt().solve(syx.transpose()).transpose();
  fit.transform.translation = pd - fit.transform.matrix * ps;
  double ss = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double r = (fit.transform.apply(src[i]) - dst[i]).norm();
    fit.residuals.push_back(r);
    ss += r * r;
    fit.max_residual = std::max(fit.max_residual, r);
  }
  fit.rms_residual = std::sqrt(ss / n);
  return fit;
}

AffineFit fit_affine_12dof(const LandmarkSet& src, const LandmarkSet& dst) {
  src.validate();
  dst.validate();
  return fit_affine_points(src.positions(), dst.positions());
}

LandmarkErrorReport p2p_errors(const LandmarkSet& predicted, const LandmarkSet& reference) {
  LandmarkErrorReport r;
  for (int n = 0; n < kLandmarkCount; ++n) r.distance_mm[n] = (predicted[n] - reference[n]).norm();
  return r;
}

LandmarkErrorReport p2p_errors(const std::vector<std::pair<std::string, Vec3>>& predicted,
                               const std::vector<std::pair<std::string, Vec3>>& reference) {
  auto index = [](const std::vector<std::pair<std::string, Vec3>>& v, const char* side) {
    std::map<std::string, Vec3> m;
    for (const auto& [name, p] : v) {
      if (!m.emplace(name, p).second) {
        throw PairingError(std::string(side) + " landmarks: duplicate name '" + name + "'");
      }
    }
    return m;
  };
  const auto a = index(predicted, "predicted");
  const auto b = index(reference, "reference");
  for (const auto& [name, p] : a) {
    if (!b.count(name)) throw PairingError("landmark '" + name + "' has no reference partner");
  }
  for (const auto& [name, p] : b) {
    if (!a.count(name)) throw PairingError("landmark '" + name + "' has no predicted partner");
  }
  LandmarkErrorReport r;
  for (int n = 0; n < kLandmarkCount; ++n) {
    const std::string name(kLandmarkNames[n]);
    if (!a.count(name)) throw PairingError("landmark '" + name + "' missing from both sets");
    r.distance_mm[n] = (a.at(name) - b.at(name)).norm();
  }
  if (a.size() != kLandmarkCount) throw PairingError("unknown landmark names present");
  return r;
}

LandmarkCohortStats reduce_landmark_errors(std::span<const LandmarkErrorReport> reports) {
  if (reports.empty()) throw ParameterError("reduce_landmark_errors: empty cohort");
  LandmarkCohortStats s;
  s.subjects = reports.size();
  const double n = static_cast<double>(reports.size());
  for (int k = 0; k < kLandmarkCount; ++k) {
    auto& out = s.landmarks[k];
    double sum = 0.0;
    for (const auto& r : reports) {
      sum += r.distance_mm[k];
      out.sorted_mm.push_back(r.distance_mm[k]);
    }
    out.mean = sum / n;
    double ss = 0.0;
    for (const auto& r : reports) ss += (r.distance_mm[k] - out.mean) * (r.distance_mm[k] - out.mean);
    out.sd = std::sqrt(ss / n);
    std::sort(out.sorted_mm.begin(), out.sorted_mm.end());
  }
  return s;
}

std::string LandmarkCohortStats::to_json() const {
  nlohmann::json j;
  j["subjects"] = subjects;
  j["sd_convention"] = "population";
  j["units"] = "mm";
  for (int k = 0; k < kLandmarkCount; ++k) {
    j["landmarks"].push_back({{"name", kLandmarkNames[k]},
                              {"mean", landmarks[k].mean},
                              {"sd", landmarks[k].sd},
                              {"cdf", landmarks[k].sorted_mm}});
  }
  return j.dump(2);
}

void write_cdf_csv(const std::filesystem::path& path, std::span<const double> sorted_errors) {
  mgrid::ensure_parent_directory(path);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.precision(10);
  out << "error_mm,cumulative_fraction\n";
  const double n = static_cast<double>(sorted_errors.size());
  for (std::size_t i = 0; i < sorted_errors.size(); ++i) {
    out << sorted_errors[i] << ',' << static_cast<double>(i + 1) / n << '\n';
  }
}

}  // namespace shaperefine
