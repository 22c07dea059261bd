#include "shaperefine/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "json.hpp"
#include "shaperefine/mgrid.hpp"

namespace shaperefine {

double dice_index(const LabelGrid& a, const LabelGrid& b, int k) {
  require_same_geometry(a.geometry(), b.geometry(), "dice_index");
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t v = 0; v < a.size(); ++v) {
    const bool ia = a[v] == k;
    const bool ib = b[v] == k;
    na += ia;
    nb += ib;
    both += ia && ib;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Lower envelope of parabolas along one line (Felzenszwalb & Huttenlocher),
// sample positions q * step.
void edt_1d(const double* f, double* d, int n, double step, std::vector<int>& v,
            std::vector<double>& z) {
  v.resize(n);
  z.resize(n + 1);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    const double xq = q * step;
    while (k >= 0) {
      const double xv = v[k] * step;
      const double s = ((f[q] + xq * xq) - (f[v[k]] + xv * xv)) / (2.0 * (xq - xv));
      if (s <= z[k]) {
        --k;
      } else {
        break;
      }
    }
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
    } else {
      ++k;
      v[k] = q;
      const double xv = v[k - 1] * step;
      z[k] = ((f[q] + xq * xq) - (f[v[k - 1]] + xv * xv)) / (2.0 * (xq - xv));
    }
    z[k + 1] = kInf;
  }
  if (k < 0) {
    std::fill(d, d + n, kInf);
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    const double xq = q * step;
    while (z[j + 1] < xq) ++j;
    const double diff = xq - v[j] * step;
    d[q] = diff * diff + f[v[j]];
  }
}

}  // namespace

std::vector<double> squared_distance_transform(const LabelGrid& l, int k) {
  const auto& g = l.geometry();
  const auto& n = g.dims;
  std::vector<double> dist(l.size());
  for (std::size_t v = 0; v < l.size(); ++v) dist[v] = l[v] == k ? 0.0 : kInf;
  std::vector<int> vbuf;
  std::vector<double> zbuf;
  const int longest = std::max({n[0], n[1], n[2]});
  std::vector<double> line(longest), out(longest);
  const std::size_t strides[3] = {1, static_cast<std::size_t>(n[0]),
                                   static_cast<std::size_t>(n[0]) * n[1]};
  for (int axis = 0; axis < 3; ++axis) {
    const int a1 = (axis + 1) % 3;
    const int a2 = (axis + 2) % 3;
    for (int p2 = 0; p2 < n[a2]; ++p2) {
      for (int p1 = 0; p1 < n[a1]; ++p1) {
        const std::size_t base = p1 * strides[a1] + p2 * strides[a2];
        for (int q = 0; q < n[axis]; ++q) line[q] = dist[base + q * strides[axis]];
        edt_1d(line.data(), out.data(), n[axis], g.spacing[axis], vbuf, zbuf);
        for (int q = 0; q < n[axis]; ++q) dist[base + q * strides[axis]] = out[q];
      }
    }
  }
  return dist;
}

namespace {

double directed_hausdorff(const LabelGrid& from, const LabelGrid& to, int k) {
  const auto dt = squared_distance_transform(to, k);
  double worst = 0.0;
  for (std::size_t v = 0; v < from.size(); ++v) {
    if (from[v] == k) worst = std::max(worst, dt[v]);
  }
  return std::sqrt(worst);
}

bool has_class(const LabelGrid& l, int k) {
  const auto vals = l.values();
  return std::find(vals.begin(), vals.end(), static_cast<std::uint8_t>(k)) != vals.end();
}

}  // namespace

double hausdorff(const LabelGrid& a, const LabelGrid& b, int k) {
  require_same_geometry(a.geometry(), b.geometry(), "hausdorff");
  if (!has_class(a, k) || !has_class(b, k)) {
    throw UndefinedDistanceError("hausdorff: class " + std::to_string(k) + " is empty in " +
                                 (has_class(a, k) ? "the second" : "the first") + " mask");
  }
  return std::max(directed_hausdorff(a, b, k), directed_hausdorff(b, a, k));
}

SegScore score_segmentation(const LabelGrid& predicted, const LabelGrid& reference) {
  SegScore s;
  for (int k = 1; k < kTissueClassCount; ++k) {
    s.dice[k - 1] = dice_index(predicted, reference, k);
    if (has_class(predicted, k) && has_class(reference, k)) {
      s.hausdorff_mm[k - 1] = hausdorff(predicted, reference, k);
    }
  }
  return s;
}

ClinicalMeasures clinical_measures(const LabelGrid& l) {
  const auto h = l.histogram();
  const double ml = l.geometry().voxel_volume_mm3() / 1000.0;
  auto count = [&](int k) { return k < static_cast<int>(h.size()) ? static_cast<double>(h[k]) : 0.0; };
  ClinicalMeasures m;
  m.lvv_ml = count(kLvCavity) * ml;
  m.lvm_g = count(kLvWall) * ml * kMyocardialDensity;
  m.rvv_ml = count(kRvCavity) * ml;
  m.rvm_g = count(kRvWall) * ml * kMyocardialDensity;
  return m;
}

namespace {

FieldSummary summarise(std::string name, const std::vector<double>& values) {
  FieldSummary f{std::move(name), 0.0, 0.0, values.size()};
  if (values.empty()) return f;
  double sum = 0.0;
  for (double x : values) sum += x;
  f.mean = sum / static_cast<double>(values.size());
  double ss = 0.0;
  for (double x : values) ss += (x - f.mean) * (x - f.mean);
  f.sd = std::sqrt(ss / static_cast<double>(values.size()));
  return f;
}

}  // namespace

std::vector<FieldSummary> cohort_report(std::span<const SegScore> scores) {
  if (scores.empty()) throw ParameterError("cohort_report: empty list");
  std::vector<FieldSummary> out;
  for (int c = 0; c < kTissueClassCount - 1; ++c) {
    std::vector<double> d;
    for (const auto& s : scores) d.push_back(s.dice[c]);
    out.push_back(summarise("dice_" + std::string(kTissueNames[c + 1]), d));
  }
  for (int c = 0; c < kTissueClassCount - 1; ++c) {
    std::vector<double> h;
    for (const auto& s : scores) {
      if (s.hausdorff_mm[c]) h.push_back(*s.hausdorff_mm[c]);
    }
    out.push_back(summarise("hausdorff_mm_" + std::string(kTissueNames[c + 1]), h));
  }
  return out;
}

std::vector<FieldSummary> cohort_report(std::span<const ClinicalMeasures> measures) {
  if (measures.empty()) throw ParameterError("cohort_report: empty list");
  std::vector<double> lvv, lvm, rvv, rvm;
  for (const auto& m : measures) {
    lvv.push_back(m.lvv_ml);
    lvm.push_back(m.lvm_g);
    rvv.push_back(m.rvv_ml);
    rvm.push_back(m.rvm_g);
  }
  return {summarise("LVV_ml", lvv), summarise("LVM_g", lvm), summarise("RVV_ml", rvv),
          summarise("RVM_g", rvm)};
}

std::string summary_to_json(std::span<const FieldSummary> fields) {
  nlohmann::json j;
  j["sd_convention"] = "population";
  j["fields"] = nlohmann::json::array();
  for (const auto& f : fields) {
    j["fields"].push_back({{"name", f.name}, {"mean", f.mean}, {"sd", f.sd}, {"count", f.count}});
  }
  return j.dump(2);
}

void write_scores_csv(const std::filesystem::path& path, std::span<const SubjectScore> rows) {
  mgrid::ensure_parent_directory(path);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.precision(10);
  out << "subject_id,class,dice,hausdorff_mm\n";
  for (const auto& r : rows) {
    for (int c = 0; c < kTissueClassCount - 1; ++c) {
      out << r.subject_id << ',' << kTissueNames[c + 1] << ',' << r.score.dice[c] << ',';
      if (r.score.hausdorff_mm[c]) {
        out << *r.score.hausdorff_mm[c];
      } else {
        out << "nan";
      }
      out << '\n';
    }
  }
}

void write_clinical_csv(const std::filesystem::path& path, std::span<const SubjectClinical> rows) {
  mgrid::ensure_parent_directory(path);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.precision(10);
  out << "subject_id,LVV_ml,LVM_g,RVV_ml,RVM_g\n";
  for (const auto& r : rows) {
    out << r.subject_id << ',' << r.measures.lvv_ml << ',' << r.measures.lvm_g << ','
        << r.measures.rvv_ml << ',' << r.measures.rvm_g << '\n';
  }
}

}  // namespace shaperefine
