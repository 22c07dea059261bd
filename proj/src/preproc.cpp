#include "shaperefine/preproc.hpp"

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "json.hpp"
#include "shaperefine/random.hpp"

namespace shaperefine {

double order_statistic(std::span<const float> values, double q) {
  if (values.empty()) throw ParameterError("order_statistic: empty input");
  std::vector<float> sorted(values.begin(), values.end());
  const auto rank = static_cast<std::size_t>(std::llround(q * static_cast<double>(sorted.size() - 1)));
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(rank), sorted.end());
  return sorted[rank];
}

VolumeGrid normalize_intensity(const VolumeGrid& v) {
  if (v.size() == 0) throw ParameterError("normalize_intensity: empty volume");
  const double lo = order_statistic(v.values(), 0.01);
  const double hi = order_statistic(v.values(), 0.99);
  VolumeGrid out(v.geometry(), 0.0f);
  if (!(hi > lo)) return out;
  const double range = hi - lo;
  auto dst = out.values();
  const auto src = v.values();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double c = std::clamp(static_cast<double>(src[i]), lo, hi);
    dst[i] = static_cast<float>((c - lo) / range);
  }
  return out;
}

namespace {

template <typename GridT, typename Make>
GridT pad_crop_impl(const GridT& g, const Index3& target, Make make) {
  const auto& src = g.geometry();
  Geometry geom = src;
  geom.dims = target;
  Index3 start{};
  for (int a = 0; a < 3; ++a) {
    if (target[a] < 1) throw ParameterError("pad_crop_to: target dims must be >= 1");
    start[a] = (src.dims[a] - target[a]) / 2;
    geom.origin[a] = src.origin[a] + start[a] * src.spacing[a];
  }
  GridT out = make(geom);
  for (int k = 0; k < target[2]; ++k) {
    const int sk = k + start[2];
    if (sk < 0 || sk >= src.dims[2]) continue;
    for (int j = 0; j < target[1]; ++j) {
      const int sj = j + start[1];
      if (sj < 0 || sj >= src.dims[1]) continue;
      for (int i = 0; i < target[0]; ++i) {
        const int si = i + start[0];
        if (si < 0 || si >= src.dims[0]) continue;
        out(i, j, k) = g(si, sj, sk);
      }
    }
  }
  return out;
}

}  // namespace

VolumeGrid pad_crop_to(const VolumeGrid& g, const Index3& target_dims) {
  return pad_crop_impl(g, target_dims, [](const Geometry& geom) { return VolumeGrid(geom, 0.0f); });
}

LabelGrid pad_crop_to(const LabelGrid& g, const Index3& target_dims) {
  return pad_crop_impl(g, target_dims,
                       [&](const Geometry& geom) { return LabelGrid(geom, g.class_count()); });
}

// ---------------------------------------------------------------------------

std::string ShiftLog::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : shifts_mm) arr.push_back({s[0], s[1]});
  return arr.dump();
}

namespace {

// out(x) = in(x - d) within one slice, bilinear, clamped at the edges.
void shift_volume_slice(const VolumeGrid& in, VolumeGrid& out, int k, double dx_vox,
                        double dy_vox) {
  const auto& d = in.dims();
  for (int j = 0; j < d[1]; ++j) {
    const double sy = std::clamp(j - dy_vox, 0.0, static_cast<double>(d[1] - 1));
    const int j0 = d[1] > 1 ? std::min(static_cast<int>(std::floor(sy)), d[1] - 2) : 0;
    const int j1 = d[1] > 1 ? j0 + 1 : 0;
    const double wy = d[1] > 1 ? sy - j0 : 0.0;
    for (int i = 0; i < d[0]; ++i) {
      const double sx = std::clamp(i - dx_vox, 0.0, static_cast<double>(d[0] - 1));
      const int i0 = d[0] > 1 ? std::min(static_cast<int>(std::floor(sx)), d[0] - 2) : 0;
      const int i1 = d[0] > 1 ? i0 + 1 : 0;
      const double wx = d[0] > 1 ? sx - i0 : 0.0;
      const double a = in(i0, j0, k) * (1 - wx) + in(i1, j0, k) * wx;
      const double b = in(i0, j1, k) * (1 - wx) + in(i1, j1, k) * wx;
      out(i, j, k) = static_cast<float>(a * (1 - wy) + b * wy);
    }
  }
}

void shift_label_slice(const LabelGrid& in, LabelGrid& out, int k, int dx, int dy) {
  const auto& d = in.dims();
  for (int j = 0; j < d[1]; ++j) {
    for (int i = 0; i < d[0]; ++i) {
      const int si = i - dx;
      const int sj = j - dy;
      out(i, j, k) = (si >= 0 && sj >= 0 && si < d[0] && sj < d[1]) ? in(si, sj, k)
                                                                   : std::uint8_t{kBackground};
    }
  }
}

}  // namespace

LrSimulation simulate_lr(const VolumeGrid& hr_volume, const LabelGrid& hr_labels,
                         const LrSimParams& p) {
  require_same_geometry(hr_volume.geometry(), hr_labels.geometry(), "simulate_lr");
  if (p.max_shift < 0.0) throw ParameterError("simulate_lr: max_shift must be >= 0");
  if (p.apical_truncation_slices < 0) throw ParameterError("simulate_lr: truncation must be >= 0");

  VolumeGrid vol = hr_volume;
  LabelGrid lab = hr_labels;
  const double sz = vol.geometry().spacing.z();
  if (!(p.target_slice_thickness > sz + 1e-9)) {
    throw ParameterError("simulate_lr: target slice thickness must exceed the source thickness");
  }
  double ratio = p.target_slice_thickness / sz;
  if (std::abs(ratio - std::round(ratio)) > 1e-6) {
    // Bring the source onto a thickness that divides the target.
    const int factor = static_cast<int>(std::ceil(ratio));
    Vec3 fine = vol.geometry().spacing;
    fine.z() = p.target_slice_thickness / factor;
    vol = resample_trilinear(vol, fine);
    lab = resample_nearest_to(lab, vol.geometry());
    ratio = factor;
  }
  const int f = static_cast<int>(std::lround(ratio));
  const auto& hg = vol.geometry();
  const int nz_dec = hg.dims[2] / f;
  const int trunc = p.apical_truncation_slices;
  if (nz_dec - trunc < 1) throw ParameterError("simulate_lr: nothing left after decimation");

  Geometry lg = hg;
  lg.dims[2] = nz_dec - trunc;
  lg.spacing.z() = hg.spacing.z() * f;
  lg.origin.z() = hg.origin.z() + 0.5 * (f - 1) * hg.spacing.z() + trunc * lg.spacing.z();

  VolumeGrid dec_vol(lg);
  LabelGrid dec_lab(lg, lab.class_count());
  for (int k = 0; k < lg.dims[2]; ++k) {
    const int first = (k + trunc) * f;
    for (int j = 0; j < lg.dims[1]; ++j) {
      for (int i = 0; i < lg.dims[0]; ++i) {
        double acc = 0.0;
        for (int s = 0; s < f; ++s) acc += vol(i, j, first + s);
        dec_vol(i, j, k) = static_cast<float>(acc / f);
        dec_lab(i, j, k) = lab(i, j, first + f / 2);
      }
    }
  }

  LrSimulation out{dec_vol, dec_lab, {}};
  out.log.decimation_factor = f;
  out.log.truncated_slices = trunc;
  Rng rng(p.seed);
  for (int k = 0; k < lg.dims[2]; ++k) {
    const double dx = rng.uniform(-p.max_shift, p.max_shift);
    const double dy = rng.uniform(-p.max_shift, p.max_shift);
    out.log.shifts_mm.push_back({dx, dy});
    if (dx == 0.0 && dy == 0.0) continue;
    shift_volume_slice(dec_vol, out.volume, k, dx / lg.spacing.x(), dy / lg.spacing.y());
    shift_label_slice(dec_lab, out.labels, k, static_cast<int>(std::lround(dx / lg.spacing.x())),
                      static_cast<int>(std::lround(dy / lg.spacing.y())));
  }
  return out;
}

Vec3 shift_point_with_slice(const Vec3& p, const Geometry& lr, const ShiftLog& log) {
  const int k = std::clamp(static_cast<int>(std::lround(lr.to_index(p).z())), 0, lr.dims[2] - 1);
  if (log.shifts_mm.empty()) return p;
  const auto& s = log.shifts_mm[static_cast<std::size_t>(k)];
  return p + Vec3(s[0], s[1], 0.0);
}

// ---------------------------------------------------------------------------

Augmented apply_content_transform(const VolumeGrid& v, const LabelGrid& l,
                                  const LandmarkSet& lms, const AffineTransform& forward) {
  require_same_geometry(v.geometry(), l.geometry(), "augment");
  const auto inv = forward.inverse();
  const auto& g = v.geometry();
  Augmented out{VolumeGrid(g), LabelGrid(g, l.class_count()), lms, forward, 2, 1.0};
  for (int k = 0; k < g.dims[2]; ++k) {
    for (int j = 0; j < g.dims[1]; ++j) {
      for (int i = 0; i < g.dims[0]; ++i) {
        const Vec3 ci = g.to_index(inv.apply(g.to_world(i, j, k)));
        out.volume(i, j, k) = static_cast<float>(sample_trilinear(v, ci));
        out.labels(i, j, k) = sample_nearest(l, ci);
      }
    }
  }
  for (int n = 0; n < kLandmarkCount; ++n) out.landmarks[n] = forward.apply(lms[n]);
  return out;
}

Augmented augment_affine(const VolumeGrid& v, const LabelGrid& l, const LandmarkSet& lms,
                         const AugmentParams& p) {
  if (p.scale_range.first > p.scale_range.second ||
      p.intensity_scale_range.first > p.intensity_scale_range.second) {
    throw ParameterError("augment_affine: range with lo > hi");
  }
  Rng rng(p.seed);
  const int axis = rng.uniform_int(0, 2);
  const double angle = rng.uniform(-p.rotation_max_deg, p.rotation_max_deg) * std::numbers::pi / 180.0;
  const double scale = rng.uniform(p.scale_range.first, p.scale_range.second);
  const double tx = rng.uniform(-p.translation_max_mm, p.translation_max_mm);
  const double ty = rng.uniform(-p.translation_max_mm, p.translation_max_mm);
  const double intensity =
      rng.uniform(p.intensity_scale_range.first, p.intensity_scale_range.second);

  const auto& g = v.geometry();
  const Vec3 centre = g.to_world(0.5 * Vec3(g.dims[0] - 1, g.dims[1] - 1, g.dims[2] - 1));
  const Mat3 rot = Eigen::AngleAxisd(angle, Vec3::Unit(axis)).toRotationMatrix();
  AffineTransform fwd;
  fwd.matrix = scale * rot;
  fwd.translation = centre - fwd.matrix * centre + Vec3(tx, ty, 0.0);

  Augmented out = apply_content_transform(v, l, lms, fwd);
  out.rotation_axis = axis;
  out.intensity_scale = intensity;
  for (auto& x : out.volume.values()) {
    x = static_cast<float>(std::clamp(static_cast<double>(x) * intensity, 0.0, 1.0));
  }
  return out;
}

}  // namespace shaperefine
