#include "shaperefine/regfuse.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>

#include "json.hpp"
#include "shaperefine/landmarks.hpp"
#include "shaperefine/parallel.hpp"
#include "shaperefine/preproc.hpp"

namespace shaperefine {

void RegistrationConfig::validate() const {
  if (levels.empty()) throw ConfigError("registration: need at least one pyramid level");
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const auto& lv = levels[i];
    if (!(lv.control_spacing.minCoeff() > 0.0) || lv.max_iterations < 0 || !(lv.step_size > 0.0)) {
      throw ConfigError("registration level " + std::to_string(i) +
                        ": control spacing and step must be > 0, iterations >= 0");
    }
    if (i > 0) {
      const Vec3 ratio = levels[i - 1].control_spacing.cwiseQuotient(lv.control_spacing);
      if ((ratio - Vec3::Constant(2.0)).cwiseAbs().maxCoeff() > 1e-9) {
        throw ConfigError("registration level " + std::to_string(i) +
                          ": control spacing must be exactly half of the previous level");
      }
    }
  }
  if (!(convergence_tol >= 0.0) || !(min_step_fraction > 0.0) || !(fd_step > 0.0)) {
    throw ConfigError("registration: tolerances must be positive");
  }
  if (!(step_growth >= 1.0) || !(max_step_factor >= 1.0)) {
    throw ConfigError("registration: step growth and max step factor must be >= 1");
  }
}

void FusionConfig::validate() const {
  if (!(h > 0.0)) throw ConfigError("fusion: h must be > 0");
  for (int a = 0; a < 3; ++a) {
    if (patch[a] < 1 || patch[a] % 2 == 0 || search[a] < 1 || search[a] % 2 == 0) {
      throw ConfigError("fusion: patch and search extents must be odd");
    }
  }
  if (atlas_count < 1) throw ConfigError("fusion: atlas count must be >= 1");
}

// ---------------------------------------------------------------------------
// Sampling helpers

namespace {

struct AxisInterp {
  int i0, i1;
  double f;
  bool active;  // false when clamped; derivative is zero there
};

AxisInterp axis_interp(double x, int n) {
  if (n == 1) return {0, 0, 0.0, false};
  const bool inside = x >= 0.0 && x <= n - 1;
  x = std::clamp(x, 0.0, static_cast<double>(n - 1));
  const int i0 = std::min(static_cast<int>(std::floor(x)), n - 2);
  return {i0, i0 + 1, x - i0, inside};
}

// Trilinear interpolant of the indicator [l == c] and its index-space gradient.
double soft_indicator(const LabelGrid& l, const Vec3& p, int c, Vec3* grad) {
  const auto& d = l.dims();
  const AxisInterp ax = axis_interp(p.x(), d[0]);
  const AxisInterp ay = axis_interp(p.y(), d[1]);
  const AxisInterp az = axis_interp(p.z(), d[2]);
  auto ind = [&](int i, int j, int k) { return l(i, j, k) == c ? 1.0 : 0.0; };
  const AxisInterp* axes[3] = {&ax, &ay, &az};
  double value = 0.0;
  for (int bz = 0; bz < 2; ++bz) {
    const double wz = bz ? az.f : 1.0 - az.f;
    for (int by = 0; by < 2; ++by) {
      const double wy = by ? ay.f : 1.0 - ay.f;
      for (int bx = 0; bx < 2; ++bx) {
        const double wx = bx ? ax.f : 1.0 - ax.f;
        value += wx * wy * wz * ind(bx ? ax.i1 : ax.i0, by ? ay.i1 : ay.i0, bz ? az.i1 : az.i0);
      }
    }
  }
  if (!grad) return value;
  // Slope along one axis, interpolated over the other two. Exactly on a grid
  // line the interpolant has a kink; take the mean of both one-sided slopes.
  Vec3 g = Vec3::Zero();
  for (int a = 0; a < 3; ++a) {
    const AxisInterp& s = *axes[a];
    if (!s.active) continue;
    const bool kink = s.f == 0.0 && s.i0 > 0;
    const int b = (a + 1) % 3, e = (a + 2) % 3;
    double slope = 0.0;
    for (int pb = 0; pb < 2; ++pb) {
      const double wb = pb ? axes[b]->f : 1.0 - axes[b]->f;
      for (int pe = 0; pe < 2; ++pe) {
        const double we = pe ? axes[e]->f : 1.0 - axes[e]->f;
        if (wb * we == 0.0) continue;
        int idx[3];
        idx[b] = pb ? axes[b]->i1 : axes[b]->i0;
        idx[e] = pe ? axes[e]->i1 : axes[e]->i0;
        auto at = [&](int q) {
          idx[a] = q;
          return ind(idx[0], idx[1], idx[2]);
        };
        const double d = kink ? 0.5 * (at(s.i1) - at(s.i0 - 1)) : at(s.i1) - at(s.i0);
        slope += wb * we * d;
      }
    }
    g[a] = slope;
  }
  *grad = g;
  return value;
}

// Per-channel trilinear weights of the 8 corners.
void soft_channels(const LabelGrid& l, const Vec3& p, std::span<double> out) {
  std::fill(out.begin(), out.end(), 0.0);
  const auto& d = l.dims();
  const AxisInterp ax = axis_interp(p.x(), d[0]);
  const AxisInterp ay = axis_interp(p.y(), d[1]);
  const AxisInterp az = axis_interp(p.z(), d[2]);
  for (int bz = 0; bz < 2; ++bz) {
    const double wz = bz ? az.f : 1.0 - az.f;
    for (int by = 0; by < 2; ++by) {
      const double wy = by ? ay.f : 1.0 - ay.f;
      for (int bx = 0; bx < 2; ++bx) {
        const double wx = bx ? ax.f : 1.0 - ax.f;
        out[l(bx ? ax.i1 : ax.i0, by ? ay.i1 : ay.i0, bz ? az.i1 : az.i0)] += wx * wy * wz;
      }
    }
  }
}

std::vector<Vec3> positions_affine(const AffineTransform& source_to_target, const Geometry& target) {
  const auto inv = source_to_target.inverse();
  std::vector<Vec3> pos(target.voxel_count());
  std::size_t v = 0;
  for (int k = 0; k < target.dims[2]; ++k) {
    for (int j = 0; j < target.dims[1]; ++j) {
      for (int i = 0; i < target.dims[0]; ++i, ++v) pos[v] = inv.apply(target.to_world(i, j, k));
    }
  }
  return pos;
}

std::vector<Vec3> positions_ffd(const FfdTransform& t, const Geometry& target) {
  if (same_geometry(t.domain(), target)) return t.dense_map();
  std::vector<Vec3> pos(target.voxel_count());
  std::size_t v = 0;
  for (int k = 0; k < target.dims[2]; ++k) {
    for (int j = 0; j < target.dims[1]; ++j) {
      for (int i = 0; i < target.dims[0]; ++i, ++v) pos[v] = t.map(target.to_world(i, j, k));
    }
  }
  return pos;
}

WarpedLabels warp_labels_at(const LabelGrid& l, const std::vector<Vec3>& pos, const Geometry& target,
                            WarpMode mode) {
  WarpedLabels out{LabelGrid(target, l.class_count()), mode};
  const auto& src = l.geometry();
  std::vector<double> ch(static_cast<std::size_t>(l.class_count()));
  for (std::size_t v = 0; v < pos.size(); ++v) {
    const Vec3 ci = src.to_index(pos[v]);
    if (mode == WarpMode::kNearest) {
      out.labels[v] = sample_nearest(l, ci);
    } else {
      soft_channels(l, ci, ch);
      out.labels[v] = static_cast<std::uint8_t>(std::max_element(ch.begin(), ch.end()) - ch.begin());
    }
  }
  return out;
}

VolumeGrid warp_volume_at(const VolumeGrid& vol, const std::vector<Vec3>& pos, const Geometry& target) {
  VolumeGrid out(target);
  const auto& src = vol.geometry();
  for (std::size_t v = 0; v < pos.size(); ++v) {
    out[v] = static_cast<float>(sample_trilinear(vol, src.to_index(pos[v])));
  }
  return out;
}

}  // namespace

WarpedLabels warp_labels(const LabelGrid& l, const AffineTransform& source_to_target,
                         const Geometry& target, WarpMode mode) {
  return warp_labels_at(l, positions_affine(source_to_target, target), target, mode);
}

WarpedLabels warp_labels(const LabelGrid& l, const FfdTransform& t, const Geometry& target,
                         WarpMode mode) {
  return warp_labels_at(l, positions_ffd(t, target), target, mode);
}

VolumeGrid warp_volume(const VolumeGrid& v, const AffineTransform& source_to_target,
                       const Geometry& target) {
  return warp_volume_at(v, positions_affine(source_to_target, target), target);
}

VolumeGrid warp_volume(const VolumeGrid& v, const FfdTransform& t, const Geometry& target) {
  return warp_volume_at(v, positions_ffd(t, target), target);
}

ProbGrid warp_soft(const LabelGrid& l, const FfdTransform& t, const Geometry& target) {
  const auto pos = positions_ffd(t, target);
  ProbGrid out(target, l.class_count());
  std::vector<double> ch(static_cast<std::size_t>(l.class_count()));
  for (std::size_t v = 0; v < pos.size(); ++v) {
    soft_channels(l, l.geometry().to_index(pos[v]), ch);
    auto dst = out.voxel(v);
    for (int c = 0; c < l.class_count(); ++c) dst[c] = static_cast<float>(ch[c]);
  }
  return out;
}

// ---------------------------------------------------------------------------

double nmi(const LabelGrid& a, const LabelGrid& b) {
  require_same_geometry(a.geometry(), b.geometry(), "nmi");
  const int ka = a.class_count();
  const int kb = b.class_count();
  std::vector<std::size_t> joint(static_cast<std::size_t>(ka) * kb, 0);
  for (std::size_t v = 0; v < a.size(); ++v) ++joint[static_cast<std::size_t>(a[v]) * kb + b[v]];
  const double n = static_cast<double>(a.size());
  std::vector<double> pa(ka, 0.0), pb(kb, 0.0);
  double hab = 0.0;
  for (int i = 0; i < ka; ++i) {
    for (int j = 0; j < kb; ++j) {
      const auto c = joint[static_cast<std::size_t>(i) * kb + j];
      if (c == 0) continue;
      const double p = static_cast<double>(c) / n;
      hab -= p * std::log(p);
      pa[i] += p;
      pb[j] += p;
    }
  }
  auto entropy = [](const std::vector<double>& p) {
    double h = 0.0;
    for (double x : p) {
      if (x > 0.0) h -= x * std::log(x);
    }
    return h;
  };
  const double ha = entropy(pa);
  const double hb = entropy(pb);
  if (ha <= 0.0 || hb <= 0.0 || hab <= 0.0) return 1.0;
  return (ha + hb) / hab;
}

double label_consistency(const LabelGrid& s, const ProbGrid& q) {
  if (!same_geometry(s.geometry(), q.geometry()) || q.channels() < s.class_count()) {
    throw ShapeError("label_consistency: geometry or channel mismatch");
  }
  double sum = 0.0;
  for (std::size_t v = 0; v < s.size(); ++v) sum += q.at(v, s[v]);
  return sum / static_cast<double>(s.size());
}

std::vector<AtlasMatch> select_atlases(const LabelGrid& target_seg, const LandmarkSet& target_lms,
                                       std::span<const Atlas> atlases, int L, int workers) {
  if (L < 1) throw ConfigError("select_atlases: L must be >= 1");
  if (atlases.size() < static_cast<std::size_t>(L)) {
    throw ConfigError("select_atlases: " + std::to_string(atlases.size()) +
                      " atlases available, " + std::to_string(L) + " requested");
  }
  std::vector<AtlasMatch> all(atlases.size());
  parallel_for(atlases.size(), workers, [&](std::size_t i) {
    const auto& atlas = atlases[i];
    try {
      const auto fit = fit_affine_12dof(atlas.landmarks, target_lms);
      const auto warped = warp_labels(atlas.labels, fit.transform, target_seg.geometry());
      all[i] = AtlasMatch{i, atlas.id, fit.transform, fit.rms_residual,
                          nmi(target_seg, warped.labels)};
    } catch (const std::exception& e) {
      throw std::runtime_error("atlas selection, atlas '" + atlas.id + "': " + e.what());
    }
  });
  std::sort(all.begin(), all.end(), [](const AtlasMatch& a, const AtlasMatch& b) {
    if (a.nmi != b.nmi) return a.nmi > b.nmi;
    return a.id < b.id;
  });
  all.resize(static_cast<std::size_t>(L));
  return all;
}

// ---------------------------------------------------------------------------
// Deformable stage

namespace {

// Objective and (optionally) its gradient w.r.t. the dense displacement.
double objective_dense(const LabelGrid& s, const LabelGrid& atlas, const FfdTransform& t,
                       std::vector<Vec3>* grad_u) {
  require_same_geometry(s.geometry(), t.domain(), "registration domain");
  const auto pos = t.dense_map();
  const auto& ag = atlas.geometry();
  const Mat3 mt = t.source_from_target().matrix.transpose();
  const Vec3 inv_spacing = ag.spacing.cwiseInverse();
  double sum = 0.0;
  if (grad_u) grad_u->assign(pos.size(), Vec3::Zero());
  for (std::size_t v = 0; v < pos.size(); ++v) {
    Vec3 g;
    sum += soft_indicator(atlas, ag.to_index(pos[v]), s[v], grad_u ? &g : nullptr);
    if (grad_u) (*grad_u)[v] = mt * g.cwiseProduct(inv_spacing);
  }
  const double n = static_cast<double>(pos.size());
  if (grad_u) {
    for (auto& g : *grad_u) g /= n;
  }
  return sum / n;
}

}  // namespace

double consistency_objective(const LabelGrid& s, const LabelGrid& atlas_labels,
                             const FfdTransform& t) {
  return objective_dense(s, atlas_labels, t, nullptr);
}

std::vector<double> consistency_gradient(const LabelGrid& s, const LabelGrid& atlas_labels,
                                         const FfdTransform& t, GradientMode mode,
                                         double fd_step) {
  if (mode == GradientMode::kAnalytic) {
    std::vector<Vec3> gu;
    objective_dense(s, atlas_labels, t, &gu);
    return t.adjoint(gu);
  }
  FfdTransform probe = t;
  auto& phi = probe.coefficients();
  std::vector<double> g(phi.size());
  for (std::size_t q = 0; q < phi.size(); ++q) {
    const double keep = phi[q];
    phi[q] = keep + fd_step;
    const double up = objective_dense(s, atlas_labels, probe, nullptr);
    phi[q] = keep - fd_step;
    const double down = objective_dense(s, atlas_labels, probe, nullptr);
    phi[q] = keep;
    g[q] = (up - down) / (2.0 * fd_step);
  }
  return g;
}

RegistrationResult register_ffd(const LabelGrid& s, const LabelGrid& atlas_labels,
                                const AffineTransform& init, const RegistrationConfig& cfg) {
  cfg.validate();
  if (atlas_labels.class_count() < s.class_count()) {
    throw ShapeError("register_ffd: atlas has fewer classes than the target");
  }
  RegistrationResult r;
  FfdTransform t(s.geometry(), cfg.levels[0].control_spacing, init.inverse());
  double current = objective_dense(s, atlas_labels, t, nullptr);
  if (!std::isfinite(current)) throw NumericError("register_ffd: initial objective is not finite");
  r.initial_consistency = current;
  r.trace.push_back(current);

  for (std::size_t level = 0; level < cfg.levels.size(); ++level) {
    const auto& lv = cfg.levels[level];
    if (level > 0) {
      t = t.refined();
      current = objective_dense(s, atlas_labels, t, nullptr);
    }
    double step = lv.step_size;
    const double min_step = lv.step_size * cfg.min_step_fraction;
    std::vector<double> grad = consistency_gradient(s, atlas_labels, t, cfg.gradient_mode, cfg.fd_step);
    for (int it = 0; it < lv.max_iterations; ++it) {
      ++r.iterations;
      double gmax = 0.0;
      for (double g : grad) gmax = std::max(gmax, std::abs(g));
      if (gmax == 0.0) break;
      FfdTransform trial = t;
      auto& phi = trial.coefficients();
      for (std::size_t q = 0; q < phi.size(); ++q) phi[q] += step * grad[q] / gmax;
      const double value = objective_dense(s, atlas_labels, trial, nullptr);
      if (!std::isfinite(value)) {
        throw NumericError("register_ffd: objective is not finite at level " +
                           std::to_string(level) + ", iteration " + std::to_string(it));
      }
      if (value >= current && value >= r.trace.back()) {
        const double gain = (value - current) / std::max(std::abs(current), 1e-12);
        t = std::move(trial);
        current = value;
        r.trace.push_back(value);
        if (gain < cfg.convergence_tol) break;
        step = std::min(step * cfg.step_growth, lv.step_size * cfg.max_step_factor);
        grad = consistency_gradient(s, atlas_labels, t, cfg.gradient_mode, cfg.fd_step);
      } else {
        step *= 0.5;
        if (step < min_step) break;
      }
    }
  }
  r.final_consistency = r.trace.back();
  r.transform = std::move(t);
  return r;
}

// ---------------------------------------------------------------------------
// Fusion

namespace {

// Box sum of radius r along one axis, zero outside the grid.
void box_sum_axis(const std::vector<double>& in, std::vector<double>& out, const Index3& d,
                  int axis, int r, int workers) {
  if (r == 0) {
    out = in;
    return;
  }
  out.assign(in.size(), 0.0);
  const std::size_t stride = axis == 0 ? 1 : axis == 1 ? static_cast<std::size_t>(d[0])
                                                       : static_cast<std::size_t>(d[0]) * d[1];
  const int n = d[axis];
  parallel_for(static_cast<std::size_t>(d[2]), workers, [&](std::size_t kk) {
    const int k = static_cast<int>(kk);
    for (int j = 0; j < d[1]; ++j) {
      for (int i = 0; i < d[0]; ++i) {
        const Index3 idx{i, j, k};
        const int c = idx[axis];
        const std::size_t base = static_cast<std::size_t>(i) +
                                 static_cast<std::size_t>(d[0]) * (j + static_cast<std::size_t>(d[1]) * k);
        double acc = 0.0;
        for (int o = std::max(-r, -c); o <= std::min(r, n - 1 - c); ++o) {
          acc += in[static_cast<std::size_t>(static_cast<long>(base) + static_cast<long>(o) * static_cast<long>(stride))];
        }
        out[base] = acc;
      }
    }
  });
}

}  // namespace

LabelGrid fuse_labels(const VolumeGrid& target, std::span<const WarpedAtlas> atlases,
                      const FusionConfig& cfg, int workers) {
  cfg.validate();
  if (atlases.empty()) throw ShapeError("fuse_labels: need at least one atlas");
  const auto& g = target.geometry();
  const int K = atlases[0].labels.class_count();
  for (const auto& a : atlases) {
    require_same_geometry(g, a.volume.geometry(), "fusion atlas volume");
    require_same_geometry(g, a.labels.geometry(), "fusion atlas labels");
    if (a.labels.class_count() != K) throw ShapeError("fuse_labels: class counts differ");
  }
  const auto& d = g.dims;
  const std::size_t N = g.voxel_count();
  std::vector<double> scores(N * static_cast<std::size_t>(K), 0.0);
  std::vector<double> sq(N), tmp1, tmp2, ssd;
  const Index3 pr{cfg.patch[0] / 2, cfg.patch[1] / 2, cfg.patch[2] / 2};
  const Index3 sr{cfg.search[0] / 2, cfg.search[1] / 2, cfg.search[2] / 2};

  for (const auto& atlas : atlases) {
    for (int dz = -sr[2]; dz <= sr[2]; ++dz) {
      for (int dy = -sr[1]; dy <= sr[1]; ++dy) {
        for (int dx = -sr[0]; dx <= sr[0]; ++dx) {
          // squared difference between target at z and atlas at z + d
          parallel_for(static_cast<std::size_t>(d[2]), workers, [&](std::size_t kk) {
            const int k = static_cast<int>(kk);
            for (int j = 0; j < d[1]; ++j) {
              for (int i = 0; i < d[0]; ++i) {
                const std::size_t v = g.index(i, j, k);
                if (!g.contains(i + dx, j + dy, k + dz)) {
                  sq[v] = 0.0;
                  continue;
                }
                const double diff = static_cast<double>(target[v]) - atlas.volume(i + dx, j + dy, k + dz);
                sq[v] = diff * diff;
              }
            }
          });
          box_sum_axis(sq, tmp1, d, 0, pr[0], workers);
          box_sum_axis(tmp1, tmp2, d, 1, pr[1], workers);
          box_sum_axis(tmp2, ssd, d, 2, pr[2], workers);
          parallel_for(static_cast<std::size_t>(d[2]), workers, [&](std::size_t kk) {
            const int k = static_cast<int>(kk);
            for (int j = 0; j < d[1]; ++j) {
              for (int i = 0; i < d[0]; ++i) {
                if (!g.contains(i + dx, j + dy, k + dz)) continue;
                const std::size_t v = g.index(i, j, k);
                const int label = atlas.labels(i + dx, j + dy, k + dz);
                scores[v * K + label] += std::exp(-ssd[v] / cfg.h);
              }
            }
          });
        }
      }
    }
  }

  LabelGrid out(g, K);
  for (std::size_t v = 0; v < N; ++v) {
    const double* s = &scores[v * K];
    int best = 0;
    for (int k = 1; k < K; ++k) {
      if (s[k] > s[best]) best = k;
    }
    out[v] = static_cast<std::uint8_t>(best);
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string RefineReport::to_json() const {
  nlohmann::json j;
  j["selected_atlases"] = nlohmann::json::array();
  for (const auto& a : atlases) {
    j["selected_atlases"].push_back({{"id", a.id},
                                     {"nmi_affine", a.nmi_affine},
                                     {"nmi_deformable", a.nmi_deformable},
                                     {"consistency_initial", a.consistency_initial},
                                     {"consistency_final", a.consistency_final},
                                     {"iterations", a.iterations}});
  }
  j["seconds"] = {{"select", seconds_select}, {"register", seconds_register}, {"fuse", seconds_fuse}};
  j["fusion"] = {{"h", fusion.h},
                 {"patch", fusion.patch},
                 {"search", fusion.search},
                 {"atlas_count", fusion.atlas_count}};
  return j.dump(2);
}

RefineResult refine(const VolumeGrid& target_lr, const LabelGrid& lr_seg,
                    const LandmarkSet& lr_lms, std::span<const Atlas> atlases,
                    const RegistrationConfig& reg_cfg, const FusionConfig& fus_cfg, int workers,
                    std::optional<Geometry> hr_geometry) {
  using clock = std::chrono::steady_clock;
  auto seconds = [](clock::time_point a, clock::time_point b) {
    return std::chrono::duration<double>(b - a).count();
  };
  reg_cfg.validate();
  fus_cfg.validate();
  if (atlases.empty()) throw ConfigError("refine: no atlases");
  require_same_geometry(target_lr.geometry(), lr_seg.geometry(), "refine: LR volume vs segmentation");
  const Geometry hr = hr_geometry.value_or(atlases[0].volume.geometry());

  RefineResult result;
  result.report.fusion = fus_cfg;
  const LabelGrid s_hr = resample_nearest_to(lr_seg, hr, OutsidePolicy::kFill);
  const VolumeGrid v_hr = normalize_intensity(resample_to(target_lr, hr, OutsidePolicy::kFill));

  auto t0 = clock::now();
  std::vector<AtlasMatch> chosen;
  try {
    chosen = select_atlases(s_hr, lr_lms, atlases, fus_cfg.atlas_count, workers);
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("refine/select: ") + e.what());
  }
  auto t1 = clock::now();
  result.report.seconds_select = seconds(t0, t1);

  std::vector<WarpedAtlas> warped(chosen.size());
  std::vector<RegistrationResult> regs(chosen.size());
  parallel_for(chosen.size(), workers, [&](std::size_t i) {
    const auto& atlas = atlases[chosen[i].index];
    try {
      regs[i] = register_ffd(s_hr, atlas.labels, chosen[i].source_to_target, reg_cfg);
      warped[i] = WarpedAtlas{warp_volume(atlas.volume, regs[i].transform, hr),
                              warp_labels(atlas.labels, regs[i].transform, hr).labels};
    } catch (const std::exception& e) {
      throw std::runtime_error("refine/register, atlas '" + atlas.id + "': " + e.what());
    }
  });
  auto t2 = clock::now();
  result.report.seconds_register = seconds(t1, t2);

  for (std::size_t i = 0; i < chosen.size(); ++i) {
    result.report.atlases.push_back({chosen[i].id, chosen[i].nmi, nmi(s_hr, warped[i].labels),
                                     regs[i].initial_consistency, regs[i].final_consistency,
                                     regs[i].iterations});
  }
  try {
    result.labels = fuse_labels(v_hr, warped, fus_cfg, workers);
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("refine/fuse: ") + e.what());
  }
  result.report.seconds_fuse = seconds(t2, clock::now());
  return result;
}

}  // namespace shaperefine
