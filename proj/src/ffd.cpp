#include "shaperefine/ffd.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "shaperefine/mgrid.hpp"
#include "shaperefine/random.hpp"

namespace shaperefine {

void bspline_weights(double u, double w[4]) {
  const double u2 = u * u;
  const double u3 = u2 * u;
  const double v = 1.0 - u;
  w[0] = v * v * v / 6.0;
  w[1] = (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0;
  w[2] = (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0;
  w[3] = u3 / 6.0;
}

namespace {

struct AxisTable {
  std::vector<int> first;  // lattice index of the first of 4 supporting points
  std::vector<std::array<double, 4>> w;
};

void locate(double t, int cells, int& i0, double w[4]) {
  i0 = std::clamp(static_cast<int>(std::floor(t)), 0, cells - 1);
  bspline_weights(t - i0, w);
}

AxisTable axis_table(int n, double spacing, double cs, int cells) {
  AxisTable t;
  t.first.resize(n);
  t.w.resize(n);
  for (int i = 0; i < n; ++i) locate(i * spacing / cs, cells, t.first[i], t.w[i].data());
  return t;
}

// One axis of exact dyadic refinement of a uniform cubic B-spline.
std::vector<double> refine_axis(const std::vector<double>& src, const Index3& dims, int axis,
                                Index3& new_dims) {
  new_dims = dims;
  const int cells = dims[axis] - 3;
  new_dims[axis] = 2 * cells + 3;
  std::vector<double> out(static_cast<std::size_t>(new_dims[0]) * new_dims[1] * new_dims[2] * 3);
  auto at = [](const Index3& d, int i, int j, int k) {
    return 3 * (static_cast<std::size_t>(i) +
                static_cast<std::size_t>(d[0]) * (static_cast<std::size_t>(j) +
                                                  static_cast<std::size_t>(d[1]) * k));
  };
  for (int k = 0; k < new_dims[2]; ++k) {
    for (int j = 0; j < new_dims[1]; ++j) {
      for (int i = 0; i < new_dims[0]; ++i) {
        Index3 idx{i, j, k};
        const int m = idx[axis] - 1;  // position in units of the new spacing
        const int q = m >= 0 ? m / 2 : -1;
        auto src_at = [&](int l) {
          Index3 s = idx;
          s[axis] = l;
          return at(dims, s[0], s[1], s[2]);
        };
        const std::size_t o = at(new_dims, i, j, k);
        for (int c = 0; c < 3; ++c) {
          if (m % 2 == 0) {
            out[o + c] = (src[src_at(q) + c] + 6.0 * src[src_at(q + 1) + c] +
                          src[src_at(q + 2) + c]) / 8.0;
          } else {
            out[o + c] = (src[src_at(q + 1) + c] + src[src_at(q + 2) + c]) / 2.0;
          }
        }
      }
    }
  }
  return out;
}

}  // namespace

FfdTransform::FfdTransform(const Geometry& domain, const Vec3& control_spacing,
                           const AffineTransform& source_from_target)
    : domain_(domain), control_spacing_(control_spacing), affine_(source_from_target) {
  domain_.validate();
  for (int a = 0; a < 3; ++a) {
    if (!(control_spacing[a] > 0.0)) throw ParameterError("FFD: control spacing must be > 0");
    cells_[a] = std::max(1, static_cast<int>(std::ceil(domain_.extent()[a] / control_spacing[a] - 1e-9)));
  }
  phi_.assign(control_count() * 3, 0.0);
}

FfdTransform::FfdTransform(const Geometry& domain, const Vec3& control_spacing,
                           const Index3& cells, const AffineTransform& source_from_target)
    : domain_(domain), control_spacing_(control_spacing), cells_(cells), affine_(source_from_target) {
  domain_.validate();
  for (int a = 0; a < 3; ++a) {
    if (!(control_spacing[a] > 0.0)) throw ParameterError("FFD: control spacing must be > 0");
    if (cells[a] < 1) throw ParameterError("FFD: cell count must be >= 1");
    if (cells[a] * control_spacing[a] < domain_.extent()[a] - 1e-6) {
      throw ParameterError("FFD: lattice does not cover the domain");
    }
  }
  phi_.assign(control_count() * 3, 0.0);
}

std::size_t FfdTransform::control_count() const {
  const auto d = lattice_dims();
  return static_cast<std::size_t>(d[0]) * d[1] * d[2];
}

Eigen::Map<Vec3> FfdTransform::control(int i, int j, int k) {
  const auto d = lattice_dims();
  const std::size_t idx =
      static_cast<std::size_t>(i) + static_cast<std::size_t>(d[0]) * (j + static_cast<std::size_t>(d[1]) * k);
  return Eigen::Map<Vec3>(&phi_[3 * idx]);
}

Vec3 FfdTransform::control(int i, int j, int k) const {
  const auto d = lattice_dims();
  const std::size_t idx =
      static_cast<std::size_t>(i) + static_cast<std::size_t>(d[0]) * (j + static_cast<std::size_t>(d[1]) * k);
  return Vec3(phi_[3 * idx], phi_[3 * idx + 1], phi_[3 * idx + 2]);
}

Vec3 FfdTransform::displacement(const Vec3& world) const {
  const Vec3 t = (world - domain_.origin).cwiseQuotient(control_spacing_);
  int i0[3];
  double w[3][4];
  for (int a = 0; a < 3; ++a) locate(t[a], cells_[a], i0[a], w[a]);
  Vec3 u = Vec3::Zero();
  for (int c = 0; c < 4; ++c) {
    for (int b = 0; b < 4; ++b) {
      const double wbc = w[1][b] * w[2][c];
      for (int a = 0; a < 4; ++a) {
        u += (w[0][a] * wbc) * control(i0[0] + a, i0[1] + b, i0[2] + c);
      }
    }
  }
  return u;
}

std::vector<Vec3> FfdTransform::dense_displacement() const {
  const auto& n = domain_.dims;
  const auto L = lattice_dims();
  const AxisTable tx = axis_table(n[0], domain_.spacing.x(), control_spacing_.x(), cells_[0]);
  const AxisTable ty = axis_table(n[1], domain_.spacing.y(), control_spacing_.y(), cells_[1]);
  const AxisTable tz = axis_table(n[2], domain_.spacing.z(), control_spacing_.z(), cells_[2]);

  // contract x: t1[lz][ly][ix]
  std::vector<Vec3> t1(static_cast<std::size_t>(L[2]) * L[1] * n[0], Vec3::Zero());
  for (int lz = 0; lz < L[2]; ++lz) {
    for (int ly = 0; ly < L[1]; ++ly) {
      Vec3* row = &t1[(static_cast<std::size_t>(lz) * L[1] + ly) * n[0]];
      for (int ix = 0; ix < n[0]; ++ix) {
        for (int a = 0; a < 4; ++a) row[ix] += tx.w[ix][a] * control(tx.first[ix] + a, ly, lz);
      }
    }
  }
  // contract y: t2[lz][iy][ix]
  std::vector<Vec3> t2(static_cast<std::size_t>(L[2]) * n[1] * n[0], Vec3::Zero());
  for (int lz = 0; lz < L[2]; ++lz) {
    for (int iy = 0; iy < n[1]; ++iy) {
      Vec3* out = &t2[(static_cast<std::size_t>(lz) * n[1] + iy) * n[0]];
      for (int b = 0; b < 4; ++b) {
        const double wy = ty.w[iy][b];
        const Vec3* in = &t1[(static_cast<std::size_t>(lz) * L[1] + ty.first[iy] + b) * n[0]];
        for (int ix = 0; ix < n[0]; ++ix) out[ix] += wy * in[ix];
      }
    }
  }
  // contract z
  std::vector<Vec3> u(domain_.voxel_count(), Vec3::Zero());
  const std::size_t plane = static_cast<std::size_t>(n[0]) * n[1];
  for (int iz = 0; iz < n[2]; ++iz) {
    Vec3* out = &u[iz * plane];
    for (int c = 0; c < 4; ++c) {
      const double wz = tz.w[iz][c];
      const Vec3* in = &t2[static_cast<std::size_t>(tz.first[iz] + c) * plane];
      for (std::size_t p = 0; p < plane; ++p) out[p] += wz * in[p];
    }
  }
  return u;
}

std::vector<Vec3> FfdTransform::dense_map() const {
  auto u = dense_displacement();
  const auto& g = domain_;
  std::size_t v = 0;
  for (int k = 0; k < g.dims[2]; ++k) {
    for (int j = 0; j < g.dims[1]; ++j) {
      for (int i = 0; i < g.dims[0]; ++i, ++v) u[v] = affine_.apply(g.to_world(i, j, k) + u[v]);
    }
  }
  return u;
}

std::vector<double> FfdTransform::adjoint(const std::vector<Vec3>& g) const {
  const auto& n = domain_.dims;
  if (g.size() != domain_.voxel_count()) throw ShapeError("FFD adjoint: field size mismatch");
  const auto L = lattice_dims();
  const AxisTable tx = axis_table(n[0], domain_.spacing.x(), control_spacing_.x(), cells_[0]);
  const AxisTable ty = axis_table(n[1], domain_.spacing.y(), control_spacing_.y(), cells_[1]);
  const AxisTable tz = axis_table(n[2], domain_.spacing.z(), control_spacing_.z(), cells_[2]);
  const std::size_t plane = static_cast<std::size_t>(n[0]) * n[1];

  std::vector<Vec3> t2(static_cast<std::size_t>(L[2]) * plane, Vec3::Zero());
  for (int iz = 0; iz < n[2]; ++iz) {
    const Vec3* in = &g[iz * plane];
    for (int c = 0; c < 4; ++c) {
      const double wz = tz.w[iz][c];
      Vec3* out = &t2[static_cast<std::size_t>(tz.first[iz] + c) * plane];
      for (std::size_t p = 0; p < plane; ++p) out[p] += wz * in[p];
    }
  }
  std::vector<Vec3> t1(static_cast<std::size_t>(L[2]) * L[1] * n[0], Vec3::Zero());
  for (int lz = 0; lz < L[2]; ++lz) {
    for (int iy = 0; iy < n[1]; ++iy) {
      const Vec3* in = &t2[(static_cast<std::size_t>(lz) * n[1] + iy) * n[0]];
      for (int b = 0; b < 4; ++b) {
        const double wy = ty.w[iy][b];
        Vec3* out = &t1[(static_cast<std::size_t>(lz) * L[1] + ty.first[iy] + b) * n[0]];
        for (int ix = 0; ix < n[0]; ++ix) out[ix] += wy * in[ix];
      }
    }
  }
  std::vector<double> out(control_count() * 3, 0.0);
  for (int lz = 0; lz < L[2]; ++lz) {
    for (int ly = 0; ly < L[1]; ++ly) {
      const Vec3* row = &t1[(static_cast<std::size_t>(lz) * L[1] + ly) * n[0]];
      for (int ix = 0; ix < n[0]; ++ix) {
        for (int a = 0; a < 4; ++a) {
          const std::size_t idx = 3 * (static_cast<std::size_t>(tx.first[ix] + a) +
                                       static_cast<std::size_t>(L[0]) * (ly + static_cast<std::size_t>(L[1]) * lz));
          const Vec3 v = tx.w[ix][a] * row[ix];
          out[idx] += v.x();
          out[idx + 1] += v.y();
          out[idx + 2] += v.z();
        }
      }
    }
  }
  return out;
}

FfdTransform FfdTransform::refined() const {
  FfdTransform out(domain_, control_spacing_ / 2.0,
                   Index3{2 * cells_[0], 2 * cells_[1], 2 * cells_[2]}, affine_);
  Index3 dims = lattice_dims();
  std::vector<double> cur = phi_;
  for (int axis = 0; axis < 3; ++axis) {
    Index3 nd;
    cur = refine_axis(cur, dims, axis, nd);
    dims = nd;
  }
  out.phi_ = std::move(cur);
  return out;
}

double FfdTransform::max_abs_displacement() const {
  double m = 0.0;
  for (double x : phi_) m = std::max(m, std::abs(x));
  return m;
}

bool FfdTransform::is_finite() const {
  return affine_.is_finite() &&
         std::all_of(phi_.begin(), phi_.end(), [](double x) { return std::isfinite(x); });
}

FfdTransform random_smooth_ffd(const Geometry& domain, const Vec3& control_spacing,
                               const Vec3& max_disp_mm, std::uint64_t seed) {
  FfdTransform t(domain, control_spacing);
  Rng rng(seed);
  auto& phi = t.coefficients();
  for (std::size_t i = 0; i < phi.size(); ++i) {
    const double m = max_disp_mm[static_cast<int>(i % 3)];
    phi[i] = rng.uniform(-m, m);
  }
  return t;
}

void write_ffd(const std::filesystem::path& path, const FfdTransform& t) {
  auto h = mgrid::geometry_to_json(t.domain());
  h["magic"] = "MGRID";
  h["version"] = 1;
  h["kind"] = "f32";
  h["object"] = "ffd";
  h["components"] = 3;
  h["control_spacing"] = mgrid::vec3_to_json(t.control_spacing());
  h["cells"] = {t.cells()[0], t.cells()[1], t.cells()[2]};
  const auto L = t.lattice_dims();
  h["lattice_dims"] = {L[0], L[1], L[2]};
  h["source_from_target"] = t.source_from_target().to_row_major();
  std::vector<float> payload(t.coefficients().begin(), t.coefficients().end());
  mgrid::ensure_parent_directory(path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  mgrid::write(out, h, payload);
}

FfdTransform read_ffd(const std::filesystem::path& path) {
  const auto blob = mgrid::read(path);
  const auto& h = blob.header;
  if (!h.contains("object") || h["object"] != "ffd") throw FormatError("FFD: bad field 'object'");
  const Geometry domain = mgrid::geometry_from_json(h);
  const Vec3 cs = mgrid::vec3_from_json(h.value("control_spacing", mgrid::json()), "control_spacing");
  if (!h.contains("cells") || !h["cells"].is_array() || h["cells"].size() != 3) {
    throw FormatError("FFD: bad field 'cells'");
  }
  if (!h.contains("source_from_target") || !h["source_from_target"].is_array() ||
      h["source_from_target"].size() != 12) {
    throw FormatError("FFD: bad field 'source_from_target'");
  }
  const Index3 cells{h["cells"][0].get<int>(), h["cells"][1].get<int>(), h["cells"][2].get<int>()};
  const auto affine =
      AffineTransform::from_row_major(h["source_from_target"].get<std::array<double, 12>>());
  FfdTransform t(domain, cs, cells, affine);
  const auto values = mgrid::decode_f32(blob, t.coefficients().size());
  std::copy(values.begin(), values.end(), t.coefficients().begin());
  return t;
}

}  // namespace shaperefine
