#include "shaperefine/volgrid.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "shaperefine/mgrid.hpp"

namespace shaperefine {

void Geometry::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (dims[a] < 1) throw FormatError("geometry: dims must be >= 1");
    if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a])) {
      throw FormatError("geometry: spacing must be > 0");
    }
  }
  if (!origin.allFinite()) throw FormatError("geometry: origin must be finite");
}

bool same_geometry(const Geometry& a, const Geometry& b, double tol) {
  return a.dims == b.dims && (a.spacing - b.spacing).cwiseAbs().maxCoeff() <= tol &&
         (a.origin - b.origin).cwiseAbs().maxCoeff() <= tol;
}

void require_same_geometry(const Geometry& a, const Geometry& b, std::string_view what) {
  if (!same_geometry(a, b)) throw ShapeError(std::string(what) + ": geometry mismatch");
}

// ---------------------------------------------------------------------------

LabelGrid::LabelGrid(Geometry geometry, int class_count, std::uint8_t fill)
    : Grid<std::uint8_t>(geometry, fill), class_count_(class_count) {
  if (class_count < 1 || class_count > 255) throw FormatError("label grid: bad class_count");
  validate();
}

LabelGrid::LabelGrid(Geometry geometry, int class_count, std::vector<std::uint8_t> labels)
    : Grid<std::uint8_t>(geometry, std::move(labels)), class_count_(class_count) {
  if (class_count < 1 || class_count > 255) throw FormatError("label grid: bad class_count");
  validate();
}

void LabelGrid::validate() const {
  for (auto v : data_) {
    if (v >= class_count_) {
      throw FormatError("label grid: label " + std::to_string(v) + " >= class_count " +
                        std::to_string(class_count_));
    }
  }
}

std::vector<std::size_t> LabelGrid::histogram() const {
  std::vector<std::size_t> h(class_count_, 0);
  for (auto v : data_) ++h[v];
  return h;
}

// ---------------------------------------------------------------------------

int landmark_index(std::string_view name) {
  for (int i = 0; i < kLandmarkCount; ++i) {
    if (kLandmarkNames[i] == name) return i;
  }
  return -1;
}

LandmarkSet::LandmarkSet(const std::array<Vec3, kLandmarkCount>& positions)
    : positions_(positions) {
  validate();
}

LandmarkSet LandmarkSet::from_named(const std::vector<std::pair<std::string, Vec3>>& named) {
  if (named.size() != kLandmarkCount) {
    throw FormatError("landmarks: expected 6 entries, got " + std::to_string(named.size()));
  }
  std::array<Vec3, kLandmarkCount> pos;
  std::array<bool, kLandmarkCount> seen{};
  for (const auto& [name, p] : named) {
    const int idx = landmark_index(name);
    if (idx < 0) throw FormatError("landmarks: unknown name '" + name + "'");
    if (seen[idx]) throw FormatError("landmarks: duplicate name '" + name + "'");
    seen[idx] = true;
    pos[idx] = p;
  }
  return LandmarkSet(pos);
}

void LandmarkSet::validate() const {
  for (int i = 0; i < kLandmarkCount; ++i) {
    if (!positions_[i].allFinite()) {
      throw FormatError("landmarks: position of '" + std::string(kLandmarkNames[i]) +
                        "' is not finite");
    }
  }
}

void Atlas::validate() const {
  labels.validate();
  landmarks.validate();
  if (!same_geometry(volume.geometry(), labels.geometry())) {
    throw ShapeError("atlas '" + id + "': volume and labels geometry differ");
  }
}

// ---------------------------------------------------------------------------

namespace {

struct AxisLerp {
  int i0;
  int i1;
  double w1;
};

AxisLerp axis_lerp(double x, int n) {
  if (n == 1) return {0, 0, 0.0};
  x = std::clamp(x, 0.0, static_cast<double>(n - 1));
  int i0 = std::min(static_cast<int>(std::floor(x)), n - 2);
  return {i0, i0 + 1, x - i0};
}

bool outside_support(const Vec3& idx, const Index3& dims) {
  for (int a = 0; a < 3; ++a) {
    if (idx[a] < -0.5 || idx[a] > dims[a] - 0.5) return true;
  }
  return false;
}

}  // namespace

double sample_trilinear(const VolumeGrid& v, const Vec3& ci) {
  const auto& d = v.dims();
  const auto ax = axis_lerp(ci.x(), d[0]);
  const auto ay = axis_lerp(ci.y(), d[1]);
  const auto az = axis_lerp(ci.z(), d[2]);
  auto at = [&](int i, int j, int k) { return static_cast<double>(v(i, j, k)); };
  const double c00 = at(ax.i0, ay.i0, az.i0) * (1 - ax.w1) + at(ax.i1, ay.i0, az.i0) * ax.w1;
  const double c10 = at(ax.i0, ay.i1, az.i0) * (1 - ax.w1) + at(ax.i1, ay.i1, az.i0) * ax.w1;
  const double c01 = at(ax.i0, ay.i0, az.i1) * (1 - ax.w1) + at(ax.i1, ay.i0, az.i1) * ax.w1;
  const double c11 = at(ax.i0, ay.i1, az.i1) * (1 - ax.w1) + at(ax.i1, ay.i1, az.i1) * ax.w1;
  const double c0 = c00 * (1 - ay.w1) + c10 * ay.w1;
  const double c1 = c01 * (1 - ay.w1) + c11 * ay.w1;
  return c0 * (1 - az.w1) + c1 * az.w1;
}

std::uint8_t sample_nearest(const LabelGrid& l, const Vec3& ci) {
  const auto& d = l.dims();
  int idx[3];
  for (int a = 0; a < 3; ++a) {
    idx[a] = std::clamp(static_cast<int>(std::floor(ci[a] + 0.5)), 0, d[a] - 1);
  }
  return l(idx[0], idx[1], idx[2]);
}

VolumeGrid resample_to(const VolumeGrid& v, const Geometry& target, OutsidePolicy policy) {
  VolumeGrid out(target);
  const auto& src = v.geometry();
  for (int k = 0; k < target.dims[2]; ++k) {
    for (int j = 0; j < target.dims[1]; ++j) {
      for (int i = 0; i < target.dims[0]; ++i) {
        const Vec3 ci = src.to_index(target.to_world(i, j, k));
        if (policy == OutsidePolicy::kFill && outside_support(ci, src.dims)) continue;
        out(i, j, k) = static_cast<float>(sample_trilinear(v, ci));
      }
    }
  }
  return out;
}

LabelGrid resample_nearest_to(const LabelGrid& l, const Geometry& target, OutsidePolicy policy) {
  LabelGrid out(target, l.class_count());
  const auto& src = l.geometry();
  for (int k = 0; k < target.dims[2]; ++k) {
    for (int j = 0; j < target.dims[1]; ++j) {
      for (int i = 0; i < target.dims[0]; ++i) {
        const Vec3 ci = src.to_index(target.to_world(i, j, k));
        if (policy == OutsidePolicy::kFill && outside_support(ci, src.dims)) continue;
        out(i, j, k) = sample_nearest(l, ci);
      }
    }
  }
  return out;
}

VolumeGrid resample_trilinear(const VolumeGrid& v, const Vec3& new_spacing) {
  if (!(new_spacing.array() > 0.0).all()) {
    throw ParameterError("resample_trilinear: spacing must be > 0");
  }
  const auto& g = v.geometry();
  Geometry target;
  target.spacing = new_spacing;
  target.origin = g.origin;
  const Vec3 ext = g.extent();
  for (int a = 0; a < 3; ++a) {
    target.dims[a] = static_cast<int>(std::floor(ext[a] / new_spacing[a] + 1e-9)) + 1;
  }
  return resample_to(v, target, OutsidePolicy::kClamp);
}

ProbGrid one_hot(const LabelGrid& l) {
  ProbGrid p(l.geometry(), l.class_count(), 0.0f);
  for (std::size_t v = 0; v < l.size(); ++v) p.at(v, l[v]) = 1.0f;
  return p;
}

ScoreGrid one_hot_scores(const LabelGrid& l) {
  ScoreGrid p(l.geometry(), l.class_count(), 0.0);
  for (std::size_t v = 0; v < l.size(); ++v) p.at(v, l[v]) = 1.0;
  return p;
}

namespace {

template <typename T>
LabelGrid argmax_impl(const ChannelGrid<T>& p) {
  if (p.channels() < 2) throw ShapeError("argmax_labels: need at least 2 channels");
  LabelGrid out(p.geometry(), p.channels());
  for (std::size_t v = 0; v < p.voxel_count(); ++v) {
    const auto ch = p.voxel(v);
    int best = 0;
    for (int c = 1; c < p.channels(); ++c) {
      if (ch[c] > ch[best]) best = c;
    }
    out[v] = static_cast<std::uint8_t>(best);
  }
  return out;
}

}  // namespace

LabelGrid argmax_labels(const ProbGrid& p) { return argmax_impl(p); }
LabelGrid argmax_labels(const ScoreGrid& p) { return argmax_impl(p); }

// ---------------------------------------------------------------------------

namespace {

mgrid::json grid_header(const Geometry& g, const char* kind) {
  auto h = mgrid::geometry_to_json(g);
  h["magic"] = "MGRID";
  h["version"] = 1;
  h["kind"] = kind;
  return h;
}

std::ofstream open_for_write(const std::filesystem::path& path) {
  mgrid::ensure_parent_directory(path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  return out;
}

}  // namespace

void write_grid(std::ostream& out, const VolumeGrid& g) {
  mgrid::write(out, grid_header(g.geometry(), "f32"), g.values());
}

void write_grid(std::ostream& out, const LabelGrid& g) {
  auto h = grid_header(g.geometry(), "u8");
  h["class_count"] = g.class_count();
  mgrid::write(out, h, g.values());
}

void write_grid(const std::filesystem::path& path, const VolumeGrid& g) {
  auto out = open_for_write(path);
  write_grid(out, g);
}

void write_grid(const std::filesystem::path& path, const LabelGrid& g) {
  auto out = open_for_write(path);
  write_grid(out, g);
}

AnyGrid read_grid(std::istream& in) {
  const auto blob = mgrid::read(in);
  const Geometry geom = mgrid::geometry_from_json(blob.header);
  if (blob.header["kind"] == "f32") {
    return VolumeGrid(geom, mgrid::decode_f32(blob, geom.voxel_count()));
  }
  if (!blob.header.contains("class_count") || !blob.header["class_count"].is_number_integer()) {
    throw FormatError("MGRID: missing field 'class_count'");
  }
  const int cc = blob.header["class_count"].get<int>();
  if (cc < 1 || cc > 255) throw FormatError("MGRID: bad field 'class_count'");
  return LabelGrid(geom, cc, mgrid::decode_u8(blob, geom.voxel_count()));
}

AnyGrid read_grid(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_grid(in);
}

VolumeGrid read_volume(const std::filesystem::path& path) {
  auto g = read_grid(path);
  if (auto* v = std::get_if<VolumeGrid>(&g)) return std::move(*v);
  throw FormatError("MGRID: bad field 'kind' in " + path.string() + " (expected f32)");
}

LabelGrid read_labels(const std::filesystem::path& path) {
  auto g = read_grid(path);
  if (auto* l = std::get_if<LabelGrid>(&g)) return std::move(*l);
  throw FormatError("MGRID: bad field 'kind' in " + path.string() + " (expected u8)");
}

std::string landmarks_to_json(const LandmarkSet& lms) {
  mgrid::json arr = mgrid::json::array();
  for (int i = 0; i < kLandmarkCount; ++i) {
    arr.push_back({{"name", std::string(kLandmarkNames[i])}, {"pos_mm", mgrid::vec3_to_json(lms[i])}});
  }
  return mgrid::json{{"landmarks", arr}}.dump(2);
}

LandmarkSet landmarks_from_json(std::string_view text) {
  mgrid::json doc;
  try {
    doc = mgrid::json::parse(text);
  } catch (const mgrid::json::parse_error& e) {
    throw FormatError(std::string("landmarks: invalid JSON: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("landmarks") || !doc["landmarks"].is_array()) {
    throw FormatError("landmarks: missing field 'landmarks'");
  }
  std::vector<std::pair<std::string, Vec3>> named;
  for (const auto& e : doc["landmarks"]) {
    if (!e.contains("name") || !e["name"].is_string()) throw FormatError("landmarks: bad field 'name'");
    if (!e.contains("pos_mm")) throw FormatError("landmarks: missing field 'pos_mm'");
    named.emplace_back(e["name"].get<std::string>(), mgrid::vec3_from_json(e["pos_mm"], "pos_mm"));
  }
  return LandmarkSet::from_named(named);
}

void write_landmarks(const std::filesystem::path& path, const LandmarkSet& lms) {
  auto out = open_for_write(path);
  out << landmarks_to_json(lms) << '\n';
}

LandmarkSet read_landmarks(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return landmarks_from_json(text);
}

}  // namespace shaperefine
