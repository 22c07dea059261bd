#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "shaperefine/errors.hpp"

namespace shaperefine {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Index3 = std::array<int, 3>;

inline constexpr int kTissueClassCount = 5;
inline constexpr int kLandmarkCount = 6;
inline constexpr int kLandmarkClassCount = kLandmarkCount + 1;

enum Tissue : std::uint8_t {
  kBackground = 0,
  kLvCavity = 1,
  kLvWall = 2,
  kRvCavity = 3,
  kRvWall = 4,
};

inline constexpr std::array<std::string_view, kTissueClassCount> kTissueNames = {
    "background", "LVC", "LVW", "RVC", "RVW"};

// Axis-aligned voxel lattice. Voxel (i, j, k) sits at origin + (i*sx, j*sy, k*sz)
// millimetres; storage is x-fastest.
struct Geometry {
  Index3 dims{1, 1, 1};
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }
  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(dims[0]) *
               (static_cast<std::size_t>(j) + static_cast<std::size_t>(dims[1]) * k);
  }
  Index3 unravel(std::size_t idx) const {
    const auto nx = static_cast<std::size_t>(dims[0]);
    const auto ny = static_cast<std::size_t>(dims[1]);
    return {static_cast<int>(idx % nx), static_cast<int>((idx / nx) % ny),
            static_cast<int>(idx / (nx * ny))};
  }
  bool contains(int i, int j, int k) const {
    return i >= 0 && j >= 0 && k >= 0 && i < dims[0] && j < dims[1] && k < dims[2];
  }
  Vec3 to_world(const Vec3& continuous_index) const {
    return origin + continuous_index.cwiseProduct(spacing);
  }
  Vec3 to_world(int i, int j, int k) const { return to_world(Vec3(i, j, k)); }
  Vec3 to_index(const Vec3& world) const { return (world - origin).cwiseQuotient(spacing); }
  double voxel_volume_mm3() const { return spacing.prod(); }
  // Physical distance between the first and last voxel centres, per axis.
  Vec3 extent() const {
    return Vec3(dims[0] - 1, dims[1] - 1, dims[2] - 1).cwiseProduct(spacing);
  }

  // Throws FormatError when dims < 1 or spacing <= 0 or values are non-finite.
  void validate() const;

  friend bool operator==(const Geometry& a, const Geometry& b) {
    return a.dims == b.dims && a.spacing == b.spacing && a.origin == b.origin;
  }
};

// True when both geometries agree to within a small tolerance on spacing and origin.
bool same_geometry(const Geometry& a, const Geometry& b, double tol = 1e-6);
void require_same_geometry(const Geometry& a, const Geometry& b, std::string_view what);

template <typename T>
class Grid {
 public:
  using value_type = T;

  Grid() = default;
  explicit Grid(Geometry geometry, T fill = T{}) : geometry_(geometry) {
    geometry_.validate();
    data_.assign(geometry_.voxel_count(), fill);
  }
  Grid(Geometry geometry, std::vector<T> values)
      : geometry_(geometry), data_(std::move(values)) {
    geometry_.validate();
    if (data_.size() != geometry_.voxel_count()) {
      throw SizeMismatchError("grid payload has " + std::to_string(data_.size()) +
                              " values, dims require " +
                              std::to_string(geometry_.voxel_count()));
    }
  }

  const Geometry& geometry() const { return geometry_; }
  const Index3& dims() const { return geometry_.dims; }
  std::size_t size() const { return data_.size(); }

  std::span<const T> values() const { return data_; }
  std::span<T> values() { return data_; }

  T operator[](std::size_t idx) const { return data_[idx]; }
  T& operator[](std::size_t idx) { return data_[idx]; }
  T operator()(int i, int j, int k) const { return data_[geometry_.index(i, j, k)]; }
  T& operator()(int i, int j, int k) { return data_[geometry_.index(i, j, k)]; }

  // Keeps the payload, relocates the lattice.
  void set_origin(const Vec3& origin) { geometry_.origin = origin; }

  friend bool operator==(const Grid& a, const Grid& b) {
    return a.geometry_ == b.geometry_ && a.data_ == b.data_;
  }

 protected:
  Geometry geometry_;
  std::vector<T> data_;
};

using VolumeGrid = Grid<float>;

class LabelGrid : public Grid<std::uint8_t> {
 public:
  LabelGrid() = default;
  LabelGrid(Geometry geometry, int class_count, std::uint8_t fill = 0);
  LabelGrid(Geometry geometry, int class_count, std::vector<std::uint8_t> labels);

  int class_count() const { return class_count_; }
  // Throws FormatError if any label is >= class_count.
  void validate() const;
  std::vector<std::size_t> histogram() const;

  friend bool operator==(const LabelGrid& a, const LabelGrid& b) {
    return a.class_count_ == b.class_count_ &&
           static_cast<const Grid<std::uint8_t>&>(a) == static_cast<const Grid<std::uint8_t>&>(b);
  }

 private:
  int class_count_ = kTissueClassCount;
};

// Per-voxel channel vectors, stored voxel-major (all channels of a voxel contiguous).
template <typename T>
class ChannelGrid {
 public:
  ChannelGrid() = default;
  ChannelGrid(Geometry geometry, int channels, T fill = T{})
      : geometry_(geometry), channels_(channels) {
    geometry_.validate();
    if (channels < 1) throw ShapeError("channel grid needs at least one channel");
    data_.assign(geometry_.voxel_count() * static_cast<std::size_t>(channels), fill);
  }

  const Geometry& geometry() const { return geometry_; }
  int channels() const { return channels_; }
  std::size_t voxel_count() const { return geometry_.voxel_count(); }

  T at(std::size_t voxel, int channel) const { return data_[voxel * channels_ + channel]; }
  T& at(std::size_t voxel, int channel) { return data_[voxel * channels_ + channel]; }
  std::span<const T> voxel(std::size_t v) const {
    return std::span<const T>(data_).subspan(v * channels_, channels_);
  }
  std::span<T> voxel(std::size_t v) { return std::span<T>(data_).subspan(v * channels_, channels_); }
  std::span<const T> values() const { return data_; }
  std::span<T> values() { return data_; }

  template <typename U>
  ChannelGrid<U> cast() const {
    ChannelGrid<U> out(geometry_, channels_);
    auto dst = out.values();
    for (std::size_t i = 0; i < data_.size(); ++i) dst[i] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const ChannelGrid& a, const ChannelGrid& b) {
    return a.geometry_ == b.geometry_ && a.channels_ == b.channels_ && a.data_ == b.data_;
  }

 private:
  Geometry geometry_;
  int channels_ = 1;
  std::vector<T> data_;
};

using ProbGrid = ChannelGrid<float>;
using ScoreGrid = ChannelGrid<double>;

// ---------------------------------------------------------------------------
// Landmarks

enum class LandmarkId : int {
  kRvInsert1 = 0,
  kRvInsert2 = 1,
  kRvLateralTurning = 2,
  kLvLateralMid = 3,
  kApex = 4,
  kMitralCentre = 5,
};

inline constexpr std::array<std::string_view, kLandmarkCount> kLandmarkNames = {
    "RV-insert-1", "RV-insert-2", "RV-lateral-turning", "LV-lateral-mid", "apex", "mitral-centre"};

// Landmark label class k (1..6) corresponds to kLandmarkNames[k - 1].
int landmark_index(std::string_view name);  // -1 if unknown

class LandmarkSet {
 public:
  LandmarkSet() { positions_.fill(Vec3::Zero()); }
  explicit LandmarkSet(const std::array<Vec3, kLandmarkCount>& positions);
  // Validates that the names are exactly the six known ones, each once.
  static LandmarkSet from_named(const std::vector<std::pair<std::string, Vec3>>& named);

  const Vec3& operator[](int i) const { return positions_[i]; }
  Vec3& operator[](int i) { return positions_[i]; }
  const Vec3& operator[](LandmarkId id) const { return positions_[static_cast<int>(id)]; }
  std::span<const Vec3, kLandmarkCount> positions() const { return positions_; }

  void validate() const;

 private:
  std::array<Vec3, kLandmarkCount> positions_;
};

struct Atlas {
  std::string id;
  VolumeGrid volume;
  LabelGrid labels;
  LandmarkSet landmarks;

  void validate() const;
};

// ---------------------------------------------------------------------------
// Sampling and resampling. Out-of-support samples clamp to the nearest edge.

double sample_trilinear(const VolumeGrid& v, const Vec3& continuous_index);
std::uint8_t sample_nearest(const LabelGrid& l, const Vec3& continuous_index);

enum class OutsidePolicy {
  kClamp,  // nearest edge value
  kFill,   // zero / background when more than half a voxel outside the source grid
};

VolumeGrid resample_trilinear(const VolumeGrid& v, const Vec3& new_spacing);
VolumeGrid resample_to(const VolumeGrid& v, const Geometry& target,
                       OutsidePolicy policy = OutsidePolicy::kClamp);
LabelGrid resample_nearest_to(const LabelGrid& l, const Geometry& target,
                              OutsidePolicy policy = OutsidePolicy::kClamp);

ProbGrid one_hot(const LabelGrid& l);
ScoreGrid one_hot_scores(const LabelGrid& l);

// Index of the maximal channel; ties go to the lowest index.
LabelGrid argmax_labels(const ProbGrid& p);
LabelGrid argmax_labels(const ScoreGrid& p);

// ---------------------------------------------------------------------------
// MGRID v1 container

using AnyGrid = std::variant<VolumeGrid, LabelGrid>;

void write_grid(std::ostream& out, const VolumeGrid& g);
void write_grid(std::ostream& out, const LabelGrid& g);
void write_grid(const std::filesystem::path& path, const VolumeGrid& g);
void write_grid(const std::filesystem::path& path, const LabelGrid& g);

AnyGrid read_grid(std::istream& in);
AnyGrid read_grid(const std::filesystem::path& path);
VolumeGrid read_volume(const std::filesystem::path& path);
LabelGrid read_labels(const std::filesystem::path& path);

void write_landmarks(const std::filesystem::path& path, const LandmarkSet& lms);
LandmarkSet read_landmarks(const std::filesystem::path& path);
std::string landmarks_to_json(const LandmarkSet& lms);
LandmarkSet landmarks_from_json(std::string_view text);

}  // namespace shaperefine
