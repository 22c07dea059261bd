#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "shaperefine/random.hpp"
#include "shaperefine/volgrid.hpp"

namespace testsupport {

using namespace shaperefine;

inline Geometry cube(int n, Vec3 spacing = Vec3(1.0, 1.0, 1.0)) {
  return Geometry{{n, n, n}, spacing, Vec3::Zero()};
}

inline LabelGrid random_labels(const Geometry& g, int classes, Rng& rng) {
  LabelGrid l(g, classes);
  for (std::size_t v = 0; v < l.size(); ++v) l[v] = static_cast<std::uint8_t>(rng.uniform_int(0, classes - 1));
  return l;
}

inline VolumeGrid random_volume(const Geometry& g, Rng& rng) {
  VolumeGrid out(g);
  for (std::size_t v = 0; v < out.size(); ++v) out[v] = static_cast<float>(rng.uniform());
  return out;
}

// Fresh directory under the system temp dir, removed on scope exit.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("shaperefine_" + tag + "_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

}  // namespace testsupport
