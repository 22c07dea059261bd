#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>
#include <sys/wait.h>

#include "doctest.h"
#include "shaperefine/metrics.hpp"
#include "shaperefine/phantom.hpp"
#include "shaperefine/pipeline.hpp"
#include "support.hpp"

using namespace shaperefine;
using nlohmann::json;

namespace {

double nearest_of_class(const LabelGrid& l, const Vec3& p, int k) {
  const auto& g = l.geometry();
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t v = 0; v < l.size(); ++v) {
    if (l[v] != k) continue;
    const auto idx = g.unravel(v);
    best = std::min(best, (g.to_world(idx[0], idx[1], idx[2]) - p).norm());
  }
  return best;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("config rejects unknown keys by name") {
  try {
    PipelineConfig::from_json(json{{"seed", 1}, {"registration", {{"levelz", 3}}}});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("levelz") != std::string::npos);
  }
  CHECK_THROWS_AS(PipelineConfig::from_json(json{{"workers", 0}}), ConfigError);
  const auto c = PipelineConfig::from_json(json{{"seed", 5}, {"fusion", {{"h", 3.0}}}});
  CHECK(*c.seed == 5);
  CHECK(c.fusion.h == 3.0);
  const auto back = PipelineConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
}

TEST_CASE("phantoms are deterministic and anatomically wired") {
  testsupport::TempDir a("ph_a"), b("ph_b");
  PipelineConfig cfg;
  cfg.seed = 77;
  cfg.count = 2;
  cfg.out = a.path;
  CHECK(cmd_phantom(cfg).exit_code() == 0);
  cfg.out = b.path;
  cmd_phantom(cfg);
  for (const char* id : {"phantom_000", "phantom_001"}) {
    CHECK(slurp(a.path / id / "labels.mgrid") == slurp(b.path / id / "labels.mgrid"));
    CHECK(slurp(a.path / id / "volume.mgrid") == slurp(b.path / id / "volume.mgrid"));
  }
  CHECK(fs::exists(a.path / "manifest.json"));

  const auto s0 = load_subject(a.path, "phantom_000");
  const auto s1 = load_subject(a.path, "phantom_001");
  CHECK(*s0.labels != *s1.labels);
  const auto& l = *s0.labels;
  for (std::size_t n : l.histogram()) CHECK(n > 0);

  // cavity and wall are 26-adjacent somewhere
  const auto& g = l.geometry();
  bool touches = false;
  for (std::size_t v = 0; v < l.size() && !touches; ++v) {
    if (l[v] != kLvCavity) continue;
    const auto idx = g.unravel(v);
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int i = idx[0] + dx, j = idx[1] + dy, k = idx[2] + dz;
          if (g.contains(i, j, k) && l(i, j, k) == kLvWall) touches = true;
        }
  }
  CHECK(touches);

  const auto& lms = *s0.landmarks;
  CHECK(nearest_of_class(l, lms[LandmarkId::kApex], kLvWall) <= 3.0);
  CHECK(nearest_of_class(l, lms[LandmarkId::kLvLateralMid], kLvWall) <= 3.0);
  CHECK(nearest_of_class(l, lms[LandmarkId::kRvLateralTurning], kRvWall) <= 3.0);
  CHECK(nearest_of_class(l, lms[LandmarkId::kRvInsert1], kLvWall) <= 3.0);
  CHECK(nearest_of_class(l, lms[LandmarkId::kRvInsert2], kLvWall) <= 3.0);
  CHECK(nearest_of_class(l, lms[LandmarkId::kMitralCentre], kLvCavity) <= 3.0);
}

TEST_CASE("evaluate a prediction against itself") {
  testsupport::TempDir dir("eval");
  PipelineConfig cfg;
  cfg.seed = 3;
  cfg.out = dir.path / "ph";
  cmd_phantom(cfg);
  cfg.subjects = cfg.out;
  cfg.reference = cfg.out;
  cfg.out = dir.path / "ev";
  CHECK(cmd_evaluate(cfg).exit_code() == 0);
  const auto summary = json::parse(slurp(cfg.out / "summary.json"));
  for (const auto& f : summary["fields"]) {
    const std::string name = f["name"];
    if (name.rfind("dice_", 0) == 0) CHECK(f["mean"] == 1.0);
    if (name.rfind("hausdorff_", 0) == 0) CHECK(f["mean"] == 0.0);
  }
}

TEST_CASE("cli names a missing atlas directory") {
  const char* cli = std::getenv("SHAPEREFINE_CLI");
  REQUIRE(cli != nullptr);
  testsupport::TempDir dir("cli");
  fs::create_directories(dir.path / "subjects");
  const auto missing = dir.path / "no_such_atlases";
  const auto err = dir.path / "stderr.txt";
  const std::string cmd = std::string(cli) + " refine --seed 1 --subjects " + (dir.path / "subjects").string() +
                          " --atlases " + missing.string() + " --out " + (dir.path / "out").string() +
                          " --landmark-source file 2> " + err.string();
  const int status = std::system(cmd.c_str());
  CHECK(WEXITSTATUS(status) == 1);
  CHECK(slurp(err).find(missing.string()) != std::string::npos);
}
