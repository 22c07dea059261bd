#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "shaperefine/multitask.hpp"
#include "shaperefine/preproc.hpp"
#include "shaperefine/regfuse.hpp"

namespace shaperefine {

namespace fs = std::filesystem;

enum class LandmarkSource { kModel, kFile };

struct PipelineConfig {
  std::optional<std::uint64_t> seed;
  int workers = 1;
  fs::path out;
  fs::path subjects;
  fs::path atlases;
  fs::path reference;
  fs::path model;
  int count = 1;
  LrSimParams lr;
  std::optional<AugmentParams> augment;
  LossWeights loss;
  TrainConfig train;
  RegistrationConfig registration;
  FusionConfig fusion;
  LandmarkSource landmark_source = LandmarkSource::kModel;

  // Throws ConfigError naming the offending key.
  static PipelineConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

// Per-subject directory: <id>/volume.mgrid, labels.mgrid, landmarks.json.
struct Subject {
  std::string id;
  VolumeGrid volume;
  std::optional<LabelGrid> labels;
  std::optional<LandmarkSet> landmarks;
};

std::vector<std::string> list_subject_ids(const fs::path& dir);
Subject load_subject(const fs::path& dir, const std::string& id);
void save_subject(const fs::path& dir, const Subject& s);
// Every subject of the directory, which must carry labels and landmarks.
std::vector<Atlas> load_atlases(const fs::path& dir);

// LR segmentation and landmarks read off the toy model's two heads.
struct LrAnalysis {
  LabelGrid segmentation;
  LabelGrid landmark_labels;
  LandmarkSet landmarks;
};
LrAnalysis analyse_lr(const ToyModel& model, const VolumeGrid& volume);

// Result of one subcommand over a set of subjects.
struct RunReport {
  std::string command;
  std::vector<std::string> succeeded;
  std::vector<std::pair<std::string, std::string>> failed;  // id, message
  nlohmann::json extra = nlohmann::json::object();

  int exit_code() const { return failed.empty() ? 0 : 2; }
  nlohmann::json to_json() const;
};

// Subcommands. Each writes its outputs and a manifest.json under cfg.out and
// throws ConfigError for unusable configuration.
RunReport cmd_phantom(const PipelineConfig& cfg);
RunReport cmd_simulate(const PipelineConfig& cfg);
RunReport cmd_train(const PipelineConfig& cfg);
RunReport cmd_refine(const PipelineConfig& cfg);
RunReport cmd_evaluate(const PipelineConfig& cfg);
RunReport cmd_select_atlases(const PipelineConfig& cfg);
RunReport cmd_register(const PipelineConfig& cfg);
RunReport cmd_fuse(const PipelineConfig& cfg);

void write_manifest(const fs::path& out, const RunReport& report, const PipelineConfig& cfg);

}  // namespace shaperefine
