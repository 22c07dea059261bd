#include "shaperefine/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "shaperefine/landmarks.hpp"
#include "shaperefine/metrics.hpp"
#include "shaperefine/mgrid.hpp"
#include "shaperefine/parallel.hpp"
#include "shaperefine/phantom.hpp"

namespace shaperefine {

using nlohmann::json;

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 finaliser over (seed, index)
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

template <typename T>
T get(const json& j, const char* key, const std::string& where, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config: bad value for '" + where + key + "': " + e.what());
  }
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigError("config: unknown key '" + where + k + "'");
  }
}

Vec3 get_vec3(const json& j, const char* key, const std::string& where, const Vec3& fallback) {
  if (!j.contains(key)) return fallback;
  const auto v = get<std::vector<double>>(j, key, where, {});
  if (v.size() != 3) throw ConfigError("config: '" + where + key + "' needs 3 numbers");
  return Vec3(v[0], v[1], v[2]);
}

Index3 get_index3(const json& j, const char* key, const std::string& where, const Index3& fallback) {
  if (!j.contains(key)) return fallback;
  const auto v = get<std::vector<int>>(j, key, where, {});
  if (v.size() != 3) throw ConfigError("config: '" + where + key + "' needs 3 integers");
  return {v[0], v[1], v[2]};
}

std::pair<double, double> get_range(const json& j, const char* key, const std::string& where,
                                    std::pair<double, double> fallback) {
  if (!j.contains(key)) return fallback;
  const auto v = get<std::vector<double>>(j, key, where, {});
  if (v.size() != 2 || v[0] > v[1]) throw ConfigError("config: '" + where + key + "' needs [lo, hi]");
  return {v[0], v[1]};
}

void write_text(const fs::path& path, const std::string& text) {
  mgrid::ensure_parent_directory(path);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text << '\n';
}

void require_dir(const fs::path& p, const char* what) {
  if (p.empty()) throw ConfigError(std::string("config: '") + what + "' is required");
  if (!fs::is_directory(p)) {
    throw ConfigError(std::string(what) + " directory does not exist: " + p.string());
  }
}

void require_out(const PipelineConfig& cfg) {
  if (cfg.out.empty()) throw ConfigError("config: 'out' is required");
}

std::uint64_t require_seed(const PipelineConfig& cfg) {
  if (!cfg.seed) throw ConfigError("config: 'seed' is required");
  return *cfg.seed;
}

// Runs fn over ids with subject-level parallelism; failures are collected in id order.
template <typename Fn>
void for_each_subject(const std::vector<std::string>& ids, int workers, RunReport& report, Fn&& fn) {
  std::vector<std::string> errors(ids.size());
  parallel_for(ids.size(), workers, [&](std::size_t i) {
    try {
      fn(i, ids[i]);
    } catch (const std::exception& e) {
      errors[i] = e.what();
      if (errors[i].empty()) errors[i] = "unknown error";
    }
  });
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (errors[i].empty()) {
      report.succeeded.push_back(ids[i]);
    } else {
      report.failed.emplace_back(ids[i], errors[i]);
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------

PipelineConfig PipelineConfig::from_json(const json& j) {
  reject_unknown(j,
                 {"seed", "workers", "out", "subjects", "atlases", "reference", "model", "count",
                  "lr", "augment", "loss", "train", "registration", "fusion", "landmark_source"},
                 "");
  PipelineConfig c;
  if (j.contains("seed")) c.seed = get<std::uint64_t>(j, "seed", "", 0);
  c.workers = get<int>(j, "workers", "", c.workers);
  c.out = get<std::string>(j, "out", "", "");
  c.subjects = get<std::string>(j, "subjects", "", "");
  c.atlases = get<std::string>(j, "atlases", "", "");
  c.reference = get<std::string>(j, "reference", "", "");
  c.model = get<std::string>(j, "model", "", "");
  c.count = get<int>(j, "count", "", c.count);
  if (c.workers < 1) throw ConfigError("config: 'workers' must be >= 1");
  if (c.count < 1) throw ConfigError("config: 'count' must be >= 1");

  if (j.contains("lr")) {
    const auto& s = j["lr"];
    reject_unknown(s, {"target_slice_thickness", "max_shift", "apical_truncation_slices"}, "lr.");
    c.lr.target_slice_thickness = get<double>(s, "target_slice_thickness", "lr.", c.lr.target_slice_thickness);
    c.lr.max_shift = get<double>(s, "max_shift", "lr.", c.lr.max_shift);
    c.lr.apical_truncation_slices = get<int>(s, "apical_truncation_slices", "lr.", c.lr.apical_truncation_slices);
    if (c.lr.max_shift < 0 || c.lr.apical_truncation_slices < 0) {
      throw ConfigError("config: 'lr' values must be non-negative");
    }
  }
  if (j.contains("augment")) {
    const auto& s = j["augment"];
    reject_unknown(s, {"enabled", "scale_range", "rotation_max_deg", "translation_max_mm",
                       "intensity_scale_range"}, "augment.");
    if (get<bool>(s, "enabled", "augment.", true)) {
      AugmentParams a;
      a.scale_range = get_range(s, "scale_range", "augment.", a.scale_range);
      a.rotation_max_deg = get<double>(s, "rotation_max_deg", "augment.", a.rotation_max_deg);
      a.translation_max_mm = get<double>(s, "translation_max_mm", "augment.", a.translation_max_mm);
      a.intensity_scale_range = get_range(s, "intensity_scale_range", "augment.", a.intensity_scale_range);
      c.augment = a;
    }
  }
  if (j.contains("loss")) {
    const auto& s = j["loss"];
    reject_unknown(s, {"alpha", "beta", "epsilon"}, "loss.");
    c.loss.alpha = get<double>(s, "alpha", "loss.", c.loss.alpha);
    c.loss.beta = get<double>(s, "beta", "loss.", c.loss.beta);
    c.loss.epsilon = get<double>(s, "epsilon", "loss.", c.loss.epsilon);
    try {
      c.loss.validate();
    } catch (const std::exception& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }
  if (j.contains("train")) {
    const auto& s = j["train"];
    reject_unknown(s, {"epochs", "learning_rate", "optimizer", "batch_size", "in_slices", "kernel",
                       "init_scale"}, "train.");
    auto& t = c.train;
    t.epochs = get<int>(s, "epochs", "train.", t.epochs);
    t.learning_rate = get<double>(s, "learning_rate", "train.", t.learning_rate);
    const auto opt = get<std::string>(s, "optimizer", "train.", "adam");
    if (opt == "adam") {
      t.optimizer = Optimizer::kAdam;
    } else if (opt == "sgd") {
      t.optimizer = Optimizer::kSgd;
    } else {
      throw ConfigError("config: 'train.optimizer' must be \"sgd\" or \"adam\"");
    }
    t.batch_size = get<int>(s, "batch_size", "train.", t.batch_size);
    t.in_slices = get<int>(s, "in_slices", "train.", t.in_slices);
    t.kernel = get<int>(s, "kernel", "train.", t.kernel);
    t.init_scale = get<double>(s, "init_scale", "train.", t.init_scale);
  }
  if (j.contains("registration")) {
    const auto& s = j["registration"];
    reject_unknown(s, {"levels", "convergence_tol", "gradient_mode", "min_step_fraction",
                       "step_growth", "max_step_factor"},
                   "registration.");
    auto& r = c.registration;
    if (s.contains("levels")) {
      if (!s["levels"].is_array()) throw ConfigError("config: 'registration.levels' must be an array");
      r.levels.clear();
      for (const auto& lv : s["levels"]) {
        reject_unknown(lv, {"control_spacing", "max_iterations", "step_size"}, "registration.levels[].");
        PyramidLevel p;
        p.control_spacing = get_vec3(lv, "control_spacing", "registration.levels[].", p.control_spacing);
        p.max_iterations = get<int>(lv, "max_iterations", "registration.levels[].", p.max_iterations);
        p.step_size = get<double>(lv, "step_size", "registration.levels[].", p.step_size);
        r.levels.push_back(p);
      }
    }
    r.convergence_tol = get<double>(s, "convergence_tol", "registration.", r.convergence_tol);
    r.min_step_fraction = get<double>(s, "min_step_fraction", "registration.", r.min_step_fraction);
    r.step_growth = get<double>(s, "step_growth", "registration.", r.step_growth);
    r.max_step_factor = get<double>(s, "max_step_factor", "registration.", r.max_step_factor);
    const auto mode = get<std::string>(s, "gradient_mode", "registration.", "analytic");
    if (mode == "analytic") {
      r.gradient_mode = GradientMode::kAnalytic;
    } else if (mode == "finite-difference") {
      r.gradient_mode = GradientMode::kFiniteDifference;
    } else {
      throw ConfigError("config: 'registration.gradient_mode' must be analytic or finite-difference");
    }
    r.validate();
  }
  if (j.contains("fusion")) {
    const auto& s = j["fusion"];
    reject_unknown(s, {"h", "patch", "search", "atlas_count"}, "fusion.");
    auto& f = c.fusion;
    f.h = get<double>(s, "h", "fusion.", f.h);
    f.patch = get_index3(s, "patch", "fusion.", f.patch);
    f.search = get_index3(s, "search", "fusion.", f.search);
    f.atlas_count = get<int>(s, "atlas_count", "fusion.", f.atlas_count);
    f.validate();
  }
  const auto src = get<std::string>(j, "landmark_source", "", "model");
  if (src == "model") {
    c.landmark_source = LandmarkSource::kModel;
  } else if (src == "file") {
    c.landmark_source = LandmarkSource::kFile;
  } else {
    throw ConfigError("config: 'landmark_source' must be \"model\" or \"file\"");
  }
  return c;
}

json PipelineConfig::to_json() const {
  json j;
  if (seed) j["seed"] = *seed;
  j["workers"] = workers;
  j["out"] = out.string();
  j["subjects"] = subjects.string();
  j["atlases"] = atlases.string();
  j["reference"] = reference.string();
  j["model"] = model.string();
  j["count"] = count;
  j["lr"] = {{"target_slice_thickness", lr.target_slice_thickness},
             {"max_shift", lr.max_shift},
             {"apical_truncation_slices", lr.apical_truncation_slices}};
  if (augment) {
    j["augment"] = {{"enabled", true},
                    {"scale_range", {augment->scale_range.first, augment->scale_range.second}},
                    {"rotation_max_deg", augment->rotation_max_deg},
                    {"translation_max_mm", augment->translation_max_mm},
                    {"intensity_scale_range",
                     {augment->intensity_scale_range.first, augment->intensity_scale_range.second}}};
  }
  j["loss"] = {{"alpha", loss.alpha}, {"beta", loss.beta}, {"epsilon", loss.epsilon}};
  j["train"] = {{"epochs", train.epochs},
                {"learning_rate", train.learning_rate},
                {"optimizer", train.optimizer == Optimizer::kAdam ? "adam" : "sgd"},
                {"batch_size", train.batch_size},
                {"in_slices", train.in_slices},
                {"kernel", train.kernel},
                {"init_scale", train.init_scale}};
  json levels = json::array();
  for (const auto& lv : registration.levels) {
    levels.push_back({{"control_spacing", mgrid::vec3_to_json(lv.control_spacing)},
                      {"max_iterations", lv.max_iterations},
                      {"step_size", lv.step_size}});
  }
  j["registration"] = {{"levels", levels},
                       {"convergence_tol", registration.convergence_tol},
                       {"min_step_fraction", registration.min_step_fraction},
                       {"step_growth", registration.step_growth},
                       {"max_step_factor", registration.max_step_factor},
                       {"gradient_mode", registration.gradient_mode == GradientMode::kAnalytic
                                             ? "analytic"
                                             : "finite-difference"}};
  j["fusion"] = {{"h", fusion.h},
                 {"patch", fusion.patch},
                 {"search", fusion.search},
                 {"atlas_count", fusion.atlas_count}};
  j["landmark_source"] = landmark_source == LandmarkSource::kModel ? "model" : "file";
  return j;
}

// ---------------------------------------------------------------------------

std::vector<std::string> list_subject_ids(const fs::path& dir) {
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory() && fs::exists(e.path() / "volume.mgrid")) {
      ids.push_back(e.path().filename().string());
    }
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

Subject load_subject(const fs::path& dir, const std::string& id) {
  const fs::path base = dir / id;
  Subject s{id, read_volume(base / "volume.mgrid"), std::nullopt, std::nullopt};
  if (fs::exists(base / "labels.mgrid")) {
    s.labels = read_labels(base / "labels.mgrid");
    require_same_geometry(s.volume.geometry(), s.labels->geometry(), "subject " + id);
  }
  if (fs::exists(base / "landmarks.json")) s.landmarks = read_landmarks(base / "landmarks.json");
  return s;
}

void save_subject(const fs::path& dir, const Subject& s) {
  const fs::path base = dir / s.id;
  write_grid(base / "volume.mgrid", s.volume);
  if (s.labels) write_grid(base / "labels.mgrid", *s.labels);
  if (s.landmarks) write_landmarks(base / "landmarks.json", *s.landmarks);
}

std::vector<Atlas> load_atlases(const fs::path& dir) {
  std::vector<Atlas> atlases;
  for (const auto& id : list_subject_ids(dir)) {
    auto s = load_subject(dir, id);
    if (!s.labels || !s.landmarks) {
      throw ConfigError("atlas '" + id + "' in " + dir.string() + " lacks labels or landmarks");
    }
    Atlas a{id, std::move(s.volume), std::move(*s.labels), *s.landmarks};
    a.validate();
    atlases.push_back(std::move(a));
  }
  return atlases;
}

LrAnalysis analyse_lr(const ToyModel& model, const VolumeGrid& volume) {
  const auto pred = predict(model, volume);
  LabelGrid seg = argmax_labels(pred.seg);
  LabelGrid lmk = argmax_labels(pred.lmk);
  LandmarkSet lms = centroid_landmarks(lmk);
  return {std::move(seg), std::move(lmk), lms};
}

json RunReport::to_json() const {
  json j;
  j["command"] = command;
  j["succeeded"] = succeeded;
  j["failed"] = json::array();
  for (const auto& [id, msg] : failed) j["failed"].push_back({{"id", id}, {"error", msg}});
  j["exit_code"] = exit_code();
  if (!extra.empty()) j["details"] = extra;
  return j;
}

void write_manifest(const fs::path& out, const RunReport& report, const PipelineConfig& cfg) {
  json j = report.to_json();
  j["config"] = cfg.to_json();
  write_text(out / "manifest.json", j.dump(2));
}

// ---------------------------------------------------------------------------

RunReport cmd_phantom(const PipelineConfig& cfg) {
  require_out(cfg);
  const auto seed = require_seed(cfg);
  RunReport report{"phantom", {}, {}, {}};
  std::vector<std::string> ids;
  for (int i = 0; i < cfg.count; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "phantom_%03d", i);
    ids.emplace_back(buf);
  }
  for_each_subject(ids, cfg.workers, report, [&](std::size_t i, const std::string& id) {
    auto p = make_phantom(derive_seed(seed, i));
    save_subject(cfg.out, Subject{id, std::move(p.volume), std::move(p.labels), p.landmarks});
  });
  write_manifest(cfg.out, report, cfg);
  return report;
}

RunReport cmd_simulate(const PipelineConfig& cfg) {
  require_out(cfg);
  require_dir(cfg.subjects, "subjects");
  const auto seed = require_seed(cfg);
  RunReport report{"simulate", {}, {}, {}};
  const auto ids = list_subject_ids(cfg.subjects);
  for_each_subject(ids, cfg.workers, report, [&](std::size_t i, const std::string& id) {
    const auto s = load_subject(cfg.subjects, id);
    if (!s.labels) throw std::runtime_error("subject has no labels.mgrid");
    LrSimParams p = cfg.lr;
    p.seed = derive_seed(seed, i);
    auto lr = simulate_lr(s.volume, *s.labels, p);
    std::optional<LandmarkSet> lms;
    if (s.landmarks) {
      LandmarkSet moved = *s.landmarks;
      for (int n = 0; n < kLandmarkCount; ++n) {
        moved[n] = shift_point_with_slice((*s.landmarks)[n], lr.volume.geometry(), lr.log);
      }
      lms = moved;
    }
    save_subject(cfg.out, Subject{id, std::move(lr.volume), std::move(lr.labels), lms});
    write_text(cfg.out / id / "shiftlog.json", lr.log.to_json());
  });
  write_manifest(cfg.out, report, cfg);
  return report;
}

RunReport cmd_train(const PipelineConfig& cfg) {
  require_out(cfg);
  require_dir(cfg.subjects, "subjects");
  const auto seed = require_seed(cfg);
  RunReport report{"train", {}, {}, {}};
  const auto ids = list_subject_ids(cfg.subjects);
  std::vector<std::optional<TrainingSample>> slots(ids.size());
  for_each_subject(ids, cfg.workers, report, [&](std::size_t i, const std::string& id) {
    auto s = load_subject(cfg.subjects, id);
    if (!s.labels || !s.landmarks) throw std::runtime_error("subject lacks labels or landmarks");
    slots[i] = make_training_sample(std::move(s.volume), std::move(*s.labels), *s.landmarks);
  });
  std::vector<TrainingSample> samples;
  for (auto& s : slots) {
    if (s) samples.push_back(std::move(*s));
  }
  if (samples.empty()) throw ConfigError("train: no usable subjects in " + cfg.subjects.string());
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  tc.workers = cfg.workers;
  tc.augment = cfg.augment;
  const auto result = train_toy(samples, cfg.loss, tc);
  write_model(cfg.out / "model.mgrid", result.model);
  write_loss_trace_csv(cfg.out / "loss_trace.csv", result.trace);
  if (!result.trace.empty()) {
    report.extra["initial_loss"] = result.trace.front().loss.total;
    report.extra["final_loss"] = result.trace.back().loss.total;
  }
  write_manifest(cfg.out, report, cfg);
  return report;
}

RunReport cmd_refine(const PipelineConfig& cfg) {
  require_out(cfg);
  require_dir(cfg.subjects, "subjects");
  require_dir(cfg.atlases, "atlases");
  require_seed(cfg);
  std::optional<ToyModel> model;
  if (!cfg.model.empty()) {
    if (!fs::exists(cfg.model)) throw ConfigError("model file does not exist: " + cfg.model.string());
    model = read_model(cfg.model);
  } else if (cfg.landmark_source == LandmarkSource::kModel) {
    throw ConfigError("config: landmark_source \"model\" needs 'model'");
  }
  const auto atlases = load_atlases(cfg.atlases);
  if (atlases.size() < static_cast<std::size_t>(cfg.fusion.atlas_count)) {
    throw ConfigError("atlas directory " + cfg.atlases.string() + " holds " +
                      std::to_string(atlases.size()) + " atlases, " +
                      std::to_string(cfg.fusion.atlas_count) + " needed");
  }
  RunReport report{"refine", {}, {}, {}};
  const auto ids = list_subject_ids(cfg.subjects);
  std::vector<json> details(ids.size());
  // Atlas-level parallelism lives inside refine; subjects run in order.
  for_each_subject(ids, 1, report, [&](std::size_t i, const std::string& id) {
    const auto s = load_subject(cfg.subjects, id);
    std::optional<LrAnalysis> analysis;
    if (model) analysis = analyse_lr(*model, s.volume);
    LabelGrid seg;
    if (analysis) {
      seg = analysis->segmentation;
    } else if (s.labels) {
      seg = *s.labels;
    } else {
      throw std::runtime_error("no model and no labels.mgrid for the LR segmentation");
    }
    LandmarkSet lms;
    if (cfg.landmark_source == LandmarkSource::kModel) {
      lms = analysis->landmarks;
    } else if (s.landmarks) {
      lms = *s.landmarks;
    } else {
      throw std::runtime_error("landmark_source \"file\" but no landmarks.json");
    }
    const auto r = refine(s.volume, seg, lms, atlases, cfg.registration, cfg.fusion, cfg.workers);
    write_grid(cfg.out / id / "labels.mgrid", r.labels);
    write_grid(cfg.out / id / "lr_labels.mgrid", seg);
    write_landmarks(cfg.out / id / "lr_landmarks.json", lms);
    write_text(cfg.out / id / "report.json", r.report.to_json());
    details[i] = json::parse(r.report.to_json());
  });
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!details[i].is_null()) report.extra[ids[i]] = details[i]["selected_atlases"];
  }
  write_manifest(cfg.out, report, cfg);
  return report;
}

RunReport cmd_evaluate(const PipelineConfig& cfg) {
  require_out(cfg);
  require_dir(cfg.subjects, "subjects");
  require_dir(cfg.reference, "reference");
  RunReport report{"evaluate", {}, {}, {}};
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(cfg.subjects)) {
    if (e.is_directory() && fs::exists(e.path() / "labels.mgrid")) ids.push_back(e.path().filename().string());
  }
  std::sort(ids.begin(), ids.end());
  std::vector<std::optional<SubjectScore>> scores(ids.size());
  std::vector<std::optional<SubjectClinical>> clinical(ids.size());
  for_each_subject(ids, cfg.workers, report, [&](std::size_t i, const std::string& id) {
    const fs::path ref_path = cfg.reference / id / "labels.mgrid";
    if (!fs::exists(ref_path)) throw std::runtime_error("no reference labels at " + ref_path.string());
    const auto ref = read_labels(ref_path);
    auto pred = read_labels(cfg.subjects / id / "labels.mgrid");
    if (!same_geometry(pred.geometry(), ref.geometry())) {
      pred = resample_nearest_to(pred, ref.geometry(), OutsidePolicy::kFill);
    }
    scores[i] = SubjectScore{id, score_segmentation(pred, ref)};
    clinical[i] = SubjectClinical{id, clinical_measures(pred)};
  });
  std::vector<SubjectScore> s;
  std::vector<SubjectClinical> c;
  std::vector<SegScore> raw_s;
  std::vector<ClinicalMeasures> raw_c;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!scores[i]) continue;
    s.push_back(*scores[i]);
    c.push_back(*clinical[i]);
    raw_s.push_back(scores[i]->score);
    raw_c.push_back(clinical[i]->measures);
  }
  write_scores_csv(cfg.out / "scores.csv", s);
  write_clinical_csv(cfg.out / "clinical.csv", c);
  if (!raw_s.empty()) {
    auto fields = cohort_report(raw_s);
    const auto cf = cohort_report(raw_c);
    fields.insert(fields.end(), cf.begin(), cf.end());
    write_text(cfg.out / "summary.json", summary_to_json(fields));
  }
  write_manifest(cfg.out, report, cfg);
  return report;
}

RunReport cmd_select_atlases(const PipelineConfig& cfg) {
  require_out(cfg);
  require_dir(cfg.subjects, "subjects");
  require_dir(cfg.atlases, "atlases");
  const auto atlases = load_atlases(cfg.atlases);
  RunReport report{"select-atlases", {}, {}, {}};
  const auto ids = list_subject_ids(cfg.subjects);
  for_each_subject(ids, 1, report, [&](std::size_t, const std::string& id) {
    const auto s = load_subject(cfg.subjects, id);
    if (!s.labels || !s.landmarks) throw std::runtime_error("target lacks labels or landmarks");
    const auto chosen = select_atlases(*s.labels, *s.landmarks, atlases, cfg.fusion.atlas_count, cfg.workers);
    json j = json::array();
    for (const auto& m : chosen) {
      j.push_back({{"id", m.id},
                   {"nmi", m.nmi},
                   {"fit_rms_mm", m.fit_rms_mm},
                   {"affine_row_major", m.source_to_target.to_row_major()}});
    }
    write_text(cfg.out / id / "selection.json", j.dump(2));
  });
  write_manifest(cfg.out, report, cfg);
  return report;
}

RunReport cmd_register(const PipelineConfig& cfg) {
  require_out(cfg);
  require_dir(cfg.subjects, "subjects");
  require_dir(cfg.atlases, "atlases");
  const auto atlases = load_atlases(cfg.atlases);
  RunReport report{"register", {}, {}, {}};
  const auto ids = list_subject_ids(cfg.subjects);
  for_each_subject(ids, 1, report, [&](std::size_t, const std::string& id) {
    const auto s = load_subject(cfg.subjects, id);
    if (!s.labels || !s.landmarks) throw std::runtime_error("target lacks labels or landmarks");
    const auto chosen = select_atlases(*s.labels, *s.landmarks, atlases, cfg.fusion.atlas_count, cfg.workers);
    std::vector<RegistrationResult> regs(chosen.size());
    parallel_for(chosen.size(), cfg.workers, [&](std::size_t i) {
      regs[i] = register_ffd(*s.labels, atlases[chosen[i].index].labels, chosen[i].source_to_target,
                             cfg.registration);
    });
    json j = json::array();
    for (std::size_t i = 0; i < chosen.size(); ++i) {
      const auto& atlas = atlases[chosen[i].index];
      const fs::path dir = cfg.out / id / "warped" / atlas.id;
      write_ffd(dir / "ffd.mgrid", regs[i].transform);
      write_grid(dir / "volume.mgrid", warp_volume(atlas.volume, regs[i].transform, s.labels->geometry()));
      write_grid(dir / "labels.mgrid", warp_labels(atlas.labels, regs[i].transform, s.labels->geometry()).labels);
      j.push_back({{"id", atlas.id},
                   {"consistency_initial", regs[i].initial_consistency},
                   {"consistency_final", regs[i].final_consistency},
                   {"iterations", regs[i].iterations},
                   {"trace", regs[i].trace}});
    }
    write_text(cfg.out / id / "registration.json", j.dump(2));
  });
  write_manifest(cfg.out, report, cfg);
  return report;
}

RunReport cmd_fuse(const PipelineConfig& cfg) {
  require_out(cfg);
  require_dir(cfg.subjects, "subjects");
  require_dir(cfg.atlases, "atlases");
  RunReport report{"fuse", {}, {}, {}};
  const auto ids = list_subject_ids(cfg.subjects);
  for_each_subject(ids, 1, report, [&](std::size_t, const std::string& id) {
    const auto s = load_subject(cfg.subjects, id);
    const fs::path dir = cfg.atlases / id / "warped";
    if (!fs::is_directory(dir)) throw std::runtime_error("no warped atlases at " + dir.string());
    std::vector<WarpedAtlas> warped;
    for (const auto& aid : list_subject_ids(dir)) {
      warped.push_back(WarpedAtlas{read_volume(dir / aid / "volume.mgrid"),
                                   read_labels(dir / aid / "labels.mgrid")});
    }
    write_grid(cfg.out / id / "labels.mgrid", fuse_labels(s.volume, warped, cfg.fusion, cfg.workers));
  });
  write_manifest(cfg.out, report, cfg);
  return report;
}

}  // namespace shaperefine
