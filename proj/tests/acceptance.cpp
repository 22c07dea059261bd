// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iterator>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "shaperefine/landmarks.hpp"
#include "shaperefine/metrics.hpp"
#include "shaperefine/multitask.hpp"
#include "shaperefine/phantom.hpp"
#include "shaperefine/pipeline.hpp"
#include "shaperefine/regfuse.hpp"
#include "support.hpp"

using namespace shaperefine;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

int failures = 0;

void report(int n, bool ok, const std::string& detail) {
  std::printf("criterion %d: %s  %s\n", n, ok ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

ScoreGrid random_logits(const Geometry& g, int channels, Rng& rng) {
  ScoreGrid s(g, channels);
  for (auto& x : s.values()) x = 2.0 * rng.normal();
  return s;
}

// Worst relative error over sampled logit entries of a loss and its logit gradient.
double worst_logit_gradient_error(ScoreGrid z, const std::function<double(const ScoreGrid&)>& loss,
                                  const ScoreGrid& grad, Rng& rng, int samples) {
  double worst = 0.0;
  // below ~1e-5 cancellation in the loss difference dominates on entries near 1e-7
  const double h = 1e-4;
  for (int n = 0; n < samples; ++n) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(z.voxel_count()) - 1));
    const int k = rng.uniform_int(0, z.channels() - 1);
    const double keep = z.at(j, k);
    z.at(j, k) = keep + h;
    const double up = loss(softmax_channels(z));
    z.at(j, k) = keep - h;
    const double down = loss(softmax_channels(z));
    z.at(j, k) = keep;
    worst = std::max(worst, rel_err(grad.at(j, k), (up - down) / (2 * h)));
  }
  return worst;
}

void criterion_1() {
  const auto t0 = Clock::now();
  Rng rng(101);
  const auto g = testsupport::cube(8);
  double worst_dice = 0.0, worst_ce = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto r = testsupport::random_labels(g, kTissueClassCount, rng);
    const auto z = random_logits(g, kTissueClassCount, rng);
    const auto p = softmax_channels(z);
    const auto gd = softmax_backward(p, dice_loss_grad(p, r, 1e-8));
    worst_dice = std::max(worst_dice, worst_logit_gradient_error(
                                          z, [&](const ScoreGrid& q) { return dice_loss(q, r, 1e-8); }, gd, rng, 20));

    const auto l = testsupport::random_labels(g, kLandmarkClassCount, rng);
    const auto zl = random_logits(g, kLandmarkClassCount, rng);
    const auto gc = weighted_ce_grad_logits(softmax_channels(zl), l);
    worst_ce = std::max(worst_ce, worst_logit_gradient_error(
                                      zl, [&](const ScoreGrid& q) { return weighted_ce_loss(q, l); }, gc, rng, 20));
  }
  const double sec = seconds_since(t0);
  report(1, worst_dice <= 1e-3 && worst_ce <= 1e-3 && sec < 30.0,
         fmt("gradients: worst rel err dice %.2e, ce %.2e (<= 1e-3); %.1f s (< 30)", worst_dice, worst_ce, sec));
}

void criterion_2() {
  Rng rng(202);
  double worst_dice = 0.0, worst_ce = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Geometry g{{6 + trial % 3, 7, 5 + trial % 4}, {1.25, 1.25, 2.0}, Vec3::Zero()};
    auto r = testsupport::random_labels(g, kTissueClassCount, rng);
    for (int k = 0; k < kTissueClassCount; ++k) r[k] = static_cast<std::uint8_t>(k);  // all classes present
    worst_dice = std::max(worst_dice, std::abs(dice_loss(one_hot(r).cast<double>(), r, 1e-8) + 5.0));
    const auto l = testsupport::random_labels(g, kLandmarkClassCount, rng);
    worst_ce = std::max(worst_ce, weighted_ce_loss(one_hot(l).cast<double>(), l));
  }
  report(2, worst_dice <= 1e-6 && worst_ce <= 1e-4,
         fmt("loss extremes: max |dice + 5| %.2e (<= 1e-6), max ce %.2e (<= 1e-4)", worst_dice, worst_ce));
}

void criterion_3() {
  Rng rng(303);
  double worst_entry = 0.0, worst_residual = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::array<Vec3, kLandmarkCount> src, dst;
    for (auto& p : src) p = Vec3(rng.uniform(-40, 40), rng.uniform(-40, 40), rng.uniform(-60, 60));
    Mat3 A = Mat3::Identity();
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) A(r, c) += rng.uniform(-0.5, 0.5);
    const Vec3 t(rng.uniform(-30, 30), rng.uniform(-30, 30), rng.uniform(-30, 30));
    for (int i = 0; i < kLandmarkCount; ++i) dst[i] = A * src[i] + t;
    const auto fit = fit_affine_12dof(LandmarkSet(src), LandmarkSet(dst));
    worst_entry = std::max({worst_entry, (fit.transform.matrix - A).cwiseAbs().maxCoeff(),
                            (fit.transform.translation - t).cwiseAbs().maxCoeff()});
    worst_residual = std::max(worst_residual, fit.max_residual);
  }
  report(3, worst_entry <= 1e-6 && worst_residual <= 1e-9,
         fmt("affine recovery: max entry err %.2e (<= 1e-6), max residual %.2e (<= 1e-9)", worst_entry,
             worst_residual));
}

void criterion_4() {
  const auto t0 = Clock::now();
  Rng rng(404);
  FusionConfig c;
  c.patch = {3, 3, 1};
  c.search = {3, 3, 3};
  int identical = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto g = testsupport::cube(8);
    const auto target = testsupport::random_volume(g, rng);
    std::vector<WarpedAtlas> atlases;
    for (int n = 0; n < 2 + trial % 2; ++n) {
      atlases.push_back({testsupport::random_volume(g, rng), testsupport::random_labels(g, kTissueClassCount, rng)});
    }
    identical += fuse_labels(target, atlases, c) == testsupport::fusion_oracle(target, atlases, c);
  }
  const double sec = seconds_since(t0);
  report(4, identical == 20 && sec < 60.0,
         fmt("fusion oracle: %d/20 voxel-identical; %.1f s (< 60)", identical, sec));
}

void criterion_5() {
  const auto t0 = Clock::now();
  RegistrationConfig cfg;
  cfg.levels = {{Vec3(40, 40, 64), 150, 2.0}, {Vec3(20, 20, 32), 150, 1.0}, {Vec3(10, 10, 16), 150, 0.5}};
  cfg.convergence_tol = 0.0;
  bool ok = true;
  double worst_c = 1.0, worst_dice = 1.0;
  for (int s = 0; s < 10; ++s) {
    const auto p = make_phantom(100 + s);
    const auto& g = p.labels.geometry();
    // 16 voxels of control spacing, 4 voxels of maximum displacement
    const auto truth = random_smooth_ffd(g, Vec3(20, 20, 32), Vec3(5, 5, 8), 500 + s);
    const auto target = warp_labels(p.labels, truth, g).labels;
    const auto r = register_ffd(target, p.labels, AffineTransform::identity(), cfg);
    const auto w = warp_labels(p.labels, r.transform, g).labels;
    const bool monotone = std::is_sorted(r.trace.begin(), r.trace.end());
    double dmin = 1.0;
    for (int k = 1; k < kTissueClassCount; ++k) dmin = std::min(dmin, dice_index(w, target, k));
    const bool pair_ok = monotone && r.final_consistency >= 0.95 && r.final_consistency > r.initial_consistency &&
                         dmin >= 0.92;
    std::printf("  pair %d: C %.4f -> %.4f, min Dice %.3f, monotone %s\n", s, r.initial_consistency,
                r.final_consistency, dmin, monotone ? "yes" : "no");
    ok = ok && pair_ok;
    worst_c = std::min(worst_c, r.final_consistency);
    worst_dice = std::min(worst_dice, dmin);
  }
  report(5, ok,
         fmt("FFD recovery: worst final C %.4f (>= 0.95), worst class Dice %.3f (>= 0.92); %.0f s", worst_c,
             worst_dice, seconds_since(t0)));
}

struct ChainResult {
  double dice_refined = 0.0, dice_baseline = 0.0;
  double hd_refined = 0.0, hd_baseline = 0.0;          // LVC
  double hd_all_refined = 0.0, hd_all_baseline = 0.0;  // mean over the four classes
  double seconds = 0.0;
  int subjects = 0;
  std::vector<std::string> failures;
};

// Phantom -> simulate -> train -> refine -> evaluate under `root`.
ChainResult run_chain(const fs::path& root) {
  const auto t0 = Clock::now();
  ChainResult out;
  fs::remove_all(root);
  PipelineConfig c;
  c.seed = 2024;
  c.workers = 4;
  c.lr.apical_truncation_slices = 1;
  c.landmark_source = LandmarkSource::kFile;
  c.fusion.atlas_count = 5;

  c.out = root / "hr";
  c.count = 30;
  cmd_phantom(c);
  for (const auto& id : list_subject_ids(root / "hr")) {
    const int n = std::stoi(id.substr(id.find('_') + 1));
    const fs::path dst = root / (n < 20 ? "atlas_hr" : "target_hr") / id;
    fs::create_directories(dst.parent_path());
    fs::copy(root / "hr" / id, dst, fs::copy_options::recursive);
  }
  c.subjects = root / "atlas_hr";
  c.out = root / "atlas_lr";
  cmd_simulate(c);
  c.subjects = root / "target_hr";
  c.out = root / "target_lr";
  c.seed = 2025;
  cmd_simulate(c);
  c.seed = 2024;

  c.subjects = root / "atlas_lr";
  c.out = root / "model";
  cmd_train(c);

  c.subjects = root / "target_lr";
  c.atlases = root / "atlas_hr";
  c.model = root / "model" / "model.mgrid";
  c.out = root / "refined";
  const auto rr = cmd_refine(c);
  for (const auto& [id, msg] : rr.failed) out.failures.push_back(id + ": " + msg);

  c.subjects = root / "refined";
  c.reference = root / "target_hr";
  c.out = root / "evaluation";
  cmd_evaluate(c);

  for (const auto& id : rr.succeeded) {
    const auto ref = read_labels(root / "target_hr" / id / "labels.mgrid");
    const auto refined = resample_nearest_to(read_labels(root / "refined" / id / "labels.mgrid"), ref.geometry(),
                                             OutsidePolicy::kFill);
    const auto baseline = resample_nearest_to(read_labels(root / "refined" / id / "lr_labels.mgrid"), ref.geometry(),
                                              OutsidePolicy::kFill);
    const auto so = score_segmentation(refined, ref), sb = score_segmentation(baseline, ref);
    out.dice_refined += so.dice[0];
    out.dice_baseline += sb.dice[0];
    out.hd_refined += so.hausdorff_mm[0].value_or(NAN);
    out.hd_baseline += sb.hausdorff_mm[0].value_or(NAN);
    for (int k = 0; k < kTissueClassCount - 1; ++k) {
      out.hd_all_refined += so.hausdorff_mm[k].value_or(NAN) / 4;
      out.hd_all_baseline += sb.hausdorff_mm[k].value_or(NAN) / 4;
    }
    ++out.subjects;
  }
  if (out.subjects > 0) {
    for (double* x : {&out.dice_refined, &out.dice_baseline, &out.hd_refined, &out.hd_baseline,
                      &out.hd_all_refined, &out.hd_all_baseline}) {
      *x /= out.subjects;
    }
  }
  out.seconds = seconds_since(t0);
  return out;
}

std::vector<char> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void criteria_6_and_7(const fs::path& work) {
  const auto a = run_chain(work / "run_a");
  for (const auto& f : a.failures) std::printf("  refine failed for %s\n", f.c_str());
  const double reduction = 1.0 - a.hd_refined / a.hd_baseline;
  std::printf("  mean Hausdorff over all classes: %.2f mm vs %.2f mm baseline (%.0f%% reduction)\n",
              a.hd_all_refined, a.hd_all_baseline, 100.0 * (1.0 - a.hd_all_refined / a.hd_all_baseline));
  const bool ok6 = a.failures.empty() && a.subjects == 10 && a.dice_refined >= 0.85 &&
                   a.dice_refined > a.dice_baseline && reduction >= 0.30 && a.seconds <= 600.0;
  report(6, ok6,
         fmt("end to end: LVC Dice %.3f vs %.3f baseline (>= 0.85, > baseline); LVC Hausdorff %.2f vs %.2f mm, "
             "%.0f%% reduction (>= 30%%); %.0f s (<= 600) on 4 workers, %d subjects",
             a.dice_refined, a.dice_baseline, a.hd_refined, a.hd_baseline, 100.0 * reduction, a.seconds,
             a.subjects));

  const auto b = run_chain(work / "run_b");
  int same = 0, total = 0;
  for (const auto& e : fs::directory_iterator(work / "run_a" / "refined")) {
    if (!e.is_directory()) continue;
    ++total;
    const auto other = work / "run_b" / "refined" / e.path().filename() / "labels.mgrid";
    same += fs::exists(other) && read_bytes(e.path() / "labels.mgrid") == read_bytes(other);
  }
  report(7, total == 10 && same == total && b.failures.empty(),
         fmt("determinism: %d/%d refined label grids byte-identical across two runs", same, total));
}

void criterion_8() {
  Rng rng(808);
  double worst_nmi = 0.0, worst_cons = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Geometry g{{5 + trial % 5, 6, 4 + trial % 3}, {1.25, 1.25, 2.0}, Vec3::Zero()};
    auto a = testsupport::random_labels(g, 2 + trial % 4, rng);
    a[0] = 0;
    a[1] = 1;  // non-constant
    worst_nmi = std::max(worst_nmi, std::abs(nmi(a, a) - 2.0));
    worst_cons = std::max(worst_cons, std::abs(label_consistency(a, one_hot(a)) - 1.0));
  }
  report(8, worst_nmi <= 1e-9 && worst_cons <= 1e-9,
         fmt("invariants: max |nmi(a,a) - 2| %.2e, max |consistency - 1| %.2e (<= 1e-9)", worst_nmi, worst_cons));
}

void criterion_9() {
  const auto t0 = Clock::now();
  int separable = 0, extracted = 0;
  double worst_acc = 1.0;
  for (int s = 0; s < 10; ++s) {
    auto p = make_ellipsoid_phantom(900 + s, Geometry{{24, 24, 12}, {1.25, 1.25, 2.0}, Vec3::Zero()});
    const std::vector<TrainingSample> samples{make_training_sample(p.volume, p.labels, p.landmarks)};
    TrainConfig cfg;
    cfg.epochs = 200;  // a single sample: one step per epoch
    cfg.seed = s;
    const auto r = train_toy(samples, LossWeights{}, cfg);
    const auto pred = predict(r.model, samples[0].volume);
    const auto seg = argmax_labels(pred.seg);
    std::size_t hit = 0;
    for (std::size_t v = 0; v < seg.size(); ++v) hit += seg[v] == samples[0].labels[v];
    const double acc = static_cast<double>(hit) / seg.size();
    worst_acc = std::min(worst_acc, acc);
    separable += acc >= 0.95;
    try {
      centroid_landmarks(argmax_labels(pred.lmk));
      ++extracted;
    } catch (const IncompleteLandmarksError&) {
    }
  }
  report(9, separable == 10 && extracted >= 8,
         fmt("toy trainer: %d/10 seeds >= 0.95 accuracy in 200 steps (worst %.4f); landmark extraction on %d/10 "
             "seeds (>= 8); %.0f s",
             separable, worst_acc, extracted, seconds_since(t0)));
}

}  // namespace

int main() {
  testsupport::TempDir work("acceptance");
  criterion_1();
  criterion_2();
  criterion_3();
  criterion_4();
  criterion_5();
  criteria_6_and_7(work.path);
  criterion_8();
  criterion_9();
  std::printf("%s: %d criteria failed\n", failures == 0 ? "ACCEPTED" : "REJECTED", failures);
  return failures == 0 ? 0 : 1;
}
