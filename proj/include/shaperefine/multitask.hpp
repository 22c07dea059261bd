#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "shaperefine/preproc.hpp"
#include "shaperefine/volgrid.hpp"

namespace shaperefine {

// Coefficients of the joint objective: Dice + alpha * landmark CE + beta * ||W||^2.
struct LossWeights {
  double alpha = 0.8;
  double beta = 5e-5;
  double epsilon = 1e-8;

  void validate() const;
};

inline constexpr double kLogClamp = 1e-12;

// Per-voxel softmax with max subtraction. Throws NumericError on non-finite logits.
ScoreGrid softmax_channels(const ScoreGrid& logits);
// Pulls a gradient w.r.t. probabilities back to the logits.
ScoreGrid softmax_backward(const ScoreGrid& p, const ScoreGrid& grad_p);

// -sum_k 2 sum_j [r_j = k] p_jk / (sum_j ([r_j = k] + p_jk^2) + epsilon), over all classes.
double dice_loss(const ScoreGrid& p, const LabelGrid& r, double epsilon);
ScoreGrid dice_loss_grad(const ScoreGrid& p, const LabelGrid& r, double epsilon);

// w_k = 1 - |Y_k| / |Y| for every class of the grid.
std::vector<double> class_weights(const LabelGrid& l);

// -sum_k w_k sum_{j in Y_k} log max(p_jk, 1e-12)
double weighted_ce_loss(const ScoreGrid& p, const LabelGrid& l);
// Gradient w.r.t. probabilities: -w_k / p_jk on the reference channel (0 where clamped).
ScoreGrid weighted_ce_grad(const ScoreGrid& p, const LabelGrid& l);
// Same loss differentiated through the softmax that produced p.
ScoreGrid weighted_ce_grad_logits(const ScoreGrid& p, const LabelGrid& l);

// Landmark classes 1..6 rasterised to the voxel nearest each position; the rest
// is background. Throws ShapeError if two landmarks land on one voxel.
LabelGrid rasterize_landmarks(const LandmarkSet& lms, const Geometry& geometry);
// Checks the single-voxel-per-landmark invariant.
void validate_landmark_grid(const LabelGrid& l);

// Single linear convolution over a 2.5D slice stack: for each output voxel the
// input is the kernel x kernel in-plane neighbourhood of in_slices consecutive
// slices centred on it. Outputs 5 segmentation + 7 landmark logits.
class ToyModel {
 public:
  static constexpr int kOutputs = kTissueClassCount + kLandmarkClassCount;

  explicit ToyModel(int in_slices = 3, int kernel = 5);

  int in_slices() const { return in_slices_; }
  int kernel() const { return kernel_; }
  int feature_count() const { return in_slices_ * kernel_ * kernel_; }

  // Row-major [output][slice][ky][kx].
  std::span<const float> weights() const { return weights_; }
  std::span<float> weights() { return weights_; }
  std::span<const float> bias() const { return bias_; }
  std::span<float> bias() { return bias_; }
  float& weight(int out, int slice, int ky, int kx) {
    return weights_[static_cast<std::size_t>(out) * feature_count() +
                    (slice * kernel_ + ky) * kernel_ + kx];
  }

  // Sum of squares of every parameter (kernel weights and biases).
  double frobenius_sq() const;
  bool is_finite() const;

  friend bool operator==(const ToyModel&, const ToyModel&) = default;

 private:
  int in_slices_;
  int kernel_;
  std::vector<float> weights_;
  std::vector<float> bias_;
};

struct TrainingSample {
  VolumeGrid volume;
  LabelGrid labels;            // tissue classes
  LabelGrid landmark_labels;   // 7-class landmark grid
  std::optional<LandmarkSet> landmarks;  // needed only for augmentation
};

struct LossBreakdown {
  double dice = 0.0;
  double landmark = 0.0;
  double regulariser = 0.0;
  double total = 0.0;
};

// Raw 12-channel logits for a volume.
ScoreGrid forward_logits(const ToyModel& model, const VolumeGrid& v);

struct Prediction {
  ProbGrid seg;  // 5 channels
  ProbGrid lmk;  // 7 channels
};
Prediction predict(const ToyModel& model, const VolumeGrid& v);

LossBreakdown total_loss(const ToyModel& model, std::span<const TrainingSample> batch,
                         const LossWeights& w);

enum class Optimizer { kSgd, kAdam };

struct TrainConfig {
  int epochs = 50;
  double learning_rate = 0.05;
  std::uint64_t seed = 0;
  Optimizer optimizer = Optimizer::kAdam;
  int batch_size = 8;  // 0 = whole set
  int in_slices = 3;
  int kernel = 5;
  double init_scale = 0.01;
  int workers = 1;
  std::optional<AugmentParams> augment;
};

struct LossRecord {
  int epoch = 0;
  LossBreakdown loss;
};

struct TrainResult {
  ToyModel model;
  std::vector<LossRecord> trace;
};

// Mini-batch training on the joint objective. Throws NumericError with the
// epoch and batch when the loss becomes non-finite.
TrainResult train_toy(std::span<const TrainingSample> samples, const LossWeights& w,
                      const TrainConfig& cfg);

// Builds a training sample from a volume, its tissue labels and landmarks.
TrainingSample make_training_sample(VolumeGrid volume, LabelGrid labels, const LandmarkSet& lms);

void write_model(const std::filesystem::path& path, const ToyModel& model);
ToyModel read_model(const std::filesystem::path& path);
void write_loss_trace_csv(const std::filesystem::path& path, std::span<const LossRecord> trace);

}  // namespace shaperefine
