#include "shaperefine/multitask.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "shaperefine/mgrid.hpp"
#include "shaperefine/parallel.hpp"
#include "shaperefine/random.hpp"

namespace shaperefine {

void LossWeights::validate() const {
  if (!(alpha >= 0.0) || !(beta >= 0.0) || !(epsilon > 0.0)) {
    throw ParameterError("loss weights: need alpha >= 0, beta >= 0, epsilon > 0");
  }
}

ScoreGrid softmax_channels(const ScoreGrid& logits) {
  const int C = logits.channels();
  if (C < 2) throw ShapeError("softmax_channels: need at least 2 channels");
  ScoreGrid out(logits.geometry(), C);
  for (std::size_t v = 0; v < logits.voxel_count(); ++v) {
    const auto z = logits.voxel(v);
    auto p = out.voxel(v);
    double m = z[0];
    for (int c = 0; c < C; ++c) {
      if (!std::isfinite(z[c])) throw NumericError("softmax_channels: non-finite logit");
      m = std::max(m, z[c]);
    }
    double sum = 0.0;
    for (int c = 0; c < C; ++c) {
      p[c] = std::exp(z[c] - m);
      sum += p[c];
    }
    for (int c = 0; c < C; ++c) p[c] /= sum;
  }
  return out;
}

ScoreGrid softmax_backward(const ScoreGrid& p, const ScoreGrid& grad_p) {
  if (p.channels() != grad_p.channels() || p.voxel_count() != grad_p.voxel_count()) {
    throw ShapeError("softmax_backward: shape mismatch");
  }
  const int C = p.channels();
  ScoreGrid out(p.geometry(), C);
  for (std::size_t v = 0; v < p.voxel_count(); ++v) {
    const auto pv = p.voxel(v);
    const auto gv = grad_p.voxel(v);
    double dot = 0.0;
    for (int c = 0; c < C; ++c) dot += pv[c] * gv[c];
    auto o = out.voxel(v);
    for (int c = 0; c < C; ++c) o[c] = pv[c] * (gv[c] - dot);
  }
  return out;
}

namespace {

void check_seg_shapes(const ScoreGrid& p, const LabelGrid& r, const char* what) {
  if (p.voxel_count() != r.size() || !same_geometry(p.geometry(), r.geometry())) {
    throw ShapeError(std::string(what) + ": geometry mismatch");
  }
  if (p.channels() != r.class_count()) {
    throw ShapeError(std::string(what) + ": " + std::to_string(p.channels()) +
                     " channels for " + std::to_string(r.class_count()) + " classes");
  }
}

struct DiceSums {
  std::vector<double> overlap;      // sum_j [r_j = k] p_jk
  std::vector<double> denominator;  // sum_j ([r_j = k] + p_jk^2) + eps
};

DiceSums dice_sums(const ScoreGrid& p, const LabelGrid& r, double eps) {
  const int K = p.channels();
  DiceSums s{std::vector<double>(K, 0.0), std::vector<double>(K, 0.0)};
  for (std::size_t j = 0; j < r.size(); ++j) {
    const auto pj = p.voxel(j);
    const int rj = r[j];
    for (int k = 0; k < K; ++k) s.denominator[k] += pj[k] * pj[k];
    s.overlap[rj] += pj[rj];
    s.denominator[rj] += 1.0;
  }
  for (auto& d : s.denominator) d += eps;
  return s;
}

}  // namespace

double dice_loss(const ScoreGrid& p, const LabelGrid& r, double epsilon) {
  check_seg_shapes(p, r, "dice_loss");
  const auto s = dice_sums(p, r, epsilon);
  double loss = 0.0;
  for (int k = 0; k < p.channels(); ++k) loss -= 2.0 * s.overlap[k] / s.denominator[k];
  return loss;
}

ScoreGrid dice_loss_grad(const ScoreGrid& p, const LabelGrid& r, double epsilon) {
  check_seg_shapes(p, r, "dice_loss_grad");
  const int K = p.channels();
  const auto s = dice_sums(p, r, epsilon);
  ScoreGrid g(p.geometry(), K);
  for (std::size_t j = 0; j < r.size(); ++j) {
    const auto pj = p.voxel(j);
    auto gj = g.voxel(j);
    const int rj = r[j];
    for (int k = 0; k < K; ++k) {
      const double d = s.denominator[k];
      const double ind = (rj == k) ? 1.0 : 0.0;
      gj[k] = -(2.0 * ind / d - 4.0 * s.overlap[k] * pj[k] / (d * d));
    }
  }
  return g;
}

std::vector<double> class_weights(const LabelGrid& l) {
  const auto h = l.histogram();
  const double total = static_cast<double>(l.size());
  std::vector<double> w(h.size());
  for (std::size_t k = 0; k < h.size(); ++k) w[k] = 1.0 - static_cast<double>(h[k]) / total;
  return w;
}

double weighted_ce_loss(const ScoreGrid& p, const LabelGrid& l) {
  check_seg_shapes(p, l, "weighted_ce_loss");
  const auto w = class_weights(l);
  std::vector<double> per_class(w.size(), 0.0);
  for (std::size_t j = 0; j < l.size(); ++j) {
    const int k = l[j];
    per_class[k] += std::log(std::max(p.at(j, k), kLogClamp));
  }
  double loss = 0.0;
  for (std::size_t k = 0; k < w.size(); ++k) loss -= w[k] * per_class[k];
  return loss;
}

ScoreGrid weighted_ce_grad(const ScoreGrid& p, const LabelGrid& l) {
  check_seg_shapes(p, l, "weighted_ce_grad");
  const auto w = class_weights(l);
  ScoreGrid g(p.geometry(), p.channels(), 0.0);
  for (std::size_t j = 0; j < l.size(); ++j) {
    const int k = l[j];
    const double pk = p.at(j, k);
    if (pk > kLogClamp) g.at(j, k) = -w[k] / pk;
  }
  return g;
}

ScoreGrid weighted_ce_grad_logits(const ScoreGrid& p, const LabelGrid& l) {
  check_seg_shapes(p, l, "weighted_ce_grad_logits");
  const auto w = class_weights(l);
  const int C = p.channels();
  ScoreGrid g(p.geometry(), C, 0.0);
  for (std::size_t j = 0; j < l.size(); ++j) {
    const int k = l[j];
    const auto pj = p.voxel(j);
    if (!(pj[k] > kLogClamp)) continue;
    auto gj = g.voxel(j);
    for (int c = 0; c < C; ++c) gj[c] = w[k] * (pj[c] - (c == k ? 1.0 : 0.0));
  }
  return g;
}

LabelGrid rasterize_landmarks(const LandmarkSet& lms, const Geometry& geometry) {
  LabelGrid out(geometry, kLandmarkClassCount);
  for (int n = 0; n < kLandmarkCount; ++n) {
    const Vec3 ci = geometry.to_index(lms[n]);
    Index3 idx;
    for (int a = 0; a < 3; ++a) {
      idx[a] = std::clamp(static_cast<int>(std::floor(ci[a] + 0.5)), 0, geometry.dims[a] - 1);
    }
    auto& cell = out(idx[0], idx[1], idx[2]);
    if (cell != kBackground) {
      throw ShapeError("rasterize_landmarks: '" + std::string(kLandmarkNames[n]) +
                       "' shares a voxel with '" + std::string(kLandmarkNames[cell - 1]) + "'");
    }
    cell = static_cast<std::uint8_t>(n + 1);
  }
  return out;
}

void validate_landmark_grid(const LabelGrid& l) {
  if (l.class_count() != kLandmarkClassCount) {
    throw ShapeError("landmark grid: class_count must be 7");
  }
  const auto h = l.histogram();
  for (int k = 1; k < kLandmarkClassCount; ++k) {
    if (h[k] != 1) {
      throw ShapeError("landmark grid: class " + std::to_string(k) + " occupies " +
                       std::to_string(h[k]) + " voxels");
    }
  }
}

// ---------------------------------------------------------------------------

ToyModel::ToyModel(int in_slices, int kernel) : in_slices_(in_slices), kernel_(kernel) {
  if (in_slices < 1 || in_slices % 2 == 0 || kernel < 1 || kernel % 2 == 0) {
    throw ParameterError("ToyModel: slice stack and kernel extent must be odd and >= 1");
  }
  weights_.assign(static_cast<std::size_t>(kOutputs) * feature_count(), 0.0f);
  bias_.assign(kOutputs, 0.0f);
}

double ToyModel::frobenius_sq() const {
  double s = 0.0;
  for (float w : weights_) s += static_cast<double>(w) * w;
  for (float b : bias_) s += static_cast<double>(b) * b;
  return s;
}

bool ToyModel::is_finite() const {
  return std::all_of(weights_.begin(), weights_.end(), [](float x) { return std::isfinite(x); }) &&
         std::all_of(bias_.begin(), bias_.end(), [](float x) { return std::isfinite(x); });
}

namespace {

// Gathers the 2.5D neighbourhood of every voxel of one slice, edge-clamped.
class FeatureGatherer {
 public:
  FeatureGatherer(const ToyModel& m, const VolumeGrid& v) : m_(m), v_(v) {}

  void gather(int i, int j, int k, std::vector<double>& f) const {
    const auto& d = v_.dims();
    const int r = m_.kernel() / 2;
    const int rs = m_.in_slices() / 2;
    std::size_t n = 0;
    for (int s = 0; s < m_.in_slices(); ++s) {
      const int kk = std::clamp(k + s - rs, 0, d[2] - 1);
      for (int ky = 0; ky < m_.kernel(); ++ky) {
        const int jj = std::clamp(j + ky - r, 0, d[1] - 1);
        for (int kx = 0; kx < m_.kernel(); ++kx) {
          const int ii = std::clamp(i + kx - r, 0, d[0] - 1);
          f[n++] = v_(ii, jj, kk);
        }
      }
    }
  }

 private:
  const ToyModel& m_;
  const VolumeGrid& v_;
};

ScoreGrid split_channels(const ScoreGrid& all, int first, int count) {
  ScoreGrid out(all.geometry(), count);
  for (std::size_t v = 0; v < all.voxel_count(); ++v) {
    const auto src = all.voxel(v);
    auto dst = out.voxel(v);
    for (int c = 0; c < count; ++c) dst[c] = src[first + c];
  }
  return out;
}

struct SampleEval {
  double dice = 0.0;
  double landmark = 0.0;
  std::vector<double> grad;  // weights then biases, data terms only
};

SampleEval evaluate_sample(const ToyModel& model, const TrainingSample& s, const LossWeights& w,
                           bool want_grad) {
  require_same_geometry(s.volume.geometry(), s.labels.geometry(), "training sample labels");
  require_same_geometry(s.volume.geometry(), s.landmark_labels.geometry(),
                        "training sample landmark labels");
  const ScoreGrid logits = forward_logits(model, s.volume);
  const ScoreGrid p_seg = softmax_channels(split_channels(logits, 0, kTissueClassCount));
  const ScoreGrid p_lmk =
      softmax_channels(split_channels(logits, kTissueClassCount, kLandmarkClassCount));
  SampleEval out;
  out.dice = dice_loss(p_seg, s.labels, w.epsilon);
  out.landmark = weighted_ce_loss(p_lmk, s.landmark_labels);
  if (!want_grad) return out;

  const ScoreGrid g_seg = softmax_backward(p_seg, dice_loss_grad(p_seg, s.labels, w.epsilon));
  const ScoreGrid g_lmk = weighted_ce_grad_logits(p_lmk, s.landmark_labels);

  const int F = model.feature_count();
  const int C = ToyModel::kOutputs;
  out.grad.assign(static_cast<std::size_t>(C) * F + C, 0.0);
  FeatureGatherer gather(model, s.volume);
  std::vector<double> feat(F);
  double gz[ToyModel::kOutputs];
  const auto& geom = s.volume.geometry();
  for (std::size_t v = 0; v < geom.voxel_count(); ++v) {
    const auto gs = g_seg.voxel(v);
    const auto gl = g_lmk.voxel(v);
    bool any = false;
    for (int c = 0; c < kTissueClassCount; ++c) {
      gz[c] = gs[c];
      any = any || gs[c] != 0.0;
    }
    for (int c = 0; c < kLandmarkClassCount; ++c) {
      gz[kTissueClassCount + c] = w.alpha * gl[c];
      any = any || gz[kTissueClassCount + c] != 0.0;
    }
    if (!any) continue;
    const auto idx = geom.unravel(v);
    gather.gather(idx[0], idx[1], idx[2], feat);
    for (int c = 0; c < C; ++c) {
      if (gz[c] == 0.0) continue;
      double* row = out.grad.data() + static_cast<std::size_t>(c) * F;
      for (int f = 0; f < F; ++f) row[f] += gz[c] * feat[f];
      out.grad[static_cast<std::size_t>(C) * F + c] += gz[c];
    }
  }
  return out;
}

}  // namespace

ScoreGrid forward_logits(const ToyModel& model, const VolumeGrid& v) {
  const auto& geom = v.geometry();
  const int F = model.feature_count();
  ScoreGrid out(geom, ToyModel::kOutputs);
  FeatureGatherer gather(model, v);
  std::vector<double> feat(F);
  const auto W = model.weights();
  const auto b = model.bias();
  for (int k = 0; k < geom.dims[2]; ++k) {
    for (int j = 0; j < geom.dims[1]; ++j) {
      for (int i = 0; i < geom.dims[0]; ++i) {
        gather.gather(i, j, k, feat);
        auto z = out.voxel(geom.index(i, j, k));
        for (int c = 0; c < ToyModel::kOutputs; ++c) {
          const float* row = W.data() + static_cast<std::size_t>(c) * F;
          double acc = b[c];
          for (int f = 0; f < F; ++f) acc += row[f] * feat[f];
          z[c] = acc;
        }
      }
    }
  }
  return out;
}

Prediction predict(const ToyModel& model, const VolumeGrid& v) {
  const ScoreGrid logits = forward_logits(model, v);
  return {softmax_channels(split_channels(logits, 0, kTissueClassCount)).cast<float>(),
          softmax_channels(split_channels(logits, kTissueClassCount, kLandmarkClassCount))
              .cast<float>()};
}

LossBreakdown total_loss(const ToyModel& model, std::span<const TrainingSample> batch,
                         const LossWeights& w) {
  w.validate();
  LossBreakdown out;
  for (const auto& s : batch) {
    const auto e = evaluate_sample(model, s, w, false);
    out.dice += e.dice;
    out.landmark += e.landmark;
  }
  out.regulariser = model.frobenius_sq();
  out.total = out.dice + w.alpha * out.landmark + w.beta * out.regulariser;
  return out;
}

TrainingSample make_training_sample(VolumeGrid volume, LabelGrid labels, const LandmarkSet& lms) {
  LabelGrid lmk = rasterize_landmarks(lms, volume.geometry());
  return TrainingSample{std::move(volume), std::move(labels), std::move(lmk), lms};
}

TrainResult train_toy(std::span<const TrainingSample> samples, const LossWeights& w,
                      const TrainConfig& cfg) {
  w.validate();
  if (samples.empty()) throw ParameterError("train_toy: need at least one sample");
  if (cfg.epochs < 0 || !(cfg.learning_rate > 0.0)) {
    throw ParameterError("train_toy: epochs must be >= 0 and learning rate > 0");
  }

  Rng rng(cfg.seed);
  TrainResult result{ToyModel(cfg.in_slices, cfg.kernel), {}};
  ToyModel& model = result.model;
  for (auto& x : model.weights()) x = static_cast<float>(cfg.init_scale * rng.normal());

  const int F = model.feature_count();
  const std::size_t P = static_cast<std::size_t>(ToyModel::kOutputs) * F + ToyModel::kOutputs;
  std::vector<double> m1(P, 0.0), m2(P, 0.0);
  long step = 0;
  const std::size_t batch =
      cfg.batch_size <= 0 ? samples.size()
                          : std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), samples.size());
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);

  auto param = [&](std::size_t idx) -> float& {
    return idx < static_cast<std::size_t>(ToyModel::kOutputs) * F
               ? model.weights()[idx]
               : model.bias()[idx - static_cast<std::size_t>(ToyModel::kOutputs) * F];
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.next() % i)]);
    }
    LossRecord rec{epoch, {}};
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      std::vector<TrainingSample> augmented;
      std::vector<const TrainingSample*> members;
      for (std::size_t b = start; b < end; ++b) {
        const auto& s = samples[order[b]];
        if (cfg.augment && s.landmarks) {
          AugmentParams ap = *cfg.augment;
          ap.seed = rng.next();
          auto a = augment_affine(s.volume, s.labels, *s.landmarks, ap);
          augmented.push_back(make_training_sample(std::move(a.volume), std::move(a.labels),
                                                   a.landmarks));
        }
      }
      for (std::size_t b = start, a = 0; b < end; ++b) {
        const auto& s = samples[order[b]];
        members.push_back(cfg.augment && s.landmarks ? &augmented[a++] : &s);
      }

      std::vector<SampleEval> evals(members.size());
      parallel_for(members.size(), cfg.workers,
                   [&](std::size_t i) { evals[i] = evaluate_sample(model, *members[i], w, true); });

      std::vector<double> grad(P, 0.0);
      double batch_dice = 0.0, batch_lmk = 0.0;
      for (const auto& e : evals) {
        batch_dice += e.dice;
        batch_lmk += e.landmark;
        for (std::size_t q = 0; q < P; ++q) grad[q] += e.grad[q];
      }
      const double batch_total =
          batch_dice + w.alpha * batch_lmk + w.beta * model.frobenius_sq();
      if (!std::isfinite(batch_total)) {
        throw NumericError("train_toy: non-finite loss at epoch " + std::to_string(epoch) +
                           ", batch starting at " + std::to_string(start) + " (dice " +
                           std::to_string(batch_dice) + ", landmark " + std::to_string(batch_lmk) +
                           ")");
      }
      rec.loss.dice += batch_dice;
      rec.loss.landmark += batch_lmk;

      ++step;
      for (std::size_t q = 0; q < P; ++q) {
        float& theta = param(q);
        const double g = grad[q] + 2.0 * w.beta * theta;
        double delta;
        if (cfg.optimizer == Optimizer::kSgd) {
          delta = -cfg.learning_rate * g;
        } else {
          constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
          m1[q] = b1 * m1[q] + (1 - b1) * g;
          m2[q] = b2 * m2[q] + (1 - b2) * g * g;
          const double mh = m1[q] / (1 - std::pow(b1, static_cast<double>(step)));
          const double vh = m2[q] / (1 - std::pow(b2, static_cast<double>(step)));
          delta = -cfg.learning_rate * mh / (std::sqrt(vh) + eps);
        }
        theta = static_cast<float>(theta + delta);
      }
      if (!model.is_finite()) {
        throw NumericError("train_toy: non-finite parameters after epoch " +
                           std::to_string(epoch));
      }
    }
    rec.loss.regulariser = model.frobenius_sq();
    rec.loss.total = rec.loss.dice + w.alpha * rec.loss.landmark + w.beta * rec.loss.regulariser;
    result.trace.push_back(rec);
  }
  return result;
}

// ---------------------------------------------------------------------------

void write_model(const std::filesystem::path& path, const ToyModel& model) {
  mgrid::json h{{"magic", "MGRID"},
                {"version", 1},
                {"kind", "f32"},
                {"model", "toy-linear-2.5d"},
                {"in_slices", model.in_slices()},
                {"kernel", model.kernel()},
                {"seg_classes", kTissueClassCount},
                {"landmark_classes", kLandmarkClassCount}};
  std::vector<float> payload(model.weights().begin(), model.weights().end());
  payload.insert(payload.end(), model.bias().begin(), model.bias().end());
  mgrid::ensure_parent_directory(path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  mgrid::write(out, h, payload);
}

ToyModel read_model(const std::filesystem::path& path) {
  const auto blob = mgrid::read(path);
  const auto& h = blob.header;
  if (!h.contains("model") || h["model"] != "toy-linear-2.5d") throw FormatError("model: bad field 'model'");
  for (const char* f : {"in_slices", "kernel"}) {
    if (!h.contains(f) || !h[f].is_number_integer()) {
      throw FormatError(std::string("model: bad field '") + f + "'");
    }
  }
  if (h.value("seg_classes", 0) != kTissueClassCount ||
      h.value("landmark_classes", 0) != kLandmarkClassCount) {
    throw FormatError("model: bad field 'seg_classes'/'landmark_classes'");
  }
  ToyModel m(h["in_slices"].get<int>(), h["kernel"].get<int>());
  const auto values = mgrid::decode_f32(blob, m.weights().size() + m.bias().size());
  std::copy(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(m.weights().size()),
            m.weights().begin());
  std::copy(values.begin() + static_cast<std::ptrdiff_t>(m.weights().size()), values.end(),
            m.bias().begin());
  return m;
}

void write_loss_trace_csv(const std::filesystem::path& path, std::span<const LossRecord> trace) {
  mgrid::ensure_parent_directory(path);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "epoch,L_D,L_L,regulariser,total\n";
  out.precision(10);
  for (const auto& r : trace) {
    out << r.epoch << ',' << r.loss.dice << ',' << r.loss.landmark << ',' << r.loss.regulariser
        << ',' << r.loss.total << '\n';
  }
}

}  // namespace shaperefine
