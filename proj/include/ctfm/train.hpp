#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ctfm/autograd.hpp"
#include "ctfm/data.hpp"
#include "ctfm/metrics.hpp"
#include "ctfm/model.hpp"

namespace ctfm {

struct TrainConfig {
  double lr0 = 0.001;
  double momentum = 0.9;
  std::size_t batch_size = 8;
  std::size_t epochs = 10;
  double poly_power = 0.9;
  std::uint64_t seed = 0;
  double val_fraction = 0.1;
  std::size_t patch_size = 64;
  std::size_t max_steps = 0;  // 0: epochs * steps per epoch
  double weight_decay = 0.0;

  /// The published schedule: batch 32, 50 epochs.
  static TrainConfig published() {
    TrainConfig c;
    c.batch_size = 32;
    c.epochs = 50;
    c.patch_size = 384;
    return c;
  }

  /// Desk-scale CPU runs: small batches and a larger initial rate, since a
  /// few hundred steps replace the published 50 epochs.
  static TrainConfig desk() {
    TrainConfig c;
    c.lr0 = 0.05;
    c.batch_size = 8;
    c.epochs = 22;
    c.max_steps = 500;
    return c;
  }

  void validate() const {
    require(lr0 > 0.0, ErrorKind::InvalidParameter, "train: lr0 must be > 0");
    require(momentum >= 0.0 && momentum < 1.0, ErrorKind::InvalidParameter, "train: momentum must lie in [0, 1)");
    require(batch_size >= 1 && epochs >= 1, ErrorKind::InvalidParameter, "train: batch size and epochs must be >= 1");
    require(poly_power > 0.0, ErrorKind::InvalidParameter, "train: poly_power must be > 0");
    require(val_fraction >= 0.0 && val_fraction < 1.0, ErrorKind::InvalidParameter,
            "train: val_fraction must lie in [0, 1)");
    require(weight_decay >= 0.0, ErrorKind::InvalidParameter, "train: weight_decay must be >= 0");
  }
};

/// lr0 * (1 - step / total)^power, exactly lr0 at step 0 and 0 at the end.
inline double lr_schedule(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
  require(total_steps >= 1, ErrorKind::InvalidParameter, "lr_schedule: total_steps must be >= 1");
  require(step <= total_steps, ErrorKind::InvalidParameter,
          "lr_schedule: step " + std::to_string(step) + " exceeds total " + std::to_string(total_steps));
  if (step == 0) return cfg.lr0;
  if (step == total_steps) return 0.0;
  const double remaining = 1.0 - static_cast<double>(step) / static_cast<double>(total_steps);
  return cfg.lr0 * std::pow(remaining, cfg.poly_power);
}

/// SGD with heavy-ball momentum: v = mu v + g, w -= lr v.
template <typename T>
class Sgd {
 public:
  Sgd(std::vector<NamedTensor<T>> params, double momentum, double weight_decay = 0.0)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto& p : params_) velocity_.emplace_back(p.tensor.numel(), T(0));
  }

  void step(double lr) {
    const T mu = static_cast<T>(momentum_), rate = static_cast<T>(lr), decay = static_cast<T>(weight_decay_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<T>& w = params_[i].tensor;
      if (!w.has_grad()) continue;
      auto g = w.grad();
      auto& v = velocity_[i];
      T* pw = w.raw();
      for (std::size_t k = 0; k < v.size(); ++k) {
        const T grad = g[k] + decay * pw[k];
        v[k] = mu * v[k] + grad;
        pw[k] -= rate * v[k];
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  std::vector<NamedTensor<T>> params_;
  std::vector<std::vector<T>> velocity_;
  double momentum_;
  double weight_decay_;
};

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double dice = 0.0;
  double bce = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  ConfusionCounts val;
};

struct TrainResult {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  std::size_t train_patches = 0;
  std::size_t val_patches = 0;
  std::vector<std::string> val_scene_ids;
};

/// Seeded split of scenes into (train, validation); at least one training scene remains.
inline std::pair<std::vector<const Scene*>, std::vector<const Scene*>> split_scenes(const std::vector<Scene>& scenes,
                                                                                   double val_fraction,
                                                                                   std::uint64_t seed) {
  std::vector<std::size_t> order(scenes.size());
  std::iota(order.begin(), order.end(), 0);
  SplitMix64 rng(seed ^ 0x5EED5EEDULL);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::size_t n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(scenes.size())));
  n_val = std::min(n_val, scenes.size() > 0 ? scenes.size() - 1 : 0);
  std::vector<const Scene*> train, val;
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_val ? val : train).push_back(&scenes[order[i]]);
  return {train, val};
}

inline std::vector<Patch> crop_all(const std::vector<const Scene*>& scenes, std::size_t patch_size,
                                   std::size_t alignment) {
  std::vector<Patch> out;
  for (const Scene* s : scenes) {
    PatchSet set = crop(*s, patch_size, alignment);
    for (auto& p : set.patches) out.push_back(std::move(p));
  }
  return out;
}

/// Thresholded predictions over patches, counts merged.
template <typename T>
ConfusionCounts evaluate_patches(CdCtfm<T>& model, const std::vector<Patch>& patches, std::size_t batch_size,
                                 double threshold) {
  ConfusionCounts total;
  for (std::size_t start = 0; start < patches.size(); start += batch_size) {
    std::vector<const Patch*> batch;
    for (std::size_t i = start; i < std::min(patches.size(), start + batch_size); ++i) batch.push_back(&patches[i]);
    auto [x, y] = make_batch<T>(batch);
    total += confusion(model.predict_mask(x, threshold), y);
  }
  return total;
}

/// Binary mask for a whole scene: reflect-padded patches, predicted in
/// batches, stitched back to [H,W].
template <typename T>
Tensor<float> predict_scene(CdCtfm<T>& model, const Scene& scene, std::size_t patch_size, double threshold,
                            std::size_t batch_size = 8) {
  require(scene.band_count() == model.config().bands, ErrorKind::Incompatible,
          "predict: scene " + scene.id + " has " + std::to_string(scene.band_count()) + " bands, model expects " +
              std::to_string(model.config().bands));
  const PatchSet set = crop(scene, patch_size, model.config().output_stride());
  std::vector<Tensor<float>> masks;
  for (std::size_t start = 0; start < set.patches.size(); start += batch_size) {
    std::vector<const Patch*> batch;
    for (std::size_t i = start; i < std::min(set.patches.size(), start + batch_size); ++i)
      batch.push_back(&set.patches[i]);
    const Tensor<T> pred = model.predict_mask(make_batch<T>(batch).first, threshold);
    const std::size_t per = patch_size * patch_size;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      Tensor<float> m({patch_size, patch_size});
      for (std::size_t k = 0; k < per; ++k) m[k] = static_cast<float>(pred[i * per + k]);
      masks.push_back(std::move(m));
    }
  }
  return stitch(set, masks);
}

/// Scene-level counts merged over a dataset; padding never counts.
template <typename T>
ConfusionCounts evaluate_scenes(CdCtfm<T>& model, const std::vector<Scene>& scenes, std::size_t patch_size,
                                double threshold, std::size_t batch_size = 8) {
  ConfusionCounts total;
  for (const auto& s : scenes) total += confusion(predict_scene(model, s, patch_size, threshold, batch_size), s.mask);
  return total;
}

using StepCallback = std::function<void(const StepRecord&)>;
using EpochCallback = std::function<void(const EpochRecord&)>;

template <typename T>
TrainResult train(CdCtfm<T>& model, const std::vector<Scene>& scenes, const TrainConfig& cfg,
                  const StepCallback& on_step = {}, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  require(!scenes.empty(), ErrorKind::InvalidParameter, "train: dataset is empty");
  for (const auto& s : scenes)
    require(s.band_count() == model.config().bands, ErrorKind::Incompatible,
            "train: scene " + s.id + " has " + std::to_string(s.band_count()) + " bands, model expects " +
                std::to_string(model.config().bands));
  const std::size_t alignment = model.config().output_stride();
  auto [train_scenes, val_scenes] = split_scenes(scenes, cfg.val_fraction, cfg.seed);
  const std::vector<Patch> train_patches = crop_all(train_scenes, cfg.patch_size, alignment);
  const std::vector<Patch> val_patches = crop_all(val_scenes, cfg.patch_size, alignment);

  TrainResult result;
  result.train_patches = train_patches.size();
  result.val_patches = val_patches.size();
  for (const Scene* s : val_scenes) result.val_scene_ids.push_back(s->id);

  const std::size_t per_epoch = (train_patches.size() + cfg.batch_size - 1) / cfg.batch_size;
  std::size_t total_steps = per_epoch * cfg.epochs;
  if (cfg.max_steps > 0) total_steps = std::min(total_steps, cfg.max_steps);

  Sgd<T> optimizer(model.parameters(), cfg.momentum, cfg.weight_decay);
  SplitMix64 rng(cfg.seed);
  std::vector<std::size_t> order(train_patches.size());
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs && step < total_steps; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double epoch_loss = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t start = 0; start < order.size() && step < total_steps; start += cfg.batch_size) {
      std::vector<const Patch*> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i)
        batch.push_back(&train_patches[order[i]]);
      auto [x, y] = make_batch<T>(batch);

      model.train();
      optimizer.zero_grad();
      Tape<T> tape;
      LossTerms terms;
      {
        TapeScope<T> scope(tape);
        Tensor<T> loss = dice_bce_loss(model.forward(x), y, &terms);
        require(std::isfinite(terms.total()), ErrorKind::NonFinite,
                "train: non-finite loss at step " + std::to_string(step + 1) + " (epoch " + std::to_string(epoch) +
                    ")");
        tape.backward(loss);
      }
      const double lr = lr_schedule(step, total_steps, cfg);
      optimizer.step(lr);
      ++step;

      StepRecord rec{step, epoch, lr, terms.total(), terms.dice, terms.bce};
      result.steps.push_back(rec);
      if (on_step) on_step(rec);
      epoch_loss += rec.loss;
      ++epoch_steps;
    }
    EpochRecord er{epoch, epoch_steps ? epoch_loss / static_cast<double>(epoch_steps) : 0.0, {}};
    if (!val_patches.empty())
      er.val = evaluate_patches(model, val_patches, cfg.batch_size, model.config().threshold);
    result.epochs.push_back(er);
    if (on_epoch) on_epoch(er);
  }
  model.eval();
  return result;
}

namespace detail {

inline std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace detail

inline std::string loss_curve_csv(const TrainResult& r) {
  std::ostringstream out;
  out << "step,epoch,lr,loss,dice,bce\n";
  for (const auto& s : r.steps)
    out << s.step << "," << s.epoch << "," << detail::fmt_real(s.lr) << "," << detail::fmt_real(s.loss) << ","
        << detail::fmt_real(s.dice) << "," << detail::fmt_real(s.bce) << "\n";
  return out.str();
}

inline std::string epoch_csv(const TrainResult& r) {
  std::ostringstream out;
  out << "epoch,train_loss,val_miou,val_precision,val_recall,val_f1,val_oa\n";
  for (const auto& e : r.epochs) {
    const Metrics m = metrics(e.val);
    out << e.epoch << "," << detail::fmt_real(e.train_loss) << "," << format_percent(m.miou) << ","
        << format_percent(m.precision) << "," << format_percent(m.recall) << "," << format_percent(m.f1) << ","
        << format_percent(m.oa) << "\n";
  }
  return out.str();
}

/// Metric report row in the published column order; the final column is the
/// two-class mean IoU, which is not one of the published metrics.
inline std::string metrics_csv_header() { return "method,miou,precision,recall,f1,oa,params_m,gflops,two_class_miou\n"; }

inline std::string metrics_csv_row(const std::string& method, const ConfusionCounts& c, double params_m,
                                   double gflops) {
  const Metrics m = metrics(c);
  char tail[64];
  std::snprintf(tail, sizeof tail, "%.2f,%.2f", params_m, gflops);
  std::ostringstream out;
  out << method << "," << format_percent(m.miou) << "," << format_percent(m.precision) << ","
      << format_percent(m.recall) << "," << format_percent(m.f1) << "," << format_percent(m.oa) << "," << tail
      << "," << format_percent(m.two_class_miou) << "\n";
  return out.str();
}

}  // namespace ctfm
