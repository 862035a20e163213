#ifndef HAT_TRAIN_HPP
#define HAT_TRAIN_HPP

// L1 training for the super-resolution model: bias-corrected Adam with the
// halve-at-milestones schedule, aligned LR/HR patch sampling with
// rotation/flip augmentation, and the bicubic degradation that manufactures
// the LR side of each training pair.  Images are [0,1] floats here; the
// metrics code converts to the 8-bit domain.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "hat/model.hpp"

namespace hat {

// The two-phase workflow: train from scratch, or pre-train on a big corpus
// and then fine-tune the same task on the target corpus at a small lr.
enum class Phase { scratch, pretrain, finetune };

Phase phase_from_string(const std::string& s);
std::string phase_to_string(Phase phase);

struct TrainConfig {
  std::int64_t batch_size = 32;
  std::int64_t patch_size = 64;  // LR side; the HR crop is patch_size * scale
  std::int64_t total_iters = 500000;
  double base_lr = 2e-4;
  std::vector<std::int64_t> milestones = {250000, 400000, 450000, 475000};
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.99;
  double adam_eps = 1e-8;
  double grad_clip = 0.0;  // global-norm cap; 0 disables
  std::int64_t seed = 0;
  std::int64_t log_every = 100;
  Phase phase = Phase::scratch;
  std::string init_checkpoint;  // mandatory when phase == finetune

  void validate() const;

  // The published iteration budget, starting lr and milestones per phase.
  static TrainConfig defaults_for(Phase phase);

  bool operator==(const TrainConfig&) const = default;
};

// First/second moment buffers, index-aligned with a ParamTree.
struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::int64_t t = 0;

  static AdamState create(const ParamTree& params);
};

// base_lr halved once for every milestone at or below iter.
double lr_at(std::int64_t iter, const TrainConfig& cfg);

// One bias-corrected Adam update using the gradients currently stored on the
// parameters.  A parameter without a gradient buffer counts as gradient zero;
// a non-finite gradient aborts naming the parameter.
void adam_step(ParamTree& params, AdamState& state, double lr,
               const TrainConfig& cfg);

// Scale all gradients down so their joint L2 norm is at most max_norm.
void clip_gradients(ParamTree& params, double max_norm);

// Separable cubic resampling with the MATLAB conventions: a = -0.5 kernel,
// symmetric edge extension, per-row weight normalization, and a kernel
// widened by 1/scale when shrinking with antialias on.  Works on any
// [..., H, W] tensor and returns a detached result.
Tensor bicubic_resize(const Tensor& img, double scale, bool antialias = true);

// k quarter-turns counter-clockwise / horizontal mirror of [C, H, W] data.
Tensor rot90(const Tensor& img, std::int64_t k);
Tensor hflip(const Tensor& img);

// Draw batch aligned (LR, HR) patch pairs: a random crop on the
// multiple-of-scale grid, one of the eight rotation/flip ops, then bicubic
// degradation of the augmented HR patch.  Images smaller than patch * scale
// are skipped with a warning on stderr.
std::pair<Tensor, Tensor> sample_batch(const std::vector<Tensor>& dataset_hr,
                                       std::int64_t patch, std::int64_t scale,
                                       std::int64_t batch, Rng& rng);

struct TrainHooks {
  // Called with the number of finished iterations and a tag ("milestone" or
  // "final"); wire this to checkpoint writing.
  std::function<void(std::int64_t iters_done, const std::string& tag)> save;
  std::ostream* log = nullptr;  // tab-separated "iter lr loss" lines
};

struct TrainResult {
  std::vector<double> losses;  // one entry per iteration
  std::int64_t iters_run = 0;
};

// sample -> forward -> L1 -> backward -> adam.  Checkpoints go out through
// hooks.save at every milestone and once at the end; a non-finite loss (or
// any non-finite intermediate) aborts before the next save, so the last
// written checkpoint always survives a blow-up.
TrainResult train_loop(HatModel& model, const std::vector<Tensor>& dataset_hr,
                       const TrainConfig& cfg, const TrainHooks& hooks = {});

}  // namespace hat

#endif  // HAT_TRAIN_HPP
