#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "glscl/datagen.hpp"
#include "glscl/model.hpp"
#include "glscl/objectives.hpp"

// Training orchestration: the per-step multi-pass plan, AdamW with a
// warmup-then-linear-decay schedule (fusion parameters at 5x), and the
// image-then-video curriculum.

namespace glscl {

struct TrainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TaskConfig {
  bool cl = true, vtm = true, mlm = true, mgsc = true, mltc = true;
  double mgsc_image_ratio = 0.8;
  double mgsc_text_ratio = 0.4;
  double mltc_image_ratio = 0.3;
  double mlm_ratio = 0.15;
  double completion_tau = 0.03;
  CompletionVariant completion_global = CompletionVariant::InfoNce;
  CompletionVariant completion_local = CompletionVariant::InfoNce;
};

// Fusion passes of one training step, in execution order.
enum class PassTag { P1, P2, P3, VtmPos, VtmNeg, Mlm };
std::string pass_name(PassTag tag);

// P1 = {masked vision, clean text}, P2 = {clean vision, masked text},
// P3 = {vision at the token-level ratio, clean text}. P1/P2 are kept when
// either completion task needs them.
std::vector<PassTag> plan_step_forwards(const TaskConfig& tasks, int64_t batch_size);

struct Schedule {
  int64_t total_steps = 2000;
  double warmup_frac = 0.10;
  double peak_lr = 1e-3;
  double fusion_mult = 5.0;
};

double lr_at(int64_t step, const Schedule& sched, ParamGroup group);

template <typename T>
struct OptimizerState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // <= 0 disables clipping
  int64_t step = 0;
  std::vector<std::vector<T>> m, v;  // parallel to ParamStore entries
};

template <typename T>
OptimizerState<T> make_optimizer(const Model<T>& model);

// Decoupled-decay update with bias correction for one parameter tensor.
template <typename T>
void adamw_update(Tensor<T>& param, const std::vector<T>& grad, std::vector<T>& m,
                  std::vector<T>& v, int64_t step, double rate,
                  const OptimizerState<T>& hp);

// One optimization step over a batch: forward passes per the plan, one
// backward over the summed objective, clip, update, advance `opt.step`.
// `step_seed` fixes every random draw of the step (masks, negatives).
template <typename T>
LossReport training_step(Model<T>& model, const PairBatch& batch, const TaskConfig& tasks,
                         OptimizerState<T>& opt, const Schedule& sched,
                         const Vocabulary& vocab, uint64_t step_seed);

// Forward-only loss evaluation (no tape, no update); same pass plan.
template <typename T>
LossReport eval_losses(Model<T>& model, const PairBatch& batch, const TaskConfig& tasks,
                       const Vocabulary& vocab, uint64_t step_seed);

struct OptConfig {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
};

struct TrainRunConfig {
  TaskConfig tasks;
  Schedule schedule;
  DataConfig data;
  OptConfig opt;
  int64_t batch_size = 16;
  uint64_t seed = 0;
  int64_t log_every = 1;
  std::string config_text;  // echoed verbatim into checkpoints
};

template <typename T>
struct TrainState {
  Model<T> model;
  OptimizerState<T> opt;
  Rng rng;  // drives batch sampling and per-step seeds
  int64_t step = 0;
  uint8_t stage = 1;
  std::string config_text;
};

std::string format_log_line(int64_t step, const LossReport& r, double lr);

// Runs `steps` optimization steps over batches sampled from the manifest.
template <typename T>
void train_loop(TrainState<T>& state, const std::vector<ManifestEntry>& manifest,
                const TrainRunConfig& run, const Vocabulary& vocab, int64_t steps,
                std::ostream* log);

struct CurriculumConfig {
  TrainRunConfig stage1;  // image pairs, frames = 1
  TrainRunConfig stage2;  // video pairs, frames = 4; MLTC off by default
  ModelConfig model;      // stage-1 geometry; stage 2 overrides frames
  int64_t stage2_frames = 4;
  bool skip_stage1 = false;  // stage 2 from random init
};

// Image pre-training followed by video pre-training. Stage 2 inherits all
// stage-1 parameters; temporal embeddings for the new frame slots replicate
// the trained first-frame row so that a constant video reproduces the image
// representation at handoff.
template <typename T>
TrainState<T> run_curriculum(const CurriculumConfig& cfg,
                             const std::vector<ManifestEntry>& stage1_manifest,
                             const std::vector<ManifestEntry>& stage2_manifest,
                             const Vocabulary& vocab, std::ostream* log,
                             const std::string& checkpoint_dir = "");

}  // namespace glscl
