#include "glscl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "glscl/checkpoint.hpp"

namespace glscl {

std::string pass_name(PassTag tag) {
  switch (tag) {
    case PassTag::P1: return "P1";
    case PassTag::P2: return "P2";
    case PassTag::P3: return "P3";
    case PassTag::VtmPos: return "VTM+";
    case PassTag::VtmNeg: return "VTM-";
    case PassTag::Mlm: return "MLM";
  }
  return "?";
}

std::vector<PassTag> plan_step_forwards(const TaskConfig& tasks, int64_t batch_size) {
  if (batch_size < 1) throw TrainError("batch size must be positive");
  if (batch_size < 2 && (tasks.cl || tasks.vtm || tasks.mgsc || tasks.mltc))
    throw TrainError("contrastive and matching objectives need batch size >= 2");
  std::vector<PassTag> out;
  if (tasks.mgsc || tasks.mltc) {
    out.push_back(PassTag::P1);
    out.push_back(PassTag::P2);
  }
  if (tasks.mltc) out.push_back(PassTag::P3);
  if (tasks.vtm) {
    out.push_back(PassTag::VtmPos);
    out.push_back(PassTag::VtmNeg);
  }
  if (tasks.mlm) out.push_back(PassTag::Mlm);
  return out;
}

double lr_at(int64_t step, const Schedule& sched, ParamGroup group) {
  if (step < 0 || step > sched.total_steps)
    throw TrainError("step " + std::to_string(step) + " outside schedule of " +
                     std::to_string(sched.total_steps));
  double warm = sched.warmup_frac * static_cast<double>(sched.total_steps);
  double s = static_cast<double>(step);
  double base;
  if (warm > 0 && s <= warm)
    base = sched.peak_lr * s / warm;
  else
    base = sched.peak_lr * (static_cast<double>(sched.total_steps) - s) /
           (static_cast<double>(sched.total_steps) - warm);
  double mult = group == ParamGroup::Fusion ? sched.fusion_mult : 1.0;
  return base * mult;
}

template <typename T>
OptimizerState<T> make_optimizer(const Model<T>& model) {
  OptimizerState<T> opt;
  const auto& entries = model.params().entries;
  opt.m.resize(entries.size());
  opt.v.resize(entries.size());
  for (size_t i = 0; i < entries.size(); ++i) {
    opt.m[i].assign(entries[i].tensor.values().size(), T(0));
    opt.v[i].assign(entries[i].tensor.values().size(), T(0));
  }
  return opt;
}

template <typename T>
void adamw_update(Tensor<T>& param, const std::vector<T>& grad, std::vector<T>& m,
                  std::vector<T>& v, int64_t step, double rate,
                  const OptimizerState<T>& hp) {
  if (grad.size() != param.values().size() || m.size() != grad.size() || v.size() != grad.size())
    throw TrainError("optimizer state size mismatch");
  const double b1 = hp.beta1, b2 = hp.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step));
  T* p = param.data();
  for (size_t i = 0; i < grad.size(); ++i) {
    double g = static_cast<double>(grad[i]);
    if (!std::isfinite(g)) throw TrainError("non-finite gradient in optimizer update");
    double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * g;
    double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    double update = (mi / bc1) / (std::sqrt(vi / bc2) + hp.eps);
    p[i] = static_cast<T>(static_cast<double>(p[i]) -
                          rate * (update + hp.weight_decay * static_cast<double>(p[i])));
  }
}

namespace {

// Rows of a [B, S, D] token tensor addressed as (sample, position) pairs.
template <typename T>
Tensor<T> gather_token_rows(const Tensor<T>& tokens, const std::vector<int64_t>& flat_rows) {
  Tensor<T> flat = reshape(tokens, {tokens.dim(0) * tokens.dim(1), tokens.dim(2)});
  return index_select(flat, 0, flat_rows);
}

template <typename T>
void require_finite(const Tensor<T>& loss, const char* term) {
  if (!std::isfinite(static_cast<double>(loss.item())))
    throw TrainError(std::string("non-finite ") + term + " loss");
}

// Builds every enabled loss term for one batch. Mask plans, the MLM token
// replacements, and the matching-task negative pairing are all derived from
// `step_seed`, so a (seed, batch) pair fixes the step exactly.
template <typename T>
LossReport forward_losses(Model<T>& model, const PairBatch& batch, const TaskConfig& tasks,
                          const Vocabulary& vocab, uint64_t step_seed, Tensor<T>* total_out) {
  const ModelConfig& cfg = model.config();
  const int64_t b = batch.size();
  const int64_t n = cfg.patches(), m = cfg.frames, k = cfg.max_text_len;
  const int64_t sv = cfg.vision_seq();
  auto plan = plan_step_forwards(tasks, b);
  auto has = [&](PassTag t) { return std::find(plan.begin(), plan.end(), t) != plan.end(); };
  const T tau = static_cast<T>(tasks.completion_tau);

  Tensor<T> patches = patches_tensor<T>(batch, cfg);
  std::vector<std::vector<int64_t>> ids = batch_ids(batch);
  std::vector<int64_t> lens = batch_lengths(batch);

  // per-sample mask plans
  std::vector<std::vector<int64_t>> p1_rows(static_cast<size_t>(b)),
      p2_rows(static_cast<size_t>(b)), p3_rows(static_cast<size_t>(b));
  std::vector<MaskPlan> mlm_plans(static_cast<size_t>(b));
  std::vector<std::vector<int64_t>> mlm_ids = ids;
  for (int64_t i = 0; i < b; ++i) {
    size_t ui = static_cast<size_t>(i);
    if (has(PassTag::P1))
      p1_rows[ui] = plan_completion_mask(MaskModality::Vision, m * n, tasks.mgsc_image_ratio,
                                         Rng::derive(step_seed, 1000 + ui))
                        .positions;
    if (has(PassTag::P2)) {
      auto plan_t = plan_completion_mask(MaskModality::Text, lens[ui] - 1,
                                         tasks.mgsc_text_ratio, Rng::derive(step_seed, 2000 + ui));
      for (int64_t p : plan_t.positions) p2_rows[ui].push_back(p + 1);  // skip [CLS]
    }
    if (has(PassTag::P3))
      p3_rows[ui] = plan_completion_mask(MaskModality::Vision, m * n, tasks.mltc_image_ratio,
                                         Rng::derive(step_seed, 3000 + ui))
                        .positions;
    if (tasks.mlm) {
      mlm_plans[ui] =
          plan_mlm_mask(batch.text[ui], tasks.mlm_ratio, Rng::derive(step_seed, 4000 + ui));
      mlm_ids[ui] = apply_mlm(ids[ui], mlm_plans[ui], vocab, Rng::derive(step_seed, 5000 + ui));
    }
  }

  // shared uni-modal encodes
  EncoderOutput<T> ve_full = model.vision_encode(patches);
  EncoderOutput<T> te_full = model.text_encode(ids, lens);

  LossReport rep;
  Tensor<T> total;
  auto accumulate = [&](const Tensor<T>& term) {
    total = total.defined() ? add(total, term) : term;
  };

  if (tasks.cl) {
    Tensor<T> zv = model.project_vision(ve_full.global);
    Tensor<T> zt = model.project_text(te_full.global);
    Tensor<T> cl_tau = model.cl_temperature();
    Tensor<T> v2t = info_nce(zv, zt, cl_tau);
    Tensor<T> t2v = info_nce(zt, zv, cl_tau);
    Tensor<T> cl = add(v2t, t2v);
    require_finite(cl, "cl");
    rep.nce_v2t = v2t.item();
    rep.nce_t2v = t2v.item();
    rep.cl = cl.item();
    accumulate(cl);
  }

  FusionOutput<T> f1, f2, f3;
  if (has(PassTag::P1)) f1 = model.fuse(model.vision_encode(patches, &p1_rows), te_full, lens);
  if (has(PassTag::P2)) f2 = model.fuse(ve_full, model.text_encode(ids, lens, &p2_rows), lens);
  if (has(PassTag::P3)) f3 = model.fuse(model.vision_encode(patches, &p3_rows), te_full, lens);

  if (tasks.mgsc) {
    Tensor<T> nce_v = completion_loss(model.project_vision(f1.vision_global),
                                      model.project_vision(f2.vision_global),
                                      tasks.completion_global, tau);
    Tensor<T> nce_l = completion_loss(model.project_text(f2.text_global),
                                      model.project_text(f1.text_global),
                                      tasks.completion_global, tau);
    Tensor<T> mgsc = add(nce_v, nce_l);
    require_finite(mgsc, "mgsc");
    rep.nce_v = nce_v.item();
    rep.nce_l = nce_l.item();
    rep.mgsc = mgsc.item();
    accumulate(mgsc);
  }

  if (tasks.mltc) {
    std::vector<int64_t> vrows, trows;
    for (int64_t i = 0; i < b; ++i) {
      for (int64_t p : p3_rows[static_cast<size_t>(i)])
        vrows.push_back(i * sv + (p / n) * (n + 1) + 1 + p % n);
      for (int64_t p : p2_rows[static_cast<size_t>(i)]) trows.push_back(i * k + p);
    }
    Tensor<T> nce_vt =
        completion_loss(gather_token_rows(f3.vision_tokens, vrows),
                        gather_token_rows(f2.vision_tokens, vrows), tasks.completion_local, tau);
    Tensor<T> nce_lt =
        completion_loss(gather_token_rows(f2.text_tokens, trows),
                        gather_token_rows(f1.text_tokens, trows), tasks.completion_local, tau);
    Tensor<T> mltc = add(nce_vt, nce_lt);
    require_finite(mltc, "mltc");
    rep.nce_vt = nce_vt.item();
    rep.nce_lt = nce_lt.item();
    rep.mltc = mltc.item();
    accumulate(mltc);
  }

  if (tasks.vtm) {
    Rng neg_rng(Rng::derive(step_seed, 6000));
    int64_t offset = 1 + neg_rng.below(static_cast<uint32_t>(b - 1));
    std::vector<int64_t> neg_idx(static_cast<size_t>(b));
    for (int64_t i = 0; i < b; ++i) neg_idx[static_cast<size_t>(i)] = (i + offset) % b;
    EncoderOutput<T> ve_neg;
    ve_neg.tokens = index_select(ve_full.tokens, 0, neg_idx);
    ve_neg.global = index_select(ve_full.global, 0, neg_idx);
    ve_neg.batch = b;
    ve_neg.frames = ve_full.frames;

    FusionOutput<T> fp = model.fuse(ve_full, te_full, lens);
    FusionOutput<T> fn = model.fuse(ve_neg, te_full, lens);
    Tensor<T> vtm = vtm_loss(model.vtm_logits(fp.vision_global, fp.text_global),
                             model.vtm_logits(fn.vision_global, fn.text_global));
    require_finite(vtm, "vtm");
    rep.vtm = vtm.item();
    accumulate(vtm);
  }

  if (tasks.mlm) {
    std::vector<int64_t> rows;
    std::vector<int64_t> targets;
    for (int64_t i = 0; i < b; ++i)
      for (int64_t p : mlm_plans[static_cast<size_t>(i)].positions) {
        rows.push_back(i * k + p);
        targets.push_back(ids[static_cast<size_t>(i)][static_cast<size_t>(p)]);
      }
    if (!rows.empty()) {
      FusionOutput<T> fm = model.fuse(ve_full, model.text_encode(mlm_ids, lens), lens);
      Tensor<T> logits = model.mlm_logits(gather_token_rows(fm.text_tokens, rows));
      Tensor<T> mlm = mlm_loss(logits, targets);
      require_finite(mlm, "mlm");
      rep.mlm = mlm.item();
      accumulate(mlm);
    }
  }

  if (!total.defined()) total = Tensor<T>::scalar(T(0));
  rep.total = total.item();
  if (total_out) *total_out = total;
  return rep;
}

}  // namespace

template <typename T>
LossReport training_step(Model<T>& model, const PairBatch& batch, const TaskConfig& tasks,
                         OptimizerState<T>& opt, const Schedule& sched,
                         const Vocabulary& vocab, uint64_t step_seed) {
  auto& entries = model.params().entries;
  for (auto& e : entries) e.tensor.zero_grad();

  Tensor<T> total;
  LossReport rep;
  Tape<T> tape;
  {
    TapeScope<T> scope(tape);
    rep = forward_losses(model, batch, tasks, vocab, step_seed, &total);
    backward(total);
  }

  if (opt.clip_norm > 0) {
    double norm2 = 0;
    for (auto& e : entries)
      if (e.tensor.has_grad())
        for (T g : e.tensor.grad()) norm2 += static_cast<double>(g) * static_cast<double>(g);
    double norm = std::sqrt(norm2);
    if (norm > opt.clip_norm) {
      T s = static_cast<T>(opt.clip_norm / norm);
      for (auto& e : entries)
        if (e.tensor.has_grad())
          for (T& g : e.tensor.grad()) g *= s;
    }
  }

  for (size_t i = 0; i < entries.size(); ++i) {
    double rate = lr_at(opt.step, sched, entries[i].group);
    adamw_update(entries[i].tensor, entries[i].tensor.grad(), opt.m[i], opt.v[i],
                 opt.step + 1, rate, opt);
  }
  ++opt.step;
  return rep;
}

template <typename T>
LossReport eval_losses(Model<T>& model, const PairBatch& batch, const TaskConfig& tasks,
                       const Vocabulary& vocab, uint64_t step_seed) {
  NoGradScope<T> ng;
  return forward_losses(model, batch, tasks, vocab, step_seed,
                        static_cast<Tensor<T>*>(nullptr));
}

std::string format_log_line(int64_t step, const LossReport& r, double lr) {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "step=%lld cl=%.6f vtm=%.6f mlm=%.6f mgsc=%.6f mltc=%.6f total=%.6f lr=%.8f",
                static_cast<long long>(step), r.cl, r.vtm, r.mlm, r.mgsc, r.mltc, r.total, lr);
  return buf;
}

template <typename T>
void train_loop(TrainState<T>& state, const std::vector<ManifestEntry>& manifest,
                const TrainRunConfig& run, const Vocabulary& vocab, int64_t steps,
                std::ostream* log) {
  if (manifest.empty()) throw TrainError("empty manifest");
  for (int64_t s = 0; s < steps; ++s) {
    std::vector<int64_t> idx(static_cast<size_t>(run.batch_size));
    for (auto& i : idx) i = state.rng.below(static_cast<uint32_t>(manifest.size()));
    uint64_t step_seed = (static_cast<uint64_t>(state.rng.next_u32()) << 32) |
                         state.rng.next_u32();
    PairBatch batch = make_batch(manifest, idx, run.data, vocab);
    double lr = lr_at(state.opt.step, run.schedule, ParamGroup::UniModal);
    LossReport rep = training_step(state.model, batch, run.tasks, state.opt, run.schedule,
                                   vocab, step_seed);
    ++state.step;
    if (log && state.step % run.log_every == 0)
      *log << format_log_line(state.step, rep, lr) << "\n";
  }
}

namespace {

template <typename T>
TrainState<T> fresh_state(const ModelConfig& mc, const TrainRunConfig& run, uint8_t stage) {
  TrainState<T> state{Model<T>(mc, Rng::derive(run.seed, 0)), OptimizerState<T>{},
                      Rng(Rng::derive(run.seed, 1)), 0, stage, run.config_text};
  state.opt = make_optimizer(state.model);
  state.opt.beta1 = run.opt.beta1;
  state.opt.beta2 = run.opt.beta2;
  state.opt.eps = run.opt.eps;
  state.opt.weight_decay = run.opt.weight_decay;
  state.opt.clip_norm = run.opt.clip_norm;
  return state;
}

}  // namespace

template <typename T>
TrainState<T> run_curriculum(const CurriculumConfig& cfg,
                             const std::vector<ManifestEntry>& stage1_manifest,
                             const std::vector<ManifestEntry>& stage2_manifest,
                             const Vocabulary& vocab, std::ostream* log,
                             const std::string& checkpoint_dir) {
  ModelConfig mc2 = cfg.model;
  mc2.frames = cfg.stage2_frames;
  TrainState<T> s2 = fresh_state<T>(mc2, cfg.stage2, 2);

  if (!cfg.skip_stage1) {
    TrainState<T> s1 = fresh_state<T>(cfg.model, cfg.stage1, 1);
    train_loop(s1, stage1_manifest, cfg.stage1, vocab, cfg.stage1.schedule.total_steps, log);
    if (!checkpoint_dir.empty()) save_checkpoint(checkpoint_dir + "/stage1.ckpt", s1);

    // Hand parameters over; the wider temporal table replicates the trained
    // first-frame row so identical frames reproduce the image features.
    const int64_t d = mc2.dim;
    for (auto& e : s1.model.params().entries) {
      auto& dst = s2.model.params().get(e.name);
      if (e.name == "vision.pos_temporal" && dst.dim(0) > e.tensor.dim(0)) {
        for (int64_t row = 0; row < dst.dim(0); ++row) {
          int64_t from = row < e.tensor.dim(0) ? row : 0;
          std::copy(e.tensor.values().begin() + from * d,
                    e.tensor.values().begin() + (from + 1) * d, dst.values().begin() + row * d);
        }
      } else {
        if (dst.shape() != e.tensor.shape())
          throw TrainError("curriculum shape mismatch for " + e.name);
        dst.values() = e.tensor.values();
      }
    }
  }

  train_loop(s2, stage2_manifest, cfg.stage2, vocab, cfg.stage2.schedule.total_steps, log);
  if (!checkpoint_dir.empty()) save_checkpoint(checkpoint_dir + "/final.ckpt", s2);
  return s2;
}

#define GLSCL_TRAINER_INSTANTIATE(T)                                                      \
  template OptimizerState<T> make_optimizer<T>(const Model<T>&);                          \
  template void adamw_update<T>(Tensor<T>&, const std::vector<T>&, std::vector<T>&,       \
                                std::vector<T>&, int64_t, double,                         \
                                const OptimizerState<T>&);                                \
  template LossReport training_step<T>(Model<T>&, const PairBatch&, const TaskConfig&,    \
                                       OptimizerState<T>&, const Schedule&,               \
                                       const Vocabulary&, uint64_t);                      \
  template LossReport eval_losses<T>(Model<T>&, const PairBatch&, const TaskConfig&,      \
                                     const Vocabulary&, uint64_t);                        \
  template void train_loop<T>(TrainState<T>&, const std::vector<ManifestEntry>&,          \
                              const TrainRunConfig&, const Vocabulary&, int64_t,          \
                              std::ostream*);                                             \
  template TrainState<T> run_curriculum<T>(const CurriculumConfig&,                       \
                                           const std::vector<ManifestEntry>&,             \
                                           const std::vector<ManifestEntry>&,             \
                                           const Vocabulary&, std::ostream*,              \
                                           const std::string&);

GLSCL_TRAINER_INSTANTIATE(float)
GLSCL_TRAINER_INSTANTIATE(double)

}  // namespace glscl
