#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "glscl/checkpoint.hpp"
#include "glscl/config.hpp"
#include "glscl/datagen.hpp"
#include "glscl/evalviz.hpp"
#include "glscl/gradcheck.hpp"
#include "glscl/objectives.hpp"
#include "glscl/trainer.hpp"

namespace fs = std::filesystem;
using namespace glscl;

namespace {

Config merged_config(const std::string& path, const std::vector<std::string>& overrides) {
  Config cfg = path.empty() ? Config::defaults() : Config::from_file(path);
  for (const auto& line : overrides) cfg.apply_line(line);
  cfg.validate();
  return cfg;
}

// The config text embedded in a checkpoint records the frame count the model
// was actually built with, so evaluation can rebuild it without extra flags.
std::string echo_with_frames(Config cfg, int64_t frames) {
  cfg.set("model.frames", std::to_string(frames));
  return cfg.echo();
}

int run_gen_data(const std::string& out_dir, int64_t pairs, bool video, uint64_t seed) {
  fs::create_directories(out_dir);
  std::vector<ManifestEntry> entries;
  entries.reserve(static_cast<size_t>(pairs));
  for (int64_t i = 0; i < pairs; ++i)
    entries.push_back({i, Rng::derive(seed, static_cast<uint64_t>(i)), video});
  write_manifest(out_dir + "/manifest.tsv", entries);
  Vocabulary::standard().save(out_dir + "/vocab.txt");
  std::cout << "wrote " << pairs << (video ? " video" : " image") << " pairs to " << out_dir
            << "/manifest.tsv\n";
  return 0;
}

int run_pretrain(const Config& cfg, uint64_t seed, const std::string& manifest_path,
                 const std::string& manifest2_path, bool skip_stage1,
                 const std::string& out_dir) {
  fs::create_directories(out_dir);
  auto manifest = read_manifest(manifest_path);
  Vocabulary vocab = Vocabulary::standard(cfg.get_int("model.vocab_size"));

  if (manifest2_path.empty()) {
    TrainRunConfig run = cfg.run_config(false, seed);
    run.config_text = echo_with_frames(cfg, cfg.get_int("model.frames"));
    TrainState<float> state{Model<float>(cfg.model_config(), Rng::derive(seed, 0)),
                            OptimizerState<float>{}, Rng(Rng::derive(seed, 1)), 0, 1,
                            run.config_text};
    state.opt = make_optimizer(state.model);
    state.opt.beta1 = run.opt.beta1;
    state.opt.beta2 = run.opt.beta2;
    state.opt.eps = run.opt.eps;
    state.opt.weight_decay = run.opt.weight_decay;
    state.opt.clip_norm = run.opt.clip_norm;
    train_loop(state, manifest, run, vocab, run.schedule.total_steps, &std::cout);
    save_checkpoint(out_dir + "/final.ckpt", state);
  } else {
    auto manifest2 = read_manifest(manifest2_path);
    CurriculumConfig cur;
    cur.stage1 = cfg.run_config(false, seed);
    cur.stage1.config_text = echo_with_frames(cfg, cfg.get_int("model.frames"));
    cur.stage2 = cfg.run_config(true, Rng::derive(seed, 2));
    cur.stage2.config_text = echo_with_frames(cfg, cfg.get_int("stage2.frames"));
    cur.model = cfg.model_config();
    cur.stage2_frames = cfg.get_int("stage2.frames");
    cur.skip_stage1 = skip_stage1;
    run_curriculum<float>(cur, manifest, manifest2, vocab, &std::cout, out_dir);
  }
  std::cout << "checkpoint written to " << out_dir << "/final.ckpt\n";
  return 0;
}

// Rebuilds model and optimizer from the config text a checkpoint carries.
TrainState<float> state_from_checkpoint(const std::string& path, Config* cfg_out) {
  auto ckpt = load_checkpoint<float>(path);
  if (ckpt.config_text.empty())
    throw CheckpointError("checkpoint carries no config text: " + path);
  Config cfg = Config::from_text(ckpt.config_text);
  cfg.validate();
  TrainState<float> state{Model<float>(cfg.model_config(), 0), OptimizerState<float>{},
                          Rng(0), 0, 1, ckpt.config_text};
  state.opt = make_optimizer(state.model);
  restore_into(state, ckpt);
  if (cfg_out) *cfg_out = cfg;
  return state;
}

int run_eval_retrieval(const std::string& ckpt_path, const std::string& manifest_path,
                       int64_t k, int64_t batch) {
  Config cfg = Config::defaults();
  TrainState<float> state = state_from_checkpoint(ckpt_path, &cfg);
  auto manifest = read_manifest(manifest_path);
  Vocabulary vocab = Vocabulary::standard(cfg.get_int("model.vocab_size"));
  if (k <= 0) k = cfg.get_int("eval.k");
  if (batch <= 0) batch = cfg.get_int("eval.batch");
  DataConfig data = cfg.data_config(cfg.get_int("model.frames"));
  auto corpus = encode_corpus(manifest, state.model, data, vocab, batch);
  for (Direction dir : {Direction::TextToVision, Direction::VisionToText}) {
    RetrievalResult res = two_stage_retrieval(corpus, state.model, dir, k);
    std::cout << format_metrics_line(res) << "\n";
  }
  return 0;
}

int run_export_attn(const std::string& ckpt_path, const std::string& manifest_path,
                    int64_t pair_id, int64_t token, int layer, const std::string& out_dir) {
  Config cfg = Config::defaults();
  TrainState<float> state = state_from_checkpoint(ckpt_path, &cfg);
  auto manifest = read_manifest(manifest_path);
  int64_t row = -1;
  for (size_t i = 0; i < manifest.size(); ++i)
    if (manifest[i].pair_id == pair_id) row = static_cast<int64_t>(i);
  if (row < 0) throw EvalError("pair id " + std::to_string(pair_id) + " not in manifest");
  Vocabulary vocab = Vocabulary::standard(cfg.get_int("model.vocab_size"));
  DataConfig data = cfg.data_config(cfg.get_int("model.frames"));
  PairBatch pair = make_batch(manifest, {row}, data, vocab);
  fs::create_directories(out_dir);
  HeatmapSpec spec{pair_id, token, layer};
  for (const auto& path : export_attention_heatmap(spec, state.model, pair, out_dir))
    std::cout << path << "\n";
  return 0;
}

// Finite-difference sweep in double precision: a few isolated operations,
// then the full multi-task objective through both encoders and fusion.
int run_gradcheck(uint64_t seed) {
  Rng rng(seed);
  auto rand_mat = [&](int64_t r, int64_t c) {
    std::vector<double> v(static_cast<size_t>(r * c));
    for (auto& x : v) x = rng.normal() * 0.5;
    return Tensor<double>::from({r, c}, std::move(v));
  };
  double worst = 0;
  auto report = [&](const std::string& name, const GradCheckResult<double>& res) {
    std::printf("%-24s checked=%-4lld max_rel_err=%.3e\n", name.c_str(),
                static_cast<long long>(res.checked), res.max_rel_err);
    worst = std::max(worst, res.max_rel_err);
  };

  {
    Tensor<double> a = rand_mat(4, 6), b = rand_mat(6, 5);
    report("matmul+gelu", check_gradients<double>({a, b}, [&] {
             return sum_all(gelu(matmul(a, b)));
           }));
  }
  {
    Tensor<double> x = rand_mat(5, 8), g = rand_mat(1, 8), be = rand_mat(1, 8);
    report("layer_norm", check_gradients<double>({x, g, be}, [&] {
             return sum_all(square(layer_norm(x, g, be)));
           }));
  }
  {
    Tensor<double> q = rand_mat(6, 7), t = rand_mat(6, 7);
    report("info_nce", check_gradients<double>({q, t}, [&] {
             return info_nce(q, t, 0.07);
           }));
  }
  {
    // Targets are detached inside, so only the recovered side is probed.
    Tensor<double> re = rand_mat(5, 7), co = rand_mat(5, 7);
    report("completion_cosine", check_gradients<double>({re}, [&] {
             return completion_loss(re, co, CompletionVariant::Cosine);
           }));
  }

  // End to end: encode a real pair batch and differentiate the summed losses
  // with respect to every parameter (a few entries per tensor).
  ModelConfig mc;
  mc.dim = 8;
  mc.heads = 2;
  mc.layers_vision = mc.layers_text = mc.layers_fusion = 1;
  mc.frames = 1;
  mc.image_size = 8;
  mc.patch_size = 4;
  mc.max_text_len = 8;
  mc.vocab_size = 64;
  mc.proj_dim = 4;
  mc.validate();
  Model<double> model(mc, seed);
  DataConfig data{static_cast<int>(mc.image_size), static_cast<int>(mc.patch_size), 1, static_cast<int>(mc.max_text_len)};
  Vocabulary vocab = Vocabulary::standard(mc.vocab_size);
  std::vector<ManifestEntry> manifest = {{0, Rng::derive(seed, 10), false},
                                         {1, Rng::derive(seed, 11), false},
                                         {2, Rng::derive(seed, 12), false}};
  PairBatch batch = make_batch(manifest, {0, 1, 2}, data, vocab);
  Tensor<double> patches = patches_tensor<double>(batch, mc);
  auto ids = batch_ids(batch);
  auto lengths = batch_lengths(batch);
  std::vector<int64_t> mlm_targets;
  for (const auto& row : ids)
    for (int64_t t : row) mlm_targets.push_back(t);

  // Fixed completion target: finite differences would otherwise see the
  // dependence that detach cuts out of the analytic gradient.
  Tensor<double> mgsc_target = rand_mat(3, mc.proj_dim);
  std::vector<Tensor<double>> params;
  for (auto& e : model.params().entries) params.push_back(e.tensor);
  auto loss_fn = [&] {
    auto ve = model.vision_encode(patches);
    auto te = model.text_encode(ids, lengths);
    auto fo = model.fuse(ve, te, lengths);
    Tensor<double> cl = contrastive_pair_loss(model.project_vision(ve.global),
                                              model.project_text(te.global),
                                              model.cl_temperature());
    Tensor<double> vtm =
        vtm_loss(model.vtm_logits(fo.vision_global, fo.text_global),
                 model.vtm_logits(fo.vision_global, fo.text_global));
    Tensor<double> mlm = mlm_loss(
        reshape(model.mlm_logits(fo.text_tokens),
                {static_cast<int64_t>(ids.size()) * mc.max_text_len, mc.vocab_size}),
        mlm_targets);
    Tensor<double> mgsc = completion_loss(model.project_vision(fo.vision_global),
                                          mgsc_target, CompletionVariant::InfoNce, 0.03);
    return add(add(cl, vtm), add(mlm, mgsc));
  };
  report("full_objective", check_gradients<double>(params, loss_fn, 1e-5, 2));

  std::printf("overall max_rel_err=%.3e tolerance=1e-4\n", worst);
  return worst <= 1e-4 ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GLSCL pre-training toolkit"};
  app.require_subcommand(1);

  std::string out_dir = ".";
  int64_t pairs = 512;
  bool video = false;
  uint64_t seed = 0;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic pair manifest");
  gen->add_option("--out", out_dir, "output directory");
  gen->add_option("--pairs", pairs, "number of pairs");
  gen->add_flag("--video", video, "video pairs instead of images");
  gen->add_option("--seed", seed, "base seed")->required();

  std::string config_path, manifest_path, manifest2_path;
  std::vector<std::string> overrides;
  int64_t steps_override = -1;
  bool skip_stage1 = false;
  auto* pre = app.add_subcommand("pretrain", "run pre-training");
  pre->add_option("--config", config_path, "config file");
  pre->add_option("--set", overrides, "key=value override, repeatable");
  pre->add_option("--seed", seed, "run seed")->required();
  pre->add_option("--manifest", manifest_path, "training manifest")->required();
  pre->add_option("--manifest2", manifest2_path,
                  "video manifest; enables the two-stage curriculum");
  pre->add_option("--steps", steps_override, "override sched.steps");
  pre->add_flag("--skip-stage1", skip_stage1, "start stage 2 from random init");
  pre->add_option("--out", out_dir, "checkpoint directory");

  std::string ckpt_path;
  int64_t k = -1, batch = -1;
  auto* ev = app.add_subcommand("eval-retrieval", "two-stage retrieval metrics");
  ev->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  ev->add_option("--manifest", manifest_path, "evaluation manifest")->required();
  ev->add_option("--k", k, "rerank depth");
  ev->add_option("--batch", batch, "encoding batch size");

  int64_t pair_id = 0, token = 0;
  int layer = -1;
  auto* ex = app.add_subcommand("export-attn", "write cross-attention heatmaps");
  ex->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  ex->add_option("--manifest", manifest_path, "manifest holding the pair")->required();
  ex->add_option("--pair-id", pair_id, "pair to visualize")->required();
  ex->add_option("--token", token, "text token index (0 = [CLS])");
  ex->add_option("--layer", layer, "fusion layer, -1 = last");
  ex->add_option("--out", out_dir, "output directory");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient check");
  gc->add_option("--seed", seed, "probe seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // prints the message and usage hint
    return 1;
  }

  try {
    if (gen->parsed()) return run_gen_data(out_dir, pairs, video, seed);
    if (pre->parsed()) {
      Config cfg;
      try {
        cfg = merged_config(config_path, overrides);
        if (steps_override >= 0) {
          cfg.set("sched.steps", std::to_string(steps_override));
          cfg.validate();
        }
      } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
      }
      return run_pretrain(cfg, seed, manifest_path, manifest2_path, skip_stage1, out_dir);
    }
    if (ev->parsed()) return run_eval_retrieval(ckpt_path, manifest_path, k, batch);
    if (ex->parsed()) return run_export_attn(ckpt_path, manifest_path, pair_id, token,
                                             layer, out_dir);
    if (gc->parsed()) return run_gradcheck(seed);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
