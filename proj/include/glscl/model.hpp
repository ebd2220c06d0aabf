#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "glscl/datagen.hpp"
#include "glscl/rng.hpp"
#include "glscl/tensor.hpp"

// Three-encoder architecture: vision encoder of VisualBlocks (temporal
// attention over frame [CLS] tokens + per-frame spatial attention), a
// bidirectional text encoder, and a dual-stream fusion encoder with
// cross-attention, plus the projection and classification heads.

namespace glscl {

enum class ParamGroup { UniModal, Fusion, Head };
enum class VisionGlobalMode { FrameCls, MeanPooling };

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  int64_t dim = 64;
  int64_t heads = 4;
  int64_t layers_vision = 2;
  int64_t layers_text = 2;
  int64_t layers_fusion = 2;  // paper-scale uses 6
  int64_t ffn_mult = 4;
  int64_t frames = 1;  // M; image pre-training is M = 1
  int64_t image_size = 32;
  int64_t patch_size = 8;
  int64_t max_text_len = 50;
  int64_t vocab_size = 64;
  int64_t proj_dim = 64;  // contrastive width d_c
  VisionGlobalMode vision_global = VisionGlobalMode::FrameCls;

  int64_t grid() const { return image_size / patch_size; }
  int64_t patches() const { return grid() * grid(); }       // N
  int64_t patch_dim() const { return 3 * patch_size * patch_size; }
  int64_t vision_seq() const { return frames * (patches() + 1); }

  void validate() const;
};

template <typename T>
struct ParamStore {
  struct Entry {
    std::string name;
    Tensor<T> tensor;
    ParamGroup group;
  };
  std::vector<Entry> entries;
  std::unordered_map<std::string, size_t> index;

  Tensor<T>& add(const std::string& name, Shape shape, ParamGroup group);
  Tensor<T>& get(const std::string& name);
  const Tensor<T>& get(const std::string& name) const;
  bool has(const std::string& name) const { return index.count(name) > 0; }
  size_t size() const { return entries.size(); }
};

template <typename T>
struct EncoderOutput {
  Tensor<T> tokens;  // vision [B, M*(N+1), D]; text [B, K, D]
  Tensor<T> global;  // [B, D]
  int64_t batch = 0;
  int64_t frames = 1;
};

template <typename T>
struct FusionOutput {
  Tensor<T> vision_tokens;  // [B, M*(N+1), D]
  Tensor<T> text_tokens;    // [B, K, D]
  Tensor<T> vision_global;  // [B, D]
  Tensor<T> text_global;    // [B, D]
  // Cross-attention probabilities per fusion layer.
  std::vector<Tensor<T>> attn_vision_to_text;  // [B, heads, Sv, K]
  std::vector<Tensor<T>> attn_text_to_vision;  // [B, heads, K, Sv]
};

template <typename T>
class Model {
 public:
  Model(ModelConfig cfg, uint64_t init_seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  // patches: [B, M, N, 3*P*P]. mask_rows, when given, holds per-sample
  // patch indices in [0, M*N) whose embeddings are replaced by [MASK_V].
  EncoderOutput<T> vision_encode(
      const Tensor<T>& patches,
      const std::vector<std::vector<int64_t>>* mask_rows = nullptr) const;

  // ids: [B][K]. mask_rows holds per-sample token positions replaced by the
  // learnable [MASK_L] embedding after lookup (never position 0).
  EncoderOutput<T> text_encode(
      const std::vector<std::vector<int64_t>>& ids, const std::vector<int64_t>& lengths,
      const std::vector<std::vector<int64_t>>* mask_rows = nullptr) const;

  FusionOutput<T> fuse(const EncoderOutput<T>& vision, const EncoderOutput<T>& text,
                       const std::vector<int64_t>& text_lengths) const;

  Tensor<T> project_vision(const Tensor<T>& global) const;  // phi_v
  Tensor<T> project_text(const Tensor<T>& global) const;    // phi_t
  Tensor<T> vtm_logits(const Tensor<T>& vision_global, const Tensor<T>& text_global) const;
  Tensor<T> mlm_logits(const Tensor<T>& token_features) const;
  Tensor<T> cl_temperature() const;  // clamp(exp(log_tau), 0.01, 1)

  std::vector<int64_t> frame_cls_indices() const;

 private:
  ModelConfig cfg_;
  ParamStore<T> params_;

  Tensor<T> linear(const Tensor<T>& x, const std::string& name, bool bias = true) const;
  Tensor<T> norm(const Tensor<T>& x, const std::string& name) const;
  Tensor<T> ffn(const Tensor<T>& x, const std::string& prefix) const;
  Tensor<T> mha(const Tensor<T>& queries, const Tensor<T>& keys_values,
                const std::string& prefix, const std::vector<uint8_t>* key_valid,
                Tensor<T>* probs_out = nullptr) const;
  Tensor<T> visual_block(const Tensor<T>& x, int layer, int64_t batch) const;
};

// Batch assembly helpers shared by trainer and evaluation.
template <typename T>
Tensor<T> patches_tensor(const PairBatch& batch, const ModelConfig& cfg);

std::vector<std::vector<int64_t>> batch_ids(const PairBatch& batch);
std::vector<int64_t> batch_lengths(const PairBatch& batch);

// Expanded key-validity mask for [b, ks] given valid lengths.
std::vector<uint8_t> key_valid_mask(const std::vector<int64_t>& lengths, int64_t ks);

}  // namespace glscl
