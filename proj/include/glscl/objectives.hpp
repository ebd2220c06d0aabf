#pragma once

#include <vector>

#include "glscl/tensor.hpp"

// Pre-training losses. All functions return a scalar tensor on the active
// tape; completion targets are detached internally.

namespace glscl {

struct ParameterError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class CompletionVariant { InfoNce, L2, Cosine };

// Scalar values of one step's losses, recorded after the forward pass.
struct LossReport {
  double cl = 0, vtm = 0, mlm = 0, mgsc = 0, mltc = 0, total = 0;
  // per-direction sub-terms
  double nce_v2t = 0, nce_t2v = 0;  // cl
  double nce_v = 0, nce_l = 0;      // mgsc
  double nce_vt = 0, nce_lt = 0;    // mltc
};

// Single-direction InfoNCE: row i of `targets` is the positive for row i of
// `queries`, the other rows are the negatives. Similarity is cosine; rows
// are L2-normalized internally. Log-sum-exp via cross entropy.
template <typename T>
Tensor<T> info_nce(const Tensor<T>& queries, const Tensor<T>& targets, T tau);

// Learnable-temperature form (tau is a positive scalar tensor on the tape).
template <typename T>
Tensor<T> info_nce(const Tensor<T>& queries, const Tensor<T>& targets,
                   const Tensor<T>& tau);

// Vision-text contrastive loss: sum of both InfoNCE directions over the
// projected uni-modal globals.
template <typename T>
Tensor<T> contrastive_pair_loss(const Tensor<T>& vision_proj, const Tensor<T>& text_proj,
                                const Tensor<T>& tau);

// One modality's completion term between recovered features and detached
// targets: InfoNCE at fixed tau (default), squared distance, or
// -log(0.5*(cos+1)) with the inner term clamped to >= 1e-7.
template <typename T>
Tensor<T> completion_loss(const Tensor<T>& recovered, const Tensor<T>& target,
                          CompletionVariant variant, T tau = T(0.03));

// Binary matching loss: positive pairs labeled 1, mismatched pairs 0.
template <typename T>
Tensor<T> vtm_loss(const Tensor<T>& pos_logits, const Tensor<T>& neg_logits);

template <typename T>
Tensor<T> mlm_loss(const Tensor<T>& logits, const std::vector<int64_t>& targets);

}  // namespace glscl
