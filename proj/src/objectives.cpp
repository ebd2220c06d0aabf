#include "glscl/objectives.hpp"

#include <numeric>

namespace glscl {

namespace {

template <typename T>
Tensor<T> cosine_matrix(const Tensor<T>& q, const Tensor<T>& t) {
  if (q.rank() != 2 || q.shape() != t.shape())
    throw DimensionError("paired feature sets must share shape [n, d], got " +
                         shape_str(q.shape()) + " and " + shape_str(t.shape()));
  return matmul(l2_normalize_rows(q), transpose_last2(l2_normalize_rows(t)));
}

template <typename T>
Tensor<T> diagonal_ce(const Tensor<T>& logits) {
  std::vector<int64_t> diag(static_cast<size_t>(logits.dim(0)));
  std::iota(diag.begin(), diag.end(), 0);
  return cross_entropy_logits(logits, diag);
}

}  // namespace

template <typename T>
Tensor<T> info_nce(const Tensor<T>& queries, const Tensor<T>& targets, T tau) {
  if (!(tau > T(0))) throw ParameterError("temperature must be positive");
  return diagonal_ce(scale(cosine_matrix(queries, targets), T(1) / tau));
}

template <typename T>
Tensor<T> info_nce(const Tensor<T>& queries, const Tensor<T>& targets,
                   const Tensor<T>& tau) {
  if (!(tau.item() > T(0))) throw ParameterError("temperature must be positive");
  return diagonal_ce(mul_scalar_t(cosine_matrix(queries, targets), reciprocal(tau)));
}

template <typename T>
Tensor<T> contrastive_pair_loss(const Tensor<T>& vision_proj, const Tensor<T>& text_proj,
                                const Tensor<T>& tau) {
  return add(info_nce(vision_proj, text_proj, tau), info_nce(text_proj, vision_proj, tau));
}

template <typename T>
Tensor<T> completion_loss(const Tensor<T>& recovered, const Tensor<T>& target,
                          CompletionVariant variant, T tau) {
  Tensor<T> tgt = detach(target);
  switch (variant) {
    case CompletionVariant::InfoNce:
      return info_nce(recovered, tgt, tau);
    case CompletionVariant::L2: {
      if (recovered.shape() != target.shape())
        throw DimensionError("paired feature sets must share shape");
      Tensor<T> diff = sub(recovered, tgt);
      return scale(sum_all(square(diff)), T(1) / static_cast<T>(recovered.dim(0)));
    }
    case CompletionVariant::Cosine: {
      Tensor<T> cos = cosine_similarity(recovered, tgt);
      Tensor<T> inner = clamp(scale(add_scalar(cos, T(1)), T(0.5)), T(1e-7), T(1));
      return neg(mean_all(log_t(inner)));
    }
  }
  throw ContractError("unknown completion variant");
}

template <typename T>
Tensor<T> vtm_loss(const Tensor<T>& pos_logits, const Tensor<T>& neg_logits) {
  if (pos_logits.rank() != 2 || pos_logits.dim(1) != 2 ||
      neg_logits.shape() != pos_logits.shape())
    throw DimensionError("matching logits must be [n, 2]");
  Tensor<T> all = concat<T>({pos_logits, neg_logits}, 0);
  std::vector<int64_t> labels(static_cast<size_t>(all.dim(0)), 0);
  std::fill(labels.begin(), labels.begin() + pos_logits.dim(0), int64_t(1));
  return cross_entropy_logits(all, labels);
}

template <typename T>
Tensor<T> mlm_loss(const Tensor<T>& logits, const std::vector<int64_t>& targets) {
  return cross_entropy_logits(logits, targets);
}

#define GLSCL_OBJ_INSTANTIATE(T)                                                       \
  template Tensor<T> info_nce<T>(const Tensor<T>&, const Tensor<T>&, T);               \
  template Tensor<T> info_nce<T>(const Tensor<T>&, const Tensor<T>&,                   \
                                 const Tensor<T>&);                                    \
  template Tensor<T> contrastive_pair_loss<T>(const Tensor<T>&, const Tensor<T>&,      \
                                              const Tensor<T>&);                       \
  template Tensor<T> completion_loss<T>(const Tensor<T>&, const Tensor<T>&,            \
                                        CompletionVariant, T);                         \
  template Tensor<T> vtm_loss<T>(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> mlm_loss<T>(const Tensor<T>&, const std::vector<int64_t>&);

GLSCL_OBJ_INSTANTIATE(float)
GLSCL_OBJ_INSTANTIATE(double)

}  // namespace glscl
