#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

// Minimal dense tensors with reverse-mode autodiff on a per-thread tape.
// Instantiated for float (training) and double (gradient verification).

namespace glscl {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DegenerateRowError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IndexError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> values;
  bool requires_grad = false;
  std::vector<T> grad;  // allocated on first accumulation

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl<T>> p) : p_(std::move(p)) {}

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor from(Shape shape, std::vector<T> values);
  static Tensor scalar(T value);

  bool defined() const { return static_cast<bool>(p_); }
  const Shape& shape() const { return p_->shape; }
  int64_t dim(int i) const;  // negative indices from the back
  int64_t size() const { return static_cast<int64_t>(p_->values.size()); }
  int rank() const { return static_cast<int>(p_->shape.size()); }

  T* data() { return p_->values.data(); }
  const T* data() const { return p_->values.data(); }
  std::vector<T>& values() { return p_->values; }
  const std::vector<T>& values() const { return p_->values; }

  bool requires_grad() const { return p_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    p_->requires_grad = b;
    return *this;
  }
  std::vector<T>& grad() {
    p_->ensure_grad();
    return p_->grad;
  }
  bool has_grad() const { return !p_->grad.empty(); }
  void zero_grad() {
    if (!p_->grad.empty()) p_->grad.assign(p_->values.size(), T(0));
  }

  T item() const;

  const std::shared_ptr<TensorImpl<T>>& impl() const { return p_; }

 private:
  std::shared_ptr<TensorImpl<T>> p_;
};

// Ordered record of executed primitives for one backward sweep.
template <typename T>
class Tape {
 public:
  void record(std::shared_ptr<TensorImpl<T>> out, std::function<void()> backward_fn) {
    nodes_.push_back({std::move(out), std::move(backward_fn)});
  }
  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Replays backward rules newest-first. The caller seeds the loss grad
  // after zero_outputs(), so leaf grads accumulate one contribution per sweep.
  void replay() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->fn();
  }

  void zero_outputs() {
    for (auto& n : nodes_)
      if (!n.out->grad.empty()) n.out->grad.assign(n.out->values.size(), T(0));
  }

  static Tape*& active() {
    thread_local Tape* t = nullptr;
    return t;
  }

 private:
  struct Node {
    std::shared_ptr<TensorImpl<T>> out;
    std::function<void()> fn;
  };
  std::vector<Node> nodes_;
};

// RAII activation of a tape for the current thread.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : prev_(Tape<T>::active()) {
    Tape<T>::active() = &tape;
  }
  ~TapeScope() { Tape<T>::active() = prev_; }
  TapeScope(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

// Disables recording (evaluation mode).
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : prev_(Tape<T>::active()) { Tape<T>::active() = nullptr; }
  ~NoGradScope() { Tape<T>::active() = prev_; }
  NoGradScope(const NoGradScope&) = delete;

 private:
  Tape<T>* prev_;
};

// Seeds grad(loss)=1 and replays the active tape. The tape is left intact;
// repeated calls accumulate.
template <typename T>
void backward(Tensor<T> loss);

// ---- primitive operations ------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);  // broadcasting
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);  // broadcasting
template <typename T>
Tensor<T> neg(const Tensor<T>& a);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c);
template <typename T>
Tensor<T> exp_t(const Tensor<T>& a);
template <typename T>
Tensor<T> log_t(const Tensor<T>& a);
template <typename T>
Tensor<T> reciprocal(const Tensor<T>& a);
template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi);
template <typename T>
Tensor<T> gelu(const Tensor<T>& a);
template <typename T>
Tensor<T> square(const Tensor<T>& a);

// a[m,k] * b[k,n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// a[batch,m,k] * b[batch,k,n]
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b);

// Multiply every element by a scalar tensor (keeps the scalar on the tape).
template <typename T>
Tensor<T> mul_scalar_t(const Tensor<T>& a, const Tensor<T>& s);

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& axes);
template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, int64_t start, int64_t len);
template <typename T>
Tensor<T> index_select(const Tensor<T>& a, int axis,
                       const std::vector<int64_t>& indices);

// a[R,D] with rows at `positions` replaced by vec[D].
template <typename T>
Tensor<T> replace_rows(const Tensor<T>& a, const std::vector<int64_t>& positions,
                       const Tensor<T>& vec);

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int64_t>& ids);

// Softmax over the last axis. mask, when given, has one byte per element
// (1 = allowed); a fully-masked row raises DegenerateRowError.
template <typename T>
Tensor<T> softmax_masked(const Tensor<T>& logits,
                         const std::vector<uint8_t>* mask = nullptr);

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5));

// Mean over rows of negative log-softmax probability of the target class.
template <typename T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits,
                               const std::vector<int64_t>& targets);

template <typename T>
Tensor<T> cosine_similarity(const Tensor<T>& u, const Tensor<T>& v,
                            T eps = T(1e-8));

template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps = T(1e-8));

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a);
template <typename T>
Tensor<T> mean_all(const Tensor<T>& a);
template <typename T>
Tensor<T> sum_axis(const Tensor<T>& a, int axis);
template <typename T>
Tensor<T> mean_axis(const Tensor<T>& a, int axis);

// Identity on values; gradient does not flow past this edge.
template <typename T>
Tensor<T> detach(const Tensor<T>& a);

}  // namespace glscl
