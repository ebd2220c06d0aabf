#include "glscl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>

#include "glscl/kernels.hpp"

namespace glscl {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  auto p = std::make_shared<TensorImpl<T>>();
  int64_t n = shape_numel(shape);
  p->shape = std::move(shape);
  p->values.assign(static_cast<size_t>(n), T(0));
  return Tensor(std::move(p));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.values().begin(), t.values().end(), value);
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    throw DimensionError("Tensor::from: " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  auto p = std::make_shared<TensorImpl<T>>();
  p->shape = std::move(shape);
  p->values = std::move(values);
  return Tensor(std::move(p));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return from({1}, {value});
}

template <typename T>
int64_t Tensor<T>::dim(int i) const {
  int r = rank();
  if (i < 0) i += r;
  if (i < 0 || i >= r) throw DimensionError("dim index out of range");
  return p_->shape[static_cast<size_t>(i)];
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
  return p_->values[0];
}

namespace {

template <typename T, typename F>
void maybe_record(bool any_rg, Tensor<T>& out, F&& bw) {
  if (!any_rg || Tape<T>::active() == nullptr) return;
  out.set_requires_grad(true);
  Tape<T>::active()->record(out.impl(), std::forward<F>(bw));
}

template <typename T>
bool rg(const Tensor<T>& t) {
  return t.requires_grad();
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw DimensionError("broadcast mismatch " + shape_str(a) + " vs " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `s` right-aligned to `out`; 0 where the dimension broadcasts.
std::vector<int64_t> bc_strides(const Shape& s, const Shape& out) {
  std::vector<int64_t> st(out.size(), 0);
  int64_t stride = 1;
  for (size_t i = 0; i < s.size(); ++i) {
    size_t d = s.size() - 1 - i;
    size_t od = out.size() - 1 - i;
    st[od] = (s[d] == 1 && out[od] != 1) ? 0 : stride;
    stride *= s[d];
  }
  return st;
}

// Odometer walk over `out`, yielding (flat out index, a offset, b offset).
template <typename F>
void bc_loop(const Shape& out, const std::vector<int64_t>& sa,
             const std::vector<int64_t>& sb, F&& f) {
  int r = static_cast<int>(out.size());
  int64_t n = shape_numel(out);
  if (r == 0) {
    if (n == 1) f(int64_t(0), int64_t(0), int64_t(0));
    return;
  }
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  int64_t oa = 0, ob = 0;
  for (int64_t i = 0; i < n; ++i) {
    f(i, oa, ob);
    for (int d = r - 1; d >= 0; --d) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

enum class BinOp { Add, Mul };

template <typename T>
Tensor<T> binary_bc(const Tensor<T>& a, const Tensor<T>& b, BinOp op) {
  const bool same = a.shape() == b.shape();
  Tensor<T> out;
  if (same) {
    out = Tensor<T>::zeros(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    int64_t n = a.size();
    if (op == BinOp::Add)
      for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    else
      for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    auto ai = a.impl();
    auto bi = b.impl();
    auto oi = out.impl();
    maybe_record(rg(a) || rg(b), out, [ai, bi, oi, op]() {
      if (oi->grad.empty()) return;
      int64_t n = static_cast<int64_t>(oi->values.size());
      if (ai->requires_grad) {
        ai->ensure_grad();
        if (op == BinOp::Add)
          for (int64_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i];
        else
          for (int64_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i] * bi->values[i];
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        if (op == BinOp::Add)
          for (int64_t i = 0; i < n; ++i) bi->grad[i] += oi->grad[i];
        else
          for (int64_t i = 0; i < n; ++i) bi->grad[i] += oi->grad[i] * ai->values[i];
      }
    });
    return out;
  }
  Shape os = broadcast_shape(a.shape(), b.shape());
  auto sa = bc_strides(a.shape(), os);
  auto sb = bc_strides(b.shape(), os);
  out = Tensor<T>::zeros(os);
  {
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    if (op == BinOp::Add)
      bc_loop(os, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) { po[i] = pa[ia] + pb[ib]; });
    else
      bc_loop(os, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) { po[i] = pa[ia] * pb[ib]; });
  }
  auto ai = a.impl();
  auto bi = b.impl();
  auto oi = out.impl();
  maybe_record(rg(a) || rg(b), out, [ai, bi, oi, os, sa, sb, op]() {
    if (oi->grad.empty()) return;
    const std::vector<T>& g = oi->grad;
    if (ai->requires_grad) {
      ai->ensure_grad();
      if (op == BinOp::Add)
        bc_loop(os, sa, sb, [&](int64_t i, int64_t ia, int64_t) { ai->grad[ia] += g[i]; });
      else
        bc_loop(os, sa, sb,
                [&](int64_t i, int64_t ia, int64_t ib) { ai->grad[ia] += g[i] * bi->values[ib]; });
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      if (op == BinOp::Add)
        bc_loop(os, sa, sb, [&](int64_t i, int64_t, int64_t ib) { bi->grad[ib] += g[i]; });
      else
        bc_loop(os, sa, sb,
                [&](int64_t i, int64_t ia, int64_t ib) { bi->grad[ib] += g[i] * ai->values[ia]; });
    }
  });
  return out;
}

// Elementwise unary with a value-dependent derivative.
template <typename T, typename FwdF, typename BwdF>
Tensor<T> unary_op(const Tensor<T>& a, FwdF fwd, BwdF dfdx) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
  auto ai = a.impl();
  auto oi = out.impl();
  maybe_record(rg(a), out, [ai, oi, dfdx]() {
    if (oi->grad.empty() || !ai->requires_grad) return;
    ai->ensure_grad();
    int64_t n = static_cast<int64_t>(ai->values.size());
    for (int64_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i] * dfdx(ai->values[i]);
  });
  return out;
}

}  // namespace

template <typename T>
void backward(Tensor<T> loss) {
  if (loss.size() != 1) throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  Tape<T>* tape = Tape<T>::active();
  if (!tape) throw ContractError("backward: no active tape");
  tape->zero_outputs();
  loss.grad()[0] = T(1);
  tape->replay();
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_bc(a, b, BinOp::Add);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_bc(a, b, BinOp::Mul);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, neg(b));
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return scale(a, T(-1));
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  return unary_op(
      a, [c](T x) { return x * c; }, [c](T) { return c; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return unary_op(
      a, [c](T x) { return x + c; }, [](T) { return T(1); });
}

template <typename T>
Tensor<T> exp_t(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return std::exp(x); }, [](T x) { return std::exp(x); });
}

template <typename T>
Tensor<T> log_t(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return std::log(x); }, [](T x) { return T(1) / x; });
}

template <typename T>
Tensor<T> reciprocal(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return T(1) / x; }, [](T x) { return -T(1) / (x * x); });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  return unary_op(
      a, [lo, hi](T x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](T x) { return (x >= lo && x <= hi) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return x * x; }, [](T x) { return T(2) * x; });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return unary_op(
      a,
      [](T x) {
        return static_cast<T>(0.5 * static_cast<double>(x) *
                              (1.0 + std::erf(static_cast<double>(x) * inv_sqrt2)));
      },
      [](T x) {
        double xd = static_cast<double>(x);
        return static_cast<T>(0.5 * (1.0 + std::erf(xd * inv_sqrt2)) +
                              xd * inv_sqrt2pi * std::exp(-0.5 * xd * xd));
      });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out = Tensor<T>::zeros({m, n});
  kern::gemm(m, n, k, a.data(), b.data(), out.data(), false);
  auto ai = a.impl();
  auto bi = b.impl();
  auto oi = out.impl();
  maybe_record(rg(a) || rg(b), out, [ai, bi, oi, m, n, k]() {
    if (oi->grad.empty()) return;
    const T* g = oi->grad.data();
    if (ai->requires_grad) {
      ai->ensure_grad();
      std::vector<T> bt(static_cast<size_t>(k * n));
      kern::transpose(k, n, bi->values.data(), bt.data());  // bt[n,k]
      kern::gemm(m, k, n, g, bt.data(), ai->grad.data(), true);
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      std::vector<T> at(static_cast<size_t>(m * k));
      kern::transpose(m, k, ai->values.data(), at.data());  // at[k,m]
      kern::gemm(k, n, m, at.data(), g, bi->grad.data(), true);
    }
  });
  return out;
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  int64_t p = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Tensor<T> out = Tensor<T>::zeros({p, m, n});
  kern::bgemm(p, m, n, k, a.data(), b.data(), out.data(), false);
  auto ai = a.impl();
  auto bi = b.impl();
  auto oi = out.impl();
  maybe_record(rg(a) || rg(b), out, [ai, bi, oi, p, m, n, k]() {
    if (oi->grad.empty()) return;
    for (int64_t q = 0; q < p; ++q) {
      const T* g = oi->grad.data() + q * m * n;
      const T* av = ai->values.data() + q * m * k;
      const T* bv = bi->values.data() + q * k * n;
      if (ai->requires_grad) {
        ai->ensure_grad();
        std::vector<T> bt(static_cast<size_t>(k * n));
        kern::transpose(k, n, bv, bt.data());
        kern::gemm(m, k, n, g, bt.data(), ai->grad.data() + q * m * k, true);
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        std::vector<T> at(static_cast<size_t>(m * k));
        kern::transpose(m, k, av, at.data());
        kern::gemm(k, n, m, at.data(), g, bi->grad.data() + q * k * n, true);
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul_scalar_t(const Tensor<T>& a, const Tensor<T>& s) {
  if (s.size() != 1) throw ContractError("mul_scalar_t: scalar expected");
  T sv = s.item();
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] * sv;
  auto ai = a.impl();
  auto si = s.impl();
  auto oi = out.impl();
  maybe_record(rg(a) || rg(s), out, [ai, si, oi, sv]() {
    if (oi->grad.empty()) return;
    int64_t n = static_cast<int64_t>(oi->values.size());
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (int64_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i] * sv;
    }
    if (si->requires_grad) {
      si->ensure_grad();
      T acc = T(0);
      for (int64_t i = 0; i < n; ++i) acc += oi->grad[i] * ai->values[i];
      si->grad[0] += acc;
    }
  });
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.size())
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  Tensor<T> out = Tensor<T>::from(std::move(shape), a.values());
  auto ai = a.impl();
  auto oi = out.impl();
  maybe_record(rg(a), out, [ai, oi]() {
    if (oi->grad.empty() || !ai->requires_grad) return;
    ai->ensure_grad();
    for (size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
  });
  return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& axes) {
  int r = a.rank();
  if (static_cast<int>(axes.size()) != r) throw DimensionError("permute: rank mismatch");
  Shape os(static_cast<size_t>(r));
  std::vector<int64_t> src_strides(static_cast<size_t>(r), 1);
  for (int d = r - 2; d >= 0; --d)
    src_strides[d] = src_strides[d + 1] * a.shape()[static_cast<size_t>(d + 1)];
  std::vector<int64_t> st(static_cast<size_t>(r));  // stride in src per out dim
  for (int d = 0; d < r; ++d) {
    os[static_cast<size_t>(d)] = a.shape()[static_cast<size_t>(axes[static_cast<size_t>(d)])];
    st[static_cast<size_t>(d)] = src_strides[static_cast<size_t>(axes[static_cast<size_t>(d)])];
  }
  Tensor<T> out = Tensor<T>::zeros(os);
  std::vector<int64_t> zero(st.size(), 0);
  const T* pa = a.data();
  T* po = out.data();
  bc_loop(os, st, zero, [&](int64_t i, int64_t src, int64_t) { po[i] = pa[src]; });
  auto ai = a.impl();
  auto oi = out.impl();
  maybe_record(rg(a), out, [ai, oi, os, st, zero]() {
    if (oi->grad.empty() || !ai->requires_grad) return;
    ai->ensure_grad();
    bc_loop(os, st, zero,
            [&](int64_t i, int64_t src, int64_t) { ai->grad[src] += oi->grad[i]; });
  });
  return out;
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
  std::vector<int> axes(static_cast<size_t>(a.rank()));
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(a, axes);
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no parts");
  int r = parts[0].rank();
  if (axis < 0) axis += r;
  Shape os = parts[0].shape();
  int64_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != r) throw DimensionError("concat: rank mismatch");
    for (int d = 0; d < r; ++d)
      if (d != axis && p.shape()[static_cast<size_t>(d)] != os[static_cast<size_t>(d)])
        throw DimensionError("concat: shape mismatch " + shape_str(p.shape()));
    total += p.dim(axis);
  }
  os[static_cast<size_t>(axis)] = total;
  Tensor<T> out = Tensor<T>::zeros(os);
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= os[static_cast<size_t>(d)];
  for (int d = axis + 1; d < r; ++d) inner *= os[static_cast<size_t>(d)];
  int64_t out_row = total * inner;
  int64_t off = 0;
  for (const auto& p : parts) {
    int64_t block = p.dim(axis) * inner;
    const T* src = p.data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + o * out_row + off, src + o * block,
                  sizeof(T) * static_cast<size_t>(block));
    off += block;
  }
  bool any = false;
  for (const auto& p : parts) any = any || rg(p);
  std::vector<std::shared_ptr<TensorImpl<T>>> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  auto oi = out.impl();
  maybe_record(any, out, [impls, oi, outer, inner, out_row]() {
    if (oi->grad.empty()) return;
    int64_t off = 0;
    for (auto& pi : impls) {
      int64_t block = static_cast<int64_t>(pi->values.size()) / outer;
      if (pi->requires_grad) {
        pi->ensure_grad();
        for (int64_t o = 0; o < outer; ++o) {
          const T* g = oi->grad.data() + o * out_row + off;
          T* dst = pi->grad.data() + o * block;
          for (int64_t i = 0; i < block; ++i) dst[i] += g[i];
        }
      }
      off += block;
    }
    (void)inner;
  });
  return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, int64_t start, int64_t len) {
  int r = a.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r || start < 0 || start + len > a.dim(axis))
    throw IndexError("slice: out of range on " + shape_str(a.shape()));
  Shape os = a.shape();
  os[static_cast<size_t>(axis)] = len;
  Tensor<T> out = Tensor<T>::zeros(os);
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= a.shape()[static_cast<size_t>(d)];
  for (int d = axis + 1; d < r; ++d) inner *= a.shape()[static_cast<size_t>(d)];
  int64_t src_row = a.dim(axis) * inner;
  int64_t dst_row = len * inner;
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * dst_row, a.data() + o * src_row + start * inner,
                sizeof(T) * static_cast<size_t>(dst_row));
  auto ai = a.impl();
  auto oi = out.impl();
  maybe_record(rg(a), out, [ai, oi, outer, inner, src_row, dst_row, start]() {
    if (oi->grad.empty() || !ai->requires_grad) return;
    ai->ensure_grad();
    for (int64_t o = 0; o < outer; ++o) {
      const T* g = oi->grad.data() + o * dst_row;
      T* dst = ai->grad.data() + o * src_row + start * inner;
      for (int64_t i = 0; i < dst_row; ++i) dst[i] += g[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> index_select(const Tensor<T>& a, int axis, const std::vector<int64_t>& indices) {
  int r = a.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw DimensionError("index_select: bad axis");
  int64_t ext = a.dim(axis);
  for (int64_t ix : indices)
    if (ix < 0 || ix >= ext)
      throw IndexError("index_select: index " + std::to_string(ix) + " out of " +
                       std::to_string(ext));
  Shape os = a.shape();
  os[static_cast<size_t>(axis)] = static_cast<int64_t>(indices.size());
  Tensor<T> out = Tensor<T>::zeros(os);
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= a.shape()[static_cast<size_t>(d)];
  for (int d = axis + 1; d < r; ++d) inner *= a.shape()[static_cast<size_t>(d)];
  int64_t src_row = ext * inner;
  int64_t dst_row = static_cast<int64_t>(indices.size()) * inner;
  for (int64_t o = 0; o < outer; ++o)
    for (size_t s = 0; s < indices.size(); ++s)
      std::memcpy(out.data() + o * dst_row + static_cast<int64_t>(s) * inner,
                  a.data() + o * src_row + indices[s] * inner,
                  sizeof(T) * static_cast<size_t>(inner));
  auto ai = a.impl();
  auto oi = out.impl();
  maybe_record(rg(a), out, [ai, oi, indices, outer, inner, src_row, dst_row]() {
    if (oi->grad.empty() || !ai->requires_grad) return;
    ai->ensure_grad();
    for (int64_t o = 0; o < outer; ++o)
      for (size_t s = 0; s < indices.size(); ++s) {
        const T* g = oi->grad.data() + o * dst_row + static_cast<int64_t>(s) * inner;
        T* dst = ai->grad.data() + o * src_row + indices[s] * inner;
        for (int64_t i = 0; i < inner; ++i) dst[i] += g[i];
      }
  });
  return out;
}

template <typename T>
Tensor<T> replace_rows(const Tensor<T>& a, const std::vector<int64_t>& positions,
                       const Tensor<T>& vec) {
  if (a.rank() != 2 || vec.rank() != 1 || vec.dim(0) != a.dim(1))
    throw DimensionError("replace_rows: want [R,D] and [D], got " + shape_str(a.shape()) +
                         " and " + shape_str(vec.shape()));
  int64_t rows = a.dim(0), d = a.dim(1);
  for (int64_t p : positions)
    if (p < 0 || p >= rows) throw IndexError("replace_rows: row " + std::to_string(p));
  Tensor<T> out = Tensor<T>::from(a.shape(), a.values());
  for (int64_t p : positions)
    std::memcpy(out.data() + p * d, vec.data(), sizeof(T) * static_cast<size_t>(d));
  auto ai = a.impl();
  auto vi = vec.impl();
  auto oi = out.impl();
  maybe_record(rg(a) || rg(vec), out, [ai, vi, oi, positions, rows, d]() {
    if (oi->grad.empty()) return;
    if (ai->requires_grad) {
      ai->ensure_grad();
      std::vector<uint8_t> replaced(static_cast<size_t>(rows), 0);
      for (int64_t p : positions) replaced[static_cast<size_t>(p)] = 1;
      for (int64_t r = 0; r < rows; ++r) {
        if (replaced[static_cast<size_t>(r)]) continue;
        const T* g = oi->grad.data() + r * d;
        T* dst = ai->grad.data() + r * d;
        for (int64_t i = 0; i < d; ++i) dst[i] += g[i];
      }
    }
    if (vi->requires_grad) {
      vi->ensure_grad();
      for (int64_t p : positions) {
        const T* g = oi->grad.data() + p * d;
        for (int64_t i = 0; i < d; ++i) vi->grad[i] += g[i];
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int64_t>& ids) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be [V,D]");
  int64_t v = table.dim(0), d = table.dim(1);
  for (int64_t id : ids)
    if (id < 0 || id >= v) throw IndexError("embedding: id " + std::to_string(id) + " out of " + std::to_string(v));
  Tensor<T> out = Tensor<T>::zeros({static_cast<int64_t>(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i)
    std::memcpy(out.data() + static_cast<int64_t>(i) * d, table.data() + ids[i] * d,
                sizeof(T) * static_cast<size_t>(d));
  auto ti = table.impl();
  auto oi = out.impl();
  maybe_record(rg(table), out, [ti, oi, ids, d]() {
    if (oi->grad.empty() || !ti->requires_grad) return;
    ti->ensure_grad();
    for (size_t i = 0; i < ids.size(); ++i) {
      const T* g = oi->grad.data() + static_cast<int64_t>(i) * d;
      T* dst = ti->grad.data() + ids[i] * d;
      for (int64_t j = 0; j < d; ++j) dst[j] += g[j];
    }
  });
  return out;
}

template <typename T>
Tensor<T> softmax_masked(const Tensor<T>& logits, const std::vector<uint8_t>* mask) {
  if (logits.rank() < 1) throw DimensionError("softmax: rank 0");
  if (mask && mask->size() != static_cast<size_t>(logits.size()))
    throw DimensionError("softmax: mask size mismatch");
  int64_t n = logits.dim(-1);
  int64_t rows = logits.size() / n;
  Tensor<T> out = Tensor<T>::zeros(logits.shape());
  const T* px = logits.data();
  T* py = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* x = px + r * n;
    T* y = py + r * n;
    const uint8_t* m = mask ? mask->data() + r * n : nullptr;
    T mx = -std::numeric_limits<T>::infinity();
    for (int64_t j = 0; j < n; ++j)
      if (!m || m[j]) mx = std::max(mx, x[j]);
    if (mx == -std::numeric_limits<T>::infinity())
      throw DegenerateRowError("softmax: fully masked row " + std::to_string(r));
    T sum = T(0);
    for (int64_t j = 0; j < n; ++j) {
      y[j] = (!m || m[j]) ? std::exp(x[j] - mx) : T(0);
      sum += y[j];
    }
    T inv = T(1) / sum;
    for (int64_t j = 0; j < n; ++j) y[j] *= inv;
  }
  auto xi = logits.impl();
  auto oi = out.impl();
  maybe_record(rg(logits), out, [xi, oi, rows, n]() {
    if (oi->grad.empty() || !xi->requires_grad) return;
    xi->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const T* y = oi->values.data() + r * n;
      const T* g = oi->grad.data() + r * n;
      T* dx = xi->grad.data() + r * n;
      T dot = T(0);
      for (int64_t j = 0; j < n; ++j) dot += g[j] * y[j];
      for (int64_t j = 0; j < n; ++j) dx[j] += y[j] * (g[j] - dot);
    }
  });
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  int64_t d = x.dim(-1);
  if (gamma.size() != d || beta.size() != d)
    throw DimensionError("layer_norm: affine params must be [d]");
  int64_t rows = x.size() / d;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(x.size()));
  auto inv = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
  const T* px = x.data();
  const T* pg = gamma.data();
  const T* pb = beta.data();
  T* py = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = px + r * d;
    T mu = T(0);
    for (int64_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (int64_t j = 0; j < d; ++j) {
      T c = xr[j] - mu;
      var += c * c;
    }
    var /= static_cast<T>(d);
    T iv = T(1) / std::sqrt(var + eps);
    (*inv)[static_cast<size_t>(r)] = iv;
    T* xh = xhat->data() + r * d;
    T* yr = py + r * d;
    for (int64_t j = 0; j < d; ++j) {
      xh[j] = (xr[j] - mu) * iv;
      yr[j] = xh[j] * pg[j] + pb[j];
    }
  }
  auto xi = x.impl();
  auto gi = gamma.impl();
  auto bi = beta.impl();
  auto oi = out.impl();
  maybe_record(rg(x) || rg(gamma) || rg(beta), out, [xi, gi, bi, oi, xhat, inv, rows, d]() {
    if (oi->grad.empty()) return;
    const T* pg = gi->values.data();
    for (int64_t r = 0; r < rows; ++r) {
      const T* g = oi->grad.data() + r * d;
      const T* xh = xhat->data() + r * d;
      if (gi->requires_grad) {
        gi->ensure_grad();
        for (int64_t j = 0; j < d; ++j) gi->grad[j] += g[j] * xh[j];
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (int64_t j = 0; j < d; ++j) bi->grad[j] += g[j];
      }
      if (xi->requires_grad) {
        xi->ensure_grad();
        T iv = (*inv)[static_cast<size_t>(r)];
        T s1 = T(0), s2 = T(0);
        for (int64_t j = 0; j < d; ++j) {
          T gh = g[j] * pg[j];
          s1 += gh;
          s2 += gh * xh[j];
        }
        s1 /= static_cast<T>(d);
        s2 /= static_cast<T>(d);
        T* dx = xi->grad.data() + r * d;
        for (int64_t j = 0; j < d; ++j) {
          T gh = g[j] * pg[j];
          dx[j] += iv * (gh - s1 - xh[j] * s2);
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits, const std::vector<int64_t>& targets) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy: logits must be [n,C]");
  int64_t n = logits.dim(0), c = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != n)
    throw DimensionError("cross_entropy: target count mismatch");
  for (int64_t t : targets)
    if (t < 0 || t >= c) throw IndexError("cross_entropy: target " + std::to_string(t));
  auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(n * c));
  T loss = T(0);
  const T* px = logits.data();
  for (int64_t r = 0; r < n; ++r) {
    const T* x = px + r * c;
    T mx = x[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    T sum = T(0);
    for (int64_t j = 0; j < c; ++j) sum += std::exp(x[j] - mx);
    T lse = mx + std::log(sum);
    loss += lse - x[targets[static_cast<size_t>(r)]];
    T* p = probs->data() + r * c;
    for (int64_t j = 0; j < c; ++j) p[j] = std::exp(x[j] - lse);
  }
  loss /= static_cast<T>(n);
  Tensor<T> out = Tensor<T>::scalar(loss);
  auto xi = logits.impl();
  auto oi = out.impl();
  maybe_record(rg(logits), out, [xi, oi, probs, targets, n, c]() {
    if (oi->grad.empty() || !xi->requires_grad) return;
    xi->ensure_grad();
    T g = oi->grad[0] / static_cast<T>(n);
    for (int64_t r = 0; r < n; ++r) {
      const T* p = probs->data() + r * c;
      T* dx = xi->grad.data() + r * c;
      for (int64_t j = 0; j < c; ++j) dx[j] += g * p[j];
      dx[targets[static_cast<size_t>(r)]] -= g;
    }
  });
  return out;
}

template <typename T>
Tensor<T> cosine_similarity(const Tensor<T>& u, const Tensor<T>& v, T eps) {
  if (u.size() != v.size()) throw DimensionError("cosine_similarity: size mismatch");
  int64_t n = u.size();
  const T* pu = u.data();
  const T* pv = v.data();
  T dot = T(0), nu2 = T(0), nv2 = T(0);
  for (int64_t i = 0; i < n; ++i) {
    dot += pu[i] * pv[i];
    nu2 += pu[i] * pu[i];
    nv2 += pv[i] * pv[i];
  }
  T nu = std::sqrt(nu2), nv = std::sqrt(nv2);
  T cu = std::max(nu, eps), cv = std::max(nv, eps);
  T s = dot / (cu * cv);
  Tensor<T> out = Tensor<T>::scalar(s);
  auto ui = u.impl();
  auto vi = v.impl();
  auto oi = out.impl();
  maybe_record(rg(u) || rg(v), out, [ui, vi, oi, nu, nv, cu, cv, s, eps, n]() {
    if (oi->grad.empty()) return;
    T g = oi->grad[0];
    T inv = T(1) / (cu * cv);
    if (ui->requires_grad) {
      ui->ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        T d = vi->values[i] * inv;
        if (nu > eps) d -= s * ui->values[i] / (nu * nu);
        ui->grad[i] += g * d;
      }
    }
    if (vi->requires_grad) {
      vi->ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        T d = ui->values[i] * inv;
        if (nv > eps) d -= s * vi->values[i] / (nv * nv);
        vi->grad[i] += g * d;
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps) {
  int64_t d = x.dim(-1);
  int64_t rows = x.size() / d;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto norms = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
  const T* px = x.data();
  T* py = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = px + r * d;
    T n2 = T(0);
    for (int64_t j = 0; j < d; ++j) n2 += xr[j] * xr[j];
    T n = std::sqrt(n2);
    (*norms)[static_cast<size_t>(r)] = n;
    T inv = T(1) / std::max(n, eps);
    T* yr = py + r * d;
    for (int64_t j = 0; j < d; ++j) yr[j] = xr[j] * inv;
  }
  auto xi = x.impl();
  auto oi = out.impl();
  maybe_record(rg(x), out, [xi, oi, norms, rows, d, eps]() {
    if (oi->grad.empty() || !xi->requires_grad) return;
    xi->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const T* g = oi->grad.data() + r * d;
      const T* y = oi->values.data() + r * d;
      T* dx = xi->grad.data() + r * d;
      T n = (*norms)[static_cast<size_t>(r)];
      if (n > eps) {
        T dot = T(0);
        for (int64_t j = 0; j < d; ++j) dot += g[j] * y[j];
        T inv = T(1) / n;
        for (int64_t j = 0; j < d; ++j) dx[j] += (g[j] - y[j] * dot) * inv;
      } else {
        T inv = T(1) / eps;
        for (int64_t j = 0; j < d; ++j) dx[j] += g[j] * inv;
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T acc = T(0);
  const T* p = a.data();
  for (int64_t i = 0; i < a.size(); ++i) acc += p[i];
  Tensor<T> out = Tensor<T>::scalar(acc);
  auto ai = a.impl();
  auto oi = out.impl();
  maybe_record(rg(a), out, [ai, oi]() {
    if (oi->grad.empty() || !ai->requires_grad) return;
    ai->ensure_grad();
    T g = oi->grad[0];
    for (size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += g;
  });
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return scale(sum_all(a), T(1) / static_cast<T>(a.size()));
}

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& a, int axis) {
  int r = a.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw DimensionError("sum_axis: bad axis");
  int64_t outer = 1, inner = 1, ext = a.dim(axis);
  for (int d = 0; d < axis; ++d) outer *= a.shape()[static_cast<size_t>(d)];
  for (int d = axis + 1; d < r; ++d) inner *= a.shape()[static_cast<size_t>(d)];
  Shape os;
  for (int d = 0; d < r; ++d)
    if (d != axis) os.push_back(a.shape()[static_cast<size_t>(d)]);
  if (os.empty()) os.push_back(1);
  Tensor<T> out = Tensor<T>::zeros(os);
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t e = 0; e < ext; ++e) {
      const T* src = pa + (o * ext + e) * inner;
      T* dst = po + o * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  auto ai = a.impl();
  auto oi = out.impl();
  maybe_record(rg(a), out, [ai, oi, outer, inner, ext]() {
    if (oi->grad.empty() || !ai->requires_grad) return;
    ai->ensure_grad();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t e = 0; e < ext; ++e) {
        const T* g = oi->grad.data() + o * inner;
        T* dst = ai->grad.data() + (o * ext + e) * inner;
        for (int64_t i = 0; i < inner; ++i) dst[i] += g[i];
      }
  });
  return out;
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& a, int axis) {
  int ax = axis < 0 ? axis + a.rank() : axis;
  return scale(sum_axis(a, axis), T(1) / static_cast<T>(a.dim(ax)));
}

template <typename T>
Tensor<T> detach(const Tensor<T>& a) {
  return Tensor<T>::from(a.shape(), a.values());
}

#define GLSCL_T_INST(T)                                                             \
  template class Tensor<T>;                                                         \
  template void backward<T>(Tensor<T>);                                             \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> neg<T>(const Tensor<T>&);                                      \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                 \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                            \
  template Tensor<T> exp_t<T>(const Tensor<T>&);                                    \
  template Tensor<T> log_t<T>(const Tensor<T>&);                                    \
  template Tensor<T> reciprocal<T>(const Tensor<T>&);                               \
  template Tensor<T> clamp<T>(const Tensor<T>&, T, T);                              \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                     \
  template Tensor<T> square<T>(const Tensor<T>&);                                   \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> bmm<T>(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> mul_scalar_t<T>(const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                           \
  template Tensor<T> permute<T>(const Tensor<T>&, const std::vector<int>&);         \
  template Tensor<T> transpose_last2<T>(const Tensor<T>&);                          \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, int);                 \
  template Tensor<T> slice<T>(const Tensor<T>&, int, int64_t, int64_t);             \
  template Tensor<T> index_select<T>(const Tensor<T>&, int,                         \
                                     const std::vector<int64_t>&);                  \
  template Tensor<T> replace_rows<T>(const Tensor<T>&, const std::vector<int64_t>&, \
                                     const Tensor<T>&);                             \
  template Tensor<T> embedding<T>(const Tensor<T>&, const std::vector<int64_t>&);   \
  template Tensor<T> softmax_masked<T>(const Tensor<T>&,                            \
                                       const std::vector<uint8_t>*);                \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&,              \
                                   const Tensor<T>&, T);                            \
  template Tensor<T> cross_entropy_logits<T>(const Tensor<T>&,                      \
                                             const std::vector<int64_t>&);          \
  template Tensor<T> cosine_similarity<T>(const Tensor<T>&, const Tensor<T>&, T);   \
  template Tensor<T> l2_normalize_rows<T>(const Tensor<T>&, T);                     \
  template Tensor<T> sum_all<T>(const Tensor<T>&);                                  \
  template Tensor<T> mean_all<T>(const Tensor<T>&);                                 \
  template Tensor<T> sum_axis<T>(const Tensor<T>&, int);                            \
  template Tensor<T> mean_axis<T>(const Tensor<T>&, int);                           \
  template Tensor<T> detach<T>(const Tensor<T>&);

GLSCL_T_INST(float)
GLSCL_T_INST(double)
#undef GLSCL_T_INST

}  // namespace glscl
