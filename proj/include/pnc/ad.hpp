#pragma once

#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>

#include "pnc/common.hpp"

namespace pnc::ad {

// ---------------------------------------------------------------------------
// Dense f32 tensor with a define-by-run tape. Values are f32; contractions
// and reductions accumulate in f64, and scalar results additionally carry
// their f64 value so finite-difference checks stay meaningful at eps 1e-3.
// ---------------------------------------------------------------------------

struct TensorData {
  std::vector<int64_t> shape;
  std::vector<float> v;
  std::vector<float> g;  // allocated on first gradient contribution
  bool requires_grad = false;
  double scalar64 = 0.0;
  bool has_scalar64 = false;

  int64_t numel() const {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
  }
  void ensure_grad() {
    if (g.empty()) g.assign(v.size(), 0.0f);
  }
  double scalar() const { return has_scalar64 ? scalar64 : static_cast<double>(v.at(0)); }
};

using Tensor = std::shared_ptr<TensorData>;

inline Tensor make_tensor(std::vector<int64_t> shape, bool requires_grad = false) {
  auto t = std::make_shared<TensorData>();
  t->shape = std::move(shape);
  t->v.assign(static_cast<size_t>(t->numel()), 0.0f);
  t->requires_grad = requires_grad;
  return t;
}

inline Tensor constant(std::vector<int64_t> shape, std::vector<float> values) {
  auto t = std::make_shared<TensorData>();
  t->shape = std::move(shape);
  if (static_cast<int64_t>(values.size()) != t->numel()) {
    throw ShapeError("constant: value count does not match shape");
  }
  t->v = std::move(values);
  return t;
}

inline Tensor scalar_constant(double v) {
  auto t = make_tensor({1});
  t->v[0] = static_cast<float>(v);
  t->scalar64 = v;
  t->has_scalar64 = true;
  return t;
}

inline Tensor full(std::vector<int64_t> shape, float v) {
  auto t = make_tensor(std::move(shape));
  std::fill(t->v.begin(), t->v.end(), v);
  return t;
}

inline void fill_normal(const Tensor& t, Rng& rng, double stddev, double mean = 0.0) {
  for (auto& x : t->v) x = static_cast<float>(rng.normal(mean, stddev));
}

inline void fill_uniform(const Tensor& t, Rng& rng, double lo, double hi) {
  for (auto& x : t->v) x = static_cast<float>(lo + (hi - lo) * rng.uniform());
}

inline std::string shape_str(const Tensor& t) {
  std::string s = "(";
  for (size_t i = 0; i < t->shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(t->shape[i]);
  }
  return s + ")";
}

class Tape {
 public:
  void record(std::function<void()> backward) { nodes_.push_back(std::move(backward)); }
  void track(const Tensor& t) { touched_.push_back(t); }

  /// Backpropagate from a scalar root (grad seeded with 1).
  void backward(const Tensor& root) {
    if (root->numel() != 1) {
      throw ValidationError("backward: root must be a scalar, got shape " + shape_str(root));
    }
    root->ensure_grad();
    root->g[0] += 1.0f;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  /// Reset all gradients touched by this tape (enables repeated backward).
  void zero_grads() {
    for (auto& t : touched_) {
      std::fill(t->g.begin(), t->g.end(), 0.0f);
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::function<void()>> nodes_;
  std::vector<Tensor> touched_;
};

namespace detail {

inline Tensor out_like(Tape& tape, std::vector<int64_t> shape,
                       std::initializer_list<Tensor> inputs) {
  bool rg = false;
  for (const auto& t : inputs) rg = rg || t->requires_grad;
  auto out = make_tensor(std::move(shape), rg);
  tape.track(out);
  for (const auto& t : inputs) tape.track(t);
  return out;
}

inline bool wants(const Tensor& t) { return t->requires_grad; }

/// True gradient buffer of out, or nullptr when no gradient ever arrived.
inline const float* grad_in(const Tensor& out) {
  return out->g.empty() ? nullptr : out->g.data();
}

inline std::optional<double> scalar64_of(const Tensor& t) {
  if (t->numel() != 1) return std::nullopt;
  return t->scalar();
}

// C[m x n] += or = A[m x k] * B[k x n], f64 accumulation per output row.
inline void gemm(int64_t m, int64_t k, int64_t n, const float* a, const float* b, float* c,
                 bool accumulate) {
  std::vector<double> buf(static_cast<size_t>(n));
  for (int64_t i = 0; i < m; ++i) {
    if (accumulate) {
      for (int64_t j = 0; j < n; ++j) buf[static_cast<size_t>(j)] = c[i * n + j];
    } else {
      std::fill(buf.begin(), buf.end(), 0.0);
    }
    const float* arow = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const float* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) buf[static_cast<size_t>(j)] += av * brow[j];
    }
    float* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) crow[j] = static_cast<float>(buf[static_cast<size_t>(j)]);
  }
}

inline std::vector<float> transpose(const float* a, int64_t rows, int64_t cols) {
  std::vector<float> t(static_cast<size_t>(rows * cols));
  for (int64_t i = 0; i < rows; ++i) {
    for (int64_t j = 0; j < cols; ++j) t[static_cast<size_t>(j * rows + i)] = a[i * cols + j];
  }
  return t;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and scalar ops.
// ---------------------------------------------------------------------------

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  const bool b_scalar = b->numel() == 1 && a->numel() != 1;
  if (!b_scalar && a->shape != b->shape) {
    throw ShapeError("add: shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
  auto out = detail::out_like(tape, a->shape, {a, b});
  const size_t n = a->v.size();
  if (b_scalar) {
    const float bv = b->v[0];
    for (size_t i = 0; i < n; ++i) out->v[i] = a->v[i] + bv;
  } else {
    for (size_t i = 0; i < n; ++i) out->v[i] = a->v[i] + b->v[i];
  }
  if (auto sa = detail::scalar64_of(a), sb = detail::scalar64_of(b);
      sa && sb && out->numel() == 1) {
    out->scalar64 = *sa + *sb;
    out->has_scalar64 = true;
  }
  tape.record([a, b, out, b_scalar, n] {
    const float* go = detail::grad_in(out);
    if (!go) return;
    if (detail::wants(a)) {
      a->ensure_grad();
      for (size_t i = 0; i < n; ++i) a->g[i] += go[i];
    }
    if (detail::wants(b)) {
      b->ensure_grad();
      if (b_scalar) {
        double s = 0.0;
        for (size_t i = 0; i < n; ++i) s += go[i];
        b->g[0] += static_cast<float>(s);
      } else {
        for (size_t i = 0; i < n; ++i) b->g[i] += go[i];
      }
    }
  });
  return out;
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  const bool b_scalar = b->numel() == 1 && a->numel() != 1;
  if (!b_scalar && a->shape != b->shape) {
    throw ShapeError("sub: shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
  auto out = detail::out_like(tape, a->shape, {a, b});
  const size_t n = a->v.size();
  for (size_t i = 0; i < n; ++i) out->v[i] = a->v[i] - (b_scalar ? b->v[0] : b->v[i]);
  if (auto sa = detail::scalar64_of(a), sb = detail::scalar64_of(b);
      sa && sb && out->numel() == 1) {
    out->scalar64 = *sa - *sb;
    out->has_scalar64 = true;
  }
  tape.record([a, b, out, b_scalar, n] {
    const float* go = detail::grad_in(out);
    if (!go) return;
    if (detail::wants(a)) {
      a->ensure_grad();
      for (size_t i = 0; i < n; ++i) a->g[i] += go[i];
    }
    if (detail::wants(b)) {
      b->ensure_grad();
      if (b_scalar) {
        double s = 0.0;
        for (size_t i = 0; i < n; ++i) s += go[i];
        b->g[0] -= static_cast<float>(s);
      } else {
        for (size_t i = 0; i < n; ++i) b->g[i] -= go[i];
      }
    }
  });
  return out;
}

/// Elementwise product; either side may be a scalar (1-element) tensor.
inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a->numel() == 1 && b->numel() != 1) return mul(tape, b, a);
  const bool b_scalar = b->numel() == 1 && a->numel() != 1;
  if (!b_scalar && a->shape != b->shape) {
    throw ShapeError("mul: shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
  auto out = detail::out_like(tape, a->shape, {a, b});
  const size_t n = a->v.size();
  for (size_t i = 0; i < n; ++i) out->v[i] = a->v[i] * (b_scalar ? b->v[0] : b->v[i]);
  if (auto sa = detail::scalar64_of(a), sb = detail::scalar64_of(b);
      sa && sb && out->numel() == 1) {
    out->scalar64 = *sa * *sb;
    out->has_scalar64 = true;
  }
  tape.record([a, b, out, b_scalar, n] {
    const float* go = detail::grad_in(out);
    if (!go) return;
    if (detail::wants(a)) {
      a->ensure_grad();
      for (size_t i = 0; i < n; ++i) a->g[i] += go[i] * (b_scalar ? b->v[0] : b->v[i]);
    }
    if (detail::wants(b)) {
      b->ensure_grad();
      if (b_scalar) {
        double s = 0.0;
        for (size_t i = 0; i < n; ++i) s += static_cast<double>(go[i]) * a->v[i];
        b->g[0] += static_cast<float>(s);
      } else {
        for (size_t i = 0; i < n; ++i) b->g[i] += go[i] * a->v[i];
      }
    }
  });
  return out;
}

inline Tensor scale(Tape& tape, const Tensor& a, double c) {
  auto out = detail::out_like(tape, a->shape, {a});
  for (size_t i = 0; i < a->v.size(); ++i) {
    out->v[i] = static_cast<float>(c * static_cast<double>(a->v[i]));
  }
  if (auto sa = detail::scalar64_of(a); sa && out->numel() == 1) {
    out->scalar64 = c * *sa;
    out->has_scalar64 = true;
  }
  tape.record([a, out, c] {
    const float* go = detail::grad_in(out);
    if (!go || !detail::wants(a)) return;
    a->ensure_grad();
    for (size_t i = 0; i < a->g.size(); ++i) {
      a->g[i] += static_cast<float>(c * static_cast<double>(go[i]));
    }
  });
  return out;
}

inline Tensor add_scalar(Tape& tape, const Tensor& a, double c) {
  auto out = detail::out_like(tape, a->shape, {a});
  for (size_t i = 0; i < a->v.size(); ++i) {
    out->v[i] = static_cast<float>(static_cast<double>(a->v[i]) + c);
  }
  if (auto sa = detail::scalar64_of(a); sa && out->numel() == 1) {
    out->scalar64 = *sa + c;
    out->has_scalar64 = true;
  }
  tape.record([a, out] {
    const float* go = detail::grad_in(out);
    if (!go || !detail::wants(a)) return;
    a->ensure_grad();
    for (size_t i = 0; i < a->g.size(); ++i) a->g[i] += go[i];
  });
  return out;
}

inline Tensor neg(Tape& tape, const Tensor& a) { return scale(tape, a, -1.0); }

namespace detail {

template <typename Fwd, typename Bwd>
Tensor unary_op(Tape& tape, const Tensor& a, Fwd fwd, Bwd dydx_from_xy, const char* /*name*/,
                std::optional<std::function<double(double)>> fwd64 = std::nullopt) {
  auto out = out_like(tape, a->shape, {a});
  for (size_t i = 0; i < a->v.size(); ++i) out->v[i] = fwd(a->v[i]);
  if (fwd64) {
    if (auto sa = scalar64_of(a); sa && out->numel() == 1) {
      out->scalar64 = (*fwd64)(*sa);
      out->has_scalar64 = true;
    }
  }
  tape.record([a, out, dydx_from_xy] {
    const float* go = grad_in(out);
    if (!go || !wants(a)) return;
    a->ensure_grad();
    for (size_t i = 0; i < a->g.size(); ++i) {
      a->g[i] += go[i] * dydx_from_xy(a->v[i], out->v[i]);
    }
  });
  return out;
}

}  // namespace detail

inline Tensor relu(Tape& tape, const Tensor& a) {
  return detail::unary_op(
      tape, a, [](float x) { return x > 0.0f ? x : 0.0f; },
      [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; }, "relu");
}

inline Tensor leaky_relu(Tape& tape, const Tensor& a, float alpha = 0.2f) {
  return detail::unary_op(
      tape, a, [alpha](float x) { return x > 0.0f ? x : alpha * x; },
      [alpha](float x, float) { return x > 0.0f ? 1.0f : alpha; }, "leaky_relu");
}

inline Tensor sigmoid(Tape& tape, const Tensor& a) {
  return detail::unary_op(
      tape, a, [](float x) { return static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(x)))); },
      [](float, float y) { return y * (1.0f - y); }, "sigmoid",
      std::function<double(double)>([](double x) { return 1.0 / (1.0 + std::exp(-x)); }));
}

inline Tensor exp(Tape& tape, const Tensor& a) {
  return detail::unary_op(
      tape, a, [](float x) { return std::exp(x); }, [](float, float y) { return y; }, "exp",
      std::function<double(double)>([](double x) { return std::exp(x); }));
}

inline Tensor log(Tape& tape, const Tensor& a) {
  return detail::unary_op(
      tape, a, [](float x) { return std::log(x); }, [](float x, float) { return 1.0f / x; },
      "log", std::function<double(double)>([](double x) { return std::log(x); }));
}

inline Tensor abs(Tape& tape, const Tensor& a) {
  return detail::unary_op(
      tape, a, [](float x) { return std::fabs(x); },
      [](float x, float) { return x > 0.0f ? 1.0f : (x < 0.0f ? -1.0f : 0.0f); }, "abs",
      std::function<double(double)>([](double x) { return std::fabs(x); }));
}

inline Tensor sqrt(Tape& tape, const Tensor& a) {
  return detail::unary_op(
      tape, a, [](float x) { return std::sqrt(x); },
      [](float, float y) { return y > 0.0f ? 0.5f / y : 0.0f; }, "sqrt",
      std::function<double(double)>([](double x) { return std::sqrt(x); }));
}

inline Tensor clamp(Tape& tape, const Tensor& a, float lo, float hi) {
  return detail::unary_op(
      tape, a, [lo, hi](float x) { return std::min(hi, std::max(lo, x)); },
      [lo, hi](float x, float) { return (x > lo && x < hi) ? 1.0f : 0.0f; }, "clamp",
      std::function<double(double)>([lo, hi](double x) {
        return std::min(static_cast<double>(hi), std::max(static_cast<double>(lo), x));
      }));
}

/// Values pass through; gradients stop here.
inline Tensor stop_gradient(Tape& tape, const Tensor& a) {
  auto out = make_tensor(a->shape, false);
  out->v = a->v;
  out->scalar64 = a->scalar64;
  out->has_scalar64 = a->has_scalar64;
  tape.track(out);
  return out;
}

inline Tensor dropout(Tape& tape, const Tensor& a, double p, Rng& rng, bool training) {
  if (!training || p <= 0.0) return a;
  if (p >= 1.0) throw ValidationError("dropout: p must be < 1");
  auto out = detail::out_like(tape, a->shape, {a});
  auto mask = std::make_shared<std::vector<float>>(a->v.size());
  const float keep_scale = static_cast<float>(1.0 / (1.0 - p));
  for (size_t i = 0; i < a->v.size(); ++i) {
    (*mask)[i] = rng.uniform() >= p ? keep_scale : 0.0f;
    out->v[i] = a->v[i] * (*mask)[i];
  }
  tape.record([a, out, mask] {
    const float* go = detail::grad_in(out);
    if (!go || !detail::wants(a)) return;
    a->ensure_grad();
    for (size_t i = 0; i < a->g.size(); ++i) a->g[i] += go[i] * (*mask)[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops.
// ---------------------------------------------------------------------------

inline Tensor reshape(Tape& tape, const Tensor& a, std::vector<int64_t> shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  if (n != a->numel()) {
    throw ShapeError("reshape: cannot reshape " + shape_str(a) + " to requested size " +
                     std::to_string(n));
  }
  auto out = detail::out_like(tape, std::move(shape), {a});
  out->v = a->v;
  tape.record([a, out] {
    const float* go = detail::grad_in(out);
    if (!go || !detail::wants(a)) return;
    a->ensure_grad();
    for (size_t i = 0; i < a->g.size(); ++i) a->g[i] += go[i];
  });
  return out;
}

inline Tensor concat(Tape& tape, const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ValidationError("concat: no inputs");
  const auto& s0 = parts[0]->shape;
  const int rank = static_cast<int>(s0.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("concat: axis out of range");
  int64_t axis_total = 0;
  for (const auto& p : parts) {
    if (static_cast<int>(p->shape.size()) != rank) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < rank; ++d) {
      if (d != axis && p->shape[static_cast<size_t>(d)] != s0[static_cast<size_t>(d)]) {
        throw ShapeError("concat: shape mismatch off the concat axis");
      }
    }
    axis_total += p->shape[static_cast<size_t>(axis)];
  }
  std::vector<int64_t> out_shape = s0;
  out_shape[static_cast<size_t>(axis)] = axis_total;

  bool rg = false;
  for (const auto& p : parts) rg = rg || p->requires_grad;
  auto out = make_tensor(out_shape, rg);
  tape.track(out);
  for (const auto& p : parts) tape.track(p);

  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s0[static_cast<size_t>(d)];
  for (int d = axis + 1; d < rank; ++d) inner *= s0[static_cast<size_t>(d)];

  int64_t offset = 0;  // in axis units
  for (const auto& p : parts) {
    const int64_t pa = p->shape[static_cast<size_t>(axis)];
    for (int64_t o = 0; o < outer; ++o) {
      const float* src = p->v.data() + o * pa * inner;
      float* dst = out->v.data() + (o * axis_total + offset) * inner;
      std::copy(src, src + pa * inner, dst);
    }
    offset += pa;
  }
  tape.record([parts, out, outer, inner, axis_total, axis] {
    const float* go = detail::grad_in(out);
    if (!go) return;
    int64_t offset = 0;
    for (const auto& p : parts) {
      const int64_t pa = p->shape[static_cast<size_t>(axis)];
      if (detail::wants(p)) {
        p->ensure_grad();
        for (int64_t o = 0; o < outer; ++o) {
          const float* src = go + (o * axis_total + offset) * inner;
          float* dst = p->g.data() + o * pa * inner;
          for (int64_t i = 0; i < pa * inner; ++i) dst[i] += src[i];
        }
      }
      offset += pa;
    }
  });
  return out;
}

inline Tensor slice(Tape& tape, const Tensor& a, int axis, int64_t start, int64_t len) {
  const int rank = static_cast<int>(a->shape.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("slice: axis out of range");
  const int64_t dim = a->shape[static_cast<size_t>(axis)];
  if (start < 0 || len < 1 || start + len > dim) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                     ") out of bounds for axis of size " + std::to_string(dim));
  }
  std::vector<int64_t> out_shape = a->shape;
  out_shape[static_cast<size_t>(axis)] = len;
  auto out = detail::out_like(tape, out_shape, {a});
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= a->shape[static_cast<size_t>(d)];
  for (int d = axis + 1; d < rank; ++d) inner *= a->shape[static_cast<size_t>(d)];
  for (int64_t o = 0; o < outer; ++o) {
    const float* src = a->v.data() + (o * dim + start) * inner;
    std::copy(src, src + len * inner, out->v.data() + o * len * inner);
  }
  tape.record([a, out, outer, inner, dim, start, len] {
    const float* go = detail::grad_in(out);
    if (!go || !detail::wants(a)) return;
    a->ensure_grad();
    for (int64_t o = 0; o < outer; ++o) {
      const float* src = go + o * len * inner;
      float* dst = a->g.data() + (o * dim + start) * inner;
      for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
    }
  });
  return out;
}

/// Fill `shape` with the single value of a (backward sums).
inline Tensor broadcast_scalar(Tape& tape, const Tensor& a, std::vector<int64_t> shape) {
  if (a->numel() != 1) throw ShapeError("broadcast_scalar: input must be a scalar");
  auto out = detail::out_like(tape, std::move(shape), {a});
  std::fill(out->v.begin(), out->v.end(), a->v[0]);
  tape.record([a, out] {
    const float* go = detail::grad_in(out);
    if (!go || !detail::wants(a)) return;
    a->ensure_grad();
    double s = 0.0;
    for (size_t i = 0; i < out->v.size(); ++i) s += go[i];
    a->g[0] += static_cast<float>(s);
  });
  return out;
}

/// (B,C,H,W) -> (B,H,W,C); backward is the inverse permutation.
inline Tensor nchw_to_nhwc(Tape& tape, const Tensor& a) {
  if (a->shape.size() != 4) throw ShapeError("nchw_to_nhwc: expected rank-4, got " + shape_str(a));
  const int64_t b = a->shape[0], c = a->shape[1], h = a->shape[2], w = a->shape[3];
  auto out = detail::out_like(tape, {b, h, w, c}, {a});
  for (int64_t bi = 0; bi < b; ++bi) {
    for (int64_t ci = 0; ci < c; ++ci) {
      const float* src = a->v.data() + (bi * c + ci) * h * w;
      for (int64_t p = 0; p < h * w; ++p) out->v[static_cast<size_t>(((bi * h * w) + p) * c + ci)] = src[p];
    }
  }
  tape.record([a, out, b, c, h, w] {
    const float* go = detail::grad_in(out);
    if (!go || !detail::wants(a)) return;
    a->ensure_grad();
    for (int64_t bi = 0; bi < b; ++bi) {
      for (int64_t ci = 0; ci < c; ++ci) {
        float* dst = a->g.data() + (bi * c + ci) * h * w;
        for (int64_t p = 0; p < h * w; ++p) dst[p] += go[((bi * h * w) + p) * c + ci];
      }
    }
  });
  return out;
}

/// (B,H,W,C) -> (B,C,H,W).
inline Tensor nhwc_to_nchw(Tape& tape, const Tensor& a) {
  if (a->shape.size() != 4) throw ShapeError("nhwc_to_nchw: expected rank-4, got " + shape_str(a));
  const int64_t b = a->shape[0], h = a->shape[1], w = a->shape[2], c = a->shape[3];
  auto out = detail::out_like(tape, {b, c, h, w}, {a});
  for (int64_t bi = 0; bi < b; ++bi) {
    for (int64_t ci = 0; ci < c; ++ci) {
      float* dst = out->v.data() + (bi * c + ci) * h * w;
      for (int64_t p = 0; p < h * w; ++p) dst[p] = a->v[static_cast<size_t>(((bi * h * w) + p) * c + ci)];
    }
  }
  tape.record([a, out, b, c, h, w] {
    const float* go = detail::grad_in(out);
    if (!go || !detail::wants(a)) return;
    a->ensure_grad();
    for (int64_t bi = 0; bi < b; ++bi) {
      for (int64_t ci = 0; ci < c; ++ci) {
        const float* src = go + (bi * c + ci) * h * w;
        for (int64_t p = 0; p < h * w; ++p) a->g[static_cast<size_t>(((bi * h * w) + p) * c + ci)] += src[p];
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// matmul with optional transposes.
// ---------------------------------------------------------------------------

inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b, bool transpose_a = false,
                     bool transpose_b = false) {
  if (a->shape.size() != 2 || b->shape.size() != 2) {
    throw ShapeError("matmul: expects rank-2 tensors, got " + shape_str(a) + " and " +
                     shape_str(b));
  }
  const int64_t m = transpose_a ? a->shape[1] : a->shape[0];
  const int64_t k = transpose_a ? a->shape[0] : a->shape[1];
  const int64_t kb = transpose_b ? b->shape[1] : b->shape[0];
  const int64_t n = transpose_b ? b->shape[0] : b->shape[1];
  if (k != kb) {
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a) +
                     (transpose_a ? "^T" : "") + " x " + shape_str(b) + (transpose_b ? "^T" : ""));
  }
  auto out = detail::out_like(tape, {m, n}, {a, b});

  const std::vector<float> at = transpose_a ? detail::transpose(a->v.data(), a->shape[0], a->shape[1])
                                            : std::vector<float>();
  const std::vector<float> bt = transpose_b ? detail::transpose(b->v.data(), b->shape[0], b->shape[1])
                                            : std::vector<float>();
  const float* ap = transpose_a ? at.data() : a->v.data();
  const float* bp = transpose_b ? bt.data() : b->v.data();
  detail::gemm(m, k, n, ap, bp, out->v.data(), false);

  tape.record([a, b, out, m, k, n, transpose_a, transpose_b] {
    const float* go = detail::grad_in(out);
    if (!go) return;
    // effective row-major operands
    const std::vector<float> at = transpose_a
                                      ? detail::transpose(a->v.data(), a->shape[0], a->shape[1])
                                      : std::vector<float>();
    const std::vector<float> bt = transpose_b
                                      ? detail::transpose(b->v.data(), b->shape[0], b->shape[1])
                                      : std::vector<float>();
    const float* ap = transpose_a ? at.data() : a->v.data();
    const float* bp = transpose_b ? bt.data() : b->v.data();
    if (detail::wants(a)) {
      a->ensure_grad();
      // dA' = dC * B'^T  (m x k)
      std::vector<float> bpt = detail::transpose(bp, k, n);
      std::vector<float> da(static_cast<size_t>(m * k), 0.0f);
      detail::gemm(m, n, k, go, bpt.data(), da.data(), false);
      if (transpose_a) {
        for (int64_t i = 0; i < m; ++i) {
          for (int64_t j = 0; j < k; ++j) a->g[static_cast<size_t>(j * m + i)] += da[static_cast<size_t>(i * k + j)];
        }
      } else {
        for (size_t i = 0; i < da.size(); ++i) a->g[i] += da[i];
      }
    }
    if (detail::wants(b)) {
      b->ensure_grad();
      // dB' = A'^T * dC  (k x n)
      std::vector<float> apt = detail::transpose(ap, m, k);
      std::vector<float> db(static_cast<size_t>(k * n), 0.0f);
      detail::gemm(k, m, n, apt.data(), go, db.data(), false);
      if (transpose_b) {
        for (int64_t i = 0; i < k; ++i) {
          for (int64_t j = 0; j < n; ++j) b->g[static_cast<size_t>(j * k + i)] += db[static_cast<size_t>(i * n + j)];
        }
      } else {
        for (size_t i = 0; i < db.size(); ++i) b->g[i] += db[i];
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Convolutions. conv2d: x (B,Ci,H,W), w (Co,Ci,kh,kw). transposed_conv2d:
// x (B,Ci,H,W), w (Ci,Co,kh,kw), out size (H-1)*stride - 2*pad + k.
// conv3d: x (Ci,T,H,W), w (Co,Ci,kt,kh,kw), per-axis stride/pad.
// ---------------------------------------------------------------------------

inline Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& bias,
                     int stride = 1, int pad = 0) {
  if (x->shape.size() != 4 || w->shape.size() != 4) {
    throw ShapeError("conv2d: expects x (B,C,H,W) and w (Co,Ci,kh,kw), got " + shape_str(x) +
                     " and " + shape_str(w));
  }
  const int64_t B = x->shape[0], Ci = x->shape[1], H = x->shape[2], W = x->shape[3];
  const int64_t Co = w->shape[0], kh = w->shape[2], kw = w->shape[3];
  if (w->shape[1] != Ci) {
    throw ShapeError("conv2d: channel mismatch, x " + shape_str(x) + " vs w " + shape_str(w));
  }
  if (bias && (bias->shape.size() != 1 || bias->shape[0] != Co)) {
    throw ShapeError("conv2d: bias must be (Co)");
  }
  const int64_t OH = (H + 2 * pad - kh) / stride + 1;
  const int64_t OW = (W + 2 * pad - kw) / stride + 1;
  if (OH < 1 || OW < 1) throw ShapeError("conv2d: kernel larger than padded input");
  auto out = bias ? detail::out_like(tape, {B, Co, OH, OW}, {x, w, bias})
                  : detail::out_like(tape, {B, Co, OH, OW}, {x, w});

  std::vector<double> buf(static_cast<size_t>(OH * OW));
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t co = 0; co < Co; ++co) {
      std::fill(buf.begin(), buf.end(), bias ? static_cast<double>(bias->v[static_cast<size_t>(co)]) : 0.0);
      for (int64_t ci = 0; ci < Ci; ++ci) {
        const float* xp = x->v.data() + (b * Ci + ci) * H * W;
        for (int64_t fh = 0; fh < kh; ++fh) {
          for (int64_t fw = 0; fw < kw; ++fw) {
            const double wv = w->v[static_cast<size_t>(((co * Ci + ci) * kh + fh) * kw + fw)];
            for (int64_t oh = 0; oh < OH; ++oh) {
              const int64_t ih = oh * stride - pad + fh;
              if (ih < 0 || ih >= H) continue;
              double* brow = buf.data() + oh * OW;
              const float* xrow = xp + ih * W;
              for (int64_t ow = 0; ow < OW; ++ow) {
                const int64_t iw = ow * stride - pad + fw;
                if (iw < 0 || iw >= W) continue;
                brow[ow] += wv * xrow[iw];
              }
            }
          }
        }
      }
      float* op = out->v.data() + (b * Co + co) * OH * OW;
      for (int64_t i = 0; i < OH * OW; ++i) op[i] = static_cast<float>(buf[static_cast<size_t>(i)]);
    }
  }

  tape.record([x, w, bias, out, B, Ci, H, W, Co, kh, kw, OH, OW, stride, pad] {
    const float* go = detail::grad_in(out);
    if (!go) return;
    if (detail::wants(x)) {
      x->ensure_grad();
      std::vector<double> buf(static_cast<size_t>(H * W));
      for (int64_t b = 0; b < B; ++b) {
        for (int64_t ci = 0; ci < Ci; ++ci) {
          std::fill(buf.begin(), buf.end(), 0.0);
          for (int64_t co = 0; co < Co; ++co) {
            const float* gp = go + (b * Co + co) * OH * OW;
            for (int64_t fh = 0; fh < kh; ++fh) {
              for (int64_t fw = 0; fw < kw; ++fw) {
                const double wv = w->v[static_cast<size_t>(((co * Ci + ci) * kh + fh) * kw + fw)];
                for (int64_t oh = 0; oh < OH; ++oh) {
                  const int64_t ih = oh * stride - pad + fh;
                  if (ih < 0 || ih >= H) continue;
                  const float* grow = gp + oh * OW;
                  double* brow = buf.data() + ih * W;
                  for (int64_t ow = 0; ow < OW; ++ow) {
                    const int64_t iw = ow * stride - pad + fw;
                    if (iw < 0 || iw >= W) continue;
                    brow[iw] += wv * grow[ow];
                  }
                }
              }
            }
          }
          float* dst = x->g.data() + (b * Ci + ci) * H * W;
          for (int64_t i = 0; i < H * W; ++i) dst[i] += static_cast<float>(buf[static_cast<size_t>(i)]);
        }
      }
    }
    if (detail::wants(w)) {
      w->ensure_grad();
      for (int64_t co = 0; co < Co; ++co) {
        for (int64_t ci = 0; ci < Ci; ++ci) {
          for (int64_t fh = 0; fh < kh; ++fh) {
            for (int64_t fw = 0; fw < kw; ++fw) {
              double acc = 0.0;
              for (int64_t b = 0; b < B; ++b) {
                const float* gp = go + (b * Co + co) * OH * OW;
                const float* xp = x->v.data() + (b * Ci + ci) * H * W;
                for (int64_t oh = 0; oh < OH; ++oh) {
                  const int64_t ih = oh * stride - pad + fh;
                  if (ih < 0 || ih >= H) continue;
                  const float* grow = gp + oh * OW;
                  const float* xrow = xp + ih * W;
                  for (int64_t ow = 0; ow < OW; ++ow) {
                    const int64_t iw = ow * stride - pad + fw;
                    if (iw < 0 || iw >= W) continue;
                    acc += static_cast<double>(grow[ow]) * xrow[iw];
                  }
                }
              }
              w->g[static_cast<size_t>(((co * Ci + ci) * kh + fh) * kw + fw)] +=
                  static_cast<float>(acc);
            }
          }
        }
      }
    }
    if (bias && detail::wants(bias)) {
      bias->ensure_grad();
      for (int64_t co = 0; co < Co; ++co) {
        double acc = 0.0;
        for (int64_t b = 0; b < B; ++b) {
          const float* gp = go + (b * Co + co) * OH * OW;
          for (int64_t i = 0; i < OH * OW; ++i) acc += gp[i];
        }
        bias->g[static_cast<size_t>(co)] += static_cast<float>(acc);
      }
    }
  });
  return out;
}

inline Tensor transposed_conv2d(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& bias,
                                int stride = 2, int pad = 1) {
  if (x->shape.size() != 4 || w->shape.size() != 4) {
    throw ShapeError("transposed_conv2d: expects x (B,Ci,H,W) and w (Ci,Co,kh,kw)");
  }
  const int64_t B = x->shape[0], Ci = x->shape[1], H = x->shape[2], W = x->shape[3];
  const int64_t Co = w->shape[1], kh = w->shape[2], kw = w->shape[3];
  if (w->shape[0] != Ci) {
    throw ShapeError("transposed_conv2d: channel mismatch, x " + shape_str(x) + " vs w " +
                     shape_str(w));
  }
  const int64_t OH = (H - 1) * stride - 2 * pad + kh;
  const int64_t OW = (W - 1) * stride - 2 * pad + kw;
  if (OH < 1 || OW < 1) throw ShapeError("transposed_conv2d: empty output");
  auto out = bias ? detail::out_like(tape, {B, Co, OH, OW}, {x, w, bias})
                  : detail::out_like(tape, {B, Co, OH, OW}, {x, w});

  std::vector<double> buf(static_cast<size_t>(OH * OW));
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t co = 0; co < Co; ++co) {
      std::fill(buf.begin(), buf.end(), bias ? static_cast<double>(bias->v[static_cast<size_t>(co)]) : 0.0);
      for (int64_t ci = 0; ci < Ci; ++ci) {
        const float* xp = x->v.data() + (b * Ci + ci) * H * W;
        for (int64_t fh = 0; fh < kh; ++fh) {
          for (int64_t fw = 0; fw < kw; ++fw) {
            const double wv = w->v[static_cast<size_t>(((ci * Co + co) * kh + fh) * kw + fw)];
            for (int64_t ih = 0; ih < H; ++ih) {
              const int64_t oh = ih * stride - pad + fh;
              if (oh < 0 || oh >= OH) continue;
              double* brow = buf.data() + oh * OW;
              const float* xrow = xp + ih * W;
              for (int64_t iw = 0; iw < W; ++iw) {
                const int64_t ow = iw * stride - pad + fw;
                if (ow < 0 || ow >= OW) continue;
                brow[ow] += wv * xrow[iw];
              }
            }
          }
        }
      }
      float* op = out->v.data() + (b * Co + co) * OH * OW;
      for (int64_t i = 0; i < OH * OW; ++i) op[i] = static_cast<float>(buf[static_cast<size_t>(i)]);
    }
  }

  tape.record([x, w, bias, out, B, Ci, H, W, Co, kh, kw, OH, OW, stride, pad] {
    const float* go = detail::grad_in(out);
    if (!go) return;
    if (detail::wants(x)) {
      x->ensure_grad();
      std::vector<double> buf(static_cast<size_t>(H * W));
      for (int64_t b = 0; b < B; ++b) {
        for (int64_t ci = 0; ci < Ci; ++ci) {
          std::fill(buf.begin(), buf.end(), 0.0);
          for (int64_t co = 0; co < Co; ++co) {
            const float* gp = go + (b * Co + co) * OH * OW;
            for (int64_t fh = 0; fh < kh; ++fh) {
              for (int64_t fw = 0; fw < kw; ++fw) {
                const double wv = w->v[static_cast<size_t>(((ci * Co + co) * kh + fh) * kw + fw)];
                for (int64_t ih = 0; ih < H; ++ih) {
                  const int64_t oh = ih * stride - pad + fh;
                  if (oh < 0 || oh >= OH) continue;
                  const float* grow = gp + oh * OW;
                  double* brow = buf.data() + ih * W;
                  for (int64_t iw = 0; iw < W; ++iw) {
                    const int64_t ow = iw * stride - pad + fw;
                    if (ow < 0 || ow >= OW) continue;
                    brow[iw] += wv * grow[ow];
                  }
                }
              }
            }
          }
          float* dst = x->g.data() + (b * Ci + ci) * H * W;
          for (int64_t i = 0; i < H * W; ++i) dst[i] += static_cast<float>(buf[static_cast<size_t>(i)]);
        }
      }
    }
    if (detail::wants(w)) {
      w->ensure_grad();
      for (int64_t ci = 0; ci < Ci; ++ci) {
        for (int64_t co = 0; co < Co; ++co) {
          for (int64_t fh = 0; fh < kh; ++fh) {
            for (int64_t fw = 0; fw < kw; ++fw) {
              double acc = 0.0;
              for (int64_t b = 0; b < B; ++b) {
                const float* gp = go + (b * Co + co) * OH * OW;
                const float* xp = x->v.data() + (b * Ci + ci) * H * W;
                for (int64_t ih = 0; ih < H; ++ih) {
                  const int64_t oh = ih * stride - pad + fh;
                  if (oh < 0 || oh >= OH) continue;
                  const float* grow = gp + oh * OW;
                  const float* xrow = xp + ih * W;
                  for (int64_t iw = 0; iw < W; ++iw) {
                    const int64_t ow = iw * stride - pad + fw;
                    if (ow < 0 || ow >= OW) continue;
                    acc += static_cast<double>(grow[ow]) * xrow[iw];
                  }
                }
              }
              w->g[static_cast<size_t>(((ci * Co + co) * kh + fh) * kw + fw)] +=
                  static_cast<float>(acc);
            }
          }
        }
      }
    }
    if (bias && detail::wants(bias)) {
      bias->ensure_grad();
      for (int64_t co = 0; co < Co; ++co) {
        double acc = 0.0;
        for (int64_t b = 0; b < B; ++b) {
          const float* gp = go + (b * Co + co) * OH * OW;
          for (int64_t i = 0; i < OH * OW; ++i) acc += gp[i];
        }
        bias->g[static_cast<size_t>(co)] += static_cast<float>(acc);
      }
    }
  });
  return out;
}

struct Conv3dSpec {
  int st = 1, sh = 1, sw = 1;  // strides (time, height, width)
  int pt = 0, ph = 0, pw = 0;  // zero padding
};

inline Tensor conv3d(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& bias,
                     const Conv3dSpec& sp) {
  if (x->shape.size() != 4 || w->shape.size() != 5) {
    throw ShapeError("conv3d: expects x (Ci,T,H,W) and w (Co,Ci,kt,kh,kw), got " + shape_str(x) +
                     " and " + shape_str(w));
  }
  const int64_t Ci = x->shape[0], T = x->shape[1], H = x->shape[2], W = x->shape[3];
  const int64_t Co = w->shape[0], kt = w->shape[2], kh = w->shape[3], kw = w->shape[4];
  if (w->shape[1] != Ci) throw ShapeError("conv3d: channel mismatch");
  const int64_t OT = (T + 2 * sp.pt - kt) / sp.st + 1;
  const int64_t OH = (H + 2 * sp.ph - kh) / sp.sh + 1;
  const int64_t OW = (W + 2 * sp.pw - kw) / sp.sw + 1;
  if (OT < 1 || OH < 1 || OW < 1) throw ShapeError("conv3d: kernel larger than padded input");
  auto out = bias ? detail::out_like(tape, {Co, OT, OH, OW}, {x, w, bias})
                  : detail::out_like(tape, {Co, OT, OH, OW}, {x, w});

  std::vector<double> buf(static_cast<size_t>(OT * OH * OW));
  for (int64_t co = 0; co < Co; ++co) {
    std::fill(buf.begin(), buf.end(), bias ? static_cast<double>(bias->v[static_cast<size_t>(co)]) : 0.0);
    for (int64_t ci = 0; ci < Ci; ++ci) {
      const float* xp = x->v.data() + ci * T * H * W;
      for (int64_t ft = 0; ft < kt; ++ft) {
        for (int64_t fh = 0; fh < kh; ++fh) {
          for (int64_t fw = 0; fw < kw; ++fw) {
            const double wv =
                w->v[static_cast<size_t>((((co * Ci + ci) * kt + ft) * kh + fh) * kw + fw)];
            for (int64_t ot = 0; ot < OT; ++ot) {
              const int64_t it = ot * sp.st - sp.pt + ft;
              if (it < 0 || it >= T) continue;
              for (int64_t oh = 0; oh < OH; ++oh) {
                const int64_t ih = oh * sp.sh - sp.ph + fh;
                if (ih < 0 || ih >= H) continue;
                double* brow = buf.data() + (ot * OH + oh) * OW;
                const float* xrow = xp + (it * H + ih) * W;
                for (int64_t ow = 0; ow < OW; ++ow) {
                  const int64_t iw = ow * sp.sw - sp.pw + fw;
                  if (iw < 0 || iw >= W) continue;
                  brow[ow] += wv * xrow[iw];
                }
              }
            }
          }
        }
      }
    }
    float* op = out->v.data() + co * OT * OH * OW;
    for (int64_t i = 0; i < OT * OH * OW; ++i) op[i] = static_cast<float>(buf[static_cast<size_t>(i)]);
  }

  tape.record([x, w, bias, out, Ci, T, H, W, Co, kt, kh, kw, OT, OH, OW, sp] {
    const float* go = detail::grad_in(out);
    if (!go) return;
    if (detail::wants(x)) {
      x->ensure_grad();
      std::vector<double> buf(static_cast<size_t>(T * H * W));
      for (int64_t ci = 0; ci < Ci; ++ci) {
        std::fill(buf.begin(), buf.end(), 0.0);
        for (int64_t co = 0; co < Co; ++co) {
          const float* gp = go + co * OT * OH * OW;
          for (int64_t ft = 0; ft < kt; ++ft) {
            for (int64_t fh = 0; fh < kh; ++fh) {
              for (int64_t fw = 0; fw < kw; ++fw) {
                const double wv =
                    w->v[static_cast<size_t>((((co * Ci + ci) * kt + ft) * kh + fh) * kw + fw)];
                for (int64_t ot = 0; ot < OT; ++ot) {
                  const int64_t it = ot * sp.st - sp.pt + ft;
                  if (it < 0 || it >= T) continue;
                  for (int64_t oh = 0; oh < OH; ++oh) {
                    const int64_t ih = oh * sp.sh - sp.ph + fh;
                    if (ih < 0 || ih >= H) continue;
                    const float* grow = gp + (ot * OH + oh) * OW;
                    double* brow = buf.data() + (it * H + ih) * W;
                    for (int64_t ow = 0; ow < OW; ++ow) {
                      const int64_t iw = ow * sp.sw - sp.pw + fw;
                      if (iw < 0 || iw >= W) continue;
                      brow[iw] += wv * grow[ow];
                    }
                  }
                }
              }
            }
          }
        }
        float* dst = x->g.data() + ci * T * H * W;
        for (int64_t i = 0; i < T * H * W; ++i) dst[i] += static_cast<float>(buf[static_cast<size_t>(i)]);
      }
    }
    if (detail::wants(w)) {
      w->ensure_grad();
      for (int64_t co = 0; co < Co; ++co) {
        const float* gp = go + co * OT * OH * OW;
        for (int64_t ci = 0; ci < Ci; ++ci) {
          const float* xp = x->v.data() + ci * T * H * W;
          for (int64_t ft = 0; ft < kt; ++ft) {
            for (int64_t fh = 0; fh < kh; ++fh) {
              for (int64_t fw = 0; fw < kw; ++fw) {
                double acc = 0.0;
                for (int64_t ot = 0; ot < OT; ++ot) {
                  const int64_t it = ot * sp.st - sp.pt + ft;
                  if (it < 0 || it >= T) continue;
                  for (int64_t oh = 0; oh < OH; ++oh) {
                    const int64_t ih = oh * sp.sh - sp.ph + fh;
                    if (ih < 0 || ih >= H) continue;
                    const float* grow = gp + (ot * OH + oh) * OW;
                    const float* xrow = xp + (it * H + ih) * W;
                    for (int64_t ow = 0; ow < OW; ++ow) {
                      const int64_t iw = ow * sp.sw - sp.pw + fw;
                      if (iw < 0 || iw >= W) continue;
                      acc += static_cast<double>(grow[ow]) * xrow[iw];
                    }
                  }
                }
                w->g[static_cast<size_t>((((co * Ci + ci) * kt + ft) * kh + fh) * kw + fw)] +=
                    static_cast<float>(acc);
              }
            }
          }
        }
      }
    }
    if (bias && detail::wants(bias)) {
      bias->ensure_grad();
      for (int64_t co = 0; co < Co; ++co) {
        double acc = 0.0;
        const float* gp = go + co * OT * OH * OW;
        for (int64_t i = 0; i < OT * OH * OW; ++i) acc += gp[i];
        bias->g[static_cast<size_t>(co)] += static_cast<float>(acc);
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Row-wise ops (softmax, layer norm) treat the last dimension as the row.
// ---------------------------------------------------------------------------

inline Tensor softmax(Tape& tape, const Tensor& a) {
  if (a->shape.empty()) throw ShapeError("softmax: scalar input");
  const int64_t n = a->shape.back();
  const int64_t rows = a->numel() / n;
  auto out = detail::out_like(tape, a->shape, {a});
  for (int64_t r = 0; r < rows; ++r) {
    const float* x = a->v.data() + r * n;
    float* y = out->v.data() + r * n;
    float m = x[0];
    for (int64_t i = 1; i < n; ++i) m = std::max(m, x[i]);
    double denom = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      y[i] = std::exp(x[i] - m);
      denom += y[i];
    }
    const double inv = 1.0 / denom;
    for (int64_t i = 0; i < n; ++i) y[i] = static_cast<float>(y[i] * inv);
  }
  tape.record([a, out, rows, n] {
    const float* go = detail::grad_in(out);
    if (!go || !detail::wants(a)) return;
    a->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const float* y = out->v.data() + r * n;
      const float* gy = go + r * n;
      float* gx = a->g.data() + r * n;
      double dot = 0.0;
      for (int64_t i = 0; i < n; ++i) dot += static_cast<double>(y[i]) * gy[i];
      for (int64_t i = 0; i < n; ++i) {
        gx[i] += static_cast<float>(y[i] * (gy[i] - dot));
      }
    }
  });
  return out;
}

inline Tensor layer_norm(Tape& tape, const Tensor& a, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  if (a->shape.empty()) throw ShapeError("layer_norm: scalar input");
  const int64_t d = a->shape.back();
  if (gamma->numel() != d || beta->numel() != d) {
    throw ShapeError("layer_norm: gamma/beta must have " + std::to_string(d) + " elements");
  }
  const int64_t rows = a->numel() / d;
  auto out = detail::out_like(tape, a->shape, {a, gamma, beta});
  auto xhat = std::make_shared<std::vector<float>>(a->v.size());
  auto inv_std = std::make_shared<std::vector<float>>(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const float* x = a->v.data() + r * d;
    double mu = 0.0;
    for (int64_t i = 0; i < d; ++i) mu += x[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t i = 0; i < d; ++i) var += (x[i] - mu) * (x[i] - mu);
    var /= static_cast<double>(d);
    const double istd = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(r)] = static_cast<float>(istd);
    float* y = out->v.data() + r * d;
    float* xh = xhat->data() + r * d;
    for (int64_t i = 0; i < d; ++i) {
      xh[i] = static_cast<float>((x[i] - mu) * istd);
      y[i] = xh[i] * gamma->v[static_cast<size_t>(i)] + beta->v[static_cast<size_t>(i)];
    }
  }
  tape.record([a, gamma, beta, out, xhat, inv_std, rows, d] {
    const float* go = detail::grad_in(out);
    if (!go) return;
    if (detail::wants(gamma)) {
      gamma->ensure_grad();
      for (int64_t i = 0; i < d; ++i) {
        double acc = 0.0;
        for (int64_t r = 0; r < rows; ++r) {
          acc += static_cast<double>(go[r * d + i]) * (*xhat)[static_cast<size_t>(r * d + i)];
        }
        gamma->g[static_cast<size_t>(i)] += static_cast<float>(acc);
      }
    }
    if (detail::wants(beta)) {
      beta->ensure_grad();
      for (int64_t i = 0; i < d; ++i) {
        double acc = 0.0;
        for (int64_t r = 0; r < rows; ++r) acc += go[r * d + i];
        beta->g[static_cast<size_t>(i)] += static_cast<float>(acc);
      }
    }
    if (detail::wants(a)) {
      a->ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        const float* gy = go + r * d;
        const float* xh = xhat->data() + r * d;
        const double istd = (*inv_std)[static_cast<size_t>(r)];
        double sum_g = 0.0, sum_gx = 0.0;
        for (int64_t i = 0; i < d; ++i) {
          const double gi = static_cast<double>(gy[i]) * gamma->v[static_cast<size_t>(i)];
          sum_g += gi;
          sum_gx += gi * xh[i];
        }
        float* gx = a->g.data() + r * d;
        for (int64_t i = 0; i < d; ++i) {
          const double gi = static_cast<double>(gy[i]) * gamma->v[static_cast<size_t>(i)];
          gx[i] += static_cast<float>(istd * (gi - sum_g / d - xh[i] * sum_gx / d));
        }
      }
    }
  });
  return out;
}

inline Tensor embedding_lookup(Tape& tape, const Tensor& table, const std::vector<int>& ids) {
  if (table->shape.size() != 2) throw ShapeError("embedding_lookup: table must be (V,d)");
  const int64_t V = table->shape[0], d = table->shape[1];
  for (int id : ids) {
    if (id < 0 || id >= V) {
      throw IndexError("embedding_lookup: index " + std::to_string(id) + " out of range [0," +
                       std::to_string(V) + ")");
    }
  }
  auto out = detail::out_like(tape, {static_cast<int64_t>(ids.size()), d}, {table});
  for (size_t i = 0; i < ids.size(); ++i) {
    const float* src = table->v.data() + static_cast<int64_t>(ids[i]) * d;
    std::copy(src, src + d, out->v.data() + static_cast<int64_t>(i) * d);
  }
  auto ids_copy = std::make_shared<std::vector<int>>(ids);
  tape.record([table, out, ids_copy, d] {
    const float* go = detail::grad_in(out);
    if (!go || !detail::wants(table)) return;
    table->ensure_grad();
    for (size_t i = 0; i < ids_copy->size(); ++i) {
      float* dst = table->g.data() + static_cast<int64_t>((*ids_copy)[i]) * d;
      const float* src = go + static_cast<int64_t>(i) * d;
      for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses (f64 accumulation; scalar64 carried on outputs).
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor make_scalar_out(Tape& tape, double value, std::initializer_list<Tensor> inputs) {
  bool rg = false;
  for (const auto& t : inputs) rg = rg || t->requires_grad;
  auto out = make_tensor({1}, rg);
  out->v[0] = static_cast<float>(value);
  out->scalar64 = value;
  out->has_scalar64 = true;
  tape.track(out);
  for (const auto& t : inputs) tape.track(t);
  return out;
}

}  // namespace detail

inline Tensor sum(Tape& tape, const Tensor& a) {
  double s = 0.0;
  for (float x : a->v) s += x;
  auto out = detail::make_scalar_out(tape, s, {a});
  tape.record([a, out] {
    const float* go = detail::grad_in(out);
    if (!go || !detail::wants(a)) return;
    a->ensure_grad();
    const float g = go[0];
    for (size_t i = 0; i < a->g.size(); ++i) a->g[i] += g;
  });
  return out;
}

inline Tensor mean(Tape& tape, const Tensor& a) {
  const double n = static_cast<double>(a->numel());
  double s = 0.0;
  for (float x : a->v) s += x;
  auto out = detail::make_scalar_out(tape, s / n, {a});
  tape.record([a, out, n] {
    const float* go = detail::grad_in(out);
    if (!go || !detail::wants(a)) return;
    a->ensure_grad();
    const float g = static_cast<float>(go[0] / n);
    for (size_t i = 0; i < a->g.size(); ++i) a->g[i] += g;
  });
  return out;
}

inline Tensor l1_loss(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a->shape != b->shape) {
    throw ShapeError("l1_loss: shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
  const double n = static_cast<double>(a->numel());
  double s = 0.0;
  for (size_t i = 0; i < a->v.size(); ++i) s += std::fabs(static_cast<double>(a->v[i]) - b->v[i]);
  auto out = detail::make_scalar_out(tape, s / n, {a, b});
  tape.record([a, b, out, n] {
    const float* go = detail::grad_in(out);
    if (!go) return;
    const double g = go[0] / n;
    if (detail::wants(a)) a->ensure_grad();
    if (detail::wants(b)) b->ensure_grad();
    for (size_t i = 0; i < a->v.size(); ++i) {
      const float d = a->v[i] - b->v[i];
      const float sg = d > 0.0f ? 1.0f : (d < 0.0f ? -1.0f : 0.0f);
      if (detail::wants(a)) a->g[i] += static_cast<float>(g * sg);
      if (detail::wants(b)) b->g[i] -= static_cast<float>(g * sg);
    }
  });
  return out;
}

inline Tensor mse_loss(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a->shape != b->shape) {
    throw ShapeError("mse_loss: shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
  const double n = static_cast<double>(a->numel());
  double s = 0.0;
  for (size_t i = 0; i < a->v.size(); ++i) {
    const double d = static_cast<double>(a->v[i]) - b->v[i];
    s += d * d;
  }
  auto out = detail::make_scalar_out(tape, s / n, {a, b});
  tape.record([a, b, out, n] {
    const float* go = detail::grad_in(out);
    if (!go) return;
    const double g = 2.0 * go[0] / n;
    if (detail::wants(a)) a->ensure_grad();
    if (detail::wants(b)) b->ensure_grad();
    for (size_t i = 0; i < a->v.size(); ++i) {
      const double d = static_cast<double>(a->v[i]) - b->v[i];
      if (detail::wants(a)) a->g[i] += static_cast<float>(g * d);
      if (detail::wants(b)) b->g[i] -= static_cast<float>(g * d);
    }
  });
  return out;
}

/// Mean next-token cross entropy of logits (L,V) against integer targets.
inline Tensor cross_entropy(Tape& tape, const Tensor& logits, const std::vector<int>& targets) {
  if (logits->shape.size() != 2) throw ShapeError("cross_entropy: logits must be (L,V)");
  const int64_t L = logits->shape[0], V = logits->shape[1];
  if (static_cast<int64_t>(targets.size()) != L) {
    throw ShapeError("cross_entropy: expected " + std::to_string(L) + " targets");
  }
  for (int t : targets) {
    if (t < 0 || t >= V) throw IndexError("cross_entropy: target out of range");
  }
  auto probs = std::make_shared<std::vector<float>>(logits->v.size());
  double total = 0.0;
  for (int64_t r = 0; r < L; ++r) {
    const float* x = logits->v.data() + r * V;
    float m = x[0];
    for (int64_t i = 1; i < V; ++i) m = std::max(m, x[i]);
    double denom = 0.0;
    for (int64_t i = 0; i < V; ++i) denom += std::exp(static_cast<double>(x[i]) - m);
    const double lse = m + std::log(denom);
    total += lse - x[targets[static_cast<size_t>(r)]];
    float* p = probs->data() + r * V;
    for (int64_t i = 0; i < V; ++i) {
      p[i] = static_cast<float>(std::exp(static_cast<double>(x[i]) - m) / denom);
    }
  }
  auto out = detail::make_scalar_out(tape, total / static_cast<double>(L), {logits});
  auto tgt = std::make_shared<std::vector<int>>(targets);
  tape.record([logits, out, probs, tgt, L, V] {
    const float* go = detail::grad_in(out);
    if (!go || !detail::wants(logits)) return;
    logits->ensure_grad();
    const double g = go[0] / static_cast<double>(L);
    for (int64_t r = 0; r < L; ++r) {
      const float* p = probs->data() + r * V;
      float* gx = logits->g.data() + r * V;
      const int t = (*tgt)[static_cast<size_t>(r)];
      for (int64_t i = 0; i < V; ++i) {
        gx[i] += static_cast<float>(g * (p[i] - (i == t ? 1.0 : 0.0)));
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// grad_check: reverse-mode gradient vs central finite differences, using the
// f64 scalar channel of the loss. Relative deviation floors at 1e-2 so f32
// noise on near-zero components does not dominate.
// ---------------------------------------------------------------------------

template <typename F>
double grad_check(F&& f, const Tensor& x, double eps = 1e-3) {
  Tensor loss;
  {
    Tape tape;
    loss = f(tape);
    if (loss->numel() != 1) throw ValidationError("grad_check: f must produce a scalar");
    x->g.clear();
    tape.backward(loss);
  }
  std::vector<float> g_ad = x->g.empty() ? std::vector<float>(x->v.size(), 0.0f) : x->g;

  auto eval = [&]() {
    Tape tape;
    Tensor l = f(tape);
    return l->scalar();
  };

  double max_dev = 0.0;
  for (size_t i = 0; i < x->v.size(); ++i) {
    const float orig = x->v[i];
    x->v[i] = static_cast<float>(static_cast<double>(orig) + eps);
    const double xp = x->v[i];
    const double lp = eval();
    x->v[i] = static_cast<float>(static_cast<double>(orig) - eps);
    const double xm = x->v[i];
    const double lm = eval();
    x->v[i] = orig;
    const double fd = (lp - lm) / (xp - xm);
    const double a = static_cast<double>(g_ad[i]);
    const double dev = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-2});
    max_dev = std::max(max_dev, dev);
  }
  x->g.clear();
  return max_dev;
}

// ---------------------------------------------------------------------------
// Parameter store and checkpointing.
//
// Checkpoint layout: a text manifest (`PNC-CKPT 1`, count, then one
// `name rank dims... offset` line per parameter with byte offsets into the
// payload), a blank line, then the concatenated f32le payloads.
// ---------------------------------------------------------------------------

class ParamStore {
 public:
  Tensor add(const std::string& name, std::vector<int64_t> shape) {
    for (const auto& [n, t] : items_) {
      if (n == name) throw ValidationError("ParamStore: duplicate parameter " + name);
    }
    auto t = make_tensor(std::move(shape), true);
    items_.emplace_back(name, t);
    return t;
  }

  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    out.reserve(items_.size());
    for (const auto& [n, t] : items_) out.push_back(t);
    return out;
  }

  Tensor find(const std::string& name) const {
    for (const auto& [n, t] : items_) {
      if (n == name) return t;
    }
    throw ValidationError("ParamStore: no parameter named " + name);
  }

  void zero_grads() {
    for (auto& [n, t] : items_) std::fill(t->g.begin(), t->g.end(), 0.0f);
  }

  int64_t total_parameters() const {
    int64_t n = 0;
    for (const auto& [name, t] : items_) n += t->numel();
    return n;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os << "PNC-CKPT 1\n" << items_.size() << "\n";
    uint64_t offset = 0;
    for (const auto& [name, t] : items_) {
      os << name << " " << t->shape.size();
      for (int64_t d : t->shape) os << " " << d;
      os << " " << offset << "\n";
      offset += t->v.size() * sizeof(float);
    }
    os << "\n";
    for (const auto& [name, t] : items_) {
      write_bytes(os, t->v.data(), t->v.size() * sizeof(float));
    }
    if (!os) throw IoError("write failed: " + path.string());
  }

  /// Load values into matching parameters (names and shapes must agree).
  void load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    std::string line;
    if (!std::getline(is, line) || line != "PNC-CKPT 1") {
      throw FormatError("checkpoint: bad magic in " + path.string());
    }
    size_t count = 0;
    if (!(is >> count)) throw FormatError("checkpoint: bad parameter count");
    if (count != items_.size()) {
      throw FormatError("checkpoint: has " + std::to_string(count) + " parameters, model needs " +
                        std::to_string(items_.size()));
    }
    struct Entry {
      std::string name;
      std::vector<int64_t> shape;
      uint64_t offset;
    };
    std::vector<Entry> entries(count);
    for (auto& e : entries) {
      size_t rank = 0;
      if (!(is >> e.name >> rank)) throw FormatError("checkpoint: truncated manifest");
      e.shape.resize(rank);
      for (auto& d : e.shape) {
        if (!(is >> d)) throw FormatError("checkpoint: truncated manifest");
      }
      if (!(is >> e.offset)) throw FormatError("checkpoint: truncated manifest");
    }
    is.ignore(std::numeric_limits<std::streamsize>::max(), '\n');
    std::getline(is, line);  // blank separator
    const std::streampos payload_start = is.tellg();
    for (size_t i = 0; i < count; ++i) {
      const auto& e = entries[i];
      auto& [name, t] = items_[i];
      if (e.name != name || e.shape != t->shape) {
        throw FormatError("checkpoint: parameter " + std::to_string(i) + " is " + e.name +
                          ", model expects " + name + " with matching shape");
      }
      is.seekg(payload_start + static_cast<std::streamoff>(e.offset));
      is.read(reinterpret_cast<char*>(t->v.data()),
              static_cast<std::streamsize>(t->v.size() * sizeof(float)));
      if (static_cast<size_t>(is.gcount()) != t->v.size() * sizeof(float)) {
        throw LengthError("checkpoint: payload truncated for " + name);
      }
    }
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

// ---------------------------------------------------------------------------
// Adam with bias correction; deterministic given parameter order.
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i]->v.size(), 0.0f);
      v_[i].assign(params_[i]->v.size(), 0.0f);
    }
  }

  void set_lr(double lr) { cfg_.lr = lr; }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t p = 0; p < params_.size(); ++p) {
      auto& t = params_[p];
      if (t->g.empty()) continue;  // no gradient this step
      for (size_t i = 0; i < t->v.size(); ++i) {
        const double g = t->g[i];
        const double m = cfg_.beta1 * m_[p][i] + (1.0 - cfg_.beta1) * g;
        const double v = cfg_.beta2 * v_[p][i] + (1.0 - cfg_.beta2) * g * g;
        m_[p][i] = static_cast<float>(m);
        v_[p][i] = static_cast<float>(v);
        const double update = cfg_.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
        t->v[i] = static_cast<float>(t->v[i] - update);
      }
    }
  }

  int64_t steps_taken() const { return t_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig cfg_;
  std::vector<std::vector<float>> m_, v_;
  int64_t t_ = 0;
};

}  // namespace pnc::ad
