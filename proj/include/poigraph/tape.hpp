#pragma once

// Reverse-mode autodiff over a recorded computation tape. Nodes are appended
// in topological order; backward() is a single reverse sweep. Only the
// primitives this project needs carry adjoints.
//
// All results are checked finite after every forward op (NaN/Inf is an error
// state); pass check_finite=false to opt out in hot inference paths.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "poigraph/rng.hpp"
#include "poigraph/tensor.hpp"
#include "poigraph/thread_pool.hpp"

namespace poigraph {

struct Var {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

namespace detail {

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  const int64_t n = a.rows(), m = a.cols();
  Tensor<T> out({m, n});
  const T* src = a.data();
  T* dst = out.mut();
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < m; ++j) dst[j * n + i] = src[i * m + j];
  }
  return out;
}

// C = A @ B, parallel over rows of A. Each output row is computed by exactly
// one worker in a fixed order, so results do not depend on the worker count.
template <typename T>
Tensor<T> mm(const Tensor<T>& a, const Tensor<T>& b) {
  const int64_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dims disagree: " + shape_str(a.shape()) +
                     " @ " + shape_str(b.shape()));
  }
  Tensor<T> c({n, m});
  const T* pa = a.data();
  const T* pb = b.data();
  T* pc = c.mut();
  parallel_rows(static_cast<size_t>(n), [&](size_t lo, size_t hi) {
    for (size_t i = lo; i < hi; ++i) {
      T* ci = pc + i * static_cast<size_t>(m);
      const T* ai = pa + i * static_cast<size_t>(k);
      for (int64_t kk = 0; kk < k; ++kk) {
        const T av = ai[kk];
        const T* bk = pb + static_cast<size_t>(kk) * static_cast<size_t>(m);
        for (int64_t j = 0; j < m; ++j) ci[j] += av * bk[j];
      }
    }
  });
  return c;
}

// dst += A @ B without allocating.
template <typename T>
void mm_acc(Tensor<T>& dst, const Tensor<T>& a, const Tensor<T>& b) {
  const int64_t n = a.rows(), k = a.cols(), m = b.cols();
  T* pc = dst.mut();
  const T* pa = a.data();
  const T* pb = b.data();
  parallel_rows(static_cast<size_t>(n), [&](size_t lo, size_t hi) {
    for (size_t i = lo; i < hi; ++i) {
      T* ci = pc + i * static_cast<size_t>(m);
      const T* ai = pa + i * static_cast<size_t>(k);
      for (int64_t kk = 0; kk < k; ++kk) {
        const T av = ai[kk];
        const T* bk = pb + static_cast<size_t>(kk) * static_cast<size_t>(m);
        for (int64_t j = 0; j < m; ++j) ci[j] += av * bk[j];
      }
    }
  });
}

}  // namespace detail

template <typename T>
class Tape {
 public:
  explicit Tape(bool grad_enabled = true, bool check_finite = true)
      : grad_enabled_(grad_enabled), check_finite_(check_finite) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  size_t size() const { return nodes_.size(); }

  const Tensor<T>& val(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  const Tensor<T>& grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.numel() == 0 && n.value.numel() != 0) {
      throw TrainingStateError("gradient not populated; call backward() first");
    }
    return n.grad;
  }

  // Like grad(), but returns an empty tensor for variables the backward sweep
  // never reached.
  const Tensor<T>& grad_if_any(Var v) const { return node(v).grad; }

  // ---- leaves -------------------------------------------------------------

  Var leaf(Tensor<T> value, bool requires_grad) {
    return push(std::move(value), requires_grad && grad_enabled_, {}, "leaf");
  }

  Var constant(Tensor<T> value) { return push(std::move(value), false, {}, "constant"); }

  // ---- primitives ---------------------------------------------------------

  Var matmul(Var a, Var b) {
    Tensor<T> c = detail::mm(val(a), val(b));
    return push(std::move(c), any_grad({a, b}), [this, a, b](Var out) {
      const Tensor<T>& gc = grad_ref(out);
      if (requires_grad(a)) detail::mm_acc(grad_ref(a), gc, detail::transpose(val(b)));
      if (requires_grad(b)) detail::mm_acc(grad_ref(b), detail::transpose(val(a)), gc);
    }, "matmul");
  }

  Var add(Var a, Var b) {
    return ew2(a, b, [](T x, T y) { return x + y; },
               [this](Var a2, Var b2, Var out) {
                 const Tensor<T>& gc = grad_ref(out);
                 if (requires_grad(a2)) acc_same(grad_ref(a2), gc);
                 if (requires_grad(b2)) acc_same(grad_ref(b2), gc);
               },
               "add");
  }

  Var sub(Var a, Var b) {
    return ew2(a, b, [](T x, T y) { return x - y; },
               [this](Var a2, Var b2, Var out) {
                 const Tensor<T>& gc = grad_ref(out);
                 if (requires_grad(a2)) acc_same(grad_ref(a2), gc);
                 if (requires_grad(b2)) acc_scaled(grad_ref(b2), gc, T(-1));
               },
               "sub");
  }

  Var mul(Var a, Var b) {
    return ew2(a, b, [](T x, T y) { return x * y; },
               [this](Var a2, Var b2, Var out) {
                 const Tensor<T>& gc = grad_ref(out);
                 if (requires_grad(a2)) acc_prod(grad_ref(a2), gc, val(b2));
                 if (requires_grad(b2)) acc_prod(grad_ref(b2), gc, val(a2));
               },
               "mul");
  }

  // Elementwise max; ties route the gradient to the first argument.
  Var maximum(Var a, Var b) {
    return ew2(a, b, [](T x, T y) { return x >= y ? x : y; },
               [this](Var a2, Var b2, Var out) {
                 const Tensor<T>& gc = grad_ref(out);
                 const Tensor<T>& va = val(a2);
                 const Tensor<T>& vb = val(b2);
                 const int64_t n = va.numel();
                 if (requires_grad(a2)) {
                   T* g = grad_ref(a2).mut();
                   for (int64_t i = 0; i < n; ++i) {
                     if (va.at(i) >= vb.at(i)) g[i] += gc.at(i);
                   }
                 }
                 if (requires_grad(b2)) {
                   T* g = grad_ref(b2).mut();
                   for (int64_t i = 0; i < n; ++i) {
                     if (va.at(i) < vb.at(i)) g[i] += gc.at(i);
                   }
                 }
               },
               "maximum");
  }

  Var scale(Var a, T s) {
    Tensor<T> out = val(a);
    T* p = out.mut();
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) p[i] *= s;
    return push(std::move(out), any_grad({a}), [this, a, s](Var o) {
      if (requires_grad(a)) acc_scaled(grad_ref(a), grad_ref(o), s);
    }, "scale");
  }

  // a[n x m] + v broadcast across rows.
  Var add_rowvec(Var a, Var v) {
    const Tensor<T>& ta = val(a);
    const Tensor<T>& tv = val(v);
    const int64_t n = ta.rows(), m = ta.cols();
    if (tv.numel() != m) {
      throw ShapeError("add_rowvec: vector " + shape_str(tv.shape()) +
                       " vs matrix " + shape_str(ta.shape()));
    }
    Tensor<T> out = ta;
    T* p = out.mut();
    const T* pv = tv.data();
    for (int64_t i = 0; i < n; ++i) {
      T* row = p + i * m;
      for (int64_t j = 0; j < m; ++j) row[j] += pv[j];
    }
    return push(std::move(out), any_grad({a, v}), [this, a, v](Var o) {
      const Tensor<T>& gc = grad_ref(o);
      const int64_t n2 = gc.rows(), m2 = gc.cols();
      if (requires_grad(a)) acc_same(grad_ref(a), gc);
      if (requires_grad(v)) {
        T* gv = grad_ref(v).mut();
        const T* g = gc.data();
        for (int64_t i = 0; i < n2; ++i) {
          for (int64_t j = 0; j < m2; ++j) gv[j] += g[i * m2 + j];
        }
      }
    }, "add_rowvec");
  }

  Var sigmoid(Var a) {
    Tensor<T> out = val(a);
    T* p = out.mut();
    const int64_t n = out.numel();
    parallel_rows(static_cast<size_t>(n), [&](size_t lo, size_t hi) {
      for (size_t i = lo; i < hi; ++i) {
        const T x = p[i];
        p[i] = x >= 0 ? T(1) / (T(1) + std::exp(-x))
                      : std::exp(x) / (T(1) + std::exp(x));
      }
    });
    return push(std::move(out), any_grad({a}), [this, a](Var o) {
      if (!requires_grad(a)) return;
      const Tensor<T>& y = val(o);
      const Tensor<T>& gc = grad_ref(o);
      T* g = grad_ref(a).mut();
      const int64_t n2 = y.numel();
      for (int64_t i = 0; i < n2; ++i) {
        const T yi = y.at(i);
        g[i] += gc.at(i) * yi * (T(1) - yi);
      }
    }, "sigmoid");
  }

  Var tanh_op(Var a) {
    Tensor<T> out = val(a);
    T* p = out.mut();
    const int64_t n = out.numel();
    parallel_rows(static_cast<size_t>(n), [&](size_t lo, size_t hi) {
      for (size_t i = lo; i < hi; ++i) p[i] = std::tanh(p[i]);
    });
    return push(std::move(out), any_grad({a}), [this, a](Var o) {
      if (!requires_grad(a)) return;
      const Tensor<T>& y = val(o);
      const Tensor<T>& gc = grad_ref(o);
      T* g = grad_ref(a).mut();
      const int64_t n2 = y.numel();
      for (int64_t i = 0; i < n2; ++i) g[i] += gc.at(i) * (T(1) - y.at(i) * y.at(i));
    }, "tanh");
  }

  // out[j, :] = a[idx[j], :]. Backward scatter-adds, sequentially.
  Var gather_rows(Var a, std::vector<int64_t> idx) {
    const Tensor<T>& ta = val(a);
    const int64_t m = ta.cols(), n = ta.rows();
    const int64_t k = static_cast<int64_t>(idx.size());
    Tensor<T> out({k, m});
    T* p = out.mut();
    const T* src = ta.data();
    for (int64_t j = 0; j < k; ++j) {
      const int64_t r = idx[static_cast<size_t>(j)];
      if (r < 0 || r >= n) throw ShapeError("gather_rows: index out of range");
      std::copy(src + r * m, src + (r + 1) * m, p + j * m);
    }
    auto idx_ptr = std::make_shared<std::vector<int64_t>>(std::move(idx));
    return push(std::move(out), any_grad({a}), [this, a, idx_ptr](Var o) {
      if (!requires_grad(a)) return;
      const Tensor<T>& gc = grad_ref(o);
      Tensor<T>& ga = grad_ref(a);
      const int64_t m2 = gc.cols();
      T* g = ga.mut();
      const T* gs = gc.data();
      for (size_t j = 0; j < idx_ptr->size(); ++j) {
        T* dst = g + (*idx_ptr)[j] * m2;
        const T* row = gs + static_cast<int64_t>(j) * m2;
        for (int64_t c = 0; c < m2; ++c) dst[c] += row[c];
      }
    }, "gather_rows");
  }

  Var concat_rows(Var a, Var b) {
    const Tensor<T>& ta = val(a);
    const Tensor<T>& tb = val(b);
    if (ta.cols() != tb.cols()) {
      throw ShapeError("concat_rows: column mismatch " + shape_str(ta.shape()) +
                       " vs " + shape_str(tb.shape()));
    }
    Tensor<T> out({ta.rows() + tb.rows(), ta.cols()});
    T* p = out.mut();
    std::copy(ta.data(), ta.data() + ta.numel(), p);
    std::copy(tb.data(), tb.data() + tb.numel(), p + ta.numel());
    const int64_t na = ta.numel();
    return push(std::move(out), any_grad({a, b}), [this, a, b, na](Var o) {
      const Tensor<T>& gc = grad_ref(o);
      if (requires_grad(a)) {
        T* g = grad_ref(a).mut();
        for (int64_t i = 0; i < na; ++i) g[i] += gc.at(i);
      }
      if (requires_grad(b)) {
        Tensor<T>& gb = grad_ref(b);
        T* g = gb.mut();
        const int64_t nb = gb.numel();
        for (int64_t i = 0; i < nb; ++i) g[i] += gc.at(na + i);
      }
    }, "concat_rows");
  }

  Var concat_cols(Var a, Var b) {
    const Tensor<T>& ta = val(a);
    const Tensor<T>& tb = val(b);
    const int64_t n = ta.rows(), ma = ta.cols(), mb = tb.cols();
    if (tb.rows() != n) {
      throw ShapeError("concat_cols: row mismatch " + shape_str(ta.shape()) +
                       " vs " + shape_str(tb.shape()));
    }
    Tensor<T> out({n, ma + mb});
    T* p = out.mut();
    const T* pa = ta.data();
    const T* pb = tb.data();
    for (int64_t i = 0; i < n; ++i) {
      std::copy(pa + i * ma, pa + (i + 1) * ma, p + i * (ma + mb));
      std::copy(pb + i * mb, pb + (i + 1) * mb, p + i * (ma + mb) + ma);
    }
    return push(std::move(out), any_grad({a, b}), [this, a, b, n, ma, mb](Var o) {
      const Tensor<T>& gc = grad_ref(o);
      const T* g = gc.data();
      if (requires_grad(a)) {
        T* ga = grad_ref(a).mut();
        for (int64_t i = 0; i < n; ++i) {
          for (int64_t j = 0; j < ma; ++j) ga[i * ma + j] += g[i * (ma + mb) + j];
        }
      }
      if (requires_grad(b)) {
        T* gb = grad_ref(b).mut();
        for (int64_t i = 0; i < n; ++i) {
          for (int64_t j = 0; j < mb; ++j) gb[i * mb + j] += g[i * (ma + mb) + ma + j];
        }
      }
    }, "concat_cols");
  }

  Var slice_cols(Var a, int64_t lo, int64_t hi) {
    const Tensor<T>& ta = val(a);
    const int64_t n = ta.rows(), m = ta.cols();
    if (lo < 0 || hi > m || lo >= hi) throw ShapeError("slice_cols: bad range");
    Tensor<T> out({n, hi - lo});
    T* p = out.mut();
    const T* src = ta.data();
    for (int64_t i = 0; i < n; ++i) {
      std::copy(src + i * m + lo, src + i * m + hi, p + i * (hi - lo));
    }
    return push(std::move(out), any_grad({a}), [this, a, lo, hi, m](Var o) {
      if (!requires_grad(a)) return;
      const Tensor<T>& gc = grad_ref(o);
      T* g = grad_ref(a).mut();
      const int64_t n2 = gc.rows(), w = hi - lo;
      for (int64_t i = 0; i < n2; ++i) {
        for (int64_t j = 0; j < w; ++j) g[i * m + lo + j] += gc.at(i * w + j);
      }
    }, "slice_cols");
  }

  Var reshape(Var a, Shape s) {
    Tensor<T> out = val(a).reshaped(std::move(s));
    return push(std::move(out), any_grad({a}), [this, a](Var o) {
      if (requires_grad(a)) acc_same(grad_ref(a), grad_ref(o));
    }, "reshape");
  }

  // out[i] = dot(a[i,:], b[i,:]), shaped [n x 1].
  Var rowwise_dot(Var a, Var b) {
    const Tensor<T>& ta = val(a);
    const Tensor<T>& tb = val(b);
    const int64_t n = ta.rows(), m = ta.cols();
    if (tb.rows() != n || tb.cols() != m) {
      throw ShapeError("rowwise_dot: shape mismatch");
    }
    Tensor<T> out({n, 1});
    T* p = out.mut();
    const T* pa = ta.data();
    const T* pb = tb.data();
    for (int64_t i = 0; i < n; ++i) {
      T acc = 0;
      for (int64_t j = 0; j < m; ++j) acc += pa[i * m + j] * pb[i * m + j];
      p[i] = acc;
    }
    return push(std::move(out), any_grad({a, b}), [this, a, b](Var o) {
      const Tensor<T>& gc = grad_ref(o);
      const Tensor<T>& va = val(a);
      const Tensor<T>& vb = val(b);
      const int64_t n2 = va.rows(), m2 = va.cols();
      if (requires_grad(a)) {
        T* g = grad_ref(a).mut();
        for (int64_t i = 0; i < n2; ++i) {
          const T s = gc.at(i);
          for (int64_t j = 0; j < m2; ++j) g[i * m2 + j] += s * vb.at(i * m2 + j);
        }
      }
      if (requires_grad(b)) {
        T* g = grad_ref(b).mut();
        for (int64_t i = 0; i < n2; ++i) {
          const T s = gc.at(i);
          for (int64_t j = 0; j < m2; ++j) g[i * m2 + j] += s * va.at(i * m2 + j);
        }
      }
    }, "rowwise_dot");
  }

  // Elementwise multiply by a non-differentiable tensor.
  Var mul_const(Var a, Tensor<T> k) {
    const Tensor<T>& ta = val(a);
    if (k.numel() != ta.numel()) throw ShapeError("mul_const: size mismatch");
    Tensor<T> out = ta;
    T* p = out.mut();
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) p[i] *= k.at(i);
    auto kp = std::make_shared<Tensor<T>>(std::move(k));
    return push(std::move(out), any_grad({a}), [this, a, kp](Var o) {
      if (!requires_grad(a)) return;
      acc_prod(grad_ref(a), grad_ref(o), *kp);
    }, "mul_const");
  }

  // Row-wise masked softmax. mask entries: 1 keep, 0 drop (exactly zero in the
  // output, excluded from the normalization). Empty mask = all kept.
  Var softmax_rows(Var a, const std::vector<uint8_t>& mask = {}) {
    const Tensor<T>& ta = val(a);
    const int64_t n = ta.rows(), m = ta.cols();
    if (!mask.empty() && static_cast<int64_t>(mask.size()) != n * m) {
      throw ShapeError("softmax_rows: mask size mismatch");
    }
    Tensor<T> out({n, m});
    T* p = out.mut();
    const T* src = ta.data();
    for (int64_t i = 0; i < n; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      bool any = false;
      for (int64_t j = 0; j < m; ++j) {
        if (mask.empty() || mask[static_cast<size_t>(i * m + j)]) {
          mx = std::max(mx, src[i * m + j]);
          any = true;
        }
      }
      if (!any) throw ConfigError("softmax_rows: row " + std::to_string(i) + " fully masked");
      T denom = 0;
      for (int64_t j = 0; j < m; ++j) {
        if (mask.empty() || mask[static_cast<size_t>(i * m + j)]) {
          const T e = std::exp(src[i * m + j] - mx);
          p[i * m + j] = e;
          denom += e;
        } else {
          p[i * m + j] = 0;
        }
      }
      for (int64_t j = 0; j < m; ++j) p[i * m + j] /= denom;
    }
    return push(std::move(out), any_grad({a}), [this, a](Var o) {
      if (!requires_grad(a)) return;
      const Tensor<T>& y = val(o);
      const Tensor<T>& gc = grad_ref(o);
      T* g = grad_ref(a).mut();
      const int64_t n2 = y.rows(), m2 = y.cols();
      for (int64_t i = 0; i < n2; ++i) {
        T dot = 0;
        for (int64_t j = 0; j < m2; ++j) dot += gc.at(i * m2 + j) * y.at(i * m2 + j);
        for (int64_t j = 0; j < m2; ++j) {
          g[i * m2 + j] += y.at(i * m2 + j) * (gc.at(i * m2 + j) - dot);
        }
      }
    }, "softmax_rows");
  }

  // Fused row softmax + cross-entropy against an index target. Returns the
  // per-row loss as [n x 1].
  Var softmax_xent_rows(Var logits, std::vector<int64_t> targets) {
    const Tensor<T>& tl = val(logits);
    const int64_t n = tl.rows(), m = tl.cols();
    if (static_cast<int64_t>(targets.size()) != n) {
      throw ShapeError("softmax_xent_rows: target count mismatch");
    }
    Tensor<T> probs({n, m});
    Tensor<T> loss({n, 1});
    T* pp = probs.mut();
    T* pl = loss.mut();
    const T* src = tl.data();
    for (int64_t i = 0; i < n; ++i) {
      const int64_t t = targets[static_cast<size_t>(i)];
      if (t < 0 || t >= m) throw ShapeError("softmax_xent_rows: target out of range");
      T mx = src[i * m];
      for (int64_t j = 1; j < m; ++j) mx = std::max(mx, src[i * m + j]);
      T denom = 0;
      for (int64_t j = 0; j < m; ++j) {
        const T e = std::exp(src[i * m + j] - mx);
        pp[i * m + j] = e;
        denom += e;
      }
      for (int64_t j = 0; j < m; ++j) pp[i * m + j] /= denom;
      pl[i] = std::log(denom) - (src[i * m + t] - mx);
    }
    auto probs_ptr = std::make_shared<Tensor<T>>(std::move(probs));
    auto tgt = std::make_shared<std::vector<int64_t>>(std::move(targets));
    return push(std::move(loss), any_grad({logits}), [this, logits, probs_ptr, tgt](Var o) {
      if (!requires_grad(logits)) return;
      const Tensor<T>& gc = grad_ref(o);
      T* g = grad_ref(logits).mut();
      const int64_t n2 = probs_ptr->rows(), m2 = probs_ptr->cols();
      for (int64_t i = 0; i < n2; ++i) {
        const T s = gc.at(i);
        const int64_t t = (*tgt)[static_cast<size_t>(i)];
        for (int64_t j = 0; j < m2; ++j) {
          g[i * m2 + j] += s * (probs_ptr->at(i * m2 + j) - (j == t ? T(1) : T(0)));
        }
      }
    }, "softmax_xent_rows");
  }

  Var sum_all(Var a) {
    const Tensor<T>& ta = val(a);
    T acc = 0;
    for (int64_t i = 0; i < ta.numel(); ++i) acc += ta.at(i);
    return push(Tensor<T>({1, 1}, {acc}), any_grad({a}), [this, a](Var o) {
      if (!requires_grad(a)) return;
      const T s = grad_ref(o).at(0);
      T* g = grad_ref(a).mut();
      const int64_t n = val(a).numel();
      for (int64_t i = 0; i < n; ++i) g[i] += s;
    }, "sum_all");
  }

  Var mean_all(Var a) {
    const int64_t n = val(a).numel();
    return scale(sum_all(a), T(1) / static_cast<T>(n));
  }

  // Softmax within contiguous segments of a column vector. offsets has
  // S+1 entries; segment s covers rows [offsets[s], offsets[s+1]). Empty
  // segments are allowed and produce nothing.
  Var segment_softmax(Var a, std::vector<int64_t> offsets) {
    const Tensor<T>& ta = val(a);
    if (ta.cols() != 1) throw ShapeError("segment_softmax: expects a column vector");
    check_offsets(offsets, ta.rows());
    Tensor<T> out({ta.rows(), 1});
    T* p = out.mut();
    const T* src = ta.data();
    const size_t S = offsets.size() - 1;
    for (size_t s = 0; s < S; ++s) {
      const int64_t lo = offsets[s], hi = offsets[s + 1];
      if (lo == hi) continue;
      T mx = src[lo];
      for (int64_t i = lo + 1; i < hi; ++i) mx = std::max(mx, src[i]);
      T denom = 0;
      for (int64_t i = lo; i < hi; ++i) {
        p[i] = std::exp(src[i] - mx);
        denom += p[i];
      }
      for (int64_t i = lo; i < hi; ++i) p[i] /= denom;
    }
    auto off = std::make_shared<std::vector<int64_t>>(std::move(offsets));
    return push(std::move(out), any_grad({a}), [this, a, off](Var o) {
      if (!requires_grad(a)) return;
      const Tensor<T>& y = val(o);
      const Tensor<T>& gc = grad_ref(o);
      T* g = grad_ref(a).mut();
      for (size_t s = 0; s + 1 < off->size(); ++s) {
        const int64_t lo = (*off)[s], hi = (*off)[s + 1];
        T dot = 0;
        for (int64_t i = lo; i < hi; ++i) dot += gc.at(i) * y.at(i);
        for (int64_t i = lo; i < hi; ++i) g[i] += y.at(i) * (gc.at(i) - dot);
      }
    }, "segment_softmax");
  }

  // out[s, :] = sum over segment rows r of weights[r] * values[r, :].
  Var segment_weighted_rows(Var values, Var weights, std::vector<int64_t> offsets) {
    const Tensor<T>& tv = val(values);
    const Tensor<T>& tw = val(weights);
    if (tw.cols() != 1 || tw.rows() != tv.rows()) {
      throw ShapeError("segment_weighted_rows: weights must be [n x 1] matching values rows");
    }
    check_offsets(offsets, tv.rows());
    const int64_t d = tv.cols();
    const int64_t S = static_cast<int64_t>(offsets.size()) - 1;
    Tensor<T> out({S, d});
    T* p = out.mut();
    const T* pv = tv.data();
    const T* pw = tw.data();
    for (int64_t s = 0; s < S; ++s) {
      for (int64_t r = offsets[static_cast<size_t>(s)]; r < offsets[static_cast<size_t>(s) + 1]; ++r) {
        const T w = pw[r];
        for (int64_t j = 0; j < d; ++j) p[s * d + j] += w * pv[r * d + j];
      }
    }
    auto off = std::make_shared<std::vector<int64_t>>(std::move(offsets));
    return push(std::move(out), any_grad({values, weights}),
                [this, values, weights, off](Var o) {
      const Tensor<T>& gc = grad_ref(o);
      const Tensor<T>& tv = val(values);
      const Tensor<T>& tw = val(weights);
      const int64_t d2 = tv.cols();
      const bool gv = requires_grad(values);
      const bool gw = requires_grad(weights);
      T* pgv = gv ? grad_ref(values).mut() : nullptr;
      T* pgw = gw ? grad_ref(weights).mut() : nullptr;
      for (size_t s = 0; s + 1 < off->size(); ++s) {
        const T* grow = gc.data() + static_cast<int64_t>(s) * d2;
        for (int64_t r = (*off)[s]; r < (*off)[s + 1]; ++r) {
          if (gv) {
            const T w = tw.at(r);
            for (int64_t j = 0; j < d2; ++j) pgv[r * d2 + j] += w * grow[j];
          }
          if (gw) {
            T acc = 0;
            for (int64_t j = 0; j < d2; ++j) acc += tv.at(r * d2 + j) * grow[j];
            pgw[r] += acc;
          }
        }
      }
    }, "segment_weighted_rows");
  }

  // Inverted dropout. Training: zero with probability rate, scale survivors
  // by 1/(1-rate). Inference: identity.
  Var dropout(Var a, double rate, RngStream& rng, bool training) {
    if (rate < 0.0 || rate >= 1.0) {
      throw ConfigError("dropout rate must be in [0, 1): " + std::to_string(rate));
    }
    if (!training || rate == 0.0) {
      return push(val(a), any_grad({a}), [this, a](Var o) {
        if (requires_grad(a)) acc_same(grad_ref(a), grad_ref(o));
      }, "dropout");
    }
    const Tensor<T>& ta = val(a);
    const int64_t n = ta.numel();
    const T keep_scale = T(1.0 / (1.0 - rate));
    Tensor<T> mask(ta.shape());
    T* pm = mask.mut();
    for (int64_t i = 0; i < n; ++i) pm[i] = rng.next_double() < rate ? T(0) : keep_scale;
    return mul_const(a, std::move(mask));
  }

  // y = x @ W (+ b): the basic affine map.
  Var dense(Var x, Var w, Var b = Var{}) {
    Var y = matmul(x, w);
    if (b.valid()) y = add_rowvec(y, b);
    return y;
  }

  // ---- backward -----------------------------------------------------------

  // Seeds d(root)/d(root) = 1 (root must be a single element) and sweeps the
  // tape in reverse. May be called once per tape.
  void backward(Var root) {
    if (!grad_enabled_) throw TrainingStateError("backward on a no-grad tape");
    if (val(root).numel() != 1) throw ShapeError("backward root must be scalar");
    if (backward_done_) throw TrainingStateError("backward already ran on this tape");
    backward_done_ = true;
    grad_ref(root).mut()[0] = T(1);
    for (int32_t i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.requires_grad && n.back && n.grad.numel() != 0) n.back(Var{i});
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated on first backward touch
    std::function<void(Var)> back;
    bool requires_grad = false;
    const char* op = "";
  };

  const Node& node(Var v) const {
    if (!v.valid() || static_cast<size_t>(v.id) >= nodes_.size()) {
      throw ShapeError("invalid tape variable");
    }
    return nodes_[static_cast<size_t>(v.id)];
  }

  bool any_grad(std::initializer_list<Var> vs) const {
    if (!grad_enabled_) return false;
    for (Var v : vs) {
      if (v.valid() && node(v).requires_grad) return true;
    }
    return false;
  }

  Tensor<T>& grad_ref(Var v) {
    Node& n = nodes_[static_cast<size_t>(v.id)];
    if (n.grad.numel() == 0 && n.value.numel() != 0) {
      n.grad = Tensor<T>(n.value.shape());
    }
    return n.grad;
  }

  Var push(Tensor<T> value, bool requires_grad, std::function<void(Var)> back,
           const char* op) {
    if (check_finite_ && !value.all_finite()) {
      throw NumericError(std::string("non-finite values produced by op '") + op + "'");
    }
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.back = std::move(back);
    n.op = op;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
  }

  template <typename FwdFn, typename BackFn>
  Var ew2(Var a, Var b, FwdFn fwd, BackFn back, const char* op) {
    const Tensor<T>& ta = val(a);
    const Tensor<T>& tb = val(b);
    if (ta.shape() != tb.shape()) {
      throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(ta.shape()) +
                       " vs " + shape_str(tb.shape()));
    }
    Tensor<T> out(ta.shape());
    T* p = out.mut();
    const T* pa = ta.data();
    const T* pb = tb.data();
    const int64_t n = ta.numel();
    for (int64_t i = 0; i < n; ++i) p[i] = fwd(pa[i], pb[i]);
    return push(std::move(out), any_grad({a, b}),
                [back, a, b](Var o) { back(a, b, o); }, op);
  }

  static void check_offsets(const std::vector<int64_t>& offsets, int64_t n) {
    if (offsets.empty() || offsets.front() != 0 || offsets.back() != n) {
      throw ShapeError("segment offsets must start at 0 and end at row count");
    }
    for (size_t i = 1; i < offsets.size(); ++i) {
      if (offsets[i] < offsets[i - 1]) throw ShapeError("segment offsets must be nondecreasing");
    }
  }

  static void acc_same(Tensor<T>& dst, const Tensor<T>& src) {
    T* d = dst.mut();
    const int64_t n = src.numel();
    const T* s = src.data();
    for (int64_t i = 0; i < n; ++i) d[i] += s[i];
  }

  static void acc_scaled(Tensor<T>& dst, const Tensor<T>& src, T k) {
    T* d = dst.mut();
    const int64_t n = src.numel();
    const T* s = src.data();
    for (int64_t i = 0; i < n; ++i) d[i] += k * s[i];
  }

  static void acc_prod(Tensor<T>& dst, const Tensor<T>& a, const Tensor<T>& b) {
    T* d = dst.mut();
    const int64_t n = a.numel();
    const T* pa = a.data();
    const T* pb = b.data();
    for (int64_t i = 0; i < n; ++i) d[i] += pa[i] * pb[i];
  }

  std::vector<Node> nodes_;
  bool grad_enabled_;
  bool check_finite_;
  bool backward_done_ = false;
};

// Standard GRU cell over a row batch: x [n x d_in], h [n x d_h].
// Gate parameters are packed [z | r | candidate] along columns.
struct GruVars {
  Var wx;  // [d_in x 3*d_h]
  Var wh;  // [d_h x 3*d_h]
  Var b;   // [1 x 3*d_h]
};

template <typename T>
Var gru_cell(Tape<T>& tp, Var x, Var h_prev, const GruVars& g) {
  const int64_t dh = tp.val(h_prev).cols();
  if (tp.val(g.wx).cols() != 3 * dh || tp.val(g.wh).cols() != 3 * dh) {
    throw ShapeError("gru_cell: packed gate width must be 3 * hidden");
  }
  Var gx = tp.add_rowvec(tp.matmul(x, g.wx), g.b);
  Var gh = tp.matmul(h_prev, g.wh);
  Var z = tp.sigmoid(tp.add(tp.slice_cols(gx, 0, dh), tp.slice_cols(gh, 0, dh)));
  Var r = tp.sigmoid(tp.add(tp.slice_cols(gx, dh, 2 * dh), tp.slice_cols(gh, dh, 2 * dh)));
  Var cand = tp.tanh_op(tp.add(tp.slice_cols(gx, 2 * dh, 3 * dh),
                               tp.mul(r, tp.slice_cols(gh, 2 * dh, 3 * dh))));
  // h' = (1 - z) * h_prev + z * cand
  Var one_minus_z = tp.sub(tp.constant(Tensor<T>(tp.val(z).shape(), T(1))), z);
  return tp.add(tp.mul(one_minus_z, h_prev), tp.mul(z, cand));
}

}  // namespace poigraph
