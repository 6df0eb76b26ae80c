#include "segstitch/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

namespace segstitch {

namespace {

template <typename T>
std::shared_ptr<TapeT<T>> common_tape(std::initializer_list<const TensorT<T>*> ts) {
  std::shared_ptr<TapeT<T>> tape;
  for (const auto* t : ts) {
    auto tp = t->tape();
    if (!tp) continue;
    if (!tape)
      tape = tp;
    else if (tape != tp)
      throw UsageError("op: inputs belong to two different tapes");
  }
  return tape;
}

template <typename T>
void finish_op(const TensorT<T>& out, const char* name) {
  if (checked_mode()) require_finite(out, name);
}

// Gradient accumulation target: only tensors that live on a tape (watched
// leaves or intermediates) collect gradients.
template <typename T>
bool wants_grad(const TensorT<T>& t) {
  return t.on_tape() || t.requires_grad();
}

// ---- broadcasting ----------------------------------------------------------

struct BcPlan {
  Shape out;
  std::vector<int64_t> sa, sb;  // strides aligned to out rank, 0 = broadcast
  bool same = false;
};

BcPlan make_bc_plan(const Shape& a, const Shape& b, const char* op) {
  BcPlan p;
  size_t ra = a.size(), rb = b.size(), ro = std::max(ra, rb);
  p.out.resize(ro);
  p.sa.assign(ro, 0);
  p.sb.assign(ro, 0);
  // row-major strides of the raw operands
  std::vector<int64_t> stra(ra), strb(rb);
  int64_t acc = 1;
  for (size_t i = ra; i-- > 0;) { stra[i] = acc; acc *= a[i]; }
  acc = 1;
  for (size_t i = rb; i-- > 0;) { strb[i] = acc; acc *= b[i]; }
  for (size_t i = 0; i < ro; ++i) {
    size_t oi = ro - 1 - i;
    int64_t da = i < ra ? a[ra - 1 - i] : 1;
    int64_t db = i < rb ? b[rb - 1 - i] : 1;
    if (da != db && da != 1 && db != 1)
      throw DimensionError(std::string(op) + ": shapes " + shape_str(a) +
                           " and " + shape_str(b) + " do not broadcast");
    p.out[oi] = std::max(da, db);
    if (i < ra && da != 1) p.sa[oi] = stra[ra - 1 - i];
    if (i < rb && db != 1) p.sb[oi] = strb[rb - 1 - i];
  }
  p.same = (a == b);
  return p;
}

// Walks the broadcast output space calling fn(out_off, a_off, b_off) for
// every element, innermost axis as a tight loop.
template <typename Fn>
void bc_walk(const BcPlan& p, Fn&& fn) {
  size_t rank = p.out.size();
  if (rank == 0) {
    fn(0, 0, 0);
    return;
  }
  std::vector<int64_t> ostr(rank);
  int64_t acc = 1;
  for (size_t i = rank; i-- > 0;) { ostr[i] = acc; acc *= p.out[i]; }
  const int64_t inner = p.out[rank - 1];
  const int64_t ia = p.sa[rank - 1], ib = p.sb[rank - 1];
  // recursion over outer axes
  auto rec = [&](auto&& self, size_t axis, int64_t oo, int64_t oa, int64_t ob) -> void {
    if (axis == rank - 1) {
      for (int64_t i = 0; i < inner; ++i) fn(oo + i, oa + i * ia, ob + i * ib);
      return;
    }
    for (int64_t i = 0; i < p.out[axis]; ++i)
      self(self, axis + 1, oo + i * ostr[axis], oa + i * p.sa[axis],
           ob + i * p.sb[axis]);
  };
  rec(rec, 0, 0, 0, 0);
}

enum class BinOp { kAdd, kSub, kMul, kDiv };

template <typename T>
TensorT<T> binary_op(const TensorT<T>& a, const TensorT<T>& b, BinOp op,
                     const char* name) {
  BcPlan plan = make_bc_plan(a.shape(), b.shape(), name);
  TensorT<T> out = TensorT<T>::zeros(plan.out);
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  if (plan.same) {
    const int64_t n = out.numel();
    switch (op) {
      case BinOp::kAdd: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i]; break;
      case BinOp::kSub: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i]; break;
      case BinOp::kMul: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i]; break;
      case BinOp::kDiv: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i]; break;
    }
  } else {
    switch (op) {
      case BinOp::kAdd: bc_walk(plan, [&](int64_t o, int64_t i, int64_t j) { po[o] = pa[i] + pb[j]; }); break;
      case BinOp::kSub: bc_walk(plan, [&](int64_t o, int64_t i, int64_t j) { po[o] = pa[i] - pb[j]; }); break;
      case BinOp::kMul: bc_walk(plan, [&](int64_t o, int64_t i, int64_t j) { po[o] = pa[i] * pb[j]; }); break;
      case BinOp::kDiv: bc_walk(plan, [&](int64_t o, int64_t i, int64_t j) { po[o] = pa[i] / pb[j]; }); break;
    }
  }

  auto tape = common_tape<T>({&a, &b});
  if (tape) {
    TensorT<T> ac = a, bc = b, oc = out;
    int id = tape->record({a.node(), b.node()}, [ac, bc, oc, plan, op]() mutable {
      const std::vector<T>* gp = oc.grad_if_any();
      if (gp) {
        const T* g = gp->data();
        const bool wa = wants_grad(ac), wb = wants_grad(bc);
        T* ga = wa ? ac.grad().data() : nullptr;
        T* gb = wb ? bc.grad().data() : nullptr;
        const T* pa2 = ac.data();
        const T* pb2 = bc.data();
        switch (op) {
          case BinOp::kAdd:
            bc_walk(plan, [&](int64_t o, int64_t i, int64_t j) {
              if (ga) ga[i] += g[o];
              if (gb) gb[j] += g[o];
            });
            break;
          case BinOp::kSub:
            bc_walk(plan, [&](int64_t o, int64_t i, int64_t j) {
              if (ga) ga[i] += g[o];
              if (gb) gb[j] -= g[o];
            });
            break;
          case BinOp::kMul:
            bc_walk(plan, [&](int64_t o, int64_t i, int64_t j) {
              if (ga) ga[i] += g[o] * pb2[j];
              if (gb) gb[j] += g[o] * pa2[i];
            });
            break;
          case BinOp::kDiv:
            bc_walk(plan, [&](int64_t o, int64_t i, int64_t j) {
              if (ga) ga[i] += g[o] / pb2[j];
              if (gb) gb[j] -= g[o] * pa2[i] / (pb2[j] * pb2[j]);
            });
            break;
        }
      }
      oc.zero_grad();
    });
    out.attach(tape, id);
  }
  finish_op(out, name);
  return out;
}

// ---- unary -----------------------------------------------------------------

// dfn(x, y) returns dy/dx given input x and output y.
template <typename T, typename FwdFn, typename DFn>
TensorT<T> unary_op(const TensorT<T>& x, FwdFn fwd, DFn dfn, const char* name) {
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = fwd(px[i]);

  auto tape = common_tape<T>({&x});
  if (tape) {
    TensorT<T> xc = x, oc = out;
    int id = tape->record({x.node()}, [xc, oc, dfn]() mutable {
      const std::vector<T>* gp = oc.grad_if_any();
      if (gp && wants_grad(xc)) {
        const T* g = gp->data();
        const T* px2 = xc.data();
        const T* po2 = oc.data();
        T* gx = xc.grad().data();
        const int64_t m = xc.numel();
        for (int64_t i = 0; i < m; ++i) gx[i] += g[i] * dfn(px2[i], po2[i]);
      }
      oc.zero_grad();
    });
    out.attach(tape, id);
  }
  finish_op(out, name);
  return out;
}

}  // namespace

// ---- public elementwise -----------------------------------------------------

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) { return binary_op(a, b, BinOp::kAdd, "add"); }
template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) { return binary_op(a, b, BinOp::kSub, "sub"); }
template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) { return binary_op(a, b, BinOp::kMul, "mul"); }
template <typename T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) { return binary_op(a, b, BinOp::kDiv, "div"); }

template <typename T>
TensorT<T> scale(const TensorT<T>& x, T s) {
  return unary_op(
      x, [s](T v) { return v * s; }, [s](T, T) { return s; }, "scale");
}

template <typename T>
TensorT<T> neg(const TensorT<T>& x) {
  return unary_op(
      x, [](T v) { return -v; }, [](T, T) { return T(-1); }, "neg");
}

template <typename T>
TensorT<T> sin_op(const TensorT<T>& x) {
  return unary_op(
      x, [](T v) { return std::sin(v); }, [](T v, T) { return std::cos(v); },
      "sin");
}

template <typename T>
TensorT<T> square(const TensorT<T>& x) {
  return unary_op(
      x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; }, "square");
}

template <typename T>
TensorT<T> tanh_op(const TensorT<T>& x) {
  return unary_op(
      x, [](T v) { return std::tanh(v); },
      [](T, T y) { return T(1) - y * y; }, "tanh");
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x) {
  return unary_op(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); }, "sigmoid");
}

// ---- matmul ------------------------------------------------------------------

namespace {

struct MatShape {
  int64_t batch, m, k, n;
  bool b_batched;
};

template <typename T>
MatShape matmul_shape(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw DimensionError("matmul: operands must be at least rank 2, got " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
  MatShape s{};
  s.m = a.dim(a.rank() - 2);
  s.k = a.dim(a.rank() - 1);
  s.n = b.dim(b.rank() - 1);
  if (b.dim(b.rank() - 2) != s.k)
    throw DimensionError("matmul: inner extents of " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()) + " do not match");
  s.batch = a.numel() / (s.m * s.k);
  s.b_batched = b.rank() > 2;
  if (s.b_batched) {
    Shape ba(a.shape().begin(), a.shape().end() - 2);
    Shape bb(b.shape().begin(), b.shape().end() - 2);
    if (ba != bb)
      throw DimensionError("matmul: batch extents of " + shape_str(a.shape()) +
                           " and " + shape_str(b.shape()) + " do not match");
  }
  return s;
}

// C[m,n] += A[m,k] * B[k,n], rows [r0, r1)
template <typename T>
void mm_nn_rows(const T* A, const T* B, T* C, int64_t r0, int64_t r1, int64_t k,
                int64_t n) {
  for (int64_t i = r0; i < r1; ++i) {
    T* c = C + i * n;
    const T* a = A + i * k;
    for (int64_t t = 0; t < k; ++t) {
      const T av = a[t];
      const T* b = B + t * n;
      for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T, rows [r0, r1)
template <typename T>
void mm_nt_rows(const T* A, const T* B, T* C, int64_t r0, int64_t r1, int64_t k,
                int64_t n) {
  for (int64_t i = r0; i < r1; ++i) {
    const T* a = A + i * k;
    T* c = C + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const T* b = B + j * k;
      T acc = 0;
      for (int64_t t = 0; t < k; ++t) acc += a[t] * b[t];
      c[j] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n], output rows [t0, t1)
template <typename T>
void mm_tn_rows(const T* A, const T* B, T* C, int64_t t0, int64_t t1, int64_t m,
                int64_t k, int64_t n) {
  for (int64_t t = t0; t < t1; ++t) {
    T* c = C + t * n;
    for (int64_t i = 0; i < m; ++i) {
      const T av = A[i * k + t];
      const T* b = B + i * n;
      for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  const MatShape s = matmul_shape(a, b);
  Shape oshape(a.shape().begin(), a.shape().end() - 1);
  oshape.push_back(s.n);
  TensorT<T> out = TensorT<T>::zeros(oshape);
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();

  parallel_for(s.batch * s.m, 8, [&](int64_t lo, int64_t hi) {
    int64_t r = lo;
    while (r < hi) {
      const int64_t bi = r / s.m;
      const int64_t i0 = r % s.m;
      const int64_t i1 = std::min(s.m, i0 + (hi - r));
      const T* bmat = pb + (s.b_batched ? bi * s.k * s.n : 0);
      mm_nn_rows(pa + bi * s.m * s.k, bmat, po + bi * s.m * s.n, i0, i1, s.k, s.n);
      r += i1 - i0;
    }
  });

  auto tape = common_tape<T>({&a, &b});
  if (tape) {
    TensorT<T> ac = a, bc = b, oc = out;
    int id = tape->record({a.node(), b.node()}, [ac, bc, oc, s]() mutable {
      const std::vector<T>* gp = oc.grad_if_any();
      if (gp) {
        const T* g = gp->data();
        if (wants_grad(ac)) {
          T* ga = ac.grad().data();
          const T* pb2 = bc.data();
          parallel_for(s.batch * s.m, 8, [&](int64_t lo, int64_t hi) {
            int64_t r = lo;
            while (r < hi) {
              const int64_t bi = r / s.m;
              const int64_t i0 = r % s.m;
              const int64_t i1 = std::min(s.m, i0 + (hi - r));
              const T* bmat = pb2 + (s.b_batched ? bi * s.k * s.n : 0);
              // da = g * b^T: treat b as [n,k] transposed -> nt kernel with roles swapped
              mm_nt_rows(g + bi * s.m * s.n, bmat, ga + bi * s.m * s.k, i0, i1,
                         s.n, s.k);
              r += i1 - i0;
            }
          });
        }
        if (wants_grad(bc)) {
          T* gb = bc.grad().data();
          const T* pa2 = ac.data();
          if (s.b_batched) {
            parallel_for(s.batch, 1, [&](int64_t lo, int64_t hi) {
              for (int64_t bi = lo; bi < hi; ++bi)
                mm_tn_rows(pa2 + bi * s.m * s.k, g + bi * s.m * s.n,
                           gb + bi * s.k * s.n, 0, s.k, s.m, s.k, s.n);
            });
          } else {
            parallel_for(s.k, 4, [&](int64_t t0, int64_t t1) {
              for (int64_t bi = 0; bi < s.batch; ++bi)
                mm_tn_rows(pa2 + bi * s.m * s.k, g + bi * s.m * s.n, gb, t0, t1,
                           s.m, s.k, s.n);
            });
          }
        }
      }
      oc.zero_grad();
    });
    out.attach(tape, id);
  }
  finish_op(out, "matmul");
  return out;
}

// ---- softmax -----------------------------------------------------------------

template <typename T>
TensorT<T> softmax_lastdim(const TensorT<T>& x) {
  if (x.rank() < 1)
    throw DimensionError("softmax_lastdim: scalar input " + shape_str(x.shape()));
  const int64_t n = x.dim(x.rank() - 1);
  const int64_t rows = x.numel() / n;
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  parallel_for(rows, 64, [&](int64_t lo, int64_t hi) {
    for (int64_t r = lo; r < hi; ++r) {
      const T* xr = px + r * n;
      T* yr = po + r * n;
      T mx = xr[0];
      for (int64_t i = 1; i < n; ++i) mx = std::max(mx, xr[i]);
      T sum = 0;
      for (int64_t i = 0; i < n; ++i) {
        yr[i] = std::exp(xr[i] - mx);
        sum += yr[i];
      }
      const T inv = T(1) / sum;
      for (int64_t i = 0; i < n; ++i) yr[i] *= inv;
    }
  });

  auto tape = common_tape<T>({&x});
  if (tape) {
    TensorT<T> xc = x, oc = out;
    int id = tape->record({x.node()}, [xc, oc, rows, n]() mutable {
      const std::vector<T>* gp = oc.grad_if_any();
      if (gp && wants_grad(xc)) {
        const T* g = gp->data();
        const T* y = oc.data();
        T* gx = xc.grad().data();
        for (int64_t r = 0; r < rows; ++r) {
          const T* yr = y + r * n;
          const T* gr = g + r * n;
          T dot = 0;
          for (int64_t i = 0; i < n; ++i) dot += yr[i] * gr[i];
          T* gxr = gx + r * n;
          for (int64_t i = 0; i < n; ++i) gxr[i] += yr[i] * (gr[i] - dot);
        }
      }
      oc.zero_grad();
    });
    out.attach(tape, id);
  }
  finish_op(out, "softmax_lastdim");
  return out;
}

// ---- reductions ----------------------------------------------------------------

namespace {

template <typename T>
void reduce_scatter_axes(const Shape& in_shape, const std::vector<int>& axes,
                         Shape* out_shape_keep, std::vector<int64_t>* out_strides,
                         const char* op) {
  const int rank = static_cast<int>(in_shape.size());
  std::vector<char> reduced(static_cast<size_t>(rank), 0);
  for (int ax : axes) {
    if (ax < 0 || ax >= rank)
      throw DimensionError(std::string(op) + ": axis " + std::to_string(ax) +
                           " out of range for shape " + shape_str(in_shape));
    reduced[static_cast<size_t>(ax)] = 1;
  }
  out_shape_keep->resize(static_cast<size_t>(rank));
  for (int i = 0; i < rank; ++i)
    (*out_shape_keep)[static_cast<size_t>(i)] =
        reduced[static_cast<size_t>(i)] ? 1 : in_shape[static_cast<size_t>(i)];
  // strides of the kept-dims output, 0 on reduced axes
  out_strides->assign(static_cast<size_t>(rank), 0);
  int64_t acc = 1;
  for (int i = rank; i-- > 0;) {
    if (!reduced[static_cast<size_t>(i)]) {
      (*out_strides)[static_cast<size_t>(i)] = acc;
      acc *= in_shape[static_cast<size_t>(i)];
    }
  }
}

// walks input linear order, fn(in_off, out_off)
template <typename Fn>
void reduce_walk(const Shape& in_shape, const std::vector<int64_t>& out_strides,
                 Fn&& fn) {
  const size_t rank = in_shape.size();
  if (rank == 0) {
    fn(0, 0);
    return;
  }
  auto rec = [&](auto&& self, size_t axis, int64_t io, int64_t oo) -> void {
    if (axis == rank - 1) {
      const int64_t n = in_shape[axis];
      const int64_t os = out_strides[axis];
      for (int64_t i = 0; i < n; ++i) fn(io + i, oo + i * os);
      return;
    }
    int64_t stride = 1;
    for (size_t j = axis + 1; j < rank; ++j) stride *= in_shape[j];
    for (int64_t i = 0; i < in_shape[axis]; ++i)
      self(self, axis + 1, io + i * stride, oo + i * out_strides[axis]);
  };
  rec(rec, 0, 0, 0);
}

}  // namespace

template <typename T>
TensorT<T> reduce(const TensorT<T>& x, Reduce op, const std::vector<int>& axes,
                  bool keepdims) {
  std::vector<int> ax = axes;
  if (ax.empty())
    for (int i = 0; i < x.rank(); ++i) ax.push_back(i);
  Shape keep_shape;
  std::vector<int64_t> ostr;
  reduce_scatter_axes<T>(x.shape(), ax, &keep_shape, &ostr, "reduce");

  TensorT<T> out = TensorT<T>::zeros(keep_shape);
  const T* px = x.data();
  T* po = out.data();
  reduce_walk(x.shape(), ostr, [&](int64_t i, int64_t o) { po[o] += px[i]; });
  const int64_t count = out.numel() > 0 ? x.numel() / out.numel() : 1;
  if (op == Reduce::kMean) {
    const T inv = T(1) / static_cast<T>(count);
    for (int64_t i = 0; i < out.numel(); ++i) po[i] *= inv;
  }

  auto tape = common_tape<T>({&x});
  if (tape) {
    TensorT<T> xc = x, oc = out;
    const T w = op == Reduce::kMean ? T(1) / static_cast<T>(count) : T(1);
    std::vector<int64_t> ostr_c = ostr;
    int id = tape->record({x.node()}, [xc, oc, ostr_c, w]() mutable {
      const std::vector<T>* gp = oc.grad_if_any();
      if (gp && wants_grad(xc)) {
        const T* g = gp->data();
        T* gx = xc.grad().data();
        reduce_walk(xc.shape(), ostr_c,
                    [&](int64_t i, int64_t o) { gx[i] += g[o] * w; });
      }
      oc.zero_grad();
    });
    out.attach(tape, id);
  }

  if (!keepdims) {
    // squeeze reduced axes without another tape record
    Shape squeezed;
    std::vector<char> reduced(static_cast<size_t>(x.rank()), 0);
    for (int a : ax) reduced[static_cast<size_t>(a)] = 1;
    for (int i = 0; i < x.rank(); ++i)
      if (!reduced[static_cast<size_t>(i)]) squeezed.push_back(x.dim(i));
    out = reshape(out, squeezed);
  }
  finish_op(out, "reduce");
  return out;
}

template <typename T>
TensorT<T> sum_all(const TensorT<T>& x) {
  return reduce(x, Reduce::kSum, {}, false);
}

template <typename T>
TensorT<T> mean_all(const TensorT<T>& x) {
  return reduce(x, Reduce::kMean, {}, false);
}

// ---- shape ops -------------------------------------------------------------------

namespace {

// Shared machinery for pure data-movement ops: out[i] = in[perm[i]] with the
// gradient scattered back through the same index map.
template <typename T>
TensorT<T> gather_op(const TensorT<T>& x, Shape out_shape,
                     std::shared_ptr<std::vector<int64_t>> idx, const char* name) {
  TensorT<T> out = TensorT<T>::zeros(std::move(out_shape));
  const T* px = x.data();
  T* po = out.data();
  const auto& map = *idx;
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = px[map[static_cast<size_t>(i)]];

  auto tape = common_tape<T>({&x});
  if (tape) {
    TensorT<T> xc = x, oc = out;
    int id = tape->record({x.node()}, [xc, oc, idx]() mutable {
      const std::vector<T>* gp = oc.grad_if_any();
      if (gp && wants_grad(xc)) {
        const T* g = gp->data();
        T* gx = xc.grad().data();
        const auto& map2 = *idx;
        const int64_t m = oc.numel();
        for (int64_t i = 0; i < m; ++i) gx[map2[static_cast<size_t>(i)]] += g[i];
      }
      oc.zero_grad();
    });
    out.attach(tape, id);
  }
  finish_op(out, name);
  return out;
}

}  // namespace

template <typename T>
TensorT<T> reshape(const TensorT<T>& x, Shape new_shape) {
  int64_t known = 1;
  int infer = -1;
  for (size_t i = 0; i < new_shape.size(); ++i) {
    if (new_shape[i] == -1) {
      if (infer >= 0) throw DimensionError("reshape: more than one -1 extent");
      infer = static_cast<int>(i);
    } else {
      known *= new_shape[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || x.numel() % known != 0)
      throw DimensionError("reshape: cannot infer extent for " +
                           shape_str(x.shape()) + " -> " + shape_str(new_shape));
    new_shape[static_cast<size_t>(infer)] = x.numel() / known;
    known *= new_shape[static_cast<size_t>(infer)];
  }
  if (known != x.numel())
    throw DimensionError("reshape: element count changes from " +
                         shape_str(x.shape()) + " to " + shape_str(new_shape));

  TensorT<T> out = TensorT<T>::zeros(new_shape);
  std::memcpy(out.data(), x.data(), sizeof(T) * static_cast<size_t>(x.numel()));

  auto tape = common_tape<T>({&x});
  if (tape) {
    TensorT<T> xc = x, oc = out;
    int id = tape->record({x.node()}, [xc, oc]() mutable {
      const std::vector<T>* gp = oc.grad_if_any();
      if (gp && wants_grad(xc)) {
        const T* g = gp->data();
        T* gx = xc.grad().data();
        const int64_t n = xc.numel();
        for (int64_t i = 0; i < n; ++i) gx[i] += g[i];
      }
      oc.zero_grad();
    });
    out.attach(tape, id);
  }
  finish_op(out, "reshape");
  return out;
}

template <typename T>
TensorT<T> permute(const TensorT<T>& x, const std::vector<int>& perm) {
  const int rank = x.rank();
  if (static_cast<int>(perm.size()) != rank)
    throw DimensionError("permute: permutation size " +
                         std::to_string(perm.size()) + " vs rank " +
                         std::to_string(rank));
  std::vector<char> seen(static_cast<size_t>(rank), 0);
  for (int p : perm) {
    if (p < 0 || p >= rank || seen[static_cast<size_t>(p)])
      throw DimensionError("permute: invalid permutation for shape " +
                           shape_str(x.shape()));
    seen[static_cast<size_t>(p)] = 1;
  }
  Shape oshape(static_cast<size_t>(rank));
  for (int i = 0; i < rank; ++i)
    oshape[static_cast<size_t>(i)] = x.dim(perm[static_cast<size_t>(i)]);

  std::vector<int64_t> in_strides(static_cast<size_t>(rank));
  int64_t acc = 1;
  for (int i = rank; i-- > 0;) {
    in_strides[static_cast<size_t>(i)] = acc;
    acc *= x.dim(i);
  }
  auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(x.numel()));
  // enumerate output positions in order, mapping to input offsets
  std::vector<int64_t> pos(static_cast<size_t>(rank), 0);
  for (int64_t o = 0; o < x.numel(); ++o) {
    int64_t in_off = 0;
    for (int i = 0; i < rank; ++i)
      in_off += pos[static_cast<size_t>(i)] *
                in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    (*idx)[static_cast<size_t>(o)] = in_off;
    for (int i = rank - 1; i >= 0; --i) {
      if (++pos[static_cast<size_t>(i)] < oshape[static_cast<size_t>(i)]) break;
      pos[static_cast<size_t>(i)] = 0;
    }
  }
  return gather_op(x, std::move(oshape), std::move(idx), "permute");
}

template <typename T>
TensorT<T> transpose_last2(const TensorT<T>& x) {
  std::vector<int> perm(static_cast<size_t>(x.rank()));
  std::iota(perm.begin(), perm.end(), 0);
  if (x.rank() < 2)
    throw DimensionError("transpose_last2: rank " + std::to_string(x.rank()));
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(x, perm);
}

template <typename T>
TensorT<T> concat(const std::vector<TensorT<T>>& xs, int axis) {
  if (xs.empty()) throw UsageError("concat: empty input list");
  const int rank = xs[0].rank();
  if (axis < 0 || axis >= rank)
    throw DimensionError("concat: axis " + std::to_string(axis) +
                         " out of range");
  Shape oshape = xs[0].shape();
  int64_t total_axis = 0;
  for (const auto& x : xs) {
    if (x.rank() != rank)
      throw DimensionError("concat: rank mismatch between inputs");
    for (int i = 0; i < rank; ++i)
      if (i != axis && x.dim(i) != oshape[static_cast<size_t>(i)])
        throw DimensionError("concat: shape " + shape_str(x.shape()) +
                             " differs off-axis from " + shape_str(xs[0].shape()));
    total_axis += x.dim(axis);
  }
  oshape[static_cast<size_t>(axis)] = total_axis;

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= oshape[static_cast<size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) inner *= oshape[static_cast<size_t>(i)];

  TensorT<T> out = TensorT<T>::zeros(oshape);
  T* po = out.data();
  const int64_t out_row = total_axis * inner;
  int64_t off = 0;
  for (const auto& x : xs) {
    const int64_t seg = x.dim(axis) * inner;
    const T* px = x.data();
    for (int64_t ou = 0; ou < outer; ++ou)
      std::memcpy(po + ou * out_row + off, px + ou * seg,
                  sizeof(T) * static_cast<size_t>(seg));
    off += seg;
  }

  std::vector<const TensorT<T>*> ptrs;
  for (const auto& x : xs) ptrs.push_back(&x);
  std::shared_ptr<TapeT<T>> tape;
  for (const auto& x : xs) {
    auto tp = x.tape();
    if (!tp) continue;
    if (!tape) tape = tp;
    else if (tape != tp) throw UsageError("concat: inputs on different tapes");
  }
  if (tape) {
    std::vector<TensorT<T>> xc = xs;
    TensorT<T> oc = out;
    std::vector<int> parents;
    for (const auto& x : xs) parents.push_back(x.node());
    int id = tape->record(parents, [xc, oc, outer, inner, out_row]() mutable {
      const std::vector<T>* gp = oc.grad_if_any();
      if (gp) {
        const T* g = gp->data();
        int64_t off2 = 0;
        for (auto& x : xc) {
          const int64_t seg = x.numel() / outer;
          if (wants_grad(x)) {
            T* gx = x.grad().data();
            for (int64_t ou = 0; ou < outer; ++ou) {
              const T* gsrc = g + ou * out_row + off2;
              T* gdst = gx + ou * seg;
              for (int64_t i = 0; i < seg; ++i) gdst[i] += gsrc[i];
            }
          }
          off2 += seg;
        }
      }
      oc.zero_grad();
    });
    out.attach(tape, id);
  }
  finish_op(out, "concat");
  return out;
}

template <typename T>
TensorT<T> slice(const TensorT<T>& x, int axis, int64_t start, int64_t len) {
  const int rank = x.rank();
  if (axis < 0 || axis >= rank)
    throw DimensionError("slice: axis " + std::to_string(axis) + " out of range");
  if (start < 0 || len < 0 || start + len > x.dim(axis))
    throw DimensionError("slice: range [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") exceeds extent " +
                         std::to_string(x.dim(axis)));
  Shape oshape = x.shape();
  oshape[static_cast<size_t>(axis)] = len;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < rank; ++i) inner *= x.dim(i);
  const int64_t in_row = x.dim(axis) * inner;
  const int64_t seg = len * inner;
  const int64_t off = start * inner;

  TensorT<T> out = TensorT<T>::zeros(oshape);
  T* po = out.data();
  const T* px = x.data();
  for (int64_t ou = 0; ou < outer; ++ou)
    std::memcpy(po + ou * seg, px + ou * in_row + off,
                sizeof(T) * static_cast<size_t>(seg));

  auto tape = common_tape<T>({&x});
  if (tape) {
    TensorT<T> xc = x, oc = out;
    int id = tape->record({x.node()}, [xc, oc, outer, seg, in_row, off]() mutable {
      const std::vector<T>* gp = oc.grad_if_any();
      if (gp && wants_grad(xc)) {
        const T* g = gp->data();
        T* gx = xc.grad().data();
        for (int64_t ou = 0; ou < outer; ++ou) {
          T* dst = gx + ou * in_row + off;
          const T* src = g + ou * seg;
          for (int64_t i = 0; i < seg; ++i) dst[i] += src[i];
        }
      }
      oc.zero_grad();
    });
    out.attach(tape, id);
  }
  finish_op(out, "slice");
  return out;
}

template <typename T>
TensorT<T> pad(const TensorT<T>& x, const std::vector<int64_t>& lo,
               const std::vector<int64_t>& hi) {
  const int rank = x.rank();
  if (static_cast<int>(lo.size()) != rank || static_cast<int>(hi.size()) != rank)
    throw DimensionError("pad: padding lists must match rank " +
                         std::to_string(rank));
  Shape oshape(static_cast<size_t>(rank));
  for (int i = 0; i < rank; ++i) {
    if (lo[static_cast<size_t>(i)] < 0 || hi[static_cast<size_t>(i)] < 0)
      throw DimensionError("pad: negative padding");
    oshape[static_cast<size_t>(i)] =
        x.dim(i) + lo[static_cast<size_t>(i)] + hi[static_cast<size_t>(i)];
  }
  TensorT<T> out = TensorT<T>::zeros(oshape);
  std::vector<int64_t> istr(static_cast<size_t>(rank)), ostr(static_cast<size_t>(rank));
  int64_t acc = 1;
  for (int i = rank; i-- > 0;) { istr[static_cast<size_t>(i)] = acc; acc *= x.dim(i); }
  acc = 1;
  for (int i = rank; i-- > 0;) { ostr[static_cast<size_t>(i)] = acc; acc *= oshape[static_cast<size_t>(i)]; }

  // copy x into the interior
  const T* px = x.data();
  T* po = out.data();
  auto rec = [&](auto&& self, int axis, int64_t io, int64_t oo) -> void {
    if (axis == rank - 1 || rank == 0) {
      const int64_t n = rank == 0 ? 1 : x.dim(axis);
      const int64_t shift = rank == 0 ? 0 : lo[static_cast<size_t>(axis)];
      std::memcpy(po + oo + shift, px + io, sizeof(T) * static_cast<size_t>(n));
      return;
    }
    for (int64_t i = 0; i < x.dim(axis); ++i)
      self(self, axis + 1, io + i * istr[static_cast<size_t>(axis)],
           oo + (i + lo[static_cast<size_t>(axis)]) * ostr[static_cast<size_t>(axis)]);
  };
  if (x.numel() > 0) rec(rec, 0, 0, 0);

  auto tape = common_tape<T>({&x});
  if (tape) {
    TensorT<T> xc = x, oc = out;
    std::vector<int64_t> lo_c = lo;
    int id = tape->record({x.node()}, [xc, oc, lo_c, istr, ostr]() mutable {
      const std::vector<T>* gp = oc.grad_if_any();
      if (gp && wants_grad(xc)) {
        const T* g = gp->data();
        T* gx = xc.grad().data();
        const int rank2 = xc.rank();
        auto rec2 = [&](auto&& self, int axis, int64_t io, int64_t oo) -> void {
          if (axis == rank2 - 1 || rank2 == 0) {
            const int64_t n = rank2 == 0 ? 1 : xc.dim(axis);
            const int64_t shift = rank2 == 0 ? 0 : lo_c[static_cast<size_t>(axis)];
            for (int64_t i = 0; i < n; ++i) gx[io + i] += g[oo + shift + i];
            return;
          }
          for (int64_t i = 0; i < xc.dim(axis); ++i)
            self(self, axis + 1, io + i * istr[static_cast<size_t>(axis)],
                 oo + (i + lo_c[static_cast<size_t>(axis)]) * ostr[static_cast<size_t>(axis)]);
        };
        if (xc.numel() > 0) rec2(rec2, 0, 0, 0);
      }
      oc.zero_grad();
    });
    out.attach(tape, id);
  }
  finish_op(out, "pad");
  return out;
}

void WindowLayout::validate() const {
  if (wx <= 0 || wy <= 0 || wz <= 0 || gx <= 0 || gy <= 0 || gz <= 0)
    throw ConfigError("window layout: extents must be positive");
  if (gx % wx || gy % wy || gz % wz)
    throw ConfigError("window layout: window [" + std::to_string(wx) + "," +
                      std::to_string(wy) + "," + std::to_string(wz) +
                      "] does not tile token grid [" + std::to_string(gx) + "," +
                      std::to_string(gy) + "," + std::to_string(gz) + "]");
}

namespace {

// row map: for each output token row, the source row in the flat grid
std::shared_ptr<std::vector<int64_t>> window_row_map(const WindowLayout& l) {
  auto map = std::make_shared<std::vector<int64_t>>();
  map->reserve(static_cast<size_t>(l.tokens()));
  const int64_t nx = l.gx / l.wx, ny = l.gy / l.wy, nz = l.gz / l.wz;
  for (int64_t bx = 0; bx < nx; ++bx)
    for (int64_t by = 0; by < ny; ++by)
      for (int64_t bz = 0; bz < nz; ++bz)
        for (int64_t ix = 0; ix < l.wx; ++ix)
          for (int64_t iy = 0; iy < l.wy; ++iy)
            for (int64_t iz = 0; iz < l.wz; ++iz) {
              const int64_t x = bx * l.wx + ix;
              const int64_t y = by * l.wy + iy;
              const int64_t z = bz * l.wz + iz;
              map->push_back((x * l.gy + y) * l.gz + z);
            }
  return map;
}

}  // namespace

template <typename T>
TensorT<T> window_partition(const TensorT<T>& x, const WindowLayout& layout) {
  layout.validate();
  if (x.rank() != 2 || x.dim(0) != layout.tokens())
    throw DimensionError("window_partition: tokens " + shape_str(x.shape()) +
                         " do not match grid of " +
                         std::to_string(layout.tokens()));
  const int64_t C = x.dim(1);
  auto rows = window_row_map(layout);
  auto idx = std::make_shared<std::vector<int64_t>>(
      static_cast<size_t>(layout.tokens() * C));
  for (int64_t r = 0; r < layout.tokens(); ++r)
    for (int64_t c = 0; c < C; ++c)
      (*idx)[static_cast<size_t>(r * C + c)] = (*rows)[static_cast<size_t>(r)] * C + c;
  return gather_op(x, {layout.tokens(), C}, std::move(idx), "window_partition");
}

template <typename T>
TensorT<T> window_merge(const TensorT<T>& x, const WindowLayout& layout) {
  layout.validate();
  if (x.rank() != 2 || x.dim(0) != layout.tokens())
    throw DimensionError("window_merge: tokens " + shape_str(x.shape()) +
                         " do not match grid of " +
                         std::to_string(layout.tokens()));
  const int64_t C = x.dim(1);
  auto rows = window_row_map(layout);
  // invert: output grid row g comes from partitioned row r where rows[r]==g
  std::vector<int64_t> inv(static_cast<size_t>(layout.tokens()));
  for (int64_t r = 0; r < layout.tokens(); ++r)
    inv[static_cast<size_t>((*rows)[static_cast<size_t>(r)])] = r;
  auto idx = std::make_shared<std::vector<int64_t>>(
      static_cast<size_t>(layout.tokens() * C));
  for (int64_t g = 0; g < layout.tokens(); ++g)
    for (int64_t c = 0; c < C; ++c)
      (*idx)[static_cast<size_t>(g * C + c)] = inv[static_cast<size_t>(g)] * C + c;
  return gather_op(x, {layout.tokens(), C}, std::move(idx), "window_merge");
}

// ---- autodiff -------------------------------------------------------------------

template <typename T>
void backward(TensorT<T>& root) {
  if (root.numel() != 1)
    throw UsageError("backward: root must be a scalar, got shape " +
                     shape_str(root.shape()));
  auto tape = root.tape();
  root.grad()[0] += T(1);
  if (tape) tape->backward_from(root.node());
}

// ---- misc -------------------------------------------------------------------------

template <typename T>
TensorT<T> random_uniform(Shape shape, Rng& rng, T lo, T hi) {
  TensorT<T> t = TensorT<T>::zeros(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <typename T>
TensorT<T> random_normal(Shape shape, Rng& rng, T sigma) {
  TensorT<T> t = TensorT<T>::zeros(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = static_cast<T>(rng.normal() * sigma);
  return t;
}

template <typename T>
TensorT<T> truncated_normal(Shape shape, Rng& rng, T sigma) {
  TensorT<T> t = TensorT<T>::zeros(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = static_cast<T>(rng.truncated_normal(sigma));
  return t;
}

template <typename T>
bool all_finite(const TensorT<T>& x) {
  const T* p = x.data();
  for (int64_t i = 0; i < x.numel(); ++i)
    if (!std::isfinite(p[i])) return false;
  return true;
}

template <typename T>
void require_finite(const TensorT<T>& x, const char* where) {
  if (!all_finite(x))
    throw std::runtime_error(std::string(where) +
                             ": non-finite value in tensor of shape " +
                             shape_str(x.shape()));
}

template <typename T>
std::vector<uint8_t> argmax_channels(const TensorT<T>& logits) {
  if (logits.rank() < 2)
    throw DimensionError("argmax_channels: need [B,K,...], got " +
                         shape_str(logits.shape()));
  const int64_t B = logits.dim(0);
  const int64_t K = logits.dim(1);
  int64_t sp = 1;
  for (int i = 2; i < logits.rank(); ++i) sp *= logits.dim(i);
  std::vector<uint8_t> out(static_cast<size_t>(B * sp));
  const T* p = logits.data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t v = 0; v < sp; ++v) {
      int best = 0;
      T bv = p[(b * K) * sp + v];
      for (int64_t k = 1; k < K; ++k) {
        T cv = p[(b * K + k) * sp + v];
        if (cv > bv) { bv = cv; best = static_cast<int>(k); }
      }
      out[static_cast<size_t>(b * sp + v)] = static_cast<uint8_t>(best);
    }
  return out;
}

// ---- explicit instantiations ---------------------------------------------------

#define SEGSTITCH_INST_OPS(T)                                                     \
  template TensorT<T> add<T>(const TensorT<T>&, const TensorT<T>&);               \
  template TensorT<T> sub<T>(const TensorT<T>&, const TensorT<T>&);               \
  template TensorT<T> mul<T>(const TensorT<T>&, const TensorT<T>&);               \
  template TensorT<T> div<T>(const TensorT<T>&, const TensorT<T>&);               \
  template TensorT<T> scale<T>(const TensorT<T>&, T);                             \
  template TensorT<T> neg<T>(const TensorT<T>&);                                  \
  template TensorT<T> sin_op<T>(const TensorT<T>&);                               \
  template TensorT<T> square<T>(const TensorT<T>&);                               \
  template TensorT<T> tanh_op<T>(const TensorT<T>&);                              \
  template TensorT<T> sigmoid<T>(const TensorT<T>&);                              \
  template TensorT<T> matmul<T>(const TensorT<T>&, const TensorT<T>&);            \
  template TensorT<T> softmax_lastdim<T>(const TensorT<T>&);                      \
  template TensorT<T> reduce<T>(const TensorT<T>&, Reduce, const std::vector<int>&, bool); \
  template TensorT<T> sum_all<T>(const TensorT<T>&);                              \
  template TensorT<T> mean_all<T>(const TensorT<T>&);                             \
  template TensorT<T> reshape<T>(const TensorT<T>&, Shape);                       \
  template TensorT<T> permute<T>(const TensorT<T>&, const std::vector<int>&);     \
  template TensorT<T> transpose_last2<T>(const TensorT<T>&);                      \
  template TensorT<T> concat<T>(const std::vector<TensorT<T>>&, int);             \
  template TensorT<T> slice<T>(const TensorT<T>&, int, int64_t, int64_t);         \
  template TensorT<T> pad<T>(const TensorT<T>&, const std::vector<int64_t>&, const std::vector<int64_t>&); \
  template TensorT<T> window_partition<T>(const TensorT<T>&, const WindowLayout&); \
  template TensorT<T> window_merge<T>(const TensorT<T>&, const WindowLayout&);    \
  template void backward<T>(TensorT<T>&);                                         \
  template TensorT<T> random_uniform<T>(Shape, Rng&, T, T);                       \
  template TensorT<T> random_normal<T>(Shape, Rng&, T);                           \
  template TensorT<T> truncated_normal<T>(Shape, Rng&, T);                        \
  template bool all_finite<T>(const TensorT<T>&);                                 \
  template void require_finite<T>(const TensorT<T>&, const char*);                \
  template std::vector<uint8_t> argmax_channels<T>(const TensorT<T>&);

SEGSTITCH_INST_OPS(float)
SEGSTITCH_INST_OPS(double)

#undef SEGSTITCH_INST_OPS

}  // namespace segstitch
