#include <algorithm>
#include <cmath>

#include "segstitch/ops.hpp"

namespace segstitch {

namespace {

template <typename T>
std::shared_ptr<TapeT<T>> tape_of3(const TensorT<T>& a, const TensorT<T>& b,
                                   const TensorT<T>& c) {
  std::shared_ptr<TapeT<T>> tape;
  for (const TensorT<T>* t : {&a, &b, &c}) {
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
bool wants_grad(const TensorT<T>& t) {
  return t.on_tape() || t.requires_grad();
}

struct ConvDims {
  int64_t B, Cin, H, W, D;
  int64_t Cout, k;
  int64_t Ho, Wo, Do;
  int stride, pad;
};

template <typename T>
ConvDims conv_dims(const TensorT<T>& x, const TensorT<T>& w,
                   const TensorT<T>& bias, int stride, int pad) {
  if (x.rank() != 5)
    throw DimensionError("conv3d: input must be [B,C,H,W,D], got " +
                         shape_str(x.shape()));
  if (w.rank() != 5 || w.dim(2) != w.dim(3) || w.dim(3) != w.dim(4))
    throw DimensionError("conv3d: weight must be [Cout,Cin,k,k,k], got " +
                         shape_str(w.shape()));
  ConvDims d{};
  d.B = x.dim(0); d.Cin = x.dim(1); d.H = x.dim(2); d.W = x.dim(3); d.D = x.dim(4);
  d.Cout = w.dim(0); d.k = w.dim(2);
  d.stride = stride; d.pad = pad;
  if (d.k % 2 == 0)
    throw ConfigError("conv3d: kernel extent must be odd, got " +
                      std::to_string(d.k));
  if (w.dim(1) != d.Cin)
    throw DimensionError("conv3d: weight " + shape_str(w.shape()) +
                         " does not match input channels of " +
                         shape_str(x.shape()));
  if (bias.rank() != 1 || bias.dim(0) != d.Cout)
    throw DimensionError("conv3d: bias " + shape_str(bias.shape()) +
                         " must be [Cout=" + std::to_string(d.Cout) + "]");
  if (stride < 1) throw ConfigError("conv3d: stride must be >= 1");
  auto out_extent = [&](int64_t in, const char* axis) {
    const int64_t num = in + 2 * pad - d.k;
    if (num < 0 || num % stride)
      throw ConfigError(std::string("conv3d: non-integral output extent on ") +
                        axis + " (in=" + std::to_string(in) +
                        ", k=" + std::to_string(d.k) +
                        ", stride=" + std::to_string(stride) +
                        ", pad=" + std::to_string(pad) + ")");
    return num / stride + 1;
  };
  d.Ho = out_extent(d.H, "H");
  d.Wo = out_extent(d.W, "W");
  d.Do = out_extent(d.D, "D");
  return d;
}

// Core cross-correlation. Loops are arranged so the innermost x walk is a
// contiguous saxpy at stride 1.
template <typename T>
void conv_forward_kernel(const T* x, const T* w, const T* bias, T* y,
                         const ConvDims& d) {
  const int64_t in_sp = d.H * d.W * d.D;
  const int64_t out_sp = d.Ho * d.Wo * d.Do;
  parallel_for(d.B * d.Cout, 1, [&](int64_t lo, int64_t hi) {
    for (int64_t bc = lo; bc < hi; ++bc) {
      const int64_t b = bc / d.Cout, co = bc % d.Cout;
      T* yb = y + (b * d.Cout + co) * out_sp;
      const T bv = bias[co];
      for (int64_t i = 0; i < out_sp; ++i) yb[i] = bv;
      for (int64_t ci = 0; ci < d.Cin; ++ci) {
        const T* xb = x + (b * d.Cin + ci) * in_sp;
        const T* wk = w + (co * d.Cin + ci) * d.k * d.k * d.k;
        for (int64_t kz = 0; kz < d.k; ++kz)
          for (int64_t ky = 0; ky < d.k; ++ky)
            for (int64_t kx = 0; kx < d.k; ++kx) {
              const T wv = wk[(kz * d.k + ky) * d.k + kx];
              if (wv == T(0)) continue;
              for (int64_t oz = 0; oz < d.Ho; ++oz) {
                const int64_t iz = oz * d.stride - d.pad + kz;
                if (iz < 0 || iz >= d.H) continue;
                for (int64_t oy = 0; oy < d.Wo; ++oy) {
                  const int64_t iy = oy * d.stride - d.pad + ky;
                  if (iy < 0 || iy >= d.W) continue;
                  // valid ox range: 0 <= ox*stride - pad + kx < D
                  int64_t ox0 = 0;
                  if (d.pad > kx)
                    ox0 = (d.pad - kx + d.stride - 1) / d.stride;
                  int64_t ox1 = std::min<int64_t>(
                      d.Do, (d.D - 1 - kx + d.pad) / d.stride + 1);
                  T* yrow = yb + (oz * d.Wo + oy) * d.Do;
                  const T* xrow = xb + (iz * d.W + iy) * d.D - d.pad + kx;
                  if (d.stride == 1) {
                    for (int64_t ox = ox0; ox < ox1; ++ox)
                      yrow[ox] += wv * xrow[ox];
                  } else {
                    for (int64_t ox = ox0; ox < ox1; ++ox)
                      yrow[ox] += wv * xrow[ox * d.stride];
                  }
                }
              }
            }
      }
    }
  });
}

template <typename T>
void conv_backward_x_kernel(const T* g, const T* w, T* gx, const ConvDims& d) {
  const int64_t in_sp = d.H * d.W * d.D;
  const int64_t out_sp = d.Ho * d.Wo * d.Do;
  parallel_for(d.B * d.Cin, 1, [&](int64_t lo, int64_t hi) {
    for (int64_t bc = lo; bc < hi; ++bc) {
      const int64_t b = bc / d.Cin, ci = bc % d.Cin;
      T* gxb = gx + (b * d.Cin + ci) * in_sp;
      for (int64_t co = 0; co < d.Cout; ++co) {
        const T* gb = g + (b * d.Cout + co) * out_sp;
        const T* wk = w + (co * d.Cin + ci) * d.k * d.k * d.k;
        for (int64_t kz = 0; kz < d.k; ++kz)
          for (int64_t ky = 0; ky < d.k; ++ky)
            for (int64_t kx = 0; kx < d.k; ++kx) {
              const T wv = wk[(kz * d.k + ky) * d.k + kx];
              if (wv == T(0)) continue;
              for (int64_t oz = 0; oz < d.Ho; ++oz) {
                const int64_t iz = oz * d.stride - d.pad + kz;
                if (iz < 0 || iz >= d.H) continue;
                for (int64_t oy = 0; oy < d.Wo; ++oy) {
                  const int64_t iy = oy * d.stride - d.pad + ky;
                  if (iy < 0 || iy >= d.W) continue;
                  int64_t ox0 = 0;
                  if (d.pad > kx)
                    ox0 = (d.pad - kx + d.stride - 1) / d.stride;
                  int64_t ox1 = std::min<int64_t>(
                      d.Do, (d.D - 1 - kx + d.pad) / d.stride + 1);
                  const T* grow = gb + (oz * d.Wo + oy) * d.Do;
                  T* gxrow = gxb + (iz * d.W + iy) * d.D - d.pad + kx;
                  if (d.stride == 1) {
                    for (int64_t ox = ox0; ox < ox1; ++ox)
                      gxrow[ox] += wv * grow[ox];
                  } else {
                    for (int64_t ox = ox0; ox < ox1; ++ox)
                      gxrow[ox * d.stride] += wv * grow[ox];
                  }
                }
              }
            }
      }
    }
  });
}

template <typename T>
void conv_backward_w_kernel(const T* g, const T* x, T* gw, const ConvDims& d) {
  const int64_t in_sp = d.H * d.W * d.D;
  const int64_t out_sp = d.Ho * d.Wo * d.Do;
  parallel_for(d.Cout * d.Cin, 1, [&](int64_t lo, int64_t hi) {
    for (int64_t cc = lo; cc < hi; ++cc) {
      const int64_t co = cc / d.Cin, ci = cc % d.Cin;
      T* wk = gw + (co * d.Cin + ci) * d.k * d.k * d.k;
      for (int64_t b = 0; b < d.B; ++b) {
        const T* gb = g + (b * d.Cout + co) * out_sp;
        const T* xb = x + (b * d.Cin + ci) * in_sp;
        for (int64_t kz = 0; kz < d.k; ++kz)
          for (int64_t ky = 0; ky < d.k; ++ky)
            for (int64_t kx = 0; kx < d.k; ++kx) {
              T acc = 0;
              for (int64_t oz = 0; oz < d.Ho; ++oz) {
                const int64_t iz = oz * d.stride - d.pad + kz;
                if (iz < 0 || iz >= d.H) continue;
                for (int64_t oy = 0; oy < d.Wo; ++oy) {
                  const int64_t iy = oy * d.stride - d.pad + ky;
                  if (iy < 0 || iy >= d.W) continue;
                  int64_t ox0 = 0;
                  if (d.pad > kx)
                    ox0 = (d.pad - kx + d.stride - 1) / d.stride;
                  int64_t ox1 = std::min<int64_t>(
                      d.Do, (d.D - 1 - kx + d.pad) / d.stride + 1);
                  const T* grow = gb + (oz * d.Wo + oy) * d.Do;
                  const T* xrow = xb + (iz * d.W + iy) * d.D - d.pad + kx;
                  if (d.stride == 1) {
                    for (int64_t ox = ox0; ox < ox1; ++ox)
                      acc += grow[ox] * xrow[ox];
                  } else {
                    for (int64_t ox = ox0; ox < ox1; ++ox)
                      acc += grow[ox] * xrow[ox * d.stride];
                  }
                }
              }
              wk[(kz * d.k + ky) * d.k + kx] += acc;
            }
      }
    }
  });
}

}  // namespace

template <typename T>
TensorT<T> conv3d(const TensorT<T>& x, const TensorT<T>& w,
                  const TensorT<T>& bias, int stride, int padding) {
  const ConvDims d = conv_dims(x, w, bias, stride, padding);
  TensorT<T> out = TensorT<T>::zeros({d.B, d.Cout, d.Ho, d.Wo, d.Do});
  conv_forward_kernel(x.data(), w.data(), bias.data(), out.data(), d);

  auto tape = tape_of3(x, w, bias);
  if (tape) {
    TensorT<T> xc = x, wc = w, bc = bias, oc = out;
    int id = tape->record({x.node(), w.node(), bias.node()},
                          [xc, wc, bc, oc, d]() mutable {
      const std::vector<T>* gp = oc.grad_if_any();
      if (gp) {
        const T* g = gp->data();
        if (wants_grad(xc))
          conv_backward_x_kernel(g, wc.data(), xc.grad().data(), d);
        if (wants_grad(wc))
          conv_backward_w_kernel(g, xc.data(), wc.grad().data(), d);
        if (wants_grad(bc)) {
          T* gb = bc.grad().data();
          const int64_t out_sp = d.Ho * d.Wo * d.Do;
          for (int64_t b = 0; b < d.B; ++b)
            for (int64_t co = 0; co < d.Cout; ++co) {
              const T* row = g + (b * d.Cout + co) * out_sp;
              T acc = 0;
              for (int64_t i = 0; i < out_sp; ++i) acc += row[i];
              gb[co] += acc;
            }
        }
      }
      oc.zero_grad();
    });
    out.attach(tape, id);
  }
  if (checked_mode()) require_finite(out, "conv3d");
  return out;
}

namespace {

struct TConvDims {
  int64_t B, Cin, H, W, D;  // input of the transposed conv
  int64_t Cout, k;          // output channels (conv3d's Cin side)
  int64_t Ho, Wo, Do;
  int stride;
};

template <typename T>
TConvDims tconv_dims(const TensorT<T>& x, const TensorT<T>& w,
                     const TensorT<T>& bias, int stride) {
  if (x.rank() != 5)
    throw DimensionError("conv_transpose3d: input must be [B,C,H,W,D], got " +
                         shape_str(x.shape()));
  if (w.rank() != 5 || w.dim(2) != w.dim(3) || w.dim(3) != w.dim(4))
    throw DimensionError("conv_transpose3d: weight must be [Cin,Cout,k,k,k], got " +
                         shape_str(w.shape()));
  if (stride < 1) throw ConfigError("conv_transpose3d: stride must be >= 1");
  TConvDims d{};
  d.B = x.dim(0); d.Cin = x.dim(1); d.H = x.dim(2); d.W = x.dim(3); d.D = x.dim(4);
  d.k = w.dim(2); d.Cout = w.dim(1); d.stride = stride;
  if (w.dim(0) != d.Cin)
    throw DimensionError("conv_transpose3d: weight " + shape_str(w.shape()) +
                         " does not match input channels of " +
                         shape_str(x.shape()));
  if (bias.rank() != 1 || bias.dim(0) != d.Cout)
    throw DimensionError("conv_transpose3d: bias " + shape_str(bias.shape()) +
                         " must be [Cout=" + std::to_string(d.Cout) + "]");
  d.Ho = (d.H - 1) * stride + d.k;
  d.Wo = (d.W - 1) * stride + d.k;
  d.Do = (d.D - 1) * stride + d.k;
  return d;
}

template <typename T>
void tconv_forward_kernel(const T* x, const T* w, const T* bias, T* y,
                          const TConvDims& d) {
  const int64_t in_sp = d.H * d.W * d.D;
  const int64_t out_sp = d.Ho * d.Wo * d.Do;
  parallel_for(d.B * d.Cout, 1, [&](int64_t lo, int64_t hi) {
    for (int64_t bc = lo; bc < hi; ++bc) {
      const int64_t b = bc / d.Cout, co = bc % d.Cout;
      T* yb = y + (b * d.Cout + co) * out_sp;
      const T bv = bias[co];
      for (int64_t i = 0; i < out_sp; ++i) yb[i] = bv;
      for (int64_t ci = 0; ci < d.Cin; ++ci) {
        const T* xb = x + (b * d.Cin + ci) * in_sp;
        const T* wk = w + (ci * d.Cout + co) * d.k * d.k * d.k;
        for (int64_t kz = 0; kz < d.k; ++kz)
          for (int64_t ky = 0; ky < d.k; ++ky)
            for (int64_t kx = 0; kx < d.k; ++kx) {
              const T wv = wk[(kz * d.k + ky) * d.k + kx];
              if (wv == T(0)) continue;
              for (int64_t z = 0; z < d.H; ++z) {
                const int64_t oz = z * d.stride + kz;
                for (int64_t yy = 0; yy < d.W; ++yy) {
                  const int64_t oy = yy * d.stride + ky;
                  const T* xrow = xb + (z * d.W + yy) * d.D;
                  T* yrow = yb + (oz * d.Wo + oy) * d.Do + kx;
                  if (d.stride == 1) {
                    for (int64_t xx = 0; xx < d.D; ++xx)
                      yrow[xx] += wv * xrow[xx];
                  } else {
                    for (int64_t xx = 0; xx < d.D; ++xx)
                      yrow[xx * d.stride] += wv * xrow[xx];
                  }
                }
              }
            }
      }
    }
  });
}

}  // namespace

template <typename T>
TensorT<T> conv_transpose3d(const TensorT<T>& x, const TensorT<T>& w,
                            const TensorT<T>& bias, int stride) {
  const TConvDims d = tconv_dims(x, w, bias, stride);
  TensorT<T> out = TensorT<T>::zeros({d.B, d.Cout, d.Ho, d.Wo, d.Do});
  tconv_forward_kernel(x.data(), w.data(), bias.data(), out.data(), d);

  auto tape = tape_of3(x, w, bias);
  if (tape) {
    TensorT<T> xc = x, wc = w, bc = bias, oc = out;
    int id = tape->record({x.node(), w.node(), bias.node()},
                          [xc, wc, bc, oc, d]() mutable {
      const std::vector<T>* gp = oc.grad_if_any();
      if (gp) {
        const T* g = gp->data();
        const int64_t in_sp = d.H * d.W * d.D;
        const int64_t out_sp = d.Ho * d.Wo * d.Do;
        if (wants_grad(xc)) {
          // dx[b,ci,z,y,x] = sum_{co,k} g[b,co,z*s+kz,...] * w[ci,co,k]
          T* gx = xc.grad().data();
          const T* pw = wc.data();
          parallel_for(d.B * d.Cin, 1, [&](int64_t lo, int64_t hi) {
            for (int64_t bc2 = lo; bc2 < hi; ++bc2) {
              const int64_t b = bc2 / d.Cin, ci = bc2 % d.Cin;
              T* gxb = gx + (b * d.Cin + ci) * in_sp;
              for (int64_t co = 0; co < d.Cout; ++co) {
                const T* gb = g + (b * d.Cout + co) * out_sp;
                const T* wk = pw + (ci * d.Cout + co) * d.k * d.k * d.k;
                for (int64_t kz = 0; kz < d.k; ++kz)
                  for (int64_t ky = 0; ky < d.k; ++ky)
                    for (int64_t kx = 0; kx < d.k; ++kx) {
                      const T wv = wk[(kz * d.k + ky) * d.k + kx];
                      if (wv == T(0)) continue;
                      for (int64_t z = 0; z < d.H; ++z) {
                        const int64_t oz = z * d.stride + kz;
                        for (int64_t yy = 0; yy < d.W; ++yy) {
                          const int64_t oy = yy * d.stride + ky;
                          T* gxrow = gxb + (z * d.W + yy) * d.D;
                          const T* grow = gb + (oz * d.Wo + oy) * d.Do + kx;
                          if (d.stride == 1) {
                            for (int64_t xx = 0; xx < d.D; ++xx)
                              gxrow[xx] += wv * grow[xx];
                          } else {
                            for (int64_t xx = 0; xx < d.D; ++xx)
                              gxrow[xx] += wv * grow[xx * d.stride];
                          }
                        }
                      }
                    }
              }
            }
          });
        }
        if (wants_grad(wc)) {
          T* gw = wc.grad().data();
          const T* px = xc.data();
          parallel_for(d.Cin * d.Cout, 1, [&](int64_t lo, int64_t hi) {
            for (int64_t cc = lo; cc < hi; ++cc) {
              const int64_t ci = cc / d.Cout, co = cc % d.Cout;
              T* wk = gw + (ci * d.Cout + co) * d.k * d.k * d.k;
              for (int64_t b = 0; b < d.B; ++b) {
                const T* xb = px + (b * d.Cin + ci) * in_sp;
                const T* gb = g + (b * d.Cout + co) * out_sp;
                for (int64_t kz = 0; kz < d.k; ++kz)
                  for (int64_t ky = 0; ky < d.k; ++ky)
                    for (int64_t kx = 0; kx < d.k; ++kx) {
                      T acc = 0;
                      for (int64_t z = 0; z < d.H; ++z) {
                        const int64_t oz = z * d.stride + kz;
                        for (int64_t yy = 0; yy < d.W; ++yy) {
                          const int64_t oy = yy * d.stride + ky;
                          const T* xrow = xb + (z * d.W + yy) * d.D;
                          const T* grow = gb + (oz * d.Wo + oy) * d.Do + kx;
                          if (d.stride == 1) {
                            for (int64_t xx = 0; xx < d.D; ++xx)
                              acc += xrow[xx] * grow[xx];
                          } else {
                            for (int64_t xx = 0; xx < d.D; ++xx)
                              acc += xrow[xx] * grow[xx * d.stride];
                          }
                        }
                      }
                      wk[(kz * d.k + ky) * d.k + kx] += acc;
                    }
              }
            }
          });
        }
        if (wants_grad(bc)) {
          T* gb2 = bc.grad().data();
          for (int64_t b = 0; b < d.B; ++b)
            for (int64_t co = 0; co < d.Cout; ++co) {
              const T* row = g + (b * d.Cout + co) * out_sp;
              T acc = 0;
              for (int64_t i = 0; i < out_sp; ++i) acc += row[i];
              gb2[co] += acc;
            }
        }
      }
      oc.zero_grad();
    });
    out.attach(tape, id);
  }
  if (checked_mode()) require_finite(out, "conv_transpose3d");
  return out;
}

// ---- normalization ------------------------------------------------------------

template <typename T>
TensorT<T> group_norm(const TensorT<T>& x, int groups, const TensorT<T>& gamma,
                      const TensorT<T>& beta, T eps) {
  if (x.rank() < 2)
    throw DimensionError("group_norm: input must be [B,C,...], got " +
                         shape_str(x.shape()));
  const int64_t B = x.dim(0), C = x.dim(1);
  if (groups < 1 || C % groups)
    throw ConfigError("group_norm: channel count " + std::to_string(C) +
                      " not divisible by " + std::to_string(groups) + " groups");
  if (gamma.numel() != C || beta.numel() != C)
    throw DimensionError("group_norm: gamma/beta must have C=" +
                         std::to_string(C) + " elements");
  int64_t sp = 1;
  for (int i = 2; i < x.rank(); ++i) sp *= x.dim(i);
  const int64_t cpg = C / groups;
  const int64_t gsize = cpg * sp;

  TensorT<T> out = TensorT<T>::zeros(x.shape());
  // saved statistics for backward
  auto mean = std::make_shared<std::vector<T>>(static_cast<size_t>(B * groups));
  auto rstd = std::make_shared<std::vector<T>>(static_cast<size_t>(B * groups));

  const T* px = x.data();
  const T* pg = gamma.data();
  const T* pb = beta.data();
  T* po = out.data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t g = 0; g < groups; ++g) {
      const T* xg = px + (b * C + g * cpg) * sp;
      T mu = 0;
      for (int64_t i = 0; i < gsize; ++i) mu += xg[i];
      mu /= static_cast<T>(gsize);
      T var = 0;
      for (int64_t i = 0; i < gsize; ++i) {
        const T dv = xg[i] - mu;
        var += dv * dv;
      }
      var /= static_cast<T>(gsize);
      const T rs = T(1) / std::sqrt(var + eps);
      (*mean)[static_cast<size_t>(b * groups + g)] = mu;
      (*rstd)[static_cast<size_t>(b * groups + g)] = rs;
      T* og = po + (b * C + g * cpg) * sp;
      for (int64_t c = 0; c < cpg; ++c) {
        const T ga = pg[g * cpg + c];
        const T be = pb[g * cpg + c];
        const T* xr = xg + c * sp;
        T* orow = og + c * sp;
        for (int64_t i = 0; i < sp; ++i) orow[i] = (xr[i] - mu) * rs * ga + be;
      }
    }

  auto tape = tape_of3(x, gamma, beta);
  if (tape) {
    TensorT<T> xc = x, gc = gamma, bc = beta, oc = out;
    const int64_t groups64 = groups;
    int id = tape->record({x.node(), gamma.node(), beta.node()},
                          [xc, gc, bc, oc, mean, rstd, groups64, B, C, sp, cpg,
                           gsize]() mutable {
      const std::vector<T>* gp = oc.grad_if_any();
      if (gp) {
        const T* g = gp->data();
        const T* px2 = xc.data();
        const T* pg2 = gc.data();
        const bool wx = wants_grad(xc), wg = wants_grad(gc), wb = wants_grad(bc);
        T* gx = wx ? xc.grad().data() : nullptr;
        T* gg = wg ? gc.grad().data() : nullptr;
        T* gb = wb ? bc.grad().data() : nullptr;
        for (int64_t b = 0; b < B; ++b)
          for (int64_t gr = 0; gr < groups64; ++gr) {
            const T mu = (*mean)[static_cast<size_t>(b * groups64 + gr)];
            const T rs = (*rstd)[static_cast<size_t>(b * groups64 + gr)];
            const T* xg = px2 + (b * C + gr * cpg) * sp;
            const T* dg = g + (b * C + gr * cpg) * sp;
            if (wg || wb) {
              for (int64_t c = 0; c < cpg; ++c) {
                const T* xr = xg + c * sp;
                const T* dr = dg + c * sp;
                T sg = 0, sb = 0;
                for (int64_t i = 0; i < sp; ++i) {
                  sg += dr[i] * (xr[i] - mu) * rs;
                  sb += dr[i];
                }
                if (gg) gg[gr * cpg + c] += sg;
                if (gb) gb[gr * cpg + c] += sb;
              }
            }
            if (wx) {
              // dxhat = dy*gamma; dx = rs*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
              T s1 = 0, s2 = 0;
              for (int64_t c = 0; c < cpg; ++c) {
                const T ga = pg2[gr * cpg + c];
                const T* xr = xg + c * sp;
                const T* dr = dg + c * sp;
                for (int64_t i = 0; i < sp; ++i) {
                  const T dxh = dr[i] * ga;
                  s1 += dxh;
                  s2 += dxh * (xr[i] - mu) * rs;
                }
              }
              s1 /= static_cast<T>(gsize);
              s2 /= static_cast<T>(gsize);
              T* gxg = gx + (b * C + gr * cpg) * sp;
              for (int64_t c = 0; c < cpg; ++c) {
                const T ga = pg2[gr * cpg + c];
                const T* xr = xg + c * sp;
                const T* dr = dg + c * sp;
                T* gxr = gxg + c * sp;
                for (int64_t i = 0; i < sp; ++i) {
                  const T xh = (xr[i] - mu) * rs;
                  gxr[i] += rs * (dr[i] * ga - s1 - xh * s2);
                }
              }
            }
          }
      }
      oc.zero_grad();
    });
    out.attach(tape, id);
  }
  if (checked_mode()) require_finite(out, "group_norm");
  return out;
}

template <typename T>
TensorT<T> layer_norm_lastdim(const TensorT<T>& x, const TensorT<T>& gamma,
                              const TensorT<T>& beta, T eps) {
  if (x.rank() < 1)
    throw DimensionError("layer_norm: scalar input");
  const int64_t C = x.dim(x.rank() - 1);
  if (gamma.numel() != C || beta.numel() != C)
    throw DimensionError("layer_norm: gamma/beta must have C=" +
                         std::to_string(C) + " elements");
  const int64_t rows = x.numel() / C;
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  auto mean = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
  auto rstd = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
  const T* px = x.data();
  const T* pg = gamma.data();
  const T* pb = beta.data();
  T* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = px + r * C;
    T mu = 0;
    for (int64_t i = 0; i < C; ++i) mu += xr[i];
    mu /= static_cast<T>(C);
    T var = 0;
    for (int64_t i = 0; i < C; ++i) { const T dv = xr[i] - mu; var += dv * dv; }
    var /= static_cast<T>(C);
    const T rs = T(1) / std::sqrt(var + eps);
    (*mean)[static_cast<size_t>(r)] = mu;
    (*rstd)[static_cast<size_t>(r)] = rs;
    T* orow = po + r * C;
    for (int64_t i = 0; i < C; ++i) orow[i] = (xr[i] - mu) * rs * pg[i] + pb[i];
  }

  auto tape = tape_of3(x, gamma, beta);
  if (tape) {
    TensorT<T> xc = x, gc = gamma, bc = beta, oc = out;
    int id = tape->record({x.node(), gamma.node(), beta.node()},
                          [xc, gc, bc, oc, mean, rstd, rows, C]() mutable {
      const std::vector<T>* gp = oc.grad_if_any();
      if (gp) {
        const T* g = gp->data();
        const T* px2 = xc.data();
        const T* pg2 = gc.data();
        const bool wx = wants_grad(xc), wg = wants_grad(gc), wb = wants_grad(bc);
        T* gx = wx ? xc.grad().data() : nullptr;
        T* gg = wg ? gc.grad().data() : nullptr;
        T* gb = wb ? bc.grad().data() : nullptr;
        for (int64_t r = 0; r < rows; ++r) {
          const T mu = (*mean)[static_cast<size_t>(r)];
          const T rs = (*rstd)[static_cast<size_t>(r)];
          const T* xr = px2 + r * C;
          const T* dr = g + r * C;
          if (wg || wb)
            for (int64_t i = 0; i < C; ++i) {
              if (gg) gg[i] += dr[i] * (xr[i] - mu) * rs;
              if (gb) gb[i] += dr[i];
            }
          if (wx) {
            T s1 = 0, s2 = 0;
            for (int64_t i = 0; i < C; ++i) {
              const T dxh = dr[i] * pg2[i];
              s1 += dxh;
              s2 += dxh * (xr[i] - mu) * rs;
            }
            s1 /= static_cast<T>(C);
            s2 /= static_cast<T>(C);
            T* gxr = gx + r * C;
            for (int64_t i = 0; i < C; ++i) {
              const T xh = (xr[i] - mu) * rs;
              gxr[i] += rs * (dr[i] * pg2[i] - s1 - xh * s2);
            }
          }
        }
      }
      oc.zero_grad();
    });
    out.attach(tape, id);
  }
  if (checked_mode()) require_finite(out, "layer_norm");
  return out;
}

#define SEGSTITCH_INST_CONV(T)                                                   \
  template TensorT<T> conv3d<T>(const TensorT<T>&, const TensorT<T>&,            \
                                const TensorT<T>&, int, int);                    \
  template TensorT<T> conv_transpose3d<T>(const TensorT<T>&, const TensorT<T>&,  \
                                          const TensorT<T>&, int);               \
  template TensorT<T> group_norm<T>(const TensorT<T>&, int, const TensorT<T>&,   \
                                    const TensorT<T>&, T);                       \
  template TensorT<T> layer_norm_lastdim<T>(const TensorT<T>&, const TensorT<T>&,\
                                            const TensorT<T>&, T);

SEGSTITCH_INST_CONV(float)
SEGSTITCH_INST_CONV(double)

#undef SEGSTITCH_INST_CONV

}  // namespace segstitch
