#include "rrca/ops.hpp"

#include "conv3x3.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace rrca {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using MapConstMat = Eigen::Map<const RowMat<T>>;

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b,
                              const std::string& what) {
  throw std::invalid_argument(std::string(op) + ": " + what + " (got " +
                              a.str() + " and " + b.str() + ")");
}

template <typename T>
Tape<T>& tape_of(Var<T> a) {
  if (!a.valid()) throw std::invalid_argument("operation on an empty Var");
  return *a.tape;
}

template <typename T>
void same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw std::invalid_argument("operands on different tapes");
}

struct ConvGeom {
  int cin, h, w, kh, kw, pad, ho, wo;
  std::size_t k() const { return static_cast<std::size_t>(cin) * kh * kw; }
  std::size_t hw_out() const { return static_cast<std::size_t>(ho) * wo; }
};

// col is (cin*kh*kw, ho*wo), row index = (ci*kh + ky)*kw + kx.
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  for (int ci = 0; ci < g.cin; ++ci) {
    const T* xp = x + static_cast<std::size_t>(ci) * g.h * g.w;
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        T* row = col + ((static_cast<std::size_t>(ci) * g.kh + ky) * g.kw + kx) *
                           g.hw_out();
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy + ky - g.pad;
          T* dst = row + static_cast<std::size_t>(oy) * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = xp + static_cast<std::size_t>(iy) * g.w;
          const int lo = std::max(0, g.pad - kx);
          const int hi = std::min(g.wo, g.w + g.pad - kx);
          std::fill(dst, dst + std::max(lo, 0), T(0));
          for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox + kx - g.pad];
          if (hi < g.wo) std::fill(dst + std::max(hi, 0), dst + g.wo, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeom& g, T* dx) {
  for (int ci = 0; ci < g.cin; ++ci) {
    T* xp = dx + static_cast<std::size_t>(ci) * g.h * g.w;
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        const T* row =
            col + ((static_cast<std::size_t>(ci) * g.kh + ky) * g.kw + kx) *
                      g.hw_out();
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy + ky - g.pad;
          if (iy < 0 || iy >= g.h) continue;
          const T* src = row + static_cast<std::size_t>(oy) * g.wo;
          T* dst = xp + static_cast<std::size_t>(iy) * g.w;
          const int lo = std::max(0, g.pad - kx);
          const int hi = std::min(g.wo, g.w + g.pad - kx);
          for (int ox = lo; ox < hi; ++ox) dst[ox + kx - g.pad] += src[ox];
        }
      }
    }
  }
}

bool broadcastable(const Shape& a, const Shape& b) {
  return a == b || (b.n == a.n && b.c == a.c && b.h == 1 && b.w == 1);
}

}  // namespace

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, std::optional<std::type_identity_t<Var<T>>> bias, int stride,
              int pad) {
  Tape<T>& tape = tape_of(x);
  same_tape(x, w);
  const Shape xs = x.shape();
  const Shape ws = w.shape();
  if (stride != 1) {
    throw std::invalid_argument("conv2d: only stride 1 is supported, got " +
                                std::to_string(stride));
  }
  if (ws.c != xs.c) shape_error("conv2d", xs, ws, "kernel input channels differ from input channels");
  if (ws.h != ws.w || (ws.h != 1 && ws.h != 3)) {
    shape_error("conv2d", xs, ws, "kernel must be 1x1 or 3x3");
  }
  if (pad < 0) throw std::invalid_argument("conv2d: negative padding");
  ConvGeom g{xs.c, xs.h, xs.w, ws.h, ws.w, pad, xs.h + 2 * pad - ws.h + 1,
             xs.w + 2 * pad - ws.w + 1};
  if (g.ho < 1 || g.wo < 1) shape_error("conv2d", xs, ws, "empty output");
  const int cout = ws.n;
  if (bias) {
    same_tape(x, *bias);
    const Shape bs = bias->shape();
    if (bs.numel() != static_cast<std::size_t>(cout)) {
      shape_error("conv2d", ws, bs, "bias length differs from output channels");
    }
  }

  const bool direct = g.kh == 1 && g.kw == 1 && pad == 0;
  // Wide 3x3 planes go through the bordered kernels; narrow ones stay on GEMM.
  const bool wide3 = g.kh == 3 && pad == 1 && g.wo >= 32;
  const std::size_t K = g.k();
  const std::size_t HW = g.hw_out();
  const std::size_t in_plane = static_cast<std::size_t>(xs.c) * xs.h * xs.w;
  Tensor<T> out(Shape{xs.n, cout, g.ho, g.wo});
  std::vector<T> col(direct || wide3 ? 0 : K * HW);
  std::vector<T> xb;
  const int wb = detail::bordered_width<T>(g.w);
  const T* xd = x.value().data().data();
  MapConstMat<T> W(w.value().data().data(), cout, K);
  for (int n = 0; n < xs.n; ++n) {
    const T* xn = xd + n * in_plane;
    MapMat<T> Y(out.data().data() + static_cast<std::size_t>(n) * cout * HW, cout, HW);
    if (wide3) {
      detail::border_planes(xn, g.cin, g.h, g.w, wb, xb);
      detail::conv3x3_bordered(xb.data(), g.cin, g.h, g.w, wb, w.value().data().data(), cout,
                               Y.data(), false);
    } else {
      if (!direct) im2col(xn, g, col.data());
      MapConstMat<T> C(direct ? xn : col.data(), K, HW);
      Y.noalias() = W * C;
    }
    if (bias) {
      const T* b = bias->value().data().data();
      for (int co = 0; co < cout; ++co) Y.row(co).array() += b[co];
    }
  }
  tape.add_macs(static_cast<std::uint64_t>(xs.n) * cout * HW * K);

  std::vector<int> inputs{x.id, w.id};
  if (bias) inputs.push_back(bias->id);
  const int xid = x.id, wid = w.id, bid = bias ? bias->id : -1;
  const int yid_placeholder = static_cast<int>(tape.size());
  return tape.record(
      OpKind::Conv2d, std::move(inputs), std::move(out),
      [=](Tape<T>& tp) {
        const int yid = yid_placeholder;
        const T* dy = tp.grad(yid).data();
        const T* xv = tp.value(xid).data().data();
        const bool need_x = tp.requires_grad(xid);
        const bool need_w = tp.requires_grad(wid);
        T* dw = need_w ? tp.grad(wid).data() : nullptr;
        T* dx = need_x ? tp.grad(xid).data() : nullptr;
        if (wide3) {
          const T* wv = tp.value(wid).data().data();
          const std::vector<T> wf = need_x ? detail::flip_transpose(wv, cout, g.cin) : std::vector<T>{};
          constexpr int L = detail::Simd<T>::lanes;
          const int wq = (g.w + L - 1) / L * L;
          std::vector<T> xb, dyb, dyq;
          for (int n = 0; n < xs.n; ++n) {
            const T* dyn = dy + static_cast<std::size_t>(n) * cout * HW;
            if (need_w) {
              detail::border_planes(xv + n * in_plane, g.cin, g.h, g.w, wb, xb);
              dyq.resize(static_cast<std::size_t>(cout) * g.h * wq);
              for (int r = 0; r < cout * g.h; ++r) {
                T* dst = dyq.data() + static_cast<std::size_t>(r) * wq;
                std::copy_n(dyn + static_cast<std::size_t>(r) * g.w, g.w, dst);
                std::fill(dst + g.w, dst + wq, T(0));
              }
              detail::conv3x3_weight_grad(xb.data(), g.cin, g.h, wb, dyq.data(), cout, wq, dw);
            }
            if (need_x) {
              detail::border_planes(dyn, cout, g.h, g.w, wb, dyb);
              detail::conv3x3_bordered(dyb.data(), cout, g.h, g.w, wb, wf.data(), g.cin,
                                       dx + n * in_plane, true);
            }
          }
        }
        std::vector<T> c(direct || wide3 ? 0 : K * HW);
        std::vector<T> dc(direct || wide3 || !need_x ? 0 : K * HW);
        MapConstMat<T> Wm(tp.value(wid).data().data(), cout, K);
        for (int n = 0; !wide3 && n < xs.n; ++n) {
          MapConstMat<T> dY(dy + static_cast<std::size_t>(n) * cout * HW, cout, HW);
          const T* xn = xv + n * in_plane;
          if (need_w) {
            if (!direct) im2col(xn, g, c.data());
            MapConstMat<T> C(direct ? xn : c.data(), K, HW);
            MapMat<T> dW(dw, cout, K);
            dW.noalias() += dY * C.transpose();
          }
          if (need_x) {
            if (direct) {
              MapMat<T> dX(dx + n * in_plane, K, HW);
              dX.noalias() += Wm.transpose() * dY;
            } else {
              MapMat<T> dC(dc.data(), K, HW);
              dC.noalias() = Wm.transpose() * dY;
              col2im_add(dc.data(), g, dx + n * in_plane);
            }
          }
        }
        if (bid >= 0 && tp.requires_grad(bid)) {
          T* db = tp.grad(bid).data();
          for (int n = 0; n < xs.n; ++n) {
            for (int co = 0; co < cout; ++co) {
              const T* p = dy + (static_cast<std::size_t>(n) * cout + co) * HW;
              T s = 0;
              for (std::size_t i = 0; i < HW; ++i) s += p[i];
              db[co] += s;
            }
          }
        }
      });
}

template <typename T>
Var<T> batchnorm2d(Var<T> x, Var<T> gamma, Var<T> beta, RunningStats<T>& stats,
                   NormMode mode, BatchNormOptions opt) {
  Tape<T>& tape = tape_of(x);
  same_tape(x, gamma);
  same_tape(x, beta);
  const Shape xs = x.shape();
  const std::size_t C = xs.c;
  if (gamma.value().numel() != C || beta.value().numel() != C) {
    shape_error("batchnorm2d", xs, gamma.shape(), "gamma/beta length differs from channels");
  }
  if (!(opt.eps > 0)) throw std::invalid_argument("batchnorm2d: eps must be positive");
  if (stats.mean.size() != C || stats.var.size() != C) {
    throw std::invalid_argument("batchnorm2d: running statistics sized " +
                                std::to_string(stats.mean.size()) + " for " +
                                std::to_string(C) + " channels");
  }
  const std::size_t HW = xs.plane();
  const std::size_t M = static_cast<std::size_t>(xs.n) * HW;
  const T eps = static_cast<T>(opt.eps);
  const T* xv = x.value().data().data();
  const T* gv = gamma.value().data().data();
  const T* bv = beta.value().data().data();

  std::vector<T> mean(C), invstd(C);
  if (mode == NormMode::Train) {
    const T mom = static_cast<T>(opt.momentum);
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0;
      for (int n = 0; n < xs.n; ++n) {
        const T* p = xv + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(M);
      double ss = 0;
      for (int n = 0; n < xs.n; ++n) {
        const T* p = xv + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) {
          const double d = p[i] - mu;
          ss += d * d;
        }
      }
      const double var = ss / static_cast<double>(M);
      mean[c] = static_cast<T>(mu);
      invstd[c] = static_cast<T>(1.0 / std::sqrt(var + opt.eps));
      const double unbiased = M > 1 ? ss / static_cast<double>(M - 1) : var;
      stats.mean[c] = (T(1) - mom) * stats.mean[c] + mom * static_cast<T>(mu);
      stats.var[c] = (T(1) - mom) * stats.var[c] + mom * static_cast<T>(unbiased);
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = stats.mean[c];
      invstd[c] = T(1) / std::sqrt(stats.var[c] + eps);
    }
  }

  Tensor<T> out(xs);
  T* yv = out.data().data();
  for (int n = 0; n < xs.n; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const T* p = xv + (n * C + c) * HW;
      T* q = yv + (n * C + c) * HW;
      const T a = gv[c] * invstd[c];
      const T b = bv[c] - a * mean[c];
      for (std::size_t i = 0; i < HW; ++i) q[i] = a * p[i] + b;
    }
  }

  const int xid = x.id, gid = gamma.id, bid = beta.id;
  const int yid = static_cast<int>(tape.size());
  const bool train = mode == NormMode::Train;
  return tape.record(
      OpKind::BatchNorm, {xid, gid, bid}, std::move(out),
      [=, mean = std::move(mean), invstd = std::move(invstd)](Tape<T>& tp) {
        const T* dy = tp.grad(yid).data();
        const T* xv2 = tp.value(xid).data().data();
        const T* g2 = tp.value(gid).data().data();
        T* dg = tp.requires_grad(gid) ? tp.grad(gid).data() : nullptr;
        T* db = tp.requires_grad(bid) ? tp.grad(bid).data() : nullptr;
        T* dx = tp.requires_grad(xid) ? tp.grad(xid).data() : nullptr;
        for (std::size_t c = 0; c < C; ++c) {
          double sdy = 0, sdyx = 0;
          for (int n = 0; n < xs.n; ++n) {
            const T* p = xv2 + (n * C + c) * HW;
            const T* d = dy + (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
              sdy += d[i];
              sdyx += d[i] * (p[i] - mean[c]) * invstd[c];
            }
          }
          if (dg) dg[c] += static_cast<T>(sdyx);
          if (db) db[c] += static_cast<T>(sdy);
          if (!dx) continue;
          const T k = g2[c] * invstd[c];
          if (train) {
            const T mdy = static_cast<T>(sdy / static_cast<double>(M));
            const T mdyx = static_cast<T>(sdyx / static_cast<double>(M));
            for (int n = 0; n < xs.n; ++n) {
              const T* p = xv2 + (n * C + c) * HW;
              const T* d = dy + (n * C + c) * HW;
              T* q = dx + (n * C + c) * HW;
              for (std::size_t i = 0; i < HW; ++i) {
                const T xhat = (p[i] - mean[c]) * invstd[c];
                q[i] += k * (d[i] - mdy - xhat * mdyx);
              }
            }
          } else {
            for (int n = 0; n < xs.n; ++n) {
              const T* d = dy + (n * C + c) * HW;
              T* q = dx + (n * C + c) * HW;
              for (std::size_t i = 0; i < HW; ++i) q[i] += k * d[i];
            }
          }
        }
      });
}

template <typename T>
Var<T> maxpool2(Var<T> x) {
  Tape<T>& tape = tape_of(x);
  const Shape xs = x.shape();
  if (xs.h % 2 != 0 || xs.w % 2 != 0) {
    throw std::invalid_argument("maxpool2: spatial dims must be even, got " +
                                xs.str());
  }
  const Shape ys{xs.n, xs.c, xs.h / 2, xs.w / 2};
  Tensor<T> out(ys);
  std::vector<std::uint32_t> arg(ys.numel());
  const T* xv = x.value().data().data();
  T* yv = out.data().data();
  const std::size_t planes = static_cast<std::size_t>(xs.n) * xs.c;
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xv + p * xs.plane();
    for (int oy = 0; oy < ys.h; ++oy) {
      for (int ox = 0; ox < ys.w; ++ox) {
        const std::size_t base = static_cast<std::size_t>(2 * oy) * xs.w + 2 * ox;
        const std::size_t cand[4] = {base, base + 1, base + xs.w, base + xs.w + 1};
        std::size_t best = cand[0];
        for (int k = 1; k < 4; ++k) {
          if (src[cand[k]] > src[best]) best = cand[k];
        }
        const std::size_t o = p * ys.plane() + static_cast<std::size_t>(oy) * ys.w + ox;
        yv[o] = src[best];
        arg[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  const int xid = x.id;
  const int yid = static_cast<int>(tape.size());
  return tape.record(OpKind::MaxPool2, {xid}, std::move(out),
                     [=, arg = std::move(arg)](Tape<T>& tp) {
                       const T* dy = tp.grad(yid).data();
                       T* dx = tp.grad(xid).data();
                       const std::size_t ip = xs.plane(), op = ys.plane();
                       for (std::size_t p = 0; p < planes; ++p) {
                         for (std::size_t i = 0; i < op; ++i) {
                           dx[p * ip + arg[p * op + i]] += dy[p * op + i];
                         }
                       }
                     });
}

namespace {

struct Tap {
  int i0, i1;
  double l0, l1;
};

std::vector<Tap> up2_taps(int in) {
  std::vector<Tap> taps(2 * in);
  for (int o = 0; o < 2 * in; ++o) {
    double src = (o + 0.5) / 2.0 - 0.5;
    if (src < 0) src = 0;
    const int i0 = static_cast<int>(src);
    const int i1 = i0 < in - 1 ? i0 + 1 : i0;
    const double l1 = src - i0;
    taps[o] = Tap{i0, i1, 1.0 - l1, l1};
  }
  return taps;
}

}  // namespace

template <typename T>
Var<T> bilinear_up2(Var<T> x) {
  Tape<T>& tape = tape_of(x);
  const Shape xs = x.shape();
  const Shape ys{xs.n, xs.c, 2 * xs.h, 2 * xs.w};
  const std::vector<Tap> ty = up2_taps(xs.h), tx = up2_taps(xs.w);
  Tensor<T> out(ys);
  const T* xv = x.value().data().data();
  T* yv = out.data().data();
  const std::size_t planes = static_cast<std::size_t>(xs.n) * xs.c;
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xv + p * xs.plane();
    T* dst = yv + p * ys.plane();
    for (int oy = 0; oy < ys.h; ++oy) {
      const Tap& a = ty[oy];
      const T* r0 = src + static_cast<std::size_t>(a.i0) * xs.w;
      const T* r1 = src + static_cast<std::size_t>(a.i1) * xs.w;
      for (int ox = 0; ox < ys.w; ++ox) {
        const Tap& b = tx[ox];
        dst[static_cast<std::size_t>(oy) * ys.w + ox] = static_cast<T>(
            a.l0 * (b.l0 * r0[b.i0] + b.l1 * r0[b.i1]) +
            a.l1 * (b.l0 * r1[b.i0] + b.l1 * r1[b.i1]));
      }
    }
  }
  const int xid = x.id;
  const int yid = static_cast<int>(tape.size());
  return tape.record(OpKind::BilinearUp2, {xid}, std::move(out), [=](Tape<T>& tp) {
    const T* dy = tp.grad(yid).data();
    T* dx = tp.grad(xid).data();
    for (std::size_t p = 0; p < planes; ++p) {
      const T* g = dy + p * ys.plane();
      T* d = dx + p * xs.plane();
      for (int oy = 0; oy < ys.h; ++oy) {
        const Tap& a = ty[oy];
        T* r0 = d + static_cast<std::size_t>(a.i0) * xs.w;
        T* r1 = d + static_cast<std::size_t>(a.i1) * xs.w;
        for (int ox = 0; ox < ys.w; ++ox) {
          const Tap& b = tx[ox];
          const double v = g[static_cast<std::size_t>(oy) * ys.w + ox];
          r0[b.i0] += static_cast<T>(a.l0 * b.l0 * v);
          r0[b.i1] += static_cast<T>(a.l0 * b.l1 * v);
          r1[b.i0] += static_cast<T>(a.l1 * b.l0 * v);
          r1[b.i1] += static_cast<T>(a.l1 * b.l1 * v);
        }
      }
    }
  });
}

template <typename T>
Var<T> global_pool(Var<T> x, PoolKind kind) {
  Tape<T>& tape = tape_of(x);
  const Shape xs = x.shape();
  const std::size_t planes = static_cast<std::size_t>(xs.n) * xs.c;
  const std::size_t HW = xs.plane();
  Tensor<T> out(Shape{xs.n, xs.c, 1, 1});
  std::vector<std::uint32_t> arg(kind == PoolKind::Max ? planes : 0);
  const T* xv = x.value().data().data();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xv + p * HW;
    if (kind == PoolKind::Max) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < HW; ++i) {
        if (src[i] > src[best]) best = i;
      }
      out[p] = src[best];
      arg[p] = static_cast<std::uint32_t>(best);
    } else {
      double s = 0;
      for (std::size_t i = 0; i < HW; ++i) s += src[i];
      out[p] = static_cast<T>(s / static_cast<double>(HW));
    }
  }
  const int xid = x.id;
  const int yid = static_cast<int>(tape.size());
  return tape.record(kind == PoolKind::Max ? OpKind::GlobalMax : OpKind::GlobalAvg,
                     {xid}, std::move(out),
                     [=, arg = std::move(arg)](Tape<T>& tp) {
                       const T* dy = tp.grad(yid).data();
                       T* dx = tp.grad(xid).data();
                       for (std::size_t p = 0; p < planes; ++p) {
                         if (kind == PoolKind::Max) {
                           dx[p * HW + arg[p]] += dy[p];
                         } else {
                           const T g = dy[p] / static_cast<T>(HW);
                           for (std::size_t i = 0; i < HW; ++i) dx[p * HW + i] += g;
                         }
                       }
                     });
}

template <typename T>
Var<T> relu(Var<T> x) {
  Tape<T>& tape = tape_of(x);
  Tensor<T> out = x.value();
  for (T& v : out.data()) v = v > T(0) ? v : T(0);
  const int xid = x.id;
  const int yid = static_cast<int>(tape.size());
  return tape.record(OpKind::Relu, {xid}, std::move(out), [=](Tape<T>& tp) {
    const T* dy = tp.grad(yid).data();
    const T* y = tp.value(yid).data().data();
    std::span<T> dx = tp.grad(xid);
    for (std::size_t i = 0; i < dx.size(); ++i) {
      if (y[i] > T(0)) dx[i] += dy[i];
    }
  });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  Tape<T>& tape = tape_of(x);
  Tensor<T> out = x.value();
  for (T& v : out.data()) v = sigmoid_scalar(v);
  const int xid = x.id;
  const int yid = static_cast<int>(tape.size());
  return tape.record(OpKind::Sigmoid, {xid}, std::move(out), [=](Tape<T>& tp) {
    const T* dy = tp.grad(yid).data();
    const T* y = tp.value(yid).data().data();
    std::span<T> dx = tp.grad(xid);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * y[i] * (T(1) - y[i]);
  });
}

namespace {

enum class Binary { Add, Mul };

template <typename T>
Var<T> binary(Var<T> a, Var<T> b, Binary op) {
  Tape<T>& tape = tape_of(a);
  same_tape(a, b);
  const Shape as = a.shape(), bs = b.shape();
  const char* name = op == Binary::Add ? "add" : "mul";
  if (!broadcastable(as, bs)) {
    shape_error(name, as, bs, "operands neither match nor broadcast (n,c,1,1)");
  }
  const bool bc = !(as == bs);
  const std::size_t HW = bc ? as.plane() : 1;
  const T* av = a.value().data().data();
  const T* bv = b.value().data().data();
  Tensor<T> out(as);
  T* yv = out.data().data();
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const T bb = bv[bc ? i / HW : i];
    yv[i] = op == Binary::Add ? av[i] + bb : av[i] * bb;
  }
  const int aid = a.id, bid = b.id;
  const int yid = static_cast<int>(tape.size());
  const std::size_t N = out.numel();
  return tape.record(op == Binary::Add ? OpKind::Add : OpKind::Mul, {aid, bid},
                     std::move(out), [=](Tape<T>& tp) {
                       const T* dy = tp.grad(yid).data();
                       const bool ga = tp.requires_grad(aid);
                       const bool gb = tp.requires_grad(bid);
                       // Accumulate into a local buffer when both sides alias.
                       std::vector<T> dbuf;
                       T* da = ga ? tp.grad(aid).data() : nullptr;
                       T* db = nullptr;
                       if (gb) {
                         if (aid == bid) {
                           dbuf.assign(N, T(0));
                           db = dbuf.data();
                         } else {
                           db = tp.grad(bid).data();
                         }
                       }
                       const T* av2 = tp.value(aid).data().data();
                       const T* bv2 = tp.value(bid).data().data();
                       for (std::size_t i = 0; i < N; ++i) {
                         const std::size_t j = bc ? i / HW : i;
                         if (op == Binary::Add) {
                           if (da) da[i] += dy[i];
                           if (db) db[j] += dy[i];
                         } else {
                           if (da) da[i] += dy[i] * bv2[j];
                           if (db) db[j] += dy[i] * av2[i];
                         }
                       }
                       if (!dbuf.empty()) {
                         for (std::size_t i = 0; i < N; ++i) da[i] += dbuf[i];
                       }
                     });
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return binary(a, b, Binary::Add);
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return binary(a, b, Binary::Mul);
}

template <typename T>
Var<T> scale(Var<T> x, T s) {
  Tape<T>& tape = tape_of(x);
  Tensor<T> out = x.value();
  for (T& v : out.data()) v *= s;
  const int xid = x.id;
  const int yid = static_cast<int>(tape.size());
  return tape.record(OpKind::Scale, {xid}, std::move(out), [=](Tape<T>& tp) {
    const T* dy = tp.grad(yid).data();
    std::span<T> dx = tp.grad(xid);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += s * dy[i];
  });
}

template <typename T>
Var<T> concat_c(std::span<const Var<T>> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_c: no operands");
  Tape<T>& tape = tape_of(parts[0]);
  const Shape s0 = parts[0].shape();
  int ctot = 0;
  std::vector<int> ids, chans;
  for (const Var<T>& p : parts) {
    same_tape(parts[0], p);
    const Shape s = p.shape();
    if (s.n != s0.n || s.h != s0.h || s.w != s0.w) {
      shape_error("concat_c", s0, s, "operands differ in n, h or w");
    }
    ctot += s.c;
    ids.push_back(p.id);
    chans.push_back(s.c);
  }
  const Shape ys{s0.n, ctot, s0.h, s0.w};
  Tensor<T> out(ys);
  const std::size_t HW = s0.plane();
  T* yv = out.data().data();
  for (int n = 0; n < s0.n; ++n) {
    int off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const T* src = parts[k].value().data().data() + static_cast<std::size_t>(n) * chans[k] * HW;
      std::copy(src, src + chans[k] * HW,
                yv + (static_cast<std::size_t>(n) * ctot + off) * HW);
      off += chans[k];
    }
  }
  const int yid = static_cast<int>(tape.size());
  return tape.record(OpKind::ConcatC, ids, std::move(out), [=](Tape<T>& tp) {
    const T* dy = tp.grad(yid).data();
    for (int n = 0; n < s0.n; ++n) {
      int off = 0;
      for (std::size_t k = 0; k < ids.size(); ++k) {
        if (tp.requires_grad(ids[k])) {
          T* dx = tp.grad(ids[k]).data() + static_cast<std::size_t>(n) * chans[k] * HW;
          const T* g = dy + (static_cast<std::size_t>(n) * ctot + off) * HW;
          for (std::size_t i = 0; i < chans[k] * HW; ++i) dx[i] += g[i];
        }
        off += chans[k];
      }
    }
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, std::optional<std::type_identity_t<Var<T>>> bias) {
  Tape<T>& tape = tape_of(x);
  same_tape(x, w);
  const Shape xs = x.shape(), ws = w.shape();
  if (xs.h != 1 || xs.w != 1) shape_error("linear", xs, ws, "input must be (n,c,1,1)");
  if (ws.c != xs.c || ws.h != 1 || ws.w != 1) {
    shape_error("linear", xs, ws, "weight must be (cout,cin,1,1) with cin matching input");
  }
  const int cout = ws.n, cin = ws.c;
  if (bias && bias->value().numel() != static_cast<std::size_t>(cout)) {
    shape_error("linear", ws, bias->shape(), "bias length differs from output width");
  }
  Tensor<T> out(Shape{xs.n, cout, 1, 1});
  const T* xv = x.value().data().data();
  const T* wv = w.value().data().data();
  const T* bv = bias ? bias->value().data().data() : nullptr;
  for (int n = 0; n < xs.n; ++n) {
    for (int o = 0; o < cout; ++o) {
      T s = bv ? bv[o] : T(0);
      for (int i = 0; i < cin; ++i) s += wv[o * cin + i] * xv[n * cin + i];
      out[static_cast<std::size_t>(n) * cout + o] = s;
    }
  }
  tape.add_macs(static_cast<std::uint64_t>(xs.n) * cout * cin);
  std::vector<int> inputs{x.id, w.id};
  if (bias) inputs.push_back(bias->id);
  const int xid = x.id, wid = w.id, bid = bias ? bias->id : -1;
  const int yid = static_cast<int>(tape.size());
  return tape.record(OpKind::Linear, std::move(inputs), std::move(out), [=](Tape<T>& tp) {
    const T* dy = tp.grad(yid).data();
    const T* x2 = tp.value(xid).data().data();
    const T* w2 = tp.value(wid).data().data();
    T* dx = tp.requires_grad(xid) ? tp.grad(xid).data() : nullptr;
    T* dw = tp.requires_grad(wid) ? tp.grad(wid).data() : nullptr;
    T* db = bid >= 0 && tp.requires_grad(bid) ? tp.grad(bid).data() : nullptr;
    for (int n = 0; n < xs.n; ++n) {
      for (int o = 0; o < cout; ++o) {
        const T g = dy[static_cast<std::size_t>(n) * cout + o];
        if (db) db[o] += g;
        for (int i = 0; i < cin; ++i) {
          if (dw) dw[o * cin + i] += g * x2[n * cin + i];
          if (dx) dx[n * cin + i] += g * w2[o * cin + i];
        }
      }
    }
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  Tape<T>& tape = tape_of(x);
  double s = 0;
  for (T v : x.value().data()) s += v;
  Tensor<T> out(Shape{}, static_cast<T>(s));
  const int xid = x.id;
  const int yid = static_cast<int>(tape.size());
  return tape.record(OpKind::Sum, {xid}, std::move(out), [=](Tape<T>& tp) {
    const T g = tp.grad(yid)[0];
    for (T& d : tp.grad(xid)) d += g;
  });
}

#define RRCA_INSTANTIATE_OPS(T)                                                  \
  template T sigmoid_scalar<T>(T);                                               \
  template Var<T> conv2d<T>(Var<T>, Var<T>, std::optional<Var<T>>, int, int);   \
  template Var<T> batchnorm2d<T>(Var<T>, Var<T>, Var<T>, RunningStats<T>&,       \
                                 NormMode, BatchNormOptions);                    \
  template Var<T> maxpool2<T>(Var<T>);                                           \
  template Var<T> bilinear_up2<T>(Var<T>);                                       \
  template Var<T> global_pool<T>(Var<T>, PoolKind);                              \
  template Var<T> relu<T>(Var<T>);                                               \
  template Var<T> sigmoid<T>(Var<T>);                                            \
  template Var<T> add<T>(Var<T>, Var<T>);                                        \
  template Var<T> mul<T>(Var<T>, Var<T>);                                        \
  template Var<T> scale<T>(Var<T>, T);                                           \
  template Var<T> concat_c<T>(std::span<const Var<T>>);                          \
  template Var<T> linear<T>(Var<T>, Var<T>, std::optional<Var<T>>);             \
  template Var<T> sum<T>(Var<T>);

RRCA_INSTANTIATE_OPS(float)
RRCA_INSTANTIATE_OPS(double)

#undef RRCA_INSTANTIATE_OPS

}  // namespace rrca
