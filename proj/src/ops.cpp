#include "pfn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace pfn {

namespace {

template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatMap = Eigen::Map<RowMat<Scalar>>;
template <typename Scalar>
using ConstMatMap = Eigen::Map<const RowMat<Scalar>>;

using Eigen::Index;

// --- Broadcasting -----------------------------------------------------------

struct Strides {
  Index n, c, h, w;
};

Strides broadcast_strides(const Shape& s, const Shape& out) {
  Strides st{Index(s.c) * s.h * s.w, Index(s.h) * s.w, s.w, 1};
  if (s.n == 1 && out.n != 1) st.n = 0;
  if (s.c == 1 && out.c != 1) st.c = 0;
  if (s.h == 1 && out.h != 1) st.h = 0;
  if (s.w == 1 && out.w != 1) st.w = 0;
  return st;
}

int broadcast_dim(int a, int b, const char* op, const Shape& sa, const Shape& sb) {
  if (a == b || b == 1) return a;
  if (a == 1) return b;
  throw ShapeError(std::string(op) + ": cannot broadcast " + sa.str() + " with " + sb.str());
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  return Shape{broadcast_dim(a.n, b.n, op, a, b), broadcast_dim(a.c, b.c, op, a, b),
               broadcast_dim(a.h, b.h, op, a, b), broadcast_dim(a.w, b.w, op, a, b)};
}

// Calls fn(out_index, a_index, b_index) over the broadcast output.
template <typename Fn>
void for_each_broadcast(const Shape& out, const Shape& sa, const Shape& sb, Fn&& fn) {
  const Strides ta = broadcast_strides(sa, out);
  const Strides tb = broadcast_strides(sb, out);
  Index o = 0;
  for (int n = 0; n < out.n; ++n) {
    for (int c = 0; c < out.c; ++c) {
      for (int h = 0; h < out.h; ++h) {
        Index ia = n * ta.n + c * ta.c + h * ta.h;
        Index ib = n * tb.n + c * tb.c + h * tb.h;
        for (int w = 0; w < out.w; ++w, ++o) fn(o, ia + w * ta.w, ib + w * tb.w);
      }
    }
  }
}

// f(a, b) -> out; da(a, b, out) -> d out / d a; db likewise.
template <typename Scalar, typename F, typename DA, typename DB>
Tensor<Scalar> binary_op(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* name, F f,
                         DA da, DB db) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  Array<Scalar> out(out_shape.size());
  const Scalar* av = a.value().data();
  const Scalar* bv = b.value().data();
  if (a.shape() == b.shape()) {
    for (Index i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
  } else {
    for_each_broadcast(out_shape, a.shape(), b.shape(),
                       [&](Index o, Index ia, Index ib) { out[o] = f(av[ia], bv[ib]); });
  }
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  return Tensor<Scalar>::make_result(
      out_shape, std::move(out), {a, b}, [sa, sb, out_shape, da, db](detail::Node<Scalar>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const Scalar* g = self.grad.data();
        const Scalar* y = self.value.data();
        const Scalar* av = pa.value.data();
        const Scalar* bv = pb.value.data();
        Scalar* ga = pa.requires_grad ? pa.grad_buffer().data() : nullptr;
        Scalar* gb = pb.requires_grad ? pb.grad_buffer().data() : nullptr;
        for_each_broadcast(out_shape, sa, sb, [&](Index o, Index ia, Index ib) {
          if (ga) ga[ia] += g[o] * da(av[ia], bv[ib], y[o]);
          if (gb) gb[ib] += g[o] * db(av[ia], bv[ib], y[o]);
        });
      });
}

// f(x) -> y; df(x, y) -> dy/dx.
template <typename Scalar, typename F, typename DF>
Tensor<Scalar> unary_op(const Tensor<Scalar>& x, F f, DF df) {
  Array<Scalar> out(x.size());
  const Scalar* xv = x.value().data();
  for (Index i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return Tensor<Scalar>::make_result(x.shape(), std::move(out), {x},
                                     [df](detail::Node<Scalar>& self) {
                                       auto& p = *self.parents[0];
                                       if (!p.requires_grad) return;
                                       Scalar* gp = p.grad_buffer().data();
                                       const Scalar* g = self.grad.data();
                                       const Scalar* xv = p.value.data();
                                       const Scalar* yv = self.value.data();
                                       for (Index i = 0; i < self.value.size(); ++i) {
                                         gp[i] += g[i] * df(xv[i], yv[i]);
                                       }
                                     });
}

// --- im2col ----------------------------------------------------------------

struct ConvGeom {
  int cin, h, w, k, stride, pad, ho, wo;
  Index rows() const { return Index(cin) * k * k; }
  Index cols() const { return Index(ho) * wo; }
};

template <typename Scalar>
void im2col(const Scalar* in, const ConvGeom& g, Scalar* cols) {
  const Index ncols = g.cols();
  for (int ci = 0; ci < g.cin; ++ci) {
    const Scalar* plane = in + Index(ci) * g.h * g.w;
    for (int ki = 0; ki < g.k; ++ki) {
      for (int kj = 0; kj < g.k; ++kj) {
        Scalar* row = cols + ((Index(ci) * g.k + ki) * g.k + kj) * ncols;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride + ki - g.pad;
          Scalar* dst = row + Index(oy) * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.wo, Scalar(0));
            continue;
          }
          const Scalar* src = plane + Index(iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride + kj - g.pad;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const Scalar* cols, const ConvGeom& g, Scalar* in_grad) {
  const Index ncols = g.cols();
  for (int ci = 0; ci < g.cin; ++ci) {
    Scalar* plane = in_grad + Index(ci) * g.h * g.w;
    for (int ki = 0; ki < g.k; ++ki) {
      for (int kj = 0; kj < g.k; ++kj) {
        const Scalar* row = cols + ((Index(ci) * g.k + ki) * g.k + kj) * ncols;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride + ki - g.pad;
          if (iy < 0 || iy >= g.h) continue;
          const Scalar* src = row + Index(oy) * g.wo;
          Scalar* dst = plane + Index(iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride + kj - g.pad;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

void check_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (!(a == b)) throw ShapeError(std::string(op) + ": shape " + a.str() + " vs " + b.str());
}

}  // namespace

// --- conv2d -----------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& weight,
                      const Tensor<Scalar>& bias, int stride, int padding) {
  const Shape in = input.shape();
  const Shape ws = weight.shape();
  if (ws.c != in.c) {
    throw ConfigError("conv2d: weight expects " + std::to_string(ws.c) + " input channels, got " +
                      std::to_string(in.c));
  }
  if (ws.h != ws.w) throw ConfigError("conv2d: kernel must be square, got " + ws.str());
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  const int k = ws.h;
  if (padding == kSamePadding) {
    if (k % 2 == 0) {
      throw ConfigError("conv2d: same padding requires an odd kernel, got k=" + std::to_string(k));
    }
    padding = (k - 1) / 2;
  }
  if (padding < 0) throw ConfigError("conv2d: negative padding");
  const bool has_bias = bias.shape().c > 0;
  if (has_bias && (bias.size() != ws.n)) {
    throw ConfigError("conv2d: bias has " + std::to_string(bias.size()) + " entries for " +
                      std::to_string(ws.n) + " output channels");
  }
  const int ho = (in.h + 2 * padding - k) / stride + 1;
  const int wo = (in.w + 2 * padding - k) / stride + 1;
  if (ho < 1 || wo < 1) throw ShapeError("conv2d: input " + in.str() + " too small for kernel");

  const ConvGeom g{in.c, in.h, in.w, k, stride, padding, ho, wo};
  const int cout = ws.n;
  const Shape out_shape{in.n, cout, ho, wo};
  Array<Scalar> out(out_shape.size());
  RowMat<Scalar> cols(g.rows(), g.cols());
  ConstMatMap<Scalar> wm(weight.value().data(), cout, g.rows());
  for (int n = 0; n < in.n; ++n) {
    im2col(input.value().data() + Index(n) * in.c * in.plane(), g, cols.data());
    MatMap<Scalar> om(out.data() + Index(n) * cout * g.cols(), cout, g.cols());
    om.noalias() = wm * cols;
    if (has_bias) {
      for (int co = 0; co < cout; ++co) om.row(co).array() += bias.value()[co];
    }
  }

  std::vector<Tensor<Scalar>> parents{input, weight};
  if (has_bias) parents.push_back(bias);
  return Tensor<Scalar>::make_result(
      out_shape, std::move(out), parents, [g, cout, in, has_bias](detail::Node<Scalar>& self) {
        auto& pin = *self.parents[0];
        auto& pw = *self.parents[1];
        RowMat<Scalar> cols(g.rows(), g.cols());
        RowMat<Scalar> dcols;
        ConstMatMap<Scalar> wm(pw.value.data(), cout, g.rows());
        for (int n = 0; n < in.n; ++n) {
          ConstMatMap<Scalar> gm(self.grad.data() + Index(n) * cout * g.cols(), cout, g.cols());
          if (pw.requires_grad) {
            im2col(pin.value.data() + Index(n) * in.c * in.plane(), g, cols.data());
            MatMap<Scalar> gw(pw.grad_buffer().data(), cout, g.rows());
            gw.noalias() += gm * cols.transpose();
          }
          if (has_bias && self.parents[2]->requires_grad) {
            self.parents[2]->grad_buffer().matrix() += gm.rowwise().sum();
          }
          if (pin.requires_grad) {
            dcols.noalias() = wm.transpose() * gm;
            col2im_add(dcols.data(), g, pin.grad_buffer().data() + Index(n) * in.c * in.plane());
          }
        }
      });
}

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& weight, int stride,
                      int padding) {
  return conv2d(input, weight, Tensor<Scalar>(Shape{1, 0, 1, 1}), stride, padding);
}

// --- Pooling and resampling ---------------------------------------------------

template <typename Scalar>
Tensor<Scalar> avg_pool2(const Tensor<Scalar>& input) {
  const Shape in = input.shape();
  if (in.h % 2 != 0 || in.w % 2 != 0) {
    throw ShapeError("avg_pool2: H and W must be even, got " + in.str());
  }
  const Shape os{in.n, in.c, in.h / 2, in.w / 2};
  Array<Scalar> out(os.size());
  const Scalar* x = input.value().data();
  for (Index p = 0; p < Index(in.n) * in.c; ++p) {
    const Scalar* src = x + p * in.plane();
    Scalar* dst = out.data() + p * os.plane();
    for (int y = 0; y < os.h; ++y) {
      const Scalar* r0 = src + Index(2 * y) * in.w;
      const Scalar* r1 = r0 + in.w;
      for (int xx = 0; xx < os.w; ++xx) {
        dst[Index(y) * os.w + xx] =
            Scalar(0.25) * (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]);
      }
    }
  }
  return Tensor<Scalar>::make_result(os, std::move(out), {input}, [in, os](detail::Node<Scalar>& self) {
    auto& p = *self.parents[0];
    Scalar* gi = p.grad_buffer().data();
    const Scalar* g = self.grad.data();
    for (Index pl = 0; pl < Index(in.n) * in.c; ++pl) {
      for (int y = 0; y < os.h; ++y) {
        for (int xx = 0; xx < os.w; ++xx) {
          const Scalar v = Scalar(0.25) * g[pl * os.plane() + Index(y) * os.w + xx];
          Scalar* r0 = gi + pl * in.plane() + Index(2 * y) * in.w + 2 * xx;
          r0[0] += v;
          r0[1] += v;
          r0[in.w] += v;
          r0[in.w + 1] += v;
        }
      }
    }
  });
}

namespace {

template <typename Scalar>
struct AxisTable {
  std::vector<int> lo, hi;
  std::vector<Scalar> frac;
};

template <typename Scalar>
AxisTable<Scalar> half_pixel_table(int in_size, int out_size) {
  AxisTable<Scalar> t;
  t.lo.resize(out_size);
  t.hi.resize(out_size);
  t.frac.resize(out_size);
  const double scale = double(in_size) / double(out_size);
  for (int i = 0; i < out_size; ++i) {
    double src = (i + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, double(in_size - 1));
    const int lo = std::min(int(std::floor(src)), in_size - 1);
    t.lo[i] = lo;
    t.hi[i] = std::min(lo + 1, in_size - 1);
    t.frac[i] = Scalar(src - lo);
  }
  return t;
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> bilinear_resample(const Tensor<Scalar>& input, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resample: output size must be >= 1");
  const Shape in = input.shape();
  const Shape os{in.n, in.c, out_h, out_w};
  if (in == os) return input;
  auto ty = std::make_shared<AxisTable<Scalar>>(half_pixel_table<Scalar>(in.h, out_h));
  auto tx = std::make_shared<AxisTable<Scalar>>(half_pixel_table<Scalar>(in.w, out_w));
  Array<Scalar> out(os.size());
  const Scalar* x = input.value().data();
  for (Index p = 0; p < Index(in.n) * in.c; ++p) {
    const Scalar* src = x + p * in.plane();
    Scalar* dst = out.data() + p * os.plane();
    for (int y = 0; y < out_h; ++y) {
      const Scalar fy = ty->frac[y];
      const Scalar* r0 = src + Index(ty->lo[y]) * in.w;
      const Scalar* r1 = src + Index(ty->hi[y]) * in.w;
      for (int xx = 0; xx < out_w; ++xx) {
        const Scalar fx = tx->frac[xx];
        const int x0 = tx->lo[xx], x1 = tx->hi[xx];
        const Scalar top = r0[x0] + fx * (r0[x1] - r0[x0]);
        const Scalar bot = r1[x0] + fx * (r1[x1] - r1[x0]);
        dst[Index(y) * out_w + xx] = top + fy * (bot - top);
      }
    }
  }
  return Tensor<Scalar>::make_result(
      os, std::move(out), {input}, [in, os, ty, tx](detail::Node<Scalar>& self) {
        auto& p = *self.parents[0];
        Scalar* gi = p.grad_buffer().data();
        const Scalar* g = self.grad.data();
        for (Index pl = 0; pl < Index(in.n) * in.c; ++pl) {
          Scalar* dst = gi + pl * in.plane();
          for (int y = 0; y < os.h; ++y) {
            const Scalar fy = ty->frac[y];
            Scalar* r0 = dst + Index(ty->lo[y]) * in.w;
            Scalar* r1 = dst + Index(ty->hi[y]) * in.w;
            for (int xx = 0; xx < os.w; ++xx) {
              const Scalar fx = tx->frac[xx];
              const Scalar v = g[pl * os.plane() + Index(y) * os.w + xx];
              const int x0 = tx->lo[xx], x1 = tx->hi[xx];
              r0[x0] += v * (1 - fy) * (1 - fx);
              r0[x1] += v * (1 - fy) * fx;
              r1[x0] += v * fy * (1 - fx);
              r1[x1] += v * fy * fx;
            }
          }
        }
      });
}

template <typename Scalar>
Tensor<Scalar> grid_sample(const Tensor<Scalar>& source, const Tensor<Scalar>& xs,
                           const Tensor<Scalar>& ys) {
  const Shape ss = source.shape();
  check_same_shape(xs.shape(), ys.shape(), "grid_sample");
  const Shape cs = xs.shape();
  if (cs.c != 1 || cs.n != ss.n) {
    throw ShapeError("grid_sample: coordinates must be (N, 1, H, W) with N=" + std::to_string(ss.n) +
                     ", got " + cs.str());
  }
  const Shape os{ss.n, ss.c, cs.h, cs.w};
  Array<Scalar> out(os.size());
  const Scalar* src = source.value().data();
  const Scalar* xv = xs.value().data();
  const Scalar* yv = ys.value().data();
  const Scalar nan = std::numeric_limits<Scalar>::quiet_NaN();

  for (int n = 0; n < ss.n; ++n) {
    for (Index q = 0; q < cs.plane(); ++q) {
      const Scalar px = xv[n * cs.plane() + q];
      const Scalar py = yv[n * cs.plane() + q];
      if (!std::isfinite(px) || !std::isfinite(py)) {
        for (int c = 0; c < ss.c; ++c) out[(Index(n) * ss.c + c) * os.plane() + q] = nan;
        continue;
      }
      const Scalar x = std::clamp(px, Scalar(0), Scalar(ss.w - 1));
      const Scalar y = std::clamp(py, Scalar(0), Scalar(ss.h - 1));
      const int x0 = std::min(int(x), ss.w - 1), y0 = std::min(int(y), ss.h - 1);
      const int x1 = std::min(x0 + 1, ss.w - 1), y1 = std::min(y0 + 1, ss.h - 1);
      const Scalar fx = x - x0, fy = y - y0;
      for (int c = 0; c < ss.c; ++c) {
        const Scalar* pl = src + (Index(n) * ss.c + c) * ss.plane();
        const Scalar v00 = pl[Index(y0) * ss.w + x0], v01 = pl[Index(y0) * ss.w + x1];
        const Scalar v10 = pl[Index(y1) * ss.w + x0], v11 = pl[Index(y1) * ss.w + x1];
        const Scalar top = v00 + fx * (v01 - v00);
        const Scalar bot = v10 + fx * (v11 - v10);
        out[(Index(n) * ss.c + c) * os.plane() + q] = top + fy * (bot - top);
      }
    }
  }

  return Tensor<Scalar>::make_result(os, std::move(out), {source, xs, ys}, [ss, cs, os](detail::Node<Scalar>& self) {
    auto& psrc = *self.parents[0];
    auto& px_node = *self.parents[1];
    auto& py_node = *self.parents[2];
    const Scalar* src = psrc.value.data();
    const Scalar* xv = px_node.value.data();
    const Scalar* yv = py_node.value.data();
    Scalar* gsrc = psrc.requires_grad ? psrc.grad_buffer().data() : nullptr;
    Scalar* gx = px_node.requires_grad ? px_node.grad_buffer().data() : nullptr;
    Scalar* gy = py_node.requires_grad ? py_node.grad_buffer().data() : nullptr;
    const Scalar* g = self.grad.data();
    for (int n = 0; n < ss.n; ++n) {
      for (Index q = 0; q < cs.plane(); ++q) {
        const Scalar px = xv[n * cs.plane() + q];
        const Scalar py = yv[n * cs.plane() + q];
        if (!std::isfinite(px) || !std::isfinite(py)) continue;
        const bool x_in = px >= 0 && px <= Scalar(ss.w - 1);
        const bool y_in = py >= 0 && py <= Scalar(ss.h - 1);
        const Scalar x = std::clamp(px, Scalar(0), Scalar(ss.w - 1));
        const Scalar y = std::clamp(py, Scalar(0), Scalar(ss.h - 1));
        const int x0 = std::min(int(x), ss.w - 1), y0 = std::min(int(y), ss.h - 1);
        const int x1 = std::min(x0 + 1, ss.w - 1), y1 = std::min(y0 + 1, ss.h - 1);
        const Scalar fx = x - x0, fy = y - y0;
        Scalar dx = 0, dy = 0;
        for (int c = 0; c < ss.c; ++c) {
          const Index base = (Index(n) * ss.c + c) * ss.plane();
          const Scalar gv = g[(Index(n) * ss.c + c) * os.plane() + q];
          const Scalar v00 = src[base + Index(y0) * ss.w + x0], v01 = src[base + Index(y0) * ss.w + x1];
          const Scalar v10 = src[base + Index(y1) * ss.w + x0], v11 = src[base + Index(y1) * ss.w + x1];
          if (gsrc) {
            gsrc[base + Index(y0) * ss.w + x0] += gv * (1 - fy) * (1 - fx);
            gsrc[base + Index(y0) * ss.w + x1] += gv * (1 - fy) * fx;
            gsrc[base + Index(y1) * ss.w + x0] += gv * fy * (1 - fx);
            gsrc[base + Index(y1) * ss.w + x1] += gv * fy * fx;
          }
          dx += gv * ((1 - fy) * (v01 - v00) + fy * (v11 - v10));
          dy += gv * ((1 - fx) * (v10 - v00) + fx * (v11 - v01));
        }
        if (gx && x_in) gx[n * cs.plane() + q] += dx;
        if (gy && y_in) gy[n * cs.plane() + q] += dy;
      }
    }
  });
}

template <typename Scalar>
Tensor<Scalar> spatial_diff(const Tensor<Scalar>& input, Axis axis) {
  const Shape in = input.shape();
  const int dx = axis == Axis::X ? 1 : 0, dy = 1 - dx;
  if (in.w - dx < 1 || in.h - dy < 1) throw ShapeError("spatial_diff: input too small " + in.str());
  const Shape os{in.n, in.c, in.h - dy, in.w - dx};
  const Index step = axis == Axis::X ? 1 : in.w;
  Array<Scalar> out(os.size());
  const Scalar* x = input.value().data();
  Index o = 0;
  for (Index pl = 0; pl < Index(in.n) * in.c; ++pl) {
    for (int y = 0; y < os.h; ++y) {
      const Scalar* row = x + pl * in.plane() + Index(y) * in.w;
      for (int xx = 0; xx < os.w; ++xx, ++o) out[o] = row[xx + step] - row[xx];
    }
  }
  return Tensor<Scalar>::make_result(os, std::move(out), {input}, [in, os, step](detail::Node<Scalar>& self) {
    Scalar* gi = self.parents[0]->grad_buffer().data();
    const Scalar* g = self.grad.data();
    Index o = 0;
    for (Index pl = 0; pl < Index(in.n) * in.c; ++pl) {
      for (int y = 0; y < os.h; ++y) {
        Scalar* row = gi + pl * in.plane() + Index(y) * in.w;
        for (int xx = 0; xx < os.w; ++xx, ++o) {
          row[xx + step] += g[o];
          row[xx] -= g[o];
        }
      }
    }
  });
}

template <typename Scalar>
Tensor<Scalar> local_mean(const Tensor<Scalar>& input, int window) {
  if (window < 1 || window % 2 == 0) throw ConfigError("local_mean: window must be odd and >= 1");
  const Shape s = input.shape();
  const int r = window / 2;
  // Reciprocal in-frame counts per position.
  auto inv_count = std::make_shared<Array<Scalar>>(s.plane());
  for (int y = 0; y < s.h; ++y) {
    const int ny = std::min(y + r, s.h - 1) - std::max(y - r, 0) + 1;
    for (int x = 0; x < s.w; ++x) {
      const int nx = std::min(x + r, s.w - 1) - std::max(x - r, 0) + 1;
      (*inv_count)[Index(y) * s.w + x] = Scalar(1) / Scalar(ny * nx);
    }
  }
  Array<Scalar> out(s.size());
  const Scalar* xv = input.value().data();
  for (Index p = 0; p < Index(s.n) * s.c; ++p) {
    const Scalar* src = xv + p * s.plane();
    Scalar* dst = out.data() + p * s.plane();
    for (int y = 0; y < s.h; ++y) {
      for (int x = 0; x < s.w; ++x) {
        Scalar acc = 0;
        for (int yy = std::max(y - r, 0); yy <= std::min(y + r, s.h - 1); ++yy) {
          for (int xx = std::max(x - r, 0); xx <= std::min(x + r, s.w - 1); ++xx) {
            acc += src[Index(yy) * s.w + xx];
          }
        }
        dst[Index(y) * s.w + x] = acc * (*inv_count)[Index(y) * s.w + x];
      }
    }
  }
  return Tensor<Scalar>::make_result(s, std::move(out), {input}, [s, r, inv_count](detail::Node<Scalar>& self) {
    auto& p = *self.parents[0];
    Scalar* gi = p.grad_buffer().data();
    const Scalar* g = self.grad.data();
    for (Index pl = 0; pl < Index(s.n) * s.c; ++pl) {
      for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w; ++x) {
          const Scalar v = g[pl * s.plane() + Index(y) * s.w + x] * (*inv_count)[Index(y) * s.w + x];
          for (int yy = std::max(y - r, 0); yy <= std::min(y + r, s.h - 1); ++yy) {
            for (int xx = std::max(x - r, 0); xx <= std::min(x + r, s.w - 1); ++xx) {
              gi[pl * s.plane() + Index(yy) * s.w + xx] += v;
            }
          }
        }
      }
    }
  });
}

// --- Channel plumbing -------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> concat_channels(std::span<const Tensor<Scalar>> inputs) {
  if (inputs.empty()) throw ConfigError("concat_channels: empty input list");
  if (inputs.size() == 1) return inputs[0];
  const Shape first = inputs[0].shape();
  int total = 0;
  std::vector<int> channels;
  for (const auto& t : inputs) {
    const Shape s = t.shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w) {
      throw ShapeError("concat_channels: " + s.str() + " incompatible with " + first.str());
    }
    channels.push_back(s.c);
    total += s.c;
  }
  const Shape os{first.n, total, first.h, first.w};
  Array<Scalar> out(os.size());
  const Index plane = first.plane();
  for (int n = 0; n < first.n; ++n) {
    Index c0 = 0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      const Index len = channels[i] * plane;
      out.segment((n * Index(total) + c0) * plane, len) =
          inputs[i].value().segment(Index(n) * len, len);
      c0 += channels[i];
    }
  }
  std::vector<Tensor<Scalar>> parents(inputs.begin(), inputs.end());
  return Tensor<Scalar>::make_result(os, std::move(out), parents, [channels, total, os](detail::Node<Scalar>& self) {
    const Index plane = os.plane();
    for (int n = 0; n < os.n; ++n) {
      Index c0 = 0;
      for (std::size_t i = 0; i < channels.size(); ++i) {
        const Index len = channels[i] * plane;
        auto& p = *self.parents[i];
        if (p.requires_grad) {
          p.grad_buffer().segment(Index(n) * len, len) +=
              self.grad.segment((n * Index(total) + c0) * plane, len);
        }
        c0 += channels[i];
      }
    }
  });
}

template <typename Scalar>
Tensor<Scalar> slice_channels(const Tensor<Scalar>& input, int begin, int count) {
  const Shape s = input.shape();
  if (begin < 0 || count < 0 || begin + count > s.c) {
    throw ShapeError("slice_channels: [" + std::to_string(begin) + ", +" + std::to_string(count) +
                     ") out of range for " + s.str());
  }
  const Shape os{s.n, count, s.h, s.w};
  Array<Scalar> out(os.size());
  for (int n = 0; n < s.n; ++n) {
    out.segment(Index(n) * count * s.plane(), count * s.plane()) =
        input.value().segment((Index(n) * s.c + begin) * s.plane(), count * s.plane());
  }
  return Tensor<Scalar>::make_result(os, std::move(out), {input}, [s, begin, count](detail::Node<Scalar>& self) {
    auto& p = *self.parents[0];
    for (int n = 0; n < s.n; ++n) {
      p.grad_buffer().segment((Index(n) * s.c + begin) * s.plane(), count * s.plane()) +=
          self.grad.segment(Index(n) * count * s.plane(), count * s.plane());
    }
  });
}

template <typename Scalar>
Tensor<Scalar> channel_weighted_sum(std::span<const Tensor<Scalar>> inputs,
                                    const Tensor<Scalar>& weights) {
  if (inputs.empty()) throw ConfigError("channel_weighted_sum: empty input list");
  const Shape s = inputs[0].shape();
  for (const auto& t : inputs) check_same_shape(t.shape(), s, "channel_weighted_sum");
  const int sources = int(inputs.size());
  if (weights.shape().n != sources || weights.shape().c != s.c || weights.shape().h != 1 ||
      weights.shape().w != 1) {
    throw ConfigError("channel_weighted_sum: weights " + weights.shape().str() + " do not match " +
                      std::to_string(sources) + " sources x " + std::to_string(s.c) + " channels");
  }
  Array<Scalar> out = Array<Scalar>::Zero(s.size());
  const Index plane = s.plane();
  for (int i = 0; i < sources; ++i) {
    const Scalar* xv = inputs[i].value().data();
    for (int n = 0; n < s.n; ++n) {
      for (int c = 0; c < s.c; ++c) {
        const Scalar wv = weights.value()[Index(i) * s.c + c];
        const Index off = (Index(n) * s.c + c) * plane;
        out.segment(off, plane) += wv * Eigen::Map<const Array<Scalar>>(xv + off, plane);
      }
    }
  }
  std::vector<Tensor<Scalar>> parents(inputs.begin(), inputs.end());
  parents.push_back(weights);
  return Tensor<Scalar>::make_result(s, std::move(out), parents, [s, sources](detail::Node<Scalar>& self) {
    auto& pw = *self.parents[sources];
    const Index plane = s.plane();
    for (int i = 0; i < sources; ++i) {
      auto& pi = *self.parents[i];
      for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
          const Index off = (Index(n) * s.c + c) * plane;
          const auto g = self.grad.segment(off, plane);
          if (pi.requires_grad) {
            pi.grad_buffer().segment(off, plane) += pw.value[Index(i) * s.c + c] * g;
          }
          if (pw.requires_grad) {
            pw.grad_buffer()[Index(i) * s.c + c] += (g * pi.value.segment(off, plane)).sum();
          }
        }
      }
    }
  });
}

// --- Pointwise --------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary_op(
      a, b, "add", [](Scalar x, Scalar y) { return x + y; },
      [](Scalar, Scalar, Scalar) { return Scalar(1); }, [](Scalar, Scalar, Scalar) { return Scalar(1); });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary_op(
      a, b, "sub", [](Scalar x, Scalar y) { return x - y; },
      [](Scalar, Scalar, Scalar) { return Scalar(1); }, [](Scalar, Scalar, Scalar) { return Scalar(-1); });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary_op(
      a, b, "mul", [](Scalar x, Scalar y) { return x * y; },
      [](Scalar, Scalar y, Scalar) { return y; }, [](Scalar x, Scalar, Scalar) { return x; });
}

template <typename Scalar>
Tensor<Scalar> div(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary_op(
      a, b, "div", [](Scalar x, Scalar y) { return x / y; },
      [](Scalar, Scalar y, Scalar) { return Scalar(1) / y; },
      [](Scalar, Scalar y, Scalar out) { return -out / y; });
}

template <typename Scalar>
Tensor<Scalar> add_scalar(const Tensor<Scalar>& a, std::type_identity_t<Scalar> s) {
  return unary_op(a, [s](Scalar x) { return x + s; }, [](Scalar, Scalar) { return Scalar(1); });
}

template <typename Scalar>
Tensor<Scalar> mul_scalar(const Tensor<Scalar>& a, std::type_identity_t<Scalar> s) {
  return unary_op(a, [s](Scalar x) { return x * s; }, [s](Scalar, Scalar) { return s; });
}

template <typename Scalar>
Tensor<Scalar> rdiv_scalar(std::type_identity_t<Scalar> s, const Tensor<Scalar>& a) {
  return unary_op(a, [s](Scalar x) { return s / x; }, [](Scalar x, Scalar y) { return -y / x; });
}

template <typename Scalar>
Tensor<Scalar> abs(const Tensor<Scalar>& x) {
  return unary_op(
      x, [](Scalar v) { return std::abs(v); },
      [](Scalar v, Scalar) { return v > 0 ? Scalar(1) : (v < 0 ? Scalar(-1) : Scalar(0)); });
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  // `v < 0 ? 0 : v` keeps NaN visible.
  return unary_op(
      x, [](Scalar v) { return v < 0 ? Scalar(0) : v; },
      [](Scalar v, Scalar) { return v > 0 ? Scalar(1) : Scalar(0); });
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  return unary_op(
      x, [](Scalar v) { return Scalar(1) / (Scalar(1) + std::exp(-v)); },
      [](Scalar, Scalar y) { return y * (Scalar(1) - y); });
}

template <typename Scalar>
Tensor<Scalar> clamp(const Tensor<Scalar>& x, std::type_identity_t<Scalar> lo,
                     std::type_identity_t<Scalar> hi) {
  if (lo > hi) throw ConfigError("clamp: lo > hi");
  return unary_op(
      x, [lo, hi](Scalar v) { return v < lo ? lo : (v > hi ? hi : v); },
      [lo, hi](Scalar v, Scalar) { return (v > lo && v < hi) ? Scalar(1) : Scalar(0); });
}

template <typename Scalar>
Tensor<Scalar> exp_neg(const Tensor<Scalar>& x) {
  return unary_op(x, [](Scalar v) { return std::exp(-v); }, [](Scalar, Scalar y) { return -y; });
}

template <typename Scalar>
Tensor<Scalar> square(const Tensor<Scalar>& x) {
  return unary_op(x, [](Scalar v) { return v * v; }, [](Scalar v, Scalar) { return 2 * v; });
}

template <typename Scalar>
Tensor<Scalar> sqrt(const Tensor<Scalar>& x) {
  return unary_op(
      x, [](Scalar v) { return std::sqrt(v); }, [](Scalar, Scalar y) { return Scalar(0.5) / y; });
}

template <typename Scalar>
Tensor<Scalar> sin(const Tensor<Scalar>& x) {
  return unary_op(x, [](Scalar v) { return std::sin(v); }, [](Scalar v, Scalar) { return std::cos(v); });
}

template <typename Scalar>
Tensor<Scalar> cos(const Tensor<Scalar>& x) {
  return unary_op(x, [](Scalar v) { return std::cos(v); }, [](Scalar v, Scalar) { return -std::sin(v); });
}

// --- Reductions -------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> sum_all(const Tensor<Scalar>& x) {
  Array<Scalar> out(1);
  out[0] = x.value().sum();
  return Tensor<Scalar>::make_result(Shape{}, std::move(out), {x}, [](detail::Node<Scalar>& self) {
    auto& p = *self.parents[0];
    p.grad_buffer() += self.grad[0];
  });
}

template <typename Scalar>
Tensor<Scalar> mean_all(const Tensor<Scalar>& x) {
  if (x.size() == 0) throw ShapeError("mean_all: empty tensor");
  const Scalar inv = Scalar(1) / Scalar(x.size());
  Array<Scalar> out(1);
  out[0] = x.value().sum() * inv;
  return Tensor<Scalar>::make_result(Shape{}, std::move(out), {x}, [inv](detail::Node<Scalar>& self) {
    auto& p = *self.parents[0];
    p.grad_buffer() += self.grad[0] * inv;
  });
}

template <typename Scalar>
Tensor<Scalar> mean_spatial(const Tensor<Scalar>& x) {
  const Shape s = x.shape();
  const Shape os{s.n, s.c, 1, 1};
  const Index plane = s.plane();
  Array<Scalar> out(os.size());
  for (Index p = 0; p < os.size(); ++p) out[p] = x.value().segment(p * plane, plane).mean();
  return Tensor<Scalar>::make_result(os, std::move(out), {x}, [plane](detail::Node<Scalar>& self) {
    auto& p = *self.parents[0];
    for (Index i = 0; i < self.value.size(); ++i) {
      p.grad_buffer().segment(i * plane, plane) += self.grad[i] / Scalar(plane);
    }
  });
}

template <typename Scalar>
Tensor<Scalar> mean_channels(const Tensor<Scalar>& x) {
  const Shape s = x.shape();
  if (s.c == 0) throw ShapeError("mean_channels: zero channels");
  const Shape os{s.n, 1, s.h, s.w};
  const Index plane = s.plane();
  Array<Scalar> out = Array<Scalar>::Zero(os.size());
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      out.segment(Index(n) * plane, plane) += x.value().segment((Index(n) * s.c + c) * plane, plane);
    }
  }
  out /= Scalar(s.c);
  return Tensor<Scalar>::make_result(os, std::move(out), {x}, [s, plane](detail::Node<Scalar>& self) {
    auto& p = *self.parents[0];
    for (int n = 0; n < s.n; ++n) {
      for (int c = 0; c < s.c; ++c) {
        p.grad_buffer().segment((Index(n) * s.c + c) * plane, plane) +=
            self.grad.segment(Index(n) * plane, plane) / Scalar(s.c);
      }
    }
  });
}

template <typename Scalar>
MinResult<Scalar> min_over_list(std::span<const Tensor<Scalar>> inputs) {
  if (inputs.empty()) throw ConfigError("min_over_list: empty input list");
  const Shape s = inputs[0].shape();
  for (const auto& t : inputs) check_same_shape(t.shape(), s, "min_over_list");
  Array<Scalar> out = inputs[0].value();
  auto argmin = std::make_shared<std::vector<int>>(std::size_t(s.size()), 0);
  for (std::size_t i = 1; i < inputs.size(); ++i) {
    const Scalar* v = inputs[i].value().data();
    for (Index e = 0; e < s.size(); ++e) {
      if (v[e] < out[e]) {
        out[e] = v[e];
        (*argmin)[std::size_t(e)] = int(i);
      }
    }
  }
  std::vector<Tensor<Scalar>> parents(inputs.begin(), inputs.end());
  MinResult<Scalar> result;
  result.argmin = *argmin;
  result.value = Tensor<Scalar>::make_result(s, std::move(out), parents, [argmin](detail::Node<Scalar>& self) {
    for (Index e = 0; e < self.value.size(); ++e) {
      auto& p = *self.parents[std::size_t((*argmin)[std::size_t(e)])];
      if (p.requires_grad) p.grad_buffer()[e] += self.grad[e];
    }
  });
  return result;
}

template <typename Scalar>
Tensor<Scalar> softmax_cross_entropy(const Tensor<Scalar>& logits, std::span<const int> labels,
                                     int ignore_label) {
  const Shape s = logits.shape();
  const Index plane = s.plane();
  if (Index(labels.size()) != Index(s.n) * plane) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     s.str());
  }
  auto probs = std::make_shared<Array<Scalar>>(s.size());
  const Scalar* x = logits.value().data();
  double total = 0;
  Index count = 0;
  for (int n = 0; n < s.n; ++n) {
    for (Index q = 0; q < plane; ++q) {
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      for (int c = 0; c < s.c; ++c) mx = std::max(mx, x[(Index(n) * s.c + c) * plane + q]);
      Scalar z = 0;
      for (int c = 0; c < s.c; ++c) {
        const Index i = (Index(n) * s.c + c) * plane + q;
        (*probs)[i] = std::exp(x[i] - mx);
        z += (*probs)[i];
      }
      for (int c = 0; c < s.c; ++c) (*probs)[(Index(n) * s.c + c) * plane + q] /= z;
      const int label = labels[std::size_t(Index(n) * plane + q)];
      if (label == ignore_label) continue;
      if (label < 0 || label >= s.c) {
        throw ConfigError("softmax_cross_entropy: label " + std::to_string(label) + " outside [0, " +
                          std::to_string(s.c) + ")");
      }
      total += double(mx + std::log(z) - x[(Index(n) * s.c + label) * plane + q]);
      ++count;
    }
  }
  if (count == 0) throw UsageError("softmax_cross_entropy: every pixel is ignored");
  Array<Scalar> out(1);
  out[0] = Scalar(total / double(count));
  auto label_copy = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  return Tensor<Scalar>::make_result(
      Shape{}, std::move(out), {logits}, [s, plane, probs, label_copy, ignore_label, count](detail::Node<Scalar>& self) {
        auto& p = *self.parents[0];
        Scalar* gp = p.grad_buffer().data();
        const Scalar scale = self.grad[0] / Scalar(count);
        for (int n = 0; n < s.n; ++n) {
          for (Index q = 0; q < plane; ++q) {
            const int label = (*label_copy)[std::size_t(Index(n) * plane + q)];
            if (label == ignore_label) continue;
            for (int c = 0; c < s.c; ++c) {
              const Index i = (Index(n) * s.c + c) * plane + q;
              gp[i] += scale * ((*probs)[i] - (c == label ? Scalar(1) : Scalar(0)));
            }
          }
        }
      });
}

// --- Instantiation ------------------------------------------------------------

#define PFN_INSTANTIATE_OPS(S)                                                                    \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, int, int);      \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, int, int);                        \
  template Tensor<S> avg_pool2(const Tensor<S>&);                                                 \
  template Tensor<S> bilinear_resample(const Tensor<S>&, int, int);                               \
  template Tensor<S> grid_sample(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);           \
  template Tensor<S> local_mean(const Tensor<S>&, int);                                           \
  template Tensor<S> spatial_diff(const Tensor<S>&, Axis);                                        \
  template Tensor<S> concat_channels(std::span<const Tensor<S>>);                                 \
  template Tensor<S> slice_channels(const Tensor<S>&, int, int);                                  \
  template Tensor<S> channel_weighted_sum(std::span<const Tensor<S>>, const Tensor<S>&);          \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                     \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                                     \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                                     \
  template Tensor<S> div(const Tensor<S>&, const Tensor<S>&);                                     \
  template Tensor<S> add_scalar(const Tensor<S>&, std::type_identity_t<S>);                       \
  template Tensor<S> mul_scalar(const Tensor<S>&, std::type_identity_t<S>);                       \
  template Tensor<S> rdiv_scalar(std::type_identity_t<S>, const Tensor<S>&);                      \
  template Tensor<S> abs(const Tensor<S>&);                                                       \
  template Tensor<S> relu(const Tensor<S>&);                                                      \
  template Tensor<S> sigmoid(const Tensor<S>&);                                                   \
  template Tensor<S> clamp(const Tensor<S>&, std::type_identity_t<S>, std::type_identity_t<S>);   \
  template Tensor<S> exp_neg(const Tensor<S>&);                                                   \
  template Tensor<S> square(const Tensor<S>&);                                                    \
  template Tensor<S> sqrt(const Tensor<S>&);                                                      \
  template Tensor<S> sin(const Tensor<S>&);                                                       \
  template Tensor<S> cos(const Tensor<S>&);                                                       \
  template Tensor<S> sum_all(const Tensor<S>&);                                                   \
  template Tensor<S> mean_all(const Tensor<S>&);                                                  \
  template Tensor<S> mean_spatial(const Tensor<S>&);                                              \
  template Tensor<S> mean_channels(const Tensor<S>&);                                             \
  template MinResult<S> min_over_list(std::span<const Tensor<S>>);                                \
  template Tensor<S> softmax_cross_entropy(const Tensor<S>&, std::span<const int>, int);

PFN_INSTANTIATE_OPS(float)
PFN_INSTANTIATE_OPS(double)

#undef PFN_INSTANTIATE_OPS

}  // namespace pfn
