#pragma once

// Differentiable primitives. Each function evaluates its forward kernel,
// appends the result to the owning Graph and registers the matching
// backward kernel. Shapes follow NHWC for image tensors.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "gandef/autodiff.hpp"
#include "gandef/error.hpp"
#include "gandef/rng.hpp"
#include "gandef/tensor.hpp"

namespace gandef {

enum class Padding { Same, Valid };

struct Conv2DAttrs {
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
  Padding padding = Padding::Same;
};

struct Pool2DAttrs {
  std::size_t window_h = 2;
  std::size_t window_w = 2;
  std::size_t stride_h = 2;
  std::size_t stride_w = 2;
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

inline Graph& same_graph(Var a, Var b) {
  require(a.graph != nullptr && a.graph == b.graph, ErrorKind::GraphNotFinalized, "operands from different graphs");
  return *a.graph;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), ErrorKind::ShapeMismatch,
          std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

/// Output extent and leading pad for one spatial axis.
struct AxisGeom {
  std::size_t out = 0;
  std::size_t pad_lo = 0;
};

inline AxisGeom axis_geom(std::size_t in, std::size_t k, std::size_t stride, Padding pad) {
  if (pad == Padding::Same) {
    const std::size_t out = (in + stride - 1) / stride;
    const std::size_t need = (out - 1) * stride + k;
    const std::size_t total = need > in ? need - in : 0;
    return {out, total / 2};
  }
  require(in >= k, ErrorKind::ShapeMismatch, "valid convolution window larger than input");
  return {(in - k) / stride + 1, 0};
}

struct ConvGeom {
  std::size_t n, h, w, c, kh, kw, oc, sh, sw, oh, ow, pad_t, pad_l;
  std::size_t patch() const { return kh * kw * c; }
};

inline ConvGeom conv_geom(const Shape& x, const Shape& w, const Conv2DAttrs& a) {
  require(a.stride_h > 0 && a.stride_w > 0, ErrorKind::InvalidAttribute, "conv2d stride must be positive");
  require(x.size() == 4, ErrorKind::ShapeMismatch, "conv2d input must be NHWC, got " + shape_str(x));
  require(w.size() == 4 && w[2] == x[3], ErrorKind::ShapeMismatch,
          "conv2d kernel " + shape_str(w) + " incompatible with input " + shape_str(x));
  const auto gh = axis_geom(x[1], w[0], a.stride_h, a.padding);
  const auto gw = axis_geom(x[2], w[1], a.stride_w, a.padding);
  return {x[0], x[1], x[2], x[3], w[0], w[1], w[3], a.stride_h, a.stride_w, gh.out, gw.out, gh.pad_lo, gw.pad_lo};
}

/// Unfold images [n0, n1) into rows of (ky, kx, c) patches.
inline void im2col(const double* x, const ConvGeom& g, std::size_t n0, std::size_t n1, double* cols) {
  const std::size_t patch = g.patch();
  double* row = cols;
  for (std::size_t n = n0; n < n1; ++n) {
    const double* img = x + n * g.h * g.w * g.c;
    for (std::size_t oy = 0; oy < g.oh; ++oy) {
      for (std::size_t ox = 0; ox < g.ow; ++ox, row += patch) {
        double* dst = row;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          const long iy = static_cast<long>(oy * g.sh + ky) - static_cast<long>(g.pad_t);
          for (std::size_t kx = 0; kx < g.kw; ++kx, dst += g.c) {
            const long ix = static_cast<long>(ox * g.sw + kx) - static_cast<long>(g.pad_l);
            if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.h) || ix >= static_cast<long>(g.w)) {
              std::fill_n(dst, g.c, 0.0);
            } else {
              std::copy_n(img + (static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)) * g.c, g.c, dst);
            }
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatter-add patch rows back into images [n0, n1).
inline void col2im(const double* cols, const ConvGeom& g, std::size_t n0, std::size_t n1, double* dx) {
  const std::size_t patch = g.patch();
  const double* row = cols;
  for (std::size_t n = n0; n < n1; ++n) {
    double* img = dx + n * g.h * g.w * g.c;
    for (std::size_t oy = 0; oy < g.oh; ++oy) {
      for (std::size_t ox = 0; ox < g.ow; ++ox, row += patch) {
        const double* src = row;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          const long iy = static_cast<long>(oy * g.sh + ky) - static_cast<long>(g.pad_t);
          for (std::size_t kx = 0; kx < g.kw; ++kx, src += g.c) {
            const long ix = static_cast<long>(ox * g.sw + kx) - static_cast<long>(g.pad_l);
            if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.h) || ix >= static_cast<long>(g.w)) continue;
            double* d = img + (static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)) * g.c;
            for (std::size_t c = 0; c < g.c; ++c) d[c] += src[c];
          }
        }
      }
    }
  }
}

/// Images per im2col chunk, bounding the scratch matrix to ~2M doubles.
inline std::size_t conv_chunk(const ConvGeom& g) {
  const std::size_t per_image = std::max<std::size_t>(1, g.oh * g.ow * g.patch());
  return std::clamp<std::size_t>((std::size_t{1} << 21) / per_image, 1, g.n);
}

inline bool is_pointwise(const ConvGeom& g) {
  return g.kh == 1 && g.kw == 1 && g.sh == 1 && g.sw == 1 && g.pad_t == 0 && g.pad_l == 0;
}

inline double stable_sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace detail

namespace ops {

inline Var add(Var a, Var b) {
  Graph& g = detail::same_graph(a, b);
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const NodeId ia = a.id, ib = b.id;
  return g.push(OpKind::Add, {ia, ib}, std::move(out), [ia, ib](Graph& gr, NodeId self) {
    const Tensor& go = gr.grad_buffer(self);
    for (NodeId in : {ia, ib}) {
      if (!gr.requires_grad(in)) continue;
      Tensor& gi = gr.grad_buffer(in);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i];
    }
  });
}

inline Var subtract(Var a, Var b) {
  Graph& g = detail::same_graph(a, b);
  detail::require_same_shape(a.value(), b.value(), "subtract");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const NodeId ia = a.id, ib = b.id;
  return g.push(OpKind::Subtract, {ia, ib}, std::move(out), [ia, ib](Graph& gr, NodeId self) {
    const Tensor& go = gr.grad_buffer(self);
    if (gr.requires_grad(ia)) {
      Tensor& gi = gr.grad_buffer(ia);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i];
    }
    if (gr.requires_grad(ib)) {
      Tensor& gi = gr.grad_buffer(ib);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] -= go[i];
    }
  });
}

/// Elementwise product.
inline Var multiply(Var a, Var b) {
  Graph& g = detail::same_graph(a, b);
  detail::require_same_shape(a.value(), b.value(), "multiply");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const NodeId ia = a.id, ib = b.id;
  return g.push(OpKind::Multiply, {ia, ib}, std::move(out), [ia, ib](Graph& gr, NodeId self) {
    const Tensor& go = gr.grad_buffer(self);
    if (gr.requires_grad(ia)) {
      const Tensor& other = gr.value(ib);
      Tensor& gi = gr.grad_buffer(ia);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i] * other[i];
    }
    if (gr.requires_grad(ib)) {
      const Tensor& other = gr.value(ia);
      Tensor& gi = gr.grad_buffer(ib);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i] * other[i];
    }
  });
}

inline Var scale(Var a, double c) {
  Graph& g = *a.graph;
  Tensor out = a.value();
  for (auto& v : out.data()) v *= c;
  const NodeId ia = a.id;
  return g.push(OpKind::Scale, {ia}, std::move(out), [ia, c](Graph& gr, NodeId self) {
    const Tensor& go = gr.grad_buffer(self);
    Tensor& gi = gr.grad_buffer(ia);
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += c * go[i];
  });
}

inline Var add_scalar(Var a, double c) {
  Graph& g = *a.graph;
  Tensor out = a.value();
  for (auto& v : out.data()) v += c;
  const NodeId ia = a.id;
  return g.push(OpKind::AddScalar, {ia}, std::move(out), [ia](Graph& gr, NodeId self) {
    const Tensor& go = gr.grad_buffer(self);
    Tensor& gi = gr.grad_buffer(ia);
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i];
  });
}

/// [M,K] x [K,N] -> [M,N]
inline Var matmul(Var a, Var b) {
  using namespace detail;
  Graph& g = same_graph(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0), ErrorKind::ShapeMismatch,
          "matmul " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  MapMat(out.ptr(), m, n).noalias() = CMapMat(av.ptr(), m, k) * CMapMat(bv.ptr(), k, n);
  const NodeId ia = a.id, ib = b.id;
  return g.push(OpKind::MatMul, {ia, ib}, std::move(out), [ia, ib, m, k, n](Graph& gr, NodeId self) {
    CMapMat go(gr.grad_buffer(self).ptr(), m, n);
    if (gr.requires_grad(ia)) {
      MapMat(gr.grad_buffer(ia).ptr(), m, k).noalias() += go * CMapMat(gr.value(ib).ptr(), k, n).transpose();
    }
    if (gr.requires_grad(ib)) {
      MapMat(gr.grad_buffer(ib).ptr(), k, n).noalias() += CMapMat(gr.value(ia).ptr(), m, k).transpose() * go;
    }
  });
}

/// Affine map x[N,in] * w[in,out] + b[out].
inline Var dense(Var x, Var w, Var b) {
  using namespace detail;
  Graph& g = same_graph(x, w);
  same_graph(x, b);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  require(xv.rank() == 2 && wv.rank() == 2 && xv.dim(1) == wv.dim(0) && bv.size() == wv.dim(1),
          ErrorKind::ShapeMismatch,
          "dense " + shape_str(xv.shape()) + " x " + shape_str(wv.shape()) + " + " + shape_str(bv.shape()));
  const std::size_t m = xv.dim(0), k = xv.dim(1), n = wv.dim(1);
  Tensor out({m, n});
  MapMat o(out.ptr(), m, n);
  o.noalias() = CMapMat(xv.ptr(), m, k) * CMapMat(wv.ptr(), k, n);
  o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bv.ptr(), n);
  const NodeId ix = x.id, iw = w.id, ib = b.id;
  return g.push(OpKind::Dense, {ix, iw, ib}, std::move(out), [ix, iw, ib, m, k, n](Graph& gr, NodeId self) {
    CMapMat go(gr.grad_buffer(self).ptr(), m, n);
    if (gr.requires_grad(ix)) {
      MapMat(gr.grad_buffer(ix).ptr(), m, k).noalias() += go * CMapMat(gr.value(iw).ptr(), k, n).transpose();
    }
    if (gr.requires_grad(iw)) {
      MapMat(gr.grad_buffer(iw).ptr(), k, n).noalias() += CMapMat(gr.value(ix).ptr(), m, k).transpose() * go;
    }
    if (gr.requires_grad(ib)) {
      Eigen::Map<Eigen::RowVectorXd>(gr.grad_buffer(ib).ptr(), n) += go.colwise().sum();
    }
  });
}

/// x[N,H,W,C] conv w[KH,KW,C,OC] + b[OC] -> [N,OH,OW,OC].
inline Var conv2d(Var x, Var w, Var b, Conv2DAttrs attrs = {}) {
  using namespace detail;
  Graph& g = same_graph(x, w);
  same_graph(x, b);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  const ConvGeom geo = conv_geom(xv.shape(), wv.shape(), attrs);
  require(bv.size() == geo.oc, ErrorKind::ShapeMismatch, "conv2d bias extent");
  const std::size_t patch = geo.patch();
  const std::size_t per_img = geo.oh * geo.ow;
  Tensor out({geo.n, geo.oh, geo.ow, geo.oc});
  CMapMat wm(wv.ptr(), patch, geo.oc);
  const Eigen::Map<const Eigen::RowVectorXd> bias(bv.ptr(), geo.oc);
  if (is_pointwise(geo)) {
    MapMat o(out.ptr(), geo.n * per_img, geo.oc);
    o.noalias() = CMapMat(xv.ptr(), geo.n * per_img, patch) * wm;
    o.rowwise() += bias;
  } else {
    const std::size_t chunk = conv_chunk(geo);
    std::vector<double> cols(chunk * per_img * patch);
    for (std::size_t n0 = 0; n0 < geo.n; n0 += chunk) {
      const std::size_t n1 = std::min(geo.n, n0 + chunk);
      const std::size_t rows = (n1 - n0) * per_img;
      im2col(xv.ptr(), geo, n0, n1, cols.data());
      MapMat o(out.ptr() + n0 * per_img * geo.oc, rows, geo.oc);
      o.noalias() = CMapMat(cols.data(), rows, patch) * wm;
      o.rowwise() += bias;
    }
  }
  const NodeId ix = x.id, iw = w.id, ib = b.id;
  return g.push(OpKind::Conv2D, {ix, iw, ib}, std::move(out), [ix, iw, ib, geo](Graph& gr, NodeId self) {
    const std::size_t patch = geo.patch();
    const std::size_t per_img = geo.oh * geo.ow;
    const Tensor& go = gr.grad_buffer(self);
    const Tensor& xv = gr.value(ix);
    const Tensor& wv = gr.value(iw);
    const bool need_x = gr.requires_grad(ix), need_w = gr.requires_grad(iw), need_b = gr.requires_grad(ib);
    if (need_b) {
      Eigen::Map<Eigen::RowVectorXd>(gr.grad_buffer(ib).ptr(), geo.oc) +=
          CMapMat(go.ptr(), geo.n * per_img, geo.oc).colwise().sum();
    }
    if (!need_x && !need_w) return;
    CMapMat wm(wv.ptr(), patch, geo.oc);
    if (is_pointwise(geo)) {
      CMapMat gom(go.ptr(), geo.n * per_img, geo.oc);
      if (need_w) {
        MapMat(gr.grad_buffer(iw).ptr(), patch, geo.oc).noalias() +=
            CMapMat(xv.ptr(), geo.n * per_img, patch).transpose() * gom;
      }
      if (need_x) MapMat(gr.grad_buffer(ix).ptr(), geo.n * per_img, patch).noalias() += gom * wm.transpose();
      return;
    }
    const std::size_t chunk = conv_chunk(geo);
    std::vector<double> cols(chunk * per_img * patch);
    std::vector<double> dcols(need_x ? cols.size() : 0);
    double* dw = need_w ? gr.grad_buffer(iw).ptr() : nullptr;
    double* dx = need_x ? gr.grad_buffer(ix).ptr() : nullptr;
    for (std::size_t n0 = 0; n0 < geo.n; n0 += chunk) {
      const std::size_t n1 = std::min(geo.n, n0 + chunk);
      const std::size_t rows = (n1 - n0) * per_img;
      CMapMat gom(go.ptr() + n0 * per_img * geo.oc, rows, geo.oc);
      if (need_w) {
        im2col(xv.ptr(), geo, n0, n1, cols.data());
        MapMat(dw, patch, geo.oc).noalias() += CMapMat(cols.data(), rows, patch).transpose() * gom;
      }
      if (need_x) {
        MapMat(dcols.data(), rows, patch).noalias() = gom * wm.transpose();
        col2im(dcols.data(), geo, n0, n1, dx);
      }
    }
  });
}

/// Max pooling with valid padding; ties route to the first maximal element.
inline Var maxpool2d(Var x, Pool2DAttrs attrs = {}) {
  Graph& g = *x.graph;
  const Tensor& xv = x.value();
  require(attrs.window_h > 0 && attrs.window_w > 0 && attrs.stride_h > 0 && attrs.stride_w > 0,
          ErrorKind::InvalidAttribute, "maxpool2d window and stride must be positive");
  require(xv.rank() == 4 && xv.dim(1) >= attrs.window_h && xv.dim(2) >= attrs.window_w, ErrorKind::ShapeMismatch,
          "maxpool2d input " + shape_str(xv.shape()));
  const std::size_t n = xv.dim(0), h = xv.dim(1), w = xv.dim(2), c = xv.dim(3);
  const std::size_t oh = (h - attrs.window_h) / attrs.stride_h + 1;
  const std::size_t ow = (w - attrs.window_w) / attrs.stride_w + 1;
  Tensor out({n, oh, ow, c});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  std::size_t o = 0;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox)
        for (std::size_t ch = 0; ch < c; ++ch, ++o) {
          std::size_t best = ((b * h + oy * attrs.stride_h) * w + ox * attrs.stride_w) * c + ch;
          double bv = xv[best];
          for (std::size_t ky = 0; ky < attrs.window_h; ++ky)
            for (std::size_t kx = 0; kx < attrs.window_w; ++kx) {
              const std::size_t idx = ((b * h + oy * attrs.stride_h + ky) * w + ox * attrs.stride_w + kx) * c + ch;
              if (xv[idx] > bv) {
                bv = xv[idx];
                best = idx;
              }
            }
          out[o] = bv;
          (*argmax)[o] = best;
        }
  const NodeId ix = x.id;
  return g.push(OpKind::MaxPool2D, {ix}, std::move(out), [ix, argmax](Graph& gr, NodeId self) {
    const Tensor& go = gr.grad_buffer(self);
    Tensor& gi = gr.grad_buffer(ix);
    for (std::size_t i = 0; i < go.size(); ++i) gi[(*argmax)[i]] += go[i];
  });
}

/// [N,H,W,C] -> [N,C]
inline Var global_avg_pool(Var x) {
  Graph& g = *x.graph;
  const Tensor& xv = x.value();
  require(xv.rank() == 4, ErrorKind::ShapeMismatch, "global_avg_pool input " + shape_str(xv.shape()));
  const std::size_t n = xv.dim(0), hw = xv.dim(1) * xv.dim(2), c = xv.dim(3);
  Tensor out({n, c});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t ch = 0; ch < c; ++ch) out[b * c + ch] += xv[(b * hw + p) * c + ch];
  const double inv = 1.0 / static_cast<double>(hw);
  for (auto& v : out.data()) v *= inv;
  const NodeId ix = x.id;
  return g.push(OpKind::GlobalAvgPool, {ix}, std::move(out), [ix, n, hw, c, inv](Graph& gr, NodeId self) {
    const Tensor& go = gr.grad_buffer(self);
    Tensor& gi = gr.grad_buffer(ix);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t p = 0; p < hw; ++p)
        for (std::size_t ch = 0; ch < c; ++ch) gi[(b * hw + p) * c + ch] += go[b * c + ch] * inv;
  });
}

inline Var reshape(Var x, Shape shape) {
  Graph& g = *x.graph;
  require(shape_size(shape) == x.value().size(), ErrorKind::ShapeMismatch,
          "reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  Tensor out = x.value().reshaped(std::move(shape));
  const NodeId ix = x.id;
  return g.push(OpKind::Reshape, {ix}, std::move(out), [ix](Graph& gr, NodeId self) {
    const Tensor& go = gr.grad_buffer(self);
    Tensor& gi = gr.grad_buffer(ix);
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i];
  });
}

/// [N, ...] -> [N, prod(...)]
inline Var flatten(Var x) {
  require(x.value().rank() >= 1, ErrorKind::ShapeMismatch, "flatten of a scalar");
  const std::size_t n = x.value().dim(0);
  Graph& g = *x.graph;
  Tensor out = x.value().reshaped({n, x.value().size() / n});
  const NodeId ix = x.id;
  return g.push(OpKind::Flatten, {ix}, std::move(out), [ix](Graph& gr, NodeId self) {
    const Tensor& go = gr.grad_buffer(self);
    Tensor& gi = gr.grad_buffer(ix);
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i];
  });
}

inline Var relu(Var x) {
  Graph& g = *x.graph;
  Tensor out = x.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  const NodeId ix = x.id;
  return g.push(OpKind::Relu, {ix}, std::move(out), [ix](Graph& gr, NodeId self) {
    const Tensor& go = gr.grad_buffer(self);
    const Tensor& xv = gr.value(ix);
    Tensor& gi = gr.grad_buffer(ix);
    for (std::size_t i = 0; i < gi.size(); ++i)
      if (xv[i] > 0.0) gi[i] += go[i];
  });
}

inline Var sigmoid(Var x) {
  Graph& g = *x.graph;
  Tensor out = x.value();
  for (auto& v : out.data()) v = detail::stable_sigmoid(v);
  const NodeId ix = x.id;
  return g.push(OpKind::Sigmoid, {ix}, std::move(out), [ix](Graph& gr, NodeId self) {
    const Tensor& go = gr.grad_buffer(self);
    const Tensor& y = gr.value(self);
    Tensor& gi = gr.grad_buffer(ix);
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i] * y[i] * (1.0 - y[i]);
  });
}

/// Row-wise softmax over the last axis of a rank-1 or rank-2 tensor.
inline Var softmax(Var x) {
  Graph& g = *x.graph;
  const Tensor& xv = x.value();
  require(xv.rank() == 1 || xv.rank() == 2, ErrorKind::ShapeMismatch, "softmax input " + shape_str(xv.shape()));
  const std::size_t k = xv.shape().back();
  const std::size_t rows = xv.size() / k;
  Tensor out = xv;
  for (std::size_t r = 0; r < rows; ++r) {
    double* z = out.ptr() + r * k;
    const double m = *std::max_element(z, z + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += (z[j] = std::exp(z[j] - m));
    for (std::size_t j = 0; j < k; ++j) z[j] /= s;
  }
  const NodeId ix = x.id;
  return g.push(OpKind::Softmax, {ix}, std::move(out), [ix, rows, k](Graph& gr, NodeId self) {
    const Tensor& go = gr.grad_buffer(self);
    const Tensor& y = gr.value(self);
    Tensor& gi = gr.grad_buffer(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < k; ++j) dot += go[r * k + j] * y[r * k + j];
      for (std::size_t j = 0; j < k; ++j) gi[r * k + j] += y[r * k + j] * (go[r * k + j] - dot);
    }
  });
}

/// Inverted dropout: train mode zeroes with probability `rate` and rescales
/// survivors by 1/(1-rate); eval mode returns `x` unchanged.
inline Var dropout(Var x, double rate, Rng& rng, bool train) {
  require(rate >= 0.0 && rate < 1.0, ErrorKind::InvalidAttribute, "dropout rate must lie in [0,1)");
  if (!train || rate == 0.0) return x;
  Graph& g = *x.graph;
  const double keep_scale = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(x.value().size());
  for (auto& m : *mask) m = uniform01(rng) >= rate ? keep_scale : 0.0;
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*mask)[i];
  const NodeId ix = x.id;
  return g.push(OpKind::Dropout, {ix}, std::move(out), [ix, mask](Graph& gr, NodeId self) {
    const Tensor& go = gr.grad_buffer(self);
    Tensor& gi = gr.grad_buffer(ix);
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i] * (*mask)[i];
  });
}

/// Euclidean norm of each row of a [N,K] tensor -> [N]. A rank-1 input is a single row.
/// The subgradient at the origin is taken as zero.
inline Var l2_norm(Var x) {
  Graph& g = *x.graph;
  const Tensor& xv = x.value();
  require(xv.rank() == 1 || xv.rank() == 2, ErrorKind::ShapeMismatch, "l2_norm input " + shape_str(xv.shape()));
  const std::size_t k = xv.shape().back();
  const std::size_t rows = xv.size() / k;
  Tensor out({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += xv[r * k + j] * xv[r * k + j];
    out[r] = std::sqrt(s);
  }
  const NodeId ix = x.id;
  return g.push(OpKind::L2Norm, {ix}, std::move(out), [ix, rows, k](Graph& gr, NodeId self) {
    const Tensor& go = gr.grad_buffer(self);
    const Tensor& y = gr.value(self);
    const Tensor& xv = gr.value(ix);
    Tensor& gi = gr.grad_buffer(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      if (y[r] == 0.0) continue;
      const double s = go[r] / y[r];
      for (std::size_t j = 0; j < k; ++j) gi[r * k + j] += s * xv[r * k + j];
    }
  });
}

/// Per-example softmax cross-entropy of logits [N,K] against integer labels -> [N].
/// Log-sum-exp stabilized.
inline Var cross_entropy(Var logits, std::span<const int> labels) {
  Graph& g = *logits.graph;
  const Tensor& z = logits.value();
  require(z.rank() == 2 && z.dim(0) == labels.size(), ErrorKind::ShapeMismatch,
          "cross_entropy logits " + shape_str(z.shape()) + " vs " + std::to_string(labels.size()) + " labels");
  const std::size_t n = z.dim(0), k = z.dim(1);
  auto probs = std::make_shared<std::vector<double>>(z.size());
  auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  Tensor out({n});
  for (std::size_t r = 0; r < n; ++r) {
    const int t = labels[r];
    require(t >= 0 && static_cast<std::size_t>(t) < k, ErrorKind::InvalidAttribute, "label out of range");
    const double* zr = z.ptr() + r * k;
    const double m = *std::max_element(zr, zr + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += ((*probs)[r * k + j] = std::exp(zr[j] - m));
    for (std::size_t j = 0; j < k; ++j) (*probs)[r * k + j] /= s;
    out[r] = m + std::log(s) - zr[t];
  }
  const NodeId iz = logits.id;
  return g.push(OpKind::CrossEntropy, {iz}, std::move(out), [iz, probs, lab, n, k](Graph& gr, NodeId self) {
    const Tensor& go = gr.grad_buffer(self);
    Tensor& gi = gr.grad_buffer(iz);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < k; ++j) gi[r * k + j] += go[r] * (*probs)[r * k + j];
      gi[r * k + static_cast<std::size_t>((*lab)[r])] -= go[r];
    }
  });
}

/// Per-example binary cross-entropy of probabilities p ([N] or [N,1]) against targets in [0,1] -> [N].
/// Probabilities are clamped to [1e-12, 1-1e-12]; the clamped region has zero gradient.
inline Var binary_cross_entropy(Var p, std::span<const double> targets) {
  constexpr double eps = 1e-12;
  Graph& g = *p.graph;
  const Tensor& pv = p.value();
  require(pv.size() == targets.size() && (pv.rank() == 1 || (pv.rank() == 2 && pv.dim(1) == 1)),
          ErrorKind::ShapeMismatch, "binary_cross_entropy input " + shape_str(pv.shape()));
  const std::size_t n = pv.size();
  auto tgt = std::make_shared<std::vector<double>>(targets.begin(), targets.end());
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    const double q = std::clamp(pv[i], eps, 1.0 - eps);
    out[i] = -(targets[i] * std::log(q) + (1.0 - targets[i]) * std::log(1.0 - q));
  }
  const NodeId ip = p.id;
  return g.push(OpKind::BinaryCrossEntropy, {ip}, std::move(out), [ip, tgt, n](Graph& gr, NodeId self) {
    const Tensor& go = gr.grad_buffer(self);
    const Tensor& pv = gr.value(ip);
    Tensor& gi = gr.grad_buffer(ip);
    for (std::size_t i = 0; i < n; ++i) {
      const double q = pv[i];
      if (q <= eps || q >= 1.0 - eps) continue;
      const double s = (*tgt)[i];
      gi[i] += go[i] * (-s / q + (1.0 - s) / (1.0 - q));
    }
  });
}

/// sign(x) with sign(0) = 0; its derivative is zero everywhere.
inline Var sign(Var x) {
  Graph& g = *x.graph;
  Tensor out = x.value();
  for (auto& v : out.data()) v = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
  return g.push(OpKind::Sign, {x.id}, std::move(out), [](Graph&, NodeId) {});
}

/// Clamp to [lo, hi]; gradient passes only strictly inside the interval.
inline Var clip(Var x, double lo, double hi) {
  require(lo <= hi, ErrorKind::InvalidAttribute, "clip requires lo <= hi");
  Graph& g = *x.graph;
  Tensor out = x.value();
  for (auto& v : out.data()) v = std::clamp(v, lo, hi);
  const NodeId ix = x.id;
  return g.push(OpKind::Clip, {ix}, std::move(out), [ix, lo, hi](Graph& gr, NodeId self) {
    const Tensor& go = gr.grad_buffer(self);
    const Tensor& xv = gr.value(ix);
    Tensor& gi = gr.grad_buffer(ix);
    for (std::size_t i = 0; i < gi.size(); ++i)
      if (xv[i] > lo && xv[i] < hi) gi[i] += go[i];
  });
}

inline Var sum(Var x) {
  Graph& g = *x.graph;
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const NodeId ix = x.id;
  return g.push(OpKind::Sum, {ix}, Tensor::scalar(s), [ix](Graph& gr, NodeId self) {
    const double go = gr.grad_buffer(self)[0];
    for (auto& v : gr.grad_buffer(ix).data()) v += go;
  });
}

inline Var mean(Var x) {
  Graph& g = *x.graph;
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const double inv = 1.0 / static_cast<double>(x.value().size());
  const NodeId ix = x.id;
  return g.push(OpKind::Mean, {ix}, Tensor::scalar(s * inv), [ix, inv](Graph& gr, NodeId self) {
    const double go = gr.grad_buffer(self)[0] * inv;
    for (auto& v : gr.grad_buffer(ix).data()) v += go;
  });
}

}  // namespace ops
}  // namespace gandef
