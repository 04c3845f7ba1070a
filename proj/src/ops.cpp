#include "instcal/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <string>

namespace instcal {
namespace {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

void require_same_shape(const char* op, Var a, Var b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

void require_rank(const char* op, const char* what, Var v, std::size_t rank) {
  if (v.value().rank() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                         to_string(v.shape()));
  }
}

// Splits a shape around `axis` into (outer, extent, inner) for strided loops.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + to_string(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

void im2col(const Real* img, std::size_t channels, std::size_t height, std::size_t width, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t out_h, std::size_t out_w, Real* col) {
  const std::size_t plane = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < kh; ++i) {
      for (std::size_t j = 0; j < kw; ++j) {
        Real* row = col + ((c * kh + i) * kw + j) * plane;
        for (std::size_t oh = 0; oh < out_h; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + i) - static_cast<std::ptrdiff_t>(pad);
          Real* dst = row + oh * out_w;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(height)) {
            std::fill(dst, dst + out_w, Real(0));
            continue;
          }
          const Real* src = img + (c * height + static_cast<std::size_t>(ih)) * width;
          for (std::size_t ow = 0; ow < out_w; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + j) - static_cast<std::ptrdiff_t>(pad);
            dst[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(width)) ? Real(0) : src[iw];
          }
        }
      }
    }
  }
}

void col2im(const Real* col, std::size_t channels, std::size_t height, std::size_t width, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t out_h, std::size_t out_w, Real* img) {
  const std::size_t plane = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < kh; ++i) {
      for (std::size_t j = 0; j < kw; ++j) {
        const Real* row = col + ((c * kh + i) * kw + j) * plane;
        for (std::size_t oh = 0; oh < out_h; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + i) - static_cast<std::ptrdiff_t>(pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(height)) continue;
          Real* dst = img + (c * height + static_cast<std::size_t>(ih)) * width;
          const Real* src = row + oh * out_w;
          for (std::size_t ow = 0; ow < out_w; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + j) - static_cast<std::ptrdiff_t>(pad);
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(width)) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

// Index mapping for operands broadcast against an [..., C] result.
struct Broadcast {
  enum class Kind { Full, Channel, Scalar } kind;
  std::size_t channels;
  std::size_t map(std::size_t i) const {
    switch (kind) {
      case Kind::Full: return i;
      case Kind::Channel: return i % channels;
      default: return 0;
    }
  }
};

Broadcast broadcast_for(const char* op, const char* name, const Tensor& operand, const Shape& out) {
  const std::size_t total = shape_numel(out);
  const std::size_t channels = out.empty() ? 1 : out.back();
  if (operand.numel() == total) return {Broadcast::Kind::Full, channels};
  if (operand.numel() == channels && operand.rank() == 1) return {Broadcast::Kind::Channel, channels};
  if (operand.numel() == 1) return {Broadcast::Kind::Scalar, channels};
  throw DimensionError(std::string(op) + ": operand '" + name + "' of shape " + to_string(operand.shape()) +
                       " does not broadcast to " + to_string(out));
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape("add", a, b);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  return a.graph().record("add", std::move(out), {a, b}, [a, b](Graph& g, const Tensor& go) {
    for (Var v : {a, b}) {
      if (!v.requires_grad()) continue;
      Tensor& gv = g.grad_buffer(v);
      for (std::size_t i = 0; i < go.numel(); ++i) gv[i] += go[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a, b);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  return a.graph().record("sub", std::move(out), {a, b}, [a, b](Graph& g, const Tensor& go) {
    if (a.requires_grad()) {
      Tensor& ga = g.grad_buffer(a);
      for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
    }
    if (b.requires_grad()) {
      Tensor& gb = g.grad_buffer(b);
      for (std::size_t i = 0; i < go.numel(); ++i) gb[i] -= go[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a, b);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return a.graph().record("mul", std::move(out), {a, b}, [a, b](Graph& g, const Tensor& go) {
    if (a.requires_grad()) {
      Tensor& ga = g.grad_buffer(a);
      for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * b.value()[i];
    }
    if (b.requires_grad()) {
      Tensor& gb = g.grad_buffer(b);
      for (std::size_t i = 0; i < go.numel(); ++i) gb[i] += go[i] * a.value()[i];
    }
  });
}

Var scale(Var a, Real factor) {
  Tensor out = a.value();
  for (Real& v : out.data()) v *= factor;
  return a.graph().record("scale", std::move(out), {a}, [a, factor](Graph& g, const Tensor& go) {
    Tensor& ga = g.grad_buffer(a);
    for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * factor;
  });
}

Var square(Var a) {
  Tensor out = a.value();
  for (Real& v : out.data()) v *= v;
  return a.graph().record("square", std::move(out), {a}, [a](Graph& g, const Tensor& go) {
    Tensor& ga = g.grad_buffer(a);
    for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * Real(2) * a.value()[i];
  });
}

Var relu(Var x) {
  Tensor out = x.value();
  for (Real& v : out.data()) v = v > Real(0) ? v : Real(0);
  return x.graph().record("relu", std::move(out), {x}, [x](Graph& g, const Tensor& go) {
    Tensor& gx = g.grad_buffer(x);
    const Tensor& xv = x.value();
    for (std::size_t i = 0; i < go.numel(); ++i) {
      if (xv[i] > Real(0)) gx[i] += go[i];
    }
  });
}

Var clamp_min(Var x, Real floor) {
  Tensor out = x.value();
  for (Real& v : out.data()) v = std::max(v, floor);
  return x.graph().record("clamp_min", std::move(out), {x}, [x, floor](Graph& g, const Tensor& go) {
    Tensor& gx = g.grad_buffer(x);
    const Tensor& xv = x.value();
    for (std::size_t i = 0; i < go.numel(); ++i) {
      if (xv[i] >= floor) gx[i] += go[i];
    }
  });
}

Var sum(Var x) {
  const Tensor& xv = x.value();
  Real total = std::accumulate(xv.data().begin(), xv.data().end(), Real(0));
  return x.graph().record("sum", Tensor::scalar(total), {x}, [x](Graph& g, const Tensor& go) {
    Tensor& gx = g.grad_buffer(x);
    const Real s = go[0];
    for (Real& v : gx.data()) v += s;
  });
}

Var mean(Var x) {
  const Tensor& xv = x.value();
  if (xv.numel() == 0) throw DimensionError("mean: empty tensor");
  const Real n = static_cast<Real>(xv.numel());
  Real total = std::accumulate(xv.data().begin(), xv.data().end(), Real(0));
  return x.graph().record("mean", Tensor::scalar(total / n), {x}, [x, n](Graph& g, const Tensor& go) {
    Tensor& gx = g.grad_buffer(x);
    const Real s = go[0] / n;
    for (Real& v : gx.data()) v += s;
  });
}

Var conv2d(Var input, Var weight, Var bias, std::size_t stride, std::size_t padding) {
  require_rank("conv2d", "input", input, 4);
  require_rank("conv2d", "weight", weight, 4);
  require_rank("conv2d", "bias", bias, 1);
  const Shape& xs = input.shape();
  const Shape& ws = weight.shape();
  if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
  if (ws[1] != xs[1]) {
    throw DimensionError("conv2d: weight in-channels (axis 1) = " + std::to_string(ws[1]) +
                         " but input channels (axis 1) = " + std::to_string(xs[1]));
  }
  if (bias.shape()[0] != ws[0]) {
    throw DimensionError("conv2d: bias length (axis 0) = " + std::to_string(bias.shape()[0]) +
                         " but weight out-channels (axis 0) = " + std::to_string(ws[0]));
  }
  const std::size_t n = xs[0], in_c = xs[1], h = xs[2], w = xs[3];
  const std::size_t out_c = ws[0], kh = ws[2], kw = ws[3];
  if (h + 2 * padding < kh || w + 2 * padding < kw) {
    throw DimensionError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " larger than padded input on axes 2/3 " + to_string(xs));
  }
  const std::size_t out_h = (h + 2 * padding - kh) / stride + 1;
  const std::size_t out_w = (w + 2 * padding - kw) / stride + 1;
  const std::size_t k = in_c * kh * kw;
  const std::size_t plane = out_h * out_w;

  Graph& graph = input.graph();
  const bool keep_cols = graph.recording() && weight.requires_grad();
  auto cols = std::make_shared<std::vector<Real>>(keep_cols ? n * k * plane : k * plane);

  Tensor out(Shape{n, out_c, out_h, out_w});
  ConstMatMap wm(weight.value().data().data(), static_cast<Eigen::Index>(out_c), static_cast<Eigen::Index>(k));
  const auto bv = Eigen::Map<const Eigen::Matrix<Real, Eigen::Dynamic, 1>>(bias.value().data().data(),
                                                                         static_cast<Eigen::Index>(out_c));
  for (std::size_t b = 0; b < n; ++b) {
    Real* col = cols->data() + (keep_cols ? b * k * plane : 0);
    im2col(input.value().data().data() + b * in_c * h * w, in_c, h, w, kh, kw, stride, padding, out_h, out_w, col);
    ConstMatMap cm(col, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(plane));
    MatMap om(out.data().data() + b * out_c * plane, static_cast<Eigen::Index>(out_c),
              static_cast<Eigen::Index>(plane));
    om.noalias() = wm * cm;
    om.colwise() += bv;
  }
  if (!keep_cols) cols.reset();

  return graph.record(
      "conv2d", std::move(out), {input, weight, bias},
      [=](Graph& g, const Tensor& go) {
        ConstMatMap wmat(weight.value().data().data(), static_cast<Eigen::Index>(out_c),
                         static_cast<Eigen::Index>(k));
        RowMat dcol(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(plane));
        for (std::size_t b = 0; b < n; ++b) {
          ConstMatMap dy(go.data().data() + b * out_c * plane, static_cast<Eigen::Index>(out_c),
                         static_cast<Eigen::Index>(plane));
          if (weight.requires_grad()) {
            ConstMatMap cm(cols->data() + b * k * plane, static_cast<Eigen::Index>(k),
                           static_cast<Eigen::Index>(plane));
            MatMap dw(g.grad_buffer(weight).data().data(), static_cast<Eigen::Index>(out_c),
                      static_cast<Eigen::Index>(k));
            dw.noalias() += dy * cm.transpose();
          }
          if (bias.requires_grad()) {
            Tensor& db = g.grad_buffer(bias);
            // Fixed-order sum: vectorized reductions depend on buffer alignment.
            for (std::size_t c = 0; c < out_c; ++c) {
              const Real* row = dy.data() + c * plane;
              Real acc = 0;
              for (std::size_t p = 0; p < plane; ++p) acc += row[p];
              db[c] += acc;
            }
          }
          if (input.requires_grad()) {
            dcol.noalias() = wmat.transpose() * dy;
            col2im(dcol.data(), in_c, h, w, kh, kw, stride, padding, out_h, out_w,
                   g.grad_buffer(input).data().data() + b * in_c * h * w);
          }
        }
      });
}

Var upsample_nearest(Var x, std::size_t factor) {
  require_rank("upsample_nearest", "input", x, 4);
  if (factor < 1) throw DimensionError("upsample_nearest: factor must be >= 1");
  const Shape& s = x.shape();
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3];
  const std::size_t oh = h * factor, ow = w * factor;
  Tensor out(Shape{s[0], s[1], oh, ow});
  const Real* src = x.value().data().data();
  Real* dst = out.data().data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < oh; ++i) {
      const Real* row = src + (p * h + i / factor) * w;
      Real* orow = dst + (p * oh + i) * ow;
      for (std::size_t j = 0; j < ow; ++j) orow[j] = row[j / factor];
    }
  }
  return x.graph().record("upsample_nearest", std::move(out), {x},
                          [x, planes, h, w, oh, ow, factor](Graph& g, const Tensor& go) {
                            Real* gx = g.grad_buffer(x).data().data();
                            const Real* gsrc = go.data().data();
                            for (std::size_t p = 0; p < planes; ++p) {
                              for (std::size_t i = 0; i < oh; ++i) {
                                Real* row = gx + (p * h + i / factor) * w;
                                const Real* orow = gsrc + (p * oh + i) * ow;
                                for (std::size_t j = 0; j < ow; ++j) row[j / factor] += orow[j];
                              }
                            }
                          });
}

Moments reduce_stats(Var x, std::vector<std::size_t> axes) {
  const Shape& xs = x.shape();
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  if (axes.empty()) throw DimensionError("reduce_stats: empty axis set");
  std::vector<bool> reduced(xs.size(), false);
  for (std::size_t a : axes) {
    if (a >= xs.size()) {
      throw DimensionError("reduce_stats: axis " + std::to_string(a) + " not in shape " + to_string(xs));
    }
    if (xs[a] == 0) throw DimensionError("reduce_stats: reduced axis " + std::to_string(a) + " has zero extent");
    reduced[a] = true;
  }
  Shape out_shape;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!reduced[i]) out_shape.push_back(xs[i]);
  }
  const std::size_t total = x.value().numel();
  const std::size_t out_n = shape_numel(out_shape);
  if (out_n == 0) throw DimensionError("reduce_stats: kept axes of " + to_string(xs) + " have zero extent");
  const std::size_t count = total / out_n;

  // Flat input index -> flat output index.
  auto index = std::make_shared<std::vector<std::size_t>>(total);
  {
    std::vector<std::size_t> in_strides(xs.size(), 1), out_strides(xs.size(), 0);
    for (std::size_t i = xs.size(); i-- > 1;) in_strides[i - 1] = in_strides[i] * xs[i];
    std::size_t stride = 1;
    for (std::size_t i = xs.size(); i-- > 0;) {
      if (!reduced[i]) {
        out_strides[i] = stride;
        stride *= xs[i];
      }
    }
    for (std::size_t f = 0; f < total; ++f) {
      std::size_t rem = f, o = 0;
      for (std::size_t d = 0; d < xs.size(); ++d) {
        const std::size_t c = rem / in_strides[d];
        rem -= c * in_strides[d];
        o += c * out_strides[d];
      }
      (*index)[f] = o;
    }
  }

  const Tensor& xv = x.value();
  Tensor mean_t(out_shape, Real(0)), var_t(out_shape, Real(0));
  for (std::size_t f = 0; f < total; ++f) mean_t[(*index)[f]] += xv[f];
  for (Real& m : mean_t.data()) m /= static_cast<Real>(count);
  for (std::size_t f = 0; f < total; ++f) {
    const Real d = xv[f] - mean_t[(*index)[f]];
    var_t[(*index)[f]] += d * d;
  }
  for (Real& v : var_t.data()) v /= static_cast<Real>(count);

  Graph& graph = x.graph();
  const Real inv_count = Real(1) / static_cast<Real>(count);
  Var mean_v = graph.record("reduce_mean", std::move(mean_t), {x}, [x, index, inv_count](Graph& g, const Tensor& go) {
    Tensor& gx = g.grad_buffer(x);
    for (std::size_t f = 0; f < gx.numel(); ++f) gx[f] += go[(*index)[f]] * inv_count;
  });
  // The variance node's local derivative 2(x - mean)/n already accounts for the
  // mean's dependence on x (those terms sum to zero).
  Var var_v = graph.record("reduce_var", std::move(var_t), {x}, [x, mean_v, index, inv_count](Graph& g, const Tensor& go) {
    Tensor& gx = g.grad_buffer(x);
    const Tensor& xv2 = x.value();
    const Tensor& mv = mean_v.value();
    for (std::size_t f = 0; f < gx.numel(); ++f) {
      const std::size_t o = (*index)[f];
      gx[f] += go[o] * Real(2) * (xv2[f] - mv[o]) * inv_count;
    }
  });
  return {mean_v, var_v};
}

Var normalize_affine(Var x, Var mean_v, Var var_v, Var gamma, Var beta, Real eps) {
  const Shape& xs = x.shape();
  if (xs.size() < 2) throw DimensionError("normalize_affine: input needs at least N and C axes, got " + to_string(xs));
  const std::size_t n = xs[0], c = xs[1];
  std::size_t spatial = 1;
  for (std::size_t i = 2; i < xs.size(); ++i) spatial *= xs[i];
  auto check_stat = [&](Var s, const char* name) {
    const Shape& ss = s.shape();
    const bool shared = ss == Shape{c};
    const bool per_sample = ss == Shape{n, c};
    if (!shared && !per_sample) {
      throw DimensionError(std::string("normalize_affine: ") + name + " shape " + to_string(ss) +
                           " must be [C] or [N,C] for input " + to_string(xs));
    }
    return per_sample;
  };
  const bool mean_per_sample = check_stat(mean_v, "mean");
  const bool var_per_sample = check_stat(var_v, "var");
  for (auto [v, name] : {std::pair{gamma, "gamma"}, std::pair{beta, "beta"}}) {
    if (v.shape() != Shape{c}) {
      throw DimensionError(std::string("normalize_affine: ") + name + " shape " + to_string(v.shape()) +
                           " must match channel axis 1 of " + to_string(xs));
    }
  }
  auto stat_index = [c](bool per_sample, std::size_t b, std::size_t ch) { return per_sample ? b * c + ch : ch; };

  Tensor out(xs);
  const Tensor& xv = x.value();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const Real mu = mean_v.value()[stat_index(mean_per_sample, b, ch)];
      const Real inv = Real(1) / std::sqrt(var_v.value()[stat_index(var_per_sample, b, ch)] + eps);
      const Real gm = gamma.value()[ch] * inv;
      const Real bt = beta.value()[ch];
      const std::size_t base = (b * c + ch) * spatial;
      for (std::size_t s = 0; s < spatial; ++s) out[base + s] = (xv[base + s] - mu) * gm + bt;
    }
  }
  return x.graph().record(
      "normalize_affine", std::move(out), {x, mean_v, var_v, gamma, beta},
      [=](Graph& g, const Tensor& go) {
        const Tensor& xv2 = x.value();
        Tensor* gx = x.requires_grad() ? &g.grad_buffer(x) : nullptr;
        Tensor* gmean = mean_v.requires_grad() ? &g.grad_buffer(mean_v) : nullptr;
        Tensor* gvar = var_v.requires_grad() ? &g.grad_buffer(var_v) : nullptr;
        Tensor* ggamma = gamma.requires_grad() ? &g.grad_buffer(gamma) : nullptr;
        Tensor* gbeta = beta.requires_grad() ? &g.grad_buffer(beta) : nullptr;
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t mi = stat_index(mean_per_sample, b, ch);
            const std::size_t vi = stat_index(var_per_sample, b, ch);
            const Real mu = mean_v.value()[mi];
            const Real inv = Real(1) / std::sqrt(var_v.value()[vi] + eps);
            const Real gm = gamma.value()[ch];
            const std::size_t base = (b * c + ch) * spatial;
            Real sum_dy = 0, sum_dy_xc = 0;
            for (std::size_t s = 0; s < spatial; ++s) {
              const Real dy = go[base + s];
              sum_dy += dy;
              sum_dy_xc += dy * (xv2[base + s] - mu);
              if (gx) (*gx)[base + s] += dy * gm * inv;
            }
            if (gmean) (*gmean)[mi] -= sum_dy * gm * inv;
            if (gvar) (*gvar)[vi] += sum_dy_xc * gm * Real(-0.5) * inv * inv * inv;
            if (ggamma) (*ggamma)[ch] += sum_dy_xc * inv;
            if (gbeta) (*gbeta)[ch] += sum_dy;
          }
        }
      });
}

Var mix(Var a, Var b, Var m) {
  const Tensor* widest = &a.value();
  for (Var v : {b, m}) {
    const Tensor& t = v.value();
    if (t.numel() > widest->numel() || (t.numel() == widest->numel() && t.rank() > widest->rank())) widest = &t;
  }
  const Shape out_shape = widest->shape();
  const Broadcast ba = broadcast_for("mix", "a", a.value(), out_shape);
  const Broadcast bb = broadcast_for("mix", "b", b.value(), out_shape);
  const Broadcast bm = broadcast_for("mix", "m", m.value(), out_shape);
  Tensor out(out_shape);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const Real mv = m.value()[bm.map(i)];
    out[i] = (Real(1) - mv) * a.value()[ba.map(i)] + mv * b.value()[bb.map(i)];
  }
  return a.graph().record("mix", std::move(out), {a, b, m}, [=](Graph& g, const Tensor& go) {
    Tensor* ga = a.requires_grad() ? &g.grad_buffer(a) : nullptr;
    Tensor* gb = b.requires_grad() ? &g.grad_buffer(b) : nullptr;
    Tensor* gm = m.requires_grad() ? &g.grad_buffer(m) : nullptr;
    for (std::size_t i = 0; i < go.numel(); ++i) {
      const Real mv = m.value()[bm.map(i)];
      if (ga) (*ga)[ba.map(i)] += go[i] * (Real(1) - mv);
      if (gb) (*gb)[bb.map(i)] += go[i] * mv;
      if (gm) (*gm)[bm.map(i)] += go[i] * (b.value()[bb.map(i)] - a.value()[ba.map(i)]);
    }
  });
}

// linear and matmul use fixed-order loops rather than Eigen: their rows must
// come out bitwise identical whatever the batch size.
Var linear(Var x, Var w, Var b) {
  require_rank("linear", "input", x, 2);
  require_rank("linear", "weight", w, 2);
  require_rank("linear", "bias", b, 1);
  const std::size_t n = x.shape()[0], in = x.shape()[1], out_f = w.shape()[0];
  if (w.shape()[1] != in) {
    throw DimensionError("linear: weight input width (axis 1) = " + std::to_string(w.shape()[1]) +
                         " but input width (axis 1) = " + std::to_string(in));
  }
  if (b.shape()[0] != out_f) {
    throw DimensionError("linear: bias length " + std::to_string(b.shape()[0]) + " but weight rows (axis 0) = " +
                         std::to_string(out_f));
  }
  Tensor out(Shape{n, out_f});
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t o = 0; o < out_f; ++o) {
      Real acc = b.value()[o];
      for (std::size_t i = 0; i < in; ++i) acc += xv[r * in + i] * wv[o * in + i];
      out[r * out_f + o] = acc;
    }
  }
  return x.graph().record("linear", std::move(out), {x, w, b}, [=](Graph& g, const Tensor& go) {
    Tensor* gx = x.requires_grad() ? &g.grad_buffer(x) : nullptr;
    Tensor* gw = w.requires_grad() ? &g.grad_buffer(w) : nullptr;
    Tensor* gb = b.requires_grad() ? &g.grad_buffer(b) : nullptr;
    const Tensor& xv2 = x.value();
    const Tensor& wv2 = w.value();
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t o = 0; o < out_f; ++o) {
        const Real dy = go[r * out_f + o];
        if (dy == Real(0)) continue;
        if (gb) (*gb)[o] += dy;
        for (std::size_t i = 0; i < in; ++i) {
          if (gx) (*gx)[r * in + i] += dy * wv2[o * in + i];
          if (gw) (*gw)[o * in + i] += dy * xv2[r * in + i];
        }
      }
    }
  });
}

Var matmul(Var a, Var b) {
  require_rank("matmul", "left operand", a, 2);
  require_rank("matmul", "right operand", b, 2);
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: left axis 1 = " + std::to_string(k) + " but right axis 0 = " +
                         std::to_string(b.shape()[0]));
  }
  Tensor out(Shape{n, m});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < m; ++j) {
      Real acc = 0;
      for (std::size_t i = 0; i < k; ++i) acc += av[r * k + i] * bv[i * m + j];
      out[r * m + j] = acc;
    }
  }
  return a.graph().record("matmul", std::move(out), {a, b}, [=](Graph& g, const Tensor& go) {
    Tensor* ga = a.requires_grad() ? &g.grad_buffer(a) : nullptr;
    Tensor* gb = b.requires_grad() ? &g.grad_buffer(b) : nullptr;
    const Tensor& av2 = a.value();
    const Tensor& bv2 = b.value();
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < m; ++j) {
        const Real dy = go[r * m + j];
        for (std::size_t i = 0; i < k; ++i) {
          if (ga) (*ga)[r * k + i] += dy * bv2[i * m + j];
          if (gb) (*gb)[i * m + j] += dy * av2[r * k + i];
        }
      }
    }
  });
}

Var broadcast_rows(Var a, std::size_t n) {
  require_rank("broadcast_rows", "input", a, 1);
  const std::size_t c = a.shape()[0];
  Tensor out(Shape{n, c});
  for (std::size_t r = 0; r < n; ++r) std::copy_n(a.value().data().data(), c, out.data().data() + r * c);
  return a.graph().record("broadcast_rows", std::move(out), {a}, [a, n, c](Graph& g, const Tensor& go) {
    Tensor& ga = g.grad_buffer(a);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < c; ++j) ga[j] += go[r * c + j];
    }
  });
}

Var concat_last(Var a, Var b) {
  require_rank("concat_last", "left operand", a, 2);
  require_rank("concat_last", "right operand", b, 2);
  const std::size_t n = a.shape()[0], ca = a.shape()[1], cb = b.shape()[1];
  if (b.shape()[0] != n) {
    throw DimensionError("concat_last: row counts (axis 0) differ: " + std::to_string(n) + " vs " +
                         std::to_string(b.shape()[0]));
  }
  Tensor out(Shape{n, ca + cb});
  for (std::size_t r = 0; r < n; ++r) {
    std::copy_n(a.value().data().data() + r * ca, ca, out.data().data() + r * (ca + cb));
    std::copy_n(b.value().data().data() + r * cb, cb, out.data().data() + r * (ca + cb) + ca);
  }
  return a.graph().record("concat_last", std::move(out), {a, b}, [=](Graph& g, const Tensor& go) {
    for (std::size_t r = 0; r < n; ++r) {
      if (a.requires_grad()) {
        Tensor& ga = g.grad_buffer(a);
        for (std::size_t j = 0; j < ca; ++j) ga[r * ca + j] += go[r * (ca + cb) + j];
      }
      if (b.requires_grad()) {
        Tensor& gb = g.grad_buffer(b);
        for (std::size_t j = 0; j < cb; ++j) gb[r * cb + j] += go[r * (ca + cb) + ca + j];
      }
    }
  });
}

namespace {

Tensor softmax_values(const Tensor& x, const AxisSplit& s) {
  Tensor out(x.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      Real peak = x[base];
      for (std::size_t k = 1; k < s.extent; ++k) peak = std::max(peak, x[base + k * s.inner]);
      Real total = 0;
      for (std::size_t k = 0; k < s.extent; ++k) {
        const Real e = std::exp(x[base + k * s.inner] - peak);
        out[base + k * s.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < s.extent; ++k) out[base + k * s.inner] /= total;
    }
  }
  return out;
}

Tensor log_softmax_values(const Tensor& x, const AxisSplit& s) {
  Tensor out(x.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      Real peak = x[base];
      for (std::size_t k = 1; k < s.extent; ++k) peak = std::max(peak, x[base + k * s.inner]);
      Real total = 0;
      for (std::size_t k = 0; k < s.extent; ++k) total += std::exp(x[base + k * s.inner] - peak);
      const Real lse = peak + std::log(total);
      for (std::size_t k = 0; k < s.extent; ++k) out[base + k * s.inner] = x[base + k * s.inner] - lse;
    }
  }
  return out;
}

}  // namespace

Var softmax(Var x, std::size_t axis) {
  const AxisSplit s = split_at(x.shape(), axis, "softmax");
  return x.graph().record("softmax", softmax_values(x.value(), s), {x}, [x, s](Graph& g, const Tensor& go) {
    const Tensor p = softmax_values(x.value(), s);
    Tensor& gx = g.grad_buffer(x);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        Real dot = 0;
        for (std::size_t k = 0; k < s.extent; ++k) dot += go[base + k * s.inner] * p[base + k * s.inner];
        for (std::size_t k = 0; k < s.extent; ++k) {
          const std::size_t idx = base + k * s.inner;
          gx[idx] += p[idx] * (go[idx] - dot);
        }
      }
    }
  });
}

Var log_softmax(Var x, std::size_t axis) {
  const AxisSplit s = split_at(x.shape(), axis, "log_softmax");
  return x.graph().record("log_softmax", log_softmax_values(x.value(), s), {x}, [x, s](Graph& g, const Tensor& go) {
    const Tensor p = softmax_values(x.value(), s);
    Tensor& gx = g.grad_buffer(x);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        Real total = 0;
        for (std::size_t k = 0; k < s.extent; ++k) total += go[base + k * s.inner];
        for (std::size_t k = 0; k < s.extent; ++k) {
          const std::size_t idx = base + k * s.inner;
          gx[idx] += go[idx] - p[idx] * total;
        }
      }
    }
  });
}

Var cross_entropy_seg(Var logits, std::span<const int> labels, int ignore_index) {
  require_rank("cross_entropy_seg", "logits", logits, 4);
  const Shape& ls = logits.shape();
  const std::size_t n = ls[0], classes = ls[1], plane = ls[2] * ls[3];
  if (labels.size() != n * plane) {
    throw DimensionError("cross_entropy_seg: " + std::to_string(labels.size()) + " labels for logits " +
                         to_string(ls) + " (expected N*H*W = " + std::to_string(n * plane) + ")");
  }
  const AxisSplit s{n, classes, plane};
  const Tensor logp = log_softmax_values(logits.value(), s);
  Real total = 0;
  std::size_t counted = 0;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < plane; ++p) {
      const int label = labels[b * plane + p];
      if (label == ignore_index) continue;
      if (label < 0 || static_cast<std::size_t>(label) >= classes) {
        throw std::invalid_argument("cross_entropy_seg: label " + std::to_string(label) + " outside [0," +
                                    std::to_string(classes) + ")");
      }
      total -= logp[(b * classes + static_cast<std::size_t>(label)) * plane + p];
      ++counted;
    }
  }
  if (counted == 0) throw std::invalid_argument("cross_entropy_seg: every pixel is ignored; mean undefined");
  auto owned = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  const Real inv = Real(1) / static_cast<Real>(counted);
  return logits.graph().record(
      "cross_entropy_seg", Tensor::scalar(total * inv), {logits},
      [logits, owned, s, inv, ignore_index](Graph& g, const Tensor& go) {
        const Tensor p = softmax_values(logits.value(), s);
        Tensor& gl = g.grad_buffer(logits);
        const Real scale_factor = go[0] * inv;
        for (std::size_t b = 0; b < s.outer; ++b) {
          for (std::size_t q = 0; q < s.inner; ++q) {
            const int label = (*owned)[b * s.inner + q];
            if (label == ignore_index) continue;
            for (std::size_t k = 0; k < s.extent; ++k) {
              const std::size_t idx = (b * s.extent + k) * s.inner + q;
              const Real target = static_cast<int>(k) == label ? Real(1) : Real(0);
              gl[idx] += scale_factor * (p[idx] - target);
            }
          }
        }
      });
}

Var mean_entropy(Var logits) {
  if (logits.value().rank() < 2) throw DimensionError("mean_entropy: logits need a class axis 1");
  const AxisSplit s = split_at(logits.shape(), 1, "mean_entropy");
  const Tensor logp = log_softmax_values(logits.value(), s);
  const std::size_t pixels = s.outer * s.inner;
  Real total = 0;
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      for (std::size_t k = 0; k < s.extent; ++k) {
        const Real lp = logp[(o * s.extent + k) * s.inner + i];
        total -= std::exp(lp) * lp;
      }
    }
  }
  const Real inv = Real(1) / static_cast<Real>(pixels);
  return logits.graph().record("mean_entropy", Tensor::scalar(total * inv), {logits}, [logits, s, inv](Graph& g, const Tensor& go) {
    const Tensor logp2 = log_softmax_values(logits.value(), s);
    Tensor& gl = g.grad_buffer(logits);
    const Real scale_factor = go[0] * inv;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        Real h = 0;
        for (std::size_t k = 0; k < s.extent; ++k) {
          const Real lp = logp2[(o * s.extent + k) * s.inner + i];
          h -= std::exp(lp) * lp;
        }
        for (std::size_t k = 0; k < s.extent; ++k) {
          const std::size_t idx = (o * s.extent + k) * s.inner + i;
          const Real lp = logp2[idx];
          gl[idx] += scale_factor * (-std::exp(lp) * (lp + h));
        }
      }
    }
  });
}

}  // namespace instcal
