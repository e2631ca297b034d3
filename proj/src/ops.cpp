#include "okd/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>

namespace okd {

namespace {

using Grads = std::span<std::vector<Scalar>* const>;

Tensor finish(Tensor out, std::initializer_list<Tensor> inputs, Tape::BackwardFn backward) {
  const std::vector<Tensor> ins(inputs);
  Tape* tape = common_tape(ins);
  if (!tape) return out;
  return tape->record(std::move(out), ins, std::move(backward));
}

void require_rank(const Tensor& t, int rank, const char* op) {
  if (t.rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         to_string(t.shape()));
}

void init_eigen_threads() {
  static const bool once = [] {
    Eigen::setNbThreads(kernel_threads());
    return true;
  }();
  (void)once;
}

void im2col(const Scalar* x, Index cin, Index h, Index w, Index k, Index dilation, Index pad, Index ho, Index wo,
            Scalar* cols) {
  for (Index c = 0; c < cin; ++c)
    for (Index ki = 0; ki < k; ++ki)
      for (Index kj = 0; kj < k; ++kj) {
        Scalar* row = cols + ((c * k + ki) * k + kj) * ho * wo;
        for (Index oy = 0; oy < ho; ++oy) {
          const Index iy = oy - pad + ki * dilation;
          Scalar* dst = row + oy * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, 0.0);
            continue;
          }
          const Scalar* src = x + (c * h + iy) * w;
          for (Index ox = 0; ox < wo; ++ox) {
            const Index ix = ox - pad + kj * dilation;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
          }
        }
      }
}

void col2im(const Scalar* cols, Index cin, Index h, Index w, Index k, Index dilation, Index pad, Index ho, Index wo,
            Scalar* dx) {
  for (Index c = 0; c < cin; ++c)
    for (Index ki = 0; ki < k; ++ki)
      for (Index kj = 0; kj < k; ++kj) {
        const Scalar* row = cols + ((c * k + ki) * k + kj) * ho * wo;
        for (Index oy = 0; oy < ho; ++oy) {
          const Index iy = oy - pad + ki * dilation;
          if (iy < 0 || iy >= h) continue;
          Scalar* dst = dx + (c * h + iy) * w;
          const Scalar* src = row + oy * wo;
          for (Index ox = 0; ox < wo; ++ox) {
            const Index ix = ox - pad + kj * dilation;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
}

// Binary elementwise op with single-element broadcast on either side.
template <class F, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, F f, DA da, DB db) {
  const bool same = a.shape() == b.shape();
  const bool a_bc = !same && a.numel() == 1;
  const bool b_bc = !same && !a_bc && b.numel() == 1;
  if (!same && !a_bc && !b_bc)
    throw DimensionError(std::string(name) + ": shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                         " do not match");
  const Tensor& big = a_bc ? b : a;
  const Index n = big.numel();
  Tensor out(big.shape());
  auto o = out.mutable_data();
  const Scalar* pa = a.raw();
  const Scalar* pb = b.raw();
  const Index sa = a_bc ? 0 : 1;
  const Index sb = b_bc ? 0 : 1;
  for (Index i = 0; i < n; ++i) o[i] = f(pa[i * sa], pb[i * sb]);
  return finish(out, {a, b}, [a, b, out, sa, sb, n, da, db](std::span<const Scalar> g, Grads gi) {
    const Scalar* pa = a.raw();
    const Scalar* pb = b.raw();
    const Scalar* po = out.raw();
    if (gi[0]) {
      Scalar* ga = gi[0]->data();
      for (Index i = 0; i < n; ++i) ga[i * sa] += g[i] * da(pa[i * sa], pb[i * sb], po[i]);
    }
    if (gi[1]) {
      Scalar* gb = gi[1]->data();
      for (Index i = 0; i < n; ++i) gb[i * sb] += g[i] * db(pa[i * sa], pb[i * sb], po[i]);
    }
  });
}

// Unary elementwise op; the derivative sees the input and the output.
template <class F, class D>
Tensor unary(const Tensor& x, F f, D d) {
  Tensor out(x.shape());
  auto o = out.mutable_data();
  const Scalar* px = x.raw();
  for (Index i = 0; i < x.numel(); ++i) o[i] = f(px[i]);
  return finish(out, {x}, [x, out, d](std::span<const Scalar> g, Grads gi) {
    if (!gi[0]) return;
    Scalar* gx = gi[0]->data();
    const Scalar* px = x.raw();
    const Scalar* po = out.raw();
    for (Index i = 0; i < x.numel(); ++i) gx[i] += g[i] * d(px[i], po[i]);
  });
}

struct Bin {
  Index begin;
  Index end;
};

std::vector<Bin> adaptive_bins(Index in, Index out) {
  std::vector<Bin> bins(static_cast<std::size_t>(out));
  for (Index i = 0; i < out; ++i) {
    bins[static_cast<std::size_t>(i)].begin = (i * in) / out;
    bins[static_cast<std::size_t>(i)].end = ((i + 1) * in + out - 1) / out;
  }
  return bins;
}

}  // namespace

int kernel_threads() {
  static const int threads = [] {
    const char* env = std::getenv("OKD_THREADS");
    if (env) {
      const int n = std::atoi(env);
      if (n > 0) return n;
    }
    return 1;
  }();
  return threads;
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, Index dilation, Index padding) {
  require_rank(input, 4, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  init_eigen_threads();
  const Index batch = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const Index cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != cin)
    throw DimensionError("conv2d: input has " + std::to_string(cin) + " channels, weight expects " +
                         std::to_string(weight.dim(1)));
  if (weight.dim(3) != k || k % 2 == 0) throw DimensionError("conv2d: kernel must be square with odd size");
  if (bias.numel() != cout) throw DimensionError("conv2d: bias size does not match output channels");
  if (dilation < 1 || padding < 0) throw DimensionError("conv2d: dilation must be >= 1 and padding >= 0");
  const Index ho = h + 2 * padding - dilation * (k - 1);
  const Index wo = w + 2 * padding - dilation * (k - 1);
  if (ho < 1 || wo < 1) throw DimensionError("conv2d: receptive field larger than padded input");

  const Index patch = cin * k * k;
  const Index pixels = ho * wo;
  Tensor out({batch, cout, ho, wo});
  {
    auto o = out.mutable_data();
    MatrixX cols(patch, pixels);
    ConstMatrixMap wm(weight.raw(), cout, patch);
    Eigen::Map<const VectorX> bv(bias.raw(), cout);
    for (Index b = 0; b < batch; ++b) {
      im2col(input.raw() + b * cin * h * w, cin, h, w, k, dilation, padding, ho, wo, cols.data());
      MatrixMap ob(o.data() + b * cout * pixels, cout, pixels);
      ob.noalias() = wm * cols;
      ob.colwise() += bv;
    }
  }

  return finish(out, {input, weight, bias},
                [=](std::span<const Scalar> g, Grads gi) {
                  MatrixX cols(patch, pixels);
                  MatrixX dcols;
                  ConstMatrixMap wm(weight.raw(), cout, patch);
                  for (Index b = 0; b < batch; ++b) {
                    ConstMatrixMap gb(g.data() + b * cout * pixels, cout, pixels);
                    if (gi[1]) {
                      im2col(input.raw() + b * cin * h * w, cin, h, w, k, dilation, padding, ho, wo, cols.data());
                      MatrixMap gw(gi[1]->data(), cout, patch);
                      gw.noalias() += gb * cols.transpose();
                    }
                    if (gi[2]) {
                      Eigen::Map<VectorX> gbias(gi[2]->data(), cout);
                      gbias += gb.rowwise().sum();
                    }
                    if (gi[0]) {
                      dcols.noalias() = wm.transpose() * gb;
                      col2im(dcols.data(), cin, h, w, k, dilation, padding, ho, wo,
                             gi[0]->data() + b * cin * h * w);
                    }
                  }
                });
}

Tensor maxpool2d(const Tensor& input, Index kernel, Index stride) {
  require_rank(input, 4, "maxpool2d");
  const Index batch = input.dim(0), ch = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (kernel < 1 || stride < 1) throw DimensionError("maxpool2d: kernel and stride must be >= 1");
  if (h % stride != 0 || w % stride != 0)
    throw DimensionError("maxpool2d: extents " + to_string(input.shape()) + " not divisible by stride " +
                         std::to_string(stride));
  const Index ho = (h - kernel) / stride + 1;
  const Index wo = (w - kernel) / stride + 1;
  if (h < kernel || w < kernel) throw DimensionError("maxpool2d: window larger than input");

  Tensor out({batch, ch, ho, wo});
  auto o = out.mutable_data();
  auto argmax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(out.numel()));
  const Scalar* x = input.raw();
  Index idx = 0;
  for (Index p = 0; p < batch * ch; ++p) {
    const Scalar* plane = x + p * h * w;
    for (Index oy = 0; oy < ho; ++oy)
      for (Index ox = 0; ox < wo; ++ox, ++idx) {
        Index best = (oy * stride) * w + ox * stride;
        for (Index ky = 0; ky < kernel; ++ky)
          for (Index kx = 0; kx < kernel; ++kx) {
            const Index pos = (oy * stride + ky) * w + ox * stride + kx;
            if (plane[pos] > plane[best]) best = pos;
          }
        o[idx] = plane[best];
        (*argmax)[static_cast<std::size_t>(idx)] = p * h * w + best;
      }
  }
  return finish(out, {input}, [argmax](std::span<const Scalar> g, Grads gi) {
    if (!gi[0]) return;
    Scalar* gx = gi[0]->data();
    for (std::size_t i = 0; i < argmax->size(); ++i) gx[(*argmax)[i]] += g[i];
  });
}

Tensor adaptive_avg_pool(const Tensor& input, Index out_h, Index out_w) {
  require_rank(input, 4, "adaptive_avg_pool");
  const Index batch = input.dim(0), ch = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (out_h < 1 || out_w < 1) throw DimensionError("adaptive_avg_pool: output extents must be >= 1");
  if (out_h > h || out_w > w)
    throw DimensionError("adaptive_avg_pool: output " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                         " larger than input " + to_string(input.shape()));
  const auto rows = adaptive_bins(h, out_h);
  const auto colb = adaptive_bins(w, out_w);

  Tensor out({batch, ch, out_h, out_w});
  auto o = out.mutable_data();
  const Scalar* x = input.raw();
  for (Index p = 0; p < batch * ch; ++p)
    for (Index i = 0; i < out_h; ++i)
      for (Index j = 0; j < out_w; ++j) {
        const Bin& r = rows[static_cast<std::size_t>(i)];
        const Bin& c = colb[static_cast<std::size_t>(j)];
        Scalar acc = 0.0;
        for (Index y = r.begin; y < r.end; ++y)
          for (Index xx = c.begin; xx < c.end; ++xx) acc += x[(p * h + y) * w + xx];
        o[(p * out_h + i) * out_w + j] = acc / static_cast<Scalar>((r.end - r.begin) * (c.end - c.begin));
      }
  return finish(out, {input}, [=](std::span<const Scalar> g, Grads gi) {
    if (!gi[0]) return;
    Scalar* gx = gi[0]->data();
    for (Index p = 0; p < batch * ch; ++p)
      for (Index i = 0; i < out_h; ++i)
        for (Index j = 0; j < out_w; ++j) {
          const Bin& r = rows[static_cast<std::size_t>(i)];
          const Bin& c = colb[static_cast<std::size_t>(j)];
          const Scalar share =
              g[static_cast<std::size_t>((p * out_h + i) * out_w + j)] /
              static_cast<Scalar>((r.end - r.begin) * (c.end - c.begin));
          for (Index y = r.begin; y < r.end; ++y)
            for (Index xx = c.begin; xx < c.end; ++xx) gx[(p * h + y) * w + xx] += share;
        }
  });
}

Tensor avg_pool2d(const Tensor& input, Index kernel, Index stride) {
  require_rank(input, 4, "avg_pool2d");
  const Index batch = input.dim(0), ch = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (kernel < 1 || stride < 1) throw DimensionError("avg_pool2d: kernel and stride must be >= 1");
  if (h < kernel || w < kernel)
    throw DimensionError("avg_pool2d: window " + std::to_string(kernel) + " larger than input " +
                         to_string(input.shape()));
  const Index ho = (h - kernel) / stride + 1;
  const Index wo = (w - kernel) / stride + 1;
  const Scalar inv = 1.0 / static_cast<Scalar>(kernel * kernel);
  Tensor out({batch, ch, ho, wo});
  auto o = out.mutable_data();
  const Scalar* x = input.raw();
  for (Index p = 0; p < batch * ch; ++p)
    for (Index oy = 0; oy < ho; ++oy)
      for (Index ox = 0; ox < wo; ++ox) {
        Scalar acc = 0.0;
        for (Index ky = 0; ky < kernel; ++ky)
          for (Index kx = 0; kx < kernel; ++kx) acc += x[(p * h + oy * stride + ky) * w + ox * stride + kx];
        o[(p * ho + oy) * wo + ox] = acc * inv;
      }
  return finish(out, {input}, [=](std::span<const Scalar> g, Grads gi) {
    if (!gi[0]) return;
    Scalar* gx = gi[0]->data();
    for (Index p = 0; p < batch * ch; ++p)
      for (Index oy = 0; oy < ho; ++oy)
        for (Index ox = 0; ox < wo; ++ox) {
          const Scalar share = g[static_cast<std::size_t>((p * ho + oy) * wo + ox)] * inv;
          for (Index ky = 0; ky < kernel; ++ky)
            for (Index kx = 0; kx < kernel; ++kx) gx[(p * h + oy * stride + ky) * w + ox * stride + kx] += share;
        }
  });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  require_rank(a, 3, "bmm lhs");
  require_rank(b, 3, "bmm rhs");
  init_eigen_threads();
  const Index batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  if (b.dim(0) != batch) throw DimensionError("bmm: batch extents differ");
  if (b.dim(1) != k)
    throw DimensionError("bmm: inner extents differ, " + to_string(a.shape()) + " x " + to_string(b.shape()));
  Tensor out({batch, m, n});
  auto o = out.mutable_data();
  for (Index i = 0; i < batch; ++i) {
    MatrixMap(o.data() + i * m * n, m, n).noalias() =
        ConstMatrixMap(a.raw() + i * m * k, m, k) * ConstMatrixMap(b.raw() + i * k * n, k, n);
  }
  return finish(out, {a, b}, [=](std::span<const Scalar> g, Grads gi) {
    for (Index i = 0; i < batch; ++i) {
      ConstMatrixMap gm(g.data() + i * m * n, m, n);
      if (gi[0])
        MatrixMap(gi[0]->data() + i * m * k, m, k).noalias() +=
            gm * ConstMatrixMap(b.raw() + i * k * n, k, n).transpose();
      if (gi[1])
        MatrixMap(gi[1]->data() + i * k * n, k, n).noalias() +=
            ConstMatrixMap(a.raw() + i * m * k, m, k).transpose() * gm;
    }
  });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, [](Scalar v) { return v > 0.0 ? v : 0.0; }, [](Scalar v, Scalar) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x,
      [](Scalar v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const Scalar e = std::exp(v);
        return e / (1.0 + e);
      },
      [](Scalar, Scalar y) { return y * (1.0 - y); });
}

Tensor square(const Tensor& x) {
  return unary(
      x, [](Scalar v) { return v * v; }, [](Scalar v, Scalar) { return 2.0 * v; });
}

Tensor sqrt(const Tensor& x) {
  return unary(
      x, [](Scalar v) { return std::sqrt(v); }, [](Scalar, Scalar y) { return 0.5 / y; });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](Scalar x, Scalar y) { return x + y; }, [](Scalar, Scalar, Scalar) { return 1.0; },
      [](Scalar, Scalar, Scalar) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](Scalar x, Scalar y) { return x - y; }, [](Scalar, Scalar, Scalar) { return 1.0; },
      [](Scalar, Scalar, Scalar) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](Scalar x, Scalar y) { return x * y; }, [](Scalar, Scalar y, Scalar) { return y; },
      [](Scalar x, Scalar, Scalar) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](Scalar x, Scalar y) { return x / y; }, [](Scalar, Scalar y, Scalar) { return 1.0 / y; },
      [](Scalar, Scalar y, Scalar q) { return -q / y; });
}

Tensor scalar_mul(const Tensor& x, Scalar c) {
  return unary(
      x, [c](Scalar v) { return c * v; }, [c](Scalar, Scalar) { return c; });
}

Tensor add_scalar(const Tensor& x, Scalar c) {
  return unary(
      x, [c](Scalar v) { return v + c; }, [](Scalar, Scalar) { return 1.0; });
}

Tensor sum(const Tensor& x) {
  Tensor out = Tensor::scalar(x.array().sum());
  const Index n = x.numel();
  return finish(out, {x}, [n](std::span<const Scalar> g, Grads gi) {
    if (!gi[0]) return;
    for (Index i = 0; i < n; ++i) (*gi[0])[static_cast<std::size_t>(i)] += g[0];
  });
}

Tensor mean(const Tensor& x) {
  const Index n = x.numel();
  Tensor out = Tensor::scalar(x.array().sum() / static_cast<Scalar>(n));
  return finish(out, {x}, [n](std::span<const Scalar> g, Grads gi) {
    if (!gi[0]) return;
    const Scalar share = g[0] / static_cast<Scalar>(n);
    for (Index i = 0; i < n; ++i) (*gi[0])[static_cast<std::size_t>(i)] += share;
  });
}

Tensor max_value(const Tensor& x) {
  const auto v = x.data();
  const auto arg = static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
  Tensor out = Tensor::scalar(v[arg]);
  return finish(out, {x}, [arg](std::span<const Scalar> g, Grads gi) {
    if (gi[0]) (*gi[0])[arg] += g[0];
  });
}

Tensor sum(const Tensor& x, int axis) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) throw DimensionError("sum: axis out of range for " + to_string(x.shape()));
  Index outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const Index ext = x.dim(axis);
  Shape shape = x.shape();
  shape[static_cast<std::size_t>(axis)] = 1;
  Tensor out(shape);
  auto o = out.mutable_data();
  const Scalar* px = x.raw();
  for (Index a = 0; a < outer; ++a)
    for (Index e = 0; e < ext; ++e)
      for (Index i = 0; i < inner; ++i) o[a * inner + i] += px[(a * ext + e) * inner + i];
  return finish(out, {x}, [=](std::span<const Scalar> g, Grads gi) {
    if (!gi[0]) return;
    Scalar* gx = gi[0]->data();
    for (Index a = 0; a < outer; ++a)
      for (Index e = 0; e < ext; ++e)
        for (Index i = 0; i < inner; ++i) gx[(a * ext + e) * inner + i] += g[a * inner + i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  Tensor out = x.view(std::move(shape));
  const Index n = x.numel();
  return finish(out, {x}, [n](std::span<const Scalar> g, Grads gi) {
    if (!gi[0]) return;
    for (Index i = 0; i < n; ++i) (*gi[0])[static_cast<std::size_t>(i)] += g[i];
  });
}

Tensor transpose2d_last(const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("transpose2d_last: rank must be >= 2");
  const Index m = x.dim(-2), n = x.dim(-1);
  const Index batch = x.numel() / (m * n);
  Shape shape = x.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  Tensor out(shape);
  auto o = out.mutable_data();
  for (Index b = 0; b < batch; ++b)
    MatrixMap(o.data() + b * m * n, n, m) = ConstMatrixMap(x.raw() + b * m * n, m, n).transpose();
  return finish(out, {x}, [=](std::span<const Scalar> g, Grads gi) {
    if (!gi[0]) return;
    for (Index b = 0; b < batch; ++b)
      MatrixMap(gi[0]->data() + b * m * n, m, n) += ConstMatrixMap(g.data() + b * m * n, n, m).transpose();
  });
}

}  // namespace okd
