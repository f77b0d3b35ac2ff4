#include "dfca/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <sstream>

namespace dfca {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using CMatMap = Eigen::Map<const RowMat<T>>;

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype())
    throw std::invalid_argument(std::string(op) + ": dtype mismatch " + dtype_name(a.dtype()) + " vs " +
                                dtype_name(b.dtype()));
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

void require_rank(const Tensor& t, int r, const char* op) {
  if (t.rank() != r) {
    std::ostringstream os;
    os << op << ": expected rank " << r << ", got shape " << shape_str(t.shape());
    throw std::invalid_argument(os.str());
  }
}

std::int64_t last_dim(const Tensor& t) { return t.shape().empty() ? 1 : t.shape().back(); }

// Unary map with a derivative expressed through input x and output y.
template <class Fwd, class Deriv>
Tensor unary(const Tensor& a, const char* op, Fwd fwd, Deriv deriv) {
  Buffer out(a.dtype(), static_cast<std::size_t>(a.numel()));
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = a.data<T>();
    auto y = out.as<T>();
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  });
  Buffer saved_out = out;
  auto xin = a.impl_ptr();
  return record(a.shape(), std::move(out), op, {a},
                [xin, saved_out = std::move(saved_out), deriv](const Buffer& g, GradSink& sink) {
                  if (!sink.wants(0)) return;
                  dispatch(g.dtype(), [&](auto tag) {
                    using T = decltype(tag);
                    auto x = xin->data.as<T>();
                    auto y = saved_out.as<T>();
                    auto go = g.as<T>();
                    auto gi = sink.grad(0).as<T>();
                    for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * deriv(x[i], y[i]);
                  });
                });
}

enum class Binary { add, sub, mul };

Tensor binary(Binary kind, const Tensor& a, const Tensor& b, const char* op) {
  require_same_dtype(a, b, op);
  const bool same = a.shape() == b.shape();
  const bool a_scalar = a.numel() == 1 && !same;
  const bool b_scalar = b.numel() == 1 && !same;
  if (!same && !a_scalar && !b_scalar) shape_error(op, a.shape(), b.shape());
  const Shape& out_shape = a_scalar ? b.shape() : a.shape();
  const auto n = static_cast<std::size_t>(shape_numel(out_shape));

  Buffer out(a.dtype(), n);
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = a.data<T>();
    auto z = b.data<T>();
    auto y = out.as<T>();
    for (std::size_t i = 0; i < n; ++i) {
      const T u = a_scalar ? x[0] : x[i];
      const T v = b_scalar ? z[0] : z[i];
      y[i] = kind == Binary::add ? u + v : kind == Binary::sub ? u - v : u * v;
    }
  });
  auto ai = a.impl_ptr();
  auto bi = b.impl_ptr();
  return record(out_shape, std::move(out), op, {a, b},
                [kind, ai, bi, a_scalar, b_scalar](const Buffer& g, GradSink& sink) {
                  dispatch(g.dtype(), [&](auto tag) {
                    using T = decltype(tag);
                    auto go = g.as<T>();
                    auto x = ai->data.as<T>();
                    auto z = bi->data.as<T>();
                    for (std::size_t side = 0; side < 2; ++side) {
                      if (!sink.wants(side)) continue;
                      auto gi = sink.grad(side).as<T>();
                      const bool bcast = side == 0 ? a_scalar : b_scalar;
                      for (std::size_t i = 0; i < go.size(); ++i) {
                        T d;
                        if (kind == Binary::add)
                          d = go[i];
                        else if (kind == Binary::sub)
                          d = side == 0 ? go[i] : -go[i];
                        else
                          d = go[i] * (side == 0 ? (b_scalar ? z[0] : z[i]) : (a_scalar ? x[0] : x[i]));
                        gi[bcast ? 0 : i] += d;
                      }
                    }
                  });
                });
}

template <class T>
T sigmoid_scalar(T v) {
  if (v >= 0) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

}  // namespace

Tensor elementwise(ElementwiseOp op, const Tensor& a, const std::optional<Tensor>& b) {
  const bool binary_op = op == ElementwiseOp::add || op == ElementwiseOp::mul;
  if (binary_op && !b) throw std::invalid_argument("elementwise: binary op needs two operands");
  if (!binary_op && b) throw std::invalid_argument("elementwise: unary op takes one operand");
  switch (op) {
    case ElementwiseOp::add: return add(a, *b);
    case ElementwiseOp::mul: return mul(a, *b);
    case ElementwiseOp::sigmoid: return sigmoid(a);
    case ElementwiseOp::relu: return relu(a);
  }
  throw std::logic_error("elementwise: unknown op");
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(Binary::add, a, b, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(Binary::sub, a, b, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(Binary::mul, a, b, "mul"); }

Tensor scale(const Tensor& a, double s) {
  return unary(
      a, "scale", [s](auto v) { return static_cast<decltype(v)>(v * s); },
      [s](auto, auto) { return static_cast<decltype(s)>(s); });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, "sigmoid", [](auto v) { return sigmoid_scalar(v); },
      [](auto, auto y) { return y * (decltype(y)(1) - y); });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, "relu", [](auto v) { return v < 0 || v == 0 ? decltype(v)(0) : v; },  // NaN passes through
      [](auto x, auto) { return x > 0 ? decltype(x)(1) : decltype(x)(0); });
}

Tensor sum(const Tensor& a) {
  Buffer out(a.dtype(), 1);
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    double acc = 0;
    for (T v : a.data<T>()) acc += v;
    out.as<T>()[0] = static_cast<T>(acc);
  });
  return record({}, std::move(out), "sum", {a}, [](const Buffer& g, GradSink& sink) {
    if (!sink.wants(0)) return;
    dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const T go = g.as<T>()[0];
      for (auto& v : sink.grad(0).as<T>()) v += go;
    });
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_same_dtype(x, bias, "add_bias");
  const std::int64_t c = last_dim(x);
  if (bias.rank() != 1 || bias.dim(0) != c) shape_error("add_bias", x.shape(), bias.shape());
  Buffer out(x.dtype(), static_cast<std::size_t>(x.numel()));
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto in = x.data<T>();
    auto b = bias.data<T>();
    auto y = out.as<T>();
    for (std::size_t i = 0; i < in.size(); ++i) y[i] = in[i] + b[i % static_cast<std::size_t>(c)];
  });
  return record(x.shape(), std::move(out), "add_bias", {x, bias}, [c](const Buffer& g, GradSink& sink) {
    dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto go = g.as<T>();
      if (sink.wants(0)) {
        auto gx = sink.grad(0).as<T>();
        for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
      }
      if (sink.wants(1)) {
        auto gb = sink.grad(1).as<T>();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i % static_cast<std::size_t>(c)] += go[i];
      }
    });
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "matmul");
  if (a.rank() != b.rank() || (a.rank() != 2 && a.rank() != 3)) shape_error("matmul", a.shape(), b.shape());
  const bool batched = a.rank() == 3;
  const std::int64_t batch = batched ? a.dim(0) : 1;
  if (batched && b.dim(0) != batch) shape_error("matmul", a.shape(), b.shape());
  const std::int64_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  if (b.dim(-2) != k) shape_error("matmul", a.shape(), b.shape());

  Shape out_shape = batched ? Shape{batch, m, n} : Shape{m, n};
  Buffer out(a.dtype(), static_cast<std::size_t>(batch * m * n));
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    for (std::int64_t i = 0; i < batch; ++i) {
      CMatMap<T> A(a.data<T>().data() + i * m * k, m, k);
      CMatMap<T> B(b.data<T>().data() + i * k * n, k, n);
      MatMap<T> C(out.as<T>().data() + i * m * n, m, n);
      C.noalias() = A * B;
    }
  });
  auto ai = a.impl_ptr();
  auto bi = b.impl_ptr();
  return record(std::move(out_shape), std::move(out), "matmul", {a, b},
                [ai, bi, batch, m, k, n](const Buffer& g, GradSink& sink) {
                  dispatch(g.dtype(), [&](auto tag) {
                    using T = decltype(tag);
                    for (std::int64_t i = 0; i < batch; ++i) {
                      CMatMap<T> G(g.as<T>().data() + i * m * n, m, n);
                      if (sink.wants(0)) {
                        CMatMap<T> B(bi->data.as<T>().data() + i * k * n, k, n);
                        MatMap<T> GA(sink.grad(0).as<T>().data() + i * m * k, m, k);
                        GA.noalias() += G * B.transpose();
                      }
                      if (sink.wants(1)) {
                        CMatMap<T> A(ai->data.as<T>().data() + i * m * k, m, k);
                        MatMap<T> GB(sink.grad(1).as<T>().data() + i * k * n, k, n);
                        GB.noalias() += A.transpose() * G;
                      }
                    }
                  });
                });
}

namespace {
template <class T>
void transpose_into(std::span<const T> src, std::span<T> dst, std::int64_t batch, std::int64_t rows,
                    std::int64_t cols, bool accumulate) {
  for (std::int64_t b = 0; b < batch; ++b) {
    const T* s = src.data() + b * rows * cols;
    T* d = dst.data() + b * rows * cols;
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t c = 0; c < cols; ++c) {
        if (accumulate)
          d[c * rows + r] += s[r * cols + c];
        else
          d[c * rows + r] = s[r * cols + c];
      }
  }
}
}  // namespace

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2 && a.rank() != 3)
    throw std::invalid_argument("transpose: expected rank 2 or 3, got " + shape_str(a.shape()));
  const std::int64_t batch = a.rank() == 3 ? a.dim(0) : 1;
  const std::int64_t rows = a.dim(-2), cols = a.dim(-1);
  Shape out_shape = a.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  Buffer out(a.dtype(), static_cast<std::size_t>(a.numel()));
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    transpose_into<T>(a.data<T>(), out.as<T>(), batch, rows, cols, false);
  });
  return record(std::move(out_shape), std::move(out), "transpose", {a},
                [batch, rows, cols](const Buffer& g, GradSink& sink) {
                  if (!sink.wants(0)) return;
                  dispatch(g.dtype(), [&](auto tag) {
                    using T = decltype(tag);
                    transpose_into<T>(g.as<T>(), sink.grad(0).as<T>(), batch, cols, rows, true);
                  });
                });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  return record(std::move(shape), a.buffer(), "reshape", {a}, [](const Buffer& g, GradSink& sink) {
    if (sink.wants(0)) sink.grad(0).add_inplace(g);
  });
}

Tensor softmax_rows(const Tensor& a) {
  if (a.rank() < 1) throw std::invalid_argument("softmax_rows: needs at least rank 1");
  const std::int64_t c = last_dim(a);
  const std::int64_t rows = a.numel() / c;
  Buffer out(a.dtype(), static_cast<std::size_t>(a.numel()));
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = a.data<T>();
    auto y = out.as<T>();
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* xr = x.data() + r * c;
      T* yr = y.data() + r * c;
      const T mx = *std::max_element(xr, xr + c);
      T total = 0;
      for (std::int64_t j = 0; j < c; ++j) total += (yr[j] = std::exp(xr[j] - mx));
      for (std::int64_t j = 0; j < c; ++j) yr[j] /= total;
    }
  });
  Buffer saved = out;
  return record(a.shape(), std::move(out), "softmax_rows", {a},
                [saved = std::move(saved), c, rows](const Buffer& g, GradSink& sink) {
                  if (!sink.wants(0)) return;
                  dispatch(g.dtype(), [&](auto tag) {
                    using T = decltype(tag);
                    auto s = saved.as<T>();
                    auto go = g.as<T>();
                    auto gi = sink.grad(0).as<T>();
                    for (std::int64_t r = 0; r < rows; ++r) {
                      T dot = 0;
                      for (std::int64_t j = 0; j < c; ++j) dot += go[r * c + j] * s[r * c + j];
                      for (std::int64_t j = 0; j < c; ++j) gi[r * c + j] += s[r * c + j] * (go[r * c + j] - dot);
                    }
                  });
                });
}

Tensor log_softmax_rows(const Tensor& a) {
  const std::int64_t c = last_dim(a);
  const std::int64_t rows = a.numel() / c;
  Buffer out(a.dtype(), static_cast<std::size_t>(a.numel()));
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = a.data<T>();
    auto y = out.as<T>();
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* xr = x.data() + r * c;
      const T mx = *std::max_element(xr, xr + c);
      T total = 0;
      for (std::int64_t j = 0; j < c; ++j) total += std::exp(xr[j] - mx);
      const T lse = mx + std::log(total);
      for (std::int64_t j = 0; j < c; ++j) y[r * c + j] = xr[j] - lse;
    }
  });
  Buffer saved = out;
  return record(a.shape(), std::move(out), "log_softmax_rows", {a},
                [saved = std::move(saved), c, rows](const Buffer& g, GradSink& sink) {
                  if (!sink.wants(0)) return;
                  dispatch(g.dtype(), [&](auto tag) {
                    using T = decltype(tag);
                    auto ls = saved.as<T>();
                    auto go = g.as<T>();
                    auto gi = sink.grad(0).as<T>();
                    for (std::int64_t r = 0; r < rows; ++r) {
                      T total = 0;
                      for (std::int64_t j = 0; j < c; ++j) total += go[r * c + j];
                      for (std::int64_t j = 0; j < c; ++j)
                        gi[r * c + j] += go[r * c + j] - std::exp(ls[r * c + j]) * total;
                    }
                  });
                });
}

Tensor channel_slice(const Tensor& t, std::int64_t begin, std::int64_t end) {
  const std::int64_t c = last_dim(t);
  if (t.rank() < 1 || begin < 0 || end > c || begin >= end)
    throw std::invalid_argument("channel_slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                                ") invalid for shape " + shape_str(t.shape()));
  const std::int64_t rows = t.numel() / c;
  const std::int64_t w = end - begin;
  Shape out_shape = t.shape();
  out_shape.back() = w;
  Buffer out(t.dtype(), static_cast<std::size_t>(rows * w));
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = t.data<T>();
    auto y = out.as<T>();
    for (std::int64_t r = 0; r < rows; ++r) std::copy_n(x.data() + r * c + begin, w, y.data() + r * w);
  });
  return record(std::move(out_shape), std::move(out), "channel_slice", {t},
                [rows, c, w, begin](const Buffer& g, GradSink& sink) {
                  if (!sink.wants(0)) return;
                  dispatch(g.dtype(), [&](auto tag) {
                    using T = decltype(tag);
                    auto go = g.as<T>();
                    auto gi = sink.grad(0).as<T>();
                    for (std::int64_t r = 0; r < rows; ++r)
                      for (std::int64_t j = 0; j < w; ++j) gi[r * c + begin + j] += go[r * w + j];
                  });
                });
}

std::pair<Tensor, Tensor> channel_split(const Tensor& t) {
  const std::int64_t c = last_dim(t);
  if (c % 2 != 0)
    throw std::invalid_argument("channel_split: channel count must be even, got shape " + shape_str(t.shape()));
  return {channel_slice(t, 0, c / 2), channel_slice(t, c / 2, c)};
}

Tensor channel_concat(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "channel_concat");
  if (a.rank() != b.rank() || a.rank() < 1 ||
      !std::equal(a.shape().begin(), a.shape().end() - 1, b.shape().begin()))
    shape_error("channel_concat", a.shape(), b.shape());
  const std::int64_t ca = last_dim(a), cb = last_dim(b), c = ca + cb;
  const std::int64_t rows = a.numel() / ca;
  Shape out_shape = a.shape();
  out_shape.back() = c;
  Buffer out(a.dtype(), static_cast<std::size_t>(rows * c));
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = a.data<T>();
    auto z = b.data<T>();
    auto y = out.as<T>();
    for (std::int64_t r = 0; r < rows; ++r) {
      std::copy_n(x.data() + r * ca, ca, y.data() + r * c);
      std::copy_n(z.data() + r * cb, cb, y.data() + r * c + ca);
    }
  });
  return record(std::move(out_shape), std::move(out), "channel_concat", {a, b},
                [rows, ca, cb, c](const Buffer& g, GradSink& sink) {
                  dispatch(g.dtype(), [&](auto tag) {
                    using T = decltype(tag);
                    auto go = g.as<T>();
                    if (sink.wants(0)) {
                      auto ga = sink.grad(0).as<T>();
                      for (std::int64_t r = 0; r < rows; ++r)
                        for (std::int64_t j = 0; j < ca; ++j) ga[r * ca + j] += go[r * c + j];
                    }
                    if (sink.wants(1)) {
                      auto gb = sink.grad(1).as<T>();
                      for (std::int64_t r = 0; r < rows; ++r)
                        for (std::int64_t j = 0; j < cb; ++j) gb[r * cb + j] += go[r * c + ca + j];
                    }
                  });
                });
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeometry {
  std::int64_t n, h, w, cin, kh, kw, cout, sh, sw, ho, wo, pad_top, pad_left;
  std::int64_t patch() const { return kh * kw * cin; }
  bool pointwise() const { return kh == 1 && kw == 1 && sh == 1 && sw == 1 && pad_top == 0 && pad_left == 0; }
};

std::int64_t same_extent(std::int64_t in, std::int64_t stride) { return (in + stride - 1) / stride; }

ConvGeometry conv_geometry(const Tensor& x, const Tensor& k, const Conv2DOptions& opt) {
  require_rank(x, 4, "conv2d input");
  require_rank(k, 4, "conv2d kernel");
  ConvGeometry g{};
  g.n = x.dim(0);
  g.h = x.dim(1);
  g.w = x.dim(2);
  g.cin = x.dim(3);
  g.kh = k.dim(0);
  g.kw = k.dim(1);
  g.cout = k.dim(3);
  g.sh = opt.stride_h;
  g.sw = opt.stride_w;
  if (g.sh < 1 || g.sw < 1) throw std::invalid_argument("conv2d: strides must be >= 1");
  if (k.dim(2) != g.cin)
    throw std::invalid_argument("conv2d: input has " + std::to_string(g.cin) + " channels but kernel " +
                                shape_str(k.shape()) + " expects " + std::to_string(k.dim(2)));
  if (opt.padding == Padding::same) {
    g.ho = same_extent(g.h, g.sh);
    g.wo = same_extent(g.w, g.sw);
    g.pad_top = std::max<std::int64_t>((g.ho - 1) * g.sh + g.kh - g.h, 0) / 2;
    g.pad_left = std::max<std::int64_t>((g.wo - 1) * g.sw + g.kw - g.w, 0) / 2;
  } else {
    if (g.h < g.kh || g.w < g.kw)
      throw std::invalid_argument("conv2d: valid padding needs input " + shape_str(x.shape()) +
                                  " at least as large as kernel " + shape_str(k.shape()));
    g.ho = (g.h - g.kh) / g.sh + 1;
    g.wo = (g.w - g.kw) / g.sw + 1;
  }
  return g;
}

template <class T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::int64_t patch = g.patch();
  for (std::int64_t oy = 0; oy < g.ho; ++oy)
    for (std::int64_t ox = 0; ox < g.wo; ++ox) {
      T* row = col + (oy * g.wo + ox) * patch;
      for (std::int64_t ky = 0; ky < g.kh; ++ky) {
        const std::int64_t iy = oy * g.sh - g.pad_top + ky;
        for (std::int64_t kx = 0; kx < g.kw; ++kx) {
          const std::int64_t ix = ox * g.sw - g.pad_left + kx;
          T* dst = row + (ky * g.kw + kx) * g.cin;
          if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w)
            std::fill_n(dst, g.cin, T(0));
          else
            std::copy_n(x + (iy * g.w + ix) * g.cin, g.cin, dst);
        }
      }
    }
}

template <class T>
void col2im_add(const T* col, const ConvGeometry& g, T* dx) {
  const std::int64_t patch = g.patch();
  for (std::int64_t oy = 0; oy < g.ho; ++oy)
    for (std::int64_t ox = 0; ox < g.wo; ++ox) {
      const T* row = col + (oy * g.wo + ox) * patch;
      for (std::int64_t ky = 0; ky < g.kh; ++ky) {
        const std::int64_t iy = oy * g.sh - g.pad_top + ky;
        if (iy < 0 || iy >= g.h) continue;
        for (std::int64_t kx = 0; kx < g.kw; ++kx) {
          const std::int64_t ix = ox * g.sw - g.pad_left + kx;
          if (ix < 0 || ix >= g.w) continue;
          const T* src = row + (ky * g.kw + kx) * g.cin;
          T* dst = dx + (iy * g.w + ix) * g.cin;
          for (std::int64_t c = 0; c < g.cin; ++c) dst[c] += src[c];
        }
      }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, const std::optional<Tensor>& bias, const Conv2DOptions& opt) {
  require_same_dtype(x, kernel, "conv2d");
  const ConvGeometry g = conv_geometry(x, kernel, opt);
  if (bias) {
    require_same_dtype(x, *bias, "conv2d bias");
    if (bias->rank() != 1 || bias->dim(0) != g.cout) shape_error("conv2d bias", kernel.shape(), bias->shape());
  }
  const std::int64_t pixels = g.ho * g.wo;
  Buffer out(x.dtype(), static_cast<std::size_t>(g.n * pixels * g.cout));
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    CMatMap<T> W(kernel.data<T>().data(), g.patch(), g.cout);
    std::vector<T> col(g.pointwise() ? 0 : static_cast<std::size_t>(pixels * g.patch()));
    for (std::int64_t i = 0; i < g.n; ++i) {
      const T* xi = x.data<T>().data() + i * g.h * g.w * g.cin;
      const T* src = xi;
      if (!g.pointwise()) {
        im2col(xi, g, col.data());
        src = col.data();
      }
      CMatMap<T> C(src, pixels, g.patch());
      MatMap<T> Y(out.as<T>().data() + i * pixels * g.cout, pixels, g.cout);
      Y.noalias() = C * W;
      if (bias) {
        Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(bias->data<T>().data(), g.cout);
        Y.rowwise() += b;
      }
    }
  });

  std::vector<Tensor> inputs{x, kernel};
  if (bias) inputs.push_back(*bias);
  auto xi = x.impl_ptr();
  auto ki = kernel.impl_ptr();
  return record({g.n, g.ho, g.wo, g.cout}, std::move(out), "conv2d", std::move(inputs),
                [xi, ki, g, pixels](const Buffer& gout, GradSink& sink) {
                  dispatch(gout.dtype(), [&](auto tag) {
                    using T = decltype(tag);
                    CMatMap<T> W(ki->data.as<T>().data(), g.patch(), g.cout);
                    std::vector<T> col(g.pointwise() ? 0 : static_cast<std::size_t>(pixels * g.patch()));
                    std::vector<T> dcol(col.size());
                    for (std::int64_t i = 0; i < g.n; ++i) {
                      CMatMap<T> G(gout.as<T>().data() + i * pixels * g.cout, pixels, g.cout);
                      const T* xin = xi->data.as<T>().data() + i * g.h * g.w * g.cin;
                      if (sink.wants(1)) {
                        const T* src = xin;
                        if (!g.pointwise()) {
                          im2col(xin, g, col.data());
                          src = col.data();
                        }
                        CMatMap<T> C(src, pixels, g.patch());
                        MatMap<T> GW(sink.grad(1).as<T>().data(), g.patch(), g.cout);
                        GW.noalias() += C.transpose() * G;
                      }
                      if (sink.wants(0)) {
                        T* dx = sink.grad(0).as<T>().data() + i * g.h * g.w * g.cin;
                        if (g.pointwise()) {
                          MatMap<T> DX(dx, pixels, g.cin);
                          DX.noalias() += G * W.transpose();
                        } else {
                          MatMap<T> DC(dcol.data(), pixels, g.patch());
                          DC.noalias() = G * W.transpose();
                          col2im_add(dcol.data(), g, dx);
                        }
                      }
                      if (sink.size() > 2 && sink.wants(2)) {
                        auto gb = sink.grad(2).as<T>();
                        for (std::int64_t p = 0; p < pixels; ++p)
                          for (std::int64_t c = 0; c < g.cout; ++c) gb[c] += G(p, c);
                      }
                    }
                  });
                });
}

// ---------------------------------------------------------------------------
// Pooling and resampling

Tensor avg_pool2d(const Tensor& x, const Pool2DOptions& opt) {
  require_rank(x, 4, "avg_pool2d");
  if (opt.pool_h < 1 || opt.pool_w < 1) throw std::invalid_argument("avg_pool2d: zero-size window");
  if (opt.stride_h < 1 || opt.stride_w < 1) throw std::invalid_argument("avg_pool2d: strides must be >= 1");
  const std::int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (opt.pool_h > h || opt.pool_w > w)
    throw std::invalid_argument("avg_pool2d: window " + std::to_string(opt.pool_h) + "x" +
                                std::to_string(opt.pool_w) + " exceeds spatial extent of " + shape_str(x.shape()));
  auto out_extent = [&](std::int64_t in, std::int64_t p, std::int64_t s) {
    std::int64_t span = in - p;
    std::int64_t o = opt.ceil_mode ? (span + s - 1) / s + 1 : span / s + 1;
    if (opt.ceil_mode && (o - 1) * s >= in) --o;  // last window must start inside the input
    return o;
  };
  const std::int64_t ho = out_extent(h, opt.pool_h, opt.stride_h);
  const std::int64_t wo = out_extent(w, opt.pool_w, opt.stride_w);
  struct Win {
    std::int64_t y0, y1, x0, x1;
  };
  std::vector<Win> wins(static_cast<std::size_t>(ho * wo));
  for (std::int64_t oy = 0; oy < ho; ++oy)
    for (std::int64_t ox = 0; ox < wo; ++ox) {
      const std::int64_t y0 = oy * opt.stride_h, x0 = ox * opt.stride_w;
      wins[static_cast<std::size_t>(oy * wo + ox)] = {y0, std::min(y0 + opt.pool_h, h), x0,
                                                      std::min(x0 + opt.pool_w, w)};
    }

  Buffer out(x.dtype(), static_cast<std::size_t>(n * ho * wo * c));
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto in = x.data<T>();
    auto y = out.as<T>();
    std::vector<double> acc(static_cast<std::size_t>(c));
    for (std::int64_t i = 0; i < n; ++i)
      for (std::size_t wi = 0; wi < wins.size(); ++wi) {
        const Win& win = wins[wi];
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::int64_t yy = win.y0; yy < win.y1; ++yy)
          for (std::int64_t xx = win.x0; xx < win.x1; ++xx) {
            const T* px = in.data() + ((i * h + yy) * w + xx) * c;
            for (std::int64_t ch = 0; ch < c; ++ch) acc[ch] += px[ch];
          }
        const double count = static_cast<double>((win.y1 - win.y0) * (win.x1 - win.x0));
        T* dst = y.data() + (i * static_cast<std::int64_t>(wins.size()) + static_cast<std::int64_t>(wi)) * c;
        for (std::int64_t ch = 0; ch < c; ++ch) dst[ch] = static_cast<T>(acc[ch] / count);
      }
  });
  return record({n, ho, wo, c}, std::move(out), "avg_pool2d", {x},
                [wins = std::move(wins), n, h, w, c](const Buffer& g, GradSink& sink) {
                  if (!sink.wants(0)) return;
                  dispatch(g.dtype(), [&](auto tag) {
                    using T = decltype(tag);
                    auto go = g.as<T>();
                    auto gi = sink.grad(0).as<T>();
                    const auto nw = static_cast<std::int64_t>(wins.size());
                    for (std::int64_t i = 0; i < n; ++i)
                      for (std::int64_t wi = 0; wi < nw; ++wi) {
                        const Win& win = wins[static_cast<std::size_t>(wi)];
                        const T inv = T(1) / static_cast<T>((win.y1 - win.y0) * (win.x1 - win.x0));
                        const T* src = go.data() + (i * nw + wi) * c;
                        for (std::int64_t yy = win.y0; yy < win.y1; ++yy)
                          for (std::int64_t xx = win.x0; xx < win.x1; ++xx) {
                            T* dst = gi.data() + ((i * h + yy) * w + xx) * c;
                            for (std::int64_t ch = 0; ch < c; ++ch) dst[ch] += src[ch] * inv;
                          }
                      }
                  });
                });
}

Tensor max_pool2d_same(const Tensor& x, int pool, int stride) {
  require_rank(x, 4, "max_pool2d");
  if (pool < 1 || stride < 1) throw std::invalid_argument("max_pool2d: pool and stride must be >= 1");
  const std::int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const std::int64_t ho = same_extent(h, stride), wo = same_extent(w, stride);
  const std::int64_t pt = std::max<std::int64_t>((ho - 1) * stride + pool - h, 0) / 2;
  const std::int64_t pl = std::max<std::int64_t>((wo - 1) * stride + pool - w, 0) / 2;
  const auto total = static_cast<std::size_t>(n * ho * wo * c);
  std::vector<std::int64_t> argmax(total);
  Buffer out(x.dtype(), total);
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto in = x.data<T>();
    auto y = out.as<T>();
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t oy = 0; oy < ho; ++oy)
        for (std::int64_t ox = 0; ox < wo; ++ox)
          for (std::int64_t ch = 0; ch < c; ++ch) {
            std::int64_t best = -1;
            for (std::int64_t ky = 0; ky < pool; ++ky) {
              const std::int64_t iy = oy * stride - pt + ky;
              if (iy < 0 || iy >= h) continue;
              for (std::int64_t kx = 0; kx < pool; ++kx) {
                const std::int64_t ix = ox * stride - pl + kx;
                if (ix < 0 || ix >= w) continue;
                const std::int64_t idx = ((i * h + iy) * w + ix) * c + ch;
                if (best < 0 || in[idx] > in[best] || std::isnan(in[idx])) best = idx;
              }
            }
            const std::int64_t o = ((i * ho + oy) * wo + ox) * c + ch;
            argmax[o] = best;
            y[o] = in[best];
          }
  });
  return record({n, ho, wo, c}, std::move(out), "max_pool2d", {x},
                [argmax = std::move(argmax)](const Buffer& g, GradSink& sink) {
                  if (!sink.wants(0)) return;
                  dispatch(g.dtype(), [&](auto tag) {
                    using T = decltype(tag);
                    auto go = g.as<T>();
                    auto gi = sink.grad(0).as<T>();
                    for (std::size_t o = 0; o < go.size(); ++o) gi[argmax[o]] += go[o];
                  });
                });
}

namespace {
struct Tap {
  std::int64_t i0, i1;
  double frac;
};

std::vector<Tap> half_pixel_taps(std::int64_t in, std::int64_t out) {
  std::vector<Tap> taps(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t o = 0; o < out; ++o) {
    double s = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (s < 0) s = 0;
    auto i0 = static_cast<std::int64_t>(std::floor(s));
    if (i0 > in - 1) i0 = in - 1;
    const std::int64_t i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, s - static_cast<double>(i0)};
  }
  return taps;
}
}  // namespace

Tensor bilinear_upsample(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
  require_rank(x, 4, "bilinear_upsample");
  const std::int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (out_h < h || out_w < w)
    throw std::invalid_argument("bilinear_upsample: target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                                " is smaller than input " + shape_str(x.shape()) + "; only upsampling is supported");
  auto ty = half_pixel_taps(h, out_h);
  auto tx = half_pixel_taps(w, out_w);
  Buffer out(x.dtype(), static_cast<std::size_t>(n * out_h * out_w * c));
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto in = x.data<T>();
    auto y = out.as<T>();
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t oy = 0; oy < out_h; ++oy) {
        const Tap& a = ty[static_cast<std::size_t>(oy)];
        for (std::int64_t ox = 0; ox < out_w; ++ox) {
          const Tap& b = tx[static_cast<std::size_t>(ox)];
          const T* p00 = in.data() + ((i * h + a.i0) * w + b.i0) * c;
          const T* p01 = in.data() + ((i * h + a.i0) * w + b.i1) * c;
          const T* p10 = in.data() + ((i * h + a.i1) * w + b.i0) * c;
          const T* p11 = in.data() + ((i * h + a.i1) * w + b.i1) * c;
          T* dst = y.data() + ((i * out_h + oy) * out_w + ox) * c;
          const T fy = static_cast<T>(a.frac), fx = static_cast<T>(b.frac);
          for (std::int64_t ch = 0; ch < c; ++ch) {
            const T top = p00[ch] + (p01[ch] - p00[ch]) * fx;
            const T bot = p10[ch] + (p11[ch] - p10[ch]) * fx;
            dst[ch] = top + (bot - top) * fy;
          }
        }
      }
  });
  return record({n, out_h, out_w, c}, std::move(out), "bilinear_upsample", {x},
                [ty = std::move(ty), tx = std::move(tx), n, h, w, c, out_h, out_w](const Buffer& g, GradSink& sink) {
                  if (!sink.wants(0)) return;
                  dispatch(g.dtype(), [&](auto tag) {
                    using T = decltype(tag);
                    auto go = g.as<T>();
                    auto gi = sink.grad(0).as<T>();
                    for (std::int64_t i = 0; i < n; ++i)
                      for (std::int64_t oy = 0; oy < out_h; ++oy) {
                        const Tap& a = ty[static_cast<std::size_t>(oy)];
                        for (std::int64_t ox = 0; ox < out_w; ++ox) {
                          const Tap& b = tx[static_cast<std::size_t>(ox)];
                          const T fy = static_cast<T>(a.frac), fx = static_cast<T>(b.frac);
                          const T w00 = (1 - fy) * (1 - fx), w01 = (1 - fy) * fx, w10 = fy * (1 - fx), w11 = fy * fx;
                          const T* src = go.data() + ((i * out_h + oy) * out_w + ox) * c;
                          T* d00 = gi.data() + ((i * h + a.i0) * w + b.i0) * c;
                          T* d01 = gi.data() + ((i * h + a.i0) * w + b.i1) * c;
                          T* d10 = gi.data() + ((i * h + a.i1) * w + b.i0) * c;
                          T* d11 = gi.data() + ((i * h + a.i1) * w + b.i1) * c;
                          for (std::int64_t ch = 0; ch < c; ++ch) {
                            d00[ch] += src[ch] * w00;
                            d01[ch] += src[ch] * w01;
                            d10[ch] += src[ch] * w10;
                            d11[ch] += src[ch] * w11;
                          }
                        }
                      }
                  });
                });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool");
  const std::int64_t n = x.dim(0), hw = x.dim(1) * x.dim(2), c = x.dim(3);
  Buffer out(x.dtype(), static_cast<std::size_t>(n * c));
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto in = x.data<T>();
    auto y = out.as<T>();
    std::vector<double> acc(static_cast<std::size_t>(c));
    for (std::int64_t i = 0; i < n; ++i) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::int64_t p = 0; p < hw; ++p)
        for (std::int64_t ch = 0; ch < c; ++ch) acc[ch] += in[(i * hw + p) * c + ch];
      for (std::int64_t ch = 0; ch < c; ++ch) y[i * c + ch] = static_cast<T>(acc[ch] / static_cast<double>(hw));
    }
  });
  return record({n, c}, std::move(out), "global_avg_pool", {x}, [n, hw, c](const Buffer& g, GradSink& sink) {
    if (!sink.wants(0)) return;
    dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto go = g.as<T>();
      auto gi = sink.grad(0).as<T>();
      const T inv = T(1) / static_cast<T>(hw);
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t p = 0; p < hw; ++p)
          for (std::int64_t ch = 0; ch < c; ++ch) gi[(i * hw + p) * c + ch] += go[i * c + ch] * inv;
    });
  });
}

Tensor mul_mask(const Tensor& x, const Tensor& mask) {
  require_same_dtype(x, mask, "mul_mask");
  if (x.shape() != mask.shape()) shape_error("mul_mask", x.shape(), mask.shape());
  Buffer out(x.dtype(), static_cast<std::size_t>(x.numel()));
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto a = x.data<T>();
    auto m = mask.data<T>();
    auto y = out.as<T>();
    for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] * m[i];
  });
  Buffer saved = mask.buffer();
  return record(x.shape(), std::move(out), "mul_mask", {x},
                [saved = std::move(saved)](const Buffer& g, GradSink& sink) {
                  if (!sink.wants(0)) return;
                  dispatch(g.dtype(), [&](auto tag) {
                    using T = decltype(tag);
                    auto go = g.as<T>();
                    auto m = saved.as<T>();
                    auto gi = sink.grad(0).as<T>();
                    for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * m[i];
                  });
                });
}

// ---------------------------------------------------------------------------
// Batch normalization

namespace {
void check_bn_params(const Tensor& x, const Tensor& p, const char* what) {
  require_same_dtype(x, p, "batch_norm");
  if (p.rank() != 1 || p.dim(0) != last_dim(x))
    throw std::invalid_argument(std::string("batch_norm: ") + what + " " + shape_str(p.shape()) +
                                " does not match channels of " + shape_str(x.shape()));
}
}  // namespace

BatchNormResult batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  check_bn_params(x, gamma, "gamma");
  check_bn_params(x, beta, "beta");
  const std::int64_t c = last_dim(x);
  const std::int64_t m = x.numel() / c;
  BatchNormResult res;
  res.batch_mean.assign(static_cast<std::size_t>(c), 0.0);
  res.batch_var.assign(static_cast<std::size_t>(c), 0.0);
  std::vector<double> invstd(static_cast<std::size_t>(c));
  Buffer out(x.dtype(), static_cast<std::size_t>(x.numel()));
  Buffer xhat(x.dtype(), static_cast<std::size_t>(x.numel()));
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto in = x.data<T>();
    for (std::int64_t r = 0; r < m; ++r)
      for (std::int64_t ch = 0; ch < c; ++ch) res.batch_mean[ch] += in[r * c + ch];
    for (auto& v : res.batch_mean) v /= static_cast<double>(m);
    for (std::int64_t r = 0; r < m; ++r)
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const double d = in[r * c + ch] - res.batch_mean[ch];
        res.batch_var[ch] += d * d;
      }
    for (std::int64_t ch = 0; ch < c; ++ch) {
      res.batch_var[ch] /= static_cast<double>(m);
      invstd[ch] = 1.0 / std::sqrt(res.batch_var[ch] + eps);
    }
    auto g = gamma.data<T>();
    auto b = beta.data<T>();
    auto xh = xhat.as<T>();
    auto y = out.as<T>();
    for (std::int64_t r = 0; r < m; ++r)
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const auto i = static_cast<std::size_t>(r * c + ch);
        xh[i] = static_cast<T>((in[i] - res.batch_mean[ch]) * invstd[ch]);
        y[i] = g[ch] * xh[i] + b[ch];
      }
  });
  auto gi = gamma.impl_ptr();
  res.y = record(x.shape(), std::move(out), "batch_norm_train", {x, gamma, beta},
                 [xhat = std::move(xhat), invstd = std::move(invstd), gi, c, m](const Buffer& g, GradSink& sink) {
                   dispatch(g.dtype(), [&](auto tag) {
                     using T = decltype(tag);
                     auto go = g.as<T>();
                     auto xh = xhat.as<T>();
                     auto gam = gi->data.as<T>();
                     std::vector<double> dbeta(static_cast<std::size_t>(c)), dgamma(static_cast<std::size_t>(c));
                     for (std::int64_t r = 0; r < m; ++r)
                       for (std::int64_t ch = 0; ch < c; ++ch) {
                         dbeta[ch] += go[r * c + ch];
                         dgamma[ch] += static_cast<double>(go[r * c + ch]) * xh[r * c + ch];
                       }
                     if (sink.wants(1)) {
                       auto dg = sink.grad(1).as<T>();
                       for (std::int64_t ch = 0; ch < c; ++ch) dg[ch] += static_cast<T>(dgamma[ch]);
                     }
                     if (sink.wants(2)) {
                       auto db = sink.grad(2).as<T>();
                       for (std::int64_t ch = 0; ch < c; ++ch) db[ch] += static_cast<T>(dbeta[ch]);
                     }
                     if (sink.wants(0)) {
                       auto dx = sink.grad(0).as<T>();
                       const double md = static_cast<double>(m);
                       for (std::int64_t r = 0; r < m; ++r)
                         for (std::int64_t ch = 0; ch < c; ++ch) {
                           const auto i = static_cast<std::size_t>(r * c + ch);
                           const double dxh = static_cast<double>(go[i]) * gam[ch];
                           const double sum_dxh = gam[ch] * dbeta[ch];
                           const double sum_dxh_xh = gam[ch] * dgamma[ch];
                           dx[i] += static_cast<T>(invstd[ch] / md * (md * dxh - sum_dxh - xh[i] * sum_dxh_xh));
                         }
                     }
                   });
                 });
  return res;
}

Tensor batch_norm_infer(const Tensor& x, const Tensor& gamma, const Tensor& beta, const Tensor& running_mean,
                        const Tensor& running_var, double eps) {
  check_bn_params(x, gamma, "gamma");
  check_bn_params(x, beta, "beta");
  check_bn_params(x, running_mean, "running_mean");
  check_bn_params(x, running_var, "running_var");
  const std::int64_t c = last_dim(x);
  const std::int64_t m = x.numel() / c;
  std::vector<double> invstd(static_cast<std::size_t>(c)), mu(static_cast<std::size_t>(c));
  for (std::int64_t ch = 0; ch < c; ++ch) {
    mu[ch] = running_mean.at(static_cast<std::size_t>(ch));
    invstd[ch] = 1.0 / std::sqrt(running_var.at(static_cast<std::size_t>(ch)) + eps);
  }
  Buffer out(x.dtype(), static_cast<std::size_t>(x.numel()));
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto in = x.data<T>();
    auto g = gamma.data<T>();
    auto b = beta.data<T>();
    auto y = out.as<T>();
    for (std::int64_t r = 0; r < m; ++r)
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const auto i = static_cast<std::size_t>(r * c + ch);
        y[i] = static_cast<T>(g[ch] * ((in[i] - mu[ch]) * invstd[ch]) + b[ch]);
      }
  });
  auto xi = x.impl_ptr();
  auto gi = gamma.impl_ptr();
  return record(x.shape(), std::move(out), "batch_norm_infer", {x, gamma, beta},
                [xi, gi, mu = std::move(mu), invstd = std::move(invstd), c, m](const Buffer& g, GradSink& sink) {
                  dispatch(g.dtype(), [&](auto tag) {
                    using T = decltype(tag);
                    auto go = g.as<T>();
                    auto in = xi->data.as<T>();
                    auto gam = gi->data.as<T>();
                    for (std::int64_t r = 0; r < m; ++r)
                      for (std::int64_t ch = 0; ch < c; ++ch) {
                        const auto i = static_cast<std::size_t>(r * c + ch);
                        if (sink.wants(0)) sink.grad(0).as<T>()[i] += static_cast<T>(go[i] * gam[ch] * invstd[ch]);
                        if (sink.wants(1))
                          sink.grad(1).as<T>()[ch] += static_cast<T>(go[i] * (in[i] - mu[ch]) * invstd[ch]);
                        if (sink.wants(2)) sink.grad(2).as<T>()[ch] += go[i];
                      }
                  });
                });
}

// ---------------------------------------------------------------------------
// Losses

Tensor bce_loss(const Tensor& p, const Tensor& y) {
  require_same_dtype(p, y, "bce_loss");
  if (p.shape() != y.shape()) shape_error("bce_loss", p.shape(), y.shape());
  const auto n = static_cast<std::size_t>(p.numel());
  for (std::size_t i = 0; i < n; ++i) {
    const double t = y.at(i);
    if (t != 0.0 && t != 1.0)
      throw std::invalid_argument("bce_loss: target at index " + std::to_string(i) + " is " + std::to_string(t) +
                                  ", expected 0 or 1");
  }
  Buffer out(p.dtype(), 1);
  dispatch(p.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto pv = p.data<T>();
    auto yv = y.data<T>();
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double pc = std::clamp<double>(pv[i], kBceEps, 1.0 - kBceEps);
      acc -= yv[i] * std::log(pc) + (1.0 - yv[i]) * std::log(1.0 - pc);
    }
    out.as<T>()[0] = static_cast<T>(acc / static_cast<double>(n));
  });
  auto pi = p.impl_ptr();
  auto yi = y.impl_ptr();
  return record({}, std::move(out), "bce_loss", {p}, [pi, yi, n](const Buffer& g, GradSink& sink) {
    if (!sink.wants(0)) return;
    dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const double go = g.as<T>()[0];
      auto pv = pi->data.as<T>();
      auto yv = yi->data.as<T>();
      auto gp = sink.grad(0).as<T>();
      for (std::size_t i = 0; i < n; ++i) {
        const double pc = std::clamp<double>(pv[i], kBceEps, 1.0 - kBceEps);
        gp[i] += static_cast<T>(go * (-yv[i] / pc + (1.0 - yv[i]) / (1.0 - pc)) / static_cast<double>(n));
      }
    });
  });
}

Tensor cross_entropy_loss(const Tensor& logits, const std::vector<int>& labels) {
  require_rank(logits, 2, "cross_entropy_loss");
  const std::int64_t n = logits.dim(0), k = logits.dim(1);
  if (k < 2) throw std::invalid_argument("cross_entropy_loss: needs at least 2 classes");
  if (static_cast<std::int64_t>(labels.size()) != n)
    throw std::invalid_argument("cross_entropy_loss: " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(n) + " rows");
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || labels[i] >= k)
      throw std::invalid_argument("cross_entropy_loss: label " + std::to_string(labels[i]) + " at row " +
                                  std::to_string(i) + " out of range for " + std::to_string(k) + " classes");
  Tensor logp = log_softmax_rows(logits);
  Tensor onehot = Tensor::zeros({n, k}, logits.dtype());
  for (std::int64_t i = 0; i < n; ++i) onehot.mutable_buffer().set(static_cast<std::size_t>(i * k + labels[i]), -1.0);
  return scale(sum(mul(logp, onehot)), 1.0 / static_cast<double>(n));
}

}  // namespace dfca
