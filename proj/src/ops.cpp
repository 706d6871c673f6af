#include "xnet/ops.hpp"

#include <algorithm>
#include <cmath>

namespace xnet {

namespace {

template <Real T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <Real T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

template <Real T>
ConstMatMap<T> as_matrix(std::span<const T> s, Index rows, Index cols, Index offset = 0) {
  return ConstMatMap<T>(s.data() + offset, rows, cols);
}

template <Real T>
MatMap<T> as_matrix(std::span<T> s, Index rows, Index cols, Index offset = 0) {
  return MatMap<T>(s.data() + offset, rows, cols);
}

template <Real T>
Eigen::Map<const ArrayX<T>> as_array(std::span<const T> s) {
  return {s.data(), static_cast<Index>(s.size())};
}

template <Real T>
Eigen::Map<ArrayX<T>> as_array(std::span<T> s) {
  return {s.data(), static_cast<Index>(s.size())};
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " + to_string(s));
  }
}

enum class Broadcast { none, left_scalar, right_scalar };

template <Real T>
Broadcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::none;
  if (b.numel() == 1) return Broadcast::right_scalar;
  if (a.numel() == 1) return Broadcast::left_scalar;
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
}

// Shared machinery for add/sub/mul. `da`/`db` map (a, b, out_grad) to the
// per-element partial derivative times out_grad.
template <Real T, typename Fwd, typename DA, typename DB>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, DA da, DB db) {
  const Broadcast kind = broadcast_kind(a, b, name);
  const Shape shape = kind == Broadcast::left_scalar ? b.shape() : a.shape();
  const auto n = static_cast<std::size_t>(numel(shape));
  const auto av = a.data();
  const auto bv = b.data();
  auto a_at = [kind, av](std::size_t i) { return kind == Broadcast::left_scalar ? av[0] : av[i]; };
  auto b_at = [kind, bv](std::size_t i) { return kind == Broadcast::right_scalar ? bv[0] : bv[i]; };
  Buffer<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(a_at(i), b_at(i));
  return record_op<T>(name, shape, std::move(out), {a, b}, [kind, n, da, db](GradContext<T>& ctx) {
    const auto g = ctx.grad_output();
    const auto av = ctx.input(0);
    const auto bv = ctx.input(1);
    auto a_at = [kind, av](std::size_t i) { return kind == Broadcast::left_scalar ? av[0] : av[i]; };
    auto b_at = [kind, bv](std::size_t i) { return kind == Broadcast::right_scalar ? bv[0] : bv[i]; };
    if (ctx.needs_grad(0)) {
      auto ga = ctx.grad_input(0);
      for (std::size_t i = 0; i < n; ++i) ga[kind == Broadcast::left_scalar ? 0 : i] += da(a_at(i), b_at(i), g[i]);
    }
    if (ctx.needs_grad(1)) {
      auto gb = ctx.grad_input(1);
      for (std::size_t i = 0; i < n; ++i) gb[kind == Broadcast::right_scalar ? 0 : i] += db(a_at(i), b_at(i), g[i]);
    }
  });
}

template <Real T, typename Fwd, typename Deriv>
Tensor<T> unary_op(const char* name, const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  const auto xv = x.data();
  Buffer<T> out(xv.size());
  std::transform(xv.begin(), xv.end(), out.begin(), fwd);
  return record_op<T>(name, x.shape(), std::move(out), {x}, [deriv](GradContext<T>& ctx) {
    const auto g = ctx.grad_output();
    const auto y = ctx.output();
    const auto xv = ctx.input(0);
    auto gx = ctx.grad_input(0);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xv[i], y[i]);
  });
}

}  // namespace

template <Real T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T g) { return g; }, [](T, T, T g) { return g; });
}

template <Real T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T g) { return g; }, [](T, T, T g) { return -g; });
}

template <Real T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T g) { return g * y; },
      [](T x, T, T g) { return g * x; });
}

template <Real T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary_op<T>(
      "scale", a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <Real T>
Tensor<T> add_scalar(const Tensor<T>& a, T value) {
  return unary_op<T>(
      "add_scalar", a, [value](T x) { return x + value; }, [](T, T) { return T(1); });
}

namespace {
thread_local BranchSignature* active_signature = nullptr;
}

BranchSignature::BranchSignature() : previous_(active_signature) { active_signature = this; }
BranchSignature::~BranchSignature() { active_signature = previous_; }
BranchSignature* BranchSignature::active() { return active_signature; }

template <Real T>
Tensor<T> relu(const Tensor<T>& x) {
  if (auto* sig = BranchSignature::active()) {
    for (T v : x.data()) sig->mix(v > T(0) ? 1 : 0);
  }
  return unary_op<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <Real T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary_op<T>(
      "sigmoid", x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <Real T>
Tensor<T> log(const Tensor<T>& x) {
  return unary_op<T>(
      "log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <Real T>
Tensor<T> sum(const Tensor<T>& x) {
  const T total = x.array().sum();
  return record_op<T>("sum", Shape{}, {total}, {x}, [](GradContext<T>& ctx) {
    const T g = ctx.grad_output()[0];
    as_array(ctx.grad_input(0)) += g;
  });
}

template <Real T>
Tensor<T> mean(const Tensor<T>& x) {
  const T n = static_cast<T>(x.numel());
  return record_op<T>("mean", Shape{}, {x.array().sum() / n}, {x}, [n](GradContext<T>& ctx) {
    const T g = ctx.grad_output()[0] / n;
    as_array(ctx.grad_input(0)) += g;
  });
}

template <Real T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  const auto v = x.data();
  return record_op<T>("reshape", std::move(shape), Buffer<T>(v.begin(), v.end()), {x}, [](GradContext<T>& ctx) {
    as_array(ctx.grad_input(0)) += as_array(ctx.grad_output());
  });
}

template <Real T>
Tensor<T> transpose(const Tensor<T>& x) {
  const auto& s = x.shape();
  if (s.size() != 2 && s.size() != 3) throw ShapeError("transpose: expected rank 2 or 3, got " + to_string(s));
  const Index batch = s.size() == 3 ? s[0] : 1;
  const Index rows = s[s.size() - 2];
  const Index cols = s[s.size() - 1];
  Shape out_shape = s;
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  Buffer<T> out(x.data().size());
  const Index block = rows * cols;
  for (Index b = 0; b < batch; ++b) {
    as_matrix<T>(std::span<T>(out), cols, rows, b * block) = as_matrix<T>(x.data(), rows, cols, b * block).transpose();
  }
  return record_op<T>("transpose", out_shape, std::move(out), {x}, [batch, rows, cols, block](GradContext<T>& ctx) {
    auto gx = ctx.grad_input(0);
    for (Index b = 0; b < batch; ++b) {
      as_matrix<T>(gx, rows, cols, b * block) += as_matrix<T>(ctx.grad_output(), cols, rows, b * block).transpose();
    }
  });
}

template <Real T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  const bool batched = sa.size() == 3;
  if (!((sa.size() == 2 && sb.size() == 2) || (sa.size() == 3 && sb.size() == 3))) {
    throw ShapeError("matmul: expected two rank-2 or two rank-3 tensors, got " + to_string(sa) + " and " +
                     to_string(sb));
  }
  const Index batch = batched ? sa[0] : 1;
  if (batched && sb[0] != batch) throw ShapeError("matmul: batch mismatch " + to_string(sa) + " vs " + to_string(sb));
  const Index m = sa[sa.size() - 2];
  const Index k = sa[sa.size() - 1];
  const Index n = sb[sb.size() - 1];
  if (sb[sb.size() - 2] != k) {
    throw ShapeError("matmul: inner dimensions differ, " + to_string(sa) + " x " + to_string(sb));
  }
  Buffer<T> out(static_cast<std::size_t>(batch * m * n));
  for (Index i = 0; i < batch; ++i) {
    as_matrix<T>(std::span<T>(out), m, n, i * m * n).noalias() =
        as_matrix<T>(a.data(), m, k, i * m * k) * as_matrix<T>(b.data(), k, n, i * k * n);
  }
  Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
  return record_op<T>("matmul", shape, std::move(out), {a, b}, [batch, m, k, n](GradContext<T>& ctx) {
    const auto g = ctx.grad_output();
    for (Index i = 0; i < batch; ++i) {
      auto gi = as_matrix<T>(g, m, n, i * m * n);
      if (ctx.needs_grad(0)) {
        as_matrix<T>(ctx.grad_input(0), m, k, i * m * k).noalias() +=
            gi * as_matrix<T>(ctx.input(1), k, n, i * k * n).transpose();
      }
      if (ctx.needs_grad(1)) {
        as_matrix<T>(ctx.grad_input(1), k, n, i * k * n).noalias() +=
            as_matrix<T>(ctx.input(0), m, k, i * m * k).transpose() * gi;
      }
    }
  });
}

template <Real T>
Tensor<T> softmax(const Tensor<T>& x, Index axis) {
  const auto& s = x.shape();
  const auto rank = static_cast<Index>(s.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("softmax: axis out of range for shape " + to_string(s));
  Index outer = 1;
  Index inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (Index i = axis + 1; i < rank; ++i) inner *= s[static_cast<std::size_t>(i)];
  const Index len = s[static_cast<std::size_t>(axis)];

  const auto xv = x.data();
  Buffer<T> out(xv.size());
  for (Index o = 0; o < outer; ++o) {
    for (Index in = 0; in < inner; ++in) {
      const Index base = o * len * inner + in;
      T mx = xv[static_cast<std::size_t>(base)];
      for (Index j = 1; j < len; ++j) mx = std::max(mx, xv[static_cast<std::size_t>(base + j * inner)]);
      T total = 0;
      for (Index j = 0; j < len; ++j) {
        const auto idx = static_cast<std::size_t>(base + j * inner);
        out[idx] = std::exp(xv[idx] - mx);
        total += out[idx];
      }
      for (Index j = 0; j < len; ++j) out[static_cast<std::size_t>(base + j * inner)] /= total;
    }
  }
  return record_op<T>("softmax", s, std::move(out), {x}, [outer, inner, len](GradContext<T>& ctx) {
    const auto y = ctx.output();
    const auto g = ctx.grad_output();
    auto gx = ctx.grad_input(0);
    for (Index o = 0; o < outer; ++o) {
      for (Index in = 0; in < inner; ++in) {
        const Index base = o * len * inner + in;
        T dot = 0;
        for (Index j = 0; j < len; ++j) {
          const auto idx = static_cast<std::size_t>(base + j * inner);
          dot += g[idx] * y[idx];
        }
        for (Index j = 0; j < len; ++j) {
          const auto idx = static_cast<std::size_t>(base + j * inner);
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

namespace {

struct ConvGeometry {
  Index batch, in_channels, out_channels, height, width, kh, kw;
  Index pixels() const { return height * width; }
  Index patch() const { return in_channels * kh * kw; }
};

// col: [Cin·kh·kw × H·W], zero where the window leaves the image.
template <Real T>
void im2col(const T* image, const ConvGeometry& g, T* col) {
  const Index ph = g.kh / 2;
  const Index pw = g.kw / 2;
  for (Index c = 0; c < g.in_channels; ++c) {
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j) {
        T* row = col + ((c * g.kh + i) * g.kw + j) * g.pixels();
        const Index dx = j - pw;
        const Index w_lo = std::min<Index>(g.width, std::max<Index>(0, -dx));
        const Index w_hi = std::max<Index>(w_lo, std::min<Index>(g.width, g.width - dx));
        for (Index h = 0; h < g.height; ++h) {
          T* dst = row + h * g.width;
          const Index sh = h + i - ph;
          if (sh < 0 || sh >= g.height) {
            std::fill(dst, dst + g.width, T(0));
            continue;
          }
          const T* src = image + (c * g.height + sh) * g.width;
          std::fill(dst, dst + w_lo, T(0));
          for (Index w = w_lo; w < w_hi; ++w) dst[w] = src[w + dx];
          std::fill(dst + w_hi, dst + g.width, T(0));
        }
      }
    }
  }
}

template <Real T>
void col2im_add(const T* col, const ConvGeometry& g, T* image) {
  const Index ph = g.kh / 2;
  const Index pw = g.kw / 2;
  for (Index c = 0; c < g.in_channels; ++c) {
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j) {
        const T* row = col + ((c * g.kh + i) * g.kw + j) * g.pixels();
        const Index dx = j - pw;
        const Index w_lo = std::min<Index>(g.width, std::max<Index>(0, -dx));
        const Index w_hi = std::max<Index>(w_lo, std::min<Index>(g.width, g.width - dx));
        for (Index h = 0; h < g.height; ++h) {
          const Index sh = h + i - ph;
          if (sh < 0 || sh >= g.height) continue;
          const T* src = row + h * g.width;
          T* dst = image + (c * g.height + sh) * g.width;
          for (Index w = w_lo; w < w_hi; ++w) dst[w + dx] += src[w];
        }
      }
    }
  }
}

}  // namespace

template <Real T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(weight.shape(), 4, "conv2d weight");
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  ConvGeometry geo{xs[0], xs[1], ws[0], xs[2], xs[3], ws[2], ws[3]};
  if (ws[1] != geo.in_channels) {
    throw ShapeError("conv2d: weight expects " + std::to_string(ws[1]) + " input channels, input has " +
                     std::to_string(geo.in_channels));
  }
  if (geo.kh % 2 == 0 || geo.kw % 2 == 0) throw ShapeError("conv2d: kernel sides must be odd for same padding");
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{geo.out_channels}) throw ShapeError("conv2d: bias must have shape (Cout)");

  const bool pointwise = geo.kh == 1 && geo.kw == 1;
  const Index P = geo.pixels();
  const Index K = geo.patch();
  const Index in_block = geo.in_channels * P;
  const Index out_block = geo.out_channels * P;
  Buffer<T> out(static_cast<std::size_t>(geo.batch * out_block));
  Buffer<T> col(pointwise ? 0 : static_cast<std::size_t>(K * P));
  const auto W = as_matrix<T>(weight.data(), geo.out_channels, K);
  for (Index b = 0; b < geo.batch; ++b) {
    auto y = as_matrix<T>(std::span<T>(out), geo.out_channels, P, b * out_block);
    if (pointwise) {
      y.noalias() = W * as_matrix<T>(x.data(), K, P, b * in_block);
    } else {
      im2col(x.data().data() + b * in_block, geo, col.data());
      y.noalias() = W * ConstMatMap<T>(col.data(), K, P);
    }
    if (has_bias) y.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias.data().data(), geo.out_channels);
  }

  std::vector<Tensor<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return record_op<T>(
      "conv2d", Shape{geo.batch, geo.out_channels, geo.height, geo.width}, std::move(out), inputs,
      [geo, pointwise, has_bias](GradContext<T>& ctx) {
        const Index P = geo.pixels();
        const Index K = geo.patch();
        const Index in_block = geo.in_channels * P;
        const Index out_block = geo.out_channels * P;
        const auto g = ctx.grad_output();
        const auto xv = ctx.input(0);
        const auto W = as_matrix<T>(ctx.input(1), geo.out_channels, K);
        Buffer<T> col(pointwise ? 0 : static_cast<std::size_t>(K * P));
        RowMatrix<T> dcol;
        for (Index b = 0; b < geo.batch; ++b) {
          const auto gy = as_matrix<T>(g, geo.out_channels, P, b * out_block);
          if (ctx.needs_grad(1)) {
            auto dW = as_matrix<T>(ctx.grad_input(1), geo.out_channels, K);
            if (pointwise) {
              dW.noalias() += gy * as_matrix<T>(xv, K, P, b * in_block).transpose();
            } else {
              im2col(xv.data() + b * in_block, geo, col.data());
              dW.noalias() += gy * ConstMatMap<T>(col.data(), K, P).transpose();
            }
          }
          if (has_bias && ctx.needs_grad(2)) {
            Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(ctx.grad_input(2).data(), geo.out_channels) +=
                gy.rowwise().sum();
          }
          if (ctx.needs_grad(0)) {
            if (pointwise) {
              as_matrix<T>(ctx.grad_input(0), K, P, b * in_block).noalias() += W.transpose() * gy;
            } else {
              dcol.noalias() = W.transpose() * gy;
              col2im_add(dcol.data(), geo, ctx.grad_input(0).data() + b * in_block);
            }
          }
        }
      });
}

template <Real T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight) {
  require_rank(x.shape(), 4, "depthwise_conv2d input");
  require_rank(weight.shape(), 3, "depthwise_conv2d weight");
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  const Index B = xs[0], C = xs[1], H = xs[2], W = xs[3], kh = ws[1], kw = ws[2];
  if (ws[0] != C) {
    throw ShapeError("depthwise_conv2d: weight has " + std::to_string(ws[0]) + " channels, input has " +
                     std::to_string(C));
  }
  if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("depthwise_conv2d: kernel sides must be odd");

  // Visits every (plane, tap, output row) with the valid column range.
  auto for_each_tap = [=](auto&& body) {
    const Index ph = kh / 2, pw = kw / 2;
    for (Index b = 0; b < B; ++b) {
      for (Index c = 0; c < C; ++c) {
        const Index plane = (b * C + c) * H * W;
        for (Index i = 0; i < kh; ++i) {
          for (Index j = 0; j < kw; ++j) {
            const Index tap = (c * kh + i) * kw + j;
            const Index dx = j - pw;
            const Index w_lo = std::min<Index>(W, std::max<Index>(0, -dx));
            const Index w_hi = std::max<Index>(w_lo, std::min<Index>(W, W - dx));
            for (Index h = 0; h < H; ++h) {
              const Index sh = h + i - ph;
              if (sh < 0 || sh >= H) continue;
              body(tap, plane + h * W, plane + sh * W + dx, w_lo, w_hi);
            }
          }
        }
      }
    }
  };

  Buffer<T> out(x.data().size(), T(0));
  {
    const T* xv = x.data().data();
    const T* wv = weight.data().data();
    T* ov = out.data();
    for_each_tap([&](Index tap, Index out_row, Index in_row, Index lo, Index hi) {
      const T w = wv[tap];
      for (Index k = lo; k < hi; ++k) ov[out_row + k] += w * xv[in_row + k];
    });
  }
  return record_op<T>("depthwise_conv2d", xs, std::move(out), {x, weight}, [for_each_tap](GradContext<T>& ctx) {
    const T* g = ctx.grad_output().data();
    const T* xv = ctx.input(0).data();
    const T* wv = ctx.input(1).data();
    T* gx = ctx.needs_grad(0) ? ctx.grad_input(0).data() : nullptr;
    T* gw = ctx.needs_grad(1) ? ctx.grad_input(1).data() : nullptr;
    for_each_tap([&](Index tap, Index out_row, Index in_row, Index lo, Index hi) {
      if (gx) {
        const T w = wv[tap];
        for (Index k = lo; k < hi; ++k) gx[in_row + k] += w * g[out_row + k];
      }
      if (gw) {
        T acc = 0;
        for (Index k = lo; k < hi; ++k) acc += g[out_row + k] * xv[in_row + k];
        gw[tap] += acc;
      }
    });
  });
}

template <Real T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                     Tensor<T>& running_var, Mode mode, BatchNormOptions options) {
  require_rank(x.shape(), 4, "batch_norm input");
  const auto& xs = x.shape();
  const Index B = xs[0], C = xs[1], P = xs[2] * xs[3];
  const Shape cshape{C};
  if (gamma.shape() != cshape || beta.shape() != cshape || running_mean.shape() != cshape ||
      running_var.shape() != cshape) {
    throw ShapeError("batch_norm: parameters must have shape (" + std::to_string(C) + ")");
  }
  const Index count = B * P;
  if (count == 0) throw ShapeError("batch_norm: empty batch");

  Buffer<T> mean_c(static_cast<std::size_t>(C));
  Buffer<T> invstd_c(static_cast<std::size_t>(C));
  const auto xv = x.data();
  if (mode == Mode::train) {
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (Index c = 0; c < C; ++c) {
      double s = 0;
      for (Index b = 0; b < B; ++b) {
        const auto plane = as_array(xv.subspan(static_cast<std::size_t>((b * C + c) * P), static_cast<std::size_t>(P)));
        s += static_cast<double>(plane.template cast<double>().sum());
      }
      const double mu = s / static_cast<double>(count);
      double ss = 0;
      for (Index b = 0; b < B; ++b) {
        const auto plane = as_array(xv.subspan(static_cast<std::size_t>((b * C + c) * P), static_cast<std::size_t>(P)));
        ss += (plane.template cast<double>() - mu).square().sum();
      }
      const double var = ss / static_cast<double>(count);
      mean_c[static_cast<std::size_t>(c)] = static_cast<T>(mu);
      invstd_c[static_cast<std::size_t>(c)] = static_cast<T>(1.0 / std::sqrt(var + options.eps));
      const auto ci = static_cast<std::size_t>(c);
      rm[ci] = static_cast<T>(options.momentum * rm[ci] + (1.0 - options.momentum) * mu);
      rv[ci] = static_cast<T>(options.momentum * rv[ci] + (1.0 - options.momentum) * var);
    }
  } else {
    for (Index c = 0; c < C; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      mean_c[ci] = running_mean.data()[ci];
      invstd_c[ci] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var.data()[ci]) + options.eps));
    }
  }

  Buffer<T> xhat(xv.size());
  Buffer<T> out(xv.size());
  const auto gv = gamma.data();
  const auto bv = beta.data();
  for (Index b = 0; b < B; ++b) {
    for (Index c = 0; c < C; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      const auto off = static_cast<std::size_t>((b * C + c) * P);
      for (Index p = 0; p < P; ++p) {
        const auto i = off + static_cast<std::size_t>(p);
        xhat[i] = (xv[i] - mean_c[ci]) * invstd_c[ci];
        out[i] = gv[ci] * xhat[i] + bv[ci];
      }
    }
  }

  return record_op<T>(
      "batch_norm", xs, std::move(out), {x, gamma, beta},
      [B, C, P, mode, xhat = std::move(xhat), invstd_c = std::move(invstd_c)](GradContext<T>& ctx) {
        const auto g = ctx.grad_output();
        const auto gv = ctx.input(1);
        const T m = static_cast<T>(B * P);
        for (Index c = 0; c < C; ++c) {
          const auto ci = static_cast<std::size_t>(c);
          T sum_g = 0;
          T sum_g_xhat = 0;
          for (Index b = 0; b < B; ++b) {
            const auto off = static_cast<std::size_t>((b * C + c) * P);
            for (Index p = 0; p < P; ++p) {
              const auto i = off + static_cast<std::size_t>(p);
              sum_g += g[i];
              sum_g_xhat += g[i] * xhat[i];
            }
          }
          if (ctx.needs_grad(1)) ctx.grad_input(1)[ci] += sum_g_xhat;
          if (ctx.needs_grad(2)) ctx.grad_input(2)[ci] += sum_g;
          if (!ctx.needs_grad(0)) continue;
          auto gx = ctx.grad_input(0);
          const T k = gv[ci] * invstd_c[ci];
          for (Index b = 0; b < B; ++b) {
            const auto off = static_cast<std::size_t>((b * C + c) * P);
            for (Index p = 0; p < P; ++p) {
              const auto i = off + static_cast<std::size_t>(p);
              if (mode == Mode::train) {
                gx[i] += k * (g[i] - sum_g / m - xhat[i] * sum_g_xhat / m);
              } else {
                gx[i] += k * g[i];
              }
            }
          }
        }
      });
}

template <Real T>
Tensor<T> max_pool2x2(const Tensor<T>& x) {
  require_rank(x.shape(), 4, "max_pool2x2");
  const auto& xs = x.shape();
  const Index planes = xs[0] * xs[1], H = xs[2], W = xs[3];
  if (H < 2 || W < 2) throw ShapeError("max_pool2x2: spatial dims must be at least 2, got " + to_string(xs));
  const Index Ho = H / 2, Wo = W / 2;
  const auto xv = x.data();
  Buffer<T> out(static_cast<std::size_t>(planes * Ho * Wo));
  std::vector<Index> argmax(out.size());
  for (Index pl = 0; pl < planes; ++pl) {
    for (Index h = 0; h < Ho; ++h) {
      for (Index w = 0; w < Wo; ++w) {
        const Index o = (pl * Ho + h) * Wo + w;
        Index best = (pl * H + 2 * h) * W + 2 * w;
        for (Index di = 0; di < 2; ++di) {
          for (Index dj = 0; dj < 2; ++dj) {
            const Index idx = (pl * H + 2 * h + di) * W + 2 * w + dj;
            if (xv[static_cast<std::size_t>(idx)] > xv[static_cast<std::size_t>(best)]) best = idx;
          }
        }
        out[static_cast<std::size_t>(o)] = xv[static_cast<std::size_t>(best)];
        argmax[static_cast<std::size_t>(o)] = best;
      }
    }
  }
  if (auto* sig = BranchSignature::active()) {
    for (Index a : argmax) sig->mix(static_cast<std::uint64_t>(a));
  }
  return record_op<T>("max_pool2x2", Shape{xs[0], xs[1], Ho, Wo}, std::move(out), {x},
                      [argmax = std::move(argmax)](GradContext<T>& ctx) {
                        const auto g = ctx.grad_output();
                        auto gx = ctx.grad_input(0);
                        for (std::size_t o = 0; o < g.size(); ++o) gx[static_cast<std::size_t>(argmax[o])] += g[o];
                      });
}

template <Real T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  require_rank(x.shape(), 4, "upsample_nearest2x");
  const auto& xs = x.shape();
  const Index planes = xs[0] * xs[1], H = xs[2], W = xs[3];
  const auto xv = x.data();
  Buffer<T> out(static_cast<std::size_t>(planes * 4 * H * W));
  for (Index pl = 0; pl < planes; ++pl) {
    for (Index h = 0; h < 2 * H; ++h) {
      for (Index w = 0; w < 2 * W; ++w) {
        out[static_cast<std::size_t>((pl * 2 * H + h) * 2 * W + w)] =
            xv[static_cast<std::size_t>((pl * H + h / 2) * W + w / 2)];
      }
    }
  }
  return record_op<T>("upsample_nearest2x", Shape{xs[0], xs[1], 2 * H, 2 * W}, std::move(out), {x},
                      [planes, H, W](GradContext<T>& ctx) {
                        const auto g = ctx.grad_output();
                        auto gx = ctx.grad_input(0);
                        for (Index pl = 0; pl < planes; ++pl) {
                          for (Index h = 0; h < 2 * H; ++h) {
                            for (Index w = 0; w < 2 * W; ++w) {
                              gx[static_cast<std::size_t>((pl * H + h / 2) * W + w / 2)] +=
                                  g[static_cast<std::size_t>((pl * 2 * H + h) * 2 * W + w)];
                            }
                          }
                        }
                      });
}

template <Real T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 4, "concat_channels");
  require_rank(b.shape(), 4, "concat_channels");
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3]) {
    throw ShapeError("concat_channels: batch/spatial mismatch " + to_string(as) + " vs " + to_string(bs));
  }
  const Index B = as[0];
  const Index a_block = as[1] * as[2] * as[3];
  const Index b_block = bs[1] * bs[2] * bs[3];
  Buffer<T> out(static_cast<std::size_t>(B * (a_block + b_block)));
  const auto av = a.data();
  const auto bv = b.data();
  for (Index i = 0; i < B; ++i) {
    std::copy_n(av.begin() + i * a_block, a_block, out.begin() + i * (a_block + b_block));
    std::copy_n(bv.begin() + i * b_block, b_block, out.begin() + i * (a_block + b_block) + a_block);
  }
  return record_op<T>("concat_channels", Shape{B, as[1] + bs[1], as[2], as[3]}, std::move(out), {a, b},
                      [B, a_block, b_block](GradContext<T>& ctx) {
                        const auto g = ctx.grad_output();
                        for (Index i = 0; i < B; ++i) {
                          const auto base = static_cast<std::size_t>(i * (a_block + b_block));
                          if (ctx.needs_grad(0)) {
                            auto ga = ctx.grad_input(0);
                            for (Index k = 0; k < a_block; ++k) ga[static_cast<std::size_t>(i * a_block + k)] += g[base + static_cast<std::size_t>(k)];
                          }
                          if (ctx.needs_grad(1)) {
                            auto gb = ctx.grad_input(1);
                            for (Index k = 0; k < b_block; ++k)
                              gb[static_cast<std::size_t>(i * b_block + k)] += g[base + static_cast<std::size_t>(a_block + k)];
                          }
                        }
                      });
}

#define XNET_INSTANTIATE_OPS(T)                                                                             \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                               \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                               \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                               \
  template Tensor<T> scale(const Tensor<T>&, T);                                                            \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                                       \
  template Tensor<T> relu(const Tensor<T>&);                                                                \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                             \
  template Tensor<T> log(const Tensor<T>&);                                                                 \
  template Tensor<T> sum(const Tensor<T>&);                                                                 \
  template Tensor<T> mean(const Tensor<T>&);                                                                \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                      \
  template Tensor<T> transpose(const Tensor<T>&);                                                           \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> softmax(const Tensor<T>&, Index);                                                      \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> depthwise_conv2d(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&, Tensor<T>&, \
                                Mode, BatchNormOptions);                                                    \
  template Tensor<T> max_pool2x2(const Tensor<T>&);                                                         \
  template Tensor<T> upsample_nearest2x(const Tensor<T>&);                                                  \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);

XNET_INSTANTIATE_OPS(float)
XNET_INSTANTIATE_OPS(double)

}  // namespace xnet
