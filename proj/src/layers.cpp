#include "fvae/layers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fvae::nn {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kernel, stride, pad;
  std::size_t out_h, out_w;

  std::size_t patch() const { return channels * kernel * kernel; }
  std::size_t pixels() const { return out_h * out_w; }
};

// cols is [C*k*k, out_h*out_w].
template <typename T>
void im2col(const T* x, const ConvGeometry& geo, T* cols) {
  const std::ptrdiff_t H = geo.height, W = geo.width;
  for (std::size_t c = 0; c < geo.channels; ++c) {
    const T* plane = x + c * geo.height * geo.width;
    for (std::size_t ky = 0; ky < geo.kernel; ++ky) {
      for (std::size_t kx = 0; kx < geo.kernel; ++kx) {
        T* row = cols + ((c * geo.kernel + ky) * geo.kernel + kx) * geo.pixels();
        for (std::size_t oy = 0; oy < geo.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * geo.stride + ky) -
                                    static_cast<std::ptrdiff_t>(geo.pad);
          T* dst = row + oy * geo.out_w;
          if (iy < 0 || iy >= H) {
            std::fill_n(dst, geo.out_w, T(0));
            continue;
          }
          for (std::size_t ox = 0; ox < geo.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * geo.stride + kx) -
                                      static_cast<std::ptrdiff_t>(geo.pad);
            dst[ox] = (ix < 0 || ix >= W) ? T(0) : plane[iy * W + ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& geo, T* dx) {
  const std::ptrdiff_t H = geo.height, W = geo.width;
  for (std::size_t c = 0; c < geo.channels; ++c) {
    T* plane = dx + c * geo.height * geo.width;
    for (std::size_t ky = 0; ky < geo.kernel; ++ky) {
      for (std::size_t kx = 0; kx < geo.kernel; ++kx) {
        const T* row = cols + ((c * geo.kernel + ky) * geo.kernel + kx) * geo.pixels();
        for (std::size_t oy = 0; oy < geo.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * geo.stride + ky) -
                                    static_cast<std::ptrdiff_t>(geo.pad);
          if (iy < 0 || iy >= H) continue;
          const T* src = row + oy * geo.out_w;
          for (std::size_t ox = 0; ox < geo.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * geo.stride + kx) -
                                      static_cast<std::ptrdiff_t>(geo.pad);
            if (ix >= 0 && ix < W) plane[iy * W + ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
void accumulate(BasicTensor<T>& dst, const BasicTensor<T>& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               Padding padding) {
  const std::size_t pad = padding == Padding::same ? kernel / 2 : 0;
  if (in + 2 * pad < kernel) {
    throw std::invalid_argument("conv2d: extent " + std::to_string(in) +
                                " too small for kernel " + std::to_string(kernel));
  }
  return (in + 2 * pad - kernel) / stride + 1;
}

template <typename T>
Var conv2d(Graph<T>& g, Var input, Var kernels, std::optional<Var> bias, std::size_t stride,
           Padding padding) {
  const auto& x = g.value(input);
  const auto& w = g.value(kernels);
  require(stride >= 1, "conv2d: stride must be >= 1");
  require(x.rank() == 4 && w.rank() == 4 && w.dim(2) == w.dim(3),
          "conv2d: expected NCHW input and OCkk kernels, got input " + shape_string(x.shape()) +
              " and kernels " + shape_string(w.shape()));
  require(x.dim(1) == w.dim(1), "conv2d: channel mismatch between input " +
                                    shape_string(x.shape()) + " and kernels " +
                                    shape_string(w.shape()));
  if (bias) {
    require(g.value(*bias).size() == w.dim(0),
            "conv2d: bias " + shape_string(g.value(*bias).shape()) + " does not match kernels " +
                shape_string(w.shape()));
  }

  ConvGeometry geo{x.dim(1), x.dim(2), x.dim(3), w.dim(2), stride,
                   padding == Padding::same ? w.dim(2) / 2 : 0, 0, 0};
  geo.out_h = conv_output_extent(geo.height, geo.kernel, stride, padding);
  geo.out_w = conv_output_extent(geo.width, geo.kernel, stride, padding);
  const std::size_t batch = x.dim(0), out_c = w.dim(0);
  const std::size_t in_per = geo.channels * geo.height * geo.width;
  const std::size_t out_per = out_c * geo.pixels();

  BasicTensor<T> out(Shape{batch, out_c, geo.out_h, geo.out_w});
  std::vector<T> cols(geo.patch() * geo.pixels());
  ConstMapMat<T> wm(w.data().data(), out_c, geo.patch());
  for (std::size_t n = 0; n < batch; ++n) {
    im2col(x.data().data() + n * in_per, geo, cols.data());
    ConstMapMat<T> cm(cols.data(), geo.patch(), geo.pixels());
    MapMat<T> om(out.data().data() + n * out_per, out_c, geo.pixels());
    om.noalias() = wm * cm;
    if (bias) {
      const auto& b = g.value(*bias);
      for (std::size_t o = 0; o < out_c; ++o) om.row(o).array() += b[o];
    }
  }

  std::vector<Var> inputs{input, kernels};
  if (bias) inputs.push_back(*bias);
  return g.record(std::move(out), inputs, [input, kernels, bias, geo, batch, out_c, in_per,
                                           out_per](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(Var{self});
    const auto& x = g.value(input);
    const auto& w = g.value(kernels);
    ConstMapMat<T> wm(w.data().data(), out_c, geo.patch());
    std::vector<T> cols(geo.patch() * geo.pixels());
    RowMat<T> dw = RowMat<T>::Zero(out_c, geo.patch());
    const bool need_w = g.requires_grad(kernels);
    const bool need_x = g.requires_grad(input);
    T* dx = need_x ? g.grad_buffer(input).data().data() : nullptr;
    for (std::size_t n = 0; n < batch; ++n) {
      ConstMapMat<T> dym(dy.data().data() + n * out_per, out_c, geo.pixels());
      if (need_w) {
        im2col(x.data().data() + n * in_per, geo, cols.data());
        ConstMapMat<T> cm(cols.data(), geo.patch(), geo.pixels());
        dw.noalias() += dym * cm.transpose();
      }
      if (need_x) {
        MapMat<T> dcols(cols.data(), geo.patch(), geo.pixels());
        dcols.noalias() = wm.transpose() * dym;
        col2im_add(cols.data(), geo, dx + n * in_per);
      }
    }
    if (need_w) {
      MapMat<T> dwm(g.grad_buffer(kernels).data().data(), out_c, geo.patch());
      dwm += dw;
    }
    if (bias && g.requires_grad(*bias)) {
      auto& db = g.grad_buffer(*bias);
      // plain loop: Eigen's vectorized sum peels by address, which makes the
      // rounding depend on where the buffer happens to be allocated
      const std::size_t pixels = geo.pixels();
      for (std::size_t n = 0; n < batch; ++n) {
        const T* rows = dy.data().data() + n * out_per;
        for (std::size_t o = 0; o < out_c; ++o) {
          T s = 0;
          for (std::size_t i = 0; i < pixels; ++i) s += rows[o * pixels + i];
          db[o] += s;
        }
      }
    }
  });
}

template <typename T>
Var batch_norm(Graph<T>& g, Var x, Var gamma, Var beta, BatchNormState<T>& state, Mode mode) {
  const auto& xv = g.value(x);
  require(xv.rank() == 4, "batch_norm: expected NCHW input, got " + shape_string(xv.shape()));
  const std::size_t N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  require(g.value(gamma).size() == C && g.value(beta).size() == C,
          "batch_norm: gamma/beta length must equal channel count " + std::to_string(C));
  require(state.running_mean.size() == C && state.running_var.size() == C,
          "batch_norm: running statistics do not match channel count " + std::to_string(C));
  if (mode == Mode::train && N < 2) {
    throw std::invalid_argument("batch_norm: train mode needs batch size >= 2, got " +
                                std::to_string(N));
  }

  const auto& gm = g.value(gamma);
  const auto& bt = g.value(beta);
  const T count = static_cast<T>(N * HW);
  BasicTensor<T> out(xv.shape());
  BasicTensor<T> xhat(xv.shape());
  std::vector<T> inv_std(C);
  for (std::size_t c = 0; c < C; ++c) {
    T mean, var;
    if (mode == Mode::train) {
      T s = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < HW; ++i) s += xv[(n * C + c) * HW + i];
      mean = s / count;
      T ss = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < HW; ++i) {
          const T d = xv[(n * C + c) * HW + i] - mean;
          ss += d * d;
        }
      var = ss / count;
      state.running_mean[c] = state.momentum * state.running_mean[c] + (1 - state.momentum) * mean;
      state.running_var[c] = state.momentum * state.running_var[c] + (1 - state.momentum) * var;
    } else {
      mean = state.running_mean[c];
      var = state.running_var[c];
    }
    inv_std[c] = T(1) / std::sqrt(var + state.epsilon);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t k = (n * C + c) * HW + i;
        xhat[k] = (xv[k] - mean) * inv_std[c];
        out[k] = gm[c] * xhat[k] + bt[c];
      }
  }

  return g.record(std::move(out), {x, gamma, beta},
                  [x, gamma, beta, mode, N, C, HW, xhat = std::move(xhat),
                   inv_std = std::move(inv_std)](Graph<T>& g, std::size_t self) {
                    const auto& dy = g.grad(Var{self});
                    const auto& gm = g.value(gamma);
                    const T count = static_cast<T>(N * HW);
                    for (std::size_t c = 0; c < C; ++c) {
                      T sum_dy = 0, sum_dy_xhat = 0;
                      for (std::size_t n = 0; n < N; ++n)
                        for (std::size_t i = 0; i < HW; ++i) {
                          const std::size_t k = (n * C + c) * HW + i;
                          sum_dy += dy[k];
                          sum_dy_xhat += dy[k] * xhat[k];
                        }
                      if (g.requires_grad(gamma)) g.grad_buffer(gamma)[c] += sum_dy_xhat;
                      if (g.requires_grad(beta)) g.grad_buffer(beta)[c] += sum_dy;
                      if (!g.requires_grad(x)) continue;
                      auto& dx = g.grad_buffer(x);
                      const T a = gm[c] * inv_std[c];
                      for (std::size_t n = 0; n < N; ++n)
                        for (std::size_t i = 0; i < HW; ++i) {
                          const std::size_t k = (n * C + c) * HW + i;
                          if (mode == Mode::train) {
                            dx[k] += a * (dy[k] - sum_dy / count - xhat[k] * sum_dy_xhat / count);
                          } else {
                            dx[k] += a * dy[k];
                          }
                        }
                    }
                  });
}

template <typename T>
Var activation(Graph<T>& g, Var x, Activation kind) {
  const auto& xv = g.value(x);
  BasicTensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const T v = xv[i];
    switch (kind) {
      case Activation::relu: out[i] = v > T(0) ? v : T(0); break;
      case Activation::tanh: out[i] = std::tanh(v); break;
      case Activation::sigmoid: out[i] = T(1) / (T(1) + std::exp(-v)); break;
    }
  }
  return g.record(std::move(out), {x}, [x, kind](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(Var{self});
    const auto& y = g.value(Var{self});
    const auto& xv = g.value(x);
    auto& dx = g.grad_buffer(x);
    for (std::size_t i = 0; i < dx.size(); ++i) {
      switch (kind) {
        case Activation::relu: dx[i] += xv[i] > T(0) ? dy[i] : T(0); break;
        case Activation::tanh: dx[i] += dy[i] * (T(1) - y[i] * y[i]); break;
        case Activation::sigmoid: dx[i] += dy[i] * y[i] * (T(1) - y[i]); break;
      }
    }
  });
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  const auto& av = g.value(a);
  const auto& bv = g.value(b);
  require(av.shape() == bv.shape(), "add: shape mismatch " + shape_string(av.shape()) + " vs " +
                                        shape_string(bv.shape()));
  BasicTensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(Var{self});
    if (g.requires_grad(a)) accumulate(g.grad_buffer(a), dy);
    if (g.requires_grad(b)) accumulate(g.grad_buffer(b), dy);
  });
}

template <typename T>
Var sub(Graph<T>& g, Var a, Var b) {
  const auto& av = g.value(a);
  const auto& bv = g.value(b);
  require(av.shape() == bv.shape(), "sub: shape mismatch " + shape_string(av.shape()) + " vs " +
                                        shape_string(bv.shape()));
  BasicTensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(Var{self});
    if (g.requires_grad(a)) accumulate(g.grad_buffer(a), dy);
    if (g.requires_grad(b)) {
      auto& db = g.grad_buffer(b);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] -= dy[i];
    }
  });
}

template <typename T>
Var mul(Graph<T>& g, Var a, Var b) {
  const auto& av = g.value(a);
  const auto& bv = g.value(b);
  require(av.shape() == bv.shape(), "mul: shape mismatch " + shape_string(av.shape()) + " vs " +
                                        shape_string(bv.shape()));
  BasicTensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(Var{self});
    const auto& av = g.value(a);
    const auto& bv = g.value(b);
    if (g.requires_grad(a)) {
      auto& da = g.grad_buffer(a);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i] * bv[i];
    }
    if (g.requires_grad(b)) {
      auto& db = g.grad_buffer(b);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += dy[i] * av[i];
    }
  });
}

template <typename T>
Var scale(Graph<T>& g, Var x, T factor) {
  const auto& xv = g.value(x);
  BasicTensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * xv[i];
  return g.record(std::move(out), {x}, [x, factor](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(Var{self});
    auto& dx = g.grad_buffer(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += factor * dy[i];
  });
}

template <typename T>
Var sum(Graph<T>& g, Var x) {
  const auto& xv = g.value(x);
  T s = 0;
  for (T v : xv.data()) s += v;
  return g.record(BasicTensor<T>::scalar(s), {x}, [x](Graph<T>& g, std::size_t self) {
    const T dy = g.grad(Var{self})[0];
    auto& dx = g.grad_buffer(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy;
  });
}

template <typename T>
Var concat_channels(Graph<T>& g, Var a, Var b) {
  const auto& av = g.value(a);
  const auto& bv = g.value(b);
  require(av.rank() == 4 && bv.rank() == 4 && av.dim(0) == bv.dim(0) && av.dim(2) == bv.dim(2) &&
              av.dim(3) == bv.dim(3),
          "concat_channels: incompatible shapes " + shape_string(av.shape()) + " and " +
              shape_string(bv.shape()));
  const std::size_t N = av.dim(0), HW = av.dim(2) * av.dim(3);
  const std::size_t ca = av.dim(1) * HW, cb = bv.dim(1) * HW;
  BasicTensor<T> out(Shape{N, av.dim(1) + bv.dim(1), av.dim(2), av.dim(3)});
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(av.data().begin() + n * ca, ca, out.data().begin() + n * (ca + cb));
    std::copy_n(bv.data().begin() + n * cb, cb, out.data().begin() + n * (ca + cb) + ca);
  }
  return g.record(std::move(out), {a, b}, [a, b, N, ca, cb](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(Var{self});
    for (std::size_t n = 0; n < N; ++n) {
      if (g.requires_grad(a)) {
        auto& da = g.grad_buffer(a);
        for (std::size_t i = 0; i < ca; ++i) da[n * ca + i] += dy[n * (ca + cb) + i];
      }
      if (g.requires_grad(b)) {
        auto& db = g.grad_buffer(b);
        for (std::size_t i = 0; i < cb; ++i) db[n * cb + i] += dy[n * (ca + cb) + ca + i];
      }
    }
  });
}

template <typename T>
Var upsample_nearest(Graph<T>& g, Var x, std::size_t factor) {
  const auto& xv = g.value(x);
  require(xv.rank() == 4 && factor >= 1, "upsample_nearest: expected NCHW input and factor >= 1");
  const std::size_t NC = xv.dim(0) * xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::size_t OH = H * factor, OW = W * factor;
  BasicTensor<T> out(Shape{xv.dim(0), xv.dim(1), OH, OW});
  for (std::size_t p = 0; p < NC; ++p)
    for (std::size_t y = 0; y < OH; ++y)
      for (std::size_t xx = 0; xx < OW; ++xx)
        out[(p * OH + y) * OW + xx] = xv[(p * H + y / factor) * W + xx / factor];
  return g.record(std::move(out), {x}, [x, NC, H, W, factor](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(Var{self});
    auto& dx = g.grad_buffer(x);
    const std::size_t OH = H * factor, OW = W * factor;
    for (std::size_t p = 0; p < NC; ++p)
      for (std::size_t y = 0; y < OH; ++y)
        for (std::size_t xx = 0; xx < OW; ++xx)
          dx[(p * H + y / factor) * W + xx / factor] += dy[(p * OH + y) * OW + xx];
  });
}

template <typename T>
Var reparameterize(Graph<T>& g, Var mu, Var log_var, const BasicTensor<T>& noise) {
  const auto& m = g.value(mu);
  const auto& lv = g.value(log_var);
  require(m.shape() == lv.shape() && m.shape() == noise.shape(),
          "reparameterize: shapes differ: mu " + shape_string(m.shape()) + ", log_var " +
              shape_string(lv.shape()) + ", noise " + shape_string(noise.shape()));
  BasicTensor<T> out(m.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = m[i] + std::exp(lv[i] / 2) * noise[i];
  return g.record(std::move(out), {mu, log_var}, [mu, log_var, noise](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(Var{self});
    if (g.requires_grad(mu)) accumulate(g.grad_buffer(mu), dy);
    if (g.requires_grad(log_var)) {
      const auto& lv = g.value(log_var);
      auto& dl = g.grad_buffer(log_var);
      for (std::size_t i = 0; i < dl.size(); ++i)
        dl[i] += dy[i] * noise[i] * std::exp(lv[i] / 2) / 2;
    }
  });
}

#define FVAE_INSTANTIATE(T)                                                                   \
  template Var conv2d<T>(Graph<T>&, Var, Var, std::optional<Var>, std::size_t, Padding);     \
  template Var batch_norm<T>(Graph<T>&, Var, Var, Var, BatchNormState<T>&, Mode);            \
  template Var activation<T>(Graph<T>&, Var, Activation);                                     \
  template Var add<T>(Graph<T>&, Var, Var);                                                   \
  template Var sub<T>(Graph<T>&, Var, Var);                                                   \
  template Var mul<T>(Graph<T>&, Var, Var);                                                   \
  template Var scale<T>(Graph<T>&, Var, T);                                                   \
  template Var sum<T>(Graph<T>&, Var);                                                        \
  template Var concat_channels<T>(Graph<T>&, Var, Var);                                       \
  template Var upsample_nearest<T>(Graph<T>&, Var, std::size_t);                              \
  template Var reparameterize<T>(Graph<T>&, Var, Var, const BasicTensor<T>&);

FVAE_INSTANTIATE(float)
FVAE_INSTANTIATE(double)

}  // namespace fvae::nn
