#include "fvae/warp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "fvae/binary_io.hpp"

namespace fvae {
namespace {

// One bilinear tap along an axis: neighbors i0 and i0 + 1 with weight `frac`
// on the second. `live` is false when the coordinate was clamped, which zeroes
// its derivative.
template <typename T>
struct AxisTap {
  std::size_t i0;
  T frac;
  bool live;
};

template <typename T>
AxisTap<T> axis_tap(T normalized, std::size_t extent) {
  const T last = static_cast<T>(extent - 1);
  T pos = (normalized + T(1)) * T(0.5) * last;
  bool live = true;
  if (pos < T(0)) {
    pos = T(0);
    live = false;
  } else if (pos > last) {
    pos = last;
    live = false;
  }
  // Positions within rounding distance of a pixel centre sample that pixel
  // exactly, so the identity grid reproduces the source.
  const T nearest = std::round(pos);
  const T tol = T(4) * std::numeric_limits<T>::epsilon() * std::max(last, T(1));
  if (std::abs(pos - nearest) <= tol) pos = nearest;
  std::size_t i0 = static_cast<std::size_t>(std::floor(pos));
  i0 = std::min(i0, extent - 2);
  return {i0, pos - static_cast<T>(i0), live};
}

template <typename T>
T sample_plane(const T* plane, std::size_t width, const AxisTap<T>& tx, const AxisTap<T>& ty) {
  const T* r0 = plane + ty.i0 * width + tx.i0;
  const T* r1 = r0 + width;
  const T top = (T(1) - tx.frac) * r0[0] + tx.frac * r0[1];
  const T bottom = (T(1) - tx.frac) * r1[0] + tx.frac * r1[1];
  return (T(1) - ty.frac) * top + ty.frac * bottom;
}

void require_sampleable(std::size_t height, std::size_t width) {
  if (height < 2 || width < 2) {
    throw std::invalid_argument("bilinear_sample: source extents must be >= 2, got " +
                                std::to_string(height) + "x" + std::to_string(width));
  }
}

}  // namespace

FlowField::FlowField(Tensor c) : coords(std::move(c)) {
  if (coords.rank() != 3 || coords.dim(2) != 2) {
    throw std::invalid_argument("FlowField: expected H x W x 2 coordinates, got " +
                                shape_string(coords.shape()));
  }
}

double pixel_to_normalized(double i, std::size_t extent) {
  return 2.0 * i / static_cast<double>(extent - 1) - 1.0;
}

FlowField identity_flow(std::size_t height, std::size_t width) {
  Tensor c(Shape{height, width, 2});
  for (std::size_t r = 0; r < height; ++r)
    for (std::size_t q = 0; q < width; ++q) {
      c.at(r, q, 0) = width > 1 ? static_cast<float>(pixel_to_normalized(q, width)) : 0.0f;
      c.at(r, q, 1) = height > 1 ? static_cast<float>(pixel_to_normalized(r, height)) : 0.0f;
    }
  return FlowField(std::move(c));
}

FlowField flow_from_batch(const Tensor& flows, std::size_t n) {
  if (flows.rank() != 4 || flows.dim(1) != 2) {
    throw std::invalid_argument("flow_from_batch: expected [N, 2, H, W], got " +
                                shape_string(flows.shape()));
  }
  const std::size_t H = flows.dim(2), W = flows.dim(3);
  Tensor c(Shape{H, W, 2});
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t q = 0; q < W; ++q) {
      c.at(r, q, 0) = flows.at(n, 0, r, q);
      c.at(r, q, 1) = flows.at(n, 1, r, q);
    }
  return FlowField(std::move(c));
}

Tensor flows_to_batch(std::span<const FlowField> flows) {
  if (flows.empty()) throw std::invalid_argument("flows_to_batch: no flows");
  const std::size_t H = flows[0].height(), W = flows[0].width();
  Tensor out(Shape{flows.size(), 2, H, W});
  for (std::size_t n = 0; n < flows.size(); ++n) {
    if (flows[n].height() != H || flows[n].width() != W) {
      throw std::invalid_argument("flows_to_batch: flow extents differ");
    }
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t q = 0; q < W; ++q) {
        out.at(n, 0, r, q) = flows[n].x(r, q);
        out.at(n, 1, r, q) = flows[n].y(r, q);
      }
  }
  return out;
}

Tensor denormalize_flow(const FlowField& flow, std::size_t src_width, std::size_t src_height) {
  if (src_width < 2 || src_height < 2) {
    throw std::invalid_argument("denormalize_flow: source extents must be >= 2");
  }
  Tensor out(flow.coords.shape());
  const float sx = 0.5f * static_cast<float>(src_width - 1);
  const float sy = 0.5f * static_cast<float>(src_height - 1);
  for (std::size_t r = 0; r < flow.height(); ++r)
    for (std::size_t q = 0; q < flow.width(); ++q) {
      out.at(r, q, 0) = (flow.x(r, q) + 1.0f) * sx;
      out.at(r, q, 1) = (flow.y(r, q) + 1.0f) * sy;
    }
  return out;
}

Tensor bilinear_sample(const Tensor& source, const FlowField& flow) {
  if (source.rank() != 3) {
    throw std::invalid_argument("bilinear_sample: expected CHW source, got " +
                                shape_string(source.shape()));
  }
  const std::size_t C = source.dim(0), H = source.dim(1), W = source.dim(2);
  require_sampleable(H, W);
  const std::size_t OH = flow.height(), OW = flow.width();
  Tensor out(Shape{C, OH, OW});
  for (std::size_t r = 0; r < OH; ++r)
    for (std::size_t q = 0; q < OW; ++q) {
      const auto tx = axis_tap(flow.x(r, q), W);
      const auto ty = axis_tap(flow.y(r, q), H);
      for (std::size_t c = 0; c < C; ++c) {
        out.at(c, r, q) = sample_plane(source.data().data() + c * H * W, W, tx, ty);
      }
    }
  return out;
}

template <typename T>
Var bilinear_sample(Graph<T>& g, Var source, Var flow) {
  const auto& s = g.value(source);
  const auto& f = g.value(flow);
  if (s.rank() != 4 || f.rank() != 4 || f.dim(1) != 2 || f.dim(0) != s.dim(0)) {
    throw std::invalid_argument("bilinear_sample: expected source [N,C,H,W] and flow [N,2,H',W'], "
                                "got " + shape_string(s.shape()) + " and " +
                                shape_string(f.shape()));
  }
  const std::size_t N = s.dim(0), C = s.dim(1), H = s.dim(2), W = s.dim(3);
  require_sampleable(H, W);
  const std::size_t OH = f.dim(2), OW = f.dim(3), P = OH * OW;
  BasicTensor<T> out(Shape{N, C, OH, OW});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t p = 0; p < P; ++p) {
      const auto tx = axis_tap(f[(n * 2 + 0) * P + p], W);
      const auto ty = axis_tap(f[(n * 2 + 1) * P + p], H);
      for (std::size_t c = 0; c < C; ++c) {
        out[(n * C + c) * P + p] = sample_plane(s.data().data() + (n * C + c) * H * W, W, tx, ty);
      }
    }

  return g.record(std::move(out), {source, flow},
                  [source, flow, N, C, H, W, P](Graph<T>& g, std::size_t self) {
                    const auto& dy = g.grad(Var{self});
                    const auto& s = g.value(source);
                    const auto& f = g.value(flow);
                    const bool need_s = g.requires_grad(source);
                    const bool need_f = g.requires_grad(flow);
                    T* ds = need_s ? g.grad_buffer(source).data().data() : nullptr;
                    T* df = need_f ? g.grad_buffer(flow).data().data() : nullptr;
                    const T half_w = T(0.5) * static_cast<T>(W - 1);
                    const T half_h = T(0.5) * static_cast<T>(H - 1);
                    for (std::size_t n = 0; n < N; ++n)
                      for (std::size_t p = 0; p < P; ++p) {
                        const auto tx = axis_tap(f[(n * 2 + 0) * P + p], W);
                        const auto ty = axis_tap(f[(n * 2 + 1) * P + p], H);
                        T gx = 0, gy = 0;
                        for (std::size_t c = 0; c < C; ++c) {
                          const std::size_t base = (n * C + c) * H * W + ty.i0 * W + tx.i0;
                          const T d = dy[(n * C + c) * P + p];
                          if (need_s) {
                            ds[base] += d * (T(1) - tx.frac) * (T(1) - ty.frac);
                            ds[base + 1] += d * tx.frac * (T(1) - ty.frac);
                            ds[base + W] += d * (T(1) - tx.frac) * ty.frac;
                            ds[base + W + 1] += d * tx.frac * ty.frac;
                          }
                          if (need_f) {
                            const T s00 = s[base], s01 = s[base + 1];
                            const T s10 = s[base + W], s11 = s[base + W + 1];
                            gx += d * ((T(1) - ty.frac) * (s01 - s00) + ty.frac * (s11 - s10));
                            gy += d * ((T(1) - tx.frac) * (s10 - s00) + tx.frac * (s11 - s01));
                          }
                        }
                        if (need_f) {
                          if (tx.live) df[(n * 2 + 0) * P + p] += gx * half_w;
                          if (ty.live) df[(n * 2 + 1) * P + p] += gy * half_h;
                        }
                      }
                  });
}

template Var bilinear_sample<float>(Graph<float>&, Var, Var);
template Var bilinear_sample<double>(Graph<double>&, Var, Var);

FlowField upsample_flow(const FlowField& flow, int factor) {
  if (factor < 1) throw std::invalid_argument("upsample_flow: factor must be >= 1");
  const std::size_t H = flow.height(), W = flow.width();
  const std::size_t f = static_cast<std::size_t>(factor);
  const std::size_t OH = H * f, OW = W * f;
  auto source_pos = [](std::size_t i, std::size_t in, std::size_t out) {
    return out > 1 ? static_cast<double>(i) * static_cast<double>(in - 1) /
                         static_cast<double>(out - 1)
                   : 0.0;
  };
  Tensor c(Shape{OH, OW, 2});
  for (std::size_t r = 0; r < OH; ++r) {
    const double v = source_pos(r, H, OH);
    const std::size_t r0 = std::min(static_cast<std::size_t>(v), H > 1 ? H - 2 : 0);
    const std::size_t r1 = std::min(r0 + 1, H - 1);
    const double wy = v - static_cast<double>(r0);
    for (std::size_t q = 0; q < OW; ++q) {
      const double u = source_pos(q, W, OW);
      const std::size_t q0 = std::min(static_cast<std::size_t>(u), W > 1 ? W - 2 : 0);
      const std::size_t q1 = std::min(q0 + 1, W - 1);
      const double wx = u - static_cast<double>(q0);
      for (std::size_t k = 0; k < 2; ++k) {
        const double top = (1 - wx) * flow.coords.at(r0, q0, k) + wx * flow.coords.at(r0, q1, k);
        const double bot = (1 - wx) * flow.coords.at(r1, q0, k) + wx * flow.coords.at(r1, q1, k);
        c.at(r, q, k) = static_cast<float>((1 - wy) * top + wy * bot);
      }
    }
  }
  return FlowField(std::move(c));
}

namespace {

float normalized_from_displacement(std::size_t index, float disp, std::size_t extent) {
  return static_cast<float>(pixel_to_normalized(static_cast<double>(index) + disp, extent));
}

// Picks the stored displacement that decodes back to `normalized` bit-exactly,
// preferring the coarsest dyadic value (so whole-pixel shifts store as whole
// numbers), then nearby floats.
float encode_displacement(std::size_t index, float normalized, std::size_t extent) {
  const double abs = (static_cast<double>(normalized) + 1.0) * 0.5 * static_cast<double>(extent - 1);
  const double exact = abs - static_cast<double>(index);
  for (int bits = 0; bits <= 30; ++bits) {
    const double q = std::ldexp(std::round(std::ldexp(exact, bits)), -bits);
    const float candidate = static_cast<float>(q) + 0.0f;  // no negative zero
    if (normalized_from_displacement(index, candidate, extent) == normalized) return candidate;
  }
  const float guess = static_cast<float>(exact);
  float up = guess, down = guess;
  for (int step = 0; step < 64; ++step) {
    if (normalized_from_displacement(index, up, extent) == normalized) return up;
    if (normalized_from_displacement(index, down, extent) == normalized) return down;
    up = std::nextafter(up, std::numeric_limits<float>::infinity());
    down = std::nextafter(down, -std::numeric_limits<float>::infinity());
  }
  return guess;
}

}  // namespace

std::vector<std::uint8_t> encode_flow(const FlowField& flow, std::size_t src_width,
                                      std::size_t src_height) {
  if (src_width < 2 || src_height < 2) {
    throw std::invalid_argument("export_flow: source extents must be >= 2");
  }
  ByteWriter w;
  w.f32(kFlowMagic);
  w.i32(static_cast<std::int32_t>(flow.width()));
  w.i32(static_cast<std::int32_t>(flow.height()));
  for (std::size_t r = 0; r < flow.height(); ++r)
    for (std::size_t q = 0; q < flow.width(); ++q) {
      w.f32(encode_displacement(q, flow.x(r, q), src_width));
      w.f32(encode_displacement(r, flow.y(r, q), src_height));
    }
  return w.take();
}

FlowField decode_flow(std::span<const std::uint8_t> bytes, std::size_t src_width,
                      std::size_t src_height) {
  if (src_width < 2 || src_height < 2) {
    throw std::invalid_argument("import_flow: source extents must be >= 2");
  }
  ByteReader in(bytes);
  if (in.f32() != kFlowMagic) throw ParseError("flow file: bad magic", 0);
  const std::size_t dims_at = in.offset();
  const std::int32_t width = in.i32();
  const std::int32_t height = in.i32();
  if (width <= 0 || height <= 0) throw ParseError("flow file: non-positive extents", dims_at);
  const std::size_t W = static_cast<std::size_t>(width), H = static_cast<std::size_t>(height);
  if (in.remaining() / 8 < H * W) {
    throw ParseError("flow file: truncated payload, expected " + std::to_string(H * W * 8) +
                         " bytes of displacements",
                     in.offset() + in.remaining());
  }
  Tensor c(Shape{H, W, 2});
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t q = 0; q < W; ++q) {
      const std::size_t at = in.offset();
      const float dx = in.f32();
      const float dy = in.f32();
      if (!std::isfinite(dx) || !std::isfinite(dy)) {
        throw ParseError("flow file: non-finite displacement", at);
      }
      c.at(r, q, 0) = normalized_from_displacement(q, dx, src_width);
      c.at(r, q, 1) = normalized_from_displacement(r, dy, src_height);
    }
  if (in.remaining() != 0) throw ParseError("flow file: trailing bytes", in.offset());
  return FlowField(std::move(c));
}

void export_flow(const FlowField& flow, std::size_t src_width, std::size_t src_height,
                 const std::filesystem::path& path) {
  const auto bytes = encode_flow(flow, src_width, src_height);
  write_file_atomic(path, bytes);
}

FlowField import_flow(const std::filesystem::path& path, std::size_t src_width,
                      std::size_t src_height) {
  const auto bytes = read_file_bytes(path);
  return decode_flow(bytes, src_width, src_height);
}

}  // namespace fvae
