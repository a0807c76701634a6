#include "muse/deform_embed.hpp"

#include <cmath>

namespace muse {

using detail::grad_sink;
using detail::make_result;
using detail::Node;

namespace {

// Four-corner stencil of one bilinear sample.
template <typename T>
struct Corners {
  long y0, x0;
  T ly, lx;
};

template <typename T>
Corners<T> corners(T y, T x) {
  const T fy = std::floor(y), fx = std::floor(x);
  return {static_cast<long>(fy), static_cast<long>(fx), y - fy, x - fx};
}

template <typename T>
T read(const T* plane, long H, long W, long y, long x) {
  return (y >= 0 && y < H && x >= 0 && x < W) ? plane[y * W + x] : T(0);
}

}  // namespace

template <typename T>
T bilinear_sample(std::span<const T> plane, std::size_t H, std::size_t W, T y, T x) {
  const auto c = corners(y, x);
  const long h = static_cast<long>(H), w = static_cast<long>(W);
  const T* p = plane.data();
  return (1 - c.ly) * (1 - c.lx) * read(p, h, w, c.y0, c.x0) +
         (1 - c.ly) * c.lx * read(p, h, w, c.y0, c.x0 + 1) +
         c.ly * (1 - c.lx) * read(p, h, w, c.y0 + 1, c.x0) +
         c.ly * c.lx * read(p, h, w, c.y0 + 1, c.x0 + 1);
}

template <typename T>
DeformEmbedParams<T> DeformEmbedParams<T>::init(std::size_t c_in, std::size_t c_out, Rng& rng) {
  DeformEmbedParams p;
  Conv2dOptions same;
  same.padding = {1, 1};
  p.offset = Conv<T>::make(18, c_in, 3, 3, rng, same);
  p.offset.zero();
  p.depthwise = Conv<T>::depthwise3x3(c_in, rng);
  p.pointwise = Conv<T>::pointwise(c_out, c_in, rng);
  return p;
}

template <typename T>
void DeformEmbedParams<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  offset.collect(prefix + ".offset", out);
  depthwise.collect(prefix + ".dw", out);
  pointwise.collect(prefix + ".pw", out);
}

template <typename T>
Tensor<T> predict_offsets(const Tensor<T>& x, const DeformEmbedParams<T>& p) {
  return p.offset(x);
}

template <typename T>
Tensor<T> deformable_depthwise_conv(const Tensor<T>& x, const Tensor<T>& offsets,
                                    const Tensor<T>& weight,
                                    const std::optional<Tensor<T>>& bias) {
  if (x.ndim() != 4 || weight.ndim() != 4) throw ShapeError("deformable conv: rank-4 tensors expected");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t kh = weight.dim(2), kw = weight.dim(3), taps = kh * kw;
  if (weight.dim(0) != C || weight.dim(1) != 1) {
    throw ShapeError("deformable conv: depthwise weight " + shape_str(weight.shape()) + " for " +
                     std::to_string(C) + " channels");
  }
  if (offsets.shape() != Shape{B, 2 * taps, H, W}) {
    throw ShapeError("deformable conv: offsets " + shape_str(offsets.shape()) + ", expected " +
                     shape_str({B, 2 * taps, H, W}));
  }
  if (bias && bias->shape() != Shape{C}) throw ShapeError("deformable conv: bias shape");
  for (auto v : offsets.data()) {
    if (!std::isfinite(v)) throw NumericError("deformable conv: non-finite offset");
  }
  const long ph = static_cast<long>(kh / 2), pw = static_cast<long>(kw / 2);
  const long Hl = static_cast<long>(H), Wl = static_cast<long>(W);
  const std::size_t plane = H * W;

  std::vector<T> out(B * C * plane, T(0));
  const T* xd = x.data().data();
  const T* od = offsets.data().data();
  const T* wd = weight.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t k = 0; k < taps; ++k) {
      const long ki = static_cast<long>(k / kw), kj = static_cast<long>(k % kw);
      const T* oy = od + (b * 2 * taps + 2 * k) * plane;
      const T* ox = oy + plane;
      for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t w = 0; w < W; ++w) {
          const std::size_t pos = h * W + w;
          const auto cr = corners(static_cast<T>(static_cast<long>(h) + ki - ph) + oy[pos],
                                  static_cast<T>(static_cast<long>(w) + kj - pw) + ox[pos]);
          const T w00 = (1 - cr.ly) * (1 - cr.lx), w01 = (1 - cr.ly) * cr.lx;
          const T w10 = cr.ly * (1 - cr.lx), w11 = cr.ly * cr.lx;
          for (std::size_t c = 0; c < C; ++c) {
            const T* xp = xd + (b * C + c) * plane;
            const T v = w00 * read(xp, Hl, Wl, cr.y0, cr.x0) + w01 * read(xp, Hl, Wl, cr.y0, cr.x0 + 1) +
                        w10 * read(xp, Hl, Wl, cr.y0 + 1, cr.x0) +
                        w11 * read(xp, Hl, Wl, cr.y0 + 1, cr.x0 + 1);
            out[(b * C + c) * plane + pos] += wd[c * taps + k] * v;
          }
        }
      }
    }
    if (bias) {
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t pos = 0; pos < plane; ++pos) out[(b * C + c) * plane + pos] += bias->at(c);
    }
  }

  auto xn = x.node();
  auto on = offsets.node();
  auto wn = weight.node();
  std::vector<detail::NodePtr<T>> inputs{xn, on, wn};
  if (bias) inputs.push_back(bias->node());
  return make_result<T>(
      "deformable_depthwise_conv", x.shape(), std::move(out), std::move(inputs),
      [xn, on, wn, B, C, H, W, kh, kw, has_bias = bias.has_value()](Node<T>& self) {
        auto* gx = grad_sink(self, 0);
        auto* go = grad_sink(self, 1);
        auto* gw = grad_sink(self, 2);
        const std::size_t taps = kh * kw, plane = H * W;
        const long ph = static_cast<long>(kh / 2), pw = static_cast<long>(kw / 2);
        const long Hl = static_cast<long>(H), Wl = static_cast<long>(W);
        const T* xd = xn->data.data();
        const T* od = on->data.data();
        const T* wd = wn->data.data();
        const T* gd = self.grad.data();
        auto scatter = [&](T* gplane, long y, long x, T v) {
          if (y >= 0 && y < Hl && x >= 0 && x < Wl) gplane[y * Wl + x] += v;
        };
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t k = 0; k < taps; ++k) {
            const long ki = static_cast<long>(k / kw), kj = static_cast<long>(k % kw);
            const std::size_t oy_base = (b * 2 * taps + 2 * k) * plane;
            const std::size_t ox_base = oy_base + plane;
            for (std::size_t h = 0; h < H; ++h) {
              for (std::size_t w = 0; w < W; ++w) {
                const std::size_t pos = h * W + w;
                const auto cr = corners(static_cast<T>(static_cast<long>(h) + ki - ph) + od[oy_base + pos],
                                        static_cast<T>(static_cast<long>(w) + kj - pw) + od[ox_base + pos]);
                T d_oy = 0, d_ox = 0;
                for (std::size_t c = 0; c < C; ++c) {
                  const std::size_t idx = (b * C + c) * plane;
                  const T g = gd[idx + pos];
                  if (g == T(0)) continue;
                  const T* xp = xd + idx;
                  const T v00 = read(xp, Hl, Wl, cr.y0, cr.x0);
                  const T v01 = read(xp, Hl, Wl, cr.y0, cr.x0 + 1);
                  const T v10 = read(xp, Hl, Wl, cr.y0 + 1, cr.x0);
                  const T v11 = read(xp, Hl, Wl, cr.y0 + 1, cr.x0 + 1);
                  const T wk = wd[c * taps + k];
                  if (gw) {
                    const T v = (1 - cr.ly) * ((1 - cr.lx) * v00 + cr.lx * v01) +
                                cr.ly * ((1 - cr.lx) * v10 + cr.lx * v11);
                    (*gw)[c * taps + k] += g * v;
                  }
                  const T gk = g * wk;
                  if (gx) {
                    T* gp = gx->data() + idx;
                    scatter(gp, cr.y0, cr.x0, gk * (1 - cr.ly) * (1 - cr.lx));
                    scatter(gp, cr.y0, cr.x0 + 1, gk * (1 - cr.ly) * cr.lx);
                    scatter(gp, cr.y0 + 1, cr.x0, gk * cr.ly * (1 - cr.lx));
                    scatter(gp, cr.y0 + 1, cr.x0 + 1, gk * cr.ly * cr.lx);
                  }
                  d_oy += gk * ((1 - cr.lx) * (v10 - v00) + cr.lx * (v11 - v01));
                  d_ox += gk * ((1 - cr.ly) * (v01 - v00) + cr.ly * (v11 - v10));
                }
                if (go) {
                  (*go)[oy_base + pos] += d_oy;
                  (*go)[ox_base + pos] += d_ox;
                }
              }
            }
          }
        }
        if (has_bias) {
          if (auto* gb = grad_sink(self, 3)) {
            for (std::size_t b = 0; b < B; ++b)
              for (std::size_t c = 0; c < C; ++c)
                for (std::size_t pos = 0; pos < plane; ++pos) (*gb)[c] += gd[(b * C + c) * plane + pos];
          }
        }
      });
}

template <typename T>
Tensor<T> dsdcn_embed(const Tensor<T>& x, const DeformEmbedParams<T>& p) {
  const auto offsets = predict_offsets(x, p);
  const auto sampled = deformable_depthwise_conv(x, offsets, p.depthwise.weight, p.depthwise.bias);
  return hardswish(p.pointwise(sampled));
}

#define MUSE_INSTANTIATE_DEFORM(T)                                                              \
  template struct DeformEmbedParams<T>;                                                         \
  template T bilinear_sample(std::span<const T>, std::size_t, std::size_t, T, T);               \
  template Tensor<T> predict_offsets(const Tensor<T>&, const DeformEmbedParams<T>&);            \
  template Tensor<T> deformable_depthwise_conv(const Tensor<T>&, const Tensor<T>&,              \
                                               const Tensor<T>&, const std::optional<Tensor<T>>&); \
  template Tensor<T> dsdcn_embed(const Tensor<T>&, const DeformEmbedParams<T>&);

MUSE_INSTANTIATE_DEFORM(float)
MUSE_INSTANTIATE_DEFORM(double)

}  // namespace muse
