#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "muse/errors.hpp"
#include "muse/tensor.hpp"

namespace muse {

// Elementwise map with a user-supplied derivative df(x, y) = dy/dx.
template <typename T, typename F, typename DF>
Tensor<T> map_unary(const Tensor<T>& x, std::string op, F f, DF df) {
  const auto in = x.data();
  std::vector<T> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  auto xn = x.node();
  return detail::make_result<T>(
      std::move(op), x.shape(), std::move(out), {xn},
      [xn, df](detail::Node<T>& self) {
        auto* gx = detail::grad_sink(self, 0);
        if (!gx) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          (*gx)[i] += self.grad[i] * df(xn->data[i], self.data[i]);
        }
      });
}

// Same-shape elementwise arithmetic.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T s);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);

// x[B,C,H,W] * g[B,C,1,1], broadcasting g over the spatial plane.
template <typename T> Tensor<T> mul_channel(const Tensor<T>& x, const Tensor<T>& g);

// Batched matrix product over the last two dims; leading dims broadcast
// (equal, or 1, or absent on one side).
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

struct Conv2dOptions {
  std::array<std::size_t, 2> stride{1, 1};
  std::array<std::size_t, 2> padding{0, 0};
  std::array<std::size_t, 2> dilation{1, 1};
  std::size_t groups = 1;
};

// floor((n + 2*pad - dilation*(k-1) - 1)/stride) + 1; throws when that is < 1.
std::size_t conv_output_size(std::size_t n, std::size_t k, std::size_t stride,
                             std::size_t pad, std::size_t dilation);

// x[B,C,H,W], w[O,C/g,kh,kw], bias[O].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& bias,
                 const Conv2dOptions& opt = {});

// x[B,Cin,H,W], w[Cin,Cout,kh,kw]; output (H-1)*stride - 2*pad + kh.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w,
                           const std::optional<Tensor<T>>& bias,
                           std::array<std::size_t, 2> stride,
                           std::array<std::size_t, 2> padding);

// Normalizes over the last dimension.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps);

// Layer norm over the channel axis of x[B,C,H,W], at every (h, w).
template <typename T>
Tensor<T> channel_layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                             T eps);

template <typename T> Tensor<T> gelu(const Tensor<T>& x);
template <typename T> Tensor<T> hardswish(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
// x[B,C,...] with one learnable slope per channel, alpha[C].
template <typename T> Tensor<T> prelu(const Tensor<T>& x, const Tensor<T>& alpha);

template <typename T> Tensor<T> cos(const Tensor<T>& x);
template <typename T> Tensor<T> sin(const Tensor<T>& x);
template <typename T> Tensor<T> abs(const Tensor<T>& x);
// x >= 0. The derivative at x == 0 is taken as 0 for p != 1.
template <typename T> Tensor<T> pow_scalar(const Tensor<T>& x, T p);
// atan2(y, x) in (-pi, pi]; atan2(0, 0) = 0 with zero gradient.
template <typename T> Tensor<T> atan2(const Tensor<T>& y, const Tensor<T>& x);

// [B,C,H,W] -> [B,C,1,1].
template <typename T> Tensor<T> adaptive_avg_pool(const Tensor<T>& x);

template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis);
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length);
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

// mean((a-b)^2) and mean(|a-b|).
template <typename T> Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> l1(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace muse
