#include "muse/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace muse {

using detail::grad_sink;
using detail::make_result;
using detail::Node;

namespace {

void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

void require_rank(const char* op, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(s));
  }
}

// Half-open range of output indices o with 0 <= o*stride + offset < n.
std::pair<long, long> valid_range(long out, long stride, long offset, long n) {
  long lo = 0;
  if (offset < 0) lo = (-offset + stride - 1) / stride;
  long hi = out;
  if (n - 1 - offset < 0) {
    hi = 0;
  } else {
    hi = std::min(out, (n - 1 - offset) / stride + 1);
  }
  return {lo, std::max(lo, hi)};
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  return make_result<T>("add", a.shape(), std::move(out), {a.node(), b.node()},
                        [](Node<T>& self) {
                          for (std::size_t k = 0; k < 2; ++k) {
                            if (auto* g = grad_sink(self, k)) {
                              for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                (*g)[i] += self.grad[i];
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
  return make_result<T>("sub", a.shape(), std::move(out), {a.node(), b.node()},
                        [](Node<T>& self) {
                          if (auto* g = grad_sink(self, 0)) {
                            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
                          }
                          if (auto* g = grad_sink(self, 1)) {
                            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] -= self.grad[i];
                          }
                        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  auto an = a.node();
  auto bn = b.node();
  return make_result<T>("mul", a.shape(), std::move(out), {an, bn}, [an, bn](Node<T>& self) {
    if (auto* g = grad_sink(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * bn->data[i];
    }
    if (auto* g = grad_sink(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * an->data[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return map_unary(a, "scale", [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return map_unary(a, "add_scalar", [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_channel(const Tensor<T>& x, const Tensor<T>& g) {
  require_rank("mul_channel", x.shape(), 4);
  const auto B = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (g.shape() != Shape{B, C, 1, 1}) {
    throw ShapeError("mul_channel: gate " + shape_str(g.shape()) + " does not broadcast over " +
                     shape_str(x.shape()));
  }
  std::vector<T> out(x.numel());
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const T s = g.at(bc);
    for (std::size_t p = 0; p < plane; ++p) out[bc * plane + p] = x.at(bc * plane + p) * s;
  }
  auto xn = x.node();
  auto gn = g.node();
  return make_result<T>("mul_channel", x.shape(), std::move(out), {xn, gn},
                        [xn, gn, plane](Node<T>& self) {
                          const std::size_t n_bc = gn->data.size();
                          if (auto* gx = grad_sink(self, 0)) {
                            for (std::size_t bc = 0; bc < n_bc; ++bc) {
                              const T s = gn->data[bc];
                              for (std::size_t p = 0; p < plane; ++p) {
                                (*gx)[bc * plane + p] += self.grad[bc * plane + p] * s;
                              }
                            }
                          }
                          if (auto* gg = grad_sink(self, 1)) {
                            for (std::size_t bc = 0; bc < n_bc; ++bc) {
                              T acc = 0;
                              for (std::size_t p = 0; p < plane; ++p) {
                                acc += self.grad[bc * plane + p] * xn->data[bc * plane + p];
                              }
                              (*gg)[bc] += acc;
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Matmul

namespace {

// Maps a flat batch index of the output to flat batch offsets of a and b.
struct BatchMap {
  Shape out_batch;
  std::vector<std::size_t> a_index, b_index;
};

BatchMap broadcast_batches(const Shape& a, const Shape& b) {
  const std::size_t ra = a.size() - 2, rb = b.size() - 2;
  const std::size_t r = std::max(ra, rb);
  Shape pa(r, 1), pb(r, 1), out(r, 1);
  std::copy(a.begin(), a.begin() + static_cast<long>(ra), pa.begin() + static_cast<long>(r - ra));
  std::copy(b.begin(), b.begin() + static_cast<long>(rb), pb.begin() + static_cast<long>(r - rb));
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw ShapeError("matmul: batch dims not broadcastable: " + shape_str(a) + " x " +
                       shape_str(b));
    }
    out[i] = std::max(pa[i], pb[i]);
  }
  BatchMap m;
  m.out_batch = out;
  const std::size_t n = shape_numel(out);
  m.a_index.resize(n);
  m.b_index.resize(n);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t rem = flat, ia = 0, ib = 0, sa = 1, sb = 1;
    for (std::size_t k = r; k-- > 0;) {
      const std::size_t coord = rem % out[k];
      rem /= out[k];
      ia += (pa[k] == 1 ? 0 : coord) * sa;
      ib += (pb[k] == 1 ? 0 : coord) * sb;
      sa *= pa[k];
      sb *= pb[k];
    }
    m.a_index[flat] = ia;
    m.b_index[flat] = ib;
  }
  return m;
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() < 2 || b.ndim() < 2) {
    throw ShapeError("matmul: operands need rank >= 2, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t M = a.dim(-2), P = a.dim(-1), P2 = b.dim(-2), N = b.dim(-1);
  if (P != P2) {
    throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  auto map = broadcast_batches(a.shape(), b.shape());
  const std::size_t nb = map.a_index.size();
  std::vector<T> out(nb * M * N, T(0));
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t t = 0; t < nb; ++t) {
    const T* A = ad.data() + map.a_index[t] * M * P;
    const T* Bm = bd.data() + map.b_index[t] * P * N;
    T* C = out.data() + t * M * N;
    for (std::size_t i = 0; i < M; ++i) {
      for (std::size_t k = 0; k < P; ++k) {
        const T av = A[i * P + k];
        for (std::size_t j = 0; j < N; ++j) C[i * N + j] += av * Bm[k * N + j];
      }
    }
  }
  Shape shape = map.out_batch;
  shape.push_back(M);
  shape.push_back(N);
  auto an = a.node();
  auto bn = b.node();
  return make_result<T>(
      "matmul", std::move(shape), std::move(out), {an, bn},
      [an, bn, map = std::move(map), M, P, N](Node<T>& self) {
        auto* ga = grad_sink(self, 0);
        auto* gb = grad_sink(self, 1);
        for (std::size_t t = 0; t < map.a_index.size(); ++t) {
          const T* G = self.grad.data() + t * M * N;
          const T* A = an->data.data() + map.a_index[t] * M * P;
          const T* Bm = bn->data.data() + map.b_index[t] * P * N;
          if (ga) {
            T* GA = ga->data() + map.a_index[t] * M * P;
            for (std::size_t i = 0; i < M; ++i) {
              for (std::size_t k = 0; k < P; ++k) {
                T acc = 0;
                for (std::size_t j = 0; j < N; ++j) acc += G[i * N + j] * Bm[k * N + j];
                GA[i * P + k] += acc;
              }
            }
          }
          if (gb) {
            T* GB = gb->data() + map.b_index[t] * P * N;
            for (std::size_t i = 0; i < M; ++i) {
              for (std::size_t k = 0; k < P; ++k) {
                const T av = A[i * P + k];
                for (std::size_t j = 0; j < N; ++j) GB[k * N + j] += av * G[i * N + j];
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution

std::size_t conv_output_size(std::size_t n, std::size_t k, std::size_t stride, std::size_t pad,
                             std::size_t dilation) {
  if (stride == 0 || dilation == 0 || k == 0) throw ShapeError("conv: zero stride/dilation/kernel");
  const long span = static_cast<long>(dilation * (k - 1) + 1);
  const long padded = static_cast<long>(n + 2 * pad);
  if (padded < span) {
    throw ShapeError("conv: kernel extent " + std::to_string(span) + " exceeds padded input " +
                     std::to_string(padded));
  }
  return static_cast<std::size_t>((padded - span) / static_cast<long>(stride)) + 1;
}

namespace {

struct ConvGeom {
  std::size_t B, C, H, W, O, Cg, Og, kh, kw, OH, OW, groups;
  long sh, sw, ph, pw, dh, dw;
};

// Shared loop nest for forward and both backward passes. `visit` is called
// with (in_row_offset, out_row_offset, weight_index, ow_lo, ow_hi, iw0, sw):
// for ow in [lo,hi) the input column is iw0 + ow*sw.
template <typename Visit>
void conv_loops(const ConvGeom& g, Visit&& visit) {
  for (std::size_t b = 0; b < g.B; ++b) {
    for (std::size_t grp = 0; grp < g.groups; ++grp) {
      for (std::size_t og = 0; og < g.Og; ++og) {
        const std::size_t oc = grp * g.Og + og;
        for (std::size_t cg = 0; cg < g.Cg; ++cg) {
          const std::size_t ic = grp * g.Cg + cg;
          for (std::size_t ki = 0; ki < g.kh; ++ki) {
            const long h_off = static_cast<long>(ki) * g.dh - g.ph;
            auto [oh_lo, oh_hi] = valid_range(static_cast<long>(g.OH), g.sh, h_off,
                                              static_cast<long>(g.H));
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
              const long w_off = static_cast<long>(kj) * g.dw - g.pw;
              auto [ow_lo, ow_hi] = valid_range(static_cast<long>(g.OW), g.sw, w_off,
                                                static_cast<long>(g.W));
              if (ow_lo >= ow_hi) continue;
              const std::size_t widx = ((oc * g.Cg + cg) * g.kh + ki) * g.kw + kj;
              for (long oh = oh_lo; oh < oh_hi; ++oh) {
                const long ih = oh * g.sh + h_off;
                const std::size_t in_row = ((b * g.C + ic) * g.H + static_cast<std::size_t>(ih)) * g.W;
                const std::size_t out_row =
                    ((b * g.O + oc) * g.OH + static_cast<std::size_t>(oh)) * g.OW;
                visit(in_row, out_row, widx, ow_lo, ow_hi, w_off);
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& bias,
                 const Conv2dOptions& opt) {
  require_rank("conv2d input", x.shape(), 4);
  require_rank("conv2d weight", w.shape(), 4);
  ConvGeom g{};
  g.B = x.dim(0);
  g.C = x.dim(1);
  g.H = x.dim(2);
  g.W = x.dim(3);
  g.O = w.dim(0);
  g.groups = opt.groups;
  if (g.groups == 0 || g.C % g.groups != 0 || g.O % g.groups != 0) {
    throw ShapeError("conv2d: channels " + std::to_string(g.C) + "->" + std::to_string(g.O) +
                     " not divisible by groups " + std::to_string(g.groups));
  }
  g.Cg = g.C / g.groups;
  g.Og = g.O / g.groups;
  if (w.dim(1) != g.Cg) {
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " expects " +
                     std::to_string(w.dim(1)) + " channels per group, input " +
                     shape_str(x.shape()) + " gives " + std::to_string(g.Cg));
  }
  if (bias && bias->shape() != Shape{g.O}) {
    throw ShapeError("conv2d: bias " + shape_str(bias->shape()) + " for " + std::to_string(g.O) +
                     " output channels");
  }
  g.kh = w.dim(2);
  g.kw = w.dim(3);
  g.OH = conv_output_size(g.H, g.kh, opt.stride[0], opt.padding[0], opt.dilation[0]);
  g.OW = conv_output_size(g.W, g.kw, opt.stride[1], opt.padding[1], opt.dilation[1]);
  g.sh = static_cast<long>(opt.stride[0]);
  g.sw = static_cast<long>(opt.stride[1]);
  g.ph = static_cast<long>(opt.padding[0]);
  g.pw = static_cast<long>(opt.padding[1]);
  g.dh = static_cast<long>(opt.dilation[0]);
  g.dw = static_cast<long>(opt.dilation[1]);

  const std::size_t plane = g.OH * g.OW;
  std::vector<T> out(g.B * g.O * plane, T(0));
  if (bias) {
    for (std::size_t b = 0; b < g.B; ++b) {
      for (std::size_t o = 0; o < g.O; ++o) {
        std::fill_n(out.begin() + static_cast<long>((b * g.O + o) * plane), plane, bias->at(o));
      }
    }
  }
  const T* xd = x.data().data();
  const T* wd = w.data().data();
  conv_loops(g, [&](std::size_t in_row, std::size_t out_row, std::size_t widx, long lo, long hi,
                    long w_off) {
    const T wv = wd[widx];
    const T* in = xd + in_row;
    T* o = out.data() + out_row;
    for (long ow = lo; ow < hi; ++ow) o[ow] += wv * in[ow * g.sw + w_off];
  });

  auto xn = x.node();
  auto wn = w.node();
  std::vector<detail::NodePtr<T>> inputs{xn, wn};
  if (bias) inputs.push_back(bias->node());
  return make_result<T>(
      "conv2d", Shape{g.B, g.O, g.OH, g.OW}, std::move(out), std::move(inputs),
      [xn, wn, g, has_bias = bias.has_value()](Node<T>& self) {
        auto* gx = grad_sink(self, 0);
        auto* gw = grad_sink(self, 1);
        const T* go = self.grad.data();
        if (gx) {
          const T* wd = wn->data.data();
          T* gxd = gx->data();
          conv_loops(g, [&](std::size_t in_row, std::size_t out_row, std::size_t widx, long lo,
                            long hi, long w_off) {
            const T wv = wd[widx];
            T* gi = gxd + in_row;
            const T* o = go + out_row;
            for (long ow = lo; ow < hi; ++ow) gi[ow * g.sw + w_off] += wv * o[ow];
          });
        }
        if (gw) {
          const T* xd = xn->data.data();
          T* gwd = gw->data();
          conv_loops(g, [&](std::size_t in_row, std::size_t out_row, std::size_t widx, long lo,
                            long hi, long w_off) {
            const T* in = xd + in_row;
            const T* o = go + out_row;
            T acc = 0;
            for (long ow = lo; ow < hi; ++ow) acc += o[ow] * in[ow * g.sw + w_off];
            gwd[widx] += acc;
          });
        }
        if (has_bias) {
          if (auto* gb = grad_sink(self, 2)) {
            const std::size_t plane = g.OH * g.OW;
            for (std::size_t b = 0; b < g.B; ++b) {
              for (std::size_t o = 0; o < g.O; ++o) {
                const T* p = go + (b * g.O + o) * plane;
                (*gb)[o] += std::accumulate(p, p + plane, T(0));
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w,
                           const std::optional<Tensor<T>>& bias,
                           std::array<std::size_t, 2> stride, std::array<std::size_t, 2> padding) {
  require_rank("conv_transpose2d input", x.shape(), 4);
  require_rank("conv_transpose2d weight", w.shape(), 4);
  const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (w.dim(0) != Ci) {
    throw ShapeError("conv_transpose2d: weight " + shape_str(w.shape()) + " vs input " +
                     shape_str(x.shape()));
  }
  const std::size_t Co = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (bias && bias->shape() != Shape{Co}) throw ShapeError("conv_transpose2d: bias shape");
  const long full_h = static_cast<long>((H - 1) * stride[0] + kh);
  const long full_w = static_cast<long>((W - 1) * stride[1] + kw);
  const long OHl = full_h - 2 * static_cast<long>(padding[0]);
  const long OWl = full_w - 2 * static_cast<long>(padding[1]);
  if (OHl < 1 || OWl < 1) throw ShapeError("conv_transpose2d: non-positive output size");
  const std::size_t OH = static_cast<std::size_t>(OHl), OW = static_cast<std::size_t>(OWl);
  const long sh = static_cast<long>(stride[0]), sw = static_cast<long>(stride[1]);
  const long ph = static_cast<long>(padding[0]), pw = static_cast<long>(padding[1]);

  // Calls f(x_index, w_index, out_index) for every contributing triple.
  auto loops = [=](auto&& f) {
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t ic = 0; ic < Ci; ++ic) {
        for (std::size_t oc = 0; oc < Co; ++oc) {
          for (std::size_t ki = 0; ki < kh; ++ki) {
            for (std::size_t kj = 0; kj < kw; ++kj) {
              const std::size_t widx = ((ic * Co + oc) * kh + ki) * kw + kj;
              for (std::size_t ih = 0; ih < H; ++ih) {
                const long oh = static_cast<long>(ih) * sh - ph + static_cast<long>(ki);
                if (oh < 0 || oh >= OHl) continue;
                for (std::size_t iw = 0; iw < W; ++iw) {
                  const long ow = static_cast<long>(iw) * sw - pw + static_cast<long>(kj);
                  if (ow < 0 || ow >= OWl) continue;
                  f(((b * Ci + ic) * H + ih) * W + iw, widx,
                    ((b * Co + oc) * OH + static_cast<std::size_t>(oh)) * OW +
                        static_cast<std::size_t>(ow));
                }
              }
            }
          }
        }
      }
    }
  };

  std::vector<T> out(B * Co * OH * OW, T(0));
  if (bias) {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t o = 0; o < Co; ++o)
        std::fill_n(out.begin() + static_cast<long>((b * Co + o) * OH * OW), OH * OW, bias->at(o));
  }
  const T* xd = x.data().data();
  const T* wd = w.data().data();
  loops([&](std::size_t xi, std::size_t wi, std::size_t oi) { out[oi] += xd[xi] * wd[wi]; });

  auto xn = x.node();
  auto wn = w.node();
  std::vector<detail::NodePtr<T>> inputs{xn, wn};
  if (bias) inputs.push_back(bias->node());
  return make_result<T>(
      "conv_transpose2d", Shape{B, Co, OH, OW}, std::move(out), std::move(inputs),
      [xn, wn, loops, B, Co, OH, OW, has_bias = bias.has_value()](Node<T>& self) {
        auto* gx = grad_sink(self, 0);
        auto* gw = grad_sink(self, 1);
        const T* go = self.grad.data();
        if (gx || gw) {
          loops([&](std::size_t xi, std::size_t wi, std::size_t oi) {
            if (gx) (*gx)[xi] += go[oi] * wn->data[wi];
            if (gw) (*gw)[wi] += go[oi] * xn->data[xi];
          });
        }
        if (has_bias) {
          if (auto* gb = grad_sink(self, 2)) {
            for (std::size_t b = 0; b < B; ++b)
              for (std::size_t o = 0; o < Co; ++o) {
                const T* p = go + (b * Co + o) * OH * OW;
                (*gb)[o] += std::accumulate(p, p + OH * OW, T(0));
              }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization

namespace {

// Normalizes `rows` groups of `C` values laid out with element stride `cs`
// and group starts given by `row_start(r)`.
template <typename T, typename RowStart>
Tensor<T> norm_impl(const char* op, const Tensor<T>& x, const Tensor<T>& gamma,
                    const Tensor<T>& beta, T eps, std::size_t rows, std::size_t C, std::size_t cs,
                    RowStart row_start) {
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) {
    throw ShapeError(std::string(op) + ": affine params " + shape_str(gamma.shape()) + "/" +
                     shape_str(beta.shape()) + " for " + std::to_string(C) + " channels");
  }
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(rows);
  const T* xd = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t s = row_start(r);
    T mu = 0;
    for (std::size_t c = 0; c < C; ++c) mu += xd[s + c * cs];
    mu /= static_cast<T>(C);
    T var = 0;
    for (std::size_t c = 0; c < C; ++c) {
      const T d = xd[s + c * cs] - mu;
      var += d * d;
    }
    var /= static_cast<T>(C);
    const T denom = var + eps;
    // Zero variance with eps == 0: the centered values are all zero, so the
    // normalized row is defined as zero.
    const T rs = denom > T(0) ? T(1) / std::sqrt(denom) : T(0);
    rstd[r] = rs;
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t i = s + c * cs;
      xhat[i] = (xd[i] - mu) * rs;
      out[i] = xhat[i] * gamma.at(c) + beta.at(c);
    }
  }
  auto gn = gamma.node();
  return make_result<T>(
      op, x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
      [gn, xhat = std::move(xhat), rstd = std::move(rstd), rows, C, cs,
       row_start](Node<T>& self) {
        auto* gx = grad_sink(self, 0);
        auto* gg = grad_sink(self, 1);
        auto* gb = grad_sink(self, 2);
        const T* go = self.grad.data();
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t s = row_start(r);
          T mean_d = 0, mean_dx = 0;
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t i = s + c * cs;
            const T d = go[i] * gn->data[c];
            mean_d += d;
            mean_dx += d * xhat[i];
            if (gg) (*gg)[c] += go[i] * xhat[i];
            if (gb) (*gb)[c] += go[i];
          }
          if (!gx) continue;
          mean_d /= static_cast<T>(C);
          mean_dx /= static_cast<T>(C);
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t i = s + c * cs;
            const T d = go[i] * gn->data[c];
            (*gx)[i] += rstd[r] * (d - mean_d - xhat[i] * mean_dx);
          }
        }
      });
}

}  // namespace

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t C = x.dim(-1);
  if (gamma.numel() != C) {
    throw ShapeError("layer_norm: last dim " + std::to_string(C) + " vs gamma " +
                     shape_str(gamma.shape()));
  }
  return norm_impl("layer_norm", x, gamma, beta, eps, x.numel() / C, C, 1,
                   [C](std::size_t r) { return r * C; });
}

template <typename T>
Tensor<T> channel_layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                             T eps) {
  require_rank("channel_layer_norm", x.shape(), 4);
  const std::size_t C = x.dim(1), plane = x.dim(2) * x.dim(3);
  return norm_impl("channel_layer_norm", x, gamma, beta, eps, x.dim(0) * plane, C, plane,
                   [C, plane](std::size_t r) { return (r / plane) * C * plane + r % plane; });
}

// ---------------------------------------------------------------------------
// Activations and elementwise math

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T a = T(0.044715);
  return map_unary(
      x, "gelu",
      [](T v) { return T(0.5) * v * (T(1) + std::tanh(k * (v + a * v * v * v))); },
      [](T v, T) {
        const T t = std::tanh(k * (v + a * v * v * v));
        return T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * k * (T(1) + T(3) * a * v * v);
      });
}

template <typename T>
Tensor<T> hardswish(const Tensor<T>& x) {
  return map_unary(
      x, "hardswish",
      [](T v) { return v * std::clamp(v + T(3), T(0), T(6)) / T(6); },
      [](T v, T) {
        if (v < T(-3)) return T(0);
        if (v > T(3)) return T(1);
        return (T(2) * v + T(3)) / T(6);
      });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return map_unary(
      x, "sigmoid",
      [](T v) {
        if (v >= 0) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> prelu(const Tensor<T>& x, const Tensor<T>& alpha) {
  if (x.ndim() < 2) throw ShapeError("prelu: input needs a channel axis");
  const std::size_t B = x.dim(0), C = x.dim(1);
  if (alpha.shape() != Shape{C}) {
    throw ShapeError("prelu: alpha " + shape_str(alpha.shape()) + " for " + std::to_string(C) +
                     " channels");
  }
  const std::size_t inner = x.numel() / (B * C);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x.at(i);
    out[i] = v > 0 ? v : alpha.at((i / inner) % C) * v;
  }
  auto xn = x.node();
  auto an = alpha.node();
  return make_result<T>("prelu", x.shape(), std::move(out), {xn, an},
                        [xn, an, inner, C](Node<T>& self) {
                          auto* gx = grad_sink(self, 0);
                          auto* ga = grad_sink(self, 1);
                          for (std::size_t i = 0; i < self.grad.size(); ++i) {
                            const T v = xn->data[i];
                            const std::size_t c = (i / inner) % C;
                            if (gx) (*gx)[i] += self.grad[i] * (v > 0 ? T(1) : an->data[c]);
                            if (ga && v <= 0) (*ga)[c] += self.grad[i] * v;
                          }
                        });
}

template <typename T>
Tensor<T> cos(const Tensor<T>& x) {
  return map_unary(x, "cos", [](T v) { return std::cos(v); }, [](T v, T) { return -std::sin(v); });
}

template <typename T>
Tensor<T> sin(const Tensor<T>& x) {
  return map_unary(x, "sin", [](T v) { return std::sin(v); }, [](T v, T) { return std::cos(v); });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  return map_unary(
      x, "abs", [](T v) { return std::abs(v); },
      [](T v, T) { return v > 0 ? T(1) : (v < 0 ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> pow_scalar(const Tensor<T>& x, T p) {
  for (auto v : x.data()) {
    if (v < 0) throw NumericError("pow_scalar: negative base");
  }
  return map_unary(
      x, "pow", [p](T v) { return std::pow(v, p); },
      [p](T v, T) {
        if (v == T(0)) return p == T(1) ? T(1) : T(0);
        return p * std::pow(v, p - T(1));
      });
}

template <typename T>
Tensor<T> atan2(const Tensor<T>& y, const Tensor<T>& x) {
  require_same_shape("atan2", y.shape(), x.shape());
  std::vector<T> out(y.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    T v = std::atan2(y.at(i), x.at(i));
    // atan2 returns -pi for (-0, negative); fold onto the closed end.
    if (v == -std::numbers::pi_v<T>) v = std::numbers::pi_v<T>;
    out[i] = v;
  }
  auto yn = y.node();
  auto xn = x.node();
  return make_result<T>("atan2", y.shape(), std::move(out), {yn, xn}, [yn, xn](Node<T>& self) {
    auto* gy = grad_sink(self, 0);
    auto* gx = grad_sink(self, 1);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T a = xn->data[i], b = yn->data[i];
      const T r2 = a * a + b * b;
      if (r2 == T(0)) continue;
      if (gy) (*gy)[i] += self.grad[i] * a / r2;
      if (gx) (*gx)[i] -= self.grad[i] * b / r2;
    }
  });
}

// ---------------------------------------------------------------------------
// Pooling, layout, reductions

template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& x) {
  require_rank("adaptive_avg_pool", x.shape(), 4);
  const std::size_t BC = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
  std::vector<T> out(BC);
  for (std::size_t i = 0; i < BC; ++i) {
    T acc = 0;
    for (std::size_t p = 0; p < plane; ++p) acc += x.at(i * plane + p);
    out[i] = acc / static_cast<T>(plane);
  }
  return make_result<T>("adaptive_avg_pool", Shape{x.dim(0), x.dim(1), 1, 1}, std::move(out),
                        {x.node()}, [plane](Node<T>& self) {
                          auto* gx = grad_sink(self, 0);
                          if (!gx) return;
                          const T inv = T(1) / static_cast<T>(plane);
                          for (std::size_t i = 0; i < self.grad.size(); ++i) {
                            for (std::size_t p = 0; p < plane; ++p) {
                              (*gx)[i * plane + p] += self.grad[i] * inv;
                            }
                          }
                        });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = xs.front().shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range for " + shape_str(ref));
  std::size_t outer = 1, inner = 1, total = 0;
  for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
  for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
  std::vector<std::size_t> widths;
  for (const auto& t : xs) {
    Shape s = t.shape();
    if (s.size() != ref.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != ref[i]) {
        throw ShapeError("concat: " + shape_str(s) + " vs " + shape_str(ref) + " off axis " +
                         std::to_string(axis));
      }
    }
    widths.push_back(s[axis] * inner);
    total += s[axis];
  }
  const std::size_t row = total * inner;
  std::vector<T> out(outer * row);
  std::size_t col = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const T* src = xs[k].data().data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src + o * widths[k], widths[k], out.begin() + static_cast<long>(o * row + col));
    }
    col += widths[k];
  }
  Shape shape = ref;
  shape[axis] = total;
  std::vector<detail::NodePtr<T>> inputs;
  for (const auto& t : xs) inputs.push_back(t.node());
  return make_result<T>("concat", std::move(shape), std::move(out), std::move(inputs),
                        [widths, outer, row](Node<T>& self) {
                          std::size_t col = 0;
                          for (std::size_t k = 0; k < widths.size(); ++k) {
                            if (auto* g = grad_sink(self, k)) {
                              for (std::size_t o = 0; o < outer; ++o) {
                                for (std::size_t j = 0; j < widths[k]; ++j) {
                                  (*g)[o * widths[k] + j] += self.grad[o * row + col + j];
                                }
                              }
                            }
                            col += widths[k];
                          }
                        });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& s = x.shape();
  if (axis >= s.size() || length == 0 || start + length > s[axis]) {
    throw ShapeError("slice: [" + std::to_string(start) + ", +" + std::to_string(length) +
                     ") on axis " + std::to_string(axis) + " of " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t in_row = s[axis] * inner, out_row = length * inner, off = start * inner;
  std::vector<T> out(outer * out_row);
  const T* src = x.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(src + o * in_row + off, out_row, out.begin() + static_cast<long>(o * out_row));
  }
  Shape shape = s;
  shape[axis] = length;
  return make_result<T>("slice", std::move(shape), std::move(out), {x.node()},
                        [outer, in_row, out_row, off](Node<T>& self) {
                          auto* g = grad_sink(self, 0);
                          if (!g) return;
                          for (std::size_t o = 0; o < outer; ++o) {
                            for (std::size_t j = 0; j < out_row; ++j) {
                              (*g)[o * in_row + off + j] += self.grad[o * out_row + j];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_result<T>("reshape", std::move(shape), std::move(out), {x.node()},
                        [](Node<T>& self) {
                          auto* g = grad_sink(self, 0);
                          if (!g) return;
                          for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
                        });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const Shape& s = x.shape();
  const std::size_t r = s.size();
  std::vector<bool> seen(r, false);
  if (perm.size() != r) throw ShapeError("permute: rank mismatch for " + shape_str(s));
  for (auto p : perm) {
    if (p >= r || seen[p]) throw ShapeError("permute: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = s[perm[i]];
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * s[i + 1];
  // src[flat_out] = flat input index.
  const std::size_t n = x.numel();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> coord(r, 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t idx = 0;
    for (std::size_t i = 0; i < r; ++i) idx += coord[i] * in_stride[perm[i]];
    src[flat] = idx;
    for (std::size_t i = r; i-- > 0;) {
      if (++coord[i] < out_shape[i]) break;
      coord[i] = 0;
    }
  }
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = x.at(src[i]);
  return make_result<T>("permute", std::move(out_shape), std::move(out), {x.node()},
                        [src = std::move(src)](Node<T>& self) {
                          auto* g = grad_sink(self, 0);
                          if (!g) return;
                          for (std::size_t i = 0; i < src.size(); ++i) (*g)[src[i]] += self.grad[i];
                        });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (auto v : x.data()) acc += v;
  return make_result<T>("sum", Shape{1}, std::vector<T>{acc}, {x.node()}, [](Node<T>& self) {
    auto* g = grad_sink(self, 0);
    if (!g) return;
    for (auto& v : *g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  auto d = sub(a, b);
  return mean(mul(d, d));
}

template <typename T>
Tensor<T> l1(const Tensor<T>& a, const Tensor<T>& b) {
  return mean(abs(sub(a, b)));
}

#define MUSE_INSTANTIATE_OPS(T)                                                                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> scale(const Tensor<T>&, T);                                                \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                           \
  template Tensor<T> mul_channel(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&,                                 \
                            const std::optional<Tensor<T>>&, const Conv2dOptions&);            \
  template Tensor<T> conv_transpose2d(const Tensor<T>&, const Tensor<T>&,                       \
                                      const std::optional<Tensor<T>>&,                          \
                                      std::array<std::size_t, 2>, std::array<std::size_t, 2>); \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);       \
  template Tensor<T> channel_layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                        T);                                                     \
  template Tensor<T> gelu(const Tensor<T>&);                                                    \
  template Tensor<T> hardswish(const Tensor<T>&);                                               \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                 \
  template Tensor<T> prelu(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> cos(const Tensor<T>&);                                                     \
  template Tensor<T> sin(const Tensor<T>&);                                                     \
  template Tensor<T> abs(const Tensor<T>&);                                                     \
  template Tensor<T> pow_scalar(const Tensor<T>&, T);                                           \
  template Tensor<T> atan2(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> adaptive_avg_pool(const Tensor<T>&);                                       \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                        \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);            \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                          \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                \
  template Tensor<T> sum(const Tensor<T>&);                                                     \
  template Tensor<T> mean(const Tensor<T>&);                                                    \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> l1(const Tensor<T>&, const Tensor<T>&);

MUSE_INSTANTIATE_OPS(float)
MUSE_INSTANTIATE_OPS(double)

}  // namespace muse
