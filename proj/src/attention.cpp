#include "muse/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "muse/errors.hpp"
#include "muse/params.hpp"

namespace muse {

using detail::grad_sink;
using detail::make_result;
using detail::Node;

namespace {

struct Dims {
  std::size_t G, N, D, Dv;
};

template <typename T>
Dims attention_dims(const char* op, const Tensor<T>& Q, const Tensor<T>& K, const Tensor<T>& V) {
  if (Q.ndim() < 2 || K.ndim() != Q.ndim() || V.ndim() != Q.ndim()) {
    throw ShapeError(std::string(op) + ": Q/K/V rank mismatch " + shape_str(Q.shape()) + ", " +
                     shape_str(K.shape()) + ", " + shape_str(V.shape()));
  }
  Shape qb(Q.shape().begin(), Q.shape().end() - 1);
  Shape kb(K.shape().begin(), K.shape().end() - 1);
  Shape vb(V.shape().begin(), V.shape().end() - 1);
  if (qb != kb || qb != vb || Q.dim(-1) != K.dim(-1)) {
    throw ShapeError(std::string(op) + ": shape mismatch Q" + shape_str(Q.shape()) + " K" +
                     shape_str(K.shape()) + " V" + shape_str(V.shape()));
  }
  const std::size_t N = Q.dim(-2);
  return {Q.numel() / (N * Q.dim(-1)), N, Q.dim(-1), V.dim(-1)};
}

Shape with_last(const Shape& s, std::size_t last) {
  Shape out = s;
  out.back() = last;
  return out;
}

void count(FlopCounter* c, std::uint64_t n) {
  if (c) c->madds += n;
}

template <typename T>
std::vector<T> normalized_rows(std::span<const T> x, std::size_t D) {
  std::vector<T> out(x.begin(), x.end());
  for (std::size_t r = 0; r < x.size() / D; ++r) {
    T ss = 0;
    for (std::size_t d = 0; d < D; ++d) ss += x[r * D + d] * x[r * D + d];
    const T n = std::max(std::sqrt(ss), T(1e-12));
    for (std::size_t d = 0; d < D; ++d) out[r * D + d] /= n;
  }
  return out;
}

// Unnormalized Taylor weights, after optional row normalization of Q and K.
template <typename T>
std::vector<T> taylor_raw_weights(const Tensor<T>& Q, const Tensor<T>& K, const Dims& d,
                                  const AttentionConfig& cfg, std::vector<T>& denom) {
  std::vector<T> q(Q.data().begin(), Q.data().end());
  std::vector<T> k(K.data().begin(), K.data().end());
  if (cfg.normalize_qk) {
    q = normalized_rows<T>(Q.data(), d.D);
    k = normalized_rows<T>(K.data(), d.D);
  }
  std::vector<T> w(d.G * d.N * d.N);
  denom.assign(d.G * d.N, T(0));
  for (std::size_t g = 0; g < d.G; ++g) {
    for (std::size_t i = 0; i < d.N; ++i) {
      const T* qi = q.data() + (g * d.N + i) * d.D;
      T s = 0;
      for (std::size_t j = 0; j < d.N; ++j) {
        const T* kj = k.data() + (g * d.N + j) * d.D;
        T dot = 0;
        for (std::size_t c = 0; c < d.D; ++c) dot += qi[c] * kj[c];
        w[(g * d.N + i) * d.N + j] = T(1) + dot;
        s += T(1) + dot;
      }
      if (!cfg.normalize_qk && std::abs(s) < static_cast<T>(cfg.eps)) {
        throw NumericError("taylor attention: degenerate denominator at row " + std::to_string(i));
      }
      denom[g * d.N + i] = s + static_cast<T>(cfg.eps);
    }
  }
  return w;
}

}  // namespace

void AttentionConfig::validate(std::size_t channels) const {
  if (heads == 0 || channels % heads != 0) {
    throw ConfigError("attention: " + std::to_string(channels) + " channels not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (!(eps > 0)) throw ConfigError("attention: eps must be positive");
}

std::string to_string(AttentionKind kind) { return kind == AttentionKind::msa ? "msa" : "tmsa"; }

AttentionKind parse_attention_kind(const std::string& s) {
  if (s == "msa") return AttentionKind::msa;
  if (s == "tmsa") return AttentionKind::tmsa;
  throw ConfigError("unknown attention kind '" + s + "' (expected msa or tmsa)");
}

template <typename T>
Tensor<T> softmax_attention_weights(const Tensor<T>& Q, const Tensor<T>& K) {
  const auto d = attention_dims("softmax_attention", Q, K, K);
  const T scale = T(1) / std::sqrt(static_cast<T>(d.D));
  std::vector<T> w(d.G * d.N * d.N);
  for (std::size_t g = 0; g < d.G; ++g) {
    for (std::size_t i = 0; i < d.N; ++i) {
      T* row = w.data() + (g * d.N + i) * d.N;
      const T* qi = Q.data().data() + (g * d.N + i) * d.D;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < d.N; ++j) {
        const T* kj = K.data().data() + (g * d.N + j) * d.D;
        T dot = 0;
        for (std::size_t c = 0; c < d.D; ++c) dot += qi[c] * kj[c];
        row[j] = dot * scale;
        mx = std::max(mx, row[j]);
      }
      T s = 0;
      for (std::size_t j = 0; j < d.N; ++j) {
        row[j] = std::exp(row[j] - mx);
        s += row[j];
      }
      for (std::size_t j = 0; j < d.N; ++j) row[j] /= s;
    }
  }
  Shape shape = Q.shape();
  shape.back() = d.N;
  return Tensor<T>(std::move(shape), std::move(w));
}

template <typename T>
Tensor<T> softmax_attention(const Tensor<T>& Q, const Tensor<T>& K, const Tensor<T>& V,
                            FlopCounter* counter) {
  const auto d = attention_dims("softmax_attention", Q, K, V);
  const auto w = softmax_attention_weights(Q, K);
  count(counter, d.G * d.N * d.N * d.D);  // logits
  count(counter, d.G * d.N * d.N);        // exp + normalization
  std::vector<T> out(d.G * d.N * d.Dv, T(0));
  const T* wd = w.data().data();
  const T* vd = V.data().data();
  for (std::size_t g = 0; g < d.G; ++g) {
    for (std::size_t i = 0; i < d.N; ++i) {
      T* o = out.data() + (g * d.N + i) * d.Dv;
      for (std::size_t j = 0; j < d.N; ++j) {
        const T a = wd[(g * d.N + i) * d.N + j];
        const T* vj = vd + (g * d.N + j) * d.Dv;
        for (std::size_t e = 0; e < d.Dv; ++e) o[e] += a * vj[e];
      }
    }
  }
  count(counter, d.G * d.N * d.N * d.Dv);
  return Tensor<T>(with_last(Q.shape(), d.Dv), std::move(out));
}

template <typename T>
Tensor<T> taylor_attention_weights(const Tensor<T>& Q, const Tensor<T>& K,
                                   const AttentionConfig& cfg) {
  const auto d = attention_dims("taylor_attention", Q, K, K);
  std::vector<T> denom;
  auto w = taylor_raw_weights(Q, K, d, cfg, denom);
  for (std::size_t r = 0; r < d.G * d.N; ++r)
    for (std::size_t j = 0; j < d.N; ++j) w[r * d.N + j] /= denom[r];
  Shape shape = Q.shape();
  shape.back() = d.N;
  return Tensor<T>(std::move(shape), std::move(w));
}

template <typename T>
Tensor<T> taylor_attention_direct(const Tensor<T>& Q, const Tensor<T>& K, const Tensor<T>& V,
                                  const AttentionConfig& cfg) {
  const auto d = attention_dims("taylor_attention_direct", Q, K, V);
  std::vector<T> denom;
  const auto w = taylor_raw_weights(Q, K, d, cfg, denom);
  std::vector<T> out(d.G * d.N * d.Dv, T(0));
  const T* vd = V.data().data();
  for (std::size_t g = 0; g < d.G; ++g) {
    for (std::size_t i = 0; i < d.N; ++i) {
      T* o = out.data() + (g * d.N + i) * d.Dv;
      for (std::size_t j = 0; j < d.N; ++j) {
        const T a = w[(g * d.N + i) * d.N + j];
        const T* vj = vd + (g * d.N + j) * d.Dv;
        for (std::size_t e = 0; e < d.Dv; ++e) o[e] += a * vj[e];
      }
      for (std::size_t e = 0; e < d.Dv; ++e) o[e] /= denom[g * d.N + i];
    }
  }
  return Tensor<T>(with_last(Q.shape(), d.Dv), std::move(out));
}

template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x) {
  const std::size_t D = x.dim(-1), R = x.numel() / D;
  std::vector<T> out(x.numel());
  std::vector<T> norms(R);
  for (std::size_t r = 0; r < R; ++r) {
    T ss = 0;
    for (std::size_t d = 0; d < D; ++d) ss += x.at(r * D + d) * x.at(r * D + d);
    norms[r] = std::sqrt(ss);
    const T n = std::max(norms[r], T(1e-12));
    for (std::size_t d = 0; d < D; ++d) out[r * D + d] = x.at(r * D + d) / n;
  }
  return make_result<T>(
      "l2_normalize", x.shape(), std::move(out), {x.node()},
      [norms = std::move(norms), D](Node<T>& self) {
        auto* gx = grad_sink(self, 0);
        if (!gx) return;
        for (std::size_t r = 0; r < norms.size(); ++r) {
          const T* y = self.data.data() + r * D;
          const T* g = self.grad.data() + r * D;
          if (norms[r] <= T(1e-12)) {
            for (std::size_t d = 0; d < D; ++d) (*gx)[r * D + d] += g[d] / T(1e-12);
            continue;
          }
          T dot = 0;
          for (std::size_t d = 0; d < D; ++d) dot += g[d] * y[d];
          for (std::size_t d = 0; d < D; ++d) (*gx)[r * D + d] += (g[d] - dot * y[d]) / norms[r];
        }
      });
}

template <typename T>
Tensor<T> taylor_attention_linear(const Tensor<T>& Qin, const Tensor<T>& Kin, const Tensor<T>& V,
                                  const AttentionConfig& cfg, FlopCounter* counter) {
  const auto d = attention_dims("taylor_attention_linear", Qin, Kin, V);
  const Tensor<T> Q = cfg.normalize_qk ? l2_normalize_rows(Qin) : Qin;
  const Tensor<T> K = cfg.normalize_qk ? l2_normalize_rows(Kin) : Kin;
  const T eps = static_cast<T>(cfg.eps);
  const T* q = Q.data().data();
  const T* k = K.data().data();
  const T* v = V.data().data();

  // Per-group sums, kept for backward.
  std::vector<T> s_v(d.G * d.Dv, T(0)), s_kv(d.G * d.D * d.Dv, T(0)), s_k(d.G * d.D, T(0));
  std::vector<T> den(d.G * d.N);
  std::vector<T> out(d.G * d.N * d.Dv);
  for (std::size_t g = 0; g < d.G; ++g) {
    T* sv = s_v.data() + g * d.Dv;
    T* skv = s_kv.data() + g * d.D * d.Dv;
    T* sk = s_k.data() + g * d.D;
    for (std::size_t j = 0; j < d.N; ++j) {
      const T* kj = k + (g * d.N + j) * d.D;
      const T* vj = v + (g * d.N + j) * d.Dv;
      for (std::size_t e = 0; e < d.Dv; ++e) sv[e] += vj[e];
      for (std::size_t c = 0; c < d.D; ++c) {
        sk[c] += kj[c];
        for (std::size_t e = 0; e < d.Dv; ++e) skv[c * d.Dv + e] += kj[c] * vj[e];
      }
    }
    for (std::size_t i = 0; i < d.N; ++i) {
      const T* qi = q + (g * d.N + i) * d.D;
      T* o = out.data() + (g * d.N + i) * d.Dv;
      T qs = 0;
      for (std::size_t c = 0; c < d.D; ++c) qs += qi[c] * sk[c];
      const T raw = static_cast<T>(d.N) + qs;
      if (!cfg.normalize_qk && std::abs(raw) < eps) {
        throw NumericError("taylor attention: degenerate denominator at row " + std::to_string(i));
      }
      const T dn = raw + eps;
      den[g * d.N + i] = dn;
      for (std::size_t e = 0; e < d.Dv; ++e) o[e] = sv[e];
      for (std::size_t c = 0; c < d.D; ++c) {
        const T qc = qi[c];
        for (std::size_t e = 0; e < d.Dv; ++e) o[e] += qc * skv[c * d.Dv + e];
      }
      for (std::size_t e = 0; e < d.Dv; ++e) o[e] /= dn;
    }
  }
  count(counter, d.G * d.N * (d.D * d.Dv + d.D + d.Dv));   // key/value sums
  count(counter, d.G * d.N * (d.D * d.Dv + d.D + d.Dv));   // per-query numerator, denominator, divide

  auto qn = Q.node();
  auto kn = K.node();
  auto vn = V.node();
  return make_result<T>(
      "taylor_attention_linear", with_last(Qin.shape(), d.Dv), std::move(out), {qn, kn, vn},
      [qn, kn, vn, d, s_kv = std::move(s_kv), s_k = std::move(s_k),
       den = std::move(den)](Node<T>& self) {
        auto* gq = grad_sink(self, 0);
        auto* gk = grad_sink(self, 1);
        auto* gv = grad_sink(self, 2);
        std::vector<T> dnum(d.Dv), d_skv(d.D * d.Dv), d_sv(d.Dv), d_sk(d.D);
        for (std::size_t g = 0; g < d.G; ++g) {
          const T* skv = s_kv.data() + g * d.D * d.Dv;
          const T* sk = s_k.data() + g * d.D;
          std::fill(d_skv.begin(), d_skv.end(), T(0));
          std::fill(d_sv.begin(), d_sv.end(), T(0));
          std::fill(d_sk.begin(), d_sk.end(), T(0));
          for (std::size_t i = 0; i < d.N; ++i) {
            const std::size_t row = g * d.N + i;
            const T* gi = self.grad.data() + row * d.Dv;
            const T* oi = self.data.data() + row * d.Dv;
            const T* qi = qn->data.data() + row * d.D;
            const T dn = den[row];
            T go = 0;
            for (std::size_t e = 0; e < d.Dv; ++e) {
              dnum[e] = gi[e] / dn;
              go += gi[e] * oi[e];
            }
            const T dden = -go / dn;
            for (std::size_t c = 0; c < d.D; ++c) {
              T acc = dden * sk[c];
              for (std::size_t e = 0; e < d.Dv; ++e) {
                acc += skv[c * d.Dv + e] * dnum[e];
                d_skv[c * d.Dv + e] += qi[c] * dnum[e];
              }
              if (gq) (*gq)[row * d.D + c] += acc;
              d_sk[c] += dden * qi[c];
            }
            for (std::size_t e = 0; e < d.Dv; ++e) d_sv[e] += dnum[e];
          }
          for (std::size_t j = 0; j < d.N; ++j) {
            const std::size_t row = g * d.N + j;
            const T* kj = kn->data.data() + row * d.D;
            const T* vj = vn->data.data() + row * d.Dv;
            for (std::size_t c = 0; c < d.D; ++c) {
              if (gk) {
                T acc = d_sk[c];
                for (std::size_t e = 0; e < d.Dv; ++e) acc += d_skv[c * d.Dv + e] * vj[e];
                (*gk)[row * d.D + c] += acc;
              }
            }
            if (gv) {
              for (std::size_t e = 0; e < d.Dv; ++e) {
                T acc = d_sv[e];
                for (std::size_t c = 0; c < d.D; ++c) acc += kj[c] * d_skv[c * d.Dv + e];
                (*gv)[row * d.Dv + e] += acc;
              }
            }
          }
        }
      });
}

FlopReport complexity_estimate(AttentionKind kind, std::uint64_t t, std::uint64_t f,
                               std::uint64_t D) {
  if (t == 0 || f == 0 || D == 0) {
    throw std::invalid_argument("complexity_estimate: t, f, D must be positive");
  }
  using wide = unsigned __int128;
  const wide tf = static_cast<wide>(t) * f;
  const wide d = D;
  const wide msa = 4 * tf * d * d + 2 * tf * tf * d;
  const wide tmsa = 18 * tf * d + 2 * tf * d * d;
  constexpr wide limit = std::numeric_limits<std::uint64_t>::max();
  if (msa > limit || tmsa > limit) throw std::overflow_error("complexity_estimate: exceeds 64 bits");
  FlopReport r;
  r.kind = kind;
  r.t = t;
  r.f = f;
  r.D = D;
  r.analytic_msa = static_cast<std::uint64_t>(msa);
  r.analytic_tmsa = static_cast<std::uint64_t>(tmsa);
  return r;
}

FlopReport measure_flops(AttentionKind kind, std::uint64_t t, std::uint64_t f, std::uint64_t D,
                         std::uint64_t seed) {
  auto r = complexity_estimate(kind, t, f, D);
  Rng rng(seed);
  const Shape shape{t * f, D};
  auto Q = uniform_tensor<double>(shape, -1, 1, rng);
  auto K = uniform_tensor<double>(shape, -1, 1, rng);
  auto V = uniform_tensor<double>(shape, -1, 1, rng);
  FlopCounter counter;
  NoGradGuard guard;
  if (kind == AttentionKind::msa) {
    softmax_attention(Q, K, V, &counter);
  } else {
    taylor_attention_linear(Q, K, V, AttentionConfig{}, &counter);
  }
  r.measured = counter.madds;
  return r;
}

#define MUSE_INSTANTIATE_ATTENTION(T)                                                            \
  template Tensor<T> softmax_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                       FlopCounter*);                                           \
  template Tensor<T> softmax_attention_weights(const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> taylor_attention_direct(const Tensor<T>&, const Tensor<T>&,                \
                                             const Tensor<T>&, const AttentionConfig&);         \
  template Tensor<T> taylor_attention_weights(const Tensor<T>&, const Tensor<T>&,               \
                                              const AttentionConfig&);                          \
  template Tensor<T> taylor_attention_linear(const Tensor<T>&, const Tensor<T>&,                \
                                             const Tensor<T>&, const AttentionConfig&,          \
                                             FlopCounter*);                                     \
  template Tensor<T> l2_normalize_rows(const Tensor<T>&);

MUSE_INSTANTIATE_ATTENTION(float)
MUSE_INSTANTIATE_ATTENTION(double)

}  // namespace muse
