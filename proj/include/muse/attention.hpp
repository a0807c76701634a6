#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "muse/tensor.hpp"

namespace muse {

struct AttentionConfig {
  std::size_t heads = 2;
  double eps = 1e-6;
  // L2-normalize query/key rows so every first-order weight 1 + q.k lies in [0, 2].
  bool normalize_qk = true;

  void validate(std::size_t channels) const;
};

// Multiply-add tally filled in by instrumented kernels.
struct FlopCounter {
  std::uint64_t madds = 0;
};

enum class AttentionKind { msa, tmsa };

std::string to_string(AttentionKind kind);
AttentionKind parse_attention_kind(const std::string& s);

struct FlopReport {
  AttentionKind kind = AttentionKind::tmsa;
  std::uint64_t t = 0, f = 0, D = 0;
  std::uint64_t analytic_msa = 0;
  std::uint64_t analytic_tmsa = 0;
  std::uint64_t measured = 0;

  std::uint64_t analytic() const { return kind == AttentionKind::msa ? analytic_msa : analytic_tmsa; }
};

// Softmax attention, out_i = sum_j softmax_j(q_i.k_j / sqrt(D)) v_j.
// Q, K: [..., N, D]; V: [..., N, Dv]. Forward only.
template <typename T>
Tensor<T> softmax_attention(const Tensor<T>& Q, const Tensor<T>& K, const Tensor<T>& V,
                            FlopCounter* counter = nullptr);

// Row-stochastic softmax weights [..., N, N].
template <typename T>
Tensor<T> softmax_attention_weights(const Tensor<T>& Q, const Tensor<T>& K);

// First-order Taylor attention evaluated literally with the N x N weight
// matrix w_ij = 1 + q_i.k_j. Forward only; the oracle for the linear form.
template <typename T>
Tensor<T> taylor_attention_direct(const Tensor<T>& Q, const Tensor<T>& K, const Tensor<T>& V,
                                  const AttentionConfig& cfg);

// Normalized Taylor weights w_ij / (sum_j w_ij + eps), [..., N, N].
template <typename T>
Tensor<T> taylor_attention_weights(const Tensor<T>& Q, const Tensor<T>& K,
                                   const AttentionConfig& cfg);

// Same result in O(N D Dv): out_i = (S_v + q_i S_kv) / (N + q_i.S_k + eps)
// with S_v = sum v_j, S_kv = sum k_j v_j^T, S_k = sum k_j. Differentiable.
template <typename T>
Tensor<T> taylor_attention_linear(const Tensor<T>& Q, const Tensor<T>& K, const Tensor<T>& V,
                                  const AttentionConfig& cfg, FlopCounter* counter = nullptr);

// Row-wise x / max(|x|, 1e-12) over the last dim. Differentiable.
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x);

// Analytic operation counts:
//   msa : 4 t f D^2 + 2 t^2 f^2 D
//   tmsa: 18 t f D + 2 t f D^2
// Throws std::overflow_error past 64 bits.
FlopReport complexity_estimate(AttentionKind kind, std::uint64_t t, std::uint64_t f,
                               std::uint64_t D);

// Runs the instrumented kernel on N = t*f random tokens of width D and
// records its multiply-add count in `measured`.
FlopReport measure_flops(AttentionKind kind, std::uint64_t t, std::uint64_t f, std::uint64_t D,
                         std::uint64_t seed = 0);

}  // namespace muse
