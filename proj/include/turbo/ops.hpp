#pragma once

#include <cstdint>
#include <vector>

#include "turbo/tensor.hpp"

// Differentiable tensor ops. Every op validates shapes, checks its output for
// non-finite values, and records a backward rule on the active tape when any
// input requires grad. Gradients accumulate (+=) into input grad buffers.
namespace turbo::ops {

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);

// elementwise; shapes must match
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// x: [n0,...,d] + bias[d], broadcast over leading dims
Tensor bias_add(const Tensor& x, const Tensor& bias);

Tensor scale(const Tensor& a, float s);

Tensor gelu(const Tensor& x);

// rows over the last dim, scaled by 1/sqrt(mean(x^2)+eps) then by weight
Tensor rmsnorm(const Tensor& x, const Tensor& weight, float eps);

// softmax over the last dim of x / temperature; temperature must be > 0
Tensor softmax(const Tensor& x, float temperature);

// mean negative log-likelihood over unmasked rows of logits[n,V]
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<std::uint8_t>& mask);

// table: [V,d], ids in [0,V) -> [n,d]
Tensor embedding(const Tensor& table, const std::vector<int>& ids);

// [m,n] -> [n,m]
Tensor transpose(const Tensor& a);

// scores: [..., tq, tk]; adds -1e30 where key position j exceeds the query
// position q_offset + qi (keys at absolute positions 0..tk-1)
Tensor causal_mask_add(const Tensor& scores, int q_offset);

// concatenation along dim 1 of [b, t_i, d] tensors
Tensor concat_seq(const std::vector<Tensor>& parts);

// x: [b, t, d] -> [b, count, d] starting at `start` along dim 1
Tensor slice_seq(const Tensor& x, int start, int count);

// Multi-head causal attention over a chunked KV list (no concatenation).
// q: [b, tq, dk]; each k/v chunk: [b, tc_i, dk]; chunks cover absolute key
// positions 0..T-1 in order, and T must equal pos_offset + tq. Query qi sits
// at absolute position pos_offset + qi and attends keys at positions <= its
// own. Returns [b, tq, dk].
Tensor masked_attention(const Tensor& q, const std::vector<Tensor>& k_chunks,
                        const std::vector<Tensor>& v_chunks, int n_heads,
                        int pos_offset);

}  // namespace turbo::ops
