#include "turbo/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "turbo/kernels.hpp"

namespace turbo::ops {

namespace {

bool recording(std::initializer_list<const Tensor*> inputs) {
  if (!active_tape()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad) return true;
  return false;
}

Tensor make_output(const std::vector<int>& shape, bool track) {
  Tensor out = Tensor::zeros(shape, track);
  return out;
}

void record(const char* op, std::function<void()> fn) {
  active_tape()->nodes.push_back({op, std::move(fn)});
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape)
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + a.shape_str() + " x " + b.shape_str());
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const bool track = recording({&a, &b});
  Tensor out = make_output({m, n}, track);
  kernels::matmul_nn(out.ptr(), a.ptr(), b.ptr(), m, k, n, false);
  ensure_finite(out, "matmul");
  if (track) {
    record("matmul", [a, b, out, m, k, n]() {
      if (a.requires_grad)
        kernels::matmul_nt(a.grad_ptr(), out.grad_ptr(), b.ptr(), m, n, k, true);
      if (b.requires_grad)
        kernels::matmul_tn(b.grad_ptr(), a.ptr(), out.grad_ptr(), m, k, n, true);
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  const bool track = recording({&a, &b});
  Tensor out = make_output(a.shape, track);
  kernels::add(out.ptr(), a.ptr(), b.ptr(), out.numel());
  ensure_finite(out, "add");
  if (track) {
    record("add", [a, b, out]() {
      const std::size_t n = out.numel();
      const float* g = out.grad_ptr();
      if (a.requires_grad) {
        float* ga = a.grad_ptr();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (b.requires_grad) {
        float* gb = b.grad_ptr();
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  const bool track = recording({&a, &b});
  Tensor out = make_output(a.shape, track);
  kernels::mul(out.ptr(), a.ptr(), b.ptr(), out.numel());
  ensure_finite(out, "mul");
  if (track) {
    record("mul", [a, b, out]() {
      const std::size_t n = out.numel();
      const float* g = out.grad_ptr();
      if (a.requires_grad) {
        float* ga = a.grad_ptr();
        const float* pb = b.ptr();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * pb[i];
      }
      if (b.requires_grad) {
        float* gb = b.grad_ptr();
        const float* pa = a.ptr();
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * pa[i];
      }
    });
  }
  return out;
}

Tensor bias_add(const Tensor& x, const Tensor& bias) {
  if (bias.ndim() != 1 || x.ndim() < 1 || x.shape.back() != bias.dim(0))
    throw DimensionError("bias_add: shapes " + x.shape_str() + " + " + bias.shape_str());
  const int d = bias.dim(0);
  const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
  const bool track = recording({&x, &bias});
  Tensor out = make_output(x.shape, track);
  const float* px = x.ptr();
  const float* pb = bias.ptr();
  float* po = out.ptr();
  for (std::size_t r = 0; r < rows; ++r)
    for (int j = 0; j < d; ++j) po[r * d + j] = px[r * d + j] + pb[j];
  ensure_finite(out, "bias_add");
  if (track) {
    record("bias_add", [x, bias, out, rows, d]() {
      const float* g = out.grad_ptr();
      if (x.requires_grad) {
        float* gx = x.grad_ptr();
        const std::size_t n = out.numel();
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i];
      }
      if (bias.requires_grad) {
        float* gb = bias.grad_ptr();
        for (std::size_t r = 0; r < rows; ++r)
          for (int j = 0; j < d; ++j) gb[j] += g[r * static_cast<std::size_t>(d) + j];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, float s) {
  const bool track = recording({&a});
  Tensor out = make_output(a.shape, track);
  kernels::scale(out.ptr(), a.ptr(), s, out.numel());
  ensure_finite(out, "scale");
  if (track) {
    record("scale", [a, out, s]() {
      if (!a.requires_grad) return;
      float* ga = a.grad_ptr();
      const float* g = out.grad_ptr();
      const std::size_t n = out.numel();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * s;
    });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  const bool track = recording({&x});
  Tensor out = make_output(x.shape, track);
  kernels::gelu(out.ptr(), x.ptr(), out.numel());
  ensure_finite(out, "gelu");
  if (track) {
    record("gelu", [x, out]() {
      if (!x.requires_grad) return;
      kernels::gelu_backward(x.grad_ptr(), x.ptr(), out.grad_ptr(), out.numel());
    });
  }
  return out;
}

Tensor rmsnorm(const Tensor& x, const Tensor& weight, float eps) {
  if (weight.ndim() != 1 || x.shape.back() != weight.dim(0))
    throw DimensionError("rmsnorm: shapes " + x.shape_str() + " with weight " +
                         weight.shape_str());
  const int d = weight.dim(0);
  const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
  const bool track = recording({&x, &weight});
  Tensor out = make_output(x.shape, track);
  auto inv_rms = std::make_shared<std::vector<float>>(rows);
  const float* px = x.ptr();
  const float* pw = weight.ptr();
  float* po = out.ptr();
#pragma omp parallel for schedule(static) if (rows * static_cast<std::size_t>(d) > 16384)
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r) {
    const float* xr = px + r * d;
    double ss = 0.0;
    for (int j = 0; j < d; ++j) ss += static_cast<double>(xr[j]) * xr[j];
    const float inv = static_cast<float>(1.0 / std::sqrt(ss / d + eps));
    (*inv_rms)[static_cast<std::size_t>(r)] = inv;
    float* orow = po + r * d;
    for (int j = 0; j < d; ++j) orow[j] = xr[j] * inv * pw[j];
  }
  ensure_finite(out, "rmsnorm");
  if (track) {
    record("rmsnorm", [x, weight, out, inv_rms, rows, d]() {
      const float* g = out.grad_ptr();
      const float* px2 = x.ptr();
      const float* pw2 = weight.ptr();
      if (x.requires_grad) {
        float* gx = x.grad_ptr();
        for (std::size_t r = 0; r < rows; ++r) {
          const float inv = (*inv_rms)[r];
          const float* xr = px2 + r * static_cast<std::size_t>(d);
          const float* gr = g + r * static_cast<std::size_t>(d);
          double dot = 0.0;
          for (int j = 0; j < d; ++j)
            dot += static_cast<double>(gr[j]) * pw2[j] * xr[j];
          const float c = static_cast<float>(dot) * inv * inv * inv / static_cast<float>(d);
          float* gxr = gx + r * static_cast<std::size_t>(d);
          for (int j = 0; j < d; ++j) gxr[j] += gr[j] * pw2[j] * inv - xr[j] * c;
        }
      }
      if (weight.requires_grad) {
        float* gw = weight.grad_ptr();
        for (std::size_t r = 0; r < rows; ++r) {
          const float inv = (*inv_rms)[r];
          const float* xr = px2 + r * static_cast<std::size_t>(d);
          const float* gr = g + r * static_cast<std::size_t>(d);
          for (int j = 0; j < d; ++j) gw[j] += gr[j] * xr[j] * inv;
        }
      }
    });
  }
  return out;
}

Tensor softmax(const Tensor& x, float temperature) {
  if (!(temperature > 0.0f)) throw ParamError("softmax: temperature must be > 0");
  const int n = x.shape.back();
  const std::size_t rows = x.numel() / static_cast<std::size_t>(n);
  const bool track = recording({&x});
  Tensor out = make_output(x.shape, track);
  const float* px = x.ptr();
  float* po = out.ptr();
#pragma omp parallel for schedule(static) if (rows * static_cast<std::size_t>(n) > 16384)
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r) {
    const float* xr = px + r * n;
    float mx = xr[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    float* orow = po + r * n;
    for (int j = 0; j < n; ++j) {
      const double e = std::exp(static_cast<double>(xr[j] - mx) / temperature);
      orow[j] = static_cast<float>(e);
      sum += e;
    }
    const float invs = static_cast<float>(1.0 / sum);
    for (int j = 0; j < n; ++j) orow[j] *= invs;
  }
  ensure_finite(out, "softmax");
  if (track) {
    record("softmax", [x, out, rows, n, temperature]() {
      if (!x.requires_grad) return;
      float* gx = x.grad_ptr();
      const float* g = out.grad_ptr();
      const float* po2 = out.ptr();
      for (std::size_t r = 0; r < rows; ++r) {
        const float* sr = po2 + r * static_cast<std::size_t>(n);
        const float* gr = g + r * static_cast<std::size_t>(n);
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += static_cast<double>(sr[j]) * gr[j];
        float* gxr = gx + r * static_cast<std::size_t>(n);
        for (int j = 0; j < n; ++j)
          gxr[j] += sr[j] * (gr[j] - static_cast<float>(dot)) / temperature;
      }
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<std::uint8_t>& mask) {
  if (logits.ndim() != 2)
    throw DimensionError("cross_entropy: logits must be 2-d, got " + logits.shape_str());
  const int n = logits.dim(0), v = logits.dim(1);
  if (targets.size() != static_cast<std::size_t>(n) || mask.size() != static_cast<std::size_t>(n))
    throw DimensionError("cross_entropy: targets/mask length must equal logits rows");
  std::size_t count = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    ++count;
    if (targets[i] < 0 || targets[i] >= v)
      throw ParamError("cross_entropy: target " + std::to_string(targets[i]) +
                       " out of range at row " + std::to_string(i));
  }
  if (count == 0) throw ParamError("cross_entropy: all positions masked; mean undefined");

  const bool track = recording({&logits});
  const float* pl = logits.ptr();
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    const float* row = pl + static_cast<std::size_t>(i) * v;
    float mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < v; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
    total += std::log(sum) + mx - row[targets[static_cast<std::size_t>(i)]];
  }
  Tensor out = make_output({1}, track);
  (*out.data)[0] = static_cast<float>(total / static_cast<double>(count));
  ensure_finite(out, "cross_entropy");
  if (track) {
    record("cross_entropy", [logits, out, targets, mask, n, v, count]() {
      if (!logits.requires_grad) return;
      const float gscale = out.grad_ptr()[0] / static_cast<float>(count);
      const float* pl2 = logits.ptr();
      float* gl = logits.grad_ptr();
#pragma omp parallel for schedule(static) if (static_cast<std::size_t>(n) * v > 16384)
      for (int i = 0; i < n; ++i) {
        if (!mask[static_cast<std::size_t>(i)]) continue;
        const float* row = pl2 + static_cast<std::size_t>(i) * v;
        float* grow = gl + static_cast<std::size_t>(i) * v;
        float mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < v; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
        const double inv = 1.0 / sum;
        for (int j = 0; j < v; ++j) {
          float p = static_cast<float>(std::exp(static_cast<double>(row[j] - mx)) * inv);
          if (j == targets[static_cast<std::size_t>(i)]) p -= 1.0f;
          grow[j] += p * gscale;
        }
      }
    });
  }
  return out;
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  if (table.ndim() != 2)
    throw DimensionError("embedding: table must be 2-d, got " + table.shape_str());
  const int v = table.dim(0), d = table.dim(1);
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] < 0 || ids[i] >= v)
      throw ParamError("embedding: id " + std::to_string(ids[i]) + " out of range at " +
                       std::to_string(i));
  const int n = static_cast<int>(ids.size());
  const bool track = recording({&table});
  Tensor out = make_output({n, d}, track);
  const float* pt = table.ptr();
  float* po = out.ptr();
  for (int i = 0; i < n; ++i)
    std::memcpy(po + static_cast<std::size_t>(i) * d,
                pt + static_cast<std::size_t>(ids[static_cast<std::size_t>(i)]) * d,
                sizeof(float) * static_cast<std::size_t>(d));
  ensure_finite(out, "embedding");
  if (track) {
    record("embedding", [table, out, ids, d]() {
      if (!table.requires_grad) return;
      float* gt = table.grad_ptr();
      const float* g = out.grad_ptr();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        float* trow = gt + static_cast<std::size_t>(ids[i]) * d;
        const float* grow = g + i * static_cast<std::size_t>(d);
        for (int j = 0; j < d; ++j) trow[j] += grow[j];
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) throw DimensionError("transpose: expects 2-d, got " + a.shape_str());
  const int m = a.dim(0), n = a.dim(1);
  const bool track = recording({&a});
  Tensor out = make_output({n, m}, track);
  const float* pa = a.ptr();
  float* po = out.ptr();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      po[static_cast<std::size_t>(j) * m + i] = pa[static_cast<std::size_t>(i) * n + j];
  ensure_finite(out, "transpose");
  if (track) {
    record("transpose", [a, out, m, n]() {
      if (!a.requires_grad) return;
      float* ga = a.grad_ptr();
      const float* g = out.grad_ptr();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          ga[static_cast<std::size_t>(i) * n + j] += g[static_cast<std::size_t>(j) * m + i];
    });
  }
  return out;
}

Tensor causal_mask_add(const Tensor& scores, int q_offset) {
  if (scores.ndim() < 2)
    throw DimensionError("causal_mask_add: expects at least 2-d, got " + scores.shape_str());
  if (q_offset < 0) throw ParamError("causal_mask_add: q_offset must be >= 0");
  const int tk = scores.shape.back();
  const int tq = scores.shape[scores.shape.size() - 2];
  const std::size_t planes = scores.numel() / (static_cast<std::size_t>(tq) * tk);
  const bool track = recording({&scores});
  Tensor out = make_output(scores.shape, track);
  const float* ps = scores.ptr();
  float* po = out.ptr();
  constexpr float kNegLarge = -1e30f;
  for (std::size_t p = 0; p < planes; ++p) {
    for (int qi = 0; qi < tq; ++qi) {
      const std::size_t base = (p * tq + static_cast<std::size_t>(qi)) * tk;
      const int qpos = q_offset + qi;
      for (int j = 0; j < tk; ++j)
        po[base + j] = ps[base + j] + (j > qpos ? kNegLarge : 0.0f);
    }
  }
  ensure_finite(out, "causal_mask_add");
  if (track) {
    // additive mask: gradient passes through unchanged everywhere
    record("causal_mask_add", [scores, out]() {
      if (!scores.requires_grad) return;
      float* gs = scores.grad_ptr();
      const float* g = out.grad_ptr();
      const std::size_t n = out.numel();
      for (std::size_t i = 0; i < n; ++i) gs[i] += g[i];
    });
  }
  return out;
}

Tensor concat_seq(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ParamError("concat_seq: no parts");
  for (const Tensor& p : parts)
    if (p.ndim() != 3) throw DimensionError("concat_seq: parts must be 3-d, got " + p.shape_str());
  const int b = parts[0].dim(0), d = parts[0].dim(2);
  int total = 0;
  for (const Tensor& p : parts) {
    if (p.dim(0) != b || p.dim(2) != d)
      throw DimensionError("concat_seq: mismatched part shape " + p.shape_str());
    total += p.dim(1);
  }
  bool any_grad = false;
  for (const Tensor& p : parts) any_grad |= p.requires_grad;
  const bool track = active_tape() != nullptr && any_grad;
  Tensor out = make_output({b, total, d}, track);
  float* po = out.ptr();
  int off = 0;
  for (const Tensor& p : parts) {
    const int t = p.dim(1);
    const float* pp = p.ptr();
    for (int bi = 0; bi < b; ++bi)
      std::memcpy(po + (static_cast<std::size_t>(bi) * total + off) * d,
                  pp + static_cast<std::size_t>(bi) * t * d,
                  sizeof(float) * static_cast<std::size_t>(t) * d);
    off += t;
  }
  ensure_finite(out, "concat_seq");
  if (track) {
    record("concat_seq", [parts, out, b, total, d]() {
      const float* g = out.grad_ptr();
      int off2 = 0;
      for (const Tensor& p : parts) {
        const int t = p.dim(1);
        if (p.requires_grad) {
          float* gp = p.grad_ptr();
          for (int bi = 0; bi < b; ++bi) {
            const float* src = g + (static_cast<std::size_t>(bi) * total + off2) * d;
            float* dst = gp + static_cast<std::size_t>(bi) * t * d;
            for (std::size_t i = 0; i < static_cast<std::size_t>(t) * d; ++i) dst[i] += src[i];
          }
        }
        off2 += t;
      }
    });
  }
  return out;
}

Tensor slice_seq(const Tensor& x, int start, int count) {
  if (x.ndim() != 3) throw DimensionError("slice_seq: expects 3-d, got " + x.shape_str());
  const int b = x.dim(0), t = x.dim(1), d = x.dim(2);
  if (start < 0 || count <= 0 || start + count > t)
    throw DimensionError("slice_seq: range [" + std::to_string(start) + "," +
                         std::to_string(start + count) + ") outside sequence of length " +
                         std::to_string(t));
  const bool track = recording({&x});
  Tensor out = make_output({b, count, d}, track);
  const float* px = x.ptr();
  float* po = out.ptr();
  for (int bi = 0; bi < b; ++bi)
    std::memcpy(po + static_cast<std::size_t>(bi) * count * d,
                px + (static_cast<std::size_t>(bi) * t + start) * d,
                sizeof(float) * static_cast<std::size_t>(count) * d);
  ensure_finite(out, "slice_seq");
  if (track) {
    record("slice_seq", [x, out, b, t, d, start, count]() {
      if (!x.requires_grad) return;
      float* gx = x.grad_ptr();
      const float* g = out.grad_ptr();
      for (int bi = 0; bi < b; ++bi) {
        float* dst = gx + (static_cast<std::size_t>(bi) * t + start) * d;
        const float* src = g + static_cast<std::size_t>(bi) * count * d;
        for (std::size_t i = 0; i < static_cast<std::size_t>(count) * d; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

namespace {

struct AttnDims {
  int b, tq, dk, heads, hd, total_keys;
  std::vector<int> chunk_len;
};

AttnDims attn_check(const Tensor& q, const std::vector<Tensor>& k_chunks,
                    const std::vector<Tensor>& v_chunks, int n_heads, int pos_offset) {
  if (q.ndim() != 3) throw DimensionError("masked_attention: q must be 3-d, got " + q.shape_str());
  if (k_chunks.empty() || k_chunks.size() != v_chunks.size())
    throw StateError("masked_attention: k/v chunk lists empty or mismatched");
  AttnDims dm;
  dm.b = q.dim(0);
  dm.tq = q.dim(1);
  dm.dk = q.dim(2);
  if (n_heads < 1 || dm.dk % n_heads != 0)
    throw DimensionError("masked_attention: width " + std::to_string(dm.dk) +
                         " not divisible by " + std::to_string(n_heads) + " heads");
  dm.heads = n_heads;
  dm.hd = dm.dk / n_heads;
  dm.total_keys = 0;
  for (std::size_t c = 0; c < k_chunks.size(); ++c) {
    const Tensor& kc = k_chunks[c];
    const Tensor& vc = v_chunks[c];
    if (kc.ndim() != 3 || kc.dim(0) != dm.b || kc.dim(2) != dm.dk || kc.shape != vc.shape)
      throw DimensionError("masked_attention: bad chunk shape " + kc.shape_str());
    dm.chunk_len.push_back(kc.dim(1));
    dm.total_keys += kc.dim(1);
  }
  if (pos_offset < 0 || dm.total_keys != pos_offset + dm.tq)
    throw StateError("masked_attention: cached key length " + std::to_string(dm.total_keys) +
                     " inconsistent with position offset " + std::to_string(pos_offset) +
                     " + group size " + std::to_string(dm.tq));
  return dm;
}

}  // namespace

Tensor masked_attention(const Tensor& q, const std::vector<Tensor>& k_chunks,
                        const std::vector<Tensor>& v_chunks, int n_heads, int pos_offset) {
  const AttnDims dm = attn_check(q, k_chunks, v_chunks, n_heads, pos_offset);
  const int b = dm.b, tq = dm.tq, dk = dm.dk, heads = dm.heads, hd = dm.hd;
  const float att_scale = 1.0f / std::sqrt(static_cast<float>(hd));

  bool any_grad = q.requires_grad;
  for (const Tensor& kc : k_chunks) any_grad |= kc.requires_grad;
  for (const Tensor& vc : v_chunks) any_grad |= vc.requires_grad;
  const bool track = active_tape() != nullptr && any_grad;

  // probs for query qi span keys 0..pos_offset+qi; rows packed per (b,h)
  std::size_t probs_per_bh = 0;
  std::vector<std::size_t> row_off(static_cast<std::size_t>(tq));
  for (int qi = 0; qi < tq; ++qi) {
    row_off[static_cast<std::size_t>(qi)] = probs_per_bh;
    probs_per_bh += static_cast<std::size_t>(pos_offset + qi + 1);
  }
  auto probs = std::make_shared<std::vector<float>>(
      static_cast<std::size_t>(b) * heads * probs_per_bh);

  // flat views of chunk base pointers for the inner loops
  std::vector<const float*> kptr(k_chunks.size()), vptr(v_chunks.size());
  for (std::size_t c = 0; c < k_chunks.size(); ++c) {
    kptr[c] = k_chunks[c].ptr();
    vptr[c] = v_chunks[c].ptr();
  }

  Tensor out = make_output({b, tq, dk}, track);
  float* po = out.ptr();
  const float* pq = q.ptr();
  const auto& clen = dm.chunk_len;
  const int nchunks = static_cast<int>(clen.size());

#pragma omp parallel for collapse(2) schedule(static)
  for (int bi = 0; bi < b; ++bi) {
    for (int h = 0; h < heads; ++h) {
      std::vector<double> srow(static_cast<std::size_t>(dm.total_keys));
      for (int qi = 0; qi < tq; ++qi) {
        const int klen = pos_offset + qi + 1;
        const float* qrow = pq + (static_cast<std::size_t>(bi) * tq + qi) * dk + h * hd;
        // scores over chunks in absolute key order
        int j = 0;
        double mx = -1e300;
        for (int c = 0; c < nchunks && j < klen; ++c) {
          const int tc = clen[static_cast<std::size_t>(c)];
          const float* kbase = kptr[static_cast<std::size_t>(c)] +
                               static_cast<std::size_t>(bi) * tc * dk + h * hd;
          for (int r = 0; r < tc && j < klen; ++r, ++j) {
            const float* krow = kbase + static_cast<std::size_t>(r) * dk;
            double dot = 0.0;
            for (int e = 0; e < hd; ++e) dot += static_cast<double>(qrow[e]) * krow[e];
            const double s = dot * att_scale;
            srow[static_cast<std::size_t>(j)] = s;
            mx = std::max(mx, s);
          }
        }
        double sum = 0.0;
        for (int t = 0; t < klen; ++t) sum += std::exp(srow[static_cast<std::size_t>(t)] - mx);
        const double inv = 1.0 / sum;
        float* prow = probs->data() +
                      (static_cast<std::size_t>(bi) * heads + h) * probs_per_bh +
                      row_off[static_cast<std::size_t>(qi)];
        for (int t = 0; t < klen; ++t)
          prow[t] = static_cast<float>(std::exp(srow[static_cast<std::size_t>(t)] - mx) * inv);
        // weighted value sum, accumulated per output element in double
        float* orow = po + (static_cast<std::size_t>(bi) * tq + qi) * dk + h * hd;
        for (int e = 0; e < hd; ++e) {
          double acc = 0.0;
          int jj = 0;
          for (int c = 0; c < nchunks && jj < klen; ++c) {
            const int tc = clen[static_cast<std::size_t>(c)];
            const float* vbase = vptr[static_cast<std::size_t>(c)] +
                                 static_cast<std::size_t>(bi) * tc * dk + h * hd;
            for (int r = 0; r < tc && jj < klen; ++r, ++jj)
              acc += static_cast<double>(prow[jj]) * vbase[static_cast<std::size_t>(r) * dk + e];
          }
          orow[e] = static_cast<float>(acc);
        }
      }
    }
  }
  ensure_finite(out, "masked_attention");

  if (track) {
    auto kcs = k_chunks;
    auto vcs = v_chunks;
    auto dims = std::make_shared<AttnDims>(dm);
    record("masked_attention",
           [q, kcs, vcs, out, probs, probs_per_bh, row_off, dims, att_scale, pos_offset]() {
             const int b2 = dims->b, tq2 = dims->tq, dk2 = dims->dk, heads2 = dims->heads,
                       hd2 = dims->hd;
             const auto& clen2 = dims->chunk_len;
             const int nch = static_cast<int>(clen2.size());
             const float* pq2 = q.ptr();
             const float* pg = out.grad_ptr();
             std::vector<const float*> kp(kcs.size()), vp(vcs.size());
             std::vector<float*> kg(kcs.size(), nullptr), vg(vcs.size(), nullptr);
             for (std::size_t c = 0; c < kcs.size(); ++c) {
               kp[c] = kcs[c].ptr();
               vp[c] = vcs[c].ptr();
               if (kcs[c].requires_grad) kg[c] = kcs[c].grad_ptr();
               if (vcs[c].requires_grad) vg[c] = vcs[c].grad_ptr();
             }
             float* gq = q.requires_grad ? q.grad_ptr() : nullptr;

#pragma omp parallel for collapse(2) schedule(static)
             for (int bi = 0; bi < b2; ++bi) {
               for (int h = 0; h < heads2; ++h) {
                 std::vector<float> dp(static_cast<std::size_t>(pos_offset + tq2));
                 for (int qi = 0; qi < tq2; ++qi) {
                   const int klen = pos_offset + qi + 1;
                   const float* prow = probs->data() +
                                       (static_cast<std::size_t>(bi) * heads2 + h) * probs_per_bh +
                                       row_off[static_cast<std::size_t>(qi)];
                   const float* grow =
                       pg + (static_cast<std::size_t>(bi) * tq2 + qi) * dk2 + h * hd2;
                   const float* qrow =
                       pq2 + (static_cast<std::size_t>(bi) * tq2 + qi) * dk2 + h * hd2;
                   // pass 1: dp_j = v_j . dout, dv_j += p_j * dout, s = sum p dp
                   double sdot = 0.0;
                   int j = 0;
                   for (int c = 0; c < nch && j < klen; ++c) {
                     const int tc = clen2[static_cast<std::size_t>(c)];
                     const float* vbase = vp[static_cast<std::size_t>(c)] +
                                          static_cast<std::size_t>(bi) * tc * dk2 + h * hd2;
                     float* vgbase = vg[static_cast<std::size_t>(c)]
                                         ? vg[static_cast<std::size_t>(c)] +
                                               static_cast<std::size_t>(bi) * tc * dk2 + h * hd2
                                         : nullptr;
                     for (int r = 0; r < tc && j < klen; ++r, ++j) {
                       const float* vrow = vbase + static_cast<std::size_t>(r) * dk2;
                       double dotv = 0.0;
                       for (int e = 0; e < hd2; ++e)
                         dotv += static_cast<double>(vrow[e]) * grow[e];
                       dp[static_cast<std::size_t>(j)] = static_cast<float>(dotv);
                       sdot += static_cast<double>(prow[j]) * dotv;
                       if (vgbase) {
                         float* vgrow = vgbase + static_cast<std::size_t>(r) * dk2;
                         for (int e = 0; e < hd2; ++e) vgrow[e] += prow[j] * grow[e];
                       }
                     }
                   }
                   // pass 2: ds_j = p_j (dp_j - s); dq += ds_j k_j scale; dk_j += ds_j q scale
                   j = 0;
                   for (int c = 0; c < nch && j < klen; ++c) {
                     const int tc = clen2[static_cast<std::size_t>(c)];
                     const float* kbase = kp[static_cast<std::size_t>(c)] +
                                          static_cast<std::size_t>(bi) * tc * dk2 + h * hd2;
                     float* kgbase = kg[static_cast<std::size_t>(c)]
                                         ? kg[static_cast<std::size_t>(c)] +
                                               static_cast<std::size_t>(bi) * tc * dk2 + h * hd2
                                         : nullptr;
                     for (int r = 0; r < tc && j < klen; ++r, ++j) {
                       const float ds =
                           prow[j] * (dp[static_cast<std::size_t>(j)] - static_cast<float>(sdot)) *
                           att_scale;
                       const float* krow = kbase + static_cast<std::size_t>(r) * dk2;
                       if (gq) {
                         float* gqrow = gq + (static_cast<std::size_t>(bi) * tq2 + qi) * dk2 +
                                        h * hd2;
                         for (int e = 0; e < hd2; ++e) gqrow[e] += ds * krow[e];
                       }
                       if (kgbase) {
                         float* kgrow = kgbase + static_cast<std::size_t>(r) * dk2;
                         for (int e = 0; e < hd2; ++e) kgrow[e] += ds * qrow[e];
                       }
                     }
                   }
                 }
               }
             }
           });
  }
  return out;
}

}  // namespace turbo::ops
