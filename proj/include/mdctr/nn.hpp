#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mdctr/rng.hpp"
#include "mdctr/tensor.hpp"
#include "mdctr/text.hpp"

namespace mdctr {

/// Token ids and attention mask for a whole batch, row-major (batch x seq).
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> mask;

  static TokenBatch from_sequences(const std::vector<TokenSequence>& seqs) {
    TokenBatch tb;
    tb.batch = seqs.size();
    tb.seq = seqs.empty() ? 0 : seqs.front().ids.size();
    tb.ids.reserve(tb.batch * tb.seq);
    tb.mask.reserve(tb.batch * tb.seq);
    for (const auto& s : seqs) {
      if (s.ids.size() != tb.seq) throw ValidationError("token batch: ragged sequence lengths");
      tb.ids.insert(tb.ids.end(), s.ids.begin(), s.ids.end());
      tb.mask.insert(tb.mask.end(), s.attention.begin(), s.attention.end());
    }
    return tb;
  }

  TokenBatch rows(const std::vector<std::size_t>& idx) const {
    TokenBatch tb;
    tb.batch = idx.size();
    tb.seq = seq;
    tb.ids.reserve(idx.size() * seq);
    tb.mask.reserve(idx.size() * seq);
    for (auto r : idx) {
      tb.ids.insert(tb.ids.end(), ids.begin() + r * seq, ids.begin() + (r + 1) * seq);
      tb.mask.insert(tb.mask.end(), mask.begin() + r * seq, mask.begin() + (r + 1) * seq);
    }
    return tb;
  }
};

template <class S>
struct Linear {
  Param<S> w, b;

  Linear() = default;
  Linear(const std::string& prefix, std::size_t in, std::size_t out, Rng& rng)
      : w(prefix + ".w", {in, out}), b(prefix + ".b", {out}) {
    w.init_xavier(rng, in, out);
  }

  Tensor<S> operator()(Tape<S>& t, Tensor<S> x2d) {
    return add(matmul(x2d, t.param(w)), t.param(b));
  }

  void collect(std::vector<Param<S>*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

/// Additive attention bias: 0 on attendable (key unmasked, and not in the
/// causal future), -1e9 elsewhere. Laid out (batch*heads) x seq x seq.
template <class S>
std::vector<S> attention_bias(const std::vector<std::uint8_t>& mask, std::size_t batch,
                              std::size_t seq, std::size_t heads, bool causal) {
  const S neg = static_cast<S>(-1e9);
  std::vector<S> bias(batch * heads * seq * seq, S(0));
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < seq; ++i)
      for (std::size_t j = 0; j < seq; ++j) {
        bool ok = mask[b * seq + j] != 0 && (!causal || j <= i);
        if (ok) continue;
        for (std::size_t h = 0; h < heads; ++h)
          bias[((b * heads + h) * seq + i) * seq + j] = neg;
      }
  return bias;
}

template <class S>
std::vector<S> attention_bias(const TokenBatch& tb, std::size_t heads, bool causal) {
  return attention_bias<S>(tb.mask, tb.batch, tb.seq, heads, causal);
}

/// Pre-norm transformer encoder block: x + MHSA(LN(x)), then x + FFN(LN(x)),
/// GELU feed-forward. Zeroing the two output projections turns the block
/// into an exact identity, which the ladder telescoping checks exploit.
template <class S>
struct TransformerBlock {
  std::size_t dim = 0, heads = 1, ffn = 0;
  Param<S> ln1_g, ln1_b, ln2_g, ln2_b;
  Linear<S> wq, wk, wv, wo, w1, w2;

  TransformerBlock() = default;
  TransformerBlock(const std::string& prefix, std::size_t dim_, std::size_t heads_, std::size_t ffn_,
                   Rng& rng)
      : dim(dim_),
        heads(heads_),
        ffn(ffn_),
        ln1_g(prefix + ".ln1.g", {dim_}),
        ln1_b(prefix + ".ln1.b", {dim_}),
        ln2_g(prefix + ".ln2.g", {dim_}),
        ln2_b(prefix + ".ln2.b", {dim_}),
        wq(prefix + ".attn.q", dim_, dim_, rng),
        wk(prefix + ".attn.k", dim_, dim_, rng),
        wv(prefix + ".attn.v", dim_, dim_, rng),
        wo(prefix + ".attn.o", dim_, dim_, rng),
        w1(prefix + ".ffn.up", dim_, ffn_, rng),
        w2(prefix + ".ffn.down", ffn_, dim_, rng) {
    if (dim_ % heads_ != 0) throw ValidationError("transformer block: dim not divisible by heads");
    ln1_g.fill(S(1));
    ln2_g.fill(S(1));
  }

  /// x: (b x s x d); bias: precomputed additive attention scores
  Tensor<S> forward(Tape<S>& t, Tensor<S> x, const std::vector<S>& bias) {
    const Shape& sx = x.shape();
    std::size_t b = sx[0], s = sx[1];
    std::size_t hd = dim / heads;

    auto x2 = reshape(x, {b * s, dim});
    auto normed = layer_norm(x2, t.param(ln1_g), t.param(ln1_b));
    auto q = split_heads(reshape(wq(t, normed), {b, s, dim}), heads);
    auto k = split_heads(reshape(wk(t, normed), {b, s, dim}), heads);
    auto v = split_heads(reshape(wv(t, normed), {b, s, dim}), heads);
    auto scores = scale(bmm(q, k, /*transpose_b=*/true), 1.0 / std::sqrt(static_cast<double>(hd)));
    auto biased = add(scores, t.constant({b * heads, s, s}, bias));
    auto attn = softmax(biased, 2);
    auto ctx = merge_heads(bmm(attn, v), heads);
    auto attn_out = wo(t, reshape(ctx, {b * s, dim}));
    auto mid = add(x2, attn_out);

    auto normed2 = layer_norm(mid, t.param(ln2_g), t.param(ln2_b));
    auto ffn_out = w2(t, gelu(w1(t, normed2)));
    auto out = add(mid, ffn_out);
    return reshape(out, {b, s, dim});
  }

  void collect(std::vector<Param<S>*>& out) {
    out.push_back(&ln1_g);
    out.push_back(&ln1_b);
    wq.collect(out);
    wk.collect(out);
    wv.collect(out);
    wo.collect(out);
    out.push_back(&ln2_g);
    out.push_back(&ln2_b);
    w1.collect(out);
    w2.collect(out);
  }

  /// zero the residual branches so the block computes the identity
  void make_identity() {
    wo.w.fill(S(0));
    wo.b.fill(S(0));
    w2.w.fill(S(0));
    w2.b.fill(S(0));
  }
};

template <class S>
std::size_t param_count(const std::vector<Param<S>*>& params) {
  std::size_t n = 0;
  for (auto* p : params) n += p->size();
  return n;
}

/// MLP head with ReLU hidden activations and a terminal sigmoid; emits one
/// probability per row. `dims` are the hidden widths (the final 1-wide
/// linear is implicit).
template <class S>
struct Tower {
  std::vector<Linear<S>> layers;

  Tower() = default;
  Tower(const std::string& prefix, std::size_t in, const std::vector<std::size_t>& dims, Rng& rng) {
    std::size_t cur = in;
    for (std::size_t i = 0; i < dims.size(); ++i) {
      layers.emplace_back(prefix + ".h" + std::to_string(i), cur, dims[i], rng);
      cur = dims[i];
    }
    layers.emplace_back(prefix + ".out", cur, 1, rng);
  }

  /// activations entering the final linear, (n x last_hidden)
  Tensor<S> penultimate(Tape<S>& t, Tensor<S> x2, double drop = 0.0, Rng* rng = nullptr) {
    Tensor<S> h = x2;
    for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
      h = relu(layers[i](t, h));
      if (drop > 0.0 && rng) h = dropout(h, drop, *rng);
    }
    return h;
  }

  /// (n x in) -> (n,) probabilities in (0,1)
  Tensor<S> forward(Tape<S>& t, Tensor<S> x2, double drop = 0.0, Rng* rng = nullptr) {
    auto h = penultimate(t, x2, drop, rng);
    auto logit = layers.back()(t, h);
    std::size_t n = x2.shape()[0];
    return sigmoid(reshape(logit, {n}));
  }

  void collect(std::vector<Param<S>*>& out) {
    for (auto& l : layers) l.collect(out);
  }
};

/// FNV-1a over the raw value bytes of a parameter group; bit-identical
/// serialization implies equal checksums.
template <class S>
std::uint64_t group_checksum(const std::vector<Param<S>*>& params) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const unsigned char* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto* p : params) {
    mix(reinterpret_cast<const unsigned char*>(p->name.data()), p->name.size());
    mix(reinterpret_cast<const unsigned char*>(p->value.data()), p->value.size() * sizeof(S));
  }
  return h;
}

}  // namespace mdctr
