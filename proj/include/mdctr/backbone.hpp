#pragma once

/// Miniature transformer encoder exposing the full per-layer representation
/// collection for downstream taps: h_0 is the embedding output, h_l the
/// output of layer l, and forward_collect returns all L+1 of them.

#include <cmath>
#include <string>
#include <vector>

#include "mdctr/nn.hpp"

namespace mdctr {

enum class Pooling { Mean, FirstToken };

inline Pooling pooling_from_string(const std::string& s) {
  if (s == "mean") return Pooling::Mean;
  if (s == "first-token" || s == "first_token") return Pooling::FirstToken;
  throw ValidationError("unknown pooling '" + s + "' (expected mean|first-token)");
}

struct BackboneConfig {
  std::size_t layers = 8;
  std::size_t hidden = 128;
  std::size_t heads = 4;
  std::size_t ffn = 256;
  std::size_t max_seq_len = 128;
  std::size_t vocab_size = 0;  // set from the built vocabulary
  bool causal = false;
  Pooling pooling = Pooling::Mean;

  void validate() const {
    if (layers < 1) throw ValidationError("backbone: layers must be >= 1");
    if (hidden % heads != 0) throw ValidationError("backbone: hidden must be divisible by heads");
    if (vocab_size == 0) throw ValidationError("backbone: vocab_size not set");
    if (max_seq_len < 2) throw ValidationError("backbone: max_seq_len must be >= 2");
  }
};

/// The ordered collection of per-layer outputs for one batch, each
/// batch x seq x hidden, with the pad mask carried alongside.
template <class S>
struct TapSet {
  std::vector<Tensor<S>> h;  // exactly layers+1 entries, h[0] = embeddings
  std::size_t batch = 0, seq = 0;
  std::vector<std::uint8_t> mask;  // batch x seq
};

template <class S>
class Backbone {
 public:
  BackboneConfig cfg;
  Param<S> tok_emb;  // (vocab, hidden)
  Param<S> pos_emb;  // (max_seq_len, hidden)
  std::vector<TransformerBlock<S>> blocks;

  Backbone(BackboneConfig config, Rng& rng) : cfg(config) {
    cfg.validate();
    tok_emb = Param<S>("backbone.tok_emb", {cfg.vocab_size, cfg.hidden});
    pos_emb = Param<S>("backbone.pos_emb", {cfg.max_seq_len, cfg.hidden});
    tok_emb.init_normal(rng, 0.1);
    pos_emb.init_normal(rng, 0.02);
    blocks.reserve(cfg.layers);
    for (std::size_t l = 0; l < cfg.layers; ++l)
      blocks.emplace_back("backbone.l" + std::to_string(l), cfg.hidden, cfg.heads, cfg.ffn, rng);
  }

  std::vector<Param<S>*> params() {
    std::vector<Param<S>*> out{&tok_emb, &pos_emb};
    for (auto& b : blocks) b.collect(out);
    return out;
  }

  std::size_t parameter_count() { return param_count(params()); }

  /// token + learned positional embedding, (batch x seq x hidden)
  Tensor<S> embed(Tape<S>& t, const TokenBatch& tb) {
    for (auto id : tb.ids)
      if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size)
        throw ValidationError("embed: token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(cfg.vocab_size));
    if (tb.seq > cfg.max_seq_len)
      throw ValidationError("embed: sequence length " + std::to_string(tb.seq) +
                            " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    auto tok = embedding(t.param(tok_emb), tb.ids);
    std::vector<std::int32_t> positions(tb.seq);
    for (std::size_t i = 0; i < tb.seq; ++i) positions[i] = static_cast<std::int32_t>(i);
    auto pos = embedding(t.param(pos_emb), positions);  // (seq x hidden), broadcast over batch
    auto h0 = add(reshape(tok, {tb.batch, tb.seq, cfg.hidden}), pos);
    return h0;
  }

  /// run all layers, collecting every tap; aborts on NaN naming the layer
  TapSet<S> forward_collect(Tape<S>& t, const TokenBatch& tb) {
    TapSet<S> taps;
    taps.batch = tb.batch;
    taps.seq = tb.seq;
    taps.mask = tb.mask;
    taps.h.reserve(cfg.layers + 1);
    taps.h.push_back(embed(t, tb));
    auto bias = attention_bias<S>(tb.mask, tb.batch, tb.seq, cfg.heads, cfg.causal);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      auto h = blocks[l].forward(t, taps.h.back(), bias);
      for (S v : h.value())
        if (std::isnan(static_cast<double>(v)))
          throw NumericError("backbone: NaN in layer " + std::to_string(l + 1) + " output");
      taps.h.push_back(h);
    }
    return taps;
  }

  /// reduce a tap to one vector per sample
  Tensor<S> pool(Tape<S>& t, Tensor<S> h, const std::vector<std::uint8_t>& mask) const {
    (void)t;
    const Shape& sh = h.shape();
    std::size_t b = sh[0], s = sh[1];
    for (std::size_t bi = 0; bi < b; ++bi) {
      bool any = false;
      for (std::size_t si = 0; si < s; ++si) any = any || mask[bi * s + si];
      if (!any) throw ValidationError("pool: row " + std::to_string(bi) + " is fully masked");
    }
    if (cfg.pooling == Pooling::FirstToken) return select_pos(h, 0);
    return masked_mean_pool(h, mask);
  }
};

}  // namespace mdctr
