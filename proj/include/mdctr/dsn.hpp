#pragma once

/// One pluggable per-domain unit: a ladder stack tapping the backbone every
/// `tap_frequency` layers, a gate fusing the last ladder output with the
/// final backbone tap through attention pooling, and a tower producing the
/// domain's click probability. Parameter count is independent of every other
/// domain network, so units can be attached, frozen and detached freely.

#include <memory>
#include <string>
#include <vector>

#include "mdctr/backbone.hpp"
#include "mdctr/nn.hpp"

namespace mdctr {

enum class LadderKind { Mlp, Attention, Transformer };

inline LadderKind ladder_kind_from_string(const std::string& s) {
  if (s == "mlp") return LadderKind::Mlp;
  if (s == "attention") return LadderKind::Attention;
  if (s == "transformer") return LadderKind::Transformer;
  throw ValidationError("unknown ladder_block '" + s + "' (expected mlp|attention|transformer)");
}

inline std::string to_string(LadderKind k) {
  switch (k) {
    case LadderKind::Mlp: return "mlp";
    case LadderKind::Attention: return "attention";
    case LadderKind::Transformer: return "transformer";
  }
  return "transformer";
}

struct DsnConfig {
  std::string domain;
  std::size_t tap_frequency = 2;  // one ladder every this many backbone layers
  std::size_t ladder_dim = 64;
  std::size_t ladder_heads = 2;
  LadderKind ladder_block = LadderKind::Transformer;
  std::vector<std::size_t> tower_dims = {64, 32, 16};

  void validate(std::size_t backbone_layers) const {
    if (domain.empty()) throw ValidationError("dsn: empty domain name");
    if (tap_frequency == 0 || backbone_layers % tap_frequency != 0)
      throw ValidationError("dsn '" + domain + "': backbone layers (" +
                            std::to_string(backbone_layers) + ") not divisible by tap frequency (" +
                            std::to_string(tap_frequency) + ")");
    if (ladder_dim % ladder_heads != 0)
      throw ValidationError("dsn '" + domain + "': ladder_dim not divisible by ladder_heads");
  }
};

/// pre-norm residual self-attention, no feed-forward
template <class S>
struct AttentionBlock {
  std::size_t dim = 0, heads = 1;
  Param<S> ln_g, ln_b;
  Linear<S> wq, wk, wv, wo;

  AttentionBlock() = default;
  AttentionBlock(const std::string& prefix, std::size_t dim_, std::size_t heads_, Rng& rng)
      : dim(dim_),
        heads(heads_),
        ln_g(prefix + ".ln.g", {dim_}),
        ln_b(prefix + ".ln.b", {dim_}),
        wq(prefix + ".attn.q", dim_, dim_, rng),
        wk(prefix + ".attn.k", dim_, dim_, rng),
        wv(prefix + ".attn.v", dim_, dim_, rng),
        wo(prefix + ".attn.o", dim_, dim_, rng) {
    ln_g.fill(S(1));
  }

  Tensor<S> forward(Tape<S>& t, Tensor<S> x, const std::vector<S>& bias) {
    const Shape& sx = x.shape();
    std::size_t b = sx[0], s = sx[1];
    std::size_t hd = dim / heads;
    auto x2 = reshape(x, {b * s, dim});
    auto normed = layer_norm(x2, t.param(ln_g), t.param(ln_b));
    auto q = split_heads(reshape(wq(t, normed), {b, s, dim}), heads);
    auto k = split_heads(reshape(wk(t, normed), {b, s, dim}), heads);
    auto v = split_heads(reshape(wv(t, normed), {b, s, dim}), heads);
    auto scores = scale(bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(hd)));
    auto attn = softmax(add(scores, t.constant({b * heads, s, s}, bias)), 2);
    auto ctx = merge_heads(bmm(attn, v), heads);
    auto out = add(x2, wo(t, reshape(ctx, {b * s, dim})));
    return reshape(out, {b, s, dim});
  }

  void collect(std::vector<Param<S>*>& out) {
    out.push_back(&ln_g);
    out.push_back(&ln_b);
    wq.collect(out);
    wk.collect(out);
    wv.collect(out);
    wo.collect(out);
  }

  void make_identity() {
    wo.w.fill(S(0));
    wo.b.fill(S(0));
  }
};

/// pre-norm residual position-wise MLP
template <class S>
struct MlpBlock {
  std::size_t dim = 0;
  Param<S> ln_g, ln_b;
  Linear<S> up, down;

  MlpBlock() = default;
  MlpBlock(const std::string& prefix, std::size_t dim_, Rng& rng)
      : dim(dim_),
        ln_g(prefix + ".ln.g", {dim_}),
        ln_b(prefix + ".ln.b", {dim_}),
        up(prefix + ".mlp.up", dim_, dim_, rng),
        down(prefix + ".mlp.down", dim_, dim_, rng) {
    ln_g.fill(S(1));
  }

  Tensor<S> forward(Tape<S>& t, Tensor<S> x, const std::vector<S>&) {
    const Shape& sx = x.shape();
    std::size_t b = sx[0], s = sx[1];
    auto x2 = reshape(x, {b * s, dim});
    auto h = down(t, gelu(up(t, layer_norm(x2, t.param(ln_g), t.param(ln_b)))));
    return reshape(add(x2, h), {b, s, dim});
  }

  void collect(std::vector<Param<S>*>& out) {
    out.push_back(&ln_g);
    out.push_back(&ln_b);
    up.collect(out);
    down.collect(out);
  }

  void make_identity() {
    down.w.fill(S(0));
    down.b.fill(S(0));
  }
};

template <class S>
struct LadderBlock {
  LadderKind kind = LadderKind::Transformer;
  std::unique_ptr<TransformerBlock<S>> tr;
  std::unique_ptr<AttentionBlock<S>> at;
  std::unique_ptr<MlpBlock<S>> ml;

  LadderBlock(const std::string& prefix, const DsnConfig& cfg, Rng& rng) : kind(cfg.ladder_block) {
    switch (kind) {
      case LadderKind::Transformer:
        tr = std::make_unique<TransformerBlock<S>>(prefix, cfg.ladder_dim, cfg.ladder_heads,
                                                   2 * cfg.ladder_dim, rng);
        break;
      case LadderKind::Attention:
        at = std::make_unique<AttentionBlock<S>>(prefix, cfg.ladder_dim, cfg.ladder_heads, rng);
        break;
      case LadderKind::Mlp:
        ml = std::make_unique<MlpBlock<S>>(prefix, cfg.ladder_dim, rng);
        break;
    }
  }

  Tensor<S> forward(Tape<S>& t, Tensor<S> x, const std::vector<S>& bias) {
    switch (kind) {
      case LadderKind::Transformer: return tr->forward(t, x, bias);
      case LadderKind::Attention: return at->forward(t, x, bias);
      case LadderKind::Mlp: return ml->forward(t, x, bias);
    }
    throw ValidationError("ladder block: bad kind");
  }

  void collect(std::vector<Param<S>*>& out) {
    if (tr) tr->collect(out);
    if (at) at->collect(out);
    if (ml) ml->collect(out);
  }

  void make_identity() {
    if (tr) tr->make_identity();
    if (at) at->make_identity();
    if (ml) ml->make_identity();
  }
};

template <class S>
class DomainNetwork {
 public:
  DsnConfig cfg;
  bool frozen = false;

  std::vector<Param<S>> tap_proj;          // P_f: hidden -> ladder_dim, one per ladder
  std::vector<LadderBlock<S>> blocks;      // Ladder_1..F
  Param<S> gate_proj;                      // Q: hidden -> ladder_dim for the final tap
  Param<S> gate_key;                       // W_k: ladder_dim -> ladder_dim
  Param<S> gate_query;                     // W_q: ladder_dim -> 1
  Tower<S> tower;

  DomainNetwork(DsnConfig config, std::size_t backbone_layers, std::size_t backbone_hidden, Rng& rng)
      : cfg(std::move(config)) {
    cfg.validate(backbone_layers);
    std::size_t F = backbone_layers / cfg.tap_frequency;
    const std::string base = "dsn." + cfg.domain;
    tap_proj.reserve(F);
    blocks.reserve(F);
    for (std::size_t f = 1; f <= F; ++f) {
      Param<S> p(base + ".tap" + std::to_string(f) + ".proj", {backbone_hidden, cfg.ladder_dim});
      p.init_xavier(rng, backbone_hidden, cfg.ladder_dim);
      tap_proj.push_back(std::move(p));
      blocks.emplace_back(base + ".ladder" + std::to_string(f), cfg, rng);
    }
    gate_proj = Param<S>(base + ".gate.proj", {backbone_hidden, cfg.ladder_dim});
    gate_proj.init_xavier(rng, backbone_hidden, cfg.ladder_dim);
    gate_key = Param<S>(base + ".gate.key", {cfg.ladder_dim, cfg.ladder_dim});
    gate_key.init_xavier(rng, cfg.ladder_dim, cfg.ladder_dim);
    gate_query = Param<S>(base + ".gate.query", {cfg.ladder_dim, 1});
    gate_query.init_xavier(rng, cfg.ladder_dim, 1);
    tower = Tower<S>(base + ".tower", cfg.ladder_dim, cfg.tower_dims, rng);
  }

  std::size_t ladder_count() const { return blocks.size(); }

  std::vector<Param<S>*> params() {
    std::vector<Param<S>*> out;
    for (auto& p : tap_proj) out.push_back(&p);
    for (auto& b : blocks) b.collect(out);
    out.push_back(&gate_proj);
    out.push_back(&gate_key);
    out.push_back(&gate_query);
    tower.collect(out);
    return out;
  }

  /// Eq.-style ladder recursion with a learned down-projection at each tap:
  /// lad_1 = Ladder_1(P_1 h_phi); lad_f = Ladder_f(P_f h_{f*phi} + lad_{f-1})
  Tensor<S> ladder_forward(Tape<S>& t, const TapSet<S>& taps) {
    std::size_t L = taps.h.size() - 1;
    cfg.validate(L);
    std::size_t F = L / cfg.tap_frequency;
    if (F != blocks.size())
      throw ValidationError("dsn '" + cfg.domain + "': built for " + std::to_string(blocks.size()) +
                            " ladders but taps imply " + std::to_string(F));
    auto bias = attention_bias<S>(taps.mask, taps.batch, taps.seq, cfg.ladder_heads, false);
    Tensor<S> lad;
    for (std::size_t f = 1; f <= F; ++f) {
      auto h = taps.h[f * cfg.tap_frequency];
      auto proj2 = matmul(reshape(h, {taps.batch * taps.seq, h.shape()[2]}), t.param(tap_proj[f - 1]));
      auto proj = reshape(proj2, {taps.batch, taps.seq, cfg.ladder_dim});
      auto in = (f == 1) ? proj : add(proj, lad);
      lad = blocks[f - 1].forward(t, in, bias);
    }
    return lad;
  }

  /// attention weights and the concatenated feature rows they pool over
  struct GateParts {
    Tensor<S> attn;   // (b x 2s), sums to 1 per sample over unmasked positions
    Tensor<S> fused;  // (b x 2s x ladder_dim)
  };

  GateParts gate_parts(Tape<S>& t, Tensor<S> h_last, Tensor<S> lad,
                       const std::vector<std::uint8_t>& mask) {
    const Shape& sh = h_last.shape();
    std::size_t b = sh[0], s = sh[1], d = sh[2];
    bool any = false;
    for (auto m : mask) any = any || m;
    if (!any) throw ValidationError("gate: all positions masked");
    auto proj = reshape(matmul(reshape(h_last, {b * s, d}), t.param(gate_proj)), {b, s, cfg.ladder_dim});
    auto fused = concat_seq(proj, lad);  // (b x 2s x ladder_dim)
    std::size_t s2 = 2 * s;
    auto keys = tanh(matmul(reshape(fused, {b * s2, cfg.ladder_dim}), t.param(gate_key)));
    auto score = reshape(matmul(keys, t.param(gate_query)), {b, s2});
    std::vector<S> bias(b * s2, S(0));
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t si = 0; si < s; ++si)
        if (!mask[bi * s + si]) {
          bias[bi * s2 + si] = static_cast<S>(-1e9);
          bias[bi * s2 + s + si] = static_cast<S>(-1e9);
        }
    auto attn = softmax(add(score, t.constant({b, s2}, bias)), 1);
    return {attn, fused};
  }

  /// concat the projected final tap with the last ladder output along the
  /// sequence axis, score each position, softmax over unmasked positions
  /// (mask duplicated for both halves), and pool: R = A^T O.
  Tensor<S> gate_fuse(Tape<S>& t, Tensor<S> h_last, Tensor<S> lad, const std::vector<std::uint8_t>& mask) {
    auto parts = gate_parts(t, h_last, lad, mask);
    std::size_t b = parts.attn.shape()[0], s2 = parts.attn.shape()[1];
    auto pooled = bmm(reshape(parts.attn, {b, 1, s2}), parts.fused);
    return reshape(pooled, {b, cfg.ladder_dim});
  }

  Tensor<S> tower_predict(Tape<S>& t, Tensor<S> fused, double drop = 0.0, Rng* rng = nullptr) {
    return tower.forward(t, fused, drop, rng);
  }

  /// per-sample probability for this domain, (batch,)
  Tensor<S> predict(Tape<S>& t, const TapSet<S>& taps, double drop = 0.0, Rng* rng = nullptr) {
    auto lad = ladder_forward(t, taps);
    auto fused = gate_fuse(t, taps.h.back(), lad, taps.mask);
    return tower_predict(t, fused, drop, rng);
  }

  /// penultimate tower activations, for representation dumps
  Tensor<S> tower_representation(Tape<S>& t, const TapSet<S>& taps) {
    auto lad = ladder_forward(t, taps);
    auto fused = gate_fuse(t, taps.h.back(), lad, taps.mask);
    return tower.penultimate(t, fused);
  }
};

}  // namespace mdctr
