#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mdctr/backbone.hpp"
#include "mdctr/gradcheck.hpp"

using namespace mdctr;

namespace {

BackboneConfig tiny_config() {
  BackboneConfig cfg;
  cfg.layers = 2;
  cfg.hidden = 16;
  cfg.heads = 2;
  cfg.ffn = 32;
  cfg.max_seq_len = 8;
  cfg.vocab_size = 12;
  return cfg;
}

TokenBatch make_batch(std::vector<std::vector<std::int32_t>> rows, std::size_t seq) {
  std::vector<TokenSequence> seqs;
  for (auto& r : rows) {
    TokenSequence s;
    s.ids = r;
    s.ids.resize(seq, Vocabulary::kPad);
    s.attention.resize(seq);
    for (std::size_t i = 0; i < seq; ++i) s.attention[i] = s.ids[i] == Vocabulary::kPad ? 0 : 1;
    seqs.push_back(std::move(s));
  }
  return TokenBatch::from_sequences(seqs);
}

}  // namespace

TEST_CASE("embed shape contract and positional separation") {
  Rng rng(1);
  Backbone<double> bb(tiny_config(), rng);
  Tape<double> t;
  auto tb = make_batch({{2, 5, 5, 3}}, 6);
  auto h0 = bb.embed(t, tb);
  CHECK(h0.shape() == Shape{1, 6, 16});

  // same token at positions 1 and 2: outputs differ by the positional term only
  for (std::size_t j = 0; j < 16; ++j) {
    double diff = h0.value()[1 * 16 + j] - h0.value()[2 * 16 + j];
    double pos_diff = bb.pos_emb.value[1 * 16 + j] - bb.pos_emb.value[2 * 16 + j];
    CHECK(diff == doctest::Approx(pos_diff).epsilon(1e-12));
  }

  // PAD positions carry the PAD embedding row (plus position)
  for (std::size_t j = 0; j < 16; ++j) {
    double expect = bb.tok_emb.value[Vocabulary::kPad * 16 + j] + bb.pos_emb.value[4 * 16 + j];
    CHECK(h0.value()[4 * 16 + j] == doctest::Approx(expect).epsilon(1e-12));
  }

  auto bad = make_batch({{2, 99}}, 4);
  CHECK_THROWS_AS(bb.embed(t, bad), ValidationError);
}

TEST_CASE("tap collection has exactly layers+1 entries of equal shape") {
  Rng rng(2);
  Backbone<double> bb(tiny_config(), rng);
  Tape<double> t;
  auto tb = make_batch({{2, 4, 5, 3}, {2, 6, 3, 0}}, 5);
  auto taps = bb.forward_collect(t, tb);
  CHECK(taps.h.size() == 3);
  for (const auto& h : taps.h) CHECK(h.shape() == Shape{2, 5, 16});
}

TEST_CASE("zero query/key init mixes values uniformly over unmasked positions") {
  Rng rng(3);
  auto cfg = tiny_config();
  cfg.layers = 1;
  Backbone<double> bb(cfg, rng);
  bb.blocks[0].wq.w.fill(0);
  bb.blocks[0].wq.b.fill(0);
  bb.blocks[0].wk.w.fill(0);
  bb.blocks[0].wk.b.fill(0);
  bb.blocks[0].w2.w.fill(0);  // silence the FFN so the attention mix is observable
  bb.blocks[0].w2.b.fill(0);

  Tape<double> t;
  auto tb = make_batch({{2, 4, 5, 3}}, 6);  // two PAD positions
  auto taps = bb.forward_collect(t, tb);
  // uniform attention ignores the query: h1 - h0 is the same row everywhere
  const auto& h0 = taps.h[0].value();
  const auto& h1 = taps.h[1].value();
  for (std::size_t pos = 1; pos < 4; ++pos)
    for (std::size_t j = 0; j < 16; ++j) {
      double first = h1[j] - h0[j];
      double here = h1[pos * 16 + j] - h0[pos * 16 + j];
      CHECK(here == doctest::Approx(first).epsilon(1e-9));
    }
}

TEST_CASE("masked positions contribute nothing to other positions") {
  Rng rng(4);
  Backbone<double> bb(tiny_config(), rng);
  auto tb = make_batch({{2, 4, 5, 3}}, 6);

  Tape<double> t1;
  auto base = bb.forward_collect(t1, tb);
  auto pooled_base = bb.pool(t1, base.h.back(), base.mask);

  // perturb the PAD token's embedding row; masked positions use it
  for (std::size_t j = 0; j < 16; ++j) bb.tok_emb.value[Vocabulary::kPad * 16 + j] += 3.5;
  Tape<double> t2;
  auto pert = bb.forward_collect(t2, tb);
  auto pooled_pert = bb.pool(t2, pert.h.back(), pert.mask);

  for (std::size_t pos = 0; pos < 4; ++pos)
    for (std::size_t j = 0; j < 16; ++j)
      CHECK(pert.h.back().value()[pos * 16 + j] ==
            doctest::Approx(base.h.back().value()[pos * 16 + j]).epsilon(1e-12));
  for (std::size_t j = 0; j < 16; ++j)
    CHECK(pooled_pert.value()[j] == doctest::Approx(pooled_base.value()[j]).epsilon(1e-12));
}

TEST_CASE("pad invariance: appending PAD leaves pooled output unchanged") {
  Rng rng(5);
  Backbone<double> bb(tiny_config(), rng);
  auto short_tb = make_batch({{2, 4, 5, 3}}, 5);
  auto long_tb = make_batch({{2, 4, 5, 3}}, 8);

  Tape<double> t1, t2;
  auto a = bb.forward_collect(t1, short_tb);
  auto b = bb.forward_collect(t2, long_tb);
  auto pa = bb.pool(t1, a.h.back(), a.mask);
  auto pb = bb.pool(t2, b.h.back(), b.mask);
  for (std::size_t j = 0; j < 16; ++j)
    CHECK(std::abs(pa.value()[j] - pb.value()[j]) < 1e-5);
}

TEST_CASE("swapping two content tokens changes the final tap") {
  Rng rng(6);
  Backbone<double> bb(tiny_config(), rng);
  Tape<double> t1, t2;
  auto a = bb.forward_collect(t1, make_batch({{2, 4, 5, 3}}, 6));
  auto b = bb.forward_collect(t2, make_batch({{2, 5, 4, 3}}, 6));
  double diff = 0;
  for (std::size_t i = 0; i < a.h.back().value().size(); ++i)
    diff = std::max(diff, std::abs(a.h.back().value()[i] - b.h.back().value()[i]));
  CHECK(diff > 1e-6);
}

TEST_CASE("causal mask blocks attention to future positions") {
  Rng rng(7);
  auto cfg = tiny_config();
  cfg.causal = true;
  Backbone<double> bb(cfg, rng);
  auto tb1 = make_batch({{2, 4, 5, 3}}, 6);
  auto tb2 = make_batch({{2, 4, 5, 7}}, 6);  // differs only at position 3

  Tape<double> t1, t2;
  auto a = bb.forward_collect(t1, tb1);
  auto b = bb.forward_collect(t2, tb2);
  // outputs strictly before the changed position are unaffected
  for (std::size_t pos = 0; pos < 3; ++pos)
    for (std::size_t j = 0; j < 16; ++j)
      CHECK(a.h.back().value()[pos * 16 + j] ==
            doctest::Approx(b.h.back().value()[pos * 16 + j]).epsilon(1e-12));
}

TEST_CASE("pooling modes") {
  Rng rng(8);
  auto cfg = tiny_config();
  Backbone<double> bb(cfg, rng);
  Tape<double> t;

  // single unmasked position: both modes return that vector
  auto x = t.constant({1, 2, 2}, {7, 8, 99, 99});
  auto mean_pick = bb.pool(t, x, {1, 0});
  CHECK(mean_pick.value() == std::vector<double>{7, 8});
  auto cfg_first = cfg;
  cfg_first.pooling = Pooling::FirstToken;
  Rng rng2(8);
  Backbone<double> bf(cfg_first, rng2);
  auto first_pick = bf.pool(t, x, {1, 0});
  CHECK(first_pick.value() == std::vector<double>{7, 8});

  // two identical unmasked vectors, mean mode
  auto same = t.constant({1, 2, 2}, {3, 4, 3, 4});
  CHECK(bb.pool(t, same, {1, 1}).value() == std::vector<double>{3, 4});

  // mean of unit rows
  auto units = t.constant({1, 2, 2}, {1, 0, 0, 1});
  CHECK(bb.pool(t, units, {1, 1}).value() == std::vector<double>{0.5, 0.5});

  CHECK_THROWS_AS(bb.pool(t, x, {0, 0}), ValidationError);
}

TEST_CASE("a NaN in a layer output aborts naming the layer") {
  Rng rng(10);
  Backbone<double> bb(tiny_config(), rng);
  bb.blocks[1].wo.w.value[0] = std::numeric_limits<double>::quiet_NaN();
  Tape<double> t;
  auto tb = make_batch({{2, 4, 5, 3}}, 6);
  try {
    bb.forward_collect(t, tb);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("layer 2") != std::string::npos);
  }
}

TEST_CASE("backbone gradients pass the finite-difference audit") {
  Rng rng(9);
  auto cfg = tiny_config();
  cfg.layers = 1;
  cfg.hidden = 8;
  cfg.heads = 2;
  cfg.ffn = 12;
  cfg.vocab_size = 10;
  cfg.max_seq_len = 4;
  Backbone<double> bb(cfg, rng);
  auto tb = make_batch({{2, 5, 3}, {2, 7, 3}}, 4);
  auto report = finite_diff_check<double>(
      [&](Tape<double>& t) {
        auto taps = bb.forward_collect(t, tb);
        return mean_all(taps.h.back());
      },
      bb.params());
  CHECK(report.deterministic);
  CHECK(report.worst_rel_err < 1e-3);
}
