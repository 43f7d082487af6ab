#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mdctr/gradcheck.hpp"
#include "mdctr/optim.hpp"
#include "mdctr/rng.hpp"
#include "mdctr/tensor.hpp"

using namespace mdctr;

namespace {

Param<double> make_param(const std::string& name, Shape shape, Rng& rng, double sd = 0.5) {
  Param<double> p(name, std::move(shape));
  p.init_normal(rng, sd);
  return p;
}

// reduce an arbitrary tensor to a scalar with fixed random weights so every
// output element receives a distinct upstream gradient
template <class S>
Tensor<S> weighted_sum(Tape<S>& t, Tensor<S> x, Rng& rng) {
  std::vector<S> w(numel(x.shape()));
  for (auto& v : w) v = static_cast<S>(rng.normal(0.0, 1.0));
  return sum_all(mul(x, t.constant(x.shape(), w)));
}

void check_grads(const std::function<Tensor<double>(Tape<double>&)>& build,
                 std::vector<Param<double>*> params, double tol = 1e-4) {
  auto report = finite_diff_check<double>(build, params);
  CHECK(report.deterministic);
  CHECK(report.worst_rel_err < tol);
}

}  // namespace

TEST_CASE("matmul values") {
  Tape<double> t;
  auto eye = t.constant({2, 2}, {1, 0, 0, 1});
  auto m = t.constant({2, 2}, {1, 2, 3, 4});
  auto prod = matmul(eye, m);
  CHECK(prod.value() == std::vector<double>{1, 2, 3, 4});

  auto proj = t.constant({2, 2}, {1, 0, 0, 0});
  auto v = t.constant({2, 1}, {5, 7});
  auto out = matmul(proj, v);
  CHECK(out.value() == std::vector<double>{5, 0});
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape<double> t;
  auto a = t.constant({2, 3}, std::vector<double>(6, 1.0));
  auto b = t.constant({2, 2}, std::vector<double>(4, 1.0));
  try {
    matmul(a, b);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[2x2]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient matches central differences") {
  Rng rng(7);
  auto a = make_param("a", {3, 4}, rng);
  auto b = make_param("b", {4, 2}, rng);
  check_grads(
      [&](Tape<double>& t) {
        Rng wr(11);
        return weighted_sum(t, matmul(t.param(a), t.param(b)), wr);
      },
      {&a, &b});
}

TEST_CASE("elementwise basics") {
  Tape<double> t;
  CHECK(sigmoid(t.constant_scalar(0.0)).item() == doctest::Approx(0.5));
  CHECK(tanh(t.constant_scalar(0.0)).item() == doctest::Approx(0.0));
  auto s = add(t.constant({2}, {1, 2}), t.constant({2}, {3, 4}));
  CHECK(s.value() == std::vector<double>{4, 6});
}

TEST_CASE("add broadcasts a trailing vector over a matrix") {
  Tape<double> t;
  auto m = t.constant({2, 3}, {0, 0, 0, 1, 1, 1});
  auto v = t.constant({3}, {10, 20, 30});
  auto out = add(m, v);
  CHECK(out.value() == std::vector<double>{10, 20, 30, 11, 21, 31});

  auto bad = t.constant({2}, {1, 2});
  CHECK_THROWS_AS(add(m, bad), ValidationError);
}

TEST_CASE("broadcast add gradient reduces over leading axes") {
  Rng rng(3);
  auto m = make_param("m", {3, 4}, rng);
  auto v = make_param("v", {4}, rng);
  check_grads(
      [&](Tape<double>& t) {
        Rng wr(5);
        return weighted_sum(t, add(t.param(m), t.param(v)), wr);
      },
      {&m, &v});
}

TEST_CASE("unary activations pass gradient audit") {
  Rng rng(13);
  auto x = make_param("x", {2, 5}, rng, 0.8);
  for (auto* fn : {&mdctr::tanh<double>, &mdctr::sigmoid<double>, &mdctr::gelu<double>}) {
    check_grads(
        [&](Tape<double>& t) {
          Rng wr(17);
          return weighted_sum(t, fn(t.param(x)), wr);
        },
        {&x});
  }
  // relu audited away from the kink
  Param<double> far("far", {4});
  far.value = {1.5, -2.0, 0.7, -0.3};
  check_grads(
      [&](Tape<double>& t) {
        Rng wr(19);
        return weighted_sum(t, relu(t.param(far)), wr);
      },
      {&far});
}

TEST_CASE("softmax closed forms") {
  Tape<double> t;
  auto u = softmax(t.constant({3}, {0, 0, 0}), 0);
  for (double v : u.value()) CHECK(v == doctest::Approx(1.0 / 3));
  auto w = softmax(t.constant({2}, {std::log(2.0), 0.0}), 0);
  CHECK(w.value()[0] == doctest::Approx(2.0 / 3));
  CHECK(w.value()[1] == doctest::Approx(1.0 / 3));
}

TEST_CASE("softmax rows sum to one and gradient passes audit") {
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    Tape<double> t;
    std::vector<double> vals(12);
    for (auto& v : vals) v = rng.normal(0.0, 3.0);
    auto sm = softmax(t.constant({3, 4}, vals), 1);
    for (std::size_t r = 0; r < 3; ++r) {
      double sum = 0;
      for (std::size_t c = 0; c < 4; ++c) sum += sm.value()[r * 4 + c];
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
  }
  auto x = make_param("x", {5}, rng, 1.0);
  check_grads(
      [&](Tape<double>& t) {
        Rng wr(29);
        return weighted_sum(t, softmax(t.param(x), 0), wr);
      },
      {&x});
}

TEST_CASE("softmax over a middle axis") {
  Tape<double> t;
  auto x = t.constant({2, 2, 2}, {1, 2, 1, 2, 3, 4, 3, 4});
  auto sm = softmax(x, 1);
  // along axis 1 the paired values are equal, so every weight is 0.5
  for (double v : sm.value()) CHECK(v == doctest::Approx(0.5));
  CHECK_THROWS_AS(softmax(x, 3), ValidationError);
}

TEST_CASE("layer_norm closed forms") {
  Tape<double> t;
  auto gain = t.constant({4}, {1, 1, 1, 1});
  auto bias = t.constant({4}, {0, 0, 0, 0});
  auto constant_row = layer_norm(t.constant({1, 4}, {2, 2, 2, 2}), gain, bias, 1e-5);
  for (double v : constant_row.value()) CHECK(std::abs(v) < 1e-5);

  auto g2 = t.constant({2}, {1, 1});
  auto b2 = t.constant({2}, {0, 0});
  auto pair = layer_norm(t.constant({1, 2}, {1, 3}), g2, b2, 1e-5);
  CHECK(pair.value()[0] == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(pair.value()[1] == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("layer_norm pre-affine rows have near-zero mean") {
  Rng rng(31);
  Tape<double> t;
  std::vector<double> vals(24);
  for (auto& v : vals) v = rng.normal(1.0, 2.0);
  auto gain = t.constant({6}, std::vector<double>(6, 1.0));
  auto bias = t.constant({6}, std::vector<double>(6, 0.0));
  auto out = layer_norm(t.constant({4, 6}, vals), gain, bias);
  for (std::size_t r = 0; r < 4; ++r) {
    double mean = 0;
    for (std::size_t c = 0; c < 6; ++c) mean += out.value()[r * 6 + c];
    CHECK(std::abs(mean / 6) < 1e-5);
  }
}

TEST_CASE("layer_norm gradient matches central differences") {
  Rng rng(37);
  auto x = make_param("x", {3, 6}, rng, 1.0);
  auto g = make_param("g", {6}, rng, 0.3);
  auto b = make_param("b", {6}, rng, 0.3);
  check_grads(
      [&](Tape<double>& t) {
        Rng wr(41);
        return weighted_sum(t, layer_norm(t.param(x), t.param(g), t.param(b)), wr);
      },
      {&x, &g, &b});
}

TEST_CASE("bce closed forms") {
  Tape<double> t;
  auto half = bce_loss(t.constant({1}, {0.5}), t.constant({1}, {1.0}));
  CHECK(half.item() == doctest::Approx(std::log(2.0)));

  auto sat = bce_loss(t.constant({1}, {1.0 - 1e-7}), t.constant({1}, {1.0}));
  CHECK(sat.item() < 1e-6);

  auto batch = bce_loss(t.constant({2}, {0.9, 0.1}), t.constant({2}, {1.0, 0.0}));
  CHECK(batch.item() == doctest::Approx(0.105361).epsilon(1e-4));

  CHECK_THROWS_AS(bce_loss(t.constant({1}, {0.5}), t.constant({1}, {0.4})), ValidationError);
}

TEST_CASE("bce gradient matches central differences") {
  Param<double> p("p", {4});
  p.value = {0.2, 0.7, 0.45, 0.9};
  Param<double> dummy("labels-source", {4});
  check_grads(
      [&](Tape<double>& t) {
        auto y = t.constant({4}, {1, 0, 1, 0});
        return bce_loss(sigmoid(t.param(p)), y);
      },
      {&p});
}

TEST_CASE("backward: sum(W.x) gives the broadcast outer structure of x") {
  Param<double> w("w", {2, 3});
  w.value = {1, 2, 3, 4, 5, 6};
  Tape<double> t;
  auto x = t.constant({3, 1}, {10, 20, 30});
  auto loss = sum_all(matmul(t.param(w), x));
  w.zero_grad();
  backward(loss);
  CHECK(w.grad == std::vector<double>{10, 20, 30, 10, 20, 30});
}

TEST_CASE("backward: parameters off the loss path get exactly zero gradient") {
  Param<double> used("used", {2});
  used.value = {1, 2};
  Param<double> unused("unused", {2});
  unused.value = {3, 4};
  Tape<double> t;
  auto loss = sum_all(t.param(used));
  t.param(unused);  // bound to the tape but not connected to the loss
  used.zero_grad();
  unused.zero_grad();
  backward(loss);
  CHECK(used.grad == std::vector<double>{1, 1});
  CHECK(unused.grad == std::vector<double>{0.0, 0.0});
}

TEST_CASE("backward rejects non-scalar loss") {
  Param<double> p("p", {2});
  p.value = {1, 2};
  Tape<double> t;
  auto two = scale(t.param(p), 2.0);
  CHECK_THROWS_AS(backward(two), ValidationError);
}

TEST_CASE("structural ops pass gradient audit") {
  Rng rng(43);
  auto x3 = make_param("x3", {2, 3, 4}, rng);
  auto y3 = make_param("y3", {2, 2, 4}, rng);

  check_grads(
      [&](Tape<double>& t) {
        Rng wr(47);
        return weighted_sum(t, concat_seq(t.param(x3), t.param(y3)), wr);
      },
      {&x3, &y3});

  check_grads(
      [&](Tape<double>& t) {
        Rng wr(53);
        return weighted_sum(t, split_heads(t.param(x3), 2), wr);
      },
      {&x3});

  auto heads = make_param("heads", {4, 3, 2}, rng);
  check_grads(
      [&](Tape<double>& t) {
        Rng wr(59);
        return weighted_sum(t, merge_heads(t.param(heads), 2), wr);
      },
      {&heads});

  check_grads(
      [&](Tape<double>& t) {
        Rng wr(61);
        return weighted_sum(t, select_batch(t.param(x3), {1, 0, 1}), wr);
      },
      {&x3});

  check_grads(
      [&](Tape<double>& t) {
        Rng wr(67);
        return weighted_sum(t, select_pos(t.param(x3), 2), wr);
      },
      {&x3});

  check_grads(
      [&](Tape<double>& t) {
        Rng wr(71);
        return weighted_sum(t, reshape(t.param(x3), {6, 4}), wr);
      },
      {&x3});

  std::vector<std::uint8_t> mask{1, 0, 1, 1, 1, 0};
  check_grads(
      [&](Tape<double>& t) {
        Rng wr(73);
        return weighted_sum(t, masked_mean_pool(t.param(x3), mask), wr);
      },
      {&x3});
}

TEST_CASE("bmm values and gradients, both flavors") {
  Rng rng(79);
  auto a = make_param("a", {2, 2, 3}, rng);
  auto b = make_param("b", {2, 3, 2}, rng);
  auto c = make_param("c", {2, 2, 3}, rng);

  {
    Tape<double> t;
    auto out = bmm(t.param(a), t.param(b));
    // spot-check one batch against plain matmul
    auto a0 = t.constant({2, 3}, std::vector<double>(a.value.begin(), a.value.begin() + 6));
    auto b0 = t.constant({3, 2}, std::vector<double>(b.value.begin(), b.value.begin() + 6));
    auto ref = matmul(a0, b0);
    for (std::size_t i = 0; i < 4; ++i) CHECK(out.value()[i] == doctest::Approx(ref.value()[i]));
  }

  check_grads(
      [&](Tape<double>& t) {
        Rng wr(83);
        return weighted_sum(t, bmm(t.param(a), t.param(b)), wr);
      },
      {&a, &b});

  check_grads(
      [&](Tape<double>& t) {
        Rng wr(89);
        return weighted_sum(t, bmm(t.param(a), t.param(c), /*transpose_b=*/true), wr);
      },
      {&a, &c});
}

TEST_CASE("embedding lookup and scatter gradient") {
  Rng rng(97);
  auto table = make_param("table", {5, 3}, rng);
  {
    Tape<double> t;
    auto rows = embedding(t.param(table), {3, 3, 0});
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(rows.value()[j] == table.value[3 * 3 + j]);
      CHECK(rows.value()[3 + j] == table.value[3 * 3 + j]);
      CHECK(rows.value()[6 + j] == table.value[j]);
    }
    CHECK_THROWS_AS(embedding(t.param(table), {5}), ValidationError);
  }
  check_grads(
      [&](Tape<double>& t) {
        Rng wr(101);
        return weighted_sum(t, embedding(t.param(table), {1, 4, 1, 2}), wr);
      },
      {&table});
}

TEST_CASE("masked_mean_pool rejects fully masked rows") {
  Tape<double> t;
  auto x = t.constant({1, 2, 2}, {1, 2, 3, 4});
  CHECK_THROWS_AS(masked_mean_pool(x, {0, 0}), ValidationError);
}

TEST_CASE("dropout keeps replay deterministic and scales kept values") {
  Rng rng(103);
  auto x = make_param("x", {10, 10}, rng);
  check_grads(
      [&](Tape<double>& t) {
        Rng dr(7);
        Rng wr(107);
        return weighted_sum(t, dropout(t.param(x), 0.4, dr), wr);
      },
      {&x});
}

TEST_CASE("tape replay reproduces recorded values bit-identically") {
  Rng rng(109);
  auto a = make_param("a", {4, 4}, rng);
  auto b = make_param("b", {4, 4}, rng);
  Tape<double> t;
  auto out = sigmoid(matmul(t.param(a), tanh(t.param(b))));
  auto loss = mean_all(out);
  std::vector<std::vector<double>> snap;
  for (auto& n : t.nodes) snap.push_back(n.value);
  t.replay();
  for (std::size_t i = 0; i < t.nodes.size(); ++i) CHECK(t.nodes[i].value == snap[i]);
  (void)loss;
}

TEST_CASE("identical seeds give bit-identical programs in both precisions") {
  auto run32 = [](std::uint64_t seed) {
    Rng rng(seed);
    Param<float> a("a", {3, 3});
    a.init_normal(rng, 0.5);
    Tape<float> t;
    return mean_all(sigmoid(matmul(t.param(a), t.param(a)))).item();
  };
  auto run64 = [](std::uint64_t seed) {
    Rng rng(seed);
    Param<double> a("a", {3, 3});
    a.init_normal(rng, 0.5);
    Tape<double> t;
    return mean_all(sigmoid(matmul(t.param(a), t.param(a)))).item();
  };
  CHECK(run32(42) == run32(42));
  CHECK(run64(42) == run64(42));
}

TEST_CASE("finite_diff_check flags a non-deterministic program") {
  Param<double> p("p", {1});
  p.value = {1.0};
  int counter = 0;
  auto report = finite_diff_check<double>(
      [&](Tape<double>& t) {
        auto leaf = t.param(p);
        int id = t.new_node({1}, {leaf.id}, true);
        t.nodes[id].forward = [&t, id, &counter]() {
          t.nodes[id].value[0] = static_cast<double>(++counter);
        };
        t.nodes[id].forward();
        t.nodes[id].backward = [&t, id, lid = leaf.id]() { t.nodes[lid].grad[0] += t.nodes[id].grad[0]; };
        return Tensor<double>{&t, id};
      },
      {&p});
  CHECK_FALSE(report.deterministic);
  CHECK_FALSE(report.pass(1e-4));
}

TEST_CASE("sgd step") {
  Param<double> w("w", {1});
  w.value = {1.0};
  w.grad = {1.0};
  Optimizer<double> opt;
  opt.kind = OptKind::Sgd;
  opt.lr = 0.1;
  opt.step({&w});
  CHECK(w.value[0] == doctest::Approx(0.9));
}

TEST_CASE("zero gradient leaves the parameter untouched") {
  Param<double> w("w", {2});
  w.value = {1.5, -2.5};
  w.zero_grad();
  Optimizer<double> opt;
  opt.lr = 0.5;
  opt.weight_decay = 0.0;
  opt.step({&w});
  CHECK(w.value == std::vector<double>{1.5, -2.5});
}

TEST_CASE("adamw first step matches the hand-computed update") {
  Param<double> w("w", {1});
  w.value = {1.0};
  w.grad = {1.0};
  Optimizer<double> opt;
  opt.kind = OptKind::AdamW;
  opt.lr = 0.01;
  opt.weight_decay = 0.1;
  opt.step({&w});
  // m=0.1, v=0.001, mhat=1, vhat=1 -> update = lr*(1/(1+eps) + wd*w)
  double expected = 1.0 - 0.01 * (1.0 / (1.0 + 1e-8) + 0.1 * 1.0);
  CHECK(w.value[0] == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("adaptive moments stay shape-congruent to their parameters") {
  Param<double> w("w", {2, 3});
  w.value.assign(6, 1.0);
  w.grad.assign(6, 0.5);
  Optimizer<double> opt;
  opt.step({&w});
  auto* m = opt.moments(&w);
  REQUIRE(m != nullptr);
  CHECK(m->m.size() == w.size());
  CHECK(m->v.size() == w.size());
  CHECK(m->t == 1);
}

TEST_CASE("optimizer aborts on non-finite gradients naming the parameter") {
  Param<double> w("tower.w1", {1});
  w.value = {1.0};
  w.grad = {std::numeric_limits<double>::quiet_NaN()};
  Optimizer<double> opt;
  try {
    opt.step({&w});
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("tower.w1") != std::string::npos);
  }
}

TEST_CASE("cyclic lr hits its bounds exactly at cycle endpoints") {
  CyclicLr sched(1e-6, 8e-5, 100);
  CHECK(sched.at(0) == 1e-6);
  CHECK(sched.at(50) == 8e-5);
  CHECK(sched.at(100) == 1e-6);
  CHECK(sched.at(25) > 1e-6);
  CHECK(sched.at(25) < 8e-5);
  CHECK_THROWS_AS(CyclicLr(0.0, 1.0, 10), ValidationError);
}
