#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "envformer/nn.hpp"
#include "envformer/ops.hpp"
#include "envformer/rng.hpp"
#include "support/finite_diff.hpp"

using namespace envformer;

namespace {

Array<double> random_array(Rng& rng, std::vector<std::size_t> shape,
                           double lo = -1.0, double hi = 1.0) {
  Array<double> a(std::move(shape));
  for (double& x : a.data) x = rng.uniform(lo, hi);
  return a;
}

}  // namespace

TEST_CASE("tensor basics") {
  auto t = Tensor<double>::param(Array<double>({2, 3}));
  REQUIRE(t.numel() == 6);
  REQUIRE(t.requires_grad());
  REQUIRE_THROWS_AS(t.item(), ContractError);

  auto c = Tensor<double>::constant(Array<double>::full({1}, 2.5));
  REQUIRE(c.item() == 2.5);
  REQUIRE_FALSE(c.requires_grad());
  REQUIRE_THROWS_AS(c.grad(), ContractError);
}

TEST_CASE("add broadcasts a suffix and accumulates its gradient") {
  Rng rng(1);
  Tape<double> tape;
  auto a = Tensor<double>::param(random_array(rng, {2, 3, 4}));
  auto b = Tensor<double>::param(random_array(rng, {4}));
  auto out = add(tape, a, b);
  REQUIRE(out.shape() == std::vector<std::size_t>{2, 3, 4});
  for (std::size_t i = 0; i < 24; ++i)
    REQUIRE(out.data()[i] == a.data()[i] + b.data()[i % 4]);

  auto loss = sum_all(tape, out);
  tape.backward(loss);
  for (std::size_t j = 0; j < 4; ++j) REQUIRE(b.grad()[j] == 6.0);
  for (std::size_t i = 0; i < 24; ++i) REQUIRE(a.grad()[i] == 1.0);
}

TEST_CASE("scalar broadcast works for add, sub and mul") {
  Rng rng(2);
  Tape<double> tape;
  auto a = Tensor<double>::param(random_array(rng, {3, 2}));
  auto s = Tensor<double>::param(Array<double>::full({1}, 0.5));
  auto out = mul(tape, sub(tape, a, s), s);
  for (std::size_t i = 0; i < 6; ++i)
    REQUIRE(out.data()[i] == Catch::Approx((a.data()[i] - 0.5) * 0.5));
}

TEST_CASE("incompatible shapes raise DimensionError carrying both shapes") {
  Tape<double> tape;
  auto a = Tensor<double>::param(Array<double>({2, 3}));
  auto b = Tensor<double>::param(Array<double>({2}));
  try {
    add(tape, a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    REQUIRE(e.lhs_shape == std::vector<std::size_t>{2, 3});
    REQUIRE(e.rhs_shape == std::vector<std::size_t>{2});
  }

  auto w = Tensor<double>::param(Array<double>({4, 5}));
  REQUIRE_THROWS_AS(matmul(tape, a, w), DimensionError);
}

TEST_CASE("matmul matches a reference triple loop") {
  Rng rng(3);
  Tape<double> tape;
  auto a = Tensor<double>::param(random_array(rng, {2, 3, 4}));
  auto w = Tensor<double>::param(random_array(rng, {4, 5}));
  auto out = matmul(tape, a, w);
  REQUIRE(out.shape() == std::vector<std::size_t>{2, 3, 5});
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t j = 0; j < 5; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < 4; ++k)
        acc += a.data()[r * 4 + k] * w.data()[k * 5 + j];
      REQUIRE(out.data()[r * 5 + j] == Catch::Approx(acc).margin(1e-12));
    }
}

TEST_CASE("bmm handles all four transpose combinations") {
  Rng rng(4);
  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) {
      Tape<double> tape;
      const std::size_t m = 3, k = 4, n = 2, batch = 2;
      auto a = Tensor<double>::param(random_array(
          rng, ta ? std::vector<std::size_t>{batch, k, m}
                  : std::vector<std::size_t>{batch, m, k}));
      auto b = Tensor<double>::param(random_array(
          rng, tb ? std::vector<std::size_t>{batch, n, k}
                  : std::vector<std::size_t>{batch, k, n}));
      auto out = bmm(tape, a, b, ta, tb);
      REQUIRE(out.shape() == std::vector<std::size_t>{batch, m, n});
      for (std::size_t g = 0; g < batch; ++g)
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            double acc = 0;
            for (std::size_t p = 0; p < k; ++p) {
              const double av = ta ? a.value().at3(g, p, i)
                                   : a.value().at3(g, i, p);
              const double bv = tb ? b.value().at3(g, j, p)
                                   : b.value().at3(g, p, j);
              acc += av * bv;
            }
            REQUIRE(out.value().at3(g, i, j) ==
                    Catch::Approx(acc).margin(1e-12));
          }

      // gradient check for this combination
      ParamSet<double> ps;
      ps.add("a", a);
      ps.add("b", b);
      ps.zero_grad();
      Tape<double> t2;
      auto loss = mean_all(t2, square(t2, bmm(t2, a, b, ta, tb)));
      t2.backward(loss);
      auto rep = testsupport::finite_diff_check<double>(ps, [&] {
        Tape<double> t3;
        return mean_all(t3, square(t3, bmm(t3, a, b, ta, tb))).item();
      });
      INFO("ta=" << ta << " tb=" << tb << " worst=" << rep.worst_param);
      REQUIRE(rep.max_rel_err < 1e-6);
    }
  }
}

TEST_CASE("softmax rows are normalized and differentiable") {
  Rng rng(5);
  auto x = Tensor<double>::param(random_array(rng, {4, 6}, -3.0, 3.0));
  Tape<double> tape;
  auto y = softmax_last(tape, x);
  for (std::size_t r = 0; r < 4; ++r) {
    double acc = 0;
    for (std::size_t j = 0; j < 6; ++j) acc += y.value().at2(r, j);
    REQUIRE(acc == Catch::Approx(1.0).margin(1e-12));
  }

  // weighted loss so the gradient is not identically zero
  auto wts = Tensor<double>::constant(random_array(rng, {4, 6}));
  auto loss = mean_all(tape, mul(tape, y, wts));
  tape.backward(loss);
  ParamSet<double> ps;
  ps.add("x", x);
  auto rep = testsupport::finite_diff_check<double>(ps, [&] {
    Tape<double> t;
    return mean_all(t, mul(t, softmax_last(t, x), wts)).item();
  });
  REQUIRE(rep.max_rel_err < 1e-6);
}

TEST_CASE("layernorm standardizes rows and all three gradients check out") {
  Rng rng(6);
  auto x = Tensor<double>::param(random_array(rng, {5, 8}, -2.0, 2.0));
  auto gain = Tensor<double>::param(random_array(rng, {8}, 0.5, 1.5));
  auto bias = Tensor<double>::param(random_array(rng, {8}, -0.5, 0.5));

  {
    Tape<double> tape;
    auto unit_gain = Tensor<double>::constant(Array<double>::full({8}, 1.0));
    auto zero_bias = Tensor<double>::constant(Array<double>({8}));
    auto y = layernorm(tape, x, unit_gain, zero_bias);
    for (std::size_t r = 0; r < 5; ++r) {
      double mean = 0, var = 0;
      for (std::size_t j = 0; j < 8; ++j) mean += y.value().at2(r, j);
      mean /= 8;
      for (std::size_t j = 0; j < 8; ++j) {
        const double d = y.value().at2(r, j) - mean;
        var += d * d;
      }
      var /= 8;
      REQUIRE(mean == Catch::Approx(0.0).margin(1e-10));
      REQUIRE(var == Catch::Approx(1.0).margin(1e-3));
    }
  }

  auto wts = Tensor<double>::constant(random_array(rng, {5, 8}));
  auto forward = [&]() -> double {
    Tape<double> t;
    return mean_all(t, mul(t, layernorm(t, x, gain, bias), wts)).item();
  };
  Tape<double> tape;
  auto loss = mean_all(tape, mul(tape, layernorm(tape, x, gain, bias), wts));
  tape.backward(loss);
  ParamSet<double> ps;
  ps.add("x", x);
  ps.add("gain", gain);
  ps.add("bias", bias);
  auto rep = testsupport::finite_diff_check<double>(ps, forward);
  INFO("worst " << rep.worst_param << "[" << rep.worst_index << "]");
  REQUIRE(rep.max_rel_err < 1e-5);
}

TEST_CASE("logsumexp matches the naive computation and its gradient") {
  Rng rng(7);
  auto x = Tensor<double>::param(random_array(rng, {3, 5}, -4.0, 4.0));
  Tape<double> tape;
  auto y = logsumexp_last(tape, x);
  REQUIRE(y.shape() == std::vector<std::size_t>{3, 1});
  for (std::size_t r = 0; r < 3; ++r) {
    double acc = 0;
    for (std::size_t j = 0; j < 5; ++j) acc += std::exp(x.value().at2(r, j));
    REQUIRE(y.data()[r] == Catch::Approx(std::log(acc)).margin(1e-12));
  }
  auto loss = mean_all(tape, y);
  tape.backward(loss);
  ParamSet<double> ps;
  ps.add("x", x);
  auto rep = testsupport::finite_diff_check<double>(ps, [&] {
    Tape<double> t;
    return mean_all(t, logsumexp_last(t, x)).item();
  });
  REQUIRE(rep.max_rel_err < 1e-6);
}

TEST_CASE("head split and merge round-trip and pass gradients through") {
  Rng rng(8);
  auto x = Tensor<double>::param(random_array(rng, {2, 3, 8}));
  Tape<double> tape;
  auto split = split_heads(tape, x, 4);
  REQUIRE(split.shape() == std::vector<std::size_t>{8, 3, 2});
  auto merged = merge_heads(tape, split, 4);
  REQUIRE(merged.shape() == x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i)
    REQUIRE(merged.data()[i] == x.data()[i]);

  auto wts = Tensor<double>::constant(random_array(rng, {2, 3, 8}));
  auto loss = mean_all(tape, mul(tape, merged, wts));
  tape.backward(loss);
  for (std::size_t i = 0; i < x.numel(); ++i)
    REQUIRE(x.grad()[i] == Catch::Approx(wts.data()[i] / 48.0));
}

TEST_CASE("slice and concat along columns invert each other") {
  Rng rng(9);
  auto x = Tensor<double>::param(random_array(rng, {4, 6}));
  Tape<double> tape;
  auto left = slice_cols(tape, x, 0, 2);
  auto right = slice_cols(tape, x, 2, 4);
  auto glued = concat_cols(tape, left, right);
  for (std::size_t i = 0; i < x.numel(); ++i)
    REQUIRE(glued.data()[i] == x.data()[i]);
  REQUIRE_THROWS_AS(slice_cols(tape, x, 5, 3), DimensionError);

  auto loss = mean_all(tape, square(tape, glued));
  tape.backward(loss);
  ParamSet<double> ps;
  ps.add("x", x);
  auto rep = testsupport::finite_diff_check<double>(ps, [&] {
    Tape<double> t;
    auto l = slice_cols(t, x, 0, 2);
    auto r = slice_cols(t, x, 2, 4);
    return mean_all(t, square(t, concat_cols(t, l, r))).item();
  });
  REQUIRE(rep.max_rel_err < 1e-6);
}

TEST_CASE("elementwise chain of math ops against finite differences") {
  Rng rng(10);
  auto x = Tensor<double>::param(random_array(rng, {3, 4}, 0.2, 1.8));
  auto forward = [&]() -> double {
    Tape<double> t;
    auto a = softplus(t, tanh_op(t, x));
    auto b = sqrt_op(t, add_scalar(t, square(t, x), 0.3));
    auto c = log_op(t, add_scalar(t, exp_op(t, neg(t, x)), 1.0));
    auto d = div(t, a, b);
    return mean_all(t, mul(t, relu(t, d), c)).item();
  };
  Tape<double> tape;
  auto a = softplus(tape, tanh_op(tape, x));
  auto b = sqrt_op(tape, add_scalar(tape, square(tape, x), 0.3));
  auto c = log_op(tape, add_scalar(tape, exp_op(tape, neg(tape, x)), 1.0));
  auto d = div(tape, a, b);
  auto loss = mean_all(tape, mul(tape, relu(tape, d), c));
  tape.backward(loss);
  ParamSet<double> ps;
  ps.add("x", x);
  auto rep = testsupport::finite_diff_check<double>(ps, forward);
  REQUIRE(rep.max_rel_err < 1e-6);
}

TEST_CASE("min_elem routes gradient to the smaller operand") {
  Tape<double> tape;
  auto a = Tensor<double>::param(
      Array<double>({3}, std::vector<double>{1.0, 5.0, 2.0}));
  auto b = Tensor<double>::param(
      Array<double>({3}, std::vector<double>{2.0, 4.0, 2.0}));
  auto loss = sum_all(tape, min_elem(tape, a, b));
  REQUIRE(loss.item() == 1.0 + 4.0 + 2.0);
  tape.backward(loss);
  REQUIRE(a.grad() == std::vector<double>{1.0, 0.0, 1.0});  // ties go left
  REQUIRE(b.grad() == std::vector<double>{0.0, 1.0, 0.0});
}

TEST_CASE("a value used twice accumulates both gradient paths") {
  Tape<double> tape;
  auto x = Tensor<double>::param(Array<double>::full({1}, 3.0));
  // y = x*x + x  =>  dy/dx = 2x + 1 = 7
  auto y = add(tape, mul(tape, x, x), x);
  tape.backward(y);
  REQUIRE(x.grad()[0] == 7.0);
}

TEST_CASE("tape entries are recorded in topological order") {
  Rng rng(11);
  Tape<double> tape;
  auto x = Tensor<double>::param(random_array(rng, {2, 2}));
  auto y = mul(tape, add_scalar(tape, x, 1.0), tanh_op(tape, x));
  auto loss = mean_all(tape, y);
  (void)loss;
  REQUIRE(tape.size() >= 4);
  for (const auto& e : tape.entries())
    for (auto in_id : e.input_ids) REQUIRE(in_id < e.id);
}

TEST_CASE("backward contract violations") {
  Rng rng(12);
  Tape<double> tape;
  auto x = Tensor<double>::param(random_array(rng, {2, 2}));

  Tape<double> empty_tape;
  REQUIRE_THROWS_AS(
      empty_tape.backward(Tensor<double>::constant(Array<double>({1}))),
      ContractError);

  auto y = square(tape, x);  // not scalar
  REQUIRE_THROWS_AS(tape.backward(y), ContractError);
}

TEST_CASE("non-finite outputs trip the numeric guard") {
  Tape<double> tape;
  auto x = Tensor<double>::param(
      Array<double>({2}, std::vector<double>{-1.0, 2.0}));
  try {
    log_op(tape, x);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    REQUIRE(std::string(e.what()).find("log") != std::string::npos);
  }

  Tape<double> unchecked(TapeOptions{.recording = true,
                                     .training = false,
                                     .check_finite = false});
  auto y = log_op(unchecked, x);
  REQUIRE(std::isnan(y.data()[0]));
}

TEST_CASE("dropout is exact identity in eval and a scaled mask in training") {
  Rng rng(13);
  auto x = Tensor<double>::param(random_array(rng, {64, 16}, 0.5, 1.5));

  Tape<double> eval_tape;  // training defaults off
  auto y_eval = dropout(eval_tape, x, 0.75, rng);
  REQUIRE(y_eval.impl().get() == x.impl().get());

  Tape<double> train_tape(TapeOptions{.recording = true, .training = true,
                                      .check_finite = true});
  Rng drop_rng(99);
  auto y = dropout(train_tape, x, 0.75, drop_rng);
  std::size_t kept = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (y.data()[i] != 0.0) {
      ++kept;
      REQUIRE(y.data()[i] == Catch::Approx(x.data()[i] / 0.75));
    }
  }
  const double frac = double(kept) / double(x.numel());
  REQUIRE(frac > 0.65);
  REQUIRE(frac < 0.85);

  // same seed reproduces the same mask
  Rng drop_rng2(99);
  Tape<double> t2(TapeOptions{.recording = true, .training = true,
                              .check_finite = true});
  auto y2 = dropout(t2, x, 0.75, drop_rng2);
  for (std::size_t i = 0; i < x.numel(); ++i)
    REQUIRE(y.data()[i] == y2.data()[i]);

  REQUIRE_THROWS_AS(dropout(train_tape, x, 0.0, drop_rng), ContractError);
  REQUIRE_THROWS_AS(dropout(train_tape, x, 1.5, drop_rng), ContractError);
}

TEST_CASE("dropout gradient equals its forward mask") {
  Rng rng(14);
  auto x = Tensor<double>::param(random_array(rng, {8, 8}));
  Tape<double> tape(TapeOptions{.recording = true, .training = true,
                                .check_finite = true});
  Rng drop_rng(7);
  auto y = dropout(tape, x, 0.5, drop_rng);
  auto loss = sum_all(tape, y);
  tape.backward(loss);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double mask = x.data()[i] != 0.0 ? y.data()[i] / x.data()[i] : 0.0;
    REQUIRE(x.grad()[i] == Catch::Approx(mask));
  }
}

TEST_CASE("reshape keeps values and routes gradients flat") {
  Rng rng(15);
  auto x = Tensor<double>::param(random_array(rng, {6, 2}));
  Tape<double> tape;
  auto y = reshape(tape, x, {3, 4});
  REQUIRE(y.shape() == std::vector<std::size_t>{3, 4});
  REQUIRE_THROWS_AS(reshape(tape, x, {5, 2}), DimensionError);
  auto loss = mean_all(tape, square(tape, y));
  tape.backward(loss);
  for (std::size_t i = 0; i < x.numel(); ++i)
    REQUIRE(x.grad()[i] == Catch::Approx(2.0 * x.data()[i] / 12.0));
}

TEST_CASE("detach cuts the graph") {
  Tape<double> tape;
  auto x = Tensor<double>::param(Array<double>::full({1}, 2.0));
  auto d = detach(square(tape, x));
  REQUIRE_FALSE(d.requires_grad());
  auto loss = mul(tape, d, x);
  tape.backward(loss);
  REQUIRE(x.grad()[0] == 4.0);  // only the direct path contributes
}
