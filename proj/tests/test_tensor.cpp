#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "vitrm/tensor.hpp"

using vitrm::TapeT;
using vitrm::TensorT;
using Tensor = TensorT<double>;
using Tape = TapeT<double>;

namespace {

// Runs one taped forward/backward, then compares every tracked input's
// gradient against central differences of the same forward.
template <class Forward>
void gradcheck(std::vector<Tensor*> inputs, Forward&& forward,
               double tol = 1e-4) {
  {
    Tape tape;
    auto loss = forward();
    vitrm::backward(loss);
  }
  auto scalar = [&] { return forward().item(); };
  for (Tensor* t : inputs) {
    auto res = oracles::check_gradient(*t, scalar);
    CHECK(res.max_rel_err < tol);
  }
}

Tensor rand_t(std::size_t r, std::size_t c, std::mt19937_64& rng,
              bool tracked = false) {
  return oracles::random_tensor<double>(r, c, rng, tracked);
}

}  // namespace

TEST_CASE("matmul: identity and zeros") {
  std::mt19937_64 rng(1);
  auto m = rand_t(3, 3, rng);
  auto out = vitrm::matmul(Tensor::identity(3), m);
  for (std::size_t i = 0; i < 9; ++i) CHECK(out.data()[i] == m.data()[i]);

  auto z = vitrm::matmul(Tensor::zeros(2, 3), rand_t(3, 4, rng));
  CHECK(z.rows() == 2);
  CHECK(z.cols() == 4);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(z.data()[i] == 0.0);
}

TEST_CASE("matmul: matches the triple-loop oracle exactly in 64-bit") {
  std::mt19937_64 rng(2);
  auto a = rand_t(2, 3, rng);
  auto b = rand_t(3, 2, rng);
  auto out = vitrm::matmul(a, b);
  auto ref = oracles::naive_matmul(a.values(), b.values(), 2, 3, 2);
  for (std::size_t i = 0; i < ref.size(); ++i)
    CHECK(out.data()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
}

TEST_CASE("matmul: shape mismatch names both shapes") {
  auto a = Tensor::zeros(2, 3);
  auto b = Tensor::zeros(4, 2);
  CHECK_THROWS_WITH_AS(vitrm::matmul(a, b),
                       doctest::Contains("2x3"), std::invalid_argument);
}

TEST_CASE("matmul: gradient vs central differences") {
  std::mt19937_64 rng(3);
  auto a = rand_t(3, 4, rng, true);
  auto b = rand_t(4, 2, rng, true);
  auto w = rand_t(3, 2, rng);
  gradcheck({&a, &b}, [&] {
    return vitrm::sum_all(vitrm::mul_elem(vitrm::matmul(a, b), w));
  });
}

TEST_CASE("add: zeros is identity, bias row broadcasts") {
  std::mt19937_64 rng(4);
  auto a = rand_t(2, 3, rng);
  auto out = vitrm::add(a, Tensor::zeros(2, 3));
  for (std::size_t i = 0; i < a.size(); ++i)
    CHECK(out.data()[i] == a.data()[i]);

  auto bias = rand_t(1, 3, rng);
  auto broadcast = vitrm::add(a, bias);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 3; ++c)
      CHECK(broadcast.at(r, c) == a.at(r, c) + bias.at(0, c));

  CHECK_THROWS_AS(vitrm::add(a, Tensor::zeros(3, 3)), std::invalid_argument);
}

TEST_CASE("add: broadcast bias backward is the column sum") {
  std::mt19937_64 rng(5);
  auto a = rand_t(4, 3, rng, true);
  auto bias = rand_t(1, 3, rng, true);
  auto w = rand_t(4, 3, rng);
  gradcheck({&a, &bias}, [&] {
    return vitrm::sum_all(vitrm::mul_elem(vitrm::add(a, bias), w));
  });
  // direct column-sum identity with unit upstream gradient
  {
    Tape tape;
    auto loss = vitrm::sum_all(vitrm::add(a, bias));
    a.zero_grad();
    bias.zero_grad();
    vitrm::backward(loss);
  }
  for (std::size_t c = 0; c < 3; ++c)
    CHECK(bias.grad()[c] == doctest::Approx(4.0));
}

TEST_CASE("concat_tokens: stacking order, single part, width mismatch") {
  std::mt19937_64 rng(6);
  const std::size_t d = 5;
  auto x = rand_t(4, d, rng);
  auto y = rand_t(1, d, rng);
  auto z = rand_t(2, d, rng);
  auto cat = vitrm::concat_tokens<double>({x, y, z});
  CHECK(cat.rows() == 7);
  for (std::size_t c = 0; c < d; ++c) {
    CHECK(cat.at(0, c) == x.at(0, c));
    CHECK(cat.at(4, c) == y.at(0, c));
    CHECK(cat.at(5, c) == z.at(0, c));
  }

  auto single = vitrm::concat_tokens<double>({x});
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(single.data()[i] == x.data()[i]);

  CHECK_THROWS_AS(vitrm::concat_tokens<double>({x, rand_t(2, d + 1, rng)}),
                  std::invalid_argument);
}

TEST_CASE("concat/slice are mutually inverse, bit-exact") {
  std::mt19937_64 rng(7);
  auto x = rand_t(4, 3, rng);
  auto y = rand_t(1, 3, rng);
  auto z = rand_t(2, 3, rng);
  auto cat = vitrm::concat_tokens<double>({x, y, z});
  auto rx = vitrm::slice_tokens(cat, 0, 4);
  auto ry = vitrm::slice_tokens(cat, 4, 1);
  auto rz = vitrm::slice_tokens(cat, 5, 2);
  CHECK(rx.values() == x.values());
  CHECK(ry.values() == y.values());
  CHECK(rz.values() == z.values());

  auto whole = vitrm::slice_tokens(cat, 0, 7);
  CHECK(whole.values() == cat.values());
}

TEST_CASE("concat_tokens/slice_tokens: batched layout keeps examples contiguous") {
  std::mt19937_64 rng(8);
  const std::size_t batch = 2, d = 3;
  auto x = rand_t(batch * 2, d, rng);  // 2 tokens per example
  auto y = rand_t(batch * 1, d, rng);  // 1 token per example
  auto cat = vitrm::concat_tokens<double>({x, y}, batch);
  CHECK(cat.rows() == batch * 3);
  // example 1 block starts at row 3: rows [3,4] from x's second block
  CHECK(cat.at(3, 0) == x.at(2, 0));
  CHECK(cat.at(5, 0) == y.at(1, 0));
  auto back_y = vitrm::slice_tokens(cat, 2, 1, batch);
  CHECK(back_y.values() == y.values());
}

TEST_CASE("slice_tokens: out-of-range is an index error") {
  auto t = Tensor::zeros(5, 2);
  CHECK_THROWS_AS(vitrm::slice_tokens(t, 4, 2), std::out_of_range);
}

TEST_CASE("concat/slice gradients") {
  std::mt19937_64 rng(9);
  auto x = rand_t(3, 4, rng, true);
  auto y = rand_t(2, 4, rng, true);
  auto w = rand_t(2, 4, rng);
  gradcheck({&x, &y}, [&] {
    auto cat = vitrm::concat_tokens<double>({x, y});
    auto sl = vitrm::slice_tokens(cat, 2, 2);
    return vitrm::sum_all(vitrm::mul_elem(sl, w));
  });
}

TEST_CASE("linear: identity weights pass through, head shapes") {
  std::mt19937_64 rng(10);
  auto x = rand_t(3, 4, rng);
  auto out = vitrm::linear(x, Tensor::identity(4), Tensor::zeros(1, 4));
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(out.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-12));

  auto head = vitrm::linear(rand_t(1, 8, rng), rand_t(10, 8, rng),
                            rand_t(1, 10, rng));
  CHECK(head.rows() == 1);
  CHECK(head.cols() == 10);

  CHECK_THROWS_AS(
      vitrm::linear(x, rand_t(5, 3, rng), Tensor::zeros(1, 5)),
      std::invalid_argument);
}

TEST_CASE("linear: gradient vs central differences under 1e-6") {
  std::mt19937_64 rng(11);
  auto x = rand_t(4, 5, rng, true);
  auto w = rand_t(3, 5, rng, true);
  auto b = rand_t(1, 3, rng, true);
  auto proj = rand_t(4, 3, rng);
  {
    Tape tape;
    auto loss =
        vitrm::sum_all(vitrm::mul_elem(vitrm::linear(x, w, b), proj));
    vitrm::backward(loss);
  }
  auto scalar = [&] {
    return vitrm::sum_all(vitrm::mul_elem(vitrm::linear(x, w, b), proj))
        .item();
  };
  for (Tensor* t : {&x, &w, &b}) {
    auto res = oracles::check_gradient(*t, scalar);
    CHECK(res.max_rel_err < 1e-6);
  }
}

TEST_CASE("layer_norm: constant row collapses to beta") {
  std::mt19937_64 rng(12);
  auto x = Tensor::full(2, 6, 3.25);
  auto gamma = rand_t(1, 6, rng);
  auto beta = rand_t(1, 6, rng);
  auto out = vitrm::layer_norm(x, gamma, beta);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 6; ++c)
      CHECK(out.at(r, c) == doctest::Approx(beta.at(0, c)).epsilon(1e-9));
}

TEST_CASE("layer_norm: pre-affine rows are standardized") {
  std::mt19937_64 rng(13);
  auto x = rand_t(5, 16, rng);
  auto out =
      vitrm::layer_norm(x, Tensor::full(1, 16, 1.0), Tensor::zeros(1, 16));
  for (std::size_t r = 0; r < 5; ++r) {
    double mean = 0, var = 0;
    for (std::size_t c = 0; c < 16; ++c) mean += out.at(r, c);
    mean /= 16;
    for (std::size_t c = 0; c < 16; ++c) {
      const double d = out.at(r, c) - mean;
      var += d * d;
    }
    var /= 16;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("layer_norm: gradient vs central differences on 3x8") {
  std::mt19937_64 rng(14);
  auto x = rand_t(3, 8, rng, true);
  auto gamma = rand_t(1, 8, rng, true);
  auto beta = rand_t(1, 8, rng, true);
  auto w = rand_t(3, 8, rng);
  gradcheck({&x, &gamma, &beta}, [&] {
    return vitrm::sum_all(
        vitrm::mul_elem(vitrm::layer_norm(x, gamma, beta), w));
  });
}

TEST_CASE("softmax_rows: shift invariance, uniform, closed form") {
  std::mt19937_64 rng(15);
  auto x = rand_t(3, 7, rng);
  auto shifted = Tensor::from_values(3, 7, x.values());
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 7; ++c) shifted.at(r, c) += 13.5;
  auto a = vitrm::softmax_rows(x);
  auto b = vitrm::softmax_rows(shifted);
  for (std::size_t i = 0; i < a.size(); ++i)
    CHECK(std::abs(a.data()[i] - b.data()[i]) < 1e-6);
  for (std::size_t r = 0; r < 3; ++r) {
    double sum = 0;
    for (std::size_t c = 0; c < 7; ++c) sum += a.at(r, c);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }

  auto uni = vitrm::softmax_rows(Tensor::full(1, 4, 0.7));
  for (std::size_t c = 0; c < 4; ++c)
    CHECK(uni.at(0, c) == doctest::Approx(0.25).epsilon(1e-12));

  auto two =
      vitrm::softmax_rows(Tensor::from_values(1, 2, {0.0, std::log(3.0)}));
  CHECK(two.at(0, 0) == doctest::Approx(0.25).epsilon(1e-9));
  CHECK(two.at(0, 1) == doctest::Approx(0.75).epsilon(1e-9));
}

TEST_CASE("softmax_rows: gradient") {
  std::mt19937_64 rng(16);
  auto x = rand_t(3, 5, rng, true);
  auto w = rand_t(3, 5, rng);
  gradcheck({&x}, [&] {
    return vitrm::sum_all(vitrm::mul_elem(vitrm::softmax_rows(x), w));
  });
}

TEST_CASE("gelu: fixed points, asymptote, gradient") {
  auto z = vitrm::gelu(Tensor::zeros(1, 1));
  CHECK(z.item() == 0.0);
  auto big = vitrm::gelu(Tensor::full(1, 1, 10.0));
  CHECK(std::abs(big.item() - 10.0) < 1e-4);

  std::mt19937_64 rng(17);
  auto x = rand_t(2, 6, rng, true);
  auto w = rand_t(2, 6, rng);
  gradcheck({&x}, [&] {
    return vitrm::sum_all(vitrm::mul_elem(vitrm::gelu(x), w));
  });
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(vitrm::gelu(x).data()[i] ==
          doctest::Approx(oracles::gelu_ref(x.data()[i])).epsilon(1e-12));
}

TEST_CASE("cross_entropy_soft: closed forms and target linearity") {
  // one-hot with a huge matching logit
  auto logits = Tensor::from_values(1, 3, {40.0, 0.0, 0.0});
  auto onehot = Tensor::from_values(1, 3, {1.0, 0.0, 0.0});
  CHECK(vitrm::cross_entropy_soft(logits, onehot).item() < 1e-9);

  // uniform logits -> ln C for any valid target
  auto uniform = Tensor::full(2, 5, 0.3);
  auto targets = Tensor::from_values(
      2, 5, {0.2, 0.2, 0.2, 0.2, 0.2, 1.0, 0.0, 0.0, 0.0, 0.0});
  CHECK(vitrm::cross_entropy_soft(uniform, targets).item() ==
        doctest::Approx(std::log(5.0)).epsilon(1e-9));

  // linearity in the target: lambda e_i + (1-lambda) e_j
  std::mt19937_64 rng(18);
  auto l = rand_t(1, 4, rng);
  const double lam = 0.3;
  auto ei = Tensor::from_values(1, 4, {1.0, 0.0, 0.0, 0.0});
  auto ej = Tensor::from_values(1, 4, {0.0, 0.0, 1.0, 0.0});
  auto mixed =
      Tensor::from_values(1, 4, {lam, 0.0, 1.0 - lam, 0.0});
  const double ce_mixed = vitrm::cross_entropy_soft(l, mixed).item();
  const double ce_split = lam * vitrm::cross_entropy_soft(l, ei).item() +
                          (1 - lam) * vitrm::cross_entropy_soft(l, ej).item();
  CHECK(ce_mixed == doctest::Approx(ce_split).epsilon(1e-9));

  auto bad = Tensor::from_values(1, 4, {0.5, 0.1, 0.1, 0.1});
  CHECK_THROWS_AS(vitrm::cross_entropy_soft(l, bad), std::invalid_argument);
}

TEST_CASE("cross_entropy_soft: gradient") {
  std::mt19937_64 rng(19);
  auto logits = rand_t(3, 4, rng, true);
  std::vector<double> t = {1, 0, 0, 0, 0.25, 0.25, 0.25, 0.25, 0, 0.6, 0.4, 0};
  auto target = Tensor::from_values(3, 4, std::move(t));
  gradcheck({&logits},
            [&] { return vitrm::cross_entropy_soft(logits, target); });
}

TEST_CASE("bce_with_logits: closed forms and closed-form gradient") {
  auto p0 = Tensor::zeros(1, 1);
  auto t1 = Tensor::full(1, 1, 1.0);
  CHECK(vitrm::bce_with_logits(p0, t1).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  auto p20 = Tensor::full(1, 1, 20.0);
  CHECK(vitrm::bce_with_logits(p20, t1).item() < 1e-8);

  std::mt19937_64 rng(20);
  auto p = rand_t(4, 1, rng, true);
  auto target = Tensor::from_values(4, 1, {1.0, 0.0, 1.0, 0.0});
  {
    Tape tape;
    auto loss = vitrm::bce_with_logits(p, target);
    vitrm::backward(loss);
  }
  for (std::size_t r = 0; r < 4; ++r) {
    const double expect =
        (vitrm::sigmoid_value(p.at(r, 0)) - target.at(r, 0)) / 4.0;
    CHECK(p.grad()[r] == doctest::Approx(expect).epsilon(1e-10));
  }
  p.zero_grad();
  gradcheck({&p}, [&] { return vitrm::bce_with_logits(p, target); });

  auto bad = Tensor::full(4, 1, 0.5);
  CHECK_THROWS_AS(vitrm::bce_with_logits(p, bad), std::invalid_argument);
}

TEST_CASE("backward: sum gives ones, shared leaf accumulates") {
  std::mt19937_64 rng(21);
  auto x = rand_t(2, 3, rng, true);
  {
    Tape tape;
    vitrm::backward(vitrm::sum_all(x));
  }
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(x.grad()[i] == 1.0);

  auto s = Tensor::full(1, 1, 3.0, true);
  {
    Tape tape;
    auto prod = vitrm::mul_elem(s, s);  // both paths hit the same leaf
    vitrm::backward(prod);
  }
  CHECK(s.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("backward: untracked loss is a usage error") {
  auto x = Tensor::zeros(1, 1);
  Tape tape;
  CHECK_THROWS_AS(vitrm::backward(x), std::logic_error);
  auto y = Tensor::zeros(2, 2, true);
  CHECK_THROWS_AS(vitrm::backward(y), std::invalid_argument);  // non-scalar
}

TEST_CASE("gradient accumulation: two backwards equal one backward of the sum") {
  std::mt19937_64 rng(22);
  auto x = rand_t(3, 3, rng, true);
  auto w1 = rand_t(3, 3, rng);
  auto w2 = rand_t(3, 3, rng);

  {
    Tape tape;
    vitrm::backward(vitrm::sum_all(vitrm::mul_elem(x, w1)));
  }
  {
    Tape tape;
    vitrm::backward(vitrm::sum_all(vitrm::mul_elem(x, w2)));
  }
  std::vector<double> twice = x.grad();

  x.zero_grad();
  {
    Tape tape;
    auto loss = vitrm::add(vitrm::sum_all(vitrm::mul_elem(x, w1)),
                           vitrm::sum_all(vitrm::mul_elem(x, w2)));
    vitrm::backward(loss);
  }
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(twice[i] == doctest::Approx(x.grad()[i]).epsilon(1e-12));
}

TEST_CASE("detach: bit-exact values, gradient fully blocked") {
  std::mt19937_64 rng(23);
  auto x = rand_t(3, 4, rng, true);
  auto d = vitrm::detach(x);
  CHECK(d.values() == x.values());
  CHECK_FALSE(d.tracked());

  {
    Tape tape;
    auto loss = vitrm::sum_all(vitrm::detach(x));
    CHECK_FALSE(loss.tracked());
    // a loss routed only through detach leaves no path to x at all
    CHECK(tape.node_count() == 0);
  }
  CHECK_FALSE(x.has_grad());
}

TEST_CASE("tape: consumed by backward, activations released") {
  std::mt19937_64 rng(24);
  auto x = rand_t(2, 2, rng, true);
  std::weak_ptr<vitrm::TensorStoreT<double>> probe;
  {
    Tape tape;
    auto mid = vitrm::gelu(x);
    probe = mid.store();
    auto loss = vitrm::sum_all(mid);
    mid = Tensor();  // drop the local handle; the tape still owns it
    CHECK_FALSE(probe.expired());
    vitrm::backward(loss);
    CHECK(tape.node_count() == 0);
  }
  CHECK(probe.expired());
}

TEST_CASE("tile_rows: replication and summed gradient") {
  std::mt19937_64 rng(25);
  auto t = rand_t(2, 3, rng, true);
  auto out = vitrm::tile_rows(t, 3);
  CHECK(out.rows() == 6);
  for (std::size_t e = 0; e < 3; ++e)
    for (std::size_t i = 0; i < t.size(); ++i)
      CHECK(out.data()[e * t.size() + i] == t.data()[i]);
  auto w = rand_t(6, 3, rng);
  gradcheck({&t}, [&] {
    return vitrm::sum_all(vitrm::mul_elem(vitrm::tile_rows(t, 3), w));
  });
}

TEST_CASE("scale_by and sum_all gradients") {
  std::mt19937_64 rng(26);
  auto x = rand_t(2, 5, rng, true);
  gradcheck({&x}, [&] { return vitrm::scale_by(vitrm::sum_all(x), 0.37); });
}

TEST_CASE("multihead_attention: singleton token attends to itself") {
  std::mt19937_64 rng(27);
  auto q = rand_t(1, 6, rng);
  auto k = rand_t(1, 6, rng);
  auto v = rand_t(1, 6, rng);
  auto out = vitrm::multihead_attention(q, k, v, 2);
  for (std::size_t i = 0; i < v.size(); ++i)
    CHECK(out.data()[i] == doctest::Approx(v.data()[i]).epsilon(1e-12));
  CHECK(vitrm::all_finite(out));
}

TEST_CASE("multihead_attention: batched result equals per-example calls") {
  std::mt19937_64 rng(28);
  const std::size_t n = 3, d = 8;
  auto q = rand_t(2 * n, d, rng);
  auto k = rand_t(2 * n, d, rng);
  auto v = rand_t(2 * n, d, rng);
  auto both = vitrm::multihead_attention(q, k, v, 4, 2);
  for (std::size_t e = 0; e < 2; ++e) {
    auto qe = vitrm::slice_tokens(q, 0, n, 2);
    auto sub = [&](const Tensor& t) {
      std::vector<double> vals(t.data() + e * n * d,
                               t.data() + (e + 1) * n * d);
      return Tensor::from_values(n, d, std::move(vals));
    };
    auto one = vitrm::multihead_attention(sub(q), sub(k), sub(v), 4);
    for (std::size_t i = 0; i < n * d; ++i)
      CHECK(both.data()[e * n * d + i] ==
            doctest::Approx(one.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("multihead_attention: gradient vs central differences") {
  std::mt19937_64 rng(29);
  const std::size_t n = 3, d = 4;
  auto q = rand_t(2 * n, d, rng, true);
  auto k = rand_t(2 * n, d, rng, true);
  auto v = rand_t(2 * n, d, rng, true);
  auto w = rand_t(2 * n, d, rng);
  gradcheck({&q, &k, &v}, [&] {
    return vitrm::sum_all(
        vitrm::mul_elem(vitrm::multihead_attention(q, k, v, 2, 2), w));
  });
}
