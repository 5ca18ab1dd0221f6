#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "mhss/flops.hpp"
#include "mhss/gradcheck.hpp"
#include "mhss/rng.hpp"
#include "mhss/tensor.hpp"

#include "oracles.hpp"

using namespace mhss;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool param = false) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.gauss();
  return param ? Tensor::param(std::move(shape), std::move(v))
               : Tensor::from(std::move(shape), std::move(v));
}

}  // namespace

TEST_CASE("shape helpers", "[tensor]") {
  CHECK(shape_numel({2, 3, 4}) == 24);
  CHECK(shape_numel({}) == 1);
  CHECK(shape_str({2, 3}) == "(2,3)");
}

TEST_CASE("factories and accessors", "[tensor]") {
  Tensor t = Tensor::from({2, 2}, {1, 2, 3, 4});
  CHECK(t.rank() == 2);
  CHECK(t.size() == 4);
  CHECK(t.data()[3] == 4.0);
  CHECK_FALSE(t.requires_grad());
  CHECK(Tensor::zeros({3}).data() == std::vector<double>{0, 0, 0});
  CHECK(Tensor::full({2}, 7.0).data() == std::vector<double>{7, 7});
  CHECK(Tensor::scalar(5.0).value() == 5.0);
  CHECK(Tensor::param({2}).requires_grad());
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(Tensor::from({2}, {1, 2}).value(), ContractError);
}

TEST_CASE("matmul matches the triple-loop oracle", "[tensor]") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng.below(5), k = 1 + rng.below(5), n = 1 + rng.below(5);
    Tensor a = random_tensor({m, k}, rng);
    Tensor b = random_tensor({k, n}, rng);
    const std::vector<double> want = oracle::matmul(a.data(), b.data(), m, k, n);
    Tensor c = matmul(a, b);
    REQUIRE(c.shape() == Shape{m, n});
    for (std::size_t i = 0; i < want.size(); ++i) {
      CHECK(c.data()[i] == Catch::Approx(want[i]).margin(1e-12));
    }
  }
}

TEST_CASE("matmul broadcasting over batches", "[tensor]") {
  Rng rng(12);
  Tensor a = random_tensor({3, 2, 4}, rng);
  Tensor b = random_tensor({4, 5}, rng);
  Tensor c = matmul(a, b);  // shared rhs
  REQUIRE(c.shape() == Shape{3, 2, 5});
  Tensor b3 = random_tensor({3, 4, 5}, rng);
  Tensor c3 = matmul(a, b3);  // per-batch rhs
  REQUIRE(c3.shape() == Shape{3, 2, 5});
  for (std::size_t bi = 0; bi < 3; ++bi) {
    const std::vector<double> asub(a.data().begin() + bi * 8, a.data().begin() + (bi + 1) * 8);
    const std::vector<double> bsub(b3.data().begin() + bi * 20, b3.data().begin() + (bi + 1) * 20);
    const std::vector<double> want_shared = oracle::matmul(asub, b.data(), 2, 4, 5);
    const std::vector<double> want_batched = oracle::matmul(asub, bsub, 2, 4, 5);
    for (std::size_t i = 0; i < 10; ++i) {
      CHECK(c.data()[bi * 10 + i] == Catch::Approx(want_shared[i]).margin(1e-12));
      CHECK(c3.data()[bi * 10 + i] == Catch::Approx(want_batched[i]).margin(1e-12));
    }
  }
  CHECK_THROWS_AS(matmul(random_tensor({2, 3}, rng), random_tensor({4, 2}, rng)),
                  DimensionError);
  CHECK_THROWS_AS(matmul(random_tensor({2, 2, 3}, rng), random_tensor({3, 3, 2}, rng)),
                  DimensionError);
}

TEST_CASE("matmul records exact MAC counts", "[tensor]") {
  Rng rng(13);
  flop_counter().reset();
  matmul(random_tensor({3, 4}, rng), random_tensor({4, 5}, rng));
  CHECK(flop_counter().total() == 3 * 4 * 5);
  {
    FlopStage stage("outer");
    matmul(random_tensor({2, 3, 4}, rng), random_tensor({4, 5}, rng));
    {
      FlopStage inner("inner");
      matmul(random_tensor({2, 2}, rng), random_tensor({2, 2}, rng));
    }
  }
  CHECK(flop_counter().by_tag("outer") == 2 * 3 * 4 * 5);
  CHECK(flop_counter().by_tag("inner") == 2 * 2 * 2);  // innermost label wins
  CHECK(flop_counter().by_tag("matmul") == 3 * 4 * 5);  // fallback tag outside stages
  flop_counter().reset();
  CHECK(flop_counter().total() == 0);
}

TEST_CASE("sigmoid is stable and open-bounded", "[tensor]") {
  Tensor x = Tensor::from({5}, {0.0, 1.0, -1.0, 1000.0, -1000.0});
  Tensor y = sigmoid(x);
  CHECK(y.data()[0] == 0.5);
  CHECK(y.data()[1] == Catch::Approx(0.7310585786300049).epsilon(1e-15));
  CHECK(y.data()[2] == Catch::Approx(1.0 - 0.7310585786300049).epsilon(1e-15));
  CHECK(y.data()[3] < 1.0);  // clamped into the open interval
  CHECK(y.data()[4] > 0.0);
  for (double v : y.data()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  CHECK_THROWS_AS(sigmoid(Tensor::from({1}, {std::nan("")})), NumericError);
}

TEST_CASE("relu forward", "[tensor]") {
  Tensor y = relu(Tensor::from({4}, {-2.0, 0.0, 0.5, 3.0}));
  CHECK(y.data() == std::vector<double>{0.0, 0.0, 0.5, 3.0});
}

TEST_CASE("elementwise ops", "[tensor]") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
  CHECK(hadamard(a, b).data() == std::vector<double>{5, 12, 21, 32});
  CHECK(add(a, b).data() == std::vector<double>{6, 8, 10, 12});
  CHECK(scale(a, 2.0).data() == std::vector<double>{2, 4, 6, 8});
  CHECK_THROWS_AS(add(a, Tensor::from({3}, {1, 2, 3})), DimensionError);
  Tensor bias = Tensor::from({2}, {10, 20});
  CHECK(add_rowwise(a, bias).data() == std::vector<double>{11, 22, 13, 24});
  CHECK_THROWS_AS(add_rowwise(a, Tensor::from({3}, {1, 2, 3})), DimensionError);
}

TEST_CASE("structural ops", "[tensor]") {
  Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(reshape(a, {3, 2}).data() == a.data());
  CHECK_THROWS_AS(reshape(a, {4, 2}), DimensionError);
  CHECK(transpose_last_two(a).data() == std::vector<double>{1, 4, 2, 5, 3, 6});
  CHECK(transpose_last_two(a).shape() == Shape{3, 2});
  Tensor b = Tensor::from({2, 2}, {7, 8, 9, 10});
  Tensor c = concat_last(Tensor::from({2, 1}, {0, 5}), b);
  CHECK(c.shape() == Shape{2, 3});
  CHECK(c.data() == std::vector<double>{0, 7, 8, 5, 9, 10});
  CHECK(mean_rows(a).data() == std::vector<double>{2.5, 3.5, 4.5});
  CHECK(sum(a).value() == 21.0);
  Tensor tokens = Tensor::from({1, 2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(select_token(tokens, 1).data() == std::vector<double>{4, 5, 6});
  CHECK(select_token(tokens, 1).shape() == Shape{1, 3});
  CHECK_THROWS_AS(select_token(tokens, 2), ContractError);
  Tensor g = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor bt = broadcast_tokens(g, 3);
  CHECK(bt.shape() == Shape{2, 3, 2});
  CHECK(bt.data() == std::vector<double>{1, 2, 1, 2, 1, 2, 3, 4, 3, 4, 3, 4});
}

TEST_CASE("softmax rows", "[tensor]") {
  Rng rng(21);
  Tensor x = random_tensor({3, 4, 5}, rng);
  Tensor y = softmax_rows(x);
  for (std::size_t r = 0; r < 12; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 5; ++j) s += y.data()[r * 5 + j];
    CHECK(s == Catch::Approx(1.0).margin(1e-12));
  }
  // shift invariance: adding a constant per row changes nothing (max-subtracted)
  Tensor shifted = softmax_rows(add(x, Tensor::full(x.shape(), 123.0)));
  for (std::size_t i = 0; i < y.size(); ++i) {
    CHECK(shifted.data()[i] == Catch::Approx(y.data()[i]).margin(1e-15));
  }
  // large magnitudes stay finite
  Tensor big = softmax_rows(Tensor::from({1, 3}, {1e8, -1e8, 0.0}));
  for (double v : big.data()) CHECK(std::isfinite(v));
  CHECK(big.data()[0] == Catch::Approx(1.0).margin(1e-12));
  // oracle comparison
  const std::vector<double> row = {0.3, -1.2, 2.2, 0.0};
  Tensor o = softmax_rows(Tensor::from({1, 4}, row));
  const std::vector<double> want = oracle::softmax(row);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(o.data()[i] == Catch::Approx(want[i]).margin(1e-14));
  }
}

TEST_CASE("cross entropy values", "[tensor]") {
  // uniform logits: loss is exactly ln K
  Tensor logits = Tensor::zeros({2, 4});
  CHECK(cross_entropy(logits, {0, 3}).value() == Catch::Approx(std::log(4.0)).margin(1e-12));
  // a confident correct logit drives loss to ~0
  Tensor sharp = Tensor::from({1, 3}, {50.0, 0.0, 0.0});
  CHECK(cross_entropy(sharp, {0}).value() < 1e-12);
  CHECK_THROWS_AS(cross_entropy(logits, {0}), ContractError);        // label count
  CHECK_THROWS_AS(cross_entropy(logits, {0, 4}), ContractError);     // label range
  const std::string msg = [&] {
    try {
      cross_entropy(logits, {0, 9});
    } catch (const ContractError& e) {
      return std::string(e.what());
    }
    return std::string();
  }();
  CHECK(msg.find("9") != std::string::npos);  // offending label named
}

TEST_CASE("backward requires a scalar and accumulates into leaves", "[tensor]") {
  Tensor x = Tensor::param({2}, {3.0, 4.0});
  CHECK_THROWS_AS(backward(scale(x, 2.0)), ContractError);
  Tensor loss = sum(hadamard(x, x));  // d/dx sum(x^2) = 2x
  backward(loss);
  REQUIRE(x.has_grad());
  CHECK(x.grad()[0] == Catch::Approx(6.0));
  CHECK(x.grad()[1] == Catch::Approx(8.0));
  // leaf grads accumulate across backward calls until zero_grad
  backward(loss);
  CHECK(x.grad()[0] == Catch::Approx(12.0));
  x.zero_grad();  // keeps the buffer, resets the values
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == 0.0);
}

TEST_CASE("diamond-shaped graphs accumulate both paths", "[tensor]") {
  Tensor x = Tensor::param({1}, {2.0});
  Tensor y = add(hadamard(x, x), scale(x, 3.0));  // x^2 + 3x, dy/dx = 2x + 3 = 7
  backward(sum(y));
  CHECK(x.grad()[0] == Catch::Approx(7.0));
}

TEST_CASE("NoGradGuard suppresses graph construction", "[tensor]") {
  Tensor x = Tensor::param({2}, {1.0, 2.0});
  NoGradGuard guard;
  Tensor y = hadamard(x, x);
  CHECK(y.node()->parents.empty());
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("finite differences confirm every op's backward rule", "[tensor]") {
  Rng rng(31);
  const auto check_scalar_fn = [&](const std::function<Tensor()>& f,
                                   const std::vector<Tensor>& params) {
    CHECK(grad_check_max_error(f, params, 1e-6) < 1e-6);
  };

  Tensor a = random_tensor({3, 4}, rng, true);
  Tensor b = random_tensor({4, 2}, rng, true);
  check_scalar_fn([&] { return sum(matmul(a, b)); }, {a, b});

  Tensor batched = random_tensor({2, 3, 4}, rng, true);
  check_scalar_fn([&] { return sum(matmul(batched, b)); }, {batched, b});
  Tensor rhs = random_tensor({2, 4, 3}, rng, true);
  check_scalar_fn([&] { return sum(matmul(batched, rhs)); }, {batched, rhs});

  Tensor x = random_tensor({2, 5}, rng, true);
  check_scalar_fn([&] { return sum(sigmoid(x)); }, {x});
  check_scalar_fn([&] { return sum(hadamard(x, sigmoid(x))); }, {x});
  check_scalar_fn([&] { return sum(hadamard(softmax_rows(x), x)); }, {x});
  check_scalar_fn([&] { return cross_entropy(x, {1, 4}); }, {x});
  check_scalar_fn([&] { return sum(mean_rows(x)); }, {x});
  check_scalar_fn([&] { return sum(scale(x, -1.7)); }, {x});
  check_scalar_fn([&] { return sum(transpose_last_two(hadamard(x, x))); }, {x});
  check_scalar_fn([&] { return sum(reshape(hadamard(x, x), {5, 2})); }, {x});

  Tensor bias = random_tensor({5}, rng, true);
  check_scalar_fn([&] { return cross_entropy(add_rowwise(x, bias), {0, 2}); }, {x, bias});

  Tensor g = random_tensor({2, 3}, rng, true);
  Tensor tok = random_tensor({2, 4, 3}, rng, true);
  check_scalar_fn([&] { return sum(hadamard(tok, broadcast_tokens(g, 4))); }, {g, tok});
  check_scalar_fn([&] { return sum(hadamard(select_token(tok, 2), g)); }, {g, tok});
  check_scalar_fn([&] { return sum(concat_last(hadamard(g, g), sigmoid(g))); }, {g});

  // relu probed away from its kink
  Tensor r = Tensor::param({4}, {-1.0, 2.0, -3.0, 4.0});
  check_scalar_fn([&] { return sum(relu(r)); }, {r});
}

TEST_CASE("a corrupted backward rule is caught by the checker", "[tensor]") {
  Tensor x = Tensor::param({3}, {0.5, -1.0, 2.0});
  const auto broken_square = [&] {
    std::vector<double> out(3);
    for (std::size_t i = 0; i < 3; ++i) out[i] = x.data()[i] * x.data()[i];
    return Tensor::make_op({3}, std::move(out), {x}, "broken_square", [](Node& node) {
      // wrong rule: should be 2*x*grad, deliberately uses 3*x*grad
      Node& parent = *node.parents[0];
      parent.ensure_grad();
      for (std::size_t i = 0; i < 3; ++i) {
        parent.grad[i] += 3.0 * parent.data[i] * node.grad[i];
      }
    });
  };
  const double err = grad_check_max_error([&] { return sum(broken_square()); }, {x}, 1e-6);
  CHECK(err > 1e-2);
}

TEST_CASE("deterministic rng streams", "[tensor]") {
  Rng a(99), b(99);
  for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
  Rng c(99), d(100);
  CHECK(c.next_u64() != d.next_u64());

  Rng u(5);
  for (int i = 0; i < 1000; ++i) {
    const double v = u.uniform();
    CHECK(v >= 0.0);
    CHECK(v < 1.0);
    const std::size_t n = u.below(17);
    CHECK(n < 17);
  }
  // gauss: crude moment check over many draws
  Rng g(6);
  double mean = 0, var = 0;
  const int draws = 20000;
  for (int i = 0; i < draws; ++i) {
    const double v = g.gauss();
    mean += v;
    var += v * v;
  }
  mean /= draws;
  var = var / draws - mean * mean;
  CHECK(std::abs(mean) < 0.03);
  CHECK(std::abs(var - 1.0) < 0.05);

  // shuffle yields a permutation and is deterministic
  std::vector<int> v1{1, 2, 3, 4, 5, 6, 7}, v2{1, 2, 3, 4, 5, 6, 7};
  Rng s1(7), s2(7);
  shuffle(v1, s1);
  shuffle(v2, s2);
  CHECK(v1 == v2);
  CHECK(std::set<int>(v1.begin(), v1.end()) == std::set<int>{1, 2, 3, 4, 5, 6, 7});
  CHECK(Rng::stream(1, 2).next_u64() != Rng::stream(1, 3).next_u64());
}

TEST_CASE("forward values never go NaN silently", "[tensor]") {
  // ops validate inputs where overflow is plausible; sigmoid is the guard
  CHECK_THROWS_AS(sigmoid(Tensor::from({2}, {1.0, std::nan("")})), NumericError);
  // stable cross entropy survives huge logits
  Tensor wild = Tensor::from({1, 2}, {1e300, -1e300});
  CHECK(std::isfinite(cross_entropy(wild, {0}).value()));
}
