#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fd_check.hpp"
#include "mia/common.hpp"
#include "mia/rng.hpp"
#include "mia/tensor.hpp"

using namespace mia;
using namespace mia::ops;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Runs loss_fn twice: once under a tape for analytic grads, then forward-only
// inside the finite-difference oracle.
void check_gradients(std::vector<Tensor> params, const std::function<Tensor()>& loss_fn,
                     double tol = 1e-4) {
  for (auto& p : params) p.set_requires_grad(true);
  {
    Tape tape;
    Tensor loss = loss_fn();
    tape.backward(loss);
  }
  auto forward_only = [&]() { return loss_fn().item(); };
  auto rep = mia::testing::fd_compare(params, forward_only);
  INFO("worst: ", rep.worst);
  CHECK(rep.max_rel_err < tol);
  for (auto& p : params) p.set_requires_grad(false);
}

}  // namespace

TEST_CASE("softmax of equal logits is uniform") {
  Tensor x = Tensor::from_values({2}, {0.0, 0.0});
  Tensor y = softmax_lastdim(x);
  CHECK(y.values()[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(y.values()[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("log undoes exp") {
  Tensor x = Tensor::from_values({1}, {1.5});
  Tensor y = log(exp(x));
  CHECK(y.item() == doctest::Approx(1.5).epsilon(1e-12));
}

TEST_CASE("matmul of ones counts the inner dimension") {
  Tensor a = Tensor::full({2, 3}, 1.0);
  Tensor b = Tensor::full({3, 2}, 1.0);
  Tensor c = matmul(a, b);
  REQUIRE(c.shape() == Shape{2, 2});
  for (double v : c.values()) CHECK(v == 3.0);
}

TEST_CASE("matmul rejects mismatched inner dims with op name") {
  Tensor a = Tensor::full({2, 3}, 1.0);
  Tensor b = Tensor::full({4, 2}, 1.0);
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("matmul"), Error);
}

TEST_CASE("log of non-positive input is a domain error, not NaN") {
  Tensor x = Tensor::from_values({2}, {1.0, 0.0});
  CHECK_THROWS_AS(log(x), Error);
  Tensor d = Tensor::from_values({2}, {1.0, 0.0});
  CHECK_THROWS_AS(div(Tensor::full({2}, 1.0), d), Error);
}

TEST_CASE("backward of x*x at x=3 gives 6") {
  Tensor x = Tensor::scalar(3.0);
  x.set_requires_grad(true);
  Tape tape;
  Tensor loss = mul(x, x);
  tape.backward(loss);
  CHECK(x.grad_view()[0] == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("backward rejects non-scalar loss") {
  Tensor x = Tensor::full({3}, 1.0);
  x.set_requires_grad(true);
  Tape tape;
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), Error);
}

TEST_CASE("softmax rows sum to one and gradients vanish through sum") {
  Rng rng(11);
  Tensor z = random_tensor({4, 7}, rng);
  z.set_requires_grad(true);
  Tape tape;
  Tensor s = sum(softmax_lastdim(z));
  tape.backward(s);
  // each row of softmax sums to 1, so d sum / dz == 0
  for (double g : z.grad_view()) CHECK(std::fabs(g) < 1e-12);
  for (int64_t r = 0; r < 4; ++r) {
    double row = 0.0;
    Tensor sm = softmax_lastdim(z);
    for (int64_t j = 0; j < 7; ++j) {
      const double v = sm.values()[r * 7 + j];
      CHECK(v >= 0.0);
      row += v;
    }
    CHECK(row == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("layer_norm then mean matches finite differences") {
  Rng rng(42);
  Tensor x = random_tensor({3, 4}, rng);
  check_gradients({x}, [&]() { return mean(layer_norm_lastdim(x)); });
  // mean alone kills the signal through LN's shift invariance; stress the
  // full Jacobian with an asymmetric weighting too.
  Tensor w = random_tensor({3, 4}, rng);
  check_gradients({x}, [&]() { return mean(mul(layer_norm_lastdim(x), w)); });
}

TEST_CASE("every primitive passes the finite-difference oracle") {
  Rng rng(7);

  SUBCASE("add/sub/mul same shape") {
    Tensor a = random_tensor({3, 5}, rng), b = random_tensor({3, 5}, rng);
    check_gradients({a, b}, [&]() { return mean(mul(add(a, b), sub(a, b))); });
  }
  SUBCASE("div with safe denominator") {
    Tensor a = random_tensor({2, 4}, rng);
    Tensor b = random_tensor({2, 4}, rng, 0.5, 1.5);
    check_gradients({a, b}, [&]() { return mean(div(a, b)); });
  }
  SUBCASE("row broadcast (bias add, gain mul)") {
    Tensor x = random_tensor({4, 6}, rng);
    Tensor bias = random_tensor({6}, rng);
    Tensor gain = random_tensor({6}, rng, 0.5, 1.5);
    check_gradients({x, bias, gain}, [&]() { return mean(mul(add(x, bias), gain)); });
  }
  SUBCASE("scalar broadcast both sides") {
    Tensor x = random_tensor({3, 3}, rng);
    Tensor s = random_tensor({1}, rng, 0.5, 1.5);
    check_gradients({x, s}, [&]() { return mean(add(mul(x, s), sub(s, x))); });
  }
  SUBCASE("exp log neg abs") {
    Tensor x = random_tensor({8}, rng, 0.4, 1.4);
    check_gradients({x}, [&]() { return mean(add(log(x), neg(exp(abs(x))))); });
  }
  SUBCASE("gelu") {
    Tensor x = random_tensor({12}, rng);
    check_gradients({x}, [&]() { return mean(gelu(x)); });
  }
  SUBCASE("clamp away from the kink") {
    Tensor x = random_tensor({6}, rng, 0.2, 0.8);
    check_gradients({x}, [&]() { return mean(add(clamp_max(x, 10.0), clamp_min(x, -10.0))); });
  }
  SUBCASE("matmul all transpose combinations") {
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
    Tensor at = random_tensor({4, 3}, rng), bt = random_tensor({2, 4}, rng);
    check_gradients({a, b}, [&]() { return mean(matmul(a, b)); });
    check_gradients({a, bt}, [&]() { return mean(matmul(a, bt, false, true)); });
    check_gradients({at, b}, [&]() { return mean(matmul(at, b, true, false)); });
    check_gradients({at, bt}, [&]() { return mean(matmul(at, bt, true, true)); });
  }
  SUBCASE("softmax and log_softmax") {
    Tensor x = random_tensor({3, 5}, rng);
    Tensor w = random_tensor({3, 5}, rng);
    check_gradients({x}, [&]() { return mean(mul(softmax_lastdim(x), w)); });
    check_gradients({x}, [&]() { return mean(mul(log_softmax_lastdim(x), w)); });
  }
  SUBCASE("logsumexp and max") {
    Tensor x = random_tensor({4, 6}, rng);
    check_gradients({x}, [&]() { return mean(logsumexp_lastdim(x)); });
    check_gradients({x}, [&]() { return mean(max_lastdim(x)); });
  }
  SUBCASE("causal softmax") {
    Tensor x = random_tensor({5, 5}, rng);
    Tensor w = random_tensor({5, 5}, rng);
    check_gradients({x}, [&]() { return mean(mul(softmax_causal(x), w)); });
  }
  SUBCASE("embedding gather") {
    Tensor table = random_tensor({7, 3}, rng);
    const std::vector<int> ids = {1, 4, 4, 0, 6};
    Tensor w = random_tensor({5, 3}, rng);
    check_gradients({table}, [&]() { return mean(mul(embedding_rows(table, ids), w)); });
  }
  SUBCASE("select_lastdim") {
    Tensor x = random_tensor({2, 6}, rng);
    const std::vector<int> cols = {5, 1, 1};
    check_gradients({x}, [&]() { return mean(select_lastdim(x, cols)); });
  }
  SUBCASE("concat and slice on both axes") {
    Tensor a = random_tensor({2, 3}, rng), b = random_tensor({2, 3}, rng);
    check_gradients({a, b}, [&]() {
      Tensor c0 = concat_axis(a, b, 0);
      Tensor c1 = concat_axis(a, b, 1);
      Tensor s0 = slice_axis(c0, 0, 1, 2);
      Tensor s1 = slice_axis(c1, 1, 2, 3);
      return add(mean(s0), mean(s1));
    });
  }
  SUBCASE("cross entropy with mixed weights") {
    Tensor logits = random_tensor({4, 9}, rng);
    const std::vector<int> targets = {3, 0, 8, 5};
    const std::vector<double> weights = {1.0, 0.01, 0.0, 1.0};
    check_gradients({logits}, [&]() { return cross_entropy_logits(logits, targets, weights); });
  }
  SUBCASE("stack_scalars") {
    Tensor a = random_tensor({1}, rng), b = random_tensor({1}, rng), c = random_tensor({1}, rng);
    check_gradients({a, b, c}, [&]() {
      const Tensor parts[] = {a, b, c};
      return mean(exp(stack_scalars(parts)));
    });
  }
}

TEST_CASE("cross entropy equals fused log_softmax route") {
  Rng rng(3);
  Tensor logits = random_tensor({5, 11}, rng);
  const std::vector<int> targets = {1, 10, 4, 4, 0};
  const std::vector<double> weights = {1, 1, 1, 1, 1};
  const double fused = cross_entropy_logits(logits, targets, weights).item();
  Tensor lsm = log_softmax_lastdim(logits);
  double manual = 0.0;
  for (int r = 0; r < 5; ++r) manual -= lsm.values()[r * 11 + targets[r]];
  CHECK(fused == doctest::Approx(manual).epsilon(1e-12));
}

TEST_CASE("gradient accumulation is additive across backward passes") {
  Rng rng(9);
  Tensor x = random_tensor({4}, rng);
  x.set_requires_grad(true);

  auto f = [&]() { return mean(mul(x, x)); };
  auto g = [&]() { return sum(exp(x)); };

  std::vector<double> grad_f, grad_g;
  {
    Tape tape;
    tape.backward(f());
    grad_f = x.grad_view();
    x.zero_grad();
  }
  {
    Tape tape;
    tape.backward(g());
    grad_g = x.grad_view();
    x.zero_grad();
  }
  {
    Tape tape;
    Tensor both = add(f(), g());
    tape.backward(both);
  }
  for (size_t i = 0; i < 4; ++i) {
    CHECK(x.grad_view()[i] == doctest::Approx(grad_f[i] + grad_g[i]).epsilon(1e-12));
  }
}

TEST_CASE("causal softmax output is invariant to future columns") {
  Rng rng(5);
  Tensor x = random_tensor({4, 4}, rng);
  Tensor y1 = softmax_causal(x);
  Tensor x2 = Tensor::from_values({4, 4}, x.values());
  x2.values()[0 * 4 + 3] = 99.0;  // column 3 is in row 0's future
  x2.values()[1 * 4 + 2] = -7.0;
  Tensor y2 = softmax_causal(x2);
  for (int j = 0; j < 4; ++j) {
    CHECK(y1.values()[0 * 4 + j] == y2.values()[0 * 4 + j]);  // bit-identical
    CHECK(y1.values()[1 * 4 + j] == y2.values()[1 * 4 + j]);
  }
}

TEST_CASE("adamw single step matches the hand-evaluated update") {
  // Oracle evaluated independently: m=0.1, v=1e-3, mhat=1, vhat=1,
  // p' = 1 - 0.1 * 1/(1+1e-8) = 0.90000000099999999.
  Tensor p = Tensor::scalar(1.0);
  p.set_requires_grad(true);
  p.grad()[0] = 1.0;
  AdamW opt({p}, {.lr = 0.1, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8, .weight_decay = 0.0});
  opt.step();
  CHECK(std::fabs(p.values()[0] - 0.90000000099999999) < 1e-12);
  CHECK(opt.step_count() == 1);
  CHECK_FALSE(p.has_grad());  // grads zeroed after the step
}

TEST_CASE("adamw fixed points and decoupled decay") {
  SUBCASE("zero grad, zero decay leaves the parameter unchanged") {
    Tensor p = Tensor::scalar(2.5);
    p.set_requires_grad(true);
    p.grad();  // zero gradient
    AdamW opt({p}, {.lr = 0.1, .weight_decay = 0.0});
    opt.step();
    CHECK(p.values()[0] == 2.5);
  }
  SUBCASE("zero grad with decay shrinks by exactly lr*wd*p") {
    Tensor p = Tensor::scalar(2.0);
    p.set_requires_grad(true);
    p.grad();
    AdamW opt({p}, {.lr = 0.1, .weight_decay = 0.05});
    opt.step();
    CHECK(p.values()[0] == doctest::Approx(2.0 - 0.1 * 0.05 * 2.0).epsilon(1e-15));
  }
  SUBCASE("missing gradient is an error") {
    Tensor p = Tensor::scalar(1.0);
    p.set_requires_grad(true);
    AdamW opt({p}, {});
    CHECK_THROWS_AS(opt.step(), Error);
  }
}

TEST_CASE("same seed gives bit-identical trajectories") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    Tensor w = random_tensor({4, 4}, rng);
    Tensor x = random_tensor({4, 4}, rng);
    w.set_requires_grad(true);
    AdamW opt({w}, {.lr = 0.01});
    for (int step = 0; step < 5; ++step) {
      Tape tape;
      Tensor loss = mean(mul(matmul(x, w), matmul(x, w)));
      tape.backward(loss);
      opt.step();
    }
    return w.values();
  };
  auto a = run(123), b = run(123), c = run(124);
  CHECK(a == b);
  CHECK(a != c);
}

TEST_CASE("no tape means nothing is recorded") {
  Tensor x = Tensor::scalar(2.0);
  x.set_requires_grad(true);
  Tensor y = mul(x, x);  // no active tape
  CHECK_FALSE(y.requires_grad());
}
