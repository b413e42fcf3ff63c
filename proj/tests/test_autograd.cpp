#include <catch2/catch_amalgamated.hpp>

#include "metasr/conv.hpp"
#include "metasr/gradcheck.hpp"

using namespace metasr;

namespace {

constexpr double kFirstOrderTol = 1e-5;
constexpr double kSecondOrderTol = 1e-4;

// Random tensor bounded away from zero, for ops with a kink at the origin.
Tensor away_from_zero(const Shape& s, Rng& rng, double margin = 0.2) {
  Tensor t = Tensor::uniform(s, rng, margin, 1.0);
  double* p = t.mutable_data();
  for (int64_t i = 0; i < t.numel(); ++i)
    if (rng.uniform() < 0.5) p[i] = -p[i];
  return t;
}

double brute_dot(const double* a, const double* b, int64_t n) {
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

// Direct O(m*n*k) matrix product, the oracle for the GEMM-backed ops.
Tensor brute_matmul(const Tensor& a, const Tensor& b) {
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  double* o = c.mutable_data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (int64_t t = 0; t < k; ++t) s += a.at({i, t}) * b.at({t, j});
      o[i * n + j] = s;
    }
  return c;
}

// Direct 7-loop convolution with zero padding, the oracle for conv2d.
Tensor brute_conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int64_t pad) {
  const int64_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int64_t co = w.dim(0), k = w.dim(2);
  const int64_t oh = h + 2 * pad - k + 1, ow = wd + 2 * pad - k + 1;
  Tensor y({n, co, oh, ow});
  double* o = y.mutable_data();
  for (int64_t b = 0; b < n; ++b)
    for (int64_t c0 = 0; c0 < co; ++c0)
      for (int64_t oy = 0; oy < oh; ++oy)
        for (int64_t ox = 0; ox < ow; ++ox) {
          double s = bias.numel() == co ? bias.at({c0}) : 0.0;
          for (int64_t c1 = 0; c1 < ci; ++c1)
            for (int64_t ky = 0; ky < k; ++ky)
              for (int64_t kx = 0; kx < k; ++kx) {
                const int64_t y2 = oy + ky - pad, x2 = ox + kx - pad;
                if (y2 < 0 || y2 >= h || x2 < 0 || x2 >= wd) continue;
                s += x.at({b, c1, y2, x2}) * w.at({c0, c1, ky, kx});
              }
          o[((b * co + c0) * oh + oy) * ow + ox] = s;
        }
  return y;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.same_shape(b));
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace

TEST_CASE("broadcasting follows the trailing matching-or-1 rule") {
  CHECK(broadcast_shape({2, 3}, {3}) == Shape{2, 3});
  CHECK(broadcast_shape({4, 1, 5}, {2, 1}) == Shape{4, 2, 5});
  CHECK(broadcast_shape({1}, {7}) == Shape{7});
  CHECK_THROWS_AS(broadcast_shape({2, 3}, {2, 4}), ShapeError);

  Var a = constant(Tensor({2, 2}, {1, 2, 3, 4}));
  Var b = constant(Tensor({2}, {10, 20}));
  Tensor s = add(a, b).value();
  CHECK(s.at({0, 0}) == 11.0);
  CHECK(s.at({0, 1}) == 22.0);
  CHECK(s.at({1, 0}) == 13.0);
  CHECK(s.at({1, 1}) == 24.0);
}

TEST_CASE("matmul variants agree with the brute-force product") {
  Rng rng(11);
  Tensor a = Tensor::normal({7, 5}, rng);
  Tensor b = Tensor::normal({5, 4}, rng);
  Tensor ref = brute_matmul(a, b);
  CHECK(max_abs_diff(matmul(constant(a), constant(b)).value(), ref) <= 1e-12);

  // a^T b via the tn kernel, a b^T via the nt kernel
  Tensor at = permute(constant(a), {1, 0}).value();
  CHECK(max_abs_diff(matmul_tn(constant(at), constant(b)).value(), ref) <= 1e-12);
  Tensor bt = permute(constant(b), {1, 0}).value();
  CHECK(max_abs_diff(matmul_nt(constant(a), constant(bt)).value(), ref) <= 1e-12);

  CHECK_THROWS_AS(matmul(constant(a), constant(a)), ShapeError);
}

TEST_CASE("conv2d agrees with the direct convolution oracle") {
  Rng rng(12);
  Tensor x = Tensor::normal({2, 3, 6, 5}, rng);
  Tensor w = Tensor::normal({4, 3, 3, 3}, rng);
  Tensor b = Tensor::normal({4}, rng);
  for (int64_t pad : {0, 1, 2}) {
    Tensor got = conv2d(constant(x), constant(w), constant(b), pad).value();
    CHECK(max_abs_diff(got, brute_conv2d(x, w, b, pad)) <= 1e-12);
  }
  Tensor no_bias = conv2d(constant(x), constant(w), 1).value();
  CHECK(max_abs_diff(no_bias, brute_conv2d(x, w, Tensor::zeros({1}), 1)) <= 1e-12);
}

TEST_CASE("conv2d of all-ones 3x3 kernel over all-ones 3x3 image counts overlaps") {
  Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor w = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor y = conv2d(constant(x), constant(w), 1).value();
  CHECK(y.at({0, 0, 1, 1}) == 9.0);
  CHECK(y.at({0, 0, 0, 0}) == 4.0);
  CHECK(y.at({0, 0, 0, 2}) == 4.0);
  CHECK(y.at({0, 0, 2, 0}) == 4.0);
  CHECK(y.at({0, 0, 2, 2}) == 4.0);
  CHECK(y.at({0, 0, 0, 1}) == 6.0);
  CHECK(y.at({0, 0, 1, 0}) == 6.0);
}

TEST_CASE("conv2d_dynamic matches per-sample conv2d") {
  Rng rng(13);
  Tensor x = Tensor::normal({3, 2, 5, 5}, rng);
  Tensor ks = Tensor::normal({3, 4, 2, 3, 3}, rng);
  Tensor y = conv2d_dynamic(constant(x), constant(ks), 1).value();
  for (int64_t b = 0; b < 3; ++b) {
    Tensor xb({1, 2, 5, 5});
    std::memcpy(xb.mutable_data(), x.data() + b * 50, 50 * sizeof(double));
    Tensor wb({4, 2, 3, 3});
    std::memcpy(wb.mutable_data(), ks.data() + b * 72, 72 * sizeof(double));
    Tensor yb = brute_conv2d(xb, wb, Tensor::zeros({1}), 1);
    for (int64_t i = 0; i < yb.numel(); ++i)
      CHECK(std::abs(y.data()[b * yb.numel() + i] - yb.data()[i]) <= 1e-12);
  }
}

TEST_CASE("softmax of log-spaced logits gives exact ratios") {
  Var x = constant(Tensor({3}, {0.0, std::log(2.0), std::log(4.0)}));
  Tensor y = softmax(x, 0).value();
  CHECK(std::abs(y.at({0}) - 1.0 / 7.0) <= 1e-12);
  CHECK(std::abs(y.at({1}) - 2.0 / 7.0) <= 1e-12);
  CHECK(std::abs(y.at({2}) - 4.0 / 7.0) <= 1e-12);

  // rows sum to one even for extreme logits
  Var big = constant(Tensor({2, 2}, {1000.0, 1001.0, -1000.0, 3.0}));
  Tensor s = softmax(big, 1).value();
  CHECK(s.all_finite());
  CHECK(std::abs(s.at({0, 0}) + s.at({0, 1}) - 1.0) <= 1e-12);
  CHECK(std::abs(s.at({1, 0}) + s.at({1, 1}) - 1.0) <= 1e-12);
}

TEST_CASE("l1 loss averages absolute differences") {
  Var a = constant(Tensor({2}, {1.0, 2.0}));
  Var b = constant(Tensor({2}, {2.0, 4.0}));
  CHECK(l1_loss(a, b).value().item() == 1.5);
}

TEST_CASE("adaptive average pooling bins a 4x4 ramp into quadrant means") {
  std::vector<double> v(16);
  std::iota(v.begin(), v.end(), 1.0);
  Var x = constant(Tensor({1, 1, 4, 4}, v));
  Tensor y = adaptive_avg_pool(x, 2, 2).value();
  CHECK(y.at({0, 0, 0, 0}) == 3.5);
  CHECK(y.at({0, 0, 0, 1}) == 5.5);
  CHECK(y.at({0, 0, 1, 0}) == 11.5);
  CHECK(y.at({0, 0, 1, 1}) == 13.5);

  // global pooling degenerates to the mean
  Tensor g = adaptive_avg_pool(x, 1, 1).value();
  CHECK(g.at({0, 0, 0, 0}) == 8.5);
}

TEST_CASE("patch pooling preserves per-cell means and shape") {
  Rng rng(14);
  Tensor x = Tensor::normal({2, 3, 8, 8}, rng);
  Tensor y = patch_pool(constant(x), 2, 2).value();
  CHECK(y.shape() == Shape{2, 4, 3, 2, 2});
  // cell (0,0) of subpatch (0,0) is the mean of the top-left 2x2 block
  double m = 0.0;
  for (int64_t i : {0, 1})
    for (int64_t j : {0, 1}) m += x.at({0, 0, i, j});
  CHECK(std::abs(y.at({0, 0, 0, 0, 0}) - m / 4.0) <= 1e-12);
}

TEST_CASE("pixel shuffle rearranges channel blocks into space") {
  // channels carry their own index so placement is visible
  Tensor x({1, 4, 2, 2});
  for (int64_t c = 0; c < 4; ++c)
    for (int64_t i = 0; i < 4; ++i) x.mutable_data()[c * 4 + i] = static_cast<double>(c);
  Tensor y = pixel_shuffle(constant(x), 2).value();
  CHECK(y.shape() == Shape{1, 1, 4, 4});
  CHECK(y.at({0, 0, 0, 0}) == 0.0);
  CHECK(y.at({0, 0, 0, 1}) == 1.0);
  CHECK(y.at({0, 0, 1, 0}) == 2.0);
  CHECK(y.at({0, 0, 1, 1}) == 3.0);
  CHECK(y.at({0, 0, 2, 2}) == 0.0);
}

TEST_CASE("backward rejects non-scalar losses") {
  Var x = parameter(Tensor::full({3}, 1.0));
  Var y = mul(x, x);
  CHECK_THROWS_AS(backward(y, {x}), ShapeError);
}

TEST_CASE("leaves not reached by the loss get zero gradients") {
  Var x = parameter(Tensor::full({2}, 1.0));
  Var unused = parameter(Tensor::full({3}, 1.0));
  Var loss = sum_all(mul(x, x));
  auto gs = backward(loss, {x, unused});
  CHECK(gs[1].value().abs_max() == 0.0);
  CHECK(gs[1].shape() == Shape{3});
}

TEST_CASE("detach blocks gradient flow") {
  Tensor t({3}, {1.0, 2.0, 3.0});
  Var x = parameter(t);
  Var loss = sum_all(mul(detach(x), x));
  Tensor g = grad_of(loss, x).value();
  // d/dx of <const, x> is the constant, not 2x
  CHECK(max_abs_diff(g, t) == 0.0);
}

TEST_CASE("gradients accumulate across fan-out") {
  Var x = parameter(Tensor({2}, {3.0, -2.0}));
  Var loss = sum_all(add(mul(x, x), x));
  Tensor g = grad_of(loss, x).value();
  CHECK(g.at({0}) == 7.0);
  CHECK(g.at({1}) == -3.0);
}

TEST_CASE("no-grad mode records nothing") {
  Var x = parameter(Tensor::full({2}, 2.0));
  NoGradGuard ng;
  Var y = mul(x, x);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.value().at({0}) == 4.0);
}

TEST_CASE("first-order gradients match central differences") {
  Rng rng(101);

  SECTION("elementwise arithmetic with broadcasting") {
    std::vector<Tensor> in{Tensor::normal({2, 3}, rng), Tensor::normal({3}, rng),
                           away_from_zero({2, 3}, rng, 0.4)};
    auto f = [](const std::vector<Var>& v) {
      Var t = add(mul(v[0], v[1]), div(sub(v[0], v[1]), v[2]));
      return mean_all(mul(t, t));
    };
    CHECK(check_gradients(f, in).worst < kFirstOrderTol);
  }

  SECTION("abs and leaky_relu away from the kink") {
    std::vector<Tensor> in{away_from_zero({4, 3}, rng)};
    auto f = [](const std::vector<Var>& v) {
      return mean_all(add(abs(v[0]), leaky_relu(v[0], 0.2)));
    };
    CHECK(check_gradients(f, in).worst < kFirstOrderTol);
  }

  SECTION("exp and sigmoid") {
    std::vector<Tensor> in{Tensor::normal({3, 3}, rng)};
    auto f = [](const std::vector<Var>& v) {
      return mean_all(mul(exp(affine(v[0], 0.5, 0.1)), sigmoid(v[0])));
    };
    CHECK(check_gradients(f, in).worst < kFirstOrderTol);
  }

  SECTION("matmul family") {
    std::vector<Tensor> in{Tensor::normal({4, 3}, rng), Tensor::normal({3, 5}, rng),
                           Tensor::normal({4, 5}, rng)};
    auto f = [](const std::vector<Var>& v) {
      Var p = matmul(v[0], v[1]);
      Var q = matmul_nt(p, v[2]);          // (4,5)*(4,5)^T -> (4,4)
      Var r = matmul_tn(v[0], q);          // (4,3)^T*(4,4) -> (3,4)
      return mean_all(mul(r, r));
    };
    CHECK(check_gradients(f, in).worst < kFirstOrderTol);
  }

  SECTION("reshape permute broadcast reduce") {
    std::vector<Tensor> in{Tensor::normal({2, 3, 4}, rng), Tensor::normal({4, 1}, rng)};
    auto f = [](const std::vector<Var>& v) {
      Var t = permute(v[0], {2, 0, 1});               // (4,2,3)
      Var u = reshape(t, {4, 6});
      Var w = mul(u, broadcast_to(v[1], {4, 6}));
      Var s = reduce_sum(w, {1});                     // (4)
      return mean_all(mul(s, s));
    };
    CHECK(check_gradients(f, in).worst < kFirstOrderTol);
  }

  SECTION("softmax") {
    std::vector<Tensor> in{Tensor::normal({3, 4}, rng)};
    auto f = [](const std::vector<Var>& v) {
      Var s = softmax(v[0], 1);
      Var w = constant(Tensor({4}, {0.1, -0.3, 0.7, 0.2}));
      return mean_all(mul(s, w));
    };
    CHECK(check_gradients(f, in).worst < kFirstOrderTol);
  }

  SECTION("conv2d with bias") {
    std::vector<Tensor> in{Tensor::normal({2, 2, 5, 4}, rng), Tensor::normal({3, 2, 3, 3}, rng),
                           Tensor::normal({3}, rng)};
    auto f = [](const std::vector<Var>& v) {
      return mean_all(mul(conv2d(v[0], v[1], v[2], 1), constant(Tensor::full({2, 3, 5, 4}, 0.5))));
    };
    CHECK(check_gradients(f, in).worst < kFirstOrderTol);
  }

  SECTION("conv2d_dynamic") {
    std::vector<Tensor> in{Tensor::normal({2, 2, 4, 4}, rng), Tensor::normal({2, 3, 2, 3, 3}, rng)};
    auto f = [](const std::vector<Var>& v) {
      Var y = conv2d_dynamic(v[0], v[1], 1);
      return mean_all(mul(y, y));
    };
    CHECK(check_gradients(f, in).worst < kFirstOrderTol);
  }

  SECTION("adaptive pooling at uneven sizes") {
    std::vector<Tensor> in{Tensor::normal({1, 2, 5, 7}, rng)};
    auto f = [](const std::vector<Var>& v) {
      Var y = adaptive_avg_pool(v[0], 2, 3);
      return mean_all(mul(y, y));
    };
    CHECK(check_gradients(f, in).worst < kFirstOrderTol);
  }

  SECTION("patch pooling") {
    std::vector<Tensor> in{Tensor::normal({1, 2, 6, 6}, rng)};
    auto f = [](const std::vector<Var>& v) {
      Var y = patch_pool(v[0], 2, 2);
      return mean_all(mul(y, y));
    };
    CHECK(check_gradients(f, in).worst < kFirstOrderTol);
  }

  SECTION("batch slicing and concatenation") {
    std::vector<Tensor> in{Tensor::normal({4, 3}, rng)};
    auto f = [](const std::vector<Var>& v) {
      Var top = slice_batch(v[0], 0, 2);
      Var bot = slice_batch(v[0], 2, 2);
      Var y = concat_batch({mul(top, top), affine(bot, 2.0, 0.0)});
      return mean_all(mul(y, y));
    };
    CHECK(check_gradients(f, in).worst < kFirstOrderTol);
  }

  SECTION("pixel shuffle") {
    std::vector<Tensor> in{Tensor::normal({1, 8, 3, 3}, rng)};
    auto f = [](const std::vector<Var>& v) {
      Var y = pixel_shuffle(v[0], 2);
      return mean_all(mul(y, y));
    };
    CHECK(check_gradients(f, in).worst < kFirstOrderTol);
  }
}

TEST_CASE("hessian-vector products match differences of analytic gradients") {
  Rng rng(202);

  SECTION("quadratic form has exact constant hessian") {
    Tensor x = Tensor::normal({4}, rng);
    auto f = [](const std::vector<Var>& v) { return sum_all(mul(v[0], v[0])); };
    Tensor dir = Tensor::normal({4}, rng);
    auto h = hvp(f, {x}, {dir});
    Tensor expect(dir.shape());
    for (int64_t i = 0; i < dir.numel(); ++i) expect.mutable_data()[i] = 2.0 * dir.data()[i];
    CHECK(max_abs_diff(h[0], expect) <= 1e-12);
  }

  SECTION("composite with matmul and sigmoid") {
    std::vector<Tensor> in{Tensor::normal({3, 2}, rng), Tensor::normal({2, 3}, rng)};
    auto f = [](const std::vector<Var>& v) {
      Var y = sigmoid(matmul(v[0], v[1]));
      return mean_all(mul(y, y));
    };
    Rng dir_rng(7);
    CHECK(check_hvp(f, in, dir_rng).worst < kSecondOrderTol);
  }

  SECTION("composite with conv and pooling") {
    std::vector<Tensor> in{Tensor::normal({1, 2, 4, 4}, rng), Tensor::normal({2, 2, 3, 3}, rng)};
    auto f = [](const std::vector<Var>& v) {
      Var y = adaptive_avg_pool(sigmoid(conv2d(v[0], v[1], 1)), 2, 2);
      return mean_all(mul(y, y));
    };
    Rng dir_rng(8);
    CHECK(check_hvp(f, in, dir_rng).worst < kSecondOrderTol);
  }

  SECTION("softmax composite") {
    std::vector<Tensor> in{Tensor::normal({2, 3}, rng)};
    auto f = [](const std::vector<Var>& v) {
      Var s = softmax(v[0], 1);
      return mean_all(mul(s, s));
    };
    Rng dir_rng(9);
    CHECK(check_hvp(f, in, dir_rng).worst < kSecondOrderTol);
  }
}

TEST_CASE("create_graph controls whether gradients are differentiable") {
  Var x = parameter(Tensor({2}, {1.0, 2.0}));
  Var loss = sum_all(mul(mul(x, x), x));  // x^3

  Var g_plain = grad_of(loss, x, /*create_graph=*/false);
  CHECK_FALSE(g_plain.requires_grad());

  Var g_live = grad_of(loss, x, /*create_graph=*/true);
  CHECK(g_live.requires_grad());
  // d/dx 3x^2 summed = 6x
  Tensor gg = grad_of(sum_all(g_live), x).value();
  CHECK(std::abs(gg.at({0}) - 6.0) <= 1e-12);
  CHECK(std::abs(gg.at({1}) - 12.0) <= 1e-12);
}

TEST_CASE("deep graphs are destroyed without exhausting the stack") {
  Var x = parameter(Tensor::scalar(1.0));
  Var y = x;
  for (int i = 0; i < 200000; ++i) y = affine(y, 1.0, 0.0);
  CHECK(y.value().item() == 1.0);
  // destruction of the 200k-node chain happens here
}
