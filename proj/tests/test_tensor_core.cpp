#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ien/blob.hpp"
#include "ien/optim.hpp"
#include "support.hpp"

using namespace ien;
using ien::test::random_tensor;

namespace {

// Direct nested-loop convolution, zero padding.
TensorD naive_conv(const TensorD& x, const TensorD& k, const TensorD& b, int stride, int pad) {
  const long cin = static_cast<long>(x.dim(0)), h = static_cast<long>(x.dim(1)), w = static_cast<long>(x.dim(2));
  const long cout = static_cast<long>(k.dim(0)), kh = static_cast<long>(k.dim(2)), kw = static_cast<long>(k.dim(3));
  const long oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
  TensorD out({static_cast<std::size_t>(cout), static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)});
  for (long o = 0; o < cout; ++o) {
    for (long oy = 0; oy < oh; ++oy) {
      for (long ox = 0; ox < ow; ++ox) {
        double acc = b[static_cast<std::size_t>(o)];
        for (long c = 0; c < cin; ++c) {
          for (long i = 0; i < kh; ++i) {
            for (long j = 0; j < kw; ++j) {
              const long iy = oy * stride + i - pad, ix = ox * stride + j - pad;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              acc += x[static_cast<std::size_t>((c * h + iy) * w + ix)] *
                     k[static_cast<std::size_t>(((o * cin + c) * kh + i) * kw + j)];
            }
          }
        }
        out.at(static_cast<std::size_t>(o), static_cast<std::size_t>(oy), static_cast<std::size_t>(ox)) = acc;
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("tensor rejects zero dimensions and mismatched data") {
  CHECK_THROWS_AS(TensorF({2, 0, 3}), ShapeMismatch);
  CHECK_THROWS_AS(TensorF({2, 2}, std::vector<float>(3)), ShapeMismatch);
  TensorF t({2, 3}, 1.5f);
  CHECK(t.size() == 6);
  CHECK(t.sum() == doctest::Approx(9.0));
  CHECK(t.slice0(1, 1).shape() == Shape{1, 3});
  CHECK_THROWS_AS(t.slice0(1, 2), ShapeMismatch);
}

TEST_CASE("conv2d matches a nested-loop oracle") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    for (auto [stride, pad] : {std::pair{1, 1}, std::pair{1, 0}, std::pair{2, 1}, std::pair{2, 0}}) {
      const std::size_t size = stride == 2 ? 9 : 8;
      const TensorD x = random_tensor({3, size, size}, rng);
      const TensorD k = random_tensor({4, 3, 3, 3}, rng);
      const TensorD b = random_tensor({4}, rng);
      Graph<double> g;
      const TensorD got = g.value(conv2d(g, g.constant(x), g.constant(k), g.constant(b), stride, pad));
      const TensorD want = naive_conv(x, k, b, stride, pad);
      REQUIRE(got.shape() == want.shape());
      for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("conv2d validates shapes") {
  Graph<float> g;
  const Var x = g.constant(TensorF({2, 4, 4}));
  CHECK_THROWS_AS(conv2d(g, x, g.constant(TensorF({1, 3, 3, 3})), g.constant(TensorF({1}))), ShapeMismatch);
  CHECK_THROWS_AS(conv2d(g, x, g.constant(TensorF({1, 2, 3, 3})), g.constant(TensorF({2}))), ShapeMismatch);
  CHECK_THROWS_AS(conv2d(g, x, g.constant(TensorF({1, 2, 3, 3})), g.constant(TensorF({1})), 2, 0), ShapeMismatch);
}

TEST_CASE("maxpool2d picks window maxima and routes gradient to the first maximum") {
  TensorD x({1, 2, 4}, std::vector<double>{1, 5, 2, 2, 3, 0, 2, 2});
  Graph<double> g;
  const Var xv = g.parameter(x);
  const Var y = maxpool2d(g, xv);
  CHECK(g.value(y).shape() == Shape{1, 1, 2});
  CHECK(g.value(y)[0] == 5.0);
  CHECK(g.value(y)[1] == 2.0);
  g.backward(weighted_sum(g, y, TensorD({1, 1, 2}, 1.0)));
  const TensorD dx = g.grad(xv);
  CHECK(dx.data()[1] == 1.0);
  // tie among four 2s: first in scan order wins
  CHECK(dx.data()[2] == 1.0);
  CHECK(dx.data()[3] == 0.0);
  CHECK(dx.data()[6] == 0.0);
  CHECK_THROWS_AS(maxpool2d(g, g.constant(TensorD({1, 3, 4}))), ShapeMismatch);
}

TEST_CASE("upsample2d repeats each pixel into a 2x2 block") {
  Rng rng(3);
  const TensorD x = random_tensor({2, 3, 3}, rng);
  Graph<double> g;
  const TensorD y = g.value(upsample2d(g, g.constant(x)));
  REQUIRE(y.shape() == Shape{2, 6, 6});
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t yy = 0; yy < 6; ++yy) {
      for (std::size_t xx = 0; xx < 6; ++xx) CHECK(y.at(c, yy, xx) == x.at(c, yy / 2, xx / 2));
    }
  }
}

TEST_CASE("softmax_spatial yields a distribution and survives large logits") {
  Graph<double> g;
  TensorD x({1, 3, 3}, std::vector<double>{1000, 999, 0, -1000, 5, 5, 5, 5, 5});
  const TensorD y = g.value(softmax_spatial(g, g.constant(x)));
  CHECK(y.sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(y[0] / y[1] == doctest::Approx(std::exp(1.0)));
  CHECK_THROWS_AS(softmax_spatial(g, g.constant(TensorD({2, 3, 3}))), ShapeMismatch);
}

TEST_CASE("kl_divergence matches the hand-computed value") {
  // 0.5 ln(0.5/0.25) + 0.5 ln(0.5/0.75) = 0.5 ln(4/3)
  TensorD target({1, 1, 2}, std::vector<double>{0.5, 0.5});
  TensorD pred({1, 1, 2}, std::vector<double>{0.25, 0.75});
  Graph<double> g;
  const double v = g.value(kl_divergence(g, target, g.constant(pred), 0.0))[0];
  CHECK(v == doctest::Approx(0.5 * std::log(4.0 / 3.0)).epsilon(1e-12));
  CHECK(v == doctest::Approx(0.14384).epsilon(1e-4));
}

TEST_CASE("kl_divergence is zero for identical distributions and rejects non-distributions") {
  Rng rng(1);
  const TensorD p = ien::test::random_distribution({1, 4, 4}, rng);
  Graph<double> g;
  CHECK(g.value(kl_divergence(g, p, g.constant(p)))[0] == doctest::Approx(0.0).epsilon(1e-12));
  TensorD bad = p;
  bad[0] += 0.1;
  CHECK_THROWS_AS(kl_divergence(g, bad, g.constant(p)), NotNormalized);
  TensorD negative = p;
  negative[0] = -negative[0];
  negative[1] += 2 * p[0];
  CHECK_THROWS_AS(kl_divergence(g, negative, g.constant(p)), NotNormalized);
}

TEST_CASE("every op's gradient matches central differences") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    for (const auto& c : ien::test::op_grad_cases(seed)) {
      const GradCheckReport r = finite_difference_check(c.loss, c.params, 1e-5);
      INFO(c.name << " seed " << seed << " worst " << r.worst.param << "[" << r.worst.index << "]");
      CHECK(r.checked > 0);
      CHECK(r.max_relative_error < 1e-4);
    }
  }
}

TEST_CASE("gradient check detects a corrupted gradient") {
  const auto cases = ien::test::op_grad_cases(7);
  const GradCheckReport r = finite_difference_check(cases.front().loss, cases.front().params, 1e-5, 0, 0, 1.01);
  CHECK(r.max_relative_error > 5e-3);
}

TEST_CASE("backward accumulates gradients of a reused variable") {
  Graph<double> g;
  const Var x = g.parameter(TensorD({1, 1, 1}, 3.0));
  const Var y = mul(g, x, x);
  g.backward(weighted_sum(g, add(g, y, x), TensorD({1, 1, 1}, 1.0)));
  CHECK(g.grad(x)[0] == doctest::Approx(7.0));
}

TEST_CASE("non-finite values are rejected when pushed onto the tape") {
  Graph<float> g;
  CHECK_THROWS_AS(g.constant(TensorF({1}, std::nanf(""))), NonFinite);
}

TEST_CASE("adam_step follows the bias-corrected update") {
  ParamMap<double> p{{"w", TensorD({2}, std::vector<double>{1.0, -2.0})}};
  ParamMap<double> grad{{"w", TensorD({2}, std::vector<double>{0.5, -4.0})}};
  OptimizerState<double> st;
  adam_step(p, grad, st);
  // First step moves every coordinate by lr * sign(g) (up to epsilon).
  CHECK(p.at("w")[0] == doctest::Approx(1.0 - 1e-3).epsilon(1e-9));
  CHECK(p.at("w")[1] == doctest::Approx(-2.0 + 1e-3).epsilon(1e-9));
  OptimizerState<double> frozen;
  frozen.settings.learning_rate = 0.0;
  ParamMap<double> q = p;
  adam_step(q, grad, frozen);
  CHECK(q.at("w") == p.at("w"));
  ParamMap<double> wrong{{"w", TensorD({3})}};
  CHECK_THROWS_AS(adam_step(p, wrong, st), ShapeMismatch);
}

TEST_CASE("tensor blobs round-trip bit-exactly and reject corruption") {
  Rng rng(5);
  const TensorF t = random_tensor<float>({2, 3, 4}, rng);
  const std::string bytes = encode_blob(t);
  CHECK(decode_blob<float>(bytes) == t);
  CHECK_THROWS_AS(decode_blob<double>(bytes), CorruptArchive);
  CHECK_THROWS_AS(decode_blob<float>(bytes.substr(0, bytes.size() - 1)), CorruptArchive);
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_blob<float>(bad_magic), CorruptArchive);
  CHECK_THROWS_AS(decode_blob<float>(bytes + "x"), CorruptArchive);
}

TEST_CASE("archives validate magic, version and manifest") {
  Archive a;
  a.manifest = {{"k", 1}};
  append_blob(a.payload, TensorF({2}, 1.0f));
  const std::string bytes = encode_archive("TEST", a);
  const Archive back = decode_archive("TEST", bytes);
  CHECK(back.manifest == a.manifest);
  CHECK(back.payload == a.payload);
  CHECK_THROWS_AS(decode_archive("OTHR", bytes), CorruptArchive);
  std::string version = bytes;
  version[4] = 9;
  CHECK_THROWS_AS(decode_archive("TEST", version), CorruptArchive);
  CHECK_THROWS_AS(decode_archive("TEST", bytes.substr(0, 10)), CorruptArchive);
}

TEST_CASE("rng streams are deterministic and distinct") {
  Rng a(mix_seed(1, 2)), b(mix_seed(1, 2)), c(mix_seed(1, 3));
  for (int i = 0; i < 10; ++i) CHECK(a.next() == b.next());
  CHECK(Rng(mix_seed(1, 2)).next() != c.next());
  Rng r(9);
  double mean = 0.0, sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    mean += z;
    sq += z * z;
  }
  CHECK(std::abs(mean / n) < 0.03);
  CHECK(std::abs(sq / n - 1.0) < 0.05);
}
