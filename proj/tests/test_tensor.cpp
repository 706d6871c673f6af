#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "xnet/gradcheck.hpp"
#include "xnet/ops.hpp"
#include "xnet/xten.hpp"

using namespace xnet;

namespace {

TensorD mat(Index r, Index c, std::vector<double> v) { return TensorD({r, c}, std::move(v)); }

void check_values(const TensorD& t, const std::vector<double>& expected, double tol = 0) {
  REQUIRE(t.numel() == static_cast<Index>(expected.size()));
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (tol == 0)
      CHECK(t.data()[i] == expected[i]);
    else
      CHECK(t.data()[i] == doctest::Approx(expected[i]).epsilon(tol));
  }
}

}  // namespace

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(TensorD({2, 3}, std::vector<double>(5)), ShapeError);
  const auto z = TensorF::zeros({2, 3, 4});
  CHECK(z.numel() == 24);
  CHECK(z.ndim() == 3);
  CHECK(z.dim(2) == 4);
  CHECK_THROWS_AS(add(TensorD({1}, {std::nan("")}), TensorD::ones({1})), NumericError);
}

TEST_CASE("matmul") {
  const auto id = mat(2, 2, {1, 0, 0, 1});
  const auto a = mat(2, 2, {1, 2, 3, 4});
  check_values(matmul(id, a), {1, 2, 3, 4});
  check_values(matmul(a, mat(2, 2, {5, 6, 7, 8})), {19, 22, 43, 50});
  CHECK_THROWS_AS(matmul(TensorD::zeros({2, 3}), TensorD::zeros({4, 2})), ShapeError);
}

TEST_CASE("softmax") {
  check_values(softmax(TensorD({3}, {0, 0, 0}), 0), {1.0 / 3, 1.0 / 3, 1.0 / 3}, 1e-15);
  const auto s = softmax(TensorD({3}, {1, 2, 3}), 0);
  CHECK(s.data()[0] == doctest::Approx(0.0900).epsilon(1e-3));
  CHECK(s.data()[1] == doctest::Approx(0.2447).epsilon(1e-3));
  CHECK(s.data()[2] == doctest::Approx(0.6652).epsilon(1e-3));

  std::mt19937_64 rng(3);
  const auto x = TensorD::uniform({4, 7}, rng, -50, 50);
  const auto shifted = softmax(add_scalar(x, 12.5), 1);
  const auto base = softmax(x, 1);
  for (Index i = 0; i < x.numel(); ++i) CHECK(shifted.data()[i] == doctest::Approx(base.data()[i]).epsilon(1e-12));
  CHECK_THROWS_AS(softmax(x, 2), ShapeError);
}

TEST_CASE("softmax slices sum to one") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto xd = TensorD::uniform({3, 5, 9}, rng, -50, 50);
    const auto xf = xd.cast<float>();
    for (Index axis : {0, 1, 2}) {
      const auto sd = softmax(xd, axis);
      const auto sf = softmax(xf, axis);
      const auto& s = xd.shape();
      Index stride = 1;
      for (Index k = axis + 1; k < 3; ++k) stride *= s[static_cast<std::size_t>(k)];
      const Index len = s[static_cast<std::size_t>(axis)];
      for (Index start = 0; start < xd.numel(); ++start) {
        if ((start / stride) % len != 0) continue;
        double td = 0, tf = 0;
        for (Index j = 0; j < len; ++j) {
          td += sd.data()[static_cast<std::size_t>(start + j * stride)];
          tf += sf.data()[static_cast<std::size_t>(start + j * stride)];
        }
        CHECK(std::abs(td - 1) < 1e-12);
        CHECK(std::abs(tf - 1) < 1e-6);
      }
    }
  }
}

TEST_CASE("elementwise") {
  check_values(relu(TensorD({3}, {-1, 0, 2})), {0, 0, 2});
  CHECK(sigmoid(TensorD::scalar(0)).item() == 0.5);
  check_values(add(TensorD({2}, {1, 2}), TensorD({2}, {3, 4})), {4, 6});
  check_values(sub(TensorD({2}, {1, 2}), TensorD({2}, {3, 5})), {-2, -3});
  check_values(mul(TensorD({2}, {1, 2}), TensorD::scalar(3)), {3, 6});
  check_values(scale(TensorD({2}, {1, -2}), 0.5), {0.5, -1});
  CHECK_THROWS_AS(add(TensorD::zeros({2}), TensorD::zeros({3})), ShapeError);
  CHECK_THROWS_AS(log(TensorD({1}, {-1.0})), NumericError);
}

TEST_CASE("backward") {
  SUBCASE("square") {
    auto x = TensorD::scalar(3).set_requires_grad();
    (x * x).backward();
    CHECK(x.grad()[0] == 6);
  }
  SUBCASE("sum of softmax is constant") {
    std::mt19937_64 rng(2);
    auto x = TensorD::randn({6}, rng).set_requires_grad();
    sum(softmax(x, 0)).backward();
    for (double g : x.grad()) CHECK(std::abs(g) < 1e-15);
  }
  SUBCASE("two consumers accumulate") {
    auto x = TensorD({2}, {1.5, -2}).set_requires_grad();
    sum(x * x + x * 3.0).backward();
    CHECK(x.grad()[0] == doctest::Approx(2 * 1.5 + 3));
    CHECK(x.grad()[1] == doctest::Approx(2 * -2 + 3));
  }
  SUBCASE("non-scalar loss") {
    auto x = TensorD::ones({2}).set_requires_grad();
    CHECK_THROWS_AS((x * x).backward(), ShapeError);
  }
  SUBCASE("tape outputs are read-only") {
    auto x = TensorD::ones({2}).set_requires_grad();
    auto y = x * x;
    CHECK_THROWS(y.mutable_data());
  }
  SUBCASE("no-grad guard records nothing") {
    auto x = TensorD::ones({2}).set_requires_grad();
    NoGradGuard guard;
    CHECK((x * x).is_leaf());
  }
}

TEST_CASE("composite graph matches central differences") {
  GradcheckOptions opt;
  opt.tolerance = 1e-6;
  const auto report = gradcheck(
      [](std::mt19937_64& rng) {
        auto a = TensorD::randn({3, 4}, rng);
        auto b = TensorD::randn({4, 5}, rng);
        auto c = TensorD::randn({3, 5}, rng);
        GradcheckCase gc;
        gc.leaves = {{"a", a}, {"b", b}, {"c", c}};
        gc.loss = [=] { return mean(sigmoid(matmul(a, b)) * softmax(c, 1) + relu(c) * 0.5); };
        return gc;
      },
      5, opt);
  CHECK_MESSAGE(report.passed, report.diagnostic);
}

TEST_CASE("gradcheck flags a corrupted backward rule") {
  const auto report = gradcheck(
      [](std::mt19937_64& rng) {
        auto x = TensorD::randn({4}, rng);
        GradcheckCase gc;
        gc.leaves = {{"x", x}};
        gc.loss = [x] {
          // y = x³ with a backward rule that forgets the factor 3.
          Buffer<double> out;
          for (double v : x.data()) out.push_back(v * v * v);
          auto y = record_op<double>("bad_cube", x.shape(), std::move(out), {x}, [](GradContext<double>& ctx) {
            const auto in = ctx.input(0);
            const auto g = ctx.grad_output();
            auto gx = ctx.grad_input(0);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * in[i] * in[i];
          });
          return sum(y);
        };
        return gc;
      },
      1);
  CHECK_FALSE(report.passed);
  CHECK(report.max_relative_error() > 0.5);
}

TEST_CASE("gradcheck reports non-finite values") {
  const auto report = gradcheck(
      [](std::mt19937_64&) {
        auto x = TensorD({2}, {-1.0, 2.0});
        GradcheckCase gc;
        gc.leaves = {{"x", x}};
        gc.loss = [x] { return sum(log(x)); };
        return gc;
      },
      1);
  CHECK_FALSE(report.passed);
  CHECK_FALSE(report.diagnostic.empty());
}

TEST_CASE("ops are deterministic") {
  auto run = [] {
    std::mt19937_64 rng(9);
    auto x = TensorF::randn({2, 3, 8, 8}, rng);
    auto w = TensorF::randn({4, 3, 3, 3}, rng);
    auto b = TensorF::randn({4}, rng);
    return softmax(reshape(conv2d(x, w, b), {2, 4, 64}), 2);
  };
  const auto a = run(), b = run();
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST_CASE("xten roundtrip") {
  std::mt19937_64 rng(4);
  const auto f = TensorF::randn({2, 3, 4}, rng);
  const auto d = TensorD::randn({5}, rng);
  std::stringstream ss;
  write_xten(ss, f);
  write_xten(ss, d);
  const auto f2 = read_xten<float>(ss);
  const auto d2 = read_xten<double>(ss);
  CHECK(f2.shape() == f.shape());
  CHECK(std::equal(f.data().begin(), f.data().end(), f2.data().begin()));
  CHECK(std::equal(d.data().begin(), d.data().end(), d2.data().begin()));

  const std::string bytes = [&] {
    std::stringstream s;
    write_xten(s, f);
    return s.str();
  }();
  CHECK(bytes.substr(0, 4) == "XTEN");
  CHECK(static_cast<int>(bytes[4]) == 1);
  CHECK(static_cast<int>(bytes[5]) == 0);  // f32
  CHECK(static_cast<int>(bytes[6]) == 3);
  CHECK(bytes.size() == 7 + 3 * 4 + 24 * 4);

  SUBCASE("dtype mismatch") {
    std::stringstream s(bytes);
    CHECK_THROWS_AS(read_xten<double>(s), FormatError);
  }
  SUBCASE("truncated") {
    std::stringstream s(bytes.substr(0, bytes.size() - 3));
    CHECK_THROWS_AS(read_xten<float>(s), FormatError);
  }
  SUBCASE("bad magic") {
    std::stringstream s("XTEM" + bytes.substr(4));
    CHECK_THROWS_AS(read_xten<float>(s), FormatError);
  }
  SUBCASE("bad version") {
    auto b = bytes;
    b[4] = 2;
    std::stringstream s(b);
    CHECK_THROWS_AS(read_xten<float>(s), FormatError);
  }
}
