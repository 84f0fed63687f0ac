#include <doctest.h>

#include "pfn/gradcheck.hpp"
#include "pfn/ops.hpp"
#include "pfn/optim.hpp"
#include "pfn/serialize.hpp"
#include "support.hpp"

#include <cmath>
#include <limits>
#include <sstream>

using namespace pfn;
using pfn::test::probe_for;
using pfn::test::random_tensor;
using T = Tensor<double>;

namespace {

constexpr double kOpTol = 1e-4;

// Scalar probe loss sum(f(x) * w) with a fixed weighting.
template <typename F>
auto probed(F f, T probe) {
  return [f, probe]() { return sum_all(mul(f(), probe)); };
}

}  // namespace

TEST_SUITE("conv2d") {
  TEST_CASE("1x1 kernel of 2 doubles ones") {
    T x(Shape{1, 1, 3, 3}, 1.0);
    T w(Shape{1, 1, 1, 1}, {2.0});
    T b(Shape{1, 1, 1, 1}, {0.0});
    auto y = conv2d(x, w, b);
    CHECK(y.shape() == Shape{1, 1, 3, 3});
    for (Eigen::Index i = 0; i < y.size(); ++i) CHECK(y.value()[i] == 2.0);
  }

  TEST_CASE("Laplacian annihilates a constant in the interior") {
    T x(Shape{1, 1, 5, 5}, 3.0);
    T w(Shape{1, 1, 3, 3}, {0, 1, 0, 1, -4, 1, 0, 1, 0});
    auto y = conv2d(x, w);
    for (int i = 1; i < 4; ++i)
      for (int j = 1; j < 4; ++j) CHECK(y(0, 0, i, j) == 0.0);
    CHECK(y(0, 0, 0, 0) == doctest::Approx(-6.0));  // zero padding is visible at the corner
  }

  TEST_CASE("gradients match central differences") {
    T x = random_tensor(Shape{2, 3, 8, 8}, 1);
    T w = random_tensor(Shape{4, 3, 3, 3}, 2);
    T b = random_tensor(Shape{1, 4, 1, 1}, 3);
    T probe = random_tensor(Shape{2, 4, 8, 8}, 4, 0.5, 1.5);
    std::vector<T> leaves{x, w, b};
    auto r = check_gradients(std::span<T>(leaves), probed([&] { return conv2d(x, w, b); }, probe));
    INFO(r.worst);
    CHECK(r.max_rel_error < kOpTol);
  }

  TEST_CASE("strided gradients match central differences") {
    T x = random_tensor(Shape{1, 2, 8, 8}, 5);
    T w = random_tensor(Shape{3, 2, 3, 3}, 6);
    T b = random_tensor(Shape{1, 3, 1, 1}, 7);
    auto y0 = conv2d(x, w, b, 2, 1);
    CHECK(y0.shape() == Shape{1, 3, 4, 4});
    T probe = probe_for(y0);
    std::vector<T> leaves{x, w, b};
    auto r = check_gradients(std::span<T>(leaves), probed([&] { return conv2d(x, w, b, 2, 1); }, probe));
    INFO(r.worst);
    CHECK(r.max_rel_error < kOpTol);
  }

  TEST_CASE("configuration errors") {
    T x(Shape{1, 2, 4, 4});
    CHECK_THROWS_AS(conv2d(x, T(Shape{1, 3, 3, 3})), ConfigError);
    CHECK_THROWS_AS(conv2d(x, T(Shape{1, 2, 2, 2})), ConfigError);
    CHECK_NOTHROW(conv2d(x, T(Shape{1, 2, 2, 2}), 1, 0));
  }

  TEST_CASE("zero output channels are allowed") {
    T x = random_tensor(Shape{1, 2, 4, 4}, 8);
    auto y = conv2d(x, T(Shape{0, 2, 3, 3}), T(Shape{1, 0, 1, 1}));
    CHECK(y.shape() == Shape{1, 0, 4, 4});
  }
}

TEST_SUITE("avg_pool2") {
  TEST_CASE("2x2 block mean") {
    auto y = avg_pool2(T(Shape{1, 1, 2, 2}, {1, 2, 3, 4}));
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.item() == 2.5);
  }

  TEST_CASE("constant stays constant") {
    auto y = avg_pool2(T(Shape{2, 3, 8, 4}, 1.75));
    CHECK(y.shape() == Shape{2, 3, 4, 2});
    CHECK((y.value() == 1.75).all());
  }

  TEST_CASE("each input receives a quarter of the upstream gradient") {
    T x = random_tensor(Shape{1, 2, 4, 6}, 9);
    x.set_requires_grad();
    sum_all(avg_pool2(x)).backward();
    CHECK((x.grad() == 0.25).all());
    T probe = random_tensor(Shape{1, 2, 2, 3}, 10, 0.5, 1.5);
    std::vector<T> leaves{x};
    auto r = check_gradients(std::span<T>(leaves), probed([&] { return avg_pool2(x); }, probe));
    CHECK(r.max_rel_error < kOpTol);
  }

  TEST_CASE("odd extent is rejected") {
    CHECK_THROWS_AS(avg_pool2(T(Shape{1, 1, 3, 4})), ShapeError);
    CHECK_THROWS_AS(avg_pool2(T(Shape{1, 1, 4, 5})), ShapeError);
  }
}

TEST_SUITE("bilinear_resample") {
  TEST_CASE("constant input any size") {
    auto y = bilinear_resample(T(Shape{1, 2, 3, 5}, 0.3), 7, 2);
    CHECK(y.shape() == Shape{1, 2, 7, 2});
    CHECK((y.value() - 0.3).abs().maxCoeff() < 1e-15);
  }

  TEST_CASE("half-pixel 2x upsample of [0, 1]") {
    auto y = bilinear_resample(T(Shape{1, 1, 1, 2}, {0.0, 1.0}), 1, 4);
    CHECK(y.value()[0] == doctest::Approx(0.0));
    CHECK(y.value()[1] == doctest::Approx(0.25));
    CHECK(y.value()[2] == doctest::Approx(0.75));
    CHECK(y.value()[3] == doctest::Approx(1.0));
  }

  TEST_CASE("linear ramp is preserved at interior sample positions") {
    // Field f(x, y) = 0.3 x - 0.7 y + 2 sampled at the 6x8 grid centers.
    const int h = 6, w = 8, oh = 12, ow = 16;
    T x(Shape{1, 1, h, w});
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) x.mutable_value()[i * w + j] = 0.3 * j - 0.7 * i + 2;
    auto y = bilinear_resample(x, oh, ow);
    double worst = 0;
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j) {
        const double sy = (i + 0.5) * h / oh - 0.5, sx = (j + 0.5) * w / ow - 0.5;
        if (sy < 0 || sy > h - 1 || sx < 0 || sx > w - 1) continue;  // clamped border band
        worst = std::max(worst, std::abs(y(0, 0, i, j) - (0.3 * sx - 0.7 * sy + 2)));
      }
    }
    CHECK(worst < 1e-6);
  }

  TEST_CASE("gradients match central differences (up and down)") {
    T x = random_tensor(Shape{2, 2, 4, 6}, 11);
    for (auto [oh, ow] : {std::pair{8, 12}, std::pair{3, 5}, std::pair{7, 2}}) {
      T probe = random_tensor(Shape{2, 2, oh, ow}, 12, 0.5, 1.5);
      std::vector<T> leaves{x};
      auto r = check_gradients(std::span<T>(leaves),
                               probed([&, oh = oh, ow = ow] { return bilinear_resample(x, oh, ow); }, probe));
      CHECK(r.max_rel_error < kOpTol);
    }
  }
}

TEST_SUITE("grid_sample") {
  TEST_CASE("integer coordinates reproduce pixels") {
    T src = random_tensor(Shape{1, 2, 4, 5}, 13);
    T xs(Shape{1, 1, 4, 5}), ys(Shape{1, 1, 4, 5});
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 5; ++j) {
        xs.mutable_value()[i * 5 + j] = j;
        ys.mutable_value()[i * 5 + j] = i;
      }
    auto y = grid_sample(src, xs, ys);
    CHECK((y.value() - src.value()).abs().maxCoeff() == 0.0);
  }

  TEST_CASE("gradients w.r.t. source and coordinates") {
    T src = random_tensor(Shape{2, 3, 5, 6}, 14);
    // Interior, non-integer coordinates away from cell boundaries.
    T xs = random_tensor(Shape{2, 1, 3, 4}, 15, 0.2, 4.8);
    T ys = random_tensor(Shape{2, 1, 3, 4}, 16, 0.2, 3.8);
    for (Eigen::Index i = 0; i < xs.size(); ++i) {
      xs.mutable_value()[i] = std::floor(xs.value()[i]) + 0.3 + 0.4 * (i % 2);
      ys.mutable_value()[i] = std::floor(ys.value()[i]) + 0.6 - 0.3 * (i % 3 == 0);
    }
    T probe = random_tensor(Shape{2, 3, 3, 4}, 17, 0.5, 1.5);
    std::vector<T> leaves{src, xs, ys};
    auto r = check_gradients(std::span<T>(leaves), probed([&] { return grid_sample(src, xs, ys); }, probe));
    INFO(r.worst);
    CHECK(r.max_rel_error < kOpTol);
  }
}

TEST_SUITE("local_mean") {
  TEST_CASE("constant stays constant, including borders") {
    auto y = local_mean(T(Shape{1, 1, 4, 4}, 2.0), 3);
    CHECK((y.value() - 2.0).abs().maxCoeff() < 1e-15);
  }
  TEST_CASE("gradients match central differences") {
    T x = random_tensor(Shape{1, 2, 5, 4}, 18);
    T probe = random_tensor(x.shape(), 19, 0.5, 1.5);
    std::vector<T> leaves{x};
    auto r = check_gradients(std::span<T>(leaves), probed([&] { return local_mean(x, 3); }, probe));
    CHECK(r.max_rel_error < kOpTol);
  }
}

TEST_SUITE("concat_channels") {
  TEST_CASE("singleton is identity") {
    T a = random_tensor(Shape{1, 2, 3, 3}, 20);
    auto y = concat_channels({a});
    CHECK((y.value() == a.value()).all());
  }

  TEST_CASE("C=2 and C=3 give C=5 with slices equal to the inputs") {
    T a = random_tensor(Shape{2, 2, 3, 4}, 21);
    T b = random_tensor(Shape{2, 3, 3, 4}, 22);
    auto y = concat_channels({a, b});
    REQUIRE(y.shape() == Shape{2, 5, 3, 4});
    CHECK((slice_channels(y, 0, 2).value() == a.value()).all());
    CHECK((slice_channels(y, 2, 3).value() == b.value()).all());
  }

  TEST_CASE("gradient splits back by channel slice") {
    T a = random_tensor(Shape{2, 2, 3, 4}, 23);
    T b = random_tensor(Shape{2, 1, 3, 4}, 24);
    T probe = random_tensor(Shape{2, 3, 3, 4}, 25, 0.5, 1.5);
    std::vector<T> leaves{a, b};
    auto r = check_gradients(std::span<T>(leaves), probed([&] { return concat_channels({a, b}); }, probe));
    CHECK(r.max_rel_error < kOpTol);
  }

  TEST_CASE("spatial mismatch is rejected") {
    CHECK_THROWS_AS(concat_channels({T(Shape{1, 1, 2, 2}), T(Shape{1, 1, 2, 3})}), ShapeError);
  }
}

TEST_SUITE("channel_weighted_sum") {
  TEST_CASE("one-hot weights select a source") {
    std::vector<T> in{random_tensor(Shape{1, 3, 4, 4}, 26), random_tensor(Shape{1, 3, 4, 4}, 27)};
    T w(Shape{2, 3, 1, 1}, {0, 0, 0, 1, 1, 1});
    auto y = channel_weighted_sum(std::span<const T>(in), w);
    CHECK((y.value() == in[1].value()).all());
  }

  TEST_CASE("equal inputs with half weights reproduce the input") {
    T a = random_tensor(Shape{2, 2, 3, 3}, 28);
    std::vector<T> in{a, a};
    auto y = channel_weighted_sum(std::span<const T>(in), T(Shape{2, 2, 1, 1}, 0.5));
    CHECK((y.value() - a.value()).abs().maxCoeff() < 1e-15);
  }

  TEST_CASE("weight gradient equals per-channel spatial dot products") {
    std::vector<T> in{random_tensor(Shape{2, 3, 4, 4}, 29), random_tensor(Shape{2, 3, 4, 4}, 30),
                      random_tensor(Shape{2, 3, 4, 4}, 31)};
    T w = random_tensor(Shape{3, 3, 1, 1}, 32);
    w.set_requires_grad();
    sum_all(channel_weighted_sum(std::span<const T>(in), w)).backward();
    for (int i = 0; i < 3; ++i) {
      for (int c = 0; c < 3; ++c) {
        double dot = 0;
        for (int n = 0; n < 2; ++n)
          for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x) dot += in[i](n, c, y, x);
        CHECK(w.grad()[i * 3 + c] == doctest::Approx(dot).epsilon(1e-12));
      }
    }
    T probe = random_tensor(Shape{2, 3, 4, 4}, 33, 0.5, 1.5);
    std::vector<T> leaves{in[0], in[1], in[2], w};
    auto r = check_gradients(std::span<T>(leaves),
                             probed([&] { return channel_weighted_sum(std::span<const T>(in), w); }, probe));
    CHECK(r.max_rel_error < kOpTol);
  }

  TEST_CASE("weight shape mismatch is a configuration error") {
    std::vector<T> in{T(Shape{1, 3, 2, 2}), T(Shape{1, 3, 2, 2})};
    CHECK_THROWS_AS(channel_weighted_sum(std::span<const T>(in), T(Shape{3, 3, 1, 1})), ConfigError);
    CHECK_THROWS_AS(channel_weighted_sum(std::span<const T>(in), T(Shape{2, 2, 1, 1})), ConfigError);
  }
}

TEST_SUITE("pointwise") {
  TEST_CASE("clamp example") {
    auto y = clamp(T(Shape{1, 1, 1, 3}, {-1.0, 5.0, 1e6}), 0.0, 1e4);
    CHECK(y.value()[0] == 0.0);
    CHECK(y.value()[1] == 5.0);
    CHECK(y.value()[2] == 1e4);
    CHECK_THROWS_AS(clamp(T(), 1.0, 0.0), ConfigError);
  }

  TEST_CASE("clamp gradient only strictly inside the bounds") {
    T x(Shape{1, 1, 1, 4}, {-1.0, 0.0, 0.5, 2.0});
    x.set_requires_grad();
    sum_all(clamp(x, 0.0, 2.0)).backward();
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 0.0);
    CHECK(x.grad()[2] == 1.0);
    CHECK(x.grad()[3] == 0.0);
  }

  TEST_CASE("sigmoid(0) and relu gradients") {
    CHECK(sigmoid(T(Shape{}, {0.0})).item() == 0.5);
    T x(Shape{1, 1, 1, 2}, {-0.5, 0.5});
    x.set_requires_grad();
    sum_all(relu(x)).backward();
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 1.0);
  }

  TEST_CASE("NaN propagates through relu and clamp") {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    CHECK(std::isnan(relu(T(Shape{}, {nan})).item()));
    CHECK(std::isnan(clamp(T(Shape{}, {nan}), 0.0, 1.0).item()));
  }

  TEST_CASE("unary gradients match central differences") {
    // Values kept away from kinks (abs at 0, relu at 0).
    T x = random_tensor(Shape{1, 2, 3, 3}, 34, 0.2, 2.0);
    for (Eigen::Index i = 0; i < x.size(); i += 2) x.mutable_value()[i] *= -1;
    T pos = random_tensor(Shape{1, 2, 3, 3}, 35, 0.2, 2.0);
    T probe = random_tensor(x.shape(), 36, 0.5, 1.5);
    std::vector<std::pair<const char*, std::function<T()>>> cases{
        {"abs", [&] { return abs(x); }},         {"relu", [&] { return relu(x); }},
        {"sigmoid", [&] { return sigmoid(x); }}, {"exp_neg", [&] { return exp_neg(x); }},
        {"square", [&] { return square(x); }},   {"sqrt", [&] { return sqrt(pos); }},
        {"sin", [&] { return sin(x); }},         {"cos", [&] { return cos(x); }},
        {"clamp", [&] { return clamp(x, -1.5, 1.5); }},
        {"scalar", [&] { return 3.0 - x * 2.0 + 1.0; }},
        {"rdiv", [&] { return 2.0 / pos; }},
    };
    for (auto& [name, fn] : cases) {
      CAPTURE(name);
      std::vector<T> leaves{x, pos};
      auto r = check_gradients(std::span<T>(leaves), probed(fn, probe));
      CHECK(r.max_rel_error < kOpTol);
    }
  }

  TEST_CASE("broadcast binary gradients match central differences") {
    T a = random_tensor(Shape{2, 1, 3, 4}, 37);
    T b = random_tensor(Shape{2, 3, 1, 1}, 38, 0.5, 2.0);
    T probe = random_tensor(Shape{2, 3, 3, 4}, 39, 0.5, 1.5);
    std::vector<std::pair<const char*, std::function<T()>>> cases{
        {"add", [&] { return a + b; }}, {"sub", [&] { return a - b; }},
        {"mul", [&] { return a * b; }}, {"div", [&] { return a / b; }}};
    for (auto& [name, fn] : cases) {
      CAPTURE(name);
      CHECK(fn().shape() == Shape{2, 3, 3, 4});
      std::vector<T> leaves{a, b};
      auto r = check_gradients(std::span<T>(leaves), probed(fn, probe));
      CHECK(r.max_rel_error < kOpTol);
    }
    CHECK_THROWS_AS(add(T(Shape{1, 2, 3, 3}), T(Shape{1, 3, 3, 3})), ShapeError);
  }
}

TEST_SUITE("reductions") {
  TEST_CASE("min over a single tensor is the tensor") {
    T a = random_tensor(Shape{1, 1, 3, 3}, 40);
    std::vector<T> in{a};
    auto r = min_over_list(std::span<const T>(in));
    CHECK((r.value.value() == a.value()).all());
  }

  TEST_CASE("min over [x, x+1] picks x and routes the gradient to it") {
    T x = random_tensor(Shape{1, 1, 3, 3}, 41);
    x.set_requires_grad();
    std::vector<T> in{x, x + 1.0};
    auto r = min_over_list(std::span<const T>(in));
    CHECK((r.value.value() == x.value()).all());
    for (int idx : r.argmin) CHECK(idx == 0);
    sum_all(r.value).backward();
    CHECK((x.grad() == 1.0).all());
  }

  TEST_CASE("ties go to the first source") {
    T a(Shape{1, 1, 1, 2}, {1.0, 1.0});
    T b(Shape{1, 1, 1, 2}, {1.0, 0.5});
    std::vector<T> in{a, b};
    auto r = min_over_list(std::span<const T>(in));
    CHECK(r.argmin == std::vector<int>{0, 1});
  }

  TEST_CASE("subgradient matches central differences away from ties") {
    T a = random_tensor(Shape{1, 2, 3, 3}, 42);
    T b = random_tensor(Shape{1, 2, 3, 3}, 43);
    T probe = random_tensor(a.shape(), 44, 0.5, 1.5);
    std::vector<T> leaves{a, b};
    auto r = check_gradients(std::span<T>(leaves), probed([&] {
      std::vector<T> in{a, b};
      return min_over_list(std::span<const T>(in)).value;
    }, probe));
    CHECK(r.max_rel_error < kOpTol);
  }

  TEST_CASE("empty list is a configuration error") {
    std::vector<T> none;
    CHECK_THROWS_AS(min_over_list(std::span<const T>(none)), ConfigError);
  }

  TEST_CASE("mean_spatial and mean_channels gradients") {
    T x = random_tensor(Shape{2, 3, 2, 4}, 45);
    std::vector<T> leaves{x};
    T p1 = random_tensor(Shape{2, 3, 1, 1}, 46, 0.5, 1.5);
    T p2 = random_tensor(Shape{2, 1, 2, 4}, 47, 0.5, 1.5);
    CHECK(check_gradients(std::span<T>(leaves), probed([&] { return mean_spatial(x); }, p1)).max_rel_error < kOpTol);
    CHECK(check_gradients(std::span<T>(leaves), probed([&] { return mean_channels(x); }, p2)).max_rel_error < kOpTol);
  }

  TEST_CASE("cross-entropy of uniform logits is ln K") {
    const int k = 5;
    T logits(Shape{1, k, 2, 3}, 0.7);
    std::vector<int> labels{0, 1, 2, 3, 4, 0};
    CHECK(softmax_cross_entropy(logits, labels, 255).item() == doctest::Approx(std::log(double(k))));
    T rnd = random_tensor(Shape{2, 4, 2, 2}, 48, -2, 2);
    std::vector<int> l2{0, 1, 2, 3, 255, 1, 1, 0};
    std::vector<T> leaves{rnd};
    auto r = check_gradients(std::span<T>(leaves), [&] { return softmax_cross_entropy(rnd, l2, 255); });
    CHECK(r.max_rel_error < kOpTol);
    std::vector<int> ignored(8, 255);
    CHECK_THROWS_AS(softmax_cross_entropy(rnd, ignored, 255), UsageError);
  }
}

TEST_SUITE("backward") {
  TEST_CASE("sum gives ones, mean of squares gives 2x/n") {
    T x = random_tensor(Shape{1, 2, 3, 3}, 49);
    x.set_requires_grad();
    sum_all(x).backward();
    CHECK((x.grad() == 1.0).all());
    x.zero_grad();
    mean_all(x * x).backward();
    CHECK((x.grad() - 2.0 * x.value() / double(x.size())).abs().maxCoeff() < 1e-15);
  }

  TEST_CASE("repeated backward accumulates") {
    T x = random_tensor(Shape{1, 1, 2, 2}, 50);
    x.set_requires_grad();
    auto loss = sum_all(x * 3.0);
    loss.backward();
    loss.backward();
    CHECK((x.grad() == 6.0).all());
  }

  TEST_CASE("non-scalar backward is a usage error") {
    T x = random_tensor(Shape{1, 1, 2, 2}, 51);
    x.set_requires_grad();
    CHECK_THROWS_AS((x * 2.0).backward(), UsageError);
  }

  TEST_CASE("no-grad mode records no graph") {
    T x = random_tensor(Shape{1, 1, 2, 2}, 52);
    x.set_requires_grad();
    NoGradGuard guard;
    CHECK_FALSE((x * 2.0).requires_grad());
  }
}

TEST_SUITE("optimizer") {
  TEST_CASE("one Adam step matches hand evaluation") {
    Parameter<double> p("p", T(Shape{}, {1.0}));
    p.tensor.mutable_grad()[0] = 0.5;
    std::vector<Parameter<double>> ps{p};
    adam_step(std::span<Parameter<double>>(ps), 0.1);
    // m = 0.05, v = 2.5e-4; m_hat = 0.5, v_hat = 0.25
    CHECK(ps[0].adam_m[0] == doctest::Approx(0.05).epsilon(1e-14));
    CHECK(ps[0].adam_v[0] == doctest::Approx(2.5e-4).epsilon(1e-14));
    CHECK(ps[0].tensor.item() == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8)).epsilon(1e-14));
    CHECK(ps[0].tensor.grad()[0] == 0.5);  // grads untouched
  }

  TEST_CASE("two steps with constant gradient follow the recurrences") {
    Parameter<double> p("p", T(Shape{}, {1.0}));
    p.tensor.mutable_grad()[0] = 0.5;
    std::vector<Parameter<double>> ps{p};
    adam_step(std::span<Parameter<double>>(ps), 0.1);
    adam_step(std::span<Parameter<double>>(ps), 0.1);
    const double m2 = 0.9 * 0.05 + 0.1 * 0.5;
    const double v2 = 0.999 * 2.5e-4 + 0.001 * 0.25;
    CHECK(ps[0].adam_m[0] == doctest::Approx(m2).epsilon(1e-14));
    CHECK(ps[0].adam_v[0] == doctest::Approx(v2).epsilon(1e-14));
    const double step2 = 0.1 * (m2 / (1 - 0.81)) / (std::sqrt(v2 / (1 - 0.999 * 0.999)) + 1e-8);
    CHECK(ps[0].tensor.item() == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8) - step2).epsilon(1e-14));
    CHECK(ps[0].step_count == 2);
  }

  TEST_CASE("zero gradient leaves the parameter in place") {
    Parameter<double> p("p", random_tensor(Shape{1, 1, 2, 2}, 53));
    const Array<double> before = p.tensor.value();
    p.tensor.mutable_grad().setZero();
    std::vector<Parameter<double>> ps{p};
    adam_step(std::span<Parameter<double>>(ps), 0.1);
    CHECK((ps[0].tensor.value() - before).abs().maxCoeff() < 0.1 * 1e-6);
  }

  TEST_CASE("missing gradient is a usage error") {
    std::vector<Parameter<double>> ps{Parameter<double>("p", T(Shape{}, {1.0}))};
    CHECK_THROWS_AS(adam_step(std::span<Parameter<double>>(ps), 0.1), UsageError);
  }

  TEST_CASE("global norm clipping") {
    std::vector<Parameter<double>> ps{Parameter<double>("a", T(Shape{1, 1, 1, 2})),
                                      Parameter<double>("b", T(Shape{}))};
    ps[0].tensor.mutable_grad() << 0.3, 0.0;
    ps[1].tensor.mutable_grad() << 0.4;
    CHECK(clip_global_grad_norm(std::span<Parameter<double>>(ps), 1.0) == doctest::Approx(0.5));
    CHECK(ps[0].tensor.grad()[0] == 0.3);

    ps[0].tensor.mutable_grad() << 2.4, 0.0;
    ps[1].tensor.mutable_grad() << 3.2;
    CHECK(clip_global_grad_norm(std::span<Parameter<double>>(ps), 1.0) == doctest::Approx(4.0));
    const double post = global_grad_norm(std::span<const Parameter<double>>(ps));
    CHECK(std::abs(post - 1.0) < 1e-6);
    const double cosine = (2.4 * ps[0].tensor.grad()[0] + 3.2 * ps[1].tensor.grad()[0]) / (4.0 * post);
    CHECK(std::abs(cosine - 1.0) < 1e-6);
  }
}

TEST_SUITE("properties") {
  TEST_CASE("linear ops satisfy superposition") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const double a = 0.7 + 0.1 * seed, b = -1.3 + 0.2 * seed;
      T x = random_tensor(Shape{2, 3, 8, 8}, 100 + seed);
      T y = random_tensor(Shape{2, 3, 8, 8}, 200 + seed);
      T w = random_tensor(Shape{4, 3, 3, 3}, 300 + seed);
      T cw = random_tensor(Shape{2, 3, 1, 1}, 400 + seed);
      auto mix = x * a + y * b;
      auto close = [](const T& lhs, const T& rhs) {
        return (lhs.value() - rhs.value()).abs().maxCoeff() < 1e-5;
      };
      CHECK(close(conv2d(mix, w), conv2d(x, w) * a + conv2d(y, w) * b));
      CHECK(close(bilinear_resample(mix, 5, 13), bilinear_resample(x, 5, 13) * a + bilinear_resample(y, 5, 13) * b));
      CHECK(close(concat_channels({mix, mix}), concat_channels({x, x}) * a + concat_channels({y, y}) * b));
      std::vector<T> zx{x, T(x.shape())}, zy{y, T(y.shape())}, zm{mix, T(mix.shape())};
      CHECK(close(channel_weighted_sum(std::span<const T>(zm), cw),
                  channel_weighted_sum(std::span<const T>(zx), cw) * a +
                      channel_weighted_sum(std::span<const T>(zy), cw) * b));
    }
  }

  TEST_CASE("pooling and resampling shape algebra") {
    for (int s = 1; s <= 5; ++s) {
      T x = random_tensor(Shape{1, 2, 64, 96}, 500 + s);
      T y = x;
      for (int i = 1; i < s; ++i) y = avg_pool2(y);
      CHECK(y.shape() == Shape{1, 2, 64 >> (s - 1), 96 >> (s - 1)});
      CHECK(bilinear_resample(y, 64, 96).shape() == x.shape());
    }
  }

  TEST_CASE("forward passes are deterministic") {
    auto run = [] {
      Tensor<float> x = random_tensor<float>(Shape{2, 3, 16, 16}, 7);
      Tensor<float> w = random_tensor<float>(Shape{5, 3, 3, 3}, 8);
      return bilinear_resample(avg_pool2(relu(conv2d(x, w))), 16, 16);
    };
    CHECK((run().value() == run().value()).all());
  }

  TEST_CASE("serialization round trip preserves shape and bits") {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      const Shape s{int(seed % 2) + 1, int(seed) + 1, 3, int(2 * seed) + 1};
      Tensor<float> t = random_tensor<float>(s, seed, -1e3, 1e3);
      std::stringstream ss;
      write_tensor(ss, t);
      CHECK(ss.str().size() == 8 + 32 + 4 * std::size_t(s.size()));
      auto back = read_tensor<float>(ss);
      CHECK(back.shape() == s);
      CHECK((back.value() == t.value()).all());
    }
    std::stringstream ss;
    write_tensor(ss, T(Shape{1, 1, 1, 2}, {0.1, 0.2}));
    auto as_float = read_tensor<float>(ss);
    CHECK(as_float.value()[0] == 0.1f);
    std::stringstream bad("xx");
    CHECK_THROWS(read_tensor<float>(bad));
  }
}

TEST_SUITE("spatial_diff") {
  TEST_CASE("forward differences of a ramp") {
    T x(Shape{1, 1, 2, 3}, {0.0, 1.0, 3.0, 10.0, 20.0, 40.0});
    auto dx = spatial_diff(x, Axis::X);
    auto dy = spatial_diff(x, Axis::Y);
    CHECK(dx.shape() == Shape{1, 1, 2, 2});
    CHECK(dy.shape() == Shape{1, 1, 1, 3});
    CHECK(dx.value()[1] == 2.0);
    CHECK(dx.value()[3] == 20.0);
    CHECK(dy.value()[2] == 37.0);
  }

  TEST_CASE("finite-difference gradient") {
    T x = random_tensor<double>(Shape{2, 2, 5, 4}, 3);
    for (Axis axis : {Axis::X, Axis::Y}) {
      const T probe = probe_for(spatial_diff(x, axis));
      std::vector<T> leaves{x};
      auto r = check_gradients(leaves, probed([&] { return spatial_diff(leaves[0], axis); }, probe));
      CHECK_MESSAGE(r.max_rel_error < kOpTol, r.worst);
    }
  }
}
