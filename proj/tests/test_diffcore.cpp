#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "avrl/errors.hpp"
#include "avrl/numeric.hpp"
#include "avrl/ops.hpp"
#include "doctest.h"

using namespace avrl;

namespace {

Tensor random_tensor(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Tensor t = Tensor::matrix(r, c);
  for (auto& v : t.values()) v = nd(rng);
  return t;
}

// Weighted sum against a fixed random matrix so every output element
// contributes a distinct gradient.
Var probe_loss(const Var& y, const Tensor& weights) {
  return ops::sum(ops::mul(y, Var::constant(weights)));
}

struct Primitive {
  std::string name;
  std::size_t n_inputs;
  std::function<std::vector<std::pair<std::size_t, std::size_t>>(Rng&)> shapes;
  std::function<Var(const std::vector<Var>&)> apply;
};

std::vector<Primitive> primitives() {
  auto dims = [](Rng& rng) { return std::uniform_int_distribution<std::size_t>(1, 4)(rng); };
  std::vector<Primitive> p;
  p.push_back({"matmul", 2, [dims](Rng& r) {
                 auto n = dims(r), k = dims(r), m = dims(r);
                 return std::vector<std::pair<std::size_t, std::size_t>>{{n, k}, {k, m}};
               },
               [](const std::vector<Var>& x) { return ops::matmul(x[0], x[1]); }});
  auto unary = [dims](Rng& r) {
    return std::vector<std::pair<std::size_t, std::size_t>>{{dims(r), dims(r) + 1}};
  };
  p.push_back({"gelu", 1, unary, [](const std::vector<Var>& x) { return ops::gelu(x[0]); }});
  p.push_back({"softmax_rows", 1, unary,
               [](const std::vector<Var>& x) { return ops::softmax_rows(x[0]); }});
  p.push_back({"log_softmax_rows", 1, unary,
               [](const std::vector<Var>& x) { return ops::log_softmax_rows(x[0]); }});
  p.push_back({"exp", 1, unary, [](const std::vector<Var>& x) { return ops::exp(x[0]); }});
  // log on strictly positive inputs
  p.push_back({"log", 1, unary, [](const std::vector<Var>& x) {
                 return ops::log(ops::exp(x[0]));
               }});
  p.push_back({"layer_norm", 3, [dims](Rng& r) {
                 auto n = dims(r), c = dims(r) + 1;
                 return std::vector<std::pair<std::size_t, std::size_t>>{{n, c}, {1, c}, {1, c}};
               },
               [](const std::vector<Var>& x) { return ops::layer_norm(x[0], x[1], x[2]); }});
  p.push_back({"row_normalize", 1, unary,
               [](const std::vector<Var>& x) { return ops::row_normalize(x[0]); }});
  p.push_back({"cosine_rows", 2, [dims](Rng& r) {
                 auto n = dims(r), c = dims(r) + 1;
                 return std::vector<std::pair<std::size_t, std::size_t>>{{n, c}, {n, c}};
               },
               [](const std::vector<Var>& x) {
                 return ops::row_dot(ops::row_normalize(x[0]), ops::row_normalize(x[1]));
               }});
  p.push_back({"conv_gather", 3, [dims](Rng& r) {
                 auto c = dims(r), o = dims(r);
                 return std::vector<std::pair<std::size_t, std::size_t>>{{7, c}, {3 * c, o}, {1, o}};
               },
               [](const std::vector<Var>& x) {
                 // kernel 3, stride 2, one zero pad on each side
                 std::vector<std::int64_t> idx = {-1, 0, 1, 1, 2, 3, 3, 4, 5, 5, 6, -1};
                 return ops::linear(ops::gather_rows(x[0], idx, 3), x[1], x[2]);
               }});
  p.push_back({"block_mean", 1, [dims](Rng& r) {
                 return std::vector<std::pair<std::size_t, std::size_t>>{{dims(r), 3 * dims(r)}};
               },
               [](const std::vector<Var>& x) { return ops::block_mean(x[0], 3); }});
  p.push_back({"attention_core", 1, [dims](Rng& r) {
                 return std::vector<std::pair<std::size_t, std::size_t>>{{dims(r) + 1, 4}};
               },
               [](const std::vector<Var>& x) {
                 auto q = ops::slice_cols(x[0], 0, 2);
                 auto k = ops::slice_cols(x[0], 2, 4);
                 auto w = ops::softmax_rows(ops::scale(ops::matmul(q, ops::transpose(k)), 0.7));
                 return ops::concat_cols({ops::matmul(w, k), q});
               }});
  p.push_back({"replace_rows", 2, [dims](Rng& r) {
                 auto c = dims(r);
                 return std::vector<std::pair<std::size_t, std::size_t>>{{4, c}, {1, c}};
               },
               [](const std::vector<Var>& x) {
                 return ops::replace_rows(x[0], {true, false, true, false}, x[1]);
               }});
  p.push_back({"pick_concat_rows", 2, [dims](Rng& r) {
                 auto c = dims(r) + 2;
                 return std::vector<std::pair<std::size_t, std::size_t>>{{2, c}, {1, c}};
               },
               [](const std::vector<Var>& x) {
                 auto s = ops::concat_rows({x[0], x[1]});
                 return ops::pick(ops::log_softmax_rows(s), {0, 1, 2});
               }});
  return p;
}

}  // namespace

TEST_CASE("softmax_stable examples") {
  auto half = softmax_stable(std::vector<double>{0.0, 0.0});
  CHECK(half[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(half[1] == doctest::Approx(0.5).epsilon(1e-15));

  for (double x : {-1e300, -3.0, 0.0, 42.0, 1e300}) {
    auto one = softmax_stable(std::vector<double>{x});
    CHECK(one[0] == 1.0);
  }

  // 1/(1+e) and e/(1+e), evaluated to 17 digits.
  auto big = softmax_stable(std::vector<double>{1000.0, 1001.0});
  CHECK(std::abs(big[0] - 0.26894142136999512) < 1e-15);
  CHECK(std::abs(big[1] - 0.73105857863000488) < 1e-15);

  CHECK_THROWS_AS(softmax_stable(std::vector<double>{}), std::invalid_argument);
  CHECK_THROWS_AS(softmax_stable(std::vector<double>{1.0, NAN}), NumericError);
  CHECK_THROWS_AS(softmax_stable(std::vector<double>{INFINITY}), NumericError);
}

TEST_CASE("softmax_stable is shift invariant and normalized") {
  Rng rng(7);
  std::normal_distribution<double> nd(0.0, 5.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> x(1 + trial % 9);
    for (auto& v : x) v = nd(rng);
    const double shift = nd(rng) * 10.0;
    std::vector<double> y = x;
    for (auto& v : y) v += shift;
    auto px = softmax_stable(x);
    auto py = softmax_stable(y);
    double total = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      CHECK(px[i] >= 0.0);
      CHECK(std::abs(px[i] - py[i]) < 1e-12);
      total += px[i];
    }
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
}

TEST_CASE("cosine_similarity examples") {
  CHECK(cosine_similarity(std::vector<double>{1, 0}, std::vector<double>{1, 0}) == 1.0);
  CHECK(cosine_similarity(std::vector<double>{1, 0}, std::vector<double>{0, 1}) == 0.0);
  // 11 / (sqrt(5) * 5)
  CHECK(std::abs(cosine_similarity(std::vector<double>{1, 2}, std::vector<double>{3, 4}) -
                 0.98386991009990743) < 1e-15);
  CHECK(cosine_similarity(std::vector<double>{0, 0}, std::vector<double>{1, 0}) == 0.0);
  CHECK_THROWS_AS(cosine_similarity(std::vector<double>{1}, std::vector<double>{1, 2}),
                  std::invalid_argument);
}

TEST_CASE("grad_check on closed-form losses") {
  SUBCASE("square") {
    ParameterSet ps;
    ps.add("theta", Tensor::scalar(3.0));
    auto f = [&] {
      auto t = ps.get("theta");
      return ops::mul(t, t);
    };
    backward(f());
    CHECK(ps.get("theta").grad()[0] == 6.0);
    auto report = grad_check(f, ps, {.step = 1e-4, .tolerance = 1e-9});
    CHECK(report.passed());
    CHECK(report.entries.at(0).max_abs_error < 1e-9);
  }
  SUBCASE("linear sum gives exact ones") {
    ParameterSet ps;
    ps.add("theta", Tensor({5}, std::vector<double>{0.3, -1.0, 2.0, 7.5, -0.25}));
    backward(ops::sum(ps.get("theta")));
    for (double g : ps.get("theta").grad().values()) CHECK(g == 1.0);
  }
  SUBCASE("non-deterministic loss is rejected") {
    ParameterSet ps;
    ps.add("theta", Tensor::scalar(1.0));
    int calls = 0;
    auto f = [&] { return ops::scale(ps.get("theta"), 1.0 + 1e-3 * (calls++)); };
    CHECK_THROWS_AS(grad_check(f, ps), NumericError);
  }
}

TEST_CASE("every primitive passes grad_check on random shapes") {
  for (const auto& prim : primitives()) {
    CAPTURE(prim.name);
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      Rng rng(seed);
      auto shapes = prim.shapes(rng);
      ParameterSet ps;
      for (std::size_t i = 0; i < shapes.size(); ++i) {
        ps.add("in" + std::to_string(i), random_tensor(rng, shapes[i].first, shapes[i].second));
      }
      std::vector<Var> inputs;
      for (std::size_t i = 0; i < shapes.size(); ++i) inputs.push_back(ps.get("in" + std::to_string(i)));
      Var y = prim.apply(inputs);
      Tensor w = random_tensor(rng, y.rows(), y.cols());
      auto f = [&] {
        std::vector<Var> xs;
        for (std::size_t i = 0; i < shapes.size(); ++i) xs.push_back(ps.get("in" + std::to_string(i)));
        return probe_loss(prim.apply(xs), w);
      };
      auto report = grad_check(f, ps, {.step = 1e-4, .tolerance = 1e-4});
      CAPTURE(seed);
      CHECK(report.max_rel_error() < 1e-4);
    }
  }
}

TEST_CASE("primitives are bitwise deterministic") {
  Rng rng(11);
  auto a = random_tensor(rng, 5, 6), b = random_tensor(rng, 6, 3);
  auto run = [&] {
    ParameterSet ps;
    ps.add("a", a);
    ps.add("b", b);
    auto y = ops::softmax_rows(ops::gelu(ops::matmul(ps.get("a"), ps.get("b"))));
    backward(ops::sum(ops::mul(y, y)));
    return std::make_pair(y.value().storage(), ps.get("a").grad().storage());
  };
  auto r1 = run();
  auto r2 = run();
  CHECK(r1.first == r2.first);
  CHECK(r1.second == r2.second);
}

TEST_CASE("non-finite results are an error state") {
  auto x = Var::constant(Tensor({1, 2}, std::vector<double>{1.0, 800.0}));
  CHECK_THROWS_AS(ops::exp(x), NumericError);
  auto z = Var::constant(Tensor({1, 1}, std::vector<double>{0.0}));
  CHECK_THROWS_AS(ops::log(z), NumericError);
}

TEST_CASE("parameter set keeps sorted unique paths") {
  ParameterSet ps;
  ps.add("b.weight", Tensor::scalar(1));
  ps.add("a.weight", Tensor::scalar(2));
  ps.add("c", Tensor::scalar(3), false);
  CHECK_THROWS_AS(ps.add("a.weight", Tensor::scalar(0)), std::invalid_argument);
  std::vector<std::string> names;
  for (const auto& [path, _] : ps) names.push_back(path);
  CHECK(names == std::vector<std::string>{"a.weight", "b.weight", "c"});
  CHECK(ps.total_elements() == 3);
  CHECK_FALSE(ps.get("c").requires_grad());
}
