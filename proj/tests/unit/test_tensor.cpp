#include "helpers.hpp"

#include "mmq/grad_check.hpp"
#include "mmq/optim.hpp"
#include "mmq/tensor.hpp"

#include <doctest.h>

#include <array>

using namespace mmq;

namespace {

// Plain loop evaluation of an MLP, independent of the Eigen code path.
std::vector<double> loop_mlp(const Mlp<double>& mlp, std::vector<double> x) {
  const auto& spec = mlp.spec();
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const auto& w = mlp.weight(l).value;
    const auto& b = mlp.bias(l).value;
    std::vector<double> y(spec.layer_dims[l + 1]);
    for (std::size_t o = 0; o < y.size(); ++o) {
      double s = b(0, static_cast<Eigen::Index>(o));
      for (std::size_t i = 0; i < x.size(); ++i) {
        s += x[i] * w(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(o));
      }
      const bool last = l + 1 == spec.num_layers();
      if (!last && spec.activation == Activation::relu) s = std::max(0.0, s);
      if (!last && spec.activation == Activation::tanh) s = std::tanh(s);
      y[o] = s;
    }
    x = std::move(y);
  }
  return x;
}

}  // namespace

TEST_CASE("mlp forward matches a loop oracle") {
  std::mt19937_64 rng(7);
  for (auto act : {Activation::relu, Activation::tanh, Activation::identity}) {
    Mlp<double> mlp(MlpSpec{{5, 7, 3}, act}, "m", rng);
    for (std::size_t l = 0; l < 2; ++l) mlp.bias(l).value = testing::random_matrix(1, mlp.bias(l).value.cols(), rng);
    auto x = testing::random_matrix(4, 5, rng);
    auto y = mlp.forward(x);
    REQUIRE(y.rows() == 4);
    REQUIRE(y.cols() == 3);
    for (Eigen::Index r = 0; r < 4; ++r) {
      std::vector<double> xv(x.row(r).data(), x.row(r).data() + 5);
      const auto expect = loop_mlp(mlp, xv);
      for (Eigen::Index c = 0; c < 3; ++c) CHECK(y(r, c) == doctest::Approx(expect[c]).epsilon(1e-12));
      Vector<double> col = x.row(r).transpose();
      auto single = mlp_apply(mlp, col);
      for (Eigen::Index c = 0; c < 3; ++c) CHECK(single(c) == doctest::Approx(y(r, c)).epsilon(1e-12));
    }
  }
}

TEST_CASE("identity mlp with unit weights passes the input through") {
  auto mlp = Mlp<double>::zeros(MlpSpec{{3, 3}, Activation::identity}, "id");
  mlp.weight(0).value = MatrixD::Identity(3, 3);
  MatrixD x(1, 3);
  x << 1.5, -2.0, 0.25;
  CHECK(testing::max_abs_diff(mlp.forward(x), x) == 0.0);
  CHECK(mlp.parameter_count() == 12);
  CHECK(mlp.flatten().size() == 12);
}

TEST_CASE("mlp spec validation rejects degenerate layers") {
  const MlpSpec one_layer{{4}, Activation::relu};
  const MlpSpec empty_layer{{4, 0, 2}, Activation::relu};
  const MlpSpec ok{{4, 2}, Activation::relu};
  CHECK_THROWS_AS(one_layer.validate(), ShapeError);
  CHECK_THROWS_AS(empty_layer.validate(), ShapeError);
  CHECK_NOTHROW(ok.validate());
  CHECK(parse_activation("tanh") == Activation::tanh);
  CHECK_THROWS(parse_activation("gelu"));
}

TEST_CASE("mlp backward agrees with finite differences") {
  std::mt19937_64 rng(11);
  Mlp<double> mlp(MlpSpec{{4, 6, 5, 2}, Activation::tanh}, "m", rng);
  auto x = testing::random_matrix(3, 4, rng);
  auto target = testing::random_matrix(3, 2, rng);
  std::vector<Parameter<double>*> ps;
  for (auto& p : mlp.params()) ps.push_back(&p);
  auto loss = [&] { return mse(mlp.forward(x), target); };
  auto grads = [&] {
    Mlp<double>::Cache cache;
    auto y = mlp.forward(x, &cache);
    MatrixD dy;
    mse(y, target, &dy);
    mlp.backward(cache, dy);
  };
  CHECK(grad_check(loss, grads, ps, {1e-6, 0, 3}) <= 1e-6);
}

TEST_CASE("grad check of w^2 has zero error and flags a wrong gradient") {
  Parameter<double> w("w", MatrixD::Constant(1, 3, 0.5));
  w.value(0, 1) = -1.25;
  w.value(0, 2) = 2.0;
  std::array<Parameter<double>*, 1> ps{&w};
  auto loss = [&] { return w.value.squaredNorm(); };
  CHECK(grad_check(loss, [&] { w.grad += 2.0 * w.value; }, ps, {1e-5, 0, 0}) <= 1e-9);
  auto bad = grad_check_detailed(loss, [&] { w.grad += 3.0 * w.value; }, ps, {1e-5, 0, 0});
  CHECK(bad.max_rel_err == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
  CHECK(bad.worst_param == "w");
}

TEST_CASE("adam first step moves each coordinate by lr against the gradient sign") {
  Parameter<float> p("p", MatrixF::Zero(1, 3));
  p.grad << 4.0f, -0.001f, 2.0f;
  Adam adam({0.1f});
  std::array<Parameter<float>*, 1> ps{&p};
  adam.step(ps);
  CHECK(p.value(0, 0) == doctest::Approx(-0.1f).epsilon(1e-4));
  CHECK(p.value(0, 1) == doctest::Approx(0.1f).epsilon(1e-3));
  CHECK(p.value(0, 2) == doctest::Approx(-0.1f).epsilon(1e-4));
  CHECK(p.grad.isZero());
  CHECK(adam.steps() == 1);
}

TEST_CASE("softmax rows sum to one and the backward matches finite differences") {
  std::mt19937_64 rng(5);
  Parameter<double> logits("l", testing::random_matrix(3, 4, rng, 2.0));
  auto weights = testing::random_matrix(3, 4, rng);
  auto p = softmax_rows(logits.value);
  for (Eigen::Index r = 0; r < 3; ++r) CHECK(p.row(r).sum() == doctest::Approx(1.0).epsilon(1e-12));
  MatrixD big(1, 2);
  big << 1000.0, 999.0;
  auto pb = softmax_rows(big);
  CHECK(pb(0, 0) == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-12));
  std::array<Parameter<double>*, 1> ps{&logits};
  auto loss = [&] { return softmax_rows(logits.value).cwiseProduct(weights).sum(); };
  auto grads = [&] { logits.grad += softmax_rows_backward(softmax_rows(logits.value), weights); };
  CHECK(grad_check(loss, grads, ps, {1e-6, 0, 0}) <= 1e-6);
}

TEST_CASE("cosine matrix values and backward") {
  MatrixD a(2, 2), b(2, 2);
  a << 3, 4, 0, 0;
  b << 1, 0, 0, 2;
  auto c = cosine_matrix(a, b);
  CHECK(c(0, 0) == doctest::Approx(0.6));
  CHECK(c(0, 1) == doctest::Approx(0.8));
  CHECK(c(1, 0) == 0.0);

  std::mt19937_64 rng(9);
  Parameter<double> r("r", testing::random_matrix(3, 5, rng));
  Parameter<double> o("o", testing::random_matrix(4, 5, rng));
  auto w = testing::random_matrix(3, 4, rng);
  std::array<Parameter<double>*, 2> ps{&r, &o};
  auto loss = [&] { return cosine_matrix(r.value, o.value).cwiseProduct(w).sum(); };
  auto grads = [&] { cosine_matrix_backward(r.value, o.value, w, &r.grad, &o.grad); };
  CHECK(grad_check(loss, grads, ps, {1e-6, 0, 0}) <= 1e-6);
}

TEST_CASE("gram penalty closed forms and gradient") {
  MatrixD same(2, 3);
  same << 1, 2, 3, 2, 4, 6;
  CHECK(gram_penalty(same) == doctest::Approx(2.0).epsilon(1e-12));
  MatrixD orth = MatrixD::Identity(3, 3) * 5.0;
  CHECK(gram_penalty(orth) == doctest::Approx(0.0));
  MatrixD with_zero = MatrixD::Zero(2, 3);
  with_zero(0, 0) = 1.0;
  CHECK_THROWS_AS(gram_penalty(with_zero), NumericError);

  std::mt19937_64 rng(13);
  Parameter<double> v("v", testing::random_matrix(4, 6, rng));
  std::array<Parameter<double>*, 1> ps{&v};
  auto loss = [&] { return gram_penalty(v.value); };
  auto grads = [&] {
    MatrixD dv;
    gram_penalty(v.value, &dv);
    v.grad += dv;
  };
  CHECK(grad_check(loss, grads, ps, {1e-6, 0, 0}) <= 1e-6);
}

TEST_CASE("mse value and shape checking") {
  MatrixD a(1, 2), b(1, 2);
  a << 1, 3;
  b << 0, 0;
  MatrixD d;
  CHECK(mse(a, b, &d) == doctest::Approx(5.0));
  CHECK(d(0, 1) == doctest::Approx(3.0));
  CHECK_THROWS_AS(mse(a, MatrixD(2, 2)), ShapeError);
}
