#include "i3d/autograd.hpp"
#include "i3d/random.hpp"

#include <doctest.h>

#include <functional>

using namespace i3d;
using ag::Mat;
using ParamD = ag::Param<double>;
using TapeD = ag::Tape<double>;
using VarD = ag::Var<double>;

namespace {

using Fn = std::function<VarD(TapeD&, const std::vector<VarD>&)>;

Mat<double> random_mat(Rng& rng, int r, int c, double scale = 1.0) {
  Mat<double> m(r, c);
  for (int i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

double objective(const Fn& f, std::vector<ParamD>& ps, const Mat<double>& weights) {
  TapeD tape;
  std::vector<VarD> in;
  for (auto& p : ps) in.push_back(tape.param(p));
  return f(tape, in).value().cwiseProduct(weights).sum();
}

/// Max relative error between reverse-mode and central differences of
/// sum(f(inputs) * W) for a fixed random W.
double fd_error(const Fn& f, std::vector<ParamD> ps, std::uint64_t seed = 1) {
  Rng rng(seed);
  Mat<double> weights;
  {
    TapeD probe;
    std::vector<VarD> in;
    for (auto& p : ps) in.push_back(probe.param(p));
    const VarD out = f(probe, in);
    weights = random_mat(rng, static_cast<int>(out.rows()), static_cast<int>(out.cols()));
  }
  for (auto& p : ps) p.zero_grad();
  {
    TapeD tape;
    std::vector<VarD> in;
    for (auto& p : ps) in.push_back(tape.param(p));
    const VarD out = f(tape, in);
    tape.seed(out, weights);
    tape.backward();
  }
  double worst = 0.0;
  const double h = 1e-6;
  for (auto& p : ps)
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      const double x = p.value.data()[i];
      p.value.data()[i] = x + h;
      const double up = objective(f, ps, weights);
      p.value.data()[i] = x - h;
      const double down = objective(f, ps, weights);
      p.value.data()[i] = x;
      const double num = (up - down) / (2 * h);
      const double ana = p.grad.data()[i];
      worst = std::max(worst, std::abs(num - ana) / std::max(1e-2, std::abs(num) + std::abs(ana)));
    }
  return worst;
}

std::vector<ParamD> params(Rng& rng, const std::vector<std::pair<int, int>>& shapes) {
  std::vector<ParamD> out;
  for (const auto& [r, c] : shapes) out.push_back({"p", random_mat(rng, r, c), {}});
  return out;
}

}  // namespace

TEST_CASE("matrix products and affine maps match finite differences") {
  Rng rng(3);
  CHECK(fd_error([](TapeD&, const auto& v) { return ag::matmul(v[0], v[1]); }, params(rng, {{3, 4}, {4, 5}})) < 1e-6);
  CHECK(fd_error([](TapeD&, const auto& v) { return ag::matmul_nt(v[0], v[1]); }, params(rng, {{3, 4}, {5, 4}})) < 1e-6);
  CHECK(fd_error([](TapeD&, const auto& v) { return ag::linear(v[0], v[1], v[2]); },
                 params(rng, {{3, 4}, {4, 2}, {1, 2}})) < 1e-6);
  CHECK(fd_error([](TapeD&, const auto& v) { return ag::add(v[0], v[1]); }, params(rng, {{3, 4}, {3, 4}})) < 1e-6);
  CHECK(fd_error([](TapeD&, const auto& v) { return ag::add_row(v[0], v[1]); }, params(rng, {{3, 4}, {1, 4}})) < 1e-6);
  CHECK(fd_error([](TapeD&, const auto& v) { return ag::scale(v[0], -2.5); }, params(rng, {{2, 3}})) < 1e-6);
}

TEST_CASE("row slicing, concatenation and pixel shuffle route gradients") {
  Rng rng(4);
  CHECK(fd_error([](TapeD&, const auto& v) { return ag::slice_rows(v[0], 1, 2); }, params(rng, {{4, 3}})) < 1e-6);
  CHECK(fd_error([](TapeD&, const auto& v) { return ag::concat_rows<double>({v[0], v[1], v[0]}); },
                 params(rng, {{2, 3}, {1, 3}})) < 1e-6);
  CHECK(fd_error([](TapeD&, const auto& v) { return ag::pixel_shuffle(v[0], 2, 3, 2); }, params(rng, {{6, 8}})) < 1e-6);
}

TEST_CASE("pixel shuffle places channel c*r*r + i*r + j at (y*r + i, x*r + j)") {
  TapeD tape;
  Mat<double> in = Mat<double>::Zero(2, 4);  // grid 1 x 2, r = 2, one channel
  for (int k = 0; k < 8; ++k) in.data()[k] = k;
  const auto out = ag::pixel_shuffle(tape.constant(in), 1, 2, 2).value();
  REQUIRE(out.rows() == 8);
  // output pixel (row, col) of a 2 x 4 image, flattened row-major
  CHECK(out(0, 0) == 0);  // token 0, i=0 j=0
  CHECK(out(1, 0) == 1);  // token 0, i=0 j=1
  CHECK(out(2, 0) == 4);  // token 1, i=0 j=0
  CHECK(out(4, 0) == 2);  // token 0, i=1 j=0
  CHECK(out(7, 0) == 7);  // token 1, i=1 j=1
}

TEST_CASE("pointwise nonlinearities match finite differences") {
  Rng rng(5);
  CHECK(fd_error([](TapeD&, const auto& v) { return ag::relu(v[0]); }, params(rng, {{4, 5}})) < 1e-6);
  CHECK(fd_error([](TapeD&, const auto& v) { return ag::sigmoid(v[0]); }, params(rng, {{4, 5}})) < 1e-6);
  CHECK(fd_error([](TapeD&, const auto& v) { return ag::tanh(v[0]); }, params(rng, {{4, 5}})) < 1e-6);
  CHECK(fd_error([](TapeD&, const auto& v) { return ag::gelu(v[0]); }, params(rng, {{4, 5}})) < 1e-6);
}

TEST_CASE("layer norm and multi-head attention match finite differences") {
  Rng rng(6);
  CHECK(fd_error([](TapeD&, const auto& v) { return ag::layer_norm(v[0], v[1], v[2]); },
                 params(rng, {{3, 8}, {1, 8}, {1, 8}})) < 1e-5);
  CHECK(fd_error([](TapeD&, const auto& v) { return ag::attention(v[0], v[1], v[2], 2); },
                 params(rng, {{3, 8}, {5, 8}, {5, 8}})) < 1e-5);
}

TEST_CASE("axis activations match finite differences and renormalize") {
  Rng rng(7);
  CHECK(fd_error([](TapeD&, const auto& v) { return ag::axis_activation(v[0]); }, params(rng, {{1, 3}})) < 1e-6);
  CHECK(fd_error([](TapeD&, const auto& v) { return ag::axis_tanh(v[0]); }, params(rng, {{1, 3}})) < 1e-6);
  for (int k = 0; k < 100; ++k) {
    TapeD tape;
    const auto y = ag::axis_activation(tape.constant(random_mat(rng, 1, 3, 3.0))).value();
    CHECK(std::abs(std::hypot(y(0, 0), y(0, 1)) - 1.0) < 1e-12);
  }
}

TEST_CASE("a parameter used twice accumulates both contributions") {
  ParamD p{"p", Mat<double>::Constant(1, 1, 3.0), {}};
  p.zero_grad();
  TapeD tape;
  const VarD a = tape.param(p);
  const VarD y = ag::matmul(a, a);  // 9, dy/dp = 2p
  tape.seed(y, Mat<double>::Ones(1, 1));
  tape.backward();
  CHECK(p.grad(0, 0) == doctest::Approx(6.0));
}

TEST_CASE("shape errors are rejected") {
  TapeD tape;
  const VarD a = tape.constant(Mat<double>::Zero(2, 3));
  CHECK_THROWS_AS(ag::matmul(a, a), std::invalid_argument);
  CHECK_THROWS_AS(ag::add(a, tape.constant(Mat<double>::Zero(3, 2))), std::invalid_argument);
  CHECK_THROWS_AS(ag::axis_activation(a), std::invalid_argument);
  CHECK_THROWS(tape.seed(a, Mat<double>::Zero(1, 1)));
}
