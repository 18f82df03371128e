#include <gtest/gtest.h>

#include "derex/laplacian.hpp"
#include "derex/layers.hpp"
#include "derex/stats.hpp"

using namespace derex;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& x : m.data()) x = normal01(rng);
  return m;
}

// Direct transcription of both sums.
std::pair<double, double> brute(const Matrix& u, const Matrix& v) {
  const std::size_t b = u.rows(), k = u.cols();
  double smooth = 0, ortho = 0;
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      smooth += (u(i, j) - v(i, j)) * (u(i, j) - v(i, j));
      for (std::size_t l = 0; l < k; ++l) {
        const double delta = j == l ? 1.0 : 0.0;
        ortho += (u(i, j) * u(i, l) - delta) * (v(i, j) * v(i, l) - delta);
      }
    }
  return {smooth / (b * k), ortho / (b * k * k)};
}

ad::Var var_of(const Matrix& m) { return ad::leaf(ad::Tensor::from_matrix(m)); }

}  // namespace

TEST(Laplacian, UnitRowsExample) {
  const Matrix e1{{1.0, 0.0}};
  const auto t = laplacian_terms(e1, e1, 10.0);
  EXPECT_EQ(t.l_diag, 0.0);
  EXPECT_DOUBLE_EQ(t.l_off, 0.25);
  EXPECT_DOUBLE_EQ(t.total, 2.5);
  const auto g = laplacian_loss(var_of(e1), var_of(e1), 10.0);
  EXPECT_DOUBLE_EQ(g.breakdown.l_off, 0.25);
}

TEST(Laplacian, ZeroEncodings) {
  const Matrix z(3, 2);
  const auto [smooth, ortho] = brute(z, z);
  const auto t = laplacian_terms(z, z, 1.0);
  EXPECT_EQ(t.l_diag, smooth);
  EXPECT_DOUBLE_EQ(t.l_off, ortho);
  EXPECT_DOUBLE_EQ(t.l_off, 0.5);
}

TEST(Laplacian, MatchesBruteForceOnRandomInputs) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const std::size_t b = 1 + seed % 7, k = 1 + seed % 5;
    const Matrix u = random_matrix(b, k, rng), v = random_matrix(b, k, rng);
    const auto [smooth, ortho] = brute(u, v);
    const auto t = laplacian_terms(u, v, 3.0);
    const auto g = laplacian_loss(var_of(u), var_of(v), 3.0);
    EXPECT_NEAR(t.l_diag, smooth, 1e-12);
    EXPECT_NEAR(t.l_off, ortho, 1e-12);
    EXPECT_NEAR(g.breakdown.l_diag, smooth, 1e-12);
    EXPECT_NEAR(g.breakdown.l_off, ortho, 1e-12);
    EXPECT_NEAR(g.breakdown.total, smooth + 3.0 * ortho, 1e-12);
  }
}

TEST(Laplacian, RejectsMismatchedShapes) {
  EXPECT_THROW(laplacian_terms(Matrix(2, 3), Matrix(2, 2), 1.0), ShapeError);
  EXPECT_THROW(laplacian_loss(var_of(Matrix(2, 3)), var_of(Matrix(3, 3))), ShapeError);
  EXPECT_THROW(laplacian_terms(Matrix(0, 3), Matrix(0, 3), 1.0), ShapeError);
}

TEST(Laplacian, DefaultWeight) {
  const Matrix e1{{1.0, 0.0}};
  EXPECT_EQ(laplacian_loss(var_of(e1), var_of(e1)).breakdown.lambda_r, 10.0);
}

TEST(Laplacian, GradCheckThroughSharedEncoder) {
  ad::Model f{"f", {ad::LayerSpec::linear(5, 4), ad::LayerSpec::tanh(), ad::LayerSpec::linear(4, 3),
                    ad::LayerSpec::batchnorm(3, false, false)}};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ad::ParamStore ps;
    Rng rng(seed);
    ad::init_params(f, ps, rng);
    const ad::Tensor xu = ad::Tensor::from_matrix(random_matrix(6, 5, rng));
    const ad::Tensor xv = ad::Tensor::from_matrix(random_matrix(6, 5, rng));
    const double err = ad::grad_check(
        [&](ad::Binding& b) {
          return laplacian_loss(ad::apply(f, b, ad::constant(xu), ad::Mode::train),
                                ad::apply(f, b, ad::constant(xv), ad::Mode::train))
              .total;
        },
        ps);
    EXPECT_LE(err, 1e-4) << "seed " << seed;
  }
}
