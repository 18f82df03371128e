#pragma once

// Graph-drawing representation loss over (u, v) successor pairs sharing one
// encoder: a smoothness term plus an orthonormality penalty.

#include <string>

#include "derex/autodiff.hpp"
#include "derex/error.hpp"
#include "derex/matrix.hpp"

namespace derex {

inline constexpr double kLaplacianLambdaDefault = 10.0;

struct LaplacianBreakdown {
  double l_diag = 0.0;  // smoothness
  double l_off = 0.0;   // orthonormality
  double total = 0.0;   // l_diag + lambda_r * l_off
  double lambda_r = 0.0;
};

struct LaplacianLoss {
  LaplacianBreakdown breakdown;
  ad::Var total;
};

namespace detail {
inline void check_pair_shapes(std::size_t ur, std::size_t uc, std::size_t vr, std::size_t vc) {
  if (ur != vr || uc != vc) throw ShapeError("laplacian_loss: f(u) " + shape_str(ur, uc) + " vs f(v) " + shape_str(vr, vc));
  if (ur == 0 || uc == 0) throw ShapeError("laplacian_loss: empty batch or zero features");
}
}  // namespace detail

// Plain form. Uses sum_{j,l} (u_j u_l - d_jl)(v_j v_l - d_jl) = (u.v)^2 - |u|^2 - |v|^2 + k.
inline LaplacianBreakdown laplacian_terms(const Matrix& fu, const Matrix& fv, double lambda_r) {
  detail::check_pair_shapes(fu.rows(), fu.cols(), fv.rows(), fv.cols());
  const std::size_t b = fu.rows(), k = fu.cols();
  double smooth = 0.0, ortho = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    double uv = 0.0, uu = 0.0, vv = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double u = fu(i, j), v = fv(i, j);
      smooth += (u - v) * (u - v);
      uv += u * v;
      uu += u * u;
      vv += v * v;
    }
    ortho += uv * uv - uu - vv + static_cast<double>(k);
  }
  LaplacianBreakdown out;
  out.l_diag = smooth / static_cast<double>(b * k);
  out.l_off = ortho / static_cast<double>(b * k * k);
  out.lambda_r = lambda_r;
  out.total = out.l_diag + lambda_r * out.l_off;
  return out;
}

inline LaplacianLoss laplacian_loss(const ad::Var& fu, const ad::Var& fv, double lambda_r = kLaplacianLambdaDefault) {
  const auto& us = fu->value;
  const auto& vs = fv->value;
  if (us.shape.size() != 2 || vs.shape.size() != 2) throw ShapeError("laplacian_loss: encodings must be rank 2");
  detail::check_pair_shapes(us.rows(), us.cols(), vs.rows(), vs.cols());
  const std::size_t b = us.rows(), k = us.cols();
  const double bk = static_cast<double>(b * k), bkk = static_cast<double>(b * k * k);

  ad::Var smooth = ad::scale(ad::sum(ad::square(ad::sub(fu, fv))), 1.0 / bk);
  const ad::Var ones = ad::constant(ad::Tensor({k, 1}, 1.0));
  ad::Var dots = ad::matmul(ad::mul(fu, fv), ones);  // b x 1 row-wise u.v
  ad::Var ortho = ad::sub(ad::sum(ad::square(dots)), ad::add(ad::sum(ad::square(fu)), ad::sum(ad::square(fv))));
  ortho = ad::scale(ortho, 1.0 / bkk);
  const double constant_term = static_cast<double>(k) / static_cast<double>(k * k);  // b*k / (b*k^2)
  ad::Var off = ad::add(ortho, ad::constant(ad::Tensor::scalar(constant_term)));

  LaplacianLoss out;
  out.total = ad::add(smooth, ad::scale(off, lambda_r));
  out.breakdown.l_diag = smooth->value.item();
  out.breakdown.l_off = off->value.item();
  out.breakdown.lambda_r = lambda_r;
  out.breakdown.total = out.total->value.item();
  return out;
}

}  // namespace derex
