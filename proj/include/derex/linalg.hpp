#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <vector>

#include "derex/error.hpp"
#include "derex/matrix.hpp"

namespace derex {

struct SvdResult {
  Matrix u;      // m x r, orthonormal columns
  Vector sigma;  // length r, nonincreasing, nonnegative
  Matrix v;      // n x r, orthonormal columns
  double rank_tolerance = 0.0;

  std::size_t numerical_rank() const {
    return static_cast<std::size_t>(std::count_if(
        sigma.begin(), sigma.end(), [&](double s) { return s > rank_tolerance; }));
  }

  Matrix reconstruct() const {
    Matrix us = u;
    for (std::size_t i = 0; i < us.rows(); ++i)
      for (std::size_t j = 0; j < us.cols(); ++j) us(i, j) *= sigma[j];
    return matmul(us, transpose(v));
  }
};

struct EigResult {
  Matrix vectors;  // columns are unit eigenvectors
  Vector values;   // descending
};

struct SvdOptions {
  int max_sweeps = 100;
  double convergence_threshold = 1e-12;
  double rank_tolerance_factor = 1e-10;
};

namespace detail {

// Flip columns so each column of `primary` has a nonnegative entry of largest
// magnitude (first such entry on ties); mirror flips into `secondary`.
inline void canonicalize_signs(Matrix& primary, Matrix* secondary) {
  for (std::size_t j = 0; j < primary.cols(); ++j) {
    std::size_t best = 0;
    double best_abs = -1.0;
    for (std::size_t i = 0; i < primary.rows(); ++i) {
      const double a = std::abs(primary(i, j));
      if (a > best_abs) {
        best_abs = a;
        best = i;
      }
    }
    if (primary.rows() && primary(best, j) < 0.0) {
      for (std::size_t i = 0; i < primary.rows(); ++i) primary(i, j) = -primary(i, j);
      if (secondary)
        for (std::size_t i = 0; i < secondary->rows(); ++i) (*secondary)(i, j) = -(*secondary)(i, j);
    }
  }
}

// Replace the columns flagged in `missing` by unit vectors orthogonal to all
// other columns (Gram-Schmidt against the standard basis).
inline void complete_orthonormal(Matrix& q, const std::vector<bool>& missing) {
  const std::size_t m = q.rows();
  std::size_t candidate = 0;
  for (std::size_t j = 0; j < q.cols(); ++j) {
    if (!missing[j]) continue;
    bool placed = false;
    while (!placed && candidate < m) {
      Vector e(m, 0.0);
      e[candidate++] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t c = 0; c < q.cols(); ++c) {
          if (c == j || (missing[c] && c > j)) continue;
          double proj = 0.0;
          for (std::size_t i = 0; i < m; ++i) proj += q(i, c) * e[i];
          for (std::size_t i = 0; i < m; ++i) e[i] -= proj * q(i, c);
        }
      }
      const double nrm = norm2(e);
      if (nrm > 1e-8) {
        for (std::size_t i = 0; i < m; ++i) q(i, j) = e[i] / nrm;
        placed = true;
      }
    }
    if (!placed) throw Error("complete_orthonormal: could not complete basis");
  }
}

inline SvdResult svd_tall(const Matrix& a, const SvdOptions& opt) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  // Work column-major for cache-friendly column rotations.
  std::vector<Vector> w(n, Vector(m));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) w[j][i] = a(i, j);
  std::vector<Vector> vcols(n, Vector(n, 0.0));
  for (std::size_t j = 0; j < n; ++j) vcols[j][j] = 1.0;

  double total_sq = 0.0;
  for (double x : a.data()) total_sq += x * x;
  // Columns whose energy is at rounding level relative to A are not rotated.
  const double floor_sq = total_sq * 1e-30;
  bool converged = n < 2;
  double worst = 0.0;
  for (int sweep = 0; sweep < opt.max_sweeps && !converged; ++sweep) {
    worst = 0.0;
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        Vector& wp = w[p];
        Vector& wq = w[q];
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += wp[i] * wp[i];
          beta += wq[i] * wq[i];
          gamma += wp[i] * wq[i];
        }
        if (gamma == 0.0 || alpha <= floor_sq || beta <= floor_sq) continue;
        const double scale = std::sqrt(alpha * beta);
        const double rel = std::abs(gamma) / scale;
        if (!(scale > 0.0) || rel <= opt.convergence_threshold) continue;
        worst = std::max(worst, rel);
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double xp = wp[i], xq = wq[i];
          wp[i] = c * xp - s * xq;
          wq[i] = s * xp + c * xq;
        }
        Vector& vp = vcols[p];
        Vector& vq = vcols[q];
        for (std::size_t i = 0; i < n; ++i) {
          const double xp = vp[i], xq = vq[i];
          vp[i] = c * xp - s * xq;
          vq[i] = s * xp + c * xq;
        }
      }
    }
    converged = !rotated;
  }
  if (!converged) throw ConvergenceError("svd: one-sided Jacobi did not converge", worst);

  Vector sig(n);
  for (std::size_t j = 0; j < n; ++j) sig[j] = norm2(w[j]);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sig[x] > sig[y]; });

  SvdResult r;
  r.u = Matrix(m, n);
  r.v = Matrix(n, n);
  r.sigma.resize(n);
  const double smax = n ? sig[order[0]] : 0.0;
  const double tiny = std::max(smax, 1.0) * 1e-300;
  std::vector<bool> missing(n, false);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    r.sigma[k] = sig[j];
    for (std::size_t i = 0; i < n; ++i) r.v(i, k) = vcols[j][i];
    if (sig[j] > tiny && sig[j] > smax * 1e-15) {
      for (std::size_t i = 0; i < m; ++i) r.u(i, k) = w[j][i] / sig[j];
    } else {
      missing[k] = true;
    }
  }
  if (std::find(missing.begin(), missing.end(), true) != missing.end())
    complete_orthonormal(r.u, missing);
  r.rank_tolerance = opt.rank_tolerance_factor * smax;
  canonicalize_signs(r.u, &r.v);
  return r;
}

}  // namespace detail

// Thin SVD by one-sided Jacobi rotations. Left singular vectors are
// sign-canonicalized; ties in sigma keep original column order.
inline SvdResult svd(const Matrix& a, std::optional<std::size_t> top_k = std::nullopt,
                     const SvdOptions& opt = {}) {
  a.check_finite();
  const std::size_t r = std::min(a.rows(), a.cols());
  if (top_k && *top_k > r)
    throw ShapeError("svd: top_k " + std::to_string(*top_k) + " exceeds min dimension " +
                     std::to_string(r));
  SvdResult res;
  if (r == 0) return res;
  if (a.rows() >= a.cols()) {
    res = detail::svd_tall(a, opt);
  } else {
    SvdResult t = detail::svd_tall(transpose(a), opt);
    res.u = std::move(t.v);
    res.v = std::move(t.u);
    res.sigma = std::move(t.sigma);
    res.rank_tolerance = t.rank_tolerance;
    detail::canonicalize_signs(res.u, &res.v);
  }
  if (top_k && *top_k < r) {
    res.u = res.u.leading_cols(*top_k);
    res.v = res.v.leading_cols(*top_k);
    res.sigma.resize(*top_k);
  }
  return res;
}

inline bool is_symmetric(const Matrix& a, double tol = 1e-12) {
  if (!a.square()) return false;
  double scale = 0.0;
  for (double x : a.data()) scale = std::max(scale, std::abs(x));
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = i + 1; j < a.cols(); ++j)
      if (std::abs(a(i, j) - a(j, i)) > tol * std::max(1.0, scale)) return false;
  return true;
}

namespace detail {

inline EigResult sort_eig(Vector vals, const Matrix& vecs) {
  const std::size_t n = vals.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return vals[x] > vals[y]; });
  EigResult r;
  r.values.resize(n);
  r.vectors = Matrix(vecs.rows(), n);
  for (std::size_t k = 0; k < n; ++k) {
    r.values[k] = vals[order[k]];
    for (std::size_t i = 0; i < vecs.rows(); ++i) r.vectors(i, k) = vecs(i, order[k]);
  }
  canonicalize_signs(r.vectors, nullptr);
  return r;
}

// Cyclic Jacobi for symmetric matrices.
inline EigResult eig_symmetric(const Matrix& a_in) {
  const std::size_t n = a_in.rows();
  Matrix a = a_in;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) a(i, j) = a(j, i) = 0.5 * (a(i, j) + a(j, i));
  Matrix v = Matrix::identity(n);
  const double total = std::max(frobenius_norm(a), 1e-300);
  double off = 0.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += 2.0 * a(i, j) * a(i, j);
    if (std::sqrt(off) <= 1e-15 * total) {
      return sort_eig(a.diag(), v);
    }
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  throw ConvergenceError("eig_real: symmetric Jacobi did not converge", std::sqrt(off) / total);
}

// Eigenvalues of a general real matrix with real spectrum: Hessenberg
// reduction followed by Wilkinson-shifted QR with deflation. A trailing 2x2
// block with complex eigenvalues is reported as SpectrumError.
inline Vector real_eigenvalues_hessenberg_qr(const Matrix& a_in, double imag_tol) {
  const std::size_t n = a_in.rows();
  Matrix h = a_in;
  // Householder reduction to upper Hessenberg form.
  for (std::size_t k = 0; k + 2 < n; ++k) {
    Vector x(n - k - 1);
    for (std::size_t i = k + 1; i < n; ++i) x[i - k - 1] = h(i, k);
    const double alpha = norm2(x);
    if (alpha < 1e-300) continue;
    x[0] += (x[0] >= 0.0 ? alpha : -alpha);
    const double vn = norm2(x);
    for (double& xi : x) xi /= vn;
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t i = k + 1; i < n; ++i) s += x[i - k - 1] * h(i, j);
      for (std::size_t i = k + 1; i < n; ++i) h(i, j) -= 2.0 * x[i - k - 1] * s;
    }
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = k + 1; j < n; ++j) s += h(i, j) * x[j - k - 1];
      for (std::size_t j = k + 1; j < n; ++j) h(i, j) -= 2.0 * s * x[j - k - 1];
    }
  }
  Vector vals;
  vals.reserve(n);
  double anorm = std::max(frobenius_norm(h), 1e-300);
  std::size_t hi = n;  // active block is [0, hi)
  int iter = 0;
  while (hi > 0) {
    if (hi == 1) {
      vals.push_back(h(0, 0));
      hi = 0;
      break;
    }
    // Find a small subdiagonal to deflate at.
    std::size_t lo = hi - 1;
    while (lo > 0) {
      const double s = std::abs(h(lo - 1, lo - 1)) + std::abs(h(lo, lo));
      if (std::abs(h(lo, lo - 1)) <= 1e-15 * (s > 0.0 ? s : anorm)) {
        h(lo, lo - 1) = 0.0;
        break;
      }
      --lo;
    }
    if (lo == hi - 1) {
      vals.push_back(h(hi - 1, hi - 1));
      --hi;
      iter = 0;
      continue;
    }
    const double a11 = h(hi - 2, hi - 2), a12 = h(hi - 2, hi - 1);
    const double a21 = h(hi - 1, hi - 2), a22 = h(hi - 1, hi - 1);
    const double tr = a11 + a22;
    const double det = a11 * a22 - a12 * a21;
    const double disc = tr * tr / 4.0 - det;
    if (lo == hi - 2) {
      // Isolated 2x2 block: solve its characteristic polynomial directly.
      if (disc < 0.0) {
        const double im = std::sqrt(-disc);
        if (im > imag_tol * std::max(1.0, std::abs(tr)))
          throw SpectrumError("eig_real: complex eigenvalue pair with imaginary part " + std::to_string(im));
        vals.push_back(tr / 2.0);
        vals.push_back(tr / 2.0);
      } else {
        const double r = std::sqrt(disc);
        vals.push_back(tr / 2.0 + r);
        vals.push_back(tr / 2.0 - r);
      }
      hi -= 2;
      iter = 0;
      continue;
    }
    if (iter > 300 && disc < 0.0 &&
        std::sqrt(-disc) > imag_tol * std::max(1.0, std::abs(tr)))
      throw SpectrumError("eig_real: trailing block has complex eigenvalues");
    // Wilkinson shift: eigenvalue of trailing 2x2 closest to a22.
    double mu = a22;
    if (disc >= 0.0) {
      const double r = std::sqrt(disc);
      const double l1 = tr / 2.0 + r, l2 = tr / 2.0 - r;
      mu = std::abs(l1 - a22) < std::abs(l2 - a22) ? l1 : l2;
    } else {
      mu = tr / 2.0;
    }
    if (iter > 0 && iter % 20 == 0) mu += 0.75 * std::abs(h(hi - 1, hi - 2));
    // QR step on block [lo, hi) via Givens rotations.
    std::vector<double> cs(hi), sn(hi);
    for (std::size_t i = lo; i < hi; ++i) h(i, i) -= mu;
    for (std::size_t k = lo; k + 1 < hi; ++k) {
      const double x = h(k, k), y = h(k + 1, k);
      const double r = std::hypot(x, y);
      const double c = r > 0.0 ? x / r : 1.0;
      const double s = r > 0.0 ? y / r : 0.0;
      cs[k] = c;
      sn[k] = s;
      for (std::size_t j = k; j < n; ++j) {
        const double t1 = h(k, j), t2 = h(k + 1, j);
        h(k, j) = c * t1 + s * t2;
        h(k + 1, j) = -s * t1 + c * t2;
      }
    }
    for (std::size_t k = lo; k + 1 < hi; ++k) {
      const double c = cs[k], s = sn[k];
      for (std::size_t i = 0; i <= std::min(k + 2, hi - 1); ++i) {
        const double t1 = h(i, k), t2 = h(i, k + 1);
        h(i, k) = c * t1 + s * t2;
        h(i, k + 1) = -s * t1 + c * t2;
      }
    }
    for (std::size_t i = lo; i < hi; ++i) h(i, i) += mu;
    ++iter;
    if (iter > 1000) throw ConvergenceError("eig_real: QR iteration did not converge", std::abs(h(hi - 1, hi - 2)));
  }
  return vals;
}

}  // namespace detail

// Real eigendecomposition. Symmetric inputs use Jacobi; general inputs use
// shifted QR for the spectrum and null vectors of (A - lambda I) for the
// eigenvectors. Fails with SpectrumError if the spectrum is not real.
inline EigResult eig_real(const Matrix& a, double imag_tol = 1e-8) {
  a.check_finite();
  if (!a.square()) throw ShapeError("eig_real: matrix must be square, got " + shape_str(a.rows(), a.cols()));
  const std::size_t n = a.rows();
  if (n == 0) return {};
  if (is_symmetric(a)) return detail::eig_symmetric(a);

  Vector vals = detail::real_eigenvalues_hessenberg_qr(a, imag_tol);
  std::sort(vals.begin(), vals.end(), std::greater<>());
  // Polish eigenvalues and extract vectors: group numerically equal values and
  // take the corresponding number of trailing right singular vectors.
  Matrix vecs(n, n);
  const double scale = std::max(1.0, frobenius_norm(a));
  std::size_t k = 0;
  while (k < n) {
    std::size_t g = k + 1;
    while (g < n && std::abs(vals[g] - vals[k]) <= 1e-9 * scale) ++g;
    Matrix shifted = a;
    for (std::size_t i = 0; i < n; ++i) shifted(i, i) -= vals[k];
    SvdResult s = svd(shifted);
    for (std::size_t c = 0; c < g - k; ++c) {
      const std::size_t col = n - 1 - c;
      for (std::size_t i = 0; i < n; ++i) vecs(i, k + c) = s.v(i, col);
    }
    k = g;
  }
  EigResult r;
  r.values = vals;
  r.vectors = vecs;
  detail::canonicalize_signs(r.vectors, nullptr);
  return r;
}

// Moore-Penrose pseudo-inverse; singular values <= tol are treated as zero.
// A negative tol selects the SVD's default rank tolerance.
inline Matrix pinv(const Matrix& a, double tol = -1.0) {
  SvdResult s = svd(a);
  const double cut = tol < 0.0 ? s.rank_tolerance : tol;
  Matrix out(a.cols(), a.rows());
  for (std::size_t k = 0; k < s.sigma.size(); ++k) {
    if (!(s.sigma[k] > cut)) continue;
    const double inv = 1.0 / s.sigma[k];
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double vik = s.v(i, k) * inv;
      if (vik == 0.0) continue;
      for (std::size_t j = 0; j < a.rows(); ++j) out(i, j) += vik * s.u(j, k);
    }
  }
  return out;
}

// Gauss-Jordan inverse with partial pivoting.
inline Matrix inverse(const Matrix& a) {
  if (!a.square()) throw ShapeError("inverse: matrix must be square, got " + shape_str(a.rows(), a.cols()));
  const std::size_t n = a.rows();
  Matrix m = a;
  Matrix inv = Matrix::identity(n);
  const double scale = std::max(1e-300, frobenius_norm(a));
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(m(r, c)) > std::abs(m(piv, c))) piv = r;
    if (std::abs(m(piv, c)) <= 1e-14 * scale) throw RankError("inverse: matrix is singular to working precision");
    if (piv != c) {
      for (std::size_t j = 0; j < n; ++j) {
        std::swap(m(c, j), m(piv, j));
        std::swap(inv(c, j), inv(piv, j));
      }
    }
    const double d = m(c, c);
    for (std::size_t j = 0; j < n; ++j) {
      m(c, j) /= d;
      inv(c, j) /= d;
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (r == c) continue;
      const double f = m(r, c);
      if (f == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) {
        m(r, j) -= f * m(c, j);
        inv(r, j) -= f * inv(c, j);
      }
    }
  }
  return inv;
}

// Orthonormal basis for the column space (columns with sigma above the
// default rank tolerance).
inline Matrix orthonormal_basis(const Matrix& a) {
  SvdResult s = svd(a);
  return s.u.leading_cols(s.numerical_rank());
}

// Principal angles (radians, ascending) between the column spans of a and b.
// Computed from sines, which stay accurate for small angles.
inline Vector principal_angles(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows())
    throw ShapeError("principal_angles: row mismatch " + shape_str(a.rows(), a.cols()) + " vs " +
                     shape_str(b.rows(), b.cols()));
  Matrix qa = orthonormal_basis(a);
  Matrix qb = orthonormal_basis(b);
  if (qa.cols() < qb.cols()) std::swap(qa, qb);
  // Residual of qb after projecting onto span(qa).
  Matrix resid = qb - matmul(qa, matmul(transpose(qa), qb));
  SvdResult s = svd(resid);
  Vector angles(s.sigma.size());
  for (std::size_t i = 0; i < angles.size(); ++i) angles[i] = std::asin(std::min(1.0, s.sigma[i]));
  std::sort(angles.begin(), angles.end());
  return angles;
}

inline double max_principal_angle(const Matrix& a, const Matrix& b) {
  Vector ang = principal_angles(a, b);
  return ang.empty() ? 0.0 : ang.back();
}

// Angle between lines spanned by u and v (sign-insensitive), accurate near 0.
inline double line_angle(std::span<const double> u, std::span<const double> v) {
  const double nu = norm2(u), nv = norm2(v);
  if (nu == 0.0 || nv == 0.0) throw Error("line_angle: zero vector");
  double dminus = 0.0, dplus = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double a = u[i] / nu, b = v[i] / nv;
    dminus += (a - b) * (a - b);
    dplus += (a + b) * (a + b);
  }
  const double same = 2.0 * std::atan2(std::sqrt(dminus), std::sqrt(dplus));
  const double flip = 2.0 * std::atan2(std::sqrt(dplus), std::sqrt(dminus));
  return std::min(same, flip);
}

}  // namespace derex
