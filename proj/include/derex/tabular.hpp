#pragma once

// Exact tabular pipeline: empirical transition-count matrix, its SVD, state
// representations, pseudo-count bonuses, and numerical checks of the
// supporting identities.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "derex/error.hpp"
#include "derex/fourrooms.hpp"
#include "derex/linalg.hpp"
#include "derex/matrix.hpp"
#include "derex/stats.hpp"

namespace derex {

// (1/n) X^T Y over the 121-cell one-hot space: entry [i,j] is the fraction of
// tuples going i -> j.
inline Matrix build_a_n(const TransitionDataset& ds) {
  if (ds.tuples.empty()) throw Error("build_a_n: empty dataset");
  if (ds.encoder != Encoder::onehot) throw Error("build_a_n: requires a one-hot (tabular) dataset");
  Matrix a(kNumCells, kNumCells);
  for (const auto& t : ds.tuples) a(t.s, t.s_next) += 1.0;
  a *= 1.0 / static_cast<double>(ds.tuples.size());
  return a;
}

// D P for a distribution d and row-stochastic P of the same size.
inline Matrix weight_rows(std::span<const double> d, const Matrix& p) {
  if (d.size() != p.rows()) throw ShapeError("weight_rows: length mismatch");
  Matrix out = p;
  for (std::size_t i = 0; i < p.rows(); ++i)
    for (double& x : out.row(i)) x *= d[i];
  return out;
}

struct TabularDecomposition {
  Matrix a_n;
  SvdResult svd;  // full
  std::size_t k = 0;
  Matrix rep;     // rows are state representations (top-k left singular vectors)
  Vector lambda;  // squared top-k singular values
};

inline std::string format_values(std::span<const double> v, std::size_t limit = 12) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size() && i < limit; ++i) os << (i ? ", " : "") << v[i];
  if (v.size() > limit) os << ", ...";
  return os.str();
}

inline TabularDecomposition decompose(const Matrix& a_n, std::size_t k) {
  TabularDecomposition dec;
  dec.a_n = a_n;
  dec.svd = svd(a_n);
  const std::size_t rank = dec.svd.numerical_rank();
  if (k == 0 || k > rank)
    throw RankError("decompose: k = " + std::to_string(k) + " but numerical rank is " + std::to_string(rank) +
                    " (singular values: " + format_values(dec.svd.sigma) + ")");
  dec.k = k;
  dec.rep = dec.svd.u.leading_cols(k);
  dec.lambda.resize(k);
  for (std::size_t i = 0; i < k; ++i) dec.lambda[i] = dec.svd.sigma[i] * dec.svd.sigma[i];
  return dec;
}

// Experiment-mode bonus: squared norm of the top-k representation weighted by
// the inverse squared singular values (clamped at 1e-12).
inline double bonus(const TabularDecomposition& dec, std::size_t s) {
  return weighted_norm_sq(dec.rep.row(s), dec.lambda);
}

// Full-decomposition bonus: sum over every singular direction above the rank
// tolerance. Equals the diagonal of (A A^T)^+.
inline double exact_bonus(const TabularDecomposition& dec, std::size_t s) {
  double b = 0.0;
  for (std::size_t i = 0; i < dec.svd.sigma.size(); ++i) {
    const double sg = dec.svd.sigma[i];
    if (!(sg > dec.svd.rank_tolerance)) continue;
    b += dec.svd.u(s, i) * dec.svd.u(s, i) / (sg * sg);
  }
  return b;
}

// ---- random chains used by the checks --------------------------------------

// Symmetric row-stochastic matrix: random symmetric off-diagonal weights,
// scaled so no row exceeds one, with the remainder on the diagonal.
inline Matrix random_symmetric_stochastic(std::size_t n, Rng& rng) {
  Matrix w(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) w(i, j) = w(j, i) = uniform01(rng);
  double max_row = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (double x : w.row(i)) s += x;
    max_row = std::max(max_row, s);
  }
  const double c = max_row * (1.0 + uniform01(rng));
  Matrix p(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) {
        p(i, j) = c > 0.0 ? w(i, j) / c : 0.0;
        s += p(i, j);
      }
    p(i, i) = 1.0 - s;
  }
  return p;
}

// Ergodic chain with P P^T comfortably invertible: a random permutation
// (weight 0.6) mixed with a dense positive stochastic matrix (weight 0.4).
// Purely dense random rows are nearly rank one, which makes (P P^T)^{-1}
// badly conditioned.
inline Matrix random_ergodic_chain(std::size_t n, Rng& rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = n; i-- > 1;) std::swap(perm[i], perm[uniform_index(rng, i + 1)]);
  Matrix p(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += p(i, j) = 0.05 + uniform01(rng);
    for (std::size_t j = 0; j < n; ++j) p(i, j) *= 0.4 / s;
    p(i, perm[i]) += 0.6;
  }
  return p;
}

inline Vector random_distribution(std::size_t n, Rng& rng) {
  Vector d(n);
  double s = 0.0;
  for (double& x : d) s += x = 0.1 + uniform01(rng);
  for (double& x : d) x /= s;
  return d;
}

// ---- value identity -------------------------------------------------------

struct ValueCheck {
  double gamma = 0.0;
  Matrix resolvent;
  Vector reward;
  Vector value;
  double fixed_point_residual = 0.0;  // max |v - (R + gamma P v)|
};

inline ValueCheck value_check(const Matrix& p, std::span<const double> reward, double gamma) {
  if (!(gamma >= 0.0 && gamma < 1.0)) throw Error("value_check: gamma must lie in [0, 1)");
  ValueCheck vc;
  vc.gamma = gamma;
  Matrix m = Matrix::identity(p.rows()) - gamma * p;
  vc.resolvent = inverse(m);
  vc.reward.assign(reward.begin(), reward.end());
  vc.value = matvec(vc.resolvent, reward);
  const Vector pv = matvec(p, vc.value);
  for (std::size_t i = 0; i < pv.size(); ++i)
    vc.fixed_point_residual =
        std::max(vc.fixed_point_residual, std::abs(vc.value[i] - reward[i] - gamma * pv[i]));
  return vc;
}

// ---- shared eigenvectors of P and its resolvent ---------------------------

struct EigenPairCheck {
  double p_eigenvalue = 0.0;
  double mapped = 0.0;               // 1 / (1 - gamma * p_eigenvalue)
  double resolvent_eigenvalue = 0.0;
  double angle = 0.0;                // radians between matching eigenspaces
};

struct EigenAgreementReport {
  std::vector<EigenPairCheck> pairs;  // top-k, descending
  bool degenerate = false;            // resolvent spectrum all equal: ordering not compared
  bool ordering_agrees = true;
  double max_angle = 0.0;
  double max_value_error = 0.0;       // |mapped - resolvent eigenvalue| relative
};

namespace detail {
// Index ranges [begin, end) of eigenvalues equal within `gap`.
inline std::vector<std::pair<std::size_t, std::size_t>> clusters(const Vector& vals, double gap) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t i = 0;
  while (i < vals.size()) {
    std::size_t j = i + 1;
    while (j < vals.size() && std::abs(vals[j] - vals[j - 1]) <= gap) ++j;
    out.push_back({i, j});
    i = j;
  }
  return out;
}

inline Matrix column_block(const Matrix& m, std::size_t b, std::size_t e) {
  Matrix out(m.rows(), e - b);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = b; j < e; ++j) out(i, j - b) = m(i, j);
  return out;
}
}  // namespace detail

// Eigendecomposes P and (I - gamma P)^{-1} independently and compares the top-k
// eigenvectors and the eigenvalue map lambda -> 1/(1 - gamma lambda).
// Repeated eigenvalues (within 1e-8) are compared as subspaces.
inline EigenAgreementReport verify_eigen_agreement(const Matrix& p, double gamma, std::size_t k) {
  if (!p.square()) throw ShapeError("verify_eigen_agreement: P must be square");
  if (!(gamma >= 0.0 && gamma < 1.0)) throw Error("verify_eigen_agreement: gamma must lie in [0, 1)");
  const std::size_t n = p.rows();
  if (k == 0 || k > n) throw Error("verify_eigen_agreement: k must lie in [1, n]");
  const EigResult ep = eig_real(p);
  const Matrix resolvent = inverse(Matrix::identity(n) - gamma * p);
  const EigResult er = eig_real(resolvent);

  EigenAgreementReport rep;
  constexpr double kGap = 1e-8;
  const double rscale = std::max(1.0, std::abs(er.values.front()));
  rep.degenerate = std::abs(er.values.front() - er.values.back()) <= kGap * rscale;

  const auto pc = detail::clusters(ep.values, kGap);
  std::vector<double> angle_of(n, 0.0);
  if (!rep.degenerate) {
    for (auto [b, e] : pc) {
      if (b >= k) break;
      const double ang = e - b == 1 ? line_angle(ep.vectors.col(b), er.vectors.col(b))
                                    : max_principal_angle(detail::column_block(ep.vectors, b, e),
                                                          detail::column_block(er.vectors, b, e));
      for (std::size_t i = b; i < e; ++i) angle_of[i] = ang;
    }
  }
  for (std::size_t i = 0; i < k; ++i) {
    EigenPairCheck c;
    c.p_eigenvalue = ep.values[i];
    c.mapped = 1.0 / (1.0 - gamma * ep.values[i]);
    c.resolvent_eigenvalue = er.values[i];
    c.angle = angle_of[i];
    rep.max_angle = std::max(rep.max_angle, c.angle);
    rep.max_value_error =
        std::max(rep.max_value_error, std::abs(c.mapped - c.resolvent_eigenvalue) / std::max(1.0, std::abs(c.mapped)));
    rep.pairs.push_back(c);
  }
  if (!rep.degenerate) {
    // The map must preserve P's descending order, and the resolvent's own
    // descending spectrum must line up with the mapped values.
    Vector mapped(n);
    for (std::size_t i = 0; i < n; ++i) mapped[i] = 1.0 / (1.0 - gamma * ep.values[i]);
    for (std::size_t i = 1; i < n; ++i)
      if (mapped[i] > mapped[i - 1] + kGap * std::max(1.0, std::abs(mapped[i - 1]))) rep.ordering_agrees = false;
    for (std::size_t i = 0; i < k; ++i)
      if (std::abs(mapped[i] - er.values[i]) > 1e-6 * std::max(1.0, std::abs(mapped[i]))) rep.ordering_agrees = false;
  }
  return rep;
}

// ---- consistency of the count estimator ----------------------------------

// Expected source distribution of episodic uniform-policy rollouts from the
// start cell, over the 121 cells.
inline Vector rollout_visitation(const FourRooms& env, std::size_t horizon = kEpisodeHorizon) {
  const Matrix p = exact_transition_matrix(env);
  return embed_cells(env, expected_visitation(p, env.dense_index(FourRooms::start_cell()), horizon));
}

struct UnbiasednessReport {
  std::size_t seeds = 0;
  std::size_t n = 0;
  std::size_t support_entries = 0;  // entries with nonzero expectation
  std::size_t support_within = 0;   // of those, within 3 standard errors
  std::size_t total_entries = 0;
  std::size_t total_within = 0;
  double max_z = 0.0;
  double fraction_support() const {
    return support_entries ? static_cast<double>(support_within) / static_cast<double>(support_entries) : 1.0;
  }
  double fraction_total() const {
    return total_entries ? static_cast<double>(total_within) / static_cast<double>(total_entries) : 1.0;
  }
};

// Averages A_n over seeds with sources drawn i.i.d. from `d` (121 cells) and
// compares entrywise against D P. Under i.i.d. sampling each count is
// binomial(n, d_i P_ij), so its standard error is exact.
inline UnbiasednessReport verify_unbiased(const FourRooms& env, std::span<const double> d, std::size_t n,
                                          std::size_t seeds, std::uint64_t base_seed) {
  const Matrix expected = weight_rows(d, embed_cells(env, exact_transition_matrix(env)));
  Matrix mean_a(kNumCells, kNumCells);
  CollectOptions opt;
  opt.iid_sources = Vector(d.begin(), d.end());
  for (std::size_t s = 0; s < seeds; ++s) {
    const auto ds = collect_transitions(env, n, derive_seed(base_seed, s), Encoder::onehot, opt);
    mean_a += build_a_n(ds);
  }
  mean_a *= 1.0 / static_cast<double>(seeds);
  UnbiasednessReport r;
  r.seeds = seeds;
  r.n = n;
  for (int i = 0; i < kNumCells; ++i)
    for (int j = 0; j < kNumCells; ++j) {
      const double q = expected(i, j);
      const double se = std::sqrt(q * (1.0 - q) / static_cast<double>(n) / static_cast<double>(seeds));
      const double diff = std::abs(mean_a(i, j) - q);
      const bool ok = se > 0.0 ? diff <= 3.0 * se : diff == 0.0;
      if (se > 0.0) r.max_z = std::max(r.max_z, diff / se);
      ++r.total_entries;
      r.total_within += ok;
      if (q > 0.0) {
        ++r.support_entries;
        r.support_within += ok;
      }
    }
  return r;
}

struct ConsistencyReport {
  std::vector<std::size_t> n_schedule;
  std::vector<std::vector<double>> errors;  // [seed][n index]: max |A_n - D P|
  std::vector<double> mean_error;           // averaged over seeds
  double slope = 0.0;                       // OLS of log mean error on log n
  std::size_t seeds_decreasing = 0;         // seeds with error(last) < error(first)
};

// Produces an estimate of the expected matrix from n samples under a seed.
using CountEstimator = std::function<Matrix(std::size_t n, std::uint64_t seed)>;

// Max-entry error of an estimator against its expectation as n grows.
inline ConsistencyReport verify_consistency(const CountEstimator& estimate, const Matrix& expected,
                                            const std::vector<std::size_t>& n_schedule, std::size_t seeds,
                                            std::uint64_t base_seed) {
  ConsistencyReport r;
  r.n_schedule = n_schedule;
  r.mean_error.assign(n_schedule.size(), 0.0);
  for (std::size_t s = 0; s < seeds; ++s) {
    std::vector<double> errs;
    for (std::size_t k = 0; k < n_schedule.size(); ++k) {
      const Matrix diff = estimate(n_schedule[k], derive_seed(derive_seed(base_seed, s), k)) - expected;
      double e = 0.0;
      for (double x : diff.data()) e = std::max(e, std::abs(x));
      errs.push_back(e);
      r.mean_error[k] += e / static_cast<double>(seeds);
    }
    r.seeds_decreasing += errs.back() < errs.front();
    r.errors.push_back(std::move(errs));
  }
  if (n_schedule.size() >= 2 && r.mean_error.back() > 0.0) {
    std::vector<double> lx, ly;
    for (std::size_t k = 0; k < n_schedule.size(); ++k) {
      lx.push_back(std::log(static_cast<double>(n_schedule[k])));
      ly.push_back(std::log(std::max(r.mean_error[k], 1e-300)));
    }
    r.slope = ols_slope(lx, ly);
  }
  return r;
}

// Four-rooms under the uniform policy with sources drawn i.i.d. from d.
inline ConsistencyReport verify_consistency(const FourRooms& env, std::span<const double> d,
                                            const std::vector<std::size_t>& n_schedule, std::size_t seeds,
                                            std::uint64_t base_seed) {
  const Matrix expected = weight_rows(d, embed_cells(env, exact_transition_matrix(env)));
  CollectOptions opt;
  opt.iid_sources = Vector(d.begin(), d.end());
  auto estimate = [&](std::size_t n, std::uint64_t seed) {
    return build_a_n(collect_transitions(env, n, seed, Encoder::onehot, opt));
  };
  return verify_consistency(estimate, expected, n_schedule, seeds, base_seed);
}

// Count matrix of a generic chain: sources i.i.d. from d, successors from P.
inline Matrix sample_count_matrix(const Matrix& p, std::span<const double> d, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Matrix a(p.rows(), p.cols());
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t s = sample_categorical(rng, d);
    a(s, sample_categorical(rng, p.row(s))) += 1.0;
  }
  a *= 1.0 / static_cast<double>(n);
  return a;
}

// ---- bonus identity --------------------------------------------------------

struct BonusIdentityReport {
  Vector bonus;          // full-decomposition bonus per state
  Vector scaled;         // bonus * d^2 (the state-dependent numerator)
  Vector oracle;         // diag((P P^T)^{-1})
  double max_abs_error = 0.0;
};

// Builds D P exactly, decomposes it, and compares bonus(s) d(s)^2 to the
// diagonal of (P P^T)^{-1}.
inline BonusIdentityReport verify_bonus_identity(const Matrix& p, std::span<const double> d) {
  const std::size_t n = p.rows();
  const Matrix a = weight_rows(d, p);
  const TabularDecomposition dec = decompose(a, n);
  const Matrix ppt_inv = inverse(matmul(p, transpose(p)));
  BonusIdentityReport r;
  for (std::size_t s = 0; s < n; ++s) {
    const double b = exact_bonus(dec, s);
    r.bonus.push_back(b);
    r.scaled.push_back(b * d[s] * d[s]);
    r.oracle.push_back(ppt_inv(s, s));
    r.max_abs_error = std::max(r.max_abs_error, std::abs(r.scaled.back() - r.oracle.back()));
  }
  return r;
}

}  // namespace derex
