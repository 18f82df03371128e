#pragma once

// Function-approximation objective: cross-covariance of two encoders, its
// diagonal reward and off-diagonal penalty, the double-sampled unbiased
// penalty, a running diagonal estimate, and the resulting bonus.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <span>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "derex/autodiff.hpp"
#include "derex/error.hpp"
#include "derex/fourrooms.hpp"
#include "derex/layers.hpp"
#include "derex/matrix.hpp"
#include "derex/stats.hpp"

namespace derex {

using ad::Tensor;
using ad::Var;

// ---- plain-matrix forms ---------------------------------------------------

inline Matrix sigma_of(const Matrix& f_out, const Matrix& g_out) {
  if (f_out.rows() != g_out.rows() || f_out.cols() != g_out.cols())
    throw ShapeError("sigma_of: f " + shape_str(f_out.rows(), f_out.cols()) + " vs g " +
                     shape_str(g_out.rows(), g_out.cols()));
  if (f_out.rows() == 0) throw Error("sigma_of: empty batch");
  Matrix s = matmul(transpose(f_out), g_out);
  s *= 1.0 / static_cast<double>(f_out.rows());
  return s;
}

inline double l_diag(const Matrix& sigma) {
  if (!sigma.square()) throw ShapeError("l_diag: sigma must be square");
  double s = 0.0;
  for (std::size_t i = 0; i < sigma.rows(); ++i) s += sigma(i, i);
  return s / static_cast<double>(sigma.rows());
}

inline double l_off(const Matrix& sigma) {
  if (!sigma.square()) throw ShapeError("l_off: sigma must be square");
  const std::size_t k = sigma.rows();
  if (k < 2) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j)
      if (i != j) s += sigma(i, j) * sigma(i, j);
  return s / static_cast<double>(k * k - k);
}

// ---- graph forms ----------------------------------------------------------

inline Var sigma_of(const Var& f_out, const Var& g_out) {
  if (f_out->value.shape != g_out->value.shape)
    throw ShapeError("sigma_of: f " + ad::shape_to_string(f_out->value.shape) + " vs g " +
                     ad::shape_to_string(g_out->value.shape));
  const std::size_t b = f_out->value.rows();
  if (b == 0) throw Error("sigma_of: empty batch");
  return ad::scale(ad::matmul_tn(f_out, g_out), 1.0 / static_cast<double>(b));
}

namespace detail {
inline Tensor diag_mask(std::size_t k, bool diagonal) {
  Tensor m({k, k}, diagonal ? 0.0 : 1.0);
  for (std::size_t i = 0; i < k; ++i) m(i, i) = diagonal ? 1.0 : 0.0;
  return m;
}
}  // namespace detail

inline Var l_diag(const Var& sigma) {
  const std::size_t k = sigma->value.rows();
  return ad::scale(ad::sum(ad::mul(sigma, ad::constant(detail::diag_mask(k, true)))), 1.0 / static_cast<double>(k));
}

inline Var l_off(const Var& sigma) {
  const std::size_t k = sigma->value.rows();
  if (k < 2) return ad::scale(ad::sum(sigma), 0.0);
  Var off = ad::mul(sigma, ad::constant(detail::diag_mask(k, false)));
  return ad::scale(ad::sum(ad::square(off)), 1.0 / static_cast<double>(k * k - k));
}

// A mini-batch cross-covariance together with the identity of the draw that
// produced it.
struct SigmaBatch {
  Var sigma;
  std::uint64_t draw_id = 0;
};

// Double-sampled off-diagonal penalty: each factor is paired with a detached
// copy of the other batch's estimate, so the gradient is unbiased when the two
// draws are independent. Independent draws may share examples; passing the
// same draw twice is rejected.
inline Var unbiased_off_loss(const SigmaBatch& a, const SigmaBatch& b) {
  if (a.draw_id == b.draw_id)
    throw Error("unbiased_off_loss: both estimates come from the same draw (id " + std::to_string(a.draw_id) +
                "); the penalty needs two independent batches");
  if (a.sigma->value.shape != b.sigma->value.shape) throw ShapeError("unbiased_off_loss: sigma shape mismatch");
  const std::size_t k = a.sigma->value.rows();
  if (k < 2) return ad::scale(ad::sum(a.sigma), 0.0);
  const Var mask = ad::constant(detail::diag_mask(k, false));
  Var ab = ad::mul(ad::mul(a.sigma, ad::stop_gradient(b.sigma)), mask);
  Var ba = ad::mul(ad::mul(b.sigma, ad::stop_gradient(a.sigma)), mask);
  return ad::scale(ad::add(ad::sum(ab), ad::sum(ba)), 1.0 / static_cast<double>(k * k - k));
}

struct LossBreakdown {
  double l_diag = 0.0;
  double l_off = 0.0;           // biased single-batch penalty, for monitoring
  double unbiased_off = 0.0;    // value of the double-sampled penalty
  double total = 0.0;           // -l_diag + lambda_r * unbiased_off
  double lambda_r = 0.0;
};

struct DerexLoss {
  LossBreakdown breakdown;
  Var total;
  Var sigma_a;
  Var sigma_b;
};

inline DerexLoss derex_loss(const Var& f_a, const Var& g_a, const Var& f_b, const Var& g_b, double lambda_r,
                            std::uint64_t draw_a = 0, std::uint64_t draw_b = 1) {
  DerexLoss out;
  out.sigma_a = sigma_of(f_a, g_a);
  out.sigma_b = sigma_of(f_b, g_b);
  Var diag = l_diag(out.sigma_a);
  Var off = unbiased_off_loss({out.sigma_a, draw_a}, {out.sigma_b, draw_b});
  out.total = lambda_r == 0.0 ? ad::scale(diag, -1.0) : ad::add(ad::scale(diag, -1.0), ad::scale(off, lambda_r));
  out.breakdown.l_diag = diag->value.item();
  out.breakdown.l_off = l_off(out.sigma_a->value.to_matrix());
  out.breakdown.unbiased_off = off->value.item();
  out.breakdown.total = out.total->value.item();
  out.breakdown.lambda_r = lambda_r;
  return out;
}

// ---- exhaustive batch enumeration on a linear model ----------------------

// f(x) = x w_f, g(y) = y w_g over a small dataset of n paired inputs.
struct LinearPairInstance {
  Matrix x, y;
  Matrix w_f, w_g;

  std::size_t n() const { return x.rows(); }

  // 3 points, 2 input features, 2 output features.
  static LinearPairInstance small() {
    return {Matrix{{1.0, 0.0}, {0.0, 1.0}, {1.0, 1.0}}, Matrix{{0.5, 1.0}, {1.0, -1.0}, {2.0, 0.3}},
            Matrix{{1.0, 0.2}, {0.3, -0.5}}, Matrix{{0.7, 0.1}, {-0.4, 0.9}}};
  }
};

struct WeightGrads {
  Matrix w_f, w_g;

  WeightGrads& operator+=(const WeightGrads& o) {
    w_f += o.w_f;
    w_g += o.w_g;
    return *this;
  }
  WeightGrads& operator*=(double s) {
    w_f *= s;
    w_g *= s;
    return *this;
  }
};

inline double max_abs_diff(const WeightGrads& a, const WeightGrads& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.w_f.size(); ++i) m = std::max(m, std::abs(a.w_f.data()[i] - b.w_f.data()[i]));
  for (std::size_t i = 0; i < a.w_g.size(); ++i) m = std::max(m, std::abs(a.w_g.data()[i] - b.w_g.data()[i]));
  return m;
}

namespace detail {

struct LinearGraph {
  Var w_f, w_g;
};

inline Var linear_sigma(const LinearPairInstance& inst, const LinearGraph& g, std::span<const std::size_t> rows) {
  Matrix xs(rows.size(), inst.x.cols()), ys(rows.size(), inst.y.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(inst.x.row(rows[i]).begin(), inst.x.row(rows[i]).end(), xs.row(i).begin());
    std::copy(inst.y.row(rows[i]).begin(), inst.y.row(rows[i]).end(), ys.row(i).begin());
  }
  return sigma_of(ad::matmul(ad::constant(Tensor::from_matrix(xs)), g.w_f),
                  ad::matmul(ad::constant(Tensor::from_matrix(ys)), g.w_g));
}

// Gradient of loss(graph) with respect to both weight matrices.
inline WeightGrads weight_grads(const LinearPairInstance& inst, const std::function<Var(const LinearGraph&)>& loss) {
  LinearGraph g{ad::leaf(Tensor::from_matrix(inst.w_f)), ad::leaf(Tensor::from_matrix(inst.w_g))};
  ad::backward(loss(g));
  auto grad_of = [](const Var& w) {
    return w->grad.data.empty() ? Matrix(w->value.rows(), w->value.cols()) : w->grad.to_matrix();
  };
  return {grad_of(g.w_f), grad_of(g.w_g)};
}

inline std::vector<std::vector<std::size_t>> subsets(std::size_t n, std::size_t b) {
  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> cur;
  std::function<void(std::size_t)> rec = [&](std::size_t from) {
    if (cur.size() == b) {
      out.push_back(cur);
      return;
    }
    for (std::size_t i = from; i < n; ++i) {
      cur.push_back(i);
      rec(i + 1);
      cur.pop_back();
    }
  };
  rec(0);
  return out;
}

}  // namespace detail

// Mean mini-batch gradients over every batch (or ordered batch pair) of size b,
// next to the full-data gradients they estimate.
struct EnumerationResult {
  std::size_t batch = 0;
  std::size_t pairs = 0;  // ordered pairs of independently drawn batches
  WeightGrads full_off, full_diag;
  WeightGrads mean_double;    // double-sampled penalty, independent draws
  WeightGrads mean_naive;     // l_off of a single batch
  WeightGrads mean_diag;      // l_diag of a single batch
  WeightGrads mean_disjoint;  // double-sampled, pairs restricted to disjoint batches
  double double_gap = 0.0, naive_gap = 0.0, diag_gap = 0.0;
  double disjoint_gap = -1.0;  // -1 when no disjoint pair exists
};

inline EnumerationResult enumerate_batch_gradients(const LinearPairInstance& inst, std::size_t b) {
  const std::size_t n = inst.n();
  if (b == 0 || b > n) throw Error("enumerate_batch_gradients: batch size must be in [1, n]");
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  EnumerationResult r;
  r.batch = b;
  r.full_off = detail::weight_grads(inst, [&](const detail::LinearGraph& g) { return l_off(detail::linear_sigma(inst, g, all)); });
  r.full_diag = detail::weight_grads(inst, [&](const detail::LinearGraph& g) { return l_diag(detail::linear_sigma(inst, g, all)); });

  const auto sets = detail::subsets(n, b);
  auto zero = [&] { return WeightGrads{Matrix(inst.w_f.rows(), inst.w_f.cols()), Matrix(inst.w_g.rows(), inst.w_g.cols())}; };
  r.mean_double = r.mean_naive = r.mean_diag = r.mean_disjoint = zero();
  std::size_t disjoint = 0;
  for (const auto& a : sets) {
    r.mean_naive += detail::weight_grads(inst, [&](const detail::LinearGraph& g) { return l_off(detail::linear_sigma(inst, g, a)); });
    r.mean_diag += detail::weight_grads(inst, [&](const detail::LinearGraph& g) { return l_diag(detail::linear_sigma(inst, g, a)); });
    for (const auto& bb : sets) {
      const WeightGrads gr = detail::weight_grads(inst, [&](const detail::LinearGraph& g) {
        return unbiased_off_loss({detail::linear_sigma(inst, g, a), 0}, {detail::linear_sigma(inst, g, bb), 1});
      });
      r.mean_double += gr;
      ++r.pairs;
      bool overlap = false;
      for (std::size_t i : a)
        overlap = overlap || std::find(bb.begin(), bb.end(), i) != bb.end();
      if (!overlap) {
        r.mean_disjoint += gr;
        ++disjoint;
      }
    }
  }
  r.mean_naive *= 1.0 / static_cast<double>(sets.size());
  r.mean_diag *= 1.0 / static_cast<double>(sets.size());
  r.mean_double *= 1.0 / static_cast<double>(r.pairs);
  r.double_gap = max_abs_diff(r.mean_double, r.full_off);
  r.naive_gap = max_abs_diff(r.mean_naive, r.full_off);
  r.diag_gap = max_abs_diff(r.mean_diag, r.full_diag);
  if (disjoint) {
    r.mean_disjoint *= 1.0 / static_cast<double>(disjoint);
    r.disjoint_gap = max_abs_diff(r.mean_disjoint, r.full_off);
  }
  return r;
}

// Exponential moving average of the diagonal of sigma. The off-diagonal of the
// running estimate is implicitly zero.
struct RunningSigma {
  Vector diag;
  double rho = 0.99;

  RunningSigma() = default;
  RunningSigma(std::size_t k, double rho_, double init = 1.0) : diag(k, init), rho(rho_) {}

  void update(std::span<const double> batch_diag) {
    if (batch_diag.size() != diag.size()) throw ShapeError("RunningSigma::update: length mismatch");
    for (std::size_t i = 0; i < diag.size(); ++i) diag[i] = rho * diag[i] + (1.0 - rho) * batch_diag[i];
  }
};

// Squared norm of a representation weighted by the inverse squared running
// diagonal (clamped per weighted_norm_sq).
inline double fa_bonus(std::span<const double> f_row, std::span<const double> running_diag) {
  if (f_row.size() != running_diag.size()) throw ShapeError("fa_bonus: length mismatch");
  Vector lam(running_diag.size());
  for (std::size_t i = 0; i < lam.size(); ++i) lam[i] = running_diag[i] * running_diag[i];
  return weighted_norm_sq(f_row, lam);
}

// ---- training on transition data -----------------------------------------

struct FaConfig {
  std::size_t k = 2;
  double lambda_r = 1.0;
  double lr = 1e-2;
  double momentum = 0.0;
  std::size_t batch = 256;
  std::size_t batch2 = 0;  // 0: same as batch
  std::size_t steps = 2000;
  double rho = 0.99;
  std::size_t hidden = 0;  // 0: linear encoders
  bool bn_center = false;
  bool bn_affine = false;
  Encoder encoder = Encoder::onehot;
};

// Encoder stack for f or g. `input_dim` is the one-hot width (ignored for pixels).
inline ad::Model make_encoder(const std::string& name, const FaConfig& cfg, std::size_t input_dim = kNumCells) {
  ad::Model m{name, {}};
  using ad::LayerSpec;
  if (cfg.encoder == Encoder::pixel) {
    m.layers = {LayerSpec::conv2d(kImageChannels, 8, 4, 2), LayerSpec::relu(), LayerSpec::conv2d(8, 16, 4, 2),
                LayerSpec::relu(), LayerSpec::flatten()};
    const std::size_t flat = 16 * 6 * 6;
    if (cfg.hidden) {
      m.layers.push_back(LayerSpec::linear(flat, cfg.hidden));
      m.layers.push_back(LayerSpec::relu());
      m.layers.push_back(LayerSpec::linear(cfg.hidden, cfg.k));
    } else {
      m.layers.push_back(LayerSpec::linear(flat, cfg.k));
    }
  } else if (cfg.hidden) {
    m.layers = {LayerSpec::linear(input_dim, cfg.hidden), LayerSpec::relu(), LayerSpec::linear(cfg.hidden, cfg.k)};
  } else {
    m.layers = {LayerSpec::linear(input_dim, cfg.k)};
  }
  m.layers.push_back(LayerSpec::batchnorm(cfg.k, cfg.bn_center, cfg.bn_affine));
  return m;
}

// Encoder input for a list of cells: N x 121 one-hot rows, or N x 3 x 30 x 30
// images in [0, 1].
inline Tensor encode_cells(const FourRooms& env, std::span<const int> cells, Encoder enc) {
  const std::size_t n = cells.size();
  if (enc == Encoder::onehot) {
    Tensor t({n, static_cast<std::size_t>(kNumCells)}, 0.0);
    for (std::size_t i = 0; i < n; ++i) t(i, static_cast<std::size_t>(cells[i])) = 1.0;
    return t;
  }
  Tensor t({n, static_cast<std::size_t>(kImageChannels), static_cast<std::size_t>(kImageSize),
            static_cast<std::size_t>(kImageSize)});
  const std::size_t plane = kImageSize * kImageSize;
  for (std::size_t i = 0; i < n; ++i) {
    const Image img = env.render(cells[i], false);
    for (std::size_t p = 0; p < plane; ++p)
      for (std::size_t c = 0; c < static_cast<std::size_t>(kImageChannels); ++c)
        t.data[(i * kImageChannels + c) * plane + p] = img[p * kImageChannels + c] / 255.0;
  }
  return t;
}

using CellEncoder = std::function<Tensor(std::span<const int>)>;

inline CellEncoder onehot_encoder(std::size_t dim) {
  return [dim](std::span<const int> cells) {
    Tensor t({cells.size(), dim}, 0.0);
    for (std::size_t i = 0; i < cells.size(); ++i) t(i, static_cast<std::size_t>(cells[i])) = 1.0;
    return t;
  };
}

inline CellEncoder fourrooms_encoder(const FourRooms& env, Encoder enc) {
  return [&env, enc](std::span<const int> cells) { return encode_cells(env, cells, enc); };
}

// Source/successor state ids of a transition dataset.
struct PairData {
  std::vector<int> src;
  std::vector<int> dst;

  std::size_t size() const { return src.size(); }

  static PairData from(const TransitionDataset& ds) {
    PairData p;
    for (const auto& t : ds.tuples) {
      p.src.push_back(t.s);
      p.dst.push_back(t.s_next);
    }
    return p;
  }
};

// n i.i.d. pairs with s ~ d and s' ~ p[s, .] on an abstract chain.
inline PairData sample_chain_pairs(const Matrix& p, std::span<const double> d, std::size_t n, std::uint64_t seed) {
  if (!p.square() || p.rows() != d.size()) throw ShapeError("sample_chain_pairs: p and d disagree");
  Rng rng(seed);
  PairData out;
  out.src.reserve(n);
  out.dst.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t s = sample_categorical(rng, d);
    out.src.push_back(static_cast<int>(s));
    out.dst.push_back(static_cast<int>(sample_categorical(rng, p.row(s))));
  }
  return out;
}

struct StepRecord {
  std::size_t step = 0;
  LossBreakdown loss;
  Vector running_diag;
};

inline void write_training_log(std::ostream& os, const std::vector<StepRecord>& log,
                               const std::string& loss_name = "derex") {
  if (log.empty()) return;
  os << "loss,step,l_diag,l_off,unbiased_off,total";
  for (std::size_t i = 0; i < log.front().running_diag.size(); ++i) os << ",running_diag_" << i;
  os << '\n';
  const auto num = format_number;
  for (const auto& r : log) {
    os << loss_name << ',' << r.step << ',' << num(r.loss.l_diag) << ',' << num(r.loss.l_off) << ',' << num(r.loss.unbiased_off) << ','
       << num(r.loss.total);
    for (double v : r.running_diag) os << ',' << num(v);
    os << '\n';
  }
}

// Trains f (sources) and g (successors) with the double-sampled objective on
// a fixed set of transitions.
class FaLearner {
 public:
  FaLearner(FaConfig cfg, std::size_t input_dim, CellEncoder encode, std::uint64_t seed)
      : cfg_(cfg), encode_(std::move(encode)), f_(make_encoder("f", cfg, input_dim)),
        g_(make_encoder("g", cfg, input_dim)), running_(cfg.k, cfg.rho), rng_(derive_seed(seed, 1)) {
    if (cfg_.k == 0) throw ConfigError("k must be >= 1");
    if (cfg_.batch == 0) throw ConfigError("batch must be >= 1");
    params_.seed = seed;
    Rng init(derive_seed(seed, 0));
    ad::init_params(f_, params_, init);
    ad::init_params(g_, params_, init);
    opt_.lr = cfg_.lr;
    opt_.momentum = cfg_.momentum;
  }

  FaLearner(const FourRooms& env, FaConfig cfg, std::uint64_t seed)
      : FaLearner(cfg, kNumCells, fourrooms_encoder(env, cfg.encoder), seed) {}

  const FaConfig& config() const { return cfg_; }
  ad::ParamStore& params() { return params_; }
  const ad::ParamStore& params() const { return params_; }
  const RunningSigma& running() const { return running_; }
  const ad::Model& f_model() const { return f_; }
  const ad::Model& g_model() const { return g_; }

  LossBreakdown step(const PairData& data) {
    const std::size_t n = data.size();
    if (n == 0) throw Error("FaLearner::step: empty dataset");
    const std::size_t b1 = std::min(cfg_.batch, n);
    const std::size_t b2 = std::min(cfg_.batch2 ? cfg_.batch2 : cfg_.batch, n);
    const auto ia = sample_without_replacement(rng_, n, b1);
    const auto ib = sample_without_replacement(rng_, n, b2);
    ad::Binding bind(params_);
    auto side = [&](const std::vector<std::size_t>& idx, const std::vector<int>& cells_of) {
      std::vector<int> cells(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) cells[i] = cells_of[idx[i]];
      return ad::constant(encode_(cells));
    };
    Var fa = ad::apply(f_, bind, side(ia, data.src), ad::Mode::train);
    Var ga = ad::apply(g_, bind, side(ia, data.dst), ad::Mode::train);
    Var fb = ad::apply(f_, bind, side(ib, data.src), ad::Mode::train);
    Var gb = ad::apply(g_, bind, side(ib, data.dst), ad::Mode::train);
    DerexLoss loss = derex_loss(fa, ga, fb, gb, cfg_.lambda_r, 2 * steps_, 2 * steps_ + 1);
    ad::backward(loss.total);
    opt_.step(params_, bind.gradients());
    running_.update(loss.sigma_a->value.to_matrix().diag());
    ++steps_;
    return loss.breakdown;
  }

  std::vector<StepRecord> train(const PairData& data, std::size_t log_every = 0) {
    std::vector<StepRecord> log;
    for (std::size_t t = 0; t < cfg_.steps; ++t) {
      LossBreakdown b = step(data);
      if (log_every && (t % log_every == 0 || t + 1 == cfg_.steps)) log.push_back({t, b, running_.diag});
    }
    return log;
  }

  // Eval-mode representations, one row per cell.
  Matrix represent(std::span<const int> cells) {
    return ad::forward(f_, params_, encode_(cells), ad::Mode::eval).to_matrix();
  }

  double bonus(std::span<const double> f_row) const { return fa_bonus(f_row, running_.diag); }

  // Gram matrix (1/N) F^T F of eval-mode representations over the given cells.
  Matrix gram(std::span<const int> cells) {
    const Matrix f = represent(cells);
    Matrix gm = matmul(transpose(f), f);
    gm *= 1.0 / static_cast<double>(std::max<std::size_t>(cells.size(), 1));
    return gm;
  }

 private:
  FaConfig cfg_;
  CellEncoder encode_;
  ad::Model f_, g_;
  ad::ParamStore params_;
  RunningSigma running_;
  ad::Sgd opt_;
  Rng rng_;
  std::size_t steps_ = 0;
};

}  // namespace derex
