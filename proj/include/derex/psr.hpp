#pragma once

// History/test representations for partially observable data: sequence
// splits, recurrent history (forward) and test (reverse) encoders trained with
// the double-sampled objective, the exact system-dynamics matrix of a tiny
// enumerable POMDP, and a softmax probe that decodes the hidden state.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "derex/autodiff.hpp"
#include "derex/error.hpp"
#include "derex/fourrooms.hpp"
#include "derex/layers.hpp"
#include "derex/linalg.hpp"
#include "derex/matrix.hpp"
#include "derex/stats.hpp"
#include "derex/laplacian.hpp"
#include "derex/svd_loss.hpp"

namespace derex {

inline constexpr int kHiddenObservation = -1;

// One observation/action sequence: obs and states have T+1 entries, actions T.
// States are ground truth, used only by probes and oracles.
struct Sequence {
  std::vector<int> obs;
  std::vector<int> actions;
  std::vector<int> states;

  std::size_t length() const { return actions.size(); }
};

struct SequenceData {
  std::vector<Sequence> seqs;
  std::size_t num_actions = kNumActions;

  std::size_t size() const { return seqs.size(); }
};

inline SequenceData sequences_from(const TrajectoryDataset& ds) {
  SequenceData out;
  out.num_actions = kNumActions;
  for (const auto& tr : ds.trajectories) {
    Sequence s;
    s.actions = tr.actions;
    s.states = tr.states;
    for (std::size_t t = 0; t < tr.states.size(); ++t) s.obs.push_back(tr.hidden[t] ? kHiddenObservation : tr.states[t]);
    out.seqs.push_back(std::move(s));
  }
  return out;
}

// ---- history / test splits ------------------------------------------------

struct HistoryTestSplit {
  std::size_t sequence = 0;
  std::size_t split = 0;  // j: history ends at o_j
};

// h = (o_0, a_0, ..., o_j); test = (a_j, o_{j+1}, ..., a_{T-1}, o_T), or its
// first test_length pairs when that is nonzero.
struct SplitParts {
  std::vector<int> history_obs;      // j+1
  std::vector<int> history_actions;  // j
  std::vector<int> test_actions;
  std::vector<int> test_obs;
};

inline SplitParts split_sequence(const Sequence& s, std::size_t j, std::size_t test_length = 0) {
  const std::size_t t = s.length();
  if (s.obs.size() != t + 1) throw ShapeError("split_sequence: obs must have one more entry than actions");
  const std::size_t len = test_length ? test_length : t - std::min(j, t);
  if (j >= t || j + len > t)
    throw Error("split_sequence: split " + std::to_string(j) + " with a test of " + std::to_string(len) +
                " steps does not fit " + std::to_string(t) + " actions");
  const auto at = [](const std::vector<int>& v, std::size_t i) { return v.begin() + static_cast<std::ptrdiff_t>(i); };
  SplitParts p;
  p.history_obs.assign(s.obs.begin(), at(s.obs, j + 1));
  p.history_actions.assign(s.actions.begin(), at(s.actions, j));
  p.test_actions.assign(at(s.actions, j), at(s.actions, j + len));
  p.test_obs.assign(at(s.obs, j + 1), at(s.obs, j + 1 + len));
  return p;
}

// Observation/action content of the sequence the split came from.
inline Sequence join_split(const SplitParts& p) {
  Sequence s;
  s.obs = p.history_obs;
  s.obs.insert(s.obs.end(), p.test_obs.begin(), p.test_obs.end());
  s.actions = p.history_actions;
  s.actions.insert(s.actions.end(), p.test_actions.begin(), p.test_actions.end());
  return s;
}

// ---- observation encoders ---------------------------------------------------

using ObservationEncoder = std::function<Tensor(std::span<const int>)>;

// One-hot over `dim` symbols; a hidden observation is the zero row.
inline ObservationEncoder onehot_observations(std::size_t dim) {
  return [dim](std::span<const int> ids) {
    Tensor t({ids.size(), dim}, 0.0);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] == kHiddenObservation) continue;
      if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= dim)
        throw Error("onehot_observations: symbol " + std::to_string(ids[i]) + " out of range");
      t(i, static_cast<std::size_t>(ids[i])) = 1.0;
    }
    return t;
  };
}

// 4-rooms frames: one-hot cell (zero row when hidden) or the rendered image.
inline ObservationEncoder fourrooms_observations(const FourRooms& env, Encoder enc) {
  if (enc == Encoder::onehot) return onehot_observations(kNumCells);
  return [&env](std::span<const int> ids) {
    std::vector<int> cells(ids.size());
    Tensor t({ids.size(), static_cast<std::size_t>(kImageChannels), static_cast<std::size_t>(kImageSize),
              static_cast<std::size_t>(kImageSize)});
    const std::size_t plane = kImageSize * kImageSize, frame = plane * kImageChannels;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const bool hidden = ids[i] == kHiddenObservation;
      const Image img = env.render(hidden ? FourRooms::start_cell() : ids[i], hidden);
      for (std::size_t p = 0; p < plane; ++p)
        for (std::size_t c = 0; c < static_cast<std::size_t>(kImageChannels); ++c)
          t.data[i * frame + c * plane + p] = img[p * kImageChannels + c] / 255.0;
    }
    return t;
  };
}

// ---- learner ----------------------------------------------------------------

enum class HistoryEncoding {
  recurrent,         // forward cell over histories, reverse cell over tests
  last_observation,  // f sees o_j only, g sees o_{j+1} only
};

enum class PsrObjective {
  derex,      // double-sampled history/test objective
  laplacian,  // graph-drawing loss on consecutive histories (h_j, h_{j+1}), f only
};

inline std::string objective_name(PsrObjective o) { return o == PsrObjective::derex ? "derex" : "laplacian"; }

inline PsrObjective parse_objective(const std::string& s) {
  if (s == "derex") return PsrObjective::derex;
  if (s == "laplacian") return PsrObjective::laplacian;
  throw ConfigError("unknown objective '" + s + "' (expected derex or laplacian)");
}

inline std::string encoding_name(HistoryEncoding e) {
  return e == HistoryEncoding::recurrent ? "recurrent" : "last_observation";
}

inline HistoryEncoding parse_encoding(const std::string& s) {
  if (s == "recurrent") return HistoryEncoding::recurrent;
  if (s == "last_observation") return HistoryEncoding::last_observation;
  throw ConfigError("unknown history encoding '" + s + "' (expected recurrent or last_observation)");
}

// Representation size used for the 4-rooms POMDP at hide probability p.
inline std::size_t default_psr_dim(double p) { return p > 0.5 ? 4 : 3; }

struct PsrConfig {
  std::size_t k = 3;
  double lambda_r = 1.0;
  double lr = 1e-2;
  double momentum = 0.0;
  std::size_t batch = 8;   // sequences per mini-batch; every split of each is used
  std::size_t batch2 = 0;  // 0: same as batch
  std::size_t steps = 1000;
  double rho = 0.99;
  std::size_t embed = 16;   // per-observation embedding width
  std::size_t hidden = 32;  // recurrent state width
  std::size_t test_length = 0;  // action/observation pairs per test; 0 runs tests to the sequence end
  bool bn_center = false;
  bool bn_affine = false;
  HistoryEncoding encoding = HistoryEncoding::recurrent;
  PsrObjective objective = PsrObjective::derex;
  Encoder encoder = Encoder::onehot;  // selects the conv stack for image observations
};

struct EncodedSplits {
  Var f;  // one row per split, ordered (j, sequence)
  Var g;
  std::vector<HistoryTestSplit> splits;
};

class PsrLearner {
 public:
  PsrLearner(PsrConfig cfg, std::size_t obs_dim, std::size_t num_actions, ObservationEncoder encode, std::uint64_t seed)
      : cfg_(cfg), encode_(std::move(encode)), num_actions_(num_actions), running_(cfg.k, cfg.rho),
        rng_(derive_seed(seed, 1)) {
    if (cfg_.k == 0) throw ConfigError("k must be >= 1");
    if (cfg_.batch == 0) throw ConfigError("batch must be >= 1");
    params_.seed = seed;
    Rng init(derive_seed(seed, 0));
    if (cfg_.encoding == HistoryEncoding::last_observation) {
      FaConfig fc;
      fc.k = cfg_.k;
      fc.bn_center = cfg_.bn_center;
      fc.bn_affine = cfg_.bn_affine;
      fc.encoder = cfg_.encoder;
      f_.obs = make_encoder("f", fc, obs_dim);
      g_.obs = make_encoder("g", fc, obs_dim);
      ad::init_params(f_.obs, params_, init);
      ad::init_params(g_.obs, params_, init);
    } else {
      for (Side* side : {&f_, &g_}) {
        const std::string n = side == &f_ ? "f" : "g";
        side->obs = observation_model(n + "_obs", obs_dim);
        side->rnn = ad::Model{n + "_rnn", {ad::LayerSpec::rnn(cfg_.embed + num_actions_, cfg_.hidden)}};
        side->head = ad::Model{n + "_head",
                               {ad::LayerSpec::linear(cfg_.hidden, cfg_.k),
                                ad::LayerSpec::batchnorm(cfg_.k, cfg_.bn_center, cfg_.bn_affine)}};
        ad::init_params(side->obs, params_, init);
        ad::init_params(side->rnn, params_, init);
        ad::init_params(side->head, params_, init);
      }
    }
    opt_.lr = cfg_.lr;
    opt_.momentum = cfg_.momentum;
  }

  const PsrConfig& config() const { return cfg_; }
  ad::ParamStore& params() { return params_; }
  const RunningSigma& running() const { return running_; }

  // Splits per sequence of T actions: j in [0, T - L] for test length L.
  std::size_t splits_per_sequence(std::size_t t_len) const {
    if (cfg_.test_length == 0) return t_len;
    if (cfg_.test_length > t_len)
      throw ConfigError("test_length " + std::to_string(cfg_.test_length) + " exceeds sequence length " +
                        std::to_string(t_len));
    return t_len - cfg_.test_length + 1;
  }

  // f and g rows for every split of the given sequences.
  EncodedSplits encode(ad::Binding& b, const SequenceData& data, std::span<const std::size_t> idx, ad::Mode mode) {
    const std::size_t t_len = batch_length(data, idx);
    EncodedSplits out;
    for (std::size_t j = 0; j < splits_per_sequence(t_len); ++j)
      for (std::size_t i : idx) out.splits.push_back({i, j});
    if (cfg_.encoding == HistoryEncoding::last_observation) {
      std::vector<int> hist, next;
      for (const auto& sp : out.splits) {
        hist.push_back(data.seqs[sp.sequence].obs[sp.split]);
        next.push_back(data.seqs[sp.sequence].obs[sp.split + 1]);
      }
      out.f = ad::apply(f_.obs, b, ad::constant(encode_(hist)), mode);
      out.g = ad::apply(g_.obs, b, ad::constant(encode_(next)), mode);
      return out;
    }
    out.f = ad::apply(f_.head, b, run_side(b, f_, data, idx, t_len, true), mode);
    out.g = ad::apply(g_.head, b, run_side(b, g_, data, idx, t_len, false), mode);
    return out;
  }

  LossBreakdown step(const SequenceData& data) {
    const std::size_t n = data.size();
    if (n == 0) throw Error("PsrLearner::step: empty dataset");
    const std::size_t b1 = std::min(cfg_.batch, n);
    const auto ia = sample_without_replacement(rng_, n, b1);
    ad::Binding bind(params_);
    if (cfg_.objective == PsrObjective::laplacian) {
      const auto [u, v] = encode_consecutive(bind, data, ia);
      const LaplacianLoss loss = laplacian_loss(u, v, cfg_.lambda_r);
      ad::backward(loss.total);
      opt_.step(params_, bind.gradients());
      ++steps_;
      LossBreakdown br;
      br.l_diag = loss.breakdown.l_diag;
      br.l_off = loss.breakdown.l_off;
      br.total = loss.breakdown.total;
      br.lambda_r = loss.breakdown.lambda_r;
      return br;
    }
    const std::size_t b2 = std::min(cfg_.batch2 ? cfg_.batch2 : cfg_.batch, n);
    const auto ib = sample_without_replacement(rng_, n, b2);
    const EncodedSplits a = encode(bind, data, ia, ad::Mode::train);
    const EncodedSplits bb = encode(bind, data, ib, ad::Mode::train);
    DerexLoss loss = derex_loss(a.f, a.g, bb.f, bb.g, cfg_.lambda_r, 2 * steps_, 2 * steps_ + 1);
    ad::backward(loss.total);
    opt_.step(params_, bind.gradients());
    running_.update(loss.sigma_a->value.to_matrix().diag());
    ++steps_;
    return loss.breakdown;
  }

  // f(h_j) and f(h_{j+1}) for j in [0, T-1], rows (j, sequence); one head pass
  // over all T+1 histories so both sides share batch statistics.
  std::pair<Var, Var> encode_consecutive(ad::Binding& b, const SequenceData& data, std::span<const std::size_t> idx) {
    const std::size_t t_len = batch_length(data, idx), m = idx.size();
    Var all;
    if (cfg_.encoding == HistoryEncoding::last_observation) {
      std::vector<int> obs;
      for (std::size_t t = 0; t <= t_len; ++t)
        for (std::size_t i : idx) obs.push_back(data.seqs[i].obs[t]);
      all = ad::apply(f_.obs, b, ad::constant(encode_(obs)), ad::Mode::train);
    } else {
      all = ad::apply(f_.head, b, run_side(b, f_, data, idx, t_len, true, t_len + 1), ad::Mode::train);
    }
    std::vector<std::size_t> head(t_len * m), tail(t_len * m);
    std::iota(head.begin(), head.end(), 0);
    std::iota(tail.begin(), tail.end(), m);
    return {ad::gather_rows(all, head), ad::gather_rows(all, tail)};
  }

  std::vector<StepRecord> train(const SequenceData& data, std::size_t log_every = 0) {
    std::vector<StepRecord> log;
    for (std::size_t t = 0; t < cfg_.steps; ++t) {
      LossBreakdown br = step(data);
      if (log_every && (t % log_every == 0 || t + 1 == cfg_.steps)) log.push_back({t, br, running_.diag});
    }
    return log;
  }

  // Eval-mode history representations for every split of the given sequences
  // (rows ordered by sequence, then split), with the ground-truth end state.
  struct HistoryReps {
    Matrix reps;
    std::vector<int> end_states;
    std::vector<HistoryTestSplit> splits;
  };

  HistoryReps represent(const SequenceData& data, std::span<const std::size_t> idx, std::size_t chunk = 16) {
    HistoryReps out;
    std::vector<std::vector<double>> rows;
    for (std::size_t start = 0; start < idx.size(); start += chunk) {
      const std::size_t end = std::min(idx.size(), start + chunk);
      const std::vector<std::size_t> part(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                          idx.begin() + static_cast<std::ptrdiff_t>(end));
      ad::ParamStore frozen = params_;
      ad::Binding b(frozen, false);
      const EncodedSplits e = encode(b, data, part, ad::Mode::eval);
      const Matrix f = e.f->value.to_matrix();
      for (std::size_t r = 0; r < e.splits.size(); ++r) {
        rows.emplace_back(f.row(r).begin(), f.row(r).end());
        out.splits.push_back(e.splits[r]);
      }
    }
    // Reorder rows to (sequence, split).
    std::vector<std::size_t> order(out.splits.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
      const auto& a = out.splits[x];
      const auto& c = out.splits[y];
      return a.sequence != c.sequence ? a.sequence < c.sequence : a.split < c.split;
    });
    out.reps = Matrix(order.size(), cfg_.k);
    std::vector<HistoryTestSplit> sorted;
    for (std::size_t r = 0; r < order.size(); ++r) {
      std::copy(rows[order[r]].begin(), rows[order[r]].end(), out.reps.row(r).begin());
      const auto& sp = out.splits[order[r]];
      sorted.push_back(sp);
      const auto& states = data.seqs[sp.sequence].states;
      out.end_states.push_back(states.empty() ? -1 : states[sp.split]);
    }
    out.splits = std::move(sorted);
    return out;
  }

  double history_bonus(std::span<const double> f_row) const { return fa_bonus(f_row, running_.diag); }

  // Online encoding of one growing history under the current parameters.
  struct HistoryCursor {
    Vector hidden;  // forward recurrent state (recurrent encoding)
    int last_obs = kHiddenObservation;
  };

  HistoryCursor begin_history(int obs) {
    HistoryCursor c;
    c.hidden.assign(cfg_.hidden, 0.0);
    advance(c, -1, obs);
    return c;
  }

  void extend_history(HistoryCursor& c, int action, int obs) { advance(c, action, obs); }

  // Eval-mode f of the cursor's history.
  Vector history_rep(const HistoryCursor& c) {
    ad::Binding b(params_, false);
    if (cfg_.encoding == HistoryEncoding::last_observation)
      return ad::apply(f_.obs, b, ad::constant(encode_(std::vector<int>{c.last_obs})), ad::Mode::eval)->value.data;
    return ad::apply(f_.head, b, ad::constant(Tensor({1, cfg_.hidden}, c.hidden)), ad::Mode::eval)->value.data;
  }

  // Pre-head recurrent state of a single history (forward pass over it).
  Vector history_state(std::span<const int> history_obs, std::span<const int> history_actions) {
    if (history_obs.size() != history_actions.size() + 1)
      throw ShapeError("history_state: a history has one more observation than actions");
    std::vector<std::pair<int, int>> z;  // (observation, previous action or -1)
    for (std::size_t t = 0; t < history_obs.size(); ++t) z.push_back({history_obs[t], t ? history_actions[t - 1] : -1});
    return run_single(f_, z);
  }

  // Pre-head recurrent state of a single test, consumed from its end.
  Vector test_state(std::span<const int> test_actions, std::span<const int> test_obs) {
    if (test_actions.size() != test_obs.size() || test_obs.empty())
      throw ShapeError("test_state: a test alternates actions and observations");
    std::vector<std::pair<int, int>> z;
    for (std::size_t t = test_obs.size(); t-- > 0;) z.push_back({test_obs[t], test_actions[t]});
    return run_single(g_, z);
  }

  // Pre-head states for every split from the batched passes, rows (j, sequence).
  std::pair<Matrix, Matrix> raw_states(const SequenceData& data, std::span<const std::size_t> idx) {
    ad::ParamStore frozen = params_;
    ad::Binding b(frozen, false);
    const std::size_t t_len = batch_length(data, idx);
    return {run_side(b, f_, data, idx, t_len, true)->value.to_matrix(),
            run_side(b, g_, data, idx, t_len, false)->value.to_matrix()};
  }

 private:
  struct Side {
    ad::Model obs, rnn, head;
  };

  ad::Model observation_model(const std::string& name, std::size_t obs_dim) const {
    using ad::LayerSpec;
    if (cfg_.encoder == Encoder::pixel)
      return {name,
              {LayerSpec::conv2d(kImageChannels, 8, 4, 2), LayerSpec::relu(), LayerSpec::conv2d(8, 16, 4, 2),
               LayerSpec::relu(), LayerSpec::flatten(), LayerSpec::linear(16 * 6 * 6, cfg_.embed), LayerSpec::relu()}};
    return {name, {LayerSpec::linear(obs_dim, cfg_.embed)}};
  }

  // Input rows z_t = [embed(o_t), onehot(a_{t-1})] projected by the cell's
  // input weights, for every distinct (observation, previous action) pair.
  struct Projected {
    Var xw;                                  // distinct pairs x hidden
    std::map<std::pair<int, int>, std::size_t> row_of;
  };

  Projected project(ad::Binding& b, const Side& side, const std::set<std::pair<int, int>>& pairs) {
    std::vector<int> ids;
    std::map<int, std::size_t> id_row;
    for (const auto& [o, a] : pairs)
      if (id_row.emplace(o, ids.size()).second) ids.push_back(o);
    Var emb = ad::apply(side.obs, b, ad::constant(encode_(ids)), ad::Mode::train);
    std::vector<std::size_t> rows;
    Tensor act({pairs.size(), num_actions_}, 0.0);
    Projected p;
    for (const auto& pr : pairs) {
      const std::size_t r = rows.size();
      rows.push_back(id_row.at(pr.first));
      if (pr.second >= 0) act(r, static_cast<std::size_t>(pr.second)) = 1.0;
      p.row_of.emplace(pr, r);
    }
    Var z = ad::concat_cols({ad::gather_rows(emb, rows), ad::constant(std::move(act))});
    p.xw = ad::matmul(z, b.param(side.rnn.name + ".0.w_in"));
    return p;
  }

  Var cell(ad::Binding& b, const Side& side, const Var& xw_rows, const Var& h) {
    const std::string prefix = side.rnn.name + ".0";
    Var pre = ad::add(xw_rows, ad::matmul(h, b.param(prefix + ".w_hidden")));
    return ad::tanh(ad::add_row(pre, b.param(prefix + ".bias")));
  }

  std::size_t batch_length(const SequenceData& data, std::span<const std::size_t> idx) const {
    if (idx.empty()) throw Error("PsrLearner::encode: empty batch");
    const std::size_t t_len = data.seqs.at(idx[0]).length();
    if (t_len == 0) throw Error("PsrLearner::encode: sequences need at least one action");
    for (std::size_t i : idx) {
      const Sequence& s = data.seqs.at(i);
      if (s.length() != t_len || s.obs.size() != t_len + 1)
        throw ShapeError("PsrLearner::encode: sequences in a batch must share one length");
    }
    return t_len;
  }

  // Pre-head states for all splits, rows ordered (j, sequence). Forward: h_j
  // after z_0..z_j, one pass. Reverse, full tests: r_{j+1} after z_T down to
  // z_{j+1}, one pass. Reverse, tests of length L: every split runs its own
  // L-step window z_{j+L} down to z_{j+1}, all windows stacked in one batch.
  Var run_side(ad::Binding& b, const Side& side, const SequenceData& data, std::span<const std::size_t> idx,
               std::size_t t_len, bool forward, std::size_t count = 0) {
    auto pair_at = [&](const Sequence& s, std::size_t t) {
      return std::pair<int, int>{s.obs[t], t ? s.actions[t - 1] : -1};
    };
    std::set<std::pair<int, int>> pairs;
    for (std::size_t i : idx)
      for (std::size_t t = 0; t <= t_len; ++t) pairs.insert(pair_at(data.seqs[i], t));
    const Projected p = project(b, side, pairs);
    const std::size_t n_split = count ? count : splits_per_sequence(t_len), m = idx.size();
    // Input rows at time t + offset(j) for every (j, sequence) in `js`.
    auto rows_at = [&](std::span<const std::size_t> js, auto time_of) {
      std::vector<std::size_t> r;
      for (std::size_t j : js)
        for (std::size_t i : idx) r.push_back(p.row_of.at(pair_at(data.seqs[i], time_of(j))));
      return ad::gather_rows(p.xw, r);
    };
    std::vector<Var> states;
    if (forward || cfg_.test_length == 0) {
      Var h = ad::constant(Tensor({m, cfg_.hidden}, 0.0));
      states.resize(n_split);
      const std::size_t only[] = {0};
      for (std::size_t s = 0; s < n_split; ++s) {
        const std::size_t t = forward ? s : t_len - s;
        h = cell(b, side, rows_at(only, [t](std::size_t) { return t; }), h);
        states[forward ? t : t - 1] = h;
      }
      return ad::concat_rows(states);
    }
    std::vector<std::size_t> js(n_split);
    std::iota(js.begin(), js.end(), 0);
    Var r = ad::constant(Tensor({n_split * m, cfg_.hidden}, 0.0));
    for (std::size_t l = 0; l < cfg_.test_length; ++l)
      r = cell(b, side, rows_at(js, [&](std::size_t j) { return j + cfg_.test_length - l; }), r);
    return r;
  }

  void advance(HistoryCursor& c, int action, int obs) {
    c.last_obs = obs;
    if (cfg_.encoding != HistoryEncoding::recurrent) return;
    ad::Binding b(params_, false);
    const Projected p = project(b, f_, {{obs, action}});
    c.hidden = cell(b, f_, p.xw, ad::constant(Tensor({1, cfg_.hidden}, c.hidden)))->value.data;
  }

  Vector run_single(const Side& side, const std::vector<std::pair<int, int>>& z) {
    if (cfg_.encoding != HistoryEncoding::recurrent) throw Error("run_single: learner is not recurrent");
    ad::ParamStore frozen = params_;
    ad::Binding b(frozen, false);
    const std::set<std::pair<int, int>> pairs(z.begin(), z.end());
    const Projected p = project(b, side, pairs);
    Var h = ad::constant(Tensor({1, cfg_.hidden}, 0.0));
    for (const auto& pr : z) h = cell(b, side, ad::gather_rows(p.xw, {p.row_of.at(pr)}), h);
    return h->value.data;
  }

  PsrConfig cfg_;
  ObservationEncoder encode_;
  std::size_t num_actions_;
  Side f_, g_;
  ad::ParamStore params_;
  RunningSigma running_;
  ad::Sgd opt_;
  Rng rng_;
  std::size_t steps_ = 0;
};

// Mean history bonus per ground-truth end state, over the given histories.
struct EndStateBonus {
  std::vector<int> states;
  Vector mean_bonus;
  std::vector<std::size_t> count;
};

inline EndStateBonus bonus_by_end_state(const PsrLearner& learner, const PsrLearner::HistoryReps& reps) {
  std::map<int, std::pair<double, std::size_t>> acc;
  for (std::size_t r = 0; r < reps.reps.rows(); ++r) {
    auto& [sum, n] = acc[reps.end_states[r]];
    sum += learner.history_bonus(reps.reps.row(r));
    ++n;
  }
  EndStateBonus out;
  for (const auto& [s, v] : acc) {
    out.states.push_back(s);
    out.mean_bonus.push_back(v.first / static_cast<double>(v.second));
    out.count.push_back(v.second);
  }
  return out;
}

inline Matrix psr_sigma(const EncodedSplits& e) {
  if (e.splits.empty()) throw Error("psr_sigma: empty batch");
  return sigma_of(e.f->value.to_matrix(), e.g->value.to_matrix());
}

// ---- tiny enumerable POMDP ---------------------------------------------------

struct TinyPomdp {
  std::size_t states = 0, observations = 0, actions = 0;
  Vector initial;
  std::vector<Matrix> transition;  // per action, states x states, rows sum to 1
  Matrix emission;                 // states x observations, rows sum to 1

  void validate() const {
    auto stochastic_rows = [](const Matrix& m, std::size_t r, std::size_t c, const char* what) {
      if (m.rows() != r || m.cols() != c) throw ShapeError(std::string("TinyPomdp: bad ") + what + " shape");
      for (std::size_t i = 0; i < r; ++i) {
        double s = 0;
        for (double v : m.row(i)) {
          if (v < 0) throw Error(std::string("TinyPomdp: negative ") + what + " entry");
          s += v;
        }
        if (std::abs(s - 1.0) > 1e-12) throw Error(std::string("TinyPomdp: ") + what + " row does not sum to 1");
      }
    };
    if (initial.size() != states) throw ShapeError("TinyPomdp: initial distribution length");
    stochastic_rows(Matrix(1, states, initial), 1, states, "initial");
    if (transition.size() != actions) throw ShapeError("TinyPomdp: one transition matrix per action");
    for (const Matrix& t : transition) stochastic_rows(t, states, states, "transition");
    stochastic_rows(emission, states, observations, "emission");
  }

  // 3 hidden states, 2 observations, 2 actions. Tables chosen by hand so that
  // the system-dynamics matrix has full rank 3.
  static TinyPomdp standard() {
    TinyPomdp p;
    p.states = 3;
    p.observations = 2;
    p.actions = 2;
    p.initial = {0.5, 0.3, 0.2};
    p.transition = {Matrix{{0.7, 0.2, 0.1}, {0.1, 0.7, 0.2}, {0.2, 0.1, 0.7}},
                    Matrix{{0.1, 0.8, 0.1}, {0.1, 0.1, 0.8}, {0.8, 0.1, 0.1}}};
    p.emission = Matrix{{0.9, 0.1}, {0.2, 0.8}, {0.5, 0.5}};
    p.validate();
    return p;
  }

  // Two states that swap under either action; each state emits its own index.
  static TinyPomdp deterministic_swap() {
    TinyPomdp p;
    p.states = 2;
    p.observations = 2;
    p.actions = 1;
    p.initial = {1.0, 0.0};
    p.transition = {Matrix{{0.0, 1.0}, {1.0, 0.0}}};
    p.emission = Matrix::identity(2);
    p.validate();
    return p;
  }

  // Uniform-random actions; ground-truth states recorded.
  Sequence sample(std::size_t horizon, Rng& rng) const {
    Sequence s;
    std::size_t x = sample_categorical(rng, initial);
    s.states.push_back(static_cast<int>(x));
    s.obs.push_back(static_cast<int>(sample_categorical(rng, emission.row(x))));
    for (std::size_t t = 0; t < horizon; ++t) {
      const std::size_t a = uniform_index(rng, actions);
      x = sample_categorical(rng, transition[a].row(x));
      s.actions.push_back(static_cast<int>(a));
      s.states.push_back(static_cast<int>(x));
      s.obs.push_back(static_cast<int>(sample_categorical(rng, emission.row(x))));
    }
    return s;
  }

  SequenceData sample_data(std::size_t n, std::size_t horizon, std::uint64_t seed) const {
    Rng rng(seed);
    SequenceData d;
    d.num_actions = actions;
    for (std::size_t i = 0; i < n; ++i) d.seqs.push_back(sample(horizon, rng));
    return d;
  }
};

// Histories are flattened (o_0, a_0, o_1, ..., o_t); tests (a_1, o_1, ..., a_j, o_j).
struct SystemDynamicsMatrix {
  std::vector<std::vector<int>> histories;
  std::vector<std::vector<int>> tests;
  std::vector<Vector> beliefs;  // hidden-state posterior after each history
  Matrix w;                     // w(i, j) = p(test j | history i)

  std::size_t history_row(const std::vector<int>& h) const {
    const auto it = std::find(histories.begin(), histories.end(), h);
    if (it == histories.end()) throw Error("history_row: history not enumerated");
    return static_cast<std::size_t>(it - histories.begin());
  }
};

inline std::vector<int> flatten_history(std::span<const int> obs, std::span<const int> actions) {
  std::vector<int> h;
  for (std::size_t t = 0; t < obs.size(); ++t) {
    if (t) h.push_back(actions[t - 1]);
    h.push_back(obs[t]);
  }
  return h;
}

// Exact W over all reachable histories with 1..horizon observations and all
// tests with 1..horizon action/observation pairs.
inline SystemDynamicsMatrix exact_w(const TinyPomdp& p, std::size_t horizon, std::size_t max_rows = 100000) {
  p.validate();
  if (horizon == 0) throw Error("exact_w: horizon must be >= 1");
  const std::size_t ao = p.actions * p.observations;
  std::size_t n_tests = 0, layer = 1, n_hist = 0, hlayer = p.observations;
  for (std::size_t j = 1; j <= horizon; ++j) {
    layer *= ao;
    n_tests += layer;
    n_hist += hlayer;
    hlayer *= ao;
    if (n_tests > max_rows || n_hist > max_rows) throw Error("exact_w: enumeration exceeds the budget of " + std::to_string(max_rows) + " rows");
  }
  SystemDynamicsMatrix out;

  // Histories by forward belief recursion; unreachable ones are dropped.
  struct Partial {
    std::vector<int> h;
    Vector belief;
  };
  std::vector<Partial> frontier;
  for (std::size_t o = 0; o < p.observations; ++o) {
    Vector b(p.states);
    double z = 0;
    for (std::size_t s = 0; s < p.states; ++s) z += b[s] = p.initial[s] * p.emission(s, o);
    if (z <= 0) continue;
    for (double& v : b) v /= z;
    frontier.push_back({{static_cast<int>(o)}, b});
  }
  for (std::size_t t = 0; t < horizon; ++t) {
    std::vector<Partial> next;
    for (const auto& part : frontier) {
      out.histories.push_back(part.h);
      out.beliefs.push_back(part.belief);
      if (t + 1 == horizon) continue;
      for (std::size_t a = 0; a < p.actions; ++a)
        for (std::size_t o = 0; o < p.observations; ++o) {
          Vector b(p.states, 0.0);
          double z = 0;
          for (std::size_t s2 = 0; s2 < p.states; ++s2) {
            double m = 0;
            for (std::size_t s = 0; s < p.states; ++s) m += part.belief[s] * p.transition[a](s, s2);
            z += b[s2] = m * p.emission(s2, o);
          }
          if (z <= 0) continue;
          for (double& v : b) v /= z;
          auto h = part.h;
          h.push_back(static_cast<int>(a));
          h.push_back(static_cast<int>(o));
          next.push_back({std::move(h), std::move(b)});
        }
    }
    frontier = std::move(next);
  }

  // Tests: p(test | belief) = b^T T_a1 E_o1 T_a2 E_o2 ... 1, evaluated as a
  // backward vector per test.
  std::vector<std::pair<std::vector<int>, Vector>> tests;  // (test, column vector over states)
  std::vector<std::pair<std::vector<int>, Vector>> level{{{}, Vector(p.states, 1.0)}};
  for (std::size_t j = 1; j <= horizon; ++j) {
    std::vector<std::pair<std::vector<int>, Vector>> grown;
    for (std::size_t a = 0; a < p.actions; ++a)
      for (std::size_t o = 0; o < p.observations; ++o)
        for (const auto& [suffix, v] : level) {
          // prepend (a, o): u(s) = sum_s2 T_a(s, s2) E(s2, o) v(s2)
          Vector u(p.states, 0.0);
          for (std::size_t s = 0; s < p.states; ++s)
            for (std::size_t s2 = 0; s2 < p.states; ++s2) u[s] += p.transition[a](s, s2) * p.emission(s2, o) * v[s2];
          std::vector<int> test{static_cast<int>(a), static_cast<int>(o)};
          test.insert(test.end(), suffix.begin(), suffix.end());
          grown.push_back({std::move(test), std::move(u)});
        }
    for (const auto& t : grown) tests.push_back(t);
    level = std::move(grown);
  }
  std::sort(tests.begin(), tests.end(), [](const auto& x, const auto& y) {
    return x.first.size() != y.first.size() ? x.first.size() < y.first.size() : x.first < y.first;
  });
  out.w = Matrix(out.histories.size(), tests.size());
  for (std::size_t j = 0; j < tests.size(); ++j) {
    out.tests.push_back(tests[j].first);
    for (std::size_t i = 0; i < out.histories.size(); ++i) {
      double v = 0;
      for (std::size_t s = 0; s < p.states; ++s) v += out.beliefs[i][s] * tests[j].second[s];
      out.w(i, j) = v;
    }
  }
  return out;
}

// ---- belief probe --------------------------------------------------------------

struct ProbeConfig {
  std::size_t iters = 2000;
  double lr = 0.5;
  double momentum = 0.9;
};

// Single-layer softmax classifier on standardized representations.
class BeliefProbe {
 public:
  static BeliefProbe train(const Matrix& x, std::span<const int> labels, const ProbeConfig& cfg = {}) {
    if (x.rows() != labels.size()) throw ShapeError("BeliefProbe::train: one label per row");
    if (x.rows() == 0) throw Error("BeliefProbe::train: no training rows");
    BeliefProbe p;
    p.classes_.assign(labels.begin(), labels.end());
    std::sort(p.classes_.begin(), p.classes_.end());
    p.classes_.erase(std::unique(p.classes_.begin(), p.classes_.end()), p.classes_.end());
    if (p.classes_.size() < 2) throw Error("BeliefProbe::train: labels contain a single class");
    const std::size_t n = x.rows(), k = x.cols(), c = p.classes_.size();
    p.mean_.assign(k, 0.0);
    p.scale_.assign(k, 1.0);
    for (std::size_t j = 0; j < k; ++j) {
      const Vector col = x.col(j);
      p.mean_[j] = mean(col);
      const double sd = std::sqrt(variance(col));
      p.scale_[j] = sd > 1e-12 ? 1.0 / sd : 1.0;
    }
    std::vector<std::size_t> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = p.class_index(labels[i]);
    Matrix z = p.standardize(x);
    p.w_ = Matrix(k + 1, c);
    Matrix vel(k + 1, c), grad(k + 1, c);
    Vector prob(c);
    for (std::size_t it = 0; it < cfg.iters; ++it) {
      grad *= 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        p.probabilities(z.row(i), prob);
        prob[y[i]] -= 1.0;
        for (std::size_t cl = 0; cl < c; ++cl) {
          const double g = prob[cl] / static_cast<double>(n);
          for (std::size_t j = 0; j < k; ++j) grad(j, cl) += g * z(i, j);
          grad(k, cl) += g;
        }
      }
      for (std::size_t q = 0; q < grad.size(); ++q) {
        vel.data()[q] = cfg.momentum * vel.data()[q] - cfg.lr * grad.data()[q];
        p.w_.data()[q] += vel.data()[q];
      }
    }
    return p;
  }

  const std::vector<int>& classes() const { return classes_; }

  // Probability over classes() for one representation.
  Vector decode(std::span<const double> rep) const {
    if (rep.size() != mean_.size()) throw ShapeError("BeliefProbe::decode: representation width");
    Vector z(rep.size());
    for (std::size_t j = 0; j < z.size(); ++j) z[j] = (rep[j] - mean_[j]) * scale_[j];
    Vector prob(classes_.size());
    probabilities(z, prob);
    return prob;
  }

  int predict(std::span<const double> rep) const {
    const Vector prob = decode(rep);
    return classes_[static_cast<std::size_t>(std::max_element(prob.begin(), prob.end()) - prob.begin())];
  }

  double accuracy(const Matrix& x, std::span<const int> labels, std::size_t top = 1) const {
    if (x.rows() != labels.size() || x.rows() == 0) throw ShapeError("BeliefProbe::accuracy: one label per row");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
      const Vector prob = decode(x.row(i));
      std::vector<std::size_t> order(prob.size());
      std::iota(order.begin(), order.end(), 0);
      const std::size_t m = std::min(top, order.size());
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(m), order.end(),
                        [&](std::size_t a, std::size_t b) { return prob[a] > prob[b]; });
      for (std::size_t r = 0; r < m; ++r) hit += classes_[order[r]] == labels[i];
    }
    return static_cast<double>(hit) / static_cast<double>(x.rows());
  }

 private:
  std::size_t class_index(int label) const {
    const auto it = std::lower_bound(classes_.begin(), classes_.end(), label);
    return static_cast<std::size_t>(it - classes_.begin());
  }

  Matrix standardize(const Matrix& x) const {
    Matrix z(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) z(i, j) = (x(i, j) - mean_[j]) * scale_[j];
    return z;
  }

  void probabilities(std::span<const double> z, Vector& prob) const {
    const std::size_t k = mean_.size();
    double mx = -1e300;
    for (std::size_t cl = 0; cl < prob.size(); ++cl) {
      double v = w_(k, cl);
      for (std::size_t j = 0; j < k; ++j) v += z[j] * w_(j, cl);
      prob[cl] = v;
      mx = std::max(mx, v);
    }
    double s = 0;
    for (double& v : prob) s += v = std::exp(v - mx);
    for (double& v : prob) v /= s;
  }

  std::vector<int> classes_;
  Vector mean_, scale_;
  Matrix w_;
};

// Accuracy of always predicting the most frequent training label.
inline double majority_accuracy(std::span<const int> train_labels, std::span<const int> test_labels) {
  if (train_labels.empty() || test_labels.empty()) throw Error("majority_accuracy: empty labels");
  std::map<int, std::size_t> count;
  for (int l : train_labels) ++count[l];
  const int best = std::max_element(count.begin(), count.end(), [](const auto& a, const auto& b) {
                     return a.second < b.second;
                   })->first;
  return static_cast<double>(std::count(test_labels.begin(), test_labels.end(), best)) /
         static_cast<double>(test_labels.size());
}

}  // namespace derex
