#pragma once

// 11x11 four-rooms gridworld: dynamics, rendering, and random-policy data
// collection in tabular, pixel, and hidden-marker regimes.

#include <array>
#include <cstdint>
#include <cmath>
#include <cstdio>
#include <deque>
#include <span>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "derex/error.hpp"
#include "derex/matrix.hpp"
#include "derex/stats.hpp"

namespace derex {

inline constexpr int kGridSize = 11;
inline constexpr int kNumCells = kGridSize * kGridSize;
inline constexpr int kNumActions = 4;
inline constexpr int kImageSize = 30;
inline constexpr int kImageChannels = 3;
inline constexpr int kImageBytes = kImageSize * kImageSize * kImageChannels;
inline constexpr int kCellPixels = 2;
inline constexpr int kImageBorder = (kImageSize - kGridSize * kCellPixels) / 2;
inline constexpr int kEpisodeHorizon = 250;

enum Action : int { kUp = 0, kDown = 1, kLeft = 2, kRight = 3 };

inline constexpr int cell_of(int row, int col) { return row * kGridSize + col; }
inline constexpr int row_of(int cell) { return cell / kGridSize; }
inline constexpr int col_of(int cell) { return cell % kGridSize; }

// Row-major HWC bytes.
using Image = std::array<std::uint8_t, kImageBytes>;

class FourRooms {
 public:
  FourRooms() {
    for (int r = 0; r < kGridSize; ++r)
      for (int c = 0; c < kGridSize; ++c) {
        const bool border = r == 0 || c == 0 || r == kGridSize - 1 || c == kGridSize - 1;
        const bool cross = r == kGridSize / 2 || c == kGridSize / 2;
        wall_[cell_of(r, c)] = border || cross;
      }
    for (int d : doorways_) wall_[d] = false;
    for (int c = 0; c < kNumCells; ++c) {
      dense_[c] = wall_[c] ? -1 : static_cast<int>(free_.size());
      if (!wall_[c]) free_.push_back(c);
    }
  }

  static constexpr int start_cell() { return cell_of(1, 1); }
  static constexpr int goal_cell() { return cell_of(9, 9); }

  // Left/right doors in the vertical wall, then top/bottom doors in the horizontal wall.
  const std::array<int, 4>& doorways() const { return doorways_; }

  bool is_wall(int cell) const { return cell < 0 || cell >= kNumCells || wall_[cell]; }
  const std::vector<int>& free_cells() const { return free_; }
  int num_free() const { return static_cast<int>(free_.size()); }
  // Index of a free cell within free_cells(), or -1 for walls.
  int dense_index(int cell) const { return dense_[cell]; }

  int step(int cell, int action) const {
    if (action < 0 || action >= kNumActions) throw Error("step: invalid action id " + std::to_string(action));
    if (is_wall(cell)) throw Error("step: state " + std::to_string(cell) + " is a wall cell");
    static constexpr int dr[4] = {-1, 1, 0, 0};
    static constexpr int dc[4] = {0, 0, -1, 1};
    const int nr = row_of(cell) + dr[action], nc = col_of(cell) + dc[action];
    if (nr < 0 || nc < 0 || nr >= kGridSize || nc >= kGridSize) return cell;
    const int next = cell_of(nr, nc);
    return wall_[next] ? cell : next;
  }

  std::vector<int> reachable_from(int cell) const {
    std::vector<bool> seen(kNumCells, false);
    std::vector<int> out;
    std::deque<int> q{cell};
    seen[cell] = true;
    while (!q.empty()) {
      const int c = q.front();
      q.pop_front();
      out.push_back(c);
      for (int a = 0; a < kNumActions; ++a) {
        const int n = step(c, a);
        if (!seen[n]) {
          seen[n] = true;
          q.push_back(n);
        }
      }
    }
    return out;
  }

  Image render(int cell, bool hide) const {
    if (is_wall(cell)) throw Error("render: state " + std::to_string(cell) + " is a wall cell");
    Image img{};
    for (int y = 0; y < kImageSize; ++y)
      for (int x = 0; x < kImageSize; ++x) {
        const int gy = y - kImageBorder, gx = x - kImageBorder;
        bool floor = false;
        if (gy >= 0 && gx >= 0 && gy < kGridSize * kCellPixels && gx < kGridSize * kCellPixels)
          floor = !wall_[cell_of(gy / kCellPixels, gx / kCellPixels)];
        const std::uint8_t v = floor ? 128 : 0;
        for (int ch = 0; ch < kImageChannels; ++ch) img[(y * kImageSize + x) * kImageChannels + ch] = v;
      }
    if (!hide) {
      const int y0 = kImageBorder + row_of(cell) * kCellPixels, x0 = kImageBorder + col_of(cell) * kCellPixels;
      for (int y = y0; y < y0 + kCellPixels; ++y)
        for (int x = x0; x < x0 + kCellPixels; ++x) {
          std::uint8_t* px = &img[(y * kImageSize + x) * kImageChannels];
          px[0] = 255;
          px[1] = 0;
          px[2] = 0;
        }
    }
    return img;
  }

  // ASCII map: '#' wall, '.' floor, 'S' start, 'G' goal.
  std::string ascii() const {
    std::string out;
    for (int r = 0; r < kGridSize; ++r) {
      for (int c = 0; c < kGridSize; ++c) {
        const int cell = cell_of(r, c);
        out += cell == start_cell() ? 'S' : cell == goal_cell() ? 'G' : wall_[cell] ? '#' : '.';
      }
      out += '\n';
    }
    return out;
  }

 private:
  std::array<int, 4> doorways_{cell_of(2, 5), cell_of(7, 5), cell_of(5, 2), cell_of(5, 7)};
  std::array<bool, kNumCells> wall_{};
  std::array<int, kNumCells> dense_{};
  std::vector<int> free_;
};

// Action probabilities per cell (kNumCells x kNumActions); wall rows unused.
inline Matrix uniform_policy() { return Matrix(kNumCells, kNumActions, 1.0 / kNumActions); }

// P_pi restricted to free cells, indexed by FourRooms::dense_index.
inline Matrix exact_transition_matrix(const FourRooms& env, const Matrix& policy) {
  if (policy.rows() != static_cast<std::size_t>(kNumCells) || policy.cols() != static_cast<std::size_t>(kNumActions))
    throw ShapeError("exact_transition_matrix: policy must be " + shape_str(kNumCells, kNumActions));
  const auto n = static_cast<std::size_t>(env.num_free());
  Matrix p(n, n);
  for (int s : env.free_cells())
    for (int a = 0; a < kNumActions; ++a)
      p(env.dense_index(s), env.dense_index(env.step(s, a))) += policy(s, a);
  return p;
}

inline Matrix exact_transition_matrix(const FourRooms& env) { return exact_transition_matrix(env, uniform_policy()); }

// Embeds a free-cell-indexed matrix into the full 121-cell index space.
inline Matrix embed_cells(const FourRooms& env, const Matrix& dense) {
  const auto& fc = env.free_cells();
  if (dense.rows() != fc.size() || dense.cols() != fc.size())
    throw ShapeError("embed_cells: expected " + shape_str(fc.size(), fc.size()));
  Matrix out(kNumCells, kNumCells);
  for (std::size_t i = 0; i < fc.size(); ++i)
    for (std::size_t j = 0; j < fc.size(); ++j) out(fc[i], fc[j]) = dense(i, j);
  return out;
}

inline Vector embed_cells(const FourRooms& env, std::span<const double> dense) {
  Vector out(kNumCells, 0.0);
  for (std::size_t i = 0; i < env.free_cells().size(); ++i) out[env.free_cells()[i]] = dense[i];
  return out;
}

// Power iteration for the left fixed point of a row-stochastic matrix.
inline Vector stationary_distribution(const Matrix& p, int max_iters = 100000, double tol = 1e-14) {
  const std::size_t n = p.rows();
  Vector d(n, 1.0 / static_cast<double>(n));
  for (int it = 0; it < max_iters; ++it) {
    Vector next(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) next[j] += 0.5 * d[i] * p(i, j);
    for (std::size_t i = 0; i < n; ++i) next[i] += 0.5 * d[i];  // lazy chain: aperiodic
    double diff = 0.0;
    for (std::size_t i = 0; i < n; ++i) diff = std::max(diff, std::abs(next[i] - d[i]));
    d = std::move(next);
    if (diff < tol) return d;
  }
  throw ConvergenceError("stationary_distribution: power iteration did not converge", 0.0);
}

// Average state distribution over the first `horizon` steps from `start`.
inline Vector expected_visitation(const Matrix& p, std::size_t start, std::size_t horizon) {
  const std::size_t n = p.rows();
  Vector cur(n, 0.0), acc(n, 0.0);
  cur[start] = 1.0;
  for (std::size_t t = 0; t < horizon; ++t) {
    for (std::size_t i = 0; i < n; ++i) acc[i] += cur[i] / static_cast<double>(horizon);
    Vector next(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      if (cur[i] != 0.0)
        for (std::size_t j = 0; j < n; ++j) next[j] += cur[i] * p(i, j);
    cur = std::move(next);
  }
  return acc;
}

enum class Encoder { onehot, pixel };

inline const char* encoder_name(Encoder e) { return e == Encoder::onehot ? "onehot" : "pixel"; }
inline Encoder parse_encoder(const std::string& s) {
  if (s == "onehot") return Encoder::onehot;
  if (s == "pixel") return Encoder::pixel;
  throw ConfigError("unknown encoder '" + s + "' (expected onehot or pixel)");
}

struct Transition {
  int s = 0;
  int a = 0;
  double r = 0.0;
  int s_next = 0;
  bool operator==(const Transition&) const = default;
};

struct TransitionDataset {
  std::vector<Transition> tuples;
  Encoder encoder = Encoder::onehot;
  std::uint64_t seed = 0;
  Vector d;  // empirical source-state distribution over all 121 cells

  std::size_t size() const { return tuples.size(); }

  void recompute_distribution() {
    d.assign(kNumCells, 0.0);
    if (tuples.empty()) return;
    for (const auto& t : tuples) d[t.s] += 1.0;
    for (double& x : d) x /= static_cast<double>(tuples.size());
  }
};

inline Vector one_hot(int cell) {
  Vector v(kNumCells, 0.0);
  v[cell] = 1.0;
  return v;
}

// Features of a state under the given encoder: 121 one-hot entries, or
// 2700 image values in [0,1].
inline Vector encode_state(const FourRooms& env, int cell, Encoder enc) {
  if (enc == Encoder::onehot) return one_hot(cell);
  const Image img = env.render(cell, false);
  Vector v(kImageBytes);
  for (int i = 0; i < kImageBytes; ++i) v[i] = img[i] / 255.0;
  return v;
}

struct CollectOptions {
  int start = FourRooms::start_cell();
  // Reset to `start` every this many steps; 0 runs one continuous walk.
  std::size_t episode_length = 0;
  // When set (a distribution over the 121 cells), sources are drawn i.i.d.
  // from it instead of following a walk.
  std::optional<Vector> iid_sources;
};

// Uniform random policy data. Rewards are zero.
inline TransitionDataset collect_transitions(const FourRooms& env, std::size_t n, std::uint64_t seed,
                                             Encoder enc = Encoder::onehot, const CollectOptions& opt = {}) {
  if (n == 0) throw Error("collect_transitions: n must be >= 1");
  if (env.is_wall(opt.start)) throw Error("collect_transitions: start is a wall cell");
  Rng rng(seed);
  TransitionDataset ds;
  ds.encoder = enc;
  ds.seed = seed;
  ds.tuples.reserve(n);
  int s = opt.start;
  for (std::size_t i = 0; i < n; ++i) {
    if (opt.iid_sources) {
      s = static_cast<int>(sample_categorical(rng, *opt.iid_sources));
      if (env.is_wall(s)) throw Error("collect_transitions: source distribution has mass on a wall");
    } else if (opt.episode_length && i % opt.episode_length == 0) {
      s = opt.start;
    }
    const int a = static_cast<int>(uniform_index(rng, kNumActions));
    const int s2 = env.step(s, a);
    ds.tuples.push_back({s, a, 0.0, s2});
    s = s2;
  }
  ds.recompute_distribution();
  return ds;
}

struct Trajectory {
  std::vector<int> states;      // T+1 ground-truth cells (probes only)
  std::vector<int> actions;     // T
  std::vector<std::uint8_t> hidden;  // T+1 marker-hidden flags
  std::size_t length() const { return actions.size(); }
};

struct TrajectoryDataset {
  std::vector<Trajectory> trajectories;
  double hide_prob = 0.0;
  std::uint64_t seed = 0;
  std::size_t horizon = kEpisodeHorizon;

  Image observation(const FourRooms& env, std::size_t traj, std::size_t t) const {
    const Trajectory& tr = trajectories.at(traj);
    return env.render(tr.states.at(t), tr.hidden.at(t) != 0);
  }
};

enum class TrajectoryStart { uniform, fixed };

// Uniform-policy trajectories starting from a uniformly drawn free cell (or the
// fixed start cell); each frame hides the marker independently with
// probability `hide_prob`.
inline TrajectoryDataset collect_trajectories(const FourRooms& env, double hide_prob, std::size_t n,
                                              std::uint64_t seed, std::size_t horizon = kEpisodeHorizon,
                                              TrajectoryStart start = TrajectoryStart::uniform) {
  if (!(hide_prob >= 0.0 && hide_prob <= 1.0)) throw Error("collect_trajectories: p must lie in [0, 1]");
  Rng rng(seed);
  TrajectoryDataset ds;
  ds.hide_prob = hide_prob;
  ds.seed = seed;
  ds.horizon = horizon;
  for (std::size_t i = 0; i < n; ++i) {
    Trajectory tr;
    int s = start == TrajectoryStart::fixed ? FourRooms::start_cell()
                                            : env.free_cells()[uniform_index(rng, env.free_cells().size())];
    tr.states.push_back(s);
    tr.hidden.push_back(uniform01(rng) < hide_prob);
    for (std::size_t t = 0; t < horizon; ++t) {
      const int a = static_cast<int>(uniform_index(rng, kNumActions));
      s = env.step(s, a);
      tr.actions.push_back(a);
      tr.states.push_back(s);
      tr.hidden.push_back(uniform01(rng) < hide_prob);
    }
    ds.trajectories.push_back(std::move(tr));
  }
  return ds;
}

// ---- files -------------------------------------------------------------------

inline void write_ppm(std::ostream& os, const Image& img) {
  os << "P6\n" << kImageSize << ' ' << kImageSize << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.data()), kImageBytes);
}

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("write_ppm: cannot open " + path);
  write_ppm(os, img);
}

inline Image read_ppm(std::istream& is) {
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  if (!(is >> magic >> w >> h >> maxv) || magic != "P6" || w != kImageSize || h != kImageSize || maxv != 255)
    throw Error("read_ppm: expected a 30x30 P6 image");
  is.get();
  Image img;
  if (!is.read(reinterpret_cast<char*>(img.data()), kImageBytes)) throw Error("read_ppm: truncated pixels");
  return img;
}

// Header "derex-transitions <n> <encoder> <p> <seed>", then one "s a r s'" line
// per record. Pixel datasets follow each line with the raw source and next
// frames (byte triples).
inline void write_transitions(std::ostream& os, const FourRooms& env, const TransitionDataset& ds) {
  os << "derex-transitions " << ds.size() << ' ' << encoder_name(ds.encoder) << " 0 " << ds.seed << '\n';
  char buf[64];
  for (const auto& t : ds.tuples) {
    std::snprintf(buf, sizeof buf, "%.17g", t.r);
    os << t.s << ' ' << t.a << ' ' << buf << ' ' << t.s_next << '\n';
    if (ds.encoder == Encoder::pixel) {
      for (int c : {t.s, t.s_next}) {
        const Image img = env.render(c, false);
        os.write(reinterpret_cast<const char*>(img.data()), kImageBytes);
      }
    }
  }
  if (!os) throw Error("write_transitions: write failed");
}

inline TransitionDataset read_transitions(std::istream& is, const FourRooms& env) {
  std::string magic, enc;
  std::size_t n = 0;
  double p = 0.0;
  TransitionDataset ds;
  if (!(is >> magic >> n >> enc >> p >> ds.seed) || magic != "derex-transitions")
    throw Error("read_transitions: missing header");
  ds.encoder = parse_encoder(enc);
  is.get();
  std::string line;
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::getline(is, line)) throw Error("read_transitions: truncated at record " + std::to_string(i));
    std::istringstream ls(line);
    Transition t;
    std::string r;
    if (!(ls >> t.s >> t.a >> r >> t.s_next)) throw Error("read_transitions: malformed record '" + line + "'");
    t.r = std::stod(r);
    if (env.is_wall(t.s) || env.is_wall(t.s_next) || t.a < 0 || t.a >= kNumActions)
      throw Error("read_transitions: invalid record '" + line + "'");
    if (ds.encoder == Encoder::pixel) {
      Image img;
      for (int c : {t.s, t.s_next}) {
        if (!is.read(reinterpret_cast<char*>(img.data()), kImageBytes)) throw Error("read_transitions: truncated frame");
        if (img != env.render(c, false)) throw Error("read_transitions: frame does not match its state");
      }
    }
    ds.tuples.push_back(t);
  }
  ds.recompute_distribution();
  return ds;
}

// Header "derex-trajectories <n> <horizon> <p> <seed>"; per trajectory three
// text lines (actions, states, hide flags) then the T+1 frames as raw bytes.
inline void write_trajectories(std::ostream& os, const FourRooms& env, const TrajectoryDataset& ds) {
  char pbuf[64];
  std::snprintf(pbuf, sizeof pbuf, "%.17g", ds.hide_prob);
  os << "derex-trajectories " << ds.trajectories.size() << ' ' << ds.horizon << ' ' << pbuf << ' ' << ds.seed
     << '\n';
  for (std::size_t i = 0; i < ds.trajectories.size(); ++i) {
    const Trajectory& tr = ds.trajectories[i];
    auto line = [&](const auto& v) {
      for (std::size_t k = 0; k < v.size(); ++k) os << (k ? " " : "") << static_cast<int>(v[k]);
      os << '\n';
    };
    line(tr.actions);
    line(tr.states);
    line(tr.hidden);
    for (std::size_t t = 0; t < tr.states.size(); ++t) {
      const Image img = ds.observation(env, i, t);
      os.write(reinterpret_cast<const char*>(img.data()), kImageBytes);
    }
  }
  if (!os) throw Error("write_trajectories: write failed");
}

inline TrajectoryDataset read_trajectories(std::istream& is, const FourRooms& env) {
  std::string magic;
  std::size_t n = 0;
  TrajectoryDataset ds;
  if (!(is >> magic >> n >> ds.horizon >> ds.hide_prob >> ds.seed) || magic != "derex-trajectories")
    throw Error("read_trajectories: missing header");
  is.get();
  auto read_ints = [&](std::size_t count) {
    std::string line;
    if (!std::getline(is, line)) throw Error("read_trajectories: truncated");
    std::istringstream ls(line);
    std::vector<int> v(count);
    for (int& x : v)
      if (!(ls >> x)) throw Error("read_trajectories: short line");
    return v;
  };
  for (std::size_t i = 0; i < n; ++i) {
    Trajectory tr;
    tr.actions = read_ints(ds.horizon);
    tr.states = read_ints(ds.horizon + 1);
    for (int h : read_ints(ds.horizon + 1)) tr.hidden.push_back(static_cast<std::uint8_t>(h != 0));
    Image img;
    for (std::size_t t = 0; t <= ds.horizon; ++t) {
      if (env.is_wall(tr.states[t])) throw Error("read_trajectories: wall state in trajectory");
      if (!is.read(reinterpret_cast<char*>(img.data()), kImageBytes)) throw Error("read_trajectories: truncated frame");
      if (img != env.render(tr.states[t], tr.hidden[t] != 0))
        throw Error("read_trajectories: frame does not match its state");
    }
    ds.trajectories.push_back(std::move(tr));
  }
  return ds;
}

}  // namespace derex
