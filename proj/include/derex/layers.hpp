#pragma once

// Layer stacks, parameter storage, SGD and checkpoints on top of autodiff.hpp.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "derex/autodiff.hpp"
#include "derex/error.hpp"
#include "derex/stats.hpp"

namespace derex::ad {

enum class LayerKind { linear, conv2d, batchnorm, tanh_rnn_cell, relu, tanh, flatten };
enum class Mode { train, eval };

inline const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::linear: return "linear";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::tanh_rnn_cell: return "tanh_rnn_cell";
    case LayerKind::relu: return "relu";
    case LayerKind::tanh: return "tanh";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.99;

struct LayerSpec {
  LayerKind kind = LayerKind::linear;
  std::size_t in = 0;   // features (linear, batchnorm, rnn input) or input channels (conv2d)
  std::size_t out = 0;  // features, output channels, or rnn hidden size
  std::size_t kernel = 0;
  std::size_t stride = 1;
  bool bn_center = true;  // subtract the batch mean before scaling
  bool bn_affine = true;  // learned scale/shift after normalization

  static LayerSpec linear(std::size_t in, std::size_t out) { return {LayerKind::linear, in, out}; }
  static LayerSpec conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t stride) {
    return {LayerKind::conv2d, in_ch, out_ch, kernel, stride};
  }
  static LayerSpec batchnorm(std::size_t features, bool center = true, bool affine = true) {
    LayerSpec s{LayerKind::batchnorm, features, features};
    s.bn_center = center;
    s.bn_affine = affine;
    return s;
  }
  static LayerSpec rnn(std::size_t in, std::size_t hidden) { return {LayerKind::tanh_rnn_cell, in, hidden}; }
  static LayerSpec relu() { return {LayerKind::relu}; }
  static LayerSpec tanh() { return {LayerKind::tanh}; }
  static LayerSpec flatten() { return {LayerKind::flatten}; }
};

struct Model {
  std::string name;
  std::vector<LayerSpec> layers;
};

inline std::string param_name(const Model& m, std::size_t layer, const char* field) {
  return m.name + "." + std::to_string(layer) + "." + field;
}

inline bool is_running_stat(const std::string& name) {
  auto ends = [&](const char* s) {
    const std::size_t n = std::strlen(s);
    return name.size() >= n && name.compare(name.size() - n, n, s) == 0;
  };
  return ends(".running_mean") || ends(".running_var");
}

class ParamStore {
 public:
  std::uint64_t seed = 0;

  bool has(const std::string& name) const { return values_.count(name) != 0; }
  const Tensor& get(const std::string& name) const {
    auto it = values_.find(name);
    if (it == values_.end()) throw Error("ParamStore: no parameter named '" + name + "'");
    return it->second;
  }
  Tensor& get(const std::string& name) {
    auto it = values_.find(name);
    if (it == values_.end()) throw Error("ParamStore: no parameter named '" + name + "'");
    return it->second;
  }
  void set(const std::string& name, Tensor t) {
    if (!t.all_finite()) throw NonFiniteError("ParamStore: non-finite values for '" + name + "'");
    values_[name] = std::move(t);
  }
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_) out.push_back(k);
    return out;
  }
  std::vector<std::string> trainable_names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_)
      if (!is_running_stat(k)) out.push_back(k);
    return out;
  }
  std::size_t size() const { return values_.size(); }
  const std::map<std::string, Tensor>& items() const { return values_; }

  // Copies every entry of `other` into this store (overwriting).
  void merge(const ParamStore& other) {
    for (const auto& [k, v] : other.values_) values_[k] = v;
  }

  bool all_finite() const {
    for (const auto& [k, v] : values_)
      if (!v.all_finite()) return false;
    return true;
  }

 private:
  std::map<std::string, Tensor> values_;
};

inline Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& x : t.data) x = (2.0 * uniform01(rng) - 1.0) * bound;
  return t;
}

// Adds freshly initialized parameters for every layer of `model`.
inline void init_params(const Model& model, ParamStore& store, Rng& rng) {
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const LayerSpec& l = model.layers[i];
    switch (l.kind) {
      case LayerKind::linear: {
        const double b = std::sqrt(1.0 / static_cast<double>(l.in));
        store.set(param_name(model, i, "weight"), uniform_tensor({l.in, l.out}, b, rng));
        store.set(param_name(model, i, "bias"), uniform_tensor({l.out}, b, rng));
        break;
      }
      case LayerKind::conv2d: {
        const double b = std::sqrt(1.0 / static_cast<double>(l.in * l.kernel * l.kernel));
        store.set(param_name(model, i, "weight"), uniform_tensor({l.out, l.in, l.kernel, l.kernel}, b, rng));
        store.set(param_name(model, i, "bias"), uniform_tensor({l.out}, b, rng));
        break;
      }
      case LayerKind::batchnorm:
        if (l.bn_affine) {
          store.set(param_name(model, i, "gamma"), Tensor({l.in}, 1.0));
          store.set(param_name(model, i, "beta"), Tensor({l.in}, 0.0));
        }
        store.set(param_name(model, i, "running_mean"), Tensor({l.in}, 0.0));
        store.set(param_name(model, i, "running_var"), Tensor({l.in}, 1.0));
        break;
      case LayerKind::tanh_rnn_cell: {
        const double bi = std::sqrt(1.0 / static_cast<double>(l.in));
        const double bh = std::sqrt(1.0 / static_cast<double>(l.out));
        store.set(param_name(model, i, "w_in"), uniform_tensor({l.in, l.out}, bi, rng));
        store.set(param_name(model, i, "w_hidden"), uniform_tensor({l.out, l.out}, bh, rng));
        store.set(param_name(model, i, "bias"), uniform_tensor({l.out}, bh, rng));
        break;
      }
      default: break;
    }
  }
}

// Hands out one graph leaf per parameter for the lifetime of a computation, so
// repeated uses of a parameter accumulate into the same gradient.
class Binding {
 public:
  explicit Binding(ParamStore& store, bool update_running_stats = true)
      : store_(&store), update_running_(update_running_stats) {}

  Var param(const std::string& name) {
    auto it = leaves_.find(name);
    if (it != leaves_.end()) return it->second;
    Var v = leaf(store_->get(name));
    leaves_.emplace(name, v);
    return v;
  }

  ParamStore& store() { return *store_; }
  bool update_running_stats() const { return update_running_; }

  // Gradients of every bound parameter (zeros where no path reached it).
  ParamStore gradients() const {
    ParamStore g;
    g.seed = store_->seed;
    for (const auto& [name, v] : leaves_)
      g.set(name, v->grad.numel() == v->value.numel() ? v->grad : Tensor(v->value.shape, 0.0));
    return g;
  }

 private:
  ParamStore* store_;
  bool update_running_;
  std::map<std::string, Var> leaves_;
};

// One tanh recurrent update: tanh(x W_in + h W_hidden + b).
inline Var rnn_step(Binding& b, const std::string& prefix, const Var& x, const Var& h) {
  Var pre = add(matmul(x, b.param(prefix + ".w_in")), matmul(h, b.param(prefix + ".w_hidden")));
  return tanh(add_row(pre, b.param(prefix + ".bias")));
}

namespace detail {

[[noreturn]] inline void layer_shape_error(std::size_t i, const LayerSpec& l, const Shape& got) {
  throw ShapeError("forward: layer " + std::to_string(i) + " (" + kind_name(l.kind) + ") cannot take input " +
                   shape_to_string(got));
}

inline Var apply_batchnorm(Binding& b, const Model& m, std::size_t i, const LayerSpec& l, const Var& x,
                           Mode mode) {
  Var y;
  Tensor& rm = b.store().get(param_name(m, i, "running_mean"));
  Tensor& rv = b.store().get(param_name(m, i, "running_var"));
  if (mode == Mode::train) {
    BatchStats stats;
    y = batch_normalize(x, kBatchNormEps, l.bn_center, &stats);
    if (b.update_running_stats()) {
      for (std::size_t f = 0; f < l.in; ++f) {
        rm.data[f] = kBatchNormMomentum * rm.data[f] + (1.0 - kBatchNormMomentum) * stats.mean[f];
        rv.data[f] = kBatchNormMomentum * rv.data[f] + (1.0 - kBatchNormMomentum) * stats.second[f];
      }
    }
  } else {
    std::vector<double> mult(l.in);
    for (std::size_t f = 0; f < l.in; ++f) mult[f] = 1.0 / std::sqrt(std::max(rv.data[f], 0.0) + kBatchNormEps);
    y = affine_fixed(x, rm.data, std::move(mult));
  }
  if (l.bn_affine) y = scale_shift(y, b.param(param_name(m, i, "gamma")), b.param(param_name(m, i, "beta")));
  return y;
}

}  // namespace detail

// Builds the graph of `model` applied to `x`. Input layouts: rank 2 (N x F)
// for linear/batchnorm, N x C x H x W for conv2d, N x T x F for a recurrent
// cell (which returns the final hidden state, starting from zero).
inline Var apply(const Model& model, Binding& b, Var x, Mode mode) {
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const LayerSpec& l = model.layers[i];
    const Shape s = x->value.shape;
    switch (l.kind) {
      case LayerKind::linear:
        if (s.size() != 2 || s[1] != l.in) detail::layer_shape_error(i, l, s);
        x = add_row(matmul(x, b.param(param_name(model, i, "weight"))), b.param(param_name(model, i, "bias")));
        break;
      case LayerKind::conv2d:
        if (s.size() != 4 || s[1] != l.in || s[2] < l.kernel || s[3] < l.kernel) detail::layer_shape_error(i, l, s);
        x = conv2d(x, b.param(param_name(model, i, "weight")), b.param(param_name(model, i, "bias")), l.stride);
        break;
      case LayerKind::batchnorm:
        if (s.size() != 2 || s[1] != l.in) detail::layer_shape_error(i, l, s);
        x = detail::apply_batchnorm(b, model, i, l, x, mode);
        break;
      case LayerKind::tanh_rnn_cell: {
        if (s.size() != 3 || s[2] != l.in) detail::layer_shape_error(i, l, s);
        const std::size_t n = s[0], steps = s[1];
        const std::string prefix = model.name + "." + std::to_string(i);
        Var flat = reshape(x, {n * steps, l.in});
        Var h = constant(Tensor({n, l.out}, 0.0));
        for (std::size_t t = 0; t < steps; ++t) {
          std::vector<std::size_t> rows(n);
          for (std::size_t r = 0; r < n; ++r) rows[r] = r * steps + t;
          h = rnn_step(b, prefix, gather_rows(flat, rows), h);
        }
        x = h;
        break;
      }
      case LayerKind::relu: x = relu(x); break;
      case LayerKind::tanh: x = tanh(x); break;
      case LayerKind::flatten:
        if (s.empty()) detail::layer_shape_error(i, l, s);
        x = reshape(x, {s[0], x->value.numel() / std::max<std::size_t>(s[0], 1)});
        break;
    }
    if (!x->value.all_finite())
      throw NonFiniteError("forward: non-finite activation in layer " + std::to_string(i) + " (" +
                           kind_name(l.kind) + ")");
  }
  return x;
}

struct ForwardCache {
  std::optional<Binding> binding;
  Var output;
};

inline Tensor forward(const Model& model, ParamStore& params, const Tensor& batch, Mode mode,
                      ForwardCache* cache = nullptr) {
  Binding b(params);
  Var out = apply(model, b, constant(batch), mode);
  if (cache) {
    cache->binding.emplace(std::move(b));
    cache->output = out;
  }
  return out->value;
}

inline ParamStore backward(ForwardCache& cache, const Tensor& upstream) {
  if (!cache.binding || !cache.output) throw Error("backward: no cached forward pass");
  ad::backward(cache.output, &upstream);
  ParamStore g = cache.binding->gradients();
  cache = ForwardCache{};
  return g;
}

using LossBuilder = std::function<Var(Binding&)>;

// Max over trainable parameter entries of |analytic - central difference| /
// max(1, |analytic|). Running statistics are left untouched.
// When the forward and backward differences disagree by far more than
// curvature allows, a ReLU kink lies within h of the point; the analytic
// gradient is then compared to the one-sided difference closer to it, since
// only one side crosses the kink.
inline double grad_check(const LossBuilder& loss, const ParamStore& params, double h = 1e-5) {
  ParamStore work = params;
  ParamStore analytic;
  double f0 = 0.0;
  {
    Binding b(work, false);
    Var l = loss(b);
    f0 = l->value.item();
    ad::backward(l);
    analytic = b.gradients();
  }
  double worst = 0.0;
  for (const std::string& name : analytic.trainable_names()) {
    Tensor& p = work.get(name);
    const Tensor& g = analytic.get(name);
    for (std::size_t k = 0; k < p.numel(); ++k) {
      const double orig = p.data[k];
      p.data[k] = orig + h;
      Binding bp(work, false);
      const double fp = loss(bp)->value.item();
      p.data[k] = orig - h;
      Binding bm(work, false);
      const double fm = loss(bm)->value.item();
      p.data[k] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double fwd = (fp - f0) / h, bwd = (f0 - fm) / h;
      double err = std::abs(g.data[k] - numeric);
      if (std::abs(fwd - bwd) > 1e-3 * std::max(1.0, std::abs(numeric)))
        err = std::min({err, std::abs(g.data[k] - fwd), std::abs(g.data[k] - bwd)});
      worst = std::max(worst, err / std::max(1.0, std::abs(g.data[k])));
    }
  }
  return worst;
}

inline double grad_check(const Model& model, const ParamStore& params, const std::function<Var(const Var&)>& loss_fn,
                         const Tensor& batch, double h = 1e-5) {
  return grad_check([&](Binding& b) { return loss_fn(apply(model, b, constant(batch), Mode::train)); }, params, h);
}

struct Sgd {
  double lr = 1e-2;
  double momentum = 0.0;
  double clip_norm = 0.0;  // global gradient-norm clip; 0 disables
  std::map<std::string, Tensor> velocity;

  void step(ParamStore& params, const ParamStore& grads) {
    double scale = 1.0;
    if (clip_norm > 0.0) {
      double sq = 0.0;
      for (const auto& [k, g] : grads.items())
        for (double x : g.data) sq += x * x;
      const double norm = std::sqrt(sq);
      if (norm > clip_norm) scale = clip_norm / norm;
    }
    for (const auto& [name, g] : grads.items()) {
      if (is_running_stat(name)) continue;
      Tensor& p = params.get(name);
      Tensor& v = velocity.try_emplace(name, Tensor(g.shape, 0.0)).first->second;
      for (std::size_t i = 0; i < p.numel(); ++i) {
        v.data[i] = momentum * v.data[i] + scale * g.data[i];
        p.data[i] -= lr * v.data[i];
      }
      if (!p.all_finite()) throw NonFiniteError("Sgd: parameter '" + name + "' became non-finite");
    }
  }
};

// Checkpoint: "derex-params 1 <seed> <count>\n", then per array a line
// "<name> <rank> <dims...>\n" followed by the little-endian f64 payload.
inline void save_params(std::ostream& os, const ParamStore& store) {
  os << "derex-params 1 " << store.seed << ' ' << store.size() << '\n';
  for (const auto& [name, t] : store.items()) {
    os << name << ' ' << t.shape.size();
    for (std::size_t d : t.shape) os << ' ' << d;
    os << '\n';
    for (double x : t.data) {
      std::uint64_t bits = std::bit_cast<std::uint64_t>(x);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
      char buf[8];
      std::memcpy(buf, &bits, 8);
      os.write(buf, 8);
    }
  }
  if (!os) throw Error("save_params: write failed");
}

inline ParamStore load_params(std::istream& is) {
  std::string magic, line;
  int version = 0;
  std::size_t count = 0;
  ParamStore store;
  if (!(is >> magic >> version >> store.seed >> count) || magic != "derex-params" || version != 1)
    throw Error("load_params: not a parameter checkpoint");
  std::getline(is, line);
  for (std::size_t n = 0; n < count; ++n) {
    if (!std::getline(is, line)) throw Error("load_params: truncated header");
    std::istringstream hs(line);
    std::string name;
    std::size_t rank = 0;
    hs >> name >> rank;
    Shape shape(rank);
    for (auto& d : shape) hs >> d;
    if (!hs) throw Error("load_params: malformed header line '" + line + "'");
    Tensor t(shape);
    for (double& x : t.data) {
      char buf[8];
      if (!is.read(buf, 8)) throw Error("load_params: truncated payload for '" + name + "'");
      std::uint64_t bits;
      std::memcpy(&bits, buf, 8);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
      x = std::bit_cast<double>(bits);
    }
    store.set(name, std::move(t));
  }
  return store;
}

inline void save_params(const std::string& path, const ParamStore& store) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("save_params: cannot open " + path);
  save_params(os, store);
}

inline ParamStore load_params(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("load_params: cannot open " + path);
  return load_params(is);
}

}  // namespace derex::ad
