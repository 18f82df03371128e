#pragma once

// Reverse-mode differentiation over a small, fixed vocabulary of tensor ops.
// A graph is built eagerly as ops are applied; `backward` walks it in
// reverse topological order.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "derex/error.hpp"
#include "derex/matrix.hpp"

namespace derex::ad {

using Shape = std::vector<std::size_t>;

inline std::string shape_to_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(numel_of(shape), fill) {}
  Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel_of(shape))
      throw ShapeError("Tensor: data length " + std::to_string(data.size()) + " does not match shape " +
                       shape_to_string(shape));
  }

  static Tensor from_matrix(const Matrix& m) { return Tensor({m.rows(), m.cols()}, m.storage()); }
  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  Matrix to_matrix() const {
    if (shape.size() != 2) throw ShapeError("Tensor::to_matrix: expected rank 2, got " + shape_to_string(shape));
    return Matrix(shape[0], shape[1], data);
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::size_t cols() const { return shape.empty() ? 1 : numel() / std::max<std::size_t>(shape[0], 1); }
  double& operator()(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }
  double item() const {
    if (data.size() != 1) throw ShapeError("Tensor::item: tensor has " + std::to_string(data.size()) + " elements");
    return data[0];
  }
  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double x) { return std::isfinite(x); });
  }
  bool operator==(const Tensor&) const = default;
};

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::string op;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor& grad_buffer() {
    if (grad.data.size() != value.data.size()) grad = Tensor(value.shape, 0.0);
    return grad;
  }
};

using Var = std::shared_ptr<Node>;

inline Var constant(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  n->op = "constant";
  return n;
}

inline Var leaf(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  n->requires_grad = true;
  n->op = "leaf";
  return n;
}

namespace detail {

inline Var make(Tensor value, std::string op, std::vector<Var> parents, std::function<void(Node&)> bw) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = std::move(op);
  n->requires_grad = std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p->requires_grad; });
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(bw);
  }
  return n;
}

inline void require_rank2(const Var& v, const char* op) {
  if (v->value.shape.size() != 2)
    throw ShapeError(std::string(op) + ": expected rank-2 input, got " + shape_to_string(v->value.shape));
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a->value.shape != b->value.shape)
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a->value.shape) + " vs " +
                     shape_to_string(b->value.shape));
}

}  // namespace detail

// Runs reverse accumulation from `root`. A scalar root is seeded with 1;
// otherwise `seed` must match its shape.
inline void backward(const Var& root, const Tensor* seed = nullptr) {
  if (!root->requires_grad) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order) n->grad = Tensor(n->value.shape, 0.0);
  if (seed) {
    if (seed->shape != root->value.shape)
      throw ShapeError("backward: seed shape " + shape_to_string(seed->shape) + " does not match output " +
                       shape_to_string(root->value.shape));
    root->grad = *seed;
  } else {
    if (root->value.numel() != 1) throw ShapeError("backward: non-scalar root requires an explicit seed");
    root->grad.data[0] = 1.0;
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

// ---- elementwise and structural ops ---------------------------------------

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += b->value.data[i];
  return detail::make(std::move(out), "add", {a, b}, [a, b](Node& n) {
    for (const Var& p : {a, b})
      if (p->requires_grad) {
        auto& g = p->grad_buffer().data;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad.data[i];
      }
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= b->value.data[i];
  return detail::make(std::move(out), "sub", {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      auto& g = a->grad_buffer().data;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad.data[i];
    }
    if (b->requires_grad) {
      auto& g = b->grad_buffer().data;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad.data[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= b->value.data[i];
  return detail::make(std::move(out), "mul", {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      auto& g = a->grad_buffer().data;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad.data[i] * b->value.data[i];
    }
    if (b->requires_grad) {
      auto& g = b->grad_buffer().data;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad.data[i] * a->value.data[i];
    }
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out = a->value;
  for (double& x : out.data) x *= s;
  return detail::make(std::move(out), "scale", {a}, [a, s](Node& n) {
    auto& g = a->grad_buffer().data;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * n.grad.data[i];
  });
}

inline Var square(const Var& a) { return mul(a, a); }

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double x : a->value.data) s += x;
  return detail::make(Tensor::scalar(s), "sum", {a}, [a](Node& n) {
    auto& g = a->grad_buffer().data;
    const double up = n.grad.data[0];
    for (double& x : g) x += up;
  });
}

inline Var tanh(const Var& a) {
  Tensor out = a->value;
  for (double& x : out.data) x = std::tanh(x);
  auto node = detail::make(std::move(out), "tanh", {a}, nullptr);
  if (node->requires_grad) {
    Node* self = node.get();
    node->backward_fn = [a, self](Node& n) {
      auto& g = a->grad_buffer().data;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double y = self->value.data[i];
        g[i] += n.grad.data[i] * (1.0 - y * y);
      }
    };
  }
  return node;
}

inline Var relu(const Var& a) {
  Tensor out = a->value;
  for (double& x : out.data) x = x > 0.0 ? x : 0.0;
  return detail::make(std::move(out), "relu", {a}, [a](Node& n) {
    auto& g = a->grad_buffer().data;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (a->value.data[i] > 0.0) g[i] += n.grad.data[i];
  });
}

// Identity in the forward pass; contributes no derivative upstream.
inline Var stop_gradient(const Var& a) {
  auto n = std::make_shared<Node>();
  n->value = a->value;
  n->op = "stop_gradient";
  return n;
}

inline Var reshape(const Var& a, Shape shape) {
  if (numel_of(shape) != a->value.numel())
    throw ShapeError("reshape: cannot view " + shape_to_string(a->value.shape) + " as " + shape_to_string(shape));
  Tensor out(std::move(shape), a->value.data);
  return detail::make(std::move(out), "reshape", {a}, [a](Node& n) {
    auto& g = a->grad_buffer().data;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad.data[i];
  });
}

// ---- matrix ops (rank 2) ---------------------------------------------------

namespace detail {
// c += a * b with a: m x p, b: p x n (row-major raw buffers).
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t p, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t k = 0; k < p; ++k) {
      const double aik = a[i * p + k];
      if (aik == 0.0) continue;
      const double* brow = b + k * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
}
// c += a^T * b with a: p x m, b: p x n.
inline void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t p, std::size_t m, std::size_t n) {
  for (std::size_t k = 0; k < p; ++k) {
    const double* arow = a + k * m;
    const double* brow = b + k * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aki * brow[j];
    }
  }
}
// c += a * b^T with a: m x p, b: n x p.
inline void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t p, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * p;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * p;
      double s = 0.0;
      for (std::size_t k = 0; k < p; ++k) s += arow[k] * brow[k];
      c[i * n + j] += s;
    }
  }
}
}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t m = a->value.shape[0], p = a->value.shape[1], n = b->value.shape[1];
  if (b->value.shape[0] != p)
    throw ShapeError("matmul: shape mismatch " + shape_to_string(a->value.shape) + " * " +
                     shape_to_string(b->value.shape));
  Tensor out({m, n}, 0.0);
  detail::gemm_acc(a->value.data.data(), b->value.data.data(), out.data.data(), m, p, n);
  return detail::make(std::move(out), "matmul", {a, b}, [a, b, m, p, n](Node& nd) {
    if (a->requires_grad)  // dA = dC * B^T
      detail::gemm_nt_acc(nd.grad.data.data(), b->value.data.data(), a->grad_buffer().data.data(), m, n, p);
    if (b->requires_grad)  // dB = A^T * dC
      detail::gemm_tn_acc(a->value.data.data(), nd.grad.data.data(), b->grad_buffer().data.data(), m, p, n);
  });
}

// a^T * b without materializing the transpose.
inline Var matmul_tn(const Var& a, const Var& b) {
  detail::require_rank2(a, "matmul_tn");
  detail::require_rank2(b, "matmul_tn");
  const std::size_t p = a->value.shape[0], m = a->value.shape[1], n = b->value.shape[1];
  if (b->value.shape[0] != p)
    throw ShapeError("matmul_tn: shape mismatch " + shape_to_string(a->value.shape) + "^T * " +
                     shape_to_string(b->value.shape));
  Tensor out({m, n}, 0.0);
  detail::gemm_tn_acc(a->value.data.data(), b->value.data.data(), out.data.data(), p, m, n);
  return detail::make(std::move(out), "matmul_tn", {a, b}, [a, b, p, m, n](Node& nd) {
    if (a->requires_grad)  // dA = B * dC^T  (p x m)
      detail::gemm_nt_acc(b->value.data.data(), nd.grad.data.data(), a->grad_buffer().data.data(), p, n, m);
    if (b->requires_grad)  // dB = A * dC (p x n)
      detail::gemm_acc(a->value.data.data(), nd.grad.data.data(), b->grad_buffer().data.data(), p, m, n);
  });
}

inline Var transpose(const Var& a) {
  detail::require_rank2(a, "transpose");
  const std::size_t r = a->value.shape[0], c = a->value.shape[1];
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.data[j * r + i] = a->value.data[i * c + j];
  return detail::make(std::move(out), "transpose", {a}, [a, r, c](Node& n) {
    auto& g = a->grad_buffer().data;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += n.grad.data[j * r + i];
  });
}

// m (r x c) + row (1 x c or {c}) broadcast over rows.
inline Var add_row(const Var& m, const Var& row) {
  detail::require_rank2(m, "add_row");
  const std::size_t r = m->value.shape[0], c = m->value.shape[1];
  if (row->value.numel() != c)
    throw ShapeError("add_row: row of " + shape_to_string(row->value.shape) + " vs matrix " +
                     shape_to_string(m->value.shape));
  Tensor out = m->value;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] += row->value.data[j];
  return detail::make(std::move(out), "add_row", {m, row}, [m, row, r, c](Node& n) {
    if (m->requires_grad) {
      auto& g = m->grad_buffer().data;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad.data[i];
    }
    if (row->requires_grad) {
      auto& g = row->grad_buffer().data;
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[j] += n.grad.data[i * c + j];
    }
  });
}

// Rows of `a` selected by index (duplicates allowed); gradients scatter-add.
inline Var gather_rows(const Var& a, std::vector<std::size_t> idx) {
  detail::require_rank2(a, "gather_rows");
  const std::size_t c = a->value.shape[1];
  Tensor out({idx.size(), c});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= a->value.shape[0]) throw ShapeError("gather_rows: index out of range");
    std::copy_n(a->value.data.begin() + static_cast<std::ptrdiff_t>(idx[i] * c), c,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  return detail::make(std::move(out), "gather_rows", {a}, [a, idx = std::move(idx), c](Node& n) {
    auto& g = a->grad_buffer().data;
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) g[idx[i] * c + j] += n.grad.data[i * c + j];
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t c = parts[0]->value.cols();
  std::size_t r = 0;
  for (const Var& p : parts) {
    detail::require_rank2(p, "concat_rows");
    if (p->value.shape[1] != c) throw ShapeError("concat_rows: column mismatch");
    r += p->value.shape[0];
  }
  Tensor out({r, c});
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p->value.data.begin(), p->value.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += p->value.numel();
  }
  return detail::make(std::move(out), "concat_rows", parts, [parts](Node& n) {
    std::size_t o = 0;
    for (const Var& p : parts) {
      if (p->requires_grad) {
        auto& g = p->grad_buffer().data;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad.data[o + i];
      }
      o += p->value.numel();
    }
  });
}

// Side-by-side concatenation of rank-2 inputs with equal row counts.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t r = parts[0]->value.rows();
  std::size_t c = 0;
  for (const Var& p : parts) {
    detail::require_rank2(p, "concat_cols");
    if (p->value.shape[0] != r) throw ShapeError("concat_cols: row mismatch");
    c += p->value.shape[1];
  }
  Tensor out({r, c});
  std::size_t off = 0;
  for (const Var& p : parts) {
    const std::size_t pc = p->value.shape[1];
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(p->value.data.begin() + static_cast<std::ptrdiff_t>(i * pc), pc,
                  out.data.begin() + static_cast<std::ptrdiff_t>(i * c + off));
    off += pc;
  }
  return detail::make(std::move(out), "concat_cols", parts, [parts, r, c](Node& n) {
    std::size_t o = 0;
    for (const Var& p : parts) {
      const std::size_t pc = p->value.shape[1];
      if (p->requires_grad) {
        auto& g = p->grad_buffer().data;
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < pc; ++j) g[i * pc + j] += n.grad.data[i * c + o + j];
      }
      o += pc;
    }
  });
}

// ---- layer primitives ------------------------------------------------------

// x: N x C x H x W, w: O x C x K x K, b: O. Valid padding.
inline Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t stride) {
  const Shape& xs = x->value.shape;
  const Shape& ws = w->value.shape;
  if (xs.size() != 4 || ws.size() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || b->value.numel() != ws[0])
    throw ShapeError("conv2d: incompatible input " + shape_to_string(xs) + " and kernel " + shape_to_string(ws));
  const std::size_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const std::size_t O = ws[0], K = ws[2];
  if (H < K || W < K || stride == 0) throw ShapeError("conv2d: kernel larger than input");
  const std::size_t OH = (H - K) / stride + 1, OW = (W - K) / stride + 1;
  Tensor out({N, O, OH, OW});
  const double* xd = x->value.data.data();
  const double* wd = w->value.data.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t oy = 0; oy < OH; ++oy)
        for (std::size_t ox = 0; ox < OW; ++ox) {
          double s = b->value.data[o];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ky = 0; ky < K; ++ky) {
              const double* xrow = xd + ((n * C + c) * H + oy * stride + ky) * W + ox * stride;
              const double* wrow = wd + ((o * C + c) * K + ky) * K;
              for (std::size_t kx = 0; kx < K; ++kx) s += xrow[kx] * wrow[kx];
            }
          out.data[((n * O + o) * OH + oy) * OW + ox] = s;
        }
  return detail::make(std::move(out), "conv2d", {x, w, b},
                      [x, w, b, N, C, H, W, O, K, OH, OW, stride](Node& nd) {
                        const double* g = nd.grad.data.data();
                        double* gx = x->requires_grad ? x->grad_buffer().data.data() : nullptr;
                        double* gw = w->requires_grad ? w->grad_buffer().data.data() : nullptr;
                        double* gb = b->requires_grad ? b->grad_buffer().data.data() : nullptr;
                        const double* xd = x->value.data.data();
                        const double* wd = w->value.data.data();
                        for (std::size_t n = 0; n < N; ++n)
                          for (std::size_t o = 0; o < O; ++o)
                            for (std::size_t oy = 0; oy < OH; ++oy)
                              for (std::size_t ox = 0; ox < OW; ++ox) {
                                const double up = g[((n * O + o) * OH + oy) * OW + ox];
                                if (up == 0.0) continue;
                                if (gb) gb[o] += up;
                                for (std::size_t c = 0; c < C; ++c)
                                  for (std::size_t ky = 0; ky < K; ++ky) {
                                    const std::size_t xoff = ((n * C + c) * H + oy * stride + ky) * W + ox * stride;
                                    const std::size_t woff = ((o * C + c) * K + ky) * K;
                                    for (std::size_t kx = 0; kx < K; ++kx) {
                                      if (gw) gw[woff + kx] += up * xd[xoff + kx];
                                      if (gx) gx[xoff + kx] += up * wd[woff + kx];
                                    }
                                  }
                              }
                      });
}

struct BatchStats {
  std::vector<double> mean;    // per feature (zero when not centering)
  std::vector<double> second;  // variance, or raw second moment when not centering
};

// Train-mode batch normalization over rows of a rank-2 input, without the
// affine part. With center=false only the per-feature second moment is
// normalized (no mean subtraction).
inline Var batch_normalize(const Var& x, double eps, bool center, BatchStats* stats_out = nullptr) {
  detail::require_rank2(x, "batch_normalize");
  const std::size_t N = x->value.shape[0], F = x->value.shape[1];
  if (N == 0) throw ShapeError("batch_normalize: empty batch");
  std::vector<double> mu(F, 0.0), var(F, 0.0);
  const auto& xd = x->value.data;
  if (center) {
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t f = 0; f < F; ++f) mu[f] += xd[i * F + f];
    for (double& m : mu) m /= static_cast<double>(N);
  }
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t f = 0; f < F; ++f) {
      const double d = xd[i * F + f] - mu[f];
      var[f] += d * d;
    }
  for (double& v : var) v /= static_cast<double>(N);
  std::vector<double> inv(F);
  for (std::size_t f = 0; f < F; ++f) inv[f] = 1.0 / std::sqrt(var[f] + eps);
  Tensor out({N, F});
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t f = 0; f < F; ++f) out.data[i * F + f] = (xd[i * F + f] - mu[f]) * inv[f];
  if (stats_out) *stats_out = {mu, var};
  auto node = detail::make(std::move(out), center ? "batchnorm" : "batchnorm_uncentered", {x}, nullptr);
  if (node->requires_grad) {
    Node* self = node.get();
    node->backward_fn = [x, self, inv, N, F, center](Node& n) {
      auto& g = x->grad_buffer().data;
      const auto& y = self->value.data;
      const double dn = static_cast<double>(N);
      for (std::size_t f = 0; f < F; ++f) {
        double sg = 0.0, sgy = 0.0;
        for (std::size_t i = 0; i < N; ++i) {
          sg += n.grad.data[i * F + f];
          sgy += n.grad.data[i * F + f] * y[i * F + f];
        }
        for (std::size_t i = 0; i < N; ++i) {
          const double gi = n.grad.data[i * F + f];
          const double yi = y[i * F + f];
          const double centered = center ? gi - sg / dn : gi;
          g[i * F + f] += inv[f] * (centered - yi * sgy / dn);
        }
      }
    };
  }
  return node;
}

// (x - shift) * mult per feature, with shift/mult fixed (eval-mode batchnorm).
inline Var affine_fixed(const Var& x, std::vector<double> shift, std::vector<double> mult) {
  detail::require_rank2(x, "affine_fixed");
  const std::size_t N = x->value.shape[0], F = x->value.shape[1];
  if (shift.size() != F || mult.size() != F) throw ShapeError("affine_fixed: feature mismatch");
  Tensor out = x->value;
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t f = 0; f < F; ++f) out.data[i * F + f] = (out.data[i * F + f] - shift[f]) * mult[f];
  return detail::make(std::move(out), "affine_fixed", {x}, [x, mult, N, F](Node& n) {
    auto& g = x->grad_buffer().data;
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t f = 0; f < F; ++f) g[i * F + f] += n.grad.data[i * F + f] * mult[f];
  });
}

// x * gamma + beta per feature (gamma, beta of length F).
inline Var scale_shift(const Var& x, const Var& gamma, const Var& beta) {
  detail::require_rank2(x, "scale_shift");
  const std::size_t N = x->value.shape[0], F = x->value.shape[1];
  if (gamma->value.numel() != F || beta->value.numel() != F) throw ShapeError("scale_shift: feature mismatch");
  Tensor out({N, F});
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t f = 0; f < F; ++f)
      out.data[i * F + f] = x->value.data[i * F + f] * gamma->value.data[f] + beta->value.data[f];
  return detail::make(std::move(out), "scale_shift", {x, gamma, beta}, [x, gamma, beta, N, F](Node& n) {
    if (x->requires_grad) {
      auto& g = x->grad_buffer().data;
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t f = 0; f < F; ++f) g[i * F + f] += n.grad.data[i * F + f] * gamma->value.data[f];
    }
    if (gamma->requires_grad) {
      auto& g = gamma->grad_buffer().data;
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t f = 0; f < F; ++f) g[f] += n.grad.data[i * F + f] * x->value.data[i * F + f];
    }
    if (beta->requires_grad) {
      auto& g = beta->grad_buffer().data;
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t f = 0; f < F; ++f) g[f] += n.grad.data[i * F + f];
    }
  });
}

}  // namespace derex::ad
