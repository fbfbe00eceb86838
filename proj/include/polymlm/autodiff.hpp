// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "polymlm/error.hpp"
#include "polymlm/rng.hpp"
#include "polymlm/tensor.hpp"

namespace polymlm {

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t i) const { return value().dim(i); }
};

/// Reverse-mode tape. Nodes are appended in forward order and replayed in
/// exactly the reverse order, so backward is deterministic.
///
/// A tape belongs to a single worker; parameters registered with param()
/// accumulate their gradients directly into the caller's Tensor.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::span<const double> grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf holding a caller-owned parameter; gradients land in p.grad().
  Var param(Tensor& p) {
    p.set_requires_grad(true);
    p.ensure_grad();
    Node n;
    n.external = &p;
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  /// Leaf that never receives a gradient.
  Var constant(Tensor t) {
    Node n;
    n.owned = std::move(t);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  /// Records an op output. `fn` runs during backward only if some parent
  /// requires a gradient.
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn,
             const char* op_name) {
    value.check_finite(op_name);
    bool rg = false;
    for (const auto& p : parents) {
      check_owner(p);
      rg = rg || nodes_[p.id].requires_grad;
    }
    Node n;
    n.owned = std::move(value);
    n.requires_grad = rg;
    if (rg) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value(); }
  bool requires_grad(const Var& v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient accumulator for a node; allocated on first use.
  std::span<double> grad(const Var& v) {
    Node& n = nodes_.at(v.id);
    if (n.external) return n.external->ensure_grad();
    if (n.grad.size() != n.owned.numel()) n.grad.assign(n.owned.numel(), 0.0);
    return n.grad;
  }

  /// Runs reverse accumulation from a scalar root with seed gradient 1.
  void backward(const Var& root) {
    check_owner(root);
    if (value(root.id).numel() != 1) {
      throw DimensionError("backward root must be a scalar, got " +
                           shape_str(value(root.id).shape()));
    }
    if (!nodes_[root.id].requires_grad) return;
    grad(root)[0] += 1.0;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      for (double g : n.grad) {
        if (!std::isfinite(g)) throw NumericError("non-finite gradient during backward");
      }
      n.backward(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned;
    Tensor* external = nullptr;
    std::vector<double> grad;
    bool requires_grad = false;
    BackwardFn backward;
    const Tensor& value() const { return external ? *external : owned; }
  };

  void check_owner(const Var& v) const {
    if (v.tape != this || v.id >= nodes_.size()) {
      throw Error(ErrorKind::kProtocol, "variable does not belong to this tape");
    }
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

inline constexpr double kInvSqrt2 = 0.70710678118654752440;

namespace detail {

inline void require_rank(const Var& v, std::size_t r, const char* op) {
  if (v.value().rank() != r) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) +
                         " tensor, got " + shape_str(v.shape()));
  }
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

inline void axpy(std::span<double> dst, std::span<const double> src, double s = 1.0) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += s * src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and shape ops

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = a.value();
  out.drop_grad();
  auto od = out.data();
  auto bd = b.value().data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] += bd[i];
  return a.tape->record(std::move(out), {a, b},
                        [a, b](Tape& t, std::span<const double> g) {
                          if (t.requires_grad(a)) detail::axpy(t.grad(a), g);
                          if (t.requires_grad(b)) detail::axpy(t.grad(b), g);
                        },
                        "add");
}

/// x[N x n] + bias[n] broadcast over rows.
inline Var add_bias(const Var& x, const Var& bias) {
  detail::require_rank(x, 2, "add_bias");
  const std::size_t n = x.dim(1);
  if (bias.value().numel() != n) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " vs rows " +
                         shape_str(x.shape()));
  }
  Tensor out(x.shape());
  auto xd = x.value().data();
  auto bd = bias.value().data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = xd[i] + bd[i % n];
  return x.tape->record(std::move(out), {x, bias},
                        [x, bias, n](Tape& t, std::span<const double> g) {
                          if (t.requires_grad(x)) detail::axpy(t.grad(x), g);
                          if (t.requires_grad(bias)) {
                            auto gb = t.grad(bias);
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
                          }
                        },
                        "add_bias");
}

inline Var scale(const Var& x, double s) {
  Tensor out = x.value();
  out.drop_grad();
  for (auto& v : out.data()) v *= s;
  return x.tape->record(std::move(out), {x},
                        [x, s](Tape& t, std::span<const double> g) {
                          detail::axpy(t.grad(x), g, s);
                        },
                        "scale");
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  auto ad = a.value().data();
  auto bd = b.value().data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * bd[i];
  return a.tape->record(std::move(out), {a, b},
                        [a, b](Tape& t, std::span<const double> g) {
                          auto ad = a.value().data();
                          auto bd = b.value().data();
                          if (t.requires_grad(a)) {
                            auto ga = t.grad(a);
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bd[i];
                          }
                          if (t.requires_grad(b)) {
                            auto gb = t.grad(b);
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ad[i];
                          }
                        },
                        "mul");
}

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape->record(Tensor::scalar(s), {x},
                        [x](Tape& t, std::span<const double> g) {
                          for (auto& v : t.grad(x)) v += g[0];
                        },
                        "sum");
}

inline Var reshape(const Var& x, Shape s) {
  Tensor out = x.value().reshaped(std::move(s));
  return x.tape->record(std::move(out), {x},
                        [x](Tape& t, std::span<const double> g) {
                          detail::axpy(t.grad(x), g);
                        },
                        "reshape");
}

inline Var transpose(const Var& x) {
  detail::require_rank(x, 2, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor out({c, r});
  const auto& xv = x.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = xv.at(i, j);
  return x.tape->record(std::move(out), {x},
                        [x, r, c](Tape& t, std::span<const double> g) {
                          auto gx = t.grad(x);
                          for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
                        },
                        "transpose");
}

/// Exact GELU, 0.5 x (1 + erf(x / sqrt 2)).
inline Var gelu(const Var& x) {
  Tensor out(x.shape());
  auto xd = x.value().data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) {
    od[i] = 0.5 * xd[i] * (1.0 + std::erf(xd[i] * kInvSqrt2));
  }
  return x.tape->record(std::move(out), {x},
                        [x](Tape& t, std::span<const double> g) {
                          auto xd = x.value().data();
                          auto gx = t.grad(x);
                          constexpr double kInvSqrt2Pi = 0.3989422804014327;
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            const double v = xd[i];
                            const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                            gx[i] += g[i] * (cdf + v * pdf);
                          }
                        },
                        "gelu");
}

inline Var tanh(const Var& x) {
  Tensor out(x.shape());
  auto xd = x.value().data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = std::tanh(xd[i]);
  const Tape* tp = x.tape;
  const std::size_t out_id = tp->size();
  return x.tape->record(std::move(out), {x},
                        [x, out_id](Tape& t, std::span<const double> g) {
                          auto yd = t.value(out_id).data();
                          auto gx = t.grad(x);
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            gx[i] += g[i] * (1.0 - yd[i] * yd[i]);
                          }
                        },
                        "tanh");
}

/// Inverted dropout. rate == 0 returns x unchanged (no node recorded).
inline Var dropout(const Var& x, double rate, std::uint64_t seed) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
  Rng rng(seed);
  auto keep = std::make_shared<std::vector<double>>(x.value().numel());
  const double s = 1.0 / (1.0 - rate);
  for (auto& k : *keep) k = rng.uniform() >= rate ? s : 0.0;
  Tensor out(x.shape());
  auto xd = x.value().data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = xd[i] * (*keep)[i];
  return x.tape->record(std::move(out), {x},
                        [x, keep](Tape& t, std::span<const double> g) {
                          auto gx = t.grad(x);
                          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*keep)[i];
                        },
                        "dropout");
}

/// Positions where mask is nonzero are replaced by `fill`; no gradient flows
/// through them.
inline Var masked_fill(const Var& x, std::vector<std::uint8_t> mask, double fill) {
  if (mask.size() != x.value().numel()) {
    throw DimensionError("masked_fill: mask length does not match " + shape_str(x.shape()));
  }
  Tensor out = x.value();
  out.drop_grad();
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) out[i] = fill;
  auto m = std::make_shared<std::vector<std::uint8_t>>(std::move(mask));
  return x.tape->record(std::move(out), {x},
                        [x, m](Tape& t, std::span<const double> g) {
                          auto gx = t.grad(x);
                          for (std::size_t i = 0; i < g.size(); ++i)
                            if (!(*m)[i]) gx[i] += g[i];
                        },
                        "masked_fill");
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents disagree, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  Tensor out({m, n});
  kernels::mm_nn(a.value().data().data(), b.value().data().data(), out.data().data(), m, k, n);
  return a.tape->record(std::move(out), {a, b},
                        [a, b, m, k, n](Tape& t, std::span<const double> g) {
                          if (t.requires_grad(a)) {
                            // dA = dC * B^T
                            kernels::mm_nt(g.data(), b.value().data().data(),
                                           t.grad(a).data(), m, n, k);
                          }
                          if (t.requires_grad(b)) {
                            // dB = A^T * dC
                            kernels::mm_tn(a.value().data().data(), g.data(),
                                           t.grad(b).data(), m, k, n);
                          }
                        },
                        "matmul");
}

/// a[m x k] * b[n x k]^T without materializing the transpose.
inline Var matmul_nt(const Var& a, const Var& b) {
  detail::require_rank(a, 2, "matmul_nt");
  detail::require_rank(b, 2, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: inner extents disagree, " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()) + "^T");
  }
  Tensor out({m, n});
  kernels::mm_nt(a.value().data().data(), b.value().data().data(), out.data().data(), m, k, n);
  return a.tape->record(std::move(out), {a, b},
                        [a, b, m, k, n](Tape& t, std::span<const double> g) {
                          if (t.requires_grad(a)) {
                            // dA = dC * B
                            kernels::mm_nn(g.data(), b.value().data().data(),
                                           t.grad(a).data(), m, n, k);
                          }
                          if (t.requires_grad(b)) {
                            // dB = dC^T * A
                            kernels::mm_tn(g.data(), a.value().data().data(),
                                           t.grad(b).data(), m, n, k);
                          }
                        },
                        "matmul_nt");
}

// ---------------------------------------------------------------------------
// Normalization and probabilities

/// Softmax along `axis` with max subtraction.
inline Tensor softmax_values(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " +
                         shape_str(x.shape()));
  }
  const std::size_t n = x.dim(axis);
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  const std::size_t outer = x.numel() / (n * inner);
  Tensor out(x.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[base + j * inner]);
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(x[base + j * inner] - mx);
        out[base + j * inner] = e;
        s += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= s;
    }
  }
  return out;
}

inline Var softmax(const Var& x, std::size_t axis) {
  Tensor out = softmax_values(x.value(), axis);
  const std::size_t n = x.dim(axis);
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < x.value().rank(); ++d) inner *= x.dim(d);
  const std::size_t outer = x.value().numel() / (n * inner);
  const std::size_t out_id = x.tape->size();
  return x.tape->record(
      std::move(out), {x},
      [x, out_id, n, inner, outer](Tape& t, std::span<const double> g) {
        const auto& y = t.value(out_id);
        auto gx = t.grad(x);
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
            for (std::size_t j = 0; j < n; ++j) {
              const std::size_t idx = base + j * inner;
              gx[idx] += y[idx] * (g[idx] - dot);
            }
          }
        }
      },
      "softmax");
}

/// Normalizes each row of x[... x H] to zero mean and unit variance (eps
/// inside the square root), then applies gain and bias.
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
  const std::size_t h = x.shape().back();
  if (gain.value().numel() != h || bias.value().numel() != h) {
    throw DimensionError("layer_norm: gain/bias must have " + std::to_string(h) +
                         " elements, got " + shape_str(gain.shape()) + " and " +
                         shape_str(bias.shape()));
  }
  const std::size_t rows = x.value().numel() / h;
  auto xhat = std::make_shared<std::vector<double>>(x.value().numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  Tensor out(x.shape());
  auto xd = x.value().data();
  auto gd = gain.value().data();
  auto bd = bias.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xd.data() + r * h;
    double mean = 0.0;
    for (std::size_t j = 0; j < h; ++j) mean += xr[j];
    mean /= static_cast<double>(h);
    double var = 0.0;
    for (std::size_t j = 0; j < h; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(h);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < h; ++j) {
      const double xh = (xr[j] - mean) * rs;
      (*xhat)[r * h + j] = xh;
      out[r * h + j] = xh * gd[j] + bd[j];
    }
  }
  return x.tape->record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, xhat, rstd, h, rows](Tape& t, std::span<const double> g) {
        auto gd = gain.value().data();
        if (t.requires_grad(gain)) {
          auto gg = t.grad(gain);
          for (std::size_t i = 0; i < g.size(); ++i) gg[i % h] += g[i] * (*xhat)[i];
        }
        if (t.requires_grad(bias)) {
          auto gb = t.grad(bias);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i % h] += g[i];
        }
        if (t.requires_grad(x)) {
          auto gx = t.grad(x);
          const double inv_h = 1.0 / static_cast<double>(h);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < h; ++j) {
              const double d = g[r * h + j] * gd[j];
              mean_d += d;
              mean_dx += d * (*xhat)[r * h + j];
            }
            mean_d *= inv_h;
            mean_dx *= inv_h;
            for (std::size_t j = 0; j < h; ++j) {
              const double d = g[r * h + j] * gd[j];
              gx[r * h + j] += (*rstd)[r] * (d - mean_d - (*xhat)[r * h + j] * mean_dx);
            }
          }
        }
      },
      "layer_norm");
}

/// Per-row loss term log(sum exp(l - max)) + max - l[target]. The vocab
/// sharded loss evaluates the same expression from reduced pieces.
inline double row_nll(double log_sum, double max, double target_logit) {
  return (std::log(log_sum) + max) - target_logit;
}

/// Mean negative log-likelihood over positions whose target != ignore_index.
inline Var cross_entropy(const Var& logits, const std::vector<std::int64_t>& targets,
                         std::int64_t ignore_index = -100) {
  detail::require_rank(logits, 2, "cross_entropy");
  const std::size_t n = logits.dim(0), v = logits.dim(1);
  if (targets.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + shape_str(logits.shape()) + " logits");
  }
  const auto& lv = logits.value();
  auto probs = std::make_shared<std::vector<double>>(n * v);
  std::size_t active = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] == ignore_index) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v) {
      throw IndexError("cross_entropy: target " + std::to_string(targets[i]) +
                       " outside vocabulary of " + std::to_string(v));
    }
    const double* row = lv.data().data() + i * v;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      const double e = std::exp(row[j] - mx);
      (*probs)[i * v + j] = e;
      s += e;
    }
    for (std::size_t j = 0; j < v; ++j) (*probs)[i * v + j] /= s;
    total += row_nll(s, mx, row[targets[i]]);
    ++active;
  }
  if (active == 0) throw NumericError("cross_entropy: every position is ignored; loss undefined");
  const double inv = 1.0 / static_cast<double>(active);
  return logits.tape->record(
      Tensor::scalar(total * inv), {logits},
      [logits, targets, ignore_index, probs, n, v, inv](Tape& t, std::span<const double> g) {
        auto gl = t.grad(logits);
        const double s = g[0] * inv;
        for (std::size_t i = 0; i < n; ++i) {
          if (targets[i] == ignore_index) continue;
          for (std::size_t j = 0; j < v; ++j) gl[i * v + j] += s * (*probs)[i * v + j];
          gl[i * v + static_cast<std::size_t>(targets[i])] -= s;
        }
      },
      "cross_entropy");
}

// ---------------------------------------------------------------------------
// Indexing

/// Rows of table[V x H] selected by ids; returns [ids.size() x H].
inline Var embedding(const Var& table, const std::vector<std::int64_t>& ids) {
  detail::require_rank(table, 2, "embedding");
  const std::size_t v = table.dim(0), h = table.dim(1);
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  Tensor out({ids.size(), h});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw IndexError("embedding: id " + std::to_string(ids[i]) + " outside [0," +
                       std::to_string(v) + ")");
    }
    std::copy_n(table.value().data().data() + ids[i] * h, h, out.data().data() + i * h);
  }
  return table.tape->record(std::move(out), {table},
                            [table, ids, h](Tape& t, std::span<const double> g) {
                              auto gt = t.grad(table);
                              for (std::size_t i = 0; i < ids.size(); ++i) {
                                for (std::size_t j = 0; j < h; ++j) {
                                  gt[ids[i] * h + j] += g[i * h + j];
                                }
                              }
                            },
                            "embedding");
}

/// x[N x H] restricted to the listed rows, in order.
inline Var select_rows(const Var& x, const std::vector<std::size_t>& rows) {
  detail::require_rank(x, 2, "select_rows");
  const std::size_t n = x.dim(0), h = x.dim(1);
  if (rows.empty()) throw DimensionError("select_rows: empty row list");
  Tensor out({rows.size(), h});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw IndexError("select_rows: row " + std::to_string(rows[i]) + " >= " + std::to_string(n));
    std::copy_n(x.value().data().data() + rows[i] * h, h, out.data().data() + i * h);
  }
  return x.tape->record(std::move(out), {x},
                        [x, rows, h](Tape& t, std::span<const double> g) {
                          auto gx = t.grad(x);
                          for (std::size_t i = 0; i < rows.size(); ++i)
                            for (std::size_t j = 0; j < h; ++j) gx[rows[i] * h + j] += g[i * h + j];
                        },
                        "select_rows");
}

/// Column block [begin, begin + width) of x[N x C].
inline Var slice_columns(const Var& x, std::size_t begin, std::size_t width) {
  detail::require_rank(x, 2, "slice_columns");
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (begin + width > c || width == 0) {
    throw DimensionError("slice_columns: [" + std::to_string(begin) + "," +
                         std::to_string(begin + width) + ") outside " + shape_str(x.shape()));
  }
  Tensor out({n, width});
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(x.value().data().data() + i * c + begin, width, out.data().data() + i * width);
  return x.tape->record(std::move(out), {x},
                        [x, n, c, begin, width](Tape& t, std::span<const double> g) {
                          auto gx = t.grad(x);
                          for (std::size_t i = 0; i < n; ++i)
                            for (std::size_t j = 0; j < width; ++j) gx[i * c + begin + j] += g[i * width + j];
                        },
                        "slice_columns");
}

// ---------------------------------------------------------------------------
// Attention

/// Receives the post-softmax attention probabilities of every call, laid
/// out [batch][head][query][key].
struct AttentionProbe {
  std::vector<Tensor> probabilities;
};

struct AttentionOptions {
  std::size_t batch = 1;
  std::size_t seq = 1;
  std::size_t heads = 1;
  /// Optional [batch * seq] flags; keys with 0 receive no attention.
  const std::vector<std::uint8_t>* key_valid = nullptr;
  double dropout = 0.0;
  std::uint64_t dropout_seed = 0;
  AttentionProbe* probe = nullptr;
};

/// Scaled dot-product attention over q, k, v of shape [batch*seq x heads*dh].
/// Bidirectional: every query sees every valid key.
inline Var multi_head_attention(const Var& q, const Var& k, const Var& v,
                                const AttentionOptions& opt) {
  detail::require_same_shape(q, k, "attention");
  detail::require_same_shape(q, v, "attention");
  detail::require_rank(q, 2, "attention");
  const std::size_t B = opt.batch, T = opt.seq, nh = opt.heads;
  const std::size_t width = q.dim(1);
  if (q.dim(0) != B * T || nh == 0 || width % nh != 0) {
    throw DimensionError("attention: " + shape_str(q.shape()) + " incompatible with batch " +
                         std::to_string(B) + ", seq " + std::to_string(T) + ", heads " +
                         std::to_string(nh));
  }
  if (opt.key_valid && opt.key_valid->size() != B * T) {
    throw DimensionError("attention: key mask must have batch*seq entries");
  }
  const std::size_t dh = width / nh;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();

  // probs: softmax output; drop: scale applied per probability (1 when no dropout)
  auto probs = std::make_shared<std::vector<double>>(B * nh * T * T, 0.0);
  auto drop = std::make_shared<std::vector<double>>();
  Rng rng(opt.dropout_seed);
  if (opt.dropout > 0.0) drop->resize(probs->size());
  const double keep_scale = opt.dropout > 0.0 ? 1.0 / (1.0 - opt.dropout) : 1.0;

  Tensor out({B * T, width});
  std::vector<double> srow(T);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t hd = 0; hd < nh; ++hd) {
      double* P = probs->data() + (b * nh + hd) * T * T;
      for (std::size_t i = 0; i < T; ++i) {
        const double* qi = qv.data().data() + (b * T + i) * width + hd * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < T; ++j) {
          if (opt.key_valid && !(*opt.key_valid)[b * T + j]) continue;
          const double* kj = kv.data().data() + (b * T + j) * width + hd * dh;
          double s = 0.0;
          for (std::size_t d = 0; d < dh; ++d) s += qi[d] * kj[d];
          srow[j] = s * sc;
          mx = std::max(mx, srow[j]);
        }
        if (!std::isfinite(mx)) throw DimensionError("attention: a sequence has no valid keys");
        double z = 0.0;
        for (std::size_t j = 0; j < T; ++j) {
          if (opt.key_valid && !(*opt.key_valid)[b * T + j]) continue;
          P[i * T + j] = std::exp(srow[j] - mx);
          z += P[i * T + j];
        }
        for (std::size_t j = 0; j < T; ++j) P[i * T + j] /= z;
        double* oi = out.data().data() + (b * T + i) * width + hd * dh;
        for (std::size_t j = 0; j < T; ++j) {
          double p = P[i * T + j];
          if (opt.dropout > 0.0) {
            const double keep = rng.uniform() >= opt.dropout ? keep_scale : 0.0;
            (*drop)[(b * nh + hd) * T * T + i * T + j] = keep;
            p *= keep;
          }
          if (p == 0.0) continue;
          const double* vj = vv.data().data() + (b * T + j) * width + hd * dh;
          for (std::size_t d = 0; d < dh; ++d) oi[d] += p * vj[d];
        }
      }
    }
  }
  if (opt.probe) {
    opt.probe->probabilities.push_back(Tensor({B, nh, T, T}, *probs));
  }

  return q.tape->record(
      std::move(out), {q, k, v},
      [q, k, v, probs, drop, B, T, nh, dh, width, sc](Tape& t, std::span<const double> g) {
        const auto& qv = q.value();
        const auto& kv = k.value();
        const auto& vv = v.value();
        const bool gq = t.requires_grad(q), gk = t.requires_grad(k), gv = t.requires_grad(v);
        std::span<double> dq, dk, dv;
        if (gq) dq = t.grad(q);
        if (gk) dk = t.grad(k);
        if (gv) dv = t.grad(v);
        std::vector<double> dp(T);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t hd = 0; hd < nh; ++hd) {
            const double* P = probs->data() + (b * nh + hd) * T * T;
            const double* D = drop->empty() ? nullptr : drop->data() + (b * nh + hd) * T * T;
            for (std::size_t i = 0; i < T; ++i) {
              const double* gi = g.data() + (b * T + i) * width + hd * dh;
              // dP_ij = (dO_i . V_j) * keep_ij ; dV_j += P_ij keep_ij dO_i
              double dot = 0.0;
              for (std::size_t j = 0; j < T; ++j) {
                const double pij = P[i * T + j];
                const double keep = D ? D[i * T + j] : 1.0;
                const double* vj = vv.data().data() + (b * T + j) * width + hd * dh;
                double s = 0.0;
                for (std::size_t d = 0; d < dh; ++d) s += gi[d] * vj[d];
                dp[j] = s * keep;
                dot += dp[j] * pij;
                if (gv && pij * keep != 0.0) {
                  double* dvj = dv.data() + (b * T + j) * width + hd * dh;
                  for (std::size_t d = 0; d < dh; ++d) dvj[d] += pij * keep * gi[d];
                }
              }
              const double* qi = qv.data().data() + (b * T + i) * width + hd * dh;
              for (std::size_t j = 0; j < T; ++j) {
                const double pij = P[i * T + j];
                if (pij == 0.0) continue;
                const double ds = pij * (dp[j] - dot) * sc;
                const double* kj = kv.data().data() + (b * T + j) * width + hd * dh;
                if (gq) {
                  double* dqi = dq.data() + (b * T + i) * width + hd * dh;
                  for (std::size_t d = 0; d < dh; ++d) dqi[d] += ds * kj[d];
                }
                if (gk) {
                  double* dkj = dk.data() + (b * T + j) * width + hd * dh;
                  for (std::size_t d = 0; d < dh; ++d) dkj[d] += ds * qi[d];
                }
              }
            }
          }
        }
      },
      "attention");
}

}  // namespace polymlm
