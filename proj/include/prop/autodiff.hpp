#pragma once

// Reverse-mode gradients over a linear tape of dense-tensor primitives.
//
// A Tape owns every intermediate value produced while building a loss. Inputs
// enter either as constants (no gradient) or as named trainable parameters.
// Operations whose inputs are all constants are evaluated eagerly and carry no
// backward closure, so a frozen backbone costs nothing on the backward pass.

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "prop/errors.hpp"
#include "prop/tensor.hpp"

namespace prop::ad {

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  bool requires_grad() const;
};

using Gradients = std::map<std::string, Tensor>;

class Tape {
 public:
  /// Accumulates into the gradients of the parents. `parent_grads[i]` is null
  /// when parent i does not require a gradient.
  using BackwardFn =
      std::function<void(const Tape&, const Tensor& grad_out, std::span<Tensor* const> parent_grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), {}, nullptr, false, {}); }

  Var parameter(std::string name, Tensor value) {
    if (name.empty()) throw ContractError("parameter name must be non-empty");
    return push(std::move(value), {}, nullptr, true, std::move(name));
  }

  Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn fn) {
    bool needs = false;
    for (auto p : parents) needs = needs || nodes_.at(p).requires_grad;
    if (!needs) return push(std::move(value), {}, nullptr, false, {});
    return push(std::move(value), std::move(parents), std::move(fn), true, {});
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Node ids in the order the most recent backward() processed them.
  const std::vector<std::size_t>& last_backward_order() const noexcept { return visit_order_; }

  /// Gradient of a scalar loss with respect to every trainable parameter on
  /// this tape. Parameters that do not reach the loss get an all-zero entry;
  /// parameters registered under the same name accumulate.
  Gradients backward(Var loss) {
    if (loss.tape != this) throw ContractError("backward: loss belongs to a different tape");
    const Tensor& lv = value(loss.id);
    if (!lv.is_scalar()) {
      throw ContractError("backward: loss must be a scalar, got shape " + shape_string(lv.shape()));
    }
    std::vector<std::optional<Tensor>> grads(nodes_.size());
    visit_order_.clear();
    if (nodes_[loss.id].requires_grad) grads[loss.id] = Tensor(lv.shape(), real(1));

    std::vector<Tensor*> pgrads;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad) continue;
      visit_order_.push_back(i);
      if (!grads[i] || !n.backward) continue;
      pgrads.clear();
      for (auto p : n.parents) {
        if (!nodes_[p].requires_grad) {
          pgrads.push_back(nullptr);
          continue;
        }
        if (!grads[p]) grads[p] = Tensor(nodes_[p].value.shape());
        pgrads.push_back(&*grads[p]);
      }
      n.backward(*this, *grads[i], pgrads);
    }

    Gradients out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      if (n.param.empty()) continue;
      Tensor g = grads[i] ? std::move(*grads[i]) : Tensor(n.value.shape());
      auto it = out.find(n.param);
      if (it == out.end()) {
        out.emplace(n.param, std::move(g));
      } else {
        if (it->second.shape() != g.shape()) {
          throw ContractError("parameter '" + n.param + "' registered with two shapes");
        }
        for (std::size_t k = 0; k < g.size(); ++k) it->second[k] += g[k];
      }
    }
    return out;
  }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
    std::string param;
  };

  Var push(Tensor value, std::vector<std::size_t> parents, BackwardFn fn, bool rg, std::string name) {
    if constexpr (kCheckFinite) value.check_finite("tape value");
    nodes_.push_back(Node{std::move(value), std::move(parents), std::move(fn), rg, std::move(name)});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::vector<std::size_t> visit_order_;
};

inline const Tensor& Var::value() const { return tape->value(id); }
inline bool Var::requires_grad() const { return tape->requires_grad(id); }

namespace detail {

inline Tape& same_tape(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) throw ContractError("operands live on different tapes");
  return *a.tape;
}

// out += a * b^T
inline void accumulate_matmul_nt(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  for (std::size_t i = 0; i < m; ++i) {
    const real* ar = a.data().data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const real* br = b.data().data() + j * k;
      real s = 0;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
      out(i, j) += s;
    }
  }
}

// out += a^T * b
inline void accumulate_matmul_tn(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t i = 0; i < m; ++i) {
      const real av = a(p, i);
      real* orow = out.data().data() + i * n;
      const real* brow = b.data().data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

inline void accumulate(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

constexpr real kGeluC = real(0.7978845608028654);  // sqrt(2/pi)
constexpr real kGeluA = real(0.044715);

}  // namespace detail

inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  Tensor out = prop::matmul(a.value(), b.value());
  return t.record(std::move(out), {a.id, b.id},
                  [ia = a.id, ib = b.id](const Tape& tp, const Tensor& g, std::span<Tensor* const> pg) {
                    if (pg[0]) detail::accumulate_matmul_nt(g, tp.value(ib), *pg[0]);
                    if (pg[1]) detail::accumulate_matmul_tn(tp.value(ia), g, *pg[1]);
                  });
}

inline Var transpose(Var a) {
  return a.tape->record(prop::transpose(a.value()), {a.id},
                        [](const Tape&, const Tensor& g, std::span<Tensor* const> pg) {
                          detail::accumulate(*pg[0], prop::transpose(g));
                        });
}

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() != bv.shape()) {
    throw DimensionError("add: shapes differ " + shape_string(av.shape()) + " vs " + shape_string(bv.shape()));
  }
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return t.record(std::move(out), {a.id, b.id}, [](const Tape&, const Tensor& g, std::span<Tensor* const> pg) {
    if (pg[0]) detail::accumulate(*pg[0], g);
    if (pg[1]) detail::accumulate(*pg[1], g);
  });
}

/// a[m x n] + bias broadcast over rows; bias holds n values.
inline Var add_row_bias(Var a, Var bias) {
  Tape& t = detail::same_tape(a, bias);
  const Tensor& av = a.value();
  const Tensor& bv = bias.value();
  if (bv.size() != av.cols()) throw DimensionError("add_row_bias: bias width differs from columns");
  Tensor out = av;
  const std::size_t n = av.cols();
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) += bv[j];
  return t.record(std::move(out), {a.id, bias.id},
                  [n](const Tape&, const Tensor& g, std::span<Tensor* const> pg) {
                    if (pg[0]) detail::accumulate(*pg[0], g);
                    if (pg[1]) {
                      for (std::size_t i = 0; i < g.rows(); ++i)
                        for (std::size_t j = 0; j < n; ++j) (*pg[1])[j] += g(i, j);
                    }
                  });
}

/// a[m x n] * gain broadcast over rows (element-wise).
inline Var mul_row(Var a, Var gain) {
  Tape& t = detail::same_tape(a, gain);
  const Tensor& av = a.value();
  const Tensor& gv = gain.value();
  if (gv.size() != av.cols()) throw DimensionError("mul_row: gain width differs from columns");
  Tensor out = av;
  const std::size_t n = av.cols();
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) *= gv[j];
  return t.record(std::move(out), {a.id, gain.id},
                  [ia = a.id, ig = gain.id, n](const Tape& tp, const Tensor& g, std::span<Tensor* const> pg) {
                    const Tensor& av = tp.value(ia);
                    const Tensor& gv = tp.value(ig);
                    for (std::size_t i = 0; i < g.rows(); ++i) {
                      for (std::size_t j = 0; j < n; ++j) {
                        if (pg[0]) (*pg[0])(i, j) += g(i, j) * gv[j];
                        if (pg[1]) (*pg[1])[j] += g(i, j) * av(i, j);
                      }
                    }
                  });
}

/// a * factor + shift, element-wise, with constant factor and shift.
inline Var affine(Var a, real factor, real shift = 0) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = v * factor + shift;
  return a.tape->record(std::move(out), {a.id},
                        [factor](const Tape&, const Tensor& g, std::span<Tensor* const> pg) {
                          for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * factor;
                        });
}

inline Var scale(Var a, real factor) { return affine(a, factor, 0); }

inline Var softmax_rows(Var a) {
  Tensor out = prop::softmax_rows(a.value());
  const std::size_t self = a.tape->size();
  return a.tape->record(std::move(out), {a.id},
                        [self](const Tape& tp, const Tensor& g, std::span<Tensor* const> pg) {
                          const Tensor& y = tp.value(self);
                          for (std::size_t i = 0; i < y.rows(); ++i) {
                            real s = 0;
                            for (std::size_t j = 0; j < y.cols(); ++j) s += g(i, j) * y(i, j);
                            for (std::size_t j = 0; j < y.cols(); ++j) (*pg[0])(i, j) += y(i, j) * (g(i, j) - s);
                          }
                        });
}

/// Per-row standardization (x - mean) / sqrt(var + eps), no affine part.
inline Var normalize_rows(Var a, real eps = real(1e-5)) {
  const Tensor& x = a.value();
  const std::size_t m = x.rows(), n = x.cols();
  Tensor y = Tensor::zeros(m, n);
  std::vector<real> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    real mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += x(i, j);
    mean /= real(n);
    real var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= real(n);
    inv_std[i] = real(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) y(i, j) = (x(i, j) - mean) * inv_std[i];
  }
  const std::size_t self = a.tape->size();
  return a.tape->record(std::move(y), {a.id},
                        [self, inv_std = std::move(inv_std)](const Tape& tp, const Tensor& g,
                                                             std::span<Tensor* const> pg) {
                          const Tensor& y = tp.value(self);
                          const std::size_t n = y.cols();
                          for (std::size_t i = 0; i < y.rows(); ++i) {
                            real mg = 0, mgy = 0;
                            for (std::size_t j = 0; j < n; ++j) {
                              mg += g(i, j);
                              mgy += g(i, j) * y(i, j);
                            }
                            mg /= real(n);
                            mgy /= real(n);
                            for (std::size_t j = 0; j < n; ++j) {
                              (*pg[0])(i, j) += inv_std[i] * (g(i, j) - mg - y(i, j) * mgy);
                            }
                          }
                        });
}

/// GELU, tanh approximation.
inline Var gelu(Var a) {
  Tensor out = a.value();
  for (auto& v : out.data()) {
    const real u = detail::kGeluC * (v + detail::kGeluA * v * v * v);
    v = real(0.5) * v * (real(1) + std::tanh(u));
  }
  return a.tape->record(std::move(out), {a.id},
                        [ia = a.id](const Tape& tp, const Tensor& g, std::span<Tensor* const> pg) {
                          const Tensor& x = tp.value(ia);
                          for (std::size_t i = 0; i < x.size(); ++i) {
                            const real v = x[i];
                            const real th = std::tanh(detail::kGeluC * (v + detail::kGeluA * v * v * v));
                            const real du = detail::kGeluC * (real(1) + real(3) * detail::kGeluA * v * v);
                            const real d = real(0.5) * (real(1) + th) + real(0.5) * v * (real(1) - th * th) * du;
                            (*pg[0])[i] += g[i] * d;
                          }
                        });
}

/// Stack matrices with equal column counts along the row axis.
inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no operands");
  Tape& t = *parts[0].tape;
  const std::size_t n = parts[0].value().cols();
  std::size_t m = 0;
  std::vector<std::size_t> ids, offsets;
  for (const auto& p : parts) {
    if (p.tape != &t) throw ContractError("operands live on different tapes");
    if (p.value().cols() != n) throw DimensionError("concat_rows: column counts differ");
    offsets.push_back(m);
    ids.push_back(p.id);
    m += p.value().rows();
  }
  std::vector<real> flat;
  flat.reserve(m * n);
  for (const auto& p : parts) flat.insert(flat.end(), p.value().data().begin(), p.value().data().end());
  return t.record(Tensor::matrix(m, n, std::move(flat)), ids,
                  [offsets, n](const Tape&, const Tensor& g, std::span<Tensor* const> pg) {
                    for (std::size_t k = 0; k < pg.size(); ++k) {
                      if (!pg[k]) continue;
                      const std::size_t base = offsets[k] * n;
                      for (std::size_t i = 0; i < pg[k]->size(); ++i) (*pg[k])[i] += g[base + i];
                    }
                  });
}

inline Var concat_rows(Var a, Var b) {
  const Var parts[] = {a, b};
  return concat_rows(std::span<const Var>(parts));
}

/// Concatenate matrices with equal row counts along the column axis.
inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no operands");
  Tape& t = *parts[0].tape;
  const std::size_t m = parts[0].value().rows();
  std::size_t n = 0;
  std::vector<std::size_t> ids, offsets, widths;
  for (const auto& p : parts) {
    if (p.tape != &t) throw ContractError("operands live on different tapes");
    if (p.value().rows() != m) throw DimensionError("concat_cols: row counts differ");
    offsets.push_back(n);
    widths.push_back(p.value().cols());
    ids.push_back(p.id);
    n += p.value().cols();
  }
  Tensor out = Tensor::zeros(m, n);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out(i, offsets[k] + j) = v(i, j);
  }
  return t.record(std::move(out), ids,
                  [offsets, widths](const Tape&, const Tensor& g, std::span<Tensor* const> pg) {
                    for (std::size_t k = 0; k < pg.size(); ++k) {
                      if (!pg[k]) continue;
                      for (std::size_t i = 0; i < g.rows(); ++i)
                        for (std::size_t j = 0; j < widths[k]; ++j) (*pg[k])(i, j) += g(i, offsets[k] + j);
                    }
                  });
}

inline Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  const Tensor& v = a.value();
  if (count == 0 || begin + count > v.rows()) throw DimensionError("slice_rows: range out of bounds");
  const std::size_t n = v.cols();
  std::vector<real> flat(v.data().begin() + begin * n, v.data().begin() + (begin + count) * n);
  return a.tape->record(Tensor::matrix(count, n, std::move(flat)), {a.id},
                        [begin, n](const Tape&, const Tensor& g, std::span<Tensor* const> pg) {
                          for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[begin * n + i] += g[i];
                        });
}

inline Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  const Tensor& v = a.value();
  if (count == 0 || begin + count > v.cols()) throw DimensionError("slice_cols: range out of bounds");
  Tensor out = Tensor::zeros(v.rows(), count);
  for (std::size_t i = 0; i < v.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = v(i, begin + j);
  return a.tape->record(std::move(out), {a.id},
                        [begin](const Tape&, const Tensor& g, std::span<Tensor* const> pg) {
                          for (std::size_t i = 0; i < g.rows(); ++i)
                            for (std::size_t j = 0; j < g.cols(); ++j) (*pg[0])(i, begin + j) += g(i, j);
                        });
}

inline Var reshape(Var a, std::size_t rows, std::size_t cols) {
  const Tensor& v = a.value();
  if (rows * cols != v.size()) throw DimensionError("reshape: element count changes");
  return a.tape->record(Tensor::matrix(rows, cols, v.values()), {a.id},
                        [](const Tape&, const Tensor& g, std::span<Tensor* const> pg) {
                          for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
                        });
}

inline Var sum(Var a) {
  real s = 0;
  for (auto v : a.value().data()) s += v;
  return a.tape->record(Tensor::vector({s}), {a.id},
                        [](const Tape&, const Tensor& g, std::span<Tensor* const> pg) {
                          for (auto& v : pg[0]->data()) v += g[0];
                        });
}

/// Euclidean norm over every element. The gradient at the origin is taken as zero.
inline Var l2_norm(Var a) {
  const real nrm = prop::l2_norm(a.value().data());
  return a.tape->record(Tensor::vector({nrm}), {a.id},
                        [ia = a.id, nrm](const Tape& tp, const Tensor& g, std::span<Tensor* const> pg) {
                          if (nrm == 0) return;
                          const Tensor& x = tp.value(ia);
                          for (std::size_t i = 0; i < x.size(); ++i) (*pg[0])[i] += g[0] * x[i] / nrm;
                        });
}

/// Cosine similarity of two equal-size tensors, viewed as flat vectors.
inline Var cosine(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.size() != bv.size()) throw DimensionError("cosine: width mismatch");
  const real na = prop::l2_norm(av.data()), nb = prop::l2_norm(bv.data());
  if (na == 0 || nb == 0) throw ZeroNormError("cosine similarity of a zero-norm vector");
  const real c = prop::dot(av.data(), bv.data()) / (na * nb);
  return t.record(Tensor::vector({c}), {a.id, b.id},
                  [ia = a.id, ib = b.id, na, nb, c](const Tape& tp, const Tensor& g, std::span<Tensor* const> pg) {
                    const Tensor& av = tp.value(ia);
                    const Tensor& bv = tp.value(ib);
                    for (std::size_t i = 0; i < av.size(); ++i) {
                      if (pg[0]) (*pg[0])[i] += g[0] * (bv[i] / (na * nb) - c * av[i] / (na * na));
                      if (pg[1]) (*pg[1])[i] += g[0] * (av[i] / (na * nb) - c * bv[i] / (nb * nb));
                    }
                  });
}

/// Mean softmax cross-entropy of logits[N x M] against integer labels.
inline Var cross_entropy(Var logits, std::span<const std::size_t> labels) {
  const Tensor& z = logits.value();
  const std::size_t n = z.rows(), m = z.cols();
  if (labels.size() != n) throw DimensionError("cross_entropy: label count differs from batch size");
  for (auto y : labels) {
    if (y >= m) throw ContractError("cross_entropy: label " + std::to_string(y) + " out of range");
  }
  Tensor probs = prop::softmax_rows(z);
  real total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    auto row = z.row(i);
    real mx = row[0];
    for (auto v : row) mx = std::max(mx, v);
    real s = 0;
    for (auto v : row) s += std::exp(v - mx);
    total += (mx + std::log(s)) - row[labels[i]];
  }
  total /= real(n);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return logits.tape->record(Tensor::vector({total}), {logits.id},
                             [probs = std::move(probs), lab = std::move(lab)](const Tape&, const Tensor& g,
                                                                              std::span<Tensor* const> pg) {
                               const real inv = real(1) / real(probs.rows());
                               for (std::size_t i = 0; i < probs.rows(); ++i) {
                                 for (std::size_t j = 0; j < probs.cols(); ++j) {
                                   const real y = j == lab[i] ? real(1) : real(0);
                                   (*pg[0])(i, j) += g[0] * (probs(i, j) - y) * inv;
                                 }
                               }
                             });
}

}  // namespace prop::ad
