#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "iam/error.hpp"
#include "iam/params.hpp"
#include "iam/rng.hpp"
#include "iam/tensor.hpp"

namespace iam {

// Reverse-mode tape over vector-valued operations. Each op appends a node
// holding its output and a backward closure; creation order is a valid
// topological order, so backward() is a single reverse sweep.
//
// Parameter gradients accumulate into an external GradBuffer. Constructed
// with grads == nullptr the tape is forward-only and skips closures.
//
// All ops verify operand shapes and (when finite-checking is on, the
// default) that outputs are finite, throwing NumericError tagged with the
// node's stage name otherwise.
template <typename S>
class Tape {
 public:
  struct Var {
    uint32_t i = UINT32_MAX;
    bool valid() const { return i != UINT32_MAX; }
  };

  Tape(const ParamStore<S>& params, GradBuffer<S>* grads, bool check_finite = true)
      : params_(params), grads_(grads), check_finite_(check_finite) {}

  bool recording() const { return grads_ != nullptr; }
  size_t size() const { return nodes_.size(); }

  const std::vector<S>& val(Var v) const { return nodes_[v.i].out; }
  const std::vector<S>& grad_of(Var v) const { return nodes_[v.i].grad; }

  // ---- leaves ----

  Var input(std::vector<S> v, const char* tag = "input") {
    return push(std::move(v), tag, nullptr);
  }

  Var zeros(size_t n, const char* tag = "zeros") {
    return push(std::vector<S>(n, S(0)), tag, nullptr);
  }

  // Leaf whose value is a rank-1 parameter tensor; gradient flows to it.
  Var param_vec(ParamId p) {
    const auto& t = params_.at(p);
    std::vector<S> v = t.w;
    return push(std::move(v), t.name.c_str(), [p](Tape& T, uint32_t self) {
      auto& g = T.pgrad(p);
      const auto& go = T.nodes_[self].grad;
      for (size_t i = 0; i < go.size(); ++i) g[i] += go[i];
    });
  }

  // ---- affine / linear ----

  // y = x^T W + b, W is (in x out)
  Var affine(Var x, ParamId w, ParamId b, const char* tag = "affine") {
    return affine_impl(&x, nullptr, w, &b, tag);
  }

  // y = x^T W (no bias)
  Var linear(Var x, ParamId w, const char* tag = "linear") {
    return affine_impl(&x, nullptr, w, nullptr, tag);
  }

  // y = c^T W + b with a constant (detached) input: no gradient flows into
  // c, the weights still receive theirs.
  Var affine_const(const std::vector<S>& c, ParamId w, ParamId b,
                   const char* tag = "affine_const") {
    return affine_impl(nullptr, &c, w, &b, tag);
  }

  // ---- elementwise ----

  Var relu(Var x) {
    const auto& xv = val(x);
    std::vector<S> y(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) y[i] = xv[i] > S(0) ? xv[i] : S(0);
    return push(std::move(y), "relu", [x](Tape& T, uint32_t self) {
      const auto& xv = T.val(x);
      const auto& go = T.nodes_[self].grad;
      auto& gx = T.nodes_[x.i].grad;
      for (size_t i = 0; i < xv.size(); ++i)
        if (xv[i] > S(0)) gx[i] += go[i];
    });
  }

  Var sigmoid(Var x) {
    const auto& xv = val(x);
    std::vector<S> y(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) y[i] = sigmoid_scalar(xv[i]);
    return push(std::move(y), "sigmoid", [x](Tape& T, uint32_t self) {
      const auto& yv = T.nodes_[self].out;
      const auto& go = T.nodes_[self].grad;
      auto& gx = T.nodes_[x.i].grad;
      for (size_t i = 0; i < yv.size(); ++i) gx[i] += yv[i] * (S(1) - yv[i]) * go[i];
    });
  }

  // Exact Gaussian-CDF form: gelu(x) = x * Phi(x), Phi via erf. The same
  // form is used in forward and backward.
  Var gelu(Var x) {
    const auto& xv = val(x);
    std::vector<S> y(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) y[i] = gelu_scalar(xv[i]);
    return push(std::move(y), "gelu", [x](Tape& T, uint32_t self) {
      const auto& xv = T.val(x);
      const auto& go = T.nodes_[self].grad;
      auto& gx = T.nodes_[x.i].grad;
      for (size_t i = 0; i < xv.size(); ++i) gx[i] += gelu_grad_scalar(xv[i]) * go[i];
    });
  }

  Var softmax(Var x) {
    const auto& xv = val(x);
    check(!xv.empty(), "softmax: empty input");
    std::vector<S> y = softmax_forward(std::span<const S>(xv));
    return push(std::move(y), "softmax", [x](Tape& T, uint32_t self) {
      const auto& yv = T.nodes_[self].out;
      const auto& go = T.nodes_[self].grad;
      auto& gx = T.nodes_[x.i].grad;
      S dot = S(0);
      for (size_t i = 0; i < yv.size(); ++i) dot += yv[i] * go[i];
      for (size_t i = 0; i < yv.size(); ++i) gx[i] += yv[i] * (go[i] - dot);
    });
  }

  // Layer normalization with learnable gain/bias, population variance.
  Var layer_norm(Var x, ParamId gain, ParamId bias, S eps) {
    const auto& xv = val(x);
    const size_t n = xv.size();
    check(n >= 2, "layer_norm: needs length >= 2");
    const auto& gv = params_.at(gain).w;
    const auto& bv = params_.at(bias).w;
    check(gv.size() == n && bv.size() == n, "layer_norm: gain/bias shape mismatch");

    S mu = S(0);
    for (S v : xv) mu += v;
    mu /= static_cast<S>(n);
    S var = S(0);
    for (S v : xv) var += (v - mu) * (v - mu);
    var /= static_cast<S>(n);
    const S inv_std = S(1) / std::sqrt(var + eps);

    std::vector<S> y(n);
    for (size_t i = 0; i < n; ++i) y[i] = gv[i] * (xv[i] - mu) * inv_std + bv[i];

    return push(std::move(y), "layer_norm",
                [x, gain, bias, mu, inv_std](Tape& T, uint32_t self) {
                  const auto& xv = T.val(x);
                  const auto& gv = T.params_.at(gain).w;
                  const auto& go = T.nodes_[self].grad;
                  const size_t n = xv.size();
                  auto& gx = T.nodes_[x.i].grad;
                  auto& gg = T.pgrad(gain);
                  auto& gb = T.pgrad(bias);

                  // xhat_i = (x_i - mu) * inv_std
                  // gx = inv_std * (gh - mean(gh) - xhat * mean(gh * xhat))
                  // where gh = gain .* go
                  S mean_gh = S(0), mean_ghx = S(0);
                  for (size_t i = 0; i < n; ++i) {
                    const S xhat = (xv[i] - mu) * inv_std;
                    const S gh = gv[i] * go[i];
                    gg[i] += xhat * go[i];
                    gb[i] += go[i];
                    mean_gh += gh;
                    mean_ghx += gh * xhat;
                  }
                  mean_gh /= static_cast<S>(n);
                  mean_ghx /= static_cast<S>(n);
                  for (size_t i = 0; i < n; ++i) {
                    const S xhat = (xv[i] - mu) * inv_std;
                    const S gh = gv[i] * go[i];
                    gx[i] += inv_std * (gh - mean_gh - xhat * mean_ghx);
                  }
                });
  }

  // Inverted dropout: survivors scaled by 1/(1-rate); identity outside
  // training or at rate 0.
  Var dropout(Var x, double rate, Rng* rng, bool training) {
    check(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0,1)");
    if (!training || rate == 0.0) return x;
    check(rng != nullptr, "dropout: rng required in training");
    const auto& xv = val(x);
    std::vector<S> mask(xv.size());
    const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
    for (auto& m : mask) m = rng->uniform01() < rate ? S(0) : keep_scale;
    std::vector<S> y(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) y[i] = xv[i] * mask[i];
    return push(std::move(y), "dropout",
                [x, mask = std::move(mask)](Tape& T, uint32_t self) {
                  const auto& go = T.nodes_[self].grad;
                  auto& gx = T.nodes_[x.i].grad;
                  for (size_t i = 0; i < go.size(); ++i) gx[i] += mask[i] * go[i];
                });
  }

  // ---- binary ----

  Var add(Var a, Var b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    check(av.size() == bv.size(), "add: shape mismatch");
    std::vector<S> y(av.size());
    for (size_t i = 0; i < av.size(); ++i) y[i] = av[i] + bv[i];
    return push(std::move(y), "add", [a, b](Tape& T, uint32_t self) {
      const auto& go = T.nodes_[self].grad;
      auto& ga = T.nodes_[a.i].grad;
      auto& gb = T.nodes_[b.i].grad;
      for (size_t i = 0; i < go.size(); ++i) {
        ga[i] += go[i];
        gb[i] += go[i];
      }
    });
  }

  Var sub(Var a, Var b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    check(av.size() == bv.size(), "sub: shape mismatch");
    std::vector<S> y(av.size());
    for (size_t i = 0; i < av.size(); ++i) y[i] = av[i] - bv[i];
    return push(std::move(y), "sub", [a, b](Tape& T, uint32_t self) {
      const auto& go = T.nodes_[self].grad;
      auto& ga = T.nodes_[a.i].grad;
      auto& gb = T.nodes_[b.i].grad;
      for (size_t i = 0; i < go.size(); ++i) {
        ga[i] += go[i];
        gb[i] -= go[i];
      }
    });
  }

  Var mul(Var a, Var b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    check(av.size() == bv.size(), "mul: shape mismatch");
    std::vector<S> y(av.size());
    for (size_t i = 0; i < av.size(); ++i) y[i] = av[i] * bv[i];
    return push(std::move(y), "mul", [a, b](Tape& T, uint32_t self) {
      const auto& av = T.val(a);
      const auto& bv = T.val(b);
      const auto& go = T.nodes_[self].grad;
      auto& ga = T.nodes_[a.i].grad;
      auto& gb = T.nodes_[b.i].grad;
      for (size_t i = 0; i < go.size(); ++i) {
        ga[i] += bv[i] * go[i];
        gb[i] += av[i] * go[i];
      }
    });
  }

  Var scale(Var x, S c) {
    const auto& xv = val(x);
    std::vector<S> y(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) y[i] = c * xv[i];
    return push(std::move(y), "scale", [x, c](Tape& T, uint32_t self) {
      const auto& go = T.nodes_[self].grad;
      auto& gx = T.nodes_[x.i].grad;
      for (size_t i = 0; i < go.size(); ++i) gx[i] += c * go[i];
    });
  }

  // h = g .* o + (1 - g) .* e
  Var mix(Var g, Var o, Var e) {
    const auto& gv = val(g);
    const auto& ov = val(o);
    const auto& ev = val(e);
    check(gv.size() == ov.size() && ov.size() == ev.size(), "mix: shape mismatch");
    std::vector<S> y(gv.size());
    for (size_t i = 0; i < gv.size(); ++i)
      y[i] = gv[i] * ov[i] + (S(1) - gv[i]) * ev[i];
    return push(std::move(y), "mix", [g, o, e](Tape& T, uint32_t self) {
      const auto& gv = T.val(g);
      const auto& ov = T.val(o);
      const auto& ev = T.val(e);
      const auto& gh = T.nodes_[self].grad;
      auto& gg = T.nodes_[g.i].grad;
      auto& go_ = T.nodes_[o.i].grad;
      auto& ge = T.nodes_[e.i].grad;
      for (size_t i = 0; i < gh.size(); ++i) {
        gg[i] += (ov[i] - ev[i]) * gh[i];
        go_[i] += gv[i] * gh[i];
        ge[i] += (S(1) - gv[i]) * gh[i];
      }
    });
  }

  // scalar gate broadcast to width n (backward sums)
  Var broadcast(Var x, size_t n) {
    const auto& xv = val(x);
    check(xv.size() == 1, "broadcast: expects a scalar");
    std::vector<S> y(n, xv[0]);
    return push(std::move(y), "broadcast", [x](Tape& T, uint32_t self) {
      const auto& go = T.nodes_[self].grad;
      S s = S(0);
      for (S v : go) s += v;
      T.nodes_[x.i].grad[0] += s;
    });
  }

  Var concat(Var a, Var b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    std::vector<S> y;
    y.reserve(av.size() + bv.size());
    y.insert(y.end(), av.begin(), av.end());
    y.insert(y.end(), bv.begin(), bv.end());
    const size_t na = av.size();
    return push(std::move(y), "concat", [a, b, na](Tape& T, uint32_t self) {
      const auto& go = T.nodes_[self].grad;
      auto& ga = T.nodes_[a.i].grad;
      auto& gb = T.nodes_[b.i].grad;
      for (size_t i = 0; i < na; ++i) ga[i] += go[i];
      for (size_t i = na; i < go.size(); ++i) gb[i - na] += go[i];
    });
  }

  Var concat_many(const std::vector<Var>& parts) {
    check(!parts.empty(), "concat_many: empty");
    std::vector<S> y;
    std::vector<size_t> offs;
    offs.reserve(parts.size());
    for (Var p : parts) {
      offs.push_back(y.size());
      const auto& pv = val(p);
      y.insert(y.end(), pv.begin(), pv.end());
    }
    return push(std::move(y), "concat_many",
                [parts, offs = std::move(offs)](Tape& T, uint32_t self) {
                  const auto& go = T.nodes_[self].grad;
                  for (size_t k = 0; k < parts.size(); ++k) {
                    auto& gp = T.nodes_[parts[k].i].grad;
                    for (size_t i = 0; i < gp.size(); ++i) gp[i] += go[offs[k] + i];
                  }
                });
  }

  Var slice(Var x, size_t off, size_t len) {
    const auto& xv = val(x);
    check(off + len <= xv.size(), "slice: out of range");
    std::vector<S> y(xv.begin() + off, xv.begin() + off + len);
    return push(std::move(y), "slice", [x, off](Tape& T, uint32_t self) {
      const auto& go = T.nodes_[self].grad;
      auto& gx = T.nodes_[x.i].grad;
      for (size_t i = 0; i < go.size(); ++i) gx[off + i] += go[i];
    });
  }

  // ---- attention kernels ----

  // s_i = c * <q[off..off+len), k_i[off..off+len)> over all keys.
  Var head_scores(Var q, const std::vector<Var>& keys, size_t off, size_t len, S c) {
    check(!keys.empty(), "head_scores: no keys");
    const auto& qv = val(q);
    check(off + len <= qv.size(), "head_scores: query slice out of range");
    std::vector<S> y(keys.size());
    for (size_t i = 0; i < keys.size(); ++i) {
      const auto& kv = val(keys[i]);
      check(kv.size() == qv.size(), "head_scores: key shape mismatch");
      S dot = S(0);
      for (size_t j = 0; j < len; ++j) dot += qv[off + j] * kv[off + j];
      y[i] = c * dot;
    }
    return push(std::move(y), "head_scores",
                [q, keys, off, len, c](Tape& T, uint32_t self) {
                  const auto& qv = T.val(q);
                  const auto& gs = T.nodes_[self].grad;
                  auto& gq = T.nodes_[q.i].grad;
                  for (size_t i = 0; i < keys.size(); ++i) {
                    const auto& kv = T.val(keys[i]);
                    auto& gk = T.nodes_[keys[i].i].grad;
                    const S gsi = c * gs[i];
                    for (size_t j = 0; j < len; ++j) {
                      gq[off + j] += gsi * kv[off + j];
                      gk[off + j] += gsi * qv[off + j];
                    }
                  }
                });
  }

  // o_j = sum_i w_i * v_i[off + j], j in [0, len)
  Var weighted_sum(Var w, const std::vector<Var>& values, size_t off, size_t len) {
    const auto& wv = val(w);
    check(wv.size() == values.size(), "weighted_sum: weight/value count mismatch");
    std::vector<S> y(len, S(0));
    for (size_t i = 0; i < values.size(); ++i) {
      const auto& vv = val(values[i]);
      check(off + len <= vv.size(), "weighted_sum: value slice out of range");
      for (size_t j = 0; j < len; ++j) y[j] += wv[i] * vv[off + j];
    }
    return push(std::move(y), "weighted_sum",
                [w, values, off, len](Tape& T, uint32_t self) {
                  const auto& wv = T.val(w);
                  const auto& go = T.nodes_[self].grad;
                  auto& gw = T.nodes_[w.i].grad;
                  for (size_t i = 0; i < values.size(); ++i) {
                    const auto& vv = T.val(values[i]);
                    auto& gv = T.nodes_[values[i].i].grad;
                    S acc = S(0);
                    for (size_t j = 0; j < len; ++j) {
                      acc += vv[off + j] * go[j];
                      gv[off + j] += wv[i] * go[j];
                    }
                    gw[i] += acc;
                  }
                });
  }

  // scalar projection: <x, c>
  Var dot_const(Var x, const std::vector<S>& c) {
    const auto& xv = val(x);
    check(xv.size() == c.size(), "dot_const: shape mismatch");
    S y = S(0);
    for (size_t i = 0; i < xv.size(); ++i) y += xv[i] * c[i];
    return push({y}, "dot_const", [x, c](Tape& T, uint32_t self) {
      const S gs = T.nodes_[self].grad[0];
      auto& gx = T.nodes_[x.i].grad;
      for (size_t i = 0; i < c.size(); ++i) gx[i] += c[i] * gs;
    });
  }

  // ---- loss ----

  // loss = -weight * sum_c target_c * log(p_c + eps), scalar output
  Var ce_from_probs(Var probs, const std::vector<S>& target, S weight, S eps) {
    const auto& pv = val(probs);
    check(pv.size() == target.size(), "ce_from_probs: shape mismatch");
    S loss = S(0);
    for (size_t c = 0; c < pv.size(); ++c)
      loss -= target[c] * std::log(pv[c] + eps);
    loss *= weight;
    return push({loss}, "ce_loss",
                [probs, target, weight, eps](Tape& T, uint32_t self) {
                  const auto& pv = T.val(probs);
                  const S gl = T.nodes_[self].grad[0];
                  auto& gp = T.nodes_[probs.i].grad;
                  for (size_t c = 0; c < pv.size(); ++c)
                    gp[c] -= weight * target[c] / (pv[c] + eps) * gl;
                });
  }

  // ---- backward ----

  void backward(Var loss) {
    check(recording(), "backward: tape is forward-only");
    check(val(loss).size() == 1, "backward: loss must be scalar");
    nodes_[loss.i].grad[0] = S(1);
    for (size_t i = nodes_.size(); i-- > 0;) {
      auto& n = nodes_[i];
      if (n.back) n.back(*this, static_cast<uint32_t>(i));
    }
  }

  static std::vector<S> softmax_forward(std::span<const S> x) {
    check(!x.empty(), "softmax: empty input");
    S mx = x[0];
    for (S v : x) mx = std::max(mx, v);
    std::vector<S> y(x.size());
    S sum = S(0);
    for (size_t i = 0; i < x.size(); ++i) {
      y[i] = std::exp(x[i] - mx);
      sum += y[i];
    }
    for (auto& v : y) v /= sum;
    return y;
  }

  static S sigmoid_scalar(S x) {
    if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
    const S e = std::exp(x);
    return e / (S(1) + e);
  }

  static S gelu_scalar(S x) {
    return static_cast<S>(0.5) * x *
           (S(1) + std::erf(x * static_cast<S>(0.7071067811865475244)));
  }

  static S gelu_grad_scalar(S x) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    const double xd = static_cast<double>(x);
    const double phi_cdf = 0.5 * (1.0 + std::erf(xd * inv_sqrt2));
    const double phi_pdf = inv_sqrt2pi * std::exp(-0.5 * xd * xd);
    return static_cast<S>(phi_cdf + xd * phi_pdf);
  }

 private:
  friend struct NodeAccess;
  struct Node {
    std::vector<S> out;
    std::vector<S> grad;
    const char* tag;
    std::function<void(Tape&, uint32_t)> back;  // empty for leaves/forward-only
  };

  std::vector<S>& pgrad(ParamId p) { return grads_->g[p]; }

  Var push(std::vector<S> out, const char* tag,
           std::function<void(Tape&, uint32_t)> back) {
    if (check_finite_ && !all_finite(std::span<const S>(out))) {
      throw NumericError(std::string("non-finite value at stage: ") + tag);
    }
    Node n;
    n.grad.assign(out.size(), S(0));
    n.out = std::move(out);
    n.tag = tag;
    if (recording()) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<uint32_t>(nodes_.size() - 1)};
  }

  Var affine_impl(const Var* x, const std::vector<S>* cx, ParamId w,
                  const ParamId* b, const char* tag) {
    const auto& wt = params_.at(w);
    check(wt.dims.size() == 2, "affine: weight must be rank 2");
    const size_t in = wt.rows(), out = wt.cols();
    const std::vector<S>& xv = x ? val(*x) : *cx;
    check(xv.size() == in, std::string("affine: input dim mismatch for ") + wt.name);

    std::vector<S> y(out, S(0));
    if (b) {
      const auto& bt = params_.at(*b);
      check(bt.size() == out, "affine: bias dim mismatch");
      y = bt.w;
    }
    const S* W = wt.w.data();
    for (size_t i = 0; i < in; ++i) {
      const S xi = xv[i];
      const S* row = W + i * out;
      for (size_t j = 0; j < out; ++j) y[j] += xi * row[j];
    }

    std::optional<Var> xvar = x ? std::optional<Var>(*x) : std::nullopt;
    std::optional<ParamId> bid = b ? std::optional<ParamId>(*b) : std::nullopt;
    std::function<void(Tape&, uint32_t)> back;
    if (recording()) {
      // a constant input is copied into the closure so backward can form
      // the weight gradient without keeping a reference to caller memory
      std::vector<S> ccopy = x ? std::vector<S>() : *cx;
      back = [xvar, ccopy = std::move(ccopy), w, bid, in, out](Tape& T, uint32_t self) {
        const auto& go = T.nodes_[self].grad;
        const std::vector<S>& xv = xvar ? T.val(*xvar) : ccopy;
        auto& gw = T.pgrad(w);
        for (size_t i = 0; i < in; ++i) {
          const S xi = xv[i];
          S* grow = gw.data() + i * out;
          for (size_t j = 0; j < out; ++j) grow[j] += xi * go[j];
        }
        if (bid) {
          auto& gb = T.pgrad(*bid);
          for (size_t j = 0; j < out; ++j) gb[j] += go[j];
        }
        if (xvar) {
          auto& gx = T.nodes_[xvar->i].grad;
          const S* W = T.params_.at(w).w.data();
          for (size_t i = 0; i < in; ++i) {
            const S* row = W + i * out;
            S acc = S(0);
            for (size_t j = 0; j < out; ++j) acc += row[j] * go[j];
            gx[i] += acc;
          }
        }
      };
    }
    return push(std::move(y), tag, std::move(back));
  }

  const ParamStore<S>& params_;
  GradBuffer<S>* grads_;
  bool check_finite_;
  std::vector<Node> nodes_;
};

// Fills the store's gradient accumulators with d(loss)/d(param) for a loss
// built by `build` on a fresh tape. Returns the loss value.
template <typename S, typename F>
double gradient_of(ParamStore<S>& params, F&& build) {
  GradBuffer<S> buf(params);
  Tape<S> tape(params, &buf);
  typename Tape<S>::Var loss = build(tape);
  tape.backward(loss);
  buf.store_into(params);
  return static_cast<double>(tape.val(loss)[0]);
}

}  // namespace iam
