#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "iam/memory.hpp"
#include "iam/params.hpp"
#include "iam/rng.hpp"
#include "iam/tape.hpp"

namespace iam {

// Query source for the attention lookup: the model's own last prediction,
// or the current frame (ablation mode).
enum class QueryMode : uint8_t { prediction, frame };

// Elementwise gate of width d, or a single scalar gate broadcast over d.
enum class GateMode : uint8_t { elementwise, scalar };

// How the key input (the prediction fed to the key encoder) is treated when
// a new memory entry is written. `detached` is the real model; `recorded`
// substitutes a constant captured from a frozen forward pass; `attached`
// lets gradient flow into the prediction (negative control).
enum class KeySource : uint8_t { detached, recorded, attached };

struct CellConfig {
  uint32_t d = 2048;       // hidden size
  uint32_t classes = 4;    // C
  uint32_t feat = 16;      // input feature dim F
  uint32_t capacity = 30;  // memory capacity S (the model order)
  uint32_t heads = 8;
  double dropout = 0.6;
  QueryMode query = QueryMode::prediction;
  GateMode gate = GateMode::elementwise;

  uint32_t key_dim() const { return d / 4; }
  uint32_t qk_head_dim() const { return key_dim() / heads; }
  uint32_t v_head_dim() const { return d / heads; }
  uint32_t gate_out() const { return gate == GateMode::elementwise ? d : 1; }

  void validate() const {
    check(d % 4 == 0, "CellConfig: d must be divisible by 4");
    check(heads >= 1, "CellConfig: heads must be >= 1");
    check(key_dim() % heads == 0, "CellConfig: d/4 must be divisible by heads");
    check(d % heads == 0, "CellConfig: d must be divisible by heads");
    check(capacity >= 1, "CellConfig: capacity must be >= 1");
    check(classes >= 1 && feat >= 1, "CellConfig: classes and feat must be >= 1");
    check(dropout >= 0.0 && dropout < 1.0, "CellConfig: dropout must be in [0,1)");
    check(d % 2 == 0, "CellConfig: d must be even");
  }
};

// Bytes held by a full memory: S entries of key (d/4) + value (d),
// i.e. (5/4) * d * S elements.
inline size_t memory_footprint_bytes(const CellConfig& cfg, size_t element_bytes) {
  return (static_cast<size_t>(cfg.d) / 4 + cfg.d) * cfg.capacity * element_bytes;
}

struct IamParamIds {
  ParamId e_x_w, e_x_b;
  ParamId e_q_w, e_q_b;  // C -> d/4 in prediction mode, F -> d/4 in frame mode
  ParamId e_k_w, e_k_b;
  ParamId mha_wq, mha_wk, mha_wv, mha_wo;
  ParamId ffn_gain, ffn_bias, ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  ParamId gate_w1, gate_b1, gate_w2, gate_b2;
  ParamId cls_w, cls_b;
};

template <typename S>
IamParamIds build_iam_params(ParamStore<S>& P, const CellConfig& cfg) {
  cfg.validate();
  const uint32_t d = cfg.d, C = cfg.classes, F = cfg.feat, kd = cfg.key_dim();
  IamParamIds ids;
  ids.e_x_w = P.add_matrix("e_x.W", ParamKind::weight, F, d);
  ids.e_x_b = P.add_vector("e_x.b", ParamKind::bias, d);
  if (cfg.query == QueryMode::prediction) {
    ids.e_q_w = P.add_matrix("e_q.W", ParamKind::weight, C, kd);
    ids.e_q_b = P.add_vector("e_q.b", ParamKind::bias, kd);
  } else {
    ids.e_q_w = P.add_matrix("e_qf.W", ParamKind::weight, F, kd);
    ids.e_q_b = P.add_vector("e_qf.b", ParamKind::bias, kd);
  }
  ids.e_k_w = P.add_matrix("e_k.W", ParamKind::weight, C, kd);
  ids.e_k_b = P.add_vector("e_k.b", ParamKind::bias, kd);
  ids.mha_wq = P.add_matrix("mha.W_q", ParamKind::weight, kd, kd);
  ids.mha_wk = P.add_matrix("mha.W_k", ParamKind::weight, kd, kd);
  ids.mha_wv = P.add_matrix("mha.W_v", ParamKind::weight, d, d);
  ids.mha_wo = P.add_matrix("mha.W_o", ParamKind::weight, d, d);
  ids.ffn_gain = P.add_vector("ffn.norm.gain", ParamKind::norm_gain, d);
  ids.ffn_bias = P.add_vector("ffn.norm.bias", ParamKind::norm_bias, d);
  ids.ffn_w1 = P.add_matrix("ffn.W_1", ParamKind::weight, d, 4 * d);
  ids.ffn_b1 = P.add_vector("ffn.b_1", ParamKind::bias, 4 * d);
  ids.ffn_w2 = P.add_matrix("ffn.W_2", ParamKind::weight, 4 * d, d);
  ids.ffn_b2 = P.add_vector("ffn.b_2", ParamKind::bias, d);
  ids.gate_w1 = P.add_matrix("gate.W_1", ParamKind::weight, 2 * d, d / 2);
  ids.gate_b1 = P.add_vector("gate.b_1", ParamKind::bias, d / 2);
  ids.gate_w2 = P.add_matrix("gate.W_2", ParamKind::weight, d / 2, cfg.gate_out());
  ids.gate_b2 = P.add_vector("gate.b_2", ParamKind::bias, cfg.gate_out());
  ids.cls_w = P.add_matrix("cls.W", ParamKind::weight, d, C);
  ids.cls_b = P.add_vector("cls.b", ParamKind::bias, C);
  return ids;
}

template <typename S>
IamParamIds resolve_iam_params(const ParamStore<S>& P, const CellConfig& cfg) {
  IamParamIds ids;
  ids.e_x_w = P.id("e_x.W");
  ids.e_x_b = P.id("e_x.b");
  const bool frame = cfg.query == QueryMode::frame;
  ids.e_q_w = P.id(frame ? "e_qf.W" : "e_q.W");
  ids.e_q_b = P.id(frame ? "e_qf.b" : "e_q.b");
  ids.e_k_w = P.id("e_k.W");
  ids.e_k_b = P.id("e_k.b");
  ids.mha_wq = P.id("mha.W_q");
  ids.mha_wk = P.id("mha.W_k");
  ids.mha_wv = P.id("mha.W_v");
  ids.mha_wo = P.id("mha.W_o");
  ids.ffn_gain = P.id("ffn.norm.gain");
  ids.ffn_bias = P.id("ffn.norm.bias");
  ids.ffn_w1 = P.id("ffn.W_1");
  ids.ffn_b1 = P.id("ffn.b_1");
  ids.ffn_w2 = P.id("ffn.W_2");
  ids.ffn_b2 = P.id("ffn.b_2");
  ids.gate_w1 = P.id("gate.W_1");
  ids.gate_b1 = P.id("gate.b_1");
  ids.gate_w2 = P.id("gate.W_2");
  ids.gate_b2 = P.id("gate.b_2");
  ids.cls_w = P.id("cls.W");
  ids.cls_b = P.id("cls.b");
  return ids;
}

// Per-step inspection data. Attention weights are per head over memory
// slots ordered oldest -> newest; each row sums to 1.
struct StepTrace {
  std::vector<std::vector<double>> attn;  // heads x L, empty at t = 0
  std::vector<double> gate;               // g_t
  std::vector<double> attn_out;           // o_t
  std::vector<double> encoded;            // e_t
  std::vector<double> hidden;             // h_t
};

namespace detail {
template <typename S>
std::vector<double> node_doubles(const Tape<S>& t, typename Tape<S>::Var v) {
  const auto& x = t.val(v);
  return std::vector<double>(x.begin(), x.end());
}
}  // namespace detail

// Multi-head scaled dot-product attention over memory entries. Per head:
// scores = (W_q^T q) . (W_k^T k_i) / sqrt(qk_head_dim), softmax over the
// entries, weighted sum of the per-head slice of W_v^T v_i, heads
// concatenated and output-projected back to d.
template <typename S>
std::pair<typename Tape<S>::Var, std::vector<std::vector<double>>> mha(
    Tape<S>& t, typename Tape<S>::Var q,
    const std::vector<typename Tape<S>::Var>& keys,
    const std::vector<typename Tape<S>::Var>& values, const IamParamIds& ids,
    const CellConfig& cfg) {
  using Var = typename Tape<S>::Var;
  check(!keys.empty() && keys.size() == values.size(), "mha: empty or mismatched memory");

  const size_t L = keys.size();
  const uint32_t qkh = cfg.qk_head_dim();
  const uint32_t vh = cfg.v_head_dim();
  const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(qkh)));

  Var pq = t.linear(q, ids.mha_wq, "mha.q_proj");
  std::vector<Var> pk(L), pv(L);
  for (size_t i = 0; i < L; ++i) {
    pk[i] = t.linear(keys[i], ids.mha_wk, "mha.k_proj");
    pv[i] = t.linear(values[i], ids.mha_wv, "mha.v_proj");
  }

  std::vector<Var> head_out(cfg.heads);
  std::vector<std::vector<double>> weights(cfg.heads);
  for (uint32_t h = 0; h < cfg.heads; ++h) {
    Var scores = t.head_scores(pq, pk, h * qkh, qkh, inv_sqrt);
    Var w = t.softmax(scores);
    weights[h] = detail::node_doubles(t, w);
    head_out[h] = t.weighted_sum(w, pv, h * vh, vh);
  }
  Var cat = cfg.heads == 1 ? head_out[0] : t.concat_many(head_out);
  Var out = t.linear(cat, ids.mha_wo, "mha.out_proj");
  return {out, std::move(weights)};
}

// FFN(x) = W_2^T gelu(W_1^T layer_norm(x)) + x, expansion factor 4,
// dropout on the bottleneck activation during training.
template <typename S>
typename Tape<S>::Var ffn(Tape<S>& t, typename Tape<S>::Var x, const IamParamIds& ids,
                          double dropout_rate, Rng* rng, bool training) {
  using Var = typename Tape<S>::Var;
  Var n = t.layer_norm(x, ids.ffn_gain, ids.ffn_bias, static_cast<S>(1e-5));
  Var a = t.affine(n, ids.ffn_w1, ids.ffn_b1, "ffn.expand");
  Var z = t.gelu(a);
  Var zd = t.dropout(z, dropout_rate, rng, training);
  Var y = t.affine(zd, ids.ffn_w2, ids.ffn_b2, "ffn.reduce");
  return t.add(y, x);
}

// Inductive attention: encode the query source to d/4, attend over the
// stored (key, value) pairs, then FFN. Dropout sits on the attention
// output before the FFN during training.
template <typename S>
std::pair<typename Tape<S>::Var, std::vector<std::vector<double>>> inductive_attention(
    Tape<S>& t, typename Tape<S>::Var query_src,
    const std::vector<typename Tape<S>::Var>& keys,
    const std::vector<typename Tape<S>::Var>& values, const IamParamIds& ids,
    const CellConfig& cfg, Rng* rng, bool training) {
  using Var = typename Tape<S>::Var;
  check(!keys.empty(), "inductive_attention: empty memory");
  Var q = t.relu(t.affine(query_src, ids.e_q_w, ids.e_q_b, "e_q"));
  auto [att, weights] = mha(t, q, keys, values, ids, cfg);
  Var att_d = t.dropout(att, cfg.dropout, rng, training);
  Var o = ffn(t, att_d, ids, cfg.dropout, rng, training);
  return {o, std::move(weights)};
}

// gate(o, e) = sigmoid(W_2^T relu([o; e] W_1)), in (0,1)^d
template <typename S>
typename Tape<S>::Var gate(Tape<S>& t, typename Tape<S>::Var o, typename Tape<S>::Var e,
                           const IamParamIds& ids, const CellConfig& cfg) {
  using Var = typename Tape<S>::Var;
  Var cat = t.concat(o, e);
  Var hidden = t.relu(t.affine(cat, ids.gate_w1, ids.gate_b1, "gate.down"));
  Var g = t.sigmoid(t.affine(hidden, ids.gate_w2, ids.gate_b2, "gate.up"));
  if (cfg.gate == GateMode::scalar) g = t.broadcast(g, cfg.d);
  return g;
}

template <typename S>
struct CellStepOut {
  typename Tape<S>::Var pred;    // softmax output, simplex over C
  typename Tape<S>::Var hidden;  // h_t
  typename Tape<S>::Var key;     // E_K output pushed with h_t
  StepTrace trace;
};

// One forward step of the cell given the previous state as tape vars.
// t = 0 is signalled by an empty memory (last_pred unset): o_t is exactly
// the zero vector and attention is skipped.
template <typename S>
CellStepOut<S> cell_forward(Tape<S>& t, const CellConfig& cfg, const IamParamIds& ids,
                            typename Tape<S>::Var x,
                            const std::optional<typename Tape<S>::Var>& last_pred,
                            const std::vector<typename Tape<S>::Var>& mem_keys,
                            const std::vector<typename Tape<S>::Var>& mem_values,
                            Rng* rng, bool training,
                            KeySource key_source = KeySource::detached,
                            const std::vector<S>* recorded_key_input = nullptr) {
  using Var = typename Tape<S>::Var;
  check(t.val(x).size() == cfg.feat, "cell_forward: input dim mismatch");
  check(last_pred.has_value() == !mem_keys.empty(),
        "cell_forward: last_pred must be set iff memory is non-empty");

  CellStepOut<S> out;
  Var e = t.relu(t.affine(x, ids.e_x_w, ids.e_x_b, "e_x"));

  Var o{};
  if (mem_keys.empty()) {
    o = t.zeros(cfg.d, "o_init");
  } else {
    Var query_src = cfg.query == QueryMode::prediction ? *last_pred : x;
    auto [att, weights] =
        inductive_attention(t, query_src, mem_keys, mem_values, ids, cfg, rng, training);
    o = att;
    out.trace.attn = std::move(weights);
  }

  Var g = gate(t, o, e, ids, cfg);
  Var h = t.mix(g, o, e);
  Var pred = t.softmax(t.affine(h, ids.cls_w, ids.cls_b, "classifier"));

  Var key{};
  switch (key_source) {
    case KeySource::detached:
      key = t.relu(t.affine_const(t.val(pred), ids.e_k_w, ids.e_k_b, "e_k"));
      break;
    case KeySource::recorded:
      check(recorded_key_input != nullptr, "cell_forward: recorded key input missing");
      key = t.relu(t.affine_const(*recorded_key_input, ids.e_k_w, ids.e_k_b, "e_k"));
      break;
    case KeySource::attached:
      key = t.relu(t.affine(pred, ids.e_k_w, ids.e_k_b, "e_k"));
      break;
  }

  out.pred = pred;
  out.hidden = h;
  out.key = key;
  out.trace.gate = detail::node_doubles(t, g);
  out.trace.attn_out = detail::node_doubles(t, o);
  out.trace.encoded = detail::node_doubles(t, e);
  out.trace.hidden = detail::node_doubles(t, h);
  return out;
}

// Unrolls the cell over a training sequence on one tape, so gradients flow
// through stored hidden states into later losses. Keys enter through the
// detached prediction, cutting the backward path at each stored prediction
// while the key encoder weights still receive gradients.
template <typename S>
class CellRun {
 public:
  using Var = typename Tape<S>::Var;

  CellRun(Tape<S>& tape, const CellConfig& cfg, const IamParamIds& ids)
      : tape_(tape), cfg_(cfg), ids_(ids), mem_(cfg.capacity) {
    cfg.validate();
  }

  CellStepOut<S> step(const std::vector<S>& x, Rng* rng, bool training,
                      KeySource key_source = KeySource::detached,
                      const std::vector<S>* recorded_key_input = nullptr) {
    std::vector<Var> keys, values;
    keys.reserve(mem_.size());
    values.reserve(mem_.size());
    for (const auto& entry : mem_) {
      keys.push_back(entry.key);
      values.push_back(entry.value);
    }
    Var xv = tape_.input(std::vector<S>(x.begin(), x.end()), "x_t");
    auto out = cell_forward(tape_, cfg_, ids_, xv, last_pred_, keys, values, rng,
                            training, key_source, recorded_key_input);
    mem_.push(Entry{out.key, out.hidden});
    last_pred_ = out.pred;
    ++t_;
    return out;
  }

  size_t memory_len() const { return mem_.size(); }
  int step_index() const { return t_; }
  const std::optional<Var>& last_pred() const { return last_pred_; }

 private:
  struct Entry {
    Var key, value;
  };
  Tape<S>& tape_;
  CellConfig cfg_;
  IamParamIds ids_;
  BoundedFifo<Entry> mem_;
  std::optional<Var> last_pred_;
  int t_ = 0;
};

// Stateful inference wrapper with bounded memory: each frame runs on a
// throwaway forward-only tape and only the raw key/value vectors, the last
// prediction and the step index persist.
template <typename S>
class StreamingCell {
 public:
  StreamingCell(const CellConfig& cfg, const ParamStore<S>& params, const IamParamIds& ids)
      : cfg_(cfg), params_(params), ids_(ids), mem_(cfg.capacity) {
    cfg.validate();
  }

  struct Out {
    std::vector<S> probs;
    std::vector<S> hidden;
    StepTrace trace;
  };

  Out step(std::span<const S> x) {
    Tape<S> tape(params_, nullptr);
    using Var = typename Tape<S>::Var;

    Var xv = tape.input(std::vector<S>(x.begin(), x.end()), "x_t");
    std::optional<Var> lp;
    std::vector<Var> keys, values;
    if (t_ > 0) {
      lp = tape.input(std::vector<S>(last_pred_), "last_pred");
      keys.reserve(mem_.size());
      values.reserve(mem_.size());
      for (const auto& entry : mem_) {
        keys.push_back(tape.input(std::vector<S>(entry.key), "mem.key"));
        values.push_back(tape.input(std::vector<S>(entry.value), "mem.value"));
      }
    }
    auto step_out = cell_forward(tape, cfg_, ids_, xv, lp, keys, values, nullptr,
                                 /*training=*/false);
    Out out;
    out.probs = tape.val(step_out.pred);
    out.hidden = tape.val(step_out.hidden);
    out.trace = std::move(step_out.trace);
    mem_.push(RawEntry{tape.val(step_out.key), out.hidden});
    last_pred_ = out.probs;
    ++t_;
    return out;
  }

  void reset() {
    mem_.clear();
    last_pred_.clear();
    t_ = 0;
  }

  int step_index() const { return t_; }
  size_t memory_len() const { return mem_.size(); }

  // Bytes of persistent state: memory entries plus the last prediction.
  size_t state_bytes() const {
    const size_t entry = (cfg_.key_dim() + cfg_.d) * sizeof(S);
    return mem_.size() * entry + last_pred_.size() * sizeof(S);
  }

 private:
  struct RawEntry {
    std::vector<S> key, value;
  };
  CellConfig cfg_;
  const ParamStore<S>& params_;
  IamParamIds ids_;
  BoundedFifo<RawEntry> mem_;
  std::vector<S> last_pred_;
  int t_ = 0;
};

}  // namespace iam
