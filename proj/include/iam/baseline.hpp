#pragma once

#include <optional>
#include <vector>

#include "iam/cell.hpp"
#include "iam/params.hpp"
#include "iam/tape.hpp"

namespace iam {

// Minimal first-order recurrent control: h_t = f(x_t + g(h_{t-1})) with f
// and g a single affine + ReLU each, plus a softmax classifier. Not a
// restriction of the IAM cell; an independent attention-free baseline.
struct BaselineParamIds {
  ParamId g_w, g_b;  // d -> F
  ParamId f_w, f_b;  // F -> d
  ParamId cls_w, cls_b;
};

template <typename S>
BaselineParamIds build_baseline_params(ParamStore<S>& P, uint32_t feat, uint32_t d,
                                       uint32_t classes) {
  BaselineParamIds ids;
  ids.g_w = P.add_matrix("fo.g.W", ParamKind::weight, d, feat);
  ids.g_b = P.add_vector("fo.g.b", ParamKind::bias, feat);
  ids.f_w = P.add_matrix("fo.f.W", ParamKind::weight, feat, d);
  ids.f_b = P.add_vector("fo.f.b", ParamKind::bias, d);
  ids.cls_w = P.add_matrix("fo.cls.W", ParamKind::weight, d, classes);
  ids.cls_b = P.add_vector("fo.cls.b", ParamKind::bias, classes);
  return ids;
}

template <typename S>
class BaselineRun {
 public:
  using Var = typename Tape<S>::Var;

  BaselineRun(Tape<S>& tape, const BaselineParamIds& ids, uint32_t d)
      : tape_(tape), ids_(ids), d_(d) {}

  struct StepOut {
    Var pred;
    Var hidden;
  };

  StepOut step(const std::vector<S>& x) {
    Var xv = tape_.input(std::vector<S>(x.begin(), x.end()), "x_t");
    Var hprev = last_hidden_ ? *last_hidden_ : tape_.zeros(d_, "h_init");
    Var gh = tape_.relu(tape_.affine(hprev, ids_.g_w, ids_.g_b, "fo.g"));
    Var h = tape_.relu(tape_.affine(tape_.add(xv, gh), ids_.f_w, ids_.f_b, "fo.f"));
    Var pred = tape_.softmax(tape_.affine(h, ids_.cls_w, ids_.cls_b, "fo.cls"));
    last_hidden_ = h;
    return {pred, h};
  }

 private:
  Tape<S>& tape_;
  BaselineParamIds ids_;
  uint32_t d_;
  std::optional<Var> last_hidden_;
};

}  // namespace iam
