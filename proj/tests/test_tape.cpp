#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "iam/gradcheck.hpp"
#include "iam/params.hpp"
#include "iam/rng.hpp"
#include "iam/tape.hpp"

using namespace iam;

namespace {

using TapeD = Tape<double>;
using Var = TapeD::Var;

std::vector<double> random_vec(Rng& r, size_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = r.uniform(lo, hi);
  return v;
}

// Checks one op: the inputs are parameter vectors so the finite-difference
// harness can perturb them; the loss is a fixed random projection.
template <typename Build>
double check_op(uint64_t seed, std::vector<size_t> input_sizes, Build&& build,
                double h = 1e-5) {
  Rng r(seed);
  ParamStore<double> P;
  std::vector<ParamId> xs;
  for (size_t k = 0; k < input_sizes.size(); ++k) {
    const ParamId id =
        P.add_vector("x" + std::to_string(k), ParamKind::weight, input_sizes[k]);
    P.at(id).w = random_vec(r, input_sizes[k]);
    xs.push_back(id);
  }
  // projection drawn once, captured by value
  auto loss_fn = [&, xs](ParamStore<double>& params, GradBuffer<double>* grads) {
    GradBuffer<double> local(params);
    TapeD t(params, grads ? grads : &local);
    std::vector<Var> vars;
    for (ParamId id : xs) vars.push_back(t.param_vec(id));
    Var out = build(t, vars);
    Rng pr(seed + 1);
    Var loss = t.dot_const(out, random_vec(pr, t.val(out).size()));
    t.backward(loss);
    return t.val(loss)[0];
  };
  GradCheckOptions opt;
  opt.h = h;
  return grad_check(P, loss_fn, opt).worst_rel_err;
}

}  // namespace

TEST_CASE("grad: elementwise ops") {
  CHECK(check_op(1, {7}, [](TapeD& t, std::vector<Var>& v) { return t.sigmoid(v[0]); }) < 1e-8);
  CHECK(check_op(2, {7}, [](TapeD& t, std::vector<Var>& v) { return t.gelu(v[0]); }) < 1e-8);
  // keep relu inputs away from the kink
  Rng r(3);
  ParamStore<double> P;
  const ParamId x = P.add_vector("x", ParamKind::weight, 9);
  for (auto& v : P.at(x).w) v = r.uniform01() < 0.5 ? r.uniform(-2, -0.5) : r.uniform(0.5, 2);
  auto loss_fn = [x](ParamStore<double>& params, GradBuffer<double>* grads) {
    GradBuffer<double> local(params);
    TapeD t(params, grads ? grads : &local);
    Var out = t.relu(t.param_vec(x));
    Var loss = t.dot_const(out, std::vector<double>(9, 0.37));
    t.backward(loss);
    return t.val(loss)[0];
  };
  GradCheckOptions opt;
  opt.h = 1e-5;
  CHECK(grad_check(P, loss_fn, opt).worst_rel_err < 1e-9);
}

TEST_CASE("grad: softmax, layer_norm") {
  CHECK(check_op(4, {6}, [](TapeD& t, std::vector<Var>& v) { return t.softmax(v[0]); }) < 1e-8);

  // layer_norm with learnable gain/bias
  Rng r(6);
  ParamStore<double> P;
  const ParamId x = P.add_vector("x", ParamKind::weight, 8);
  const ParamId g = P.add_vector("g", ParamKind::norm_gain, 8);
  const ParamId b = P.add_vector("b", ParamKind::norm_bias, 8);
  P.at(x).w = random_vec(r, 8);
  P.at(g).w = random_vec(r, 8, 0.5, 1.5);
  P.at(b).w = random_vec(r, 8, -0.5, 0.5);
  auto loss_fn = [=](ParamStore<double>& params, GradBuffer<double>* grads) {
    GradBuffer<double> local(params);
    TapeD t(params, grads ? grads : &local);
    Var out = t.layer_norm(t.param_vec(x), g, b, 1e-5);
    Rng pr(7);
    Var loss = t.dot_const(out, random_vec(pr, 8));
    t.backward(loss);
    return t.val(loss)[0];
  };
  GradCheckOptions opt;
  opt.h = 1e-5;
  CHECK(grad_check(P, loss_fn, opt).worst_rel_err < 1e-8);
}

TEST_CASE("grad: binary ops, mix, concat, slice, broadcast") {
  CHECK(check_op(8, {5, 5}, [](TapeD& t, std::vector<Var>& v) { return t.add(v[0], v[1]); }) < 1e-9);
  CHECK(check_op(9, {5, 5}, [](TapeD& t, std::vector<Var>& v) { return t.sub(v[0], v[1]); }) < 1e-9);
  CHECK(check_op(10, {5, 5}, [](TapeD& t, std::vector<Var>& v) { return t.mul(v[0], v[1]); }) < 1e-8);
  CHECK(check_op(11, {6, 6, 6}, [](TapeD& t, std::vector<Var>& v) {
          return t.mix(t.sigmoid(v[0]), v[1], v[2]);
        }) < 1e-8);
  CHECK(check_op(12, {4, 6}, [](TapeD& t, std::vector<Var>& v) {
          return t.concat(v[0], v[1]);
        }) < 1e-9);
  CHECK(check_op(13, {9}, [](TapeD& t, std::vector<Var>& v) {
          return t.slice(v[0], 2, 5);
        }) < 1e-9);
  CHECK(check_op(14, {1}, [](TapeD& t, std::vector<Var>& v) {
          return t.broadcast(v[0], 7);
        }) < 1e-9);
  CHECK(check_op(15, {5}, [](TapeD& t, std::vector<Var>& v) {
          return t.scale(v[0], -1.75);
        }) < 1e-9);
}

TEST_CASE("grad: attention kernels") {
  // head_scores over 3 keys, slice [1, 3) of width-4 vectors
  CHECK(check_op(16, {4, 4, 4, 4}, [](TapeD& t, std::vector<Var>& v) {
          std::vector<Var> keys = {v[1], v[2], v[3]};
          return t.head_scores(v[0], keys, 1, 3, 0.5773);
        }) < 1e-8);
  // weighted_sum: weights over 3 values, slice [2, 5)
  CHECK(check_op(17, {3, 6, 6, 6}, [](TapeD& t, std::vector<Var>& v) {
          std::vector<Var> vals = {v[1], v[2], v[3]};
          return t.weighted_sum(t.softmax(v[0]), vals, 2, 3);
        }) < 1e-8);
}

TEST_CASE("grad: affine with variable and constant input") {
  Rng r(18);
  ParamStore<double> P;
  const ParamId w = P.add_matrix("W", ParamKind::weight, 5, 3);
  const ParamId b = P.add_vector("b", ParamKind::bias, 3);
  const ParamId x = P.add_vector("x", ParamKind::weight, 5);
  P.at(w).w = random_vec(r, 15);
  P.at(b).w = random_vec(r, 3);
  P.at(x).w = random_vec(r, 5);

  auto loss_fn = [=](ParamStore<double>& params, GradBuffer<double>* grads) {
    GradBuffer<double> local(params);
    TapeD t(params, grads ? grads : &local);
    Var out = t.affine(t.param_vec(x), w, b);
    // also route through the constant-input variant; x gets no grad there
    Var out2 = t.affine_const({0.3, -0.2, 0.9, 0.1, -0.6}, w, b);
    Rng pr(19);
    Var loss = t.dot_const(t.add(out, out2), random_vec(pr, 3));
    t.backward(loss);
    return t.val(loss)[0];
  };
  GradCheckOptions opt;
  opt.h = 1e-5;
  CHECK(grad_check(P, loss_fn, opt).worst_rel_err < 1e-8);
}

TEST_CASE("grad: dropout with a fixed mask") {
  Rng r(20);
  ParamStore<double> P;
  const ParamId x = P.add_vector("x", ParamKind::weight, 64);
  P.at(x).w = random_vec(r, 64);
  auto loss_fn = [=](ParamStore<double>& params, GradBuffer<double>* grads) {
    GradBuffer<double> local(params);
    TapeD t(params, grads ? grads : &local);
    Rng mask_rng(555);  // reseeded per evaluation: deterministic mask
    Var out = t.dropout(t.param_vec(x), 0.4, &mask_rng, true);
    Rng pr(21);
    Var loss = t.dot_const(out, random_vec(pr, 64));
    t.backward(loss);
    return t.val(loss)[0];
  };
  GradCheckOptions opt;
  opt.h = 1e-5;
  CHECK(grad_check(P, loss_fn, opt).worst_rel_err < 1e-9);
}

TEST_CASE("grad: ce_from_probs") {
  Rng r(22);
  ParamStore<double> P;
  const ParamId z = P.add_vector("z", ParamKind::weight, 6);
  P.at(z).w = random_vec(r, 6);
  std::vector<double> target = {0.1, 0.0, 0.55, 0.05, 0.3, 0.0};
  auto loss_fn = [=](ParamStore<double>& params, GradBuffer<double>* grads) {
    GradBuffer<double> local(params);
    TapeD t(params, grads ? grads : &local);
    Var probs = t.softmax(t.param_vec(z));
    Var loss = t.ce_from_probs(probs, target, 1.3, 1e-12);
    t.backward(loss);
    return t.val(loss)[0];
  };
  GradCheckOptions opt;
  opt.h = 1e-5;
  CHECK(grad_check(P, loss_fn, opt).worst_rel_err < 1e-8);
}

TEST_CASE("grad: quadratic loss has closed-form gradient") {
  // loss = 0.5 * ||W x||^2 with fixed x: dL/dW_ij = x_i * (W^T x)_j
  Rng r(23);
  ParamStore<double> P;
  const ParamId w = P.add_matrix("W", ParamKind::weight, 4, 3);
  P.at(w).w = random_vec(r, 12);
  const std::vector<double> x = random_vec(r, 4);

  auto loss_fn2 = [&x, w](ParamStore<double>& params, GradBuffer<double>* grads) {
    GradBuffer<double> local(params);
    TapeD t(params, grads ? grads : &local);
    Var xv = t.input(std::vector<double>(x));
    Var y = t.linear(xv, w);
    Var half_sq = t.scale(t.mul(y, y), 0.5);
    Var loss = t.dot_const(half_sq, std::vector<double>(3, 1.0));
    t.backward(loss);
    return t.val(loss)[0];
  };

  GradBuffer<double> grads(P);
  const double loss = loss_fn2(P, &grads);

  std::vector<double> wx(3, 0.0);
  for (size_t i = 0; i < 4; ++i)
    for (size_t j = 0; j < 3; ++j) wx[j] += x[i] * P.at(w).w[i * 3 + j];
  double expected_loss = 0;
  for (double v : wx) expected_loss += 0.5 * v * v;
  CHECK(loss == doctest::Approx(expected_loss).epsilon(1e-12));
  for (size_t i = 0; i < 4; ++i)
    for (size_t j = 0; j < 3; ++j)
      CHECK(grads.g[w][i * 3 + j] == doctest::Approx(x[i] * wx[j]).epsilon(1e-10));

  // and the finite-difference harness agrees
  GradCheckOptions opt;
  opt.h = 1e-5;
  CHECK(grad_check(P, loss_fn2, opt).worst_rel_err < 1e-9);
}

TEST_CASE("grad: loss constant in a parameter gives exact zero") {
  ParamStore<double> P;
  const ParamId used = P.add_vector("used", ParamKind::weight, 3);
  const ParamId unused = P.add_vector("unused", ParamKind::weight, 3);
  P.at(used).w = {0.2, -0.4, 0.6};
  P.at(unused).w = {1, 2, 3};

  GradBuffer<double> grads(P);
  TapeD t(P, &grads);
  Var loss = t.dot_const(t.param_vec(used), {1, 1, 1});
  t.backward(loss);
  for (double g : grads.g[unused]) CHECK(g == 0.0);
}

TEST_CASE("gradient_of fills the store accumulators") {
  ParamStore<double> P;
  const ParamId x = P.add_vector("x", ParamKind::weight, 2);
  P.at(x).w = {3.0, -1.0};
  const double loss = gradient_of(P, [&](TapeD& t) {
    Var v = t.param_vec(x);
    return t.dot_const(t.mul(v, v), {1.0, 1.0});  // sum of squares
  });
  CHECK(loss == doctest::Approx(10.0));
  CHECK(P.at(x).g[0] == doctest::Approx(6.0));
  CHECK(P.at(x).g[1] == doctest::Approx(-2.0));
}

TEST_CASE("grad_check subsample mode checks at least 25 per tensor") {
  Rng r(30);
  ParamStore<double> P;
  const ParamId x = P.add_vector("x", ParamKind::weight, 400);
  P.at(x).w = random_vec(r, 400);
  auto loss_fn = [=](ParamStore<double>& params, GradBuffer<double>* grads) {
    GradBuffer<double> local(params);
    TapeD t(params, grads ? grads : &local);
    Var out = t.sigmoid(t.param_vec(x));
    Var loss = t.dot_const(out, std::vector<double>(400, 0.01));
    t.backward(loss);
    return t.val(loss)[0];
  };
  GradCheckOptions opt;
  opt.h = 1e-5;
  opt.samples_per_tensor = 30;
  auto rep = grad_check(P, loss_fn, opt);
  CHECK(rep.checked >= 25);
  CHECK(rep.checked <= 30);
  CHECK(rep.worst_rel_err < 1e-8);
}
