// Small deterministic inputs shared by several test files.

#pragma once

#include "oracles.hpp"
#include "softtrack/model.hpp"
#include "softtrack/random.hpp"
#include "softtrack/train.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace softtrack::fixture {

/// Random tensor with entries uniform in [lo, hi).
inline ad::Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0)
{
  std::vector<double> v(ad::Tensor::numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return ad::Tensor(std::move(shape), std::move(v), true);
}

/// Moves every parameter off its structured initialization (unit gains, zero
/// biases) so gradient checks exercise generic values.
inline void jitter(ModelParams& p, Rng& rng, double scale = 0.3)
{
  for (auto& np : p.named()) {
    for (auto& x : np.tensor->values) x += rng.uniform(-scale, scale);
  }
}

inline BoundingBox random_box(Rng& rng)
{
  return BoundingBox::from_center(rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), 0.05, 0.05);
}

/// Three frames with up to four detections each; identity 2 is missing at
/// frame 1 so the occlusion class receives a target.
inline Sequence micro_sequence(std::uint64_t seed)
{
  Rng rng(seed);
  std::vector<std::vector<std::pair<int, BoundingBox>>> frames(3);
  for (int t = 0; t < 3; ++t) {
    for (int id = 0; id < 4; ++id) {
      if (t == 1 && id == 2) continue;
      if (t == 2 && id == 3) continue;
      frames[static_cast<std::size_t>(t)].push_back({id, random_box(rng)});
    }
  }
  return oracle::scripted_sequence(frames);
}

inline ModelConfig micro_config()
{
  ModelConfig c;
  c.d_k = 8;
  c.L_enc = 2;
  c.N_enc = 2;
  return c;
}

struct Window
{
  std::vector<BoundingBox> boxes;
  std::vector<int> frames;
};

/// Random window: frames 0..span-1 with 1..4 detections each.
inline Window random_window(Rng& rng, int span)
{
  Window w;
  for (int t = 0; t < span; ++t) {
    const int n = 1 + static_cast<int>(rng.uniform_int(0, 3));
    for (int k = 0; k < n; ++k) {
      w.boxes.push_back(fixture::random_box(rng));
      w.frames.push_back(t);
    }
  }
  return w;
}

struct Encoded
{
  ad::Tensor z_n, z_final;
};

inline Encoded encode(ModelParams& p, const ModelConfig& cfg, const Window& w, int t)
{
  ad::Graph g;
  BoundModel m(g, p);
  auto z0 = embed_measurements(g, m, g.constant(box_rows(w.boxes)), cfg.ln_epsilon);
  auto enc = encode_window(g, m, cfg, z0, w.frames, t);
  return {g.value(enc.z_n), g.value(enc.z_final)};
}

inline double max_diff(const ad::Tensor& a, const oracle::Mat& b)
{
  double worst = 0.0;
  if (a.rows() != b.size()) throw std::logic_error("max_diff: row count mismatch");
  for (std::size_t r = 0; r < b.size(); ++r) {
    for (std::size_t c = 0; c < b[r].size(); ++c) {
      worst = std::max(worst, std::abs(a.values[r * a.cols() + c] - b[r][c]));
    }
  }
  return worst;
}

inline double max_diff(const ad::Tensor& a, const ad::Tensor& b)
{
  if (a.shape != b.shape) throw std::logic_error("max_diff: shape mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) worst = std::max(worst, std::abs(a.values[i] - b.values[i]));
  return worst;
}

/// Largest deviation between encode_window and the loop reference over
/// `trials` random windows with random depth, width and lookahead.
inline double attention_oracle_max_diff(int trials, std::uint64_t seed)
{
  Rng rng(seed);
  double worst = 0.0;
  for (int trial = 0; trial < trials; ++trial) {
    ModelConfig cfg;
    cfg.d_k = 4 + 4 * static_cast<int>(rng.uniform_int(0, 2));
    cfg.L_enc = 1 + static_cast<int>(rng.uniform_int(0, 3));
    cfg.L_future = static_cast<int>(rng.uniform_int(0, 2));
    cfg.N_enc = 1 + static_cast<int>(rng.uniform_int(0, 2));
    auto p = init_model_params(cfg, 100 + static_cast<std::uint64_t>(trial));
    jitter(p, rng);
    const auto w = random_window(rng, cfg.L_enc + cfg.L_future + 3);
    const int t = static_cast<int>(rng.uniform_int(0, w.frames.back()));
    const auto got = encode(p, cfg, w, t);
    const auto want = oracle::naive_encode(p, cfg, w.boxes, w.frames, t);
    worst = std::max({worst, max_diff(got.z_n, want.z_n), max_diff(got.z_final, want.z_final)});
  }
  return worst;
}

/// Random square cost matrices solved both ways; returns the number of
/// matrices where the solver's total cost differs from the enumerated optimum.
inline int assignment_oracle_mismatches(int trials, std::size_t n, std::uint64_t seed)
{
  Rng rng(seed);
  int bad = 0;
  for (int trial = 0; trial < trials; ++trial) {
    CostMatrix m(n, n);
    for (auto& v : m.values) v = rng.uniform(-1, 1);
    const auto a = solve_min_cost_assignment(m);
    if (a.size() != n || oracle::assignment_cost(m, a) != oracle::brute_force_min_cost(m)) ++bad;
  }
  return bad;
}

/// Σ x ⊙ C for a fixed random C, turning any output into a generic scalar.
inline ad::Var probe(ad::Graph& g, ad::Var x, std::uint64_t seed)
{
  Rng rng(seed);
  const auto shape = g.value(x).shape;
  std::vector<double> c(ad::Tensor::numel(shape));
  for (auto& v : c) v = rng.uniform(-1.0, 1.0);
  return ad::sum(g, ad::mul(g, x, g.constant(ad::Tensor(shape, std::move(c)))));
}

/// One finite-difference check per differentiable op on random inputs.
struct OpCase
{
  std::string name;
  std::function<oracle::GradCheck()> run;
};

inline std::vector<OpCase> op_cases(std::uint64_t seed = 2024)
{
  using ad::Graph;
  using ad::Var;
  auto rng = std::make_shared<Rng>(seed);
  auto t = [rng](std::vector<std::size_t> shape, double lo = -1.0, double hi = 1.0) {
    return std::make_shared<ad::Tensor>(random_tensor(std::move(shape), *rng, lo, hi));
  };
  std::vector<OpCase> out;
  {
    auto a = t({3, 4}), b = t({4, 2});
    out.push_back({"matmul", [=] {
                     return oracle::check_gradients(
                       [&](Graph& g) { return probe(g, ad::matmul(g, g.parameter(*a), g.parameter(*b)), 1); },
                       {a.get(), b.get()});
                   }});
  }
  {
    auto a = t({3, 4}), b = t({5, 4});
    out.push_back({"matmul_nt", [=] {
                     return oracle::check_gradients(
                       [&](Graph& g) { return probe(g, ad::matmul_nt(g, g.parameter(*a), g.parameter(*b)), 2); },
                       {a.get(), b.get()});
                   }});
  }
  {
    auto a = t({3, 4}), b = t({3, 4}), r = t({4});
    out.push_back({"add_add_row_mul", [=] {
                     return oracle::check_gradients(
                       [&](Graph& g) {
                         auto av = g.parameter(*a), bv = g.parameter(*b);
                         return probe(g, ad::mul(g, ad::add_row(g, ad::add(g, av, bv), g.parameter(*r)), bv), 3);
                       },
                       {a.get(), b.get(), r.get()});
                   }});
  }
  {
    auto a = t({4, 5});
    out.push_back({"affine_relu_tanh", [=] {
                     return oracle::check_gradients(
                       [&](Graph& g) {
                         return probe(g, ad::tanh(g, ad::relu(g, ad::affine(g, g.parameter(*a), 1.7, 0.2))), 4);
                       },
                       {a.get()});
                   }});
  }
  {
    auto x = t({3, 6}), gain = t({6}), bias = t({6});
    out.push_back({"layer_norm", [=] {
                     return oracle::check_gradients(
                       [&](Graph& g) {
                         return probe(g, ad::layer_norm(g, g.parameter(*x), g.parameter(*gain), g.parameter(*bias)), 5);
                       },
                       {x.get(), gain.get(), bias.get()});
                   }});
  }
  {
    auto x = t({3, 5}, -3, 3);
    out.push_back({"softmax_rows", [=] {
                     return oracle::check_gradients(
                       [&](Graph& g) { return probe(g, ad::softmax_rows(g, g.parameter(*x)), 6); }, {x.get()});
                   }});
  }
  {
    auto x = t({3, 4}), y = t({2, 4});
    out.push_back({"gather_select_concat", [=] {
                     return oracle::check_gradients(
                       [&](Graph& g) {
                         auto xv = g.parameter(*x);
                         auto gathered = ad::gather_cols(g, xv, {0, 0, 3, 1, 2, 2, 3, 3, 0}, 3);
                         auto picked = ad::select_rows(g, xv, {2, 0, 2});
                         Var parts[] = {picked, g.parameter(*y)};
                         return ad::sum(g, ad::concat_rows(g, std::vector<Var>{probe(g, gathered, 7),
                                                                                probe(g, ad::concat_rows(g, parts), 8)}));
                       },
                       {x.get(), y.get()});
                   }});
  }
  {
    auto a = t({4, 5}), b = t({4, 5});
    out.push_back({"cosine_rows", [=] {
                     return oracle::check_gradients(
                       [&](Graph& g) { return probe(g, ad::cosine_rows(g, g.parameter(*a), g.parameter(*b)), 9); },
                       {a.get(), b.get()});
                   }});
  }
  {
    auto x = t({4, 5}, -2, 2);
    out.push_back({"cross_entropy_sum", [=] {
                     return oracle::check_gradients(
                       [&](Graph& g) { return ad::cross_entropy_sum(g, g.parameter(*x), {0, 4, 2, 2}); }, {x.get()});
                   }});
  }
  return out;
}

/// Full association loss on the micro sequence against central differences.
inline oracle::GradCheck micro_batch_grad_check(std::uint64_t seed = 7)
{
  const auto cfg = micro_config();
  auto params = init_model_params(cfg, seed);
  Rng rng(seed + 1);
  jitter(params, rng);
  const auto seq = micro_sequence(seed + 2);
  std::vector<ad::Tensor*> tensors;
  for (auto& np : params.named()) tensors.push_back(np.tensor);
  return oracle::check_gradients(
    [&](ad::Graph& g) {
      BoundModel m(g, params);
      std::vector<AssociationProblem> problems;
      add_window_problems(g, m, cfg, seq, 0, 3, 5, problems);
      return association_loss(g, problems, m.z_occ);
    },
    tensors);
}

}  // namespace softtrack::fixture
