// baselines.hpp: IOU, center-distance and learned-similarity trackers.
//
// IOU and center kinds compare a constant-velocity prediction of each track's
// box with the detections; the learned kind compares the embedding of the
// track's latest detection. All solve a min-cost assignment on negated
// similarity and reuse TrackBook.

#pragma once

#include "softtrack/assignment.hpp"
#include "softtrack/autodiff.hpp"
#include "softtrack/random.hpp"
#include "softtrack/sequence.hpp"
#include "softtrack/tracker.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace softtrack {

enum class BaselineKind
{
  Iou,
  Center,
  Learned,
};

inline std::string to_string(BaselineKind k)
{
  switch (k) {
    case BaselineKind::Iou: return "iou";
    case BaselineKind::Center: return "center";
    case BaselineKind::Learned: return "learned";
  }
  return "?";
}

inline BaselineKind baseline_kind_from_string(const std::string& s)
{
  if (s == "iou") return BaselineKind::Iou;
  if (s == "center") return BaselineKind::Center;
  if (s == "learned") return BaselineKind::Learned;
  throw std::invalid_argument("unknown baseline kind '" + s + "' (expected iou, center or learned)");
}

struct BaselineConfig
{
  double iou_gate = 0.1;     // reject IOU below
  double center_gate = 0.2;  // reject center distance above
  double cosine_gate = 0.3;  // reject cosine below
  double margin = 0.3;       // contrastive margin
};

inline nlohmann::json to_json(const BaselineConfig& c)
{
  return {{"iou_gate", c.iou_gate}, {"center_gate", c.center_gate}, {"cosine_gate", c.cosine_gate},
          {"margin", c.margin}};
}

inline BaselineConfig baseline_config_from_json(const nlohmann::json& j, BaselineConfig c = {})
{
  c.iou_gate = j.value("iou_gate", c.iou_gate);
  c.center_gate = j.value("center_gate", c.center_gate);
  c.cosine_gate = j.value("cosine_gate", c.cosine_gate);
  c.margin = j.value("margin", c.margin);
  if (!(c.margin > 0.0 && c.margin < 2.0)) throw std::invalid_argument("BaselineConfig: margin must be in (0, 2)");
  return c;
}

/// Box at `frame` extrapolated from the latest two (frame, box) observations.
/// A single observation predicts zero velocity.
inline BoundingBox predict_box(const std::vector<std::pair<int, BoundingBox>>& obs, int frame)
{
  if (obs.empty()) throw std::invalid_argument("predict_box: no observations");
  const auto& [f1, b1] = obs.back();
  if (obs.size() == 1) return b1;
  const auto& [f0, b0] = obs[obs.size() - 2];
  const double steps = static_cast<double>(frame - f1) / static_cast<double>(f1 - f0);
  const double dx = (b1.cx() - b0.cx()) * steps;
  const double dy = (b1.cy() - b0.cy()) * steps;
  return {b1.x1 + dx, b1.y1 + dy, b1.x2 + dx, b1.y2 + dy};
}

inline double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b)
{
  if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: length mismatch");
  double dot = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) throw std::invalid_argument("cosine_similarity: zero-norm embedding");
  return dot / std::sqrt(aa * bb);
}

/// Four FC layers, 4 → 64 → 64 → 64 → 64, ReLU between.
struct SimilarityParams
{
  static constexpr std::size_t kWidth = 64;
  ad::Tensor w[4];
  ad::Tensor b[4];

  std::vector<ad::NamedParam> named()
  {
    std::vector<ad::NamedParam> out;
    for (int i = 0; i < 4; ++i) {
      out.push_back({"fc" + std::to_string(i) + ".weight", &w[i]});
      out.push_back({"fc" + std::to_string(i) + ".bias", &b[i]});
    }
    return out;
  }
};

inline SimilarityParams init_similarity_params(std::uint64_t seed)
{
  Rng rng(seed);
  SimilarityParams p;
  for (int i = 0; i < 4; ++i) {
    const std::size_t in = i == 0 ? 4 : SimilarityParams::kWidth;
    const std::size_t out = SimilarityParams::kWidth;
    const double s = std::sqrt(6.0 / static_cast<double>(in + out));
    std::vector<double> v(in * out);
    for (auto& x : v) x = rng.uniform(-s, s);
    p.w[i] = ad::Tensor({in, out}, std::move(v), true);
    p.b[i] = ad::Tensor({out}, std::vector<double>(out, 0.0), true);
  }
  return p;
}

struct BoundSimilarity
{
  ad::Var w[4];
  ad::Var b[4];

  BoundSimilarity(ad::Graph& g, SimilarityParams& p)
  {
    for (int i = 0; i < 4; ++i) {
      w[i] = g.parameter(p.w[i]);
      b[i] = g.parameter(p.b[i]);
    }
  }

  ad::Var forward(ad::Graph& g, ad::Var boxes) const
  {
    auto h = boxes;
    for (int i = 0; i < 4; ++i) {
      h = ad::add_row(g, ad::matmul(g, h, w[i]), b[i]);
      if (i < 3) h = ad::relu(g, h);
    }
    return h;
  }
};

inline std::vector<std::vector<double>> embed_boxes(const SimilarityParams& params,
                                                    std::span<const BoundingBox> boxes)
{
  if (boxes.empty()) return {};
  ad::Graph g;
  g.set_grad_enabled(false);
  SimilarityParams copy = params;
  BoundSimilarity m(g, copy);
  const auto& out = g.value(m.forward(g, g.constant(box_rows(boxes))));
  std::vector<std::vector<double>> rows;
  for (std::size_t r = 0; r < boxes.size(); ++r) rows.push_back(row_of(out, r));
  return rows;
}

/// Mean over pairs of dist² (positive) or max(0, margin − dist)² (negative),
/// with dist = 1 − cos(a_r, b_r).
inline ad::Var contrastive_loss(ad::Graph& g, ad::Var a, ad::Var b, const std::vector<bool>& positive,
                                double margin)
{
  if (!(margin > 0.0 && margin < 2.0)) throw std::invalid_argument("contrastive_loss: margin must be in (0, 2)");
  const auto n = g.value(a).rows();
  if (positive.size() != n) throw std::invalid_argument("contrastive_loss: label count mismatch");
  if (n == 0) throw std::invalid_argument("contrastive_loss: no pairs");
  auto dist = ad::affine(g, ad::cosine_rows(g, a, b), -1.0, 1.0);
  std::vector<double> pos(n), neg(n);
  for (std::size_t r = 0; r < n; ++r) (positive[r] ? pos : neg)[r] = 1.0;
  auto hinge = ad::relu(g, ad::affine(g, dist, -1.0, margin));
  auto per_pair = ad::add(g, ad::mul(g, ad::mul(g, dist, dist), g.constant(ad::Tensor({n}, std::move(pos)))),
                          ad::mul(g, ad::mul(g, hinge, hinge), g.constant(ad::Tensor({n}, std::move(neg)))));
  auto total = ad::sum(g, per_pair);
  return ad::affine(g, total, 1.0 / static_cast<double>(n));
}

/// Pairs from a teacher-forced window: each alive identity's latest detection
/// against every detection at the frame; same identity is positive.
struct SimilarityPairs
{
  std::vector<BoundingBox> anchors;
  std::vector<BoundingBox> candidates;
  std::vector<bool> positive;
};

inline void collect_similarity_pairs(const Sequence& seq, int start, int length, int T_lost_P,
                                     SimilarityPairs& out)
{
  std::map<int, std::pair<int, BoundingBox>> latest;
  const int end = std::min(seq.num_frames(), start + length);
  for (int t = start; t < end; ++t) {
    const auto& dets = seq.frames[static_cast<std::size_t>(t)];
    for (const auto& [id, seen] : latest) {
      if (t - seen.first > T_lost_P) continue;
      for (const auto& d : dets) {
        out.anchors.push_back(seen.second);
        out.candidates.push_back(d.box);
        out.positive.push_back(d.gt_identity && *d.gt_identity == id);
      }
    }
    for (const auto& d : dets) {
      if (d.gt_identity) latest[*d.gt_identity] = {t, d.box};
    }
  }
}

struct SimilarityTraining
{
  int steps = 500;
  int batch_size = 16;
  int window = 32;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  std::uint64_t seed = 0;
};

inline nlohmann::json to_json(const SimilarityTraining& c)
{
  return {{"steps", c.steps},           {"batch_size", c.batch_size}, {"window", c.window},
          {"learning_rate", c.learning_rate}, {"momentum", c.momentum}, {"seed", c.seed}};
}

inline SimilarityTraining similarity_training_from_json(const nlohmann::json& j, SimilarityTraining c = {})
{
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.window = j.value("window", c.window);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.momentum = j.value("momentum", c.momentum);
  c.seed = j.value("seed", c.seed);
  if (c.steps < 0 || c.batch_size < 1 || c.window < 2) throw std::invalid_argument("SimilarityTraining: bad sizes");
  return c;
}

/// Trains the similarity network with SGD; returns the per-step losses.
inline std::vector<double> train_similarity(std::span<const Sequence> train, SimilarityParams& params,
                                            const SimilarityTraining& opt, const BaselineConfig& cfg,
                                            int T_lost_P,
                                            const std::function<void(int, double)>& on_step = {})
{
  if (train.empty()) throw std::invalid_argument("train_similarity: no training sequences");
  Rng rng(opt.seed);
  ad::SgdState sgd{opt.learning_rate, opt.momentum, {}};
  auto named = params.named();
  std::vector<double> losses;
  for (int step = 0; step < opt.steps; ++step) {
    SimilarityPairs pairs;
    for (int b = 0; b < opt.batch_size; ++b) {
      const auto& seq = train[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(train.size()) - 1))];
      const int last_start = std::max(0, seq.num_frames() - opt.window);
      const int start = static_cast<int>(rng.uniform_int(0, last_start));
      collect_similarity_pairs(seq, start, opt.window, T_lost_P, pairs);
    }
    if (pairs.positive.empty()) {
      losses.push_back(0.0);
      continue;
    }
    ad::Graph g;
    BoundSimilarity m(g, params);
    auto ea = m.forward(g, g.constant(box_rows(pairs.anchors)));
    auto eb = m.forward(g, g.constant(box_rows(pairs.candidates)));
    auto loss = contrastive_loss(g, ea, eb, pairs.positive, cfg.margin);
    const double value = g.value(loss).values[0];
    if (!std::isfinite(value)) {
      throw std::runtime_error("train_similarity: non-finite loss at step " + std::to_string(step));
    }
    g.backward(loss);
    ad::sgd_step(named, sgd);
    losses.push_back(value);
    if (on_step) on_step(step, value);
  }
  return losses;
}

/// Runs one baseline over a sequence; params is required for the learned kind.
inline RunResult run_baseline(BaselineKind kind, const Sequence& seq, const TrackerConfig& tcfg,
                              const BaselineConfig& cfg, const SimilarityParams* params = nullptr)
{
  if (kind == BaselineKind::Learned && params == nullptr) {
    throw std::invalid_argument("run_baseline: learned kind needs similarity parameters");
  }
  TrackBook book(tcfg);
  RunResult out;
  out.output.frames.resize(seq.frames.size());
  for (int t = 0; t < seq.num_frames(); ++t) {
    const auto& dets = seq.frames[static_cast<std::size_t>(t)];
    const auto alive = book.alive();
    std::vector<BoundingBox> preds;
    if (kind != BaselineKind::Learned) {
      for (auto ti : alive) preds.push_back(predict_box(book.tracks()[ti].observations, t));
    }
    std::vector<std::vector<double>> de;
    if (kind == BaselineKind::Learned) {
      std::vector<BoundingBox> boxes;
      for (const auto& d : dets) boxes.push_back(d.box);
      de = embed_boxes(*params, boxes);
    }

    CostMatrix cm(alive.size(), dets.size(), kForbiddenCost);
    for (std::size_t r = 0; r < alive.size(); ++r) {
      for (std::size_t c = 0; c < dets.size(); ++c) {
        switch (kind) {
          case BaselineKind::Iou: {
            const double s = iou(preds[r], dets[c].box);
            if (s >= cfg.iou_gate) cm.at(r, c) = -s;
            break;
          }
          case BaselineKind::Center: {
            const double d = std::hypot(preds[r].cx() - dets[c].box.cx(), preds[r].cy() - dets[c].box.cy());
            if (d <= cfg.center_gate) cm.at(r, c) = d;
            break;
          }
          case BaselineKind::Learned: {
            const double s = cosine_similarity(book.tracks()[alive[r]].z_T, de[c]);
            if (s >= cfg.cosine_gate) cm.at(r, c) = -s;
            break;
          }
        }
      }
    }
    FrameDecision decision;
    for (auto [r, c] : solve_min_cost_assignment(cm)) decision.matches.emplace_back(alive[r], c);
    out.output.frames[static_cast<std::size_t>(t)] = book.commit(t, dets, de, decision);
  }
  out.occlusion = book.occlusion_log();
  return out;
}

}  // namespace softtrack
