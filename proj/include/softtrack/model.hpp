// model.hpp: measurement embedding, windowed attention encoding with learned
// relative time features, tanh projection head, and the occlusion-aware
// association distribution and loss.
//
// Rows are detections, columns are features; weights map rows by right
// multiplication (z·W).

#pragma once

#include "softtrack/autodiff.hpp"
#include "softtrack/random.hpp"
#include "softtrack/sequence.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace softtrack {

struct ModelConfig
{
  int d_k = 64;
  int L_enc = 5;
  int N_enc = 2;
  int L_future = 0;
  bool attention_encoding = true;  // "AE": off feeds z0 straight to the head
  bool occlusion_state = true;     // "Occ": off drops the occlusion class
  double ln_epsilon = 1e-5;

  /// Half-width of the relative table; window offsets span ±(L_enc + L_future).
  int max_offset() const { return L_enc + L_future; }

  void validate() const
  {
    if (d_k < 1 || L_enc < 1 || N_enc < 1 || L_future < 0) {
      throw std::invalid_argument("ModelConfig: d_k, L_enc, N_enc must be positive and L_future >= 0");
    }
    if (!(ln_epsilon > 0.0)) throw std::invalid_argument("ModelConfig: ln_epsilon must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline nlohmann::json to_json(const ModelConfig& c)
{
  return {{"d_k", c.d_k},
          {"L_enc", c.L_enc},
          {"N_enc", c.N_enc},
          {"L_future", c.L_future},
          {"attention_encoding", c.attention_encoding},
          {"occlusion_state", c.occlusion_state},
          {"ln_epsilon", c.ln_epsilon}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c = {})
{
  c.d_k = j.value("d_k", c.d_k);
  c.L_enc = j.value("L_enc", c.L_enc);
  c.N_enc = j.value("N_enc", c.N_enc);
  c.L_future = j.value("L_future", c.L_future);
  c.attention_encoding = j.value("attention_encoding", c.attention_encoding);
  c.occlusion_state = j.value("occlusion_state", c.occlusion_state);
  c.ln_epsilon = j.value("ln_epsilon", c.ln_epsilon);
  c.validate();
  return c;
}

struct EncoderLayerParams
{
  ad::Tensor wq, wk, wv;
  ad::Tensor attn_ln_gain, attn_ln_bias;
  ad::Tensor ffn_w, ffn_b;
  ad::Tensor ffn_ln_gain, ffn_ln_bias;
};

struct ModelParams
{
  ad::Tensor stem_w1, stem_b1, stem_w2, stem_b2, stem_ln_gain, stem_ln_bias;
  std::vector<EncoderLayerParams> layers;
  ad::Tensor rel, rel_u, rel_v;  // rel: (2·max_offset + 1) × d_k, row k ↔ offset k − max_offset
  ad::Tensor head_w1, head_b1, head_w2, head_b2;
  ad::Tensor z_occ;

  ModelParams() = default;
  ModelParams(const ModelParams&) = default;
  ModelParams& operator=(const ModelParams&) = default;

  std::vector<ad::NamedParam> named()
  {
    std::vector<ad::NamedParam> out = {
      {"stem.fc1.weight", &stem_w1}, {"stem.fc1.bias", &stem_b1},
      {"stem.fc2.weight", &stem_w2}, {"stem.fc2.bias", &stem_b2},
      {"stem.ln.gain", &stem_ln_gain}, {"stem.ln.bias", &stem_ln_bias},
    };
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto p = "enc" + std::to_string(l) + ".";
      auto& L = layers[l];
      out.push_back({p + "wq", &L.wq});
      out.push_back({p + "wk", &L.wk});
      out.push_back({p + "wv", &L.wv});
      out.push_back({p + "attn_ln.gain", &L.attn_ln_gain});
      out.push_back({p + "attn_ln.bias", &L.attn_ln_bias});
      out.push_back({p + "ffn.weight", &L.ffn_w});
      out.push_back({p + "ffn.bias", &L.ffn_b});
      out.push_back({p + "ffn_ln.gain", &L.ffn_ln_gain});
      out.push_back({p + "ffn_ln.bias", &L.ffn_ln_bias});
    }
    out.push_back({"rel.table", &rel});
    out.push_back({"rel.u", &rel_u});
    out.push_back({"rel.v", &rel_v});
    out.push_back({"head.fc1.weight", &head_w1});
    out.push_back({"head.fc1.bias", &head_b1});
    out.push_back({"head.fc2.weight", &head_w2});
    out.push_back({"head.fc2.bias", &head_b2});
    out.push_back({"occlusion.embedding", &z_occ});
    return out;
  }
};

namespace detail {

inline ad::Tensor xavier(std::size_t fan_in, std::size_t fan_out, Rng& rng)
{
  const double s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(fan_in * fan_out);
  for (auto& x : v) x = rng.uniform(-s, s);
  return ad::Tensor({fan_in, fan_out}, std::move(v), true);
}

inline ad::Tensor filled(std::vector<std::size_t> shape, double value)
{
  auto t = ad::Tensor::zeros(std::move(shape), true);
  std::fill(t.values.begin(), t.values.end(), value);
  return t;
}

inline ad::Tensor small_normal(std::vector<std::size_t> shape, Rng& rng, double sigma = 0.02)
{
  auto t = ad::Tensor::zeros(std::move(shape), true);
  for (auto& x : t.values) x = rng.normal(0.0, sigma);
  return t;
}

}  // namespace detail

/// Xavier-uniform weights, zero biases, unit LayerNorm gains; relative table,
/// u, v and the occlusion embedding from N(0, 0.02).
inline ModelParams init_model_params(const ModelConfig& cfg, std::uint64_t seed)
{
  cfg.validate();
  Rng rng(seed);
  const auto d = static_cast<std::size_t>(cfg.d_k);
  ModelParams p;
  p.stem_w1 = detail::xavier(4, d, rng);
  p.stem_b1 = detail::filled({d}, 0.0);
  p.stem_w2 = detail::xavier(d, d, rng);
  p.stem_b2 = detail::filled({d}, 0.0);
  p.stem_ln_gain = detail::filled({d}, 1.0);
  p.stem_ln_bias = detail::filled({d}, 0.0);
  for (int l = 0; l < cfg.N_enc; ++l) {
    EncoderLayerParams L;
    L.wq = detail::xavier(d, d, rng);
    L.wk = detail::xavier(d, d, rng);
    L.wv = detail::xavier(d, d, rng);
    L.attn_ln_gain = detail::filled({d}, 1.0);
    L.attn_ln_bias = detail::filled({d}, 0.0);
    L.ffn_w = detail::xavier(d, d, rng);
    L.ffn_b = detail::filled({d}, 0.0);
    L.ffn_ln_gain = detail::filled({d}, 1.0);
    L.ffn_ln_bias = detail::filled({d}, 0.0);
    p.layers.push_back(std::move(L));
  }
  const auto table = static_cast<std::size_t>(2 * cfg.max_offset() + 1);
  p.rel = detail::small_normal({table, d}, rng);
  p.rel_u = detail::small_normal({d}, rng);
  p.rel_v = detail::small_normal({d}, rng);
  p.head_w1 = detail::xavier(d, d, rng);
  p.head_b1 = detail::filled({d}, 0.0);
  p.head_w2 = detail::xavier(d, d, rng);
  p.head_b2 = detail::filled({d}, 0.0);
  p.z_occ = detail::small_normal({d}, rng);
  return p;
}

/// Every parameter bound into one graph.
struct BoundModel
{
  struct Layer
  {
    ad::Var wq, wk, wv, attn_g, attn_b, ffn_w, ffn_b, ffn_g, ffn_b_ln;
  };
  ad::Var stem_w1, stem_b1, stem_w2, stem_b2, stem_g, stem_b;
  std::vector<Layer> layers;
  ad::Var rel, rel_u, rel_v;
  ad::Var head_w1, head_b1, head_w2, head_b2;
  ad::Var z_occ;

  BoundModel(ad::Graph& g, ModelParams& p)
  {
    stem_w1 = g.parameter(p.stem_w1);
    stem_b1 = g.parameter(p.stem_b1);
    stem_w2 = g.parameter(p.stem_w2);
    stem_b2 = g.parameter(p.stem_b2);
    stem_g = g.parameter(p.stem_ln_gain);
    stem_b = g.parameter(p.stem_ln_bias);
    for (auto& L : p.layers) {
      layers.push_back({g.parameter(L.wq), g.parameter(L.wk), g.parameter(L.wv),
                        g.parameter(L.attn_ln_gain), g.parameter(L.attn_ln_bias),
                        g.parameter(L.ffn_w), g.parameter(L.ffn_b), g.parameter(L.ffn_ln_gain),
                        g.parameter(L.ffn_ln_bias)});
    }
    rel = g.parameter(p.rel);
    rel_u = g.parameter(p.rel_u);
    rel_v = g.parameter(p.rel_v);
    head_w1 = g.parameter(p.head_w1);
    head_b1 = g.parameter(p.head_b1);
    head_w2 = g.parameter(p.head_w2);
    head_b2 = g.parameter(p.head_b2);
    z_occ = g.parameter(p.z_occ);
  }
};

/// Rows of (x1, y1, x2, y2).
inline ad::Tensor box_rows(std::span<const BoundingBox> boxes)
{
  std::vector<double> v;
  v.reserve(boxes.size() * 4);
  for (const auto& b : boxes) {
    v.insert(v.end(), {b.x1, b.y1, b.x2, b.y2});
  }
  return ad::Tensor({boxes.size(), 4}, std::move(v));
}

/// z0 = LayerNorm(FC_linear(ReLU(FC(box)))).
inline ad::Var embed_measurements(ad::Graph& g, const BoundModel& m, ad::Var boxes, double eps)
{
  auto h = ad::relu(g, ad::add_row(g, ad::matmul(g, boxes, m.stem_w1), m.stem_b1));
  auto z = ad::add_row(g, ad::matmul(g, h, m.stem_w2), m.stem_b2);
  return ad::layer_norm(g, z, m.stem_g, m.stem_b, eps);
}

/// Tanh projection head producing the association embedding.
inline ad::Var project_head(ad::Graph& g, const BoundModel& m, ad::Var z)
{
  auto h = ad::relu(g, ad::add_row(g, ad::matmul(g, z, m.head_w1), m.head_b1));
  return ad::tanh(g, ad::add_row(g, ad::matmul(g, h, m.head_w2), m.head_b2));
}

/// One encoding layer over a window whose rows carry frame indices.
/// A_ij = (Q_i + u)·K_j + (Q_i + v)·R[t_i − t_j], weights = softmax_j(A_ij / √d_k),
/// then Add-&-Norm around the attention and around a ReLU FC layer.
/// Only the rows listed in `queries` are updated and returned (all when empty).
inline ad::Var encoder_layer(ad::Graph& g, const BoundModel& m, std::size_t layer,
                             const ModelConfig& cfg, ad::Var z, std::span<const int> frames,
                             std::span<const std::size_t> queries = {})
{
  const auto& L = m.layers.at(layer);
  const std::size_t n = frames.size();
  std::vector<std::size_t> qrows(queries.begin(), queries.end());
  if (qrows.empty()) {
    qrows.resize(n);
    for (std::size_t i = 0; i < n; ++i) qrows[i] = i;
  }
  const std::size_t nq = qrows.size();
  const int M = static_cast<int>((g.value(m.rel).rows() - 1) / 2);
  std::vector<std::size_t> offset_index(nq * n);
  for (std::size_t i = 0; i < nq; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const int dt = frames[qrows[i]] - frames[j];
      if (dt < -M || dt > M) {
        throw std::invalid_argument("encoder_layer: frame offset " + std::to_string(dt) +
                                    " outside relative table");
      }
      offset_index[i * n + j] = static_cast<std::size_t>(dt + M);
    }
  }
  auto zq = nq == n && queries.empty() ? z : ad::select_rows(g, z, qrows);
  auto q = ad::matmul(g, zq, L.wq);
  auto k = ad::matmul(g, z, L.wk);
  auto v = ad::matmul(g, z, L.wv);
  auto content = ad::matmul_nt(g, ad::add_row(g, q, m.rel_u), k);
  auto position = ad::gather_cols(g, ad::matmul_nt(g, ad::add_row(g, q, m.rel_v), m.rel),
                                  std::move(offset_index), n);
  auto scores = ad::affine(g, ad::add(g, content, position), 1.0 / std::sqrt(static_cast<double>(cfg.d_k)));
  auto weights = ad::softmax_rows(g, scores);
  auto attended = ad::matmul(g, weights, v);
  auto z1 = ad::layer_norm(g, ad::add(g, attended, zq), L.attn_g, L.attn_b, cfg.ln_epsilon);
  auto f = ad::relu(g, ad::add_row(g, ad::matmul(g, z1, L.ffn_w), L.ffn_b));
  return ad::layer_norm(g, ad::add(g, f, z1), L.ffn_g, L.ffn_b_ln, cfg.ln_epsilon);
}

struct WindowEncoding
{
  std::vector<std::size_t> members;  // indices into the caller's rows that fell in the window
  std::vector<std::size_t> current;  // positions within members of the frame-t rows
  ad::Var z_n;                       // encoded frame-t rows
  ad::Var z_final;                   // head output for the frame-t rows
};

/// Encodes the detections of frame t using every row whose frame lies in
/// [t − L_enc, t + L_future]; rows outside the window are never read.
/// z0_rows holds one stem embedding per entry of `frames`. The last layer
/// is evaluated for the frame-t rows only, since no other row is consumed.
inline WindowEncoding encode_window(ad::Graph& g, const BoundModel& m, const ModelConfig& cfg,
                                    ad::Var z0_rows, std::span<const int> frames, int t)
{
  WindowEncoding out;
  std::vector<int> window_frames;
  for (std::size_t r = 0; r < frames.size(); ++r) {
    if (frames[r] >= t - cfg.L_enc && frames[r] <= t + cfg.L_future) {
      if (frames[r] == t) out.current.push_back(out.members.size());
      out.members.push_back(r);
      window_frames.push_back(frames[r]);
    }
  }
  if (out.current.empty()) {
    throw std::invalid_argument("encode_window: no detection at the query frame");
  }
  auto z = ad::select_rows(g, z0_rows, out.members);
  if (cfg.attention_encoding && !m.layers.empty()) {
    for (std::size_t l = 0; l + 1 < m.layers.size(); ++l) {
      z = encoder_layer(g, m, l, cfg, z, window_frames);
    }
    z = encoder_layer(g, m, m.layers.size() - 1, cfg, z, window_frames, out.current);
  } else {
    z = ad::select_rows(g, z, out.current);
  }
  out.z_n = z;
  out.z_final = project_head(g, m, z);
  return out;
}

/// p(d_i | T) ∝ exp(z_iᵀz_T) over candidates, plus a trailing p(occ | T) when
/// z_occ is given. No candidates and an occlusion state gives {1}.
inline std::vector<double> association_distribution(std::span<const double> z_track,
                                                    std::span<const std::vector<double>> candidates,
                                                    const std::vector<double>* z_occ)
{
  auto dot = [&](std::span<const double> a) {
    if (a.size() != z_track.size()) {
      throw std::invalid_argument("association_distribution: embedding length mismatch");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * z_track[i];
    return s;
  };
  std::vector<double> logits;
  logits.reserve(candidates.size() + 1);
  for (const auto& c : candidates) logits.push_back(dot(c));
  if (z_occ) logits.push_back(dot(*z_occ));
  if (logits.empty()) return {};
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (auto& l : logits) {
    l = std::exp(l - mx);
    z += l;
  }
  for (auto& l : logits) l /= z;
  return logits;
}

/// Tracks and candidates of one frame. targets[r] indexes a candidate row, or
/// equals the candidate count for the occlusion class.
struct AssociationProblem
{
  ad::Var tracks;      // m × d
  std::optional<ad::Var> candidates;  // n × d, absent when the frame is empty
  std::vector<std::size_t> targets;
};

/// Mean over all alive tracks of −log p(target | T).
inline ad::Var association_loss(ad::Graph& g, std::span<const AssociationProblem> problems,
                                std::optional<ad::Var> z_occ)
{
  std::vector<ad::Var> sums;
  std::size_t count = 0;
  for (const auto& p : problems) {
    if (p.targets.empty()) continue;
    std::vector<ad::Var> classes;
    std::size_t n = 0;
    if (p.candidates) {
      classes.push_back(*p.candidates);
      n = g.value(*p.candidates).rows();
    }
    if (z_occ) classes.push_back(*z_occ);
    if (classes.empty()) {
      throw std::out_of_range("association_loss: no class available for target");
    }
    const auto classes_n = n + (z_occ ? 1 : 0);
    for (auto t : p.targets) {
      if (t >= classes_n) {
        throw std::out_of_range("association_loss: target " + std::to_string(t) +
                                " out of range for " + std::to_string(classes_n) + " classes");
      }
    }
    auto all = classes.size() == 1 ? classes[0] : ad::concat_rows(g, classes);
    auto logits = ad::matmul_nt(g, p.tracks, all);
    sums.push_back(ad::cross_entropy_sum(g, logits, p.targets));
    count += p.targets.size();
  }
  if (count == 0) {
    return g.constant(ad::Tensor({1}, {0.0}));
  }
  auto total = sums.size() == 1 ? sums[0] : ad::sum(g, ad::concat_rows(g, sums));
  return ad::affine(g, total, 1.0 / static_cast<double>(count));
}

/// Per-detection embeddings of one frame, as consumed by the tracker.
struct EncodedDetection
{
  int detection_id = 0;
  std::vector<double> z0;
  std::vector<double> z_n;
  std::vector<double> z_final;
};

inline std::vector<double> row_of(const ad::Tensor& t, std::size_t r)
{
  const auto n = t.cols();
  return {t.values.begin() + static_cast<std::ptrdiff_t>(r * n),
          t.values.begin() + static_cast<std::ptrdiff_t>((r + 1) * n)};
}

/// Inference-time encoder over a whole sequence: computes stem embeddings once
/// and encodes frame t on demand.
class SequenceEncoder
{
public:
  SequenceEncoder(const ModelConfig& cfg, const ModelParams& params, const Sequence& seq)
    : cfg_(cfg), params_(params), seq_(seq)
  {
    std::vector<BoundingBox> boxes;
    for (const auto& f : seq.frames) {
      frame_start_.push_back(boxes.size());
      for (const auto& d : f) {
        boxes.push_back(d.box);
        frames_.push_back(d.frame);
      }
    }
    frame_start_.push_back(boxes.size());
    if (boxes.empty()) return;
    ad::Graph g;
    g.set_grad_enabled(false);
    BoundModel m(g, params_);
    auto z0 = embed_measurements(g, m, g.constant(box_rows(boxes)), cfg_.ln_epsilon);
    z0_ = g.value(z0);
  }

  std::vector<EncodedDetection> encode(int t)
  {
    std::vector<EncodedDetection> out;
    const auto& dets = seq_.frames.at(static_cast<std::size_t>(t));
    if (dets.empty()) return out;
    const int lo = std::max(0, t - cfg_.L_enc);
    const int hi = std::min(seq_.num_frames() - 1, t + cfg_.L_future);
    const auto begin = frame_start_[static_cast<std::size_t>(lo)];
    const auto end = frame_start_[static_cast<std::size_t>(hi) + 1];

    ad::Graph g;
    g.set_grad_enabled(false);
    BoundModel m(g, params_);
    std::vector<double> rows(z0_.values.begin() + static_cast<std::ptrdiff_t>(begin * z0_.cols()),
                             z0_.values.begin() + static_cast<std::ptrdiff_t>(end * z0_.cols()));
    auto z0 = g.constant(ad::Tensor({end - begin, z0_.cols()}, std::move(rows)));
    std::span<const int> frames(frames_.data() + begin, end - begin);
    auto enc = encode_window(g, m, cfg_, z0, frames, t);
    const auto& zn = g.value(enc.z_n);
    const auto& zf = g.value(enc.z_final);
    for (std::size_t k = 0; k < enc.current.size(); ++k) {
      EncodedDetection e;
      e.detection_id = dets[k].detection_id;
      e.z0 = row_of(z0_, begin + enc.members[enc.current[k]]);
      e.z_n = row_of(zn, k);
      e.z_final = row_of(zf, k);
      out.push_back(std::move(e));
    }
    return out;
  }

private:
  ModelConfig cfg_;
  ModelParams params_;
  const Sequence& seq_;
  std::vector<std::size_t> frame_start_;
  std::vector<int> frames_;
  ad::Tensor z0_;
};

}  // namespace softtrack
