// tracker.hpp: online tracking with the attention association distribution,
// the shared track lifecycle, and teacher-forced training targets.

#pragma once

#include "softtrack/model.hpp"
#include "softtrack/sequence.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

namespace softtrack {

struct TrackerConfig
{
  int T_lost_UP = 2;
  int T_lost_P = 5;
  int L_future = 0;

  void validate() const
  {
    if (!(T_lost_P >= T_lost_UP && T_lost_UP >= 1)) {
      throw std::invalid_argument("TrackerConfig: need T_lost_P >= T_lost_UP >= 1");
    }
    if (L_future < 0) throw std::invalid_argument("TrackerConfig: L_future must be >= 0");
  }

  /// SORT's lifecycle: promoted tracks die after one missed frame.
  static TrackerConfig sort_preset() { return {1, 1, 0}; }
};

inline nlohmann::json to_json(const TrackerConfig& c)
{
  return {{"T_lost_UP", c.T_lost_UP}, {"T_lost_P", c.T_lost_P}, {"L_future", c.L_future}};
}

inline TrackerConfig tracker_config_from_json(const nlohmann::json& j, TrackerConfig c = {})
{
  c.T_lost_UP = j.value("T_lost_UP", c.T_lost_UP);
  c.T_lost_P = j.value("T_lost_P", c.T_lost_P);
  c.L_future = j.value("L_future", c.L_future);
  c.validate();
  return c;
}

enum class TrackStatus
{
  Unpromoted,
  Promoted,
  Dead,
};

struct HistoryEntry
{
  int frame = 0;
  std::optional<int> detection_id;  // empty: no association this frame
  bool occluded = false;
};

struct Track
{
  int track_id = 0;
  TrackStatus status = TrackStatus::Unpromoted;
  std::vector<double> z_T;
  int last_associated_frame = 0;
  int miss_count = 0;
  int associations = 0;
  std::optional<int> identity;  // GT identity of the latest associated detection
  std::vector<HistoryEntry> history;
  std::vector<std::pair<int, BoundingBox>> observations;  // latest two (frame, box)
};

struct TrackedObject
{
  int track_id = 0;
  int detection_id = 0;
  BoundingBox box;

  bool operator==(const TrackedObject&) const = default;
};

/// Per frame, the promoted non-occluded tracks and their detections.
struct TrackerOutput
{
  std::vector<std::vector<TrackedObject>> frames;

  bool operator==(const TrackerOutput&) const = default;
};

/// One (track, frame) occlusion decision, for the occlusion report.
struct OcclusionDecision
{
  int frame = 0;
  int track_id = 0;
  std::optional<int> identity;
  bool predicted_occluded = false;

  bool operator==(const OcclusionDecision&) const = default;
};

/// Matches and occlusion marks for one frame; indices refer to TrackBook::tracks().
struct FrameDecision
{
  std::vector<std::pair<std::size_t, std::size_t>> matches;  // (track index, detection index)
  std::vector<std::size_t> occluded;
};

/// Track lifecycle shared by every tracker: spawning, promotion on the second
/// association, miss counting and death after T_lost consecutive misses.
class TrackBook
{
public:
  explicit TrackBook(TrackerConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  const std::vector<Track>& tracks() const { return tracks_; }
  const TrackerConfig& config() const { return cfg_; }

  std::vector<std::size_t> alive() const
  {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < tracks_.size(); ++i) {
      if (tracks_[i].status != TrackStatus::Dead) out.push_back(i);
    }
    return out;
  }

  /// Applies a frame decision. embeddings is empty or parallel to dets.
  std::vector<TrackedObject> commit(int frame, std::span<const Detection> dets,
                                    std::span<const std::vector<double>> embeddings,
                                    const FrameDecision& decision)
  {
    if (!embeddings.empty() && embeddings.size() != dets.size()) {
      throw std::invalid_argument("TrackBook::commit: embeddings not parallel to detections");
    }
    std::vector<std::optional<std::size_t>> match_of(tracks_.size());
    std::vector<bool> claimed(dets.size(), false);
    for (auto [ti, di] : decision.matches) {
      if (ti >= tracks_.size() || tracks_[ti].status == TrackStatus::Dead) {
        throw std::logic_error("TrackBook::commit: match refers to a dead or unknown track");
      }
      if (di >= dets.size() || claimed[di] || match_of[ti]) {
        throw std::logic_error("TrackBook::commit: assignment is not one-to-one");
      }
      claimed[di] = true;
      match_of[ti] = di;
    }
    std::vector<bool> occluded(tracks_.size(), false);
    for (auto ti : decision.occluded) occluded.at(ti) = true;

    std::vector<TrackedObject> out;
    for (std::size_t ti = 0; ti < tracks_.size(); ++ti) {
      auto& tr = tracks_[ti];
      if (tr.status == TrackStatus::Dead) continue;
      const bool occ = occluded[ti] && !match_of[ti];
      occlusion_log_.push_back({frame, tr.track_id, tr.identity, occ});
      if (match_of[ti]) {
        const auto& d = dets[*match_of[ti]];
        associate(tr, frame, d, embeddings.empty() ? nullptr : &embeddings[*match_of[ti]]);
        if (tr.status == TrackStatus::Promoted) {
          out.push_back({tr.track_id, d.detection_id, d.box});
        }
      } else {
        tr.miss_count = frame - tr.last_associated_frame;
        tr.history.push_back({frame, std::nullopt, occ});
        const int limit = tr.status == TrackStatus::Promoted ? cfg_.T_lost_P : cfg_.T_lost_UP;
        if (tr.miss_count >= limit) tr.status = TrackStatus::Dead;
      }
    }
    for (std::size_t di = 0; di < dets.size(); ++di) {
      if (claimed[di]) continue;
      Track tr;
      tr.track_id = next_id_++;
      associate(tr, frame, dets[di], embeddings.empty() ? nullptr : &embeddings[di]);
      tracks_.push_back(std::move(tr));
    }
    return out;
  }

  const std::vector<OcclusionDecision>& occlusion_log() const { return occlusion_log_; }

private:
  static void associate(Track& tr, int frame, const Detection& d, const std::vector<double>* emb)
  {
    tr.last_associated_frame = frame;
    tr.miss_count = 0;
    ++tr.associations;
    if (tr.status == TrackStatus::Unpromoted && tr.associations >= 2) {
      tr.status = TrackStatus::Promoted;
    }
    if (emb) tr.z_T = *emb;
    tr.identity = d.gt_identity;
    tr.history.push_back({frame, d.detection_id, false});
    tr.observations.emplace_back(frame, d.box);
    if (tr.observations.size() > 2) tr.observations.erase(tr.observations.begin());
  }

  TrackerConfig cfg_;
  std::vector<Track> tracks_;
  std::vector<OcclusionDecision> occlusion_log_;
  int next_id_ = 0;
};

struct GreedyResult
{
  FrameDecision decision;
  std::vector<double> claimed_probabilities;  // in claim order
};

/// Greedy conflict resolution. distributions[k] holds the candidate
/// probabilities of track_indices[k], followed by p(occ) when occlusion is on.
/// Pairs are claimed in descending probability (ties: lower track id, then
/// lower detection index); with occlusion on, only pairs beating p(occ)
/// qualify and tracks left over are marked occluded.
inline GreedyResult greedy_associate(std::span<const std::size_t> track_indices,
                                     std::span<const int> track_ids,
                                     std::span<const std::vector<double>> distributions,
                                     std::size_t num_candidates, bool occlusion)
{
  struct Pair
  {
    double p;
    int track_id;
    std::size_t k;
    std::size_t cand;
  };
  std::vector<Pair> pairs;
  for (std::size_t k = 0; k < track_indices.size(); ++k) {
    const auto& dist = distributions[k];
    if (dist.size() != num_candidates + (occlusion ? 1 : 0)) {
      throw std::invalid_argument("greedy_associate: distribution length mismatch");
    }
    const double p_occ = occlusion ? dist.back() : -1.0;
    for (std::size_t c = 0; c < num_candidates; ++c) {
      if (dist[c] > p_occ) pairs.push_back({dist[c], track_ids[k], k, c});
    }
  }
  std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
    return std::tie(b.p, a.track_id, a.cand) < std::tie(a.p, b.track_id, b.cand);
  });
  GreedyResult out;
  std::vector<bool> track_done(track_indices.size(), false);
  std::vector<bool> cand_taken(num_candidates, false);
  for (const auto& pr : pairs) {
    if (track_done[pr.k] || cand_taken[pr.cand]) continue;
    track_done[pr.k] = true;
    cand_taken[pr.cand] = true;
    out.decision.matches.emplace_back(track_indices[pr.k], pr.cand);
    out.claimed_probabilities.push_back(pr.p);
  }
  if (occlusion) {
    for (std::size_t k = 0; k < track_indices.size(); ++k) {
      if (!track_done[k]) out.decision.occluded.push_back(track_indices[k]);
    }
  }
  return out;
}

struct StepResult
{
  std::vector<TrackedObject> objects;
  GreedyResult association;
};

/// Online tracker driven by association distributions over encoded detections.
class SoftTracker
{
public:
  SoftTracker(TrackerConfig cfg, bool occlusion_state, std::vector<double> z_occ)
    : book_(cfg), occlusion_(occlusion_state), z_occ_(std::move(z_occ))
  {
  }

  StepResult step(int frame, std::span<const Detection> dets, std::span<const EncodedDetection> enc)
  {
    if (enc.size() != dets.size()) {
      throw std::invalid_argument("SoftTracker::step: encodings not parallel to detections");
    }
    std::vector<std::vector<double>> cands;
    cands.reserve(enc.size());
    for (const auto& e : enc) cands.push_back(e.z_final);

    const auto alive = book_.alive();
    std::vector<int> ids;
    std::vector<std::vector<double>> dists;
    for (auto ti : alive) {
      const auto& tr = book_.tracks()[ti];
      ids.push_back(tr.track_id);
      dists.push_back(association_distribution(tr.z_T, cands, occlusion_ ? &z_occ_ : nullptr));
    }
    StepResult out;
    out.association = greedy_associate(alive, ids, dists, cands.size(), occlusion_);
    out.objects = book_.commit(frame, dets, cands, out.association.decision);
    return out;
  }

  const TrackBook& book() const { return book_; }

private:
  TrackBook book_;
  bool occlusion_;
  std::vector<double> z_occ_;
};

struct RunResult
{
  TrackerOutput output;
  std::vector<OcclusionDecision> occlusion;
};

/// Tracks a whole sequence. Frame t is associated once frames up to
/// t + L_future have been encoded; output frame indices are unchanged.
inline RunResult run_sequence(const Sequence& seq, const ModelConfig& model_cfg,
                              const ModelParams& params, const TrackerConfig& tcfg)
{
  tcfg.validate();
  ModelConfig enc_cfg = model_cfg;
  enc_cfg.L_future = tcfg.L_future;
  const auto table_rows = params.rel.rows();
  if (static_cast<int>(table_rows) < 2 * enc_cfg.max_offset() + 1) {
    throw std::invalid_argument("run_sequence: relative table too small for L_enc + L_future");
  }
  SequenceEncoder encoder(enc_cfg, params, seq);
  SoftTracker tracker(tcfg, model_cfg.occlusion_state, params.z_occ.values);
  RunResult out;
  out.output.frames.resize(seq.frames.size());
  for (int t = 0; t < seq.num_frames(); ++t) {
    const auto& dets = seq.frames[static_cast<std::size_t>(t)];
    const auto enc = encoder.encode(t);
    out.output.frames[static_cast<std::size_t>(t)] = tracker.step(t, dets, enc).objects;
  }
  out.occlusion = tracker.book().occlusion_log();
  return out;
}

struct TargetPair
{
  int identity = 0;
  int source_frame = 0;        // frame of the latest detection of this identity
  std::size_t source_index = 0;  // index of that detection within its frame
  std::optional<std::size_t> target_index;  // detection index at this frame; empty → occlusion
};

struct FrameTargets
{
  int frame = 0;
  std::vector<TargetPair> pairs;
};

struct TrainingTargets
{
  int start = 0;
  int end = 0;  // exclusive
  std::vector<FrameTargets> frames;
  std::vector<std::string> warnings;
};

/// Teacher-forced targets over [start, start + length). A track exists for
/// every identity already detected inside the window and stays alive while
/// t − last_seen ≤ T_lost_P; its target is its own detection at t, else the
/// occlusion class.
inline TrainingTargets build_training_targets(const Sequence& seq, int start, int length, int T_lost_P)
{
  TrainingTargets out;
  if (start < 0 || length < 1) throw std::invalid_argument("build_training_targets: bad window");
  out.start = start;
  out.end = std::min(seq.num_frames(), start + length);
  if (out.end - out.start < length) {
    out.warnings.push_back("window of " + std::to_string(length) + " frames truncated to " +
                           std::to_string(std::max(0, out.end - out.start)));
  }
  std::map<int, std::pair<int, std::size_t>> last_seen;  // identity -> (frame, index)
  for (int t = out.start; t < out.end; ++t) {
    const auto& dets = seq.frames[static_cast<std::size_t>(t)];
    std::map<int, std::size_t> here;
    for (std::size_t i = 0; i < dets.size(); ++i) {
      if (dets[i].gt_identity) here[*dets[i].gt_identity] = i;
    }
    FrameTargets ft;
    ft.frame = t;
    for (const auto& [id, seen] : last_seen) {
      if (t - seen.first > T_lost_P) continue;
      TargetPair p;
      p.identity = id;
      p.source_frame = seen.first;
      p.source_index = seen.second;
      if (auto it = here.find(id); it != here.end()) p.target_index = it->second;
      ft.pairs.push_back(p);
    }
    out.frames.push_back(std::move(ft));
    for (const auto& [id, i] : here) last_seen[id] = {t, i};
  }
  return out;
}

// Line-delimited tracker output: a header, then one record per line, either
// {"type":"track","frame":t,"track_id":k,"detection_id":d,"box":[x1,y1,x2,y2]}
// or {"type":"occlusion","frame":t,"track_id":k,"identity":g|null,"occluded":b}.
inline std::string dump_run(const RunResult& run)
{
  std::ostringstream out;
  std::size_t n = 0;
  for (const auto& f : run.output.frames) n += f.size();
  out << nlohmann::json{{"format", "softtrack-tracks"},
                        {"version", 1},
                        {"num_frames", run.output.frames.size()},
                        {"num_records", n},
                        {"num_occlusion_records", run.occlusion.size()}}
           .dump()
      << '\n';
  for (std::size_t t = 0; t < run.output.frames.size(); ++t) {
    for (const auto& o : run.output.frames[t]) {
      out << nlohmann::json{{"type", "track"},
                            {"frame", t},
                            {"track_id", o.track_id},
                            {"detection_id", o.detection_id},
                            {"box", {o.box.x1, o.box.y1, o.box.x2, o.box.y2}}}
               .dump()
          << '\n';
    }
  }
  for (const auto& d : run.occlusion) {
    out << nlohmann::json{{"type", "occlusion"},
                          {"frame", d.frame},
                          {"track_id", d.track_id},
                          {"identity", d.identity ? nlohmann::json(*d.identity) : nlohmann::json(nullptr)},
                          {"occluded", d.predicted_occluded}}
             .dump()
        << '\n';
  }
  return out.str();
}

inline RunResult parse_run(std::istream& in)
{
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& msg) {
    return FormatError("line " + std::to_string(line_no) + ": " + msg);
  };
  if (!std::getline(in, line)) throw FormatError("line 1: missing header record");
  ++line_no;
  RunResult run;
  std::size_t records = 0, occ_records = 0;
  try {
    auto h = nlohmann::json::parse(line);
    if (h.value("format", "") != "softtrack-tracks") throw fail("not a softtrack tracks file");
    if (h.value("version", -1) != 1) throw fail("unsupported tracks format version");
    run.output.frames.resize(h.at("num_frames").get<std::size_t>());
    records = h.at("num_records").get<std::size_t>();
    occ_records = h.at("num_occlusion_records").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw fail(e.what());
  }
  std::size_t seen = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      auto r = nlohmann::json::parse(line);
      const auto type = r.at("type").get<std::string>();
      const int t = r.at("frame").get<int>();
      if (type == "track") {
        if (t < 0 || static_cast<std::size_t>(t) >= run.output.frames.size()) throw fail("frame out of range");
        const auto& b = r.at("box");
        run.output.frames[static_cast<std::size_t>(t)].push_back(
          {r.at("track_id").get<int>(), r.at("detection_id").get<int>(),
           {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()}});
        ++seen;
      } else if (type == "occlusion") {
        OcclusionDecision d;
        d.frame = t;
        d.track_id = r.at("track_id").get<int>();
        if (!r.at("identity").is_null()) d.identity = r.at("identity").get<int>();
        d.predicted_occluded = r.at("occluded").get<bool>();
        run.occlusion.push_back(d);
      } else {
        throw fail("unknown record type '" + type + "'");
      }
    } catch (const nlohmann::json::exception& e) {
      throw fail(e.what());
    }
  }
  if (seen != records || run.occlusion.size() != occ_records) {
    throw FormatError("record count disagrees with header (truncated file?)");
  }
  return run;
}

}  // namespace softtrack
