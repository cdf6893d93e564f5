// metrics.hpp: CLEAR MOT counts (MOTA, FP, FN, IDS), identity metrics
// (IDF1, IDR, IDP) and occlusion classification scores.

#pragma once

#include "softtrack/assignment.hpp"
#include "softtrack/sequence.hpp"
#include "softtrack/tracker.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace softtrack {

struct Matching
{
  enum class Mode
  {
    Identity,
    Distance,
  };
  Mode mode = Mode::Identity;
  double threshold = 0.1;  // center distance, distance mode only

  static Matching identity() { return {}; }
  static Matching distance(double thr = 0.1) { return {Mode::Distance, thr}; }
};

/// Raw counts; ratios are derived so reports merge by summation.
struct MotReport
{
  std::int64_t gt_count = 0;
  std::int64_t hyp_count = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
  std::int64_t ids = 0;
  std::int64_t idtp = 0;
  std::int64_t idfp = 0;
  std::int64_t idfn = 0;

  double mota() const
  {
    return 1.0 - static_cast<double>(fn + fp + ids) / static_cast<double>(std::max<std::int64_t>(gt_count, 1));
  }
  double idr() const { return ratio(idtp, idtp + idfn); }
  double idp() const { return ratio(idtp, idtp + idfp); }
  double idf1() const { return ratio(2 * idtp, 2 * idtp + idfp + idfn); }

  MotReport& operator+=(const MotReport& o)
  {
    gt_count += o.gt_count;
    hyp_count += o.hyp_count;
    fp += o.fp;
    fn += o.fn;
    ids += o.ids;
    idtp += o.idtp;
    idfp += o.idfp;
    idfn += o.idfn;
    return *this;
  }

  bool operator==(const MotReport&) const = default;

private:
  static double ratio(std::int64_t num, std::int64_t den)
  {
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
  }
};

inline nlohmann::json to_json(const MotReport& r)
{
  return {{"mota", r.mota()}, {"idf1", r.idf1()}, {"idr", r.idr()},    {"idp", r.idp()},
          {"ids", r.ids},     {"fp", r.fp},       {"fn", r.fn},        {"gt_count", r.gt_count},
          {"hyp_count", r.hyp_count}, {"idtp", r.idtp}, {"idfp", r.idfp}, {"idfn", r.idfn}};
}

inline MotReport mot_report_from_json(const nlohmann::json& j)
{
  MotReport r;
  r.gt_count = j.at("gt_count").get<std::int64_t>();
  r.hyp_count = j.at("hyp_count").get<std::int64_t>();
  r.fp = j.at("fp").get<std::int64_t>();
  r.fn = j.at("fn").get<std::int64_t>();
  r.ids = j.at("ids").get<std::int64_t>();
  r.idtp = j.at("idtp").get<std::int64_t>();
  r.idfp = j.at("idfp").get<std::int64_t>();
  r.idfn = j.at("idfn").get<std::int64_t>();
  return r;
}

namespace detail {

inline double center_distance(const BoundingBox& a, const BoundingBox& b)
{
  return std::hypot(a.cx() - b.cx(), a.cy() - b.cy());
}

}  // namespace detail

/// CLEAR MOT and identity metrics of one sequence.
inline MotReport evaluate(const Sequence& gt, const TrackerOutput& hyp, Matching matching = {})
{
  if (static_cast<int>(hyp.frames.size()) > gt.num_frames()) {
    throw std::invalid_argument("evaluate: hypothesis covers frames beyond the sequence");
  }
  MotReport r;
  std::map<int, int> last_match;                  // gt identity -> hyp track id
  std::map<std::pair<int, int>, std::int64_t> co;  // (gt, hyp) -> frames in correspondence
  std::map<int, std::int64_t> gt_len, hyp_len;

  for (int t = 0; t < gt.num_frames(); ++t) {
    const auto gts = gt.gt_at(t);
    std::vector<TrackedObject> hs;
    if (static_cast<std::size_t>(t) < hyp.frames.size()) hs = hyp.frames[static_cast<std::size_t>(t)];
    std::sort(hs.begin(), hs.end(),
              [](const TrackedObject& a, const TrackedObject& b) { return a.track_id < b.track_id; });
    for (std::size_t k = 1; k < hs.size(); ++k) {
      if (hs[k].track_id == hs[k - 1].track_id) {
        throw std::invalid_argument("evaluate: duplicate hypothesis id " +
                                    std::to_string(hs[k].track_id) + " in frame " + std::to_string(t));
      }
    }
    {
      std::set<int> dets;
      for (const auto& h : hs) {
        if (!dets.insert(h.detection_id).second) {
          throw std::invalid_argument("evaluate: detection " + std::to_string(h.detection_id) +
                                      " assigned twice in frame " + std::to_string(t));
        }
      }
    }
    r.gt_count += static_cast<std::int64_t>(gts.size());
    r.hyp_count += static_cast<std::int64_t>(hs.size());
    for (const auto& [g, b] : gts) ++gt_len[g];
    for (const auto& h : hs) ++hyp_len[h.track_id];

    std::vector<std::pair<std::size_t, std::size_t>> matches;  // (gt index, hyp index)
    if (matching.mode == Matching::Mode::Identity) {
      std::map<int, int> det_identity;
      for (const auto& d : gt.frames[static_cast<std::size_t>(t)]) {
        if (d.gt_identity) det_identity[d.detection_id] = *d.gt_identity;
      }
      std::vector<bool> gt_taken(gts.size(), false);
      for (std::size_t hi = 0; hi < hs.size(); ++hi) {
        auto it = det_identity.find(hs[hi].detection_id);
        if (it == det_identity.end()) continue;
        for (std::size_t gi = 0; gi < gts.size(); ++gi) {
          if (gts[gi].first == it->second && !gt_taken[gi]) {
            gt_taken[gi] = true;
            matches.emplace_back(gi, hi);
            ++co[{gts[gi].first, hs[hi].track_id}];
            break;
          }
        }
      }
    } else {
      const double thr = matching.threshold;
      for (std::size_t gi = 0; gi < gts.size(); ++gi) {
        for (const auto& h : hs) {
          if (detail::center_distance(gts[gi].second, h.box) <= thr) ++co[{gts[gi].first, h.track_id}];
        }
      }
      // Keep previous correspondences that are still valid.
      std::vector<bool> gt_taken(gts.size(), false), hyp_taken(hs.size(), false);
      for (std::size_t gi = 0; gi < gts.size(); ++gi) {
        auto it = last_match.find(gts[gi].first);
        if (it == last_match.end()) continue;
        for (std::size_t hi = 0; hi < hs.size(); ++hi) {
          if (!hyp_taken[hi] && hs[hi].track_id == it->second &&
              detail::center_distance(gts[gi].second, hs[hi].box) <= thr) {
            gt_taken[gi] = hyp_taken[hi] = true;
            matches.emplace_back(gi, hi);
            break;
          }
        }
      }
      std::vector<std::size_t> gfree, hfree;
      for (std::size_t gi = 0; gi < gts.size(); ++gi) if (!gt_taken[gi]) gfree.push_back(gi);
      for (std::size_t hi = 0; hi < hs.size(); ++hi) if (!hyp_taken[hi]) hfree.push_back(hi);
      CostMatrix cm(gfree.size(), hfree.size(), kForbiddenCost);
      for (std::size_t a = 0; a < gfree.size(); ++a) {
        for (std::size_t b = 0; b < hfree.size(); ++b) {
          const double d = detail::center_distance(gts[gfree[a]].second, hs[hfree[b]].box);
          if (d <= thr) cm.at(a, b) = d;
        }
      }
      for (auto [a, b] : solve_min_cost_assignment(cm)) matches.emplace_back(gfree[a], hfree[b]);
    }

    r.fp += static_cast<std::int64_t>(hs.size() - matches.size());
    r.fn += static_cast<std::int64_t>(gts.size() - matches.size());
    for (auto [gi, hi] : matches) {
      const int g = gts[gi].first;
      const int h = hs[hi].track_id;
      auto it = last_match.find(g);
      if (it != last_match.end() && it->second != h) ++r.ids;
      last_match[g] = h;
    }
  }

  // Global one-to-one identity correspondence maximizing co-occurrence.
  std::vector<int> gids, hids;
  for (const auto& [g, n] : gt_len) gids.push_back(g);
  for (const auto& [h, n] : hyp_len) hids.push_back(h);
  CostMatrix cm(gids.size(), hids.size(), 0.0);
  for (std::size_t a = 0; a < gids.size(); ++a) {
    for (std::size_t b = 0; b < hids.size(); ++b) {
      auto it = co.find({gids[a], hids[b]});
      if (it != co.end()) cm.at(a, b) = -static_cast<double>(it->second);
    }
  }
  for (auto [a, b] : solve_min_cost_assignment(cm)) {
    r.idtp += static_cast<std::int64_t>(-cm.at(a, b));
  }
  r.idfn = r.gt_count - r.idtp;
  r.idfp = r.hyp_count - r.idtp;
  return r;
}

struct OcclusionReport
{
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
  std::int64_t tn = 0;

  std::int64_t total() const { return tp + fp + fn + tn; }
  // Empty denominators report 1.
  double accuracy() const { return total() == 0 ? 1.0 : static_cast<double>(tp + tn) / static_cast<double>(total()); }
  double recall() const { return tp + fn == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fn); }
  double precision() const { return tp + fp == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp); }

  OcclusionReport& operator+=(const OcclusionReport& o)
  {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
};

inline nlohmann::json to_json(const OcclusionReport& r)
{
  return {{"accuracy", r.accuracy()}, {"recall", r.recall()}, {"precision", r.precision()},
          {"tp", r.tp}, {"fp", r.fp}, {"fn", r.fn}, {"tn", r.tn}};
}

/// Binary occlusion scores. A decision is GT-positive when the track's
/// identity exists at that frame but has no detection.
inline OcclusionReport occlusion_report(const Sequence& gt, std::span<const OcclusionDecision> decisions)
{
  OcclusionReport r;
  for (const auto& d : decisions) {
    bool actual = false;
    if (d.identity && d.frame >= 0 && d.frame < gt.num_frames()) {
      bool exists = false;
      if (auto it = gt.gt_tracks.find(*d.identity); it != gt.gt_tracks.end()) {
        exists = std::any_of(it->second.begin(), it->second.end(),
                             [&](const GtState& s) { return s.frame == d.frame; });
      }
      const auto& dets = gt.frames[static_cast<std::size_t>(d.frame)];
      const bool detected = std::any_of(dets.begin(), dets.end(), [&](const Detection& x) {
        return x.gt_identity && *x.gt_identity == *d.identity;
      });
      actual = exists && !detected;
    }
    if (actual && d.predicted_occluded) ++r.tp;
    else if (!actual && d.predicted_occluded) ++r.fp;
    else if (actual) ++r.fn;
    else ++r.tn;
  }
  return r;
}

/// Fixed-width table: first column left aligned, the rest right aligned.
inline std::string format_table(const std::vector<std::string>& header,
                                const std::vector<std::vector<std::string>>& rows)
{
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size() && c < width.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream out;
  auto emit = [&](const std::vector<std::string>& row) {
    for (std::size_t c = 0; c < width.size(); ++c) {
      const std::string cell = c < row.size() ? row[c] : "";
      if (c == 0) {
        out << std::left << std::setw(static_cast<int>(width[c])) << cell;
      } else {
        out << "  " << std::right << std::setw(static_cast<int>(width[c])) << cell;
      }
    }
    out << '\n';
  };
  emit(header);
  std::size_t total = 0;
  for (auto w : width) total += w + 2;
  out << std::string(total - 2, '-') << '\n';
  for (const auto& row : rows) emit(row);
  return out.str();
}

inline std::string fixed(double v, int digits = 2)
{
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

}  // namespace softtrack
