// sequence.hpp: boxes, detections, sequences and the on-disk sequence format.
//
// File layout (line-delimited JSON, one record per line):
//   line 1   header  {"format":"softtrack-sequence","version":1,"num_frames":F,
//                     "num_identities":K,"num_detections":D,"meta":{...}}
//   line 2.. frame   {"frame":t,"gt":[[id,x1,y1,x2,y2],...],
//                     "det":[[detection_id,gt_identity|null,x1,y1,x2,y2],...]}
// Reals are written in shortest round-trip form, so load(save(s)) == s exactly.

#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace softtrack {

inline constexpr int kSequenceFormatVersion = 1;

struct BoundingBox
{
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  static BoundingBox from_center(double cx, double cy, double half_w, double half_h)
  {
    return {cx - half_w, cy - half_h, cx + half_w, cy + half_h};
  }

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }

  bool operator==(const BoundingBox&) const = default;
};

struct Detection
{
  int frame = 0;
  BoundingBox box;
  std::optional<int> gt_identity;
  int detection_id = 0;

  bool operator==(const Detection&) const = default;
};

struct GtState
{
  int frame = 0;
  BoundingBox box;

  bool operator==(const GtState&) const = default;
};

struct SequenceMeta
{
  std::string flavor;
  std::uint64_t seed = 0;
  nlohmann::json config = nlohmann::json::object();  // generator settings echo

  bool operator==(const SequenceMeta&) const = default;
};

struct Sequence
{
  SequenceMeta meta;
  std::map<int, std::vector<GtState>> gt_tracks;  // identity -> states sorted by frame
  std::vector<std::vector<Detection>> frames;     // frames[t] = detections at frame t

  int num_frames() const { return static_cast<int>(frames.size()); }

  std::size_t num_detections() const
  {
    std::size_t n = 0;
    for (const auto& f : frames) {
      n += f.size();
    }
    return n;
  }

  /// GT states present at frame t as (identity, box).
  std::vector<std::pair<int, BoundingBox>> gt_at(int t) const
  {
    std::vector<std::pair<int, BoundingBox>> out;
    for (const auto& [id, states] : gt_tracks) {
      auto it = std::lower_bound(states.begin(), states.end(), t,
                                 [](const GtState& s, int f) { return s.frame < f; });
      if (it != states.end() && it->frame == t) {
        out.emplace_back(id, it->box);
      }
    }
    return out;
  }

  bool operator==(const Sequence&) const = default;
};

/// Intersection over union; 0 when the union has zero area.
inline double iou(const BoundingBox& a, const BoundingBox& b)
{
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  const double inter = (iw > 0.0 && ih > 0.0) ? iw * ih : 0.0;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

class FormatError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline double finite_or_throw(const nlohmann::json& v, const std::string& where)
{
  if (!v.is_number()) {
    throw FormatError(where + ": expected a number");
  }
  const double x = v.get<double>();
  if (!std::isfinite(x)) {
    throw FormatError(where + ": non-finite coordinate");
  }
  return x;
}

inline BoundingBox box_from(const nlohmann::json& arr, std::size_t offset, const std::string& where)
{
  return {finite_or_throw(arr.at(offset), where), finite_or_throw(arr.at(offset + 1), where),
          finite_or_throw(arr.at(offset + 2), where), finite_or_throw(arr.at(offset + 3), where)};
}

}  // namespace detail

/// Serializes a sequence to a string in the line-delimited format.
inline std::string dump_sequence(const Sequence& seq)
{
  std::ostringstream out;
  nlohmann::json header = {
    {"format", "softtrack-sequence"},
    {"version", kSequenceFormatVersion},
    {"num_frames", seq.num_frames()},
    {"num_identities", seq.gt_tracks.size()},
    {"num_detections", seq.num_detections()},
    {"meta", {{"flavor", seq.meta.flavor}, {"seed", seq.meta.seed}, {"config", seq.meta.config}}},
  };
  out << header.dump() << '\n';

  // Index GT states by frame.
  std::vector<std::vector<std::pair<int, BoundingBox>>> gt_by_frame(seq.frames.size());
  for (const auto& [id, states] : seq.gt_tracks) {
    for (const auto& s : states) {
      if (s.frame < 0 || s.frame >= seq.num_frames()) {
        throw FormatError("dump_sequence: GT state of identity " + std::to_string(id) +
                          " outside frame range");
      }
      gt_by_frame[static_cast<std::size_t>(s.frame)].emplace_back(id, s.box);
    }
  }
  for (int t = 0; t < seq.num_frames(); ++t) {
    nlohmann::json gt = nlohmann::json::array();
    for (const auto& [id, b] : gt_by_frame[static_cast<std::size_t>(t)]) {
      gt.push_back({id, b.x1, b.y1, b.x2, b.y2});
    }
    nlohmann::json det = nlohmann::json::array();
    for (const auto& d : seq.frames[static_cast<std::size_t>(t)]) {
      nlohmann::json id = d.gt_identity ? nlohmann::json(*d.gt_identity) : nlohmann::json(nullptr);
      det.push_back({d.detection_id, id, d.box.x1, d.box.y1, d.box.x2, d.box.y2});
    }
    nlohmann::json rec = {{"frame", t}, {"gt", std::move(gt)}, {"det", std::move(det)}};
    out << rec.dump() << '\n';
  }
  return out.str();
}

/// Parses the line-delimited format; errors name the offending line.
inline Sequence parse_sequence(std::istream& in)
{
  std::string line;
  std::size_t line_no = 0;
  auto parse_line = [&](const std::string& what) {
    try {
      return nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("line " + std::to_string(line_no) + " (" + what +
                        "): malformed record: " + e.what());
    }
  };

  if (!std::getline(in, line)) {
    throw FormatError("line 1 (header): missing header record");
  }
  ++line_no;
  const auto header = parse_line("header");
  if (header.value("format", "") != "softtrack-sequence") {
    throw FormatError("line 1 (header): not a softtrack sequence file");
  }
  const int version = header.value("version", -1);
  if (version != kSequenceFormatVersion) {
    throw FormatError("line 1 (header): unsupported format version " + std::to_string(version) +
                      " (expected " + std::to_string(kSequenceFormatVersion) + ")");
  }

  Sequence seq;
  std::size_t num_frames = 0, num_identities = 0, num_detections = 0;
  try {
    num_frames = header.at("num_frames").get<std::size_t>();
    num_identities = header.at("num_identities").get<std::size_t>();
    num_detections = header.at("num_detections").get<std::size_t>();
    const auto& meta = header.at("meta");
    seq.meta.flavor = meta.at("flavor").get<std::string>();
    seq.meta.seed = meta.at("seed").get<std::uint64_t>();
    seq.meta.config = meta.at("config");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("line 1 (header): ") + e.what());
  }

  seq.frames.resize(num_frames);
  std::size_t records = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) {
      continue;
    }
    const std::string where = "line " + std::to_string(line_no) + " (frame record " +
                              std::to_string(records) + ")";
    if (records >= num_frames) {
      throw FormatError(where + ": more frame records than declared");
    }
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(where + ": malformed record: " + e.what());
    }
    try {
      const int t = rec.at("frame").get<int>();
      if (t != static_cast<int>(records)) {
        throw FormatError(where + ": frame index " + std::to_string(t) + " out of order");
      }
      for (const auto& g : rec.at("gt")) {
        if (!g.is_array() || g.size() != 5) {
          throw FormatError(where + ": GT entry must have 5 fields");
        }
        seq.gt_tracks[g.at(0).get<int>()].push_back({t, detail::box_from(g, 1, where)});
      }
      auto& dets = seq.frames[records];
      for (const auto& d : rec.at("det")) {
        if (!d.is_array() || d.size() != 6) {
          throw FormatError(where + ": detection entry must have 6 fields");
        }
        Detection det;
        det.frame = t;
        det.detection_id = d.at(0).get<int>();
        if (!d.at(1).is_null()) {
          det.gt_identity = d.at(1).get<int>();
        }
        det.box = detail::box_from(d, 2, where);
        dets.push_back(det);
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(where + ": " + e.what());
    }
    ++records;
  }
  if (records != num_frames) {
    throw FormatError("line " + std::to_string(line_no + 1) + " (frame record " +
                      std::to_string(records) + "): truncated file, header declares " +
                      std::to_string(num_frames) + " frames");
  }
  if (seq.gt_tracks.size() != num_identities) {
    throw FormatError("header declares " + std::to_string(num_identities) +
                      " identities but records contain " + std::to_string(seq.gt_tracks.size()));
  }
  if (seq.num_detections() != num_detections) {
    throw FormatError("header declares " + std::to_string(num_detections) +
                      " detections but records contain " + std::to_string(seq.num_detections()));
  }
  for (const auto& f : seq.frames) {
    for (const auto& d : f) {
      if (d.gt_identity && !seq.gt_tracks.contains(*d.gt_identity)) {
        throw FormatError("detection " + std::to_string(d.detection_id) +
                          " references unknown identity " + std::to_string(*d.gt_identity));
      }
    }
  }
  return seq;
}

/// Writes through a temporary file and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& contents)
{
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    }
    out << contents;
    if (!out) {
      throw std::runtime_error("write failed: " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

inline void save_sequence(const Sequence& seq, const std::filesystem::path& path)
{
  write_file_atomic(path, dump_sequence(seq));
}

inline Sequence load_sequence(const std::filesystem::path& path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot open " + path.string());
  }
  try {
    return parse_sequence(in);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

/// Divides pixel coordinates by the image size.
inline std::vector<BoundingBox> normalize_boxes(const std::vector<BoundingBox>& raw, double width,
                                                double height)
{
  if (!(width > 0.0) || !(height > 0.0)) {
    throw std::invalid_argument("normalize_boxes: image dimensions must be positive");
  }
  std::vector<BoundingBox> out;
  out.reserve(raw.size());
  for (const auto& b : raw) {
    out.push_back({b.x1 / width, b.y1 / height, b.x2 / width, b.y2 / height});
  }
  return out;
}

inline std::vector<BoundingBox> denormalize_boxes(const std::vector<BoundingBox>& boxes,
                                                  double width, double height)
{
  if (!(width > 0.0) || !(height > 0.0)) {
    throw std::invalid_argument("denormalize_boxes: image dimensions must be positive");
  }
  std::vector<BoundingBox> out;
  out.reserve(boxes.size());
  for (const auto& b : boxes) {
    out.push_back({b.x1 * width, b.y1 * height, b.x2 * width, b.y2 * height});
  }
  return out;
}

}  // namespace softtrack
