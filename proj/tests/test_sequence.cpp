#include "softtrack/sequence.hpp"
#include "softtrack/sim.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace softtrack;

namespace {

Sequence round_trip(const Sequence& s)
{
  std::istringstream in(dump_sequence(s));
  return parse_sequence(in);
}

std::string parse_error(const std::string& text)
{
  std::istringstream in(text);
  try {
    parse_sequence(in);
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

Sequence sample(std::uint64_t seed)
{
  sim::SimConfig c;
  c.flavor = sim::Flavor::Occlusion;
  c.num_frames = 40;
  c.seed = seed;
  return sim::generate_sequence(c);
}

}  // namespace

TEST(SequenceFile, EmptySequenceRoundTrips)
{
  Sequence s;
  EXPECT_EQ(round_trip(s), s);
}

TEST(SequenceFile, GeneratedSequencesRoundTripExactly)
{
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto s = sample(seed);
    EXPECT_EQ(round_trip(s), s);
  }
}

TEST(SequenceFile, ExtremeRealsSurvive)
{
  Sequence s;
  s.frames.resize(1);
  Detection d;
  d.box = {0.1 + 1e-17, 5e-324, 1.0 / 3.0, 1.7976931348623157e308};
  d.detection_id = 3;
  s.frames[0].push_back(d);
  EXPECT_EQ(round_trip(s), s);
}

TEST(SequenceFile, SaveLoadThroughDisk)
{
  const auto dir = std::filesystem::temp_directory_path() / "softtrack_seq_test";
  std::filesystem::create_directories(dir);
  const auto s = sample(9);
  save_sequence(s, dir / "s.jsonl");
  EXPECT_EQ(load_sequence(dir / "s.jsonl"), s);
  std::filesystem::remove_all(dir);
}

TEST(SequenceFile, TruncatedRecordNamesTheRecord)
{
  const auto text = dump_sequence(sample(1));
  std::vector<std::string> lines;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  // Keep the header and three frame records, and cut the fourth in half.
  std::string cut = lines[0] + "\n" + lines[1] + "\n" + lines[2] + "\n" + lines[3] + "\n" +
                    lines[4].substr(0, lines[4].size() / 2) + "\n";
  const auto msg = parse_error(cut);
  EXPECT_NE(msg.find("line 5"), std::string::npos) << msg;
}

TEST(SequenceFile, MissingRecordsAreDetected)
{
  const auto text = dump_sequence(sample(2));
  const auto cut = text.substr(0, text.rfind('\n', text.size() - 2) + 1);  // drop the last record
  EXPECT_FALSE(parse_error(cut).empty());
}

TEST(SequenceFile, DeclaredCountsMustMatch)
{
  auto s = sample(3);
  auto text = dump_sequence(s);
  const auto key = "\"num_detections\":" + std::to_string(s.num_detections());
  const auto pos = text.find(key);
  ASSERT_NE(pos, std::string::npos);
  text.replace(pos, key.size(), "\"num_detections\":" + std::to_string(s.num_detections() + 1));
  EXPECT_NE(parse_error(text).find("declares"), std::string::npos);
}

TEST(SequenceFile, VersionMismatchIsExplicit)
{
  auto text = dump_sequence(Sequence{});
  const auto pos = text.find("\"version\":1");
  ASSERT_NE(pos, std::string::npos);
  text.replace(pos, 11, "\"version\":9");
  EXPECT_NE(parse_error(text).find("version"), std::string::npos);
}

TEST(SequenceFile, RejectsForeignFiles)
{
  EXPECT_FALSE(parse_error("{\"format\":\"something-else\",\"version\":1}\n").empty());
  EXPECT_FALSE(parse_error("").empty());
  EXPECT_FALSE(parse_error("not json\n").empty());
}

TEST(Normalize, FullFrameMapsToUnitBox)
{
  const auto out = normalize_boxes({{0, 0, 1920, 1080}}, 1920, 1080);
  EXPECT_EQ(out[0], (BoundingBox{0, 0, 1, 1}));
}

TEST(Normalize, DegenerateCentreBoxPreserved)
{
  const auto out = normalize_boxes({{960, 540, 960, 540}}, 1920, 1080);
  EXPECT_EQ(out[0], (BoundingBox{0.5, 0.5, 0.5, 0.5}));
}

TEST(Normalize, InverseLaw)
{
  Rng rng(4);
  std::vector<BoundingBox> raw;
  for (int i = 0; i < 50; ++i) {
    const double x = rng.uniform(0, 1000), y = rng.uniform(0, 700);
    raw.push_back({x, y, x + rng.uniform(0, 100), y + rng.uniform(0, 100)});
  }
  const auto back = denormalize_boxes(normalize_boxes(raw, 1241, 376), 1241, 376);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    EXPECT_NEAR(back[i].x1, raw[i].x1, 1e-12 * 1241);
    EXPECT_NEAR(back[i].y2, raw[i].y2, 1e-12 * 376);
  }
}

TEST(Normalize, RejectsNonPositiveDimensions)
{
  EXPECT_THROW(normalize_boxes({}, 0, 10), std::invalid_argument);
  EXPECT_THROW(normalize_boxes({}, 10, -1), std::invalid_argument);
}

TEST(Iou, HandCases)
{
  const BoundingBox unit{0, 0, 1, 1};
  EXPECT_EQ(iou(unit, unit), 1.0);
  EXPECT_EQ(iou(unit, {2, 2, 3, 3}), 0.0);
  EXPECT_DOUBLE_EQ(iou(unit, {0.5, 0, 1, 1}), 0.5);
  EXPECT_EQ(iou({0.5, 0.5, 0.5, 0.5}, {0.5, 0.5, 0.5, 0.5}), 0.0);
}

TEST(Iou, Symmetric)
{
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const auto a = BoundingBox::from_center(rng.uniform(), rng.uniform(), rng.uniform(0.01, 0.2), rng.uniform(0.01, 0.2));
    const auto b = BoundingBox::from_center(rng.uniform(), rng.uniform(), rng.uniform(0.01, 0.2), rng.uniform(0.01, 0.2));
    EXPECT_EQ(iou(a, b), iou(b, a));
    EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  }
}

TEST(SequenceFile, DocumentedExampleLoads)
{
  const auto s = load_sequence(std::filesystem::path(SOFTTRACK_DOCS_DIR) / "example_sequence.jsonl");
  ASSERT_EQ(s.num_frames(), 3);
  EXPECT_EQ(s.frames[1].size(), 1u);  // identity 1 is hidden at frame 1
  EXPECT_EQ(s.gt_at(1).size(), 2u);
  EXPECT_EQ(*s.frames[2][1].gt_identity, 1);
  EXPECT_EQ(s.frames[2][1].detection_id, 4);
}
