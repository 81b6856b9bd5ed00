#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "fleetlens/ingestion.hpp"
#include "support.hpp"

namespace fleetlens {
namespace {

using testing::TempDir;
using testing::ts;

const std::string kHeader = std::string(kManifestHeader) + "\n";

std::vector<ImageRecord> parse(const std::string& body,
                               const std::filesystem::path& base = {}) {
  std::istringstream in(kHeader + body);
  return parse_manifest(in, base);
}

void write(const std::filesystem::path& p, const std::string& text) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream(p) << text;
}

TEST(ManifestTest, ParsesRowsAndSortsByRecordId) {
  auto rs = parse(
      "r2,ab 123,img/r2.jpg,lbl/r2.txt,2024-05-01T10:00:00Z,-27.5,153.0\n"
      "r1,XYZ9,/abs/r1.jpg,,2024-05-01T09:00:00+10:00,,\n",
      "/data");
  ASSERT_EQ(rs.size(), 2u);
  EXPECT_EQ(rs[0].record_id, "r1");
  EXPECT_EQ(rs[0].image_ref, "/abs/r1.jpg");
  EXPECT_FALSE(rs[0].label_path);
  EXPECT_FALSE(rs[0].location);
  EXPECT_EQ(rs[0].captured_at, ts("2024-04-30T23:00:00Z"));

  EXPECT_EQ(rs[1].plate_id.value(), "AB123");
  EXPECT_EQ(rs[1].image_ref, "/data/img/r2.jpg");
  EXPECT_EQ(*rs[1].label_path, "/data/lbl/r2.txt");
  ASSERT_TRUE(rs[1].location);
  EXPECT_DOUBLE_EQ(rs[1].location->lat, -27.5);
}

TEST(ManifestTest, QuotedFieldsMayContainCommas) {
  auto rs = parse("\"r,1\",P1,\"a,b.jpg\",,2024-05-01T10:00:00Z,,\n");
  ASSERT_EQ(rs.size(), 1u);
  EXPECT_EQ(rs[0].record_id, "r,1");
  EXPECT_EQ(rs[0].image_ref, "a,b.jpg");
}

TEST(ManifestTest, RejectsWrongHeader) {
  std::istringstream in("record_id,plate\nr1,P\n");
  try {
    parse_manifest(in);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.row(), 1u);
  }
}

TEST(ManifestTest, ReportsRowAndColumn) {
  struct Case {
    std::string row;
    std::string column;
  } cases[] = {
      {",P1,a.jpg,,2024-05-01T10:00:00Z,,", "record_id"},
      {"r1,P_1,a.jpg,,2024-05-01T10:00:00Z,,", "plate_id"},
      {"r1,P1,,,2024-05-01T10:00:00Z,,", "image_path"},
      {"r1,P1,a.jpg,,2024-05-01 10:00,,", "captured_at"},
      {"r1,P1,a.jpg,,2024-05-01T10:00:00,,", "captured_at"},
      {"r1,P1,a.jpg,,2024-05-01T10:00:00Z,abc,1", "lat"},
      {"r1,P1,a.jpg,,2024-05-01T10:00:00Z,91,1", "lat"},
      {"r1,P1,a.jpg,,2024-05-01T10:00:00Z,1,181", "lon"},
      {"r1,P1,a.jpg,,2024-05-01T10:00:00Z,1,", "lon"},
      {"r1,P1,a.jpg,,2024-05-01T10:00:00Z,", ""},
  };
  for (const auto& c : cases) {
    try {
      parse("r0,P0,z.jpg,,2024-05-01T10:00:00Z,,\n" + c.row + "\n");
      ADD_FAILURE() << c.row;
    } catch (const ParseError& e) {
      EXPECT_EQ(e.row(), 3u) << c.row;
      EXPECT_EQ(e.column(), c.column) << c.row;
    }
  }
}

TEST(ManifestTest, DuplicateRecordIdIsRejected) {
  EXPECT_THROW(parse("r1,P1,a.jpg,,2024-05-01T10:00:00Z,,\n"
                     "r1,P2,b.jpg,,2024-05-01T10:00:00Z,,\n"),
               DuplicateRecordId);
}

TEST(ManifestTest, LoadResolvesAgainstManifestDirectory) {
  TempDir dir;
  write(dir / "sub/manifest.csv",
        kHeader + "r1,P1,images/r1.jpg,,2024-05-01T10:00:00Z,,\r\n");
  auto rs = load_manifest(dir / "sub/manifest.csv");
  ASSERT_EQ(rs.size(), 1u);
  EXPECT_EQ(rs[0].image_ref, (dir / "sub/images/r1.jpg").string());
  EXPECT_THROW(load_manifest(dir / "nope.csv"), IoError);
}

TEST(TruthTest, ParsesAndApplies) {
  std::istringstream in(
      "record_id,task,label\nr1,make,Ford\nr1,colour,Red\nr9,make,BMW\n");
  auto table = parse_truth_csv(in);
  auto rs = parse("r1,P1,a.jpg,,2024-05-01T10:00:00Z,,\n"
                  "r2,P1,b.jpg,,2024-05-01T10:00:00Z,,\n");
  EXPECT_EQ(apply_truth(rs, table), 1u);
  EXPECT_EQ(rs[0].ground_truth.at(Task::make), "Ford");
  EXPECT_EQ(rs[0].ground_truth.at(Task::colour), "Red");
  EXPECT_TRUE(rs[1].ground_truth.empty());
}

TEST(TruthTest, RejectsBadRows) {
  for (std::string body : {"r1,wheels,Ford\n", "r1,make,\n", "r1,make\n",
                           "r1,make,Ford\nr1,make,BMW\n"}) {
    std::istringstream in("record_id,task,label\n" + body);
    EXPECT_THROW(parse_truth_csv(in), ParseError) << body;
  }
}

TEST(YoloLabelTest, ParsesBoxesAndSkipsBlankLines) {
  auto boxes = parse_yolo_label("0 0.5 0.5 0.2 0.2\n\n3\t0.1 0.1 0.2 0.2\r\n");
  ASSERT_EQ(boxes.size(), 2u);
  EXPECT_EQ(boxes[1].class_id, 3);
  EXPECT_DOUBLE_EQ(boxes[1].bbox.w(), 0.2);
  EXPECT_TRUE(parse_yolo_label("").empty());
}

TEST(YoloLabelTest, RejectsMalformedLines) {
  struct Case {
    const char* text;
    std::size_t row;
    const char* column;
  } cases[] = {
      {"0 0.5 0.5 0.2\n", 1, ""},
      {"0 0.5 0.5 0.2 0.2 9\n", 1, ""},
      {"0 0.5 0.5 0.2 0.2\n-1 0.5 0.5 0.2 0.2\n", 2, "class_id"},
      {"x 0.5 0.5 0.2 0.2\n", 1, "class_id"},
      {"0 0.5 nan? 0.2 0.2\n", 1, "cy"},
      {"0 0.95 0.5 0.2 0.2\n", 1, "bbox"},
      {"0 0.5 0.5 0 0.2\n", 1, "bbox"},
  };
  for (const auto& c : cases) {
    try {
      parse_yolo_label(c.text);
      ADD_FAILURE() << c.text;
    } catch (const ParseError& e) {
      EXPECT_EQ(e.row(), c.row) << c.text;
      EXPECT_EQ(e.column(), c.column) << c.text;
    }
  }
}

TEST(YoloLabelTest, FormatRoundTripsThroughParse) {
  Rng rng(7);
  for (int i = 0; i < 1000; ++i) {
    double w = rng.uniform(0.01, 1.0), h = rng.uniform(0.01, 1.0);
    double cx = rng.uniform(w / 2, 1 - w / 2), cy = rng.uniform(h / 2, 1 - h / 2);
    std::vector<LabelBox> in{{static_cast<int>(rng.below(80)),
                              BoundingBox(cx, cy, w, h)}};
    auto text = format_yolo_label(in);
    std::vector<LabelBox> out;
    ASSERT_NO_THROW(out = parse_yolo_label(text)) << text;
    ASSERT_EQ(out.size(), 1u);
    EXPECT_EQ(out[0].class_id, in[0].class_id);
    EXPECT_NEAR(out[0].bbox.cx(), cx, 1e-6);
    EXPECT_NEAR(out[0].bbox.h(), h, 1e-6);
    EXPECT_EQ(format_yolo_label(out), text);
  }
}

TEST(GroupingTest, GroupsByPlateInCaptureOrder) {
  using testing::record;
  auto groups = group_by_plate({record("c", "P2", {}, "2024-05-01T10:00:00Z"),
                                record("b", "P1", {}, "2024-05-01T11:00:00Z"),
                                record("a", "P1", {}, "2024-05-01T12:00:00Z"),
                                record("d", "P1", {}, "2024-05-01T11:00:00Z")});
  ASSERT_EQ(groups.size(), 2u);
  EXPECT_EQ(groups[0].plate_id.value(), "P1");
  std::vector<std::string> ids;
  for (const auto& r : groups[0].records) ids.push_back(r.record_id);
  EXPECT_EQ(ids, (std::vector<std::string>{"b", "d", "a"}));
  EXPECT_EQ(groups[1].records.size(), 1u);
}

class DatasetDirTest : public ::testing::Test {
 protected:
  void SetUp() override {
    write(dir / "classes.txt", "Ford\nToyota\n");
    for (const char* part : {"train", "val", "test"}) {
      write(dir / ("images/" + std::string(part) + "/x.jpg"), "jpg");
      write(dir / ("labels/" + std::string(part) + "/x.txt"), "1 0.5 0.5 0.2 0.2\n");
    }
  }
  TempDir dir;
};

TEST_F(DatasetDirTest, CleanLayoutHasNoFindings) {
  EXPECT_TRUE(validate_dataset_dir(dir.path()).ok());
}

TEST_F(DatasetDirTest, ReportsEveryViolation) {
  write(dir / "images/train/orphan.jpg", "jpg");
  write(dir / "labels/train/lonely.txt", "0 0.5 0.5 0.2 0.2\n");
  write(dir / "labels/val/x.txt", "2 0.5 0.5 0.2 0.2\n");
  write(dir / "images/test/bad.jpg", "jpg");
  write(dir / "labels/test/bad.txt", "0 0.5 0.5\n");
  std::filesystem::remove(dir / "classes.txt");
  write(dir / "classes.txt", "Ford\nToyota\n");

  auto report = validate_dataset_dir(dir.path());
  EXPECT_EQ(report.count("missing label"), 1u);
  EXPECT_EQ(report.count("missing image"), 1u);
  EXPECT_EQ(report.count("class out of range"), 1u);
  std::size_t unparseable = 0;
  for (const auto& f : report.findings)
    if (f.message.rfind("unparseable label", 0) == 0) {
      ++unparseable;
      EXPECT_EQ(f.path, "labels/test/bad.txt");
    }
  EXPECT_EQ(unparseable, 1u);
  EXPECT_EQ(report.findings.size(), 4u);
}

TEST_F(DatasetDirTest, MissingPiecesAreFindings) {
  std::filesystem::remove(dir / "classes.txt");
  std::filesystem::remove_all(dir / "labels/val");
  auto report = validate_dataset_dir(dir.path());
  EXPECT_EQ(report.count("missing classes file"), 1u);
  EXPECT_EQ(report.count("missing directory"), 1u);
  EXPECT_EQ(report.count("missing label"), 1u);
  EXPECT_THROW(validate_dataset_dir(dir / "absent"), IoError);
}

}  // namespace
}  // namespace fleetlens
