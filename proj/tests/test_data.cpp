#include <gtest/gtest.h>

#include <fstream>

#include "support.hpp"

using namespace pavlm;
using namespace testing_support;

namespace {

DatasetRecord sample_record(Rng& rng, int i) {
  DatasetRecord r;
  r.instruct = "Where do we grip object " + std::to_string(i) + "? \"quoted\" \\ tab\t";
  r.input = "clouds/o" + std::to_string(i) + ".pavl";
  r.answer = "You can grasp the area <mask token>";
  r.affordance_map = "gt/o" + std::to_string(i) + "_grasp.pavg";
  r.affordance = default_affordance_names()[static_cast<std::size_t>(rng.uniform(0, 17.99))];
  r.category = rng.uniform(0, 1) < 0.5 ? "chair" : "mug";
  r.shape_kind = rng.uniform(0, 1) < 0.5 ? ShapeKind::full : ShapeKind::partial;
  r.source = rng.uniform(0, 1) < 0.5 ? "seed" : "rule";
  r.object_id = "o" + std::to_string(i);
  return r;
}

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p, std::ios::binary) << text;
}

nlohmann::json external_object(const std::string& id, int n_points, const std::vector<std::string>& labels) {
  nlohmann::json j;
  j["id"] = id;
  j["category"] = "chair";
  j["shape_kind"] = "full";
  j["n_points"] = n_points;
  j["points"] = nlohmann::json::array();
  for (int i = 0; i < n_points; ++i) j["points"].push_back({i * 0.5, (i % 2) * 1.0, -0.25 * i});
  for (const auto& l : labels) j["affordances"][l] = std::vector<double>(static_cast<std::size_t>(n_points), 0.25);
  return j;
}

}  // namespace

// ------------------------------------------------------------ records

TEST(Records, RandomRoundTrips) {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const auto r = sample_record(rng, i);
    EXPECT_EQ(decode_record(encode_record(r), 1), r);
  }
}

TEST(Records, UnicodeSurvives) {
  Rng rng(2);
  auto r = sample_record(rng, 0);
  r.instruct = "Où faut-il saisir la tasse ☕? 把手";
  r.category = "tasse";
  EXPECT_EQ(decode_record(encode_record(r), 3), r);
}

TEST(Records, FileRoundTripAndFieldNames) {
  TempDir dir("records");
  Rng rng(3);
  std::vector<DatasetRecord> rs;
  for (int i = 0; i < 5; ++i) rs.push_back(sample_record(rng, i));
  write_records(rs, dir.path());
  EXPECT_EQ(read_records(dir.path()), rs);
  const auto line = encode_record(rs[0]);
  for (const char* key : {"\"instruct\"", "\"input\"", "\"Answer\"", "\"Affordance_map\""})
    EXPECT_NE(line.find(key), std::string::npos) << key;
}

TEST(Records, MissingFieldNamesLineAndField) {
  TempDir dir("records_bad");
  Rng rng(4);
  auto good = encode_record(sample_record(rng, 0));
  auto j = nlohmann::json::parse(good);
  j.erase("Answer");
  write_text(dir.path() / kRecordsFile, good + "\n" + good + "\n" + j.dump() + "\n");
  try {
    read_records(dir.path());
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("line 3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("Answer"), std::string::npos) << msg;
  }
  EXPECT_THROW(decode_record("not json", 1), FormatError);
  auto k = nlohmann::json::parse(good);
  k["source"] = "oracle";
  EXPECT_THROW(decode_record(k.dump(), 1), FormatError);
  k = nlohmann::json::parse(good);
  k["shape_kind"] = "sliced";
  EXPECT_THROW(decode_record(k.dump(), 1), FormatError);
}

// ------------------------------------------------------------ ground truth files

TEST(GroundTruthFile, BitExactRoundTrip) {
  TempDir dir("pavg");
  Rng rng(5);
  std::vector<float> s(257);
  for (auto& v : s) v = static_cast<float>(rng.uniform(0, 1));
  s[0] = 0.0f;
  s[1] = 1.0f;
  s[2] = std::nextafter(1.0f, 0.0f);
  const auto p = dir.path() / "a.pavg";
  write_ground_truth(s, p);
  const auto bytes = io::read_file(p);
  ASSERT_EQ(bytes.size(), 16 + 4 * s.size());
  EXPECT_EQ(bytes.substr(0, 4), "PAVG");
  EXPECT_EQ(io::get_u32(bytes, 4), 1u);
  EXPECT_EQ(io::get_u32(bytes, 8), 257u);
  const auto gt = read_ground_truth(p);
  EXPECT_EQ(gt.clamped, 0u);
  ASSERT_EQ(gt.scores.size(), s.size());
  EXPECT_EQ(std::memcmp(gt.scores.data(), s.data(), 4 * s.size()), 0);
}

TEST(GroundTruthFile, OutOfRangeIsClampedAndCounted) {
  TempDir dir("pavg_clamp");
  const auto p = dir.path() / "b.pavg";
  write_ground_truth(std::vector<float>{0.5f, 1.5f, -0.25f}, p);
  const auto gt = read_ground_truth(p);
  EXPECT_EQ(gt.clamped, 2u);
  EXPECT_EQ(gt.scores, (std::vector<float>{0.5f, 1.0f, 0.0f}));
  write_ground_truth(std::vector<float>{std::nanf("")}, p);
  EXPECT_THROW(read_ground_truth(p), FormatError);
}

TEST(GroundTruthFile, TruncationAndMagicErrors) {
  TempDir dir("pavg_bad");
  const auto p = dir.path() / "c.pavg";
  write_ground_truth(std::vector<float>{0.1f, 0.2f, 0.3f}, p);
  const auto bytes = io::read_file(p);
  io::write_file(p, bytes.substr(0, bytes.size() - 2));
  EXPECT_THROW(read_ground_truth(p), FormatError);
  io::write_file(p, bytes.substr(0, 10));
  EXPECT_THROW(read_ground_truth(p), FormatError);
  std::string wrong = bytes;
  wrong[3] = 'L';
  io::write_file(p, wrong);
  try {
    read_ground_truth(p);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos);
  }
  EXPECT_THROW(read_ground_truth(dir.path() / "missing.pavg"), IoError);
}

// ------------------------------------------------------------ synthetic generator

TEST(Synthetic, ChairSeatCarriesSit) {
  Rng rng(6);
  const auto obj = make_synthetic_object("chair", rng, 2048);
  int seat = -1, legs = -1, sit_aff = -1;
  for (int p = 0; p < static_cast<int>(obj.spec.parts.size()); ++p) {
    if (obj.spec.parts[static_cast<std::size_t>(p)].affordance == "sit") seat = p;
    if (obj.spec.parts[static_cast<std::size_t>(p)].affordance == "move") legs = p;
  }
  ASSERT_GE(seat, 0);
  ASSERT_GE(legs, 0);
  for (int a = 0; a < static_cast<int>(obj.affordances.size()); ++a)
    if (obj.affordances[static_cast<std::size_t>(a)].affordance == "sit") sit_aff = a;
  const auto& sit = obj.affordances[static_cast<std::size_t>(sit_aff)];
  std::size_t seat_n = 0, leg_n = 0, leg_zero = 0;
  for (std::size_t i = 0; i < obj.part_of.size(); ++i) {
    if (obj.part_of[i] == seat) {
      ++seat_n;
      EXPECT_EQ(sit.scores[i], 1.0f);
    } else if (obj.part_of[i] == legs) {
      ++leg_n;
      leg_zero += sit.scores[i] == 0.0f;
    }
    EXPECT_GE(sit.scores[i], 0.0f);
    EXPECT_LE(sit.scores[i], 1.0f);
  }
  EXPECT_GT(seat_n, 100u);
  EXPECT_GT(leg_n, 100u);
  EXPECT_GT(static_cast<double>(leg_zero) / static_cast<double>(leg_n), 0.8);
  // normalized cloud
  const RowVector<double> centroid = obj.cloud.points.colwise().mean();
  EXPECT_LT(centroid.norm(), 1e-9);
  EXPECT_NEAR(obj.cloud.points.rowwise().norm().maxCoeff(), 1.0, 1e-12);
}

TEST(Synthetic, FalloffShape) {
  EXPECT_EQ(falloff(0.0, 0.1), 1.0);
  EXPECT_EQ(falloff(0.1, 0.1), 0.0);
  EXPECT_NEAR(falloff(0.05, 0.1), 0.5, 1e-15);
  EXPECT_GT(falloff(0.02, 0.1), falloff(0.03, 0.1));
}

TEST(Synthetic, SameSeedGivesIdenticalBytes) {
  TempDir a("syn_a"), b("syn_b");
  SyntheticOptions o;
  o.n_objects = 6;
  o.n_points = 128;
  o.seed = 9;
  o.partial_fraction = 0.5;
  const auto da = generate_synthetic_dataset(o, a.path());
  const auto db = generate_synthetic_dataset(o, b.path());
  ASSERT_EQ(da.records.size(), db.records.size());
  std::size_t files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a.path())) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), a.path());
    ASSERT_TRUE(fs::exists(b.path() / rel)) << rel;
    EXPECT_EQ(io::read_file(entry.path()), io::read_file(b.path() / rel)) << rel;
    ++files;
  }
  EXPECT_GT(files, 10u);
  o.seed = 10;
  TempDir c("syn_c");
  generate_synthetic_dataset(o, c.path());
  EXPECT_NE(io::read_file(a.path() / "clouds/obj0000.pavl"), io::read_file(c.path() / "clouds/obj0000.pavl"));
}

TEST(Synthetic, ManifestAndRecordsAreConsistent) {
  TempDir dir("syn_manifest");
  SyntheticOptions o;
  o.n_objects = 8;
  o.n_points = 64;
  o.partial_fraction = 0.25;
  const auto ds = generate_synthetic_dataset(o, dir.path());
  const auto loaded = load_dataset(dir.path());
  EXPECT_EQ(loaded.manifest.vocabulary.size(), 18);
  EXPECT_EQ(loaded.manifest.record_count, ds.records.size());
  EXPECT_EQ(loaded.records, ds.records);
  EXPECT_EQ(loaded.manifest.held_out_categories, (std::vector<std::string>{"mug", "knife"}));
  std::size_t partial = 0;
  for (const auto& r : loaded.records) {
    partial += r.shape_kind == ShapeKind::partial;
    const auto pc = loaded.load_cloud(r);
    const auto gt = loaded.load_ground_truth(r);
    EXPECT_EQ(static_cast<Index>(gt.scores.size()), pc.size());
    EXPECT_EQ(r.instruct, render_seed_qa(r.category, r.affordance).instruct_text);
  }
  EXPECT_GT(partial, 0u);
  // 8 objects over 4 families: 2 each, 3 affordances per family
  EXPECT_EQ(ds.records.size() - partial, 24u);
}

TEST(Synthetic, RejectsUnknownFamilyAndBadOptions) {
  Rng rng(7);
  EXPECT_THROW(make_synthetic_object("spaceship", rng, 64), InvalidArgument);
  EXPECT_NO_THROW(make_synthetic_object("mug-like", rng, 64));
  TempDir dir("syn_bad");
  SyntheticOptions o;
  o.families = {"chair", "sofa"};
  EXPECT_THROW(generate_synthetic_dataset(o, dir.path()), InvalidArgument);
  o.families = {"chair"};
  o.partial_fraction = 1.5;
  EXPECT_THROW(generate_synthetic_dataset(o, dir.path()), InvalidArgument);
}

// ------------------------------------------------------------ ingest

TEST(Ingest, FansOutOneRecordPerAffordance) {
  TempDir src("ingest_src"), out("ingest_out");
  write_text(src.path() / "objects/a.json", external_object("chair_a", 4, {"sit", "support", "move"}).dump());
  IngestOptions opt;
  opt.vocabulary = default_affordance_names();
  opt.held_out_categories = {"chair"};
  const auto ds = ingest_external(src.path(), opt, out.path());
  ASSERT_EQ(ds.records.size(), 3u);
  for (const auto& r : ds.records) {
    EXPECT_EQ(r.input, "clouds/chair_a.pavl");
    EXPECT_EQ(r.source, "external");
    EXPECT_EQ(r.instruct, render_seed_qa("chair", r.affordance).instruct_text);
  }
  const auto loaded = load_dataset(out.path());
  EXPECT_EQ(loaded.records.size(), 3u);
  EXPECT_EQ(loaded.manifest.held_out_categories, (std::vector<std::string>{"chair"}));
  const auto pc = loaded.load_cloud(loaded.records[0]);
  EXPECT_EQ(pc.size(), 4);
  EXPECT_NEAR(pc.points.rowwise().norm().maxCoeff(), 1.0, 1e-6);
  EXPECT_EQ(loaded.load_ground_truth(loaded.records[1]).scores, std::vector<float>(4, 0.25f));
}

TEST(Ingest, VocabularyFileAndRename) {
  TempDir src("ingest_vocab"), out("ingest_vocab_out");
  std::string vocab;
  for (const auto& n : default_affordance_names()) vocab += n + "\r\n";
  write_text(src.path() / "vocabulary.txt", vocab);
  write_text(src.path() / "objects/a.json", external_object("a", 3, {"sittable"}).dump());
  IngestOptions opt;
  opt.label_rename = {{"sittable", "sit"}};
  const auto ds = ingest_external(src.path(), opt, out.path());
  ASSERT_EQ(ds.records.size(), 1u);
  EXPECT_EQ(ds.records[0].affordance, "sit");
}

TEST(Ingest, SeventeenNameVocabularyIsRejected) {
  TempDir src("ingest_17"), out("ingest_17_out");
  write_text(src.path() / "objects/a.json", external_object("a", 3, {"sit"}).dump());
  IngestOptions opt;
  opt.vocabulary = default_affordance_names();
  opt.vocabulary.pop_back();
  try {
    ingest_external(src.path(), opt, out.path());
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("18"), std::string::npos) << e.what();
  }
}

TEST(Ingest, PointCountMismatchIsRejected) {
  TempDir src("ingest_count"), out("ingest_count_out");
  auto j = external_object("a", 4, {"sit"});
  j["n_points"] = 5;
  write_text(src.path() / "objects/a.json", j.dump());
  IngestOptions opt;
  opt.vocabulary = default_affordance_names();
  EXPECT_THROW(ingest_external(src.path(), opt, out.path()), FormatError);
  j = external_object("a", 4, {"sit"});
  j["affordances"]["sit"] = {0.1, 0.2};
  write_text(src.path() / "objects/a.json", j.dump());
  EXPECT_THROW(ingest_external(src.path(), opt, out.path()), FormatError);
}

TEST(Ingest, UnknownLabelsAreListed) {
  TempDir src("ingest_unknown"), out("ingest_unknown_out");
  write_text(src.path() / "objects/a.json", external_object("a", 3, {"sit", "fly", "teleport"}).dump());
  IngestOptions opt;
  opt.vocabulary = default_affordance_names();
  try {
    ingest_external(src.path(), opt, out.path());
    FAIL();
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("fly"), std::string::npos) << msg;
    EXPECT_NE(msg.find("teleport"), std::string::npos) << msg;
    EXPECT_EQ(msg.find("sit"), std::string::npos) << msg;
  }
}

// ------------------------------------------------------------ dataset validation

TEST(LoadDataset, DetectsMissingFilesLengthMismatchAndUnknownLabels) {
  TempDir dir("load_bad");
  SyntheticOptions o;
  o.n_objects = 4;
  o.n_points = 32;
  auto ds = generate_synthetic_dataset(o, dir.path());
  EXPECT_NO_THROW(load_dataset(dir.path()));

  write_ground_truth(std::vector<float>(31, 0.5f), dir.path() / ds.records[0].affordance_map);
  EXPECT_THROW(load_dataset(dir.path()), FormatError);
  write_ground_truth(std::vector<float>(32, 0.5f), dir.path() / ds.records[0].affordance_map);
  EXPECT_NO_THROW(load_dataset(dir.path()));

  const Matrix<double> saved = ds.load_cloud(ds.records[1]).points;
  fs::remove(dir.path() / ds.records[1].input);
  EXPECT_THROW(load_dataset(dir.path()), FormatError);
  write_point_cloud(saved, dir.path() / ds.records[1].input);
  EXPECT_NO_THROW(load_dataset(dir.path()));

  auto records = ds.records;
  records[2].affordance = "fly";
  write_records(records, dir.path());
  EXPECT_THROW(load_dataset(dir.path()), FormatError);

  write_text(dir.path() / kManifestFile, "{\"format_version\": 1}");
  EXPECT_THROW(load_dataset(dir.path()), FormatError);
}
