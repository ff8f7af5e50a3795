#pragma once

// Dataset on-disk layout:
//   <root>/manifest.json    vocabulary, categories, held-out categories, counts
//   <root>/records.jsonl    one record per line
//   <root>/clouds/*.pavl    point clouds
//   <root>/gt/*.pavg        per-point ground-truth scores

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pavlm/binary_io.hpp"
#include "pavlm/errors.hpp"
#include "pavlm/instruction.hpp"
#include "pavlm/pointcloud.hpp"

namespace pavlm {

namespace fs = std::filesystem;

inline constexpr int kManifestFormatVersion = 1;
inline constexpr const char* kRecordsFile = "records.jsonl";
inline constexpr const char* kManifestFile = "manifest.json";

struct DatasetRecord {
  std::string instruct;
  std::string input;           // cloud path relative to the dataset root
  std::string answer;          // serialized as "Answer"
  std::string affordance_map;  // ground-truth path relative to the dataset root
  std::string affordance;      // label name
  std::string category;
  ShapeKind shape_kind = ShapeKind::full;
  std::string source = "synthetic";  // seed | rule | service | synthetic | external
  std::string object_id;

  bool operator==(const DatasetRecord&) const = default;
};

inline const std::set<std::string>& record_sources() {
  static const std::set<std::string> s{"seed", "rule", "service", "synthetic", "external"};
  return s;
}

inline nlohmann::ordered_json record_to_json(const DatasetRecord& r) {
  nlohmann::ordered_json j;
  j["instruct"] = r.instruct;
  j["input"] = r.input;
  j["Answer"] = r.answer;
  j["Affordance_map"] = {{"path", r.affordance_map}, {"label", r.affordance}};
  j["category"] = r.category;
  j["shape_kind"] = to_string(r.shape_kind);
  j["source"] = r.source;
  j["object_id"] = r.object_id;
  return j;
}

inline std::string encode_record(const DatasetRecord& r) { return record_to_json(r).dump(); }

// Parses one line; `line_no` is used in error messages only.
inline DatasetRecord decode_record(const std::string& line, std::size_t line_no) {
  const std::string where = "records line " + std::to_string(line_no);
  nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw FormatError(where + ": not a JSON object");
  auto str = [&](const char* key) -> std::string {
    if (!j.contains(key)) throw FormatError(where + ": missing field \"" + key + "\"");
    if (!j[key].is_string()) throw FormatError(where + ": field \"" + key + "\" must be a string");
    return j[key].get<std::string>();
  };
  DatasetRecord r;
  r.instruct = str("instruct");
  r.input = str("input");
  r.answer = str("Answer");
  if (!j.contains("Affordance_map")) throw FormatError(where + ": missing field \"Affordance_map\"");
  const auto& am = j["Affordance_map"];
  if (!am.is_object() || !am.contains("path") || !am.contains("label") || !am["path"].is_string() ||
      !am["label"].is_string())
    throw FormatError(where + ": field \"Affordance_map\" needs string \"path\" and \"label\"");
  r.affordance_map = am["path"].get<std::string>();
  r.affordance = am["label"].get<std::string>();
  r.category = str("category");
  try {
    r.shape_kind = parse_shape_kind(str("shape_kind"));
  } catch (const InvalidArgument& e) {
    throw FormatError(where + ": " + e.what());
  }
  r.source = str("source");
  if (!record_sources().count(r.source)) throw FormatError(where + ": unknown source \"" + r.source + "\"");
  r.object_id = j.contains("object_id") && j["object_id"].is_string() ? j["object_id"].get<std::string>() : "";
  return r;
}

inline void write_records(const std::vector<DatasetRecord>& records, const fs::path& dir) {
  std::string out;
  for (const auto& r : records) {
    out += encode_record(r);
    out += '\n';
  }
  io::write_file(dir / kRecordsFile, out);
}

inline std::vector<DatasetRecord> read_records(const fs::path& dir) {
  std::ifstream f(dir / kRecordsFile, std::ios::binary);
  if (!f) throw IoError("cannot open " + (dir / kRecordsFile).string());
  std::vector<DatasetRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    records.push_back(decode_record(line, line_no));
  }
  return records;
}

// ---------------------------------------------------------------- ground truth

inline constexpr std::string_view kGroundTruthMagic = "PAVG";

struct GroundTruth {
  std::vector<float> scores;
  std::size_t clamped = 0;  // values pulled back into [0, 1] on read
};

inline void write_ground_truth(std::span<const float> scores, const fs::path& path) {
  io::write_file(path, io::encode_float_array(kGroundTruthMagic, static_cast<std::uint32_t>(scores.size()), scores));
}

inline GroundTruth read_ground_truth(const fs::path& path) {
  GroundTruth gt;
  gt.scores = io::decode_float_array(io::read_file(path), kGroundTruthMagic, 1, path.string());
  for (auto& v : gt.scores) {
    if (std::isnan(v)) throw FormatError(path.string() + ": NaN ground-truth score");
    if (v < 0.0f || v > 1.0f) {
      v = std::clamp(v, 0.0f, 1.0f);
      ++gt.clamped;
    }
  }
  return gt;
}

// ---------------------------------------------------------------- manifest

struct DatasetManifest {
  int format_version = kManifestFormatVersion;
  LabelVocabulary vocabulary;
  std::vector<std::string> categories;
  std::vector<std::string> held_out_categories;  // default unseen-split categories
  std::size_t record_count = 0;
};

inline std::string encode_manifest(const DatasetManifest& m) {
  nlohmann::ordered_json j;
  j["format_version"] = m.format_version;
  j["affordances"] = m.vocabulary.names();
  j["categories"] = m.categories;
  j["held_out_categories"] = m.held_out_categories;
  j["record_count"] = m.record_count;
  return j.dump(2) + "\n";
}

inline DatasetManifest decode_manifest(const std::string& text, const std::string& where = "manifest") {
  auto j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw FormatError(where + ": not a JSON object");
  DatasetManifest m;
  try {
    m.format_version = j.at("format_version").get<int>();
    m.vocabulary = LabelVocabulary(j.at("affordances").get<std::vector<std::string>>());
    m.categories = j.at("categories").get<std::vector<std::string>>();
    m.held_out_categories = j.value("held_out_categories", std::vector<std::string>{});
    m.record_count = j.at("record_count").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + ": " + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(where + ": " + e.what());
  }
  if (m.format_version != kManifestFormatVersion)
    throw FormatError(where + ": unsupported format version " + std::to_string(m.format_version));
  return m;
}

inline void write_manifest(const DatasetManifest& m, const fs::path& dir) {
  io::write_file(dir / kManifestFile, encode_manifest(m));
}

inline DatasetManifest read_manifest(const fs::path& dir) {
  return decode_manifest(io::read_file(dir / kManifestFile), (dir / kManifestFile).string());
}

// ---------------------------------------------------------------- dataset

struct Dataset {
  fs::path root;
  DatasetManifest manifest;
  std::vector<DatasetRecord> records;

  PointCloud load_cloud(const DatasetRecord& r) const {
    PointCloud pc;
    pc.points = read_point_cloud(root / r.input);
    pc.shape_kind = r.shape_kind;
    pc.category = r.category;
    return pc;
  }

  GroundTruth load_ground_truth(const DatasetRecord& r) const { return read_ground_truth(root / r.affordance_map); }

  int label_id(const DatasetRecord& r) const { return manifest.vocabulary.label(r.affordance).id; }
};

// Loads and validates: every referenced file exists and every label is in the
// manifest vocabulary.
inline Dataset load_dataset(const fs::path& root) {
  Dataset ds;
  ds.root = root;
  ds.manifest = read_manifest(root);
  ds.records = read_records(root);
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const auto& r = ds.records[i];
    const std::string where = "record " + std::to_string(i + 1);
    if (!ds.manifest.vocabulary.contains(r.affordance))
      throw FormatError(where + ": affordance \"" + r.affordance + "\" not in manifest vocabulary");
    if (!fs::exists(root / r.input)) throw FormatError(where + ": missing cloud file " + r.input);
    if (!fs::exists(root / r.affordance_map)) throw FormatError(where + ": missing ground-truth file " + r.affordance_map);
    const auto cloud_bytes = fs::file_size(root / r.input), gt_bytes = fs::file_size(root / r.affordance_map);
    if (cloud_bytes < io::kHeaderBytes || gt_bytes < io::kHeaderBytes ||
        (cloud_bytes - io::kHeaderBytes) != 3 * (gt_bytes - io::kHeaderBytes))
      throw FormatError(where + ": ground-truth length does not match the cloud's point count");
  }
  return ds;
}

inline void write_dataset(const Dataset& ds) {
  DatasetManifest m = ds.manifest;
  m.record_count = ds.records.size();
  write_manifest(m, ds.root);
  write_records(ds.records, ds.root);
}

}  // namespace pavlm
