#pragma once

// Adapter for externally converted affordance data.
//
// Intermediate layout under the source directory:
//   vocabulary.txt        18 affordance names, one per line (optional when
//                         IngestOptions::vocabulary is set)
//   objects/*.json        one object per file:
//     {"id": "chair_0001", "category": "chair", "shape_kind": "full",
//      "n_points": 2048, "points": [[x, y, z], ...],
//      "affordances": {"sit": [s_0, ..., s_{N-1}], ...}}
// Objects are processed in file-name order.

#include <algorithm>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pavlm/dataset.hpp"
#include "pavlm/errors.hpp"
#include "pavlm/instruction.hpp"
#include "pavlm/pointcloud.hpp"

namespace pavlm {

struct IngestOptions {
  std::vector<std::string> vocabulary;              // overrides vocabulary.txt when non-empty
  std::map<std::string, std::string> label_rename;  // source label -> vocabulary label
  std::vector<std::string> held_out_categories;
  bool normalize = true;
};

inline std::vector<std::string> read_vocabulary_file(const fs::path& path) {
  std::istringstream in(io::read_file(path));
  std::vector<std::string> names;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) names.push_back(line);
  }
  return names;
}

inline Dataset ingest_external(const fs::path& source_dir, const IngestOptions& opt, const fs::path& out_dir) {
  std::vector<std::string> names = opt.vocabulary;
  if (names.empty()) names = read_vocabulary_file(source_dir / "vocabulary.txt");
  Dataset ds;
  ds.root = out_dir;
  try {
    ds.manifest.vocabulary = LabelVocabulary(names);
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("ingest: ") + e.what());
  }
  ds.manifest.held_out_categories = opt.held_out_categories;

  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(source_dir / "objects"))
    if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw FormatError("ingest: no objects/*.json under " + source_dir.string());

  for (const auto& file : files) {
    const std::string where = file.filename().string();
    auto j = nlohmann::json::parse(io::read_file(file), nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw FormatError(where + ": not a JSON object");
    std::string id, category, kind;
    Index declared = 0;
    nlohmann::json points, affs;
    try {
      id = j.value("id", file.stem().string());
      category = j.at("category").get<std::string>();
      kind = j.value("shape_kind", std::string("full"));
      declared = j.at("n_points").get<Index>();
      points = j.at("points");
      affs = j.at("affordances");
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(where + ": " + e.what());
    }
    const ShapeKind shape = [&] {
      try {
        return parse_shape_kind(kind);
      } catch (const InvalidArgument& e) {
        throw FormatError(where + ": " + e.what());
      }
    }();
    if (!points.is_array() || static_cast<Index>(points.size()) != declared)
      throw FormatError(where + ": declared " + std::to_string(declared) + " points, found " +
                        std::to_string(points.is_array() ? points.size() : 0));
    PointCloud pc;
    pc.category = category;
    pc.shape_kind = shape;
    pc.points.resize(declared, 3);
    for (Index i = 0; i < declared; ++i) {
      const auto& p = points[static_cast<std::size_t>(i)];
      if (!p.is_array() || p.size() != 3) throw FormatError(where + ": point " + std::to_string(i) + " is not [x, y, z]");
      for (Index c = 0; c < 3; ++c) pc.points(i, c) = p[static_cast<std::size_t>(c)].get<double>();
    }
    if (opt.normalize) pc = normalize_unit_sphere(pc);

    if (!affs.is_object()) throw FormatError(where + ": \"affordances\" must be an object");
    std::vector<std::string> unknown;
    std::vector<std::pair<std::string, const nlohmann::json*>> mapped;
    for (auto it = affs.begin(); it != affs.end(); ++it) {
      std::string label = it.key();
      if (auto r = opt.label_rename.find(label); r != opt.label_rename.end()) label = r->second;
      if (!ds.manifest.vocabulary.contains(label))
        unknown.push_back(it.key());
      else
        mapped.emplace_back(label, &it.value());
    }
    if (!unknown.empty()) {
      std::string list;
      for (const auto& u : unknown) list += (list.empty() ? "" : ", ") + u;
      throw FormatError(where + ": labels not in vocabulary: " + list);
    }

    const std::string cloud_rel = "clouds/" + id + ".pavl";
    write_point_cloud(pc.points, out_dir / cloud_rel);
    for (const auto& [label, arr] : mapped) {
      if (!arr->is_array() || static_cast<Index>(arr->size()) != declared)
        throw FormatError(where + ": scores for \"" + label + "\" must have " + std::to_string(declared) + " entries");
      std::vector<float> scores;
      scores.reserve(arr->size());
      for (const auto& v : *arr) scores.push_back(v.get<float>());
      const std::string gt_rel = "gt/" + id + "_" + label + ".pavg";
      write_ground_truth(scores, out_dir / gt_rel);
      const auto qa = render_seed_qa(category, label);
      DatasetRecord r;
      r.instruct = qa.instruct_text;
      r.input = cloud_rel;
      r.answer = qa.answer_text;
      r.affordance_map = gt_rel;
      r.affordance = label;
      r.category = category;
      r.shape_kind = shape;
      r.source = "external";
      r.object_id = id;
      ds.records.push_back(std::move(r));
    }
    if (std::find(ds.manifest.categories.begin(), ds.manifest.categories.end(), category) ==
        ds.manifest.categories.end())
      ds.manifest.categories.push_back(category);
  }
  write_dataset(ds);
  ds.manifest.record_count = ds.records.size();
  return ds;
}

}  // namespace pavlm
