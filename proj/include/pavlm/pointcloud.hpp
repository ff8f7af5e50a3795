#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "pavlm/autodiff.hpp"
#include "pavlm/binary_io.hpp"
#include "pavlm/errors.hpp"

namespace pavlm {

enum class ShapeKind { full, partial };

inline std::string to_string(ShapeKind k) { return k == ShapeKind::full ? "full" : "partial"; }

inline ShapeKind parse_shape_kind(const std::string& s) {
  if (s == "full") return ShapeKind::full;
  if (s == "partial") return ShapeKind::partial;
  throw InvalidArgument("unknown shape kind: " + s);
}

struct PointCloud {
  Matrix<double> points;  // N x 3
  ShapeKind shape_kind = ShapeKind::full;
  std::string category;

  Index size() const { return points.rows(); }

  void validate() const {
    if (points.cols() != 3) throw InvalidArgument("point cloud must have 3 columns");
    if (points.rows() < 1) throw InvalidArgument("point cloud is empty");
    if (!points.allFinite()) throw InvalidArgument("point cloud has non-finite coordinates");
  }
};

// K groups of G nearest neighbours around farthest-point-sampled centers.
struct PatchSet {
  std::vector<Index> center_indices;
  Matrix<Index> members;  // K x G, row k sorted by (distance, index)
  Matrix<double> centers;  // K x 3

  Index groups() const { return members.rows(); }
  Index group_size() const { return members.cols(); }
};

inline double squared_distance(const Matrix<double>& pts, Index a, Index b) {
  return (pts.row(a) - pts.row(b)).squaredNorm();
}

// Centers the cloud at its centroid and scales the farthest point to unit norm.
inline PointCloud normalize_unit_sphere(const PointCloud& pc) {
  pc.validate();
  if (pc.size() < 2) throw DegenerateInputError("normalize_unit_sphere: need at least two points");
  const RowVector<double> centroid = pc.points.colwise().mean();
  Matrix<double> centered = pc.points.rowwise() - centroid;
  const double max_norm = centered.rowwise().norm().maxCoeff();
  if (!(max_norm > 0.0)) throw DegenerateInputError("normalize_unit_sphere: all points are identical");
  PointCloud out = pc;
  out.points = centered / max_norm;
  return out;
}

// Greedy farthest point sampling. The first center is the point farthest from
// the centroid; every later center maximizes the distance to the chosen set.
// All ties resolve to the smallest index.
inline std::vector<Index> farthest_point_sample(const PointCloud& pc, Index k) {
  pc.validate();
  const Index n = pc.size();
  if (k < 1 || k > n)
    throw InvalidArgument("farthest_point_sample: K=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  const RowVector<double> centroid = pc.points.colwise().mean();
  Index first = 0;
  double best = -1.0;
  for (Index i = 0; i < n; ++i) {
    const double d = (pc.points.row(i) - centroid).squaredNorm();
    if (d > best) {
      best = d;
      first = i;
    }
  }
  std::vector<Index> chosen{first};
  std::vector<char> selected(static_cast<std::size_t>(n), 0);
  selected[static_cast<std::size_t>(first)] = 1;
  std::vector<double> min_dist(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  Index last = first;
  while (static_cast<Index>(chosen.size()) < k) {
    Index next = -1;
    double next_d = -1.0;
    for (Index i = 0; i < n; ++i) {
      auto& md = min_dist[static_cast<std::size_t>(i)];
      md = std::min(md, squared_distance(pc.points, i, last));
      if (selected[static_cast<std::size_t>(i)]) continue;
      if (md > next_d) {
        next_d = md;
        next = i;
      }
    }
    selected[static_cast<std::size_t>(next)] = 1;
    chosen.push_back(next);
    last = next;
  }
  return chosen;
}

// Indices of the `count` points nearest to `query`, ordered by
// (distance, preferred-first, index). `preferred` (if >= 0) wins ties at equal
// distance so a center always belongs to its own group.
inline std::vector<Index> nearest_indices(const Matrix<double>& pts, const RowVector<double>& query, Index count,
                                          Index preferred = -1) {
  const Index n = pts.rows();
  std::vector<double> d(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) d[static_cast<std::size_t>(i)] = (pts.row(i) - query).squaredNorm();
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index{0});
  auto less = [&](Index a, Index b) {
    const double da = d[static_cast<std::size_t>(a)], db = d[static_cast<std::size_t>(b)];
    if (da != db) return da < db;
    if ((a == preferred) != (b == preferred)) return a == preferred;
    return a < b;
  };
  std::partial_sort(idx.begin(), idx.begin() + count, idx.end(), less);
  idx.resize(static_cast<std::size_t>(count));
  return idx;
}

inline PatchSet knn_group(const PointCloud& pc, const std::vector<Index>& center_indices, Index group_size) {
  pc.validate();
  const Index n = pc.size();
  if (group_size < 1 || group_size > n)
    throw InvalidArgument("knn_group: G=" + std::to_string(group_size) + " exceeds point count " + std::to_string(n));
  {
    std::vector<Index> sorted = center_indices;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw InvalidArgument("knn_group: center indices must be distinct");
  }
  PatchSet ps;
  ps.center_indices = center_indices;
  const auto k = static_cast<Index>(center_indices.size());
  ps.members.resize(k, group_size);
  ps.centers.resize(k, 3);
  for (Index c = 0; c < k; ++c) {
    const Index ci = center_indices[static_cast<std::size_t>(c)];
    if (ci < 0 || ci >= n) throw InvalidArgument("knn_group: center index out of range");
    ps.centers.row(c) = pc.points.row(ci);
    const auto nn = nearest_indices(pc.points, pc.points.row(ci), group_size, ci);
    for (Index g = 0; g < group_size; ++g) ps.members(c, g) = nn[static_cast<std::size_t>(g)];
  }
  return ps;
}

struct PartialView {
  PointCloud cloud;
  std::vector<Index> source_indices;  // output row -> input row
};

// Front-facing crop: keeps the ceil(keep_fraction * N) points with the largest
// projection on `view_direction`, then cycles through them to refill N rows.
inline PartialView make_partial_view_indexed(const PointCloud& pc, const std::array<double, 3>& view_direction,
                                             double keep_fraction) {
  pc.validate();
  if (pc.shape_kind != ShapeKind::full) throw InvalidArgument("make_partial_view: input must be a full shape");
  if (!(keep_fraction > 0.0) || keep_fraction > 1.0)
    throw InvalidArgument("make_partial_view: keep_fraction must lie in (0, 1]");
  RowVector<double> dir(3);
  dir << view_direction[0], view_direction[1], view_direction[2];
  const double len = dir.norm();
  if (!(len > 0.0) || !std::isfinite(len)) throw InvalidArgument("make_partial_view: zero view direction");
  dir /= len;
  const Index n = pc.size();
  auto keep = static_cast<Index>(std::ceil(keep_fraction * static_cast<double>(n) - 1e-9));
  keep = std::clamp<Index>(keep, 1, n);
  std::vector<double> proj(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) proj[static_cast<std::size_t>(i)] = pc.points.row(i).dot(dir);
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return proj[static_cast<std::size_t>(a)] > proj[static_cast<std::size_t>(b)];
  });
  std::vector<Index> retained(order.begin(), order.begin() + keep);
  std::sort(retained.begin(), retained.end());

  PartialView out;
  out.cloud.category = pc.category;
  out.cloud.shape_kind = ShapeKind::partial;
  out.cloud.points.resize(n, 3);
  out.source_indices.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const Index src = retained[static_cast<std::size_t>(i % keep)];
    out.source_indices[static_cast<std::size_t>(i)] = src;
    out.cloud.points.row(i) = pc.points.row(src);
  }
  return out;
}

inline PointCloud make_partial_view(const PointCloud& pc, const std::array<double, 3>& view_direction,
                                    double keep_fraction) {
  return make_partial_view_indexed(pc, view_direction, keep_fraction).cloud;
}

// ---------------------------------------------------------------- PAVL files

inline constexpr std::string_view kCloudMagic = "PAVL";

inline std::string encode_point_cloud(const Matrix<double>& points) {
  if (points.cols() != 3) throw InvalidArgument("encode_point_cloud: expected N x 3");
  std::vector<float> flat(static_cast<std::size_t>(points.size()));
  for (Index i = 0; i < points.rows(); ++i)
    for (Index c = 0; c < 3; ++c) flat[static_cast<std::size_t>(i * 3 + c)] = static_cast<float>(points(i, c));
  return io::encode_float_array(kCloudMagic, static_cast<std::uint32_t>(points.rows()), flat);
}

inline Matrix<double> decode_point_cloud(std::string_view data, const std::string& what = "point cloud") {
  const auto flat = io::decode_float_array(data, kCloudMagic, 3, what);
  const auto n = static_cast<Index>(flat.size() / 3);
  Matrix<double> pts(n, 3);
  for (Index i = 0; i < n; ++i)
    for (Index c = 0; c < 3; ++c) pts(i, c) = static_cast<double>(flat[static_cast<std::size_t>(i * 3 + c)]);
  if (!pts.allFinite()) throw FormatError(what + ": non-finite coordinates");
  return pts;
}

inline void write_point_cloud(const Matrix<double>& points, const std::filesystem::path& path) {
  io::write_file(path, encode_point_cloud(points));
}

inline Matrix<double> read_point_cloud(const std::filesystem::path& path) {
  return decode_point_cloud(io::read_file(path), path.string());
}

}  // namespace pavlm
