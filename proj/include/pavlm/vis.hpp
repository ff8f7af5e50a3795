#pragma once

// ASCII PLY export of an affordance map: score 1 is red, score 0 is blue.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "pavlm/errors.hpp"
#include "pavlm/pointcloud.hpp"

namespace pavlm {

using Rgb = std::array<int, 3>;

// Channels are truncated: 0.5 -> (127, 0, 127), 0.25 -> (63, 0, 191).
inline Rgb score_color(double s) {
  if (!std::isfinite(s)) throw InvalidArgument("score_color: non-finite score");
  s = std::clamp(s, 0.0, 1.0);
  return {static_cast<int>(std::floor(255.0 * s)), 0, static_cast<int>(std::floor(255.0 * (1.0 - s)))};
}

inline std::string encode_ply(const Matrix<double>& points, std::span<const double> scores) {
  if (points.cols() != 3) throw InvalidArgument("export_vis: expected N x 3 points");
  if (static_cast<Index>(scores.size()) != points.rows())
    throw InvalidArgument("export_vis: score count does not match point count");
  std::ostringstream s;
  s << "ply\nformat ascii 1.0\nelement vertex " << points.rows()
    << "\nproperty float x\nproperty float y\nproperty float z\n"
       "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";
  s << std::setprecision(9);
  for (Index i = 0; i < points.rows(); ++i) {
    const auto c = score_color(scores[static_cast<std::size_t>(i)]);
    s << static_cast<float>(points(i, 0)) << ' ' << static_cast<float>(points(i, 1)) << ' '
      << static_cast<float>(points(i, 2)) << ' ' << c[0] << ' ' << c[1] << ' ' << c[2] << '\n';
  }
  return s.str();
}

inline void export_vis(const Matrix<double>& points, std::span<const double> scores, const std::filesystem::path& path) {
  const std::string text = encode_ply(points, scores);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("export_vis: cannot write " + path.string());
  f << text;
  if (!f) throw IoError("export_vis: write failed for " + path.string());
}

struct PlyCloud {
  Matrix<double> points;
  std::vector<Rgb> colors;
  std::vector<std::string> properties;
};

// Reads the ASCII vertex layout written by export_vis.
inline PlyCloud read_ply(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("read_ply: cannot open " + path.string());
  std::string line;
  if (!std::getline(f, line) || line != "ply") throw FormatError(path.string() + ": not a PLY file");
  long long n = -1;
  PlyCloud out;
  while (std::getline(f, line) && line != "end_header") {
    std::istringstream ls(line);
    std::string kw;
    ls >> kw;
    if (kw == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt != "ascii") throw FormatError(path.string() + ": only ASCII PLY is supported");
    } else if (kw == "element") {
      std::string what;
      ls >> what >> n;
    } else if (kw == "property") {
      std::string type, name;
      ls >> type >> name;
      out.properties.push_back(name);
    }
  }
  if (n < 0) throw FormatError(path.string() + ": missing vertex element");
  const std::vector<std::string> expected{"x", "y", "z", "red", "green", "blue"};
  if (out.properties != expected) throw FormatError(path.string() + ": unexpected vertex properties");
  out.points.resize(static_cast<Index>(n), 3);
  out.colors.resize(static_cast<std::size_t>(n));
  for (long long i = 0; i < n; ++i) {
    if (!std::getline(f, line)) throw FormatError(path.string() + ": truncated vertex list");
    std::istringstream ls(line);
    auto& c = out.colors[static_cast<std::size_t>(i)];
    if (!(ls >> out.points(i, 0) >> out.points(i, 1) >> out.points(i, 2) >> c[0] >> c[1] >> c[2]))
      throw FormatError(path.string() + ": malformed vertex " + std::to_string(i));
  }
  return out;
}

}  // namespace pavlm
