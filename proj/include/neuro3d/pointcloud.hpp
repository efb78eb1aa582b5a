#pragma once

// Point clouds, normalization to the unit-radius object frame, and ASCII PLY.

#include "neuro3d/binary_io.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace neuro3d {

using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

struct PointCloud {
  Points points;
  Points colors;            // empty, or N×3 in [0, 1]
  int dominant_color = -1;  // -1 when unknown

  Eigen::Index size() const { return points.rows(); }
  bool has_colors() const { return colors.rows() == points.rows() && colors.rows() > 0; }

  void validate() const {
    if (!points.allFinite()) throw std::invalid_argument("point cloud has non-finite coordinates");
    if (colors.rows() != 0 && colors.rows() != points.rows()) throw std::invalid_argument("point cloud color count mismatch");
  }
};

struct CloudTransform {
  Eigen::RowVector3d centroid = Eigen::RowVector3d::Zero();
  double scale = 1.0;  // original radius; normalized = (x - centroid) / scale
};

struct NormalizedCloud {
  PointCloud cloud;
  CloudTransform transform;
};

inline NormalizedCloud normalize_cloud(const PointCloud& x) {
  if (x.size() < 1) throw std::invalid_argument("normalize_cloud: empty cloud");
  x.validate();
  NormalizedCloud out;
  out.transform.centroid = x.points.colwise().mean();
  out.cloud = x;
  out.cloud.points.rowwise() -= out.transform.centroid;
  const double radius = out.cloud.points.rowwise().norm().maxCoeff();
  out.transform.scale = radius > 0 ? radius : 1.0;
  out.cloud.points /= out.transform.scale;
  return out;
}

inline PointCloud denormalize_cloud(const PointCloud& x, const CloudTransform& t) {
  PointCloud out = x;
  out.points *= t.scale;
  out.points.rowwise() += t.centroid;
  return out;
}

// --- PLY -------------------------------------------------------------------

inline std::string encode_ply(const PointCloud& c, const std::vector<std::string>& comments = {}) {
  c.validate();
  std::string s = "ply\nformat ascii 1.0\n";
  for (const auto& line : comments) s += "comment " + line + "\n";
  s += "element vertex " + std::to_string(c.size()) + "\n";
  s += "property float x\nproperty float y\nproperty float z\n";
  const bool colored = c.has_colors();
  if (colored) s += "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  s += "end_header\n";
  char buf[128];
  for (Eigen::Index i = 0; i < c.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.9g %.9g %.9g", static_cast<float>(c.points(i, 0)), static_cast<float>(c.points(i, 1)),
                  static_cast<float>(c.points(i, 2)));
    s += buf;
    if (colored) {
      auto u8 = [](double v) { return static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); };
      std::snprintf(buf, sizeof buf, " %d %d %d", u8(c.colors(i, 0)), u8(c.colors(i, 1)), u8(c.colors(i, 2)));
      s += buf;
    }
    s += "\n";
  }
  return s;
}

inline PointCloud decode_ply(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (std::getline(in, line) && !line.empty() && line.back() == '\r') line.pop_back();
  if (!in || line != "ply") throw io::FormatError("PLY: missing 'ply' magic line");
  long long count = -1;
  std::vector<std::string> props;
  bool in_vertex = false, ascii = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "format") {
      std::string fmt;
      ls >> fmt;
      ascii = fmt == "ascii";
    } else if (word == "element") {
      std::string name;
      long long n = 0;
      ls >> name >> n;
      in_vertex = name == "vertex";
      if (in_vertex) count = n;
      else if (n != 0) throw io::FormatError("PLY: only vertex elements are supported");
    } else if (word == "property") {
      std::string type, name;
      ls >> type >> name;
      if (type == "list") throw io::FormatError("PLY: list properties are not supported");
      if (in_vertex) props.push_back(name);
    } else if (word == "end_header") {
      break;
    }
  }
  if (!ascii) throw io::FormatError("PLY: only the ascii format is supported");
  if (count < 0) throw io::FormatError("PLY: no vertex element");
  auto find = [&](const char* n) {
    const auto it = std::find(props.begin(), props.end(), n);
    return it == props.end() ? -1 : static_cast<int>(it - props.begin());
  };
  const int ix = find("x"), iy = find("y"), iz = find("z");
  const int ir = find("red"), ig = find("green"), ib = find("blue");
  if (ix < 0 || iy < 0 || iz < 0) throw io::FormatError("PLY: missing x/y/z properties");
  const bool colored = ir >= 0 && ig >= 0 && ib >= 0;
  PointCloud c;
  c.points.resize(count, 3);
  if (colored) c.colors.resize(count, 3);
  std::vector<double> vals(props.size());
  for (long long i = 0; i < count; ++i) {
    if (!std::getline(in, line)) throw io::FormatError("PLY: fewer vertices than declared");
    std::istringstream ls(line);
    for (auto& v : vals) {
      if (!(ls >> v)) throw io::FormatError("PLY: malformed vertex line " + std::to_string(i));
    }
    c.points.row(i) << vals[static_cast<std::size_t>(ix)], vals[static_cast<std::size_t>(iy)], vals[static_cast<std::size_t>(iz)];
    if (colored) {
      c.colors.row(i) << vals[static_cast<std::size_t>(ir)] / 255.0, vals[static_cast<std::size_t>(ig)] / 255.0,
          vals[static_cast<std::size_t>(ib)] / 255.0;
    }
  }
  c.validate();
  return c;
}

inline void write_ply(const std::string& path, const PointCloud& c, const std::vector<std::string>& comments = {}) {
  io::write_text(path, encode_ply(c, comments));
}

inline PointCloud read_ply(const std::string& path) { return decode_ply(io::read_text(path)); }

}  // namespace neuro3d
