#pragma once

// Static 3-d kd-tree for exact nearest-neighbor squared distances.

#include "neuro3d/pointcloud.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <vector>

namespace neuro3d {

class KdTree {
 public:
  explicit KdTree(const Points& pts, int leaf_size = 8) : pts_(pts), leaf_(std::max(1, leaf_size)) {
    if (pts_.rows() == 0) throw std::invalid_argument("KdTree: empty point set");
    idx_.resize(static_cast<std::size_t>(pts_.rows()));
    std::iota(idx_.begin(), idx_.end(), Eigen::Index{0});
    nodes_.reserve(2 * idx_.size() / static_cast<std::size_t>(leaf_) + 2);
    build(0, idx_.size());
  }

  Eigen::Index size() const { return pts_.rows(); }

  /// Squared Euclidean distance from q to its nearest stored point.
  double nearest_sq(const Eigen::RowVector3d& q) const {
    double best = std::numeric_limits<double>::infinity();
    search(0, q, best);
    return best;
  }

 private:
  struct Node {
    std::size_t begin, end;
    int axis = -1;  // -1 for leaves
    double split = 0;
    int left = -1, right = -1;
  };

  static double sq(const Eigen::RowVector3d& q, const Points& p, Eigen::Index i) {
    const double dx = q(0) - p(i, 0), dy = q(1) - p(i, 1), dz = q(2) - p(i, 2);
    return dx * dx + dy * dy + dz * dz;
  }

  int build(std::size_t begin, std::size_t end) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back({begin, end});
    if (end - begin <= static_cast<std::size_t>(leaf_)) return id;
    Eigen::RowVector3d lo = pts_.row(idx_[begin]), hi = lo;
    for (std::size_t i = begin + 1; i < end; ++i) {
      lo = lo.cwiseMin(pts_.row(idx_[i]));
      hi = hi.cwiseMax(pts_.row(idx_[i]));
    }
    int axis;
    (hi - lo).maxCoeff(&axis);
    const std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(idx_.begin() + static_cast<std::ptrdiff_t>(begin), idx_.begin() + static_cast<std::ptrdiff_t>(mid),
                     idx_.begin() + static_cast<std::ptrdiff_t>(end),
                     [&](Eigen::Index a, Eigen::Index b) { return pts_(a, axis) < pts_(b, axis); });
    const double split = pts_(idx_[mid], axis);
    const int l = build(begin, mid);
    const int r = build(mid, end);
    nodes_[static_cast<std::size_t>(id)].axis = axis;
    nodes_[static_cast<std::size_t>(id)].split = split;
    nodes_[static_cast<std::size_t>(id)].left = l;
    nodes_[static_cast<std::size_t>(id)].right = r;
    return id;
  }

  // Left subtree holds coordinates <= split, right subtree >= split.
  void search(int id, const Eigen::RowVector3d& q, double& best) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.axis < 0) {
      for (std::size_t i = n.begin; i < n.end; ++i) best = std::min(best, sq(q, pts_, idx_[i]));
      return;
    }
    const double d = q(n.axis) - n.split;
    const int near = d <= 0 ? n.left : n.right;
    const int far = d <= 0 ? n.right : n.left;
    search(near, q, best);
    if (d * d <= best) search(far, q, best);
  }

  Points pts_;
  int leaf_;
  std::vector<Eigen::Index> idx_;
  std::vector<Node> nodes_;
};

}  // namespace neuro3d
