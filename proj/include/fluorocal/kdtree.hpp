#pragma once

// 2D KD-tree for exact k-nearest-neighbour queries over image positions.
// Ties in distance are broken by ascending point index so queries reproduce
// a brute-force scan sorted by (distance^2, index) exactly.

#include <Eigen/Core>

#include <algorithm>
#include <cstdint>
#include <vector>

#include "fluorocal/geometry.hpp"

namespace fluorocal {

struct Neighbor {
  double dist_sq;
  std::int32_t index;

  friend bool operator<(const Neighbor& a, const Neighbor& b) {
    if (a.dist_sq != b.dist_sq) return a.dist_sq < b.dist_sq;
    return a.index < b.index;
  }
};

class KdTree2d {
 public:
  KdTree2d() = default;

  explicit KdTree2d(std::vector<Vec2> points) : points_(std::move(points)) {
    order_.resize(points_.size());
    for (std::size_t i = 0; i < order_.size(); ++i)
      order_[i] = static_cast<std::int32_t>(i);
    if (!points_.empty()) root_ = build(0, static_cast<int>(points_.size()), 0);
  }

  std::size_t size() const { return points_.size(); }
  const std::vector<Vec2>& points() const { return points_; }

  /// Indices of the k nearest stored points, sorted by (distance^2, index).
  std::vector<Neighbor> query(const Vec2& q, int k) const {
    std::vector<Neighbor> best;
    if (k <= 0 || points_.empty()) return best;
    k = std::min<int>(k, static_cast<int>(points_.size()));
    best.reserve(static_cast<std::size_t>(k) + 1);
    search(root_, q, k, best);
    return best;
  }

 private:
  struct Node {
    std::int32_t left = -1;
    std::int32_t right = -1;
    std::int32_t begin = 0;  // leaf range into order_
    std::int32_t end = 0;
    double split = 0.0;
    std::int8_t axis = -1;  // -1 marks a leaf
  };

  static constexpr int kLeafSize = 12;

  std::int32_t build(int begin, int end, int depth) {
    Node node;
    if (end - begin <= kLeafSize) {
      node.begin = begin;
      node.end = end;
      // Keep leaves in index order so equal-distance candidates are met in
      // ascending index order.
      std::sort(order_.begin() + begin, order_.begin() + end);
      nodes_.push_back(node);
      return static_cast<std::int32_t>(nodes_.size() - 1);
    }
    const int axis = depth % 2;
    const int mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid,
                     order_.begin() + end,
                     [&](std::int32_t a, std::int32_t b) {
                       if (points_[a][axis] != points_[b][axis])
                         return points_[a][axis] < points_[b][axis];
                       return a < b;
                     });
    node.axis = static_cast<std::int8_t>(axis);
    node.split = points_[order_[mid]][axis];
    const std::int32_t self = static_cast<std::int32_t>(nodes_.size());
    nodes_.push_back(node);
    const std::int32_t left = build(begin, mid, depth + 1);
    const std::int32_t right = build(mid, end, depth + 1);
    nodes_[self].left = left;
    nodes_[self].right = right;
    return self;
  }

  static void offer(const Vec2& q, std::int32_t idx, const Vec2& p, int k,
                    std::vector<Neighbor>& best) {
    const Neighbor cand{(p - q).squaredNorm(), idx};
    if (static_cast<int>(best.size()) == k && !(cand < best.back())) return;
    auto pos = std::lower_bound(best.begin(), best.end(), cand);
    best.insert(pos, cand);
    if (static_cast<int>(best.size()) > k) best.pop_back();
  }

  void search(std::int32_t node_id, const Vec2& q, int k,
              std::vector<Neighbor>& best) const {
    const Node& node = nodes_[node_id];
    if (node.axis < 0) {
      for (std::int32_t i = node.begin; i < node.end; ++i)
        offer(q, order_[i], points_[order_[i]], k, best);
      return;
    }
    const double delta = q[node.axis] - node.split;
    const std::int32_t near = delta < 0.0 ? node.left : node.right;
    const std::int32_t far = delta < 0.0 ? node.right : node.left;
    search(near, q, k, best);
    // The far side can still hold an equal-distance lower index, so prune
    // strictly.
    if (static_cast<int>(best.size()) < k ||
        delta * delta <= best.back().dist_sq)
      search(far, q, k, best);
  }

  std::vector<Vec2> points_;
  std::vector<std::int32_t> order_;
  std::vector<Node> nodes_;
  std::int32_t root_ = -1;
};

}  // namespace fluorocal
