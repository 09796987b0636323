#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <unordered_map>
#include <vector>

#include "mrslam/geometry.hpp"

namespace mrslam {

/// Lidar point, meters. Stored as float to match the on-disk scan format
/// bit for bit.
struct Point3 {
  float x = 0, y = 0, z = 0;

  Vec3 vec() const { return Vec3(x, y, z); }
  bool finite() const { return std::isfinite(x) && std::isfinite(y) && std::isfinite(z); }
};

inline Point3 to_point(const Vec3& v) {
  return Point3{static_cast<float>(v.x()), static_cast<float>(v.y()), static_cast<float>(v.z())};
}

using PointCloud = std::vector<Point3>;

inline PointCloud transform_cloud(const PointCloud& cloud, const Pose& T) {
  PointCloud out;
  out.reserve(cloud.size());
  const Mat3 R = T.rotation.toRotationMatrix();
  for (const Point3& p : cloud) out.push_back(to_point(R * p.vec() + T.translation));
  return out;
}

inline Vec3 cloud_centroid(const PointCloud& cloud) {
  Vec3 c = Vec3::Zero();
  for (const Point3& p : cloud) c += p.vec();
  return cloud.empty() ? c : Vec3(c / static_cast<double>(cloud.size()));
}

/// Centroid-per-voxel downsample with a fixed leaf size. Output order follows
/// first occupancy, so the result is deterministic for a fixed input order.
inline PointCloud voxel_downsample(const PointCloud& cloud, double leaf) {
  struct Acc {
    Vec3 sum = Vec3::Zero();
    size_t n = 0;
    size_t order = 0;
  };
  std::unordered_map<uint64_t, Acc> voxels;
  voxels.reserve(cloud.size());
  size_t next_order = 0;
  for (const Point3& p : cloud) {
    const int64_t ix = static_cast<int64_t>(std::floor(p.x / leaf));
    const int64_t iy = static_cast<int64_t>(std::floor(p.y / leaf));
    const int64_t iz = static_cast<int64_t>(std::floor(p.z / leaf));
    // 21 bits per axis, offset to keep keys positive
    const uint64_t key = ((static_cast<uint64_t>(ix + 1048576) & 0x1FFFFF) << 42) |
                         ((static_cast<uint64_t>(iy + 1048576) & 0x1FFFFF) << 21) |
                         (static_cast<uint64_t>(iz + 1048576) & 0x1FFFFF);
    auto [it, inserted] = voxels.try_emplace(key);
    if (inserted) it->second.order = next_order++;
    it->second.sum += p.vec();
    it->second.n += 1;
  }
  std::vector<const Acc*> ordered(voxels.size());
  for (const auto& [key, acc] : voxels) ordered[acc.order] = &acc;
  PointCloud out;
  out.reserve(ordered.size());
  for (const Acc* acc : ordered) out.push_back(to_point(acc->sum / static_cast<double>(acc->n)));
  return out;
}

/// Static 3-d kd-tree over a point cloud. Queries return indices into the
/// cloud the tree was built from.
class KdTree {
 public:
  KdTree() = default;

  explicit KdTree(const PointCloud& cloud) : points_(cloud.size()) {
    for (size_t i = 0; i < cloud.size(); ++i) points_[i] = cloud[i].vec();
    indices_.resize(points_.size());
    std::iota(indices_.begin(), indices_.end(), 0u);
    if (!points_.empty()) {
      nodes_.reserve(points_.size());
      root_ = build(0, points_.size());
    }
  }

  size_t size() const { return points_.size(); }

  struct Hit {
    uint32_t index = 0;
    double sq_dist = std::numeric_limits<double>::infinity();
  };

  Hit nearest(const Vec3& q) const {
    Hit best;
    if (root_ >= 0) search_nearest(root_, q, best);
    return best;
  }

  /// Indices of all points within radius of q (unsorted).
  std::vector<uint32_t> radius(const Vec3& q, double r) const {
    std::vector<uint32_t> out;
    if (root_ >= 0) search_radius(root_, q, r * r, out);
    return out;
  }

  /// The k nearest points, sorted by distance. Ties break on point index so
  /// results do not depend on tree layout.
  std::vector<Hit> knn(const Vec3& q, size_t k) const {
    std::vector<Hit> heap;  // max-heap on (sq_dist, index)
    if (root_ >= 0 && k > 0) search_knn(root_, q, k, heap);
    std::sort(heap.begin(), heap.end(), hit_less);
    return heap;
  }

 private:
  struct Node {
    uint32_t begin, end;  // leaf: range in indices_
    int32_t left = -1, right = -1;
    uint8_t axis = 0;
    double split = 0;
  };

  static constexpr uint32_t kLeafSize = 16;

  int32_t build(size_t begin, size_t end) {
    Node node;
    node.begin = static_cast<uint32_t>(begin);
    node.end = static_cast<uint32_t>(end);
    if (end - begin > kLeafSize) {
      Vec3 lo = points_[indices_[begin]], hi = lo;
      for (size_t i = begin + 1; i < end; ++i) {
        lo = lo.cwiseMin(points_[indices_[i]]);
        hi = hi.cwiseMax(points_[indices_[i]]);
      }
      Vec3 extent = hi - lo;
      int axis = 0;
      extent.maxCoeff(&axis);
      const size_t mid = (begin + end) / 2;
      std::nth_element(indices_.begin() + begin, indices_.begin() + mid, indices_.begin() + end,
                       [&](uint32_t a, uint32_t b) { return points_[a][axis] < points_[b][axis]; });
      node.axis = static_cast<uint8_t>(axis);
      node.split = points_[indices_[mid]][axis];
      nodes_.push_back(node);
      const int32_t id = static_cast<int32_t>(nodes_.size() - 1);
      const int32_t l = build(begin, mid);
      const int32_t r = build(mid, end);
      nodes_[id].left = l;
      nodes_[id].right = r;
      return id;
    }
    nodes_.push_back(node);
    return static_cast<int32_t>(nodes_.size() - 1);
  }

  void search_nearest(int32_t id, const Vec3& q, Hit& best) const {
    const Node& node = nodes_[id];
    if (node.left < 0) {
      for (uint32_t i = node.begin; i < node.end; ++i) {
        const double d = (points_[indices_[i]] - q).squaredNorm();
        if (d < best.sq_dist) best = Hit{indices_[i], d};
      }
      return;
    }
    const double delta = q[node.axis] - node.split;
    const int32_t near = delta < 0 ? node.left : node.right;
    const int32_t far = delta < 0 ? node.right : node.left;
    search_nearest(near, q, best);
    if (delta * delta < best.sq_dist) search_nearest(far, q, best);
  }

  void search_radius(int32_t id, const Vec3& q, double r2, std::vector<uint32_t>& out) const {
    const Node& node = nodes_[id];
    if (node.left < 0) {
      for (uint32_t i = node.begin; i < node.end; ++i) {
        if ((points_[indices_[i]] - q).squaredNorm() <= r2) out.push_back(indices_[i]);
      }
      return;
    }
    const double delta = q[node.axis] - node.split;
    const int32_t near = delta < 0 ? node.left : node.right;
    const int32_t far = delta < 0 ? node.right : node.left;
    search_radius(near, q, r2, out);
    if (delta * delta <= r2) search_radius(far, q, r2, out);
  }

  static bool hit_less(const Hit& a, const Hit& b) {
    return a.sq_dist < b.sq_dist || (a.sq_dist == b.sq_dist && a.index < b.index);
  }

  void search_knn(int32_t id, const Vec3& q, size_t k, std::vector<Hit>& heap) const {
    const Node& node = nodes_[id];
    if (node.left < 0) {
      for (uint32_t i = node.begin; i < node.end; ++i) {
        const Hit cand{indices_[i], (points_[indices_[i]] - q).squaredNorm()};
        if (heap.size() < k) {
          heap.push_back(cand);
          std::push_heap(heap.begin(), heap.end(), hit_less);
        } else if (hit_less(cand, heap.front())) {
          std::pop_heap(heap.begin(), heap.end(), hit_less);
          heap.back() = cand;
          std::push_heap(heap.begin(), heap.end(), hit_less);
        }
      }
      return;
    }
    const double delta = q[node.axis] - node.split;
    const int32_t near = delta < 0 ? node.left : node.right;
    const int32_t far = delta < 0 ? node.right : node.left;
    search_knn(near, q, k, heap);
    if (heap.size() < k || delta * delta <= heap.front().sq_dist) search_knn(far, q, k, heap);
  }

  std::vector<Vec3> points_;
  std::vector<uint32_t> indices_;
  std::vector<Node> nodes_;
  int32_t root_ = -1;
};

}  // namespace mrslam
