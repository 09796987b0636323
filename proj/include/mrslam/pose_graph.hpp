#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mrslam/geometry.hpp"
#include "mrslam/point_cloud.hpp"

namespace mrslam {

struct NodeKey {
  uint16_t robot = 0;
  uint32_t index = 0;

  auto operator<=>(const NodeKey&) const = default;

  std::string str() const {
    return "(" + std::to_string(robot) + "," + std::to_string(index) + ")";
  }
};

using PoseMap = std::map<NodeKey, Pose>;

struct GraphNode {
  NodeKey key;
  Pose pose;                       // current estimate, world frame
  double odometric_distance = 0.0; // meters traversed from robot start
};

enum class EdgeKind : uint8_t { Odometry, LoopClosure, Prior };

struct GraphEdge {
  NodeKey from;
  NodeKey to;  // ignored for Prior
  EdgeKind kind = EdgeKind::Odometry;
  Pose measurement;  // relative from->to; absolute pose of `from` for Prior
  Mat6 information = Mat6::Identity();  // (rot, trans) twist ordering
};

struct KeyedScan {
  NodeKey key;
  PointCloud cloud;  // body frame of the node
};

struct GraphError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct GapError : GraphError {
  NodeKey expected;
  explicit GapError(NodeKey exp)
      : GraphError("index gap: expected next node " + exp.str()), expected(exp) {}
};
struct ConflictError : GraphError {
  using GraphError::GraphError;
};

inline bool pose_exactly_equal(const Pose& a, const Pose& b) {
  return a.rotation.coeffs() == b.rotation.coeffs() && a.translation == b.translation;
}

/// Keyed nodes per robot plus odometry / loop-closure / prior edges.
class PoseGraph {
 public:
  const std::map<NodeKey, GraphNode>& nodes() const { return nodes_; }
  const std::vector<GraphEdge>& edges() const { return edges_; }

  bool empty() const { return nodes_.empty(); }
  bool has_node(NodeKey k) const { return nodes_.count(k) > 0; }

  const GraphNode& node(NodeKey k) const {
    auto it = nodes_.find(k);
    if (it == nodes_.end()) throw GraphError("unknown node " + k.str());
    return it->second;
  }

  void set_pose(NodeKey k, const Pose& p) {
    auto it = nodes_.find(k);
    if (it == nodes_.end()) throw GraphError("unknown node " + k.str());
    it->second.pose = p;
  }

  void add_node(const GraphNode& n) {
    if (!nodes_.emplace(n.key, n).second)
      throw ConflictError("duplicate node " + n.key.str());
  }

  void add_edge(const GraphEdge& e) {
    if (!nodes_.count(e.from)) throw GraphError("edge endpoint missing: " + e.from.str());
    if (e.kind != EdgeKind::Prior && !nodes_.count(e.to))
      throw GraphError("edge endpoint missing: " + e.to.str());
    edges_.push_back(e);
  }

  /// Highest node index present for a robot.
  std::optional<uint32_t> last_index(uint16_t robot) const {
    auto it = nodes_.lower_bound(NodeKey{robot, 0});
    if (it == nodes_.end() || it->first.robot != robot) return std::nullopt;
    auto next = nodes_.lower_bound(NodeKey{static_cast<uint16_t>(robot + 1), 0});
    --next;
    return next->first.index;
  }

  std::vector<uint16_t> robots() const {
    std::vector<uint16_t> out;
    for (const auto& [k, n] : nodes_) {
      if (out.empty() || out.back() != k.robot) out.push_back(k.robot);
    }
    return out;
  }

  /// Connected-component label per node (union over all edge kinds).
  std::map<NodeKey, int> connected_components() const;

  /// Structural validation: endpoints exist, odometry chains are gapless,
  /// information matrices symmetric and positive-definite, and every
  /// connected component carries at least one prior to fix the gauge.
  void validate() const;

 private:
  std::map<NodeKey, GraphNode> nodes_;
  std::vector<GraphEdge> edges_;
};

namespace detail {

class UnionFind {
 public:
  explicit UnionFind(size_t n) : parent_(n) {
    for (size_t i = 0; i < n; ++i) parent_[i] = i;
  }
  size_t find(size_t x) {
    while (parent_[x] != x) x = parent_[x] = parent_[parent_[x]];
    return x;
  }
  void unite(size_t a, size_t b) { parent_[find(a)] = find(b); }

 private:
  std::vector<size_t> parent_;
};

}  // namespace detail

inline std::map<NodeKey, int> PoseGraph::connected_components() const {
  std::map<NodeKey, size_t> order;
  size_t n = 0;
  for (const auto& [k, node] : nodes_) order[k] = n++;
  detail::UnionFind uf(n);
  for (const GraphEdge& e : edges_) {
    if (e.kind == EdgeKind::Prior) continue;
    uf.unite(order.at(e.from), order.at(e.to));
  }
  std::map<size_t, int> labels;
  std::map<NodeKey, int> out;
  for (const auto& [k, idx] : order) {
    const size_t root = uf.find(idx);
    auto [it, inserted] = labels.emplace(root, static_cast<int>(labels.size()));
    out[k] = it->second;
  }
  return out;
}

inline void PoseGraph::validate() const {
  for (const GraphEdge& e : edges_) {
    if (!nodes_.count(e.from)) throw GraphError("edge endpoint missing: " + e.from.str());
    if (e.kind != EdgeKind::Prior && !nodes_.count(e.to))
      throw GraphError("edge endpoint missing: " + e.to.str());
    if (e.kind == EdgeKind::Odometry) {
      if (e.from.robot != e.to.robot || e.to.index != e.from.index + 1)
        throw GraphError("odometry edge must join consecutive nodes of one robot: " +
                         e.from.str() + "->" + e.to.str());
    }
    const Mat6 sym_err = e.information - e.information.transpose();
    if (sym_err.cwiseAbs().maxCoeff() > 1e-9)
      throw GraphError("information matrix not symmetric on edge " + e.from.str());
    Eigen::SelfAdjointEigenSolver<Mat6> eig(e.information);
    if (eig.eigenvalues().minCoeff() <= 0.0)
      throw GraphError("information matrix not positive-definite on edge " + e.from.str());
  }
  // gapless odometry chain per robot
  uint16_t cur_robot = 0;
  uint32_t expect = 0;
  bool first = true;
  for (const auto& [k, node] : nodes_) {
    if (first || k.robot != cur_robot) {
      cur_robot = k.robot;
      expect = 0;
      first = false;
      if (k.index != 0) throw GraphError("robot chain must start at index 0: " + k.str());
    } else if (k.index != expect) {
      throw GapError(NodeKey{cur_robot, expect});
    }
    expect = k.index + 1;
  }
  // gauge: at least one prior per connected component
  const auto comps = connected_components();
  std::set<int> with_prior;
  for (const GraphEdge& e : edges_) {
    if (e.kind == EdgeKind::Prior) with_prior.insert(comps.at(e.from));
  }
  for (const auto& [k, label] : comps) {
    if (!with_prior.count(label))
      throw GraphError("connected component of node " + k.str() + " has no prior");
  }
}

/// Merges a pose-graph segment into `graph`. New node indices must continue
/// the robot's chain; re-delivered content is ignored when it matches what is
/// already stored. New node poses are initialized by chaining odometry
/// measurements off the last stored estimate so the merged trajectory stays
/// continuous across batches even after optimization moved earlier nodes.
inline void merge_segment(PoseGraph& graph, const PoseGraph& segment) {
  // A segment node is an introduction when the segment itself explains it:
  // an incoming odometry edge, an attached prior, or a chain start. Anything
  // else is a back-reference (batch anchor) and must already be known.
  std::set<NodeKey> introduced;
  for (const GraphEdge& e : segment.edges()) {
    if (e.kind == EdgeKind::Odometry) introduced.insert(e.to);
    if (e.kind == EdgeKind::Prior) introduced.insert(e.from);
  }
  std::map<uint16_t, uint32_t> first_new;
  for (const auto& [k, node] : segment.nodes()) {
    if (k.index == 0) introduced.insert(k);
    if (graph.has_node(k)) {
      continue;  // duplicate; content checked below
    }
    const auto last = graph.last_index(k.robot);
    const uint32_t expected = last ? *last + 1 : 0;
    if (!introduced.count(k)) throw GapError(NodeKey{k.robot, expected});
    auto it = first_new.find(k.robot);
    if (it == first_new.end() || k.index < it->second) first_new[k.robot] = k.index;
  }
  for (const auto& [robot, idx] : first_new) {
    const auto last = graph.last_index(robot);
    const uint32_t expected = last ? *last + 1 : 0;
    if (idx != expected) throw GapError(NodeKey{robot, expected});
  }

  // odometry measurements keyed by destination, for pose chaining
  std::map<NodeKey, const GraphEdge*> incoming;
  for (const GraphEdge& e : segment.edges()) {
    if (e.kind == EdgeKind::Odometry) incoming[e.to] = &e;
  }

  auto edge_exists = [&](const GraphEdge& e) -> bool {
    for (const GraphEdge& g : graph.edges()) {
      if (g.kind == e.kind && g.from == e.from && g.to == e.to) {
        if (!pose_exactly_equal(g.measurement, e.measurement) || g.information != e.information)
          throw ConflictError("conflicting duplicate edge " + e.from.str() + "->" + e.to.str());
        return true;
      }
    }
    return false;
  };

  for (const auto& [k, node] : segment.nodes()) {
    if (graph.has_node(k)) {
      // pose may have been re-estimated since, but the traversed distance is
      // intrinsic to the stream and must agree on redelivery
      if (graph.node(k).odometric_distance != node.odometric_distance)
        throw ConflictError("conflicting duplicate node " + k.str());
      continue;
    }
    GraphNode fresh = node;
    auto in = incoming.find(k);
    if (in != incoming.end() && graph.has_node(in->second->from)) {
      fresh.pose = se3_compose(graph.node(in->second->from).pose, in->second->measurement);
    }
    graph.add_node(fresh);
  }
  for (const GraphEdge& e : segment.edges()) {
    if (!edge_exists(e)) graph.add_edge(e);
  }
}

}  // namespace mrslam
