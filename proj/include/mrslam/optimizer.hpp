#pragma once

#include <Eigen/Sparse>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "mrslam/pose_graph.hpp"

namespace mrslam {

// ---------------------------------------------------------------------------
// Residuals

/// r = log( inv(measurement) * between(pose_from, pose_to) ); Prior edges use
/// the absolute pose of `from` in place of the relative transform.
inline Twist edge_residual(const PoseMap& poses, const GraphEdge& e) {
  const Pose predicted = e.kind == EdgeKind::Prior
                             ? poses.at(e.from)
                             : se3_between(poses.at(e.from), poses.at(e.to));
  return se3_log(se3_compose(se3_inverse(e.measurement), predicted));
}

inline double edge_cost(const PoseMap& poses, const GraphEdge& e, double weight = 1.0) {
  const Twist r = edge_residual(poses, e);
  return weight * r.dot(e.information * r);
}

/// Jacobians of the residual w.r.t. the right-multiplied twist increments of
/// the `from` and `to` poses. Prior edges only involve `from` (second entry
/// zero).
inline std::pair<Mat6, Mat6> edge_jacobians(const PoseMap& poses, const GraphEdge& e) {
  const Twist r = edge_residual(poses, e);
  const Mat6 jr_inv = se3_right_jacobian_inverse(r);
  if (e.kind == EdgeKind::Prior) return {jr_inv, Mat6::Zero()};
  const Pose to_from = se3_between(poses.at(e.to), poses.at(e.from));
  return {-jr_inv * se3_adjoint(to_from), jr_inv};
}

inline double graph_cost(const PoseGraph& graph, const PoseMap& poses,
                         const std::vector<double>& weights) {
  double total = 0;
  for (size_t i = 0; i < graph.edges().size(); ++i)
    total += edge_cost(poses, graph.edges()[i], weights[i]);
  return total;
}

// ---------------------------------------------------------------------------
// Levenberg-Marquardt

struct LmParams {
  int max_iterations = 200;
  double rel_cost_tol = 1e-8;
  double step_tol = 1e-8;
  double lambda_init = 1e-6;
  int dense_node_threshold = 300;  // below this, solve dense for testability
};

struct OptimizationResult {
  PoseMap poses;
  std::map<size_t, double> loop_weights;  // graph edge index -> weight
  std::vector<size_t> inlier_edges;       // loop edge indices
  std::vector<size_t> outlier_edges;
  double final_cost = 0.0;
  int iterations = 0;
  std::vector<double> cost_history;  // cost after each accepted step
};

namespace detail {

struct NodeIndex {
  std::map<NodeKey, int> order;
  std::vector<NodeKey> keys;
};

inline NodeIndex index_nodes(const PoseGraph& graph) {
  NodeIndex idx;
  for (const auto& [k, n] : graph.nodes()) {
    idx.order[k] = static_cast<int>(idx.keys.size());
    idx.keys.push_back(k);
  }
  return idx;
}

/// Every connected component must contain a prior, otherwise the normal
/// equations are singular; report the offending component by one of its nodes.
inline void check_gauge(const PoseGraph& graph) {
  const auto comps = graph.connected_components();
  std::set<int> anchored;
  for (const GraphEdge& e : graph.edges()) {
    if (e.kind == EdgeKind::Prior) anchored.insert(comps.at(e.from));
  }
  for (const auto& [key, label] : comps) {
    if (!anchored.count(label)) {
      throw GraphError("graph under-constrained: connected component containing node " +
                       key.str() + " has no prior");
    }
  }
}

inline PoseMap retract(const PoseMap& poses, const NodeIndex& idx, const Eigen::VectorXd& delta) {
  PoseMap out = poses;
  for (const auto& [key, i] : idx.order) {
    out[key] = se3_compose(out[key], se3_exp(delta.segment<6>(6 * i)));
  }
  return out;
}

}  // namespace detail

/// Levenberg-Marquardt over all node poses with exp-map retraction. Loop
/// edges can carry weights in [0,1] (the GNC hook); odometry and prior edges
/// always keep weight 1. `warm_start` overrides the graph's stored estimates.
inline OptimizationResult optimize_lm(const PoseGraph& graph,
                                      std::optional<std::vector<double>> edge_weights = {},
                                      const LmParams& params = {},
                                      std::optional<PoseMap> warm_start = {}) {
  detail::check_gauge(graph);
  const detail::NodeIndex idx = detail::index_nodes(graph);
  const int n = static_cast<int>(idx.keys.size());
  const auto& edges = graph.edges();

  std::vector<double> weights(edges.size(), 1.0);
  if (edge_weights) {
    if (edge_weights->size() != edges.size())
      throw GraphError("weight vector size mismatch");
    weights = *edge_weights;
  }

  PoseMap poses;
  if (warm_start) {
    poses = *warm_start;
  } else {
    for (const auto& [k, node] : graph.nodes()) poses[k] = node.pose;
  }

  OptimizationResult result;
  double cost = graph_cost(graph, poses, weights);
  result.cost_history.push_back(cost);
  double lambda = params.lambda_init;

  const bool dense = n < params.dense_node_threshold;
  for (int iter = 0; iter < params.max_iterations; ++iter) {
    // assemble the normal equations
    Eigen::VectorXd g = Eigen::VectorXd::Zero(6 * n);
    std::vector<Eigen::Triplet<double>> triplets;
    Eigen::MatrixXd H_dense;
    if (dense) H_dense = Eigen::MatrixXd::Zero(6 * n, 6 * n);

    auto add_block = [&](int bi, int bj, const Mat6& m) {
      if (dense) {
        H_dense.block<6, 6>(6 * bi, 6 * bj) += m;
      } else {
        for (int r = 0; r < 6; ++r)
          for (int c = 0; c < 6; ++c)
            if (m(r, c) != 0.0) triplets.emplace_back(6 * bi + r, 6 * bj + c, m(r, c));
      }
    };

    for (size_t k = 0; k < edges.size(); ++k) {
      const GraphEdge& e = edges[k];
      if (weights[k] <= 0.0) continue;
      const Twist r = edge_residual(poses, e);
      const auto [Jf, Jt] = edge_jacobians(poses, e);
      const Mat6 W = weights[k] * e.information;
      const int fi = idx.order.at(e.from);
      add_block(fi, fi, Jf.transpose() * W * Jf);
      g.segment<6>(6 * fi) += Jf.transpose() * W * r;
      if (e.kind != EdgeKind::Prior) {
        const int ti = idx.order.at(e.to);
        add_block(ti, ti, Jt.transpose() * W * Jt);
        add_block(fi, ti, Jf.transpose() * W * Jt);
        add_block(ti, fi, Jt.transpose() * W * Jf);
        g.segment<6>(6 * ti) += Jt.transpose() * W * r;
      }
    }

    Eigen::SparseMatrix<double> H_sparse;
    if (!dense) {
      H_sparse.resize(6 * n, 6 * n);
      H_sparse.setFromTriplets(triplets.begin(), triplets.end());
    }

    bool accepted = false;
    double rel_change = 0.0;
    Eigen::VectorXd delta;
    for (int attempt = 0; attempt < 24 && !accepted; ++attempt) {
      if (dense) {
        Eigen::MatrixXd damped = H_dense;
        for (int d = 0; d < 6 * n; ++d)
          damped(d, d) += lambda * std::max(H_dense(d, d), 1e-9);
        delta = damped.ldlt().solve(-g);
      } else {
        Eigen::SparseMatrix<double> damped = H_sparse;
        for (int d = 0; d < 6 * n; ++d)
          damped.coeffRef(d, d) += lambda * std::max(H_sparse.coeff(d, d), 1e-9);
        Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(damped);
        if (solver.info() != Eigen::Success) {
          lambda *= 10;
          continue;
        }
        delta = solver.solve(-g);
      }
      if (!delta.allFinite()) {
        lambda *= 10;
        continue;
      }
      const PoseMap trial = detail::retract(poses, idx, delta);
      const double trial_cost = graph_cost(graph, trial, weights);
      if (trial_cost <= cost) {
        rel_change = (cost - trial_cost) / std::max(cost, 1e-300);
        poses = trial;
        cost = trial_cost;
        result.cost_history.push_back(cost);
        lambda = std::max(lambda * 0.25, 1e-12);
        accepted = true;
      } else {
        lambda *= 4;
      }
    }
    result.iterations = iter + 1;
    if (!accepted) break;
    if (delta.norm() < params.step_tol || rel_change < params.rel_cost_tol) break;
  }

  result.poses = std::move(poses);
  result.final_cost = cost;
  for (size_t k = 0; k < edges.size(); ++k) {
    if (edges[k].kind == EdgeKind::LoopClosure) {
      result.loop_weights[k] = weights[k];
      (weights[k] >= 0.5 ? result.inlier_edges : result.outlier_edges).push_back(k);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Graduated non-convexity (Geman-McClure)

struct GncParams {
  double barc = 4.450241831501924;  // sqrt of the chi-square 0.997 quantile, 6 dof
  double mu_update_factor = 1.4;
  int max_outer_iterations = 100;
  double weight_inlier_cutoff = 0.5;
  LmParams lm;
};

/// GNC with Geman-McClure weights wrapped around LM. Only loop-closure edges
/// are re-weighted; odometry and priors always count in full. With no loop
/// edges this reduces to plain optimize_lm.
inline OptimizationResult optimize_gnc(const PoseGraph& graph, const GncParams& params = {}) {
  const auto& edges = graph.edges();
  std::vector<size_t> loops;
  for (size_t k = 0; k < edges.size(); ++k)
    if (edges[k].kind == EdgeKind::LoopClosure) loops.push_back(k);

  std::vector<double> weights(edges.size(), 1.0);
  OptimizationResult lm = optimize_lm(graph, weights, params.lm);
  if (loops.empty()) return lm;

  auto mahalanobis2 = [&](const PoseMap& poses, size_t k) {
    const Twist r = edge_residual(poses, edges[k]);
    return r.dot(edges[k].information * r);
  };

  const double barc2 = params.barc * params.barc;
  double r2_max = 0.0;
  for (size_t k : loops) r2_max = std::max(r2_max, mahalanobis2(lm.poses, k));
  double mu = 2.0 * r2_max / barc2;

  int outer = 0;
  if (mu > 1.0) {
    for (; outer < params.max_outer_iterations; ++outer) {
      lm = optimize_lm(graph, weights, params.lm, lm.poses);
      double max_change = 0.0;
      for (size_t k : loops) {
        const double r2 = mahalanobis2(lm.poses, k);
        const double w = std::pow(mu * barc2 / (r2 + mu * barc2), 2.0);
        max_change = std::max(max_change, std::abs(w - weights[k]));
        weights[k] = w;
      }
      mu /= params.mu_update_factor;
      if (mu <= 1.0 || max_change < 1e-6) break;
    }
    lm = optimize_lm(graph, weights, params.lm, lm.poses);
  }

  OptimizationResult result = std::move(lm);
  result.iterations = outer + 1;
  result.loop_weights.clear();
  result.inlier_edges.clear();
  result.outlier_edges.clear();
  for (size_t k : loops) {
    result.loop_weights[k] = weights[k];
    (weights[k] >= params.weight_inlier_cutoff ? result.inlier_edges : result.outlier_edges)
        .push_back(k);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Incremental consistency maximization

struct IcmResult {
  std::vector<size_t> accepted;     // indices into the candidate list
  std::vector<size_t> rejected;
  std::vector<size_t> provisional;  // accepted with no applicable check
};

namespace detail {

struct PoseWithCov {
  Pose pose;
  Mat6 cov = Mat6::Zero();
};

inline PoseWithCov compose_pc(const PoseWithCov& a, const Pose& b, const Mat6& cov_b) {
  const Mat6 adj = se3_adjoint(se3_inverse(b));
  return {se3_compose(a.pose, b), adj * a.cov * adj.transpose() + cov_b};
}

inline PoseWithCov invert_pc(const PoseWithCov& x) {
  const Mat6 adj = se3_adjoint(x.pose);
  return {se3_inverse(x.pose), adj * x.cov * adj.transpose()};
}

/// Odometry edges indexed by (robot, from-index) for chain composition.
struct OdometryIndex {
  std::map<NodeKey, const GraphEdge*> forward;

  explicit OdometryIndex(const PoseGraph& graph) {
    for (const GraphEdge& e : graph.edges()) {
      if (e.kind == EdgeKind::Odometry) forward[e.from] = &e;
    }
  }
};

/// Composes odometry measurements of one robot from node i to node j.
inline std::optional<PoseWithCov> odometry_chain(const OdometryIndex& index, uint16_t robot,
                                                 uint32_t i, uint32_t j) {
  PoseWithCov acc;
  const uint32_t lo = std::min(i, j), hi = std::max(i, j);
  for (uint32_t k = lo; k < hi; ++k) {
    auto it = index.forward.find(NodeKey{robot, k});
    if (it == index.forward.end()) return std::nullopt;
    const Mat6 cov = it->second->information.ldlt().solve(Mat6::Identity());
    acc = compose_pc(acc, it->second->measurement, cov);
  }
  return i <= j ? acc : invert_pc(acc);
}

inline double cycle_mahalanobis(const PoseWithCov& cycle) {
  const Twist e = se3_log(cycle.pose);
  const Mat6 cov = cycle.cov + 1e-12 * Mat6::Identity();
  return std::sqrt(e.dot(cov.ldlt().solve(e)));
}

}  // namespace detail

/// Incremental consistency filter: a candidate loop is kept when the cycle it
/// forms with the odometry between its endpoints closes within the threshold,
/// and when it agrees pairwise with every already-accepted loop on the same
/// robot pair. Candidates with no applicable check pass provisionally.
inline IcmResult icm_filter(const PoseGraph& graph, const std::vector<GraphEdge>& candidates,
                            double threshold = 4.450241831501924,
                            std::vector<GraphEdge>* running_accepted = nullptr) {
  IcmResult result;
  std::vector<GraphEdge> accepted_edges;
  if (running_accepted) accepted_edges = *running_accepted;
  const detail::OdometryIndex odom_index(graph);

  auto loop_cov = [](const GraphEdge& e) {
    return Mat6(e.information.ldlt().solve(Mat6::Identity()));
  };

  for (size_t idx = 0; idx < candidates.size(); ++idx) {
    const GraphEdge& l = candidates[idx];
    bool checked = false;
    bool ok = true;

    if (l.from.robot == l.to.robot) {
      const auto chain = detail::odometry_chain(odom_index, l.from.robot, l.from.index, l.to.index);
      if (chain) {
        checked = true;
        // cycle: measurement^{-1} o odometry(from->to)
        detail::PoseWithCov cyc{se3_inverse(l.measurement), loop_cov(l)};
        cyc = detail::compose_pc(cyc, chain->pose, chain->cov);
        ok = detail::cycle_mahalanobis(cyc) <= threshold;
      }
    }

    for (const GraphEdge& other : accepted_edges) {
      if (!ok) break;
      // same unordered robot pair, matching orientation from->to
      const GraphEdge* o = &other;
      GraphEdge flipped;
      if (other.from.robot == l.to.robot && other.to.robot == l.from.robot &&
          l.from.robot != l.to.robot) {
        flipped = other;
        flipped.from = other.to;
        flipped.to = other.from;
        flipped.measurement = se3_inverse(other.measurement);
        const Mat6 adj = se3_adjoint(other.measurement);
        const Mat6 cov = loop_cov(other);
        flipped.information = (adj * cov * adj.transpose()).ldlt().solve(Mat6::Identity());
        o = &flipped;
      } else if (!(other.from.robot == l.from.robot && other.to.robot == l.to.robot)) {
        continue;
      }
      const auto chain_a =
          detail::odometry_chain(odom_index, l.from.robot, o->from.index, l.from.index);
      const auto chain_b = detail::odometry_chain(odom_index, l.to.robot, l.to.index, o->to.index);
      if (!chain_a || !chain_b) continue;
      checked = true;
      // cycle: l o odomB(l.to -> o.to) o o^{-1} o odomA(o.from -> l.from)
      detail::PoseWithCov cyc{l.measurement, loop_cov(l)};
      cyc = detail::compose_pc(cyc, chain_b->pose, chain_b->cov);
      const detail::PoseWithCov o_inv =
          detail::invert_pc(detail::PoseWithCov{o->measurement, loop_cov(*o)});
      cyc = detail::compose_pc(cyc, o_inv.pose, o_inv.cov);
      cyc = detail::compose_pc(cyc, chain_a->pose, chain_a->cov);
      ok = detail::cycle_mahalanobis(cyc) <= threshold;
    }

    if (!ok) {
      result.rejected.push_back(idx);
      continue;
    }
    result.accepted.push_back(idx);
    if (!checked) result.provisional.push_back(idx);
    accepted_edges.push_back(l);
  }
  if (running_accepted) *running_accepted = accepted_edges;
  return result;
}

// ---------------------------------------------------------------------------
// Map assembly

struct MapAssembly {
  PointCloud map;
  int skipped_scans = 0;
};

/// Union of all keyed scans transformed into the world frame by the optimized
/// trajectory, voxel-downsampled at a fixed leaf.
inline MapAssembly assemble_map(const PoseMap& poses,
                                const std::map<NodeKey, KeyedScan>& scans, double voxel) {
  MapAssembly out;
  PointCloud merged;
  for (const auto& [key, scan] : scans) {
    auto it = poses.find(key);
    if (it == poses.end()) {
      ++out.skipped_scans;
      continue;
    }
    const PointCloud world = transform_cloud(scan.cloud, it->second);
    merged.insert(merged.end(), world.begin(), world.end());
  }
  out.map = voxel_downsample(merged, voxel);
  return out;
}

}  // namespace mrslam
