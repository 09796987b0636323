#pragma once

#include <functional>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "mrslam/pose_graph.hpp"
#include "mrslam/registration.hpp"

namespace mrslam {

enum class CandidateKind : uint8_t { IntraRobot, InterRobot };

struct LoopCandidate {
  NodeKey key_a;  // the newer node when produced by generation
  NodeKey key_b;
  CandidateKind kind = CandidateKind::IntraRobot;
  double euclidean_gap = 0.0;  // between current pose estimates, m
  double priority = 0.0;
};

struct GenerationConfig {
  double alpha = 0.2;  // adaptive-radius gain, m per node index
  uint32_t min_index_separation = 20;
};

/// Adaptive-radius candidate generation for a newly added node. The search
/// radius grows with traversal: |n_curr - n_cand| indices for same-robot
/// pairs, n_curr alone for cross-robot pairs, scaled by alpha. Same-robot
/// pairs closer than min_index_separation along the chain are suppressed.
inline std::vector<LoopCandidate> generate_candidates(const PoseGraph& graph, NodeKey new_node,
                                                      const GenerationConfig& cfg) {
  std::vector<LoopCandidate> out;
  const GraphNode& current = graph.node(new_node);
  for (const auto& [key, node] : graph.nodes()) {
    if (key == new_node) continue;
    const double gap = (node.pose.translation - current.pose.translation).norm();
    if (key.robot == new_node.robot) {
      const uint32_t sep = key.index > new_node.index ? key.index - new_node.index
                                                      : new_node.index - key.index;
      if (sep < cfg.min_index_separation) continue;
      if (gap > cfg.alpha * static_cast<double>(sep)) continue;
      out.push_back(LoopCandidate{new_node, key, CandidateKind::IntraRobot, gap, 0.0});
    } else {
      if (gap > cfg.alpha * static_cast<double>(new_node.index)) continue;
      out.push_back(LoopCandidate{new_node, key, CandidateKind::InterRobot, gap, 0.0});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prioritization

/// Keyed-scan store with cached per-scan observability scores.
class ScanStore {
 public:
  void insert(KeyedScan scan) { scans_[scan.key] = std::move(scan); }

  bool has(NodeKey key) const { return scans_.count(key) > 0; }

  const KeyedScan* find(NodeKey key) const {
    auto it = scans_.find(key);
    return it == scans_.end() ? nullptr : &it->second;
  }

  const std::map<NodeKey, KeyedScan>& all() const { return scans_; }

  double observability(NodeKey key) const {
    auto cached = scores_.find(key);
    if (cached != scores_.end()) return cached->second;
    auto it = scans_.find(key);
    const double score = it == scans_.end() ? 0.0 : observability_score(it->second.cloud);
    scores_[key] = score;
    return score;
  }

 private:
  std::map<NodeKey, KeyedScan> scans_;
  mutable std::map<NodeKey, double> scores_;
};

enum class PrioritizerKind : uint8_t { Observability, QueueOrder };

/// Pluggable candidate scorer: higher scores register first. Returns nullopt
/// to drop a candidate (e.g. missing scan).
using CandidateScorer = std::function<std::optional<double>(const LoopCandidate&)>;

inline CandidateScorer make_observability_scorer(const ScanStore& scans) {
  return [&scans](const LoopCandidate& c) -> std::optional<double> {
    if (!scans.has(c.key_a) || !scans.has(c.key_b)) return std::nullopt;
    return std::min(scans.observability(c.key_a), scans.observability(c.key_b));
  };
}

struct PrioritizeResult {
  std::vector<LoopCandidate> ordered;  // truncated to budget
  int dropped_missing_scan = 0;
};

/// Scores candidates (min of the two scans' observability by default), sorts
/// by descending score with gap and key order as tie-breaks, and truncates to
/// the budget. Queue-order mode keeps the input order and only truncates.
inline PrioritizeResult prioritize(const std::vector<LoopCandidate>& candidates,
                                   const ScanStore& scans, size_t budget,
                                   PrioritizerKind kind = PrioritizerKind::Observability) {
  PrioritizeResult result;
  CandidateScorer scorer;
  if (kind == PrioritizerKind::Observability) scorer = make_observability_scorer(scans);
  for (const LoopCandidate& c : candidates) {
    LoopCandidate scored = c;
    if (scorer) {
      const auto s = scorer(c);
      if (!s) {
        ++result.dropped_missing_scan;
        continue;
      }
      scored.priority = *s;
    }
    result.ordered.push_back(scored);
  }
  if (kind == PrioritizerKind::Observability) {
    std::stable_sort(result.ordered.begin(), result.ordered.end(),
                     [](const LoopCandidate& a, const LoopCandidate& b) {
                       if (a.priority != b.priority) return a.priority > b.priority;
                       if (a.euclidean_gap != b.euclidean_gap)
                         return a.euclidean_gap < b.euclidean_gap;
                       return std::tie(a.key_a, a.key_b) < std::tie(b.key_a, b.key_b);
                     });
  }
  if (result.ordered.size() > budget) result.ordered.resize(budget);
  return result;
}

// ---------------------------------------------------------------------------
// Computation

enum class Initializer : uint8_t { Odometric, SampleConsensus };

struct LoopEdgeCandidateResult {
  LoopCandidate candidate;
  RegistrationResult stage1;  // initial alignment (odometric seed is marked skipped)
  bool stage1_skipped = false;
  RegistrationResult stage2;  // ICP refinement
  bool accepted = false;
  std::optional<GraphEdge> edge;  // present when accepted
};

struct ComputationConfig {
  AlignmentParams alignment;
  Initializer initializer = Initializer::SampleConsensus;
  double loop_info_translation_weight = 100.0;  // matches odometry translation
};

/// Scales the ICP information matrix so its largest eigenvalue matches the
/// configured odometry translation weight, with a PSD floor.
inline Mat6 scale_loop_information(const Mat6& icp_information, double target_weight) {
  Eigen::SelfAdjointEigenSolver<Mat6> eig(icp_information);
  const double lmax = eig.eigenvalues().maxCoeff();
  Mat6 scaled = lmax > 1e-12 ? Mat6(icp_information * (target_weight / lmax))
                             : Mat6(Mat6::Identity() * target_weight);
  // clamp tiny negative directions from numerical noise
  Eigen::SelfAdjointEigenSolver<Mat6> eig2(scaled);
  Vec6 vals = eig2.eigenvalues();
  for (int i = 0; i < 6; ++i) vals(i) = std::max(vals(i), 1e-6 * target_weight);
  return eig2.eigenvectors() * vals.asDiagonal() * eig2.eigenvectors().transpose();
}

/// Two-stage relative-pose computation for one candidate: a coarse initial
/// alignment (sample consensus, or the current odometric estimate for the
/// baseline mode) followed by point-to-plane ICP. Acceptance requires the
/// stage-1 consensus error under its threshold (when run) and the stage-2
/// fitness under the ICP threshold. Never throws.
inline LoopEdgeCandidateResult compute_loop_closure(const LoopCandidate& candidate,
                                                    const ScanStore& scans,
                                                    const PoseMap& estimates,
                                                    const ComputationConfig& cfg) {
  LoopEdgeCandidateResult result;
  result.candidate = candidate;
  const KeyedScan* scan_a = scans.find(candidate.key_a);
  const KeyedScan* scan_b = scans.find(candidate.key_b);
  if (scan_a == nullptr || scan_b == nullptr) {
    result.stage1 = RegistrationResult::failure("missing keyed scan");
    result.stage2 = result.stage1;
    return result;
  }
  // transform maps points of b into a's frame: source = b, target = a
  const PointCloud& source = scan_b->cloud;
  const PointCloud& target = scan_a->cloud;

  AlignmentParams params = cfg.alignment;
  // deterministic consensus draws per candidate pair
  params.seed = derive_seed(params.seed, (static_cast<uint64_t>(candidate.key_a.robot) << 48) ^
                                             (static_cast<uint64_t>(candidate.key_a.index) << 24) ^
                                             (static_cast<uint64_t>(candidate.key_b.robot) << 16) ^
                                             candidate.key_b.index);

  Pose init;
  bool stage1_ok = true;
  if (cfg.initializer == Initializer::SampleConsensus) {
    result.stage1 = initial_alignment(source, target, params);
    stage1_ok = result.stage1.success;
    init = result.stage1.transform;
  } else {
    result.stage1_skipped = true;
    auto ia = estimates.find(candidate.key_a);
    auto ib = estimates.find(candidate.key_b);
    if (ia == estimates.end() || ib == estimates.end()) {
      result.stage1 = RegistrationResult::failure("no pose estimate for odometric init");
      result.stage2 = result.stage1;
      return result;
    }
    init = se3_between(ia->second, ib->second);
    result.stage1.success = true;
    result.stage1.transform = init;
  }

  if (stage1_ok) {
    result.stage2 = icp_point_to_plane(source, target, init, params);
    result.accepted = result.stage2.success &&
                      result.stage2.fitness_error <= params.icp_error_threshold &&
                      result.stage2.inlier_count >= params.min_inliers;
  } else {
    result.stage2 = RegistrationResult::failure("stage 1 rejected");
  }

  if (result.accepted) {
    GraphEdge e;
    e.kind = EdgeKind::LoopClosure;
    e.from = candidate.key_a;
    e.to = candidate.key_b;
    e.measurement = result.stage2.transform;
    e.information =
        scale_loop_information(result.stage2.information, cfg.loop_info_translation_weight);
    result.edge = e;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Frontend orchestration

struct FrontendCounters {
  int generated = 0;
  int computed = 0;
  int verified = 0;  // accepted by the two-stage pipeline
  int dropped_missing_scan = 0;
};

struct LoopFrontendConfig {
  GenerationConfig generation;
  ComputationConfig computation;
  PrioritizerKind prioritizer = PrioritizerKind::Observability;
  int per_tick_budget = 5;
};

/// Pending-queue state of the multi-robot loop-closure front-end.
struct LoopFrontendState {
  std::vector<LoopCandidate> pending;
  std::set<std::pair<NodeKey, NodeKey>> seen;
  FrontendCounters counters;
};

/// One front-end tick for a newly keyed node: generate candidates against the
/// current graph, fold them into the pending queue, prioritize the queue, and
/// compute up to the per-tick budget. The remainder stays queued.
inline std::vector<LoopEdgeCandidateResult> frontend_tick(LoopFrontendState& state,
                                                          const PoseGraph& graph,
                                                          const ScanStore& scans,
                                                          NodeKey new_node,
                                                          const LoopFrontendConfig& cfg) {
  for (LoopCandidate& c : generate_candidates(graph, new_node, cfg.generation)) {
    auto pair = std::minmax(c.key_a, c.key_b);
    if (!state.seen.insert({pair.first, pair.second}).second) continue;
    state.counters.generated += 1;
    state.pending.push_back(std::move(c));
  }

  // refresh gaps from the latest estimates before ranking
  for (LoopCandidate& c : state.pending) {
    if (graph.has_node(c.key_a) && graph.has_node(c.key_b)) {
      c.euclidean_gap =
          (graph.node(c.key_a).pose.translation - graph.node(c.key_b).pose.translation).norm();
    }
  }

  PrioritizeResult ranked = prioritize(state.pending, scans, state.pending.size(),
                                       cfg.prioritizer);
  state.counters.dropped_missing_scan += ranked.dropped_missing_scan;

  const size_t batch = std::min<size_t>(cfg.per_tick_budget, ranked.ordered.size());
  std::vector<LoopEdgeCandidateResult> results;
  PoseMap estimates;
  for (const auto& [k, n] : graph.nodes()) estimates[k] = n.pose;
  for (size_t i = 0; i < batch; ++i) {
    results.push_back(
        compute_loop_closure(ranked.ordered[i], scans, estimates, cfg.computation));
    state.counters.computed += 1;
    state.counters.verified += results.back().accepted ? 1 : 0;
  }
  state.pending.assign(ranked.ordered.begin() + static_cast<long>(batch),
                       ranked.ordered.end());
  return results;
}

}  // namespace mrslam
