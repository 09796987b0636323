#pragma once

#include <atomic>
#include <mutex>
#include <thread>

#include "mrslam/frontend.hpp"
#include "mrslam/loop_closure.hpp"
#include "mrslam/metrics.hpp"
#include "mrslam/optimizer.hpp"
#include "mrslam/wire.hpp"

namespace mrslam {

enum class OutlierMode : uint8_t { None, Icm, Gnc, IcmGnc };

inline const char* outlier_mode_name(OutlierMode m) {
  switch (m) {
    case OutlierMode::None: return "none";
    case OutlierMode::Icm: return "icm";
    case OutlierMode::Gnc: return "gnc";
    case OutlierMode::IcmGnc: return "icm+gnc";
  }
  return "?";
}

inline std::optional<OutlierMode> outlier_mode_from_name(const std::string& name) {
  for (OutlierMode m : {OutlierMode::None, OutlierMode::Icm, OutlierMode::Gnc,
                        OutlierMode::IcmGnc})
    if (name == outlier_mode_name(m)) return m;
  return std::nullopt;
}

struct StationConfig {
  LoopFrontendConfig frontend;
  OutlierMode outlier_mode = OutlierMode::Gnc;
  GncParams gnc;
  double icm_threshold = 4.450241831501924;
  LmParams lm;
  int auto_optimize_every = 10;  // accepted loop edges between automatic runs
  bool loop_closure_enabled = true;
};

struct RobotSession {
  bool hello_seen = false;
  uint64_t last_seq = 0;
  bool any_seq = false;
  Pose calibration;
  double last_contact = 0;
  uint32_t last_index = 0;
  bool any_index = false;
};

/// Full state of the centralized station. All mutation goes through
/// handle_message under the owner's single writer.
struct StationState {
  StationConfig config;
  PoseGraph graph;       // odometry edges, priors, current estimates
  ScanStore scans;
  LoopFrontendState frontend;
  std::vector<GraphEdge> loop_edges;  // accepted by the two-stage pipeline
  std::vector<LoopEdgeCandidateResult> loop_log;
  std::optional<OptimizationResult> latest;
  std::vector<std::pair<NodeKey, NodeKey>> latest_inlier_loops;
  std::map<uint16_t, RobotSession> sessions;
  int loops_since_optimize = 0;
  int optimizations_run = 0;
};

/// Builds the optimization problem (graph + surviving loop edges per the
/// outlier mode), runs it, and writes the optimized estimates back into the
/// station graph.
inline OptimizationResult station_optimize(StationState& state) {
  PoseGraph problem = state.graph;
  std::vector<GraphEdge> loops = state.loop_edges;
  if (state.config.outlier_mode == OutlierMode::Icm ||
      state.config.outlier_mode == OutlierMode::IcmGnc) {
    const IcmResult icm = icm_filter(state.graph, loops, state.config.icm_threshold);
    std::vector<GraphEdge> kept;
    for (size_t idx : icm.accepted) kept.push_back(loops[idx]);
    loops = std::move(kept);
  }
  for (const GraphEdge& l : loops) problem.add_edge(l);

  OptimizationResult result;
  if (state.config.outlier_mode == OutlierMode::Gnc ||
      state.config.outlier_mode == OutlierMode::IcmGnc) {
    GncParams params = state.config.gnc;
    params.lm = state.config.lm;
    result = optimize_gnc(problem, params);
  } else {
    result = optimize_lm(problem, {}, state.config.lm);
  }
  for (const auto& [key, pose] : result.poses) state.graph.set_pose(key, pose);
  state.latest_inlier_loops.clear();
  for (size_t idx : result.inlier_edges) {
    const GraphEdge& e = problem.edges()[idx];
    state.latest_inlier_loops.emplace_back(e.from, e.to);
  }
  state.latest = result;
  state.loops_since_optimize = 0;
  state.optimizations_run += 1;
  return result;
}

/// Trajectory rows from the current estimates, with per-node inlier loop
/// counts from the latest optimization.
inline std::vector<TrajectoryRow> station_trajectory(const StationState& state) {
  std::map<NodeKey, int> inlier_count;
  for (const auto& [from, to] : state.latest_inlier_loops) {
    inlier_count[from] += 1;
    inlier_count[to] += 1;
  }
  std::vector<TrajectoryRow> rows;
  for (const auto& [key, node] : state.graph.nodes()) {
    TrajectoryRow row;
    row.key = key;
    row.pose = node.pose;
    auto it = inlier_count.find(key);
    row.inlier_loop_count = it == inlier_count.end() ? 0 : it->second;
    rows.push_back(row);
  }
  return rows;
}

/// Applies one message to the station state and returns the replies.
/// SegmentBatch application is all-or-nothing; duplicate sequence numbers are
/// acknowledged without being re-applied.
inline std::vector<Message> handle_message(StationState& state, const Message& msg,
                                           double now = 0.0) {
  std::vector<Message> replies;

  if (const auto* hello = std::get_if<HelloMsg>(&msg)) {
    RobotSession& session = state.sessions[hello->robot];
    session.hello_seen = true;
    session.calibration = hello->calibration;
    session.last_contact = now;
    if (!session.any_seq || hello->seq > session.last_seq) {
      session.last_seq = hello->seq;
      session.any_seq = true;
    }
    replies.push_back(AckMsg{hello->seq});
    return replies;
  }

  if (const auto* batch = std::get_if<SegmentBatchMsg>(&msg)) {
    auto session_it = state.sessions.find(batch->robot);
    if (session_it == state.sessions.end() || !session_it->second.hello_seen) {
      replies.push_back(ErrorMsg{ErrorCode::NoHello, batch->seq,
                                 "no Hello received for robot " + std::to_string(batch->robot)});
      return replies;
    }
    RobotSession& session = session_it->second;
    session.last_contact = now;
    if (session.any_seq && batch->seq <= session.last_seq) {
      replies.push_back(AckMsg{batch->seq});  // idempotent redelivery
      return replies;
    }

    // stage the whole batch on a copy so a failure leaves nothing half-applied
    PoseGraph staged = state.graph;
    std::vector<NodeKey> new_nodes;
    try {
      for (const SegmentUnit& unit : batch->segments) {
        const size_t before = staged.nodes().size();
        merge_segment(staged, unit.graph);
        if (staged.nodes().size() > before) {
          for (const auto& [k, n] : unit.graph.nodes()) {
            if (!state.graph.has_node(k)) new_nodes.push_back(k);
          }
        }
      }
    } catch (const GapError& gap) {
      replies.push_back(ErrorMsg{ErrorCode::Gap, batch->seq,
                                 std::to_string(gap.expected.robot) + " " +
                                     std::to_string(gap.expected.index)});
      return replies;
    } catch (const ConflictError& conflict) {
      replies.push_back(ErrorMsg{ErrorCode::Conflict, batch->seq, conflict.what()});
      return replies;
    }

    state.graph = std::move(staged);
    session.last_seq = batch->seq;
    session.any_seq = true;
    for (const SegmentUnit& unit : batch->segments) {
      for (const KeyedScan& scan : unit.scans) state.scans.insert(scan);
    }
    std::sort(new_nodes.begin(), new_nodes.end());
    new_nodes.erase(std::unique(new_nodes.begin(), new_nodes.end()), new_nodes.end());
    for (const NodeKey& key : new_nodes) {
      if (key.index > session.last_index || !session.any_index) {
        session.last_index = key.index;
        session.any_index = true;
      }
    }

    if (state.config.loop_closure_enabled && state.config.frontend.per_tick_budget > 0) {
      for (const NodeKey& key : new_nodes) {
        const auto results =
            frontend_tick(state.frontend, state.graph, state.scans, key, state.config.frontend);
        for (const LoopEdgeCandidateResult& r : results) {
          state.loop_log.push_back(r);
          if (r.accepted && r.edge) {
            state.loop_edges.push_back(*r.edge);
            state.loops_since_optimize += 1;
          }
        }
      }
      if (state.config.auto_optimize_every > 0 &&
          state.loops_since_optimize >= state.config.auto_optimize_every) {
        station_optimize(state);
      }
    }
    replies.push_back(AckMsg{batch->seq});
    return replies;
  }

  if (const auto* trigger = std::get_if<TriggerOptimizeMsg>(&msg)) {
    station_optimize(state);
    replies.push_back(AckMsg{trigger->seq});
    return replies;
  }

  if (const auto* req = std::get_if<RequestTrajectoryMsg>(&msg)) {
    (void)req;
    replies.push_back(TrajectoryDataMsg{serialize_trajectory(station_trajectory(state))});
    return replies;
  }

  if (const auto* req = std::get_if<RequestMapMsg>(&msg)) {
    PoseMap poses;
    for (const auto& [k, n] : state.graph.nodes()) poses[k] = n.pose;
    const MapAssembly assembly = assemble_map(poses, state.scans.all(), req->voxel);
    KeyedScan map_scan;
    map_scan.key = NodeKey{0xFFFF, 0};
    map_scan.cloud = assembly.map;
    if (map_scan.cloud.empty()) {
      replies.push_back(ErrorMsg{ErrorCode::BadRequest, req->seq, "no map content yet"});
    } else {
      replies.push_back(MapDataMsg{encode_scan(map_scan)});
    }
    return replies;
  }

  replies.push_back(ErrorMsg{ErrorCode::BadRequest, 0, "unexpected message"});
  return replies;
}

// ---------------------------------------------------------------------------
// Client side

/// Per-key transmission unit: the sub-segment (anchor node + new node + the
/// connecting odometry edge, or the first node with its prior) plus the keyed
/// scan.
inline std::vector<SegmentUnit> split_into_units(const FrontendOutput& frontend,
                                                 uint16_t robot) {
  std::vector<SegmentUnit> units;
  std::map<NodeKey, const GraphEdge*> incoming;
  const GraphEdge* prior = nullptr;
  for (const GraphEdge& e : frontend.segment.edges()) {
    if (e.kind == EdgeKind::Odometry) incoming[e.to] = &e;
    if (e.kind == EdgeKind::Prior) prior = &e;
  }
  std::map<NodeKey, const KeyedScan*> scans;
  for (const KeyedScan& s : frontend.scans) scans[s.key] = &s;

  for (const auto& [key, node] : frontend.segment.nodes()) {
    SegmentUnit unit;
    unit.graph.add_node(node);
    if (key.index == 0) {
      if (prior) unit.graph.add_edge(*prior);
    } else {
      auto in = incoming.find(key);
      if (in != incoming.end()) {
        unit.graph.add_node(frontend.segment.node(in->second->from));  // anchor
        unit.graph.add_edge(*in->second);
      }
    }
    auto scan_it = scans.find(key);
    if (scan_it != scans.end()) unit.scans.push_back(*scan_it->second);
    (void)robot;
    units.push_back(std::move(unit));
  }
  return units;
}

/// Client-side batching state machine. Feed it connectivity transitions and
/// it yields the messages to send: everything queues while out of comms and
/// flushes as one multi-segment batch on reconnect. Error(GAP) replies rewind
/// the cursor so delivery resumes from what the station actually has.
class ClientSession {
 public:
  ClientSession(uint16_t robot, const Pose& calibration, std::vector<SegmentUnit> units)
      : robot_(robot), calibration_(calibration), units_(std::move(units)) {}

  uint16_t robot() const { return robot_; }
  size_t acked_units() const { return acked_; }
  bool done() const { return acked_ >= units_.size(); }
  uint64_t last_seq() const { return seq_; }

  /// The hello that must precede any batch.
  HelloMsg hello() { return HelloMsg{robot_, ++seq_, calibration_}; }

  /// Next batch covering units [acked_, release_end): nullopt when nothing is
  /// releasable (all sent units still awaiting ack, or nothing released yet).
  std::optional<SegmentBatchMsg> next_batch(size_t released_units) {
    released_ = std::max(released_, std::min(released_units, units_.size()));
    if (acked_ >= released_) return std::nullopt;
    SegmentBatchMsg batch;
    batch.robot = robot_;
    batch.seq = ++seq_;
    for (size_t i = acked_; i < released_; ++i) batch.segments.push_back(units_[i]);
    inflight_end_ = released_;
    return batch;
  }

  /// Processes a station reply; returns true if progress was made.
  bool on_reply(const Message& reply) {
    if (std::holds_alternative<AckMsg>(reply)) {
      acked_ = std::max(acked_, inflight_end_);
      return true;
    }
    if (const auto* err = std::get_if<ErrorMsg>(&reply)) {
      if (err->code == ErrorCode::Gap) {
        // text: "<robot> <expected_index>"; resend from that node index
        std::istringstream in(err->text);
        int robot = 0;
        uint32_t expected = 0;
        in >> robot >> expected;
        if (in && robot == robot_) {
          size_t resume = 0;
          for (size_t i = 0; i < units_.size(); ++i) {
            bool has_expected = false;
            for (const auto& [k, n] : units_[i].graph.nodes()) {
              if (k.index == expected) has_expected = true;
            }
            if (has_expected) {
              resume = i;
              break;
            }
          }
          acked_ = std::min(acked_, resume);
        }
      }
      return false;
    }
    return false;
  }

 private:
  uint16_t robot_;
  Pose calibration_;
  std::vector<SegmentUnit> units_;
  size_t acked_ = 0;
  size_t released_ = 0;
  size_t inflight_end_ = 0;
  uint64_t seq_ = 0;
};

}  // namespace mrslam
