#include "mrslam/pose_graph.hpp"

#include <gtest/gtest.h>

#include <filesystem>

#include "mrslam/graph_io.hpp"
#include "mrslam/random.hpp"

namespace mrslam {
namespace {

Mat6 diag_info(double rot, double trans) {
  Mat6 m = Mat6::Zero();
  m.diagonal().head<3>().setConstant(rot);
  m.diagonal().tail<3>().setConstant(trans);
  return m;
}

Pose xpose(double x) {
  Pose p;
  p.translation = Vec3(x, 0, 0);
  return p;
}

PoseGraph chain_segment(uint16_t robot, uint32_t first_index, int count, double start_x,
                        bool with_prior) {
  PoseGraph seg;
  for (int i = 0; i < count; ++i) {
    GraphNode n;
    n.key = NodeKey{robot, first_index + static_cast<uint32_t>(i)};
    n.pose = xpose(start_x + i);
    n.odometric_distance = start_x + i;
    seg.add_node(n);
  }
  if (with_prior) {
    GraphEdge prior;
    prior.kind = EdgeKind::Prior;
    prior.from = prior.to = NodeKey{robot, first_index};
    prior.measurement = xpose(start_x);
    prior.information = diag_info(100, 100);
    seg.add_edge(prior);
  }
  for (int i = 1; i < count; ++i) {
    GraphEdge e;
    e.kind = EdgeKind::Odometry;
    e.from = NodeKey{robot, first_index + static_cast<uint32_t>(i - 1)};
    e.to = NodeKey{robot, first_index + static_cast<uint32_t>(i)};
    e.measurement = xpose(1.0);
    e.information = diag_info(25, 100);
    seg.add_edge(e);
  }
  return seg;
}

TEST(MergeSegment, FreshRobot) {
  PoseGraph g;
  merge_segment(g, chain_segment(0, 0, 3, 0.0, true));
  EXPECT_EQ(g.nodes().size(), 3u);
  int odom = 0, prior = 0;
  for (const auto& e : g.edges()) {
    odom += e.kind == EdgeKind::Odometry;
    prior += e.kind == EdgeKind::Prior;
  }
  EXPECT_EQ(odom, 2);
  EXPECT_EQ(prior, 1);
  EXPECT_NO_THROW(g.validate());
  EXPECT_NEAR(g.node(NodeKey{0, 2}).pose.translation.x(), 2.0, 1e-12);
}

TEST(MergeSegment, Idempotent) {
  PoseGraph g;
  const PoseGraph seg = chain_segment(0, 0, 3, 0.0, true);
  merge_segment(g, seg);
  const std::string before = serialize_graph(g);
  merge_segment(g, seg);
  EXPECT_EQ(serialize_graph(g), before);
}

TEST(MergeSegment, GapRejected) {
  PoseGraph g;
  merge_segment(g, chain_segment(0, 0, 3, 0.0, true));
  PoseGraph skip = chain_segment(0, 4, 2, 4.0, false);
  EXPECT_THROW(merge_segment(g, skip), GapError);
  try {
    merge_segment(g, skip);
  } catch (const GapError& e) {
    EXPECT_EQ(e.expected, (NodeKey{0, 3}));
  }
}

TEST(MergeSegment, ConflictingDuplicateRejected) {
  PoseGraph g;
  merge_segment(g, chain_segment(0, 0, 3, 0.0, true));
  const PoseGraph same = chain_segment(0, 0, 3, 0.0, true);
  PoseGraph tweaked;
  for (const auto& [k, n] : same.nodes()) {
    GraphNode m = n;
    m.odometric_distance += 0.5;
    tweaked.add_node(m);
  }
  EXPECT_THROW(merge_segment(g, tweaked), ConflictError);
}

TEST(MergeSegment, TwoRobotsTwoComponentsUntilLoop) {
  PoseGraph g;
  merge_segment(g, chain_segment(0, 0, 4, 0.0, true));
  merge_segment(g, chain_segment(1, 0, 4, 10.0, true));
  auto comps = g.connected_components();
  std::set<int> labels;
  for (const auto& [k, c] : comps) labels.insert(c);
  EXPECT_EQ(labels.size(), 2u);
  GraphEdge loop;
  loop.kind = EdgeKind::LoopClosure;
  loop.from = NodeKey{0, 3};
  loop.to = NodeKey{1, 0};
  loop.measurement = xpose(7.0);
  loop.information = diag_info(25, 100);
  g.add_edge(loop);
  comps = g.connected_components();
  labels.clear();
  for (const auto& [k, c] : comps) labels.insert(c);
  EXPECT_EQ(labels.size(), 1u);
}

TEST(MergeSegment, ContinuationChainsFromOptimizedPose) {
  PoseGraph g;
  merge_segment(g, chain_segment(0, 0, 3, 0.0, true));
  // pretend optimization moved the last node sideways
  Pose moved = xpose(2.0);
  moved.translation.y() = 1.0;
  g.set_pose(NodeKey{0, 2}, moved);

  // continuation: repeats anchor node 2, adds 3 and 4
  PoseGraph seg;
  seg.add_node(GraphNode{NodeKey{0, 2}, xpose(2.0), 2.0});
  seg.add_node(GraphNode{NodeKey{0, 3}, xpose(3.0), 3.0});
  seg.add_node(GraphNode{NodeKey{0, 4}, xpose(4.0), 4.0});
  GraphEdge e23;
  e23.kind = EdgeKind::Odometry;
  e23.from = NodeKey{0, 2};
  e23.to = NodeKey{0, 3};
  e23.measurement = xpose(1.0);
  e23.information = diag_info(25, 100);
  GraphEdge e34 = e23;
  e34.from = NodeKey{0, 3};
  e34.to = NodeKey{0, 4};
  seg.add_edge(e23);
  seg.add_edge(e34);

  merge_segment(g, seg);
  EXPECT_NEAR(g.node(NodeKey{0, 3}).pose.translation.y(), 1.0, 1e-12);
  EXPECT_NEAR(g.node(NodeKey{0, 4}).pose.translation.y(), 1.0, 1e-12);
  EXPECT_NO_THROW(g.validate());
}

TEST(Validate, NoGapAfterMerges) {
  PoseGraph g;
  merge_segment(g, chain_segment(0, 0, 5, 0.0, true));
  PoseGraph cont;
  cont.add_node(GraphNode{NodeKey{0, 4}, xpose(4.0), 4.0});
  cont.add_node(GraphNode{NodeKey{0, 5}, xpose(5.0), 5.0});
  GraphEdge e;
  e.kind = EdgeKind::Odometry;
  e.from = NodeKey{0, 4};
  e.to = NodeKey{0, 5};
  e.measurement = xpose(1.0);
  e.information = diag_info(25, 100);
  cont.add_edge(e);
  merge_segment(g, cont);
  EXPECT_NO_THROW(g.validate());
  EXPECT_EQ(*g.last_index(0), 5u);
}

TEST(GraphIo, EmptyAndTiny) {
  PoseGraph g;
  const std::string text = serialize_graph(g);
  EXPECT_TRUE(parse_graph(text).empty());

  merge_segment(g, chain_segment(3, 0, 1, 5.0, true));
  const std::string one = serialize_graph(g);
  EXPECT_NE(one.find("VERTEX_SE3 3 0"), std::string::npos);
  EXPECT_NE(one.find("PRIOR_SE3 3 0"), std::string::npos);
  const PoseGraph back = parse_graph(one);
  EXPECT_EQ(back.nodes().size(), 1u);
  EXPECT_EQ(back.edges().size(), 1u);
  EXPECT_EQ(serialize_graph(back), one);
}

PoseGraph random_graph(Rng& rng, int nodes) {
  PoseGraph g;
  Pose cur;
  for (int i = 0; i < nodes; ++i) {
    GraphNode n;
    n.key = NodeKey{0, static_cast<uint32_t>(i)};
    n.pose = cur;
    n.odometric_distance = i * 1.0;
    g.add_node(n);
    Pose step;
    step.translation = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    step.rotation = normalized_wpos(Eigen::Quaterniond(Eigen::AngleAxisd(
        rng.uniform(0, 0.5), Vec3(rng.gaussian(), rng.gaussian(), rng.gaussian()).normalized())));
    cur = se3_compose(cur, step);
  }
  GraphEdge prior;
  prior.kind = EdgeKind::Prior;
  prior.from = prior.to = NodeKey{0, 0};
  prior.measurement = Pose::identity();
  prior.information = diag_info(400, 900);
  g.add_edge(prior);
  for (int i = 1; i < nodes; ++i) {
    GraphEdge e;
    e.kind = EdgeKind::Odometry;
    e.from = NodeKey{0, static_cast<uint32_t>(i - 1)};
    e.to = NodeKey{0, static_cast<uint32_t>(i)};
    e.measurement = se3_between(g.node(e.from).pose, g.node(e.to).pose);
    Mat6 a;
    for (int r = 0; r < 6; ++r)
      for (int c = 0; c < 6; ++c) a(r, c) = rng.gaussian();
    e.information = a * a.transpose() + 5.0 * Mat6::Identity();
    g.add_edge(e);
  }
  for (int l = 0; l < nodes / 4; ++l) {
    const uint32_t a = static_cast<uint32_t>(rng.uniform_index(nodes));
    const uint32_t b = static_cast<uint32_t>(rng.uniform_index(nodes));
    if (a == b) continue;
    GraphEdge e;
    e.kind = EdgeKind::LoopClosure;
    e.from = NodeKey{0, a};
    e.to = NodeKey{0, b};
    e.measurement = se3_between(g.node(e.from).pose, g.node(e.to).pose);
    e.information = diag_info(rng.uniform(1, 30), rng.uniform(1, 120));
    g.add_edge(e);
  }
  return g;
}

TEST(GraphIo, RoundTripIsBitStableOnSecondSerialize) {
  Rng rng(99);
  const PoseGraph g = random_graph(rng, 100);
  const std::string first = serialize_graph(g);
  const PoseGraph parsed = parse_graph(first);
  const std::string second = serialize_graph(parsed);
  EXPECT_EQ(first, second);
  EXPECT_EQ(parsed.nodes().size(), g.nodes().size());
  EXPECT_EQ(parsed.edges().size(), g.edges().size());
}

TEST(GraphIo, MalformedLineReportsLineNumber) {
  const std::string text = "# header\nVERTEX_SE3 0 0 0 0 0 1 0 0 0 0\nJUNK 1 2 3\n";
  try {
    parse_graph(text);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line, 3);
  }
}

TEST(GraphIo, NonPsdInformationRejected) {
  PoseGraph g;
  merge_segment(g, chain_segment(0, 0, 2, 0.0, true));
  std::string text = serialize_graph(g);
  std::string bad = "EDGE_SE3 LOOP 0 0 0 1 1 0 0 1 0 0 0";
  bad += " -1 0 0 0 0 0 1 0 0 0 0 1 0 0 0 1 0 0 1 0 1\n";
  EXPECT_THROW(parse_graph(text + bad), ParseError);
}

TEST(ScanIo, RoundTripBitwise) {
  Rng rng(123);
  KeyedScan scan;
  scan.key = NodeKey{2, 77};
  for (int i = 0; i < 10000; ++i) {
    scan.cloud.push_back(Point3{static_cast<float>(rng.gaussian(10)),
                                static_cast<float>(rng.gaussian(10)),
                                static_cast<float>(rng.gaussian(10))});
  }
  const auto path = std::filesystem::temp_directory_path() / "mrslam_scan_test.kscn";
  write_scan(scan, path.string());
  const KeyedScan back = read_scan(path.string());
  EXPECT_EQ(back.key, scan.key);
  ASSERT_EQ(back.cloud.size(), scan.cloud.size());
  for (size_t i = 0; i < scan.cloud.size(); ++i) {
    ASSERT_EQ(back.cloud[i].x, scan.cloud[i].x);
    ASSERT_EQ(back.cloud[i].y, scan.cloud[i].y);
    ASSERT_EQ(back.cloud[i].z, scan.cloud[i].z);
  }
  std::filesystem::remove(path);
}

TEST(ScanIo, SinglePointRoundTrip) {
  KeyedScan scan;
  scan.key = NodeKey{0, 1};
  scan.cloud.push_back(Point3{1.5f, -2.25f, 0.125f});
  const KeyedScan back = decode_scan(encode_scan(scan));
  EXPECT_EQ(back.cloud.size(), 1u);
  EXPECT_EQ(back.cloud[0].x, 1.5f);
}

TEST(ScanIo, EmptyCloudRejected) {
  KeyedScan scan;
  scan.key = NodeKey{0, 0};
  EXPECT_THROW(encode_scan(scan), FormatError);
}

TEST(ScanIo, BadMagicRejected) { EXPECT_THROW(decode_scan("NOPEbluh"), FormatError); }

TEST(TrajectoryCsv, RoundTrip) {
  std::vector<TrajectoryRow> rows;
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    TrajectoryRow r;
    r.key = NodeKey{1, static_cast<uint32_t>(i)};
    r.pose.translation = Vec3(rng.uniform(-5, 5), rng.uniform(-5, 5), 0);
    r.pose.rotation =
        normalized_wpos(Eigen::Quaterniond(Eigen::AngleAxisd(rng.uniform(0, 1), Vec3::UnitZ())));
    r.inlier_loop_count = i % 3;
    rows.push_back(r);
  }
  const auto back = parse_trajectory(serialize_trajectory(rows));
  ASSERT_EQ(back.size(), rows.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(back[i].key, rows[i].key);
    EXPECT_EQ(back[i].pose.translation, rows[i].pose.translation);
    EXPECT_EQ(back[i].inlier_loop_count, rows[i].inlier_loop_count);
  }
}

TEST(LoopFile, RoundTrip) {
  LabeledLoop a;
  a.edge.from = NodeKey{0, 10};
  a.edge.to = NodeKey{1, 20};
  a.edge.measurement = xpose(3.0);
  a.outlier = false;
  LabeledLoop b = a;
  b.edge.to = NodeKey{1, 40};
  b.outlier = true;
  const auto back = parse_loops(serialize_loops({a, b}));
  ASSERT_EQ(back.size(), 2u);
  EXPECT_FALSE(back[0].outlier);
  EXPECT_TRUE(back[1].outlier);
  EXPECT_EQ(back[1].edge.to, (NodeKey{1, 40}));
}

}  // namespace
}  // namespace mrslam
