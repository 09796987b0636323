#pragma once

#include <array>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mrslam/pose_graph.hpp"

namespace mrslam {

struct ParseError : std::runtime_error {
  int line = 0;
  ParseError(int line_no, const std::string& msg)
      : std::runtime_error("line " + std::to_string(line_no) + ": " + msg), line(line_no) {}
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

// Shortest representation that round-trips the double exactly.
inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  double back = 0;
  std::sscanf(buf, "%lf", &back);
  if (back == v) {
    for (int prec = 1; prec < 17; ++prec) {
      char shorter[32];
      std::snprintf(shorter, sizeof(shorter), "%.*g", prec, v);
      std::sscanf(shorter, "%lf", &back);
      if (back == v) return shorter;
    }
  }
  return buf;
}

// On disk the 6x6 information is stored translation-first; internally the
// twist ordering is rotation-first. P swaps the two blocks.
inline Mat6 ordering_swap(const Mat6& m) {
  Mat6 out;
  out.topLeftCorner<3, 3>() = m.bottomRightCorner<3, 3>();
  out.bottomRightCorner<3, 3>() = m.topLeftCorner<3, 3>();
  out.topRightCorner<3, 3>() = m.bottomLeftCorner<3, 3>();
  out.bottomLeftCorner<3, 3>() = m.topRightCorner<3, 3>();
  return out;
}

inline void append_pose(std::string& s, const Pose& p) {
  s += ' ';
  s += fmt_double(p.translation.x());
  s += ' ';
  s += fmt_double(p.translation.y());
  s += ' ';
  s += fmt_double(p.translation.z());
  s += ' ';
  s += fmt_double(p.rotation.w());
  s += ' ';
  s += fmt_double(p.rotation.x());
  s += ' ';
  s += fmt_double(p.rotation.y());
  s += ' ';
  s += fmt_double(p.rotation.z());
}

inline void append_info(std::string& s, const Mat6& info_internal) {
  const Mat6 disk = ordering_swap(info_internal);
  for (int r = 0; r < 6; ++r) {
    for (int c = r; c < 6; ++c) {
      s += ' ';
      s += fmt_double(disk(r, c));
    }
  }
}

inline Pose read_pose(std::istringstream& in, int line_no) {
  double tx, ty, tz, qw, qx, qy, qz;
  if (!(in >> tx >> ty >> tz >> qw >> qx >> qy >> qz))
    throw ParseError(line_no, "truncated pose");
  Pose p;
  p.translation = Vec3(tx, ty, tz);
  p.rotation = Eigen::Quaterniond(qw, qx, qy, qz);
  const double norm = p.rotation.norm();
  if (std::abs(norm - 1.0) > 1e-6) throw ParseError(line_no, "quaternion not normalized");
  // keep the stored bits (they are unit within write precision); only fix the
  // sign so w >= 0 holds
  if (p.rotation.w() < 0.0) p.rotation.coeffs() = -p.rotation.coeffs();
  return p;
}

inline Mat6 read_info(std::istringstream& in, int line_no) {
  Mat6 disk;
  for (int r = 0; r < 6; ++r) {
    for (int c = r; c < 6; ++c) {
      double v;
      if (!(in >> v)) throw ParseError(line_no, "truncated information matrix");
      disk(r, c) = v;
      disk(c, r) = v;
    }
  }
  const Mat6 internal = ordering_swap(disk);
  Eigen::SelfAdjointEigenSolver<Mat6> eig(internal);
  if (eig.eigenvalues().minCoeff() <= 0.0)
    throw ParseError(line_no, "information matrix not positive-definite");
  return internal;
}

}  // namespace detail

/// Graph text format, one record per line:
///   VERTEX_SE3 <robot> <index> <tx> <ty> <tz> <qw> <qx> <qy> <qz>
///   EDGE_SE3 <ODOM|LOOP> <ra> <ia> <rb> <ib> <pose...> <21 info entries>
///   PRIOR_SE3 <robot> <index> <pose...> <21 info entries>
/// Info entries are the upper triangle row-major, translation-first on disk.
inline std::string serialize_graph(const PoseGraph& graph) {
  std::string out = "# mrslam pose graph v1\n";
  for (const auto& [key, node] : graph.nodes()) {
    out += "VERTEX_SE3 " + std::to_string(key.robot) + ' ' + std::to_string(key.index);
    detail::append_pose(out, node.pose);
    out += ' ';
    out += detail::fmt_double(node.odometric_distance);
    out += '\n';
  }
  for (const GraphEdge& e : graph.edges()) {
    if (e.kind == EdgeKind::Prior) {
      out += "PRIOR_SE3 " + std::to_string(e.from.robot) + ' ' + std::to_string(e.from.index);
    } else {
      out += "EDGE_SE3 ";
      out += e.kind == EdgeKind::Odometry ? "ODOM" : "LOOP";
      out += ' ' + std::to_string(e.from.robot) + ' ' + std::to_string(e.from.index) + ' ' +
             std::to_string(e.to.robot) + ' ' + std::to_string(e.to.index);
    }
    detail::append_pose(out, e.measurement);
    detail::append_info(out, e.information);
    out += '\n';
  }
  return out;
}

inline PoseGraph parse_graph(const std::string& text) {
  PoseGraph graph;
  std::istringstream stream(text);
  std::string line;
  int line_no = 0;
  std::vector<GraphEdge> edges;
  while (std::getline(stream, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream in(line);
    std::string tag;
    in >> tag;
    if (tag == "VERTEX_SE3") {
      GraphNode node;
      int robot, index;
      if (!(in >> robot >> index)) throw ParseError(line_no, "bad vertex key");
      node.key = NodeKey{static_cast<uint16_t>(robot), static_cast<uint32_t>(index)};
      node.pose = detail::read_pose(in, line_no);
      if (!(in >> node.odometric_distance)) throw ParseError(line_no, "missing distance");
      graph.add_node(node);
    } else if (tag == "EDGE_SE3") {
      GraphEdge e;
      std::string kind;
      int ra, ia, rb, ib;
      if (!(in >> kind >> ra >> ia >> rb >> ib)) throw ParseError(line_no, "bad edge key");
      if (kind == "ODOM")
        e.kind = EdgeKind::Odometry;
      else if (kind == "LOOP")
        e.kind = EdgeKind::LoopClosure;
      else
        throw ParseError(line_no, "unknown edge kind '" + kind + "'");
      e.from = NodeKey{static_cast<uint16_t>(ra), static_cast<uint32_t>(ia)};
      e.to = NodeKey{static_cast<uint16_t>(rb), static_cast<uint32_t>(ib)};
      e.measurement = detail::read_pose(in, line_no);
      e.information = detail::read_info(in, line_no);
      edges.push_back(e);
    } else if (tag == "PRIOR_SE3") {
      GraphEdge e;
      e.kind = EdgeKind::Prior;
      int robot, index;
      if (!(in >> robot >> index)) throw ParseError(line_no, "bad prior key");
      e.from = NodeKey{static_cast<uint16_t>(robot), static_cast<uint32_t>(index)};
      e.to = e.from;
      e.measurement = detail::read_pose(in, line_no);
      e.information = detail::read_info(in, line_no);
      edges.push_back(e);
    } else {
      throw ParseError(line_no, "unknown record '" + tag + "'");
    }
  }
  for (const GraphEdge& e : edges) graph.add_edge(e);
  return graph;
}

// ---------------------------------------------------------------------------
// Keyed scan binary format: magic "KSCN", u16 version=1, u16 robot, u64 index,
// u64 point_count, then point_count x 3 x f32, all little-endian.

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
  for (size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::string& out, float f) {
  uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_le(out, bits);
}

template <typename T>
T get_le(const std::string& data, size_t& pos) {
  if (pos + sizeof(T) > data.size()) throw FormatError("truncated scan data");
  T v = 0;
  for (size_t i = 0; i < sizeof(T); ++i)
    v |= static_cast<T>(static_cast<uint8_t>(data[pos + i])) << (8 * i);
  pos += sizeof(T);
  return v;
}

inline float get_f32(const std::string& data, size_t& pos) {
  const uint32_t bits = get_le<uint32_t>(data, pos);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

}  // namespace detail

inline std::string encode_scan(const KeyedScan& scan) {
  if (scan.cloud.empty()) throw FormatError("refusing to write empty scan");
  std::string out = "KSCN";
  detail::put_le<uint16_t>(out, 1);
  detail::put_le<uint16_t>(out, scan.key.robot);
  detail::put_le<uint64_t>(out, scan.key.index);
  detail::put_le<uint64_t>(out, scan.cloud.size());
  for (const Point3& p : scan.cloud) {
    detail::put_f32(out, p.x);
    detail::put_f32(out, p.y);
    detail::put_f32(out, p.z);
  }
  return out;
}

inline KeyedScan decode_scan(const std::string& data) {
  if (data.size() < 4 || data.compare(0, 4, "KSCN") != 0)
    throw FormatError("bad scan magic");
  size_t pos = 4;
  const uint16_t version = detail::get_le<uint16_t>(data, pos);
  if (version != 1) throw FormatError("unsupported scan version " + std::to_string(version));
  KeyedScan scan;
  scan.key.robot = detail::get_le<uint16_t>(data, pos);
  scan.key.index = static_cast<uint32_t>(detail::get_le<uint64_t>(data, pos));
  const uint64_t count = detail::get_le<uint64_t>(data, pos);
  scan.cloud.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    Point3 p;
    p.x = detail::get_f32(data, pos);
    p.y = detail::get_f32(data, pos);
    p.z = detail::get_f32(data, pos);
    scan.cloud.push_back(p);
  }
  return scan;
}

inline void write_scan(const KeyedScan& scan, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path);
  const std::string data = encode_scan(scan);
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
}

inline KeyedScan read_scan(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_scan(ss.str());
}

// ---------------------------------------------------------------------------
// Trajectory CSV: robot,index,tx,ty,tz,qw,qx,qy,qz[,inlier_loop_count]

struct TrajectoryRow {
  NodeKey key;
  Pose pose;
  int inlier_loop_count = 0;
};

inline std::string serialize_trajectory(const std::vector<TrajectoryRow>& rows,
                                        bool with_inlier_count = true) {
  std::string out = with_inlier_count
                        ? "robot,index,tx,ty,tz,qw,qx,qy,qz,inlier_loop_count\n"
                        : "robot,index,tx,ty,tz,qw,qx,qy,qz\n";
  for (const TrajectoryRow& r : rows) {
    out += std::to_string(r.key.robot) + ',' + std::to_string(r.key.index);
    const double vals[7] = {r.pose.translation.x(), r.pose.translation.y(),
                            r.pose.translation.z(), r.pose.rotation.w(),
                            r.pose.rotation.x(),    r.pose.rotation.y(),
                            r.pose.rotation.z()};
    for (double v : vals) out += ',' + detail::fmt_double(v);
    if (with_inlier_count) out += ',' + std::to_string(r.inlier_loop_count);
    out += '\n';
  }
  return out;
}

inline std::vector<TrajectoryRow> parse_trajectory(const std::string& text) {
  std::vector<TrajectoryRow> rows;
  std::istringstream stream(text);
  std::string line;
  int line_no = 0;
  while (std::getline(stream, line)) {
    ++line_no;
    if (line.empty() || line.rfind("robot,", 0) == 0) continue;
    std::istringstream in(line);
    TrajectoryRow row;
    double v[7];
    char comma;
    int robot, index;
    in >> robot >> comma >> index;
    for (double& x : v) in >> comma >> x;
    if (!in) throw ParseError(line_no, "bad trajectory row");
    int count = 0;
    if (in >> comma >> count) row.inlier_loop_count = count;
    row.key = NodeKey{static_cast<uint16_t>(robot), static_cast<uint32_t>(index)};
    row.pose.translation = Vec3(v[0], v[1], v[2]);
    row.pose.rotation = normalized_wpos(Eigen::Quaterniond(v[3], v[4], v[5], v[6]));
    rows.push_back(row);
  }
  return rows;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path);
  out << text;
}

// ---------------------------------------------------------------------------
// Labeled loop file emitted by the simulator:
//   LOOP <ra> <ia> <rb> <ib> <tx> <ty> <tz> <qw> <qx> <qy> <qz> <0|1>
// where the last field marks an injected outlier.

struct LabeledLoop {
  GraphEdge edge;
  bool outlier = false;
};

inline std::string serialize_loops(const std::vector<LabeledLoop>& loops) {
  std::string out = "# LOOP ra ia rb ib tx ty tz qw qx qy qz outlier\n";
  for (const LabeledLoop& l : loops) {
    out += "LOOP " + std::to_string(l.edge.from.robot) + ' ' + std::to_string(l.edge.from.index) +
           ' ' + std::to_string(l.edge.to.robot) + ' ' + std::to_string(l.edge.to.index);
    detail::append_pose(out, l.edge.measurement);
    out += l.outlier ? " 1\n" : " 0\n";
  }
  return out;
}

inline std::vector<LabeledLoop> parse_loops(const std::string& text) {
  std::vector<LabeledLoop> out;
  std::istringstream stream(text);
  std::string line;
  int line_no = 0;
  while (std::getline(stream, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream in(line);
    std::string tag;
    int ra, ia, rb, ib, flag;
    in >> tag;
    if (tag != "LOOP") throw ParseError(line_no, "expected LOOP record");
    if (!(in >> ra >> ia >> rb >> ib)) throw ParseError(line_no, "bad loop keys");
    LabeledLoop l;
    l.edge.kind = EdgeKind::LoopClosure;
    l.edge.from = NodeKey{static_cast<uint16_t>(ra), static_cast<uint32_t>(ia)};
    l.edge.to = NodeKey{static_cast<uint16_t>(rb), static_cast<uint32_t>(ib)};
    l.edge.measurement = detail::read_pose(in, line_no);
    if (!(in >> flag)) throw ParseError(line_no, "missing outlier flag");
    l.outlier = flag != 0;
    out.push_back(l);
  }
  return out;
}

}  // namespace mrslam
