#pragma once

#include <cstring>
#include <string>
#include <variant>
#include <vector>

#include "mrslam/graph_io.hpp"
#include "mrslam/pose_graph.hpp"

namespace mrslam {

// Framing: 4-byte big-endian length (covering type byte + payload), 1-byte
// message type, payload. Graph and scan payloads reuse the on-disk formats so
// the wire content is bit-exact testable against files.

enum class MessageType : uint8_t {
  Hello = 1,
  SegmentBatch = 2,
  RequestTrajectory = 3,
  RequestMap = 4,
  TriggerOptimize = 5,
  Ack = 6,
  Error = 7,
  TrajectoryData = 8,
  MapData = 9,
};

enum class ErrorCode : uint16_t {
  Gap = 1,      // text: "<robot> <expected_index>", resend from there
  NoHello = 2,
  BadRequest = 3,
  Conflict = 4,
};

struct HelloMsg {
  uint16_t robot = 0;
  uint64_t seq = 0;
  Pose calibration;
};

struct SegmentUnit {
  PoseGraph graph;
  std::vector<KeyedScan> scans;
};

struct SegmentBatchMsg {
  uint16_t robot = 0;
  uint64_t seq = 0;
  std::vector<SegmentUnit> segments;
};

struct RequestTrajectoryMsg {
  uint16_t robot = 0;
  uint64_t seq = 0;
};

struct RequestMapMsg {
  uint16_t robot = 0;
  uint64_t seq = 0;
  double voxel = 0.2;
};

struct TriggerOptimizeMsg {
  uint16_t robot = 0;
  uint64_t seq = 0;
};

struct AckMsg {
  uint64_t seq = 0;
};

struct ErrorMsg {
  ErrorCode code = ErrorCode::BadRequest;
  uint64_t seq = 0;
  std::string text;
};

struct TrajectoryDataMsg {
  std::string csv;
};

struct MapDataMsg {
  std::string scan_blob;  // KSCN-encoded
};

using Message = std::variant<HelloMsg, SegmentBatchMsg, RequestTrajectoryMsg, RequestMapMsg,
                             TriggerOptimizeMsg, AckMsg, ErrorMsg, TrajectoryDataMsg, MapDataMsg>;

struct WireError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace wire_detail {

inline void put_u16(std::string& s, uint16_t v) {
  s.push_back(static_cast<char>(v & 0xFF));
  s.push_back(static_cast<char>((v >> 8) & 0xFF));
}

inline void put_u32(std::string& s, uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& s, uint64_t v) {
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f64(std::string& s, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(s, bits);
}

inline void put_str(std::string& s, const std::string& v) {
  put_u32(s, static_cast<uint32_t>(v.size()));
  s += v;
}

struct Reader {
  const std::string& data;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > data.size()) throw WireError("truncated message payload");
  }
  uint16_t u16() {
    need(2);
    uint16_t v = static_cast<uint8_t>(data[pos]) |
                 (static_cast<uint16_t>(static_cast<uint8_t>(data[pos + 1])) << 8);
    pos += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<uint32_t>(static_cast<uint8_t>(data[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<uint64_t>(static_cast<uint8_t>(data[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  double f64() {
    const uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str() {
    const uint32_t n = u32();
    need(n);
    std::string v = data.substr(pos, n);
    pos += n;
    return v;
  }
};

inline void put_pose(std::string& s, const Pose& p) {
  put_f64(s, p.translation.x());
  put_f64(s, p.translation.y());
  put_f64(s, p.translation.z());
  put_f64(s, p.rotation.w());
  put_f64(s, p.rotation.x());
  put_f64(s, p.rotation.y());
  put_f64(s, p.rotation.z());
}

inline Pose get_pose(Reader& r) {
  Pose p;
  p.translation.x() = r.f64();
  p.translation.y() = r.f64();
  p.translation.z() = r.f64();
  const double w = r.f64(), x = r.f64(), y = r.f64(), z = r.f64();
  p.rotation = Eigen::Quaterniond(w, x, y, z);
  if (p.rotation.w() < 0) p.rotation.coeffs() = -p.rotation.coeffs();
  return p;
}

}  // namespace wire_detail

inline std::string encode_payload(const Message& msg) {
  using namespace wire_detail;
  std::string s;
  std::visit(
      [&s](const auto& m) {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, HelloMsg>) {
          put_u16(s, m.robot);
          put_u64(s, m.seq);
          put_pose(s, m.calibration);
        } else if constexpr (std::is_same_v<T, SegmentBatchMsg>) {
          put_u16(s, m.robot);
          put_u64(s, m.seq);
          put_u32(s, static_cast<uint32_t>(m.segments.size()));
          for (const SegmentUnit& unit : m.segments) {
            put_str(s, serialize_graph(unit.graph));
            put_u32(s, static_cast<uint32_t>(unit.scans.size()));
            for (const KeyedScan& scan : unit.scans) {
              const std::string blob = encode_scan(scan);
              put_u64(s, blob.size());
              s += blob;
            }
          }
        } else if constexpr (std::is_same_v<T, RequestTrajectoryMsg>) {
          put_u16(s, m.robot);
          put_u64(s, m.seq);
        } else if constexpr (std::is_same_v<T, RequestMapMsg>) {
          put_u16(s, m.robot);
          put_u64(s, m.seq);
          put_f64(s, m.voxel);
        } else if constexpr (std::is_same_v<T, TriggerOptimizeMsg>) {
          put_u16(s, m.robot);
          put_u64(s, m.seq);
        } else if constexpr (std::is_same_v<T, AckMsg>) {
          put_u64(s, m.seq);
        } else if constexpr (std::is_same_v<T, ErrorMsg>) {
          put_u16(s, static_cast<uint16_t>(m.code));
          put_u64(s, m.seq);
          put_str(s, m.text);
        } else if constexpr (std::is_same_v<T, TrajectoryDataMsg>) {
          put_str(s, m.csv);
        } else if constexpr (std::is_same_v<T, MapDataMsg>) {
          put_u64(s, m.scan_blob.size());
          s += m.scan_blob;
        }
      },
      msg);
  return s;
}

inline MessageType message_type(const Message& msg) {
  return std::visit(
      [](const auto& m) {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, HelloMsg>) return MessageType::Hello;
        if constexpr (std::is_same_v<T, SegmentBatchMsg>) return MessageType::SegmentBatch;
        if constexpr (std::is_same_v<T, RequestTrajectoryMsg>)
          return MessageType::RequestTrajectory;
        if constexpr (std::is_same_v<T, RequestMapMsg>) return MessageType::RequestMap;
        if constexpr (std::is_same_v<T, TriggerOptimizeMsg>) return MessageType::TriggerOptimize;
        if constexpr (std::is_same_v<T, AckMsg>) return MessageType::Ack;
        if constexpr (std::is_same_v<T, ErrorMsg>) return MessageType::Error;
        if constexpr (std::is_same_v<T, TrajectoryDataMsg>) return MessageType::TrajectoryData;
        if constexpr (std::is_same_v<T, MapDataMsg>) return MessageType::MapData;
      },
      msg);
}

/// Full frame: 4-byte big-endian length of (type + payload), then both.
inline std::string encode_message(const Message& msg) {
  const std::string payload = encode_payload(msg);
  std::string out;
  const uint32_t len = static_cast<uint32_t>(payload.size() + 1);
  for (int i = 3; i >= 0; --i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xFF));
  out.push_back(static_cast<char>(message_type(msg)));
  out += payload;
  return out;
}

inline Message decode_payload(MessageType type, const std::string& payload) {
  using namespace wire_detail;
  Reader r{payload};
  switch (type) {
    case MessageType::Hello: {
      HelloMsg m;
      m.robot = r.u16();
      m.seq = r.u64();
      m.calibration = get_pose(r);
      return m;
    }
    case MessageType::SegmentBatch: {
      SegmentBatchMsg m;
      m.robot = r.u16();
      m.seq = r.u64();
      const uint32_t count = r.u32();
      for (uint32_t i = 0; i < count; ++i) {
        SegmentUnit unit;
        unit.graph = parse_graph(r.str());
        const uint32_t scan_count = r.u32();
        for (uint32_t k = 0; k < scan_count; ++k) {
          const uint64_t len = r.u64();
          r.need(len);
          unit.scans.push_back(decode_scan(payload.substr(r.pos, len)));
          r.pos += len;
        }
        m.segments.push_back(std::move(unit));
      }
      return m;
    }
    case MessageType::RequestTrajectory: {
      RequestTrajectoryMsg m;
      m.robot = r.u16();
      m.seq = r.u64();
      return m;
    }
    case MessageType::RequestMap: {
      RequestMapMsg m;
      m.robot = r.u16();
      m.seq = r.u64();
      m.voxel = r.f64();
      return m;
    }
    case MessageType::TriggerOptimize: {
      TriggerOptimizeMsg m;
      m.robot = r.u16();
      m.seq = r.u64();
      return m;
    }
    case MessageType::Ack: {
      AckMsg m;
      m.seq = r.u64();
      return m;
    }
    case MessageType::Error: {
      ErrorMsg m;
      m.code = static_cast<ErrorCode>(r.u16());
      m.seq = r.u64();
      m.text = r.str();
      return m;
    }
    case MessageType::TrajectoryData: {
      TrajectoryDataMsg m;
      m.csv = r.str();
      return m;
    }
    case MessageType::MapData: {
      MapDataMsg m;
      const uint64_t len = r.u64();
      r.need(len);
      m.scan_blob = payload.substr(r.pos, len);
      return m;
    }
  }
  throw WireError("unknown message type " + std::to_string(static_cast<int>(type)));
}

/// Incremental frame decoder for a byte stream.
class FrameDecoder {
 public:
  void feed(const char* data, size_t n) { buffer_.append(data, n); }

  /// Extracts the next complete message, or nullopt if more bytes are needed.
  std::optional<Message> next() {
    if (buffer_.size() < 4) return std::nullopt;
    uint32_t len = 0;
    for (int i = 0; i < 4; ++i)
      len = (len << 8) | static_cast<uint8_t>(buffer_[static_cast<size_t>(i)]);
    if (len < 1 || len > kMaxFrame) throw WireError("bad frame length " + std::to_string(len));
    if (buffer_.size() < 4 + static_cast<size_t>(len)) return std::nullopt;
    const auto type = static_cast<MessageType>(static_cast<uint8_t>(buffer_[4]));
    const std::string payload = buffer_.substr(5, len - 1);
    buffer_.erase(0, 4 + static_cast<size_t>(len));
    return decode_payload(type, payload);
  }

 private:
  static constexpr uint32_t kMaxFrame = 256 * 1024 * 1024;
  std::string buffer_;
};

}  // namespace mrslam
