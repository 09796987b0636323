#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cstring>
#include <mutex>
#include <thread>
#include <vector>

#include "mrslam/station.hpp"

namespace mrslam {

struct NetError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace net_detail {

inline void send_all(int fd, const std::string& data) {
  size_t sent = 0;
  while (sent < data.size()) {
    const ssize_t n = ::send(fd, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
    if (n <= 0) throw NetError("send failed");
    sent += static_cast<size_t>(n);
  }
}

}  // namespace net_detail

/// Threaded TCP front for a StationState: one listener, a reader thread per
/// connection, every state mutation serialized through one mutex (the
/// station's single-writer rule).
class StationServer {
 public:
  explicit StationServer(StationState& state, uint16_t port = 7447)
      : state_(state) {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw NetError("socket() failed");
    int yes = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(port);
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      ::close(listen_fd_);
      throw NetError("bind failed on port " + std::to_string(port));
    }
    if (::listen(listen_fd_, 16) != 0) {
      ::close(listen_fd_);
      throw NetError("listen failed");
    }
    socklen_t len = sizeof(addr);
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    accept_thread_ = std::thread([this] { accept_loop(); });
  }

  ~StationServer() { stop(); }

  uint16_t port() const { return port_; }
  int connections_seen() const { return connections_seen_.load(); }
  int active_connections() const { return active_.load(); }

  /// Runs a callback under the state lock (for snapshots and shutdown dumps).
  template <typename F>
  auto with_state(F&& f) {
    std::lock_guard<std::mutex> lock(mutex_);
    return f(state_);
  }

  void stop() {
    if (stopping_.exchange(true)) return;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    if (accept_thread_.joinable()) accept_thread_.join();
    for (std::thread& t : workers_) {
      if (t.joinable()) t.join();
    }
  }

 private:
  void accept_loop() {
    while (!stopping_) {
      pollfd pfd{listen_fd_, POLLIN, 0};
      const int ready = ::poll(&pfd, 1, 200);
      if (stopping_) break;
      if (ready <= 0) continue;
      const int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) continue;
      connections_seen_.fetch_add(1);
      active_.fetch_add(1);
      workers_.emplace_back([this, fd] {
        serve(fd);
        active_.fetch_sub(1);
      });
    }
  }

  void serve(int fd) {
    FrameDecoder decoder;
    char buf[64 * 1024];
    while (!stopping_) {
      pollfd pfd{fd, POLLIN, 0};
      const int ready = ::poll(&pfd, 1, 200);
      if (stopping_) break;
      if (ready <= 0) continue;
      const ssize_t n = ::recv(fd, buf, sizeof(buf), 0);
      if (n <= 0) break;
      decoder.feed(buf, static_cast<size_t>(n));
      try {
        while (auto msg = decoder.next()) {
          std::vector<Message> replies;
          {
            std::lock_guard<std::mutex> lock(mutex_);
            replies = handle_message(state_, *msg, now());
          }
          for (const Message& r : replies) net_detail::send_all(fd, encode_message(r));
        }
      } catch (const std::exception& e) {
        try {
          net_detail::send_all(
              fd, encode_message(ErrorMsg{ErrorCode::BadRequest, 0, e.what()}));
        } catch (...) {
        }
        break;
      }
    }
    ::close(fd);
  }

  static double now() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
  }

  StationState& state_;
  std::mutex mutex_;
  int listen_fd_ = -1;
  uint16_t port_ = 0;
  std::thread accept_thread_;
  std::vector<std::thread> workers_;
  std::atomic<bool> stopping_{false};
  std::atomic<int> connections_seen_{0};
  std::atomic<int> active_{0};
};

/// Blocking request/reply client over one TCP connection.
class StationClient {
 public:
  StationClient(const std::string& host, uint16_t port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw NetError("socket() failed");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
      throw NetError("bad host address " + host);
    if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      ::close(fd_);
      fd_ = -1;
      throw NetError("connect failed to " + host + ":" + std::to_string(port));
    }
  }

  ~StationClient() {
    if (fd_ >= 0) ::close(fd_);
  }

  StationClient(const StationClient&) = delete;
  StationClient& operator=(const StationClient&) = delete;

  /// Sends one message and waits for a single reply.
  Message request(const Message& msg, int timeout_ms = 30000) {
    net_detail::send_all(fd_, encode_message(msg));
    return receive(timeout_ms);
  }

  Message receive(int timeout_ms = 30000) {
    char buf[64 * 1024];
    for (;;) {
      if (auto msg = decoder_.next()) return *msg;
      pollfd pfd{fd_, POLLIN, 0};
      const int ready = ::poll(&pfd, 1, timeout_ms);
      if (ready <= 0) throw NetError("timed out waiting for reply");
      const ssize_t n = ::recv(fd_, buf, sizeof(buf), 0);
      if (n <= 0) throw NetError("connection closed");
      decoder_.feed(buf, static_cast<size_t>(n));
    }
  }

 private:
  int fd_ = -1;
  FrameDecoder decoder_;
};

}  // namespace mrslam
