#pragma once

// Line-delimited JSON over a local TCP socket (POSIX).

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstdint>
#include <cstring>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "gcq/api_wire.hpp"
#include "gcq/errors.hpp"

namespace gcq {

namespace detail {

class LineReader {
 public:
  explicit LineReader(int fd) : fd_(fd) {}
  // Returns false on orderly shutdown before a full line.
  bool read_line(std::string& line) {
    for (;;) {
      const auto nl = buffer_.find('\n');
      if (nl != std::string::npos) {
        line.assign(buffer_, 0, nl);
        buffer_.erase(0, nl + 1);
        return true;
      }
      char chunk[4096];
      const ssize_t got = ::recv(fd_, chunk, sizeof chunk, 0);
      if (got == 0) return false;
      if (got < 0) {
        if (errno == EINTR) continue;
        return false;
      }
      buffer_.append(chunk, static_cast<std::size_t>(got));
    }
  }

 private:
  int fd_;
  std::string buffer_;
};

inline bool write_all(int fd, const std::string& data) {
  std::size_t sent = 0;
  while (sent < data.size()) {
    const ssize_t n = ::send(fd, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    sent += static_cast<std::size_t>(n);
  }
  return true;
}

}  // namespace detail

/// Serves a MockServer on 127.0.0.1. One thread per connection; each
/// connection answers its request lines in order.
class SocketServer {
 public:
  explicit SocketServer(MockServer& server) : server_(&server) {}
  SocketServer(const SocketServer&) = delete;
  SocketServer& operator=(const SocketServer&) = delete;
  ~SocketServer() { stop(); }

  /// Binds and starts accepting. Port 0 picks an ephemeral port; returns the bound port.
  std::uint16_t start(std::uint16_t port = 0) {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw TransportError(std::string("socket: ") + std::strerror(errno));
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(port);
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0 || ::listen(listen_fd_, 64) < 0) {
      const std::string err = std::strerror(errno);
      ::close(listen_fd_);
      listen_fd_ = -1;
      throw TransportError("bind/listen on port " + std::to_string(port) + ": " + err);
    }
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    running_ = true;
    acceptor_ = std::thread([this] { accept_loop(); });
    return port_;
  }

  std::uint16_t port() const noexcept { return port_; }

  /// Blocks until stop() is called from another thread.
  void wait() {
    if (acceptor_.joinable()) acceptor_.join();
  }

  void stop() {
    if (!running_.exchange(false)) return;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    if (acceptor_.joinable() && acceptor_.get_id() != std::this_thread::get_id()) acceptor_.join();
    std::vector<std::thread> workers;
    {
      std::lock_guard lock(mutex_);
      for (int fd : conn_fds_) ::shutdown(fd, SHUT_RDWR);
      workers.swap(workers_);
    }
    for (auto& t : workers) t.join();
  }

 private:
  void accept_loop() {
    while (running_) {
      const int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) {
        if (errno == EINTR) continue;
        return;
      }
      int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      std::lock_guard lock(mutex_);
      conn_fds_.push_back(fd);
      workers_.emplace_back([this, fd] { serve(fd); });
    }
  }

  void serve(int fd) {
    detail::LineReader reader(fd);
    std::string line;
    while (reader.read_line(line)) {
      if (!detail::write_all(fd, server_->handle_line(line) + "\n")) break;
    }
    {
      std::lock_guard lock(mutex_);
      std::erase(conn_fds_, fd);
    }
    ::close(fd);
  }

  MockServer* server_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> running_{false};
  std::thread acceptor_;
  std::mutex mutex_;
  std::vector<int> conn_fds_;
  std::vector<std::thread> workers_;
};

/// Client side of the socket protocol. Connects lazily and reconnects after failures.
class SocketTransport final : public Transport {
 public:
  SocketTransport(std::string host, std::uint16_t port) : host_(std::move(host)), port_(port) {}
  SocketTransport(const SocketTransport&) = delete;
  SocketTransport& operator=(const SocketTransport&) = delete;
  ~SocketTransport() override { disconnect(); }

  std::vector<std::string> exchange(std::span<const std::string> lines) override {
    if (fd_ < 0) connect();
    std::string payload;
    for (const auto& l : lines) {
      payload += l;
      payload += '\n';
    }
    if (!detail::write_all(fd_, payload)) fail("send failed");
    std::vector<std::string> out(lines.size());
    for (auto& reply : out)
      if (!reader_->read_line(reply)) fail("connection closed by server");
    return out;
  }

 private:
  void connect() {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (::getaddrinfo(host_.c_str(), std::to_string(port_).c_str(), &hints, &res) != 0 || !res)
      throw TransportError("cannot resolve " + host_);
    fd_ = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    const int rc = fd_ < 0 ? -1 : ::connect(fd_, res->ai_addr, res->ai_addrlen);
    ::freeaddrinfo(res);
    if (rc < 0) {
      disconnect();
      throw TransportError("cannot connect to " + host_ + ":" + std::to_string(port_));
    }
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    reader_.emplace(fd_);
  }

  [[noreturn]] void fail(const std::string& what) {
    disconnect();
    throw TransportError(what);
  }

  void disconnect() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
    reader_.reset();
  }

  std::string host_;
  std::uint16_t port_;
  int fd_ = -1;
  std::optional<detail::LineReader> reader_;
};

}  // namespace gcq
