#pragma once

// Thin RAII wrapper over an IPv4 UDP socket.

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <charconv>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mirage/error.hpp"

namespace mirage::streaming {

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;

  std::string str() const { return host + ":" + std::to_string(port); }
  bool operator==(const Endpoint&) const = default;
  auto operator<=>(const Endpoint&) const = default;

  /// "host:port"; a bare port means loopback.
  static Endpoint parse(std::string_view text) {
    Endpoint e;
    std::string_view port = text;
    if (const auto colon = text.rfind(':'); colon != std::string_view::npos) {
      e.host = std::string(text.substr(0, colon));
      port = text.substr(colon + 1);
    }
    unsigned v = 0;
    const auto [ptr, ec] = std::from_chars(port.data(), port.data() + port.size(), v);
    require(ec == std::errc() && ptr == port.data() + port.size() && v <= 0xFFFF, ErrorCode::kParameter,
            "bad endpoint '" + std::string(text) + "'");
    e.port = static_cast<std::uint16_t>(v);
    in_addr probe{};
    require(inet_pton(AF_INET, e.host.c_str(), &probe) == 1, ErrorCode::kParameter,
            "endpoint host must be an IPv4 address: " + e.host);
    return e;
  }

  sockaddr_in sockaddr() const {
    sockaddr_in a{};
    a.sin_family = AF_INET;
    a.sin_port = htons(port);
    inet_pton(AF_INET, host.c_str(), &a.sin_addr);
    return a;
  }

  static Endpoint from(const sockaddr_in& a) {
    char buf[INET_ADDRSTRLEN] = {};
    inet_ntop(AF_INET, &a.sin_addr, buf, sizeof buf);
    return Endpoint{buf, ntohs(a.sin_port)};
  }
};

struct Datagram {
  std::vector<std::uint8_t> bytes;
  Endpoint from;
};

class UdpSocket {
 public:
  /// Binds to `local`; port 0 picks an ephemeral port.
  explicit UdpSocket(const Endpoint& local = {}, int buffer_bytes = 8 << 20) {
    fd_ = ::socket(AF_INET, SOCK_DGRAM, 0);
    require(fd_ >= 0, ErrorCode::kIo, "socket: " + std::string(std::strerror(errno)));
    // Frames arrive in bursts of fragments; a large receive buffer keeps
    // loopback from dropping them while the receiver is busy.
    ::setsockopt(fd_, SOL_SOCKET, SO_RCVBUF, &buffer_bytes, sizeof buffer_bytes);
    ::setsockopt(fd_, SOL_SOCKET, SO_SNDBUF, &buffer_bytes, sizeof buffer_bytes);
    const sockaddr_in a = local.sockaddr();
    if (::bind(fd_, reinterpret_cast<const ::sockaddr*>(&a), sizeof a) != 0) {
      const std::string why = std::strerror(errno);
      ::close(fd_);
      fail(ErrorCode::kIo, "bind " + local.str() + ": " + why);
    }
  }

  ~UdpSocket() {
    if (fd_ >= 0) ::close(fd_);
  }
  UdpSocket(const UdpSocket&) = delete;
  UdpSocket& operator=(const UdpSocket&) = delete;
  UdpSocket(UdpSocket&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
  UdpSocket& operator=(UdpSocket&& o) noexcept {
    if (this != &o) {
      if (fd_ >= 0) ::close(fd_);
      fd_ = o.fd_;
      o.fd_ = -1;
    }
    return *this;
  }

  Endpoint local() const {
    sockaddr_in a{};
    socklen_t len = sizeof a;
    ::getsockname(fd_, reinterpret_cast<::sockaddr*>(&a), &len);
    return Endpoint::from(a);
  }

  /// Returns false if the kernel refused the datagram.
  bool send_to(const Endpoint& to, std::span<const std::uint8_t> bytes) {
    const sockaddr_in a = to.sockaddr();
    for (;;) {
      const ssize_t n = ::sendto(fd_, bytes.data(), bytes.size(), 0, reinterpret_cast<const ::sockaddr*>(&a), sizeof a);
      if (n == static_cast<ssize_t>(bytes.size())) return true;
      if (n < 0 && errno == EINTR) continue;
      if (n < 0 && (errno == ENOBUFS || errno == EAGAIN)) {
        // Loopback send queue is full; give the receiver a moment.
        ::usleep(200);
        continue;
      }
      return false;
    }
  }

  /// Waits up to `timeout_ms` for one datagram.
  std::optional<Datagram> receive(int timeout_ms) {
    pollfd p{fd_, POLLIN, 0};
    const int ready = ::poll(&p, 1, timeout_ms);
    if (ready <= 0) return std::nullopt;
    Datagram d;
    d.bytes.resize(65536);
    sockaddr_in from{};
    socklen_t len = sizeof from;
    const ssize_t n = ::recvfrom(fd_, d.bytes.data(), d.bytes.size(), 0, reinterpret_cast<::sockaddr*>(&from), &len);
    if (n < 0) return std::nullopt;
    d.bytes.resize(static_cast<std::size_t>(n));
    d.from = Endpoint::from(from);
    return d;
  }

 private:
  int fd_ = -1;
};

}  // namespace mirage::streaming
