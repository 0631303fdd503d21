#pragma once

// Byte-stream transports shared by the client and the broker: a TCP socket
// and an in-process pipe pair. Both support read timeouts and a shutdown()
// that wakes a reader blocked in another thread.

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>

#include "edgeped/error.hpp"

namespace edgeped::mqtt {

class TransportError : public Error {
 public:
  using Error::Error;
};

using Millis = std::chrono::milliseconds;

class Stream {
 public:
  virtual ~Stream() = default;
  // Bytes read; 0 means the peer closed. nullopt when the timeout expired first.
  virtual std::optional<std::size_t> read_some(std::span<std::uint8_t> buf, Millis timeout) = 0;
  virtual void write_all(std::span<const std::uint8_t> bytes) = 0;
  // Ends the connection in both directions; safe to call from any thread.
  virtual void shutdown() noexcept = 0;
  virtual std::string peer() const = 0;
};

struct HostPort {
  std::string host;
  std::uint16_t port = 0;
};

inline HostPort parse_host_port(std::string_view address) {
  const auto colon = address.rfind(':');
  if (colon == std::string_view::npos || colon + 1 == address.size())
    throw TransportError("address '" + std::string(address) + "' must look like host:port");
  HostPort hp;
  hp.host = std::string(address.substr(0, colon));
  if (hp.host.empty()) hp.host = "0.0.0.0";
  unsigned long port = 0;
  try {
    std::size_t used = 0;
    port = std::stoul(std::string(address.substr(colon + 1)), &used);
    if (used != address.size() - colon - 1 || port > 65535) throw std::out_of_range("port");
  } catch (const std::logic_error&) {
    throw TransportError("invalid port in '" + std::string(address) + "'");
  }
  hp.port = static_cast<std::uint16_t>(port);
  return hp;
}

// ---------------------------------------------------------------------------
// TCP

namespace detail {

inline void set_blocking(int fd, bool blocking) {
  const int flags = ::fcntl(fd, F_GETFL, 0);
  ::fcntl(fd, F_SETFL, blocking ? (flags & ~O_NONBLOCK) : (flags | O_NONBLOCK));
}

inline int poll_one(int fd, short events, Millis timeout) {
  pollfd p{fd, events, 0};
  while (true) {
    const int rc = ::poll(&p, 1, static_cast<int>(std::max<Millis::rep>(timeout.count(), 0)));
    if (rc >= 0 || errno != EINTR) return rc;
  }
}

}  // namespace detail

class TcpStream final : public Stream {
 public:
  TcpStream(int fd, std::string peer) : fd_(fd), peer_(std::move(peer)) {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  }
  ~TcpStream() override { ::close(fd_); }
  TcpStream(const TcpStream&) = delete;
  TcpStream& operator=(const TcpStream&) = delete;

  static std::unique_ptr<TcpStream> connect(std::string_view address, Millis timeout) {
    const auto hp = parse_host_port(address);
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    const auto port = std::to_string(hp.port);
    if (int rc = ::getaddrinfo(hp.host.c_str(), port.c_str(), &hints, &res); rc != 0)
      throw TransportError("cannot resolve '" + hp.host + "': " + ::gai_strerror(rc));
    std::unique_ptr<addrinfo, decltype(&::freeaddrinfo)> guard(res, &::freeaddrinfo);

    std::string last_error = "no usable address";
    for (auto* ai = res; ai; ai = ai->ai_next) {
      const int fd = ::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol);
      if (fd < 0) continue;
      detail::set_blocking(fd, false);
      int err = 0;
      if (::connect(fd, ai->ai_addr, ai->ai_addrlen) != 0) {
        err = errno;
        if (err == EINPROGRESS) {
          const int rc = detail::poll_one(fd, POLLOUT, timeout);
          if (rc == 1) {
            socklen_t len = sizeof err;
            ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
          } else {
            err = rc == 0 ? ETIMEDOUT : errno;
          }
        }
      }
      if (err == 0) {
        detail::set_blocking(fd, true);
        return std::make_unique<TcpStream>(fd, std::string(address));
      }
      last_error = std::strerror(err);
      ::close(fd);
    }
    throw TransportError("cannot connect to '" + std::string(address) + "': " + last_error);
  }

  std::optional<std::size_t> read_some(std::span<std::uint8_t> buf, Millis timeout) override {
    const int rc = detail::poll_one(fd_, POLLIN, timeout);
    if (rc == 0) return std::nullopt;
    if (rc < 0) throw TransportError(std::string("poll failed: ") + std::strerror(errno));
    const auto n = ::recv(fd_, buf.data(), buf.size(), 0);
    if (n < 0) {
      if (errno == EINTR || errno == EAGAIN) return std::nullopt;
      return 0;  // reset or shut down: treat as closed
    }
    return static_cast<std::size_t>(n);
  }

  void write_all(std::span<const std::uint8_t> bytes) override {
    std::size_t sent = 0;
    while (sent < bytes.size()) {
      const auto n = ::send(fd_, bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw TransportError(std::string("send failed: ") + std::strerror(errno));
      }
      sent += static_cast<std::size_t>(n);
    }
  }

  void shutdown() noexcept override { ::shutdown(fd_, SHUT_RDWR); }
  std::string peer() const override { return peer_; }

 private:
  int fd_;
  std::string peer_;
};

class TcpListener {
 public:
  explicit TcpListener(std::string_view bind_address) {
    const auto hp = parse_host_port(bind_address);
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    hints.ai_flags = AI_PASSIVE;
    addrinfo* res = nullptr;
    const auto port = std::to_string(hp.port);
    if (int rc = ::getaddrinfo(hp.host.c_str(), port.c_str(), &hints, &res); rc != 0)
      throw TransportError("cannot resolve bind address '" + hp.host + "': " + ::gai_strerror(rc));
    std::unique_ptr<addrinfo, decltype(&::freeaddrinfo)> guard(res, &::freeaddrinfo);
    fd_ = ::socket(res->ai_family, res->ai_socktype | SOCK_CLOEXEC, res->ai_protocol);
    if (fd_ < 0) throw TransportError(std::string("socket failed: ") + std::strerror(errno));
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (::bind(fd_, res->ai_addr, res->ai_addrlen) != 0 || ::listen(fd_, 64) != 0) {
      const std::string why = std::strerror(errno);
      ::close(fd_);
      throw TransportError("cannot bind '" + std::string(bind_address) + "': " + why);
    }
    sockaddr_storage addr{};
    socklen_t len = sizeof addr;
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.ss_family == AF_INET6 ? reinterpret_cast<sockaddr_in6*>(&addr)->sin6_port
                                             : reinterpret_cast<sockaddr_in*>(&addr)->sin_port);
  }
  ~TcpListener() { ::close(fd_); }
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  std::uint16_t port() const noexcept { return port_; }

  // nullptr on timeout or after shutdown().
  std::unique_ptr<TcpStream> accept(Millis timeout) {
    if (detail::poll_one(fd_, POLLIN, timeout) <= 0) return nullptr;
    sockaddr_storage addr{};
    socklen_t len = sizeof addr;
    const int fd = ::accept4(fd_, reinterpret_cast<sockaddr*>(&addr), &len, SOCK_CLOEXEC);
    if (fd < 0) return nullptr;
    char host[INET6_ADDRSTRLEN] = "?";
    std::uint16_t port = 0;
    if (addr.ss_family == AF_INET) {
      auto* a = reinterpret_cast<sockaddr_in*>(&addr);
      ::inet_ntop(AF_INET, &a->sin_addr, host, sizeof host);
      port = ntohs(a->sin_port);
    } else if (addr.ss_family == AF_INET6) {
      auto* a = reinterpret_cast<sockaddr_in6*>(&addr);
      ::inet_ntop(AF_INET6, &a->sin6_addr, host, sizeof host);
      port = ntohs(a->sin6_port);
    }
    return std::make_unique<TcpStream>(fd, std::string(host) + ":" + std::to_string(port));
  }

  void shutdown() noexcept { ::shutdown(fd_, SHUT_RDWR); }

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

// ---------------------------------------------------------------------------
// In-process pipe

namespace detail {

struct PipeChannel {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<std::uint8_t> bytes;
  bool closed = false;
};

class PipeStream final : public Stream {
 public:
  PipeStream(std::shared_ptr<PipeChannel> in, std::shared_ptr<PipeChannel> out, std::string name)
      : in_(std::move(in)), out_(std::move(out)), name_(std::move(name)) {}
  ~PipeStream() override { shutdown(); }

  std::optional<std::size_t> read_some(std::span<std::uint8_t> buf, Millis timeout) override {
    std::unique_lock lock(in_->mu);
    if (!in_->cv.wait_for(lock, timeout, [&] { return !in_->bytes.empty() || in_->closed; })) return std::nullopt;
    if (in_->bytes.empty()) return 0;
    const std::size_t n = std::min(buf.size(), in_->bytes.size());
    std::copy_n(in_->bytes.begin(), n, buf.begin());
    in_->bytes.erase(in_->bytes.begin(), in_->bytes.begin() + static_cast<std::ptrdiff_t>(n));
    return n;
  }

  void write_all(std::span<const std::uint8_t> bytes) override {
    {
      std::lock_guard lock(out_->mu);
      if (out_->closed) throw TransportError("pipe closed");
      out_->bytes.insert(out_->bytes.end(), bytes.begin(), bytes.end());
    }
    out_->cv.notify_all();
  }

  void shutdown() noexcept override {
    for (auto* ch : {in_.get(), out_.get()}) {
      {
        std::lock_guard lock(ch->mu);
        ch->closed = true;
      }
      ch->cv.notify_all();
    }
  }

  std::string peer() const override { return name_; }

 private:
  std::shared_ptr<PipeChannel> in_, out_;
  std::string name_;
};

}  // namespace detail

// Two connected in-memory streams; bytes written to one are read from the other.
inline std::pair<std::unique_ptr<Stream>, std::unique_ptr<Stream>> make_pipe(std::string name = "in-process") {
  auto a_to_b = std::make_shared<detail::PipeChannel>();
  auto b_to_a = std::make_shared<detail::PipeChannel>();
  return {std::make_unique<detail::PipeStream>(b_to_a, a_to_b, name),
          std::make_unique<detail::PipeStream>(a_to_b, b_to_a, name)};
}

}  // namespace edgeped::mqtt
