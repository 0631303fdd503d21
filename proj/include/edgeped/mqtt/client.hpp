#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>

#include "edgeped/mqtt/framing.hpp"
#include "edgeped/mqtt/packet.hpp"
#include "edgeped/mqtt/topic.hpp"
#include "edgeped/mqtt/transport.hpp"

namespace edgeped::mqtt {

class ConnectError : public Error {
 public:
  enum class Kind { timeout, refused, transport };

  ConnectError(Kind kind, const std::string& detail, std::uint8_t code = 0)
      : Error("mqtt connect: " + detail), kind_(kind), code_(code) {}
  Kind kind() const noexcept { return kind_; }
  std::uint8_t return_code() const noexcept { return code_; }

 private:
  Kind kind_;
  std::uint8_t code_;
};

// Raised when an operation needs a live connection and there is none.
class SessionError : public Error {
 public:
  using Error::Error;
};

struct ConnectOptions {
  std::string client_id;
  std::uint16_t keepalive = 60;  // seconds
  Millis timeout{5000};          // CONNACK and SUBACK wait
};

struct Message {
  std::string topic;
  Bytes payload;
  friend bool operator==(const Message&, const Message&) = default;
};

// Client side of one MQTT connection. Not shareable between threads for
// concurrent use; it may be moved to another thread as a whole.
class Session {
 public:
  // Sends CONNECT over `stream` and waits for a zero CONNACK.
  static Session connect(std::unique_ptr<Stream> stream, ConnectOptions options) {
    if (options.client_id.empty()) throw ConnectError(ConnectError::Kind::refused, "client id must not be empty", 2);
    Session s(std::move(stream), std::move(options));
    try {
      s.send(Connect{s.options_.client_id, s.options_.keepalive, true});
      const auto deadline = std::chrono::steady_clock::now() + s.options_.timeout;
      while (true) {
        auto r = s.reader_->next(s.remaining(deadline));
        if (std::holds_alternative<TimedOut>(r))
          throw ConnectError(ConnectError::Kind::timeout, "no CONNACK within timeout");
        if (std::holds_alternative<Closed>(r))
          throw ConnectError(ConnectError::Kind::transport, "connection closed before CONNACK");
        if (const auto* ack = std::get_if<Connack>(&std::get<Packet>(r))) {
          if (ack->return_code != 0)
            throw ConnectError(ConnectError::Kind::refused,
                               "broker refused with code " + std::to_string(ack->return_code), ack->return_code);
          break;
        }
      }
    } catch (const ConnectError&) {
      throw;
    } catch (const Error& e) {
      throw ConnectError(ConnectError::Kind::transport, e.what());
    }
    s.connected_ = true;
    return s;
  }

  // TCP connect to host:port.
  static Session connect(std::string_view address, ConnectOptions options) {
    std::unique_ptr<Stream> stream;
    try {
      stream = TcpStream::connect(address, options.timeout);
    } catch (const TransportError& e) {
      throw ConnectError(ConnectError::Kind::transport, e.what());
    }
    return connect(std::move(stream), std::move(options));
  }

  Session(Session&&) noexcept = default;
  Session& operator=(Session&&) noexcept = default;
  ~Session() {
    if (stream_) {
      if (connected_) {
        try {
          send(Disconnect{});
        } catch (const Error&) {
        }
      }
      stream_->shutdown();
    }
  }

  bool connected() const noexcept { return connected_; }
  const std::string& client_id() const noexcept { return options_.client_id; }

  // Fire-and-forget: exactly one PUBLISH written, nothing awaited.
  void publish_qos0(std::string_view topic, std::span<const std::uint8_t> payload) {
    require_connected();
    if (!valid_topic_name(topic)) throw TopicError("publish topic must be non-empty and wildcard-free");
    send(Publish{std::string(topic), Bytes(payload.begin(), payload.end()), false});
  }
  void publish_qos0(std::string_view topic, std::string_view payload) {
    publish_qos0(topic, std::span(reinterpret_cast<const std::uint8_t*>(payload.data()), payload.size()));
  }

  // Returns once the broker has acknowledged; messages arriving meanwhile are queued.
  void subscribe(std::string_view filter) {
    require_connected();
    TopicFilter parsed(filter);
    const std::uint16_t id = next_packet_id_++;
    if (next_packet_id_ == 0) next_packet_id_ = 1;
    send(Subscribe{id, {{parsed.str(), 0}}});
    const auto deadline = std::chrono::steady_clock::now() + options_.timeout;
    while (true) {
      auto p = read_packet(remaining(deadline));
      if (!p) throw SessionError("no SUBACK within timeout for '" + parsed.str() + "'");
      if (const auto* ack = std::get_if<Suback>(&*p); ack && ack->packet_id == id) {
        if (ack->return_codes.size() != 1 || ack->return_codes[0] == kSubackFailure)
          throw SessionError("broker rejected subscription '" + parsed.str() + "'");
        return;
      }
    }
  }

  // Next delivered message, or nullopt if none arrives within `timeout`.
  std::optional<Message> poll_message(Millis timeout) {
    if (!inbox_.empty()) return pop_inbox();
    require_connected();
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    while (true) {
      auto p = read_packet(remaining(deadline));
      if (!inbox_.empty()) return pop_inbox();
      if (!p) return std::nullopt;
    }
  }

  void ping() {
    require_connected();
    send(Pingreq{});
  }

  void disconnect() {
    if (!connected_) return;
    connected_ = false;
    try {
      send(Disconnect{});
    } catch (const Error&) {
    }
    stream_->shutdown();
  }

 private:
  Session(std::unique_ptr<Stream> stream, ConnectOptions options)
      : stream_(std::move(stream)),
        options_(std::move(options)),
        reader_(std::make_unique<PacketReader>(*stream_)),
        last_send_(std::chrono::steady_clock::now()) {}

  static Millis remaining(std::chrono::steady_clock::time_point deadline) {
    return std::max(Millis{0}, std::chrono::duration_cast<Millis>(deadline - std::chrono::steady_clock::now()));
  }

  void require_connected() const {
    if (!connected_) throw SessionError("session '" + options_.client_id + "' is not connected");
  }

  void send(const Packet& p) {
    try {
      stream_->write_all(encode_packet(p));
    } catch (const TransportError& e) {
      connected_ = false;
      throw SessionError(std::string("send failed: ") + e.what());
    }
    last_send_ = std::chrono::steady_clock::now();
  }

  // Keeps the connection alive from inside blocking reads.
  void maybe_ping() {
    if (options_.keepalive == 0) return;
    if (std::chrono::steady_clock::now() - last_send_ >= std::chrono::seconds(options_.keepalive) / 2)
      send(Pingreq{});
  }

  // Next non-PUBLISH packet; PUBLISH packets go to the inbox. nullopt on timeout.
  std::optional<Packet> read_packet(Millis timeout) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    while (true) {
      maybe_ping();
      const Millis slice = options_.keepalive == 0
                               ? remaining(deadline)
                               : std::min(remaining(deadline), Millis{options_.keepalive * 250});
      ReadResult r;
      try {
        r = reader_->next(slice);
      } catch (const Error& e) {
        connected_ = false;
        throw SessionError(std::string("connection failed: ") + e.what());
      }
      if (std::holds_alternative<Closed>(r)) {
        connected_ = false;
        throw SessionError("connection closed by broker");
      }
      if (std::holds_alternative<TimedOut>(r)) {
        if (remaining(deadline).count() == 0) return std::nullopt;
        continue;
      }
      auto& p = std::get<Packet>(r);
      if (auto* pub = std::get_if<Publish>(&p)) {
        inbox_.push_back({std::move(pub->topic), std::move(pub->payload)});
        return p;
      }
      if (std::holds_alternative<Pingresp>(p)) continue;
      return p;
    }
  }

  Message pop_inbox() {
    Message m = std::move(inbox_.front());
    inbox_.pop_front();
    return m;
  }

  std::unique_ptr<Stream> stream_;
  ConnectOptions options_;
  std::unique_ptr<PacketReader> reader_;
  std::chrono::steady_clock::time_point last_send_;
  std::deque<Message> inbox_;
  std::uint16_t next_packet_id_ = 1;
  bool connected_ = false;
};

}  // namespace edgeped::mqtt
