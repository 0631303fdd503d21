#pragma once

// MQTT 3.1.1 wire format for the packet kinds a QoS 0 publish/subscribe
// deployment needs: CONNECT, CONNACK, PUBLISH, SUBSCRIBE, SUBACK, PINGREQ,
// PINGRESP and DISCONNECT.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "edgeped/error.hpp"

namespace edgeped::mqtt {

using Bytes = std::vector<std::uint8_t>;

inline constexpr std::uint32_t kMaxRemainingLength = 268435455;  // 0xFF 0xFF 0xFF 0x7F

class ProtocolError : public Error {
 public:
  enum class Kind { malformed_varint, reserved_type, unsupported_type, length_overrun, malformed };

  ProtocolError(Kind kind, const std::string& detail) : Error("mqtt protocol: " + detail), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

struct Connect {
  std::string client_id;
  std::uint16_t keepalive = 60;
  bool clean_session = true;
  std::string protocol_name = "MQTT";
  std::uint8_t protocol_level = 4;
  friend bool operator==(const Connect&, const Connect&) = default;
};

struct Connack {
  bool session_present = false;
  std::uint8_t return_code = 0;
  friend bool operator==(const Connack&, const Connack&) = default;
};

// QoS 0 only: no packet identifier on the wire.
struct Publish {
  std::string topic;
  Bytes payload;
  bool retain = false;
  friend bool operator==(const Publish&, const Publish&) = default;
};

struct Subscription {
  std::string filter;
  std::uint8_t max_qos = 0;
  friend bool operator==(const Subscription&, const Subscription&) = default;
};

struct Subscribe {
  std::uint16_t packet_id = 1;
  std::vector<Subscription> subscriptions;
  friend bool operator==(const Subscribe&, const Subscribe&) = default;
};

inline constexpr std::uint8_t kSubackFailure = 0x80;

struct Suback {
  std::uint16_t packet_id = 1;
  std::vector<std::uint8_t> return_codes;
  friend bool operator==(const Suback&, const Suback&) = default;
};

struct Pingreq {
  friend bool operator==(const Pingreq&, const Pingreq&) = default;
};
struct Pingresp {
  friend bool operator==(const Pingresp&, const Pingresp&) = default;
};
struct Disconnect {
  friend bool operator==(const Disconnect&, const Disconnect&) = default;
};

using Packet = std::variant<Connect, Connack, Publish, Subscribe, Suback, Pingreq, Pingresp, Disconnect>;

enum class PacketType : std::uint8_t {
  connect = 1,
  connack = 2,
  publish = 3,
  subscribe = 8,
  suback = 9,
  pingreq = 12,
  pingresp = 13,
  disconnect = 14,
};

inline std::string_view packet_name(const Packet& p) {
  static constexpr std::string_view names[] = {"CONNECT", "CONNACK",  "PUBLISH",  "SUBSCRIBE",
                                               "SUBACK",  "PINGREQ", "PINGRESP", "DISCONNECT"};
  return names[p.index()];
}

// ---------------------------------------------------------------------------
// Remaining length: base-128, low 7 bits first, continuation in bit 7.

inline void encode_remaining_length(std::uint32_t n, Bytes& out) {
  if (n > kMaxRemainingLength)
    throw ProtocolError(ProtocolError::Kind::malformed_varint,
                        "remaining length " + std::to_string(n) + " exceeds " + std::to_string(kMaxRemainingLength));
  do {
    std::uint8_t byte = n % 128;
    n /= 128;
    if (n > 0) byte |= 0x80;
    out.push_back(byte);
  } while (n > 0);
}

inline Bytes encode_remaining_length(std::uint32_t n) {
  Bytes out;
  encode_remaining_length(n, out);
  return out;
}

struct VarintResult {
  std::uint32_t value = 0;
  std::size_t length = 0;  // bytes consumed
};

// nullopt: more bytes needed.
inline std::optional<VarintResult> decode_remaining_length(std::span<const std::uint8_t> bytes) {
  std::uint32_t value = 0, multiplier = 1;
  for (std::size_t i = 0; i < 4; ++i) {
    if (i >= bytes.size()) return std::nullopt;
    value += (bytes[i] & 0x7Fu) * multiplier;
    if ((bytes[i] & 0x80u) == 0) return VarintResult{value, i + 1};
    multiplier *= 128;
  }
  throw ProtocolError(ProtocolError::Kind::malformed_varint, "remaining length uses more than 4 bytes");
}

// Total size (fixed header included) of the packet at the front of `bytes`,
// or nullopt while the fixed header is incomplete.
inline std::optional<std::size_t> frame_size(std::span<const std::uint8_t> bytes) {
  if (bytes.empty()) return std::nullopt;
  auto rl = decode_remaining_length(bytes.subspan(1));
  if (!rl) return std::nullopt;
  return 1 + rl->length + rl->value;
}

namespace detail {

inline void put_u16(Bytes& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
}

inline void put_string(Bytes& out, std::string_view s) {
  if (s.size() > 0xFFFF) throw ProtocolError(ProtocolError::Kind::malformed, "string longer than 65535 bytes");
  put_u16(out, static_cast<std::uint16_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

class Cursor {
 public:
  explicit Cursor(std::span<const std::uint8_t> body) : body_(body) {}
  std::size_t remaining() const noexcept { return body_.size() - pos_; }
  std::uint8_t u8() {
    need(1, "byte");
    return body_[pos_++];
  }
  std::uint16_t u16() {
    need(2, "u16");
    const auto v = static_cast<std::uint16_t>(body_[pos_] << 8 | body_[pos_ + 1]);
    pos_ += 2;
    return v;
  }
  std::string string() {
    const auto len = u16();
    need(len, "string");
    std::string s(reinterpret_cast<const char*>(body_.data() + pos_), len);
    pos_ += len;
    return s;
  }
  Bytes rest() {
    Bytes b(body_.begin() + static_cast<std::ptrdiff_t>(pos_), body_.end());
    pos_ = body_.size();
    return b;
  }
  void expect_end(std::string_view what) const {
    if (remaining() != 0)
      throw ProtocolError(ProtocolError::Kind::length_overrun,
                          std::string(what) + " has " + std::to_string(remaining()) + " unexpected trailing bytes");
  }

 private:
  void need(std::size_t n, std::string_view what) const {
    if (remaining() < n)
      throw ProtocolError(ProtocolError::Kind::length_overrun,
                          "field '" + std::string(what) + "' overruns the declared remaining length");
  }
  std::span<const std::uint8_t> body_;
  std::size_t pos_ = 0;
};

inline bool has_wildcard(std::string_view topic) { return topic.find_first_of("+#") != std::string_view::npos; }

}  // namespace detail

inline Bytes encode_packet(const Packet& packet) {
  Bytes body;
  std::uint8_t header = 0;
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, Connect>) {
          header = 0x10;
          detail::put_string(body, p.protocol_name);
          body.push_back(p.protocol_level);
          body.push_back(p.clean_session ? 0x02 : 0x00);
          detail::put_u16(body, p.keepalive);
          detail::put_string(body, p.client_id);
        } else if constexpr (std::is_same_v<T, Connack>) {
          header = 0x20;
          body.push_back(p.session_present ? 0x01 : 0x00);
          body.push_back(p.return_code);
        } else if constexpr (std::is_same_v<T, Publish>) {
          if (p.topic.empty() || detail::has_wildcard(p.topic))
            throw ProtocolError(ProtocolError::Kind::malformed, "PUBLISH topic must be non-empty and wildcard-free");
          header = static_cast<std::uint8_t>(0x30 | (p.retain ? 0x01 : 0x00));
          detail::put_string(body, p.topic);
          body.insert(body.end(), p.payload.begin(), p.payload.end());
        } else if constexpr (std::is_same_v<T, Subscribe>) {
          if (p.subscriptions.empty())
            throw ProtocolError(ProtocolError::Kind::malformed, "SUBSCRIBE needs at least one filter");
          header = 0x82;
          detail::put_u16(body, p.packet_id);
          for (const auto& s : p.subscriptions) {
            detail::put_string(body, s.filter);
            body.push_back(s.max_qos);
          }
        } else if constexpr (std::is_same_v<T, Suback>) {
          header = 0x90;
          detail::put_u16(body, p.packet_id);
          body.insert(body.end(), p.return_codes.begin(), p.return_codes.end());
        } else if constexpr (std::is_same_v<T, Pingreq>) {
          header = 0xC0;
        } else if constexpr (std::is_same_v<T, Pingresp>) {
          header = 0xD0;
        } else {
          header = 0xE0;
        }
      },
      packet);
  if (body.size() > kMaxRemainingLength)
    throw ProtocolError(ProtocolError::Kind::malformed_varint, "packet body too large");
  Bytes out{header};
  encode_remaining_length(static_cast<std::uint32_t>(body.size()), out);
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

// Decodes exactly one complete packet; `bytes` must hold nothing else.
inline Packet decode_packet(std::span<const std::uint8_t> bytes) {
  using K = ProtocolError::Kind;
  if (bytes.empty()) throw ProtocolError(K::length_overrun, "empty input");
  const std::uint8_t header = bytes[0];
  const std::uint8_t type = header >> 4;
  const std::uint8_t flags = header & 0x0F;
  if (type == 0 || type == 15)
    throw ProtocolError(K::reserved_type, "reserved packet type " + std::to_string(type));

  const auto rl = decode_remaining_length(bytes.subspan(1));
  if (!rl) throw ProtocolError(K::length_overrun, "fixed header truncated");
  const std::size_t total = 1 + rl->length + rl->value;
  if (bytes.size() < total)
    throw ProtocolError(K::length_overrun, "declared remaining length " + std::to_string(rl->value) +
                                               " exceeds the " + std::to_string(bytes.size() - 1 - rl->length) +
                                               " bytes available");
  if (bytes.size() > total)
    throw ProtocolError(K::length_overrun, std::to_string(bytes.size() - total) + " bytes after the packet");
  detail::Cursor in(bytes.subspan(1 + rl->length, rl->value));

  auto expect_flags = [&](std::uint8_t want, std::string_view name) {
    if (flags != want)
      throw ProtocolError(K::malformed, std::string(name) + " has invalid fixed-header flags " + std::to_string(flags));
  };

  switch (static_cast<PacketType>(type)) {
    case PacketType::connect: {
      expect_flags(0, "CONNECT");
      Connect c;
      c.protocol_name = in.string();
      c.protocol_level = in.u8();
      const std::uint8_t cflags = in.u8();
      if (cflags & 0x01) throw ProtocolError(K::malformed, "CONNECT reserved flag set");
      if (cflags & 0xFC) throw ProtocolError(K::unsupported_type, "CONNECT will/username/password are not supported");
      c.clean_session = (cflags & 0x02) != 0;
      c.keepalive = in.u16();
      c.client_id = in.string();
      in.expect_end("CONNECT");
      return c;
    }
    case PacketType::connack: {
      expect_flags(0, "CONNACK");
      Connack c;
      const std::uint8_t ack = in.u8();
      if (ack & 0xFE) throw ProtocolError(K::malformed, "CONNACK reserved bits set");
      c.session_present = ack & 0x01;
      c.return_code = in.u8();
      in.expect_end("CONNACK");
      return c;
    }
    case PacketType::publish: {
      const std::uint8_t qos = (flags >> 1) & 0x03;
      if (qos != 0) throw ProtocolError(K::unsupported_type, "PUBLISH QoS " + std::to_string(qos) + " is not supported");
      if (flags & 0x08) throw ProtocolError(K::malformed, "DUP set on a QoS 0 PUBLISH");
      Publish p;
      p.retain = flags & 0x01;
      p.topic = in.string();
      if (p.topic.empty() || detail::has_wildcard(p.topic))
        throw ProtocolError(K::malformed, "PUBLISH topic must be non-empty and wildcard-free");
      p.payload = in.rest();
      return p;
    }
    case PacketType::subscribe: {
      expect_flags(0x02, "SUBSCRIBE");
      Subscribe s;
      s.packet_id = in.u16();
      while (in.remaining() > 0) {
        Subscription sub;
        sub.filter = in.string();
        sub.max_qos = in.u8();
        if (sub.max_qos > 2) throw ProtocolError(K::malformed, "SUBSCRIBE requested QoS above 2");
        s.subscriptions.push_back(std::move(sub));
      }
      if (s.subscriptions.empty()) throw ProtocolError(K::malformed, "SUBSCRIBE without filters");
      return s;
    }
    case PacketType::suback: {
      expect_flags(0, "SUBACK");
      Suback s;
      s.packet_id = in.u16();
      s.return_codes = in.rest();
      return s;
    }
    case PacketType::pingreq:
      expect_flags(0, "PINGREQ");
      in.expect_end("PINGREQ");
      return Pingreq{};
    case PacketType::pingresp:
      expect_flags(0, "PINGRESP");
      in.expect_end("PINGRESP");
      return Pingresp{};
    case PacketType::disconnect:
      expect_flags(0, "DISCONNECT");
      in.expect_end("DISCONNECT");
      return Disconnect{};
  }
  throw ProtocolError(K::unsupported_type, "packet type " + std::to_string(type) + " is not supported");
}

}  // namespace edgeped::mqtt
