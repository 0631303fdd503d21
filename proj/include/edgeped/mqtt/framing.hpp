#pragma once

#include <chrono>
#include <cstddef>
#include <optional>
#include <variant>

#include "edgeped/mqtt/packet.hpp"
#include "edgeped/mqtt/transport.hpp"

namespace edgeped::mqtt {

struct Closed {};
struct TimedOut {};
using ReadResult = std::variant<Packet, TimedOut, Closed>;

// Splits a byte stream into packets. Not thread-safe; one reader per stream.
class PacketReader {
 public:
  explicit PacketReader(Stream& stream, std::size_t max_packet_bytes = 1u << 20)
      : stream_(stream), max_packet_(max_packet_bytes) {}

  // Waits at most `timeout` for a complete packet. Protocol errors propagate.
  ReadResult next(Millis timeout) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    while (true) {
      if (auto size = frame_size(buffer_)) {
        if (*size > max_packet_)
          throw ProtocolError(ProtocolError::Kind::length_overrun,
                              "packet of " + std::to_string(*size) + " bytes exceeds the limit");
        if (buffer_.size() >= *size) {
          auto packet = decode_packet(std::span(buffer_).first(*size));
          buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(*size));
          return packet;
        }
      }
      const auto left = std::chrono::duration_cast<Millis>(deadline - std::chrono::steady_clock::now());
      if (left.count() < 0) return TimedOut{};
      std::uint8_t chunk[4096];
      const auto n = stream_.read_some(chunk, left);
      if (!n) return TimedOut{};
      if (*n == 0) return Closed{};
      buffer_.insert(buffer_.end(), chunk, chunk + *n);
    }
  }

 private:
  Stream& stream_;
  std::size_t max_packet_;
  Bytes buffer_;
};

}  // namespace edgeped::mqtt
