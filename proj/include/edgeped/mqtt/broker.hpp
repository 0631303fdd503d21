#pragma once

// QoS 0 MQTT broker. One handler thread per connection; a shared routing
// table guarded by a reader/writer lock; writes to each subscriber are
// serialised by that subscriber's own mutex so delivery order per publisher
// is preserved. The same core serves TCP clients and in-process pipes.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include "edgeped/mqtt/framing.hpp"
#include "edgeped/mqtt/packet.hpp"
#include "edgeped/mqtt/topic.hpp"
#include "edgeped/mqtt/transport.hpp"

namespace edgeped::mqtt {

struct BrokerLimits {
  std::size_t max_connections = 1024;
  std::size_t max_packet_bytes = 1u << 20;
  Millis connect_timeout{5000};
};

struct BrokerStats {
  std::uint64_t connections_accepted = 0;
  std::uint64_t publishes_received = 0;
  std::uint64_t messages_delivered = 0;
  std::uint64_t protocol_errors = 0;
  std::uint64_t keepalive_expiries = 0;
  std::uint64_t takeovers = 0;
};

// CONNACK return codes (3.1.1 table 3.1).
inline constexpr std::uint8_t kConnackAccepted = 0;
inline constexpr std::uint8_t kConnackBadProtocol = 1;
inline constexpr std::uint8_t kConnackIdRejected = 2;
inline constexpr std::uint8_t kConnackUnavailable = 3;

class Broker {
 public:
  explicit Broker(BrokerLimits limits = {}) : limits_(limits) {}
  ~Broker() { stop(); }
  Broker(const Broker&) = delete;
  Broker& operator=(const Broker&) = delete;

  // Starts accepting TCP connections. Port 0 picks a free port.
  void listen(std::string_view bind_address) {
    listener_ = std::make_unique<TcpListener>(bind_address);
    acceptor_ = std::jthread([this](std::stop_token st) {
      while (!st.stop_requested()) {
        auto stream = listener_->accept(Millis{100});
        if (stream) attach(std::move(stream));
        reap();
      }
    });
  }

  std::uint16_t port() const noexcept { return listener_ ? listener_->port() : 0; }

  // Client end of a fresh in-process connection.
  std::unique_ptr<Stream> connect_in_process() {
    auto [client, server] = make_pipe();
    attach(std::move(server));
    return std::move(client);
  }

  // Serves an already-established stream on its own thread.
  void attach(std::unique_ptr<Stream> stream) {
    std::lock_guard lock(threads_mu_);
    if (stopping_) {
      stream->shutdown();
      return;
    }
    auto conn = std::make_shared<Connection>(std::move(stream));
    auto& slot = workers_.emplace_back();
    slot.conn = conn;
    slot.thread = std::jthread([this, conn, done = &slot.done] {
      serve(conn);
      done->store(true);
    });
  }

  void stop() {
    {
      std::lock_guard lock(threads_mu_);
      if (stopping_) return;
      stopping_ = true;
    }
    if (acceptor_.joinable()) {
      acceptor_.request_stop();
      listener_->shutdown();
      acceptor_.join();
    }
    std::list<Worker> workers;
    {
      std::lock_guard lock(threads_mu_);
      workers.swap(workers_);
    }
    for (auto& w : workers) w.conn->stream->shutdown();
    workers.clear();  // joins
  }

  std::size_t session_count() const {
    std::shared_lock lock(table_mu_);
    return sessions_.size();
  }

  BrokerStats stats() const {
    std::lock_guard lock(stats_mu_);
    return stats_;
  }

 private:
  struct Connection {
    explicit Connection(std::unique_ptr<Stream> s) : stream(std::move(s)) {}
    std::unique_ptr<Stream> stream;
    std::mutex write_mu;
    std::mutex subs_mu;
    std::vector<TopicFilter> filters;
    std::string client_id;

    void send(const Packet& p) { send_raw(encode_packet(p)); }
    void send_raw(const Bytes& bytes) {
      std::lock_guard lock(write_mu);
      stream->write_all(bytes);
    }
    bool wants(std::string_view topic) {
      std::lock_guard lock(subs_mu);
      return std::any_of(filters.begin(), filters.end(), [&](const TopicFilter& f) { return f.matches(topic); });
    }
  };

  struct Worker {
    std::shared_ptr<Connection> conn;
    std::atomic<bool> done{false};
    std::jthread thread;
  };

  template <class Fn>
  void bump(Fn&& fn) {
    std::lock_guard lock(stats_mu_);
    fn(stats_);
  }

  void reap() {
    std::lock_guard lock(threads_mu_);
    workers_.remove_if([](const Worker& w) { return w.done.load(); });
  }

  void serve(const std::shared_ptr<Connection>& conn) {
    PacketReader reader(*conn->stream, limits_.max_packet_bytes);
    bool registered = false;
    try {
      auto first = reader.next(limits_.connect_timeout);
      auto* packet = std::get_if<Packet>(&first);
      const auto* hello = packet ? std::get_if<Connect>(packet) : nullptr;
      if (!hello) {
        conn->stream->shutdown();
        return;
      }
      if (hello->protocol_name != "MQTT" || hello->protocol_level != 4) {
        conn->send(Connack{false, kConnackBadProtocol});
        conn->stream->shutdown();
        return;
      }
      if (hello->client_id.empty()) {
        conn->send(Connack{false, kConnackIdRejected});
        conn->stream->shutdown();
        return;
      }
      if (!register_session(conn, hello->client_id)) {
        conn->send(Connack{false, kConnackUnavailable});
        conn->stream->shutdown();
        return;
      }
      registered = true;
      bump([](BrokerStats& s) { ++s.connections_accepted; });
      conn->send(Connack{false, kConnackAccepted});

      // Keepalive 0 disables expiry; otherwise the client gets 1.5x its interval.
      const Millis idle_limit = hello->keepalive == 0 ? kNoExpiry : Millis{hello->keepalive * 1500};
      while (true) {
        auto r = reader.next(idle_limit);
        if (std::holds_alternative<Closed>(r)) break;
        if (std::holds_alternative<TimedOut>(r)) {
          bump([](BrokerStats& s) { ++s.keepalive_expiries; });
          break;
        }
        const auto& p = std::get<Packet>(r);
        if (const auto* pub = std::get_if<Publish>(&p)) {
          bump([](BrokerStats& s) { ++s.publishes_received; });
          route(*pub);
        } else if (const auto* sub = std::get_if<Subscribe>(&p)) {
          Suback ack{sub->packet_id, {}};
          {
            std::lock_guard lock(conn->subs_mu);
            for (const auto& s : sub->subscriptions) {
              try {
                TopicFilter f(s.filter);
                if (std::find(conn->filters.begin(), conn->filters.end(), f) == conn->filters.end())
                  conn->filters.push_back(std::move(f));
                ack.return_codes.push_back(0);  // granted QoS 0
              } catch (const TopicError&) {
                ack.return_codes.push_back(kSubackFailure);
              }
            }
          }
          conn->send(ack);
        } else if (std::holds_alternative<Pingreq>(p)) {
          conn->send(Pingresp{});
        } else if (std::holds_alternative<Disconnect>(p)) {
          break;
        } else {
          // CONNECT twice, or a server-to-client packet from a client.
          bump([](BrokerStats& s) { ++s.protocol_errors; });
          break;
        }
      }
    } catch (const ProtocolError&) {
      bump([](BrokerStats& s) { ++s.protocol_errors; });
    } catch (const Error&) {
      // transport failure on this connection only
    }
    conn->stream->shutdown();
    if (registered) unregister_session(conn);
  }

  static constexpr Millis kNoExpiry{24LL * 3600 * 1000};

  bool register_session(const std::shared_ptr<Connection>& conn, const std::string& id) {
    std::shared_ptr<Connection> previous;
    {
      std::unique_lock lock(table_mu_);
      auto it = sessions_.find(id);
      if (it != sessions_.end()) {
        previous = it->second;
      } else if (sessions_.size() >= limits_.max_connections) {
        return false;
      }
      conn->client_id = id;
      sessions_[id] = conn;
    }
    if (previous) {
      bump([](BrokerStats& s) { ++s.takeovers; });
      previous->stream->shutdown();
    }
    return true;
  }

  void unregister_session(const std::shared_ptr<Connection>& conn) {
    std::unique_lock lock(table_mu_);
    auto it = sessions_.find(conn->client_id);
    if (it != sessions_.end() && it->second == conn) sessions_.erase(it);
  }

  void route(const Publish& pub) {
    const Bytes wire = encode_packet(Publish{pub.topic, pub.payload, false});
    std::uint64_t delivered = 0;
    std::shared_lock lock(table_mu_);
    for (const auto& [_, target] : sessions_) {
      if (!target->wants(pub.topic)) continue;
      try {
        target->send_raw(wire);
        ++delivered;
      } catch (const Error&) {
        target->stream->shutdown();
      }
    }
    lock.unlock();
    bump([delivered](BrokerStats& s) { s.messages_delivered += delivered; });
  }

  BrokerLimits limits_;
  std::unique_ptr<TcpListener> listener_;
  std::jthread acceptor_;

  mutable std::shared_mutex table_mu_;
  std::map<std::string, std::shared_ptr<Connection>> sessions_;

  std::mutex threads_mu_;
  std::list<Worker> workers_;
  bool stopping_ = false;

  mutable std::mutex stats_mu_;
  BrokerStats stats_;
};

// Starts a TCP broker bound to `bind_address` (host:port).
inline std::unique_ptr<Broker> run_broker(std::string_view bind_address, BrokerLimits limits = {}) {
  auto broker = std::make_unique<Broker>(limits);
  broker->listen(bind_address);
  return broker;
}

}  // namespace edgeped::mqtt
