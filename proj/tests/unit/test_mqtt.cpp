#include <gtest/gtest.h>

#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <thread>

#include "edgeped/mqtt/broker.hpp"
#include "edgeped/mqtt/client.hpp"

using namespace edgeped;
using namespace edgeped::mqtt;
using namespace std::chrono_literals;

namespace {

std::map<std::string, Bytes> golden_packets() {
  std::ifstream f(std::string(EDGEPED_GOLDEN_DIR) + "/mqtt_packets.txt");
  std::map<std::string, Bytes> out;
  for (std::string line; std::getline(f, line);) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream in(line);
    std::string name, hex;
    in >> name;
    auto& bytes = out[name];
    while (in >> hex) bytes.push_back(static_cast<std::uint8_t>(std::stoul(hex, nullptr, 16)));
  }
  return out;
}

std::map<std::string, Packet> expected_packets() {
  return {{"connect", Connect{"c1", 60, true}},
          {"connack", Connack{false, 0}},
          {"publish", Publish{"a/b", {'x'}, false}},
          {"subscribe", Subscribe{1, {{"a/+", 0}}}},
          {"suback", Suback{1, {0}}},
          {"pingreq", Pingreq{}},
          {"pingresp", Pingresp{}},
          {"disconnect", Disconnect{}}};
}

Session client(Broker& b, const std::string& id, std::uint16_t keepalive = 60) {
  return Session::connect(b.connect_in_process(), {id, keepalive});
}

std::string text(const Bytes& b) { return {b.begin(), b.end()}; }

// Raw protocol peer for tests that need to misbehave.
struct RawPeer {
  std::unique_ptr<Stream> stream;
  PacketReader reader;
  explicit RawPeer(std::unique_ptr<Stream> s) : stream(std::move(s)), reader(*stream) {}
  void send(const Packet& p) { stream->write_all(encode_packet(p)); }
  ReadResult next(Millis t = 2000ms) { return reader.next(t); }
};

}  // namespace

TEST(Wire, GoldenFixturesForAllKinds) {
  const auto golden = golden_packets();
  const auto expected = expected_packets();
  ASSERT_EQ(golden.size(), 8u);
  for (const auto& [name, packet] : expected) {
    SCOPED_TRACE(name);
    ASSERT_TRUE(golden.contains(name));
    EXPECT_EQ(encode_packet(packet), golden.at(name));
    EXPECT_EQ(decode_packet(golden.at(name)), packet);
    EXPECT_EQ(packet_name(packet), [&] {
      std::string upper = name;
      for (char& c : upper) c = static_cast<char>(std::toupper(c));
      return upper;
    }());
  }
}

TEST(Wire, PublishExample) {
  EXPECT_EQ(encode_packet(Publish{"a/b", {'x'}}), (Bytes{0x30, 0x06, 0x00, 0x03, 0x61, 0x2F, 0x62, 0x78}));
}

TEST(Varint, KnownEncodings) {
  EXPECT_EQ(encode_remaining_length(0), (Bytes{0x00}));
  EXPECT_EQ(encode_remaining_length(127), (Bytes{0x7F}));
  EXPECT_EQ(encode_remaining_length(128), (Bytes{0x80, 0x01}));
  EXPECT_EQ(encode_remaining_length(321), (Bytes{0xC1, 0x02}));
  EXPECT_EQ(encode_remaining_length(16383), (Bytes{0xFF, 0x7F}));
  EXPECT_EQ(encode_remaining_length(16384), (Bytes{0x80, 0x80, 0x01}));
  EXPECT_EQ(encode_remaining_length(268435455), (Bytes{0xFF, 0xFF, 0xFF, 0x7F}));
  EXPECT_THROW(encode_remaining_length(268435456), ProtocolError);
}

namespace {

void check_varint(std::uint32_t n) {
  const auto bytes = encode_remaining_length(n);
  const std::size_t expected_len = n < 128 ? 1 : n < 16384 ? 2 : n < 2097152 ? 3 : 4;
  ASSERT_EQ(bytes.size(), expected_len) << n;
  const auto back = decode_remaining_length(bytes);
  ASSERT_TRUE(back) << n;
  ASSERT_EQ(back->value, n);
  ASSERT_EQ(back->length, bytes.size());
  // any strict prefix asks for more input
  ASSERT_FALSE(decode_remaining_length(std::span(bytes).first(bytes.size() - 1))) << n;
}

}  // namespace

TEST(Varint, ExhaustiveSmallRange) {
  for (std::uint32_t n = 0; n <= 16383; ++n) check_varint(n);
}

TEST(Varint, StratifiedFullRange) {
  std::mt19937_64 rng(1);
  // each byte-length class, its edges, and random interior points
  const std::uint32_t edges[] = {0, 127, 128, 16383, 16384, 2097151, 2097152, 268435455};
  for (auto e : edges) check_varint(e);
  const std::pair<std::uint32_t, std::uint32_t> strata[] = {
      {0, 127}, {128, 16383}, {16384, 2097151}, {2097152, 268435455}};
  for (auto [lo, hi] : strata) {
    std::uniform_int_distribution<std::uint32_t> u(lo, hi);
    for (int i = 0; i < 20000; ++i) check_varint(u(rng));
  }
}

TEST(Varint, FifthContinuationByteIsMalformed) {
  const Bytes bad{0xFF, 0xFF, 0xFF, 0xFF, 0x01};
  EXPECT_THROW(decode_remaining_length(bad), ProtocolError);
}

TEST(Wire, DecodeRejectsBadFrames) {
  using K = ProtocolError::Kind;
  auto kind_of = [](Bytes b) {
    try {
      decode_packet(b);
    } catch (const ProtocolError& e) {
      return e.kind();
    }
    return K::malformed_varint;  // sentinel
  };
  EXPECT_EQ(kind_of({0x00, 0x00}), K::reserved_type);
  EXPECT_EQ(kind_of({0xF0, 0x00}), K::reserved_type);
  EXPECT_EQ(kind_of({0x30, 0x06, 0x00, 0x03, 0x61}), K::length_overrun);
  EXPECT_EQ(kind_of({0xC0, 0x00, 0x00}), K::length_overrun);
  EXPECT_EQ(kind_of({0x32, 0x07, 0x00, 0x03, 0x61, 0x2F, 0x62, 0x00, 0x01}), K::unsupported_type);  // QoS 1
  EXPECT_EQ(kind_of({0x40, 0x02, 0x00, 0x01}), K::unsupported_type);  // PUBACK
  EXPECT_EQ(kind_of({0x80, 0x08, 0x00, 0x01, 0x00, 0x03, 0x61, 0x2F, 0x2B, 0x00}), K::malformed);  // flags
  EXPECT_EQ(kind_of({0x30, 0x04, 0x00, 0x01, 0x2B, 0x78}), K::malformed);  // wildcard topic
}

TEST(Wire, RandomPacketsRoundTrip) {
  std::mt19937_64 rng(2);
  auto word = [&] {
    std::string s(1 + rng() % 8, 'a');
    for (char& c : s) c = static_cast<char>('a' + rng() % 26);
    return s;
  };
  for (int i = 0; i < 2000; ++i) {
    Packet p;
    switch (rng() % 8) {
      case 0: p = Connect{word(), static_cast<std::uint16_t>(rng()), rng() % 2 == 0}; break;
      case 1: p = Connack{rng() % 2 == 0, static_cast<std::uint8_t>(rng() % 6)}; break;
      case 2: {
        Bytes payload(rng() % 300);
        for (auto& b : payload) b = static_cast<std::uint8_t>(rng());
        p = Publish{word() + "/" + word(), payload, rng() % 2 == 0};
        break;
      }
      case 3: p = Subscribe{static_cast<std::uint16_t>(1 + rng() % 65535), {{word() + "/+", 0}, {"#", 0}}}; break;
      case 4: p = Suback{static_cast<std::uint16_t>(rng()), {0, kSubackFailure}}; break;
      case 5: p = Pingreq{}; break;
      case 6: p = Pingresp{}; break;
      default: p = Disconnect{}; break;
    }
    const auto bytes = encode_packet(p);
    ASSERT_EQ(frame_size(bytes), bytes.size());
    ASSERT_EQ(decode_packet(bytes), p);
  }
}

TEST(Topic, TruthTable) {
  struct Row {
    const char* filter;
    const char* topic;
    bool match;
  };
  const Row rows[] = {
      {"a/b", "a/b", true},
      {"a/b", "a/c", false},
      {"a/+", "a/b", true},
      {"a/+", "a/b/c", false},
      {"a/+/c", "a/x/c", true},
      {"+/+", "a/b", true},
      {"+", "a", true},
      {"+", "a/b", false},
      {"a/#", "a", true},
      {"a/#", "a/b/c", true},
      {"a/#", "b/a", false},
      {"#", "anything/at/all", true},
      {"intersection/+/detections", "intersection/17/detections", true},
      {"intersection/+/detections", "intersection/17/status", false},
      {"a//b", "a//b", true},
      {"a/+/b", "a//b", true},
      {"a/b", "a/b/", false},
  };
  for (const auto& r : rows) EXPECT_EQ(topic_matches(TopicFilter(r.filter), r.topic), r.match) << r.filter << " ~ " << r.topic;
}

TEST(Topic, InvalidFiltersAndTopics) {
  for (const char* bad : {"", "a/#/b", "a#", "a/b+", "+a"}) EXPECT_THROW(TopicFilter{bad}, TopicError) << bad;
  EXPECT_THROW(topic_matches(TopicFilter("a/+"), "a/+"), TopicError);
  EXPECT_THROW(topic_matches(TopicFilter("a/+"), ""), TopicError);
  EXPECT_EQ(detection_topic("7"), "intersection/7/detections");
}

TEST(Transport, ParseHostPort) {
  EXPECT_EQ(parse_host_port("127.0.0.1:1883").port, 1883);
  EXPECT_EQ(parse_host_port("localhost:0").host, "localhost");
  EXPECT_THROW(parse_host_port("nohost"), TransportError);
  EXPECT_THROW(parse_host_port("h:99999"), TransportError);
}

TEST(Broker, InProcessPublishSubscribe) {
  Broker broker;
  auto sub = client(broker, "sub");
  sub.subscribe("intersection/+/detections");
  auto pub = client(broker, "pub");
  pub.publish_qos0("intersection/3/detections", "hello");
  pub.publish_qos0("intersection/3/status", "ignored");
  pub.publish_qos0("intersection/4/detections", "world");
  auto m1 = sub.poll_message(2s), m2 = sub.poll_message(2s);
  ASSERT_TRUE(m1 && m2);
  EXPECT_EQ(text(m1->payload), "hello");
  EXPECT_EQ(m2->topic, "intersection/4/detections");
  EXPECT_FALSE(sub.poll_message(100ms));
}

TEST(Broker, FanOutToEverySubscriber) {
  Broker broker;
  std::vector<Session> subs;
  for (int i = 0; i < 3; ++i) {
    subs.push_back(client(broker, "s" + std::to_string(i)));
    subs.back().subscribe(i == 0 ? "#" : i == 1 ? "a/+" : "a/b");
  }
  auto pub = client(broker, "p");
  pub.publish_qos0("a/b", "m");
  for (auto& s : subs) {
    auto m = s.poll_message(2s);
    ASSERT_TRUE(m);
    EXPECT_EQ(text(m->payload), "m");
    EXPECT_FALSE(s.poll_message(50ms));  // overlapping filters on one session: still one copy
  }
}

TEST(Broker, OverlappingFiltersDeliverOnce) {
  Broker broker;
  auto sub = client(broker, "s");
  sub.subscribe("a/#");
  sub.subscribe("a/+");
  auto pub = client(broker, "p");
  pub.publish_qos0("a/b", "once");
  EXPECT_TRUE(sub.poll_message(2s));
  EXPECT_FALSE(sub.poll_message(100ms));
}

TEST(Broker, RoutingMatchesBruteForce) {
  std::mt19937_64 rng(3);
  const std::vector<std::string> filters{"#", "a/#", "a/+", "+/b", "a/b", "b/+/c", "+/+/+", "c"};
  const std::vector<std::string> topics{"a", "a/b", "a/c", "b/b", "b/x/c", "c", "a/b/c", "c/d"};
  Broker broker;
  std::vector<Session> subs;
  std::vector<std::vector<TopicFilter>> chosen;
  for (int i = 0; i < 5; ++i) {
    subs.push_back(client(broker, "s" + std::to_string(i)));
    chosen.emplace_back();
    for (int k = 0; k < 2; ++k) {
      const auto& f = filters[rng() % filters.size()];
      subs.back().subscribe(f);
      chosen.back().emplace_back(f);
    }
  }
  auto pub = client(broker, "p");
  for (const auto& t : topics) pub.publish_qos0(t, t);
  for (std::size_t i = 0; i < subs.size(); ++i) {
    std::vector<std::string> expected;
    for (const auto& t : topics)
      if (std::any_of(chosen[i].begin(), chosen[i].end(), [&](const TopicFilter& f) { return f.matches(t); }))
        expected.push_back(t);
    std::vector<std::string> got;
    while (auto m = subs[i].poll_message(got.size() < expected.size() ? 2000ms : 100ms)) got.push_back(m->topic);
    EXPECT_EQ(got, expected) << "subscriber " << i;
  }
}

TEST(Broker, ClientIdTakeoverClosesOldSession) {
  Broker broker;
  auto first = client(broker, "dup");
  auto second = client(broker, "dup");
  EXPECT_THROW(
      {
        for (int i = 0; i < 50; ++i) first.poll_message(100ms);
      },
      SessionError);
  EXPECT_FALSE(first.connected());
  second.subscribe("x");
  auto pub = client(broker, "p");
  pub.publish_qos0("x", "still works");
  EXPECT_TRUE(second.poll_message(2s));
  EXPECT_EQ(broker.stats().takeovers, 1u);
}

TEST(Broker, KeepaliveExpiryDropsSilentClient) {
  Broker broker;
  RawPeer peer(broker.connect_in_process());
  peer.send(Connect{"quiet", 1, true});
  ASSERT_EQ(std::get<Connack>(std::get<Packet>(peer.next())).return_code, 0);
  const auto start = std::chrono::steady_clock::now();
  const auto r = peer.next(5000ms);
  const auto waited = std::chrono::steady_clock::now() - start;
  EXPECT_TRUE(std::holds_alternative<Closed>(r));
  EXPECT_GE(waited, 1400ms);
  EXPECT_LT(waited, 3000ms);
  EXPECT_EQ(broker.stats().keepalive_expiries, 1u);
}

TEST(Broker, PingKeepsSessionAlive) {
  Broker broker;
  RawPeer peer(broker.connect_in_process());
  peer.send(Connect{"pinger", 1, true});
  ASSERT_TRUE(std::holds_alternative<Packet>(peer.next()));
  for (int i = 0; i < 3; ++i) {
    std::this_thread::sleep_for(800ms);
    peer.send(Pingreq{});
    auto r = peer.next();
    ASSERT_TRUE(std::holds_alternative<Packet>(r));
    EXPECT_TRUE(std::holds_alternative<Pingresp>(std::get<Packet>(r)));
  }
}

TEST(Broker, RefusesBadConnects) {
  Broker broker;
  RawPeer empty_id(broker.connect_in_process());
  empty_id.send(Connect{"", 60, true});
  EXPECT_EQ(std::get<Connack>(std::get<Packet>(empty_id.next())).return_code, kConnackIdRejected);

  RawPeer old_protocol(broker.connect_in_process());
  old_protocol.send(Connect{"x", 60, true, "MQIsdp", 3});
  EXPECT_EQ(std::get<Connack>(std::get<Packet>(old_protocol.next())).return_code, kConnackBadProtocol);

  RawPeer garbage(broker.connect_in_process());
  const Bytes junk{0x00, 0x00};
  garbage.stream->write_all(junk);
  EXPECT_TRUE(std::holds_alternative<Closed>(garbage.next()));

  EXPECT_THROW(Session::connect(broker.connect_in_process(), {"", 60}), ConnectError);
}

TEST(Broker, TcpLoopback) {
  auto broker = run_broker("127.0.0.1:0");
  ASSERT_NE(broker->port(), 0);
  const auto address = "127.0.0.1:" + std::to_string(broker->port());
  auto sub = Session::connect(address, {"tcp-sub"});
  sub.subscribe("t/#");
  auto pub = Session::connect(address, {"tcp-pub"});
  const std::string big(5000, 'z');  // multi-byte remaining length over a real socket
  pub.publish_qos0("t/1", big);
  auto m = sub.poll_message(2s);
  ASSERT_TRUE(m);
  EXPECT_EQ(text(m->payload), big);
  broker->stop();
  EXPECT_THROW(
      {
        for (int i = 0; i < 50; ++i) sub.poll_message(100ms);
      },
      SessionError);
}

TEST(Client, UnreachableBrokerFailsFast) {
  // Bind then close a listener so the port is known to be free.
  std::uint16_t port;
  {
    TcpListener l("127.0.0.1:0");
    port = l.port();
  }
  const auto start = std::chrono::steady_clock::now();
  try {
    Session::connect("127.0.0.1:" + std::to_string(port), {"c", 60, 1000ms});
    FAIL();
  } catch (const ConnectError& e) {
    EXPECT_EQ(e.kind(), ConnectError::Kind::transport);
  }
  EXPECT_LT(std::chrono::steady_clock::now() - start, 2000ms);
}

TEST(Client, ConnackTimeout) {
  // A listener that accepts but never answers.
  TcpListener silent("127.0.0.1:0");
  std::jthread acceptor([&] { auto s = silent.accept(3000ms); std::this_thread::sleep_for(1500ms); });
  try {
    Session::connect("127.0.0.1:" + std::to_string(silent.port()), {"c", 60, 500ms});
    FAIL();
  } catch (const ConnectError& e) {
    EXPECT_EQ(e.kind(), ConnectError::Kind::timeout);
  }
}

TEST(Client, RejectsUseAfterDisconnect) {
  Broker broker;
  auto s = client(broker, "c");
  s.disconnect();
  EXPECT_THROW(s.publish_qos0("a", "b"), SessionError);
  EXPECT_THROW(s.subscribe("a"), SessionError);
  auto live = client(broker, "d");
  EXPECT_THROW(live.publish_qos0("a/+", "b"), TopicError);
  EXPECT_THROW(live.subscribe("a/#/b"), TopicError);
}
