// Netstream tests: the message codec against hand-assembled golden bytes,
// the fan-out ordering contracts, kind filtering, and the drop-slow-consumer
// policy, all over real loopback sockets.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <chrono>
#include <fstream>
#include <thread>
#include <vector>

#include "common.hpp"
#include "netstream.hpp"

using namespace sbs;
using namespace sbs::netstream;

namespace {

std::vector<std::uint8_t> bytes(std::initializer_list<int> v) {
  std::vector<std::uint8_t> out;
  for (int x : v) out.push_back(static_cast<std::uint8_t>(x));
  return out;
}

std::vector<StreamMessage> collect(Subscriber& sub) {
  std::vector<StreamMessage> got;
  while (auto msg = sub.next()) got.push_back(std::move(*msg));
  return got;
}

bool wait_for_subscribers(Publisher& pub, int n, int timeout_ms = 2000) {
  auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms);
  while (std::chrono::steady_clock::now() < deadline) {
    if (pub.stats().active_subscribers >= n) return true;
    std::this_thread::sleep_for(std::chrono::milliseconds(1));
  }
  return false;
}

}  // namespace

TEST_CASE("codec round-trips messages through arbitrary chunking") {
  Rng rng(7);
  std::vector<StreamMessage> sent;
  std::vector<std::uint8_t> wire_bytes;
  for (int i = 0; i < 40; ++i) {
    StreamMessage msg;
    msg.kind = static_cast<MessageKind>(i % 6);
    msg.seq = static_cast<std::uint64_t>(i * 1000 + 17);
    msg.stream_time_ns = static_cast<std::int64_t>(i) * 7812500 - 3;
    msg.payload.resize(rng.below(300));
    for (auto& b : msg.payload) b = static_cast<std::uint8_t>(rng.next_u64());
    encode_message(msg, wire_bytes);
    sent.push_back(std::move(msg));
  }

  MessageParser parser;
  std::vector<StreamMessage> got;
  std::size_t pos = 0;
  while (pos < wire_bytes.size()) {
    std::size_t chunk = std::min<std::size_t>(1 + rng.below(97), wire_bytes.size() - pos);
    parser.feed(wire_bytes.data() + pos, chunk);
    pos += chunk;
    while (auto msg = parser.next()) got.push_back(std::move(*msg));
  }
  REQUIRE(got.size() == sent.size());
  for (std::size_t i = 0; i < sent.size(); ++i) CHECK(got[i] == sent[i]);
  CHECK(parser.pending_bytes() == 0);
}

TEST_CASE("golden capture: the exact bytes documented for the protocol") {
  StreamMessage msg;
  msg.kind = MessageKind::RoiPower;
  msg.seq = 0x0102030405060708ull;
  msg.stream_time_ns = 0x1122334455667788ll;
  msg.payload = {'R', 'O', 'I'};
  std::vector<std::uint8_t> encoded;
  encode_message(msg, encoded);

  std::ifstream f(std::string(SBS_GOLDEN_DIR) + "/netstream_message.bin", std::ios::binary);
  REQUIRE(f.good());
  std::vector<std::uint8_t> golden((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  CHECK(encoded == golden);

  MessageParser parser;
  parser.feed(golden.data(), golden.size());
  auto back = parser.next();
  REQUIRE(back.has_value());
  CHECK(*back == msg);
}

TEST_CASE("parser rejects lengths and kinds outside the protocol") {
  {
    MessageParser p;  // length below the fixed header
    auto junk = bytes({16, 0, 0, 0});
    p.feed(junk.data(), junk.size());
    CHECK_THROWS_AS(p.next(), sbs::Error);
  }
  {
    MessageParser p;  // length above header + 1 MiB cap
    std::vector<std::uint8_t> junk;
    put_u32(junk, 17 + (1u << 20) + 1);
    p.feed(junk.data(), junk.size());
    CHECK_THROWS_AS(p.next(), sbs::Error);
  }
  {
    MessageParser p;  // unknown kind 6
    auto junk = bytes({17, 0, 0, 0, 6, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0});
    p.feed(junk.data(), junk.size());
    CHECK_THROWS_AS(p.next(), sbs::Error);
  }

  StreamMessage big;
  big.payload.resize((1u << 20) + 1);
  std::vector<std::uint8_t> out;
  CHECK_THROWS_AS(encode_message(big, out), sbs::Error);
}

TEST_CASE("publisher fans out in order with per-kind sequence numbers") {
  Publisher pub(0);
  CHECK(pub.port() > 0);
  Subscriber sub("127.0.0.1", pub.port());
  REQUIRE(wait_for_subscribers(pub, 1));

  const int n = 120;
  for (int i = 0; i < n; ++i) {
    MessageKind kind = i % 3 == 0 ? MessageKind::RawPacket
                       : i % 3 == 1 ? MessageKind::RoiPower
                                    : MessageKind::EventMarker;
    pub.publish(kind, 1000000ll * i, bytes({i & 0xff, (i >> 8) & 0xff}));
  }
  pub.close();

  std::vector<StreamMessage> got = collect(sub);
  REQUIRE(got.size() == static_cast<std::size_t>(n));
  std::uint64_t next_seq[6] = {0, 0, 0, 0, 0, 0};
  std::int64_t last_time = -1;
  for (int i = 0; i < n; ++i) {
    const StreamMessage& m = got[static_cast<std::size_t>(i)];
    CHECK(m.payload == bytes({i & 0xff, (i >> 8) & 0xff}));
    CHECK(m.stream_time_ns == 1000000ll * i);                 // publish order kept
    CHECK(m.stream_time_ns > last_time);                      // cross-kind ordering
    last_time = m.stream_time_ns;
    CHECK(m.seq == next_seq[static_cast<std::size_t>(m.kind)]++);  // per-kind monotone
  }
  CHECK(pub.stats().published == static_cast<std::uint64_t>(n));
}

TEST_CASE("two subscribers receive identical ordered sequences") {
  Publisher pub(0);
  Subscriber s1("127.0.0.1", pub.port());
  Subscriber s2("127.0.0.1", pub.port());
  REQUIRE(wait_for_subscribers(pub, 2));

  Rng rng(11);
  for (int i = 0; i < 200; ++i) {
    std::vector<std::uint8_t> payload(rng.below(64));
    for (auto& b : payload) b = static_cast<std::uint8_t>(rng.next_u64());
    pub.publish(static_cast<MessageKind>(i % 6), i, std::move(payload));
  }
  pub.close();

  std::vector<StreamMessage> got1 = collect(s1);
  std::vector<StreamMessage> got2 = collect(s2);
  REQUIRE(got1.size() == 200);
  CHECK(got1 == got2);
}

TEST_CASE("kind mask filters messages without disturbing the sequence") {
  Publisher pub(0);
  Subscriber sub("127.0.0.1", pub.port(), kind_bit(MessageKind::RoiPower));
  REQUIRE(wait_for_subscribers(pub, 1));

  for (int i = 0; i < 90; ++i)
    pub.publish(static_cast<MessageKind>(i % 6), i, bytes({i & 0xff}));
  pub.close();

  std::vector<StreamMessage> got = collect(sub);
  REQUIRE(got.size() == 15);  // every sixth message
  for (std::size_t i = 0; i < got.size(); ++i) {
    CHECK(got[i].kind == MessageKind::RoiPower);
    CHECK(got[i].seq == i);  // the kind's own counter, gap-free
  }
}

TEST_CASE("a late subscriber joins mid-stream with increasing sequences") {
  Publisher pub(0);
  for (int i = 0; i < 50; ++i) pub.publish(MessageKind::Frame, i, {});

  Subscriber sub("127.0.0.1", pub.port());
  REQUIRE(wait_for_subscribers(pub, 1));
  for (int i = 50; i < 80; ++i) pub.publish(MessageKind::Frame, i, {});
  pub.close();

  std::vector<StreamMessage> got = collect(sub);
  REQUIRE(got.size() == 30);
  for (std::size_t i = 0; i < got.size(); ++i)
    CHECK(got[i].seq == 50 + i);  // history is not replayed, order holds
}

TEST_CASE("a subscriber that never reads is dropped without stalling publish") {
  Publisher::Options opts;
  opts.queue_capacity = 16;
  Publisher pub(0, opts);
  Subscriber stalled("127.0.0.1", pub.port());
  REQUIRE(wait_for_subscribers(pub, 1));

  // Push enough to fill the per-subscriber queue plus whatever the kernel
  // socket buffers swallow; each publish must stay fast.
  std::vector<std::uint8_t> payload(32 * 1024, 0xab);
  double worst_ms = 0.0;
  int published = 0;
  for (int i = 0; i < 400 && pub.stats().active_subscribers > 0; ++i) {
    std::int64_t t0 = monotonic_ns();
    pub.publish(MessageKind::SourceEstimate, i, payload);
    worst_ms = std::max(worst_ms, static_cast<double>(monotonic_ns() - t0) / 1e6);
    ++published;
  }

  PublisherStats st = pub.stats();
  CHECK(st.lag_disconnects == 1);
  CHECK(st.active_subscribers == 0);
  CHECK(published < 400);  // the drop happened while we were publishing
  CHECK(worst_ms < 50.0);  // no publish call waited on the network

  // From the stalled side the stream just dies: reading again ends in either
  // a clean EOF after whole messages or a mid-message disconnect.
  bool disconnected = false;
  std::size_t drained = 0;
  try {
    while (auto msg = stalled.next()) ++drained;
  } catch (const sbs::Error& e) {
    disconnected = e.code() == Errc::disconnected;
  }
  CHECK(drained < static_cast<std::size_t>(published));
  CHECK((disconnected || drained > 0));
  pub.close();
}

TEST_CASE("bind and connect failures carry the net error code") {
  Publisher pub(0);
  bool bind_failed = false;
  try {
    Publisher clash(pub.port());
  } catch (const sbs::Error& e) {
    bind_failed = e.code() == Errc::net;
  }
  CHECK(bind_failed);
  pub.close();

  bool connect_failed = false;
  try {
    Subscriber sub("127.0.0.1", 1);
  } catch (const sbs::Error& e) {
    connect_failed = e.code() == Errc::net;
  }
  CHECK(connect_failed);
}

TEST_CASE("publish rejects oversized payloads and closed publishers") {
  Publisher pub(0);
  CHECK_THROWS_AS(pub.publish(MessageKind::Frame, 0,
                              std::vector<std::uint8_t>((1u << 20) + 1)),
                  sbs::Error);
  pub.close();
  CHECK_THROWS_AS(pub.publish(MessageKind::Frame, 0, {}), sbs::Error);
  CHECK_THROWS_AS(Publisher(0, Publisher::Options{0}), sbs::Error);
}

TEST_CASE("subscriber rejects a peer that does not speak the protocol") {
  // A plain TCP server that sends garbage instead of the hello.
  Publisher decoy_holder(0);  // grabs a port we know is free after close
  int port = decoy_holder.port();
  decoy_holder.close();

  std::thread server([port] {
    int lfd = ::socket(AF_INET, SOCK_STREAM, 0);
    int one = 1;
    ::setsockopt(lfd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(static_cast<std::uint16_t>(port));
    ::bind(lfd, reinterpret_cast<sockaddr*>(&addr), sizeof addr);
    ::listen(lfd, 1);
    int cfd = ::accept(lfd, nullptr, nullptr);
    const char junk[5] = {'J', 'U', 'N', 'K', '!'};
    ::send(cfd, junk, sizeof junk, MSG_NOSIGNAL);
    ::close(cfd);
    ::close(lfd);
  });

  std::this_thread::sleep_for(std::chrono::milliseconds(50));
  bool bad_hello = false;
  try {
    Subscriber sub("127.0.0.1", port);
  } catch (const sbs::Error& e) {
    bad_hello = e.code() == Errc::bad_format;
  }
  server.join();
  CHECK(bad_hello);
}
