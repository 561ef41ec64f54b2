#ifndef SBS_NETSTREAM_HPP
#define SBS_NETSTREAM_HPP

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "common.hpp"

namespace sbs::netstream {

// ---------------------------------------------------------------------------
// Pub-sub message stream over TCP. Every message is
//
//   u32 length (bytes after this field, little endian)
//   u8  kind
//   u64 seq              (per kind, strictly increasing per connection)
//   i64 stream_time_ns
//   payload              (kind-specific; length - 17 bytes, <= 1 MiB)
//
// and a connection opens with the server hello "SBNS" + u8 version, answered
// by one byte from the subscriber: the bitmask of kinds it wants (bit k for
// kind k). docs/FORMATS.md holds the byte-exact layout; a golden capture
// lives in tests/golden/.

enum class MessageKind : std::uint8_t {
  RawPacket = 0,
  Frame = 1,
  SourceEstimate = 2,
  RoiPower = 3,
  FeatureVector = 4,
  EventMarker = 5,
};

constexpr std::uint8_t kAllKinds = 0x3f;  // bits 0..5
constexpr std::size_t kMaxPayload = 1u << 20;
constexpr std::uint8_t kProtocolVersion = 1;
extern const char kHelloMagic[4];  // "SBNS"

inline std::uint8_t kind_bit(MessageKind k) {
  return static_cast<std::uint8_t>(1u << static_cast<unsigned>(k));
}

struct StreamMessage {
  MessageKind kind = MessageKind::RawPacket;
  std::uint64_t seq = 0;
  std::int64_t stream_time_ns = 0;
  std::vector<std::uint8_t> payload;

  bool operator==(const StreamMessage&) const = default;
};

// Appends the framed message; throws Errc::invalid_argument past the payload
// cap.
void encode_message(const StreamMessage& msg, std::vector<std::uint8_t>& out);

// Incremental parser for the subscriber side. feed() buffers; next() returns
// a message when one is complete. Throws Errc::bad_format on an oversized
// length or unknown kind (the stream cannot be resynchronized after that).
class MessageParser {
 public:
  void feed(const std::uint8_t* data, std::size_t n);
  std::optional<StreamMessage> next();
  std::size_t pending_bytes() const { return buffer_.size() - consumed_; }

 private:
  std::vector<std::uint8_t> buffer_;
  std::size_t consumed_ = 0;
};

// ---------------------------------------------------------------------------
// Publisher: accepts subscribers, fans every published message out to those
// whose mask matches. Publishing never blocks on the network: each
// subscriber has a bounded queue drained by its own writer thread, and a
// subscriber whose queue is full when a message arrives is disconnected on
// the spot (the paper's pipeline must keep its delay stable no matter who is
// listening).

struct PublisherStats {
  std::uint64_t published = 0;            // messages accepted for fan-out
  std::uint64_t lag_disconnects = 0;      // subscribers dropped for not reading
  int active_subscribers = 0;
};

struct PublisherOptions {
  std::size_t queue_capacity = 1024;  // messages buffered per subscriber
};

class Publisher {
 public:
  using Options = PublisherOptions;

  // Binds and listens immediately; port 0 picks an ephemeral port. Throws
  // Errc::net (BindFailure) when the address cannot be bound.
  explicit Publisher(int port, const Options& options = PublisherOptions{});
  ~Publisher();

  Publisher(const Publisher&) = delete;
  Publisher& operator=(const Publisher&) = delete;

  int port() const;

  // Stamps the per-kind sequence number and hands the encoded bytes to every
  // matching subscriber. Returns the seq it assigned.
  std::uint64_t publish(MessageKind kind, std::int64_t stream_time_ns,
                        std::vector<std::uint8_t> payload);

  PublisherStats stats() const;

  // Stops accepting, closes every subscriber, joins all threads.
  void close();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// ---------------------------------------------------------------------------
// Subscriber: connects, sends its kind mask, then yields messages in arrival
// order. next() returns nullopt when the server closes cleanly and throws
// Errc::disconnected when the connection dies mid-message (which is also how
// a lag disconnect looks from this side).

class Subscriber {
 public:
  Subscriber(const std::string& host, int port, std::uint8_t kinds_mask = kAllKinds);
  ~Subscriber();

  Subscriber(const Subscriber&) = delete;
  Subscriber& operator=(const Subscriber&) = delete;

  std::optional<StreamMessage> next();
  void close();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace sbs::netstream

#endif  // SBS_NETSTREAM_HPP
