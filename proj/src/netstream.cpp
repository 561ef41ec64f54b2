#include "netstream.hpp"

#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <sys/time.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <list>
#include <memory>
#include <mutex>
#include <thread>

namespace sbs::netstream {

const char kHelloMagic[4] = {'S', 'B', 'N', 'S'};

namespace {

constexpr std::size_t kHeaderBytes = 17;  // kind + seq + stream_time

// send() the whole buffer, tolerating partial writes. Returns false once the
// peer is gone.
bool send_all(int fd, const std::uint8_t* data, std::size_t n) {
  std::size_t sent = 0;
  while (sent < n) {
    ssize_t w = ::send(fd, data + sent, n - sent, MSG_NOSIGNAL);
    if (w < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    if (w == 0) return false;
    sent += static_cast<std::size_t>(w);
  }
  return true;
}

}  // namespace

// ---------------------------------------------------------------------------
// Codec.

void encode_message(const StreamMessage& msg, std::vector<std::uint8_t>& out) {
  if (msg.payload.size() > kMaxPayload)
    fail(Errc::invalid_argument, "payload of " + std::to_string(msg.payload.size()) +
                                     " bytes exceeds the 1 MiB message cap");
  put_u32(out, static_cast<std::uint32_t>(kHeaderBytes + msg.payload.size()));
  out.push_back(static_cast<std::uint8_t>(msg.kind));
  put_u64(out, msg.seq);
  put_i64(out, msg.stream_time_ns);
  out.insert(out.end(), msg.payload.begin(), msg.payload.end());
}

void MessageParser::feed(const std::uint8_t* data, std::size_t n) {
  if (consumed_ > 0 && consumed_ * 2 > buffer_.size()) {
    buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(consumed_));
    consumed_ = 0;
  }
  buffer_.insert(buffer_.end(), data, data + n);
}

std::optional<StreamMessage> MessageParser::next() {
  const std::size_t avail = buffer_.size() - consumed_;
  if (avail < 4) return std::nullopt;
  const std::uint8_t* p = buffer_.data() + consumed_;
  std::uint32_t len = get_u32(p);
  if (len < kHeaderBytes || len > kHeaderBytes + kMaxPayload)
    fail(Errc::bad_format, "message length " + std::to_string(len) + " is outside the protocol");
  if (avail < 4 + static_cast<std::size_t>(len)) return std::nullopt;

  StreamMessage msg;
  std::uint8_t kind = p[4];
  if (kind > static_cast<std::uint8_t>(MessageKind::EventMarker))
    fail(Errc::bad_format, "unknown message kind " + std::to_string(kind));
  msg.kind = static_cast<MessageKind>(kind);
  msg.seq = get_u64(p + 5);
  msg.stream_time_ns = get_i64(p + 13);
  msg.payload.assign(p + 4 + kHeaderBytes, p + 4 + len);
  consumed_ += 4 + static_cast<std::size_t>(len);
  return msg;
}

// ---------------------------------------------------------------------------
// Publisher.

struct Publisher::Impl {
  struct Sub {
    int fd = -1;
    std::uint8_t mask = 0;
    BoundedQueue<std::shared_ptr<const std::vector<std::uint8_t>>> queue;
    std::thread writer;
    std::atomic<bool> dead{false};

    explicit Sub(std::size_t capacity) : queue(capacity) {}
  };

  Options options;
  int listen_fd = -1;
  int port = 0;
  std::thread accept_thread;

  mutable std::mutex mu;
  std::list<std::unique_ptr<Sub>> subs;      // registered subscribers
  std::list<std::unique_ptr<Sub>> retired;   // awaiting join in close()
  std::uint64_t seq[6] = {0, 0, 0, 0, 0, 0};
  PublisherStats stats;
  bool closed = false;

  void accept_loop() {
    while (true) {
      int cfd = ::accept(listen_fd, nullptr, nullptr);
      if (cfd < 0) {
        if (errno == EINTR) continue;
        return;  // listener closed
      }
      handshake_and_register(cfd);
    }
  }

  // Handshake runs inline in the accept loop; it is two tiny transfers with a
  // receive timeout, so a stuck client cannot hold the listener for long.
  void handshake_and_register(int cfd) {
    timeval tv{};
    tv.tv_sec = 5;
    ::setsockopt(cfd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
    int one = 1;
    ::setsockopt(cfd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);

    std::uint8_t hello[5];
    std::memcpy(hello, kHelloMagic, 4);
    hello[4] = kProtocolVersion;
    if (!send_all(cfd, hello, sizeof hello)) {
      ::close(cfd);
      return;
    }
    std::uint8_t mask = 0;
    ssize_t got = ::recv(cfd, &mask, 1, 0);
    if (got != 1) {
      ::close(cfd);
      return;
    }

    auto sub = std::make_unique<Sub>(options.queue_capacity);
    sub->fd = cfd;
    sub->mask = mask;
    Sub* raw = sub.get();
    std::lock_guard<std::mutex> lock(mu);
    if (closed) {
      ::close(cfd);
      return;
    }
    sub->writer = std::thread([raw] { writer_loop(raw); });
    subs.push_back(std::move(sub));
  }

  static void writer_loop(Sub* sub) {
    while (auto item = sub->queue.pop()) {
      if (!send_all(sub->fd, (*item)->data(), (*item)->size())) {
        sub->dead.store(true);
        return;
      }
    }
    // Queue closed and drained: finish the stream cleanly.
    ::shutdown(sub->fd, SHUT_WR);
  }
};

Publisher::Publisher(int port, const Options& options) : impl_(new Impl) {
  impl_->options = options;
  if (options.queue_capacity == 0)
    fail(Errc::invalid_argument, "queue capacity must be positive");

  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) fail(Errc::net, std::string("BindFailure: socket: ") + std::strerror(errno));
  int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_ANY);
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 ||
      ::listen(fd, 16) != 0) {
    int err = errno;
    ::close(fd);
    fail(Errc::net, std::string("BindFailure: port ") + std::to_string(port) + ": " +
                        std::strerror(err));
  }
  socklen_t len = sizeof addr;
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  impl_->listen_fd = fd;
  impl_->port = ntohs(addr.sin_port);
  impl_->accept_thread = std::thread([this] { impl_->accept_loop(); });
}

Publisher::~Publisher() {
  try {
    close();
  } catch (...) {
  }
}

int Publisher::port() const { return impl_->port; }

std::uint64_t Publisher::publish(MessageKind kind, std::int64_t stream_time_ns,
                                 std::vector<std::uint8_t> payload) {
  if (payload.size() > kMaxPayload)
    fail(Errc::invalid_argument, "payload of " + std::to_string(payload.size()) +
                                     " bytes exceeds the 1 MiB message cap");
  std::lock_guard<std::mutex> lock(impl_->mu);
  if (impl_->closed) fail(Errc::runtime, "publish on a closed publisher");

  StreamMessage msg;
  msg.kind = kind;
  msg.seq = impl_->seq[static_cast<std::size_t>(kind)]++;
  msg.stream_time_ns = stream_time_ns;
  msg.payload = std::move(payload);
  auto encoded = std::make_shared<std::vector<std::uint8_t>>();
  encoded->reserve(4 + kHeaderBytes + msg.payload.size());
  encode_message(msg, *encoded);
  ++impl_->stats.published;

  for (auto it = impl_->subs.begin(); it != impl_->subs.end();) {
    Impl::Sub* sub = it->get();
    bool drop = sub->dead.load();
    if (!drop && (sub->mask & kind_bit(kind))) {
      if (!sub->queue.try_push(encoded)) {
        // Slow consumer: sever it rather than stall the pipeline.
        drop = true;
        ++impl_->stats.lag_disconnects;
        SBS_LOG_WARN("netstream: dropping subscriber that stopped reading");
      }
    }
    if (drop) {
      ::shutdown(sub->fd, SHUT_RDWR);  // unblocks a writer stuck in send()
      sub->queue.close();
      impl_->retired.push_back(std::move(*it));
      it = impl_->subs.erase(it);
    } else {
      ++it;
    }
  }
  return msg.seq;
}

PublisherStats Publisher::stats() const {
  std::lock_guard<std::mutex> lock(impl_->mu);
  PublisherStats s = impl_->stats;
  s.active_subscribers = 0;
  for (const auto& sub : impl_->subs)
    if (!sub->dead.load()) ++s.active_subscribers;
  return s;
}

void Publisher::close() {
  {
    std::lock_guard<std::mutex> lock(impl_->mu);
    if (impl_->closed) return;
    impl_->closed = true;
  }
  // Stop the accept loop first so no new subscriber can register.
  ::shutdown(impl_->listen_fd, SHUT_RDWR);
  ::close(impl_->listen_fd);
  if (impl_->accept_thread.joinable()) impl_->accept_thread.join();

  std::list<std::unique_ptr<Impl::Sub>> all;
  {
    std::lock_guard<std::mutex> lock(impl_->mu);
    all.splice(all.end(), impl_->subs);
    all.splice(all.end(), impl_->retired);
  }
  // Close queues so writers flush what is buffered and then end the streams.
  for (auto& sub : all) sub->queue.close();
  for (auto& sub : all) {
    if (sub->writer.joinable()) sub->writer.join();
    ::close(sub->fd);
  }
}

// ---------------------------------------------------------------------------
// Subscriber.

struct Subscriber::Impl {
  int fd = -1;
  MessageParser parser;
  bool ended = false;

  ~Impl() {
    if (fd >= 0) ::close(fd);
  }
};

Subscriber::Subscriber(const std::string& host, int port, std::uint8_t kinds_mask)
    : impl_(new Impl) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  int rc = ::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res);
  if (rc != 0)
    fail(Errc::net, "cannot resolve " + host + ": " + gai_strerror(rc));
  int fd = -1;
  int err = 0;
  for (addrinfo* ai = res; ai; ai = ai->ai_next) {
    fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
    err = errno;
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  if (fd < 0)
    fail(Errc::net, "cannot connect to " + host + ":" + std::to_string(port) + ": " +
                        std::strerror(err));
  impl_->fd = fd;

  std::uint8_t hello[5];
  std::size_t got = 0;
  while (got < sizeof hello) {
    ssize_t r = ::recv(fd, hello + got, sizeof hello - got, 0);
    if (r <= 0) fail(Errc::bad_format, "server closed during the hello exchange");
    got += static_cast<std::size_t>(r);
  }
  if (std::memcmp(hello, kHelloMagic, 4) != 0)
    fail(Errc::bad_format, "peer is not a netstream server (bad hello magic)");
  if (hello[4] != kProtocolVersion)
    fail(Errc::bad_format, "unsupported protocol version " + std::to_string(hello[4]));
  if (!send_all(fd, &kinds_mask, 1))
    fail(Errc::disconnected, "Disconnected: could not send the subscription mask");
}

Subscriber::~Subscriber() = default;

std::optional<StreamMessage> Subscriber::next() {
  if (impl_->ended) return std::nullopt;
  while (true) {
    if (auto msg = impl_->parser.next()) return msg;
    std::uint8_t chunk[65536];
    ssize_t r = ::recv(impl_->fd, chunk, sizeof chunk, 0);
    if (r < 0) {
      if (errno == EINTR) continue;
      impl_->ended = true;
      fail(Errc::disconnected, std::string("Disconnected: ") + std::strerror(errno));
    }
    if (r == 0) {
      impl_->ended = true;
      if (impl_->parser.pending_bytes() > 0)
        fail(Errc::disconnected, "Disconnected: stream ended inside a message");
      return std::nullopt;
    }
    impl_->parser.feed(chunk, static_cast<std::size_t>(r));
  }
}

void Subscriber::close() {
  if (impl_->fd >= 0) {
    ::shutdown(impl_->fd, SHUT_RDWR);
    ::close(impl_->fd);
    impl_->fd = -1;
  }
  impl_->ended = true;
}

}  // namespace sbs::netstream
