#include "ingest.hpp"

#include <netdb.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <deque>

namespace sbs::ingest {

long counter_gap(unsigned a, unsigned b) {
  if (a >= static_cast<unsigned>(wire::kCounterModulus) ||
      b >= static_cast<unsigned>(wire::kCounterModulus))
    fail(Errc::invalid_argument, "counter outside 0..=128");
  long diff = static_cast<long>(b) - static_cast<long>(a) - 1;
  diff %= wire::kCounterModulus;
  if (diff < 0) diff += wire::kCounterModulus;
  return diff;
}

std::vector<long> detect_gaps(const std::vector<unsigned>& counters) {
  std::vector<long> gaps;
  if (counters.size() < 2) return gaps;
  gaps.reserve(counters.size() - 1);
  for (std::size_t i = 1; i < counters.size(); ++i)
    gaps.push_back(counter_gap(counters[i - 1], counters[i]));
  return gaps;
}

RateEstimate estimate_rate(const std::vector<std::int64_t>& recv_times_ns,
                           const std::vector<unsigned>& counters, double resolution_s) {
  if (recv_times_ns.size() < 2)
    fail(Errc::insufficient_data, "InsufficientData: need at least 2 packets");
  if (!counters.empty() && counters.size() != recv_times_ns.size())
    fail(Errc::invalid_argument, "counters and timestamps disagree in length");
  if (!(resolution_s >= 0.0)) fail(Errc::invalid_argument, "resolution must be >= 0");

  RateEstimate est;
  est.span_s = static_cast<double>(recv_times_ns.back() - recv_times_ns.front()) / 1e9;
  if (est.span_s < 10.0)
    fail(Errc::insufficient_data, "InsufficientData: span " + format_double(est.span_s) +
                                      " s is below the 10 s minimum");

  if (counters.empty()) {
    est.steps = static_cast<long>(recv_times_ns.size()) - 1;
  } else {
    est.steps = 0;
    for (std::size_t i = 1; i < counters.size(); ++i)
      est.steps += 1 + counter_gap(counters[i - 1], counters[i]);
  }
  est.rate_hz = static_cast<double>(est.steps) / est.span_s;
  // Each end of the span carries +-resolution of timestamp uncertainty.
  est.ci_low_hz = static_cast<double>(est.steps) / (est.span_s + 2.0 * resolution_s);
  est.ci_high_hz = est.span_s > 2.0 * resolution_s
                       ? static_cast<double>(est.steps) / (est.span_s - 2.0 * resolution_s)
                       : est.rate_hz;
  return est;
}

TimingReport timing_report(const std::vector<std::int64_t>& recv_times_ns, int frame_size) {
  if (frame_size < 1) fail(Errc::invalid_argument, "frame_size must be >= 1");
  const long n = static_cast<long>(recv_times_ns.size());
  if (n < 64) fail(Errc::insufficient_data, "InsufficientData: need at least 64 packets");

  TimingReport report;
  const long boundaries = (n - 1) / frame_size + 1;  // indices 0, fs, 2fs, ...
  for (long k = 0; k + 1 < boundaries; ++k) {
    std::int64_t t0 = recv_times_ns[static_cast<std::size_t>(k * frame_size)];
    std::int64_t t1 = recv_times_ns[static_cast<std::size_t>((k + 1) * frame_size)];
    report.distances_s.push_back(static_cast<double>(t1 - t0) / 1e9);
  }
  const long m = static_cast<long>(report.distances_s.size());
  if (m < 2) fail(Errc::insufficient_data, "InsufficientData: too few frame groups");

  double acc = 0.0;
  report.running_mean_s.reserve(static_cast<std::size_t>(m));
  for (long k = 0; k < m; ++k) {
    acc += report.distances_s[static_cast<std::size_t>(k)];
    report.running_mean_s.push_back(acc / static_cast<double>(k + 1));
  }
  report.mean_distance_s = report.running_mean_s.back();

  // Periodicity: the smallest shift p under which the distance sequence maps
  // onto itself. A flat sequence (spread at clock-rounding level) is uniform
  // pacing, not compensation.
  double lo = report.distances_s[0], hi = report.distances_s[0], var = 0.0;
  for (double d : report.distances_s) {
    lo = std::min(lo, d);
    hi = std::max(hi, d);
    var += (d - report.mean_distance_s) * (d - report.mean_distance_s);
  }
  var /= static_cast<double>(m);
  if (hi - lo < 1e-4 * report.mean_distance_s) return report;

  const int p_max = static_cast<int>(std::min<long>(16, m / 2));
  for (int p = 1; p <= p_max; ++p) {
    double mismatch = 0.0;
    for (long k = 0; k + p < m; ++k) {
      double diff = report.distances_s[static_cast<std::size_t>(k)] -
                    report.distances_s[static_cast<std::size_t>(k + p)];
      mismatch += diff * diff;
    }
    mismatch /= static_cast<double>(m - p);
    if (mismatch <= 0.02 * var) {
      report.compensation_flagged = true;
      report.compensation_period_samples = p * frame_size;
      break;
    }
  }
  return report;
}

// ---------------------------------------------------------------------------

struct PacketSource::Impl {
  enum class Kind { File, Tcp, Bytes } kind = Kind::Bytes;

  wire::StreamParser parser;
  bool ended = false;

  // File replay
  std::ifstream file;
  double speed = 0.0;
  bool pacing_started = false;
  std::int64_t pace_t0_ns = 0;
  long pace_steps = 0;

  // TCP
  int fd = -1;

  // Bytes / simulator
  std::vector<std::int64_t> synth_times;
  std::size_t synth_idx = 0;
  std::unique_ptr<simulate::GroundTruth> truth;

  StreamStats stats;
  std::vector<std::int64_t> times;
  std::vector<unsigned> counters;
  bool have_prev = false;
  unsigned prev_counter = 0;

  ~Impl() {
    if (fd >= 0) ::close(fd);
  }

  // Pull more bytes into the parser. False when the source is exhausted.
  bool refill() {
    if (kind == Kind::Bytes) return false;
    if (kind == Kind::File) {
      char chunk[65536];
      file.read(chunk, sizeof chunk);
      std::streamsize got = file.gcount();
      if (got <= 0) {
        if (parser.pending_bytes() > 0)
          SBS_LOG_WARN("file ends mid-record; " + std::to_string(parser.pending_bytes()) +
                       " trailing bytes ignored");
        return false;
      }
      parser.feed(reinterpret_cast<const std::uint8_t*>(chunk),
                  static_cast<std::size_t>(got));
      return true;
    }
    // TCP
    std::uint8_t chunk[65536];
    ssize_t got = ::recv(fd, chunk, sizeof chunk, 0);
    if (got == 0) {
      if (parser.pending_bytes() > 0)
        fail(Errc::disconnected, "Disconnected: peer closed mid-record");
      return false;
    }
    if (got < 0) fail(Errc::disconnected, std::string("Disconnected: ") + std::strerror(errno));
    parser.feed(chunk, static_cast<std::size_t>(got));
    return true;
  }

  std::int64_t frame_recv_time(long gap) {
    if (kind == Kind::Bytes) {
      std::int64_t t = synth_idx < synth_times.size()
                           ? synth_times[synth_idx]
                           : (times.empty() ? monotonic_ns() : times.back());
      ++synth_idx;
      return t;
    }
    if (kind == Kind::File && speed > 0.0) {
      const double rate = parser.header().nominal_rate_hz;
      if (!pacing_started) {
        pacing_started = true;
        pace_t0_ns = monotonic_ns();
        pace_steps = 0;
      } else {
        pace_steps += 1 + gap;
      }
      std::int64_t target =
          pace_t0_ns + std::llround(static_cast<double>(pace_steps) * 1e9 / (rate * speed));
      sleep_until_ns(target);
    }
    return monotonic_ns();
  }

  std::int64_t marker_recv_time() {
    if (kind == Kind::Bytes)
      return synth_idx < synth_times.size()
                 ? synth_times[synth_idx]
                 : (times.empty() ? monotonic_ns() : times.back());
    return monotonic_ns();
  }

  std::optional<Item> next() {
    while (true) {
      if (ended) return std::nullopt;
      auto parsed = parser.next();
      if (!parsed) {
        if (!refill()) {
          ended = true;
          return std::nullopt;
        }
        continue;
      }
      if (parsed->status != wire::DecodeStatus::ok) {
        ++stats.counter_errors;
        continue;
      }
      if (std::holds_alternative<wire::RawFrame>(parsed->record)) {
        const auto& frame = std::get<wire::RawFrame>(parsed->record);
        long gap = have_prev ? counter_gap(prev_counter, frame.counter) : 0;
        Item item{std::move(parsed->record), frame_recv_time(gap)};
        const auto& f = std::get<wire::RawFrame>(item.record);
        stats.packets_dropped += gap;
        ++stats.packets_total;
        stats.quality_latest[static_cast<int>(f.quality.channel_index)] =
            f.quality.quality_value;
        prev_counter = f.counter;
        have_prev = true;
        times.push_back(item.recv_time_ns);
        counters.push_back(f.counter);
        return item;
      }
      return Item{std::move(parsed->record), marker_recv_time()};
    }
  }

  void ensure_header() {
    while (true) {
      parser.parse_header_if_ready();
      if (parser.have_header()) return;
      if (!refill())
        fail(Errc::bad_format, "stream ended before a complete header");
    }
  }
};

PacketSource::PacketSource(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}
PacketSource::PacketSource(PacketSource&&) noexcept = default;
PacketSource& PacketSource::operator=(PacketSource&&) noexcept = default;
PacketSource::~PacketSource() = default;

PacketSource PacketSource::file_replay(const std::string& path, double speed_factor) {
  if (!(speed_factor >= 0.0))
    fail(Errc::invalid_argument, "speed factor must be >= 0");
  auto impl = std::make_unique<Impl>();
  impl->kind = Impl::Kind::File;
  impl->speed = speed_factor;
  impl->file.open(path, std::ios::binary);
  if (!impl->file) fail(Errc::io, "cannot open " + path);
  return PacketSource(std::move(impl));
}

PacketSource PacketSource::tcp_client(const std::string& host, int port) {
  if (port < 1 || port > 65535) fail(Errc::invalid_argument, "port out of range");
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  int rc = ::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res);
  if (rc != 0) fail(Errc::net, "cannot resolve " + host + ": " + gai_strerror(rc));
  int fd = -1;
  for (addrinfo* ai = res; ai; ai = ai->ai_next) {
    fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  if (fd < 0) fail(Errc::net, "cannot connect to " + host + ":" + std::to_string(port));
  auto impl = std::make_unique<Impl>();
  impl->kind = Impl::Kind::Tcp;
  impl->fd = fd;
  return PacketSource(std::move(impl));
}

PacketSource PacketSource::simulator(const simulate::SimScenario& scenario,
                                     const ForwardModel& model, double duration_s) {
  simulate::GeneratedStream gen = simulate::generate_stream(scenario, model, duration_s);
  auto impl = std::make_unique<Impl>();
  impl->kind = Impl::Kind::Bytes;
  impl->parser.feed(gen.bytes.data(), gen.bytes.size());
  impl->synth_times = std::move(gen.recv_times_ns);
  impl->truth = std::make_unique<simulate::GroundTruth>(std::move(gen.truth));
  return PacketSource(std::move(impl));
}

PacketSource PacketSource::from_bytes(std::vector<std::uint8_t> bytes,
                                      std::vector<std::int64_t> recv_times_ns) {
  auto impl = std::make_unique<Impl>();
  impl->kind = Impl::Kind::Bytes;
  impl->parser.feed(bytes.data(), bytes.size());
  impl->synth_times = std::move(recv_times_ns);
  return PacketSource(std::move(impl));
}

const wire::StreamHeader& PacketSource::header() {
  impl_->ensure_header();
  return impl_->parser.header();
}

std::optional<PacketSource::Item> PacketSource::next() { return impl_->next(); }

StreamStats PacketSource::stats(double resolution_s) const {
  StreamStats out = impl_->stats;
  try {
    RateEstimate est = estimate_rate(impl_->times, impl_->counters, resolution_s);
    out.observed_rate_hz = est.rate_hz;
    out.rate_ci_hz = {est.ci_low_hz, est.ci_high_hz};
  } catch (const Error&) {
    // Not enough data yet; leave the rate fields zero.
  }
  return out;
}

const std::vector<std::int64_t>& PacketSource::recv_times_ns() const { return impl_->times; }
const std::vector<unsigned>& PacketSource::counters() const { return impl_->counters; }

const simulate::GroundTruth* PacketSource::truth() const { return impl_->truth.get(); }

}  // namespace sbs::ingest
