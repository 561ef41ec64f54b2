#ifndef SBS_COMMON_HPP
#define SBS_COMMON_HPP

#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <deque>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace sbs {

// Error codes shared by the C++ core and the C API. Keep numeric values in
// sync with sbs_status in include/sbs/sbs.h (capi negates them).
enum class Errc : int {
  ok = 0,
  invalid_argument = 1,   // bad parameter, config field, out-of-range value
  io = 2,                 // file/socket open, read, write
  bad_format = 3,         // malformed header, bad crc, truncated record
  disconnected = 4,       // TCP peer vanished mid-record
  insufficient_data = 5,  // not enough packets/trials for the requested stat
  singular = 6,           // singular prior or covariance
  non_finite = 7,         // NaN/Inf where a finite value is required
  unknown_roi = 8,        // ROI name not present in the forward model
  config = 9,             // config validation failure (message names the field)
  runtime = 10,           // anything else that went wrong at run time
  net = 11,               // bind/listen/connect failures
  end_of_stream = 12,     // not an error per se; used as a status by sources
};

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
  Errc code() const { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& msg) { throw Error(code, msg); }

// ---------------------------------------------------------------------------
// Logging. Level comes from the SBS_LOG environment variable:
// error < warn < info < debug. Default is warn. Output goes to stderr.

enum class LogLevel : int { error = 0, warn = 1, info = 2, debug = 3 };

LogLevel log_level();
void log_msg(LogLevel level, const std::string& msg);

#define SBS_LOG_INFO(msg)                                  \
  do {                                                     \
    if (::sbs::log_level() >= ::sbs::LogLevel::info)       \
      ::sbs::log_msg(::sbs::LogLevel::info, (msg));        \
  } while (0)
#define SBS_LOG_WARN(msg)                                  \
  do {                                                     \
    if (::sbs::log_level() >= ::sbs::LogLevel::warn)       \
      ::sbs::log_msg(::sbs::LogLevel::warn, (msg));        \
  } while (0)
#define SBS_LOG_DEBUG(msg)                                 \
  do {                                                     \
    if (::sbs::log_level() >= ::sbs::LogLevel::debug)      \
      ::sbs::log_msg(::sbs::LogLevel::debug, (msg));       \
  } while (0)

// ---------------------------------------------------------------------------
// Deterministic RNG. std::normal_distribution is not pinned down by the
// standard, so the Gaussian is generated here (Box-Muller) to keep streams
// byte-identical across standard libraries.

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

  std::uint64_t next_u64() {
    // splitmix64
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // uniform in [lo, hi)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  std::uint64_t below(std::uint64_t n) { return n ? next_u64() % n : 0; }

  double normal();

  // Fisher-Yates
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Little-endian byte packing helpers used by all wire formats.

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}
inline void put_i16(std::vector<std::uint8_t>& out, std::int16_t v) {
  put_u16(out, static_cast<std::uint16_t>(v));
}
inline void put_i64(std::vector<std::uint8_t>& out, std::int64_t v) {
  put_u64(out, static_cast<std::uint64_t>(v));
}

inline std::uint16_t get_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
inline std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}
inline std::int16_t get_i16(const std::uint8_t* p) {
  return static_cast<std::int16_t>(get_u16(p));
}
inline std::int64_t get_i64(const std::uint8_t* p) {
  return static_cast<std::int64_t>(get_u64(p));
}

// ---------------------------------------------------------------------------
// Bounded handoff queue: push blocks when full (backpressure), try_push
// refuses instead, pop blocks when empty, close() wakes everyone and makes
// pop drain-then-return-empty.

template <typename T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) fail(Errc::invalid_argument, "queue capacity must be positive");
  }

  // Returns false if the queue was closed before space appeared.
  bool push(T value) {
    std::unique_lock<std::mutex> lock(mu_);
    not_full_.wait(lock, [&] { return closed_ || items_.size() < capacity_; });
    if (closed_) return false;
    items_.push_back(std::move(value));
    not_empty_.notify_one();
    return true;
  }

  // Non-blocking: false when full or closed. The caller decides what a
  // refusal means (netstream drops the subscriber rather than wait).
  bool try_push(T value) {
    std::lock_guard<std::mutex> lock(mu_);
    if (closed_ || items_.size() >= capacity_) return false;
    items_.push_back(std::move(value));
    not_empty_.notify_one();
    return true;
  }

  // Blocks until an item or close; drains remaining items after close.
  std::optional<T> pop() {
    std::unique_lock<std::mutex> lock(mu_);
    not_empty_.wait(lock, [&] { return closed_ || !items_.empty(); });
    if (items_.empty()) return std::nullopt;
    T value = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return value;
  }

  void close() {
    std::lock_guard<std::mutex> lock(mu_);
    closed_ = true;
    not_empty_.notify_all();
    not_full_.notify_all();
  }

  std::size_t size() const {
    std::lock_guard<std::mutex> lock(mu_);
    return items_.size();
  }

 private:
  std::size_t capacity_;
  mutable std::mutex mu_;
  std::condition_variable not_empty_, not_full_;
  std::deque<T> items_;
  bool closed_ = false;
};

// ---------------------------------------------------------------------------

// Monotonic clock in nanoseconds.
std::int64_t monotonic_ns();

// Sleep until the given monotonic timestamp (coarse; used for paced replay).
void sleep_until_ns(std::int64_t deadline_ns);

// Format a double with enough digits to round-trip, in a fixed locale-free
// way. All CSV/JSON output funnels through this so reruns are bit-identical.
std::string format_double(double v);

std::vector<std::string> split(const std::string& s, char sep);

}  // namespace sbs

#endif  // SBS_COMMON_HPP
