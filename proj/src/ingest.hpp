#ifndef SBS_INGEST_HPP
#define SBS_INGEST_HPP

#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "common.hpp"
#include "forward.hpp"
#include "simulate.hpp"
#include "wire.hpp"

namespace sbs::ingest {

// ---------------------------------------------------------------------------
// Counter arithmetic. Counters cycle 0..=128, so for consecutive counters
// a then b, (b - a - 1) mod 129 packets disappeared in between. Gaps of 129
// or more alias, which makes totals a lower bound.

long counter_gap(unsigned a, unsigned b);

// One entry per consecutive pair: how many packets vanished between them.
std::vector<long> detect_gaps(const std::vector<unsigned>& counters);

// ---------------------------------------------------------------------------
// Rate estimation: gap-corrected step count over the observed span, with a
// confidence interval from the +-resolution_s timestamp uncertainty at each
// end of the span. Requires >= 2 packets spanning >= 10 s
// (Errc::insufficient_data otherwise). Pass empty counters to count every
// packet as one step.

struct RateEstimate {
  double rate_hz = 0.0;
  double ci_low_hz = 0.0;
  double ci_high_hz = 0.0;
  long steps = 0;      // counter-corrected sample steps across the span
  double span_s = 0.0;
};

RateEstimate estimate_rate(const std::vector<std::int64_t>& recv_times_ns,
                           const std::vector<unsigned>& counters,
                           double resolution_s = 1e-3);

// ---------------------------------------------------------------------------
// Pacing analysis: distances between consecutive groups of frame_size
// packets, their running mean, and the smallest period (in packets) at which
// the distance sequence repeats — the signature of a device inserting a
// compensation delay every N samples. Requires >= 64 packets.

struct TimingReport {
  std::vector<double> distances_s;
  std::vector<double> running_mean_s;
  double mean_distance_s = 0.0;
  bool compensation_flagged = false;
  int compensation_period_samples = 0;  // 0 when no periodic pattern
};

TimingReport timing_report(const std::vector<std::int64_t>& recv_times_ns, int frame_size = 4);

// ---------------------------------------------------------------------------
// Live stream statistics maintained by a PacketSource.

struct StreamStats {
  long packets_total = 0;     // data frames delivered
  long packets_dropped = 0;   // inferred from counter gaps
  double observed_rate_hz = 0.0;
  std::pair<double, double> rate_ci_hz{0.0, 0.0};
  long counter_errors = 0;    // corrupt records skipped
  std::map<int, unsigned> quality_latest;  // channel -> last reported value
};

// ---------------------------------------------------------------------------
// A validated packet stream from one of three byte sources. Frames and
// markers come out in arrival order with a receive timestamp; corrupt
// records are skipped and counted. next() returns nothing at end of stream
// and throws Errc::disconnected if a TCP peer dies mid-record.

class PacketSource {
 public:
  struct Item {
    wire::Record record;
    std::int64_t recv_time_ns = 0;
  };

  // speed_factor 0 replays as fast as possible; 1.0 paces to the header's
  // nominal rate; other positive values scale accordingly.
  static PacketSource file_replay(const std::string& path, double speed_factor = 0.0);
  static PacketSource tcp_client(const std::string& host, int port);
  // Runs the simulator up front; arrival times follow the scenario's pacing
  // model instead of the wall clock, so analysis runs offline-fast.
  static PacketSource simulator(const simulate::SimScenario& scenario,
                                const ForwardModel& model, double duration_s);
  // Raw bytes with optional per-data-frame arrival times (testing hook).
  static PacketSource from_bytes(std::vector<std::uint8_t> bytes,
                                 std::vector<std::int64_t> recv_times_ns = {});

  PacketSource(PacketSource&&) noexcept;
  PacketSource& operator=(PacketSource&&) noexcept;
  PacketSource(const PacketSource&) = delete;
  PacketSource& operator=(const PacketSource&) = delete;
  ~PacketSource();

  // Blocks (file read / socket / pacing sleep) until the header is known.
  const wire::StreamHeader& header();

  std::optional<Item> next();

  // Rate fields are filled once >= 2 packets span >= 10 s.
  StreamStats stats(double resolution_s = 1e-3) const;

  // Arrival clock and counters of every delivered data frame, for offline
  // timing analysis.
  const std::vector<std::int64_t>& recv_times_ns() const;
  const std::vector<unsigned>& counters() const;

  // Ground truth when this source wraps the simulator, else nullptr.
  const simulate::GroundTruth* truth() const;

 private:
  struct Impl;
  explicit PacketSource(std::unique_ptr<Impl> impl);
  std::unique_ptr<Impl> impl_;
};

}  // namespace sbs::ingest

#endif  // SBS_INGEST_HPP
