#ifndef SBS_SIMULATE_HPP
#define SBS_SIMULATE_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "common.hpp"
#include "forward.hpp"
#include "wire.hpp"

namespace sbs::simulate {

// ---------------------------------------------------------------------------
// Synthetic headset: cortical patch sources pushed through the forward model,
// quantized to the wire format, with configurable rate, packet loss and
// pacing. Everything is seeded, so a scenario reproduces byte-identically.

enum class CueClass { Relax = 0, Left = 1, Right = 2 };

const char* cue_label(CueClass c);
std::uint32_t cue_code(CueClass c);                 // marker code: 0/1/2
CueClass cue_from_label(const std::string& label);  // throws on unknown label

// Piecewise-linear gain curve. Empty means a constant 1. Outside the
// breakpoint span the curve extends flat from the nearest endpoint.
struct Envelope {
  std::vector<std::pair<double, double>> points;  // (time_s, gain), strictly increasing times
  double eval(double t_s) const;
};

// One source patch: a band-limited noise course shared by a set of mesh
// vertices. With a class label the envelope is trial-relative (t = 0 at cue
// onset) and modulates trials of the matching hemisphere: a cue for the
// opposite side applies the envelope at full depth (contralateral), the same
// side at half depth, and outside cues the gain is 1. Without a label the
// envelope is evaluated in stream time.
struct SourceEvent {
  std::vector<int> vertex_ids;
  double band_low_hz = 8.0;
  double band_high_hz = 13.0;
  double amplitude_nAm = 20.0;
  Envelope envelope;
  std::optional<CueClass> class_label;
};

enum class PacingMode { Uniform, Compensated };

// Compensated pacing mimics a device that ticks at device_rate_hz but stays
// honest on average by inserting one extra delay every `period` packets so
// the long-run rate equals the true rate.
struct Pacing {
  PacingMode mode = PacingMode::Uniform;
  int period = 32;
  double device_rate_hz = 128.0;
};

struct Trial {
  long cue_sample = 0;  // sample index of cue onset
  CueClass cls = CueClass::Relax;
};

struct SimScenario {
  double true_rate_hz = 127.88;
  double drop_prob = 0.0;  // per-packet Bernoulli loss
  Pacing pacing;
  double noise_std_uV = 1.0;
  std::vector<SourceEvent> sources;
  std::uint64_t seed = 1;
  std::vector<Trial> trials;
  double cue_s = 4.0;        // cue duration; trial envelopes live on [0, cue_s]
  double duration_s = 10.0;  // suggested stream length (CLI default)
};

// Randomized cue schedule: jittered rest, cue, jittered rest, cue, ...
// Returns the trials plus, via *duration_s, a stream length that contains the
// final cue with tail room.
struct TrialTiming {
  double cue_s = 4.0;
  double rest_min_s = 2.0;
  double rest_max_s = 3.0;
};
std::vector<Trial> erd_trial_protocol(int n_trials, const std::vector<CueClass>& classes,
                                      const TrialTiming& timing, double rate_hz,
                                      std::uint64_t seed, double* duration_s);

// Ground truth sidecar: everything needed to check the stream against the
// generative model without re-running the simulator.
struct TruthSource {
  std::vector<int> vertex_ids;
  double band_low_hz = 0.0;
  double band_high_hz = 0.0;
  double amplitude_nAm = 0.0;
  std::optional<CueClass> class_label;
  std::vector<double> course_nAm;  // the realized per-vertex waveform
};

struct MarkerInfo {
  long sample = 0;
  std::uint32_t code = 0;
  std::string label;
};

struct GroundTruth {
  double true_rate_hz = 0.0;
  long n_samples = 0;
  double duration_s = 0.0;
  double noise_std_uV = 0.0;
  double drop_prob = 0.0;
  Pacing pacing;
  std::uint64_t seed = 0;
  double cue_s = 0.0;
  std::vector<Trial> trials;
  std::vector<MarkerInfo> markers;
  std::vector<TruthSource> sources;
  std::vector<long> dropped_packets;  // global packet indices never written

  nlohmann::json to_json() const;
  static GroundTruth from_json(const nlohmann::json& j);
  void save(const std::string& path) const;
  static GroundTruth load(const std::string& path);
};

struct GeneratedStream {
  std::vector<std::uint8_t> bytes;            // SBSR: header + records
  std::vector<std::int64_t> recv_times_ns;    // pacing-model arrival time per written data record
  GroundTruth truth;
};

// Synthesize duration_s seconds: y_t = A s_t + noise, quantized, framed with
// modulo-129 counters (dropped packets still consume counters), cue markers
// embedded in-stream. Throws Errc::invalid_argument for bad bands
// (BandOutOfRange), vertices outside the model, or trials past the end.
GeneratedStream generate_stream(const SimScenario& scenario, const ForwardModel& model,
                                double duration_s);

// Synthetic arrival clock for n packets under a pacing model.
std::vector<std::int64_t> pacing_times_ns(const Pacing& pacing, double true_rate_hz, long n);

// Ready-made ERD scenario: alpha-band patches on both precentral ROIs whose
// trial envelope dips to 1 - depth during the cue (opposite hemisphere at
// full depth, same side at half), over a randomized Left/Right schedule.
struct ErdOptions {
  int n_trials = 20;
  std::vector<CueClass> classes{CueClass::Left, CueClass::Right};
  TrialTiming timing;
  double depth = 0.7;            // contralateral suppression depth
  double transition_s = 0.3;     // envelope ramp time
  double amplitude_nAm = 30.0;
  double band_low_hz = 8.0;
  double band_high_hz = 13.0;
  double noise_std_uV = 2.0;
  std::uint64_t seed = 1;
};
SimScenario erd_scenario(const ForwardModel& model, const ErdOptions& options);

}  // namespace sbs::simulate

#endif  // SBS_SIMULATE_HPP
