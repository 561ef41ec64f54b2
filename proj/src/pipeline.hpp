#ifndef SBS_PIPELINE_HPP
#define SBS_PIPELINE_HPP

// Operator-level pipeline: run configuration with strict JSON round-trips,
// the streaming reconstruction engine (filter -> frame -> adapt -> ROI power
// -> CSV/SVG sinks), recording capture and TCP replay, BCI train/eval
// wrappers, pacing reports, and the provenance scheme that lets any finished
// run be re-executed bit-identically from its JSON.

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "bci.hpp"
#include "common.hpp"
#include "dsp.hpp"
#include "forward.hpp"
#include "ingest.hpp"
#include "simulate.hpp"
#include "wire.hpp"

namespace sbs::pipeline {

using nlohmann::json;

// Stamped into every provenance file.
inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kWireVersion = "SBSR v1";

// ---------------------------------------------------------------------------
// Where the forward model comes from: the builtin spherical-head template at
// a chosen source density, or an SBFM file exported elsewhere.

struct ModelSpec {
  std::string kind = "template";  // template | file
  int dipoles = 1028;             // template vertex count
  std::string path;               // SBFM path when kind == file

  ForwardModel build() const;
  void validate(const std::string& scope = "model") const;  // throws Errc::config
  json to_json() const;
  static ModelSpec from_json(const json& j, const std::string& scope = "model");
};

// ---------------------------------------------------------------------------
// Simulation request: a named scenario preset plus the knobs that matter for
// the acceptance experiments. `erd` runs the cued motor-imagery protocol,
// `alpha` a continuous occipital alpha patch, `noise` sensor noise only.

struct SimSpec {
  std::string preset = "erd";  // erd | alpha | noise
  int n_trials = 20;
  std::vector<std::string> classes{"Left", "Right"};  // cue labels for erd
  double duration_s = 0.0;  // 0 = auto: protocol length (erd) or 10 s
  double rate_hz = 127.88;
  double drop_prob = 0.0;
  std::string pacing = "uniform";  // uniform | compensated
  int pacing_period = 32;
  double device_rate_hz = 128.0;
  double noise_std_uV = 2.0;
  double amplitude_nAm = 30.0;
  double depth = 0.7;  // ERD contralateral suppression depth
  double band_low_hz = 8.0;
  double band_high_hz = 13.0;
  std::uint64_t seed = 1;
  ModelSpec model;

  // Materializes the scenario against a built model (its duration_s resolves
  // duration_s == 0). Throws Errc::config.
  simulate::SimScenario scenario(const ForwardModel& model) const;

  void validate(const std::string& scope = "sim") const;
  json to_json() const;
  static SimSpec from_json(const json& j, const std::string& scope = "sim");
};

// ---------------------------------------------------------------------------
// Packet source selector shared by every stream-consuming command.

struct SourceSpec {
  std::string kind = "file";  // file | tcp | sim
  std::string path;           // file: SBSR recording
  double speed = 0.0;         // file: 0 = unpaced, 1 = real time
  std::string host = "127.0.0.1";
  int port = 0;  // tcp
  SimSpec sim;   // used when kind == sim

  // True when arrival timestamps mean wall-clock time (latency is measurable).
  bool paced() const { return kind == "tcp" || (kind == "file" && speed > 0.0); }

  ingest::PacketSource open() const;  // throws per the underlying source
  void validate(const std::string& scope = "source") const;
  json to_json() const;
  static SourceSpec from_json(const json& j, const std::string& scope = "source");
};

// ---------------------------------------------------------------------------
// Reconstruction run configuration. Everything that affects the outputs is
// in here, so serializing it into the provenance file pins the run.

struct FilterSpec {
  double low_hz = 8.0;
  double high_hz = 13.0;
  int order = 4;
};

struct WindowSpec {
  int samples = 128;  // adaptation window length
  int hop = 16;       // emission block: ROI power leaves every `hop` samples
};

struct InverseSpec {
  std::string method = "loreta";  // mn | loreta
  double smoothness = 0.2;        // loreta neighbor coupling
  double alpha0 = 1.0;
  double beta0 = 1.0;
  int adapt_every = 1;  // run EM on every k-th frame
  int max_iters = 10;
  double tol = 1e-4;
};

struct TrialWindowSpec {
  double pre_s = 1.0;  // baseline seconds before the cue
  double post_s = 4.0;
  double active_start_s = 1.0;  // ERD measurement window, cue-relative
  double active_end_s = 3.5;
};

struct PublishSpec {
  int port = 0;  // 0 = no network streaming
  int queue = 1024;
};

struct PipelineConfig {
  SourceSpec source;
  ModelSpec model;
  FilterSpec filter;
  WindowSpec window;
  InverseSpec inverse;
  std::vector<std::string> rois{"PrecentralLeft", "PrecentralRight"};
  double roi_window_s = 0.5;  // ROI power smoothing window
  TrialWindowSpec trial;
  PublishSpec publish;
  std::string capture_path;  // "" = auto (tcp sources capture into outdir)
  std::string outdir;
  std::uint64_t seed = 1;
  bool emit_source_map = true;
  bool emit_svg = true;

  // Static checks; stream-dependent checks (channel count, band vs rate,
  // ROI existence) happen at run start. Throws Errc::config naming the field.
  void validate() const;
  json to_json() const;
  static PipelineConfig from_json(const json& j);
};

// ---------------------------------------------------------------------------
// Run summaries (the --json payloads).

struct LatencyStats {
  bool measured = false;  // only paced sources have wall-clock arrivals
  long n = 0;
  double p50_ms = 0.0;
  double p99_ms = 0.0;
  double max_ms = 0.0;
  json to_json() const;
};

struct ReconstructSummary {
  long samples = 0;          // delivered data packets (= samples)
  long frames = 0;           // processed analysis windows
  long markers = 0;          // event markers seen
  long trials_reported = 0;  // epochs behind the trial-average report
  double rate_hz = 0.0;      // header nominal rate
  double alpha = 0.0;        // final hyperparameters
  double beta = 0.0;
  long adapt_calls = 0;
  long em_violations = 0;  // EM evidence decreases beyond 1e-10 relative slack
  ingest::StreamStats stream;
  LatencyStats latency;
  std::uint64_t published = 0;  // netstream messages, when publishing
  std::uint64_t lag_disconnects = 0;
  std::map<std::string, std::string> outputs;  // logical name -> path
  json to_json() const;
};

// Runs the streaming reconstruction and writes, under cfg.outdir:
//   roi_power.csv        per-sample smoothed ROI source power
//   hyperparameters.csv  per-frame alpha/beta/evidence
//   source_map.csv       per-vertex mean power (emit_source_map)
//   trial_means.csv/.svg cue-locked trial average curves (when markers exist)
//   erd_summary.json     baseline/active power and drop per ROI x class
//   provenance.json      command + config, rerunnable via cmd_rerun
//   capture.sbsr         byte capture (tcp sources), making live runs rerunnable
ReconstructSummary cmd_reconstruct(const PipelineConfig& cfg);

struct SimSummary {
  std::string out_path, truth_path, provenance_path;
  long samples = 0;
  long markers = 0;
  long dropped_packets = 0;
  double duration_s = 0.0;
  double rate_hz = 0.0;
  json to_json() const;
};

// Generates a stream to `out_path` plus a ground-truth sidecar and provenance.
SimSummary cmd_sim(const SimSpec& spec, const std::string& out_path);

struct RecordSummary {
  std::string out_path, provenance_path;
  long data_records = 0;
  long markers = 0;
  ingest::StreamStats stream;
  json to_json() const;
};

// Captures a packet source to an SBSR recording. Re-encoding is canonical, so
// recording a file source reproduces its bytes exactly.
RecordSummary cmd_record(const SourceSpec& source, const std::string& out_path);

// Serves one recording to one TCP client, paced at `speed` times the header
// rate (0 = as fast as the socket accepts). Runs in a background thread.
class ReplayServer {
 public:
  ReplayServer(const std::string& path, int port, double speed);  // port 0 = ephemeral
  ~ReplayServer();
  ReplayServer(const ReplayServer&) = delete;
  ReplayServer& operator=(const ReplayServer&) = delete;

  int port() const;
  std::int64_t wait();  // blocks until served or stopped; bytes sent
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

struct ReplaySummary {
  int port = 0;
  std::int64_t bytes_sent = 0;
  json to_json() const;
};

ReplaySummary cmd_replay(const std::string& path, int port, double speed);

struct TimingSummary {
  ingest::RateEstimate rate;
  ingest::TimingReport report;
  long packets = 0;
  long dropped = 0;
  std::string csv_path;
  json to_json() const;  // summary numbers only, not the distance vectors
};

// Pacing and rate analysis. Needs real arrival times: a sim source (pacing
// model), a tcp source (wall clock), or a file with its ground-truth sidecar
// (arrivals regenerated from the recorded pacing parameters).
TimingSummary cmd_timing_report(const SourceSpec& source, int frame_size = 4,
                                const std::string& out_csv = "");

// ---------------------------------------------------------------------------
// BCI decoding commands.

struct BciTrainSpec {
  std::string in;  // labeled SBSR recording
  double band_low_hz = 8.0;
  double band_high_hz = 32.0;
  int filter_order = 4;
  double interval_start_s = 0.75;
  double interval_end_s = 2.0;
  int csp_m = 0;  // filters per class for the saved decoder; 0 = CV winner
  std::vector<int> m_values{1, 2, 3};
  int folds = 5;
  int repeats = 3;
  std::string kind = "lda";      // lda | quadratic
  std::vector<long> train_sizes;  // empty = full folds
  double t_pre_s = 1.0;           // epoch cut around each cue
  double t_post_s = 4.0;
  std::uint64_t seed = 7;
  std::string model_out;  // decoder JSON ("" = skip)
  std::string cv_out;     // CV table CSV ("" = skip)

  bci::BciConfig bci_config() const;
  void validate(const std::string& scope = "bci_train") const;
  json to_json() const;
  static BciTrainSpec from_json(const json& j, const std::string& scope = "bci_train");
};

struct BciTrainSummary {
  long n_trials = 0;
  std::map<std::string, long> per_class;
  bci::CvTable table;
  int best_m = 0;
  double best_accuracy = 0.0;
  std::string model_path, cv_path, provenance_path;
  json to_json() const;
};

BciTrainSummary cmd_bci_train(const BciTrainSpec& spec);

struct BciEvalSpec {
  std::string model;  // decoder JSON from cmd_bci_train
  std::string in;     // labeled SBSR recording
  double t_pre_s = 1.0;
  double t_post_s = 4.0;
  std::string predictions_out;  // per-trial CSV ("" = skip)

  void validate(const std::string& scope = "bci_eval") const;
  json to_json() const;
  static BciEvalSpec from_json(const json& j, const std::string& scope = "bci_eval");
};

struct BciEvalSummary {
  long n = 0;
  long correct = 0;
  double accuracy = 0.0;
  std::map<std::string, std::map<std::string, long>> confusion;  // true -> predicted -> count
  std::string predictions_path, provenance_path;
  json to_json() const;
};

BciEvalSummary cmd_bci_eval(const BciEvalSpec& spec);

// ---------------------------------------------------------------------------
// Provenance: {"provenance": 1, "command": ..., "versions": {...},
// "config": {...}} with no timestamps, so a rerun is a pure function of the
// file plus the referenced inputs.

void write_provenance(const std::string& path, const std::string& command, const json& config);
json read_provenance(const std::string& path);  // throws Errc::bad_format

// Uniform command dispatch: runs one named command from its config JSON and
// returns the summary JSON. The config shapes are exactly the ones stored in
// provenance files ("reconstruct" takes a PipelineConfig; "sim" takes
// {sim, out}; "record" {source, out}; "replay" {in, port, speed};
// "timing_report" {source, frame_size, out_csv}; "bci_train"/"bci_eval" their
// specs; "rerun" {provenance, outdir}). Throws Errc::invalid_argument for an
// unknown command, Errc::config for bad configs. This is the surface the
// C API and the CLI drive.
json run_command(const std::string& command, const json& config);

// Re-executes a provenance file. `outdir_override` redirects the outputs
// ("" keeps the recorded destinations, overwriting the originals). Returns
// the rerun command's summary JSON.
json cmd_rerun(const std::string& provenance_path, const std::string& outdir_override = "");

// ---------------------------------------------------------------------------
// Shared stream decoding (bci commands, tests): pulls a whole source into a
// channels x samples microvolt matrix plus cue events in delivered-sample
// coordinates.

struct DecodedStream {
  wire::StreamHeader header;
  Eigen::MatrixXd uV;
  std::vector<dsp::StreamEvent> events;
  ingest::StreamStats stats;
};

DecodedStream decode_stream(ingest::PacketSource& src);

}  // namespace sbs::pipeline

#endif  // SBS_PIPELINE_HPP
