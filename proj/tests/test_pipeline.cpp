// Pipeline tests: config round-trips and field-naming validation errors, the
// reconstruction engine's output files and determinism, provenance reruns,
// recording fidelity, the TCP replay chain, pacing reports from sim and
// sidecar sources, BCI train/eval wrappers, and live publishing.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "common.hpp"
#include "netstream.hpp"
#include "pipeline.hpp"

using namespace sbs;
using namespace sbs::pipeline;
namespace fs = std::filesystem;

namespace {

// Fresh per-case scratch directory (removed up front so reruns start clean).
std::string scratch(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("sbs_pipeline_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

long count_lines(const std::string& text) {
  long n = 0;
  for (char c : text)
    if (c == '\n') ++n;
  return n;
}

template <typename Fn>
void expect_error(Errc code, const std::string& needle, Fn&& fn) {
  try {
    fn();
    FAIL_CHECK("expected an Error mentioning '" << needle << "'");
  } catch (const Error& e) {
    CHECK(e.code() == code);
    CHECK(std::string(e.what()).find(needle) != std::string::npos);
  }
}

ModelSpec small_model() {
  ModelSpec m;
  m.dipoles = 256;  // keeps the tests fast; acceptance runs the full density
  return m;
}

SimSpec erd_spec(int n_trials, std::uint64_t seed) {
  SimSpec s;
  s.preset = "erd";
  s.n_trials = n_trials;
  s.noise_std_uV = 1.0;
  s.seed = seed;
  s.model = small_model();
  return s;
}

SimSpec noise_spec(double duration_s, std::uint64_t seed) {
  SimSpec s;
  s.preset = "noise";
  s.duration_s = duration_s;
  s.seed = seed;
  s.model = small_model();
  return s;
}

PipelineConfig file_config(const std::string& rec, const std::string& outdir) {
  PipelineConfig cfg;
  cfg.source.kind = "file";
  cfg.source.path = rec;
  cfg.model = small_model();
  cfg.outdir = outdir;
  return cfg;
}

int pick_free_port() {
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  REQUIRE(fd >= 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = 0;
  REQUIRE(::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0);
  socklen_t len = sizeof addr;
  REQUIRE(::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len) == 0);
  int port = ntohs(addr.sin_port);
  ::close(fd);
  return port;
}

}  // namespace

TEST_CASE("config: JSON round-trip is lossless") {
  PipelineConfig cfg;
  cfg.source.kind = "sim";
  cfg.source.sim = erd_spec(5, 9);
  cfg.source.sim.drop_prob = 0.01;
  cfg.source.sim.pacing = "compensated";
  cfg.model = small_model();
  cfg.filter.low_hz = 7.5;
  cfg.window.hop = 8;
  cfg.inverse.method = "mn";
  cfg.inverse.adapt_every = 4;
  cfg.rois = {"OccipitalLeft"};
  cfg.publish.port = 1234;
  cfg.outdir = "/tmp/x";
  cfg.seed = 42;
  cfg.emit_svg = false;

  json j = cfg.to_json();
  PipelineConfig back = PipelineConfig::from_json(j);
  CHECK(back.to_json() == j);
  CHECK(back.source.sim.pacing == "compensated");
  CHECK(back.inverse.method == "mn");
  CHECK(back.rois == std::vector<std::string>{"OccipitalLeft"});

  BciTrainSpec ts;
  ts.in = "/tmp/r.sbsr";
  ts.m_values = {1, 4};
  ts.kind = "quadratic";
  ts.train_sizes = {20, 40};
  json tj = ts.to_json();
  CHECK(BciTrainSpec::from_json(tj, "bci_train").to_json() == tj);
}

TEST_CASE("config: validation failures name the offending field") {
  PipelineConfig cfg = file_config("/tmp/r.sbsr", "/tmp/out");

  PipelineConfig bad = cfg;
  bad.window.hop = 0;
  expect_error(Errc::config, "window.hop", [&] { bad.validate(); });

  bad = cfg;
  bad.inverse.method = "beamformer";
  expect_error(Errc::config, "inverse.method", [&] { bad.validate(); });

  bad = cfg;
  bad.rois.clear();
  expect_error(Errc::config, "rois", [&] { bad.validate(); });

  bad = cfg;
  bad.outdir.clear();
  expect_error(Errc::config, "outdir", [&] { bad.validate(); });

  // Unknown and mistyped keys are rejected with their JSON path.
  json j = cfg.to_json();
  j["fitler"] = {{"low_hz", 8.0}};
  expect_error(Errc::config, "config.fitler: unknown field",
               [&] { PipelineConfig::from_json(j); });

  j = cfg.to_json();
  j["filter"]["low_hz"] = "eight";
  expect_error(Errc::config, "filter.low_hz: wrong type", [&] { PipelineConfig::from_json(j); });

  j = cfg.to_json();
  j["source"]["kind"] = "sim";
  j["source"]["sim"] = {{"preset", "gamma"}};
  expect_error(Errc::config, "source.sim.preset", [&] { PipelineConfig::from_json(j); });
}

TEST_CASE("reconstruct: ERD run writes the full output set, deterministically") {
  const std::string dir = scratch("reconstruct");
  const std::string rec = dir + "/rec.sbsr";

  SimSummary sim = cmd_sim(erd_spec(8, 3), rec);
  CHECK(sim.markers == 16);  // cue + cue-end marker per trial
  CHECK(fs::exists(sim.truth_path));
  CHECK(fs::exists(sim.provenance_path));

  PipelineConfig cfg = file_config(rec, dir + "/a");
  ReconstructSummary a = cmd_reconstruct(cfg);

  CHECK(a.samples == sim.samples);
  CHECK(a.markers == 16);
  CHECK(a.rate_hz == doctest::Approx(127.88));
  CHECK(a.em_violations == 0);
  CHECK(a.adapt_calls == a.frames);
  CHECK(a.alpha > 0.0);
  CHECK(a.beta > 0.0);
  CHECK_FALSE(a.latency.measured);  // unpaced replay has no arrival clock

  const long frames = (a.samples - cfg.window.samples) / cfg.window.hop + 1;
  CHECK(a.frames == frames);
  const long emitted = (a.samples / cfg.window.hop) * cfg.window.hop;

  const std::string roi_a = slurp(dir + "/a/roi_power.csv");
  CHECK(count_lines(roi_a) == emitted + 1);
  CHECK(roi_a.rfind("sample,time_s,PrecentralLeft,PrecentralRight\n", 0) == 0);
  CHECK(count_lines(slurp(dir + "/a/hyperparameters.csv")) == frames + 1);
  CHECK(count_lines(slurp(dir + "/a/source_map.csv")) == 256 + 1);

  // The cue-locked report: every class it covers has >= 2 trials, and the
  // totals agree with the summary.
  json erd = json::parse(slurp(dir + "/a/erd_summary.json"));
  long reported = 0;
  for (const auto& [cls, n] : erd.at("n_trials").items()) {
    CHECK(n.get<long>() >= 2);
    reported += n.get<long>();
  }
  CHECK(reported == a.trials_reported);
  CHECK(a.trials_reported >= 4);
  for (const auto& [roi, classes] : erd.at("rois").items())
    for (const auto& [cls, cell] : classes.items()) CHECK(cell.at("baseline_nAm2").get<double>() > 0.0);

  const std::string svg = slurp(dir + "/a/trial_means.svg");
  CHECK(svg.find("<svg") != std::string::npos);
  CHECK(svg.find("stroke-dasharray=\"5 4\"") != std::string::npos);
  CHECK(count_lines(slurp(dir + "/a/trial_means.csv")) > 1);

  // Identical config, fresh output directory: byte-identical CSVs.
  cfg.outdir = dir + "/b";
  ReconstructSummary b = cmd_reconstruct(cfg);
  CHECK(b.frames == a.frames);
  CHECK(slurp(dir + "/b/roi_power.csv") == roi_a);
  CHECK(slurp(dir + "/b/hyperparameters.csv") == slurp(dir + "/a/hyperparameters.csv"));
  CHECK(slurp(dir + "/b/trial_means.csv") == slurp(dir + "/a/trial_means.csv"));
  CHECK(slurp(dir + "/b/source_map.csv") == slurp(dir + "/a/source_map.csv"));

  // Rerunning the provenance file reproduces the outputs bit-identically.
  json rerun = cmd_rerun(dir + "/a/provenance.json", dir + "/c");
  CHECK(rerun.at("frames").get<long>() == a.frames);
  CHECK(slurp(dir + "/c/roi_power.csv") == roi_a);
  CHECK(slurp(dir + "/c/trial_means.csv") == slurp(dir + "/a/trial_means.csv"));

  // Unknown ROI names are rejected with the offending name.
  PipelineConfig bad = file_config(rec, dir + "/bad");
  bad.rois = {"PrecentralLeft", "Sideways"};
  expect_error(Errc::unknown_roi, "Sideways", [&] { cmd_reconstruct(bad); });
}

TEST_CASE("record: canonical re-encode reproduces a recording byte for byte") {
  const std::string dir = scratch("record");
  const std::string rec = dir + "/rec.sbsr";
  SimSpec spec = noise_spec(12.0, 5);
  cmd_sim(spec, rec);
  const std::string original = slurp(rec);

  SourceSpec file_src;
  file_src.kind = "file";
  file_src.path = rec;
  RecordSummary r = cmd_record(file_src, dir + "/copy.sbsr");
  CHECK(slurp(dir + "/copy.sbsr") == original);
  CHECK(r.data_records > 0);
  CHECK(fs::exists(r.provenance_path));
  CHECK_FALSE(fs::exists(dir + "/copy.truth.json"));  // only sim sources know truth

  // Recording straight from the simulator matches cmd_sim's file and keeps
  // the ground-truth sidecar.
  SourceSpec sim_src;
  sim_src.kind = "sim";
  sim_src.sim = spec;
  cmd_record(sim_src, dir + "/direct.sbsr");
  CHECK(slurp(dir + "/direct.sbsr") == original);
  CHECK(fs::exists(dir + "/direct.truth.json"));

  // A recording without its sidecar has no arrival clock to analyze.
  SourceSpec copy_src;
  copy_src.kind = "file";
  copy_src.path = dir + "/copy.sbsr";
  expect_error(Errc::config, "sidecar", [&] { cmd_timing_report(copy_src); });
}

TEST_CASE("timing report: compensated pacing recovered from sim and sidecar alike") {
  const std::string dir = scratch("timing");
  SimSpec spec = noise_spec(40.0, 7);
  spec.pacing = "compensated";  // 128 Hz device ticks, one catch-up gap per 32
  const std::string rec = dir + "/rec.sbsr";
  cmd_sim(spec, rec);

  SourceSpec sim_src;
  sim_src.kind = "sim";
  sim_src.sim = spec;
  TimingSummary direct = cmd_timing_report(sim_src);

  SourceSpec file_src;
  file_src.kind = "file";
  file_src.path = rec;
  TimingSummary from_file = cmd_timing_report(file_src, 4, dir + "/timing.csv");

  for (const TimingSummary* t : {&direct, &from_file}) {
    CHECK(t->report.compensation_flagged);
    CHECK(t->report.compensation_period_samples == 32);
    const double expected = 4.0 / 127.88;
    CHECK(std::abs(t->report.running_mean_s.back() - expected) / expected < 0.01);
    CHECK(t->rate.rate_hz == doctest::Approx(127.88).epsilon(1e-3));
  }
  // The sidecar path regenerates exactly the arrival clock the sim used.
  CHECK(from_file.rate.rate_hz == direct.rate.rate_hz);
  CHECK(from_file.report.mean_distance_s == direct.report.mean_distance_s);

  CHECK(count_lines(slurp(dir + "/timing.csv")) ==
        static_cast<long>(from_file.report.distances_s.size()) + 1);
  CHECK(fs::exists(dir + "/timing.csv.provenance.json"));
}

TEST_CASE("replay: tcp chain is byte-identical to the direct file run") {
  const std::string dir = scratch("replay");
  const std::string rec = dir + "/rec.sbsr";
  cmd_sim(erd_spec(4, 11), rec);
  const std::string original = slurp(rec);

  PipelineConfig direct = file_config(rec, dir + "/direct");
  direct.emit_svg = false;
  cmd_reconstruct(direct);

  ReplayServer server(rec, 0, 0.0);
  PipelineConfig live = file_config(rec, dir + "/live");
  live.source.kind = "tcp";
  live.source.host = "127.0.0.1";
  live.source.port = server.port();
  live.emit_svg = false;
  ReconstructSummary ls = cmd_reconstruct(live);
  server.wait();

  CHECK(ls.latency.measured);  // tcp arrivals are wall clock
  CHECK(slurp(dir + "/live/capture.sbsr") == original);
  CHECK(slurp(dir + "/live/roi_power.csv") == slurp(dir + "/direct/roi_power.csv"));
  CHECK(slurp(dir + "/live/hyperparameters.csv") == slurp(dir + "/direct/hyperparameters.csv"));

  // The live run's provenance points at its capture, so it reruns offline.
  json prov = read_provenance(dir + "/live/provenance.json");
  CHECK(prov.at("config").at("source").at("kind") == "file");
  CHECK(prov.at("config").at("source").at("path") == dir + "/live/capture.sbsr");
  cmd_rerun(dir + "/live/provenance.json", dir + "/rerun");
  CHECK(slurp(dir + "/rerun/roi_power.csv") == slurp(dir + "/direct/roi_power.csv"));
}

TEST_CASE("reconstruct: real-time replay stays within the latency budget") {
  const std::string dir = scratch("latency");
  const std::string rec = dir + "/rec.sbsr";
  cmd_sim(noise_spec(5.0, 13), rec);

  PipelineConfig cfg = file_config(rec, dir + "/out");
  cfg.source.speed = 1.0;
  cfg.emit_svg = false;
  cfg.emit_source_map = false;
  ReconstructSummary s = cmd_reconstruct(cfg);

  CHECK(s.latency.measured);
  CHECK(s.latency.n > 0);
  CHECK(s.latency.p99_ms < 250.0);
  CHECK(s.latency.p50_ms <= s.latency.p99_ms);
  CHECK(s.latency.p99_ms <= s.latency.max_ms);
}

TEST_CASE("bci: train, persist, evaluate") {
  const std::string dir = scratch("bci");
  const std::string rec = dir + "/rec.sbsr";
  SimSpec spec = erd_spec(24, 21);
  spec.amplitude_nAm = 40.0;
  cmd_sim(spec, rec);

  BciTrainSpec train;
  train.in = rec;
  train.m_values = {2};
  train.folds = 4;
  train.repeats = 2;
  train.model_out = dir + "/decoder.json";
  train.cv_out = dir + "/cv.csv";
  BciTrainSummary ts = cmd_bci_train(train);

  CHECK(ts.n_trials == 24);
  long per_class_total = 0;
  for (const auto& [cls, n] : ts.per_class) per_class_total += n;
  CHECK(per_class_total == 24);
  CHECK(ts.best_m == 2);
  CHECK(ts.best_accuracy > 0.75);
  CHECK(fs::exists(ts.model_path));
  CHECK(fs::exists(ts.cv_path));
  CHECK(fs::exists(ts.provenance_path));

  BciEvalSpec eval;
  eval.model = ts.model_path;
  eval.in = rec;
  eval.predictions_out = dir + "/predictions.csv";
  BciEvalSummary es = cmd_bci_eval(eval);

  CHECK(es.n == 24);
  CHECK(es.accuracy > 0.85);  // train == eval recording, so this is optimistic
  long confusion_total = 0;
  for (const auto& [truth, row] : es.confusion)
    for (const auto& [pred, n] : row) confusion_total += n;
  CHECK(confusion_total == es.n);
  CHECK(count_lines(slurp(dir + "/predictions.csv")) == es.n + 1);

  // A recording without cue markers cannot train a decoder.
  const std::string quiet = dir + "/quiet.sbsr";
  cmd_sim(noise_spec(8.0, 2), quiet);
  BciTrainSpec no_cues = train;
  no_cues.in = quiet;
  no_cues.model_out.clear();
  no_cues.cv_out.clear();
  expect_error(Errc::insufficient_data, "NoCueMarkers", [&] { cmd_bci_train(no_cues); });
}

TEST_CASE("publish: a subscriber sees every frame in order") {
  const std::string dir = scratch("publish");
  const std::string rec = dir + "/rec.sbsr";
  cmd_sim(noise_spec(4.0, 17), rec);

  PipelineConfig cfg = file_config(rec, dir + "/out");
  cfg.source.speed = 1.0;  // paced, so the subscriber can attach before frame 1
  cfg.publish.port = pick_free_port();
  cfg.emit_svg = false;
  cfg.emit_source_map = false;

  ReconstructSummary summary;
  std::thread runner([&] { summary = cmd_reconstruct(cfg); });

  std::unique_ptr<netstream::Subscriber> sub;
  for (int attempt = 0; attempt < 100 && !sub; ++attempt) {
    try {
      sub = std::make_unique<netstream::Subscriber>("127.0.0.1", cfg.publish.port);
    } catch (const Error&) {
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
  }
  REQUIRE(sub != nullptr);

  std::vector<netstream::StreamMessage> got;
  while (auto msg = sub->next()) got.push_back(std::move(*msg));
  runner.join();

  const long emitted = (summary.samples / cfg.window.hop) * cfg.window.hop;
  CHECK(summary.published == got.size());
  CHECK(summary.lag_disconnects == 0);
  CHECK(static_cast<long>(got.size()) == emitted / cfg.window.hop);

  long total_samples = 0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    CHECK(got[i].kind == netstream::MessageKind::RoiPower);
    if (i > 0) CHECK(got[i].seq > got[i - 1].seq);
    REQUIRE(got[i].payload.size() >= 16);
    const std::uint8_t* p = got[i].payload.data();
    const auto first_sample = static_cast<long>(get_u64(p));
    const auto count = static_cast<long>(get_u32(p + 8));
    const auto n_rois = static_cast<long>(get_u32(p + 12));
    CHECK(count == cfg.window.hop);
    CHECK(n_rois == 2);
    CHECK(got[i].payload.size() == 16 + static_cast<std::size_t>(count * n_rois) * 8);
    CHECK(first_sample == total_samples);  // contiguous, ordered coverage
    total_samples += count;
  }
  CHECK(total_samples == emitted);
}
