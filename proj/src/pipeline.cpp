#include "pipeline.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>
#include <variant>

#include "inverse.hpp"
#include "netstream.hpp"

namespace sbs::pipeline {

namespace fs = std::filesystem;

// ===========================================================================
// File and JSON plumbing.

namespace {

std::vector<std::uint8_t> read_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::io, "FileOpenFailure: cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) fail(Errc::io, "FileReadFailure: error reading '" + path + "'");
  return bytes;
}

void write_binary(const std::string& path, const std::uint8_t* data, std::size_t n) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::io, "FileOpenFailure: cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) fail(Errc::io, "FileWriteFailure: error writing '" + path + "'");
}

void write_text(const std::string& path, const std::string& text) {
  write_binary(path, reinterpret_cast<const std::uint8_t*>(text.data()), text.size());
}

// foo.sbsr -> foo<suffix>; anything else -> path<suffix>.
std::string sidecar_path(const std::string& base, const std::string& suffix) {
  if (base.size() > 5 && base.compare(base.size() - 5, 5, ".sbsr") == 0)
    return base.substr(0, base.size() - 5) + suffix;
  return base + suffix;
}

std::string join_path(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

std::string replace_dir(const std::string& path, const std::string& dir) {
  return (fs::path(dir) / fs::path(path).filename()).string();
}

// Strict object reader: reject keys that no field consumes, so a typo in a
// config file cannot silently fall back to a default.
void check_keys(const json& j, const std::string& scope,
                std::initializer_list<const char*> allowed) {
  if (!j.is_object()) fail(Errc::config, scope + ": expected a JSON object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* a : allowed) {
      if (item.key() == a) {
        known = true;
        break;
      }
    }
    if (!known) fail(Errc::config, scope + "." + item.key() + ": unknown field");
  }
}

template <typename T>
void read_field(const json& j, const std::string& scope, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const json::exception&) {
    fail(Errc::config, scope + "." + std::string(key) + ": wrong type");
  }
}

[[noreturn]] void bad_field(const std::string& scope, const char* key, const std::string& what) {
  fail(Errc::config, scope + "." + std::string(key) + ": " + what);
}

// Nearest-rank quantile of an ascending vector.
double quantile_sorted(const std::vector<double>& v, double q) {
  if (v.empty()) return 0.0;
  double rank = std::ceil(q * static_cast<double>(v.size())) - 1.0;
  long i = std::clamp(static_cast<long>(rank), 0L, static_cast<long>(v.size()) - 1);
  return v[static_cast<std::size_t>(i)];
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  put_u64(out, bits);
}

std::string class_name(int code) {
  if (code >= 0 && code <= 2) return simulate::cue_label(static_cast<simulate::CueClass>(code));
  return "class" + std::to_string(code);
}

bool send_all_fd(int fd, const std::uint8_t* data, std::size_t n) {
  while (n > 0) {
    ssize_t w = ::send(fd, data, n, MSG_NOSIGNAL);
    if (w < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    data += w;
    n -= static_cast<std::size_t>(w);
  }
  return true;
}

}  // namespace

// ===========================================================================
// ModelSpec

ForwardModel ModelSpec::build() const {
  validate();
  if (kind == "template") return make_template_model(dipoles);
  return load_model(path);
}

void ModelSpec::validate(const std::string& scope) const {
  if (kind != "template" && kind != "file")
    bad_field(scope, "kind", "expected 'template' or 'file', got '" + kind + "'");
  if (kind == "template" && dipoles < 32)
    bad_field(scope, "dipoles", "template model needs at least 32 vertices");
  if (kind == "file" && path.empty()) bad_field(scope, "path", "required when kind is 'file'");
}

json ModelSpec::to_json() const {
  json j;
  j["kind"] = kind;
  j["dipoles"] = dipoles;
  j["path"] = path;
  return j;
}

ModelSpec ModelSpec::from_json(const json& j, const std::string& scope) {
  check_keys(j, scope, {"kind", "dipoles", "path"});
  ModelSpec s;
  read_field(j, scope, "kind", s.kind);
  read_field(j, scope, "dipoles", s.dipoles);
  read_field(j, scope, "path", s.path);
  s.validate(scope);
  return s;
}

// ===========================================================================
// SimSpec

void SimSpec::validate(const std::string& scope) const {
  if (preset != "erd" && preset != "alpha" && preset != "noise")
    bad_field(scope, "preset", "expected erd|alpha|noise, got '" + preset + "'");
  if (!(rate_hz > 1.0 && rate_hz < 10000.0))
    bad_field(scope, "rate_hz", "must lie in (1, 10000)");
  if (!(drop_prob >= 0.0 && drop_prob < 1.0)) bad_field(scope, "drop_prob", "must lie in [0, 1)");
  if (pacing != "uniform" && pacing != "compensated")
    bad_field(scope, "pacing", "expected 'uniform' or 'compensated', got '" + pacing + "'");
  if (pacing_period < 1) bad_field(scope, "pacing_period", "must be >= 1");
  if (!(device_rate_hz > 0.0)) bad_field(scope, "device_rate_hz", "must be positive");
  if (noise_std_uV < 0.0) bad_field(scope, "noise_std_uV", "must be >= 0");
  if (duration_s < 0.0) bad_field(scope, "duration_s", "must be >= 0 (0 = auto)");
  if (preset == "erd") {
    if (n_trials < 1) bad_field(scope, "n_trials", "must be >= 1");
    if (classes.empty()) bad_field(scope, "classes", "at least one cue class required");
    for (const auto& c : classes) {
      try {
        simulate::cue_from_label(c);
      } catch (const Error&) {
        bad_field(scope, "classes", "unknown cue label '" + c + "'");
      }
    }
    if (!(depth > 0.0 && depth <= 1.0)) bad_field(scope, "depth", "must lie in (0, 1]");
  }
  if (preset != "noise") {
    if (!(amplitude_nAm > 0.0)) bad_field(scope, "amplitude_nAm", "must be positive");
    if (!(band_low_hz > 0.0 && band_low_hz < band_high_hz))
      bad_field(scope, "band_low_hz", "must satisfy 0 < low < high");
    if (!(band_high_hz < rate_hz / 2.0))
      bad_field(scope, "band_high_hz", "must stay below rate_hz / 2");
  }
  model.validate(scope + ".model");
}

simulate::SimScenario SimSpec::scenario(const ForwardModel& fwd) const {
  validate();
  simulate::SimScenario sc;
  if (preset == "erd") {
    simulate::ErdOptions opt;
    opt.n_trials = n_trials;
    opt.classes.clear();
    for (const auto& c : classes) opt.classes.push_back(simulate::cue_from_label(c));
    opt.depth = depth;
    opt.amplitude_nAm = amplitude_nAm;
    opt.band_low_hz = band_low_hz;
    opt.band_high_hz = band_high_hz;
    opt.noise_std_uV = noise_std_uV;
    opt.seed = seed;
    sc = simulate::erd_scenario(fwd, opt);
    if (rate_hz != sc.true_rate_hz) {
      // Re-derive the cue schedule at the requested rate.
      sc.true_rate_hz = rate_hz;
      sc.trials = simulate::erd_trial_protocol(opt.n_trials, opt.classes, opt.timing, rate_hz,
                                               opt.seed, &sc.duration_s);
    }
    // An explicit duration is exact; trials whose cue no longer fits are cut.
    if (duration_s > 0.0) {
      const long n = std::llround(duration_s * rate_hz);
      const long cue_len = std::lround(sc.cue_s * rate_hz);
      std::erase_if(sc.trials,
                    [&](const simulate::Trial& t) { return t.cue_sample + cue_len > n; });
      sc.duration_s = duration_s;
    }
  } else {
    if (preset == "alpha") {
      simulate::SourceEvent src;
      src.vertex_ids = fwd.roi("OccipitalLeft");
      src.band_low_hz = band_low_hz;
      src.band_high_hz = band_high_hz;
      src.amplitude_nAm = amplitude_nAm;
      sc.sources.push_back(std::move(src));
    }
    sc.true_rate_hz = rate_hz;
    sc.noise_std_uV = noise_std_uV;
    sc.seed = seed;
    sc.duration_s = duration_s > 0.0 ? duration_s : 10.0;
  }
  sc.noise_std_uV = noise_std_uV;
  sc.seed = seed;
  sc.drop_prob = drop_prob;
  if (pacing == "compensated") {
    sc.pacing.mode = simulate::PacingMode::Compensated;
    sc.pacing.period = pacing_period;
    sc.pacing.device_rate_hz = device_rate_hz;
  }
  return sc;
}

json SimSpec::to_json() const {
  json j;
  j["preset"] = preset;
  j["n_trials"] = n_trials;
  j["classes"] = classes;
  j["duration_s"] = duration_s;
  j["rate_hz"] = rate_hz;
  j["drop_prob"] = drop_prob;
  j["pacing"] = pacing;
  j["pacing_period"] = pacing_period;
  j["device_rate_hz"] = device_rate_hz;
  j["noise_std_uV"] = noise_std_uV;
  j["amplitude_nAm"] = amplitude_nAm;
  j["depth"] = depth;
  j["band_low_hz"] = band_low_hz;
  j["band_high_hz"] = band_high_hz;
  j["seed"] = seed;
  j["model"] = model.to_json();
  return j;
}

SimSpec SimSpec::from_json(const json& j, const std::string& scope) {
  check_keys(j, scope,
             {"preset", "n_trials", "classes", "duration_s", "rate_hz", "drop_prob", "pacing",
              "pacing_period", "device_rate_hz", "noise_std_uV", "amplitude_nAm", "depth",
              "band_low_hz", "band_high_hz", "seed", "model"});
  SimSpec s;
  read_field(j, scope, "preset", s.preset);
  read_field(j, scope, "n_trials", s.n_trials);
  read_field(j, scope, "classes", s.classes);
  read_field(j, scope, "duration_s", s.duration_s);
  read_field(j, scope, "rate_hz", s.rate_hz);
  read_field(j, scope, "drop_prob", s.drop_prob);
  read_field(j, scope, "pacing", s.pacing);
  read_field(j, scope, "pacing_period", s.pacing_period);
  read_field(j, scope, "device_rate_hz", s.device_rate_hz);
  read_field(j, scope, "noise_std_uV", s.noise_std_uV);
  read_field(j, scope, "amplitude_nAm", s.amplitude_nAm);
  read_field(j, scope, "depth", s.depth);
  read_field(j, scope, "band_low_hz", s.band_low_hz);
  read_field(j, scope, "band_high_hz", s.band_high_hz);
  read_field(j, scope, "seed", s.seed);
  if (j.contains("model")) s.model = ModelSpec::from_json(j.at("model"), scope + ".model");
  s.validate(scope);
  return s;
}

// ===========================================================================
// SourceSpec

void SourceSpec::validate(const std::string& scope) const {
  if (kind != "file" && kind != "tcp" && kind != "sim")
    bad_field(scope, "kind", "expected file|tcp|sim, got '" + kind + "'");
  if (kind == "file") {
    if (path.empty()) bad_field(scope, "path", "required for a file source");
    if (speed < 0.0) bad_field(scope, "speed", "must be >= 0 (0 = unpaced)");
  }
  if (kind == "tcp") {
    if (host.empty()) bad_field(scope, "host", "required for a tcp source");
    if (port < 1 || port > 65535) bad_field(scope, "port", "must lie in [1, 65535]");
  }
  if (kind == "sim") sim.validate(scope + ".sim");
}

ingest::PacketSource SourceSpec::open() const {
  validate();
  if (kind == "file") return ingest::PacketSource::file_replay(path, speed);
  if (kind == "tcp") return ingest::PacketSource::tcp_client(host, port);
  ForwardModel fwd = sim.model.build();
  simulate::SimScenario sc = sim.scenario(fwd);
  return ingest::PacketSource::simulator(sc, fwd, sc.duration_s);
}

json SourceSpec::to_json() const {
  json j;
  j["kind"] = kind;
  j["path"] = path;
  j["speed"] = speed;
  j["host"] = host;
  j["port"] = port;
  if (kind == "sim") j["sim"] = sim.to_json();
  return j;
}

SourceSpec SourceSpec::from_json(const json& j, const std::string& scope) {
  check_keys(j, scope, {"kind", "path", "speed", "host", "port", "sim"});
  SourceSpec s;
  read_field(j, scope, "kind", s.kind);
  read_field(j, scope, "path", s.path);
  read_field(j, scope, "speed", s.speed);
  read_field(j, scope, "host", s.host);
  read_field(j, scope, "port", s.port);
  if (j.contains("sim")) s.sim = SimSpec::from_json(j.at("sim"), scope + ".sim");
  s.validate(scope);
  return s;
}

// ===========================================================================
// PipelineConfig

void PipelineConfig::validate() const {
  source.validate("source");
  model.validate("model");
  if (!(filter.order >= 2 && filter.order % 2 == 0))
    fail(Errc::config, "filter.order: must be an even pole count >= 2");
  if (!(filter.low_hz > 0.0 && filter.low_hz < filter.high_hz))
    fail(Errc::config, "filter.low_hz: must satisfy 0 < low < high");
  if (window.samples < 8) fail(Errc::config, "window.samples: must be >= 8");
  if (!(window.hop >= 1 && window.hop <= window.samples))
    fail(Errc::config, "window.hop: must lie in [1, window.samples]");
  if (inverse.method != "mn" && inverse.method != "loreta")
    fail(Errc::config, "inverse.method: expected 'mn' or 'loreta', got '" + inverse.method + "'");
  if (!(inverse.smoothness >= 0.0 && inverse.smoothness <= 1.0))
    fail(Errc::config, "inverse.smoothness: must lie in [0, 1]");
  if (!(inverse.alpha0 > 0.0)) fail(Errc::config, "inverse.alpha0: must be positive");
  if (!(inverse.beta0 > 0.0)) fail(Errc::config, "inverse.beta0: must be positive");
  if (inverse.adapt_every < 1) fail(Errc::config, "inverse.adapt_every: must be >= 1");
  if (inverse.max_iters < 1) fail(Errc::config, "inverse.max_iters: must be >= 1");
  if (!(inverse.tol > 0.0)) fail(Errc::config, "inverse.tol: must be positive");
  if (rois.empty()) fail(Errc::config, "rois: at least one ROI name required");
  if (!(roi_window_s > 0.0)) fail(Errc::config, "roi_window_s: must be positive");
  if (!(trial.pre_s >= 0.0)) fail(Errc::config, "trial.pre_s: must be >= 0");
  if (!(trial.post_s > 0.0)) fail(Errc::config, "trial.post_s: must be positive");
  if (!(trial.active_start_s < trial.active_end_s))
    fail(Errc::config, "trial.active_start_s: must precede trial.active_end_s");
  if (trial.active_start_s < -trial.pre_s || trial.active_end_s > trial.post_s)
    fail(Errc::config, "trial.active_start_s: active window must fit in [-pre_s, post_s]");
  if (publish.port < 0 || publish.port > 65535)
    fail(Errc::config, "publish.port: must lie in [0, 65535] (0 = off)");
  if (publish.queue < 1) fail(Errc::config, "publish.queue: must be >= 1");
  if (outdir.empty()) fail(Errc::config, "outdir: required");
}

json PipelineConfig::to_json() const {
  json j;
  j["source"] = source.to_json();
  j["model"] = model.to_json();
  j["filter"] = {{"low_hz", filter.low_hz}, {"high_hz", filter.high_hz}, {"order", filter.order}};
  j["window"] = {{"samples", window.samples}, {"hop", window.hop}};
  j["inverse"] = {{"method", inverse.method},       {"smoothness", inverse.smoothness},
                  {"alpha0", inverse.alpha0},       {"beta0", inverse.beta0},
                  {"adapt_every", inverse.adapt_every}, {"max_iters", inverse.max_iters},
                  {"tol", inverse.tol}};
  j["rois"] = rois;
  j["roi_window_s"] = roi_window_s;
  j["trial"] = {{"pre_s", trial.pre_s},
                {"post_s", trial.post_s},
                {"active_start_s", trial.active_start_s},
                {"active_end_s", trial.active_end_s}};
  j["publish"] = {{"port", publish.port}, {"queue", publish.queue}};
  j["capture_path"] = capture_path;
  j["outdir"] = outdir;
  j["seed"] = seed;
  j["emit"] = {{"source_map", emit_source_map}, {"svg", emit_svg}};
  return j;
}

PipelineConfig PipelineConfig::from_json(const json& j) {
  check_keys(j, "config",
             {"source", "model", "filter", "window", "inverse", "rois", "roi_window_s", "trial",
              "publish", "capture_path", "outdir", "seed", "emit"});
  PipelineConfig c;
  if (j.contains("source")) c.source = SourceSpec::from_json(j.at("source"), "source");
  if (j.contains("model")) c.model = ModelSpec::from_json(j.at("model"), "model");
  if (j.contains("filter")) {
    const json& f = j.at("filter");
    check_keys(f, "filter", {"low_hz", "high_hz", "order"});
    read_field(f, "filter", "low_hz", c.filter.low_hz);
    read_field(f, "filter", "high_hz", c.filter.high_hz);
    read_field(f, "filter", "order", c.filter.order);
  }
  if (j.contains("window")) {
    const json& w = j.at("window");
    check_keys(w, "window", {"samples", "hop"});
    read_field(w, "window", "samples", c.window.samples);
    read_field(w, "window", "hop", c.window.hop);
  }
  if (j.contains("inverse")) {
    const json& i = j.at("inverse");
    check_keys(i, "inverse",
               {"method", "smoothness", "alpha0", "beta0", "adapt_every", "max_iters", "tol"});
    read_field(i, "inverse", "method", c.inverse.method);
    read_field(i, "inverse", "smoothness", c.inverse.smoothness);
    read_field(i, "inverse", "alpha0", c.inverse.alpha0);
    read_field(i, "inverse", "beta0", c.inverse.beta0);
    read_field(i, "inverse", "adapt_every", c.inverse.adapt_every);
    read_field(i, "inverse", "max_iters", c.inverse.max_iters);
    read_field(i, "inverse", "tol", c.inverse.tol);
  }
  read_field(j, "config", "rois", c.rois);
  read_field(j, "config", "roi_window_s", c.roi_window_s);
  if (j.contains("trial")) {
    const json& t = j.at("trial");
    check_keys(t, "trial", {"pre_s", "post_s", "active_start_s", "active_end_s"});
    read_field(t, "trial", "pre_s", c.trial.pre_s);
    read_field(t, "trial", "post_s", c.trial.post_s);
    read_field(t, "trial", "active_start_s", c.trial.active_start_s);
    read_field(t, "trial", "active_end_s", c.trial.active_end_s);
  }
  if (j.contains("publish")) {
    const json& p = j.at("publish");
    check_keys(p, "publish", {"port", "queue"});
    read_field(p, "publish", "port", c.publish.port);
    read_field(p, "publish", "queue", c.publish.queue);
  }
  read_field(j, "config", "capture_path", c.capture_path);
  read_field(j, "config", "outdir", c.outdir);
  read_field(j, "config", "seed", c.seed);
  if (j.contains("emit")) {
    const json& e = j.at("emit");
    check_keys(e, "emit", {"source_map", "svg"});
    read_field(e, "emit", "source_map", c.emit_source_map);
    read_field(e, "emit", "svg", c.emit_svg);
  }
  c.validate();
  return c;
}

// ===========================================================================
// Summary JSON

json LatencyStats::to_json() const {
  json j;
  j["measured"] = measured;
  j["n"] = n;
  j["p50_ms"] = p50_ms;
  j["p99_ms"] = p99_ms;
  j["max_ms"] = max_ms;
  return j;
}

namespace {

json stream_stats_json(const ingest::StreamStats& s) {
  json j;
  j["packets_total"] = s.packets_total;
  j["packets_dropped"] = s.packets_dropped;
  j["observed_rate_hz"] = s.observed_rate_hz;
  j["rate_ci_hz"] = {s.rate_ci_hz.first, s.rate_ci_hz.second};
  j["counter_errors"] = s.counter_errors;
  return j;
}

}  // namespace

json ReconstructSummary::to_json() const {
  json j;
  j["samples"] = samples;
  j["frames"] = frames;
  j["markers"] = markers;
  j["trials_reported"] = trials_reported;
  j["rate_hz"] = rate_hz;
  j["alpha"] = alpha;
  j["beta"] = beta;
  j["adapt_calls"] = adapt_calls;
  j["em_violations"] = em_violations;
  j["stream"] = stream_stats_json(stream);
  j["latency"] = latency.to_json();
  j["published"] = published;
  j["lag_disconnects"] = lag_disconnects;
  j["outputs"] = outputs;
  return j;
}

json SimSummary::to_json() const {
  json j;
  j["out"] = out_path;
  j["truth"] = truth_path;
  j["provenance"] = provenance_path;
  j["samples"] = samples;
  j["markers"] = markers;
  j["dropped_packets"] = dropped_packets;
  j["duration_s"] = duration_s;
  j["rate_hz"] = rate_hz;
  return j;
}

json RecordSummary::to_json() const {
  json j;
  j["out"] = out_path;
  j["provenance"] = provenance_path;
  j["data_records"] = data_records;
  j["markers"] = markers;
  j["stream"] = stream_stats_json(stream);
  return j;
}

json ReplaySummary::to_json() const {
  json j;
  j["port"] = port;
  j["bytes_sent"] = bytes_sent;
  return j;
}

json TimingSummary::to_json() const {
  json j;
  j["rate_hz"] = rate.rate_hz;
  j["rate_ci_hz"] = {rate.ci_low_hz, rate.ci_high_hz};
  j["steps"] = rate.steps;
  j["span_s"] = rate.span_s;
  j["mean_distance_s"] = report.mean_distance_s;
  j["compensation_flagged"] = report.compensation_flagged;
  j["compensation_period_samples"] = report.compensation_period_samples;
  j["n_distances"] = report.distances_s.size();
  j["running_mean_final_s"] =
      report.running_mean_s.empty() ? 0.0 : report.running_mean_s.back();
  j["packets"] = packets;
  j["dropped"] = dropped;
  if (!csv_path.empty()) j["csv"] = csv_path;
  return j;
}

json BciTrainSummary::to_json() const {
  json j;
  j["n_trials"] = n_trials;
  j["per_class"] = per_class;
  j["best_m"] = best_m;
  j["best_accuracy"] = best_accuracy;
  json cells = json::array();
  for (const auto& c : table.cells) {
    cells.push_back({{"m", c.m},
                     {"train_size", c.train_size},
                     {"mean_accuracy", c.mean_accuracy},
                     {"sd_accuracy", c.sd_accuracy},
                     {"n_eval", c.n_eval}});
  }
  j["cv"] = cells;
  if (!model_path.empty()) j["model"] = model_path;
  if (!cv_path.empty()) j["cv_csv"] = cv_path;
  if (!provenance_path.empty()) j["provenance"] = provenance_path;
  return j;
}

json BciEvalSummary::to_json() const {
  json j;
  j["n"] = n;
  j["correct"] = correct;
  j["accuracy"] = accuracy;
  j["confusion"] = confusion;
  if (!predictions_path.empty()) j["predictions"] = predictions_path;
  if (!provenance_path.empty()) j["provenance"] = provenance_path;
  return j;
}

// ===========================================================================
// SVG trial chart: one panel per ROI, mean curves solid, mean +- SD dashed.

namespace {

struct TrialCurve {
  std::string label;
  std::string color;
  Eigen::VectorXd mean, sd;
};

std::string svg_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

void append_polyline(std::string& svg, const Eigen::VectorXd& t, const Eigen::VectorXd& y,
                     double x0, double pw, double t0, double t1, double y_top, double py,
                     double ph, const std::string& color, bool dashed) {
  std::string pts;
  for (long i = 0; i < t.size(); ++i) {
    double x = x0 + (t[i] - t0) / (t1 - t0) * pw;
    double yy = py + ph - std::clamp(y[i], 0.0, y_top) / y_top * ph;
    pts += svg_num(x);
    pts += ',';
    pts += svg_num(yy);
    pts += ' ';
  }
  if (!pts.empty()) pts.pop_back();
  svg += "  <polyline fill=\"none\" stroke=\"" + color + "\" stroke-width=\"";
  svg += dashed ? "1" : "1.6";
  svg += "\"";
  if (dashed) svg += " stroke-dasharray=\"5 4\"";
  svg += " points=\"" + pts + "\"/>\n";
}

void write_trial_svg(const std::string& path, const std::vector<std::string>& rois,
                     const std::map<std::string, std::vector<TrialCurve>>& panels,
                     const Eigen::VectorXd& t) {
  const double ml = 64.0, mr = 18.0, mt = 34.0, mb = 42.0;
  const double pw = 620.0, ph = 150.0, gap = 30.0;
  const int np = static_cast<int>(rois.size());
  const double width = ml + pw + mr;
  const double height = mt + np * ph + (np - 1) * gap + mb;
  const double t0 = t[0], t1 = t[t.size() - 1];

  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + svg_num(width) + "\" height=\"" +
         svg_num(height) + "\" viewBox=\"0 0 " + svg_num(width) + " " + svg_num(height) + "\">\n";
  svg += "  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "  <text x=\"" + svg_num(ml) +
         "\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\">Cue-locked ROI source power "
         "(mean solid, mean&#177;SD dashed)</text>\n";

  for (int pi = 0; pi < np; ++pi) {
    const auto& roi = rois[static_cast<std::size_t>(pi)];
    const auto it = panels.find(roi);
    const double py = mt + pi * (ph + gap);

    double y_top = 0.0;
    if (it != panels.end())
      for (const auto& c : it->second) y_top = std::max(y_top, (c.mean + c.sd).maxCoeff());
    if (!(y_top > 0.0)) y_top = 1.0;
    y_top *= 1.05;

    // Frame and panel title.
    svg += "  <rect x=\"" + svg_num(ml) + "\" y=\"" + svg_num(py) + "\" width=\"" + svg_num(pw) +
           "\" height=\"" + svg_num(ph) +
           "\" fill=\"none\" stroke=\"#444\" stroke-width=\"1\"/>\n";
    svg += "  <text x=\"" + svg_num(ml + 6) + "\" y=\"" + svg_num(py + 14) +
           "\" font-family=\"sans-serif\" font-size=\"12\">" + roi + "</text>\n";

    // Cue onset.
    if (t0 < 0.0 && t1 > 0.0) {
      double xc = ml + (0.0 - t0) / (t1 - t0) * pw;
      svg += "  <line x1=\"" + svg_num(xc) + "\" y1=\"" + svg_num(py) + "\" x2=\"" + svg_num(xc) +
             "\" y2=\"" + svg_num(py + ph) +
             "\" stroke=\"#999\" stroke-width=\"1\" stroke-dasharray=\"3 3\"/>\n";
    }

    // X ticks at whole seconds.
    for (long s = static_cast<long>(std::ceil(t0)); s <= static_cast<long>(std::floor(t1)); ++s) {
      double x = ml + (static_cast<double>(s) - t0) / (t1 - t0) * pw;
      svg += "  <line x1=\"" + svg_num(x) + "\" y1=\"" + svg_num(py + ph) + "\" x2=\"" +
             svg_num(x) + "\" y2=\"" + svg_num(py + ph + 4) + "\" stroke=\"#444\"/>\n";
      if (pi == np - 1) {
        svg += "  <text x=\"" + svg_num(x) + "\" y=\"" + svg_num(py + ph + 16) +
               "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">" +
               std::to_string(s) + "</text>\n";
      }
    }

    // Y ticks at 0, half, top.
    for (int k = 0; k <= 2; ++k) {
      double v = y_top * k / 2.0;
      double y = py + ph - v / y_top * ph;
      svg += "  <line x1=\"" + svg_num(ml - 4) + "\" y1=\"" + svg_num(y) + "\" x2=\"" +
             svg_num(ml) + "\" y2=\"" + svg_num(y) + "\" stroke=\"#444\"/>\n";
      svg += "  <text x=\"" + svg_num(ml - 7) + "\" y=\"" + svg_num(y + 3) +
             "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">" + tick_num(v) +
             "</text>\n";
    }

    if (it != panels.end()) {
      for (const auto& c : it->second) {
        append_polyline(svg, t, c.mean, ml, pw, t0, t1, y_top, py, ph, c.color, false);
        append_polyline(svg, t, (c.mean + c.sd).eval(), ml, pw, t0, t1, y_top, py, ph, c.color,
                        true);
        append_polyline(svg, t, (c.mean - c.sd).cwiseMax(0.0).eval(), ml, pw, t0, t1, y_top, py,
                        ph, c.color, true);
      }
      if (pi == 0) {
        double lx = ml + pw - 120.0;
        double ly = py + 12.0;
        for (const auto& c : it->second) {
          svg += "  <line x1=\"" + svg_num(lx) + "\" y1=\"" + svg_num(ly - 3) + "\" x2=\"" +
                 svg_num(lx + 22) + "\" y2=\"" + svg_num(ly - 3) + "\" stroke=\"" + c.color +
                 "\" stroke-width=\"2\"/>\n";
          svg += "  <text x=\"" + svg_num(lx + 28) + "\" y=\"" + svg_num(ly) +
                 "\" font-family=\"sans-serif\" font-size=\"11\">" + c.label + " cue</text>\n";
          ly += 14.0;
        }
      }
    }
  }

  svg += "  <text x=\"" + svg_num(ml + pw / 2.0) + "\" y=\"" + svg_num(height - 10) +
         "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">time since cue "
         "(s)</text>\n";
  svg += "  <text transform=\"translate(14," + svg_num(mt + (height - mt - mb) / 2.0) +
         ") rotate(-90)\" font-family=\"sans-serif\" font-size=\"11\" "
         "text-anchor=\"middle\">source power (nAm&#178;)</text>\n";
  svg += "</svg>\n";
  write_text(path, svg);
}

std::string class_color(int code) {
  switch (code) {
    case 1:
      return "#1f77b4";  // Left cue
    case 2:
      return "#d62728";  // Right cue
    default:
      return "#555555";
  }
}

}  // namespace

// ===========================================================================
// Reconstruction engine.

ReconstructSummary cmd_reconstruct(const PipelineConfig& cfg) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(cfg.outdir, ec);
  if (ec) fail(Errc::io, "DirectoryFailure: cannot create '" + cfg.outdir + "'");

  ingest::PacketSource src = cfg.source.open();
  const wire::StreamHeader header = src.header();
  const double rate = header.nominal_rate_hz;
  const int nc = header.channel_count;
  if (!(rate > 0.0)) fail(Errc::bad_format, "BadHeader: nonpositive nominal rate");
  if (!(cfg.filter.high_hz < rate / 2.0))
    fail(Errc::config, "filter.high_hz: must stay below half the stream rate (" +
                           format_double(rate) + " Hz)");

  ForwardModel model = cfg.model.build();
  if (model.n_channels() != nc)
    fail(Errc::config, "model: channel count " + std::to_string(model.n_channels()) +
                           " does not match the stream's " + std::to_string(nc));

  // Unknown names throw Errc::unknown_roi naming the ROI.
  const int n_rois = static_cast<int>(cfg.rois.size());
  std::vector<const std::vector<int>*> roi_rows;
  roi_rows.reserve(cfg.rois.size());
  for (const auto& name : cfg.rois) roi_rows.push_back(&model.roi(name));

  inverse::SpatialPrior prior =
      cfg.inverse.method == "mn"
          ? inverse::minimum_norm_prior(model.n_vertices())
          : inverse::build_laplacian(model.mesh_adjacency, cfg.inverse.smoothness);
  inverse::Solver solver(model, prior, cfg.inverse.alpha0, cfg.inverse.beta0);

  std::vector<dsp::ButterworthBandpass> filters;
  filters.reserve(static_cast<std::size_t>(nc));
  for (int c = 0; c < nc; ++c)
    filters.emplace_back(cfg.filter.order, cfg.filter.low_hz, cfg.filter.high_hz, rate);

  dsp::FrameBuffer fb(nc, cfg.window.samples, cfg.window.hop);
  const int roi_window_samples =
      std::max(1, static_cast<int>(std::lround(cfg.roi_window_s * rate)));
  std::vector<inverse::RoiPowerTracker> trackers;
  trackers.reserve(cfg.rois.size());
  for (int r = 0; r < n_rois; ++r) trackers.emplace_back(roi_window_samples);

  // Live tcp runs capture their byte stream so the provenance can point at a
  // file that reruns bit-identically.
  std::string capture_path = cfg.capture_path;
  if (capture_path.empty() && cfg.source.kind == "tcp")
    capture_path = join_path(cfg.outdir, "capture.sbsr");
  std::vector<std::uint8_t> capture_bytes;
  std::unique_ptr<wire::StreamWriter> capture;
  if (!capture_path.empty())
    capture = std::make_unique<wire::StreamWriter>(header, &capture_bytes);

  std::unique_ptr<netstream::Publisher> pub;
  if (cfg.publish.port > 0) {
    netstream::PublisherOptions po;
    po.queue_capacity = static_cast<std::size_t>(cfg.publish.queue);
    pub = std::make_unique<netstream::Publisher>(cfg.publish.port, po);
  }

  const bool measure_latency = cfg.source.paced();

  std::vector<double> roi_flat;  // emitted samples x n_rois, row-major
  long emitted = 0;
  std::string hyper_csv =
      "frame,end_sample,time_s,alpha,beta,log_evidence,adapted,em_iterations,em_converged\n";
  Eigen::VectorXd map_accum = Eigen::VectorXd::Zero(model.n_vertices());
  long map_count = 0;
  std::vector<dsp::StreamEvent> events;
  std::vector<std::int64_t> arrivals;
  std::vector<double> latencies_ms;

  ReconstructSummary out;
  out.rate_hz = rate;

  long samples_seen = 0;
  long frame_idx = 0;
  long em_violations = 0;
  long adapt_calls = 0;
  Eigen::VectorXd sample_uV(nc);
  const int hop = cfg.window.hop;
  Eigen::MatrixXd block(nc, hop);  // emission unit, smaller than the window
  int block_fill = 0;

  while (auto item = src.next()) {
    if (std::holds_alternative<wire::EventMarker>(item->record)) {
      const auto& m = std::get<wire::EventMarker>(item->record);
      events.push_back({samples_seen, static_cast<int>(m.code), m.stream_time_ns});
      if (capture) capture->write_marker(m);
      if (pub) {
        std::vector<std::uint8_t> payload;
        put_u32(payload, m.code);
        put_u64(payload, static_cast<std::uint64_t>(samples_seen));
        payload.insert(payload.end(), m.label.begin(), m.label.end());
        pub->publish(netstream::MessageKind::EventMarker, m.stream_time_ns, std::move(payload));
      }
      continue;
    }

    const auto& f = std::get<wire::RawFrame>(item->record);
    if (capture) capture->write_frame(f);
    if (measure_latency) arrivals.push_back(item->recv_time_ns);
    for (int c = 0; c < nc; ++c)
      sample_uV[c] = filters[static_cast<std::size_t>(c)].step(
          wire::adc_to_uV(f.channel_samples[static_cast<std::size_t>(c)], header));
    ++samples_seen;

    // Hyperparameter adaptation runs on full analysis windows...
    if (auto frame = fb.push(sample_uV)) {
      double log_ev;
      int iters = 0;
      bool adapted = false, converged = false;
      if (frame_idx % cfg.inverse.adapt_every == 0) {
        auto rep = solver.adapt(*frame, cfg.inverse.max_iters, cfg.inverse.tol);
        ++adapt_calls;
        adapted = true;
        iters = rep.iterations;
        converged = rep.converged;
        log_ev = rep.evidence.back();
        for (std::size_t i = 1; i < rep.evidence.size(); ++i) {
          double prev = rep.evidence[i - 1];
          double slack = 1e-10 * std::max(1.0, std::abs(prev));
          if (rep.evidence[i] < prev - slack) ++em_violations;
        }
      } else {
        log_ev = solver.log_evidence(*frame);
      }
      const double t_end = static_cast<double>(samples_seen - 1) / rate;
      hyper_csv += std::to_string(frame_idx) + "," + std::to_string(samples_seen - 1) + "," +
                   format_double(t_end) + "," + format_double(solver.alpha()) + "," +
                   format_double(solver.beta()) + "," + format_double(log_ev) + "," +
                   (adapted ? "1" : "0") + "," + std::to_string(iters) + "," +
                   (converged ? "1" : "0") + "\n";
      ++frame_idx;
    }

    // ...while emission happens every `hop` samples from the first packet on,
    // so cold-start samples never wait for a whole window to fill. A window
    // completion lands on the same sample as its block, and runs first, so
    // steady-state blocks see freshly adapted hyperparameters.
    block.col(block_fill++) = sample_uV;
    if (block_fill < hop) continue;
    block_fill = 0;
    const long first_new = emitted;

    Eigen::MatrixXd s_block;
    if (cfg.emit_source_map) {
      s_block = solver.posterior_mean(block);
      map_accum += s_block.array().square().matrix().rowwise().sum();
      map_count += hop;
    }

    const std::size_t base = roi_flat.size();
    roi_flat.resize(base + static_cast<std::size_t>(hop) * n_rois);
    for (int r = 0; r < n_rois; ++r) {
      Eigen::MatrixXd s_roi;
      const auto& rows = *roi_rows[static_cast<std::size_t>(r)];
      if (cfg.emit_source_map) {
        s_roi.resize(static_cast<long>(rows.size()), hop);
        for (std::size_t k = 0; k < rows.size(); ++k)
          s_roi.row(static_cast<long>(k)) = s_block.row(rows[k]);
      } else {
        s_roi = solver.posterior_mean_rows(block, rows);
      }
      for (int c2 = 0; c2 < hop; ++c2)
        roi_flat[base + static_cast<std::size_t>(c2) * n_rois + static_cast<std::size_t>(r)] =
            trackers[static_cast<std::size_t>(r)].push(s_roi.col(c2));
    }
    emitted += hop;

    if (pub) {
      std::vector<std::uint8_t> payload;
      payload.reserve(16 + static_cast<std::size_t>(hop) * n_rois * 8);
      put_u64(payload, static_cast<std::uint64_t>(first_new));
      put_u32(payload, static_cast<std::uint32_t>(hop));
      put_u32(payload, static_cast<std::uint32_t>(n_rois));
      for (std::size_t i = base; i < roi_flat.size(); ++i) put_f64(payload, roi_flat[i]);
      pub->publish(
          netstream::MessageKind::RoiPower,
          static_cast<std::int64_t>(std::llround((samples_seen - 1) / rate * 1e9)),
          std::move(payload));
    }

    if (measure_latency) {
      const std::int64_t now = monotonic_ns();
      for (int c2 = 0; c2 < hop; ++c2) {
        const long s = first_new + c2;
        latencies_ms.push_back(static_cast<double>(now - arrivals[static_cast<std::size_t>(s)]) /
                               1e6);
      }
    }
  }

  if (pub) {
    auto ps = pub->stats();
    out.published = ps.published;
    out.lag_disconnects = ps.lag_disconnects;
    pub->close();
  }

  out.samples = samples_seen;
  out.frames = frame_idx;
  out.markers = static_cast<long>(events.size());
  out.alpha = solver.alpha();
  out.beta = solver.beta();
  out.adapt_calls = adapt_calls;
  out.em_violations = em_violations;
  out.stream = src.stats();

  if (measure_latency && !latencies_ms.empty()) {
    std::sort(latencies_ms.begin(), latencies_ms.end());
    out.latency.measured = true;
    out.latency.n = static_cast<long>(latencies_ms.size());
    out.latency.p50_ms = quantile_sorted(latencies_ms, 0.5);
    out.latency.p99_ms = quantile_sorted(latencies_ms, 0.99);
    out.latency.max_ms = latencies_ms.back();
  }

  if (capture) {
    write_binary(capture_path, capture_bytes.data(), capture_bytes.size());
    out.outputs["capture"] = capture_path;
  }

  // ---- roi_power.csv: one row per sample covered by a completed window.
  {
    std::string csv = "sample,time_s";
    for (const auto& name : cfg.rois) csv += "," + name;
    csv += "\n";
    for (long i = 0; i < emitted; ++i) {
      csv += std::to_string(i) + "," + format_double(static_cast<double>(i) / rate);
      for (int r = 0; r < n_rois; ++r)
        csv += "," + format_double(roi_flat[static_cast<std::size_t>(i) * n_rois +
                                            static_cast<std::size_t>(r)]);
      csv += "\n";
    }
    const std::string path = join_path(cfg.outdir, "roi_power.csv");
    write_text(path, csv);
    out.outputs["roi_power"] = path;
  }

  {
    const std::string path = join_path(cfg.outdir, "hyperparameters.csv");
    write_text(path, hyper_csv);
    out.outputs["hyperparameters"] = path;
  }

  if (cfg.emit_source_map) {
    std::string csv = "vertex,x_mm,y_mm,z_mm,mean_power_nAm2\n";
    for (int v = 0; v < model.n_vertices(); ++v) {
      const double p = map_count > 0 ? map_accum[v] / static_cast<double>(map_count) : 0.0;
      csv += std::to_string(v) + "," + format_double(model.vertex_positions_mm(v, 0)) + "," +
             format_double(model.vertex_positions_mm(v, 1)) + "," +
             format_double(model.vertex_positions_mm(v, 2)) + "," + format_double(p) + "\n";
    }
    const std::string path = join_path(cfg.outdir, "source_map.csv");
    write_text(path, csv);
    out.outputs["source_map"] = path;
  }

  // ---- Cue-locked trial averages (when the stream carried cue markers).
  std::vector<dsp::StreamEvent> cues;
  for (const auto& e : events)
    if (e.class_label != 0) cues.push_back(e);  // code 0 marks cue end, not a trial

  const long pre_n = std::lround(cfg.trial.pre_s * rate);
  if (!cues.empty() && emitted > 0 && pre_n > 0) {
    Eigen::MatrixXd power(n_rois, emitted);
    for (long i = 0; i < emitted; ++i)
      for (int r = 0; r < n_rois; ++r)
        power(r, i) = roi_flat[static_cast<std::size_t>(i) * n_rois + static_cast<std::size_t>(r)];

    auto tset = dsp::epoch_stream(power, cues, cfg.trial.pre_s, cfg.trial.post_s, rate);
    std::map<int, std::vector<const dsp::Epoch*>> by_class;
    for (const auto& e : tset.epochs) by_class[e.class_label].push_back(&e);
    for (auto it = by_class.begin(); it != by_class.end();) {
      if (it->second.size() < 2)
        it = by_class.erase(it);  // trial_average needs >= 2 trials
      else
        ++it;
    }

    if (!by_class.empty()) {
      const long epoch_len = tset.epochs.front().samples.cols();
      Eigen::VectorXd time(epoch_len);
      for (long k = 0; k < epoch_len; ++k)
        time[k] = static_cast<double>(k - pre_n) / rate;

      std::map<std::string, std::vector<TrialCurve>> panels;
      json erd;
      erd["baseline_window_s"] = {-cfg.trial.pre_s, 0.0};
      erd["active_window_s"] = {cfg.trial.active_start_s, cfg.trial.active_end_s};
      json n_trials_j;
      for (const auto& [code, eps] : by_class) {
        n_trials_j[class_name(code)] = eps.size();
        out.trials_reported += static_cast<long>(eps.size());
      }
      erd["n_trials"] = n_trials_j;

      std::string csv = "time_s";
      std::vector<std::pair<int, int>> columns;  // (roi index, class code)
      for (int r = 0; r < n_rois; ++r)
        for (const auto& [code, eps] : by_class) {
          csv += "," + cfg.rois[static_cast<std::size_t>(r)] + "." + class_name(code) + ".mean";
          csv += "," + cfg.rois[static_cast<std::size_t>(r)] + "." + class_name(code) + ".sd";
          columns.push_back({r, code});
        }
      csv += "\n";

      std::map<std::pair<int, int>, inverse::TrialStats> stats_by_col;
      json rois_j;
      for (int r = 0; r < n_rois; ++r) {
        const auto& roi_name = cfg.rois[static_cast<std::size_t>(r)];
        json roi_j;
        for (const auto& [code, eps] : by_class) {
          std::vector<Eigen::VectorXd> rows;
          rows.reserve(eps.size());
          for (const auto* e : eps) rows.push_back(e->samples.row(r).transpose());
          auto st = inverse::trial_average(rows);

          double baseline = 0.0;
          long nb = 0;
          double active = 0.0;
          long na = 0;
          for (long k = 0; k < epoch_len; ++k) {
            if (time[k] < 0.0) {
              baseline += st.mean[k];
              ++nb;
            }
            if (time[k] >= cfg.trial.active_start_s && time[k] <= cfg.trial.active_end_s) {
              active += st.mean[k];
              ++na;
            }
          }
          baseline = nb > 0 ? baseline / static_cast<double>(nb) : 0.0;
          active = na > 0 ? active / static_cast<double>(na) : 0.0;
          json cell;
          cell["baseline_nAm2"] = baseline;
          cell["active_nAm2"] = active;
          cell["drop_fraction"] = baseline > 0.0 ? 1.0 - active / baseline : 0.0;
          roi_j[class_name(code)] = cell;

          panels[roi_name].push_back(
              {class_name(code), class_color(code), st.mean, st.sd});
          stats_by_col[{r, code}] = std::move(st);
        }
        rois_j[roi_name] = roi_j;
      }
      erd["rois"] = rois_j;

      for (long k = 0; k < epoch_len; ++k) {
        csv += format_double(time[k]);
        for (const auto& col : columns) {
          const auto& st = stats_by_col.at(col);
          csv += "," + format_double(st.mean[k]) + "," + format_double(st.sd[k]);
        }
        csv += "\n";
      }

      const std::string csv_path = join_path(cfg.outdir, "trial_means.csv");
      write_text(csv_path, csv);
      out.outputs["trial_means"] = csv_path;

      const std::string erd_path = join_path(cfg.outdir, "erd_summary.json");
      write_text(erd_path, erd.dump(2) + "\n");
      out.outputs["erd_summary"] = erd_path;

      if (cfg.emit_svg) {
        const std::string svg_path = join_path(cfg.outdir, "trial_means.svg");
        write_trial_svg(svg_path, cfg.rois, panels, time);
        out.outputs["trial_svg"] = svg_path;
      }
    }
  }

  // ---- Provenance: a tcp run's source is rewritten to its capture file so
  // the rerun is a pure file pipeline.
  {
    PipelineConfig eff = cfg;
    if (cfg.source.kind == "tcp") {
      eff.source = SourceSpec{};
      eff.source.kind = "file";
      eff.source.path = capture_path;
      eff.source.speed = 0.0;
      eff.capture_path.clear();
    }
    const std::string path = join_path(cfg.outdir, "provenance.json");
    write_provenance(path, "reconstruct", eff.to_json());
    out.outputs["provenance"] = path;
  }

  return out;
}

// ===========================================================================
// Simulation and recording.

SimSummary cmd_sim(const SimSpec& spec, const std::string& out_path) {
  spec.validate();
  if (out_path.empty()) fail(Errc::config, "out: output path required");

  ForwardModel fwd = spec.model.build();
  simulate::SimScenario sc = spec.scenario(fwd);
  simulate::GeneratedStream gen = simulate::generate_stream(sc, fwd, sc.duration_s);

  write_binary(out_path, gen.bytes.data(), gen.bytes.size());
  SimSummary s;
  s.out_path = out_path;
  s.truth_path = sidecar_path(out_path, ".truth.json");
  gen.truth.save(s.truth_path);

  json cfgj;
  cfgj["sim"] = spec.to_json();
  cfgj["out"] = out_path;
  s.provenance_path = sidecar_path(out_path, ".provenance.json");
  write_provenance(s.provenance_path, "sim", cfgj);

  s.samples = gen.truth.n_samples;
  s.markers = static_cast<long>(gen.truth.markers.size());
  s.dropped_packets = static_cast<long>(gen.truth.dropped_packets.size());
  s.duration_s = gen.truth.duration_s;
  s.rate_hz = gen.truth.true_rate_hz;
  return s;
}

RecordSummary cmd_record(const SourceSpec& source, const std::string& out_path) {
  source.validate("source");
  if (out_path.empty()) fail(Errc::config, "out: output path required");

  ingest::PacketSource src = source.open();
  std::vector<std::uint8_t> bytes;
  wire::StreamWriter writer(src.header(), &bytes);

  RecordSummary s;
  while (auto item = src.next()) {
    if (std::holds_alternative<wire::RawFrame>(item->record)) {
      writer.write_frame(std::get<wire::RawFrame>(item->record));
      ++s.data_records;
    } else {
      writer.write_marker(std::get<wire::EventMarker>(item->record));
      ++s.markers;
    }
  }
  write_binary(out_path, bytes.data(), bytes.size());
  s.out_path = out_path;
  s.stream = src.stats();

  // A simulated capture keeps its ground truth next to it, like cmd_sim.
  if (src.truth()) src.truth()->save(sidecar_path(out_path, ".truth.json"));

  json cfgj;
  cfgj["source"] = source.to_json();
  cfgj["out"] = out_path;
  s.provenance_path = sidecar_path(out_path, ".provenance.json");
  write_provenance(s.provenance_path, "record", cfgj);
  return s;
}

// ===========================================================================
// Replay server.

struct ReplayServer::Impl {
  std::vector<std::uint8_t> bytes;
  std::size_t header_size = 0;
  std::size_t record_size = 0;
  double rate = 0.0;
  double speed = 0.0;
  int listen_fd = -1;
  int port = 0;
  std::atomic<int> client_fd{-1};
  std::atomic<bool> stopped{false};
  std::thread thread;
  std::mutex mu;
  std::condition_variable cv;
  bool done = false;
  std::int64_t bytes_sent = 0;

  void finish() {
    {
      std::lock_guard<std::mutex> lock(mu);
      done = true;
    }
    cv.notify_all();
  }

  void serve() {
    int fd = -1;
    while (!stopped.load()) {
      fd = ::accept(listen_fd, nullptr, nullptr);
      if (fd >= 0) break;
      if (errno == EINTR) continue;
      finish();
      return;  // listener closed by stop()
    }
    if (fd < 0 || stopped.load()) {
      if (fd >= 0) ::close(fd);
      finish();
      return;
    }
    client_fd.store(fd);
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);

    std::int64_t sent = 0;
    bool ok = send_all_fd(fd, bytes.data(), header_size);
    if (ok) sent += static_cast<std::int64_t>(header_size);
    if (speed <= 0.0) {
      std::size_t off = header_size;
      while (ok && off < bytes.size() && !stopped.load()) {
        const std::size_t chunk = std::min<std::size_t>(64 * 1024, bytes.size() - off);
        ok = send_all_fd(fd, bytes.data() + off, chunk);
        if (ok) {
          off += chunk;
          sent += static_cast<std::int64_t>(chunk);
        }
      }
    } else {
      // One record per pacing slot, against an absolute schedule so sleep
      // jitter cannot accumulate into drift.
      const double step_ns = 1e9 / (rate * speed);
      const std::int64_t start = monotonic_ns();
      std::size_t off = header_size;
      long i = 0;
      while (ok && off + record_size <= bytes.size() && !stopped.load()) {
        sleep_until_ns(start + static_cast<std::int64_t>(std::llround(i * step_ns)));
        ok = send_all_fd(fd, bytes.data() + off, record_size);
        if (ok) {
          off += record_size;
          sent += static_cast<std::int64_t>(record_size);
        }
        ++i;
      }
    }
    ::shutdown(fd, SHUT_WR);
    ::close(fd);
    client_fd.store(-1);
    {
      std::lock_guard<std::mutex> lock(mu);
      bytes_sent = sent;
    }
    finish();
  }
};

ReplayServer::ReplayServer(const std::string& path, int port, double speed)
    : impl_(std::make_unique<Impl>()) {
  impl_->bytes = read_binary(path);
  if (impl_->bytes.size() < 8 || std::memcmp(impl_->bytes.data(), "SBSR", 4) != 0)
    fail(Errc::bad_format, "BadMagic: '" + path + "' is not an SBSR recording");
  impl_->header_size = 8 + get_u32(impl_->bytes.data() + 4);
  if (impl_->header_size > impl_->bytes.size())
    fail(Errc::bad_format, "TruncatedHeader: '" + path + "' ends inside its header");

  wire::StreamParser parser;
  parser.feed(impl_->bytes.data(), impl_->header_size);
  parser.parse_header_if_ready();
  if (!parser.have_header())
    fail(Errc::bad_format, "TruncatedHeader: '" + path + "' has no complete header");
  impl_->record_size = parser.header().record_size();
  impl_->rate = parser.header().nominal_rate_hz;
  if (!(impl_->rate > 0.0)) fail(Errc::bad_format, "BadHeader: nonpositive nominal rate");
  impl_->speed = speed;

  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) fail(Errc::net, "SocketFailure: " + std::string(std::strerror(errno)));
  int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_ANY);
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd, 1) != 0) {
    const std::string why = std::strerror(errno);
    ::close(fd);
    fail(Errc::net, "BindFailure: port " + std::to_string(port) + ": " + why);
  }
  socklen_t len = sizeof addr;
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  impl_->listen_fd = fd;
  impl_->port = ntohs(addr.sin_port);

  Impl* impl = impl_.get();
  impl_->thread = std::thread([impl] { impl->serve(); });
}

ReplayServer::~ReplayServer() {
  stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

int ReplayServer::port() const { return impl_->port; }

std::int64_t ReplayServer::wait() {
  std::unique_lock<std::mutex> lock(impl_->mu);
  impl_->cv.wait(lock, [&] { return impl_->done; });
  return impl_->bytes_sent;
}

void ReplayServer::stop() {
  if (impl_->stopped.exchange(true)) return;
  if (impl_->listen_fd >= 0) {
    ::shutdown(impl_->listen_fd, SHUT_RDWR);
    ::close(impl_->listen_fd);
    impl_->listen_fd = -1;
  }
  const int cfd = impl_->client_fd.load();
  if (cfd >= 0) ::shutdown(cfd, SHUT_RDWR);  // breaks a blocked send; serve() closes it
}

ReplaySummary cmd_replay(const std::string& path, int port, double speed) {
  ReplayServer server(path, port, speed);
  ReplaySummary s;
  s.port = server.port();
  s.bytes_sent = server.wait();
  return s;
}

// ===========================================================================
// Timing report.

TimingSummary cmd_timing_report(const SourceSpec& source, int frame_size,
                                const std::string& out_csv) {
  source.validate("source");
  if (frame_size < 1) fail(Errc::config, "frame_size: must be >= 1");

  std::vector<std::int64_t> times;
  std::vector<unsigned> counters;
  ingest::StreamStats stats;

  if (source.kind == "file") {
    // Recordings carry no arrival clock; regenerate it from the simulation
    // sidecar. Live pacing analysis needs a tcp or sim source.
    const std::string truth_path = sidecar_path(source.path, ".truth.json");
    if (!fs::exists(truth_path))
      fail(Errc::config,
           "source: pacing analysis needs arrival times; use a sim or tcp source, or keep the "
           "ground-truth sidecar (" + truth_path + ") next to the recording");
    auto truth = simulate::GroundTruth::load(truth_path);
    auto all = simulate::pacing_times_ns(truth.pacing, truth.true_rate_hz, truth.n_samples);
    std::vector<long> dropped(truth.dropped_packets);
    std::sort(dropped.begin(), dropped.end());
    times.reserve(all.size());
    for (long i = 0; i < static_cast<long>(all.size()); ++i)
      if (!std::binary_search(dropped.begin(), dropped.end(), i))
        times.push_back(all[static_cast<std::size_t>(i)]);

    ingest::PacketSource src = ingest::PacketSource::file_replay(source.path, 0.0);
    while (src.next()) {
    }
    counters = src.counters();
    stats = src.stats();
    if (counters.size() != times.size())
      fail(Errc::bad_format, "SidecarMismatch: recording delivers " +
                                 std::to_string(counters.size()) +
                                 " packets but the sidecar implies " +
                                 std::to_string(times.size()));
  } else {
    ingest::PacketSource src = source.open();
    while (src.next()) {
    }
    times = src.recv_times_ns();
    counters = src.counters();
    stats = src.stats();
  }

  TimingSummary s;
  s.rate = ingest::estimate_rate(times, counters);
  s.report = ingest::timing_report(times, frame_size);
  s.packets = stats.packets_total;
  s.dropped = stats.packets_dropped;

  if (!out_csv.empty()) {
    std::string csv = "group,distance_s,running_mean_s\n";
    for (std::size_t i = 0; i < s.report.distances_s.size(); ++i)
      csv += std::to_string(i) + "," + format_double(s.report.distances_s[i]) + "," +
             format_double(s.report.running_mean_s[i]) + "\n";
    write_text(out_csv, csv);
    s.csv_path = out_csv;

    json cfgj;
    cfgj["source"] = source.to_json();
    cfgj["frame_size"] = frame_size;
    cfgj["out_csv"] = out_csv;
    write_provenance(sidecar_path(out_csv, ".provenance.json"), "timing_report", cfgj);
  }
  return s;
}

// ===========================================================================
// Stream decoding shared by the BCI commands.

DecodedStream decode_stream(ingest::PacketSource& src) {
  DecodedStream out;
  out.header = src.header();
  const int nc = out.header.channel_count;

  std::vector<double> flat;  // column-major: one sample = nc contiguous values
  long n = 0;
  while (auto item = src.next()) {
    if (std::holds_alternative<wire::EventMarker>(item->record)) {
      const auto& m = std::get<wire::EventMarker>(item->record);
      out.events.push_back({n, static_cast<int>(m.code), m.stream_time_ns});
      continue;
    }
    const auto& f = std::get<wire::RawFrame>(item->record);
    for (int c = 0; c < nc; ++c)
      flat.push_back(wire::adc_to_uV(f.channel_samples[static_cast<std::size_t>(c)], out.header));
    ++n;
  }
  out.uV = Eigen::Map<const Eigen::MatrixXd>(flat.data(), nc, n);
  out.stats = src.stats();
  return out;
}

namespace {

dsp::TrialSet epochs_from_recording(const std::string& path, double t_pre_s, double t_post_s) {
  ingest::PacketSource src = ingest::PacketSource::file_replay(path, 0.0);
  DecodedStream dec = decode_stream(src);
  std::vector<dsp::StreamEvent> cues;
  for (const auto& e : dec.events)
    if (e.class_label != 0) cues.push_back(e);
  if (cues.empty())
    fail(Errc::insufficient_data, "NoCueMarkers: '" + path + "' carries no labeled cue events");
  auto tset = dsp::epoch_stream(dec.uV, cues, t_pre_s, t_post_s, dec.header.nominal_rate_hz);
  if (tset.epochs.empty())
    fail(Errc::insufficient_data,
         "NoCompleteTrials: no cue window fits inside the recording");
  return tset;
}

}  // namespace

// ===========================================================================
// BCI train / eval.

bci::BciConfig BciTrainSpec::bci_config() const {
  bci::BciConfig c;
  c.band_low_hz = band_low_hz;
  c.band_high_hz = band_high_hz;
  c.filter_order = filter_order;
  c.interval_start_s = interval_start_s;
  c.interval_end_s = interval_end_s;
  c.csp_m = csp_m;
  return c;
}

void BciTrainSpec::validate(const std::string& scope) const {
  if (in.empty()) bad_field(scope, "in", "input recording required");
  if (!(band_low_hz > 0.0 && band_low_hz < band_high_hz))
    bad_field(scope, "band_low_hz", "must satisfy 0 < low < high");
  if (!(filter_order >= 2 && filter_order % 2 == 0))
    bad_field(scope, "filter_order", "must be an even pole count >= 2");
  if (!(interval_start_s < interval_end_s))
    bad_field(scope, "interval_start_s", "must precede interval_end_s");
  if (interval_start_s < -t_pre_s || interval_end_s > t_post_s)
    bad_field(scope, "interval_start_s", "interval must fit in [-t_pre_s, t_post_s]");
  if (csp_m < 0) bad_field(scope, "csp_m", "must be >= 0 (0 = pick the CV winner)");
  if (m_values.empty()) bad_field(scope, "m_values", "at least one CSP size required");
  for (int m : m_values)
    if (m < 1) bad_field(scope, "m_values", "entries must be >= 1");
  if (folds < 2) bad_field(scope, "folds", "must be >= 2");
  if (repeats < 1) bad_field(scope, "repeats", "must be >= 1");
  if (kind != "lda" && kind != "quadratic")
    bad_field(scope, "kind", "expected 'lda' or 'quadratic', got '" + kind + "'");
  for (long t : train_sizes)
    if (t < 4) bad_field(scope, "train_sizes", "entries must be >= 4");
  if (!(t_pre_s >= 0.0)) bad_field(scope, "t_pre_s", "must be >= 0");
  if (!(t_post_s > 0.0)) bad_field(scope, "t_post_s", "must be positive");
}

json BciTrainSpec::to_json() const {
  json j;
  j["in"] = in;
  j["band_low_hz"] = band_low_hz;
  j["band_high_hz"] = band_high_hz;
  j["filter_order"] = filter_order;
  j["interval_start_s"] = interval_start_s;
  j["interval_end_s"] = interval_end_s;
  j["csp_m"] = csp_m;
  j["m_values"] = m_values;
  j["folds"] = folds;
  j["repeats"] = repeats;
  j["kind"] = kind;
  j["train_sizes"] = train_sizes;
  j["t_pre_s"] = t_pre_s;
  j["t_post_s"] = t_post_s;
  j["seed"] = seed;
  j["model_out"] = model_out;
  j["cv_out"] = cv_out;
  return j;
}

BciTrainSpec BciTrainSpec::from_json(const json& j, const std::string& scope) {
  check_keys(j, scope,
             {"in", "band_low_hz", "band_high_hz", "filter_order", "interval_start_s",
              "interval_end_s", "csp_m", "m_values", "folds", "repeats", "kind", "train_sizes",
              "t_pre_s", "t_post_s", "seed", "model_out", "cv_out"});
  BciTrainSpec s;
  read_field(j, scope, "in", s.in);
  read_field(j, scope, "band_low_hz", s.band_low_hz);
  read_field(j, scope, "band_high_hz", s.band_high_hz);
  read_field(j, scope, "filter_order", s.filter_order);
  read_field(j, scope, "interval_start_s", s.interval_start_s);
  read_field(j, scope, "interval_end_s", s.interval_end_s);
  read_field(j, scope, "csp_m", s.csp_m);
  read_field(j, scope, "m_values", s.m_values);
  read_field(j, scope, "folds", s.folds);
  read_field(j, scope, "repeats", s.repeats);
  read_field(j, scope, "kind", s.kind);
  read_field(j, scope, "train_sizes", s.train_sizes);
  read_field(j, scope, "t_pre_s", s.t_pre_s);
  read_field(j, scope, "t_post_s", s.t_post_s);
  read_field(j, scope, "seed", s.seed);
  read_field(j, scope, "model_out", s.model_out);
  read_field(j, scope, "cv_out", s.cv_out);
  s.validate(scope);
  return s;
}

BciTrainSummary cmd_bci_train(const BciTrainSpec& spec) {
  spec.validate();
  auto tset = epochs_from_recording(spec.in, spec.t_pre_s, spec.t_post_s);
  bci::BciConfig bcfg = spec.bci_config();
  auto prepared = bci::prepare_trials(tset, bcfg);

  BciTrainSummary s;
  s.n_trials = static_cast<long>(prepared.epochs.size());
  for (const auto& e : prepared.epochs) ++s.per_class[class_name(e.class_label)];

  bci::CvOptions opts;
  opts.train_sizes = spec.train_sizes;
  opts.kind = spec.kind == "lda" ? bci::ClassifierKind::Lda : bci::ClassifierKind::QuadraticGaussian;
  opts.seed = spec.seed;
  s.table = bci::cross_validate(prepared, spec.m_values, spec.folds, spec.repeats, opts);

  // The decoder's CSP size: the best cell at the largest training size.
  long max_train = 0;
  for (const auto& c : s.table.cells) max_train = std::max(max_train, c.train_size);
  for (const auto& c : s.table.cells) {
    if (c.train_size != max_train) continue;
    if (s.best_m == 0 || c.mean_accuracy > s.best_accuracy) {
      s.best_m = c.m;
      s.best_accuracy = c.mean_accuracy;
    }
  }
  bcfg.csp_m = spec.csp_m > 0 ? spec.csp_m : s.best_m;

  if (!spec.model_out.empty()) {
    auto decoder = bci::train_decoder(prepared, bcfg);
    decoder.save(spec.model_out);
    s.model_path = spec.model_out;
  }
  if (!spec.cv_out.empty()) {
    write_text(spec.cv_out, s.table.to_csv());
    s.cv_path = spec.cv_out;
  }

  const std::string anchor = !spec.model_out.empty() ? spec.model_out : spec.cv_out;
  if (!anchor.empty()) {
    s.provenance_path = sidecar_path(anchor, ".provenance.json");
    write_provenance(s.provenance_path, "bci_train", spec.to_json());
  }
  return s;
}

void BciEvalSpec::validate(const std::string& scope) const {
  if (model.empty()) bad_field(scope, "model", "decoder path required");
  if (in.empty()) bad_field(scope, "in", "input recording required");
  if (!(t_pre_s >= 0.0)) bad_field(scope, "t_pre_s", "must be >= 0");
  if (!(t_post_s > 0.0)) bad_field(scope, "t_post_s", "must be positive");
}

json BciEvalSpec::to_json() const {
  json j;
  j["model"] = model;
  j["in"] = in;
  j["t_pre_s"] = t_pre_s;
  j["t_post_s"] = t_post_s;
  j["predictions_out"] = predictions_out;
  return j;
}

BciEvalSpec BciEvalSpec::from_json(const json& j, const std::string& scope) {
  check_keys(j, scope, {"model", "in", "t_pre_s", "t_post_s", "predictions_out"});
  BciEvalSpec s;
  read_field(j, scope, "model", s.model);
  read_field(j, scope, "in", s.in);
  read_field(j, scope, "t_pre_s", s.t_pre_s);
  read_field(j, scope, "t_post_s", s.t_post_s);
  read_field(j, scope, "predictions_out", s.predictions_out);
  s.validate(scope);
  return s;
}

BciEvalSummary cmd_bci_eval(const BciEvalSpec& spec) {
  spec.validate();
  auto decoder = bci::DecoderModel::load(spec.model);

  // Prepare evaluation epochs exactly like the decoder's training epochs.
  bci::BciConfig bcfg;
  bcfg.band_low_hz = decoder.csp.band_low_hz;
  bcfg.band_high_hz = decoder.csp.band_high_hz;
  bcfg.interval_start_s = decoder.csp.interval_start_s;
  bcfg.interval_end_s = decoder.csp.interval_end_s;
  auto tset = epochs_from_recording(spec.in, spec.t_pre_s, spec.t_post_s);
  auto prepared = bci::prepare_trials(tset, bcfg);

  BciEvalSummary s;
  std::string csv = "trial,true_label,predicted_label";
  for (int label : decoder.classifier.labels) csv += ",p_" + class_name(label);
  csv += "\n";

  for (const auto& e : prepared.epochs) {
    auto cls = bci::predict(e.samples, decoder);
    ++s.n;
    if (cls.label == e.class_label) ++s.correct;
    ++s.confusion[class_name(e.class_label)][class_name(cls.label)];
    csv += std::to_string(e.trial_id) + "," + class_name(e.class_label) + "," +
           class_name(cls.label);
    for (long k = 0; k < cls.posterior.size(); ++k)
      csv += "," + format_double(cls.posterior[k]);
    csv += "\n";
  }
  s.accuracy = s.n > 0 ? static_cast<double>(s.correct) / static_cast<double>(s.n) : 0.0;

  if (!spec.predictions_out.empty()) {
    write_text(spec.predictions_out, csv);
    s.predictions_path = spec.predictions_out;
    s.provenance_path = sidecar_path(spec.predictions_out, ".provenance.json");
    write_provenance(s.provenance_path, "bci_eval", spec.to_json());
  }
  return s;
}

// ===========================================================================
// Provenance.

void write_provenance(const std::string& path, const std::string& command, const json& config) {
  json p;
  p["provenance"] = 1;
  p["command"] = command;
  p["versions"] = {{"sbs", kVersion}, {"wire", kWireVersion}};
  p["config"] = config;
  write_text(path, p.dump(2) + "\n");
}

json read_provenance(const std::string& path) {
  const auto bytes = read_binary(path);
  json p;
  try {
    p = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    fail(Errc::bad_format, "ProvenanceParse: '" + path + "': " + e.what());
  }
  if (!p.is_object() || p.value("provenance", 0) != 1)
    fail(Errc::bad_format, "ProvenanceParse: '" + path + "' is not a provenance file");
  if (!p.contains("command") || !p.at("command").is_string() || !p.contains("config") ||
      !p.at("config").is_object())
    fail(Errc::bad_format, "ProvenanceParse: '" + path + "' lacks command/config");
  return p;
}

json cmd_rerun(const std::string& provenance_path, const std::string& outdir_override) {
  const json p = read_provenance(provenance_path);
  const std::string command = p.at("command").get<std::string>();
  const json& cfg = p.at("config");

  if (command == "reconstruct") {
    PipelineConfig c = PipelineConfig::from_json(cfg);
    if (!outdir_override.empty()) c.outdir = outdir_override;
    if (c.source.kind == "tcp")
      fail(Errc::config, "source: a live tcp source cannot be re-run from provenance");
    return cmd_reconstruct(c).to_json();
  }
  if (command == "sim") {
    check_keys(cfg, "config", {"sim", "out"});
    SimSpec spec = SimSpec::from_json(cfg.at("sim"), "sim");
    std::string out = cfg.at("out").get<std::string>();
    if (!outdir_override.empty()) out = replace_dir(out, outdir_override);
    return cmd_sim(spec, out).to_json();
  }
  if (command == "record") {
    check_keys(cfg, "config", {"source", "out"});
    SourceSpec source = SourceSpec::from_json(cfg.at("source"), "source");
    if (source.kind == "tcp")
      fail(Errc::config, "source: a live tcp capture cannot be re-run from provenance");
    std::string out = cfg.at("out").get<std::string>();
    if (!outdir_override.empty()) out = replace_dir(out, outdir_override);
    return cmd_record(source, out).to_json();
  }
  if (command == "timing_report") {
    check_keys(cfg, "config", {"source", "frame_size", "out_csv"});
    SourceSpec source = SourceSpec::from_json(cfg.at("source"), "source");
    if (source.kind == "tcp")
      fail(Errc::config, "source: a live tcp analysis cannot be re-run from provenance");
    int frame_size = cfg.at("frame_size").get<int>();
    std::string out_csv = cfg.at("out_csv").get<std::string>();
    if (!outdir_override.empty() && !out_csv.empty())
      out_csv = replace_dir(out_csv, outdir_override);
    return cmd_timing_report(source, frame_size, out_csv).to_json();
  }
  if (command == "bci_train") {
    BciTrainSpec spec = BciTrainSpec::from_json(cfg, "bci_train");
    if (!outdir_override.empty()) {
      if (!spec.model_out.empty()) spec.model_out = replace_dir(spec.model_out, outdir_override);
      if (!spec.cv_out.empty()) spec.cv_out = replace_dir(spec.cv_out, outdir_override);
    }
    return cmd_bci_train(spec).to_json();
  }
  if (command == "bci_eval") {
    BciEvalSpec spec = BciEvalSpec::from_json(cfg, "bci_eval");
    if (!outdir_override.empty() && !spec.predictions_out.empty())
      spec.predictions_out = replace_dir(spec.predictions_out, outdir_override);
    return cmd_bci_eval(spec).to_json();
  }
  fail(Errc::bad_format, "ProvenanceParse: unknown command '" + command + "'");
}

json run_command(const std::string& command, const json& config) {
  if (!config.is_object()) fail(Errc::config, "config: expected a JSON object");
  if (command == "reconstruct") return cmd_reconstruct(PipelineConfig::from_json(config)).to_json();
  if (command == "sim") {
    check_keys(config, "config", {"sim", "out"});
    SimSpec spec = config.contains("sim") ? SimSpec::from_json(config.at("sim"), "sim") : SimSpec{};
    std::string out;
    read_field(config, "config", "out", out);
    return cmd_sim(spec, out).to_json();
  }
  if (command == "record") {
    check_keys(config, "config", {"source", "out"});
    SourceSpec source;
    if (config.contains("source")) source = SourceSpec::from_json(config.at("source"), "source");
    std::string out;
    read_field(config, "config", "out", out);
    return cmd_record(source, out).to_json();
  }
  if (command == "replay") {
    check_keys(config, "config", {"in", "port", "speed"});
    std::string in;
    int port = 0;
    double speed = 0.0;
    read_field(config, "config", "in", in);
    read_field(config, "config", "port", port);
    read_field(config, "config", "speed", speed);
    if (in.empty()) fail(Errc::config, "in: recording path required");
    return cmd_replay(in, port, speed).to_json();
  }
  if (command == "timing_report") {
    check_keys(config, "config", {"source", "frame_size", "out_csv"});
    SourceSpec source;
    if (config.contains("source")) source = SourceSpec::from_json(config.at("source"), "source");
    int frame_size = 4;
    std::string out_csv;
    read_field(config, "config", "frame_size", frame_size);
    read_field(config, "config", "out_csv", out_csv);
    return cmd_timing_report(source, frame_size, out_csv).to_json();
  }
  if (command == "bci_train") return cmd_bci_train(BciTrainSpec::from_json(config)).to_json();
  if (command == "bci_eval") return cmd_bci_eval(BciEvalSpec::from_json(config)).to_json();
  if (command == "rerun") {
    check_keys(config, "config", {"provenance", "outdir"});
    std::string prov, outdir;
    read_field(config, "config", "provenance", prov);
    read_field(config, "config", "outdir", outdir);
    if (prov.empty()) fail(Errc::config, "provenance: path required");
    return cmd_rerun(prov, outdir);
  }
  fail(Errc::invalid_argument, "command: unknown command '" + command + "'");
}

}  // namespace sbs::pipeline
