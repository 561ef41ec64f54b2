// Operator CLI. Every command is a thin shim: parse flags, assemble the
// command's JSON config (the same schema the provenance files store), hand it
// to the C API, and render the summary. Exit codes: 0 success, 1 runtime
// failure, 2 usage or configuration error.

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <sbs/sbs.h>

using nlohmann::json;

namespace {

int exit_code_for(sbs_status status) {
  if (status == SBS_OK) return 0;
  if (status == SBS_ERR_CONFIG || status == SBS_ERR_INVALID_ARGUMENT ||
      status == SBS_ERR_UNKNOWN_ROI)
    return 2;
  return 1;
}

int report_failure(sbs_status status) {
  std::fprintf(stderr, "error (%s): %s\n", sbs_status_name(status), sbs_last_error());
  return exit_code_for(status);
}

// Runs a command and prints either the machine summary or a human digest.
int run_and_print(const char* command, const json& config, bool as_json,
                  void (*digest)(const json&)) {
  char* text = nullptr;
  sbs_status status = sbs_run(command, config.dump().c_str(), &text);
  if (status != SBS_OK) return report_failure(status);
  json summary = json::parse(text);
  sbs_string_free(text);
  if (as_json)
    std::printf("%s\n", summary.dump(2).c_str());
  else
    digest(summary);
  return 0;
}

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CLI::ValidationError("--config", "cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw CLI::ValidationError("--config", "'" + path + "': " + e.what());
  }
}

// host:port -> {"kind":"tcp",...}; throws a usage error on a malformed value.
json tcp_source(const std::string& hostport) {
  auto colon = hostport.rfind(':');
  int port = 0;
  if (colon != std::string::npos && colon > 0)
    try {
      port = std::stoi(hostport.substr(colon + 1));
    } catch (...) {
      port = 0;
    }
  if (port <= 0) throw CLI::ValidationError("--tcp", "expected HOST:PORT, got '" + hostport + "'");
  return {{"kind", "tcp"}, {"host", hostport.substr(0, colon)}, {"port", port}};
}

// Shared --in/--speed/--tcp/--source-json source selection.
struct SourceFlags {
  std::string in, tcp, source_json;
  double speed = 0.0;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--in", in, "read from an SBSR recording");
    cmd->add_option("--speed", speed, "file pacing: 0 = unpaced, 1 = real time")
        ->check(CLI::NonNegativeNumber);
    cmd->add_option("--tcp", tcp, "read from a live stream at HOST:PORT");
    cmd->add_option("--source-json", source_json, "full source spec from a JSON file");
  }

  json resolve() const {
    int given = (!in.empty()) + (!tcp.empty()) + (!source_json.empty());
    if (given != 1)
      throw CLI::ValidationError("source", "give exactly one of --in, --tcp, --source-json");
    if (!in.empty()) return {{"kind", "file"}, {"path", in}, {"speed", speed}};
    if (!tcp.empty()) return tcp_source(tcp);
    return load_json_file(source_json);
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sbs — streaming EEG engine: simulate, record, replay, reconstruct, decode"};
  app.require_subcommand(1);
  bool as_json = false;
  app.add_flag("--json", as_json, "print the machine-readable run summary");

  // ---- sim -----------------------------------------------------------------
  auto* sim = app.add_subcommand("sim", "generate a synthetic recording with ground truth");
  struct {
    std::string preset = "erd", pacing, out;
    std::vector<std::string> classes;
    int trials = 0, pacing_period = 0, dipoles = 0;
    double seconds = 0, rate = 0, drop = 0, device_rate = 0, noise = 0, amplitude = 0, depth = 0,
           band_low = 0, band_high = 0;
    std::uint64_t seed = 0;
  } s;
  sim->add_option("--preset", s.preset, "erd | alpha | noise")->capture_default_str();
  sim->add_option("--trials", s.trials, "cued trials (erd)");
  sim->add_option("--classes", s.classes, "cue classes (erd)")->delimiter(',');
  sim->add_option("--seconds", s.seconds, "stream length; 0 = protocol length");
  sim->add_option("--rate", s.rate, "true sampling rate in Hz");
  sim->add_option("--drop", s.drop, "per-packet loss probability");
  sim->add_option("--pacing", s.pacing, "uniform | compensated");
  sim->add_option("--pacing-period", s.pacing_period, "packets per compensation gap");
  sim->add_option("--device-rate", s.device_rate, "device tick rate for compensated pacing");
  sim->add_option("--noise", s.noise, "sensor noise sd in uV");
  sim->add_option("--amplitude", s.amplitude, "source amplitude in nAm");
  sim->add_option("--depth", s.depth, "ERD suppression depth in (0,1]");
  sim->add_option("--band-low", s.band_low, "source band low edge in Hz");
  sim->add_option("--band-high", s.band_high, "source band high edge in Hz");
  sim->add_option("--seed", s.seed, "simulation seed");
  sim->add_option("--dipoles", s.dipoles, "template model vertex count");
  sim->add_option("--out", s.out, "output recording path")->required();

  // ---- record / replay -----------------------------------------------------
  auto* record = app.add_subcommand("record", "capture a packet source to a recording");
  SourceFlags record_src;
  record_src.add_to(record);
  std::string record_out;
  record->add_option("--out", record_out, "output recording path")->required();

  auto* replay = app.add_subcommand("replay", "serve a recording to one TCP client");
  std::string replay_in;
  int replay_port = 0;
  double replay_speed = 1.0;
  replay->add_option("--in", replay_in, "recording to serve")->required();
  replay->add_option("--port", replay_port, "listen port; 0 = ephemeral")->capture_default_str();
  replay->add_option("--speed", replay_speed, "pacing multiple; 0 = flood")
      ->capture_default_str();

  // ---- reconstruct ---------------------------------------------------------
  auto* rec = app.add_subcommand("reconstruct", "stream source reconstruction to CSV/SVG");
  SourceFlags rec_src;
  rec_src.add_to(rec);
  struct {
    std::string config, outdir, method, model_file, capture;
    std::vector<std::string> rois;
    int filter_order = 0, window = 0, hop = 0, adapt_every = 0, publish_port = 0,
        publish_queue = 0, dipoles = 0;
    double smoothness = 0, filter_low = 0, filter_high = 0, roi_window = 0;
    std::uint64_t seed = 0;
    bool no_source_map = false, no_svg = false;
  } r;
  rec->add_option("--config", r.config, "full pipeline config JSON (flags override it)");
  rec->add_option("--outdir", r.outdir, "output directory");
  rec->add_option("--roi", r.rois, "ROI names to track")->delimiter(',');
  rec->add_option("--method", r.method, "mn | loreta");
  rec->add_option("--smoothness", r.smoothness, "loreta neighbor coupling in [0,1]");
  rec->add_option("--filter-low", r.filter_low, "bandpass low edge in Hz");
  rec->add_option("--filter-high", r.filter_high, "bandpass high edge in Hz");
  rec->add_option("--filter-order", r.filter_order, "bandpass pole count (even)");
  rec->add_option("--window", r.window, "adaptation window in samples");
  rec->add_option("--hop", r.hop, "emission block in samples");
  rec->add_option("--adapt-every", r.adapt_every, "adapt hyperparameters every k-th window");
  rec->add_option("--roi-window", r.roi_window, "ROI power smoothing window in seconds");
  rec->add_option("--publish-port", r.publish_port, "stream results on this TCP port");
  rec->add_option("--publish-queue", r.publish_queue, "per-subscriber queue capacity");
  rec->add_option("--seed", r.seed, "run seed");
  rec->add_option("--dipoles", r.dipoles, "template model vertex count");
  rec->add_option("--model-file", r.model_file, "load the forward model from an SBFM file");
  rec->add_option("--capture", r.capture, "capture the consumed stream to this path");
  rec->add_flag("--no-source-map", r.no_source_map, "skip the per-vertex power map");
  rec->add_flag("--no-svg", r.no_svg, "skip the trial-average chart");

  // ---- timing-report -------------------------------------------------------
  auto* timing = app.add_subcommand("timing-report", "packet pacing and rate analysis");
  SourceFlags timing_src;
  timing_src.add_to(timing);
  int frame_size = 4;
  std::string timing_out;
  timing->add_option("--frame-size", frame_size, "packets per pacing group")
      ->capture_default_str();
  timing->add_option("--out", timing_out, "write per-group distances CSV here");

  // ---- bci-train / bci-eval ------------------------------------------------
  auto* train = app.add_subcommand("bci-train", "train a CSP decoder from a labeled recording");
  struct {
    std::string in, kind, model_out, cv_out;
    std::vector<int> m_values;
    std::vector<long> train_sizes;
    int folds = 0, repeats = 0, filter_order = 0, csp_m = 0;
    double band_low = 0, band_high = 0, interval_start = 0, interval_end = 0, pre = 0, post = 0;
    std::uint64_t seed = 0;
  } t;
  train->add_option("--in", t.in, "labeled SBSR recording")->required();
  train->add_option("--band-low", t.band_low, "analysis band low edge in Hz");
  train->add_option("--band-high", t.band_high, "analysis band high edge in Hz");
  train->add_option("--filter-order", t.filter_order, "bandpass pole count (even)");
  train->add_option("--interval-start", t.interval_start, "post-cue window start in s");
  train->add_option("--interval-end", t.interval_end, "post-cue window end in s");
  train->add_option("--m", t.m_values, "CSP sizes to cross-validate")->delimiter(',');
  train->add_option("--csp-m", t.csp_m, "fixed CSP size for the saved decoder; 0 = CV winner");
  train->add_option("--folds", t.folds, "cross-validation folds");
  train->add_option("--repeats", t.repeats, "cross-validation repeats");
  train->add_option("--kind", t.kind, "lda | quadratic");
  train->add_option("--train-sizes", t.train_sizes, "learning-curve training sizes")
      ->delimiter(',');
  train->add_option("--pre", t.pre, "epoch seconds before each cue");
  train->add_option("--post", t.post, "epoch seconds after each cue");
  train->add_option("--seed", t.seed, "fold shuffling seed");
  train->add_option("--model-out", t.model_out, "write the decoder JSON here");
  train->add_option("--cv-out", t.cv_out, "write the CV table CSV here");

  auto* eval = app.add_subcommand("bci-eval", "evaluate a decoder on a labeled recording");
  struct {
    std::string model, in, predictions_out;
    double pre = 0, post = 0;
  } e;
  eval->add_option("--model", e.model, "decoder JSON from bci-train")->required();
  eval->add_option("--in", e.in, "labeled SBSR recording")->required();
  eval->add_option("--pre", e.pre, "epoch seconds before each cue");
  eval->add_option("--post", e.post, "epoch seconds after each cue");
  eval->add_option("--predictions-out", e.predictions_out, "write per-trial predictions here");

  // ---- rerun ---------------------------------------------------------------
  auto* rerun = app.add_subcommand("rerun", "re-execute a provenance file");
  std::string rerun_prov, rerun_outdir;
  rerun->add_option("provenance", rerun_prov, "provenance JSON from a previous run")->required();
  rerun->add_option("--outdir", rerun_outdir, "redirect outputs into this directory");

  // Let `sbs <cmd> ... --json` reach the global flag.
  for (CLI::App* sub : {sim, record, replay, rec, timing, train, eval, rerun}) sub->fallthrough();

  try {
    app.parse(argc, argv);

    if (sim->parsed()) {
      json spec;
      if (sim->count("--preset")) spec["preset"] = s.preset;
      if (sim->count("--trials")) spec["n_trials"] = s.trials;
      if (sim->count("--classes")) spec["classes"] = s.classes;
      if (sim->count("--seconds")) spec["duration_s"] = s.seconds;
      if (sim->count("--rate")) spec["rate_hz"] = s.rate;
      if (sim->count("--drop")) spec["drop_prob"] = s.drop;
      if (sim->count("--pacing")) spec["pacing"] = s.pacing;
      if (sim->count("--pacing-period")) spec["pacing_period"] = s.pacing_period;
      if (sim->count("--device-rate")) spec["device_rate_hz"] = s.device_rate;
      if (sim->count("--noise")) spec["noise_std_uV"] = s.noise;
      if (sim->count("--amplitude")) spec["amplitude_nAm"] = s.amplitude;
      if (sim->count("--depth")) spec["depth"] = s.depth;
      if (sim->count("--band-low")) spec["band_low_hz"] = s.band_low;
      if (sim->count("--band-high")) spec["band_high_hz"] = s.band_high;
      if (sim->count("--seed")) spec["seed"] = s.seed;
      if (sim->count("--dipoles")) spec["model"] = {{"dipoles", s.dipoles}};
      return run_and_print("sim", {{"sim", spec}, {"out", s.out}}, as_json, [](const json& j) {
        std::printf("wrote %s: %ld samples (%.1f s at %.2f Hz), %ld markers, %ld dropped\n",
                    j.at("out").get<std::string>().c_str(), j.at("samples").get<long>(),
                    j.at("duration_s").get<double>(), j.at("rate_hz").get<double>(),
                    j.at("markers").get<long>(), j.at("dropped_packets").get<long>());
      });
    }

    if (record->parsed()) {
      json cfg = {{"source", record_src.resolve()}, {"out", record_out}};
      return run_and_print("record", cfg, as_json, [](const json& j) {
        std::printf("wrote %s: %ld data records, %ld markers\n",
                    j.at("out").get<std::string>().c_str(), j.at("data_records").get<long>(),
                    j.at("markers").get<long>());
      });
    }

    if (replay->parsed()) {
      // Handle API so the bound port is visible before the blocking serve.
      sbs_replay* server = nullptr;
      sbs_status status = sbs_replay_open(replay_in.c_str(), replay_port, replay_speed, &server);
      if (status != SBS_OK) return report_failure(status);
      std::fprintf(stderr, "listening on port %d\n", sbs_replay_port(server));
      std::int64_t sent = 0;
      status = sbs_replay_wait(server, &sent);
      int port = sbs_replay_port(server);
      sbs_replay_free(server);
      if (status != SBS_OK) return report_failure(status);
      if (as_json)
        std::printf("%s\n", json{{"port", port}, {"bytes_sent", sent}}.dump(2).c_str());
      else
        std::printf("served %lld bytes on port %d\n", static_cast<long long>(sent), port);
      return 0;
    }

    if (rec->parsed()) {
      json cfg = r.config.empty() ? json::object() : load_json_file(r.config);
      if (rec->count("--in") || rec->count("--tcp") || rec->count("--source-json"))
        cfg["source"] = rec_src.resolve();
      if (rec->count("--outdir")) cfg["outdir"] = r.outdir;
      if (rec->count("--roi")) cfg["rois"] = r.rois;
      if (rec->count("--method")) cfg["inverse"]["method"] = r.method;
      if (rec->count("--smoothness")) cfg["inverse"]["smoothness"] = r.smoothness;
      if (rec->count("--adapt-every")) cfg["inverse"]["adapt_every"] = r.adapt_every;
      if (rec->count("--filter-low")) cfg["filter"]["low_hz"] = r.filter_low;
      if (rec->count("--filter-high")) cfg["filter"]["high_hz"] = r.filter_high;
      if (rec->count("--filter-order")) cfg["filter"]["order"] = r.filter_order;
      if (rec->count("--window")) cfg["window"]["samples"] = r.window;
      if (rec->count("--hop")) cfg["window"]["hop"] = r.hop;
      if (rec->count("--roi-window")) cfg["roi_window_s"] = r.roi_window;
      if (rec->count("--publish-port")) cfg["publish"]["port"] = r.publish_port;
      if (rec->count("--publish-queue")) cfg["publish"]["queue"] = r.publish_queue;
      if (rec->count("--seed")) cfg["seed"] = r.seed;
      if (rec->count("--dipoles")) cfg["model"] = {{"kind", "template"}, {"dipoles", r.dipoles}};
      if (rec->count("--model-file")) cfg["model"] = {{"kind", "file"}, {"path", r.model_file}};
      if (rec->count("--capture")) cfg["capture_path"] = r.capture;
      if (r.no_source_map) cfg["emit"]["source_map"] = false;
      if (r.no_svg) cfg["emit"]["svg"] = false;
      return run_and_print("reconstruct", cfg, as_json, [](const json& j) {
        std::printf("%ld samples -> %ld windows; alpha=%.4g beta=%.4g; %ld trials reported\n",
                    j.at("samples").get<long>(), j.at("frames").get<long>(),
                    j.at("alpha").get<double>(), j.at("beta").get<double>(),
                    j.at("trials_reported").get<long>());
        const json& lat = j.at("latency");
        if (lat.at("measured").get<bool>())
          std::printf("latency p50 %.1f ms, p99 %.1f ms, max %.1f ms over %ld samples\n",
                      lat.at("p50_ms").get<double>(), lat.at("p99_ms").get<double>(),
                      lat.at("max_ms").get<double>(), lat.at("n").get<long>());
        for (const auto& [name, path] : j.at("outputs").items())
          std::printf("  %-15s %s\n", name.c_str(), path.get<std::string>().c_str());
      });
    }

    if (timing->parsed()) {
      json cfg = {{"source", timing_src.resolve()},
                  {"frame_size", frame_size},
                  {"out_csv", timing_out}};
      return run_and_print("timing_report", cfg, as_json, [](const json& j) {
        std::printf("rate %.4f Hz (CI %.4f..%.4f), %lld packets, %lld inferred drops\n",
                    j.at("rate_hz").get<double>(), j.at("rate_ci_hz")[0].get<double>(),
                    j.at("rate_ci_hz")[1].get<double>(),
                    static_cast<long long>(j.at("packets").get<long>()),
                    static_cast<long long>(j.at("dropped").get<long>()));
        std::printf("mean group distance %.6f s", j.at("mean_distance_s").get<double>());
        if (j.at("compensation_flagged").get<bool>())
          std::printf("; compensation period %d samples",
                      j.at("compensation_period_samples").get<int>());
        std::printf("\n");
      });
    }

    if (train->parsed()) {
      json cfg = {{"in", t.in}};
      if (train->count("--band-low")) cfg["band_low_hz"] = t.band_low;
      if (train->count("--band-high")) cfg["band_high_hz"] = t.band_high;
      if (train->count("--filter-order")) cfg["filter_order"] = t.filter_order;
      if (train->count("--interval-start")) cfg["interval_start_s"] = t.interval_start;
      if (train->count("--interval-end")) cfg["interval_end_s"] = t.interval_end;
      if (train->count("--m")) cfg["m_values"] = t.m_values;
      if (train->count("--csp-m")) cfg["csp_m"] = t.csp_m;
      if (train->count("--folds")) cfg["folds"] = t.folds;
      if (train->count("--repeats")) cfg["repeats"] = t.repeats;
      if (train->count("--kind")) cfg["kind"] = t.kind;
      if (train->count("--train-sizes")) cfg["train_sizes"] = t.train_sizes;
      if (train->count("--pre")) cfg["t_pre_s"] = t.pre;
      if (train->count("--post")) cfg["t_post_s"] = t.post;
      if (train->count("--seed")) cfg["seed"] = t.seed;
      if (train->count("--model-out")) cfg["model_out"] = t.model_out;
      if (train->count("--cv-out")) cfg["cv_out"] = t.cv_out;
      return run_and_print("bci_train", cfg, as_json, [](const json& j) {
        std::printf("trained on %ld trials; best m=%d at %.1f%% CV accuracy\n",
                    j.at("n_trials").get<long>(), j.at("best_m").get<int>(),
                    100.0 * j.at("best_accuracy").get<double>());
        if (j.contains("model"))
          std::printf("  decoder         %s\n", j.at("model").get<std::string>().c_str());
        if (j.contains("cv_csv"))
          std::printf("  cv table        %s\n", j.at("cv_csv").get<std::string>().c_str());
      });
    }

    if (eval->parsed()) {
      json cfg = {{"model", e.model}, {"in", e.in}};
      if (eval->count("--pre")) cfg["t_pre_s"] = e.pre;
      if (eval->count("--post")) cfg["t_post_s"] = e.post;
      if (eval->count("--predictions-out")) cfg["predictions_out"] = e.predictions_out;
      return run_and_print("bci_eval", cfg, as_json, [](const json& j) {
        std::printf("accuracy %.1f%% (%ld/%ld)\n", 100.0 * j.at("accuracy").get<double>(),
                    j.at("correct").get<long>(), j.at("n").get<long>());
      });
    }

    if (rerun->parsed()) {
      json cfg = {{"provenance", rerun_prov}, {"outdir", rerun_outdir}};
      return run_and_print("rerun", cfg, as_json,
                           [](const json&) { std::printf("rerun complete\n"); });
    }
  } catch (const CLI::CallForHelp& help) {
    return app.exit(help);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return 2;
  }
  return 2;  // no subcommand matched (require_subcommand should prevent this)
}
