#include "simulate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <Eigen/Dense>

#include "dsp.hpp"

namespace sbs::simulate {

const char* cue_label(CueClass c) {
  switch (c) {
    case CueClass::Left:
      return "Left";
    case CueClass::Right:
      return "Right";
    case CueClass::Relax:
      return "Relax";
  }
  fail(Errc::invalid_argument, "unknown cue class");
}

std::uint32_t cue_code(CueClass c) { return static_cast<std::uint32_t>(c); }

CueClass cue_from_label(const std::string& label) {
  if (label == "Left") return CueClass::Left;
  if (label == "Right") return CueClass::Right;
  if (label == "Relax") return CueClass::Relax;
  fail(Errc::invalid_argument, "unknown cue label '" + label + "'");
}

double Envelope::eval(double t_s) const {
  if (points.empty()) return 1.0;
  if (t_s <= points.front().first) return points.front().second;
  if (t_s >= points.back().first) return points.back().second;
  for (std::size_t i = 1; i < points.size(); ++i) {
    if (t_s <= points[i].first) {
      const auto& [t0, g0] = points[i - 1];
      const auto& [t1, g1] = points[i];
      double w = (t_s - t0) / (t1 - t0);
      return g0 + w * (g1 - g0);
    }
  }
  return points.back().second;
}

namespace {

// Independent deterministic substreams from one scenario seed.
Rng sub_rng(std::uint64_t seed, std::uint64_t tag) {
  return Rng(seed ^ (0x9e3779b97f4a7c15ull * (tag + 1)));
}

void validate_envelope(const Envelope& env) {
  for (std::size_t i = 0; i < env.points.size(); ++i) {
    const auto& [t, g] = env.points[i];
    if (!std::isfinite(t) || !std::isfinite(g) || g < 0.0)
      fail(Errc::invalid_argument, "envelope breakpoints must be finite with gain >= 0");
    if (i > 0 && t <= env.points[i - 1].first)
      fail(Errc::invalid_argument, "envelope breakpoint times must be strictly increasing");
  }
}

// Unit-RMS band-limited noise: white noise through a causal bandpass, with a
// 2 s startup transient generated and discarded.
std::vector<double> band_noise_course(double low_hz, double high_hz, double rate_hz, long n,
                                      Rng& rng) {
  const long pad = std::lround(2.0 * rate_hz);
  Eigen::VectorXd white(pad + n);
  for (long i = 0; i < pad + n; ++i) white[i] = rng.normal();
  dsp::ButterworthBandpass filter(4, low_hz, high_hz, rate_hz);
  Eigen::VectorXd shaped = filter.causal(white).tail(n);
  double rms = std::sqrt(shaped.squaredNorm() / static_cast<double>(n));
  if (!(rms > 0.0) || !std::isfinite(rms))
    fail(Errc::runtime, "degenerate source course (zero or non-finite power)");
  std::vector<double> course(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) course[static_cast<std::size_t>(i)] = shaped[i] / rms;
  return course;
}

nlohmann::json pacing_to_json(const Pacing& p) {
  return {{"mode", p.mode == PacingMode::Uniform ? "uniform" : "compensated"},
          {"period", p.period},
          {"device_rate_hz", p.device_rate_hz}};
}

Pacing pacing_from_json(const nlohmann::json& j) {
  Pacing p;
  std::string mode = j.at("mode").get<std::string>();
  if (mode == "uniform")
    p.mode = PacingMode::Uniform;
  else if (mode == "compensated")
    p.mode = PacingMode::Compensated;
  else
    fail(Errc::bad_format, "unknown pacing mode '" + mode + "'");
  p.period = j.at("period").get<int>();
  p.device_rate_hz = j.at("device_rate_hz").get<double>();
  return p;
}

}  // namespace

std::vector<Trial> erd_trial_protocol(int n_trials, const std::vector<CueClass>& classes,
                                      const TrialTiming& timing, double rate_hz,
                                      std::uint64_t seed, double* duration_s) {
  if (n_trials < 1) fail(Errc::invalid_argument, "protocol needs at least one trial");
  if (classes.empty()) fail(Errc::invalid_argument, "protocol needs at least one cue class");
  if (!(timing.cue_s > 0.0)) fail(Errc::invalid_argument, "cue duration must be positive");
  if (!(timing.rest_min_s >= 0.0) || !(timing.rest_max_s >= timing.rest_min_s))
    fail(Errc::invalid_argument, "rest interval must satisfy 0 <= min <= max");
  if (!(rate_hz > 0.0)) fail(Errc::invalid_argument, "rate must be positive");

  Rng rng(seed);
  std::vector<Trial> trials;
  trials.reserve(static_cast<std::size_t>(n_trials));
  double cursor_s = 0.0;
  for (int i = 0; i < n_trials; ++i) {
    cursor_s += timing.rest_min_s + (timing.rest_max_s - timing.rest_min_s) * rng.uniform();
    Trial t;
    t.cue_sample = std::lround(cursor_s * rate_hz);
    t.cls = classes[static_cast<std::size_t>(rng.below(classes.size()))];
    trials.push_back(t);
    cursor_s += timing.cue_s;
  }
  if (duration_s) *duration_s = cursor_s + timing.rest_max_s;
  return trials;
}

std::vector<std::int64_t> pacing_times_ns(const Pacing& pacing, double true_rate_hz, long n) {
  if (!(true_rate_hz > 0.0)) fail(Errc::invalid_argument, "rate must be positive");
  if (n < 0) fail(Errc::invalid_argument, "packet count must be non-negative");
  std::vector<std::int64_t> times(static_cast<std::size_t>(n));
  if (pacing.mode == PacingMode::Uniform) {
    for (long i = 0; i < n; ++i)
      times[static_cast<std::size_t>(i)] = std::llround(static_cast<double>(i) * 1e9 / true_rate_hz);
    return times;
  }
  if (pacing.period < 1) fail(Errc::invalid_argument, "pacing period must be >= 1");
  if (!(pacing.device_rate_hz > 0.0)) fail(Errc::invalid_argument, "device rate must be positive");
  const double base_s = 1.0 / pacing.device_rate_hz;
  const double extra_s =
      pacing.period * (1.0 / true_rate_hz - 1.0 / pacing.device_rate_hz);
  double t_s = 0.0;
  for (long i = 0; i < n; ++i) {
    if (i > 0) {
      t_s += base_s;
      if (i % pacing.period == 0) t_s += extra_s;
    }
    times[static_cast<std::size_t>(i)] = std::llround(t_s * 1e9);
  }
  return times;
}

GeneratedStream generate_stream(const SimScenario& scenario, const ForwardModel& model,
                                double duration_s) {
  const double rate = scenario.true_rate_hz;
  if (!(duration_s > 0.0)) fail(Errc::invalid_argument, "duration must be positive");
  if (!(rate > 0.0) || !std::isfinite(rate))
    fail(Errc::invalid_argument, "true_rate_hz must be positive and finite");
  if (!(scenario.drop_prob >= 0.0 && scenario.drop_prob <= 1.0))
    fail(Errc::invalid_argument, "drop_prob must lie in [0, 1]");
  if (!(scenario.noise_std_uV >= 0.0) || !std::isfinite(scenario.noise_std_uV))
    fail(Errc::invalid_argument, "noise_std_uV must be non-negative and finite");
  if (!(scenario.cue_s > 0.0)) fail(Errc::invalid_argument, "cue duration must be positive");

  const long n = std::lround(duration_s * rate);
  if (n < 1) fail(Errc::invalid_argument, "duration too short for one sample");
  const int nc = model.n_channels();
  const int nd = model.n_vertices();
  const long cue_len = std::lround(scenario.cue_s * rate);

  for (const SourceEvent& src : scenario.sources) {
    if (src.vertex_ids.empty())
      fail(Errc::invalid_argument, "source event has no vertices");
    for (int v : src.vertex_ids)
      if (v < 0 || v >= nd)
        fail(Errc::invalid_argument, "source vertex " + std::to_string(v) +
                                         " outside mesh of " + std::to_string(nd));
    if (!(src.band_low_hz > 0.0) || !(src.band_high_hz > src.band_low_hz) ||
        !(src.band_high_hz < rate / 2.0))
      fail(Errc::invalid_argument,
           "BandOutOfRange: band [" + format_double(src.band_low_hz) + ", " +
               format_double(src.band_high_hz) + "] Hz outside (0, " +
               format_double(rate / 2.0) + ")");
    if (!std::isfinite(src.amplitude_nAm))
      fail(Errc::invalid_argument, "source amplitude must be finite");
    validate_envelope(src.envelope);
  }
  for (const Trial& t : scenario.trials) {
    if (t.cue_sample < 0 || t.cue_sample + cue_len > n)
      fail(Errc::invalid_argument, "trial at sample " + std::to_string(t.cue_sample) +
                                       " extends past the stream end");
  }

  // Source courses and the sensor signal in microvolts.
  GeneratedStream out;
  GroundTruth& truth = out.truth;
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(nc, n);
  for (std::size_t e = 0; e < scenario.sources.size(); ++e) {
    const SourceEvent& src = scenario.sources[e];
    Rng rng_course = sub_rng(scenario.seed, 100 + e);
    std::vector<double> course = band_noise_course(src.band_low_hz, src.band_high_hz, rate, n,
                                                   rng_course);

    // Per-sample gain from the envelope.
    std::vector<double> gain(static_cast<std::size_t>(n), 1.0);
    if (src.class_label) {
      for (const Trial& t : scenario.trials) {
        if (t.cls == CueClass::Relax) continue;
        const bool same_side = t.cls == *src.class_label;
        const long k_end = std::min<long>(n, t.cue_sample + cue_len);
        for (long k = t.cue_sample; k < k_end; ++k) {
          double e_gain = src.envelope.eval(static_cast<double>(k - t.cue_sample) / rate);
          gain[static_cast<std::size_t>(k)] =
              same_side ? 1.0 - (1.0 - e_gain) / 2.0 : e_gain;
        }
      }
    } else {
      for (long k = 0; k < n; ++k)
        gain[static_cast<std::size_t>(k)] = src.envelope.eval(static_cast<double>(k) / rate);
    }

    Eigen::VectorXd patch_col = Eigen::VectorXd::Zero(nc);
    for (int v : src.vertex_ids) patch_col += model.gain.col(v);

    TruthSource ts;
    ts.vertex_ids = src.vertex_ids;
    ts.band_low_hz = src.band_low_hz;
    ts.band_high_hz = src.band_high_hz;
    ts.amplitude_nAm = src.amplitude_nAm;
    ts.class_label = src.class_label;
    ts.course_nAm.resize(static_cast<std::size_t>(n));
    for (long k = 0; k < n; ++k) {
      double s = src.amplitude_nAm * gain[static_cast<std::size_t>(k)] *
                 course[static_cast<std::size_t>(k)];
      ts.course_nAm[static_cast<std::size_t>(k)] = s;
      y.col(k) += patch_col * s;
    }
    truth.sources.push_back(std::move(ts));
  }

  if (scenario.noise_std_uV > 0.0) {
    Rng rng_noise = sub_rng(scenario.seed, 3);
    for (long k = 0; k < n; ++k)
      for (int c = 0; c < nc; ++c) y(c, k) += scenario.noise_std_uV * rng_noise.normal();
  }

  // Markers: class code at cue onset, Relax at cue end.
  for (const Trial& t : scenario.trials) {
    truth.markers.push_back({t.cue_sample, cue_code(t.cls), cue_label(t.cls)});
    truth.markers.push_back({t.cue_sample + cue_len, cue_code(CueClass::Relax),
                             cue_label(CueClass::Relax)});
  }
  std::sort(truth.markers.begin(), truth.markers.end(),
            [](const MarkerInfo& a, const MarkerInfo& b) { return a.sample < b.sample; });

  wire::StreamHeader header;
  header.nominal_rate_hz = rate;
  header.channel_names = default_channel_labels();
  header.channel_count = static_cast<int>(header.channel_names.size());
  if (header.channel_count != nc)
    fail(Errc::invalid_argument, "model channel count " + std::to_string(nc) +
                                     " does not match the wire montage of " +
                                     std::to_string(header.channel_count));

  wire::StreamWriter writer(header, &out.bytes);
  std::vector<std::int64_t> clock = pacing_times_ns(scenario.pacing, rate, n);
  Rng rng_drop = sub_rng(scenario.seed, 2);

  std::size_t next_marker = 0;
  for (long i = 0; i < n; ++i) {
    for (; next_marker < truth.markers.size() && truth.markers[next_marker].sample == i;
         ++next_marker) {
      const MarkerInfo& m = truth.markers[next_marker];
      wire::EventMarker marker;
      marker.code = m.code;
      marker.label = m.label;
      marker.stream_time_ns = std::llround(static_cast<double>(m.sample) * 1e9 / rate);
      writer.write_marker(marker);
    }

    const bool dropped = rng_drop.uniform() < scenario.drop_prob;
    if (dropped) {
      truth.dropped_packets.push_back(i);
      continue;
    }
    wire::RawFrame frame;
    frame.counter = static_cast<unsigned>(i % wire::kCounterModulus);
    frame.quality.channel_index = static_cast<unsigned>(i % nc);
    frame.quality.quality_value = 1000;  // all channels healthy
    frame.channel_samples.resize(static_cast<std::size_t>(nc));
    for (int c = 0; c < nc; ++c)
      frame.channel_samples[static_cast<std::size_t>(c)] = wire::uV_to_adc(y(c, i), header);
    writer.write_frame(frame);
    out.recv_times_ns.push_back(clock[static_cast<std::size_t>(i)]);
  }
  for (; next_marker < truth.markers.size(); ++next_marker) {
    const MarkerInfo& m = truth.markers[next_marker];
    if (m.sample > n) break;
    wire::EventMarker marker;
    marker.code = m.code;
    marker.label = m.label;
    marker.stream_time_ns = std::llround(static_cast<double>(m.sample) * 1e9 / rate);
    writer.write_marker(marker);
  }

  truth.true_rate_hz = rate;
  truth.n_samples = n;
  truth.duration_s = duration_s;
  truth.noise_std_uV = scenario.noise_std_uV;
  truth.drop_prob = scenario.drop_prob;
  truth.pacing = scenario.pacing;
  truth.seed = scenario.seed;
  truth.cue_s = scenario.cue_s;
  truth.trials = scenario.trials;
  return out;
}

nlohmann::json GroundTruth::to_json() const {
  nlohmann::json j;
  j["version"] = 1;
  j["true_rate_hz"] = true_rate_hz;
  j["n_samples"] = n_samples;
  j["duration_s"] = duration_s;
  j["noise_std_uV"] = noise_std_uV;
  j["drop_prob"] = drop_prob;
  j["pacing"] = pacing_to_json(pacing);
  j["seed"] = seed;
  j["cue_s"] = cue_s;
  j["trials"] = nlohmann::json::array();
  for (const Trial& t : trials)
    j["trials"].push_back({{"cue_sample", t.cue_sample}, {"class", cue_label(t.cls)}});
  j["markers"] = nlohmann::json::array();
  for (const MarkerInfo& m : markers)
    j["markers"].push_back({{"sample", m.sample}, {"code", m.code}, {"label", m.label}});
  j["sources"] = nlohmann::json::array();
  for (const TruthSource& s : sources) {
    nlohmann::json js;
    js["vertex_ids"] = s.vertex_ids;
    js["band_hz"] = {s.band_low_hz, s.band_high_hz};
    js["amplitude_nAm"] = s.amplitude_nAm;
    js["class"] = s.class_label ? nlohmann::json(cue_label(*s.class_label)) : nlohmann::json();
    js["course_nAm"] = s.course_nAm;
    j["sources"].push_back(std::move(js));
  }
  j["dropped_packets"] = dropped_packets;
  return j;
}

GroundTruth GroundTruth::from_json(const nlohmann::json& j) {
  GroundTruth t;
  try {
    t.true_rate_hz = j.at("true_rate_hz").get<double>();
    t.n_samples = j.at("n_samples").get<long>();
    t.duration_s = j.at("duration_s").get<double>();
    t.noise_std_uV = j.at("noise_std_uV").get<double>();
    t.drop_prob = j.at("drop_prob").get<double>();
    t.pacing = pacing_from_json(j.at("pacing"));
    t.seed = j.at("seed").get<std::uint64_t>();
    t.cue_s = j.at("cue_s").get<double>();
    for (const auto& jt : j.at("trials")) {
      Trial trial;
      trial.cue_sample = jt.at("cue_sample").get<long>();
      trial.cls = cue_from_label(jt.at("class").get<std::string>());
      t.trials.push_back(trial);
    }
    for (const auto& jm : j.at("markers")) {
      MarkerInfo m;
      m.sample = jm.at("sample").get<long>();
      m.code = jm.at("code").get<std::uint32_t>();
      m.label = jm.at("label").get<std::string>();
      t.markers.push_back(std::move(m));
    }
    for (const auto& js : j.at("sources")) {
      TruthSource s;
      s.vertex_ids = js.at("vertex_ids").get<std::vector<int>>();
      s.band_low_hz = js.at("band_hz").at(0).get<double>();
      s.band_high_hz = js.at("band_hz").at(1).get<double>();
      s.amplitude_nAm = js.at("amplitude_nAm").get<double>();
      if (!js.at("class").is_null())
        s.class_label = cue_from_label(js.at("class").get<std::string>());
      s.course_nAm = js.at("course_nAm").get<std::vector<double>>();
      t.sources.push_back(std::move(s));
    }
    t.dropped_packets = j.at("dropped_packets").get<std::vector<long>>();
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::bad_format, std::string("ground truth JSON: ") + e.what());
  }
  return t;
}

void GroundTruth::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(Errc::io, "cannot write " + path);
  f << to_json().dump();
  f.put('\n');
  if (!f) fail(Errc::io, "short write to " + path);
}

GroundTruth GroundTruth::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(Errc::io, "cannot read " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  nlohmann::json j = nlohmann::json::parse(buf.str(), nullptr, false);
  if (j.is_discarded()) fail(Errc::bad_format, "ground truth JSON is unparseable: " + path);
  return from_json(j);
}

SimScenario erd_scenario(const ForwardModel& model, const ErdOptions& options) {
  if (!(options.depth > 0.0 && options.depth <= 1.0))
    fail(Errc::invalid_argument, "ERD depth must lie in (0, 1]");
  if (!(options.transition_s * 2.0 < options.timing.cue_s))
    fail(Errc::invalid_argument, "envelope transitions do not fit inside the cue");

  SimScenario sc;
  sc.noise_std_uV = options.noise_std_uV;
  sc.seed = options.seed;
  sc.cue_s = options.timing.cue_s;
  sc.trials = erd_trial_protocol(options.n_trials, options.classes, options.timing,
                                 sc.true_rate_hz, options.seed, &sc.duration_s);

  Envelope contra;
  contra.points = {{0.0, 1.0},
                   {options.transition_s, 1.0 - options.depth},
                   {options.timing.cue_s - options.transition_s, 1.0 - options.depth},
                   {options.timing.cue_s, 1.0}};

  auto patch = [&](const char* roi_name, CueClass side) {
    SourceEvent src;
    src.vertex_ids = model.roi(roi_name);
    src.band_low_hz = options.band_low_hz;
    src.band_high_hz = options.band_high_hz;
    src.amplitude_nAm = options.amplitude_nAm;
    src.envelope = contra;
    src.class_label = side;
    return src;
  };
  sc.sources.push_back(patch("PrecentralLeft", CueClass::Left));
  sc.sources.push_back(patch("PrecentralRight", CueClass::Right));
  return sc;
}

}  // namespace sbs::simulate
