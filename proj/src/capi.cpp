#include "sbs/sbs.h"

#include <cstdlib>
#include <cstring>
#include <exception>
#include <string>

#include "ingest.hpp"
#include "pipeline.hpp"

using nlohmann::json;

namespace {

thread_local std::string g_last_error;

sbs_status set_error(sbs::Errc code, const std::string& msg) {
  g_last_error = msg;
  return -static_cast<sbs_status>(code);
}

// Uniform exception boundary: nothing may propagate across the C surface.
template <typename Fn>
sbs_status guarded(Fn&& fn) {
  try {
    fn();
    return SBS_OK;
  } catch (const sbs::Error& e) {
    return set_error(e.code(), e.what());
  } catch (const json::exception& e) {
    return set_error(sbs::Errc::config, std::string("JsonParse: ") + e.what());
  } catch (const std::bad_alloc&) {
    return set_error(sbs::Errc::runtime, "OutOfMemory: allocation failed");
  } catch (const std::exception& e) {
    return set_error(sbs::Errc::runtime, e.what());
  } catch (...) {
    return set_error(sbs::Errc::runtime, "UnknownFailure: non-standard exception");
  }
}

char* copy_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

json parse_config(const char* text, const char* what) {
  if (!text) sbs::fail(sbs::Errc::invalid_argument, std::string(what) + ": must not be NULL");
  return json::parse(text);  // json::exception maps to SBS_ERR_CONFIG above
}

}  // namespace

struct sbs_source {
  sbs::ingest::PacketSource src;
  // Buffers the pointer fields of the last returned record alias.
  std::vector<double> values;
  std::string label;
  bool ended = false;
};

struct sbs_replay {
  sbs::pipeline::ReplayServer server;
};

extern "C" {

const char* sbs_version(void) { return sbs::pipeline::kVersion; }

const char* sbs_status_name(sbs_status status) {
  switch (status) {
    case SBS_OK: return "ok";
    case SBS_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case SBS_ERR_IO: return "io";
    case SBS_ERR_BAD_FORMAT: return "bad_format";
    case SBS_ERR_DISCONNECTED: return "disconnected";
    case SBS_ERR_INSUFFICIENT_DATA: return "insufficient_data";
    case SBS_ERR_SINGULAR: return "singular";
    case SBS_ERR_NON_FINITE: return "non_finite";
    case SBS_ERR_UNKNOWN_ROI: return "unknown_roi";
    case SBS_ERR_CONFIG: return "config";
    case SBS_ERR_RUNTIME: return "runtime";
    case SBS_ERR_NET: return "net";
    case SBS_END_OF_STREAM: return "end_of_stream";
    default: return "unknown";
  }
}

const char* sbs_last_error(void) { return g_last_error.c_str(); }

void sbs_string_free(char* s) { std::free(s); }

sbs_status sbs_run(const char* command, const char* config_json, char** summary_json_out) {
  return guarded([&] {
    if (!command) sbs::fail(sbs::Errc::invalid_argument, "command: must not be NULL");
    json cfg = parse_config(config_json, "config_json");
    json summary = sbs::pipeline::run_command(command, cfg);
    if (summary_json_out) *summary_json_out = copy_string(summary.dump(2));
  });
}

sbs_status sbs_source_open(const char* source_json, sbs_source** out) {
  return guarded([&] {
    if (!out) sbs::fail(sbs::Errc::invalid_argument, "out: must not be NULL");
    json j = parse_config(source_json, "source_json");
    auto spec = sbs::pipeline::SourceSpec::from_json(j, "source");
    *out = new sbs_source{spec.open(), {}, {}, false};
  });
}

sbs_status sbs_source_header(sbs_source* src, char** header_json_out) {
  return guarded([&] {
    if (!src || !header_json_out)
      sbs::fail(sbs::Errc::invalid_argument, "source/header_json_out: must not be NULL");
    *header_json_out = copy_string(src->src.header().to_json());
  });
}

sbs_status sbs_source_next(sbs_source* src, sbs_record* out) {
  sbs_status rc = guarded([&] {
    if (!src || !out) sbs::fail(sbs::Errc::invalid_argument, "source/out: must not be NULL");
    if (src->ended) sbs::fail(sbs::Errc::end_of_stream, "EndOfStream: source exhausted");
    auto item = src->src.next();
    if (!item) {
      src->ended = true;
      sbs::fail(sbs::Errc::end_of_stream, "EndOfStream: source exhausted");
    }

    *out = sbs_record{};
    out->recv_time_ns = item->recv_time_ns;
    if (const auto* f = std::get_if<sbs::wire::RawFrame>(&item->record)) {
      const auto& header = src->src.header();
      out->kind = SBS_RECORD_DATA;
      out->counter = f->counter;
      out->channel_count = header.channel_count;
      src->values.resize(f->channel_samples.size());
      for (std::size_t c = 0; c < f->channel_samples.size(); ++c)
        src->values[c] = sbs::wire::adc_to_uV(f->channel_samples[c], header);
      out->values_uV = src->values.data();
      out->quality_channel = f->quality.channel_index;
      out->quality_value = f->quality.quality_value;
    } else {
      const auto& m = std::get<sbs::wire::EventMarker>(item->record);
      out->kind = SBS_RECORD_MARKER;
      out->marker_code = m.code;
      out->marker_time_ns = m.stream_time_ns;
      src->label = m.label;
      out->marker_label = src->label.c_str();
    }
  });
  return rc;
}

sbs_status sbs_source_stats(sbs_source* src, char** stats_json_out) {
  return guarded([&] {
    if (!src || !stats_json_out)
      sbs::fail(sbs::Errc::invalid_argument, "source/stats_json_out: must not be NULL");
    const auto s = src->src.stats();
    json j;
    j["packets_total"] = s.packets_total;
    j["packets_dropped"] = s.packets_dropped;
    j["observed_rate_hz"] = s.observed_rate_hz;
    j["rate_ci_hz"] = {s.rate_ci_hz.first, s.rate_ci_hz.second};
    j["counter_errors"] = s.counter_errors;
    json q = json::object();
    for (const auto& [channel, value] : s.quality_latest) q[std::to_string(channel)] = value;
    j["quality_latest"] = q;
    *stats_json_out = copy_string(j.dump());
  });
}

void sbs_source_free(sbs_source* src) { delete src; }

sbs_status sbs_replay_open(const char* recording_path, int32_t port, double speed,
                           sbs_replay** out) {
  return guarded([&] {
    if (!recording_path || !out)
      sbs::fail(sbs::Errc::invalid_argument, "recording_path/out: must not be NULL");
    *out = new sbs_replay{sbs::pipeline::ReplayServer(recording_path, port, speed)};
  });
}

int32_t sbs_replay_port(const sbs_replay* server) {
  return server ? server->server.port() : 0;
}

sbs_status sbs_replay_wait(sbs_replay* server, int64_t* bytes_sent_out) {
  return guarded([&] {
    if (!server) sbs::fail(sbs::Errc::invalid_argument, "server: must not be NULL");
    std::int64_t sent = server->server.wait();
    if (bytes_sent_out) *bytes_sent_out = sent;
  });
}

void sbs_replay_stop(sbs_replay* server) {
  if (server) server->server.stop();
}

void sbs_replay_free(sbs_replay* server) { delete server; }

}  // extern "C"
