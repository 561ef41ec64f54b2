#ifndef SBS_H
#define SBS_H

/* C interface to the streaming EEG engine. Configuration and results travel
 * as UTF-8 JSON strings; long-lived objects (packet sources, the replay
 * server) are opaque handles. Every function returns an sbs_status; on
 * failure sbs_last_error() describes what went wrong. Strings returned
 * through char** outputs are heap-allocated and released with
 * sbs_string_free(). Handles are single-owner: use each from one thread at a
 * time and release with the matching _free call. */

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef int32_t sbs_status;

/* 0 is success; negative values mirror the engine's error categories. */
#define SBS_OK 0
#define SBS_ERR_INVALID_ARGUMENT (-1) /* bad parameter or out-of-range value */
#define SBS_ERR_IO (-2)               /* file open/read/write failure */
#define SBS_ERR_BAD_FORMAT (-3)       /* malformed stream, header, or JSON file */
#define SBS_ERR_DISCONNECTED (-4)     /* TCP peer vanished mid-record */
#define SBS_ERR_INSUFFICIENT_DATA (-5)
#define SBS_ERR_SINGULAR (-6)         /* singular prior or covariance */
#define SBS_ERR_NON_FINITE (-7)
#define SBS_ERR_UNKNOWN_ROI (-8)      /* ROI name absent from the forward model */
#define SBS_ERR_CONFIG (-9)           /* config validation; message names the field */
#define SBS_ERR_RUNTIME (-10)
#define SBS_ERR_NET (-11)             /* bind/listen/connect failure */
#define SBS_END_OF_STREAM (-12)       /* clean end of a packet source */

/* Library version string, e.g. "0.1.0". Static storage; do not free. */
const char* sbs_version(void);

/* Symbolic name for a status value, e.g. "config". Static storage. */
const char* sbs_status_name(sbs_status status);

/* Message of the most recent failure on the calling thread ("" if none).
 * Valid until the next failing call on the same thread; do not free. */
const char* sbs_last_error(void);

/* Releases a string returned through a char** output. NULL is a no-op. */
void sbs_string_free(char* s);

/* -------------------------------------------------------------------------
 * One-shot commands. `command` is one of: "sim", "record", "replay",
 * "reconstruct", "timing_report", "bci_train", "bci_eval", "rerun".
 * `config_json` carries the command's configuration; the schema per command
 * matches the "config" object of the provenance files the commands write, so
 * any provenance config can be fed back through sbs_run. On success
 * *summary_json_out (if non-NULL) receives the run summary. */
sbs_status sbs_run(const char* command, const char* config_json, char** summary_json_out);

/* -------------------------------------------------------------------------
 * Packet sources: pull-based access to a validated stream.
 * `source_json` is a source spec: {"kind":"file","path":...,"speed":...},
 * {"kind":"tcp","host":...,"port":...}, or {"kind":"sim","sim":{...}}. */

typedef struct sbs_source sbs_source;

#define SBS_RECORD_DATA 0
#define SBS_RECORD_MARKER 1

/* One delivered record. Pointer fields alias buffers owned by the source and
 * stay valid until the next sbs_source_next call or sbs_source_free. */
typedef struct sbs_record {
  int32_t kind;             /* SBS_RECORD_DATA or SBS_RECORD_MARKER */
  int64_t recv_time_ns;     /* arrival clock (wall for tcp/paced, model for sim) */
  /* data records */
  int32_t counter;          /* 0..=128 wire counter */
  int32_t channel_count;
  const double* values_uV;  /* channel_count entries */
  int32_t quality_channel;
  uint32_t quality_value;
  /* marker records */
  uint32_t marker_code;
  int64_t marker_time_ns;
  const char* marker_label;
} sbs_record;

sbs_status sbs_source_open(const char* source_json, sbs_source** out);

/* Stream header as JSON (channel names, rate, scaling). Blocks until the
 * header arrives on live sources. */
sbs_status sbs_source_header(sbs_source* src, char** header_json_out);

/* Next record, blocking as the source dictates. Returns SBS_END_OF_STREAM
 * at the clean end of the stream (and on every call after). */
sbs_status sbs_source_next(sbs_source* src, sbs_record* out);

/* Running statistics as JSON: packet totals, inferred drops, rate estimate. */
sbs_status sbs_source_stats(sbs_source* src, char** stats_json_out);

void sbs_source_free(sbs_source* src);

/* -------------------------------------------------------------------------
 * Replay server: serves one SBSR recording to one TCP client, paced at
 * `speed` times the recorded rate (0 = as fast as the socket accepts).
 * Runs in a background thread from the moment it is opened. */

typedef struct sbs_replay sbs_replay;

/* port 0 picks an ephemeral port; read it back with sbs_replay_port. */
sbs_status sbs_replay_open(const char* recording_path, int32_t port, double speed,
                           sbs_replay** out);

int32_t sbs_replay_port(const sbs_replay* server);

/* Blocks until the recording has been served or the server is stopped.
 * On success stores the number of bytes sent (if non-NULL). */
sbs_status sbs_replay_wait(sbs_replay* server, int64_t* bytes_sent_out);

/* Stops serving; safe from another thread while sbs_replay_wait blocks. */
void sbs_replay_stop(sbs_replay* server);

void sbs_replay_free(sbs_replay* server);

#ifdef __cplusplus
}
#endif

#endif /* SBS_H */
