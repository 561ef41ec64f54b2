#ifndef SBS_WIRE_HPP
#define SBS_WIRE_HPP

// SBSR v1 stream codec: a length-prefixed JSON header followed by fixed-size
// CRC-protected little-endian records. Two record types share one size so the
// stream position after k records is always header_size + k * record_size:
//
//   header:  "SBSR" | u32 json_len | json bytes
//   record:  u8 type | body | u16 crc          (crc over type + body)
//   data:    u8 counter | u8 quality_channel | u16 quality_value | i16 x N_c
//   marker:  u32 code | i64 stream_time_ns | label (record_size - 15 bytes,
//            zero padded)
//
// record_size = 7 + 2 * channel_count. Markers need channel_count >= 4.
// Full byte layout is documented in docs/FORMATS.md.

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "common.hpp"

namespace sbs::wire {

// Per-packet counter wraps at 129 (values 0..128).
constexpr int kCounterModulus = 129;

// Channel quality is Good strictly above this raw value.
constexpr unsigned kQualityGoodThreshold = 407;

constexpr std::uint8_t kRecordData = 0x01;
constexpr std::uint8_t kRecordMarker = 0x02;

std::uint16_t crc16_ccitt(const std::uint8_t* data, std::size_t n);

struct StreamHeader {
  int version = 1;
  int channel_count = 14;
  std::vector<std::string> channel_names;
  double nominal_rate_hz = 128.0;
  double adc_offset = 8192.0;  // raw ADC counts at 0 uV
  double adc_scale = 0.51;     // uV per LSB
  std::string device_id = "sbs-sim";

  std::size_t record_size() const { return 7 + 2 * static_cast<std::size_t>(channel_count); }
  std::string to_json() const;
  static StreamHeader from_json(const std::string& json);  // throws Errc::bad_format

  // Serialized prefix: magic + u32 length + json.
  std::vector<std::uint8_t> encode() const;
};

struct QualitySlot {
  int channel_index = 0;
  unsigned quality_value = 0;

  bool operator==(const QualitySlot&) const = default;
};

struct RawFrame {
  std::uint8_t counter = 0;  // 0..=128
  std::vector<std::int16_t> channel_samples;
  QualitySlot quality;

  bool operator==(const RawFrame&) const = default;
};

struct EventMarker {
  std::uint32_t code = 0;
  std::int64_t stream_time_ns = 0;
  std::string label;

  bool operator==(const EventMarker&) const = default;
};

enum class QualityStatus { Good, Poor };

// Good iff quality_value > 407 (strict).
inline QualityStatus quality_status(unsigned quality_value) {
  return quality_value > kQualityGoodThreshold ? QualityStatus::Good : QualityStatus::Poor;
}

// Raw ADC sample -> microvolts under the stream's declared scaling.
inline double adc_to_uV(std::int16_t raw, const StreamHeader& h) {
  return (static_cast<double>(raw) - h.adc_offset) * h.adc_scale;
}

// Microvolts -> clamped raw ADC sample (14-bit range).
std::int16_t uV_to_adc(double uV, const StreamHeader& h);

// Throws Errc::invalid_argument on CounterOutOfRange / ChannelCountMismatch.
std::vector<std::uint8_t> encode_frame(const RawFrame& frame, const StreamHeader& header);
std::vector<std::uint8_t> encode_marker(const EventMarker& marker, const StreamHeader& header);

enum class DecodeStatus { ok, truncated, bad_crc, bad_counter, bad_type };

using Record = std::variant<RawFrame, EventMarker>;

struct DecodeResult {
  DecodeStatus status = DecodeStatus::ok;
  Record record;
};

// Total on arbitrary bytes: never throws, reports malformed input via status.
DecodeResult decode_record(const std::uint8_t* bytes, std::size_t n, const StreamHeader& header);

inline DecodeResult decode_record(const std::vector<std::uint8_t>& bytes, const StreamHeader& header) {
  return decode_record(bytes.data(), bytes.size(), header);
}

// ---------------------------------------------------------------------------
// Incremental parser: feed arbitrary byte chunks (file reads, socket recv),
// pop parsed records. Parses the header first, then fixed-size records.

class StreamParser {
 public:
  // Feed more bytes from the transport.
  void feed(const std::uint8_t* data, std::size_t n);

  // True once the header has been parsed.
  bool have_header() const { return have_header_; }
  const StreamHeader& header() const;

  struct Item {
    DecodeStatus status;
    Record record;
  };

  // Pops the next complete record, or nullopt if more bytes are needed.
  // Records that fail crc/counter checks are returned with their status so
  // the caller can count them; the parser stays aligned on record boundaries.
  std::optional<Item> next();

  // Bytes buffered but not yet consumed (a partial record at EOF means the
  // stream was cut mid-frame).
  std::size_t pending_bytes() const { return buf_.size() - pos_; }

  // Throws Errc::bad_format if the magic/json prefix is malformed.
  void parse_header_if_ready();

 private:
  std::vector<std::uint8_t> buf_;
  std::size_t pos_ = 0;
  bool have_header_ = false;
  StreamHeader header_;
  void compact();
};

// ---------------------------------------------------------------------------
// Recording writer: header then records, append-only.

class StreamWriter {
 public:
  StreamWriter(const StreamHeader& header, std::vector<std::uint8_t>* sink)
      : header_(header), sink_(sink) {
    auto h = header.encode();
    sink_->insert(sink_->end(), h.begin(), h.end());
  }

  void write_frame(const RawFrame& f) {
    auto b = encode_frame(f, header_);
    sink_->insert(sink_->end(), b.begin(), b.end());
  }
  void write_marker(const EventMarker& m) {
    auto b = encode_marker(m, header_);
    sink_->insert(sink_->end(), b.begin(), b.end());
  }

  const StreamHeader& header() const { return header_; }

 private:
  StreamHeader header_;
  std::vector<std::uint8_t>* sink_;
};

}  // namespace sbs::wire

#endif  // SBS_WIRE_HPP
