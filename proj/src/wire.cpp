#include "wire.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

namespace sbs::wire {

using nlohmann::json;

std::uint16_t crc16_ccitt(const std::uint8_t* data, std::size_t n) {
  // CRC-16/CCITT-FALSE: poly 0x1021, init 0xFFFF, no reflection, no xorout.
  std::uint16_t crc = 0xffff;
  for (std::size_t i = 0; i < n; ++i) {
    crc ^= static_cast<std::uint16_t>(data[i]) << 8;
    for (int b = 0; b < 8; ++b)
      crc = (crc & 0x8000) ? static_cast<std::uint16_t>((crc << 1) ^ 0x1021)
                           : static_cast<std::uint16_t>(crc << 1);
  }
  return crc;
}

std::string StreamHeader::to_json() const {
  json j;
  j["version"] = version;
  j["channel_count"] = channel_count;
  j["channel_names"] = channel_names;
  j["nominal_rate_hz"] = nominal_rate_hz;
  j["adc_offset"] = adc_offset;
  j["adc_scale"] = adc_scale;
  j["device_id"] = device_id;
  return j.dump();
}

StreamHeader StreamHeader::from_json(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) fail(Errc::bad_format, "stream header is not a JSON object");
  StreamHeader h;
  try {
    h.version = j.at("version").get<int>();
    h.channel_count = j.at("channel_count").get<int>();
    h.channel_names = j.at("channel_names").get<std::vector<std::string>>();
    h.nominal_rate_hz = j.at("nominal_rate_hz").get<double>();
    h.adc_offset = j.at("adc_offset").get<double>();
    h.adc_scale = j.at("adc_scale").get<double>();
    h.device_id = j.value("device_id", std::string());
  } catch (const json::exception& e) {
    fail(Errc::bad_format, std::string("stream header: ") + e.what());
  }
  if (h.channel_count <= 0 || h.channel_count > 256)
    fail(Errc::bad_format, "stream header: channel_count out of range");
  if (static_cast<int>(h.channel_names.size()) != h.channel_count)
    fail(Errc::bad_format, "stream header: channel_names length != channel_count");
  if (!(h.nominal_rate_hz > 0.0))
    fail(Errc::bad_format, "stream header: nominal_rate_hz must be > 0");
  return h;
}

std::vector<std::uint8_t> StreamHeader::encode() const {
  std::string j = to_json();
  std::vector<std::uint8_t> out;
  out.reserve(8 + j.size());
  out.push_back('S');
  out.push_back('B');
  out.push_back('S');
  out.push_back('R');
  put_u32(out, static_cast<std::uint32_t>(j.size()));
  out.insert(out.end(), j.begin(), j.end());
  return out;
}

std::int16_t uV_to_adc(double uV, const StreamHeader& h) {
  double raw = std::round(uV / h.adc_scale + h.adc_offset);
  raw = std::clamp(raw, 0.0, 16383.0);
  return static_cast<std::int16_t>(raw);
}

std::vector<std::uint8_t> encode_frame(const RawFrame& frame, const StreamHeader& header) {
  if (frame.counter >= kCounterModulus)
    fail(Errc::invalid_argument, "CounterOutOfRange: counter " + std::to_string(frame.counter) +
                                     " not in 0..=128");
  if (static_cast<int>(frame.channel_samples.size()) != header.channel_count)
    fail(Errc::invalid_argument,
         "ChannelCountMismatch: frame has " + std::to_string(frame.channel_samples.size()) +
             " samples, header declares " + std::to_string(header.channel_count));
  if (frame.quality.channel_index < 0 || frame.quality.channel_index >= header.channel_count)
    fail(Errc::invalid_argument, "quality channel_index out of range");

  std::vector<std::uint8_t> out;
  out.reserve(header.record_size());
  out.push_back(kRecordData);
  out.push_back(frame.counter);
  out.push_back(static_cast<std::uint8_t>(frame.quality.channel_index));
  put_u16(out, static_cast<std::uint16_t>(frame.quality.quality_value));
  for (std::int16_t s : frame.channel_samples) put_i16(out, s);
  put_u16(out, crc16_ccitt(out.data(), out.size()));
  return out;
}

std::vector<std::uint8_t> encode_marker(const EventMarker& marker, const StreamHeader& header) {
  std::size_t size = header.record_size();
  if (size < 15)
    fail(Errc::invalid_argument, "markers need record_size >= 15 (channel_count >= 4)");
  std::size_t label_space = size - 15;
  std::vector<std::uint8_t> out;
  out.reserve(size);
  out.push_back(kRecordMarker);
  put_u32(out, marker.code);
  put_i64(out, marker.stream_time_ns);
  for (std::size_t i = 0; i < label_space; ++i)
    out.push_back(i < marker.label.size() ? static_cast<std::uint8_t>(marker.label[i]) : 0);
  put_u16(out, crc16_ccitt(out.data(), out.size()));
  return out;
}

DecodeResult decode_record(const std::uint8_t* bytes, std::size_t n, const StreamHeader& header) {
  DecodeResult r;
  std::size_t size = header.record_size();
  if (n < size) {
    r.status = DecodeStatus::truncated;
    return r;
  }
  std::uint16_t want = get_u16(bytes + size - 2);
  if (crc16_ccitt(bytes, size - 2) != want) {
    r.status = DecodeStatus::bad_crc;
    return r;
  }
  std::uint8_t type = bytes[0];
  if (type == kRecordData) {
    RawFrame f;
    f.counter = bytes[1];
    if (f.counter >= kCounterModulus) {
      r.status = DecodeStatus::bad_counter;
      return r;
    }
    f.quality.channel_index = bytes[2];
    if (f.quality.channel_index >= header.channel_count) {
      r.status = DecodeStatus::bad_counter;
      return r;
    }
    f.quality.quality_value = get_u16(bytes + 3);
    f.channel_samples.resize(header.channel_count);
    for (int c = 0; c < header.channel_count; ++c)
      f.channel_samples[c] = get_i16(bytes + 5 + 2 * c);
    r.record = std::move(f);
    return r;
  }
  if (type == kRecordMarker) {
    EventMarker m;
    m.code = get_u32(bytes + 1);
    m.stream_time_ns = get_i64(bytes + 5);
    std::size_t label_space = size - 15;
    const char* label = reinterpret_cast<const char*>(bytes + 13);
    std::size_t len = 0;
    while (len < label_space && label[len] != 0) ++len;
    m.label.assign(label, len);
    r.record = std::move(m);
    return r;
  }
  r.status = DecodeStatus::bad_type;
  return r;
}

void StreamParser::feed(const std::uint8_t* data, std::size_t n) {
  buf_.insert(buf_.end(), data, data + n);
}

const StreamHeader& StreamParser::header() const {
  if (!have_header_) fail(Errc::runtime, "stream header not parsed yet");
  return header_;
}

void StreamParser::parse_header_if_ready() {
  if (have_header_) return;
  if (buf_.size() < 8) return;
  if (buf_[0] != 'S' || buf_[1] != 'B' || buf_[2] != 'S' || buf_[3] != 'R')
    fail(Errc::bad_format, "bad stream magic (expected SBSR)");
  std::uint32_t len = get_u32(buf_.data() + 4);
  if (len > (1u << 20)) fail(Errc::bad_format, "stream header json too large");
  if (buf_.size() < 8 + len) return;
  std::string j(reinterpret_cast<const char*>(buf_.data() + 8), len);
  header_ = StreamHeader::from_json(j);
  have_header_ = true;
  pos_ = 8 + len;
  compact();
}

std::optional<StreamParser::Item> StreamParser::next() {
  parse_header_if_ready();
  if (!have_header_) return std::nullopt;
  std::size_t size = header_.record_size();
  if (buf_.size() - pos_ < size) {
    compact();
    return std::nullopt;
  }
  DecodeResult r = decode_record(buf_.data() + pos_, size, header_);
  pos_ += size;  // stay aligned regardless of crc outcome
  return Item{r.status, std::move(r.record)};
}

void StreamParser::compact() {
  if (pos_ == 0) return;
  buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(pos_));
  pos_ = 0;
}

}  // namespace sbs::wire
