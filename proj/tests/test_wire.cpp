#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "wire.hpp"

#include <cstring>

using namespace sbs;
using namespace sbs::wire;

namespace {

StreamHeader default_header() {
  StreamHeader h;
  h.channel_names.clear();
  for (int i = 0; i < h.channel_count; ++i) h.channel_names.push_back("ch" + std::to_string(i));
  return h;
}

}  // namespace

TEST_CASE("crc16 ccitt-false check vector") {
  const char* msg = "123456789";
  CHECK(crc16_ccitt(reinterpret_cast<const std::uint8_t*>(msg), 9) == 0x29B1);
  // empty input: crc of nothing is the init value
  CHECK(crc16_ccitt(nullptr, 0) == 0xFFFF);
}

TEST_CASE("data frame encodes to the frozen reference bytes") {
  // Reference bytes computed with an independent encoder.
  static const std::uint8_t want[] = {
      0x01, 0x05, 0x02, 0xf4, 0x01, 0x00, 0x00, 0x01, 0x00, 0xff, 0xff, 0xff,
      0x1f, 0x00, 0xe0, 0x64, 0x00, 0x9c, 0xff, 0xe8, 0x03, 0x18, 0xfc, 0x2a,
      0x00, 0xd6, 0xff, 0x07, 0x00, 0xf9, 0xff, 0x7b, 0x00, 0xc7, 0x90};
  auto h = default_header();
  RawFrame f;
  f.counter = 5;
  f.quality = {2, 500};
  f.channel_samples = {0, 1, -1, 8191, -8192, 100, -100, 1000, -1000, 42, -42, 7, -7, 123};
  auto got = encode_frame(f, h);
  REQUIRE(got.size() == sizeof(want));
  CHECK(std::memcmp(got.data(), want, sizeof(want)) == 0);

  auto back = decode_record(got, h);
  REQUIRE(back.status == DecodeStatus::ok);
  CHECK(std::get<RawFrame>(back.record) == f);
}

TEST_CASE("marker encodes to the frozen reference bytes") {
  static const std::uint8_t want[] = {
      0x02, 0x02, 0x00, 0x00, 0x00, 0x15, 0xcd, 0x5b, 0x07, 0x00, 0x00, 0x00,
      0x00, 0x52, 0x69, 0x67, 0x68, 0x74, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00,
      0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x8d, 0xd6};
  auto h = default_header();
  EventMarker m;
  m.code = 2;
  m.stream_time_ns = 123456789;
  m.label = "Right";
  auto got = encode_marker(m, h);
  REQUIRE(got.size() == sizeof(want));
  CHECK(std::memcmp(got.data(), want, sizeof(want)) == 0);

  auto back = decode_record(got, h);
  REQUIRE(back.status == DecodeStatus::ok);
  CHECK(std::get<EventMarker>(back.record) == m);
}

TEST_CASE("record size follows channel count") {
  StreamHeader h = default_header();
  CHECK(h.record_size() == 35);
  h.channel_count = 4;
  CHECK(h.record_size() == 15);  // the smallest count that still fits a marker
  h.channel_count = 64;
  CHECK(h.record_size() == 135);
}

TEST_CASE("encode/decode round-trip over random frames") {
  auto h = default_header();
  Rng rng(2024);
  for (int iter = 0; iter < 500; ++iter) {
    RawFrame f;
    f.counter = static_cast<std::uint8_t>(rng.below(129));
    f.quality.channel_index = static_cast<int>(rng.below(14));
    f.quality.quality_value = static_cast<unsigned>(rng.below(65536));
    for (int c = 0; c < 14; ++c)
      f.channel_samples.push_back(static_cast<std::int16_t>(rng.below(65536)));
    auto bytes = encode_frame(f, h);
    auto r = decode_record(bytes, h);
    REQUIRE(r.status == DecodeStatus::ok);
    CHECK(std::get<RawFrame>(r.record) == f);
  }
}

TEST_CASE("marker labels are truncated to the available space and padded") {
  auto h = default_header();  // record_size 35 -> 20 label bytes
  EventMarker m;
  m.code = 7;
  m.stream_time_ns = -5;
  m.label = std::string(64, 'x');
  auto bytes = encode_marker(m, h);
  auto r = decode_record(bytes, h);
  REQUIRE(r.status == DecodeStatus::ok);
  CHECK(std::get<EventMarker>(r.record).label == std::string(20, 'x'));

  m.label = "";
  r = decode_record(encode_marker(m, h), h);
  CHECK(std::get<EventMarker>(r.record).label == "");
}

TEST_CASE("every flipped bit is caught by the crc") {
  auto h = default_header();
  RawFrame f;
  f.counter = 17;
  f.quality = {0, 999};
  f.channel_samples.assign(14, 1234);
  auto bytes = encode_frame(f, h);
  for (std::size_t byte = 0; byte < bytes.size(); ++byte) {
    for (int bit = 0; bit < 8; ++bit) {
      auto corrupted = bytes;
      corrupted[byte] ^= static_cast<std::uint8_t>(1u << bit);
      auto r = decode_record(corrupted, h);
      // A single-bit error can never sneak through crc16; it may additionally
      // surface as a bad type/counter when it hits those fields.
      CHECK(r.status != DecodeStatus::ok);
    }
  }
}

TEST_CASE("decode is total on arbitrary bytes") {
  auto h = default_header();
  Rng rng(77);
  int ok = 0;
  for (int iter = 0; iter < 100000; ++iter) {
    std::vector<std::uint8_t> junk(h.record_size());
    for (auto& b : junk) b = static_cast<std::uint8_t>(rng.below(256));
    auto r = decode_record(junk, h);  // must not throw or crash
    if (r.status == DecodeStatus::ok) ++ok;
  }
  // Random 35-byte blobs essentially never carry a valid crc (p ~ 2^-16 per
  // blob, and the type byte filters 254/256 of those).
  CHECK(ok <= 2);

  // Truncated inputs
  auto bytes = encode_frame(RawFrame{0, std::vector<std::int16_t>(14, 0), {0, 0}}, h);
  for (std::size_t n = 0; n < bytes.size(); ++n)
    CHECK(decode_record(bytes.data(), n, h).status == DecodeStatus::truncated);
}

TEST_CASE("encoder rejects out-of-range input") {
  auto h = default_header();
  RawFrame f;
  f.counter = 129;  // one past the wrap point
  f.channel_samples.assign(14, 0);
  CHECK_THROWS_AS(encode_frame(f, h), Error);
  f.counter = 128;  // largest legal value
  CHECK_NOTHROW(encode_frame(f, h));
  f.channel_samples.resize(13);
  CHECK_THROWS_AS(encode_frame(f, h), Error);
}

TEST_CASE("decoder flags counter and type violations") {
  auto h = default_header();
  RawFrame f;
  f.counter = 128;
  f.channel_samples.assign(14, 0);
  auto bytes = encode_frame(f, h);

  // Force counter=129 and re-seal the crc so only the counter rule fires.
  bytes[1] = 129;
  auto crc = crc16_ccitt(bytes.data(), bytes.size() - 2);
  bytes[bytes.size() - 2] = static_cast<std::uint8_t>(crc & 0xff);
  bytes[bytes.size() - 1] = static_cast<std::uint8_t>(crc >> 8);
  CHECK(decode_record(bytes, h).status == DecodeStatus::bad_counter);

  bytes[0] = 0x03;  // unknown record type, valid crc
  bytes[1] = 0;
  crc = crc16_ccitt(bytes.data(), bytes.size() - 2);
  bytes[bytes.size() - 2] = static_cast<std::uint8_t>(crc & 0xff);
  bytes[bytes.size() - 1] = static_cast<std::uint8_t>(crc >> 8);
  CHECK(decode_record(bytes, h).status == DecodeStatus::bad_type);
}

TEST_CASE("adc scaling: 0 uV sits at the offset and the range clamps") {
  auto h = default_header();
  CHECK(adc_to_uV(8192, h) == doctest::Approx(0.0));
  CHECK(adc_to_uV(8193, h) == doctest::Approx(0.51));
  CHECK(adc_to_uV(0, h) == doctest::Approx(-8192 * 0.51));
  CHECK(uV_to_adc(0.0, h) == 8192);
  CHECK(uV_to_adc(1e9, h) == 16383);
  CHECK(uV_to_adc(-1e9, h) == 0);
  // round-trip within half an LSB for in-range values
  for (double uv = -4000; uv <= 4000; uv += 37.3) {
    double back = adc_to_uV(uV_to_adc(uv, h), h);
    CHECK(std::abs(back - uv) <= 0.51 / 2 + 1e-12);
  }
}

TEST_CASE("quality threshold is strict") {
  CHECK(quality_status(408) == QualityStatus::Good);
  CHECK(quality_status(407) == QualityStatus::Poor);
  CHECK(quality_status(0) == QualityStatus::Poor);
  CHECK(quality_status(65535) == QualityStatus::Good);
}

TEST_CASE("stream header json round-trip") {
  auto h = default_header();
  h.device_id = "unit-test";
  h.nominal_rate_hz = 127.88;
  auto h2 = StreamHeader::from_json(h.to_json());
  CHECK(h2.version == h.version);
  CHECK(h2.channel_count == h.channel_count);
  CHECK(h2.channel_names == h.channel_names);
  CHECK(h2.nominal_rate_hz == h.nominal_rate_hz);
  CHECK(h2.adc_offset == h.adc_offset);
  CHECK(h2.adc_scale == h.adc_scale);
  CHECK(h2.device_id == h.device_id);

  CHECK_THROWS_AS(StreamHeader::from_json("not json"), Error);
  CHECK_THROWS_AS(StreamHeader::from_json("{\"version\":1}"), Error);
}

TEST_CASE("stream parser consumes chunked input identically to batch") {
  auto h = default_header();
  std::vector<std::uint8_t> stream;
  StreamWriter w(h, &stream);
  Rng rng(5);
  std::vector<Record> written;
  for (int i = 0; i < 200; ++i) {
    if (i % 17 == 9) {
      EventMarker m;
      m.code = static_cast<std::uint32_t>(i);
      m.stream_time_ns = i * 1000000ll;
      m.label = "m" + std::to_string(i);
      w.write_marker(m);
      written.push_back(m);
    } else {
      RawFrame f;
      f.counter = static_cast<std::uint8_t>(i % 129);
      f.quality = {static_cast<int>(rng.below(14)), static_cast<unsigned>(rng.below(1000))};
      for (int c = 0; c < 14; ++c)
        f.channel_samples.push_back(static_cast<std::int16_t>(rng.below(16384)));
      w.write_frame(f);
      written.push_back(f);
    }
  }

  // Feed in adversarial chunk sizes: 1 byte, 3 bytes, 7 bytes, ...
  StreamParser p;
  std::size_t pos = 0;
  std::size_t chunk = 1;
  std::vector<Record> parsed;
  while (pos < stream.size()) {
    std::size_t n = std::min(chunk, stream.size() - pos);
    p.feed(stream.data() + pos, n);
    pos += n;
    chunk = chunk % 7 + 1;
    while (auto item = p.next()) {
      REQUIRE(item->status == DecodeStatus::ok);
      parsed.push_back(item->record);
    }
  }
  REQUIRE(p.have_header());
  CHECK(p.header().channel_count == 14);
  CHECK(p.pending_bytes() == 0);
  REQUIRE(parsed.size() == written.size());
  for (std::size_t i = 0; i < written.size(); ++i) CHECK(parsed[i] == written[i]);
}

TEST_CASE("stream parser stays aligned across a corrupt record") {
  auto h = default_header();
  std::vector<std::uint8_t> stream;
  StreamWriter w(h, &stream);
  for (int i = 0; i < 5; ++i) {
    RawFrame f;
    f.counter = static_cast<std::uint8_t>(i);
    f.channel_samples.assign(14, static_cast<std::int16_t>(i));
    w.write_frame(f);
  }
  // Corrupt one byte inside record 2 (after the header prefix).
  std::size_t header_size = StreamHeader(h).encode().size();
  stream[header_size + 2 * h.record_size() + 10] ^= 0x40;

  StreamParser p;
  p.feed(stream.data(), stream.size());
  std::vector<DecodeStatus> statuses;
  std::vector<int> counters;
  while (auto item = p.next()) {
    statuses.push_back(item->status);
    if (item->status == DecodeStatus::ok)
      counters.push_back(std::get<RawFrame>(item->record).counter);
  }
  REQUIRE(statuses.size() == 5);
  CHECK(statuses[2] == DecodeStatus::bad_crc);
  // Records 0,1,3,4 still decode: alignment survived the bad record.
  CHECK(counters == std::vector<int>{0, 1, 3, 4});
}

TEST_CASE("stream parser reports a partial trailing record") {
  auto h = default_header();
  std::vector<std::uint8_t> stream;
  StreamWriter w(h, &stream);
  RawFrame f;
  f.channel_samples.assign(14, 7);
  w.write_frame(f);
  stream.resize(stream.size() - 4);  // cut mid-record

  StreamParser p;
  p.feed(stream.data(), stream.size());
  CHECK(!p.next().has_value());
  CHECK(p.have_header());
  CHECK(p.pending_bytes() == h.record_size() - 4);
}

TEST_CASE("stream parser rejects a bad magic") {
  std::vector<std::uint8_t> junk = {'N', 'O', 'P', 'E', 0, 0, 0, 0};
  StreamParser p;
  p.feed(junk.data(), junk.size());
  CHECK_THROWS_AS(p.parse_header_if_ready(), Error);
}
