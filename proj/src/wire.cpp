#include "fedsense/wire.hpp"

#include <bit>
#include <cstring>
#include <string>

#include <zlib.h>

namespace fedsense::wire {
namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int s = 56; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

void put_f64(std::vector<std::uint8_t>& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

std::uint32_t get_u32(const std::uint8_t* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
}

std::uint64_t get_u64(const std::uint8_t* p) {
  return (std::uint64_t{get_u32(p)} << 32) | get_u32(p + 4);
}

// Bounds-checked big-endian reader over a payload.
class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, const char* what) : bytes_(bytes), what_(what) {}
  std::uint32_t u32() { return get_u32(take(4)); }
  std::uint64_t u64() { return get_u64(take(8)); }
  double f64() { return std::bit_cast<double>(u64()); }
  void finish() const {
    if (pos_ != bytes_.size()) throw ProtocolError(std::string(what_) + " payload has trailing bytes");
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::uint8_t* take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw ProtocolError(std::string(what_) + " payload is truncated");
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::span<const std::uint8_t> bytes_;
  const char* what_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; frames are far below 4 GiB.
  c = ::crc32(c, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(c);
}

bool known_type(std::uint8_t t) { return t >= 0x01 && t <= 0x05; }

std::vector<std::uint8_t> encode(const WireMessage& msg) {
  if (msg.payload.size() > kMaxPayload) {
    throw ProtocolError("payload of " + std::to_string(msg.payload.size()) + " bytes exceeds the 64 MiB limit");
  }
  if (!known_type(static_cast<std::uint8_t>(msg.type))) throw ProtocolError("unknown message type");
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  out.reserve(kHeaderBytes + msg.payload.size() + kCrcBytes);
  out.push_back(static_cast<std::uint8_t>(msg.type));
  out.push_back(msg.flags);
  put_u32(out, static_cast<std::uint32_t>(msg.payload.size()));
  out.insert(out.end(), msg.payload.begin(), msg.payload.end());
  const auto crc = crc32(std::span<const std::uint8_t>(out).subspan(4));
  put_u32(out, crc);
  return out;
}

namespace {

// Validates the header at p (at least kHeaderBytes long); returns payload length.
std::size_t check_header(const std::uint8_t* p) {
  if (std::memcmp(p, kMagic, 4) != 0) throw ProtocolError("bad magic; expected FSN1");
  if (!known_type(p[4])) throw ProtocolError("unknown message type 0x" + std::to_string(p[4]));
  const std::size_t len = get_u32(p + 6);
  if (len > kMaxPayload) throw ProtocolError("declared payload length exceeds the 64 MiB limit");
  return len;
}

WireMessage finish_frame(const std::uint8_t* p, std::size_t len) {
  const std::uint32_t want = get_u32(p + kHeaderBytes + len);
  const std::uint32_t got = crc32(std::span<const std::uint8_t>(p + 4, kHeaderBytes - 4 + len));
  if (want != got) throw CrcError("frame checksum mismatch");
  WireMessage m;
  m.type = static_cast<MsgType>(p[4]);
  m.flags = p[5];
  m.payload.assign(p + kHeaderBytes, p + kHeaderBytes + len);
  return m;
}

}  // namespace

WireMessage decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderBytes + kCrcBytes) throw ProtocolError("frame shorter than header and checksum");
  const std::size_t len = check_header(bytes.data());
  if (bytes.size() != kHeaderBytes + len + kCrcBytes) throw ProtocolError("frame length does not match header");
  return finish_frame(bytes.data(), len);
}

void FrameDecoder::feed(std::span<const std::uint8_t> bytes) {
  if (start_ > 0 && start_ == buffer_.size()) {
    buffer_.clear();
    start_ = 0;
  }
  buffer_.insert(buffer_.end(), bytes.begin(), bytes.end());
}

std::optional<WireMessage> FrameDecoder::next() {
  if (failed_) throw ProtocolError("decoder already failed");
  const std::size_t avail = buffer_.size() - start_;
  const std::uint8_t* p = buffer_.data() + start_;
  try {
    // Reject a wrong magic as soon as its bytes arrive.
    for (std::size_t i = 0; i < std::min<std::size_t>(avail, 4); ++i) {
      if (p[i] != kMagic[i]) throw ProtocolError("bad magic; expected FSN1");
    }
    if (avail < kHeaderBytes) return std::nullopt;
    const std::size_t len = check_header(p);
    if (avail < kHeaderBytes + len + kCrcBytes) return std::nullopt;
    WireMessage m = finish_frame(p, len);
    start_ += kHeaderBytes + len + kCrcBytes;
    if (start_ > (1u << 20) && start_ * 2 > buffer_.size()) {
      buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(start_));
      start_ = 0;
    }
    return m;
  } catch (...) {
    failed_ = true;
    throw;
  }
}

std::vector<std::uint8_t> UpdatePayload::encode() const {
  std::vector<std::uint8_t> out;
  out.reserve(20 + 8 * values.size());
  put_u64(out, client_id);
  put_u32(out, round_hint);
  put_u32(out, sample_count);
  put_u32(out, static_cast<std::uint32_t>(values.size()));
  for (double v : values) put_f64(out, v);
  return out;
}

UpdatePayload UpdatePayload::decode(std::span<const std::uint8_t> bytes) {
  Reader r(bytes, "update");
  UpdatePayload p;
  p.client_id = r.u64();
  p.round_hint = r.u32();
  p.sample_count = r.u32();
  const std::uint32_t n = r.u32();
  if (r.remaining() != std::size_t{n} * 8) throw ProtocolError("update vector_len does not match payload size");
  p.values.resize(n);
  for (auto& v : p.values) v = r.f64();
  r.finish();
  return p;
}

std::vector<std::uint8_t> RegisterPayload::encode() const {
  std::vector<std::uint8_t> out;
  put_u64(out, client_id);
  put_u32(out, vector_len);
  return out;
}

RegisterPayload RegisterPayload::decode(std::span<const std::uint8_t> bytes) {
  Reader r(bytes, "register");
  RegisterPayload p;
  p.client_id = r.u64();
  p.vector_len = r.u32();
  r.finish();
  return p;
}

std::vector<std::uint8_t> MetricsPayload::encode() const {
  std::vector<std::uint8_t> out;
  put_u64(out, client_id);
  put_u32(out, round);
  put_f64(out, metrics.accuracy);
  put_f64(out, metrics.precision);
  put_f64(out, metrics.recall);
  put_f64(out, metrics.f1);
  put_f64(out, metrics.loss);
  put_u64(out, metrics.sample_count);
  return out;
}

MetricsPayload MetricsPayload::decode(std::span<const std::uint8_t> bytes) {
  Reader r(bytes, "metrics");
  MetricsPayload p;
  p.client_id = r.u64();
  p.round = r.u32();
  p.metrics.accuracy = r.f64();
  p.metrics.precision = r.f64();
  p.metrics.recall = r.f64();
  p.metrics.f1 = r.f64();
  p.metrics.loss = r.f64();
  p.metrics.sample_count = r.u64();
  r.finish();
  return p;
}

}  // namespace fedsense::wire
