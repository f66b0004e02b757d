#pragma once

// FSN1 framing:
//
//   "FSN1" | type u8 | flags u8 | length u32 BE | payload | crc32 u32 BE
//
// The CRC-32 (IEEE) covers type, flags, length and payload. All integers and
// reals are big-endian; reals are IEEE-754 binary64.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "fedsense/error.hpp"
#include "fedsense/model.hpp"

namespace fedsense::wire {

enum class MsgType : std::uint8_t {
  register_client = 0x01,
  client_update = 0x02,
  broadcast = 0x03,
  metrics_report = 0x04,
  shutdown = 0x05,
};

inline constexpr std::uint8_t kFlagDelta = 0x01;
inline constexpr std::size_t kHeaderBytes = 10;
inline constexpr std::size_t kCrcBytes = 4;
inline constexpr std::size_t kMaxPayload = std::size_t{64} << 20;
inline constexpr std::uint8_t kMagic[4] = {'F', 'S', 'N', '1'};

class CrcError : public ProtocolError {
 public:
  using ProtocolError::ProtocolError;
};

struct WireMessage {
  MsgType type = MsgType::shutdown;
  std::uint8_t flags = 0;
  std::vector<std::uint8_t> payload;

  bool operator==(const WireMessage&) const = default;
};

bool known_type(std::uint8_t t);

std::vector<std::uint8_t> encode(const WireMessage& msg);
// Decodes exactly one frame occupying all of `bytes`.
WireMessage decode(std::span<const std::uint8_t> bytes);

// Incremental decoder for a byte stream. Any malformed frame throws and
// leaves the decoder unusable; complete frames already returned stay valid.
class FrameDecoder {
 public:
  void feed(std::span<const std::uint8_t> bytes);
  std::optional<WireMessage> next();
  std::size_t buffered() const { return buffer_.size() - start_; }

 private:
  std::vector<std::uint8_t> buffer_;
  std::size_t start_ = 0;
  bool failed_ = false;
};

struct UpdatePayload {
  std::uint64_t client_id = 0;
  std::uint32_t round_hint = 0;
  std::uint32_t sample_count = 0;
  std::vector<double> values;

  std::vector<std::uint8_t> encode() const;
  static UpdatePayload decode(std::span<const std::uint8_t> bytes);
  bool operator==(const UpdatePayload&) const = default;
};

struct RegisterPayload {
  std::uint64_t client_id = 0;
  std::uint32_t vector_len = 0;

  std::vector<std::uint8_t> encode() const;
  static RegisterPayload decode(std::span<const std::uint8_t> bytes);
};

struct MetricsPayload {
  std::uint64_t client_id = 0;
  std::uint32_t round = 0;
  MetricsRecord metrics;

  std::vector<std::uint8_t> encode() const;
  static MetricsPayload decode(std::span<const std::uint8_t> bytes);
};

// Size of a whole client_update or broadcast frame carrying n reals.
constexpr std::size_t update_frame_bytes(std::size_t n) {
  return kHeaderBytes + 8 + 4 + 4 + 4 + 8 * n + kCrcBytes;
}

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

}  // namespace fedsense::wire
