#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "nerdd/image.hpp"

namespace nerdd {

enum class Polarity : std::uint8_t { Off = 0, On = 1 };

struct Event {
  std::uint64_t t = 0;  // microseconds since recording start
  std::uint16_t x = 0;
  std::uint16_t y = 0;
  Polarity p = Polarity::Off;

  friend bool operator==(const Event&, const Event&) = default;
};

/// Time-ordered events of one sensor. Construct through `make_stream` (or the
/// decoders) to have the ordering and bounds invariants checked.
struct EventStream {
  std::uint16_t width = 0;
  std::uint16_t height = 0;
  std::vector<Event> events;

  friend bool operator==(const EventStream&, const EventStream&) = default;
};

/// Validates bounds and ordering; throws ParameterError/OrderingError.
EventStream make_stream(std::uint16_t width, std::uint16_t height, std::vector<Event> events);

/// Frame rate as a positive rational (e.g. 30/1, 30000/1001).
class AccumulationConfig {
 public:
  explicit AccumulationConfig(std::uint64_t fps_num, std::uint64_t fps_den = 1);

  std::uint64_t fps_num() const { return num_; }
  std::uint64_t fps_den() const { return den_; }
  double fps() const { return static_cast<double>(num_) / static_cast<double>(den_); }
  /// 1/F rounded to the nearest microsecond.
  std::uint64_t interval_us() const { return interval_; }
  /// ceil(duration * F / 1e6), exact integer arithmetic.
  std::uint64_t frame_count(std::uint64_t duration_us) const;

 private:
  std::uint64_t num_;
  std::uint64_t den_;
  std::uint64_t interval_;
};

/// Per-pixel ON/OFF counts for one accumulation interval, row-major.
struct CountFrame {
  std::uint64_t index = 0;
  std::uint16_t width = 0;
  std::uint16_t height = 0;
  std::vector<std::uint32_t> on_counts;
  std::vector<std::uint32_t> off_counts;

  CountFrame() = default;
  CountFrame(std::uint64_t i, std::uint16_t w, std::uint16_t h)
      : index(i), width(w), height(h), on_counts(std::size_t{w} * h), off_counts(std::size_t{w} * h) {}

  std::uint32_t on(std::size_t x, std::size_t y) const { return on_counts[y * width + x]; }
  std::uint32_t off(std::size_t x, std::size_t y) const { return off_counts[y * width + x]; }
  std::uint32_t total(std::size_t x, std::size_t y) const { return on(x, y) + off(x, y); }
  std::uint64_t event_total() const;

  friend bool operator==(const CountFrame&, const CountFrame&) = default;
};

struct DropReport {
  std::uint64_t after_duration = 0;    // t >= duration
  std::uint64_t past_last_frame = 0;   // t < duration but floor(t/dt) >= frame count
  std::uint64_t total() const { return after_duration + past_last_frame; }
};

struct Accumulation {
  std::vector<CountFrame> frames;
  DropReport dropped;
};

/// Bins events into half-open intervals [i*dt, (i+1)*dt).
Accumulation accumulate(const EventStream& stream, const AccumulationConfig& cfg,
                        std::int64_t duration_us);

/// Streaming variant: one reusable frame buffer handed to `sink` per interval,
/// in order. Use this for full-resolution recordings.
DropReport accumulate_each(const EventStream& stream, const AccumulationConfig& cfg,
                           std::int64_t duration_us,
                           const std::function<void(const CountFrame&)>& sink);

/// Events in [begin_us, end_us) accumulated into one frame. Requires sorted input.
CountFrame accumulate_window(const EventStream& stream, std::uint64_t begin_us,
                             std::uint64_t end_us, std::uint64_t index = 0);

/// Single-channel render: 128 background, 255 where ON dominates, 0 where OFF dominates.
Image render_frame(const CountFrame& frame);

struct StreamStats {
  std::uint64_t event_count = 0;
  std::uint64_t duration_us = 0;
  std::uint64_t on_count = 0;
  std::uint64_t off_count = 0;
  double mean_rate_hz = 0.0;  // events per second over `duration_us`, 0 if undefined
};

StreamStats stream_stats(const EventStream& stream);

// NEV1 binary format:
//   "NEV1" | width u16 LE | height u16 LE | count u64 LE | {t u64, x u16, y u16, p u8, reserved u32 = 0} * count
inline constexpr std::size_t kNev1HeaderSize = 16;
inline constexpr std::size_t kNev1RecordSize = 17;

EventStream decode_event_stream(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_event_stream(const EventStream& stream);

EventStream read_event_file(const std::string& path);
void write_event_file(const std::string& path, const EventStream& stream);

/// CSV interchange with header `t_us,x,y,p`.
EventStream read_event_csv(std::istream& in, std::uint16_t width, std::uint16_t height);
void write_event_csv(std::ostream& out, const EventStream& stream);

}  // namespace nerdd
