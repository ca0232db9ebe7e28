#include "nerdd/event_core.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <istream>
#include <iterator>
#include <ostream>
#include <sstream>

#include "nerdd/errors.hpp"

namespace nerdd {

namespace {

constexpr std::uint64_t kMicrosPerSecond = 1'000'000;

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(value) >> (8 * i)));
  }
}

template <typename T>
T get_le(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  }
  return static_cast<T>(v);
}

void check_event(const Event& e, std::uint16_t width, std::uint16_t height, std::size_t offset) {
  if (e.x >= width || e.y >= height) {
    throw CorruptRecordError("event (" + std::to_string(e.x) + "," + std::to_string(e.y) +
                                 ") outside " + std::to_string(width) + "x" + std::to_string(height),
                             offset);
  }
}

}  // namespace

EventStream make_stream(std::uint16_t width, std::uint16_t height, std::vector<Event> events) {
  if (width == 0 || height == 0) throw ParameterError("sensor resolution must be non-zero");
  for (std::size_t i = 0; i < events.size(); ++i) {
    const Event& e = events[i];
    if (e.x >= width || e.y >= height) {
      throw ParameterError("event " + std::to_string(i) + " outside sensor bounds");
    }
    if (e.p != Polarity::On && e.p != Polarity::Off) {
      throw ParameterError("event " + std::to_string(i) + " has invalid polarity");
    }
    if (i > 0 && events[i - 1].t > e.t) {
      throw OrderingError("event " + std::to_string(i) + " timestamp decreases",
                          kNev1HeaderSize + i * kNev1RecordSize);
    }
  }
  return EventStream{width, height, std::move(events)};
}

AccumulationConfig::AccumulationConfig(std::uint64_t fps_num, std::uint64_t fps_den)
    : num_(fps_num), den_(fps_den), interval_(0) {
  if (num_ == 0 || den_ == 0) throw ParameterError("fps must be a positive rational");
  // round(1e6 * den / num)
  const unsigned __int128 scaled = static_cast<unsigned __int128>(kMicrosPerSecond) * den_;
  interval_ = static_cast<std::uint64_t>((2 * scaled + num_) / (2 * static_cast<unsigned __int128>(num_)));
  if (interval_ < 1) throw ParameterError("fps too high: interval below 1 microsecond");
}

std::uint64_t AccumulationConfig::frame_count(std::uint64_t duration_us) const {
  const unsigned __int128 numer = static_cast<unsigned __int128>(duration_us) * num_;
  const unsigned __int128 denom = static_cast<unsigned __int128>(den_) * kMicrosPerSecond;
  return static_cast<std::uint64_t>((numer + denom - 1) / denom);
}

std::uint64_t CountFrame::event_total() const {
  std::uint64_t sum = 0;
  for (auto c : on_counts) sum += c;
  for (auto c : off_counts) sum += c;
  return sum;
}

DropReport accumulate_each(const EventStream& stream, const AccumulationConfig& cfg,
                           std::int64_t duration_us,
                           const std::function<void(const CountFrame&)>& sink) {
  DropReport report;
  const auto& events = stream.events;
  if (duration_us <= 0) {
    report.after_duration = events.size();
    return report;
  }
  const auto duration = static_cast<std::uint64_t>(duration_us);
  const std::uint64_t dt = cfg.interval_us();
  const std::uint64_t n_frames = cfg.frame_count(duration);

  CountFrame frame(0, stream.width, stream.height);
  std::size_t next = 0;
  for (std::uint64_t i = 0; i < n_frames; ++i) {
    frame.index = i;
    std::fill(frame.on_counts.begin(), frame.on_counts.end(), 0u);
    std::fill(frame.off_counts.begin(), frame.off_counts.end(), 0u);
    const std::uint64_t end = std::min((i + 1) * dt, duration);
    for (; next < events.size() && events[next].t < end; ++next) {
      const Event& e = events[next];
      const std::size_t idx = std::size_t{e.y} * stream.width + e.x;
      if (e.p == Polarity::On) {
        ++frame.on_counts[idx];
      } else {
        ++frame.off_counts[idx];
      }
    }
    sink(frame);
  }
  for (; next < events.size(); ++next) {
    if (events[next].t >= duration) {
      ++report.after_duration;
    } else {
      ++report.past_last_frame;
    }
  }
  return report;
}

Accumulation accumulate(const EventStream& stream, const AccumulationConfig& cfg,
                        std::int64_t duration_us) {
  Accumulation result;
  result.dropped = accumulate_each(stream, cfg, duration_us,
                                   [&](const CountFrame& f) { result.frames.push_back(f); });
  return result;
}

CountFrame accumulate_window(const EventStream& stream, std::uint64_t begin_us,
                             std::uint64_t end_us, std::uint64_t index) {
  CountFrame frame(index, stream.width, stream.height);
  const auto& ev = stream.events;
  auto first = std::lower_bound(ev.begin(), ev.end(), begin_us,
                                [](const Event& e, std::uint64_t t) { return e.t < t; });
  for (auto it = first; it != ev.end() && it->t < end_us; ++it) {
    const std::size_t idx = std::size_t{it->y} * stream.width + it->x;
    if (it->p == Polarity::On) {
      ++frame.on_counts[idx];
    } else {
      ++frame.off_counts[idx];
    }
  }
  return frame;
}

Image render_frame(const CountFrame& frame) {
  Image img(frame.width, frame.height, 1, 128);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const auto on = frame.on_counts[i];
    const auto off = frame.off_counts[i];
    if (on > off) {
      img.pixels[i] = 255;
    } else if (off > on) {
      img.pixels[i] = 0;
    }
  }
  return img;
}

StreamStats stream_stats(const EventStream& stream) {
  StreamStats s;
  s.event_count = stream.events.size();
  for (const auto& e : stream.events) {
    if (e.p == Polarity::On) ++s.on_count;
  }
  s.off_count = s.event_count - s.on_count;
  if (s.event_count >= 2) {
    s.duration_us = stream.events.back().t - stream.events.front().t;
  }
  if (s.duration_us > 0) {
    s.mean_rate_hz = static_cast<double>(s.event_count) * 1e6 / static_cast<double>(s.duration_us);
  }
  return s;
}

EventStream decode_event_stream(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kNev1HeaderSize) throw FormatError("NEV1: truncated header");
  if (std::memcmp(bytes.data(), "NEV1", 4) != 0) throw FormatError("NEV1: bad magic");
  EventStream s;
  s.width = get_le<std::uint16_t>(bytes.data() + 4);
  s.height = get_le<std::uint16_t>(bytes.data() + 6);
  const auto count = get_le<std::uint64_t>(bytes.data() + 8);
  const std::size_t payload = bytes.size() - kNev1HeaderSize;
  if (payload % kNev1RecordSize != 0 || payload / kNev1RecordSize != count) {
    throw FormatError("NEV1: header declares " + std::to_string(count) + " events but payload holds " +
                      std::to_string(payload) + " bytes");
  }
  s.events.resize(count);
  const std::uint8_t* p = bytes.data() + kNev1HeaderSize;
  for (std::size_t i = 0; i < count; ++i, p += kNev1RecordSize) {
    const std::size_t offset = kNev1HeaderSize + i * kNev1RecordSize;
    Event& e = s.events[i];
    e.t = get_le<std::uint64_t>(p);
    e.x = get_le<std::uint16_t>(p + 8);
    e.y = get_le<std::uint16_t>(p + 10);
    const std::uint8_t pol = p[12];
    if (pol > 1) throw CorruptRecordError("invalid polarity " + std::to_string(pol), offset + 12);
    e.p = static_cast<Polarity>(pol);
    if (get_le<std::uint32_t>(p + 13) != 0) throw CorruptRecordError("non-zero reserved bytes", offset + 13);
    check_event(e, s.width, s.height, offset);
    if (i > 0 && s.events[i - 1].t > e.t) {
      throw OrderingError("timestamp decreases", offset);
    }
  }
  return s;
}

std::vector<std::uint8_t> encode_event_stream(const EventStream& stream) {
  std::vector<std::uint8_t> out;
  out.reserve(kNev1HeaderSize + stream.events.size() * kNev1RecordSize);
  out.insert(out.end(), {'N', 'E', 'V', '1'});
  put_le<std::uint16_t>(out, stream.width);
  put_le<std::uint16_t>(out, stream.height);
  put_le<std::uint64_t>(out, stream.events.size());
  for (const auto& e : stream.events) {
    put_le<std::uint64_t>(out, e.t);
    put_le<std::uint16_t>(out, e.x);
    put_le<std::uint16_t>(out, e.y);
    out.push_back(static_cast<std::uint8_t>(e.p));
    put_le<std::uint32_t>(out, 0);
  }
  return out;
}

EventStream read_event_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open event file " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_event_stream(bytes);
}

void write_event_file(const std::string& path, const EventStream& stream) {
  const auto bytes = encode_event_stream(stream);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write event file " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

EventStream read_event_csv(std::istream& in, std::uint16_t width, std::uint16_t height) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("t_us,x,y,p", 0) != 0) {
    throw FormatError("CSV: expected header t_us,x,y,p");
  }
  std::vector<Event> events;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    std::istringstream ss(line);
    std::uint64_t t = 0;
    unsigned x = 0, y = 0, p = 0;
    char c1 = 0, c2 = 0, c3 = 0;
    if (!(ss >> t >> c1 >> x >> c2 >> y >> c3 >> p) || c1 != ',' || c2 != ',' || c3 != ',' || p > 1 ||
        x > 0xFFFF || y > 0xFFFF) {
      throw FormatError("CSV: malformed line " + std::to_string(lineno));
    }
    events.push_back({t, static_cast<std::uint16_t>(x), static_cast<std::uint16_t>(y),
                      static_cast<Polarity>(p)});
  }
  return make_stream(width, height, std::move(events));
}

void write_event_csv(std::ostream& out, const EventStream& stream) {
  out << "t_us,x,y,p\n";
  for (const auto& e : stream.events) {
    out << e.t << ',' << e.x << ',' << e.y << ',' << static_cast<int>(e.p) << '\n';
  }
}

}  // namespace nerdd
