#pragma once

#include <array>
#include <charconv>
#include <limits>
#include <optional>
#include <sstream>
#include <utility>
#include <variant>

#include "pnc/common.hpp"

namespace pnc::grid {

// ---------------------------------------------------------------------------
// Core gridded types. All types are immutable after construction: build them
// through the make_* factories, which enforce the invariants.
// ---------------------------------------------------------------------------

struct GridShape {
  int height = 0;
  int width = 0;
  int channels = 1;

  size_t pixel_count() const { return static_cast<size_t>(height) * static_cast<size_t>(width); }
  size_t element_count() const { return pixel_count() * static_cast<size_t>(channels); }

  bool operator==(const GridShape&) const = default;

  void validate() const {
    if (height < 1 || width < 1 || channels < 1) {
      throw ValidationError("GridShape: all dimensions must be >= 1, got " + describe());
    }
    const uint64_t total = static_cast<uint64_t>(height) * static_cast<uint64_t>(width) *
                           static_cast<uint64_t>(channels);
    if (total > static_cast<uint64_t>(std::numeric_limits<int64_t>::max() / 8)) {
      throw ValidationError("GridShape: element count overflows addressable size: " + describe());
    }
  }

  std::string describe() const {
    return std::to_string(height) + "x" + std::to_string(width) + "x" + std::to_string(channels);
  }
};

/// One precipitation field (mm/h per pixel), timestamped in minutes relative
/// to the owning sequence's origin.
struct PrecipFrame {
  GridShape shape;  // channels == 1
  std::vector<float> values;
  int timestamp_min = 0;
};

inline void validate_field(const GridShape& shape, const std::vector<float>& values,
                           const std::string& field, bool non_negative) {
  if (values.size() != shape.pixel_count()) {
    throw ValidationError(field + ": expected " + std::to_string(shape.pixel_count()) +
                          " values for shape " + shape.describe() + ", got " +
                          std::to_string(values.size()));
  }
  for (size_t i = 0; i < values.size(); ++i) {
    const float v = values[i];
    if (!std::isfinite(v)) {
      throw ValidationError(field + ": non-finite value at index " + std::to_string(i));
    }
    if (non_negative && v < 0.0f) {
      throw ValidationError(field + ": negative value " + std::to_string(v) + " at index " +
                            std::to_string(i));
    }
  }
}

inline PrecipFrame make_precip_frame(GridShape shape, std::vector<float> values,
                                     int timestamp_min) {
  shape.channels = 1;
  shape.validate();
  validate_field(shape, values, "precipitation", /*non_negative=*/true);
  return PrecipFrame{shape, std::move(values), timestamp_min};
}

/// Time-ordered stack of precipitation frames on a shared grid.
struct PrecipSequence {
  std::vector<PrecipFrame> frames;
  int step_minutes = 30;

  const GridShape& shape() const { return frames.front().shape; }
  size_t size() const { return frames.size(); }
};

inline PrecipSequence make_precip_sequence(std::vector<PrecipFrame> frames, int step_minutes) {
  if (frames.empty()) throw ValidationError("PrecipSequence: needs at least one frame");
  if (step_minutes < 1) throw ValidationError("PrecipSequence: step_minutes must be >= 1");
  const GridShape& shape = frames.front().shape;
  for (size_t i = 0; i < frames.size(); ++i) {
    if (!(frames[i].shape == shape)) {
      throw ShapeError("PrecipSequence: frame " + std::to_string(i) + " has shape " +
                       frames[i].shape.describe() + ", expected " + shape.describe());
    }
    if (i > 0 && frames[i].timestamp_min - frames[i - 1].timestamp_min != step_minutes) {
      throw ValidationError("PrecipSequence: timestamps must increase by exactly " +
                            std::to_string(step_minutes) + " min; frame " + std::to_string(i) +
                            " is at " + std::to_string(frames[i].timestamp_min) + " after " +
                            std::to_string(frames[i - 1].timestamp_min));
    }
  }
  return PrecipSequence{std::move(frames), step_minutes};
}

/// Co-registered meteorological fields for a single timestep.
struct MeteoStack {
  GridShape shape;  // channels describes the bundle below, stored as 8 planes
  float pixel_size_km = 1.0f;
  int timestamp_min = 0;
  std::vector<float> q;     // specific humidity, g/g
  std::vector<float> u10;   // 10 m zonal wind, m/s
  std::vector<float> v10;   // 10 m meridional wind, m/s
  std::vector<float> u100;  // 100 m zonal wind, m/s
  std::vector<float> v100;  // 100 m meridional wind, m/s
  std::vector<float> r_s;   // global radiation, W/m^2
  std::vector<float> temp;  // air temperature, degC
  std::vector<float> dew;   // dew point temperature, degC

  static constexpr int kFieldCount = 8;
  static constexpr std::array<const char*, kFieldCount> kFieldNames = {
      "q", "u10", "v10", "u100", "v100", "r_s", "temp", "dew"};

  const std::vector<float>& field(int i) const {
    switch (i) {
      case 0: return q;
      case 1: return u10;
      case 2: return v10;
      case 3: return u100;
      case 4: return v100;
      case 5: return r_s;
      case 6: return temp;
      case 7: return dew;
      default: throw IndexError("MeteoStack: field index " + std::to_string(i));
    }
  }
  std::vector<float>& field(int i) {
    return const_cast<std::vector<float>&>(static_cast<const MeteoStack*>(this)->field(i));
  }
};

inline void validate_meteo_stack(const MeteoStack& m) {
  GridShape s{m.shape.height, m.shape.width, 1};
  s.validate();
  if (m.pixel_size_km <= 0.0f) throw ValidationError("MeteoStack: pixel_size_km must be > 0");
  validate_field(s, m.q, "q", /*non_negative=*/true);
  validate_field(s, m.u10, "u10", false);
  validate_field(s, m.v10, "v10", false);
  validate_field(s, m.u100, "u100", false);
  validate_field(s, m.v100, "v100", false);
  validate_field(s, m.r_s, "r_s", /*non_negative=*/true);
  validate_field(s, m.temp, "temp", false);
  validate_field(s, m.dew, "dew", false);
  if (m.q.size() == m.temp.size()) {
    for (size_t i = 0; i < m.dew.size(); ++i) {
      if (m.dew[i] > m.temp[i] + 1e-6f) {
        throw ValidationError("MeteoStack: dew > temp at index " + std::to_string(i));
      }
    }
  }
}

/// Time-ordered list of MeteoStacks sharing grid, pixel size and cadence.
struct MeteoSeries {
  std::vector<MeteoStack> stacks;
  int step_minutes = 30;

  const GridShape& shape() const { return stacks.front().shape; }
  size_t size() const { return stacks.size(); }
};

inline MeteoSeries make_meteo_series(std::vector<MeteoStack> stacks, int step_minutes) {
  if (stacks.empty()) throw ValidationError("MeteoSeries: needs at least one stack");
  if (step_minutes < 1) throw ValidationError("MeteoSeries: step_minutes must be >= 1");
  for (size_t i = 0; i < stacks.size(); ++i) {
    validate_meteo_stack(stacks[i]);
    if (!(stacks[i].shape.height == stacks[0].shape.height &&
          stacks[i].shape.width == stacks[0].shape.width)) {
      throw ShapeError("MeteoSeries: stack " + std::to_string(i) + " shape mismatch");
    }
    if (i > 0 && stacks[i].timestamp_min - stacks[i - 1].timestamp_min != step_minutes) {
      throw ValidationError("MeteoSeries: timestamps must increase by exactly " +
                            std::to_string(step_minutes) + " min");
    }
  }
  return MeteoSeries{std::move(stacks), step_minutes};
}

/// Generic PNWG kind=2 payload that is not an 8-field meteo bundle
/// (e.g. catchment masks with C=1).
struct GriddedSeries {
  int t = 0, h = 0, w = 0, c = 0;
  int step_minutes = 30;
  float pixel_size_km = 1.0f;
  std::vector<float> values;  // [T,H,W,C] row-major
};

/// One point measurement from a station, in grid-relative km coordinates.
struct StationObservation {
  std::string station_id;
  double x_km = 0.0;
  double y_km = 0.0;
  int timestamp_min = 0;
  std::string variable;
  double value = 0.0;
};

// ---------------------------------------------------------------------------
// split_sequence: conditioning/target split of an (N+M)-frame sequence.
// ---------------------------------------------------------------------------

inline std::pair<PrecipSequence, PrecipSequence> split_sequence(const PrecipSequence& seq,
                                                                int n_cond, int m_pred) {
  if (n_cond < 1 || m_pred < 1) throw ArityError("split_sequence: n_cond and m_pred must be >= 1");
  if (static_cast<int>(seq.frames.size()) != n_cond + m_pred) {
    throw ArityError("split_sequence: sequence has " + std::to_string(seq.frames.size()) +
                     " frames, expected n_cond + m_pred = " + std::to_string(n_cond + m_pred));
  }
  std::vector<PrecipFrame> head(seq.frames.begin(), seq.frames.begin() + n_cond);
  std::vector<PrecipFrame> tail(seq.frames.begin() + n_cond, seq.frames.end());
  return {PrecipSequence{std::move(head), seq.step_minutes},
          PrecipSequence{std::move(tail), seq.step_minutes}};
}

// ---------------------------------------------------------------------------
// PNWG binary format.
//
//   magic "PNWG" (4) | version u16=1 | dtype u8=1 (f32le) | kind u8 (1=precip,
//   2=meteo) | T u32 | H u32 | W u32 | C u32 | step_minutes u32 |
//   pixel_size_km f32 | reserved zero bytes padding the header to 64 bytes |
//   T*H*W*C little-endian f32, row-major [T,H,W,C].
//
// Frame timestamps are stored implicitly as 0, step, 2*step, ...; files
// always represent an origin-0 timeline.
// ---------------------------------------------------------------------------

constexpr size_t kPnwgHeaderSize = 64;
constexpr uint8_t kPnwgDtypeF32 = 1;
constexpr uint8_t kPnwgKindPrecip = 1;
constexpr uint8_t kPnwgKindMeteo = 2;

using GridFile = std::variant<PrecipSequence, MeteoSeries, GriddedSeries>;

namespace detail {

inline void write_pnwg_header(std::ostream& os, uint8_t kind, uint32_t t, uint32_t h, uint32_t w,
                              uint32_t c, uint32_t step_minutes, float pixel_size_km) {
  write_bytes(os, "PNWG", 4);
  write_le<uint16_t>(os, 1);
  write_le<uint8_t>(os, kPnwgDtypeF32);
  write_le<uint8_t>(os, kind);
  write_le<uint32_t>(os, t);
  write_le<uint32_t>(os, h);
  write_le<uint32_t>(os, w);
  write_le<uint32_t>(os, c);
  write_le<uint32_t>(os, step_minutes);
  write_le<float>(os, pixel_size_km);
  const char zeros[kPnwgHeaderSize] = {};
  write_bytes(os, zeros, kPnwgHeaderSize - 32);  // pad to 64 bytes
}

struct PnwgHeader {
  uint8_t kind = 0;
  uint32_t t = 0, h = 0, w = 0, c = 0;
  uint32_t step_minutes = 0;
  float pixel_size_km = 1.0f;
};

inline PnwgHeader read_pnwg_header(std::istream& is, const std::string& path) {
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, "PNWG", 4) != 0) {
    throw FormatError("PNWG: bad magic in " + path);
  }
  uint16_t version = 0;
  uint8_t dtype = 0;
  PnwgHeader hd;
  if (!read_le(is, version) || !read_le(is, dtype) || !read_le(is, hd.kind) ||
      !read_le(is, hd.t) || !read_le(is, hd.h) || !read_le(is, hd.w) || !read_le(is, hd.c) ||
      !read_le(is, hd.step_minutes) || !read_le(is, hd.pixel_size_km)) {
    throw LengthError("PNWG: truncated header in " + path);
  }
  if (version != 1) throw FormatError("PNWG: unsupported version " + std::to_string(version));
  if (dtype != kPnwgDtypeF32) throw FormatError("PNWG: unsupported dtype " + std::to_string(dtype));
  if (hd.kind != kPnwgKindPrecip && hd.kind != kPnwgKindMeteo) {
    throw FormatError("PNWG: unknown kind " + std::to_string(hd.kind));
  }
  char reserved[kPnwgHeaderSize - 32];
  is.read(reserved, sizeof(reserved));
  if (static_cast<size_t>(is.gcount()) != sizeof(reserved)) {
    throw LengthError("PNWG: truncated header in " + path);
  }
  return hd;
}

inline std::vector<float> read_payload(std::istream& is, size_t count, const std::string& path) {
  std::vector<float> values(count);
  is.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(count * sizeof(float)));
  if (static_cast<size_t>(is.gcount()) != count * sizeof(float)) {
    throw LengthError("PNWG: payload truncated in " + path + " (expected " +
                      std::to_string(count) + " floats)");
  }
  // any trailing bytes mean the declared shape and the payload disagree
  char extra;
  if (is.read(&extra, 1)) {
    throw LengthError("PNWG: payload longer than declared shape in " + path);
  }
  return values;
}

}  // namespace detail

inline void write_grid_file(const PrecipSequence& seq, const std::filesystem::path& path,
                            float pixel_size_km = 1.0f) {
  for (size_t i = 0; i < seq.frames.size(); ++i) {
    validate_field(seq.frames[i].shape, seq.frames[i].values,
                   "frame " + std::to_string(i) + " precipitation", true);
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  const GridShape& s = seq.shape();
  detail::write_pnwg_header(os, kPnwgKindPrecip, static_cast<uint32_t>(seq.frames.size()),
                            static_cast<uint32_t>(s.height), static_cast<uint32_t>(s.width), 1,
                            static_cast<uint32_t>(seq.step_minutes), pixel_size_km);
  for (const auto& f : seq.frames) {
    write_bytes(os, f.values.data(), f.values.size() * sizeof(float));
  }
  if (!os) throw IoError("write failed: " + path.string());
}

inline void write_grid_file(const MeteoSeries& series, const std::filesystem::path& path) {
  for (const auto& st : series.stacks) validate_meteo_stack(st);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  const GridShape& s = series.shape();
  detail::write_pnwg_header(os, kPnwgKindMeteo, static_cast<uint32_t>(series.stacks.size()),
                            static_cast<uint32_t>(s.height), static_cast<uint32_t>(s.width),
                            MeteoStack::kFieldCount, static_cast<uint32_t>(series.step_minutes),
                            series.stacks.front().pixel_size_km);
  // interleave fields per pixel: layout [T,H,W,C]
  const size_t pixels = s.pixel_count();
  std::vector<float> row(MeteoStack::kFieldCount);
  for (const auto& st : series.stacks) {
    for (size_t p = 0; p < pixels; ++p) {
      for (int f = 0; f < MeteoStack::kFieldCount; ++f) row[static_cast<size_t>(f)] = st.field(f)[p];
      write_bytes(os, row.data(), row.size() * sizeof(float));
    }
  }
  if (!os) throw IoError("write failed: " + path.string());
}

inline void write_grid_file(const GriddedSeries& g, const std::filesystem::path& path) {
  if (g.t < 1 || g.h < 1 || g.w < 1 || g.c < 1) {
    throw ValidationError("GriddedSeries: all dimensions must be >= 1");
  }
  const size_t expect = static_cast<size_t>(g.t) * static_cast<size_t>(g.h) *
                        static_cast<size_t>(g.w) * static_cast<size_t>(g.c);
  if (g.values.size() != expect) {
    throw ValidationError("GriddedSeries: expected " + std::to_string(expect) + " values, got " +
                          std::to_string(g.values.size()));
  }
  for (size_t i = 0; i < g.values.size(); ++i) {
    if (!std::isfinite(g.values[i])) {
      throw ValidationError("GriddedSeries: non-finite value at index " + std::to_string(i));
    }
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  detail::write_pnwg_header(os, kPnwgKindMeteo, static_cast<uint32_t>(g.t),
                            static_cast<uint32_t>(g.h), static_cast<uint32_t>(g.w),
                            static_cast<uint32_t>(g.c), static_cast<uint32_t>(g.step_minutes),
                            g.pixel_size_km);
  write_bytes(os, g.values.data(), g.values.size() * sizeof(float));
  if (!os) throw IoError("write failed: " + path.string());
}

inline GridFile read_grid_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  const auto hd = detail::read_pnwg_header(is, path.string());
  if (hd.t < 1 || hd.h < 1 || hd.w < 1 || hd.c < 1) {
    throw FormatError("PNWG: zero dimension in " + path.string());
  }
  const size_t count = static_cast<size_t>(hd.t) * static_cast<size_t>(hd.h) *
                       static_cast<size_t>(hd.w) * static_cast<size_t>(hd.c);
  std::vector<float> values = detail::read_payload(is, count, path.string());
  for (size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw ValidationError("PNWG: non-finite payload value at index " + std::to_string(i) +
                            " in " + path.string());
    }
  }
  const int step = static_cast<int>(hd.step_minutes);
  if (hd.kind == kPnwgKindPrecip) {
    if (hd.c != 1) throw FormatError("PNWG: precip files must have C=1, got " + std::to_string(hd.c));
    GridShape shape{static_cast<int>(hd.h), static_cast<int>(hd.w), 1};
    std::vector<PrecipFrame> frames;
    frames.reserve(hd.t);
    const size_t per = shape.pixel_count();
    for (uint32_t t = 0; t < hd.t; ++t) {
      std::vector<float> v(values.begin() + static_cast<ptrdiff_t>(t * per),
                           values.begin() + static_cast<ptrdiff_t>((t + 1) * per));
      frames.push_back(make_precip_frame(shape, std::move(v), static_cast<int>(t) * step));
    }
    return make_precip_sequence(std::move(frames), step);
  }
  if (hd.c == MeteoStack::kFieldCount) {
    GridShape shape{static_cast<int>(hd.h), static_cast<int>(hd.w), MeteoStack::kFieldCount};
    std::vector<MeteoStack> stacks;
    stacks.reserve(hd.t);
    const size_t pixels = static_cast<size_t>(hd.h) * static_cast<size_t>(hd.w);
    for (uint32_t t = 0; t < hd.t; ++t) {
      MeteoStack st;
      st.shape = shape;
      st.pixel_size_km = hd.pixel_size_km;
      st.timestamp_min = static_cast<int>(t) * step;
      for (int f = 0; f < MeteoStack::kFieldCount; ++f) st.field(f).resize(pixels);
      const size_t base = static_cast<size_t>(t) * pixels * MeteoStack::kFieldCount;
      for (size_t p = 0; p < pixels; ++p) {
        for (int f = 0; f < MeteoStack::kFieldCount; ++f) {
          st.field(f)[p] = values[base + p * MeteoStack::kFieldCount + static_cast<size_t>(f)];
        }
      }
      validate_meteo_stack(st);
      stacks.push_back(std::move(st));
    }
    return make_meteo_series(std::move(stacks), step);
  }
  GriddedSeries g;
  g.t = static_cast<int>(hd.t);
  g.h = static_cast<int>(hd.h);
  g.w = static_cast<int>(hd.w);
  g.c = static_cast<int>(hd.c);
  g.step_minutes = step;
  g.pixel_size_km = hd.pixel_size_km;
  g.values = std::move(values);
  return g;
}

inline PrecipSequence read_precip_file(const std::filesystem::path& path) {
  GridFile f = read_grid_file(path);
  if (auto* p = std::get_if<PrecipSequence>(&f)) return std::move(*p);
  throw FormatError("expected a precipitation (kind=1) PNWG file: " + path.string());
}

inline MeteoSeries read_meteo_file(const std::filesystem::path& path) {
  GridFile f = read_grid_file(path);
  if (auto* p = std::get_if<MeteoSeries>(&f)) return std::move(*p);
  throw FormatError("expected an 8-field meteo (kind=2) PNWG file: " + path.string());
}

// ---------------------------------------------------------------------------
// Station CSV: header `station_id,x_km,y_km,timestamp_min,variable,value`.
// ---------------------------------------------------------------------------

constexpr const char* kStationCsvHeader = "station_id,x_km,y_km,timestamp_min,variable,value";

inline void write_station_csv(const std::vector<StationObservation>& obs,
                              const std::filesystem::path& path) {
  std::vector<std::string> rows;
  rows.reserve(obs.size());
  for (const auto& o : obs) {
    rows.push_back(o.station_id + "," + format_value(o.x_km) + "," + format_value(o.y_km) + "," +
                   std::to_string(o.timestamp_min) + "," + o.variable + "," +
                   format_value(o.value));
  }
  write_csv(path, kStationCsvHeader, rows);
}

namespace detail {

inline double parse_double(const std::string& s, const std::string& context) {
  double v = 0.0;
  const char* b = s.data();
  const char* e = s.data() + s.size();
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || p != e) throw FormatError("station CSV: bad number '" + s + "' in " + context);
  return v;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

inline std::vector<StationObservation> read_station_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw FormatError("station CSV: empty file " + path.string());
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kStationCsvHeader) {
    throw FormatError("station CSV: bad header in " + path.string() + ": '" + line + "'");
  }
  std::vector<StationObservation> obs;
  size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cells = detail::split_csv_line(line);
    const std::string ctx = path.string() + ":" + std::to_string(lineno);
    if (cells.size() != 6) throw FormatError("station CSV: expected 6 columns in " + ctx);
    StationObservation o;
    o.station_id = cells[0];
    o.x_km = detail::parse_double(cells[1], ctx);
    o.y_km = detail::parse_double(cells[2], ctx);
    o.timestamp_min = static_cast<int>(detail::parse_double(cells[3], ctx));
    o.variable = cells[4];
    o.value = detail::parse_double(cells[5], ctx);
    if (!std::isfinite(o.value)) throw ValidationError("station CSV: non-finite value in " + ctx);
    obs.push_back(std::move(o));
  }
  return obs;
}

/// Reject stations far outside the grid's bounding box. Pixel (r, c) sits at
/// (c * pixel_size_km, r * pixel_size_km).
inline void validate_station_positions(const std::vector<StationObservation>& obs,
                                       const GridShape& shape, double pixel_size_km,
                                       double margin_km = 10.0) {
  const double max_x = (shape.width - 1) * pixel_size_km;
  const double max_y = (shape.height - 1) * pixel_size_km;
  for (const auto& o : obs) {
    if (o.x_km < -margin_km || o.x_km > max_x + margin_km || o.y_km < -margin_km ||
        o.y_km > max_y + margin_km) {
      throw ValidationError("station " + o.station_id + " at (" + std::to_string(o.x_km) + "," +
                            std::to_string(o.y_km) + ") km lies outside the grid plus margin");
    }
  }
}

}  // namespace pnc::grid
