#pragma once

#include <map>
#include <set>

#include "pnc/kriging.hpp"
#include "pnc/spline.hpp"

namespace pnc::interp {

// ---------------------------------------------------------------------------
// Humidity conversions (Magnus saturation vapor pressure, FAO constants,
// standard surface pressure).
// ---------------------------------------------------------------------------

constexpr double kStandardPressureKpa = 101.325;

/// Saturation vapor pressure, kPa, at temperature T (degC).
inline double magnus_saturation_vapor_pressure_kpa(double temp_c) {
  return 0.6108 * std::exp(17.27 * temp_c / (temp_c + 237.3));
}

/// Specific humidity (g/g) from dew point via actual vapor pressure
/// e = e_s(dew): q = 0.622 e / (p - 0.378 e).
inline double specific_humidity_from_dew_point(double dew_c,
                                               double pressure_kpa = kStandardPressureKpa) {
  const double e = magnus_saturation_vapor_pressure_kpa(dew_c);
  return 0.622 * e / (pressure_kpa - 0.378 * e);
}

/// Inverse of the above: dew point (degC) from specific humidity.
inline double dew_point_from_specific_humidity(double q,
                                               double pressure_kpa = kStandardPressureKpa) {
  const double e = q * pressure_kpa / (0.622 + 0.378 * q);
  const double l = std::log(e / 0.6108);
  return 237.3 * l / (17.27 - l);
}

// ---------------------------------------------------------------------------
// build_meteo_stack: cubic time interpolation per station first, then
// ordinary kriging per target time.
// ---------------------------------------------------------------------------

/// Observations grouped by variable name.
using ObservationsByVariable = std::map<std::string, std::vector<grid::StationObservation>>;

namespace detail {

struct StationSeries {
  std::string id;
  double x_km = 0.0, y_km = 0.0;
  std::vector<std::pair<int, double>> knots;  // (timestamp, value), sorted
};

inline std::vector<StationSeries> group_by_station(
    const std::vector<grid::StationObservation>& obs) {
  std::vector<StationSeries> out;
  for (const auto& o : obs) {
    StationSeries* s = nullptr;
    for (auto& cand : out) {
      if (cand.id == o.station_id) {
        s = &cand;
        break;
      }
    }
    if (!s) {
      out.push_back({o.station_id, o.x_km, o.y_km, {}});
      s = &out.back();
    }
    s->knots.emplace_back(o.timestamp_min, o.value);
  }
  for (auto& s : out) {
    std::sort(s.knots.begin(), s.knots.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    for (size_t i = 1; i < s.knots.size(); ++i) {
      if (s.knots[i].first == s.knots[i - 1].first) {
        throw ValidationError("station " + s.id + ": duplicate timestamp " +
                              std::to_string(s.knots[i].first));
      }
    }
  }
  return out;
}

}  // namespace detail

/// Interpolate one variable's station set to a grid at the given times.
/// Returns one field (H*W) per time, in time order.
inline std::vector<std::vector<float>> interpolate_variable(
    const std::vector<grid::StationObservation>& obs, const std::vector<int>& times,
    const grid::GridShape& shape, const KrigingConfig& cfg, double pixel_size_km,
    std::ostream* warn = nullptr) {
  const auto stations = detail::group_by_station(obs);
  if (stations.empty()) throw InsufficientDataError("interpolate_variable: no stations");
  const std::string& variable = obs.front().variable;

  // temporal interpolation at each station
  std::vector<std::vector<double>> at_times(stations.size());
  for (size_t s = 0; s < stations.size(); ++s) {
    if (stations[s].knots.size() == 1) {
      // a single knot is constant in time but only valid at that instant
      for (int t : times) {
        if (t != stations[s].knots[0].first) {
          throw InsufficientDataError("station " + stations[s].id + " variable " + variable +
                                      ": one knot cannot cover time " + std::to_string(t));
        }
      }
      at_times[s].assign(times.size(), stations[s].knots[0].second);
    } else {
      at_times[s] = cubic_time_interp(stations[s].knots, times);
    }
  }

  // spatial kriging per target time
  std::vector<std::vector<float>> fields(times.size());
  for (size_t ti = 0; ti < times.size(); ++ti) {
    std::vector<grid::StationObservation> snapshot;
    snapshot.reserve(stations.size());
    for (size_t s = 0; s < stations.size(); ++s) {
      snapshot.push_back({stations[s].id, stations[s].x_km, stations[s].y_km, times[ti], variable,
                          at_times[s][ti]});
    }
    fields[ti] = krige_to_grid(snapshot, shape, cfg, pixel_size_km, warn).values;
  }
  return fields;
}

/// Reconstruct gridded half-hourly MeteoStacks from sparse station series.
/// Requires u10, v10, u100, v100, r_s, temp and either q or dew.
inline std::vector<grid::MeteoStack> build_meteo_stack(const ObservationsByVariable& obs_by_var,
                                                       const std::vector<int>& times,
                                                       const grid::GridShape& shape,
                                                       const KrigingConfig& cfg,
                                                       double pixel_size_km = 1.0,
                                                       std::ostream* warn = nullptr) {
  if (times.empty()) throw ValidationError("build_meteo_stack: no target times");
  for (size_t i = 1; i < times.size(); ++i) {
    if (times[i] <= times[i - 1]) {
      throw ValidationError("build_meteo_stack: times must be strictly increasing");
    }
  }
  auto has = [&](const std::string& v) {
    auto it = obs_by_var.find(v);
    return it != obs_by_var.end() && !it->second.empty();
  };
  for (const char* v : {"u10", "v10", "u100", "v100", "r_s", "temp"}) {
    if (!has(v)) throw MissingVariableError("build_meteo_stack: missing variable " + std::string(v));
  }
  const bool have_q = has("q");
  const bool have_dew = has("dew");
  if (!have_q && !have_dew) {
    throw MissingVariableError("build_meteo_stack: need q or dew");
  }

  std::map<std::string, std::vector<std::vector<float>>> fields;
  for (const auto& [var, var_obs] : obs_by_var) {
    if (var_obs.empty()) continue;
    fields[var] = interpolate_variable(var_obs, times, shape, cfg, pixel_size_km, warn);
  }

  const size_t pixels = shape.pixel_count();
  std::vector<grid::MeteoStack> stacks;
  stacks.reserve(times.size());
  for (size_t ti = 0; ti < times.size(); ++ti) {
    grid::MeteoStack st;
    st.shape = grid::GridShape{shape.height, shape.width, grid::MeteoStack::kFieldCount};
    st.pixel_size_km = static_cast<float>(pixel_size_km);
    st.timestamp_min = times[ti];
    st.u10 = fields["u10"][ti];
    st.v10 = fields["v10"][ti];
    st.u100 = fields["u100"][ti];
    st.v100 = fields["v100"][ti];
    st.r_s = fields["r_s"][ti];
    st.temp = fields["temp"][ti];
    for (auto& v : st.r_s) v = std::max(v, 0.0f);  // kriging may undershoot
    st.q.resize(pixels);
    st.dew.resize(pixels);
    if (have_q) {
      st.q = fields["q"][ti];
      for (auto& v : st.q) v = std::max(v, 0.0f);
      if (have_dew) {
        st.dew = fields["dew"][ti];
      } else {
        for (size_t p = 0; p < pixels; ++p) {
          st.dew[p] = static_cast<float>(
              dew_point_from_specific_humidity(std::max(1e-6, static_cast<double>(st.q[p]))));
        }
      }
    } else {
      st.dew = fields["dew"][ti];
      for (size_t p = 0; p < pixels; ++p) {
        st.q[p] = static_cast<float>(
            specific_humidity_from_dew_point(static_cast<double>(st.dew[p])));
      }
    }
    for (size_t p = 0; p < pixels; ++p) st.dew[p] = std::min(st.dew[p], st.temp[p]);
    grid::validate_meteo_stack(st);
    stacks.push_back(std::move(st));
  }
  return stacks;
}

}  // namespace pnc::interp
