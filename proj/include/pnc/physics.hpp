#pragma once

#include "pnc/grid.hpp"

namespace pnc::physics {

// ---------------------------------------------------------------------------
// Makkink evapotranspiration.
//
//   ET = 0.65 * Delta / (Delta + gamma) * R_s / lambda_v     [kg m^-2 s^-1]
//
// with Delta the Magnus-based slope of the saturation vapor pressure curve
// (kPa/degC), gamma the psychrometric constant (kPa/degC), R_s global
// radiation (W/m^2) and lambda_v the latent heat of vaporization (J/kg).
// The result is returned in mm/h (x3600; 1 kg/m^2 of water = 1 mm).
// ---------------------------------------------------------------------------

struct MakkinkInputs {
  double temp_c = 15.0;
  double r_s = 0.0;            // W/m^2
  double gamma = 0.066;        // kPa/degC
  double lambda_v = 2.45e6;    // J/kg

  void validate() const {
    if (r_s < 0.0) throw ValidationError("makkink: r_s must be >= 0");
    if (gamma <= 0.0) throw ValidationError("makkink: gamma must be > 0");
    if (lambda_v <= 0.0) throw ValidationError("makkink: lambda_v must be > 0");
  }
};

/// Slope of the saturation vapor pressure curve at temp (kPa/degC).
inline double vapor_pressure_slope_kpa_per_c(double temp_c) {
  const double es = 0.6108 * std::exp(17.27 * temp_c / (temp_c + 237.3));
  const double d = temp_c + 237.3;
  return 4098.0 * es / (d * d);
}

inline double makkink_et_mm_per_h(const MakkinkInputs& inp) {
  inp.validate();
  const double delta = vapor_pressure_slope_kpa_per_c(inp.temp_c);
  const double flux = 0.65 * delta / (delta + inp.gamma) * inp.r_s / inp.lambda_v;
  return std::max(0.0, flux * 3600.0);
}

// ---------------------------------------------------------------------------
// Moisture-conservation residual, per pixel, in mm/h water-equivalent:
//
//   R_q = -dq/dt - u10 dq/dx - v10 dq/dy - u100 dq/dx - v100 dq/dy + ET - P
//
// dq/dt is the backward difference (q_curr - q_prev)/dt. Spatial derivatives
// are central differences on q_curr (one-sided at the boundary), using the
// current step's winds; humidity-tendency terms are converted to mm/h via
// column_mass before combining with ET and P. All arithmetic is f64.
// ---------------------------------------------------------------------------

struct ResidualConfig {
  double column_mass = 10000.0;  // kg/m^2 of air column per unit q
  double dx_km = 1.0;
  double dy_km = 1.0;
  double dt_minutes = 30.0;

  void validate() const {
    if (column_mass <= 0 || dx_km <= 0 || dy_km <= 0 || dt_minutes <= 0) {
      throw ValidationError("ResidualConfig: all parameters must be positive");
    }
  }

  /// mm/h per (g/g per second).
  double humidity_to_mm_per_h() const { return column_mass * 3600.0; }
};

enum class ResidualAggregation { kMeanAbs, kRms };

struct ConsistencyConfig {
  double lambda_sharpness = 1.0;
  ResidualAggregation aggregation = ResidualAggregation::kMeanAbs;

  void validate() const {
    if (lambda_sharpness <= 0.0) throw ValidationError("ConsistencyConfig: lambda must be > 0");
  }
};

struct ResidualField {
  int height = 0, width = 0;
  std::vector<double> values;  // mm/h water-equivalent
  double mean_abs = 0.0;
  double rms = 0.0;
};

struct ConsistencyScore {
  double scalar = 0.0;  // aggregated |R_q|
  double eta = 1.0;     // exp(-lambda * scalar), in (0, 1]
};

namespace detail {

/// Central difference in x (per meter) on the current humidity field;
/// first-order one-sided at the left/right edges.
inline double ddx(const std::vector<float>& f, int w, int r, int c, double dx_m) {
  const size_t row = static_cast<size_t>(r) * static_cast<size_t>(w);
  if (w == 1) return 0.0;
  if (c == 0) return (static_cast<double>(f[row + 1]) - f[row]) / dx_m;
  if (c == w - 1) return (static_cast<double>(f[row + static_cast<size_t>(c)]) -
                          f[row + static_cast<size_t>(c - 1)]) / dx_m;
  return (static_cast<double>(f[row + static_cast<size_t>(c + 1)]) -
          f[row + static_cast<size_t>(c - 1)]) / (2.0 * dx_m);
}

inline double ddy(const std::vector<float>& f, int h, int w, int r, int c, double dy_m) {
  if (h == 1) return 0.0;
  auto at = [&](int rr) {
    return static_cast<double>(f[static_cast<size_t>(rr) * static_cast<size_t>(w) +
                                 static_cast<size_t>(c)]);
  };
  if (r == 0) return (at(1) - at(0)) / dy_m;
  if (r == h - 1) return (at(r) - at(r - 1)) / dy_m;
  return (at(r + 1) - at(r - 1)) / (2.0 * dy_m);
}

}  // namespace detail

/// Decomposed residual terms (all mm/h) for unit-sanity checks.
struct ResidualTerms {
  std::vector<double> tendency;   // -kappa * dq/dt
  std::vector<double> advection;  // -kappa * (u10+u100) dq/dx - kappa * (v10+v100) dq/dy
  std::vector<double> et;         // +ET
  std::vector<double> precip;     // -P
};

inline ResidualField moisture_residual(const std::vector<float>& q_prev,
                                       const std::vector<float>& q_curr,
                                       const grid::MeteoStack& meteo,
                                       const std::vector<float>& precip_mm_h,
                                       const ResidualConfig& cfg,
                                       ResidualTerms* terms = nullptr) {
  cfg.validate();
  const int h = meteo.shape.height;
  const int w = meteo.shape.width;
  const size_t pixels = static_cast<size_t>(h) * static_cast<size_t>(w);
  if (q_prev.size() != pixels || q_curr.size() != pixels || precip_mm_h.size() != pixels) {
    throw ShapeError("moisture_residual: grids must be co-registered on " +
                     std::to_string(h) + "x" + std::to_string(w));
  }
  const double kappa = cfg.humidity_to_mm_per_h();
  const double dt_s = cfg.dt_minutes * 60.0;
  const double dx_m = cfg.dx_km * 1000.0;
  const double dy_m = cfg.dy_km * 1000.0;

  ResidualField out;
  out.height = h;
  out.width = w;
  out.values.resize(pixels);
  if (terms) {
    terms->tendency.resize(pixels);
    terms->advection.resize(pixels);
    terms->et.resize(pixels);
    terms->precip.resize(pixels);
  }
  double sum_abs = 0.0, sum_sq = 0.0;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const size_t p = static_cast<size_t>(r) * static_cast<size_t>(w) + static_cast<size_t>(c);
      const double dqdt = (static_cast<double>(q_curr[p]) - q_prev[p]) / dt_s;
      const double dqdx = detail::ddx(q_curr, w, r, c, dx_m);
      const double dqdy = detail::ddy(q_curr, h, w, r, c, dy_m);
      const double u_sum = static_cast<double>(meteo.u10[p]) + meteo.u100[p];
      const double v_sum = static_cast<double>(meteo.v10[p]) + meteo.v100[p];
      const double et = makkink_et_mm_per_h({meteo.temp[p], meteo.r_s[p]});
      const double tendency = -kappa * dqdt;
      const double advection = -kappa * (u_sum * dqdx + v_sum * dqdy);
      const double res = tendency + advection + et - precip_mm_h[p];
      out.values[p] = res;
      if (terms) {
        terms->tendency[p] = tendency;
        terms->advection[p] = advection;
        terms->et[p] = et;
        terms->precip[p] = -static_cast<double>(precip_mm_h[p]);
      }
      sum_abs += std::abs(res);
      sum_sq += res * res;
    }
  }
  out.mean_abs = sum_abs / static_cast<double>(pixels);
  out.rms = std::sqrt(sum_sq / static_cast<double>(pixels));
  return out;
}

inline ConsistencyScore consistency_score(const ResidualField& res, const ConsistencyConfig& cfg) {
  cfg.validate();
  const double scalar =
      cfg.aggregation == ResidualAggregation::kMeanAbs ? res.mean_abs : res.rms;
  return {scalar, std::exp(-cfg.lambda_sharpness * scalar)};
}

// ---------------------------------------------------------------------------
// Per-frame scores for a predicted sequence. Frame k of the prediction
// needs a meteo stack at its own timestamp (winds, ET, q_curr) and one at
// timestamp - step (q_prev).
// ---------------------------------------------------------------------------

struct FrameScore {
  int timestamp_min = 0;
  double eta = 1.0;
  double mean_abs_residual = 0.0;
  double rms_residual = 0.0;
};

inline const grid::MeteoStack& stack_at(const std::vector<grid::MeteoStack>& stacks,
                                        int timestamp_min) {
  for (const auto& s : stacks) {
    if (s.timestamp_min == timestamp_min) return s;
  }
  throw MissingTimestepError("no meteo stack at t=" + std::to_string(timestamp_min) + " min");
}

inline std::vector<FrameScore> sequence_scores(const grid::PrecipSequence& pred,
                                               const std::vector<grid::MeteoStack>& meteo,
                                               const ResidualConfig& rcfg,
                                               const ConsistencyConfig& ccfg,
                                               bool physics_enabled = true) {
  std::vector<FrameScore> out;
  out.reserve(pred.frames.size());
  if (!physics_enabled) {
    // ablation: neutral scores, no residual evaluation at all
    for (const auto& f : pred.frames) out.push_back({f.timestamp_min, 1.0, 0.0, 0.0});
    return out;
  }
  for (const auto& f : pred.frames) {
    const grid::MeteoStack& curr = stack_at(meteo, f.timestamp_min);
    const grid::MeteoStack& prev = stack_at(meteo, f.timestamp_min - pred.step_minutes);
    if (curr.shape.height != f.shape.height || curr.shape.width != f.shape.width) {
      throw ShapeError("sequence_scores: meteo grid does not match prediction grid");
    }
    ResidualConfig rc = rcfg;
    rc.dt_minutes = pred.step_minutes;
    rc.dx_km = curr.pixel_size_km;
    rc.dy_km = curr.pixel_size_km;
    const ResidualField res = moisture_residual(prev.q, curr.q, curr, f.values, rc);
    const ConsistencyScore s = consistency_score(res, ccfg);
    out.push_back({f.timestamp_min, s.eta, res.mean_abs, res.rms});
  }
  return out;
}

/// The residual's precipitation-independent part,
///   S = -kappa dq/dt - kappa (u10+u100) dq/dx - kappa (v10+v100) dq/dy + ET,
/// so that R_q = S - P. This is the constant side of the differentiable
/// physics path during training, and doubles as the implied precipitation
/// of a conservation-exact field.
inline std::vector<double> residual_source_term(const std::vector<float>& q_prev,
                                                const std::vector<float>& q_curr,
                                                const grid::MeteoStack& meteo,
                                                const ResidualConfig& cfg) {
  const std::vector<float> zero(q_curr.size(), 0.0f);
  ResidualField res = moisture_residual(q_prev, q_curr, meteo, zero, cfg);
  return std::move(res.values);
}

}  // namespace pnc::physics
