#pragma once

#include <Eigen/Dense>
#include <iostream>
#include <numeric>

#include "pnc/grid.hpp"

namespace pnc::interp {

// ---------------------------------------------------------------------------
// Variogram models. gamma(0) = nugget; gamma rises monotonically to the sill
// at (effective) range.
// ---------------------------------------------------------------------------

enum class VariogramKind { kSpherical, kExponential, kGaussian };

inline const char* to_string(VariogramKind k) {
  switch (k) {
    case VariogramKind::kSpherical: return "spherical";
    case VariogramKind::kExponential: return "exponential";
    case VariogramKind::kGaussian: return "gaussian";
  }
  return "?";
}

inline VariogramKind variogram_kind_from_string(const std::string& s) {
  if (s == "spherical") return VariogramKind::kSpherical;
  if (s == "exponential") return VariogramKind::kExponential;
  if (s == "gaussian") return VariogramKind::kGaussian;
  throw ConfigError("unknown variogram kind: " + s);
}

struct VariogramModel {
  VariogramKind kind = VariogramKind::kSpherical;
  double nugget = 0.0;
  double sill = 1.0;      // total variance, >= nugget
  double range_km = 50.0;

  void validate() const {
    if (nugget < 0.0) throw ValidationError("variogram: nugget must be >= 0");
    if (sill < nugget) throw ValidationError("variogram: sill must be >= nugget");
    if (range_km <= 0.0) throw ValidationError("variogram: range must be > 0");
  }

  double operator()(double h) const {
    if (h <= 0.0) return nugget;
    const double partial = sill - nugget;
    const double r = h / range_km;
    switch (kind) {
      case VariogramKind::kSpherical:
        return h >= range_km ? sill : nugget + partial * (1.5 * r - 0.5 * r * r * r);
      case VariogramKind::kExponential:
        return nugget + partial * (1.0 - std::exp(-3.0 * r));
      case VariogramKind::kGaussian:
        return nugget + partial * (1.0 - std::exp(-3.0 * r * r));
    }
    return sill;
  }
};

struct KrigingConfig {
  std::optional<VariogramModel> variogram;  // nullopt = auto-fit
  VariogramKind fit_kind = VariogramKind::kSpherical;
  int max_neighbors = 16;
  int fit_bins = 12;

  void validate() const {
    if (max_neighbors < 1) throw ValidationError("kriging: max_neighbors must be >= 1");
    if (fit_bins < 4) throw ValidationError("kriging: fit_bins must be >= 4");
    if (variogram) variogram->validate();
  }
};

/// Raised (as a signal, not a failure) when all stations carry one value and
/// the caller should fall back to a constant field.
class DegenerateFieldSignal : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Empirical variogram and least-squares model fit.
//
// Semivariances are binned with fixed, deterministic edges (max lag /
// fit_bins). For a candidate range on a coarse-to-fine grid, nugget and
// partial sill follow from linear least squares; the best (range, nugget,
// sill) triple under squared error wins.
// ---------------------------------------------------------------------------

inline VariogramModel fit_variogram(const std::vector<grid::StationObservation>& obs,
                                    VariogramKind kind = VariogramKind::kSpherical,
                                    int fit_bins = 12) {
  if (fit_bins < 4) throw ValidationError("fit_variogram: fit_bins must be >= 4");
  std::vector<std::array<double, 3>> pts;  // x, y, value
  for (const auto& o : obs) {
    bool dup = false;
    for (const auto& p : pts) {
      if (p[0] == o.x_km && p[1] == o.y_km) dup = true;
    }
    if (!dup) pts.push_back({o.x_km, o.y_km, o.value});
  }
  if (pts.size() < 4) {
    throw InsufficientDataError("fit_variogram: need >= 4 stations with distinct positions, got " +
                                std::to_string(pts.size()));
  }
  double mean = 0.0;
  for (const auto& p : pts) mean += p[2];
  mean /= static_cast<double>(pts.size());
  double var = 0.0;
  for (const auto& p : pts) var += (p[2] - mean) * (p[2] - mean);
  var /= static_cast<double>(pts.size());
  if (var == 0.0) throw DegenerateFieldSignal("fit_variogram: zero variance across stations");

  double max_pair = 0.0;
  for (size_t i = 0; i < pts.size(); ++i) {
    for (size_t j = i + 1; j < pts.size(); ++j) {
      const double dx = pts[i][0] - pts[j][0];
      const double dy = pts[i][1] - pts[j][1];
      max_pair = std::max(max_pair, std::sqrt(dx * dx + dy * dy));
    }
  }
  // pairs beyond half the maximum separation are too few to be reliable
  const double max_lag = max_pair / 2.0;
  const double bin_width = max_lag / fit_bins;
  std::vector<double> lag_sum(static_cast<size_t>(fit_bins), 0.0);
  std::vector<double> gamma_sum(static_cast<size_t>(fit_bins), 0.0);
  std::vector<int> counts(static_cast<size_t>(fit_bins), 0);
  for (size_t i = 0; i < pts.size(); ++i) {
    for (size_t j = i + 1; j < pts.size(); ++j) {
      const double dx = pts[i][0] - pts[j][0];
      const double dy = pts[i][1] - pts[j][1];
      const double h = std::sqrt(dx * dx + dy * dy);
      if (h > max_lag) continue;
      int b = std::min(fit_bins - 1, static_cast<int>(h / bin_width));
      const double dv = pts[i][2] - pts[j][2];
      lag_sum[static_cast<size_t>(b)] += h;
      gamma_sum[static_cast<size_t>(b)] += 0.5 * dv * dv;
      counts[static_cast<size_t>(b)] += 1;
    }
  }
  std::vector<double> lags, gammas, weights;
  for (int b = 0; b < fit_bins; ++b) {
    if (counts[static_cast<size_t>(b)] == 0) continue;
    lags.push_back(lag_sum[static_cast<size_t>(b)] / counts[static_cast<size_t>(b)]);
    gammas.push_back(gamma_sum[static_cast<size_t>(b)] / counts[static_cast<size_t>(b)]);
    weights.push_back(static_cast<double>(counts[static_cast<size_t>(b)]));
  }
  if (lags.size() < 3) throw InsufficientDataError("fit_variogram: too few populated lag bins");

  // Weighted LLS of (nugget, partial) given a trial range, scanned over a
  // fixed range grid; refined once around the best coarse value.
  auto fit_for_range = [&](double range, double* nug, double* partial) {
    double s_ww = 0, s_wb = 0, s_bb = 0, s_wg = 0, s_bg = 0;
    for (size_t i = 0; i < lags.size(); ++i) {
      VariogramModel unit{kind, 0.0, 1.0, range};
      const double basis = unit(lags[i]);
      const double w = weights[i];
      s_ww += w;
      s_wb += w * basis;
      s_bb += w * basis * basis;
      s_wg += w * gammas[i];
      s_bg += w * basis * gammas[i];
    }
    const double det = s_ww * s_bb - s_wb * s_wb;
    double n, p;
    if (std::abs(det) < 1e-12) {
      n = 0.0;
      p = s_bg / std::max(s_bb, 1e-12);
    } else {
      n = (s_bb * s_wg - s_wb * s_bg) / det;
      p = (s_ww * s_bg - s_wb * s_wg) / det;
    }
    n = std::max(0.0, n);
    p = std::max(1e-12, p);
    double err = 0.0;
    VariogramModel m{kind, n, n + p, range};
    for (size_t i = 0; i < lags.size(); ++i) {
      const double d = m(lags[i]) - gammas[i];
      err += weights[i] * d * d;
    }
    *nug = n;
    *partial = p;
    return err;
  };

  double best_range = max_lag / 2.0, best_nug = 0.0, best_partial = var;
  double best_err = std::numeric_limits<double>::infinity();
  auto scan = [&](double lo, double hi, int steps) {
    for (int s = 0; s <= steps; ++s) {
      const double range = lo + (hi - lo) * s / steps;
      if (range <= 0.0) continue;
      double nug, partial;
      const double err = fit_for_range(range, &nug, &partial);
      if (err < best_err) {
        best_err = err;
        best_range = range;
        best_nug = nug;
        best_partial = partial;
      }
    }
  };
  scan(max_lag * 0.05, max_lag * 2.0, 60);
  scan(best_range * 0.6, best_range * 1.4, 40);

  VariogramModel model{kind, best_nug, best_nug + best_partial, best_range};
  model.validate();
  return model;
}

// ---------------------------------------------------------------------------
// Ordinary kriging: per pixel, solve
//   [ Gamma  1 ] [w ]   [ gamma(s_i, p) ]
//   [ 1^T    0 ] [mu] = [ 1             ]
// so the weights always sum to 1. Using gamma consistently on the diagonal
// and the right-hand side makes the interpolator exact at station pixels.
// ---------------------------------------------------------------------------

struct KrigedField {
  std::vector<float> values;            // H*W row-major
  double max_weight_sum_error = 0.0;    // max |sum(w) - 1| over pixels
};

inline KrigedField krige_to_grid(const std::vector<grid::StationObservation>& obs,
                                 const grid::GridShape& shape, const KrigingConfig& cfg,
                                 double pixel_size_km = 1.0, std::ostream* warn = nullptr) {
  cfg.validate();
  if (obs.empty()) throw InsufficientDataError("krige_to_grid: need at least one station");
  for (const auto& o : obs) {
    if (o.variable != obs.front().variable || o.timestamp_min != obs.front().timestamp_min) {
      throw ValidationError("krige_to_grid: observations must share variable and timestamp");
    }
  }

  // deduplicate coincident stations by averaging
  std::vector<double> xs, ys, vs;
  std::vector<int> dup_counts;
  for (const auto& o : obs) {
    bool merged = false;
    for (size_t i = 0; i < xs.size(); ++i) {
      if (xs[i] == o.x_km && ys[i] == o.y_km) {
        dup_counts[i] += 1;
        vs[i] += (o.value - vs[i]) / dup_counts[i];
        merged = true;
        if (warn) {
          *warn << "krige_to_grid: duplicate station position (" << o.x_km << "," << o.y_km
                << "), averaging\n";
        }
        break;
      }
    }
    if (!merged) {
      xs.push_back(o.x_km);
      ys.push_back(o.y_km);
      vs.push_back(o.value);
      dup_counts.push_back(1);
    }
  }
  const int n_stations = static_cast<int>(xs.size());

  KrigedField out;
  out.values.assign(shape.pixel_count(), 0.0f);
  if (n_stations == 1) {
    std::fill(out.values.begin(), out.values.end(), static_cast<float>(vs[0]));
    return out;
  }

  VariogramModel model;
  if (cfg.variogram) {
    model = *cfg.variogram;
  } else {
    try {
      model = fit_variogram(obs, cfg.fit_kind, cfg.fit_bins);
    } catch (const DegenerateFieldSignal&) {
      std::fill(out.values.begin(), out.values.end(), static_cast<float>(vs[0]));
      return out;
    } catch (const InsufficientDataError&) {
      // too few stations to fit: fall back to a broad default spherical model
      double max_lag = 1.0;
      for (int i = 0; i < n_stations; ++i) {
        for (int j = i + 1; j < n_stations; ++j) {
          const double dx = xs[i] - xs[j], dy = ys[i] - ys[j];
          max_lag = std::max(max_lag, std::sqrt(dx * dx + dy * dy));
        }
      }
      model = VariogramModel{cfg.fit_kind, 0.0, 1.0, max_lag};
    }
  }
  model.validate();

  const int k = std::min(cfg.max_neighbors, n_stations);
  std::vector<double> wsum_err(shape.pixel_count(), 0.0);

  parallel_for(shape.height, [&](int64_t r) {
    std::vector<int> idx(static_cast<size_t>(n_stations));
    std::vector<double> d2(static_cast<size_t>(n_stations));
    Eigen::MatrixXd a(k + 1, k + 1);
    Eigen::VectorXd b(k + 1);
    for (int c = 0; c < shape.width; ++c) {
      const double px = c * pixel_size_km;
      const double py = static_cast<double>(r) * pixel_size_km;
      std::iota(idx.begin(), idx.end(), 0);
      for (int i = 0; i < n_stations; ++i) {
        const double dx = xs[static_cast<size_t>(i)] - px;
        const double dy = ys[static_cast<size_t>(i)] - py;
        d2[static_cast<size_t>(i)] = dx * dx + dy * dy;
      }
      // nearest k stations; ties broken by index for determinism
      std::stable_sort(idx.begin(), idx.end(), [&](int i, int j) {
        return d2[static_cast<size_t>(i)] < d2[static_cast<size_t>(j)];
      });
      for (int i = 0; i < k; ++i) {
        for (int j = 0; j < k; ++j) {
          const double dx = xs[static_cast<size_t>(idx[static_cast<size_t>(i)])] -
                            xs[static_cast<size_t>(idx[static_cast<size_t>(j)])];
          const double dy = ys[static_cast<size_t>(idx[static_cast<size_t>(i)])] -
                            ys[static_cast<size_t>(idx[static_cast<size_t>(j)])];
          a(i, j) = model(std::sqrt(dx * dx + dy * dy));
        }
        a(i, k) = 1.0;
        a(k, i) = 1.0;
        b(i) = model(std::sqrt(d2[static_cast<size_t>(idx[static_cast<size_t>(i)])]));
      }
      a(k, k) = 0.0;
      b(k) = 1.0;
      Eigen::VectorXd w = a.partialPivLu().solve(b);
      if (!w.allFinite()) {
        throw ValidationError("krige_to_grid: singular kriging system at pixel (" +
                              std::to_string(r) + "," + std::to_string(c) + ")");
      }
      double est = 0.0, wsum = 0.0;
      for (int i = 0; i < k; ++i) {
        est += w(i) * vs[static_cast<size_t>(idx[static_cast<size_t>(i)])];
        wsum += w(i);
      }
      const size_t p = static_cast<size_t>(r) * static_cast<size_t>(shape.width) +
                       static_cast<size_t>(c);
      out.values[p] = static_cast<float>(est);
      wsum_err[p] = std::abs(wsum - 1.0);
    }
  });
  out.max_weight_sum_error = *std::max_element(wsum_err.begin(), wsum_err.end());
  return out;
}

}  // namespace pnc::interp
