#pragma once

#include "pnc/grid.hpp"

namespace pnc::verify {

// ---------------------------------------------------------------------------
// Forecast verification. Exceedance is closed (value >= threshold). Metrics
// with empty denominators are reported as missing, never as zero.
// ---------------------------------------------------------------------------

struct ContingencyTable {
  int64_t hits = 0;
  int64_t misses = 0;
  int64_t false_alarms = 0;
  int64_t correct_negatives = 0;

  int64_t total() const { return hits + misses + false_alarms + correct_negatives; }
};

struct VerificationConfig {
  std::vector<double> csi_far_thresholds = {1.0, 8.0};     // mm
  std::vector<double> fss_scales_km = {1.0, 10.0, 20.0};
  double fss_threshold = 1.0;                              // mm
  double extreme_threshold_mm_3h = 5.0;
  double pr_sweep_lo = 0.5, pr_sweep_hi = 10.0, pr_sweep_step = 0.5;
  bool per_frame_mean = false;  // false = pool all frames (default)

  void validate() const {
    auto sorted_positive = [](const std::vector<double>& v) {
      for (size_t i = 0; i < v.size(); ++i) {
        if (v[i] <= 0.0) return false;
        if (i > 0 && v[i] <= v[i - 1]) return false;
      }
      return !v.empty();
    };
    if (!sorted_positive(csi_far_thresholds) || !sorted_positive(fss_scales_km)) {
      throw ValidationError("VerificationConfig: thresholds must be positive and sorted");
    }
    if (fss_threshold <= 0 || extreme_threshold_mm_3h <= 0 || pr_sweep_lo <= 0 ||
        pr_sweep_hi < pr_sweep_lo || pr_sweep_step <= 0) {
      throw ValidationError("VerificationConfig: bad sweep or threshold");
    }
  }
};

struct CatchmentMask {
  int catchment_id = 0;
  int height = 0, width = 0;
  std::vector<uint8_t> mask;  // row-major 0/1

  size_t active_pixels() const {
    size_t n = 0;
    for (uint8_t m : mask) n += m != 0;
    return n;
  }
};

struct PrPoint {
  double threshold = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

struct PrCurve {
  std::vector<PrPoint> points;  // ascending threshold
  double auc = 0.0;
};

namespace detail {

inline void check_pair(const grid::PrecipSequence& pred, const grid::PrecipSequence& obs) {
  if (pred.frames.size() != obs.frames.size()) {
    throw ShapeError("verify: prediction has " + std::to_string(pred.frames.size()) +
                     " frames, observation " + std::to_string(obs.frames.size()));
  }
  if (!(pred.shape() == obs.shape())) {
    throw ShapeError("verify: grid mismatch " + pred.shape().describe() + " vs " +
                     obs.shape().describe());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pixel metrics: MSE, MAE, Pearson correlation. Pooled over frames by
// default; with per_frame_mean, each frame is scored and the scores averaged
// (PCC frames without variance are skipped).
// ---------------------------------------------------------------------------

struct PixelMetrics {
  double mse = 0.0;
  double mae = 0.0;
  std::optional<double> pcc;
};

namespace detail {

struct MomentAccumulator {
  double sp = 0, so = 0, spp = 0, soo = 0, spo = 0, se = 0, sae = 0;
  int64_t n = 0;

  void add(double p, double o) {
    sp += p;
    so += o;
    spp += p * p;
    soo += o * o;
    spo += p * o;
    const double d = p - o;
    se += d * d;
    sae += std::abs(d);
    ++n;
  }

  PixelMetrics finish() const {
    PixelMetrics m;
    m.mse = se / static_cast<double>(n);
    m.mae = sae / static_cast<double>(n);
    const double nn = static_cast<double>(n);
    const double cov = spo - sp * so / nn;
    const double vp = spp - sp * sp / nn;
    const double vo = soo - so * so / nn;
    if (vp > 0.0 && vo > 0.0) m.pcc = cov / std::sqrt(vp * vo);
    return m;
  }
};

}  // namespace detail

inline PixelMetrics pixel_metrics(const grid::PrecipSequence& pred,
                                  const grid::PrecipSequence& obs, bool per_frame_mean = false) {
  detail::check_pair(pred, obs);
  if (!per_frame_mean) {
    detail::MomentAccumulator acc;
    for (size_t f = 0; f < pred.frames.size(); ++f) {
      const auto& pv = pred.frames[f].values;
      const auto& ov = obs.frames[f].values;
      for (size_t i = 0; i < pv.size(); ++i) acc.add(pv[i], ov[i]);
    }
    return acc.finish();
  }
  PixelMetrics out;
  double pcc_sum = 0.0;
  int64_t pcc_n = 0;
  for (size_t f = 0; f < pred.frames.size(); ++f) {
    detail::MomentAccumulator acc;
    const auto& pv = pred.frames[f].values;
    const auto& ov = obs.frames[f].values;
    for (size_t i = 0; i < pv.size(); ++i) acc.add(pv[i], ov[i]);
    const PixelMetrics m = acc.finish();
    out.mse += m.mse / static_cast<double>(pred.frames.size());
    out.mae += m.mae / static_cast<double>(pred.frames.size());
    if (m.pcc) {
      pcc_sum += *m.pcc;
      ++pcc_n;
    }
  }
  if (pcc_n > 0) out.pcc = pcc_sum / static_cast<double>(pcc_n);
  return out;
}

// ---------------------------------------------------------------------------
// Contingency counts, CSI, FAR at a threshold (pooled over frames).
// ---------------------------------------------------------------------------

inline ContingencyTable contingency(const grid::PrecipSequence& pred,
                                    const grid::PrecipSequence& obs, double threshold) {
  if (threshold <= 0.0) throw ValidationError("contingency: threshold must be > 0");
  detail::check_pair(pred, obs);
  ContingencyTable t;
  for (size_t f = 0; f < pred.frames.size(); ++f) {
    const auto& pv = pred.frames[f].values;
    const auto& ov = obs.frames[f].values;
    for (size_t i = 0; i < pv.size(); ++i) {
      const bool p = pv[i] >= threshold;
      const bool o = ov[i] >= threshold;
      t.hits += p && o;
      t.misses += !p && o;
      t.false_alarms += p && !o;
      t.correct_negatives += !p && !o;
    }
  }
  return t;
}

inline std::optional<double> csi(const ContingencyTable& t) {
  const int64_t denom = t.hits + t.misses + t.false_alarms;
  if (denom == 0) return std::nullopt;
  return static_cast<double>(t.hits) / static_cast<double>(denom);
}

inline std::optional<double> far(const ContingencyTable& t) {
  const int64_t denom = t.hits + t.false_alarms;
  if (denom == 0) return std::nullopt;
  return static_cast<double>(t.false_alarms) / static_cast<double>(denom);
}

// ---------------------------------------------------------------------------
// Fractional Skill Score. Binary exceedance fields are box-filtered over
// n x n neighborhoods (n = round(scale/pixel), forced odd by rounding up,
// zero-padded, normalized by n^2), then
//   FSS = 1 - sum (Pf - Po)^2 / (sum Pf^2 + sum Po^2),
// pooled over frames; missing when both fraction fields are all zero.
// ---------------------------------------------------------------------------

namespace detail {

inline int fss_window(double scale_km, double pixel_size_km) {
  int n = static_cast<int>(std::lround(scale_km / pixel_size_km));
  if (n < 1) n = 1;
  if (n % 2 == 0) ++n;
  return n;
}

/// Neighborhood exceedance fractions via a summed-area table.
inline std::vector<double> fraction_field(const std::vector<float>& values, int h, int w,
                                          double threshold, int n) {
  std::vector<double> sat(static_cast<size_t>((h + 1) * (w + 1)), 0.0);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const double b = values[static_cast<size_t>(r) * w + c] >= threshold ? 1.0 : 0.0;
      sat[static_cast<size_t>((r + 1) * (w + 1) + (c + 1))] =
          b + sat[static_cast<size_t>(r * (w + 1) + (c + 1))] +
          sat[static_cast<size_t>((r + 1) * (w + 1) + c)] -
          sat[static_cast<size_t>(r * (w + 1) + c)];
    }
  }
  const int half = n / 2;
  std::vector<double> out(static_cast<size_t>(h) * static_cast<size_t>(w));
  const double inv = 1.0 / (static_cast<double>(n) * n);
  for (int r = 0; r < h; ++r) {
    const int r0 = std::max(0, r - half), r1 = std::min(h - 1, r + half);
    for (int c = 0; c < w; ++c) {
      const int c0 = std::max(0, c - half), c1 = std::min(w - 1, c + half);
      const double s = sat[static_cast<size_t>((r1 + 1) * (w + 1) + (c1 + 1))] -
                       sat[static_cast<size_t>(r0 * (w + 1) + (c1 + 1))] -
                       sat[static_cast<size_t>((r1 + 1) * (w + 1) + c0)] +
                       sat[static_cast<size_t>(r0 * (w + 1) + c0)];
      out[static_cast<size_t>(r) * w + c] = s * inv;
    }
  }
  return out;
}

}  // namespace detail

inline std::optional<double> fss(const grid::PrecipSequence& pred,
                                 const grid::PrecipSequence& obs, double threshold,
                                 double scale_km, double pixel_size_km = 1.0) {
  if (scale_km < pixel_size_km) {
    throw ValidationError("fss: scale_km must be >= pixel_size_km");
  }
  detail::check_pair(pred, obs);
  const int n = detail::fss_window(scale_km, pixel_size_km);
  const int h = pred.shape().height, w = pred.shape().width;
  double num = 0.0, den = 0.0;
  for (size_t f = 0; f < pred.frames.size(); ++f) {
    const auto pf = detail::fraction_field(pred.frames[f].values, h, w, threshold, n);
    const auto po = detail::fraction_field(obs.frames[f].values, h, w, threshold, n);
    for (size_t i = 0; i < pf.size(); ++i) {
      num += (pf[i] - po[i]) * (pf[i] - po[i]);
      den += pf[i] * pf[i] + po[i] * po[i];
    }
  }
  if (den == 0.0) return std::nullopt;
  return 1.0 - num / den;
}

// ---------------------------------------------------------------------------
// Catchment reduction: mean over masked pixels, then over the frames of a
// 3-hour window, reported as mm/3h (mean mm/h x 3 h).
// ---------------------------------------------------------------------------

inline std::vector<double> catchment_reduce(const grid::PrecipSequence& seq,
                                            const std::vector<CatchmentMask>& masks) {
  const int span_min = static_cast<int>(seq.frames.size()) * seq.step_minutes;
  if (span_min != 180) {
    throw ArityError("catchment_reduce: sequence spans " + std::to_string(span_min) +
                     " min, expected a 3 h window");
  }
  const auto& shape = seq.shape();
  std::vector<double> out;
  out.reserve(masks.size());
  for (const auto& m : masks) {
    if (m.height != shape.height || m.width != shape.width) {
      throw MaskError("catchment_reduce: mask " + std::to_string(m.catchment_id) +
                      " shape mismatch");
    }
    const size_t active = m.active_pixels();
    if (active == 0) {
      throw MaskError("catchment_reduce: mask " + std::to_string(m.catchment_id) + " is empty");
    }
    double frame_mean_sum = 0.0;
    for (const auto& frame : seq.frames) {
      double s = 0.0;
      for (size_t i = 0; i < frame.values.size(); ++i) {
        if (m.mask[i]) s += frame.values[i];
      }
      frame_mean_sum += s / static_cast<double>(active);
    }
    out.push_back(frame_mean_sum / static_cast<double>(seq.frames.size()) * 3.0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Extreme-event precision-recall. Ground truth: obs mean > 5 mm/3h (strict).
// Prediction positive at swept threshold tau: pred mean >= tau. Points are
// produced in descending threshold order (recall non-decreasing); AUC is the
// trapezoid over exactly those points, no synthetic endpoints. With no
// positive predictions at a threshold, precision is vacuously 1.
// ---------------------------------------------------------------------------

inline PrCurve extreme_pr_curve(const std::vector<double>& pred_means_mm_3h,
                                const std::vector<double>& obs_means_mm_3h,
                                const VerificationConfig& cfg = {}) {
  cfg.validate();
  if (pred_means_mm_3h.size() != obs_means_mm_3h.size()) {
    throw ShapeError("extreme_pr_curve: prediction/observation count mismatch");
  }
  std::vector<bool> label(obs_means_mm_3h.size());
  int64_t positives = 0;
  for (size_t i = 0; i < obs_means_mm_3h.size(); ++i) {
    label[i] = obs_means_mm_3h[i] > cfg.extreme_threshold_mm_3h;
    positives += label[i];
  }
  if (positives == 0) {
    throw ValidationError(
        "extreme_pr_curve: no ground-truth extremes; recall is undefined "
        "(provide a dataset containing events above the extreme threshold)");
  }

  std::vector<double> thresholds;
  for (double t = cfg.pr_sweep_lo; t <= cfg.pr_sweep_hi + 1e-12; t += cfg.pr_sweep_step) {
    thresholds.push_back(t);
  }

  PrCurve curve;
  curve.points.resize(thresholds.size());
  double auc = 0.0;
  double prev_recall = 0.0, prev_precision = 1.0;
  bool have_prev = false;
  // sweep descending so recall is non-decreasing along the integration path
  for (size_t k = thresholds.size(); k-- > 0;) {
    const double tau = thresholds[k];
    int64_t tp = 0, fp = 0;
    for (size_t i = 0; i < pred_means_mm_3h.size(); ++i) {
      const bool p = pred_means_mm_3h[i] >= tau;
      tp += p && label[i];
      fp += p && !label[i];
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(positives);
    const double precision = (tp + fp) == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    if (have_prev) {
      auc += (recall - prev_recall) * 0.5 * (precision + prev_precision);
    }
    prev_recall = recall;
    prev_precision = precision;
    have_prev = true;
    curve.points[k] = {tau, precision, recall};
  }
  curve.auc = std::clamp(auc, 0.0, 1.0);
  return curve;
}

// ---------------------------------------------------------------------------
// Mask helpers (PNWG kind=2, C=1 files with 0/1 values).
// ---------------------------------------------------------------------------

inline std::vector<CatchmentMask> masks_from_gridded(const grid::GriddedSeries& g) {
  if (g.c != 1) throw MaskError("masks: expected C=1, got " + std::to_string(g.c));
  std::vector<CatchmentMask> out;
  const size_t per = static_cast<size_t>(g.h) * static_cast<size_t>(g.w);
  for (int t = 0; t < g.t; ++t) {
    CatchmentMask m;
    m.catchment_id = t;
    m.height = g.h;
    m.width = g.w;
    m.mask.resize(per);
    for (size_t i = 0; i < per; ++i) {
      m.mask[i] = g.values[static_cast<size_t>(t) * per + i] >= 0.5f ? 1 : 0;
    }
    if (m.active_pixels() == 0) {
      throw MaskError("masks: catchment " + std::to_string(t) + " is empty");
    }
    out.push_back(std::move(m));
  }
  return out;
}

inline grid::GriddedSeries masks_to_gridded(const std::vector<CatchmentMask>& masks) {
  if (masks.empty()) throw MaskError("masks: none to write");
  grid::GriddedSeries g;
  g.t = static_cast<int>(masks.size());
  g.h = masks[0].height;
  g.w = masks[0].width;
  g.c = 1;
  g.step_minutes = 30;
  const size_t per = static_cast<size_t>(g.h) * static_cast<size_t>(g.w);
  g.values.resize(per * masks.size());
  for (size_t t = 0; t < masks.size(); ++t) {
    for (size_t i = 0; i < per; ++i) {
      g.values[t * per + i] = masks[t].mask[i] ? 1.0f : 0.0f;
    }
  }
  return g;
}

}  // namespace pnc::verify
