#pragma once

#include <Eigen/Sparse>

#include "pnc/physics.hpp"
#include "pnc/verify.hpp"

namespace pnc::synth {

// ---------------------------------------------------------------------------
// Synthetic weather with analytically known physics residuals.
//
// Precipitation is a set of advecting Gaussian blobs over a drizzle floor.
// Humidity is evolved by the same discrete operator the residual stencil
// uses (backward-Euler advection plus the ET - P source), and the stored
// precipitation is then re-derived from the residual identity P = S so the
// discrete moisture residual of the stored f32 fields is zero up to the
// rounding of P itself (~1e-7 mm/h), not of the kappa-amplified humidity.
// ---------------------------------------------------------------------------

enum class ConservationMode { kExact, kNoisy };

struct SynthConfig {
  grid::GridShape shape{32, 32, 1};
  int n_sequences = 8;
  int n_cond = 3;
  int m_pred = 6;
  int step_minutes = 30;
  uint64_t seed = 0;
  double pixel_size_km = 1.0;
  double advection_speed = 2.0;  // m/s, magnitude of the total transport wind
  int blob_count = 3;
  double blob_radius_km = 4.0;
  double blob_intensity = 2.0;  // peak mm/h of background blobs
  double extreme_fraction = 0.05;
  double extreme_target_lo = 7.0;   // mm/3h catchment mean for injected extremes
  double extreme_target_hi = 12.0;
  double extreme_radius_km = 8.0;
  int n_catchments = 4;
  ConservationMode mode = ConservationMode::kExact;
  double noise_sigma = 1.0;    // mm/h, noisy mode
  double drizzle_floor = 0.01; // mm/h, keeps the derived precipitation positive
  physics::ResidualConfig residual;

  int n_frames() const { return n_cond + m_pred; }

  void validate() const {
    shape.validate();
    if (n_sequences < 1 || n_cond < 1 || m_pred < 1) {
      throw ValidationError("synth: counts must be >= 1");
    }
    if (extreme_fraction < 0.0 || extreme_fraction > 1.0) {
      throw ValidationError("synth: extreme_fraction must be in [0,1]");
    }
    if (n_catchments < 1) throw ValidationError("synth: need at least one catchment");
    if (m_pred * step_minutes != 180) {
      throw ValidationError("synth: prediction window must span 3 h for extreme labeling");
    }
    residual.validate();
  }
};

struct SynthLabel {
  int sequence_id = 0;
  int catchment_id = 0;
  double obs_mm_per_3h = 0.0;
  bool extreme = false;
};

struct SynthSequence {
  grid::PrecipSequence precip;             // n_cond + m_pred frames
  std::vector<grid::MeteoStack> meteo;     // one stack per frame
};

struct SynthDataset {
  std::vector<SynthSequence> sequences;
  std::vector<verify::CatchmentMask> masks;
  std::vector<SynthLabel> labels;
};

namespace detail {

struct Blob {
  double x_km = 0.0, y_km = 0.0;  // center at t = 0
  double radius_km = 1.0;
  double amplitude = 1.0;  // peak mm/h
};

/// Blob field at time t (minutes); centers drift with the wind and wrap
/// around the domain torus so rain stays in frame.
inline void add_blob(std::vector<double>& field, const grid::GridShape& shape, double pixel_km,
                     const Blob& b, double u_km_min, double v_km_min, double t_min, bool wrap) {
  const double domain_x = shape.width * pixel_km;
  const double domain_y = shape.height * pixel_km;
  double cx = b.x_km + u_km_min * t_min;
  double cy = b.y_km + v_km_min * t_min;
  if (wrap) {
    cx = std::fmod(std::fmod(cx, domain_x) + domain_x, domain_x);
    cy = std::fmod(std::fmod(cy, domain_y) + domain_y, domain_y);
  }
  const double inv2r2 = 1.0 / (2.0 * b.radius_km * b.radius_km);
  for (int r = 0; r < shape.height; ++r) {
    for (int c = 0; c < shape.width; ++c) {
      double dx = std::abs(c * pixel_km - cx);
      double dy = std::abs(r * pixel_km - cy);
      if (wrap) {
        dx = std::min(dx, domain_x - dx);
        dy = std::min(dy, domain_y - dy);
      }
      field[static_cast<size_t>(r) * shape.width + c] +=
          b.amplitude * std::exp(-(dx * dx + dy * dy) * inv2r2);
    }
  }
}

/// Backward-Euler advection operator (I + dt*(U d/dx + V d/dy)) with the
/// same central/one-sided stencils as the residual, factorized once.
class ImplicitAdvection {
 public:
  ImplicitAdvection(const grid::GridShape& shape, double u_mps, double v_mps,
                    const physics::ResidualConfig& rc)
      : h_(shape.height), w_(shape.width) {
    const double dt_s = rc.dt_minutes * 60.0;
    const double ax = u_mps * dt_s / (rc.dx_km * 1000.0);
    const double ay = v_mps * dt_s / (rc.dy_km * 1000.0);
    using Trip = Eigen::Triplet<double>;
    std::vector<Trip> trips;
    auto idx = [&](int r, int c) { return r * w_ + c; };
    for (int r = 0; r < h_; ++r) {
      for (int c = 0; c < w_; ++c) {
        const int i = idx(r, c);
        double diag = 1.0;
        if (w_ > 1) {
          if (c == 0) {
            diag += -ax;
            trips.emplace_back(i, idx(r, 1), ax);
          } else if (c == w_ - 1) {
            diag += ax;
            trips.emplace_back(i, idx(r, c - 1), -ax);
          } else {
            trips.emplace_back(i, idx(r, c + 1), ax / 2.0);
            trips.emplace_back(i, idx(r, c - 1), -ax / 2.0);
          }
        }
        if (h_ > 1) {
          if (r == 0) {
            diag += -ay;
            trips.emplace_back(i, idx(1, c), ay);
          } else if (r == h_ - 1) {
            diag += ay;
            trips.emplace_back(i, idx(r - 1, c), -ay);
          } else {
            trips.emplace_back(i, idx(r + 1, c), ay / 2.0);
            trips.emplace_back(i, idx(r - 1, c), -ay / 2.0);
          }
        }
        trips.emplace_back(i, i, diag);
      }
    }
    Eigen::SparseMatrix<double> mat(h_ * w_, h_ * w_);
    mat.setFromTriplets(trips.begin(), trips.end());
    solver_.compute(mat);
    if (solver_.info() != Eigen::Success) {
      throw ValidationError("synth: implicit advection operator is singular");
    }
  }

  Eigen::VectorXd solve(const Eigen::VectorXd& rhs) const { return solver_.solve(rhs); }

 private:
  int h_, w_;
  Eigen::SparseLU<Eigen::SparseMatrix<double>> solver_;
};

}  // namespace detail

/// Deterministic Voronoi catchments from seeded centers.
inline std::vector<verify::CatchmentMask> make_catchment_masks(const grid::GridShape& shape,
                                                               int n_catchments, uint64_t seed,
                                                               double pixel_size_km = 1.0) {
  Rng rng(mix_seed(seed, 0xCA7C4));
  std::vector<double> cx(static_cast<size_t>(n_catchments)), cy(static_cast<size_t>(n_catchments));
  for (int k = 0; k < n_catchments; ++k) {
    cx[static_cast<size_t>(k)] = rng.uniform() * shape.width * pixel_size_km;
    cy[static_cast<size_t>(k)] = rng.uniform() * shape.height * pixel_size_km;
  }
  std::vector<verify::CatchmentMask> masks(static_cast<size_t>(n_catchments));
  for (int k = 0; k < n_catchments; ++k) {
    masks[static_cast<size_t>(k)].catchment_id = k;
    masks[static_cast<size_t>(k)].height = shape.height;
    masks[static_cast<size_t>(k)].width = shape.width;
    masks[static_cast<size_t>(k)].mask.assign(shape.pixel_count(), 0);
  }
  for (int r = 0; r < shape.height; ++r) {
    for (int c = 0; c < shape.width; ++c) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int k = 0; k < n_catchments; ++k) {
        const double dx = c * pixel_size_km - cx[static_cast<size_t>(k)];
        const double dy = r * pixel_size_km - cy[static_cast<size_t>(k)];
        const double d = dx * dx + dy * dy;
        if (d < best_d) {
          best_d = d;
          best = k;
        }
      }
      masks[static_cast<size_t>(best)].mask[static_cast<size_t>(r) * shape.width + c] = 1;
    }
  }
  // a degenerate Voronoi cell would make catchment_reduce reject the mask
  for (const auto& m : masks) {
    if (m.active_pixels() == 0) {
      throw ValidationError("synth: catchment " + std::to_string(m.catchment_id) +
                            " has no pixels; use fewer catchments or a larger grid");
    }
  }
  return masks;
}

inline SynthDataset generate(const SynthConfig& cfg) {
  cfg.validate();
  SynthDataset ds;
  ds.masks = make_catchment_masks(cfg.shape, cfg.n_catchments, cfg.seed, cfg.pixel_size_km);

  const int T = cfg.n_frames();
  const size_t pixels = cfg.shape.pixel_count();
  const int h = cfg.shape.height, w = cfg.shape.width;
  const double kappa = cfg.residual.humidity_to_mm_per_h();
  const double dt_s = cfg.residual.dt_minutes * 60.0;

  // which sequences carry an injected extreme (seeded shuffle)
  const int n_extreme = static_cast<int>(std::lround(cfg.extreme_fraction * cfg.n_sequences));
  std::vector<int> order(static_cast<size_t>(cfg.n_sequences));
  std::iota(order.begin(), order.end(), 0);
  Rng pick_rng(mix_seed(cfg.seed, 0x5E1EC7));
  pick_rng.shuffle(order);
  std::vector<bool> is_extreme(static_cast<size_t>(cfg.n_sequences), false);
  for (int i = 0; i < n_extreme; ++i) is_extreme[static_cast<size_t>(order[static_cast<size_t>(i)])] = true;

  for (int s = 0; s < cfg.n_sequences; ++s) {
    Rng rng(mix_seed(cfg.seed, 0x5E0 + static_cast<uint64_t>(s)));
    SynthSequence seq;

    // constant transport wind; halved between the 10 m and 100 m levels so
    // their sum is the advecting wind of the residual stencil
    const double angle = rng.uniform() * 6.283185307179586;
    const double u_tot = cfg.advection_speed * std::cos(angle);
    const double v_tot = cfg.advection_speed * std::sin(angle);
    const double u_km_min = u_tot * 60.0 / 1000.0;
    const double v_km_min = v_tot * 60.0 / 1000.0;

    // background blobs
    std::vector<detail::Blob> blobs;
    for (int b = 0; b < cfg.blob_count; ++b) {
      detail::Blob blob;
      blob.x_km = rng.uniform() * w * cfg.pixel_size_km;
      blob.y_km = rng.uniform() * h * cfg.pixel_size_km;
      blob.radius_km = cfg.blob_radius_km * (0.7 + 0.6 * rng.uniform());
      blob.amplitude = cfg.blob_intensity * (0.5 + rng.uniform());
      blobs.push_back(blob);
    }

    // raw background precipitation per frame
    std::vector<std::vector<double>> p_raw(static_cast<size_t>(T),
                                           std::vector<double>(pixels, cfg.drizzle_floor));
    for (int t = 0; t < T; ++t) {
      for (const auto& b : blobs) {
        detail::add_blob(p_raw[static_cast<size_t>(t)], cfg.shape, cfg.pixel_size_km, b,
                         u_km_min, v_km_min, t * cfg.step_minutes, true);
      }
    }

    // keep background catchment means clear of the extreme threshold
    {
      double worst = 0.0;
      for (const auto& m : ds.masks) {
        const size_t active = m.active_pixels();
        double mean_sum = 0.0;
        for (int t = cfg.n_cond; t < T; ++t) {
          double s2 = 0.0;
          for (size_t i = 0; i < pixels; ++i) {
            if (m.mask[i]) s2 += p_raw[static_cast<size_t>(t)][i];
          }
          mean_sum += s2 / static_cast<double>(active);
        }
        worst = std::max(worst, mean_sum / cfg.m_pred * 3.0);
      }
      if (worst > 4.0) {
        const double scale = 4.0 / worst;
        for (auto& frame : p_raw) {
          for (auto& v : frame) v = cfg.drizzle_floor + (v - cfg.drizzle_floor) * scale;
        }
      }
    }

    // injected extreme: a wide blob crossing a catchment centroid mid-window,
    // calibrated so the observed 3 h catchment mean lands on the target
    if (is_extreme[static_cast<size_t>(s)]) {
      const int target_catchment = static_cast<int>(rng.uniform_int(cfg.n_catchments));
      const auto& m = ds.masks[static_cast<size_t>(target_catchment)];
      double cx = 0.0, cy = 0.0;
      for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
          if (m.mask[static_cast<size_t>(r) * w + c]) {
            cx += c * cfg.pixel_size_km;
            cy += r * cfg.pixel_size_km;
          }
        }
      }
      const double active = static_cast<double>(m.active_pixels());
      cx /= active;
      cy /= active;
      const double t_mid = (cfg.n_cond + T - 1) / 2.0 * cfg.step_minutes;
      detail::Blob eb;
      eb.radius_km = cfg.extreme_radius_km;
      eb.amplitude = 1.0;
      eb.x_km = cx - u_km_min * t_mid;  // so the center crosses the centroid mid-window
      eb.y_km = cy - v_km_min * t_mid;

      double unit_mean_sum = 0.0;
      std::vector<double> unit(pixels);
      for (int t = cfg.n_cond; t < T; ++t) {
        std::fill(unit.begin(), unit.end(), 0.0);
        detail::add_blob(unit, cfg.shape, cfg.pixel_size_km, eb, u_km_min, v_km_min,
                         t * cfg.step_minutes, true);
        double s2 = 0.0;
        for (size_t i = 0; i < pixels; ++i) {
          if (m.mask[i]) s2 += unit[i];
        }
        unit_mean_sum += s2 / active;
      }
      const double unit_mm_3h = unit_mean_sum / cfg.m_pred * 3.0;
      const double target =
          cfg.extreme_target_lo + (cfg.extreme_target_hi - cfg.extreme_target_lo) * rng.uniform();
      eb.amplitude = target / std::max(unit_mm_3h, 1e-9);
      for (int t = 0; t < T; ++t) {
        detail::add_blob(p_raw[static_cast<size_t>(t)], cfg.shape, cfg.pixel_size_km, eb,
                         u_km_min, v_km_min, t * cfg.step_minutes, true);
      }
    }

    // meteorology: smooth temperature/radiation patterns, constant winds
    const double temp_base = 12.0 + 8.0 * rng.uniform();
    const double phase = rng.uniform() * 6.283185307179586;
    std::vector<grid::MeteoStack> stacks(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) {
      auto& st = stacks[static_cast<size_t>(t)];
      st.shape = grid::GridShape{h, w, grid::MeteoStack::kFieldCount};
      st.pixel_size_km = static_cast<float>(cfg.pixel_size_km);
      st.timestamp_min = t * cfg.step_minutes;
      for (int f = 0; f < grid::MeteoStack::kFieldCount; ++f) st.field(f).resize(pixels);
      for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
          const size_t i = static_cast<size_t>(r) * w + c;
          const double sx = std::sin(6.283185307179586 * c / w + phase);
          const double cyv = std::cos(6.283185307179586 * r / h + phase);
          st.temp[i] = static_cast<float>(temp_base + 3.0 * sx * cyv);
          st.dew[i] = st.temp[i] - 2.0f;
          st.r_s[i] = static_cast<float>(std::max(0.0, 320.0 + 160.0 * sx * cyv));
          st.u10[i] = static_cast<float>(u_tot / 2.0);
          st.u100[i] = static_cast<float>(u_tot / 2.0);
          st.v10[i] = static_cast<float>(v_tot / 2.0);
          st.v100[i] = static_cast<float>(v_tot / 2.0);
        }
      }
    }

    // initial humidity: smooth positive field with ample headroom for the
    // rain sink (heaviest drawdown is ~dt*P/kappa per step)
    std::vector<float> q_prev(pixels);
    {
      const double p1 = rng.uniform() * 6.283185307179586;
      const double p2 = rng.uniform() * 6.283185307179586;
      for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
          const size_t i = static_cast<size_t>(r) * w + c;
          q_prev[i] = static_cast<float>(0.008 +
                                         0.0012 * std::sin(6.283185307179586 * c / w + p1) *
                                             std::cos(6.283185307179586 * r / h + p2));
        }
      }
    }
    for (size_t i = 0; i < pixels; ++i) stacks[0].q[i] = q_prev[i];

    detail::ImplicitAdvection advect(cfg.shape, u_tot, v_tot, cfg.residual);
    Rng noise_rng(mix_seed(cfg.seed, 0x4015E + static_cast<uint64_t>(s)));

    std::vector<grid::PrecipFrame> frames;
    frames.reserve(static_cast<size_t>(T));
    {
      // frame 0 is never scored (no predecessor); store the raw field
      std::vector<float> p0(pixels);
      for (size_t i = 0; i < pixels; ++i) p0[i] = static_cast<float>(p_raw[0][i]);
      frames.push_back(grid::make_precip_frame(grid::GridShape{h, w, 1}, std::move(p0), 0));
    }

    for (int t = 1; t < T; ++t) {
      auto& st = stacks[static_cast<size_t>(t)];
      // rhs = q_prev + dt * source; source (ET - P) converted from mm/h to
      // humidity per second via 1/(3600 * column_mass)
      Eigen::VectorXd rhs(static_cast<int64_t>(pixels));
      for (size_t i = 0; i < pixels; ++i) {
        const double et = physics::makkink_et_mm_per_h({st.temp[i], st.r_s[i]});
        rhs(static_cast<int64_t>(i)) =
            static_cast<double>(q_prev[i]) +
            dt_s * ((et - p_raw[static_cast<size_t>(t)][i]) / 3600.0) / cfg.residual.column_mass;
      }
      Eigen::VectorXd q_next = advect.solve(rhs);
      for (size_t i = 0; i < pixels; ++i) {
        st.q[i] = static_cast<float>(std::max(1e-6, q_next(static_cast<int64_t>(i))));
      }

      // re-derive the stored precipitation from the residual identity
      auto implied = physics::residual_source_term(q_prev, st.q, st, cfg.residual);
      std::vector<float> p_store(pixels);
      if (cfg.mode == ConservationMode::kNoisy) {
        const double lift = 4.0 * cfg.noise_sigma;
        for (size_t i = 0; i < pixels; ++i) {
          double nu = cfg.noise_sigma * noise_rng.normal();
          nu = std::clamp(nu, -lift, lift);
          p_store[i] = static_cast<float>(std::max(0.0, implied[i] + lift + nu));
        }
      } else {
        for (size_t i = 0; i < pixels; ++i) {
          p_store[i] = static_cast<float>(std::max(0.0, implied[i]));
        }
      }
      frames.push_back(grid::make_precip_frame(grid::GridShape{h, w, 1}, std::move(p_store),
                                               t * cfg.step_minutes));
      q_prev = st.q;
    }

    seq.precip = grid::make_precip_sequence(std::move(frames), cfg.step_minutes);
    seq.meteo = std::move(stacks);

    // labels from the observed prediction window
    auto [cond, target_seq] = grid::split_sequence(seq.precip, cfg.n_cond, cfg.m_pred);
    (void)cond;
    const auto means = verify::catchment_reduce(target_seq, ds.masks);
    for (int k = 0; k < cfg.n_catchments; ++k) {
      ds.labels.push_back({s, k, means[static_cast<size_t>(k)],
                           means[static_cast<size_t>(k)] > 5.0});
    }
    ds.sequences.push_back(std::move(seq));
  }
  return ds;
}

/// Sample station observations from a meteo stack at n distinct pixels.
/// Station coordinates coincide with pixel centers, so kriging them back
/// reproduces the field exactly at those pixels.
inline std::vector<grid::StationObservation> station_subsample(const grid::MeteoStack& stack,
                                                               int n_stations, uint64_t seed) {
  const size_t pixels = stack.shape.pixel_count();
  if (n_stations < 1 || static_cast<size_t>(n_stations) > pixels) {
    throw ValidationError("station_subsample: n_stations must be in [1, H*W]");
  }
  std::vector<int64_t> order(pixels);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<grid::StationObservation> obs;
  obs.reserve(static_cast<size_t>(n_stations) * grid::MeteoStack::kFieldCount);
  for (int i = 0; i < n_stations; ++i) {
    const int64_t p = order[static_cast<size_t>(i)];
    const int r = static_cast<int>(p / stack.shape.width);
    const int c = static_cast<int>(p % stack.shape.width);
    for (int f = 0; f < grid::MeteoStack::kFieldCount; ++f) {
      obs.push_back({"px_" + std::to_string(p), c * static_cast<double>(stack.pixel_size_km),
                     r * static_cast<double>(stack.pixel_size_km), stack.timestamp_min,
                     grid::MeteoStack::kFieldNames[static_cast<size_t>(f)],
                     static_cast<double>(stack.field(f)[static_cast<size_t>(p)])});
    }
  }
  return obs;
}

}  // namespace pnc::synth
