#include <catch2/catch_amalgamated.hpp>

#include "pnc/ingest.hpp"

using namespace pnc;
using namespace pnc::interp;
using pnc::grid::GridShape;
using pnc::grid::StationObservation;

TEST_CASE("cubic spline reproduces knots exactly", "[interp]") {
  std::vector<std::pair<int, double>> knots = {{0, 1.0}, {60, 3.0}, {120, 5.0}};
  auto v = cubic_time_interp(knots, {0, 60, 120});
  CHECK(v[0] == Catch::Approx(1.0).epsilon(1e-12));
  CHECK(v[1] == Catch::Approx(3.0).epsilon(1e-12));
  CHECK(v[2] == Catch::Approx(5.0).epsilon(1e-12));
}

TEST_CASE("cubic spline reproduces linear data exactly", "[interp]") {
  // y = 2 + t/30 sampled at four knots; any interior query must be linear
  std::vector<std::pair<int, double>> knots;
  for (int t : {0, 60, 120, 180}) knots.emplace_back(t, 2.0 + t / 30.0);
  auto v = cubic_time_interp(knots, {15, 45, 90, 150, 171});
  for (size_t i = 0; i < v.size(); ++i) {
    const double t = std::vector<int>{15, 45, 90, 150, 171}[i];
    CHECK(v[i] == Catch::Approx(2.0 + t / 30.0).margin(1e-12));
  }
}

TEST_CASE("three-knot natural spline matches the hand-solved system", "[interp]") {
  // knots (0,0),(60,1),(120,0): the single interior second derivative is
  // M1 = -1/1200, giving S(30) = 0.75 - 0.0625 = 0.6875.
  std::vector<std::pair<int, double>> knots = {{0, 0.0}, {60, 1.0}, {120, 0.0}};
  auto v = cubic_time_interp(knots, {30});
  CHECK(v[0] == Catch::Approx(0.6875).epsilon(1e-12));
}

TEST_CASE("spline rejects bad inputs", "[interp]") {
  CHECK_THROWS_AS(cubic_time_interp({{0, 1.0}}, {0}), InsufficientDataError);
  CHECK_THROWS_AS(cubic_time_interp({{0, 1.0}, {60, 2.0}}, {-1}), ExtrapolationError);
  CHECK_THROWS_AS(cubic_time_interp({{0, 1.0}, {60, 2.0}}, {61}), ExtrapolationError);
  CHECK_THROWS_AS(cubic_time_interp({{0, 1.0}, {0, 2.0}}, {0}), ValidationError);
}

TEST_CASE("knot exactness holds to 1e-9 relative on random splines", "[interp]") {
  Rng rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 2 + static_cast<int>(rng.uniform_int(10));
    std::vector<std::pair<int, double>> knots;
    int t = 0;
    for (int i = 0; i < n; ++i) {
      knots.emplace_back(t, rng.normal(0.0, 10.0));
      t += 30 + static_cast<int>(rng.uniform_int(90));
    }
    std::vector<int> query;
    for (const auto& [kt, kv] : knots) query.push_back(kt);
    auto v = cubic_time_interp(knots, query);
    for (size_t i = 0; i < v.size(); ++i) {
      CHECK(std::abs(v[i] - knots[i].second) <=
            1e-9 * std::max(1.0, std::abs(knots[i].second)));
    }
  }
}

TEST_CASE("variogram models satisfy their invariants", "[interp]") {
  for (auto kind : {VariogramKind::kSpherical, VariogramKind::kExponential,
                    VariogramKind::kGaussian}) {
    VariogramModel m{kind, 0.2, 2.0, 50.0};
    CHECK(m(0.0) == Catch::Approx(0.2));
    double prev = -1.0;
    for (double h = 0.0; h <= 250.0; h += 1.0) {
      const double g = m(h);
      CHECK(g >= prev - 1e-12);
      prev = g;
    }
    CHECK(m(1e6) == Catch::Approx(2.0).margin(1e-6));
  }
}

TEST_CASE("variogram fit recovers a known spherical model", "[interp]") {
  // Sample a Gaussian random field with covariance C(h) = sill - gamma(h)
  // at 200 random sites (Cholesky factorization is the generator oracle).
  const double sill = 2.0, range = 50.0;
  VariogramModel truth{VariogramKind::kSpherical, 0.0, sill, range};
  Rng rng(23);
  const int n = 200;
  std::vector<double> xs(n), ys(n);
  for (int i = 0; i < n; ++i) {
    xs[i] = rng.uniform() * 300.0;
    ys[i] = rng.uniform() * 300.0;
  }
  Eigen::MatrixXd cov(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const double dx = xs[i] - xs[j], dy = ys[i] - ys[j];
      cov(i, j) = sill - truth(std::sqrt(dx * dx + dy * dy));
    }
    cov(i, i) += 1e-9;
  }
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  REQUIRE(llt.info() == Eigen::Success);
  Eigen::VectorXd z(n);
  for (int i = 0; i < n; ++i) z(i) = rng.normal();
  Eigen::VectorXd field = llt.matrixL() * z;

  std::vector<StationObservation> obs;
  for (int i = 0; i < n; ++i) obs.push_back({"s" + std::to_string(i), xs[i], ys[i], 0, "v", field(i)});
  auto fitted = fit_variogram(obs, VariogramKind::kSpherical);
  CHECK(fitted.sill == Catch::Approx(sill).epsilon(0.20));
  CHECK(fitted.range_km == Catch::Approx(range).epsilon(0.30));
}

TEST_CASE("variogram fit edge cases", "[interp]") {
  std::vector<StationObservation> equal = {
      {"a", 0, 0, 0, "v", 5.0}, {"b", 10, 0, 0, "v", 5.0},
      {"c", 0, 10, 0, "v", 5.0}, {"d", 10, 10, 0, "v", 5.0}};
  CHECK_THROWS_AS(fit_variogram(equal), DegenerateFieldSignal);

  std::vector<StationObservation> three = {
      {"a", 0, 0, 0, "v", 1.0}, {"b", 10, 0, 0, "v", 2.0}, {"c", 0, 10, 0, "v", 3.0}};
  CHECK_THROWS_AS(fit_variogram(three), InsufficientDataError);
}

TEST_CASE("single station kriges to a constant grid", "[interp]") {
  std::vector<StationObservation> obs = {{"only", 3.0, 3.0, 0, "v", 5.0}};
  KrigingConfig cfg;
  auto field = krige_to_grid(obs, GridShape{6, 6, 1}, cfg);
  for (float v : field.values) CHECK(v == 5.0f);
}

TEST_CASE("equidistant pixel between two stations averages them", "[interp]") {
  std::vector<StationObservation> obs = {{"a", 0.0, 2.0, 0, "v", 0.0},
                                         {"b", 4.0, 2.0, 0, "v", 10.0}};
  KrigingConfig cfg;
  cfg.variogram = VariogramModel{VariogramKind::kSpherical, 0.0, 1.0, 100.0};
  auto field = krige_to_grid(obs, GridShape{5, 5, 1}, cfg);
  // pixel (2,2) sits exactly between the stations
  CHECK(field.values[2 * 5 + 2] == Catch::Approx(5.0).margin(1e-5));
}

TEST_CASE("four-corner kriging matches the hand-solved 5x5 system", "[interp]") {
  // Stations at (0,0),(10,0),(0,10),(10,10) valued 1,2,3,4; spherical
  // sill 1, range 100, nugget 0. At the center the weights are 0.25 each;
  // at (x=2,y=3) km the solved system gives 1.7987404269300789.
  std::vector<StationObservation> obs = {{"a", 0, 0, 0, "v", 1.0},
                                         {"b", 10, 0, 0, "v", 2.0},
                                         {"c", 0, 10, 0, "v", 3.0},
                                         {"d", 10, 10, 0, "v", 4.0}};
  KrigingConfig cfg;
  cfg.variogram = VariogramModel{VariogramKind::kSpherical, 0.0, 1.0, 100.0};
  auto field = krige_to_grid(obs, GridShape{11, 11, 1}, cfg);
  CHECK(field.values[5 * 11 + 5] == Catch::Approx(2.5).margin(1e-6));
  CHECK(field.values[3 * 11 + 2] == Catch::Approx(1.7987404269300789).margin(1e-6));
  CHECK(field.max_weight_sum_error < 1e-8);
}

TEST_CASE("kriging reproduces station values exactly with zero nugget", "[interp]") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 3 + static_cast<int>(rng.uniform_int(10));
    std::vector<StationObservation> obs;
    std::set<std::pair<int, int>> used;
    for (int i = 0; i < n; ++i) {
      int x, y;
      do {
        x = static_cast<int>(rng.uniform_int(8));
        y = static_cast<int>(rng.uniform_int(8));
      } while (!used.insert({x, y}).second);
      obs.push_back({"s" + std::to_string(i), static_cast<double>(x), static_cast<double>(y), 0,
                     "v", rng.uniform() * 10.0});
    }
    KrigingConfig cfg;
    cfg.variogram = VariogramModel{VariogramKind::kSpherical, 0.0, 1.0, 20.0};
    auto field = krige_to_grid(obs, GridShape{8, 8, 1}, cfg);
    CHECK(field.max_weight_sum_error < 1e-8);
    for (const auto& o : obs) {
      const float got = field.values[static_cast<size_t>(o.y_km) * 8 + static_cast<size_t>(o.x_km)];
      CHECK(std::abs(got - o.value) <= 1e-6 * std::max(1.0, std::abs(o.value)));
    }
  }
}

TEST_CASE("constant station field kriges to that constant", "[interp]") {
  std::vector<StationObservation> obs;
  Rng rng(17);
  for (int i = 0; i < 6; ++i) {
    obs.push_back({"s" + std::to_string(i), rng.uniform() * 10, rng.uniform() * 10, 0, "v", 3.25});
  }
  for (auto kind : {VariogramKind::kSpherical, VariogramKind::kExponential,
                    VariogramKind::kGaussian}) {
    KrigingConfig cfg;
    cfg.variogram = VariogramModel{kind, 0.1, 1.5, 30.0};
    auto field = krige_to_grid(obs, GridShape{6, 6, 1}, cfg);
    for (float v : field.values) CHECK(v == Catch::Approx(3.25).margin(1e-6));
  }
}

TEST_CASE("duplicate station positions are averaged with a warning", "[interp]") {
  std::vector<StationObservation> obs = {{"a", 2.0, 2.0, 0, "v", 4.0},
                                         {"b", 2.0, 2.0, 0, "v", 8.0},
                                         {"c", 5.0, 5.0, 0, "v", 1.0}};
  KrigingConfig cfg;
  cfg.variogram = VariogramModel{VariogramKind::kSpherical, 0.0, 1.0, 50.0};
  std::ostringstream warn;
  auto field = krige_to_grid(obs, GridShape{8, 8, 1}, cfg, 1.0, &warn);
  CHECK(warn.str().find("duplicate") != std::string::npos);
  CHECK(field.values[2 * 8 + 2] == Catch::Approx(6.0).margin(1e-5));
}

TEST_CASE("kriging requires shared variable and timestamp", "[interp]") {
  std::vector<StationObservation> obs = {{"a", 0, 0, 0, "v", 1.0}, {"b", 1, 1, 60, "v", 2.0}};
  KrigingConfig cfg;
  CHECK_THROWS_AS(krige_to_grid(obs, GridShape{4, 4, 1}, cfg), ValidationError);
}

TEST_CASE("Magnus specific humidity at dew point 20C", "[interp]") {
  // e_s(20) = 2.33828 kPa; q = 0.622 e / (p - 0.378 e) = 0.0144802 g/g
  CHECK(magnus_saturation_vapor_pressure_kpa(20.0) == Catch::Approx(2.338281).margin(1e-4));
  CHECK(specific_humidity_from_dew_point(20.0) == Catch::Approx(0.0144802329).margin(2e-6));
  // inverse is consistent
  CHECK(dew_point_from_specific_humidity(specific_humidity_from_dew_point(12.5)) ==
        Catch::Approx(12.5).margin(1e-9));
}

namespace {

ObservationsByVariable constant_station_set(const std::vector<int>& knot_times) {
  ObservationsByVariable by_var;
  struct Def {
    const char* name;
    double base;
  };
  const std::vector<Def> defs = {{"u10", 1.0}, {"v10", 0.5},  {"u100", 2.0},
                                 {"v100", 1.0}, {"r_s", 300.0}, {"temp", 15.0},
                                 {"dew", 10.0}};
  const double sx[4] = {0.0, 7.0, 0.0, 7.0};
  const double sy[4] = {0.0, 0.0, 7.0, 7.0};
  for (const auto& def : defs) {
    for (int s = 0; s < 4; ++s) {
      for (int t : knot_times) {
        by_var[def.name].push_back({"stn" + std::to_string(s), sx[s], sy[s], t, def.name,
                                    def.base + 0.1 * s});
      }
    }
  }
  return by_var;
}

}  // namespace

TEST_CASE("build_meteo_stack produces half-hourly stacks from hourly knots", "[interp]") {
  auto by_var = constant_station_set({0, 60, 120});
  KrigingConfig cfg;
  cfg.variogram = VariogramModel{VariogramKind::kSpherical, 0.0, 1.0, 50.0};
  auto stacks = build_meteo_stack(by_var, {0, 30, 60, 90, 120}, GridShape{8, 8, 1}, cfg);
  REQUIRE(stacks.size() == 5);
  CHECK(stacks[1].timestamp_min == 30);
  // constant-in-time stations give constant-in-time stacks
  for (size_t p = 0; p < stacks[0].q.size(); ++p) {
    CHECK(stacks[0].u10[p] == Catch::Approx(stacks[2].u10[p]).margin(1e-6));
    CHECK(stacks[1].temp[p] == Catch::Approx(stacks[3].temp[p]).margin(1e-6));
  }
  // q is derived from dew since q was not observed
  for (const auto& st : stacks) {
    for (size_t p = 0; p < st.q.size(); ++p) {
      CHECK(st.q[p] > 0.005f);
      CHECK(st.q[p] < 0.012f);
    }
  }
}

TEST_CASE("build_meteo_stack names the missing variable", "[interp]") {
  auto by_var = constant_station_set({0, 60});
  by_var.erase("u100");
  KrigingConfig cfg;
  CHECK_THROWS_MATCHES(
      build_meteo_stack(by_var, {0, 30, 60}, GridShape{8, 8, 1}, cfg), MissingVariableError,
      Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("u100")));
}

TEST_CASE("build_meteo_stack refuses extrapolation beyond the knot range", "[interp]") {
  auto by_var = constant_station_set({0, 60});
  KrigingConfig cfg;
  CHECK_THROWS_AS(build_meteo_stack(by_var, {30, 90}, GridShape{8, 8, 1}, cfg),
                  ExtrapolationError);
}
