#pragma once

#include <vector>

#include "pnc/common.hpp"

namespace pnc::interp {

/// Natural cubic spline (zero second derivative at both ends) through
/// strictly increasing knots. Knot-exact and C2 between knots.
class CubicSpline {
 public:
  CubicSpline(std::vector<double> x, std::vector<double> y)
      : x_(std::move(x)), y_(std::move(y)) {
    const size_t n = x_.size();
    if (n < 2 || y_.size() != n) {
      throw InsufficientDataError("cubic spline: need at least 2 knots");
    }
    for (size_t i = 1; i < n; ++i) {
      if (!(x_[i] > x_[i - 1])) {
        throw ValidationError("cubic spline: knot times must be strictly increasing");
      }
    }
    // Solve the tridiagonal system for second derivatives M_i with natural
    // boundary conditions M_0 = M_{n-1} = 0 (Thomas algorithm).
    m_.assign(n, 0.0);
    if (n > 2) {
      const size_t k = n - 2;  // interior unknowns
      std::vector<double> diag(k), rhs(k), upper(k, 0.0);
      for (size_t i = 0; i < k; ++i) {
        const double h0 = x_[i + 1] - x_[i];
        const double h1 = x_[i + 2] - x_[i + 1];
        diag[i] = (h0 + h1) / 3.0;
        if (i + 1 < k) upper[i] = h1 / 6.0;
        rhs[i] = (y_[i + 2] - y_[i + 1]) / h1 - (y_[i + 1] - y_[i]) / h0;
      }
      for (size_t i = 1; i < k; ++i) {
        const double lower = (x_[i + 1] - x_[i]) / 6.0;  // sub-diagonal of row i
        const double w = lower / diag[i - 1];
        diag[i] -= w * upper[i - 1];
        rhs[i] -= w * rhs[i - 1];
      }
      m_[k] = rhs[k - 1] / diag[k - 1];
      for (size_t i = k - 1; i >= 1; --i) {
        m_[i] = (rhs[i - 1] - upper[i - 1] * m_[i + 1]) / diag[i - 1];
      }
    }
  }

  double operator()(double t) const {
    if (t < x_.front() || t > x_.back()) {
      throw ExtrapolationError("cubic spline: query " + std::to_string(t) + " outside [" +
                               std::to_string(x_.front()) + ", " + std::to_string(x_.back()) + "]");
    }
    // exact knot reproduction, including the endpoints
    size_t hi = static_cast<size_t>(
        std::lower_bound(x_.begin(), x_.end(), t) - x_.begin());
    if (hi < x_.size() && x_[hi] == t) return y_[hi];
    if (hi == 0) hi = 1;
    const size_t lo = hi - 1;
    const double h = x_[hi] - x_[lo];
    const double a = (x_[hi] - t) / h;
    const double b = (t - x_[lo]) / h;
    return a * y_[lo] + b * y_[hi] +
           ((a * a * a - a) * m_[lo] + (b * b * b - b) * m_[hi]) * h * h / 6.0;
  }

 private:
  std::vector<double> x_, y_;
  std::vector<double> m_;  // second derivatives at knots
};

/// Interpolate a station time series onto query times (minutes).
inline std::vector<double> cubic_time_interp(
    const std::vector<std::pair<int, double>>& series, const std::vector<int>& query_times) {
  std::vector<double> x, y;
  x.reserve(series.size());
  y.reserve(series.size());
  for (const auto& [t, v] : series) {
    x.push_back(static_cast<double>(t));
    y.push_back(v);
  }
  CubicSpline s(std::move(x), std::move(y));
  std::vector<double> out;
  out.reserve(query_times.size());
  for (int t : query_times) out.push_back(s(static_cast<double>(t)));
  return out;
}

}  // namespace pnc::interp
