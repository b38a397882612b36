#pragma once

// Closed-form densities, normalizers and dyadic mixture tables used by the
// quantized Laplace mechanism. Everything here is immutable after
// construction and safe to share across threads.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "dql/errors.hpp"

namespace dql {

inline constexpr int kDefaultTCap = 48;
inline constexpr int kMaxTCap = 64;

namespace detail {

inline void require(bool cond, const char* msg) {
  if (!cond) throw invalid_parameter(msg);
}

}  // namespace detail

/// Unique positive root of e^d = d*ell + 1. Requires ell > 1.
/// The returned root satisfies |e^d - (d*ell + 1)| <= 1e-12 * e^d.
inline double solve_delta0(double ell) {
  detail::require(std::isfinite(ell) && ell > 1.0, "solve_delta0: ell must be > 1");
  auto h = [ell](double d) { return std::expm1(d) - d * ell; };  // e^d - d*ell - 1
  // h < 0 on (0, d0), h > 0 above; d0 <= ln(2*ell*ln(ell) + 1).
  double lo = 0.0;
  double hi = std::log(2.0 * ell * std::log(ell) + 1.0);
  while (h(hi) <= 0.0) hi *= 2.0;
  for (int i = 0; i < 200 && hi - lo > 1e-18 * hi; ++i) {
    double mid = 0.5 * (lo + hi);
    (h(mid) < 0.0 ? lo : hi) = mid;
  }
  double d = 0.5 * (lo + hi);
  // one Newton polish; h'(d) = e^d - ell
  double step = h(d) / (std::exp(d) - ell);
  if (std::isfinite(step)) d -= step;
  return d;
}

/// Normalizer c_delta = delta * (1 + e^-delta) / (1 - e^-delta) of the
/// piecewise linear Laplace density. Stable down to denormal delta.
inline double c_delta(double delta) {
  detail::require(std::isfinite(delta) && delta > 0.0, "c_delta: delta must be > 0");
  const double em1 = std::expm1(-delta);  // e^-delta - 1
  return delta * (2.0 + em1) / (-em1);
}

/// Laplace(0, 1/epsilon) density at x.
inline double laplace_density(double epsilon, double x) {
  detail::require(std::isfinite(epsilon) && epsilon > 0.0,
                  "laplace_density: epsilon must be > 0");
  return 0.5 * epsilon * std::exp(-epsilon * std::abs(x));
}

/// Laplace(0, 1/epsilon) cdf at x.
inline double laplace_cdf(double epsilon, double x) {
  detail::require(std::isfinite(epsilon) && epsilon > 0.0,
                  "laplace_cdf: epsilon must be > 0");
  return x < 0.0 ? 0.5 * std::exp(epsilon * x) : 1.0 - 0.5 * std::exp(-epsilon * x);
}

/// Mechanism parameters: database privacy epsilon, decoder relaxation ell,
/// the derived dyadic base step delta0 and the truncation depth t_cap.
struct MechanismParams {
  double epsilon;
  double ell;
  double delta0;
  int t_cap;

  MechanismParams(double epsilon_, double ell_, int t_cap_ = kDefaultTCap)
      : epsilon(epsilon_), ell(ell_), delta0(0.0), t_cap(t_cap_) {
    detail::require(std::isfinite(epsilon) && epsilon > 0.0,
                    "MechanismParams: epsilon must be > 0");
    detail::require(std::isfinite(ell) && ell > 1.0, "MechanismParams: ell must be > 1");
    detail::require(t_cap >= 0 && t_cap <= kMaxTCap,
                    "MechanismParams: t_cap out of range");
    delta0 = solve_delta0(ell);
  }

  /// Dyadic step delta_t = 2^-t * delta0.
  double delta_t(int t) const { return std::ldexp(delta0, -t); }
};

/// Density of the form f(x) = (1/delta) * sum_k a_k tri(x/delta - k) with an
/// explicit weight window plus optional two-sided geometric tails. The tails
/// continue each parity class with exact ratio `tail_ratio` per two steps, so
/// exponential weight families lose no mass to truncation.
class PiecewiseLinearDensity {
 public:
  /// weights[i] is a_{k_min + i}. If tail_ratio > 0, the window must hold at
  /// least two entries per side to anchor both parity classes, and
  /// tail_log_ratio must equal ln(tail_ratio) (passed separately so callers
  /// with analytically known logs keep full precision).
  PiecewiseLinearDensity(double delta, std::int64_t k_min, std::vector<double> weights,
                         double tail_ratio = 0.0,
                         double tail_log_ratio = -std::numeric_limits<double>::infinity())
      : delta_(delta),
        k_min_(k_min),
        w_(std::move(weights)),
        rho_(tail_ratio),
        log_rho_(tail_log_ratio) {
    detail::require(std::isfinite(delta_) && delta_ > 0.0,
                    "PiecewiseLinearDensity: delta must be > 0");
    detail::require(!w_.empty(), "PiecewiseLinearDensity: empty weight window");
    detail::require(rho_ >= 0.0 && rho_ < 1.0,
                    "PiecewiseLinearDensity: tail ratio must lie in [0, 1)");
    if (rho_ > 0.0) {
      detail::require(w_.size() >= 2,
                      "PiecewiseLinearDensity: tails need a two-entry anchor window");
      if (!std::isfinite(log_rho_)) log_rho_ = std::log(rho_);
      one_minus_rho_ = -std::expm1(log_rho_);
    } else {
      one_minus_rho_ = 1.0;
    }
    prefix_.resize(w_.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < w_.size(); ++i) {
      detail::require(w_[i] >= 0.0, "PiecewiseLinearDensity: negative weight");
      acc += w_[i];
      prefix_[i] = acc;
    }
    if (rho_ > 0.0) {
      left_tail_ = (w_.front() + w_[1]) * rho_ / one_minus_rho_;
      right_tail_ = (w_.back() + w_[w_.size() - 2]) * rho_ / one_minus_rho_;
    }
    total_ = left_tail_ + acc + right_tail_;
    detail::require(std::abs(total_ - 1.0) <= 1e-12,
                    "PiecewiseLinearDensity: weights must sum to 1");
  }

  double delta() const { return delta_; }
  std::int64_t k_min() const { return k_min_; }
  std::int64_t k_max() const { return k_min_ + static_cast<std::int64_t>(w_.size()) - 1; }
  bool has_tails() const { return rho_ > 0.0; }
  double tail_ratio() const { return rho_; }
  double total_mass() const { return total_; }

  /// a_k for any integer k; exact geometric continuation outside the window.
  double weight(std::int64_t k) const {
    if (k >= k_min_ && k <= k_max()) return w_[static_cast<std::size_t>(k - k_min_)];
    if (rho_ == 0.0) return 0.0;
    if (k > k_max()) {
      const std::int64_t j = k - k_max();           // steps past the window
      const std::int64_t s = (j + 1) / 2;           // two-step count
      const double anchor = (j % 2 == 0) ? w_.back() : w_[w_.size() - 2];
      return anchor * std::exp(static_cast<double>(s) * log_rho_);
    }
    const std::int64_t j = k_min_ - k;
    const std::int64_t s = (j + 1) / 2;
    const double anchor = (j % 2 == 0) ? w_.front() : w_[1];
    return anchor * std::exp(static_cast<double>(s) * log_rho_);
  }

  /// cum(k) = sum_{i <= k} a_i, in closed form through the tails.
  double cum(std::int64_t k) const {
    if (k < k_min_) {
      if (rho_ == 0.0) return 0.0;
      // sum_{i >= j} a_{k_min - i} with j = k_min - k >= 1, split by parity.
      const std::int64_t j = k_min_ - k;
      const double sa = std::exp(static_cast<double>((j + 1) / 2) * log_rho_);
      const double sb = std::exp(static_cast<double>(j / 2 + 1) * log_rho_);
      return (w_.front() * sa + w_[1] * sb) / one_minus_rho_;
    }
    if (k <= k_max()) return left_tail_ + prefix_[static_cast<std::size_t>(k - k_min_)];
    if (rho_ == 0.0) return total_;
    const std::int64_t j = k - k_max();  // tail sum over i >= j+1 remains above k
    const double sa = std::exp(static_cast<double>(j / 2 + 1) * log_rho_);
    const double sb = std::exp(static_cast<double>((j + 1) / 2 + 1) * log_rho_);
    const double rest = (w_.back() * ((j % 2 == 0) ? sa : sb) +
                         w_[w_.size() - 2] * ((j % 2 == 0) ? sb : sa)) /
                        one_minus_rho_;
    return total_ - rest;
  }

  /// min{k : cum(k) >= v}; the inverse-cdf index rule of the encoder.
  std::int64_t quantile_index(double v) const {
    detail::require(v >= 0.0 && v < 1.0, "quantile_index: v must lie in [0, 1)");
    if (v > cum(k_max())) {
      if (rho_ == 0.0) return k_max();  // v beyond rounded total mass
      std::int64_t step = 1;
      while (cum(k_max() + step) < v) {
        step *= 2;
        if (step > (std::int64_t{1} << 50)) return k_max() + step;  // saturated
      }
      std::int64_t lo = k_max() + step / 2, hi = k_max() + step;
      while (lo < hi) {
        std::int64_t mid = lo + (hi - lo) / 2;
        (cum(mid) >= v ? hi : lo) = mid + ((cum(mid) >= v) ? 0 : 1);
      }
      return hi;
    }
    if (rho_ > 0.0 && cum(k_min_ - 1) >= v) {
      std::int64_t step = 1;
      while (cum(k_min_ - step) >= v) {
        step *= 2;
        if (step > (std::int64_t{1} << 50)) return k_min_ - step / 2;
      }
      std::int64_t lo = k_min_ - step, hi = k_min_ - step / 2;
      while (lo < hi) {
        std::int64_t mid = lo + (hi - lo) / 2;
        (cum(mid) >= v ? hi : lo) = mid + ((cum(mid) >= v) ? 0 : 1);
      }
      return hi;
    }
    // window: first prefix with left_tail_ + prefix >= v
    const double target = v - left_tail_;
    auto it = std::lower_bound(prefix_.begin(), prefix_.end(), target);
    if (it == prefix_.end()) --it;  // rounding slack at the right edge
    return k_min_ + static_cast<std::int64_t>(it - prefix_.begin());
  }

  /// f(x) = (1/delta) [ a_k (1 - frac) + a_{k+1} frac ], k = floor(x/delta).
  double density(double x) const {
    const double y = x / delta_;
    if (std::abs(y) > 4.5e15) return 0.0;  // beyond exact-integer doubles; weight ~ 0
    const double fl = std::floor(y);
    const auto k = static_cast<std::int64_t>(fl);
    const double frac = y - fl;
    return (weight(k) * (1.0 - frac) + weight(k + 1) * frac) / delta_;
  }

  /// cdf of the triangle mixture at x.
  double cdf(double x) const {
    const double y = x / delta_;
    if (y < -4.5e15) return 0.0;
    if (y > 4.5e15) return total_;
    const double fl = std::floor(y);
    const auto k = static_cast<std::int64_t>(fl);
    const double frac = y - fl;
    const double a0 = weight(k), a1 = weight(k + 1);
    return cum(k - 1) + a0 * (1.0 - 0.5 * (1.0 - frac) * (1.0 - frac)) +
           a1 * 0.5 * frac * frac;
  }

 private:
  double delta_;
  std::int64_t k_min_;
  std::vector<double> w_;
  double rho_;
  double log_rho_;
  double one_minus_rho_ = 1.0;
  std::vector<double> prefix_;
  double left_tail_ = 0.0;
  double right_tail_ = 0.0;
  double total_ = 0.0;
};

/// Privacy constant of the quantized piecewise linear mechanism:
/// max over adjacent index pairs of (a_j / a_i - 1) / delta.
/// Returns +infinity when a zero weight sits next to a positive one.
inline double plm_epsilon(const PiecewiseLinearDensity& f) {
  const double inf = std::numeric_limits<double>::infinity();
  double best = 0.0;
  auto consider = [&](double ai, double aj) {
    if (aj <= ai) return;
    if (ai == 0.0) {
      best = inf;
      return;
    }
    best = std::max(best, (aj / ai - 1.0) / f.delta());
  };
  // Window pairs plus one pair across each boundary. Compact supports see the
  // implicit zero just outside the window.
  const std::int64_t lo = f.k_min() - 1, hi = f.k_max() + 1;
  for (std::int64_t k = lo; k < hi; ++k) {
    const double a = f.weight(k), b = f.weight(k + 1);
    consider(a, b);
    consider(b, a);
  }
  if (f.has_tails()) {
    // Tail ratios repeat with period two; both orientations of both ratios.
    const double rho = f.tail_ratio();
    const double ar = f.weight(f.k_max()), br = f.weight(f.k_max() - 1);
    const double al = f.weight(f.k_min()), bl = f.weight(f.k_min() + 1);
    consider(ar, rho * br);
    consider(rho * br, ar);
    consider(br, ar);
    consider(ar, br);
    consider(al, rho * bl);
    consider(rho * bl, al);
    consider(bl, al);
    consider(al, bl);
  }
  return best;
}

namespace detail {

/// Window half-width for exponential weight families: the explicit table runs
/// until a_k drops below 1e-18 * a_0; the exact geometric tails carry the rest.
inline std::int64_t weight_window(double delta) {
  const double need = std::log(1e18) / delta;  // e^{-K delta} <= 1e-18
  const auto k = static_cast<std::int64_t>(std::ceil(need)) + 1;
  return std::clamp<std::int64_t>(k, 2, 4096);
}

}  // namespace detail

/// Piecewise linear Laplace density g_delta with weights
/// a_k = delta * e^{-|k| delta} / c_delta and exact geometric tails.
inline PiecewiseLinearDensity g_delta(double delta) {
  detail::require(std::isfinite(delta) && delta > 0.0, "g_delta: delta must be > 0");
  const double c = c_delta(delta);
  const std::int64_t K = detail::weight_window(delta);
  std::vector<double> w(static_cast<std::size_t>(2 * K + 1));
  for (std::int64_t k = -K; k <= K; ++k)
    w[static_cast<std::size_t>(k + K)] = delta * std::exp(-std::abs(static_cast<double>(k)) * delta) / c;
  return PiecewiseLinearDensity(delta, -K, std::move(w), std::exp(-2.0 * delta),
                                -2.0 * delta);
}

/// Precomputed per-level tables for the dyadic mixture: the cdf F_T of the
/// shared level index, the level masses p_T, the ratios r_t = F_T(t-1)/F_T(t)
/// and the normalizers c_{delta_t}. Also caches the four encoder mixture
/// weights per level. Immutable after construction.
class DyadicTables {
 public:
  explicit DyadicTables(const MechanismParams& params) : params_(params) {
    const int tc = params_.t_cap;
    r_.resize(tc + 1);
    omr_.resize(tc + 1);
    // factor_i for all indices that contribute to any F_T(t), t <= t_cap.
    // Factors converge to 1 at rate O(delta_i); stop once indistinguishable.
    int istar = tc;
    std::vector<double> fac(static_cast<std::size_t>(kMaxTCap) + 1, 1.0);
    std::vector<double> omf(static_cast<std::size_t>(kMaxTCap) + 1, 0.0);
    for (int i = 0; i <= kMaxTCap; ++i) {
      auto [ri, omri] = factor(params_.delta_t(i), params_.ell);
      if (std::abs(ri - 1.0) < 1e-16) {
        istar = std::max(istar, i - 1);
        break;
      }
      fac[static_cast<std::size_t>(i)] = ri;
      omf[static_cast<std::size_t>(i)] = omri;
      istar = i;
    }
    for (int t = 0; t <= tc; ++t) {
      r_[static_cast<std::size_t>(t)] = fac[static_cast<std::size_t>(t)];
      omr_[static_cast<std::size_t>(t)] = omf[static_cast<std::size_t>(t)];
    }
    // F_T(t) = prod_{i > t} factor_i, built by downward recursion so that
    // F_T(t-1) = r_t * F_T(t) holds exactly as stored.
    std::vector<double> F(static_cast<std::size_t>(istar) + 2, 1.0);
    for (int t = istar; t >= 0; --t)
      F[static_cast<std::size_t>(t)] =
          fac[static_cast<std::size_t>(t)] * F[static_cast<std::size_t>(t) + 1];
    // F_[t + 1] stores F_T(t) for t = -1 .. t_cap.
    F_.resize(static_cast<std::size_t>(tc) + 2, 1.0);
    for (int t = -1; t <= tc; ++t)
      F_[static_cast<std::size_t>(t + 1)] =
          (t + 1 <= istar) ? F[static_cast<std::size_t>(t + 1)] : 1.0;
    detail::require(F_[static_cast<std::size_t>(tc) + 1] >= 1.0 - 1e-9,
                    "DyadicTables: t_cap too small, F_T(t_cap) < 1 - 1e-9");
    if (std::abs(F_[0]) > 1e-12)
      throw internal_error("DyadicTables: F_T(-1) failed to vanish");

    p_.resize(tc + 1);
    for (int t = 0; t <= tc; ++t) {
      p_[static_cast<std::size_t>(t)] =
          F(t) * omr_[static_cast<std::size_t>(t)];
      if (p_[static_cast<std::size_t>(t)] < 0.0)
        throw internal_error("DyadicTables: negative level mass");
    }

    c_.resize(static_cast<std::size_t>(tc) + 2);
    c_[0] = c_delta(2.0 * params_.delta0);
    for (int t = 0; t <= tc; ++t)
      c_[static_cast<std::size_t>(t + 1)] = c_delta(params_.delta_t(t));

    enc_.resize(tc + 1);
    for (int t = 0; t <= tc; ++t) {
      EncodeConsts& e = enc_[static_cast<std::size_t>(t)];
      const double d = params_.delta_t(t);
      e.delta = d;
      e.exp_md = std::exp(-d);
      e.exp_m2d = std::exp(-2.0 * d);
      e.geom_p = -std::expm1(-2.0 * d);
      const double c0 = c(t), c1 = 2.0 * c(t - 1);  // c_{2 delta_t} = 2 c_{delta_{t-1}}? no:
      (void)c1;
      const double cd = c(t);
      const double c2d = (t == 0) ? c_[0] : c(t - 1);
      const double rt = r(t);
      double w0 = 1.0 / cd - rt / c2d;
      double w2 = e.exp_md / cd - rt * (1.0 + e.exp_m2d) / (2.0 * c2d);
      w0 = clip_weight(w0);
      w2 = clip_weight(w2);
      e.w = {w0, w0 * e.exp_m2d, w2, w2};
      e.w_total = e.w[0] + e.w[1] + e.w[2] + e.w[3];
    }
  }

  const MechanismParams& params() const { return params_; }
  int t_cap() const { return params_.t_cap; }

  /// F_T(t) for t in [-1, t_cap].
  double F(int t) const {
    check_range(t, -1);
    return F_[static_cast<std::size_t>(t + 1)];
  }
  /// p_T(t) = F_T(t) - F_T(t-1) for t in [0, t_cap].
  double p(int t) const {
    check_range(t, 0);
    return p_[static_cast<std::size_t>(t)];
  }
  /// r_t = F_T(t-1) / F_T(t).
  double r(int t) const {
    check_range(t, 0);
    return r_[static_cast<std::size_t>(t)];
  }
  /// 1 - r_t computed without cancellation.
  double one_minus_r(int t) const {
    check_range(t, 0);
    return omr_[static_cast<std::size_t>(t)];
  }
  /// c_{delta_t} for t in [-1, t_cap]; t = -1 gives c_{2 delta_0}.
  double c(int t) const {
    check_range(t, -1);
    return c_[static_cast<std::size_t>(t + 1)];
  }

  /// Inverse-cdf level lookup: smallest t with F_T(t) >= v.
  int sample_t(double v) const {
    for (int t = 0; t <= params_.t_cap; ++t)
      if (F_[static_cast<std::size_t>(t + 1)] >= v) return t;
    throw truncation_overflow("sample_t: draw beyond F_T(t_cap)");
  }

  struct EncodeConsts {
    double delta;
    double exp_md;   // e^{-delta}
    double exp_m2d;  // e^{-2 delta}
    double geom_p;   // 1 - e^{-2 delta}, the geometric success probability
    std::array<double, 4> w;  // mixture class weights, encoder order
    double w_total;
  };
  const EncodeConsts& encode_consts(int t) const {
    check_range(t, 0);
    return enc_[static_cast<std::size_t>(t)];
  }

 private:
  static double clip_weight(double w) {
    if (w < -1e-12) throw internal_error("DyadicTables: mixture weight below -1e-12");
    return w < 0.0 ? 0.0 : w;
  }

  void check_range(int t, int lo) const {
    if (t < lo || t > params_.t_cap) throw dql::range_error("DyadicTables: t out of range");
  }

  /// One factor of the F_T product at step delta, with its complement
  /// 1 - factor, both evaluated through expm1 to dodge cancellation.
  static std::pair<double, double> factor(double d, double ell) {
    const double em = std::exp(-d);
    const double num = 4.0 * em * (std::expm1(d) - d * ell);
    const double e2 = std::expm1(-2.0 * d);  // e^{-2d} - 1
    const double inner = -e2 - d * ell * (2.0 + e2);
    const double den = (1.0 + em) * (1.0 + em) * inner / (2.0 + e2);
    double r = num / den;
    double omr = (den - num) / den;
    if (r < 0.0) {  // only from the vanishing i = 0 numerator's rounding
      r = 0.0;
      omr = 1.0;
    }
    if (r > 1.0) {
      r = 1.0;
      omr = 0.0;
    }
    return {r, omr};
  }

  MechanismParams params_;
  std::vector<double> F_;    // F_[t+1] = F_T(t), t = -1..t_cap
  std::vector<double> p_;    // p_[t] = p_T(t)
  std::vector<double> r_;    // r_[t] = F_T(t-1)/F_T(t)
  std::vector<double> omr_;  // 1 - r_[t]
  std::vector<double> c_;    // c_[t+1] = c_{delta_t}, t = -1..t_cap
  std::vector<EncodeConsts> enc_;
};

/// Mixture component f_t: step delta_t, weights from the two-grid difference
/// F_T(t) g_{delta_t} - F_T(t-1) g_{delta_{t-1}} normalized by p_T(t).
inline PiecewiseLinearDensity ft_density(const DyadicTables& tables, int t) {
  if (t < 0 || t > tables.t_cap()) throw range_error("ft_density: t out of range");
  if (!(tables.p(t) > 0.0)) throw internal_error("ft_density: degenerate component, p_T(t) = 0");
  const double d = tables.params().delta_t(t);
  const double cd = tables.c(t);
  const double c2d = tables.c(t - 1);  // c_{2 delta_t} = c_{delta_{t-1}}
  const double rt = tables.r(t);
  const double omr = tables.one_minus_r(t);
  const double e2d = std::exp(-2.0 * d);
  const std::int64_t K = detail::weight_window(d);
  std::vector<double> w(static_cast<std::size_t>(2 * K + 1));
  for (std::int64_t k = -K; k <= K; ++k) {
    const auto ak = static_cast<double>(std::abs(k));
    const double e = std::exp(-ak * d);
    double v;
    if (k % 2 == 0) {
      v = e / cd - rt * e / c2d;
    } else {
      const double lo = std::exp(-std::abs(static_cast<double>(k) - 1.0) * d);
      const double hi = std::exp(-std::abs(static_cast<double>(k) + 1.0) * d);
      v = e / cd - rt * (lo + hi) / (2.0 * c2d);
    }
    v *= d / omr;
    if (v < -1e-12) throw internal_error("ft_density: weight below -1e-12");
    w[static_cast<std::size_t>(k + K)] = v < 0.0 ? 0.0 : v;
  }
  return PiecewiseLinearDensity(d, -K, std::move(w), e2d, -2.0 * d);
}

}  // namespace dql
