#pragma once

// Bessel/Hankel functions of integer order and real positive argument, and
// the outgoing Helmholtz fundamental solution with its normal derivative.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace helm {

using Complex = std::complex<double>;

template <int Dim>
using Point = Eigen::Matrix<double, Dim, 1>;

/// Thrown when a kernel is evaluated too close to its singularity.
class SingularityError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

namespace specfun {

/// Arguments at or above this use Hankel's asymptotic expansion; below it
/// Miller's backward recurrence plus Neumann series are used.
inline constexpr double kAsymptoticThreshold = 25.0;

namespace detail {

inline void check_argument(double z) {
  if (!(z > 0.0) || !std::isfinite(z)) {
    throw std::domain_error("bessel: argument must be finite and > 0, got " + std::to_string(z));
  }
}

// Hankel asymptotic expansion for orders 0 and 1.  Returns {J, Y}.
inline std::array<double, 2> asymptotic(int order, double z) {
  const double mu = 4.0 * order * order;
  double p = 1.0;
  double q = 0.0;
  double term = 1.0;
  double prev_abs = 1.0;
  const double inv8z = 1.0 / (8.0 * z);
  for (int k = 1; k < 200; ++k) {
    const double odd = 2.0 * k - 1.0;
    term *= (mu - odd * odd) * inv8z / k;
    const double a = std::abs(term);
    if (a > prev_abs) break;  // past the smallest term
    // Terms alternate into P (even k) and Q (odd k) with sign (-1)^{floor(k/2)}.
    const double signed_term = ((k / 2) % 2 == 0) ? term : -term;
    if (k % 2 == 0) {
      p += signed_term;
    } else {
      q += signed_term;
    }
    if (a < 1e-18 * std::abs(p)) break;
    prev_abs = a;
  }
  const double c = std::cos(z);
  const double s = std::sin(z);
  double cw;
  double sw;
  if (order == 0) {  // omega = z - pi/4
    cw = (c + s) * std::numbers::sqrt2 / 2.0;
    sw = (s - c) * std::numbers::sqrt2 / 2.0;
  } else {  // omega = z - 3pi/4
    cw = (s - c) * std::numbers::sqrt2 / 2.0;
    sw = -(s + c) * std::numbers::sqrt2 / 2.0;
  }
  const double amp = std::sqrt(2.0 / (std::numbers::pi * z));
  return {amp * (p * cw - q * sw), amp * (p * sw + q * cw)};
}

inline int miller_start(int nmax, double z) {
  const double base = std::max(static_cast<double>(nmax), z);
  int start = static_cast<int>(base + 20.0 + 6.0 * std::cbrt(base + 1.0));
  return start + (start % 2);  // even
}

// Fills j[0..nmax] with J_n(z) by Miller's backward recurrence normalized by
// J_0 + 2 sum J_2k = 1.  Also returns the Neumann sums needed for Y_0, Y_1.
struct MillerResult {
  double neumann_y0 = 0.0;  // sum_{k>=1} (-1)^k J_2k / k
  double neumann_y1 = 0.0;  // sum_{m>=1} (-1)^m (2m+1)/(m(m+1)) J_{2m+1}
};

inline MillerResult miller(int nmax, double z, std::span<double> j) {
  const int start = miller_start(nmax, z);
  double next = 0.0;   // J_{n+1}
  double cur = 1e-300; // J_n, arbitrary seed
  double norm = 0.0;
  double s0 = 0.0;
  double s1 = 0.0;
  const double two_over_z = 2.0 / z;
  for (int n = start; n >= 0; --n) {
    if (n <= nmax) j[static_cast<std::size_t>(n)] = cur;
    if (n % 2 == 0) {
      if (n > 0) {
        norm += 2.0 * cur;
        const int k = n / 2;
        s0 += ((k % 2 == 0) ? cur : -cur) / k;
      } else {
        norm += cur;
      }
    } else if (n >= 3) {
      const int m = (n - 1) / 2;
      const double coef = (2.0 * m + 1.0) / (static_cast<double>(m) * (m + 1.0));
      s1 += ((m % 2 == 0) ? coef : -coef) * cur;
    }
    if (n == 0) break;
    const double prev = n * two_over_z * cur - next;  // J_{n-1}
    next = cur;
    cur = prev;
    if (std::abs(cur) > 1e250) {  // rescale everything accumulated so far
      const double f = 1e-250;
      cur *= f;
      next *= f;
      norm *= f;
      s0 *= f;
      s1 *= f;
      for (int i = n; i <= nmax; ++i) j[static_cast<std::size_t>(i)] *= f;
    }
  }
  const double inv = 1.0 / norm;
  for (int n = 0; n <= nmax; ++n) j[static_cast<std::size_t>(n)] *= inv;
  return {s0 * inv, s1 * inv};
}

struct Order01 {
  double j0, j1, y0, y1;
};

inline Order01 order01(double z) {
  if (z >= kAsymptoticThreshold) {
    const auto a0 = asymptotic(0, z);
    const auto a1 = asymptotic(1, z);
    return {a0[0], a1[0], a0[1], a1[1]};
  }
  std::array<double, 2> j{};
  const MillerResult m = miller(1, z, j);
  const double lg = std::log(z / 2.0) + std::numbers::egamma;
  const double y0 = (2.0 / std::numbers::pi) * lg * j[0] - (4.0 / std::numbers::pi) * m.neumann_y0;
  const double y1 = (2.0 / std::numbers::pi) * ((lg - 1.0) * j[1] - j[0] / z - m.neumann_y1);
  return {j[0], j[1], y0, y1};
}

}  // namespace detail

/// J_n(z) for all n in [0, nmax].
inline std::vector<double> bessel_j_all(int nmax, double z) {
  detail::check_argument(z);
  if (nmax < 0) throw std::domain_error("bessel_j_all: negative order");
  std::vector<double> out(static_cast<std::size_t>(nmax) + 1);
  if (z >= kAsymptoticThreshold && nmax < z) {
    // Upward recurrence is stable while n < z.
    const auto o = detail::order01(z);
    out[0] = o.j0;
    if (nmax >= 1) out[1] = o.j1;
    for (int n = 1; n < nmax; ++n) {
      out[static_cast<std::size_t>(n) + 1] = (2.0 * n / z) * out[static_cast<std::size_t>(n)] - out[static_cast<std::size_t>(n) - 1];
    }
    return out;
  }
  detail::miller(nmax, z, out);
  return out;
}

/// Y_n(z) for all n in [0, nmax] by upward recurrence from Y_0, Y_1.
inline std::vector<double> bessel_y_all(int nmax, double z) {
  detail::check_argument(z);
  if (nmax < 0) throw std::domain_error("bessel_y_all: negative order");
  const auto o = detail::order01(z);
  std::vector<double> out(static_cast<std::size_t>(nmax) + 1);
  out[0] = o.y0;
  if (nmax >= 1) out[1] = o.y1;
  for (int n = 1; n < nmax; ++n) {
    out[static_cast<std::size_t>(n) + 1] = (2.0 * n / z) * out[static_cast<std::size_t>(n)] - out[static_cast<std::size_t>(n) - 1];
  }
  return out;
}

inline double bessel_j(int order, double z) {
  detail::check_argument(z);
  if (order < 0) throw std::domain_error("bessel_j: negative order");
  if (order <= 1) {
    const auto o = detail::order01(z);
    return order == 0 ? o.j0 : o.j1;
  }
  return bessel_j_all(order, z)[static_cast<std::size_t>(order)];
}

inline double bessel_y(int order, double z) {
  detail::check_argument(z);
  if (order < 0) throw std::domain_error("bessel_y: negative order");
  return bessel_y_all(order, z)[static_cast<std::size_t>(order)];
}

/// H_n^(1)(z) = J_n(z) + i Y_n(z).
inline Complex hankel1(int order, double z) {
  return {bessel_j(order, z), bessel_y(order, z)};
}

/// H_n^(1)(z) for n in [0, nmax].
inline std::vector<Complex> hankel1_all(int nmax, double z) {
  const auto j = bessel_j_all(nmax, z);
  const auto y = bessel_y_all(nmax, z);
  std::vector<Complex> out(j.size());
  for (std::size_t n = 0; n < j.size(); ++n) out[n] = {j[n], y[n]};
  return out;
}

/// H_0^(1)(z) and H_1^(1)(z) together; the hot path of the 2D kernels.
inline std::array<Complex, 2> hankel1_01(double z) {
  detail::check_argument(z);
  const auto o = detail::order01(z);
  return {Complex{o.j0, o.y0}, Complex{o.j1, o.y1}};
}

}  // namespace specfun

inline constexpr double kDefaultRMin = 1e-10;

/// Arguments of the fundamental solution.  `normal` is only read by the
/// normal-derivative kernel.
template <int Dim>
struct KernelQuery {
  double k = 1.0;
  Point<Dim> x = Point<Dim>::Zero();
  Point<Dim> y = Point<Dim>::Zero();
  Point<Dim> normal = Point<Dim>::Zero();
};

namespace detail {
inline void check_distance(double r, double r_min) {
  if (!(r > r_min)) {
    throw SingularityError("fundamental solution evaluated at |x-y| = " + std::to_string(r) +
                           " <= r_min = " + std::to_string(r_min));
  }
}
}  // namespace detail

/// Outgoing fundamental solution as a function of k and r = |x - y|.
template <int Dim>
inline Complex phi_radial(double k, double r) {
  static_assert(Dim == 2 || Dim == 3, "only 2D and 3D kernels are implemented");
  if constexpr (Dim == 2) {
    const Complex h0 = specfun::hankel1_01(k * r)[0];
    return Complex{0.0, 0.25} * h0;
  } else {
    const double kr = k * r;
    return Complex{std::cos(kr), std::sin(kr)} / (4.0 * std::numbers::pi * r);
  }
}

/// Phi and its derivative along `normal` at x for given k, r and
/// projection ((x - y) . normal) / r.
template <int Dim>
inline std::array<Complex, 2> phi_and_normal_radial(double k, double r, double cos_angle) {
  if constexpr (Dim == 2) {
    const auto h = specfun::hankel1_01(k * r);
    return {Complex{0.0, 0.25} * h[0], Complex{0.0, -0.25 * k} * h[1] * cos_angle};
  } else {
    const double kr = k * r;
    const Complex p = Complex{std::cos(kr), std::sin(kr)} / (4.0 * std::numbers::pi * r);
    return {p, p * Complex{-1.0 / r, k} * cos_angle};
  }
}

template <int Dim>
inline Complex phi(const KernelQuery<Dim>& q, double r_min = kDefaultRMin) {
  const double r = (q.x - q.y).norm();
  detail::check_distance(r, r_min);
  return phi_radial<Dim>(q.k, r);
}

/// d Phi / d nu(x).
template <int Dim>
inline Complex phi_normal_derivative(const KernelQuery<Dim>& q, double r_min = kDefaultRMin) {
  const Point<Dim> d = q.x - q.y;
  const double r = d.norm();
  detail::check_distance(r, r_min);
  return phi_and_normal_radial<Dim>(q.k, r, d.dot(q.normal) / r)[1];
}

}  // namespace helm
