#pragma once

// Synthetic data: reference sources, measurement layouts, forward oracle,
// noise, circular-harmonic extension and consistent-data synthesis.

#include <cmath>
#include <complex>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "helm/assembly.hpp"
#include "helm/quadmesh.hpp"
#include "helm/solver.hpp"
#include "helm/specfun.hpp"

namespace helm {

// ---------------------------------------------------------------------------
// Reference sources

template <int Dim>
struct ReferenceSource {
  std::string kind;
  nlohmann::json params;
  std::function<double(const Point<Dim>&)> eval;

  double operator()(const Point<Dim>& x) const { return eval(x); }
};

namespace detail {

template <int Dim>
Point<Dim> param_point(const nlohmann::json& p, const char* key, Point<Dim> fallback) {
  if (!p.contains(key)) return fallback;
  const auto& a = p.at(key);
  if (!a.is_array() || a.size() != static_cast<std::size_t>(Dim)) {
    throw std::invalid_argument(std::string("source parameter '") + key + "' must be a point of dimension " + std::to_string(Dim));
  }
  Point<Dim> out;
  for (int d = 0; d < Dim; ++d) out[d] = a[static_cast<std::size_t>(d)].get<double>();
  return out;
}

inline double param(const nlohmann::json& p, const char* key, double fallback) {
  return p.contains(key) ? p.at(key).get<double>() : fallback;
}

}  // namespace detail

inline ReferenceSource<2> make_source_2d(const std::string& kind, const nlohmann::json& p) {
  using detail::param;
  using detail::param_point;
  using P = Point<2>;
  ReferenceSource<2> s{kind, p, {}};
  if (kind == "mountain") {
    s.eval = [](const P& x) {
      const double a = (x[0] - 0.01) * (x[0] - 0.01) + (x[1] - 0.12) * (x[1] - 0.12);
      return 1.1 * std::exp(-200 * a) - 100 * (x[1] * x[1] - x[0] * x[0]) * std::exp(-90 * x.squaredNorm());
    };
  } else if (kind == "disc") {
    const P c = param_point<2>(p, "center", P(0.5, 0.5));
    const double r = param(p, "radius", 0.2);
    const double v = param(p, "value", 1.0);
    s.eval = [=](const P& x) { return (x - c).squaredNorm() <= r * r ? v : 0.0; };
  } else if (kind == "two_gaussian_discs") {
    const double x1 = param(p, "x_hat", -0.06);
    const double x2 = param(p, "x_bar", 0.08);
    const double r = param(p, "radius", 0.06);
    const double amp = param(p, "amplitude", 0.5);
    const double v = param(p, "decay", 550.0);
    s.eval = [=](const P& x) {
      const double q1 = (x[0] - x1) * (x[0] - x1) + x[1] * x[1];
      const double q2 = (x[0] - x2) * (x[0] - x2) + x[1] * x[1];
      if (q1 <= r * r) return amp * std::exp(-v * q1);
      if (q2 <= r * r) return amp * std::exp(-v * q2);
      return 0.0;
    };
  } else if (kind == "rect_minus_circle" || kind == "rect_plus_circle") {
    const P c = param_point<2>(p, "center", P(0.5, 0.5));
    const double r = param(p, "radius", 0.2);
    const P lo = param_point<2>(p, "rect_lo", P(0.29, 0.3));
    const P hi = param_point<2>(p, "rect_hi", P(0.49, 0.7));
    const double sign = kind == "rect_minus_circle" ? -1.0 : 1.0;
    s.eval = [=](const P& x) {
      const double disc = (x - c).squaredNorm() <= r * r ? 1.0 : 0.0;
      const double rect = (x.array() >= lo.array()).all() && (x.array() <= hi.array()).all() ? 1.0 : 0.0;
      return disc + sign * rect;
    };
  } else if (kind == "kidney_plus_gauss") {
    const double x0 = param(p, "x0", 0.6);
    const double y0 = param(p, "y0", 0.25);
    const double a = param(p, "a", 0.05);
    const P g = param_point<2>(p, "gauss_center", P(0.3, 0.6));
    const double amp = param(p, "gauss_amplitude", 1.2);
    const double v = param(p, "gauss_decay", 125.0);
    s.eval = [=](const P& x) {
      const double dx = x[0] - x0;
      const double dy = x[1] - y0;
      const double q = dx * dx + dy * dy - 4 * a * a;
      const double psi = q * q * q - 108 * std::pow(a, 4) * dy * dy;
      return (psi <= 0 ? 1.0 : 0.0) + amp * std::exp(-v * (x - g).squaredNorm());
    };
  } else if (kind == "four_gaussians") {
    const double off = param(p, "offset", 0.15);
    const double v = param(p, "decay", 300.0);
    s.eval = [=](const P& x) {
      double acc = 0;
      for (double sx : {-1.0, 1.0}) {
        for (double sy : {-1.0, 1.0}) acc += std::exp(-v * (x - P(sx * off, sy * off)).squaredNorm());
      }
      return acc;
    };
  } else if (kind == "gaussian") {
    const P c = param_point<2>(p, "center", P(0.0, 0.0));
    const double amp = param(p, "amplitude", 1.0);
    const double v = param(p, "decay", 100.0);
    s.eval = [=](const P& x) { return amp * std::exp(-v * (x - c).squaredNorm()); };
  } else {
    throw std::invalid_argument("unknown 2D source kind '" + kind + "'");
  }
  return s;
}

inline ReferenceSource<3> make_source_3d(const std::string& kind, const nlohmann::json& p) {
  using detail::param;
  using detail::param_point;
  using P = Point<3>;
  ReferenceSource<3> s{kind, p, {}};
  if (kind == "cone_pair_3d") {
    const P a = param_point<3>(p, "a", P(0.3, 0.5, 0.3));
    const P b = param_point<3>(p, "b", P(0.5, 0.5, 0.8));
    const double r = param(p, "radius", 0.2);
    s.eval = [=](const P& x) {
      return std::max(r - (x - a).norm(), 0.0) - std::max(r - (x - b).norm(), 0.0);
    };
  } else if (kind == "torus_3d") {
    const P c = param_point<3>(p, "center", P(0.0, 0.0, 0.0));
    const double R1 = param(p, "major", 0.25);
    const double R2 = param(p, "minor", 0.15);
    s.eval = [=](const P& x) {
      const P d = x - c;
      const double ring = std::hypot(d[0], d[1]) - R1;
      return ring * ring + d[2] * d[2] <= R2 * R2 ? 1.0 : 0.0;
    };
  } else if (kind == "gaussian") {
    const P c = param_point<3>(p, "center", P(0.0, 0.0, 0.0));
    const double amp = param(p, "amplitude", 1.0);
    const double v = param(p, "decay", 100.0);
    s.eval = [=](const P& x) { return amp * std::exp(-v * (x - c).squaredNorm()); };
  } else {
    throw std::invalid_argument("unknown 3D source kind '" + kind + "'");
  }
  return s;
}

template <int Dim>
ReferenceSource<Dim> make_reference_source(const std::string& kind, const nlohmann::json& params) {
  if constexpr (Dim == 2) {
    return make_source_2d(kind, params);
  } else {
    return make_source_3d(kind, params);
  }
}

// ---------------------------------------------------------------------------
// Measurement layouts

/// Boundary of the box with N_s uniformly spaced points per edge; points on
/// shared edges and corners appear once.  Normals are outward; at edges and
/// corners they bisect the adjacent face normals.
template <int Dim>
std::vector<MeasurementPoint<Dim>> rectangle_layout(const Box<Dim>& omega, int n_s, bool dirichlet = true,
                                                    bool neumann = true) {
  if (n_s < 2) throw std::invalid_argument("rectangle layout needs N_s >= 2");
  std::vector<MeasurementPoint<Dim>> out;
  std::array<int, Dim> idx{};
  std::size_t total = 1;
  for (int d = 0; d < Dim; ++d) total *= static_cast<std::size_t>(n_s);
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t rem = flat;
    for (int d = 0; d < Dim; ++d) {
      idx[static_cast<std::size_t>(d)] = static_cast<int>(rem % static_cast<std::size_t>(n_s));
      rem /= static_cast<std::size_t>(n_s);
    }
    MeasurementPoint<Dim> p;
    bool boundary = false;
    for (int d = 0; d < Dim; ++d) {
      const int i = idx[static_cast<std::size_t>(d)];
      p.x[d] = omega.lo[d] + i * (omega.hi[d] - omega.lo[d]) / (n_s - 1);
      if (i == 0) p.normal[d] = -1.0;
      if (i == n_s - 1) p.normal[d] = 1.0;
      boundary = boundary || i == 0 || i == n_s - 1;
    }
    if (!boundary) continue;
    p.normal.normalize();
    p.dirichlet = dirichlet;
    p.neumann = neumann;
    out.push_back(p);
  }
  return out;
}

inline std::size_t rectangle_layout_count(int dim, int n_s) {
  const auto n = static_cast<std::size_t>(n_s);
  const auto m = static_cast<std::size_t>(std::max(n_s - 2, 0));
  return dim == 2 ? n * n - m * m : n * n * n - m * m * m;
}

/// Points on the circle of `radius` at spacing (pi/2)/N_s, theta_j = j h
/// for theta_j in [0, theta_max]; the full circle omits the duplicate 2 pi.
/// Smaller apertures are prefixes of larger ones.
inline std::vector<MeasurementPoint<2>> circle_arc_layout(const Point<2>& center, double radius, int n_s,
                                                          double theta_max, bool dirichlet = true, bool neumann = true) {
  if (!(radius > 0)) throw std::invalid_argument("circle layout needs a positive radius");
  if (!(theta_max > 0 && theta_max <= 2 * std::numbers::pi + 1e-9)) throw std::invalid_argument("theta_max must lie in (0, 2 pi]");
  if (n_s < 1) throw std::invalid_argument("circle layout needs N_s >= 1");
  const double h = 0.5 * std::numbers::pi / n_s;
  const int full = 4 * n_s;
  std::vector<MeasurementPoint<2>> out;
  for (int i = 0; i < full && i * h <= theta_max + 1e-9; ++i) {
    const double t = i * h;
    MeasurementPoint<2> p;
    p.normal = Point<2>(std::cos(t), std::sin(t));
    p.x = center + radius * p.normal;
    p.dirichlet = dirichlet;
    p.neumann = neumann;
    out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward oracle

struct OracleSpec {
  int res = 400;         // quadrature points per axis
  int per_cell = 4;      // Gauss points per cell and axis
  double skip_below = 0.0;  // drop points with |S| <= skip_below * max|S|
};

template <int Dim>
AdaptiveMesh<Dim> oracle_mesh(const Box<Dim>& v0, const OracleSpec& spec) {
  if (spec.per_cell < 1 || spec.res < spec.per_cell) throw std::invalid_argument("oracle: need res >= per_cell >= 1");
  std::array<int, Dim> cells{};
  cells.fill((spec.res + spec.per_cell - 1) / spec.per_cell);
  return build_uniform_mesh<Dim>(v0, cells, gauss_legendre(spec.per_cell));
}

/// True when no point occurs in both sets (exact coordinates).
template <int Dim>
bool point_sets_disjoint(const Eigen::Matrix<double, Dim, Eigen::Dynamic>& a,
                         const Eigen::Matrix<double, Dim, Eigen::Dynamic>& b) {
  auto key = [](const auto& col) {
    std::size_t h = 0;
    for (int d = 0; d < Dim; ++d) h = h * 1000003u ^ std::hash<double>{}(col[d]);
    return h;
  };
  std::unordered_multimap<std::size_t, Eigen::Index> index;
  index.reserve(static_cast<std::size_t>(a.cols()));
  for (Eigen::Index i = 0; i < a.cols(); ++i) index.emplace(key(a.col(i)), i);
  for (Eigen::Index j = 0; j < b.cols(); ++j) {
    const auto range = index.equal_range(key(b.col(j)));
    for (auto it = range.first; it != range.second; ++it) {
      if (a.col(it->second) == b.col(j)) return false;
    }
  }
  return true;
}

/// Dirichlet/Neumann data of the source at every point and wavenumber by a
/// dense tensor Gauss rule over V0.
template <int Dim>
MeasurementData forward_data(const std::function<double(const Point<Dim>&)>& source, const Box<Dim>& v0,
                             const std::vector<MeasurementPoint<Dim>>& points, const WavenumberSet& ks,
                             const OracleSpec& spec = {}) {
  validate_points(points, v0);
  const auto mesh = oracle_mesh(v0, spec);
  const auto& y = mesh.points();
  const auto& w = mesh.weights();
  Eigen::VectorXd vals(y.cols());
  for (Eigen::Index j = 0; j < y.cols(); ++j) vals[j] = source(y.col(j));
  const double vmax = vals.cwiseAbs().maxCoeff();
  std::vector<Eigen::Index> keep;
  for (Eigen::Index j = 0; j < y.cols(); ++j) {
    if (std::abs(vals[j]) > spec.skip_below * vmax) keep.push_back(j);
  }
  Eigen::Matrix<double, Dim, Eigen::Dynamic> ys(Dim, static_cast<Eigen::Index>(keep.size()));
  Eigen::VectorXd ws(static_cast<Eigen::Index>(keep.size()));
  Eigen::VectorXd sv(static_cast<Eigen::Index>(keep.size()));
  for (std::size_t i = 0; i < keep.size(); ++i) {
    ys.col(static_cast<Eigen::Index>(i)) = y.col(keep[i]);
    ws[static_cast<Eigen::Index>(i)] = w[keep[i]];
    sv[static_cast<Eigen::Index>(i)] = vals[keep[i]];
  }
  AssemblyOptions opts;
  opts.cache_bytes = 0;
  KernelOperator<Dim> op(points, ks, ys, ws, opts);
  const Eigen::VectorXd b = keep.empty() ? Eigen::VectorXd::Zero(op.num_rows()) : op.apply_values(sv);
  return unpack_rhs(op.row_map(), b, ks.size(), points.size());
}

/// Largest relative change of the data when the oracle density doubles.
template <int Dim>
double oracle_resolution_change(const std::function<double(const Point<Dim>&)>& source, const Box<Dim>& v0,
                                const std::vector<MeasurementPoint<Dim>>& points, const WavenumberSet& ks,
                                const OracleSpec& spec) {
  OracleSpec fine = spec;
  fine.res *= 2;
  const auto a = forward_data(source, v0, points, ks, spec);
  const auto b = forward_data(source, v0, points, ks, fine);
  auto diff = [](const Eigen::MatrixXcd& x, const Eigen::MatrixXcd& y) {
    const Eigen::MatrixXcd xx = x.unaryExpr([](std::complex<double> z) { return is_present(z) ? z : std::complex<double>{}; });
    const Eigen::MatrixXcd yy = y.unaryExpr([](std::complex<double> z) { return is_present(z) ? z : std::complex<double>{}; });
    const double n = yy.norm();
    return n > 0 ? (xx - yy).norm() / n : 0.0;
  };
  return std::max(diff(a.dirichlet, b.dirichlet), diff(a.neumann, b.neumann));
}

// ---------------------------------------------------------------------------
// Noise

/// u + delta eps1 |u| exp(i pi eps2) with eps1, eps2 ~ U(-1, 1) per datum.
inline MeasurementData add_noise(MeasurementData data, double delta, std::uint64_t seed) {
  if (!(delta >= 0)) throw std::invalid_argument("noise level must be >= 0");
  if (delta == 0) return data;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  auto perturb = [&](Eigen::MatrixXcd& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index p = 0; p < m.cols(); ++p) {
        auto& z = m(i, p);
        const double e1 = u(rng);
        const double e2 = u(rng);
        if (!is_present(z)) continue;
        z += delta * e1 * std::abs(z) * std::polar(1.0, std::numbers::pi * e2);
      }
    }
  };
  perturb(data.dirichlet);
  perturb(data.neumann);
  return data;
}

/// (1 + delta eps) b_i with eps ~ U(-1, 1) per entry.
inline Eigen::VectorXd add_relative_noise(const Eigen::VectorXd& b, double delta, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Eigen::VectorXd out = b;
  for (auto& v : out) v *= 1.0 + delta * u(rng);
  return out;
}

// ---------------------------------------------------------------------------
// Circular-harmonic extension

/// 2 [delta^(-1/3)] with [X] the largest integer below X + 1.
inline int default_truncation(double delta) {
  if (!(delta > 0)) throw std::invalid_argument("truncation rule needs delta > 0");
  // cbrt rounding must not push exact integers (delta = 1e-3) below themselves
  return 2 * static_cast<int>(std::floor(std::pow(delta, -1.0 / 3.0) * (1 + 1e-12)));
}

struct ExtensionResult {
  Eigen::VectorXcd dirichlet;
  Eigen::VectorXcd neumann;  // radial derivative
  std::vector<int> dropped_modes;
};

/// Extends radiating Dirichlet samples u(R, 2 pi j / N) to Cauchy data at
/// radius rho for the angles `theta_out`.  Modes |n| <= cutoff are kept;
/// the default keeps every mode the samples resolve.
inline ExtensionResult circular_extension(const Eigen::VectorXcd& samples, double k, double R, double rho,
                                          const Eigen::VectorXd& theta_out, std::optional<int> cutoff = std::nullopt) {
  const auto N = samples.size();
  if (N < 1) throw std::invalid_argument("circular_extension: no samples");
  if (!(R > 0) || !(rho >= R) || !(k > 0)) throw std::invalid_argument("circular_extension: need k > 0 and rho >= R > 0");
  const int resolvable = static_cast<int>((N - 1) / 2);
  const int nmax = cutoff ? *cutoff : resolvable;
  if (nmax < 0 || nmax > resolvable) {
    throw std::invalid_argument("circular_extension: truncation must not exceed (samples - 1) / 2");
  }
  const auto hR = specfun::hankel1_all(nmax, k * R);
  const auto hr = specfun::hankel1_all(nmax + 1, k * rho);
  ExtensionResult out;
  out.dirichlet = Eigen::VectorXcd::Zero(theta_out.size());
  out.neumann = Eigen::VectorXcd::Zero(theta_out.size());
  const double zr = k * rho;
  for (int n = -nmax; n <= nmax; ++n) {
    const int a = std::abs(n);
    std::complex<double> coef{};
    for (Eigen::Index j = 0; j < N; ++j) {
      coef += samples[j] * std::polar(1.0, -2.0 * std::numbers::pi * n * static_cast<double>(j) / static_cast<double>(N));
    }
    coef /= static_cast<double>(N);
    // H_{-n} = (-1)^n H_n, so the ratios only depend on |n|.
    const std::complex<double> h_rho = hr[static_cast<std::size_t>(a)];
    const std::complex<double> h_R = hR[static_cast<std::size_t>(a)];
    // H_a' = a/z H_a - H_{a+1}
    const std::complex<double> dh_rho = static_cast<double>(a) / zr * h_rho - hr[static_cast<std::size_t>(a + 1)];
    const std::complex<double> ratio = h_rho / h_R;
    const std::complex<double> dratio = k * dh_rho / h_R;
    if (!std::isfinite(std::abs(ratio)) || !std::isfinite(std::abs(dratio)) || std::abs(h_R) == 0.0) {
      out.dropped_modes.push_back(n);
      continue;
    }
    for (Eigen::Index i = 0; i < theta_out.size(); ++i) {
      const std::complex<double> e = std::polar(1.0, n * theta_out[i]);
      out.dirichlet[i] += ratio * coef * e;
      out.neumann[i] += dratio * coef * e;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Consistent data with controlled model inconsistency

struct SynthSpec {
  Eigen::VectorXd w;
  double nu = 1.0;
  double eta_M = 0.0;
  Eigen::VectorXd s_star;
  Eigen::VectorXd eta_vec;
  Eigen::VectorXd u_true;
  Eigen::Index rank = 0;
};

/// s* = (A^T A)^nu w, eta in the left null space of A with norm eta_M,
/// U_true = A s* + eta.
inline SynthSpec synthesize_consistent_data(const Eigen::MatrixXd& A, const SvdFactors& svd, double nu, double eta_M,
                                            std::uint64_t seed) {
  if (!(nu > 0 && nu <= 1)) throw std::invalid_argument("synthesize: nu must lie in (0, 1]");
  if (!(eta_M >= 0)) throw std::invalid_argument("synthesize: eta_M must be >= 0");
  SynthSpec out;
  out.nu = nu;
  out.eta_M = eta_M;
  out.rank = svd.numerical_rank();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  out.w.resize(A.cols());
  for (auto& v : out.w) v = g(rng);
  const Eigen::VectorXd filt = svd.sigma().array().pow(2.0 * nu);
  out.s_star = svd.V() * (filt.asDiagonal() * (svd.V().transpose() * out.w));
  out.eta_vec = Eigen::VectorXd::Zero(A.rows());
  if (eta_M > 0) {
    if (out.rank >= A.rows()) throw std::invalid_argument("synthesize: full row rank, the left null space is empty");
    Eigen::VectorXd c(A.rows());
    for (auto& v : c) v = g(rng);
    const Eigen::MatrixXd U = svd.U().leftCols(out.rank);
    for (int pass = 0; pass < 2; ++pass) c -= U * (U.transpose() * c);
    out.eta_vec = c / c.norm() * eta_M;
  }
  out.u_true = A * out.s_star + out.eta_vec;
  return out;
}

}  // namespace helm
