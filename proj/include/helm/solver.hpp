#pragma once

// Tikhonov-regularized least squares through the SVD, L-curve parameter
// selection and a-priori error-bound diagnostics.

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <ostream>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>
#include <Eigen/QR>
#include <Eigen/SVD>

namespace helm {

/// Thin SVD A = U diag(sigma) V^T.  For tall A the factorization goes
/// through a Householder QR first and U is kept implicitly as Q * U_R.
class SvdFactors {
 public:
  SvdFactors() = default;

  explicit SvdFactors(const Eigen::MatrixXd& A) : n_(A.rows()), m_(A.cols()) {
    if (A.size() == 0) throw std::invalid_argument("svd: empty matrix");
    if (!A.allFinite()) throw std::invalid_argument("svd: matrix has non-finite entries");
    if (n_ >= m_) {
      qr_ = std::make_shared<Eigen::HouseholderQR<Eigen::MatrixXd>>(A);
      const Eigen::MatrixXd R = qr_->matrixQR().topRows(m_).triangularView<Eigen::Upper>();
      Eigen::BDCSVD<Eigen::MatrixXd> svd(R, Eigen::ComputeFullU | Eigen::ComputeFullV);
      u_small_ = svd.matrixU();
      sigma_ = svd.singularValues();
      v_ = svd.matrixV();
    } else {
      Eigen::BDCSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
      u_small_ = svd.matrixU();
      sigma_ = svd.singularValues();
      v_ = svd.matrixV();
    }
  }

  [[nodiscard]] Eigen::Index rows() const { return n_; }
  [[nodiscard]] Eigen::Index cols() const { return m_; }
  [[nodiscard]] const Eigen::VectorXd& sigma() const { return sigma_; }
  [[nodiscard]] const Eigen::MatrixXd& V() const { return v_; }

  /// Thin U (n x min(n, M)).
  [[nodiscard]] Eigen::MatrixXd U() const {
    if (!qr_) return u_small_;
    Eigen::MatrixXd Qm = Eigen::MatrixXd::Zero(n_, m_);
    Qm.topRows(m_) = u_small_;
    return qr_->householderQ() * Qm;
  }

  struct Projection {
    Eigen::VectorXd beta;  // U^T b
    double tail_sq = 0.0;  // ||b - U U^T b||^2
  };

  [[nodiscard]] Projection project(const Eigen::VectorXd& b) const {
    if (b.size() != n_) throw std::invalid_argument("svd project: length mismatch");
    Projection p;
    if (qr_) {
      const Eigen::VectorXd qtb = qr_->householderQ().adjoint() * b;
      p.beta = u_small_.transpose() * qtb.head(m_);
      p.tail_sq = qtb.tail(n_ - m_).squaredNorm();
    } else {
      p.beta = u_small_.transpose() * b;
      p.tail_sq = std::max(0.0, b.squaredNorm() - p.beta.squaredNorm());
    }
    return p;
  }

  /// Threshold below which singular values count as zero.
  [[nodiscard]] double rank_tolerance() const {
    if (sigma_.size() == 0) return 0.0;
    return static_cast<double>(std::max(n_, m_)) * std::numeric_limits<double>::epsilon() * sigma_[0];
  }

  [[nodiscard]] Eigen::Index numerical_rank() const {
    const double tol = rank_tolerance();
    Eigen::Index r = 0;
    for (Eigen::Index i = 0; i < sigma_.size(); ++i) r += sigma_[i] > tol ? 1 : 0;
    return r;
  }

 private:
  Eigen::Index n_ = 0;
  Eigen::Index m_ = 0;
  std::shared_ptr<Eigen::HouseholderQR<Eigen::MatrixXd>> qr_;
  Eigen::MatrixXd u_small_;
  Eigen::VectorXd sigma_;
  Eigen::MatrixXd v_;
};

struct TikhonovSolution {
  Eigen::VectorXd s;
  double lambda_sq = 0.0;
  Eigen::VectorXd filters;
  double residual_norm = 0.0;
  double solution_norm = 0.0;
  bool rank_deficient = false;  // lambda_sq = 0 on a rank-deficient system: minimum-norm solution
};

namespace detail {

struct SpectralNorms {
  double residual_sq;
  double solution_sq;
};

inline SpectralNorms spectral_norms(const Eigen::VectorXd& sigma, const SvdFactors::Projection& p, double lambda_sq,
                                    double tol) {
  double res = p.tail_sq;
  double sol = 0.0;
  for (Eigen::Index i = 0; i < sigma.size(); ++i) {
    const double s = sigma[i];
    const double beta = p.beta[i];
    if (lambda_sq == 0.0) {
      if (s > tol) {
        sol += (beta / s) * (beta / s);
      } else {
        res += beta * beta;
      }
      continue;
    }
    const double denom = s * s + lambda_sq;
    const double miss = lambda_sq / denom * beta;  // (1 - f_i) beta_i
    const double coef = s / denom * beta;          // f_i beta_i / sigma_i
    res += miss * miss;
    sol += coef * coef;
  }
  return {res, sol};
}

}  // namespace detail

/// Minimizer of ||A s - b||^2 + lambda_sq ||s||^2 given the SVD of A.
inline TikhonovSolution solve_tikhonov(const SvdFactors& svd, const SvdFactors::Projection& proj, double lambda_sq) {
  if (!(lambda_sq >= 0.0) || !std::isfinite(lambda_sq)) throw std::invalid_argument("lambda_sq must be finite and >= 0");
  const auto& sigma = svd.sigma();
  const double tol = svd.rank_tolerance();
  TikhonovSolution out;
  out.lambda_sq = lambda_sq;
  out.filters.resize(sigma.size());
  Eigen::VectorXd coef(sigma.size());
  for (Eigen::Index i = 0; i < sigma.size(); ++i) {
    const double s = sigma[i];
    if (lambda_sq == 0.0) {
      const bool keep = s > tol;
      out.filters[i] = keep ? 1.0 : 0.0;
      coef[i] = keep ? proj.beta[i] / s : 0.0;
      if (!keep) out.rank_deficient = true;
    } else {
      out.filters[i] = s * s / (s * s + lambda_sq);
      coef[i] = s / (s * s + lambda_sq) * proj.beta[i];
    }
  }
  out.s = svd.V() * coef;
  const auto norms = detail::spectral_norms(sigma, proj, lambda_sq, tol);
  out.residual_norm = std::sqrt(norms.residual_sq);
  out.solution_norm = std::sqrt(norms.solution_sq);
  if (!out.s.allFinite()) throw std::runtime_error("solve_tikhonov: non-finite solution");
  return out;
}

inline TikhonovSolution solve_tikhonov(const SvdFactors& svd, const Eigen::VectorXd& b, double lambda_sq) {
  return solve_tikhonov(svd, svd.project(b), lambda_sq);
}

inline TikhonovSolution solve_tikhonov(const Eigen::MatrixXd& A, const Eigen::VectorXd& b, double lambda_sq) {
  const SvdFactors svd(A);
  return solve_tikhonov(svd, b, lambda_sq);
}

/// Log-spaced lambda^2 values, descending.
inline std::vector<double> log_grid(double lo, double hi, int count) {
  if (count < 2 || !(lo > 0) || !(hi > lo)) throw std::invalid_argument("log_grid: need 0 < lo < hi and count >= 2");
  std::vector<double> g(static_cast<std::size_t>(count));
  const double a = std::log10(lo);
  const double b = std::log10(hi);
  for (int i = 0; i < count; ++i) g[static_cast<std::size_t>(i)] = std::pow(10.0, b - (b - a) * i / (count - 1));
  return g;
}

inline std::vector<double> default_lambda_grid() { return log_grid(1e-34, 1e-1, 40); }

struct LCurvePoint {
  double lambda_sq = 0.0;
  double residual_norm = 0.0;
  double solution_norm = 0.0;
  double curvature = 0.0;
  bool used = true;  // survived monotone cleanup
  bool selected = false;
};

struct LCurve {
  std::vector<LCurvePoint> points;
  std::size_t selected = 0;
  double lambda_sq = 0.0;
  bool distinct_corner = true;
};

/// Signed curvature of the circle through three points; positive for a
/// left turn.
inline double circumscribed_curvature(double x1, double y1, double x2, double y2, double x3, double y3) {
  const double ax = x2 - x1;
  const double ay = y2 - y1;
  const double bx = x3 - x2;
  const double by = y3 - y2;
  const double cx = x3 - x1;
  const double cy = y3 - y1;
  const double denom = std::sqrt((ax * ax + ay * ay) * (bx * bx + by * by) * (cx * cx + cy * cy));
  if (denom == 0.0) return 0.0;
  return 2.0 * (ax * by - ay * bx) / denom;
}

/// Corner of the (log residual, log solution-norm) curve over `grid`.
inline LCurve lcurve_select(const SvdFactors& svd, const SvdFactors::Projection& proj, std::vector<double> grid) {
  if (grid.size() < 5) throw std::invalid_argument("lcurve_select: grid needs at least 5 points");
  for (double g : grid) {
    if (!(g > 0) || !std::isfinite(g)) throw std::invalid_argument("lcurve_select: grid values must be positive");
  }
  std::sort(grid.begin(), grid.end(), std::greater<>());
  if (std::log10(grid.front() / grid.back()) < 6.0 - 1e-9) {
    throw std::invalid_argument("lcurve_select: grid must span at least 6 decades");
  }
  LCurve curve;
  const double tol = svd.rank_tolerance();
  for (double l : grid) {
    const auto n = detail::spectral_norms(svd.sigma(), proj, l, tol);
    curve.points.push_back({l, std::sqrt(n.residual_sq), std::sqrt(n.solution_sq), 0.0, true, false});
  }
  // Monotone cleanup: going down in lambda the residual must keep falling.
  std::vector<std::size_t> kept{0};
  for (std::size_t i = 1; i < curve.points.size(); ++i) {
    const double prev = curve.points[kept.back()].residual_norm;
    if (prev - curve.points[i].residual_norm > 1e-14 * prev && curve.points[i].solution_norm > 0) {
      kept.push_back(i);
    } else {
      curve.points[i].used = false;
    }
  }
  auto lx = [&](std::size_t i) { return std::log10(std::max(curve.points[i].residual_norm, 1e-300)); };
  auto ly = [&](std::size_t i) { return std::log10(std::max(curve.points[i].solution_norm, 1e-300)); };
  std::size_t best = kept.front();
  double best_k = -std::numeric_limits<double>::infinity();
  bool any_pos = false;
  bool any_neg = false;
  for (std::size_t t = 1; t + 1 < kept.size(); ++t) {
    const auto i0 = kept[t - 1];
    const auto i1 = kept[t];
    const auto i2 = kept[t + 1];
    // Traversed with decreasing lambda the corner is a right turn; flip so it is positive.
    const double kappa = -circumscribed_curvature(lx(i0), ly(i0), lx(i1), ly(i1), lx(i2), ly(i2));
    curve.points[i1].curvature = kappa;
    if (kappa > 1e-12) any_pos = true;
    if (kappa < -1e-12) any_neg = true;
    if (kappa > best_k) {
      best_k = kappa;
      best = i1;
    }
  }
  if (kept.size() < 3) {
    best = kept.back();
    curve.distinct_corner = false;
  } else {
    curve.distinct_corner = any_pos && any_neg;
  }
  curve.selected = best;
  curve.points[best].selected = true;
  curve.lambda_sq = curve.points[best].lambda_sq;
  return curve;
}

inline LCurve lcurve_select(const SvdFactors& svd, const Eigen::VectorXd& b, std::vector<double> grid) {
  return lcurve_select(svd, svd.project(b), std::move(grid));
}

inline void write_lcurve_csv(std::ostream& os, const LCurve& curve) {
  os << "lambda_sq,residual_norm,solution_norm,curvature,selected\n";
  os.precision(17);
  for (const auto& p : curve.points) {
    os << p.lambda_sq << ',' << p.residual_norm << ',' << p.solution_norm << ',' << p.curvature << ','
       << (p.selected ? 1 : 0) << '\n';
  }
}

struct BoundInputs {
  double delta_all = 0.0;
  double eta_M = 0.0;
  double nu = 1.0;
  double C_nu = 1.0;
  double w_norm = 1.0;
  double lambda_sq = -1.0;  // lambda in use; negative means "use the optimum"
};

struct BoundDiagnostics {
  double delta_all = 0.0;
  double eta_M = 0.0;
  double nu = 1.0;
  double C_nu = 1.0;
  double w_norm = 1.0;
  double lambda_opt_sq = 0.0;
  double lambda_sq = 0.0;
  double bound_value = 0.0;   // generic bound at lambda_sq
  double optimal_rate = 0.0;  // closed-form bound at the optimum
};

/// (delta+eta)/(2 lambda) + C_nu lambda^(2 nu) ||w||.
inline double tikhonov_bound(double delta_plus_eta, double lambda_sq, double nu, double C_nu, double w_norm) {
  const double lambda = std::sqrt(lambda_sq);
  return delta_plus_eta / (2.0 * lambda) + C_nu * std::pow(lambda_sq, nu) * w_norm;
}

inline BoundDiagnostics error_bound(const BoundInputs& in) {
  if (!(in.nu > 0.0 && in.nu <= 1.0)) throw std::invalid_argument("bound: nu must lie in (0, 1]");
  if (!(in.C_nu > 0.0)) throw std::invalid_argument("bound: C_nu must be positive");
  if (!(in.w_norm > 0.0)) throw std::invalid_argument("bound: ||w|| must be positive");
  BoundDiagnostics d;
  d.delta_all = in.delta_all;
  d.eta_M = in.eta_M;
  d.nu = in.nu;
  d.C_nu = in.C_nu;
  d.w_norm = in.w_norm;
  const double e = in.delta_all + in.eta_M;
  const double p = 2.0 * in.nu + 1.0;
  d.lambda_opt_sq = std::pow(e / (4.0 * in.nu * in.C_nu * in.w_norm), 2.0 / p);
  d.lambda_sq = in.lambda_sq >= 0.0 ? in.lambda_sq : d.lambda_opt_sq;
  d.bound_value = (e == 0.0 && d.lambda_sq == 0.0) ? 0.0 : tikhonov_bound(e, d.lambda_sq, in.nu, in.C_nu, in.w_norm);
  d.optimal_rate = p * std::pow(4.0 * in.nu, -2.0 * in.nu / p) * std::pow(in.C_nu * in.w_norm, 1.0 / p) *
                   std::pow(e, 2.0 * in.nu / p);
  return d;
}

}  // namespace helm
