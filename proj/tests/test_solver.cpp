#include <cmath>
#include <random>
#include <sstream>

#include <Eigen/Cholesky>
#include <gtest/gtest.h>

#include "helm/solver.hpp"

using namespace helm;

namespace {

Eigen::MatrixXd random_matrix(Eigen::Index n, Eigen::Index m, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Eigen::MatrixXd A(n, m);
  for (Eigen::Index i = 0; i < A.size(); ++i) A.data()[i] = g(rng);
  return A;
}

Eigen::VectorXd random_vector(Eigen::Index n, std::mt19937_64& rng) { return random_matrix(n, 1, rng).col(0); }

Eigen::VectorXd normal_equations(const Eigen::MatrixXd& A, const Eigen::VectorXd& b, double lambda_sq) {
  const Eigen::MatrixXd H = A.transpose() * A + lambda_sq * Eigen::MatrixXd::Identity(A.cols(), A.cols());
  return H.llt().solve(A.transpose() * b);
}

// Ill-conditioned Hilbert-like matrix with a smooth true solution.
struct Problem {
  Eigen::MatrixXd A;
  Eigen::VectorXd x;
  Eigen::VectorXd b;
};

Problem hilbert_problem(Eigen::Index n, Eigen::Index m, double noise, std::uint64_t seed) {
  Problem p;
  p.A.resize(n, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) p.A(i, j) = 1.0 / (static_cast<double>(i) * m / n + j + 1.0);
  }
  p.x.resize(m);
  for (Eigen::Index j = 0; j < m; ++j) p.x[j] = std::sin(0.3 * static_cast<double>(j));
  std::mt19937_64 rng(seed);
  const Eigen::VectorXd clean = p.A * p.x;
  p.b = clean + noise * clean.norm() / std::sqrt(static_cast<double>(n)) * random_vector(n, rng);
  return p;
}

}  // namespace

TEST(Tikhonov, IdentityHalvesAtUnitLambda) {
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(6, 6);
  Eigen::VectorXd b(6);
  b << 1, -2, 3, 0.5, 4, -1;
  const auto sol = solve_tikhonov(I, b, 1.0);
  EXPECT_LE((sol.s - 0.5 * b).norm(), 1e-15);
  for (Eigen::Index i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(sol.filters[i], 0.5);
}

TEST(Tikhonov, FilterMidpointAtSigmaEqualsLambda) {
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(4, 3);
  A(0, 0) = 3.0;
  A(1, 1) = 0.1;
  A(2, 2) = 1e-3;
  SvdFactors svd(A);
  for (Eigen::Index i = 0; i < 3; ++i) {
    const double s = svd.sigma()[i];
    const auto sol = solve_tikhonov(svd, Eigen::VectorXd::Ones(4), s * s);
    EXPECT_NEAR(sol.filters[i], 0.5, 1e-15);
  }
}

TEST(Tikhonov, MatchesNormalEquationsOnRandomSystems) {
  std::mt19937_64 rng(42);
  for (int t = 0; t < 20; ++t) {
    const auto A = random_matrix(40, 25, rng);
    const auto b = random_vector(40, rng);
    for (double l : {1e-6, 1e-2, 1.0, 10.0}) {
      const auto sol = solve_tikhonov(A, b, l);
      const auto ref = normal_equations(A, b, l);
      EXPECT_LE((sol.s - ref).norm(), 1e-8 * ref.norm());
      EXPECT_NEAR(sol.residual_norm, (A * sol.s - b).norm(), 1e-10 * b.norm());
      EXPECT_NEAR(sol.solution_norm, sol.s.norm(), 1e-10 * sol.s.norm());
      const Eigen::VectorXd ne = (A.transpose() * A + l * Eigen::MatrixXd::Identity(25, 25)) * sol.s - A.transpose() * b;
      EXPECT_LE(ne.norm(), 1e-8 * (A.transpose() * b).norm());
    }
  }
  // Wide systems take the direct SVD path.
  const auto W = random_matrix(15, 30, rng);
  const auto bw = random_vector(15, rng);
  EXPECT_LE((solve_tikhonov(W, bw, 0.1).s - normal_equations(W, bw, 0.1)).norm(), 1e-8 * normal_equations(W, bw, 0.1).norm());
}

TEST(Tikhonov, StrictConvexity) {
  std::mt19937_64 rng(7);
  const auto A = random_matrix(30, 20, rng);
  const auto b = random_vector(30, rng);
  const double l = 0.05;
  const auto sol = solve_tikhonov(A, b, l);
  auto objective = [&](const Eigen::VectorXd& s) { return (A * s - b).squaredNorm() + l * s.squaredNorm(); };
  const double f0 = objective(sol.s);
  for (int i = 0; i < 100; ++i) {
    Eigen::VectorXd p = random_vector(20, rng);
    p *= std::pow(10.0, -3.0 + 3.0 * i / 100.0);
    EXPECT_GT(objective(sol.s + p), f0);
  }
}

TEST(Tikhonov, FilterMonotonicity) {
  const auto p = hilbert_problem(50, 30, 1e-3, 3);
  SvdFactors svd(p.A);
  const auto grid = log_grid(1e-16, 1.0, 30);  // descending
  TikhonovSolution prev = solve_tikhonov(svd, p.b, grid.front());
  for (std::size_t i = 1; i < grid.size(); ++i) {
    const auto cur = solve_tikhonov(svd, p.b, grid[i]);
    for (Eigen::Index j = 0; j < cur.filters.size(); ++j) {
      EXPECT_GE(cur.filters[j], prev.filters[j]);
      EXPECT_GE(cur.filters[j], 0.0);
      EXPECT_LE(cur.filters[j], 1.0);
    }
    EXPECT_GE(cur.solution_norm, prev.solution_norm * (1 - 1e-12));
    EXPECT_LE(cur.residual_norm, prev.residual_norm * (1 + 1e-12));
    prev = cur;
  }
}

TEST(Tikhonov, RankDeficientMinimumNorm) {
  std::mt19937_64 rng(5);
  const auto L = random_matrix(20, 4, rng);
  const auto R = random_matrix(4, 10, rng);
  const Eigen::MatrixXd A = L * R;  // rank 4
  const auto b = random_vector(20, rng);
  const auto sol = solve_tikhonov(A, b, 0.0);
  EXPECT_TRUE(sol.rank_deficient);
  const Eigen::VectorXd pinv = A.completeOrthogonalDecomposition().solve(b);
  EXPECT_LE((sol.s - pinv).norm(), 1e-8 * pinv.norm());
  EXPECT_THROW(solve_tikhonov(A, b, -1.0), std::invalid_argument);
  EXPECT_FALSE(solve_tikhonov(random_matrix(10, 5, rng), random_vector(10, rng), 0.0).rank_deficient);
}

TEST(Svd, ReconstructionAndOrthonormality) {
  std::mt19937_64 rng(11);
  for (auto [n, m] : {std::pair<Eigen::Index, Eigen::Index>{60, 25}, {25, 60}, {30, 30}}) {
    const auto A = random_matrix(n, m, rng);
    SvdFactors svd(A);
    const Eigen::MatrixXd U = svd.U();
    const auto r = std::min(n, m);
    ASSERT_EQ(U.cols(), r);
    const Eigen::MatrixXd Vr = svd.V().leftCols(r);
    EXPECT_LE((A - U * svd.sigma().head(r).asDiagonal() * Vr.transpose()).norm(), 1e-10 * A.norm());
    EXPECT_LE((U.transpose() * U - Eigen::MatrixXd::Identity(r, r)).norm(), 1e-10);
    EXPECT_LE((Vr.transpose() * Vr - Eigen::MatrixXd::Identity(r, r)).norm(), 1e-10);
    for (Eigen::Index i = 1; i < svd.sigma().size(); ++i) EXPECT_LE(svd.sigma()[i], svd.sigma()[i - 1]);
    EXPECT_GE(svd.sigma().minCoeff(), 0.0);
    // Projection: beta = U^T b and the tail is the exact out-of-range residual.
    const auto b = random_vector(n, rng);
    const auto pr = svd.project(b);
    EXPECT_LE((pr.beta.head(r) - U.transpose() * b).norm(), 1e-12 * b.norm());
    EXPECT_NEAR(pr.tail_sq, (b - U * (U.transpose() * b)).squaredNorm(), 1e-10 * b.squaredNorm());
  }
  EXPECT_THROW(SvdFactors(Eigen::MatrixXd()), std::invalid_argument);
}

TEST(LCurve, GridValidation) {
  Eigen::MatrixXd A = Eigen::MatrixXd::Identity(5, 5);
  SvdFactors svd(A);
  const Eigen::VectorXd b = Eigen::VectorXd::Ones(5);
  EXPECT_THROW(lcurve_select(svd, b, {1e-4}), std::invalid_argument);
  EXPECT_THROW(lcurve_select(svd, b, log_grid(1e-4, 1e-1, 10)), std::invalid_argument);
  EXPECT_THROW(lcurve_select(svd, b, {1e-8, 1e-6, -1.0, 1e-2, 1.0}), std::invalid_argument);
  EXPECT_NO_THROW(lcurve_select(svd, b, log_grid(1e-7, 1e-1, 5)));
  const auto g = default_lambda_grid();
  EXPECT_EQ(g.size(), 40u);
  EXPECT_DOUBLE_EQ(g.front(), 1e-1);
  EXPECT_NEAR(g.back(), 1e-34, 1e-46);
}

TEST(LCurve, CornerOnHilbertLikeProblem) {
  const auto p = hilbert_problem(80, 40, 1e-4, 9);
  SvdFactors svd(p.A);
  const auto proj = svd.project(p.b);
  const auto grid = log_grid(1e-20, 1e0, 41);
  const auto curve = lcurve_select(svd, proj, grid);
  // Dense-grid oracle: maximum curvature on a 20x finer grid, with the same
  // three-point formula.
  const auto dense = lcurve_select(svd, proj, log_grid(1e-20, 1e0, 801));
  const double step = std::log10(grid[0] / grid[1]);
  EXPECT_LE(std::abs(std::log10(curve.lambda_sq) - std::log10(dense.lambda_sq)), step + 1e-9)
      << curve.lambda_sq << " vs " << dense.lambda_sq;
  EXPECT_TRUE(curve.distinct_corner);
  // The corner sits between over- and under-regularization: its error beats both ends.
  auto err = [&](double l) { return (solve_tikhonov(svd, proj, l).s - p.x).norm(); };
  EXPECT_LT(err(curve.lambda_sq), err(grid.front()));
  EXPECT_LT(err(curve.lambda_sq), err(grid.back()));

  std::ostringstream os;
  write_lcurve_csv(os, curve);
  const auto s = os.str();
  EXPECT_EQ(s.substr(0, s.find('\n')), "lambda_sq,residual_norm,solution_norm,curvature,selected");
  EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 42);
}

TEST(LCurve, ConsistentSystemPrefersSmallLambda) {
  std::mt19937_64 rng(13);
  const auto A = random_matrix(40, 20, rng);
  const Eigen::VectorXd b = A * random_vector(20, rng);
  SvdFactors svd(A);
  const auto grid = log_grid(1e-20, 1e-2, 19);
  const auto curve = lcurve_select(svd, b, grid);
  EXPECT_LE(curve.lambda_sq, 1e-12);
}

TEST(LCurve, CurvatureOfCircle) {
  // Three points on a circle of radius 2 traversed counter-clockwise.
  const double k = circumscribed_curvature(2, 0, 0, 2, -2, 0);
  EXPECT_NEAR(k, 0.5, 1e-15);
  EXPECT_NEAR(circumscribed_curvature(-2, 0, 0, 2, 2, 0), -0.5, 1e-15);
  EXPECT_EQ(circumscribed_curvature(0, 0, 1, 1, 2, 2), 0.0);
}

TEST(Bound, ClosedFormExample) {
  BoundInputs in;
  in.delta_all = 3.0;
  in.eta_M = 1.0;
  const auto d = error_bound(in);
  EXPECT_NEAR(d.lambda_opt_sq, 1.0, 1e-15);
  EXPECT_NEAR(d.bound_value, 3.0, 1e-15);
  EXPECT_NEAR(d.optimal_rate, 3.0, 1e-14);
  // The optimal rate equals the generic bound at the optimum for other nu.
  for (double nu : {0.25, 0.5, 0.8}) {
    BoundInputs b{0.02, 0.01, nu, 2.0, 5.0};
    const auto r = error_bound(b);
    EXPECT_NEAR(r.bound_value, r.optimal_rate, 1e-12 * r.optimal_rate);
    // and the optimum minimizes the generic bound
    for (double f : {0.5, 0.9, 1.1, 2.0}) {
      EXPECT_GT(tikhonov_bound(0.03, f * r.lambda_opt_sq, nu, 2.0, 5.0), r.bound_value);
    }
  }
}

TEST(Bound, LimitAndValidation) {
  double prev = 1e300;
  for (double e : {1e-1, 1e-3, 1e-6, 1e-9, 1e-12}) {
    const auto d = error_bound({e, 0.0, 1.0, 1.0, 1.0});
    EXPECT_LT(d.optimal_rate, prev);
    prev = d.optimal_rate;
  }
  EXPECT_LT(prev, 1e-7);
  EXPECT_THROW(error_bound({1, 0, 0.0, 1, 1}), std::invalid_argument);
  EXPECT_THROW(error_bound({1, 0, 1.5, 1, 1}), std::invalid_argument);
  EXPECT_THROW(error_bound({1, 0, 1, 0, 1}), std::invalid_argument);
  EXPECT_THROW(error_bound({1, 0, 1, 1, 0}), std::invalid_argument);
  const auto pinned = error_bound({0.5, 0.5, 1.0, 1.0, 1.0, 0.04});
  EXPECT_NEAR(pinned.bound_value, 1.0 / 0.4 + 0.04, 1e-14);
}
