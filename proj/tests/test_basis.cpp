#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "helm/basis.hpp"

using namespace helm;

namespace {

template <int Dim>
Point<Dim> fd_gradient(const BasisSet<Dim>& set, std::size_t i, const Point<Dim>& x, double h = 1e-6) {
  Point<Dim> g;
  for (int d = 0; d < Dim; ++d) {
    Point<Dim> a = x;
    Point<Dim> b = x;
    a[d] += h;
    b[d] -= h;
    g[d] = (set.value(i, a) - set.value(i, b)) / (2 * h);
  }
  return g;
}

template <int Dim>
void expect_gradients_match(const BasisSet<Dim>& set, const Box<Dim>& box, std::uint64_t seed,
                            double skip_kink = 0.0) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < set.size(); ++i) {
    int checked = 0;
    for (int trial = 0; trial < 200 && checked < 50; ++trial) {
      Point<Dim> x;
      for (int d = 0; d < Dim; ++d) x[d] = std::uniform_real_distribution<double>(box.lo[d], box.hi[d])(rng);
      if (const auto* m = std::get_if<MorphBasis<Dim>>(&set[i])) {
        const double rr = (x - m->c).norm();
        if (m->kind == MorphKind::relu_cone && (rr < skip_kink || std::abs(rr - m->r) < skip_kink)) continue;
      }
      const Point<Dim> g = set.gradient(i, x);
      const Point<Dim> f = fd_gradient(set, i, x);
      const double scale = std::max(f.norm(), 1e-3);
      EXPECT_LE((g - f).norm() / scale, 1e-5) << "basis " << i << " at " << x.transpose();
      ++checked;
    }
    EXPECT_EQ(checked, 50);
  }
}

}  // namespace

TEST(Activation, SigmoidIsStable) {
  EXPECT_EQ(act::sigmoid(-1e6), 0.0);
  EXPECT_EQ(act::sigmoid(1e6), 1.0);
  EXPECT_DOUBLE_EQ(act::sigmoid(0.0), 0.5);
  EXPECT_NEAR(act::sigmoid(2.0) + act::sigmoid(-2.0), 1.0, 2e-16);
}

TEST(MorphBasis, SigmoidCircleExamples) {
  MorphBasis<2> b;
  b.kind = MorphKind::sigmoid_circle;
  b.K = 1000;
  b.c = Point<2>(0.5, 0.5);
  b.r = 0.2;
  EXPECT_NEAR(b.value(b.c), 1.0, 1e-15);
  EXPECT_NEAR(b.value(Point<2>(0.7, 0.5)), 0.5, 1e-12);
  EXPECT_LT(b.value(Point<2>(5.0, 5.0)), 1e-300);
}

TEST(MorphBasis, ValueRanges) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const std::vector<MorphKind> kinds{MorphKind::sigmoid_circle, MorphKind::sigmoid_rectangle,
                                     MorphKind::truncated_gaussian_circle, MorphKind::gaussian_bump,
                                     MorphKind::relu_cone};
  for (auto kind : kinds) {
    MorphBasis<2> b;
    b.kind = kind;
    b.K = 50;
    b.c = Point<2>(0.1, -0.2);
    b.r = 0.3;
    b.half = Point<2>(0.2, 0.1);
    b.v = 4.0;
    for (int i = 0; i < 500; ++i) {
      const double v = b.value(Point<2>(u(rng), u(rng)));
      EXPECT_GE(v, 0.0);
      if (kind == MorphKind::relu_cone) {
        EXPECT_LE(v, b.r);
      } else {
        EXPECT_LE(v, 1.0);
      }
      if (kind == MorphKind::gaussian_bump) EXPECT_GT(v, 0.0);
    }
  }
}

TEST(Gradients, RandomFeaturesAllActivations) {
  Box<2> box{Point<2>(-0.5, -0.5), Point<2>(2.5, 2.5)};
  BasisSet<2> set;
  auto add = [&](Activation a, std::uint64_t seed) {
    set.append(build_random_set<2>(3, 20.0, a, seed, Standardization<2>::of(Box<2>{Point<2>(0, 0), Point<2>(2, 2)})));
  };
  add(Activation::sin, 1);
  add(Activation::tanh, 2);
  expect_gradients_match(set, box, 11);

  // relu: avoid its kink by checking only points away from k.x+b = 0
  auto relu = build_random_set<2>(3, 2.0, Activation::relu, 5);
  std::mt19937_64 rng(4);
  for (std::size_t i = 0; i < relu.size(); ++i) {
    const auto& f = std::get<RandomFeature<2>>(relu[i]);
    for (int t = 0; t < 50; ++t) {
      Point<2> x(std::uniform_real_distribution<double>(-1, 1)(rng), std::uniform_real_distribution<double>(-1, 1)(rng));
      const double z = f.effective_direction().dot(x) + f.effective_bias();
      if (std::abs(z) < 1e-3) continue;
      EXPECT_LE((relu.gradient(i, x) - fd_gradient(relu, i, x)).norm(), 1e-5 * std::max(1.0, f.k.norm()));
    }
  }
}

TEST(Gradients, PouLocalizedFeatures) {
  Box<1> line{Point<1>(0.0), Point<1>(1.0)};
  auto part = PoUPartition<1>::uniform(line, {4}, PouKind::b);
  auto set = build_pou_set<1>(part, 3, 1.0, Activation::tanh, 8);
  Box<1> wide{Point<1>(-0.1), Point<1>(1.1)};
  expect_gradients_match(set, wide, 12);

  Box<2> sq{Point<2>(0, 0), Point<2>(1, 1)};
  auto part2 = PoUPartition<2>::uniform(sq, {2, 2}, PouKind::b);
  auto set2 = build_pou_set<2>(part2, 2, 1.0, Activation::sin, 9);
  expect_gradients_match(set2, sq, 13);
}

TEST(Gradients, MorphologyKinds2D) {
  Box<2> box{Point<2>(0, 0), Point<2>(1, 1)};
  std::vector<BasisFunction<2>> fns;
  MorphBasis<2> b;
  b.c = Point<2>(0.5, 0.5);
  b.K = 30;
  b.r = 0.2;
  b.v = 6.0;
  b.half = Point<2>(0.1, 0.2);
  for (auto kind : {MorphKind::sigmoid_circle, MorphKind::truncated_gaussian_circle, MorphKind::gaussian_bump,
                    MorphKind::relu_cone}) {
    b.kind = kind;
    fns.emplace_back(b);
  }
  BasisSet<2> set;
  set.add_group("morph", 0, std::move(fns));
  expect_gradients_match(set, box, 21, 1e-4);

  // Rectangle: the box distance is smooth away from the diagonal ridges
  // |dx| - hx = |dy| - hy, so sample away from them.
  MorphBasis<2> rect = b;
  rect.kind = MorphKind::sigmoid_rectangle;
  std::mt19937_64 rng(22);
  BasisSet<2> rs;
  rs.add_group("rect", 0, {rect});
  int checked = 0;
  while (checked < 50) {
    Point<2> x(std::uniform_real_distribution<double>(0, 1)(rng), std::uniform_real_distribution<double>(0, 1)(rng));
    const Point<2> dx = x - rect.c;
    if (std::abs((std::abs(dx[0]) - rect.half[0]) - (std::abs(dx[1]) - rect.half[1])) < 1e-4) continue;
    const Point<2> f = fd_gradient(rs, 0, x);
    EXPECT_LE((rs.gradient(0, x) - f).norm() / std::max(f.norm(), 1e-3), 1e-5);
    ++checked;
  }
}

TEST(Gradients, ContourEuclideanKind) {
  auto base = std::make_shared<const Contour>(circle_contour(Point2(0.5, 0.5), 0.2, 400));
  MorphBasis<2> b;
  b.kind = MorphKind::contour_sigmoid;
  b.K = 20;
  b.distance = ContourDistance::euclidean;
  b.contour = base;
  BasisSet<2> set;
  set.add_group("contour", 0, {b});
  std::mt19937_64 rng(31);
  int checked = 0;
  while (checked < 50) {
    Point<2> x(std::uniform_real_distribution<double>(0, 1)(rng), std::uniform_real_distribution<double>(0, 1)(rng));
    // The distance to a polygon has ridges at the center and along vertex bisectors;
    // stay away from the medial axis (center) and near-vertex points.
    if ((x - Point<2>(0.5, 0.5)).norm() < 0.05) continue;
    const Point<2> f = fd_gradient(set, 0, x, 1e-7);
    EXPECT_LE((set.gradient(0, x) - f).norm() / std::max(f.norm(), 1e-3), 1e-4);
    ++checked;
  }
}

TEST(Gradients, TorusKind) {
  MorphBasis<3> b;
  b.kind = MorphKind::torus_sigmoid;
  b.K = 30;
  b.c = Point<3>(0, 0, 0);
  b.R = 0.25;
  b.r = 0.15;
  BasisSet<3> set;
  set.add_group("torus", 0, {b});
  Box<3> box{Point<3>(-0.5, -0.5, -0.5), Point<3>(0.5, 0.5, 0.5)};
  expect_gradients_match(set, box, 41);
  EXPECT_GT(b.value(Point<3>(0.25, 0, 0)), 0.5);
  EXPECT_LT(b.value(Point<3>(0, 0, 0)), 0.5);
}

TEST(Gradients, Morphology3D) {
  MorphBasis<3> b;
  b.c = Point<3>(0.3, 0.5, 0.3);
  b.K = 40;
  b.r = 0.2;
  b.v = 10.0;
  b.half = Point<3>(0.1, 0.15, 0.2);
  std::vector<BasisFunction<3>> fns;
  for (auto kind : {MorphKind::sigmoid_circle, MorphKind::truncated_gaussian_circle, MorphKind::gaussian_bump,
                    MorphKind::relu_cone}) {
    b.kind = kind;
    fns.emplace_back(b);
  }
  BasisSet<3> set;
  set.add_group("morph", 0, std::move(fns));
  expect_gradients_match(set, Box<3>{}, 51, 1e-4);
}

TEST(MorphBasis, ReluConeSubgradientAtKinks) {
  MorphBasis<2> b;
  b.kind = MorphKind::relu_cone;
  b.c = Point<2>(0.3, 0.5);
  b.r = 0.2;
  EXPECT_EQ(b.gradient(b.c), Point<2>::Zero());
  EXPECT_EQ(b.gradient(Point<2>(0.5, 0.5)), Point<2>::Zero());
  EXPECT_NEAR(b.value(b.c), 0.2, 1e-16);
}

TEST(MorphBasis, RectangleTendsToIndicator) {
  MorphBasis<2> b;
  b.kind = MorphKind::sigmoid_rectangle;
  b.K = 1e6;
  b.c = Point<2>(0.39, 0.5);
  b.half = Point<2>(0.1, 0.2);
  std::mt19937_64 rng(61);
  int tested = 0;
  while (tested < 2000) {
    Point<2> x(std::uniform_real_distribution<double>(0, 1)(rng), std::uniform_real_distribution<double>(0, 1)(rng));
    const Point<2> dx = (x - b.c).cwiseAbs() - b.half;
    const double sdf = dx.maxCoeff() > 0 ? dx.cwiseMax(0.0).norm() : dx.maxCoeff();
    if (std::abs(sdf) < 1e-3) continue;
    const double v = b.value(x);
    if (sdf < 0) {
      EXPECT_GT(v, 1 - 1e-3);
    } else {
      EXPECT_LT(v, 1e-3);
    }
    ++tested;
  }
}

TEST(PoU, KindBSumsToOneOnInterior) {
  for (int patches : {3, 4, 7}) {
    Box<1> line{Point<1>(-1.0), Point<1>(2.0)};
    auto part = PoUPartition<1>::uniform(line, {patches}, PouKind::b);
    const double h = 3.0 / patches;
    std::mt19937_64 rng(static_cast<std::uint64_t>(patches));
    // Covered interior: everything beyond the outer transition zones.
    std::uniform_real_distribution<double> u(-1.0 + 0.25 * h, 2.0 - 0.25 * h);
    for (int i = 0; i < 1000; ++i) EXPECT_NEAR(part.sum(Point<1>(u(rng))), 1.0, 1e-12);
  }
}

TEST(PoU, KindAIsIndicatorAndKindBIsC1) {
  EXPECT_EQ(pou::value(PouKind::a, 0.99), 1.0);
  EXPECT_EQ(pou::value(PouKind::a, 1.01), 0.0);
  for (double t : {-1.25, -0.75, 0.75, 1.25}) {
    EXPECT_NEAR(pou::value(PouKind::b, t - 1e-9), pou::value(PouKind::b, t + 1e-9), 1e-7);
    EXPECT_NEAR(pou::derivative(PouKind::b, t - 1e-12), pou::derivative(PouKind::b, t + 1e-12), 1e-9);
  }
  EXPECT_DOUBLE_EQ(pou::value(PouKind::b, 0.0), 1.0);
  EXPECT_NEAR(pou::value(PouKind::b, 1.0), 0.5, 1e-15);
}

TEST(RandomSet, DeterministicAndSized) {
  const auto a = build_random_set<2>(3200, 20.0, Activation::sin, 77);
  const auto b = build_random_set<2>(3200, 20.0, Activation::sin, 77);
  ASSERT_EQ(a.size(), 3200u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& fa = std::get<RandomFeature<2>>(a[i]);
    const auto& fb = std::get<RandomFeature<2>>(b[i]);
    EXPECT_EQ(fa.k, fb.k);
    EXPECT_EQ(fa.b, fb.b);
    EXPECT_LE(fa.k.cwiseAbs().maxCoeff(), 20.0);
    EXPECT_LE(std::abs(fa.b), 20.0);
  }
  const auto t = build_random_set<2>(2400, 2.0, Activation::tanh, 4);
  EXPECT_EQ(t.size(), 2400u);
  EXPECT_EQ(std::get<RandomFeature<2>>(t[0]).activation, Activation::tanh);

  Eigen::Matrix<double, 2, Eigen::Dynamic> pts = Eigen::Matrix<double, 2, Eigen::Dynamic>::Random(2, 37);
  EXPECT_EQ(a.evaluate(pts), b.evaluate(pts));
  const auto c = build_random_set<2>(3200, 20.0, Activation::sin, 78);
  EXPECT_NE(a.evaluate(pts), c.evaluate(pts));
  EXPECT_THROW(build_random_set<2>(0, 1.0, Activation::sin, 0), std::invalid_argument);
}

TEST(RandomSet, VectorizedEvaluationMatchesPointwise) {
  auto set = build_random_set<2>(20, 5.0, Activation::tanh, 3, Standardization<2>::of(Box<2>{Point<2>(-0.3, -0.3), Point<2>(0.3, 0.3)}));
  Eigen::Matrix<double, 2, Eigen::Dynamic> pts = 0.3 * Eigen::Matrix<double, 2, Eigen::Dynamic>::Random(2, 15);
  const Eigen::MatrixXd E = set.evaluate(pts);
  for (Eigen::Index j = 0; j < pts.cols(); ++j) {
    for (std::size_t m = 0; m < set.size(); ++m) {
      EXPECT_NEAR(E(j, static_cast<Eigen::Index>(m)), set.value(m, pts.col(j)), 1e-14);
    }
  }
}

namespace {

ShapeEstimate<2> disc_shape() {
  ShapeEstimate<2> s;
  s.center = Point<2>(0.5, 0.498);
  s.radius = 0.2209;
  s.peak = Point<2>(0.5, 0.5);
  s.extent = Point<2>(0.44, 0.44);
  s.v_min = 5.775;
  s.v_max = 12.6;
  s.size = 100;
  return s;
}

}  // namespace

TEST(Sampling, CircleWithinWindows) {
  MorphSampling s;
  const auto shape = disc_shape();
  const auto fns = sample_morphology<2>(MorphKind::sigmoid_circle, shape, s, 400, 5);
  ASSERT_EQ(fns.size(), 400u);
  for (const auto& f : fns) {
    const auto& m = std::get<MorphBasis<2>>(f);
    EXPECT_GE(m.K, 1000.0);
    EXPECT_LE(m.K, 20000.0);
    EXPECT_GE(m.r, 0.9 * 0.2209);
    EXPECT_LE(m.r, 1.1 * 0.2209);
    EXPECT_GE(m.c[0], 0.97 * 0.5);
    EXPECT_LE(m.c[0], 1.03 * 0.5);
    EXPECT_GE(m.c[1], 0.97 * 0.498);
    EXPECT_LE(m.c[1], 1.03 * 0.498);
  }
}

TEST(Sampling, GaussianBumpAbsoluteCenterWindow) {
  ShapeEstimate<3> shape;
  shape.center = shape.peak = Point<3>(0.3, 0.5, 0.3);
  shape.size = 10;
  MorphSampling s;
  s.center_abs = 0.02;
  s.v = Range{5.775, 25.2};
  const auto fns = sample_morphology<3>(MorphKind::gaussian_bump, shape, s, 300, 6);
  for (const auto& f : fns) {
    const auto& m = std::get<MorphBasis<3>>(f);
    EXPECT_LE((m.c - shape.peak).cwiseAbs().maxCoeff(), 0.02);
    EXPECT_GE(m.v, 5.775);
    EXPECT_LE(m.v, 25.2);
  }
}

TEST(Sampling, ZeroWindowsReproduceDetectedValues) {
  MorphSampling s;
  s.K = Range{5000, 5000};
  s.eps_c = 0;
  s.eps_r = 0;
  s.eps_extent = {0, 0};
  const auto shape = disc_shape();
  for (auto kind : {MorphKind::sigmoid_circle, MorphKind::sigmoid_rectangle, MorphKind::relu_cone}) {
    for (const auto& f : sample_morphology<2>(kind, shape, s, 10, 1)) {
      const auto& m = std::get<MorphBasis<2>>(f);
      if (kind != MorphKind::relu_cone) EXPECT_EQ(m.K, 5000.0);
      if (kind == MorphKind::relu_cone) {
        EXPECT_EQ(m.c, shape.peak);
      } else {
        EXPECT_EQ(m.c, shape.center);
      }
      if (kind == MorphKind::sigmoid_rectangle) {
        EXPECT_DOUBLE_EQ(m.half[0], 0.22);
      } else {
        EXPECT_EQ(m.r, shape.radius);
      }
    }
  }
}

TEST(Sampling, RejectsEmptyRegion) {
  ShapeEstimate<2> empty;
  EXPECT_THROW(sample_morphology<2>(MorphKind::sigmoid_circle, empty, MorphSampling{}, 5, 1), std::invalid_argument);
  auto shape = disc_shape();
  EXPECT_THROW(sample_morphology<2>(MorphKind::contour_sigmoid, shape, MorphSampling{}, 5, 1), std::invalid_argument);
}

TEST(Contour, OffsetCircle) {
  const auto base = circle_contour(Point2(0.5, 0.5), 0.2, 256);
  const auto off = offset_contour(base, -0.02);
  for (const auto& p : off.points()) EXPECT_NEAR((p - Point2(0.5, 0.5)).norm(), 0.18, 1e-3);
  const auto same = offset_contour(base, 0.0);
  std::mt19937_64 rng(7);
  for (int i = 0; i < 500; ++i) {
    Point2 x(std::uniform_real_distribution<double>(0, 1)(rng), std::uniform_real_distribution<double>(0, 1)(rng));
    EXPECT_EQ(same.contains(x), base.contains(x));
  }
  // The literal rule scales the step by n . x; for a circle about the origin
  // that is the radius, so the offset radius is r (1 + rho).
  const auto origin = circle_contour(Point2(0, 0), 0.2, 256);
  const auto lit = offset_contour(origin, -0.1, OffsetRule::literal);
  for (const auto& p : lit.points()) EXPECT_NEAR(p.norm(), 0.18, 1e-3);
}

TEST(Contour, ClosedNormalsAndOrientation) {
  std::vector<Point2> cw{{0, 0}, {0, 1}, {1, 1}, {1, 0}, {0, 0}};
  Contour c(cw);
  EXPECT_EQ(c.size(), 4u);
  EXPECT_GT(c.signed_area(), 0.0);
  const auto closed = c.closed_points();
  EXPECT_LE((closed.front() - closed.back()).norm(), 1e-9);
  for (const auto& n : c.normals()) EXPECT_NEAR(n.norm(), 1.0, 1e-12);
  EXPECT_TRUE(c.contains(Point2(0.5, 0.5)));
  EXPECT_FALSE(c.contains(Point2(1.5, 0.5)));
  EXPECT_NEAR(c.signed_distance(Point2(0.5, 0.4)), 0.4, 1e-14);
  EXPECT_NEAR(c.signed_distance(Point2(1.5, 0.5)), -0.5, 1e-14);
}

TEST(Contour, SelfIntersectingOffsetRejected) {
  // Thin notch: a large inward offset folds the contour.
  std::vector<Point2> pts{{0, 0}, {1, 0}, {1, 1}, {0.55, 1}, {0.55, 0.2}, {0.45, 0.2}, {0.45, 1}, {0, 1}};
  Contour c(pts);
  EXPECT_NO_THROW(offset_contour(c, -0.01));
  EXPECT_THROW(offset_contour(c, -0.3), GeometryError);
}

TEST(ContourSigmoid, SignAndSaturation) {
  auto base = std::make_shared<const Contour>(circle_contour(Point2(0.5, 0.5), 0.2, 200));
  MorphBasis<2> b;
  b.kind = MorphKind::contour_sigmoid;
  b.K = 1000;
  b.contour = base;
  EXPECT_NEAR(b.value(Point2(0.5, 0.5)), 1.0, 1e-15);
  EXPECT_LT(b.value(Point2(5, 5)), 1e-300);
  EXPECT_EQ(b.gradient(Point2(0.3, 0.3)), Point2::Zero());
}

TEST(Contour, MarchingSquaresCircleAndSmoothing) {
  const int n = 101;
  std::vector<double> xs(n);
  for (int i = 0; i < n; ++i) xs[static_cast<std::size_t>(i)] = i / 100.0;
  Eigen::MatrixXd f(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) f(i, j) = 0.04 - (std::pow(xs[i] - 0.5, 2) + std::pow(xs[j] - 0.5, 2));
  }
  const auto curves = marching_squares(f, xs, xs, 0.0);
  ASSERT_EQ(curves.size(), 1u);
  EXPECT_TRUE(curves[0].closed);
  for (const auto& p : curves[0].points) EXPECT_NEAR((p - Point2(0.5, 0.5)).norm(), 0.2, 1e-3);

  std::mt19937_64 rng(3);
  std::vector<Point2> noisy;
  for (int i = 0; i < 120; ++i) {
    const double t = 2 * std::numbers::pi * i / 120;
    const double r = 0.2 + std::uniform_real_distribution<double>(-0.004, 0.004)(rng);
    noisy.emplace_back(0.5 + r * std::cos(t), 0.5 + r * std::sin(t));
  }
  Contour raw(noisy);
  const auto sm = smooth_contour(raw, 0.01);
  ASSERT_EQ(sm.size(), raw.size());
  double dev = 0.0;
  for (std::size_t i = 0; i < sm.size(); ++i) dev = std::max(dev, (sm.points()[i] - raw.points()[i]).norm());
  auto radial_spread = [](const Contour& c) {
    std::vector<double> r;
    for (const auto& p : c.points()) r.push_back((p - Point2(0.5, 0.5)).norm());
    const double mean = std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
    double ss = 0.0;
    for (double x : r) ss += (x - mean) * (x - mean);
    return std::sqrt(ss / static_cast<double>(r.size()));
  };
  const double rough_raw = radial_spread(raw);
  const double rough_sm = radial_spread(sm);
  EXPECT_LE(dev, 0.01 + 1e-12);
  EXPECT_LT(rough_sm, 0.5 * rough_raw);
}

TEST(Serialization, JsonRoundTrip) {
  auto set = build_random_set<2>(5, 20.0, Activation::sin, 9, Standardization<2>::of(Box<2>{Point<2>(0, 0), Point<2>(2, 2)}));
  set.append(build_pou_set<2>(PoUPartition<2>::uniform(Box<2>{}, {2, 1}, PouKind::b), 2, 1.0, Activation::tanh, 4));
  auto shape = disc_shape();
  shape.contour = circle_contour(Point2(0.5, 0.5), 0.2, 64).points();
  MorphSampling s;
  BasisSet<2> morph;
  morph.add_group("morph:sigmoid_rectangle:0", 17, sample_morphology<2>(MorphKind::sigmoid_rectangle, shape, s, 3, 17));
  morph.add_group("morph:contour_sigmoid:0", 18, sample_morphology<2>(MorphKind::contour_sigmoid, shape, s, 3, 18, &morph));
  set.append(morph);

  const auto j = basis_to_json(set);
  const auto back = basis_from_json<2>(nlohmann::json::parse(j.dump()));
  ASSERT_EQ(back.size(), set.size());
  ASSERT_EQ(back.groups().size(), set.groups().size());
  EXPECT_EQ(basis_to_json(back), j);
  Eigen::Matrix<double, 2, Eigen::Dynamic> pts = Eigen::Matrix<double, 2, Eigen::Dynamic>::Random(2, 40);
  pts.array() = 0.5 * pts.array() + 0.5;
  EXPECT_EQ(back.evaluate(pts), set.evaluate(pts));
  EXPECT_THROW(basis_from_json<3>(j), std::invalid_argument);
}
