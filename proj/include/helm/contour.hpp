#pragma once

// Closed planar polygons: outward normals, normal offsets, even-odd
// membership, signed distance, periodic spline smoothing and marching-squares
// extraction of level curves from gridded data.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "helm/specfun.hpp"

namespace helm {

using Point2 = Point<2>;

class GeometryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline double cross(const Point2& a, const Point2& b) { return a.x() * b.y() - a.y() * b.x(); }

inline bool segments_intersect(const Point2& p1, const Point2& p2, const Point2& q1, const Point2& q2) {
  const double d1 = cross(q2 - q1, p1 - q1);
  const double d2 = cross(q2 - q1, p2 - q1);
  const double d3 = cross(p2 - p1, q1 - p1);
  const double d4 = cross(p2 - p1, q2 - p1);
  return ((d1 > 0) != (d2 > 0)) && ((d3 > 0) != (d4 > 0)) && d1 != 0 && d2 != 0 && d3 != 0 && d4 != 0;
}

inline double segment_distance(const Point2& x, const Point2& a, const Point2& b, Point2* closest) {
  const Point2 ab = b - a;
  const double len2 = ab.squaredNorm();
  double t = len2 > 0 ? (x - a).dot(ab) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const Point2 c = a + t * ab;
  if (closest) *closest = c;
  return (x - c).norm();
}

}  // namespace detail

/// A closed polygon.  `points` stores each vertex once; the closing edge
/// runs from the last point back to the first.
class Contour {
 public:
  Contour() = default;

  /// Accepts either an explicitly closed list (first == last within 1e-9)
  /// or an implicitly closed one.
  explicit Contour(std::vector<Point2> pts) {
    if (pts.size() >= 2 && (pts.front() - pts.back()).norm() <= 1e-9) pts.pop_back();
    if (pts.size() < 3) throw GeometryError("contour needs at least 3 distinct points");
    points_ = std::move(pts);
    if (signed_area() < 0) std::reverse(points_.begin(), points_.end());
    build_normals();
    build_index();
  }

  [[nodiscard]] const std::vector<Point2>& points() const { return points_; }
  [[nodiscard]] const std::vector<Point2>& normals() const { return normals_; }
  [[nodiscard]] std::size_t size() const { return points_.size(); }

  /// Points with the first repeated at the end.
  [[nodiscard]] std::vector<Point2> closed_points() const {
    auto out = points_;
    out.push_back(points_.front());
    return out;
  }

  [[nodiscard]] double signed_area() const {
    double a = 0.0;
    for (std::size_t i = 0; i < points_.size(); ++i) {
      a += detail::cross(points_[i], points_[(i + 1) % points_.size()]);
    }
    return 0.5 * a;
  }

  [[nodiscard]] double perimeter() const {
    double p = 0.0;
    for (std::size_t i = 0; i < points_.size(); ++i) p += (points_[(i + 1) % points_.size()] - points_[i]).norm();
    return p;
  }

  /// Even-odd rule.
  [[nodiscard]] bool contains(const Point2& x) const {
    if (x.y() < ylo_ || x.y() >= yhi_ || x.x() < xlo_ || x.x() > xhi_) return false;
    const auto bin = bin_of(x.y());
    bool inside = false;
    const std::size_t n = points_.size();
    for (std::uint32_t e : bins_[bin]) {
      const Point2& a = points_[e];
      const Point2& b = points_[(e + 1) % n];
      if ((a.y() > x.y()) != (b.y() > x.y())) {
        const double xc = a.x() + (x.y() - a.y()) * (b.x() - a.x()) / (b.y() - a.y());
        if (x.x() < xc) inside = !inside;
      }
    }
    return inside;
  }

  /// Distance to the polygon boundary and the closest boundary point.
  [[nodiscard]] double boundary_distance(const Point2& x, Point2* closest = nullptr) const {
    double best = std::numeric_limits<double>::infinity();
    Point2 c;
    const std::size_t n = points_.size();
    for (std::size_t i = 0; i < n; ++i) {
      Point2 ci;
      const double d = detail::segment_distance(x, points_[i], points_[(i + 1) % n], &ci);
      if (d < best) {
        best = d;
        c = ci;
      }
    }
    if (closest) *closest = c;
    return best;
  }

  /// Positive inside, negative outside.
  [[nodiscard]] double signed_distance(const Point2& x, Point2* closest = nullptr) const {
    const double d = boundary_distance(x, closest);
    return contains(x) ? d : -d;
  }

  [[nodiscard]] bool self_intersects() const {
    const std::size_t n = points_.size();
    for (std::size_t i = 0; i < n; ++i) {
      const Point2& a = points_[i];
      const Point2& b = points_[(i + 1) % n];
      for (std::size_t j = i + 2; j < n; ++j) {
        if (i == 0 && j == n - 1) continue;  // adjacent through the closing edge
        if (detail::segments_intersect(a, b, points_[j], points_[(j + 1) % n])) return true;
      }
    }
    return false;
  }

 private:
  void build_normals() {
    const std::size_t n = points_.size();
    normals_.resize(n);
    std::vector<Point2> edge_normals(n);
    for (std::size_t i = 0; i < n; ++i) {
      const Point2 e = points_[(i + 1) % n] - points_[i];
      const double len = e.norm();
      edge_normals[i] = len > 0 ? Point2(e.y() / len, -e.x() / len) : Point2::Zero();
    }
    for (std::size_t i = 0; i < n; ++i) {
      Point2 v = edge_normals[i] + edge_normals[(i + n - 1) % n];
      const double len = v.norm();
      normals_[i] = len > 0 ? Point2(v / len) : edge_normals[i];
    }
  }

  [[nodiscard]] std::size_t bin_of(double y) const {
    const double t = (y - ylo_) / (yhi_ - ylo_);
    const auto b = static_cast<std::ptrdiff_t>(t * static_cast<double>(bins_.size()));
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(b, 0, static_cast<std::ptrdiff_t>(bins_.size()) - 1));
  }

  void build_index() {
    xlo_ = ylo_ = std::numeric_limits<double>::infinity();
    xhi_ = yhi_ = -std::numeric_limits<double>::infinity();
    for (const auto& p : points_) {
      xlo_ = std::min(xlo_, p.x());
      xhi_ = std::max(xhi_, p.x());
      ylo_ = std::min(ylo_, p.y());
      yhi_ = std::max(yhi_, p.y());
    }
    const std::size_t n = points_.size();
    bins_.assign(std::clamp<std::size_t>(n / 8, 1, 256), {});
    for (std::size_t e = 0; e < n; ++e) {
      const double ya = points_[e].y();
      const double yb = points_[(e + 1) % n].y();
      const std::size_t b0 = bin_of(std::min(ya, yb));
      const std::size_t b1 = bin_of(std::max(ya, yb));
      for (std::size_t b = b0; b <= b1; ++b) bins_[b].push_back(static_cast<std::uint32_t>(e));
    }
  }

  std::vector<Point2> points_;
  std::vector<Point2> normals_;
  std::vector<std::vector<std::uint32_t>> bins_;
  double xlo_ = 0, xhi_ = 0, ylo_ = 0, yhi_ = 0;
};

enum class OffsetRule {
  normal,   // x + rho n
  literal,  // x + rho (n . x) n
};

/// Moves every vertex along its outward normal.  Throws GeometryError if
/// the result self-intersects.
inline Contour offset_contour(const Contour& base, double rho, OffsetRule rule = OffsetRule::normal) {
  std::vector<Point2> pts;
  pts.reserve(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    const Point2& x = base.points()[i];
    const Point2& n = base.normals()[i];
    const double step = (rule == OffsetRule::normal) ? rho : rho * n.dot(x);
    pts.push_back(x + step * n);
  }
  Contour out(std::move(pts));
  if (out.self_intersects()) {
    throw GeometryError("offset contour with rho = " + std::to_string(rho) + " self-intersects");
  }
  return out;
}

/// Polygonal circle with n vertices.
inline Contour circle_contour(const Point2& c, double r, int n) {
  std::vector<Point2> pts;
  pts.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double t = 2.0 * std::numbers::pi * i / n;
    pts.emplace_back(c.x() + r * std::cos(t), c.y() + r * std::sin(t));
  }
  return Contour(std::move(pts));
}

namespace detail {

// Periodic smoothing with a uniform cubic B-spline whose node values are
// (c[i-1] + 4 c[i] + c[i+1]) / 6 and a second-difference penalty mu on c.
// The system is circulant, so it is solved mode by mode.
inline std::vector<Point2> smooth_periodic(const std::vector<Point2>& p, double mu) {
  const std::size_t n = p.size();
  std::vector<std::complex<double>> hat(n);
  std::vector<std::complex<double>> twiddle(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double a = -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
    twiddle[k] = {std::cos(a), std::sin(a)};
  }
  for (std::size_t k = 0; k < n; ++k) {
    std::complex<double> s{};
    for (std::size_t j = 0; j < n; ++j) s += twiddle[(k * j) % n] * std::complex<double>(p[j].x(), p[j].y());
    const double w = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
    const double b = (4.0 + 2.0 * std::cos(w)) / 6.0;
    const double d = 2.0 * std::cos(w) - 2.0;
    hat[k] = s * (b * b / (b * b + mu * d * d));
  }
  std::vector<Point2> out(n);
  for (std::size_t j = 0; j < n; ++j) {
    std::complex<double> s{};
    for (std::size_t k = 0; k < n; ++k) s += std::conj(twiddle[(k * j) % n]) * hat[k];
    s /= static_cast<double>(n);
    out[j] = Point2(s.real(), s.imag());
  }
  return out;
}

}  // namespace detail

/// Smooths a closed contour with the largest penalty keeping every vertex
/// within `max_deviation` of its raw position.
inline Contour smooth_contour(const Contour& raw, double max_deviation) {
  const auto& p = raw.points();
  auto deviation = [&](const std::vector<Point2>& q) {
    double m = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) m = std::max(m, (q[i] - p[i]).norm());
    return m;
  };
  double lo = -8.0;  // log10 mu
  double hi = 8.0;
  if (deviation(detail::smooth_periodic(p, std::pow(10.0, lo))) > max_deviation) return raw;
  for (int it = 0; it < 40; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (deviation(detail::smooth_periodic(p, std::pow(10.0, mid))) <= max_deviation) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return Contour(detail::smooth_periodic(p, std::pow(10.0, lo)));
}

struct LevelCurve {
  std::vector<Point2> points;
  bool closed = false;
};

/// Marching squares on values(i, j) sampled at (xs[i], ys[j]); returns all
/// chained polylines of the level set, longest first.  `active` (optional,
/// same shape) restricts extraction to cells with at least one active corner.
inline std::vector<LevelCurve> marching_squares(const Eigen::MatrixXd& values, const std::vector<double>& xs,
                                                const std::vector<double>& ys, double level,
                                                const Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>* active = nullptr) {
  const auto nx = static_cast<Eigen::Index>(xs.size());
  const auto ny = static_cast<Eigen::Index>(ys.size());
  if (values.rows() != nx || values.cols() != ny) throw std::invalid_argument("marching_squares: shape mismatch");
  // Edge ids: horizontal edges (i,j)-(i+1,j) and vertical edges (i,j)-(i,j+1).
  auto hkey = [&](Eigen::Index i, Eigen::Index j) { return static_cast<std::int64_t>(2 * (i * ny + j)); };
  auto vkey = [&](Eigen::Index i, Eigen::Index j) { return static_cast<std::int64_t>(2 * (i * ny + j) + 1); };
  auto interp = [&](Eigen::Index i0, Eigen::Index j0, Eigen::Index i1, Eigen::Index j1) {
    const double a = values(i0, j0) - level;
    const double b = values(i1, j1) - level;
    const double t = (a == b) ? 0.5 : a / (a - b);
    return Point2(xs[static_cast<std::size_t>(i0)] + t * (xs[static_cast<std::size_t>(i1)] - xs[static_cast<std::size_t>(i0)]),
                  ys[static_cast<std::size_t>(j0)] + t * (ys[static_cast<std::size_t>(j1)] - ys[static_cast<std::size_t>(j0)]));
  };
  std::map<std::int64_t, Point2> where;
  std::multimap<std::int64_t, std::int64_t> adj;
  auto add = [&](std::int64_t e1, Point2 p1, std::int64_t e2, Point2 p2) {
    where[e1] = p1;
    where[e2] = p2;
    adj.emplace(e1, e2);
    adj.emplace(e2, e1);
  };
  for (Eigen::Index i = 0; i + 1 < nx; ++i) {
    for (Eigen::Index j = 0; j + 1 < ny; ++j) {
      if (active && !((*active)(i, j) || (*active)(i + 1, j) || (*active)(i, j + 1) || (*active)(i + 1, j + 1))) continue;
      const bool b0 = values(i, j) >= level;
      const bool b1 = values(i + 1, j) >= level;
      const bool b2 = values(i + 1, j + 1) >= level;
      const bool b3 = values(i, j + 1) >= level;
      const int code = (b0 ? 1 : 0) | (b1 ? 2 : 0) | (b2 ? 4 : 0) | (b3 ? 8 : 0);
      if (code == 0 || code == 15) continue;
      const std::int64_t eb = hkey(i, j);      // bottom
      const std::int64_t er = vkey(i + 1, j);  // right
      const std::int64_t et = hkey(i, j + 1);  // top
      const std::int64_t el = vkey(i, j);      // left
      auto pb = [&] { return interp(i, j, i + 1, j); };
      auto pr = [&] { return interp(i + 1, j, i + 1, j + 1); };
      auto pt = [&] { return interp(i, j + 1, i + 1, j + 1); };
      auto pl = [&] { return interp(i, j, i, j + 1); };
      const double center = 0.25 * (values(i, j) + values(i + 1, j) + values(i + 1, j + 1) + values(i, j + 1));
      switch (code) {
        case 1: case 14: add(el, pl(), eb, pb()); break;
        case 2: case 13: add(eb, pb(), er, pr()); break;
        case 3: case 12: add(el, pl(), er, pr()); break;
        case 4: case 11: add(er, pr(), et, pt()); break;
        case 6: case 9: add(eb, pb(), et, pt()); break;
        case 7: case 8: add(el, pl(), et, pt()); break;
        case 5:
          if (center >= level) {
            add(el, pl(), et, pt());
            add(eb, pb(), er, pr());
          } else {
            add(el, pl(), eb, pb());
            add(er, pr(), et, pt());
          }
          break;
        case 10:
          if (center >= level) {
            add(el, pl(), eb, pb());
            add(er, pr(), et, pt());
          } else {
            add(el, pl(), et, pt());
            add(eb, pb(), er, pr());
          }
          break;
        default: break;
      }
    }
  }
  // Chain segments through shared edge crossings.
  std::map<std::int64_t, bool> used_edge;  // keyed by min*2^32 style pair encoding below
  auto pair_key = [](std::int64_t a, std::int64_t b) { return std::min(a, b) * 4'000'000'003LL + std::max(a, b); };
  std::vector<LevelCurve> curves;
  std::map<std::int64_t, int> degree;
  for (const auto& [a, b] : adj) ++degree[a];
  auto walk = [&](std::int64_t start) {
    LevelCurve c;
    std::int64_t cur = start;
    c.points.push_back(where[cur]);
    while (true) {
      std::int64_t next = -1;
      auto range = adj.equal_range(cur);
      for (auto it = range.first; it != range.second; ++it) {
        if (!used_edge[pair_key(cur, it->second)]) {
          next = it->second;
          break;
        }
      }
      if (next < 0) break;
      used_edge[pair_key(cur, next)] = true;
      cur = next;
      if (cur == start) {
        c.closed = true;
        break;
      }
      c.points.push_back(where[cur]);
    }
    return c;
  };
  // Open curves start at degree-1 crossings; the rest are loops.
  for (const auto& [e, d] : degree) {
    if (d == 1) {
      auto range = adj.equal_range(e);
      if (range.first != range.second && !used_edge[pair_key(e, range.first->second)]) curves.push_back(walk(e));
    }
  }
  for (const auto& [e, d] : degree) {
    auto range = adj.equal_range(e);
    for (auto it = range.first; it != range.second; ++it) {
      if (!used_edge[pair_key(e, it->second)]) {
        curves.push_back(walk(e));
        break;
      }
    }
  }
  std::stable_sort(curves.begin(), curves.end(),
                   [](const LevelCurve& a, const LevelCurve& b) { return a.points.size() > b.points.size(); });
  return curves;
}

}  // namespace helm
