#pragma once

// Tensor-product Gauss-Legendre quadrature on a hierarchy of axis-aligned
// cells with dyadic (2^d children) refinement.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

#include "helm/specfun.hpp"

namespace helm {

struct QuadRule {
  std::vector<double> nodes;    // ascending, in (-1, 1)
  std::vector<double> weights;  // positive, sum to 2

  [[nodiscard]] int size() const { return static_cast<int>(nodes.size()); }
};

/// n-point Gauss-Legendre rule on [-1, 1].
inline QuadRule gauss_legendre(int n) {
  if (n < 1 || n > 128) throw std::invalid_argument("gauss_legendre: n must be in [1, 128]");
  QuadRule rule;
  rule.nodes.resize(static_cast<std::size_t>(n));
  rule.weights.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double t = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int it = 0; it < 100; ++it) {
      // Legendre recurrence for P_n(t) and P_n'(t).
      double p0 = 1.0;
      double p1 = t;
      for (int k = 2; k <= n; ++k) {
        const double pk = ((2.0 * k - 1.0) * t * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = pk;
      }
      const double pn = (n == 1) ? t : p1;
      const double pnm1 = (n == 1) ? 1.0 : p0;
      dp = n * (t * pn - pnm1) / (t * t - 1.0);
      const double step = pn / dp;
      t -= step;
      if (std::abs(step) < 1e-14) {
        // One more derivative evaluation at the converged node.
        p0 = 1.0;
        p1 = t;
        for (int k = 2; k <= n; ++k) {
          const double pk = ((2.0 * k - 1.0) * t * p1 - (k - 1.0) * p0) / k;
          p0 = p1;
          p1 = pk;
        }
        dp = n * (t * ((n == 1) ? t : p1) - ((n == 1) ? 1.0 : p0)) / (t * t - 1.0);
        break;
      }
    }
    const auto idx = static_cast<std::size_t>(n - 1 - i);
    rule.nodes[idx] = t;
    rule.weights[idx] = 2.0 / ((1.0 - t * t) * dp * dp);
  }
  return rule;
}

template <int Dim>
struct Box {
  Point<Dim> lo = Point<Dim>::Zero();
  Point<Dim> hi = Point<Dim>::Ones();

  [[nodiscard]] double volume() const { return (hi - lo).prod(); }
  [[nodiscard]] Point<Dim> center() const { return 0.5 * (lo + hi); }
  [[nodiscard]] Point<Dim> half_extent() const { return 0.5 * (hi - lo); }
  [[nodiscard]] bool contains(const Point<Dim>& x) const {
    return (x.array() >= lo.array()).all() && (x.array() <= hi.array()).all();
  }
  /// Euclidean distance from x to the closed box (0 inside).
  [[nodiscard]] double distance(const Point<Dim>& x) const {
    const Point<Dim> d = (lo - x).cwiseMax(x - hi).cwiseMax(Point<Dim>::Zero());
    return d.norm();
  }
};

template <int Dim>
struct Cell {
  Point<Dim> lo;
  Point<Dim> hi;
  int level = 0;
  std::uint64_t id = 0;
  Eigen::Matrix<double, Dim, Eigen::Dynamic> points;  // mapped Gauss points
  Eigen::VectorXd weights;

  [[nodiscard]] double volume() const { return (hi - lo).prod(); }
};

struct RefineResult {
  std::size_t refined = 0;
  std::vector<std::uint64_t> rejected;  // marked cells already at the max level
};

template <int Dim>
class AdaptiveMesh {
 public:
  using PointMatrix = Eigen::Matrix<double, Dim, Eigen::Dynamic>;

  AdaptiveMesh(Box<Dim> domain, QuadRule rule, int max_level = 12)
      : domain_(std::move(domain)), rule_(std::move(rule)), max_level_(max_level) {}

  [[nodiscard]] const Box<Dim>& domain() const { return domain_; }
  [[nodiscard]] const QuadRule& rule() const { return rule_; }
  [[nodiscard]] int max_level() const { return max_level_; }
  [[nodiscard]] const std::vector<Cell<Dim>>& leaves() const { return leaves_; }
  [[nodiscard]] std::size_t num_leaves() const { return leaves_.size(); }
  [[nodiscard]] int points_per_cell() const {
    int p = 1;
    for (int d = 0; d < Dim; ++d) p *= rule_.size();
    return p;
  }
  [[nodiscard]] std::size_t num_points() const { return leaves_.size() * static_cast<std::size_t>(points_per_cell()); }

  /// All quadrature points in leaf order (column j is point j).
  [[nodiscard]] const PointMatrix& points() const {
    flatten();
    return flat_points_;
  }
  [[nodiscard]] const Eigen::VectorXd& weights() const {
    flatten();
    return flat_weights_;
  }

  /// Index of the leaf with the given id, or npos.
  [[nodiscard]] std::size_t find(std::uint64_t id) const {
    for (std::size_t i = 0; i < leaves_.size(); ++i) {
      if (leaves_[i].id == id) return i;
    }
    return npos;
  }
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  void add_leaf(const Point<Dim>& lo, const Point<Dim>& hi, int level) {
    Cell<Dim> c;
    c.lo = lo;
    c.hi = hi;
    c.level = level;
    c.id = next_id_++;
    fill_points(c);
    leaves_.push_back(std::move(c));
    dirty_ = true;
  }

  /// Replace every marked leaf by its 2^Dim dyadic children.
  RefineResult refine(std::span<const std::uint64_t> marked) {
    std::unordered_set<std::uint64_t> todo(marked.begin(), marked.end());
    for (std::uint64_t id : todo) {
      if (find(id) == npos) throw std::invalid_argument("refine: id " + std::to_string(id) + " is not a current leaf");
    }
    RefineResult result;
    std::vector<Cell<Dim>> next;
    next.reserve(leaves_.size() + todo.size() * ((1u << Dim) - 1));
    std::vector<const Cell<Dim>*> split;
    for (auto& c : leaves_) {
      if (!todo.contains(c.id)) {
        next.push_back(std::move(c));
        continue;
      }
      if (c.level >= max_level_) {
        result.rejected.push_back(c.id);
        next.push_back(std::move(c));
        continue;
      }
      const Point<Dim> mid = 0.5 * (c.lo + c.hi);
      for (unsigned mask = 0; mask < (1u << Dim); ++mask) {
        Cell<Dim> child;
        for (int d = 0; d < Dim; ++d) {
          const bool upper = (mask >> d) & 1u;
          child.lo[d] = upper ? mid[d] : c.lo[d];
          child.hi[d] = upper ? c.hi[d] : mid[d];
        }
        child.level = c.level + 1;
        next.push_back(std::move(child));
      }
      ++result.refined;
    }
    // Children get ids in the (level, lo) order so ids stay reproducible.
    sort_leaves(next);
    for (auto& c : next) {
      if (c.points.cols() == 0) {
        c.id = next_id_++;
        fill_points(c);
      }
    }
    leaves_ = std::move(next);
    dirty_ = true;
    return result;
  }

  /// Leaves ordered lexicographically by (level, lo).
  void sort() {
    sort_leaves(leaves_);
    dirty_ = true;
  }

  /// Scale every quadrature weight (used by linearity checks).
  void scale_weights(double factor) {
    for (auto& c : leaves_) c.weights *= factor;
    dirty_ = true;
  }

 private:
  static void sort_leaves(std::vector<Cell<Dim>>& cells) {
    std::stable_sort(cells.begin(), cells.end(), [](const Cell<Dim>& a, const Cell<Dim>& b) {
      if (a.level != b.level) return a.level < b.level;
      for (int d = 0; d < Dim; ++d) {
        if (a.lo[d] != b.lo[d]) return a.lo[d] < b.lo[d];
      }
      return false;
    });
  }

  void fill_points(Cell<Dim>& c) const {
    const int n = rule_.size();
    const int count = points_per_cell();
    c.points.resize(Dim, count);
    c.weights.resize(count);
    const Point<Dim> half = 0.5 * (c.hi - c.lo);
    const Point<Dim> mid = 0.5 * (c.hi + c.lo);
    const double jac = half.prod();
    std::array<int, Dim> idx{};
    for (int p = 0; p < count; ++p) {
      int rem = p;
      for (int d = 0; d < Dim; ++d) {
        idx[static_cast<std::size_t>(d)] = rem % n;
        rem /= n;
      }
      double w = jac;
      for (int d = 0; d < Dim; ++d) {
        const auto i = static_cast<std::size_t>(idx[static_cast<std::size_t>(d)]);
        c.points(d, p) = mid[d] + half[d] * rule_.nodes[i];
        w *= rule_.weights[i];
      }
      c.weights[p] = w;
    }
  }

  void flatten() const {
    if (!dirty_) return;
    const int per = points_per_cell();
    flat_points_.resize(Dim, static_cast<Eigen::Index>(num_points()));
    flat_weights_.resize(static_cast<Eigen::Index>(num_points()));
    Eigen::Index off = 0;
    for (const auto& c : leaves_) {
      flat_points_.middleCols(off, per) = c.points;
      flat_weights_.segment(off, per) = c.weights;
      off += per;
    }
    dirty_ = false;
  }

  Box<Dim> domain_;
  QuadRule rule_;
  int max_level_;
  std::vector<Cell<Dim>> leaves_;
  std::uint64_t next_id_ = 0;
  mutable bool dirty_ = true;
  mutable PointMatrix flat_points_;
  mutable Eigen::VectorXd flat_weights_;
};

/// Level-0 mesh with cells_per_axis[d] cells along axis d.
template <int Dim>
AdaptiveMesh<Dim> build_uniform_mesh(const Box<Dim>& v0, const std::array<int, Dim>& cells_per_axis,
                                     const QuadRule& rule, int max_level = 12) {
  for (int d = 0; d < Dim; ++d) {
    if (!(v0.hi[d] > v0.lo[d])) throw std::invalid_argument("build_uniform_mesh: degenerate box");
    if (cells_per_axis[static_cast<std::size_t>(d)] < 1) {
      throw std::invalid_argument("build_uniform_mesh: need at least one cell per axis");
    }
  }
  AdaptiveMesh<Dim> mesh(v0, rule, max_level);
  std::array<int, Dim> idx{};
  int total = 1;
  for (int d = 0; d < Dim; ++d) total *= cells_per_axis[static_cast<std::size_t>(d)];
  for (int c = 0; c < total; ++c) {
    int rem = c;
    Point<Dim> lo;
    Point<Dim> hi;
    for (int d = 0; d < Dim; ++d) {
      const int nd = cells_per_axis[static_cast<std::size_t>(d)];
      idx[static_cast<std::size_t>(d)] = rem % nd;
      rem /= nd;
      const double h = (v0.hi[d] - v0.lo[d]) / nd;
      const int i = idx[static_cast<std::size_t>(d)];
      lo[d] = v0.lo[d] + i * h;
      hi[d] = (i + 1 == nd) ? v0.hi[d] : v0.lo[d] + (i + 1) * h;
    }
    mesh.add_leaf(lo, hi, 0);
  }
  mesh.sort();
  return mesh;
}

/// sum_i sum_j w_j^i f(y_j^i), accumulated in leaf order.
template <int Dim, class F>
auto integrate(const AdaptiveMesh<Dim>& mesh, F&& f) {
  using R = std::decay_t<decltype(f(std::declval<Point<Dim>>()))>;
  R sum{};
  for (const auto& c : mesh.leaves()) {
    R local{};
    for (Eigen::Index j = 0; j < c.points.cols(); ++j) {
      const Point<Dim> y = c.points.col(j);
      local += c.weights[j] * f(y);
    }
    sum += local;
  }
  return sum;
}

/// One CSV row per leaf: id, level, lo..., hi...
template <int Dim>
void write_mesh_csv(std::ostream& os, const AdaptiveMesh<Dim>& mesh) {
  static constexpr std::array<const char*, 3> axes{"x", "y", "z"};
  os << "id,level";
  for (int d = 0; d < Dim; ++d) os << ",lo_" << axes[static_cast<std::size_t>(d)];
  for (int d = 0; d < Dim; ++d) os << ",hi_" << axes[static_cast<std::size_t>(d)];
  os << '\n';
  os.precision(17);
  for (const auto& c : mesh.leaves()) {
    os << c.id << ',' << c.level;
    for (int d = 0; d < Dim; ++d) os << ',' << c.lo[d];
    for (int d = 0; d < Dim; ++d) os << ',' << c.hi[d];
    os << '\n';
  }
}

}  // namespace helm
