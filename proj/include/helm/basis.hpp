#pragma once

// Feature functions: frozen random features (optionally PoU-localized) and
// morphology bases, each with an analytic gradient.

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "helm/contour.hpp"
#include "helm/quadmesh.hpp"
#include "helm/specfun.hpp"

namespace helm {

enum class Activation { sin, tanh, relu };

enum class MorphKind {
  sigmoid_circle,
  sigmoid_rectangle,
  truncated_gaussian_circle,
  gaussian_bump,
  relu_cone,
  torus_sigmoid,
  contour_sigmoid,
};

enum class PouKind { a, b };

/// Sign-valued (+1/-1) or signed-Euclidean level function for contour bases.
enum class ContourDistance { sign, euclidean };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::sin: return "sin";
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
  }
  return "?";
}

inline Activation parse_activation(std::string_view s) {
  if (s == "sin") return Activation::sin;
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  throw std::invalid_argument("unknown activation '" + std::string(s) + "'");
}

inline std::string_view to_string(MorphKind k) {
  switch (k) {
    case MorphKind::sigmoid_circle: return "sigmoid_circle";
    case MorphKind::sigmoid_rectangle: return "sigmoid_rectangle";
    case MorphKind::truncated_gaussian_circle: return "truncated_gaussian_circle";
    case MorphKind::gaussian_bump: return "gaussian_bump";
    case MorphKind::relu_cone: return "relu_cone";
    case MorphKind::torus_sigmoid: return "torus_sigmoid";
    case MorphKind::contour_sigmoid: return "contour_sigmoid";
  }
  return "?";
}

inline MorphKind parse_morph_kind(std::string_view s) {
  for (auto k : {MorphKind::sigmoid_circle, MorphKind::sigmoid_rectangle, MorphKind::truncated_gaussian_circle,
                 MorphKind::gaussian_bump, MorphKind::relu_cone, MorphKind::torus_sigmoid, MorphKind::contour_sigmoid}) {
    if (to_string(k) == s) return k;
  }
  throw std::invalid_argument("unknown morphology kind '" + std::string(s) + "'");
}

namespace act {

/// Logistic function without overflow for large |z|.
inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double sigmoid_prime(double z) {
  const double s = sigmoid(z);
  return s * (1.0 - s);
}

inline double value(Activation a, double z) {
  switch (a) {
    case Activation::sin: return std::sin(z);
    case Activation::tanh: return std::tanh(z);
    case Activation::relu: return z > 0 ? z : 0.0;
  }
  return 0.0;
}

inline double derivative(Activation a, double z) {
  switch (a) {
    case Activation::sin: return std::cos(z);
    case Activation::tanh: {
      const double t = std::tanh(z);
      return 1.0 - t * t;
    }
    case Activation::relu: return z > 0 ? 1.0 : 0.0;
  }
  return 0.0;
}

}  // namespace act

/// 1D partition-of-unity profiles on the normalized coordinate.
namespace pou {

inline double value(PouKind kind, double t) {
  if (kind == PouKind::a) return (t >= -1.0 && t <= 1.0) ? 1.0 : 0.0;
  const double tp = 2.0 * std::numbers::pi * t;
  if (t < -1.25 || t > 1.25) return 0.0;
  if (t < -0.75) return 0.5 * (1.0 + std::sin(tp));
  if (t <= 0.75) return 1.0;
  return 0.5 * (1.0 - std::sin(tp));
}

inline double derivative(PouKind kind, double t) {
  if (kind == PouKind::a) return 0.0;
  const double tp = 2.0 * std::numbers::pi * t;
  if (t < -1.25 || t > 1.25) return 0.0;
  if (t < -0.75) return std::numbers::pi * std::cos(tp);
  if (t <= 0.75) return 0.0;
  return -std::numbers::pi * std::cos(tp);
}

}  // namespace pou

/// Axis-aligned window psi_n(x) = prod_i psi((x_i - center_i) / radius_i).
template <int Dim>
struct PouWindow {
  Point<Dim> center = Point<Dim>::Zero();
  Point<Dim> radius = Point<Dim>::Ones();
  PouKind kind = PouKind::b;

  [[nodiscard]] double value(const Point<Dim>& x) const {
    double v = 1.0;
    for (int d = 0; d < Dim; ++d) v *= pou::value(kind, (x[d] - center[d]) / radius[d]);
    return v;
  }

  [[nodiscard]] Point<Dim> gradient(const Point<Dim>& x) const {
    Point<Dim> vals;
    Point<Dim> ders;
    for (int d = 0; d < Dim; ++d) {
      const double t = (x[d] - center[d]) / radius[d];
      vals[d] = pou::value(kind, t);
      ders[d] = pou::derivative(kind, t) / radius[d];
    }
    Point<Dim> g;
    for (int d = 0; d < Dim; ++d) {
      double p = ders[d];
      for (int e = 0; e < Dim; ++e) {
        if (e != d) p *= vals[e];
      }
      g[d] = p;
    }
    return g;
  }
};

/// Uniform PoU partition of a box into patches_per_axis^Dim subdomains.
template <int Dim>
struct PoUPartition {
  std::vector<PouWindow<Dim>> windows;

  static PoUPartition uniform(const Box<Dim>& box, const std::array<int, Dim>& patches, PouKind kind) {
    PoUPartition out;
    int total = 1;
    for (int d = 0; d < Dim; ++d) total *= patches[static_cast<std::size_t>(d)];
    for (int p = 0; p < total; ++p) {
      int rem = p;
      PouWindow<Dim> w;
      w.kind = kind;
      for (int d = 0; d < Dim; ++d) {
        const int nd = patches[static_cast<std::size_t>(d)];
        const int i = rem % nd;
        rem /= nd;
        const double h = (box.hi[d] - box.lo[d]) / nd;
        w.center[d] = box.lo[d] + (i + 0.5) * h;
        w.radius[d] = 0.5 * h;
      }
      out.windows.push_back(w);
    }
    return out;
  }

  [[nodiscard]] double sum(const Point<Dim>& x) const {
    double s = 0.0;
    for (const auto& w : windows) s += w.value(x);
    return s;
  }
};

/// sigma(k . xi + b) with xi = (x - center) / scale, optionally times a PoU
/// window.  k and b are the raw draws; center/scale the standardization.
template <int Dim>
struct RandomFeature {
  Point<Dim> k = Point<Dim>::Zero();
  double b = 0.0;
  Activation activation = Activation::sin;
  Point<Dim> center = Point<Dim>::Zero();
  Point<Dim> scale = Point<Dim>::Ones();
  std::optional<PouWindow<Dim>> window;

  [[nodiscard]] Point<Dim> effective_direction() const { return k.cwiseQuotient(scale); }
  [[nodiscard]] double effective_bias() const { return b - effective_direction().dot(center); }

  [[nodiscard]] double value(const Point<Dim>& x) const {
    const double z = effective_direction().dot(x) + effective_bias();
    const double v = act::value(activation, z);
    return window ? v * window->value(x) : v;
  }

  [[nodiscard]] Point<Dim> gradient(const Point<Dim>& x) const {
    const Point<Dim> w = effective_direction();
    const double z = w.dot(x) + effective_bias();
    Point<Dim> g = act::derivative(activation, z) * w;
    if (window) g = g * window->value(x) + act::value(activation, z) * window->gradient(x);
    return g;
  }
};

/// One morphology basis.  Only the fields used by `kind` are meaningful:
///   sigmoid_circle            sigma(K (r^2 - |x-c|^2))
///   sigmoid_rectangle         sigma(-K max_i(|x_i-c_i| - half_i))
///   truncated_gaussian_circle sigma(K (r^2 - |x-c|^2)) exp(-v |x-c|^2)
///   gaussian_bump             exp(-v |x-c|^2)
///   relu_cone                 max(r - |x-c|, 0)
///   torus_sigmoid             sigma(K (r^2 - ((|x_12-c_12| - R)^2 + (x_3-c_3)^2)))
///   contour_sigmoid           sigma(K d) with d from an offset contour
template <int Dim>
struct MorphBasis {
  MorphKind kind = MorphKind::sigmoid_circle;
  double K = 0.0;
  Point<Dim> c = Point<Dim>::Zero();
  double r = 0.0;
  double R = 0.0;
  Point<Dim> half = Point<Dim>::Zero();
  double v = 0.0;
  // contour_sigmoid
  int contour_index = -1;
  double rho = 0.0;
  OffsetRule offset_rule = OffsetRule::normal;
  ContourDistance distance = ContourDistance::sign;
  std::shared_ptr<const Contour> contour;

  [[nodiscard]] double value(const Point<Dim>& x) const {
    const Point<Dim> dx = x - c;
    switch (kind) {
      case MorphKind::sigmoid_circle: return act::sigmoid(K * (r * r - dx.squaredNorm()));
      case MorphKind::sigmoid_rectangle: return act::sigmoid(-K * rect_level(dx).first);
      case MorphKind::truncated_gaussian_circle: {
        const double q = dx.squaredNorm();
        return act::sigmoid(K * (r * r - q)) * std::exp(-v * q);
      }
      case MorphKind::gaussian_bump: return std::exp(-v * dx.squaredNorm());
      case MorphKind::relu_cone: return std::max(r - dx.norm(), 0.0);
      case MorphKind::torus_sigmoid: return act::sigmoid(K * torus_level(dx));
      case MorphKind::contour_sigmoid: return act::sigmoid(K * contour_level(x, nullptr));
    }
    return 0.0;
  }

  [[nodiscard]] Point<Dim> gradient(const Point<Dim>& x) const {
    const Point<Dim> dx = x - c;
    switch (kind) {
      case MorphKind::sigmoid_circle: {
        const double z = K * (r * r - dx.squaredNorm());
        return act::sigmoid_prime(z) * K * (-2.0 * dx);
      }
      case MorphKind::sigmoid_rectangle: {
        const auto [m, axis] = rect_level(dx);
        Point<Dim> g = Point<Dim>::Zero();
        const double s = dx[axis] > 0 ? 1.0 : (dx[axis] < 0 ? -1.0 : 0.0);
        g[axis] = -K * act::sigmoid_prime(-K * m) * s;
        return g;
      }
      case MorphKind::truncated_gaussian_circle: {
        const double q = dx.squaredNorm();
        const double z = K * (r * r - q);
        const double e = std::exp(-v * q);
        return (act::sigmoid_prime(z) * K * e + act::sigmoid(z) * e * v) * (-2.0 * dx);
      }
      case MorphKind::gaussian_bump: return std::exp(-v * dx.squaredNorm()) * (-2.0 * v) * dx;
      case MorphKind::relu_cone: {
        const double n = dx.norm();
        if (n == 0.0 || n >= r) return Point<Dim>::Zero();
        return -dx / n;
      }
      case MorphKind::torus_sigmoid: {
        Point<Dim> gd = torus_level_gradient(dx);
        return act::sigmoid_prime(K * torus_level(dx)) * K * gd;
      }
      case MorphKind::contour_sigmoid: {
        if (distance == ContourDistance::sign) return Point<Dim>::Zero();
        Point<Dim> gd;
        const double d = contour_level(x, &gd);
        return act::sigmoid_prime(K * d) * K * gd;
      }
    }
    return Point<Dim>::Zero();
  }

 private:
  [[nodiscard]] std::pair<double, int> rect_level(const Point<Dim>& dx) const {
    double m = -std::numeric_limits<double>::infinity();
    int axis = 0;
    for (int d = 0; d < Dim; ++d) {
      const double t = std::abs(dx[d]) - half[d];
      if (t > m) {
        m = t;
        axis = d;
      }
    }
    return {m, axis};
  }

  [[nodiscard]] double torus_level(const Point<Dim>& dx) const {
    if constexpr (Dim == 3) {
      const double rho_xy = std::hypot(dx[0], dx[1]);
      const double a = rho_xy - R;
      return r * r - (a * a + dx[2] * dx[2]);
    } else {
      throw std::logic_error("torus_sigmoid is defined in 3D only");
    }
  }

  [[nodiscard]] Point<Dim> torus_level_gradient(const Point<Dim>& dx) const {
    if constexpr (Dim == 3) {
      const double rho_xy = std::hypot(dx[0], dx[1]);
      Point<Dim> g = Point<Dim>::Zero();
      if (rho_xy > 0) {
        const double f = -2.0 * (rho_xy - R) / rho_xy;
        g[0] = f * dx[0];
        g[1] = f * dx[1];
      }
      g[2] = -2.0 * dx[2];
      return g;
    } else {
      throw std::logic_error("torus_sigmoid is defined in 3D only");
    }
  }

  double contour_level(const Point<Dim>& x, Point<Dim>* grad) const {
    if constexpr (Dim == 2) {
      if (!contour) throw std::logic_error("contour_sigmoid basis without a contour");
      if (distance == ContourDistance::sign) return contour->contains(x) ? 1.0 : -1.0;
      Point2 closest;
      const double d = contour->signed_distance(x, &closest);
      if (grad) {
        const Point2 diff = x - closest;
        const double n = diff.norm();
        *grad = n > 0 ? Point2((d >= 0 ? 1.0 : -1.0) * diff / n) : Point2::Zero();
      }
      return d;
    } else {
      throw std::logic_error("contour_sigmoid is defined in 2D only");
    }
  }
};

template <int Dim>
using BasisFunction = std::variant<RandomFeature<Dim>, MorphBasis<Dim>>;

/// Provenance of a contiguous block of columns.
struct BasisGroup {
  std::string tag;  // "random", "morph:<kind>:<region>", ...
  std::size_t begin = 0;
  std::size_t end = 0;
  std::uint64_t seed = 0;
};

template <int Dim>
class BasisSet {
 public:
  [[nodiscard]] std::size_t size() const { return items_.size(); }
  [[nodiscard]] bool empty() const { return items_.empty(); }
  [[nodiscard]] const BasisFunction<Dim>& operator[](std::size_t i) const { return items_[i]; }
  [[nodiscard]] const std::vector<BasisFunction<Dim>>& items() const { return items_; }
  [[nodiscard]] const std::vector<BasisGroup>& groups() const { return groups_; }
  [[nodiscard]] const std::vector<std::shared_ptr<const Contour>>& contours() const { return contours_; }

  void add_group(std::string tag, std::uint64_t seed, std::vector<BasisFunction<Dim>> fns) {
    BasisGroup g{std::move(tag), items_.size(), items_.size() + fns.size(), seed};
    for (auto& f : fns) items_.push_back(std::move(f));
    groups_.push_back(std::move(g));
  }

  int add_contour(std::shared_ptr<const Contour> c) {
    contours_.push_back(std::move(c));
    return static_cast<int>(contours_.size()) - 1;
  }

  /// Appends every function of `other` (columns keep their order).
  void append(const BasisSet& other) {
    const auto offset = items_.size();
    const int coffset = static_cast<int>(contours_.size());
    for (const auto& c : other.contours_) contours_.push_back(c);
    for (auto f : other.items_) {
      if (auto* m = std::get_if<MorphBasis<Dim>>(&f); m && m->contour_index >= 0) m->contour_index += coffset;
      items_.push_back(std::move(f));
    }
    for (auto g : other.groups_) {
      g.begin += offset;
      g.end += offset;
      groups_.push_back(std::move(g));
    }
  }

  [[nodiscard]] double value(std::size_t i, const Point<Dim>& x) const {
    return std::visit([&](const auto& f) { return f.value(x); }, items_[i]);
  }
  [[nodiscard]] Point<Dim> gradient(std::size_t i, const Point<Dim>& x) const {
    return std::visit([&](const auto& f) { return f.gradient(x); }, items_[i]);
  }

  /// Columns [begin, end) evaluated at the columns of `pts`: (#pts x (end-begin)).
  [[nodiscard]] Eigen::MatrixXd evaluate(const Eigen::Matrix<double, Dim, Eigen::Dynamic>& pts, std::size_t begin,
                                         std::size_t end) const {
    Eigen::MatrixXd out(pts.cols(), static_cast<Eigen::Index>(end - begin));
    for (std::size_t m = begin; m < end; ++m) {
      auto col = out.col(static_cast<Eigen::Index>(m - begin));
      if (const auto* rf = std::get_if<RandomFeature<Dim>>(&items_[m]); rf && !rf->window) {
        const Eigen::VectorXd z = (pts.transpose() * rf->effective_direction()).array() + rf->effective_bias();
        switch (rf->activation) {
          case Activation::sin: col = z.array().sin(); break;
          case Activation::tanh: col = z.array().tanh(); break;
          case Activation::relu: col = z.array().max(0.0); break;
        }
        continue;
      }
      for (Eigen::Index j = 0; j < pts.cols(); ++j) col[j] = value(m, pts.col(j));
    }
    return out;
  }

  [[nodiscard]] Eigen::MatrixXd evaluate(const Eigen::Matrix<double, Dim, Eigen::Dynamic>& pts) const {
    return evaluate(pts, 0, size());
  }

 private:
  std::vector<BasisFunction<Dim>> items_;
  std::vector<BasisGroup> groups_;
  std::vector<std::shared_ptr<const Contour>> contours_;
};

/// Standardization used by global random features: maps `box` to [-1, 1]^d.
template <int Dim>
struct Standardization {
  Point<Dim> center = Point<Dim>::Zero();
  Point<Dim> scale = Point<Dim>::Ones();

  static Standardization of(const Box<Dim>& box) { return {box.center(), box.half_extent()}; }
};

/// M frozen random features with k ~ U(-R_m, R_m)^d and b ~ U(-R_m, R_m).
template <int Dim>
BasisSet<Dim> build_random_set(std::size_t M, double R_m, Activation activation, std::uint64_t seed,
                               const Standardization<Dim>& standardization = {}) {
  if (M < 1) throw std::invalid_argument("build_random_set: M must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-R_m, R_m);
  std::vector<BasisFunction<Dim>> fns;
  fns.reserve(M);
  for (std::size_t m = 0; m < M; ++m) {
    RandomFeature<Dim> f;
    for (int d = 0; d < Dim; ++d) f.k[d] = u(rng);
    f.b = u(rng);
    f.activation = activation;
    f.center = standardization.center;
    f.scale = standardization.scale;
    fns.emplace_back(std::move(f));
  }
  BasisSet<Dim> set;
  set.add_group("random", seed, std::move(fns));
  return set;
}

/// J features per PoU window, each standardized to its own patch.
template <int Dim>
BasisSet<Dim> build_pou_set(const PoUPartition<Dim>& partition, std::size_t per_patch, double R_m, Activation activation,
                            std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-R_m, R_m);
  std::vector<BasisFunction<Dim>> fns;
  for (const auto& w : partition.windows) {
    for (std::size_t j = 0; j < per_patch; ++j) {
      RandomFeature<Dim> f;
      for (int d = 0; d < Dim; ++d) f.k[d] = u(rng);
      f.b = u(rng);
      f.activation = activation;
      f.center = w.center;
      f.scale = w.radius;
      f.window = w;
      fns.emplace_back(std::move(f));
    }
  }
  BasisSet<Dim> set;
  set.add_group("pou", seed, std::move(fns));
  return set;
}

/// Shape statistics of one detected region.
template <int Dim>
struct ShapeEstimate {
  Point<Dim> lo = Point<Dim>::Zero();      // bounding extremes (x_left, x_bottom, ...)
  Point<Dim> hi = Point<Dim>::Zero();      // (x_right, x_top, ...)
  Point<Dim> center = Point<Dim>::Zero();  // c-hat
  double radius = 0.0;                     // r-hat
  Point<Dim> extent = Point<Dim>::Zero();  // width, height (, depth)
  Point<Dim> peak = Point<Dim>::Zero();    // location of max |S| in the region
  double peak_value = 0.0;
  Point<Dim> fwhm = Point<Dim>::Zero();
  double v_min = 0.0;
  double v_max = 0.0;
  std::vector<Point2> contour;  // closed level curve (2D only)
  bool contour_closed = false;
  std::size_t size = 0;  // number of grid points in the region
};

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

/// Sampling windows for morphology parameters.  Absolute ranges override the
/// relative tolerances around the detected values when present.
struct MorphSampling {
  Range K{1000.0, 20000.0};
  double eps_c = 0.03;
  double eps_r = 0.10;
  std::vector<double> eps_extent{0.20, 0.15, 0.15};  // width, height, depth
  std::optional<double> center_abs;                  // c ~ U(c-hat - a, c-hat + a)
  std::optional<Range> r;
  std::optional<Range> R;
  std::optional<Range> v;
  Range rho{-0.03, -0.01};
  OffsetRule offset_rule = OffsetRule::normal;
  ContourDistance contour_distance = ContourDistance::sign;
  bool centers_on_contour = false;  // sigmoid_circle centers cycle through the region contour
};

namespace detail {
inline double draw(std::mt19937_64& rng, double a, double b) {
  if (a == b) return a;
  if (a > b) std::swap(a, b);
  return std::uniform_real_distribution<double>(a, b)(rng);
}
}  // namespace detail

/// M_k morphology bases with parameters drawn inside the tolerance windows
/// around `shape`.  Contour kinds register their base contour in `set`.
template <int Dim>
std::vector<BasisFunction<Dim>> sample_morphology(MorphKind kind, const ShapeEstimate<Dim>& shape,
                                                  const MorphSampling& s, std::size_t count, std::uint64_t seed,
                                                  BasisSet<Dim>* set = nullptr) {
  if (shape.size == 0) throw std::invalid_argument("sample_morphology: empty detection region");
  std::mt19937_64 rng(seed);
  std::vector<BasisFunction<Dim>> out;
  out.reserve(count);

  auto center_at = [&](const Point<Dim>& base) {
    Point<Dim> c;
    for (int d = 0; d < Dim; ++d) {
      if (s.center_abs) {
        c[d] = detail::draw(rng, base[d] - *s.center_abs, base[d] + *s.center_abs);
      } else {
        c[d] = detail::draw(rng, (1.0 - s.eps_c) * base[d], (1.0 + s.eps_c) * base[d]);
      }
    }
    return c;
  };
  auto radius = [&] {
    return s.r ? detail::draw(rng, s.r->lo, s.r->hi)
               : detail::draw(rng, (1.0 - s.eps_r) * shape.radius, (1.0 + s.eps_r) * shape.radius);
  };
  auto sharpness = [&] { return detail::draw(rng, s.K.lo, s.K.hi); };
  auto decay = [&] {
    return s.v ? detail::draw(rng, s.v->lo, s.v->hi) : detail::draw(rng, 0.5 * shape.v_min, 2.0 * shape.v_max);
  };

  std::shared_ptr<const Contour> base_contour;
  int contour_index = -1;
  if (kind == MorphKind::contour_sigmoid || (kind == MorphKind::sigmoid_circle && s.centers_on_contour)) {
    if constexpr (Dim != 2) {
      throw std::invalid_argument("contour-based morphology requires a 2D problem");
    } else {
      if (shape.contour.size() < 3) throw std::invalid_argument("sample_morphology: region has no usable contour");
      base_contour = std::make_shared<const Contour>(shape.contour);
      if (set && kind == MorphKind::contour_sigmoid) contour_index = set->add_contour(base_contour);
    }
  }

  for (std::size_t j = 0; j < count; ++j) {
    MorphBasis<Dim> b;
    b.kind = kind;
    switch (kind) {
      case MorphKind::sigmoid_circle:
        b.K = sharpness();
        if (base_contour) {
          if constexpr (Dim == 2) b.c = base_contour->points()[j % base_contour->size()];
        } else {
          b.c = center_at(shape.center);
        }
        b.r = radius();
        break;
      case MorphKind::sigmoid_rectangle:
        b.K = sharpness();
        b.c = center_at(shape.center);
        for (int d = 0; d < Dim; ++d) {
          const double e = s.eps_extent[std::min<std::size_t>(static_cast<std::size_t>(d), s.eps_extent.size() - 1)];
          b.half[d] = 0.5 * detail::draw(rng, (1.0 - e) * shape.extent[d], (1.0 + e) * shape.extent[d]);
        }
        break;
      case MorphKind::truncated_gaussian_circle:
        b.K = sharpness();
        b.c = center_at(shape.center);
        b.r = radius();
        b.v = decay();
        break;
      case MorphKind::gaussian_bump:
        b.c = center_at(shape.peak);
        b.v = decay();
        break;
      case MorphKind::relu_cone:
        b.c = center_at(shape.peak);
        b.r = radius();
        break;
      case MorphKind::torus_sigmoid:
        if constexpr (Dim != 3) {
          throw std::invalid_argument("torus_sigmoid requires a 3D problem");
        } else {
          b.K = sharpness();
          b.c = center_at(shape.center);
          b.r = radius();
          // Major radius: ring through the middle of the tube.
          const double major = std::max(0.5 * std::max(shape.extent[0], shape.extent[1]) - shape.radius, 0.0);
          b.R = s.R ? detail::draw(rng, s.R->lo, s.R->hi) : detail::draw(rng, (1.0 - s.eps_r) * major, (1.0 + s.eps_r) * major);
        }
        break;
      case MorphKind::contour_sigmoid:
        if constexpr (Dim == 2) {
          b.K = sharpness();
          b.rho = detail::draw(rng, s.rho.lo, s.rho.hi);
          b.offset_rule = s.offset_rule;
          b.distance = s.contour_distance;
          b.contour_index = contour_index;
          b.contour = std::make_shared<const Contour>(offset_contour(*base_contour, b.rho, b.offset_rule));
        }
        break;
    }
    out.emplace_back(std::move(b));
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON serialization

namespace detail {

template <int Dim>
nlohmann::json to_json_point(const Point<Dim>& p) {
  auto a = nlohmann::json::array();
  for (int d = 0; d < Dim; ++d) a.push_back(p[d]);
  return a;
}

template <int Dim>
Point<Dim> from_json_point(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != static_cast<std::size_t>(Dim)) throw std::invalid_argument("expected a point array");
  Point<Dim> p;
  for (int d = 0; d < Dim; ++d) p[d] = j[static_cast<std::size_t>(d)].get<double>();
  return p;
}

}  // namespace detail

template <int Dim>
nlohmann::json basis_to_json(const BasisSet<Dim>& set) {
  using nlohmann::json;
  json out;
  out["dim"] = Dim;
  out["groups"] = json::array();
  for (const auto& g : set.groups()) {
    out["groups"].push_back({{"tag", g.tag}, {"begin", g.begin}, {"end", g.end}, {"seed", g.seed}});
  }
  out["contours"] = json::array();
  for (const auto& c : set.contours()) {
    json pts = json::array();
    for (const auto& p : c->points()) pts.push_back({p.x(), p.y()});
    out["contours"].push_back(pts);
  }
  out["functions"] = json::array();
  for (std::size_t i = 0; i < set.size(); ++i) {
    json f;
    f["index"] = i;
    if (const auto* rf = std::get_if<RandomFeature<Dim>>(&set[i])) {
      f["kind"] = "random_feature";
      f["activation"] = std::string(to_string(rf->activation));
      f["k"] = detail::to_json_point<Dim>(rf->k);
      f["b"] = rf->b;
      f["center"] = detail::to_json_point<Dim>(rf->center);
      f["scale"] = detail::to_json_point<Dim>(rf->scale);
      if (rf->window) {
        f["pou"] = {{"kind", rf->window->kind == PouKind::a ? "a" : "b"},
                    {"center", detail::to_json_point<Dim>(rf->window->center)},
                    {"radius", detail::to_json_point<Dim>(rf->window->radius)}};
      }
    } else {
      const auto& m = std::get<MorphBasis<Dim>>(set[i]);
      f["kind"] = std::string(to_string(m.kind));
      f["K"] = m.K;
      f["c"] = detail::to_json_point<Dim>(m.c);
      f["r"] = m.r;
      f["R"] = m.R;
      f["half"] = detail::to_json_point<Dim>(m.half);
      f["v"] = m.v;
      if (m.kind == MorphKind::contour_sigmoid) {
        f["contour_index"] = m.contour_index;
        f["rho"] = m.rho;
        f["offset_rule"] = m.offset_rule == OffsetRule::normal ? "normal" : "literal";
        f["distance"] = m.distance == ContourDistance::sign ? "sign" : "euclidean";
      }
    }
    out["functions"].push_back(std::move(f));
  }
  return out;
}

template <int Dim>
BasisSet<Dim> basis_from_json(const nlohmann::json& j) {
  if (j.at("dim").get<int>() != Dim) throw std::invalid_argument("basis JSON has a different dimension");
  std::vector<std::shared_ptr<const Contour>> contours;
  if constexpr (Dim == 2) {
    for (const auto& c : j.at("contours")) {
      std::vector<Point2> pts;
      for (const auto& p : c) pts.emplace_back(p.at(0).get<double>(), p.at(1).get<double>());
      contours.push_back(std::make_shared<const Contour>(std::move(pts)));
    }
  }
  std::vector<BasisFunction<Dim>> fns;
  for (const auto& f : j.at("functions")) {
    const auto kind = f.at("kind").get<std::string>();
    if (kind == "random_feature") {
      RandomFeature<Dim> rf;
      rf.activation = parse_activation(f.at("activation").get<std::string>());
      rf.k = detail::from_json_point<Dim>(f.at("k"));
      rf.b = f.at("b").get<double>();
      rf.center = detail::from_json_point<Dim>(f.at("center"));
      rf.scale = detail::from_json_point<Dim>(f.at("scale"));
      if (f.contains("pou")) {
        PouWindow<Dim> w;
        w.kind = f["pou"].at("kind").get<std::string>() == "a" ? PouKind::a : PouKind::b;
        w.center = detail::from_json_point<Dim>(f["pou"].at("center"));
        w.radius = detail::from_json_point<Dim>(f["pou"].at("radius"));
        rf.window = w;
      }
      fns.emplace_back(std::move(rf));
    } else {
      MorphBasis<Dim> m;
      m.kind = parse_morph_kind(kind);
      m.K = f.at("K").get<double>();
      m.c = detail::from_json_point<Dim>(f.at("c"));
      m.r = f.at("r").get<double>();
      m.R = f.at("R").get<double>();
      m.half = detail::from_json_point<Dim>(f.at("half"));
      m.v = f.at("v").get<double>();
      if (m.kind == MorphKind::contour_sigmoid) {
        m.contour_index = f.at("contour_index").get<int>();
        m.rho = f.at("rho").get<double>();
        m.offset_rule = f.at("offset_rule").get<std::string>() == "literal" ? OffsetRule::literal : OffsetRule::normal;
        m.distance = f.at("distance").get<std::string>() == "euclidean" ? ContourDistance::euclidean : ContourDistance::sign;
        const auto idx = static_cast<std::size_t>(m.contour_index);
        if (idx >= contours.size()) throw std::invalid_argument("basis JSON: contour index out of range");
        m.contour = std::make_shared<const Contour>(offset_contour(*contours[idx], m.rho, m.offset_rule));
      }
      fns.emplace_back(std::move(m));
    }
  }
  BasisSet<Dim> set;
  for (auto& c : contours) set.add_contour(c);
  std::size_t next = 0;
  for (const auto& g : j.at("groups")) {
    const auto b = g.at("begin").get<std::size_t>();
    const auto e = g.at("end").get<std::size_t>();
    if (b != next || e < b || e > fns.size()) throw std::invalid_argument("basis JSON: malformed groups");
    std::vector<BasisFunction<Dim>> part(std::make_move_iterator(fns.begin() + static_cast<std::ptrdiff_t>(b)),
                                         std::make_move_iterator(fns.begin() + static_cast<std::ptrdiff_t>(e)));
    set.add_group(g.at("tag").get<std::string>(), g.at("seed").get<std::uint64_t>(), std::move(part));
    next = e;
  }
  if (next != fns.size()) throw std::invalid_argument("basis JSON: groups do not cover all functions");
  return set;
}

}  // namespace helm
