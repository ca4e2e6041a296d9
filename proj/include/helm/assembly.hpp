#pragma once

// Discretized radiation operators over all wavenumbers, stacked into the real
// system A s = b with rows [Re D; Im D; Re N; Im N].

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "helm/basis.hpp"
#include "helm/quadmesh.hpp"
#include "helm/specfun.hpp"

namespace helm {

template <int Dim>
struct MeasurementPoint {
  Point<Dim> x = Point<Dim>::Zero();
  Point<Dim> normal = Point<Dim>::Zero();
  bool dirichlet = true;
  bool neumann = true;
};

class WavenumberSet {
 public:
  WavenumberSet() = default;
  explicit WavenumberSet(std::vector<double> values) : values_(std::move(values)) {
    if (values_.empty()) throw std::invalid_argument("wavenumber set is empty");
    for (std::size_t i = 0; i < values_.size(); ++i) {
      if (!(values_[i] > 0) || !std::isfinite(values_[i])) throw std::invalid_argument("wavenumbers must be positive");
      if (i > 0 && !(values_[i] > values_[i - 1])) throw std::invalid_argument("wavenumbers must be strictly increasing");
    }
  }

  /// k_min, k_min + step, ... up to k_max (inclusive within 1e-9).
  static WavenumberSet range(double k_min, double k_max, double step) {
    if (!(step > 0)) throw std::invalid_argument("wavenumber step must be positive");
    std::vector<double> v;
    for (int i = 0;; ++i) {
      const double k = k_min + i * step;
      if (k > k_max + 1e-9) break;
      v.push_back(k);
    }
    return WavenumberSet(std::move(v));
  }

  [[nodiscard]] const std::vector<double>& values() const { return values_; }
  [[nodiscard]] std::size_t size() const { return values_.size(); }
  [[nodiscard]] double operator[](std::size_t i) const { return values_[i]; }

 private:
  std::vector<double> values_;
};

enum class RowKind { re_d, im_d, re_n, im_n };

inline std::string_view to_string(RowKind k) {
  switch (k) {
    case RowKind::re_d: return "ReD";
    case RowKind::im_d: return "ImD";
    case RowKind::re_n: return "ReN";
    case RowKind::im_n: return "ImN";
  }
  return "?";
}

struct RowInfo {
  std::size_t k_index = 0;
  double k = 0.0;
  std::size_t point = 0;
  RowKind kind = RowKind::re_d;
};

/// Complex data per (wavenumber, point); NaN marks an absent entry.
struct MeasurementData {
  Eigen::MatrixXcd dirichlet;  // (#k x #points)
  Eigen::MatrixXcd neumann;

  static MeasurementData absent(std::size_t nk, std::size_t np) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    MeasurementData d;
    d.dirichlet = Eigen::MatrixXcd::Constant(static_cast<Eigen::Index>(nk), static_cast<Eigen::Index>(np), {nan, nan});
    d.neumann = d.dirichlet;
    return d;
  }
};

inline bool is_present(const std::complex<double>& z) { return !std::isnan(z.real()) && !std::isnan(z.imag()); }

struct SystemMatrix {
  Eigen::MatrixXd A;
  Eigen::VectorXd b;
  std::vector<RowInfo> row_map;
  std::vector<std::size_t> col_map;  // basis index per column

  [[nodiscard]] Eigen::Index rows() const { return A.rows(); }
  [[nodiscard]] Eigen::Index cols() const { return A.cols(); }
};

/// Relative weights of the Dirichlet and Neumann blocks (unit by default).
struct BlockWeights {
  double dirichlet = 1.0;
  double neumann = 1.0;
};

template <int Dim>
std::vector<RowInfo> build_row_map(const std::vector<MeasurementPoint<Dim>>& points, const WavenumberSet& ks) {
  std::vector<RowInfo> rows;
  for (RowKind kind : {RowKind::re_d, RowKind::im_d, RowKind::re_n, RowKind::im_n}) {
    const bool neumann = kind == RowKind::re_n || kind == RowKind::im_n;
    for (std::size_t ki = 0; ki < ks.size(); ++ki) {
      for (std::size_t p = 0; p < points.size(); ++p) {
        if (neumann ? points[p].neumann : points[p].dirichlet) rows.push_back({ki, ks[ki], p, kind});
      }
    }
  }
  return rows;
}

template <int Dim>
void validate_points(const std::vector<MeasurementPoint<Dim>>& points, const Box<Dim>& v0) {
  for (std::size_t p = 0; p < points.size(); ++p) {
    const auto& mp = points[p];
    if (!(v0.distance(mp.x) > 0.0)) {
      throw std::invalid_argument("measurement point " + std::to_string(p) + " lies in the quadrature box");
    }
    if (mp.neumann && std::abs(mp.normal.norm() - 1.0) > 1e-12) {
      throw std::invalid_argument("measurement point " + std::to_string(p) + " has a non-unit normal");
    }
  }
}

struct AssemblyOptions {
  double r_min = kDefaultRMin;
  Eigen::Index chunk = 2048;                   // quadrature points per block
  std::size_t cache_bytes = std::size_t{1} << 30;  // kernel cache budget
  BlockWeights weights;
};

/// Weighted, real-stacked kernel K (n x Q) for one quadrature point set, so
/// that A = K B with B(j, m) = phi_m(y_j).  Caches K when it fits the budget.
template <int Dim>
class KernelOperator {
 public:
  using PointMatrix = Eigen::Matrix<double, Dim, Eigen::Dynamic>;

  KernelOperator(std::vector<MeasurementPoint<Dim>> points, WavenumberSet ks, PointMatrix quad_points,
                 Eigen::VectorXd quad_weights, AssemblyOptions opts = {})
      : points_(std::move(points)),
        ks_(std::move(ks)),
        y_(std::move(quad_points)),
        w_(std::move(quad_weights)),
        opts_(opts),
        rows_(build_row_map(points_, ks_)) {
    index_rows();
    const double bytes = static_cast<double>(rows_.size()) * static_cast<double>(y_.cols()) * sizeof(double);
    if (bytes <= static_cast<double>(opts_.cache_bytes)) {
      cache_.resize(static_cast<Eigen::Index>(rows_.size()), y_.cols());
      fill(0, y_.cols(), cache_);
      cached_ = true;
    }
  }

  [[nodiscard]] const std::vector<RowInfo>& row_map() const { return rows_; }
  [[nodiscard]] Eigen::Index num_rows() const { return static_cast<Eigen::Index>(rows_.size()); }
  [[nodiscard]] Eigen::Index num_quad() const { return y_.cols(); }
  [[nodiscard]] bool cached() const { return cached_; }
  [[nodiscard]] const PointMatrix& quad_points() const { return y_; }
  [[nodiscard]] const Eigen::VectorXd& quad_weights() const { return w_; }

  /// Columns of A for basis functions [begin, end).
  [[nodiscard]] Eigen::MatrixXd apply(const BasisSet<Dim>& basis, std::size_t begin, std::size_t end) const {
    const auto ncols = static_cast<Eigen::Index>(end - begin);
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(num_rows(), ncols);
    const Eigen::Index Q = y_.cols();
    Eigen::MatrixXd K;
    for (Eigen::Index q0 = 0; q0 < Q; q0 += opts_.chunk) {
      const Eigen::Index q1 = std::min(Q, q0 + opts_.chunk);
      const Eigen::MatrixXd B = basis.evaluate(y_.middleCols(q0, q1 - q0), begin, end);
      if (cached_) {
        A.noalias() += cache_.middleCols(q0, q1 - q0) * B;
      } else {
        K.resize(num_rows(), q1 - q0);
        fill(q0, q1, K);
        A.noalias() += K * B;
      }
    }
    return A;
  }

  /// Forward map of a pointwise source: one value per quadrature point.
  [[nodiscard]] Eigen::VectorXd apply_values(const Eigen::VectorXd& values) const {
    if (values.size() != y_.cols()) throw std::invalid_argument("apply_values: size mismatch");
    if (cached_) return cache_ * values;
    Eigen::VectorXd out = Eigen::VectorXd::Zero(num_rows());
    Eigen::MatrixXd K;
    for (Eigen::Index q0 = 0; q0 < y_.cols(); q0 += opts_.chunk) {
      const Eigen::Index q1 = std::min(y_.cols(), q0 + opts_.chunk);
      K.resize(num_rows(), q1 - q0);
      fill(q0, q1, K);
      out.noalias() += K * values.segment(q0, q1 - q0);
    }
    return out;
  }

 private:
  void index_rows() {
    const std::size_t nk = ks_.size();
    const std::size_t np = points_.size();
    for (auto& v : row_of_) v.assign(nk * np, -1);
    for (std::size_t r = 0; r < rows_.size(); ++r) {
      const auto& ri = rows_[r];
      row_of_[static_cast<std::size_t>(ri.kind)][ri.k_index * np + ri.point] = static_cast<std::ptrdiff_t>(r);
    }
  }

  void fill(Eigen::Index q0, Eigen::Index q1, Eigen::MatrixXd& out) const {
    const std::size_t np = points_.size();
    const double wd = opts_.weights.dirichlet;
    const double wn = opts_.weights.neumann;
    for (std::size_t ki = 0; ki < ks_.size(); ++ki) {
      const double k = ks_[ki];
      for (std::size_t p = 0; p < np; ++p) {
        const auto& mp = points_[p];
        const std::size_t key = ki * np + p;
        const auto rrd = row_of_[0][key];
        const auto rid = row_of_[1][key];
        const auto rrn = row_of_[2][key];
        const auto rin = row_of_[3][key];
        for (Eigen::Index j = q0; j < q1; ++j) {
          const Point<Dim> d = mp.x - y_.col(j);
          const double r = d.norm();
          detail::check_distance(r, opts_.r_min);
          const double cosang = mp.neumann ? d.dot(mp.normal) / r : 0.0;
          const auto pn = phi_and_normal_radial<Dim>(k, r, cosang);
          const double wj = w_[j];
          const Eigen::Index c = j - q0;
          if (rrd >= 0) out(rrd, c) = wd * wj * pn[0].real();
          if (rid >= 0) out(rid, c) = wd * wj * pn[0].imag();
          if (rrn >= 0) out(rrn, c) = wn * wj * pn[1].real();
          if (rin >= 0) out(rin, c) = wn * wj * pn[1].imag();
        }
      }
    }
  }

  std::vector<MeasurementPoint<Dim>> points_;
  WavenumberSet ks_;
  PointMatrix y_;
  Eigen::VectorXd w_;
  AssemblyOptions opts_;
  std::vector<RowInfo> rows_;
  std::array<std::vector<std::ptrdiff_t>, 4> row_of_;
  Eigen::MatrixXd cache_;
  bool cached_ = false;
};

/// Matrix part of the system for every basis function.
template <int Dim>
SystemMatrix assemble_operator(const AdaptiveMesh<Dim>& mesh, const BasisSet<Dim>& basis, const WavenumberSet& ks,
                               const std::vector<MeasurementPoint<Dim>>& points, const AssemblyOptions& opts = {}) {
  if (mesh.num_leaves() == 0) throw std::invalid_argument("assemble_operator: empty mesh");
  if (basis.empty()) throw std::invalid_argument("assemble_operator: empty basis");
  validate_points(points, mesh.domain());
  KernelOperator<Dim> op(points, ks, mesh.points(), mesh.weights(), opts);
  SystemMatrix sys;
  sys.A = op.apply(basis, 0, basis.size());
  sys.row_map = op.row_map();
  sys.col_map.resize(basis.size());
  for (std::size_t m = 0; m < basis.size(); ++m) sys.col_map[m] = m;
  sys.b = Eigen::VectorXd::Zero(sys.A.rows());
  return sys;
}

/// Packs complex data into b following `rows`.  Every row needs a present
/// entry and no entry may be present without a row.
inline Eigen::VectorXd assemble_rhs(const std::vector<RowInfo>& rows, const MeasurementData& data,
                                    const BlockWeights& weights = {}) {
  const auto nk = data.dirichlet.rows();
  const auto np = data.dirichlet.cols();
  if (data.neumann.rows() != nk || data.neumann.cols() != np) throw std::invalid_argument("assemble_rhs: shape mismatch");
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic> used_d = Eigen::MatrixXi::Zero(nk, np);
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic> used_n = Eigen::MatrixXi::Zero(nk, np);
  Eigen::VectorXd b(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& ri = rows[r];
    const auto ki = static_cast<Eigen::Index>(ri.k_index);
    const auto p = static_cast<Eigen::Index>(ri.point);
    if (ki >= nk || p >= np) throw std::invalid_argument("assemble_rhs: row outside the data shape");
    const bool neumann = ri.kind == RowKind::re_n || ri.kind == RowKind::im_n;
    const std::complex<double> z = neumann ? data.neumann(ki, p) : data.dirichlet(ki, p);
    if (!is_present(z)) {
      throw std::invalid_argument("assemble_rhs: missing " + std::string(neumann ? "Neumann" : "Dirichlet") +
                                  " datum for k index " + std::to_string(ri.k_index) + ", point " + std::to_string(ri.point));
    }
    (neumann ? used_n : used_d)(ki, p) = 1;
    const double w = neumann ? weights.neumann : weights.dirichlet;
    const bool re = ri.kind == RowKind::re_d || ri.kind == RowKind::re_n;
    b[static_cast<Eigen::Index>(r)] = w * (re ? z.real() : z.imag());
  }
  for (Eigen::Index i = 0; i < nk; ++i) {
    for (Eigen::Index p = 0; p < np; ++p) {
      if (!used_d(i, p) && is_present(data.dirichlet(i, p))) throw std::invalid_argument("assemble_rhs: surplus Dirichlet datum");
      if (!used_n(i, p) && is_present(data.neumann(i, p))) throw std::invalid_argument("assemble_rhs: surplus Neumann datum");
    }
  }
  return b;
}

/// Inverse of assemble_rhs.
inline MeasurementData unpack_rhs(const std::vector<RowInfo>& rows, const Eigen::VectorXd& b, std::size_t nk,
                                  std::size_t np, const BlockWeights& weights = {}) {
  if (static_cast<std::size_t>(b.size()) != rows.size()) throw std::invalid_argument("unpack_rhs: size mismatch");
  MeasurementData d = MeasurementData::absent(nk, np);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& ri = rows[r];
    const bool neumann = ri.kind == RowKind::re_n || ri.kind == RowKind::im_n;
    auto& z = (neumann ? d.neumann : d.dirichlet)(static_cast<Eigen::Index>(ri.k_index), static_cast<Eigen::Index>(ri.point));
    const double v = b[static_cast<Eigen::Index>(r)] / (neumann ? weights.neumann : weights.dirichlet);
    if (ri.kind == RowKind::re_d || ri.kind == RowKind::re_n) {
      z = {v, std::isnan(z.imag()) ? 0.0 : z.imag()};
    } else {
      z = {std::isnan(z.real()) ? 0.0 : z.real(), v};
    }
  }
  return d;
}

struct Prediction {
  Eigen::VectorXd residual;
  double loss = 0.0;
};

inline Prediction predict(const SystemMatrix& sys, const Eigen::VectorXd& s) {
  if (s.size() != sys.A.cols()) throw std::invalid_argument("predict: coefficient length mismatch");
  Prediction p;
  p.residual = sys.A * s - sys.b;
  p.loss = p.residual.squaredNorm();
  return p;
}

/// Binary layout: uint64 n, uint64 M, then A row-major (n*M float64), then
/// b (n float64).  Little-endian host order.
inline void write_system_binary(const std::string& path, const SystemMatrix& sys) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path);
  const std::uint64_t n = static_cast<std::uint64_t>(sys.A.rows());
  const std::uint64_t m = static_cast<std::uint64_t>(sys.A.cols());
  os.write(reinterpret_cast<const char*>(&n), sizeof n);
  os.write(reinterpret_cast<const char*>(&m), sizeof m);
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = sys.A;
  os.write(reinterpret_cast<const char*>(rm.data()), static_cast<std::streamsize>(n * m * sizeof(double)));
  os.write(reinterpret_cast<const char*>(sys.b.data()), static_cast<std::streamsize>(n * sizeof(double)));
}

inline SystemMatrix read_system_binary(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::uint64_t n = 0;
  std::uint64_t m = 0;
  is.read(reinterpret_cast<char*>(&n), sizeof n);
  is.read(reinterpret_cast<char*>(&m), sizeof m);
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m));
  is.read(reinterpret_cast<char*>(rm.data()), static_cast<std::streamsize>(n * m * sizeof(double)));
  SystemMatrix sys;
  sys.A = rm;
  sys.b.resize(static_cast<Eigen::Index>(n));
  is.read(reinterpret_cast<char*>(sys.b.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!is) throw std::runtime_error("truncated system file " + path);
  return sys;
}

inline void write_row_map_csv(std::ostream& os, const std::vector<RowInfo>& rows) {
  os << "row,k_index,k,point,kind\n";
  os.precision(17);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    os << r << ',' << rows[r].k_index << ',' << rows[r].k << ',' << rows[r].point << ',' << to_string(rows[r].kind) << '\n';
  }
}

template <int Dim>
void write_col_map_csv(std::ostream& os, const std::vector<std::size_t>& cols, const BasisSet<Dim>& basis) {
  os << "column,basis_index,group\n";
  for (std::size_t c = 0; c < cols.size(); ++c) {
    std::string tag;
    for (const auto& g : basis.groups()) {
      if (cols[c] >= g.begin && cols[c] < g.end) tag = g.tag;
    }
    os << c << ',' << cols[c] << ',' << tag << '\n';
  }
}

}  // namespace helm
