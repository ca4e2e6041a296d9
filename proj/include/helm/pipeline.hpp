#pragma once

// IA-RFM (indicator-driven mesh refinement) and MA-RFM (posterior region
// detection, shape estimation and morphology enhancement).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "helm/assembly.hpp"
#include "helm/basis.hpp"
#include "helm/contour.hpp"
#include "helm/quadmesh.hpp"
#include "helm/solver.hpp"

namespace helm {

template <int Dim>
using PointSet = Eigen::Matrix<double, Dim, Eigen::Dynamic>;

// ---------------------------------------------------------------------------
// Source model

template <int Dim>
struct FieldSample {
  Eigen::VectorXd value;
  Eigen::Matrix<double, Dim, Eigen::Dynamic> grad;
};

template <int Dim>
struct SourceModel {
  BasisSet<Dim> basis;
  Eigen::VectorXd s;
  std::string provenance = "initial";

  [[nodiscard]] double value(const Point<Dim>& x) const {
    double v = 0.0;
    for (std::size_t m = 0; m < basis.size(); ++m) v += s[static_cast<Eigen::Index>(m)] * basis.value(m, x);
    return v;
  }

  [[nodiscard]] Point<Dim> gradient(const Point<Dim>& x) const {
    Point<Dim> g = Point<Dim>::Zero();
    for (std::size_t m = 0; m < basis.size(); ++m) g += s[static_cast<Eigen::Index>(m)] * basis.gradient(m, x);
    return g;
  }

  /// Values (and optionally gradients) at the columns of `pts`.
  [[nodiscard]] FieldSample<Dim> evaluate(const PointSet<Dim>& pts, bool with_grad = true,
                                          Eigen::Index chunk = 1024) const {
    if (static_cast<std::size_t>(s.size()) != basis.size()) throw std::invalid_argument("model: coefficient length mismatch");
    FieldSample<Dim> out;
    const Eigen::Index P = pts.cols();
    out.value = Eigen::VectorXd::Zero(P);
    if (with_grad) out.grad = Eigen::Matrix<double, Dim, Eigen::Dynamic>::Zero(Dim, P);
    for (Eigen::Index p0 = 0; p0 < P; p0 += chunk) {
      const Eigen::Index np = std::min(chunk, P - p0);
      const auto block = pts.middleCols(p0, np);
      Eigen::ArrayXd val = Eigen::ArrayXd::Zero(np);
      Eigen::Array<double, Dim, Eigen::Dynamic> grad = Eigen::Array<double, Dim, Eigen::Dynamic>::Zero(Dim, np);
      for (std::size_t m = 0; m < basis.size(); ++m) {
        const double sm = s[static_cast<Eigen::Index>(m)];
        if (sm == 0.0) continue;
        if (const auto* rf = std::get_if<RandomFeature<Dim>>(&basis[m]); rf && !rf->window) {
          const Point<Dim> w = rf->effective_direction();
          const Eigen::ArrayXd z = (block.transpose() * w).array() + rf->effective_bias();
          Eigen::ArrayXd d;
          switch (rf->activation) {
            case Activation::sin:
              val += sm * z.sin();
              if (with_grad) d = z.cos();
              break;
            case Activation::tanh: {
              const Eigen::ArrayXd t = z.tanh();
              val += sm * t;
              if (with_grad) d = 1.0 - t.square();
              break;
            }
            case Activation::relu:
              val += sm * z.max(0.0);
              if (with_grad) d = (z > 0.0).template cast<double>();
              break;
          }
          if (with_grad) {
            for (int k = 0; k < Dim; ++k) grad.row(k) += (sm * w[k]) * d.transpose();
          }
          continue;
        }
        for (Eigen::Index j = 0; j < np; ++j) {
          const Point<Dim> x = block.col(j);
          val[j] += sm * basis.value(m, x);
          if (with_grad) grad.col(j) += sm * basis.gradient(m, x).array();
        }
      }
      out.value.segment(p0, np) = val.matrix();
      if (with_grad) out.grad.middleCols(p0, np) = grad.matrix();
    }
    return out;
  }

  [[nodiscard]] Eigen::VectorXd values(const PointSet<Dim>& pts) const { return evaluate(pts, false).value; }
};

// ---------------------------------------------------------------------------
// Grids and error metric

/// res^Dim points of a uniform grid; x varies fastest.  Cell-centred grids
/// stay strictly inside the box, node grids include the faces.
template <int Dim>
PointSet<Dim> grid_points(const Box<Dim>& box, int res, bool cell_centered) {
  if (res < 2) throw std::invalid_argument("grid resolution must be >= 2");
  Eigen::Index total = 1;
  for (int d = 0; d < Dim; ++d) total *= res;
  PointSet<Dim> pts(Dim, total);
  for (Eigen::Index i = 0; i < total; ++i) {
    Eigen::Index rem = i;
    for (int d = 0; d < Dim; ++d) {
      const auto idx = static_cast<double>(rem % res);
      rem /= res;
      const double h = box.hi[d] - box.lo[d];
      pts(d, i) = cell_centered ? box.lo[d] + (idx + 0.5) * h / res : box.lo[d] + idx * h / (res - 1);
    }
  }
  return pts;
}

template <int Dim>
constexpr int default_grid_res() {
  return Dim == 2 ? 200 : 60;
}

namespace detail {

/// Neumaier-compensated running sum.
struct CompensatedSum {
  double sum = 0.0;
  double c = 0.0;
  void add(double x) {
    const double t = sum + x;
    if (std::abs(sum) >= std::abs(x)) {
      c += (sum - t) + x;
    } else {
      c += (x - t) + sum;
    }
    sum = t;
  }
  [[nodiscard]] double value() const { return sum + c; }
};

}  // namespace detail

/// sqrt(sum (S - S_ex)^2) / sqrt(sum S_ex^2) over the grid values.
inline double l2_relative_error(const Eigen::VectorXd& model, const Eigen::VectorXd& reference) {
  if (model.size() != reference.size()) throw std::invalid_argument("l2_relative_error: size mismatch");
  detail::CompensatedSum num;
  detail::CompensatedSum den;
  for (Eigen::Index i = 0; i < model.size(); ++i) {
    const double d = model[i] - reference[i];
    num.add(d * d);
    den.add(reference[i] * reference[i]);
  }
  if (!(den.value() > 0.0)) throw std::invalid_argument("l2_relative_error: reference is identically zero");
  return std::sqrt(num.value()) / std::sqrt(den.value());
}

template <int Dim>
double l2_relative_error(const SourceModel<Dim>& model, const std::function<double(const Point<Dim>&)>& reference,
                         const PointSet<Dim>& grid) {
  Eigen::VectorXd ref(grid.cols());
  for (Eigen::Index i = 0; i < grid.cols(); ++i) ref[i] = reference(grid.col(i));
  return l2_relative_error(model.values(grid), ref);
}

// ---------------------------------------------------------------------------
// Refinement indicators

struct IndicatorOptions {
  double gamma_abs = 1.0;
  double gamma_grad = 1.0;
  double c = 1.0;
};

struct RefinementIndicator {
  Eigen::VectorXd ind_abs;
  Eigen::VectorXd ind_grad;
  Eigen::VectorXd ind_total;
  double gamma_abs = 1.0;
  double gamma_grad = 1.0;
  double c = 1.0;
  double threshold = 0.0;
  std::vector<std::uint64_t> marked;  // leaf ids with ind_total > threshold
};

/// Marks cells strictly above c * mean; values equal to the threshold up to
/// rounding of the mean are treated as ties.
inline void mark_cells(RefinementIndicator& ind, const std::vector<std::uint64_t>& ids) {
  const auto n = ind.ind_total.size();
  ind.threshold = n > 0 ? ind.c * ind.ind_total.mean() : 0.0;
  ind.marked.clear();
  const double tie = 64.0 * std::numeric_limits<double>::epsilon() * std::abs(ind.threshold);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (ind.ind_total[i] > ind.threshold + tie) ind.marked.push_back(ids[static_cast<std::size_t>(i)]);
  }
}

template <int Dim>
RefinementIndicator compute_indicators(const AdaptiveMesh<Dim>& mesh, const FieldSample<Dim>& field,
                                       const IndicatorOptions& opts = {}) {
  const auto nc = static_cast<Eigen::Index>(mesh.num_leaves());
  const Eigen::Index ppc = mesh.points_per_cell();
  if (field.value.size() != nc * ppc) throw std::invalid_argument("compute_indicators: field size mismatch");
  const Eigen::VectorXd& w = mesh.weights();
  RefinementIndicator ind;
  ind.gamma_abs = opts.gamma_abs;
  ind.gamma_grad = opts.gamma_grad;
  ind.c = opts.c;
  ind.ind_abs.resize(nc);
  ind.ind_grad.resize(nc);
  for (Eigen::Index i = 0; i < nc; ++i) {
    double a = 0.0;
    double g = 0.0;
    for (Eigen::Index j = i * ppc; j < (i + 1) * ppc; ++j) {
      a += std::abs(field.value[j]) * w[j];
      g += field.grad.col(j).norm() * w[j];
    }
    ind.ind_abs[i] = a;
    ind.ind_grad[i] = g;
  }
  ind.ind_total = opts.gamma_abs * ind.ind_abs + opts.gamma_grad * ind.ind_grad;
  std::vector<std::uint64_t> ids;
  ids.reserve(mesh.num_leaves());
  for (const auto& c : mesh.leaves()) ids.push_back(c.id);
  mark_cells(ind, ids);
  return ind;
}

template <int Dim>
RefinementIndicator compute_indicators(const AdaptiveMesh<Dim>& mesh, const SourceModel<Dim>& model,
                                       const IndicatorOptions& opts = {}) {
  return compute_indicators(mesh, model.evaluate(mesh.points(), true), opts);
}

// ---------------------------------------------------------------------------
// Problem description and history

template <int Dim>
struct InverseProblem {
  Box<Dim> v0;
  WavenumberSet ks;
  std::vector<MeasurementPoint<Dim>> points;
  MeasurementData data;
  AssemblyOptions assembly;
};

struct HistoryRecord {
  std::string phase;  // "ia_rfm" or "ma_rfm"
  int iteration = 0;
  std::size_t n_integral = 0;
  std::size_t n_cells = 0;
  std::size_t n_basis = 0;
  std::size_t refined = 0;
  double lambda_sq = 0.0;
  bool lcurve = false;
  double loss = 0.0;  // ||A s - b||^2
  double relative_residual = 0.0;
  double delta_s = std::numeric_limits<double>::quiet_NaN();
  double e_l2 = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0.0;
  std::vector<std::string> notes;
  std::vector<std::array<double, 2 * 3 + 1>> mesh;  // (level, lo.., hi..) snapshot, padded
};

inline nlohmann::json to_json(const HistoryRecord& r, bool with_mesh = false) {
  auto num = [](double x) -> nlohmann::json { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); };
  nlohmann::json j{{"phase", r.phase},         {"iteration", r.iteration},   {"n_integral", r.n_integral},
                   {"n_cells", r.n_cells},     {"n_basis", r.n_basis},       {"refined", r.refined},
                   {"lambda_sq", r.lambda_sq}, {"lcurve", r.lcurve},         {"loss", num(r.loss)},
                   {"relative_residual", num(r.relative_residual)},          {"delta_s", num(r.delta_s)},
                   {"e_l2", num(r.e_l2)},      {"seconds", r.seconds}};
  if (!r.notes.empty()) j["notes"] = r.notes;
  if (with_mesh) j["mesh"] = r.mesh;
  return j;
}

inline void write_history_jsonl(std::ostream& os, const std::vector<HistoryRecord>& history, bool with_mesh = true) {
  for (const auto& r : history) os << to_json(r, with_mesh).dump() << '\n';
}

template <int Dim>
std::vector<std::array<double, 7>> mesh_snapshot(const AdaptiveMesh<Dim>& mesh) {
  std::vector<std::array<double, 7>> out;
  out.reserve(mesh.num_leaves());
  for (const auto& c : mesh.leaves()) {
    std::array<double, 7> row{};
    row[0] = c.level;
    for (int d = 0; d < Dim; ++d) {
      row[static_cast<std::size_t>(1 + d)] = c.lo[d];
      row[static_cast<std::size_t>(1 + Dim + d)] = c.hi[d];
    }
    out.push_back(row);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear-system state shared by both phases

struct LambdaOptions {
  std::optional<double> pinned;  // lambda^2; L-curve when absent
  std::vector<double> grid = default_lambda_grid();
};

template <int Dim>
struct SolveState {
  std::shared_ptr<KernelOperator<Dim>> op;
  SystemMatrix sys;
  SvdFactors svd;
  TikhonovSolution sol;
  std::optional<LCurve> lcurve;
};

namespace detail {

template <int Dim>
void factor_and_solve(SolveState<Dim>& st, double lambda_sq, bool use_lcurve, const LambdaOptions& lam) {
  st.svd = SvdFactors(st.sys.A);
  const auto proj = st.svd.project(st.sys.b);
  if (use_lcurve) {
    st.lcurve = lcurve_select(st.svd, proj, lam.grid);
    lambda_sq = st.lcurve->lambda_sq;
  }
  st.sol = solve_tikhonov(st.svd, proj, lambda_sq);
}

template <int Dim>
SolveState<Dim> assemble_state(const InverseProblem<Dim>& pb, const AdaptiveMesh<Dim>& mesh, const BasisSet<Dim>& basis) {
  validate_points(pb.points, mesh.domain());
  SolveState<Dim> st;
  st.op = std::make_shared<KernelOperator<Dim>>(pb.points, pb.ks, mesh.points(), mesh.weights(), pb.assembly);
  st.sys.A = st.op->apply(basis, 0, basis.size());
  st.sys.row_map = st.op->row_map();
  st.sys.col_map.resize(basis.size());
  std::iota(st.sys.col_map.begin(), st.sys.col_map.end(), std::size_t{0});
  st.sys.b = assemble_rhs(st.sys.row_map, pb.data, pb.assembly.weights);
  return st;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// IA-RFM

template <int Dim>
struct IaOptions {
  IndicatorOptions indicators;
  int max_iter = 10;
  double eps = 1e-2;        // relative change of S between rounds
  int change_grid_res = 100;  // cell-centred grid for the relative change
  LambdaOptions lambda;
  bool reselect_lambda_each_round = false;
  std::size_t max_points = 0;  // quadrature budget; 0 = unlimited
  std::function<double(const Point<Dim>&)> reference;  // for E_l2 in the history
  int error_grid_res = default_grid_res<Dim>();
  bool snapshot_mesh = true;
  std::function<void(const HistoryRecord&)> on_record;
};

template <int Dim>
struct IaResult {
  SourceModel<Dim> model;
  AdaptiveMesh<Dim> mesh;
  std::vector<HistoryRecord> history;
  SolveState<Dim> state;
  int rounds = 0;
};

template <int Dim>
IaResult<Dim> run_ia_rfm(const InverseProblem<Dim>& pb, AdaptiveMesh<Dim> mesh, BasisSet<Dim> basis,
                         const IaOptions<Dim>& opts) {
  using clock = std::chrono::steady_clock;
  if (opts.max_iter < 0) throw std::invalid_argument("ia_rfm: max_iter must be >= 0");
  if (basis.empty()) throw std::invalid_argument("ia_rfm: empty basis");
  const PointSet<Dim> change_grid = grid_points(pb.v0, opts.change_grid_res, true);
  PointSet<Dim> error_grid;
  Eigen::VectorXd ref_vals;
  if (opts.reference) {
    error_grid = grid_points(pb.v0, opts.error_grid_res, true);
    ref_vals.resize(error_grid.cols());
    for (Eigen::Index i = 0; i < error_grid.cols(); ++i) ref_vals[i] = opts.reference(error_grid.col(i));
  }

  IaResult<Dim> res{SourceModel<Dim>{std::move(basis), {}, "initial"}, std::move(mesh), {}, {}, 0};
  double lambda_sq = opts.lambda.pinned.value_or(0.0);
  Eigen::VectorXd prev_vals;
  std::size_t refined = 0;

  for (int k = 0;; ++k) {
    const auto t0 = clock::now();
    auto last_curve = std::move(res.state.lcurve);
    res.state = detail::assemble_state(pb, res.mesh, res.model.basis);
    res.state.lcurve = std::move(last_curve);  // latest curve survives rounds that reuse lambda
    const bool use_lcurve = !opts.lambda.pinned && (k == 0 || opts.reselect_lambda_each_round);
    try {
      detail::factor_and_solve(res.state, lambda_sq, use_lcurve, opts.lambda);
    } catch (const std::exception& e) {
      throw std::runtime_error("ia_rfm iteration " + std::to_string(k) + " (" + std::to_string(res.mesh.num_points()) +
                               " quadrature points): " + e.what());
    }
    lambda_sq = res.state.sol.lambda_sq;
    res.model.s = res.state.sol.s;
    res.model.provenance = k == 0 ? "initial" : "ia_rfm_iter_" + std::to_string(k);

    HistoryRecord rec;
    rec.phase = "ia_rfm";
    rec.iteration = k;
    rec.n_integral = res.mesh.num_points();
    rec.n_cells = res.mesh.num_leaves();
    rec.n_basis = res.model.basis.size();
    rec.refined = refined;
    rec.lambda_sq = lambda_sq;
    rec.lcurve = use_lcurve;
    rec.loss = res.state.sol.residual_norm * res.state.sol.residual_norm;
    rec.relative_residual = res.state.sol.residual_norm / std::max(res.state.sys.b.norm(), 1e-300);
    const Eigen::VectorXd vals = res.model.values(change_grid);
    if (prev_vals.size() > 0) {
      const double den = prev_vals.norm();
      rec.delta_s = den > 0 ? (vals - prev_vals).norm() / den : std::numeric_limits<double>::infinity();
    }
    if (opts.reference) rec.e_l2 = l2_relative_error(res.model.values(error_grid), ref_vals);
    if (opts.snapshot_mesh) {
      for (const auto& row : mesh_snapshot(res.mesh)) rec.mesh.push_back(row);
    }

    bool stop = false;
    if (k > 0 && rec.delta_s < opts.eps) {
      rec.notes.push_back("relative change below eps");
      stop = true;
    }
    if (k >= opts.max_iter) {
      if (!stop) rec.notes.push_back("max_iter reached");
      stop = true;
    }
    RefinementIndicator ind;
    if (!stop) {
      ind = compute_indicators(res.mesh, res.model, opts.indicators);
      if (ind.marked.empty()) {
        rec.notes.push_back("no cell above the refinement threshold");
        stop = true;
      }
    }
    if (!stop && opts.max_points > 0) {
      const std::size_t grow = ind.marked.size() * ((std::size_t{1} << Dim) - 1) * res.mesh.points_per_cell();
      if (res.mesh.num_points() + grow > opts.max_points) {
        rec.notes.push_back("quadrature budget reached");
        stop = true;
      }
    }
    if (!stop) {
      const auto r = res.mesh.refine(ind.marked);
      refined = r.refined;
      if (refined == 0) {
        rec.notes.push_back("marked cells at the maximum level");
        stop = true;
      }
    }
    rec.seconds = std::chrono::duration<double>(clock::now() - t0).count();
    res.history.push_back(rec);
    if (opts.on_record) opts.on_record(rec);
    if (stop) break;
    ++res.rounds;
    prev_vals = vals;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Posterior region detection

enum class DetectMode { abs, grad, both };

inline DetectMode parse_detect_mode(std::string_view s) {
  if (s == "abs") return DetectMode::abs;
  if (s == "grad") return DetectMode::grad;
  if (s == "both") return DetectMode::both;
  throw std::invalid_argument("unknown detection mode '" + std::string(s) + "'");
}

/// Face-adjacency labels of a boolean grid with extents `dims` (x fastest).
/// Returns -1 outside the mask and component ids 0.. otherwise (first-seen
/// order).
template <int Dim>
std::vector<int> label_components(const std::vector<std::uint8_t>& mask, const std::array<int, Dim>& dims) {
  std::size_t total = 1;
  for (int d : dims) total *= static_cast<std::size_t>(d);
  if (mask.size() != total) throw std::invalid_argument("label_components: mask size mismatch");
  // Union-find over raster order, looking back along each axis.
  std::vector<std::size_t> parent(total);
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  auto find = [&](std::size_t a) {
    while (parent[a] != a) {
      parent[a] = parent[parent[a]];
      a = parent[a];
    }
    return a;
  };
  std::array<std::size_t, Dim> stride{};
  stride[0] = 1;
  for (int d = 1; d < Dim; ++d) stride[static_cast<std::size_t>(d)] = stride[static_cast<std::size_t>(d - 1)] * static_cast<std::size_t>(dims[static_cast<std::size_t>(d - 1)]);
  for (std::size_t i = 0; i < total; ++i) {
    if (!mask[i]) continue;
    for (int d = 0; d < Dim; ++d) {
      const auto sd = stride[static_cast<std::size_t>(d)];
      const std::size_t coord = (i / sd) % static_cast<std::size_t>(dims[static_cast<std::size_t>(d)]);
      if (coord == 0 || !mask[i - sd]) continue;
      const auto a = find(i);
      const auto b = find(i - sd);
      if (a != b) parent[std::max(a, b)] = std::min(a, b);
    }
  }
  std::vector<int> label(total, -1);
  std::vector<int> id_of_root(total, -1);
  int next = 0;
  for (std::size_t i = 0; i < total; ++i) {
    if (!mask[i]) continue;
    const auto r = find(i);
    if (id_of_root[r] < 0) id_of_root[r] = next++;
    label[i] = id_of_root[r];
  }
  return label;
}

template <int Dim>
struct PosteriorMask {
  Box<Dim> box;
  int res = 0;
  PointSet<Dim> grid;  // node grid over V0
  Eigen::VectorXd value;
  Eigen::VectorXd grad_norm;
  double t_abs = 0.5;
  double t_grad = 0.5;
  DetectMode mode = DetectMode::grad;
  std::vector<std::uint8_t> q_abs;
  std::vector<std::uint8_t> q_grad;
  std::vector<std::uint8_t> q;
  std::vector<int> label;                         // region id per grid point, -1 outside
  std::vector<std::vector<std::size_t>> regions;  // grid indices, largest first
  std::size_t dropped = 0;                        // components below the size cut

  [[nodiscard]] double step(int d) const { return (box.hi[d] - box.lo[d]) / (res - 1); }
  [[nodiscard]] std::array<int, Dim> dims() const {
    std::array<int, Dim> a{};
    a.fill(res);
    return a;
  }
};

struct DetectOptions {
  double t_abs = 0.5;
  double t_grad = 0.5;
  DetectMode mode = DetectMode::grad;
  double min_fraction = 0.05;  // components smaller than this share of the largest are dropped
  bool merge = false;          // kept components form one region (one shape split by thresholding)
};

template <int Dim>
PosteriorMask<Dim> detect_regions(const FieldSample<Dim>& field, const Box<Dim>& box, int res, const DetectOptions& o) {
  if (!(o.t_abs > 0 && o.t_abs < 1) || !(o.t_grad > 0 && o.t_grad < 1)) {
    throw std::invalid_argument("detect_regions: thresholds must lie in (0, 1)");
  }
  PosteriorMask<Dim> m;
  m.box = box;
  m.res = res;
  m.t_abs = o.t_abs;
  m.t_grad = o.t_grad;
  m.mode = o.mode;
  m.value = field.value;
  m.grad_norm = field.grad.colwise().norm().transpose();
  const auto n = static_cast<std::size_t>(m.value.size());
  const double vmax = m.value.cwiseAbs().maxCoeff();
  const double gmax = m.grad_norm.maxCoeff();
  m.q_abs.assign(n, 0);
  m.q_grad.assign(n, 0);
  m.q.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    m.q_abs[i] = vmax > 0 && std::abs(m.value[ii]) / vmax >= o.t_abs;
    m.q_grad[i] = gmax > 0 && m.grad_norm[ii] / gmax >= o.t_grad;
    switch (o.mode) {
      case DetectMode::abs: m.q[i] = m.q_abs[i]; break;
      case DetectMode::grad: m.q[i] = m.q_grad[i]; break;
      case DetectMode::both: m.q[i] = m.q_abs[i] && m.q_grad[i]; break;
    }
  }
  const auto raw = label_components<Dim>(m.q, m.dims());
  int ncomp = 0;
  for (int l : raw) ncomp = std::max(ncomp, l + 1);
  if (ncomp == 0) throw std::runtime_error("detect_regions: empty posterior mask; lower t_abs/t_grad");
  std::vector<std::vector<std::size_t>> comps(static_cast<std::size_t>(ncomp));
  for (std::size_t i = 0; i < n; ++i) {
    if (raw[i] >= 0) comps[static_cast<std::size_t>(raw[i])].push_back(i);
  }
  std::stable_sort(comps.begin(), comps.end(), [](const auto& a, const auto& b) { return a.size() > b.size(); });
  const double cut = o.min_fraction * static_cast<double>(comps.front().size());
  m.label.assign(n, -1);
  for (const auto& c : comps) {
    if (static_cast<double>(c.size()) < cut) {
      ++m.dropped;
      continue;
    }
    for (auto i : c) m.label[i] = static_cast<int>(m.regions.size());
    m.regions.push_back(c);
  }
  if (o.merge && m.regions.size() > 1) {
    std::vector<std::size_t> all;
    for (const auto& r : m.regions) all.insert(all.end(), r.begin(), r.end());
    std::sort(all.begin(), all.end());
    for (auto i : all) m.label[i] = 0;
    m.regions.assign(1, std::move(all));
  }
  return m;
}

template <int Dim>
PosteriorMask<Dim> detect_regions(const SourceModel<Dim>& model, const Box<Dim>& box, int res, const DetectOptions& o) {
  const PointSet<Dim> grid = grid_points(box, res, false);
  auto m = detect_regions(model.evaluate(grid, true), box, res, o);
  m.grid = grid;
  return m;
}

// ---------------------------------------------------------------------------
// Shape estimation

enum class FwhmRule { linear, gaussian };

inline FwhmRule parse_fwhm_rule(std::string_view s) {
  if (s == "linear") return FwhmRule::linear;
  if (s == "gaussian") return FwhmRule::gaussian;
  throw std::invalid_argument("unknown fwhm rule '" + std::string(s) + "'");
}

inline double fwhm_exponent(double fwhm, FwhmRule rule) {
  constexpr double k = 2.355 * 2.355 / 2.0;
  return rule == FwhmRule::linear ? k / fwhm : k / (fwhm * fwhm);
}

/// Width of the contiguous run of g >= half around index `peak`, with
/// linear interpolation at the crossings.
inline double half_max_width(const std::vector<double>& g, std::size_t peak, double h) {
  const double half = 0.5 * g[peak];
  std::size_t l = peak;
  while (l > 0 && g[l - 1] >= half) --l;
  std::size_t r = peak;
  while (r + 1 < g.size() && g[r + 1] >= half) ++r;
  double left = static_cast<double>(l) * h;
  double right = static_cast<double>(r) * h;
  if (l > 0 && g[l] > g[l - 1]) left -= h * (g[l] - half) / (g[l] - g[l - 1]);
  if (r + 1 < g.size() && g[r] > g[r + 1]) right += h * (g[r] - half) / (g[r] - g[r + 1]);
  return right - left;
}

struct ShapeOptions {
  FwhmRule fwhm_rule = FwhmRule::linear;
  double contour_level = 0.5;  // fraction of the region max |S|
  bool smooth_contour = true;
};

template <int Dim>
ShapeEstimate<Dim> estimate_shape(const PosteriorMask<Dim>& m, std::size_t region, const ShapeOptions& o = {}) {
  if (region >= m.regions.size()) throw std::invalid_argument("estimate_shape: no region " + std::to_string(region));
  const auto& idx = m.regions[region];
  if (idx.empty()) throw std::invalid_argument("estimate_shape: empty region");
  const std::size_t res = static_cast<std::size_t>(m.res);
  auto coord = [&](std::size_t i, int d) {
    std::size_t rem = i;
    for (int e = 0; e < d; ++e) rem /= res;
    return rem % res;
  };
  auto pos = [&](std::size_t c, int d) { return m.box.lo[d] + static_cast<double>(c) * m.step(d); };

  ShapeEstimate<Dim> s;
  s.size = idx.size();
  s.lo.setConstant(std::numeric_limits<double>::infinity());
  s.hi.setConstant(-std::numeric_limits<double>::infinity());
  std::size_t peak = idx.front();
  for (auto i : idx) {
    for (int d = 0; d < Dim; ++d) {
      const double x = pos(coord(i, d), d);
      s.lo[d] = std::min(s.lo[d], x);
      s.hi[d] = std::max(s.hi[d], x);
    }
    if (std::abs(m.value[static_cast<Eigen::Index>(i)]) > std::abs(m.value[static_cast<Eigen::Index>(peak)])) peak = i;
  }
  s.center = 0.5 * (s.lo + s.hi);
  s.extent = s.hi - s.lo;
  s.radius = 0.5 * s.extent.maxCoeff();
  for (int d = 0; d < Dim; ++d) s.peak[d] = pos(coord(peak, d), d);
  s.peak_value = m.value[static_cast<Eigen::Index>(peak)];

  // Axis slices through the peak.
  std::size_t stride = 1;
  for (int d = 0; d < Dim; ++d) {
    const std::size_t c = coord(peak, d);
    const std::size_t base = peak - c * stride;
    std::vector<double> g(res);
    for (std::size_t t = 0; t < res; ++t) g[t] = std::abs(m.value[static_cast<Eigen::Index>(base + t * stride)]);
    s.fwhm[d] = half_max_width(g, c, m.step(d));
    stride *= res;
  }
  const double fmax = s.fwhm.maxCoeff();
  const double fmin = s.fwhm.minCoeff();
  if (fmin > 0) {
    s.v_min = fwhm_exponent(fmax, o.fwhm_rule);
    s.v_max = fwhm_exponent(fmin, o.fwhm_rule);
  }

  if constexpr (Dim == 2) {
    const auto nr = static_cast<Eigen::Index>(res);
    Eigen::MatrixXd vals(nr, nr);
    Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> active = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(nr, nr, false);
    double vmax = 0.0;
    for (auto i : idx) vmax = std::max(vmax, std::abs(m.value[static_cast<Eigen::Index>(i)]));
    for (Eigen::Index j = 0; j < nr; ++j) {
      for (Eigen::Index i = 0; i < nr; ++i) vals(i, j) = std::abs(m.value[i + nr * j]);
    }
    for (auto i : idx) active(static_cast<Eigen::Index>(i % res), static_cast<Eigen::Index>(i / res)) = true;
    std::vector<double> xs(res);
    std::vector<double> ys(res);
    for (std::size_t t = 0; t < res; ++t) {
      xs[t] = pos(t, 0);
      ys[t] = pos(t, 1);
    }
    const auto curves = marching_squares(vals, xs, ys, o.contour_level * vmax, &active);
    if (!curves.empty() && curves.front().points.size() >= 3) {
      s.contour_closed = curves.front().closed;
      if (s.contour_closed) {
        Contour raw(curves.front().points);
        const Contour c = o.smooth_contour ? smooth_contour(raw, std::min(m.step(0), m.step(1))) : raw;
        s.contour = c.points();
      } else {
        s.contour = curves.front().points;
      }
    }
  }
  return s;
}

template <int Dim>
void write_mask_csv(std::ostream& os, const PosteriorMask<Dim>& m) {
  static constexpr const char* axes[] = {"x", "y", "z"};
  for (int d = 0; d < Dim; ++d) os << axes[d] << ',';
  os << "value,grad_norm,q_abs,q_grad,q,region\n";
  os.precision(12);
  for (std::size_t i = 0; i < m.q.size(); ++i) {
    if (!m.q[i] && !m.q_abs[i] && !m.q_grad[i]) continue;
    const auto ii = static_cast<Eigen::Index>(i);
    for (int d = 0; d < Dim; ++d) os << m.grid(d, ii) << ',';
    os << m.value[ii] << ',' << m.grad_norm[ii] << ',' << int(m.q_abs[i]) << ',' << int(m.q_grad[i]) << ','
       << int(m.q[i]) << ',' << m.label[i] << '\n';
  }
}

inline void write_contour_csv(std::ostream& os, const std::vector<Point2>& pts, int region = 0) {
  os << "region,index,x,y\n";
  os.precision(12);
  for (std::size_t i = 0; i < pts.size(); ++i) os << region << ',' << i << ',' << pts[i].x() << ',' << pts[i].y() << '\n';
}

// ---------------------------------------------------------------------------
// MA-RFM

struct RegionBasisSpec {
  MorphKind kind = MorphKind::sigmoid_circle;
  std::size_t count = 0;
  MorphSampling sampling;
};

template <int Dim>
struct MaOptions {
  IaOptions<Dim> ia;
  double eps_res = 0.0;        // gate on L_data = ||A s - b||^2
  bool eps_res_relative = false;  // compare ||A s - b|| / ||b|| instead
  int i_max = 1;
  int test_res = default_grid_res<Dim>();
  DetectOptions detect;
  ShapeOptions shape;
  std::vector<RegionBasisSpec> regions;  // k-th entry serves the k-th largest region
  bool reselect_lambda = true;
  std::optional<double> enhanced_lambda_sq;
  std::uint64_t seed = 1;
};

template <int Dim>
struct MaResult {
  SourceModel<Dim> model;
  AdaptiveMesh<Dim> mesh;
  std::vector<HistoryRecord> history;
  SolveState<Dim> state;
  std::vector<PosteriorMask<Dim>> masks;
  std::vector<std::vector<ShapeEstimate<Dim>>> shapes;  // per round, per region
  double phase1_loss = 0.0;
  int rounds = 0;
};

namespace detail {
inline bool gate_passed(double residual_norm, double b_norm, double eps, bool relative) {
  if (relative) return residual_norm / std::max(b_norm, 1e-300) < eps;
  return residual_norm * residual_norm < eps;
}
}  // namespace detail

template <int Dim>
MaResult<Dim> run_ma_rfm(const InverseProblem<Dim>& pb, AdaptiveMesh<Dim> mesh, BasisSet<Dim> basis,
                         const MaOptions<Dim>& opts) {
  using clock = std::chrono::steady_clock;
  if (opts.i_max < 0) throw std::invalid_argument("ma_rfm: I_max must be >= 0");
  auto ia = run_ia_rfm(pb, std::move(mesh), std::move(basis), opts.ia);
  MaResult<Dim> res{std::move(ia.model), std::move(ia.mesh), std::move(ia.history), std::move(ia.state), {}, {}, 0.0, 0};
  res.phase1_loss = res.state.sol.residual_norm * res.state.sol.residual_norm;
  const double b_norm = res.state.sys.b.norm();
  if (detail::gate_passed(res.state.sol.residual_norm, b_norm, opts.eps_res, opts.eps_res_relative)) {
    res.history.back().notes.push_back("residual gate passed after phase 1");
    return res;
  }
  PointSet<Dim> error_grid;
  Eigen::VectorXd ref_vals;
  if (opts.ia.reference) {
    error_grid = grid_points(pb.v0, opts.ia.error_grid_res, true);
    ref_vals.resize(error_grid.cols());
    for (Eigen::Index i = 0; i < error_grid.cols(); ++i) ref_vals[i] = opts.ia.reference(error_grid.col(i));
  }
  double lambda_sq = res.state.sol.lambda_sq;

  for (int it = 1; it <= opts.i_max; ++it) {
    const auto t0 = clock::now();
    HistoryRecord rec;
    rec.phase = "ma_rfm";
    rec.iteration = it;
    auto mask = detect_regions(res.model, pb.v0, opts.test_res, opts.detect);
    std::vector<ShapeEstimate<Dim>> shapes;
    std::size_t added = 0;
    const std::size_t nreg = std::min(mask.regions.size(), opts.regions.size());
    if (mask.regions.size() > opts.regions.size()) {
      rec.notes.push_back(std::to_string(mask.regions.size() - opts.regions.size()) + " detected regions without a basis spec");
    }
    for (std::size_t k = 0; k < nreg; ++k) {
      const auto& spec = opts.regions[k];
      auto shape = estimate_shape(mask, k, opts.shape);
      shapes.push_back(shape);
      if (spec.count == 0) continue;
      const std::uint64_t seed = opts.seed * 1000003ULL + static_cast<std::uint64_t>(it) * 101ULL + k;
      BasisSet<Dim> extra;
      try {
        auto fns = sample_morphology(spec.kind, shape, spec.sampling, spec.count, seed, &extra);
        extra.add_group("morph:" + std::string(to_string(spec.kind)) + ":r" + std::to_string(k) + ":i" + std::to_string(it),
                        seed, std::move(fns));
      } catch (const std::exception& e) {
        rec.notes.push_back("region " + std::to_string(k) + " rejected: " + e.what());
        continue;
      }
      const std::size_t begin = res.model.basis.size();
      res.model.basis.append(extra);
      const std::size_t end = res.model.basis.size();
      const Eigen::MatrixXd cols = res.state.op->apply(res.model.basis, begin, end);
      Eigen::MatrixXd A(res.state.sys.A.rows(), res.state.sys.A.cols() + cols.cols());
      A << res.state.sys.A, cols;
      res.state.sys.A = std::move(A);
      for (std::size_t c = begin; c < end; ++c) res.state.sys.col_map.push_back(c);
      added += end - begin;
    }
    res.masks.push_back(std::move(mask));
    res.shapes.push_back(shapes);
    const bool use_lcurve = opts.reselect_lambda && !opts.enhanced_lambda_sq;
    if (opts.enhanced_lambda_sq) lambda_sq = *opts.enhanced_lambda_sq;
    try {
      detail::factor_and_solve(res.state, lambda_sq, use_lcurve, opts.ia.lambda);
    } catch (const std::exception& e) {
      throw std::runtime_error("ma_rfm round " + std::to_string(it) + ": " + e.what());
    }
    lambda_sq = res.state.sol.lambda_sq;
    res.model.s = res.state.sol.s;
    res.model.provenance = "ma_rfm_iter_" + std::to_string(it);
    res.rounds = it;

    rec.n_integral = res.mesh.num_points();
    rec.n_cells = res.mesh.num_leaves();
    rec.n_basis = res.model.basis.size();
    rec.refined = added;
    rec.lambda_sq = lambda_sq;
    rec.lcurve = use_lcurve;
    rec.loss = res.state.sol.residual_norm * res.state.sol.residual_norm;
    rec.relative_residual = res.state.sol.residual_norm / std::max(b_norm, 1e-300);
    if (opts.ia.reference) rec.e_l2 = l2_relative_error(res.model.values(error_grid), ref_vals);
    const bool pass = detail::gate_passed(res.state.sol.residual_norm, b_norm, opts.eps_res, opts.eps_res_relative);
    if (pass) rec.notes.push_back("residual gate passed");
    rec.seconds = std::chrono::duration<double>(clock::now() - t0).count();
    res.history.push_back(rec);
    if (opts.ia.on_record) opts.ia.on_record(rec);
    if (pass || added == 0) break;
  }
  return res;
}

}  // namespace helm
