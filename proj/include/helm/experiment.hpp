#pragma once

// Experiment orchestration: JSON configs (schema-checked), data synthesis,
// IRFM / IA-RFM / MA-RFM / prior-check runs, report bundles, sweeps.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <rapidjson/document.h>
#include <rapidjson/schema.h>
#include <rapidjson/stringbuffer.h>

#include "helm/assembly.hpp"
#include "helm/basis.hpp"
#include "helm/harness.hpp"
#include "helm/pipeline.hpp"
#include "helm/quadmesh.hpp"
#include "helm/solver.hpp"

namespace helm {

namespace fs = std::filesystem;
using nlohmann::json;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// Config loading and validation

inline json read_json_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(is, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

/// Validates `config` against a JSON Schema (draft 4); errors name the
/// offending field path and schema keyword.
inline void validate_config(const json& config, const json& schema) {
  rapidjson::Document sd;
  const std::string schema_text = schema.dump();
  if (sd.Parse(schema_text.c_str()).HasParseError()) throw ConfigError("schema is not valid JSON");
  rapidjson::SchemaDocument sdoc(sd);
  rapidjson::Document doc;
  const std::string text = config.dump();
  if (doc.Parse(text.c_str()).HasParseError()) throw ConfigError("config is not valid JSON");
  rapidjson::SchemaValidator validator(sdoc);
  if (doc.Accept(validator)) return;
  rapidjson::StringBuffer where;
  validator.GetInvalidDocumentPointer().StringifyUriFragment(where);
  std::string path = where.GetString();
  if (!path.empty() && path[0] == '#') path.erase(0, 1);
  if (path.empty()) path = "/";
  throw ConfigError("config error at " + path + ": violates '" + validator.GetInvalidSchemaKeyword() + "'");
}

#ifdef HELM_CONFIG_DIR
inline fs::path bundled_config_dir() { return fs::path(HELM_CONFIG_DIR); }
#else
inline fs::path bundled_config_dir() { return fs::path("configs"); }
#endif

inline json bundled_schema() { return read_json_file(bundled_config_dir() / "schema.json"); }

/// Resolves a config argument: an existing path, or a bundled config name.
inline fs::path resolve_config(const std::string& arg) {
  if (fs::exists(arg)) return arg;
  const fs::path bundled = bundled_config_dir() / (arg + ".json");
  if (fs::exists(bundled)) return bundled;
  throw ConfigError("no config file or bundled config named '" + arg + "'");
}

/// "a.b.c" or "/a/b/c" as a JSON pointer.
inline json::json_pointer param_pointer(const std::string& path) {
  if (!path.empty() && path[0] == '/') return json::json_pointer(path);
  std::string p = "/";
  for (char c : path) p += c == '.' ? '/' : c;
  return json::json_pointer(p);
}

/// Parses a CLI value as JSON, falling back to a plain string.
inline json parse_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
    return json(text);
  }
}

inline json value_or(const json& j, const char* key, json fallback) {
  return j.contains(key) && !j.at(key).is_null() ? j.at(key) : fallback;
}

// ---------------------------------------------------------------------------
// Artifact writers

/// Binary PGM (P5, 8 bit).  `values` is nx*ny with x fastest; the first
/// image row is the largest y.
inline void write_pgm(const fs::path& path, const Eigen::VectorXd& values, int nx, int ny,
                      std::optional<std::pair<double, double>> range = std::nullopt) {
  if (values.size() != static_cast<Eigen::Index>(nx) * ny) throw std::invalid_argument("write_pgm: size mismatch");
  double lo = range ? range->first : values.minCoeff();
  double hi = range ? range->second : values.maxCoeff();
  if (!(hi > lo)) hi = lo + 1.0;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "P5\n" << nx << ' ' << ny << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(nx));
  for (int j = ny - 1; j >= 0; --j) {
    for (int i = 0; i < nx; ++i) {
      const double t = std::clamp((values[i + static_cast<Eigen::Index>(nx) * j] - lo) / (hi - lo), 0.0, 1.0);
      row[static_cast<std::size_t>(i)] = static_cast<unsigned char>(std::lround(255.0 * t));
    }
    os.write(reinterpret_cast<const char*>(row.data()), nx);
  }
}

struct PgmImage {
  int width = 0;
  int height = 0;
  std::vector<unsigned char> pixels;
};

inline PgmImage read_pgm(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  std::string magic;
  int maxv = 0;
  PgmImage img;
  is >> magic >> img.width >> img.height >> maxv;
  is.get();
  if (magic != "P5" || maxv != 255) throw std::runtime_error("not an 8-bit P5 file: " + path.string());
  img.pixels.resize(static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height));
  is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!is) throw std::runtime_error("truncated PGM " + path.string());
  return img;
}

template <int Dim>
void write_field_csv(const fs::path& path, const PointSet<Dim>& grid, int res, const Eigen::VectorXd& s_num,
                     const Eigen::VectorXd* s_ex) {
  std::ofstream os(path);
  static constexpr const char* idx[] = {"i", "j", "l"};
  static constexpr const char* axes[] = {"x", "y", "z"};
  for (int d = 0; d < Dim; ++d) os << idx[d] << ',';
  for (int d = 0; d < Dim; ++d) os << axes[d] << ',';
  os << "s_num" << (s_ex ? ",s_ex" : "") << '\n';
  os.precision(10);
  for (Eigen::Index p = 0; p < grid.cols(); ++p) {
    Eigen::Index rem = p;
    for (int d = 0; d < Dim; ++d) {
      os << rem % res << ',';
      rem /= res;
    }
    for (int d = 0; d < Dim; ++d) os << grid(d, p) << ',';
    os << s_num[p];
    if (s_ex) os << ',' << (*s_ex)[p];
    os << '\n';
  }
}

inline const std::vector<std::string>& metric_columns() {
  static const std::vector<std::string> cols{
      "name",   "method",      "dim",       "param",        "value",          "M_total",    "n_integral",
      "n_cells", "lambda_sq",  "E_l2",      "loss",         "relative_residual", "ia_rounds", "ma_rounds",
      "regions", "r_hat",      "c_hat",     "noise_delta",  "n_rows",         "seconds",    "status",
      "message"};
  return cols;
}

inline std::string csv_cell(const json& v) {
  if (v.is_null()) return "";
  if (v.is_string()) {
    std::string s = v.template get<std::string>();
    if (s.find_first_of(",\"\n") != std::string::npos) {
      std::string q = "\"";
      for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
      return q + "\"";
    }
    return s;
  }
  if (v.is_number_float()) {
    std::ostringstream os;
    os << std::setprecision(10) << v.template get<double>();
    return os.str();
  }
  if (v.is_array()) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + csv_cell(v[i]);
    return s;
  }
  return v.dump();
}

inline void write_metrics_csv(const fs::path& path, const std::vector<json>& rows) {
  std::ofstream os(path);
  const auto& cols = metric_columns();
  for (std::size_t c = 0; c < cols.size(); ++c) os << (c ? "," : "") << cols[c];
  os << '\n';
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < cols.size(); ++c) os << (c ? "," : "") << csv_cell(value_or(r, cols[c].c_str(), nullptr));
    os << '\n';
  }
}

/// Minimal CSV reader for files written above (quoted cells supported).
inline std::vector<std::map<std::string, std::string>> read_csv_rows(const fs::path& path) {
  std::ifstream is(path);
  std::vector<std::map<std::string, std::string>> rows;
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      const char c = line[i];
      if (quoted) {
        if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else if (c == '"') {
          quoted = false;
        } else {
          cur += c;
        }
      } else if (c == '"') {
        quoted = true;
      } else if (c == ',') {
        cells.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    cells.push_back(cur);
    return cells;
  };
  std::string line;
  if (!std::getline(is, line)) return rows;
  const auto header = split(line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = split(line);
    std::map<std::string, std::string> row;
    for (std::size_t c = 0; c < header.size() && c < cells.size(); ++c) row[header[c]] = cells[c];
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Forward-data cache shared by runs of one process

class DataCache {
 public:
  std::optional<MeasurementData> get(const std::string& key) {
    std::lock_guard lock(mu_);
    auto it = map_.find(key);
    if (it == map_.end()) return std::nullopt;
    return it->second;
  }
  void put(const std::string& key, MeasurementData d) {
    std::lock_guard lock(mu_);
    map_[key] = std::move(d);
  }

 private:
  std::mutex mu_;
  std::map<std::string, MeasurementData> map_;
};

// ---------------------------------------------------------------------------
// Config pieces

template <int Dim>
Box<Dim> parse_box(const json& j, const std::string& where) {
  Box<Dim> b;
  for (const char* key : {"lo", "hi"}) {
    const auto& a = j.at(key);
    if (a.size() != static_cast<std::size_t>(Dim)) throw ConfigError(where + "/" + key + ": expected " + std::to_string(Dim) + " entries");
  }
  for (int d = 0; d < Dim; ++d) {
    b.lo[d] = j.at("lo")[static_cast<std::size_t>(d)].template get<double>();
    b.hi[d] = j.at("hi")[static_cast<std::size_t>(d)].template get<double>();
    if (!(b.hi[d] > b.lo[d])) throw ConfigError(where + ": hi must exceed lo");
  }
  return b;
}

inline WavenumberSet parse_wavenumbers(const json& j) {
  try {
    if (j.contains("values")) return WavenumberSet(j.at("values").template get<std::vector<double>>());
    return WavenumberSet::range(j.at("k_min").template get<double>(), j.at("k_max").template get<double>(), j.at("k_step").template get<double>());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("/wavenumbers: ") + e.what());
  }
}

inline Range parse_range(const json& j) {
  return {j.at(0).template get<double>(), j.at(1).template get<double>()};
}

inline MorphSampling parse_sampling(const json& r) {
  MorphSampling s;
  if (r.contains("K")) s.K = parse_range(r["K"]);
  s.eps_c = value_or(r, "eps_c", s.eps_c).template get<double>();
  s.eps_r = value_or(r, "eps_r", s.eps_r).template get<double>();
  if (r.contains("eps_extent")) s.eps_extent = r["eps_extent"].template get<std::vector<double>>();
  if (r.contains("center_abs")) s.center_abs = r["center_abs"].template get<double>();
  if (r.contains("r")) s.r = parse_range(r["r"]);
  if (r.contains("R")) s.R = parse_range(r["R"]);
  if (r.contains("v")) s.v = parse_range(r["v"]);
  if (r.contains("rho")) s.rho = parse_range(r["rho"]);
  if (r.contains("offset_rule")) {
    s.offset_rule = r["offset_rule"] == "literal" ? OffsetRule::literal : OffsetRule::normal;
  }
  if (r.contains("contour_distance")) {
    s.contour_distance = r["contour_distance"] == "euclidean" ? ContourDistance::euclidean : ContourDistance::sign;
  }
  s.centers_on_contour = value_or(r, "centers_on_contour", false).template get<bool>();
  return s;
}

// ---------------------------------------------------------------------------
// Results

struct PriorRow {
  double eta_M = 0;
  double delta_all = 0;
  double lambda_sq = 0;
  double error = 0;
  double bound = 0;
  double ratio = 0;
  double e_l2 = 0;
};

struct RunResult {
  json metrics;
  fs::path dir;
  std::vector<HistoryRecord> history;
  std::vector<PriorRow> prior;
  std::vector<json> shapes;  // per detected region of the last round
  bool ok = true;
};

struct RunContext {
  DataCache* cache = nullptr;
  bool write_outputs = true;
  std::function<void(const std::string&)> log;
};

namespace detail {

inline std::string cache_key(const json& cfg) {
  json k;
  for (const char* key : {"dim", "domain", "source", "wavenumbers", "layout"}) k[key] = value_or(cfg, key, nullptr);
  json d = value_or(cfg, "data", json::object());
  d.erase("noise");
  k["data"] = d;
  return k.dump();
}

template <int Dim>
struct Problem {
  InverseProblem<Dim> pb;
  ReferenceSource<Dim> source;
  OracleSpec oracle;
  double delta = 0;
};

template <int Dim>
Problem<Dim> build_problem(const json& cfg, RunContext& ctx) {
  Problem<Dim> P;
  P.pb.v0 = parse_box<Dim>(cfg.at("domain").at("v0"), "/domain/v0");
  P.pb.ks = parse_wavenumbers(cfg.at("wavenumbers"));
  const json& src = cfg.at("source");
  P.source = make_reference_source<Dim>(src.at("kind").template get<std::string>(), value_or(src, "params", json::object()));
  const json data = value_or(cfg, "data", json::object());
  P.oracle.res = value_or(data, "oracle_res", Dim == 2 ? 400 : 120).template get<int>();
  P.oracle.per_cell = value_or(data, "oracle_points_per_cell", 4).template get<int>();
  P.oracle.skip_below = value_or(data, "skip_below", 0.0).template get<double>();
  const json noise = value_or(data, "noise", json::object());
  P.delta = value_or(noise, "delta", 0.0).template get<double>();
  const auto noise_seed = value_or(noise, "seed", value_or(cfg, "seed", 1).template get<std::uint64_t>() + 17).template get<std::uint64_t>();

  const json& lay = cfg.at("layout");
  const std::string kind = lay.at("kind").template get<std::string>();
  const bool use_d = value_or(lay, "dirichlet", true).template get<bool>();
  const bool use_n = value_or(lay, "neumann", true).template get<bool>();
  const json asm_cfg = value_or(cfg, "assembly", json::object());
  P.pb.assembly.weights.dirichlet = value_or(asm_cfg, "dirichlet_weight", 1.0).template get<double>();
  P.pb.assembly.weights.neumann = value_or(asm_cfg, "neumann_weight", 1.0).template get<double>();
  P.pb.assembly.r_min = value_or(asm_cfg, "r_min", kDefaultRMin).template get<double>();
  P.pb.assembly.cache_bytes = static_cast<std::size_t>(value_or(asm_cfg, "cache_mb", 1024).template get<double>() * (1 << 20));

  const std::string key = cache_key(cfg);
  auto forward = [&](const std::vector<MeasurementPoint<Dim>>& pts) {
    if (ctx.cache) {
      if (auto hit = ctx.cache->get(key)) return *hit;
    }
    if (ctx.log) ctx.log("forward data: " + std::to_string(pts.size()) + " points x " + std::to_string(P.pb.ks.size()) + " wavenumbers");
    auto d = forward_data<Dim>(P.source.eval, P.pb.v0, pts, P.pb.ks, P.oracle);
    if (ctx.cache) ctx.cache->put(key, d);
    return d;
  };

  if (kind == "rectangle") {
    const auto omega = parse_box<Dim>(lay.at("omega"), "/layout/omega");
    P.pb.points = rectangle_layout<Dim>(omega, lay.at("n_s").template get<int>(), use_d, use_n);
    P.pb.data = add_noise(forward(P.pb.points), P.delta, noise_seed);
  } else if (kind == "circle_arc" || kind == "circular_extension") {
    if constexpr (Dim != 2) {
      throw ConfigError("/layout/kind: " + kind + " requires dim 2");
    } else {
      const Point<2> c = detail::param_point<2>(lay, "center", Point<2>::Zero());
      const double R = lay.at("radius").template get<double>();
      if (kind == "circle_arc") {
        const double tmax = value_or(lay, "theta_max", 2 * std::numbers::pi).template get<double>();
        const int n_s = lay.at("n_s").template get<int>();
        // Data on the full circle is cached; apertures are prefixes of it.
        const auto full = circle_arc_layout(c, R, n_s, 2 * std::numbers::pi, use_d, use_n);
        P.pb.points = circle_arc_layout(c, R, n_s, tmax, use_d, use_n);
        json full_cfg = cfg;
        full_cfg["layout"].erase("theta_max");
        const std::string fkey = cache_key(full_cfg);
        std::optional<MeasurementData> all = ctx.cache ? ctx.cache->get(fkey) : std::nullopt;
        if (!all) {
          all = forward_data<2>(P.source.eval, P.pb.v0, full, P.pb.ks, P.oracle);
          if (ctx.cache) ctx.cache->put(fkey, *all);
        }
        MeasurementData d;
        d.dirichlet = all->dirichlet.leftCols(static_cast<Eigen::Index>(P.pb.points.size()));
        d.neumann = all->neumann.leftCols(static_cast<Eigen::Index>(P.pb.points.size()));
        P.pb.data = add_noise(d, P.delta, noise_seed);
      } else {
        // Dirichlet observations on radius R, extended to Cauchy data on rho.
        const int n_r = lay.at("n_r").template get<int>();
        const double rho = lay.at("rho").template get<double>();
        const int n_rho = value_or(lay, "n_rho", 400).template get<int>();
        std::vector<MeasurementPoint<2>> obs;
        for (int i = 0; i < n_r; ++i) {
          const double t = 2 * std::numbers::pi * i / n_r;
          MeasurementPoint<2> p;
          p.normal = Point<2>(std::cos(t), std::sin(t));
          p.x = c + R * p.normal;
          p.neumann = false;
          obs.push_back(p);
        }
        const auto observed = add_noise(forward(obs), P.delta, noise_seed);
        std::optional<int> cutoff;
        if (value_or(lay, "apply_truncation", false).template get<bool>()) {
          cutoff = lay.contains("truncation_n") ? lay["truncation_n"].template get<int>() : default_truncation(P.delta);
        }
        Eigen::VectorXd theta(n_rho);
        for (int i = 0; i < n_rho; ++i) theta[i] = 2 * std::numbers::pi * i / n_rho;
        for (int i = 0; i < n_rho; ++i) {
          MeasurementPoint<2> p;
          p.normal = Point<2>(std::cos(theta[i]), std::sin(theta[i]));
          p.x = c + rho * p.normal;
          p.dirichlet = use_d;
          p.neumann = use_n;
          P.pb.points.push_back(p);
        }
        P.pb.data = MeasurementData::absent(P.pb.ks.size(), static_cast<std::size_t>(n_rho));
        for (std::size_t ki = 0; ki < P.pb.ks.size(); ++ki) {
          const auto ext = circular_extension(observed.dirichlet.row(static_cast<Eigen::Index>(ki)).transpose(),
                                              P.pb.ks[ki], R, rho, theta, cutoff);
          if (use_d) P.pb.data.dirichlet.row(static_cast<Eigen::Index>(ki)) = ext.dirichlet.transpose();
          if (use_n) P.pb.data.neumann.row(static_cast<Eigen::Index>(ki)) = ext.neumann.transpose();
        }
      }
    }
  } else {
    throw ConfigError("/layout/kind: unknown layout '" + kind + "'");
  }
  return P;
}

template <int Dim>
BasisSet<Dim> build_basis(const json& cfg, const Box<Dim>& v0) {
  const json b = cfg.at("basis");
  const auto M = b.at("m0").template get<std::size_t>();
  const double R_m = value_or(b, "r_m", 20.0).template get<double>();
  const Activation act = parse_activation(value_or(b, "activation", "tanh").template get<std::string>());
  const auto seed = value_or(b, "seed", value_or(cfg, "seed", 1).template get<std::uint64_t>()).template get<std::uint64_t>();
  if (b.contains("pou")) {
    std::array<int, Dim> patches{};
    const auto pv = b["pou"].at("patches").template get<std::vector<int>>();
    if (pv.size() != static_cast<std::size_t>(Dim)) throw ConfigError("/basis/pou/patches: expected " + std::to_string(Dim) + " entries");
    std::copy(pv.begin(), pv.end(), patches.begin());
    const PouKind kind = value_or(b["pou"], "kind", "b").template get<std::string>() == "a" ? PouKind::a : PouKind::b;
    const auto part = PoUPartition<Dim>::uniform(v0, patches, kind);
    const std::size_t per = std::max<std::size_t>(1, M / part.windows.size());
    return build_pou_set<Dim>(part, per, R_m, act, seed);
  }
  return build_random_set<Dim>(M, R_m, act, seed, Standardization<Dim>::of(v0));
}

template <int Dim>
AdaptiveMesh<Dim> build_initial_mesh(const json& cfg, const Box<Dim>& v0) {
  const json q = value_or(cfg, "quadrature", json::object());
  std::array<int, Dim> cells{};
  cells.fill(4);
  if (q.contains("cells")) {
    const auto c = q["cells"].template get<std::vector<int>>();
    if (c.size() != static_cast<std::size_t>(Dim)) throw ConfigError("/quadrature/cells: expected " + std::to_string(Dim) + " entries");
    std::copy(c.begin(), c.end(), cells.begin());
  }
  return build_uniform_mesh<Dim>(v0, cells, gauss_legendre(value_or(q, "n", 3).template get<int>()), value_or(q, "max_level", 12).template get<int>());
}

template <int Dim>
IaOptions<Dim> build_ia_options(const json& cfg, const std::string& method) {
  const json q = value_or(cfg, "quadrature", json::object());
  const json reg = value_or(cfg, "regularization", json::object());
  IaOptions<Dim> o;
  o.max_iter = method == "irfm" ? 0 : value_or(q, "max_iter", 10).template get<int>();
  o.eps = value_or(q, "eps", 1e-2).template get<double>();
  o.change_grid_res = value_or(q, "change_grid_res", 100).template get<int>();
  o.max_points = value_or(q, "max_points", 0).template get<std::size_t>();
  o.indicators.gamma_abs = value_or(q, "gamma_abs", 1.0).template get<double>();
  o.indicators.gamma_grad = value_or(q, "gamma_grad", 1.0).template get<double>();
  o.indicators.c = value_or(q, "c", 1.0).template get<double>();
  if (reg.contains("lambda_sq")) o.lambda.pinned = reg["lambda_sq"].template get<double>();
  if (reg.contains("grid")) {
    const auto& g = reg["grid"];
    o.lambda.grid = log_grid(value_or(g, "lo", 1e-34).template get<double>(), value_or(g, "hi", 1e-1).template get<double>(),
                             value_or(g, "count", 40).template get<int>());
  }
  o.reselect_lambda_each_round = value_or(reg, "reselect_each_round", false).template get<bool>();
  o.error_grid_res = value_or(value_or(cfg, "evaluation", json::object()), "grid_res", default_grid_res<Dim>()).template get<int>();
  o.snapshot_mesh = value_or(value_or(cfg, "outputs", json::object()), "history_mesh", true).template get<bool>();
  return o;
}

template <int Dim>
MaOptions<Dim> build_ma_options(const json& cfg, IaOptions<Dim> ia) {
  const json e = value_or(cfg, "enhancement", json::object());
  const json reg = value_or(cfg, "regularization", json::object());
  MaOptions<Dim> o;
  o.ia = std::move(ia);
  o.eps_res = value_or(e, "eps_res", 0.0).template get<double>();
  o.eps_res_relative = value_or(e, "eps_res_relative", true).template get<bool>();
  o.i_max = value_or(e, "i_max", 1).template get<int>();
  o.test_res = value_or(e, "p_test_res", default_grid_res<Dim>()).template get<int>();
  o.detect.t_abs = value_or(e, "t_abs", 0.5).template get<double>();
  o.detect.t_grad = value_or(e, "t_grad", 0.5).template get<double>();
  o.detect.mode = parse_detect_mode(value_or(e, "mode", "grad").template get<std::string>());
  o.detect.min_fraction = value_or(e, "min_region_fraction", 0.05).template get<double>();
  o.detect.merge = value_or(e, "merge_regions", false).template get<bool>();
  o.shape.fwhm_rule = parse_fwhm_rule(value_or(e, "fwhm_rule", "linear").template get<std::string>());
  o.shape.contour_level = value_or(e, "contour_level", 0.5).template get<double>();
  o.reselect_lambda = value_or(e, "reselect_lambda", true).template get<bool>();
  if (e.contains("lambda_sq")) o.enhanced_lambda_sq = e["lambda_sq"].template get<double>();
  else if (reg.contains("enhanced_lambda_sq")) o.enhanced_lambda_sq = reg["enhanced_lambda_sq"].template get<double>();
  o.seed = value_or(e, "seed", value_or(cfg, "seed", 1).template get<std::uint64_t>() + 1000).template get<std::uint64_t>();
  for (const auto& r : value_or(e, "regions", json::array())) {
    RegionBasisSpec spec;
    spec.kind = parse_morph_kind(r.at("kind").template get<std::string>());
    // "m0" ties the region budget to the initial basis size (M1 = M0)
    spec.count = r.at("count").is_string() ? cfg.at("basis").at("m0").template get<std::size_t>()
                                           : r.at("count").template get<std::size_t>();
    spec.sampling = parse_sampling(r);
    o.regions.push_back(spec);
  }
  return o;
}

template <int Dim>
json shape_to_json(const ShapeEstimate<Dim>& s) {
  auto pt = [](const Point<Dim>& p) {
    json a = json::array();
    for (int d = 0; d < Dim; ++d) a.push_back(p[d]);
    return a;
  };
  return {{"center", pt(s.center)}, {"radius", s.radius}, {"extent", pt(s.extent)}, {"lo", pt(s.lo)},
          {"hi", pt(s.hi)},         {"peak", pt(s.peak)}, {"peak_value", s.peak_value}, {"fwhm", pt(s.fwhm)},
          {"v_min", s.v_min},       {"v_max", s.v_max},   {"contour_points", s.contour.size()},
          {"contour_closed", s.contour_closed},           {"size", s.size}};
}

template <int Dim>
void write_heatmaps(const fs::path& dir, const PointSet<Dim>& grid, int res, const Eigen::VectorXd& s_num,
                    const Eigen::VectorXd* s_ex) {
  auto emit = [&](const std::string& stem, const Eigen::VectorXd& v, std::optional<std::pair<double, double>> range) {
    if constexpr (Dim == 2) {
      write_pgm(dir / (stem + ".pgm"), v, res, res, range);
    } else {
      // Axis-aligned z slices.
      const Eigen::Index plane = static_cast<Eigen::Index>(res) * res;
      for (int s = 0; s < 6; ++s) {
        const int l = std::min(res - 1, (2 * s + 1) * res / 12);
        write_pgm(dir / (stem + "_z" + std::to_string(l) + ".pgm"), v.segment(l * plane, plane), res, res, range);
      }
    }
  };
  (void)grid;
  std::optional<std::pair<double, double>> range;
  if (s_ex) range = std::make_pair(std::min(s_ex->minCoeff(), s_num.minCoeff()), std::max(s_ex->maxCoeff(), s_num.maxCoeff()));
  emit("S_num", s_num, range);
  if (s_ex) {
    emit("S_ex", *s_ex, range);
    emit("abs_error", (s_num - *s_ex).cwiseAbs(), std::nullopt);
  }
}

template <int Dim>
RunResult run_prior_check(const json& cfg, const fs::path& dir, RunContext& ctx) {
  RunResult out;
  const auto v0 = parse_box<Dim>(cfg.at("domain").at("v0"), "/domain/v0");
  const auto ks = parse_wavenumbers(cfg.at("wavenumbers"));
  const json& lay = cfg.at("layout");
  if (lay.at("kind") != "rectangle") throw ConfigError("/layout/kind: prior_check uses a rectangle layout");
  const auto points = rectangle_layout<Dim>(parse_box<Dim>(lay.at("omega"), "/layout/omega"), lay.at("n_s").template get<int>());
  auto mesh = build_initial_mesh<Dim>(cfg, v0);
  auto basis = build_basis<Dim>(cfg, v0);
  const json pr = value_or(cfg, "prior", json::object());
  const double nu = value_or(pr, "nu", 1.0).template get<double>();
  const double C_nu = value_or(pr, "c_nu", 1.0).template get<double>();
  const double delta = value_or(value_or(value_or(cfg, "data", json::object()), "noise", json::object()), "delta", 0.05).template get<double>();
  const auto etas = value_or(pr, "eta_m", json::array({1e-4, 1e-3, 1e-2, 1e-1, 1.0})).template get<std::vector<double>>();
  const auto seed = value_or(cfg, "seed", 1).template get<std::uint64_t>();
  if (ctx.log) ctx.log("prior check: assembling " + std::to_string(mesh.num_points()) + " quadrature points x " + std::to_string(basis.size()) + " bases");
  AssemblyOptions aopt;
  const auto sys = assemble_operator(mesh, basis, ks, points, aopt);
  const SvdFactors svd(sys.A);
  const auto grid = grid_points(v0, value_or(value_or(cfg, "evaluation", json::object()), "grid_res", default_grid_res<Dim>()).template get<int>(), true);
  const Eigen::MatrixXd Bgrid = basis.evaluate(grid);
  std::ofstream csv;
  if (ctx.write_outputs) {
    csv.open(dir / "prior.csv");
    csv << "eta_M,delta_all,lambda_sq,error,bound,ratio,E_l2\n";
    csv.precision(10);
  }
  double worst_ratio_lo = std::numeric_limits<double>::infinity();
  double worst_ratio_hi = 0;
  for (std::size_t i = 0; i < etas.size(); ++i) {
    const auto syn = synthesize_consistent_data(sys.A, svd, nu, etas[i], seed + 31 * i);
    const Eigen::VectorXd ud = add_relative_noise(syn.u_true, delta, seed + 7 + 31 * i);
    PriorRow row;
    row.eta_M = etas[i];
    row.delta_all = (ud - syn.u_true).norm();
    const auto b = error_bound({row.delta_all, etas[i], nu, C_nu, syn.w.norm(), -1.0});
    row.lambda_sq = b.lambda_sq;
    const auto sol = solve_tikhonov(svd, ud, row.lambda_sq);
    row.error = (sol.s - syn.s_star).norm();
    row.bound = b.bound_value;
    row.ratio = row.bound / row.error;
    row.e_l2 = l2_relative_error(Eigen::VectorXd(Bgrid * sol.s), Eigen::VectorXd(Bgrid * syn.s_star));
    worst_ratio_lo = std::min(worst_ratio_lo, row.ratio);
    worst_ratio_hi = std::max(worst_ratio_hi, row.ratio);
    out.prior.push_back(row);
    if (csv) csv << row.eta_M << ',' << row.delta_all << ',' << row.lambda_sq << ',' << row.error << ',' << row.bound << ',' << row.ratio << ',' << row.e_l2 << '\n';
  }
  out.metrics["M_total"] = basis.size();
  out.metrics["n_integral"] = mesh.num_points();
  out.metrics["n_cells"] = mesh.num_leaves();
  out.metrics["n_rows"] = sys.A.rows();
  out.metrics["E_l2"] = out.prior.empty() ? json(nullptr) : json(out.prior.back().e_l2);
  out.metrics["lambda_sq"] = out.prior.empty() ? json(nullptr) : json(out.prior.back().lambda_sq);
  out.metrics["noise_delta"] = delta;
  out.metrics["message"] = "bound/error ratio in [" + csv_cell(worst_ratio_lo) + ", " + csv_cell(worst_ratio_hi) + "]";
  return out;
}

template <int Dim>
RunResult run_inverse(const json& cfg, const fs::path& dir, RunContext& ctx) {
  RunResult out;
  const std::string method = cfg.at("method").template get<std::string>();
  auto P = build_problem<Dim>(cfg, ctx);
  auto mesh = build_initial_mesh<Dim>(cfg, P.pb.v0);
  auto basis = build_basis<Dim>(cfg, P.pb.v0);
  auto ia = build_ia_options<Dim>(cfg, method);
  ia.reference = P.source.eval;
  if (ctx.log) {
    ia.on_record = [&](const HistoryRecord& r) {
      std::ostringstream os;
      os << r.phase << " " << r.iteration << ": n_integral " << r.n_integral << ", M " << r.n_basis << ", lambda^2 "
         << r.lambda_sq << ", E_l2 " << r.e_l2 << ", " << std::setprecision(3) << r.seconds << " s";
      ctx.log(os.str());
    };
  }
  const json outputs = value_or(cfg, "outputs", json::object());
  const bool write = ctx.write_outputs;

  SourceModel<Dim> model;
  AdaptiveMesh<Dim> final_mesh = mesh;
  SolveState<Dim> state;
  int ia_rounds = 0;
  int ma_rounds = 0;
  std::vector<PosteriorMask<Dim>> masks;
  std::vector<std::vector<ShapeEstimate<Dim>>> shapes;
  if (method == "ma_rfm") {
    auto opts = build_ma_options<Dim>(cfg, ia);
    auto r = run_ma_rfm(P.pb, std::move(mesh), std::move(basis), opts);
    for (const auto& h : r.history) ia_rounds += h.phase == "ia_rfm" && h.iteration > 0;
    model = std::move(r.model);
    final_mesh = std::move(r.mesh);
    out.history = std::move(r.history);
    state = std::move(r.state);
    ma_rounds = r.rounds;
    masks = std::move(r.masks);
    shapes = std::move(r.shapes);
  } else {
    auto r = run_ia_rfm(P.pb, std::move(mesh), std::move(basis), ia);
    model = std::move(r.model);
    final_mesh = std::move(r.mesh);
    out.history = std::move(r.history);
    state = std::move(r.state);
    ia_rounds = r.rounds;
  }

  // Training and oracle quadrature must not share points.
  if (!point_sets_disjoint<Dim>(final_mesh.points(), oracle_mesh(P.pb.v0, P.oracle).points())) {
    throw std::runtime_error("training quadrature shares points with the data oracle");
  }

  const int res = ia.error_grid_res;
  const auto grid = grid_points(P.pb.v0, res, true);
  const Eigen::VectorXd s_num = model.values(grid);
  Eigen::VectorXd s_ex(grid.cols());
  for (Eigen::Index i = 0; i < grid.cols(); ++i) s_ex[i] = P.source(grid.col(i));

  const auto& last = out.history.back();
  out.metrics["M_total"] = model.basis.size();
  out.metrics["n_integral"] = final_mesh.num_points();
  out.metrics["n_cells"] = final_mesh.num_leaves();
  out.metrics["lambda_sq"] = last.lambda_sq;
  out.metrics["E_l2"] = l2_relative_error(s_num, s_ex);
  out.metrics["loss"] = last.loss;
  out.metrics["relative_residual"] = last.relative_residual;
  out.metrics["ia_rounds"] = ia_rounds;
  out.metrics["ma_rounds"] = ma_rounds;
  out.metrics["noise_delta"] = P.delta;
  out.metrics["n_rows"] = state.sys.A.rows();
  if (!shapes.empty()) {
    out.metrics["regions"] = shapes.back().size();
    for (const auto& s : shapes.back()) out.shapes.push_back(shape_to_json(s));
    if (!shapes.back().empty()) {
      out.metrics["r_hat"] = shapes.back().front().radius;
      out.metrics["c_hat"] = out.shapes.front()["center"];
    }
  }

  if (write) {
    {
      std::ofstream os(dir / "history.jsonl");
      write_history_jsonl(os, out.history, value_or(outputs, "history_mesh", true).template get<bool>());
    }
    if (value_or(outputs, "mesh", true).template get<bool>()) {
      std::ofstream os(dir / "mesh.csv");
      write_mesh_csv(os, final_mesh);
    }
    if (value_or(outputs, "basis", true).template get<bool>()) {
      std::ofstream os(dir / "basis.json");
      os << basis_to_json(model.basis).dump() << '\n';
      std::ofstream cs(dir / "coefficients.csv");
      cs << "index,s\n";
      cs.precision(17);
      for (Eigen::Index i = 0; i < model.s.size(); ++i) cs << i << ',' << model.s[i] << '\n';
    }
    if (state.lcurve) {
      std::ofstream os(dir / "lcurve.csv");
      write_lcurve_csv(os, *state.lcurve);
    }
    if (value_or(outputs, "field", true).template get<bool>()) write_field_csv<Dim>(dir / "field.csv", grid, res, s_num, &s_ex);
    if (value_or(outputs, "heatmaps", true).template get<bool>()) write_heatmaps<Dim>(dir, grid, res, s_num, &s_ex);
    if (value_or(outputs, "masks", true).template get<bool>()) {
      for (std::size_t i = 0; i < masks.size(); ++i) {
        std::ofstream os(dir / ("mask_round" + std::to_string(i + 1) + ".csv"));
        write_mask_csv(os, masks[i]);
        if constexpr (Dim == 2) {
          std::ofstream cs(dir / ("contour_round" + std::to_string(i + 1) + ".csv"));
          cs << "region,index,x,y\n";
          cs.precision(12);
          for (std::size_t k = 0; k < shapes[i].size(); ++k) {
            const auto& pts = shapes[i][k].contour;
            for (std::size_t p = 0; p < pts.size(); ++p) cs << k << ',' << p << ',' << pts[p].x() << ',' << pts[p].y() << '\n';
          }
        }
      }
      if (!out.shapes.empty()) {
        std::ofstream os(dir / "shapes.json");
        os << json(out.shapes).dump(2) << '\n';
      }
    }
    if (value_or(outputs, "dump_matrix", false).template get<bool>()) {
      state.sys.col_map.resize(static_cast<std::size_t>(state.sys.A.cols()));
      write_system_binary((dir / "system.bin").string(), state.sys);
      std::ofstream rm(dir / "row_map.csv");
      write_row_map_csv(rm, state.sys.row_map);
      std::ofstream cm(dir / "col_map.csv");
      write_col_map_csv(cm, state.sys.col_map, model.basis);
    }
  }
  return out;
}

}  // namespace detail

/// Runs one (non-sweep) config; failures are captured in the metrics row.
inline RunResult run_experiment(const json& cfg, const fs::path& dir, RunContext ctx = {}) {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  RunResult out;
  json base{{"name", value_or(cfg, "name", "run")}, {"method", value_or(cfg, "method", nullptr)}, {"dim", value_or(cfg, "dim", nullptr)}};
  if (ctx.write_outputs) {
    fs::create_directories(dir);
    std::ofstream os(dir / "config.json");
    os << cfg.dump(2) << '\n';
  }
  try {
    const int dim = cfg.at("dim").template get<int>();
    const std::string method = cfg.at("method").template get<std::string>();
    if (method == "prior_check") {
      out = dim == 2 ? detail::run_prior_check<2>(cfg, dir, ctx) : detail::run_prior_check<3>(cfg, dir, ctx);
    } else {
      out = dim == 2 ? detail::run_inverse<2>(cfg, dir, ctx) : detail::run_inverse<3>(cfg, dir, ctx);
    }
    out.metrics["status"] = "ok";
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    out.ok = false;
    out.metrics["status"] = "failed";
    out.metrics["message"] = e.what();
  }
  for (auto& [k, v] : base.items()) out.metrics[k] = v;
  out.metrics["seconds"] = std::chrono::duration<double>(clock::now() - t0).count();
  out.dir = dir;
  if (ctx.write_outputs) write_metrics_csv(dir / "metrics.csv", {out.metrics});
  return out;
}

/// Expands a config over `values` at `param` and runs each variant in its
/// own subdirectory; also writes the combined metrics table.
inline std::vector<RunResult> run_sweep(const json& cfg, const std::string& param, const std::vector<json>& values,
                                        const fs::path& dir, RunContext ctx = {}, const json* schema = nullptr) {
  const auto ptr = param_pointer(param);
  std::vector<RunResult> results;
  std::vector<json> rows;
  const std::string leaf = ptr.back();
  for (const auto& v : values) {
    json c = cfg;
    c.erase("sweep");
    try {
      c[ptr] = v;
    } catch (const json::exception& e) {
      throw ConfigError("sweep parameter " + param + ": " + e.what());
    }
    if (schema) validate_config(c, *schema);
    std::string tag = v.is_string() ? v.template get<std::string>() : csv_cell(v);
    std::replace(tag.begin(), tag.end(), '/', '_');
    auto r = run_experiment(c, dir / (leaf + "=" + tag), ctx);
    r.metrics["param"] = param;
    r.metrics["value"] = v;
    if (ctx.write_outputs) write_metrics_csv(r.dir / "metrics.csv", {r.metrics});
    rows.push_back(r.metrics);
    results.push_back(std::move(r));
  }
  if (ctx.write_outputs) {
    fs::create_directories(dir);
    write_metrics_csv(dir / "sweep_metrics.csv", rows);
  }
  return results;
}

/// Runs a config file's content: a plain run, or its embedded sweep.
inline std::vector<RunResult> run_config(const json& cfg, const fs::path& dir, RunContext ctx = {}, const json* schema = nullptr) {
  if (schema) validate_config(cfg, *schema);
  if (cfg.contains("sweep")) {
    const auto& s = cfg["sweep"];
    return run_sweep(cfg, s.at("param").template get<std::string>(), s.at("values").template get<std::vector<json>>(), dir, ctx, schema);
  }
  return {run_experiment(cfg, dir, ctx)};
}

// ---------------------------------------------------------------------------
// Report: aggregate metrics.csv files into a table

struct ReportTable {
  std::vector<std::map<std::string, std::string>> rows;
};

inline ReportTable collect_metrics(const fs::path& root) {
  if (!fs::is_directory(root)) throw std::invalid_argument("report: not a directory: " + root.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file() && e.path().filename() == "metrics.csv") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  ReportTable t;
  for (const auto& f : files) {
    for (auto& row : read_csv_rows(f)) {
      row["dir"] = fs::relative(f.parent_path(), root).string();
      t.rows.push_back(std::move(row));
    }
  }
  return t;
}

/// Columns: method, M_total, n_integral, lambda^2, E_l2 (%).
inline void write_report(std::ostream& md, std::ostream& csv, const ReportTable& t) {
  const std::vector<std::string> cols{"dir", "name", "method", "param", "value", "M_total", "n_integral", "lambda_sq", "E_l2", "status"};
  auto fmt = [](const std::string& col, const std::string& v) {
    if (col == "E_l2" && !v.empty()) {
      std::ostringstream os;
      os << std::fixed << std::setprecision(2) << 100.0 * std::stod(v) << "%";
      return os.str();
    }
    if (col == "lambda_sq" && !v.empty()) {
      std::ostringstream os;
      os << std::scientific << std::setprecision(1) << std::stod(v);
      return os.str();
    }
    return v;
  };
  md << "|";
  for (const auto& c : cols) md << ' ' << (c == "E_l2" ? "E_l2(S)" : c == "lambda_sq" ? "lambda^2" : c) << " |";
  md << "\n|";
  for (std::size_t i = 0; i < cols.size(); ++i) md << "---|";
  md << '\n';
  for (std::size_t c = 0; c < cols.size(); ++c) csv << (c ? "," : "") << cols[c];
  csv << '\n';
  for (const auto& r : t.rows) {
    md << "|";
    for (std::size_t c = 0; c < cols.size(); ++c) {
      const auto it = r.find(cols[c]);
      const std::string v = it == r.end() ? "" : it->second;
      md << ' ' << fmt(cols[c], v) << " |";
      csv << (c ? "," : "") << csv_cell(json(v));
    }
    md << '\n';
    csv << '\n';
  }
}

}  // namespace helm
