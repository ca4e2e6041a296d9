// helm: run, sweep and report source-reconstruction experiments.

#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <fstream>
#include <iostream>

#include "helm/experiment.hpp"

namespace {

using helm::json;
namespace fs = std::filesystem;

void log_line(const std::string& msg) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%H:%M:%S", std::localtime(&now));
  std::cerr << '[' << buf << "] " << msg << '\n';
}

json load(const std::string& arg, const std::vector<std::string>& overrides) {
  json cfg = helm::read_json_file(helm::resolve_config(arg));
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw helm::ConfigError("--set expects path=value, got '" + o + "'");
    const auto ptr = helm::param_pointer(o.substr(0, eq));
    const json v = helm::parse_value(o.substr(eq + 1));
    if (v.is_null()) {
      // path=null removes the field
      if (cfg.contains(ptr)) cfg[ptr.parent_pointer()].erase(ptr.back());
    } else {
      cfg[ptr] = v;
    }
  }
  return cfg;
}

void print_summary(const std::vector<helm::RunResult>& results) {
  for (const auto& r : results) {
    const auto& m = r.metrics;
    std::cout << m.value("name", std::string("run"));
    if (m.contains("value")) std::cout << " [" << m["param"].get<std::string>() << "=" << helm::csv_cell(m["value"]) << "]";
    std::cout << ": " << m.value("status", std::string("?"));
    if (m.contains("E_l2") && !m["E_l2"].is_null()) std::cout << ", E_l2 " << 100.0 * m["E_l2"].get<double>() << "%";
    if (m.contains("n_integral")) std::cout << ", n_integral " << m["n_integral"];
    if (m.contains("M_total")) std::cout << ", M " << m["M_total"];
    if (m.contains("message") && m["message"].is_string()) std::cout << " (" << m["message"].get<std::string>() << ")";
    std::cout << "  -> " << r.dir.string() << '\n';
  }
}

int exit_code(const std::vector<helm::RunResult>& results) {
  for (const auto& r : results) {
    if (!r.ok) return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Helmholtz source reconstruction with random feature bases"};
  app.require_subcommand(1);
  bool quiet = false;
  std::string schema_path;
  app.add_flag("-q,--quiet", quiet, "Suppress progress output");
  app.add_option("--schema", schema_path, "JSON schema for configs (default: bundled)");

  std::string cfg_arg;
  std::string out_dir;
  std::vector<std::string> overrides;

  auto* run = app.add_subcommand("run", "Run a config (or its embedded sweep)");
  run->add_option("config", cfg_arg, "Config file or bundled config name")->required();
  run->add_option("-o,--out", out_dir, "Output directory (default: runs/<name>)");
  run->add_option("--set", overrides, "Override a field, path=value (JSON value; null removes it)");

  std::string param;
  std::vector<std::string> values;
  auto* sweep = app.add_subcommand("sweep", "Run a config over values of one parameter");
  sweep->add_option("config", cfg_arg, "Config file or bundled config name")->required();
  sweep->add_option("--param", param, "Dotted path or JSON pointer of the swept field")->required();
  sweep->add_option("--values", values, "Values (each parsed as JSON)")->required()->expected(1, -1);
  sweep->add_option("-o,--out", out_dir, "Output directory (default: runs/<name>_sweep)");
  sweep->add_option("--set", overrides, "Override a field, path=value (JSON value; null removes it)");

  std::string report_dir;
  auto* report = app.add_subcommand("report", "Aggregate metrics.csv files into a table");
  report->add_option("dir", report_dir, "Directory with run outputs")->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);

  try {
    const json schema = schema_path.empty() ? helm::bundled_schema() : helm::read_json_file(schema_path);
    helm::DataCache cache;
    helm::RunContext ctx;
    ctx.cache = &cache;
    if (!quiet) ctx.log = log_line;

    if (*run) {
      const json cfg = load(cfg_arg, overrides);
      const fs::path dir = out_dir.empty() ? fs::path("runs") / cfg.value("name", std::string("run")) : fs::path(out_dir);
      const auto results = helm::run_config(cfg, dir, ctx, &schema);
      print_summary(results);
      return exit_code(results);
    }
    if (*sweep) {
      json cfg = load(cfg_arg, overrides);
      cfg.erase("sweep");
      helm::validate_config(cfg, schema);
      std::vector<json> parsed;
      for (const auto& v : values) parsed.push_back(helm::parse_value(v));
      const fs::path dir =
          out_dir.empty() ? fs::path("runs") / (cfg.value("name", std::string("run")) + "_sweep") : fs::path(out_dir);
      const auto results = helm::run_sweep(cfg, param, parsed, dir, ctx, &schema);
      print_summary(results);
      return exit_code(results);
    }
    if (*report) {
      const auto table = helm::collect_metrics(report_dir);
      if (table.rows.empty()) {
        std::cerr << "no metrics.csv found under " << report_dir << '\n';
        return 1;
      }
      std::ofstream csv(fs::path(report_dir) / "report.csv");
      std::ostringstream md;
      helm::write_report(md, csv, table);
      std::ofstream(fs::path(report_dir) / "report.md") << md.str();
      std::cout << md.str();
      return 0;
    }
  } catch (const helm::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
