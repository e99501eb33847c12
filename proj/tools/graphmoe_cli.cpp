#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "graphmoe/config.hpp"
#include "graphmoe/errors.hpp"
#include "graphmoe/harness.hpp"

namespace {

using namespace graphmoe;

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

struct Common {
  std::string config;
  std::string seeds;
  std::string out;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON config file (keys absent from it take defaults)");
  app->add_option("--seed", c.seeds, "seed or comma-separated seed list");
  app->add_option("--out", c.out, "output directory");
  app->add_option("--override", c.overrides, "key=value, dotted keys for nested fields")->take_all();
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::uint64_t parse_u64(const std::string& s, const char* what) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    if (!s.empty() && s[0] == '-') throw std::invalid_argument(s);
    v = std::stoull(s, &pos);
  } catch (const std::exception&) {
    throw ConfigError(std::string(what) + ": expected a non-negative integer, got '" + s + "'");
  }
  if (pos != s.size()) throw ConfigError(std::string(what) + ": expected a non-negative integer, got '" + s + "'");
  return v;
}

double parse_double(const std::string& s, const char* what) {
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw ConfigError(std::string(what) + ": expected a number, got '" + s + "'");
  }
  if (pos != s.size()) throw ConfigError(std::string(what) + ": expected a number, got '" + s + "'");
  return v;
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = ExperimentConfig::load(c.config, c.overrides);
  if (!c.seeds.empty()) {
    cfg.seeds.clear();
    for (const auto& s : split_commas(c.seeds)) cfg.seeds.push_back(parse_u64(s, "--seed"));
  }
  if (!c.out.empty()) cfg.output_dir = c.out;
  cfg.validate();
  return cfg;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

int report_runs(const std::string& label, const std::vector<RunOutcome>& runs, const Aggregate& a) {
  std::cout << label << ": accuracy " << fmt(a.accuracy_mean) << " +- " << fmt(a.accuracy_std) << ", v_a std "
            << fmt(a.va_std_mean) << " (" << a.ok_runs << "/" << runs.size() << " seeds ok)\n";
  bool failed = false;
  for (const auto& r : runs)
    if (!r.ok) {
      failed = true;
      std::cerr << "  seed " << r.seed << " failed: " << r.failure << '\n';
    }
  return failed ? kExitNumeric : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GraphLoRA mixture-of-experts experiments"};
  app.require_subcommand(1);

  Common train_opts, ablate_opts, sweep_opts;
  auto* train = app.add_subcommand("train", "train every configured seed");
  add_common(train, train_opts);
  auto* ablate = app.add_subcommand("ablate", "full, -Graph, -Poisson and -Normal arms");
  add_common(ablate, ablate_opts);
  auto* sweep = app.add_subcommand("sweep", "one training per axis value");
  add_common(sweep, sweep_opts);
  std::string axis, values;
  sweep->add_option("--axis", axis, "experts|topk|rank|density")->required();
  sweep->add_option("--values", values, "comma-separated values from the axis grid")->required();

  RouteInspectOptions ri;
  std::string ri_ckpt, ri_out;
  auto* inspect = app.add_subcommand("route-inspect", "dump per-token routing from a checkpoint");
  inspect->add_option("--checkpoint", ri_ckpt, "checkpoint.bin from a run")->required();
  inspect->add_option("--out", ri_out, "output JSONL file")->required();
  inspect->add_option("--split", ri.split, "val|train");
  inspect->add_option("--limit", ri.limit, "number of sequences, 0 for all");

  std::vector<std::string> plot_runs;
  std::string plot_out;
  auto* plot = app.add_subcommand("plot-data", "tidy CSVs from completed runs");
  plot->add_option("--runs", plot_runs, "run directories")->required()->take_all();
  plot->add_option("--out", plot_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (train->parsed()) {
      const auto r = cmd_train(resolve(train_opts));
      return report_runs("train", r.runs, r.summary);
    }
    if (ablate->parsed()) {
      int rc = 0;
      for (const auto& arm : cmd_ablate(resolve(ablate_opts)))
        rc = std::max(rc, report_runs(arm.name, arm.runs, arm.summary));
      return rc;
    }
    if (sweep->parsed()) {
      const ExperimentConfig cfg = resolve(sweep_opts);
      const SweepAxis ax = parse_sweep_axis(axis);
      std::vector<double> vals;
      for (const auto& v : split_commas(values)) vals.push_back(parse_double(v, "--values"));
      int rc = 0;
      for (const auto& p : cmd_sweep(cfg, ax, vals)) {
        std::ostringstream label;
        label << axis << '=' << p.value;
        rc = std::max(rc, report_runs(label.str(), p.runs, p.summary));
      }
      return rc;
    }
    if (inspect->parsed()) {
      ri.checkpoint = ri_ckpt;
      ri.out = ri_out;
      cmd_route_inspect(ri);
      std::cout << "wrote " << ri.out.string() << '\n';
      return 0;
    }
    if (plot->parsed()) {
      std::vector<std::filesystem::path> dirs(plot_runs.begin(), plot_runs.end());
      for (const auto& p : cmd_plot_data(dirs, plot_out)) std::cout << "wrote " << p.string() << '\n';
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitNumeric;
  }
  return 0;
}
