#include "graphmoe/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "graphmoe/checkpoint.hpp"
#include "graphmoe/errors.hpp"
#include "graphmoe/ops.hpp"
#include "graphmoe/optim.hpp"
#include "graphmoe/rng.hpp"

namespace graphmoe {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kDenseTolerance = 1e-10;

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw Error("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot read " + p.string());
  return json::parse(in);
}

json nullable(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

std::uint64_t checksum(const std::vector<NamedTensor>& tensors) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& t : tensors) {
    for (double v : t.tensor.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      for (int b = 0; b < 8; ++b) {
        h ^= (bits >> (8 * b)) & 0xff;
        h *= 1099511628211ULL;
      }
    }
  }
  return h;
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// std of the training tracker's v_a per layer; NaN while a tracker is empty.
std::vector<double> tracker_stds(const ToyModel& m) {
  std::vector<double> out;
  for (const auto& l : m.layers())
    out.push_back(l.tracker().empty() ? std::numeric_limits<double>::quiet_NaN()
                                      : population_std(l.tracker().frequency()));
  return out;
}

json layer_state(const ToyModel& m) {
  json layers = json::array();
  for (const auto& l : m.layers()) {
    json j;
    if (l.tracker().empty()) {
      j["v_a"] = nullptr;
      j["v_a_std"] = nullptr;
    } else {
      const auto f = l.tracker().frequency();
      j["v_a"] = f;
      j["v_a_std"] = population_std(f);
    }
    j["lambda"] = l.poisson_target().lambda();
    j["sigma"] = l.normal_target().sigma();
    layers.push_back(std::move(j));
  }
  return layers;
}

json graph_json(const MoEGraph& g) {
  json edges = json::array();
  for (const Edge& e : g.edges()) edges.push_back({e.u, e.v});
  return {{"num_experts", g.num_experts()},
          {"beta", g.beta()},
          {"seed", g.seed()},
          {"edges", edges},
          {"sampled_edges", g.sampled_edge_count()},
          {"repair_edges", g.repair_edge_count()},
          {"density", density_of(g)},
          {"complete", g.edges().size() == MoEGraph::candidate_pairs(g.num_experts())},
          {"token_neighbors", g.token_neighbors()}};
}

// Largest |sparse - dense| over every layer on random inputs.
double dense_equivalence_gap(ToyModel& m, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 7));
  double worst = 0.0;
  for (auto& layer : m.layers()) {
    const std::size_t in = layer.base().in_features();
    std::vector<double> x(16 * in);
    for (double& v : x) v = rng.normal();
    const Tensor xt = Tensor::from_data({16, in}, std::move(x));
    const Tensor sparse_h = layer.forward(xt, false).h;
    const Tensor dense_h = layer.dense_mixture(xt);
    const auto sparse = sparse_h.data(), dense = dense_h.data();
    for (std::size_t i = 0; i < sparse.size(); ++i) worst = std::max(worst, std::abs(sparse[i] - dense[i]));
  }
  return worst;
}

template <class F>
void parallel_for(std::size_t n, F&& f) {
  const std::size_t workers = run_parallelism(n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) f(i);
    });
  for (auto& t : pool) t.join();
}

struct Job {
  const ExperimentConfig* cfg;
  std::uint64_t seed;
  fs::path dir;
};

std::vector<RunOutcome> run_jobs(const std::vector<Job>& jobs) {
  std::vector<RunOutcome> out(jobs.size());
  parallel_for(jobs.size(), [&](std::size_t i) { out[i] = train_run(*jobs[i].cfg, jobs[i].seed, jobs[i].dir); });
  return out;
}

std::string seed_dir(std::uint64_t s) { return "seed_" + std::to_string(s); }

json run_json(const RunOutcome& r, const fs::path& base) {
  return {{"seed", r.seed},
          {"status", r.ok ? "ok" : "failed"},
          {"failure", r.failure},
          {"accuracy", nullable(r.accuracy)},
          {"va_std", nullable(r.va_std)},
          {"eval_va_std", nullable(r.eval_va_std)},
          {"trainable_parameters", r.trainable_parameters},
          {"wall_seconds", r.wall_seconds},
          {"dir", fs::relative(r.dir, base).generic_string()},
          {"checkpoint", r.ok ? (fs::relative(r.dir, base) / "checkpoint.bin").generic_string() : ""}};
}

json aggregate_json(const Aggregate& a, std::size_t total) {
  return {{"accuracy_mean", nullable(a.accuracy_mean)}, {"accuracy_std", nullable(a.accuracy_std)},
          {"va_std_mean", nullable(a.va_std_mean)},     {"va_std_std", nullable(a.va_std_std)},
          {"ok_runs", a.ok_runs},                       {"failed_runs", total - a.ok_runs}};
}

void write_train_summary(const fs::path& dir, const ExperimentConfig& cfg, const std::vector<RunOutcome>& runs,
                         const Aggregate& agg) {
  json j = {{"kind", "train"}, {"config_hash", cfg.hash()}, {"config", cfg.to_json()}};
  j["runs"] = json::array();
  for (const auto& r : runs) j["runs"].push_back(run_json(r, dir));
  j["summary"] = aggregate_json(agg, runs.size());
  write_json(dir / "summary.json", j);
}

std::size_t count_trainable(const ExperimentConfig& cfg) {
  return ToyModel(cfg.model, cfg.layer_options(), 0).trainable_parameter_count();
}

std::string fmt(double v) {
  if (!std::isfinite(v)) return "NaN";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string value_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

}  // namespace

std::size_t run_parallelism(std::size_t jobs) {
  std::size_t cap = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("GRAPHMOE_THREADS"); env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) throw ConfigError(std::string("GRAPHMOE_THREADS must be a positive integer, got '") + env + "'");
    cap = static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(1, std::min(cap, jobs));
}

std::uint64_t data_seed(std::uint64_t run_seed) { return mix_seed(run_seed, 11); }

Aggregate aggregate(const std::vector<RunOutcome>& runs) {
  std::vector<double> acc, va;
  for (const auto& r : runs)
    if (r.ok) {
      acc.push_back(r.accuracy);
      va.push_back(r.va_std);
    }
  Aggregate a;
  a.ok_runs = acc.size();
  if (acc.empty()) {
    a.accuracy_mean = a.accuracy_std = a.va_std_mean = a.va_std_std = std::numeric_limits<double>::quiet_NaN();
    return a;
  }
  a.accuracy_mean = mean_of(acc);
  a.accuracy_std = population_std(acc);
  a.va_std_mean = mean_of(va);
  a.va_std_std = population_std(va);
  return a;
}

RunOutcome train_run(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& run_dir) {
  RunOutcome o;
  o.seed = seed;
  o.dir = run_dir;
  o.accuracy = o.va_std = o.eval_va_std = std::numeric_limits<double>::quiet_NaN();
  fs::create_directories(run_dir);
  json resolved = cfg.to_json();
  resolved["run_seed"] = seed;
  write_json(run_dir / "resolved_config.json", resolved);

  const auto t0 = std::chrono::steady_clock::now();
  std::ofstream metrics(run_dir / "metrics.jsonl", std::ios::trunc);
  json final = {{"seed", seed}, {"config_hash", cfg.hash()}};
  std::size_t step = 0;
  try {
    const Dataset ds = generate_dataset(cfg.task_specs(), cfg.n_per_task, data_seed(seed), cfg.data);
    ToyModel model(cfg.model, cfg.layer_options(), seed);
    o.trainable_parameters = model.trainable_parameter_count();
    const std::uint64_t frozen_before = checksum(model.frozen_parameters());

    std::vector<Tensor> params;
    for (auto& p : model.trainable_parameters()) params.push_back(p.tensor);
    Adam opt(params, {cfg.learning_rate});
    Rng batch_rng(mix_seed(seed, 3));

    auto log_row = [&](std::size_t s, const ModelOutput& out, const Tensor& task, const Tensor& total) {
      const EvalMetrics e = evaluate(model, ds, ds.val);
      const auto stds = tracker_stds(model);
      json row = {{"step", s},
                  {"task_loss", task.item()},
                  {"loss_poisson", out.loss_poisson.item()},
                  {"loss_normal", out.loss_normal.item()},
                  {"total", total.item()},
                  {"accuracy", e.accuracy},
                  {"v_a_std", nullable(mean_of(stds))},
                  {"layers", layer_state(model)}};
      metrics << row.dump() << '\n';
      metrics.flush();
    };

    {
      std::vector<std::size_t> idx(std::min(cfg.batch_size, ds.train.size()));
      std::iota(idx.begin(), idx.end(), 0);
      const Batch b = make_batch(ds.train, idx);
      const ModelOutput out = model.forward(b, false);
      const Tensor task = cross_entropy(out.logits, b.targets);
      const Tensor total = total_loss(task, out.loss_poisson, out.loss_normal, cfg.c_p, cfg.c_n);
      log_row(0, out, task, total);
    }

    for (step = 1; step <= cfg.steps; ++step) {
      std::vector<std::size_t> idx(cfg.batch_size);
      for (auto& i : idx) i = batch_rng.below(ds.train.size());
      const Batch b = make_batch(ds.train, idx);
      opt.zero_grad();
      const ModelOutput out = model.forward(b, true);
      const Tensor task = cross_entropy(out.logits, b.targets);
      const Tensor total = total_loss(task, out.loss_poisson, out.loss_normal, cfg.c_p, cfg.c_n);
      backward(total);
      opt.step();
      if (step % cfg.log_interval == 0 || step == cfg.steps) log_row(step, out, task, total);
    }
    step = cfg.steps;

    if (cfg.top_k == cfg.num_experts) {
      const double gap = dense_equivalence_gap(model, seed);
      final["dense_equivalence_max_abs_diff"] = gap;
      if (!(gap <= kDenseTolerance))
        throw ContractViolation("dense-equivalence violated with K = N: max |diff| = " + std::to_string(gap));
    }

    const EvalMetrics e = evaluate(model, ds, ds.val);
    const auto stds = tracker_stds(model);
    o.accuracy = e.accuracy;
    o.eval_va_std = e.mean_frequency_std();
    o.va_std = cfg.steps == 0 ? o.eval_va_std : mean_of(stds);

    json task_acc = json::object();
    for (const auto& spec : ds.tasks) task_acc[spec.name()] = e.task_accuracy.at(spec.task_id);
    json layers = layer_state(model);
    for (std::size_t l = 0; l < model.layers().size(); ++l) {
      const auto& layer = model.layers()[l];
      layers[l]["eval_frequency"] = e.frequency[l];
      layers[l]["eval_frequency_std"] = e.frequency_std[l];
      layers[l]["entropy"] = e.entropy[l];
      json dom = json::object();
      for (const auto& [task, ex] : e.dominant_experts[l]) dom[ds.tasks[static_cast<std::size_t>(task)].name()] = ex;
      layers[l]["dominant_experts"] = dom;
      layers[l]["graph"] = layer.graph() ? graph_json(*layer.graph()) : json(nullptr);
    }
    final["accuracy"] = e.accuracy;
    final["task_accuracy"] = task_acc;
    final["va_std"] = nullable(o.va_std);
    final["eval_va_std"] = o.eval_va_std;
    final["layers"] = layers;
    final["trainable_parameters"] = o.trainable_parameters;
    final["frozen_parameters"] = model.frozen_parameter_count();
    final["frozen_checksum_unchanged"] = checksum(model.frozen_parameters()) == frozen_before;

    save_checkpoint(run_dir / "checkpoint.bin", model, cfg, seed, step);
    final["checkpoint"] = "checkpoint.bin";
    o.ok = true;
  } catch (const std::exception& ex) {
    o.ok = false;
    o.failure = "step " + std::to_string(step) + ": " + ex.what();
  }
  o.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  final["status"] = o.ok ? "ok" : "failed";
  final["failure"] = o.failure;
  final["steps"] = cfg.steps;
  final["wall_seconds"] = o.wall_seconds;
  write_json(run_dir / "final.json", final);
  return o;
}

TrainResult cmd_train(const ExperimentConfig& cfg) {
  cfg.validate();
  const fs::path out = cfg.output_dir;
  fs::create_directories(out);
  write_json(out / "resolved_config.json", cfg.to_json());
  std::vector<Job> jobs;
  for (auto s : cfg.seeds) jobs.push_back({&cfg, s, out / seed_dir(s)});
  TrainResult r{cfg, run_jobs(jobs), {}};
  r.summary = aggregate(r.runs);
  write_train_summary(out, cfg, r.runs, r.summary);
  return r;
}

// ---------------------------------------------------------------- ablation

std::vector<std::pair<std::string, ExperimentConfig>> ablation_arms(const ExperimentConfig& base) {
  ExperimentConfig full = base;
  full.router_kind = RouterKind::kGraph;
  ExperimentConfig no_graph = full;
  no_graph.router_kind = RouterKind::kSoftmax;
  ExperimentConfig no_poisson = full;
  no_poisson.c_p = 0.0;
  ExperimentConfig no_normal = full;
  no_normal.c_n = 0.0;
  return {{"full", full}, {"-Graph", no_graph}, {"-Poisson", no_poisson}, {"-Normal", no_normal}};
}

namespace {
std::string arm_dir(const std::string& arm) {
  if (arm == "full") return "full";
  std::string s = "no_" + arm.substr(1);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}
}  // namespace

std::vector<AblationArm> cmd_ablate(const ExperimentConfig& cfg) {
  cfg.validate();
  const fs::path out = cfg.output_dir;
  fs::create_directories(out);
  write_json(out / "resolved_config.json", cfg.to_json());

  std::vector<AblationArm> arms;
  for (auto& [name, c] : ablation_arms(cfg)) {
    c.output_dir = (out / arm_dir(name)).string();
    c.validate();
    arms.push_back({name, c, {}, {}});
  }
  std::vector<Job> jobs;
  for (const auto& a : arms)
    for (auto s : a.config.seeds) jobs.push_back({&a.config, s, fs::path(a.config.output_dir) / seed_dir(s)});
  const auto outcomes = run_jobs(jobs);

  std::size_t k = 0;
  for (auto& a : arms) {
    const fs::path dir = a.config.output_dir;
    write_json(dir / "resolved_config.json", a.config.to_json());
    for (std::size_t i = 0; i < a.config.seeds.size(); ++i) a.runs.push_back(outcomes[k++]);
    a.summary = aggregate(a.runs);
    write_train_summary(dir, a.config, a.runs, a.summary);
  }

  std::ofstream csv(out / "ablation.csv", std::ios::trunc);
  csv << "arm";
  for (auto s : cfg.seeds) csv << ",acc_seed" << s;
  csv << ",acc_mean,acc_std,va_std_mean,va_std_std\n";
  json j = {{"kind", "ablation"}, {"config_hash", cfg.hash()}, {"arms", json::array()}};
  for (const auto& a : arms) {
    csv << a.name;
    for (const auto& r : a.runs) csv << ',' << (r.ok ? fmt(r.accuracy) : "NaN");
    csv << ',' << fmt(a.summary.accuracy_mean) << ',' << fmt(a.summary.accuracy_std) << ','
        << fmt(a.summary.va_std_mean) << ',' << fmt(a.summary.va_std_std) << '\n';
    json arm = {{"arm", a.name}, {"dir", arm_dir(a.name)}, {"summary", aggregate_json(a.summary, a.runs.size())}};
    arm["runs"] = json::array();
    for (const auto& r : a.runs) arm["runs"].push_back(run_json(r, out));
    j["arms"].push_back(std::move(arm));
  }
  write_json(out / "ablation.json", j);
  return arms;
}

// ---------------------------------------------------------------- sweep

SweepAxis parse_sweep_axis(const std::string& s) {
  if (s == "experts") return SweepAxis::kExperts;
  if (s == "topk") return SweepAxis::kTopK;
  if (s == "rank") return SweepAxis::kRank;
  if (s == "density") return SweepAxis::kDensity;
  throw ConfigError("sweep axis must be one of experts|topk|rank|density, got '" + s + "'");
}

std::string sweep_axis_name(SweepAxis a) {
  switch (a) {
    case SweepAxis::kExperts: return "experts";
    case SweepAxis::kTopK: return "topk";
    case SweepAxis::kRank: return "rank";
    case SweepAxis::kDensity: return "density";
  }
  return "unknown";
}

ExperimentConfig sweep_point_config(const ExperimentConfig& base, SweepAxis axis, double value) {
  static const std::map<SweepAxis, std::vector<double>> grids = {
      {SweepAxis::kExperts, {4, 8, 12, 16, 32}},
      {SweepAxis::kTopK, {1, 2, 3, 4, 5}},
      {SweepAxis::kRank, {1, 2, 4, 8, 16, 32}},
      {SweepAxis::kDensity, {0.05, 0.1, 0.2, 0.5, 0.8, 1.0}},
  };
  const auto& grid = grids.at(axis);
  if (std::find(grid.begin(), grid.end(), value) == grid.end()) {
    std::string legal;
    for (double g : grid) legal += (legal.empty() ? "" : ",") + value_label(g);
    throw ConfigError("sweep " + sweep_axis_name(axis) + ": value " + value_label(value) + " not in {" + legal + "}");
  }
  ExperimentConfig c = base;
  switch (axis) {
    case SweepAxis::kExperts: c.num_experts = static_cast<std::size_t>(value); break;
    case SweepAxis::kTopK: c.top_k = static_cast<std::size_t>(value); break;
    case SweepAxis::kRank: c.rank = static_cast<std::size_t>(value); break;
    case SweepAxis::kDensity:
      if (c.router_kind != RouterKind::kGraph) throw ConfigError("sweep density requires router_kind = graph");
      c.edge_density = value;
      break;
  }
  c.output_dir = (fs::path(base.output_dir) / (sweep_axis_name(axis) + "_" + value_label(value))).string();
  c.validate();
  return c;
}

std::vector<SweepPoint> cmd_sweep(const ExperimentConfig& cfg, SweepAxis axis, const std::vector<double>& values) {
  cfg.validate();
  if (values.empty()) throw ConfigError("sweep: need at least one value");
  std::set<double> seen;
  std::vector<SweepPoint> points;
  for (double v : values) {
    if (!seen.insert(v).second) throw ConfigError("sweep: duplicate value " + value_label(v));
    points.push_back({v, sweep_point_config(cfg, axis, v), {}, {}});
  }
  std::sort(points.begin(), points.end(), [](const auto& a, const auto& b) { return a.value < b.value; });

  const fs::path out = cfg.output_dir;
  fs::create_directories(out);
  write_json(out / "resolved_config.json", cfg.to_json());
  std::vector<Job> jobs;
  for (const auto& p : points)
    for (auto s : p.config.seeds) jobs.push_back({&p.config, s, fs::path(p.config.output_dir) / seed_dir(s)});
  const auto outcomes = run_jobs(jobs);

  const std::string name = sweep_axis_name(axis);
  std::ofstream csv(out / ("sweep_" + name + ".csv"), std::ios::trunc);
  csv << "value,acc_mean,acc_std,va_std_mean,va_std_std,trainable_parameters,ok_runs\n";
  json j = {{"kind", "sweep"}, {"axis", name}, {"config_hash", cfg.hash()}, {"points", json::array()}};
  std::size_t k = 0;
  for (auto& p : points) {
    const fs::path dir = p.config.output_dir;
    write_json(dir / "resolved_config.json", p.config.to_json());
    for (std::size_t i = 0; i < p.config.seeds.size(); ++i) p.runs.push_back(outcomes[k++]);
    p.summary = aggregate(p.runs);
    write_train_summary(dir, p.config, p.runs, p.summary);
    const std::size_t params = count_trainable(p.config);
    csv << value_label(p.value) << ',' << fmt(p.summary.accuracy_mean) << ',' << fmt(p.summary.accuracy_std) << ','
        << fmt(p.summary.va_std_mean) << ',' << fmt(p.summary.va_std_std) << ',' << params << ','
        << p.summary.ok_runs << '\n';
    json pj = {{"value", p.value},
               {"dir", fs::relative(dir, out).generic_string()},
               {"trainable_parameters", params},
               {"summary", aggregate_json(p.summary, p.runs.size())}};
    pj["runs"] = json::array();
    for (const auto& r : p.runs) pj["runs"].push_back(run_json(r, out));
    j["points"].push_back(std::move(pj));
  }
  write_json(out / ("sweep_" + name + ".json"), j);
  return points;
}

// ---------------------------------------------------------------- route inspection

void cmd_route_inspect(const RouteInspectOptions& opts) {
  if (opts.split != "val" && opts.split != "train")
    throw ConfigError("route-inspect: split must be val|train, got '" + opts.split + "'");
  LoadedCheckpoint ck = load_checkpoint(opts.checkpoint);
  const ExperimentConfig& cfg = ck.config;
  const Dataset ds = generate_dataset(cfg.task_specs(), cfg.n_per_task, data_seed(ck.seed), cfg.data);
  const auto& pool = opts.split == "val" ? ds.val : ds.train;
  const std::size_t n = opts.limit == 0 ? pool.size() : std::min(opts.limit, pool.size());

  if (opts.out.has_parent_path()) fs::create_directories(opts.out.parent_path());
  std::ofstream out(opts.out, std::ios::trunc);
  if (!out) throw Error("cannot write " + opts.out.string());

  ToyModel& model = *ck.model;
  const std::size_t n_layers = model.layers().size();
  std::vector<std::map<int, std::vector<double>>> task_mass(n_layers);
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < n; start += kChunk) {
    std::vector<std::size_t> idx(std::min(kChunk, n - start));
    std::iota(idx.begin(), idx.end(), start);
    const Batch b = make_batch(pool, idx);
    const ModelOutput mo = model.forward(b, false);
    for (std::size_t l = 0; l < n_layers; ++l) {
      const RouterOutput& r = mo.routing[l];
      const std::size_t ne = r.num_experts();
      const auto w = r.weights.data();
      const auto g = r.topk_gates.data();
      for (std::size_t row = 0; row < r.batch(); ++row) {
        const std::size_t seq = row / b.seq_len, pos = row % b.seq_len;
        const int task = b.task_ids[seq];
        std::vector<std::size_t> sel(r.topk_indices.begin() + static_cast<std::ptrdiff_t>(row * r.k),
                                     r.topk_indices.begin() + static_cast<std::ptrdiff_t>((row + 1) * r.k));
        std::vector<double> gates(g.begin() + static_cast<std::ptrdiff_t>(row * r.k),
                                  g.begin() + static_cast<std::ptrdiff_t>((row + 1) * r.k));
        json line = {{"type", "token"},
                     {"sequence", start + seq},
                     {"position", pos},
                     {"token", b.tokens[row]},
                     {"task_id", task},
                     {"layer", l},
                     {"o_r", std::vector<double>(w.begin() + static_cast<std::ptrdiff_t>(row * ne),
                                                 w.begin() + static_cast<std::ptrdiff_t>((row + 1) * ne))},
                     {"topk", sel},
                     {"gates", gates}};
        out << line.dump() << '\n';
        auto& tm = task_mass[l][task];
        if (tm.empty()) tm.assign(ne, 0.0);
        for (std::size_t s = 0; s < r.k; ++s) tm[sel[s]] += gates[s];
      }
    }
  }
  for (std::size_t l = 0; l < n_layers; ++l) {
    json rows = json::object();
    for (auto& [task, m] : task_mass[l]) {
      const double s = std::accumulate(m.begin(), m.end(), 0.0);
      std::vector<double> f = m;
      for (double& v : f) v = s > 0.0 ? v / s : 0.0;
      rows[ds.tasks[static_cast<std::size_t>(task)].name()] = f;
    }
    out << json{{"type", "task_frequency"}, {"layer", l}, {"matrix", rows}}.dump() << '\n';
  }
}

// ---------------------------------------------------------------- plot data

std::vector<fs::path> cmd_plot_data(const std::vector<fs::path>& run_dirs, const fs::path& out_dir) {
  if (run_dirs.empty()) throw ConfigError("plot-data: no run directories given");
  std::vector<std::string> missing;
  struct ScatterRow {
    std::string method;
    double acc;
    std::size_t params;
  };
  struct AblRow {
    std::string arm;
    std::uint64_t seed;
    double acc, va;
  };
  struct SweepRow {
    std::string axis;
    double value;
    std::uint64_t seed;
    double acc, va;
    std::size_t params;
  };
  std::vector<ScatterRow> scatter;
  std::vector<AblRow> abl;
  std::vector<SweepRow> sweep;

  auto num = [](const json& v) { return v.is_number() ? v.get<double>() : std::numeric_limits<double>::quiet_NaN(); };
  auto check_runs = [&](const fs::path& base, const json& runs) {
    for (const auto& r : runs) {
      const fs::path f = base / r.at("dir").get<std::string>() / "final.json";
      if (!fs::exists(f)) missing.push_back(f.string());
    }
  };

  for (const auto& dir : run_dirs) {
    if (!fs::is_directory(dir)) {
      missing.push_back(dir.string() + " (directory)");
      continue;
    }
    bool found = false;
    if (fs::exists(dir / "ablation.json")) {
      found = true;
      const json j = read_json(dir / "ablation.json");
      for (const auto& arm : j.at("arms")) {
        const std::string name = arm.at("arm");
        const json& runs = arm.at("runs");
        check_runs(dir, runs);
        std::size_t params = 0;
        for (const auto& r : runs) {
          abl.push_back({name, r.at("seed").get<std::uint64_t>(), num(r.at("accuracy")), num(r.at("va_std"))});
          params = std::max<std::size_t>(params, r.at("trainable_parameters").get<std::size_t>());
        }
        scatter.push_back({"ablation:" + name, num(arm.at("summary").at("accuracy_mean")), params});
      }
    }
    for (const auto& entry : fs::directory_iterator(dir)) {
      const std::string fname = entry.path().filename().string();
      if (fname.rfind("sweep_", 0) != 0 || entry.path().extension() != ".json") continue;
      found = true;
      const json j = read_json(entry.path());
      const std::string axis = j.at("axis");
      for (const auto& p : j.at("points")) {
        const double value = p.at("value").get<double>();
        const std::size_t params = p.at("trainable_parameters").get<std::size_t>();
        check_runs(dir, p.at("runs"));
        for (const auto& r : p.at("runs"))
          sweep.push_back({axis, value, r.at("seed").get<std::uint64_t>(), num(r.at("accuracy")),
                           num(r.at("va_std")), params});
        scatter.push_back({axis + "=" + value_label(value), num(p.at("summary").at("accuracy_mean")), params});
      }
    }
    if (!found && fs::exists(dir / "summary.json")) {
      found = true;
      const json j = read_json(dir / "summary.json");
      check_runs(dir, j.at("runs"));
      std::size_t params = 0;
      for (const auto& r : j.at("runs"))
        params = std::max<std::size_t>(params, r.at("trainable_parameters").get<std::size_t>());
      const std::string router = j.at("config").at("router_kind");
      scatter.push_back({dir.filename().string() + ":" + router, num(j.at("summary").at("accuracy_mean")), params});
    }
    if (!found) missing.push_back(dir.string() + " (no summary.json, ablation.json or sweep_*.json)");
  }
  if (!missing.empty()) {
    std::string msg = "plot-data: missing inputs:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw ConfigError(msg);
  }

  fs::create_directories(out_dir);
  std::vector<fs::path> written;
  {
    const fs::path p = out_dir / "scatter.csv";
    std::ofstream f(p, std::ios::trunc);
    f << "method,mean_accuracy,trainable_parameters\n";
    for (const auto& r : scatter) f << r.method << ',' << fmt(r.acc) << ',' << r.params << '\n';
    written.push_back(p);
  }
  if (!abl.empty()) {
    const fs::path p = out_dir / "ablation.csv";
    std::ofstream f(p, std::ios::trunc);
    f << "arm,seed,accuracy,va_std\n";
    for (const auto& r : abl) f << r.arm << ',' << r.seed << ',' << fmt(r.acc) << ',' << fmt(r.va) << '\n';
    written.push_back(p);
  }
  if (!sweep.empty()) {
    std::stable_sort(sweep.begin(), sweep.end(), [](const SweepRow& a, const SweepRow& b) {
      if (a.axis != b.axis) return a.axis < b.axis;
      if (a.value != b.value) return a.value < b.value;
      return a.seed < b.seed;
    });
    const fs::path p = out_dir / "sweep.csv";
    std::ofstream f(p, std::ios::trunc);
    f << "axis,value,seed,accuracy,va_std,trainable_parameters\n";
    for (const auto& r : sweep)
      f << r.axis << ',' << value_label(r.value) << ',' << r.seed << ',' << fmt(r.acc) << ',' << fmt(r.va) << ','
        << r.params << '\n';
    written.push_back(p);
  }
  return written;
}

}  // namespace graphmoe
