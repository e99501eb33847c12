#include "graphmoe/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "graphmoe/errors.hpp"

namespace graphmoe {
namespace {

using nlohmann::json;

std::string history_name(HistoryWeighting h) {
  return h == HistoryWeighting::kCumulative ? "cumulative" : "batch_scaled";
}

HistoryWeighting parse_history(const std::string& s) {
  if (s == "cumulative") return HistoryWeighting::kCumulative;
  if (s == "batch_scaled") return HistoryWeighting::kBatchScaled;
  throw ConfigError("normal_loss.history: expected cumulative|batch_scaled, got '" + s + "'");
}

void merge_into(json& base, const json& over, const std::string& path) {
  if (!over.is_object()) throw ConfigError((path.empty() ? std::string("config") : path) + ": expected an object");
  for (auto it = over.begin(); it != over.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    json& slot = base[it.key()];
    if (slot.is_object())
      merge_into(slot, it.value(), key);
    else
      slot = it.value();
  }
}

const json& at_path(const json& tree, const std::string& path) {
  const json* node = &tree;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    node = &node->at(key);
    if (dot == std::string::npos) return *node;
    start = dot + 1;
  }
}

std::uint64_t get_uint(const json& tree, const std::string& path) {
  const json& v = at_path(tree, path);
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
  throw ConfigError(path + ": expected a non-negative integer, got " + v.dump());
}

double get_double(const json& tree, const std::string& path) {
  const json& v = at_path(tree, path);
  if (!v.is_number()) throw ConfigError(path + ": expected a number, got " + v.dump());
  const double d = v.get<double>();
  if (!std::isfinite(d)) throw ConfigError(path + ": must be finite");
  return d;
}

bool get_bool(const json& tree, const std::string& path) {
  const json& v = at_path(tree, path);
  if (!v.is_boolean()) throw ConfigError(path + ": expected true|false, got " + v.dump());
  return v.get<bool>();
}

std::string get_string(const json& tree, const std::string& path) {
  const json& v = at_path(tree, path);
  if (!v.is_string()) throw ConfigError(path + ": expected a string, got " + v.dump());
  return v.get<std::string>();
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

}  // namespace

json ExperimentConfig::default_tree() { return ExperimentConfig{}.to_json_full(); }

json ExperimentConfig::to_json_full() const {
  json j;
  j["model"] = {{"vocab_size", model.vocab_size}, {"d_model", model.d_model},       {"num_blocks", model.num_blocks},
                {"num_heads", model.num_heads},   {"ffn_hidden", model.ffn_hidden}, {"max_seq_len", model.max_seq_len}};
  j["data"] = {{"tasks", tasks},
               {"n_per_task", n_per_task},
               {"payload_len", data.payload_len},
               {"alphabet", data.alphabet}};
  j["router_kind"] = router_kind_name(router_kind);
  j["num_experts"] = num_experts;
  j["top_k"] = router_kind == RouterKind::kDense ? num_experts : top_k;
  j["rank"] = rank;
  j["alpha"] = alpha;
  j["edge_density"] = edge_density;
  j["gcn_hidden"] = gcn_hidden;
  j["graph_seed"] = graph_seed;
  j["c_p"] = c_p;
  j["c_n"] = c_n;
  j["normal_loss"] = {{"sorted", normal_sorted}, {"history", history_name(normal_history)}};
  j["poisson_loss"] = {{"batch_mean_first", poisson_batch_mean_first}};
  j["learning_rate"] = learning_rate;
  j["steps"] = steps;
  j["batch_size"] = batch_size;
  j["log_interval"] = log_interval;
  j["seeds"] = seeds;
  j["output_dir"] = output_dir;
  return j;
}

json ExperimentConfig::to_json() const {
  json j = to_json_full();
  if (router_kind != RouterKind::kGraph) {
    j.erase("edge_density");
    j.erase("gcn_hidden");
    j.erase("graph_seed");
  }
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& user) {
  json tree = default_tree();
  merge_into(tree, user, "");

  ExperimentConfig c;
  c.model.vocab_size = get_uint(tree, "model.vocab_size");
  c.model.d_model = get_uint(tree, "model.d_model");
  c.model.num_blocks = get_uint(tree, "model.num_blocks");
  c.model.num_heads = get_uint(tree, "model.num_heads");
  c.model.ffn_hidden = get_uint(tree, "model.ffn_hidden");
  c.model.max_seq_len = get_uint(tree, "model.max_seq_len");

  const json& t = tree["data"]["tasks"];
  require(t.is_array(), "data.tasks: expected a list of task names");
  c.tasks.clear();
  for (const auto& name : t) {
    require(name.is_string(), "data.tasks: expected strings, got " + name.dump());
    c.tasks.push_back(name.get<std::string>());
  }
  c.n_per_task = get_uint(tree, "data.n_per_task");
  c.data.payload_len = get_uint(tree, "data.payload_len");
  c.data.alphabet = get_uint(tree, "data.alphabet");

  c.router_kind = parse_router_kind(get_string(tree, "router_kind"));
  c.num_experts = get_uint(tree, "num_experts");
  c.top_k = get_uint(tree, "top_k");
  c.rank = get_uint(tree, "rank");
  c.alpha = get_double(tree, "alpha");
  c.edge_density = get_double(tree, "edge_density");
  c.gcn_hidden = get_uint(tree, "gcn_hidden");
  c.graph_seed = get_uint(tree, "graph_seed");
  c.c_p = get_double(tree, "c_p");
  c.c_n = get_double(tree, "c_n");
  c.normal_sorted = get_bool(tree, "normal_loss.sorted");
  c.normal_history = parse_history(get_string(tree, "normal_loss.history"));
  c.poisson_batch_mean_first = get_bool(tree, "poisson_loss.batch_mean_first");
  c.learning_rate = get_double(tree, "learning_rate");
  c.steps = get_uint(tree, "steps");
  c.batch_size = get_uint(tree, "batch_size");
  c.log_interval = get_uint(tree, "log_interval");

  const json& s = tree["seeds"];
  c.seeds.clear();
  if (s.is_array()) {
    for (const auto& v : s) c.seeds.push_back(get_uint(json{{"seeds", v}}, "seeds"));
  } else {
    c.seeds.push_back(get_uint(tree, "seeds"));
  }
  c.output_dir = get_string(tree, "output_dir");
  if (c.router_kind == RouterKind::kDense) c.top_k = c.num_experts;
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  json tree = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    try {
      tree = json::parse(in, nullptr, true, true);
    } catch (const json::parse_error& e) {
      throw ConfigError("config file " + path.string() + ": " + e.what());
    }
  }
  // Overrides address the full tree so that defaults can be overridden too.
  json full = default_tree();
  merge_into(full, tree, "");
  for (const auto& o : overrides) apply_override(full, o);
  return from_json(full);
}

std::string ExperimentConfig::hash() const {
  const std::string s = to_json().dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void ExperimentConfig::validate() const {
  try {
    model.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  require(!tasks.empty() && tasks.size() <= kMaxTasks,
          "data.tasks: need between 1 and " + std::to_string(kMaxTasks) + " tasks");
  std::size_t max_symbol = std::max<std::size_t>(data.alphabet, 2);
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const SyntheticTaskSpec spec = parse_task(tasks[i], static_cast<int>(i));
    if (spec.rule == TaskRule::kModAdd) max_symbol = std::max<std::size_t>(max_symbol, spec.modulus);
  }
  require(n_per_task >= 10, "data.n_per_task: must be >= 10 (validation split is n/10)");
  require(data.payload_len >= 2, "data.payload_len: must be >= 2");
  require(data.alphabet >= 2, "data.alphabet: must be >= 2");
  require(data.payload_len + 1 <= model.max_seq_len, "data.payload_len: sequence exceeds model.max_seq_len");
  require(kSymbolBase + max_symbol <= model.vocab_size,
          "model.vocab_size: must be >= " + std::to_string(kSymbolBase + max_symbol) + " for these tasks");

  require(num_experts >= 1, "num_experts: must be >= 1");
  require(top_k >= 1 && top_k <= num_experts,
          "top_k: must lie in [1, num_experts=" + std::to_string(num_experts) + "]");
  const std::size_t max_rank = std::min(model.d_model, model.ffn_hidden);
  require(rank >= 1 && rank <= max_rank, "rank: must lie in [1, " + std::to_string(max_rank) + "]");
  require(alpha > 0.0, "alpha: must be > 0");
  if (router_kind == RouterKind::kGraph) {
    require(edge_density > 0.0 && edge_density <= 1.0, "edge_density: must lie in (0, 1]");
    require(gcn_hidden >= 1, "gcn_hidden: must be >= 1");
  }
  require(c_p >= 0.0, "c_p: must be >= 0");
  require(c_n >= 0.0, "c_n: must be >= 0");
  require(learning_rate > 0.0 && learning_rate <= 1.0, "learning_rate: must lie in (0, 1]");
  require(batch_size >= 1, "batch_size: must be >= 1");
  require(log_interval >= 1, "log_interval: must be >= 1");
  require(!seeds.empty(), "seeds: need at least one seed");
  for (std::size_t i = 0; i < seeds.size(); ++i)
    for (std::size_t j = i + 1; j < seeds.size(); ++j)
      require(seeds[i] != seeds[j], "seeds: duplicate seed " + std::to_string(seeds[i]));
  require(!output_dir.empty(), "output_dir: must not be empty");
}

LayerOptions ExperimentConfig::layer_options() const {
  LayerOptions o;
  o.num_experts = num_experts;
  o.top_k = top_k;
  o.rank = rank;
  o.alpha = alpha;
  o.router = router_kind;
  o.edge_density = edge_density;
  o.graph_seed = graph_seed;
  o.gcn_hidden = gcn_hidden;
  o.normal_sorted = normal_sorted;
  o.poisson_batch_mean_first = poisson_batch_mean_first;
  o.normal_history = normal_history;
  return o;
}

std::vector<SyntheticTaskSpec> ExperimentConfig::task_specs() const {
  std::vector<SyntheticTaskSpec> out;
  for (std::size_t i = 0; i < tasks.size(); ++i) out.push_back(parse_task(tasks[i], static_cast<int>(i)));
  return out;
}

void apply_override(json& tree, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "': expected key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);

  json* node = &tree;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  if (node->is_object()) {
    json merged = *node;
    merge_into(merged, value, key);
    *node = std::move(merged);
  } else {
    *node = std::move(value);
  }
}

}  // namespace graphmoe
