#include "graphmoe/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "graphmoe/errors.hpp"

namespace graphmoe {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[8] = {'G', 'R', 'M', 'O', 'E', 'C', 'K', 'P'};

class Writer {
 public:
  explicit Writer(const std::filesystem::path& p) : out_(p, std::ios::binary | std::ios::trunc) {
    if (!out_) throw FormatError("cannot open checkpoint for writing: " + p.string());
  }
  template <class T>
  void pod(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void doubles(std::span<const double> d) {
    out_.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size() * sizeof(double)));
  }
  void raw(const char* p, std::size_t n) { out_.write(p, static_cast<std::streamsize>(n)); }
  void finish() {
    out_.flush();
    if (!out_) throw FormatError("checkpoint write failed");
  }

 private:
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& p) : in_(p, std::ios::binary) {
    if (!in_) throw FormatError("cannot open checkpoint: " + p.string());
  }
  template <class T>
  T pod() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof v);
    check();
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    if (n > (1ULL << 30)) throw FormatError("checkpoint: implausible string length");
    std::string s(n, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(n));
    check();
    return s;
  }
  std::vector<double> doubles(std::size_t n) {
    if (n > (1ULL << 32)) throw FormatError("checkpoint: implausible tensor size");
    std::vector<double> v(n);
    in_.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
    check();
    return v;
  }
  void raw(char* p, std::size_t n) {
    in_.read(p, static_cast<std::streamsize>(n));
    check();
  }
  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  void check() {
    if (!in_) throw FormatError("checkpoint truncated");
  }
  std::ifstream in_;
};

std::vector<NamedTensor> all_tensors(const ToyModel& m) {
  std::vector<NamedTensor> out;
  for (auto& p : m.trainable_parameters()) out.push_back({"trainable/" + p.name, p.tensor});
  for (auto& p : m.frozen_parameters()) out.push_back({"frozen/" + p.name, p.tensor});
  return out;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ToyModel& model, const ExperimentConfig& cfg,
                     std::uint64_t seed, std::uint64_t step) {
  Writer w(path);
  w.raw(kMagic, sizeof kMagic);
  w.pod<std::uint32_t>(kCheckpointVersion);
  w.str(cfg.to_json().dump());
  w.pod<std::uint64_t>(seed);
  w.pod<std::uint64_t>(step);

  const auto tensors = all_tensors(model);
  w.pod<std::uint64_t>(tensors.size());
  for (const auto& t : tensors) {
    w.str(t.name);
    w.pod<std::uint64_t>(t.tensor.shape().size());
    for (std::size_t d : t.tensor.shape()) w.pod<std::uint64_t>(d);
    w.doubles(t.tensor.data());
  }

  const auto& layers = model.layers();
  w.pod<std::uint64_t>(layers.size());
  for (const auto& layer : layers) {
    const auto& g = layer.graph();
    w.pod<std::uint8_t>(g ? 1 : 0);
    if (g) {
      w.pod<std::uint64_t>(g->num_experts());
      w.pod<double>(g->beta());
      w.pod<std::uint64_t>(g->seed());
      w.pod<std::uint64_t>(g->sampled_edge_count());
      w.pod<std::uint64_t>(g->edges().size());
      for (const Edge& e : g->edges()) {
        w.pod<std::uint64_t>(e.u);
        w.pod<std::uint64_t>(e.v);
      }
    }
    const auto& tr = layer.tracker();
    w.pod<std::uint64_t>(tr.step_count());
    w.pod<std::uint64_t>(tr.num_experts());
    w.doubles(tr.cumulative());
  }
  w.finish();
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  char magic[sizeof kMagic];
  r.raw(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw FormatError("not a graphmoe checkpoint: " + path.string());
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kCheckpointVersion) + ")");

  LoadedCheckpoint out;
  try {
    out.config = ExperimentConfig::from_json(nlohmann::json::parse(r.str()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config unreadable: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config invalid: ") + e.what());
  }
  out.seed = r.pod<std::uint64_t>();
  out.step = r.pod<std::uint64_t>();
  out.model = std::make_unique<ToyModel>(out.config.model, out.config.layer_options(), out.seed);

  std::map<std::string, Tensor> by_name;
  for (auto& t : all_tensors(*out.model)) by_name.emplace(t.name, t.tensor);

  const auto count = r.pod<std::uint64_t>();
  if (count != by_name.size())
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, config implies " +
                      std::to_string(by_name.size()));
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = r.str();
    const auto rank = r.pod<std::uint64_t>();
    if (rank > 8) throw FormatError("checkpoint tensor " + name + ": implausible rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.pod<std::uint64_t>();
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint tensor " + name + " not present in the model");
    if (it->second.shape() != shape)
      throw FormatError("checkpoint tensor " + name + ": shape " + shape_str(shape) + " vs model " +
                        shape_str(it->second.shape()));
    const auto values = r.doubles(shape_numel(shape));
    auto dst = it->second.mutable_data();
    std::copy(values.begin(), values.end(), dst.begin());
  }

  auto& layers = out.model->layers();
  const auto nlayers = r.pod<std::uint64_t>();
  if (nlayers != layers.size()) throw FormatError("checkpoint layer count mismatch");
  for (auto& layer : layers) {
    const bool has_graph = r.pod<std::uint8_t>() != 0;
    if (has_graph != layer.graph().has_value()) throw FormatError("checkpoint router kind mismatch");
    if (has_graph) {
      const auto n = r.pod<std::uint64_t>();
      const auto beta = r.pod<double>();
      const auto seed = r.pod<std::uint64_t>();
      const auto sampled = r.pod<std::uint64_t>();
      const auto ne = r.pod<std::uint64_t>();
      if (ne > MoEGraph::candidate_pairs(n)) throw FormatError("checkpoint graph: too many edges");
      std::vector<Edge> edges(ne);
      for (auto& e : edges) {
        e.u = r.pod<std::uint64_t>();
        e.v = r.pod<std::uint64_t>();
      }
      try {
        layer.set_graph(MoEGraph::from_edges(n, beta, seed, std::move(edges), sampled));
      } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint graph: ") + e.what());
      }
    }
    const auto steps = r.pod<std::uint64_t>();
    const auto n = r.pod<std::uint64_t>();
    if (n != layer.num_experts()) throw FormatError("checkpoint tracker size mismatch");
    layer.tracker().restore(r.doubles(n), steps);
  }
  if (!r.at_end()) throw FormatError("checkpoint has trailing bytes");
  return out;
}

}  // namespace graphmoe
