#include "graphmoe/toy_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "graphmoe/errors.hpp"
#include "graphmoe/ops.hpp"

namespace graphmoe {

void ToyTransformerConfig::validate() const {
  if (vocab_size < 1 || d_model < 1 || num_blocks < 1 || num_heads < 1 || ffn_hidden < 1 || max_seq_len < 1)
    throw ConfigError("model: every size must be a positive integer");
  if (d_model % num_heads != 0)
    throw ConfigError("model.d_model (" + std::to_string(d_model) + ") must be divisible by model.num_heads (" +
                      std::to_string(num_heads) + ")");
}

// ---------------------------------------------------------------- tasks

std::string SyntheticTaskSpec::name() const {
  switch (rule) {
    case TaskRule::kCopy: return "copy";
    case TaskRule::kReverse: return "reverse";
    case TaskRule::kModAdd: return "modadd" + std::to_string(modulus);
    case TaskRule::kParity: return "parity";
  }
  return "unknown";
}

SyntheticTaskSpec parse_task(const std::string& name, int task_id) {
  SyntheticTaskSpec s;
  s.task_id = task_id;
  if (name == "copy") {
    s.rule = TaskRule::kCopy;
  } else if (name == "reverse") {
    s.rule = TaskRule::kReverse;
  } else if (name == "parity") {
    s.rule = TaskRule::kParity;
  } else if (name.rfind("modadd", 0) == 0 && name.size() > 6 &&
             std::all_of(name.begin() + 6, name.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    s.rule = TaskRule::kModAdd;
    s.modulus = std::stoi(name.substr(6));
    if (s.modulus < 2) throw ConfigError("modadd modulus must be >= 2");
  } else {
    throw ConfigError("unknown task rule '" + name + "' (expected copy|reverse|parity|modadd<m>)");
  }
  return s;
}

std::vector<int> make_target(const SyntheticTaskSpec& spec, const std::vector<int>& input) {
  const std::size_t len = input.size();
  std::vector<int> target(len, kPadToken);
  std::vector<int> payload;
  for (std::size_t p = 1; p < len && input[p] != kPadToken; ++p) payload.push_back(input[p]);
  switch (spec.rule) {
    case TaskRule::kCopy:
      for (std::size_t p = 0; p < payload.size(); ++p) target[p] = payload[p];
      break;
    case TaskRule::kReverse:
      for (std::size_t p = 0; p < payload.size(); ++p) target[p] = payload[payload.size() - 1 - p];
      break;
    case TaskRule::kModAdd: {
      if (payload.size() < 2) throw ContractViolation("modadd input needs two operands");
      const int a = payload[0] - kSymbolBase, b = payload[1] - kSymbolBase;
      target[len - 1] = kSymbolBase + (a + b) % spec.modulus;
      break;
    }
    case TaskRule::kParity: {
      int ones = 0;
      for (int t : payload) ones += (t - kSymbolBase) & 1;
      target[len - 1] = kSymbolBase + (ones & 1);
      break;
    }
  }
  return target;
}

std::vector<int> task_output_tokens(const SyntheticTaskSpec& spec, const DataOptions& opts) {
  std::size_t count = 0;
  switch (spec.rule) {
    case TaskRule::kCopy:
    case TaskRule::kReverse: count = opts.alphabet; break;
    case TaskRule::kModAdd: count = static_cast<std::size_t>(spec.modulus); break;
    case TaskRule::kParity: count = 2; break;
  }
  std::vector<int> out(count);
  std::iota(out.begin(), out.end(), kSymbolBase);
  return out;
}

Dataset generate_dataset(const std::vector<SyntheticTaskSpec>& tasks, std::size_t n_per_task, std::uint64_t seed,
                         const DataOptions& opts) {
  if (n_per_task < 1) throw ConfigError("data.n_per_task must be >= 1");
  if (tasks.empty() || tasks.size() > kMaxTasks)
    throw ConfigError("data.tasks must list between 1 and " + std::to_string(kMaxTasks) + " tasks");
  if (opts.payload_len < 2) throw ConfigError("data.payload_len must be >= 2");
  if (opts.alphabet < 2) throw ConfigError("data.alphabet must be >= 2");
  Dataset ds;
  ds.tasks = tasks;
  ds.options = opts;
  ds.seq_len = 1 + opts.payload_len;
  for (const auto& spec : tasks) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(spec.task_id)));
    std::vector<Sample> samples;
    samples.reserve(n_per_task);
    for (std::size_t i = 0; i < n_per_task; ++i) {
      Sample s;
      s.task_id = spec.task_id;
      s.input.assign(ds.seq_len, kPadToken);
      s.input[0] = 1 + spec.task_id;
      switch (spec.rule) {
        case TaskRule::kCopy:
        case TaskRule::kReverse:
          for (std::size_t p = 1; p < ds.seq_len; ++p) s.input[p] = kSymbolBase + static_cast<int>(rng.below(opts.alphabet));
          break;
        case TaskRule::kModAdd:
          s.input[1] = kSymbolBase + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.modulus)));
          s.input[2] = kSymbolBase + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.modulus)));
          break;
        case TaskRule::kParity:
          for (std::size_t p = 1; p < ds.seq_len; ++p) s.input[p] = kSymbolBase + static_cast<int>(rng.below(2));
          break;
      }
      s.target = make_target(spec, s.input);
      samples.push_back(std::move(s));
    }
    const std::size_t n_val = n_per_task / 10;
    const std::size_t n_train = n_per_task - n_val;
    ds.train.insert(ds.train.end(), samples.begin(), samples.begin() + static_cast<std::ptrdiff_t>(n_train));
    ds.val.insert(ds.val.end(), samples.begin() + static_cast<std::ptrdiff_t>(n_train), samples.end());
  }
  return ds;
}

Batch make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices) {
  Batch b;
  b.batch = indices.size();
  if (indices.empty()) return b;
  b.seq_len = samples.at(indices[0]).input.size();
  for (std::size_t i : indices) {
    const Sample& s = samples.at(i);
    if (s.input.size() != b.seq_len) throw ShapeError("make_batch: sequences differ in length");
    b.tokens.insert(b.tokens.end(), s.input.begin(), s.input.end());
    for (int t : s.target) b.targets.push_back(t == kPadToken ? -1 : t);
    b.task_ids.push_back(s.task_id);
  }
  return b;
}

// ---------------------------------------------------------------- model

namespace {

Tensor gaussian(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal(0.0, stddev);
  return Tensor::from_data(std::move(shape), std::move(v));
}

}  // namespace

ToyModel::ToyModel(const ToyTransformerConfig& cfg, const LayerOptions& layer_opts, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t d = cfg_.d_model, f = cfg_.ffn_hidden;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  Rng frozen(mix_seed(seed, 1));
  tok_emb_ = gaussian({cfg_.vocab_size, d}, 1.0, frozen);
  pos_emb_ = gaussian({cfg_.max_seq_len, d}, 1.0, frozen);
  std::vector<FrozenBase> bases;
  for (std::size_t b = 0; b < cfg_.num_blocks; ++b) {
    Block blk;
    // Sharper-than-unit query/key scales give position-selective attention.
    blk.wq = gaussian({d, d}, 2.0 * inv_sqrt_d, frozen);
    blk.wk = gaussian({d, d}, 2.0 * inv_sqrt_d, frozen);
    blk.wv = gaussian({d, d}, inv_sqrt_d, frozen);
    blk.wo = gaussian({d, d}, inv_sqrt_d, frozen);
    blocks_.push_back(std::move(blk));
    bases.push_back(FrozenBase::random(d, f, std::sqrt(2.0 / static_cast<double>(d)), frozen));
    bases.push_back(FrozenBase::random(f, d, 1.0 / std::sqrt(static_cast<double>(f)), frozen));
  }
  out_proj_ = gaussian({cfg_.vocab_size, d}, inv_sqrt_d, frozen);

  Rng trainable(mix_seed(seed, 2));
  for (std::size_t i = 0; i < bases.size(); ++i) {
    LayerOptions opts = layer_opts;
    opts.graph_seed = mix_seed(layer_opts.graph_seed ^ seed, 100 + i);
    layers_.emplace_back(std::move(bases[i]), opts, trainable);
  }
}

template <class Ffn>
Tensor ToyModel::run(const Batch& batch, Ffn&& ffn) const {
  const std::size_t n_seq = batch.batch, len = batch.seq_len, d = cfg_.d_model;
  const std::size_t heads = cfg_.num_heads, dh = d / heads;
  if (len > cfg_.max_seq_len)
    throw ShapeError("sequence length " + std::to_string(len) + " exceeds model.max_seq_len");
  std::vector<std::size_t> ids(batch.tokens.size()), pos(batch.tokens.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (batch.tokens[i] < 0 || static_cast<std::size_t>(batch.tokens[i]) >= cfg_.vocab_size)
      throw ShapeError("token id " + std::to_string(batch.tokens[i]) + " outside vocabulary");
    ids[i] = static_cast<std::size_t>(batch.tokens[i]);
    pos[i] = i % len;
  }
  Tensor x = add(gather_rows(tok_emb_, ids), gather_rows(pos_emb_, pos));
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  for (std::size_t bi = 0; bi < blocks_.size(); ++bi) {
    const Block& blk = blocks_[bi];
    const Tensor n1 = layer_norm_rows(x);
    const Tensor q = matmul_nt(n1, blk.wq), k = matmul_nt(n1, blk.wk), v = matmul_nt(n1, blk.wv);
    std::vector<Tensor> seqs;
    seqs.reserve(n_seq);
    for (std::size_t s = 0; s < n_seq; ++s) {
      const Tensor qs = slice_rows(q, s * len, (s + 1) * len);
      const Tensor ks = slice_rows(k, s * len, (s + 1) * len);
      const Tensor vs = slice_rows(v, s * len, (s + 1) * len);
      std::vector<Tensor> hs;
      for (std::size_t h = 0; h < heads; ++h) {
        const Tensor qh = slice_cols(qs, h * dh, (h + 1) * dh);
        const Tensor kh = slice_cols(ks, h * dh, (h + 1) * dh);
        const Tensor vh = slice_cols(vs, h * dh, (h + 1) * dh);
        hs.push_back(matmul(softmax(scale(matmul_nt(qh, kh), inv_sqrt_dh)), vh));
      }
      seqs.push_back(heads == 1 ? hs[0] : concat(hs, 1));
    }
    x = add(x, matmul_nt(n_seq == 1 ? seqs[0] : concat(seqs, 0), blk.wo));
    x = add(x, ffn(bi, layer_norm_rows(x)));
  }
  return matmul_nt(layer_norm_rows(x), out_proj_);
}

ModelOutput ToyModel::forward(const Batch& batch, bool update_tracker) {
  ModelOutput out;
  std::vector<Tensor> lp, ln;
  out.logits = run(batch, [&](std::size_t bi, const Tensor& h) {
    LayerOutput a = layers_[2 * bi].forward(h, update_tracker);
    LayerOutput b = layers_[2 * bi + 1].forward(relu(a.h), update_tracker);
    lp.push_back(a.aux.poisson);
    lp.push_back(b.aux.poisson);
    ln.push_back(a.aux.normal);
    ln.push_back(b.aux.normal);
    out.routing.push_back(std::move(a.routing));
    out.routing.push_back(std::move(b.routing));
    return b.h;
  });
  const double inv = 1.0 / static_cast<double>(layers_.size());
  Tensor sp = lp[0], sn = ln[0];
  for (std::size_t i = 1; i < lp.size(); ++i) {
    sp = add(sp, lp[i]);
    sn = add(sn, ln[i]);
  }
  out.loss_poisson = scale(sp, inv);
  out.loss_normal = scale(sn, inv);
  return out;
}

Tensor ToyModel::backbone_logits(const Batch& batch) const {
  return run(batch, [&](std::size_t bi, const Tensor& h) {
    return base_forward(layers_[2 * bi + 1].base(), relu(base_forward(layers_[2 * bi].base(), h)));
  });
}

std::vector<NamedTensor> ToyModel::trainable_parameters() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string prefix = "block" + std::to_string(i / 2) + ".ffn" + std::to_string(i % 2 + 1) + ".";
    for (auto& p : layers_[i].parameters()) out.push_back({prefix + p.name, p.tensor});
  }
  return out;
}

std::vector<NamedTensor> ToyModel::frozen_parameters() const {
  std::vector<NamedTensor> out{{"tok_emb", tok_emb_}, {"pos_emb", pos_emb_}};
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    out.push_back({p + "attn.wq", blocks_[b].wq});
    out.push_back({p + "attn.wk", blocks_[b].wk});
    out.push_back({p + "attn.wv", blocks_[b].wv});
    out.push_back({p + "attn.wo", blocks_[b].wo});
    out.push_back({p + "ffn1.base", layers_[2 * b].base().weight});
    out.push_back({p + "ffn2.base", layers_[2 * b + 1].base().weight});
  }
  out.push_back({"out_proj", out_proj_});
  return out;
}

std::size_t ToyModel::trainable_parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.trainable_parameter_count();
  return n;
}

std::size_t ToyModel::frozen_parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : frozen_parameters()) n += p.tensor.numel();
  return n;
}

// ---------------------------------------------------------------- evaluation

double population_std(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

double EvalMetrics::mean_frequency_std() const {
  if (frequency_std.empty()) return 0.0;
  return std::accumulate(frequency_std.begin(), frequency_std.end(), 0.0) /
         static_cast<double>(frequency_std.size());
}

EvalMetrics evaluate(ToyModel& model, const Dataset& data, const std::vector<Sample>& samples,
                     std::size_t batch_size) {
  EvalMetrics m;
  const std::size_t n_layers = model.layers().size();
  std::vector<std::vector<double>> mass(n_layers);
  std::vector<std::map<int, std::vector<double>>> task_mass(n_layers);
  std::vector<double> entropy_sum(n_layers, 0.0);
  std::size_t tokens = 0;
  std::map<int, std::pair<std::size_t, std::size_t>> per_task;  // correct, total
  std::map<int, std::vector<int>> outputs;
  for (const auto& spec : data.tasks) outputs[spec.task_id] = task_output_tokens(spec, data.options);

  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, samples.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Batch batch = make_batch(samples, idx);
    const ModelOutput out = model.forward(batch, false);
    const std::size_t vocab = out.logits.dim(1);
    const auto logits = out.logits.data();
    for (std::size_t s = 0; s < batch.batch; ++s) {
      const int task = batch.task_ids[s];
      const auto& legal = outputs.at(task);
      bool ok = true;
      for (std::size_t p = 0; p < batch.seq_len; ++p) {
        const std::size_t row = s * batch.seq_len + p;
        if (batch.targets[row] < 0) continue;
        int best = legal.front();
        for (int t : legal)
          if (logits[row * vocab + static_cast<std::size_t>(t)] > logits[row * vocab + static_cast<std::size_t>(best)])
            best = t;
        ok = ok && best == batch.targets[row];
      }
      auto& pt = per_task[task];
      pt.first += ok ? 1 : 0;
      pt.second += 1;
    }
    for (std::size_t l = 0; l < n_layers; ++l) {
      const RouterOutput& r = out.routing[l];
      const std::size_t n = r.num_experts();
      if (mass[l].empty()) mass[l].assign(n, 0.0);
      const auto gates = r.topk_gates.data();
      for (std::size_t row = 0; row < r.batch(); ++row) {
        auto& tm = task_mass[l][batch.task_ids[row / batch.seq_len]];
        if (tm.empty()) tm.assign(n, 0.0);
        for (std::size_t s = 0; s < r.k; ++s) {
          mass[l][r.index(row, s)] += gates[row * r.k + s];
          tm[r.index(row, s)] += gates[row * r.k + s];
        }
      }
      entropy_sum[l] += gate_entropy(r) * static_cast<double>(r.batch());
    }
    tokens += batch.batch * batch.seq_len;
  }

  std::size_t correct = 0, total = 0;
  for (const auto& [task, ct] : per_task) {
    m.task_accuracy[task] = static_cast<double>(ct.first) / static_cast<double>(ct.second);
    correct += ct.first;
    total += ct.second;
  }
  m.accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  m.dominant_experts.resize(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) {
    std::vector<double> f = mass[l];
    const double s = std::accumulate(f.begin(), f.end(), 0.0);
    for (double& v : f) v = s > 0.0 ? v / s : 0.0;
    m.frequency_std.push_back(population_std(f));
    m.frequency.push_back(std::move(f));
    m.entropy.push_back(tokens ? entropy_sum[l] / static_cast<double>(tokens) : 0.0);
    for (const auto& [task, tm] : task_mass[l])
      m.dominant_experts[l][task] =
          static_cast<std::size_t>(std::max_element(tm.begin(), tm.end()) - tm.begin());
  }
  return m;
}

}  // namespace graphmoe
