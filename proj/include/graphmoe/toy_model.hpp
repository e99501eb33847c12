#pragma once

// Frozen toy transformer whose FFN linear maps are GraphLoRA layers, plus the
// synthetic multi-task data it is trained on.

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "graphmoe/layer.hpp"

namespace graphmoe {

struct ToyTransformerConfig {
  std::size_t vocab_size = 64;
  std::size_t d_model = 32;
  std::size_t num_blocks = 2;
  std::size_t num_heads = 2;
  std::size_t ffn_hidden = 64;
  std::size_t max_seq_len = 16;

  void validate() const;
};

// ---- synthetic tasks ----

inline constexpr int kPadToken = 0;
// Task t is announced by token 1 + t; payload symbol s is token kSymbolBase + s.
inline constexpr int kSymbolBase = 8;
inline constexpr std::size_t kMaxTasks = kSymbolBase - 1;

enum class TaskRule { kCopy, kReverse, kModAdd, kParity };

struct SyntheticTaskSpec {
  int task_id = 0;
  TaskRule rule = TaskRule::kCopy;
  int modulus = 7;  // modular-add only

  std::string name() const;
};

// "copy", "reverse", "parity", "modadd<m>" (e.g. "modadd7").
SyntheticTaskSpec parse_task(const std::string& name, int task_id);

struct DataOptions {
  std::size_t payload_len = 3;  // symbols after the task token
  std::size_t alphabet = 4;     // copy / reverse symbol count
};

struct Sample {
  int task_id = 0;
  std::vector<int> input;
  std::vector<int> target;  // kPadToken marks positions without a target
};

// Target sequence for an input under a rule. Copy shifts the payload left,
// reverse mirrors it, modular-add and parity answer at the final position.
std::vector<int> make_target(const SyntheticTaskSpec& spec, const std::vector<int>& input);

// Legal answer tokens of a task (evaluation restricts the argmax to these).
std::vector<int> task_output_tokens(const SyntheticTaskSpec& spec, const DataOptions& opts);

struct Dataset {
  std::vector<SyntheticTaskSpec> tasks;
  DataOptions options;
  std::size_t seq_len = 0;
  std::vector<Sample> train;
  std::vector<Sample> val;
};

// n_per_task samples per task, split 90/10 per task.
Dataset generate_dataset(const std::vector<SyntheticTaskSpec>& tasks, std::size_t n_per_task, std::uint64_t seed,
                         const DataOptions& opts = {});

struct Batch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<int> tokens;   // [batch * seq_len]
  std::vector<int> targets;  // -1 where no loss applies
  std::vector<int> task_ids;  // per sequence
};

Batch make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices);

// ---- model ----

struct ModelOutput {
  Tensor logits;        // [(batch * seq_len) x vocab]
  Tensor loss_poisson;  // mean over GraphLoRA layers
  Tensor loss_normal;
  std::vector<RouterOutput> routing;  // per GraphLoRA layer
};

class ToyModel {
 public:
  ToyModel(const ToyTransformerConfig& cfg, const LayerOptions& layer_opts, std::uint64_t seed);

  // update_tracker marks a training forward (trackers record the batch).
  ModelOutput forward(const Batch& batch, bool update_tracker);
  // The same network with every GraphLoRA layer replaced by its frozen base.
  Tensor backbone_logits(const Batch& batch) const;

  const ToyTransformerConfig& config() const { return cfg_; }
  std::vector<GraphLoRALayer>& layers() { return layers_; }
  const std::vector<GraphLoRALayer>& layers() const { return layers_; }

  std::vector<NamedTensor> trainable_parameters() const;
  std::vector<NamedTensor> frozen_parameters() const;
  std::size_t trainable_parameter_count() const;
  std::size_t frozen_parameter_count() const;

 private:
  struct Block {
    Tensor wq, wk, wv, wo;  // [d x d]
  };

  template <class Ffn>
  Tensor run(const Batch& batch, Ffn&& ffn) const;

  ToyTransformerConfig cfg_;
  Tensor tok_emb_;   // [vocab x d]
  Tensor pos_emb_;   // [max_seq_len x d]
  std::vector<Block> blocks_;
  std::vector<GraphLoRALayer> layers_;  // two per block: d -> ffn, ffn -> d
  Tensor out_proj_;  // [vocab x d]
};

struct EvalMetrics {
  double accuracy = 0.0;
  std::map<int, double> task_accuracy;
  // Per GraphLoRA layer, over all evaluated tokens.
  std::vector<std::vector<double>> frequency;
  std::vector<double> frequency_std;
  std::vector<double> entropy;
  // dominant_experts[layer][task] = expert with the most gate mass.
  std::vector<std::map<int, std::size_t>> dominant_experts;
  double mean_frequency_std() const;
};

EvalMetrics evaluate(ToyModel& model, const Dataset& data, const std::vector<Sample>& samples,
                     std::size_t batch_size = 64);

// Population standard deviation.
double population_std(const std::vector<double>& v);

}  // namespace graphmoe
