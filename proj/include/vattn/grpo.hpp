#ifndef VATTN_GRPO_HPP_
#define VATTN_GRPO_HPP_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vattn/attn_metrics.hpp"
#include "vattn/model.hpp"
#include "vattn/task_forge.hpp"

namespace vattn {

enum class RewardMode { kAttention, kAccuracy, kAttentionAccuracy };

const char* ToString(RewardMode mode);
RewardMode RewardModeFromString(const std::string& name);

// Training hyperparameters. Defaults follow the reference GRPO setup; the
// model_* fields size the toy policy.
struct GrpoConfig {
  int epochs = 4;
  int per_device_batch = 64;  // rollouts per optimizer step
  int group_size = 16;
  double temperature = 1.0;
  double top_p = 0.9;
  double kl_coeff = 1e-3;
  double learning_rate = 5e-6;
  double weight_decay = 1e-2;
  double max_grad_norm = 0.8;
  std::string optimizer = "adamw";
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int max_response_len = 110;
  double entropy_fraction = kDefaultEntropyFraction;
  RewardMode reward_mode = RewardMode::kAttention;
  double epsilon = kDefaultEpsilon;
  double visual_weight = 1.0;
  double format_weight = 1.0;
  bool per_token_weights = false;  // experimental
  bool entropy_from_truncated = false;
  int capture_layer = -1;
  bool include_degenerate = false;
  int max_steps = -1;  // < 0: run all epochs
  int checkpoint_every = 0;
  int workers = 1;
  bool record_wall_clock = false;
  std::uint64_t seed = 0;

  int model_embed_dim = 32;
  int model_head_count = 4;
  int model_layer_count = 2;
  int model_mlp_dim = 64;
  int model_max_sequence_length = 0;  // 0: sized from the prompt and response
  std::uint64_t model_seed = 1;

  // Throws config-error.
  void Validate() const;

  int prompts_per_step() const;
  SamplingConfig sampling() const;
  RewardWeights weights() const { return {visual_weight, format_weight}; }
  ModelConfig model_config(int vision_tokens, int max_question_len) const;
};

// key=value lines; '#' starts a comment. Unknown keys and bad values throw
// config-error naming the key.
GrpoConfig ParseConfig(const std::string& text, GrpoConfig base = {});
GrpoConfig LoadConfig(const std::filesystem::path& path, GrpoConfig base = {});
void SetConfigValue(GrpoConfig& config, const std::string& key,
                    const std::string& value);
std::vector<std::string> ConfigKeys();
std::string FormatConfig(const GrpoConfig& config);

// (r - mean) / population std; all zeros when std < 1e-8.
// Throws group-size-error when fewer than two rewards.
std::vector<double> ComputeAdvantages(std::span<const double> rewards);

// Scales grad so its global L2 norm is at most max_norm; returns the norm
// before clipping.
double ClipGradNorm(ParameterSet& grad, double max_norm);

std::vector<RewardBreakdown> ScoreGroup(std::span<const Rollout> rollouts,
                                        const Sample& sample,
                                        const GrpoConfig& config);

// Adam with decoupled weight decay; one-row tensors (norm gains, biases) are
// not decayed.
class AdamW {
 public:
  AdamW(const ParameterSet& like, double beta1, double beta2, double eps);

  // Descends along loss_grad.
  void Step(ParameterSet& params, const ParameterSet& loss_grad, double lr,
            double weight_decay);
  std::uint64_t steps() const { return steps_; }

 private:
  ParameterSet m_, v_;
  double beta1_, beta2_, eps_;
  std::uint64_t steps_ = 0;
};

struct TrainLogEntry {
  int step = 0;
  int epoch = 0;
  double mean_r_v = 0.0;
  double mean_r_f = 0.0;
  double mean_r_acc = 0.0;
  double mean_r_o = 0.0;
  double mean_ratio = 0.0;  // (a_q + eps) / (v_q + eps)
  double kl = 0.0;          // mean per-token estimate
  double grad_norm = 0.0;   // before clipping
  double clipped_norm = 0.0;
  bool skipped = false;
  std::optional<double> wall_clock;
};

std::string TrainLogLine(const TrainLogEntry& entry);
TrainLogEntry ParseTrainLogLine(const std::string& line);
std::vector<TrainLogEntry> ReadTrainLog(const std::filesystem::path& path);

// One policy plus its frozen reference and optimizer state.
class GrpoTrainer {
 public:
  GrpoTrainer(const GrpoConfig& config, ToyModel model);

  // Samples a group per prompt, scores it, and applies one update. A
  // non-finite objective or gradient leaves the parameters untouched and
  // marks the entry skipped.
  TrainLogEntry Step(std::span<const Sample* const> prompts);

  const ToyModel& model() const { return model_; }
  const ToyModel& reference() const { return *reference_; }
  int step() const { return step_; }

 private:
  GrpoConfig config_;
  ToyModel model_;
  std::shared_ptr<const ToyModel> reference_;
  AdamW optimizer_;
  int step_ = 0;
};

struct TrainResult {
  ToyModel model;
  std::vector<TrainLogEntry> log;
};

// Runs GRPO over the dataset, writing train_log.jsonl (flushed per step),
// periodic checkpoints and final.ckpt into out_dir.
TrainResult Train(const GrpoConfig& config, const std::vector<Sample>& dataset,
                  const std::filesystem::path& out_dir,
                  const std::function<void(const TrainLogEntry&)>& on_step = {});

ToyModel InitPolicy(const GrpoConfig& config, const std::vector<Sample>& dataset);

struct EvalRow {
  std::uint64_t sample_id = 0;
  std::string response;
  bool correct = false;
  double r_v = 0.0;
  double r_f = 0.0;
  double a_q = 0.0;
  double v_q = 0.0;
  double ratio = 0.0;
};

struct EvalReport {
  double accuracy = 0.0;
  double mean_r_v = 0.0;
  double mean_ratio = 0.0;
  std::vector<EvalRow> rows;
  std::vector<Rollout> rollouts;  // parallel to rows
};

// One rollout per sample under the config's sampler, seeded per sample.
EvalReport Evaluate(const ToyModel& model, const std::vector<Sample>& samples,
                    const GrpoConfig& config, std::uint64_t seed);

// Generic parallel loop; results must not depend on scheduling.
void ParallelFor(int count, int workers, const std::function<void(int)>& body);

}  // namespace vattn

#endif  // VATTN_GRPO_HPP_
