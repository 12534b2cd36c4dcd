#ifndef VATTN_MODEL_HPP_
#define VATTN_MODEL_HPP_

#include <Eigen/Dense>

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "vattn/attn_metrics.hpp"
#include "vattn/vocab.hpp"

namespace vattn {

using Matrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
  int embed_dim = 32;
  int head_count = 4;
  int layer_count = 2;
  int mlp_dim = 64;
  int vocab_size = tok::kVocabSize;
  int feature_dim = 9;
  int max_vision_tokens = 16;
  int max_sequence_length = 48;
  std::uint64_t seed = 1;

  // Throws config-error.
  void Validate() const;

  bool operator==(const ModelConfig&) const = default;
};

struct Tensor {
  std::string name;
  Matrix value;
};

// Ordered named tensors; doubles as the gradient container.
class ParameterSet {
 public:
  std::vector<Tensor> tensors;

  std::size_t coefficient_count() const;
  ParameterSet ZerosLike() const;
  double& coefficient(std::size_t flat_index);
  double coefficient(std::size_t flat_index) const;
  void AddScaled(const ParameterSet& other, double alpha);
  void Scale(double alpha);
  double SquaredNorm() const;
  bool AllFinite() const;
};

// Last-position output of one forward pass.
struct StepOutput {
  std::vector<double> logits;
  // Per head, softmax row over all keys of the last position in the capture
  // layer. Laid out [head][key].
  std::vector<double> attention;
  int key_count = 0;
};

// Full teacher-forced pass over a sequence.
struct SequenceOutput {
  Matrix logits;  // [position][vocab]
  // Capture-layer attention, one [query][key] matrix per head.
  std::vector<Matrix> attention;
};

class ToyModel {
 public:
  static ToyModel Init(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const ParameterSet& params() const { return params_; }
  ParameterSet& mutable_params() { return params_; }
  std::size_t parameter_count() const { return params_.coefficient_count(); }
  std::uint64_t update_count() const { return update_count_; }
  void set_update_count(std::uint64_t n) { update_count_ = n; }

  // vision is [vision token][feature]; tokens follow the vision block.
  // capture_layer < 0 selects the last layer. Throws length-error.
  SequenceOutput ForwardSequence(const Matrix& vision,
                                 std::span<const int> tokens,
                                 int capture_layer = -1) const;

  StepOutput Forward(const Matrix& vision, std::span<const int> tokens,
                     int capture_layer = -1) const;

  // Accumulates d(objective)/d(params) into grad given d(objective)/d(logits)
  // for every position of the sequence.
  void Backward(const Matrix& vision, std::span<const int> tokens,
                const Matrix& dlogits, ParameterSet& grad) const;

  // CRC-32 over the serialized parameter values.
  std::uint32_t Checksum() const;

  bool operator==(const ToyModel& other) const;

 private:
  struct Cache;
  SequenceOutput Run(const Matrix& vision, std::span<const int> tokens,
                     int capture_layer, Cache* cache) const;

  ModelConfig config_;
  ParameterSet params_;
  std::uint64_t update_count_ = 0;

  friend ToyModel ModelFromParts(const ModelConfig&, ParameterSet,
                                 std::uint64_t);
};

// Rebuilds a model from deserialized parts; throws shape-error on mismatch.
ToyModel ModelFromParts(const ModelConfig& config, ParameterSet params,
                        std::uint64_t update_count);

// Immutable snapshot used as the reference policy.
std::shared_ptr<const ToyModel> CloneFrozen(const ToyModel& model);

struct SamplingConfig {
  double temperature = 1.0;
  double top_p = 0.9;
  int max_response_len = 110;
  // Entropy of the truncated sampling distribution instead of the full one.
  bool entropy_from_truncated = false;
  int capture_layer = -1;

  void Validate() const;
};

struct Rollout {
  Matrix vision;
  std::vector<int> question;
  std::vector<int> generated;
  std::vector<double> logprobs;   // under the truncated sampling policy
  std::vector<double> entropies;  // see SamplingConfig::entropy_from_truncated
  AttentionTrace trace;
  bool terminal = false;
  double temperature = 1.0;

  // Generated text up to the end token.
  std::string AnswerText() const;
};

Rollout SampleRollout(const ToyModel& model, const Matrix& vision,
                      std::span<const int> question,
                      const SamplingConfig& sampling, std::uint64_t seed);

struct TrajectoryGradient {
  ParameterSet grad;
  double objective = 0.0;
  double kl = 0.0;           // summed per-token estimate
  double logprob_sum = 0.0;  // sum of policy log-probs of generated tokens
};

// Gradient of sum_t w_t log pi(t_t | s_t) - kl_coeff * sum_t KL_t, where
// log pi is the full temperature-scaled softmax and KL_t is the nonnegative
// estimator exp(r) - r - 1 with r = log pi_ref - log pi.
TrajectoryGradient TrajectoryLogprobGrad(const ToyModel& model,
                                         const Rollout& rollout,
                                         const ToyModel& reference,
                                         std::span<const double> weights,
                                         double kl_coeff);

// Scalar objective of TrajectoryLogprobGrad, without gradients.
double TrajectoryObjective(const ToyModel& model, const Rollout& rollout,
                           const ToyModel& reference,
                           std::span<const double> weights, double kl_coeff);

}  // namespace vattn

#endif  // VATTN_MODEL_HPP_
