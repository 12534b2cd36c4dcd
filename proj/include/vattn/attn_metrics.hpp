#ifndef VATTN_ATTN_METRICS_HPP_
#define VATTN_ATTN_METRICS_HPP_

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vattn/patch_grid.hpp"

namespace vattn {

inline constexpr double kDefaultEpsilon = 1e-8;
inline constexpr double kDefaultEntropyFraction = 0.30;

// Last-layer attention from generated tokens (queries) to vision tokens
// (keys), stored raw per head. mass is laid out [generated][head][vision].
class AttentionTrace {
 public:
  AttentionTrace() = default;
  AttentionTrace(int head_count, int image_token_count, int layer = -1);

  // Appends one generated step. head_mass holds head_count rows of
  // image_token_count weights; row_total holds each head's mass over all
  // keys (vision and text).
  void AppendStep(std::span<const double> head_mass,
                  std::span<const double> row_total, double entropy);

  int head_count() const { return head_count_; }
  int generated_len() const { return static_cast<int>(entropies_.size()); }
  int image_token_count() const { return image_token_count_; }
  int layer() const { return layer_; }

  double mass(int g, int h, int i) const {
    return mass_[(static_cast<std::size_t>(g) * head_count_ + h) *
                     image_token_count_ +
                 i];
  }
  std::span<const double> head_row(int g, int h) const {
    return {mass_.data() + (static_cast<std::size_t>(g) * head_count_ + h) *
                               image_token_count_,
            static_cast<std::size_t>(image_token_count_)};
  }
  double row_context_mass(int g, int h) const {
    return row_total_[static_cast<std::size_t>(g) * head_count_ + h];
  }
  double entropy(int g) const { return entropies_[g]; }

  const std::vector<double>& raw_mass() const { return mass_; }
  const std::vector<double>& raw_row_context_mass() const { return row_total_; }
  const std::vector<double>& entropies() const { return entropies_; }

  // Throws dimension-error on any violated invariant.
  void Validate() const;

  bool operator==(const AttentionTrace&) const = default;

 private:
  int head_count_ = 0;
  int image_token_count_ = 0;
  int layer_ = -1;
  std::vector<double> mass_;
  std::vector<double> row_total_;
  std::vector<double> entropies_;
};

struct RewardTarget {
  TokenSet target;
  TokenSet all;
  double epsilon = kDefaultEpsilon;

  // Throws empty-target-error or dimension-error.
  void Validate() const;

  bool operator==(const RewardTarget&) const = default;
};

// Selected generated positions, ascending.
using PositionSet = std::vector<int>;

struct RewardBreakdown {
  double a_q = 0.0;
  double v_q = 0.0;
  double r_v = 0.0;
  double r_f = 0.0;
  double r_acc = 0.0;
  double r_o = 0.0;
  PositionSet selected;
};

struct RewardWeights {
  double visual = 1.0;
  double format = 1.0;
};

// Head-averaged mean mass from generated position g onto region.
double RegionAttention(const AttentionTrace& trace, const TokenSet& region,
                       int g);
inline double TargetAttention(const AttentionTrace& trace,
                              const TokenSet& target, int g) {
  return RegionAttention(trace, target, g);
}
inline double ImageAttention(const AttentionTrace& trace,
                             const TokenSet& all, int g) {
  return RegionAttention(trace, all, g);
}

// 0.5 * (1 + tanh(log((a + eps) / (v + eps)))), kept strictly in (0, 1).
double AttentionAdvantage(double a, double v, double epsilon = kDefaultEpsilon);

// Shannon entropy in nats. Throws distribution-error unless the input is
// nonnegative and sums to 1 within 1e-6.
double TokenEntropy(std::span<const double> probabilities);

// Positions holding the max(1, ceil(fraction * T)) largest entropies; ties go
// to the earlier position.
PositionSet SelectHighEntropy(std::span<const double> entropies,
                              double fraction = kDefaultEntropyFraction);

// Mean over selected positions of RegionAttention.
double GroupAttention(const AttentionTrace& trace, const PositionSet& selected,
                      const TokenSet& region);

// tanh(log((a_q + eps) / (v_q + eps))), kept strictly in (-1, 1).
double VisualReward(double a_q, double v_q, double epsilon = kDefaultEpsilon);

// Content of the single well-formed <answer>...</answer> span, trimmed.
std::optional<std::string> ExtractAnswer(std::string_view text);

// 1 when text holds exactly one non-empty answer span, else 0.
double FormatReward(std::string_view text);

double TotalReward(double r_v, double r_f, const RewardWeights& w = {});

RewardBreakdown ScoreTrace(const AttentionTrace& trace,
                           const RewardTarget& target, double fraction,
                           std::string_view answer_text,
                           const RewardWeights& weights = {});

}  // namespace vattn

#endif  // VATTN_ATTN_METRICS_HPP_
