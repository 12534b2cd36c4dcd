#include "vattn/attn_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "vattn/error.hpp"

namespace vattn {

namespace {

double ClampOpen(double x, double lo, double hi) {
  return std::clamp(x, std::nextafter(lo, hi), std::nextafter(hi, lo));
}

void CheckRegion(const AttentionTrace& trace, const TokenSet& region) {
  if (region.empty()) {
    throw Error(ErrorKind::kEmptyTarget, "region has no vision tokens");
  }
  if (region.indices().back() >= trace.image_token_count()) {
    throw Error(ErrorKind::kIndex,
                "region index " + std::to_string(region.indices().back()) +
                    " >= image_token_count " +
                    std::to_string(trace.image_token_count()));
  }
}

std::string_view Trim(std::string_view s) {
  const auto ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

std::size_t CountOccurrences(std::string_view text, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = text.find(needle); pos != std::string_view::npos;
       pos = text.find(needle, pos + needle.size())) {
    ++n;
  }
  return n;
}

}  // namespace

AttentionTrace::AttentionTrace(int head_count, int image_token_count, int layer)
    : head_count_(head_count),
      image_token_count_(image_token_count),
      layer_(layer) {
  if (head_count < 1 || image_token_count < 1) {
    throw Error(ErrorKind::kDimension,
                "trace needs at least one head and one vision token");
  }
}

void AttentionTrace::AppendStep(std::span<const double> head_mass,
                                std::span<const double> row_total,
                                double entropy) {
  const auto expected =
      static_cast<std::size_t>(head_count_) * image_token_count_;
  if (head_mass.size() != expected ||
      row_total.size() != static_cast<std::size_t>(head_count_)) {
    throw Error(ErrorKind::kDimension, "trace step has wrong shape");
  }
  mass_.insert(mass_.end(), head_mass.begin(), head_mass.end());
  row_total_.insert(row_total_.end(), row_total.begin(), row_total.end());
  entropies_.push_back(entropy);
}

void AttentionTrace::Validate() const {
  if (head_count_ < 1 || image_token_count_ < 1) {
    throw Error(ErrorKind::kDimension, "trace has no heads or vision tokens");
  }
  const int t_len = generated_len();
  if (mass_.size() != static_cast<std::size_t>(t_len) * head_count_ *
                          image_token_count_ ||
      row_total_.size() != static_cast<std::size_t>(t_len) * head_count_) {
    throw Error(ErrorKind::kDimension, "trace arrays are inconsistent");
  }
  for (int g = 0; g < t_len; ++g) {
    if (!(entropies_[g] >= 0.0)) {
      throw Error(ErrorKind::kDimension, "negative entropy at step " +
                                             std::to_string(g));
    }
    for (int h = 0; h < head_count_; ++h) {
      double sum = 0.0;
      for (double m : head_row(g, h)) {
        if (!(m >= 0.0)) {
          throw Error(ErrorKind::kDimension, "negative attention mass");
        }
        sum += m;
      }
      if (sum > row_context_mass(g, h) + 1e-6) {
        throw Error(ErrorKind::kDimension,
                    "vision mass exceeds row total at step " +
                        std::to_string(g));
      }
    }
  }
}

void RewardTarget::Validate() const {
  if (target.empty()) {
    throw Error(ErrorKind::kEmptyTarget, "target token set is empty");
  }
  if (!target.IsSubsetOf(all)) {
    throw Error(ErrorKind::kDimension, "target is not a subset of all");
  }
  if (!(epsilon > 0.0)) {
    throw Error(ErrorKind::kDimension, "epsilon must be positive");
  }
}

double RegionAttention(const AttentionTrace& trace, const TokenSet& region,
                       int g) {
  if (g < 0 || g >= trace.generated_len()) {
    throw Error(ErrorKind::kIndex, "generated position " + std::to_string(g) +
                                       " out of range");
  }
  CheckRegion(trace, region);
  double total = 0.0;
  for (int h = 0; h < trace.head_count(); ++h) {
    const auto row = trace.head_row(g, h);
    double head_sum = 0.0;
    for (int i : region) head_sum += row[i];
    total += head_sum / static_cast<double>(region.size());
  }
  return total / trace.head_count();
}

double AttentionAdvantage(double a, double v, double epsilon) {
  const double r = std::tanh(std::log(a + epsilon) - std::log(v + epsilon));
  return ClampOpen(0.5 * (1.0 + r), 0.0, 1.0);
}

double TokenEntropy(std::span<const double> probabilities) {
  double sum = 0.0;
  for (double p : probabilities) {
    if (!(p >= 0.0)) {
      throw Error(ErrorKind::kDistribution, "negative probability");
    }
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6) {
    throw Error(ErrorKind::kDistribution,
                "probabilities sum to " + std::to_string(sum));
  }
  double h = 0.0;
  for (double p : probabilities) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return std::max(h, 0.0);
}

PositionSet SelectHighEntropy(std::span<const double> entropies,
                              double fraction) {
  const auto t_len = entropies.size();
  if (t_len == 0) return {};
  const auto want = std::clamp<std::size_t>(
      static_cast<std::size_t>(
          std::ceil(fraction * static_cast<double>(t_len) - 1e-9)),
      1, t_len);
  PositionSet order(t_len);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int x, int y) {
    return entropies[x] > entropies[y];
  });
  order.resize(want);
  std::sort(order.begin(), order.end());
  return order;
}

double GroupAttention(const AttentionTrace& trace, const PositionSet& selected,
                      const TokenSet& region) {
  if (selected.empty()) {
    throw Error(ErrorKind::kEmptySelection, "no generated positions selected");
  }
  double total = 0.0;
  for (int g : selected) total += RegionAttention(trace, region, g);
  return total / static_cast<double>(selected.size());
}

double VisualReward(double a_q, double v_q, double epsilon) {
  return ClampOpen(std::tanh(std::log(a_q + epsilon) - std::log(v_q + epsilon)),
                   -1.0, 1.0);
}

std::optional<std::string> ExtractAnswer(std::string_view text) {
  static constexpr std::string_view kOpen = "<answer>";
  static constexpr std::string_view kClose = "</answer>";
  if (CountOccurrences(text, kOpen) != 1 ||
      CountOccurrences(text, kClose) != 1) {
    return std::nullopt;
  }
  const auto open = text.find(kOpen);
  const auto close = text.find(kClose);
  if (close < open) return std::nullopt;
  const auto body =
      Trim(text.substr(open + kOpen.size(), close - open - kOpen.size()));
  if (body.empty()) return std::nullopt;
  return std::string(body);
}

double FormatReward(std::string_view text) {
  return ExtractAnswer(text).has_value() ? 1.0 : 0.0;
}

double TotalReward(double r_v, double r_f, const RewardWeights& w) {
  return w.visual * r_v + w.format * r_f;
}

RewardBreakdown ScoreTrace(const AttentionTrace& trace,
                           const RewardTarget& target, double fraction,
                           std::string_view answer_text,
                           const RewardWeights& weights) {
  if (trace.generated_len() < 1) {
    throw Error(ErrorKind::kEmptySelection, "trace has no generated tokens");
  }
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw Error(ErrorKind::kConfig, "entropy fraction must lie in (0,1]");
  }
  target.Validate();

  RewardBreakdown out;
  out.selected = SelectHighEntropy(trace.entropies(), fraction);
  out.a_q = GroupAttention(trace, out.selected, target.target);
  out.v_q = GroupAttention(trace, out.selected, target.all);
  out.r_v = VisualReward(out.a_q, out.v_q, target.epsilon);
  out.r_f = FormatReward(answer_text);
  out.r_o = TotalReward(out.r_v, out.r_f, weights);
  return out;
}

}  // namespace vattn
