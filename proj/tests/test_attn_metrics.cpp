#include <cmath>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "vattn/attn_metrics.hpp"
#include "vattn/error.hpp"

using namespace vattn;

namespace {

const GridId kGrid{64, 64, 16};

AttentionTrace UniformTrace(int steps, int heads, int tokens) {
  AttentionTrace t(heads, tokens);
  for (int g = 0; g < steps; ++g) {
    std::vector<double> mass(heads * tokens, 1.0 / tokens), total(heads, 1.0);
    t.AppendStep(mass, total, 1.0);
  }
  return t;
}

RewardTarget Target(std::vector<int> target, int tokens = 16) {
  std::vector<int> all(tokens);
  for (int i = 0; i < tokens; ++i) all[i] = i;
  return {TokenSet(kGrid, std::move(target)), TokenSet(kGrid, all), 1e-8};
}

}  // namespace

TEST_CASE("target and image attention") {
  const auto uni = UniformTrace(1, 3, 16);
  const auto rt = Target({0, 1, 4, 5});
  CHECK(TargetAttention(uni, rt.target, 0) == doctest::Approx(0.0625).epsilon(1e-15));
  CHECK(ImageAttention(uni, rt.all, 0) == doctest::Approx(0.0625).epsilon(1e-15));

  AttentionTrace two(2, 16);
  std::vector<double> mass(32, 0.0);
  mass[0] = 0.3;
  mass[16] = 0.1;
  two.AppendStep(mass, std::vector<double>{1.0, 1.0}, 0.0);
  CHECK(TargetAttention(two, TokenSet(kGrid, {0}), 0) == doctest::Approx(0.2));
  CHECK(TargetAttention(two, TokenSet(kGrid, {3}), 0) == 0.0);

  AttentionTrace one(1, 2);
  one.AppendStep(std::vector<double>{0.4, 0.0}, std::vector<double>{1.0}, 0.0);
  CHECK(ImageAttention(one, TokenSet(GridId{2, 1, 1}, {0, 1}), 0) ==
        doctest::Approx(0.2));

  CHECK(TargetAttention(uni, rt.all, 0) == ImageAttention(uni, rt.all, 0));
  CHECK_THROWS_AS(TargetAttention(uni, rt.target, 1), Error);
  CHECK_THROWS_AS(TargetAttention(uni, TokenSet(kGrid, {}), 0), Error);
  CHECK_THROWS_AS(TargetAttention(uni, TokenSet(kGrid, {16}), 0), Error);
}

TEST_CASE("attention advantage") {
  CHECK(AttentionAdvantage(0.3, 0.3) == 0.5);
  CHECK(AttentionAdvantage(0.0, 0.0) == 0.5);
  // eps shifts the ratio off 4 by about 1.5e-7 relative.
  CHECK(std::abs(AttentionAdvantage(0.2, 0.05, 1e-8) - 16.0 / 17.0) < 5e-8);
  CHECK(std::abs(AttentionAdvantage(0.2 + 3e-8, 0.05, 1e-8) - 16.0 / 17.0) < 1e-12);
  const double hi = AttentionAdvantage(1.0, 0.0);
  CHECK(hi < 1.0);
  CHECK(hi > 0.99);
  const double lo = AttentionAdvantage(0.0, 1.0);
  CHECK(lo > 0.0);
}

TEST_CASE("token entropy") {
  CHECK(TokenEntropy(std::vector<double>{0, 1, 0}) == 0.0);
  CHECK(TokenEntropy(std::vector<double>{.25, .25, .25, .25}) ==
        doctest::Approx(std::log(4.0)));
  CHECK(TokenEntropy(std::vector<double>{.5, .5, 0, 0}) == doctest::Approx(std::log(2.0)));
  CHECK_THROWS_AS(TokenEntropy(std::vector<double>{0.5, 0.4}), Error);
  CHECK_THROWS_AS(TokenEntropy(std::vector<double>{1.5, -0.5}), Error);
}

TEST_CASE("high-entropy selection") {
  const std::vector<double> e{0.1, 0.9, 0.5, 0.2, 0.8, 0.3, 0.7, 0.4, 0.6, 0.0};
  CHECK(SelectHighEntropy(e, 0.3) == PositionSet{1, 4, 6});
  CHECK(SelectHighEntropy(std::vector<double>{2.0}, 0.01) == PositionSet{0});
  CHECK(SelectHighEntropy(std::vector<double>(10, 1.0), 0.3) == PositionSet{0, 1, 2});
}

TEST_CASE("group attention") {
  const auto uni = UniformTrace(3, 2, 16);
  const auto rt = Target({2, 3});
  CHECK(GroupAttention(uni, {0, 1, 2}, rt.all) == doctest::Approx(0.0625));
  CHECK_THROWS_AS(GroupAttention(uni, {}, rt.all), Error);

  AttentionTrace t(1, 2);
  t.AppendStep(std::vector<double>{0.1, 0.0}, std::vector<double>{1.0}, 0.0);
  t.AppendStep(std::vector<double>{0.3, 0.0}, std::vector<double>{1.0}, 0.0);
  const TokenSet first(GridId{2, 1, 1}, {0});
  CHECK(GroupAttention(t, {0, 1}, first) == doctest::Approx(0.2));
  CHECK(GroupAttention(t, {1}, first) == TargetAttention(t, first, 1));
}

TEST_CASE("visual reward closed forms") {
  CHECK(VisualReward(0.1, 0.1) == 0.0);
  CHECK(std::abs(VisualReward(0.2, 0.05, 1e-8) - 15.0 / 17.0) < 5e-8);
  CHECK(std::abs(VisualReward(0.05, 0.2, 1e-8) + 15.0 / 17.0) < 5e-8);
  CHECK(std::abs(VisualReward(0.2 + 3e-8, 0.05, 1e-8) - 15.0 / 17.0) < 1e-12);
  CHECK(std::abs(VisualReward(0.2, 0.05, 0.0) - 15.0 / 17.0) < 1e-12);
}

TEST_CASE("format reward and answer span") {
  CHECK(FormatReward("x <answer>blue</answer>") == 1.0);
  CHECK(FormatReward("blue") == 0.0);
  CHECK(FormatReward("<answer></answer>") == 0.0);
  CHECK(FormatReward("<answer>  </answer>") == 0.0);
  CHECK(FormatReward("</answer> red <answer>") == 0.0);
  CHECK(FormatReward("<answer>a</answer><answer>b</answer>") == 0.0);
  CHECK(ExtractAnswer("<answer> red </answer>").value() == "red");
}

TEST_CASE("total reward") {
  CHECK(TotalReward(0.0, 1.0) == 1.0);
  CHECK(TotalReward(15.0 / 17.0, 1.0) == doctest::Approx(1.8823529411764706));
  CHECK(TotalReward(-15.0 / 17.0, 0.0) == doctest::Approx(-0.8823529411764706));
  CHECK(TotalReward(0.5, 1.0, {2.0, 0.5}) == 1.5);
}

TEST_CASE("score trace") {
  const auto uni = UniformTrace(5, 4, 16);
  const auto b = ScoreTrace(uni, Target({0, 1}), 0.3, "<answer>red</answer>");
  CHECK(b.r_v == 0.0);
  CHECK(b.r_f == 1.0);
  CHECK(b.r_o == b.r_v + b.r_f);
  CHECK(b.selected.size() == 2);

  // All vision mass on the target.
  AttentionTrace focused(1, 16);
  std::vector<double> mass(16, 0.0);
  mass[0] = mass[1] = 0.5;
  focused.AppendStep(mass, std::vector<double>{1.0}, 1.0);
  const auto f = ScoreTrace(focused, Target({0, 1}), 0.3, "");
  const auto o = oracle::NaiveScore(focused.raw_mass(), 1, 1, 16, {0}, {0, 1},
                                    Target({0, 1}).all.indices(), 1e-8);
  CHECK(std::abs(f.r_v - o.r_v) < 1e-12);
  CHECK(f.a_q == doctest::Approx(0.5));
  CHECK(f.v_q == doctest::Approx(1.0 / 16));

  CHECK_THROWS_AS(ScoreTrace(AttentionTrace(1, 16), Target({0}), 0.3, ""), Error);
  CHECK_THROWS_AS(ScoreTrace(uni, Target({0}), 0.0, ""), Error);
}

TEST_CASE("trace invariants") {
  AttentionTrace t(1, 2);
  t.AppendStep(std::vector<double>{0.6, 0.6}, std::vector<double>{1.0}, 0.0);
  CHECK_THROWS_AS(t.Validate(), Error);
  CHECK_THROWS_AS(t.AppendStep(std::vector<double>{0.1}, std::vector<double>{1.0}, 0.0),
                  Error);
}

TEST_CASE("property: range, antisymmetry and monotonicity") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 2000; ++i) {
    const double a = u(rng), v = u(rng);
    const double ra = AttentionAdvantage(a, v);
    const double rv = VisualReward(a, v);
    CHECK(ra > 0.0);
    CHECK(ra < 1.0);
    CHECK(rv > -1.0);
    CHECK(rv < 1.0);
    CHECK(VisualReward(a, v) == -VisualReward(v, a));
    const double a2 = a + 0.01 + 0.1 * u(rng);
    CHECK(VisualReward(a2, v + 0.05) > VisualReward(a, v + 0.05));
  }
}

TEST_CASE("property: scale invariance") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  for (int i = 0; i < 500; ++i) {
    const double a = u(rng), v = u(rng), c = 0.001 + 10 * u(rng);
    CHECK(std::abs(VisualReward(c * a, c * v, 0.0) - VisualReward(a, v, 0.0)) < 1e-12);
    CHECK(std::abs(AttentionAdvantage(c * a, c * v, 0.0) - AttentionAdvantage(a, v, 0.0)) <
          1e-12);
    CHECK(std::abs(VisualReward(c * a, c * v, 1e-8) - VisualReward(a, v, 1e-8)) < 1e-6);
  }
}

TEST_CASE("property: selection matches a full sort") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 300; ++trial) {
    const int t = 1 + static_cast<int>(rng() % 200);
    std::vector<double> e(t);
    for (auto& x : e) x = static_cast<double>(rng() % 7) * 0.5;  // many ties
    const int tenths = 1 + static_cast<int>(rng() % 10);
    const int k = std::max(1, (tenths * t + 9) / 10);
    const auto got = SelectHighEntropy(e, tenths / 10.0);
    CHECK(got == oracle::SortSelect(e, k));
  }
}

TEST_CASE("property: score trace equals the naive oracle") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const int steps = 1 + static_cast<int>(rng() % 12);
    const int heads = 1 + static_cast<int>(rng() % 4);
    const auto trace = oracle::RandomTrace(rng, steps, heads, 16);
    const auto rt = Target(oracle::RandomSubset(rng, 16));
    const auto b = ScoreTrace(trace, rt, 0.3, "");
    const int k = std::max(1, (3 * steps + 9) / 10);
    const auto o = oracle::NaiveScore(trace.raw_mass(), steps, heads, 16,
                                      oracle::SortSelect(trace.entropies(), k),
                                      rt.target.indices(), rt.all.indices(), 1e-8);
    CHECK(std::abs(b.a_q - o.a_q) < 1e-12);
    CHECK(std::abs(b.v_q - o.v_q) < 1e-12);
    CHECK(std::abs(b.r_v - o.r_v) < 1e-12);
  }
}
