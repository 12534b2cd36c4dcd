#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "vattn/checkpoint.hpp"
#include "vattn/error.hpp"
#include "vattn/grpo.hpp"
#include "vattn/io_util.hpp"

using namespace vattn;
namespace fs = std::filesystem;

namespace {

GrpoConfig TinyConfig() {
  GrpoConfig c;
  c.per_device_batch = 8;
  c.group_size = 4;
  c.max_response_len = 5;
  c.learning_rate = 1e-3;
  c.model_embed_dim = 16;
  c.model_head_count = 2;
  c.model_mlp_dim = 16;
  c.max_steps = 3;
  return c;
}

std::vector<Sample> TinyData(int n = 12) {
  DatasetConfig d;
  d.count = n;
  return GenerateDataset(d);
}

Rollout UniformRollout(const std::vector<int>& generated) {
  Rollout r;
  r.generated = generated;
  r.trace = AttentionTrace(2, 16);
  for (std::size_t g = 0; g < generated.size(); ++g) {
    std::vector<double> mass(32, 1.0 / 16), total(2, 1.0);
    r.trace.AppendStep(mass, total, 1.0);
  }
  return r;
}

fs::path TempDir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("vattn_test_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("advantages: worked examples") {
  const auto a = ComputeAdvantages(std::vector<double>{1, 0, 1, 0});
  CHECK(a == std::vector<double>{1, -1, 1, -1});
  CHECK(ComputeAdvantages(std::vector<double>{2, 0}) == std::vector<double>{1, -1});
  CHECK(ComputeAdvantages(std::vector<double>{0.7, 0.7, 0.7}) ==
        std::vector<double>{0, 0, 0});
  CHECK_THROWS_AS(ComputeAdvantages(std::vector<double>{1.0}), Error);
}

TEST_CASE("property: advantages are standardized") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 3.0);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> r(2 + rng() % 30);
    for (auto& x : r) x = n(rng);
    const auto a = ComputeAdvantages(r);
    const double mean = std::accumulate(a.begin(), a.end(), 0.0) / a.size();
    double var = 0.0;
    for (double x : a) var += (x - mean) * (x - mean);
    CHECK(std::abs(mean) < 1e-9);
    CHECK(std::abs(std::sqrt(var / a.size()) - 1.0) < 1e-6);
  }
}

TEST_CASE("property: clipping bounds the global norm") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  const auto like = ToyModel::Init(InitPolicy(TinyConfig(), TinyData(2)).config());
  for (int trial = 0; trial < 50; ++trial) {
    ParameterSet g = like.params().ZerosLike();
    const double scale = std::pow(10.0, static_cast<double>(trial % 6) - 3.0);
    for (auto& t : g.tensors) t.value = t.value.unaryExpr([&](double) { return scale * n(rng); });
    const double pre = std::sqrt(g.SquaredNorm());
    const double reported = ClipGradNorm(g, 0.8);
    CHECK(reported == pre);
    const double post = std::sqrt(g.SquaredNorm());
    CHECK(std::abs(post - oracle::ClippedNorm(pre, 0.8)) < 1e-9);
  }
}

TEST_CASE("config parsing") {
  const GrpoConfig d;
  CHECK(d.epochs == 4);
  CHECK(d.per_device_batch == 64);
  CHECK(d.group_size == 16);
  CHECK(d.kl_coeff == 1e-3);
  CHECK(d.learning_rate == 5e-6);
  CHECK(d.weight_decay == 1e-2);
  CHECK(d.max_grad_norm == 0.8);
  CHECK(d.max_response_len == 110);
  CHECK(d.entropy_fraction == 0.3);

  const auto c = ParseConfig("# comment\n group_size = 8\nreward_mode=attention+accuracy\n");
  CHECK(c.group_size == 8);
  CHECK(c.reward_mode == RewardMode::kAttentionAccuracy);
  CHECK(ParseConfig(FormatConfig(c)).group_size == 8);
  CHECK(FormatConfig(ParseConfig(FormatConfig(c))) == FormatConfig(c));

  try {
    ParseConfig("learning_rat=1");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("learning_rat") != std::string::npos);
  }
  CHECK_THROWS_AS(ParseConfig("group_size=two"), Error);
  CHECK_THROWS_AS(ParseConfig("group_size"), Error);
  GrpoConfig g;
  g.group_size = 1;
  CHECK_THROWS_AS(g.Validate(), Error);
  g = GrpoConfig{};
  g.entropy_fraction = 0.0;
  CHECK_THROWS_AS(g.Validate(), Error);
}

TEST_CASE("score group modes") {
  Sample s = TinyData(1)[0];
  s.answer = "red";
  const std::vector<Rollout> rs{UniformRollout({tok::kAnswerOpen, 6, tok::kAnswerClose}),
                                UniformRollout({tok::kAnswerOpen, 7, tok::kAnswerClose})};
  GrpoConfig c;
  for (const auto& b : ScoreGroup(rs, s, c)) {
    CHECK(b.r_v == 0.0);
    CHECK(b.r_f == 1.0);
    CHECK(b.r_o == 1.0);
  }
  c.reward_mode = RewardMode::kAccuracy;
  const auto acc = ScoreGroup(rs, s, c);
  CHECK(acc[0].r_acc == 1.0);
  CHECK(acc[1].r_acc == 0.0);
  CHECK(acc[1].r_o == 1.0);  // wrong answer, good format

  c.reward_mode = RewardMode::kAttentionAccuracy;
  Rollout focused = rs[0];
  focused.trace = AttentionTrace(1, 16);
  std::vector<double> mass(16, 0.0);
  for (int i : s.reward_target.target) mass[i] = 1.0 / s.reward_target.target.size();
  for (int g = 0; g < 3; ++g) focused.trace.AppendStep(mass, std::vector<double>{1.0}, 1.0);
  const auto both = ScoreGroup(std::vector<Rollout>{focused}, s, c);
  CHECK(both[0].r_o > 1.0);
  CHECK(both[0].r_o == both[0].r_v + both[0].r_f + both[0].r_acc);
}

TEST_CASE("train log round trip") {
  TrainLogEntry e;
  e.step = 3;
  e.mean_r_v = 0.1234567890123;
  e.kl = 1e-7;
  e.skipped = true;
  const auto line = TrainLogLine(e);
  CHECK(line.find("wall_clock") == std::string::npos);
  CHECK(TrainLogLine(ParseTrainLogLine(line)) == line);
  e.wall_clock = 1.5;
  CHECK(ParseTrainLogLine(TrainLogLine(e)).wall_clock.value() == 1.5);
  CHECK_THROWS_AS(ParseTrainLogLine("{\"step\":1}"), Error);
}

TEST_CASE("zero advantages without decay or KL leave parameters unchanged") {
  GrpoConfig c = TinyConfig();
  c.kl_coeff = 0.0;
  c.weight_decay = 0.0;
  c.temperature = 1e-3;  // near-greedy: identical rollouts, equal rewards
  c.top_p = 1e-6;
  const auto data = TinyData(4);
  GrpoTrainer t(c, InitPolicy(c, data));
  const auto before = t.model().Checksum();
  const std::vector<const Sample*> batch{&data[0], &data[1]};
  const auto e = t.Step(batch);
  CHECK(e.grad_norm == 0.0);
  CHECK(t.model().Checksum() == before);
  CHECK(t.reference().Checksum() == before);
}

TEST_CASE("steps update the policy and keep the reference frozen") {
  GrpoConfig c = TinyConfig();
  const auto data = TinyData(4);
  GrpoTrainer t(c, InitPolicy(c, data));
  const auto ref = t.reference().Checksum();
  const std::vector<const Sample*> batch{&data[0], &data[1]};
  for (int i = 0; i < 3; ++i) {
    const auto e = t.Step(batch);
    CHECK(e.kl >= -1e-6);
    CHECK(e.clipped_norm <= c.max_grad_norm + 1e-9);
  }
  CHECK(t.model().Checksum() != ref);
  CHECK(t.reference().Checksum() == ref);
  CHECK(t.model().update_count() == 3);
}

TEST_CASE("train: zero steps writes the initial model") {
  GrpoConfig c = TinyConfig();
  c.max_steps = 0;
  const auto data = TinyData();
  const auto dir = TempDir("zero");
  const auto res = Train(c, data, dir);
  CHECK(res.log.empty());
  CHECK(LoadCheckpoint(dir / "final.ckpt") == InitPolicy(c, data));
  fs::remove_all(dir);
}

TEST_CASE("train: deterministic and independent of worker count") {
  GrpoConfig c = TinyConfig();
  c.checkpoint_every = 2;
  const auto data = TinyData();
  const auto d1 = TempDir("det1"), d2 = TempDir("det2");
  Train(c, data, d1);
  c.workers = 3;
  Train(c, data, d2);
  CHECK(ReadFile(d1 / "train_log.jsonl") == ReadFile(d2 / "train_log.jsonl"));
  CHECK(ReadFile(d1 / "final.ckpt") == ReadFile(d2 / "final.ckpt"));
  CHECK(fs::exists(d1 / "step_2.ckpt"));
  const auto log = ReadTrainLog(d1 / "train_log.jsonl");
  REQUIRE(log.size() == 3);
  for (std::size_t i = 0; i < log.size(); ++i) CHECK(log[i].step == static_cast<int>(i));
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("train rejects an unusable dataset") {
  const auto dir = TempDir("empty");
  CHECK_THROWS_AS(Train(TinyConfig(), {}, dir), Error);
  fs::remove_all(dir);
}

TEST_CASE("evaluation is reproducible") {
  GrpoConfig c = TinyConfig();
  const auto data = TinyData(6);
  const auto m = InitPolicy(c, data);
  const auto a = Evaluate(m, data, c, 9);
  const auto b = Evaluate(m, data, c, 9);
  REQUIRE(a.rows.size() == 6);
  CHECK(a.mean_r_v == b.mean_r_v);
  CHECK(a.rows[3].response == b.rows[3].response);
  CHECK_THROWS_AS(Evaluate(m, {}, c, 9), Error);
}
