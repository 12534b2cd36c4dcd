#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "vattn/checkpoint.hpp"
#include "vattn/cli_io.hpp"
#include "vattn/io_util.hpp"

using namespace vattn;
namespace fs = std::filesystem;

namespace {

const GridId kGrid{64, 64, 16};

fs::path TempDir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("vattn_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RewardTarget Target(std::vector<int> target) {
  std::vector<int> all(16);
  for (int i = 0; i < 16; ++i) all[i] = i;
  return {TokenSet(kGrid, std::move(target)), TokenSet(kGrid, all), 1e-8};
}

// Every step puts mass `a` on each target token and `rest` spread over the
// others, so a and v have closed forms.
TraceRecord Planted(std::uint64_t id, bool correct, double a, int steps = 3) {
  TraceRecord r;
  r.sample_id = id;
  r.correct = correct;
  r.target = Target({0, 1});
  r.trace = AttentionTrace(2, 16);
  const double rest = (1.0 - 2 * a) / 14.0;
  for (int g = 0; g < steps; ++g) {
    std::vector<double> mass(32, rest), total(2, 1.0);
    mass[0] = mass[1] = mass[16] = mass[17] = a;
    r.trace.AppendStep(mass, total, 0.1 * g);
    r.tokens.push_back(6 + g);
  }
  return r;
}

GrpoConfig TinyConfig() {
  GrpoConfig c;
  c.per_device_batch = 8;
  c.group_size = 4;
  c.max_response_len = 4;
  c.learning_rate = 1e-3;
  c.model_embed_dim = 16;
  c.model_head_count = 2;
  c.model_mlp_dim = 16;
  c.max_steps = 2;
  return c;
}

}  // namespace

TEST_CASE("trace records round trip byte for byte") {
  std::mt19937_64 rng(1);
  std::vector<TraceRecord> records;
  for (int i = 0; i < 5; ++i) {
    TraceRecord r;
    r.sample_id = i;
    r.correct = i % 2;
    r.trace = oracle::RandomTrace(rng, 1 + i, 3, 16);
    r.target = Target(oracle::RandomSubset(rng, 16));
    r.tokens.assign(1 + i, 6);
    records.push_back(r);
  }
  const std::string text = SerializeTraces(records);
  const auto back = DeserializeTraces(text);
  CHECK(back == records);
  CHECK(SerializeTraces(back) == text);
}

TEST_CASE("trace schema errors") {
  const auto line = TraceRecordLine(Planted(1, true, 0.2));
  CHECK_THROWS_AS(ParseTraceRecordLine("not json"), Error);
  std::string v2 = line;
  v2.replace(v2.find("\"version\":1"), 11, "\"version\":2");
  try {
    ParseTraceRecordLine(v2);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kVersionMismatch);
  }
  std::string short_tokens = line;
  short_tokens.replace(short_tokens.find("\"tokens\":[6,7,8]"), 16, "\"tokens\":[6]");
  CHECK_THROWS_AS(ParseTraceRecordLine(short_tokens), Error);
  std::string bad_target = line;
  bad_target.replace(bad_target.find("\"target\":[0,1]"), 14, "\"target\":[]");
  CHECK_THROWS_AS(ParseTraceRecordLine(bad_target), Error);
}

TEST_CASE("diagnose reproduces planted attention advantage") {
  std::vector<TraceRecord> rs;
  for (int i = 0; i < 6; ++i) rs.push_back(Planted(i, i < 3, 0.02 + 0.03 * i));
  const auto s = Diagnose(rs);
  for (int i = 0; i < 6; ++i) {
    const double a = 0.02 + 0.03 * i;
    const double v = 1.0 / 16.0;  // every row sums to 1 over vision keys
    const double ratio = (a + 1e-8) / (v + 1e-8);
    const double expect = 0.5 * (1.0 + (ratio * ratio - 1.0) / (ratio * ratio + 1.0));
    CHECK(std::abs(s.attention_advantage[i] - expect) < 1e-12);
  }
  CHECK(s.accuracy == 0.5);
  CHECK(s.correlation < 0.0);
}

TEST_CASE("point-biserial correlation") {
  std::vector<TraceRecord> rs;
  // Two-point fixture: correct samples share one value, incorrect another.
  const double hi = 0.3, lo = 0.01;
  for (int i = 0; i < 8; ++i) rs.push_back(Planted(i, i % 2 == 0, i % 2 == 0 ? hi : lo));
  const auto s = Diagnose(rs);
  CHECK(s.correlation == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_FALSE(s.correlation_degenerate);

  std::vector<TraceRecord> flat;
  for (int i = 0; i < 4; ++i) flat.push_back(Planted(i, i % 2 == 0, 0.1));
  const auto f = Diagnose(flat);
  CHECK(f.correlation == 0.0);
  CHECK(f.correlation_degenerate);

  CHECK_THROWS_AS(Diagnose({Planted(0, true, 0.1)}), Error);
  CHECK(PointBiserial(std::vector<double>{1, 2, 3, 4}, {false, false, true, true}) ==
        doctest::Approx(0.894427191).epsilon(1e-9));
}

TEST_CASE("entropy deciles partition tokens") {
  std::mt19937_64 rng(4);
  std::vector<TraceRecord> rs;
  std::size_t total = 0;
  for (int i = 0; i < 10; ++i) {
    TraceRecord r;
    r.sample_id = i;
    r.correct = i % 3 == 0;
    r.trace = oracle::RandomTrace(rng, 1 + i, 2, 16);
    r.target = Target({2, 3});
    r.tokens.assign(1 + i, 6);
    total += 1 + i;
    rs.push_back(r);
  }
  const auto s = Diagnose(rs);
  REQUIRE(s.deciles.size() == 10);
  std::size_t counted = 0;
  for (const auto& d : s.deciles) counted += d.token_count;
  CHECK(counted == total);

  CHECK(NormalizeEntropies(std::vector<double>{2.0, 2.0}) == std::vector<double>{0, 0});
  CHECK(NormalizeEntropies(std::vector<double>{1.0, 3.0, 2.0}) ==
        std::vector<double>{0, 1, 0.5});
  CHECK(EntropyDecile(0.0) == 0);
  CHECK(EntropyDecile(0.55) == 5);
  CHECK(EntropyDecile(1.0) == 9);
}

TEST_CASE("plot exports") {
  CHECK_THROWS_AS(PlotKindFromString("histogram"), Error);
  CHECK(PlotKindFromString("reward-curve") == PlotKind::kRewardCurve);

  TrainLogEntry e;
  e.step = 0;
  e.mean_r_v = 0.25;
  const auto curve = RewardCurveCsv({e});
  CHECK(curve.rfind("step,mean_r_v,mean_r_f,kl\n", 0) == 0);
  CHECK(curve.find("0,0.25,0,0\n") != std::string::npos);

  std::vector<TraceRecord> rs{Planted(0, true, 0.2), Planted(1, false, 0.05)};
  const auto s = Diagnose(rs);
  CHECK(EntropyAttentionCsv(s).rfind(
            "entropy_decile,mean_target_attention,mean_image_attention\n", 0) == 0);
  CHECK(TasAccuracyCsv(s).rfind("sample_id,attention_advantage,correct\n", 0) == 0);
  const auto tokens = EntropyTokensCsv(rs);
  CHECK(std::count(tokens.begin(), tokens.end(), '\n') == 1 + 6);

  const auto dir = TempDir("plot");
  WriteTraces(dir / "t.jsonl", rs);
  CHECK(CmdExportPlot(dir / "t.jsonl", "tas-accuracy", dir / "o.csv") == 0);
  CHECK(ReadFile(dir / "o.csv") == TasAccuracyCsv(s));
  CHECK(CmdExportPlot(dir / "t.jsonl", "nope", dir / "x.csv") == 1);
  CHECK_FALSE(fs::exists(dir / "x.csv"));
  fs::remove_all(dir);
}

TEST_CASE("fraction lists") {
  CHECK(NormalizeFractions({0.4, 0.2, 0.3, 0.2}) == std::vector<double>{0.2, 0.3, 0.4});
  CHECK_THROWS_AS(NormalizeFractions({0.3}), Error);
  CHECK_THROWS_AS(NormalizeFractions({0.3, 0.3}), Error);
  CHECK_THROWS_AS(NormalizeFractions({0.3, 1.5}), Error);
}

TEST_CASE("exit codes") {
  CHECK(ExitCodeFor(ErrorKind::kUsage) == 1);
  CHECK(ExitCodeFor(ErrorKind::kConfig) == 1);
  CHECK(ExitCodeFor(ErrorKind::kSchema) == 2);
  CHECK(ExitCodeFor(ErrorKind::kIo) == 2);
  CHECK(ExitCodeFor(ErrorKind::kNumeric) == 3);
}

TEST_CASE("commands: train, eval, diagnose") {
  const auto dir = TempDir("cmds");
  DatasetConfig d;
  d.count = 8;
  CHECK(CmdGenData(d, dir / "data.jsonl", dir / "ppm") == 0);
  CHECK(fs::exists(dir / "ppm" / "scene_00000.ppm"));

  CHECK(CmdTrain(TinyConfig(), dir / "missing.jsonl", dir / "run") == 2);
  try {
    ImportDataset(dir / "missing.jsonl");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("dataset not found") != std::string::npos);
  }

  CHECK(CmdTrain(TinyConfig(), dir / "data.jsonl", dir / "run") == 0);
  CHECK(!ReadFile(dir / "run" / "train_log.jsonl").empty());

  const auto ckpt = dir / "run" / "final.ckpt";
  CHECK(CmdEval(TinyConfig(), ckpt, dir / "data.jsonl", dir / "r1.json",
                dir / "traces.jsonl", 5) == 0);
  CHECK(CmdEval(TinyConfig(), ckpt, dir / "data.jsonl", dir / "r2.json", std::nullopt, 5) ==
        0);
  CHECK(ReadFile(dir / "r1.json") == ReadFile(dir / "r2.json"));
  CHECK(CmdDiagnose(dir / "traces.jsonl", dir / "diag.json") == 0);

  ExportDataset({}, dir / "empty.jsonl");
  CHECK(CmdEval(TinyConfig(), ckpt, dir / "empty.jsonl", dir / "r3.json", std::nullopt, 5) ==
        2);

  // A checkpoint sized for 4 vision tokens cannot read 16-token scenes.
  ModelConfig small;
  small.max_vision_tokens = 4;
  small.max_sequence_length = 20;
  SaveCheckpoint(ToyModel::Init(small), dir / "small.ckpt");
  CHECK(CmdEval(TinyConfig(), dir / "small.ckpt", dir / "data.jsonl", dir / "r4.json",
                std::nullopt, 5) == 2);
  fs::remove_all(dir);
}

TEST_CASE("eval on whole-image targets gives zero visual reward") {
  DatasetConfig d;
  d.count = 6;
  d.allow_degenerate = true;
  auto samples = GenerateDataset(d);
  for (auto& s : samples) s.reward_target.target = s.reward_target.all;
  const GrpoConfig c = TinyConfig();
  const auto report = Evaluate(InitPolicy(c, samples), samples, c, 3);
  CHECK(std::abs(report.mean_r_v) < 1e-12);
}

TEST_CASE("ablation emits one row per distinct fraction") {
  const auto dir = TempDir("ablate");
  DatasetConfig d;
  d.count = 8;
  const auto data = GenerateDataset(d);
  const auto rows = RunEntropyAblation(TinyConfig(), data, data, {0.4, 0.2, 0.4}, dir, 1);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].fraction == 0.2);
  CHECK(rows[1].steps == 2);
  const auto csv = AblationCsv(rows);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  fs::remove_all(dir);
}
