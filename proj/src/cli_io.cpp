#include "vattn/cli_io.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "json.hpp"

#include "vattn/checkpoint.hpp"
#include "vattn/io_util.hpp"

namespace vattn {

using nlohmann::json;

namespace {

json GridJson(const GridId& g) {
  return json::array({g.image_width, g.image_height, g.patch_size});
}

GridId GridFromJson(const json& j) {
  if (!j.is_array() || j.size() != 3) throw Error(ErrorKind::kSchema, "bad grid");
  return GridId{j[0].get<int>(), j[1].get<int>(), j[2].get<int>()};
}

std::string Csv(double x) { return fmt::format("{}", x); }

}  // namespace

TraceRecord MakeTraceRecord(const Sample& sample, const Rollout& rollout,
                            bool correct) {
  TraceRecord r;
  r.sample_id = sample.id;
  r.correct = correct;
  r.trace = rollout.trace;
  r.target = sample.reward_target;
  r.tokens = rollout.generated;
  return r;
}

std::string TraceRecordLine(const TraceRecord& r) {
  json j;
  j["version"] = r.version;
  j["sample_id"] = r.sample_id;
  j["correct"] = r.correct;
  j["layer"] = r.trace.layer();
  j["heads"] = r.trace.head_count();
  j["image_tokens"] = r.trace.image_token_count();
  j["mass"] = r.trace.raw_mass();
  j["row_context_mass"] = r.trace.raw_row_context_mass();
  j["entropies"] = r.trace.entropies();
  j["grid"] = GridJson(r.target.all.grid());
  j["target"] = r.target.target.indices();
  j["all"] = r.target.all.indices();
  j["epsilon"] = r.target.epsilon;
  j["tokens"] = r.tokens;
  return j.dump();
}

TraceRecord ParseTraceRecordLine(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kSchema, std::string("trace line is not JSON: ") + e.what());
  }
  try {
    TraceRecord r;
    r.version = j.at("version").get<int>();
    if (r.version != kTraceVersion) {
      throw Error(ErrorKind::kVersionMismatch,
                  "trace version " + std::to_string(r.version) + " (expected " +
                      std::to_string(kTraceVersion) + ")");
    }
    r.sample_id = j.at("sample_id").get<std::uint64_t>();
    r.correct = j.at("correct").get<bool>();
    const int heads = j.at("heads").get<int>();
    const int n = j.at("image_tokens").get<int>();
    const auto mass = j.at("mass").get<std::vector<double>>();
    const auto totals = j.at("row_context_mass").get<std::vector<double>>();
    const auto entropies = j.at("entropies").get<std::vector<double>>();
    const std::size_t steps = entropies.size();
    if (heads < 1 || n < 1 || mass.size() != steps * heads * n ||
        totals.size() != steps * heads) {
      throw Error(ErrorKind::kSchema, "trace arrays have inconsistent lengths");
    }
    r.trace = AttentionTrace(heads, n, j.at("layer").get<int>());
    for (std::size_t g = 0; g < steps; ++g) {
      r.trace.AppendStep(
          std::span<const double>(mass).subspan(g * heads * n, heads * n),
          std::span<const double>(totals).subspan(g * heads, heads), entropies[g]);
    }
    r.trace.Validate();
    const GridId grid = GridFromJson(j.at("grid"));
    r.target.target = TokenSet(grid, j.at("target").get<std::vector<int>>());
    r.target.all = TokenSet(grid, j.at("all").get<std::vector<int>>());
    r.target.epsilon = j.at("epsilon").get<double>();
    r.target.Validate();
    r.tokens = j.at("tokens").get<std::vector<int>>();
    if (r.tokens.size() != steps) {
      throw Error(ErrorKind::kSchema, "token count differs from trace length");
    }
    return r;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kSchema, std::string("bad trace record: ") + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kSchema || e.kind() == ErrorKind::kVersionMismatch) throw;
    throw Error(ErrorKind::kSchema, std::string("bad trace record: ") + e.what());
  }
}

std::string SerializeTraces(const std::vector<TraceRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    out += TraceRecordLine(r);
    out += '\n';
  }
  return out;
}

std::vector<TraceRecord> DeserializeTraces(const std::string& text) {
  std::vector<TraceRecord> out;
  for (const auto& line : SplitLines(text)) out.push_back(ParseTraceRecordLine(line));
  return out;
}

void WriteTraces(const std::filesystem::path& path,
                 const std::vector<TraceRecord>& records) {
  WriteFileAtomic(path, SerializeTraces(records));
}

std::vector<TraceRecord> ReadTraces(const std::filesystem::path& path) {
  return DeserializeTraces(ReadFile(path));
}

// ---------------------------------------------------------------------------

double SampleAttentionAdvantage(const TraceRecord& record) {
  const int steps = record.trace.generated_len();
  if (steps < 1) throw Error(ErrorKind::kSchema, "trace has no generated tokens");
  double a = 0.0;
  double v = 0.0;
  for (int g = 0; g < steps; ++g) {
    a += TargetAttention(record.trace, record.target.target, g);
    v += ImageAttention(record.trace, record.target.all, g);
  }
  return AttentionAdvantage(a / steps, v / steps, record.target.epsilon);
}

double PointBiserial(std::span<const double> values, const std::vector<bool>& labels,
                     bool* degenerate) {
  if (values.size() != labels.size()) {
    throw Error(ErrorKind::kUsage, "correlation inputs differ in length");
  }
  const std::size_t n = values.size();
  if (n < 2) throw Error(ErrorKind::kUsage, "correlation needs at least two samples");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += values[i];
    my += labels[i] ? 1.0 : 0.0;
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = values[i] - mx;
    const double dy = (labels[i] ? 1.0 : 0.0) - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  const bool flat = sxx <= 0.0 || syy <= 0.0;
  if (degenerate) *degenerate = flat;
  if (flat) return 0.0;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::vector<double> NormalizeEntropies(std::span<const double> entropies) {
  std::vector<double> out(entropies.size(), 0.0);
  if (entropies.empty()) return out;
  const auto [lo, hi] = std::minmax_element(entropies.begin(), entropies.end());
  const double span = *hi - *lo;
  if (span <= 0.0) return out;
  for (std::size_t i = 0; i < entropies.size(); ++i) {
    out[i] = (entropies[i] - *lo) / span;
  }
  return out;
}

int EntropyDecile(double normalized) {
  return std::clamp(static_cast<int>(std::floor(normalized * 10.0)), 0, 9);
}

DiagnosticsSummary Diagnose(const std::vector<TraceRecord>& records) {
  DiagnosticsSummary s;
  std::vector<double> target_sum(10, 0.0), image_sum(10, 0.0);
  std::vector<std::size_t> counts(10, 0);
  for (const auto& r : records) {
    s.sample_ids.push_back(r.sample_id);
    s.attention_advantage.push_back(SampleAttentionAdvantage(r));
    s.correct.push_back(r.correct);
    const auto norm = NormalizeEntropies(r.trace.entropies());
    for (int g = 0; g < r.trace.generated_len(); ++g) {
      const int d = EntropyDecile(norm[g]);
      target_sum[d] += TargetAttention(r.trace, r.target.target, g);
      image_sum[d] += ImageAttention(r.trace, r.target.all, g);
      ++counts[d];
    }
  }
  s.correlation = PointBiserial(s.attention_advantage, s.correct,
                                &s.correlation_degenerate);
  if (s.correlation_degenerate) {
    spdlog::warn("attention advantage or correctness has zero variance; "
                 "correlation reported as 0");
  }
  s.accuracy = static_cast<double>(std::count(s.correct.begin(), s.correct.end(), true)) /
               static_cast<double>(records.size());
  for (int d = 0; d < 10; ++d) {
    DecileRow row;
    row.decile = d;
    row.token_count = counts[d];
    if (counts[d] > 0) {
      row.mean_target_attention = target_sum[d] / counts[d];
      row.mean_image_attention = image_sum[d] / counts[d];
    }
    s.deciles.push_back(row);
  }
  return s;
}

std::string DiagnosticsJson(const DiagnosticsSummary& s) {
  json samples = json::array();
  for (std::size_t i = 0; i < s.sample_ids.size(); ++i) {
    samples.push_back({{"sample_id", s.sample_ids[i]},
                       {"attention_advantage", s.attention_advantage[i]},
                       {"correct", static_cast<bool>(s.correct[i])}});
  }
  json deciles = json::array();
  for (const auto& d : s.deciles) {
    deciles.push_back({{"decile", d.decile},
                       {"tokens", d.token_count},
                       {"mean_target_attention", d.mean_target_attention},
                       {"mean_image_attention", d.mean_image_attention}});
  }
  json j = {{"accuracy", s.accuracy},
            {"correlation", s.correlation},
            {"correlation_degenerate", s.correlation_degenerate},
            {"samples", samples},
            {"entropy_deciles", deciles}};
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------

PlotKind PlotKindFromString(const std::string& name) {
  if (name == "reward-curve") return PlotKind::kRewardCurve;
  if (name == "entropy-attention") return PlotKind::kEntropyAttention;
  if (name == "tas-accuracy") return PlotKind::kTasAccuracy;
  if (name == "entropy-tokens") return PlotKind::kEntropyTokens;
  throw Error(ErrorKind::kUsage,
              "unknown plot kind '" + name +
                  "' (reward-curve, entropy-attention, tas-accuracy, entropy-tokens)");
}

std::string RewardCurveCsv(const std::vector<TrainLogEntry>& log) {
  std::string out = "step,mean_r_v,mean_r_f,kl\n";
  for (const auto& e : log) {
    out += fmt::format("{},{},{},{}\n", e.step, Csv(e.mean_r_v), Csv(e.mean_r_f),
                       Csv(e.kl));
  }
  return out;
}

std::string EntropyAttentionCsv(const DiagnosticsSummary& s) {
  std::string out = "entropy_decile,mean_target_attention,mean_image_attention\n";
  for (const auto& d : s.deciles) {
    out += fmt::format("{},{},{}\n", d.decile, Csv(d.mean_target_attention),
                       Csv(d.mean_image_attention));
  }
  return out;
}

std::string TasAccuracyCsv(const DiagnosticsSummary& s) {
  std::string out = "sample_id,attention_advantage,correct\n";
  for (std::size_t i = 0; i < s.sample_ids.size(); ++i) {
    out += fmt::format("{},{},{}\n", s.sample_ids[i], Csv(s.attention_advantage[i]),
                       s.correct[i] ? 1 : 0);
  }
  return out;
}

std::string EntropyTokensCsv(const std::vector<TraceRecord>& records) {
  std::string out =
      "sample_id,position,entropy,normalized_entropy,target_attention,image_attention\n";
  for (const auto& r : records) {
    const auto norm = NormalizeEntropies(r.trace.entropies());
    for (int g = 0; g < r.trace.generated_len(); ++g) {
      out += fmt::format("{},{},{},{},{},{}\n", r.sample_id, g,
                         Csv(r.trace.entropy(g)), Csv(norm[g]),
                         Csv(TargetAttention(r.trace, r.target.target, g)),
                         Csv(ImageAttention(r.trace, r.target.all, g)));
    }
  }
  return out;
}

std::string EvalReportJson(const EvalReport& report) {
  json rows = json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"sample_id", r.sample_id},
                    {"response", r.response},
                    {"correct", r.correct},
                    {"r_v", r.r_v},
                    {"r_f", r.r_f},
                    {"a_q", r.a_q},
                    {"v_q", r.v_q},
                    {"ratio", r.ratio}});
  }
  json j = {{"accuracy", report.accuracy},
            {"mean_r_v", report.mean_r_v},
            {"mean_ratio", report.mean_ratio},
            {"count", report.rows.size()},
            {"rows", rows}};
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------

std::vector<double> NormalizeFractions(std::vector<double> fractions) {
  for (double f : fractions) {
    if (!(f > 0.0 && f <= 1.0)) {
      throw Error(ErrorKind::kUsage, fmt::format("fraction {} outside (0, 1]", f));
    }
  }
  std::sort(fractions.begin(), fractions.end());
  const auto before = fractions.size();
  fractions.erase(std::unique(fractions.begin(), fractions.end()), fractions.end());
  if (fractions.size() != before) {
    spdlog::warn("dropped {} duplicate fraction(s)", before - fractions.size());
  }
  if (fractions.size() < 2) {
    throw Error(ErrorKind::kUsage, "ablation needs at least two distinct fractions");
  }
  return fractions;
}

std::vector<AblationRow> RunEntropyAblation(const GrpoConfig& config,
                                            const std::vector<Sample>& train,
                                            const std::vector<Sample>& eval,
                                            const std::vector<double>& fractions,
                                            const std::filesystem::path& out_dir,
                                            std::uint64_t eval_seed) {
  const auto unique = NormalizeFractions(fractions);
  std::vector<AblationRow> rows;
  for (double f : unique) {
    GrpoConfig c = config;
    c.entropy_fraction = f;
    spdlog::info("ablation: entropy_fraction={}", f);
    const auto result = Train(c, train, out_dir / fmt::format("fraction_{}", f));
    const auto report = Evaluate(result.model, eval, c, eval_seed);
    AblationRow row;
    row.fraction = f;
    row.steps = static_cast<int>(result.log.size());
    const std::size_t tail = std::min<std::size_t>(20, result.log.size());
    for (std::size_t i = result.log.size() - tail; i < result.log.size(); ++i) {
      row.train_final_r_v += result.log[i].mean_r_v / static_cast<double>(tail);
    }
    row.accuracy = report.accuracy;
    row.mean_r_v = report.mean_r_v;
    row.mean_ratio = report.mean_ratio;
    rows.push_back(row);
  }
  return rows;
}

std::string AblationCsv(const std::vector<AblationRow>& rows) {
  std::string out = "entropy_fraction,steps,train_final_r_v,accuracy,mean_r_v,mean_ratio\n";
  for (const auto& r : rows) {
    out += fmt::format("{},{},{},{},{},{}\n", Csv(r.fraction), r.steps,
                       Csv(r.train_final_r_v), Csv(r.accuracy), Csv(r.mean_r_v),
                       Csv(r.mean_ratio));
  }
  return out;
}

int ExitCodeFor(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kUsage:
    case ErrorKind::kConfig:
    case ErrorKind::kSamplingConfig:
    case ErrorKind::kGroupSize:
      return 1;
    case ErrorKind::kNumeric:
    case ErrorKind::kDistribution:
      return 3;
    default:
      return 2;
  }
}

namespace {

template <typename F>
int Guarded(const char* command, F&& body) {
  try {
    body();
    return 0;
  } catch (const Error& e) {
    spdlog::error("{}: {}", command, e.what());
    return ExitCodeFor(e.kind());
  } catch (const std::exception& e) {
    spdlog::error("{}: {}", command, e.what());
    return 2;
  }
}

std::vector<Sample> LoadDataset(const std::filesystem::path& path) {
  auto samples = ImportDataset(path);
  if (samples.empty()) {
    throw Error(ErrorKind::kSchema, "dataset is empty: " + path.string());
  }
  return samples;
}

}  // namespace

int CmdTrain(const GrpoConfig& config, const std::filesystem::path& dataset,
             const std::filesystem::path& out_dir) {
  return Guarded("train", [&] {
    config.Validate();
    const auto samples = LoadDataset(dataset);
    const auto result = Train(config, samples, out_dir, [](const TrainLogEntry& e) {
      spdlog::debug("step {} r_v {:.4f} ratio {:.3f} kl {:.3g}{}", e.step, e.mean_r_v,
                    e.mean_ratio, e.kl, e.skipped ? " (skipped)" : "");
    });
    spdlog::info("trained {} steps; checkpoint at {}", result.log.size(),
                 (out_dir / "final.ckpt").string());
  });
}

int CmdEval(const GrpoConfig& config, const std::filesystem::path& checkpoint,
            const std::filesystem::path& dataset, const std::filesystem::path& out,
            const std::optional<std::filesystem::path>& traces_out,
            std::uint64_t seed) {
  return Guarded("eval", [&] {
    config.Validate();
    const ToyModel model = LoadCheckpoint(checkpoint);
    const auto samples = LoadDataset(dataset);
    const auto report = Evaluate(model, samples, config, seed);
    WriteFileAtomic(out, EvalReportJson(report));
    if (traces_out) {
      std::vector<TraceRecord> records;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        records.push_back(
            MakeTraceRecord(samples[i], report.rollouts[i], report.rows[i].correct));
      }
      WriteTraces(*traces_out, records);
    }
    spdlog::info("accuracy {:.4f} mean_r_v {:.4f} mean_ratio {:.4f}", report.accuracy,
                 report.mean_r_v, report.mean_ratio);
  });
}

int CmdDiagnose(const std::filesystem::path& traces,
                const std::optional<std::filesystem::path>& out) {
  return Guarded("diagnose", [&] {
    const auto summary = Diagnose(ReadTraces(traces));
    const auto text = DiagnosticsJson(summary);
    if (out) {
      WriteFileAtomic(*out, text);
    } else {
      fmt::print("{}", text);
    }
  });
}

int CmdAblateEntropy(const GrpoConfig& config, const std::filesystem::path& dataset,
                     const std::filesystem::path& eval_dataset,
                     const std::vector<double>& fractions,
                     const std::filesystem::path& out_dir, std::uint64_t eval_seed) {
  return Guarded("ablate-entropy", [&] {
    config.Validate();
    NormalizeFractions(fractions);
    const auto train = LoadDataset(dataset);
    const auto eval = LoadDataset(eval_dataset);
    const auto rows = RunEntropyAblation(config, train, eval, fractions, out_dir, eval_seed);
    const auto csv = AblationCsv(rows);
    WriteFileAtomic(out_dir / "ablation.csv", csv);
    fmt::print("{}", csv);
  });
}

int CmdExportPlot(const std::filesystem::path& input, const std::string& kind,
                  const std::filesystem::path& out) {
  return Guarded("export-plot", [&] {
    std::string csv;
    switch (PlotKindFromString(kind)) {
      case PlotKind::kRewardCurve:
        csv = RewardCurveCsv(ReadTrainLog(input));
        break;
      case PlotKind::kEntropyAttention:
        csv = EntropyAttentionCsv(Diagnose(ReadTraces(input)));
        break;
      case PlotKind::kTasAccuracy:
        csv = TasAccuracyCsv(Diagnose(ReadTraces(input)));
        break;
      case PlotKind::kEntropyTokens:
        csv = EntropyTokensCsv(ReadTraces(input));
        break;
    }
    WriteFileAtomic(out, csv);
  });
}

int CmdGenData(const DatasetConfig& config, const std::filesystem::path& out,
               const std::optional<std::filesystem::path>& ppm_dir) {
  return Guarded("gen-data", [&] {
    const auto samples = GenerateDataset(config);
    ExportDataset(samples, out);
    if (ppm_dir) {
      std::filesystem::create_directories(*ppm_dir);
      for (const auto& s : samples) {
        WriteFileAtomic(*ppm_dir / fmt::format("scene_{:05}.ppm", s.id),
                        RenderPpm(s.scene));
      }
    }
    const auto degenerate =
        std::count_if(samples.begin(), samples.end(), [](const Sample& s) { return s.degenerate; });
    spdlog::info("wrote {} samples ({} degenerate) to {}", samples.size(), degenerate,
                 out.string());
  });
}

}  // namespace vattn
