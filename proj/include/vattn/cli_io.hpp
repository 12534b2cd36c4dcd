#ifndef VATTN_CLI_IO_HPP_
#define VATTN_CLI_IO_HPP_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vattn/attn_metrics.hpp"
#include "vattn/error.hpp"
#include "vattn/grpo.hpp"
#include "vattn/task_forge.hpp"

namespace vattn {

inline constexpr int kTraceVersion = 1;

struct TraceRecord {
  int version = kTraceVersion;
  std::uint64_t sample_id = 0;
  bool correct = false;
  AttentionTrace trace;
  RewardTarget target;
  std::vector<int> tokens;  // generated ids

  bool operator==(const TraceRecord&) const = default;
};

TraceRecord MakeTraceRecord(const Sample& sample, const Rollout& rollout,
                            bool correct);

// One JSON object per line. Parsing throws schema-error on malformed or
// inconsistent records and version-mismatch-error on unknown versions.
std::string TraceRecordLine(const TraceRecord& record);
TraceRecord ParseTraceRecordLine(const std::string& line);
std::string SerializeTraces(const std::vector<TraceRecord>& records);
std::vector<TraceRecord> DeserializeTraces(const std::string& text);
void WriteTraces(const std::filesystem::path& path,
                 const std::vector<TraceRecord>& records);
std::vector<TraceRecord> ReadTraces(const std::filesystem::path& path);

struct DecileRow {
  int decile = 0;
  std::size_t token_count = 0;
  double mean_target_attention = 0.0;
  double mean_image_attention = 0.0;
};

struct DiagnosticsSummary {
  std::vector<std::uint64_t> sample_ids;
  std::vector<double> attention_advantage;  // per sample, over all tokens
  std::vector<bool> correct;
  double accuracy = 0.0;
  double correlation = 0.0;
  bool correlation_degenerate = false;  // zero variance on either side
  std::vector<DecileRow> deciles;       // always 10 rows
};

// Attention advantage of a record from a and v averaged over every generated
// token.
double SampleAttentionAdvantage(const TraceRecord& record);

// Pearson correlation against a 0/1 variable. Throws usage-error when n < 2;
// returns 0 and sets *degenerate when either side has zero variance.
double PointBiserial(std::span<const double> values,
                     const std::vector<bool>& labels, bool* degenerate = nullptr);

// Per-sample min-max entropy normalization; constant entropies map to 0.
std::vector<double> NormalizeEntropies(std::span<const double> entropies);
int EntropyDecile(double normalized);

DiagnosticsSummary Diagnose(const std::vector<TraceRecord>& records);
std::string DiagnosticsJson(const DiagnosticsSummary& summary);

enum class PlotKind { kRewardCurve, kEntropyAttention, kTasAccuracy, kEntropyTokens };

// Throws usage-error for unknown names.
PlotKind PlotKindFromString(const std::string& name);

std::string RewardCurveCsv(const std::vector<TrainLogEntry>& log);
std::string EntropyAttentionCsv(const DiagnosticsSummary& summary);
std::string TasAccuracyCsv(const DiagnosticsSummary& summary);
std::string EntropyTokensCsv(const std::vector<TraceRecord>& records);

std::string EvalReportJson(const EvalReport& report);

struct AblationRow {
  double fraction = 0.0;
  int steps = 0;
  double train_final_r_v = 0.0;  // mean over the last min(20, steps) steps
  double accuracy = 0.0;
  double mean_r_v = 0.0;
  double mean_ratio = 0.0;
};

// Sorted unique fractions; warns on duplicates. Throws usage-error when fewer
// than two distinct values remain or a value lies outside (0, 1].
std::vector<double> NormalizeFractions(std::vector<double> fractions);

std::vector<AblationRow> RunEntropyAblation(const GrpoConfig& config,
                                            const std::vector<Sample>& train,
                                            const std::vector<Sample>& eval,
                                            const std::vector<double>& fractions,
                                            const std::filesystem::path& out_dir,
                                            std::uint64_t eval_seed);
std::string AblationCsv(const std::vector<AblationRow>& rows);

// 0 ok, 1 usage, 2 data, 3 numeric.
int ExitCodeFor(ErrorKind kind);

// Command bodies. Each returns a process exit code and logs the reason on
// failure.
int CmdTrain(const GrpoConfig& config, const std::filesystem::path& dataset,
             const std::filesystem::path& out_dir);
int CmdEval(const GrpoConfig& config, const std::filesystem::path& checkpoint,
            const std::filesystem::path& dataset, const std::filesystem::path& out,
            const std::optional<std::filesystem::path>& traces_out,
            std::uint64_t seed);
int CmdDiagnose(const std::filesystem::path& traces,
                const std::optional<std::filesystem::path>& out);
int CmdAblateEntropy(const GrpoConfig& config, const std::filesystem::path& dataset,
                     const std::filesystem::path& eval_dataset,
                     const std::vector<double>& fractions,
                     const std::filesystem::path& out_dir, std::uint64_t eval_seed);
int CmdExportPlot(const std::filesystem::path& input, const std::string& kind,
                  const std::filesystem::path& out);
int CmdGenData(const DatasetConfig& config, const std::filesystem::path& out,
               const std::optional<std::filesystem::path>& ppm_dir);

}  // namespace vattn

#endif  // VATTN_CLI_IO_HPP_
