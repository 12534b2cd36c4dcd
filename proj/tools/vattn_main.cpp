// vattn: train, evaluate and inspect the attention-reward toy pipeline.
//
//   vattn gen-data --out data.jsonl --count 200 --seed 7
//   vattn train --config smoke.cfg --data data.jsonl --out run/
//   vattn eval --checkpoint run/final.ckpt --data heldout.jsonl --out report.json
//
// Log verbosity comes from VATTN_LOG (trace, debug, info, warn, error, off).

#include <cstdlib>
#include <map>
#include <optional>
#include <string>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "vattn/cli_io.hpp"

namespace {

using vattn::GrpoConfig;

struct ConfigFlags {
  std::string path;
  std::map<std::string, std::string> values;
};

void AddConfigFlags(CLI::App* cmd, ConfigFlags& flags) {
  cmd->add_option("--config", flags.path, "key=value config file");
  for (const auto& key : vattn::ConfigKeys()) {
    cmd->add_option("--" + key, flags.values[key]);
  }
}

GrpoConfig ResolveConfig(const ConfigFlags& flags) {
  GrpoConfig config;
  if (!flags.path.empty()) config = vattn::LoadConfig(flags.path);
  for (const auto& [key, value] : flags.values) {
    if (!value.empty()) vattn::SetConfigValue(config, key, value);
  }
  return config;
}

void SetupLogging() {
  auto logger = spdlog::stderr_color_mt("vattn");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(spdlog::level::info);
  if (const char* env = std::getenv("VATTN_LOG")) {
    spdlog::set_level(spdlog::level::from_str(env));
  }
}

}  // namespace

int main(int argc, char** argv) {
  SetupLogging();
  CLI::App app{"attention-reward GRPO toy pipeline"};
  app.require_subcommand(1);

  ConfigFlags train_flags, eval_flags, ablate_flags;
  std::string data, eval_data, out, checkpoint, traces, input, kind;
  std::optional<std::string> traces_out, diag_out, ppm_dir;
  std::uint64_t eval_seed = 123;
  std::vector<double> fractions{0.2, 0.3, 0.4};
  vattn::DatasetConfig dataset;
  std::string family = "dense";

  auto* train = app.add_subcommand("train", "run GRPO and write checkpoints + log");
  AddConfigFlags(train, train_flags);
  train->add_option("--data", data, "dataset JSON-lines")->required();
  train->add_option("--out", out, "output directory")->required();

  auto* eval = app.add_subcommand("eval", "score a checkpoint on a dataset");
  AddConfigFlags(eval, eval_flags);
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--data", data)->required();
  eval->add_option("--out", out, "JSON report path")->required();
  eval->add_option("--traces", traces_out, "also write attention traces");
  eval->add_option("--eval-seed", eval_seed);

  auto* diagnose = app.add_subcommand("diagnose", "attention advantage vs. accuracy");
  diagnose->add_option("--traces", traces)->required();
  diagnose->add_option("--out", diag_out, "JSON summary path (default stdout)");

  auto* ablate = app.add_subcommand("ablate-entropy", "train + eval per entropy fraction");
  AddConfigFlags(ablate, ablate_flags);
  ablate->add_option("--data", data)->required();
  ablate->add_option("--eval-data", eval_data)->required();
  ablate->add_option("--out", out)->required();
  ablate->add_option("--fractions", fractions)->delimiter(',');
  ablate->add_option("--eval-seed", eval_seed);

  auto* plot = app.add_subcommand("export-plot", "CSV for plotting");
  plot->add_option("--input", input, "train log or trace file")->required();
  plot->add_option("--kind", kind,
                   "reward-curve | entropy-attention | tas-accuracy | entropy-tokens")
      ->required();
  plot->add_option("--out", out)->required();

  auto* gen = app.add_subcommand("gen-data", "synthesize a dataset");
  gen->add_option("--out", out)->required();
  gen->add_option("--seed", dataset.seed);
  gen->add_option("--count", dataset.count);
  gen->add_option("--family", family, "dense | chart");
  gen->add_option("--image-size", dataset.image_size);
  gen->add_option("--patch-size", dataset.patch_size);
  gen->add_option("--min-objects", dataset.min_objects);
  gen->add_option("--max-objects", dataset.max_objects);
  gen->add_option("--min-overlap", dataset.min_overlap);
  gen->add_flag("--allow-degenerate", dataset.allow_degenerate);
  gen->add_option("--ppm-dir", ppm_dir, "write one PPM per scene");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*train) {
      return vattn::CmdTrain(ResolveConfig(train_flags), data, out);
    }
    if (*eval) {
      std::optional<std::filesystem::path> t;
      if (traces_out) t = *traces_out;
      return vattn::CmdEval(ResolveConfig(eval_flags), checkpoint, data, out, t,
                            eval_seed);
    }
    if (*diagnose) {
      std::optional<std::filesystem::path> o;
      if (diag_out) o = *diag_out;
      return vattn::CmdDiagnose(traces, o);
    }
    if (*ablate) {
      return vattn::CmdAblateEntropy(ResolveConfig(ablate_flags), data, eval_data,
                                     fractions, out, eval_seed);
    }
    if (*plot) return vattn::CmdExportPlot(input, kind, out);
    if (*gen) {
      dataset.family = vattn::SceneFamilyFromString(family);
      std::optional<std::filesystem::path> p;
      if (ppm_dir) p = *ppm_dir;
      return vattn::CmdGenData(dataset, out, p);
    }
  } catch (const vattn::Error& e) {
    spdlog::error("{}", e.what());
    return vattn::ExitCodeFor(e.kind());
  }
  return 1;
}
