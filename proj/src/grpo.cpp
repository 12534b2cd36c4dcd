#include "vattn/grpo.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "vattn/checkpoint.hpp"
#include "vattn/error.hpp"
#include "vattn/io_util.hpp"

namespace vattn {

using nlohmann::json;

namespace {

constexpr int kMaxQuestionLen = 4;

template <typename T>
T ParseNumber(const std::string& key, const std::string& text) {
  try {
    std::size_t used = 0;
    T value{};
    if constexpr (std::is_same_v<T, int>) {
      value = std::stoi(text, &used);
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      if (!text.empty() && text[0] == '-') throw std::invalid_argument("neg");
      value = std::stoull(text, &used);
    } else {
      value = std::stod(text, &used);
    }
    if (used != text.size()) throw std::invalid_argument("trailing");
    return value;
  } catch (const std::exception&) {
    throw Error(ErrorKind::kConfig,
                "bad value '" + text + "' for key '" + key + "'");
  }
}

bool ParseBool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw Error(ErrorKind::kConfig, "bad value '" + text + "' for key '" + key + "'");
}

std::string FormatDouble(double x) {
  std::ostringstream ss;
  ss.precision(17);
  ss << x;
  return ss.str();
}

struct Field {
  const char* name;
  std::function<void(GrpoConfig&, const std::string&)> set;
  std::function<std::string(const GrpoConfig&)> get;
};

#define VATTN_INT_FIELD(f)                                                   \
  Field {                                                                    \
    #f, [](GrpoConfig& c, const std::string& v) { c.f = ParseNumber<int>(#f, v); }, \
        [](const GrpoConfig& c) { return std::to_string(c.f); }              \
  }
#define VATTN_U64_FIELD(f)                                                   \
  Field {                                                                    \
    #f,                                                                      \
        [](GrpoConfig& c, const std::string& v) {                            \
          c.f = ParseNumber<std::uint64_t>(#f, v);                           \
        },                                                                   \
        [](const GrpoConfig& c) { return std::to_string(c.f); }              \
  }
#define VATTN_DOUBLE_FIELD(f)                                                \
  Field {                                                                    \
    #f,                                                                      \
        [](GrpoConfig& c, const std::string& v) {                            \
          c.f = ParseNumber<double>(#f, v);                                  \
        },                                                                   \
        [](const GrpoConfig& c) { return FormatDouble(c.f); }                \
  }
#define VATTN_BOOL_FIELD(f)                                                  \
  Field {                                                                    \
    #f, [](GrpoConfig& c, const std::string& v) { c.f = ParseBool(#f, v); }, \
        [](const GrpoConfig& c) { return std::string(c.f ? "true" : "false"); } \
  }

const std::vector<Field>& Fields() {
  static const std::vector<Field> fields = {
      VATTN_INT_FIELD(epochs),
      VATTN_INT_FIELD(per_device_batch),
      VATTN_INT_FIELD(group_size),
      VATTN_DOUBLE_FIELD(temperature),
      VATTN_DOUBLE_FIELD(top_p),
      VATTN_DOUBLE_FIELD(kl_coeff),
      VATTN_DOUBLE_FIELD(learning_rate),
      VATTN_DOUBLE_FIELD(weight_decay),
      VATTN_DOUBLE_FIELD(max_grad_norm),
      Field{"optimizer",
            [](GrpoConfig& c, const std::string& v) { c.optimizer = v; },
            [](const GrpoConfig& c) { return c.optimizer; }},
      VATTN_DOUBLE_FIELD(adam_beta1),
      VATTN_DOUBLE_FIELD(adam_beta2),
      VATTN_DOUBLE_FIELD(adam_eps),
      VATTN_INT_FIELD(max_response_len),
      VATTN_DOUBLE_FIELD(entropy_fraction),
      Field{"reward_mode",
            [](GrpoConfig& c, const std::string& v) {
              c.reward_mode = RewardModeFromString(v);
            },
            [](const GrpoConfig& c) { return std::string(ToString(c.reward_mode)); }},
      VATTN_DOUBLE_FIELD(epsilon),
      VATTN_DOUBLE_FIELD(visual_weight),
      VATTN_DOUBLE_FIELD(format_weight),
      VATTN_BOOL_FIELD(per_token_weights),
      VATTN_BOOL_FIELD(entropy_from_truncated),
      VATTN_INT_FIELD(capture_layer),
      VATTN_BOOL_FIELD(include_degenerate),
      VATTN_INT_FIELD(max_steps),
      VATTN_INT_FIELD(checkpoint_every),
      VATTN_INT_FIELD(workers),
      VATTN_BOOL_FIELD(record_wall_clock),
      VATTN_U64_FIELD(seed),
      VATTN_INT_FIELD(model_embed_dim),
      VATTN_INT_FIELD(model_head_count),
      VATTN_INT_FIELD(model_layer_count),
      VATTN_INT_FIELD(model_mlp_dim),
      VATTN_INT_FIELD(model_max_sequence_length),
      VATTN_U64_FIELD(model_seed),
  };
  return fields;
}

#undef VATTN_INT_FIELD
#undef VATTN_U64_FIELD
#undef VATTN_DOUBLE_FIELD
#undef VATTN_BOOL_FIELD

std::string Trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double AnswerAccuracy(const Rollout& rollout, const Sample& sample) {
  const auto answer = ExtractAnswer(rollout.AnswerText());
  return answer && *answer == sample.answer ? 1.0 : 0.0;
}

}  // namespace

// ---------------------------------------------------------------------------

const char* ToString(RewardMode mode) {
  switch (mode) {
    case RewardMode::kAttention: return "attention";
    case RewardMode::kAccuracy: return "accuracy";
    case RewardMode::kAttentionAccuracy: return "attention+accuracy";
  }
  return "attention";
}

RewardMode RewardModeFromString(const std::string& name) {
  if (name == "attention") return RewardMode::kAttention;
  if (name == "accuracy") return RewardMode::kAccuracy;
  if (name == "attention+accuracy") return RewardMode::kAttentionAccuracy;
  throw Error(ErrorKind::kConfig, "bad value '" + name + "' for key 'reward_mode'");
}

void GrpoConfig::Validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw Error(ErrorKind::kConfig, key + ": " + why);
  };
  if (epochs < 0) fail("epochs", "must be >= 0");
  if (group_size < 2) fail("group_size", "must be >= 2");
  if (per_device_batch < group_size) {
    fail("per_device_batch", "must hold at least one group");
  }
  if (!(temperature > 0.0)) fail("temperature", "must be positive");
  if (!(top_p > 0.0 && top_p <= 1.0)) fail("top_p", "must lie in (0,1]");
  if (!(kl_coeff >= 0.0)) fail("kl_coeff", "must be >= 0");
  if (!(learning_rate > 0.0)) fail("learning_rate", "must be positive");
  if (!(weight_decay >= 0.0)) fail("weight_decay", "must be >= 0");
  if (!(max_grad_norm > 0.0)) fail("max_grad_norm", "must be positive");
  if (optimizer != "adamw") fail("optimizer", "only 'adamw' is supported");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) fail("adam_beta1", "must lie in [0,1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) fail("adam_beta2", "must lie in [0,1)");
  if (!(adam_eps > 0.0)) fail("adam_eps", "must be positive");
  if (max_response_len < 1) fail("max_response_len", "must be >= 1");
  if (!(entropy_fraction > 0.0 && entropy_fraction <= 1.0)) {
    fail("entropy_fraction", "must lie in (0,1]");
  }
  if (!(epsilon > 0.0)) fail("epsilon", "must be positive");
  if (workers < 1) fail("workers", "must be >= 1");
  if (checkpoint_every < 0) fail("checkpoint_every", "must be >= 0");
}

int GrpoConfig::prompts_per_step() const {
  return std::max(1, per_device_batch / group_size);
}

SamplingConfig GrpoConfig::sampling() const {
  SamplingConfig s;
  s.temperature = temperature;
  s.top_p = top_p;
  s.max_response_len = max_response_len;
  s.entropy_from_truncated = entropy_from_truncated;
  s.capture_layer = capture_layer;
  return s;
}

ModelConfig GrpoConfig::model_config(int vision_tokens,
                                     int max_question_len) const {
  ModelConfig m;
  m.embed_dim = model_embed_dim;
  m.head_count = model_head_count;
  m.layer_count = model_layer_count;
  m.mlp_dim = model_mlp_dim;
  m.vocab_size = tok::kVocabSize;
  m.feature_dim = kFeatureDim;
  m.max_vision_tokens = vision_tokens;
  m.max_sequence_length =
      model_max_sequence_length > 0
          ? model_max_sequence_length
          : vision_tokens + std::max(max_question_len, kMaxQuestionLen) +
                max_response_len;
  m.seed = model_seed;
  m.Validate();
  return m;
}

void SetConfigValue(GrpoConfig& config, const std::string& key,
                    const std::string& value) {
  for (const auto& f : Fields()) {
    if (key == f.name) {
      f.set(config, value);
      return;
    }
  }
  throw Error(ErrorKind::kConfig, "unknown config key '" + key + "'");
}

std::vector<std::string> ConfigKeys() {
  std::vector<std::string> keys;
  for (const auto& f : Fields()) keys.emplace_back(f.name);
  return keys;
}

std::string FormatConfig(const GrpoConfig& config) {
  std::string out;
  for (const auto& f : Fields()) {
    out += f.name;
    out += '=';
    out += f.get(config);
    out += '\n';
  }
  return out;
}

GrpoConfig ParseConfig(const std::string& text, GrpoConfig base) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = Trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorKind::kConfig,
                  "line " + std::to_string(line_no) + " is not key=value");
    }
    SetConfigValue(base, Trim(line.substr(0, eq)), Trim(line.substr(eq + 1)));
  }
  return base;
}

GrpoConfig LoadConfig(const std::filesystem::path& path, GrpoConfig base) {
  return ParseConfig(ReadFile(path), std::move(base));
}

// ---------------------------------------------------------------------------

std::vector<double> ComputeAdvantages(std::span<const double> rewards) {
  if (rewards.size() < 2) {
    throw Error(ErrorKind::kGroupSize, "advantages need a group of at least 2");
  }
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double std_dev = std::sqrt(var / n);
  std::vector<double> out(rewards.size(), 0.0);
  if (std_dev < 1e-8) return out;
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    out[i] = (rewards[i] - mean) / std_dev;
  }
  return out;
}

double ClipGradNorm(ParameterSet& grad, double max_norm) {
  const double norm = std::sqrt(grad.SquaredNorm());
  if (norm > max_norm) grad.Scale(max_norm / norm);
  return norm;
}

std::vector<RewardBreakdown> ScoreGroup(std::span<const Rollout> rollouts,
                                        const Sample& sample,
                                        const GrpoConfig& config) {
  RewardTarget target = sample.reward_target;
  target.epsilon = config.epsilon;
  std::vector<RewardBreakdown> out;
  out.reserve(rollouts.size());
  for (const auto& r : rollouts) {
    RewardBreakdown b = ScoreTrace(r.trace, target, config.entropy_fraction,
                                   r.AnswerText(), config.weights());
    switch (config.reward_mode) {
      case RewardMode::kAttention:
        break;
      case RewardMode::kAccuracy:
        b.r_acc = AnswerAccuracy(r, sample);
        b.r_o = b.r_acc + config.format_weight * b.r_f;
        break;
      case RewardMode::kAttentionAccuracy:
        b.r_acc = AnswerAccuracy(r, sample);
        b.r_o = b.r_o + b.r_acc;
        break;
    }
    out.push_back(std::move(b));
  }
  return out;
}

AdamW::AdamW(const ParameterSet& like, double beta1, double beta2, double eps)
    : m_(like.ZerosLike()), v_(like.ZerosLike()),
      beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamW::Step(ParameterSet& params, const ParameterSet& loss_grad, double lr,
                 double weight_decay) {
  ++steps_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    auto& p = params.tensors[i].value;
    const auto& g = loss_grad.tensors[i].value;
    auto& m = m_.tensors[i].value;
    auto& v = v_.tensors[i].value;
    m = beta1_ * m + (1.0 - beta1_) * g;
    v = beta2_ * v + (1.0 - beta2_) * g.cwiseAbs2();
    if (weight_decay > 0.0 && p.rows() > 1) p *= 1.0 - lr * weight_decay;
    p.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps_);
  }
}

// ---------------------------------------------------------------------------

std::string TrainLogLine(const TrainLogEntry& e) {
  json j = {{"step", e.step},
            {"epoch", e.epoch},
            {"mean_r_v", e.mean_r_v},
            {"mean_r_f", e.mean_r_f},
            {"mean_r_acc", e.mean_r_acc},
            {"mean_r_o", e.mean_r_o},
            {"mean_ratio", e.mean_ratio},
            {"kl", e.kl},
            {"grad_norm", e.grad_norm},
            {"clipped_norm", e.clipped_norm},
            {"skipped", e.skipped}};
  if (e.wall_clock) j["wall_clock"] = *e.wall_clock;
  return j.dump();
}

TrainLogEntry ParseTrainLogLine(const std::string& line) {
  try {
    const json j = json::parse(line);
    TrainLogEntry e;
    e.step = j.at("step").get<int>();
    e.epoch = j.at("epoch").get<int>();
    e.mean_r_v = j.at("mean_r_v").get<double>();
    e.mean_r_f = j.at("mean_r_f").get<double>();
    e.mean_r_acc = j.at("mean_r_acc").get<double>();
    e.mean_r_o = j.at("mean_r_o").get<double>();
    e.mean_ratio = j.at("mean_ratio").get<double>();
    e.kl = j.at("kl").get<double>();
    e.grad_norm = j.at("grad_norm").get<double>();
    e.clipped_norm = j.at("clipped_norm").get<double>();
    e.skipped = j.at("skipped").get<bool>();
    if (j.contains("wall_clock")) e.wall_clock = j.at("wall_clock").get<double>();
    return e;
  } catch (const json::exception& ex) {
    throw Error(ErrorKind::kSchema, std::string("bad train log line: ") + ex.what());
  }
}

std::vector<TrainLogEntry> ReadTrainLog(const std::filesystem::path& path) {
  std::vector<TrainLogEntry> out;
  for (const auto& line : SplitLines(ReadFile(path))) {
    out.push_back(ParseTrainLogLine(line));
  }
  return out;
}

// ---------------------------------------------------------------------------

void ParallelFor(int count, int workers, const std::function<void(int)>& body) {
  if (workers <= 1 || count <= 1) {
    for (int i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  std::vector<std::jthread> pool;
  for (int w = 0; w < std::min(workers, count); ++w) {
    pool.emplace_back([&] {
      for (int i = next++; i < count; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(failure_mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  pool.clear();
  if (failure) std::rethrow_exception(failure);
}

GrpoTrainer::GrpoTrainer(const GrpoConfig& config, ToyModel model)
    : config_(config),
      model_(std::move(model)),
      reference_(CloneFrozen(model_)),
      optimizer_(model_.params(), config.adam_beta1, config.adam_beta2,
                 config.adam_eps) {
  config_.Validate();
}

TrainLogEntry GrpoTrainer::Step(std::span<const Sample* const> prompts) {
  const int group = config_.group_size;
  const int n_prompts = static_cast<int>(prompts.size());
  const int total = n_prompts * group;
  const std::uint64_t step_seed =
      MixSeed(config_.seed, static_cast<std::uint64_t>(step_) + 1);
  const SamplingConfig sampling = config_.sampling();

  std::vector<Matrix> features(n_prompts);
  for (int p = 0; p < n_prompts; ++p) features[p] = ScenePatchFeatures(prompts[p]->scene);

  // Rollouts read one frozen snapshot of the policy.
  std::vector<Rollout> rollouts(total);
  ParallelFor(total, config_.workers, [&](int k) {
    const int p = k / group;
    rollouts[k] = SampleRollout(model_, features[p], prompts[p]->question,
                                sampling, MixSeed(step_seed, k));
  });

  std::vector<RewardBreakdown> scores;
  std::vector<double> advantages;
  for (int p = 0; p < n_prompts; ++p) {
    const std::span<const Rollout> group_rollouts(rollouts.data() + p * group, group);
    auto s = ScoreGroup(group_rollouts, *prompts[p], config_);
    std::vector<double> rewards;
    for (const auto& b : s) rewards.push_back(b.r_o);
    const auto adv = ComputeAdvantages(rewards);
    scores.insert(scores.end(), s.begin(), s.end());
    advantages.insert(advantages.end(), adv.begin(), adv.end());
  }

  std::vector<TrajectoryGradient> grads(total);
  ParallelFor(total, config_.workers, [&](int k) {
    const auto& r = rollouts[k];
    const double scale = 1.0 / (static_cast<double>(r.generated.size()) * total);
    std::vector<double> weights(r.generated.size(), advantages[k] * scale);
    if (config_.per_token_weights) {
      const int p = k / group;
      for (int g : scores[k].selected) {
        const double a = TargetAttention(r.trace, prompts[p]->reward_target.target, g);
        const double v = ImageAttention(r.trace, prompts[p]->reward_target.all, g);
        weights[g] += VisualReward(a, v, config_.epsilon) * scale;
      }
    }
    grads[k] = TrajectoryLogprobGrad(model_, r, *reference_, weights,
                                     config_.kl_coeff * scale);
  });

  TrainLogEntry entry;
  entry.step = step_;
  double kl_sum = 0.0;
  std::size_t token_count = 0;
  bool finite = true;
  ParameterSet ascent = model_.params().ZerosLike();
  for (int k = 0; k < total; ++k) {
    ascent.AddScaled(grads[k].grad, 1.0);
    kl_sum += grads[k].kl;
    token_count += rollouts[k].generated.size();
    finite = finite && std::isfinite(grads[k].objective);
    entry.mean_r_v += scores[k].r_v / total;
    entry.mean_r_f += scores[k].r_f / total;
    entry.mean_r_acc += scores[k].r_acc / total;
    entry.mean_r_o += scores[k].r_o / total;
    entry.mean_ratio +=
        (scores[k].a_q + config_.epsilon) / (scores[k].v_q + config_.epsilon) / total;
  }
  entry.kl = kl_sum / static_cast<double>(token_count);
  finite = finite && ascent.AllFinite();
  ++step_;
  if (!finite) {
    entry.skipped = true;
    return entry;
  }
  ascent.Scale(-1.0);  // loss gradient
  entry.grad_norm = ClipGradNorm(ascent, config_.max_grad_norm);
  entry.clipped_norm = std::sqrt(ascent.SquaredNorm());
  optimizer_.Step(model_.mutable_params(), ascent, config_.learning_rate,
                  config_.weight_decay);
  model_.set_update_count(model_.update_count() + 1);
  return entry;
}

ToyModel InitPolicy(const GrpoConfig& config, const std::vector<Sample>& dataset) {
  int vision_tokens = 1;
  int question_len = 0;
  for (const auto& s : dataset) {
    vision_tokens = std::max(vision_tokens, s.scene.grid.token_count());
    question_len = std::max(question_len, static_cast<int>(s.question.size()));
  }
  return ToyModel::Init(config.model_config(vision_tokens, question_len));
}

TrainResult Train(const GrpoConfig& config, const std::vector<Sample>& dataset,
                  const std::filesystem::path& out_dir,
                  const std::function<void(const TrainLogEntry&)>& on_step) {
  config.Validate();
  std::vector<const Sample*> pool;
  for (const auto& s : dataset) {
    if (!s.degenerate || config.include_degenerate) pool.push_back(&s);
  }
  if (pool.empty()) {
    throw Error(ErrorKind::kSchema, "dataset has no usable samples");
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) {
    throw Error(ErrorKind::kIo, "cannot create " + out_dir.string() + ": " +
                                    ec.message());
  }
  const auto log_path = out_dir / "train_log.jsonl";
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw Error(ErrorKind::kIo, "cannot open " + log_path.string());

  GrpoTrainer trainer(config, InitPolicy(config, dataset));
  const int per_step = config.prompts_per_step();
  const int steps_per_epoch =
      (static_cast<int>(pool.size()) + per_step - 1) / per_step;
  int total_steps = config.epochs * steps_per_epoch;
  if (config.max_steps >= 0) total_steps = std::min(total_steps, config.max_steps);

  TrainResult result{trainer.model(), {}};
  const auto start = std::chrono::steady_clock::now();
  std::vector<const Sample*> order;
  for (int step = 0; step < total_steps; ++step) {
    const int epoch = step / steps_per_epoch;
    const int offset = (step % steps_per_epoch) * per_step;
    if (offset == 0) {
      order = pool;
      std::mt19937_64 rng(MixSeed(config.seed ^ 0x5eedULL, epoch));
      std::shuffle(order.begin(), order.end(), rng);
    }
    std::vector<const Sample*> batch;
    for (int i = 0; i < per_step; ++i) {
      batch.push_back(order[(offset + i) % order.size()]);
    }
    TrainLogEntry entry = trainer.Step(batch);
    entry.epoch = epoch;
    if (config.record_wall_clock) {
      entry.wall_clock = std::chrono::duration<double>(
                             std::chrono::steady_clock::now() - start)
                             .count();
    }
    log << TrainLogLine(entry) << '\n';
    log.flush();
    if (!log) throw Error(ErrorKind::kIo, "write failed for " + log_path.string());
    if (on_step) on_step(entry);
    result.log.push_back(std::move(entry));
    if (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0) {
      SaveCheckpoint(trainer.model(),
                     out_dir / ("step_" + std::to_string(step + 1) + ".ckpt"));
    }
  }
  result.model = trainer.model();
  SaveCheckpoint(result.model, out_dir / "final.ckpt");
  return result;
}

EvalReport Evaluate(const ToyModel& model, const std::vector<Sample>& samples,
                    const GrpoConfig& config, std::uint64_t seed) {
  if (samples.empty()) throw Error(ErrorKind::kSchema, "evaluation dataset is empty");
  for (const auto& s : samples) {
    if (s.scene.grid.token_count() > model.config().max_vision_tokens) {
      throw Error(ErrorKind::kVersionMismatch,
                  "sample grid has more vision tokens than the checkpoint supports");
    }
  }
  const SamplingConfig sampling = config.sampling();
  EvalReport report;
  report.rows.resize(samples.size());
  report.rollouts.resize(samples.size());
  ParallelFor(static_cast<int>(samples.size()), config.workers, [&](int i) {
    const Sample& s = samples[i];
    Rollout r = SampleRollout(model, ScenePatchFeatures(s.scene), s.question,
                              sampling, MixSeed(seed, s.id));
    RewardTarget target = s.reward_target;
    target.epsilon = config.epsilon;
    const auto text = r.AnswerText();
    const auto b = ScoreTrace(r.trace, target, config.entropy_fraction, text,
                              config.weights());
    EvalRow& row = report.rows[i];
    row.sample_id = s.id;
    row.response = text;
    row.correct = AnswerAccuracy(r, s) == 1.0;
    row.r_v = b.r_v;
    row.r_f = b.r_f;
    row.a_q = b.a_q;
    row.v_q = b.v_q;
    row.ratio = (b.a_q + config.epsilon) / (b.v_q + config.epsilon);
    report.rollouts[i] = std::move(r);
  });
  const double n = static_cast<double>(samples.size());
  for (const auto& row : report.rows) {
    report.accuracy += (row.correct ? 1.0 : 0.0) / n;
    report.mean_r_v += row.r_v / n;
    report.mean_ratio += row.ratio / n;
  }
  return report;
}

}  // namespace vattn
