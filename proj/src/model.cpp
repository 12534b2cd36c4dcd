#include "vattn/model.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "vattn/error.hpp"

namespace vattn {

namespace {

constexpr double kNormEps = 1e-5;

// Fixed tensor order: embeddings, then ten tensors per layer, then the head.
constexpr int kTokEmb = 0;
constexpr int kPosEmb = 1;
constexpr int kVisW = 2;
constexpr int kVisB = 3;
constexpr int kLayerBase = 4;
constexpr int kPerLayer = 10;
enum LayerSlot { kLn1 = 0, kWq, kWk, kWv, kWo, kLn2, kW1, kB1, kW2, kB2 };

int LayerIndex(int layer, LayerSlot slot) {
  return kLayerBase + layer * kPerLayer + slot;
}
int FinalNorm(int layers) { return kLayerBase + layers * kPerLayer; }
int HeadW(int layers) { return FinalNorm(layers) + 1; }
int HeadB(int layers) { return FinalNorm(layers) + 2; }

double Sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// y = (x / rms(x)) * gain, row-wise. Returns the normalized rows and the
// per-row inverse rms.
void RmsNormForward(const Matrix& x, const Matrix& gain, Matrix& normed,
                    Eigen::VectorXd& inv_rms, Matrix& out) {
  const auto d = static_cast<double>(x.cols());
  inv_rms.resize(x.rows());
  normed.resize(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    inv_rms(r) = 1.0 / std::sqrt(x.row(r).squaredNorm() / d + kNormEps);
    normed.row(r) = x.row(r) * inv_rms(r);
  }
  out = normed.array().rowwise() * gain.row(0).array();
}

// Back-propagates dout through RmsNormForward, accumulating into dgain and
// returning d/dx.
Matrix RmsNormBackward(const Matrix& normed, const Eigen::VectorXd& inv_rms,
                       const Matrix& gain, const Matrix& dout, Matrix& dgain) {
  dgain.row(0) += (normed.array() * dout.array()).colwise().sum().matrix();
  const Matrix dnormed = dout.array().rowwise() * gain.row(0).array();
  const auto d = static_cast<double>(normed.cols());
  Matrix dx(normed.rows(), normed.cols());
  for (Eigen::Index r = 0; r < normed.rows(); ++r) {
    const double proj = dnormed.row(r).dot(normed.row(r)) / d;
    dx.row(r) = inv_rms(r) * (dnormed.row(r) - proj * normed.row(r));
  }
  return dx;
}

Matrix Randn(int rows, int cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

std::vector<double> Softmax(std::span<const double> logits, double temperature) {
  std::vector<double> p(logits.size());
  const double hi = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp((logits[i] - hi) / temperature);
    sum += p[i];
  }
  for (double& x : p) x /= sum;
  return p;
}

std::vector<double> LogSoftmax(std::span<const double> logits,
                               double temperature) {
  std::vector<double> out(logits.size());
  const double hi = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double z : logits) sum += std::exp((z - hi) / temperature);
  const double log_norm = std::log(sum);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (logits[i] - hi) / temperature - log_norm;
  }
  return out;
}

double EntropyOf(std::span<const double> p) {
  double h = 0.0;
  for (double x : p) {
    if (x > 0.0) h -= x * std::log(x);
  }
  return std::max(h, 0.0);
}

double UniformUnit(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace

// ---------------------------------------------------------------------------

void ModelConfig::Validate() const {
  auto fail = [](const std::string& msg) {
    throw Error(ErrorKind::kConfig, msg);
  };
  if (embed_dim < 1 || head_count < 1 || layer_count < 1 || mlp_dim < 1 ||
      vocab_size < 1 || feature_dim < 1 || max_vision_tokens < 1 ||
      max_sequence_length < 1) {
    fail("all model counts must be >= 1");
  }
  if (embed_dim % head_count != 0) {
    fail("embed_dim " + std::to_string(embed_dim) +
         " not divisible by head_count " + std::to_string(head_count));
  }
  if (vocab_size < tok::kVocabSize) {
    fail("vocab_size smaller than the task vocabulary");
  }
  if (max_sequence_length <= max_vision_tokens) {
    fail("max_sequence_length must exceed max_vision_tokens");
  }
}

std::size_t ParameterSet::coefficient_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += static_cast<std::size_t>(t.value.size());
  return n;
}

ParameterSet ParameterSet::ZerosLike() const {
  ParameterSet out;
  out.tensors.reserve(tensors.size());
  for (const auto& t : tensors) {
    out.tensors.push_back({t.name, Matrix::Zero(t.value.rows(), t.value.cols())});
  }
  return out;
}

double& ParameterSet::coefficient(std::size_t flat_index) {
  for (auto& t : tensors) {
    const auto n = static_cast<std::size_t>(t.value.size());
    if (flat_index < n) return t.value.data()[flat_index];
    flat_index -= n;
  }
  throw Error(ErrorKind::kIndex, "parameter index out of range");
}

double ParameterSet::coefficient(std::size_t flat_index) const {
  return const_cast<ParameterSet*>(this)->coefficient(flat_index);
}

void ParameterSet::AddScaled(const ParameterSet& other, double alpha) {
  if (other.tensors.size() != tensors.size()) {
    throw Error(ErrorKind::kShape, "parameter sets differ in tensor count");
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    tensors[i].value += alpha * other.tensors[i].value;
  }
}

void ParameterSet::Scale(double alpha) {
  for (auto& t : tensors) t.value *= alpha;
}

double ParameterSet::SquaredNorm() const {
  double s = 0.0;
  for (const auto& t : tensors) s += t.value.squaredNorm();
  return s;
}

bool ParameterSet::AllFinite() const {
  return std::all_of(tensors.begin(), tensors.end(),
                     [](const Tensor& t) { return t.value.allFinite(); });
}

// ---------------------------------------------------------------------------

constexpr double kQueryKeyGain = 2.0;

ToyModel ToyModel::Init(const ModelConfig& config) {
  config.Validate();
  ToyModel model;
  model.config_ = config;
  std::mt19937_64 rng(config.seed);
  const int d = config.embed_dim;
  const int m = config.mlp_dim;
  const int v = config.vocab_size;
  const double proj = 1.0 / std::sqrt(static_cast<double>(d));
  auto& ts = model.params_.tensors;

  ts.push_back({"tok_emb", Randn(v, d, 1.0, rng)});
  ts.push_back({"pos_emb", Randn(config.max_sequence_length, d, 0.2, rng)});
  ts.push_back({"vis_w", Randn(d, config.feature_dim, 1.0, rng)});
  ts.push_back({"vis_b", Matrix::Zero(1, d)});
  // Grounded start: a patch's color/shape channels embed like the matching
  // attribute words, and queries and keys share one projection, so a word
  // attends to patches showing it before any training.
  if (config.vocab_size == tok::kVocabSize &&
      config.feature_dim == kColorCount + kShapeCount + 1) {
    Matrix& vis_w = ts[2].value;
    const Matrix& tok_emb = ts[0].value;
    for (int c = 0; c < kColorCount; ++c) {
      vis_w.col(c) = tok_emb.row(tok::kColorBase + c).transpose();
    }
    for (int s = 0; s < kShapeCount; ++s) {
      vis_w.col(kColorCount + s) = tok_emb.row(tok::kShapeBase + s).transpose();
    }
  }
  for (int l = 0; l < config.layer_count; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    ts.push_back({p + "ln1", Matrix::Ones(1, d)});
    Matrix wq = Randn(d, d, kQueryKeyGain * proj, rng);
    ts.push_back({p + "wq", wq});
    ts.push_back({p + "wk", std::move(wq)});
    ts.push_back({p + "wv", Randn(d, d, proj, rng)});
    ts.push_back({p + "wo", Randn(d, d, proj, rng)});
    ts.push_back({p + "ln2", Matrix::Ones(1, d)});
    ts.push_back({p + "w1", Randn(m, d, proj, rng)});
    ts.push_back({p + "b1", Matrix::Zero(1, m)});
    ts.push_back({p + "w2", Randn(d, m, 1.0 / std::sqrt(static_cast<double>(m)), rng)});
    ts.push_back({p + "b2", Matrix::Zero(1, d)});
  }
  ts.push_back({"lnf", Matrix::Ones(1, d)});
  ts.push_back({"head_w", Randn(v, d, proj, rng)});
  ts.push_back({"head_b", Matrix::Zero(1, v)});
  return model;
}

ToyModel ModelFromParts(const ModelConfig& config, ParameterSet params,
                        std::uint64_t update_count) {
  const ToyModel reference = ToyModel::Init(config);
  const auto& want = reference.params().tensors;
  if (params.tensors.size() != want.size()) {
    throw Error(ErrorKind::kShape, "checkpoint tensor count does not match config");
  }
  for (std::size_t i = 0; i < want.size(); ++i) {
    const auto& got = params.tensors[i];
    if (got.name != want[i].name || got.value.rows() != want[i].value.rows() ||
        got.value.cols() != want[i].value.cols()) {
      throw Error(ErrorKind::kShape, "tensor '" + got.name +
                                         "' does not match expected '" +
                                         want[i].name + "'");
    }
  }
  ToyModel model;
  model.config_ = config;
  model.params_ = std::move(params);
  model.update_count_ = update_count;
  return model;
}

std::shared_ptr<const ToyModel> CloneFrozen(const ToyModel& model) {
  return std::make_shared<const ToyModel>(model);
}

bool ToyModel::operator==(const ToyModel& other) const {
  if (!(config_ == other.config_) || update_count_ != other.update_count_ ||
      params_.tensors.size() != other.params_.tensors.size()) {
    return false;
  }
  for (std::size_t i = 0; i < params_.tensors.size(); ++i) {
    if (params_.tensors[i].name != other.params_.tensors[i].name ||
        params_.tensors[i].value != other.params_.tensors[i].value) {
      return false;
    }
  }
  return true;
}

std::uint32_t ToyModel::Checksum() const {
  uLong crc = crc32(0L, Z_NULL, 0);
  for (const auto& t : params_.tensors) {
    crc = crc32(crc, reinterpret_cast<const Bytef*>(t.value.data()),
                static_cast<uInt>(t.value.size() * sizeof(double)));
  }
  return static_cast<std::uint32_t>(crc);
}

// ---------------------------------------------------------------------------

struct ToyModel::Cache {
  struct Layer {
    Matrix x_in, xn1, h1, q, k, v, o, x_mid, xn2, h2, u, z;
    Eigen::VectorXd s1, s2;
    std::vector<Matrix> probs;  // per head [query][key]
  };
  Matrix x0;
  std::vector<Layer> layers;
  Matrix xnf, hf;
  Eigen::VectorXd sf;
};

SequenceOutput ToyModel::Run(const Matrix& vision, std::span<const int> tokens,
                             int capture_layer, Cache* cache) const {
  const auto& c = config_;
  const auto& ts = params_.tensors;
  const int nv = static_cast<int>(vision.rows());
  const int n = nv + static_cast<int>(tokens.size());
  if (nv < 1 || nv > c.max_vision_tokens) {
    throw Error(ErrorKind::kLength, "vision token count " + std::to_string(nv) +
                                        " outside [1, max_vision_tokens]");
  }
  if (vision.cols() != c.feature_dim) {
    throw Error(ErrorKind::kShape, "vision feature width mismatch");
  }
  if (n > c.max_sequence_length) {
    throw Error(ErrorKind::kLength, "sequence length " + std::to_string(n) +
                                        " exceeds max_sequence_length");
  }
  const int layers = c.layer_count;
  if (capture_layer < 0) capture_layer = layers - 1;
  if (capture_layer >= layers) {
    throw Error(ErrorKind::kIndex, "capture layer out of range");
  }
  const int d = c.embed_dim;
  const int heads = c.head_count;
  const int dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix x(n, d);
  x.topRows(nv) = vision * ts[kVisW].value.transpose();
  x.topRows(nv).rowwise() += ts[kVisB].value.row(0);
  for (int i = 0; i < static_cast<int>(tokens.size()); ++i) {
    const int t = tokens[i];
    if (t < 0 || t >= c.vocab_size) {
      throw Error(ErrorKind::kShape, "token id " + std::to_string(t) +
                                         " outside vocabulary");
    }
    x.row(nv + i) = ts[kTokEmb].value.row(t);
  }
  x += ts[kPosEmb].value.topRows(n);

  SequenceOutput out;
  if (cache) {
    cache->x0 = x;
    cache->layers.assign(layers, {});
  }

  for (int l = 0; l < layers; ++l) {
    Cache::Layer local;
    Cache::Layer& lc = cache ? cache->layers[l] : local;
    lc.x_in = x;
    RmsNormForward(x, ts[LayerIndex(l, kLn1)].value, lc.xn1, lc.s1, lc.h1);
    lc.q = lc.h1 * ts[LayerIndex(l, kWq)].value.transpose();
    lc.k = lc.h1 * ts[LayerIndex(l, kWk)].value.transpose();
    lc.v = lc.h1 * ts[LayerIndex(l, kWv)].value.transpose();
    lc.o.resize(n, d);
    lc.probs.assign(heads, Matrix());
    for (int h = 0; h < heads; ++h) {
      const auto qh = lc.q.middleCols(h * dh, dh);
      const auto kh = lc.k.middleCols(h * dh, dh);
      Matrix p = (qh * kh.transpose()) * scale;
      for (int r = 0; r < n; ++r) {
        const double hi = p.row(r).head(r + 1).maxCoeff();
        double sum = 0.0;
        for (int j = 0; j <= r; ++j) {
          p(r, j) = std::exp(p(r, j) - hi);
          sum += p(r, j);
        }
        for (int j = 0; j <= r; ++j) p(r, j) /= sum;
        for (int j = r + 1; j < n; ++j) p(r, j) = 0.0;
      }
      lc.o.middleCols(h * dh, dh) = p * lc.v.middleCols(h * dh, dh);
      lc.probs[h] = std::move(p);
    }
    lc.x_mid = x + lc.o * ts[LayerIndex(l, kWo)].value.transpose();
    RmsNormForward(lc.x_mid, ts[LayerIndex(l, kLn2)].value, lc.xn2, lc.s2,
                   lc.h2);
    lc.u = lc.h2 * ts[LayerIndex(l, kW1)].value.transpose();
    lc.u.rowwise() += ts[LayerIndex(l, kB1)].value.row(0);
    lc.z = lc.u.unaryExpr([](double u) { return u * Sigmoid(u); });
    x = lc.x_mid + lc.z * ts[LayerIndex(l, kW2)].value.transpose();
    x.rowwise() += ts[LayerIndex(l, kB2)].value.row(0);
    if (l == capture_layer) out.attention = lc.probs;
  }

  Matrix xnf, hf;
  Eigen::VectorXd sf;
  RmsNormForward(x, ts[FinalNorm(layers)].value, xnf, sf, hf);
  out.logits = hf * ts[HeadW(layers)].value.transpose();
  out.logits.rowwise() += ts[HeadB(layers)].value.row(0);
  if (cache) {
    cache->xnf = std::move(xnf);
    cache->hf = std::move(hf);
    cache->sf = std::move(sf);
  }
  return out;
}

SequenceOutput ToyModel::ForwardSequence(const Matrix& vision,
                                         std::span<const int> tokens,
                                         int capture_layer) const {
  return Run(vision, tokens, capture_layer, nullptr);
}

StepOutput ToyModel::Forward(const Matrix& vision, std::span<const int> tokens,
                             int capture_layer) const {
  if (static_cast<int>(vision.rows() + tokens.size()) >=
      config_.max_sequence_length) {
    throw Error(ErrorKind::kLength, "prefix leaves no room for a next token");
  }
  SequenceOutput seq = ForwardSequence(vision, tokens, capture_layer);
  const auto last = seq.logits.rows() - 1;
  StepOutput out;
  out.logits.assign(seq.logits.row(last).data(),
                    seq.logits.row(last).data() + seq.logits.cols());
  out.key_count = static_cast<int>(seq.logits.rows());
  out.attention.reserve(seq.attention.size() * out.key_count);
  for (const auto& p : seq.attention) {
    out.attention.insert(out.attention.end(), p.row(last).data(),
                         p.row(last).data() + out.key_count);
  }
  return out;
}

void ToyModel::Backward(const Matrix& vision, std::span<const int> tokens,
                        const Matrix& dlogits, ParameterSet& grad) const {
  Cache cache;
  Run(vision, tokens, -1, &cache);
  const auto& c = config_;
  const auto& ts = params_.tensors;
  auto& gs = grad.tensors;
  if (gs.size() != ts.size()) {
    throw Error(ErrorKind::kShape, "gradient container does not match model");
  }
  const int layers = c.layer_count;
  const int nv = static_cast<int>(vision.rows());
  const int n = static_cast<int>(cache.x0.rows());
  const int d = c.embed_dim;
  const int heads = c.head_count;
  const int dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  if (dlogits.rows() != n || dlogits.cols() != c.vocab_size) {
    throw Error(ErrorKind::kShape, "logit gradient has wrong shape");
  }

  gs[HeadW(layers)].value += dlogits.transpose() * cache.hf;
  gs[HeadB(layers)].value.row(0) += dlogits.colwise().sum();
  const Matrix dhf = dlogits * ts[HeadW(layers)].value;
  Matrix dx = RmsNormBackward(cache.xnf, cache.sf, ts[FinalNorm(layers)].value,
                              dhf, gs[FinalNorm(layers)].value);

  for (int l = layers - 1; l >= 0; --l) {
    const auto& lc = cache.layers[l];
    // MLP block.
    gs[LayerIndex(l, kW2)].value += dx.transpose() * lc.z;
    gs[LayerIndex(l, kB2)].value.row(0) += dx.colwise().sum();
    const Matrix dz = dx * ts[LayerIndex(l, kW2)].value;
    const Matrix du = dz.binaryExpr(lc.u, [](double g, double u) {
      const double s = Sigmoid(u);
      return g * s * (1.0 + u * (1.0 - s));
    });
    gs[LayerIndex(l, kW1)].value += du.transpose() * lc.h2;
    gs[LayerIndex(l, kB1)].value.row(0) += du.colwise().sum();
    const Matrix dh2 = du * ts[LayerIndex(l, kW1)].value;
    Matrix dx_mid = dx + RmsNormBackward(lc.xn2, lc.s2,
                                         ts[LayerIndex(l, kLn2)].value, dh2,
                                         gs[LayerIndex(l, kLn2)].value);
    // Attention block.
    gs[LayerIndex(l, kWo)].value += dx_mid.transpose() * lc.o;
    const Matrix d_o = dx_mid * ts[LayerIndex(l, kWo)].value;
    Matrix dq(n, d), dk(n, d), dv(n, d);
    for (int h = 0; h < heads; ++h) {
      const Matrix& p = lc.probs[h];
      const auto doh = d_o.middleCols(h * dh, dh);
      const Matrix dp = doh * lc.v.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh) = p.transpose() * doh;
      Matrix ds = p.cwiseProduct(dp);
      const Eigen::VectorXd row_dot = ds.rowwise().sum();
      ds -= p.cwiseProduct(row_dot.replicate(1, n));
      ds *= scale;
      dq.middleCols(h * dh, dh) = ds * lc.k.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh) = ds.transpose() * lc.q.middleCols(h * dh, dh);
    }
    gs[LayerIndex(l, kWq)].value += dq.transpose() * lc.h1;
    gs[LayerIndex(l, kWk)].value += dk.transpose() * lc.h1;
    gs[LayerIndex(l, kWv)].value += dv.transpose() * lc.h1;
    const Matrix dh1 = dq * ts[LayerIndex(l, kWq)].value +
                       dk * ts[LayerIndex(l, kWk)].value +
                       dv * ts[LayerIndex(l, kWv)].value;
    dx = dx_mid + RmsNormBackward(lc.xn1, lc.s1, ts[LayerIndex(l, kLn1)].value,
                                  dh1, gs[LayerIndex(l, kLn1)].value);
  }

  gs[kPosEmb].value.topRows(n) += dx;
  gs[kVisW].value += dx.topRows(nv).transpose() * vision;
  gs[kVisB].value.row(0) += dx.topRows(nv).colwise().sum();
  for (int i = 0; i < static_cast<int>(tokens.size()); ++i) {
    gs[kTokEmb].value.row(tokens[i]) += dx.row(nv + i);
  }
}

// ---------------------------------------------------------------------------

void SamplingConfig::Validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw Error(ErrorKind::kSamplingConfig, "temperature must be positive");
  }
  if (!(top_p > 0.0 && top_p <= 1.0)) {
    throw Error(ErrorKind::kSamplingConfig, "top_p must lie in (0,1]");
  }
  if (max_response_len < 1) {
    throw Error(ErrorKind::kSamplingConfig, "max_response_len must be >= 1");
  }
}

std::string Rollout::AnswerText() const { return RenderTokens(generated); }

Rollout SampleRollout(const ToyModel& model, const Matrix& vision,
                      std::span<const int> question,
                      const SamplingConfig& sampling, std::uint64_t seed) {
  sampling.Validate();
  const auto& cfg = model.config();
  const int nv = static_cast<int>(vision.rows());
  if (nv + static_cast<int>(question.size()) + sampling.max_response_len >
      cfg.max_sequence_length) {
    throw Error(ErrorKind::kLength,
                "prompt plus max_response_len exceeds max_sequence_length");
  }
  const int capture = sampling.capture_layer < 0 ? cfg.layer_count - 1
                                                 : sampling.capture_layer;
  Rollout r;
  r.vision = vision;
  r.question.assign(question.begin(), question.end());
  r.temperature = sampling.temperature;
  r.trace = AttentionTrace(cfg.head_count, nv, capture);
  std::mt19937_64 rng(seed);

  std::vector<int> prefix = r.question;
  std::vector<double> head_mass(static_cast<std::size_t>(cfg.head_count) * nv);
  std::vector<double> row_total(cfg.head_count);
  for (int step = 0; step < sampling.max_response_len; ++step) {
    const StepOutput out = model.Forward(vision, prefix, capture);
    const std::vector<double> probs = Softmax(out.logits, sampling.temperature);

    // Nucleus truncation: smallest high-probability prefix reaching top_p.
    std::vector<int> order(probs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return probs[a] > probs[b]; });
    std::vector<double> kept(probs.size(), 0.0);
    double mass = 0.0;
    for (int t : order) {
      kept[t] = probs[t];
      mass += probs[t];
      if (mass >= sampling.top_p) break;
    }
    for (double& p : kept) p /= mass;

    const double u = UniformUnit(rng);
    double acc = 0.0;
    int chosen = order.front();
    for (int t : order) {
      if (kept[t] == 0.0) break;
      acc += kept[t];
      chosen = t;
      if (u < acc) break;
    }

    for (int h = 0; h < cfg.head_count; ++h) {
      const double* row = out.attention.data() +
                          static_cast<std::size_t>(h) * out.key_count;
      std::copy(row, row + nv, head_mass.begin() + static_cast<std::size_t>(h) * nv);
      row_total[h] = std::accumulate(row, row + out.key_count, 0.0);
    }
    const double entropy =
        sampling.entropy_from_truncated ? EntropyOf(kept) : EntropyOf(probs);
    r.trace.AppendStep(head_mass, row_total, entropy);
    r.generated.push_back(chosen);
    r.logprobs.push_back(std::log(kept[chosen]));
    r.entropies.push_back(entropy);
    if (chosen == tok::kEos) {
      r.terminal = true;
      break;
    }
    prefix.push_back(chosen);
  }
  return r;
}

// ---------------------------------------------------------------------------

namespace {

struct TrajectoryPass {
  std::vector<int> inputs;   // question plus all but the last generated token
  int first_prediction = 0;  // row of the logits predicting generated[0]
};

TrajectoryPass PrepareTrajectory(const ToyModel& model, const Rollout& rollout,
                                 std::span<const double> weights) {
  const auto& cfg = model.config();
  if (rollout.vision.cols() != cfg.feature_dim ||
      rollout.vision.rows() > cfg.max_vision_tokens) {
    throw Error(ErrorKind::kShape, "rollout vision block does not fit model");
  }
  if (rollout.question.empty()) {
    throw Error(ErrorKind::kShape, "rollout has no question tokens");
  }
  if (weights.size() != rollout.generated.size()) {
    throw Error(ErrorKind::kShape, "one weight per generated token required");
  }
  for (int t : rollout.generated) {
    if (t < 0 || t >= cfg.vocab_size) {
      throw Error(ErrorKind::kShape, "rollout token outside model vocabulary");
    }
  }
  TrajectoryPass pass;
  pass.inputs = rollout.question;
  if (!rollout.generated.empty()) {
    pass.inputs.insert(pass.inputs.end(), rollout.generated.begin(),
                       rollout.generated.end() - 1);
  }
  pass.first_prediction = static_cast<int>(rollout.vision.rows() +
                                           rollout.question.size()) - 1;
  return pass;
}

// Per-token log pi, reference log pi and KL estimate, plus the policy
// probabilities needed for the logit gradient.
struct TokenTerms {
  std::vector<double> logprob, ref_logprob;
  Matrix probs;  // [generated][vocab]
};

TokenTerms EvaluateTokens(const ToyModel& model, const ToyModel& reference,
                          const Rollout& rollout, const TrajectoryPass& pass) {
  const auto n_gen = static_cast<int>(rollout.generated.size());
  TokenTerms terms;
  terms.logprob.resize(n_gen);
  terms.ref_logprob.resize(n_gen);
  terms.probs.resize(n_gen, model.config().vocab_size);
  if (n_gen == 0) return terms;
  const SequenceOutput pol = model.ForwardSequence(rollout.vision, pass.inputs);
  const SequenceOutput ref =
      reference.ForwardSequence(rollout.vision, pass.inputs);
  for (int g = 0; g < n_gen; ++g) {
    const int row = pass.first_prediction + g;
    const int t = rollout.generated[g];
    const auto lp = LogSoftmax(
        std::span<const double>(pol.logits.row(row).data(), pol.logits.cols()),
        rollout.temperature);
    const auto rlp = LogSoftmax(
        std::span<const double>(ref.logits.row(row).data(), ref.logits.cols()),
        rollout.temperature);
    terms.logprob[g] = lp[t];
    terms.ref_logprob[g] = rlp[t];
    for (int k = 0; k < terms.probs.cols(); ++k) terms.probs(g, k) = std::exp(lp[k]);
  }
  return terms;
}

double KlEstimate(double logprob, double ref_logprob) {
  const double r = ref_logprob - logprob;
  return std::exp(r) - r - 1.0;
}

}  // namespace

TrajectoryGradient TrajectoryLogprobGrad(const ToyModel& model,
                                         const Rollout& rollout,
                                         const ToyModel& reference,
                                         std::span<const double> weights,
                                         double kl_coeff) {
  if (!(model.config() == reference.config())) {
    throw Error(ErrorKind::kShape, "reference model config differs from policy");
  }
  const TrajectoryPass pass = PrepareTrajectory(model, rollout, weights);
  const TokenTerms terms = EvaluateTokens(model, reference, rollout, pass);
  TrajectoryGradient out;
  out.grad = model.params().ZerosLike();
  const auto n_gen = static_cast<int>(rollout.generated.size());
  if (n_gen == 0) return out;

  const int n = static_cast<int>(rollout.vision.rows() + pass.inputs.size());
  Matrix dlogits = Matrix::Zero(n, model.config().vocab_size);
  for (int g = 0; g < n_gen; ++g) {
    const double lp = terms.logprob[g];
    const double kl = KlEstimate(lp, terms.ref_logprob[g]);
    out.objective += weights[g] * lp - kl_coeff * kl;
    out.kl += kl;
    out.logprob_sum += lp;
    // d/d(log pi) of w*lp - beta*(exp(r) - r - 1), r = ref - lp.
    const double coeff =
        weights[g] - kl_coeff * (1.0 - std::exp(terms.ref_logprob[g] - lp));
    if (coeff == 0.0) continue;
    auto row = dlogits.row(pass.first_prediction + g);
    row = -coeff / rollout.temperature * terms.probs.row(g);
    row(rollout.generated[g]) += coeff / rollout.temperature;
  }
  model.Backward(rollout.vision, pass.inputs, dlogits, out.grad);
  return out;
}

double TrajectoryObjective(const ToyModel& model, const Rollout& rollout,
                           const ToyModel& reference,
                           std::span<const double> weights, double kl_coeff) {
  const TrajectoryPass pass = PrepareTrajectory(model, rollout, weights);
  const TokenTerms terms = EvaluateTokens(model, reference, rollout, pass);
  double objective = 0.0;
  for (std::size_t g = 0; g < rollout.generated.size(); ++g) {
    objective += weights[g] * terms.logprob[g] -
                 kl_coeff * KlEstimate(terms.logprob[g], terms.ref_logprob[g]);
  }
  return objective;
}

}  // namespace vattn
