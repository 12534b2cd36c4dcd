#include "vattn/task_forge.hpp"

#include <algorithm>
#include <array>
#include <numeric>
#include <random>

#include "json.hpp"

#include "vattn/error.hpp"
#include "vattn/io_util.hpp"

namespace vattn {

using nlohmann::json;

namespace {

constexpr int kPlacementAttempts = 2000;
constexpr int kSampleAttempts = 200;

Quadrant QuadrantOf(const Scene& scene, const BBox& box) {
  const bool left = box.x_min + box.x_max < scene.grid.image_width();
  const bool top = box.y_min + box.y_max < scene.grid.image_height();
  if (top) return left ? Quadrant::kTopLeft : Quadrant::kTopRight;
  return left ? Quadrant::kBottomLeft : Quadrant::kBottomRight;
}

bool Overlaps(const BBox& a, const BBox& b) {
  return a.x_min < b.x_max && b.x_min < a.x_max && a.y_min < b.y_max &&
         b.y_min < a.y_max;
}

bool CoversPixel(const SceneObject& o, SceneFamily family, int x, int y) {
  if (x < o.box.x_min || x >= o.box.x_max || y < o.box.y_min ||
      y >= o.box.y_max) {
    return false;
  }
  if (family == SceneFamily::kChart) return true;
  const double px = x + 0.5;
  const double py = y + 0.5;
  const double w = o.box.width();
  const double h = o.box.height();
  const double cx = o.box.x_min + w / 2.0;
  const double cy = o.box.y_min + h / 2.0;
  switch (o.shape) {
    case Shape::kSquare:
      return true;
    case Shape::kCircle: {
      const double dx = (px - cx) / (w / 2.0);
      const double dy = (py - cy) / (h / 2.0);
      return dx * dx + dy * dy <= 1.0;
    }
    case Shape::kTriangle:
      return std::abs(px - cx) <= (py - o.box.y_min) / h * (w / 2.0);
    case Shape::kCross:
      return std::abs(px - cx) <= w / 6.0 || std::abs(py - cy) <= h / 6.0;
  }
  return false;
}

int UniformInt(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

const char* AttrName(Shape s) { return ShapeName(s).data(); }
const char* AttrName(Color c) { return ColorName(c).data(); }

template <typename E>
E EnumFromName(const std::string& name, int count, int base) {
  for (int i = 0; i < count; ++i) {
    if (TokenName(base + i) == name) return static_cast<E>(i);
  }
  throw Error(ErrorKind::kSchema, "unknown attribute '" + name + "'");
}

}  // namespace

const char* ToString(SceneFamily family) {
  return family == SceneFamily::kChart ? "chart" : "dense";
}

SceneFamily SceneFamilyFromString(const std::string& name) {
  if (name == "dense") return SceneFamily::kDense;
  if (name == "chart") return SceneFamily::kChart;
  throw Error(ErrorKind::kConfig, "unknown scene family '" + name + "'");
}

const SceneObject* Scene::Find(int id) const {
  for (const auto& o : objects) {
    if (o.id == id) return &o;
  }
  return nullptr;
}

std::vector<int> RasterizeScene(const Scene& scene) {
  const int w = scene.grid.image_width();
  const int h = scene.grid.image_height();
  std::vector<int> owner(static_cast<std::size_t>(w) * h, -1);
  for (std::size_t k = 0; k < scene.objects.size(); ++k) {
    const auto& o = scene.objects[k];
    for (int y = o.box.y_min; y < o.box.y_max; ++y) {
      for (int x = o.box.x_min; x < o.box.x_max; ++x) {
        if (CoversPixel(o, scene.family, x, y)) {
          owner[static_cast<std::size_t>(y) * w + x] = static_cast<int>(k);
        }
      }
    }
  }
  return owner;
}

Matrix ScenePatchFeatures(const Scene& scene) {
  const auto owner = RasterizeScene(scene);
  const auto& grid = scene.grid;
  Matrix features = Matrix::Zero(grid.token_count(), kFeatureDim);
  for (int t = 0; t < grid.token_count(); ++t) {
    const BBox patch = TokenToRect(grid, t);
    for (int y = patch.y_min; y < patch.y_max; ++y) {
      for (int x = patch.x_min; x < patch.x_max; ++x) {
        const int k = owner[static_cast<std::size_t>(y) * grid.image_width() + x];
        if (k < 0) {
          features(t, kFeatureDim - 1) += 1.0;
        } else {
          const auto& o = scene.objects[k];
          features(t, static_cast<int>(o.color)) += 1.0;
          features(t, kColorCount + static_cast<int>(o.shape)) += 1.0;
        }
      }
    }
    features.row(t) /= static_cast<double>(patch.area());
  }
  return features;
}

Scene GenScene(std::uint64_t seed, const PatchGrid& grid, int object_count,
               SceneFamily family) {
  if (object_count < 1) {
    throw Error(ErrorKind::kPlacement, "object_count must be >= 1");
  }
  std::mt19937_64 rng(seed);
  Scene scene;
  scene.grid = grid;
  scene.family = family;
  scene.seed = seed;
  const int ps = grid.patch_size();
  const int w = grid.image_width();
  const int h = grid.image_height();

  if (family == SceneFamily::kChart) {
    if (object_count > grid.cols()) {
      throw Error(ErrorKind::kPlacement,
                  std::to_string(object_count) + " bars exceed " +
                      std::to_string(grid.cols()) + " chart columns");
    }
    std::vector<int> columns(grid.cols());
    std::iota(columns.begin(), columns.end(), 0);
    std::shuffle(columns.begin(), columns.end(), rng);
    columns.resize(object_count);
    std::sort(columns.begin(), columns.end());
    std::array<int, kShapeCount> labels{0, 1, 2, 3};
    std::shuffle(labels.begin(), labels.end(), rng);
    const int margin = std::max(1, ps / 8);
    for (int k = 0; k < object_count; ++k) {
      const int c = columns[k];
      SceneObject o;
      o.id = k;
      o.shape = static_cast<Shape>(labels[k % kShapeCount]);
      o.color = static_cast<Color>(UniformInt(rng, 0, kColorCount - 1));
      const int x0 = c * ps;
      const int x1 = std::min((c + 1) * ps, w);
      const int bar_h = UniformInt(rng, std::min(ps, h), h);
      o.box = {x0 + std::min(margin, (x1 - x0 - 1) / 2), h - bar_h,
               x1 - std::min(margin, (x1 - x0 - 1) / 2), h};
      scene.objects.push_back(o);
    }
  } else {
    const int min_side = std::max(2, (ps * 3) / 4);
    const int max_side = std::max(min_side, std::min({(ps * 7) / 4, w, h}));
    const long long capacity =
        static_cast<long long>(w / min_side) * (h / min_side);
    if (min_side > std::min(w, h) || object_count > capacity) {
      throw Error(ErrorKind::kPlacement,
                  std::to_string(object_count) + " objects exceed capacity " +
                      std::to_string(capacity) + " of the image");
    }
    for (int k = 0; k < object_count; ++k) {
      bool placed = false;
      for (int attempt = 0; attempt < kPlacementAttempts && !placed; ++attempt) {
        const int bw = UniformInt(rng, min_side, max_side);
        const int bh = UniformInt(rng, min_side, max_side);
        const int x0 = UniformInt(rng, 0, w - bw);
        const int y0 = UniformInt(rng, 0, h - bh);
        const BBox box{x0, y0, x0 + bw, y0 + bh};
        if (std::none_of(scene.objects.begin(), scene.objects.end(),
                         [&](const SceneObject& o) { return Overlaps(o.box, box); })) {
          SceneObject o;
          o.id = k;
          o.shape = static_cast<Shape>(UniformInt(rng, 0, kShapeCount - 1));
          o.color = static_cast<Color>(UniformInt(rng, 0, kColorCount - 1));
          o.box = box;
          scene.objects.push_back(o);
          placed = true;
        }
      }
      if (!placed) {
        throw Error(ErrorKind::kPlacement,
                    "could not place object " + std::to_string(k) + " of " +
                        std::to_string(object_count));
      }
    }
  }
  const auto owner = RasterizeScene(scene);
  scene.density =
      static_cast<double>(std::count_if(owner.begin(), owner.end(),
                                        [](int k) { return k >= 0; })) /
      static_cast<double>(owner.size());
  return scene;
}

std::vector<int> ResolveQuestion(const Scene& scene,
                                 const std::vector<int>& question) {
  if (question.size() < 3 || question[0] != tok::kQuery) return {};
  const int ref = question[2];
  const int region = question.size() > 3 ? question[3] : -1;
  std::vector<int> ids;
  for (const auto& o : scene.objects) {
    bool match = false;
    if (question[1] == tok::kAskColor) match = ShapeToken(o.shape) == ref;
    if (question[1] == tok::kAskShape) match = ColorToken(o.color) == ref;
    if (match && region >= 0) {
      match = RegionToken(QuadrantOf(scene, o.box)) == region;
    }
    if (match) ids.push_back(o.id);
  }
  return ids;
}

std::string AnswerFor(const SceneObject& object,
                      const std::vector<int>& question) {
  if (question.size() > 1 && question[1] == tok::kAskShape) {
    return std::string(ShapeName(object.shape));
  }
  return std::string(ColorName(object.color));
}

std::optional<QuestionAnswer> GenQuestion(const Scene& scene, int target_id,
                                          std::uint64_t seed) {
  const SceneObject* target = scene.Find(target_id);
  if (!target) {
    throw Error(ErrorKind::kUnknownId,
                "object id " + std::to_string(target_id) + " not in scene");
  }
  std::mt19937_64 rng(seed);
  std::array<int, 2> asks{tok::kAskColor, tok::kAskShape};
  if (rng() & 1) std::swap(asks[0], asks[1]);
  for (int ask : asks) {
    const int ref = ask == tok::kAskColor ? ShapeToken(target->shape)
                                          : ColorToken(target->color);
    std::vector<int> q{tok::kQuery, ask, ref};
    auto ids = ResolveQuestion(scene, q);
    if (ids.size() != 1) {
      q.push_back(RegionToken(QuadrantOf(scene, target->box)));
      ids = ResolveQuestion(scene, q);
    }
    if (ids.size() == 1 && ids.front() == target_id) {
      return QuestionAnswer{q, AnswerFor(*target, q)};
    }
  }
  return std::nullopt;
}

RewardTarget BuildRewardTarget(const Scene& scene, int target_id,
                               double min_overlap, double epsilon) {
  const SceneObject* target = scene.Find(target_id);
  if (!target) {
    throw Error(ErrorKind::kUnknownId,
                "object id " + std::to_string(target_id) + " not in scene");
  }
  RewardTarget rt;
  rt.target = BboxToTokens(scene.grid, target->box, min_overlap);
  rt.all = AllTokens(scene.grid);
  rt.epsilon = epsilon;
  if (rt.target.empty()) {
    throw Error(ErrorKind::kEmptyTarget,
                "min_overlap filtered every token of object " +
                    std::to_string(target_id));
  }
  return rt;
}

std::vector<Sample> GenerateDataset(const DatasetConfig& config) {
  if (config.count < 0 || config.min_objects < 1 ||
      config.max_objects < config.min_objects) {
    throw Error(ErrorKind::kConfig, "invalid dataset size or object range");
  }
  const PatchGrid grid(config.image_size, config.image_size, config.patch_size);
  std::vector<Sample> samples;
  samples.reserve(config.count);
  for (int i = 0; i < config.count; ++i) {
    bool done = false;
    for (int attempt = 0; attempt < kSampleAttempts && !done; ++attempt) {
      const std::uint64_t s =
          MixSeed(config.seed, static_cast<std::uint64_t>(i) * kSampleAttempts + attempt);
      std::mt19937_64 rng(s);
      const int n_obj = UniformInt(rng, config.min_objects, config.max_objects);
      Scene scene;
      try {
        scene = GenScene(MixSeed(s, 1), grid, n_obj, config.family);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::kPlacement) throw;
        continue;
      }
      const int target_id =
          scene.objects[UniformInt(rng, 0, n_obj - 1)].id;
      auto qa = GenQuestion(scene, target_id, MixSeed(s, 2));
      if (!qa) continue;
      RewardTarget rt;
      try {
        rt = BuildRewardTarget(scene, target_id, config.min_overlap);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::kEmptyTarget) throw;
        continue;
      }
      const bool degenerate = IsDegenerate(rt);
      if (degenerate && !config.allow_degenerate) continue;
      Sample sample;
      sample.id = static_cast<std::uint64_t>(i);
      sample.scene = std::move(scene);
      sample.question = std::move(qa->question);
      sample.answer = std::move(qa->answer);
      sample.target_id = target_id;
      sample.reward_target = std::move(rt);
      sample.degenerate = degenerate;
      samples.push_back(std::move(sample));
      done = true;
    }
    if (!done) {
      throw Error(ErrorKind::kPlacement,
                  "could not generate sample " + std::to_string(i));
    }
  }
  return samples;
}

// ---------------------------------------------------------------------------

namespace {

json SampleToJson(const Sample& s) {
  json objects = json::array();
  for (const auto& o : s.scene.objects) {
    objects.push_back({{"id", o.id},
                       {"shape", AttrName(o.shape)},
                       {"color", AttrName(o.color)},
                       {"box", {o.box.x_min, o.box.y_min, o.box.x_max, o.box.y_max}}});
  }
  json question = json::array();
  for (int t : s.question) question.push_back(std::string(TokenName(t)));
  return {
      {"id", s.id},
      {"scene",
       {{"width", s.scene.grid.image_width()},
        {"height", s.scene.grid.image_height()},
        {"patch", s.scene.grid.patch_size()},
        {"family", ToString(s.scene.family)},
        {"density", s.scene.density},
        {"seed", s.scene.seed},
        {"objects", objects}}},
      {"question", question},
      {"answer", s.answer},
      {"target_id", s.target_id},
      {"target", s.reward_target.target.indices()},
      {"all", s.reward_target.all.indices()},
      {"epsilon", s.reward_target.epsilon},
      {"degenerate", s.degenerate},
  };
}

Sample SampleFromJson(const json& j) {
  Sample s;
  s.id = j.at("id").get<std::uint64_t>();
  const auto& sc = j.at("scene");
  s.scene.grid = PatchGrid(sc.at("width").get<int>(), sc.at("height").get<int>(),
                           sc.at("patch").get<int>());
  s.scene.family = SceneFamilyFromString(sc.at("family").get<std::string>());
  s.scene.density = sc.at("density").get<double>();
  s.scene.seed = sc.at("seed").get<std::uint64_t>();
  for (const auto& o : sc.at("objects")) {
    SceneObject obj;
    obj.id = o.at("id").get<int>();
    obj.shape = EnumFromName<Shape>(o.at("shape").get<std::string>(),
                                    kShapeCount, tok::kShapeBase);
    obj.color = EnumFromName<Color>(o.at("color").get<std::string>(),
                                    kColorCount, tok::kColorBase);
    const auto b = o.at("box").get<std::vector<int>>();
    if (b.size() != 4) throw Error(ErrorKind::kSchema, "box needs 4 coordinates");
    obj.box = {b[0], b[1], b[2], b[3]};
    if (!s.scene.grid.Contains(obj.box)) {
      throw Error(ErrorKind::kSchema, "object box outside image");
    }
    s.scene.objects.push_back(obj);
  }
  for (const auto& name : j.at("question")) {
    const auto t = TokenFromName(name.get<std::string>());
    if (!t) throw Error(ErrorKind::kSchema, "unknown question token");
    s.question.push_back(*t);
  }
  s.answer = j.at("answer").get<std::string>();
  s.target_id = j.at("target_id").get<int>();
  const auto id = s.scene.grid.id();
  s.reward_target.target = TokenSet(id, j.at("target").get<std::vector<int>>());
  s.reward_target.all = TokenSet(id, j.at("all").get<std::vector<int>>());
  s.reward_target.epsilon = j.at("epsilon").get<double>();
  s.degenerate = j.at("degenerate").get<bool>();
  if (!s.scene.Find(s.target_id)) {
    throw Error(ErrorKind::kSchema, "target id missing from scene");
  }
  try {
    s.reward_target.Validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::kSchema, e.what());
  }
  return s;
}

}  // namespace

std::string SerializeDataset(const std::vector<Sample>& samples) {
  std::string out =
      json{{"schema", "vattn-dataset"}, {"version", kDatasetVersion},
           {"count", samples.size()}}
          .dump();
  out += '\n';
  for (const auto& s : samples) {
    json j = SampleToJson(s);
    const auto crc = Crc32(j.dump());
    j["crc"] = crc;
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<Sample> DeserializeDataset(const std::string& text) {
  const auto lines = SplitLines(text);
  if (lines.empty()) throw Error(ErrorKind::kSchema, "dataset has no header");
  json header;
  try {
    header = json::parse(lines[0]);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kSchema, std::string("bad dataset header: ") + e.what());
  }
  if (header.value("schema", "") != "vattn-dataset") {
    throw Error(ErrorKind::kSchema, "not a dataset file");
  }
  if (header.value("version", -1) != kDatasetVersion) {
    throw Error(ErrorKind::kVersionMismatch,
                "dataset schema version " + header.value("version", json()).dump() +
                    " unsupported");
  }
  std::vector<Sample> samples;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    try {
      json j = json::parse(lines[i]);
      const auto crc = j.at("crc").get<std::uint32_t>();
      j.erase("crc");
      if (Crc32(j.dump()) != crc) {
        throw Error(ErrorKind::kSchema,
                    "checksum mismatch on line " + std::to_string(i + 1));
      }
      samples.push_back(SampleFromJson(j));
    } catch (const json::exception& e) {
      throw Error(ErrorKind::kSchema, "line " + std::to_string(i + 1) + ": " +
                                          e.what());
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kSchema) {
        throw Error(ErrorKind::kSchema, "line " + std::to_string(i + 1) + ": " +
                                            e.what());
      }
      throw;
    }
  }
  if (header.value("count", samples.size()) != samples.size()) {
    throw Error(ErrorKind::kSchema, "sample count does not match header");
  }
  return samples;
}

void ExportDataset(const std::vector<Sample>& samples,
                   const std::filesystem::path& path) {
  WriteFileAtomic(path, SerializeDataset(samples));
}

std::vector<Sample> ImportDataset(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw Error(ErrorKind::kIo, "dataset not found: " + path.string());
  }
  return DeserializeDataset(ReadFile(path));
}

std::string RenderPpm(const Scene& scene) {
  static constexpr std::array<std::array<unsigned char, 3>, kColorCount> kRgb{{
      {220, 40, 40}, {40, 170, 60}, {50, 80, 220}, {230, 200, 30}}};
  const int w = scene.grid.image_width();
  const int h = scene.grid.image_height();
  const auto owner = RasterizeScene(scene);
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (int k : owner) {
    if (k < 0) {
      out.append(3, static_cast<char>(245));
    } else {
      for (unsigned char c : kRgb[static_cast<int>(scene.objects[k].color)]) {
        out.push_back(static_cast<char>(c));
      }
    }
  }
  return out;
}

}  // namespace vattn
