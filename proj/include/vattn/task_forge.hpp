#ifndef VATTN_TASK_FORGE_HPP_
#define VATTN_TASK_FORGE_HPP_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "vattn/attn_metrics.hpp"
#include "vattn/model.hpp"
#include "vattn/patch_grid.hpp"
#include "vattn/vocab.hpp"

namespace vattn {

// Dense scenes scatter shapes over the image; chart scenes place one bar per
// ruled column, labelled by a glyph.
enum class SceneFamily { kDense, kChart };

const char* ToString(SceneFamily family);
SceneFamily SceneFamilyFromString(const std::string& name);

struct SceneObject {
  int id = 0;
  Shape shape = Shape::kCircle;
  Color color = Color::kRed;
  BBox box;

  bool operator==(const SceneObject&) const = default;
};

struct Scene {
  PatchGrid grid;
  SceneFamily family = SceneFamily::kDense;
  std::vector<SceneObject> objects;
  double density = 0.0;  // covered pixel fraction
  std::uint64_t seed = 0;

  const SceneObject* Find(int id) const;
  bool operator==(const Scene&) const = default;
};

// Per-feature layout of a vision token: color fractions, shape fractions,
// background fraction.
inline constexpr int kFeatureDim = kColorCount + kShapeCount + 1;

// Owner of every pixel, -1 for background; row-major.
std::vector<int> RasterizeScene(const Scene& scene);

// [token][feature] fractions of each patch's pixels.
Matrix ScenePatchFeatures(const Scene& scene);

// Throws placement-error when the grid cannot host object_count objects.
Scene GenScene(std::uint64_t seed, const PatchGrid& grid, int object_count,
               SceneFamily family = SceneFamily::kDense);

struct QuestionAnswer {
  std::vector<int> question;
  std::string answer;
};

// Symbolic attribute question naming the target uniquely, or nullopt when no
// question type can single it out. Throws unknown-id-error.
std::optional<QuestionAnswer> GenQuestion(const Scene& scene, int target_id,
                                          std::uint64_t seed);

// Rule-based reading of a question against a scene: the ids of every object
// matching its reference tokens.
std::vector<int> ResolveQuestion(const Scene& scene,
                                 const std::vector<int>& question);

// Answer the question would have for a given object.
std::string AnswerFor(const SceneObject& object, const std::vector<int>& question);

// target = tokens under the object's box; all = every token.
// Throws unknown-id-error, or empty-target-error when min_overlap filters out
// every token.
RewardTarget BuildRewardTarget(const Scene& scene, int target_id,
                               double min_overlap = 0.0,
                               double epsilon = kDefaultEpsilon);

inline bool IsDegenerate(const RewardTarget& t) { return t.target == t.all; }

struct Sample {
  std::uint64_t id = 0;
  Scene scene;
  std::vector<int> question;
  std::string answer;
  int target_id = 0;
  RewardTarget reward_target;
  bool degenerate = false;

  bool operator==(const Sample&) const = default;
};

struct DatasetConfig {
  std::uint64_t seed = 7;
  int count = 200;
  SceneFamily family = SceneFamily::kDense;
  int image_size = 64;
  int patch_size = 16;
  int min_objects = 2;
  int max_objects = 4;
  double min_overlap = 0.0;
  bool allow_degenerate = false;
};

std::vector<Sample> GenerateDataset(const DatasetConfig& config);

inline constexpr int kDatasetVersion = 1;

// JSON-lines: a header line with the schema version, then one sample per
// line carrying a CRC-32 of its own canonical form.
std::string SerializeDataset(const std::vector<Sample>& samples);
// Throws schema-error or version-mismatch-error.
std::vector<Sample> DeserializeDataset(const std::string& text);

void ExportDataset(const std::vector<Sample>& samples,
                   const std::filesystem::path& path);
std::vector<Sample> ImportDataset(const std::filesystem::path& path);

// Binary portable pixmap of the scene.
std::string RenderPpm(const Scene& scene);

}  // namespace vattn

#endif  // VATTN_TASK_FORGE_HPP_
