#ifndef VATTN_VOCAB_HPP_
#define VATTN_VOCAB_HPP_

#include <array>
#include <optional>
#include <span>
#include <string>
#include <string_view>

namespace vattn {

// Closed symbolic vocabulary shared by the task generator and the toy model.
namespace tok {
inline constexpr int kEos = 0;
inline constexpr int kQuery = 1;
inline constexpr int kAnswerOpen = 2;
inline constexpr int kAnswerClose = 3;
inline constexpr int kAskColor = 4;
inline constexpr int kAskShape = 5;
inline constexpr int kColorBase = 6;   // 4 colors
inline constexpr int kShapeBase = 10;  // 4 shapes
inline constexpr int kRegionBase = 14; // 4 quadrants
inline constexpr int kLook = 18;
inline constexpr int kSo = 19;
inline constexpr int kVocabSize = 20;
}  // namespace tok

inline constexpr int kColorCount = 4;
inline constexpr int kShapeCount = 4;

enum class Color { kRed = 0, kGreen, kBlue, kYellow };
enum class Shape { kCircle = 0, kSquare, kTriangle, kCross };
enum class Quadrant { kTopLeft = 0, kTopRight, kBottomLeft, kBottomRight };

inline int ColorToken(Color c) { return tok::kColorBase + static_cast<int>(c); }
inline int ShapeToken(Shape s) { return tok::kShapeBase + static_cast<int>(s); }
inline int RegionToken(Quadrant q) {
  return tok::kRegionBase + static_cast<int>(q);
}

std::string_view TokenName(int token);
std::optional<int> TokenFromName(std::string_view name);
std::string_view ColorName(Color c);
std::string_view ShapeName(Shape s);

// Space-joined token names, stopping before the first end token.
std::string RenderTokens(std::span<const int> tokens);

}  // namespace vattn

#endif  // VATTN_VOCAB_HPP_
