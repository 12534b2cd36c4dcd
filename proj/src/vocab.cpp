#include "vattn/vocab.hpp"

namespace vattn {

namespace {

constexpr std::array<std::string_view, tok::kVocabSize> kNames = {
    "<eos>",    "<q>",       "<answer>",    "</answer>",    "what-color",
    "what-shape", "red",     "green",       "blue",         "yellow",
    "circle",   "square",    "triangle",    "cross",        "top-left",
    "top-right", "bottom-left", "bottom-right", "look",      "so",
};

}  // namespace

std::string_view TokenName(int token) {
  if (token < 0 || token >= tok::kVocabSize) return "<unk>";
  return kNames[token];
}

std::optional<int> TokenFromName(std::string_view name) {
  for (int i = 0; i < tok::kVocabSize; ++i) {
    if (kNames[i] == name) return i;
  }
  return std::nullopt;
}

std::string_view ColorName(Color c) { return TokenName(ColorToken(c)); }
std::string_view ShapeName(Shape s) { return TokenName(ShapeToken(s)); }

std::string RenderTokens(std::span<const int> tokens) {
  std::string out;
  for (int t : tokens) {
    if (t == tok::kEos) break;
    if (!out.empty()) out += ' ';
    out += TokenName(t);
  }
  return out;
}

}  // namespace vattn
