#include "vattn/patch_grid.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "vattn/error.hpp"

namespace vattn {

namespace {

int CeilDiv(int a, int b) { return (a + b - 1) / b; }

std::string Describe(const BBox& b) {
  return "(" + std::to_string(b.x_min) + "," + std::to_string(b.y_min) + "," +
         std::to_string(b.x_max) + "," + std::to_string(b.y_max) + ")";
}

}  // namespace

PatchGrid::PatchGrid(int image_width, int image_height, int patch_size) {
  if (image_width < 1 || image_height < 1 || patch_size < 1) {
    throw Error(ErrorKind::kDimension, "grid dimensions must be positive");
  }
  if (patch_size > std::min(image_width, image_height)) {
    throw Error(ErrorKind::kDimension,
                "patch_size " + std::to_string(patch_size) +
                    " exceeds image extent");
  }
  id_ = {image_width, image_height, patch_size};
  cols_ = CeilDiv(image_width, patch_size);
  rows_ = CeilDiv(image_height, patch_size);
}

bool PatchGrid::Contains(const BBox& box) const {
  return box.x_min >= 0 && box.y_min >= 0 && box.x_min < box.x_max &&
         box.y_min < box.y_max && box.x_max <= image_width() &&
         box.y_max <= image_height();
}

TokenSet::TokenSet(GridId grid, std::vector<int> indices)
    : grid_(grid), indices_(std::move(indices)) {
  std::sort(indices_.begin(), indices_.end());
  indices_.erase(std::unique(indices_.begin(), indices_.end()),
                 indices_.end());
}

bool TokenSet::Contains(int index) const {
  return std::binary_search(indices_.begin(), indices_.end(), index);
}

bool TokenSet::IsSubsetOf(const TokenSet& other) const {
  return grid_ == other.grid_ &&
         std::includes(other.indices_.begin(), other.indices_.end(),
                       indices_.begin(), indices_.end());
}

PatchGrid NewGrid(int image_width, int image_height, int patch_size) {
  return PatchGrid(image_width, image_height, patch_size);
}

TokenSet BboxToTokens(const PatchGrid& grid, const BBox& box,
                      double min_overlap) {
  if (!grid.Contains(box)) {
    throw Error(ErrorKind::kDimension,
                "box " + Describe(box) + " outside image extent");
  }
  if (!(min_overlap >= 0.0 && min_overlap <= 1.0)) {
    throw Error(ErrorKind::kDimension, "min_overlap must lie in [0,1]");
  }
  const int ps = grid.patch_size();
  const int col_lo = box.x_min / ps;
  const int col_hi = (box.x_max - 1) / ps;
  const int row_lo = box.y_min / ps;
  const int row_hi = (box.y_max - 1) / ps;

  std::vector<int> out;
  for (int r = row_lo; r <= row_hi; ++r) {
    for (int c = col_lo; c <= col_hi; ++c) {
      const int index = r * grid.cols() + c;
      const BBox patch = TokenToRect(grid, index);
      const long long iw = std::min(patch.x_max, box.x_max) -
                           std::max(patch.x_min, box.x_min);
      const long long ih = std::min(patch.y_max, box.y_max) -
                           std::max(patch.y_min, box.y_min);
      if (iw <= 0 || ih <= 0) continue;
      const double fraction =
          static_cast<double>(iw * ih) / static_cast<double>(patch.area());
      if (fraction > min_overlap) out.push_back(index);
    }
  }
  return TokenSet(grid.id(), std::move(out));
}

TokenSet AllTokens(const PatchGrid& grid) {
  std::vector<int> all(static_cast<std::size_t>(grid.token_count()));
  std::iota(all.begin(), all.end(), 0);
  return TokenSet(grid.id(), std::move(all));
}

BBox TokenToRect(const PatchGrid& grid, int index) {
  if (index < 0 || index >= grid.token_count()) {
    throw Error(ErrorKind::kIndex, "token " + std::to_string(index) +
                                       " outside grid of " +
                                       std::to_string(grid.token_count()));
  }
  const int ps = grid.patch_size();
  const int row = index / grid.cols();
  const int col = index % grid.cols();
  return {col * ps, row * ps, std::min((col + 1) * ps, grid.image_width()),
          std::min((row + 1) * ps, grid.image_height())};
}

}  // namespace vattn
