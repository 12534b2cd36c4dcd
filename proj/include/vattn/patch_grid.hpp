#ifndef VATTN_PATCH_GRID_HPP_
#define VATTN_PATCH_GRID_HPP_

#include <compare>
#include <cstdint>
#include <initializer_list>
#include <vector>

namespace vattn {

// Identity of the grid a token set was derived from.
struct GridId {
  int image_width = 0;
  int image_height = 0;
  int patch_size = 0;

  auto operator<=>(const GridId&) const = default;
};

// Axis-aligned pixel box, half-open on the max edges.
struct BBox {
  int x_min = 0;
  int y_min = 0;
  int x_max = 0;
  int y_max = 0;

  int width() const { return x_max - x_min; }
  int height() const { return y_max - y_min; }
  long long area() const {
    return static_cast<long long>(width()) * height();
  }

  auto operator<=>(const BBox&) const = default;
};

// Row-major lattice of square patches over an image. Edge patches are
// clipped to the image when the size is not a multiple of the patch size.
class PatchGrid {
 public:
  PatchGrid() = default;

  // Throws dimension-error unless 1 <= patch_size <= min(width, height).
  PatchGrid(int image_width, int image_height, int patch_size);

  int image_width() const { return id_.image_width; }
  int image_height() const { return id_.image_height; }
  int patch_size() const { return id_.patch_size; }
  int rows() const { return rows_; }
  int cols() const { return cols_; }
  int token_count() const { return rows_ * cols_; }
  const GridId& id() const { return id_; }

  bool Contains(const BBox& box) const;

  bool operator==(const PatchGrid& other) const { return id_ == other.id_; }

 private:
  GridId id_;
  int rows_ = 0;
  int cols_ = 0;
};

// Sorted, unique vision-token indices scoped to one grid.
class TokenSet {
 public:
  TokenSet() = default;
  TokenSet(GridId grid, std::vector<int> indices);

  const std::vector<int>& indices() const { return indices_; }
  const GridId& grid() const { return grid_; }
  std::size_t size() const { return indices_.size(); }
  bool empty() const { return indices_.empty(); }
  bool Contains(int index) const;
  bool IsSubsetOf(const TokenSet& other) const;

  auto begin() const { return indices_.begin(); }
  auto end() const { return indices_.end(); }

  bool operator==(const TokenSet&) const = default;

 private:
  GridId grid_;
  std::vector<int> indices_;
};

PatchGrid NewGrid(int image_width, int image_height, int patch_size);

// Every token whose (clipped) patch has a covered-area fraction strictly
// greater than min_overlap. With min_overlap == 0 any positive-area
// intersection qualifies. May return an empty set.
TokenSet BboxToTokens(const PatchGrid& grid, const BBox& box,
                      double min_overlap = 0.0);

TokenSet AllTokens(const PatchGrid& grid);

BBox TokenToRect(const PatchGrid& grid, int index);

}  // namespace vattn

#endif  // VATTN_PATCH_GRID_HPP_
