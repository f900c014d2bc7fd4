#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace metat2 {

// Row-major 2D array.
template <class T>
struct Grid {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(int r, int c, T fill = T{}) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  T& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  const T& at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

  template <class U>
  bool same_shape(const Grid<U>& other) const {
    return rows == other.rows && cols == other.cols;
  }

  bool operator==(const Grid&) const = default;
};

using Image = Grid<float>;
using Mask = Grid<std::uint8_t>;

}  // namespace metat2
