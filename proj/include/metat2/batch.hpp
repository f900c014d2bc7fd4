#pragma once

// Conversions between per-sample grids and batched [N, 1, H, W] tensors.

#include "metat2/autograd.hpp"
#include "metat2/grid.hpp"
#include "metat2/rng.hpp"

#include <span>
#include <stdexcept>
#include <vector>

namespace metat2 {

template <class S, class T>
Tensor<S> stack(const std::vector<const Grid<T>*>& items) {
  if (items.empty()) throw std::invalid_argument("stack: empty batch");
  const int rows = items.front()->rows, cols = items.front()->cols;
  Tensor<S> out(Shape{static_cast<int>(items.size()), 1, rows, cols});
  std::size_t pos = 0;
  for (const auto* g : items) {
    if (g->rows != rows || g->cols != cols) throw std::invalid_argument("stack: images differ in shape");
    for (const T& v : g->data) out.data[pos++] = static_cast<S>(v);
  }
  return out;
}

template <class S, class T>
Tensor<S> stack_one(const Grid<T>& g) {
  return stack<S, T>({&g});
}

// Extracts sample `n` (channel 0) as a float image.
template <class S>
Image unstack(std::span<const S> values, const Shape& shape, int n) {
  Image out(shape.h, shape.w);
  const std::size_t offset = n * shape.per_sample();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = static_cast<float>(values[offset + i]);
  return out;
}

template <class S>
Tensor<S> standard_normal(Shape shape, Rng& rng) {
  Tensor<S> t(shape);
  for (auto& v : t.data) v = static_cast<S>(rng.normal());
  return t;
}

}  // namespace metat2
