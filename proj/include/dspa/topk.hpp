#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dspa/error.hpp"

namespace dspa {

using FeatureIndex = std::uint32_t;

/// Indices of the k largest values, ordered by value descending. Equal values
/// are ordered by lower index first, so the selection is deterministic.
template <typename T>
std::vector<FeatureIndex> top_k_indices(std::span<const T> values, std::size_t k) {
  require(k <= values.size(), ErrorCode::kInvalidArgument,
          "k = " + std::to_string(k) + " exceeds length " + std::to_string(values.size()));
  std::vector<FeatureIndex> idx(values.size());
  std::iota(idx.begin(), idx.end(), FeatureIndex{0});
  auto before = [&](FeatureIndex a, FeatureIndex b) {
    return values[a] > values[b] || (values[a] == values[b] && a < b);
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), before);
  idx.resize(k);
  return idx;
}

/// Indices of the k smallest values, ordered by value ascending, lower index
/// first among equal values.
template <typename T>
std::vector<FeatureIndex> bottom_k_indices(std::span<const T> values, std::size_t k) {
  require(k <= values.size(), ErrorCode::kInvalidArgument,
          "k = " + std::to_string(k) + " exceeds length " + std::to_string(values.size()));
  std::vector<FeatureIndex> idx(values.size());
  std::iota(idx.begin(), idx.end(), FeatureIndex{0});
  auto before = [&](FeatureIndex a, FeatureIndex b) {
    return values[a] < values[b] || (values[a] == values[b] && a < b);
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), before);
  idx.resize(k);
  return idx;
}

template <typename T>
std::vector<FeatureIndex> top_k_indices(const std::vector<T>& values, std::size_t k) {
  return top_k_indices(std::span<const T>(values), k);
}

template <typename T>
std::vector<FeatureIndex> bottom_k_indices(const std::vector<T>& values, std::size_t k) {
  return bottom_k_indices(std::span<const T>(values), k);
}

inline std::vector<FeatureIndex> sorted_copy(std::vector<FeatureIndex> v) {
  std::sort(v.begin(), v.end());
  return v;
}

}  // namespace dspa
