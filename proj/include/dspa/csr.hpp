#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dspa/error.hpp"
#include "dspa/tensor.hpp"
#include "dspa/topk.hpp"

namespace dspa {

/// Compressed-sparse-row f32 matrix with strictly ascending column indices
/// within each row. Explicit zeros are never stored.
struct CsrMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint64_t> row_ptr{0};
  std::vector<FeatureIndex> col_idx;
  std::vector<float> values;

  std::size_t nnz() const noexcept { return values.size(); }

  std::span<const FeatureIndex> row_cols(std::size_t r) const {
    return {col_idx.data() + row_ptr[r], static_cast<std::size_t>(row_ptr[r + 1] - row_ptr[r])};
  }
  std::span<const float> row_values(std::size_t r) const {
    return {values.data() + row_ptr[r], static_cast<std::size_t>(row_ptr[r + 1] - row_ptr[r])};
  }

  float at(std::size_t r, std::size_t c) const {
    auto cs = row_cols(r);
    for (std::size_t e = 0; e < cs.size(); ++e)
      if (cs[e] == c) return row_values(r)[e];
    return 0.0f;
  }

  static CsrMatrix from_dense(const Matrix& m) {
    CsrMatrix out;
    out.rows = m.rows();
    out.cols = m.cols();
    out.row_ptr.assign(1, 0);
    for (std::size_t r = 0; r < m.rows(); ++r) {
      for (std::size_t c = 0; c < m.cols(); ++c) {
        if (m(r, c) != 0.0f) {
          out.col_idx.push_back(static_cast<FeatureIndex>(c));
          out.values.push_back(m(r, c));
        }
      }
      out.row_ptr.push_back(out.values.size());
    }
    return out;
  }

  Matrix to_dense() const {
    Matrix m(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
      auto cs = row_cols(r);
      auto vs = row_values(r);
      for (std::size_t e = 0; e < cs.size(); ++e) m(r, cs[e]) = vs[e];
    }
    return m;
  }

  /// Throws kMalformedMetadata unless the arrays describe a well-formed matrix.
  void validate() const {
    auto bad = [](const std::string& why) { fail(ErrorCode::kMalformedMetadata, "CSR: " + why); };
    if (row_ptr.size() != rows + 1) bad("row_ptr must have rows + 1 entries");
    if (row_ptr.front() != 0) bad("row_ptr must start at 0");
    if (row_ptr.back() != values.size() || col_idx.size() != values.size()) bad("nnz mismatch");
    for (std::size_t r = 0; r < rows; ++r)
      if (row_ptr[r + 1] < row_ptr[r]) bad("row_ptr not monotone");
    for (std::size_t r = 0; r < rows; ++r) {
      for (auto e = row_ptr[r]; e < row_ptr[r + 1]; ++e) {
        if (col_idx[e] >= cols) bad("column index out of range");
        if (e > row_ptr[r] && col_idx[e - 1] >= col_idx[e]) bad("column indices not strictly ascending");
        if (!std::isfinite(values[e])) fail(ErrorCode::kNonFinite, "CSR value is not finite");
      }
    }
  }

  friend bool operator==(const CsrMatrix&, const CsrMatrix&) = default;
};

/// Sum of the selected rows, accumulated in f64 in ascending row order.
/// Computes A^T x for a 0/1 indicator x.
inline std::vector<double> sum_rows(const CsrMatrix& a, std::span<const FeatureIndex> rows) {
  std::vector<FeatureIndex> ordered(rows.begin(), rows.end());
  std::sort(ordered.begin(), ordered.end());
  std::vector<double> out(a.cols, 0.0);
  for (auto r : ordered) {
    require(r < a.rows, ErrorCode::kInvalidArgument, "row index out of range");
    auto cs = a.row_cols(r);
    auto vs = a.row_values(r);
    for (std::size_t e = 0; e < cs.size(); ++e) out[cs[e]] += static_cast<double>(vs[e]);
  }
  return out;
}

/// Column sums over stored entries, accumulated in f64 in row order.
inline std::vector<double> column_sums(const CsrMatrix& a) {
  std::vector<double> out(a.cols, 0.0);
  for (std::size_t e = 0; e < a.nnz(); ++e) out[a.col_idx[e]] += static_cast<double>(a.values[e]);
  return out;
}

}  // namespace dspa
