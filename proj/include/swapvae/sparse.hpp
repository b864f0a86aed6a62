#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <tuple>
#include <vector>

#include "errors.hpp"
#include "hash.hpp"
#include "mesh.hpp"

namespace swapvae {

// Compressed sparse row matrix with double values.
struct CsrMatrix {
  Index rows = 0;
  Index cols = 0;
  std::vector<Index> row_offsets{0};
  std::vector<Index> col_indices;
  std::vector<double> values;

  std::size_t nnz() const { return values.size(); }

  // Triplets need not be sorted; duplicates are summed.
  static CsrMatrix from_triplets(Index rows, Index cols,
                                 std::vector<std::tuple<Index, Index, double>> triplets) {
    std::sort(triplets.begin(), triplets.end(), [](const auto& a, const auto& b) {
      return std::tie(std::get<0>(a), std::get<1>(a)) < std::tie(std::get<0>(b), std::get<1>(b));
    });
    CsrMatrix m;
    m.rows = rows;
    m.cols = cols;
    m.row_offsets.assign(static_cast<std::size_t>(rows) + 1, 0);
    Index last_row = -1;
    for (const auto& [r, c, v] : triplets) {
      require(r >= 0 && r < rows && c >= 0 && c < cols, "sparse triplet out of range");
      if (last_row == r && m.col_indices.back() == c) {
        m.values.back() += v;
      } else {
        m.col_indices.push_back(c);
        m.values.push_back(v);
        ++m.row_offsets[r + 1];
        last_row = r;
      }
    }
    for (Index r = 0; r < rows; ++r) m.row_offsets[r + 1] += m.row_offsets[r];
    return m;
  }

  static CsrMatrix identity(Index n) {
    std::vector<std::tuple<Index, Index, double>> t;
    for (Index i = 0; i < n; ++i) t.emplace_back(i, i, 1.0);
    return from_triplets(n, n, std::move(t));
  }

  double at(Index r, Index c) const {
    for (Index k = row_offsets[r]; k < row_offsets[r + 1]; ++k) {
      if (col_indices[k] == c) return values[k];
    }
    return 0.0;
  }

  std::vector<double> dense() const {
    std::vector<double> d(static_cast<std::size_t>(rows) * cols, 0.0);
    for (Index r = 0; r < rows; ++r) {
      for (Index k = row_offsets[r]; k < row_offsets[r + 1]; ++k) {
        d[static_cast<std::size_t>(r) * cols + col_indices[k]] += values[k];
      }
    }
    return d;
  }

  // out[batch*rows, C] = blockdiag(this) * in[batch*cols, C], row-major.
  template <typename T>
  void apply(std::span<const T> in, std::span<T> out, std::size_t channels,
             std::size_t batch = 1) const {
    require(in.size() == batch * cols * channels && out.size() == batch * rows * channels,
            "sparse product shape mismatch");
    std::fill(out.begin(), out.end(), T(0));
    for (std::size_t b = 0; b < batch; ++b) {
      const T* src = in.data() + b * cols * channels;
      T* dst = out.data() + b * rows * channels;
      for (Index r = 0; r < rows; ++r) {
        T* o = dst + static_cast<std::size_t>(r) * channels;
        for (Index k = row_offsets[r]; k < row_offsets[r + 1]; ++k) {
          const T w = static_cast<T>(values[k]);
          const T* s = src + static_cast<std::size_t>(col_indices[k]) * channels;
          for (std::size_t c = 0; c < channels; ++c) o[c] += w * s[c];
        }
      }
    }
  }

  // out[batch*cols, C] += blockdiag(this)^T * in[batch*rows, C].
  template <typename T>
  void apply_transpose_add(std::span<const T> in, std::span<T> out, std::size_t channels,
                           std::size_t batch = 1) const {
    require(in.size() == batch * rows * channels && out.size() == batch * cols * channels,
            "sparse transpose product shape mismatch");
    for (std::size_t b = 0; b < batch; ++b) {
      const T* src = in.data() + b * rows * channels;
      T* dst = out.data() + b * cols * channels;
      for (Index r = 0; r < rows; ++r) {
        const T* s = src + static_cast<std::size_t>(r) * channels;
        for (Index k = row_offsets[r]; k < row_offsets[r + 1]; ++k) {
          const T w = static_cast<T>(values[k]);
          T* o = dst + static_cast<std::size_t>(col_indices[k]) * channels;
          for (std::size_t c = 0; c < channels; ++c) o[c] += w * s[c];
        }
      }
    }
  }

  void hash_into(Fnv1a& h) const {
    h.update(&rows, sizeof(rows));
    h.update(&cols, sizeof(cols));
    h.update(row_offsets);
    h.update(col_indices);
    h.update(values);
  }

  bool operator==(const CsrMatrix& o) const {
    return rows == o.rows && cols == o.cols && row_offsets == o.row_offsets &&
           col_indices == o.col_indices && values == o.values;
  }
};

}  // namespace swapvae
