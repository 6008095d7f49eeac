/*
 * Copyright (c) 2026, The efftt authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <string_view>
#include <tuple>

#include "efftt/common.hpp"

namespace efftt {

/// Row/column factorization and TT ranks of a compressed M x N table.
///
/// Row i of the logical table maps to the mixed-radix digits (i_1..i_d) in
/// radices m (big-endian), column j likewise in radices n. Core k has extent
/// R_{k-1} x (m_k * n_k) x R_k with the middle axis flattened as i_k * n_k + j_k.
struct TtShape {
  std::vector<Index> m;
  std::vector<Index> n;
  std::vector<Index> ranks;

  std::size_t dims() const noexcept { return m.size(); }
  Index rows() const { return product(m); }
  Index cols() const { return product(n); }
  Index core_size(std::size_t k) const { return ranks[k] * m[k] * n[k] * ranks[k + 1]; }

  void validate() const {
    EFFTT_REQUIRE(m.size() >= 2, "TT shape needs at least two cores, got ", m.size());
    EFFTT_REQUIRE(n.size() == m.size(), "len(n)=", n.size(), " != len(m)=", m.size());
    EFFTT_REQUIRE(ranks.size() == m.size() + 1, "len(ranks) must be d+1");
    EFFTT_REQUIRE(ranks.front() == 1 && ranks.back() == 1, "boundary ranks must be 1");
    for (std::size_t k = 0; k < m.size(); ++k)
      EFFTT_REQUIRE(m[k] >= 1 && n[k] >= 1, "factor sizes must be positive");
    for (Index r : ranks) EFFTT_REQUIRE(r >= 1, "ranks must be positive");
  }

  friend bool operator==(const TtShape&, const TtShape&) = default;
};

struct DimFactors {
  std::vector<Index> m;
  std::vector<Index> n;
};

namespace detail {

// Non-decreasing d-tuples with product exactly `value`, factors >= min_factor.
inline void exact_factorizations(Index value, std::size_t d, Index min_factor,
                                 std::vector<Index>& cur, std::vector<std::vector<Index>>& out) {
  if (cur.size() + 1 == d) {
    if (value >= min_factor) {
      cur.push_back(value);
      out.push_back(cur);
      cur.pop_back();
    }
    return;
  }
  for (Index f = min_factor; f <= value; ++f) {
    if (value % f != 0) continue;
    // remaining factors are >= f, so f^(remaining) must not exceed value
    Index bound = 1;
    bool over = false;
    for (std::size_t r = cur.size(); r < d; ++r) {
      bound *= f;
      if (bound > value) {
        over = true;
        break;
      }
    }
    if (over) break;
    cur.push_back(f);
    exact_factorizations(value / f, d, f, cur, out);
    cur.pop_back();
  }
}

inline bool more_balanced(const std::vector<Index>& a, const std::vector<Index>& b) {
  const Index spread_a = a.back() - a.front();
  const Index spread_b = b.back() - b.front();
  if (spread_a != spread_b) return spread_a < spread_b;
  return a < b;
}

}  // namespace detail

/// Chooses row and column factorizations for a rows x cols table split over
/// d cores. Columns are factorized exactly (factors >= 2; factors of 1 are
/// allowed only when cols < 2^d). Rows may be padded: among near-balanced
/// tuples (every factor within 2x of rows^(1/d)) the smallest product >= rows
/// wins, ties going to the smallest spread. Factors are returned sorted.
inline DimFactors factorize_dims(Index rows, Index cols, int d) {
  EFFTT_REQUIRE(d == 2 || d == 3, "factorize_dims supports d in {2,3}, got ", d);
  EFFTT_REQUIRE(rows >= 1 && cols >= 1, "table extents must be positive");
  const auto dd = static_cast<std::size_t>(d);

  DimFactors out;
  {
    std::vector<std::vector<Index>> cands;
    std::vector<Index> cur;
    detail::exact_factorizations(cols, dd, 2, cur, cands);
    if (cands.empty()) {
      EFFTT_REQUIRE(cols < (Index{1} << d), "embedding dim ", cols,
                    " has no ", d, "-way factorization with factors >= 2");
      detail::exact_factorizations(cols, dd, 1, cur, cands);
    }
    out.n = *std::min_element(cands.begin(), cands.end(), detail::more_balanced);
  }

  const double root = std::pow(static_cast<double>(rows), 1.0 / d);
  const Index lo = std::max<Index>(1, static_cast<Index>(std::ceil(root / 2.0 - 1e-9)));
  const Index hi = std::max<Index>(lo, static_cast<Index>(std::floor(2.0 * root + 1e-9)));
  auto ceil_div = [](Index a, Index b) { return (a + b - 1) / b; };

  std::vector<Index> best;
  Index best_prod = std::numeric_limits<Index>::max();
  auto consider = [&](std::vector<Index> t) {
    const Index p = product(t);
    if (p < best_prod || (p == best_prod && detail::more_balanced(t, best))) {
      best_prod = p;
      best = std::move(t);
    }
  };
  if (d == 2) {
    for (Index a = lo; a <= hi; ++a) {
      const Index b = std::max(a, ceil_div(rows, a));
      if (b <= hi) consider({a, b});
    }
  } else {
    for (Index a = lo; a <= hi; ++a)
      for (Index b = a; b <= hi; ++b) {
        const Index c = std::max(b, ceil_div(rows, a * b));
        if (c <= hi) consider({a, b, c});
      }
  }
  out.m = std::move(best);
  return out;
}

/// Shape with uniform interior rank: ranks = [1, rank, ..., rank, 1].
inline TtShape make_shape(Index rows, Index cols, int d, Index rank) {
  EFFTT_REQUIRE(rank >= 1, "rank must be positive");
  auto f = factorize_dims(rows, cols, d);
  TtShape s{std::move(f.m), std::move(f.n), std::vector<Index>(static_cast<std::size_t>(d) + 1, rank)};
  s.ranks.front() = 1;
  s.ranks.back() = 1;
  return s;
}

/// Big-endian mixed-radix digits: digit k = floor(row / prod_{j>k} radix_j) mod radix_k.
inline std::vector<Index> linear_index_to_tt_index(Index row, std::span<const Index> radices) {
  const Index total = product(radices);
  if (row < 0 || row >= total)
    throw std::out_of_range(detail::concat("row ", row, " outside [0, ", total, ")"));
  std::vector<Index> digits(radices.size());
  for (std::size_t k = radices.size(); k-- > 0;) {
    digits[k] = row % radices[k];
    row /= radices[k];
  }
  return digits;
}

inline Index tt_index_to_linear_index(std::span<const Index> digits, std::span<const Index> radices) {
  Index row = 0;
  for (std::size_t k = 0; k < radices.size(); ++k) row = row * radices[k] + digits[k];
  return row;
}

/// Dense M_padded x N matrix; the uncompressed counterpart of a TtTable.
template <typename T>
struct DenseTable {
  Index rows = 0;
  Index cols = 0;
  std::vector<T> data;

  DenseTable() = default;
  DenseTable(Index r, Index c) : rows(r), cols(c), data(static_cast<std::size_t>(r * c), T{0}) {}

  std::span<T> row(Index i) { return {data.data() + i * cols, static_cast<std::size_t>(cols)}; }
  std::span<const T> row(Index i) const {
    return {data.data() + i * cols, static_cast<std::size_t>(cols)};
  }
};

/// The compressed embedding table: d cores laid out per TtShape.
template <typename T>
class TtTable {
 public:
  using value_type = T;

  TtTable() = default;
  explicit TtTable(TtShape shape) : shape_(std::move(shape)) {
    shape_.validate();
    cores_.resize(shape_.dims());
    for (std::size_t k = 0; k < cores_.size(); ++k)
      cores_[k].assign(static_cast<std::size_t>(shape_.core_size(k)), T{0});
  }

  const TtShape& shape() const noexcept { return shape_; }
  std::size_t dims() const noexcept { return shape_.dims(); }
  Index rows() const { return shape_.rows(); }
  Index cols() const { return shape_.cols(); }

  std::span<T> core(std::size_t k) { return cores_[k]; }
  std::span<const T> core(std::size_t k) const { return cores_[k]; }

  T& at(std::size_t k, Index r_prev, Index mid, Index r_next) {
    return cores_[k][offset(k, r_prev, mid, r_next)];
  }
  const T& at(std::size_t k, Index r_prev, Index mid, Index r_next) const {
    return cores_[k][offset(k, r_prev, mid, r_next)];
  }

  /// The n_k * R_k entries of slice (i_k, :) for one r_prev, contiguous as (j_k, r_next).
  const T* slice_row(std::size_t k, Index i_k, Index r_prev) const {
    return cores_[k].data() + offset(k, r_prev, i_k * shape_.n[k], 0);
  }

  std::size_t parameter_count() const {
    std::size_t c = 0;
    for (const auto& core : cores_) c += core.size();
    return c;
  }

  friend bool operator==(const TtTable&, const TtTable&) = default;

 private:
  std::size_t offset(std::size_t k, Index r_prev, Index mid, Index r_next) const {
    const Index width = shape_.m[k] * shape_.n[k];
    return static_cast<std::size_t>((r_prev * width + mid) * shape_.ranks[k + 1] + r_next);
  }

  TtShape shape_;
  std::vector<std::vector<T>> cores_;
};

namespace detail {

/// One step of the left-to-right contraction. `cur` is (lead x R_k) row-major;
/// the result is ((lead * n_k) x R_{k+1}) after multiplying by slice i_k of core k.
template <typename Acc, typename T>
void chain_step(std::span<const Acc> cur, Index lead, const TtTable<T>& table, std::size_t k,
                Index i_k, std::vector<Acc>& out) {
  const auto& s = table.shape();
  const Index r_in = s.ranks[k];
  const Index width = s.n[k] * s.ranks[k + 1];
  out.assign(static_cast<std::size_t>(lead * width), Acc{0});
  for (Index J = 0; J < lead; ++J) {
    Acc* dst = out.data() + J * width;
    for (Index r = 0; r < r_in; ++r) {
      const Acc a = cur[static_cast<std::size_t>(J * r_in + r)];
      const T* src = table.slice_row(k, i_k, r);
      for (Index q = 0; q < width; ++q) dst[q] += a * static_cast<Acc>(src[q]);
    }
  }
}

}  // namespace detail

/// Reconstructs one embedding row by progressive left-to-right contraction
/// over the column digits.
template <typename T>
std::vector<T> reconstruct_row(const TtTable<T>& table, Index row) {
  const auto& s = table.shape();
  const auto digits = linear_index_to_tt_index(row, s.m);
  std::vector<T> cur{T{1}};
  std::vector<T> next;
  Index lead = 1;
  for (std::size_t k = 0; k < s.dims(); ++k) {
    detail::chain_step<T>(cur, lead, table, k, digits[k], next);
    lead *= s.n[k];
    std::swap(cur, next);
  }
  return cur;
}

inline constexpr Index kMaxDenseElements = Index{1} << 24;

/// Materializes the full table; guarded to M_padded * N <= 2^24.
template <typename T>
DenseTable<T> reconstruct_full(const TtTable<T>& table) {
  const Index rows = table.rows();
  const Index cols = table.cols();
  EFFTT_REQUIRE(rows * cols <= kMaxDenseElements, "table of ", rows, "x", cols,
                " too large for dense reconstruction");
  DenseTable<T> out(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    const auto r = reconstruct_row(table, i);
    std::copy(r.begin(), r.end(), out.row(i).begin());
  }
  return out;
}

struct ParamStats {
  Index tt_params = 0;
  Index dense_params = 0;
  double ratio = 0.0;
};

inline ParamStats param_stats(const TtShape& shape, Index rows, Index cols) {
  shape.validate();
  ParamStats st;
  for (std::size_t k = 0; k < shape.dims(); ++k) st.tt_params += shape.core_size(k);
  st.dense_params = rows * cols;
  st.ratio = static_cast<double>(st.dense_params) / static_cast<double>(st.tt_params);
  return st;
}

/// Gaussian cores scaled so reconstructed entries have roughly target_row_std:
/// per-core std = target^(1/d) / (mean interior rank)^((d-1)/(2d)).
template <typename T>
TtTable<T> init_random(const TtShape& shape, std::uint64_t seed, double target_row_std) {
  EFFTT_REQUIRE(target_row_std > 0.0, "target_row_std must be positive");
  TtTable<T> table(shape);
  const auto d = static_cast<double>(shape.dims());
  double mean_rank = 0.0;
  for (std::size_t k = 1; k < shape.dims(); ++k) mean_rank += static_cast<double>(shape.ranks[k]);
  mean_rank /= d - 1.0;
  const double core_std = std::pow(target_row_std, 1.0 / d) / std::pow(mean_rank, (d - 1.0) / (2.0 * d));
  Rng rng(seed);
  for (std::size_t k = 0; k < shape.dims(); ++k)
    for (T& x : table.core(k)) x = static_cast<T>(rng.normal(0.0, core_std));
  return table;
}

// Binary container: "TTEMB1\n", d, m[], n[], ranks[] as LE int64, then the
// cores in order as LE float32.
inline constexpr std::string_view kTtMagic = "TTEMB1\n";

template <typename T>
void write_tt_table(std::ostream& os, const TtTable<T>& table) {
  const auto& s = table.shape();
  os.write(kTtMagic.data(), static_cast<std::streamsize>(kTtMagic.size()));
  le::put_i64(os, static_cast<std::int64_t>(s.dims()));
  for (Index v : s.m) le::put_i64(os, v);
  for (Index v : s.n) le::put_i64(os, v);
  for (Index v : s.ranks) le::put_i64(os, v);
  for (std::size_t k = 0; k < s.dims(); ++k)
    for (T x : table.core(k)) le::put_f32(os, static_cast<float>(x));
}

template <typename T>
TtTable<T> read_tt_table(std::istream& is) {
  std::string magic(kTtMagic.size(), '\0');
  if (!is.read(magic.data(), static_cast<std::streamsize>(magic.size())) || magic != kTtMagic)
    throw DataError("not a TT table container (bad magic)");
  const std::int64_t d = le::get_i64(is);
  if (d < 2 || d > 16) throw DataError(detail::concat("implausible core count ", d));
  TtShape s;
  s.m.resize(static_cast<std::size_t>(d));
  s.n.resize(static_cast<std::size_t>(d));
  s.ranks.resize(static_cast<std::size_t>(d) + 1);
  for (auto& v : s.m) v = le::get_i64(is);
  for (auto& v : s.n) v = le::get_i64(is);
  for (auto& v : s.ranks) v = le::get_i64(is);
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("corrupt TT shape: ") + e.what());
  }
  TtTable<T> table(s);
  for (std::size_t k = 0; k < s.dims(); ++k)
    for (T& x : table.core(k)) x = static_cast<T>(le::get_f32(is));
  return table;
}

template <typename T>
void save_tt_table(const std::string& path, const TtTable<T>& table) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  write_tt_table(os, table);
}

template <typename T>
TtTable<T> load_tt_table(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  return read_tt_table<T>(is);
}

}  // namespace efftt
