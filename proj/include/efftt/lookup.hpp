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

#include <optional>
#include <unordered_map>

#include "efftt/tt_core.hpp"

namespace efftt {

/// Multiset of row ids whose embeddings are sum-pooled.
using IndexBag = std::vector<Index>;

struct OpCounters {
  std::int64_t slice_mults = 0;    // slice-chain matrix products
  std::int64_t row_adds = 0;       // vector additions (slice folding and pooling)
  std::int64_t buffer_hits = 0;    // indices served by an already-claimed prefix
  std::int64_t buffer_misses = 0;  // indices that claimed a new buffer slot

  OpCounters& operator+=(const OpCounters& o) {
    slice_mults += o.slice_mults;
    row_adds += o.row_adds;
    buffer_hits += o.buffer_hits;
    buffer_misses += o.buffer_misses;
    return *this;
  }
  friend bool operator==(const OpCounters&, const OpCounters&) = default;
};

inline void validate_bag(std::span<const Index> bag, Index rows) {
  EFFTT_REQUIRE(!bag.empty(), "empty index bag");
  for (Index i : bag)
    if (i < 0 || i >= rows)
      throw std::out_of_range(detail::concat("index ", i, " outside table of ", rows, " rows"));
}

/// Prefix (first two digits) of a row in a 3-core table.
inline Index prefix_key(Index row, const TtShape& shape) { return row / shape.m[2]; }

struct ReuseWork {
  Index prefix = 0;
  Index i1 = 0;  // digit into core 1
  Index i2 = 0;  // digit into core 2
  Index slot = 0;
  friend bool operator==(const ReuseWork&, const ReuseWork&) = default;
};

/// Deduplicated prefix-product work list. Slots are claimed in first-occurrence
/// order over the input, the serial equivalent of one winner per prefix.
struct ReusePlan {
  std::vector<ReuseWork> work;
  std::unordered_map<Index, Index> slot_of;
  Index buf_len = 0;
  Index num_indices = 0;
  TtShape shape;

  Index slot(Index row) const {
    auto it = slot_of.find(prefix_key(row, shape));
    if (it == slot_of.end())
      throw std::invalid_argument(detail::concat("row ", row, " has no slot in reuse plan"));
    return it->second;
  }

  /// Claim statistics: every index either claims a slot or hits an existing one.
  OpCounters claim_counters() const {
    OpCounters c;
    c.buffer_misses = buf_len;
    c.buffer_hits = num_indices - buf_len;
    return c;
  }
};

inline ReusePlan prepare_reuse_plan(std::span<const Index> indices, const TtShape& shape) {
  EFFTT_REQUIRE(shape.dims() == 3, "reuse plan is defined for 3-core tables only (d=", shape.dims(), ")");
  const Index rows = shape.rows();
  ReusePlan plan;
  plan.shape = shape;
  plan.num_indices = static_cast<Index>(indices.size());
  for (Index row : indices) {
    if (row < 0 || row >= rows)
      throw std::out_of_range(detail::concat("index ", row, " outside table of ", rows, " rows"));
    const Index key = prefix_key(row, shape);
    auto [it, claimed] = plan.slot_of.try_emplace(key, plan.buf_len);
    if (!claimed) continue;
    plan.work.push_back({key, key / shape.m[1], key % shape.m[1], plan.buf_len});
    ++plan.buf_len;
  }
  return plan;
}

/// One slot per claimed prefix: core-1 slice times core-2 slice, laid out as
/// (j_1, j_2, r_2), i.e. a 1 x (n_1 * n_2 * R_2) row.
template <typename T>
struct ReuseBuffer {
  Index buf_len = 0;
  Index width = 0;
  std::vector<T> slots;

  std::span<const T> slot(Index s) const {
    return {slots.data() + s * width, static_cast<std::size_t>(width)};
  }
};

template <typename T>
ReuseBuffer<T> execute_prefix_products(const ReusePlan& plan, const TtTable<T>& table,
                                       OpCounters* counters = nullptr) {
  EFFTT_REQUIRE(plan.buf_len > 0, "empty reuse plan");
  EFFTT_REQUIRE(plan.shape == table.shape(), "reuse plan built for a different table shape");
  const auto& s = table.shape();
  ReuseBuffer<T> buf;
  buf.buf_len = plan.buf_len;
  buf.width = s.n[0] * s.n[1] * s.ranks[2];
  buf.slots.resize(static_cast<std::size_t>(buf.buf_len * buf.width));
  // Each work entry is independent; this loop is the batched product.
  std::vector<T> first;
  std::vector<T> second;
  const T one{1};
  for (const auto& w : plan.work) {
    detail::chain_step<T>(std::span<const T>(&one, 1), 1, table, 0, w.i1, first);
    detail::chain_step<T>(first, s.n[0], table, 1, w.i2, second);
    std::copy(second.begin(), second.end(), buf.slots.begin() + w.slot * buf.width);
  }
  if (counters) counters->slice_mults += plan.buf_len;
  return buf;
}

template <typename T>
struct ReuseView {
  const ReusePlan& plan;
  const ReuseBuffer<T>& buffer;
};

namespace detail {

template <typename T>
void add_into(std::vector<T>& acc, std::span<const T> v, bool first) {
  if (first) {
    acc.assign(v.begin(), v.end());
  } else {
    for (std::size_t q = 0; q < acc.size(); ++q) acc[q] += v[q];
  }
}

}  // namespace detail

/// Sum-pooled embedding of a bag. With a reuse view, indices sharing a prefix
/// first fold their final-core slices, then multiply the shared prefix product
/// once: Row_a + Row_b = P x (S_a + S_b).
template <typename T>
std::vector<T> lookup_bag(const TtTable<T>& table, std::span<const Index> bag,
                          const ReuseView<T>* reuse = nullptr, OpCounters* counters = nullptr) {
  const auto& s = table.shape();
  validate_bag(bag, table.rows());
  OpCounters local;
  std::vector<T> out;

  if (!reuse) {
    bool first = true;
    for (Index row : bag) {
      const auto r = reconstruct_row(table, row);
      detail::add_into<T>(out, r, first);
      if (!first) ++local.row_adds;
      first = false;
      local.slice_mults += static_cast<std::int64_t>(s.dims()) - 1;
    }
    if (counters) *counters += local;
    return out;
  }

  EFFTT_REQUIRE(s.dims() == 3, "reuse lookup requires a 3-core table");
  EFFTT_REQUIRE(reuse->plan.shape == s, "reuse plan/table shape mismatch");
  const Index m3 = s.m[2];
  const Index n3 = s.n[2];
  const Index r2 = s.ranks[2];
  const Index lead = s.n[0] * s.n[1];

  // Group bag positions by prefix, first-occurrence order.
  std::vector<Index> group_prefix;
  std::vector<std::vector<Index>> group_digits;
  for (Index row : bag) {
    const Index key = row / m3;
    auto it = std::find(group_prefix.begin(), group_prefix.end(), key);
    if (it == group_prefix.end()) {
      group_prefix.push_back(key);
      group_digits.push_back({row % m3});
    } else {
      group_digits[static_cast<std::size_t>(it - group_prefix.begin())].push_back(row % m3);
    }
  }

  std::vector<T> folded(static_cast<std::size_t>(r2 * n3));
  std::vector<T> group_row(static_cast<std::size_t>(lead * n3));
  bool first_group = true;
  for (std::size_t g = 0; g < group_prefix.size(); ++g) {
    const Index slot = reuse->plan.slot(group_prefix[g] * m3);
    EFFTT_REQUIRE(slot < reuse->buffer.buf_len, "reuse buffer does not cover slot ", slot);
    // Final core has R_3 = 1: slice i_3 is R_2 x n_3.
    bool first_member = true;
    for (Index i3 : group_digits[g]) {
      for (Index r = 0; r < r2; ++r) {
        const T* src = table.slice_row(2, i3, r);
        T* dst = folded.data() + r * n3;
        for (Index j = 0; j < n3; ++j) dst[j] = first_member ? src[j] : dst[j] + src[j];
      }
      if (!first_member) ++local.row_adds;
      first_member = false;
    }
    const auto prefix = reuse->buffer.slot(slot);
    std::fill(group_row.begin(), group_row.end(), T{0});
    for (Index J = 0; J < lead; ++J)
      for (Index r = 0; r < r2; ++r) {
        const T a = prefix[static_cast<std::size_t>(J * r2 + r)];
        const T* src = folded.data() + r * n3;
        T* dst = group_row.data() + J * n3;
        for (Index j = 0; j < n3; ++j) dst[j] += a * src[j];
      }
    ++local.slice_mults;
    detail::add_into<T>(out, group_row, first_group);
    if (!first_group) ++local.row_adds;
    first_group = false;
  }
  if (counters) *counters += local;
  return out;
}

template <typename T>
struct ForwardResult {
  Index batch = 0;
  Index cols = 0;
  std::vector<T> out;  // batch x cols, row-major
  OpCounters counters;
  std::optional<ReusePlan> plan;
  std::optional<ReuseBuffer<T>> buffer;

  std::span<const T> row(Index b) const {
    return {out.data() + b * cols, static_cast<std::size_t>(cols)};
  }
};

/// Batch lookup with one reuse plan shared across all bags. Tables that are not
/// 3-core fall back to direct reconstruction.
template <typename T>
ForwardResult<T> forward_batch(const TtTable<T>& table, std::span<const IndexBag> batch,
                               bool use_reuse = true) {
  EFFTT_REQUIRE(!batch.empty(), "empty batch");
  for (const auto& bag : batch) validate_bag(bag, table.rows());

  ForwardResult<T> res;
  res.batch = static_cast<Index>(batch.size());
  res.cols = table.cols();
  res.out.resize(static_cast<std::size_t>(res.batch * res.cols));

  const bool reuse = use_reuse && table.dims() == 3;
  if (reuse) {
    std::vector<Index> all;
    for (const auto& bag : batch) all.insert(all.end(), bag.begin(), bag.end());
    res.plan = prepare_reuse_plan(all, table.shape());
    res.buffer = execute_prefix_products(*res.plan, table, &res.counters);
    res.counters += res.plan->claim_counters();
  }
  for (std::size_t b = 0; b < batch.size(); ++b) {
    std::vector<T> row;
    if (reuse) {
      const ReuseView<T> view{*res.plan, *res.buffer};
      row = lookup_bag<T>(table, std::span<const Index>(batch[b]), &view, &res.counters);
    } else {
      row = lookup_bag<T>(table, std::span<const Index>(batch[b]), nullptr, &res.counters);
    }
    std::copy(row.begin(), row.end(), res.out.begin() + static_cast<Index>(b) * res.cols);
  }
  return res;
}

}  // namespace efftt
