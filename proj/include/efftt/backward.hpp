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

#include <unordered_map>

#include "efftt/lookup.hpp"

namespace efftt {

/// Per-occurrence embedding gradients dL/de, flattened (count x dim).
template <typename T>
struct EmbGradBatch {
  std::vector<Index> indices;
  std::vector<T> grads;
  Index dim = 0;
};

/// One gradient per distinct row. Sums are kept in 64-bit regardless of T.
struct AggregatedGrads {
  std::vector<Index> unique_indices;
  std::vector<double> grads;  // unique x dim
  Index dim = 0;

  std::span<const double> grad(std::size_t u) const {
    return {grads.data() + u * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
  }
};

/// Merges gradients of repeated rows; output rows in first-occurrence order,
/// each sum accumulated left to right.
template <typename T>
AggregatedGrads unique_aggregate(std::span<const Index> indices, std::span<const T> grads, Index dim) {
  EFFTT_REQUIRE(!indices.empty(), "empty gradient batch");
  EFFTT_REQUIRE(dim > 0, "gradient dim must be positive");
  EFFTT_REQUIRE(grads.size() == indices.size() * static_cast<std::size_t>(dim),
                "gradient count does not match index count");
  AggregatedGrads out;
  out.dim = dim;
  std::unordered_map<Index, std::size_t> pos;
  for (std::size_t t = 0; t < indices.size(); ++t) {
    auto [it, fresh] = pos.try_emplace(indices[t], out.unique_indices.size());
    const T* g = grads.data() + t * static_cast<std::size_t>(dim);
    if (fresh) {
      out.unique_indices.push_back(indices[t]);
      out.grads.insert(out.grads.end(), g, g + dim);
    } else {
      double* acc = out.grads.data() + it->second * static_cast<std::size_t>(dim);
      for (Index q = 0; q < dim; ++q) acc[q] += static_cast<double>(g[q]);
    }
  }
  return out;
}

template <typename T>
AggregatedGrads unique_aggregate(const EmbGradBatch<T>& batch) {
  return unique_aggregate<T>(batch.indices, batch.grads, batch.dim);
}

/// Gradients w.r.t. every core, congruent to the table's cores.
struct CoreGrads {
  std::vector<std::vector<double>> cores;

  template <typename T>
  static CoreGrads zeros_like(const TtTable<T>& table) {
    CoreGrads g;
    g.cores.resize(table.dims());
    for (std::size_t k = 0; k < table.dims(); ++k) g.cores[k].assign(table.core(k).size(), 0.0);
    return g;
  }
};

/// Number of slice products tt_core_grads spends on one row of a d-core table:
/// (d-2) left-chain + (d-2) right-chain products, plus one product for each end
/// core and two for each interior core, i.e. d(d-1).
inline std::int64_t backward_mults_per_row(std::size_t d) {
  return static_cast<std::int64_t>(d * (d - 1));
}

/// dL/dD_k[:, (i_k, j_k), :] = (left chain)^T * dL/de(j_k) * (right chain)^T, with
/// dL/de reshaped over column digits and summed over all rows. When a reuse view
/// is supplied (3-core tables) the left chain of core 3 is read from the buffer.
template <typename T>
CoreGrads tt_core_grads(const TtTable<T>& table, std::span<const Index> rows,
                        std::span<const double> grads, const ReuseView<T>* reuse = nullptr,
                        OpCounters* counters = nullptr) {
  const auto& s = table.shape();
  const std::size_t d = s.dims();
  const Index N = s.cols();
  EFFTT_REQUIRE(grads.size() == rows.size() * static_cast<std::size_t>(N),
                "gradient rows do not match table width ", N);
  if (reuse) EFFTT_REQUIRE(d == 3 && reuse->plan.shape == s, "reuse view does not match table");

  CoreGrads out = CoreGrads::zeros_like(table);
  std::vector<double> contrib;

  // Column-digit extents to the left / right of each core.
  std::vector<Index> lead(d, 1), tail(d, 1);
  for (std::size_t k = 1; k < d; ++k) lead[k] = lead[k - 1] * s.n[k - 1];
  for (std::size_t k = d - 1; k-- > 0;) tail[k] = tail[k + 1] * s.n[k + 1];

  std::vector<std::vector<double>> left(d), right(d);
  std::vector<double> tmp;
  for (std::size_t u = 0; u < rows.size(); ++u) {
    const auto digits = linear_index_to_tt_index(rows[u], s.m);
    const double* g = grads.data() + u * static_cast<std::size_t>(N);
    std::int64_t mults = 0;

    // left[k]: lead[k] x R_k, product of slices 0..k-1.
    left[0] = {1.0};
    for (std::size_t k = 1; k < d; ++k) {
      if (k == 2 && reuse) {
        const auto slot = reuse->buffer.slot(reuse->plan.slot(rows[u]));
        left[k].assign(slot.begin(), slot.end());
        continue;
      }
      detail::chain_step<double>(left[k - 1], lead[k - 1], table, k - 1, digits[k - 1], left[k]);
      if (k >= 2) ++mults;
    }
    // right[k]: R_{k+1} x tail[k], product of slices k+1..d-1.
    right[d - 1] = {1.0};
    for (std::size_t k = d - 1; k-- > 0;) {
      const std::size_t c = k + 1;
      const Index r_in = s.ranks[c], r_out = s.ranks[c + 1], nc = s.n[c];
      const Index t_out = tail[c];
      auto& dst = right[k];
      dst.assign(static_cast<std::size_t>(r_in * nc * t_out), 0.0);
      for (Index a = 0; a < r_in; ++a) {
        const T* sl = table.slice_row(c, digits[c], a);  // (j, b) contiguous
        for (Index j = 0; j < nc; ++j)
          for (Index b = 0; b < r_out; ++b) {
            const double w = static_cast<double>(sl[j * r_out + b]);
            const double* src = right[c].data() + b * t_out;
            double* out_row = dst.data() + (a * nc + j) * t_out;
            for (Index t = 0; t < t_out; ++t) out_row[t] += w * src[t];
          }
      }
      if (k + 2 < d) ++mults;
    }

    for (std::size_t k = 0; k < d; ++k) {
      const Index r_in = s.ranks[k], r_out = s.ranks[k + 1], nk = s.n[k];
      const Index P = lead[k], S = tail[k];
      // tmp[p][j][b] = sum_t g[p][j][t] * right[k][b][t]
      tmp.assign(static_cast<std::size_t>(P * nk * r_out), 0.0);
      for (Index p = 0; p < P; ++p)
        for (Index j = 0; j < nk; ++j) {
          const double* gs = g + (p * nk + j) * S;
          for (Index b = 0; b < r_out; ++b) {
            const double* rt = right[k].data() + b * S;
            double acc = 0.0;
            for (Index t = 0; t < S; ++t) acc += gs[t] * rt[t];
            tmp[static_cast<std::size_t>((p * nk + j) * r_out + b)] = acc;
          }
        }
      // contrib[a][j][b] = sum_p left[k][p][a] * tmp[p][j][b]
      contrib.assign(static_cast<std::size_t>(r_in * nk * r_out), 0.0);
      for (Index p = 0; p < P; ++p)
        for (Index a = 0; a < r_in; ++a) {
          const double l = left[k][static_cast<std::size_t>(p * r_in + a)];
          const double* src = tmp.data() + p * nk * r_out;
          double* dst = contrib.data() + a * nk * r_out;
          for (Index q = 0; q < nk * r_out; ++q) dst[q] += l * src[q];
        }
      mults += (k == 0 || k + 1 == d) ? 1 : 2;

      auto& gk = out.cores[k];
      const Index width = s.m[k] * nk;
      for (Index a = 0; a < r_in; ++a) {
        double* dst = gk.data() + (a * width + digits[k] * nk) * r_out;
        const double* src = contrib.data() + a * nk * r_out;
        for (Index q = 0; q < nk * r_out; ++q) dst[q] += src[q];
      }
    }
    if (counters) counters->slice_mults += mults;
  }
  return out;
}

/// SGD with optional momentum; velocity exists iff momentum > 0.
template <typename T>
struct OptimizerState {
  double lr = 0.01;
  double momentum = 0.0;
  std::vector<std::vector<T>> velocity;

  static OptimizerState for_table(const TtTable<T>& table, double lr, double momentum = 0.0) {
    EFFTT_REQUIRE(lr >= 0.0, "learning rate must be non-negative");
    EFFTT_REQUIRE(momentum >= 0.0 && momentum < 1.0, "momentum must lie in [0, 1)");
    OptimizerState st;
    st.lr = lr;
    st.momentum = momentum;
    if (momentum > 0.0) {
      st.velocity.resize(table.dims());
      for (std::size_t k = 0; k < table.dims(); ++k) st.velocity[k].assign(table.core(k).size(), T{0});
    }
    return st;
  }
};

/// Single pass per core: v = mu*v + g; w -= lr*v (or w -= lr*g without momentum).
/// Gradients are validated before any parameter is touched.
template <typename T>
void fused_update(TtTable<T>& table, const CoreGrads& grads, OptimizerState<T>& opt) {
  EFFTT_REQUIRE(grads.cores.size() == table.dims(), "core gradient count mismatch");
  for (std::size_t k = 0; k < table.dims(); ++k) {
    EFFTT_REQUIRE(grads.cores[k].size() == table.core(k).size(), "core ", k, " gradient extent mismatch");
    if (!all_finite<double>(grads.cores[k]))
      throw NumericError(detail::concat("non-finite gradient in TT core ", k));
  }
  const bool use_momentum = opt.momentum > 0.0;
  EFFTT_REQUIRE(!use_momentum || opt.velocity.size() == table.dims(), "optimizer velocity not initialized");
  const T lr = static_cast<T>(opt.lr);
  const T mu = static_cast<T>(opt.momentum);
  for (std::size_t k = 0; k < table.dims(); ++k) {
    auto w = table.core(k);
    const auto& g = grads.cores[k];
    if (use_momentum) {
      auto& v = opt.velocity[k];
      for (std::size_t q = 0; q < w.size(); ++q) {
        v[q] = mu * v[q] + static_cast<T>(g[q]);
        w[q] -= lr * v[q];
      }
    } else {
      for (std::size_t q = 0; q < w.size(); ++q) w[q] -= lr * static_cast<T>(g[q]);
    }
  }
}

/// Aggregate -> core gradients -> fused update. Returns the operation counts of
/// the gradient stage.
template <typename T>
OpCounters backward_batch(TtTable<T>& table, const EmbGradBatch<T>& batch, const ReuseView<T>* reuse,
                          OptimizerState<T>& opt, bool aggregate = true) {
  OpCounters counters;
  CoreGrads grads;
  if (aggregate) {
    const auto agg = unique_aggregate(batch);
    grads = tt_core_grads(table, agg.unique_indices, agg.grads, reuse, &counters);
  } else {
    EFFTT_REQUIRE(batch.grads.size() == batch.indices.size() * static_cast<std::size_t>(batch.dim),
                  "gradient count does not match index count");
    std::vector<double> wide(batch.grads.begin(), batch.grads.end());
    grads = tt_core_grads(table, batch.indices, wide, reuse, &counters);
  }
  fused_update(table, grads, opt);
  return counters;
}

}  // namespace efftt
