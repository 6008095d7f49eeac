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
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <unordered_map>

#include "efftt/common.hpp"

namespace efftt {

/// A batch of row ids for one table.
using IndexBatch = std::vector<Index>;

struct FreqOrder {
  std::vector<Index> rank_of;  // row -> rank (0 = most accessed)
  std::vector<Index> row_at;   // rank -> row
  std::vector<std::int64_t> counts;  // per row

  Index table_len() const { return static_cast<Index>(rank_of.size()); }
};

/// Ranks rows by descending access count, ties by ascending row id.
inline FreqOrder count_frequencies(std::span<const IndexBatch> batches, Index table_len) {
  EFFTT_REQUIRE(table_len > 0, "table_len must be positive");
  FreqOrder f;
  f.counts.assign(static_cast<std::size_t>(table_len), 0);
  for (const auto& batch : batches)
    for (Index i : batch) {
      if (i < 0 || i >= table_len)
        throw std::out_of_range(detail::concat("index ", i, " outside table of ", table_len, " rows"));
      ++f.counts[static_cast<std::size_t>(i)];
    }
  f.row_at.resize(static_cast<std::size_t>(table_len));
  std::iota(f.row_at.begin(), f.row_at.end(), Index{0});
  std::stable_sort(f.row_at.begin(), f.row_at.end(), [&](Index a, Index b) {
    return f.counts[static_cast<std::size_t>(a)] > f.counts[static_cast<std::size_t>(b)];
  });
  f.rank_of.resize(static_cast<std::size_t>(table_len));
  for (Index r = 0; r < table_len; ++r) f.rank_of[static_cast<std::size_t>(f.row_at[static_cast<std::size_t>(r)])] = r;
  return f;
}

struct Edge {
  Index u = 0;  // u < v
  Index v = 0;
  std::int64_t weight = 0;
  friend bool operator==(const Edge&, const Edge&) = default;
};

/// Co-occurrence graph over cold ranks. Node id = rank - hot_threshold.
struct IndexGraph {
  Index num_nodes = 0;
  Index hot_threshold = 0;
  std::vector<Edge> edges;  // sorted by (u, v)
  std::int64_t m_total = 0;
};

inline Index hot_threshold_for(Index table_len, double hot_ratio) {
  EFFTT_REQUIRE(hot_ratio > 0.0 && hot_ratio < 1.0, "hot_ratio must lie in (0,1), got ", hot_ratio);
  return static_cast<Index>(std::floor(static_cast<double>(table_len) * hot_ratio));
}

/// Hot ranks (< floor(table_len * hot_ratio)) stay out of the graph; every
/// unordered pair of distinct cold ranks in a batch adds weight 1.
inline IndexGraph build_index_graph(std::span<const IndexBatch> batches, const FreqOrder& freq,
                                    double hot_ratio) {
  const Index table_len = freq.table_len();
  IndexGraph g;
  g.hot_threshold = hot_threshold_for(table_len, hot_ratio);
  g.num_nodes = table_len - g.hot_threshold;

  std::unordered_map<std::uint64_t, std::int64_t> weights;
  std::vector<Index> nodes;
  for (const auto& batch : batches) {
    nodes.clear();
    for (Index i : batch) {
      if (i < 0 || i >= table_len)
        throw std::out_of_range(detail::concat("index ", i, " outside table of ", table_len, " rows"));
      const Index rank = freq.rank_of[static_cast<std::size_t>(i)];
      if (rank >= g.hot_threshold) nodes.push_back(rank - g.hot_threshold);
    }
    std::sort(nodes.begin(), nodes.end());
    nodes.erase(std::unique(nodes.begin(), nodes.end()), nodes.end());
    for (std::size_t a = 0; a < nodes.size(); ++a)
      for (std::size_t b = a + 1; b < nodes.size(); ++b)
        ++weights[(static_cast<std::uint64_t>(nodes[a]) << 32) | static_cast<std::uint64_t>(nodes[b])];
  }
  g.edges.reserve(weights.size());
  for (const auto& [key, w] : weights) {
    g.edges.push_back({static_cast<Index>(key >> 32), static_cast<Index>(key & 0xffffffffULL), w});
    g.m_total += w;
  }
  std::sort(g.edges.begin(), g.edges.end(),
            [](const Edge& a, const Edge& b) { return std::tie(a.u, a.v) < std::tie(b.u, b.v); });
  return g;
}

struct CommunityAssignment {
  std::vector<Index> community_of;  // node -> dense community id
  Index num_communities = 0;
  double q = 0.0;
  std::vector<double> q_history;  // modularity after each accepted merge
};

/// Newman modularity: sum_c [ w_in(c)/m - (deg(c) / 2m)^2 ].
inline double modularity(const IndexGraph& g, std::span<const Index> community_of) {
  EFFTT_REQUIRE(g.m_total > 0, "modularity of an edgeless graph is undefined");
  EFFTT_REQUIRE(static_cast<Index>(community_of.size()) == g.num_nodes, "assignment does not cover all nodes");
  std::map<Index, double> w_in, deg;
  for (const auto& e : g.edges) {
    const Index cu = community_of[static_cast<std::size_t>(e.u)];
    const Index cv = community_of[static_cast<std::size_t>(e.v)];
    if (cu == cv) w_in[cu] += static_cast<double>(e.weight);
    deg[cu] += static_cast<double>(e.weight);
    deg[cv] += static_cast<double>(e.weight);
  }
  const double m = static_cast<double>(g.m_total);
  double q = 0.0;
  for (const auto& [c, dc] : deg) {
    const double frac = dc / (2.0 * m);
    q += w_in[c] / m - frac * frac;
  }
  return q;
}

namespace detail {

inline std::vector<Index> densify(std::span<const Index> labels, Index* count) {
  std::unordered_map<Index, Index> remap;
  std::vector<Index> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto [it, fresh] = remap.try_emplace(labels[i], static_cast<Index>(remap.size()));
    out[i] = it->second;
  }
  *count = static_cast<Index>(remap.size());
  return out;
}

}  // namespace detail

/// Greedy agglomerative modularity maximization (CNM). Starting from
/// singletons, repeatedly merges the pair with the largest positive gain,
/// ties to the smallest (a, b). The gain of merging a and b, scaled by 2m^2,
/// is the integer 2m*w_ab - deg_a*deg_b, so ties are exact.
inline CommunityAssignment detect_communities(const IndexGraph& g) {
  EFFTT_REQUIRE(g.num_nodes > 0, "cannot detect communities on an empty node set");
  const auto n = static_cast<std::size_t>(g.num_nodes);
  CommunityAssignment out;
  if (g.m_total == 0) {
    out.community_of.resize(n);
    std::iota(out.community_of.begin(), out.community_of.end(), Index{0});
    out.num_communities = g.num_nodes;
    out.q = 0.0;
    return out;
  }
  EFFTT_REQUIRE(g.m_total < (std::int64_t{1} << 30), "graph too heavy for exact gain arithmetic");
  const std::int64_t two_m = 2 * g.m_total;

  std::vector<std::map<Index, std::int64_t>> adj(n);
  std::vector<std::int64_t> deg(n, 0);
  for (const auto& e : g.edges) {
    adj[static_cast<std::size_t>(e.u)][e.v] += e.weight;
    adj[static_cast<std::size_t>(e.v)][e.u] += e.weight;
    deg[static_cast<std::size_t>(e.u)] += e.weight;
    deg[static_cast<std::size_t>(e.v)] += e.weight;
  }
  auto gain = [&](Index a, Index b, std::int64_t w) {
    return two_m * w - deg[static_cast<std::size_t>(a)] * deg[static_cast<std::size_t>(b)];
  };
  // (-gain, a, b) with a < b; begin() is the best merge.
  using Key = std::tuple<std::int64_t, Index, Index>;
  std::set<Key> heap;
  auto key_for = [&](Index a, Index b, std::int64_t w) {
    return Key{-gain(a, b, w), std::min(a, b), std::max(a, b)};
  };
  for (const auto& e : g.edges)
    if (gain(e.u, e.v, e.weight) > 0) heap.insert(key_for(e.u, e.v, e.weight));

  std::vector<Index> parent(n);
  std::iota(parent.begin(), parent.end(), Index{0});
  out.q = [&] {
    double q = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double f = static_cast<double>(deg[i]) / static_cast<double>(two_m);
      q -= f * f;
    }
    return q;
  }();
  const double scale = 2.0 * static_cast<double>(g.m_total) * static_cast<double>(g.m_total);

  while (!heap.empty()) {
    const auto [neg_gain, a, b] = *heap.begin();
    if (-neg_gain <= 0) break;
    auto& adj_a = adj[static_cast<std::size_t>(a)];
    auto& adj_b = adj[static_cast<std::size_t>(b)];
    for (const auto& [x, w] : adj_a) heap.erase(key_for(a, x, w));
    for (const auto& [x, w] : adj_b) heap.erase(key_for(b, x, w));

    adj_a.erase(b);
    adj_b.erase(a);
    for (const auto& [x, w] : adj_b) {
      adj_a[x] += w;
      auto& adj_x = adj[static_cast<std::size_t>(x)];
      adj_x.erase(b);
      adj_x[a] += w;
    }
    adj_b.clear();
    deg[static_cast<std::size_t>(a)] += deg[static_cast<std::size_t>(b)];
    deg[static_cast<std::size_t>(b)] = 0;
    parent[static_cast<std::size_t>(b)] = a;
    for (const auto& [x, w] : adj_a)
      if (gain(a, x, w) > 0) heap.insert(key_for(a, x, w));

    out.q += static_cast<double>(-neg_gain) / scale;
    out.q_history.push_back(out.q);
  }

  std::vector<Index> root(n);
  for (std::size_t i = 0; i < n; ++i) {
    Index r = static_cast<Index>(i);
    while (parent[static_cast<std::size_t>(r)] != r) r = parent[static_cast<std::size_t>(r)];
    root[i] = r;
  }
  out.community_of = detail::densify(root, &out.num_communities);
  out.q = modularity(g, out.community_of);
  return out;
}

/// Permutation of row ids: forward maps old -> new, inverse new -> old.
struct IndexBijection {
  std::vector<Index> forward;
  std::vector<Index> inverse;

  static IndexBijection identity(Index table_len) {
    IndexBijection b;
    b.forward.resize(static_cast<std::size_t>(table_len));
    std::iota(b.forward.begin(), b.forward.end(), Index{0});
    b.inverse = b.forward;
    return b;
  }
  Index size() const { return static_cast<Index>(forward.size()); }
};

/// Hot rows are fixed points. Cold rows fill the remaining positions in
/// ascending order: communities by descending total access count (ties by
/// community id), members by descending count (ties by ascending row id).
inline IndexBijection build_bijection(const CommunityAssignment& assignment, Index hot_threshold,
                                      const FreqOrder& freq) {
  const Index table_len = freq.table_len();
  const Index cold = table_len - hot_threshold;
  EFFTT_REQUIRE(hot_threshold >= 0 && hot_threshold <= table_len, "hot threshold out of range");
  EFFTT_REQUIRE(static_cast<Index>(assignment.community_of.size()) == cold,
                "assignment covers ", assignment.community_of.size(), " nodes, expected ", cold);

  IndexBijection bij;
  bij.forward.assign(static_cast<std::size_t>(table_len), -1);
  std::vector<bool> taken(static_cast<std::size_t>(table_len), false);
  for (Index r = 0; r < hot_threshold; ++r) {
    const Index row = freq.row_at[static_cast<std::size_t>(r)];
    bij.forward[static_cast<std::size_t>(row)] = row;
    taken[static_cast<std::size_t>(row)] = true;
  }

  const Index ncomm = assignment.num_communities;
  std::vector<std::int64_t> total(static_cast<std::size_t>(ncomm), 0);
  std::vector<std::vector<Index>> members(static_cast<std::size_t>(ncomm));
  for (Index node = 0; node < cold; ++node) {
    const Index c = assignment.community_of[static_cast<std::size_t>(node)];
    EFFTT_REQUIRE(c >= 0 && c < ncomm, "community id ", c, " out of range");
    const Index row = freq.row_at[static_cast<std::size_t>(node + hot_threshold)];
    members[static_cast<std::size_t>(c)].push_back(row);
    total[static_cast<std::size_t>(c)] += freq.counts[static_cast<std::size_t>(row)];
  }
  std::vector<Index> order(static_cast<std::size_t>(ncomm));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return total[static_cast<std::size_t>(a)] > total[static_cast<std::size_t>(b)];
  });

  Index next = 0;
  auto next_free = [&] {
    while (next < table_len && taken[static_cast<std::size_t>(next)]) ++next;
    return next;
  };
  for (Index c : order) {
    auto& rows = members[static_cast<std::size_t>(c)];
    std::sort(rows.begin(), rows.end(), [&](Index a, Index b) {
      const auto ca = freq.counts[static_cast<std::size_t>(a)];
      const auto cb = freq.counts[static_cast<std::size_t>(b)];
      return ca != cb ? ca > cb : a < b;
    });
    for (Index row : rows) {
      const Index pos = next_free();
      if (pos >= table_len || bij.forward[static_cast<std::size_t>(row)] != -1)
        throw std::logic_error("index bijection overlap");
      bij.forward[static_cast<std::size_t>(row)] = pos;
      taken[static_cast<std::size_t>(pos)] = true;
    }
  }

  bij.inverse.assign(static_cast<std::size_t>(table_len), -1);
  for (Index old = 0; old < table_len; ++old) {
    const Index nw = bij.forward[static_cast<std::size_t>(old)];
    if (nw < 0 || bij.inverse[static_cast<std::size_t>(nw)] != -1) throw std::logic_error("index bijection gap");
    bij.inverse[static_cast<std::size_t>(nw)] = old;
  }
  return bij;
}

inline std::vector<IndexBatch> apply_bijection(const IndexBijection& bij, std::span<const IndexBatch> batches,
                                               bool use_inverse = false) {
  const auto& map = use_inverse ? bij.inverse : bij.forward;
  std::vector<IndexBatch> out;
  out.reserve(batches.size());
  for (const auto& batch : batches) {
    IndexBatch nb;
    nb.reserve(batch.size());
    for (Index i : batch) {
      if (i < 0 || i >= bij.size())
        throw std::out_of_range(detail::concat("index ", i, " outside bijection of ", bij.size(), " rows"));
      nb.push_back(map[static_cast<std::size_t>(i)]);
    }
    out.push_back(std::move(nb));
  }
  return out;
}

/// Frequency ranking, graph, communities and bijection in one offline pass.
struct ReorderResult {
  FreqOrder freq;
  IndexGraph graph;
  CommunityAssignment communities;
  IndexBijection bijection;
};

inline ReorderResult learn_reordering(std::span<const IndexBatch> batches, Index table_len, double hot_ratio) {
  ReorderResult r;
  r.freq = count_frequencies(batches, table_len);
  r.graph = build_index_graph(batches, r.freq, hot_ratio);
  if (r.graph.num_nodes == 0) {
    r.bijection = IndexBijection::identity(table_len);
    return r;
  }
  r.communities = detect_communities(r.graph);
  r.bijection = build_bijection(r.communities, r.graph.hot_threshold, r.freq);
  return r;
}

/// Text form: one "old new" line per row, sorted by old.
inline void write_bijection(std::ostream& os, const IndexBijection& bij) {
  for (Index old = 0; old < bij.size(); ++old) os << old << ' ' << bij.forward[static_cast<std::size_t>(old)] << '\n';
}

inline IndexBijection read_bijection(std::istream& is) {
  IndexBijection bij;
  Index old = 0, nw = 0;
  std::string line;
  Index lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    if (!(ls >> old >> nw) || old != bij.size())
      throw DataError(detail::concat("bijection line ", lineno, ": expected \"", bij.size(), " <new>\""));
    bij.forward.push_back(nw);
  }
  bij.inverse.assign(bij.forward.size(), -1);
  for (Index o = 0; o < bij.size(); ++o) {
    const Index n = bij.forward[static_cast<std::size_t>(o)];
    if (n < 0 || n >= bij.size() || bij.inverse[static_cast<std::size_t>(n)] != -1)
      throw DataError(detail::concat("bijection is not a permutation at row ", o));
    bij.inverse[static_cast<std::size_t>(n)] = o;
  }
  return bij;
}

}  // namespace efftt
