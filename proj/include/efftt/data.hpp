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
#include <charconv>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <string_view>

#include "efftt/common.hpp"
#include "efftt/lookup.hpp"

namespace efftt {

struct DatasetSpec {
  Index n_samples = 24800;
  Index n_dense = 6;
  Index n_sparse = 7;
  std::vector<Index> rows_per_field = {4096, 4096, 2048, 1024, 512, 118, 64};
  double zipf_s = 1.05;
  double attack_fraction = 4800.0 / 24800.0;
  std::uint64_t seed = 1;
  Index min_bag = 1;
  Index max_bag = 3;
  /// Hottest rows per field eligible for the planted attacked set.
  Index attack_pool = 64;
  double attacked_share = 0.1;
  double sparse_weight = 1.0;
  /// Norm of the hidden dense weight vector.
  double dense_weight = 0.2;
  /// > 0 plants co-occurrence clusters: rows are scattered into groups of this
  /// size, each bag draws from one Zipf-chosen group.
  Index cluster_size = 0;

  void validate() const {
    EFFTT_REQUIRE(n_samples > 0 && n_dense > 0 && n_sparse >= 0, "dataset counts must be positive");
    EFFTT_REQUIRE(static_cast<Index>(rows_per_field.size()) == n_sparse, "rows_per_field must have n_sparse entries");
    for (Index r : rows_per_field) EFFTT_REQUIRE(r >= 1, "every field needs at least one row");
    EFFTT_REQUIRE(zipf_s >= 0.0, "zipf exponent must be non-negative");
    EFFTT_REQUIRE(attack_fraction > 0.0 && attack_fraction < 1.0, "attack_fraction must lie in (0,1)");
    EFFTT_REQUIRE(min_bag >= 1 && max_bag >= min_bag, "invalid bag size range");
    EFFTT_REQUIRE(cluster_size >= 0, "cluster_size must be non-negative");
  }
};

struct Sample {
  float label = 0.0f;
  std::vector<float> dense;
  std::vector<IndexBag> sparse;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct Dataset {
  Index n_dense = 0;
  std::vector<Index> rows_per_field;
  std::vector<Sample> samples;

  Index n_sparse() const { return static_cast<Index>(rows_per_field.size()); }
  Index size() const { return static_cast<Index>(samples.size()); }
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Discrete power law over ranks 0..n-1 with P(r) proportional to (r+1)^-s.
class ZipfSampler {
 public:
  ZipfSampler(Index n, double s) {
    EFFTT_REQUIRE(n >= 1, "zipf support must be non-empty");
    cdf_.resize(static_cast<std::size_t>(n));
    double acc = 0.0;
    for (Index r = 0; r < n; ++r) {
      acc += std::pow(static_cast<double>(r + 1), -s);
      cdf_[static_cast<std::size_t>(r)] = acc;
    }
    for (auto& c : cdf_) c /= acc;
    cdf_.back() = 1.0;
  }

  Index operator()(Rng& rng) const {
    const double u = rng.uniform();
    return static_cast<Index>(std::upper_bound(cdf_.begin(), cdf_.end(), u) - cdf_.begin());
  }

  double probability(Index r) const {
    const auto i = static_cast<std::size_t>(r);
    return i == 0 ? cdf_[0] : cdf_[i] - cdf_[i - 1];
  }

 private:
  std::vector<double> cdf_;
};

/// Power-law sparse indices, Gaussian dense features, and labels from a hidden
/// linear scorer over the dense features plus membership of bag indices in a
/// planted "attacked" row set. The top attack_fraction of scores are positive.
inline Dataset gen_synthetic(const DatasetSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Dataset ds;
  ds.n_dense = spec.n_dense;
  ds.rows_per_field = spec.rows_per_field;

  const auto nf = static_cast<std::size_t>(spec.n_sparse);
  std::vector<double> w_dense(static_cast<std::size_t>(spec.n_dense));
  double norm = 0.0;
  for (auto& w : w_dense) {
    w = rng.normal();
    norm += w * w;
  }
  for (auto& w : w_dense) w *= spec.dense_weight / std::sqrt(norm);

  // rank -> row per field; identity unless clusters are planted.
  std::vector<std::vector<Index>> row_of_rank(nf);
  std::vector<std::vector<char>> attacked(nf);
  std::vector<ZipfSampler> samplers;
  for (std::size_t f = 0; f < nf; ++f) {
    const Index rows = spec.rows_per_field[f];
    auto& perm = row_of_rank[f];
    perm.resize(static_cast<std::size_t>(rows));
    std::iota(perm.begin(), perm.end(), Index{0});
    if (spec.cluster_size > 0) std::shuffle(perm.begin(), perm.end(), rng.engine());
    const Index support = spec.cluster_size > 0 ? std::max<Index>(1, rows / spec.cluster_size) : rows;
    samplers.emplace_back(support, spec.zipf_s);

    attacked[f].assign(static_cast<std::size_t>(rows), 0);
    const Index pool = std::min(rows, spec.attack_pool);
    bool any = false;
    for (Index r = 0; r < pool; ++r)
      if (rng.uniform() < spec.attacked_share) {
        attacked[f][static_cast<std::size_t>(perm[static_cast<std::size_t>(r)])] = 1;
        any = true;
      }
    if (!any) attacked[f][static_cast<std::size_t>(perm[0])] = 1;
  }

  std::vector<double> score(static_cast<std::size_t>(spec.n_samples));
  ds.samples.resize(static_cast<std::size_t>(spec.n_samples));
  for (Index s = 0; s < spec.n_samples; ++s) {
    auto& smp = ds.samples[static_cast<std::size_t>(s)];
    double sc = 0.0;
    smp.dense.resize(static_cast<std::size_t>(spec.n_dense));
    for (std::size_t i = 0; i < smp.dense.size(); ++i) {
      smp.dense[i] = static_cast<float>(rng.normal());
      sc += w_dense[i] * static_cast<double>(smp.dense[i]);
    }
    smp.sparse.resize(nf);
    for (std::size_t f = 0; f < nf; ++f) {
      const Index len = rng.between(spec.min_bag, spec.max_bag);
      const Index rows = spec.rows_per_field[f];
      auto& bag = smp.sparse[f];
      if (spec.cluster_size > 0) {
        const Index cluster = samplers[f](rng);
        const Index lo = cluster * spec.cluster_size;
        const Index hi = std::min(rows, lo + spec.cluster_size) - 1;
        for (Index t = 0; t < len; ++t)
          bag.push_back(row_of_rank[f][static_cast<std::size_t>(rng.between(lo, hi))]);
      } else {
        for (Index t = 0; t < len; ++t) bag.push_back(row_of_rank[f][static_cast<std::size_t>(samplers[f](rng))]);
      }
      for (Index i : bag) sc += spec.sparse_weight * attacked[f][static_cast<std::size_t>(i)];
    }
    score[static_cast<std::size_t>(s)] = sc;
  }

  const auto positives = static_cast<Index>(std::llround(spec.attack_fraction * static_cast<double>(spec.n_samples)));
  std::vector<Index> order(static_cast<std::size_t>(spec.n_samples));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return score[static_cast<std::size_t>(a)] > score[static_cast<std::size_t>(b)];
  });
  for (Index k = 0; k < positives; ++k) ds.samples[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])].label = 1.0f;
  return ds;
}

struct FeatureRange {
  float min = 0.0f;
  float max = 0.0f;
  friend bool operator==(const FeatureRange&, const FeatureRange&) = default;
};

using NormStats = std::vector<FeatureRange>;

inline NormStats dense_stats(const Dataset& ds) {
  NormStats st(static_cast<std::size_t>(ds.n_dense));
  for (std::size_t i = 0; i < st.size(); ++i) {
    st[i].min = std::numeric_limits<float>::infinity();
    st[i].max = -std::numeric_limits<float>::infinity();
  }
  for (const auto& s : ds.samples)
    for (std::size_t i = 0; i < st.size(); ++i) {
      st[i].min = std::min(st[i].min, s.dense[i]);
      st[i].max = std::max(st[i].max, s.dense[i]);
    }
  return st;
}

/// x' = (x - min) / (max - min); degenerate features map to 0. Values outside
/// the stored range are not clipped.
inline void apply_normalization(Dataset& ds, const NormStats& st) {
  EFFTT_REQUIRE(static_cast<Index>(st.size()) == ds.n_dense, "stats do not match dense feature count");
  for (auto& s : ds.samples)
    for (std::size_t i = 0; i < st.size(); ++i) {
      const double lo = st[i].min, hi = st[i].max;
      s.dense[i] = hi > lo ? static_cast<float>((static_cast<double>(s.dense[i]) - lo) / (hi - lo)) : 0.0f;
    }
}

inline NormStats normalize_dense(Dataset& ds) {
  auto st = dense_stats(ds);
  apply_normalization(ds, st);
  return st;
}

inline std::string format_float(float v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
  return buf;
}

inline void write_stats(std::ostream& os, const NormStats& st) {
  for (const auto& r : st) os << format_float(r.min) << ' ' << format_float(r.max) << '\n';
}

inline float parse_float(std::string_view s, Index line) {
  float v = 0.0f;
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end)
    throw DataError(detail::concat("line ", line, ": cannot parse number '", s, "'"));
  return v;
}

inline Index parse_index(std::string_view s, Index line) {
  Index v = 0;
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end)
    throw DataError(detail::concat("line ", line, ": cannot parse index '", s, "'"));
  return v;
}

inline NormStats read_stats(std::istream& is) {
  NormStats st;
  std::string line;
  Index lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto sp = line.find(' ');
    if (sp == std::string::npos) throw DataError(detail::concat("stats line ", lineno, ": expected \"min max\""));
    st.push_back({parse_float(std::string_view(line).substr(0, sp), lineno),
                  parse_float(std::string_view(line).substr(sp + 1), lineno)});
  }
  return st;
}

namespace detail {

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace detail

// CSV: header "label,d0..d{k-1},s0:<rows>..", then one sample per line; a
// sparse field is its bag's indices joined by '|'.
inline void write_csv(std::ostream& os, const Dataset& ds) {
  os << "label";
  for (Index i = 0; i < ds.n_dense; ++i) os << ",d" << i;
  for (Index f = 0; f < ds.n_sparse(); ++f) os << ",s" << f << ':' << ds.rows_per_field[static_cast<std::size_t>(f)];
  os << '\n';
  for (const auto& s : ds.samples) {
    os << format_float(s.label);
    for (float x : s.dense) os << ',' << format_float(x);
    for (const auto& bag : s.sparse) {
      os << ',';
      for (std::size_t t = 0; t < bag.size(); ++t) os << (t ? "|" : "") << bag[t];
    }
    os << '\n';
  }
}

inline Dataset read_csv(std::istream& is) {
  Dataset ds;
  std::string line;
  if (!std::getline(is, line)) throw DataError("line 1: missing CSV header");
  {
    const auto cols = detail::split(line, ',');
    if (cols.empty() || cols[0] != "label") throw DataError("line 1: header must start with 'label'");
    bool sparse_seen = false;
    for (std::size_t c = 1; c < cols.size(); ++c) {
      const auto col = cols[c];
      if (!col.empty() && col[0] == 'd' && !sparse_seen) {
        ++ds.n_dense;
      } else if (!col.empty() && col[0] == 's') {
        sparse_seen = true;
        const auto colon = col.find(':');
        if (colon == std::string_view::npos)
          throw DataError(detail::concat("line 1: sparse column '", col, "' lacks ':<rows>'"));
        const Index rows = parse_index(col.substr(colon + 1), 1);
        if (rows < 1) throw DataError("line 1: sparse field needs at least one row");
        ds.rows_per_field.push_back(rows);
      } else {
        throw DataError(detail::concat("line 1: unexpected column '", col, "'"));
      }
    }
  }
  const std::size_t expected = 1 + static_cast<std::size_t>(ds.n_dense) + ds.rows_per_field.size();
  Index lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cols = detail::split(line, ',');
    if (cols.size() != expected)
      throw DataError(detail::concat("line ", lineno, ": expected ", expected, " fields, got ", cols.size()));
    Sample s;
    s.label = parse_float(cols[0], lineno);
    for (Index i = 0; i < ds.n_dense; ++i) s.dense.push_back(parse_float(cols[1 + static_cast<std::size_t>(i)], lineno));
    for (std::size_t f = 0; f < ds.rows_per_field.size(); ++f) {
      const auto field = cols[1 + static_cast<std::size_t>(ds.n_dense) + f];
      if (field.empty()) throw DataError(detail::concat("line ", lineno, ": empty bag in sparse field ", f));
      IndexBag bag;
      for (auto tok : detail::split(field, '|')) {
        const Index idx = parse_index(tok, lineno);
        if (idx < 0 || idx >= ds.rows_per_field[f])
          throw DataError(detail::concat("line ", lineno, ": index ", idx, " out of range for field ", f, " (",
                                         ds.rows_per_field[f], " rows)"));
        bag.push_back(idx);
      }
      s.sparse.push_back(std::move(bag));
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

inline void save_csv(const std::string& path, const Dataset& ds) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open " + path + " for writing");
  write_csv(os, ds);
}

inline Dataset load_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path);
  return read_csv(is);
}

/// Sample ids grouped into batches after a seeded shuffle; the last batch may
/// be partial.
inline std::vector<std::vector<Index>> batch_iter(Index n_samples, Index batch_size, std::uint64_t shuffle_seed) {
  EFFTT_REQUIRE(batch_size >= 1, "batch_size must be >= 1");
  std::vector<Index> ids(static_cast<std::size_t>(n_samples));
  std::iota(ids.begin(), ids.end(), Index{0});
  std::mt19937_64 eng(shuffle_seed);
  std::shuffle(ids.begin(), ids.end(), eng);
  std::vector<std::vector<Index>> out;
  for (Index start = 0; start < n_samples; start += batch_size) {
    const Index end = std::min(n_samples, start + batch_size);
    out.emplace_back(ids.begin() + start, ids.begin() + end);
  }
  return out;
}

/// 80/20 split keyed on a hash of the sample position.
inline bool is_test_sample(Index id) { return mix64(static_cast<std::uint64_t>(id)) % 5 == 0; }

inline std::pair<Dataset, Dataset> split_train_test(const Dataset& ds) {
  Dataset train{ds.n_dense, ds.rows_per_field, {}};
  Dataset test{ds.n_dense, ds.rows_per_field, {}};
  for (Index i = 0; i < ds.size(); ++i)
    (is_test_sample(i) ? test : train).samples.push_back(ds.samples[static_cast<std::size_t>(i)]);
  return {std::move(train), std::move(test)};
}

/// Indices of one sparse field, concatenated per batch.
inline std::vector<std::vector<Index>> field_batches(const Dataset& ds, std::span<const std::vector<Index>> batches,
                                                     Index field) {
  EFFTT_REQUIRE(field >= 0 && field < ds.n_sparse(), "field ", field, " out of range");
  std::vector<std::vector<Index>> out;
  out.reserve(batches.size());
  for (const auto& b : batches) {
    std::vector<Index> idx;
    for (Index s : b) {
      const auto& bag = ds.samples[static_cast<std::size_t>(s)].sparse[static_cast<std::size_t>(field)];
      idx.insert(idx.end(), bag.begin(), bag.end());
    }
    out.push_back(std::move(idx));
  }
  return out;
}

/// Relabels every bag of one field through `map` (old -> new).
inline void relabel_field(Dataset& ds, Index field, std::span<const Index> map) {
  EFFTT_REQUIRE(static_cast<Index>(map.size()) == ds.rows_per_field[static_cast<std::size_t>(field)],
                "relabel map size mismatch");
  for (auto& s : ds.samples)
    for (auto& i : s.sparse[static_cast<std::size_t>(field)]) i = map[static_cast<std::size_t>(i)];
}

}  // namespace efftt
