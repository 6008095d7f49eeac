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

#include <deque>
#include <map>
#include <set>

#include "efftt/model.hpp"

namespace efftt {

// Discrete-tick simulation of a parameter-server trainer. Uncompressed
// (row-addressed) tables live on the host and are updated by the server from
// a gradient queue; TT tables and MLPs stay with the worker and update
// locally. A versioned cache carries worker-side post-update values forward
// so a batch prefetched before an earlier update landed still sees it.

struct PipelineConfig {
  Index lc = 1;
  bool cache_sync = true;
  double lr = 0.05;
  double momentum = 0.0;
  StepOptions step;
  /// Optional per-batch learning rate; falls back to `lr` when empty.
  std::vector<double> lr_schedule;

  double lr_for(Index batch) const {
    return lr_schedule.empty() ? lr : lr_schedule.at(static_cast<std::size_t>(batch));
  }
};

enum class Stage { Prefetch, CacheSync, Worker, Server };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::Prefetch: return "prefetch";
    case Stage::CacheSync: return "cache_sync";
    case Stage::Worker: return "worker_fwd_bwd";
    case Stage::Server: return "server_update";
  }
  return "?";
}

struct RowVersion {
  Index field = 0;
  Index row = 0;
  std::int64_t version = 0;
  friend bool operator==(const RowVersion&, const RowVersion&) = default;
};

struct PipelineEvent {
  Index tick = 0;
  Stage stage = Stage::Prefetch;
  Index batch = 0;
  std::vector<RowVersion> rows;
  friend bool operator==(const PipelineEvent&, const PipelineEvent&) = default;
};

/// `tick stage batch_id n_rows field:row@version,...` ("-" when no rows).
inline std::string format_event(const PipelineEvent& e) {
  std::ostringstream os;
  os << e.tick << ' ' << stage_name(e.stage) << ' ' << e.batch << ' ' << e.rows.size() << ' ';
  if (e.rows.empty()) os << '-';
  for (std::size_t i = 0; i < e.rows.size(); ++i)
    os << (i ? "," : "") << e.rows[i].field << ':' << e.rows[i].row << '@' << e.rows[i].version;
  return os.str();
}

template <typename T>
struct HostStore {
  std::vector<Index> fields;  // model field id per slot
  std::vector<DenseTable<T>> tables;
  std::vector<std::vector<std::int64_t>> versions;

  Index slot_of(Index field) const {
    for (std::size_t s = 0; s < fields.size(); ++s)
      if (fields[s] == field) return static_cast<Index>(s);
    return -1;
  }
};

/// Moves every row-addressed table of `model` into a host store.
template <typename T>
HostStore<T> take_host_tables(DlrmModel<T>& model) {
  HostStore<T> host;
  for (Index f = 0; f < model.n_sparse(); ++f) {
    if (model.is_tt(f)) continue;
    auto& t = std::get<DenseTable<T>>(model.tables[static_cast<std::size_t>(f)]);
    host.fields.push_back(f);
    host.versions.emplace_back(static_cast<std::size_t>(t.rows), 0);
    host.tables.push_back(std::move(t));
    t = DenseTable<T>{};
  }
  return host;
}

template <typename T>
void return_host_tables(DlrmModel<T>& model, HostStore<T>&& host) {
  for (std::size_t s = 0; s < host.fields.size(); ++s)
    model.tables[static_cast<std::size_t>(host.fields[s])] = std::move(host.tables[s]);
}

/// Distinct rows of one host table needed by a batch, in first-use order.
template <typename T>
struct HostRows {
  Index dim = 0;
  std::vector<Index> rows;
  std::vector<T> values;
  std::vector<std::int64_t> versions;
  std::unordered_map<Index, std::size_t> pos;

  std::span<const T> value(Index row) const {
    const auto it = pos.find(row);
    if (it == pos.end()) throw std::logic_error(detail::concat("row ", row, " was not prefetched"));
    return {values.data() + it->second * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
  }
};

template <typename T>
struct Prefetched {
  Index batch = 0;
  std::vector<HostRows<T>> slots;
};

template <typename T>
Prefetched<T> prefetch_rows(const HostStore<T>& host, const Batch<T>& batch, Index batch_id) {
  Prefetched<T> p;
  p.batch = batch_id;
  for (std::size_t s = 0; s < host.fields.size(); ++s) {
    const auto& table = host.tables[s];
    HostRows<T> hr;
    hr.dim = table.cols;
    for (const auto& bag : batch.bags[static_cast<std::size_t>(host.fields[s])]) {
      validate_bag(bag, table.rows);
      for (Index r : bag) {
        if (hr.pos.count(r)) continue;
        hr.pos.emplace(r, hr.rows.size());
        hr.rows.push_back(r);
        const auto v = table.row(r);
        hr.values.insert(hr.values.end(), v.begin(), v.end());
        hr.versions.push_back(host.versions[s][static_cast<std::size_t>(r)]);
      }
    }
    p.slots.push_back(std::move(hr));
  }
  return p;
}

/// FIFO with a hard capacity; pushing into a full queue is a scheduler bug.
template <typename Item>
class BoundedQueue {
 public:
  explicit BoundedQueue(Index capacity) : capacity_(capacity) {
    EFFTT_REQUIRE(capacity >= 1, "queue capacity must be >= 1");
  }
  Index size() const { return static_cast<Index>(items_.size()); }
  Index capacity() const { return capacity_; }
  bool empty() const { return items_.empty(); }
  bool full() const { return size() >= capacity_; }
  void push(Item item) {
    if (full()) throw std::logic_error("queue overflow");
    items_.push_back(std::move(item));
  }
  Item pop() {
    if (items_.empty()) throw std::logic_error("pop from empty queue");
    Item it = std::move(items_.front());
    items_.pop_front();
    return it;
  }
  const Item& front() const { return items_.front(); }

 private:
  Index capacity_;
  std::deque<Item> items_;
};

struct GradEntry {
  Index batch = 0;
  double lr = 0.0;
  std::vector<AggregatedGrads> slots;  // per host slot
};

/// Versioned post-update values keyed by (field, row). Entries live for LC
/// worker steps after their last write.
template <typename T>
class EmbCache {
 public:
  struct Entry {
    std::vector<T> value;
    Index lc_remaining = 0;
    std::int64_t version = 0;
  };
  using Key = std::pair<Index, Index>;

  EmbCache(Index lc, Index capacity) : lc_(lc), capacity_(capacity) {
    EFFTT_REQUIRE(lc >= 1, "LC must be >= 1");
  }

  const Entry* find(Index field, Index row) const {
    const auto it = entries_.find({field, row});
    return it == entries_.end() ? nullptr : &it->second;
  }

  /// One worker step elapsed: entries not in `written` lose one unit of
  /// lifetime and are evicted at zero; written entries are (re)armed with LC.
  void advance(std::map<Key, std::pair<std::vector<T>, std::int64_t>> written) {
    for (auto it = entries_.begin(); it != entries_.end();) {
      if (written.count(it->first) == 0 && --it->second.lc_remaining == 0)
        it = entries_.erase(it);
      else
        ++it;
    }
    for (auto& [key, vv] : written) entries_[key] = Entry{std::move(vv.first), lc_, vv.second};
    if (static_cast<Index>(entries_.size()) > capacity_)
      throw std::logic_error(detail::concat("embedding cache over capacity: ", entries_.size(), " > ", capacity_));
  }

  Index size() const { return static_cast<Index>(entries_.size()); }
  Index capacity() const { return capacity_; }
  const std::map<Key, Entry>& entries() const { return entries_; }

 private:
  Index lc_;
  Index capacity_;
  std::map<Key, Entry> entries_;
};

/// Replaces prefetched values with fresher cached ones. A cached version older
/// than the prefetched one signals a broken update order.
template <typename T>
void cache_sync(const EmbCache<T>& cache, const HostStore<T>& host, Prefetched<T>& p) {
  for (std::size_t s = 0; s < p.slots.size(); ++s) {
    auto& hr = p.slots[s];
    for (std::size_t i = 0; i < hr.rows.size(); ++i) {
      const auto* e = cache.find(host.fields[s], hr.rows[i]);
      if (!e) continue;
      if (e->version < hr.versions[i])
        throw std::logic_error(detail::concat("version regression on field ", host.fields[s], " row ", hr.rows[i]));
      if (e->version > hr.versions[i]) {
        std::copy(e->value.begin(), e->value.end(), hr.values.begin() + static_cast<std::ptrdiff_t>(i * hr.dim));
        hr.versions[i] = e->version;
      }
    }
  }
}

template <typename T>
std::vector<RowVersion> row_versions(const HostStore<T>& host, const Prefetched<T>& p) {
  std::vector<RowVersion> out;
  for (std::size_t s = 0; s < p.slots.size(); ++s)
    for (std::size_t i = 0; i < p.slots[s].rows.size(); ++i)
      out.push_back({host.fields[s], p.slots[s].rows[i], p.slots[s].versions[i]});
  return out;
}

struct WorkerOutput {
  GradEntry grads;
  StepResult step;
};

/// Forward/backward with host rows taken from `fresh`; updates the worker's
/// own parameters and (optionally) publishes post-update host rows to `cache`.
template <typename T>
WorkerOutput worker_step(DlrmModel<T>& model, ModelOptimizer<T>& opt, const HostStore<T>& host,
                         const Batch<T>& batch, const Prefetched<T>& fresh, const StepOptions& opts,
                         EmbCache<T>* cache) {
  std::vector<RowSource<T>> overrides(static_cast<std::size_t>(model.n_sparse()));
  std::vector<bool> skip(static_cast<std::size_t>(model.n_sparse()), false);
  for (std::size_t s = 0; s < host.fields.size(); ++s) {
    const auto f = static_cast<std::size_t>(host.fields[s]);
    const HostRows<T>* hr = &fresh.slots[s];
    overrides[f] = [hr](Index r) { return hr->value(r); };
    skip[f] = true;
  }
  auto g = compute_gradients(model, batch, opts, std::span<const RowSource<T>>(overrides));
  apply_gradients(model, g, opt, skip);

  WorkerOutput out;
  out.grads.batch = fresh.batch;
  out.grads.lr = opt.lr;
  for (std::size_t s = 0; s < host.fields.size(); ++s)
    out.grads.slots.push_back(std::move(g.rows[static_cast<std::size_t>(host.fields[s])]));
  out.step.metrics = compute_metrics<T>(g.predictions, batch.labels);
  out.step.metrics.loss = g.loss;
  out.step.counters = g.counters;
  out.step.predictions.assign(g.predictions.begin(), g.predictions.end());

  if (cache) {
    std::map<typename EmbCache<T>::Key, std::pair<std::vector<T>, std::int64_t>> written;
    const T lr = static_cast<T>(opt.lr);
    for (std::size_t s = 0; s < host.fields.size(); ++s) {
      const auto& hr = fresh.slots[s];
      const auto& ag = out.grads.slots[s];
      for (std::size_t u = 0; u < ag.unique_indices.size(); ++u) {
        const Index r = ag.unique_indices[u];
        const auto cur = hr.value(r);
        std::vector<T> v(cur.begin(), cur.end());
        sgd_row_update<T>(v, ag.grad(u), lr);
        written[{host.fields[s], r}] = {std::move(v), hr.versions[hr.pos.at(r)] + 1};
      }
    }
    cache->advance(std::move(written));
  }
  return out;
}

/// Applies the oldest queued gradient (with the learning rate its worker
/// step used) to the host rows and bumps their versions. Returns the rows touched with their new versions.
template <typename T>
std::vector<RowVersion> server_step(HostStore<T>& host, BoundedQueue<GradEntry>& queue,
                                    std::deque<GradEntry>* history = nullptr, Index history_cap = 0,
                                    Index* batch_out = nullptr) {
  std::vector<RowVersion> touched;
  if (queue.empty()) return touched;
  GradEntry e = queue.pop();
  const T lr_t = static_cast<T>(e.lr);
  for (std::size_t s = 0; s < e.slots.size(); ++s) {
    const auto& ag = e.slots[s];
    for (std::size_t u = 0; u < ag.unique_indices.size(); ++u) {
      const Index r = ag.unique_indices[u];
      sgd_row_update<T>(host.tables[s].row(r), ag.grad(u), lr_t);
      auto& ver = host.versions[s][static_cast<std::size_t>(r)];
      ++ver;
      touched.push_back({host.fields[s], r, ver});
    }
  }
  if (batch_out) *batch_out = e.batch;
  if (history && history_cap > 0) {
    history->push_back(std::move(e));
    while (static_cast<Index>(history->size()) > history_cap) history->pop_front();
  }
  return touched;
}

template <typename T>
struct PipelineResult {
  DlrmModel<T> model;
  std::vector<PipelineEvent> events;
  std::vector<StepResult> steps;  // indexed by batch id
  Index max_prefetch_queue = 0;
  Index max_grad_queue = 0;
  Index max_cache_entries = 0;
  Index ticks = 0;
};

/// Number of host-resident rows consumed by a worker at a version below the
/// count of earlier batches that touched the same row.
inline Index count_stale_consumptions(const std::vector<PipelineEvent>& events) {
  std::vector<const PipelineEvent*> workers;
  for (const auto& e : events)
    if (e.stage == Stage::Worker) workers.push_back(&e);
  std::sort(workers.begin(), workers.end(), [](auto* a, auto* b) { return a->batch < b->batch; });
  std::map<std::pair<Index, Index>, std::int64_t> updates;
  Index stale = 0;
  for (const auto* w : workers) {
    for (const auto& rv : w->rows) {
      const auto it = updates.find({rv.field, rv.row});
      const std::int64_t expected = it == updates.end() ? 0 : it->second;
      if (rv.version != expected) ++stale;
    }
    for (const auto& rv : w->rows) ++updates[{rv.field, rv.row}];
  }
  return stale;
}

namespace detail {

template <typename T>
Index max_host_rows_per_batch(const HostStore<T>& host, const Dataset& ds,
                              const std::vector<std::vector<Index>>& schedule) {
  Index best = 1;
  for (const auto& ids : schedule) {
    Index total = 0;
    for (Index f : host.fields) {
      std::set<Index> rows;
      for (Index id : ids)
        for (Index r : ds.samples[static_cast<std::size_t>(id)].sparse[static_cast<std::size_t>(f)]) rows.insert(r);
      total += static_cast<Index>(rows.size());
    }
    best = std::max(best, total);
  }
  return best;
}

}  // namespace detail

/// Tick scheduler. Per tick: server, then cache_sync + worker, then prefetch,
/// each handling at most one batch (the server drains its whole queue once
/// the queue is full or no upstream work remains). At most LC batches are in
/// flight between prefetch and server update, so LC = 1 is strictly sequential.
template <typename T>
PipelineResult<T> run_pipeline(DlrmModel<T> model, const Dataset& ds, const std::vector<std::vector<Index>>& schedule,
                               const PipelineConfig& cfg) {
  EFFTT_REQUIRE(cfg.lc >= 1, "LC must be >= 1");
  PipelineResult<T> res;
  auto opt = ModelOptimizer<T>::create(model, cfg.lr, cfg.momentum);
  HostStore<T> host = take_host_tables(model);
  const Index capacity = 4 * cfg.lc * detail::max_host_rows_per_batch(host, ds, schedule);
  EmbCache<T> cache(cfg.lc, capacity);
  BoundedQueue<std::pair<Prefetched<T>, Batch<T>>> pq(cfg.lc);
  BoundedQueue<GradEntry> gq(cfg.lc);
  std::deque<GradEntry> history;

  const auto n = static_cast<Index>(schedule.size());
  res.steps.resize(static_cast<std::size_t>(n));
  Index next = 0;
  Index applied = 0;
  Index tick = 0;
  while (applied < n) {
    const bool upstream_done = next == n && pq.empty();
    if (gq.full() || (upstream_done && !gq.empty())) {
      while (!gq.empty()) {
        Index b = 0;
        auto rows = server_step(host, gq, &history, cfg.lc, &b);
        res.events.push_back({tick, Stage::Server, b, std::move(rows)});
        ++applied;
      }
    }
    if (!pq.empty() && !gq.full()) {
      auto [pre, batch] = pq.pop();
      opt.set_lr(cfg.lr_for(pre.batch));
      if (cfg.cache_sync) cache_sync(cache, host, pre);
      res.events.push_back({tick, Stage::CacheSync, pre.batch, row_versions(host, pre)});
      auto out = worker_step(model, opt, host, batch, pre, cfg.step, cfg.cache_sync ? &cache : nullptr);
      res.events.push_back({tick, Stage::Worker, pre.batch, row_versions(host, pre)});
      res.steps[static_cast<std::size_t>(pre.batch)] = out.step;
      gq.push(std::move(out.grads));
    }
    if (next < n && !pq.full() && next - applied < cfg.lc) {
      auto batch = make_batch<T>(ds, schedule[static_cast<std::size_t>(next)]);
      auto pre = prefetch_rows(host, batch, next);
      res.events.push_back({tick, Stage::Prefetch, next, row_versions(host, pre)});
      pq.push({std::move(pre), std::move(batch)});
      ++next;
    }
    res.max_prefetch_queue = std::max(res.max_prefetch_queue, pq.size());
    res.max_grad_queue = std::max(res.max_grad_queue, gq.size());
    res.max_cache_entries = std::max(res.max_cache_entries, cache.size());
    ++tick;
  }
  res.ticks = tick;
  return_host_tables(model, std::move(host));
  res.model = std::move(model);
  return res;
}

/// Reference loop: each batch is read, trained and applied before the next.
template <typename T>
PipelineResult<T> run_sequential(DlrmModel<T> model, const Dataset& ds,
                                 const std::vector<std::vector<Index>>& schedule, const PipelineConfig& cfg) {
  PipelineResult<T> res;
  auto opt = ModelOptimizer<T>::create(model, cfg.lr, cfg.momentum);
  HostStore<T> host = take_host_tables(model);
  BoundedQueue<GradEntry> gq(1);
  Index tick = 0;
  for (std::size_t b = 0; b < schedule.size(); ++b) {
    const auto id = static_cast<Index>(b);
    auto batch = make_batch<T>(ds, schedule[b]);
    auto pre = prefetch_rows(host, batch, id);
    opt.set_lr(cfg.lr_for(id));
    res.events.push_back({tick++, Stage::Prefetch, id, row_versions(host, pre)});
    res.events.push_back({tick, Stage::CacheSync, id, row_versions(host, pre)});
    auto out = worker_step<T>(model, opt, host, batch, pre, cfg.step, nullptr);
    res.events.push_back({tick++, Stage::Worker, id, row_versions(host, pre)});
    res.steps.push_back(out.step);
    gq.push(std::move(out.grads));
    res.events.push_back({tick++, Stage::Server, id, server_step(host, gq)});
  }
  res.ticks = tick;
  res.max_prefetch_queue = schedule.empty() ? 0 : 1;
  res.max_grad_queue = schedule.empty() ? 0 : 1;
  return_host_tables(model, std::move(host));
  res.model = std::move(model);
  return res;
}

/// Seeded batch order over `epochs` passes; epoch e shuffles with mix64(seed + e).
inline std::vector<std::vector<Index>> make_schedule(Index n_samples, Index batch_size, Index epochs,
                                                     std::uint64_t seed) {
  std::vector<std::vector<Index>> out;
  for (Index e = 0; e < epochs; ++e) {
    auto b = batch_iter(n_samples, batch_size, mix64(seed + static_cast<std::uint64_t>(e)));
    out.insert(out.end(), std::make_move_iterator(b.begin()), std::make_move_iterator(b.end()));
  }
  return out;
}

}  // namespace efftt
