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

#include <chrono>
#include <iostream>

#include "json.hpp"

#include "efftt/checkpoint.hpp"
#include "efftt/pipeline.hpp"
#include "efftt/reorder.hpp"

namespace efftt::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kNumericError = 3 };

using Json = nlohmann::ordered_json;

/// Fields that depend on wall-clock time and are excluded from determinism checks.
inline const std::vector<std::string>& wall_time_fields() {
  static const std::vector<std::string> f = {"samples_per_sec", "wall_ms"};
  return f;
}

inline const std::vector<std::string>& required_fields() {
  static const std::vector<std::string> f = {"command", "phase", "step", "loss", "accuracy", "recall", "f1",
                                             "slice_mults", "buffer_hits", "buffer_misses", "samples_per_sec"};
  return f;
}

inline Json metrics_record(std::string_view command, std::string_view phase, Index step, const Metrics& m,
                           const OpCounters& c, double samples_per_sec) {
  Json j;
  j["command"] = command;
  j["phase"] = phase;
  j["step"] = step;
  j["loss"] = m.loss;
  j["accuracy"] = m.accuracy;
  j["recall"] = m.recall;
  j["f1"] = m.f1;
  j["slice_mults"] = c.slice_mults;
  j["buffer_hits"] = c.buffer_hits;
  j["buffer_misses"] = c.buffer_misses;
  j["row_adds"] = c.row_adds;
  j["samples_per_sec"] = samples_per_sec;
  return j;
}

/// Appends one JSON record per line to a file and echoes it to `echo`.
class MetricsSink {
 public:
  MetricsSink(const std::string& path, std::ostream* echo) : file_(path), echo_(echo) {
    if (!file_) throw DataError("cannot open metrics file " + path);
  }
  void emit(const Json& j) {
    const std::string line = j.dump();
    file_ << line << '\n';
    if (!file_) throw DataError("failed writing metrics");
    if (echo_) *echo_ << line << '\n';
  }

 private:
  std::ofstream file_;
  std::ostream* echo_;
};

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline void require_precision(const std::string& p) {
  EFFTT_REQUIRE(p == "f32" || p == "f64", "precision must be f32 or f64, got '", p, "'");
}

// ---------------------------------------------------------------- gen-data

struct GenDataOptions {
  DatasetSpec spec;
  std::string out = "data.csv";
};

inline int cmd_gen_data(const GenDataOptions& opts, std::ostream& log) {
  DatasetSpec spec = opts.spec;
  // The field count follows --rows.
  spec.n_sparse = static_cast<Index>(spec.rows_per_field.size());
  spec.validate();
  const auto ds = gen_synthetic(spec);
  save_csv(opts.out, ds);
  Index pos = 0;
  for (const auto& s : ds.samples) pos += s.label >= 0.5f;
  log << "wrote " << ds.size() << " samples (" << pos << " positive, " << ds.size() - pos << " negative) to "
      << opts.out << '\n';
  return kOk;
}

// ---------------------------------------------------------------- train

struct TrainOptions {
  std::string data;
  std::string out = "model.ckpt";
  std::string metrics;  // defaults to <out>.metrics.jsonl
  std::uint64_t seed = 1;
  std::string precision = "f32";
  Index dim = 16;
  int tt_d = 3;
  Index rank = 8;
  Index dense_threshold = 1000;
  Index batch = 128;
  double lr = 0.1;
  double momentum = 0.9;
  bool lr_decay = true;  // linear decay to zero over the run
  Index epochs = 10;
  bool reuse = true;
  bool reorder = false;
  double hot_ratio = 0.1;
  bool pipeline = false;
  Index lc = 1;
  bool cache_sync = true;
  std::string loss = "bce";
  Index log_every = 0;  // steps per metrics record; 0 = once per epoch
  double init_std = 0.02;

  void validate() const {
    EFFTT_REQUIRE(!data.empty(), "--data is required");
    require_precision(precision);
    EFFTT_REQUIRE(dim >= 1 && rank >= 1 && tt_d >= 2, "dim, rank must be >= 1 and d >= 2");
    EFFTT_REQUIRE(batch >= 1 && epochs >= 1, "batch and epochs must be >= 1");
    EFFTT_REQUIRE(lr >= 0.0, "lr must be non-negative");
    EFFTT_REQUIRE(momentum >= 0.0 && momentum < 1.0, "momentum must lie in [0,1)");
    EFFTT_REQUIRE(hot_ratio > 0.0 && hot_ratio < 1.0, "hot_ratio must lie in (0,1)");
    EFFTT_REQUIRE(lc >= 1, "lc must be >= 1");
    EFFTT_REQUIRE(loss == "bce" || loss == "mse", "loss must be bce or mse");
    EFFTT_REQUIRE(log_every >= 0, "log_every must be >= 0");
    EFFTT_REQUIRE(init_std > 0.0, "init_std must be positive");
  }
  std::string metrics_path() const { return metrics.empty() ? out + ".metrics.jsonl" : metrics; }
};

struct TrainSummary {
  Metrics train;
  Metrics test;
  Index steps = 0;
  OpCounters counters;
};

namespace detail {

inline Metrics interval_metrics(const Dataset& ds, const std::vector<std::vector<Index>>& schedule,
                                const std::vector<StepResult>& steps, std::size_t begin, std::size_t end) {
  std::vector<double> preds;
  std::vector<float> labels;
  double loss = 0.0;
  for (std::size_t b = begin; b < end; ++b) {
    preds.insert(preds.end(), steps[b].predictions.begin(), steps[b].predictions.end());
    for (Index id : schedule[b]) labels.push_back(ds.samples[static_cast<std::size_t>(id)].label);
    loss += steps[b].metrics.loss * static_cast<double>(schedule[b].size());
  }
  Metrics m = compute_metrics<double>(preds, labels);
  m.loss = loss / static_cast<double>(preds.size());
  return m;
}

template <typename T>
TrainSummary train_impl(const TrainOptions& o, std::ostream& log) {
  Dataset all = load_csv(o.data);
  auto [train, test] = split_train_test(all);
  if (train.size() == 0 || test.size() == 0) throw DataError("dataset too small for a train/test split");
  const NormStats stats = dense_stats(train);
  apply_normalization(train, stats);
  apply_normalization(test, stats);
  {
    std::ofstream ss(o.out + ".stats");
    if (!ss) throw DataError("cannot write " + o.out + ".stats");
    write_stats(ss, stats);
  }
  MetricsSink sink(o.metrics_path(), &log);

  DlrmConfig cfg;
  cfg.n_dense = train.n_dense;
  cfg.rows_per_field = train.rows_per_field;
  cfg.embed_dim = o.dim;
  cfg.tt_d = o.tt_d;
  cfg.tt_rank = o.rank;
  cfg.dense_threshold = o.dense_threshold;
  cfg.loss = o.loss == "mse" ? LossKind::Mse : LossKind::Bce;
  cfg.seed = o.seed;
  cfg.emb_init_std = o.init_std;

  if (o.reorder) {
    const auto graph_batches = batch_iter(train.size(), o.batch, mix64(o.seed ^ 0x7265'6f72'6465'72ULL));
    for (Index f = 0; f < train.n_sparse(); ++f) {
      const Index rows = train.rows_per_field[static_cast<std::size_t>(f)];
      if (rows < o.dense_threshold) continue;
      const auto fb = field_batches(train, graph_batches, f);
      const auto r = learn_reordering(fb, rows, o.hot_ratio);
      relabel_field(train, f, r.bijection.forward);
      relabel_field(test, f, r.bijection.forward);
      std::ofstream bs(o.out + ".field" + std::to_string(f) + ".bij");
      if (!bs) throw DataError("cannot write bijection file");
      write_bijection(bs, r.bijection);
      Json j = metrics_record("train", "reorder", 0, {}, {}, 0.0);
      j["field"] = f;
      j["modularity"] = r.communities.q;
      j["communities"] = r.communities.num_communities;
      sink.emit(j);
    }
  }

  const auto schedule = make_schedule(train.size(), o.batch, o.epochs, o.seed);
  const auto per_epoch = static_cast<Index>(schedule.size()) / o.epochs;
  auto model = make_model<T>(cfg);
  PipelineConfig pc;
  pc.lc = o.lc;
  pc.cache_sync = o.cache_sync;
  pc.lr = o.lr;
  pc.momentum = o.momentum;
  pc.step.use_reuse = o.reuse;
  if (o.lr_decay)
    for (std::size_t b = 0; b < schedule.size(); ++b)
      pc.lr_schedule.push_back(o.lr * (1.0 - static_cast<double>(b) / static_cast<double>(schedule.size())));

  const auto t0 = std::chrono::steady_clock::now();
  std::vector<StepResult> steps;
  Json pipeline_extras;
  if (o.pipeline) {
    auto res = run_pipeline(std::move(model), train, schedule, pc);
    model = std::move(res.model);
    steps = std::move(res.steps);
    pipeline_extras["lc"] = o.lc;
    pipeline_extras["max_prefetch_queue"] = res.max_prefetch_queue;
    pipeline_extras["max_grad_queue"] = res.max_grad_queue;
    pipeline_extras["stale_reads"] = count_stale_consumptions(res.events);
  } else {
    auto opt = ModelOptimizer<T>::create(model, o.lr, o.momentum);
    for (std::size_t b = 0; b < schedule.size(); ++b) {
      opt.set_lr(pc.lr_for(static_cast<Index>(b)));
      try {
        steps.push_back(train_step(model, make_batch<T>(train, schedule[b]), opt, pc.step));
      } catch (const NumericError& e) {
        throw NumericError(efftt::detail::concat(e.what(), " at step ", b + 1, " (last good step ", b, ")"));
      }
    }
  }
  const double elapsed = seconds_since(t0);
  const double sps = elapsed > 0 ? static_cast<double>(train.size() * o.epochs) / elapsed : 0.0;

  TrainSummary summary;
  summary.steps = static_cast<Index>(steps.size());
  const auto interval = static_cast<std::size_t>(o.log_every > 0 ? o.log_every : per_epoch);
  OpCounters window;
  std::size_t begin = 0;
  for (std::size_t b = 0; b < steps.size(); ++b) {
    window += steps[b].counters;
    summary.counters += steps[b].counters;
    if ((b + 1) % interval == 0 || b + 1 == steps.size()) {
      const Metrics m = interval_metrics(train, schedule, steps, begin, b + 1);
      if (!std::isfinite(m.loss))
        throw NumericError(efftt::detail::concat("non-finite loss at step ", b + 1, " (last good step ", begin, ")"));
      Json j = metrics_record("train", "train", static_cast<Index>(b + 1), m, window, sps);
      j["epoch"] = static_cast<Index>(b / static_cast<std::size_t>(std::max<Index>(per_epoch, 1)));
      for (const auto& [k, v] : pipeline_extras.items()) j[k] = v;
      sink.emit(j);
      summary.train = m;
      window = {};
      begin = b + 1;
    }
  }

  const auto preds = predict(model, test);
  std::vector<float> labels;
  for (const auto& s : test.samples) labels.push_back(s.label);
  summary.test = compute_metrics<T>(preds, labels);
  summary.test.loss = batch_loss<T>(model.loss, preds, labels);
  if (!std::isfinite(summary.test.loss)) throw NumericError("non-finite test loss");
  Json j = metrics_record("train", "test", summary.steps, summary.test, {}, 0.0);
  j["precision"] = summary.test.precision;
  sink.emit(j);

  save_checkpoint(o.out, model);
  log << "trained " << summary.steps << " steps; test f1=" << summary.test.f1 << " accuracy=" << summary.test.accuracy
      << "; checkpoint " << o.out << '\n';
  return summary;
}

}  // namespace detail

inline TrainSummary run_train(const TrainOptions& opts, std::ostream& log) {
  opts.validate();
  return opts.precision == "f64" ? detail::train_impl<double>(opts, log) : detail::train_impl<float>(opts, log);
}

inline int cmd_train(const TrainOptions& opts, std::ostream& log) {
  run_train(opts, log);
  return kOk;
}

// ---------------------------------------------------------------- reorder

/// Mean number of distinct TT prefixes (all cores but the last) per batch.
inline double mean_distinct_prefixes(std::span<const IndexBatch> batches, Index last_factor) {
  EFFTT_REQUIRE(!batches.empty(), "no batches");
  double total = 0.0;
  for (const auto& b : batches) {
    std::vector<Index> p;
    p.reserve(b.size());
    for (Index i : b) p.push_back(i / last_factor);
    std::sort(p.begin(), p.end());
    total += static_cast<double>(std::unique(p.begin(), p.end()) - p.begin());
  }
  return total / static_cast<double>(batches.size());
}

struct ReorderOptions {
  std::string data;
  std::string out = "bijection.txt";
  std::string metrics;
  std::uint64_t seed = 1;
  std::string precision = "f32";
  Index field = 0;
  double hot_ratio = 0.1;
  Index batch = 32;
  Index dim = 16;
  int tt_d = 3;
  Index rank = 8;

  void validate() const {
    EFFTT_REQUIRE(!data.empty(), "--data is required");
    require_precision(precision);
    EFFTT_REQUIRE(hot_ratio > 0.0 && hot_ratio < 1.0, "hot_ratio must lie in (0,1)");
    EFFTT_REQUIRE(batch >= 1 && dim >= 1 && rank >= 1 && tt_d >= 2, "invalid batch/dim/rank/d");
  }
  std::string metrics_path() const { return metrics.empty() ? out + ".metrics.jsonl" : metrics; }
};

struct ReorderReport {
  Index field = 0;
  Index hot_threshold = 0;
  Index num_communities = 0;
  double modularity = 0.0;
  double prefixes_before = 0.0;
  double prefixes_after = 0.0;
  IndexBijection bijection;
};

inline ReorderReport reorder_field(const Dataset& ds, const ReorderOptions& o) {
  EFFTT_REQUIRE(o.field >= 0 && o.field < ds.n_sparse(), "field ", o.field, " out of range");
  const Index rows = ds.rows_per_field[static_cast<std::size_t>(o.field)];
  const auto batches = field_batches(ds, batch_iter(ds.size(), o.batch, o.seed), o.field);
  const auto r = learn_reordering(batches, rows, o.hot_ratio);
  const Index last = make_shape(rows, o.dim, o.tt_d, o.rank).m.back();
  ReorderReport rep;
  rep.field = o.field;
  rep.hot_threshold = r.graph.hot_threshold;
  rep.num_communities = r.communities.num_communities;
  rep.modularity = r.communities.q;
  rep.prefixes_before = mean_distinct_prefixes(batches, last);
  rep.prefixes_after = mean_distinct_prefixes(apply_bijection(r.bijection, batches), last);
  rep.bijection = r.bijection;
  return rep;
}

inline int cmd_reorder(const ReorderOptions& opts, std::ostream& log) {
  opts.validate();
  const Dataset ds = load_csv(opts.data);
  const auto rep = reorder_field(ds, opts);
  {
    std::ofstream os(opts.out);
    if (!os) throw DataError("cannot write " + opts.out);
    write_bijection(os, rep.bijection);
  }
  MetricsSink sink(opts.metrics_path(), nullptr);
  Json j = metrics_record("reorder", "reorder", 0, {}, {}, 0.0);
  j["field"] = rep.field;
  j["hot_threshold"] = rep.hot_threshold;
  j["modularity"] = rep.modularity;
  j["communities"] = rep.num_communities;
  j["prefixes_before"] = rep.prefixes_before;
  j["prefixes_after"] = rep.prefixes_after;
  sink.emit(j);
  log << "field " << rep.field << ": hot rows " << rep.hot_threshold << ", communities " << rep.num_communities
      << ", modularity " << rep.modularity << '\n'
      << "mean distinct prefixes per batch: before " << rep.prefixes_before << ", after " << rep.prefixes_after
      << '\n';
  return kOk;
}

// ---------------------------------------------------------------- bench-lookup

struct BenchOptions {
  std::string out = "bench.metrics.jsonl";
  std::uint64_t seed = 1;
  std::string precision = "f32";
  Index rows = 4096;
  Index dim = 16;
  int tt_d = 3;
  Index rank = 8;
  Index batch = 256;
  Index bag = 1;
  Index batches = 20;
  double zipf = 1.05;
  std::vector<Index> indices;  // explicit single bag; overrides generated batches

  void validate() const {
    require_precision(precision);
    EFFTT_REQUIRE(rows >= 1 && dim >= 1 && rank >= 1 && tt_d >= 2, "invalid table shape");
    EFFTT_REQUIRE(batch >= 1 && bag >= 1 && batches >= 1, "batch, bag and batches must be >= 1");
    EFFTT_REQUIRE(zipf >= 0.0, "zipf must be non-negative");
  }
};

struct BenchReport {
  OpCounters reuse;
  OpCounters direct;
  double max_abs_diff = 0.0;
};

namespace detail {

template <typename T>
BenchReport bench_impl(const BenchOptions& o, std::ostream& log) {
  const auto shape = make_shape(o.rows, o.dim, o.tt_d, o.rank);
  const auto table = init_random<T>(shape, o.seed, 0.1);
  std::vector<std::vector<IndexBag>> work;
  if (!o.indices.empty()) {
    work.push_back({IndexBag(o.indices.begin(), o.indices.end())});
  } else {
    Rng rng(o.seed);
    ZipfSampler z(o.rows, o.zipf);
    for (Index b = 0; b < o.batches; ++b) {
      std::vector<IndexBag> bags(static_cast<std::size_t>(o.batch));
      for (auto& bag : bags)
        for (Index i = 0; i < o.bag; ++i) bag.push_back(z(rng));
      work.push_back(std::move(bags));
    }
  }
  BenchReport rep;
  double scale = 1.0;
  MetricsSink sink(o.out, nullptr);
  std::vector<std::vector<T>> reuse_out;
  for (const bool reuse : {true, false}) {
    OpCounters c;
    Index samples = 0;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t b = 0; b < work.size(); ++b) {
      const auto res = forward_batch(table, std::span<const IndexBag>(work[b]), reuse);
      c += res.counters;
      samples += static_cast<Index>(work[b].size());
      if (reuse) {
        reuse_out.push_back(res.out);
      } else {
        for (std::size_t q = 0; q < res.out.size(); ++q) {
          scale = std::max(scale, std::abs(static_cast<double>(res.out[q])));
          rep.max_abs_diff = std::max(rep.max_abs_diff, std::abs(static_cast<double>(res.out[q]) -
                                                                 static_cast<double>(reuse_out[b][q])));
        }
      }
    }
    const double secs = seconds_since(t0);
    (reuse ? rep.reuse : rep.direct) = c;
    Json j = metrics_record("bench-lookup", reuse ? "reuse" : "direct", static_cast<Index>(work.size()), {}, c,
                            secs > 0 ? static_cast<double>(samples) / secs : 0.0);
    const double lookups = static_cast<double>(c.buffer_hits + c.buffer_misses);
    j["hit_rate"] = lookups > 0 ? static_cast<double>(c.buffer_hits) / lookups : 0.0;
    j["wall_ms"] = secs * 1e3;
    sink.emit(j);
    log << (reuse ? "reuse " : "direct") << ": slice_mults=" << c.slice_mults << " buffer_hits=" << c.buffer_hits
        << " buffer_misses=" << c.buffer_misses << " hit_rate=" << j["hit_rate"].get<double>()
        << " wall_ms=" << secs * 1e3 << '\n';
  }
  log << "slice_mults ratio (reuse/direct): "
      << static_cast<double>(rep.reuse.slice_mults) / static_cast<double>(std::max<std::int64_t>(rep.direct.slice_mults, 1))
      << "; max |reuse - direct| = " << rep.max_abs_diff << '\n';
  const double tol = (std::is_same_v<T, double> ? 1e-12 : 1e-5) * scale;
  if (rep.max_abs_diff > tol)
    throw NumericError(efftt::detail::concat("reuse changed lookup results by ", rep.max_abs_diff, " (tolerance ", tol, ")"));
  return rep;
}

}  // namespace detail

inline BenchReport run_bench_lookup(const BenchOptions& opts, std::ostream& log) {
  opts.validate();
  return opts.precision == "f64" ? detail::bench_impl<double>(opts, log) : detail::bench_impl<float>(opts, log);
}

inline int cmd_bench_lookup(const BenchOptions& opts, std::ostream& log) {
  run_bench_lookup(opts, log);
  return kOk;
}

// ---------------------------------------------------------------- report

struct ReportOptions {
  std::string metrics;
};

inline std::vector<Json> read_metrics(std::istream& is) {
  std::vector<Json> out;
  std::string line;
  Index lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::parse_error& e) {
      throw DataError(efftt::detail::concat("metrics line ", lineno, ": ", e.what()));
    }
    for (const auto& k : required_fields())
      if (!j.contains(k)) throw DataError(efftt::detail::concat("metrics line ", lineno, ": missing field '", k, "'"));
    for (const auto& k : required_fields())
      if (k != "command" && k != "phase" && !j[k].is_number())
        throw DataError(efftt::detail::concat("metrics line ", lineno, ": field '", k, "' is not numeric"));
    out.push_back(std::move(j));
  }
  return out;
}

inline int cmd_report(const ReportOptions& opts, std::ostream& log) {
  EFFTT_REQUIRE(!opts.metrics.empty(), "--metrics is required");
  std::ifstream is(opts.metrics);
  if (!is) throw DataError("cannot open " + opts.metrics);
  const auto records = read_metrics(is);
  std::map<std::pair<std::string, std::string>, std::pair<Index, Json>> last;
  for (const auto& j : records) {
    auto& e = last[{j["command"].get<std::string>(), j["phase"].get<std::string>()}];
    ++e.first;
    e.second = j;
  }
  log << records.size() << " records\n";
  for (const auto& [key, v] : last) {
    const auto& j = v.second;
    log << key.first << '/' << key.second << " (" << v.first << " records) last: step=" << j["step"].dump()
        << " loss=" << j["loss"].dump() << " accuracy=" << j["accuracy"].dump() << " recall=" << j["recall"].dump()
        << " f1=" << j["f1"].dump() << " slice_mults=" << j["slice_mults"].dump()
        << " buffer_hits=" << j["buffer_hits"].dump() << '\n';
  }
  return kOk;
}

}  // namespace efftt::cli
