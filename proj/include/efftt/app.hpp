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

#include "CLI11.hpp"
#include "efftt/cli.hpp"

namespace efftt::cli {

namespace detail {

inline std::string trim(std::string s) {
  const auto a = s.find_first_not_of(" \t\r");
  const auto b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
}

/// key=value lines (blank lines and '#' comments ignored) as --key=value args.
inline std::vector<std::string> config_args(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw CLI::FileError::Missing(path);
  std::vector<std::string> out;
  std::string line;
  Index lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || trim(line.substr(0, eq)).empty())
      throw CLI::ConversionError(efftt::detail::concat(path, ":", lineno, ": expected key=value"));
    std::string key = trim(line.substr(0, eq));
    std::replace(key.begin(), key.end(), '_', '-');
    out.push_back("--" + key + "=" + trim(line.substr(eq + 1)));
  }
  return out;
}

// Config values go right after the subcommand so explicit flags, parsed later,
// take precedence.
inline std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::vector<std::string> rest;
  std::string config;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw CLI::ArgumentMismatch("--config requires a file path");
      config = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      config = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  if (config.empty()) return rest;
  auto injected = config_args(config);
  if (rest.empty()) return injected;
  std::vector<std::string> out{rest.front()};
  out.insert(out.end(), injected.begin(), injected.end());
  out.insert(out.end(), rest.begin() + 1, rest.end());
  return out;
}

inline void on_off(CLI::App* sub, const std::string& name, bool& target, const std::string& help) {
  sub->add_option_function<std::string>(name, [&target](const std::string& v) { target = v == "on"; }, help)
      ->check(CLI::IsMember({"on", "off"}))
      ->default_str(target ? "on" : "off");
}

inline void shared(CLI::App* sub, std::uint64_t& seed, std::string& precision, std::string& out) {
  sub->add_option("--seed", seed, "random seed")->capture_default_str();
  sub->add_option("--precision", precision, "arithmetic precision")
      ->check(CLI::IsMember({"f32", "f64"}))
      ->capture_default_str();
  sub->add_option("--out", out, "output path")->capture_default_str();
}

}  // namespace detail

/// Parses `args` (without the program name) and runs one command.
inline int run_app(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"TT-compressed embedding engine: data generation, reordering, training, lookup benchmarks", "efftt"};
  app.footer("Every command also accepts --config FILE with key=value lines; explicit flags win.");
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  GenDataOptions gen;
  std::string gen_precision = "f32";
  auto* g = app.add_subcommand("gen-data", "generate a synthetic labelled dataset (CSV)");
  g->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  detail::shared(g, gen.spec.seed, gen_precision, gen.out);
  g->add_option("--samples", gen.spec.n_samples, "number of samples")->capture_default_str();
  g->add_option("--dense", gen.spec.n_dense, "dense features per sample")->capture_default_str();
  g->add_option("--rows", gen.spec.rows_per_field, "rows per sparse field")->delimiter(',')->expected(1, -1);
  g->add_option("--zipf", gen.spec.zipf_s, "Zipf exponent of sparse indices")->capture_default_str();
  g->add_option("--attack-fraction", gen.spec.attack_fraction, "fraction of positive labels")->capture_default_str();
  g->add_option("--min-bag", gen.spec.min_bag, "minimum indices per bag")->capture_default_str();
  g->add_option("--max-bag", gen.spec.max_bag, "maximum indices per bag")->capture_default_str();
  g->add_option("--cluster-size", gen.spec.cluster_size, "plant co-occurrence clusters of this size (0 = off)")
      ->capture_default_str();

  TrainOptions tr;
  auto* t = app.add_subcommand("train", "train the classifier and write a checkpoint");
  t->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  detail::shared(t, tr.seed, tr.precision, tr.out);
  t->add_option("--data", tr.data, "dataset CSV")->required();
  t->add_option("--metrics", tr.metrics, "metrics file (default <out>.metrics.jsonl)");
  t->add_option("--dim", tr.dim, "embedding width")->capture_default_str();
  t->add_option("--d", tr.tt_d, "number of TT cores")->capture_default_str();
  t->add_option("--rank", tr.rank, "TT rank")->capture_default_str();
  t->add_option("--dense-threshold", tr.dense_threshold, "fields with fewer rows stay uncompressed")
      ->capture_default_str();
  t->add_option("--batch", tr.batch, "batch size")->capture_default_str();
  t->add_option("--lr", tr.lr, "learning rate")->capture_default_str();
  t->add_option("--momentum", tr.momentum, "SGD momentum")->capture_default_str();
  t->add_option("--epochs", tr.epochs, "training epochs")->capture_default_str();
  detail::on_off(t, "--lr-decay", tr.lr_decay, "linear learning-rate decay to zero");
  detail::on_off(t, "--reuse", tr.reuse, "prefix reuse in TT lookups");
  detail::on_off(t, "--reorder", tr.reorder, "learn a locality-improving row order first");
  t->add_option("--hot-ratio", tr.hot_ratio, "fraction of rows treated as hot during reordering")
      ->capture_default_str();
  t->add_flag("--pipeline", tr.pipeline, "train with the pipelined parameter-server simulator");
  t->add_option("--lc", tr.lc, "pipeline load capacity")->capture_default_str();
  detail::on_off(t, "--cache-sync", tr.cache_sync, "pipeline embedding cache synchronisation");
  t->add_option("--loss", tr.loss, "loss function")->check(CLI::IsMember({"bce", "mse"}))->capture_default_str();
  t->add_option("--init-std", tr.init_std, "std of initial embedding values")->capture_default_str();
  t->add_option("--log-every", tr.log_every, "steps per metrics record (0 = per epoch)")->capture_default_str();

  ReorderOptions ro;
  auto* r = app.add_subcommand("reorder", "learn a row bijection for one sparse field");
  r->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  detail::shared(r, ro.seed, ro.precision, ro.out);
  r->add_option("--data", ro.data, "dataset CSV")->required();
  r->add_option("--metrics", ro.metrics, "metrics file (default <out>.metrics.jsonl)");
  r->add_option("--field", ro.field, "sparse field to reorder")->capture_default_str();
  r->add_option("--hot-ratio", ro.hot_ratio, "fraction of rows treated as hot")->capture_default_str();
  r->add_option("--batch", ro.batch, "batch size for the co-occurrence graph")->capture_default_str();
  r->add_option("--dim", ro.dim, "embedding width (sets TT factorisation)")->capture_default_str();
  r->add_option("--d", ro.tt_d, "number of TT cores")->capture_default_str();
  r->add_option("--rank", ro.rank, "TT rank")->capture_default_str();

  BenchOptions bo;
  auto* b = app.add_subcommand("bench-lookup", "count slice multiplications with and without prefix reuse");
  b->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  detail::shared(b, bo.seed, bo.precision, bo.out);
  b->add_option("--rows", bo.rows, "table rows")->capture_default_str();
  b->add_option("--dim", bo.dim, "embedding width")->capture_default_str();
  b->add_option("--d", bo.tt_d, "number of TT cores")->capture_default_str();
  b->add_option("--rank", bo.rank, "TT rank")->capture_default_str();
  b->add_option("--batch", bo.batch, "bags per batch")->capture_default_str();
  b->add_option("--bag", bo.bag, "indices per bag")->capture_default_str();
  b->add_option("--batches", bo.batches, "number of batches")->capture_default_str();
  b->add_option("--zipf", bo.zipf, "Zipf exponent of generated indices")->capture_default_str();
  b->add_option("--indices", bo.indices, "explicit single bag, comma separated")->delimiter(',')->expected(1, -1);

  ReportOptions rp;
  std::uint64_t rp_seed = 0;
  std::string rp_precision = "f32";
  auto* p = app.add_subcommand("report", "summarise a metrics file");
  p->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  detail::shared(p, rp_seed, rp_precision, rp.metrics);
  p->add_option("--metrics", rp.metrics, "metrics file to summarise");

  try {
    auto expanded = detail::expand_config(args);
    std::reverse(expanded.begin(), expanded.end());
    app.parse(expanded);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (g->parsed()) return cmd_gen_data(gen, out);
    if (t->parsed()) return cmd_train(tr, out);
    if (r->parsed()) return cmd_reorder(ro, out);
    if (b->parsed()) return cmd_bench_lookup(bo, out);
    if (p->parsed()) return cmd_report(rp, out);
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kNumericError;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::invalid_argument& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::out_of_range& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  }
  return kUsage;
}

}  // namespace efftt::cli
