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
#include <gtest/gtest.h>
#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "efftt/app.hpp"

using namespace efftt;
namespace fs = std::filesystem;

namespace {

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("efftt_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  int run(std::vector<std::string> args) {
    out_.str("");
    err_.str("");
    return cli::run_app(args, out_, err_);
  }

  // Runs the installed binary; returns its exit status.
  int run_binary(const std::string& args) const {
    const std::string cmd = std::string(EFFTT_CLI_PATH) + " " + args + " > " + path("stdout.txt") + " 2> " +
                            path("stderr.txt");
    const int st = std::system(cmd.c_str());
    return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  }

  std::string small_data(const std::string& name, const std::string& extra = "") {
    const auto p = path(name);
    std::vector<std::string> args = {"gen-data", "--samples", "2000", "--dense", "3", "--rows", "64,512", "--out", p};
    std::istringstream is(extra);
    for (std::string tok; is >> tok;) args.push_back(tok);
    EXPECT_EQ(run(args), 0) << err_.str();
    return p;
  }

  std::vector<std::string> train_args(const std::string& data, const std::string& out) const {
    return {"train", "--data", data, "--out", out, "--dim", "8", "--rank", "4", "--dense-threshold", "100",
            "--epochs", "2", "--batch", "64"};
  }

  fs::path dir_;
  std::ostringstream out_;
  std::ostringstream err_;
};

std::string slurp(const std::string& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<cli::Json> metrics_of(const std::string& p) {
  std::ifstream is(p);
  return cli::read_metrics(is);
}

std::vector<cli::Json> without_wall_time(std::vector<cli::Json> v) {
  for (auto& j : v)
    for (const auto& k : cli::wall_time_fields()) j.erase(k);
  return v;
}

Index count_lines(const std::string& p) {
  std::ifstream is(p);
  Index n = 0;
  for (std::string line; std::getline(is, line);) ++n;
  return n;
}

}  // namespace

TEST_F(CliTest, ExitCodes) {
  EXPECT_EQ(run_binary(""), 1);
  EXPECT_EQ(run_binary("frobnicate"), 1);
  EXPECT_EQ(run_binary("train --data"), 1);
  EXPECT_EQ(run_binary("bench-lookup --unknown-flag 3"), 1);
  EXPECT_EQ(run_binary("--help"), 0);
  EXPECT_EQ(run_binary("train --data " + path("missing.csv") + " --out " + path("m.ckpt")), 2);
  EXPECT_EQ(run_binary("bench-lookup --rows 8 --dim 8 --indices 9 --out " + path("b.jsonl")), 2);
  EXPECT_EQ(run_binary("gen-data --samples 300 --dense 3 --rows 64,512 --out " + path("d.csv")), 0);
  EXPECT_EQ(run_binary("train --data " + path("d.csv") + " --out " + path("m.ckpt") +
                       " --lr 1e300 --momentum 0 --epochs 1 --precision f64 --dim 8"),
            3);
  EXPECT_NE(slurp(path("stderr.txt")).find("last good step"), std::string::npos);
}

TEST_F(CliTest, GenDataDefaultsAndDeterminism) {
  ASSERT_EQ(run({"gen-data", "--out", path("a.csv")}), 0);
  ASSERT_EQ(run({"gen-data", "--out", path("b.csv")}), 0);
  EXPECT_EQ(count_lines(path("a.csv")), 24800 + 1);
  EXPECT_EQ(slurp(path("a.csv")), slurp(path("b.csv")));
  EXPECT_NE(out_.str().find("24800 samples"), std::string::npos);
  ASSERT_EQ(run({"gen-data", "--out", path("c.csv"), "--seed", "2", "--samples", "500"}), 0);
  EXPECT_NE(slurp(path("c.csv")), slurp(path("a.csv")).substr(0, slurp(path("c.csv")).size()));
}

TEST_F(CliTest, InvalidAttackFractionIsUsageError) {
  EXPECT_EQ(run({"gen-data", "--out", path("a.csv"), "--attack-fraction", "1.5"}), 1);
  EXPECT_EQ(run({"gen-data", "--out", path("a.csv"), "--attack-fraction", "0"}), 1);
  EXPECT_FALSE(fs::exists(path("a.csv")));
}

TEST_F(CliTest, ConfigFileWithFlagPrecedence) {
  {
    std::ofstream c(path("run.cfg"));
    c << "# small run\nsamples = 120\n\ndense=2\nrows=16,32\nseed=5\n";
  }
  ASSERT_EQ(run({"gen-data", "--config", path("run.cfg"), "--out", path("a.csv")}), 0) << err_.str();
  EXPECT_EQ(count_lines(path("a.csv")), 121);
  ASSERT_EQ(run({"gen-data", "--config", path("run.cfg"), "--samples", "50", "--out", path("b.csv")}), 0);
  EXPECT_EQ(count_lines(path("b.csv")), 51);
  ASSERT_EQ(run({"gen-data", "--samples", "50", "--config=" + path("run.cfg"), "--out", path("c.csv")}), 0);
  EXPECT_EQ(slurp(path("b.csv")), slurp(path("c.csv")));
  {
    std::ofstream c(path("bad.cfg"));
    c << "no_such_key=1\n";
  }
  EXPECT_EQ(run({"gen-data", "--config", path("bad.cfg"), "--out", path("d.csv")}), 1);
  {
    std::ofstream c(path("garbled.cfg"));
    c << "samples 10\n";
  }
  EXPECT_EQ(run({"gen-data", "--config", path("garbled.cfg"), "--out", path("d.csv")}), 1);
  EXPECT_EQ(run({"gen-data", "--config", path("absent.cfg")}), 1);
}

TEST_F(CliTest, BenchSharedPrefixTwoVersusFour) {
  ASSERT_EQ(run({"bench-lookup", "--rows", "8", "--dim", "8", "--indices", "1,0", "--out", path("b.jsonl"),
                 "--precision", "f64"}),
            0)
      << err_.str();
  const auto recs = metrics_of(path("b.jsonl"));
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0]["phase"], "reuse");
  EXPECT_EQ(recs[0]["slice_mults"], 2);
  EXPECT_EQ(recs[1]["phase"], "direct");
  EXPECT_EQ(recs[1]["slice_mults"], 4);
  EXPECT_EQ(recs[0]["buffer_hits"], 1);
  EXPECT_EQ(recs[0]["buffer_misses"], 1);
}

TEST_F(CliTest, BenchDistinctPrefixesCostTheSame) {
  // m = [2,2,2]: rows 0,2,4,6 have four different prefixes.
  cli::BenchOptions o;
  o.rows = 8;
  o.dim = 8;
  o.indices = {0, 2, 4, 6};
  o.out = path("b.jsonl");
  std::ostringstream log;
  const auto rep = cli::run_bench_lookup(o, log);
  EXPECT_EQ(rep.reuse.slice_mults, rep.direct.slice_mults);
  EXPECT_EQ(rep.reuse.buffer_hits, 0);
}

TEST_F(CliTest, BenchZipfBatchesReuseSaves) {
  cli::BenchOptions o;
  o.rows = 4096;
  o.batches = 5;
  o.batch = 128;
  o.out = path("b.jsonl");
  std::ostringstream log;
  const auto rep = cli::run_bench_lookup(o, log);
  EXPECT_GT(rep.reuse.buffer_hits, 0);
  EXPECT_LT(rep.reuse.slice_mults, rep.direct.slice_mults);
  const auto recs = metrics_of(o.out);
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_GT(recs[0]["hit_rate"].get<double>(), 0.0);
}

TEST_F(CliTest, ReorderUniformDataHasNoStructure) {
  const auto data = small_data("u.csv", "--zipf 0");
  for (const char* field : {"0", "1"}) {
    ASSERT_EQ(run({"reorder", "--data", data, "--field", field, "--out", path("u.bij")}), 0) << err_.str();
    const auto recs = metrics_of(path("u.bij.metrics.jsonl"));
    ASSERT_EQ(recs.size(), 1u);
    const double q = recs[0]["modularity"].get<double>();
    const double before = recs[0]["prefixes_before"].get<double>();
    const double after = recs[0]["prefixes_after"].get<double>();
    EXPECT_LT(q, 0.1) << "field " << field;
    EXPECT_LE(std::abs(after - before), 0.05 * before) << "field " << field;
  }
}

TEST_F(CliTest, ReorderRecoversTwoPlantedClusters) {
  const auto data = small_data("c.csv", "--cluster-size 32");
  ASSERT_EQ(run({"reorder", "--data", data, "--field", "0", "--out", path("c.bij")}), 0) << err_.str();
  const auto recs = metrics_of(path("c.bij.metrics.jsonl"));
  EXPECT_EQ(recs[0]["communities"], 2);
  EXPECT_LE(recs[0]["prefixes_after"].get<double>(), recs[0]["prefixes_before"].get<double>());

  // Ground-truth clusters: every bag stays inside one planted group.
  const auto ds = load_csv(data);
  std::vector<Index> parent(64);
  std::iota(parent.begin(), parent.end(), Index{0});
  auto find = [&](Index x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (const auto& s : ds.samples)
    for (std::size_t k = 1; k < s.sparse[0].size(); ++k) parent[find(s.sparse[0][k])] = find(s.sparse[0][0]);
  std::ifstream bs(path("c.bij"));
  const auto bij = read_bijection(bs);
  const Index hot = recs[0]["hot_threshold"].get<Index>();
  // Cold rows, walked in new-id order, should switch planted group exactly once.
  std::vector<std::pair<Index, Index>> cold;  // (new id, group)
  const auto order = count_frequencies(field_batches(ds, batch_iter(ds.size(), 32, 1), 0), 64);
  std::vector<char> is_hot(64, 0);
  for (Index k = 0; k < hot; ++k) is_hot[static_cast<std::size_t>(order.row_at[static_cast<std::size_t>(k)])] = 1;
  for (Index r = 0; r < 64; ++r)
    if (!is_hot[static_cast<std::size_t>(r)]) cold.push_back({bij.forward[static_cast<std::size_t>(r)], find(r)});
  std::sort(cold.begin(), cold.end());
  Index switches = 0;
  for (std::size_t k = 1; k < cold.size(); ++k) switches += cold[k].second != cold[k - 1].second;
  EXPECT_EQ(switches, 1);
}

TEST_F(CliTest, ReorderNearlyAllHotIsNearIdentity) {
  const auto data = small_data("c.csv");
  ASSERT_EQ(run({"reorder", "--data", data, "--field", "1", "--hot-ratio", "0.999", "--out", path("h.bij")}), 0);
  std::ifstream bs(path("h.bij"));
  const auto bij = read_bijection(bs);
  Index fixed = 0;
  for (std::size_t r = 0; r < bij.forward.size(); ++r) fixed += bij.forward[r] == static_cast<Index>(r);
  EXPECT_GE(fixed, 510);
}

TEST_F(CliTest, ReportParsesMetricsAndRejectsGarbage) {
  ASSERT_EQ(run({"bench-lookup", "--rows", "512", "--batches", "2", "--out", path("b.jsonl")}), 0);
  ASSERT_EQ(run({"report", "--metrics", path("b.jsonl")}), 0) << err_.str();
  EXPECT_NE(out_.str().find("2 records"), std::string::npos);
  EXPECT_NE(out_.str().find("bench-lookup/reuse"), std::string::npos);
  {
    std::ofstream os(path("bad.jsonl"));
    os << "{\"command\":\"x\"}\n";
  }
  EXPECT_EQ(run({"report", "--metrics", path("bad.jsonl")}), 2);
  EXPECT_NE(err_.str().find("missing field"), std::string::npos);
  {
    std::ofstream os(path("junk.jsonl"));
    os << "not json\n";
  }
  EXPECT_EQ(run({"report", "--metrics", path("junk.jsonl")}), 2);
  EXPECT_EQ(run({"report", "--metrics", path("absent.jsonl")}), 2);
}

TEST_F(CliTest, TrainWritesParseableMetrics) {
  const auto data = small_data("d.csv");
  ASSERT_EQ(run(train_args(data, path("m.ckpt"))), 0) << err_.str();
  const auto recs = metrics_of(path("m.ckpt.metrics.jsonl"));
  ASSERT_EQ(recs.size(), 3u);  // one per epoch plus the test record
  EXPECT_EQ(recs.back()["phase"], "test");
  for (const auto& j : recs) EXPECT_TRUE(std::isfinite(j["loss"].get<double>()));
  EXPECT_TRUE(fs::exists(path("m.ckpt")));
  EXPECT_TRUE(fs::exists(path("m.ckpt.stats")));
}

TEST_F(CliTest, TrainReuseOnOffSameQualityFewerMults) {
  const auto data = small_data("d.csv");
  auto on = train_args(data, path("on.ckpt"));
  on.insert(on.end(), {"--reuse", "on"});
  auto off = train_args(data, path("off.ckpt"));
  off.insert(off.end(), {"--reuse", "off"});
  ASSERT_EQ(run(on), 0) << err_.str();
  ASSERT_EQ(run(off), 0) << err_.str();
  const auto a = metrics_of(path("on.ckpt.metrics.jsonl"));
  const auto b = metrics_of(path("off.ckpt.metrics.jsonl"));
  EXPECT_NEAR(a.back()["f1"].get<double>(), b.back()["f1"].get<double>(), 0.005);
  std::int64_t ma = 0, mb = 0;
  for (const auto& j : a)
    if (j["phase"] == "train") ma += j["slice_mults"].get<std::int64_t>();
  for (const auto& j : b)
    if (j["phase"] == "train") mb += j["slice_mults"].get<std::int64_t>();
  EXPECT_LT(ma, mb);
  EXPECT_GT(ma, 0);
}

TEST_F(CliTest, PipelineLcOneMatchesSequentialCheckpoint) {
  const auto data = small_data("d.csv");
  auto seq = train_args(data, path("seq.ckpt"));
  seq.insert(seq.end(), {"--precision", "f64"});
  auto pipe = train_args(data, path("pipe.ckpt"));
  pipe.insert(pipe.end(), {"--precision", "f64", "--pipeline", "--lc", "1"});
  ASSERT_EQ(run(seq), 0) << err_.str();
  ASSERT_EQ(run(pipe), 0) << err_.str();
  EXPECT_EQ(slurp(path("seq.ckpt")), slurp(path("pipe.ckpt")));
  const auto a = metrics_of(path("seq.ckpt.metrics.jsonl"));
  const auto b = metrics_of(path("pipe.ckpt.metrics.jsonl"));
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k]["loss"], b[k]["loss"]);
    EXPECT_EQ(a[k]["f1"], b[k]["f1"]);
  }
  EXPECT_EQ(b.front()["max_grad_queue"], 1);
}

TEST_F(CliTest, PipelineWithoutSyncReportsStaleReads) {
  const auto data = small_data("d.csv");
  auto pipe = train_args(data, path("p.ckpt"));
  pipe.insert(pipe.end(), {"--pipeline", "--lc", "4", "--cache-sync", "off", "--epochs", "1"});
  ASSERT_EQ(run(pipe), 0) << err_.str();
  const auto recs = metrics_of(path("p.ckpt.metrics.jsonl"));
  EXPECT_GT(recs.front()["stale_reads"].get<Index>(), 0);
  auto synced = train_args(data, path("s.ckpt"));
  synced.insert(synced.end(), {"--pipeline", "--lc", "4", "--epochs", "1"});
  ASSERT_EQ(run(synced), 0) << err_.str();
  EXPECT_EQ(metrics_of(path("s.ckpt.metrics.jsonl")).front()["stale_reads"], 0);
}

TEST_F(CliTest, TrainWithReorderIsDeterministic) {
  const auto data = small_data("d.csv", "--cluster-size 16");
  for (const char* name : {"a.ckpt", "b.ckpt"}) {
    auto args = train_args(data, path(name));
    args.insert(args.end(), {"--reorder", "on", "--seed", "3"});
    ASSERT_EQ(run(args), 0) << err_.str();
  }
  EXPECT_EQ(slurp(path("a.ckpt")), slurp(path("b.ckpt")));
  EXPECT_EQ(slurp(path("a.ckpt.field1.bij")), slurp(path("b.ckpt.field1.bij")));
  EXPECT_EQ(without_wall_time(metrics_of(path("a.ckpt.metrics.jsonl"))),
            without_wall_time(metrics_of(path("b.ckpt.metrics.jsonl"))));
}
