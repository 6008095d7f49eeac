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

#include "support/oracles.hpp"

using namespace efftt;

namespace {

DlrmConfig small_config(Index dim, std::vector<Index> rows, Index dense_threshold) {
  DlrmConfig c;
  c.n_dense = 3;
  c.rows_per_field = std::move(rows);
  c.embed_dim = dim;
  c.tt_rank = 3;
  c.dense_threshold = dense_threshold;
  c.seed = 17;
  c.emb_init_std = 0.3;
  return c;
}

void zero_all(DlrmModel<double>& m) {
  for_each_parameter(m, [](double& x) { x = 0.0; });
}

std::vector<std::vector<double>> dense_tables_of(const DlrmModel<double>& m) {
  std::vector<std::vector<double>> out;
  for (const auto& t : m.tables) {
    if (const auto* tt = std::get_if<TtTable<double>>(&t)) {
      std::vector<double> flat;
      for (Index r = 0; r < tt->rows(); ++r) {
        const auto row = oracle::tt_row(*tt, r);
        flat.insert(flat.end(), row.begin(), row.end());
      }
      out.push_back(flat);
    } else {
      out.push_back(std::get<DenseTable<double>>(t).data);
    }
  }
  return out;
}

// Dataset whose label is a threshold of a linear score over dense features and
// per-row one-hot weights, so a linear separator exists.
Dataset separable_data(Index n, std::uint64_t seed) {
  DatasetSpec spec;
  spec.n_samples = n;
  spec.n_dense = 4;
  spec.n_sparse = 2;
  spec.rows_per_field = {1024, 1024};
  spec.seed = seed;
  spec.attack_fraction = 0.3;
  auto ds = gen_synthetic(spec);
  normalize_dense(ds);
  return ds;
}

double train_accuracy(DlrmModel<double> model, const Dataset& ds, int steps, Index batch, double lr,
                      std::vector<double>* losses = nullptr) {
  auto opt = ModelOptimizer<double>::create(model, lr, 0.9);
  const auto order = batch_iter(ds.size(), batch, 3);
  for (int s = 0; s < steps; ++s) {
    const auto& ids = order[static_cast<std::size_t>(s) % order.size()];
    const auto r = train_step(model, make_batch<double>(ds, ids), opt);
    if (losses) losses->push_back(r.metrics.loss);
  }
  const auto preds = predict(model, ds);
  std::vector<float> labels;
  for (const auto& smp : ds.samples) labels.push_back(smp.label);
  return compute_metrics<double>(preds, labels).accuracy;
}

}  // namespace

TEST(Interaction, Examples) {
  const std::vector<double> z{1, 0}, e1{0, 1};
  const std::vector<std::span<const double>> one{e1};
  EXPECT_EQ(feature_interaction<double>(z, one), (std::vector<double>{1, 0, 0}));
  EXPECT_EQ(feature_interaction<double>(z, {}), z);
  const std::vector<double> bad{1, 2, 3};
  const std::vector<std::span<const double>> mismatched{bad};
  EXPECT_THROW(feature_interaction<double>(z, mismatched), std::invalid_argument);
}

TEST(Interaction, DotsMatchBruteForce) {
  Rng rng(1);
  for (Index s = 0; s <= 6; ++s) {
    const Index D = rng.between(1, 9);
    std::vector<std::vector<double>> v(static_cast<std::size_t>(s + 1), std::vector<double>(static_cast<std::size_t>(D)));
    for (auto& x : v)
      for (double& y : x) y = rng.normal();
    std::vector<std::span<const double>> embs(v.begin() + 1, v.end());
    const auto out = feature_interaction<double>(v[0], embs);
    ASSERT_EQ(static_cast<Index>(out.size()), interaction_width(D, s));
    ASSERT_EQ(static_cast<Index>(out.size()), D + (s + 1) * s / 2);
    std::size_t pos = static_cast<std::size_t>(D);
    for (std::size_t i = 0; i <= static_cast<std::size_t>(s); ++i)
      for (std::size_t j = i + 1; j <= static_cast<std::size_t>(s); ++j) {
        double dot = 0;
        for (Index q = 0; q < D; ++q) dot += v[i][static_cast<std::size_t>(q)] * v[j][static_cast<std::size_t>(q)];
        EXPECT_NEAR(out[pos++], dot, 1e-12);
      }
  }
}

TEST(MakeModel, ShapesAndFallback) {
  const auto m = make_model<float>(small_config(16, {4096, 118, 1000, 999}, 1000));
  EXPECT_EQ(m.bottom.in_dim(), 3);
  EXPECT_EQ(m.bottom.out_dim(), 16);
  EXPECT_EQ(m.top.in_dim(), interaction_width(16, 4));
  EXPECT_EQ(m.top.out_dim(), 1);
  EXPECT_TRUE(m.is_tt(0));
  EXPECT_FALSE(m.is_tt(1));
  EXPECT_TRUE(m.is_tt(2));
  EXPECT_FALSE(m.is_tt(3));
  const std::vector<Index> rows{4096, 118, 1000, 999};
  for (Index f = 0; f < 4; ++f) EXPECT_GE(m.table_rows(f), rows[static_cast<std::size_t>(f)]);
  for (const auto& L : m.bottom.layers)
    for (float b : L.bias) EXPECT_EQ(b, 0.0f);
}

TEST(DlrmForward, ZeroWeights) {
  auto m = make_model<double>(small_config(4, {64, 2000}, 1000));
  zero_all(m);
  const std::vector<double> dense{0.3, 0.1, 0.9};
  const std::vector<IndexBag> bags{{1, 2}, {1999}};
  EXPECT_EQ(dlrm_forward<double>(m, dense, bags), 0.5);
  m.loss = LossKind::Mse;
  EXPECT_EQ(dlrm_forward<double>(m, dense, bags), 0.0);
}

TEST(DlrmForward, MatchesDenseReferenceModel) {
  for (std::uint64_t seed : {1, 2, 3}) {
    auto cfg = small_config(4, {300, 40}, 100);
    cfg.seed = seed;
    const auto m = make_model<double>(cfg);
    ASSERT_TRUE(m.is_tt(0));
    const auto tables = dense_tables_of(m);
    Rng rng(seed);
    for (int i = 0; i < 10; ++i) {
      const std::vector<double> dense{rng.uniform(), rng.uniform(), rng.uniform()};
      const std::vector<std::vector<Index>> bags{{rng.between(0, 299), rng.between(0, 299)}, {rng.between(0, 39)}};
      const std::vector<IndexBag> ib(bags.begin(), bags.end());
      const double expect = oracle::dlrm_predict(m.bottom, m.top, tables, 4, dense, bags);
      EXPECT_NEAR(dlrm_forward<double>(m, dense, ib), expect, 1e-12);
    }
  }
}

TEST(DlrmForward, DenseCounterpartEquivalence) {
  auto cfg = small_config(8, {2048, 1500, 30}, 1000);
  const auto m = make_model<double>(cfg);
  const auto dense = dense_counterpart(m);
  for (Index f = 0; f < 3; ++f) EXPECT_FALSE(dense.is_tt(f));
  DatasetSpec spec;
  spec.n_samples = 200;
  spec.n_dense = 3;
  spec.n_sparse = 3;
  spec.rows_per_field = {2048, 1500, 30};
  auto ds = gen_synthetic(spec);
  normalize_dense(ds);
  const auto a = predict(m, ds), b = predict(dense, ds);
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_NEAR(a[i], b[i], 1e-10);
}

TEST(DlrmForward, RejectsBadInputs) {
  const auto m = make_model<double>(small_config(4, {64}, 1000));
  EXPECT_THROW(dlrm_forward<double>(m, std::vector<double>{0.1, 0.2}, std::vector<IndexBag>{{1}}), std::invalid_argument);
  EXPECT_THROW(dlrm_forward<double>(m, std::vector<double>{0.1, 0.2, 0.3}, std::vector<IndexBag>{{64}}), std::out_of_range);
  EXPECT_THROW(dlrm_forward<double>(m, std::vector<double>{0.1, 0.2, 0.3}, std::vector<IndexBag>{{}}), std::invalid_argument);
  auto nan = m;
  nan.bottom.layers[0].weight[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(dlrm_forward<double>(nan, std::vector<double>{0.1, 0.2, 0.3}, std::vector<IndexBag>{{1}}), NumericError);
}

TEST(Metrics, ConfusionExamples) {
  const std::vector<double> perfect{1, 0, 1};
  const std::vector<float> y{1, 0, 1};
  const auto m = compute_metrics<double>(perfect, y);
  EXPECT_EQ(m.accuracy, 1.0);
  EXPECT_EQ(m.recall, 1.0);
  EXPECT_EQ(m.f1, 1.0);
  const std::vector<double> none{0.1, 0.2, 0.3};
  const auto n = compute_metrics<double>(none, y);
  EXPECT_EQ(n.recall, 0.0);
  EXPECT_EQ(n.f1, 0.0);
  // TP=3, FP=1, FN=1, TN=5
  const std::vector<double> p{1, 1, 1, 1, 0, 0, 0, 0, 0, 0};
  const std::vector<float> l{1, 1, 1, 0, 1, 0, 0, 0, 0, 0};
  const auto c = compute_metrics<double>(p, l);
  EXPECT_DOUBLE_EQ(c.accuracy, 0.8);
  EXPECT_DOUBLE_EQ(c.recall, 0.75);
  EXPECT_DOUBLE_EQ(c.f1, 0.75);
  EXPECT_THROW(compute_metrics<double>(std::vector<double>{}, std::vector<float>{}), std::invalid_argument);
}

TEST(Loss, ClampedBinaryCrossEntropy) {
  const std::vector<double> sure{1.0, 0.0};
  const std::vector<float> right{1.f, 0.f};
  const std::vector<float> wrong{0.f, 1.f};
  EXPECT_NEAR(batch_loss<double>(LossKind::Bce, sure, right), -std::log(1.0 - 1e-7), 1e-12);
  EXPECT_NEAR(batch_loss<double>(LossKind::Bce, sure, wrong), -std::log(1e-7), 1e-9);
  EXPECT_DOUBLE_EQ(batch_loss<double>(LossKind::Mse, std::vector<double>{0.5, 2.0}, right), (0.25 + 4.0) / 2);
}

TEST(Gradients, BceGradientVanishesAtTarget) {
  auto m = make_model<double>(small_config(4, {64}, 1000));
  zero_all(m);
  m.top.layers.back().bias[0] = 40.0;  // p ~ 1 - 4e-18, clamped to 1 - 1e-7
  Batch<double> b;
  b.size = 1;
  b.dense = {0.1, 0.2, 0.3};
  b.bags = {{{3}}};
  b.labels = {1.f};
  const auto g = compute_gradients(m, b);
  EXPECT_NEAR(g.top.bias.back()[0], -1e-7, 1e-12);
  EXPECT_TRUE(std::isfinite(g.loss));
}

TEST(Gradients, FiniteDifferenceOnTinyModels) {
  for (std::uint64_t seed = 1; seed <= 16; ++seed) {
    auto [model, batch] = oracle::tiny_problem(seed);
    const auto r = oracle::model_grad_check(model, batch);
    EXPECT_GT(r.checked, 0u);
    EXPECT_LE(r.worst, 1e-6) << "seed " << seed;
  }
}

TEST(Gradients, ReuseAndAggregationDoNotChangeGradients) {
  auto cfg = small_config(8, {2048, 1200}, 1000);
  const auto m = make_model<double>(cfg);
  Rng rng(3);
  ZipfSampler z(1200, 1.1);
  Batch<double> b;
  b.size = 64;
  b.bags.resize(2);
  for (Index i = 0; i < b.size; ++i) {
    for (int q = 0; q < 3; ++q) b.dense.push_back(rng.uniform());
    b.bags[0].push_back({z(rng), z(rng)});
    b.bags[1].push_back({z(rng)});
    b.labels.push_back(static_cast<float>(rng.between(0, 1)));
  }
  const auto ref = compute_gradients(m, b, StepOptions{false, false});
  for (bool reuse : {false, true})
    for (bool agg : {false, true}) {
      const auto g = compute_gradients(m, b, StepOptions{reuse, agg});
      for (std::size_t f = 0; f < 2; ++f)
        for (std::size_t k = 0; k < 3; ++k)
          for (std::size_t q = 0; q < g.tt[f]->cores[k].size(); ++q) {
            ASSERT_NEAR(g.tt[f]->cores[k][q], ref.tt[f]->cores[k][q], 1e-12);
          }
      if (reuse) {
        EXPECT_LT(g.counters.slice_mults, ref.counters.slice_mults);
      }
    }
}

TEST(TrainStep, ZeroLearningRateKeepsParameters) {
  const auto ds = separable_data(256, 2);
  auto cfg = small_config(8, {1024, 1024}, 1000);
  cfg.n_dense = 4;
  auto m = make_model<double>(cfg);
  const auto before = m;
  auto opt = ModelOptimizer<double>::create(m, 0.0, 0.9);
  std::vector<Index> ids(64);
  std::iota(ids.begin(), ids.end(), Index{0});
  const auto r = train_step(m, make_batch<double>(ds, ids), opt);
  EXPECT_TRUE(std::isfinite(r.metrics.loss));
  EXPECT_EQ(max_parameter_diff(m, before), 0.0);
}

TEST(TrainStep, LearnsSeparableDataAndTracksDenseReference) {
  const auto ds = separable_data(6400, 5);
  auto cfg = small_config(8, {1024, 1024}, 1000);
  cfg.n_dense = 4;
  cfg.emb_init_std = 0.05;
  std::vector<double> losses;
  const double tt_acc = train_accuracy(make_model<double>(cfg), ds, 500, 128, 0.1, &losses);
  cfg.dense_threshold = 1 << 20;
  const double dense_acc = train_accuracy(make_model<double>(cfg), ds, 500, 128, 0.1);
  EXPECT_GE(dense_acc, 0.95);
  EXPECT_GE(tt_acc, dense_acc - 0.02);
  // block averages of the first 50 losses decrease
  double prev = 1e9;
  for (int blk = 0; blk < 5; ++blk) {
    const double avg = std::accumulate(losses.begin() + blk * 10, losses.begin() + blk * 10 + 10, 0.0) / 10;
    EXPECT_LT(avg, prev) << "block " << blk;
    prev = avg;
  }
}

TEST(TrainStep, RelabelledDenseTablesTrainIdentically) {
  auto ds = separable_data(512, 8);
  auto cfg = small_config(8, {1024, 1024}, 1 << 20);
  cfg.n_dense = 4;
  auto base = make_model<double>(cfg);
  Rng rng(4);
  std::vector<Index> perm(1024);
  std::iota(perm.begin(), perm.end(), Index{0});
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  auto moved = base;
  auto& src = std::get<DenseTable<double>>(base.tables[0]);
  auto& dst = std::get<DenseTable<double>>(moved.tables[0]);
  for (Index old = 0; old < 1024; ++old) {
    const auto from = src.row(old);
    std::copy(from.begin(), from.end(), dst.row(perm[static_cast<std::size_t>(old)]).begin());
  }
  auto relabeled = ds;
  relabel_field(relabeled, 0, perm);
  auto o1 = ModelOptimizer<double>::create(base, 0.1, 0.9);
  auto o2 = ModelOptimizer<double>::create(moved, 0.1, 0.9);
  for (const auto& ids : batch_iter(ds.size(), 64, 1)) {
    train_step(base, make_batch<double>(ds, ids), o1);
    train_step(moved, make_batch<double>(relabeled, ids), o2);
  }
  const auto& a = std::get<DenseTable<double>>(base.tables[0]);
  const auto& b = std::get<DenseTable<double>>(moved.tables[0]);
  for (Index old = 0; old < 1024; ++old) {
    const auto ra = a.row(old);
    const auto rb = b.row(perm[static_cast<std::size_t>(old)]);
    for (std::size_t q = 0; q < ra.size(); ++q) ASSERT_EQ(ra[q], rb[q]);
  }
  EXPECT_EQ(base.top, moved.top);
}

TEST(Checkpoint, RoundTrip) {
  auto cfg = small_config(8, {2048, 50}, 1000);
  const auto m = make_model<float>(cfg);
  std::stringstream ss;
  write_checkpoint(ss, m);
  const auto back = read_checkpoint<float>(ss);
  EXPECT_EQ(max_parameter_diff(m, back), 0.0);
  EXPECT_EQ(back.loss, m.loss);
  EXPECT_TRUE(back.is_tt(0));
  EXPECT_FALSE(back.is_tt(1));

  const auto m64 = make_model<double>(cfg);
  std::stringstream s64;
  write_checkpoint(s64, m64);
  EXPECT_LE(max_parameter_diff(m64, read_checkpoint<double>(s64)), 1e-7);
}

TEST(Checkpoint, RejectsCorruption) {
  const auto m = make_model<float>(small_config(8, {2048}, 1000));
  std::stringstream ss;
  write_checkpoint(ss, m);
  const std::string bytes = ss.str();
  std::istringstream truncated(bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(read_checkpoint<float>(truncated), DataError);
  std::string bad = bytes;
  bad[0] = 'X';
  std::istringstream magic(bad);
  EXPECT_THROW(read_checkpoint<float>(magic), DataError);
}
