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

#include <functional>
#include <optional>
#include <variant>

#include "efftt/backward.hpp"
#include "efftt/data.hpp"
#include "efftt/lookup.hpp"
#include "efftt/tt_core.hpp"

namespace efftt {

enum class LossKind { Bce, Mse };

/// Fully connected layer, weight stored out x in.
template <typename T>
struct DenseLayer {
  Index in = 0;
  Index out = 0;
  std::vector<T> weight;
  std::vector<T> bias;
  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

/// ReLU on hidden layers, identity on the output layer.
template <typename T>
struct Mlp {
  std::vector<DenseLayer<T>> layers;

  Index in_dim() const { return layers.front().in; }
  Index out_dim() const { return layers.back().out; }
  friend bool operator==(const Mlp&, const Mlp&) = default;
};

/// Layer widths including input and output, e.g. {6, 16, 16}.
struct MlpSpec {
  std::vector<Index> widths;
};

template <typename T>
Mlp<T> make_mlp(const MlpSpec& spec, Rng& rng) {
  EFFTT_REQUIRE(spec.widths.size() >= 2, "an MLP needs at least one layer");
  for (Index w : spec.widths) EFFTT_REQUIRE(w > 0, "MLP widths must be positive");
  Mlp<T> mlp;
  for (std::size_t l = 0; l + 1 < spec.widths.size(); ++l) {
    DenseLayer<T> layer;
    layer.in = spec.widths[l];
    layer.out = spec.widths[l + 1];
    const double stddev = std::sqrt(2.0 / static_cast<double>(layer.in + layer.out));
    layer.weight.resize(static_cast<std::size_t>(layer.in * layer.out));
    for (T& w : layer.weight) w = static_cast<T>(rng.normal(0.0, stddev));
    layer.bias.assign(static_cast<std::size_t>(layer.out), T{0});
    mlp.layers.push_back(std::move(layer));
  }
  return mlp;
}

template <typename T>
using EmbeddingTable = std::variant<TtTable<T>, DenseTable<T>>;

struct DlrmConfig {
  Index n_dense = 6;
  std::vector<Index> rows_per_field;
  Index embed_dim = 16;
  int tt_d = 3;
  Index tt_rank = 8;
  /// Fields with fewer rows keep an uncompressed table.
  Index dense_threshold = 1000;
  std::vector<Index> bottom_hidden = {16};
  std::vector<Index> top_hidden = {16};
  LossKind loss = LossKind::Bce;
  std::uint64_t seed = 1;
  double emb_init_std = 0.1;
};

template <typename T>
struct DlrmModel {
  Mlp<T> bottom;
  Mlp<T> top;
  std::vector<EmbeddingTable<T>> tables;
  Index embed_dim = 0;
  LossKind loss = LossKind::Bce;

  Index n_sparse() const { return static_cast<Index>(tables.size()); }
  bool is_tt(Index f) const { return std::holds_alternative<TtTable<T>>(tables[static_cast<std::size_t>(f)]); }
  Index table_rows(Index f) const {
    const auto& t = tables[static_cast<std::size_t>(f)];
    if (const auto* tt = std::get_if<TtTable<T>>(&t)) return tt->rows();
    return std::get<DenseTable<T>>(t).rows;
  }
};

inline Index interaction_width(Index dim, Index n_sparse) { return dim + (n_sparse + 1) * n_sparse / 2; }

template <typename T>
DlrmModel<T> make_model(const DlrmConfig& cfg) {
  EFFTT_REQUIRE(cfg.embed_dim > 0 && cfg.n_dense > 0, "embedding and dense widths must be positive");
  Rng rng(cfg.seed);
  DlrmModel<T> model;
  model.embed_dim = cfg.embed_dim;
  model.loss = cfg.loss;

  MlpSpec bottom{{cfg.n_dense}};
  bottom.widths.insert(bottom.widths.end(), cfg.bottom_hidden.begin(), cfg.bottom_hidden.end());
  bottom.widths.push_back(cfg.embed_dim);
  model.bottom = make_mlp<T>(bottom, rng);

  const auto s = static_cast<Index>(cfg.rows_per_field.size());
  MlpSpec top{{interaction_width(cfg.embed_dim, s)}};
  top.widths.insert(top.widths.end(), cfg.top_hidden.begin(), cfg.top_hidden.end());
  top.widths.push_back(1);
  model.top = make_mlp<T>(top, rng);

  for (std::size_t f = 0; f < cfg.rows_per_field.size(); ++f) {
    const Index rows = cfg.rows_per_field[f];
    const std::uint64_t table_seed = mix64(cfg.seed * 1000003ULL + f);
    if (rows >= cfg.dense_threshold) {
      model.tables.emplace_back(init_random<T>(make_shape(rows, cfg.embed_dim, cfg.tt_d, cfg.tt_rank), table_seed,
                                               cfg.emb_init_std));
    } else {
      DenseTable<T> t(rows, cfg.embed_dim);
      Rng trng(table_seed);
      for (T& x : t.data) x = static_cast<T>(trng.normal(0.0, cfg.emb_init_std));
      model.tables.emplace_back(std::move(t));
    }
  }
  return model;
}

/// Same model with every TT table replaced by its dense reconstruction.
template <typename T>
DlrmModel<T> dense_counterpart(const DlrmModel<T>& model) {
  DlrmModel<T> out = model;
  for (auto& t : out.tables)
    if (auto* tt = std::get_if<TtTable<T>>(&t)) t = reconstruct_full(*tt);
  return out;
}

/// Dense vector followed by the dot products of every unordered pair drawn
/// from {dense, e_1..e_s}, pairs in lexicographic (i, j), i < j order.
template <typename T>
std::vector<T> feature_interaction(std::span<const T> dense_vec, std::span<const std::span<const T>> embs) {
  const auto D = dense_vec.size();
  for (const auto& e : embs) EFFTT_REQUIRE(e.size() == D, "embedding width ", e.size(), " != dense width ", D);
  std::vector<T> out(dense_vec.begin(), dense_vec.end());
  auto vec = [&](std::size_t i) { return i == 0 ? dense_vec : embs[i - 1]; };
  const std::size_t count = embs.size() + 1;
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t j = i + 1; j < count; ++j) {
      const auto a = vec(i);
      const auto b = vec(j);
      T dot{0};
      for (std::size_t q = 0; q < D; ++q) dot += a[q] * b[q];
      out.push_back(dot);
    }
  return out;
}

struct Metrics {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double loss = 0.0;
};

/// Labels and predictions are binarized at `threshold`; ratios with a zero
/// denominator are reported as 0.
template <typename T>
Metrics compute_metrics(std::span<const T> predictions, std::span<const float> labels, double threshold = 0.5) {
  EFFTT_REQUIRE(!predictions.empty(), "no predictions to score");
  EFFTT_REQUIRE(predictions.size() == labels.size(), "prediction/label count mismatch");
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const bool p = static_cast<double>(predictions[i]) >= threshold;
    const bool y = static_cast<double>(labels[i]) >= threshold;
    tp += p && y;
    fp += p && !y;
    fn += !p && y;
    tn += !p && !y;
  }
  Metrics m;
  auto ratio = [](double a, double b) { return b > 0.0 ? a / b : 0.0; };
  m.accuracy = ratio(static_cast<double>(tp + tn), static_cast<double>(predictions.size()));
  m.precision = ratio(static_cast<double>(tp), static_cast<double>(tp + fp));
  m.recall = ratio(static_cast<double>(tp), static_cast<double>(tp + fn));
  m.f1 = ratio(2.0 * m.precision * m.recall, m.precision + m.recall);
  return m;
}

/// One mini-batch in model precision.
template <typename T>
struct Batch {
  Index size = 0;
  std::vector<T> dense;                   // size x n_dense
  std::vector<std::vector<IndexBag>> bags;  // field -> sample -> bag
  std::vector<float> labels;
};

template <typename T>
Batch<T> make_batch(const Dataset& ds, std::span<const Index> ids) {
  EFFTT_REQUIRE(!ids.empty(), "empty batch");
  Batch<T> b;
  b.size = static_cast<Index>(ids.size());
  b.bags.resize(static_cast<std::size_t>(ds.n_sparse()));
  for (Index id : ids) {
    const auto& s = ds.samples.at(static_cast<std::size_t>(id));
    for (float x : s.dense) b.dense.push_back(static_cast<T>(x));
    for (std::size_t f = 0; f < s.sparse.size(); ++f) b.bags[f].push_back(s.sparse[f]);
    b.labels.push_back(s.label);
  }
  return b;
}

/// Override for the rows of one field (e.g. host-resident rows supplied by a
/// parameter server). An empty function means "read the model's table".
template <typename T>
using RowSource = std::function<std::span<const T>(Index)>;

struct StepOptions {
  bool use_reuse = true;
  bool aggregate = true;
};

template <typename T>
struct MlpGrads {
  std::vector<std::vector<T>> weight;
  std::vector<std::vector<T>> bias;
};

template <typename T>
struct ModelGrads {
  MlpGrads<T> bottom;
  MlpGrads<T> top;
  std::vector<std::optional<CoreGrads>> tt;  // per field, TT tables only
  std::vector<AggregatedGrads> rows;        // per field, row-addressed tables
  std::vector<T> predictions;
  double loss = 0.0;
  OpCounters counters;
};

namespace detail {

template <typename T>
void mlp_forward(const Mlp<T>& mlp, std::span<const T> input, Index batch, std::vector<std::vector<T>>& acts) {
  acts.assign(1, std::vector<T>(input.begin(), input.end()));
  for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
    const auto& L = mlp.layers[l];
    const auto& x = acts.back();
    std::vector<T> y(static_cast<std::size_t>(batch * L.out));
    const bool relu = l + 1 < mlp.layers.size();
    for (Index b = 0; b < batch; ++b)
      for (Index o = 0; o < L.out; ++o) {
        T acc = L.bias[static_cast<std::size_t>(o)];
        const T* w = L.weight.data() + o * L.in;
        const T* xi = x.data() + b * L.in;
        for (Index i = 0; i < L.in; ++i) acc += w[i] * xi[i];
        y[static_cast<std::size_t>(b * L.out + o)] = relu && acc < T{0} ? T{0} : acc;
      }
    acts.push_back(std::move(y));
  }
}

// Returns dL/dinput; accumulates parameter grads into `grads`.
template <typename T>
std::vector<T> mlp_backward(const Mlp<T>& mlp, const std::vector<std::vector<T>>& acts, std::vector<T> dy,
                            Index batch, MlpGrads<T>& grads) {
  grads.weight.resize(mlp.layers.size());
  grads.bias.resize(mlp.layers.size());
  for (std::size_t l = mlp.layers.size(); l-- > 0;) {
    const auto& L = mlp.layers[l];
    const auto& x = acts[l];
    const auto& y = acts[l + 1];
    if (l + 1 < mlp.layers.size())
      for (std::size_t q = 0; q < dy.size(); ++q)
        if (!(y[q] > T{0})) dy[q] = T{0};
    auto& gw = grads.weight[l];
    auto& gb = grads.bias[l];
    gw.assign(L.weight.size(), T{0});
    gb.assign(L.bias.size(), T{0});
    std::vector<T> dx(static_cast<std::size_t>(batch * L.in), T{0});
    for (Index b = 0; b < batch; ++b)
      for (Index o = 0; o < L.out; ++o) {
        const T g = dy[static_cast<std::size_t>(b * L.out + o)];
        gb[static_cast<std::size_t>(o)] += g;
        const T* xi = x.data() + b * L.in;
        const T* w = L.weight.data() + o * L.in;
        T* gwo = gw.data() + o * L.in;
        T* dxi = dx.data() + b * L.in;
        for (Index i = 0; i < L.in; ++i) {
          gwo[i] += g * xi[i];
          dxi[i] += g * w[i];
        }
      }
    dy = std::move(dx);
  }
  return dy;
}

template <typename T>
T sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

inline constexpr double kProbClamp = 1e-7;

template <typename T>
void require_finite(std::span<const T> v, const char* stage) {
  if (!all_finite(v)) throw NumericError(std::string("non-finite values after ") + stage);
}

}  // namespace detail

/// Everything the backward pass needs from a forward pass.
template <typename T>
struct ForwardState {
  std::vector<std::vector<T>> bottom_acts;
  std::vector<std::vector<T>> top_acts;
  std::vector<std::vector<T>> pooled;  // field -> batch x D
  std::vector<std::optional<ForwardResult<T>>> tt_forward;
  std::vector<T> predictions;
  OpCounters counters;
};

template <typename T>
ForwardState<T> forward_pass(const DlrmModel<T>& model, const Batch<T>& batch, const StepOptions& opts = {},
                             std::span<const RowSource<T>> overrides = {}) {
  const Index B = batch.size;
  const Index D = model.embed_dim;
  const auto s = static_cast<std::size_t>(model.n_sparse());
  EFFTT_REQUIRE(batch.bags.size() == s, "batch has ", batch.bags.size(), " sparse fields, model expects ", s);
  EFFTT_REQUIRE(static_cast<Index>(batch.dense.size()) == B * model.bottom.in_dim(), "dense feature width mismatch");

  ForwardState<T> st;
  detail::mlp_forward(model.bottom, std::span<const T>(batch.dense), B, st.bottom_acts);
  detail::require_finite<T>(st.bottom_acts.back(), "bottom MLP");

  st.pooled.resize(s);
  st.tt_forward.resize(s);
  for (std::size_t f = 0; f < s; ++f) {
    const auto& bags = batch.bags[f];
    EFFTT_REQUIRE(static_cast<Index>(bags.size()) == B, "field ", f, " bag count mismatch");
    const bool overridden = f < overrides.size() && overrides[f];
    if (!overridden && model.is_tt(static_cast<Index>(f))) {
      const auto& tt = std::get<TtTable<T>>(model.tables[f]);
      auto res = forward_batch(tt, std::span<const IndexBag>(bags), opts.use_reuse);
      st.counters += res.counters;
      st.pooled[f] = res.out;
      st.tt_forward[f] = std::move(res);
      continue;
    }
    auto& out = st.pooled[f];
    out.assign(static_cast<std::size_t>(B * D), T{0});
    for (Index b = 0; b < B; ++b) {
      const auto& bag = bags[static_cast<std::size_t>(b)];
      if (!overridden) validate_bag(bag, model.table_rows(static_cast<Index>(f)));
      EFFTT_REQUIRE(!bag.empty(), "empty index bag");
      T* dst = out.data() + b * D;
      bool first = true;
      for (Index i : bag) {
        const std::span<const T> row =
            overridden ? overrides[f](i) : std::get<DenseTable<T>>(model.tables[f]).row(i);
        for (Index q = 0; q < D; ++q) dst[q] = first ? row[static_cast<std::size_t>(q)] : dst[q] + row[static_cast<std::size_t>(q)];
        first = false;
      }
    }
  }
  for (std::size_t f = 0; f < s; ++f) detail::require_finite<T>(st.pooled[f], "embedding lookup");

  const Index I = interaction_width(D, static_cast<Index>(s));
  std::vector<T> inter(static_cast<std::size_t>(B * I));
  std::vector<std::span<const T>> embs(s);
  for (Index b = 0; b < B; ++b) {
    const std::span<const T> z(st.bottom_acts.back().data() + b * D, static_cast<std::size_t>(D));
    for (std::size_t f = 0; f < s; ++f) embs[f] = {st.pooled[f].data() + b * D, static_cast<std::size_t>(D)};
    const auto v = feature_interaction<T>(z, embs);
    std::copy(v.begin(), v.end(), inter.begin() + b * I);
  }
  detail::mlp_forward(model.top, std::span<const T>(inter), B, st.top_acts);
  const auto& logits = st.top_acts.back();
  detail::require_finite<T>(logits, "top MLP");
  st.predictions.resize(static_cast<std::size_t>(B));
  for (Index b = 0; b < B; ++b)
    st.predictions[static_cast<std::size_t>(b)] =
        model.loss == LossKind::Bce ? detail::sigmoid(logits[static_cast<std::size_t>(b)]) : logits[static_cast<std::size_t>(b)];
  return st;
}

/// Single-sample prediction: probability in BCE mode, raw value in MSE mode.
template <typename T>
T dlrm_forward(const DlrmModel<T>& model, std::span<const T> dense_features, std::span<const IndexBag> bags) {
  Batch<T> b;
  b.size = 1;
  b.dense.assign(dense_features.begin(), dense_features.end());
  for (const auto& bag : bags) b.bags.push_back({bag});
  b.labels = {0.0f};
  return forward_pass(model, b).predictions[0];
}

template <typename T>
std::vector<T> predict(const DlrmModel<T>& model, const Dataset& ds, Index batch_size = 1024) {
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(ds.size()));
  std::vector<Index> ids;
  for (Index start = 0; start < ds.size(); start += batch_size) {
    ids.clear();
    for (Index i = start; i < std::min(ds.size(), start + batch_size); ++i) ids.push_back(i);
    const auto st = forward_pass(model, make_batch<T>(ds, ids));
    out.insert(out.end(), st.predictions.begin(), st.predictions.end());
  }
  return out;
}

/// Mean loss over the batch: BCE on clamped probabilities, or squared error.
template <typename T>
double batch_loss(LossKind kind, std::span<const T> predictions, std::span<const float> labels) {
  double total = 0.0;
  for (std::size_t b = 0; b < predictions.size(); ++b) {
    const double y = labels[b];
    const double p = static_cast<double>(predictions[b]);
    if (kind == LossKind::Bce) {
      const double pc = std::clamp(p, detail::kProbClamp, 1.0 - detail::kProbClamp);
      total -= y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc);
    } else {
      total += (p - y) * (p - y);
    }
  }
  return total / static_cast<double>(predictions.size());
}

/// Full forward and backward without touching parameters.
template <typename T>
ModelGrads<T> compute_gradients(const DlrmModel<T>& model, const Batch<T>& batch, const StepOptions& opts = {},
                                std::span<const RowSource<T>> overrides = {}) {
  auto st = forward_pass(model, batch, opts, overrides);
  const Index B = batch.size;
  const Index D = model.embed_dim;
  const auto s = static_cast<std::size_t>(model.n_sparse());

  ModelGrads<T> g;
  g.predictions = st.predictions;
  g.loss = batch_loss<T>(model.loss, st.predictions, batch.labels);
  if (!std::isfinite(g.loss)) throw NumericError("non-finite loss");
  g.counters = st.counters;

  std::vector<T> dlogit(static_cast<std::size_t>(B));
  for (Index b = 0; b < B; ++b) {
    const auto i = static_cast<std::size_t>(b);
    const double y = batch.labels[i];
    const double p = static_cast<double>(st.predictions[i]);
    const double grad = model.loss == LossKind::Bce
                            ? std::clamp(p, detail::kProbClamp, 1.0 - detail::kProbClamp) - y
                            : 2.0 * (p - y);
    dlogit[i] = static_cast<T>(grad / static_cast<double>(B));
  }
  const auto dinter = detail::mlp_backward(model.top, st.top_acts, std::move(dlogit), B, g.top);

  // Interaction backward: vectors v_0 = z, v_f = pooled[f-1].
  const Index I = interaction_width(D, static_cast<Index>(s));
  std::vector<T> dz(static_cast<std::size_t>(B * D), T{0});
  std::vector<std::vector<T>> dpooled(s, std::vector<T>(static_cast<std::size_t>(B * D), T{0}));
  const auto& z = st.bottom_acts.back();
  for (Index b = 0; b < B; ++b) {
    auto vec = [&](std::size_t i) -> const T* { return i == 0 ? z.data() + b * D : st.pooled[i - 1].data() + b * D; };
    auto dvec = [&](std::size_t i) -> T* { return i == 0 ? dz.data() + b * D : dpooled[i - 1].data() + b * D; };
    const T* di = dinter.data() + b * I;
    for (Index q = 0; q < D; ++q) dz[static_cast<std::size_t>(b * D + q)] += di[q];
    std::size_t pos = static_cast<std::size_t>(D);
    for (std::size_t i = 0; i < s + 1; ++i)
      for (std::size_t j = i + 1; j < s + 1; ++j, ++pos) {
        const T gdot = di[pos];
        const T* a = vec(i);
        const T* c = vec(j);
        T* da = dvec(i);
        T* dc = dvec(j);
        for (Index q = 0; q < D; ++q) {
          da[q] += gdot * c[q];
          dc[q] += gdot * a[q];
        }
      }
  }
  detail::mlp_backward(model.bottom, st.bottom_acts, std::move(dz), B, g.bottom);

  g.tt.resize(s);
  g.rows.resize(s);
  for (std::size_t f = 0; f < s; ++f) {
    EmbGradBatch<T> eg;
    eg.dim = D;
    for (Index b = 0; b < B; ++b)
      for (Index i : batch.bags[f][static_cast<std::size_t>(b)]) {
        eg.indices.push_back(i);
        eg.grads.insert(eg.grads.end(), dpooled[f].begin() + b * D, dpooled[f].begin() + (b + 1) * D);
      }
    const bool overridden = f < overrides.size() && overrides[f];
    if (!overridden && model.is_tt(static_cast<Index>(f))) {
      const auto& tt = std::get<TtTable<T>>(model.tables[f]);
      const auto& fw = *st.tt_forward[f];
      std::optional<ReuseView<T>> view;
      if (fw.plan) view.emplace(ReuseView<T>{*fw.plan, *fw.buffer});
      const ReuseView<T>* vp = view ? &*view : nullptr;
      if (opts.aggregate) {
        const auto agg = unique_aggregate(eg);
        g.tt[f] = tt_core_grads(tt, agg.unique_indices, agg.grads, vp, &g.counters);
      } else {
        std::vector<double> wide(eg.grads.begin(), eg.grads.end());
        g.tt[f] = tt_core_grads(tt, eg.indices, wide, vp, &g.counters);
      }
    } else {
      g.rows[f] = unique_aggregate(eg);
    }
  }
  return g;
}

template <typename T>
struct MlpVelocity {
  std::vector<std::vector<T>> weight;
  std::vector<std::vector<T>> bias;
};

/// SGD (optional momentum) state for every parameter group of a model.
/// Row-addressed tables are updated with plain SGD on the touched rows.
template <typename T>
struct ModelOptimizer {
  double lr = 0.05;
  double momentum = 0.0;
  MlpVelocity<T> bottom;
  MlpVelocity<T> top;
  std::vector<std::optional<OptimizerState<T>>> tt;

  static ModelOptimizer create(const DlrmModel<T>& model, double lr, double momentum = 0.0) {
    EFFTT_REQUIRE(lr >= 0.0, "learning rate must be non-negative");
    EFFTT_REQUIRE(momentum >= 0.0 && momentum < 1.0, "momentum must lie in [0, 1)");
    ModelOptimizer o;
    o.lr = lr;
    o.momentum = momentum;
    auto init = [&](const Mlp<T>& mlp, MlpVelocity<T>& v) {
      if (momentum <= 0.0) return;
      for (const auto& L : mlp.layers) {
        v.weight.emplace_back(L.weight.size(), T{0});
        v.bias.emplace_back(L.bias.size(), T{0});
      }
    };
    init(model.bottom, o.bottom);
    init(model.top, o.top);
    for (Index f = 0; f < model.n_sparse(); ++f) {
      if (model.is_tt(f))
        o.tt.emplace_back(OptimizerState<T>::for_table(std::get<TtTable<T>>(model.tables[static_cast<std::size_t>(f)]), lr, momentum));
      else
        o.tt.emplace_back(std::nullopt);
    }
    return o;
  }

  void set_lr(double new_lr) {
    EFFTT_REQUIRE(new_lr >= 0.0, "learning rate must be non-negative");
    lr = new_lr;
    for (auto& t : tt)
      if (t) t->lr = new_lr;
  }
};

namespace detail {

template <typename T>
void sgd_step(std::span<T> w, std::span<const T> g, std::vector<T>* v, T lr, T mu) {
  if (v) {
    for (std::size_t q = 0; q < w.size(); ++q) {
      (*v)[q] = mu * (*v)[q] + g[q];
      w[q] -= lr * (*v)[q];
    }
  } else {
    for (std::size_t q = 0; q < w.size(); ++q) w[q] -= lr * g[q];
  }
}

template <typename T>
void apply_mlp(Mlp<T>& mlp, const MlpGrads<T>& g, MlpVelocity<T>& v, T lr, T mu, bool momentum) {
  for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
    sgd_step<T>(mlp.layers[l].weight, g.weight[l], momentum ? &v.weight[l] : nullptr, lr, mu);
    sgd_step<T>(mlp.layers[l].bias, g.bias[l], momentum ? &v.bias[l] : nullptr, lr, mu);
  }
}

}  // namespace detail

/// Row update shared by local tables and the parameter server: w -= lr * g.
template <typename T>
void sgd_row_update(std::span<T> row, std::span<const double> grad, T lr) {
  for (std::size_t q = 0; q < row.size(); ++q) row[q] -= lr * static_cast<T>(grad[q]);
}

/// Applies one SGD step. Fields flagged in `skip_fields` (e.g. host-resident
/// rows owned by a parameter server) are left untouched.
template <typename T>
void apply_gradients(DlrmModel<T>& model, const ModelGrads<T>& g, ModelOptimizer<T>& opt,
                     const std::vector<bool>& skip_fields = {}) {
  auto check = [](const auto& vv, const char* what) {
    for (const auto& v : vv)
      if (!all_finite(std::span(v))) throw NumericError(std::string("non-finite gradient in ") + what);
  };
  check(g.bottom.weight, "bottom MLP");
  check(g.bottom.bias, "bottom MLP");
  check(g.top.weight, "top MLP");
  check(g.top.bias, "top MLP");
  for (const auto& r : g.rows)
    if (!all_finite(std::span(r.grads))) throw NumericError("non-finite embedding row gradient");

  const T lr = static_cast<T>(opt.lr);
  const T mu = static_cast<T>(opt.momentum);
  const bool momentum = opt.momentum > 0.0;
  detail::apply_mlp(model.bottom, g.bottom, opt.bottom, lr, mu, momentum);
  detail::apply_mlp(model.top, g.top, opt.top, lr, mu, momentum);
  for (std::size_t f = 0; f < model.tables.size(); ++f) {
    if (f < skip_fields.size() && skip_fields[f]) continue;
    if (auto* tt = std::get_if<TtTable<T>>(&model.tables[f])) {
      fused_update(*tt, *g.tt[f], *opt.tt[f]);
    } else {
      auto& table = std::get<DenseTable<T>>(model.tables[f]);
      const auto& r = g.rows[f];
      for (std::size_t u = 0; u < r.unique_indices.size(); ++u)
        sgd_row_update<T>(table.row(r.unique_indices[u]), r.grad(u), lr);
    }
  }
}

struct StepResult {
  Metrics metrics;
  OpCounters counters;
  std::vector<double> predictions;
};

template <typename T>
StepResult train_step(DlrmModel<T>& model, const Batch<T>& batch, ModelOptimizer<T>& opt, const StepOptions& opts = {}) {
  auto g = compute_gradients(model, batch, opts);
  apply_gradients(model, g, opt);
  StepResult r;
  r.metrics = compute_metrics<T>(g.predictions, batch.labels);
  r.metrics.loss = g.loss;
  r.counters = g.counters;
  r.predictions.assign(g.predictions.begin(), g.predictions.end());
  return r;
}

/// Visits every trainable scalar: MLP weights/biases, TT cores, dense table rows.
template <typename T, typename Fn>
void for_each_parameter(DlrmModel<T>& model, Fn&& fn) {
  for (auto* mlp : {&model.bottom, &model.top})
    for (auto& L : mlp->layers) {
      for (T& w : L.weight) fn(w);
      for (T& b : L.bias) fn(b);
    }
  for (auto& t : model.tables) {
    if (auto* tt = std::get_if<TtTable<T>>(&t)) {
      for (std::size_t k = 0; k < tt->dims(); ++k)
        for (T& x : tt->core(k)) fn(x);
    } else {
      for (T& x : std::get<DenseTable<T>>(t).data) fn(x);
    }
  }
}

template <typename T>
double max_parameter_diff(const DlrmModel<T>& a, const DlrmModel<T>& b) {
  std::vector<T> va, vb;
  for_each_parameter(const_cast<DlrmModel<T>&>(a), [&](T& x) { va.push_back(x); });
  for_each_parameter(const_cast<DlrmModel<T>&>(b), [&](T& x) { vb.push_back(x); });
  EFFTT_REQUIRE(va.size() == vb.size(), "models have different parameter counts");
  double m = 0.0;
  for (std::size_t i = 0; i < va.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(va[i]) - static_cast<double>(vb[i])));
  return m;
}

}  // namespace efftt
