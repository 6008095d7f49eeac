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

#include <map>
#include <sstream>

#include "efftt/model.hpp"

namespace efftt {

// Layout: magic, tensor count, then per tensor a length-prefixed name, a kind
// tag and a length-prefixed payload. TT tables reuse the TTEMB1 container;
// everything else is (rank, dims..., LE float32 values).
inline constexpr std::string_view kCheckpointMagic = "EFTTCK1\n";

namespace detail {

enum class TensorKind : std::uint64_t { Tt = 0, Array = 1 };

inline void put_string(std::ostream& os, std::string_view s) {
  le::put_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, std::uint64_t limit = 1 << 20) {
  const auto n = le::get_u64(is);
  if (n > limit) throw DataError("checkpoint string too long");
  std::string s(n, '\0');
  if (!is.read(s.data(), static_cast<std::streamsize>(n))) throw DataError("unexpected end of checkpoint");
  return s;
}

template <typename T>
std::string array_payload(std::vector<Index> dims, std::span<const T> values) {
  std::ostringstream os(std::ios::binary);
  le::put_u64(os, dims.size());
  for (Index d : dims) le::put_i64(os, d);
  for (T v : values) le::put_f32(os, static_cast<float>(v));
  return os.str();
}

template <typename T>
std::vector<T> read_array(std::istream& is, std::vector<Index>& dims) {
  const auto rank = le::get_u64(is);
  if (rank > 8) throw DataError("implausible tensor rank");
  dims.resize(rank);
  Index count = 1;
  for (auto& d : dims) {
    d = le::get_i64(is);
    if (d < 0 || d > (Index{1} << 32)) throw DataError("implausible tensor extent");
    count *= d;
  }
  std::vector<T> v(static_cast<std::size_t>(count));
  for (T& x : v) x = static_cast<T>(le::get_f32(is));
  return v;
}

struct NamedTensor {
  std::string name;
  TensorKind kind;
  std::string payload;
};

template <typename T>
void push_mlp(std::vector<NamedTensor>& out, const std::string& prefix, const Mlp<T>& mlp) {
  for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
    const auto& L = mlp.layers[l];
    const std::string base = prefix + "." + std::to_string(l);
    out.push_back({base + ".weight", TensorKind::Array, array_payload<T>({L.out, L.in}, L.weight)});
    out.push_back({base + ".bias", TensorKind::Array, array_payload<T>({L.out}, L.bias)});
  }
}

}  // namespace detail

template <typename T>
void write_checkpoint(std::ostream& os, const DlrmModel<T>& model) {
  std::vector<detail::NamedTensor> tensors;
  for (std::size_t f = 0; f < model.tables.size(); ++f) {
    const std::string name = "table." + std::to_string(f);
    if (const auto* tt = std::get_if<TtTable<T>>(&model.tables[f])) {
      std::ostringstream ps(std::ios::binary);
      write_tt_table(ps, *tt);
      tensors.push_back({name, detail::TensorKind::Tt, ps.str()});
    } else {
      const auto& t = std::get<DenseTable<T>>(model.tables[f]);
      tensors.push_back({name, detail::TensorKind::Array, detail::array_payload<T>({t.rows, t.cols}, t.data)});
    }
  }
  detail::push_mlp(tensors, "bottom", model.bottom);
  detail::push_mlp(tensors, "top", model.top);
  const std::vector<float> meta = {model.loss == LossKind::Mse ? 1.0f : 0.0f};
  tensors.push_back({"meta.loss", detail::TensorKind::Array, detail::array_payload<float>({1}, meta)});

  os.write(kCheckpointMagic.data(), static_cast<std::streamsize>(kCheckpointMagic.size()));
  le::put_u64(os, tensors.size());
  for (const auto& t : tensors) {
    detail::put_string(os, t.name);
    le::put_u64(os, static_cast<std::uint64_t>(t.kind));
    detail::put_string(os, t.payload);
  }
}

template <typename T>
DlrmModel<T> read_checkpoint(std::istream& is) {
  std::string magic(kCheckpointMagic.size(), '\0');
  if (!is.read(magic.data(), static_cast<std::streamsize>(magic.size())) || magic != kCheckpointMagic)
    throw DataError("not a model checkpoint (bad magic)");
  const auto count = le::get_u64(is);
  if (count > 100000) throw DataError("implausible tensor count");

  DlrmModel<T> model;
  std::map<Index, EmbeddingTable<T>> tables;
  auto layer_of = [](Mlp<T>& mlp, std::size_t l) -> DenseLayer<T>& {
    if (mlp.layers.size() <= l) mlp.layers.resize(l + 1);
    return mlp.layers[l];
  };
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = detail::get_string(is);
    const auto kind = le::get_u64(is);
    std::istringstream ps(detail::get_string(is, std::uint64_t{1} << 36), std::ios::binary);
    const auto dot = name.find('.');
    const std::string group = name.substr(0, dot);
    const std::string rest = dot == std::string::npos ? "" : name.substr(dot + 1);
    std::vector<Index> dims;
    if (group == "table") {
      const Index f = std::stoll(rest);
      if (kind == static_cast<std::uint64_t>(detail::TensorKind::Tt)) {
        tables.emplace(f, read_tt_table<T>(ps));
      } else {
        auto v = detail::read_array<T>(ps, dims);
        if (dims.size() != 2) throw DataError("dense table tensor must be 2-D");
        DenseTable<T> t(dims[0], dims[1]);
        t.data = std::move(v);
        tables.emplace(f, std::move(t));
      }
    } else if (group == "bottom" || group == "top") {
      Mlp<T>& mlp = group == "bottom" ? model.bottom : model.top;
      const auto dot2 = rest.find('.');
      if (dot2 == std::string::npos) throw DataError("malformed tensor name " + name);
      auto& L = layer_of(mlp, static_cast<std::size_t>(std::stoul(rest.substr(0, dot2))));
      auto v = detail::read_array<T>(ps, dims);
      if (rest.substr(dot2 + 1) == "weight") {
        if (dims.size() != 2) throw DataError("weight tensor must be 2-D");
        L.out = dims[0];
        L.in = dims[1];
        L.weight = std::move(v);
      } else {
        L.bias = std::move(v);
      }
    } else if (name == "meta.loss") {
      const auto v = detail::read_array<float>(ps, dims);
      if (v.size() != 1) throw DataError("malformed loss tag");
      model.loss = v[0] != 0.0f ? LossKind::Mse : LossKind::Bce;
    } else {
      throw DataError("unknown tensor " + name);
    }
  }
  for (Index f = 0; f < static_cast<Index>(tables.size()); ++f) {
    auto it = tables.find(f);
    if (it == tables.end()) throw DataError(detail::concat("missing table ", f));
    model.tables.push_back(std::move(it->second));
  }
  if (model.bottom.layers.empty() || model.top.layers.empty()) throw DataError("checkpoint lacks MLP weights");
  model.embed_dim = model.bottom.out_dim();
  for (const auto* mlp : {&model.bottom, &model.top})
    for (const auto& L : mlp->layers)
      if (static_cast<Index>(L.weight.size()) != L.in * L.out || static_cast<Index>(L.bias.size()) != L.out)
        throw DataError("inconsistent MLP layer in checkpoint");
  return model;
}

template <typename T>
void save_checkpoint(const std::string& path, const DlrmModel<T>& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  write_checkpoint(os, model);
}

template <typename T>
DlrmModel<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  return read_checkpoint<T>(is);
}

}  // namespace efftt
