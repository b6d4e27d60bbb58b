#pragma once

// Model configuration, grouped parameter storage, train masks and the STLR1
// on-disk tensor format.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stlr/errors.hpp"
#include "stlr/tensor.hpp"

namespace stlr {

enum class ParamGroup { encoder, decoder_base, lm_head, adapter };

inline const char* to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::encoder: return "encoder";
    case ParamGroup::decoder_base: return "decoder-base";
    case ParamGroup::lm_head: return "lm-head";
    case ParamGroup::adapter: return "adapter";
  }
  return "?";
}

inline ParamGroup parse_param_group(std::string_view s) {
  if (s == "encoder") return ParamGroup::encoder;
  if (s == "decoder-base") return ParamGroup::decoder_base;
  if (s == "lm-head") return ParamGroup::lm_head;
  if (s == "adapter") return ParamGroup::adapter;
  throw ConfigError("unknown parameter group '" + std::string(s) + "'");
}

inline const std::vector<ParamGroup>& all_param_groups() {
  static const std::vector<ParamGroup> g{ParamGroup::encoder, ParamGroup::decoder_base, ParamGroup::lm_head,
                                         ParamGroup::adapter};
  return g;
}

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t n_enc_layers = 2;
  std::size_t n_dec_layers = 2;
  std::size_t n_heads = 2;
  std::size_t ffn_dim = 128;
  std::size_t max_positions = 64;
  double dropout = 0.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (vocab_size < 6) throw ConfigError("model: vocab_size must cover the 5 special tokens plus text");
    if (d_model == 0 || n_enc_layers == 0 || n_dec_layers == 0 || n_heads == 0 || ffn_dim == 0 || max_positions == 0)
      throw ConfigError("model: all sizes must be >= 1");
    if (d_model % n_heads != 0) throw ConfigError("model: d_model must be divisible by n_heads");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout must be in [0,1)");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},       {"n_enc_layers", c.n_enc_layers},
       {"n_dec_layers", c.n_dec_layers}, {"n_heads", c.n_heads}, {"ffn_dim", c.ffn_dim},
       {"max_positions", c.max_positions}, {"dropout", c.dropout}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_enc_layers = j.at("n_enc_layers").get<std::size_t>();
  c.n_dec_layers = j.at("n_dec_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
  c.max_positions = j.at("max_positions").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
}

enum class AdapterVariant { plain, houlsby, pfeiffer, parallel, invertible, compacter };

inline const char* to_string(AdapterVariant v) {
  switch (v) {
    case AdapterVariant::plain: return "plain";
    case AdapterVariant::houlsby: return "houlsby";
    case AdapterVariant::pfeiffer: return "pfeiffer";
    case AdapterVariant::parallel: return "parallel";
    case AdapterVariant::invertible: return "invertible";
    case AdapterVariant::compacter: return "compacter";
  }
  return "?";
}

inline AdapterVariant parse_adapter_variant(std::string_view s) {
  for (auto v : {AdapterVariant::plain, AdapterVariant::houlsby, AdapterVariant::pfeiffer, AdapterVariant::parallel,
                 AdapterVariant::invertible, AdapterVariant::compacter})
    if (s == to_string(v)) return v;
  throw ConfigError("unknown adapter variant '" + std::string(s) + "'");
}

inline const std::vector<AdapterVariant>& all_adapter_variants() {
  static const std::vector<AdapterVariant> v{AdapterVariant::plain,    AdapterVariant::houlsby,
                                             AdapterVariant::pfeiffer, AdapterVariant::parallel,
                                             AdapterVariant::invertible, AdapterVariant::compacter};
  return v;
}

struct AdapterConfig {
  AdapterVariant variant = AdapterVariant::plain;
  std::size_t bottleneck = 8;
  double init_scale = 1.0;
  std::size_t compacter_n = 2;
  std::vector<std::size_t> layers;  // decoder layers to inject; empty = all
  bool inject_encoder = false;

  bool operator==(const AdapterConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const AdapterConfig& c) {
  j = {{"variant", to_string(c.variant)}, {"bottleneck", c.bottleneck}, {"init_scale", c.init_scale},
       {"compacter_n", c.compacter_n},   {"layers", c.layers},         {"inject_encoder", c.inject_encoder}};
}

inline void from_json(const nlohmann::json& j, AdapterConfig& c) {
  c.variant = parse_adapter_variant(j.at("variant").get<std::string>());
  c.bottleneck = j.at("bottleneck").get<std::size_t>();
  c.init_scale = j.at("init_scale").get<double>();
  c.compacter_n = j.at("compacter_n").get<std::size_t>();
  c.layers = j.at("layers").get<std::vector<std::size_t>>();
  c.inject_encoder = j.at("inject_encoder").get<bool>();
}

template <class T>
struct ParamTensor {
  std::string name;
  ParamGroup group;
  Matrix<T> value;
};

// Ordered, name-indexed collection of tensors. Order is creation order and
// defines both checkpoint layout and gradient alignment.
template <class T>
class ParamStore {
 public:
  std::size_t add(std::string name, ParamGroup group, Matrix<T> value) {
    if (index_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
    index_.emplace(name, tensors_.size());
    tensors_.push_back({std::move(name), group, std::move(value)});
    return tensors_.size() - 1;
  }

  std::size_t size() const noexcept { return tensors_.size(); }
  const ParamTensor<T>& at(std::size_t i) const { return tensors_.at(i); }
  ParamTensor<T>& at(std::size_t i) { return tensors_.at(i); }

  std::optional<std::size_t> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  std::size_t index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("no parameter named '" + name + "'");
    return it->second;
  }
  const Matrix<T>& get(const std::string& name) const { return tensors_[index(name)].value; }
  Matrix<T>& get(const std::string& name) { return tensors_[index(name)].value; }

  bool has_group(ParamGroup g) const {
    for (const auto& t : tensors_)
      if (t.group == g) return true;
    return false;
  }

  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

 private:
  std::vector<ParamTensor<T>> tensors_;
  std::map<std::string, std::size_t> index_;
};

template <class T>
struct Model {
  ModelConfig config;
  std::optional<AdapterConfig> adapters;
  ParamStore<T> params;
};

template <class To, class From>
Model<To> model_cast(const Model<From>& m) {
  Model<To> out;
  out.config = m.config;
  out.adapters = m.adapters;
  for (const auto& t : m.params) out.params.add(t.name, t.group, matrix_cast<To>(t.value));
  return out;
}

// Which tensors an optimizer may touch.
struct TrainMask {
  std::set<ParamGroup> groups;
  std::vector<bool> trainable;  // aligned with ParamStore order

  bool operator()(std::size_t i) const { return i < trainable.size() && trainable[i]; }
};

template <class T>
TrainMask set_trainable(const Model<T>& model, const std::set<ParamGroup>& groups) {
  if (groups.empty()) throw ConfigError("set_trainable: at least one group is required");
  for (ParamGroup g : groups)
    if (!model.params.has_group(g))
      throw ConfigError(std::string("set_trainable: model has no tensors in group '") + to_string(g) + "'");
  TrainMask m;
  m.groups = groups;
  for (const auto& t : model.params) m.trainable.push_back(groups.count(t.group) > 0);
  return m;
}

template <class T>
TrainMask set_trainable(const Model<T>& model, const std::vector<std::string>& group_names) {
  std::set<ParamGroup> g;
  for (const auto& n : group_names) g.insert(parse_param_group(n));
  return set_trainable(model, g);
}

struct GroupStats {
  std::size_t tensors = 0;
  std::size_t scalars = 0;
  double fraction = 0.0;
};

template <class T>
std::map<ParamGroup, GroupStats> param_stats(const Model<T>& model) {
  std::map<ParamGroup, GroupStats> s;
  for (ParamGroup g : all_param_groups()) s[g] = {};
  std::size_t total = 0;
  for (const auto& t : model.params) {
    auto& e = s[t.group];
    ++e.tensors;
    e.scalars += t.value.size();
    total += t.value.size();
  }
  for (auto& [g, e] : s) e.fraction = total ? static_cast<double>(e.scalars) / static_cast<double>(total) : 0.0;
  return s;
}

// ---------------------------------------------------------------------------
// STLR1 tensor bundles: <dir>/manifest.json + <dir>/params.bin holding
// little-endian float32 values concatenated in manifest order.

struct NamedTensor {
  std::string name;
  std::string group;
  Matrix<float> value;
};

struct TensorBundle {
  nlohmann::json manifest;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

namespace detail {

inline void put_f32_le(std::string& buf, float v) {
  const auto u = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
}

inline float get_f32_le(const unsigned char* p) {
  std::uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(u);
}

inline void write_text_file(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write '" + p.string() + "'");
  out << s;
}

inline std::string read_text_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open '" + p.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

inline void write_bundle(const std::string& dir, nlohmann::json manifest, const std::vector<NamedTensor>& tensors) {
  std::filesystem::create_directories(dir);
  std::string bin;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& t : tensors) {
    entries.push_back({{"name", t.name},
                       {"group", t.group},
                       {"shape", {t.value.rows, t.value.cols}},
                       {"dtype", "f32"},
                       {"offset", bin.size()}});
    for (float v : t.value.data) detail::put_f32_le(bin, v);
  }
  manifest["tensors"] = entries;
  manifest["params_bytes"] = bin.size();
  Fnv1a h;
  h.update(bin);
  manifest["params_hash"] = h.hex();
  detail::write_text_file(std::filesystem::path(dir) / "params.bin", bin);
  detail::write_text_file(std::filesystem::path(dir) / "manifest.json", manifest.dump(2) + "\n");
}

inline TensorBundle read_bundle(const std::string& dir) {
  TensorBundle b;
  try {
    b.manifest = nlohmann::json::parse(detail::read_text_file(std::filesystem::path(dir) / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint '" + dir + "': bad manifest: " + e.what());
  }
  const std::string bin = detail::read_text_file(std::filesystem::path(dir) / "params.bin");
  const auto* bytes = reinterpret_cast<const unsigned char*>(bin.data());
  for (const auto& e : b.manifest.at("tensors")) {
    if (e.at("dtype") != "f32") throw DataError("checkpoint '" + dir + "': unsupported dtype");
    const auto rows = e.at("shape").at(0).get<std::size_t>();
    const auto cols = e.at("shape").at(1).get<std::size_t>();
    const auto off = e.at("offset").get<std::size_t>();
    if (off + rows * cols * 4 > bin.size()) throw DataError("checkpoint '" + dir + "': params.bin is truncated");
    NamedTensor t{e.at("name").get<std::string>(), e.at("group").get<std::string>(), Matrix<float>(rows, cols)};
    for (std::size_t i = 0; i < rows * cols; ++i) t.value.data[i] = detail::get_f32_le(bytes + off + 4 * i);
    b.tensors.push_back(std::move(t));
  }
  return b;
}

inline std::string bundle_hash(const std::string& dir) {
  const auto m = nlohmann::json::parse(detail::read_text_file(std::filesystem::path(dir) / "manifest.json"));
  return m.at("params_hash").get<std::string>();
}

}  // namespace stlr
