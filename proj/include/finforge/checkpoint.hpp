#pragma once

// Binary checkpoints: "BGPT", u32 version, u64 header length (both little
// endian), a JSON header, then IEEE-754 little-endian payloads for the
// parameters, Adam first moments and Adam second moments, in manifest order.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"

#include "finforge/errors.hpp"
#include "finforge/model.hpp"
#include "finforge/trainer.hpp"

namespace finforge::checkpoint {

using nlohmann::json;
using trainer::TrainConfig;
using trainer::TrainState;

inline constexpr char kMagic[4] = {'B', 'G', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;

template <class T>
struct Checkpoint {
  model::ModelParams<T> params;
  trainer::AdamState<T> adam;
  TrainConfig config;
  TrainState state;
  std::uint64_t corpus_fingerprint = 0;
  std::vector<trainer::DiagRecord> provenance;

  explicit Checkpoint(const model::ModelShape& s) : params(s), adam(s) {}
};

inline json config_to_json(const TrainConfig& c) {
  return json{{"max_lr", c.max_lr},
              {"final_lr", c.final_lr},
              {"warmup_steps", c.warmup_steps},
              {"horizon_steps", c.horizon_steps},
              {"planned_tokens", c.planned_tokens},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"adam_eps", c.adam_eps},
              {"weight_decay", c.weight_decay},
              {"clip_norm", c.clip_norm},
              {"seq_len", c.seq_len},
              {"batch_size", c.batch_size},
              {"batch_size_after", c.batch_size_after},
              {"batch_warmup_steps", c.batch_warmup_steps},
              {"dropout", c.dropout},
              {"qk_layer_scaling", c.qk_layer_scaling},
              {"loss_on_eot", c.loss_on_eot},
              {"seed", c.seed},
              {"total_steps", c.total_steps},
              {"shuffle", trainer::to_string(c.shuffle)},
              {"shard_size", c.shard_size},
              {"log_every", c.log_every},
              {"val_every", c.val_every},
              {"checkpoint_every", c.checkpoint_every},
              {"smoothing_alpha", c.smoothing_alpha}};
}

inline TrainConfig config_from_json(const json& j) {
  TrainConfig c;
  c.max_lr = j.at("max_lr").get<double>();
  c.final_lr = j.at("final_lr").get<double>();
  c.warmup_steps = j.at("warmup_steps").get<std::int64_t>();
  c.horizon_steps = j.at("horizon_steps").get<std::int64_t>();
  c.planned_tokens = j.at("planned_tokens").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.adam_eps = j.at("adam_eps").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.clip_norm = j.at("clip_norm").get<double>();
  c.seq_len = j.at("seq_len").get<std::int64_t>();
  c.batch_size = j.at("batch_size").get<std::int64_t>();
  c.batch_size_after = j.at("batch_size_after").get<std::int64_t>();
  c.batch_warmup_steps = j.at("batch_warmup_steps").get<std::int64_t>();
  c.dropout = j.at("dropout").get<double>();
  c.qk_layer_scaling = j.at("qk_layer_scaling").get<bool>();
  c.loss_on_eot = j.at("loss_on_eot").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.total_steps = j.at("total_steps").get<std::int64_t>();
  c.shuffle = trainer::parse_shuffle_mode(j.at("shuffle").get<std::string>());
  c.shard_size = j.at("shard_size").get<std::int64_t>();
  c.log_every = j.at("log_every").get<std::int64_t>();
  c.val_every = j.at("val_every").get<std::int64_t>();
  c.checkpoint_every = j.at("checkpoint_every").get<std::int64_t>();
  c.smoothing_alpha = j.at("smoothing_alpha").get<double>();
  return c;
}

inline json shape_to_json(const model::ModelShape& s) {
  return json{{"layers", s.layers}, {"heads", s.heads}, {"hidden", s.hidden},
              {"head_dim", s.head_dim}, {"ffn", s.ffn}, {"vocab", s.vocab}};
}

inline model::ModelShape shape_from_json(const json& j) {
  model::ModelShape s{j.at("layers").get<std::int64_t>(), j.at("heads").get<std::int64_t>(),
                      j.at("hidden").get<std::int64_t>(), j.at("head_dim").get<std::int64_t>(),
                      j.at("ffn").get<std::int64_t>(),    j.at("vocab").get<std::int64_t>()};
  s.validate();
  return s;
}

namespace detail {

template <class T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, double> || std::is_same_v<T, float>);
  return std::is_same_v<T, double> ? "f64" : "f32";
}

template <class U>
void put_le(std::ostream& os, U value) {
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>((value >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <class U>
U get_le(std::istream& is) {
  unsigned char b[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(U))) throw DataError("checkpoint: truncated file");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

template <class T>
using Bits = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;

template <class T>
void put_real(std::ostream& os, T v) {
  Bits<T> bits;
  std::memcpy(&bits, &v, sizeof v);
  put_le(os, bits);
}

template <class T>
T get_real(std::istream& is) {
  const auto bits = get_le<Bits<T>>(is);
  T v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

template <class T>
std::vector<std::pair<std::string, model::Tensor<T>*>> sections(Checkpoint<T>& ck) {
  std::vector<std::pair<std::string, model::Tensor<T>*>> out;
  const std::pair<const char*, model::ModelParams<T>*> groups[] = {
      {"param", &ck.params}, {"adam_m", &ck.adam.m}, {"adam_v", &ck.adam.v}};
  for (auto [prefix, p] : groups)
    p->for_each([&](const std::string& name, const char*, model::ParamKind, model::Tensor<T>& t) {
      out.emplace_back(std::string(prefix) + "/" + name, &t);
    });
  return out;
}

}  // namespace detail

template <class T>
void save(std::ostream& os, const Checkpoint<T>& ck_in) {
  auto& ck = const_cast<Checkpoint<T>&>(ck_in);
  json manifest = json::array();
  std::uint64_t offset = 0;
  const auto secs = detail::sections(ck);
  for (const auto& [name, t] : secs) {
    const std::uint64_t nbytes = t->size() * sizeof(T);
    manifest.push_back(json{{"name", name}, {"dtype", detail::dtype_name<T>()}, {"shape", t->shape},
                            {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  json prov = json::array();
  for (const auto& r : ck.provenance)
    prov.push_back(json{{"step", r.step}, {"kind", r.kind}, {"name", r.name}, {"value", r.value}});
  const auto& s = ck.state;
  const json header{{"shape", shape_to_json(ck.params.shape)},
                    {"step", s.step},
                    {"config", config_to_json(ck.config)},
                    {"train_state",
                     {{"epoch", s.epoch},
                      {"doc_order", s.doc_order},
                      {"token_cursor", s.token_cursor},
                      {"rng_state", s.rng_state},
                      {"smooth_num", s.smooth_num},
                      {"smooth_den", s.smooth_den},
                      {"adam_t", ck.adam.t}}},
                    {"corpus_fingerprint", ck.corpus_fingerprint},
                    {"provenance", prov},
                    {"tensors", manifest}};
  const std::string text = header.dump();
  os.write(kMagic, 4);
  detail::put_le<std::uint32_t>(os, kVersion);
  detail::put_le<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : secs)
    for (auto v : t->data) detail::put_real(os, v);
  if (!os) throw DataError("checkpoint: write failed");
}

template <class T>
Checkpoint<T> load(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw DataError("checkpoint: bad magic");
  const auto version = detail::get_le<std::uint32_t>(is);
  if (version != kVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
  const auto len = detail::get_le<std::uint64_t>(is);
  if (len > (std::uint64_t{1} << 34)) throw DataError("checkpoint: implausible header length");
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw DataError("checkpoint: truncated header");
  json header;
  try {
    header = json::parse(text);
    Checkpoint<T> ck(shape_from_json(header.at("shape")));
    ck.config = config_from_json(header.at("config"));
    const auto& st = header.at("train_state");
    ck.state.step = header.at("step").get<std::int64_t>();
    ck.state.epoch = st.at("epoch").get<std::uint64_t>();
    ck.state.doc_order = st.at("doc_order").get<std::vector<std::uint32_t>>();
    ck.state.token_cursor = st.at("token_cursor").get<std::uint64_t>();
    ck.state.rng_state = st.at("rng_state").get<std::uint64_t>();
    ck.state.smooth_num = st.at("smooth_num").get<double>();
    ck.state.smooth_den = st.at("smooth_den").get<double>();
    ck.adam.t = st.at("adam_t").get<std::int64_t>();
    ck.corpus_fingerprint = header.at("corpus_fingerprint").get<std::uint64_t>();
    for (const auto& r : header.at("provenance"))
      ck.provenance.push_back({r.at("step").get<std::int64_t>(), r.at("kind").get<std::string>(),
                               r.at("name").get<std::string>(), r.at("value").get<std::string>()});
    const auto& manifest = header.at("tensors");
    const auto secs = detail::sections(ck);
    if (manifest.size() != secs.size()) throw DataError("checkpoint: tensor manifest does not match shape");
    for (std::size_t i = 0; i < secs.size(); ++i) {
      const auto& m = manifest[i];
      if (m.at("name").get<std::string>() != secs[i].first ||
          m.at("shape").get<std::vector<std::size_t>>() != secs[i].second->shape)
        throw DataError("checkpoint: manifest entry " + std::to_string(i) + " does not match the model");
      if (m.at("dtype").get<std::string>() != detail::dtype_name<T>())
        throw DataError("checkpoint: stored dtype " + m.at("dtype").get<std::string>() + " differs from requested");
    }
    for (const auto& [name, t] : secs)
      for (auto& v : t->data) v = detail::get_real<T>(is);
    return ck;
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: malformed header: ") + e.what());
  }
}

template <class T>
void save_file(const std::string& path, const Checkpoint<T>& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint " + path);
  save(os, ck);
}

template <class T>
Checkpoint<T> load_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path);
  return load<T>(is);
}

template <class T>
Checkpoint<T> snapshot(const trainer::Trainer<T>& tr) {
  Checkpoint<T> ck(tr.params().shape);
  ck.params = tr.params();
  ck.adam = tr.adam();
  ck.config = tr.config();
  ck.state = tr.state();
  ck.corpus_fingerprint = tr.fingerprint();
  ck.provenance = tr.provenance;
  return ck;
}

// Rebuilds a trainer at the checkpointed step. The corpus must be the one
// the checkpoint was taken on.
template <class T>
trainer::Trainer<T> restore(const Checkpoint<T>& ck, std::vector<std::vector<model::TokenId>> train_docs,
                            std::vector<std::vector<model::TokenId>> val_docs = {}) {
  if (trainer::corpus_fingerprint(train_docs) != ck.corpus_fingerprint)
    throw DataError("checkpoint was taken on a different training corpus");
  trainer::Trainer<T> tr(ck.params, ck.config, std::move(train_docs), std::move(val_docs));
  tr.restore(ck.state, ck.params, ck.adam, ck.config);
  tr.provenance = ck.provenance;
  return tr;
}

// Resume with config overrides, optionally re-permuting unseen documents.
// `expected` guards against loading a checkpoint of a different shape.
template <class T>
trainer::Trainer<T> resume_with_overrides(const Checkpoint<T>& ck,
                                          std::vector<std::vector<model::TokenId>> train_docs,
                                          std::vector<std::vector<model::TokenId>> val_docs,
                                          const std::vector<std::pair<std::string, std::string>>& overrides,
                                          bool reshuffle_remaining, std::uint64_t reshuffle_seed,
                                          const model::ModelShape* expected = nullptr,
                                          std::ostream* diag_sink = nullptr) {
  if (expected && !(*expected == ck.params.shape)) throw DataError("checkpoint shape is incompatible with the model");
  auto tr = restore(ck, std::move(train_docs), std::move(val_docs));
  tr.diagnostics.set_sink(diag_sink);
  if (!overrides.empty()) tr.apply_overrides(overrides);
  if (reshuffle_remaining) tr.reshuffle_remaining(reshuffle_seed);
  return tr;
}

}  // namespace finforge::checkpoint
