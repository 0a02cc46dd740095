#pragma once

// Checkpoint: model configuration, parameters and price statistics stored
// as a flat list of named f64 tensors.
//
//   "ANTC" | u32 version | 32-byte config hash | u64 seed | u8 stage
//   | u64 count | count x (u16 name length, name, u8 rank, rank x u32 dims,
//   f64 payload)
//
// Configuration scalars travel as rank-0 tensors named "config.*".

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "antrec/binary_io.hpp"
#include "antrec/dataio.hpp"
#include "antrec/digest.hpp"
#include "antrec/error.hpp"
#include "antrec/model.hpp"

namespace antrec {

enum class Stage : std::uint8_t { pretrained = 0, adapted = 1, scratch = 2 };

inline std::string to_string(Stage s) {
  switch (s) {
    case Stage::pretrained:
      return "pretrained";
    case Stage::adapted:
      return "adapted";
    case Stage::scratch:
      return "scratch";
  }
  return "unknown";
}

struct Checkpoint {
  ModelConfig config;
  ModelParams<double> params;
  PriceNorm price_norm;
  /// Item ids for the rows of params.interaction_emb, ascending.
  std::vector<ItemId> interaction_ids;
  Digest config_hash{};
  std::uint64_t seed = 0;
  Stage stage = Stage::pretrained;
};

struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<double> data;
};

inline constexpr std::string_view kCheckpointMagic = "ANTC";
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline NamedTensor scalar(const std::string& name, double v) { return NamedTensor{name, {}, {v}}; }

template <class M>
NamedTensor matrix_tensor(const std::string& name, const M& m) {
  NamedTensor t{name, {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())}, {}};
  t.data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) t.data.push_back(static_cast<double>(m(i, j)));
  return t;
}

inline std::vector<NamedTensor> config_tensors(const ModelConfig& c) {
  return {scalar("config.irl.d", double(c.irl.d)),
          scalar("config.irl.n_h", double(c.irl.n_h)),
          scalar("config.irl.d_p", double(c.irl.d_p)),
          scalar("config.irl.omega", c.irl.omega),
          scalar("config.irl.beta", c.irl.beta),
          scalar("config.irl.price_norm_max", c.irl.price_norm_max),
          scalar("config.irl.zero_text", c.irl.zero_text),
          scalar("config.irl.zero_image", c.irl.zero_image),
          scalar("config.irl.zero_price", c.irl.zero_price),
          scalar("config.irl.zero_fusion", c.irl.zero_fusion),
          scalar("config.irl.linear_routing", c.irl.linear_routing),
          scalar("config.intent.n_layers", double(c.intent.n_layers)),
          scalar("config.intent.n_heads", double(c.intent.n_heads)),
          scalar("config.intent.max_seq_len", double(c.intent.max_seq_len)),
          scalar("config.intent.dropout", c.intent.dropout),
          scalar("config.intent.pre_norm", c.intent.pre_norm),
          scalar("config.intent.ln_eps", c.intent.ln_eps),
          scalar("config.d_text", double(c.d_text)),
          scalar("config.d_image", double(c.d_image)),
          scalar("config.interaction_emb", c.interaction_emb)};
}

inline std::size_t element_count(const std::vector<std::uint32_t>& dims) {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  std::vector<NamedTensor> tensors = detail::config_tensors(ck.config);
  tensors.push_back(NamedTensor{"price_norm", {2}, {ck.price_norm.min, ck.price_norm.max}});
  if (ck.params.has_interaction_emb) {
    NamedTensor ids{"interaction_emb.ids", {static_cast<std::uint32_t>(ck.interaction_ids.size())}, {}};
    for (ItemId id : ck.interaction_ids) ids.data.push_back(static_cast<double>(id));
    tensors.push_back(std::move(ids));
  }
  for (const auto& [name, m] : tensor_refs(ck.params)) tensors.push_back(detail::matrix_tensor(name, *m));

  bin::Writer w;
  w.put_bytes(kCheckpointMagic);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put_bytes(std::string_view(reinterpret_cast<const char*>(ck.config_hash.data()), ck.config_hash.size()));
  w.put<std::uint64_t>(ck.seed);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(ck.stage));
  w.put<std::uint64_t>(tensors.size());
  for (const auto& t : tensors) {
    if (t.name.size() > 0xFFFF) throw ValidationError("checkpoint: tensor name too long");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
    w.put_bytes(t.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) w.put<std::uint32_t>(d);
    for (double v : t.data) w.put_f64(v);
  }
  return w.bytes();
}

inline Checkpoint decode_checkpoint(std::vector<std::uint8_t> bytes, const std::string& what) {
  if (bytes.size() < 4 || std::string_view(reinterpret_cast<const char*>(bytes.data()), 4) != kCheckpointMagic)
    throw FormatError(what + ": bad magic, expected ANTC");
  bin::Reader r(std::move(bytes), what);
  r.get_bytes(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw FormatError(what + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  const auto hash = r.get_bytes(32);
  std::copy(hash.begin(), hash.end(), ck.config_hash.begin());
  ck.seed = r.get<std::uint64_t>();
  const auto stage = r.get<std::uint8_t>();
  if (stage > 2) throw FormatError(what + ": unknown stage " + std::to_string(stage));
  ck.stage = static_cast<Stage>(stage);

  const auto count = r.get<std::uint64_t>();
  if (count > r.remaining() / 3) throw CorruptionError(what + ": truncated payload (tensor count " + std::to_string(count) + ")");
  std::map<std::string, NamedTensor> byname;
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto len = r.get<std::uint16_t>();
    const auto name = r.get_bytes(len);
    t.name.assign(name.begin(), name.end());
    const auto rank = r.get<std::uint8_t>();
    for (std::uint8_t k = 0; k < rank; ++k) t.dims.push_back(r.get<std::uint32_t>());
    const std::size_t n = detail::element_count(t.dims);
    if (n > r.remaining() / 8) throw CorruptionError(what + ": truncated payload in tensor " + t.name);
    t.data.resize(n);
    for (auto& v : t.data) v = r.get_f64();
    if (!byname.emplace(t.name, t).second) throw CorruptionError(what + ": duplicate tensor " + t.name);
  }
  if (r.remaining() != 0) throw CorruptionError(what + ": trailing bytes after last tensor");

  auto take = [&](const std::string& name) -> NamedTensor {
    auto it = byname.find(name);
    if (it == byname.end()) throw CorruptionError(what + ": missing tensor " + name);
    NamedTensor t = std::move(it->second);
    byname.erase(it);
    return t;
  };
  auto num = [&](const std::string& name) {
    const auto t = take(name);
    if (!t.dims.empty()) throw CorruptionError(what + ": " + name + " must be a scalar");
    return t.data[0];
  };
  auto count_of = [&](const std::string& name) {
    const double v = num(name);
    if (!(v >= 0 && v < 1e9) || v != std::floor(v)) throw CorruptionError(what + ": " + name + " is not a count");
    return static_cast<std::size_t>(v);
  };

  ModelConfig& c = ck.config;
  c.irl.d = count_of("config.irl.d");
  c.irl.n_h = count_of("config.irl.n_h");
  c.irl.d_p = count_of("config.irl.d_p");
  c.irl.omega = num("config.irl.omega");
  c.irl.beta = num("config.irl.beta");
  c.irl.price_norm_max = num("config.irl.price_norm_max");
  c.irl.zero_text = num("config.irl.zero_text") != 0;
  c.irl.zero_image = num("config.irl.zero_image") != 0;
  c.irl.zero_price = num("config.irl.zero_price") != 0;
  c.irl.zero_fusion = num("config.irl.zero_fusion") != 0;
  c.irl.linear_routing = num("config.irl.linear_routing") != 0;
  c.intent.d = c.irl.d;
  c.intent.n_layers = count_of("config.intent.n_layers");
  c.intent.n_heads = count_of("config.intent.n_heads");
  c.intent.max_seq_len = count_of("config.intent.max_seq_len");
  c.intent.dropout = num("config.intent.dropout");
  c.intent.pre_norm = num("config.intent.pre_norm") != 0;
  c.intent.ln_eps = num("config.intent.ln_eps");
  c.d_text = static_cast<std::uint32_t>(count_of("config.d_text"));
  c.d_image = static_cast<std::uint32_t>(count_of("config.d_image"));
  c.interaction_emb = num("config.interaction_emb") != 0;
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw CorruptionError(what + ": stored configuration is invalid: " + e.what());
  }

  const auto norm = take("price_norm");
  if (norm.dims != std::vector<std::uint32_t>{2}) throw CorruptionError(what + ": price_norm must hold 2 values");
  ck.price_norm = PriceNorm{norm.data[0], norm.data[1]};

  if (c.interaction_emb) {
    const auto ids = take("interaction_emb.ids");
    if (ids.dims.size() != 1) throw CorruptionError(what + ": interaction_emb.ids must be rank 1");
    for (double v : ids.data) ck.interaction_ids.push_back(static_cast<ItemId>(v));
  }

  // Shapes follow from the configuration; only the values come from the file.
  ck.params = init_model<double>(c, ck.interaction_ids.size(), 0);
  for (auto& [name, m] : tensor_refs(ck.params)) {
    const auto t = take(name);
    if (t.dims != std::vector<std::uint32_t>{static_cast<std::uint32_t>(m->rows()), static_cast<std::uint32_t>(m->cols())})
      throw CorruptionError(what + ": tensor " + name + " has the wrong shape");
    for (Eigen::Index i = 0; i < m->rows(); ++i)
      for (Eigen::Index j = 0; j < m->cols(); ++j) (*m)(i, j) = t.data[static_cast<std::size_t>(i * m->cols() + j)];
  }
  if (!byname.empty()) throw CorruptionError(what + ": unexpected tensor " + byname.begin()->first);
  return ck;
}

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  bin::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(bin::read_file(path), path.string());
}

}  // namespace antrec
