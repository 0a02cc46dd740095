#pragma once

// Task datasets on disk: item tables, modality embedding files, interaction
// logs, leave-one-out splitting and the synthetic multi-task generator.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "antrec/binary_io.hpp"
#include "antrec/error.hpp"

namespace antrec {

namespace fs = std::filesystem;

using ItemId = std::uint64_t;

struct ItemRecord {
  ItemId item_id = 0;
  std::vector<float> text_emb;
  std::vector<float> image_emb;
  double price = 0.0;
};

enum class TaskRole { auxiliary, target };

inline std::string to_string(TaskRole r) { return r == TaskRole::target ? "target" : "auxiliary"; }

inline TaskRole parse_role(const std::string& s) {
  if (s == "target") return TaskRole::target;
  if (s == "auxiliary") return TaskRole::auxiliary;
  throw FormatError("unknown task role '" + s + "'");
}

struct UserSequence {
  std::string user_id;
  std::vector<ItemId> items;  // time-ordered, oldest first
};

struct TaskDataset {
  std::string task_id;
  TaskRole role = TaskRole::auxiliary;
  std::uint32_t d_text = 0;
  std::uint32_t d_image = 0;
  std::map<ItemId, ItemRecord> items;
  std::vector<UserSequence> sequences;
};

struct UserSplit {
  std::string user_id;
  std::vector<ItemId> train;
  ItemId validation = 0;
  ItemId test = 0;
};

struct SplitDataset {
  std::string task_id;
  std::vector<UserSplit> users;
};

// ---------------------------------------------------------------------------
// Embedding files: "ANTE", u32 version, u64 n_items, u32 dim, then
// n_items x (u64 item_id, dim x f32), little-endian, sorted by item_id.

inline constexpr std::string_view kEmbeddingMagic = "ANTE";
inline constexpr std::uint32_t kEmbeddingVersion = 1;

struct EmbeddingTable {
  std::uint32_t dim = 0;
  std::map<ItemId, std::vector<float>> rows;

  bool operator==(const EmbeddingTable&) const = default;
};

inline std::vector<std::uint8_t> encode_embedding_table(const EmbeddingTable& table) {
  bin::Writer w;
  w.put_bytes(kEmbeddingMagic);
  w.put<std::uint32_t>(kEmbeddingVersion);
  w.put<std::uint64_t>(table.rows.size());
  w.put<std::uint32_t>(table.dim);
  for (const auto& [id, v] : table.rows) {
    if (v.size() != table.dim)
      throw ValidationError("embedding for item " + std::to_string(id) + " has length " + std::to_string(v.size()) +
                            ", expected " + std::to_string(table.dim));
    w.put<std::uint64_t>(id);
    for (float x : v) w.put_f32(x);
  }
  return w.bytes();
}

inline EmbeddingTable decode_embedding_table(std::vector<std::uint8_t> bytes, const std::string& what) {
  if (bytes.size() < 4 || std::string_view(reinterpret_cast<const char*>(bytes.data()), 4) != kEmbeddingMagic)
    throw FormatError(what + ": bad magic, expected ANTE");
  bin::Reader r(std::move(bytes), what);
  r.get_bytes(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kEmbeddingVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  const auto n = r.get<std::uint64_t>();
  EmbeddingTable table;
  table.dim = r.get<std::uint32_t>();
  const std::uint64_t record = 8ull + 4ull * table.dim;
  if (n > r.remaining() / record)
    throw CorruptionError(what + ": truncated payload (header claims " + std::to_string(n) + " items)");
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto id = r.get<std::uint64_t>();
    std::vector<float> v(table.dim);
    for (auto& x : v) x = r.get_f32();
    if (!table.rows.emplace(id, std::move(v)).second)
      throw ValidationError(what + ": duplicate item_id " + std::to_string(id));
  }
  if (r.remaining() != 0) throw CorruptionError(what + ": trailing bytes after last record");
  return table;
}

inline void write_embedding_file(const fs::path& path, std::uint32_t dim, const std::map<ItemId, std::vector<float>>& rows) {
  bin::write_file(path, encode_embedding_table(EmbeddingTable{dim, rows}));
}

inline EmbeddingTable read_embedding_file(const fs::path& path) {
  return decode_embedding_table(bin::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// TSV helpers

namespace detail {

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

inline std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(std::move(line));
  }
  return out;
}

template <class N>
N parse_number(std::string_view s, const std::string& where) {
  N v{};
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) throw FormatError(where + ": cannot parse '" + std::string(s) + "'");
  return v;
}

inline std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Task directories

struct LoadOptions {
  std::size_t max_seq_len = 50;
  /// Keep only users and items with >= min_interactions (iterated to a fixed point).
  bool raw_mode = false;
  std::size_t min_interactions = 5;
};

namespace detail {

inline void validate_sequences(const TaskDataset& ds) {
  for (const auto& s : ds.sequences) {
    if (s.items.size() < 3)
      throw ValidationError("task " + ds.task_id + ": user " + s.user_id + " has " + std::to_string(s.items.size()) +
                            " interactions, need at least 3");
    for (ItemId id : s.items)
      if (!ds.items.count(id))
        throw ValidationError("task " + ds.task_id + ": user " + s.user_id + " references unknown item " + std::to_string(id));
  }
}

struct Interaction {
  std::string user;
  ItemId item;
  std::int64_t ts;
  std::size_t line;
};

inline void filter_min_interactions(std::vector<Interaction>& rows, std::size_t min_count) {
  while (true) {
    std::map<std::string, std::size_t> per_user;
    std::map<ItemId, std::size_t> per_item;
    for (const auto& r : rows) {
      ++per_user[r.user];
      ++per_item[r.item];
    }
    const auto before = rows.size();
    std::erase_if(rows, [&](const Interaction& r) { return per_user[r.user] < min_count || per_item[r.item] < min_count; });
    if (rows.size() == before) return;
  }
}

}  // namespace detail

inline TaskDataset load_task_dataset(const fs::path& dir, const LoadOptions& opts = {}) {
  for (const char* f : {"items.tsv", "interactions.tsv", "text.emb", "image.emb"})
    if (!fs::exists(dir / f)) throw IoError("task directory " + dir.string() + " is missing " + f);
  if (opts.max_seq_len < 1) throw ConfigError("max_seq_len must be >= 1");

  TaskDataset ds;
  ds.task_id = dir.filename().string();
  if (ds.task_id.empty()) ds.task_id = dir.parent_path().filename().string();
  if (fs::exists(dir / "meta.json")) {
    nlohmann::json meta;
    try {
      meta = nlohmann::json::parse(bin::read_text(dir / "meta.json"));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError((dir / "meta.json").string() + ": " + e.what());
    }
    if (meta.contains("task_id")) ds.task_id = meta.at("task_id").get<std::string>();
    if (meta.contains("role")) ds.role = parse_role(meta.at("role").get<std::string>());
  }

  const auto text = read_embedding_file(dir / "text.emb");
  const auto image = read_embedding_file(dir / "image.emb");
  ds.d_text = text.dim;
  ds.d_image = image.dim;

  const auto item_lines = detail::lines_of(bin::read_text(dir / "items.tsv"));
  const std::string items_where = (dir / "items.tsv").string();
  if (item_lines.empty() || item_lines[0] != "item_id\tprice") throw FormatError(items_where + ": expected header 'item_id\\tprice'");
  for (std::size_t i = 1; i < item_lines.size(); ++i) {
    const auto f = detail::split_tabs(item_lines[i]);
    const std::string where = items_where + ":" + std::to_string(i + 1);
    if (f.size() != 2) throw FormatError(where + ": expected 2 fields");
    ItemRecord rec;
    rec.item_id = detail::parse_number<ItemId>(f[0], where);
    if (f[1].empty()) throw ValidationError(where + ": price missing for item " + std::to_string(rec.item_id));
    rec.price = detail::parse_number<double>(f[1], where);
    if (!std::isfinite(rec.price) || rec.price < 0) throw ValidationError(where + ": price must be finite and >= 0");
    auto t = text.rows.find(rec.item_id);
    auto m = image.rows.find(rec.item_id);
    if (t == text.rows.end()) throw ValidationError(where + ": item " + std::to_string(rec.item_id) + " has no text embedding");
    if (m == image.rows.end()) throw ValidationError(where + ": item " + std::to_string(rec.item_id) + " has no image embedding");
    rec.text_emb = t->second;
    rec.image_emb = m->second;
    if (!ds.items.emplace(rec.item_id, std::move(rec)).second) throw ValidationError(where + ": duplicate item_id");
  }
  for (const auto* table : {&text, &image})
    for (const auto& [id, _] : table->rows)
      if (!ds.items.count(id)) throw ValidationError(dir.string() + ": price missing for item " + std::to_string(id) + " (not in items.tsv)");

  const auto inter_lines = detail::lines_of(bin::read_text(dir / "interactions.tsv"));
  const std::string inter_where = (dir / "interactions.tsv").string();
  if (inter_lines.empty() || inter_lines[0] != "user_id\titem_id\ttimestamp")
    throw FormatError(inter_where + ": expected header 'user_id\\titem_id\\ttimestamp'");
  std::vector<detail::Interaction> rows;
  for (std::size_t i = 1; i < inter_lines.size(); ++i) {
    const auto f = detail::split_tabs(inter_lines[i]);
    const std::string where = inter_where + ":" + std::to_string(i + 1);
    if (f.size() != 3) throw FormatError(where + ": expected 3 fields");
    detail::Interaction r{std::string(f[0]), detail::parse_number<ItemId>(f[1], where),
                          detail::parse_number<std::int64_t>(f[2], where), i};
    if (!ds.items.count(r.item)) throw ValidationError(where + ": item " + std::to_string(r.item) + " absent from items.tsv");
    rows.push_back(std::move(r));
  }
  if (opts.raw_mode) detail::filter_min_interactions(rows, opts.min_interactions);

  std::map<std::string, std::vector<detail::Interaction>> per_user;
  for (auto& r : rows) per_user[r.user].push_back(std::move(r));
  for (auto& [user, evs] : per_user) {
    std::stable_sort(evs.begin(), evs.end(), [](const auto& a, const auto& b) { return a.ts < b.ts; });
    UserSequence s{user, {}};
    const std::size_t start = evs.size() > opts.max_seq_len ? evs.size() - opts.max_seq_len : 0;
    for (std::size_t i = start; i < evs.size(); ++i) s.items.push_back(evs[i].item);
    ds.sequences.push_back(std::move(s));
  }
  detail::validate_sequences(ds);
  return ds;
}

/// Writes a task directory in the canonical layout. Deterministic bytes.
inline void write_task_dataset(const fs::path& dir, const TaskDataset& ds) {
  fs::create_directories(dir);
  std::string items = "item_id\tprice\n";
  std::map<ItemId, std::vector<float>> text, image;
  for (const auto& [id, rec] : ds.items) {
    items += std::to_string(id) + "\t" + detail::format_double(rec.price) + "\n";
    text.emplace(id, rec.text_emb);
    image.emplace(id, rec.image_emb);
  }
  bin::write_text(dir / "items.tsv", items);
  write_embedding_file(dir / "text.emb", ds.d_text, text);
  write_embedding_file(dir / "image.emb", ds.d_image, image);
  std::string inter = "user_id\titem_id\ttimestamp\n";
  for (const auto& s : ds.sequences)
    for (std::size_t t = 0; t < s.items.size(); ++t) inter += s.user_id + "\t" + std::to_string(s.items[t]) + "\t" + std::to_string(t) + "\n";
  bin::write_text(dir / "interactions.tsv", inter);
  nlohmann::ordered_json meta;
  meta["task_id"] = ds.task_id;
  meta["role"] = to_string(ds.role);
  bin::write_text(dir / "meta.json", meta.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Leave-one-out

inline SplitDataset split_leave_one_out(const TaskDataset& ds) {
  SplitDataset out{ds.task_id, {}};
  out.users.reserve(ds.sequences.size());
  for (const auto& s : ds.sequences) {
    if (s.items.size() < 3)
      throw ValidationError("leave-one-out: user " + s.user_id + " has only " + std::to_string(s.items.size()) + " interactions");
    const auto n = s.items.size();
    out.users.push_back(UserSplit{s.user_id, std::vector<ItemId>(s.items.begin(), s.items.end() - 2), s.items[n - 2], s.items[n - 1]});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic suites

struct SynthConfig {
  std::size_t n_tasks = 4;
  std::size_t n_items_per_task = 200;
  std::size_t n_users_per_task = 200;
  std::size_t latent_dim = 8;
  double shared_structure = 0.8;
  std::size_t seq_len_min = 5;
  std::size_t seq_len_max = 20;
  std::uint32_t d_text = 32;
  std::uint32_t d_image = 24;
  double noise_scale = 0.1;
  std::uint64_t seed = 7;
  // Structure knobs beyond the basic mixture.
  std::size_t n_clusters = 20;
  double item_spread = 0.3;
  double follow_prob = 0.8;

  void validate() const {
    if (n_tasks < 1 || n_items_per_task < 1 || n_users_per_task < 1 || latent_dim < 1 || d_text < 1 || d_image < 1 ||
        n_clusters < 1)
      throw ConfigError("synth: all counts must be >= 1");
    if (!(shared_structure >= 0.0 && shared_structure <= 1.0)) throw ConfigError("synth: shared_structure must lie in [0,1]");
    if (seq_len_min < 3 || seq_len_max < seq_len_min) throw ConfigError("synth: seq_len_range must satisfy 3 <= min <= max");
    if (noise_scale < 0 || item_spread < 0) throw ConfigError("synth: noise scales must be >= 0");
    if (!(follow_prob >= 0.0 && follow_prob <= 1.0)) throw ConfigError("synth: follow_prob must lie in [0,1]");
  }
};

namespace detail {

inline Eigen::MatrixXd gaussian_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double sd) {
  std::normal_distribution<double> n(0.0, sd);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = n(rng);
  return m;
}

inline std::vector<std::size_t> permutation(std::mt19937_64& rng, std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

}  // namespace detail

/// Builds the task suite in memory. Tasks 0..n-2 are auxiliary and the last
/// task is the target (a single task is auxiliary).
///
/// Item latents mix a shared cluster centre with a task offset plus a task
/// cluster centre, weighted by shared_structure; modality embeddings are
/// per-task mixing matrices (blended the same way) applied to the latent, and
/// the price is an affine function of latent coordinate 0. Users walk a
/// first-order Markov chain over clusters.
inline std::vector<TaskDataset> generate_synthetic_tasks(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const auto L = static_cast<Eigen::Index>(cfg.latent_dim);
  const auto C = cfg.n_clusters;
  const double s = cfg.shared_structure;
  constexpr double kTaskScale = 3.0;
  constexpr double kTaskSpacing = 4.0;
  constexpr double kPriceBase = 50.0;
  constexpr double kPriceSlope = 10.0;

  const Eigen::MatrixXd shared_centres = detail::gaussian_matrix(rng, static_cast<Eigen::Index>(C), L, 1.0);
  const Eigen::MatrixXd shared_text = detail::gaussian_matrix(rng, cfg.d_text, L, 1.0 / std::sqrt(double(L)));
  const Eigen::MatrixXd shared_image = detail::gaussian_matrix(rng, cfg.d_image, L, 1.0 / std::sqrt(double(L)));
  const auto shared_succ = detail::permutation(rng, C);

  std::vector<TaskDataset> tasks;
  for (std::size_t k = 0; k < cfg.n_tasks; ++k) {
    TaskDataset ds;
    ds.task_id = "task_" + std::to_string(k);
    ds.role = (cfg.n_tasks > 1 && k + 1 == cfg.n_tasks) ? TaskRole::target : TaskRole::auxiliary;
    ds.d_text = cfg.d_text;
    ds.d_image = cfg.d_image;

    Eigen::VectorXd offset = detail::gaussian_matrix(rng, L, 1, kTaskScale);
    offset(0) = kTaskSpacing * (double(k) - double(cfg.n_tasks - 1) / 2.0);
    const Eigen::MatrixXd task_centres = detail::gaussian_matrix(rng, static_cast<Eigen::Index>(C), L, 1.0);
    const Eigen::MatrixXd text_mix =
        s * shared_text + (1 - s) * detail::gaussian_matrix(rng, cfg.d_text, L, 1.0 / std::sqrt(double(L)));
    const Eigen::MatrixXd image_mix =
        s * shared_image + (1 - s) * detail::gaussian_matrix(rng, cfg.d_image, L, 1.0 / std::sqrt(double(L)));
    const auto task_succ = detail::permutation(rng, C);
    std::vector<std::size_t> succ(C);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t c = 0; c < C; ++c) succ[c] = unit(rng) < s ? shared_succ[c] : task_succ[c];

    std::vector<std::vector<ItemId>> by_cluster(C);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> membership(0, C - 1);
    for (std::size_t i = 0; i < cfg.n_items_per_task; ++i) {
      // Independent draws: with identical per-cluster counts in every task a
      // held-out item would leave its own task under-represented nearby.
      const std::size_t c = membership(rng);
      Eigen::VectorXd z = s * shared_centres.row(static_cast<Eigen::Index>(c)).transpose() +
                          (1 - s) * (offset + task_centres.row(static_cast<Eigen::Index>(c)).transpose());
      for (Eigen::Index j = 0; j < L; ++j) z(j) += cfg.item_spread * normal(rng);
      ItemRecord rec;
      rec.item_id = (k + 1) * 1'000'000ull + i;
      const Eigen::VectorXd t = text_mix * z;
      const Eigen::VectorXd m = image_mix * z;
      rec.text_emb.resize(cfg.d_text);
      rec.image_emb.resize(cfg.d_image);
      for (std::uint32_t j = 0; j < cfg.d_text; ++j) rec.text_emb[j] = static_cast<float>(t(j) + cfg.noise_scale * normal(rng));
      for (std::uint32_t j = 0; j < cfg.d_image; ++j) rec.image_emb[j] = static_cast<float>(m(j) + cfg.noise_scale * normal(rng));
      rec.price = std::max(0.0, kPriceBase + kPriceSlope * z(0));
      by_cluster[c].push_back(rec.item_id);
      ds.items.emplace(rec.item_id, std::move(rec));
    }

    std::uniform_int_distribution<std::size_t> len_dist(cfg.seq_len_min, cfg.seq_len_max);
    std::uniform_int_distribution<std::size_t> cluster_dist(0, C - 1);
    for (std::size_t u = 0; u < cfg.n_users_per_task; ++u) {
      UserSequence seq;
      seq.user_id = "t" + std::to_string(k) + "_u" + std::to_string(u);
      const std::size_t len = len_dist(rng);
      std::size_t c = cluster_dist(rng);
      for (std::size_t t = 0; t < len; ++t) {
        while (by_cluster[c].empty()) c = (c + 1) % C;
        std::uniform_int_distribution<std::size_t> pick(0, by_cluster[c].size() - 1);
        seq.items.push_back(by_cluster[c][pick(rng)]);
        c = unit(rng) < cfg.follow_prob ? succ[c] : cluster_dist(rng);
      }
      ds.sequences.push_back(std::move(seq));
    }
    std::sort(ds.sequences.begin(), ds.sequences.end(), [](const auto& a, const auto& b) { return a.user_id < b.user_id; });
    tasks.push_back(std::move(ds));
  }
  return tasks;
}

/// Writes the suite as out_dir/task_<k>/ and returns the task directories.
inline std::vector<fs::path> generate_synthetic_suite(const SynthConfig& cfg, const fs::path& out_dir) {
  std::vector<fs::path> dirs;
  for (const auto& ds : generate_synthetic_tasks(cfg)) {
    dirs.push_back(out_dir / ds.task_id);
    write_task_dataset(dirs.back(), ds);
  }
  return dirs;
}

}  // namespace antrec
