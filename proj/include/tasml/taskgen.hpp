#pragma once

// Episodic C-way-K-shot tasks: a synthetic multimodal generator with known
// mode structure, and ingestion of precomputed embedding files.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "tasml/binary_io.hpp"
#include "tasml/errors.hpp"
#include "tasml/numerics.hpp"
#include "tasml/rng.hpp"

namespace tasml {

/// Labeled examples stored row-wise: x is n x d, labels[i] in [0, ways).
struct Dataset {
  Matrix x;
  std::vector<int> labels;

  Eigen::Index size() const { return x.rows(); }
  Eigen::Index dim() const { return x.cols(); }
  bool empty() const { return x.rows() == 0; }
};

struct Task {
  Dataset support;
  Dataset query;
  int ways = 0;
  std::optional<int> mode_id;
};

enum class Split { train = 0, validation = 1, test = 2 };

inline const char* to_string(Split s) {
  switch (s) {
  case Split::train: return "train";
  case Split::validation: return "validation";
  case Split::test: return "test";
  }
  return "?";
}

struct MetaSet {
  std::vector<Task> tasks;
  Split split = Split::train;
  std::set<std::uint64_t> class_pool;

  std::size_t size() const { return tasks.size(); }
  bool empty() const { return tasks.empty(); }
};

/// Multimodal synthetic task distribution.
///
/// Every mode m owns a block of `signal_dims` coordinates in which its class
/// prototypes live, and treats the next mode's signal block as a nuisance
/// block with within-class spread `nuisance_spread`. A single shared
/// representation must keep every block, so it carries the nuisance noise of
/// the other modes; a mode-specific one can suppress it. Each mode also has
/// an offset of norm `mode_offset` in the remaining coordinates, which makes
/// modes identifiable from dataset signatures. Labels of the C prototype
/// slots are permuted per mode.
struct GeneratorConfig {
  int n_modes = 2;
  int dim = 64;
  int ways = 5;
  int shots = 5;
  int query_per_class = 15;
  double cluster_spread = 0.025;
  // mode_permutations[m][slot] = label; empty selects the defaults
  // (identity, reverse, then cyclic shifts).
  std::vector<std::vector<int>> mode_permutations;
  std::uint64_t seed = 0;

  int signal_dims = 4;
  // Leading coordinates of the next mode's signal block that act as
  // nuisance; 0 means the whole block.
  int nuisance_dims = 0;
  double nuisance_spread = 0.15;
  double mode_offset = 0.1;
  double prototype_scale = 0.05;
  double class_jitter = 0.015;
  int classes_per_slot = 50;
};

inline std::vector<int> default_permutation(int mode, int ways) {
  std::vector<int> p(static_cast<std::size_t>(ways));
  std::iota(p.begin(), p.end(), 0);
  if (mode == 1) std::reverse(p.begin(), p.end());
  else if (mode > 1) std::rotate(p.begin(), p.begin() + (mode % ways), p.end());
  return p;
}

inline void validate(const GeneratorConfig& cfg) {
  if (cfg.n_modes < 1) throw ConfigInvalid("n_modes", "must be >= 1");
  if (cfg.ways < 2) throw ConfigInvalid("ways", "must be >= 2");
  if (cfg.shots < 1) throw ConfigInvalid("shots", "must be >= 1");
  if (cfg.query_per_class < 1) throw ConfigInvalid("query_per_class", "must be >= 1");
  if (cfg.dim < 1) throw ConfigInvalid("dim", "must be >= 1");
  if (cfg.signal_dims < 1) throw ConfigInvalid("signal_dims", "must be >= 1");
  if (cfg.nuisance_dims < 0 || cfg.nuisance_dims > cfg.signal_dims)
    throw ConfigInvalid("nuisance_dims", "must be in [0, signal_dims]");
  if (cfg.n_modes * cfg.signal_dims > cfg.dim)
    throw ConfigInvalid("signal_dims", "n_modes * signal_dims exceeds dim");
  if (!(cfg.cluster_spread >= 0.0) || !std::isfinite(cfg.cluster_spread))
    throw ConfigInvalid("cluster_spread", "must be finite and >= 0");
  if (!(cfg.nuisance_spread >= 0.0) || !std::isfinite(cfg.nuisance_spread))
    throw ConfigInvalid("nuisance_spread", "must be finite and >= 0");
  if (!(cfg.mode_offset >= 0.0) || !std::isfinite(cfg.mode_offset))
    throw ConfigInvalid("mode_offset", "must be finite and >= 0");
  if (!(cfg.prototype_scale >= 0.0) || !(cfg.class_jitter >= 0.0))
    throw ConfigInvalid("prototype_scale", "prototype_scale and class_jitter must be >= 0");
  if (cfg.classes_per_slot < 1) throw ConfigInvalid("classes_per_slot", "must be >= 1");
  if (!cfg.mode_permutations.empty()) {
    if (static_cast<int>(cfg.mode_permutations.size()) != cfg.n_modes)
      throw ConfigInvalid("mode_permutations", "need exactly one permutation per mode");
    for (const auto& p : cfg.mode_permutations) {
      std::vector<int> sorted = p;
      std::sort(sorted.begin(), sorted.end());
      std::vector<int> id(static_cast<std::size_t>(cfg.ways));
      std::iota(id.begin(), id.end(), 0);
      if (sorted != id) throw ConfigInvalid("mode_permutations", "each entry must be a permutation of 0..ways-1");
    }
  }
}

/// Fixed geometry of the generator, shared by all splits.
class MultimodalGeometry {
public:
  explicit MultimodalGeometry(const GeneratorConfig& cfg) : cfg_(cfg) {
    validate(cfg_);
    Rng rng = make_rng(cfg_.seed, {kTagGeometry});
    std::normal_distribution<double> normal(0.0, 1.0);
    const int background_begin = cfg_.n_modes * cfg_.signal_dims;
    const int background = cfg_.dim - background_begin;

    mode_centers_.assign(static_cast<std::size_t>(cfg_.n_modes), Vector::Zero(cfg_.dim));
    for (int m = 0; m < cfg_.n_modes; ++m) {
      Vector dir = Vector::Zero(cfg_.dim);
      if (background > 0)
        for (int j = background_begin; j < cfg_.dim; ++j) dir[j] = normal(rng);
      else
        for (int j = 0; j < cfg_.dim; ++j) dir[j] = normal(rng);
      const double n = dir.norm();
      if (n > 0.0) mode_centers_[static_cast<std::size_t>(m)] = dir * (cfg_.mode_offset / n);
    }

    prototypes_.resize(static_cast<std::size_t>(cfg_.n_modes));
    for (int m = 0; m < cfg_.n_modes; ++m) {
      auto& protos = prototypes_[static_cast<std::size_t>(m)];
      protos.assign(static_cast<std::size_t>(cfg_.ways), Vector::Zero(cfg_.dim));
      for (int c = 0; c < cfg_.ways; ++c)
        for (int j = signal_begin(m); j < signal_begin(m) + cfg_.signal_dims; ++j)
          protos[static_cast<std::size_t>(c)][j] = cfg_.prototype_scale * normal(rng);
    }

    permutations_ = cfg_.mode_permutations;
    if (permutations_.empty())
      for (int m = 0; m < cfg_.n_modes; ++m) permutations_.push_back(default_permutation(m, cfg_.ways));
  }

  const GeneratorConfig& config() const { return cfg_; }
  int signal_begin(int mode) const { return mode * cfg_.signal_dims; }
  std::optional<int> nuisance_mode(int mode) const {
    if (cfg_.n_modes < 2) return std::nullopt;
    return (mode + 1) % cfg_.n_modes;
  }
  const std::vector<int>& permutation(int mode) const { return permutations_[static_cast<std::size_t>(mode)]; }
  const Vector& mode_center(int mode) const { return mode_centers_[static_cast<std::size_t>(mode)]; }

  std::uint64_t class_id(Split split, int mode, int slot, int member) const {
    const auto s = static_cast<std::uint64_t>(split);
    return ((s * static_cast<std::uint64_t>(cfg_.n_modes) + static_cast<std::uint64_t>(mode)) *
                static_cast<std::uint64_t>(cfg_.ways) +
            static_cast<std::uint64_t>(slot)) *
               static_cast<std::uint64_t>(cfg_.classes_per_slot) +
           static_cast<std::uint64_t>(member);
  }

  std::set<std::uint64_t> class_pool(Split split) const {
    std::set<std::uint64_t> pool;
    for (int m = 0; m < cfg_.n_modes; ++m)
      for (int c = 0; c < cfg_.ways; ++c)
        for (int j = 0; j < cfg_.classes_per_slot; ++j) pool.insert(class_id(split, m, c, j));
    return pool;
  }

  /// Center of one class: mode offset + slot prototype + per-class jitter
  /// inside the mode's signal block.
  Vector class_center(Split split, int mode, int slot, int member) const {
    Rng rng = make_rng(cfg_.seed, {kTagGeometry, 1 + class_id(split, mode, slot, member)});
    std::normal_distribution<double> normal(0.0, cfg_.class_jitter);
    Vector c = mode_center(mode) + prototypes_[static_cast<std::size_t>(mode)][static_cast<std::size_t>(slot)];
    for (int j = signal_begin(mode); j < signal_begin(mode) + cfg_.signal_dims; ++j) c[j] += normal(rng);
    return c;
  }

  /// Adds within-class noise to a center.
  void sample_around(const Vector& center, int mode, Rng& rng, Vector& out) const {
    std::normal_distribution<double> noise(0.0, 1.0);
    const auto nuisance = nuisance_mode(mode);
    const int nb = nuisance ? signal_begin(*nuisance) : -1;
    const int nd = cfg_.nuisance_dims > 0 ? cfg_.nuisance_dims : cfg_.signal_dims;
    for (int j = 0; j < cfg_.dim; ++j) {
      const bool in_nuisance = nuisance && j >= nb && j < nb + nd;
      out[j] = center[j] + (in_nuisance ? cfg_.nuisance_spread : cfg_.cluster_spread) * noise(rng);
    }
  }

private:
  GeneratorConfig cfg_;
  std::vector<Vector> mode_centers_;
  std::vector<std::vector<Vector>> prototypes_;
  std::vector<std::vector<int>> permutations_;
};

namespace detail {

inline Task draw_multimodal_task(const MultimodalGeometry& geo, Split split, Rng& rng) {
  const auto& cfg = geo.config();
  std::uniform_int_distribution<int> pick_mode(0, cfg.n_modes - 1);
  std::uniform_int_distribution<int> pick_member(0, cfg.classes_per_slot - 1);
  const int mode = pick_mode(rng);

  Task task;
  task.ways = cfg.ways;
  task.mode_id = mode;
  task.support.x.resize(cfg.ways * cfg.shots, cfg.dim);
  task.query.x.resize(cfg.ways * cfg.query_per_class, cfg.dim);
  Eigen::Index s_row = 0;
  Eigen::Index q_row = 0;
  Vector row(cfg.dim);
  for (int slot = 0; slot < cfg.ways; ++slot) {
    const int label = geo.permutation(mode)[static_cast<std::size_t>(slot)];
    const Vector center = geo.class_center(split, mode, slot, pick_member(rng));
    for (int k = 0; k < cfg.shots; ++k, ++s_row) {
      geo.sample_around(center, mode, rng, row);
      task.support.x.row(s_row) = row.transpose();
      task.support.labels.push_back(label);
    }
    for (int k = 0; k < cfg.query_per_class; ++k, ++q_row) {
      geo.sample_around(center, mode, rng, row);
      task.query.x.row(q_row) = row.transpose();
      task.query.labels.push_back(label);
    }
  }
  return task;
}

} // namespace detail

/// Draws n_tasks tasks for one split. Deterministic in (cfg, split, n_tasks).
inline MetaSet sample_multimodal_tasks(const GeneratorConfig& cfg, std::size_t n_tasks, Split split) {
  const MultimodalGeometry geo(cfg);
  MetaSet set;
  set.split = split;
  set.class_pool = geo.class_pool(split);
  set.tasks.reserve(n_tasks);
  Rng rng = make_rng(cfg.seed, {kTagTaskgen, static_cast<std::uint64_t>(split)});
  for (std::size_t i = 0; i < n_tasks; ++i) set.tasks.push_back(detail::draw_multimodal_task(geo, split, rng));
  return set;
}

// ---------------------------------------------------------------------------
// Embedding files

inline constexpr char kEmbeddingMagic[8] = {'T', 'A', 'S', 'K', 'E', 'M', 'B', '1'};

struct EmbeddingClass {
  std::uint32_t class_id = 0;
  Matrix examples; // n_examples x dim
};

struct EmbeddingFile {
  std::uint32_t dim = 0;
  std::vector<EmbeddingClass> classes;
};

namespace detail {

inline bool has_csv_extension(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".csv";
}

inline EmbeddingFile read_embedding_binary(std::istream& is, const std::string& name) {
  char magic[8];
  if (!is.read(magic, 8) || !std::equal(magic, magic + 8, kEmbeddingMagic))
    throw FileMalformed(name + ": missing TASKEMB1 header");
  std::uint32_t class_count = 0;
  EmbeddingFile file;
  if (!io::get_le(is, class_count) || !io::get_le(is, file.dim))
    throw FileMalformed(name + ": truncated header");
  if (file.dim == 0) throw FileMalformed(name + ": dim must be positive");
  for (std::uint32_t c = 0; c < class_count; ++c) {
    EmbeddingClass cls;
    std::uint32_t n = 0;
    if (!io::get_le(is, cls.class_id) || !io::get_le(is, n))
      throw FileMalformed(name + ": class record " + std::to_string(c) + ": truncated record header");
    cls.examples.resize(n, file.dim);
    for (std::uint32_t i = 0; i < n; ++i)
      for (std::uint32_t j = 0; j < file.dim; ++j) {
        float v = 0.0f;
        if (!io::get_f32(is, v))
          throw FileMalformed(name + ": class record " + std::to_string(c) + ": truncated at example " +
                              std::to_string(i));
        if (!std::isfinite(v))
          throw FileMalformed(name + ": class record " + std::to_string(c) + ": non-finite value at example " +
                              std::to_string(i));
        cls.examples(i, j) = static_cast<double>(v);
      }
    file.classes.push_back(std::move(cls));
  }
  if (is.peek() != std::char_traits<char>::eof())
    throw FileMalformed(name + ": trailing bytes after " + std::to_string(class_count) + " class records");
  return file;
}

inline EmbeddingFile read_embedding_csv(std::istream& is, const std::string& name) {
  std::vector<std::uint32_t> order;
  std::vector<std::vector<std::vector<double>>> rows_by_class;
  std::map<std::uint32_t, std::size_t> index;
  std::size_t dim = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    std::uint64_t cid = 0;
    std::size_t used = 0;
    bool numeric_id = true;
    try {
      cid = std::stoull(fields.at(0), &used);
      numeric_id = used == fields[0].size();
    } catch (const std::exception&) {
      numeric_id = false;
    }
    if (!numeric_id) {
      if (line_no == 1) continue; // header row
      throw FileMalformed(name + ": line " + std::to_string(line_no) + ": class_id is not an integer");
    }
    if (cid > 0xffffffffull) throw FileMalformed(name + ": line " + std::to_string(line_no) + ": class_id too large");
    if (fields.size() < 2) throw FileMalformed(name + ": line " + std::to_string(line_no) + ": no feature values");
    if (dim == 0) dim = fields.size() - 1;
    if (fields.size() - 1 != dim)
      throw FileMalformed(name + ": line " + std::to_string(line_no) + ": expected " + std::to_string(dim) +
                          " values, found " + std::to_string(fields.size() - 1));
    std::vector<double> v(dim);
    for (std::size_t j = 0; j < dim; ++j) {
      try {
        v[j] = std::stod(fields[j + 1], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || !std::isfinite(v[j]))
        throw FileMalformed(name + ": line " + std::to_string(line_no) + ": bad value in column " +
                            std::to_string(j + 1));
    }
    const auto id = static_cast<std::uint32_t>(cid);
    auto [it, inserted] = index.emplace(id, order.size());
    if (inserted) {
      order.push_back(id);
      rows_by_class.emplace_back();
    }
    rows_by_class[it->second].push_back(std::move(v));
  }
  if (dim == 0) throw FileMalformed(name + ": no data rows");
  EmbeddingFile file;
  file.dim = static_cast<std::uint32_t>(dim);
  for (std::size_t c = 0; c < order.size(); ++c) {
    EmbeddingClass cls;
    cls.class_id = order[c];
    cls.examples.resize(static_cast<Eigen::Index>(rows_by_class[c].size()), static_cast<Eigen::Index>(dim));
    for (std::size_t i = 0; i < rows_by_class[c].size(); ++i)
      for (std::size_t j = 0; j < dim; ++j) cls.examples(i, j) = rows_by_class[c][i][j];
    file.classes.push_back(std::move(cls));
  }
  return file;
}

} // namespace detail

inline EmbeddingFile read_embedding_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FileMalformed(path.string() + ": cannot open");
  return detail::has_csv_extension(path) ? detail::read_embedding_csv(is, path.string())
                                         : detail::read_embedding_binary(is, path.string());
}

inline void write_embedding_file(const std::filesystem::path& path, const EmbeddingFile& file) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(path.string() + ": cannot open for writing");
  if (detail::has_csv_extension(path)) {
    os.precision(9);
    for (const auto& cls : file.classes)
      for (Eigen::Index i = 0; i < cls.examples.rows(); ++i) {
        os << cls.class_id;
        for (Eigen::Index j = 0; j < cls.examples.cols(); ++j) os << ',' << static_cast<float>(cls.examples(i, j));
        os << '\n';
      }
  } else {
    os.write(kEmbeddingMagic, 8);
    io::put_u32(os, static_cast<std::uint32_t>(file.classes.size()));
    io::put_u32(os, file.dim);
    for (const auto& cls : file.classes) {
      io::put_u32(os, cls.class_id);
      io::put_u32(os, static_cast<std::uint32_t>(cls.examples.rows()));
      for (Eigen::Index i = 0; i < cls.examples.rows(); ++i)
        for (Eigen::Index j = 0; j < cls.examples.cols(); ++j) io::put_f32(os, static_cast<float>(cls.examples(i, j)));
    }
  }
  if (!os) throw Error(path.string() + ": write failed");
}

/// Samples `examples_per_class` points for every class of one split's pool,
/// in class-id order. Used to export the generator as an embedding file.
inline EmbeddingFile synthesize_embedding_file(const GeneratorConfig& cfg, Split split, int examples_per_class) {
  if (examples_per_class < 1) throw ConfigInvalid("examples_per_class", "must be >= 1");
  const MultimodalGeometry geo(cfg);
  Rng rng = make_rng(cfg.seed, {kTagTaskgen, 100 + static_cast<std::uint64_t>(split)});
  EmbeddingFile file;
  file.dim = static_cast<std::uint32_t>(cfg.dim);
  Vector row(cfg.dim);
  for (int m = 0; m < cfg.n_modes; ++m)
    for (int c = 0; c < cfg.ways; ++c)
      for (int j = 0; j < cfg.classes_per_slot; ++j) {
        EmbeddingClass cls;
        cls.class_id = static_cast<std::uint32_t>(geo.class_id(split, m, c, j));
        cls.examples.resize(examples_per_class, cfg.dim);
        const Vector center = geo.class_center(split, m, c, j);
        for (int i = 0; i < examples_per_class; ++i) {
          geo.sample_around(center, m, rng, row);
          cls.examples.row(i) = row.transpose();
        }
        file.classes.push_back(std::move(cls));
      }
  return file;
}

struct EpisodeSpec {
  int ways = 5;
  int shots = 1;
  int query_per_class = 15;
  std::size_t n_tasks = 1;
  std::uint64_t seed = 0;
};

/// Builds episodes from an in-memory embedding file. Classes and examples are
/// drawn without replacement within a task and with replacement across tasks.
inline MetaSet episodes_from_embeddings(const EmbeddingFile& file, const EpisodeSpec& spec, Split split) {
  if (spec.ways < 2) throw ConfigInvalid("ways", "must be >= 2");
  if (spec.shots < 1) throw ConfigInvalid("shots", "must be >= 1");
  if (spec.query_per_class < 1) throw ConfigInvalid("query_per_class", "must be >= 1");
  if (file.classes.size() < static_cast<std::size_t>(spec.ways))
    throw InsufficientClasses("embedding file has " + std::to_string(file.classes.size()) + " classes, episodes need " +
                              std::to_string(spec.ways));
  const auto need = static_cast<Eigen::Index>(spec.shots + spec.query_per_class);
  std::vector<std::size_t> eligible;
  for (std::size_t c = 0; c < file.classes.size(); ++c)
    if (file.classes[c].examples.rows() >= need) eligible.push_back(c);
  if (eligible.size() < static_cast<std::size_t>(spec.ways))
    throw InsufficientExamplesPerClass("only " + std::to_string(eligible.size()) + " classes have at least " +
                                       std::to_string(need) + " examples; episodes need " + std::to_string(spec.ways));

  MetaSet set;
  set.split = split;
  for (const auto& cls : file.classes) set.class_pool.insert(cls.class_id);
  Rng rng = make_rng(spec.seed, {kTagEpisodes, static_cast<std::uint64_t>(split)});
  const auto d = static_cast<Eigen::Index>(file.dim);
  for (std::size_t t = 0; t < spec.n_tasks; ++t) {
    std::vector<std::size_t> classes = eligible;
    std::shuffle(classes.begin(), classes.end(), rng);
    classes.resize(static_cast<std::size_t>(spec.ways));
    Task task;
    task.ways = spec.ways;
    task.support.x.resize(spec.ways * spec.shots, d);
    task.query.x.resize(spec.ways * spec.query_per_class, d);
    Eigen::Index s_row = 0;
    Eigen::Index q_row = 0;
    for (int label = 0; label < spec.ways; ++label) {
      const Matrix& pool = file.classes[classes[static_cast<std::size_t>(label)]].examples;
      std::vector<Eigen::Index> idx(static_cast<std::size_t>(pool.rows()));
      std::iota(idx.begin(), idx.end(), Eigen::Index{0});
      std::shuffle(idx.begin(), idx.end(), rng);
      for (int k = 0; k < spec.shots; ++k, ++s_row) {
        task.support.x.row(s_row) = pool.row(idx[static_cast<std::size_t>(k)]);
        task.support.labels.push_back(label);
      }
      for (int k = 0; k < spec.query_per_class; ++k, ++q_row) {
        task.query.x.row(q_row) = pool.row(idx[static_cast<std::size_t>(spec.shots + k)]);
        task.query.labels.push_back(label);
      }
    }
    set.tasks.push_back(std::move(task));
  }
  return set;
}

inline MetaSet load_embedding_metaset(const std::filesystem::path& path, const EpisodeSpec& spec,
                                      Split split = Split::test) {
  return episodes_from_embeddings(read_embedding_file(path), spec, split);
}

} // namespace tasml
