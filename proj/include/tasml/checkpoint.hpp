#pragma once

// Binary checkpoint of a meta-trained system: theta0, the scoring model
// (signatures, factor of K + lambda I, kernel settings, projection) and the
// driver settings, plus the caller's canonical config JSON.
//
// Layout (little endian):
//   magic "TASMLCK1" | string version | string config_json |
//   string kernel_family | u32 feature_map | u64 projection_seed |
//   u64 seed | u32 optimizer | u32 array_count |
//   array_count x (string name | u64 rows | u64 cols | rows*cols f64)
// Strings are a u64 length followed by raw bytes.

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <string>

#include "tasml/binary_io.hpp"
#include "tasml/driver.hpp"
#include "tasml/errors.hpp"

namespace tasml {

inline constexpr std::array<char, 8> kCheckpointMagic{'T', 'A', 'S', 'M', 'L', 'C', 'K', '1'};
inline constexpr const char* kCheckpointVersion = "tasml-checkpoint/1";

struct Checkpoint {
  std::string version;
  std::string config_json;
  TrainedSystem system; // train is empty until restore()
};

namespace detail {

inline void put_array(std::ostream& os, const std::string& name, const Eigen::Ref<const Matrix>& m) {
  io::put_string(os, name);
  io::put_u64(os, static_cast<std::uint64_t>(m.rows()));
  io::put_u64(os, static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) io::put_f64(os, m(i, j));
}

inline Matrix row_vector(const Vector& v) { return Eigen::Map<const Matrix>(v.data(), 1, v.size()); }

} // namespace detail

inline void save_checkpoint(const std::string& path, const TrainedSystem& sys, const std::string& config_json) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open checkpoint for writing: " + path);
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  io::put_string(os, kCheckpointVersion);
  io::put_string(os, config_json);
  const auto& k = sys.scoring.kernel;
  io::put_string(os, to_string(k.family));
  io::put_u32(os, static_cast<std::uint32_t>(k.feature_map));
  io::put_u64(os, k.projection_seed);
  io::put_u64(os, sys.config.seed);
  io::put_u32(os, static_cast<std::uint32_t>(sys.config.optimizer));

  const auto n = static_cast<Eigen::Index>(sys.scoring.size());
  const Eigen::Index dsig = n > 0 ? sys.scoring.signatures.front().mean_embedding.size() : 0;
  Matrix sigs(n, dsig);
  Matrix counts(1, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    sigs.row(i) = sys.scoring.signatures[static_cast<std::size_t>(i)].mean_embedding.transpose();
    counts(0, i) = static_cast<double>(sys.scoring.signatures[static_cast<std::size_t>(i)].n_points);
  }
  Matrix scoring_scalars(1, 5);
  scoring_scalars << sys.scoring.lambda, sys.scoring.chol.jitter, k.sigma, k.c, static_cast<double>(k.projection_dim);
  const auto& c = sys.config;
  Matrix driver_scalars(1, 7);
  driver_scalars << c.lambda_theta, c.l2_theta, c.learning_rate, c.init_learning_rate, static_cast<double>(c.init_steps),
      static_cast<double>(c.meta_batch), c.random_init ? 1.0 : 0.0;
  Matrix input_dim(1, 1);
  input_dim(0, 0) = static_cast<double>(sys.scoring.feature_map.input_dim());

  io::put_u32(os, 9);
  detail::put_array(os, "theta0", detail::row_vector(sys.theta0.flat()));
  detail::put_array(os, "signatures", sigs);
  detail::put_array(os, "counts", counts);
  detail::put_array(os, "cholesky", sys.scoring.chol.lower);
  detail::put_array(os, "scoring_scalars", scoring_scalars);
  detail::put_array(os, "driver_scalars", driver_scalars);
  detail::put_array(os, "input_dim", input_dim);
  detail::put_array(os, "projection", sys.scoring.feature_map.projection());
  detail::put_array(os, "init_loss_history",
                    Eigen::Map<const Matrix>(sys.init_loss_history.data(), 1,
                                             static_cast<Eigen::Index>(sys.init_loss_history.size())));
  if (!os) throw Error("failed writing checkpoint: " + path);
}

/// Reads a checkpoint. The training set is not stored; call restore() to
/// attach it.
inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FileMalformed("cannot open checkpoint: " + path);
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kCheckpointMagic)
    throw FileMalformed("not a checkpoint file (bad magic): " + path);
  Checkpoint ck;
  ck.version = io::get_string(is, "version");
  if (ck.version != kCheckpointVersion) throw FileMalformed("unsupported checkpoint version '" + ck.version + "'");
  ck.config_json = io::get_string(is, "config");

  auto& sys = ck.system;
  KernelConfig kernel;
  kernel.family = parse_kernel_family(io::get_string(is, "kernel family"));
  std::uint32_t fm = 0, opt = 0, count = 0;
  if (!io::get_le(is, fm) || fm > 1) throw FileMalformed("checkpoint: bad feature map kind");
  kernel.feature_map = static_cast<FeatureMapKind>(fm);
  if (!io::get_le(is, kernel.projection_seed) || !io::get_le(is, sys.config.seed) || !io::get_le(is, opt) || opt > 1)
    throw FileMalformed("checkpoint: truncated header");
  sys.config.optimizer = static_cast<OptimizerMode>(opt);
  if (!io::get_le(is, count)) throw FileMalformed("checkpoint: truncated header");

  std::map<std::string, Matrix> arrays;
  for (std::uint32_t a = 0; a < count; ++a) {
    std::string name = io::get_string(is, "array name", 256);
    std::uint64_t rows = 0, cols = 0;
    if (!io::get_le(is, rows) || !io::get_le(is, cols) || rows > (1u << 24) || cols > (1u << 24))
      throw FileMalformed("checkpoint: bad shape for array '" + name + "'");
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        if (!io::get_f64(is, m(i, j))) throw FileMalformed("checkpoint: truncated array '" + name + "'");
    arrays[name] = std::move(m);
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FileMalformed("checkpoint: trailing bytes");

  auto need = [&](const char* name, Eigen::Index rows, Eigen::Index cols) -> const Matrix& {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw FileMalformed(std::string("checkpoint: missing array '") + name + "'");
    if ((rows >= 0 && it->second.rows() != rows) || (cols >= 0 && it->second.cols() != cols))
      throw FileMalformed(std::string("checkpoint: array '") + name + "' has the wrong shape");
    return it->second;
  };

  const auto& ss = need("scoring_scalars", 1, 5);
  sys.scoring.lambda = ss(0, 0);
  sys.scoring.chol.jitter = ss(0, 1);
  kernel.sigma = ss(0, 2);
  kernel.c = ss(0, 3);
  kernel.projection_dim = static_cast<int>(ss(0, 4));
  sys.scoring.kernel = kernel;

  const auto& ds = need("driver_scalars", 1, 7);
  sys.config.kernel = kernel;
  sys.config.lambda = sys.scoring.lambda;
  sys.config.lambda_theta = ds(0, 0);
  sys.config.l2_theta = ds(0, 1);
  sys.config.learning_rate = ds(0, 2);
  sys.config.init_learning_rate = ds(0, 3);
  sys.config.init_steps = static_cast<int>(ds(0, 4));
  sys.config.meta_batch = static_cast<std::size_t>(ds(0, 5));
  sys.config.random_init = ds(0, 6) != 0.0;

  const auto input_dim = static_cast<Eigen::Index>(need("input_dim", 1, 1)(0, 0));
  sys.scoring.feature_map = FeatureMap(kernel, input_dim);
  if (sys.scoring.feature_map.projection() != need("projection", -1, -1))
    throw FileMalformed("checkpoint: stored projection differs from the seeded one");

  const auto& th = need("theta0", 1, -1);
  const Eigen::Index flat = th.cols();
  Eigen::Index p = 0;
  while (2 * p * p + 2 * p < flat) ++p;
  sys.theta0 = MetaParams::from_flat(Eigen::Map<const Vector>(th.data(), flat), p);

  const auto& sigs = need("signatures", -1, -1);
  const auto n = sigs.rows();
  const auto& counts = need("counts", 1, n);
  sys.scoring.signatures.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    auto& s = sys.scoring.signatures[static_cast<std::size_t>(i)];
    s.mean_embedding = sigs.row(i).transpose();
    s.n_points = static_cast<std::size_t>(counts(0, i));
  }
  sys.scoring.chol.lower = need("cholesky", n, n);
  const auto& hist = need("init_loss_history", 1, -1);
  sys.init_loss_history.assign(hist.data(), hist.data() + hist.size());
  return ck;
}

/// Attaches the regenerated training set, checking that its support
/// signatures reproduce the stored ones exactly.
inline TrainedSystem restore(Checkpoint ck, std::shared_ptr<const MetaSet> train) {
  if (!train || train->size() != ck.system.scoring.size())
    throw FileMalformed("checkpoint was written for " + std::to_string(ck.system.scoring.size()) +
                        " training tasks, got " + std::to_string(train ? train->size() : 0));
  for (std::size_t i = 0; i < train->size(); ++i) {
    const Signature s = signature(train->tasks[i].support, ck.system.scoring.feature_map);
    const auto& stored = ck.system.scoring.signatures[i];
    if (s.n_points != stored.n_points || s.mean_embedding != stored.mean_embedding)
      throw FileMalformed("checkpoint does not match the training set at task " + std::to_string(i));
  }
  ck.system.train = std::move(train);
  return std::move(ck.system);
}

} // namespace tasml
