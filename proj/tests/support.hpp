#pragma once

// Shared fixtures and reference implementations for the test suite.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tasml/driver.hpp"
#include "tasml/experiment.hpp"

namespace tasml::testing {

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = normal(rng);
  return m;
}

inline Matrix random_spd(Eigen::Index n, Rng& rng) {
  const Matrix a = random_matrix(n, n, rng);
  Matrix s = a * a.transpose();
  s.diagonal().array() += static_cast<double>(n);
  return s;
}

/// Gaussian elimination with partial pivoting, column by column.
inline Matrix gauss_solve(Matrix a, Matrix b) {
  const Eigen::Index n = a.rows();
  for (Eigen::Index k = 0; k < n; ++k) {
    Eigen::Index piv = k;
    for (Eigen::Index i = k + 1; i < n; ++i)
      if (std::abs(a(i, k)) > std::abs(a(piv, k))) piv = i;
    a.row(k).swap(a.row(piv));
    b.row(k).swap(b.row(piv));
    for (Eigen::Index i = k + 1; i < n; ++i) {
      const double f = a(i, k) / a(k, k);
      a.row(i) -= f * a.row(k);
      b.row(i) -= f * b.row(k);
    }
  }
  Matrix x = Matrix::Zero(n, b.cols());
  for (Eigen::Index i = n - 1; i >= 0; --i) {
    Eigen::RowVectorXd r = b.row(i);
    for (Eigen::Index j = i + 1; j < n; ++j) r -= a(i, j) * x.row(j);
    x.row(i) = r / a(i, i);
  }
  return x;
}

/// Classes around random means; labels are 0..ways-1 in blocks.
inline Dataset random_dataset(int ways, int per_class, Eigen::Index dim, Rng& rng, double spread = 0.5,
                              const Matrix* means = nullptr) {
  Matrix own;
  if (!means) {
    own = random_matrix(ways, dim, rng);
    means = &own;
  }
  std::normal_distribution<double> noise(0.0, spread);
  Dataset d;
  d.x.resize(ways * per_class, dim);
  Eigen::Index r = 0;
  for (int c = 0; c < ways; ++c)
    for (int k = 0; k < per_class; ++k, ++r) {
      for (Eigen::Index j = 0; j < dim; ++j) d.x(r, j) = (*means)(c, j) + noise(rng);
      d.labels.push_back(c);
    }
  return d;
}

inline Task random_task(int ways, int shots, int query, Eigen::Index dim, Rng& rng, double spread = 0.5) {
  const Matrix means = random_matrix(ways, dim, rng);
  Task t;
  t.ways = ways;
  t.support = random_dataset(ways, shots, dim, rng, spread, &means);
  t.query = random_dataset(ways, query, dim, rng, spread, &means);
  return t;
}

/// Parameters with every entry drawn, biases included, so no ReLU sits at a kink.
inline MetaParams random_theta(Eigen::Index p, Rng& rng, double scale = 0.3) {
  MetaParams t = MetaParams::zeros(p);
  t.w1 = random_matrix(p, p, rng, scale);
  t.w2 = random_matrix(p, p, rng, scale);
  std::normal_distribution<double> normal(0.0, scale);
  for (Eigen::Index i = 0; i < p; ++i) {
    t.b1[i] = normal(rng);
    t.b2[i] = normal(rng);
  }
  return t;
}

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream is(path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(is, line)) out.push_back(line);
  return out;
}

inline std::string read_bytes(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) out.push_back(f);
  return out;
}

/// Fresh directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("tasml_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// A few-second experiment: two modes, small p.
inline ExperimentConfig smoke_config(const std::filesystem::path& out) {
  ExperimentConfig c;
  c.experiment = "smoke";
  c.source.generator.n_modes = 2;
  c.source.generator.query_per_class = 10;
  c.kernel.median_bandwidth = true;
  c.lambda_theta = 3.0;
  c.learning_rate = 1e-2;
  c.init_learning_rate = 1e-3;
  c.n_train = 60;
  c.n_test = 4;
  c.top_m = 5;
  c.steps = 5;
  c.long_steps = 10;
  c.p = 12;
  c.init_steps = 20;
  c.seeds = {7, 8};
  c.output_dir = out.string();
  return c;
}

} // namespace tasml::testing
