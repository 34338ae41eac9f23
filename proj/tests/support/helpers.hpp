#pragma once

#include <random>
#include <vector>

#include "fedicl/core.hpp"
#include "oracles.hpp"

namespace testing_support {

inline fedicl::Vector to_eigen(const oracle::Vec& v) {
  fedicl::Vector out(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out[static_cast<Eigen::Index>(i)] = v[i];
  return out;
}

inline oracle::Vec from_eigen(const fedicl::Vector& v) { return {v.data(), v.data() + v.size()}; }

inline oracle::Mat from_eigen(const fedicl::Matrix& m) {
  oracle::Mat out(static_cast<std::size_t>(m.rows()), oracle::Vec(static_cast<std::size_t>(m.cols())));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) out[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] = m(r, c);
  return out;
}

/// A random SPD matrix A A^T / d + 0.5 I.
inline fedicl::Matrix random_spd(Eigen::Index d, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  fedicl::Matrix a(d, d);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = n(rng);
  fedicl::Matrix s = a * a.transpose() / static_cast<double>(d) + 0.5 * fedicl::Matrix::Identity(d, d);
  return 0.5 * (s + s.transpose());
}

inline fedicl::Vector random_vector(Eigen::Index d, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  fedicl::Vector v(d);
  for (Eigen::Index i = 0; i < d; ++i) v[i] = n(rng);
  return v;
}

inline fedicl::ClientDataset random_client(int id, std::size_t n, Eigen::Index d, std::mt19937_64& rng) {
  fedicl::ClientDataset c{id, {}};
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i)
    c.examples.push_back({fedicl::Covariate(random_vector(d, rng)), fedicl::Real{noise(rng)}, std::nullopt});
  return c;
}

}  // namespace testing_support
