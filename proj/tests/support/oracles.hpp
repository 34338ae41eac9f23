#pragma once

// Independent reference computations for tests. Plain nested loops over
// std::vector<double>; nothing here calls into the library's numeric paths.

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <utility>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;
using Mat = std::vector<std::vector<double>>;

inline Mat identity(std::size_t n) {
  Mat m(n, Vec(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) m[i][i] = 1.0;
  return m;
}

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat c(a.size(), Vec(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

inline Vec matvec(const Mat& a, const Vec& x) {
  Vec y(a.size(), 0.0);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < x.size(); ++j) y[i] += a[i][j] * x[j];
  return y;
}

inline double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Gauss-Jordan elimination with partial pivoting.
inline Mat inverse(Mat a) {
  const std::size_t n = a.size();
  Mat inv = identity(n);
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    if (std::abs(a[piv][col]) < 1e-300) throw std::runtime_error("oracle: singular matrix");
    std::swap(a[piv], a[col]);
    std::swap(inv[piv], inv[col]);
    const double p = a[col][col];
    for (std::size_t j = 0; j < n; ++j) a[col][j] /= p, inv[col][j] /= p;
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = a[r][col];
      for (std::size_t j = 0; j < n; ++j) a[r][j] -= f * a[col][j], inv[r][j] -= f * inv[col][j];
    }
  }
  return inv;
}

struct Pt {
  Vec x;
  double y;
};

/// x_q^T Gamma^{-1} (1/M sum y_i x_i), expanded term by term.
inline double closed_form(const std::vector<Pt>& pts, const Vec& xq, const Mat& gamma) {
  if (pts.empty()) return 0.0;
  const Mat gi = inverse(gamma);
  double total = 0.0;
  for (const auto& p : pts)
    for (std::size_t a = 0; a < xq.size(); ++a)
      for (std::size_t b = 0; b < xq.size(); ++b) total += xq[a] * gi[a][b] * p.x[b] * p.y;
  return total / static_cast<double>(pts.size());
}

/// H_cont and w_limit, every sum expanded explicitly.
inline std::pair<Mat, Vec> contraction(const std::vector<std::vector<Pt>>& clients, const std::vector<Vec>& server,
                                       const Mat& gamma) {
  const std::size_t d = gamma.size();
  const Mat gi = inverse(gamma);
  Mat sc(d, Vec(d, 0.0)), ss(d, Vec(d, 0.0));
  Vec xy(d, 0.0);
  std::size_t count = 0;
  for (const auto& c : clients)
    for (const auto& p : c) {
      ++count;
      for (std::size_t a = 0; a < d; ++a) {
        xy[a] += p.x[a] * p.y;
        for (std::size_t b = 0; b < d; ++b) sc[a][b] += p.x[a] * p.x[b];
      }
    }
  for (const auto& x : server)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) ss[a][b] += x[a] * x[b];
  Mat h = matmul(matmul(matmul(gi, sc), gi), ss);
  const double nml = static_cast<double>(count) * static_cast<double>(server.size());
  for (auto& row : h)
    for (auto& v : row) v /= nml;
  Vec w = matvec(gi, xy);
  for (auto& v : w) v /= static_cast<double>(count);
  return {h, w};
}

/// Nearest-first indices by full sort on (squared distance, index).
inline std::vector<std::size_t> knn(const std::vector<Vec>& pool, const Vec& q, std::size_t c) {
  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    double s = 0.0;
    for (std::size_t a = 0; a < q.size(); ++a) s += (pool[i][a] - q[a]) * (pool[i][a] - q[a]);
    all.emplace_back(s, i);
  }
  std::sort(all.begin(), all.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < std::min(c, all.size()); ++i) out.push_back(all[i].second);
  return out;
}

inline Vec random_vec(std::size_t d, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Vec v(d);
  for (auto& x : v) x = n(rng);
  return v;
}

}  // namespace oracle
