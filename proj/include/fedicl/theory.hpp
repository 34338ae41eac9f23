#pragma once

// Closed-form description of the protocol's label dynamics under the LSA
// backend with average aggregation and zero initialization:
//
//   y_{k,m} = w_k^T x_m,     w_{k+1} = 1/2 H_cont w_k + 1/2 w_limit,
//
// with H_cont = Gamma^{-1} S_client Gamma^{-1} S_server / (N M L) and
// w_limit = Gamma^{-1} sum x y / (N L). The fixed point is
// w* = (2I - H_cont)^{-1} w_limit.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/LU>
#include <Eigen/SVD>

#include "fedicl/core.hpp"
#include "fedicl/lsa.hpp"

namespace fedicl {

struct ContractionTerms {
  Matrix h_cont;
  Vector w_limit;
};

/// Requires uniform N across clients and real labels.
inline ContractionTerms compute_contraction(std::span<const ClientDataset> clients, std::span<const Vector> server,
                                            const Matrix& gamma) {
  require_spd(gamma, "Gamma");
  if (clients.empty()) throw ConfigError("theory: at least one client is required");
  if (server.empty()) throw ConfigError("theory: at least one server query is required");
  const auto d = gamma.rows();
  const std::size_t n = clients.front().size();
  if (n == 0) throw ConfigError("theory: clients must hold at least one example");
  Matrix s_client = Matrix::Zero(d, d);
  Vector xy = Vector::Zero(d);
  for (const auto& c : clients) {
    if (c.size() != n)
      throw ConfigError("theory: client " + std::to_string(c.client_id) + " has N=" + std::to_string(c.size()) +
                        ", expected uniform N=" + std::to_string(n));
    for (const auto& e : c.examples) {
      const Vector& x = vector_of(e.input);
      if (x.size() != d) throw ConfigError("theory: client covariate dimension mismatch");
      s_client.noalias() += x * x.transpose();
      xy += real_of(e.label) * x;
    }
  }
  Matrix s_server = Matrix::Zero(d, d);
  for (const auto& x : server) {
    if (x.size() != d) throw ConfigError("theory: server covariate dimension mismatch");
    s_server.noalias() += x * x.transpose();
  }
  const auto llt = gamma.llt();
  const double nl = static_cast<double>(n * clients.size());
  const double nml = nl * static_cast<double>(server.size());
  ContractionTerms out;
  out.h_cont = llt.solve(s_client) * llt.solve(s_server) / nml;
  out.w_limit = llt.solve(xy) / nl;
  return out;
}

/// Largest singular value.
inline double spectral_norm(const Matrix& m) {
  if (m.size() == 0) return 0.0;
  return Eigen::JacobiSVD<Matrix>(m).singularValues()(0);
}

/// w* = (2I - H)^{-1} w_limit. Throws NonContractiveError when 2I - H is singular.
inline Vector fixed_point(const Matrix& h_cont, const Vector& w_limit) {
  const auto d = h_cont.rows();
  const Matrix a = 2.0 * Matrix::Identity(d, d) - h_cont;
  Eigen::FullPivLU<Matrix> lu(a);
  if (!lu.isInvertible()) throw NonContractiveError("2I - H_cont is singular; no fixed point exists");
  return lu.solve(w_limit);
}

struct TheoryState {
  Matrix gamma;
  Matrix h_cont;
  Vector w_limit;
  std::optional<Vector> w_star;  // absent when 2I - H_cont is singular
  std::vector<Vector> w_trace;   // w_1, w_2, ...
  double h_norm = 0.0;

  Eigen::Index dim() const { return w_limit.size(); }
  bool contractive() const { return h_norm < 2.0; }
};

/// State with w_1 = 0 unless a starting vector is supplied.
inline TheoryState make_theory_state(const Matrix& gamma, ContractionTerms terms,
                                     std::optional<Vector> w_first = std::nullopt) {
  TheoryState s;
  s.gamma = gamma;
  s.h_cont = std::move(terms.h_cont);
  s.w_limit = std::move(terms.w_limit);
  s.h_norm = spectral_norm(s.h_cont);
  try {
    s.w_star = fixed_point(s.h_cont, s.w_limit);
  } catch (const NonContractiveError&) {
    s.w_star.reset();
  }
  const Vector w1 = w_first ? *w_first : Vector::Zero(s.w_limit.size());
  if (w1.size() != s.w_limit.size()) throw ConfigError("theory: initial w has wrong dimension");
  s.w_trace.push_back(w1);
  return s;
}

inline TheoryState make_theory_state(std::span<const ClientDataset> clients, std::span<const Vector> server,
                                     const Matrix& gamma, std::optional<Vector> w_first = std::nullopt) {
  return make_theory_state(gamma, compute_contraction(clients, server, gamma), std::move(w_first));
}

/// Appends `rounds` applications of w <- 1/2 H w + 1/2 w_limit.
inline TheoryState iterate_recursion(TheoryState state, int rounds) {
  if (state.w_trace.empty()) throw ConfigError("theory: state has no initial w");
  state.w_trace.reserve(state.w_trace.size() + static_cast<std::size_t>(std::max(rounds, 0)));
  for (int k = 0; k < rounds; ++k) {
    const Vector& w = state.w_trace.back();
    state.w_trace.push_back(0.5 * (state.h_cont * w) + 0.5 * state.w_limit);
  }
  return state;
}

struct ContractionReport {
  double h_norm = 0.0;
  int rounds = 0;               // number of transitions checked
  std::vector<double> ratios;   // ||w_{k+1} - w*|| / ||w_k - w*||
  double bound = 0.0;           // 1/2 ||H_cont||_2
  bool contractive = false;     // ||H_cont||_2 < 2
  bool pass = false;
  std::optional<int> violation_round;  // first k whose transition k -> k+1 breaks the bound

  json to_json() const {
    json j{{"h_norm", h_norm}, {"rounds", rounds}, {"ratios", ratios}, {"bound", bound}, {"pass", pass},
           {"contractive", contractive}};
    if (violation_round) j["violation_round"] = *violation_round;
    return j;
  }
};

/// Checks ||w_{k+1} - w*|| <= 1/2 ||H|| ||w_k - w*|| + slack for every stored transition.
inline ContractionReport verify_contraction(const TheoryState& state, double slack = 1e-9) {
  if (state.w_trace.size() < 2) throw ConfigError("theory: need at least two iterates to verify contraction");
  ContractionReport r;
  r.h_norm = state.h_norm;
  r.bound = 0.5 * state.h_norm;
  r.contractive = state.contractive();
  r.rounds = static_cast<int>(state.w_trace.size()) - 1;
  if (!state.w_star) {
    r.pass = false;
    return r;
  }
  r.pass = true;
  for (std::size_t k = 0; k + 1 < state.w_trace.size(); ++k) {
    const double before = (state.w_trace[k] - *state.w_star).norm();
    const double after = (state.w_trace[k + 1] - *state.w_star).norm();
    r.ratios.push_back(before > 0.0 ? after / before : 0.0);
    if (after > r.bound * before + slack && r.pass) {
      r.pass = false;
      r.violation_round = static_cast<int>(k) + 1;
    }
  }
  return r;
}

/// Largest |w_k^T x_m - y_{k,m}| over the given rounds; `labels[k]` holds round k+1.
inline double max_label_deviation(const std::vector<Vector>& w_trace, std::span<const Vector> queries,
                                  const std::vector<std::vector<double>>& labels) {
  double worst = 0.0;
  for (std::size_t k = 0; k < labels.size() && k < w_trace.size(); ++k)
    for (std::size_t m = 0; m < queries.size(); ++m)
      worst = std::max(worst, std::abs(w_trace[k].dot(queries[m]) - labels[k][m]));
  return worst;
}

}  // namespace fedicl
