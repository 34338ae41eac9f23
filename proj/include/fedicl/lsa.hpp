#pragma once

// Single-layer linear self-attention (LSA) predictor:
//
//   f(E; W_kq, W_pv) = E + W_pv E (E^T W_kq E) / rho
//
// where E stacks the in-context examples (x_j; y_j) as columns followed by the
// query column (x_query; 0). The prediction is the bottom-right entry of f.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "fedicl/core.hpp"

namespace fedicl {

/// One real-labelled in-context example.
struct Point {
  Vector x;
  double y = 0.0;
};

/// Converts real-labelled examples to points. Throws on text inputs or labels.
inline std::vector<Point> to_points(std::span<const Example> examples) {
  std::vector<Point> out;
  out.reserve(examples.size());
  for (const auto& e : examples) out.push_back({vector_of(e.input), real_of(e.label)});
  return out;
}

inline bool is_spd(const Matrix& m) {
  if (m.rows() != m.cols() || m.rows() == 0 || !m.allFinite()) return false;
  if (!m.isApprox(m.transpose(), 1e-12)) return false;
  Eigen::SelfAdjointEigenSolver<Matrix> es(m, Eigen::EigenvaluesOnly);
  return es.info() == Eigen::Success && es.eigenvalues().minCoeff() > 0.0;
}

inline void require_spd(const Matrix& m, const std::string& name) {
  if (!is_spd(m)) throw ConfigError(name + " must be symmetric positive definite");
}

/// Gamma = (1 + 1/T) Lambda + (1/T) tr(Lambda) I.
inline Matrix gamma(const Matrix& lambda, int t_prompt) {
  require_spd(lambda, "Lambda");
  if (t_prompt < 1) throw ConfigError("prompt length T must be >= 1");
  const double inv_t = 1.0 / t_prompt;
  return (1.0 + inv_t) * lambda + inv_t * lambda.trace() * Matrix::Identity(lambda.rows(), lambda.cols());
}

struct LsaParams {
  Matrix w_kq;  // merged query-key, (d+1)x(d+1)
  Matrix w_pv;  // merged projection-value, (d+1)x(d+1)
  double rho = 1.0;

  Eigen::Index dim() const { return w_kq.rows() - 1; }

  void validate() const {
    if (w_kq.rows() < 2 || w_kq.rows() != w_kq.cols() || w_pv.rows() != w_kq.rows() || w_pv.cols() != w_kq.cols())
      throw ConfigError("LSA parameter matrices must both be (d+1)x(d+1)");
    if (!w_kq.allFinite() || !w_pv.allFinite()) throw ConfigError("LSA parameters must be finite");
    if (!(rho > 0.0)) throw ConfigError("rho must be positive");
  }

  json to_json() const { return json{{"w_kq", matrix_to_json(w_kq)}, {"w_pv", matrix_to_json(w_pv)}, {"rho", rho}}; }

  static LsaParams from_json(const json& j) {
    LsaParams p{matrix_from_json(j.at("w_kq")), matrix_from_json(j.at("w_pv")), j.at("rho").get<double>()};
    p.validate();
    return p;
  }
};

/// Embedding matrix: columns (x_j; y_j) for each example, then (x_query; 0).
inline Matrix build_embedding(std::span<const Point> examples, const Vector& x_query) {
  const auto d = x_query.size();
  if (d < 1) throw ConfigError("query covariate must have dimension >= 1");
  const auto t = static_cast<Eigen::Index>(examples.size());
  Matrix e = Matrix::Zero(d + 1, t + 1);
  for (Eigen::Index j = 0; j < t; ++j) {
    const auto& p = examples[static_cast<std::size_t>(j)];
    if (p.x.size() != d)
      throw ConfigError("example " + std::to_string(j) + " has dimension " + std::to_string(p.x.size()) +
                        ", query has " + std::to_string(d));
    e.col(j).head(d) = p.x;
    e(d, j) = p.y;
  }
  e.col(t).head(d) = x_query;
  return e;
}

/// Bottom-right entry of f(E; params).
inline double lsa_forward(const Matrix& e, const LsaParams& params) {
  params.validate();
  if (e.cols() < 1) throw ConfigError("embedding must have at least the query column");
  if (e.rows() != params.w_kq.rows())
    throw ConfigError("embedding has " + std::to_string(e.rows()) + " rows, parameters expect " +
                      std::to_string(params.w_kq.rows()));
  const auto last_row = e.rows() - 1;
  const auto last_col = e.cols() - 1;
  // [W_pv E (E^T W_kq E)]_{last,last} = (W_pv.row(last) E) . (E^T W_kq E.col(last))
  const Eigen::RowVectorXd left = params.w_pv.row(last_row) * e;
  const Vector right = e.transpose() * (params.w_kq * e.col(last_col));
  return e(last_row, last_col) + left.dot(right) / params.rho;
}

/// Global-optimum parameters for prompt length T (rho = T).
inline LsaParams limit_params(const Matrix& lambda, int t_prompt) {
  const Matrix g = gamma(lambda, t_prompt);
  const auto d = g.rows();
  const Matrix g_inv = g.llt().solve(Matrix::Identity(d, d));
  const double scale = std::pow((g_inv * g_inv).trace(), 0.25);
  LsaParams p;
  p.w_kq = Matrix::Zero(d + 1, d + 1);
  p.w_kq.topLeftCorner(d, d) = g_inv / scale;
  p.w_pv = Matrix::Zero(d + 1, d + 1);
  p.w_pv(d, d) = scale;
  p.rho = t_prompt;
  return p;
}

/// y_hat = x_query^T Gamma^{-1} (1/M sum_i y_i x_i), with a cached factorization of Gamma.
class ClosedFormPredictor {
 public:
  explicit ClosedFormPredictor(Matrix gamma) : gamma_(std::move(gamma)) {
    require_spd(gamma_, "Gamma");
    llt_.compute(gamma_);
    if (llt_.info() != Eigen::Success) throw ConfigError("Gamma factorization failed");
  }

  double operator()(std::span<const Point> examples, const Vector& x_query) const {
    const auto d = gamma_.rows();
    if (x_query.size() != d)
      throw ConfigError("query dimension " + std::to_string(x_query.size()) + " != " + std::to_string(d));
    if (examples.empty()) return 0.0;
    Vector moment = Vector::Zero(d);
    for (const auto& p : examples) {
      if (p.x.size() != d) throw ConfigError("example dimension mismatch");
      moment += p.y * p.x;
    }
    moment /= static_cast<double>(examples.size());
    return x_query.dot(llt_.solve(moment));
  }

  const Matrix& gamma() const { return gamma_; }
  Matrix inverse() const { return llt_.solve(Matrix::Identity(gamma_.rows(), gamma_.cols())); }

 private:
  Matrix gamma_;
  Eigen::LLT<Matrix> llt_;
};

inline double predict_closed_form(std::span<const Point> examples, const Vector& x_query, const Matrix& gamma) {
  return ClosedFormPredictor(gamma)(examples, x_query);
}

// Pretraining ----------------------------------------------------------------

struct PretrainSpec {
  Matrix lambda;
  int t_prompt = 10;
  int b_tasks = 10000;
  double sigma = 0.5;
  Matrix theta;  // d x d, ||theta theta^T||_F = 1
  double step_size = 0.1;
  int max_steps = 20000;
  std::uint64_t seed = 0;
  double grad_tolerance = 1e-10;  // stop once the gradient max-norm falls below this

  void validate() const {
    require_spd(lambda, "Lambda");
    if (t_prompt < 1) throw ConfigError("T must be >= 1");
    if (b_tasks < 1) throw ConfigError("B must be >= 1");
    if (!(sigma > 0.0)) throw ConfigError("sigma must be positive");
    if (!(step_size > 0.0)) throw ConfigError("step size must be positive");
    if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
    const auto d = lambda.rows();
    if (theta.rows() != d || theta.cols() != d) throw ConfigError("Theta must be d x d");
    if (std::abs((theta * theta.transpose()).norm() - 1.0) > 1e-10) throw ConfigError("||Theta Theta^T||_F must be 1");
    if ((theta * lambda).isZero(0.0)) throw ConfigError("Theta Lambda must be nonzero");
    const Matrix g = gamma(lambda, t_prompt);
    const double op = Eigen::SelfAdjointEigenSolver<Matrix>(g, Eigen::EigenvaluesOnly).eigenvalues().maxCoeff();
    if (!(sigma * sigma * op * std::sqrt(static_cast<double>(d)) < 2.0))
      throw ConfigError("initialization scale violates sigma^2 ||Gamma||_op sqrt(d) < 2");
  }

  /// Theta = I / d^{1/4}, which satisfies ||Theta Theta^T||_F = 1.
  static Matrix default_theta(Eigen::Index d) {
    return Matrix::Identity(d, d) / std::pow(static_cast<double>(d), 0.25);
  }
};

/// Sufficient statistics of B sampled prompts, one prompt per column:
/// moments holds vec(E E^T / rho) (row i*n + j is entry (i, j)), queries the
/// query column (x_query; 0), targets the true label <w, x_query>.
struct PromptBatch {
  Matrix moments;
  Matrix queries;
  Vector targets;

  std::size_t size() const { return static_cast<std::size_t>(targets.size()); }

  Matrix moment(Eigen::Index t) const {
    const auto n = queries.rows();
    Matrix g(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) g(i, j) = moments(i * n + j, t);
    return g;
  }
};

/// Samples B prompts with x ~ N(0, Lambda), w ~ N(0, I), y = <w, x>.
inline PromptBatch sample_prompts(const Matrix& lambda, int t_prompt, int b_tasks, std::mt19937_64& rng, double rho) {
  const auto d = lambda.rows();
  const auto n = d + 1;
  const Matrix chol = lambda.llt().matrixL();
  std::normal_distribution<double> normal(0.0, 1.0);
  auto draw = [&](Eigen::Index k) {
    Vector z(k);
    for (Eigen::Index i = 0; i < k; ++i) z[i] = normal(rng);
    return z;
  };
  PromptBatch batch{Matrix(n * n, b_tasks), Matrix(n, b_tasks), Vector(b_tasks)};
  std::vector<Point> points(static_cast<std::size_t>(t_prompt));
  for (Eigen::Index tau = 0; tau < b_tasks; ++tau) {
    const Vector w = draw(d);
    for (auto& p : points) {
      p.x = chol * draw(d);
      p.y = w.dot(p.x);
    }
    const Vector xq = chol * draw(d);
    const Matrix e = build_embedding(points, xq);
    const Matrix g = e * e.transpose() / rho;
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) batch.moments(i * n + j, tau) = g(i, j);
    batch.queries.col(tau) = e.col(e.cols() - 1);
    batch.targets[tau] = w.dot(xq);
  }
  return batch;
}

/// Predictions for every prompt in the batch; entry t equals lsa_forward on prompt t.
inline Vector batch_predictions(const LsaParams& params, const PromptBatch& batch) {
  const auto n = params.w_kq.rows();
  const auto last = n - 1;
  const Matrix a = params.w_kq * batch.queries;  // n x B
  Eigen::ArrayXd y = Eigen::ArrayXd::Zero(batch.queries.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double p = params.w_pv(last, i);
    if (p == 0.0) continue;
    for (Eigen::Index j = 0; j < n; ++j) y += p * batch.moments.row(i * n + j).transpose().array() * a.row(j).transpose().array();
  }
  return y.matrix();
}

/// Empirical risk 1/(2B) sum (y_hat - y)^2.
inline double empirical_loss(const LsaParams& params, const PromptBatch& batch) {
  return (batch_predictions(params, batch) - batch.targets).squaredNorm() / (2.0 * static_cast<double>(batch.size()));
}

struct ParamGradient {
  Matrix d_kq;
  Matrix d_pv;

  double max_abs() const { return std::max(d_kq.cwiseAbs().maxCoeff(), d_pv.cwiseAbs().maxCoeff()); }
};

/// Analytic gradient of empirical_loss. With p = W_pv.row(last), a_t = W_kq q_t
/// and G_t symmetric: d y_hat / d W_pv(last, i) = (G_t a_t)_i and
/// d y_hat / d W_kq = (G_t p) q_t^T. Only the last row of W_pv reaches the output.
inline ParamGradient loss_gradient(const LsaParams& params, const PromptBatch& batch) {
  const auto n = params.w_kq.rows();
  const auto last = n - 1;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  const Eigen::ArrayXd r = (batch_predictions(params, batch) - batch.targets).array();
  const Matrix a = params.w_kq * batch.queries;
  ParamGradient g{Matrix::Zero(n, n), Matrix::Zero(n, n)};
  Matrix c = Matrix::Zero(n, batch.queries.cols());  // columns G_t p, scaled by r_t
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::ArrayXd ga = Eigen::ArrayXd::Zero(batch.queries.cols());
    for (Eigen::Index j = 0; j < n; ++j) {
      const auto gij = batch.moments.row(i * n + j).transpose().array();
      ga += gij * a.row(j).transpose().array();
      c.row(i) += (params.w_pv(last, j) * gij * r).matrix().transpose();
    }
    g.d_pv(last, i) = (ga * r).sum() * inv_b;
  }
  g.d_kq = c * batch.queries.transpose() * inv_b;
  return g;
}

/// Initialization W_pv(0) = sigma blockdiag(0, 1), W_kq(0) = sigma blockdiag(Theta Theta^T, 0).
inline LsaParams initial_params(const PretrainSpec& spec) {
  const auto d = spec.lambda.rows();
  LsaParams p;
  p.w_pv = Matrix::Zero(d + 1, d + 1);
  p.w_pv(d, d) = spec.sigma;
  p.w_kq = Matrix::Zero(d + 1, d + 1);
  p.w_kq.topLeftCorner(d, d) = spec.sigma * spec.theta * spec.theta.transpose();
  p.rho = spec.t_prompt;
  return p;
}

/// The product of the factors that determines every prediction: entries
/// W_pv(last, i) * W_kq(j, k) for k < d. Invariant under W_kq -> c W_kq, W_pv -> W_pv / c.
inline Matrix prediction_map(const LsaParams& params) {
  const auto n = params.w_kq.rows();
  const auto d = n - 1;
  Matrix out(n, n * d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index k = 0; k < d; ++k) out(i, j * d + k) = params.w_pv(d, i) * params.w_kq(j, k);
  return out;
}

struct PretrainResult {
  LsaParams params;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  int steps = 0;
  bool converged = false;  // gradient fell below tolerance before max_steps
};

/// Plain gradient descent on the sampled empirical risk from the initialization above.
inline PretrainResult pretrain_gd(const PretrainSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const PromptBatch batch = sample_prompts(spec.lambda, spec.t_prompt, spec.b_tasks, rng, spec.t_prompt);
  PretrainResult result;
  result.params = initial_params(spec);
  result.initial_loss = empirical_loss(result.params, batch);
  for (int step = 0; step < spec.max_steps; ++step) {
    const ParamGradient g = loss_gradient(result.params, batch);
    if (g.max_abs() < spec.grad_tolerance) {
      result.converged = true;
      break;
    }
    result.params.w_kq -= spec.step_size * g.d_kq;
    result.params.w_pv -= spec.step_size * g.d_pv;
    result.steps = step + 1;
    const double loss = empirical_loss(result.params, batch);
    if (!std::isfinite(loss) || loss > 1e6)
      throw Error("pretraining diverged at step " + std::to_string(step + 1) + " (loss " + std::to_string(loss) +
                  ", step size " + std::to_string(spec.step_size) + ")");
  }
  result.final_loss = empirical_loss(result.params, batch);
  return result;
}

}  // namespace fedicl
