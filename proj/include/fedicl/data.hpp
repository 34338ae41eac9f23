#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "fedicl/core.hpp"

namespace fedicl {

// JSONL ----------------------------------------------------------------------

inline std::vector<Example> parse_dataset(std::istream& in, const std::string& source = "<stream>") {
  std::vector<Example> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    try {
      out.push_back(example_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<Example> load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open dataset " + path.string());
  return parse_dataset(in, path.string());
}

inline void save_dataset(std::span<const Example> examples, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write dataset " + path.string());
  for (const auto& e : examples) out << example_to_json(e).dump() << '\n';
}

// Embedding ------------------------------------------------------------------

class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual Vector embed(const Input& input) const = 0;
  virtual std::string descriptor() const = 0;
};

/// Vector mode: the covariate is its own embedding.
class IdentityEmbedder final : public Embedder {
 public:
  Vector embed(const Input& input) const override { return vector_of(input); }
  std::string descriptor() const override { return "identity"; }
};

/// Bag of lower-cased words hashed into a fixed number of buckets, L2-normalized.
/// An offline stand-in for a sentence-embedding model.
class HashingEmbedder final : public Embedder {
 public:
  explicit HashingEmbedder(Eigen::Index dim = 256) : dim_(dim) {
    if (dim < 1) throw ConfigError("embedding dimension must be >= 1");
  }

  Vector embed(const Input& input) const override {
    if (const auto* c = std::get_if<Covariate>(&input)) return c->values;
    const auto& q = std::get<Question>(input);
    Vector v = Vector::Zero(dim_);
    std::string word;
    auto flush = [&] {
      if (word.empty()) return;
      std::uint64_t h = 1469598103934665603ULL;
      for (unsigned char c : word) h = (h ^ c) * 1099511628211ULL;
      v[static_cast<Eigen::Index>(h % static_cast<std::uint64_t>(dim_))] += 1.0;
      word.clear();
    };
    for (unsigned char c : q.text) {
      if (std::isalnum(c)) word.push_back(static_cast<char>(std::tolower(c)));
      else flush();
    }
    flush();
    const double n = v.norm();
    return n > 0.0 ? Vector(v / n) : v;
  }

  std::string descriptor() const override { return "hashing-" + std::to_string(dim_); }

 private:
  Eigen::Index dim_;
};

/// User-supplied text -> vector table.
class TableEmbedder final : public Embedder {
 public:
  explicit TableEmbedder(std::map<std::string, Vector> table) : table_(std::move(table)) {}

  static TableEmbedder from_json(const json& j) {
    std::map<std::string, Vector> t;
    for (const auto& [k, v] : j.items()) t.emplace(k, vector_from_json(v));
    return TableEmbedder(std::move(t));
  }

  Vector embed(const Input& input) const override {
    if (const auto* c = std::get_if<Covariate>(&input)) return c->values;
    const auto& text = std::get<Question>(input).text;
    auto it = table_.find(text);
    if (it == table_.end()) throw ConfigError("embedding table has no entry for: " + text);
    return it->second;
  }

  std::string descriptor() const override { return "table"; }

 private:
  std::map<std::string, Vector> table_;
};

// Nearest neighbours ---------------------------------------------------------

/// Indices of the c pool entries nearest to `query` (Euclidean), nearest first,
/// ties broken by lower index.
inline std::vector<std::size_t> nearest_indices(std::span<const Vector> pool, const Vector& query, std::size_t c) {
  std::vector<std::pair<double, std::size_t>> dist;
  dist.reserve(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (pool[i].size() != query.size()) throw ConfigError("kNN: embedding dimension mismatch");
    dist.emplace_back((pool[i] - query).squaredNorm(), i);
  }
  const std::size_t k = std::min(c, dist.size());
  std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
  std::vector<std::size_t> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(dist[i].second);
  return out;
}

template <class Inputs>
std::vector<Vector> embed_all(const Inputs& inputs, const Embedder& embedder) {
  std::vector<Vector> out;
  out.reserve(inputs.size());
  for (const auto& in : inputs) out.push_back(embedder.embed(in));
  return out;
}

/// Union over queries of each query's c nearest pool entries, in pool order.
inline std::vector<std::size_t> knn_filter_indices(std::span<const Vector> pool, std::span<const Vector> queries,
                                                   std::size_t c) {
  if (c < 1) throw ConfigError("kNN: c must be >= 1");
  std::set<std::size_t> keep;
  for (const auto& q : queries)
    for (auto i : nearest_indices(pool, q, c)) keep.insert(i);
  return {keep.begin(), keep.end()};
}

inline std::vector<Input> inputs_of(const ClientDataset& d) {
  std::vector<Input> out;
  out.reserve(d.size());
  for (const auto& e : d.examples) out.push_back(e.input);
  return out;
}

/// Local dataset filtering: keeps the union of each query's c nearest examples.
inline ClientDataset knn_filter(const ClientDataset& dataset, std::span<const Input> queries, std::size_t c,
                                const Embedder& embedder) {
  if (dataset.size() == 0) throw ConfigError("kNN: dataset is empty");
  const auto pool = embed_all(inputs_of(dataset), embedder);
  const auto q = embed_all(std::vector<Input>(queries.begin(), queries.end()), embedder);
  ClientDataset out{dataset.client_id, {}};
  for (auto i : knn_filter_indices(pool, q, c)) out.examples.push_back(dataset.examples[i]);
  return out;
}

/// The c examples nearest to one query, nearest first.
inline std::vector<Example> knn_context(const ClientDataset& filtered, const Input& query, std::size_t c,
                                        const Embedder& embedder) {
  const auto pool = embed_all(inputs_of(filtered), embedder);
  std::vector<Example> out;
  for (auto i : nearest_indices(pool, embedder.embed(query), c)) out.push_back(filtered.examples[i]);
  return out;
}

// Dirichlet partitioning -----------------------------------------------------

struct PartitionSpec {
  int num_clients = 3;
  double alpha = 1.0;
  std::vector<std::string> categories;  // support of the prior, in order
  std::vector<double> prior;            // empty = uniform
  std::uint64_t seed = 0;

  void validate() const {
    if (num_clients < 1) throw ConfigError("partition: num_clients must be >= 1");
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("partition: alpha must be positive");
    if (!prior.empty()) {
      if (prior.size() != categories.size()) throw ConfigError("partition: prior and categories differ in length");
      double sum = 0.0;
      for (double p : prior) {
        if (!(p >= 0.0)) throw ConfigError("partition: prior entries must be >= 0");
        sum += p;
      }
      if (std::abs(sum - 1.0) > 1e-12) throw ConfigError("partition: prior must sum to 1");
    }
  }
};

/// q ~ Dir(concentration), sampled in log space so tiny concentrations do not underflow.
inline std::vector<double> sample_dirichlet(std::span<const double> concentration, std::mt19937_64& rng) {
  std::vector<double> log_g(concentration.size(), -std::numeric_limits<double>::infinity());
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  double max_log = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < concentration.size(); ++j) {
    const double a = concentration[j];
    if (a <= 0.0) continue;
    // Gamma(a) = Gamma(a + 1) * U^{1/a}
    std::gamma_distribution<double> g(a + 1.0, 1.0);
    double u = unif(rng);
    while (u <= 0.0) u = unif(rng);
    log_g[j] = std::log(g(rng)) + std::log(u) / a;
    max_log = std::max(max_log, log_g[j]);
  }
  if (!std::isfinite(max_log)) throw ConfigError("Dirichlet concentration has no positive entry");
  std::vector<double> q(concentration.size(), 0.0);
  double sum = 0.0;
  for (std::size_t j = 0; j < q.size(); ++j) {
    q[j] = std::isfinite(log_g[j]) ? std::exp(log_g[j] - max_log) : 0.0;
    sum += q[j];
  }
  for (auto& v : q) v /= sum;
  return q;
}

/// Integer counts summing to `total`, proportional to q (largest remainder, ties to lower index).
inline std::vector<std::size_t> largest_remainder(std::span<const double> q, std::size_t total) {
  std::vector<std::size_t> counts(q.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t used = 0;
  for (std::size_t j = 0; j < q.size(); ++j) {
    const double exact = q[j] * static_cast<double>(total);
    counts[j] = static_cast<std::size_t>(std::floor(exact));
    used += counts[j];
    rem.emplace_back(exact - std::floor(exact), j);
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; used < total && i < rem.size(); ++i, ++used) ++counts[rem[i].second];
  // Rounding slack when q sums slightly below 1.
  for (std::size_t j = 0; used < total; j = (j + 1) % counts.size(), ++used) ++counts[j];
  return counts;
}

struct PartitionResult {
  std::vector<ClientDataset> clients;
  std::vector<int> assignment;  // example index -> client id
  std::vector<std::string> categories;

  json manifest() const {
    json m{{"num_examples", assignment.size()}, {"num_clients", clients.size()}, {"assignment", assignment}};
    json counts = json::array();
    for (const auto& c : clients) {
      json row = json::object();
      for (const auto& e : c.examples) row[*e.category] = row.value(*e.category, 0) + 1;
      counts.push_back(row);
    }
    m["category_counts"] = counts;
    return m;
  }
};

/// Splits `dataset` across clients with category proportions q_i ~ Dir(alpha p).
/// Client sizes are as equal as possible; a category that runs out hands its
/// deficit to whichever category has the most examples left.
inline PartitionResult dirichlet_partition(const std::vector<Example>& dataset, PartitionSpec spec) {
  if (spec.categories.empty()) {
    std::set<std::string> names;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      if (!dataset[i].category) throw ConfigError("partition: example " + std::to_string(i) + " has no category");
      names.insert(*dataset[i].category);
    }
    spec.categories.assign(names.begin(), names.end());
  }
  spec.validate();
  const std::size_t n = dataset.size();
  const std::size_t num_cat = spec.categories.size();
  const auto num_clients = static_cast<std::size_t>(spec.num_clients);
  if (n < num_clients)
    throw ConfigError("partition: dataset too small: " + std::to_string(n) + " examples for " +
                      std::to_string(num_clients) + " clients");

  std::map<std::string, std::size_t> cat_index;
  for (std::size_t j = 0; j < num_cat; ++j) cat_index[spec.categories[j]] = j;
  std::vector<std::vector<std::size_t>> pools(num_cat);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& cat = dataset[i].category;
    if (!cat) throw ConfigError("partition: example " + std::to_string(i) + " has no category");
    auto it = cat_index.find(*cat);
    if (it == cat_index.end()) throw ConfigError("partition: category '" + *cat + "' is outside the prior's support");
    pools[it->second].push_back(i);
  }

  std::mt19937_64 rng(spec.seed);
  for (auto& p : pools) std::shuffle(p.begin(), p.end(), rng);
  std::vector<std::size_t> cursor(num_cat, 0);
  auto available = [&](std::size_t j) { return pools[j].size() - cursor[j]; };

  std::vector<double> conc(num_cat);
  for (std::size_t j = 0; j < num_cat; ++j)
    conc[j] = spec.alpha * (spec.prior.empty() ? 1.0 / static_cast<double>(num_cat) : spec.prior[j]);

  PartitionResult result;
  result.categories = spec.categories;
  result.assignment.assign(n, 0);
  for (std::size_t c = 0; c < num_clients; ++c) {
    const std::size_t size = n / num_clients + (c < n % num_clients ? 1 : 0);
    const auto q = sample_dirichlet(conc, rng);
    const auto want = largest_remainder(q, size);
    ClientDataset client{static_cast<int>(c) + 1, {}};
    std::vector<std::size_t> taken;
    std::size_t deficit = 0;
    auto take = [&](std::size_t j, std::size_t k) {
      for (std::size_t t = 0; t < k; ++t) taken.push_back(pools[j][cursor[j]++]);
    };
    for (std::size_t j = 0; j < num_cat; ++j) {
      const std::size_t k = std::min(want[j], available(j));
      take(j, k);
      deficit += want[j] - k;
    }
    while (deficit > 0) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < num_cat; ++j)
        if (available(j) > available(best)) best = j;
      const std::size_t k = std::min(deficit, available(best));
      if (k == 0) throw ConfigError("partition: ran out of examples while filling client " + std::to_string(c + 1));
      take(best, k);
      deficit -= k;
    }
    std::sort(taken.begin(), taken.end());
    for (auto i : taken) {
      client.examples.push_back(dataset[i]);
      result.assignment[i] = client.client_id;
    }
    result.clients.push_back(std::move(client));
  }
  return result;
}

/// Shannon entropy (nats) of a client's category histogram.
inline double category_entropy(const ClientDataset& client) {
  std::map<std::string, double> counts;
  for (const auto& e : client.examples) counts[e.category.value_or("")] += 1.0;
  const double n = static_cast<double>(client.size());
  double h = 0.0;
  for (const auto& [_, k] : counts) h -= (k / n) * std::log(k / n);
  return h;
}

// Server query set -----------------------------------------------------------

struct QuerySplit {
  std::vector<Example> queries;    // with their ground-truth labels
  std::vector<Example> remaining;  // the rest, in original order
};

/// Draws `per_category` examples uniformly at random from every category.
inline QuerySplit sample_queries_per_category(const std::vector<Example>& dataset, std::size_t per_category,
                                              std::uint64_t seed) {
  std::map<std::string, std::vector<std::size_t>> by_cat;
  for (std::size_t i = 0; i < dataset.size(); ++i) by_cat[dataset[i].category.value_or("")].push_back(i);
  std::mt19937_64 rng(seed);
  std::vector<bool> chosen(dataset.size(), false);
  for (auto& [cat, idx] : by_cat) {
    if (idx.size() < per_category)
      throw ConfigError("query sampling: category '" + cat + "' has only " + std::to_string(idx.size()) + " examples");
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t k = 0; k < per_category; ++k) chosen[idx[k]] = true;
  }
  QuerySplit out;
  for (std::size_t i = 0; i < dataset.size(); ++i) (chosen[i] ? out.queries : out.remaining).push_back(dataset[i]);
  return out;
}

// Synthetic regression -------------------------------------------------------

inline Matrix symmetric_sqrt(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(m);
  return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

struct SyntheticSpec {
  int d = 2;
  int clients = 3;
  int n = 5;  // examples per client
  int m = 4;  // server queries
  Matrix lambda_client;  // empty = identity
  Matrix lambda_server;  // empty = identity
  std::optional<Vector> w_true;  // empty = N(0, I)
  double noise = 0.0;
  /// When set, covariates are placed so both empirical second moments equal this matrix exactly.
  std::optional<Matrix> matched_moment;
  std::uint64_t seed = 0;
};

struct SyntheticData {
  std::vector<ClientDataset> clients;
  std::vector<Example> queries;  // ground-truth labels y = w_true^T x
  Vector w_true;
};

/// Points whose second moment (1/count) sum x x^T equals `target`; count must be a multiple of d.
inline std::vector<Vector> matched_points(const Matrix& target, std::size_t count) {
  const auto d = static_cast<std::size_t>(target.rows());
  if (count % d != 0)
    throw ConfigError("matched moments need a point count divisible by d=" + std::to_string(d));
  const Matrix root = symmetric_sqrt(target) * std::sqrt(static_cast<double>(d));
  std::vector<Vector> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(root.col(static_cast<Eigen::Index>(i % d)));
  return out;
}

inline SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  if (spec.d < 1 || spec.clients < 1 || spec.n < 1 || spec.m < 1)
    throw ConfigError("synthetic: d, clients, n, m must all be >= 1");
  const auto d = static_cast<Eigen::Index>(spec.d);
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto gaussian = [&](const Matrix& cov) {
    Vector z(d);
    for (Eigen::Index i = 0; i < d; ++i) z[i] = normal(rng);
    if (cov.size() == 0) return z;
    return Vector(cov.llt().matrixL() * z);
  };
  SyntheticData out;
  out.w_true = spec.w_true ? *spec.w_true : gaussian(Matrix());
  if (out.w_true.size() != d) throw ConfigError("synthetic: w_true has wrong dimension");

  const auto total_client = static_cast<std::size_t>(spec.clients * spec.n);
  std::vector<Vector> client_x, server_x;
  if (spec.matched_moment) {
    client_x = matched_points(*spec.matched_moment, total_client);
    server_x = matched_points(*spec.matched_moment, static_cast<std::size_t>(spec.m));
  } else {
    for (std::size_t i = 0; i < total_client; ++i) client_x.push_back(gaussian(spec.lambda_client));
    for (int i = 0; i < spec.m; ++i) server_x.push_back(gaussian(spec.lambda_server));
  }
  std::size_t next = 0;
  for (int c = 0; c < spec.clients; ++c) {
    ClientDataset cd{c + 1, {}};
    for (int i = 0; i < spec.n; ++i) {
      const Vector& x = client_x[next++];
      const double y = out.w_true.dot(x) + spec.noise * normal(rng);
      cd.examples.push_back({Covariate(x), Real{y}, std::nullopt});
    }
    out.clients.push_back(std::move(cd));
  }
  for (const auto& x : server_x) out.queries.push_back({Covariate(x), Real{out.w_true.dot(x)}, std::nullopt});
  return out;
}

}  // namespace fedicl
