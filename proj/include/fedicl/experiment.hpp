#pragma once

// Config-driven commands behind the `fedicl` executable. Each command reads an
// ExperimentConfig, writes its artifacts into the output directory and returns
// an exit code: 0 pass, 1 verification failure, 2 config error, 3 backend
// error, 4 non-contractive configuration.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fedicl/backend.hpp"
#include "fedicl/core.hpp"
#include "fedicl/data.hpp"
#include "fedicl/lsa.hpp"
#include "fedicl/protocol.hpp"
#include "fedicl/remote.hpp"
#include "fedicl/theory.hpp"

namespace fedicl {

namespace fs = std::filesystem;

enum ExitCode : int { kExitPass = 0, kExitFail = 1, kExitConfig = 2, kExitBackend = 3, kExitNonContractive = 4 };

enum class Mode { theory, simulate, partition, report };

inline Mode parse_mode(std::string_view s) {
  if (s == "theory") return Mode::theory;
  if (s == "simulate") return Mode::simulate;
  if (s == "partition") return Mode::partition;
  if (s == "report") return Mode::report;
  throw ConfigError("unknown mode: " + std::string(s));
}

// Config ---------------------------------------------------------------------

/// Pretrained-model description: Gamma comes from (lambda, t_prompt) or is given directly.
struct LsaSection {
  Matrix lambda;
  int t_prompt = 10;
  std::optional<Matrix> gamma_override;
  std::optional<PretrainSpec> pretrain;

  Matrix gamma_matrix() const { return gamma_override ? *gamma_override : gamma(lambda, t_prompt); }
};

struct BackendSection {
  std::string kind = "lsa";  // lsa | remote
  RemoteConfig remote;
  GenerationParams generation;
};

struct EmbeddingSection {
  std::string kind;  // empty = identity for vectors, hashing for text
  int dim = 256;
  fs::path table;
};

/// Where client data and server queries come from. Exactly one source is used.
struct DataSection {
  std::optional<SyntheticSpec> synthetic;
  bool matched_gamma = false;  // synthetic covariates with second moment exactly Gamma
  std::vector<ClientDataset> clients;
  std::vector<Example> queries;
  fs::path dataset;  // partition mode, or simulate with queries_per_category
  std::size_t queries_per_category = 0;
  ClientDataset server_reference;
};

struct TheorySection {
  int rounds = 20;
  double slack = 1e-9;
  std::optional<Vector> w_first;
};

struct ExperimentConfig {
  Mode mode = Mode::simulate;
  std::uint64_t seed = 0;
  fs::path output = "out";
  fs::path base_dir = ".";
  DataSection data;
  LsaSection lsa;
  BackendSection backend;
  EmbeddingSection embedding;
  ProtocolConfig protocol;
  PartitionSpec partition;
  TheorySection theory;
  std::vector<fs::path> runs;  // report mode
  bool verify_theory = false;
};

namespace detail {

inline void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, _] : j.items())
    if (!allowed.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
}

inline fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

inline Matrix matrix_or_identity(const json& j, int d) {
  if (j.is_string()) {
    if (j.get<std::string>() != "identity") throw ConfigError("matrix must be an array of rows or \"identity\"");
    return Matrix::Identity(d, d);
  }
  return matrix_from_json(j);
}

inline std::vector<Example> examples_from(const json& j, const fs::path& base) {
  if (j.is_string()) return load_dataset(resolve(base, j.get<std::string>()));
  if (!j.is_array()) throw ConfigError("examples must be a path or an inline array");
  std::vector<Example> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    try {
      out.push_back(example_from_json(j[i]));
    } catch (const std::exception& e) {
      throw ConfigError("inline example " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

/// Query entries may omit labels; bare arrays and strings are accepted as inputs.
inline std::vector<Example> queries_from(const json& j, const fs::path& base) {
  if (j.is_string()) return load_dataset(resolve(base, j.get<std::string>()));
  if (!j.is_array()) throw ConfigError("queries must be a path or an inline array");
  std::vector<Example> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& q = j[i];
    try {
      if (q.is_object() && (q.contains("y") || q.contains("answer"))) {
        out.push_back(example_from_json(q));
      } else {
        Example e;
        e.input = (q.is_object() && q.contains("x")) ? q.at("x").get<Input>() : q.get<Input>();
        e.label = Real{std::numeric_limits<double>::quiet_NaN()};
        e.category = std::nullopt;
        out.push_back(std::move(e));
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError("query " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

inline bool has_truth(const Example& e) {
  if (const auto* r = std::get_if<Real>(&e.label)) return std::isfinite(r->value);
  return true;
}

inline SyntheticSpec parse_synthetic(const json& j, bool& matched_gamma) {
  reject_unknown(j, {"d", "clients", "n", "m", "lambda_client", "lambda_server", "w_true", "noise", "matched_moment"},
                 "data.synthetic");
  SyntheticSpec s;
  s.d = j.value("d", s.d);
  s.clients = j.value("clients", s.clients);
  s.n = j.value("n", s.n);
  s.m = j.value("m", s.m);
  s.noise = j.value("noise", s.noise);
  if (j.contains("lambda_client")) s.lambda_client = matrix_or_identity(j["lambda_client"], s.d);
  if (j.contains("lambda_server")) s.lambda_server = matrix_or_identity(j["lambda_server"], s.d);
  if (j.contains("w_true")) s.w_true = vector_from_json(j["w_true"]);
  if (j.contains("matched_moment")) {
    const auto& mm = j["matched_moment"];
    if (mm.is_string() && mm.get<std::string>() == "gamma") matched_gamma = true;
    else s.matched_moment = matrix_or_identity(mm, s.d);
  }
  return s;
}

}  // namespace detail

/// Parses a config document. Relative paths resolve against `base_dir`.
inline ExperimentConfig parse_config(const json& j, const fs::path& base_dir = ".") {
  detail::reject_unknown(j, {"mode", "seed", "output", "data", "lsa", "backend", "embedding", "protocol", "partition",
                             "theory", "runs", "verify_theory"},
                         "config");
  ExperimentConfig c;
  c.base_dir = base_dir;
  try {
    if (!j.contains("mode")) throw ConfigError("config: 'mode' is required");
    c.mode = parse_mode(j.at("mode").get<std::string>());
    c.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("output")) c.output = detail::resolve(base_dir, j["output"].get<std::string>());
    c.verify_theory = j.value("verify_theory", false);

    int d_hint = 1;
    if (j.contains("data")) {
      const auto& dj = j["data"];
      detail::reject_unknown(dj, {"synthetic", "clients", "queries", "dataset", "queries_per_category", "server_reference"},
                             "data");
      if (dj.contains("synthetic")) {
        c.data.synthetic = detail::parse_synthetic(dj["synthetic"], c.data.matched_gamma);
        d_hint = c.data.synthetic->d;
      }
      if (dj.contains("clients")) {
        const auto& cj = dj["clients"];
        if (!cj.is_array()) throw ConfigError("data.clients must be an array of paths or example arrays");
        for (std::size_t i = 0; i < cj.size(); ++i) {
          ClientDataset cd{static_cast<int>(i) + 1, detail::examples_from(cj[i], base_dir)};
          check_consistent(cd.examples);
          c.data.clients.push_back(std::move(cd));
        }
      }
      if (dj.contains("queries")) c.data.queries = detail::queries_from(dj["queries"], base_dir);
      if (dj.contains("dataset")) c.data.dataset = detail::resolve(base_dir, dj["dataset"].get<std::string>());
      c.data.queries_per_category = dj.value("queries_per_category", std::size_t{0});
      if (dj.contains("server_reference"))
        c.data.server_reference = ClientDataset{0, detail::examples_from(dj["server_reference"], base_dir)};
      if (!c.data.clients.empty() && is_vector(c.data.clients.front().input(0)))
        d_hint = static_cast<int>(vector_of(c.data.clients.front().input(0)).size());
    }

    c.lsa.lambda = Matrix::Identity(d_hint, d_hint);
    if (j.contains("lsa")) {
      const auto& lj = j["lsa"];
      detail::reject_unknown(lj, {"lambda", "t_prompt", "gamma", "pretrain"}, "lsa");
      if (lj.contains("lambda")) c.lsa.lambda = detail::matrix_or_identity(lj["lambda"], d_hint);
      c.lsa.t_prompt = lj.value("t_prompt", c.lsa.t_prompt);
      if (lj.contains("gamma")) c.lsa.gamma_override = detail::matrix_or_identity(lj["gamma"], d_hint);
      if (lj.contains("pretrain")) {
        const auto& pj = lj["pretrain"];
        detail::reject_unknown(pj, {"b_tasks", "sigma", "step_size", "max_steps", "grad_tolerance"}, "lsa.pretrain");
        PretrainSpec p;
        p.lambda = c.lsa.lambda;
        p.t_prompt = c.lsa.t_prompt;
        p.theta = PretrainSpec::default_theta(c.lsa.lambda.rows());
        p.b_tasks = pj.value("b_tasks", p.b_tasks);
        p.sigma = pj.value("sigma", p.sigma);
        p.step_size = pj.value("step_size", p.step_size);
        p.max_steps = pj.value("max_steps", p.max_steps);
        p.grad_tolerance = pj.value("grad_tolerance", p.grad_tolerance);
        p.seed = derive_seed(c.seed, "pretrain");
        p.validate();
        c.lsa.pretrain = p;
      }
    }
    if (c.lsa.gamma_override) require_spd(*c.lsa.gamma_override, "lsa.gamma");
    else gamma(c.lsa.lambda, c.lsa.t_prompt);  // validates lambda and t_prompt

    if (j.contains("backend")) {
      const auto& bj = j["backend"];
      detail::reject_unknown(bj, {"kind", "endpoint", "api_key_env", "template", "max_in_flight", "generation"}, "backend");
      c.backend.kind = bj.value("kind", c.backend.kind);
      if (c.backend.kind != "lsa" && c.backend.kind != "remote")
        throw ConfigError("backend.kind must be 'lsa' or 'remote'");
      c.backend.remote.endpoint = bj.value("endpoint", c.backend.remote.endpoint);
      c.backend.remote.api_key_env = bj.value("api_key_env", c.backend.remote.api_key_env);
      c.backend.remote.template_id = bj.value("template", c.backend.remote.template_id);
      c.backend.remote.max_in_flight = bj.value("max_in_flight", c.backend.remote.max_in_flight);
      if (bj.contains("generation")) {
        const auto& gj = bj["generation"];
        detail::reject_unknown(gj, {"temperature", "max_tokens", "model_name", "timeout_ms", "max_retries"},
                               "backend.generation");
        auto& g = c.backend.generation;
        g.temperature = gj.value("temperature", g.temperature);
        g.max_tokens = gj.value("max_tokens", g.max_tokens);
        g.model_name = gj.value("model_name", g.model_name);
        g.timeout_ms = gj.value("timeout_ms", g.timeout_ms);
        g.max_retries = gj.value("max_retries", g.max_retries);
      }
      c.backend.remote.validate();
      if (c.backend.kind == "remote" &&
          std::find(template_ids().begin(), template_ids().end(), c.backend.remote.template_id) == template_ids().end())
        throw ConfigError("backend.template: unknown template " + c.backend.remote.template_id);
    }

    if (j.contains("embedding")) {
      const auto& ej = j["embedding"];
      detail::reject_unknown(ej, {"kind", "dim", "table"}, "embedding");
      c.embedding.kind = ej.value("kind", std::string());
      c.embedding.dim = ej.value("dim", c.embedding.dim);
      if (ej.contains("table")) c.embedding.table = detail::resolve(base_dir, ej["table"].get<std::string>());
      if (!c.embedding.kind.empty() && c.embedding.kind != "identity" && c.embedding.kind != "hashing" &&
          c.embedding.kind != "table")
        throw ConfigError("embedding.kind must be identity, hashing or table");
    }

    if (j.contains("protocol")) {
      const auto& pj = j["protocol"];
      detail::reject_unknown(pj, {"variant", "rounds", "aggregation", "context_count", "filter_context", "init",
                                  "charge_questions_every_round", "parallel_clients", "options"},
                             "protocol");
      auto& p = c.protocol;
      if (pj.contains("variant")) p.variant = parse_variant(pj["variant"].get<std::string>());
      p.rounds = pj.value("rounds", p.rounds);
      if (pj.contains("aggregation")) p.aggregation = parse_aggregation(pj["aggregation"].get<std::string>());
      p.context_count = pj.value("context_count", p.context_count);
      p.filter_context = pj.value("filter_context", p.filter_context);
      if (pj.contains("init")) p.init_mode = parse_init_mode(pj["init"].get<std::string>());
      p.charge_questions_every_round = pj.value("charge_questions_every_round", p.charge_questions_every_round);
      p.parallel_clients = pj.value("parallel_clients", p.parallel_clients);
      if (pj.contains("options")) p.options = pj["options"].get<std::vector<std::string>>();
      p.validate();
    }
    c.protocol.seed = c.seed;
    c.backend.generation.context_count = c.protocol.context_count;
    c.backend.generation.validate();

    if (j.contains("partition")) {
      const auto& pj = j["partition"];
      detail::reject_unknown(pj, {"num_clients", "alpha", "prior", "categories"}, "partition");
      c.partition.num_clients = pj.value("num_clients", c.partition.num_clients);
      c.partition.alpha = pj.value("alpha", c.partition.alpha);
      if (pj.contains("prior")) c.partition.prior = pj["prior"].get<std::vector<double>>();
      if (pj.contains("categories")) c.partition.categories = pj["categories"].get<std::vector<std::string>>();
      c.partition.validate();
    }

    if (j.contains("theory")) {
      const auto& tj = j["theory"];
      detail::reject_unknown(tj, {"rounds", "slack", "w1"}, "theory");
      c.theory.rounds = tj.value("rounds", c.theory.rounds);
      c.theory.slack = tj.value("slack", c.theory.slack);
      if (tj.contains("w1")) c.theory.w_first = vector_from_json(tj["w1"]);
      if (c.theory.rounds < 1) throw ConfigError("theory.rounds must be >= 1");
      if (!(c.theory.slack >= 0.0)) throw ConfigError("theory.slack must be >= 0");
    }

    if (j.contains("runs"))
      for (const auto& r : j["runs"]) c.runs.push_back(detail::resolve(base_dir, r.get<std::string>()));
  } catch (const ConfigError&) {
    throw;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

inline ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_config(j, path.parent_path().empty() ? fs::path(".") : path.parent_path());
}

// Shared helpers -------------------------------------------------------------

namespace detail {

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output directory " + dir.string() + ": " + ec.message());
}

/// Resolved client data and server queries for theory/simulate.
struct Workload {
  std::vector<ClientDataset> clients;
  std::vector<Example> queries;
  std::optional<Vector> w_true;
};

inline Workload build_workload(const ExperimentConfig& c, const Matrix& gamma_matrix) {
  Workload w;
  if (c.data.synthetic) {
    SyntheticSpec s = *c.data.synthetic;
    s.seed = derive_seed(c.seed, "synthetic");
    if (c.data.matched_gamma) s.matched_moment = gamma_matrix;
    auto data = generate_synthetic(s);
    w.clients = std::move(data.clients);
    w.queries = std::move(data.queries);
    w.w_true = data.w_true;
  } else if (!c.data.dataset.empty() && c.data.queries_per_category > 0) {
    const auto all = load_dataset(c.data.dataset);
    const auto split = sample_queries_per_category(all, c.data.queries_per_category, derive_seed(c.seed, "queries"));
    PartitionSpec p = c.partition;
    p.seed = derive_seed(c.seed, "partition");
    w.clients = dirichlet_partition(split.remaining, p).clients;
    w.queries = split.queries;
  } else {
    w.clients = c.data.clients;
    w.queries = c.data.queries;
  }
  if (w.clients.empty()) throw ConfigError("data: no clients (give data.synthetic, data.clients or data.dataset)");
  if (w.queries.empty()) throw ConfigError("data: no server queries");
  std::vector<Example> all;
  for (const auto& cl : w.clients) all.insert(all.end(), cl.examples.begin(), cl.examples.end());
  check_consistent(all);
  const bool vec = is_vector(w.queries.front().input);
  for (const auto& q : w.queries) {
    if (is_vector(q.input) != vec) throw ConfigError("data: mixed query input types");
    if (!all.empty() && is_vector(all.front().input) != vec)
      throw ConfigError("data: queries and client examples differ in input type");
    if (vec && !all.empty() && vector_of(q.input).size() != vector_of(all.front().input).size())
      throw ConfigError("data: query dimension differs from client covariates");
  }
  return w;
}

inline std::vector<Vector> query_vectors(const std::vector<Example>& queries) {
  std::vector<Vector> out;
  for (const auto& q : queries) out.push_back(vector_of(q.input));
  return out;
}

inline std::vector<Input> query_inputs(const std::vector<Example>& queries) {
  std::vector<Input> out;
  for (const auto& q : queries) out.push_back(q.input);
  return out;
}

inline std::string metric_name(LabelKind kind) {
  switch (kind) {
    case LabelKind::real: return "mse";
    case LabelKind::choice: return "accuracy";
    case LabelKind::text: return "exact_match";
  }
  return "?";
}

/// MSE for reals, accuracy for choices, normalized exact match for text; null without ground truth.
inline json score(const std::vector<Label>& labels, const std::vector<Example>& truth) {
  double total = 0.0;
  for (std::size_t m = 0; m < truth.size(); ++m) {
    if (!has_truth(truth[m])) return nullptr;
    const Label& y = labels[m];
    const Label& t = truth[m].label;
    if (const auto* r = std::get_if<Real>(&t)) {
      const double e = real_of(y) - r->value;
      total += e * e;
    } else if (const auto* c = std::get_if<Choice>(&t)) {
      const auto* yc = std::get_if<Choice>(&y);
      total += (yc && !yc->abstain() && yc->option == c->option) ? 1.0 : 0.0;
    } else {
      total += normalized(label_text(y)) == normalized(label_text(t)) ? 1.0 : 0.0;
    }
  }
  return total / static_cast<double>(truth.size());
}

inline json totals_json(const CommLedger& ledger) {
  return json{{"bits", ledger.total(Unit::bits)}, {"tokens", ledger.total(Unit::tokens)}};
}

}  // namespace detail

// theory ---------------------------------------------------------------------

inline int cmd_theory(const ExperimentConfig& c, std::ostream& log = std::cerr) {
  const Matrix g = c.lsa.gamma_matrix();
  const auto w = detail::build_workload(c, g);
  const auto server = detail::query_vectors(w.queries);
  auto state = make_theory_state(w.clients, server, g, c.theory.w_first);
  state = iterate_recursion(std::move(state), c.theory.rounds);
  const ContractionReport r = verify_contraction(state, c.theory.slack);

  json report = r.to_json();
  report["gamma"] = matrix_to_json(g);
  report["h_cont"] = matrix_to_json(state.h_cont);
  report["w_limit"] = vector_to_json(state.w_limit);
  report["w_star"] = state.w_star ? vector_to_json(*state.w_star) : json(nullptr);
  json trace = json::array();
  for (const auto& v : state.w_trace) trace.push_back(vector_to_json(v));
  report["w_trace"] = trace;
  report["seed"] = c.seed;
  detail::ensure_dir(c.output);
  detail::write_text(c.output / "report.json", report.dump(2) + "\n");

  if (!r.contractive) {
    log << "non-contractive: ||H_cont||_2 = " << r.h_norm << " >= 2\n";
    return kExitNonContractive;
  }
  log << "||H_cont||_2 = " << r.h_norm << ", bound " << r.bound << ", " << (r.pass ? "pass" : "FAIL") << "\n";
  return r.pass ? kExitPass : kExitFail;
}

// simulate -------------------------------------------------------------------

namespace detail {

inline std::shared_ptr<const Embedder> make_embedder(const EmbeddingSection& e) {
  if (e.kind == "identity") return std::make_shared<IdentityEmbedder>();
  if (e.kind == "hashing") return std::make_shared<HashingEmbedder>(e.dim);
  if (e.kind == "table") {
    std::ifstream in(e.table);
    if (!in) throw ConfigError("cannot open embedding table " + e.table.string());
    return std::make_shared<TableEmbedder>(TableEmbedder::from_json(json::parse(in)));
  }
  return nullptr;
}

}  // namespace detail

inline int cmd_simulate(const ExperimentConfig& c, std::ostream& log = std::cerr) {
  const bool lsa_backend = c.backend.kind == "lsa";
  const Matrix g = c.lsa.gamma_matrix();
  const auto w = detail::build_workload(c, g);
  const auto inputs = detail::query_inputs(w.queries);
  const LabelKind kind = infer_label_kind(inputs);
  c.protocol.validate_for(kind);

  std::optional<TheoryState> theory;
  if (c.verify_theory) {
    if (!lsa_backend || c.protocol.variant != Variant::fedicl || c.protocol.aggregation != Aggregation::average ||
        c.protocol.init_mode != InitMode::zeros || c.protocol.filter_context)
      throw ConfigError(
          "--verify-theory needs the lsa backend, variant fedicl, average aggregation, zeros init and "
          "filter_context=false");
    theory = iterate_recursion(make_theory_state(w.clients, detail::query_vectors(w.queries), g),
                               c.protocol.effective_rounds());
  }

  json descriptor{{"variant", std::string(to_string(c.protocol.variant))},
                  {"aggregation", std::string(to_string(c.protocol.aggregation))},
                  {"init", std::string(to_string(c.protocol.init_mode))},
                  {"rounds", c.protocol.effective_rounds()},
                  {"context_count", c.protocol.context_count},
                  {"filter_context", c.protocol.filter_context},
                  {"label_kind", std::string(to_string(kind))},
                  {"clients", w.clients.size()},
                  {"queries", w.queries.size()},
                  {"seed", c.seed}};

  std::shared_ptr<LmBackend> backend;
  std::shared_ptr<RemoteBackend> remote;
  if (lsa_backend) {
    backend = std::make_shared<LsaBackend>(g);
  } else {
    remote = std::make_shared<RemoteBackend>(c.backend.remote);
    backend = remote;
  }
  descriptor["backend"] = backend->descriptor();
  if (!lsa_backend) descriptor["model"] = c.backend.generation.model_name;

  json pretrain = nullptr;
  if (c.lsa.pretrain) {
    const auto res = pretrain_gd(*c.lsa.pretrain);
    const Matrix target = prediction_map(limit_params(c.lsa.pretrain->lambda, c.lsa.pretrain->t_prompt));
    pretrain = json{{"initial_loss", res.initial_loss},
                    {"final_loss", res.final_loss},
                    {"steps", res.steps},
                    {"converged", res.converged},
                    {"relative_map_error", (prediction_map(res.params) - target).norm() / target.norm()}};
  }

  RunOptions opts;
  opts.generation = c.backend.generation;
  opts.embedder = detail::make_embedder(c.embedding);
  opts.server_reference = c.data.server_reference;
  if (opts.embedder) descriptor["embedder"] = opts.embedder->descriptor();
  else descriptor["embedder"] = kind == LabelKind::real ? "identity" : HashingEmbedder().descriptor();

  detail::ensure_dir(c.output);
  const fs::path traces_path = c.output / "traces.jsonl";
  std::ofstream traces(traces_path, std::ios::binary | std::ios::trunc);
  if (!traces) throw ConfigError("cannot write " + traces_path.string());

  const std::string metric = detail::metric_name(kind);
  json metrics{{"descriptor", descriptor}, {"metric", metric}, {"rounds", json::array()}, {"complete", false}};
  if (!pretrain.is_null()) metrics["pretrain"] = pretrain;
  double worst_theory = 0.0;

  auto flush_metrics = [&](const CommLedger& ledger) {
    metrics["communication"] = detail::totals_json(ledger);
    if (remote) {
      const auto usage = remote->usage();
      std::uint64_t p = 0, q = 0;
      for (const auto& e : usage.entries()) (e.kind == PayloadKind::lm_prompt ? p : q) += e.payload_units;
      metrics["lm_usage"] = json{{"prompt_tokens", p}, {"completion_tokens", q}};
    }
    if (theory) metrics["theory"] = json{{"h_norm", theory->h_norm},
                                         {"w_star", theory->w_star ? vector_to_json(*theory->w_star) : json(nullptr)},
                                         {"max_deviation", worst_theory}};
    detail::write_text(c.output / "ledger.csv", ledger.to_csv());
    detail::write_text(c.output / "metrics.json", metrics.dump(2) + "\n");
  };

  opts.on_round = [&](const RoundTrace& t, const CommLedger& ledger) {
    RoundTrace out = t;
    json row{{"round", t.round}, {"value", detail::score(t.aggregated.labels, w.queries)}};
    if (theory) {
      const Vector& wk = theory->w_trace[static_cast<std::size_t>(t.round)];
      out.theory_w = wk;
      double dev = 0.0;
      for (std::size_t m = 0; m < w.queries.size(); ++m)
        dev = std::max(dev, std::abs(real_of(t.aggregated.labels[m]) - wk.dot(vector_of(w.queries[m].input))));
      row["theory_max_deviation"] = dev;
      worst_theory = std::max(worst_theory, dev);
    }
    traces << json(out).dump() << '\n';
    traces.flush();
    metrics["rounds"].push_back(row);
    flush_metrics(ledger);
    log << "round " << t.round << " " << metric << " " << row["value"].dump() << "\n";
  };

  std::vector<std::shared_ptr<LmBackend>> backends{backend};
  try {
    const auto result = run<ClientDataset>(c.protocol, w.clients, inputs, backends, opts);
    metrics["initial_value"] = detail::score(result.initial.labels, w.queries);
    metrics["complete"] = true;
    flush_metrics(result.ledger);
  } catch (const BackendError& e) {
    metrics["error"] = e.what();
    detail::write_text(c.output / "metrics.json", metrics.dump(2) + "\n");
    throw;
  }
  if (remote) detail::write_text(c.output / "lm_usage.csv", remote->usage().to_csv());
  if (theory && worst_theory > 1e-9) {
    log << "theory cross-check failed: max deviation " << worst_theory << "\n";
    return kExitFail;
  }
  return kExitPass;
}

// partition ------------------------------------------------------------------

inline int cmd_partition(const ExperimentConfig& c, std::ostream& log = std::cerr) {
  if (c.data.dataset.empty()) throw ConfigError("partition: data.dataset is required");
  const auto data = load_dataset(c.data.dataset);
  PartitionSpec p = c.partition;
  p.seed = derive_seed(c.seed, "partition");
  const auto r = dirichlet_partition(data, p);
  detail::ensure_dir(c.output);
  json manifest = r.manifest();
  manifest["alpha"] = p.alpha;
  manifest["seed"] = c.seed;
  manifest["categories"] = r.categories;
  json files = json::array();
  for (const auto& cl : r.clients) {
    const std::string name = "client_" + std::to_string(cl.client_id) + ".jsonl";
    save_dataset(cl.examples, c.output / name);
    files.push_back(name);
    log << name << ": " << cl.size() << " examples, entropy " << category_entropy(cl) << "\n";
  }
  manifest["files"] = files;
  detail::write_text(c.output / "manifest.json", manifest.dump(2) + "\n");
  return kExitPass;
}

// report ---------------------------------------------------------------------

inline int cmd_report(const ExperimentConfig& c, std::ostream& log = std::cerr) {
  if (c.runs.empty()) throw ConfigError("report: no runs given");
  struct Run {
    std::string name;
    json metrics;
    CommLedger ledger;
  };
  std::vector<Run> runs;
  for (const auto& dir : c.runs) {
    Run r;
    r.name = dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string();
    std::ifstream mi(dir / "metrics.json");
    if (!mi) throw ConfigError("report: missing " + (dir / "metrics.json").string());
    try {
      r.metrics = json::parse(mi);
    } catch (const json::exception& e) {
      throw ConfigError("report: " + (dir / "metrics.json").string() + ": " + e.what());
    }
    std::ifstream li(dir / "ledger.csv");
    if (!li) throw ConfigError("report: missing " + (dir / "ledger.csv").string());
    std::stringstream ss;
    ss << li.rdbuf();
    r.ledger = CommLedger::from_csv(ss.str());
    const auto totals = detail::totals_json(r.ledger);
    if (r.metrics.contains("communication") && r.metrics["communication"] != totals)
      throw ConfigError("report: " + r.name + ": ledger.csv totals disagree with metrics.json");
    runs.push_back(std::move(r));
  }
  const auto& first = runs.front().metrics;
  for (const auto& r : runs) {
    if (r.metrics.value("metric", "") != first.value("metric", ""))
      throw ConfigError("report: runs use different metrics (" + r.metrics.value("metric", "") + " vs " +
                        first.value("metric", "") + ")");
    if (r.metrics["descriptor"].value("queries", 0) != first["descriptor"].value("queries", 0))
      throw ConfigError("report: runs were evaluated on different query sets");
  }

  std::ostringstream rounds;
  rounds << "run,variant,aggregation,backend,round,metric,value\n";
  std::ostringstream comm;
  comm << "run,variant,backend,rounds,bits,tokens\n";
  for (const auto& r : runs) {
    const auto& d = r.metrics["descriptor"];
    for (const auto& row : r.metrics["rounds"])
      rounds << r.name << ',' << d.value("variant", "") << ',' << d.value("aggregation", "") << ','
             << d.value("backend", "") << ',' << row["round"].get<int>() << ',' << r.metrics.value("metric", "") << ','
             << (row["value"].is_null() ? "" : row["value"].dump()) << '\n';
    comm << r.name << ',' << d.value("variant", "") << ',' << d.value("backend", "") << ','
         << r.metrics["rounds"].size() << ',' << r.ledger.total(Unit::bits) << ',' << r.ledger.total(Unit::tokens)
         << '\n';
  }
  detail::ensure_dir(c.output);
  detail::write_text(c.output / "rounds.csv", rounds.str());
  detail::write_text(c.output / "communication.csv", comm.str());
  log << "wrote " << (c.output / "rounds.csv").string() << " and communication.csv for " << runs.size() << " run(s)\n";
  return kExitPass;
}

/// Runs the configured command, mapping errors to exit codes.
inline int dispatch(const ExperimentConfig& c, std::ostream& log = std::cerr) {
  try {
    switch (c.mode) {
      case Mode::theory: return cmd_theory(c, log);
      case Mode::simulate: return cmd_simulate(c, log);
      case Mode::partition: return cmd_partition(c, log);
      case Mode::report: return cmd_report(c, log);
    }
  } catch (const NonContractiveError& e) {
    log << "error: " << e.what() << "\n";
    return kExitNonContractive;
  } catch (const BackendError& e) {
    log << "backend error: " << e.what() << "\n";
    return kExitBackend;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitConfig;
}

}  // namespace fedicl
