#pragma once

// Round engine. Each round k:
//   1. the server sends C_k to every client;
//   2. client i relabels its examples by ICL on C_k, giving D_k^i      (step 1);
//   3. client i answers the server queries by ICL on D^i and D_k^i      (step 2);
//   4. the server aggregates the L answer sets into C_{k+1}.
// Variants change the step-2 context (fedicl_free: D_k^i only) or collapse the
// protocol to one ground-truth-context round (fedicl_gt / _ub / _lb).

#include <algorithm>
#include <concepts>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "fedicl/backend.hpp"
#include "fedicl/core.hpp"
#include "fedicl/data.hpp"

namespace fedicl {

enum class Variant { fedicl, fedicl_free, fedicl_gt, fedicl_ub, fedicl_lb };
enum class Aggregation { average, majority, fusion };
enum class InitMode { zeros, random, backend_generated };

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::fedicl: return "fedicl";
    case Variant::fedicl_free: return "fedicl_free";
    case Variant::fedicl_gt: return "fedicl_gt";
    case Variant::fedicl_ub: return "fedicl_ub";
    case Variant::fedicl_lb: return "fedicl_lb";
  }
  return "?";
}

inline std::string_view to_string(Aggregation a) {
  switch (a) {
    case Aggregation::average: return "average";
    case Aggregation::majority: return "majority";
    case Aggregation::fusion: return "fusion";
  }
  return "?";
}

inline std::string_view to_string(InitMode m) {
  switch (m) {
    case InitMode::zeros: return "zeros";
    case InitMode::random: return "random";
    case InitMode::backend_generated: return "backend_generated";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  for (auto v : {Variant::fedicl, Variant::fedicl_free, Variant::fedicl_gt, Variant::fedicl_ub, Variant::fedicl_lb})
    if (to_string(v) == s) return v;
  throw ConfigError("unknown variant: " + std::string(s));
}

inline Aggregation parse_aggregation(std::string_view s) {
  for (auto a : {Aggregation::average, Aggregation::majority, Aggregation::fusion})
    if (to_string(a) == s) return a;
  throw ConfigError("unknown aggregation: " + std::string(s));
}

inline InitMode parse_init_mode(std::string_view s) {
  for (auto m : {InitMode::zeros, InitMode::random, InitMode::backend_generated})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown init mode: " + std::string(s));
}

/// One-shot variants run a single round with ground-truth context.
inline bool single_shot(Variant v) {
  return v == Variant::fedicl_gt || v == Variant::fedicl_ub || v == Variant::fedicl_lb;
}

struct ProtocolConfig {
  Variant variant = Variant::fedicl;
  int rounds = 6;
  Aggregation aggregation = Aggregation::average;
  int context_count = 5;
  bool filter_context = true;  // kNN filtering of D^i and of every ICL context
  InitMode init_mode = InitMode::zeros;
  std::uint64_t seed = 0;
  bool charge_questions_every_round = false;
  bool parallel_clients = true;
  std::vector<std::string> options;  // majority-vote option order; empty = A, B, C, ...

  int effective_rounds() const { return single_shot(variant) ? 1 : rounds; }

  void validate() const {
    if (rounds < 1) throw ConfigError("protocol: rounds must be >= 1");
    if (context_count < 1) throw ConfigError("protocol: context_count must be >= 1");
  }

  void validate_for(LabelKind kind) const {
    validate();
    if (aggregation == Aggregation::average && kind != LabelKind::real)
      throw ConfigError("protocol: average aggregation needs real labels");
    if (aggregation == Aggregation::majority && kind != LabelKind::choice)
      throw ConfigError("protocol: majority aggregation needs choice labels");
    if (aggregation == Aggregation::fusion && kind != LabelKind::text)
      throw ConfigError("protocol: fusion aggregation needs text labels");
  }
};

/// Read access to a client's local examples. ClientDataset models this; tests
/// wrap it to observe which labels the engine reads.
template <class S>
concept ExampleStore = requires(const S& s, std::size_t i) {
  { s.client_id } -> std::convertible_to<int>;
  { s.size() } -> std::convertible_to<std::size_t>;
  { s.input(i) } -> std::convertible_to<const Input&>;
  { s.label(i) } -> std::convertible_to<const Label&>;
};

template <ExampleStore Store>
ClientDataset materialize(const Store& s) {
  ClientDataset out{s.client_id, {}};
  for (std::size_t i = 0; i < s.size(); ++i) out.examples.push_back({s.input(i), s.label(i), std::nullopt});
  return out;
}

// Aggregation ----------------------------------------------------------------

/// Merges the L client answers for one query into one candidate.
class Fuser {
 public:
  virtual ~Fuser() = default;
  virtual Text fuse(std::span<const Text> answers) const = 0;
};

/// Decides whether a fused candidate replaces the server's previous answer.
class Judge {
 public:
  virtual ~Judge() = default;
  virtual bool better(const Text& candidate, const Text& previous, std::span<const Text> client_answers,
                      std::size_t query_index) const = 0;
};

namespace detail {

inline std::vector<std::string> word_tokens(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : s) {
    if (std::isalnum(c)) cur.push_back(static_cast<char>(std::tolower(c)));
    else if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

inline std::string normalized(std::string_view s) {
  std::string out;
  for (const auto& t : word_tokens(s)) out += (out.empty() ? "" : " ") + t;
  return out;
}

}  // namespace detail

/// Reference fuser: the most frequent answer after case/punctuation folding;
/// ties go to the answer seen first (lowest client id).
class MostFrequentFuser final : public Fuser {
 public:
  Text fuse(std::span<const Text> answers) const override {
    if (answers.empty()) return Text{};
    std::map<std::string, std::pair<int, std::size_t>> counts;  // normalized -> (votes, first index)
    for (std::size_t i = 0; i < answers.size(); ++i) {
      auto [it, inserted] = counts.try_emplace(detail::normalized(answers[i].answer), 0, i);
      ++it->second.first;
    }
    std::size_t best = 0;
    int best_votes = -1;
    for (const auto& [_, v] : counts)
      if (v.first > best_votes || (v.first == best_votes && v.second < best)) best_votes = v.first, best = v.second;
    return answers[best];
  }
};

/// Reference judge: prefers the candidate iff it matches strictly more reference
/// tokens (multiset overlap) than the previous answer. The reference is the
/// configured per-query text when present, else the pooled client answers.
class TokenOverlapJudge final : public Judge {
 public:
  TokenOverlapJudge() = default;
  explicit TokenOverlapJudge(std::vector<std::optional<std::string>> references) : references_(std::move(references)) {}

  static std::size_t overlap(std::string_view text, const std::vector<std::string>& reference) {
    std::map<std::string, int> bag;
    for (const auto& t : reference) ++bag[t];
    std::size_t hits = 0;
    for (const auto& t : detail::word_tokens(text)) {
      auto it = bag.find(t);
      if (it != bag.end() && it->second > 0) --it->second, ++hits;
    }
    return hits;
  }

  bool better(const Text& candidate, const Text& previous, std::span<const Text> client_answers,
              std::size_t query_index) const override {
    std::vector<std::string> ref;
    if (query_index < references_.size() && references_[query_index]) {
      ref = detail::word_tokens(*references_[query_index]);
    } else {
      for (const auto& a : client_answers)
        for (auto& t : detail::word_tokens(a.answer)) ref.push_back(std::move(t));
    }
    return overlap(candidate.answer, ref) > overlap(previous.answer, ref);
  }

 private:
  std::vector<std::optional<std::string>> references_;
};

struct AggregationHooks {
  const Fuser* fuser = nullptr;  // null = MostFrequentFuser
  const Judge* judge = nullptr;  // null = TokenOverlapJudge without references
  std::vector<std::string> options;
};

namespace detail {

inline std::vector<std::string> option_order(const AggregationHooks& hooks, const Input& query,
                                             const std::vector<const Choice*>& votes) {
  if (!hooks.options.empty()) return hooks.options;
  if (const auto* q = std::get_if<Question>(&query); q && !q->options.empty()) return option_letters(q->options.size());
  std::set<std::string> seen;
  for (const auto* v : votes) seen.insert(v->option);
  return {seen.begin(), seen.end()};
}

}  // namespace detail

/// C_{k+1} from the per-client answers, consumed in ascending client-id order.
inline QuerySet aggregate(const std::map<int, std::vector<Label>>& per_client, Aggregation strategy,
                          const QuerySet& previous, const AggregationHooks& hooks = {}) {
  if (per_client.empty()) throw ConfigError("aggregate: no client answers");
  const std::size_t m = previous.size();
  for (const auto& [id, answers] : per_client)
    if (answers.size() != m)
      throw ConfigError("aggregate: client " + std::to_string(id) + " answered " + std::to_string(answers.size()) +
                        " of " + std::to_string(m) + " queries");
  QuerySet next{previous.inputs, {}, previous.round + 1};
  next.labels.reserve(m);
  const MostFrequentFuser default_fuser;
  const TokenOverlapJudge default_judge;
  const Fuser& fuser = hooks.fuser ? *hooks.fuser : default_fuser;
  const Judge& judge = hooks.judge ? *hooks.judge : default_judge;

  for (std::size_t q = 0; q < m; ++q) {
    switch (strategy) {
      case Aggregation::average: {
        double sum = 0.0;
        for (const auto& [id, answers] : per_client) sum += real_of(answers[q]);
        next.labels.push_back(Real{sum / static_cast<double>(per_client.size())});
        break;
      }
      case Aggregation::majority: {
        std::vector<const Choice*> votes;
        for (const auto& [id, answers] : per_client) {
          const auto* c = std::get_if<Choice>(&answers[q]);
          if (!c) throw ConfigError("aggregate: majority vote needs choice labels");
          if (!c->abstain()) votes.push_back(c);
        }
        if (votes.empty()) {
          next.labels.push_back(previous.labels[q]);
          break;
        }
        const auto order = detail::option_order(hooks, previous.inputs[q], votes);
        std::vector<int> count(order.size(), 0);
        for (const auto* v : votes) {
          auto it = std::find(order.begin(), order.end(), v->option);
          if (it != order.end()) ++count[static_cast<std::size_t>(it - order.begin())];
        }
        const auto best = std::max_element(count.begin(), count.end()) - count.begin();  // first max = lowest index
        next.labels.push_back(count[static_cast<std::size_t>(best)] > 0 ? Label{Choice{order[static_cast<std::size_t>(best)]}}
                                                                        : previous.labels[q]);
        break;
      }
      case Aggregation::fusion: {
        std::vector<Text> answers;
        for (const auto& [id, a] : per_client) {
          const auto* t = std::get_if<Text>(&a[q]);
          if (!t) throw ConfigError("aggregate: fusion needs text labels");
          answers.push_back(*t);
        }
        const auto* prev = std::get_if<Text>(&previous.labels[q]);
        if (!prev) throw ConfigError("aggregate: fusion needs a text previous answer");
        Text candidate = fuser.fuse(answers);
        next.labels.push_back(judge.better(candidate, *prev, answers, q) ? Label{std::move(candidate)} : Label{*prev});
        break;
      }
    }
  }
  return next;
}

// Initialization -------------------------------------------------------------

/// C_1. `zeros` gives the empty label of the variant: Real(0), "" or abstain.
inline QuerySet init_labels(std::span<const Input> queries, InitMode mode, LabelKind kind, LmBackend* backend,
                            const GenerationParams& params, std::uint64_t seed,
                            const std::vector<std::string>& options = {}) {
  QuerySet c1;
  c1.round = 1;
  c1.inputs.assign(queries.begin(), queries.end());
  std::mt19937_64 rng(seed);
  for (const auto& q : queries) {
    switch (mode) {
      case InitMode::zeros:
        if (kind == LabelKind::real) c1.labels.push_back(Real{0.0});
        else if (kind == LabelKind::text) c1.labels.push_back(Text{});
        else c1.labels.push_back(Choice{});
        break;
      case InitMode::random:
        if (kind == LabelKind::real) {
          c1.labels.push_back(Real{std::normal_distribution<double>(0.0, 1.0)(rng)});
        } else if (kind == LabelKind::choice) {
          auto opts = options;
          if (opts.empty())
            if (const auto* qq = std::get_if<Question>(&q)) opts = option_letters(qq->options.size());
          if (opts.empty()) throw ConfigError("random init needs an option set");
          c1.labels.push_back(Choice{opts[std::uniform_int_distribution<std::size_t>(0, opts.size() - 1)(rng)]});
        } else {
          throw ConfigError("random init is not defined for text labels");
        }
        break;
      case InitMode::backend_generated:
        if (!backend) throw ConfigError("backend_generated init requires a backend");
        c1.labels.push_back(backend->answer({}, q, params, CallContext{0, 0}));
        break;
    }
  }
  return c1;
}

// Client steps ---------------------------------------------------------------

/// Per-client state. `active` lists the D^i indices kept by local filtering.
template <ExampleStore Store>
struct ClientState {
  int client_id = 0;
  const Store* original = nullptr;
  std::vector<std::size_t> active;
  std::vector<Vector> embeddings;  // of original->input(active[j])
  std::optional<ClientDataset> relabeled;
  LmBackend* backend = nullptr;
};

/// Everything a step needs besides the client.
struct StepContext {
  const ProtocolConfig* config = nullptr;
  const GenerationParams* generation = nullptr;
  const Embedder* embedder = nullptr;
  std::vector<Vector> query_embeddings;  // server queries
  const ClientDataset* server_reference = nullptr;
  std::vector<Vector> reference_embeddings;
  int round = 1;

  std::size_t c() const { return static_cast<std::size_t>(config->context_count); }
  bool filter() const { return config->filter_context; }
};

template <ExampleStore Store>
ClientState<Store> make_client_state(const Store& store, LmBackend* backend, std::span<const Input> queries,
                                     const StepContext& ctx) {
  ClientState<Store> st;
  st.client_id = store.client_id;
  st.original = &store;
  st.backend = backend;
  std::vector<Vector> all;
  for (std::size_t i = 0; i < store.size(); ++i) all.push_back(ctx.embedder->embed(store.input(i)));
  if (ctx.filter() && store.size() > 0 && !queries.empty()) {
    st.active = knn_filter_indices(all, ctx.query_embeddings, ctx.c());
  } else {
    st.active.resize(store.size());
    std::iota(st.active.begin(), st.active.end(), 0);
  }
  for (auto i : st.active) st.embeddings.push_back(all[i]);
  return st;
}

namespace detail {

/// Indices into a pool to use as context for one query.
inline std::vector<std::size_t> select_context(std::span<const Vector> pool, const Vector& query, const StepContext& ctx) {
  if (ctx.filter()) return nearest_indices(pool, query, ctx.c());
  std::vector<std::size_t> all(pool.size());
  std::iota(all.begin(), all.end(), 0);
  return all;
}

}  // namespace detail

/// Step 1: D_k^i, the client's own inputs relabelled by ICL on C_k.
template <ExampleStore Store>
ClientDataset step1_relabel(const ClientState<Store>& client, const QuerySet& c_k, const StepContext& ctx) {
  if (c_k.labels.size() != c_k.inputs.size()) throw ConfigError("step 1: C_k has unlabelled queries");
  ClientDataset out{client.client_id, {}};
  out.examples.reserve(client.active.size());
  const CallContext call{client.client_id, ctx.round};
  for (std::size_t j = 0; j < client.active.size(); ++j) {
    const Input& x = client.original->input(client.active[j]);
    std::vector<Example> context;
    for (auto m : detail::select_context(ctx.query_embeddings, client.embeddings[j], ctx))
      context.push_back({c_k.inputs[m], c_k.labels[m], std::nullopt});
    out.examples.push_back({x, client.backend->answer(context, x, *ctx.generation, call), std::nullopt});
  }
  return out;
}

/// Step 2: C_{k+1}^i, the client's answers to every server query.
template <ExampleStore Store>
std::vector<Label> step2_answer(const ClientState<Store>& client, std::span<const Input> queries, const StepContext& ctx) {
  const Variant v = ctx.config->variant;
  const bool uses_original = v == Variant::fedicl || v == Variant::fedicl_gt || v == Variant::fedicl_ub;
  const bool uses_relabeled = v == Variant::fedicl || v == Variant::fedicl_free;
  if (uses_relabeled && !client.relabeled) throw ConfigError("step 2: step 1 has not run this round");

  // Pool layout: [D^i (active) | D_k^i] or the server reference for fedicl_lb.
  std::vector<Vector> pool;
  const std::size_t n_orig = uses_original ? client.active.size() : 0;
  if (uses_original) pool.insert(pool.end(), client.embeddings.begin(), client.embeddings.end());
  if (uses_relabeled) pool.insert(pool.end(), client.embeddings.begin(), client.embeddings.end());
  if (v == Variant::fedicl_lb) {
    if (!ctx.server_reference || ctx.server_reference->size() == 0)
      throw ConfigError("fedicl_lb needs a non-empty server reference set");
    pool = ctx.reference_embeddings;
  }

  std::vector<Label> answers;
  answers.reserve(queries.size());
  const CallContext call{client.client_id, ctx.round};
  for (std::size_t m = 0; m < queries.size(); ++m) {
    std::vector<Example> context;
    for (auto idx : detail::select_context(pool, ctx.query_embeddings[m], ctx)) {
      if (v == Variant::fedicl_lb) {
        context.push_back(ctx.server_reference->examples[idx]);
      } else if (idx < n_orig) {
        const auto n = client.active[idx];
        context.push_back({client.original->input(n), client.original->label(n), std::nullopt});
      } else {
        context.push_back(client.relabeled->examples[idx - n_orig]);
      }
    }
    answers.push_back(client.backend->answer(context, queries[m], *ctx.generation, call));
  }
  return answers;
}

// Engine ---------------------------------------------------------------------

/// A payload crossing the server/client boundary.
struct Message {
  int round = 1;
  Direction direction = Direction::downlink;
  int client_id = 0;
  PayloadKind kind = PayloadKind::labels;
  std::vector<Input> inputs;
  std::vector<Label> labels;
};

struct RunOptions {
  GenerationParams generation;
  std::shared_ptr<const Embedder> embedder;  // null = identity (vectors) or hashing (text)
  const Fuser* fuser = nullptr;
  const Judge* judge = nullptr;
  ClientDataset server_reference;  // fedicl_lb context source
  std::optional<LabelKind> label_kind;
  LmBackend* init_backend = nullptr;  // null = first backend
  std::function<void(const Message&)> observer;
  std::function<void(const RoundTrace&, const CommLedger&)> on_round;
};

struct RunResult {
  QuerySet initial;  // C_1
  std::vector<RoundTrace> traces;
  CommLedger ledger;
};

/// Label variant implied by the queries: covariate -> real, options -> choice, else text.
inline LabelKind infer_label_kind(std::span<const Input> queries) {
  if (queries.empty()) throw ConfigError("protocol: the server query set is empty");
  if (is_vector(queries.front())) return LabelKind::real;
  return std::get<Question>(queries.front()).options.empty() ? LabelKind::text : LabelKind::choice;
}

namespace detail {

inline std::uint64_t total_size(std::span<const Input> xs) {
  std::uint64_t s = 0;
  for (const auto& x : xs) s += payload_size(x);
  return s;
}

inline std::uint64_t total_size(std::span<const Label> ls) {
  std::uint64_t s = 0;
  for (const auto& l : ls) s += payload_size(l);
  return s;
}

}  // namespace detail

template <ExampleStore Store>
RunResult run(const ProtocolConfig& config, std::span<const Store> clients, std::span<const Input> queries,
              std::span<const std::shared_ptr<LmBackend>> backends, const RunOptions& opts = {}) {
  const LabelKind kind = opts.label_kind ? *opts.label_kind : infer_label_kind(queries);
  config.validate_for(kind);
  opts.generation.validate();
  if (clients.empty()) throw ConfigError("protocol: no clients");
  if (backends.empty()) throw ConfigError("protocol: no backends");
  if (backends.size() != 1 && backends.size() != clients.size())
    throw ConfigError("protocol: need one backend or one per client");
  for (const auto& b : backends)
    if (!b) throw ConfigError("protocol: null backend");
  {
    std::set<int> ids;
    for (const auto& c : clients)
      if (!ids.insert(c.client_id).second) throw ConfigError("protocol: duplicate client id " + std::to_string(c.client_id));
  }

  if (config.variant == Variant::fedicl_ub) {
    // All data on one client, then a single ground-truth-context round.
    ClientDataset merged{1, {}};
    for (const auto& c : clients) {
      auto m = materialize(c);
      merged.examples.insert(merged.examples.end(), m.examples.begin(), m.examples.end());
    }
    ProtocolConfig single = config;
    single.variant = Variant::fedicl_gt;
    RunOptions o = opts;
    o.label_kind = kind;
    const std::vector<ClientDataset> one{std::move(merged)};
    const std::vector<std::shared_ptr<LmBackend>> b{backends.front()};
    return run<ClientDataset>(single, one, queries, b, o);
  }

  std::shared_ptr<const Embedder> embedder = opts.embedder;
  if (!embedder) {
    if (kind == LabelKind::real) embedder = std::make_shared<IdentityEmbedder>();
    else embedder = std::make_shared<HashingEmbedder>();
  }

  StepContext ctx;
  ctx.config = &config;
  ctx.generation = &opts.generation;
  ctx.embedder = embedder.get();
  ctx.query_embeddings = embed_all(std::vector<Input>(queries.begin(), queries.end()), *embedder);
  ctx.server_reference = &opts.server_reference;
  ctx.reference_embeddings = embed_all(inputs_of(opts.server_reference), *embedder);

  const bool serialize =
      !config.parallel_clients ||
      std::any_of(backends.begin(), backends.end(), [](const auto& b) { return !b->concurrent_safe(); });
  std::vector<ClientState<Store>> states;
  for (std::size_t i = 0; i < clients.size(); ++i) {
    LmBackend* b = (backends.size() == 1 ? backends.front() : backends[i]).get();
    states.push_back(make_client_state(clients[i], b, queries, ctx));
  }
  std::sort(states.begin(), states.end(), [](const auto& a, const auto& b) { return a.client_id < b.client_id; });

  RunResult result;
  LmBackend* init_backend = opts.init_backend ? opts.init_backend : backends.front().get();
  result.initial = init_labels(queries, config.init_mode, kind, init_backend, opts.generation,
                               derive_seed(config.seed, "init"), config.options);
  const Unit unit = kind == LabelKind::real ? Unit::bits : Unit::tokens;
  auto send = [&](Message msg, std::uint64_t size) {
    result.ledger.record(msg.round, msg.direction, msg.client_id, static_cast<std::int64_t>(size), unit, msg.kind);
    if (opts.observer) opts.observer(msg);
  };

  AggregationHooks hooks{opts.fuser, opts.judge, config.options};
  QuerySet current = result.initial;
  const bool iterative = !single_shot(config.variant);
  const std::vector<Input> query_vec(queries.begin(), queries.end());

  for (int k = 1; k <= config.effective_rounds(); ++k) {
    ctx.round = k;
    for (const auto& st : states) {
      if (k == 1 || config.charge_questions_every_round)
        send({k, Direction::downlink, st.client_id, PayloadKind::questions, query_vec, {}},
             detail::total_size(std::span<const Input>(query_vec)));
      if (iterative)
        send({k, Direction::downlink, st.client_id, PayloadKind::labels, {}, current.labels},
             detail::total_size(std::span<const Label>(current.labels)));
      if (config.variant == Variant::fedicl_lb) {
        // The server ships its retrieved reference examples as context.
        Message inputs{k, Direction::downlink, st.client_id, PayloadKind::questions, {}, {}};
        Message labels{k, Direction::downlink, st.client_id, PayloadKind::labels, {}, {}};
        for (std::size_t m = 0; m < queries.size(); ++m)
          for (auto idx : detail::select_context(ctx.reference_embeddings, ctx.query_embeddings[m], ctx)) {
            inputs.inputs.push_back(opts.server_reference.examples[idx].input);
            labels.labels.push_back(opts.server_reference.examples[idx].label);
          }
        const auto in_size = detail::total_size(std::span<const Input>(inputs.inputs));
        const auto label_size = detail::total_size(std::span<const Label>(labels.labels));
        send(std::move(inputs), in_size);
        send(std::move(labels), label_size);
      }
    }

    auto client_round = [&](ClientState<Store>& st) {
      try {
        if (iterative) st.relabeled = step1_relabel(st, current, ctx);
        return step2_answer(st, queries, ctx);
      } catch (const BackendError&) {
        throw;
      } catch (const ConfigError&) {
        throw;
      } catch (const std::exception& e) {
        throw BackendError(st.client_id, "client " + std::to_string(st.client_id) + ": " + e.what());
      }
    };

    RoundTrace trace;
    trace.round = k;
    if (serialize || states.size() == 1) {
      for (auto& st : states) trace.per_client_answers[st.client_id] = client_round(st);
    } else {
      std::vector<std::future<std::vector<Label>>> futures;
      for (auto& st : states) futures.push_back(std::async(std::launch::async, client_round, std::ref(st)));
      std::exception_ptr first_error;
      for (std::size_t i = 0; i < states.size(); ++i) {
        try {
          trace.per_client_answers[states[i].client_id] = futures[i].get();
        } catch (...) {
          if (!first_error) first_error = std::current_exception();
        }
      }
      if (first_error) std::rethrow_exception(first_error);
    }

    for (const auto& [id, answers] : trace.per_client_answers)
      send({k, Direction::uplink, id, PayloadKind::answers, query_vec, answers},
           detail::total_size(std::span<const Label>(answers)));

    trace.aggregated = aggregate(trace.per_client_answers, config.aggregation, current, hooks);
    trace.aggregated.round = k + 1;
    current = trace.aggregated;
    result.traces.push_back(trace);
    if (opts.on_round) opts.on_round(result.traces.back(), result.ledger);
  }
  return result;
}

template <ExampleStore Store>
RunResult run(const ProtocolConfig& config, const std::vector<Store>& clients, const std::vector<Input>& queries,
              const std::vector<std::shared_ptr<LmBackend>>& backends, const RunOptions& opts = {}) {
  return run<Store>(config, std::span<const Store>(clients), std::span<const Input>(queries),
                    std::span<const std::shared_ptr<LmBackend>>(backends), opts);
}

}  // namespace fedicl
