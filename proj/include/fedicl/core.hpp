#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace fedicl {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using json = nlohmann::json;

// Errors ---------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed configuration, dataset, or precondition violation at an API boundary.
struct ConfigError : Error {
  using Error::Error;
};

/// LM backend failed after exhausting its retries.
struct BackendError : Error {
  BackendError(int client_id, const std::string& what)
      : Error(what), client_id(client_id) {}
  int client_id;
};

/// (2I - H_cont) is singular; the configuration has no fixed point.
struct NonContractiveError : Error {
  using Error::Error;
};

// Inputs ---------------------------------------------------------------------

/// A d-dimensional real covariate (regression mode).
struct Covariate {
  Vector values;

  Covariate() = default;
  explicit Covariate(Vector v) : values(std::move(v)) {}
  Covariate(std::initializer_list<double> v) : values(static_cast<Eigen::Index>(v.size())) {
    std::copy(v.begin(), v.end(), values.data());
  }

  std::size_t dim() const { return static_cast<std::size_t>(values.size()); }
  bool finite() const { return values.allFinite(); }

  friend bool operator==(const Covariate& a, const Covariate& b) {
    return a.values.size() == b.values.size() && a.values == b.values;
  }
};

/// A natural-language question, optionally multiple choice.
struct Question {
  std::string text;
  std::vector<std::string> options;

  friend bool operator==(const Question&, const Question&) = default;
};

using Input = std::variant<Covariate, Question>;

inline bool is_vector(const Input& in) { return std::holds_alternative<Covariate>(in); }

inline const Vector& vector_of(const Input& in) {
  if (const auto* c = std::get_if<Covariate>(&in)) return c->values;
  throw ConfigError("expected a real covariate, got a text question");
}

inline const Question& question_of(const Input& in) {
  if (const auto* q = std::get_if<Question>(&in)) return *q;
  throw ConfigError("expected a text question, got a real covariate");
}

// Labels ---------------------------------------------------------------------

struct Real {
  double value = 0.0;
  friend bool operator==(const Real&, const Real&) = default;
};

struct Text {
  std::string answer;
  friend bool operator==(const Text&, const Text&) = default;
};

/// An option label such as "B". The empty option is the abstain label.
struct Choice {
  std::string option;
  bool abstain() const { return option.empty(); }
  friend bool operator==(const Choice&, const Choice&) = default;
};

using Label = std::variant<Real, Text, Choice>;

enum class LabelKind { real, text, choice };

inline LabelKind kind_of(const Label& l) { return static_cast<LabelKind>(l.index()); }

inline std::string_view to_string(LabelKind k) {
  switch (k) {
    case LabelKind::real: return "real";
    case LabelKind::text: return "text";
    case LabelKind::choice: return "choice";
  }
  return "?";
}

inline double real_of(const Label& l) {
  if (const auto* r = std::get_if<Real>(&l)) return r->value;
  throw ConfigError("expected a real label, got " + std::string(to_string(kind_of(l))));
}

/// Printable form of any label; Text and Choice return their string.
inline std::string label_text(const Label& l) {
  return std::visit(
      [](const auto& v) -> std::string {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, Real>) {
          std::ostringstream os;
          os.precision(17);
          os << v.value;
          return os.str();
        } else if constexpr (std::is_same_v<T, Text>) {
          return v.answer;
        } else {
          return v.option;
        }
      },
      l);
}

// Datasets -------------------------------------------------------------------

struct Example {
  Input input;
  Label label;
  std::optional<std::string> category;

  friend bool operator==(const Example&, const Example&) = default;
};

/// D^i: one client's local examples.
struct ClientDataset {
  int client_id = 1;
  std::vector<Example> examples;

  std::size_t size() const { return examples.size(); }
  const Input& input(std::size_t i) const { return examples[i].input; }
  const Label& label(std::size_t i) const { return examples[i].label; }

  friend bool operator==(const ClientDataset&, const ClientDataset&) = default;
};

/// C_k: the server's query inputs with their current labels.
struct QuerySet {
  std::vector<Input> inputs;
  std::vector<Label> labels;
  int round = 1;

  std::size_t size() const { return inputs.size(); }

  friend bool operator==(const QuerySet&, const QuerySet&) = default;
};

/// Checks shared dimension and label variant across examples; returns d (0 for text).
inline std::size_t check_consistent(const std::vector<Example>& examples) {
  if (examples.empty()) return 0;
  const bool vec = is_vector(examples.front().input);
  const auto dim = vec ? vector_of(examples.front().input).size() : 0;
  const auto kind = kind_of(examples.front().label);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& e = examples[i];
    if (is_vector(e.input) != vec)
      throw ConfigError("example " + std::to_string(i) + ": mixed covariate/question inputs");
    if (vec) {
      const auto& v = vector_of(e.input);
      if (v.size() != dim)
        throw ConfigError("example " + std::to_string(i) + ": dimension " + std::to_string(v.size()) +
                          " != " + std::to_string(dim));
      if (!v.allFinite()) throw ConfigError("example " + std::to_string(i) + ": non-finite covariate");
    }
    if (kind_of(e.label) != kind)
      throw ConfigError("example " + std::to_string(i) + ": mixed label variants");
  }
  return static_cast<std::size_t>(dim);
}

// Round trace ----------------------------------------------------------------

/// Record of one protocol round k: C_{k+1}^i per client and the aggregate C_{k+1}.
struct RoundTrace {
  int round = 1;
  std::map<int, std::vector<Label>> per_client_answers;
  QuerySet aggregated;
  std::optional<Vector> theory_w;  // w_{k+1} when the theory cross-check runs

  friend bool operator==(const RoundTrace& a, const RoundTrace& b) {
    if (a.round != b.round || a.per_client_answers != b.per_client_answers ||
        !(a.aggregated == b.aggregated) || a.theory_w.has_value() != b.theory_w.has_value())
      return false;
    return !a.theory_w || (a.theory_w->size() == b.theory_w->size() && *a.theory_w == *b.theory_w);
  }
};

// Communication ledger -------------------------------------------------------

enum class Direction { downlink, uplink };
enum class Unit { bits, tokens };

/// What a ledger entry carried. Only `answers` may travel uplink in the protocol.
enum class PayloadKind { questions, labels, answers, lm_prompt, lm_completion };

inline constexpr std::uint64_t kBitsPerReal = 64;
inline constexpr std::uint64_t kMaxAnswerTokens = 256;

inline std::string_view to_string(Direction d) { return d == Direction::downlink ? "downlink" : "uplink"; }
inline std::string_view to_string(Unit u) { return u == Unit::bits ? "bits" : "tokens"; }
inline std::string_view to_string(PayloadKind k) {
  switch (k) {
    case PayloadKind::questions: return "questions";
    case PayloadKind::labels: return "labels";
    case PayloadKind::answers: return "answers";
    case PayloadKind::lm_prompt: return "lm_prompt";
    case PayloadKind::lm_completion: return "lm_completion";
  }
  return "?";
}

struct LedgerEntry {
  int round = 1;
  Direction direction = Direction::downlink;
  int client_id = 1;
  std::uint64_t payload_units = 0;
  Unit unit = Unit::bits;
  PayloadKind kind = PayloadKind::labels;

  friend bool operator==(const LedgerEntry&, const LedgerEntry&) = default;
};

class CommLedger {
 public:
  /// Appends one entry. Negative payloads are rejected.
  void record(int round, Direction direction, int client_id, std::int64_t payload_units, Unit unit,
              PayloadKind kind = PayloadKind::labels) {
    if (payload_units < 0) throw ConfigError("ledger: negative payload " + std::to_string(payload_units));
    entries_.push_back({round, direction, client_id, static_cast<std::uint64_t>(payload_units), unit, kind});
  }

  void append(const CommLedger& other) {
    entries_.insert(entries_.end(), other.entries_.begin(), other.entries_.end());
  }

  std::uint64_t total(Unit unit) const {
    std::uint64_t sum = 0;
    for (const auto& e : entries_)
      if (e.unit == unit) sum += e.payload_units;
    return sum;
  }

  std::map<Unit, std::uint64_t> totals() const {
    std::map<Unit, std::uint64_t> out;
    for (const auto& e : entries_) out[e.unit] += e.payload_units;
    return out;
  }

  /// Sum of one round's entries in `unit`.
  std::uint64_t round_total(int round, Unit unit) const {
    std::uint64_t sum = 0;
    for (const auto& e : entries_)
      if (e.round == round && e.unit == unit) sum += e.payload_units;
    return sum;
  }

  const std::vector<LedgerEntry>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }

  std::string to_csv() const {
    std::ostringstream os;
    os << "round,direction,client_id,payload_units,unit\n";
    for (const auto& e : entries_)
      os << e.round << ',' << to_string(e.direction) << ',' << e.client_id << ',' << e.payload_units << ','
         << to_string(e.unit) << '\n';
    return os.str();
  }

  static CommLedger from_csv(std::string_view csv) {
    CommLedger ledger;
    std::istringstream is{std::string(csv)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
      ++line_no;
      if (line_no == 1 || line.empty()) continue;
      std::vector<std::string> cols;
      std::stringstream ls(line);
      for (std::string c; std::getline(ls, c, ',');) cols.push_back(c);
      if (cols.size() != 5) throw ConfigError("ledger csv line " + std::to_string(line_no) + ": expected 5 columns");
      LedgerEntry e;
      e.round = std::stoi(cols[0]);
      if (cols[1] == "downlink") e.direction = Direction::downlink;
      else if (cols[1] == "uplink") e.direction = Direction::uplink;
      else throw ConfigError("ledger csv line " + std::to_string(line_no) + ": bad direction");
      e.client_id = std::stoi(cols[2]);
      e.payload_units = std::stoull(cols[3]);
      if (cols[4] == "bits") e.unit = Unit::bits;
      else if (cols[4] == "tokens") e.unit = Unit::tokens;
      else throw ConfigError("ledger csv line " + std::to_string(line_no) + ": bad unit");
      ledger.entries_.push_back(e);
    }
    return ledger;
  }

 private:
  std::vector<LedgerEntry> entries_;
};

/// Whitespace-delimited token count.
inline std::uint64_t count_tokens(std::string_view text) {
  std::uint64_t n = 0;
  bool in_token = false;
  for (char c : text) {
    const bool space = std::isspace(static_cast<unsigned char>(c)) != 0;
    if (!space && !in_token) ++n;
    in_token = !space;
  }
  return n;
}

/// Transmitted size of one label: 64 bits for reals, capped token count otherwise.
inline std::uint64_t payload_size(const Label& l) {
  if (std::holds_alternative<Real>(l)) return kBitsPerReal;
  return std::min(count_tokens(label_text(l)), kMaxAnswerTokens);
}

inline std::uint64_t payload_size(const Input& in) {
  if (const auto* c = std::get_if<Covariate>(&in)) return kBitsPerReal * c->dim();
  const auto& q = std::get<Question>(in);
  std::uint64_t n = count_tokens(q.text);
  for (const auto& o : q.options) n += count_tokens(o);
  return std::min(n, kMaxAnswerTokens);
}

// Seeds ----------------------------------------------------------------------

/// Derives an independent substream seed from a root seed and a stream name.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view stream) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char c : stream) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::uint64_t z = root ^ h;  // splitmix64 finalizer
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// JSON -----------------------------------------------------------------------

inline json vector_to_json(const Vector& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline Vector vector_from_json(const json& j) {
  if (!j.is_array()) throw ConfigError("expected an array of numbers");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw ConfigError("expected an array of numbers");
    v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  }
  return v;
}

/// Row-major nested arrays.
inline json matrix_to_json(const Matrix& m) {
  json a = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    a.push_back(std::move(row));
  }
  return a;
}

inline Matrix matrix_from_json(const json& j) {
  if (!j.is_array() || j.empty()) throw ConfigError("expected a non-empty matrix");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = static_cast<Eigen::Index>(j[0].size());
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) throw ConfigError("ragged matrix");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

inline void to_json(json& j, const Label& l) {
  std::visit(
      [&](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, Real>) j = json{{"real", v.value}};
        else if constexpr (std::is_same_v<T, Text>) j = json{{"text", v.answer}};
        else j = json{{"choice", v.option}};
      },
      l);
}

inline void from_json(const json& j, Label& l) {
  if (j.contains("real")) l = Real{j.at("real").get<double>()};
  else if (j.contains("text")) l = Text{j.at("text").get<std::string>()};
  else if (j.contains("choice")) l = Choice{j.at("choice").get<std::string>()};
  else throw ConfigError("label must have one of real/text/choice");
}

inline void to_json(json& j, const Input& in) {
  if (const auto* c = std::get_if<Covariate>(&in)) {
    j = vector_to_json(c->values);
  } else {
    const auto& q = std::get<Question>(in);
    if (q.options.empty()) j = q.text;
    else j = json{{"question", q.text}, {"options", q.options}};
  }
}

inline void from_json(const json& j, Input& in) {
  if (j.is_array()) in = Covariate(vector_from_json(j));
  else if (j.is_string()) in = Question{j.get<std::string>(), {}};
  else if (j.is_object()) in = Question{j.at("question").get<std::string>(), j.value("options", std::vector<std::string>{})};
  else throw ConfigError("input must be an array, string, or question object");
}

inline void to_json(json& j, const QuerySet& q) {
  j = json{{"round", q.round}, {"inputs", q.inputs}, {"labels", q.labels}};
}

inline void from_json(const json& j, QuerySet& q) {
  q.round = j.at("round").get<int>();
  q.inputs = j.at("inputs").get<std::vector<Input>>();
  q.labels = j.at("labels").get<std::vector<Label>>();
  if (q.inputs.size() != q.labels.size()) throw ConfigError("query set: inputs/labels length mismatch");
}

inline void to_json(json& j, const RoundTrace& t) {
  json answers = json::object();
  for (const auto& [id, labels] : t.per_client_answers) answers[std::to_string(id)] = labels;
  j = json{{"round", t.round}, {"per_client_answers", answers}, {"aggregated", t.aggregated}};
  if (t.theory_w) j["theory_w"] = vector_to_json(*t.theory_w);
}

inline void from_json(const json& j, RoundTrace& t) {
  t.round = j.at("round").get<int>();
  t.per_client_answers.clear();
  for (const auto& [id, labels] : j.at("per_client_answers").items())
    t.per_client_answers[std::stoi(id)] = labels.get<std::vector<Label>>();
  t.aggregated = j.at("aggregated").get<QuerySet>();
  if (j.contains("theory_w")) t.theory_w = vector_from_json(j.at("theory_w"));
  else t.theory_w.reset();
}

/// One dataset JSONL record: {x|question[,options], y|answer, category?}.
inline json example_to_json(const Example& e) {
  json j = json::object();
  if (const auto* c = std::get_if<Covariate>(&e.input)) {
    j["x"] = vector_to_json(c->values);
  } else {
    const auto& q = std::get<Question>(e.input);
    j["question"] = q.text;
    if (!q.options.empty()) j["options"] = q.options;
  }
  std::visit(
      [&](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, Real>) j["y"] = v.value;
        else if constexpr (std::is_same_v<T, Text>) j["answer"] = v.answer;
        else j["answer"] = v.option;
      },
      e.label);
  if (e.category) j["category"] = *e.category;
  return j;
}

inline Example example_from_json(const json& j) {
  Example e;
  if (!j.is_object()) throw ConfigError("record is not an object");
  if (j.contains("x")) {
    e.input = Covariate(vector_from_json(j.at("x")));
  } else if (j.contains("question")) {
    e.input = Question{j.at("question").get<std::string>(), j.value("options", std::vector<std::string>{})};
  } else {
    throw ConfigError("record needs `x` or `question`");
  }
  if (j.contains("y")) {
    e.label = Real{j.at("y").get<double>()};
  } else if (j.contains("answer")) {
    auto a = j.at("answer").get<std::string>();
    if (std::get_if<Question>(&e.input) && !std::get<Question>(e.input).options.empty()) e.label = Choice{a};
    else e.label = Text{a};
  } else {
    throw ConfigError("record needs `y` or `answer`");
  }
  if (j.contains("category")) e.category = j.at("category").get<std::string>();
  return e;
}

}  // namespace fedicl
