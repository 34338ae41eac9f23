#pragma once

#include <cctype>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedicl/core.hpp"
#include "fedicl/lsa.hpp"

namespace fedicl {

struct GenerationParams {
  double temperature = 0.1;
  int max_tokens = static_cast<int>(kMaxAnswerTokens);
  int context_count = 5;
  std::string model_name = "gpt-4o-mini";
  int timeout_ms = 30000;
  int max_retries = 3;

  void validate() const {
    if (!(temperature >= 0.0)) throw ConfigError("temperature must be >= 0");
    if (max_tokens < 1) throw ConfigError("max_tokens must be >= 1");
    if (context_count < 1) throw ConfigError("context_count must be >= 1");
    if (timeout_ms < 1) throw ConfigError("timeout_ms must be >= 1");
    if (max_retries < 0) throw ConfigError("max_retries must be >= 0");
  }
};

/// Who is calling and when; lets backends attribute usage.
struct CallContext {
  int client_id = 0;
  int round = 0;
};

/// LM^i: answers a query given in-context examples.
class LmBackend {
 public:
  virtual ~LmBackend() = default;
  virtual Label answer(std::span<const Example> context, const Input& query, const GenerationParams& params,
                       const CallContext& call = {}) = 0;
  virtual std::string descriptor() const = 0;
  /// False means the engine must serialize calls into this backend.
  virtual bool concurrent_safe() const { return true; }
};

/// Closed-form LSA prediction at the pretrained global optimum.
inline double lsa_answer(std::span<const Example> context, const Covariate& query, const ClosedFormPredictor& predictor) {
  return predictor(to_points(context), query.values);
}

class LsaBackend final : public LmBackend {
 public:
  explicit LsaBackend(Matrix gamma) : predictor_(std::move(gamma)) {}

  static std::shared_ptr<LsaBackend> from_lambda(const Matrix& lambda, int t_prompt) {
    return std::make_shared<LsaBackend>(fedicl::gamma(lambda, t_prompt));
  }

  /// Temperature and the other generation settings are ignored.
  Label answer(std::span<const Example> context, const Input& query, const GenerationParams&,
               const CallContext& = {}) override {
    const auto* x = std::get_if<Covariate>(&query);
    if (!x) throw ConfigError("LSA backend cannot answer text questions");
    return Real{lsa_answer(context, *x, predictor_)};
  }

  std::string descriptor() const override { return "lsa-closed-form"; }
  const Matrix& gamma() const { return predictor_.gamma(); }

 private:
  ClosedFormPredictor predictor_;
};

// Prompt templates -----------------------------------------------------------

inline std::string option_letter(std::size_t i) { return std::string(1, static_cast<char>('A' + i)); }

inline std::vector<std::string> option_letters(std::size_t count) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(option_letter(i));
  return out;
}

inline const std::vector<std::string>& template_ids() {
  static const std::vector<std::string> ids{"open_qa_v1", "multiple_choice_v1"};
  return ids;
}

namespace detail {

inline void render_question(std::string& out, const Question& q) {
  out += "Question: " + q.text + "\n";
  for (std::size_t i = 0; i < q.options.size(); ++i) out += option_letter(i) + ". " + q.options[i] + "\n";
}

}  // namespace detail

/// Renders an in-context prompt: header, exemplars in order, then the query.
inline std::string render_prompt(std::span<const Example> context, const Input& query, std::string_view template_id) {
  std::string out;
  if (template_id == "open_qa_v1") {
    out = "Answer the question truthfully and concisely. Worked examples are given first.\n";
  } else if (template_id == "multiple_choice_v1") {
    out = "The following are multiple choice questions. Reply with the letter of the correct option.\n";
  } else {
    throw ConfigError("unknown prompt template: " + std::string(template_id));
  }
  for (const auto& ex : context) {
    out += "\n";
    detail::render_question(out, question_of(ex.input));
    out += "Answer: " + label_text(ex.label) + "\n";
  }
  out += "\n";
  detail::render_question(out, question_of(query));
  out += "Answer:";
  return out;
}

/// Maps free text to one of `options`; an unmatched answer is the abstain label.
/// An exact-case standalone token wins over a case-folded one, so the article
/// "a" does not shadow a later "(C)".
inline Choice parse_choice(std::string_view text, std::span<const std::string> options) {
  std::vector<std::string> tokens;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) cur.push_back(static_cast<char>(c));
    else if (!cur.empty()) tokens.push_back(std::move(cur)), cur.clear();
  }
  if (!cur.empty()) tokens.push_back(cur);
  auto lower = [](std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
  };
  for (const auto& t : tokens)
    for (const auto& o : options)
      if (t == o) return Choice{o};
  for (const auto& t : tokens)
    for (const auto& o : options)
      if (lower(t) == lower(o)) return Choice{o};
  return Choice{};
}

}  // namespace fedicl
