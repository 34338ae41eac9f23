#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "fedicl/backend.hpp"
#include "support/helpers.hpp"

using namespace fedicl;

namespace {

std::filesystem::path test_dir() {
  const char* d = std::getenv("FEDICL_TEST_DIR");
  return d ? std::filesystem::path(d) : std::filesystem::path(__FILE__).parent_path();
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::vector<Example> mc_fixture() {
  return {{Question{"Which planet is known as the red planet?", {"Venus", "Mars", "Jupiter", "Saturn"}}, Choice{"B"}, {}},
          {Question{"What is 7 times 6?", {"42", "36", "48", "49"}}, Choice{"A"}, {}}};
}

const Input kMcQuery = Question{"Which gas do plants absorb from the air?", {"Oxygen", "Nitrogen", "Carbon dioxide", "Helium"}};

}  // namespace

TEST(LsaBackendTest, DelegatesToClosedForm) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 100; ++t) {
    const Eigen::Index d = 1 + t % 4;
    const Matrix lambda = testing_support::random_spd(d, rng);
    auto b = LsaBackend::from_lambda(lambda, 10);
    std::vector<Example> ctx;
    for (int i = 0; i < 1 + t % 6; ++i)
      ctx.push_back({Covariate(testing_support::random_vector(d, rng)), Real{std::normal_distribution<double>()(rng)}, {}});
    const Vector q = testing_support::random_vector(d, rng);
    GenerationParams p;
    p.temperature = 0.7 * (t % 3);
    EXPECT_EQ(real_of(b->answer(ctx, Covariate(q), p)), predict_closed_form(to_points(ctx), q, gamma(lambda, 10)));
  }
}

TEST(LsaBackendTest, PermutationInvariant) {
  std::mt19937_64 rng(2);
  auto b = LsaBackend::from_lambda(Matrix::Identity(3, 3), 5);
  std::vector<Example> ctx;
  for (int i = 0; i < 6; ++i) ctx.push_back({Covariate(testing_support::random_vector(3, rng)), Real{double(i)}, {}});
  const Covariate q(testing_support::random_vector(3, rng));
  const double a = real_of(b->answer(ctx, q, {}));
  std::reverse(ctx.begin(), ctx.end());
  EXPECT_NEAR(real_of(b->answer(ctx, q, {})), a, 1e-12);
}

TEST(LsaBackendTest, RejectsText) {
  auto b = LsaBackend::from_lambda(Matrix::Identity(1, 1), 5);
  EXPECT_THROW(b->answer({}, Question{"q", {}}, {}), ConfigError);
}

TEST(GenerationDefaults, MatchSettings) {
  GenerationParams p;
  EXPECT_EQ(p.temperature, 0.1);
  EXPECT_EQ(p.max_tokens, 256);
  EXPECT_EQ(p.context_count, 5);
  p.max_tokens = 0;
  EXPECT_THROW(p.validate(), ConfigError);
}

TEST(Prompt, ZeroExemplarsIsHeaderAndQuery) {
  const std::string p = render_prompt({}, Question{"Why is the sky blue?", {}}, "open_qa_v1");
  EXPECT_EQ(p, "Answer the question truthfully and concisely. Worked examples are given first.\n\nQuestion: Why is the sky "
               "blue?\nAnswer:");
}

TEST(Prompt, ExemplarOrderPreservedAndQueryLast) {
  const auto ctx = mc_fixture();
  const std::string p = render_prompt(ctx, kMcQuery, "multiple_choice_v1");
  const auto first = p.find("red planet");
  const auto second = p.find("7 times 6");
  const auto query = p.find("plants absorb");
  EXPECT_LT(first, second);
  EXPECT_LT(second, query);
  std::vector<Example> swapped{ctx[1], ctx[0]};
  const std::string q = render_prompt(swapped, kMcQuery, "multiple_choice_v1");
  EXPECT_LT(q.find("7 times 6"), q.find("red planet"));
  EXPECT_EQ(p, render_prompt(ctx, kMcQuery, "multiple_choice_v1"));
}

TEST(Prompt, MultipleChoiceGoldenFile) {
  const std::string expected = read_file(test_dir() / "golden" / "multiple_choice_v1.txt");
  ASSERT_FALSE(expected.empty());
  EXPECT_EQ(render_prompt(mc_fixture(), kMcQuery, "multiple_choice_v1"), expected);
}

TEST(Prompt, UnknownTemplate) { EXPECT_THROW(render_prompt({}, Question{"q", {}}, "chatty_v9"), ConfigError); }

TEST(ParseChoice, Examples) {
  const auto opts = option_letters(4);
  EXPECT_EQ(parse_choice("The answer is (B).", opts).option, "B");
  EXPECT_EQ(parse_choice("b", opts).option, "B");
  EXPECT_TRUE(parse_choice("no idea, sorry", opts).abstain());
  EXPECT_TRUE(parse_choice("", opts).abstain());
  EXPECT_EQ(parse_choice("a reasonable guess is C", opts).option, "C");
  EXPECT_EQ(parse_choice("D) Helium", opts).option, "D");
}
